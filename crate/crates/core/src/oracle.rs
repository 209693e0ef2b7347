//! Exact integer optimum by enumeration: every facility subset gets a
//! fixed-facility LP solve followed by price consolidation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::instance::{Instance, Objective};
use crate::lp::{build_base_lp, solve_lp, LpBackend, LpModel, MicroLpBackend, LP_TOL};
use crate::rounding::IntegralSolution;

/// Largest number of subsets [`exact_integer_opt`] enumerates by default.
pub const DEFAULT_SUBSET_CAP: usize = 1 << 16;

/// Best solution over a family of subsets.
#[derive(Clone, Debug)]
pub struct SubsetSearch {
    pub solution: IntegralSolution,
    pub value: f64,
    pub evaluated: usize,
    pub infeasible: usize,
    pub failed: usize,
}

/// Maximum objective over all facility subsets, each solved as a
/// fixed-facility LP and consolidated to single prices. The solution is
/// feasible at distance `R`.
pub fn exact_integer_opt(instance: &Instance, objective: Objective, subset_cap: usize) -> Result<IntegralSolution> {
    Ok(exact_search(instance, objective, subset_cap, &MicroLpBackend)?.solution)
}

/// [`exact_integer_opt`] with search statistics and an explicit backend.
pub fn exact_search(
    instance: &Instance,
    objective: Objective,
    subset_cap: usize,
    backend: &dyn LpBackend,
) -> Result<SubsetSearch> {
    let m = instance.metric.candidates().len();
    let total = if m >= usize::BITS as usize { usize::MAX } else { 1usize << m };
    if total > subset_cap {
        return Err(Error::EnumerationCap(format!(
            "{m} candidates give 2^{m} subsets, above the cap of {subset_cap}"
        )));
    }
    let candidates = instance.metric.candidates().to_vec();
    // Gray-code order: consecutive subsets differ in one facility.
    let subsets = (0..total).map(|i| {
        let code = i ^ (i >> 1);
        (0..m).filter(|b| code >> b & 1 == 1).map(|b| candidates[b]).collect::<Vec<_>>()
    });
    best_over_subsets(instance, objective, subsets.collect(), backend)
}

/// Best consolidated fixed-facility solution among `subsets` (node ids).
/// The empty subset is always evaluated. Ties go to the lexicographically
/// smallest open set, so the result does not depend on evaluation order.
pub fn best_over_subsets(
    instance: &Instance,
    objective: Objective,
    mut subsets: Vec<Vec<usize>>,
    backend: &dyn LpBackend,
) -> Result<SubsetSearch> {
    if !subsets.iter().any(Vec::is_empty) {
        subsets.push(Vec::new());
    }
    let base = build_base_lp(instance, objective)?;
    let outcomes: Vec<SubsetOutcome> =
        subsets.par_iter().map(|s| evaluate_subset(instance, &base, s, backend)).collect();
    let mut search = SubsetSearch {
        solution: IntegralSolution::empty(instance, objective),
        value: 0.0,
        evaluated: outcomes.len(),
        infeasible: 0,
        failed: 0,
    };
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut first_error = None;
    for (outcome, subset) in outcomes.into_iter().zip(&subsets) {
        match outcome {
            SubsetOutcome::Infeasible => search.infeasible += 1,
            SubsetOutcome::Failed(e) => {
                search.failed += 1;
                first_error.get_or_insert(e);
            }
            SubsetOutcome::Solved(sol) => {
                let value = sol.objective_value();
                let mut key = subset.clone();
                key.sort_unstable();
                let better = match &best {
                    None => true,
                    Some((v, k)) => value > *v || (value == *v && key < *k),
                };
                if better {
                    best = Some((value, key));
                    search.value = value;
                    search.solution = sol;
                }
            }
        }
    }
    if best.is_none() && search.failed > 0 {
        let cause = first_error.map_or(String::new(), |e| e.to_string());
        return Err(Error::Solver { status: "error".into(), message: format!("every subset solve failed; first: {cause}") });
    }
    Ok(search)
}

enum SubsetOutcome {
    Solved(IntegralSolution),
    Infeasible,
    Failed(Error),
}

fn evaluate_subset(instance: &Instance, base: &LpModel, subset: &[usize], backend: &dyn LpBackend) -> SubsetOutcome {
    let run = || -> Result<Option<IntegralSolution>> {
        let model = base.with_open_set(subset)?;
        match solve_lp(&model, backend, LP_TOL)? {
            None => Ok(None),
            Some(sol) => Ok(Some(IntegralSolution::from_fractional(&sol, instance)?)),
        }
    };
    match run() {
        Ok(Some(sol)) => SubsetOutcome::Solved(sol),
        Ok(None) => SubsetOutcome::Infeasible,
        Err(e) => SubsetOutcome::Failed(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{Curve, Metric, Node};
    use crate::rounding::verify_feasibility;

    fn pair(distance: f64, l: f64) -> Instance {
        let node = |name: &str| {
            Node::new(
                name,
                Curve::uniform_demand(1.0, 2.0, 3.0, 3, 3.0).unwrap(),
                Curve::uniform_supply(1.0, 0.0, 1.0, 3).unwrap(),
            )
            .unwrap()
        };
        let metric = Metric::new(vec![vec![0.0, distance], vec![distance, 0.0]], vec![0, 1]).unwrap();
        Instance::new(vec![node("a"), node("b")], metric, l, 1.0, 3.0).unwrap()
    }

    #[test]
    fn lower_bound_above_total_demand_gives_zero() {
        let inst = pair(5.0, 10.0);
        let sol = exact_integer_opt(&inst, Objective::Surplus, DEFAULT_SUBSET_CAP).unwrap();
        assert!(sol.facilities.is_empty());
        assert_eq!(sol.objective_value(), 0.0);
    }

    #[test]
    fn separated_pair_opens_both() {
        let inst = pair(5.0, 1.0);
        let sol = exact_integer_opt(&inst, Objective::Surplus, DEFAULT_SUBSET_CAP).unwrap();
        assert_eq!(sol.open_locations(), vec![0, 1]);
        assert!((sol.objective_value() - 4.0).abs() < 1e-9);
        let rep = verify_feasibility(&inst, &sol, 1.0);
        assert!(rep.passed(), "{rep}");
        assert!((rep.surplus - 4.0).abs() < 1e-9);
    }

    #[test]
    fn cap_is_enforced() {
        let inst = pair(5.0, 1.0);
        assert!(matches!(exact_integer_opt(&inst, Objective::Surplus, 3), Err(Error::EnumerationCap(_))));
    }

    #[test]
    fn radius_monotone() {
        for l in [0.5, 1.5, 2.0] {
            let near = exact_integer_opt(&pair(1.0, l), Objective::Surplus, DEFAULT_SUBSET_CAP).unwrap();
            let far = exact_integer_opt(&pair(1.0, l).with_radius(0.5), Objective::Surplus, DEFAULT_SUBSET_CAP).unwrap();
            assert!(near.objective_value() >= far.objective_value() - 1e-9);
        }
    }
}
