//! Central finite-difference gradient oracle.

use crate::error::{Error, Result};
use crate::model::{FusionParams, ParamGrads, ParamGroup, TokenBatch};
use crate::objective::{self, FrozenTargets, Objective};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor of [`relative_error`]; below it errors are absolute.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// `(f(θ+h) − f(θ−h)) / 2h` for every scalar of every tunable group.
/// Frozen groups are left at zero.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &FusionParams, h: f64) -> Result<ParamGrads>
where
    F: FnMut(&FusionParams) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Parameter(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let mut grads = ParamGrads::zeros(params.dims());
    let mut probe = params.clone();
    for group in params.tunable_groups() {
        for i in 0..params.get(group).len() {
            let orig = params.get(group).data[i];
            probe.get_mut(group).data[i] = orig + h;
            let plus = loss_fn(&probe);
            probe.get_mut(group).data[i] = orig - h;
            let minus = loss_fn(&probe);
            probe.get_mut(group).data[i] = orig;
            let oracle = || Error::Oracle { group: group.name().to_string(), index: i };
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                (Err(e), _) | (_, Err(e)) if !e.is_numeric() => return Err(e),
                _ => return Err(oracle()),
            };
            grads.groups[group.index()][i] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grads)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub group: ParamGroup,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compares `backward` against the oracle for `objective` on `batch`.
/// Anchors and reliable sets are captured at `params` and held fixed while
/// probing, matching their constant treatment in the reverse pass.
pub fn check_objective(
    batch: &TokenBatch,
    params: &FusionParams,
    objective: &Objective,
    h: f64,
) -> Result<GradCheckReport> {
    let frozen = FrozenTargets::capture(batch, params, objective.k)?;
    let (graph, _) = objective::build(batch, params, objective, Some(&frozen))?;
    let mut analytic = params.clone();
    objective::backward(&graph, &mut analytic)?;
    let numeric = finite_diff_grad(|p| objective::value_with_targets(batch, p, objective, &frozen), params, h)?;
    let groups = params
        .tunable_groups()
        .into_iter()
        .map(|group| {
            let max_rel_err = analytic
                .get(group)
                .grad
                .iter()
                .zip(numeric.get(group))
                .map(|(&a, &b)| relative_error(a, b))
                .fold(0.0, f64::max);
            GroupError { group, max_rel_err }
        })
        .collect();
    Ok(GradCheckReport { loss: graph.value(), groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use approx::assert_abs_diff_eq;

    fn scalar_params(theta: f64) -> FusionParams {
        let mut p = FusionParams::zeros(ModelDims::new(1, 1, 1, 1, 2));
        p.set_tunable(&[ParamGroup::BQ]);
        p.get_mut(ParamGroup::BQ).data[0] = theta;
        p
    }

    #[test]
    fn quadratic() {
        let g = finite_diff_grad(|p| Ok(p.get(ParamGroup::BQ).data[0].powi(2)), &scalar_params(3.0), 1e-5).unwrap();
        assert_abs_diff_eq!(g.get(ParamGroup::BQ)[0], 6.0, epsilon = 1e-8);
    }

    #[test]
    fn constant_is_zero() {
        let g = finite_diff_grad(|_| Ok(4.2), &scalar_params(1.0), 1e-5).unwrap();
        assert!(g.groups.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn step_range_enforced() {
        assert!(matches!(finite_diff_grad(|_| Ok(0.0), &scalar_params(1.0), 1e-2), Err(Error::Parameter(_))));
        assert!(finite_diff_grad(|_| Ok(0.0), &scalar_params(1.0), 1e-8).is_err());
    }

    #[test]
    fn non_finite_names_parameter() {
        let err = finite_diff_grad(
            |p| {
                let x = p.get(ParamGroup::BQ).data[0];
                Ok(if x > 1.0 { f64::NAN } else { x })
            },
            &scalar_params(1.0),
            1e-5,
        )
        .unwrap_err();
        match err {
            Error::Oracle { group, index } => {
                assert_eq!(group, "b_q");
                assert_eq!(index, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
