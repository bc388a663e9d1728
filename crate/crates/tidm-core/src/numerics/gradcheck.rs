//! Central finite-difference verification of tape gradients.
//!
//! The check runs the same kernels at f64: at f32, central differences on
//! a loss of order one carry rounding noise around 1e-4 per coordinate,
//! which would drown the 1e-3 tolerance the gradient suite asserts.

use crate::error::{Result, TidmError};
use crate::numerics::params::ParamStore;
use crate::numerics::rng::Rng;
use crate::numerics::tape::{bind_param_map, BoundParams, NodeId, Tape};
use crate::numerics::tensor::GTensor;
use std::collections::BTreeMap;

pub type ParamMap = BTreeMap<String, GTensor<f64>>;

pub fn param_map_from_store(store: &ParamStore) -> ParamMap {
    store
        .iter()
        .map(|(name, t)| (name.to_string(), t.cast::<f64>()))
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Cap on checked coordinates per parameter tensor; a seeded random
    /// subset is used above the cap so large models stay tractable.
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-3,
            max_coords_per_param: 64,
            seed: 0x6772_6164,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Parameter name where the worst error occurred.
    pub worst_param: String,
}

/// Worst relative error between backprop gradients and central finite
/// differences of `f` over the given parameters.
///
/// `f` must evaluate a scalar loss from the bound parameter leaves; it is
/// re-run twice per checked coordinate at perturbed values. The error
/// denominator is max(|analytic|, |numeric|, 1e-8).
pub fn finite_difference_check<F>(
    params: &ParamMap,
    config: &GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &BoundParams) -> Result<NodeId>,
{
    if config.h <= 0.0 {
        return Err(TidmError::invalid("finite_difference_check: h must be > 0"));
    }
    let eval = |p: &ParamMap| -> Result<f64> {
        let mut tape = Tape::<f64>::inference();
        let bound = bind_param_map(&mut tape, p);
        let loss = f(&mut tape, &bound)?;
        let v = tape.value(loss);
        if !v.is_scalar() {
            return Err(TidmError::shape(
                "finite_difference_check",
                format!("f must be scalar, got {:?}", v.shape()),
            ));
        }
        v.item()
    };

    // Analytic gradients once.
    let mut tape = Tape::<f64>::new();
    let bound = bind_param_map(&mut tape, params);
    let loss = f(&mut tape, &bound)?;
    if !tape.value(loss).is_scalar() {
        return Err(TidmError::shape(
            "finite_difference_check",
            format!("f must be scalar, got {:?}", tape.value(loss).shape()),
        ));
    }
    let grads = tape.backward(loss)?;

    let mut rng = Rng::new(config.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst_param: String::new(),
    };
    for (name, tensor) in params {
        let analytic = grads.get(bound.id(name)?, &tape);
        let numel = tensor.numel();
        let coords: Vec<usize> = if numel <= config.max_coords_per_param {
            (0..numel).collect()
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < config.max_coords_per_param {
                picked.insert(rng.next_below(numel as u64) as usize);
            }
            picked.into_iter().collect()
        };
        for &ci in &coords {
            let base = tensor.data()[ci];
            let mut perturbed = params.clone();
            let mut plus = tensor.data().to_vec();
            plus[ci] = base + config.h;
            perturbed.insert(
                name.clone(),
                GTensor::from_vec(tensor.shape().to_vec(), plus)?,
            );
            let f_plus = eval(&perturbed)?;
            let mut minus = tensor.data().to_vec();
            minus[ci] = base - config.h;
            perturbed.insert(
                name.clone(),
                GTensor::from_vec(tensor.shape().to_vec(), minus)?,
            );
            let f_minus = eval(&perturbed)?;
            let numeric = (f_plus - f_minus) / (2.0 * config.h);
            let a = analytic.data()[ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_quadratic() {
        // f = sum(p^2): central differences are exact up to rounding.
        let mut params = ParamMap::new();
        params.insert(
            "p".into(),
            GTensor::from_vec(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap(),
        );
        let report = finite_difference_check(&params, &GradCheckConfig::default(), |tape, bound| {
            let p = bound.id("p")?;
            let sq = tape.mul(p, p)?;
            tape.sum(sq)
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "rel err {}", report.max_rel_err);
        assert_eq!(report.coords_checked, 3);
    }

    #[test]
    fn zero_step_is_error() {
        let params = ParamMap::new();
        let cfg = GradCheckConfig {
            h: 0.0,
            ..Default::default()
        };
        assert!(finite_difference_check(&params, &cfg, |tape, _| {
            Ok(tape.leaf(GTensor::scalar(0.0)))
        })
        .is_err());
    }

    #[test]
    fn non_scalar_f_is_error() {
        let mut params = ParamMap::new();
        params.insert("p".into(), GTensor::from_vec(vec![2], vec![1.0f64, 2.0]).unwrap());
        let err = finite_difference_check(&params, &GradCheckConfig::default(), |_, bound| {
            bound.id("p")
        });
        assert!(err.is_err());
    }
}
