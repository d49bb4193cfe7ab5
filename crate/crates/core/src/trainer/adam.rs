use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGroup, ParamSet};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Learning rate per parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrMap {
    pub default: f64,
    pub out_scale: f64,
}

impl LrMap {
    pub fn uniform(lr: f64) -> Self {
        Self { default: lr, out_scale: lr }
    }

    pub fn get(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Default => self.default,
            ParamGroup::OutScale => self.out_scale,
        }
    }
}

/// First and second moment estimates, flattened in parameter order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam step that decreases the function whose gradient
/// is `grads`.
pub fn adam_step(params: &mut ParamSet, grads: &[f64], state: &mut AdamState, lr: &LrMap) -> Result<()> {
    let n = params.num_scalars();
    if grads.len() != n {
        return Err(Error::DimensionMismatch(format!("{} gradients for {n} parameters", grads.len())));
    }
    if state.m.len() != n {
        *state = AdamState::new(n);
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("flat index {i}")));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let mut k = 0;
    for p in params.iter_mut() {
        let step = lr.get(p.group);
        for x in p.value.as_mut_slice() {
            let g = grads[k];
            state.m[k] = BETA1 * state.m[k] + (1.0 - BETA1) * g;
            state.v[k] = BETA2 * state.v[k] + (1.0 - BETA2) * g * g;
            let mh = state.m[k] / c1;
            let vh = state.v[k] / c2;
            *x -= step * mh / (vh.sqrt() + EPS);
            if !x.is_finite() {
                return Err(Error::NonFinite(format!("parameter `{}` after update", p.name)));
            }
            k += 1;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn one(v: f64, g: ParamGroup) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Matrix::scalar(v), g).unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one(1.0, ParamGroup::Default);
        let mut st = AdamState::default();
        adam_step(&mut p, &[2.0], &mut st, &LrMap::uniform(1e-3)).unwrap();
        assert!((p.get("x").unwrap().item() - 0.999).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = one(1.5, ParamGroup::Default);
        let mut st = AdamState::default();
        adam_step(&mut p, &[0.0], &mut st, &LrMap::uniform(1e-3)).unwrap();
        assert_eq!(p.get("x").unwrap().item(), 1.5);
    }

    #[test]
    fn group_rates_apply() {
        let mut p = one(0.0, ParamGroup::OutScale);
        let mut st = AdamState::default();
        adam_step(&mut p, &[1.0], &mut st, &LrMap { default: 1e-3, out_scale: 1e-4 }).unwrap();
        assert!((p.get("x").unwrap().item() + 1e-4).abs() < 1e-10);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f = (x - 3)^2 + 2 (y + 1)^2
        let mut p = ParamSet::new();
        p.insert("w", Matrix::row(&[0.0, 0.0]), ParamGroup::Default).unwrap();
        let mut st = AdamState::default();
        let lr = LrMap::uniform(0.05);
        for _ in 0..1000 {
            let w = p.get("w").unwrap().as_slice().to_vec();
            let g = [2.0 * (w[0] - 3.0), 4.0 * (w[1] + 1.0)];
            adam_step(&mut p, &g, &mut st, &lr).unwrap();
        }
        let w = p.get("w").unwrap().as_slice();
        assert!((w[0] - 3.0).abs() < 1e-4 && (w[1] + 1.0).abs() < 1e-4, "{w:?}");
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = one(1.0, ParamGroup::Default);
        let mut st = AdamState::default();
        assert!(adam_step(&mut p, &[f64::NAN], &mut st, &LrMap::uniform(1e-3)).is_err());
        assert_eq!(p.get("x").unwrap().item(), 1.0);
    }
}
