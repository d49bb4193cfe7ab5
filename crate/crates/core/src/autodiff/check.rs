use super::params::{gradient, Bound, ParamSet};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Outcome of a central-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the tape gradient of `f` against central differences with step `h`
/// in every coordinate of `params`.
///
/// `f` must be deterministic: any Monte Carlo noise has to be fixed outside it.
pub fn check_gradient<F>(f: F, params: &ParamSet, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    let analytic = gradient(&mut tape, out, &bound)?;

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut t = Tape::new();
        let b = p.bind_const(&mut t);
        let v = f(&mut t, &b)?;
        Ok(t.item(v))
    };

    let base = params.to_flat();
    let mut probe = params.clone();
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut x = base.clone();
        x[i] = base[i] + h;
        probe.set_flat(&x)?;
        let up = eval(&probe)?;
        x[i] = base[i] - h;
        probe.set_flat(&x)?;
        let down = eval(&probe)?;
        numeric.push((up - down) / (2.0 * h));
    }

    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheck { max_rel_error, worst_index, analytic, numeric })
}
