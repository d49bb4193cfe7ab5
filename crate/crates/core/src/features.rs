//! Feature networks and the encoder heads that produce the per-point
//! Gaussian likelihood approximations `N(m_j | f_j, s_j)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Bound, ParamGroup, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Bound on `|m~(x)|`.
pub const M_TILDE_BOUND: f64 = 20.0;
/// Lower bound on `s(x)`; keeps the smallest eigenvalue of `K + S` away from zero.
pub const S_MIN: f64 = 0.001;
pub const S_MAX: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(v),
            Activation::Tanh => tape.tanh(v),
        }
    }

    fn apply_value(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Fully connected network `sizes[0] -> sizes[1] -> ... -> sizes[L]`.
///
/// Parameters are `{prefix}.w{i}` (`sizes[i] x sizes[i+1]`) and
/// `{prefix}.b{i}` (`1 x sizes[i+1]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub sizes: Vec<usize>,
    pub activation: Activation,
    /// Apply the activation after the final layer as well.
    pub activate_last: bool,
}

impl Mlp {
    pub fn num_layers(&self) -> usize {
        self.sizes.len().saturating_sub(1)
    }

    pub fn weight_name(&self, i: usize) -> String {
        format!("{}.w{i}", self.prefix)
    }

    pub fn bias_name(&self, i: usize) -> String {
        format!("{}.b{i}", self.prefix)
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.num_layers()).flat_map(|i| [self.weight_name(i), self.bias_name(i)]).collect()
    }

    /// Glorot-uniform weights; biases uniform in `+-1/sqrt(fan_in)`.
    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
        for i in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.sizes[i], self.sizes[i + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..limit));
            params.insert(self.weight_name(i), w, ParamGroup::Default)?;
            let bl = 1.0 / (fan_in as f64).sqrt();
            let b = Matrix::from_fn(1, fan_out, |_, _| rng.random_range(-bl..bl));
            params.insert(self.bias_name(i), b, ParamGroup::Default)?;
        }
        Ok(())
    }

    /// Forward pass on an `n x sizes[0]` input node.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let vars: Vec<Var> = self.param_names().iter().map(|n| bound.var(n)).collect::<Result<_>>()?;
        self.forward_with(tape, &vars, x)
    }

    /// Forward pass with explicit `[w0, b0, w1, b1, ...]` nodes.
    pub fn forward_with(&self, tape: &mut Tape, weights: &[Var], x: Var) -> Result<Var> {
        let (n, d) = tape.shape(x);
        if d != self.sizes[0] {
            return Err(Error::DimensionMismatch(format!(
                "network expects {} inputs, got {d}",
                self.sizes[0]
            )));
        }
        let mut h = x;
        for i in 0..self.num_layers() {
            let z = tape.matmul(h, weights[2 * i])?;
            let b = tape.expand(weights[2 * i + 1], n, self.sizes[i + 1])?;
            h = tape.add(z, b)?;
            if i + 1 < self.num_layers() || self.activate_last {
                h = self.activation.apply(tape, h);
            }
        }
        Ok(h)
    }

    /// Value-level forward pass for a single input.
    pub fn eval(&self, x: &[f64], params: &ParamSet) -> Result<Vec<f64>> {
        if x.len() != self.sizes[0] {
            return Err(Error::DimensionMismatch(format!(
                "network expects {} inputs, got {}",
                self.sizes[0],
                x.len()
            )));
        }
        let mut h = x.to_vec();
        for i in 0..self.num_layers() {
            let w = param(params, &self.weight_name(i))?;
            let b = param(params, &self.bias_name(i))?;
            let mut next = b.as_slice().to_vec();
            for (p, hp) in h.iter().enumerate() {
                for (q, o) in next.iter_mut().enumerate() {
                    *o += hp * w[(p, q)];
                }
            }
            if i + 1 < self.num_layers() || self.activate_last {
                for o in &mut next {
                    *o = self.activation.apply_value(*o);
                }
            }
            h = next;
        }
        Ok(h)
    }
}

fn param<'a>(params: &'a ParamSet, name: &str) -> Result<&'a Matrix> {
    params.get(name).ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
}

/// Deep-kernel feature map `phi(x; theta)`: an MLP whose last hidden layer,
/// optionally followed by a constant 1, is the feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNet {
    pub mlp: Mlp,
    pub augment: bool,
}

impl FeatureNet {
    pub fn new(input_dim: usize, hidden: &[usize], activation: Activation, augment: bool) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        Self { mlp: Mlp { prefix: "net".into(), sizes, activation, activate_last: true }, augment }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.sizes[0]
    }

    /// Feature dimension `M`, including the appended constant.
    pub fn feature_dim(&self) -> usize {
        self.mlp.sizes.last().copied().unwrap_or(0) + usize::from(self.augment)
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
        self.mlp.init(params, rng)
    }

    /// Stacked features `Phi` (`n x M`) for the rows of `x`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = if self.mlp.num_layers() == 0 { x } else { self.mlp.forward(tape, bound, x)? };
        if self.augment {
            let ones = tape.constant(Matrix::filled(tape.shape(x).0, 1, 1.0));
            tape.concat_cols(h, ones)
        } else {
            Ok(h)
        }
    }

    /// `phi(x)` for one input.
    pub fn phi(&self, x: &[f64], params: &ParamSet) -> Result<Vec<f64>> {
        let mut h = self.mlp.eval(x, params)?;
        if self.augment {
            h.push(1.0);
        }
        Ok(h)
    }
}

/// Parameterization of the per-point approximation `(m~(x), s(x))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderHeads {
    /// Two linear heads on `phi(x)`; softplus on the variance head.
    Amortized,
    /// Two shared scalars `m~` and `a`, with `s = softplus(a)`.
    Simplified,
}

pub const HEAD_M_W: &str = "head.m.w";
pub const HEAD_M_B: &str = "head.m.b";
pub const HEAD_S_W: &str = "head.s.w";
pub const HEAD_S_B: &str = "head.s.b";
pub const ENC_M_TILDE: &str = "enc.m_tilde";
pub const ENC_A: &str = "enc.a";

impl EncoderHeads {
    pub fn init(self, feature_dim: usize, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
        match self {
            EncoderHeads::Amortized => {
                let limit = (6.0 / (feature_dim + 1) as f64).sqrt();
                let mut w = || Matrix::from_fn(feature_dim, 1, |_, _| rng.random_range(-limit..limit));
                let wm = w();
                let ws = w().scale(0.1);
                params.insert(HEAD_M_W, wm, ParamGroup::Default)?;
                params.insert(HEAD_M_B, Matrix::scalar(1.0), ParamGroup::Default)?;
                params.insert(HEAD_S_W, ws, ParamGroup::Default)?;
                params.insert(HEAD_S_B, Matrix::scalar(0.0), ParamGroup::Default)?;
            }
            EncoderHeads::Simplified => {
                params.insert(ENC_M_TILDE, Matrix::scalar(1.0), ParamGroup::Default)?;
                params.insert(ENC_A, Matrix::scalar(0.0), ParamGroup::Default)?;
            }
        }
        Ok(())
    }

    /// Clipped `m~` for every row of `phi` (`n x 1`).
    pub fn m_tilde(self, tape: &mut Tape, bound: &Bound, phi: Var) -> Result<Var> {
        let n = tape.shape(phi).0;
        let raw = match self {
            EncoderHeads::Amortized => {
                let z = tape.matmul(phi, bound.var(HEAD_M_W)?)?;
                let b = tape.expand(bound.var(HEAD_M_B)?, n, 1)?;
                tape.add(z, b)?
            }
            EncoderHeads::Simplified => tape.expand(bound.var(ENC_M_TILDE)?, n, 1)?,
        };
        Ok(tape.clamp(raw, -M_TILDE_BOUND, M_TILDE_BOUND))
    }

    /// Clipped `s` for every row of `phi` (`n x 1`).
    pub fn s(self, tape: &mut Tape, bound: &Bound, phi: Var) -> Result<Var> {
        let n = tape.shape(phi).0;
        let pre = match self {
            EncoderHeads::Amortized => {
                let z = tape.matmul(phi, bound.var(HEAD_S_W)?)?;
                let b = tape.expand(bound.var(HEAD_S_B)?, n, 1)?;
                tape.add(z, b)?
            }
            EncoderHeads::Simplified => tape.expand(bound.var(ENC_A)?, n, 1)?,
        };
        let sp = tape.softplus(pre);
        Ok(tape.clamp(sp, S_MIN, S_MAX))
    }

    fn pre_m(self, phi: &[f64], params: &ParamSet) -> Result<f64> {
        Ok(match self {
            EncoderHeads::Amortized => linear_head(phi, param(params, HEAD_M_W)?, param(params, HEAD_M_B)?)?,
            EncoderHeads::Simplified => param(params, ENC_M_TILDE)?.item(),
        })
    }

    fn pre_s(self, phi: &[f64], params: &ParamSet) -> Result<f64> {
        Ok(match self {
            EncoderHeads::Amortized => linear_head(phi, param(params, HEAD_S_W)?, param(params, HEAD_S_B)?)?,
            EncoderHeads::Simplified => param(params, ENC_A)?.item(),
        })
    }
}

fn linear_head(phi: &[f64], w: &Matrix, b: &Matrix) -> Result<f64> {
    if w.rows() != phi.len() {
        return Err(Error::DimensionMismatch(format!(
            "head expects {} features, got {}",
            w.rows(),
            phi.len()
        )));
    }
    Ok(crate::linalg::dot(phi, w.as_slice()) + b.item())
}

/// `clip(m~(x), -20, 20) * y_sign`.
pub fn head_m(x: &[f64], y_sign: f64, heads: EncoderHeads, net: &FeatureNet, params: &ParamSet) -> Result<f64> {
    let phi = net.phi(x, params)?;
    Ok(clip_m(heads.pre_m(&phi, params)?) * y_sign)
}

/// `clip(softplus(a(x)), 0.001, 20)`.
pub fn head_s(x: &[f64], heads: EncoderHeads, net: &FeatureNet, params: &ParamSet) -> Result<f64> {
    let phi = net.phi(x, params)?;
    Ok(clip_s(softplus(heads.pre_s(&phi, params)?)))
}

pub fn clip_m(v: f64) -> f64 {
    v.clamp(-M_TILDE_BOUND, M_TILDE_BOUND)
}

pub fn clip_s(v: f64) -> f64 {
    v.clamp(S_MIN, S_MAX)
}

/// `n x N` matrix with `+1` where point `j` has label `n` and `-1` elsewhere.
pub fn class_sign_matrix(labels: &[usize], n_classes: usize) -> Result<Matrix> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::LabelOutOfRange { label: bad, n_classes });
    }
    Ok(Matrix::from_fn(labels.len(), n_classes, |j, n| if labels[j] == n { 1.0 } else { -1.0 }))
}

/// Per-class mean vectors `m_n = Y_n o m~`.
pub fn class_mean_vectors(labels: &[usize], m_tilde: &[f64], n_classes: usize) -> Result<Vec<Vec<f64>>> {
    if labels.len() != m_tilde.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} m~ values",
            labels.len(),
            m_tilde.len()
        )));
    }
    if n_classes == 1 {
        // One class: every point carries the positive sign.
        if let Some(&bad) = labels.iter().find(|&&l| l >= 1) {
            return Err(Error::LabelOutOfRange { label: bad, n_classes });
        }
        return Ok(vec![m_tilde.to_vec()]);
    }
    let signs = class_sign_matrix(labels, n_classes)?;
    Ok((0..n_classes)
        .map(|n| m_tilde.iter().enumerate().map(|(j, m)| signs[(j, n)] * m).collect())
        .collect())
}
