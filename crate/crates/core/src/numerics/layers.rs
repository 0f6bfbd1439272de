//! Neural layers built on the [`Graph`] tape.
//!
//! Each layer owns its [`Parameter`]s and exposes a `forward` that takes the
//! slice of bound variables produced by [`Graph::bind`] (or
//! [`Graph::bind_frozen`]). The plain-tensor helpers at the bottom run the
//! same graph code on a throwaway tape, so inference and training share one
//! arithmetic path.

use alloc::vec;
use alloc::vec::Vec;

use super::graph::{Graph, Var};
use super::tensor::{Module, Parameter, Tensor};
use crate::error::{arg_err, dim_err, Result};
use crate::rng::SeededRng;

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor::new(shape, data).expect("shape")
}

/// Fully connected layer, `y = W x + b` with `W: [n_out, n_in]`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub const PARAMS: usize = 2;

    /// Uniform `±1/√n_in` initialization.
    pub fn new(n_in: usize, n_out: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / libm::sqrt(n_in.max(1) as f64);
        Self {
            weight: Parameter::new(uniform_tensor(&[n_out, n_in], bound, rng)),
            bias: Parameter::new(uniform_tensor(&[n_out], bound, rng)),
        }
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            weight: Parameter::new(Tensor::zeros(&[n_out, n_in])),
            bias: Parameter::new(Tensor::zeros(&[n_out])),
        }
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.len() != weight.rows() {
            return Err(dim_err("Linear", weight.shape(), bias.shape()));
        }
        Ok(Self {
            weight: Parameter::new(weight),
            bias: Parameter::new(bias),
        })
    }

    pub fn n_in(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn n_out(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        g.linear(x, vars[0], Some(vars[1]))
    }
}

impl Module for Linear {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Gated recurrent unit.
///
/// Gate blocks are stacked in the order update (`z`), reset (`r`), candidate:
///
/// ```text
/// z = σ(W_z x + U_z h + b_z)
/// r = σ(W_r x + U_r h + b_r)
/// ĥ = tanh(W_h x + U_h (r ⊙ h) + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ ĥ
/// ```
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Gru {
    /// `[W_z; W_r; W_h]`, shape `[3·d_h, d_in]`.
    pub w_x: Parameter,
    /// `[U_z; U_r]`, shape `[2·d_h, d_h]`.
    pub u_zr: Parameter,
    /// `U_h`, shape `[d_h, d_h]`.
    pub u_h: Parameter,
    /// `[b_z; b_r; b_h]`, shape `[3·d_h]`.
    pub bias: Parameter,
}

impl Gru {
    pub const PARAMS: usize = 4;

    pub fn new(d_in: usize, d_h: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / libm::sqrt(d_h.max(1) as f64);
        Self {
            w_x: Parameter::new(uniform_tensor(&[3 * d_h, d_in], bound, rng)),
            u_zr: Parameter::new(uniform_tensor(&[2 * d_h, d_h], bound, rng)),
            u_h: Parameter::new(uniform_tensor(&[d_h, d_h], bound, rng)),
            bias: Parameter::new(uniform_tensor(&[3 * d_h], bound, rng)),
        }
    }

    pub fn zeros(d_in: usize, d_h: usize) -> Self {
        Self {
            w_x: Parameter::new(Tensor::zeros(&[3 * d_h, d_in])),
            u_zr: Parameter::new(Tensor::zeros(&[2 * d_h, d_h])),
            u_h: Parameter::new(Tensor::zeros(&[d_h, d_h])),
            bias: Parameter::new(Tensor::zeros(&[3 * d_h])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_x.value.cols()
    }

    pub fn d_h(&self) -> usize {
        self.u_h.value.rows()
    }

    /// One recurrent step; `x: [B, d_in]`, `h: [B, d_h]` (or both rank 1).
    pub fn step(&self, g: &mut Graph, vars: &[Var], x: Var, h: Var) -> Result<Var> {
        let d = self.d_h();
        if g.value(h).cols() != d {
            return Err(dim_err("gru_step hidden", g.value(h).shape(), &[d]));
        }
        if g.value(x).cols() != self.d_in() {
            return Err(dim_err("gru_step input", g.value(x).shape(), &[self.d_in()]));
        }
        let gx = g.linear(x, vars[0], Some(vars[3]))?;
        let gh = g.linear(h, vars[1], None)?;
        let gx_zr = g.slice_cols(gx, 0, 2 * d)?;
        let pre_zr = g.add(gx_zr, gh)?;
        let zr = g.sigmoid(pre_zr)?;
        let z = g.slice_cols(zr, 0, d)?;
        let r = g.slice_cols(zr, d, d)?;
        let rh = g.mul(r, h)?;
        let uh = g.linear(rh, vars[2], None)?;
        let gx_h = g.slice_cols(gx, 2 * d, d)?;
        let pre_h = g.add(gx_h, uh)?;
        let cand = g.tanh(pre_h)?;
        let keep = g.affine(z, -1.0, 1.0)?;
        let kept = g.mul(keep, h)?;
        let fresh = g.mul(z, cand)?;
        g.add(kept, fresh)
    }
}

impl Module for Gru {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.w_x, &self.u_zr, &self.u_h, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w_x, &mut self.u_zr, &mut self.u_h, &mut self.bias]
    }
}

/// One attention head: a shared query/key projection and a value projection.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttentionHead {
    /// `[d, d_k]`
    pub key: Parameter,
    /// `[d, d_v]`
    pub value: Parameter,
}

impl AttentionHead {
    pub const PARAMS: usize = 2;

    pub fn new(d: usize, d_k: usize, d_v: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / libm::sqrt(d.max(1) as f64);
        Self {
            key: Parameter::new(uniform_tensor(&[d, d_k], bound, rng)),
            value: Parameter::new(uniform_tensor(&[d, d_v], bound, rng)),
        }
    }

    pub fn from_tensors(key: Tensor, value: Tensor) -> Result<Self> {
        if key.rows() != value.rows() {
            return Err(dim_err("AttentionHead", key.shape(), value.shape()));
        }
        Ok(Self {
            key: Parameter::new(key),
            value: Parameter::new(value),
        })
    }

    pub fn d_v(&self) -> usize {
        self.value.value.cols()
    }
}

impl Module for AttentionHead {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.key, &self.value]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.key, &mut self.value]
    }
}

/// Multi-head attention aggregation with a residual connection.
///
/// For each agent `i` and head `m`, `Σ_{j≠i} a^m_ij W_mᵀ h_j` is computed; the
/// head outputs are concatenated, the residual `h_i` is added elementwise and
/// ReLU applied. The residual forces `M · d_v = d`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MultiHeadAggregator {
    pub heads: Vec<AttentionHead>,
}

impl MultiHeadAggregator {
    pub fn new(d: usize, n_heads: usize, d_k: usize, rng: &mut SeededRng) -> Result<Self> {
        if n_heads == 0 || d % n_heads != 0 {
            return Err(arg_err("feature width must split evenly across heads"));
        }
        let d_v = d / n_heads;
        let heads = (0..n_heads).map(|_| AttentionHead::new(d, d_k, d_v, rng)).collect();
        Ok(Self { heads })
    }

    pub fn from_heads(heads: Vec<AttentionHead>) -> Result<Self> {
        let first = heads.first().ok_or_else(|| arg_err("at least one head required"))?;
        let d = first.key.value.rows();
        let width: usize = heads.iter().map(AttentionHead::d_v).sum();
        for h in &heads {
            if h.key.value.rows() != d || h.value.value.rows() != d {
                return Err(dim_err("MultiHeadAggregator", first.key.shape(), h.key.shape()));
            }
        }
        if width != d {
            return Err(dim_err("MultiHeadAggregator residual", &[d], &[width]));
        }
        Ok(Self { heads })
    }

    pub fn width(&self) -> usize {
        self.heads[0].key.value.rows()
    }

    /// `h: [B·n, d]` with agents of one sample on consecutive rows.
    /// With `group == 1` there are no neighbours and the result is `ReLU(h)`.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], h: Var, group: usize) -> Result<Var> {
        if g.value(h).cols() != self.width() {
            return Err(dim_err("multi_head_aggregate", g.value(h).shape(), &[self.width()]));
        }
        if group <= 1 {
            return g.relu(h);
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        for m in 0..self.heads.len() {
            let hv = &vars[m * AttentionHead::PARAMS..];
            let k = g.matmul(h, hv[0])?;
            let v = g.matmul(h, hv[1])?;
            outs.push(g.group_attention(k, v, group)?);
        }
        let cat = g.concat_cols(&outs)?;
        let res = g.add(cat, h)?;
        g.relu(res)
    }
}

impl Module for MultiHeadAggregator {
    fn parameters(&self) -> Vec<&Parameter> {
        self.heads.iter().flat_map(|h| h.parameters()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.heads.iter_mut().flat_map(|h| h.parameters_mut()).collect()
    }
}

// ---- plain-tensor entry points ---------------------------------------------

/// `W x + b`.
pub fn linear(x: &Tensor, layer: &Linear) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = g.bind_frozen(layer)?;
    let xv = g.input(x.clone())?;
    let y = layer.forward(&mut g, &vars, xv)?;
    Ok(g.value(y).clone())
}

pub fn gru_step(x: &Tensor, h_prev: &Tensor, gru: &Gru) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = g.bind_frozen(gru)?;
    let xv = g.input(x.clone())?;
    let hv = g.input(h_prev.clone())?;
    let y = gru.step(&mut g, &vars, xv, hv)?;
    Ok(g.value(y).clone())
}

/// Row-wise softmax, stabilized by max-subtraction.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    if v.is_empty() {
        return Err(arg_err("softmax of an empty vector"));
    }
    let mut g = Graph::new();
    let x = g.input(v.clone())?;
    let y = g.softmax(x)?;
    Ok(g.value(y).clone())
}

/// Attention coefficients `a_ij` for one group of `n ≥ 2` agents (`h: [n, d]`,
/// `w: [d, d_k]`). The diagonal is zero and each row sums to one.
pub fn attention_coefficients(h: &Tensor, w: &Tensor) -> Result<Tensor> {
    let n = h.rows();
    if n < 2 {
        return Err(arg_err("attention needs at least two agents"));
    }
    let mut g = Graph::new();
    let hv = g.input(h.clone())?;
    let wv = g.input(w.clone())?;
    let k = g.matmul(hv, wv)?;
    let coeffs = super::graph::attention_coefficients_grouped(g.value(k), n);
    Tensor::matrix(n, n, coeffs)
}

/// Multi-head aggregate of one group of agents, `h: [n, d]`.
pub fn multi_head_aggregate(h: &Tensor, agg: &MultiHeadAggregator) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = g.bind_frozen(agg)?;
    let hv = g.input(h.clone())?;
    let y = agg.forward(&mut g, &vars, hv, h.rows())?;
    Ok(g.value(y).clone())
}
