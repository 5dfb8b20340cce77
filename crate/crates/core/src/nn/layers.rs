//! Building blocks: rotary embedding, token scaling, grouped-query attention
//! and back-projection units.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

use super::graph::{Graph, Tensor, Var};
use super::kernels;

pub const ROPE_BASE: f64 = 10_000.0;

/// Rotary embedding of a `[seq x d]` tensor.
pub fn rope_apply(x: &Tensor, positions: &[usize]) -> Result<Tensor> {
    let (m, d) = x.dims2()?;
    kernels::check_rope(m, d, positions)?;
    Ok(Tensor::from_parts(
        vec![m, d],
        kernels::rope(x.data(), m, d, positions, ROPE_BASE, false),
    ))
}

/// `x / sqrt(mean(x^2) + eps)` per row.
pub fn token_scale(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (m, c) = x.dims2()?;
    if c == 0 {
        return Err(invalid("token_scale needs at least one channel"));
    }
    Ok(Tensor::from_parts(
        vec![m, c],
        kernels::token_scale(x.data(), m, c, eps),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub n_heads: usize,
    pub n_kv_groups: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, n_heads: usize, n_kv_groups: usize) -> Result<Self> {
        let c = Self {
            model_dim,
            n_heads,
            n_kv_groups,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(invalid(format!(
                "n_heads {} must divide model_dim {}",
                self.n_heads, self.model_dim
            )));
        }
        if self.n_kv_groups == 0 || !self.n_heads.is_multiple_of(self.n_kv_groups) {
            return Err(invalid(format!(
                "n_kv_groups {} must divide n_heads {}",
                self.n_kv_groups, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(invalid(format!(
                "head_dim {} must be even for rotary embedding",
                self.head_dim()
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    /// Width of the key and value projections.
    pub fn kv_dim(&self) -> usize {
        self.n_kv_groups * self.head_dim()
    }
}

/// Attention parameters as graph nodes.
///
/// `wq: [d x d]`, `wk, wv: [d x G*hd]`, `wo: [d x d]`, `bo: [d]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Attention parameters as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl AttentionWeights {
    pub fn bind(&self, g: &mut Graph) -> AttentionVars {
        AttentionVars {
            wq: g.param(self.wq.clone()),
            wk: g.param(self.wk.clone()),
            wv: g.param(self.wv.clone()),
            wo: g.param(self.wo.clone()),
            bo: g.param(self.bo.clone()),
        }
    }
}

/// Grouped-query self-attention over a `[seq x d]` input. Returns the output
/// and the per-head attention matrices.
pub fn gqa_attention_traced(
    g: &mut Graph,
    x: Var,
    cfg: &AttentionConfig,
    w: &AttentionVars,
    positions: &[usize],
) -> Result<(Var, Vec<Var>)> {
    cfg.validate()?;
    let (seq, d) = g.value(x).dims2()?;
    if d != cfg.model_dim {
        return Err(invalid(format!(
            "attention input width {d} does not match model_dim {}",
            cfg.model_dim
        )));
    }
    if positions.len() != seq {
        return Err(invalid(format!("{} positions for {seq} tokens", positions.len())));
    }
    let hd = cfg.head_dim();
    let per_group = cfg.n_heads / cfg.n_kv_groups;
    let q = g.matmul(x, w.wq)?;
    let k = g.matmul(x, w.wk)?;
    let v = g.matmul(x, w.wv)?;
    let mut keys = Vec::with_capacity(cfg.n_kv_groups);
    let mut values = Vec::with_capacity(cfg.n_kv_groups);
    for grp in 0..cfg.n_kv_groups {
        let kg = g.slice_cols(k, grp * hd, hd)?;
        let kr = g.rope(kg, positions, ROPE_BASE)?;
        keys.push(g.transpose(kr)?);
        values.push(g.slice_cols(v, grp * hd, hd)?);
    }
    let inv = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let grp = h / per_group;
        let qh = g.slice_cols(q, h * hd, hd)?;
        let qr = g.rope(qh, positions, ROPE_BASE)?;
        let logits = g.matmul(qr, keys[grp])?;
        let logits = g.scale(logits, inv);
        let a = g.softmax(logits)?;
        heads.push(g.matmul(a, values[grp])?);
        probs.push(a);
    }
    let cat = g.concat_cols(&heads)?;
    let o = g.matmul(cat, w.wo)?;
    Ok((g.add_row_bias(o, w.bo)?, probs))
}

pub fn gqa_attention(
    g: &mut Graph,
    x: Var,
    cfg: &AttentionConfig,
    w: &AttentionVars,
    positions: &[usize],
) -> Result<Var> {
    Ok(gqa_attention_traced(g, x, cfg, w, positions)?.0)
}

/// Forward-only attention on plain tensors.
pub fn gqa_attention_eval(
    x: &Tensor,
    cfg: &AttentionConfig,
    w: &AttentionWeights,
    positions: &[usize],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = w.bind(&mut g);
    let y = gqa_attention(&mut g, xv, cfg, &wv, positions)?;
    Ok(g.value(y).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Gelu,
    Identity,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    Up,
    Down,
}

/// Stride-2 resampling geometry shared by the three convolutions of a unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionGeometry {
    pub kernel: usize,
    pub pad: usize,
    pub activation: Activation,
}

impl ProjectionGeometry {
    /// Kernel 4, padding 1: exact doubling and halving of even lengths.
    pub const MODEL: Self = Self {
        kernel: 4,
        pad: 1,
        activation: Activation::Gelu,
    };
}

/// `(weight, bias)` of one convolution.
pub type ConvVars = (Var, Var);

/// The three convolutions of a unit. For an up unit `first` and `second` are
/// transposed convolutions `[C x C x K]` and `back` is a strided convolution;
/// a down unit swaps the roles.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionVars {
    pub first: ConvVars,
    pub back: ConvVars,
    pub second: ConvVars,
}

fn resample(g: &mut Graph, x: Var, c: ConvVars, dir: Resample, geo: &ProjectionGeometry) -> Result<Var> {
    let y = match dir {
        Resample::Up => g.conv_transpose1d(x, c.0, c.1, 2, geo.pad)?,
        Resample::Down => g.conv1d(x, c.0, c.1, 2, geo.pad)?,
    };
    Ok(geo.activation.apply(g, y))
}

/// One back-projection round: `h = P(x)`, `e = Q(h) - x`, `out = h + P'(e)`
/// where `P` resamples in `dir` and `Q` in the opposite direction.
pub fn projection_unit(
    g: &mut Graph,
    x: Var,
    dir: Resample,
    w: &ProjectionVars,
    geo: &ProjectionGeometry,
) -> Result<Var> {
    let (seq, _) = g.value(x).dims2()?;
    if dir == Resample::Down && seq % 2 != 0 {
        return Err(invalid(format!("down projection needs an even length, got {seq}")));
    }
    let back_dir = match dir {
        Resample::Up => Resample::Down,
        Resample::Down => Resample::Up,
    };
    let h = resample(g, x, w.first, dir, geo)?;
    let r = resample(g, h, w.back, back_dir, geo)?;
    if g.shape(r) != g.shape(x) {
        return Err(invalid(format!(
            "projection geometry does not invert: {:?} -> {:?}",
            g.shape(x),
            g.shape(r)
        )));
    }
    let e = g.sub(r, x)?;
    let c = resample(g, e, w.second, dir, geo)?;
    g.add(h, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(rows: usize, cols: usize, f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(f).collect()).unwrap()
    }

    #[test]
    fn token_scale_closed_form() {
        let x = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        let y = token_scale(&x, 0.0).unwrap();
        let r = 12.5f64.sqrt();
        assert!((y.data()[0] - 3.0 / r).abs() < 1e-15);
        assert!((y.data()[1] - 4.0 / r).abs() < 1e-15);
        let z = token_scale(&Tensor::zeros(vec![1, 3]), 1e-5).unwrap();
        assert_eq!(z.data(), &[0.0; 3]);
    }

    #[test]
    fn rope_rejects_odd_width() {
        assert!(rope_apply(&Tensor::zeros(vec![2, 3]), &[0, 1]).is_err());
        assert!(rope_apply(&Tensor::zeros(vec![2, 4]), &[0]).is_err());
    }

    #[test]
    fn attention_config_invariants() {
        assert!(AttentionConfig::new(32, 4, 2).is_ok());
        assert!(AttentionConfig::new(30, 4, 2).is_err());
        assert!(AttentionConfig::new(32, 4, 3).is_err());
        assert!(AttentionConfig::new(32, 4, 0).is_err());
        assert!(AttentionConfig::new(12, 4, 1).is_err());
    }

    #[test]
    fn single_token_attention_projects_value() {
        let cfg = AttentionConfig::new(4, 2, 1).unwrap();
        let w = AttentionWeights {
            wq: tensor(4, 4, |i| (i as f64 * 0.37).sin()),
            wk: tensor(4, 2, |i| (i as f64 * 0.11).cos()),
            wv: tensor(4, 2, |i| i as f64 * 0.1 - 0.3),
            wo: tensor(4, 4, |i| (i as f64 * 0.7).cos()),
            bo: Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
        };
        let x = tensor(1, 4, |i| i as f64 + 1.0);
        let y = gqa_attention_eval(&x, &cfg, &w, &[3]).unwrap();
        // both heads read the single group value
        let v = kernels::matmul(x.data(), w.wv.data(), 1, 4, 2);
        let cat = [v[0], v[1], v[0], v[1]];
        let mut want = kernels::matmul(&cat, w.wo.data(), 1, 4, 4);
        for (o, b) in want.iter_mut().zip(w.bo.data()) {
            *o += b;
        }
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn up_and_down_lengths() {
        let mut g = Graph::new();
        let c = 3;
        let conv = |g: &mut Graph| (g.param(Tensor::zeros(vec![c, c, 4])), g.param(Tensor::zeros(vec![c])));
        let w = ProjectionVars {
            first: conv(&mut g),
            back: conv(&mut g),
            second: conv(&mut g),
        };
        let x4 = g.constant(Tensor::zeros(vec![4, c]));
        let up = projection_unit(&mut g, x4, Resample::Up, &w, &ProjectionGeometry::MODEL).unwrap();
        assert_eq!(g.shape(up), &[8, c]);
        let x8 = g.constant(Tensor::zeros(vec![8, c]));
        let down = projection_unit(&mut g, x8, Resample::Down, &w, &ProjectionGeometry::MODEL).unwrap();
        assert_eq!(g.shape(down), &[4, c]);
        let x5 = g.constant(Tensor::zeros(vec![5, c]));
        assert!(projection_unit(&mut g, x5, Resample::Down, &w, &ProjectionGeometry::MODEL).is_err());
    }
}
