//! Spectral training objectives. The same graph functions back the
//! evaluation metrics, so a metric and its loss cannot drift apart.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, HrtfError, Result};
use crate::grid::{HrtfSet, SphericalGrid};
use crate::nn::{Graph, Tensor, Var};

/// Per-ear `[n_directions x W]` dB fields as graph nodes.
pub type EarFields = [Var; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lsd: f64,
    pub ild: f64,
    pub ndl: f64,
    /// Plain squared dB error, used for ablations.
    pub mse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lsd: 1.0,
            ild: 1.0,
            ndl: 1.0,
            mse: 0.0,
        }
    }
}

impl LossWeights {
    pub const MSE_ONLY: Self = Self {
        lsd: 0.0,
        ild: 0.0,
        ndl: 0.0,
        mse: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lsd", self.lsd),
            ("ild", self.ild),
            ("ndl", self.ndl),
            ("mse", self.mse),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(HrtfError::InvalidConfig {
                    field: format!("w_{name}"),
                    reason: format!("must be finite and >= 0, got {w}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lsd: f64,
    pub ild: f64,
    /// Zero when the grid has no neighbour topology and NDL is unweighted.
    pub ndl: f64,
    pub mse: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// First non-finite component, if any.
    pub fn non_finite(&self) -> Option<(&'static str, f64)> {
        [
            ("lsd", self.lsd),
            ("ild", self.ild),
            ("ndl", self.ndl),
            ("mse", self.mse),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            lsd: k * self.lsd,
            ild: k * self.ild,
            ndl: k * self.ndl,
            mse: k * self.mse,
            total: k * self.total,
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        Self {
            lsd: self.lsd + o.lsd,
            ild: self.ild + o.ild,
            ndl: self.ndl + o.ndl,
            mse: self.mse + o.mse,
            total: self.total + o.total,
        }
    }
}

/// Graph nodes of each weighted term.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub lsd: Var,
    pub ild: Var,
    pub ndl: Option<Var>,
    pub mse: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).data()[0];
        LossBreakdown {
            lsd: v(self.lsd),
            ild: v(self.ild),
            ndl: self.ndl.map(v).unwrap_or(0.0),
            mse: v(self.mse),
            total: v(self.total),
        }
    }
}

fn ear_mean(g: &mut Graph, per_ear: [Var; 2]) -> Result<Var> {
    let s = g.add(per_ear[0], per_ear[1])?;
    Ok(g.scale(s, 0.5))
}

/// Position mean of the per-position RMS dB error, averaged over ears.
pub fn lsd_graph(g: &mut Graph, pred: EarFields, target: EarFields) -> Result<Var> {
    let mut per = [pred[0]; 2];
    for e in 0..2 {
        let d = g.sub(target[e], pred[e])?;
        let sq = g.mul(d, d)?;
        let rm = g.row_mean(sq)?;
        let rms = g.sqrt(rm);
        per[e] = g.mean(rms);
    }
    ear_mean(g, per)
}

/// Mean absolute difference of the interaural dB ratio.
pub fn ild_graph(g: &mut Graph, pred: EarFields, target: EarFields) -> Result<Var> {
    let it = g.sub(target[0], target[1])?;
    let ip = g.sub(pred[0], pred[1])?;
    let d = g.sub(it, ip)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// `I - row-normalised adjacency` of an equiangular grid, `[N x N]`.
pub fn contrast_operator(grid: &SphericalGrid) -> Result<Tensor> {
    let n = grid.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        let nb = grid.neighbors(i)?;
        d[i * n + i] = 1.0;
        for &j in nb {
            d[i * n + j] -= 1.0 / nb.len() as f64;
        }
    }
    Tensor::matrix(n, n, d)
}

/// Squared difference of centre-minus-neighbour-mean contrasts; `op` is
/// [`contrast_operator`] as a constant node.
pub fn ndl_graph(g: &mut Graph, pred: EarFields, target: EarFields, op: Var) -> Result<Var> {
    let mut per = [pred[0]; 2];
    for e in 0..2 {
        let d = g.sub(target[e], pred[e])?;
        let c = g.matmul(op, d)?;
        let sq = g.mul(c, c)?;
        per[e] = g.mean(sq);
    }
    ear_mean(g, per)
}

/// Mean squared dB error, averaged over ears.
pub fn mse_graph(g: &mut Graph, pred: EarFields, target: EarFields) -> Result<Var> {
    let mut per = [pred[0]; 2];
    for e in 0..2 {
        let d = g.sub(target[e], pred[e])?;
        let sq = g.mul(d, d)?;
        per[e] = g.mean(sq);
    }
    ear_mean(g, per)
}

/// All terms and their weighted sum. `op` is required when NDL is weighted.
pub fn loss_graph(
    g: &mut Graph,
    pred: EarFields,
    target: EarFields,
    op: Option<Var>,
    w: &LossWeights,
) -> Result<LossVars> {
    w.validate()?;
    let lsd = lsd_graph(g, pred, target)?;
    let ild = ild_graph(g, pred, target)?;
    let mse = mse_graph(g, pred, target)?;
    let ndl = match op {
        Some(op) => Some(ndl_graph(g, pred, target, op)?),
        None if w.ndl > 0.0 => {
            return Err(HrtfError::UnsupportedTopology(
                "the neighbour loss needs an equiangular grid".into(),
            ))
        }
        None => None,
    };
    let mut total = g.scale(lsd, w.lsd);
    let t = g.scale(ild, w.ild);
    total = g.add(total, t)?;
    let t = g.scale(mse, w.mse);
    total = g.add(total, t)?;
    if let Some(n) = ndl {
        let t = g.scale(n, w.ndl);
        total = g.add(total, t)?;
    }
    Ok(LossVars {
        lsd,
        ild,
        ndl,
        mse,
        total,
    })
}

/// Places an HRTF set's linear magnitudes in a graph and converts each ear
/// to dB. Returns the magnitude node and the per-ear dB fields.
pub fn set_fields(g: &mut Graph, set: &HrtfSet, trainable: bool) -> Result<(Var, EarFields)> {
    let w = set.n_bins();
    let t = Tensor::matrix(set.n_directions(), 2 * w, set.magnitudes().to_vec())?;
    let m = if trainable { g.param(t) } else { g.constant(t) };
    let l = g.slice_cols(m, 0, w)?;
    let r = g.slice_cols(m, w, w)?;
    Ok((m, [g.db(l), g.db(r)]))
}

fn check_pair(gen: &HrtfSet, reference: &HrtfSet) -> Result<()> {
    gen.check_compatible(reference)
}

fn pair_graph(
    gen: &HrtfSet,
    reference: &HrtfSet,
    trainable: bool,
    need_op: bool,
) -> Result<(Graph, Var, EarFields, EarFields, Option<Var>)> {
    check_pair(gen, reference)?;
    let mut g = Graph::new();
    let (m, p) = set_fields(&mut g, gen, trainable)?;
    let (_, t) = set_fields(&mut g, reference, false)?;
    let op = if need_op {
        let d = contrast_operator(reference.grid())?;
        Some(g.constant(d))
    } else {
        None
    };
    Ok((g, m, p, t, op))
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0]
}

pub fn lsd_loss(gen: &HrtfSet, reference: &HrtfSet) -> Result<f64> {
    let (mut g, _, p, t, _) = pair_graph(gen, reference, false, false)?;
    let v = lsd_graph(&mut g, p, t)?;
    Ok(scalar(&g, v))
}

pub fn ild_loss(gen: &HrtfSet, reference: &HrtfSet) -> Result<f64> {
    let (mut g, _, p, t, _) = pair_graph(gen, reference, false, false)?;
    let v = ild_graph(&mut g, p, t)?;
    Ok(scalar(&g, v))
}

pub fn ndl_loss(gen: &HrtfSet, reference: &HrtfSet) -> Result<f64> {
    let (mut g, _, p, t, op) = pair_graph(gen, reference, false, true)?;
    let v = ndl_graph(&mut g, p, t, op.expect("operator requested"))?;
    Ok(scalar(&g, v))
}

pub fn mse_loss(gen: &HrtfSet, reference: &HrtfSet) -> Result<f64> {
    let (mut g, _, p, t, _) = pair_graph(gen, reference, false, false)?;
    let v = mse_graph(&mut g, p, t)?;
    Ok(scalar(&g, v))
}

pub fn total_loss(gen: &HrtfSet, reference: &HrtfSet, w: &LossWeights) -> Result<LossBreakdown> {
    Ok(total_loss_with_grad(gen, reference, w, false)?.0)
}

/// Total loss and, optionally, its gradient w.r.t. the linear magnitudes of
/// `gen` in storage order.
pub fn total_loss_with_grad(
    gen: &HrtfSet,
    reference: &HrtfSet,
    w: &LossWeights,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
    let need_op = reference.grid().neighbor_table().is_some();
    if !need_op && w.ndl > 0.0 {
        return Err(HrtfError::UnsupportedTopology(
            "the neighbour loss needs an equiangular grid".into(),
        ));
    }
    let (mut g, m, p, t, op) = pair_graph(gen, reference, with_grad, need_op)?;
    let vars = loss_graph(&mut g, p, t, op, w)?;
    let b = vars.breakdown(&g);
    if !with_grad {
        return Ok((b, None));
    }
    g.backward(vars.total)?;
    let grad = g.grad(m).ok_or_else(|| invalid("no gradient recorded"))?.to_vec();
    Ok((b, Some(grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_equiangular_grid;

    fn set(n_az: usize, n_el: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> HrtfSet {
        let grid = make_equiangular_grid(n_az, n_el).unwrap();
        let n = grid.len();
        let mut db = Vec::new();
        for d in 0..n {
            for e in 0..2 {
                for b in 0..w {
                    db.push(f(d, e, b));
                }
            }
        }
        HrtfSet::from_db(grid, 48_000.0, w, &db).unwrap()
    }

    #[test]
    fn identity_gives_zero() {
        let a = set(4, 3, 4, |d, e, b| (d * 7 + e * 3 + b) as f64 * 0.3 - 2.0);
        let b = total_loss(&a, &a, &LossWeights::default()).unwrap();
        assert_eq!(b, LossBreakdown::default());
    }

    #[test]
    fn uniform_offset_and_ratio_cases() {
        let hr = set(4, 3, 4, |d, e, b| (d + e + b) as f64 * 0.5);
        let g = set(4, 3, 4, |d, e, b| (d + e + b) as f64 * 0.5 + 3.0);
        assert!((lsd_loss(&g, &hr).unwrap() - 3.0).abs() < 1e-12);
        assert!(ndl_loss(&g, &hr).unwrap().abs() < 1e-12);
        let hr = set(4, 3, 4, |_, e, _| if e == 0 { 6.0 } else { 0.0 });
        let g = set(4, 3, 4, |_, e, _| if e == 0 { 4.0 } else { 0.0 });
        assert!((ild_loss(&g, &hr).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn weights_project_single_terms() {
        let hr = set(4, 3, 4, |d, e, b| ((d * 13 + e * 5 + b * 3) % 7) as f64);
        let g = set(4, 3, 4, |d, e, b| ((d * 11 + e * 2 + b) % 5) as f64);
        let only = LossWeights {
            lsd: 1.0,
            ild: 0.0,
            ndl: 0.0,
            mse: 0.0,
        };
        let b = total_loss(&g, &hr, &only).unwrap();
        assert_eq!(b.total, b.lsd);
    }

    #[test]
    fn grid_mismatch_rejected() {
        let a = set(4, 3, 4, |_, _, _| 0.0);
        let b = set(4, 2, 4, |_, _, _| 0.0);
        assert!(lsd_loss(&a, &b).is_err());
        let c = set(4, 3, 5, |_, _, _| 0.0);
        assert!(ild_loss(&a, &c).is_err());
    }

    #[test]
    fn ndl_needs_equiangular_grid() {
        let a = set(4, 3, 4, |d, _, _| d as f64);
        let picked = a.select(&[0, 1, 2, 3]).unwrap();
        assert!(matches!(
            ndl_loss(&picked, &picked),
            Err(HrtfError::UnsupportedTopology(_))
        ));
        let w = LossWeights {
            ndl: 0.0,
            ..LossWeights::default()
        };
        assert!(total_loss(&picked, &picked, &w).is_ok());
    }
}
