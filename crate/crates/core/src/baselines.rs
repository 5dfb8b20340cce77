//! Non-learned upsampling: spherical barycentric interpolation and
//! order-limited SH interpolation. Both work on dB magnitudes.

use crate::error::{HrtfError, Result};
use crate::grid::{Direction, HrtfSet, SparseMeasurement, SphericalGrid, DISTINCT_TOLERANCE_DEG};
use crate::sht::{self, ShFitConfig};

/// How many nearest sparse points are searched for a containing triangle.
const CANDIDATES: usize = 10;

const DEGENERATE_DET: f64 = 1e-12;

/// Three sparse indices and their (clipped, renormalised) weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarycentricWeights {
    pub vertices: [usize; 3],
    pub weights: [f64; 3],
    /// True when a containing triangle was found (no clipping needed).
    pub contained: bool,
}

fn det3(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0]) + a[2] * (b[0] * c[1] - b[1] * c[0])
}

/// Solves `t = x a + y b + z c` by Cramer's rule; `None` when the three
/// vertices lie on a great circle.
pub fn raw_barycentric(t: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> Option<[f64; 3]> {
    let d = det3(a, b, c);
    if d.abs() < DEGENERATE_DET {
        return None;
    }
    Some([det3(t, b, c) / d, det3(a, t, c) / d, det3(a, b, t) / d])
}

/// Barycentric coordinates normalised to sum to one.
fn normalised(raw: [f64; 3]) -> [f64; 3] {
    let s = raw[0] + raw[1] + raw[2];
    [raw[0] / s, raw[1] / s, raw[2] / s]
}

/// Picks the interpolation triangle and weights for one target direction.
pub fn barycentric_weights(sparse: &SphericalGrid, target: &Direction) -> Result<BarycentricWeights> {
    let dirs = sparse.directions();
    if dirs.len() < 3 {
        return Err(HrtfError::InsufficientData(format!(
            "barycentric interpolation needs >= 3 directions, got {}",
            dirs.len()
        )));
    }
    let mut order: Vec<(f64, usize)> = dirs.iter().map(|d| d.angle_to(target)).zip(0..).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    if order[0].0 <= DISTINCT_TOLERANCE_DEG.to_radians() {
        let i = order[0].1;
        return Ok(BarycentricWeights {
            vertices: [i, i, i],
            weights: [1.0, 0.0, 0.0],
            contained: true,
        });
    }
    let t = target.to_cartesian();
    let xyz: Vec<[f64; 3]> = dirs.iter().map(Direction::to_cartesian).collect();
    let k = order.len().min(CANDIDATES);

    // containing triangle with the smallest summed vertex distance
    let mut best: Option<(f64, [usize; 3], [f64; 3])> = None;
    for i in 0..k {
        for j in (i + 1)..k {
            for l in (j + 1)..k {
                let v = [order[i].1, order[j].1, order[l].1];
                let Some(raw) = raw_barycentric(t, xyz[v[0]], xyz[v[1]], xyz[v[2]]) else {
                    continue;
                };
                if raw.iter().all(|&w| w >= 0.0) {
                    let cost = order[i].0 + order[j].0 + order[l].0;
                    if best.as_ref().is_none_or(|b| cost < b.0) {
                        best = Some((cost, v, normalised(raw)));
                    }
                }
            }
        }
    }
    if let Some((_, vertices, weights)) = best {
        return Ok(BarycentricWeights {
            vertices,
            weights,
            contained: true,
        });
    }

    // fallback: the three nearest, weights clipped to [0, 1]
    let v = [order[0].1, order[1].1, order[2].1];
    let weights = match raw_barycentric(t, xyz[v[0]], xyz[v[1]], xyz[v[2]]) {
        Some(raw) => clip_renormalise(normalised(raw)),
        None => great_circle_weights(t, [xyz[v[0]], xyz[v[1]], xyz[v[2]]]),
    };
    Ok(BarycentricWeights {
        vertices: v,
        weights,
        contained: false,
    })
}

fn clip_renormalise(w: [f64; 3]) -> [f64; 3] {
    let c = w.map(|x| if x.is_finite() { x.clamp(0.0, 1.0) } else { 0.0 });
    let s: f64 = c.iter().sum();
    if s > 0.0 {
        c.map(|x| x / s)
    } else {
        [1.0 / 3.0; 3]
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Weights for three vertices on one great circle: the target is projected
/// onto the circle's plane and interpolated linearly in angle between the
/// two vertices bracketing it.
fn great_circle_weights(t: [f64; 3], v: [[f64; 3]; 3]) -> [f64; 3] {
    let pairs = [(0, 1), (0, 2), (1, 2)];
    let (i, j) = pairs
        .into_iter()
        .max_by(|a, b| {
            let na = dot(cross(v[a.0], v[a.1]), cross(v[a.0], v[a.1]));
            let nb = dot(cross(v[b.0], v[b.1]), cross(v[b.0], v[b.1]));
            na.total_cmp(&nb)
        })
        .unwrap();
    let n = cross(v[i], v[j]);
    let nn = dot(n, n).sqrt();
    if nn < 1e-12 {
        // all three coincide or are antipodal pairs only
        return [1.0 / 3.0; 3];
    }
    let n = n.map(|x| x / nn);
    // in-plane orthonormal frame
    let e1 = v[i];
    let e2 = cross(n, e1);
    let angle = |p: [f64; 3]| dot(p, e2).atan2(dot(p, e1)).rem_euclid(std::f64::consts::TAU);
    let pt = [
        t[0] - dot(t, n) * n[0],
        t[1] - dot(t, n) * n[1],
        t[2] - dot(t, n) * n[2],
    ];
    if dot(pt, pt).sqrt() < 1e-12 {
        return [1.0 / 3.0; 3];
    }
    let at = angle(pt);
    let mut around: Vec<(f64, usize)> = (0..3).map(|k| (angle(v[k]), k)).collect();
    around.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut w = [0.0; 3];
    for k in 0..3 {
        let (a0, k0) = around[k];
        let (mut a1, k1) = around[(k + 1) % 3];
        if k == 2 {
            a1 += std::f64::consts::TAU;
        }
        let mut x = at;
        if x < a0 {
            x += std::f64::consts::TAU;
        }
        if x >= a0 && x <= a1 {
            let span = a1 - a0;
            if span <= 0.0 {
                w[k0] = 1.0;
            } else {
                w[k1] = (x - a0) / span;
                w[k0] = 1.0 - w[k1];
            }
            return w;
        }
    }
    [1.0 / 3.0; 3]
}

/// Barycentric upsampling of a sparse measurement onto `target`.
pub fn barycentric_upsample(sparse: &SparseMeasurement, target: &SphericalGrid) -> Result<HrtfSet> {
    barycentric_upsample_set(sparse.set(), target)
}

/// Same as [`barycentric_upsample`] for an arbitrary source set.
pub fn barycentric_upsample_set(source: &HrtfSet, target: &SphericalGrid) -> Result<HrtfSet> {
    let w = source.n_bins();
    let src_db = source.to_db();
    let mut out = Vec::with_capacity(target.len() * 2 * w);
    for dir in target.directions() {
        let bw = barycentric_weights(source.grid(), dir)?;
        for e in 0..2 {
            for b in 0..w {
                let mut v = 0.0;
                for (&vi, &wt) in bw.vertices.iter().zip(&bw.weights) {
                    if wt != 0.0 {
                        v += wt * src_db[(vi * 2 + e) * w + b];
                    }
                }
                out.push(v);
            }
        }
    }
    HrtfSet::from_db(target.clone(), source.sample_rate_hz(), w, &out)
}

/// Fit SH coefficients to the sparse data and synthesise them on `target`.
pub fn sh_baseline_upsample(sparse: &SparseMeasurement, target: &SphericalGrid, cfg: &ShFitConfig) -> Result<HrtfSet> {
    let coeffs = sht::fit_sh(sparse.set(), cfg)?;
    sht::eval_sh(&coeffs, target)
}
