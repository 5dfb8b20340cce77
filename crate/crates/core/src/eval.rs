//! Evaluation metrics and reports.
//!
//! ITD is not observable from magnitudes alone. The estimator rebuilds
//! minimum-phase impulse responses from each ear's magnitude (real cepstrum),
//! low-passes at 1.5 kHz and takes the interaural cross-correlation peak.
//! Errors are reported in microseconds.

use std::fmt::Write as _;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::error::{invalid, HrtfError, Result};
use crate::grid::{Ear, HrtfSet, SparseMeasurement, SparsityLevel};
use crate::losses;
use crate::model::{self, ModelWeights};
use crate::sht::ShFitConfig;

/// Smallest bin count the ITD estimator accepts.
pub const ITD_MIN_BINS: usize = 16;
pub const ITD_LOWPASS_HZ: f64 = 1500.0;
pub const ITD_OVERSAMPLE: usize = 8;

pub fn lsd_metric(gen: &HrtfSet, reference: &HrtfSet) -> Result<f64> {
    losses::lsd_loss(gen, reference)
}

pub fn ild_metric(gen: &HrtfSet, reference: &HrtfSet) -> Result<f64> {
    losses::ild_loss(gen, reference)
}

/// Left and right impulse responses of one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct BinauralHrir {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub sample_rate_hz: f64,
}

fn fft(buf: &mut [Complex<f64>], inverse: bool) {
    let mut planner = FftPlanner::new();
    let plan = if inverse {
        planner.plan_fft_inverse(buf.len())
    } else {
        planner.plan_fft_forward(buf.len())
    };
    plan.process(buf);
    if inverse {
        let k = 1.0 / buf.len() as f64;
        for v in buf.iter_mut() {
            *v *= k;
        }
    }
}

/// Minimum-phase impulse response (length `2W`) from `W` magnitudes at
/// `k fs / 2W`, `k = 1..W`. The missing DC bin copies bin 1.
pub fn minimum_phase_hrir(magnitudes: &[f64]) -> Result<Vec<f64>> {
    let w = magnitudes.len();
    if w < 2 {
        return Err(invalid("minimum-phase reconstruction needs at least 2 bins"));
    }
    let n = 2 * w;
    let floor = crate::grid::MAGNITUDE_FLOOR;
    let mag = |k: usize| magnitudes[k.clamp(1, w) - 1].max(floor);
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|k| {
            let kk = if k <= w { k } else { n - k };
            Complex::new(mag(kk).ln(), 0.0)
        })
        .collect();
    fft(&mut buf, true);
    // fold the real cepstrum onto positive quefrencies
    for (q, c) in buf.iter_mut().enumerate() {
        let f = match q {
            0 => 1.0,
            q if q < w => 2.0,
            q if q == w => 1.0,
            _ => 0.0,
        };
        *c = Complex::new(c.re * f, 0.0);
    }
    fft(&mut buf, false);
    for c in buf.iter_mut() {
        *c = c.exp();
    }
    fft(&mut buf, true);
    Ok(buf.iter().map(|c| c.re).collect())
}

/// Minimum-phase responses of one direction of a set.
pub fn hrirs_from_set(set: &HrtfSet, direction: usize) -> Result<BinauralHrir> {
    if set.n_bins() < ITD_MIN_BINS {
        return Err(HrtfError::InsufficientResolution(format!(
            "ITD estimation needs at least {ITD_MIN_BINS} bins, got {}",
            set.n_bins()
        )));
    }
    if direction >= set.n_directions() {
        return Err(invalid(format!(
            "direction {direction} out of range for {} directions",
            set.n_directions()
        )));
    }
    Ok(BinauralHrir {
        left: minimum_phase_hrir(set.spectrum(direction, Ear::Left))?,
        right: minimum_phase_hrir(set.spectrum(direction, Ear::Right))?,
        sample_rate_hz: set.sample_rate_hz(),
    })
}

/// Delays `h` by `delay_s` seconds (fractional delays via a linear phase
/// on a zero-padded spectrum). The result is longer than the input.
pub fn delay_signal(h: &[f64], delay_s: f64, sample_rate_hz: f64) -> Result<Vec<f64>> {
    if !(delay_s >= 0.0 && delay_s.is_finite()) {
        return Err(invalid("delay must be finite and >= 0"));
    }
    let d = delay_s * sample_rate_hz;
    let n = (2 * (h.len() + d.ceil() as usize + 1)).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|i| Complex::new(h.get(i).copied().unwrap_or(0.0), 0.0))
        .collect();
    fft(&mut buf, false);
    for (k, c) in buf.iter_mut().enumerate() {
        let kk = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        let phase = -2.0 * std::f64::consts::PI * kk * d / n as f64;
        if k == n / 2 {
            *c *= phase.cos();
        } else {
            *c *= Complex::from_polar(1.0, phase);
        }
    }
    fft(&mut buf, true);
    Ok(buf.iter().map(|c| c.re).collect())
}

impl BinauralHrir {
    /// Adds `delay_us` microseconds of extra delay to one ear.
    pub fn with_delay(&self, ear: Ear, delay_us: f64) -> Result<Self> {
        let mut out = self.clone();
        let slot = match ear {
            Ear::Left => &mut out.left,
            Ear::Right => &mut out.right,
        };
        *slot = delay_signal(slot, delay_us * 1e-6, self.sample_rate_hz)?;
        Ok(out)
    }

    pub fn swap_ears(&self) -> Self {
        Self {
            left: self.right.clone(),
            right: self.left.clone(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

/// Low-passed, oversampled interaural cross-correlation. Entry `i` holds
/// lag `(i - len + 1) / (ITD_OVERSAMPLE fs)`, positive when the right ear
/// lags the left.
pub fn cross_correlation(h: &BinauralHrir) -> Vec<f64> {
    let len = h.left.len().max(h.right.len());
    let n = (2 * len).next_power_of_two();
    let spec = |x: &[f64]| {
        let mut b: Vec<Complex<f64>> = (0..n)
            .map(|i| Complex::new(x.get(i).copied().unwrap_or(0.0), 0.0))
            .collect();
        fft(&mut b, false);
        b
    };
    let l = spec(&h.left);
    let r = spec(&h.right);
    let m = n * ITD_OVERSAMPLE;
    let mut cross = vec![Complex::new(0.0, 0.0); m];
    let cutoff = ITD_LOWPASS_HZ * n as f64 / h.sample_rate_hz;
    for k in 0..n {
        let kk = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        if kk.abs() > cutoff {
            continue;
        }
        let v = l[k].conj() * r[k];
        let dst = if k <= n / 2 { k } else { m - (n - k) };
        cross[dst] = v;
    }
    fft(&mut cross, true);
    // reorder to lags -(len-1)..=(len-1) in oversampled steps
    let reach = (len - 1) * ITD_OVERSAMPLE;
    (0..=2 * reach)
        .map(|i| {
            let lag = i as isize - reach as isize;
            let idx = lag.rem_euclid(m as isize) as usize;
            cross[idx].re
        })
        .collect()
}

/// Interaural delay in microseconds, positive when the right ear lags.
pub fn itd_from_hrirs(h: &BinauralHrir) -> f64 {
    let cc = cross_correlation(h);
    let reach = (cc.len() - 1) / 2;
    let mut best = 0;
    for i in 1..cc.len() {
        if cc[i] > cc[best] {
            best = i;
        }
    }
    let mut pos = best as f64;
    if best > 0 && best + 1 < cc.len() {
        let (a, b, c) = (cc[best - 1], cc[best], cc[best + 1]);
        let den = a - 2.0 * b + c;
        if den < 0.0 {
            pos += 0.5 * (a - c) / den;
        }
    }
    let lag_samples = (pos - reach as f64) / ITD_OVERSAMPLE as f64;
    lag_samples * 1e6 / h.sample_rate_hz
}

/// Refined lag resolution in microseconds.
pub fn itd_lag_step_us(sample_rate_hz: f64) -> f64 {
    1e6 / (sample_rate_hz * ITD_OVERSAMPLE as f64)
}

pub fn itd_estimate(set: &HrtfSet, direction: usize) -> Result<f64> {
    Ok(itd_from_hrirs(&hrirs_from_set(set, direction)?))
}

/// Mean absolute ITD difference over paired responses.
pub fn itd_metric_from_hrirs(gen: &[BinauralHrir], reference: &[BinauralHrir]) -> Result<f64> {
    if gen.len() != reference.len() || gen.is_empty() {
        return Err(invalid(format!(
            "paired responses required, got {} and {}",
            gen.len(),
            reference.len()
        )));
    }
    let sum: f64 = gen
        .iter()
        .zip(reference)
        .map(|(a, b)| (itd_from_hrirs(a) - itd_from_hrirs(b)).abs())
        .sum();
    Ok(sum / gen.len() as f64)
}

pub fn itd_metric(gen: &HrtfSet, reference: &HrtfSet) -> Result<f64> {
    gen.check_compatible(reference)?;
    let per: Vec<f64> = (0..gen.n_directions())
        .into_par_iter()
        .map(|d| Ok((itd_estimate(gen, d)? - itd_estimate(reference, d)?).abs()))
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject: String,
    pub lsd_db: f64,
    pub ild_db: f64,
    pub itd_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub level: usize,
    pub subjects: Vec<SubjectMetrics>,
    pub aggregate: SubjectMetrics,
}

pub const AGGREGATE_ROW: &str = "mean";

impl MetricReport {
    pub fn new(method: impl Into<String>, level: usize, subjects: Vec<SubjectMetrics>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(HrtfError::InvalidDataset("no subjects evaluated".into()));
        }
        let n = subjects.len() as f64;
        let mean = |f: fn(&SubjectMetrics) -> f64| subjects.iter().map(f).sum::<f64>() / n;
        let aggregate = SubjectMetrics {
            subject: AGGREGATE_ROW.into(),
            lsd_db: mean(|s| s.lsd_db),
            ild_db: mean(|s| s.ild_db),
            itd_us: mean(|s| s.itd_us),
        };
        Ok(Self {
            method: method.into(),
            level,
            subjects,
            aggregate,
        })
    }

    /// `method,level,subject,lsd_db,ild_db,itd_us`, subjects then the mean row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,level,subject,lsd_db,ild_db,itd_us\n");
        for r in self.subjects.iter().chain(std::iter::once(&self.aggregate)) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                self.method, self.level, r.subject, r.lsd_db, r.ild_db, r.itd_us
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header.trim() != "method,level,subject,lsd_db,ild_db,itd_us" {
            return Err(invalid(format!("unexpected report header `{header}`")));
        }
        let mut method = None;
        let mut level = None;
        let mut rows = Vec::new();
        let mut aggregate = None;
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(invalid(format!("report line {} has {} fields", i + 2, f.len())));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| invalid(format!("report line {}: {e}", i + 2)))
            };
            method.get_or_insert_with(|| f[0].to_string());
            let lv: usize = f[1]
                .parse()
                .map_err(|e| invalid(format!("report line {}: {e}", i + 2)))?;
            level.get_or_insert(lv);
            let row = SubjectMetrics {
                subject: f[2].to_string(),
                lsd_db: num(f[3])?,
                ild_db: num(f[4])?,
                itd_us: num(f[5])?,
            };
            if row.subject == AGGREGATE_ROW {
                aggregate = Some(row);
            } else {
                rows.push(row);
            }
        }
        Ok(Self {
            method: method.ok_or_else(|| invalid("empty report"))?,
            level: level.unwrap_or(0),
            subjects: rows,
            aggregate: aggregate.ok_or_else(|| invalid("report has no aggregate row"))?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// One evaluation subject. `truth` is the dense reference set.
#[derive(Debug, Clone)]
pub struct EvalSubject {
    pub name: String,
    pub sparse: SparseMeasurement,
    pub truth: Option<HrtfSet>,
}

#[derive(Debug, Clone)]
pub enum Method {
    Model(Box<ModelWeights>),
    Barycentric,
    ShBaseline(ShFitConfig),
    /// Returns the reference itself.
    Identity,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Model(_) => "hrtfformer",
            Method::Barycentric => "barycentric",
            Method::ShBaseline(_) => "sh",
            Method::Identity => "identity",
        }
    }

    pub fn upsample(&self, sparse: &SparseMeasurement, truth: &HrtfSet) -> Result<HrtfSet> {
        let target = truth.grid();
        match self {
            Method::Model(w) => model::upsample(w, sparse, target),
            Method::Barycentric => baselines::barycentric_upsample(sparse, target),
            Method::ShBaseline(cfg) => baselines::sh_baseline_upsample(sparse, target, cfg),
            Method::Identity => Ok(truth.clone()),
        }
    }
}

/// All three metrics for one generated/reference pair.
pub fn metrics(name: &str, gen: &HrtfSet, truth: &HrtfSet) -> Result<SubjectMetrics> {
    Ok(SubjectMetrics {
        subject: name.to_string(),
        lsd_db: lsd_metric(gen, truth)?,
        ild_db: ild_metric(gen, truth)?,
        itd_us: itd_metric(gen, truth)?,
    })
}

pub fn evaluate_method(method: &Method, dataset: &[EvalSubject], level: SparsityLevel) -> Result<MetricReport> {
    for s in dataset {
        if s.truth.is_none() {
            return Err(HrtfError::InvalidDataset(format!(
                "subject `{}` has no ground truth",
                s.name
            )));
        }
        if s.sparse.level() != level {
            return Err(HrtfError::InvalidDataset(format!(
                "subject `{}` is at level {}, expected {}",
                s.name,
                s.sparse.level().count(),
                level.count()
            )));
        }
    }
    let rows: Vec<SubjectMetrics> = dataset
        .par_iter()
        .map(|s| {
            let truth = s.truth.as_ref().expect("checked above");
            let gen = method.upsample(&s.sparse, truth)?;
            metrics(&s.name, &gen, truth)
        })
        .collect::<Result<_>>()?;
    MetricReport::new(method.name(), level.count(), rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimum_phase_keeps_the_magnitude() {
        let w = 32;
        let mags: Vec<f64> = (1..=w).map(|k| 1.0 + 0.5 * (k as f64 * 0.3).sin()).collect();
        let h = minimum_phase_hrir(&mags).unwrap();
        let mut buf: Vec<Complex<f64>> = h.iter().map(|&x| Complex::new(x, 0.0)).collect();
        fft(&mut buf, false);
        for k in 1..=w {
            assert!((buf[k].norm() - mags[k - 1]).abs() < 1e-9, "bin {k}");
        }
    }

    #[test]
    fn identical_ears_give_zero() {
        let mags: Vec<f64> = (1..=16).map(|k| 1.0 / k as f64).collect();
        let h = minimum_phase_hrir(&mags).unwrap();
        let b = BinauralHrir {
            left: h.clone(),
            right: h,
            sample_rate_hz: 48_000.0,
        };
        assert!(itd_from_hrirs(&b).abs() < 1e-9);
    }

    #[test]
    fn report_rows_and_aggregate() {
        let r = MetricReport::new(
            "x",
            3,
            vec![
                SubjectMetrics {
                    subject: "a".into(),
                    lsd_db: 1.0,
                    ild_db: 2.0,
                    itd_us: 3.0,
                },
                SubjectMetrics {
                    subject: "b".into(),
                    lsd_db: 2.0,
                    ild_db: 0.5,
                    itd_us: 0.1,
                },
            ],
        )
        .unwrap();
        assert_eq!(r.aggregate.lsd_db, 1.5);
        assert_eq!(MetricReport::from_csv(&r.to_csv()).unwrap(), r);
        assert_eq!(MetricReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }
}
