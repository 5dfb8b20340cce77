//! HRTFformer: a transformer encoder-decoder from low-order to high-order
//! SH coefficients.
//!
//! Tokens are SH coefficients in flat-index order with the W frequency bins
//! as channels. Both ears run through the same weights; a learned ear
//! embedding tells them apart.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, HrtfError, Result};
use crate::grid::{Ear, HrtfSet, SparseMeasurement, SparsityLevel, SphericalGrid};
use crate::nn::{
    gqa_attention, projection_unit, AttentionConfig, AttentionVars, Graph, ProjectionGeometry, ProjectionVars,
    Resample, Tensor, Var,
};
use crate::rng::{self, Domain};
use crate::sht::{self, n_coefficients, ShCoefficients, ShFitConfig};

pub const TOKEN_SCALE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub l_in: usize,
    pub l_out: usize,
    pub n_bins: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_groups: usize,
    pub encoder_stages: usize,
    pub decoder_stages: usize,
    /// Ridge weight of the input SH fit.
    pub fit_lambda: f64,
}

fn bad(field: &str, reason: impl Into<String>) -> HrtfError {
    HrtfError::InvalidConfig {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Parameter name, shape and `(fan_in, fan_out)`.
pub type ParamSpec = (String, Vec<usize>, Option<(usize, usize)>);

impl ModelConfig {
    /// Small config for single-CPU experiments.
    pub fn desk() -> Self {
        Self {
            l_in: 1,
            l_out: 7,
            n_bins: 16,
            d_model: 32,
            n_heads: 4,
            n_kv_groups: 2,
            encoder_stages: 2,
            decoder_stages: 6,
            fit_lambda: 1e-3,
        }
    }

    /// Default full-size config for a sparsity level.
    pub fn full(level: SparsityLevel) -> Self {
        let (l_in, fit_lambda) = level.default_fit();
        let mut c = Self {
            l_in,
            l_out: 16,
            n_bins: 64,
            d_model: 128,
            n_heads: 8,
            n_kv_groups: 2,
            encoder_stages: 2,
            decoder_stages: 0,
            fit_lambda,
        };
        c.decoder_stages = c.min_decoder_stages();
        c
    }

    pub fn input_tokens(&self) -> usize {
        n_coefficients(self.l_in)
    }

    pub fn output_tokens(&self) -> usize {
        n_coefficients(self.l_out)
    }

    /// Input length after zero padding: the next power of two, at least 4.
    pub fn padded_input_len(&self) -> usize {
        self.input_tokens().next_power_of_two().max(4)
    }

    pub fn latent_len(&self) -> usize {
        self.padded_input_len() >> self.encoder_stages.min(usize::BITS as usize - 1)
    }

    /// Decoder length before truncation.
    pub fn decoded_len(&self) -> usize {
        self.latent_len() << self.decoder_stages
    }

    /// Fewest decoder stages that reach the output token count.
    pub fn min_decoder_stages(&self) -> usize {
        let mut s = 0;
        while self.latent_len().max(1) << s < self.output_tokens() {
            s += 1;
        }
        s
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.d_model,
            n_heads: self.n_heads,
            n_kv_groups: self.n_kv_groups,
        }
    }

    pub fn fit_config(&self) -> ShFitConfig {
        ShFitConfig {
            order: self.l_in,
            ridge_lambda: self.fit_lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_in > sht::MAX_ORDER {
            return Err(bad("l_in", format!("must be <= {}", sht::MAX_ORDER)));
        }
        if self.l_out > sht::MAX_ORDER {
            return Err(bad("l_out", format!("must be <= {}", sht::MAX_ORDER)));
        }
        if self.n_bins < 2 {
            return Err(bad("n_bins", "must be >= 2"));
        }
        if self.d_model == 0 {
            return Err(bad("d_model", "must be >= 1"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(bad("n_heads", format!("must divide d_model {}", self.d_model)));
        }
        if !(self.d_model / self.n_heads).is_multiple_of(2) {
            return Err(bad("n_heads", "head dimension d_model / n_heads must be even"));
        }
        if self.n_kv_groups == 0 || !self.n_heads.is_multiple_of(self.n_kv_groups) {
            return Err(bad("n_kv_groups", format!("must divide n_heads {}", self.n_heads)));
        }
        if self.encoder_stages >= usize::BITS as usize || self.latent_len() < 1 {
            return Err(bad(
                "encoder_stages",
                format!(
                    "padded input length {} cannot be halved {} times",
                    self.padded_input_len(),
                    self.encoder_stages
                ),
            ));
        }
        if self.decoder_stages > 24 || self.decoded_len() < self.output_tokens() {
            return Err(bad(
                "decoder_stages",
                format!(
                    "latent length {} x 2^{} is below the {} output tokens",
                    self.latent_len(),
                    self.decoder_stages,
                    self.output_tokens()
                ),
            ));
        }
        if !(self.fit_lambda >= 0.0 && self.fit_lambda.is_finite()) {
            return Err(bad("fit_lambda", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Every parameter name with its shape and `(fan_in, fan_out)`; biases
    /// and embeddings carry `None`.
    pub fn parameter_specs(&self) -> Vec<ParamSpec> {
        let d = self.d_model;
        let kv = self.attention().kv_dim();
        let w = self.n_bins;
        let k = ProjectionGeometry::MODEL.kernel;
        let mut s: Vec<ParamSpec> = Vec::new();
        let lin = |s: &mut Vec<_>, name: String, i: usize, o: usize| {
            s.push((name, vec![i, o], Some((i, o))));
        };
        lin(&mut s, "input.weight".into(), w, d);
        s.push(("input.bias".into(), vec![d], None));
        s.push(("ear_embedding".into(), vec![2, d], None));
        let attn = |s: &mut Vec<_>, p: &str| {
            for (n, o) in [("wq", d), ("wk", kv), ("wv", kv), ("wo", d)] {
                s.push((format!("{p}.attn.{n}"), vec![d, o], Some((d, o))));
            }
            s.push((format!("{p}.attn.bo"), vec![d], None));
        };
        let conv = |s: &mut Vec<_>, p: String, shape: [usize; 3], fans: (usize, usize), cout: usize| {
            s.push((format!("{p}.weight"), shape.to_vec(), Some(fans)));
            s.push((format!("{p}.bias"), vec![cout], None));
        };
        for i in 0..self.encoder_stages {
            let p = format!("encoder.{i}");
            attn(&mut s, &p);
            conv(&mut s, format!("{p}.ff1"), [2 * d, d, 3], (3 * d, 6 * d), 2 * d);
            conv(&mut s, format!("{p}.ff2"), [d, 2 * d, 1], (2 * d, d), d);
            conv(&mut s, format!("{p}.down"), [d, d, 3], (3 * d, 3 * d), d);
        }
        for i in 0..self.decoder_stages {
            let p = format!("decoder.{i}");
            attn(&mut s, &p);
            for role in ["first", "back", "second"] {
                conv(&mut s, format!("{p}.proj.{role}"), [d, d, k], (k * d, k * d), d);
            }
        }
        lin(&mut s, "head.weight".into(), d, w);
        s.push(("head.bias".into(), vec![w], None));
        s
    }
}

/// All learnable tensors, keyed by stable path names.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelWeights {
    /// Deterministic initialisation: weights `~ N(0, 2 / (fan_in + fan_out))`,
    /// biases and embeddings zero.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = BTreeMap::new();
        for (pi, (name, shape, fans)) in cfg.parameter_specs().into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = match fans {
                Some((fi, fo)) => {
                    let std = (2.0 / (fi + fo) as f64).sqrt();
                    let dist = Normal::new(0.0, std).expect("positive std");
                    let mut r = rng::keyed(seed, Domain::WeightInit, &[pi as u64]);
                    (0..n).map(|_| dist.sample(&mut r)).collect()
                }
                None => vec![0.0; n],
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { config: *cfg, tensors })
    }

    /// Reassembles weights, checking names and shapes against the config.
    pub fn from_tensors(cfg: &ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        cfg.validate()?;
        let specs = cfg.parameter_specs();
        if specs.len() != tensors.len() {
            return Err(invalid(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (name, shape, _) in &specs {
            let t = tensors
                .get(name)
                .ok_or_else(|| invalid(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(invalid(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config: *cfg, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            config: self.config,
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), g.param(t.clone())))
                .collect(),
        }
    }
}

/// Weights registered in one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    config: ModelConfig,
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    fn attn(&self, p: &str) -> AttentionVars {
        AttentionVars {
            wq: self.var(&format!("{p}.attn.wq")),
            wk: self.var(&format!("{p}.attn.wk")),
            wv: self.var(&format!("{p}.attn.wv")),
            wo: self.var(&format!("{p}.attn.wo")),
            bo: self.var(&format!("{p}.attn.bo")),
        }
    }

    fn conv(&self, p: &str) -> (Var, Var) {
        (self.var(&format!("{p}.weight")), self.var(&format!("{p}.bias")))
    }
}

fn positions(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn transformer_block(g: &mut Graph, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let (seq, _) = g.value(x).dims2()?;
    let t = g.token_scale(x, TOKEN_SCALE_EPS)?;
    let a = gqa_attention(g, t, &b.config.attention(), &b.attn(prefix), &positions(seq))?;
    g.add(x, a)
}

/// Encoder on a graph: `[P_in x W]` tokens of one ear to `[latent x d]`.
pub fn encode_graph(g: &mut Graph, b: &Bound, tokens: Var, ear: Ear) -> Result<Var> {
    let cfg = &b.config;
    let (p, w) = g.value(tokens).dims2()?;
    if p != cfg.input_tokens() || w != cfg.n_bins {
        return Err(invalid(format!(
            "encoder input shape [{p}, {w}] does not match [{}, {}]",
            cfg.input_tokens(),
            cfg.n_bins
        )));
    }
    let padded = cfg.padded_input_len();
    let x = if padded > p {
        // zero rows appended through a [padded x p] selection matrix
        let mut sel = Tensor::zeros(vec![padded, p]);
        for i in 0..p {
            sel.data_mut()[i * p + i] = 1.0;
        }
        let sel = g.constant(sel);
        g.matmul(sel, tokens)?
    } else {
        tokens
    };
    let x = g.matmul(x, b.var("input.weight"))?;
    let x = g.add_row_bias(x, b.var("input.bias"))?;
    let emb = g.slice_rows(b.var("ear_embedding"), ear.index(), 1)?;
    let emb = g.reshape(emb, vec![cfg.d_model])?;
    let mut x = g.add_row_bias(x, emb)?;
    for i in 0..cfg.encoder_stages {
        let p = format!("encoder.{i}");
        x = transformer_block(g, b, &p, x)?;
        let t = g.token_scale(x, TOKEN_SCALE_EPS)?;
        let (w1, b1) = b.conv(&format!("{p}.ff1"));
        let h = g.conv1d(t, w1, b1, 1, 1)?;
        let h = g.gelu(h);
        let (w2, b2) = b.conv(&format!("{p}.ff2"));
        let h = g.conv1d(h, w2, b2, 1, 0)?;
        x = g.add(x, h)?;
        let (wd, bd) = b.conv(&format!("{p}.down"));
        let y = g.conv1d(x, wd, bd, 2, 1)?;
        x = g.gelu(y);
    }
    Ok(x)
}

/// Decoder on a graph: `[latent x d]` to `[P_out x W]` coefficient tokens.
pub fn decode_graph(g: &mut Graph, b: &Bound, z: Var) -> Result<Var> {
    let cfg = &b.config;
    let (len, d) = g.value(z).dims2()?;
    if len != cfg.latent_len() || d != cfg.d_model {
        return Err(invalid(format!(
            "latent shape [{len}, {d}] does not match [{}, {}]",
            cfg.latent_len(),
            cfg.d_model
        )));
    }
    let mut x = z;
    for i in 0..cfg.decoder_stages {
        let p = format!("decoder.{i}");
        x = transformer_block(g, b, &p, x)?;
        let w = ProjectionVars {
            first: b.conv(&format!("{p}.proj.first")),
            back: b.conv(&format!("{p}.proj.back")),
            second: b.conv(&format!("{p}.proj.second")),
        };
        x = projection_unit(g, x, Resample::Up, &w, &ProjectionGeometry::MODEL)?;
    }
    let x = g.slice_rows(x, 0, cfg.output_tokens())?;
    let y = g.matmul(x, b.var("head.weight"))?;
    g.add_row_bias(y, b.var("head.bias"))
}

/// Both ears end to end on a graph; returns `[P_out x W]` per ear.
pub fn forward_graph(g: &mut Graph, b: &Bound, input: &ShCoefficients) -> Result<[Var; 2]> {
    check_input(&b.config, input)?;
    let mut out = [None, None];
    for ear in Ear::BOTH {
        let t = Tensor::matrix(b.config.input_tokens(), b.config.n_bins, input.ear_matrix(ear))?;
        let tv = g.constant(t);
        let z = encode_graph(g, b, tv, ear)?;
        out[ear.index()] = Some(decode_graph(g, b, z)?);
    }
    Ok(out.map(|v| v.expect("both ears decoded")))
}

fn check_input(cfg: &ModelConfig, input: &ShCoefficients) -> Result<()> {
    if input.order() != cfg.l_in {
        return Err(invalid(format!(
            "input order {} does not match l_in {}",
            input.order(),
            cfg.l_in
        )));
    }
    if input.n_bins() != cfg.n_bins {
        return Err(invalid(format!(
            "input has {} bins, model expects {}",
            input.n_bins(),
            cfg.n_bins
        )));
    }
    Ok(())
}

/// Design matrix of `grid` at order `l_out` as a row-major tensor.
pub fn design_tensor(grid: &SphericalGrid, order: usize) -> Result<Tensor> {
    let a = sht::design_matrix(grid, order)?;
    let (n, p) = a.shape();
    let mut data = Vec::with_capacity(n * p);
    for i in 0..n {
        for j in 0..p {
            data.push(a[(i, j)]);
        }
    }
    Tensor::matrix(n, p, data)
}

/// Latent of one ear.
pub fn encode(weights: &ModelWeights, coeffs_in: &ShCoefficients, ear: Ear) -> Result<Tensor> {
    check_input(&weights.config, coeffs_in)?;
    let mut g = Graph::new();
    let b = weights.bind(&mut g);
    let t = Tensor::matrix(
        weights.config.input_tokens(),
        weights.config.n_bins,
        coeffs_in.ear_matrix(ear),
    )?;
    let tv = g.constant(t);
    let z = encode_graph(&mut g, &b, tv, ear)?;
    Ok(g.value(z).clone())
}

/// `[P_out x W]` coefficient tokens decoded from one latent.
pub fn decode_ear(weights: &ModelWeights, z: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = weights.bind(&mut g);
    let zv = g.constant(z.clone());
    let y = decode_graph(&mut g, &b, zv)?;
    Ok(g.value(y).clone())
}

/// Output coefficients from the two ear latents.
pub fn decode(weights: &ModelWeights, z: &[Tensor; 2], sample_rate_hz: f64) -> Result<ShCoefficients> {
    let l = decode_ear(weights, &z[0])?;
    let r = decode_ear(weights, &z[1])?;
    let c = &weights.config;
    ShCoefficients::from_ear_matrices(c.l_out, c.n_bins, sample_rate_hz, l.data(), r.data())
}

/// High-order coefficients predicted from low-order input coefficients.
pub fn predict_coefficients(weights: &ModelWeights, input: &ShCoefficients) -> Result<ShCoefficients> {
    let mut g = Graph::new();
    let b = weights.bind(&mut g);
    let [l, r] = forward_graph(&mut g, &b, input)?;
    let c = &weights.config;
    ShCoefficients::from_ear_matrices(
        c.l_out,
        c.n_bins,
        input.sample_rate_hz(),
        g.value(l).data(),
        g.value(r).data(),
    )
}

/// Sparse measurement to a dense set on `target`.
pub fn upsample(weights: &ModelWeights, sparse: &SparseMeasurement, target: &SphericalGrid) -> Result<HrtfSet> {
    let input = sht::fit_sh(sparse.set(), &weights.config.fit_config())?;
    let out = predict_coefficients(weights, &input)?;
    sht::eval_sh(&out, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_stage_arithmetic() {
        let bad_cfg = ModelConfig {
            decoder_stages: 4,
            ..ModelConfig::desk()
        };
        match bad_cfg.validate() {
            Err(HrtfError::InvalidConfig { field, .. }) => assert_eq!(field, "decoder_stages"),
            other => panic!("expected invalid config, got {other:?}"),
        }
        let c = ModelConfig::desk();
        c.validate().unwrap();
        assert_eq!(c.padded_input_len(), 4);
        assert_eq!(c.latent_len(), 1);
        assert_eq!(c.decoded_len(), 64);
        assert_eq!(c.min_decoder_stages(), 6);
    }

    #[test]
    fn full_configs_validate() {
        for level in SparsityLevel::ALL {
            let c = ModelConfig::full(level);
            c.validate().unwrap();
            assert!(c.decoded_len() >= 289);
        }
    }

    #[test]
    fn field_errors_name_the_field() {
        let cases = [
            (
                ModelConfig {
                    n_heads: 5,
                    ..ModelConfig::desk()
                },
                "n_heads",
            ),
            (
                ModelConfig {
                    n_kv_groups: 3,
                    ..ModelConfig::desk()
                },
                "n_kv_groups",
            ),
            (
                ModelConfig {
                    encoder_stages: 3,
                    ..ModelConfig::desk()
                },
                "encoder_stages",
            ),
            (
                ModelConfig {
                    n_bins: 1,
                    ..ModelConfig::desk()
                },
                "n_bins",
            ),
        ];
        for (c, want) in cases {
            match ModelWeights::build(&c, 0) {
                Err(HrtfError::InvalidConfig { field, .. }) => assert_eq!(field, want),
                other => panic!("{want}: {other:?}"),
            }
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = ModelWeights::build(&ModelConfig::desk(), 3).unwrap();
        let b = ModelWeights::build(&ModelConfig::desk(), 3).unwrap();
        assert_eq!(a, b);
        let c = ModelWeights::build(&ModelConfig::desk(), 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shapes_through_the_pipeline() {
        let cfg = ModelConfig::desk();
        let w = ModelWeights::build(&cfg, 1).unwrap();
        let vals = (0..2 * cfg.n_bins * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let input = ShCoefficients::new(1, cfg.n_bins, 48_000.0, vals).unwrap();
        let zl = encode(&w, &input, Ear::Left).unwrap();
        assert_eq!(zl.shape(), &[cfg.latent_len(), cfg.d_model]);
        let zr = encode(&w, &input, Ear::Right).unwrap();
        let out = decode(&w, &[zl, zr], 48_000.0).unwrap();
        assert_eq!(out.order(), cfg.l_out);
        assert!(out.values().iter().all(|v| v.is_finite()));
        let direct = predict_coefficients(&w, &input).unwrap();
        assert_eq!(direct, out);
    }
}
