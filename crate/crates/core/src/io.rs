//! On-disk formats: the `HRG1` HRTF container, the `HRC1` checkpoint and
//! plain-text `key = value` configs. All integers and floats are
//! little-endian. Files are written to a temporary sibling and renamed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{HrtfError, Result};
use crate::eval::EvalSubject;
use crate::grid::{Direction, GridKind, HrtfSet, SparseMeasurement, SparsityLevel, SphericalGrid};
use crate::model::{ModelConfig, ModelWeights};
use crate::nn::Tensor;
use crate::synth::make_sparse;
use crate::train::{AdamMoments, AdamState, Checkpoint, TrainConfig};

pub const CONTAINER_MAGIC: &[u8; 4] = b"HRG1";
pub const CONTAINER_VERSION: u16 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HRC1";
pub const CHECKPOINT_VERSION: u16 = 1;

const KIND_EXPLICIT: u8 = 0;
const KIND_EQUIANGULAR: u8 = 1;

fn format_err(offset: usize, message: impl Into<String>) -> HrtfError {
    HrtfError::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Bounds-checked little-endian reader that reports byte offsets.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(format_err(
                self.buf.len(),
                format!(
                    "truncated while reading {what}: expected {} bytes, found {}",
                    self.pos.saturating_add(n),
                    self.buf.len()
                ),
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8).ok_or_else(|| format_err(self.pos, "size overflow"))?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != want {
            return Err(format_err(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(want)
                ),
            ));
        }
        Ok(())
    }

    fn version(&mut self, want: u16) -> Result<()> {
        let at = self.pos;
        let v = self.u16("version")?;
        if v != want {
            return Err(format_err(at, format!("unsupported version {v}, expected {want}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(format_err(
                self.pos,
                format!("trailing data: expected {} bytes, found {}", self.pos, self.buf.len()),
            ));
        }
        Ok(())
    }
}

/// Writes `bytes` atomically. Without `force` an existing file is kept and
/// an error returned.
pub fn write_atomic(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !force && path.exists() {
        return Err(HrtfError::Io(std::io::Error::new(
            std::io::ErrorKind::AlreadyExists,
            format!("{} exists (use --force to overwrite)", path.display()),
        )));
    }
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    if force {
        tmp.persist(path).map_err(|e| HrtfError::Io(e.error))?;
    } else {
        tmp.persist_noclobber(path).map_err(|e| HrtfError::Io(e.error))?;
    }
    Ok(())
}

/// Encodes a set in the `HRG1` layout. Magnitudes are stored as `f32`.
pub fn encode_container(set: &HrtfSet) -> Result<Vec<u8>> {
    let fs_hz = set.sample_rate_hz();
    if fs_hz.fract() != 0.0 || !(1.0..=u32::MAX as f64).contains(&fs_hz) {
        return Err(crate::error::invalid(format!(
            "sample rate {fs_hz} is not a positive integer"
        )));
    }
    let n = set.n_directions();
    let w = set.n_bins();
    let mut out = Vec::with_capacity(28 + n * 16 + n * 2 * w * 4);
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(fs_hz as u32).to_le_bytes());
    out.extend_from_slice(
        &u32::try_from(n)
            .map_err(|_| crate::error::invalid("too many directions"))?
            .to_le_bytes(),
    );
    out.extend_from_slice(
        &u32::try_from(w)
            .map_err(|_| crate::error::invalid("too many bins"))?
            .to_le_bytes(),
    );
    match set.grid().kind() {
        GridKind::Equiangular { n_az, n_el } => {
            let fit = |v: usize| u16::try_from(v).map_err(|_| crate::error::invalid("grid too large"));
            out.push(KIND_EQUIANGULAR);
            out.extend_from_slice(&fit(n_az)?.to_le_bytes());
            out.extend_from_slice(&fit(n_el)?.to_le_bytes());
        }
        GridKind::Explicit => out.push(KIND_EXPLICIT),
    }
    for d in set.grid().directions() {
        out.extend_from_slice(&d.azimuth_deg().to_le_bytes());
        out.extend_from_slice(&d.elevation_deg().to_le_bytes());
    }
    for &m in set.magnitudes() {
        out.extend_from_slice(&(m as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<HrtfSet> {
    let mut r = Reader::new(bytes);
    r.magic(CONTAINER_MAGIC)?;
    r.version(CONTAINER_VERSION)?;
    let _flags = r.u16("flags")?;
    let fs_hz = r.u32("sample rate")?;
    let n = r.u32("direction count")? as usize;
    let w = r.u32("bin count")? as usize;
    let kind_at = r.pos;
    let kind = r.u8("grid kind")?;
    let equi = match kind {
        KIND_EXPLICIT => None,
        KIND_EQUIANGULAR => Some((r.u16("n_az")? as usize, r.u16("n_el")? as usize)),
        k => return Err(format_err(kind_at, format!("unknown grid kind {k}"))),
    };
    let body = n
        .checked_mul(16)
        .and_then(|d| {
            n.checked_mul(2 * w)
                .and_then(|m| m.checked_mul(4))
                .and_then(|m| m.checked_add(d))
        })
        .ok_or_else(|| format_err(r.pos, "declared counts overflow"))?;
    let expected = r.pos + body;
    if bytes.len() != expected {
        return Err(format_err(
            bytes.len().min(expected),
            format!("body length mismatch: expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let dirs_at = r.pos;
    let raw = r.f64s(2 * n, "directions")?;
    let mut dirs = Vec::with_capacity(n);
    for (i, p) in raw.chunks_exact(2).enumerate() {
        dirs.push(Direction::new(p[0], p[1]).map_err(|e| format_err(dirs_at + 16 * i, e.to_string()))?);
    }
    let grid = match equi {
        Some((n_az, n_el)) => {
            let g = SphericalGrid::equiangular(n_az, n_el).map_err(|e| format_err(kind_at, e.to_string()))?;
            let same = g.len() == n
                && g.directions()
                    .iter()
                    .zip(&dirs)
                    .all(|(a, b)| a.azimuth_deg() == b.azimuth_deg() && a.elevation_deg() == b.elevation_deg());
            if !same {
                return Err(format_err(
                    dirs_at,
                    "directions do not match the declared equiangular grid",
                ));
            }
            g
        }
        None => SphericalGrid::explicit(dirs).map_err(|e| format_err(dirs_at, e.to_string()))?,
    };
    let mags_at = r.pos;
    let m = r.take(n * 2 * w * 4, "magnitudes")?;
    let mags: Vec<f64> = m
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    r.finish()?;
    HrtfSet::new(grid, fs_hz as f64, w, mags).map_err(|e| format_err(mags_at, e.to_string()))
}

pub fn read_container(path: &Path) -> Result<HrtfSet> {
    decode_container(&fs::read(path)?)
}

pub fn write_container(set: &HrtfSet, path: &Path, force: bool) -> Result<()> {
    write_atomic(path, &encode_container(set)?, force)
}

/// `key = value` lines for every model field.
pub fn model_config_to_text(c: &ModelConfig) -> String {
    format!(
        "l_in = {}\nl_out = {}\nn_bins = {}\nd_model = {}\nn_heads = {}\nn_kv_groups = {}\n\
         encoder_stages = {}\ndecoder_stages = {}\nfit_lambda = {:?}\n",
        c.l_in,
        c.l_out,
        c.n_bins,
        c.d_model,
        c.n_heads,
        c.n_kv_groups,
        c.encoder_stages,
        c.decoder_stages,
        c.fit_lambda
    )
}

/// Keys set by a config file, for callers that derive unset fields.
pub type SetKeys = BTreeSet<String>;

fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| HrtfError::InvalidConfig {
            field: format!("line {}", i + 1),
            reason: format!("expected `key = value`, got `{line}`"),
        })?;
        let k = k.trim().to_string();
        if !seen.insert(k.clone()) {
            return Err(HrtfError::InvalidConfig {
                field: k,
                reason: "set more than once".into(),
            });
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| HrtfError::InvalidConfig {
        field: key.into(),
        reason: format!("cannot parse `{v}`: {e}"),
    })
}

/// Applies `key = value` overrides to both configs. Unknown keys are
/// rejected. Returns the keys that were set.
pub fn apply_config(text: &str, model: &mut ModelConfig, train: &mut TrainConfig) -> Result<SetKeys> {
    let mut set = SetKeys::new();
    for (k, v) in parse_lines(text)? {
        let v = v.as_str();
        match k.as_str() {
            "l_in" => model.l_in = parse_value(&k, v)?,
            "l_out" => model.l_out = parse_value(&k, v)?,
            "n_bins" => model.n_bins = parse_value(&k, v)?,
            "d_model" => model.d_model = parse_value(&k, v)?,
            "n_heads" => model.n_heads = parse_value(&k, v)?,
            "n_kv_groups" => model.n_kv_groups = parse_value(&k, v)?,
            "encoder_stages" => model.encoder_stages = parse_value(&k, v)?,
            "decoder_stages" => model.decoder_stages = parse_value(&k, v)?,
            "fit_lambda" => model.fit_lambda = parse_value(&k, v)?,
            "batch_size" => train.batch_size = parse_value(&k, v)?,
            "lr" => train.lr = parse_value(&k, v)?,
            "epochs" => train.epochs = parse_value(&k, v)?,
            "adam_beta1" => train.adam_beta1 = parse_value(&k, v)?,
            "adam_beta2" => train.adam_beta2 = parse_value(&k, v)?,
            "adam_eps" => train.adam_eps = parse_value(&k, v)?,
            "seed" => train.seed = parse_value(&k, v)?,
            "w_lsd" => train.loss_weights.lsd = parse_value(&k, v)?,
            "w_ild" => train.loss_weights.ild = parse_value(&k, v)?,
            "w_ndl" => train.loss_weights.ndl = parse_value(&k, v)?,
            "w_mse" => train.loss_weights.mse = parse_value(&k, v)?,
            "checkpoint_every" => train.checkpoint_every = parse_value(&k, v)?,
            "val_fraction" => train.val_fraction = parse_value(&k, v)?,
            _ => {
                return Err(HrtfError::InvalidConfig {
                    field: k,
                    reason: "unknown key".into(),
                })
            }
        }
        set.insert(k);
    }
    Ok(set)
}

/// Parses a model config written by [`model_config_to_text`].
pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    let mut m = ModelConfig::desk();
    let mut t = TrainConfig::default();
    let keys = apply_config(text, &mut m, &mut t)?;
    for required in [
        "l_in",
        "l_out",
        "n_bins",
        "d_model",
        "n_heads",
        "n_kv_groups",
        "encoder_stages",
        "decoder_stages",
        "fit_lambda",
    ] {
        if !keys.contains(required) {
            return Err(HrtfError::InvalidConfig {
                field: required.into(),
                reason: "missing".into(),
            });
        }
    }
    if keys.len() != 9 {
        return Err(HrtfError::InvalidConfig {
            field: "model config".into(),
            reason: "contains training keys".into(),
        });
    }
    m.validate()?;
    Ok(m)
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| crate::error::invalid("value exceeds u32"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn push_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// `HRC1` layout: magic, version u16, config text (u32 length + UTF-8),
/// step u64, tensor count u32, then per tensor: name (u32 length + UTF-8),
/// rank u8, dims u32 each, data f64, Adam m f64, Adam v f64.
pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = model_config_to_text(ck.config());
    push_u32(&mut out, cfg.len())?;
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&ck.optimizer.step.to_le_bytes());
    let tensors = ck.weights.tensors();
    push_u32(&mut out, tensors.len())?;
    for (name, t) in tensors {
        push_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.shape().len()).map_err(|_| crate::error::invalid("rank exceeds 255"))?;
        out.push(rank);
        for &d in t.shape() {
            push_u32(&mut out, d)?;
        }
        push_f64s(&mut out, t.data());
        let st = ck
            .optimizer
            .moments
            .get(name)
            .ok_or_else(|| crate::error::invalid(format!("no optimizer state for `{name}`")))?;
        push_f64s(&mut out, &st.m);
        push_f64s(&mut out, &st.v);
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let cfg_len = r.u32("config length")? as usize;
    let cfg_at = r.pos;
    let cfg_text = std::str::from_utf8(r.take(cfg_len, "config")?)
        .map_err(|e| format_err(cfg_at, format!("config is not UTF-8: {e}")))?;
    let cfg = parse_model_config(cfg_text).map_err(|e| format_err(cfg_at, e.to_string()))?;
    let step = r.u64("step")?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    let mut moments = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|e| format_err(name_at, format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format_err(r.pos, "tensor size overflow"))?;
        let data = r.f64s(n, "tensor data")?;
        let m = r.f64s(n, "adam first moment")?;
        let v = r.f64s(n, "adam second moment")?;
        tensors.insert(name.clone(), Tensor::new(shape, data)?);
        moments.insert(name, AdamMoments { m, v });
    }
    r.finish()?;
    let weights = ModelWeights::from_tensors(&cfg, tensors).map_err(|e| format_err(cfg_at, e.to_string()))?;
    Ok(Checkpoint {
        weights,
        optimizer: AdamState { step, moments },
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

pub fn write_checkpoint(ck: &Checkpoint, path: &Path, force: bool) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?, force)
}

/// Per-direction, per-ear, per-bin dB table for plotting:
/// `direction,azimuth_deg,elevation_deg,ear,bin,frequency_hz,magnitude_db`.
pub fn export_csv(set: &HrtfSet) -> String {
    use std::fmt::Write as _;
    let mut s = String::from("direction,azimuth_deg,elevation_deg,ear,bin,frequency_hz,magnitude_db\n");
    for (d, dir) in set.grid().directions().iter().enumerate() {
        for ear in crate::grid::Ear::BOTH {
            let name = match ear {
                crate::grid::Ear::Left => "left",
                crate::grid::Ear::Right => "right",
            };
            for (b, &m) in set.spectrum(d, ear).iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{d},{},{},{name},{},{},{}",
                    dir.azimuth_deg(),
                    dir.elevation_deg(),
                    b + 1,
                    set.bin_frequency_hz(b),
                    crate::grid::linear_to_db(m)
                );
            }
        }
    }
    s
}

/// Suffix of a sparse file for `level`, e.g. `.l3.hrg`.
pub fn sparse_suffix(level: SparsityLevel) -> String {
    format!(".l{}.{CONTAINER_EXT}", level.count())
}

pub const CONTAINER_EXT: &str = "hrg";

/// Loads a dataset directory. Dense references are `NAME.hrg`; sparse inputs
/// are `NAME.l{level}.hrg` when present and otherwise derived by
/// farthest-point selection from the reference. A sparse file without its
/// reference yields a subject with no ground truth. Subjects are sorted by
/// name.
pub fn load_dataset(dir: &Path, level: SparsityLevel) -> Result<Vec<EvalSubject>> {
    let suffix = sparse_suffix(level);
    let mut dense = BTreeMap::new();
    let mut sparse = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(file) = path.file_name().and_then(|f| f.to_str()) else {
            continue;
        };
        if let Some(stem) = file.strip_suffix(&suffix) {
            sparse.insert(stem.to_string(), path.clone());
        } else if let Some(stem) = file.strip_suffix(&format!(".{CONTAINER_EXT}")) {
            if !is_sparse_stem(stem) {
                dense.insert(stem.to_string(), path.clone());
            }
        }
    }
    let names: BTreeSet<String> = dense.keys().chain(sparse.keys()).cloned().collect();
    if names.is_empty() {
        return Err(HrtfError::InvalidDataset(format!(
            "no .{CONTAINER_EXT} files in {}",
            dir.display()
        )));
    }
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let truth = dense.get(&name).map(|p| read_container(p)).transpose()?;
        let sp = match (sparse.get(&name), &truth) {
            (Some(p), _) => SparseMeasurement::new(read_container(p)?, level)?,
            (None, Some(t)) => make_sparse(t, level, 0)?,
            (None, None) => unreachable!("name came from one of the maps"),
        };
        out.push(EvalSubject {
            name,
            sparse: sp,
            truth,
        });
    }
    Ok(out)
}

/// `NAME.l{3,5,19,100}` stems belong to sparse files of other levels.
fn is_sparse_stem(stem: &str) -> bool {
    stem.rsplit_once(".l")
        .is_some_and(|(_, n)| SparsityLevel::ALL.iter().any(|l| l.count().to_string() == n))
}
