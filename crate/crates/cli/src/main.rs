use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use hrtfformer::eval::{self, EvalSubject, Method};
use hrtfformer::grid::{SparseMeasurement, SparsityLevel, SphericalGrid};
use hrtfformer::io;
use hrtfformer::model::{self, ModelConfig};
use hrtfformer::synth::{self, SynthConfig};
use hrtfformer::train::{self, CheckpointReason, TrainConfig, TrainingExample};
use hrtfformer::{baselines, HrtfError, Result, ShFitConfig};

#[derive(Parser)]
#[command(name = "hrtfformer", version, about = "Sparse-to-dense HRTF upsampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic subjects as containers in a directory.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        subjects: usize,
        /// Equiangular grid as NAZxNEL.
        #[arg(long, default_value = "16x8", value_parser = parse_grid_spec)]
        grid: (usize, usize),
        #[arg(long, default_value_t = 7)]
        band_limit: usize,
        #[arg(long, default_value_t = 16)]
        bins: usize,
        #[arg(long, default_value_t = 0.8)]
        population_share: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Farthest-point sparse subset of a container.
    Sparse {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_parser = parse_level)]
        level: SparsityLevel,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_level)]
        level: SparsityLevel,
        /// key = value overrides of model and training fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV; defaults to the checkpoint path with `.csv`.
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Upsample a sparse container with a trained model.
    Upsample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_parser = parse_grid_spec)]
        grid: (usize, usize),
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Upsample with an algorithmic baseline.
    Baseline {
        #[arg(long, value_enum)]
        method: BaselineKind,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_parser = parse_grid_spec)]
        grid: (usize, usize),
        /// SH order; defaults to the level's default.
        #[arg(long)]
        order: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Compute LSD, ILD and ITD over a dataset.
    Evaluate {
        #[arg(long, value_enum)]
        method: EvalKind,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        order: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_level)]
        level: SparsityLevel,
        /// Output report; `.json` selects JSON, anything else CSV.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Per-direction, per-bin dB table of a container.
    ExportCsv {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Barycentric,
    Sh,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalKind {
    Model,
    Barycentric,
    Sh,
    Identity,
}

fn parse_grid_spec(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, e) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected NAZxNEL, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(a)?, p(e)?))
}

fn parse_level(s: &str) -> std::result::Result<SparsityLevel, String> {
    let n: usize = s.parse().map_err(|e| format!("`{s}`: {e}"))?;
    SparsityLevel::from_count(n).map_err(|e| e.to_string())
}

fn grid((n_az, n_el): (usize, usize)) -> Result<SphericalGrid> {
    SphericalGrid::equiangular(n_az, n_el)
}

fn sparse_from(path: &Path) -> Result<SparseMeasurement> {
    let set = io::read_container(path)?;
    let level = SparsityLevel::from_count(set.n_directions())?;
    SparseMeasurement::new(set, level)
}

fn fit_config(level: SparsityLevel, order: Option<usize>, lambda: Option<f64>) -> Result<ShFitConfig> {
    let (o, l) = level.default_fit();
    ShFitConfig::new(order.unwrap_or(o), lambda.unwrap_or(l))
}

fn write_text(path: &Path, text: &str, force: bool) -> Result<()> {
    io::write_atomic(path, text.as_bytes(), force)
}

fn training_pairs(subjects: &[EvalSubject], cfg: &ModelConfig) -> Result<Vec<TrainingExample>> {
    subjects
        .iter()
        .map(|s| {
            let truth = s
                .truth
                .as_ref()
                .ok_or_else(|| HrtfError::InvalidDataset(format!("subject `{}` has no ground truth", s.name)))?;
            TrainingExample::new(&s.sparse, truth, cfg)
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            seed,
            subjects,
            grid: (n_az, n_el),
            band_limit,
            bins,
            population_share,
            out,
            force,
        } => {
            let base = SynthConfig {
                seed,
                band_limit,
                n_bins: bins,
                n_az,
                n_el,
                population_share,
                ..SynthConfig::default()
            };
            base.validate()?;
            fs::create_dir_all(&out)?;
            for i in 0..subjects {
                let set = synth::generate_subject(&base.for_subject(i as u64))?;
                io::write_container(&set, &out.join(format!("subject_{i:03}.hrg")), force)?;
            }
        }
        Command::Sparse {
            input,
            level,
            out,
            force,
        } => {
            let full = io::read_container(&input)?;
            let sp = synth::make_sparse(&full, level, 0)?;
            io::write_container(sp.set(), &out, force)?;
        }
        Command::Train {
            data,
            level,
            config,
            out,
            curve,
            force,
        } => {
            let subjects = io::load_dataset(&data, level)?;
            let n_bins = subjects[0].sparse.set().n_bins();
            let (l_in, fit_lambda) = level.default_fit();
            let mut mcfg = ModelConfig {
                l_in,
                fit_lambda,
                n_bins,
                ..ModelConfig::desk()
            };
            let mut tcfg = TrainConfig::default();
            let keys = match &config {
                Some(p) => io::apply_config(&fs::read_to_string(p)?, &mut mcfg, &mut tcfg)?,
                None => Default::default(),
            };
            if !keys.contains("decoder_stages") {
                mcfg.decoder_stages = mcfg.min_decoder_stages();
            }
            mcfg.validate()?;
            tcfg.validate()?;
            let (tr_idx, val_idx) = train::split_subjects(subjects.len(), tcfg.seed, tcfg.val_fraction);
            let pick = |idx: &[usize]| idx.iter().map(|&i| subjects[i].clone()).collect::<Vec<_>>();
            let tr = training_pairs(&pick(&tr_idx), &mcfg)?;
            let val = training_pairs(&pick(&val_idx), &mcfg)?;
            if !force && out.exists() {
                return Err(HrtfError::Io(std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    format!("{} exists (use --force to overwrite)", out.display()),
                )));
            }
            let mut on_ck = |ck: &train::Checkpoint, why: CheckpointReason| match why {
                CheckpointReason::Periodic { epoch } => {
                    let p = PathBuf::from(format!("{}.epoch{epoch}", out.display()));
                    io::write_checkpoint(ck, &p, true)
                }
                CheckpointReason::BestValidation { .. } => Ok(()),
            };
            let outcome = train::train(&mcfg, &tr, &val, &tcfg, &mut on_ck)?;
            let chosen = outcome.best.as_ref().map(|b| &b.2).unwrap_or(&outcome.last);
            io::write_checkpoint(chosen, &out, true)?;
            let curve_path = curve.unwrap_or_else(|| out.with_extension("csv"));
            write_text(&curve_path, &train::loss_curve_csv(&outcome.curve), true)?;
        }
        Command::Upsample {
            ckpt,
            input,
            grid: spec,
            out,
            force,
        } => {
            let ck = io::read_checkpoint(&ckpt)?;
            let sp = sparse_from(&input)?;
            let dense = model::upsample(&ck.weights, &sp, &grid(spec)?)?;
            io::write_container(&dense, &out, force)?;
        }
        Command::Baseline {
            method,
            input,
            grid: spec,
            order,
            lambda,
            out,
            force,
        } => {
            let sp = sparse_from(&input)?;
            let target = grid(spec)?;
            let dense = match method {
                BaselineKind::Barycentric => baselines::barycentric_upsample(&sp, &target)?,
                BaselineKind::Sh => {
                    baselines::sh_baseline_upsample(&sp, &target, &fit_config(sp.level(), order, lambda)?)?
                }
            };
            io::write_container(&dense, &out, force)?;
        }
        Command::Evaluate {
            method,
            ckpt,
            order,
            lambda,
            data,
            level,
            report,
            force,
        } => {
            let m = match method {
                EvalKind::Model => {
                    let p =
                        ckpt.ok_or_else(|| HrtfError::InvalidArgument("--ckpt is required for --method model".into()))?;
                    Method::Model(Box::new(io::read_checkpoint(&p)?.weights))
                }
                EvalKind::Barycentric => Method::Barycentric,
                EvalKind::Sh => Method::ShBaseline(fit_config(level, order, lambda)?),
                EvalKind::Identity => Method::Identity,
            };
            let subjects = io::load_dataset(&data, level)?;
            let r = eval::evaluate_method(&m, &subjects, level)?;
            let text = if report.extension().is_some_and(|e| e == "json") {
                r.to_json()?
            } else {
                r.to_csv()
            };
            write_text(&report, &text, force)?;
        }
        Command::ExportCsv { input, out, force } => {
            let set = io::read_container(&input)?;
            write_text(&out, &io::export_csv(&set), force)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
