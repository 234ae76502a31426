//! The `filmworld` command line.
//!
//! | exit | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | I/O or other runtime failure |
//! | 2 | invalid configuration, arguments, or mismatched checkpoint |
//! | 3 | infeasible generation |
//! | 4 | verification or gradient-check failures |
//! | 5 | non-finite loss during training |

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dataset::{build_dataset, verify_loaded, Dataset, DatasetFamily, MixSpec, Source, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::models::{Architecture, BaselineConfig, FilmConfig, Model, ModelConfig};
use crate::tensor::{gradcheck, AdamConfig, Checkpoint};
use crate::trainer::{self, EvalRow, TrainData, TrainOutput, TrainSchedule};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_VIOLATIONS: i32 = 4;
pub const EXIT_NON_FINITE: i32 = 5;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigInvalid(_) | Error::ArchitectureMismatch(_) | Error::Json(_) | Error::CorruptCheckpoint(_) => {
                EXIT_CONFIG
            }
            Error::SceneInfeasible { .. } | Error::SceneUnusable { .. } | Error::FamilyGeneration { .. } => {
                EXIT_INFEASIBLE
            }
            Error::CorruptRecord { .. } => EXIT_VIOLATIONS,
            Error::NonFiniteLoss { .. } | Error::NonFiniteActivation(_) => EXIT_NON_FINITE,
            Error::Io { .. } | Error::Csv(_) | Error::ShapeMismatch { .. } => EXIT_RUNTIME,
        }
    }
}

/// Every knob of a run in one JSON document. Unknown keys are rejected;
/// command-line flags override the corresponding fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub split: SplitSpec,
    pub mix: Option<MixSpec>,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub adam: AdamConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))
    }
}

/// `train --mix` file: datasets on disk with weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMix {
    pub components: Vec<TrainMixEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMixEntry {
    pub data: PathBuf,
    pub weight: f64,
}

#[derive(Parser, Debug)]
#[command(name = "filmworld", version, about = "Caption-agreement datasets and FiLM training")]
pub struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Root for relative dataset paths.
    #[arg(long, global = true, env = "FILMWORLD_DATA")]
    pub data_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a dataset and verify it.
    Generate(GenerateArgs),
    /// Train a model on a dataset or a mix of datasets.
    Train(TrainArgs),
    /// Report split accuracies of a checkpoint.
    Eval(EvalArgs),
    /// Re-run dataset verification.
    Verify(VerifyArgs),
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Merge run curves into one SVG.
    Curves(CurvesArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, conflicts_with = "mix", required_unless_present = "mix")]
    pub family: Option<String>,
    /// JSON file: {"components": [["existential", 0.45], ...]}
    #[arg(long)]
    pub mix: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_overlap: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, conflicts_with = "mix", required_unless_present = "mix")]
    pub data: Option<PathBuf>,
    /// JSON file: {"components": [{"data": "dir", "weight": 0.45}, ...]}
    #[arg(long)]
    pub mix: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    /// Narrow layer widths that train in minutes on one core.
    #[arg(long)]
    pub compact: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eval_interval: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Start from these weights with a fresh optimizer.
    #[arg(long)]
    pub from_checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// train, val, test; all three when omitted.
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = gradcheck::DEFAULT_SEEDS)]
    pub seeds: u64,
    /// Restrict to these ops.
    #[arg(long)]
    pub op: Vec<String>,
}

#[derive(Args, Debug)]
pub struct CurvesArgs {
    /// Run directories (or curves.csv files).
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, default_value = "curves.svg")]
    pub out: PathBuf,
}

struct Ctx {
    json: bool,
    data_root: Option<PathBuf>,
}

impl Ctx {
    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.data_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn emit(&self, human: impl FnOnce() -> String, json: impl FnOnce() -> serde_json::Value) {
        if self.json {
            println!("{}", json());
        } else {
            println!("{}", human());
        }
    }
}

/// Parses `args` (including the program name) and runs the command;
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let ctx = Ctx {
        json: cli.json,
        data_root: cli.data_root,
    };
    let result = match cli.command {
        Command::Generate(a) => generate(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Verify(a) => verify(&ctx, a),
        Command::Gradcheck(a) => run_gradcheck(&ctx, a),
        Command::Curves(a) => curves(&ctx, a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            if ctx.json {
                println!("{}", serde_json::json!({ "error": e.to_string(), "exit_code": e.exit_code() }));
            }
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))
}

fn generate(ctx: &Ctx, a: GenerateArgs) -> Result<i32> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let s = &mut cfg.split;
    s.train = a.train.unwrap_or(s.train);
    s.val = a.val.unwrap_or(s.val);
    s.test = a.test.unwrap_or(s.test);
    s.seed = a.seed.unwrap_or(s.seed);
    s.max_overlap = a.max_overlap.unwrap_or(s.max_overlap);
    let source = match (&a.family, &a.mix) {
        (Some(f), _) => Source::Family(f.parse::<DatasetFamily>()?),
        (None, Some(m)) => {
            let mix: MixSpec = read_json(m)?;
            Source::Mix(MixSpec::new(mix.components)?)
        }
        (None, None) => match cfg.mix.clone() {
            Some(m) => Source::Mix(MixSpec::new(m.components)?),
            None => return Err(Error::ConfigInvalid("need --family or --mix".into())),
        },
    };
    let out = ctx.resolve(&a.out);
    build_dataset(&source, &cfg.split, &out)?;
    let ds = Dataset::open(&out)?;
    let report = verify_loaded(&ds);
    ctx.emit(|| report.to_string(), || serde_json::to_value(&report).expect("report serializes"));
    Ok(if report.is_clean() { EXIT_OK } else { EXIT_VIOLATIONS })
}

fn open_verified(path: &Path) -> Result<std::result::Result<Dataset, crate::dataset::VerifyReport>> {
    let ds = Dataset::open(path)?;
    let report = verify_loaded(&ds);
    Ok(if report.is_clean() { Ok(ds) } else { Err(report) })
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<i32> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let sch = &mut cfg.schedule;
    sch.iterations = a.iterations.unwrap_or(sch.iterations);
    sch.batch_size = a.batch_size.unwrap_or(sch.batch_size);
    sch.seed = a.seed.unwrap_or(sch.seed);
    if a.eval_interval.is_some() {
        sch.eval_interval = a.eval_interval;
    }
    if let Some(name) = &a.model {
        let arch: Architecture = name.parse()?;
        if arch != cfg.model.architecture() || a.config.is_none() {
            cfg.model = arch.default_config();
        }
    }
    if a.compact {
        cfg.model = match cfg.model.architecture() {
            Architecture::Film => ModelConfig::Film(FilmConfig::compact()),
            Architecture::CnnLstm => ModelConfig::CnnLstm(BaselineConfig::compact()),
            Architecture::CnnLstmSa => ModelConfig::CnnLstmSa(BaselineConfig::compact()),
        };
    }
    let paths: Vec<(PathBuf, f64)> = match (&a.data, &a.mix) {
        (Some(d), _) => vec![(ctx.resolve(d), 1.0)],
        (None, Some(m)) => {
            let mix: TrainMix = read_json(m)?;
            mix.components.into_iter().map(|e| (ctx.resolve(&e.data), e.weight)).collect()
        }
        (None, None) => return Err(Error::ConfigInvalid("need --data or --mix".into())),
    };
    let mut datasets = Vec::new();
    for (p, _) in &paths {
        match open_verified(p)? {
            Ok(ds) => datasets.push(ds),
            Err(report) => {
                ctx.emit(|| report.to_string(), || serde_json::to_value(&report).expect("report serializes"));
                return Ok(EXIT_VIOLATIONS);
            }
        }
    }
    let data = TrainData::mix(datasets.iter().zip(&paths).map(|(d, (_, w))| (d, *w)).collect());
    let vocab = datasets[0].manifest.vocabulary.len();
    let size = datasets[0].image_size().0;
    if datasets.iter().any(|d| d.manifest.vocabulary != datasets[0].manifest.vocabulary) {
        return Err(Error::ConfigInvalid("mixed datasets use different vocabularies".into()));
    }
    let mut model = match &a.from_checkpoint {
        Some(p) => {
            let (model, _) = Model::from_checkpoint(&Checkpoint::load(p)?)?;
            if a.model.is_some() && model.architecture() != cfg.model.architecture() {
                return Err(Error::ArchitectureMismatch(format!(
                    "checkpoint holds {}, --model asks for {}",
                    model.architecture(),
                    cfg.model.architecture()
                )));
            }
            if model.meta().vocab_size != vocab {
                return Err(Error::ArchitectureMismatch(format!(
                    "checkpoint vocabulary has {} entries, dataset {}",
                    model.meta().vocab_size,
                    vocab
                )));
            }
            cfg.model = model.config().clone();
            model
        }
        None => Model::build(cfg.model.clone(), vocab, size, cfg.schedule.seed)?,
    };
    // Run directories are not data, so the data root does not apply.
    let out_dir = a.out.clone();
    let snapshot = serde_json::json!({
        "run": cfg,
        "data": paths.iter().map(|(p, w)| serde_json::json!({ "data": p, "weight": w })).collect::<Vec<_>>(),
        "from_checkpoint": a.from_checkpoint,
        "parameter_count": model.parameter_count(),
    });
    let json = ctx.json;
    let mut progress = |row: &EvalRow| {
        if !json {
            println!(
                "iteration {:>7}  val_accuracy {:.4}  train_loss {:.4}  {:.0}s",
                row.iteration, row.val_accuracy, row.train_loss, row.wall_clock
            );
        }
    };
    let out = TrainOutput {
        run_dir: Some(&out_dir),
        config: snapshot,
        on_eval: Some(&mut progress),
    };
    let (record, _) = trainer::train(&mut model, &data, &cfg.schedule, cfg.adam, None, out)?;
    ctx.emit(
        || {
            format!(
                "wrote {} ({} eval points, final val accuracy {:.4})",
                out_dir.display(),
                record.rows.len(),
                record.final_accuracy().unwrap_or(f64::NAN)
            )
        },
        || serde_json::to_value(&record).expect("record serializes"),
    );
    Ok(EXIT_OK)
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<i32> {
    let ds = Dataset::open(ctx.resolve(&a.data))?;
    let (model, _) = Model::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    if model.meta().vocab_size != ds.manifest.vocabulary.len() {
        return Err(Error::ArchitectureMismatch("checkpoint and dataset vocabularies differ".into()));
    }
    let splits = match &a.split {
        Some(s) => vec![s.parse::<Split>()?],
        None => Split::ALL.to_vec(),
    };
    let mut results = Vec::new();
    for split in splits {
        results.push((split, trainer::evaluate(&model, &ds, split)?, ds.split(split).len()));
    }
    ctx.emit(
        || {
            results
                .iter()
                .map(|(s, acc, n)| format!("{s:<5} accuracy {acc:.4} ({n} instances)"))
                .collect::<Vec<_>>()
                .join("\n")
        },
        || {
            serde_json::Value::Object(
                results
                    .iter()
                    .map(|(s, acc, n)| (s.to_string(), serde_json::json!({ "accuracy": acc, "instances": n })))
                    .collect(),
            )
        },
    );
    Ok(EXIT_OK)
}

fn verify(ctx: &Ctx, a: VerifyArgs) -> Result<i32> {
    let ds = Dataset::open(ctx.resolve(&a.data))?;
    let report = verify_loaded(&ds);
    ctx.emit(|| report.to_string(), || serde_json::to_value(&report).expect("report serializes"));
    Ok(if report.is_clean() { EXIT_OK } else { EXIT_VIOLATIONS })
}

fn run_gradcheck(ctx: &Ctx, a: GradcheckArgs) -> Result<i32> {
    let ops: Vec<&'static str> = if a.op.is_empty() {
        gradcheck::OPS.to_vec()
    } else {
        let mut v = Vec::new();
        for name in &a.op {
            let op = gradcheck::OPS
                .iter()
                .find(|o| *o == name)
                .ok_or_else(|| Error::ConfigInvalid(format!("no gradient check named {name}")))?;
            v.push(*op);
        }
        v
    };
    if a.seeds == 0 {
        return Err(Error::ConfigInvalid("--seeds must be positive".into()));
    }
    let reports = ops.iter().map(|op| gradcheck::check_op(op, a.seeds)).collect::<Result<Vec<_>>>()?;
    let ok = reports.iter().all(|r| r.passed());
    ctx.emit(
        || {
            let mut s = format!("{:<24} {:>6} {:>14}  status\n", "op", "cases", "max rel error");
            for r in &reports {
                s += &format!(
                    "{:<24} {:>6} {:>14.3e}  {}\n",
                    r.op,
                    r.cases,
                    r.max_rel_error,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
            s + &format!("tolerance {:.0e}, step {:.0e}: {}", gradcheck::TOLERANCE, gradcheck::STEP, if ok { "all passed" } else { "FAILED" })
        },
        || serde_json::json!({ "tolerance": gradcheck::TOLERANCE, "step": gradcheck::STEP, "passed": ok, "ops": reports }),
    );
    Ok(if ok { EXIT_OK } else { EXIT_VIOLATIONS })
}

fn curves(ctx: &Ctx, a: CurvesArgs) -> Result<i32> {
    let mut series = Vec::new();
    for run in &a.runs {
        let csv = if run.is_dir() { run.join(trainer::CURVES_CSV) } else { run.clone() };
        let label = if run.is_dir() { run.as_path() } else { run.parent().unwrap_or(run) };
        let label = label
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| run.display().to_string());
        series.push((label, trainer::read_curves(&csv)?));
    }
    let svg = trainer::render_svg(&series);
    fs::write(&a.out, svg).map_err(|e| Error::io(&a.out, e))?;
    ctx.emit(
        || format!("wrote {} with {} series", a.out.display(), series.len()),
        || serde_json::json!({ "out": a.out, "series": series.iter().map(|(l, _)| l).collect::<Vec<_>>() }),
    );
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"schedule": {"iterations": 5}}"#).is_ok());
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"schedule": {"iters": 5}}"#).is_err());
    }

    #[test]
    fn bad_family_is_config_error() {
        assert_eq!(run(["filmworld", "generate", "--family", "nosuch", "--out", "/nonexistent/x"]), EXIT_CONFIG);
        assert_eq!(run(["filmworld", "frobnicate"]), EXIT_CONFIG);
    }
}
