//! Iteration-based training, evaluation, dataset mixing and curricula.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{derive_seed, Batch, BatchIter, Dataset, Split};
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::tensor::{adam_step, AdamConfig, AdamState, Checkpoint, Tensor};

pub const CURVES_CSV: &str = "curves.csv";
pub const CURVES_SVG: &str = "curves.svg";
pub const CONFIG_JSON: &str = "config.json";
pub const LOG_TXT: &str = "log.txt";
/// One training loss per line, in iteration order.
pub const LOSS_TRACE_TXT: &str = "loss_trace.txt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

const EVAL_BATCH: usize = 64;
const MIX_STREAM: u64 = 0x4d49_5800;
const COMPONENT_STREAM: u64 = 0x5354_5200;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub iterations: u64,
    pub batch_size: usize,
    /// `None`: every 1k up to 10k, then every 5k. `Some(n)`: every `n`.
    pub eval_interval: Option<u64>,
    /// Validate on the first `n` val instances instead of the full split.
    pub eval_sample_size: Option<usize>,
    /// Recorded for provenance; all reductions already run in a fixed order.
    pub deterministic: bool,
    pub seed: u64,
    pub checkpoint_at_eval: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            iterations: 100_000,
            batch_size: 64,
            eval_interval: None,
            eval_sample_size: None,
            deterministic: true,
            seed: 0,
            checkpoint_at_eval: false,
        }
    }
}

/// `{0} ∪ {1000k : k = 1..10} ∪ {5000k : k ≥ 3}`, up to `iterations`.
pub fn standard_eval_points(iterations: u64) -> Vec<u64> {
    let early = (0..=10).map(|k| 1000 * k);
    let late = (3..).map(|k| 5000 * k).take_while(|&p| p <= iterations.max(15_000));
    early.chain(late).filter(|&p| p <= iterations).collect()
}

impl TrainSchedule {
    pub fn eval_points(&self) -> Vec<u64> {
        match self.eval_interval {
            None => standard_eval_points(self.iterations),
            Some(n) => (0..=self.iterations).step_by(n.max(1) as usize).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::ConfigInvalid("batch_size must be positive".into()));
        }
        if self.eval_interval == Some(0) || self.eval_sample_size == Some(0) {
            return Err(Error::ConfigInvalid("eval_interval and eval_sample_size must be positive".into()));
        }
        Ok(())
    }
}

/// One dataset contributing training instances.
#[derive(Clone)]
pub struct TrainComponent<'a> {
    pub dataset: &'a Dataset,
    pub weight: f64,
    /// Restrict training to these global indices (default: the train split).
    pub pool: Option<Vec<usize>>,
}

/// Training data: one dataset or a weighted mix sampled i.i.d. per instance.
#[derive(Clone)]
pub struct TrainData<'a> {
    pub components: Vec<TrainComponent<'a>>,
}

impl<'a> TrainData<'a> {
    pub fn single(dataset: &'a Dataset) -> Self {
        TrainData {
            components: vec![TrainComponent {
                dataset,
                weight: 1.0,
                pool: None,
            }],
        }
    }

    pub fn mix(parts: Vec<(&'a Dataset, f64)>) -> Self {
        TrainData {
            components: parts
                .into_iter()
                .map(|(dataset, weight)| TrainComponent {
                    dataset,
                    weight,
                    pool: None,
                })
                .collect(),
        }
    }

    fn validate(&self, model: &Model) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::ConfigInvalid("no training data".into()));
        }
        if self.components.iter().any(|c| !(c.weight.is_finite() && c.weight > 0.0)) {
            return Err(Error::ConfigInvalid("mixing weights must be positive".into()));
        }
        for c in &self.components {
            let ds = c.dataset;
            if ds.manifest.vocabulary.len() != model.meta().vocab_size {
                return Err(Error::ConfigInvalid(format!(
                    "dataset {} has {} vocabulary entries, model expects {}",
                    ds.root.display(),
                    ds.manifest.vocabulary.len(),
                    model.meta().vocab_size
                )));
            }
            let (h, w) = ds.image_size();
            if h != model.meta().image_size || w != h {
                return Err(Error::ConfigInvalid(format!(
                    "dataset images are {h}×{w}, model expects {}",
                    model.meta().image_size
                )));
            }
            let empty = match &c.pool {
                Some(p) => p.is_empty(),
                None => ds.split(Split::Train).is_empty(),
            };
            if empty {
                return Err(Error::ConfigInvalid(format!("{} has no training instances", ds.root.display())));
            }
        }
        Ok(())
    }
}

/// Per-instance component draws for a mix, as the trainer makes them.
pub struct Mixer {
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl Mixer {
    pub fn new(weights: &[f64], seed: u64) -> Result<Self> {
        let dist = WeightedIndex::new(weights)
            .map_err(|e| Error::ConfigInvalid(format!("mixing weights {weights:?}: {e}")))?;
        Ok(Mixer {
            dist,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, MIX_STREAM, 0)),
        })
    }

    pub fn draw(&mut self) -> usize {
        self.dist.sample(&mut self.rng)
    }
}

/// Owns the optimizer and batch streams of one run.
pub struct Trainer<'m, 'd> {
    model: &'m mut Model,
    data: &'d TrainData<'d>,
    streams: Vec<BatchIter<'d>>,
    mixer: Mixer,
    optimizer: AdamState<f32>,
    batch_size: usize,
    iteration: u64,
    loss_trace: Vec<f32>,
}

impl<'m, 'd> Trainer<'m, 'd> {
    /// `optimizer = None` starts fresh moments.
    pub fn new(
        model: &'m mut Model,
        data: &'d TrainData<'d>,
        batch_size: usize,
        seed: u64,
        adam: AdamConfig,
        optimizer: Option<AdamState<f32>>,
    ) -> Result<Self> {
        data.validate(model)?;
        adam.validate()?;
        if batch_size == 0 {
            return Err(Error::ConfigInvalid("batch_size must be positive".into()));
        }
        let streams = data
            .components
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let s = derive_seed(seed, COMPONENT_STREAM, i as u64);
                let it = c.dataset.iterate_batches(Split::Train, batch_size, s, None);
                match &c.pool {
                    Some(p) => it.with_pool(p.clone()),
                    None => it,
                }
            })
            .collect();
        let weights: Vec<f64> = data.components.iter().map(|c| c.weight).collect();
        let optimizer = match optimizer {
            Some(st) => {
                let fits = st.m.len() == model.params().len()
                    && st.m.iter().zip(model.params()).all(|(m, (_, p))| m.shape() == p.shape());
                if !fits {
                    return Err(Error::ArchitectureMismatch("optimizer state does not match parameters".into()));
                }
                st
            }
            None => AdamState::new(adam, model.params().iter().map(|(_, t)| t)),
        };
        Ok(Trainer {
            model,
            data,
            streams,
            mixer: Mixer::new(&weights, seed)?,
            optimizer,
            batch_size,
            iteration: 0,
            loss_trace: Vec::new(),
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn loss_trace(&self) -> &[f32] {
        &self.loss_trace
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn optimizer(&self) -> &AdamState<f32> {
        &self.optimizer
    }

    pub fn next_batch(&mut self) -> Batch {
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); self.streams.len()];
        for _ in 0..self.batch_size {
            let c = self.mixer.draw();
            let idx = self.streams[c].next_index().expect("infinite stream over a non-empty pool");
            groups[c].push(idx);
        }
        let parts: Vec<Batch> = groups
            .iter()
            .enumerate()
            .filter(|(_, g)| !g.is_empty())
            .map(|(c, g)| self.data.components[c].dataset.batch(g))
            .collect();
        if parts.len() == 1 {
            parts.into_iter().next().expect("one part")
        } else {
            Batch::concat(&parts)
        }
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn step(&mut self) -> Result<f32> {
        let batch = self.next_batch();
        let iteration = self.iteration + 1;
        let mut pass = self.model.forward_train(&batch).map_err(|e| match e {
            Error::NonFiniteActivation(_) => Error::NonFiniteLoss { iteration },
            e => e,
        })?;
        let loss = pass
            .tape
            .softmax_cross_entropy(pass.logits, &batch.labels)
            .map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { iteration },
                e => e,
            })?;
        let value = pass.tape.value(loss).data()[0];
        let mut grads = pass.tape.backward(loss)?;
        let grads: Vec<Tensor<f32>> = pass
            .params
            .iter()
            .zip(self.model.params())
            .map(|(&v, (_, p))| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
        adam_step(&mut self.model.params_mut(), &grad_refs, &mut self.optimizer)?;
        self.iteration = iteration;
        self.loss_trace.push(value);
        Ok(value)
    }

    pub fn into_parts(self) -> (AdamState<f32>, Vec<f32>) {
        (self.optimizer, self.loss_trace)
    }
}

/// Fraction of `indices` (global) whose argmax prediction matches the label.
pub fn accuracy_on(model: &Model, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    let (correct, total) = correct_count(model, dataset, indices)?;
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

fn correct_count(model: &Model, dataset: &Dataset, indices: &[usize]) -> Result<(usize, usize)> {
    let mut correct = 0;
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = dataset.batch(chunk);
        let pred = model.predict(&batch)?;
        correct += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
    }
    Ok((correct, indices.len()))
}

fn split_indices(dataset: &Dataset, split: Split, limit: Option<usize>) -> Vec<usize> {
    let recs = dataset.split(split);
    let n = limit.map_or(recs.len(), |l| l.min(recs.len()));
    recs[..n].iter().map(|r| r.index).collect()
}

/// Eval-mode accuracy over a whole split (0 for an empty split).
pub fn evaluate(model: &Model, dataset: &Dataset, split: Split) -> Result<f64> {
    accuracy_on(model, dataset, &split_indices(dataset, split, None))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub iteration: u64,
    pub val_accuracy: f64,
    /// Mean training loss over the steps since the previous eval point; at
    /// iteration 0, the loss of the first batch before any update.
    pub train_loss: f64,
    /// Seconds since the start of the run.
    pub wall_clock: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub rows: Vec<EvalRow>,
    pub loss_trace: Vec<f32>,
    pub final_checkpoint: Option<PathBuf>,
    pub config: serde_json::Value,
}

impl RunRecord {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.rows.last().map(|r| r.val_accuracy)
    }
}

/// Optional side outputs of [`train`].
#[derive(Default)]
pub struct TrainOutput<'a> {
    /// Run directory for config.json, log.txt, curves and checkpoints.
    pub run_dir: Option<&'a Path>,
    /// Snapshot written to config.json and the record.
    pub config: serde_json::Value,
    pub on_eval: Option<&'a mut dyn FnMut(&EvalRow)>,
}

fn val_accuracy(model: &Model, data: &TrainData<'_>, sample: Option<usize>) -> Result<f64> {
    let (mut correct, mut total) = (0, 0);
    for c in &data.components {
        let (k, n) = correct_count(model, c.dataset, &split_indices(c.dataset, Split::Val, sample))?;
        correct += k;
        total += n;
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

/// Runs exactly `schedule.iterations` optimizer steps, evaluating on the val
/// split(s) at each eval point.
pub fn train(
    model: &mut Model,
    data: &TrainData<'_>,
    schedule: &TrainSchedule,
    adam: AdamConfig,
    optimizer: Option<AdamState<f32>>,
    mut out: TrainOutput<'_>,
) -> Result<(RunRecord, AdamState<f32>)> {
    schedule.validate()?;
    let start = Instant::now();
    let mut log = match out.run_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let cfg = dir.join(CONFIG_JSON);
            let text = serde_json::to_string_pretty(&out.config)?;
            fs::write(&cfg, text + "\n").map_err(|e| Error::io(&cfg, e))?;
            let path = dir.join(LOG_TXT);
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut rows: Vec<EvalRow> = Vec::new();
    let mut trainer = Trainer::new(model, data, schedule.batch_size, schedule.seed, adam, optimizer)?;
    let mut zero_pending = false;
    let mut since = 0;
    let points = schedule.eval_points();
    // the trailing target only finishes the budget; it is not an eval point
    for p in points.iter().copied().chain([schedule.iterations]) {
        while trainer.iteration() < p {
            trainer.step()?;
            if zero_pending {
                // iteration 0 reports the first batch's loss before the update
                rows[0].train_loss = trainer.loss_trace()[0] as f64;
                emit_row(&mut log, &mut out, &rows[0])?;
                zero_pending = false;
            }
        }
        if rows.last().is_some_and(|r| r.iteration == p) || !points.contains(&p) {
            continue;
        }
        let recent = &trainer.loss_trace()[since..];
        let train_loss = if recent.is_empty() {
            f64::NAN
        } else {
            recent.iter().map(|&l| l as f64).sum::<f64>() / recent.len() as f64
        };
        since = trainer.loss_trace().len();
        let row = EvalRow {
            iteration: p,
            val_accuracy: val_accuracy(trainer.model(), data, schedule.eval_sample_size)?,
            train_loss,
            wall_clock: start.elapsed().as_secs_f64(),
        };
        rows.push(row);
        if p == 0 && schedule.iterations > 0 {
            zero_pending = true;
            continue;
        }
        emit_row(&mut log, &mut out, rows.last().expect("row"))?;
        if schedule.checkpoint_at_eval && p > 0 {
            if let Some(dir) = out.run_dir {
                let ck = trainer.model().to_checkpoint(Some(trainer.optimizer()));
                ck.save(&dir.join(format!("iter-{p}.ckpt")))?;
            }
        }
    }
    let (optimizer, loss_trace) = trainer.into_parts();
    let mut record = RunRecord {
        rows,
        loss_trace,
        final_checkpoint: None,
        config: out.config.clone(),
    };
    if let Some(dir) = out.run_dir {
        let path = dir.join(FINAL_CHECKPOINT);
        model.to_checkpoint(Some(&optimizer)).save(&path)?;
        record.final_checkpoint = Some(path);
        let trace: String = record.loss_trace.iter().map(|l| format!("{l}\n")).collect();
        let trace_path = dir.join(LOSS_TRACE_TXT);
        fs::write(&trace_path, trace).map_err(|e| Error::io(&trace_path, e))?;
        emit_metrics(&record, dir)?;
    }
    Ok((record, optimizer))
}

fn emit_row(log: &mut Option<(fs::File, PathBuf)>, out: &mut TrainOutput<'_>, row: &EvalRow) -> Result<()> {
    if let Some((f, path)) = log {
        writeln!(
            f,
            "iteration {} val_accuracy {:.4} train_loss {:.6} wall_clock {:.1}s",
            row.iteration, row.val_accuracy, row.train_loss, row.wall_clock
        )
        .map_err(|e| Error::io(path.as_path(), e))?;
    }
    if let Some(cb) = out.on_eval.as_mut() {
        cb(row);
    }
    Ok(())
}

/// Where a curriculum's first stage comes from.
pub enum Pretrain<'a> {
    Checkpoint(PathBuf),
    Train {
        data: TrainData<'a>,
        schedule: TrainSchedule,
    },
}

pub struct CurriculumSpec<'a> {
    pub config: ModelConfig,
    pub pretrain: Pretrain<'a>,
    pub finetune: TrainData<'a>,
    pub finetune_schedule: TrainSchedule,
    pub adam: AdamConfig,
    /// Stage directories `pretrain/` and `finetune/` are created inside.
    pub out_dir: Option<PathBuf>,
}

/// Pretrain (or load), then finetune with a fresh optimizer starting from the
/// exact pretrained parameters.
pub fn run_curriculum(spec: CurriculumSpec<'_>) -> Result<(Option<RunRecord>, RunRecord, Model)> {
    let stage_dir = |name: &str| spec.out_dir.as_ref().map(|d| d.join(name));
    let (mut model, pre_record) = match spec.pretrain {
        Pretrain::Checkpoint(path) => {
            let (model, _) = Model::from_checkpoint(&Checkpoint::load(&path)?)?;
            if model.config() != &spec.config {
                return Err(Error::ArchitectureMismatch(format!(
                    "checkpoint {} holds {:?}, curriculum expects {:?}",
                    path.display(),
                    model.config(),
                    spec.config
                )));
            }
            (model, None)
        }
        Pretrain::Train { data, schedule } => {
            let first = data.components.first().ok_or_else(|| Error::ConfigInvalid("no pretraining data".into()))?;
            let vocab = first.dataset.manifest.vocabulary.len();
            let size = first.dataset.image_size().0;
            let mut model = Model::build(spec.config.clone(), vocab, size, schedule.seed)?;
            let dir = stage_dir("pretrain");
            let out = TrainOutput {
                run_dir: dir.as_deref(),
                config: serde_json::json!({ "stage": "pretrain", "model": spec.config, "schedule": schedule }),
                on_eval: None,
            };
            let (record, _) = train(&mut model, &data, &schedule, spec.adam, None, out)?;
            (model, Some(record))
        }
    };
    let dir = stage_dir("finetune");
    let out = TrainOutput {
        run_dir: dir.as_deref(),
        config: serde_json::json!({ "stage": "finetune", "model": spec.config, "schedule": spec.finetune_schedule }),
        on_eval: None,
    };
    let (record, _) = train(&mut model, &spec.finetune, &spec.finetune_schedule, spec.adam, None, out)?;
    Ok((pre_record, record, model))
}

/// Writes `curves.csv` and `curves.svg` into `out_dir`.
pub fn emit_metrics(record: &RunRecord, out_dir: &Path) -> Result<()> {
    if record.rows.is_empty() {
        return Err(Error::ConfigInvalid("cannot emit metrics for an empty record".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join(CURVES_CSV);
    let mut w = csv::Writer::from_path(&csv_path)?;
    for row in &record.rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let svg = render_svg(&[("val accuracy".to_owned(), record.rows.clone())]);
    let svg_path = out_dir.join(CURVES_SVG);
    fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))
}

pub fn read_curves(path: &Path) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<EvalRow>, _>>()?)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Accuracy-over-iterations line chart, one labeled series per run.
pub fn render_svg(series: &[(String, Vec<EvalRow>)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 20.0, 20.0, 60.0);
    let max_it = series
        .iter()
        .flat_map(|(_, rows)| rows.iter().map(|r| r.iteration))
        .max()
        .unwrap_or(0)
        .max(1000) as f64;
    let x = |it: u64| left + (it as f64 / max_it) * (w - left - right);
    let y = |acc: f64| top + (1.0 - acc.clamp(0.0, 1.0)) * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (left, w - right, top, h - bottom);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for i in 0..=5 {
        let acc = i as f64 / 5.0;
        let yy = y(acc);
        let _ = writeln!(
            s,
            r##"<line x1="{x0}" y1="{yy:.1}" x2="{x1}" y2="{yy:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{acc:.1}</text>"##,
            x0 - 6.0,
            yy + 4.0
        );
    }
    for i in 0..=5 {
        let it = (max_it * i as f64 / 5.0).round() as u64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x(it),
            y1 + 18.0,
            format_thousands(it)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">iterations in 1000</text>"#,
        (x0 + x1) / 2.0,
        h - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">accuracy</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    for (k, (label, rows)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = rows.iter().map(|r| format!("{:.1},{:.1}", x(r.iteration), y(r.val_accuracy))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 14.0 + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            x1 - 150.0,
            x1 - 130.0,
            x1 - 124.0,
            ly + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn format_thousands(it: u64) -> String {
    let k = it as f64 / 1000.0;
    if k.fract() == 0.0 {
        format!("{}", k as u64)
    } else {
        format!("{k:.1}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_budget_eval_points() {
        let mut expect: Vec<u64> = (0..=10).map(|k| k * 1000).collect();
        expect.extend((15..=100).step_by(5).map(|k| k * 1000));
        assert_eq!(standard_eval_points(100_000), expect);
        assert_eq!(TrainSchedule::default().eval_points(), expect);
    }

    #[test]
    fn small_budgets() {
        assert_eq!(standard_eval_points(10_000).len(), 11);
        assert_eq!(standard_eval_points(3000), [0, 1000, 2000, 3000]);
        assert_eq!(standard_eval_points(100), [0]);
        assert_eq!(standard_eval_points(14_999).last(), Some(&10_000));
        let s = TrainSchedule {
            iterations: 250,
            eval_interval: Some(100),
            ..TrainSchedule::default()
        };
        assert_eq!(s.eval_points(), [0, 100, 200]);
    }

    #[test]
    fn mixer_frequencies() {
        let mut m = Mixer::new(&[0.45, 0.55], 0).unwrap();
        let first = (0..10_000).filter(|_| m.draw() == 0).count() as f64 / 10_000.0;
        assert!((first - 0.45).abs() < 0.02, "{first}");
        assert!(Mixer::new(&[0.0, 0.0], 0).is_err());
    }

    #[test]
    fn svg_is_escaped_and_closed() {
        let rows = vec![EvalRow {
            iteration: 0,
            val_accuracy: 0.5,
            train_loss: 0.69,
            wall_clock: 0.0,
        }];
        let svg = render_svg(&[("a<b".into(), rows)]);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
