use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, TensorMap};
use crate::error::{Error, Result};
use crate::lora::LoraStack;
use crate::metrics::{a_auc, a_final, forgetting, format_metrics_csv, AccuracyMatrix, AccuracyTrace, MetricsRow};
use crate::plateau::{format_loss_csv, Event, LossWindow};
use crate::stream::{gen_synthetic, make_stream, EvalSet, Stream, SyntheticDataset};
use crate::tensor::kernels::par_map;
use crate::tensor::Tensor;
use crate::vit::ViTModel;

use super::config::{ExperimentConfig, Method};
use super::learner::{make_learner, Baseline, Learner, OnlineLora};

const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub samples_seen: usize,
    pub train_loss: f64,
    pub buffer_loss: f64,
    pub penalty: f64,
    pub event: Event,
}

/// Logit change on the current batch across a freeze/merge/add cycle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeCheck {
    pub step: usize,
    pub max_abs_jump: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub method: Method,
    pub scenario: String,
    /// Detector settings, so the loss trace can be replayed.
    pub window: usize,
    pub mean_threshold: f64,
    pub var_threshold: f64,
    pub rows: Vec<StepRow>,
    pub matrix: AccuracyMatrix,
    pub trace: AccuracyTrace,
    pub merges: Vec<MergeCheck>,
    pub metrics: MetricsRow,
}

impl RunRecord {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.train_loss).collect()
    }

    pub fn events(&self) -> Vec<(usize, Event)> {
        self.rows
            .iter()
            .filter(|r| r.event != Event::None)
            .map(|r| (r.step, r.event))
            .collect()
    }

    pub fn detector(&self) -> Result<LossWindow> {
        LossWindow::new(self.window, self.mean_threshold, self.var_threshold)
    }

    pub fn samples_seen(&self) -> usize {
        self.rows.last().map_or(0, |r| r.samples_seen)
    }
}

fn correct_count(model: &ViTModel, stack: &LoraStack, set: &EvalSet) -> Result<usize> {
    if set.is_empty() {
        return Err(Error::config("empty eval set"));
    }
    let n = set.len();
    let per = set.inputs.numel() / n;
    let shape = set.inputs.shape().to_vec();
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let counts = par_map(&starts, |&s| -> Result<usize> {
        let e = (s + EVAL_CHUNK).min(n);
        let mut shape = shape.clone();
        shape[0] = e - s;
        let x = Tensor::new(&shape, set.inputs.data()[s * per..e * per].to_vec())?;
        let logits = model.logits(stack, &x)?;
        let c = logits.shape()[1];
        Ok(logits
            .data()
            .chunks(c)
            .zip(&set.labels[s..e])
            .filter(|(row, &y)| argmax(row) == y)
            .count())
    });
    counts.into_iter().sum()
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy on each set. Read-only; ties in the logits go to the lower class.
pub fn evaluate(model: &ViTModel, stack: &LoraStack, sets: &[&EvalSet]) -> Result<Vec<f64>> {
    if sets.is_empty() {
        return Err(Error::config("no eval sets"));
    }
    sets.iter()
        .map(|s| Ok(correct_count(model, stack, s)? as f64 / s.len() as f64))
        .collect()
}

/// Sample-weighted accuracy over the union of `sets`.
fn pooled_accuracy(model: &ViTModel, stack: &LoraStack, sets: &[&EvalSet]) -> Result<f64> {
    let mut correct = 0;
    let mut total = 0;
    for s in sets {
        correct += correct_count(model, stack, s)?;
        total += s.len();
    }
    Ok(correct as f64 / total as f64)
}

/// Feeds the stream to `learner` once, recording losses, events and
/// accuracies. Task ids are read here for evaluation bookkeeping only.
pub fn run_stream(learner: &mut dyn Learner, cfg: &ExperimentConfig, seed: u64, stream: &Stream) -> Result<RunRecord> {
    let t = stream.num_tasks();
    let mut matrix = AccuracyMatrix::new(t);
    let mut trace = AccuracyTrace::new(cfg.eval_every * stream.spec.batch_size);
    let mut rows = Vec::with_capacity(stream.batches.len());
    let mut merges = Vec::new();
    let mut samples = 0;
    let mut tasks_seen = 0;
    let n = stream.batches.len();
    for (i, batch) in stream.batches.iter().enumerate() {
        let log = learner.observe(batch.learner_view()).map_err(|e| e.at_step(i))?;
        samples += batch.len();
        rows.push(StepRow {
            step: i,
            samples_seen: samples,
            train_loss: log.train_loss,
            buffer_loss: log.buffer_loss,
            penalty: log.penalty,
            event: log.event,
        });
        if let Some(j) = log.merge_jump {
            merges.push(MergeCheck {
                step: i,
                max_abs_jump: j,
            });
        }
        let task = batch.hidden_task_id();
        tasks_seen = tasks_seen.max(task + 1);
        let last = i + 1 == n;
        if (i + 1) % cfg.eval_every == 0 || (last && trace.is_empty()) {
            let sets: Vec<&EvalSet> = match &stream.holdout {
                Some(h) => vec![h],
                None => stream.eval_sets[..tasks_seen].iter().collect(),
            };
            let acc = pooled_accuracy(learner.model(), learner.stack(), &sets).map_err(|e| e.at_step(i))?;
            trace.push(samples, acc)?;
        }
        if last || stream.batches[i + 1].hidden_task_id() != task {
            let sets: Vec<&EvalSet> = stream.eval_sets[..=task].iter().collect();
            let accs = evaluate(learner.model(), learner.stack(), &sets).map_err(|e| e.at_step(i))?;
            matrix.set_column(task, &accs)?;
        }
    }
    let (a_auc_norm, a_auc_raw) = a_auc(&trace)?;
    let metrics = MetricsRow {
        run_id: run_id(cfg.method, stream, seed),
        seed,
        method: cfg.method.to_string(),
        scenario: stream.spec.scenario.to_string(),
        a_final: a_final(&matrix)?,
        a_auc_norm,
        a_auc_raw,
        forgetting: if t >= 2 { Some(forgetting(&matrix)?) } else { None },
    };
    Ok(RunRecord {
        run_id: metrics.run_id.clone(),
        seed,
        method: cfg.method,
        scenario: metrics.scenario.clone(),
        window: cfg.window,
        mean_threshold: cfg.mean_threshold,
        var_threshold: cfg.var_threshold,
        rows,
        matrix,
        trace,
        merges,
        metrics,
    })
}

pub fn run_id(method: Method, stream: &Stream, seed: u64) -> String {
    format!("{method}-{}-s{seed}", stream.spec.scenario)
}

/// The stream for one seed: the run seed replaces the stream seed.
pub fn stream_for_seed(cfg: &ExperimentConfig, ds: &SyntheticDataset, seed: u64) -> Result<Stream> {
    let mut spec = cfg.stream.clone();
    spec.seed = seed;
    make_stream(ds, &spec)
}

pub fn train_online_lora(cfg: &ExperimentConfig, seed: u64, stream: &Stream) -> Result<(RunRecord, OnlineLora)> {
    cfg.validate()?;
    if cfg.method != Method::OnlineLora {
        return Err(Error::config(format!("method {} is not online-lora", cfg.method)));
    }
    let mut learner = OnlineLora::new(cfg, seed)?;
    let record = run_stream(&mut learner, cfg, seed, stream)?;
    Ok((record, learner))
}

pub fn train_baseline(cfg: &ExperimentConfig, seed: u64, stream: &Stream) -> Result<(RunRecord, Baseline)> {
    cfg.validate()?;
    let mut learner = Baseline::new(cfg, seed)?;
    let record = run_stream(&mut learner, cfg, seed, stream)?;
    Ok((record, learner))
}

/// Trains any method; returns the record and the learner's tensors.
pub fn train(cfg: &ExperimentConfig, seed: u64, stream: &Stream) -> Result<(RunRecord, TensorMap)> {
    cfg.validate()?;
    let mut learner = make_learner(cfg, seed)?;
    let record = run_stream(learner.as_mut(), cfg, seed, stream)?;
    Ok((record, learner.to_tensors()))
}

pub const STEPS_HEADER: &str = "step,samples_seen,train_loss,buffer_loss,penalty,event";

/// Losses are written in shortest round-trip form so the file can be
/// replayed exactly.
pub fn format_steps_csv(rows: &[StepRow]) -> String {
    let mut out = String::from(STEPS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.samples_seen, r.train_loss, r.buffer_loss, r.penalty, r.event
        )
        .expect("write to string");
    }
    out
}

pub fn format_matrix_csv(m: &AccuracyMatrix) -> String {
    let t = m.num_tasks();
    let mut out = String::from("task");
    for j in 0..t {
        write!(out, ",after_{j}").expect("write to string");
    }
    out.push('\n');
    for (i, row) in m.rows().iter().enumerate() {
        write!(out, "{i}").expect("write to string");
        for v in row {
            match v {
                Some(v) => write!(out, ",{v:.6}"),
                None => write!(out, ","),
            }
            .expect("write to string");
        }
        out.push('\n');
    }
    out
}

pub fn format_trace_csv(trace: &AccuracyTrace) -> String {
    let mut out = String::from("samples_seen,accuracy\n");
    for p in &trace.points {
        writeln!(out, "{},{:.6}", p.samples_seen, p.accuracy).expect("write to string");
    }
    out
}

pub fn format_events_csv(events: &[(usize, Event)]) -> String {
    let mut out = String::from("step,event\n");
    for (s, e) in events {
        writeln!(out, "{s},{e}").expect("write to string");
    }
    out
}

/// Writes a run directory: resolved config, per-step log, loss trace,
/// event log, accuracy matrix and trace, metrics, full record and the
/// final checkpoint.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, record: &RunRecord, tensors: &TensorMap) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut run_cfg = cfg.clone();
    run_cfg.seeds = vec![record.seed];
    fs::write(dir.join("config.toml"), run_cfg.to_toml()?)?;
    fs::write(dir.join("steps.csv"), format_steps_csv(&record.rows))?;
    fs::write(dir.join("loss_trace.csv"), format_loss_csv(&record.losses()))?;
    fs::write(dir.join("events.csv"), format_events_csv(&record.events()))?;
    fs::write(dir.join("matrix.csv"), format_matrix_csv(&record.matrix))?;
    fs::write(dir.join("trace.csv"), format_trace_csv(&record.trace))?;
    fs::write(dir.join("metrics.csv"), format_metrics_csv(std::slice::from_ref(&record.metrics))?)?;
    let json = serde_json::to_string_pretty(record).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("record.json"), json + "\n")?;
    checkpoint::save(&dir.join("checkpoint.olra"), tensors)
}

pub fn load_record(dir: &Path) -> Result<RunRecord> {
    let text = fs::read_to_string(dir.join("record.json"))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", dir.display())))
}

/// Loads the model and LoRA stack saved by [`write_run`].
pub fn load_checkpoint(dir: &Path) -> Result<(ExperimentConfig, ViTModel, LoraStack)> {
    let cfg = ExperimentConfig::load(&dir.join("config.toml"))?;
    let mut map = checkpoint::load(&dir.join("checkpoint.olra"))?;
    let seed = cfg.seeds[0];
    let mut mc = cfg.model.clone();
    mc.seed = crate::rng::derive_seed(seed, 1);
    let model = ViTModel::from_tensors(&mc, &mut map)?;
    let stack = LoraStack::from_tensors(&mut map, mc.num_layers, mc.embed_dim)?;
    Ok((cfg, model, stack))
}

/// Every seed of `cfg`, run in parallel, each written under
/// `out_dir/<run_id>`.
pub fn run_experiment(cfg: &ExperimentConfig, stream_dir: Option<&Path>) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let ds = if stream_dir.is_none() { Some(gen_synthetic(&cfg.data)?) } else { None };
    let results = par_map(&cfg.seeds, |&seed| -> Result<RunRecord> {
        let stream = match (stream_dir, &ds) {
            (Some(dir), _) => crate::stream::import_stream(dir)?,
            (None, Some(ds)) => stream_for_seed(cfg, ds, seed)?,
            (None, None) => unreachable!("dataset generated when no stream dir"),
        };
        let (record, tensors) = train(cfg, seed, &stream)?;
        write_run(&cfg.out_dir.join(&record.run_id), cfg, &record, &tensors)?;
        Ok(record)
    });
    results.into_iter().collect()
}
