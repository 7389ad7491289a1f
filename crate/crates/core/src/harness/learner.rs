use std::collections::BTreeMap;

use crate::buffer::{Candidate, HardBuffer};
use crate::checkpoint::TensorMap;
use crate::error::{Error, Result};
use crate::importance::{estimate_importance, total_loss, ImportanceState};
use crate::lora::LoraStack;
use crate::plateau::{Event, LossWindow};
use crate::rng::derive_seed;
use crate::stream::LearnerBatch;
use crate::tensor::{per_sample_cross_entropy, AdamConfig, AdamState, Tape, Tensor};
use crate::vit::{
    param_mut, reset_all_grads, trainable_parameters, Bindings, ParamKey, ViTModel,
};

use super::config::{ExperimentConfig, Method};

/// What one training step reports.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// Cross-entropy of the incoming batch, before the update.
    pub train_loss: f64,
    pub buffer_loss: f64,
    pub penalty: f64,
    pub event: Event,
    /// Max-abs logit change across a freeze/merge/add cycle on this batch.
    pub merge_jump: Option<f64>,
}

/// A task-free online learner. It only ever sees [`LearnerBatch`]es.
pub trait Learner {
    fn observe(&mut self, batch: LearnerBatch<'_>) -> Result<StepLog>;
    fn model(&self) -> &ViTModel;
    fn stack(&self) -> &LoraStack;
    /// Tensors needed to resume or evaluate the learner.
    fn to_tensors(&self) -> TensorMap {
        let mut m = TensorMap::new();
        self.model().to_tensors(&mut m);
        self.stack().to_tensors(&mut m);
        m
    }
}

/// One Adam state per trainable tensor, created lazily. States for tensors
/// that are no longer trainable are dropped.
#[derive(Debug, Default)]
struct Optimizer {
    cfg: AdamConfig,
    states: BTreeMap<ParamKey, AdamState<f32>>,
}

impl Optimizer {
    fn new(lr: f64) -> Self {
        Self {
            cfg: AdamConfig::with_lr(lr),
            states: BTreeMap::new(),
        }
    }

    fn step(&mut self, model: &mut ViTModel, stack: &mut LoraStack) -> Result<()> {
        let keys = trainable_parameters(model, stack);
        self.states.retain(|k, _| keys.contains(k));
        for key in keys {
            let p = param_mut(model, stack, key).expect("trainable key resolves");
            let Some(g) = p.grad().map(<[f32]>::to_vec) else { continue };
            let cfg = self.cfg;
            let state = self
                .states
                .entry(key)
                .or_insert_with(|| AdamState::new(g.len(), cfg));
            state.step(p.data_mut(), &g)?;
        }
        Ok(())
    }
}

fn batch_ce(tape: &Tape<f32>, logits: crate::tensor::Var, labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    Ok(per_sample_cross_entropy(tape.value(logits), classes, labels)?
        .into_iter()
        .map(f64::from)
        .collect())
}

/// Incremental LoRA with loss-plateau expansion, importance-weighted
/// penalty and a hard buffer.
pub struct OnlineLora {
    model: ViTModel,
    stack: LoraStack,
    buffer: HardBuffer,
    window: LossWindow,
    importance: ImportanceState,
    opt: Optimizer,
    rank: usize,
    lora_seed: u64,
    step: usize,
    plateaus: usize,
}

impl OnlineLora {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let mut mc = cfg.model.clone();
        mc.seed = derive_seed(seed, 1);
        let model = ViTModel::init(&mc)?;
        let mut stack = LoraStack::new(mc.num_layers, mc.embed_dim);
        let lora_seed = derive_seed(seed, 2);
        stack.add_pair_all(cfg.rank, lora_seed, 0)?;
        let mut importance = ImportanceState::new(cfg.lambda, cfg.penalty_mode);
        importance.snapshot_map(&stack);
        let s = mc.image_size;
        Ok(Self {
            model,
            stack,
            buffer: HardBuffer::new(cfg.buffer_size, &[mc.channels, s, s])?,
            window: LossWindow::new(cfg.window, cfg.mean_threshold, cfg.var_threshold)?,
            importance,
            opt: Optimizer::new(cfg.lr),
            rank: cfg.rank,
            lora_seed,
            step: 0,
            plateaus: 0,
        })
    }

    pub fn buffer(&self) -> &HardBuffer {
        &self.buffer
    }

    pub fn importance(&self) -> &ImportanceState {
        &self.importance
    }

    pub fn window(&self) -> &LossWindow {
        &self.window
    }

    pub fn plateaus(&self) -> usize {
        self.plateaus
    }

    /// Importance update, anchor snapshot, merge of every pair into the
    /// backbone and a fresh pair at every site.
    fn on_plateau(&mut self, probe: &Tensor<f32>) -> Result<f64> {
        let before = self.model.logits(&self.stack, probe)?;
        let fresh = estimate_importance(&self.model, &self.stack, &self.buffer)?;
        self.importance.accumulate_omega(fresh)?;
        self.importance.snapshot_map(&self.stack);
        for site in self.stack.sites().collect::<Vec<_>>() {
            let w = self.model.blocks[site.layer].site_weight_mut(site.proj);
            self.stack.freeze_and_merge(site, w)?;
        }
        self.plateaus += 1;
        self.stack
            .add_pair_all(self.rank, derive_seed(self.lora_seed, self.plateaus as u64), self.step)?;
        self.importance.snapshot_map(&self.stack);
        let after = self.model.logits(&self.stack, probe)?;
        Ok(f64::from(before.max_abs_diff(&after)?))
    }
}

impl Learner for OnlineLora {
    fn observe(&mut self, batch: LearnerBatch<'_>) -> Result<StepLog> {
        let classes = self.model.config().num_classes;
        let terms = total_loss(
            &self.model,
            &self.stack,
            batch.inputs,
            batch.labels,
            &self.buffer,
            &self.importance,
        )?;
        // Buffer losses under the pre-update weights, taken from the same
        // forward pass.
        if let Some(bl) = terms.buffer_logits {
            let labels: Vec<usize> = self.buffer.entries().iter().map(|e| e.label).collect();
            self.buffer.set_losses(&batch_ce(&terms.tape, bl, &labels, classes)?)?;
        }
        let per_sample = batch_ce(&terms.tape, terms.batch_logits, batch.labels, classes)?;
        let log = StepLog {
            train_loss: terms.batch_loss(),
            buffer_loss: terms.buffer_loss(),
            penalty: terms.penalty(),
            event: Event::None,
            merge_jump: None,
        };
        reset_all_grads(&mut self.model, &mut self.stack);
        terms.backward_into(&mut self.model, &mut self.stack)?;
        self.opt.step(&mut self.model, &mut self.stack)?;

        let n = batch.inputs.numel() / batch.labels.len();
        let candidates = per_sample
            .iter()
            .enumerate()
            .map(|(k, &loss)| Candidate {
                input: batch.inputs.data()[k * n..(k + 1) * n].to_vec(),
                label: batch.labels[k],
                loss,
                sample_id: batch.sample_ids[k],
            })
            .collect();
        self.buffer.update(candidates)?;
        let event = self.window.push(log.train_loss)?;
        let merge_jump = if event == Event::Plateau {
            Some(self.on_plateau(batch.inputs)?)
        } else {
            None
        };
        self.step += 1;
        Ok(StepLog {
            event,
            merge_jump,
            ..log
        })
    }

    fn model(&self) -> &ViTModel {
        &self.model
    }

    fn stack(&self) -> &LoraStack {
        &self.stack
    }

    fn to_tensors(&self) -> TensorMap {
        let mut m = TensorMap::new();
        self.model.to_tensors(&mut m);
        self.stack.to_tensors(&mut m);
        self.buffer.to_tensors(&mut m);
        self.importance.to_tensors(&mut m);
        m
    }
}

/// The three reference learners: full fine-tuning, head-only fine-tuning
/// and a never-trained model.
pub struct Baseline {
    method: Method,
    model: ViTModel,
    stack: LoraStack,
    opt: Optimizer,
}

impl Baseline {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        if cfg.method == Method::OnlineLora {
            return Err(Error::config("online-lora is not a baseline"));
        }
        let mut mc = cfg.model.clone();
        mc.seed = derive_seed(seed, 1);
        let mut model = ViTModel::init(&mc)?;
        model.set_backbone_frozen(cfg.method != Method::ContinualFt);
        Ok(Self {
            method: cfg.method,
            model,
            stack: LoraStack::new(mc.num_layers, mc.embed_dim),
            opt: Optimizer::new(cfg.lr),
        })
    }
}

impl Learner for Baseline {
    fn observe(&mut self, batch: LearnerBatch<'_>) -> Result<StepLog> {
        let mut tape = Tape::new();
        let mut bindings = Bindings::new();
        let logits = self.model.forward(&mut tape, &self.stack, batch.inputs, &mut bindings)?;
        let ce = tape.cross_entropy(logits, batch.labels)?;
        let train_loss = f64::from(tape.item(ce));
        if self.method != Method::RandomHead {
            reset_all_grads(&mut self.model, &mut self.stack);
            let grads = tape.backward(ce)?;
            crate::vit::accumulate_grads(&mut self.model, &mut self.stack, &grads, &bindings)?;
            self.opt.step(&mut self.model, &mut self.stack)?;
        }
        Ok(StepLog {
            train_loss,
            buffer_loss: 0.0,
            penalty: 0.0,
            event: Event::None,
            merge_jump: None,
        })
    }

    fn model(&self) -> &ViTModel {
        &self.model
    }

    fn stack(&self) -> &LoraStack {
        &self.stack
    }
}

pub fn make_learner(cfg: &ExperimentConfig, seed: u64) -> Result<Box<dyn Learner>> {
    Ok(match cfg.method {
        Method::OnlineLora => Box::new(OnlineLora::new(cfg, seed)?),
        _ => Box::new(Baseline::new(cfg, seed)?),
    })
}
