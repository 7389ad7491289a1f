//! Online importance of the trainable LoRA factors and the learning
//! objective built on it.
//!
//! Importance is the empirical Fisher diagonal of each trainable factor,
//! estimated on the hard buffer: `Ω = (1/N) Σ_k g_k ∘ g_k` with
//! `g_k = ∇ log p(y_k | x_k)`. The penalty keeps the trainable factors close
//! to the anchor taken at the last plateau:
//!
//! ```text
//! (λ/2) Σ_sites [ Σ Ω_A ∘ (A − A*)² + Σ Ω_B ∘ (B − B*)² ]
//! ```
//!
//! [`PenaltyMode::Literal`] drops the anchor and penalizes `Ω ∘ W ∘ W`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::buffer::HardBuffer;
use crate::checkpoint::{take, TensorMap};
use crate::error::{Error, Result};
use crate::lora::{Factor, LoraStack, Site};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::vit::{accumulate_grads, Bindings, ParamKey, ViTModel};

pub const DEFAULT_LAMBDA: f64 = 2000.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyMode {
    /// `Ω ∘ (W − W*)²`, anchored at the last plateau snapshot.
    #[default]
    Deviation,
    /// `Ω ∘ W²`, no anchor.
    Literal,
}

impl std::str::FromStr for PenaltyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deviation" => Ok(Self::Deviation),
            "literal" => Ok(Self::Literal),
            other => Err(Error::config(format!(
                "penalty mode {other:?} (expected deviation|literal)"
            ))),
        }
    }
}

/// Ω for the A and B factors of one site.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteOmega<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
struct SiteState<T> {
    omega: SiteOmega<T>,
    anchor_a: Tensor<T>,
    anchor_b: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceState<T = f32> {
    sites: BTreeMap<Site, SiteState<T>>,
    lambda: f64,
    mode: PenaltyMode,
}

/// Squared log-likelihood gradients of the trainable factors, averaged over
/// the hard buffer. Model and stack tensors are left untouched.
pub fn estimate_importance<T: Scalar>(
    model: &ViTModel<T>,
    stack: &LoraStack<T>,
    buffer: &HardBuffer<T>,
) -> Result<BTreeMap<Site, SiteOmega<T>>> {
    let Some((x, y)) = buffer.as_batch() else {
        return Err(Error::state("importance needs a non-empty hard buffer"));
    };
    let mut out = BTreeMap::new();
    let mut keys = Vec::new();
    for site in stack.sites() {
        let index = stack
            .trainable_index(site)
            .ok_or_else(|| Error::state(format!("no trainable pair at {site:?}")))?;
        let p = &stack.pairs(site)[index];
        out.insert(
            site,
            SiteOmega {
                a: p.a().zeros_like(),
                b: p.b().zeros_like(),
            },
        );
        keys.push((site, index));
    }
    let n = y.len();
    let per_sample = x.numel() / n;
    let mut sample_shape = x.shape().to_vec();
    sample_shape[0] = 1;
    for k in 0..n {
        let xk = Tensor::new(&sample_shape, x.data()[k * per_sample..(k + 1) * per_sample].to_vec())?;
        let mut tape = Tape::new();
        let mut bindings = Bindings::new();
        let logits = model.forward(&mut tape, stack, &xk, &mut bindings)?;
        // −log p(y|x) per sample; squaring removes the sign.
        let nll = tape.cross_entropy(logits, &y[k..k + 1])?;
        let grads = tape.backward(nll)?;
        for &(site, index) in &keys {
            let om = out.get_mut(&site).expect("inserted above");
            for (factor, acc) in [(Factor::A, &mut om.a), (Factor::B, &mut om.b)] {
                for var in bindings.find(ParamKey::Lora { site, index, factor }) {
                    if let Some(g) = grads.get(var) {
                        for (o, &gv) in acc.data_mut().iter_mut().zip(g) {
                            *o = *o + gv * gv;
                        }
                    }
                }
            }
        }
    }
    let inv = T::one() / T::from_f64(n as f64);
    for om in out.values_mut() {
        om.a.data_mut().iter_mut().for_each(|v| *v = *v * inv);
        om.b.data_mut().iter_mut().for_each(|v| *v = *v * inv);
    }
    Ok(out)
}

impl<T: Scalar> ImportanceState<T> {
    pub fn new(lambda: f64, mode: PenaltyMode) -> Self {
        Self {
            sites: BTreeMap::new(),
            lambda,
            mode,
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mode(&self) -> PenaltyMode {
        self.mode
    }

    pub fn omega(&self, site: Site) -> Option<&SiteOmega<T>> {
        self.sites.get(&site).map(|s| &s.omega)
    }

    pub fn anchor(&self, site: Site) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.sites.get(&site).map(|s| (&s.anchor_a, &s.anchor_b))
    }

    /// Replaces Ω outright (no accumulation).
    pub fn set_omega(&mut self, site: Site, omega: SiteOmega<T>) -> Result<()> {
        let s = self
            .sites
            .get_mut(&site)
            .ok_or_else(|| Error::state(format!("no snapshot for {site:?}")))?;
        if omega.a.shape() != s.anchor_a.shape() || omega.b.shape() != s.anchor_b.shape() {
            return Err(Error::shape(format!(
                "omega {:?}/{:?} for factors {:?}/{:?}",
                omega.a.shape(),
                omega.b.shape(),
                s.anchor_a.shape(),
                s.anchor_b.shape()
            )));
        }
        s.omega = omega;
        Ok(())
    }

    /// Folds a fresh estimate into Ω by element-wise running maximum.
    pub fn accumulate_omega(&mut self, fresh: BTreeMap<Site, SiteOmega<T>>) -> Result<()> {
        for (site, new) in fresh {
            let cur = self
                .omega(site)
                .cloned()
                .ok_or_else(|| Error::state(format!("no snapshot for {site:?}")))?;
            if cur.a.shape() != new.a.shape() || cur.b.shape() != new.b.shape() {
                return Err(Error::shape(format!("omega shape change at {site:?}")));
            }
            let max = |x: &Tensor<T>, y: &Tensor<T>| {
                let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p.max(q)).collect();
                Tensor::new(x.shape(), data).expect("same shape")
            };
            self.set_omega(
                site,
                SiteOmega {
                    a: max(&cur.a, &new.a),
                    b: max(&cur.b, &new.b),
                },
            )?;
        }
        Ok(())
    }

    /// Anchors every site at its current trainable factors. Sites seen for
    /// the first time start with Ω = 0.
    pub fn snapshot_map(&mut self, stack: &LoraStack<T>) {
        for site in stack.sites() {
            let Some(p) = stack.trainable(site) else { continue };
            let anchor_a = p.a().clone().with_requires_grad(false);
            let anchor_b = p.b().clone().with_requires_grad(false);
            match self.sites.get_mut(&site) {
                Some(s) if s.anchor_a.shape() == anchor_a.shape() && s.anchor_b.shape() == anchor_b.shape() => {
                    s.anchor_a = anchor_a;
                    s.anchor_b = anchor_b;
                }
                _ => {
                    let omega = SiteOmega {
                        a: anchor_a.zeros_like(),
                        b: anchor_b.zeros_like(),
                    };
                    self.sites.insert(
                        site,
                        SiteState {
                            omega,
                            anchor_a,
                            anchor_b,
                        },
                    );
                }
            }
        }
    }

    /// The quadratic penalty on the tape. Trainable factor leaves are looked
    /// up in `bindings` (so gradients meet those of the forward pass) and
    /// created if absent.
    pub fn lora_penalty(
        &self,
        tape: &mut Tape<T>,
        stack: &LoraStack<T>,
        bindings: &mut Bindings,
    ) -> Result<Var> {
        let mut terms = Vec::new();
        for site in stack.sites() {
            let (Some(index), Some(state)) = (stack.trainable_index(site), self.sites.get(&site))
            else {
                continue;
            };
            let pair = &stack.pairs(site)[index];
            for (factor, omega, anchor) in [
                (Factor::A, &state.omega.a, &state.anchor_a),
                (Factor::B, &state.omega.b, &state.anchor_b),
            ] {
                let w = pair.factor(factor);
                if w.shape() != omega.shape() {
                    return Err(Error::shape(format!(
                        "omega {:?} for factor {:?} at {site:?}",
                        omega.shape(),
                        w.shape()
                    )));
                }
                let key = ParamKey::Lora { site, index, factor };
                let found = bindings.find(key).next();
                let var = match found {
                    Some(v) => v,
                    None => {
                        let v = tape.leaf(w);
                        bindings.push(key, v);
                        v
                    }
                };
                let diff = match self.mode {
                    PenaltyMode::Deviation => {
                        let a = tape.leaf(anchor);
                        tape.sub(var, a)?
                    }
                    PenaltyMode::Literal => var,
                };
                let sq = tape.mul(diff, diff)?;
                let om = tape.leaf(omega);
                let weighted = tape.mul(om, sq)?;
                terms.push(tape.sum(weighted));
            }
        }
        let mut total = tape.constant(&[1], vec![T::zero()])?;
        for t in terms {
            total = tape.add(total, t)?;
        }
        Ok(tape.scale(total, T::from_f64(self.lambda / 2.0)))
    }

    /// `omega.{layer}.{q|v}.{a|b}` and `map.{layer}.{q|v}.{a|b}`.
    pub fn to_tensors(&self, out: &mut TensorMap) {
        for (site, s) in &self.sites {
            let p = format!("{}.{}", site.layer, site.proj.tag());
            out.insert(format!("omega.{p}.a"), s.omega.a.cast());
            out.insert(format!("omega.{p}.b"), s.omega.b.cast());
            out.insert(format!("map.{p}.a"), s.anchor_a.cast());
            out.insert(format!("map.{p}.b"), s.anchor_b.cast());
        }
    }

    pub fn from_tensors(
        map: &mut TensorMap,
        stack: &LoraStack<T>,
        lambda: f64,
        mode: PenaltyMode,
    ) -> Result<Self> {
        let mut state = Self::new(lambda, mode);
        for site in stack.sites() {
            let p = format!("{}.{}", site.layer, site.proj.tag());
            if !map.contains_key(&format!("omega.{p}.a")) {
                continue;
            }
            let mut get = |n: &str| take(map, n).map(|t| t.cast::<T>());
            let omega = SiteOmega {
                a: get(&format!("omega.{p}.a"))?,
                b: get(&format!("omega.{p}.b"))?,
            };
            let anchor_a = get(&format!("map.{p}.a"))?;
            let anchor_b = get(&format!("map.{p}.b"))?;
            state.sites.insert(
                site,
                SiteState {
                    omega,
                    anchor_a,
                    anchor_b,
                },
            );
        }
        Ok(state)
    }
}

/// The three terms of the objective, recorded on one tape.
pub struct LossTerms<T: Scalar> {
    pub tape: Tape<T>,
    pub bindings: Bindings,
    pub total: Var,
    pub batch_ce: Var,
    pub buffer_ce: Option<Var>,
    pub penalty: Var,
    pub batch_logits: Var,
    pub buffer_logits: Option<Var>,
}

impl<T: Scalar> LossTerms<T> {
    pub fn batch_loss(&self) -> f64 {
        self.tape.item(self.batch_ce).as_f64()
    }

    /// 0 when the buffer was empty.
    pub fn buffer_loss(&self) -> f64 {
        self.buffer_ce.map_or(0.0, |v| self.tape.item(v).as_f64())
    }

    pub fn penalty(&self) -> f64 {
        self.tape.item(self.penalty).as_f64()
    }

    pub fn total(&self) -> f64 {
        self.tape.item(self.total).as_f64()
    }

    /// Backpropagates the total and adds the gradients into every bound
    /// tensor that requires grad.
    pub fn backward_into(&self, model: &mut ViTModel<T>, stack: &mut LoraStack<T>) -> Result<()> {
        let grads = self.tape.backward(self.total)?;
        accumulate_grads(model, stack, &grads, &self.bindings)
    }
}

/// `CE(batch) + CE(hard buffer) + penalty`.
pub fn total_loss<T: Scalar>(
    model: &ViTModel<T>,
    stack: &LoraStack<T>,
    images: &Tensor<T>,
    labels: &[usize],
    buffer: &HardBuffer<T>,
    state: &ImportanceState<T>,
) -> Result<LossTerms<T>> {
    if labels.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut tape = Tape::new();
    let mut bindings = Bindings::new();
    let batch_logits = model.forward(&mut tape, stack, images, &mut bindings)?;
    let batch_ce = tape.cross_entropy(batch_logits, labels)?;
    let mut total = batch_ce;
    let (mut buffer_ce, mut buffer_logits) = (None, None);
    if let Some((bx, by)) = buffer.as_batch() {
        let logits = model.forward(&mut tape, stack, &bx, &mut bindings)?;
        let ce = tape.cross_entropy(logits, &by)?;
        total = tape.add(total, ce)?;
        buffer_ce = Some(ce);
        buffer_logits = Some(logits);
    }
    let penalty = state.lora_penalty(&mut tape, stack, &mut bindings)?;
    total = tape.add(total, penalty)?;
    Ok(LossTerms {
        tape,
        bindings,
        total,
        batch_ce,
        buffer_ce,
        penalty,
        batch_logits,
        buffer_logits,
    })
}
