//! The hard buffer: the `K` highest-loss samples seen so far.

use crate::checkpoint::{take, TensorMap};
use crate::error::{Error, Result};
use crate::lora::LoraStack;
use crate::tensor::{per_sample_cross_entropy, Scalar, Tensor};
use crate::vit::ViTModel;

pub const DEFAULT_CAPACITY: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry<T> {
    pub input: Vec<T>,
    pub label: usize,
    pub loss: f64,
    pub sample_id: usize,
    seq: u64,
}

/// A candidate for insertion: one raw sample with its current loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate<T> {
    pub input: Vec<T>,
    pub label: usize,
    pub loss: f64,
    pub sample_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HardBuffer<T = f32> {
    capacity: usize,
    sample_shape: Vec<usize>,
    entries: Vec<BufferEntry<T>>,
    next_seq: u64,
}

impl<T: Scalar> HardBuffer<T> {
    /// `sample_shape` is the per-sample image shape, e.g. `[C, H, W]`.
    pub fn new(capacity: usize, sample_shape: &[usize]) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("hard buffer capacity must be positive"));
        }
        Ok(Self {
            capacity,
            sample_shape: sample_shape.to_vec(),
            entries: Vec::with_capacity(capacity),
            next_seq: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry<T>] {
        &self.entries
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }

    fn sort(&mut self) {
        self.entries
            .sort_by(|a, b| b.loss.total_cmp(&a.loss).then(a.seq.cmp(&b.seq)));
    }

    /// Keeps the top `K` by loss from the current entries and `candidates`.
    /// Ties favour existing entries, then earlier candidates.
    pub fn update(&mut self, candidates: Vec<Candidate<T>>) -> Result<()> {
        let numel: usize = self.sample_shape.iter().product();
        for c in &candidates {
            if !c.loss.is_finite() {
                return Err(Error::Data(format!(
                    "candidate {} has loss {}",
                    c.sample_id, c.loss
                )));
            }
            if c.input.len() != numel {
                return Err(Error::shape(format!(
                    "candidate of {} values, expected {numel}",
                    c.input.len()
                )));
            }
        }
        for c in candidates {
            self.entries.push(BufferEntry {
                input: c.input,
                label: c.label,
                loss: c.loss,
                sample_id: c.sample_id,
                seq: self.next_seq,
            });
            self.next_seq += 1;
        }
        self.sort();
        self.entries.truncate(self.capacity);
        Ok(())
    }

    /// Overwrites entry losses (in current order) and re-sorts.
    pub fn set_losses(&mut self, losses: &[f64]) -> Result<()> {
        if losses.len() != self.entries.len() {
            return Err(Error::shape(format!(
                "{} losses for {} entries",
                losses.len(),
                self.entries.len()
            )));
        }
        if let Some(bad) = losses.iter().find(|l| !l.is_finite()) {
            return Err(Error::Data(format!("refreshed loss {bad}")));
        }
        for (e, &l) in self.entries.iter_mut().zip(losses) {
            e.loss = l;
        }
        self.sort();
        Ok(())
    }

    /// Recomputes every entry's loss under the current model.
    pub fn refresh_losses(&mut self, model: &ViTModel<T>, stack: &LoraStack<T>) -> Result<()> {
        let Some((x, y)) = self.as_batch() else {
            return Ok(());
        };
        let logits = model.logits(stack, &x)?;
        let losses = per_sample_cross_entropy(logits.data(), model.config().num_classes, &y)?;
        self.set_losses(&losses.into_iter().map(Scalar::as_f64).collect::<Vec<_>>())
    }

    /// Stacked inputs `[n, ..sample_shape]` and labels in buffer order, or
    /// `None` when empty.
    pub fn as_batch(&self) -> Option<(Tensor<T>, Vec<usize>)> {
        if self.entries.is_empty() {
            return None;
        }
        let mut shape = vec![self.entries.len()];
        shape.extend_from_slice(&self.sample_shape);
        let data = self.entries.iter().flat_map(|e| e.input.iter().copied()).collect();
        let labels = self.entries.iter().map(|e| e.label).collect();
        Some((Tensor::new(&shape, data).expect("consistent entries"), labels))
    }

    /// `buffer.{i}.x` holds the sample, `buffer.{i}.meta` is
    /// `[label, loss, sample_id, seq]`.
    pub fn to_tensors(&self, out: &mut TensorMap) {
        for (i, e) in self.entries.iter().enumerate() {
            let x = Tensor::new(&self.sample_shape, e.input.clone()).expect("sample shape");
            out.insert(format!("buffer.{i}.x"), x.cast());
            let meta = vec![e.label as f32, e.loss as f32, e.sample_id as f32, e.seq as f32];
            out.insert(format!("buffer.{i}.meta"), Tensor::new(&[4], meta).expect("4"));
        }
    }

    pub fn from_tensors(map: &mut TensorMap, capacity: usize, sample_shape: &[usize]) -> Result<Self> {
        let mut buf = Self::new(capacity, sample_shape)?;
        let mut i = 0;
        while map.contains_key(&format!("buffer.{i}.x")) {
            let x = take(map, &format!("buffer.{i}.x"))?;
            let meta = take(map, &format!("buffer.{i}.meta"))?;
            let m = meta.data();
            if x.shape() != sample_shape || m.len() != 4 {
                return Err(Error::Format(format!("buffer.{i}: bad shapes")));
            }
            buf.entries.push(BufferEntry {
                input: x.cast::<T>().into_data(),
                label: m[0] as usize,
                loss: m[1] as f64,
                sample_id: m[2] as usize,
                seq: m[3] as u64,
            });
            i += 1;
        }
        buf.next_seq = buf.entries.iter().map(|e| e.seq + 1).max().unwrap_or(0);
        buf.sort();
        buf.entries.truncate(capacity);
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cand(id: usize, loss: f64) -> Candidate<f32> {
        Candidate {
            input: vec![id as f32; 2],
            label: id % 3,
            loss,
            sample_id: id,
        }
    }

    #[test]
    fn keeps_top_k() {
        let mut b = HardBuffer::new(4, &[2]).unwrap();
        let losses = [5.0, 1.0, 3.0, 2.0, 4.0, 0.5];
        b.update(losses.iter().enumerate().map(|(i, &l)| cand(i, l)).collect())
            .unwrap();
        assert_eq!(b.losses(), vec![5.0, 4.0, 3.0, 2.0]);
    }

    #[test]
    fn underfull_and_below_minimum() {
        let mut b = HardBuffer::new(4, &[2]).unwrap();
        b.update(vec![cand(0, 1.0), cand(1, 2.0)]).unwrap();
        assert_eq!(b.len(), 2);
        b.update(vec![cand(2, 3.0), cand(3, 4.0)]).unwrap();
        let before = b.clone();
        b.update(vec![cand(9, 0.1)]).unwrap();
        assert_eq!(b.entries(), before.entries());
    }

    #[test]
    fn ties_prefer_existing_then_earlier() {
        let mut b = HardBuffer::new(2, &[2]).unwrap();
        b.update(vec![cand(0, 1.0)]).unwrap();
        b.update(vec![cand(1, 1.0), cand(2, 1.0)]).unwrap();
        let ids: Vec<_> = b.entries().iter().map(|e| e.sample_id).collect();
        assert_eq!(ids, vec![0, 1]);
    }

    #[test]
    fn nan_is_rejected_without_mutation() {
        let mut b = HardBuffer::new(2, &[2]).unwrap();
        b.update(vec![cand(0, 1.0)]).unwrap();
        assert!(matches!(b.update(vec![cand(1, 2.0), cand(2, f64::NAN)]), Err(Error::Data(_))));
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn as_batch_follows_sorted_order() {
        let mut b = HardBuffer::<f32>::new(4, &[2]).unwrap();
        assert!(b.as_batch().is_none());
        b.update(vec![cand(0, 1.0), cand(1, 3.0), cand(2, 2.0), cand(3, 0.0)]).unwrap();
        let (x, y) = b.as_batch().unwrap();
        assert_eq!(x.shape(), &[4, 2]);
        assert_eq!(x.data(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0, 3.0, 3.0]);
        assert_eq!(y, vec![1, 2, 0, 0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut b = HardBuffer::<f32>::new(3, &[2]).unwrap();
        b.update(vec![cand(4, 1.5), cand(7, 0.25)]).unwrap();
        let mut map = TensorMap::new();
        b.to_tensors(&mut map);
        let back = HardBuffer::<f32>::from_tensors(&mut map, 3, &[2]).unwrap();
        assert_eq!(back, b);
    }

    proptest! {
        #[test]
        fn top_k_matches_sort_oracle(
            k in 1usize..6,
            rounds in prop::collection::vec(prop::collection::vec(0u32..50, 0..8), 1..6)
        ) {
            let mut b = HardBuffer::new(k, &[2]).unwrap();
            let mut seen = Vec::new();
            let mut id = 0;
            for round in rounds {
                let cands: Vec<_> = round.iter().map(|&l| {
                    id += 1;
                    cand(id, l as f64)
                }).collect();
                seen.extend(cands.iter().map(|c| c.loss));
                b.update(cands).unwrap();
                prop_assert!(b.len() <= k);
                let mut sorted = seen.clone();
                sorted.sort_by(|a, b| b.total_cmp(a));
                sorted.truncate(k);
                prop_assert_eq!(b.losses(), sorted.clone());
                let kept_min = b.losses().last().copied().unwrap_or(f64::INFINITY);
                let mut rest = seen.clone();
                for l in b.losses() {
                    let pos = rest.iter().position(|&x| x == l).unwrap();
                    rest.remove(pos);
                }
                prop_assert!(rest.iter().all(|&d| d <= kept_min));
            }
        }
    }
}
