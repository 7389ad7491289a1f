//! Incremental LoRA stacks on the query and value projections.
//!
//! Each attachment site (layer × {Q, V}) holds an ordered list of factor
//! pairs. A pair contributes `B·A` to the site's effective weight, with
//! `A: r×d` (down-projection) and `B: d×r` (up-projection), so the
//! projection of a column input `x` is `(W + Σ B·A)·x`. On the tape inputs
//! are rows, which turns this into `x·Wᵀ + (x·Aᵀ)·Bᵀ`, computed factor-first.
//!
//! At most one pair per site is trainable. Consolidation freezes it and
//! folds `B·A` into the base weight, after which a fresh pair (`B = 0`) can
//! be added without changing any output.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{take, TensorMap};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng};
use crate::tensor::kernels::gemm_nn;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Standard deviation of the `A` factor at creation.
pub const A_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Projection {
    Query,
    Value,
}

impl Projection {
    pub const ALL: [Projection; 2] = [Projection::Query, Projection::Value];

    pub fn tag(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Value => "v",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub layer: usize,
    pub proj: Projection,
}

impl Site {
    pub fn new(layer: usize, proj: Projection) -> Self {
        Self { layer, proj }
    }

    fn slot(self) -> usize {
        self.layer * 2 + self.proj as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Factor {
    A,
    B,
}

impl Factor {
    pub fn tag(self) -> &'static str {
        match self {
            Factor::A => "a",
            Factor::B => "b",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair<T> {
    a: Tensor<T>,
    b: Tensor<T>,
    frozen: bool,
    created_at_step: usize,
}

impl<T: Scalar> LoraPair<T> {
    pub fn a(&self) -> &Tensor<T> {
        &self.a
    }

    pub fn b(&self) -> &Tensor<T> {
        &self.b
    }

    pub fn factor(&self, f: Factor) -> &Tensor<T> {
        match f {
            Factor::A => &self.a,
            Factor::B => &self.b,
        }
    }

    pub fn factor_mut(&mut self, f: Factor) -> &mut Tensor<T> {
        match f {
            Factor::A => &mut self.a,
            Factor::B => &mut self.b,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn created_at_step(&self) -> usize {
        self.created_at_step
    }

    /// Dense `B·A` (d×d).
    pub fn delta(&self) -> Tensor<T> {
        let (d, r) = (self.b.shape()[0], self.rank());
        let mut out = vec![T::zero(); d * d];
        gemm_nn(self.b.data(), self.a.data(), &mut out, d, r, d);
        Tensor::new(&[d, d], out).expect("d×d")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct SiteStack<T> {
    pairs: Vec<LoraPair<T>>,
    merged_count: usize,
}

/// Per-site pair lists for a model with `num_layers` attention blocks of
/// width `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraStack<T = f32> {
    num_layers: usize,
    dim: usize,
    sites: Vec<SiteStack<T>>,
}

/// `num_layers × 2 × (d·r + r·d)`: trainable LoRA parameters with one live
/// pair on each Q and V projection.
pub fn lora_param_count(num_layers: usize, d: usize, r: usize) -> usize {
    num_layers * 2 * (d * r + r * d)
}

impl<T: Scalar> LoraStack<T> {
    pub fn new(num_layers: usize, dim: usize) -> Self {
        Self {
            num_layers,
            dim,
            sites: (0..num_layers * 2).map(|_| SiteStack::default()).collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// All sites in canonical order (layer-major, Q before V).
    pub fn sites(&self) -> impl Iterator<Item = Site> {
        let n = self.num_layers;
        (0..n).flat_map(|l| Projection::ALL.into_iter().map(move |p| Site::new(l, p)))
    }

    fn site(&self, site: Site) -> Result<&SiteStack<T>> {
        if site.layer >= self.num_layers {
            return Err(Error::Index(format!(
                "layer {} of {}",
                site.layer, self.num_layers
            )));
        }
        Ok(&self.sites[site.slot()])
    }

    fn site_mut(&mut self, site: Site) -> Result<&mut SiteStack<T>> {
        self.site(site)?;
        Ok(&mut self.sites[site.slot()])
    }

    pub fn pairs(&self, site: Site) -> &[LoraPair<T>] {
        self.site(site).map(|s| s.pairs.as_slice()).unwrap_or(&[])
    }

    pub fn merged_count(&self, site: Site) -> usize {
        self.site(site).map(|s| s.merged_count).unwrap_or(0)
    }

    pub fn trainable(&self, site: Site) -> Option<&LoraPair<T>> {
        self.pairs(site).iter().find(|p| !p.frozen)
    }

    pub fn trainable_index(&self, site: Site) -> Option<usize> {
        self.pairs(site).iter().position(|p| !p.frozen)
    }

    pub fn trainable_mut(&mut self, site: Site) -> Option<&mut LoraPair<T>> {
        self.site_mut(site)
            .ok()?
            .pairs
            .iter_mut()
            .find(|p| !p.frozen)
    }

    pub fn pair_mut(&mut self, site: Site, index: usize) -> Option<&mut LoraPair<T>> {
        self.site_mut(site).ok()?.pairs.get_mut(index)
    }

    /// Number of pairs still stored across all sites.
    pub fn live_pairs(&self) -> usize {
        self.sites.iter().map(|s| s.pairs.len()).sum()
    }

    /// Appends a trainable pair with `A ~ N(0, 0.02²)` and `B = 0`.
    pub fn add_pair(&mut self, site: Site, rank: usize, seed: u64, step: usize) -> Result<()> {
        let dim = self.dim;
        if rank == 0 || rank * 4 > dim {
            return Err(Error::config(format!(
                "LoRA rank {rank} must satisfy 1 <= r <= d/4 (d = {dim})"
            )));
        }
        let s = self.site_mut(site)?;
        if s.pairs.iter().any(|p| !p.frozen) {
            return Err(Error::state(format!(
                "site {site:?} already has a trainable pair"
            )));
        }
        let mut g = rng(seed);
        let a = Tensor::randn(&[rank, dim], A_INIT_STD, &mut g)?.with_requires_grad(true);
        let b = Tensor::zeros(&[dim, rank])?.with_requires_grad(true);
        s.pairs.push(LoraPair {
            a,
            b,
            frozen: false,
            created_at_step: step,
        });
        Ok(())
    }

    /// [`add_pair`](Self::add_pair) on every site, each with its own
    /// derived seed.
    pub fn add_pair_all(&mut self, rank: usize, seed: u64, step: usize) -> Result<()> {
        let sites: Vec<Site> = self.sites().collect();
        for site in sites {
            let tag = site.slot() as u64;
            self.add_pair(site, rank, derive_seed(seed, tag), step)?;
        }
        Ok(())
    }

    /// Marks the trainable pair at `site` frozen without merging it.
    pub fn freeze(&mut self, site: Site) -> Result<()> {
        let pair = self
            .trainable_mut(site)
            .ok_or_else(|| Error::state(format!("no trainable pair at {site:?}")))?;
        pair.frozen = true;
        pair.a.set_requires_grad(false);
        pair.b.set_requires_grad(false);
        Ok(())
    }

    /// Freezes the trainable pair at `site` and folds every stored pair into
    /// `w` (`w += Σ B·A`), leaving the site empty.
    pub fn freeze_and_merge(&mut self, site: Site, w: &mut Tensor<T>) -> Result<()> {
        let dim = self.dim;
        if w.shape() != [dim, dim] {
            return Err(Error::shape(format!(
                "merge target {:?}, expected [{dim}, {dim}]",
                w.shape()
            )));
        }
        self.freeze(site)?;
        let s = self.site_mut(site)?;
        for pair in s.pairs.drain(..) {
            let r = pair.rank();
            gemm_nn(pair.b.data(), pair.a.data(), w.data_mut(), dim, r, dim);
            s.merged_count += 1;
        }
        Ok(())
    }

    /// Dense `Σ B·A` over all stored pairs at `site`.
    pub fn dense_delta(&self, site: Site) -> Tensor<T> {
        let mut acc = Tensor::zeros(&[self.dim, self.dim]).expect("d×d");
        for p in self.pairs(site) {
            let r = p.rank();
            gemm_nn(p.b.data(), p.a.data(), acc.data_mut(), self.dim, r, self.dim);
        }
        acc
    }

    /// Projects row inputs `x[n×d]` through `W + Σ B·A` on the tape:
    /// `x·Wᵀ + Σ (x·Aᵀ)·Bᵀ`. Every factor leaf is reported to `bind`.
    pub fn apply(
        &self,
        tape: &mut Tape<T>,
        site: Site,
        w: Var,
        x: Var,
        mut bind: impl FnMut(Site, usize, Factor, Var),
    ) -> Result<Var> {
        let mut y = tape.matmul_t(x, w)?;
        for (i, pair) in self.site(site)?.pairs.iter().enumerate() {
            let a = tape.leaf(&pair.a);
            let b = tape.leaf(&pair.b);
            bind(site, i, Factor::A, a);
            bind(site, i, Factor::B, b);
            let down = tape.matmul_t(x, a)?;
            let up = tape.matmul_t(down, b)?;
            y = tape.add(y, up)?;
        }
        Ok(y)
    }

    /// Serializes pairs as `lora.{layer}.{q|v}.{index}.{a|b}` plus
    /// `lora.{layer}.{q|v}.merged` holding the merge count.
    pub fn to_tensors(&self, out: &mut TensorMap) {
        for site in self.sites() {
            let prefix = format!("lora.{}.{}", site.layer, site.proj.tag());
            for (i, p) in self.pairs(site).iter().enumerate() {
                out.insert(format!("{prefix}.{i}.a"), p.a.cast());
                out.insert(format!("{prefix}.{i}.b"), p.b.cast());
            }
            out.insert(
                format!("{prefix}.merged"),
                Tensor::scalar(self.merged_count(site) as f32),
            );
        }
    }

    /// Inverse of [`to_tensors`](Self::to_tensors). Restored pairs are
    /// trainable; frozen pairs never outlive a training step.
    pub fn from_tensors(map: &mut TensorMap, num_layers: usize, dim: usize) -> Result<Self> {
        let mut stack = Self::new(num_layers, dim);
        for site in stack.sites().collect::<Vec<_>>() {
            let prefix = format!("lora.{}.{}", site.layer, site.proj.tag());
            let s = stack.site_mut(site)?;
            s.merged_count = take(map, &format!("{prefix}.merged"))?.data()[0] as usize;
            let mut i = 0;
            while map.contains_key(&format!("{prefix}.{i}.a")) {
                let a = take(map, &format!("{prefix}.{i}.a"))?.cast().with_requires_grad(true);
                let b = take(map, &format!("{prefix}.{i}.b"))?.cast().with_requires_grad(true);
                if a.shape().len() != 2 || a.shape()[1] != dim || b.shape() != [dim, a.shape()[0]] {
                    return Err(Error::Format(format!("{prefix}.{i}: bad factor shapes")));
                }
                s.pairs.push(LoraPair {
                    a,
                    b,
                    frozen: false,
                    created_at_step: 0,
                });
                i += 1;
            }
        }
        Ok(stack)
    }
}
