//! A small vision transformer with LoRA hook points on Q and V.
//!
//! Structure: non-overlapping patch projection, a learned class token and
//! positional table, `num_layers` pre-norm blocks (multi-head self-attention
//! then a GELU MLP), a final layer norm, and a linear head on the class token.
//! Q, K, V and O are separate `d×d` weights; the stack's pairs are added to Q
//! and V only.
//!
//! Checkpoint names: `patch.w`, `patch.b`, `cls`, `pos`,
//! `layer{i}.{ln1.g,ln1.b,wq,bq,wk,bk,wv,bv,wo,bo,ln2.g,ln2.b,mlp.w1,mlp.b1,mlp.w2,mlp.b2}`,
//! `norm.g`, `norm.b`, `head.w`, `head.b`.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{take, TensorMap};
use crate::error::{Error, Result};
use crate::lora::{Factor, LoraStack, Projection, Site};
use crate::rng::rng;
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};

/// Standard deviation of every weight matrix at initialization.
pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            embed_dim: 64,
            num_heads: 4,
            num_layers: 2,
            mlp_ratio: 2.0,
            num_classes: 20,
            seed: 0,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) || self.mlp_hidden() == 0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Patch tokens plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn image_numel(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

const BLOCK_NAMES: [&str; 16] = [
    "ln1.g", "ln1.b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2.g", "ln2.b", "mlp.w1",
    "mlp.b1", "mlp.w2", "mlp.b2",
];

impl<T: Scalar> Block<T> {
    fn params(&self) -> [&Tensor<T>; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn params_mut(&mut self) -> [&mut Tensor<T>; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    /// Base weight of a LoRA site.
    pub fn site_weight_mut(&mut self, proj: Projection) -> &mut Tensor<T> {
        match proj {
            Projection::Query => &mut self.wq,
            Projection::Value => &mut self.wv,
        }
    }
}

/// Identifies a trainable tensor across the model and its LoRA stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    /// Index into [`ViTModel::named_params`] (backbone and head).
    Model(usize),
    Lora {
        site: Site,
        index: usize,
        factor: Factor,
    },
}

/// Tape leaves created during a forward pass and the tensors they mirror.
#[derive(Debug, Default, Clone)]
pub struct Bindings(Vec<(ParamKey, Var)>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: ParamKey, var: Var) {
        self.0.push((key, var));
    }

    pub fn iter(&self) -> impl Iterator<Item = &(ParamKey, Var)> {
        self.0.iter()
    }

    pub fn find(&self, key: ParamKey) -> impl Iterator<Item = Var> + '_ {
        self.0.iter().filter(move |(k, _)| *k == key).map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel<T = f32> {
    config: ViTConfig,
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub cls: Tensor<T>,
    pub pos: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub norm_g: Tensor<T>,
    pub norm_b: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
    backbone_frozen: bool,
}

impl<T: Scalar> ViTModel<T> {
    /// Gaussian init with std 0.02 for weights and embeddings, zeros for
    /// biases, ones for layer-norm gains. The backbone starts frozen.
    pub fn init(config: &ViTConfig) -> Result<Self> {
        config.validate()?;
        let mut g = rng(config.seed);
        let d = config.embed_dim;
        let h = config.mlp_hidden();
        let mut w = |shape: &[usize]| Tensor::<T>::randn(shape, INIT_STD, &mut g);
        let patch_w = w(&[d, config.patch_dim()])?;
        let cls = w(&[d])?;
        let pos = w(&[config.num_tokens(), d])?;
        let mut blocks = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            blocks.push(Block {
                ln1_g: Tensor::ones(&[d])?,
                ln1_b: Tensor::zeros(&[d])?,
                wq: w(&[d, d])?,
                bq: Tensor::zeros(&[d])?,
                wk: w(&[d, d])?,
                bk: Tensor::zeros(&[d])?,
                wv: w(&[d, d])?,
                bv: Tensor::zeros(&[d])?,
                wo: w(&[d, d])?,
                bo: Tensor::zeros(&[d])?,
                ln2_g: Tensor::ones(&[d])?,
                ln2_b: Tensor::zeros(&[d])?,
                w1: w(&[h, d])?,
                b1: Tensor::zeros(&[h])?,
                w2: w(&[d, h])?,
                b2: Tensor::zeros(&[d])?,
            });
        }
        let head_w = w(&[config.num_classes, d])?;
        let mut model = Self {
            config: config.clone(),
            patch_w,
            patch_b: Tensor::zeros(&[d])?,
            cls,
            pos,
            blocks,
            norm_g: Tensor::ones(&[d])?,
            norm_b: Tensor::zeros(&[d])?,
            head_w,
            head_b: Tensor::zeros(&[config.num_classes])?,
            backbone_frozen: true,
        };
        model.head_w.set_requires_grad(true);
        model.head_b.set_requires_grad(true);
        model.set_backbone_frozen(true);
        Ok(model)
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn backbone_frozen(&self) -> bool {
        self.backbone_frozen
    }

    pub fn set_backbone_frozen(&mut self, frozen: bool) {
        self.backbone_frozen = frozen;
        let n = self.num_params();
        for (i, (_, t)) in self.named_params_mut().into_iter().enumerate() {
            if i < n - 2 {
                t.set_requires_grad(!frozen);
            }
        }
    }

    fn num_params(&self) -> usize {
        8 + 16 * self.blocks.len()
    }

    /// Index of the first head tensor in [`named_params`](Self::named_params).
    pub fn head_index(&self) -> usize {
        self.num_params() - 2
    }

    /// All model tensors in a fixed order; the head (`head.w`, `head.b`)
    /// comes last.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("patch.w".to_string(), &self.patch_w),
            ("patch.b".to_string(), &self.patch_b),
            ("cls".to_string(), &self.cls),
            ("pos".to_string(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_NAMES.iter().zip(b.params()) {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("norm.g".to_string(), &self.norm_g));
        out.push(("norm.b".to_string(), &self.norm_b));
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("patch.w".to_string(), &mut self.patch_w),
            ("patch.b".to_string(), &mut self.patch_b),
            ("cls".to_string(), &mut self.cls),
            ("pos".to_string(), &mut self.pos),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in BLOCK_NAMES.iter().zip(b.params_mut()) {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("norm.g".to_string(), &mut self.norm_g));
        out.push(("norm.b".to_string(), &mut self.norm_b));
        out.push(("head.w".to_string(), &mut self.head_w));
        out.push(("head.b".to_string(), &mut self.head_b));
        out
    }

    pub fn param(&self, index: usize) -> Option<&Tensor<T>> {
        self.named_params().into_iter().nth(index).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, index: usize) -> Option<&mut Tensor<T>> {
        self.named_params_mut().into_iter().nth(index).map(|(_, t)| t)
    }

    pub fn reset_grads(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.reset_grad();
        }
    }

    /// Splits `[B, C, H, W]` images into `[B·P, C·p·p]` patch rows, patches
    /// in row-major grid order, each flattened channel-major.
    pub fn patchify(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != c.channels || s[2] != c.image_size || s[3] != c.image_size {
            return Err(Error::shape(format!(
                "images {s:?}, expected [batch, {}, {}, {}]",
                c.channels, c.image_size, c.image_size
            )));
        }
        let (b, p, side) = (s[0], c.patch_size, c.image_size / c.patch_size);
        let img = images.data();
        let mut out = Vec::with_capacity(images.numel());
        for n in 0..b {
            for py in 0..side {
                for px in 0..side {
                    for ch in 0..c.channels {
                        for y in 0..p {
                            let row = ((n * c.channels + ch) * c.image_size + py * p + y)
                                * c.image_size
                                + px * p;
                            out.extend_from_slice(&img[row..row + p]);
                        }
                    }
                }
            }
        }
        Tensor::new(&[b * c.num_patches(), c.patch_dim()], out)
    }

    /// Logits `[batch, num_classes]`. Every leaf created for a model tensor
    /// or LoRA factor is recorded in `bindings`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        stack: &LoraStack<T>,
        images: &Tensor<T>,
        bindings: &mut Bindings,
    ) -> Result<Var> {
        let c = &self.config;
        if stack.num_layers() != c.num_layers || stack.dim() != c.embed_dim {
            return Err(Error::Contract(format!(
                "LoRA stack for {} layers of width {} on a model with {} layers of width {}",
                stack.num_layers(),
                stack.dim(),
                c.num_layers,
                c.embed_dim
            )));
        }
        let patches = self.patchify(images)?;
        let batch = images.shape()[0];
        let (d, t, heads, hd) = (c.embed_dim, c.num_tokens(), c.num_heads, c.head_dim());

        let mut leaves = Vec::with_capacity(self.num_params());
        for (i, (_, p)) in self.named_params().into_iter().enumerate() {
            let v = tape.leaf(p);
            bindings.push(ParamKey::Model(i), v);
            leaves.push(v);
        }
        let leaf = |name_idx: usize| leaves[name_idx];
        let block_leaf = |layer: usize, j: usize| leaves[4 + 16 * layer + j];

        let x = tape.leaf(&patches);
        let x = tape.matmul_t(x, leaf(0))?;
        let x = tape.add_broadcast(x, leaf(1))?;
        let x = tape.reshape(x, &[batch, c.num_patches(), d])?;
        let x = tape.prepend_token(x, leaf(2))?;
        let mut x = tape.add_broadcast(x, leaf(3))?;

        let scale = T::one() / T::from_f64(hd as f64).sqrt();
        let eps = T::from_f64(LN_EPS);
        for layer in 0..c.num_layers {
            let bl = |j| block_leaf(layer, j);
            let h = tape.layer_norm(x, bl(0), bl(1), eps)?;
            let h = tape.reshape(h, &[batch * t, d])?;
            let mut bind = |site: Site, index, factor, var| {
                bindings.push(ParamKey::Lora { site, index, factor }, var)
            };
            let q = stack.apply(tape, Site::new(layer, Projection::Query), bl(2), h, &mut bind)?;
            let q = tape.add_broadcast(q, bl(3))?;
            let k = tape.matmul_t(h, bl(4))?;
            let k = tape.add_broadcast(k, bl(5))?;
            let v = stack.apply(tape, Site::new(layer, Projection::Value), bl(6), h, &mut bind)?;
            let v = tape.add_broadcast(v, bl(7))?;

            let split = |tape: &mut Tape<T>, z: Var| -> Result<Var> {
                let z = tape.reshape(z, &[batch, t, heads, hd])?;
                let z = tape.permute(z, &[0, 2, 1, 3])?;
                tape.reshape(z, &[batch * heads, t, hd])
            };
            let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
            let scores = tape.bmm_t(q, k)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, 2)?;
            let ctx = tape.bmm(attn, v)?;
            let ctx = tape.reshape(ctx, &[batch, heads, t, hd])?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[batch * t, d])?;
            let o = tape.matmul_t(ctx, bl(8))?;
            let o = tape.add_broadcast(o, bl(9))?;
            let o = tape.reshape(o, &[batch, t, d])?;
            x = tape.add(x, o)?;

            let h = tape.layer_norm(x, bl(10), bl(11), eps)?;
            let h = tape.reshape(h, &[batch * t, d])?;
            let m = tape.matmul_t(h, bl(12))?;
            let m = tape.add_broadcast(m, bl(13))?;
            let m = tape.gelu(m);
            let m = tape.matmul_t(m, bl(14))?;
            let m = tape.add_broadcast(m, bl(15))?;
            let m = tape.reshape(m, &[batch, t, d])?;
            x = tape.add(x, m)?;
        }
        let n = self.head_index();
        let x = tape.layer_norm(x, leaves[n - 2], leaves[n - 1], eps)?;
        let cls = tape.select_token(x, 0)?;
        let logits = tape.matmul_t(cls, leaves[n])?;
        tape.add_broadcast(logits, leaves[n + 1])
    }

    /// Logits as a plain tensor, no gradients kept.
    pub fn logits(&self, stack: &LoraStack<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut bindings = Bindings::new();
        let out = self.forward(&mut tape, stack, images, &mut bindings)?;
        Ok(tape.to_tensor(out))
    }

    pub fn to_tensors(&self, out: &mut TensorMap)
    where
        T: Scalar,
    {
        for (name, t) in self.named_params() {
            out.insert(name, t.cast());
        }
    }

    /// Rebuilds a model from checkpoint tensors, consuming the entries it
    /// uses.
    pub fn from_tensors(config: &ViTConfig, map: &mut TensorMap) -> Result<Self> {
        let mut model = Self::init(config)?;
        for (name, t) in model.named_params_mut() {
            let loaded = take(map, &name)?;
            if loaded.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "{name}: shape {:?}, expected {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(loaded.cast::<T>().data());
        }
        Ok(model)
    }
}

/// Ordered list of tensors that receive updates: backbone tensors when the
/// backbone is trainable, then the head, then every trainable LoRA factor in
/// site order.
pub fn trainable_parameters<T: Scalar>(model: &ViTModel<T>, stack: &LoraStack<T>) -> Vec<ParamKey> {
    let mut keys = Vec::new();
    let head = model.head_index();
    if !model.backbone_frozen() {
        keys.extend((0..head).map(ParamKey::Model));
    }
    keys.push(ParamKey::Model(head));
    keys.push(ParamKey::Model(head + 1));
    for site in stack.sites() {
        if let Some(index) = stack.trainable_index(site) {
            for factor in [Factor::A, Factor::B] {
                keys.push(ParamKey::Lora { site, index, factor });
            }
        }
    }
    keys
}

pub fn param_numel<T: Scalar>(model: &ViTModel<T>, stack: &LoraStack<T>, key: ParamKey) -> usize {
    param_ref(model, stack, key).map_or(0, |t| t.numel())
}

pub fn param_ref<'a, T: Scalar>(
    model: &'a ViTModel<T>,
    stack: &'a LoraStack<T>,
    key: ParamKey,
) -> Option<&'a Tensor<T>> {
    match key {
        ParamKey::Model(i) => model.param(i),
        ParamKey::Lora { site, index, factor } => {
            stack.pairs(site).get(index).map(|p| p.factor(factor))
        }
    }
}

pub fn param_mut<'a, T: Scalar>(
    model: &'a mut ViTModel<T>,
    stack: &'a mut LoraStack<T>,
    key: ParamKey,
) -> Option<&'a mut Tensor<T>> {
    match key {
        ParamKey::Model(i) => model.param_mut(i),
        ParamKey::Lora { site, index, factor } => {
            stack.pair_mut(site, index).map(|p| p.factor_mut(factor))
        }
    }
}

/// Folds tape gradients into every bound tensor that requires grad.
pub fn accumulate_grads<T: Scalar>(
    model: &mut ViTModel<T>,
    stack: &mut LoraStack<T>,
    grads: &Gradients<T>,
    bindings: &Bindings,
) -> Result<()> {
    for &(key, var) in bindings.iter() {
        if let Some(t) = param_mut(model, stack, key) {
            grads.accumulate_into(var, t)?;
        }
    }
    Ok(())
}

pub fn reset_all_grads<T: Scalar>(model: &mut ViTModel<T>, stack: &mut LoraStack<T>) {
    model.reset_grads();
    for site in stack.sites().collect::<Vec<_>>() {
        let n = stack.pairs(site).len();
        for i in 0..n {
            if let Some(p) = stack.pair_mut(site, i) {
                p.factor_mut(Factor::A).reset_grad();
                p.factor_mut(Factor::B).reset_grad();
            }
        }
    }
}
