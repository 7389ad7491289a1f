//! Synthetic image data and the three stream scenarios: disjoint
//! class-incremental, Si-blurry and domain-incremental.
//!
//! Every sample has a stable id (its index in the dataset). Streams are
//! single-pass: each training id is emitted exactly once. The task id on a
//! [`Batch`] is bookkeeping for evaluation; learners only get a
//! [`LearnerBatch`], which does not carry it.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, take, TensorMap};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng, Rng};
use crate::tensor::Tensor;

pub const NOISE_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub class_count: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            class_count: 20,
            per_class: 200,
            image_size: 16,
            seed: 0,
        }
    }
}

/// Grayscale images in `[0, 1]`, stored class-major: sample `id` belongs to
/// class `id / per_class`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: DataSpec,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_numel(&self) -> usize {
        self.spec.image_size * self.spec.image_size
    }

    pub fn image(&self, id: usize) -> &[f32] {
        let n = self.image_numel();
        &self.images.data()[id * n..(id + 1) * n]
    }

    pub fn class_ids(&self, class: usize) -> std::ops::Range<usize> {
        class * self.spec.per_class..(class + 1) * self.spec.per_class
    }

    /// Stacks the given samples into `[n, 1, H, W]`.
    pub fn gather(&self, ids: &[usize]) -> Tensor<f32> {
        let s = self.spec.image_size;
        let mut data = Vec::with_capacity(ids.len() * s * s);
        for &id in ids {
            data.extend_from_slice(self.image(id));
        }
        Tensor::new(&[ids.len(), 1, s, s], data).expect("consistent sizes")
    }
}

#[derive(Clone, Copy, Debug)]
struct ClassRecipe {
    cx: f64,
    cy: f64,
    sigma: f64,
    freq: f64,
    angle: f64,
    phase: f64,
}

impl ClassRecipe {
    fn draw(r: &mut Rng, size: f64) -> Self {
        Self {
            cx: r.random_range(0.2..0.8) * size,
            cy: r.random_range(0.2..0.8) * size,
            sigma: r.random_range(0.12..0.22) * size,
            freq: r.random_range(1.0..3.0),
            angle: r.random_range(0.0..PI),
            phase: r.random_range(0.0..2.0 * PI),
        }
    }

    fn render(&self, r: &mut Rng, size: usize, noise: &Normal<f64>, out: &mut Vec<f32>) {
        let s = size as f64;
        let jitter = 0.05 * s;
        let cx = self.cx + r.random_range(-jitter..jitter);
        let cy = self.cy + r.random_range(-jitter..jitter);
        let phase = self.phase + r.random_range(-0.3..0.3);
        let (sin, cos) = self.angle.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let d2 = (fx - cx).powi(2) + (fy - cy).powi(2);
                let blob = (-d2 / (2.0 * self.sigma * self.sigma)).exp();
                let t = (fx * cos + fy * sin) / s;
                let grating = 0.5 + 0.5 * (2.0 * PI * self.freq * t + phase).sin();
                let v = 0.6 * blob + 0.4 * grating + noise.sample(r);
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
}

/// Each class is a Gaussian blob at a class-specific position plus an
/// oriented sinusoidal grating, with small per-sample jitter and pixel
/// noise (σ = 0.1), clamped to `[0, 1]`.
pub fn gen_synthetic(spec: &DataSpec) -> Result<SyntheticDataset> {
    if spec.class_count == 0 || spec.per_class == 0 || spec.image_size < 2 {
        return Err(Error::config(format!(
            "dataset sizes must be positive (classes {}, per_class {}, image_size {})",
            spec.class_count, spec.per_class, spec.image_size
        )));
    }
    let size = spec.image_size;
    let noise = Normal::new(0.0, NOISE_STD).expect("finite std");
    let mut data = Vec::with_capacity(spec.class_count * spec.per_class * size * size);
    let mut labels = Vec::with_capacity(spec.class_count * spec.per_class);
    for c in 0..spec.class_count {
        let mut r = rng(derive_seed(spec.seed, c as u64));
        let recipe = ClassRecipe::draw(&mut r, size as f64);
        for _ in 0..spec.per_class {
            recipe.render(&mut r, size, &noise, &mut data);
            labels.push(c);
        }
    }
    let images = Tensor::new(&[labels.len(), 1, size, size], data)?;
    Ok(SyntheticDataset {
        spec: spec.clone(),
        images,
        labels,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    #[default]
    Disjoint,
    Siblurry,
    Domain,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Disjoint => "disjoint",
            Scenario::Siblurry => "siblurry",
            Scenario::Domain => "domain",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint" => Ok(Self::Disjoint),
            "siblurry" => Ok(Self::Siblurry),
            "domain" => Ok(Self::Domain),
            other => Err(Error::config(format!(
                "scenario {other:?} (expected disjoint|siblurry|domain)"
            ))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSpec {
    pub scenario: Scenario,
    /// Tasks, or training domains for the domain scenario.
    pub num_tasks: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of each class held out for evaluation.
    pub test_frac: f64,
    pub disjoint_frac: f64,
    pub blurry_frac: f64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            scenario: Scenario::Disjoint,
            num_tasks: 5,
            batch_size: 64,
            seed: 0,
            test_frac: 0.2,
            disjoint_frac: 0.5,
            blurry_frac: 0.1,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(Error::config("num_tasks must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.test_frac) {
            return Err(Error::config(format!("test_frac {} outside [0, 1)", self.test_frac)));
        }
        for (name, v) in [("disjoint_frac", self.disjoint_frac), ("blurry_frac", self.blurry_frac)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.disjoint_frac + self.blurry_frac > 1.0 {
            return Err(Error::config("disjoint_frac + blurry_frac exceeds 1"));
        }
        if self.scenario == Scenario::Domain && self.num_tasks < 2 {
            return Err(Error::config("domain scenario needs >= 2 domains"));
        }
        Ok(())
    }
}

/// Rotation about the image centre, additive brightness and Gaussian
/// noise, applied in that order. The output is not clamped, so the
/// brightness shift is exact.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainTransform {
    pub angle_deg: f64,
    pub brightness: f64,
    pub noise_std: f64,
}

impl DomainTransform {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    fn draw(r: &mut Rng) -> Self {
        Self {
            angle_deg: r.random_range(-60.0..60.0),
            brightness: r.random_range(-0.3..0.3),
            noise_std: r.random_range(0.0..0.1),
        }
    }

    /// Transforms one `size × size` image. Rotation samples the nearest
    /// source pixel; sources outside the frame read as 0.
    pub fn apply(&self, img: &[f32], size: usize, r: &mut Rng) -> Vec<f32> {
        if self.is_identity() {
            return img.to_vec();
        }
        let (sin, cos) = self.angle_deg.to_radians().sin_cos();
        let c = size as f64 / 2.0;
        let noise = (self.noise_std > 0.0).then(|| Normal::new(0.0, self.noise_std).expect("finite"));
        let mut out = Vec::with_capacity(img.len());
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
                let sx = (cos * dx + sin * dy + c).floor();
                let sy = (-sin * dx + cos * dy + c).floor();
                let mut v = if (0.0..size as f64).contains(&sx) && (0.0..size as f64).contains(&sy) {
                    img[sy as usize * size + sx as usize] as f64
                } else {
                    0.0
                };
                v += self.brightness;
                if let Some(n) = &noise {
                    v += n.sample(r);
                }
                out.push(v as f32);
            }
        }
        out
    }
}

/// One stream batch. `hidden_task_id` is for evaluation bookkeeping and is
/// not part of [`LearnerBatch`].
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    inputs: Tensor<f32>,
    labels: Vec<usize>,
    sample_ids: Vec<usize>,
    hidden_task_id: usize,
}

/// What a learner is allowed to see.
#[derive(Clone, Copy, Debug)]
pub struct LearnerBatch<'a> {
    pub inputs: &'a Tensor<f32>,
    pub labels: &'a [usize],
    pub sample_ids: &'a [usize],
}

impl Batch {
    pub fn new(inputs: Tensor<f32>, labels: Vec<usize>, sample_ids: Vec<usize>, hidden_task_id: usize) -> Result<Self> {
        if inputs.shape().first() != Some(&labels.len()) || labels.len() != sample_ids.len() || labels.is_empty() {
            return Err(Error::shape(format!(
                "batch inputs {:?}, {} labels, {} ids",
                inputs.shape(),
                labels.len(),
                sample_ids.len()
            )));
        }
        Ok(Self {
            inputs,
            labels,
            sample_ids,
            hidden_task_id,
        })
    }

    pub fn learner_view(&self) -> LearnerBatch<'_> {
        LearnerBatch {
            inputs: &self.inputs,
            labels: &self.labels,
            sample_ids: &self.sample_ids,
        }
    }

    pub fn hidden_task_id(&self) -> usize {
        self.hidden_task_id
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_ids(&self) -> &[usize] {
        &self.sample_ids
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub inputs: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Concatenation of several sets.
    pub fn concat(sets: &[&EvalSet]) -> Result<EvalSet> {
        let first = sets.first().ok_or_else(|| Error::config("no eval sets to join"))?;
        let mut shape = first.inputs.shape().to_vec();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for s in sets {
            if s.inputs.shape()[1..] != shape[1..] {
                return Err(Error::shape("eval sets with different image shapes"));
            }
            data.extend_from_slice(s.inputs.data());
            labels.extend_from_slice(&s.labels);
        }
        shape[0] = labels.len();
        Ok(EvalSet {
            inputs: Tensor::new(&shape, data)?,
            labels,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub spec: StreamSpec,
    pub data: DataSpec,
    /// Classes present in each task.
    pub task_classes: Vec<Vec<usize>>,
    /// Per-domain transforms (domain scenario only).
    pub transforms: Vec<DomainTransform>,
    /// Transforms of the held-out test domains (domain scenario only).
    pub test_transforms: Vec<DomainTransform>,
    pub batches: Vec<Batch>,
    /// Held-out data for each task, in task order.
    pub eval_sets: Vec<EvalSet>,
    /// Held-out test domains (domain scenario only).
    pub holdout: Option<EvalSet>,
}

impl Stream {
    pub fn num_tasks(&self) -> usize {
        self.eval_sets.len()
    }

    pub fn num_samples(&self) -> usize {
        self.batches.iter().map(Batch::len).sum()
    }
}

/// Splits every class into (train, test) ids after a seeded shuffle.
fn split_ids(ds: &SyntheticDataset, spec: &StreamSpec) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let n_test = (spec.test_frac * ds.spec.per_class as f64).floor() as usize;
    let mut r = rng(derive_seed(spec.seed, 0x5EED));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..ds.spec.class_count {
        let mut ids: Vec<usize> = ds.class_ids(c).collect();
        ids.shuffle(&mut r);
        let tr = ids.split_off(n_test);
        test.push(ids);
        train.push(tr);
    }
    (train, test)
}

fn chunk_task(
    ds: &SyntheticDataset,
    mut ids: Vec<usize>,
    task: usize,
    batch_size: usize,
    r: &mut Rng,
    out: &mut Vec<Batch>,
) -> Result<()> {
    ids.shuffle(r);
    for chunk in ids.chunks(batch_size) {
        let labels = chunk.iter().map(|&i| ds.labels[i]).collect();
        out.push(Batch::new(ds.gather(chunk), labels, chunk.to_vec(), task)?);
    }
    Ok(())
}

fn eval_for_classes(ds: &SyntheticDataset, test: &[Vec<usize>], classes: &[usize]) -> EvalSet {
    let ids: Vec<usize> = classes.iter().flat_map(|&c| test[c].iter().copied()).collect();
    EvalSet {
        inputs: ds.gather(&ids),
        labels: ids.iter().map(|&i| ds.labels[i]).collect(),
    }
}

fn check_sizes(ds: &SyntheticDataset, spec: &StreamSpec) -> Result<()> {
    spec.validate()?;
    if ds.spec.per_class < 2 * spec.batch_size {
        return Err(Error::config(format!(
            "per_class {} below 2 x batch_size {}",
            ds.spec.per_class, spec.batch_size
        )));
    }
    Ok(())
}

/// Classes are shuffled and cut into `num_tasks` equal groups.
pub fn make_disjoint_stream(ds: &SyntheticDataset, spec: &StreamSpec) -> Result<Stream> {
    check_sizes(ds, spec)?;
    let t = spec.num_tasks;
    if ds.spec.class_count % t != 0 {
        return Err(Error::config(format!(
            "{} classes not divisible into {t} tasks",
            ds.spec.class_count
        )));
    }
    let (train, test) = split_ids(ds, spec);
    let mut classes: Vec<usize> = (0..ds.spec.class_count).collect();
    classes.shuffle(&mut rng(derive_seed(spec.seed, 0xC1A5)));
    let task_classes: Vec<Vec<usize>> = classes.chunks(ds.spec.class_count / t).map(<[usize]>::to_vec).collect();
    let mut r = rng(derive_seed(spec.seed, 0xBA7C));
    let mut batches = Vec::new();
    for (task, cls) in task_classes.iter().enumerate() {
        let ids = cls.iter().flat_map(|&c| train[c].iter().copied()).collect();
        chunk_task(ds, ids, task, spec.batch_size, &mut r, &mut batches)?;
    }
    let eval_sets = task_classes.iter().map(|c| eval_for_classes(ds, &test, c)).collect();
    Ok(Stream {
        spec: spec.clone(),
        data: ds.spec.clone(),
        task_classes,
        transforms: Vec::new(),
        test_transforms: Vec::new(),
        batches,
        eval_sets,
        holdout: None,
    })
}

/// Draws task proportions from Dirichlet(1, …, 1) via normalized Exp(1)
/// variates, then assigns each sample to a task from those proportions.
fn dirichlet_assign(n: usize, tasks: usize, r: &mut Rng) -> Vec<usize> {
    let w: Vec<f64> = (0..tasks).map(|_| Exp1.sample(r)).collect();
    let total: f64 = w.iter().sum();
    (0..n)
        .map(|_| {
            let mut u = r.random::<f64>() * total;
            for (i, &wi) in w.iter().enumerate() {
                if u < wi {
                    return i;
                }
                u -= wi;
            }
            tasks - 1
        })
        .collect()
}

/// A share of classes ("disjoint") each live in exactly one task; another
/// share ("blurry") have their samples spread across several tasks; the
/// remaining classes are left out.
pub fn make_siblurry_stream(ds: &SyntheticDataset, spec: &StreamSpec) -> Result<Stream> {
    check_sizes(ds, spec)?;
    let t = spec.num_tasks;
    let c = ds.spec.class_count;
    let n_disjoint = (spec.disjoint_frac * c as f64).floor() as usize;
    let n_blurry = (spec.blurry_frac * c as f64).floor() as usize;
    if n_blurry > 0 && t < 2 {
        return Err(Error::config("blurry classes need >= 2 tasks"));
    }
    let (train, test) = split_ids(ds, spec);
    let mut classes: Vec<usize> = (0..c).collect();
    classes.shuffle(&mut rng(derive_seed(spec.seed, 0xC1A5)));
    let mut task_ids: Vec<Vec<usize>> = vec![Vec::new(); t];
    let mut task_classes: Vec<Vec<usize>> = vec![Vec::new(); t];
    for (i, &cls) in classes[..n_disjoint].iter().enumerate() {
        task_ids[i % t].extend_from_slice(&train[cls]);
        task_classes[i % t].push(cls);
    }
    let mut r = rng(derive_seed(spec.seed, 0xB1A2));
    for &cls in &classes[n_disjoint..n_disjoint + n_blurry] {
        let ids = &train[cls];
        let mut assign = dirichlet_assign(ids.len(), t, &mut r);
        let spans = |a: &[usize]| a.iter().any(|&x| x != a[0]);
        for _ in 0..64 {
            if spans(&assign) {
                break;
            }
            assign = dirichlet_assign(ids.len(), t, &mut r);
        }
        if !spans(&assign) && ids.len() > 1 {
            assign[0] = (assign[0] + 1) % t;
        }
        for (&id, &task) in ids.iter().zip(&assign) {
            task_ids[task].push(id);
        }
        let mut seen = vec![false; t];
        assign.iter().for_each(|&a| seen[a] = true);
        for (task, present) in seen.into_iter().enumerate() {
            if present {
                task_classes[task].push(cls);
            }
        }
    }
    if let Some(empty) = task_ids.iter().position(Vec::is_empty) {
        return Err(Error::config(format!(
            "task {empty} receives no samples ({n_disjoint} disjoint and {n_blurry} blurry classes over {t} tasks)"
        )));
    }
    let mut r = rng(derive_seed(spec.seed, 0xBA7C));
    let mut batches = Vec::new();
    for (task, ids) in task_ids.into_iter().enumerate() {
        chunk_task(ds, ids, task, spec.batch_size, &mut r, &mut batches)?;
    }
    for tc in &mut task_classes {
        tc.sort_unstable();
    }
    let eval_sets = task_classes.iter().map(|c| eval_for_classes(ds, &test, c)).collect();
    Ok(Stream {
        spec: spec.clone(),
        data: ds.spec.clone(),
        task_classes,
        transforms: Vec::new(),
        test_transforms: Vec::new(),
        batches,
        eval_sets,
        holdout: None,
    })
}

/// Number of held-out test domains for `num_domains` training domains
/// (three test domains per eight training domains, rounded up).
pub fn num_test_domains(num_domains: usize) -> usize {
    (3 * num_domains).div_ceil(8)
}

fn transform_set(ds: &SyntheticDataset, ids: &[usize], tf: &DomainTransform, r: &mut Rng) -> EvalSet {
    let s = ds.spec.image_size;
    let mut data = Vec::with_capacity(ids.len() * s * s);
    for &id in ids {
        data.extend(tf.apply(ds.image(id), s, r));
    }
    EvalSet {
        inputs: Tensor::new(&[ids.len(), 1, s, s], data).expect("consistent sizes"),
        labels: ids.iter().map(|&i| ds.labels[i]).collect(),
    }
}

/// Every class appears in every domain; domain 0 is the identity. The
/// training split is dealt round-robin (per class) over the domains, and
/// the test split over the held-out test domains.
pub fn make_domain_stream(ds: &SyntheticDataset, spec: &StreamSpec) -> Result<Stream> {
    check_sizes(ds, spec)?;
    let d = spec.num_tasks;
    let (train, test) = split_ids(ds, spec);
    let mut tr = rng(derive_seed(spec.seed, 0xD0));
    let transforms: Vec<DomainTransform> = (0..d)
        .map(|i| if i == 0 { DomainTransform::default() } else { DomainTransform::draw(&mut tr) })
        .collect();
    let test_transforms: Vec<DomainTransform> =
        (0..num_test_domains(d)).map(|_| DomainTransform::draw(&mut tr)).collect();
    let mut domain_ids: Vec<Vec<usize>> = vec![Vec::new(); d];
    for ids in &train {
        for (k, &id) in ids.iter().enumerate() {
            domain_ids[k % d].push(id);
        }
    }
    let all: Vec<usize> = (0..ds.spec.class_count).collect();
    let mut r = rng(derive_seed(spec.seed, 0xBA7C));
    let mut batches = Vec::new();
    let mut eval_sets = Vec::new();
    let test_ids: Vec<usize> = test.iter().flatten().copied().collect();
    for (domain, mut ids) in domain_ids.into_iter().enumerate() {
        ids.shuffle(&mut r);
        let tf = transforms[domain];
        for chunk in ids.chunks(spec.batch_size) {
            let set = transform_set(ds, chunk, &tf, &mut r);
            batches.push(Batch::new(set.inputs, set.labels, chunk.to_vec(), domain)?);
        }
        eval_sets.push(transform_set(ds, &test_ids, &tf, &mut r));
    }
    let mut parts = Vec::new();
    let nt = test_transforms.len();
    for (j, tf) in test_transforms.iter().enumerate() {
        let ids: Vec<usize> = test
            .iter()
            .flat_map(|ids| ids.iter().enumerate().filter(|(k, _)| k % nt == j).map(|(_, &id)| id))
            .collect();
        parts.push(transform_set(ds, &ids, tf, &mut r));
    }
    let holdout = EvalSet::concat(&parts.iter().collect::<Vec<_>>())?;
    Ok(Stream {
        spec: spec.clone(),
        data: ds.spec.clone(),
        task_classes: vec![all; d],
        transforms,
        test_transforms,
        batches,
        eval_sets,
        holdout: Some(holdout),
    })
}

pub fn make_stream(ds: &SyntheticDataset, spec: &StreamSpec) -> Result<Stream> {
    match spec.scenario {
        Scenario::Disjoint => make_disjoint_stream(ds, spec),
        Scenario::Siblurry => make_siblurry_stream(ds, spec),
        Scenario::Domain => make_domain_stream(ds, spec),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    stream: StreamSpec,
    data: DataSpec,
    task_classes: Vec<Vec<usize>>,
    transforms: Vec<DomainTransform>,
    test_transforms: Vec<DomainTransform>,
    num_batches: usize,
    num_samples: usize,
    num_eval_sets: usize,
    holdout: bool,
}

const MANIFEST_FORMAT: &str = "olora-stream-1";
/// Integer fields travel as f32, which is exact below this bound.
const MAX_EXACT_ID: usize = 1 << 24;

fn ints_to_tensor(xs: &[usize]) -> Result<Tensor<f32>> {
    if let Some(&x) = xs.iter().find(|&&x| x >= MAX_EXACT_ID) {
        return Err(Error::Format(format!("integer {x} too large for export")));
    }
    Tensor::new(&[xs.len()], xs.iter().map(|&x| x as f32).collect())
}

fn tensor_to_ints(t: &Tensor<f32>) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("non-integer index {v}")))
            }
        })
        .collect()
}

fn eval_path(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join("eval").join(format!("eval_{i:03}.olra"))
}

fn batch_path(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join("batches").join(format!("batch_{i:05}.olra"))
}

fn save_eval(path: &Path, set: &EvalSet) -> Result<()> {
    let mut m = TensorMap::new();
    m.insert("x".into(), set.inputs.clone());
    m.insert("y".into(), ints_to_tensor(&set.labels)?);
    checkpoint::save(path, &m)
}

fn load_eval(path: &Path) -> Result<EvalSet> {
    let mut m = checkpoint::load(path)?;
    let inputs = take(&mut m, "x")?;
    let labels = tensor_to_ints(&take(&mut m, "y")?)?;
    if inputs.shape().first() != Some(&labels.len()) {
        return Err(Error::Format(format!("{}: inputs/labels mismatch", path.display())));
    }
    Ok(EvalSet { inputs, labels })
}

/// Writes `manifest.json`, `batches/batch_NNNNN.olra` and
/// `eval/eval_NNN.olra` (the held-out test domains, if any, go last).
pub fn export_stream(stream: &Stream, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("batches"))?;
    fs::create_dir_all(dir.join("eval"))?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        stream: stream.spec.clone(),
        data: stream.data.clone(),
        task_classes: stream.task_classes.clone(),
        transforms: stream.transforms.clone(),
        test_transforms: stream.test_transforms.clone(),
        num_batches: stream.batches.len(),
        num_samples: stream.num_samples(),
        num_eval_sets: stream.eval_sets.len(),
        holdout: stream.holdout.is_some(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    for (i, b) in stream.batches.iter().enumerate() {
        let mut m = TensorMap::new();
        m.insert("x".into(), b.inputs.clone());
        m.insert("y".into(), ints_to_tensor(&b.labels)?);
        m.insert("ids".into(), ints_to_tensor(&b.sample_ids)?);
        m.insert("task".into(), ints_to_tensor(&[b.hidden_task_id])?);
        checkpoint::save(&batch_path(dir, i), &m)?;
    }
    for (i, e) in stream.eval_sets.iter().enumerate() {
        save_eval(&eval_path(dir, i), e)?;
    }
    if let Some(h) = &stream.holdout {
        save_eval(&eval_path(dir, stream.eval_sets.len()), h)?;
    }
    Ok(())
}

pub fn import_stream(dir: &Path) -> Result<Stream> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if m.format != MANIFEST_FORMAT {
        return Err(Error::Format(format!("unknown stream format {:?}", m.format)));
    }
    let mut batches = Vec::with_capacity(m.num_batches);
    for i in 0..m.num_batches {
        let path = batch_path(dir, i);
        let mut t = checkpoint::load(&path)?;
        let task = tensor_to_ints(&take(&mut t, "task")?)?;
        let [task] = task[..] else {
            return Err(Error::Format(format!("{}: bad task field", path.display())));
        };
        batches.push(Batch::new(
            take(&mut t, "x")?,
            tensor_to_ints(&take(&mut t, "y")?)?,
            tensor_to_ints(&take(&mut t, "ids")?)?,
            task,
        )?);
    }
    let eval_sets = (0..m.num_eval_sets)
        .map(|i| load_eval(&eval_path(dir, i)))
        .collect::<Result<Vec<_>>>()?;
    let holdout = if m.holdout {
        Some(load_eval(&eval_path(dir, m.num_eval_sets))?)
    } else {
        None
    };
    let stream = Stream {
        spec: m.stream,
        data: m.data,
        task_classes: m.task_classes,
        transforms: m.transforms,
        test_transforms: m.test_transforms,
        batches,
        eval_sets,
        holdout,
    };
    if stream.num_samples() != m.num_samples {
        return Err(Error::Format("sample count differs from manifest".into()));
    }
    Ok(stream)
}
