//! Shared finite-difference oracles for the gradient tests.

#![allow(dead_code)]

use olora::buffer::{Candidate, HardBuffer};
use olora::importance::{total_loss, ImportanceState, PenaltyMode, SiteOmega};
use olora::lora::{Factor, LoraStack};
use olora::rng::{gaussian_vec, rng, Rng};
use olora::tensor::{Tape, Tensor, Var};
use olora::vit::{param_mut, param_ref, trainable_parameters, ViTConfig, ViTModel};
use rand::Rng as _;

const H: f64 = 1e-6;
const TOL: f64 = 1e-3;

pub fn rand_tensor(r: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, gaussian_vec(r, n, 1.0)).unwrap().with_requires_grad(true)
}

/// ‖a − n‖ / max(‖a‖, ‖n‖) with a floor for all-zero gradients.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / na.max(nn).max(1e-8)
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// Reduces the op output to a scalar with fixed random weights so every
/// output element contributes, then compares every input gradient.
pub fn check_op(name: &str, inputs: Vec<Tensor<f64>>, build: &Build, seed: u64) -> f64 {
    let eval = |inputs: &[Tensor<f64>], want_grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = build(&mut tape, &vars);
        let shape = tape.shape(out).to_vec();
        let n = tape.value(out).len();
        let w = tape.constant(&shape, gaussian_vec(&mut rng(seed ^ 0xFEED), n, 1.0)).unwrap();
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        let value = tape.item(loss);
        if !want_grads {
            return (value, Vec::new());
        }
        let grads = tape.backward(loss).unwrap();
        let g = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get(v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        (value, g)
    };
    let (_, analytic) = eval(&inputs, true);
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.numel()];
        for i in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            numeric[i] = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * H);
        }
        let e = rel_err(&analytic[k], &numeric);
        assert!(e < TOL, "{name}: input {k} rel err {e:e}");
        worst = worst.max(e);
    }
    worst
}

fn op_cases() -> Vec<(&'static str, Box<dyn Fn(&mut Rng) -> Vec<Tensor<f64>>>, Box<Build>)> {
    fn dims(r: &mut Rng) -> (usize, usize, usize) {
        (r.random_range(1..4), r.random_range(1..5), r.random_range(1..5))
    }
    vec![
        (
            "matmul",
            Box::new(|r| {
                let (m, k, n) = dims(r);
                vec![rand_tensor(r, &[m, k]), rand_tensor(r, &[k, n])]
            }),
            Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
        ),
        (
            "matmul_t",
            Box::new(|r| {
                let (m, k, n) = dims(r);
                vec![rand_tensor(r, &[m, k]), rand_tensor(r, &[n, k])]
            }),
            Box::new(|t, v| t.matmul_t(v[0], v[1]).unwrap()),
        ),
        (
            "bmm",
            Box::new(|r| {
                let (m, k, n) = dims(r);
                vec![rand_tensor(r, &[2, m, k]), rand_tensor(r, &[2, k, n])]
            }),
            Box::new(|t, v| t.bmm(v[0], v[1]).unwrap()),
        ),
        (
            "bmm_t",
            Box::new(|r| {
                let (m, k, n) = dims(r);
                vec![rand_tensor(r, &[2, m, k]), rand_tensor(r, &[2, n, k])]
            }),
            Box::new(|t, v| t.bmm_t(v[0], v[1]).unwrap()),
        ),
        (
            "add",
            Box::new(|r| vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[2, 3])]),
            Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
        ),
        (
            "sub",
            Box::new(|r| vec![rand_tensor(r, &[3, 2]), rand_tensor(r, &[3, 2])]),
            Box::new(|t, v| t.sub(v[0], v[1]).unwrap()),
        ),
        (
            "mul",
            Box::new(|r| vec![rand_tensor(r, &[4]), rand_tensor(r, &[4])]),
            Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
        ),
        (
            "mul_self",
            Box::new(|r| vec![rand_tensor(r, &[5])]),
            Box::new(|t, v| t.mul(v[0], v[0]).unwrap()),
        ),
        (
            "scale",
            Box::new(|r| vec![rand_tensor(r, &[2, 2])]),
            Box::new(|t, v| t.scale(v[0], -1.7)),
        ),
        (
            "gelu",
            Box::new(|r| vec![rand_tensor(r, &[3, 3])]),
            Box::new(|t, v| t.gelu(v[0])),
        ),
        (
            "add_broadcast",
            Box::new(|r| vec![rand_tensor(r, &[2, 3, 4]), rand_tensor(r, &[4])]),
            Box::new(|t, v| t.add_broadcast(v[0], v[1]).unwrap()),
        ),
        (
            "softmax_last",
            Box::new(|r| vec![rand_tensor(r, &[2, 3, 4])]),
            Box::new(|t, v| t.softmax(v[0], 2).unwrap()),
        ),
        (
            "softmax_mid",
            Box::new(|r| vec![rand_tensor(r, &[2, 3, 4])]),
            Box::new(|t, v| t.softmax(v[0], 1).unwrap()),
        ),
        (
            "layer_norm",
            Box::new(|r| vec![rand_tensor(r, &[3, 5]), rand_tensor(r, &[5]), rand_tensor(r, &[5])]),
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
        ),
        (
            "cross_entropy",
            Box::new(|r| vec![rand_tensor(r, &[4, 3])]),
            Box::new(|t, v| t.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap()),
        ),
        (
            "sum",
            Box::new(|r| vec![rand_tensor(r, &[2, 3])]),
            Box::new(|t, v| t.sum(v[0])),
        ),
        (
            "mean",
            Box::new(|r| vec![rand_tensor(r, &[2, 3])]),
            Box::new(|t, v| t.mean(v[0])),
        ),
        (
            "reshape",
            Box::new(|r| vec![rand_tensor(r, &[2, 6])]),
            Box::new(|t, v| t.reshape(v[0], &[3, 4]).unwrap()),
        ),
        (
            "permute",
            Box::new(|r| vec![rand_tensor(r, &[2, 3, 4])]),
            Box::new(|t, v| t.permute(v[0], &[2, 0, 1]).unwrap()),
        ),
        (
            "prepend_token",
            Box::new(|r| vec![rand_tensor(r, &[2, 3, 4]), rand_tensor(r, &[4])]),
            Box::new(|t, v| t.prepend_token(v[0], v[1]).unwrap()),
        ),
        (
            "select_token",
            Box::new(|r| vec![rand_tensor(r, &[2, 3, 4])]),
            Box::new(|t, v| t.select_token(v[0], 1).unwrap()),
        ),
        (
            "composite",
            Box::new(|r| vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[4, 4])]),
            Box::new(|t, v| {
                let h = t.matmul(v[0], v[1]).unwrap();
                let g = t.gelu(h);
                let s = t.softmax(g, 1).unwrap();
                t.mul(s, h).unwrap()
            }),
        ),
    ]
}

/// Runs `per_op` randomized trials of every op; returns (trials, worst error).
pub fn run_op_trials(per_op: u64) -> (usize, f64) {
    let cases = op_cases();
    let mut r = rng(7);
    let mut trials = 0;
    let mut worst: f64 = 0.0;
    for trial in 0..per_op {
        for (name, make, build) in &cases {
            let inputs = make(&mut r);
            worst = worst.max(check_op(name, inputs, build.as_ref(), trial));
            trials += 1;
        }
    }
    (trials, worst)
}

pub fn toy_config(seed: u64) -> ViTConfig {
    ViTConfig {
        image_size: 4,
        patch_size: 2,
        channels: 1,
        embed_dim: 8,
        num_heads: 2,
        num_layers: 1,
        mlp_ratio: 1.0,
        num_classes: 3,
        seed,
    }
}

pub struct Toy {
    pub model: ViTModel<f64>,
    pub stack: LoraStack<f64>,
    pub buffer: HardBuffer<f64>,
    pub state: ImportanceState<f64>,
    pub images: Tensor<f64>,
    pub labels: Vec<usize>,
}

pub fn toy(seed: u64, mode: PenaltyMode) -> Toy {
    let cfg = toy_config(seed);
    let mut r = rng(seed + 100);
    let mut model = ViTModel::<f64>::init(&cfg).unwrap();
    // Larger weights than the init scale so every path carries signal.
    for (_, p) in model.named_params_mut() {
        for v in p.data_mut() {
            *v += 0.3 * gaussian_vec::<f64>(&mut r, 1, 1.0)[0];
        }
    }
    model.set_backbone_frozen(false);
    let mut stack = LoraStack::new(1, 8);
    stack.add_pair_all(2, seed, 0).unwrap();
    let mut state = ImportanceState::new(0.7, mode);
    state.snapshot_map(&stack);
    for site in stack.sites().collect::<Vec<_>>() {
        let om = state.omega(site).unwrap().clone();
        let a = Tensor::new(om.a.shape(), gaussian_vec::<f64>(&mut r, om.a.numel(), 1.0).iter().map(|v| v * v).collect()).unwrap();
        let b = Tensor::new(om.b.shape(), gaussian_vec::<f64>(&mut r, om.b.numel(), 1.0).iter().map(|v| v * v).collect()).unwrap();
        state.set_omega(site, SiteOmega { a, b }).unwrap();
        let pair = stack.trainable_mut(site).unwrap();
        for f in [Factor::A, Factor::B] {
            for v in pair.factor_mut(f).data_mut() {
                *v += 0.3 * gaussian_vec::<f64>(&mut r, 1, 1.0)[0];
            }
        }
    }
    let images = Tensor::new(&[3, 1, 4, 4], gaussian_vec(&mut r, 48, 1.0)).unwrap();
    let labels = vec![0, 2, 1];
    let mut buffer = HardBuffer::new(2, &[1, 4, 4]).unwrap();
    buffer
        .update(
            (0..2)
                .map(|k| Candidate {
                    input: gaussian_vec(&mut r, 16, 1.0),
                    label: k,
                    loss: 1.0 + k as f64,
                    sample_id: k,
                })
                .collect(),
        )
        .unwrap();
    Toy {
        model,
        stack,
        buffer,
        state,
        images,
        labels,
    }
}

pub fn total(t: &Toy) -> f64 {
    total_loss(&t.model, &t.stack, &t.images, &t.labels, &t.buffer, &t.state)
        .unwrap()
        .total()
}

/// FD check of the full objective on toy models; returns the worst error.
pub fn run_total_loss_checks() -> f64 {
    let mut worst: f64 = 0.0;
    for (seed, mode) in [(1, PenaltyMode::Deviation), (2, PenaltyMode::Literal), (3, PenaltyMode::Deviation)] {
        let mut t = toy(seed, mode);
        let terms = total_loss(&t.model, &t.stack, &t.images, &t.labels, &t.buffer, &t.state).unwrap();
        terms.backward_into(&mut t.model, &mut t.stack).unwrap();
        for key in trainable_parameters(&t.model, &t.stack) {
            let p = param_ref(&t.model, &t.stack, key).unwrap();
            let analytic = p.grad().unwrap().to_vec();
            let mut numeric = vec![0.0; p.numel()];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let orig = param_ref(&t.model, &t.stack, key).unwrap().data()[i];
                param_mut(&mut t.model, &mut t.stack, key).unwrap().data_mut()[i] = orig + H;
                let up = total(&t);
                param_mut(&mut t.model, &mut t.stack, key).unwrap().data_mut()[i] = orig - H;
                let down = total(&t);
                param_mut(&mut t.model, &mut t.stack, key).unwrap().data_mut()[i] = orig;
                *slot = (up - down) / (2.0 * H);
            }
            let e = rel_err(&analytic, &numeric);
            assert!(e < TOL, "seed {seed} {key:?}: rel err {e:e}");
            worst = worst.max(e);
        }
    }
    worst
}
