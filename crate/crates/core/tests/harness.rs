//! Training loop, baselines, evaluation and reporting on small streams.

use olora::harness::{
    build_report, evaluate, load_checkpoint, load_record, make_learner, report, run_experiment, stream_for_seed,
    train, train_baseline, train_online_lora, tune_thresholds, write_run, ExperimentConfig, Method,
};
use olora::plateau::Event;
use olora::stream::{gen_synthetic, Batch, DataSpec, EvalSet, Scenario, StreamSpec};
use olora::tensor::Tensor;
use olora::vit::{trainable_parameters, ViTConfig, ViTModel};

fn small(method: Method) -> ExperimentConfig {
    ExperimentConfig {
        method,
        lr: 0.005,
        eval_every: 4,
        data: DataSpec {
            class_count: 6,
            per_class: 40,
            image_size: 8,
            seed: 3,
        },
        stream: StreamSpec {
            num_tasks: 3,
            batch_size: 8,
            ..StreamSpec::default()
        },
        model: ViTConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 16,
            num_heads: 2,
            num_layers: 1,
            num_classes: 6,
            ..ViTConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn same_seed_gives_identical_runs() {
    for method in Method::ALL {
        let cfg = small(method);
        let ds = gen_synthetic(&cfg.data).unwrap();
        let stream = stream_for_seed(&cfg, &ds, 4).unwrap();
        let (a, ta) = train(&cfg, 4, &stream).unwrap();
        let (b, tb) = train(&cfg, 4, &stream).unwrap();
        assert_eq!(a, b, "{method}");
        assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
        for (k, t) in &ta {
            assert_eq!(bits(t), bits(&tb[k]), "{method} {k}");
        }
    }
}

#[test]
fn random_head_stays_near_chance() {
    // 20 classes, chance 0.05; 0.15 leaves room for the binomial spread of
    // 800-sample eval sets and a lucky random head.
    let mut cfg = ExperimentConfig {
        method: Method::RandomHead,
        ..ExperimentConfig::default()
    };
    cfg.stream.batch_size = 64;
    let ds = gen_synthetic(&cfg.data).unwrap();
    for seed in 0..3 {
        let stream = stream_for_seed(&cfg, &ds, seed).unwrap();
        let (record, _) = train(&cfg, seed, &stream).unwrap();
        let af = record.metrics.a_final;
        assert!((0.0..=0.15).contains(&af), "seed {seed}: {af}");
    }
}

#[test]
fn frozen_ft_only_moves_the_head() {
    let cfg = small(Method::FrozenFt);
    let ds = gen_synthetic(&cfg.data).unwrap();
    let stream = stream_for_seed(&cfg, &ds, 1).unwrap();
    let (_, learner) = train_baseline(&cfg, 1, &stream).unwrap();
    let fresh = ViTModel::<f32>::init(&ViTConfig {
        seed: olora::rng::derive_seed(1, 1),
        ..cfg.model.clone()
    })
    .unwrap();
    let trained = olora::harness::Learner::model(&learner);
    let head = fresh.head_index();
    for (i, ((name, a), (_, b))) in fresh.named_params().into_iter().zip(trained.named_params()).enumerate() {
        if i < head {
            assert_eq!(bits(a), bits(b), "{name} moved");
        } else {
            assert_ne!(bits(a), bits(b), "{name} did not train");
        }
    }
}

#[test]
fn random_head_never_updates() {
    let cfg = small(Method::RandomHead);
    let ds = gen_synthetic(&cfg.data).unwrap();
    let stream = stream_for_seed(&cfg, &ds, 2).unwrap();
    let (_, learner) = train_baseline(&cfg, 2, &stream).unwrap();
    let fresh = ViTModel::<f32>::init(&ViTConfig {
        seed: olora::rng::derive_seed(2, 1),
        ..cfg.model.clone()
    })
    .unwrap();
    let trained = olora::harness::Learner::model(&learner);
    for ((name, a), (_, b)) in fresh.named_params().into_iter().zip(trained.named_params()) {
        assert_eq!(bits(a), bits(b), "{name}");
    }
}

#[test]
fn continual_ft_fits_a_single_task_better_than_frozen_ft() {
    let tail_loss = |method| {
        let mut cfg = small(method);
        cfg.stream.num_tasks = 1;
        cfg.data.per_class = 200;
        cfg.lr = 0.002;
        let ds = gen_synthetic(&cfg.data).unwrap();
        let stream = stream_for_seed(&cfg, &ds, 0).unwrap();
        let (record, _) = train(&cfg, 0, &stream).unwrap();
        let losses = record.losses();
        let tail = &losses[losses.len() * 3 / 4..];
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    let full = tail_loss(Method::ContinualFt);
    let head = tail_loss(Method::FrozenFt);
    assert!(full < head, "continual-ft {full} vs frozen-ft {head}");
}

#[test]
fn evaluate_is_pure_and_order_independent() {
    let cfg = small(Method::FrozenFt);
    let ds = gen_synthetic(&cfg.data).unwrap();
    let stream = stream_for_seed(&cfg, &ds, 0).unwrap();
    let (_, learner) = train_baseline(&cfg, 0, &stream).unwrap();
    let model = olora::harness::Learner::model(&learner).clone();
    let stack = olora::harness::Learner::stack(&learner).clone();
    let sets: Vec<&EvalSet> = stream.eval_sets.iter().collect();
    let all = evaluate(&model, &stack, &sets).unwrap();
    assert_eq!(all.len(), sets.len());
    for (k, set) in sets.iter().enumerate() {
        assert_eq!(evaluate(&model, &stack, &[set]).unwrap()[0], all[k]);
    }
    let mut rev = sets.clone();
    rev.reverse();
    let mut back = evaluate(&model, &stack, &rev).unwrap();
    back.reverse();
    assert_eq!(back, all);

    // Reversing the samples of a set leaves its accuracy unchanged.
    let set = &stream.eval_sets[0];
    let n = set.len();
    let per = set.inputs.numel() / n;
    let mut data = Vec::with_capacity(set.inputs.numel());
    for i in (0..n).rev() {
        data.extend_from_slice(&set.inputs.data()[i * per..(i + 1) * per]);
    }
    let flipped = EvalSet {
        inputs: Tensor::new(set.inputs.shape(), data).unwrap(),
        labels: set.labels.iter().rev().copied().collect(),
    };
    assert_eq!(evaluate(&model, &stack, &[&flipped]).unwrap()[0], all[0]);

    // Nothing was written to the model.
    let again = olora::harness::Learner::model(&learner);
    for ((_, a), (_, b)) in model.named_params().into_iter().zip(again.named_params()) {
        assert_eq!(bits(a), bits(b));
    }
    assert!(evaluate(&model, &stack, &[]).is_err());

    // Labelled with the model's own predictions the set scores 1.
    let logits = model.logits(&stack, &set.inputs).unwrap();
    let c = logits.shape()[1];
    let own: Vec<usize> = logits
        .data()
        .chunks(c)
        .map(|row| (0..c).fold(0, |best, i| if row[i] > row[best] { i } else { best }))
        .collect();
    let memorized = EvalSet { inputs: set.inputs.clone(), labels: own };
    assert_eq!(evaluate(&model, &stack, &[&memorized]).unwrap(), vec![1.0]);
}

#[test]
fn learner_cannot_tell_tasks_apart() {
    // Same data with hidden task ids rewritten: the learner's trajectory
    // must not change.
    let cfg = small(Method::OnlineLora);
    let ds = gen_synthetic(&cfg.data).unwrap();
    let stream = stream_for_seed(&cfg, &ds, 5).unwrap();
    let scrambled: Vec<Batch> = stream
        .batches
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let v = b.learner_view();
            Batch::new(v.inputs.clone(), v.labels.to_vec(), v.sample_ids.to_vec(), (i * 7 + 3) % 11).unwrap()
        })
        .collect();
    let mut a = make_learner(&cfg, 5).unwrap();
    let mut b = make_learner(&cfg, 5).unwrap();
    for (x, y) in stream.batches.iter().zip(&scrambled) {
        assert_eq!(a.observe(x.learner_view()).unwrap(), b.observe(y.learner_view()).unwrap());
    }
    let (ta, tb) = (a.to_tensors(), b.to_tensors());
    for (k, t) in &ta {
        assert_eq!(bits(t), bits(&tb[k]), "{k}");
    }
}

#[test]
fn plateaus_merge_and_restart_the_adapters() {
    let mut cfg = small(Method::OnlineLora);
    cfg.mean_threshold = 1e6;
    cfg.var_threshold = 1e6;
    let ds = gen_synthetic(&cfg.data).unwrap();
    let stream = stream_for_seed(&cfg, &ds, 0).unwrap();
    let (record, learner) = train_online_lora(&cfg, 0, &stream).unwrap();
    let plateaus = record.events().iter().filter(|(_, e)| *e == Event::Plateau).count();
    assert!(plateaus > 0);
    assert_eq!(record.merges.len(), plateaus);
    assert_eq!(learner.plateaus(), plateaus);
    for m in &record.merges {
        assert!(m.max_abs_jump < 1e-5, "{m:?}");
    }
    let stack = olora::harness::Learner::stack(&learner);
    for site in stack.sites() {
        assert_eq!(stack.merged_count(site), plateaus);
        assert_eq!(stack.pairs(site).len(), 1);
        assert!(!stack.pairs(site)[0].is_frozen());
    }
    // Head plus one A and one B per site.
    let model = olora::harness::Learner::model(&learner);
    assert_eq!(trainable_parameters(model, stack).len(), 2 + 2 * stack.sites().count());
    assert!(learner.importance().omega(stack.sites().next().unwrap()).is_some());
}

fn two_class_config() -> ExperimentConfig {
    let mut cfg = small(Method::OnlineLora);
    cfg.data.class_count = 2;
    cfg.data.per_class = 240;
    cfg.model.num_classes = 2;
    cfg.lr = 0.01;
    cfg.mean_threshold = 0.5;
    cfg.var_threshold = 0.05;
    cfg.stream.num_tasks = 2;
    cfg
}

#[test]
fn one_forced_plateau_on_a_two_task_stream() {
    // One class per task: the loss collapses within the first task, jumps
    // at the switch and collapses again.
    let cfg = two_class_config();
    let ds = gen_synthetic(&cfg.data).unwrap();
    let stream = stream_for_seed(&cfg, &ds, 0).unwrap();
    let (record, learner) = train_online_lora(&cfg, 0, &stream).unwrap();
    let events = record.events();
    assert_eq!(events.iter().filter(|(_, e)| *e == Event::Plateau).count(), 1, "{events:?}");
    assert_eq!(record.merges.len(), 1);
    assert!(record.merges[0].max_abs_jump < 1e-5);
    let switch = stream.batches.iter().position(|b| b.hidden_task_id() == 1).unwrap();
    assert!(record.merges[0].step >= switch);
    assert_eq!(learner.plateaus(), 1);
}

#[test]
fn unreachable_thresholds_never_expand() {
    let mut cfg = two_class_config();
    cfg.stream.num_tasks = 1;
    cfg.mean_threshold = 1e-12;
    cfg.var_threshold = 1e-12;
    let ds = gen_synthetic(&cfg.data).unwrap();
    let stream = stream_for_seed(&cfg, &ds, 0).unwrap();
    let (record, learner) = train_online_lora(&cfg, 0, &stream).unwrap();
    assert!(record.events().iter().all(|(_, e)| *e != Event::Plateau));
    assert!(record.merges.is_empty());
    let stack = olora::harness::Learner::stack(&learner);
    assert!(stack.sites().all(|s| stack.merged_count(s) == 0 && stack.pairs(s).len() == 1));
}

#[test]
fn run_directory_round_trips() {
    let cfg = small(Method::OnlineLora);
    let ds = gen_synthetic(&cfg.data).unwrap();
    let stream = stream_for_seed(&cfg, &ds, 0).unwrap();
    let (record, tensors) = train(&cfg, 0, &stream).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &cfg, &record, &tensors).unwrap();
    for f in ["config.toml", "steps.csv", "loss_trace.csv", "events.csv", "matrix.csv", "trace.csv", "metrics.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    assert_eq!(load_record(dir.path()).unwrap(), record);
    let (loaded_cfg, model, stack) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded_cfg.seeds, vec![0]);
    let sets: Vec<&EvalSet> = stream.eval_sets.iter().collect();
    let accs = evaluate(&model, &stack, &sets).unwrap();
    let last = stream.num_tasks() - 1;
    for (k, a) in accs.iter().enumerate() {
        assert_eq!(Some(*a), record.matrix.get(k, last));
    }
}

#[test]
fn experiment_and_report_over_three_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Method::FrozenFt);
    cfg.seeds = vec![0, 1, 2];
    cfg.out_dir = dir.path().join("runs");
    let records = run_experiment(&cfg, None).unwrap();
    assert_eq!(records.len(), 3);
    for r in &records {
        assert!(cfg.out_dir.join(&r.run_id).join("record.json").is_file());
    }
    let files = build_report(&records).unwrap();
    let lines: Vec<&str> = files.metrics_csv.lines().collect();
    assert_eq!(lines.len(), 5, "header, three runs, summary");
    assert!(lines[4].starts_with("summary,"));
    assert!(lines[4].contains('±'));
    assert_eq!(files.loss_svgs.len(), 3);
    assert!(files.accuracy_svg.starts_with("<svg"));
    let out = dir.path().join("report");
    report(&records, &out).unwrap();
    assert!(out.join("accuracy.svg").is_file());
    assert!(out.join(format!("loss_{}.svg", records[0].run_id)).is_file());
    assert!(build_report(&[]).is_err());
}

#[test]
fn every_scenario_trains() {
    for scenario in [Scenario::Disjoint, Scenario::Siblurry, Scenario::Domain] {
        let mut cfg = small(Method::OnlineLora);
        cfg.stream.scenario = scenario;
        cfg.data.class_count = 12;
        cfg.model.num_classes = 12;
        let ds = gen_synthetic(&cfg.data).unwrap();
        let stream = stream_for_seed(&cfg, &ds, 0).unwrap();
        let (record, _) = train(&cfg, 0, &stream).unwrap();
        assert_eq!(record.rows.len(), stream.batches.len());
        assert!(record.metrics.a_final.is_finite());
        assert!(record.trace.points.windows(2).all(|w| w[0].samples_seen < w[1].samples_seen));
    }
}

#[test]
fn tuning_picks_from_the_grid() {
    let cfg = small(Method::OnlineLora);
    let (m, v) = tune_thresholds(&cfg, &[0.5, 3.0], &[0.05], 9).unwrap();
    assert!([0.5, 3.0].contains(&m));
    assert_eq!(v, 0.05);
}
