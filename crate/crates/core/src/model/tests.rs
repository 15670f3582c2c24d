use super::*;
use crate::synthworld::FeatureSequence;
use crate::targetprep::{DatasetMode, TrainingSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

pub(crate) fn tiny_config(branches: usize) -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        units: 3,
        encoder_layers: 1,
        decoder_layers: 1,
        hidden_dim: 4,
        attention_heads: 2,
        ffn_dim: 6,
        branch_count: branches,
        dropout: 0.0,
    }
}

pub(crate) fn small_config(branches: usize) -> ModelConfig {
    ModelConfig {
        input_dim: 4,
        units: 6,
        encoder_layers: 1,
        decoder_layers: 1,
        hidden_dim: 16,
        attention_heads: 2,
        ffn_dim: 32,
        branch_count: branches,
        dropout: 0.0,
    }
}

pub(crate) fn random_example(cfg: &ModelConfig, rng: &mut ChaCha8Rng, id: usize) -> TrainingExample {
    use rand::Rng;
    let frames = rng.gen_range(3..7);
    let source = Array2::from_shape_simple_fn((frames, cfg.input_dim), || rng.gen_range(-1.0..1.0));
    let targets = (0..cfg.branch_count)
        .map(|_| {
            let n = rng.gen_range(1..6);
            (0..n).map(|_| rng.gen_range(0..cfg.units as u32)).collect()
        })
        .collect();
    TrainingExample {
        utt_id: format!("u{id}"),
        source: Arc::new(FeatureSequence {
            frames: source,
            utt_id: format!("u{id}"),
            origin: "source".into(),
        }),
        targets,
    }
}

fn set_of(cfg: &ModelConfig, examples: Vec<TrainingExample>) -> TrainingSet {
    let mode = if cfg.branch_count == 1 {
        DatasetMode::Single("A".into())
    } else {
        DatasetMode::Multitask((0..cfg.branch_count).map(|b| format!("S{b}")).collect())
    };
    TrainingSet {
        branches: mode.systems(),
        mode,
        examples,
    }
}

#[test]
fn init_is_deterministic() {
    let cfg = small_config(2);
    assert_eq!(Model::init(&cfg, 5).unwrap(), Model::init(&cfg, 5).unwrap());
    assert_ne!(Model::init(&cfg, 5).unwrap(), Model::init(&cfg, 6).unwrap());
}

#[test]
fn invalid_configs_rejected() {
    let mut cfg = small_config(0);
    assert!(matches!(Model::init(&cfg, 1), Err(Error::Config(_))));
    cfg.branch_count = 1;
    cfg.attention_heads = 3;
    assert!(matches!(Model::init(&cfg, 1), Err(Error::Config(_))));
}

#[test]
fn single_branch_matches_first_branch_of_larger_model() {
    let one = Model::init(&small_config(1), 3).unwrap();
    let three = Model::init(&small_config(3), 3).unwrap();
    for (name, value) in one.named() {
        assert_eq!(three.get(name), Some(value), "{name}");
    }
}

#[test]
fn three_branches_partition_parameters() {
    let m = Model::init(&small_config(3), 1).unwrap();
    let mut groups: BTreeMap<&str, usize> = BTreeMap::new();
    for name in m.names() {
        let group = name.split('.').next().unwrap();
        *groups.entry(group).or_default() += 1;
    }
    assert_eq!(groups.keys().copied().collect::<Vec<_>>(), ["branch0", "branch1", "branch2", "encoder"]);
    let per_branch = groups["branch0"];
    assert!(groups["branch1"] == per_branch && groups["branch2"] == per_branch);
    assert_eq!(groups.values().sum::<usize>(), m.names().len());
    // Branch weights are independent draws.
    assert_ne!(m.get("branch0.embed"), m.get("branch1.embed"));
}

use std::collections::BTreeMap;

#[test]
fn zero_model_gives_uniform_logits() {
    let cfg = small_config(2);
    let mut m = Model::init(&cfg, 1).unwrap();
    m.params_mut().iter_mut().for_each(|p| p.fill(0.0));
    let src = Array2::from_elem((4, cfg.input_dim), 0.3);
    let v = cfg.vocab();
    let out = m.forward(&src, &[(0, &[v.bos(), 1, 2]), (1, &[v.bos()])]).unwrap();
    for l in out {
        assert!(l.iter().all(|&x| x == l[[0, 0]]));
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let cfg = small_config(2);
    let m = Model::init(&cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..10 {
        let ex = random_example(&cfg, &mut rng, i);
        let mut prefix = vec![cfg.vocab().bos()];
        prefix.extend(&ex.targets[0]);
        let l = &m.forward(&ex.source.frames, &[(0, &prefix)]).unwrap()[0];
        for row in tape::softmax_rows(l.view(), false).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn swapping_branch_weights_swaps_outputs() {
    let cfg = small_config(2);
    let m = Model::init(&cfg, 4).unwrap();
    let mut swapped = m.clone();
    for name in m.names().iter().filter(|n| n.starts_with("branch0.")) {
        let other = name.replacen("branch0", "branch1", 1);
        *swapped.get_mut(name).unwrap() = m.get(&other).unwrap().clone();
        *swapped.get_mut(&other).unwrap() = m.get(name).unwrap().clone();
    }
    let src = Array2::from_shape_fn((5, cfg.input_dim), |(i, j)| (i as f64 - j as f64) * 0.2);
    let p: &[u32] = &[cfg.vocab().bos(), 2, 0];
    let a = m.forward(&src, &[(0, p), (1, p)]).unwrap();
    let b = swapped.forward(&src, &[(0, p), (1, p)]).unwrap();
    assert_eq!(a[0], b[1]);
    assert_eq!(a[1], b[0]);
}

#[test]
fn out_of_vocab_token_is_a_data_error() {
    let cfg = small_config(1);
    let m = Model::init(&cfg, 1).unwrap();
    let src = Array2::zeros((2, cfg.input_dim));
    let bad = cfg.vocab().size() as u32;
    assert!(matches!(m.forward(&src, &[(0, &[bad])]), Err(Error::Data(_))));
    assert!(matches!(m.forward(&src, &[(1, &[0])]), Err(Error::Data(_))));
}

#[test]
fn uniform_logits_loss_is_ln_v() {
    let cfg = small_config(1);
    let mut m = Model::init(&cfg, 1).unwrap();
    m.params_mut().iter_mut().for_each(|p| p.fill(0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ex = random_example(&cfg, &mut rng, 0);
    let loss = m.example_loss(&ex).unwrap();
    assert!((loss - (cfg.vocab().size() as f64).ln()).abs() < 1e-12);
}

#[test]
fn confident_correct_logits_give_near_zero_loss() {
    let cfg = small_config(1);
    let mut m = Model::init(&cfg, 1).unwrap();
    m.params_mut().iter_mut().for_each(|p| p.fill(0.0));
    // Output bias strongly favours EOS; the target is the empty sequence.
    let eos = cfg.vocab().eos() as usize;
    m.get_mut("branch0.out.bias").unwrap()[[0, eos]] = 50.0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ex = random_example(&cfg, &mut rng, 0);
    ex.targets[0].clear();
    assert!(m.example_loss(&ex).unwrap() < 1e-12);
}

#[test]
fn identical_branches_double_the_loss() {
    let one = Model::init(&small_config(1), 7).unwrap();
    let mut two = Model::init(&small_config(2), 7).unwrap();
    for name in one.names() {
        let v = one.get(name).unwrap().clone();
        *two.get_mut(&name.replacen("branch0", "branch1", 1)).unwrap() = v.clone();
        *two.get_mut(name).unwrap() = v;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ex1 = random_example(&small_config(1), &mut rng, 0);
    let mut ex2 = ex1.clone();
    ex2.targets.push(ex1.targets[0].clone());
    let l1 = one.example_loss(&ex1).unwrap();
    let l2 = two.example_loss(&ex2).unwrap();
    assert!((l2 - 2.0 * l1).abs() < 1e-12, "{l2} vs 2×{l1}");
}

/// Max relative error between analytic and central-difference gradients.
pub(crate) fn gradient_check(seed: u64) -> (usize, f64) {
    let cfg = tiny_config(2);
    let mut model = Model::init(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ex = random_example(&cfg, &mut rng, 0);
    let mut grads = model.zero_grads();
    model
        .loss_and_grad::<ChaCha8Rng>(&ex, &mut grads, 1.0, None)
        .unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..model.params().len() {
        for idx in 0..model.params()[k].len() {
            let cols = model.params()[k].ncols();
            let at = [idx / cols, idx % cols];
            let orig = model.params()[k][at];
            model.params_mut()[k][at] = orig + h;
            let up = model.example_loss(&ex).unwrap();
            model.params_mut()[k][at] = orig - h;
            let down = model.example_loss(&ex).unwrap();
            model.params_mut()[k][at] = orig;
            let num = (up - down) / (2.0 * h);
            let ana = grads[k][at];
            let rel = (num - ana).abs() / ana.abs().max(num.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    (model.parameter_count(), worst)
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..2 {
        let (n, err) = gradient_check(seed);
        assert!(n <= 2000, "{n} parameters");
        assert!(err < 1e-4, "seed {seed}: max relative error {err}");
    }
}

#[test]
fn decoder_is_causal() {
    let cfg = small_config(1);
    let m = Model::init(&cfg, 2).unwrap();
    let src = Array2::from_shape_fn((4, cfg.input_dim), |(i, j)| ((i * 3 + j) as f64).sin());
    let bos = cfg.vocab().bos();
    let a = &m.forward(&src, &[(0, &[bos, 1, 2, 3, 4])]).unwrap()[0];
    let b = &m.forward(&src, &[(0, &[bos, 1, 2, 0, 5])]).unwrap()[0];
    for t in 0..3 {
        assert_eq!(a.row(t), b.row(t), "position {t}");
    }
    assert_ne!(a.row(3), b.row(3));
}

#[test]
fn branch_gradients_are_isolated() {
    let cfg = small_config(3);
    let m = Model::init(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ex = random_example(&cfg, &mut rng, 0);
    for b in 0..3 {
        let grads = m.branch_loss_grad(&ex, b).unwrap();
        let mut encoder_norm = 0.0;
        for (name, g) in m.names().iter().zip(&grads) {
            let norm: f64 = g.iter().map(|x| x * x).sum();
            if name.starts_with("encoder.") {
                encoder_norm += norm;
            } else if !name.starts_with(&format!("branch{b}.")) {
                assert_eq!(norm, 0.0, "{name} gets gradient from branch {b}");
            }
        }
        assert!(encoder_norm > 0.0);
    }
}

#[test]
fn incremental_decoding_matches_teacher_forcing() {
    let cfg = small_config(2);
    let m = Model::init(&cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ex = random_example(&cfg, &mut rng, 0);
    let mut prefix = vec![cfg.vocab().bos()];
    prefix.extend(&ex.targets[1]);
    let full = &m.forward(&ex.source.frames, &[(1, &prefix)]).unwrap()[0];
    let mem = m.memory(&ex.source.frames).unwrap();
    let mut st = m.start(1).unwrap();
    for (t, &tok) in prefix.iter().enumerate() {
        let lp = m.step(&mem, &mut st, tok).unwrap();
        let lse = tape::log_sum_exp(full.row(t).iter().copied());
        for (a, b) in lp.iter().zip(full.row(t)) {
            assert!((a - (b - lse)).abs() < 1e-10);
        }
    }
}

fn quick_train(cfg: &ModelConfig) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        warmup_steps: 10,
        warmup_start_lr: 1e-5,
        grad_accum: 1,
        max_steps: 30,
        batch_size: 2,
        seed: cfg.branch_count as u64,
        weight_decay: 0.01,
        eval_every: 10,
        ..TrainConfig::default()
    }
}

#[test]
fn warmup_schedule_is_exact() {
    let tc = TrainConfig {
        learning_rate: 5e-4,
        warmup_start_lr: 1e-7,
        warmup_steps: 100,
        ..TrainConfig::default()
    };
    assert_eq!(lr_at(&tc, 0), 1e-7);
    assert_eq!(lr_at(&tc, 100), 5e-4);
    assert!((lr_at(&tc, 50) - (1e-7 + (5e-4 - 1e-7) * 0.5)).abs() < 1e-18);
    assert!((lr_at(&tc, 400) - 2.5e-4).abs() < 1e-15);
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let cfg = small_config(2);
    let mut m = Model::init(&cfg, 1).unwrap();
    let before = m.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data = set_of(&cfg, (0..4).map(|i| random_example(&cfg, &mut rng, i)).collect());
    let tc = TrainConfig {
        learning_rate: 0.0,
        warmup_start_lr: 0.0,
        ..quick_train(&cfg)
    };
    train(&mut m, &data, None, &tc).unwrap();
    assert_eq!(m, before);
}

#[test]
fn accumulation_matches_large_batch() {
    let mut cfg = small_config(2);
    cfg.dropout = 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data = set_of(&cfg, (0..12).map(|i| random_example(&cfg, &mut rng, i)).collect());
    let run = |accum, batch| {
        let mut m = Model::init(&cfg, 2).unwrap();
        let tc = TrainConfig {
            grad_accum: accum,
            batch_size: batch,
            max_steps: 1,
            warmup_steps: 0,
            ..quick_train(&cfg)
        };
        train(&mut m, &data, None, &tc).unwrap();
        m
    };
    let a = run(4, 2);
    let b = run(1, 8);
    for (x, y) in a.params().iter().zip(b.params()) {
        for (p, q) in x.iter().zip(y) {
            assert!((p - q).abs() < 1e-5);
        }
    }
}

#[test]
fn training_is_deterministic_and_logs_every_step() {
    let mut cfg = small_config(2);
    cfg.dropout = 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let data = set_of(&cfg, (0..6).map(|i| random_example(&cfg, &mut rng, i)).collect());
    let dev = set_of(&cfg, (6..8).map(|i| random_example(&cfg, &mut rng, i)).collect());
    let tc = quick_train(&cfg);
    let run = || {
        let mut m = Model::init(&cfg, 3).unwrap();
        train(&mut m, &data, Some(&dev), &tc).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), tc.max_steps);
    let best = a.log.iter().filter_map(|r| r.dev_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(a.best_dev_loss, Some(best));
    assert!(a.log.last().unwrap().loss < a.log[0].loss);
}

#[test]
fn mismatched_branch_count_rejected() {
    let cfg = small_config(2);
    let mut m = Model::init(&cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let one = small_config(1);
    let data = set_of(&one, vec![random_example(&one, &mut rng, 0)]);
    assert!(matches!(train(&mut m, &data, None, &quick_train(&cfg)), Err(Error::Config(_))));
}

#[test]
fn divergence_is_a_training_error() {
    let cfg = small_config(1);
    let mut m = Model::init(&cfg, 1).unwrap();
    m.get_mut("branch0.out.bias").unwrap()[[0, 0]] = f64::NAN;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data = set_of(&cfg, vec![random_example(&cfg, &mut rng, 0)]);
    assert!(matches!(train(&mut m, &data, None, &quick_train(&cfg)), Err(Error::Training(_))));
}

#[test]
fn overfits_eight_utterances() {
    let cfg = ModelConfig {
        hidden_dim: 32,
        ffn_dim: 64,
        ..small_config(1)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data = set_of(&cfg, (0..8).map(|i| random_example(&cfg, &mut rng, i)).collect());
    let mut m = Model::init(&cfg, 1).unwrap();
    let tc = TrainConfig {
        learning_rate: 3e-3,
        warmup_steps: 100,
        warmup_start_lr: 1e-5,
        grad_accum: 1,
        batch_size: 8,
        max_steps: 2000,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let out = train(&mut m, &data, None, &tc).unwrap();
    let final_loss = out.log.last().unwrap().loss;
    assert!(final_loss < 0.05, "final training loss {final_loss}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = small_config(2);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let data = set_of(&cfg, (0..4).map(|i| random_example(&cfg, &mut rng, i)).collect());
    let mut m = Model::init(&cfg, 1).unwrap();
    let out = train(&mut m, &data, None, &quick_train(&cfg)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&out.checkpoint, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, out.checkpoint);
    let ex = &data.examples[0];
    let p: &[u32] = &[cfg.vocab().bos(), 1];
    let a = out.checkpoint.model.forward(&ex.source.frames, &[(0, p), (1, p)]).unwrap();
    let b = back.model.forward(&ex.source.frames, &[(0, p), (1, p)]).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    let mut bytes = out.checkpoint.to_bytes();
    bytes[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    assert!(Checkpoint::from_bytes(&out.checkpoint.to_bytes()[..40]).is_err());
}
