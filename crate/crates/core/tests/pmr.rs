mod common;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use common::checks::{jitter, tiny_config};
use common::oracle::{brute_kl, brute_nll};
use deltallm_core::delta::{compress, CompressOptions, CompressedModel, InitMethod, InitOptions, Rank, RankMap, StoredWeight};
use deltallm_core::model::{forward, forward_batch, init_model, Model};
use deltallm_core::optim::LrSchedule;
use deltallm_core::pmr::{
    depth_ranks, distill_loss, hybrid_forward, replacement_probability, sample_replacement_mask, train,
    ReplacementScheduler, TrainConfig, TrainMode, WithAdapters,
};
use deltallm_core::redundancy::{build_plan, PlanRequest, SublayerChoice};
use deltallm_core::delta::PlanStrategy;
use deltallm_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn teacher(seed: u64) -> Model {
    let mut m = init_model(&tiny_config(6), seed).unwrap();
    jitter(&mut m, 0.3, seed + 1);
    m
}

fn student(t: &Model, rank: Rank, method: InitMethod) -> CompressedModel {
    let req = PlanRequest { strategy: PlanStrategy::Sequential, sublayer: SublayerChoice::Mlp, k: 2, protected_blocks: None };
    let plan = build_plan(&t.config, &req, None).unwrap();
    let o = CompressOptions { ranks: RankMap::uniform(rank), method, init: InitOptions::default(), seed: 1 };
    compress(t, &plan, &o, None).unwrap()
}

fn stream(n: usize, seed: u64) -> Vec<usize> {
    // a learnable pattern with noise
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| if rng.random::<f64>() < 0.8 { (i * 3) % 11 } else { rng.random_range(0..11) }).collect()
}

fn cfg() -> TrainConfig {
    TrainConfig {
        alpha: 0.5,
        lr: 1e-2,
        schedule: LrSchedule::Constant,
        warmup_steps: 0,
        epochs: 2,
        steps_per_epoch: Some(6),
        batch_size: 2,
        seq_len: 8,
        seed: 11,
        mode: TrainMode::DeltaOnly,
        alpha_lora: 4.0,
        lora_dropout: 0.0,
        lora_rank: 2,
        eval_tokens: 64,
    }
}

fn hash_frozen(m: &CompressedModel) -> u64 {
    let mut h = DefaultHasher::new();
    let mut put = |t: &Tensor| t.data().iter().for_each(|x| x.to_bits().hash(&mut h));
    put(&m.backbone.embedding);
    m.backbone.attn_norms.iter().chain(&m.backbone.mlp_norms).for_each(&mut put);
    put(&m.backbone.final_norm);
    put(&m.backbone.output);
    for w in m.weights.values() {
        put(&w.to_dense());
    }
    h.finish()
}

#[test]
fn scheduler_examples() {
    let s = ReplacementScheduler { p0: 0.2, converge_step: 100, depth_bias: 0.0, extra_epochs: None };
    assert_eq!(replacement_probability(&s, 0, 0, 4), 0.2);
    assert!((replacement_probability(&s, 50, 0, 4) - 0.6).abs() < 1e-15);
    let biased = ReplacementScheduler { depth_bias: 0.7, ..s };
    for sched in [s, biased] {
        for rank in 0..4 {
            assert_eq!(replacement_probability(&sched, 100, rank, 4), 1.0);
        }
        // monotone in step and in depth
        for step in 0..120 {
            for rank in 0..4 {
                let p = replacement_probability(&sched, step, rank, 4);
                assert!(p <= replacement_probability(&sched, step + 1, rank, 4));
                if rank < 3 {
                    assert!(p <= replacement_probability(&sched, step, rank + 1, 4));
                }
            }
        }
    }
}

#[test]
fn mask_extremes_and_frequency() {
    let zero = ReplacementScheduler { p0: 0.0, converge_step: 1_000_000, depth_bias: 0.0, extra_epochs: None };
    let one = ReplacementScheduler { p0: 1.0, ..zero };
    let half = ReplacementScheduler { p0: 0.5, ..zero };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ranks = [0, 0, 1, 1, 2];
    assert!(sample_replacement_mask(&zero, 0, &ranks, 3, &mut rng).iter().all(|&b| !b));
    assert!(sample_replacement_mask(&one, 0, &ranks, 3, &mut rng).iter().all(|&b| b));
    let mut counts = [0usize; 5];
    for _ in 0..10_000 {
        for (c, b) in counts.iter_mut().zip(sample_replacement_mask(&half, 0, &ranks, 3, &mut rng)) {
            *c += b as usize;
        }
    }
    for c in counts {
        let f = c as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&f), "{f}");
    }
    let mut a = ChaCha8Rng::seed_from_u64(1);
    let mut b = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(
        sample_replacement_mask(&half, 3, &ranks, 3, &mut a),
        sample_replacement_mask(&half, 3, &ranks, 3, &mut b)
    );
}

#[test]
fn depth_ranks_follow_target_blocks() {
    let t = teacher(0);
    let s = student(&t, Rank::Fixed(2), InitMethod::Svd);
    let (ranks, n) = depth_ranks(&s.plan);
    assert_eq!(n, 2);
    for (e, r) in s.plan.entries.iter().zip(&ranks) {
        assert_eq!(*r, e.target.block - s.plan.target_blocks()[0]);
    }
}

#[test]
fn hybrid_forward_extremes() {
    let t = teacher(2);
    let s = student(&t, Rank::Fixed(2), InitMethod::Svd);
    let tokens: Vec<usize> = stream(20, 3);
    let n = s.plan.entries.len();
    let all_teacher = hybrid_forward(&t, &s, &vec![false; n], &tokens, 2).unwrap();
    assert_eq!(all_teacher, forward_batch(&t, &tokens, 2).unwrap());
    let all_student = hybrid_forward(&t, &s, &vec![true; n], &tokens, 2).unwrap();
    assert_eq!(all_student, forward_batch(&s, &tokens, 2).unwrap());
    assert!(matches!(hybrid_forward(&t, &s, &[true], &tokens, 2), Err(Error::MaskMismatch { .. })));

    let full = student(&t, Rank::Full, InitMethod::Svd);
    for i in 0..n {
        let mut mask = vec![false; n];
        mask[i] = true;
        let diff = hybrid_forward(&t, &full, &mask, &tokens, 2).unwrap().max_abs_diff(&all_teacher);
        assert!(diff < 1e-5);
    }
}

#[test]
fn distill_loss_against_component_oracles() {
    let s = Tensor::from_rows(&[&[0.3, -0.2], &[1.1, 0.4]]);
    let t = Tensor::from_rows(&[&[-0.5, 0.5], &[0.2, 0.9]]);
    let y = [1, 0];
    let ce = (brute_nll(s.row(0), 1) + brute_nll(s.row(1), 0)) / 2.0;
    let kl = (brute_kl(t.row(0), s.row(0)) + brute_kl(t.row(1), s.row(1))) / 2.0;
    assert!((distill_loss(&s, &t, &y, 0.0).unwrap() - ce).abs() < 1e-14);
    assert!((distill_loss(&s, &t, &y, 0.5).unwrap() - 0.5 * (ce + kl)).abs() < 1e-14);
    assert_eq!(distill_loss(&t, &t, &y, 1.0).unwrap(), 0.0);
}

#[test]
fn zero_epochs_returns_student_unchanged() {
    let t = teacher(4);
    let s = student(&t, Rank::Fixed(2), InitMethod::Gaussian);
    let data = stream(400, 5);
    let c = TrainConfig { epochs: 0, ..cfg() };
    let (out, report) = train(&t, &s, &data, &data, &c, None, &mut |_| {}).unwrap();
    assert_eq!(out, s);
    assert!(report.epochs.is_empty());
}

#[test]
fn delta_only_freezes_everything_else() {
    let t = teacher(6);
    let s = student(&t, Rank::Fixed(2), InitMethod::Svd);
    let data = stream(400, 7);
    let sched = ReplacementScheduler { p0: 0.3, converge_step: 8, depth_bias: 1.0, extra_epochs: None };
    let (out, report) = train(&t, &s, &data, &data, &cfg(), Some(&sched), &mut |_| {}).unwrap();
    assert_eq!(hash_frozen(&out), hash_frozen(&s));
    assert!(out.deltas.iter().any(|(k, d)| d.a != s.deltas[k].a));
    assert_eq!(report.epochs.len(), 2);
    assert!(report.epochs.iter().all(|e| e.val_ppl > 0.0 && e.val_ppl.is_finite()));
    assert_eq!(report.converged_epoch, Some(2));
    assert!(report.epochs[0].replacement_rate < report.epochs[1].replacement_rate);
}

#[test]
fn p0_one_matches_no_scheduler() {
    let t = teacher(8);
    let s = student(&t, Rank::Fixed(2), InitMethod::Svd);
    let data = stream(400, 9);
    let sched = ReplacementScheduler { p0: 1.0, converge_step: 5, depth_bias: 0.5, extra_epochs: None };
    let a = train(&t, &s, &data, &data, &cfg(), Some(&sched), &mut |_| {}).unwrap();
    let b = train(&t, &s, &data, &data, &cfg(), None, &mut |_| {}).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1.epochs, b.1.epochs);
}

#[test]
fn training_is_deterministic_and_extra_epochs_stop_early() {
    let t = teacher(10);
    let s = student(&t, Rank::Fixed(2), InitMethod::Gaussian);
    let data = stream(400, 11);
    let sched = ReplacementScheduler { p0: 0.5, converge_step: 6, depth_bias: 0.0, extra_epochs: Some(1) };
    let c = TrainConfig { epochs: 5, ..cfg() };
    let a = train(&t, &s, &data, &data, &c, Some(&sched), &mut |_| {}).unwrap();
    let b = train(&t, &s, &data, &data, &c, Some(&sched), &mut |_| {}).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.1.converged_epoch, Some(1));
    assert_eq!(a.1.epochs.len(), 2);
    let f = a.1.final_ppl().unwrap();
    let thr = a.1.epochs_to_threshold.unwrap();
    assert!(a.1.epochs[thr - 1].val_ppl <= 1.05 * f);
    assert!(a.1.epochs[..thr - 1].iter().all(|e| e.val_ppl > 1.05 * f));
}

#[test]
fn full_rank_student_stays_at_teacher_ppl() {
    let t = teacher(12);
    let s = student(&t, Rank::Full, InitMethod::Svd);
    let data = stream(400, 13);
    let teacher_ppl = deltallm_core::model::perplexity(&t, &data[..65], 8, 2).unwrap();
    let sched = ReplacementScheduler { p0: 0.5, converge_step: 6, depth_bias: 0.0, extra_epochs: None };
    let c = TrainConfig { lr: 1e-4, ..cfg() };
    let (_, report) = train(&t, &s, &data, &data, &c, Some(&sched), &mut |_| {}).unwrap();
    for e in &report.epochs {
        assert!(e.val_ppl <= teacher_ppl + 1e-3, "{} vs {teacher_ppl}", e.val_ppl);
    }
}

#[test]
fn joint_mode_trains_adapters_and_merges() {
    let t = teacher(14);
    let s = student(&t, Rank::Fixed(2), InitMethod::Svd);
    let data = stream(400, 15);
    let c = TrainConfig { mode: TrainMode::Joint, lora_dropout: 0.1, ..cfg() };
    let (out, report) = train(&t, &s, &data, &data, &c, None, &mut |_| {}).unwrap();
    assert_eq!(out.weights.keys().collect::<Vec<_>>(), s.weights.keys().collect::<Vec<_>>());
    assert!(out.weights.iter().any(|(k, w)| w != &s.weights[k]));
    assert_eq!(out.backbone, s.backbone);
    // the final epoch was scored with unmerged adapters; merged weights must agree
    let ppl = deltallm_core::model::perplexity(&out, &data[..65], 8, 2).unwrap();
    assert!((ppl - report.final_ppl().unwrap()).abs() < 1e-9 * ppl);
}

#[test]
fn joint_mode_rejects_quantized_bases() {
    let t = teacher(16);
    let mut s = student(&t, Rank::Fixed(2), InitMethod::Svd);
    let site = *s.weights.keys().next().unwrap();
    let w = s.weights[&site].to_dense();
    let q = deltallm_core::quant::quantize_tensor(&w, deltallm_core::quant::QuantScheme::AbsmaxInt8, Default::default()).unwrap();
    s.weights.insert(site, StoredWeight::Quantized(q));
    let data = stream(400, 17);
    let c = TrainConfig { mode: TrainMode::Joint, ..cfg() };
    assert!(matches!(train(&t, &s, &data, &data, &c, None, &mut |_| {}), Err(Error::InvalidConfig(_))));
    // delta-only training works on a quantized base
    assert!(train(&t, &s, &data, &data, &cfg(), None, &mut |_| {}).is_ok());
}

#[test]
fn nan_loss_reports_step_and_lr() {
    let t = teacher(18);
    let mut s = student(&t, Rank::Fixed(2), InitMethod::Svd);
    let d = s.deltas.values_mut().next().unwrap();
    d.a.data_mut()[0] = f64::NAN;
    let data = stream(400, 19);
    match train(&t, &s, &data, &data, &cfg(), None, &mut |_| {}) {
        Err(Error::NanLoss { step, lr }) => {
            assert_eq!(step, 0);
            assert_eq!(lr, cfg().lr);
        }
        other => panic!("expected NaN abort, got {other:?}"),
    }
}

#[test]
fn invalid_configs_and_empty_corpus() {
    let t = teacher(20);
    let s = student(&t, Rank::Fixed(2), InitMethod::Svd);
    let data = stream(400, 21);
    for bad in [TrainConfig { alpha: 1.5, ..cfg() }, TrainConfig { batch_size: 0, ..cfg() }, TrainConfig { seq_len: 99, ..cfg() }] {
        assert!(matches!(train(&t, &s, &data, &data, &bad, None, &mut |_| {}), Err(Error::InvalidConfig(_))));
    }
    assert!(matches!(train(&t, &s, &[], &data, &cfg(), None, &mut |_| {}), Err(Error::EmptySample)));
}

#[test]
fn with_adapters_view_matches_merge() {
    let t = teacher(22);
    let s = student(&t, Rank::Fixed(2), InitMethod::Svd);
    let c = TrainConfig { mode: TrainMode::Joint, ..cfg() };
    let mut adapters = deltallm_core::pmr::init_adapters(&s, &c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for ad in adapters.values_mut() {
        ad.b = Tensor::randn(ad.b.shape(), 0.1, &mut rng);
    }
    let p = vec![stream(9, 23), stream(9, 24)];
    let view = forward(&WithAdapters { model: &s, adapters: &adapters }, &p).unwrap();
    let mut merged = s.clone();
    deltallm_core::pmr::merge_adapters(&mut merged, &adapters).unwrap();
    assert!(forward(&merged, &p).unwrap().max_abs_diff(&view) < 1e-10);
}
