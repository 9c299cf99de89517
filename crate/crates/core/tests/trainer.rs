use std::fs;

use cgrpo_core::boxcodec::Vocab;
use cgrpo_core::curriculum::CurriculumConfig;
use cgrpo_core::difficulty::ScoringConfig;
use cgrpo_core::grpo::{batch_objective, RewardWeights};
use cgrpo_core::optim::Adam;
use cgrpo_core::policy::{Context, PolicyParams, SamplerConfig};
use cgrpo_core::rng;
use cgrpo_core::synth::{generate_dataset, DatasetSpec};
use cgrpo_core::trainer::{
    latest_checkpoint, load_checkpoint, rollout_batch, save_checkpoint, train, train_step, PhaseState, RunLayout,
    RunOptions, RunSpec, TrainConfig, TrainMetrics,
};
use rand::Rng as _;

fn spec(seed: u64, total_steps: usize) -> RunSpec {
    RunSpec {
        train: TrainConfig { total_steps, base_steps: 20, base_samples: 60, batch_groups: 4, seed, ..TrainConfig::default() },
        curriculum: CurriculumConfig { stage_interval: 10, ..CurriculumConfig::default() },
        reward: RewardWeights::default(),
        scoring: ScoringConfig::default(),
        dataset: DatasetSpec { count_a: 40, count_b: 30, seed, ..DatasetSpec::default() },
        config_hash: format!("test-{seed}-{total_steps}"),
    }
}

fn metrics(dir: &std::path::Path) -> Vec<TrainMetrics> {
    fs::read_to_string(RunLayout::new(dir).metrics())
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn identical_runs_write_identical_files() {
    let s = spec(4, 30);
    let samples = generate_dataset(&s.dataset).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train::<f64>(&s, &samples, a.path(), RunOptions::default()).unwrap();
    // a different thread count must not change anything
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| train::<f64>(&s, &samples, b.path(), RunOptions::default())).unwrap();
    let (la, lb) = (RunLayout::new(a.path()), RunLayout::new(b.path()));
    for (x, y) in [
        (la.metrics(), lb.metrics()),
        (la.base_metrics(), lb.base_metrics()),
        (la.difficulty(), lb.difficulty()),
        (la.final_policy(), lb.final_policy()),
        (la.eval(), lb.eval()),
    ] {
        assert_eq!(fs::read(&x).unwrap(), fs::read(&y).unwrap(), "{}", x.display());
    }
    assert_eq!(metrics(a.path()).len(), 30);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let s = spec(5, 40);
    let samples = generate_dataset(&s.dataset).unwrap();
    let full = tempfile::tempdir().unwrap();
    train::<f64>(&s, &samples, full.path(), RunOptions::default()).unwrap();
    let cut = tempfile::tempdir().unwrap();
    // stops between checkpoints at 24 and 28
    let halted = train::<f64>(&s, &samples, cut.path(), RunOptions { halt_after: Some(26), ..RunOptions::default() }).unwrap();
    assert!(halted.eval.is_none());
    assert_eq!(metrics(cut.path()).len(), 26);
    train::<f64>(&s, &samples, cut.path(), RunOptions { resume: true, ..RunOptions::default() }).unwrap();
    let (lf, lc) = (RunLayout::new(full.path()), RunLayout::new(cut.path()));
    assert_eq!(fs::read(lf.metrics()).unwrap(), fs::read(lc.metrics()).unwrap());
    assert_eq!(fs::read(lf.final_policy()).unwrap(), fs::read(lc.final_policy()).unwrap());
    assert_eq!(fs::read(lf.eval()).unwrap(), fs::read(lc.eval()).unwrap());
    assert_eq!(fs::read_to_string(lc.timing()).unwrap().lines().count(), 41);
}

#[test]
fn single_precision_run_completes() {
    let s = spec(6, 10);
    let samples = generate_dataset(&s.dataset).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train::<f32>(&s, &samples, dir.path(), RunOptions::default()).unwrap();
    assert!(out.eval.unwrap().overall.mean_iou.is_finite());
}

#[test]
fn repeated_steps_on_a_fixed_batch_raise_the_objective() {
    let ds = DatasetSpec { count_a: 20, count_b: 10, ..DatasetSpec::default() };
    let samples = generate_dataset(&ds).unwrap();
    let weights = RewardWeights::default();
    let mut improved = 0;
    for seed in 0..20u64 {
        let cfg = TrainConfig { seed, batch_groups: 4, ..TrainConfig::default() };
        let mut r = rng::seeded(seed);
        let mut theta0: PolicyParams<f64> = cfg.init.build(&ds).unwrap();
        for w in theta0.as_mut_slice() {
            *w += r.random_range(-0.05..0.05);
        }
        let ids: Vec<u64> = (0..4).map(|_| r.random_range(0..samples.len() as u64)).collect();
        let groups = rollout_batch(&theta0, &samples, &ids, &cfg, &weights, 0, 0).unwrap();
        let reference = theta0.snapshot();
        let before = batch_objective(&theta0, &groups, &reference, &weights);
        let mut theta = theta0.clone();
        let mut adam = Adam::new(cfg.adam, theta.len());
        for step in 0..50 {
            train_step(&mut theta, &groups, &reference, &weights, &mut adam, 1e-3, step).unwrap();
        }
        improved += usize::from(batch_objective(&theta, &groups, &reference, &weights) > before);
    }
    assert!(improved >= 18, "{improved}/20");
}

#[test]
fn degenerate_batch_leaves_parameters_unchanged() {
    // every candidate is malformed under a prior that forbids sentinels in
    // coordinate slots, so all groups have equal rewards
    let ds = DatasetSpec { count_a: 10, count_b: 10, ..DatasetSpec::default() };
    let samples = generate_dataset(&ds).unwrap();
    let v = ds.vocab().unwrap();
    let mut theta = PolicyParams::<f64>::format_prior(v, ds.dim, 0, -50.0);
    let cfg = TrainConfig { batch_groups: 8, ..TrainConfig::default() };
    let weights = RewardWeights::default();
    let ids: Vec<u64> = (0..8).collect();
    let groups = rollout_batch(&theta, &samples, &ids, &cfg, &weights, 0, 0).unwrap();
    assert!(groups.iter().all(|g| g.degenerate));
    let before = theta.clone();
    let reference = theta.snapshot();
    let mut adam = Adam::new(cfg.adam, theta.len());
    train_step(&mut theta, &groups, &reference, &weights, &mut adam, 1.0, 0).unwrap();
    let worst = theta.as_slice().iter().zip(before.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-10, "{worst}");
}

#[test]
fn checkpoint_round_trip_preserves_state() {
    let ds = DatasetSpec::default();
    let v: Vocab = ds.vocab().unwrap();
    let cfg = TrainConfig { seed: 11, ..TrainConfig::default() };
    let mut r = rng::seeded(11);
    let theta = PolicyParams::<f64>::random(v, ds.dim, 0.7, &mut r);
    let mut state = PhaseState::new(theta, &cfg, 1);
    state.theta = PolicyParams::random(v, ds.dim, 0.7, &mut r);
    state.step = 17;
    let _: u64 = state.batch_rng.random();
    let dir = tempfile::tempdir().unwrap();
    let layout = RunLayout::new(dir.path());
    save_checkpoint(&layout, &state, "abc").unwrap();
    let path = latest_checkpoint(&layout).unwrap().unwrap();
    let mut back = load_checkpoint::<f64>(&path, &cfg, "abc").unwrap();
    assert_eq!(back.step, 17);
    assert!(load_checkpoint::<f64>(&path, &cfg, "other").is_err());
    let sampler = SamplerConfig::default();
    for _ in 0..100 {
        let x = Context::from_f64(&(0..ds.dim).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<_>>()).unwrap();
        let s = state.theta.sample(&x, &sampler, &mut r);
        assert!((state.theta.log_prob(&x, &s) - back.theta.log_prob(&x, &s)).abs() < 1e-12);
        assert!((state.reference.log_prob(&x, &s) - back.reference.log_prob(&x, &s)).abs() < 1e-12);
    }
    assert_eq!(state.adam.state(), back.adam.state());
    let a: u64 = state.batch_rng.random();
    let b: u64 = back.batch_rng.random();
    assert_eq!(a, b);
}

#[test]
fn reward_spread_shrinks_as_training_sharpens_the_policy() {
    let mut s = spec(7, 300);
    s.dataset = DatasetSpec { count_a: 100, count_b: 50, seed: 7, ..DatasetSpec::default() };
    let samples = generate_dataset(&s.dataset).unwrap();
    let dir = tempfile::tempdir().unwrap();
    train::<f64>(&s, &samples, dir.path(), RunOptions::default()).unwrap();
    let m = metrics(dir.path());
    let spread = |xs: &[TrainMetrics]| xs.iter().map(|m| m.reward_std).sum::<f64>() / xs.len() as f64;
    let (early, late) = (spread(&m[..60]), spread(&m[240..]));
    assert!(late < early, "early {early} late {late}");
}
