use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cgrpo_cli::ablate::{cmd_ablate, AblateArgs, Axis};
use cgrpo_cli::commands::{cmd_eval, cmd_gen, cmd_score, tier_counts, EvalArgs, OutputRoot, ScoreArgs};
use cgrpo_cli::config::{Overrides, RunConfig};
use cgrpo_core::difficulty::{read_report, uniform_format_rate};
use cgrpo_core::policy::PolicyParams;
use cgrpo_core::synth::{generate_dataset, oracle_policy, write_dataset, DatasetSpec, Split};
use cgrpo_core::Policy64;

const TINY: &str = "\
[dataset]
count_a = 60
count_b = 40

[train]
total_steps = 20
base_steps = 10
base_samples = 50
batch_groups = 4

[curriculum]
stage_interval = 5
";

fn cgrpo(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgrpo")).env("CGRPO_OUT", out).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    if !dir.exists() {
        return Vec::new();
    }
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn save_dataset(path: &Path, spec: &DatasetSpec) {
    let samples = generate_dataset(spec).unwrap();
    let mut buf = Vec::new();
    write_dataset(&mut buf, &samples, spec, "fixture").unwrap();
    fs::write(path, buf).unwrap();
}

#[test]
fn gen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(TINY, &Overrides::default()).unwrap();
    let mut sink = Vec::new();
    let a = cmd_gen(&cfg, &OutputRoot::new(tmp.path().join("a")), Path::new("d.jsonl"), &mut sink).unwrap();
    let b = cmd_gen(&cfg, &OutputRoot::new(tmp.path().join("b")), Path::new("d.jsonl"), &mut sink).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 101);
    assert!(tmp.path().join("a/d.summary.json").exists());

    let config = write_config(tmp.path(), TINY);
    let o = cgrpo(&tmp.path().join("c"), &["gen", "--config", config.to_str().unwrap(), "--out", "d.jsonl"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&a).unwrap(), fs::read(tmp.path().join("c/d.jsonl")).unwrap());
}

#[test]
fn malformed_config_exits_2_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    for text in ["[dataset]\ncount_a = \"many\"\n", "[train]\nlearning_rate = 0.1\n", "[train\n", "[dataset]\ncount_a = 0\ncount_b = 0\n"] {
        let config = write_config(tmp.path(), text);
        let o = cgrpo(&out, &["gen", "--config", config.to_str().unwrap()]);
        assert_eq!(code(&o), 2, "{text}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = cgrpo(&out, &["gen", "--preset", "laptop"]);
    assert_eq!(code(&o), 2);
    let o = cgrpo(&out, &["gen", "--out", "../escape.jsonl"]);
    assert_eq!(code(&o), 2);
    assert!(files_under(&out).is_empty());
    assert!(!tmp.path().join("escape.jsonl").exists());
}

#[test]
fn scoring_splits_a_thousand_samples_into_tertiles() {
    let tmp = tempfile::tempdir().unwrap();
    let root = OutputRoot::new(tmp.path());
    let cfg = RunConfig::default();
    let mut sink = Vec::new();
    let data = cmd_gen(&cfg, &root, Path::new("d.jsonl"), &mut sink).unwrap();
    let ckpt = tmp.path().join("base.txt");
    let base: Policy64 = cfg.train.init.build(&cfg.dataset).unwrap();
    base.save(&ckpt, Some(&cfg.hash())).unwrap();
    let args = ScoreArgs { dataset: &data, checkpoint: &ckpt, out: Path::new("r.jsonl"), group_size: None, strict: true };
    let report = cmd_score(&cfg, &root, &args, &mut sink).unwrap();
    let (header, records) = read_report(&report).unwrap();
    assert_eq!(header.count, 1000);
    assert_eq!(tier_counts(&records), [333, 333, 334]);
    let text = String::from_utf8(sink).unwrap();
    assert!(text.contains("333/333/334"), "{text}");
}

#[test]
fn strict_scoring_rejects_foreign_checkpoint_with_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = cgrpo(&out, &["gen", "--out", "d.jsonl"]);
    assert_eq!(code(&o), 0);
    let cfg = RunConfig::default();
    let ckpt = tmp.path().join("base.txt");
    let base: Policy64 = cfg.train.init.build(&cfg.dataset).unwrap();
    base.save(&ckpt, Some("0000")).unwrap();
    let data = out.join("d.jsonl");
    let args = ["score", "--dataset", data.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()];
    let strict = cgrpo(&out, &[&args[..], &["--strict"]].concat());
    assert_eq!(code(&strict), 3, "{}", String::from_utf8_lossy(&strict.stderr));
    assert!(!out.join("difficulty.jsonl").exists());
    let lax = cgrpo(&out, &args);
    assert_eq!(code(&lax), 0, "{}", String::from_utf8_lossy(&lax.stderr));
}

#[test]
fn every_strategy_is_accepted_and_dry_run_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let config = write_config(tmp.path(), TINY);
    for s in ["curriculum", "uniform", "easy_only", "hard_only", "full_direct"] {
        let o = cgrpo(&out, &["train", "--config", config.to_str().unwrap(), "--strategy", s, "--dry-run"]);
        assert_eq!(code(&o), 0, "{s}: {}", String::from_utf8_lossy(&o.stderr));
        let text = String::from_utf8(o.stdout).unwrap();
        assert!(text.starts_with("# config_hash="), "{text}");
        assert!(text.lines().count() > 2);
    }
    assert!(files_under(&out).is_empty());
    let o = cgrpo(&out, &["train", "--strategy", "anti_curriculum", "--dry-run"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_then_resume_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let config = write_config(tmp.path(), TINY);
    let o = cgrpo(&out, &["train", "--config", config.to_str().unwrap(), "--seed", "3", "--name", "r1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("held-out"), "{text}");
    let run = out.join("runs/r1");
    for f in ["config.toml", "metrics.jsonl", "eval.json", "final_policy.txt", "difficulty.jsonl", "timing.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 21);
    let metrics = fs::read(run.join("metrics.jsonl")).unwrap();
    let o = cgrpo(&out, &["train", "--resume", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(run.join("metrics.jsonl")).unwrap(), metrics);
    // the name is taken
    let o = cgrpo(&out, &["train", "--config", config.to_str().unwrap(), "--name", "r1"]);
    assert_eq!(code(&o), 2);
    // an edited saved config no longer matches its hash line
    let saved = fs::read_to_string(run.join("config.toml")).unwrap();
    fs::write(run.join("config.toml"), saved.replace("total_steps = 20", "total_steps = 21")).unwrap();
    let o = cgrpo(&out, &["train", "--resume", run.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_oracle_and_zero_policy() {
    let tmp = tempfile::tempdir().unwrap();
    let root = OutputRoot::new(tmp.path());
    let spec = DatasetSpec::easy_only(1000, 5);
    let data = tmp.path().join("easy.jsonl");
    save_dataset(&data, &spec);
    let oracle = tmp.path().join("oracle.txt");
    oracle_policy::<f64>(&spec, 50.0).unwrap().save(&oracle, None).unwrap();
    let mut sink = Vec::new();
    let args = EvalArgs {
        checkpoint: &oracle,
        dataset: &data,
        split: Split::Heldout,
        report: None,
        threshold: 0.5,
        seed: 0,
        out: Some(Path::new("eval.json")),
    };
    let r = cmd_eval(&root, &args, &mut sink).unwrap();
    assert_eq!((r.overall.count, r.overall.hit_rate), (200, 1.0));
    assert!(tmp.path().join("eval.json").exists());

    let zero = tmp.path().join("zero.txt");
    Policy64::zeros(spec.vocab().unwrap(), spec.dim).save(&zero, None).unwrap();
    let r = cmd_eval(&root, &EvalArgs { checkpoint: &zero, split: Split::All, out: None, ..args }, &mut sink).unwrap();
    let p = 1.0 - uniform_format_rate(&spec.vocab().unwrap());
    let sigma = (p * (1.0 - p) / 1000.0).sqrt();
    assert!((r.overall.format_violation_rate - p).abs() < 4.0 * sigma, "{} vs {p}", r.overall.format_violation_rate);
}

#[test]
fn eval_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let tiny = tmp.path().join("tiny.jsonl");
    save_dataset(&tiny, &DatasetSpec { count_a: 2, count_b: 2, ..DatasetSpec::default() });
    let ckpt = tmp.path().join("p.txt");
    Policy64::zeros(DatasetSpec::default().vocab().unwrap(), DatasetSpec::default().dim).save(&ckpt, None).unwrap();
    let o = cgrpo(&out, &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", tiny.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let o = cgrpo(&out, &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", tiny.to_str().unwrap(), "--split", "all"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let narrow = tmp.path().join("narrow.txt");
    let v16 = cgrpo_core::boxcodec::Vocab::new(16).unwrap();
    PolicyParams::<f64>::zeros(v16, DatasetSpec::default().dim).save(&narrow, None).unwrap();
    let o = cgrpo(&out, &["eval", "--checkpoint", narrow.to_str().unwrap(), "--dataset", tiny.to_str().unwrap(), "--split", "all"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let o = cgrpo(&out, &["eval", "--checkpoint", tiny.to_str().unwrap(), "--dataset", tiny.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn ablation_writes_cell_and_aggregate_rows_and_reuses_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let root = OutputRoot::new(tmp.path());
    let cfg = RunConfig::parse(TINY, &Overrides::default()).unwrap();
    let args = AblateArgs {
        axis: Axis::BetaKl,
        values: Some(vec!["0".into(), "0.3".into()]),
        seeds: Some(vec![0, 1]),
        jobs: 2,
        out: Path::new("beta.csv"),
    };
    let mut sink = Vec::new();
    let rows = cmd_ablate(&cfg, &root, &args, &mut sink).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.status == "ok"), "{rows:?}");
    let csv = fs::read_to_string(tmp.path().join("beta.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2 + 4 + 2);
    assert!(lines[0].starts_with("# config_hash="));
    assert_eq!(lines.iter().filter(|l| l.contains(",mean,")).count(), 2);
    let again = cmd_ablate(&cfg, &root, &args, &mut sink).unwrap();
    assert!(again.iter().all(|r| r.status == "reused"));
    let strip = |rs: &[cgrpo_cli::ablate::CellResult]| rs.iter().map(|r| (r.final_mean_iou, r.steps_to_threshold)).collect::<Vec<_>>();
    assert_eq!(strip(&rows), strip(&again));
}

#[test]
fn schedule_command_prints_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cgrpo(tmp.path(), &["schedule", "--every", "500"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    // header comment, column names, steps 0..=2000 by 500
    assert_eq!(text.lines().count(), 2 + 5, "{text}");
}
