//! End-to-end runs on small synthetic graphs: reports, determinism,
//! persistence, plot data and the stage-by-stage CLI.

use std::path::Path;
use std::process::Command;

use proia::attack_data::AttackDataset;
use proia::harness::{self, read_predictions, write_predictions, ExperimentConfig, MetricsReport, RunMeta, Variant, Victims};
use proia::persist;

const SMALL: &str = r#"
name = "small"
attack = "mia"
variant = "vanilla"
seeds = [0, 1, 2]
output_dir = "unused"

[dataset]
name = "two-block-200"
seed = 3

[dataset.source]
kind = "synthetic"
blocks = [100, 100]
p_intra = 0.03
p_inter = 0.003
feature_dim = 64
num_classes = 2
feature_on = 0.2
feature_off = 0.05

[pretrain]
hidden_dim = 16
learning_rate = 0.005
epochs = 10

[victim]
kind = "gcn"
hidden_dim = 16
learning_rate = 0.01
epochs = 60
condition_training = false

[attack_head.mlp]
hidden = 16
epochs = 30

[attack_head.disentangle]
channels = 2
depth = 2
dim = 8
knn = 5
epochs = 20
"#;

fn small(out: &Path, f: impl FnOnce(&mut ExperimentConfig)) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(SMALL).unwrap();
    cfg.output_dir = out.to_path_buf();
    f(&mut cfg);
    cfg
}

#[test]
fn vanilla_report_has_one_row_per_seed_and_consistent_means() {
    let dir = tempfile::tempdir().unwrap();
    let report = harness::run_experiment(&small(dir.path(), |_| {})).unwrap();
    assert!(!report.partial);
    assert_eq!(report.seeds.len(), 3);
    let csv = std::fs::read_to_string(dir.path().join("per_seed.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    for metric in ["accuracy", "weighted_f1", "auc"] {
        let values: Vec<f64> = report
            .seeds
            .iter()
            .map(|r| {
                let s = r.scores.unwrap();
                match metric {
                    "accuracy" => s.accuracy,
                    "weighted_f1" => s.weighted_f1,
                    _ => s.auc,
                }
            })
            .collect();
        assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = values.iter().sum::<f64>() / 3.0;
        assert!((report.mean(metric).unwrap() - mean).abs() < 1e-12);
    }
    let loaded = MetricsReport::load(dir.path()).unwrap();
    assert_eq!(loaded.seeds.len(), 3);
    for s in 0..3 {
        assert!(dir.path().join(format!("roc_seed{s}.csv")).exists());
        assert!(dir.path().join(format!("seed-{s}/predictions.csv")).exists());
        assert!(dir.path().join(format!("seed-{s}/run_meta.json")).exists());
    }
}

#[test]
fn repeated_runs_give_identical_metrics_json() {
    for variant in [Variant::Vanilla, Variant::Full] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let set = |c: &mut ExperimentConfig| {
            c.variant = variant;
            c.seeds = vec![4];
        };
        harness::run_experiment(&small(a.path(), set)).unwrap();
        harness::run_experiment(&small(b.path(), set)).unwrap();
        let ja = std::fs::read(a.path().join("metrics.json")).unwrap();
        let jb = std::fs::read(b.path().join("metrics.json")).unwrap();
        assert_eq!(ja, jb, "{variant:?}");
        let pa = std::fs::read(a.path().join("seed-4/predictions.csv")).unwrap();
        let pb = std::fs::read(b.path().join("seed-4/predictions.csv")).unwrap();
        assert_eq!(pa, pb);
    }
}

#[test]
fn variants_differ_in_recorded_stages() {
    let dir = tempfile::tempdir().unwrap();
    let mut metas = Vec::new();
    for variant in [Variant::Vanilla, Variant::PretrainOnly, Variant::DisentangleOnly, Variant::Full] {
        let out = dir.path().join(variant.name());
        let cfg = small(&out, |c| {
            c.variant = variant;
            c.seeds = vec![1];
        });
        harness::run_experiment(&cfg).unwrap();
        let meta: RunMeta = persist::read_json(&out.join("seed-1/run_meta.json")).unwrap();
        metas.push((variant, meta, std::fs::read(out.join("metrics.json")).unwrap()));
    }
    for (v, meta, _) in &metas {
        assert_eq!(meta.stages.iter().any(|s| s == "pretrain"), v.uses_prompts(), "{v:?}");
        let head = if v.uses_disentangle() { "attack:disentangle" } else { "attack:mlp" };
        assert!(meta.stages.iter().any(|s| s == head), "{v:?}");
    }
    // same data split for every variant, different attack artifacts
    for i in 0..metas.len() {
        for j in i + 1..metas.len() {
            assert_eq!(metas[i].1.split_digest, metas[j].1.split_digest);
            assert_ne!(metas[i].1.attack_head, metas[j].1.attack_head);
            assert_ne!(metas[i].2, metas[j].2);
        }
    }
}

#[test]
fn attack_artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), |c| {
        c.variant = Variant::Full;
        c.seeds = vec![2];
        c.save_models = true;
    });
    harness::run_experiment(&cfg).unwrap();
    let seed_dir = dir.path().join("seed-2");

    let preds = read_predictions(&seed_dir.join("predictions.csv")).unwrap();
    assert!(!preds.is_empty());
    let copy = dir.path().join("copy.csv");
    write_predictions(&copy, &preds).unwrap();
    assert_eq!(read_predictions(&copy).unwrap(), preds);
    assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(seed_dir.join("predictions.csv")).unwrap());

    let ds = AttackDataset::load(&seed_dir.join("attack_data")).unwrap();
    let again = dir.path().join("again");
    ds.save(&again).unwrap();
    assert_eq!(AttackDataset::load(&again).unwrap(), ds);

    let victims = Victims::load(&seed_dir.join("victims")).unwrap();
    let vdir = dir.path().join("victims");
    victims.save(&vdir).unwrap();
    let back = Victims::load(&vdir).unwrap();
    assert_eq!(back.target.params, victims.target.params);
    assert_eq!(back.target.fingerprint, victims.target.fingerprint);
    assert!(seed_dir.join("pretrain/prompts.bin").exists());
    assert!(seed_dir.join("routed.csv").exists());
}

#[test]
fn plot_data_covers_roc_defense_and_channel_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for k in [2usize, 4, 8] {
        let out = dir.path().join(format!("k{k}"));
        let cfg = small(&out, |c| {
            c.name = format!("k{k}");
            c.variant = Variant::DisentangleOnly;
            c.seeds = vec![0];
            c.attack_head.disentangle.channels = k;
        });
        harness::run_experiment(&cfg).unwrap();
        reports.push(out);
    }
    let defended = dir.path().join("vandp");
    let cfg = small(&defended, |c| {
        c.name = "vanilla-vandp".into();
        c.seeds = vec![0];
        c.set_defense("vandp").unwrap();
    });
    harness::run_experiment(&cfg).unwrap();
    reports.push(defended);

    let plots = dir.path().join("plots");
    let written = harness::emit_plots(&reports, &plots).unwrap();
    assert!(written.iter().all(|p| p.exists()));

    let ks = std::fs::read_to_string(plots.join("k_sensitivity.csv")).unwrap();
    let rows: Vec<&str> = ks.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    let channels: Vec<&str> = rows.iter().map(|r| r.split(',').nth(2).unwrap()).collect();
    assert_eq!(channels, vec!["2", "4", "8"]);

    let sweep = std::fs::read_to_string(plots.join("defense_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 5);
    assert!(sweep.lines().any(|l| l.starts_with("vanilla-vandp,vanilla,vandp,0.2,")));

    assert!(plots.join("roc_k2.csv").exists());
    let radar = std::fs::read_to_string(plots.join("radar.csv")).unwrap();
    assert_eq!(radar.lines().count(), 5);

    assert!(harness::emit_plots(&[], &plots).is_err());
    assert!(harness::emit_plots(&[dir.path().join("missing")], &plots).is_err());
}

#[test]
fn aia_run_reports_majority_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), |c| {
        c.attack = proia::attack_data::AttackKind::Aia;
        c.seeds = vec![0];
    });
    let report = harness::run_experiment(&cfg).unwrap();
    let s = report.seeds[0].scores.unwrap();
    assert!((0.0..=1.0).contains(&s.majority_baseline));
    assert!(!dir.path().join("radar.csv").exists());
}

#[test]
fn cli_stages_chain_and_match_a_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("small.toml");
    let cfg = small(&dir.path().join("run"), |c| {
        c.variant = Variant::Full;
        c.seeds = vec![0];
    });
    std::fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();
    let stage_dir = dir.path().join("stages");
    let bin = env!("CARGO_BIN_EXE_proia");
    for stage in ["pretrain", "train-victim", "build-attack-data", "attack"] {
        let out = Command::new(bin)
            .args([stage, "--config"])
            .arg(&cfg_path)
            .args(["--seed", "0", "--out"])
            .arg(&stage_dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = Command::new(bin).args(["run", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let staged = std::fs::read(stage_dir.join("predictions.csv")).unwrap();
    let whole = std::fs::read(dir.path().join("run/seed-0/predictions.csv")).unwrap();
    assert_eq!(staged, whole);

    let bad = Command::new(bin).args(["run", "--config"]).arg(&cfg_path).args(["--variant", "bogus"]).output().unwrap();
    assert!(!bad.status.success());
    let missing = Command::new(bin)
        .args(["train-victim", "--config"])
        .arg(&cfg_path)
        .args(["--out"])
        .arg(dir.path().join("empty"))
        .output()
        .unwrap();
    assert!(!missing.status.success(), "prompted stage must need pretrain artifacts");
}
