//! Acceptance runner. Evaluates every acceptance criterion at its stated
//! tolerance and prints one PASS or FAIL line per criterion, followed by the
//! measured values. Outcomes are reported rather than enforced, so a
//! criterion whose inputs are unavailable shows up as FAIL without aborting
//! the rest.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use proia::harness::{run_experiment, ExperimentConfig, MetricsReport, Variant};
use proia::nn::Activation;
use proia::pretrain::LossTerm;

mod common;
use common::gradcheck::{check_encoder, check_head, TOLERANCE};
use common::invariants::normalization_sweep;
use common::reference::{auc_sweep, f1_sweep, jaccard_sweep, khop_sweep};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }

    fn fail(detail: impl Into<String>) -> Self {
        Self::new(false, detail)
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Benchmark config with its output redirected under `scratch`.
fn config(file: &str, scratch: &Path, tag: &str, f: impl FnOnce(&mut ExperimentConfig)) -> Result<ExperimentConfig, String> {
    let mut cfg = ExperimentConfig::load(&configs_dir().join(file)).map_err(|e| format!("{file}: {e}"))?;
    cfg.output_dir = scratch.join(tag);
    f(&mut cfg);
    Ok(cfg)
}

fn run(cfg: &ExperimentConfig) -> Result<MetricsReport, String> {
    let report = run_experiment(cfg).map_err(|e| format!("{}: {e}", cfg.output_dir.display()))?;
    if report.partial {
        let reasons: Vec<String> = report.seeds.iter().filter_map(|r| r.failure.clone()).collect();
        return Err(format!("{}: failed seeds: {}", cfg.output_dir.display(), reasons.join("; ")));
    }
    Ok(report)
}

fn mean(report: &MetricsReport, metric: &str) -> Result<f64, String> {
    report.mean(metric).ok_or_else(|| format!("{metric} missing from report {}", report.name))
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn within(d: Duration, limit_secs: u64) -> bool {
    d <= Duration::from_secs(limit_secs)
}

fn oracles() -> Outcome {
    let (res, took) = timed(|| -> Result<Vec<String>, String> {
        Ok(vec![
            format!("jaccard {}", jaccard_sweep(1000, 101)?),
            format!("khop {}", khop_sweep(1000, 102)?),
            format!("auc {}", auc_sweep(1000, 103)?),
            format!("weighted_f1 {}", f1_sweep(1000, 104)?),
        ])
    });
    match res {
        Ok(counts) => Outcome::new(
            within(took, 60),
            format!("instances matched: {}; {:.1}s (limit 60s)", counts.join(", "), took.as_secs_f64()),
        ),
        Err(e) => Outcome::fail(e),
    }
}

fn gradients() -> Outcome {
    let (errs, took) = timed(|| {
        [
            ("contrastive", check_encoder(LossTerm::Contrastive, Activation::Sigmoid)),
            ("information bottleneck", check_encoder(LossTerm::InformationBottleneck, Activation::Sigmoid)),
            ("attack", check_head(Activation::Tanh, 1.0)),
        ]
    });
    let worst = errs.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let listed: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect();
    Outcome::new(
        worst < TOLERANCE && within(took, 60),
        format!("relative errors: {} (limit {TOLERANCE:e}); {:.1}s", listed.join(", "), took.as_secs_f64()),
    )
}

fn normalization() -> Outcome {
    match normalization_sweep(1000, 105) {
        Ok(w) => Outcome::new(
            w.holds(),
            format!(
                "1000 parameterisations: max |row sum - 1| {:.1e}, max |norm - 1| {:.1e}, min KL {:.1e}",
                w.row_sum, w.unit_norm, w.min_kl
            ),
        ),
        Err(e) => Outcome::fail(e),
    }
}

/// Runs shared by the synthetic criteria.
struct Synthetic {
    vanilla: MetricsReport,
    vanilla_dir: PathBuf,
    took: Duration,
}

fn sanity(scratch: &Path) -> (Outcome, Option<Synthetic>) {
    let start = Instant::now();
    let res = (|| -> Result<(f64, f64, f64, MetricsReport, PathBuf), String> {
        let cfg = config("synthetic_mia.toml", scratch, "mia-vanilla", |c| c.variant = Variant::Vanilla)?;
        let mia = run(&cfg)?;
        let aia = run(&config("synthetic_aia.toml", scratch, "aia-vanilla", |c| c.variant = Variant::Vanilla)?)?;
        let auc = mean(&mia, "auc")?;
        let acc = mean(&aia, "accuracy")?;
        let base = mean(&aia, "majority_baseline")?;
        Ok((auc, acc, base, mia, cfg.output_dir))
    })();
    let took = start.elapsed();
    match res {
        Ok((auc, acc, base, vanilla, vanilla_dir)) => {
            let pass = auc > 0.65 && acc - base >= 0.10 && within(took, 300);
            let detail = format!(
                "MIA AUC {auc:.4} (> 0.65); AIA accuracy {acc:.4} vs majority {base:.4}, margin {:.4} (>= 0.10); {:.1}s (limit 300s)",
                acc - base,
                took.as_secs_f64()
            );
            (Outcome::new(pass, detail), Some(Synthetic { vanilla, vanilla_dir, took }))
        }
        Err(e) => (Outcome::fail(e), None),
    }
}

fn cora(scratch: &Path) -> Outcome {
    let probe = config("cora_mia.toml", scratch, "cora-probe", |_| {});
    let cfg = match probe {
        Ok(c) => c,
        Err(e) => return Outcome::fail(e),
    };
    if let proia::graph::DatasetSource::Directory { path } = &cfg.dataset.source {
        let dir = proia::graph::resolve_data_path(path);
        if !dir.join("features.tsv").exists() {
            return Outcome::fail(format!(
                "Cora not found at {} (set PROIA_DATA_DIR to a directory containing cora/); not evaluated",
                dir.display()
            ));
        }
    }
    let start = Instant::now();
    let res = (|| -> Result<(f64, f64), String> {
        let vanilla = run(&config("cora_mia.toml", scratch, "cora-vanilla", |c| c.variant = Variant::Vanilla)?)?;
        let full = run(&config("cora_mia.toml", scratch, "cora-full", |c| c.variant = Variant::Full)?)?;
        Ok((mean(&vanilla, "accuracy")?, mean(&full, "accuracy")?))
    })();
    let took = start.elapsed();
    match res {
        Ok((v, f)) => Outcome::new(
            f >= v && f >= 0.75 && within(took, 900),
            format!(
                "accuracy full {f:.4} vs vanilla {v:.4} (full >= vanilla and >= 0.75); {:.1}s (limit 900s)",
                took.as_secs_f64()
            ),
        ),
        Err(e) => Outcome::fail(e),
    }
}

fn defense(scratch: &Path, syn: Option<&Synthetic>) -> Outcome {
    let Some(syn) = syn else { return Outcome::fail("undefended vanilla run unavailable") };
    let res = (|| -> Result<(f64, f64, f64), String> {
        let vandp = |c: &mut ExperimentConfig| c.set_defense("vandp").expect("known defense");
        let dv = run(&config("synthetic_mia.toml", scratch, "mia-vanilla-vandp", |c| {
            c.variant = Variant::Vanilla;
            vandp(c);
        })?)?;
        let df = run(&config("synthetic_mia.toml", scratch, "mia-full-vandp", |c| {
            c.variant = Variant::Full;
            vandp(c);
        })?)?;
        Ok((mean(&syn.vanilla, "auc")?, mean(&dv, "auc")?, mean(&df, "auc")?))
    })();
    match res {
        Ok((clean, dv, df)) => Outcome::new(
            clean - dv >= 0.03 && df > dv,
            format!(
                "vanilla AUC {clean:.4} -> {dv:.4} under vandp (drop {:.4}, >= 0.03); full under vandp {df:.4} vs defended vanilla {dv:.4}",
                clean - dv
            ),
        ),
        Err(e) => Outcome::fail(e),
    }
}

fn score_vector(r: &MetricsReport) -> Vec<(u64, [u64; 3])> {
    r.seeds
        .iter()
        .filter_map(|s| s.scores.map(|x| (s.seed, [x.accuracy.to_bits(), x.weighted_f1.to_bits(), x.auc.to_bits()])))
        .collect()
}

fn ablations(scratch: &Path, syn: Option<&Synthetic>) -> Outcome {
    let Some(syn) = syn else { return Outcome::fail("vanilla run unavailable") };
    let res = (|| -> Result<Vec<String>, String> {
        let full = run(&config("synthetic_mia.toml", scratch, "mia-full", |c| c.variant = Variant::Full)?)?;
        let mut notes = Vec::new();
        let mut ok = true;
        for v in [Variant::PretrainOnly, Variant::DisentangleOnly] {
            let r = run(&config("synthetic_mia.toml", scratch, &format!("mia-{}", v.name()), |c| c.variant = v)?)?;
            let mine = score_vector(&r);
            let distinct = mine != score_vector(&syn.vanilla) && mine != score_vector(&full);
            ok &= distinct && mine.len() == r.seeds.len();
            notes.push(format!(
                "{} ran {} seeds, AUC {:.4}, distinct from vanilla and full: {distinct}",
                v.name(),
                mine.len(),
                mean(&r, "auc")?
            ));
        }
        if !ok {
            return Err(notes.join("; "));
        }
        notes.push(format!("vanilla AUC {:.4}, full AUC {:.4}", mean(&syn.vanilla, "auc")?, mean(&full, "auc")?));
        Ok(notes)
    })();
    match res {
        Ok(notes) => Outcome::new(true, notes.join("; ")),
        Err(e) => Outcome::fail(e),
    }
}

fn determinism(scratch: &Path, syn: Option<&Synthetic>) -> Outcome {
    let Some(syn) = syn else { return Outcome::fail("first vanilla run unavailable") };
    let res = (|| -> Result<Vec<String>, String> {
        let mut notes = Vec::new();
        let again = config("synthetic_mia.toml", scratch, "mia-vanilla-again", |c| c.variant = Variant::Vanilla)?;
        run(&again)?;
        let pairs = [
            (syn.vanilla_dir.clone(), again.output_dir.clone(), "vanilla"),
            (scratch.join("mia-full-vandp"), scratch.join("mia-full-vandp-again"), "full+vandp"),
        ];
        run(&config("synthetic_mia.toml", scratch, "mia-full-vandp-again", |c| {
            c.variant = Variant::Full;
            c.set_defense("vandp").expect("known defense");
        })?)?;
        for (a, b, what) in pairs {
            let ja = std::fs::read(a.join("metrics.json")).map_err(|e| format!("{}: {e}", a.display()))?;
            let jb = std::fs::read(b.join("metrics.json")).map_err(|e| format!("{}: {e}", b.display()))?;
            if ja != jb {
                return Err(format!("{what}: metrics.json differs between repeated runs"));
            }
            notes.push(format!("{what} identical ({} bytes)", ja.len()));
        }
        Ok(notes)
    })();
    match res {
        Ok(notes) => Outcome::new(true, notes.join("; ")),
        Err(e) => Outcome::fail(e),
    }
}

fn radar(syn: Option<&Synthetic>) -> Outcome {
    let Some(syn) = syn else { return Outcome::fail("MIA run unavailable") };
    let path = syn.vanilla_dir.join("radar.csv");
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => return Outcome::fail(format!("{}: {e}", path.display())),
    };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let mut rows = 0;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 7 {
            return Outcome::fail(format!("row {line:?} has {} cells, expected 7", cells.len()));
        }
        for c in &cells[1..] {
            match c.parse::<f64>() {
                Ok(v) if (0.0..=1.0).contains(&v) => {}
                _ => return Outcome::fail(format!("value {c:?} outside [0,1]")),
            }
        }
        rows += 1;
    }
    let pass = header.len() == 7 && rows == syn.vanilla.seeds.len() + 1;
    Outcome::new(pass, format!("{} axes: {}; {rows} rows (per seed + mean)", header.len() - 1, header[1..].join(", ")))
}

fn main() {
    let scratch = tempfile::tempdir().expect("scratch directory");
    let root = scratch.path();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("{} criterion {n}: {name}", if o.pass { "PASS" } else { "FAIL" });
        println!("      {}", o.detail);
        results.push((n, name, o));
    };

    report(1, "oracle equivalence", oracles());
    report(2, "gradient correctness", gradients());
    report(3, "normalization invariants", normalization());
    let (o, syn) = sanity(root);
    report(4, "pipeline sanity (overfit regime)", o);
    report(5, "prompt-enhanced attack beats vanilla on Cora", cora(root));
    report(6, "defense interaction", defense(root, syn.as_ref()));
    report(7, "ablation wiring", ablations(root, syn.as_ref()));
    report(8, "determinism", determinism(root, syn.as_ref()));
    report(9, "radar artifact", radar(syn.as_ref()));

    let passed = results.iter().filter(|(_, _, o)| o.pass).count();
    let failed: Vec<String> = results.iter().filter(|(_, _, o)| !o.pass).map(|(n, _, _)| n.to_string()).collect();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if !failed.is_empty() {
        println!("acceptance: failed criteria: {}", failed.join(", "));
    }
    if let Some(s) = &syn {
        println!("acceptance: synthetic sanity runs took {:.1}s", s.took.as_secs_f64());
    }
}
