//! Experiment orchestration: configuration, per-seed pipelines, reports and
//! plot-data emission.
//!
//! A run directory holds `metrics.json` (byte-stable for a given config),
//! `per_seed.csv`, `roc_seed<S>.csv` for binary attacks, `radar.csv` for
//! membership inference, `timing.json`, and one `seed-<S>/` directory per seed
//! with stage artifacts, predictions and run metadata.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::attack_data::{self, AttackDataset, AttackKind, Origin, QueryOptions};
use crate::defense::{DefenseKind, DefenseSpec};
use crate::disentangle::{self, AttackModel, DisentangleConfig, MlpConfig};
use crate::error::{Error, Result};
use crate::graph::{self, DatasetSpec, Graph, NodeSplit};
use crate::metrics;
use crate::nn::{argmax_rows, derive_seed};
use crate::persist;
use crate::pretrain::{self, PretrainConfig, PretrainOutput, PromptFeature};
use crate::victim::{self, BackboneSpec, ModelHandle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Vanilla,
    PretrainOnly,
    DisentangleOnly,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Vanilla, Variant::PretrainOnly, Variant::DisentangleOnly, Variant::Full];

    pub fn uses_prompts(self) -> bool {
        matches!(self, Variant::PretrainOnly | Variant::Full)
    }

    pub fn uses_disentangle(self) -> bool {
        matches!(self, Variant::DisentangleOnly | Variant::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::PretrainOnly => "pretrain_only",
            Variant::DisentangleOnly => "disentangle_only",
            Variant::Full => "full",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AttackHeadConfig {
    /// Append prompt vectors to attack rows.
    pub append_prompt: bool,
    pub mlp: MlpConfig,
    pub disentangle: DisentangleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub attack: AttackKind,
    #[serde(default)]
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub victim: BackboneSpec,
    #[serde(default)]
    pub attack_head: AttackHeadConfig,
    #[serde(default)]
    pub defense: Option<DefenseSpec>,
    /// Persist encoder and victim weights for every seed.
    #[serde(default = "yes")]
    pub save_models: bool,
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.attack_head.append_prompt && !self.variant.uses_prompts() {
            return Err(Error::Config(format!(
                "append_prompt needs prompt features, which variant {} does not produce",
                self.variant.name()
            )));
        }
        self.pretrain.validate()?;
        self.victim.validate()?;
        self.attack_head.disentangle.validate()?;
        self.dataset.split.validate()?;
        if let Some(d) = &self.defense {
            d.validate()?;
        }
        Ok(())
    }

    /// Override the defense by kind name (`none`, `vandp`, `neighb`), keeping
    /// configured parameters when the kind matches.
    pub fn set_defense(&mut self, name: &str) -> Result<()> {
        let kind = match name {
            "none" => {
                self.defense = None;
                return Ok(());
            }
            "vandp" => DefenseKind::Vandp,
            "neighb" => DefenseKind::Neighb,
            other => return Err(Error::Config(format!("unknown defense {other:?}"))),
        };
        match &mut self.defense {
            Some(d) if d.kind == kind => {}
            slot => *slot = Some(DefenseSpec::new(kind)),
        }
        Ok(())
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("seed-{seed}"))
    }
}

/// Everything fixed by the config and seed before any training.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub graph: Graph,
    pub split: NodeSplit,
}

impl Context {
    pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut spec = cfg.dataset.clone();
        spec.seed = spec.seed.wrapping_add(seed);
        let (graph, split) = graph::load_dataset(&spec)?;
        split.validate(graph.node_count(), cfg.attack == AttackKind::Mia)?;
        if cfg.attack == AttackKind::Aia && graph.sensitive().is_none() {
            return Err(Error::MissingSensitive);
        }
        Ok(Self { cfg: cfg.clone(), seed, graph, split })
    }

    fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig { seed: derive_seed(self.cfg.pretrain.seed ^ self.seed, "pretrain"), ..self.cfg.pretrain.clone() }
    }

    /// Nodes whose class labels the adversary may use for pre-training.
    fn adversary_labelled(&self) -> Vec<usize> {
        match self.cfg.attack {
            AttackKind::Mia => self.split.shadow_pool(),
            AttackKind::Aia => self.split.attack_train.clone(),
        }
    }

    pub fn pretrain(&self) -> Result<Option<PretrainOutput>> {
        if !self.cfg.variant.uses_prompts() {
            return Ok(None);
        }
        let labelled = self.adversary_labelled();
        pretrain::pretrain(&self.graph, &self.pretrain_config(), Some(&labelled)).map(Some)
    }

    pub fn train_victims(&self, prompts: Option<&PromptFeature>) -> Result<Victims> {
        let spec = &self.cfg.victim;
        match self.cfg.attack {
            AttackKind::Mia => {
                let train_on = |train: &[usize], test: &[usize], tag: &str| -> Result<ModelHandle> {
                    let pool: Vec<usize> = train.iter().chain(test).copied().collect();
                    let (sub, mapping) = self.graph.induced_subgraph(&pool)?;
                    let local: Vec<usize> = train.iter().map(|v| mapping.binary_search(v).expect("pool node")).collect();
                    let sub_prompt = prompts.map(|p| p.select(&mapping));
                    victim::train_victim(&sub, &local, spec, sub_prompt.as_ref(), derive_seed(self.seed, tag))
                };
                let target = train_on(&self.split.target_train, &self.split.target_test, "target")?;
                let shadow = train_on(&self.split.shadow_train, &self.split.shadow_test, "shadow")?;
                Ok(Victims { target, shadow: Some(shadow) })
            }
            AttackKind::Aia => {
                let target = victim::train_victim(
                    &self.graph,
                    &self.split.target_train,
                    spec,
                    prompts,
                    derive_seed(self.seed, "target"),
                )?;
                Ok(Victims { target, shadow: None })
            }
        }
    }

    pub fn query_options(&self, prompts: Option<&PromptFeature>) -> QueryOptions {
        QueryOptions {
            append_prompt: self.cfg.attack_head.append_prompt && prompts.is_some(),
            defense: self.cfg.defense.clone().map(|d| DefenseSpec { seed: derive_seed(d.seed ^ self.seed, "defense"), ..d }),
        }
    }

    pub fn build_attack_data(&self, victims: &Victims, prompts: Option<&PromptFeature>) -> Result<AttackDataset> {
        let opts = self.query_options(prompts);
        match (self.cfg.attack, &victims.shadow) {
            (AttackKind::Mia, Some(shadow)) => {
                attack_data::build_mia_dataset(shadow, &victims.target, &self.graph, &self.split, prompts, &opts)
            }
            (AttackKind::Mia, None) => Err(Error::Config("membership inference needs a shadow model".into())),
            (AttackKind::Aia, _) => attack_data::build_aia_dataset(&victims.target, &self.graph, &self.split, prompts, &opts),
        }
    }

    pub fn train_attack(&self, ds: &AttackDataset) -> Result<AttackModel> {
        let head = &self.cfg.attack_head;
        let seed = derive_seed(self.seed, "attack");
        if self.cfg.variant.uses_disentangle() {
            let cfg = DisentangleConfig { seed: head.disentangle.seed ^ seed, ..head.disentangle.clone() };
            disentangle::train_attack(ds, &cfg)
        } else {
            let cfg = MlpConfig { seed: head.mlp.seed ^ seed, ..head.mlp.clone() };
            disentangle::train_mlp_attack(ds, &cfg)
        }
    }
}

pub struct Victims {
    pub target: ModelHandle,
    pub shadow: Option<ModelHandle>,
}

impl Victims {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.target.save(dir, "target")?;
        if let Some(s) = &self.shadow {
            s.save(dir, "shadow")?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let target = ModelHandle::load(dir, "target")?;
        let shadow = if dir.join("shadow.toml").exists() { Some(ModelHandle::load(dir, "shadow")?) } else { None };
        Ok(Self { target, shadow })
    }
}

/// One attack-test prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub origin: Origin,
    pub node: usize,
    pub label: usize,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
}

/// Attack metrics over the test rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackScores {
    pub accuracy: f64,
    pub weighted_f1: f64,
    /// Binary AUC, or macro one-vs-rest AUC for multi-class attributes.
    pub auc: f64,
    pub tn_rate: Option<f64>,
    pub tp_rate: Option<f64>,
    /// Share of the most frequent test label.
    pub majority_baseline: f64,
}

pub fn score_predictions(preds: &[Prediction], num_classes: usize) -> Result<AttackScores> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("attack test set is empty".into()));
    }
    let y: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let yhat: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
    let auc = if num_classes == 2 {
        let s: Vec<f64> = preds.iter().map(|p| p.probabilities[1]).collect();
        metrics::auc_roc(&s, &y)?
    } else {
        let s: Vec<Vec<f64>> = preds.iter().map(|p| p.probabilities.clone()).collect();
        metrics::macro_auc(&s, &y)?
    };
    let (tn_rate, tp_rate) = if num_classes == 2 {
        let (tn, tp) = metrics::tn_tp_rates(&yhat, &y)?;
        (Some(tn), Some(tp))
    } else {
        (None, None)
    };
    let mut counts = vec![0usize; num_classes.max(1)];
    for &l in &y {
        if l < counts.len() {
            counts[l] += 1;
        }
    }
    Ok(AttackScores {
        accuracy: metrics::accuracy(&yhat, &y)?,
        weighted_f1: metrics::weighted_f1(&yhat, &y)?,
        auc,
        tn_rate,
        tp_rate,
        majority_baseline: *counts.iter().max().unwrap_or(&0) as f64 / y.len() as f64,
    })
}

/// Predictions of `model` on the dataset's test rows.
pub fn predict_test(model: &AttackModel, ds: &AttackDataset) -> Result<Vec<Prediction>> {
    let idx = ds.test_indices();
    if idx.is_empty() {
        return Err(Error::EmptyInput("attack test set is empty (degenerate split)".into()));
    }
    let probs = model.predict_proba(ds, &idx)?;
    let pred = argmax_rows(&probs);
    Ok(idx
        .iter()
        .enumerate()
        .map(|(r, &i)| Prediction {
            origin: ds.origins[i],
            node: ds.nodes[i],
            label: ds.labels[i],
            predicted: pred[r],
            probabilities: probs.row(r).to_vec(),
        })
        .collect())
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let classes = preds.first().map(|p| p.probabilities.len()).unwrap_or(0);
    let mut out = String::from("origin,node,label,predicted");
    for c in 0..classes {
        let _ = write!(out, ",p{c}");
    }
    out.push('\n');
    for p in preds {
        let _ = write!(out, "{},{},{},{}", p.origin.name(), p.node, p.label, p.predicted);
        for v in &p.probabilities {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    let bad = |line: &str| Error::Format(format!("{}: bad prediction row {line:?}", path.display()));
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() < 5 {
                return Err(bad(line));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(line));
            Ok(Prediction {
                origin: Origin::parse(cols[0])?,
                node: num(cols[1])?,
                label: num(cols[2])?,
                predicted: num(cols[3])?,
                probabilities: cols[4..].iter().map(|s| s.parse::<f64>().map_err(|_| bad(line))).collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// Outcome of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// `None` on success, otherwise the reason the seed was aborted.
    pub failure: Option<String>,
    pub scores: Option<AttackScores>,
    pub target_train_accuracy: Option<f64>,
    pub target_test_accuracy: Option<f64>,
    pub shadow_train_accuracy: Option<f64>,
    pub shadow_test_accuracy: Option<f64>,
    pub attack_train_rows: usize,
    pub attack_test_rows: usize,
}

impl SeedResult {
    fn failed(seed: u64, reason: String) -> Self {
        Self {
            seed,
            failure: Some(reason),
            scores: None,
            target_train_accuracy: None,
            target_test_accuracy: None,
            shadow_train_accuracy: None,
            shadow_test_accuracy: None,
            attack_train_rows: 0,
            attack_test_rows: 0,
        }
    }

    /// Six radar axes: target train/test, shadow train/test accuracy, attack TN/TP rate.
    pub fn radar(&self) -> Option<[f64; 6]> {
        let s = self.scores?;
        Some([
            self.target_train_accuracy?,
            self.target_test_accuracy?,
            self.shadow_train_accuracy?,
            self.shadow_test_accuracy?,
            s.tn_rate?,
            s.tp_rate?,
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Run-level summary written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub name: String,
    pub attack: AttackKind,
    pub variant: Variant,
    pub backbone: String,
    pub defense: Option<DefenseSpec>,
    /// Channel count of the disentangled head, when used.
    pub channels: Option<usize>,
    pub seeds: Vec<SeedResult>,
    /// Mean and sample standard deviation over successful seeds.
    pub summary: BTreeMap<String, MeanStd>,
    /// Some seeds failed.
    pub partial: bool,
}

impl MetricsReport {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.summary.get(metric).map(|m| m.mean)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("metrics.json");
        if !path.exists() {
            return Err(Error::Format(format!("no report at {}", path.display())));
        }
        persist::read_json(&path)
    }
}

fn summarize(seeds: &[SeedResult]) -> BTreeMap<String, MeanStd> {
    let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in seeds.iter().filter(|r| r.failure.is_none()) {
        let mut put = |k: &str, v: Option<f64>| {
            if let Some(v) = v {
                cols.entry(k.to_string()).or_default().push(v);
            }
        };
        if let Some(s) = r.scores {
            put("accuracy", Some(s.accuracy));
            put("weighted_f1", Some(s.weighted_f1));
            put("auc", Some(s.auc));
            put("tn_rate", s.tn_rate);
            put("tp_rate", s.tp_rate);
            put("majority_baseline", Some(s.majority_baseline));
        }
        put("target_train_accuracy", r.target_train_accuracy);
        put("target_test_accuracy", r.target_test_accuracy);
        put("shadow_train_accuracy", r.shadow_train_accuracy);
        put("shadow_test_accuracy", r.shadow_test_accuracy);
    }
    cols.into_iter()
        .map(|(k, v)| {
            let (mean, std) = metrics::mean_std(&v);
            (k, MeanStd { mean, std })
        })
        .collect()
}

/// Identity of every shared pipeline input for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub graph_fingerprint: String,
    pub split_digest: String,
    pub stages: Vec<String>,
    pub prompt_provenance: Option<String>,
    pub target_fingerprint: Option<String>,
    pub shadow_fingerprint: Option<String>,
    pub attack_head: Option<String>,
}

fn run_seed(ctx: &Context, dir: &Path, meta: &mut RunMeta) -> Result<SeedResult> {
    let save = ctx.cfg.save_models;
    let pre = ctx.pretrain()?;
    let prompts = pre.as_ref().map(|p| p.prompts.clone());
    if let Some(p) = &pre {
        meta.stages.push("pretrain".into());
        meta.prompt_provenance = Some(p.prompts.provenance.clone());
        if save {
            p.save(&dir.join("pretrain"))?;
        }
    }
    let victims = ctx.train_victims(prompts.as_ref())?;
    meta.stages.push("victims".into());
    meta.target_fingerprint = Some(victims.target.fingerprint.clone());
    meta.shadow_fingerprint = victims.shadow.as_ref().map(|s| s.fingerprint.clone());
    if save {
        victims.save(&dir.join("victims"))?;
    }
    let ds = ctx.build_attack_data(&victims, prompts.as_ref())?;
    meta.stages.push("attack_data".into());
    ds.save(&dir.join("attack_data"))?;
    let model = ctx.train_attack(&ds)?;
    meta.stages.push(if ctx.cfg.variant.uses_disentangle() { "attack:disentangle" } else { "attack:mlp" }.into());
    meta.attack_head = Some(persist::digest_bytes(format!("{:?}", model.params().values()).as_bytes()));
    let preds = predict_test(&model, &ds)?;
    write_predictions(&dir.join("predictions.csv"), &preds)?;
    if let Some(Ok(routed)) = model.routed(&ds, &ds.test_indices()) {
        let mut out = String::from("node,label");
        for k in 0..routed.ncols() {
            let _ = write!(out, ",d{k}");
        }
        out.push('\n');
        for (r, &i) in ds.test_indices().iter().enumerate() {
            let _ = write!(out, "{},{}", ds.nodes[i], ds.labels[i]);
            for v in routed.index_axis(Axis(0), r) {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        std::fs::write(dir.join("routed.csv"), out)?;
    }
    let scores = score_predictions(&preds, ds.num_classes)?;
    if ds.num_classes == 2 {
        let s: Vec<f64> = preds.iter().map(|p| p.probabilities[1]).collect();
        let y: Vec<usize> = preds.iter().map(|p| p.label).collect();
        let roc = metrics::roc_curve(&s, &y)?;
        let body: String = roc.iter().map(|(f, t)| format!("{f:?},{t:?}\n")).collect();
        std::fs::write(ctx.cfg.output_dir.join(format!("roc_seed{}.csv", ctx.seed)), format!("fpr,tpr\n{body}"))?;
    }
    Ok(SeedResult {
        seed: ctx.seed,
        failure: None,
        scores: Some(scores),
        target_train_accuracy: Some(victims.target.train_accuracy),
        target_test_accuracy: Some(victims.target.test_accuracy),
        shadow_train_accuracy: victims.shadow.as_ref().map(|s| s.train_accuracy),
        shadow_test_accuracy: victims.shadow.as_ref().map(|s| s.test_accuracy),
        attack_train_rows: ds.train_indices().len(),
        attack_test_rows: ds.test_indices().len(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Run every seed of `cfg`, writing artifacts under `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml()?)?;
    let mut results = Vec::new();
    let mut timing = BTreeMap::new();
    for &seed in &cfg.seeds {
        let started = Instant::now();
        let dir = cfg.seed_dir(seed);
        std::fs::create_dir_all(&dir)?;
        let outcome = Context::prepare(cfg, seed).and_then(|ctx| {
            let mut meta = RunMeta {
                seed,
                graph_fingerprint: ctx.graph.fingerprint(),
                split_digest: ctx.split.digest(),
                stages: Vec::new(),
                prompt_provenance: None,
                target_fingerprint: None,
                shadow_fingerprint: None,
                attack_head: None,
            };
            let r = run_seed(&ctx, &dir, &mut meta);
            persist::write_json(&dir.join("run_meta.json"), &meta)?;
            r
        });
        results.push(outcome.unwrap_or_else(|e| SeedResult::failed(seed, e.to_string())));
        timing.insert(format!("seed-{seed}"), started.elapsed().as_secs_f64());
    }
    let report = MetricsReport {
        name: cfg.name.clone(),
        attack: cfg.attack,
        variant: cfg.variant,
        backbone: cfg.victim.kind.to_string(),
        defense: cfg.defense.clone(),
        channels: cfg.variant.uses_disentangle().then_some(cfg.attack_head.disentangle.channels),
        partial: results.iter().any(|r| r.failure.is_some()),
        summary: summarize(&results),
        seeds: results,
    };
    persist::write_json(&cfg.output_dir.join("metrics.json"), &report)?;
    persist::write_json(&cfg.output_dir.join("timing.json"), &timing)?;

    let mut csv = String::from(
        "seed,status,accuracy,weighted_f1,auc,tn_rate,tp_rate,target_train_acc,target_test_acc,shadow_train_acc,shadow_test_acc\n",
    );
    for r in &report.seeds {
        let s = r.scores;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.seed,
            if r.failure.is_some() { "failed" } else { "ok" },
            fmt_opt(s.map(|s| s.accuracy)),
            fmt_opt(s.map(|s| s.weighted_f1)),
            fmt_opt(s.map(|s| s.auc)),
            fmt_opt(s.and_then(|s| s.tn_rate)),
            fmt_opt(s.and_then(|s| s.tp_rate)),
            fmt_opt(r.target_train_accuracy),
            fmt_opt(r.target_test_accuracy),
            fmt_opt(r.shadow_train_accuracy),
            fmt_opt(r.shadow_test_accuracy),
        );
    }
    std::fs::write(cfg.output_dir.join("per_seed.csv"), csv)?;
    if cfg.attack == AttackKind::Mia {
        std::fs::write(cfg.output_dir.join("radar.csv"), radar_csv(&report))?;
    }
    Ok(report)
}

const RADAR_AXES: [&str; 6] =
    ["target_train_acc", "target_test_acc", "shadow_train_acc", "shadow_test_acc", "attack_tn_rate", "attack_tp_rate"];

fn radar_csv(report: &MetricsReport) -> String {
    let mut out = format!("seed,{}\n", RADAR_AXES.join(","));
    let rows: Vec<(u64, [f64; 6])> = report.seeds.iter().filter_map(|r| r.radar().map(|v| (r.seed, v))).collect();
    for (seed, v) in &rows {
        let vals: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
        let _ = writeln!(out, "{seed},{}", vals.join(","));
    }
    if !rows.is_empty() {
        let means: Vec<String> = (0..6)
            .map(|a| format!("{:?}", rows.iter().map(|(_, v)| v[a]).sum::<f64>() / rows.len() as f64))
            .collect();
        let _ = writeln!(out, "mean,{}", means.join(","));
    }
    out
}

/// Write plot-data series for the reports in `reports` into `out`. Returns
/// the files written.
pub fn emit_plots(reports: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("no report directories given".into()));
    }
    let loaded: Vec<(PathBuf, MetricsReport)> =
        reports.iter().map(|d| MetricsReport::load(d).map(|r| (d.clone(), r))).collect::<Result<_>>()?;
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();

    for (dir, report) in &loaded {
        let mut series = String::from("seed,fpr,tpr\n");
        let mut any = false;
        for r in report.seeds.iter().filter(|r| r.failure.is_none()) {
            let path = dir.join(format!("roc_seed{}.csv", r.seed));
            let Ok(text) = std::fs::read_to_string(&path) else { continue };
            for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
                let _ = writeln!(series, "{},{line}", r.seed);
                any = true;
            }
        }
        if any {
            let path = out.join(format!("roc_{}.csv", report.name));
            std::fs::write(&path, series)?;
            written.push(path);
        }
    }

    let stat = |r: &MetricsReport, k: &str| r.summary.get(k).map(|m| (format!("{:?}", m.mean), format!("{:?}", m.std)));
    let cell = |r: &MetricsReport, k: &str| stat(r, k).unwrap_or_default();

    let mut sweep = String::from("report,variant,defense,budget,perturb_rate,auc_mean,auc_std,accuracy_mean,accuracy_std\n");
    for (_, r) in &loaded {
        let (kind, budget, rate) = match &r.defense {
            Some(d) => (d.kind.to_string(), format!("{:?}", d.budget), format!("{:?}", d.perturb_rate)),
            None => ("none".to_string(), String::new(), String::new()),
        };
        let (am, asd) = cell(r, "auc");
        let (cm, csd) = cell(r, "accuracy");
        let _ = writeln!(sweep, "{},{},{kind},{budget},{rate},{am},{asd},{cm},{csd}", r.name, r.variant.name());
    }
    let path = out.join("defense_sweep.csv");
    std::fs::write(&path, sweep)?;
    written.push(path);

    let mut ksens = String::from("report,variant,channels,accuracy_mean,weighted_f1_mean,auc_mean\n");
    let mut by_k: Vec<&MetricsReport> = loaded.iter().map(|(_, r)| r).filter(|r| r.channels.is_some()).collect();
    by_k.sort_by_key(|r| r.channels);
    for r in by_k {
        let _ = writeln!(
            ksens,
            "{},{},{},{},{},{}",
            r.name,
            r.variant.name(),
            r.channels.unwrap_or_default(),
            cell(r, "accuracy").0,
            cell(r, "weighted_f1").0,
            cell(r, "auc").0
        );
    }
    let path = out.join("k_sensitivity.csv");
    std::fs::write(&path, ksens)?;
    written.push(path);

    let mut radar = format!("report,{}\n", RADAR_AXES.join(","));
    for (_, r) in loaded.iter().filter(|(_, r)| r.attack == AttackKind::Mia) {
        let keys = ["target_train_accuracy", "target_test_accuracy", "shadow_train_accuracy", "shadow_test_accuracy", "tn_rate", "tp_rate"];
        let vals: Vec<String> = keys.iter().map(|k| cell(r, k).0).collect();
        let _ = writeln!(radar, "{},{}", r.name, vals.join(","));
    }
    let path = out.join("radar.csv");
    std::fs::write(&path, radar)?;
    written.push(path);
    Ok(written)
}

/// Stage-by-stage entry points used by the CLI. Each reads the artifacts of
/// the previous stage from `dir`.
pub mod stages {
    use super::*;

    pub fn pretrain(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<Option<PretrainOutput>> {
        let ctx = Context::prepare(cfg, seed)?;
        let out = ctx.pretrain()?;
        if let Some(p) = &out {
            p.save(&dir.join("pretrain"))?;
        }
        Ok(out)
    }

    fn load_prompts(cfg: &ExperimentConfig, dir: &Path) -> Result<Option<PromptFeature>> {
        if !cfg.variant.uses_prompts() {
            return Ok(None);
        }
        let path = dir.join("pretrain").join("prompts.bin");
        if !path.exists() {
            return Err(Error::Config(format!("{} missing; run the pretrain stage first", path.display())));
        }
        PromptFeature::load(&path).map(Some)
    }

    pub fn train_victims(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<Victims> {
        let ctx = Context::prepare(cfg, seed)?;
        let prompts = load_prompts(cfg, dir)?;
        let v = ctx.train_victims(prompts.as_ref())?;
        v.save(&dir.join("victims"))?;
        Ok(v)
    }

    pub fn build_attack_data(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<AttackDataset> {
        let ctx = Context::prepare(cfg, seed)?;
        let prompts = load_prompts(cfg, dir)?;
        let v = Victims::load(&dir.join("victims"))?;
        let ds = ctx.build_attack_data(&v, prompts.as_ref())?;
        ds.save(&dir.join("attack_data"))?;
        Ok(ds)
    }

    pub fn attack(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<AttackScores> {
        let ctx = Context::prepare(cfg, seed)?;
        let ds = AttackDataset::load(&dir.join("attack_data"))?;
        let model = ctx.train_attack(&ds)?;
        model.save(&dir.join("attack"))?;
        let preds = predict_test(&model, &ds)?;
        write_predictions(&dir.join("predictions.csv"), &preds)?;
        let scores = score_predictions(&preds, ds.num_classes)?;
        persist::write_json(&dir.join("attack").join("scores.json"), &scores)?;
        Ok(scores)
    }
}
