//! Attack datasets built from victim posteriors.
//!
//! Membership inference trains on shadow-model posteriors (shadow-train rows
//! are members, shadow-test rows are not) and evaluates on target-model
//! posteriors. Attribute inference queries the target on every node; rows of
//! the adversary's known pool carry their sensitive value as training labels.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::defense::{self, DefenseKind, DefenseSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeSplit};
use crate::nn::derive_seed;
use crate::pretrain::PromptFeature;
use crate::victim::{self, ModelHandle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Mia,
    Aia,
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackKind::Mia => "mia",
            AttackKind::Aia => "aia",
        })
    }
}

/// Which model and node pool a row was queried from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Origin {
    ShadowTrain,
    ShadowTest,
    TargetTrain,
    TargetTest,
    /// Sensitive value known to the attribute adversary.
    Known,
    /// Sensitive value hidden from the attribute adversary.
    Unknown,
}

impl Origin {
    pub const ALL: [Origin; 6] =
        [Origin::ShadowTrain, Origin::ShadowTest, Origin::TargetTrain, Origin::TargetTest, Origin::Known, Origin::Unknown];

    pub fn name(self) -> &'static str {
        match self {
            Origin::ShadowTrain => "shadow-train",
            Origin::ShadowTest => "shadow-test",
            Origin::TargetTrain => "target-train",
            Origin::TargetTest => "target-test",
            Origin::Known => "known",
            Origin::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Origin::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown row origin {s:?}")))
    }

    /// Rows of this origin train the attack model.
    pub fn is_train(self) -> bool {
        matches!(self, Origin::ShadowTrain | Origin::ShadowTest | Origin::Known)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackDataset {
    pub kind: AttackKind,
    /// Attack features: posteriors, optionally followed by the prompt vector.
    pub rows: Array2<f64>,
    pub labels: Vec<usize>,
    pub nodes: Vec<usize>,
    pub origins: Vec<Origin>,
    pub num_classes: usize,
    /// Per-row prompt vectors consumed by the attack head.
    pub prompts: Option<Array2<f64>>,
}

/// Options shared by both dataset builders.
#[derive(Debug, Clone, Default)]
pub struct QueryOptions {
    /// Append each row's prompt vector to its posterior.
    pub append_prompt: bool,
    /// Defense applied to target-model queries.
    pub defense: Option<DefenseSpec>,
}

impl AttackDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.origins[i].is_train()).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.origins[i].is_train()).collect()
    }

    /// No rows to evaluate on.
    pub fn is_degenerate(&self) -> bool {
        self.test_indices().is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.rows.ncols()
    }

    fn from_parts(kind: AttackKind, num_classes: usize, mut parts: Vec<Part>) -> Result<Self> {
        parts.sort_by_key(|p| p.origin);
        let mut rows = Vec::new();
        let mut prompts = Vec::new();
        let mut ds = AttackDataset {
            kind,
            rows: Array2::zeros((0, 0)),
            labels: Vec::new(),
            nodes: Vec::new(),
            origins: Vec::new(),
            num_classes,
            prompts: None,
        };
        for p in parts {
            let mut order: Vec<usize> = (0..p.nodes.len()).collect();
            order.sort_by_key(|&i| p.nodes[i]);
            rows.push(p.rows.select(Axis(0), &order));
            if let Some(pr) = &p.prompts {
                prompts.push(pr.select(Axis(0), &order));
            }
            for &i in &order {
                ds.nodes.push(p.nodes[i]);
                ds.labels.push(p.labels[i]);
                ds.origins.push(p.origin);
            }
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        ds.rows = concatenate(Axis(0), &views).map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        if !prompts.is_empty() {
            let views: Vec<_> = prompts.iter().map(|r| r.view()).collect();
            ds.prompts = Some(concatenate(Axis(0), &views).map_err(|e| Error::DimensionMismatch(e.to_string()))?);
        }
        Ok(ds)
    }

    /// Copy with the prompt vector appended to each row.
    fn with_appended_prompts(mut self) -> Result<Self> {
        if let Some(p) = &self.prompts {
            self.rows = concatenate(Axis(1), &[self.rows.view(), p.view()])
                .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        }
        Ok(self)
    }

    /// CSV with header `origin,node,label,f0..fK`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("origin,node,label");
        for k in 0..self.feature_dim() {
            let _ = write!(out, ",f{k}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{},{},{}", self.origins[i].name(), self.nodes[i], self.labels[i]);
            for v in self.rows.row(i) {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }

    /// Writes `attack.csv`, plus `prompts.csv` (`origin,node,p0..pM`) when
    /// per-row prompts exist, and `attack.toml` metadata.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("attack.csv"), self.to_csv())?;
        if let Some(p) = &self.prompts {
            let mut out = String::from("origin,node");
            for k in 0..p.ncols() {
                let _ = write!(out, ",p{k}");
            }
            out.push('\n');
            for i in 0..self.len() {
                let _ = write!(out, "{},{}", self.origins[i].name(), self.nodes[i]);
                for v in p.row(i) {
                    let _ = write!(out, ",{v:?}");
                }
                out.push('\n');
            }
            std::fs::write(dir.join("prompts.csv"), out)?;
        }
        crate::persist::write_toml(
            &dir.join("attack.toml"),
            &DatasetMeta { kind: self.kind, num_classes: self.num_classes },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = crate::persist::read_toml(&dir.join("attack.toml"))?;
        let (head, body) = read_csv(&dir.join("attack.csv"), 3)?;
        let mut ds = AttackDataset {
            kind: meta.kind,
            rows: body,
            labels: Vec::new(),
            nodes: Vec::new(),
            origins: Vec::new(),
            num_classes: meta.num_classes,
            prompts: None,
        };
        for cols in head {
            ds.origins.push(Origin::parse(&cols[0])?);
            ds.nodes.push(parse_field(&cols[1])?);
            let label: usize = parse_field(&cols[2])?;
            if label >= meta.num_classes {
                return Err(Error::LabelOutOfRange { label, classes: meta.num_classes });
            }
            ds.labels.push(label);
        }
        let prompt_path = dir.join("prompts.csv");
        if prompt_path.exists() {
            let (head, body) = read_csv(&prompt_path, 2)?;
            if head.len() != ds.len() {
                return Err(Error::Format("prompts.csv and attack.csv differ in row count".into()));
            }
            ds.prompts = Some(body);
        }
        Ok(ds)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    kind: AttackKind,
    num_classes: usize,
}

fn parse_field<T: std::str::FromStr>(s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| Error::Format(format!("bad field {s:?}: {e}")))
}

/// Leading text columns and the numeric remainder of a CSV with a header row.
fn read_csv(path: &Path, text_cols: usize) -> Result<(Vec<Vec<String>>, Array2<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?;
    let width = header.split(',').count().saturating_sub(text_cols);
    let mut heads = Vec::new();
    let mut values = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != width + text_cols {
            return Err(Error::Format(format!("{}: ragged row {line:?}", path.display())));
        }
        heads.push(cols[..text_cols].iter().map(|s| s.to_string()).collect());
        for c in &cols[text_cols..] {
            values.push(parse_field::<f64>(c)?);
        }
    }
    let m = Array2::from_shape_vec((heads.len(), width), values).map_err(|e| Error::Format(e.to_string()))?;
    Ok((heads, m))
}

struct Part {
    origin: Origin,
    nodes: Vec<usize>,
    labels: Vec<usize>,
    rows: Array2<f64>,
    prompts: Option<Array2<f64>>,
}

/// Query `m` on `query` (indices into `g`) and apply the defense when given.
fn defended_query(
    m: &ModelHandle,
    g: &Graph,
    query: &[usize],
    prompt: Option<&PromptFeature>,
    defense: Option<&DefenseSpec>,
) -> Result<Array2<f64>> {
    match defense {
        None => victim::query_posteriors(m, g, query, prompt),
        Some(d) => {
            d.validate()?;
            match d.kind {
                DefenseKind::Vandp => {
                    let p = victim::query_posteriors(m, g, query, prompt)?;
                    defense::vandp_noise(&p, d.budget, derive_seed(d.seed, "vandp-query"))
                }
                DefenseKind::Neighb => {
                    let adj = defense::neighb_perturb(g, query, d.perturb_rate, derive_seed(d.seed, "neighb-query"))?;
                    victim::query_posteriors_with(m, g, &adj, query, prompt)
                }
            }
        }
    }
}

/// Positions of `nodes` within the ascending `mapping`.
fn local_indices(mapping: &[usize], nodes: &[usize]) -> Vec<usize> {
    nodes.iter().map(|v| mapping.binary_search(v).expect("node inside its pool")).collect()
}

/// Induced subgraph on a pool, checked against the handle trained on it.
fn pool_graph(
    g: &Graph,
    train: &[usize],
    test: &[usize],
    handle: &ModelHandle,
    who: &str,
) -> Result<(Graph, Vec<usize>)> {
    let pool: Vec<usize> = train.iter().chain(test).copied().collect();
    let (sub, mapping) = g.induced_subgraph(&pool)?;
    if victim::fingerprint(&sub, &local_indices(&mapping, train)) != handle.fingerprint {
        return Err(Error::InvalidParameter(format!("{who} model was not trained on the {who} train pool")));
    }
    Ok((sub, mapping))
}

/// Membership-inference dataset. Shadow and target models are queried on the
/// subgraphs induced by their own pools, the same graphs they were trained on.
pub fn build_mia_dataset(
    shadow: &ModelHandle,
    target: &ModelHandle,
    g: &Graph,
    split: &NodeSplit,
    prompt: Option<&PromptFeature>,
    opts: &QueryOptions,
) -> Result<AttackDataset> {
    split.validate(g.node_count(), true)?;
    if let Some(p) = prompt {
        if p.matrix.nrows() != g.node_count() {
            return Err(Error::DimensionMismatch(format!(
                "prompt has {} rows for a graph with {} nodes",
                p.matrix.nrows(),
                g.node_count()
            )));
        }
    }
    let mut parts = Vec::new();
    let sides = [
        (shadow, &split.shadow_train, &split.shadow_test, Origin::ShadowTrain, Origin::ShadowTest, "shadow"),
        (target, &split.target_train, &split.target_test, Origin::TargetTrain, Origin::TargetTest, "target"),
    ];
    for (handle, train, test, in_origin, out_origin, who) in sides {
        let (sub, mapping) = pool_graph(g, train, test, handle, who)?;
        let sub_prompt = prompt.map(|p| p.select(&mapping));
        let defense = if who == "target" { opts.defense.as_ref() } else { None };
        for (nodes, origin, label) in [(train, in_origin, 1), (test, out_origin, 0)] {
            if nodes.is_empty() {
                continue;
            }
            let local = local_indices(&mapping, nodes);
            let rows = defended_query(handle, &sub, &local, sub_prompt.as_ref(), defense)?;
            parts.push(Part {
                origin,
                nodes: nodes.clone(),
                labels: vec![label; nodes.len()],
                rows,
                prompts: prompt.map(|p| p.matrix.select(Axis(0), nodes)),
            });
        }
    }
    let ds = AttackDataset::from_parts(AttackKind::Mia, 2, parts)?;
    if opts.append_prompt {
        ds.with_appended_prompts()
    } else {
        Ok(ds)
    }
}

/// Attribute-inference dataset from target posteriors on the full graph.
pub fn build_aia_dataset(
    target: &ModelHandle,
    g: &Graph,
    split: &NodeSplit,
    prompt: Option<&PromptFeature>,
    opts: &QueryOptions,
) -> Result<AttackDataset> {
    let sensitive = g.sensitive().ok_or(Error::MissingSensitive)?;
    let classes = g.sensitive_classes().ok_or(Error::MissingSensitive)?;
    split.validate(g.node_count(), false)?;
    if victim::fingerprint(g, &split.target_train) != target.fingerprint {
        return Err(Error::InvalidParameter("target model was not trained on the target train pool".into()));
    }
    let all: Vec<usize> = split.attack_train.iter().chain(&split.attack_test).copied().collect();
    let posteriors = defended_query(target, g, &all, prompt, opts.defense.as_ref())?;
    let k = split.attack_train.len();
    let mut parts = Vec::new();
    for (range, nodes, origin) in [(0..k, &split.attack_train, Origin::Known), (k..all.len(), &split.attack_test, Origin::Unknown)] {
        if nodes.is_empty() {
            continue;
        }
        parts.push(Part {
            origin,
            nodes: nodes.clone(),
            labels: nodes.iter().map(|&v| sensitive[v]).collect(),
            rows: posteriors.slice(ndarray::s![range, ..]).to_owned(),
            prompts: prompt.map(|p| p.matrix.select(Axis(0), nodes)),
        });
    }
    let ds = AttackDataset::from_parts(AttackKind::Aia, classes, parts)?;
    if opts.append_prompt {
        ds.with_appended_prompts()
    } else {
        Ok(ds)
    }
}
