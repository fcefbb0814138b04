//! Hierarchy construction and training.
//!
//! The structure comes from two statistics of the training split: how hard
//! each attribute is for a linear probe on the raw features (easy ones go
//! near the root), and how predictable each remaining attribute already is
//! given the values fixed along the path. A node classifies the best-ranked
//! attribute whose conditional distribution is still balanced (no value more
//! likely than `weak_band_high`). When none is left, the node is a leaf.
//!
//! Networks are then trained root-down. A child sees its parent's last
//! hidden activation, computed with the parent already frozen.

use std::collections::HashSet;
use std::ops::RangeInclusive;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::{AttributeSchema, Condition, Dataset, ResolvedCondition, Sample};
use crate::error::{Error, Result};
use crate::eval::average_precision;
use crate::nn::{
    self, cost_of, fit_softmax, train_classifier_head, train_embedding, Dense, HeadConfig, Network,
    NetworkSpec, NetworkWeights, TripletConfig,
};
use crate::{par, seed};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Slack for comparisons against the correlation band.
const BAND_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 200,
            learning_rate: 0.01,
            batch_size: 32,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub attribute: String,
    pub validation_error: f64,
}

/// Attributes ordered from easiest (lowest probe error) to hardest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRank {
    pub entries: Vec<RankEntry>,
    /// Attributes left out because the training split shows one value only.
    pub excluded: Vec<String>,
}

impl DifficultyRank {
    pub fn from_errors(mut entries: Vec<RankEntry>) -> Self {
        entries.sort_by(|a, b| {
            a.validation_error
                .total_cmp(&b.validation_error)
                .then_with(|| a.attribute.cmp(&b.attribute))
        });
        DifficultyRank {
            entries,
            excluded: Vec::new(),
        }
    }

    pub fn position(&self, attribute: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.attribute == attribute)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.attribute.as_str()).collect()
    }
}

fn feature_matrix<'a>(samples: impl ExactSizeIterator<Item = &'a Sample>, dim: usize) -> Array2<f32> {
    let n = samples.len();
    let mut x = Array2::zeros((n, dim));
    for (mut row, s) in x.outer_iter_mut().zip(samples) {
        row.assign(&ndarray::ArrayView1::from(&s.features[..]));
    }
    x
}

/// Probe split: whole identities go to validation so the probe cannot lean
/// on identity-specific offsets it saw during fitting.
fn probe_validation_mask(train: &Dataset, config: &ProbeConfig) -> Vec<bool> {
    let mut rng = seed::rng_for(config.seed, "probe-split");
    let identities = train.identities();
    if identities.len() >= 5 {
        let mut ids: Vec<&str> = identities;
        ids.shuffle(&mut rng);
        let n_val = ((config.validation_fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
        let val: HashSet<&str> = ids[..n_val].iter().copied().collect();
        train
            .samples
            .iter()
            .map(|s| val.contains(s.identity_id.as_str()))
            .collect()
    } else {
        let n = train.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let n_val = ((config.validation_fraction * n as f64).round() as usize).clamp(1, n.max(2) - 1);
        let mut mask = vec![false; n];
        for &i in &order[..n_val.min(n)] {
            mask[i] = true;
        }
        mask
    }
}

/// Linear-probe validation error per attribute, ascending.
pub fn rank_attribute_difficulty(train: &Dataset, config: &ProbeConfig) -> Result<DifficultyRank> {
    if train.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let x = feature_matrix(train.samples.iter(), train.feature_dim);
    let is_val = probe_validation_mask(train, config);
    let head = HeadConfig {
        epochs: config.epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        seed: 0,
    };

    let attrs: Vec<usize> = (0..train.schema.len()).collect();
    let outcomes = par::map(&attrs, |&a| -> Result<Option<RankEntry>> {
        let attr = &train.schema.attributes()[a];
        let labelled: Vec<usize> = (0..train.len())
            .filter(|&i| train.samples[i].attributes[a].is_some())
            .collect();
        let label = |i: usize| train.samples[i].attributes[a].unwrap();
        let observed: HashSet<usize> = labelled.iter().map(|&i| label(i)).collect();
        if observed.len() < 2 {
            log::warn!("attribute {:?} shows a single value in training data; left out of the rank", attr.name);
            return Ok(None);
        }
        let (fit_idx, val_idx): (Vec<usize>, Vec<usize>) = labelled.iter().partition(|&&i| !is_val[i]);
        if fit_idx.is_empty() || val_idx.is_empty() {
            log::warn!("attribute {:?}: probe split left one side empty", attr.name);
            return Ok(None);
        }
        let mut rng = seed::rng_for(config.seed, &format!("probe:{}", attr.name));
        let mut layer = Dense::glorot(train.feature_dim, attr.values.len(), &mut rng);
        let fit_labels: Vec<usize> = fit_idx.iter().map(|&i| label(i)).collect();
        fit_softmax(&mut layer, x.select(Axis(0), &fit_idx).view(), &fit_labels, &head, &mut rng)?;
        let wrong = val_idx
            .iter()
            .filter(|&&i| nn::argmax(&layer.apply(&train.samples[i].features)) != label(i))
            .count();
        Ok(Some(RankEntry {
            attribute: attr.name.clone(),
            validation_error: wrong as f64 / val_idx.len() as f64,
        }))
    });

    let mut entries = Vec::new();
    let mut excluded = Vec::new();
    for (a, outcome) in attrs.iter().zip(outcomes) {
        match outcome? {
            Some(e) => entries.push(e),
            None => excluded.push(train.schema.attributes()[*a].name.clone()),
        }
    }
    let mut rank = DifficultyRank::from_errors(entries);
    rank.excluded = excluded;
    Ok(rank)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub attribute: String,
    /// `Pr(attribute = v | path conditions)` per value; `None` when no
    /// labelled sample satisfies the conditions.
    pub probabilities: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub path_conditions: Vec<Condition>,
    /// Number of samples satisfying the path conditions.
    pub support: usize,
    pub rows: Vec<CorrelationRow>,
}

impl CorrelationTable {
    pub fn row(&self, attribute: &str) -> Option<&CorrelationRow> {
        self.rows.iter().find(|r| r.attribute == attribute)
    }
}

fn table_over<'a>(
    schema: &AttributeSchema,
    samples: impl Iterator<Item = &'a Sample> + Clone,
    conditions: &[Condition],
    resolved: &[ResolvedCondition],
    candidates: &[usize],
) -> CorrelationTable {
    let matching = samples.filter(|s| s.satisfies(resolved));
    let support = matching.clone().count();
    let rows = candidates
        .iter()
        .map(|&k| {
            let mut counts = vec![0usize; schema.value_count(k)];
            for s in matching.clone() {
                if let Some(v) = s.attributes[k] {
                    counts[v] += 1;
                }
            }
            let labelled: usize = counts.iter().sum();
            CorrelationRow {
                attribute: schema.attributes()[k].name.clone(),
                probabilities: (labelled > 0)
                    .then(|| counts.iter().map(|&c| c as f64 / labelled as f64).collect()),
            }
        })
        .collect();
    CorrelationTable {
        path_conditions: conditions.to_vec(),
        support,
        rows,
    }
}

/// Conditional value distribution of each candidate attribute over the
/// samples that satisfy `conditions`.
pub fn correlation_table(train: &Dataset, conditions: &[Condition], candidates: &[String]) -> Result<CorrelationTable> {
    let resolved = train.resolve(conditions)?;
    let candidates = candidates
        .iter()
        .map(|c| train.schema.require(c))
        .collect::<Result<Vec<_>>>()?;
    Ok(table_over(&train.schema, train.samples.iter(), conditions, &resolved, &candidates))
}

/// Whether a conditional value distribution is balanced enough for the
/// attribute to be worth classifying: no value above `high`, and for binary
/// attributes neither value below `low`.
pub fn is_weakly_correlated(probabilities: &[f64], low: f64, high: f64) -> bool {
    let max = probabilities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > high + BAND_EPS {
        return false;
    }
    if probabilities.len() == 2 {
        let min = probabilities.iter().cloned().fold(f64::INFINITY, f64::min);
        return min >= low - BAND_EPS;
    }
    true
}

/// Best-ranked unidentified attribute that is weakly correlated with the
/// path, if any.
pub fn select_next_attribute(
    rank: &DifficultyRank,
    table: &CorrelationTable,
    identified: &HashSet<String>,
    config: &BuildConfig,
) -> Option<String> {
    rank.entries
        .iter()
        .filter(|e| !identified.contains(&e.attribute))
        .find(|e| {
            table
                .row(&e.attribute)
                .and_then(|r| r.probabilities.as_deref())
                .is_some_and(|p| is_weakly_correlated(p, config.weak_band_low, config.weak_band_high))
        })
        .map(|e| e.attribute.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildConfig {
    pub weak_band_low: f64,
    pub weak_band_high: f64,
    pub min_node_samples: usize,
    /// Maximum number of nodes on a root-to-leaf path.
    pub max_depth: usize,
    /// Hidden-layer counts tried by the architecture search.
    pub arch_candidate_depths: RangeInclusive<usize>,
    /// Accuracy gain per byte below which a deeper candidate is not worth it.
    pub arch_stop_threshold: f64,
    /// Share of the full training epochs spent on each search candidate.
    pub search_budget: f64,
    pub hidden_width: usize,
    pub embedding_dim: usize,
    /// Densely connected node bodies.
    pub dense: bool,
    pub probe: ProbeConfig,
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            weak_band_low: 0.3,
            weak_band_high: 0.7,
            min_node_samples: 50,
            max_depth: 5,
            arch_candidate_depths: 1..=3,
            arch_stop_threshold: 5e-6,
            search_budget: 0.25,
            hidden_width: 32,
            embedding_dim: 32,
            dense: true,
            probe: ProbeConfig::default(),
            seed: 0,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(0.0 < self.weak_band_low && self.weak_band_low < self.weak_band_high && self.weak_band_high < 1.0) {
            return bad("need 0 < weak_band_low < weak_band_high < 1");
        }
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1");
        }
        if *self.arch_candidate_depths.start() == 0 || self.arch_candidate_depths.is_empty() {
            return bad("arch_candidate_depths must be a non-empty range starting at 1 or more");
        }
        if !(self.arch_stop_threshold >= 0.0) {
            return bad("arch_stop_threshold must be >= 0");
        }
        if !(self.search_budget > 0.0 && self.search_budget <= 1.0) {
            return bad("search_budget must lie in (0, 1]");
        }
        if self.hidden_width == 0 || self.embedding_dim == 0 {
            return bad("hidden_width and embedding_dim must be positive");
        }
        if !(self.probe.validation_fraction > 0.0 && self.probe.validation_fraction < 1.0) {
            return bad("probe.validation_fraction must lie in (0, 1)");
        }
        if self.probe.epochs == 0 || self.probe.batch_size == 0 || !(self.probe.learning_rate > 0.0) {
            return bad("probe epochs, batch_size and learning_rate must be positive");
        }
        Ok(())
    }

    pub fn node_spec(&self, input_dim: usize, layers: usize, num_classes: usize) -> NetworkSpec {
        NetworkSpec {
            dense: self.dense,
            ..NetworkSpec::new(input_dim, vec![self.hidden_width; layers], self.embedding_dim, num_classes)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Hierarchical,
    RandomTree { seed: u64 },
    Flat,
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Hierarchical => "hierarchical".into(),
            Method::RandomTree { seed } => format!("random_tree_seed_{seed}"),
            Method::Flat => "flat".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyNode {
    pub node_id: String,
    pub conditions: Vec<Condition>,
    /// Attribute classified here; `None` at leaves.
    pub attribute: Option<String>,
    pub spec: Option<NetworkSpec>,
    pub network: Option<Network>,
    /// Trained leaf without a network of its own; it reuses the parent's
    /// embedding.
    pub pass_through: bool,
    pub train_subset_size: usize,
    /// One child per attribute value, indexed by value.
    pub children: Vec<HierarchyNode>,
}

impl HierarchyNode {
    fn leaf(node_id: String, conditions: Vec<Condition>, train_subset_size: usize) -> Self {
        HierarchyNode {
            node_id,
            conditions,
            attribute: None,
            spec: None,
            network: None,
            pass_through: false,
            train_subset_size,
            children: Vec::new(),
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(|c| c.depth()).max().unwrap_or(0)
    }

    fn visit<'a>(&'a self, out: &mut Vec<&'a HierarchyNode>) {
        out.push(self);
        for c in &self.children {
            c.visit(out);
        }
    }

    /// Root-to-leaf paths below (and including) this node.
    pub fn paths(&self) -> Vec<Vec<&HierarchyNode>> {
        if self.is_leaf() {
            return vec![vec![self]];
        }
        self.children
            .iter()
            .flat_map(|c| c.paths())
            .map(|mut p| {
                p.insert(0, self);
                p
            })
            .collect()
    }

    /// Leaf ids in this subtree, left to right.
    pub fn leaf_ids(&self) -> Vec<&str> {
        let mut nodes = Vec::new();
        self.visit(&mut nodes);
        nodes
            .into_iter()
            .filter(|n| n.is_leaf())
            .map(|n| n.node_id.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    node_id: String,
    conditions: Vec<Condition>,
    attribute: Option<String>,
    train_subset_size: usize,
    #[serde(default)]
    pass_through: bool,
    spec: Option<NetworkSpec>,
    weights: Option<NetworkWeights>,
    children: Vec<NodeRecord>,
}

impl From<&HierarchyNode> for NodeRecord {
    fn from(n: &HierarchyNode) -> Self {
        NodeRecord {
            node_id: n.node_id.clone(),
            conditions: n.conditions.clone(),
            attribute: n.attribute.clone(),
            train_subset_size: n.train_subset_size,
            pass_through: n.pass_through,
            spec: n.spec.clone(),
            weights: n.network.as_ref().map(Network::weights),
            children: n.children.iter().map(NodeRecord::from).collect(),
        }
    }
}

impl TryFrom<NodeRecord> for HierarchyNode {
    type Error = Error;

    fn try_from(r: NodeRecord) -> Result<Self> {
        let network = match (r.weights, &r.spec) {
            (Some(w), Some(spec)) => Some(Network::from_parts(spec.clone(), w)?),
            (Some(_), None) => {
                return Err(Error::Invalid(format!("node {}: weights without a spec", r.node_id)))
            }
            (None, _) => None,
        };
        Ok(HierarchyNode {
            node_id: r.node_id,
            conditions: r.conditions,
            attribute: r.attribute,
            spec: r.spec,
            network,
            pass_through: r.pass_through,
            train_subset_size: r.train_subset_size,
            children: r
                .children
                .into_iter()
                .map(HierarchyNode::try_from)
                .collect::<Result<_>>()?,
        })
    }
}

impl Serialize for HierarchyNode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        NodeRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for HierarchyNode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        HierarchyNode::try_from(NodeRecord::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// A tree of node networks plus the configuration that produced it. This is
/// the model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hierarchy {
    pub format_version: u32,
    pub method: Method,
    pub build_config: BuildConfig,
    pub schema: AttributeSchema,
    pub input_dim: usize,
    pub trained: bool,
    pub root: HierarchyNode,
}

impl Hierarchy {
    pub fn nodes(&self) -> Vec<&HierarchyNode> {
        let mut out = Vec::new();
        self.root.visit(&mut out);
        out
    }

    pub fn node(&self, node_id: &str) -> Option<&HierarchyNode> {
        self.nodes().into_iter().find(|n| n.node_id == node_id)
    }

    pub fn leaves(&self) -> Vec<&HierarchyNode> {
        self.nodes().into_iter().filter(|n| n.is_leaf()).collect()
    }

    pub fn paths(&self) -> Vec<Vec<&HierarchyNode>> {
        self.root.paths()
    }

    /// Checks the structural invariants of the tree.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported model format version {}",
                self.format_version
            )));
        }
        fn check(h: &Hierarchy, node: &HierarchyNode, seen: &mut Vec<String>) -> Result<()> {
            let fail = |m: String| Err(Error::Invalid(format!("node {}: {m}", node.node_id)));
            match &node.attribute {
                None if !node.children.is_empty() => return fail("leaf with children".into()),
                Some(a) => {
                    let idx = h
                        .schema
                        .index_of(a)
                        .ok_or_else(|| Error::Invalid(format!("unknown attribute {a:?}")))?;
                    if node.children.len() != h.schema.value_count(idx) {
                        return fail("needs one child per attribute value".into());
                    }
                    if seen.contains(a) {
                        return fail(format!("attribute {a:?} repeats along the path"));
                    }
                }
                None => {}
            }
            if h.trained && !node.pass_through {
                let net = node
                    .network
                    .as_ref()
                    .ok_or_else(|| Error::Invalid(format!("node {} has no trained network", node.node_id)))?;
                net.validate()?;
                let want = match &node.attribute {
                    Some(a) => h.schema.value_count(h.schema.index_of(a).unwrap()),
                    None => 0,
                };
                if net.spec.num_classes != want {
                    return fail(format!("head has {} classes, expected {want}", net.spec.num_classes));
                }
            }
            if let Some(a) = &node.attribute {
                seen.push(a.clone());
                for (v, child) in node.children.iter().enumerate() {
                    let mut expected = node.conditions.clone();
                    expected.push(Condition::new(a.clone(), v));
                    if child.conditions != expected {
                        return Err(Error::Invalid(format!(
                            "node {}: conditions do not extend the parent path",
                            child.node_id
                        )));
                    }
                    check(h, child, seen)?;
                }
                seen.pop();
            }
            Ok(())
        }
        check(self, &self.root, &mut Vec::new())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Hierarchy> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let h: Hierarchy = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        h.validate()?;
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeBuildLog {
    pub node_id: String,
    pub conditions: Vec<Condition>,
    pub train_samples: usize,
    pub table: CorrelationTable,
    pub attribute: Option<String>,
    pub leaf_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BuildLog {
    pub rank: Option<DifficultyRank>,
    pub nodes: Vec<NodeBuildLog>,
}

enum Chooser<'a> {
    Ranked(&'a DifficultyRank),
    Random(u64),
}

struct Grower<'a> {
    train: &'a Dataset,
    config: &'a BuildConfig,
    chooser: Chooser<'a>,
    log: Vec<NodeBuildLog>,
}

impl Grower<'_> {
    fn grow(&mut self, node_id: String, conditions: Vec<Condition>, indices: Vec<usize>, depth: usize) -> Result<HierarchyNode> {
        let schema = &self.train.schema;
        let identified: HashSet<String> = conditions.iter().map(|c| c.attribute.clone()).collect();
        let candidates: Vec<usize> = (0..schema.len())
            .filter(|&k| !identified.contains(&schema.attributes()[k].name))
            .collect();
        let resolved = self.train.resolve(&conditions)?;
        let table = table_over(
            schema,
            indices.iter().map(|&i| &self.train.samples[i]),
            &conditions,
            &resolved,
            &candidates,
        );

        let mut leaf_reason = None;
        if depth >= self.config.max_depth {
            leaf_reason = Some("max_depth reached".to_string());
        } else if indices.len() < self.config.min_node_samples {
            leaf_reason = Some(format!(
                "{} training samples < min_node_samples {}",
                indices.len(),
                self.config.min_node_samples
            ));
        } else if candidates.is_empty() {
            leaf_reason = Some("every attribute identified on this path".to_string());
        }
        let attribute = match (&leaf_reason, &self.chooser) {
            (Some(_), _) => None,
            (None, Chooser::Ranked(rank)) if conditions.is_empty() => {
                rank.entries.first().map(|e| e.attribute.clone())
            }
            (None, Chooser::Ranked(rank)) => select_next_attribute(rank, &table, &identified, self.config),
            (None, Chooser::Random(seed)) => {
                let tree_seed = seed::derive(self.config.seed, &format!("random-tree:{seed}"));
                let mut rng = seed::rng_for(tree_seed, &node_id);
                candidates
                    .choose(&mut rng)
                    .map(|&k| schema.attributes()[k].name.clone())
            }
        };
        if attribute.is_none() && leaf_reason.is_none() {
            leaf_reason = Some("no weakly correlated attribute left".to_string());
        }

        self.log.push(NodeBuildLog {
            node_id: node_id.clone(),
            conditions: conditions.clone(),
            train_samples: indices.len(),
            table,
            attribute: attribute.clone(),
            leaf_reason,
        });

        let mut node = HierarchyNode::leaf(node_id, conditions, indices.len());
        if let Some(attr) = attribute {
            let k = schema.require(&attr)?;
            for v in 0..schema.value_count(k) {
                let child_idx: Vec<usize> = indices
                    .iter()
                    .copied()
                    .filter(|&i| self.train.samples[i].attributes[k] == Some(v))
                    .collect();
                let mut child_cond = node.conditions.clone();
                child_cond.push(Condition::new(attr.clone(), v));
                let child = self.grow(format!("{}.{v}", node.node_id), child_cond, child_idx, depth + 1)?;
                node.children.push(child);
            }
            node.attribute = Some(attr);
        }
        Ok(node)
    }
}

fn grow_tree(train: &Dataset, config: &BuildConfig, chooser: Chooser<'_>, method: Method) -> Result<(Hierarchy, Vec<NodeBuildLog>)> {
    let mut grower = Grower {
        train,
        config,
        chooser,
        log: Vec::new(),
    };
    let root = grower.grow("r".to_string(), Vec::new(), (0..train.len()).collect(), 1)?;
    let h = Hierarchy {
        format_version: MODEL_FORMAT_VERSION,
        method,
        build_config: config.clone(),
        schema: train.schema.clone(),
        input_dim: train.feature_dim,
        trained: false,
        root,
    };
    Ok((h, grower.log))
}

/// Untrained tree from difficulty rank and path correlations.
pub fn build_structure(train: &Dataset, config: &BuildConfig) -> Result<(Hierarchy, BuildLog)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let rank = rank_attribute_difficulty(train, &config.probe)?;
    let (h, nodes) = grow_tree(train, config, Chooser::Ranked(&rank), Method::Hierarchical)?;
    Ok((
        h,
        BuildLog {
            rank: Some(rank),
            nodes,
        },
    ))
}

/// Ablation tree: same stopping rules, but each node picks uniformly among
/// the attributes not yet identified on its path.
pub fn build_random_tree(train: &Dataset, config: &BuildConfig, seed: u64) -> Result<(Hierarchy, BuildLog)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let (h, nodes) = grow_tree(train, config, Chooser::Random(seed), Method::RandomTree { seed })?;
    Ok((h, BuildLog { rank: None, nodes }))
}

/// Single-node tree holding one network over the whole gallery.
pub fn flat_skeleton(train: &Dataset, spec: NetworkSpec, config: &BuildConfig) -> Result<Hierarchy> {
    if spec.input_dim != train.feature_dim || spec.num_classes != 0 {
        return Err(Error::Invalid("flat network must take raw features and have no head".into()));
    }
    spec.validate()?;
    let mut root = HierarchyNode::leaf("r".to_string(), Vec::new(), train.len());
    root.spec = Some(spec);
    Ok(Hierarchy {
        format_version: MODEL_FORMAT_VERSION,
        method: Method::Flat,
        build_config: config.clone(),
        schema: train.schema.clone(),
        input_dim: train.feature_dim,
        trained: false,
        root,
    })
}

/// `(a_next - a) / (m_next - m)`: accuracy gained per extra byte.
pub fn delta_accuracy_density(accuracy: f64, next_accuracy: f64, memory: u64, next_memory: u64) -> f64 {
    (next_accuracy - accuracy) / (next_memory as f64 - memory as f64)
}

/// Index of the last candidate before the accuracy density gain stops
/// exceeding `threshold`. Equal gains count as diminishing, so ties go to
/// the smaller network.
pub fn select_by_accuracy_density(accuracies: &[f64], memories: &[u64], threshold: f64) -> usize {
    for i in 0..accuracies.len().saturating_sub(1) {
        let d = delta_accuracy_density(accuracies[i], accuracies[i + 1], memories[i], memories[i + 1]);
        if !(d > threshold) {
            return i;
        }
    }
    accuracies.len().saturating_sub(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchCandidate {
    pub layers: usize,
    /// Mean of held-out mAP and attribute accuracy (mAP alone at leaves).
    pub accuracy: f64,
    pub map_score: Option<f64>,
    pub attribute_accuracy: Option<f64>,
    pub memory_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSearchRecord {
    pub candidates: Vec<ArchCandidate>,
    /// Gain between consecutive candidates.
    pub delta_ad: Vec<f64>,
    pub threshold: f64,
    pub selected_layers: usize,
    pub diagnostic: Option<String>,
}

/// Held-out mAP: each validation embedding queries the fitting embeddings.
fn holdout_map(fit: &Array2<f32>, fit_ids: &[u32], val: &Array2<f32>, val_ids: &[u32]) -> Option<f64> {
    let mut total = 0.0;
    let mut counted = 0;
    for (q, &qid) in val.outer_iter().zip(val_ids) {
        let n_rel = fit_ids.iter().filter(|&&id| id == qid).count();
        if n_rel == 0 {
            continue;
        }
        let mut ranked: Vec<(f32, usize)> = fit
            .outer_iter()
            .enumerate()
            .map(|(i, g)| {
                let d: f32 = q.iter().zip(g.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, i)
            })
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let hits: Vec<bool> = ranked.iter().map(|&(_, i)| fit_ids[i] == qid).collect();
        total += average_precision(&hits, n_rel);
        counted += 1;
    }
    (counted > 0).then(|| total / counted as f64)
}

/// Grows the node network one hidden layer at a time and keeps the depth
/// where the accuracy density gain flattens out.
#[allow(clippy::too_many_arguments)]
pub fn search_architecture(
    inputs: ArrayView2<f32>,
    identities: &[u32],
    attribute: Option<(&[usize], usize)>,
    config: &BuildConfig,
    triplet: &TripletConfig,
    head: &HeadConfig,
    seed: u64,
) -> Result<(NetworkSpec, ArchSearchRecord)> {
    let n = inputs.nrows();
    let input_dim = inputs.ncols();
    let classes = attribute.map_or(0, |(_, k)| k);
    let depths: Vec<usize> = config.arch_candidate_depths.clone().collect();
    let smallest = config.node_spec(input_dim, depths[0], classes);
    let fallback = |why: String| {
        log::warn!("architecture search: {why}; using {} layer(s)", depths[0]);
        (
            smallest.clone(),
            ArchSearchRecord {
                candidates: Vec::new(),
                delta_ad: Vec::new(),
                threshold: config.arch_stop_threshold,
                selected_layers: depths[0],
                diagnostic: Some(why),
            },
        )
    };

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng_for(seed, "search-split"));
    let n_val = ((0.2 * n as f64).round() as usize).min(n);
    let (val_idx, fit_idx) = order.split_at(n_val);
    let fit_ids: Vec<u32> = fit_idx.iter().map(|&i| identities[i]).collect();
    let val_ids: Vec<u32> = val_idx.iter().map(|&i| identities[i]).collect();
    let distinct: HashSet<u32> = fit_ids.iter().copied().collect();
    if val_idx.is_empty() || distinct.len() < 2 {
        return Ok(fallback(format!("{n} samples are too few to hold out a validation split")));
    }
    let fit_x = inputs.select(Axis(0), fit_idx);
    let val_x = inputs.select(Axis(0), val_idx);

    let quick_triplet = TripletConfig {
        max_epochs: ((triplet.max_epochs as f64 * config.search_budget).ceil() as usize).max(1),
        ..triplet.clone()
    };
    let quick_head = HeadConfig {
        epochs: ((head.epochs as f64 * config.search_budget).ceil() as usize).max(1),
        ..head.clone()
    };

    let evaluated = par::map(&depths, |&layers| -> Result<ArchCandidate> {
        let spec = config.node_spec(input_dim, layers, classes);
        let tag = format!("search:{layers}");
        let mut net = Network::new(spec.clone(), seed::derive(seed, &tag))?;
        let tcfg = TripletConfig {
            seed: seed::derive(seed, &format!("{tag}:triplet")),
            ..quick_triplet.clone()
        };
        train_embedding(&mut net, fit_x.view(), &fit_ids, &tcfg)?;
        let mut attribute_accuracy = None;
        if let Some((labels, k)) = attribute {
            let fit_labels: Vec<usize> = fit_idx.iter().map(|&i| labels[i]).collect();
            let hcfg = HeadConfig {
                seed: seed::derive(seed, &format!("{tag}:head")),
                ..quick_head.clone()
            };
            train_classifier_head(&mut net, fit_x.view(), &fit_labels, k, &hcfg)?;
            let mut correct = 0;
            for &i in val_idx {
                let out = net.forward(&inputs.row(i).to_vec())?;
                if nn::argmax(out.logits.as_deref().unwrap_or(&[])) == labels[i] {
                    correct += 1;
                }
            }
            attribute_accuracy = Some(correct as f64 / val_idx.len() as f64);
        }
        let map_score = holdout_map(&net.embed_batch(fit_x.view()), &fit_ids, &net.embed_batch(val_x.view()), &val_ids);
        let parts: Vec<f64> = map_score.into_iter().chain(attribute_accuracy).collect();
        let accuracy = if parts.is_empty() {
            f64::NAN
        } else {
            parts.iter().sum::<f64>() / parts.len() as f64
        };
        Ok(ArchCandidate {
            layers,
            accuracy,
            map_score,
            attribute_accuracy,
            memory_bytes: cost_of(&spec).param_bytes,
        })
    });
    let candidates = evaluated.into_iter().collect::<Result<Vec<_>>>()?;
    if candidates.iter().any(|c| !c.accuracy.is_finite()) {
        return Ok(fallback("validation split gives no usable accuracy".into()));
    }

    let accuracies: Vec<f64> = candidates.iter().map(|c| c.accuracy).collect();
    let memories: Vec<u64> = candidates.iter().map(|c| c.memory_bytes).collect();
    let delta_ad = (0..candidates.len().saturating_sub(1))
        .map(|i| delta_accuracy_density(accuracies[i], accuracies[i + 1], memories[i], memories[i + 1]))
        .collect();
    let pick = select_by_accuracy_density(&accuracies, &memories, config.arch_stop_threshold);
    let selected_layers = candidates[pick].layers;
    Ok((
        config.node_spec(input_dim, selected_layers, classes),
        ArchSearchRecord {
            candidates,
            delta_ad,
            threshold: config.arch_stop_threshold,
            selected_layers,
            diagnostic: None,
        },
    ))
}

/// How each node's network depth is chosen during training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerPolicy {
    Search,
    Fixed(usize),
    /// Use the network spec stored on each skeleton node.
    Assigned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub triplet: TripletConfig,
    pub head: HeadConfig,
    pub layers: LayerPolicy,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTrainLog {
    pub node_id: String,
    pub samples: usize,
    pub identities: usize,
    pub spec: Option<NetworkSpec>,
    pub search: Option<ArchSearchRecord>,
    pub triplet_epochs: usize,
    pub triplet_loss: Option<f64>,
    pub head_loss: Option<f64>,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub nodes: Vec<NodeTrainLog>,
}

struct NodeTrainer<'a> {
    train: &'a Dataset,
    identities: Vec<u32>,
    options: &'a TrainOptions,
    config: &'a BuildConfig,
}

impl NodeTrainer<'_> {
    fn train(&self, node: &HierarchyNode, inputs: Array2<f32>, indices: Vec<usize>) -> Result<(HierarchyNode, Vec<NodeTrainLog>)> {
        let ids: Vec<u32> = indices.iter().map(|&i| self.identities[i]).collect();
        let distinct = ids.iter().copied().collect::<HashSet<_>>().len();
        let mut log = NodeTrainLog {
            node_id: node.node_id.clone(),
            samples: indices.len(),
            identities: distinct,
            spec: None,
            search: None,
            triplet_epochs: 0,
            triplet_loss: None,
            head_loss: None,
            diagnostic: None,
        };
        if distinct < 2 {
            let msg = format!("{distinct} identities in the node's training subset; pass-through leaf");
            log::warn!("node {}: {msg}", node.node_id);
            log.diagnostic = Some(msg);
            let mut leaf = HierarchyNode::leaf(node.node_id.clone(), node.conditions.clone(), indices.len());
            leaf.pass_through = true;
            return Ok((leaf, vec![log]));
        }

        let attr = node
            .attribute
            .as_ref()
            .map(|a| self.train.schema.require(a))
            .transpose()?;
        let labels: Option<Vec<usize>> = attr.map(|k| {
            indices
                .iter()
                .map(|&i| self.train.samples[i].attributes[k].expect("training samples are labelled"))
                .collect()
        });
        let classes = attr.map_or(0, |k| self.train.schema.value_count(k));
        let seed = self.options.seed;
        let tag = |what: &str| seed::derive(seed, &format!("{}:{what}", node.node_id));

        let spec = match (&self.options.layers, &node.spec) {
            (LayerPolicy::Assigned, Some(spec)) => spec.clone(),
            (LayerPolicy::Assigned, None) => {
                return Err(Error::Invalid(format!("node {} has no assigned spec", node.node_id)))
            }
            (LayerPolicy::Fixed(k), _) => self.config.node_spec(inputs.ncols(), *k, classes),
            (LayerPolicy::Search, _) => {
                let (spec, record) = search_architecture(
                    inputs.view(),
                    &ids,
                    labels.as_deref().map(|l| (l, classes)),
                    self.config,
                    &self.options.triplet,
                    &self.options.head,
                    tag("search"),
                )?;
                log.search = Some(record);
                spec
            }
        };
        log.spec = Some(spec.clone());

        let mut net = Network::new(spec.clone(), tag("init"))?;
        let tcfg = TripletConfig {
            seed: tag("triplet"),
            ..self.options.triplet.clone()
        };
        let report = train_embedding(&mut net, inputs.view(), &ids, &tcfg)
            .map_err(|e| Error::Invalid(format!("node {}: {e}", node.node_id)))?;
        log.triplet_epochs = report.epochs_run;
        log.triplet_loss = Some(report.final_loss());
        if let Some(labels) = &labels {
            let hcfg = HeadConfig {
                seed: tag("head"),
                ..self.options.head.clone()
            };
            log.head_loss = Some(train_classifier_head(&mut net, inputs.view(), labels, classes, &hcfg)?);
        }
        net.body_frozen = true;

        let mut trained = HierarchyNode {
            node_id: node.node_id.clone(),
            conditions: node.conditions.clone(),
            attribute: node.attribute.clone(),
            spec: Some(spec),
            network: None,
            pass_through: false,
            train_subset_size: indices.len(),
            children: Vec::new(),
        };
        let mut logs = vec![log];
        if let (Some(labels), false) = (&labels, node.children.is_empty()) {
            let hidden = net.hidden_batch(inputs.view());
            let jobs: Vec<(usize, &HierarchyNode)> = node.children.iter().enumerate().collect();
            let results = par::map(&jobs, |&(v, child)| {
                let rows: Vec<usize> = (0..indices.len()).filter(|&r| labels[r] == v).collect();
                let child_idx = rows.iter().map(|&r| indices[r]).collect();
                self.train(child, hidden.select(Axis(0), &rows), child_idx)
            });
            for r in results {
                let (child, child_logs) = r?;
                trained.children.push(child);
                logs.extend(child_logs);
            }
        }
        trained.network = Some(net);
        Ok((trained, logs))
    }
}

/// Trains every node root-down. Each node first learns its embedding with
/// the triplet loss, then (internal nodes only) a classification head on the
/// frozen embedding. Children start only after their parent is final, and
/// siblings train concurrently.
pub fn train_hierarchy(skeleton: &Hierarchy, train: &Dataset, options: &TrainOptions) -> Result<(Hierarchy, TrainLog)> {
    options.triplet.validate()?;
    options.head.validate()?;
    if let LayerPolicy::Fixed(0) = options.layers {
        return Err(Error::Config("fixed layer count must be positive".into()));
    }
    if train.schema != skeleton.schema {
        return Err(Error::Invalid("dataset schema differs from the model schema".into()));
    }
    if train.feature_dim != skeleton.input_dim {
        return Err(Error::Dimension {
            expected: skeleton.input_dim,
            got: train.feature_dim,
        });
    }
    let identities = train.identity_labels();
    let distinct = identities.iter().collect::<HashSet<_>>().len();
    if distinct < 2 {
        return Err(Error::Invalid(format!(
            "fewer than 2 identities ({distinct}) in the training split"
        )));
    }
    let trainer = NodeTrainer {
        train,
        identities,
        options,
        config: &skeleton.build_config,
    };
    let inputs = feature_matrix(train.samples.iter(), train.feature_dim);
    let (root, nodes) = trainer.train(&skeleton.root, inputs, (0..train.len()).collect())?;
    let h = Hierarchy {
        root,
        trained: true,
        ..skeleton.clone()
    };
    h.validate()?;
    Ok((h, TrainLog { nodes }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn dress_implies_female() {
        let ds = fixtures::six();
        let t = correlation_table(&ds, &[Condition::new("dress", 1)], &names(&["gender"])).unwrap();
        assert_eq!(t.support, 2);
        assert_eq!(t.rows[0].probabilities.as_deref(), Some(&[0.0, 1.0][..]));
    }

    #[test]
    fn empty_condition_subset_is_unsupported() {
        let ds = fixtures::six();
        let t = correlation_table(
            &ds,
            &[Condition::new("gender", 0), Condition::new("dress", 1)],
            &names(&["gender"]),
        )
        .unwrap();
        assert_eq!(t.support, 0);
        assert!(t.rows[0].probabilities.is_none());
    }

    #[test]
    fn ten_sample_hand_count() {
        // 6 samples satisfy gender=female; 3 of those wear a dress.
        let samples = (0..10)
            .map(|i| {
                let g = usize::from(i < 6);
                let d = usize::from(i < 3);
                fixtures::sample(&format!("s{i}"), &format!("p{i}"), crate::data::Split::Train, &[Some(g), Some(d)])
            })
            .collect();
        let ds = Dataset::new(fixtures::schema(), 4, samples).unwrap();
        let t = correlation_table(&ds, &[Condition::new("gender", 1)], &names(&["dress"])).unwrap();
        assert_eq!(t.rows[0].probabilities.as_deref(), Some(&[0.5, 0.5][..]));
    }

    fn rank(order: &[&str]) -> DifficultyRank {
        DifficultyRank::from_errors(
            order
                .iter()
                .enumerate()
                .map(|(i, a)| RankEntry {
                    attribute: a.to_string(),
                    validation_error: i as f64 * 0.1,
                })
                .collect(),
        )
    }

    fn table(rows: &[(&str, Option<Vec<f64>>)]) -> CorrelationTable {
        CorrelationTable {
            path_conditions: vec![],
            support: 1,
            rows: rows
                .iter()
                .map(|(a, p)| CorrelationRow {
                    attribute: a.to_string(),
                    probabilities: p.clone(),
                })
                .collect(),
        }
    }

    #[test]
    fn dress_among_females_is_eligible() {
        let t = table(&[("dress", Some(vec![0.66, 0.34]))]);
        let got = select_next_attribute(&rank(&["dress"]), &t, &HashSet::new(), &BuildConfig::default());
        assert_eq!(got.as_deref(), Some("dress"));
    }

    #[test]
    fn dress_among_males_is_inferred() {
        let t = table(&[("dress", Some(vec![1.0, 0.0]))]);
        let got = select_next_attribute(&rank(&["dress"]), &t, &HashSet::new(), &BuildConfig::default());
        assert_eq!(got, None);
    }

    #[test]
    fn selection_prefers_rank_and_skips_identified() {
        let t = table(&[
            ("a", Some(vec![0.5, 0.5])),
            ("b", Some(vec![0.6, 0.4])),
            ("c", Some(vec![0.95, 0.05])),
        ]);
        let cfg = BuildConfig::default();
        let r = rank(&["c", "a", "b"]);
        assert_eq!(select_next_attribute(&r, &t, &HashSet::new(), &cfg).as_deref(), Some("a"));
        let done: HashSet<String> = names(&["a"]).into_iter().collect();
        assert_eq!(select_next_attribute(&r, &t, &done, &cfg).as_deref(), Some("b"));
        let all: HashSet<String> = names(&["a", "b", "c"]).into_iter().collect();
        assert_eq!(select_next_attribute(&r, &t, &all, &cfg), None);
    }

    #[test]
    fn band_matches_interval_for_binary() {
        for i in 0..=100 {
            let p = i as f64 / 100.0;
            let probs = [1.0 - p, p];
            let by_max = is_weakly_correlated(&probs, 0.3, 0.7);
            let in_band = (30..=70).contains(&i);
            assert_eq!(by_max, in_band, "p = {p}");
        }
    }

    #[test]
    fn multi_valued_band_uses_max_only() {
        assert!(is_weakly_correlated(&[0.25, 0.25, 0.25, 0.25], 0.3, 0.7));
        assert!(!is_weakly_correlated(&[0.1, 0.1, 0.05, 0.75], 0.3, 0.7));
    }

    #[test]
    fn accuracy_density_worked_example() {
        let d = delta_accuracy_density(0.80, 0.82, 10_000, 12_000);
        assert!((d - 1.0e-5).abs() < 1e-15);
    }

    #[test]
    fn accuracy_density_stops_at_plateau() {
        // a2 == a3: no gain, keep 2 layers
        let pick = select_by_accuracy_density(&[0.5, 0.7, 0.7], &[100, 200, 300], 1e-9);
        assert_eq!(pick, 1);
        // strictly improving with threshold 0 -> deepest
        let pick = select_by_accuracy_density(&[0.5, 0.6, 0.7], &[100, 200, 300], 0.0);
        assert_eq!(pick, 2);
        // gain exactly at the threshold goes to the smaller network
        let pick = select_by_accuracy_density(&[0.5, 0.6], &[100, 200], 0.001);
        assert_eq!(pick, 0);
    }

    #[test]
    fn band_config_validation() {
        let cfg = BuildConfig {
            weak_band_low: 0.7,
            weak_band_high: 0.3,
            ..BuildConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
