//! End-to-end runs: data, structured and ablation trees, the flat
//! baseline, and the comparison report.
//!
//! A single global seed is expanded into per-component seeds, so each stage
//! can be re-run alone and still reproduce the artifacts of a full run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset_dir, Dataset, Split};
use crate::engine::{index_gallery, query_all, AttributeSource, QueryResult};
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions, GroundTruth, MethodKind, MethodResult};
use crate::nn::{HeadConfig, NetworkSpec, TripletConfig};
use crate::seed;
use crate::synth::{self, SynthConfig};
use crate::tree::{
    build_random_tree, build_structure, flat_skeleton, train_hierarchy, BuildConfig, BuildLog, Hierarchy,
    LayerPolicy, Method, TrainLog, TrainOptions,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synth(SynthConfig),
    /// Directory holding manifest.csv, schema.json and features.bin.
    Dir(PathBuf),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(SynthConfig::default())
    }
}

/// The single large network every query goes through in the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlatConfig {
    pub hidden_layers: Vec<usize>,
    pub embedding_dim: usize,
    pub dense: bool,
}

impl Default for FlatConfig {
    fn default() -> Self {
        FlatConfig {
            hidden_layers: vec![256, 256],
            embedding_dim: 128,
            dense: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub attribute_sources: Vec<AttributeSource>,
    pub same_camera_exclusion: bool,
    /// Matches kept per query in dumps; metrics always rank the whole
    /// searched partition.
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            attribute_sources: vec![AttributeSource::Predicted],
            same_camera_exclusion: false,
            top_k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSource,
    pub build: BuildConfig,
    pub triplet: TripletConfig,
    pub head: HeadConfig,
    pub flat: FlatConfig,
    pub eval: EvalConfig,
    pub random_trees: usize,
    /// Skip the architecture search and give every node this many hidden
    /// layers.
    pub fixed_layers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataSource::default(),
            build: BuildConfig::default(),
            triplet: TripletConfig::default(),
            head: HeadConfig::default(),
            flat: FlatConfig::default(),
            eval: EvalConfig::default(),
            random_trees: 5,
            fixed_layers: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synth(s) = &self.data {
            s.validate()?;
        }
        self.build.validate()?;
        self.triplet.validate()?;
        self.head.validate()?;
        if self.flat.hidden_layers.is_empty() || self.flat.hidden_layers.contains(&0) || self.flat.embedding_dim == 0 {
            return Err(Error::Config("flat network needs positive layer widths".into()));
        }
        if self.eval.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if self.eval.attribute_sources.is_empty() {
            return Err(Error::Config("eval.attribute_sources is empty".into()));
        }
        if self.fixed_layers == Some(0) {
            return Err(Error::Config("fixed_layers must be positive".into()));
        }
        Ok(())
    }

    /// Copy with every nested seed derived from the global one.
    pub fn seeded(&self) -> RunConfig {
        let mut c = self.clone();
        let s = self.seed;
        if let DataSource::Synth(synth) = &mut c.data {
            synth.seed = seed::derive(s, "synth");
        }
        c.build.seed = seed::derive(s, "build");
        c.build.probe.seed = seed::derive(s, "probe");
        c.triplet.seed = seed::derive(s, "triplet");
        c.head.seed = seed::derive(s, "head");
        c
    }

    pub fn layer_policy(&self) -> LayerPolicy {
        match self.fixed_layers {
            Some(k) => LayerPolicy::Fixed(k),
            None => LayerPolicy::Search,
        }
    }
}

/// Generates or loads the dataset named by the config (seeds applied).
pub fn load_data(config: &RunConfig) -> Result<Dataset> {
    match &config.seeded().data {
        DataSource::Synth(s) => synth::generate(s),
        DataSource::Dir(dir) => load_dataset_dir(dir),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Hierarchical,
    RandomTree(u64),
    Flat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub hierarchy: Hierarchy,
    pub build_log: Option<BuildLog>,
    pub train_log: TrainLog,
}

/// Builds and trains one model on the training split of `data`.
pub fn train_model(config: &RunConfig, data: &Dataset, kind: ModelKind) -> Result<TrainedModel> {
    config.validate()?;
    let cfg = config.seeded();
    let train = data.split(Split::Train);
    let identities = train.identities().len();
    if identities < 2 {
        return Err(Error::Invalid(format!(
            "fewer than 2 identities ({identities}) in the training split"
        )));
    }
    let options = |tag: &str, layers: LayerPolicy| TrainOptions {
        triplet: cfg.triplet.clone(),
        head: cfg.head.clone(),
        layers,
        seed: seed::derive(cfg.seed, tag),
    };
    let (skeleton, build_log, opts) = match kind {
        ModelKind::Hierarchical => {
            let (h, log) = build_structure(&train, &cfg.build)?;
            (h, Some(log), options("train", cfg.layer_policy()))
        }
        ModelKind::RandomTree(s) => {
            let (h, log) = build_random_tree(&train, &cfg.build, s)?;
            (h, Some(log), options(&format!("train:random-tree:{s}"), cfg.layer_policy()))
        }
        ModelKind::Flat => {
            let spec = NetworkSpec {
                dense: cfg.flat.dense,
                ..NetworkSpec::new(train.feature_dim, cfg.flat.hidden_layers.clone(), cfg.flat.embedding_dim, 0)
            };
            let h = flat_skeleton(&train, spec, &cfg.build)?;
            (h, None, options("train:flat", LayerPolicy::Assigned))
        }
    };
    let (hierarchy, train_log) = train_hierarchy(&skeleton, &train, &opts)?;
    Ok(TrainedModel {
        hierarchy,
        build_log,
        train_log,
    })
}

fn kind_of(method: &Method) -> MethodKind {
    match method {
        Method::Hierarchical => MethodKind::Hierarchical,
        Method::RandomTree { .. } => MethodKind::RandomTree,
        Method::Flat => MethodKind::Flat,
    }
}

/// Indexes the gallery, answers every query over its full partition and
/// scores the rankings.
pub fn evaluate_model(
    hierarchy: &Hierarchy,
    data: &Dataset,
    source: AttributeSource,
    eval_config: &EvalConfig,
) -> Result<(MethodResult, Vec<QueryResult>)> {
    if data.schema != hierarchy.schema {
        return Err(Error::Invalid("dataset schema differs from the model schema".into()));
    }
    if data.feature_dim != hierarchy.input_dim {
        return Err(Error::Dimension {
            expected: hierarchy.input_dim,
            got: data.feature_dim,
        });
    }
    let gallery = data.split(Split::Gallery);
    let queries = data.split(Split::Query);
    let index = index_gallery(hierarchy, &gallery, source)?;
    let results = query_all(hierarchy, &index, &queries, gallery.len().max(1))?;
    let gt = GroundTruth::new(&gallery, &queries);
    let options = EvalOptions {
        same_camera_exclusion: eval_config.same_camera_exclusion,
    };
    let method = MethodResult {
        method: hierarchy.method.label(),
        kind: kind_of(&hierarchy.method),
        attribute_source: source.as_str().to_string(),
        split_signature: eval::split_signature(&gallery, &queries),
        cost: eval::worst_case_cost(hierarchy),
        metrics: eval::evaluate(&results, &gt, options),
    };
    Ok((method, results))
}

/// Keeps the first `top_k` matches of each result.
pub fn truncate(results: &mut [QueryResult], top_k: usize) {
    for r in results {
        r.matches.truncate(top_k);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub models: Vec<TrainedModel>,
    pub results: Vec<MethodResult>,
    pub report: eval::CostReport,
}

impl Experiment {
    pub fn result(&self, method: &str, source: AttributeSource) -> Option<&MethodResult> {
        self.results
            .iter()
            .find(|r| r.method == method && r.attribute_source == source.as_str())
    }

    pub fn random_tree_results(&self, source: AttributeSource) -> Vec<&MethodResult> {
        self.results
            .iter()
            .filter(|r| r.kind == MethodKind::RandomTree && r.attribute_source == source.as_str())
            .collect()
    }
}

/// Trains the structured tree, the flat baseline and `random_trees`
/// ablation trees, then evaluates each under every configured attribute
/// source.
pub fn run_experiment(config: &RunConfig) -> Result<Experiment> {
    config.validate()?;
    let data = load_data(config)?;
    let mut kinds = vec![ModelKind::Hierarchical, ModelKind::Flat];
    kinds.extend((0..config.random_trees as u64).map(ModelKind::RandomTree));
    let models = kinds
        .iter()
        .map(|&k| train_model(config, &data, k))
        .collect::<Result<Vec<_>>>()?;
    let mut results = Vec::new();
    for &source in &config.eval.attribute_sources {
        for m in &models {
            results.push(evaluate_model(&m.hierarchy, &data, source, &config.eval)?.0);
        }
    }
    let report = eval::compare(&results)?;
    Ok(Experiment {
        models,
        results,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"seed": 1, "bogus": 2}"#);
        assert!(err.is_err());
        let err = serde_json::from_str::<RunConfig>(r#"{"build": {"weak_band": 0.3}}"#);
        assert!(err.is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 7, "data": {"synth": {"n_identities": 10}}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.random_trees, 5);
        match &cfg.data {
            DataSource::Synth(s) => assert_eq!(s.n_identities, 10),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn seeds_follow_global_seed() {
        let a = RunConfig::default().seeded();
        let b = RunConfig {
            seed: 1,
            ..RunConfig::default()
        }
        .seeded();
        assert_ne!(a.triplet.seed, b.triplet.seed);
        assert_ne!(a.build.seed, a.triplet.seed);
        assert_eq!(a, RunConfig::default().seeded());
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = RunConfig::default();
        cfg.eval.top_k = 0;
        assert!(cfg.validate().is_err());
        let cfg = RunConfig {
            fixed_layers: Some(0),
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
