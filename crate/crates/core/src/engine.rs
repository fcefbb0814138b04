//! Routing and partitioned retrieval.
//!
//! A query runs one network per level: each internal node classifies its
//! attribute and hands the hidden activation to the chosen child. Only the
//! gallery images filed under the arrival leaf are compared.

use std::collections::BTreeMap;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::nn::{argmax, Network};
use crate::par;
use crate::tree::{Hierarchy, HierarchyNode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeSource {
    #[default]
    Predicted,
    GroundTruth,
}

impl AttributeSource {
    pub fn as_str(self) -> &'static str {
        match self {
            AttributeSource::Predicted => "predicted",
            AttributeSource::GroundTruth => "ground_truth",
        }
    }
}

impl FromStr for AttributeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted" => Ok(AttributeSource::Predicted),
            "ground_truth" => Ok(AttributeSource::GroundTruth),
            other => Err(Error::Config(format!(
                "attribute source {other:?}: expected predicted or ground_truth"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub attribute: String,
    pub value: usize,
    pub logits: Vec<f32>,
    /// Value taken from a label rather than the head's argmax.
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteTrace {
    pub node_ids: Vec<String>,
    pub decisions: Vec<Decision>,
    pub leaf_embedding: Vec<f32>,
    /// Embedding produced at each visited node, aligned with `node_ids`.
    #[serde(skip)]
    pub node_embeddings: Vec<Vec<f32>>,
    pub flops_spent: u64,
}

impl RouteTrace {
    pub fn leaf_id(&self) -> &str {
        self.node_ids.last().map(String::as_str).unwrap_or("")
    }
}

/// Routes by the heads' predictions.
pub fn route(hierarchy: &Hierarchy, features: &[f32]) -> Result<RouteTrace> {
    route_with(hierarchy, features, None)
}

/// Routes with `labels` (indexed like the schema) overriding predictions
/// wherever a label is present.
pub fn route_with(hierarchy: &Hierarchy, features: &[f32], labels: Option<&[Option<usize>]>) -> Result<RouteTrace> {
    if !hierarchy.trained {
        return Err(Error::Invalid("hierarchy is untrained".into()));
    }
    if features.len() != hierarchy.input_dim {
        return Err(Error::Dimension {
            expected: hierarchy.input_dim,
            got: features.len(),
        });
    }
    let mut trace = RouteTrace {
        node_ids: Vec::new(),
        decisions: Vec::new(),
        leaf_embedding: Vec::new(),
        node_embeddings: Vec::new(),
        flops_spent: 0,
    };
    let mut node: &HierarchyNode = &hierarchy.root;
    let mut input = features.to_vec();
    loop {
        trace.node_ids.push(node.node_id.clone());
        let Some(net) = node.network.as_ref() else {
            // pass-through leaf: keep the parent's embedding
            let parent = trace.node_embeddings.last().cloned().ok_or_else(|| {
                Error::Invalid(format!("node {} has no network and no parent", node.node_id))
            })?;
            trace.node_embeddings.push(parent.clone());
            trace.leaf_embedding = parent;
            return Ok(trace);
        };
        let out = net.forward(&input)?;
        trace.flops_spent += net.cost().flops;
        trace.node_embeddings.push(out.embedding.clone());
        let Some(attr) = node.attribute.as_ref() else {
            trace.leaf_embedding = out.embedding;
            return Ok(trace);
        };
        let logits = out.logits.unwrap_or_default();
        let label = labels.and_then(|l| l[hierarchy.schema.index_of(attr).expect("validated tree")]);
        let value = label.unwrap_or_else(|| argmax(&logits));
        trace.decisions.push(Decision {
            attribute: attr.clone(),
            value,
            logits,
            forced: label.is_some(),
        });
        node = &node.children[value];
        input = out.hidden;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub sample_id: String,
    pub identity_id: String,
    pub camera_id: String,
    pub embedding: Vec<f32>,
}

/// Gallery embeddings filed by node. Every gallery sample sits in exactly
/// one leaf partition; internal nodes keep their own embeddings of the
/// samples below them for the empty-leaf fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryIndex {
    pub attribute_source: AttributeSource,
    pub partitions: BTreeMap<String, Vec<GalleryEntry>>,
    pub subtrees: BTreeMap<String, Vec<GalleryEntry>>,
    pub diagnostics: Vec<String>,
}

impl GalleryIndex {
    pub fn len(&self) -> usize {
        self.partitions.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn partition_sizes(&self) -> BTreeMap<&str, usize> {
        self.partitions.iter().map(|(k, v)| (k.as_str(), v.len())).collect()
    }

    fn entries(&self, node_id: &str) -> &[GalleryEntry] {
        self.partitions
            .get(node_id)
            .or_else(|| self.subtrees.get(node_id))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

fn entry(sample: &Sample, embedding: Vec<f32>) -> GalleryEntry {
    GalleryEntry {
        sample_id: sample.sample_id.clone(),
        identity_id: sample.identity_id.clone(),
        camera_id: sample.camera_id.clone(),
        embedding,
    }
}

pub fn index_gallery(hierarchy: &Hierarchy, gallery: &Dataset, source: AttributeSource) -> Result<GalleryIndex> {
    if !hierarchy.trained {
        return Err(Error::Invalid("hierarchy is untrained".into()));
    }
    if gallery.schema != hierarchy.schema {
        return Err(Error::Invalid("gallery schema differs from the model schema".into()));
    }
    let traces = par::map(&gallery.samples, |s| match source {
        AttributeSource::Predicted => route(hierarchy, &s.features),
        AttributeSource::GroundTruth => route_with(hierarchy, &s.features, Some(&s.attributes)),
    });

    let mut index = GalleryIndex {
        attribute_source: source,
        partitions: BTreeMap::new(),
        subtrees: BTreeMap::new(),
        diagnostics: Vec::new(),
    };
    for leaf in hierarchy.leaves() {
        index.partitions.insert(leaf.node_id.clone(), Vec::new());
    }
    for (sample, trace) in gallery.samples.iter().zip(traces) {
        let trace = trace?;
        if source == AttributeSource::GroundTruth && trace.decisions.iter().any(|d| !d.forced) {
            let msg = format!("gallery sample {}: missing label on its path, routed by prediction", sample.sample_id);
            log::warn!("{msg}");
            index.diagnostics.push(msg);
        }
        let (leaf, ancestors) = trace.node_ids.split_last().expect("route visits the root");
        for (id, emb) in ancestors.iter().zip(&trace.node_embeddings) {
            index.subtrees.entry(id.clone()).or_default().push(entry(sample, emb.clone()));
        }
        index
            .partitions
            .get_mut(leaf)
            .expect("leaf registered")
            .push(entry(sample, trace.leaf_embedding));
    }
    Ok(index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub sample_id: String,
    pub identity_id: String,
    pub camera_id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub matches: Vec<Match>,
    pub distances_computed: usize,
    /// Node whose gallery entries were searched.
    pub searched_node: String,
    pub fallback: bool,
    pub route: RouteTrace,
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn rank(embedding: &[f32], entries: &[GalleryEntry], top_k: usize) -> Vec<Match> {
    let mut scored: Vec<(f64, &GalleryEntry)> = entries.iter().map(|e| (euclidean(embedding, &e.embedding), e)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.sample_id.cmp(&b.1.sample_id)));
    scored
        .into_iter()
        .take(top_k)
        .map(|(distance, e)| Match {
            sample_id: e.sample_id.clone(),
            identity_id: e.identity_id.clone(),
            camera_id: e.camera_id.clone(),
            distance,
        })
        .collect()
}

fn check_top_k(top_k: usize) -> Result<()> {
    if top_k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    Ok(())
}

/// Ranks the arrival leaf's partition. An empty partition falls back to the
/// nearest ancestor with gallery entries below it, compared in that
/// ancestor's embedding space.
pub fn query(hierarchy: &Hierarchy, index: &GalleryIndex, query_id: &str, features: &[f32], top_k: usize) -> Result<QueryResult> {
    check_top_k(top_k)?;
    let route = route(hierarchy, features)?;
    let depth = route.node_ids.len();
    let level = (0..depth)
        .rev()
        .find(|&i| !index.entries(&route.node_ids[i]).is_empty())
        .unwrap_or(depth - 1);
    let searched = &route.node_ids[level];
    let entries = index.entries(searched);
    let fallback = level + 1 != depth;
    if fallback {
        log::debug!("query {query_id}: leaf {} empty, searching {searched}", route.leaf_id());
    }
    Ok(QueryResult {
        query_id: query_id.to_string(),
        matches: rank(&route.node_embeddings[level], entries, top_k),
        distances_computed: entries.len(),
        searched_node: searched.clone(),
        fallback,
        route,
    })
}

/// Exhaustive search with a single network.
pub fn flat_query(network: &Network, gallery: &[GalleryEntry], query_id: &str, features: &[f32], top_k: usize) -> Result<QueryResult> {
    check_top_k(top_k)?;
    let out = network.forward(features)?;
    Ok(QueryResult {
        query_id: query_id.to_string(),
        matches: rank(&out.embedding, gallery, top_k),
        distances_computed: gallery.len(),
        searched_node: "r".to_string(),
        fallback: false,
        route: RouteTrace {
            node_ids: vec!["r".to_string()],
            decisions: Vec::new(),
            leaf_embedding: out.embedding.clone(),
            node_embeddings: vec![out.embedding],
            flops_spent: network.cost().flops,
        },
    })
}

pub fn query_all(hierarchy: &Hierarchy, index: &GalleryIndex, queries: &Dataset, top_k: usize) -> Result<Vec<QueryResult>> {
    check_top_k(top_k)?;
    par::map(&queries.samples, |s| query(hierarchy, index, &s.sample_id, &s.features, top_k))
        .into_iter()
        .collect()
}

pub fn write_jsonl(results: &[QueryResult], mut out: impl Write) -> Result<()> {
    for r in results {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<jsonl output>", e))?;
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::data::{Condition, Split};

    fn sample(id: &str, identity: &str, features: [f32; 2], attrs: [Option<usize>; 2]) -> Sample {
        Sample {
            sample_id: id.into(),
            identity_id: identity.into(),
            camera_id: "c0".into(),
            split: Split::Gallery,
            attributes: attrs.to_vec(),
            features: features.to_vec(),
        }
    }

    #[test]
    fn single_node_route() {
        let h = hierarchy(leaf("r", vec![], Some(identity_net(0))));
        let t = route(&h, &[1.0, 2.0]).unwrap();
        assert_eq!(t.node_ids, vec!["r"]);
        assert!(t.decisions.is_empty());
        assert_eq!(t.leaf_embedding, vec![1.0, 2.0]);
    }

    #[test]
    fn constant_head_routes_to_child_zero() {
        let root = HierarchyNode {
            node_id: "r".into(),
            conditions: vec![],
            attribute: Some("a".into()),
            spec: Some(constant_head_net(0).spec),
            network: Some(constant_head_net(0)),
            pass_through: false,
            train_subset_size: 0,
            children: vec![
                leaf("r.0", vec![Condition::new("a", 0)], Some(identity_net(0))),
                leaf("r.1", vec![Condition::new("a", 1)], Some(identity_net(0))),
            ],
        };
        let h = hierarchy(root);
        for x in [[0.0, 5.0], [5.0, 0.0], [-3.0, 3.0]] {
            assert_eq!(route(&h, &x).unwrap().leaf_id(), "r.0");
        }
    }

    #[test]
    fn depth_two_hand_trace() {
        let h = depth_two();
        // x0 > x1 -> a = 0; constant head -> b = 1
        let t = route(&h, &[3.0, 1.0]).unwrap();
        assert_eq!(t.node_ids, vec!["r", "r.0", "r.0.1"]);
        assert_eq!(t.decisions.len(), 2);
        let cost = |id: &str| h.node(id).unwrap().network.as_ref().unwrap().cost().flops;
        assert_eq!(t.flops_spent, cost("r") + cost("r.0") + cost("r.0.1"));
        // x1 > x0 -> a = 1
        let t = route(&h, &[1.0, 3.0]).unwrap();
        assert_eq!(t.node_ids, vec!["r", "r.1"]);
        assert_eq!(t.flops_spent, cost("r") + cost("r.1"));
        // negative inputs are clipped by the hidden ReLU: tie -> a = 0
        let t = route(&h, &[-1.0, -2.0]).unwrap();
        assert_eq!(t.leaf_id(), "r.0.1");
    }

    #[test]
    fn ground_truth_overrides_prediction() {
        let h = depth_two();
        let t = route_with(&h, &[3.0, 1.0], Some(&[Some(1), None])).unwrap();
        assert_eq!(t.leaf_id(), "r.1");
        assert!(t.decisions[0].forced);
        let t = route_with(&h, &[3.0, 1.0], Some(&[Some(0), Some(0)])).unwrap();
        assert_eq!(t.leaf_id(), "r.0.0");
    }

    #[test]
    fn dimension_mismatch() {
        let h = depth_two();
        assert!(matches!(route(&h, &[1.0]), Err(Error::Dimension { .. })));
    }

    fn gallery() -> Dataset {
        Dataset::new(
            schema(),
            2,
            vec![
                sample("g0", "p0", [3.0, 1.0], [Some(0), Some(1)]),
                sample("g1", "p1", [1.0, 3.0], [Some(1), Some(0)]),
                sample("g2", "p2", [2.0, 5.0], [Some(1), Some(1)]),
                sample("g3", "p3", [4.0, 0.0], [Some(0), None]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn partitions_cover_gallery() {
        let h = depth_two();
        for source in [AttributeSource::Predicted, AttributeSource::GroundTruth] {
            let idx = index_gallery(&h, &gallery(), source).unwrap();
            assert_eq!(idx.len(), 4);
        }
        let idx = index_gallery(&h, &gallery(), AttributeSource::GroundTruth).unwrap();
        assert_eq!(idx.partitions["r.0.1"].len(), 2); // g0 by label, g3 predicted
        assert_eq!(idx.diagnostics.len(), 1);
    }

    #[test]
    fn duplicate_found_at_rank_one() {
        let h = depth_two();
        let idx = index_gallery(&h, &gallery(), AttributeSource::Predicted).unwrap();
        let r = query(&h, &idx, "q", &[1.0, 3.0], 10).unwrap();
        assert_eq!(r.searched_node, "r.1");
        assert_eq!(r.distances_computed, 2);
        assert_eq!(r.matches[0].sample_id, "g1");
        assert_eq!(r.matches[0].distance, 0.0);
        assert!(!r.fallback);
    }

    #[test]
    fn empty_leaf_falls_back_to_ancestor() {
        let h = depth_two();
        let idx = index_gallery(&h, &gallery(), AttributeSource::Predicted).unwrap();
        assert!(idx.partitions["r.0.0"].is_empty());
        let mut forced = idx.clone();
        forced.partitions.get_mut("r.0.1").unwrap().clear();
        forced.subtrees.get_mut("r.0").unwrap().clear();
        let r = query(&h, &forced, "q", &[3.0, 1.0], 10).unwrap();
        assert!(r.fallback);
        assert_eq!(r.searched_node, "r");
        assert_eq!(r.distances_computed, 4);
    }

    #[test]
    fn ranking_ties_by_sample_id() {
        let entries: Vec<GalleryEntry> = ["b", "a", "c"]
            .iter()
            .map(|id| GalleryEntry {
                sample_id: id.to_string(),
                identity_id: "p".into(),
                camera_id: "c".into(),
                embedding: vec![1.0, 0.0],
            })
            .collect();
        let m = rank(&[0.0, 0.0], &entries, 2);
        assert_eq!(m.iter().map(|m| m.sample_id.as_str()).collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn flat_query_matches_brute_force() {
        let net = identity_net(0);
        let points = [[0.0, 0.0], [3.0, 4.0], [1.0, 1.0], [6.0, 8.0], [0.0, 2.0]];
        let entries: Vec<GalleryEntry> = points
            .iter()
            .enumerate()
            .map(|(i, p)| GalleryEntry {
                sample_id: format!("g{i}"),
                identity_id: format!("p{i}"),
                camera_id: "c".into(),
                embedding: p.to_vec(),
            })
            .collect();
        let r = flat_query(&net, &entries, "q", &[0.0, 0.0], 5).unwrap();
        // hand distances: 0, 5, sqrt2, 10, 2
        let ids: Vec<&str> = r.matches.iter().map(|m| m.sample_id.as_str()).collect();
        assert_eq!(ids, vec!["g0", "g2", "g4", "g1", "g3"]);
        assert!((r.matches[1].distance - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.distances_computed, 5);
        assert!(flat_query(&net, &entries, "q", &[0.0, 0.0], 0).is_err());
    }

    #[test]
    fn untrained_hierarchy_rejected() {
        let mut h = depth_two();
        h.trained = false;
        assert!(index_gallery(&h, &gallery(), AttributeSource::Predicted).is_err());
    }
}
