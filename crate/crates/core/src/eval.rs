//! Retrieval metrics, worst-case cost accounting and method comparison.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::QueryResult;
use crate::error::{Error, Result};
use crate::nn::{cost_of, CostModel};
use crate::tree::{Hierarchy, HierarchyNode};

#[derive(Debug, Clone, PartialEq, Eq)]
struct Truth {
    identity: String,
    camera: String,
}

/// Identity and camera of every query, plus relevant-item counts over the
/// whole gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    queries: HashMap<String, Truth>,
    gallery: HashMap<(String, String), usize>,
    gallery_by_identity: HashMap<String, usize>,
}

impl GroundTruth {
    pub fn new(gallery: &Dataset, queries: &Dataset) -> Self {
        let mut gt = GroundTruth {
            queries: HashMap::new(),
            gallery: HashMap::new(),
            gallery_by_identity: HashMap::new(),
        };
        for s in &gallery.samples {
            *gt.gallery.entry((s.identity_id.clone(), s.camera_id.clone())).or_default() += 1;
            *gt.gallery_by_identity.entry(s.identity_id.clone()).or_default() += 1;
        }
        for s in &queries.samples {
            gt.queries.insert(
                s.sample_id.clone(),
                Truth {
                    identity: s.identity_id.clone(),
                    camera: s.camera_id.clone(),
                },
            );
        }
        gt
    }

    /// Gallery items sharing the query's identity, anywhere in the gallery.
    pub fn relevant_count(&self, query_id: &str, same_camera_exclusion: bool) -> usize {
        let Some(t) = self.queries.get(query_id) else { return 0 };
        let all = self.gallery_by_identity.get(&t.identity).copied().unwrap_or(0);
        if same_camera_exclusion {
            all - self.gallery.get(&(t.identity.clone(), t.camera.clone())).copied().unwrap_or(0)
        } else {
            all
        }
    }

    /// Ranked identity hits for one result, after the optional removal of
    /// same-identity same-camera gallery items.
    fn hits(&self, result: &QueryResult, same_camera_exclusion: bool) -> Vec<bool> {
        let Some(t) = self.queries.get(&result.query_id) else {
            log::warn!("query {} has no ground truth", result.query_id);
            return Vec::new();
        };
        result
            .matches
            .iter()
            .filter(|m| !(same_camera_exclusion && m.identity_id == t.identity && m.camera_id == t.camera))
            .map(|m| m.identity_id == t.identity)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalOptions {
    pub same_camera_exclusion: bool,
}

pub fn rank1(results: &[QueryResult], gt: &GroundTruth, options: EvalOptions) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let correct = results
        .iter()
        .filter(|r| {
            let hits = gt.hits(r, options.same_camera_exclusion);
            if hits.is_empty() {
                log::warn!("query {} returned no matches; counted as a miss", r.query_id);
            }
            hits.first().copied().unwrap_or(false)
        })
        .count();
    correct as f64 / results.len() as f64
}

/// Precision at each hit, summed and divided by `n_relevant`. Relevant items
/// missing from `hits` therefore count as misses.
pub fn average_precision(hits: &[bool], n_relevant: usize) -> f64 {
    if n_relevant == 0 {
        return 0.0;
    }
    let mut found = 0usize;
    let mut sum = 0.0;
    for (i, &hit) in hits.iter().enumerate() {
        if hit {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    sum / n_relevant as f64
}

/// Mean AP over queries with at least one relevant gallery item. The
/// denominator counts every relevant item in the gallery, including those
/// cut off by routing.
pub fn mean_average_precision(results: &[QueryResult], gt: &GroundTruth, options: EvalOptions) -> f64 {
    let mut total = 0.0;
    let mut counted = 0usize;
    for r in results {
        let n_rel = gt.relevant_count(&r.query_id, options.same_camera_exclusion);
        if n_rel == 0 {
            log::warn!("query {} has no relevant gallery item; left out of mAP", r.query_id);
            continue;
        }
        total += average_precision(&gt.hits(r, options.same_camera_exclusion), n_rel);
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rank1: f64,
    pub map_score: f64,
    pub mean_distances_per_query: f64,
    pub mean_flops_per_query: f64,
}

pub fn evaluate(results: &[QueryResult], gt: &GroundTruth, options: EvalOptions) -> Metrics {
    let n = results.len().max(1) as f64;
    Metrics {
        rank1: rank1(results, gt, options),
        map_score: mean_average_precision(results, gt, options),
        mean_distances_per_query: results.iter().map(|r| r.distances_computed as f64).sum::<f64>() / n,
        mean_flops_per_query: results.iter().map(|r| r.route.flops_spent as f64).sum::<f64>() / n,
    }
}

fn node_cost(node: &HierarchyNode) -> CostModel {
    if node.pass_through {
        return CostModel::default();
    }
    match (&node.network, &node.spec) {
        (Some(net), _) => net.cost(),
        (None, Some(spec)) => cost_of(spec),
        (None, None) => CostModel::default(),
    }
}

/// Largest root-to-leaf path sums, maximised separately for FLOPs and bytes.
pub fn worst_case_cost(hierarchy: &Hierarchy) -> CostModel {
    fn walk(node: &HierarchyNode) -> CostModel {
        let own = node_cost(node);
        let below = node.children.iter().map(walk).fold(CostModel::default(), |acc, c| CostModel {
            flops: acc.flops.max(c.flops),
            param_bytes: acc.param_bytes.max(c.param_bytes),
        });
        CostModel {
            flops: own.flops + below.flops,
            param_bytes: own.param_bytes + below.param_bytes,
        }
    }
    walk(&hierarchy.root)
}

/// Stable fingerprint of the gallery and query membership.
pub fn split_signature(gallery: &Dataset, queries: &Dataset) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in [gallery, queries] {
        for s in &part.samples {
            for b in s.sample_id.bytes().chain([0u8]) {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Hierarchical,
    Flat,
    RandomTree,
}

/// One evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub kind: MethodKind,
    pub attribute_source: String,
    pub split_signature: u64,
    pub cost: CostModel,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reductions {
    pub model_bytes: f64,
    pub worst_case_flops: f64,
    pub mean_distances: f64,
    pub mean_flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub attribute_source: String,
    pub model_bytes: f64,
    pub worst_case_flops: f64,
    pub metrics: Metrics,
    pub reduction_vs_flat: Option<Reductions>,
    /// Per-seed rows behind an averaged random-tree row.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub seeds: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub rows: Vec<ReportRow>,
    pub notes: Vec<String>,
}

/// `1 - value / baseline`.
pub fn reduction(value: f64, baseline: f64) -> f64 {
    if baseline == 0.0 {
        0.0
    } else {
        1.0 - value / baseline
    }
}

fn row_of(r: &MethodResult) -> ReportRow {
    ReportRow {
        method: r.method.clone(),
        attribute_source: r.attribute_source.clone(),
        model_bytes: r.cost.param_bytes as f64,
        worst_case_flops: r.cost.flops as f64,
        metrics: r.metrics,
        reduction_vs_flat: None,
        seeds: Vec::new(),
    }
}

fn mean_row(method: &str, source: &str, rows: Vec<ReportRow>) -> ReportRow {
    let n = rows.len() as f64;
    let avg = |f: &dyn Fn(&ReportRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    ReportRow {
        method: method.to_string(),
        attribute_source: source.to_string(),
        model_bytes: avg(&|r| r.model_bytes),
        worst_case_flops: avg(&|r| r.worst_case_flops),
        metrics: Metrics {
            rank1: avg(&|r| r.metrics.rank1),
            map_score: avg(&|r| r.metrics.map_score),
            mean_distances_per_query: avg(&|r| r.metrics.mean_distances_per_query),
            mean_flops_per_query: avg(&|r| r.metrics.mean_flops_per_query),
        },
        reduction_vs_flat: None,
        seeds: rows,
    }
}

fn with_reduction(mut row: ReportRow, flat: Option<&ReportRow>) -> ReportRow {
    row.reduction_vs_flat = flat.map(|f| Reductions {
        model_bytes: reduction(row.model_bytes, f.model_bytes),
        worst_case_flops: reduction(row.worst_case_flops, f.worst_case_flops),
        mean_distances: reduction(row.metrics.mean_distances_per_query, f.metrics.mean_distances_per_query),
        mean_flops: reduction(row.metrics.mean_flops_per_query, f.metrics.mean_flops_per_query),
    });
    row.seeds = row.seeds.into_iter().map(|s| with_reduction(s, flat)).collect();
    row
}

/// One row per method and attribute source. Random trees collapse into a
/// mean row per source that carries the individual seeds.
pub fn compare(results: &[MethodResult]) -> Result<CostReport> {
    if let Some(first) = results.first() {
        if let Some(bad) = results.iter().find(|r| r.split_signature != first.split_signature) {
            return Err(Error::Invalid(format!(
                "method {} was evaluated on different gallery/query splits than {}",
                bad.method, first.method
            )));
        }
    }
    let flat = results.iter().find(|r| r.kind == MethodKind::Flat).map(row_of);

    let mut rows: Vec<ReportRow> = Vec::new();
    let mut random: Vec<(String, Vec<ReportRow>)> = Vec::new();
    for r in results {
        match r.kind {
            MethodKind::RandomTree => match random.iter_mut().find(|(src, _)| *src == r.attribute_source) {
                Some((_, group)) => group.push(row_of(r)),
                None => random.push((r.attribute_source.clone(), vec![row_of(r)])),
            },
            _ => rows.push(row_of(r)),
        }
    }
    for (source, group) in random {
        rows.push(mean_row("random_tree", &source, group));
    }
    let rows = rows.into_iter().map(|r| with_reduction(r, flat.as_ref())).collect();
    Ok(CostReport {
        rows,
        notes: vec![
            "reduction_vs_flat_* = 1 - method / flat".to_string(),
            "mAP counts relevant gallery items outside the searched partition as misses".to_string(),
            "model_bytes and worst_case_flops are maxima over root-to-leaf paths".to_string(),
        ],
    })
}

const CSV_HEADER: [&str; 12] = [
    "method",
    "model_bytes",
    "worst_case_flops",
    "rank1",
    "map",
    "mean_distances",
    "mean_flops",
    "reduction_vs_flat_model_bytes",
    "reduction_vs_flat_worst_case_flops",
    "reduction_vs_flat_mean_distances",
    "reduction_vs_flat_mean_flops",
    "attribute_source",
];

impl CostReport {
    /// Flattened rows: each averaged row followed by its seeds.
    pub fn all_rows(&self) -> Vec<&ReportRow> {
        self.rows
            .iter()
            .flat_map(|r| std::iter::once(r).chain(r.seeds.iter()))
            .collect()
    }

    pub fn row(&self, method: &str, source: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.attribute_source == source)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for r in self.all_rows() {
            let red = |f: fn(&Reductions) -> f64| r.reduction_vs_flat.as_ref().map(|x| format!("{:.6}", f(x))).unwrap_or_default();
            w.write_record([
                r.method.clone(),
                format!("{}", r.model_bytes),
                format!("{}", r.worst_case_flops),
                format!("{:.6}", r.metrics.rank1),
                format!("{:.6}", r.metrics.map_score),
                format!("{:.3}", r.metrics.mean_distances_per_query),
                format!("{:.1}", r.metrics.mean_flops_per_query),
                red(|x| x.model_bytes),
                red(|x| x.worst_case_flops),
                red(|x| x.mean_distances),
                red(|x| x.mean_flops),
                r.attribute_source.clone(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<22} {:<12} {:>12} {:>14} {:>7} {:>7} {:>10} {:>11} {:>9} {:>9}",
            "method", "source", "bytes", "flops", "rank1", "mAP", "dists/q", "flops/q", "-bytes", "-flops"
        );
        for r in self.all_rows() {
            let pct = |f: fn(&Reductions) -> f64| {
                r.reduction_vs_flat
                    .as_ref()
                    .map(|x| format!("{:.1}%", 100.0 * f(x)))
                    .unwrap_or_else(|| "-".into())
            };
            let _ = writeln!(
                s,
                "{:<22} {:<12} {:>12.0} {:>14.0} {:>7.4} {:>7.4} {:>10.1} {:>11.0} {:>9} {:>9}",
                r.method,
                r.attribute_source,
                r.model_bytes,
                r.worst_case_flops,
                r.metrics.rank1,
                r.metrics.map_score,
                r.metrics.mean_distances_per_query,
                r.metrics.mean_flops_per_query,
                pct(|x| x.model_bytes),
                pct(|x| x.worst_case_flops),
            );
        }
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }

    /// Writes `report.csv`, `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("report.csv", self.to_csv()?)?;
        put("report.json", serde_json::to_string_pretty(self)? + "\n")?;
        put("report.txt", self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Attribute, AttributeSchema, Sample, Split};
    use crate::engine::{Match, RouteTrace};

    fn result(query: &str, ranked: &[(&str, &str)]) -> QueryResult {
        QueryResult {
            query_id: query.into(),
            matches: ranked
                .iter()
                .enumerate()
                .map(|(i, (id, identity))| Match {
                    sample_id: id.to_string(),
                    identity_id: identity.to_string(),
                    camera_id: "c1".into(),
                    distance: i as f64,
                })
                .collect(),
            distances_computed: ranked.len(),
            searched_node: "r".into(),
            fallback: false,
            route: RouteTrace {
                node_ids: vec!["r".into()],
                decisions: vec![],
                leaf_embedding: vec![],
                node_embeddings: vec![],
                flops_spent: 10,
            },
        }
    }

    fn ds(rows: &[(&str, &str, Split)]) -> Dataset {
        let schema = AttributeSchema::new(vec![Attribute::new("a", &["x", "y"])]).unwrap();
        let samples = rows
            .iter()
            .map(|(id, identity, split)| Sample {
                sample_id: id.to_string(),
                identity_id: identity.to_string(),
                camera_id: if *split == Split::Query { "c0" } else { "c1" }.into(),
                split: *split,
                attributes: vec![Some(0)],
                features: vec![0.0],
            })
            .collect();
        Dataset::new(schema, 1, samples).unwrap()
    }

    #[test]
    fn ap_hand_example() {
        let ap = average_precision(&[true, false, true], 2);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&[true, true, false], 2), 1.0);
        assert_eq!(average_precision(&[false, false], 1), 0.0);
    }

    #[test]
    fn rank1_three_of_four() {
        let gallery = ds(&[("g0", "a", Split::Gallery), ("g1", "b", Split::Gallery), ("g2", "c", Split::Gallery)]);
        let queries = ds(&[
            ("q0", "a", Split::Query),
            ("q1", "b", Split::Query),
            ("q2", "c", Split::Query),
            ("q3", "a", Split::Query),
        ]);
        let gt = GroundTruth::new(&gallery, &queries);
        let results = vec![
            result("q0", &[("g0", "a"), ("g1", "b")]),
            result("q1", &[("g1", "b")]),
            result("q2", &[("g2", "c")]),
            result("q3", &[("g1", "b"), ("g0", "a")]),
        ];
        assert_eq!(rank1(&results, &gt, EvalOptions::default()), 0.75);
    }

    #[test]
    fn excluded_relevant_item_zeroes_ap() {
        let gallery = ds(&[("g0", "a", Split::Gallery), ("g1", "b", Split::Gallery)]);
        let queries = ds(&[("q0", "a", Split::Query)]);
        let gt = GroundTruth::new(&gallery, &queries);
        let results = vec![result("q0", &[("g1", "b")])];
        assert_eq!(mean_average_precision(&results, &gt, EvalOptions::default()), 0.0);
        assert_eq!(rank1(&results, &gt, EvalOptions::default()), 0.0);
    }

    #[test]
    fn same_camera_items_dropped() {
        let gallery = ds(&[("g0", "a", Split::Gallery), ("g1", "a", Split::Gallery)]);
        let queries = ds(&[("q0", "a", Split::Query)]);
        let gt = GroundTruth::new(&gallery, &queries);
        // camera c1 differs from the query's c0, so nothing is dropped
        let opts = EvalOptions {
            same_camera_exclusion: true,
        };
        assert_eq!(gt.relevant_count("q0", true), 2);
        let results = vec![result("q0", &[("g0", "a"), ("g1", "a")])];
        assert_eq!(mean_average_precision(&results, &gt, opts), 1.0);
    }

    #[test]
    fn reduction_convention() {
        assert!((reduction(14.0, 528.0) - 0.973).abs() < 5e-4);
        assert!((reduction(14.0, 77.0) - 0.818).abs() < 5e-4);
        assert_eq!(reduction(5.0, 5.0), 0.0);
    }

    fn method(name: &str, kind: MethodKind, flops: u64, sig: u64) -> MethodResult {
        MethodResult {
            method: name.into(),
            kind,
            attribute_source: "predicted".into(),
            split_signature: sig,
            cost: CostModel {
                flops,
                param_bytes: flops * 2,
            },
            metrics: Metrics {
                rank1: 0.5,
                map_score: 0.4,
                mean_distances_per_query: flops as f64,
                mean_flops_per_query: flops as f64,
            },
        }
    }

    #[test]
    fn compare_averages_random_trees() {
        let report = compare(&[
            method("flat", MethodKind::Flat, 100, 1),
            method("hierarchical", MethodKind::Hierarchical, 25, 1),
            method("random_tree_seed_0", MethodKind::RandomTree, 40, 1),
            method("random_tree_seed_1", MethodKind::RandomTree, 60, 1),
        ])
        .unwrap();
        let rt = report.row("random_tree", "predicted").unwrap();
        assert_eq!(rt.worst_case_flops, 50.0);
        assert_eq!(rt.seeds.len(), 2);
        let h = report.row("hierarchical", "predicted").unwrap();
        assert_eq!(h.reduction_vs_flat.unwrap().worst_case_flops, 0.75);
        let f = report.row("flat", "predicted").unwrap();
        assert_eq!(f.reduction_vs_flat.unwrap().model_bytes, 0.0);
        let csv = report.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 1 + 5);
        assert!(csv.starts_with("method,model_bytes,worst_case_flops,rank1,map,mean_distances,mean_flops,reduction_vs_flat_"));
    }

    #[test]
    fn compare_rejects_mismatched_splits() {
        assert!(compare(&[method("flat", MethodKind::Flat, 1, 1), method("h", MethodKind::Hierarchical, 1, 2)]).is_err());
    }
}
