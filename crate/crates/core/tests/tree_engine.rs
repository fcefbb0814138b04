use std::collections::HashSet;
use std::sync::OnceLock;

use proptest::prelude::*;

use hreid::data::{filter_by_conditions, Dataset, Split};
use hreid::engine::{index_gallery, query, route, AttributeSource, GalleryIndex};
use hreid::eval::worst_case_cost;
use hreid::nn::{cost_of, train_classifier_head, HeadConfig, Network, NetworkSpec};
use hreid::pipeline::{load_data, train_model, DataSource, ModelKind, RunConfig};
use hreid::synth::{generate, SynthAttribute, SynthConfig};
use hreid::tree::{build_structure, rank_attribute_difficulty, BuildConfig, Hierarchy, HierarchyNode, ProbeConfig};

fn small_config(seed: u64) -> RunConfig {
    let mut cfg: RunConfig = serde_json::from_str(
        r#"{
          "data": {"synth": {"n_identities": 24, "images_per_identity": 20}},
          "build": {"min_node_samples": 20, "max_depth": 3},
          "triplet": {"max_epochs": 6},
          "head": {"epochs": 10}
        }"#,
    )
    .unwrap();
    cfg.seed = seed;
    cfg
}

struct Fixture {
    data: Dataset,
    tree: Hierarchy,
    index: GalleryIndex,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = small_config(5);
        let data = load_data(&cfg).unwrap();
        let tree = train_model(&cfg, &data, ModelKind::Hierarchical).unwrap().hierarchy;
        let index = index_gallery(&tree, &data.split(Split::Gallery), AttributeSource::Predicted).unwrap();
        Fixture { data, tree, index }
    })
}

/// Leaf reached by following labelled values from the root.
fn label_leaf<'a>(tree: &'a Hierarchy, labels: &[Option<usize>]) -> &'a HierarchyNode {
    let mut node = &tree.root;
    while let Some(attr) = &node.attribute {
        let v = labels[tree.schema.index_of(attr).unwrap()].expect("training samples are labelled");
        node = &node.children[v];
    }
    node
}

fn check_well_formed(train: &Dataset, tree: &Hierarchy) {
    tree.validate().unwrap();
    let leaves = tree.leaves();
    let mut claimed = HashSet::new();
    for leaf in &leaves {
        let attrs: HashSet<&str> = leaf.conditions.iter().map(|c| c.attribute.as_str()).collect();
        assert_eq!(attrs.len(), leaf.conditions.len(), "attribute repeated on {}", leaf.node_id);
        for s in filter_by_conditions(train, &leaf.conditions).unwrap().samples {
            assert!(claimed.insert(s.sample_id.clone()), "{} in two leaves", s.sample_id);
        }
    }
    assert_eq!(claimed.len(), train.len());
    for s in &train.samples {
        let leaf = label_leaf(tree, &s.attributes);
        assert!(leaf.is_leaf());
        assert!(filter_by_conditions(train, &leaf.conditions)
            .unwrap()
            .samples
            .iter()
            .any(|t| t.sample_id == s.sample_id));
    }
    for node in tree.nodes() {
        let parent: HashSet<String> = filter_by_conditions(train, &node.conditions)
            .unwrap()
            .samples
            .into_iter()
            .map(|s| s.sample_id)
            .collect();
        assert_eq!(parent.len(), node.train_subset_size);
        for child in &node.children {
            let sub = filter_by_conditions(train, &child.conditions).unwrap();
            assert!(sub.samples.iter().all(|s| parent.contains(&s.sample_id)));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn built_trees_are_well_formed(seed in 0u64..1000, corr in 0.0f64..=1.0, min_samples in 10usize..80) {
        let mut synth = SynthConfig {
            seed,
            n_identities: 30,
            images_per_identity: 16,
            ..SynthConfig::default()
        };
        synth.attributes[1].correlation_with_previous = Some(corr);
        let train = generate(&synth).unwrap().split(Split::Train);
        let build = BuildConfig {
            seed,
            min_node_samples: min_samples,
            probe: ProbeConfig { epochs: 20, seed, ..ProbeConfig::default() },
            ..BuildConfig::default()
        };
        let (tree, _) = build_structure(&train, &build).unwrap();
        prop_assert!(tree.leaves().iter().all(|l| l.depth() <= build.max_depth));
        check_well_formed(&train, &tree);
    }
}

#[test]
fn trained_tree_is_well_formed() {
    let f = fixture();
    check_well_formed(&f.data.split(Split::Train), &f.tree);
}

fn feature_vector() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-12.0f32..12.0, 64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn routing_is_deterministic_and_costed_exactly(x in feature_vector()) {
        let f = fixture();
        let a = route(&f.tree, &x).unwrap();
        let b = route(&f.tree, &x).unwrap();
        prop_assert_eq!(&a, &b);
        let expected: u64 = a
            .node_ids
            .iter()
            .map(|id| f.tree.node(id).unwrap().network.as_ref().map_or(0, |n| n.cost().flops))
            .sum();
        prop_assert_eq!(a.flops_spent, expected);
        prop_assert!(f.tree.node(a.leaf_id()).unwrap().is_leaf());
    }

    #[test]
    fn partitioned_search_is_bounded(x in feature_vector()) {
        let f = fixture();
        let r = query(&f.tree, &f.index, "q", &x, 5).unwrap();
        prop_assert!(r.distances_computed <= f.index.len());
        if r.distances_computed == f.index.len() && f.tree.leaves().len() > 1 {
            prop_assert!(r.fallback && r.searched_node == f.tree.root.node_id);
        }
        prop_assert!(r.matches.windows(2).all(|w| (w[0].distance, &w[0].sample_id) <= (w[1].distance, &w[1].sample_id)));
    }

    #[test]
    fn duplicates_are_never_partitioned_away(i in 0usize..400) {
        let f = fixture();
        let gallery = f.data.split(Split::Gallery);
        let g = &gallery.samples[i % gallery.len()];
        let r = query(&f.tree, &f.index, "dup", &g.features, 1).unwrap();
        prop_assert_eq!(&r.matches[0].sample_id, &g.sample_id);
        prop_assert_eq!(r.matches[0].distance, 0.0);
    }

    #[test]
    fn worst_case_cost_grows_with_paths(leaf_pick in 0usize..64, width in 1usize..64, layers in 1usize..4) {
        let f = fixture();
        let before = worst_case_cost(&f.tree);
        let mut grown = f.tree.clone();
        let mut leaf_ids: Vec<String> = grown.leaves().iter().map(|l| l.node_id.clone()).collect();
        leaf_ids.sort();
        let target = leaf_ids[leaf_pick % leaf_ids.len()].clone();
        fn find<'a>(n: &'a mut HierarchyNode, id: &str) -> Option<&'a mut HierarchyNode> {
            if n.node_id == id {
                return Some(n);
            }
            n.children.iter_mut().find_map(|c| find(c, id))
        }
        let leaf = find(&mut grown.root, &target).unwrap();
        let mut child = leaf.clone();
        child.node_id = format!("{target}.0");
        child.network = None;
        child.pass_through = false;
        child.spec = Some(NetworkSpec::new(64, vec![width; layers], 8, 0));
        leaf.children.push(child);
        let after = worst_case_cost(&grown);
        prop_assert!(after.flops >= before.flops);
        prop_assert!(after.param_bytes >= before.param_bytes);
        prop_assert!(cost_of(&NetworkSpec::new(64, vec![width; layers], 8, 0)).flops > 0);
    }
}

#[test]
fn head_training_leaves_body_untouched() {
    let f = fixture();
    let train = f.data.split(Split::Train);
    let x = hreid::nn::rows_to_array(&train.samples.iter().map(|s| s.features.clone()).collect::<Vec<_>>(), 64);
    let labels: Vec<usize> = train.samples.iter().map(|s| s.attributes[0].unwrap()).collect();
    let mut net = Network::new(NetworkSpec::new(64, vec![16], 8, 2), 3).unwrap();
    let body = net.body_fingerprint();
    let cfg = HeadConfig {
        epochs: 5,
        ..HeadConfig::default()
    };
    train_classifier_head(&mut net, x.view(), &labels, 2, &cfg).unwrap();
    assert_eq!(net.body_fingerprint(), body);
    assert_ne!(net.fingerprint(), Network::new(NetworkSpec::new(64, vec![16], 8, 2), 3).unwrap().fingerprint());
}

fn probe_error(train: &Dataset, attribute: &str, seed: u64) -> f64 {
    let rank = rank_attribute_difficulty(
        train,
        &ProbeConfig {
            seed,
            ..ProbeConfig::default()
        },
    )
    .unwrap();
    rank.entries.iter().find(|e| e.attribute == attribute).unwrap().validation_error
}

fn two_attribute_synth(seed: u64, first: f64, second: f64, corr: Option<f64>) -> SynthConfig {
    SynthConfig {
        seed,
        n_identities: 60,
        images_per_identity: 20,
        attributes: vec![
            SynthAttribute::binary("gender", ["male", "female"], first, None),
            SynthAttribute::binary("dress", ["no", "yes"], second, corr),
        ],
        ..SynthConfig::default()
    }
}

#[test]
fn larger_separation_is_easier() {
    for (lo, hi) in [(0.5, 1.5), (1.5, 3.0)] {
        let mut err = [0.0; 2];
        for seed in 0..5 {
            for (slot, sep) in [lo, hi].into_iter().enumerate() {
                let train = generate(&two_attribute_synth(seed, sep, 4.0, None)).unwrap().split(Split::Train);
                err[slot] += probe_error(&train, "gender", seed) / 5.0;
            }
        }
        assert!(err[1] <= err[0], "separation {hi} error {} > separation {lo} error {}", err[1], err[0]);
    }
}

#[test]
fn conditioning_on_a_correlated_ancestor_does_not_hurt() {
    let (mut full, mut conditioned) = (0.0, 0.0);
    for seed in 0..5 {
        let train = generate(&two_attribute_synth(seed, 5.0, 1.0, Some(0.6))).unwrap().split(Split::Train);
        full += probe_error(&train, "dress", seed) / 5.0;
        let female = filter_by_conditions(&train, &[hreid::data::Condition::new("gender", 1)]).unwrap();
        conditioned += probe_error(&female, "dress", seed) / 5.0;
    }
    assert!(conditioned <= full + 0.05, "conditioned {conditioned} vs full {full}");
}

#[test]
fn same_config_same_model() {
    let cfg = small_config(11);
    let data = load_data(&cfg).unwrap();
    let a = train_model(&cfg, &data, ModelKind::RandomTree(2)).unwrap();
    let b = train_model(&cfg, &data, ModelKind::RandomTree(2)).unwrap();
    assert_eq!(a.hierarchy, b.hierarchy);
    assert!(matches!(cfg.data, DataSource::Synth(_)));
}
