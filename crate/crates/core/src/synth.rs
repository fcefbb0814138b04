//! Synthetic re-identification datasets with tunable attribute difficulty
//! and attribute correlation.
//!
//! Attribute `i` owns feature axis `i`. Its values sit `separation` apart
//! along that axis, centred on zero. Each identity adds a jitter vector with
//! per-axis standard deviation `0.5 * noise_sigma`, and each image adds
//! isotropic noise of scale `noise_sigma` on top of the identity centre.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Attribute, AttributeSchema, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::seed;

pub const IDENTITY_JITTER_RATIO: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthAttribute {
    pub name: String,
    pub values: Vec<String>,
    /// Distance between adjacent value centres, in feature units.
    pub separation: f64,
    /// Probability of copying the previous attribute's value (modulo this
    /// attribute's value count) instead of drawing uniformly.
    #[serde(default)]
    pub correlation_with_previous: Option<f64>,
}

impl SynthAttribute {
    pub fn binary(name: &str, values: [&str; 2], separation: f64, correlation: Option<f64>) -> Self {
        SynthAttribute {
            name: name.to_string(),
            values: values.iter().map(|v| v.to_string()).collect(),
            separation,
            correlation_with_previous: correlation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub feature_dim: usize,
    pub n_cameras: usize,
    pub noise_sigma: f64,
    pub train_fraction: f64,
    pub gallery_fraction: f64,
    pub query_fraction: f64,
    pub attributes: Vec<SynthAttribute>,
}

impl Default for SynthConfig {
    /// 100 identities, 50 images each: 2000 gallery, 500 query and 2500
    /// training images over six binary attributes.
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_identities: 100,
            images_per_identity: 50,
            feature_dim: 64,
            n_cameras: 6,
            noise_sigma: 1.0,
            train_fraction: 0.5,
            gallery_fraction: 0.4,
            query_fraction: 0.1,
            attributes: vec![
                SynthAttribute::binary("gender", ["male", "female"], 8.0, None),
                SynthAttribute::binary("dress", ["no", "yes"], 6.0, Some(1.0)),
                SynthAttribute::binary("pants", ["long", "short"], 7.0, None),
                SynthAttribute::binary("hat", ["no", "yes"], 6.5, None),
                SynthAttribute::binary("backpack", ["no", "yes"], 6.0, None),
                SynthAttribute::binary("bag", ["no", "yes"], 1.0, None),
            ],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_identities == 0 || self.images_per_identity == 0 {
            return bad("n_identities and images_per_identity must be positive".into());
        }
        if self.n_cameras == 0 {
            return bad("n_cameras must be positive".into());
        }
        if self.feature_dim < self.attributes.len().max(1) {
            return bad(format!(
                "feature_dim {} too small for {} attributes (one dedicated axis each)",
                self.feature_dim,
                self.attributes.len()
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return bad("noise_sigma must be positive".into());
        }
        let fractions = [self.train_fraction, self.gallery_fraction, self.query_fraction];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("split fractions must lie in [0, 1]".into());
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions sum to {sum}, expected 1"));
        }
        if self.query_fraction > 0.0 && self.gallery_fraction == 0.0 {
            return bad("queries need a gallery: gallery_fraction is 0".into());
        }
        for (i, a) in self.attributes.iter().enumerate() {
            if !(a.separation.is_finite() && a.separation >= 0.0) {
                return bad(format!("attribute {:?}: separation must be >= 0", a.name));
            }
            match a.correlation_with_previous {
                Some(_) if i == 0 => {
                    return bad(format!(
                        "attribute {:?} is first and cannot correlate with a previous one",
                        a.name
                    ))
                }
                Some(c) if !(0.0..=1.0).contains(&c) => {
                    return bad(format!("attribute {:?}: correlation outside [0, 1]", a.name))
                }
                _ => {}
            }
        }
        self.schema().map(|_| ())
    }

    pub fn schema(&self) -> Result<AttributeSchema> {
        AttributeSchema::new(
            self.attributes
                .iter()
                .map(|a| Attribute {
                    name: a.name.clone(),
                    values: a.values.clone(),
                })
                .collect(),
        )
        .map_err(|e| Error::Config(e.to_string()))
    }

    /// Per-identity image counts for (train, query, gallery).
    fn split_counts(&self) -> (usize, usize, usize) {
        let n = self.images_per_identity;
        let train = ((self.train_fraction * n as f64).round() as usize).min(n);
        let mut query = ((self.query_fraction * n as f64).round() as usize).min(n - train);
        let mut gallery = n - train - query;
        if query > 0 && gallery == 0 {
            query -= 1;
            gallery += 1;
        }
        (train, query, gallery)
    }
}

pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let schema = config.schema()?;
    let mut rng = seed::rng_for(config.seed, "synth");
    let dim = config.feature_dim;
    let noise = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
    let jitter = Normal::new(0.0, IDENTITY_JITTER_RATIO * config.noise_sigma).expect("validated sigma");
    let (n_train, n_query, _) = config.split_counts();

    let mut samples = Vec::with_capacity(config.n_identities * config.images_per_identity);
    for identity in 0..config.n_identities {
        let mut values: Vec<usize> = Vec::with_capacity(config.attributes.len());
        for attr in &config.attributes {
            let k = attr.values.len();
            let copied = match (attr.correlation_with_previous, values.last()) {
                (Some(c), Some(&prev)) if rng.random::<f64>() < c => Some(prev % k),
                _ => None,
            };
            values.push(copied.unwrap_or_else(|| rng.random_range(0..k)));
        }

        let mut center: Vec<f64> = (0..dim).map(|_| jitter.sample(&mut rng)).collect();
        for (axis, (attr, &v)) in config.attributes.iter().zip(&values).enumerate() {
            let k = attr.values.len() as f64;
            center[axis] += (v as f64 - (k - 1.0) / 2.0) * attr.separation;
        }

        let mut order: Vec<usize> = (0..config.images_per_identity).collect();
        order.shuffle(&mut rng);
        let mut splits = vec![Split::Gallery; config.images_per_identity];
        for &i in &order[..n_train] {
            splits[i] = Split::Train;
        }
        for &i in &order[n_train..n_train + n_query] {
            splits[i] = Split::Query;
        }

        for (image, split) in splits.into_iter().enumerate() {
            let features = center
                .iter()
                .map(|c| (c + noise.sample(&mut rng)) as f32)
                .collect();
            let camera = rng.random_range(0..config.n_cameras);
            samples.push(Sample {
                sample_id: format!("s{:06}", identity * config.images_per_identity + image),
                identity_id: format!("id{identity:04}"),
                camera_id: format!("c{camera}"),
                split,
                attributes: values.iter().map(|&v| Some(v)).collect(),
                features,
            });
        }
    }
    Dataset::new(schema, dim, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_identities: 20,
            images_per_identity: 8,
            feature_dim: 8,
            train_fraction: 0.5,
            gallery_fraction: 0.375,
            query_fraction: 0.125,
            attributes: vec![
                SynthAttribute::binary("a", ["x", "y"], 3.0, None),
                SynthAttribute::binary("b", ["x", "y"], 1.0, Some(1.0)),
            ],
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let mut other = small();
        other.seed = 1;
        assert_ne!(a, generate(&other).unwrap());
    }

    #[test]
    fn default_split_sizes() {
        let ds = generate(&SynthConfig::default()).unwrap();
        assert_eq!(ds.split(Split::Gallery).len(), 2000);
        assert_eq!(ds.split(Split::Query).len(), 500);
        assert_eq!(ds.split(Split::Train).len(), 2500);
    }

    #[test]
    fn every_query_identity_has_gallery() {
        let mut cfg = small();
        cfg.images_per_identity = 2;
        cfg.train_fraction = 0.0;
        cfg.gallery_fraction = 0.0001;
        cfg.query_fraction = 0.9999;
        let ds = generate(&cfg).unwrap();
        let gallery: std::collections::HashSet<_> = ds
            .split(Split::Gallery)
            .samples
            .into_iter()
            .map(|s| s.identity_id)
            .collect();
        for q in ds.split(Split::Query).samples {
            assert!(gallery.contains(&q.identity_id));
        }
    }

    #[test]
    fn full_correlation_copies_value() {
        let ds = generate(&small()).unwrap();
        for s in ds.split(Split::Train).samples {
            assert_eq!(s.attributes[0], s.attributes[1]);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = small();
        cfg.train_fraction = 0.6;
        assert!(generate(&cfg).is_err());
        let mut cfg = small();
        cfg.feature_dim = 1;
        assert!(generate(&cfg).is_err());
        let mut cfg = small();
        cfg.attributes[0].correlation_with_previous = Some(0.5);
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn identity_shares_attributes() {
        let ds = generate(&small()).unwrap();
        let mut by_id = std::collections::HashMap::new();
        for s in &ds.samples {
            let prev = by_id.insert(s.identity_id.clone(), s.attributes.clone());
            if let Some(prev) = prev {
                assert_eq!(prev, s.attributes);
            }
        }
    }
}
