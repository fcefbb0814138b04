//! Dataset representation, on-disk formats and attribute subsetting.
//!
//! A dataset lives in three files:
//!
//! * `manifest.csv`: `sample_id,identity_id,camera_id,split,attr_<name>...`,
//!   one row per sample; attribute cells hold a value name or `?`.
//! * `schema.json`: `{"feature_dim": d, "attributes": [{"name", "values"}]}`.
//! * `features.bin`: magic `HREID1`, `u32` row count, `u32` dimension, then
//!   row-major little-endian `f32`. Row `i` belongs to manifest row `i`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 6] = b"HREID1";
pub const FEATURE_HEADER_BYTES: usize = 14;
pub const UNLABELED: &str = "?";

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SCHEMA_FILE: &str = "schema.json";
pub const FEATURES_FILE: &str = "features.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attribute {
    pub name: String,
    pub values: Vec<String>,
}

impl Attribute {
    pub fn new(name: &str, values: &[&str]) -> Self {
        Attribute {
            name: name.to_string(),
            values: values.iter().map(|v| v.to_string()).collect(),
        }
    }

    pub fn value_index(&self, value: &str) -> Option<usize> {
        self.values.iter().position(|v| v == value)
    }
}

/// Ordered set of categorical attributes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Attribute>", into = "Vec<Attribute>")]
pub struct AttributeSchema {
    attributes: Vec<Attribute>,
}

impl AttributeSchema {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        let mut names = HashSet::new();
        for attr in &attributes {
            if attr.name.is_empty() {
                return Err(Error::Invalid("attribute with empty name".into()));
            }
            if !names.insert(attr.name.as_str()) {
                return Err(Error::Invalid(format!(
                    "duplicate attribute name {:?}",
                    attr.name
                )));
            }
            if attr.values.len() < 2 {
                return Err(Error::Invalid(format!(
                    "attribute {:?} needs at least 2 values, has {}",
                    attr.name,
                    attr.values.len()
                )));
            }
            let mut seen = HashSet::new();
            for v in &attr.values {
                if v == UNLABELED || v.is_empty() {
                    return Err(Error::Invalid(format!(
                        "attribute {:?} has reserved value name {v:?}",
                        attr.name
                    )));
                }
                if !seen.insert(v.as_str()) {
                    return Err(Error::Invalid(format!(
                        "attribute {:?} repeats value {v:?}",
                        attr.name
                    )));
                }
            }
        }
        Ok(AttributeSchema { attributes })
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Attribute> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub(crate) fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::Invalid(format!("unknown attribute {name:?}")))
    }

    pub fn value_count(&self, index: usize) -> usize {
        self.attributes[index].values.len()
    }
}

impl TryFrom<Vec<Attribute>> for AttributeSchema {
    type Error = Error;

    fn try_from(value: Vec<Attribute>) -> Result<Self> {
        AttributeSchema::new(value)
    }
}

impl From<AttributeSchema> for Vec<Attribute> {
    fn from(value: AttributeSchema) -> Self {
        value.attributes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Gallery,
    Query,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Gallery => "gallery",
            Split::Query => "query",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "gallery" => Some(Split::Gallery),
            "query" => Some(Split::Query),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub identity_id: String,
    pub camera_id: String,
    pub split: Split,
    /// Value index per schema attribute, in schema order; `None` is unlabeled.
    pub attributes: Vec<Option<usize>>,
    pub features: Vec<f32>,
}

impl Sample {
    pub fn satisfies(&self, conditions: &[ResolvedCondition]) -> bool {
        conditions
            .iter()
            .all(|c| self.attributes[c.attribute] == Some(c.value))
    }
}

/// One edge of a root-to-node path: `attribute == value`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub attribute: String,
    pub value: usize,
}

impl Condition {
    pub fn new(attribute: impl Into<String>, value: usize) -> Self {
        Condition {
            attribute: attribute.into(),
            value,
        }
    }
}

/// A condition with its attribute name resolved to a schema index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedCondition {
    pub attribute: usize,
    pub value: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: AttributeSchema,
    pub feature_dim: usize,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Fail instead of warning when a query identity has no gallery image.
    pub strict_query_identities: bool,
}

impl Dataset {
    pub fn new(schema: AttributeSchema, feature_dim: usize, samples: Vec<Sample>) -> Result<Self> {
        let ds = Dataset {
            schema,
            feature_dim,
            samples,
        };
        ds.validate(LoadOptions::default())?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn resolve(&self, conditions: &[Condition]) -> Result<Vec<ResolvedCondition>> {
        resolve_conditions(&self.schema, conditions)
    }

    pub fn split(&self, split: Split) -> Dataset {
        self.subset(|s| s.split == split)
    }

    pub fn subset(&self, keep: impl Fn(&Sample) -> bool) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            feature_dim: self.feature_dim,
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }

    /// Distinct identities in first-appearance order.
    pub fn identities(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.samples
            .iter()
            .filter(|s| seen.insert(s.identity_id.as_str()))
            .map(|s| s.identity_id.as_str())
            .collect()
    }

    /// Dense identity labels (first-appearance order) for every sample.
    pub fn identity_labels(&self) -> Vec<u32> {
        let mut ids: HashMap<&str, u32> = HashMap::new();
        self.samples
            .iter()
            .map(|s| {
                let next = ids.len() as u32;
                *ids.entry(s.identity_id.as_str()).or_insert(next)
            })
            .collect()
    }

    pub fn validate(&self, options: LoadOptions) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Invalid("feature_dim must be positive".into()));
        }
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.sample_id.as_str()) {
                return Err(Error::Invalid(format!(
                    "duplicate sample_id {:?}",
                    s.sample_id
                )));
            }
            if s.features.len() != self.feature_dim {
                return Err(Error::Dimension {
                    expected: self.feature_dim,
                    got: s.features.len(),
                });
            }
            if s.attributes.len() != self.schema.len() {
                return Err(Error::Invalid(format!(
                    "sample {:?} has {} attribute slots, schema has {}",
                    s.sample_id,
                    s.attributes.len(),
                    self.schema.len()
                )));
            }
            for (i, v) in s.attributes.iter().enumerate() {
                match v {
                    Some(v) if *v >= self.schema.value_count(i) => {
                        return Err(Error::Invalid(format!(
                            "sample {:?}: value index {v} out of range for attribute {:?}",
                            s.sample_id,
                            self.schema.attributes()[i].name
                        )))
                    }
                    None if s.split == Split::Train => {
                        return Err(Error::Invalid(format!(
                            "training sample {:?} is missing attribute {:?}",
                            s.sample_id,
                            self.schema.attributes()[i].name
                        )))
                    }
                    _ => {}
                }
            }
        }
        let gallery: HashSet<&str> = self
            .samples
            .iter()
            .filter(|s| s.split == Split::Gallery)
            .map(|s| s.identity_id.as_str())
            .collect();
        let orphans: Vec<&str> = self
            .samples
            .iter()
            .filter(|s| s.split == Split::Query && !gallery.contains(s.identity_id.as_str()))
            .map(|s| s.sample_id.as_str())
            .collect();
        if !orphans.is_empty() {
            let msg = format!(
                "{} query samples have no gallery image of their identity (first: {:?})",
                orphans.len(),
                orphans[0]
            );
            if options.strict_query_identities {
                return Err(Error::Invalid(msg));
            }
            log::warn!("{msg}");
        }
        Ok(())
    }
}

pub fn resolve_conditions(
    schema: &AttributeSchema,
    conditions: &[Condition],
) -> Result<Vec<ResolvedCondition>> {
    conditions
        .iter()
        .map(|c| {
            let attribute = schema.require(&c.attribute)?;
            if c.value >= schema.value_count(attribute) {
                return Err(Error::Invalid(format!(
                    "condition {}={} out of range",
                    c.attribute, c.value
                )));
            }
            Ok(ResolvedCondition {
                attribute,
                value: c.value,
            })
        })
        .collect()
}

/// Samples satisfying every condition, in original order.
pub fn filter_by_conditions(dataset: &Dataset, conditions: &[Condition]) -> Result<Dataset> {
    let resolved = dataset.resolve(conditions)?;
    Ok(dataset.subset(|s| s.satisfies(&resolved)))
}

/// Count of labeled samples per value of `attribute`.
pub fn attribute_histogram(dataset: &Dataset, attribute: &str) -> Result<Vec<usize>> {
    let index = dataset.schema.require(attribute)?;
    let mut counts = vec![0; dataset.schema.value_count(index)];
    for s in &dataset.samples {
        if let Some(v) = s.attributes[index] {
            counts[v] += 1;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPaths {
    pub manifest: PathBuf,
    pub schema: PathBuf,
    pub features: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        DatasetPaths {
            manifest: dir.join(MANIFEST_FILE),
            schema: dir.join(SCHEMA_FILE),
            features: dir.join(FEATURES_FILE),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    feature_dim: usize,
    attributes: AttributeSchema,
}

/// Loads a dataset whose schema sidecar sits next to the manifest.
pub fn load_dataset(manifest: impl AsRef<Path>, features: impl AsRef<Path>) -> Result<Dataset> {
    let manifest = manifest.as_ref();
    let schema = manifest
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(SCHEMA_FILE);
    load_dataset_with(
        &DatasetPaths {
            manifest: manifest.to_path_buf(),
            schema,
            features: features.as_ref().to_path_buf(),
        },
        LoadOptions::default(),
    )
}

pub fn load_dataset_dir(dir: impl AsRef<Path>) -> Result<Dataset> {
    load_dataset_with(&DatasetPaths::in_dir(dir), LoadOptions::default())
}

pub fn load_dataset_with(paths: &DatasetPaths, options: LoadOptions) -> Result<Dataset> {
    let schema_text =
        std::fs::read_to_string(&paths.schema).map_err(|e| Error::io(&paths.schema, e))?;
    let schema_file: SchemaFile = serde_json::from_str(&schema_text)
        .map_err(|e| Error::format(&paths.schema, e.to_string()))?;
    let schema = schema_file.attributes;

    let (rows, dim, values) = read_features(&paths.features)?;
    if dim != schema_file.feature_dim {
        return Err(Error::format(
            &paths.features,
            format!(
                "dimension mismatch: schema declares {}, feature file has {dim}",
                schema_file.feature_dim
            ),
        ));
    }

    let file = File::open(&paths.manifest).map_err(|e| Error::io(&paths.manifest, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(file));
    let expected_header = manifest_header(&schema);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::format(&paths.manifest, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != expected_header {
        return Err(Error::format(
            &paths.manifest,
            format!(
                "malformed header: expected {}, found {}",
                expected_header.join(","),
                header.join(",")
            ),
        ));
    }

    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(&paths.manifest, e.to_string()))?;
        let sample_id = record[0].to_string();
        let split = Split::parse(&record[3]).ok_or_else(|| {
            Error::format(
                &paths.manifest,
                format!("sample {sample_id:?}: unknown split {:?}", &record[3]),
            )
        })?;
        let mut attributes = Vec::with_capacity(schema.len());
        for (i, attr) in schema.attributes().iter().enumerate() {
            let cell = &record[4 + i];
            if cell == UNLABELED {
                attributes.push(None);
            } else {
                let v = attr.value_index(cell).ok_or_else(|| {
                    Error::format(
                        &paths.manifest,
                        format!(
                            "sample {sample_id:?}: unknown value {cell:?} for attribute {:?}",
                            attr.name
                        ),
                    )
                })?;
                attributes.push(Some(v));
            }
        }
        if row >= rows {
            // keep counting to report the real manifest size
            samples.push(Sample {
                sample_id,
                identity_id: record[1].to_string(),
                camera_id: record[2].to_string(),
                split,
                attributes,
                features: Vec::new(),
            });
            continue;
        }
        samples.push(Sample {
            sample_id,
            identity_id: record[1].to_string(),
            camera_id: record[2].to_string(),
            split,
            attributes,
            features: values[row * dim..(row + 1) * dim].to_vec(),
        });
    }
    if samples.len() != rows {
        return Err(Error::format(
            &paths.features,
            format!(
                "row count mismatch: manifest has {} rows, feature file declares {rows}",
                samples.len()
            ),
        ));
    }

    let dataset = Dataset {
        schema,
        feature_dim: dim,
        samples,
    };
    dataset.validate(options)?;
    Ok(dataset)
}

fn manifest_header(schema: &AttributeSchema) -> Vec<String> {
    ["sample_id", "identity_id", "camera_id", "split"]
        .iter()
        .map(|s| s.to_string())
        .chain(schema.attributes().iter().map(|a| format!("attr_{}", a.name)))
        .collect()
}

fn read_features(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < FEATURE_HEADER_BYTES || &bytes[..6] != FEATURE_MAGIC {
        return Err(Error::format(path, "magic mismatch: not an HREID1 feature file"));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let body = &bytes[FEATURE_HEADER_BYTES..];
    if body.len() != rows * dim * 4 {
        return Err(Error::format(
            path,
            format!(
                "payload is {} bytes, header implies {rows}x{dim} floats",
                body.len()
            ),
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, dim, values))
}

/// Writes manifest, schema and feature files into `out_dir`.
pub fn write_dataset(dataset: &Dataset, out_dir: impl AsRef<Path>) -> Result<DatasetPaths> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let paths = DatasetPaths::in_dir(out_dir);

    let schema = SchemaFile {
        feature_dim: dataset.feature_dim,
        attributes: dataset.schema.clone(),
    };
    let mut text = serde_json::to_string_pretty(&schema)?;
    text.push('\n');
    std::fs::write(&paths.schema, text).map_err(|e| Error::io(&paths.schema, e))?;

    let file = File::create(&paths.manifest).map_err(|e| Error::io(&paths.manifest, e))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::format(&paths.manifest, e.to_string());
    writer
        .write_record(manifest_header(&dataset.schema))
        .map_err(csv_err)?;
    for s in &dataset.samples {
        let mut record = vec![
            s.sample_id.as_str(),
            s.identity_id.as_str(),
            s.camera_id.as_str(),
            s.split.as_str(),
        ];
        for (i, v) in s.attributes.iter().enumerate() {
            record.push(match v {
                Some(v) => dataset.schema.attributes()[i].values[*v].as_str(),
                None => UNLABELED,
            });
        }
        writer.write_record(&record).map_err(csv_err)?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(&paths.manifest, e))?;

    let file = File::create(&paths.features).map_err(|e| Error::io(&paths.features, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(&paths.features, e);
    w.write_all(FEATURE_MAGIC).map_err(io_err)?;
    w.write_all(&(dataset.samples.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&(dataset.feature_dim as u32).to_le_bytes())
        .map_err(io_err)?;
    for s in &dataset.samples {
        for x in &s.features {
            w.write_all(&x.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(paths)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn schema() -> AttributeSchema {
        AttributeSchema::new(vec![
            Attribute::new("gender", &["male", "female"]),
            Attribute::new("dress", &["no", "yes"]),
        ])
        .unwrap()
    }

    pub fn sample(id: &str, identity: &str, split: Split, attrs: &[Option<usize>]) -> Sample {
        Sample {
            sample_id: id.to_string(),
            identity_id: identity.to_string(),
            camera_id: "c0".to_string(),
            split,
            attributes: attrs.to_vec(),
            features: vec![0.0; 4],
        }
    }

    /// Six samples, three of them female; only female samples wear dresses.
    pub fn six() -> Dataset {
        let rows = [
            (Some(0), Some(0)),
            (Some(1), Some(1)),
            (Some(0), Some(0)),
            (Some(1), Some(0)),
            (Some(0), Some(0)),
            (Some(1), Some(1)),
        ];
        let samples = rows
            .iter()
            .enumerate()
            .map(|(i, (g, d))| sample(&format!("s{i}"), &format!("p{}", i / 2), Split::Train, &[*g, *d]))
            .collect();
        Dataset::new(schema(), 4, samples).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn schema_rejects_single_value_and_duplicates() {
        assert!(AttributeSchema::new(vec![Attribute::new("a", &["x"])]).is_err());
        assert!(AttributeSchema::new(vec![Attribute::new("a", &["x", "x"])]).is_err());
        assert!(AttributeSchema::new(vec![
            Attribute::new("a", &["x", "y"]),
            Attribute::new("a", &["u", "v"])
        ])
        .is_err());
    }

    #[test]
    fn filter_empty_conditions_is_identity() {
        let ds = six();
        assert_eq!(filter_by_conditions(&ds, &[]).unwrap(), ds);
    }

    #[test]
    fn filter_female_keeps_order() {
        let ds = six();
        let f = filter_by_conditions(&ds, &[Condition::new("gender", 1)]).unwrap();
        let ids: Vec<_> = f.samples.iter().map(|s| s.sample_id.as_str()).collect();
        assert_eq!(ids, ["s1", "s3", "s5"]);
        assert_eq!(f.feature_dim, ds.feature_dim);
        assert_eq!(f.schema, ds.schema);
    }

    #[test]
    fn filter_without_match_is_empty() {
        let ds = six();
        let f = filter_by_conditions(
            &ds,
            &[Condition::new("gender", 0), Condition::new("dress", 1)],
        )
        .unwrap();
        assert!(f.is_empty());
    }

    #[test]
    fn histogram_counts() {
        let schema = schema();
        let samples = (0..10)
            .map(|i| {
                let g = if i < 6 { 0 } else { 1 };
                sample(&format!("s{i}"), "p", Split::Train, &[Some(g), Some(0)])
            })
            .collect();
        let ds = Dataset::new(schema.clone(), 4, samples).unwrap();
        assert_eq!(attribute_histogram(&ds, "gender").unwrap(), vec![6, 4]);
        let empty = Dataset::new(schema, 4, vec![]).unwrap();
        assert_eq!(attribute_histogram(&empty, "gender").unwrap(), vec![0, 0]);
        assert!(attribute_histogram(&ds, "height").is_err());
    }

    #[test]
    fn histogram_skips_unlabeled() {
        let samples = vec![
            sample("a", "p", Split::Gallery, &[None, Some(1)]),
            sample("b", "p", Split::Gallery, &[Some(1), Some(1)]),
        ];
        let ds = Dataset::new(schema(), 4, samples).unwrap();
        assert_eq!(attribute_histogram(&ds, "gender").unwrap(), vec![0, 1]);
    }

    #[test]
    fn train_samples_must_be_labeled() {
        let samples = vec![sample("a", "p", Split::Train, &[None, Some(1)])];
        assert!(Dataset::new(schema(), 4, samples).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let samples = vec![
            sample("a", "p", Split::Train, &[Some(0), Some(1)]),
            sample("a", "q", Split::Train, &[Some(0), Some(1)]),
        ];
        assert!(Dataset::new(schema(), 4, samples).is_err());
    }

    #[test]
    fn orphan_query_is_error_only_when_strict() {
        let samples = vec![sample("q", "p", Split::Query, &[Some(0), Some(1)])];
        let ds = Dataset {
            schema: schema(),
            feature_dim: 4,
            samples,
        };
        assert!(ds.validate(LoadOptions::default()).is_ok());
        assert!(ds
            .validate(LoadOptions {
                strict_query_identities: true
            })
            .is_err());
    }
}
