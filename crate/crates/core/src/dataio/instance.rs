use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scheme::{derive_attributes, Tag, TagScheme};
use crate::error::{Error, Result};

/// Global vector plus `K` regional vectors, all of dimension `d_v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFeatures {
    pub global: Vec<f32>,
    pub regions: Vec<Vec<f32>>,
}

impl ImageFeatures {
    pub fn dim(&self) -> usize {
        self.global.len()
    }

    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn check(&self, d_v: usize, k: usize) -> Result<()> {
        if self.regions.len() != k {
            return Err(Error::contract(format!("image has {} regions, expected K = {k}", self.regions.len())));
        }
        if self.global.len() != d_v || self.regions.iter().any(|r| r.len() != d_v) {
            return Err(Error::contract(format!("image feature dimension differs from d_v = {d_v}")));
        }
        Ok(())
    }

    pub fn zeros(d_v: usize, k: usize) -> Self {
        ImageFeatures { global: vec![0.0; d_v], regions: vec![vec![0.0; d_v]; k] }
    }

    /// Reads a little-endian `f32` file holding the global vector followed by the `K` regions.
    pub fn read_file(path: &Path, d_v: usize, k: usize) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let want = 4 * d_v * (k + 1);
        if bytes.len() != want {
            return Err(Error::contract(format!(
                "{}: feature file has {} bytes, expected {want} for d_v = {d_v}, K = {k}",
                path.display(),
                bytes.len()
            )));
        }
        let vals: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(ImageFeatures {
            global: vals[..d_v].to_vec(),
            regions: vals[d_v..].chunks(d_v).map(<[f32]>::to_vec).collect(),
        })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(4 * self.dim() * (self.num_regions() + 1));
        for v in self.global.iter().chain(self.regions.iter().flatten()) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// One product: description tokens, image features and gold annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: String,
    pub tokens: Vec<String>,
    pub attributes: BTreeSet<usize>,
    pub tags: Vec<Tag>,
    pub image: ImageFeatures,
}

/// Shape of a dataset: label set and image geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub scheme: TagScheme,
    pub d_v: usize,
    pub k: usize,
}

/// Dataset manifest stored next to the split files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub labels: Vec<String>,
    pub d_v: usize,
    pub k: usize,
    pub max_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn spec(&self) -> Result<DatasetSpec> {
        if self.k == 0 || self.d_v == 0 {
            return Err(Error::contract("manifest needs K >= 1 and d_v >= 1"));
        }
        Ok(DatasetSpec { scheme: TagScheme::new(self.labels.clone())?, d_v: self.d_v, k: self.k })
    }

    /// Path of a split file, resolved against the manifest's directory.
    pub fn split_path(&self, manifest_path: &Path, split: &str) -> Result<PathBuf> {
        let name = match split {
            "train" => &self.train,
            "valid" => &self.valid,
            "test" => &self.test,
            other => return Err(Error::contract(format!("unknown split `{other}`"))),
        };
        let name = name.as_ref().ok_or_else(|| Error::contract(format!("manifest lists no `{split}` split")))?;
        Ok(manifest_path.parent().unwrap_or(Path::new(".")).join(name))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawImage {
    Ref {
        #[serde(rename = "ref")]
        path: String,
    },
    Inline(ImageFeatures),
}

#[derive(Serialize, Deserialize)]
struct RawInstance {
    id: String,
    tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attributes: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tags: Option<Vec<String>>,
    image: RawImage,
}

fn data_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Data { path: path.display().to_string(), line, msg: msg.into() }
}

fn parse_line(path: &Path, line_no: usize, line: &str, spec: &DatasetSpec, labelled: bool) -> Result<Instance> {
    let err = |msg: String| data_err(path, line_no, msg);
    let raw: RawInstance = serde_json::from_str(line).map_err(|e| err(format!("malformed JSON: {e}")))?;
    if raw.tokens.is_empty() {
        return Err(err("empty token list".into()));
    }
    let image = match raw.image {
        RawImage::Inline(f) => f,
        RawImage::Ref { path: rel } => {
            let base = path.parent().unwrap_or(Path::new("."));
            ImageFeatures::read_file(&base.join(rel), spec.d_v, spec.k).map_err(|e| err(e.to_string()))?
        }
    };
    image.check(spec.d_v, spec.k).map_err(|e| err(e.to_string()))?;

    let (attributes, tags) = if labelled {
        let raw_tags = raw.tags.ok_or_else(|| err("missing `tags`".into()))?;
        let raw_attrs = raw.attributes.ok_or_else(|| err("missing `attributes`".into()))?;
        if raw_tags.len() != raw.tokens.len() {
            return Err(err(format!("{} tags for {} tokens", raw_tags.len(), raw.tokens.len())));
        }
        let tags = raw_tags
            .iter()
            .map(|t| spec.scheme.parse_tag(t))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| err(e.to_string()))?;
        let attributes = raw_attrs
            .iter()
            .map(|a| spec.scheme.label_index(a))
            .collect::<Result<BTreeSet<_>>>()
            .map_err(|e| err(e.to_string()))?;
        if let Some(&missing) = derive_attributes(&tags).difference(&attributes).next() {
            return Err(err(format!(
                "tagged label `{}` is not among the declared attributes",
                spec.scheme.label_name(missing)
            )));
        }
        (attributes, tags)
    } else {
        (BTreeSet::new(), vec![Tag::Outside; raw.tokens.len()])
    };
    Ok(Instance { id: raw.id, tokens: raw.tokens, attributes, tags, image })
}

fn load(path: &Path, spec: &DatasetSpec, labelled: bool) -> Result<Vec<Instance>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(path, i + 1, &line, spec, labelled)?);
    }
    Ok(out)
}

/// Reads and validates a JSONL file of annotated instances.
pub fn load_instances(path: &Path, spec: &DatasetSpec) -> Result<Vec<Instance>> {
    load(path, spec, true)
}

/// Reads instances whose gold `attributes`/`tags` may be absent (prediction input).
pub fn load_unlabelled(path: &Path, spec: &DatasetSpec) -> Result<Vec<Instance>> {
    load(path, spec, false)
}

pub fn instance_to_json(inst: &Instance, scheme: &TagScheme) -> Result<String> {
    let raw = RawInstance {
        id: inst.id.clone(),
        tokens: inst.tokens.clone(),
        attributes: Some(inst.attributes.iter().map(|&a| scheme.label_name(a).to_string()).collect()),
        tags: Some(inst.tags.iter().map(|&t| scheme.tag_name(t)).collect()),
        image: RawImage::Inline(inst.image.clone()),
    };
    Ok(serde_json::to_string(&raw)?)
}

pub fn write_instances(path: &Path, instances: &[Instance], scheme: &TagScheme) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for inst in instances {
        writeln!(w, "{}", instance_to_json(inst, scheme)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
