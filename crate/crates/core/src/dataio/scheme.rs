use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One BIO tag; labels are indices into a [`TagScheme`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    Outside,
    Begin(usize),
    Inside(usize),
}

impl Tag {
    pub fn label(self) -> Option<usize> {
        match self {
            Tag::Outside => None,
            Tag::Begin(l) | Tag::Inside(l) => Some(l),
        }
    }
}

/// Half-open token range `[start, end)` carrying a label index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

impl Span {
    pub fn new(start: usize, end: usize, label: usize) -> Self {
        Span { start, end, label }
    }
}

/// Bijection between `L` attribute labels and the `2L + 1` BIO tags.
///
/// Tag indices: `O = 0`, `B-ℓ = 1 + 2ℓ`, `I-ℓ = 2 + 2ℓ`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagScheme {
    labels: Vec<String>,
}

impl TagScheme {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::contract("tag scheme needs at least one label"));
        }
        let unique: BTreeSet<&String> = labels.iter().collect();
        if unique.len() != labels.len() {
            return Err(Error::contract("duplicate attribute label in tag scheme"));
        }
        if let Some(bad) = labels.iter().find(|l| l.is_empty() || l.contains(char::is_whitespace)) {
            return Err(Error::contract(format!("invalid attribute label `{bad}`")));
        }
        Ok(TagScheme { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn num_tags(&self) -> usize {
        2 * self.labels.len() + 1
    }

    pub fn label_index(&self, name: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == name)
            .ok_or_else(|| Error::contract(format!("unknown attribute label `{name}`")))
    }

    pub fn label_name(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn tag_index(&self, tag: Tag) -> usize {
        match tag {
            Tag::Outside => 0,
            Tag::Begin(l) => 1 + 2 * l,
            Tag::Inside(l) => 2 + 2 * l,
        }
    }

    pub fn tag_at(&self, index: usize) -> Result<Tag> {
        match index {
            0 => Ok(Tag::Outside),
            i if i < self.num_tags() => {
                let l = (i - 1) / 2;
                Ok(if i % 2 == 1 { Tag::Begin(l) } else { Tag::Inside(l) })
            }
            i => Err(Error::contract(format!("tag index {i} out of range for {} tags", self.num_tags()))),
        }
    }

    pub fn parse_tag(&self, s: &str) -> Result<Tag> {
        if s == "O" {
            return Ok(Tag::Outside);
        }
        match s.split_once('-') {
            Some(("B", l)) => Ok(Tag::Begin(self.label_index(l)?)),
            Some(("I", l)) => Ok(Tag::Inside(self.label_index(l)?)),
            _ => Err(Error::contract(format!("malformed BIO tag `{s}`"))),
        }
    }

    pub fn tag_name(&self, tag: Tag) -> String {
        match tag {
            Tag::Outside => "O".to_string(),
            Tag::Begin(l) => format!("B-{}", self.labels[l]),
            Tag::Inside(l) => format!("I-{}", self.labels[l]),
        }
    }
}

impl fmt::Display for TagScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.labels.join(","))
    }
}

/// Maximal labelled spans of a BIO sequence.
///
/// Repair policy: an `I-ℓ` that does not continue a span of label `ℓ` opens a
/// new span, exactly as if it were `B-ℓ`.
pub fn tags_to_spans(tags: &[Tag]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (i, &tag) in tags.iter().enumerate() {
        match tag {
            Tag::Outside => {
                if let Some((s, l)) = open.take() {
                    spans.push(Span::new(s, i, l));
                }
            }
            Tag::Inside(l) if matches!(open, Some((_, ol)) if ol == l) => {}
            Tag::Begin(l) | Tag::Inside(l) => {
                if let Some((s, ol)) = open.take() {
                    spans.push(Span::new(s, i, ol));
                }
                open = Some((i, l));
            }
        }
    }
    if let Some((s, l)) = open {
        spans.push(Span::new(s, tags.len(), l));
    }
    spans
}

/// Inverse of [`tags_to_spans`] for non-overlapping spans.
pub fn spans_to_tags(spans: &[Span], len: usize) -> Result<Vec<Tag>> {
    let mut tags = vec![Tag::Outside; len];
    let mut taken = vec![false; len];
    for sp in spans {
        if sp.start >= sp.end || sp.end > len {
            return Err(Error::contract(format!("span {sp:?} invalid for length {len}")));
        }
        if taken[sp.start..sp.end].iter().any(|&t| t) {
            return Err(Error::contract(format!("span {sp:?} overlaps another span")));
        }
        taken[sp.start..sp.end].iter_mut().for_each(|t| *t = true);
        tags[sp.start] = Tag::Begin(sp.label);
        for t in &mut tags[sp.start + 1..sp.end] {
            *t = Tag::Inside(sp.label);
        }
    }
    Ok(tags)
}

/// Labels that occur in at least one span.
pub fn derive_attributes(tags: &[Tag]) -> BTreeSet<usize> {
    tags_to_spans(tags).into_iter().map(|s| s.label).collect()
}
