use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::instance::Instance;
use super::scheme::Tag;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Whitespace-token vocabulary with the four reserved ids first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Tokens in order of first occurrence across `instances`.
    pub fn build<'a>(instances: impl IntoIterator<Item = &'a Instance>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for inst in instances {
            for tok in &inst.tokens {
                if !index.contains_key(tok) {
                    index.insert(tok.clone(), tokens.len());
                    tokens.push(tok.clone());
                }
            }
        }
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }
}

/// Model input for one instance: `[CLS] x_1 … x_n [SEP] [PAD]…`, length `max_len + 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    /// True at `[CLS]`, real tokens and `[SEP]`.
    pub mask: Vec<bool>,
    /// Number of real tokens kept after truncation.
    pub n_tokens: usize,
    /// Gold tags of the kept tokens.
    pub tags: Vec<Tag>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Sequence positions of the real tokens (`1..=n`).
    pub fn token_positions(&self) -> Vec<usize> {
        (1..=self.n_tokens).collect()
    }

    pub fn sep_position(&self) -> usize {
        self.n_tokens + 1
    }
}

pub fn encode(instance: &Instance, vocab: &Vocabulary, max_len: usize) -> Result<Encoded> {
    if max_len < 3 {
        return Err(Error::contract(format!("max_len must be at least 3, got {max_len}")));
    }
    if instance.tokens.is_empty() {
        return Err(Error::contract(format!("instance `{}` has no tokens", instance.id)));
    }
    let n = instance.tokens.len().min(max_len);
    let mut ids = Vec::with_capacity(max_len + 2);
    ids.push(CLS);
    ids.extend(instance.tokens[..n].iter().map(|t| vocab.id(t)));
    ids.push(SEP);
    let mut mask = vec![true; ids.len()];
    ids.resize(max_len + 2, PAD);
    mask.resize(max_len + 2, false);
    Ok(Encoded { ids, mask, n_tokens: n, tags: instance.tags[..n.min(instance.tags.len())].to_vec() })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::dataio::ImageFeatures;

    fn inst(tokens: &[&str]) -> Instance {
        Instance {
            id: "t".into(),
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            attributes: BTreeSet::new(),
            tags: (0..tokens.len()).map(|i| if i % 2 == 0 { Tag::Begin(0) } else { Tag::Outside }).collect(),
            image: ImageFeatures::zeros(1, 1),
        }
    }

    #[test]
    fn pads_to_max_len_plus_two() {
        let i = inst(&["a", "b", "c"]);
        let v = Vocabulary::build([&i]);
        let e = encode(&i, &v, 46).unwrap();
        assert_eq!(e.len(), 48);
        assert_eq!(&e.ids[..5], &[CLS, 4, 5, 6, SEP]);
        assert!(e.ids[5..].iter().all(|&x| x == PAD));
        assert_eq!(e.mask.iter().filter(|&&m| m).count(), 5);
    }

    #[test]
    fn truncates_tokens_and_tags_together() {
        let toks: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = toks.iter().map(String::as_str).collect();
        let i = inst(&refs);
        let v = Vocabulary::build([&i]);
        let e = encode(&i, &v, 46).unwrap();
        assert_eq!(e.n_tokens, 46);
        assert_eq!(e.tags, i.tags[..46].to_vec());
        assert_eq!(e.ids[47], SEP);
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let train = inst(&["a"]);
        let v = Vocabulary::build([&train]);
        let e = encode(&inst(&["zzz"]), &v, 5).unwrap();
        assert_eq!(e.ids[1], UNK);
    }

    #[test]
    fn rejects_empty_and_tiny_max_len() {
        let v = Vocabulary::build([]);
        assert!(encode(&inst(&[]), &v, 5).is_err());
        assert!(encode(&inst(&["a"]), &v, 2).is_err());
    }

    #[test]
    fn reserved_ids_first() {
        let v = Vocabulary::build([&inst(&["x"])]);
        assert_eq!(v.token(0), "[PAD]");
        assert_eq!(v.token(3), "[SEP]");
        assert_eq!(v.id("x"), 4);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }
}
