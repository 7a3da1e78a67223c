use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::relation::SpatialRelation;
use crate::error::{Result, VsdError};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const UNK: usize = 5;

pub const RESERVED: [&str; 6] = ["[PAD]", "[BOS]", "[EOS]", "[SEP]", "[MASK]", "[UNK]"];

/// Token/id bijection. Reserved tokens take ids 0..6, relation words follow
/// the reserved block inside the sorted remainder, so ids depend only on the
/// set of corpus tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = VsdError;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocabulary::from_tokens(tokens)
    }
}

impl Vocabulary {
    /// Builds a vocabulary from corpus tokens. All relation phrases and
    /// paraphrases are always included.
    pub fn build<'a, I>(tokens: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut set: BTreeSet<String> = tokens.into_iter().map(str::to_string).collect();
        for r in SpatialRelation::ALL {
            for p in std::iter::once(r.phrase()).chain(r.paraphrases().iter().copied()) {
                set.extend(p.split(' ').map(str::to_string));
            }
        }
        for r in RESERVED {
            set.remove(r);
        }
        let tokens = RESERVED.iter().map(|s| s.to_string()).chain(set).collect();
        Vocabulary::from_tokens(tokens).expect("reserved block and unique tokens")
    }

    /// Restores a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(VsdError::InvalidInput(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(VsdError::InvalidInput(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps tokens to ids, unknown words to [`UNK`].
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(UNK)).collect()
    }

    pub fn encode_strict<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref())
                    .ok_or_else(|| VsdError::InvalidInput(format!("token `{}` not in vocabulary", t.as_ref())))
            })
            .collect()
    }

    /// Maps ids to tokens, dropping padding and stopping at the first EOS.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => continue,
                _ => out.push(
                    self.token(id)
                        .ok_or(VsdError::UnknownToken { id, vocab: self.len() })?
                        .to_string(),
                ),
            }
        }
        Ok(out)
    }

    pub fn relation_ids(&self, r: SpatialRelation) -> Vec<usize> {
        self.encode(&r.phrase_tokens())
    }
}
