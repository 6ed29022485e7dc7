//! Character-level subword vocabulary with greedy longest-match encoding.
//!
//! The vocabulary is grown by repeatedly merging the most frequent pair of
//! adjacent units in the corpus. Whitespace is an ordinary character, so
//! `decode(encode(text)) == text` whenever no character is unknown.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const SOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const MASK: TokenId = 4;
/// Number of reserved ids; corpus tokens start here.
pub const NUM_RESERVED: usize = 5;

pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["⟨PAD⟩", "⟨UNK⟩", "⟨SOS⟩", "⟨EOS⟩", "⟨MASK⟩"];

pub fn is_reserved(id: TokenId) -> bool {
    (id as usize) < NUM_RESERVED
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    /// Non-reserved entries only.
    index: HashMap<String, TokenId>,
    /// Longest entry, in chars.
    max_chars: usize,
}

/// Token ids plus the text they came from, if any.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub source_text: Option<String>,
}

impl Vocab {
    /// Builds a vocabulary from non-reserved token strings in id order.
    pub fn from_tokens<S: AsRef<str>>(corpus_tokens: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::new();
        let mut max_chars = 0;
        for tok in corpus_tokens {
            let tok = tok.as_ref();
            if tok.is_empty() {
                return Err(Error::Input("vocabulary entries must be non-empty".into()));
            }
            if RESERVED_TOKENS.contains(&tok) || index.contains_key(tok) {
                return Err(Error::Input(format!("duplicate vocabulary entry {tok:?}")));
            }
            index.insert(tok.to_string(), tokens.len() as TokenId);
            max_chars = max_chars.max(tok.chars().count());
            tokens.push(tok.to_string());
        }
        if tokens.len() <= NUM_RESERVED {
            return Err(Error::Input("vocabulary has no corpus tokens".into()));
        }
        Ok(Vocab {
            tokens,
            index,
            max_chars,
        })
    }

    /// Greedy frequency-merge vocabulary of at most `target_size` entries
    /// (reserved tokens included). Deterministic for a given corpus.
    pub fn build<S: AsRef<str>>(documents: &[S], target_size: usize) -> Result<Self> {
        if target_size < NUM_RESERVED + 1 {
            return Err(Error::Config(format!(
                "vocabulary size must be at least {}, got {target_size}",
                NUM_RESERVED + 1
            )));
        }
        let docs: Vec<Vec<char>> = documents
            .iter()
            .map(|d| d.as_ref().chars().collect::<Vec<_>>())
            .filter(|d| !d.is_empty())
            .collect();
        if docs.is_empty() {
            return Err(Error::EmptyCorpus);
        }

        let mut char_freq: BTreeMap<char, usize> = BTreeMap::new();
        for &c in docs.iter().flatten() {
            *char_freq.entry(c).or_default() += 1;
        }
        let mut chars: Vec<(char, usize)> = char_freq.into_iter().collect();
        chars.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let budget = target_size - NUM_RESERVED;
        let mut entries: Vec<String> = chars.iter().take(budget).map(|(c, _)| c.to_string()).collect();

        // Units per document; characters outside the budget split the stream.
        let mut seqs: Vec<Vec<Option<String>>> = docs
            .iter()
            .map(|d| {
                d.iter()
                    .map(|c| {
                        let s = c.to_string();
                        entries.contains(&s).then_some(s)
                    })
                    .collect()
            })
            .collect();

        while entries.len() < budget {
            let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
            for seq in &seqs {
                for w in seq.windows(2) {
                    if let (Some(a), Some(b)) = (&w[0], &w[1]) {
                        *pairs.entry((a.as_str(), b.as_str())).or_default() += 1;
                    }
                }
            }
            let best = pairs
                .into_iter()
                .filter(|&((a, b), count)| {
                    let merged = format!("{a}{b}");
                    count >= 2
                        && !RESERVED_TOKENS.contains(&merged.as_str())
                        && !entries.contains(&merged)
                })
                .max_by(|x, y| x.1.cmp(&y.1).then_with(|| (y.0).cmp(&x.0)))
                .map(|((a, b), _)| (a.to_string(), b.to_string()));
            let Some((a, b)) = best else { break };
            let merged = format!("{a}{b}");
            for seq in &mut seqs {
                let mut out = Vec::with_capacity(seq.len());
                let mut i = 0;
                while i < seq.len() {
                    if i + 1 < seq.len()
                        && seq[i].as_deref() == Some(a.as_str())
                        && seq[i + 1].as_deref() == Some(b.as_str())
                    {
                        out.push(Some(merged.clone()));
                        i += 2;
                    } else {
                        out.push(seq[i].take());
                        i += 1;
                    }
                }
                *seq = out;
            }
            entries.push(merged);
        }
        Self::from_tokens(&entries)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Id of a non-reserved entry.
    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Greedy longest-match, left to right. Unknown characters become UNK.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut ids = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let start = chars[i].0;
            let mut matched = None;
            let longest = self.max_chars.min(chars.len() - i);
            for len in (1..=longest).rev() {
                let end = chars.get(i + len).map_or(text.len(), |c| c.0);
                if let Some(&id) = self.index.get(&text[start..end]) {
                    matched = Some((id, len));
                    break;
                }
            }
            match matched {
                Some((id, len)) => {
                    ids.push(id);
                    i += len;
                }
                None => {
                    ids.push(UNK);
                    i += 1;
                }
            }
        }
        TokenSequence {
            ids,
            source_text: Some(text.to_string()),
        }
    }

    /// Concatenates token strings; reserved ids render as `⟨SOS⟩` etc.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::Index {
                what: "token id",
                index: id as usize,
                limit: self.len(),
            })?;
            out.push_str(tok);
        }
        Ok(out)
    }

    /// Like [`Vocab::decode`] but silently drops reserved ids.
    pub fn decode_text(&self, ids: &[TokenId]) -> Result<String> {
        let kept: Vec<TokenId> = ids.iter().copied().filter(|&id| !is_reserved(id)).collect();
        self.decode(&kept)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.tokens)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let tokens: Vec<String> = serde_json::from_str(json)?;
        if tokens.len() < NUM_RESERVED + 1 {
            return Err(Error::Input(format!(
                "vocabulary file holds {} entries, need at least {}",
                tokens.len(),
                NUM_RESERVED + 1
            )));
        }
        for (i, want) in RESERVED_TOKENS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(Error::Input(format!(
                    "vocabulary entry {i} must be {want}, found {:?}",
                    tokens[i]
                )));
            }
        }
        Self::from_tokens(&tokens[NUM_RESERVED..])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
