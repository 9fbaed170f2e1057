//! Text ingestion, vocabularies and graded phrase statistics.
//!
//! A corpus is a finite word sequence. Its phrases of length `k` are the
//! `M − k + 1` sliding windows; [`PhraseTable`] counts them and
//! [`EmpiricalDist`] normalizes the counts by the number of window positions.
//!
//! Word ids are zero-based indices into [`Vocabulary::words`].

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TdmError};

pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Ingestion options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub lowercase: bool,
    pub split_punct: bool,
    pub min_count: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            lowercase: true,
            split_punct: true,
            min_count: 1,
        }
    }
}

fn is_punct(ch: char) -> bool {
    ch.is_ascii_punctuation()
}

/// Split text into tokens: maximal whitespace-free runs, optionally
/// lowercased, with ASCII punctuation optionally split into single-character
/// tokens.
pub fn tokenize(text: &str, config: &IngestConfig) -> Vec<String> {
    let mut out = Vec::new();
    for run in text.split_whitespace() {
        let run = if config.lowercase {
            run.to_lowercase()
        } else {
            run.to_string()
        };
        if !config.split_punct {
            out.push(run);
            continue;
        }
        let mut cur = String::new();
        for ch in run.chars() {
            if is_punct(ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// [`tokenize`] on raw bytes, rejecting invalid UTF-8.
pub fn tokenize_bytes(bytes: &[u8], config: &IngestConfig) -> Result<Vec<String>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| TdmError::Ingestion(format!("input is not valid UTF-8: {e}")))?;
    Ok(tokenize(text, config))
}

/// An ordered list of distinct, non-empty tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    unknown: Option<usize>,
}

impl Vocabulary {
    /// Build from an explicit word list. A word equal to `<unk>` becomes the
    /// unknown token.
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.is_empty() {
            return Err(TdmError::Validation("vocabulary is empty".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() {
                return Err(TdmError::Validation(format!("vocabulary entry {i} is empty")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(TdmError::Validation(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        let unknown = index.get(UNKNOWN_TOKEN).copied();
        Ok(Vocabulary {
            words,
            index,
            unknown,
        })
    }

    /// Synthetic vocabulary `w1 … wn`.
    pub fn numbered(n: usize) -> Result<Self> {
        Self::new((1..=n).map(|i| format!("w{i}")).collect())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn unknown_token(&self) -> Option<&str> {
        self.unknown.map(|i| self.words[i].as_str())
    }

    /// Exact lookup, without the unknown-token fallback.
    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Lookup falling back to the unknown token.
    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.id(token).or(self.unknown)
    }

    /// Map tokens to ids; tokens with no id and no unknown fallback are an
    /// ingestion error.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                let t = t.as_ref();
                self.lookup(t)
                    .ok_or_else(|| TdmError::Ingestion(format!("token {t:?} is not in the vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.words[i].as_str()).collect()
    }
}

/// Distinct tokens with count ≥ `min_count` in first-occurrence order. When
/// anything is dropped, `<unk>` is appended to absorb it.
pub fn build_vocab<S: AsRef<str>>(tokens: &[S], min_count: usize) -> Result<Vocabulary> {
    if tokens.is_empty() {
        return Err(TdmError::Ingestion("no tokens to build a vocabulary from".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    for t in tokens {
        let t = t.as_ref();
        let c = counts.entry(t).or_insert(0);
        if *c == 0 {
            order.push(t);
        }
        *c += 1;
    }
    let kept: Vec<String> = order
        .iter()
        .filter(|t| counts[*t] >= min_count)
        .map(|t| t.to_string())
        .collect();
    if kept.is_empty() {
        return Err(TdmError::Ingestion(format!(
            "every token occurs fewer than {min_count} times"
        )));
    }
    let mut words = kept;
    if words.len() < order.len() && !words.iter().any(|w| w == UNKNOWN_TOKEN) {
        words.push(UNKNOWN_TOKEN.to_string());
    }
    Vocabulary::new(words)
}

/// A non-empty word-id sequence over a vocabulary.
#[derive(Clone, Debug)]
pub struct Corpus {
    ids: Vec<usize>,
    vocab: Arc<Vocabulary>,
}

impl Corpus {
    pub fn from_ids(ids: Vec<usize>, vocab: Arc<Vocabulary>) -> Result<Self> {
        if ids.is_empty() {
            return Err(TdmError::Ingestion("corpus is empty".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab.len()) {
            return Err(TdmError::Ingestion(format!(
                "word id {bad} out of range for vocabulary of size {}",
                vocab.len()
            )));
        }
        Ok(Corpus { ids, vocab })
    }

    pub fn from_tokens<S: AsRef<str>>(tokens: &[S], vocab: Arc<Vocabulary>) -> Result<Self> {
        let ids = vocab.encode(tokens)?;
        Self::from_ids(ids, vocab)
    }

    /// Tokenize `text`, build a vocabulary from it and encode it.
    pub fn ingest(text: &str, config: &IngestConfig) -> Result<Self> {
        let tokens = tokenize(text, config);
        let vocab = Arc::new(build_vocab(&tokens, config.min_count)?);
        Self::from_tokens(&tokens, vocab)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Occurrence counts of the length-`k` windows of a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct PhraseTable {
    pub k: usize,
    pub counts: BTreeMap<Vec<usize>, u64>,
    pub positions: u64,
}

/// Count every length-`k` window of `corpus`.
pub fn extract_phrases(corpus: &Corpus, k: usize) -> Result<PhraseTable> {
    count_windows(corpus.ids(), k)
}

/// [`extract_phrases`] on a bare id sequence.
pub fn count_windows(ids: &[usize], k: usize) -> Result<PhraseTable> {
    if k == 0 {
        return Err(TdmError::Argument("phrase length must be positive".into()));
    }
    if k > ids.len() {
        return Err(TdmError::Argument(format!(
            "phrase length {k} exceeds corpus length {}",
            ids.len()
        )));
    }
    let mut counts = BTreeMap::new();
    for w in ids.windows(k) {
        *counts.entry(w.to_vec()).or_insert(0u64) += 1;
    }
    Ok(PhraseTable {
        k,
        counts,
        positions: (ids.len() - k + 1) as u64,
    })
}

/// The empirical distribution of length-`k` phrases.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalDist {
    pub k: usize,
    pub probs: BTreeMap<Vec<usize>, f64>,
}

impl EmpiricalDist {
    pub fn prob(&self, phrase: &[usize]) -> f64 {
        self.probs.get(phrase).copied().unwrap_or(0.0)
    }
}

/// Divide each count by the number of window positions `M − k + 1`.
pub fn empirical_dist(table: &PhraseTable) -> EmpiricalDist {
    let denom = table.positions as f64;
    EmpiricalDist {
        k: table.k,
        probs: table
            .counts
            .iter()
            .map(|(p, &c)| (p.clone(), c as f64 / denom))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    fn abab() -> Corpus {
        let vocab = Arc::new(Vocabulary::new(toks(&["a", "b"])).unwrap());
        Corpus::from_ids(vec![0, 1, 0, 1, 0], vocab).unwrap()
    }

    #[test]
    fn tokenize_whitespace_lowercase() {
        let cfg = IngestConfig::default();
        assert_eq!(tokenize("A b a", &cfg), toks(&["a", "b", "a"]));
        assert!(tokenize("", &cfg).is_empty());
        assert!(tokenize(" \n\t ", &cfg).is_empty());
    }

    #[test]
    fn tokenize_splits_punctuation() {
        let cfg = IngestConfig::default();
        assert_eq!(tokenize("a, b", &cfg), toks(&["a", ",", "b"]));
        assert_eq!(tokenize("don't!", &cfg), toks(&["don", "'", "t", "!"]));
        let keep = IngestConfig {
            split_punct: false,
            lowercase: false,
            ..IngestConfig::default()
        };
        assert_eq!(tokenize("A, b", &keep), toks(&["A,", "b"]));
    }

    #[test]
    fn tokenize_rejects_invalid_utf8() {
        let err = tokenize_bytes(&[0x61, 0xff, 0x62], &IngestConfig::default()).unwrap_err();
        assert!(matches!(err, TdmError::Ingestion(_)));
    }

    #[test]
    fn vocab_first_occurrence_order() {
        let v = build_vocab(&toks(&["a", "b", "a"]), 0).unwrap();
        assert_eq!(v.words(), &toks(&["a", "b"])[..]);
        assert_eq!(v.unknown_token(), None);
    }

    #[test]
    fn vocab_min_count_adds_unknown() {
        let v = build_vocab(&toks(&["a", "b", "a"]), 2).unwrap();
        assert_eq!(v.words(), &toks(&["a", UNKNOWN_TOKEN])[..]);
        assert_eq!(v.lookup("b"), Some(1));
        assert_eq!(v.lookup("zzz"), Some(1));
    }

    #[test]
    fn vocab_errors() {
        let empty: Vec<String> = vec![];
        assert!(matches!(build_vocab(&empty, 0), Err(TdmError::Ingestion(_))));
        assert!(matches!(build_vocab(&toks(&["a", "b"]), 5), Err(TdmError::Ingestion(_))));
        assert!(Vocabulary::new(toks(&["a", "a"])).is_err());
        assert!(Vocabulary::new(toks(&["a", ""])).is_err());
    }

    #[test]
    fn corpus_rejects_oov_without_unknown() {
        let vocab = Arc::new(Vocabulary::new(toks(&["a"])).unwrap());
        assert!(Corpus::from_tokens(&toks(&["a", "b"]), vocab.clone()).is_err());
        assert!(Corpus::from_ids(vec![], vocab.clone()).is_err());
        assert!(Corpus::from_ids(vec![1], vocab).is_err());
    }

    #[test]
    fn windows_of_ababa() {
        let t = extract_phrases(&abab(), 2).unwrap();
        assert_eq!(t.positions, 4);
        assert_eq!(t.counts.len(), 2);
        assert_eq!(t.counts[&vec![0, 1]], 2);
        assert_eq!(t.counts[&vec![1, 0]], 2);

        let whole = extract_phrases(&abab(), 5).unwrap();
        assert_eq!(whole.positions, 1);
        assert_eq!(whole.counts[&vec![0, 1, 0, 1, 0]], 1);
    }

    #[test]
    fn window_longer_than_corpus_is_error() {
        let vocab = Arc::new(Vocabulary::new(toks(&["a"])).unwrap());
        let c = Corpus::from_ids(vec![0], vocab).unwrap();
        assert!(matches!(extract_phrases(&c, 2), Err(TdmError::Argument(_))));
        assert!(matches!(extract_phrases(&c, 0), Err(TdmError::Argument(_))));
    }

    #[test]
    fn empirical_probabilities() {
        let q2 = empirical_dist(&extract_phrases(&abab(), 2).unwrap());
        assert_eq!(q2.prob(&[0, 1]), 0.5);
        assert_eq!(q2.prob(&[1, 0]), 0.5);
        assert_eq!(q2.prob(&[0, 0]), 0.0);

        let q1 = empirical_dist(&extract_phrases(&abab(), 1).unwrap());
        assert!((q1.prob(&[0]) - 0.6).abs() < 1e-15);
        assert!((q1.prob(&[1]) - 0.4).abs() < 1e-15);

        let q5 = empirical_dist(&extract_phrases(&abab(), 5).unwrap());
        assert_eq!(q5.prob(&[0, 1, 0, 1, 0]), 1.0);
    }

    proptest! {
        #[test]
        fn empirical_sums_to_one(ids in prop::collection::vec(0usize..4, 1..60), k in 1usize..6) {
            prop_assume!(k <= ids.len());
            let t = count_windows(&ids, k).unwrap();
            prop_assert_eq!(t.counts.values().sum::<u64>(), t.positions);
            prop_assert!(t.counts.values().all(|&c| c >= 1));
            let q = empirical_dist(&t);
            let total: f64 = q.probs.values().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn self_concatenation_doubles_interior_windows(ids in prop::collection::vec(0usize..3, 1..30), k in 1usize..5) {
            prop_assume!(k <= ids.len());
            let single = count_windows(&ids, k).unwrap();
            let mut doubled_ids = ids.clone();
            doubled_ids.extend_from_slice(&ids);
            let doubled = count_windows(&doubled_ids, k).unwrap();
            // brute force: windows straddling the seam are the only extras
            let mut seam: BTreeMap<Vec<usize>, u64> = BTreeMap::new();
            for start in (ids.len() + 1).saturating_sub(k)..ids.len() {
                *seam.entry(doubled_ids[start..start + k].to_vec()).or_insert(0) += 1;
            }
            for (p, &c) in &doubled.counts {
                let expect = 2 * single.counts.get(p).copied().unwrap_or(0) + seam.get(p).copied().unwrap_or(0);
                prop_assert_eq!(c, expect);
            }
        }

        #[test]
        fn tokenize_is_idempotent(text in "[a-zA-Z ,.;!?'\n\t]{0,80}") {
            let cfg = IngestConfig::default();
            let once = tokenize(&text, &cfg);
            let twice = tokenize(&once.join(" "), &cfg);
            prop_assert_eq!(once, twice);
        }
    }
}
