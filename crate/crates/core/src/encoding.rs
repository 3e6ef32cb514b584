//! Tokenization, vocabulary and Position-Encoder sentence vectors.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{QrnError, Result};
use crate::tape::position_weight;
use crate::tensor::{Scalar, Tensor};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const NIL: &str = "<nil>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const NIL_ID: usize = 2;
const RESERVED: [&str; 3] = [PAD, UNK, NIL];

/// Lowercases, splits on whitespace and strips trailing `.`, `?`, `!`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_end_matches(['.', '?', '!']).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Folds a (possibly comma-separated list) answer into one token.
pub fn fold_answer(answer: &str) -> String {
    answer
        .split(',')
        .map(|part| tokenize(part).join(" "))
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join(",")
}

/// Word ↔ index map. Indices 0, 1, 2 are PAD, UNK and NIL; the rest are
/// sorted, so the same corpus always yields the same vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = QrnError;

    fn try_from(words: Vec<String>) -> Result<Self> {
        Vocabulary::from_words(words)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its word list (reserved tokens first).
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < RESERVED.len() || words[..RESERVED.len()] != RESERVED {
            return Err(QrnError::Format(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(QrnError::Format(format!("duplicate vocabulary entry `{w}`")));
            }
        }
        Ok(Vocabulary { words, index })
    }

    /// Collects every context, question, answer and candidate token.
    pub fn build(corpus: &[Example]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(QrnError::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut set = BTreeSet::new();
        let mut seen_candidates: Vec<*const Vec<String>> = Vec::new();
        for ex in corpus {
            for s in &ex.context {
                set.extend(tokenize(s));
            }
            set.extend(tokenize(&ex.question));
            match &ex.candidates {
                None => {
                    set.insert(fold_answer(&ex.answer));
                }
                Some(c) => {
                    set.extend(tokenize(&ex.answer));
                    let ptr = Arc::as_ptr(c);
                    if !seen_candidates.contains(&ptr) {
                        seen_candidates.push(ptr);
                        for cand in c.iter() {
                            set.extend(tokenize(cand));
                        }
                    }
                }
            }
        }
        for r in RESERVED {
            set.remove(r);
        }
        let words = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(set.into_iter().filter(|w| !w.is_empty()))
            .collect();
        Vocabulary::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Index of `word`, or UNK.
    pub fn id(&self, word: &str) -> usize {
        self.get(word).unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    fn sentence_ids(&self, text: &str, what: &str) -> Result<Vec<usize>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(QrnError::Input(format!("{what} `{text}` has no tokens")));
        }
        Ok(self.ids(&tokens))
    }

    /// Token ids of every candidate, padded to no length: `[candidates][words]`.
    pub fn candidate_ids(&self, candidates: &[String]) -> Result<Vec<Vec<usize>>> {
        candidates
            .iter()
            .enumerate()
            .map(|(i, c)| self.sentence_ids(c, &format!("candidate {i}")))
            .collect()
    }

    /// Maps an example onto token ids. `candidate_cache` holds the id lists
    /// of the last candidate set seen, so shared sets are converted once.
    pub fn index_example(
        &self,
        ex: &Example,
        candidate_cache: &mut Option<(Arc<Vec<String>>, Arc<Vec<Vec<usize>>>)>,
    ) -> Result<IndexedExample> {
        let sentences = ex
            .context
            .iter()
            .enumerate()
            .map(|(i, s)| self.sentence_ids(s, &format!("context sentence {}", i + 1)))
            .collect::<Result<Vec<_>>>()?;
        if sentences.is_empty() {
            return Err(QrnError::Input(format!("question `{}` has an empty context", ex.question)));
        }
        let question = self.sentence_ids(&ex.question, "question")?;
        let (answer, answer_tokens, candidates, gold) = match &ex.candidates {
            None => (self.id(&fold_answer(&ex.answer)), Vec::new(), None, None),
            Some(list) => {
                let ids = match candidate_cache {
                    Some((src, ids)) if Arc::ptr_eq(src, list) => Arc::clone(ids),
                    _ => {
                        let ids = Arc::new(self.candidate_ids(list)?);
                        *candidate_cache = Some((Arc::clone(list), Arc::clone(&ids)));
                        ids
                    }
                };
                let answer_tokens = self.sentence_ids(&ex.answer, "answer")?;
                let gold = ids.iter().position(|c| *c == answer_tokens);
                (UNK_ID, answer_tokens, Some(ids), gold)
            }
        };
        Ok(IndexedExample {
            sentences,
            question,
            answer,
            answer_tokens,
            candidates,
            gold_candidate: gold,
        })
    }

    pub fn index_all(&self, examples: &[Example]) -> Result<Vec<IndexedExample>> {
        let mut cache = None;
        examples.iter().map(|e| self.index_example(e, &mut cache)).collect()
    }
}

/// An example as vocabulary ids.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexedExample {
    pub sentences: Vec<Vec<usize>>,
    pub question: Vec<usize>,
    /// QA answer token (UNK for dialog examples).
    pub answer: usize,
    /// Dialog response tokens (empty for QA).
    pub answer_tokens: Vec<usize>,
    pub candidates: Option<Arc<Vec<Vec<usize>>>>,
    /// Position of the gold response among the candidates, if present.
    pub gold_candidate: Option<usize>,
}

impl IndexedExample {
    pub fn steps(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_dialog(&self) -> bool {
        self.candidates.is_some()
    }
}

/// Position-Encoder reduction of `[J, d]` word vectors to a `[1, d]` row:
/// `Σ_j l_j ∘ w_j` with `l_jk = (1 − j/J) − (k/d)(1 − 2j/J)`, 1-based.
pub fn position_encode<F: Scalar>(words: &Tensor<F>) -> Result<Tensor<F>> {
    if !words.is_matrix() {
        return Err(QrnError::Input("position_encode expects a [J, d] matrix".into()));
    }
    let (len, d) = (words.rows(), words.cols());
    let mut out = vec![F::zero(); d];
    for j in 0..len {
        for (k, o) in out.iter_mut().enumerate() {
            *o = *o + F::from_f64(position_weight(j + 1, k + 1, len, d)) * words.at(j, k);
        }
    }
    Ok(Tensor::row(out))
}

/// Sentence matrix and question vector of one example under embedding `a: [d, V]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample<F> {
    /// `[T, d]`
    pub x: Tensor<F>,
    /// `[1, d]`
    pub q: Tensor<F>,
}

fn embed_words<F: Scalar>(a: &Tensor<F>, ids: &[usize]) -> Result<Tensor<F>> {
    if ids.is_empty() {
        return Err(QrnError::Input("cannot encode an empty sentence".into()));
    }
    let (d, v) = (a.rows(), a.cols());
    let mut data = Vec::with_capacity(ids.len() * d);
    for &w in ids {
        if w >= v {
            return Err(QrnError::dim("encode_example", a.shape(), &[w]));
        }
        data.extend((0..d).map(|k| a.at(k, w)));
    }
    Tensor::matrix(ids.len(), d, data)
}

pub fn encode_example<F: Scalar>(ex: &IndexedExample, a: &Tensor<F>) -> Result<EncodedExample<F>> {
    let rows = ex
        .sentences
        .iter()
        .map(|s| Ok(position_encode(&embed_words(a, s)?)?.into_data()))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedExample {
        x: Tensor::from_rows(&rows)?,
        q: position_encode(&embed_words(a, &ex.question)?)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_strips_final_punctuation() {
        assert_eq!(tokenize("Where is the Apple?"), vec!["where", "is", "the", "apple"]);
        assert_eq!(tokenize("  <SILENCE> "), vec!["<silence>"]);
    }

    #[test]
    fn fold_list_answers() {
        assert_eq!(fold_answer("football, apple"), "football,apple");
        assert_eq!(fold_answer("football,apple"), "football,apple");
        assert_eq!(fold_answer("Hallway"), "hallway");
    }

    #[test]
    fn single_word_pe_hand_value() {
        let w = Tensor::row(vec![1.0f64, 1.0]);
        assert_eq!(position_encode(&w).unwrap().data(), &[0.5, 1.0]);
    }

    #[test]
    fn empty_sentence_is_an_input_error() {
        let w = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(embed_words(&w, &[]), Err(QrnError::Input(_))));
    }

    #[test]
    fn vocabulary_serde_round_trip() {
        let v = Vocabulary::from_words(
            ["<pad>", "<unk>", "<nil>", "apple", "kitchen"].map(String::from).to_vec(),
        )
        .unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("kitchen"), 4);
        assert_eq!(back.id("garden"), UNK_ID);
        assert!(serde_json::from_str::<Vocabulary>(r#"["a","b"]"#).is_err());
    }
}
