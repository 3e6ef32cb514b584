//! Output modules: the QA classifier, the slot-wise dialog response
//! scorer (optionally with Match features) and the query decoder.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::encoding::NIL_ID;
use crate::error::{QrnError, Result};
use crate::param::{ParamId, ParamKind, ParamStore, Parameter};
use crate::tape::{log_softmax_in_place, softmax_in_place, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Zero-mean normal matrix with standard deviation `1/√d`, the
/// initialization of the input and output modules.
pub fn normal_init<F: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, d: usize, rng: &mut R) -> Tensor<F> {
    let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
    let data = (0..rows * cols).map(|_| F::from_f64(dist.sample(rng))).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// First index of the maximum; ties go to the lowest index.
pub fn argmax<F: Scalar>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_row<F: Scalar>(op: &'static str, y: &Tensor<F>, d: usize) -> Result<()> {
    if y.len() != d {
        return Err(QrnError::dim(op, y.shape(), &[1, d]));
    }
    Ok(())
}

/// `W · y` for `w: [rows, cols]` and a `cols`-vector `y`.
fn matvec<F: Scalar>(w: &Tensor<F>, y: &[F]) -> Vec<F> {
    (0..w.rows())
        .map(|r| w.row_slice(r).iter().zip(y).fold(F::zero(), |s, (&a, &b)| s + a * b))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaHead {
    /// `[V, d]`
    pub w_y: ParamId,
}

impl QaHead {
    pub fn register<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        d: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w_y = store.add(Parameter::new("qa.w_y", ParamKind::Weight, normal_init(vocab, d, d, rng)))?;
        Ok(QaHead { w_y })
    }

    /// `[1, V]` answer logits for `y_hat: [1, d]`.
    pub fn logits<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, y_hat: Var) -> Result<Var> {
        let w = tape.param(store, self.w_y);
        tape.matmul_t(y_hat, w)
    }
}

/// `softmax(W_y ŷ)`.
pub fn qa_predict<F: Scalar>(store: &ParamStore<F>, head: &QaHead, y_hat: &Tensor<F>) -> Result<Vec<F>> {
    let w = &store.get(head.w_y).value;
    check_row("qa_predict", y_hat, w.cols())?;
    let mut p = matvec(w, y_hat.data());
    softmax_in_place(&mut p);
    Ok(p)
}

/// 0/1 overlap indicators per candidate: `[in context, in question]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchFeatures {
    pub rows: Vec<[u8; 2]>,
}

impl MatchFeatures {
    /// `[candidates, 2]`
    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        let data = self.rows.iter().flat_map(|r| r.map(|b| F::from_f64(f64::from(b)))).collect();
        Tensor::matrix(self.rows.len(), 2, data).expect("non-empty match features")
    }
}

/// Row `c` is `[1 iff any token of candidate c is in the context,
/// 1 iff any token is in the question]`.
pub fn compute_match<T: Eq + Hash>(candidates: &[Vec<T>], context: &HashSet<T>, question: &HashSet<T>) -> MatchFeatures {
    MatchFeatures {
        rows: candidates
            .iter()
            .map(|c| {
                [
                    u8::from(c.iter().any(|t| context.contains(t))),
                    u8::from(c.iter().any(|t| question.contains(t))),
                ]
            })
            .collect(),
    }
}

/// Match features of every vocabulary word, the output classes of the
/// dialog slot classifiers.
pub fn vocabulary_match(vocab_size: usize, sentences: &[Vec<usize>], question: &[usize]) -> MatchFeatures {
    let context: HashSet<usize> = sentences.iter().flatten().copied().collect();
    let question: HashSet<usize> = question.iter().copied().collect();
    let words: Vec<Vec<usize>> = (0..vocab_size).map(|w| vec![w]).collect();
    compute_match(&words, &context, &question)
}

/// `P` softmax classifiers over the vocabulary, one per response word.
/// Slot `s` sees `ŷ + E[:, w_{s−1}]` (NIL before the first word), so each
/// word is conditioned on the final state and the word before it.
#[derive(Clone, Debug, PartialEq)]
pub struct DialogHead {
    pub slots: usize,
    /// `[d, V]` embedding of the previous word.
    pub prev_embed: ParamId,
    /// Per slot `[V, d]`, or `[V, d − 2]` with Match features.
    pub classifiers: Vec<ParamId>,
    /// `[d, d]` mixer applied before the classifier when Match is on.
    pub mixer: Option<ParamId>,
}

impl DialogHead {
    pub fn register<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        d: usize,
        vocab: usize,
        slots: usize,
        use_match: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if slots == 0 {
            return Err(QrnError::Config("dialog head needs at least one slot".into()));
        }
        if use_match && d <= 2 {
            return Err(QrnError::Config("Match features need hidden_size > 2".into()));
        }
        let prev_embed = store.add(Parameter::new("dialog.prev_embed", ParamKind::Weight, normal_init(d, vocab, d, rng)))?;
        let width = if use_match { d - 2 } else { d };
        let classifiers = (0..slots)
            .map(|s| {
                store.add(Parameter::new(
                    format!("dialog.w.{s}"),
                    ParamKind::Weight,
                    normal_init(vocab, width, d, rng),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let mixer = if use_match {
            Some(store.add(Parameter::new("dialog.mixer", ParamKind::Weight, normal_init(d, d, d, rng)))?)
        } else {
            None
        };
        Ok(DialogHead {
            slots,
            prev_embed,
            classifiers,
            mixer,
        })
    }

    pub fn uses_match(&self) -> bool {
        self.mixer.is_some()
    }

    /// Response tokens padded with NIL to the slot count.
    pub fn pad<'a>(&self, tokens: &'a [usize]) -> Result<impl Iterator<Item = usize> + 'a> {
        if tokens.len() > self.slots {
            return Err(QrnError::Input(format!(
                "response of {} words exceeds the {} output slots",
                tokens.len(),
                self.slots
            )));
        }
        Ok(tokens.iter().copied().chain(std::iter::repeat(NIL_ID)).take(self.slots))
    }

    fn check_match<F: Scalar>(&self, store: &ParamStore<F>, m: Option<&Tensor<F>>) -> Result<()> {
        let vocab = store.get(self.prev_embed).value.cols();
        match (self.uses_match(), m) {
            (true, Some(m)) if m.shape() == [vocab, 2] => Ok(()),
            (true, Some(m)) => Err(QrnError::dim("dialog match", m.shape(), &[vocab, 2])),
            (true, None) => Err(QrnError::Contract("Match head needs match features".into())),
            (false, _) => Ok(()),
        }
    }

    /// Teacher-forced response loss `−Σ_s log p_s(w_s | ŷ, w_{s−1})`.
    pub fn loss<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        y_hat: Var,
        response: &[usize],
        m: Option<&Tensor<F>>,
    ) -> Result<Var> {
        self.check_match(store, m)?;
        let embed = tape.param(store, self.prev_embed);
        let mixer = self.mixer.map(|id| tape.param(store, id));
        let m = m.map(|m| tape.constant(m.clone()));
        let mut prev = NIL_ID;
        let mut terms = Vec::with_capacity(self.slots);
        for (s, word) in self.pad(response)?.enumerate() {
            let e = tape.col(embed, prev)?;
            let e = tape.transpose(e)?;
            let mut u = tape.add(y_hat, e)?;
            if let Some(mix) = mixer {
                u = tape.matmul_t(u, mix)?;
            }
            let mut w = tape.param(store, self.classifiers[s]);
            if let Some(m) = m {
                w = tape.concat_cols(&[w, m])?;
            }
            let logits = tape.matmul_t(u, w)?;
            let logp = tape.log_softmax(logits)?;
            terms.push(tape.pick(logp, 0, word)?);
            prev = word;
        }
        let stacked = tape.concat_cols(&terms)?;
        let total = tape.sum(stacked);
        Ok(tape.scale(total, F::from_f64(-1.0)))
    }

    /// Log-probabilities of slot `s` given the previous word.
    pub fn slot_log_probs<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        y_hat: &[F],
        s: usize,
        prev: usize,
        m: Option<&Tensor<F>>,
    ) -> Vec<F> {
        let e = &store.get(self.prev_embed).value;
        let mut u: Vec<F> = y_hat.iter().enumerate().map(|(k, &y)| y + e.at(k, prev)).collect();
        if let Some(mix) = self.mixer {
            u = matvec(&store.get(mix).value, &u);
        }
        let w = &store.get(self.classifiers[s]).value;
        let width = w.cols();
        let mut logits = matvec(w, &u[..width]);
        if let Some(m) = m {
            for (r, l) in logits.iter_mut().enumerate() {
                *l = *l + m.at(r, 0) * u[width] + m.at(r, 1) * u[width + 1];
            }
        }
        log_softmax_in_place(&mut logits);
        logits
    }

    /// Sum of slot log-probabilities of each candidate.
    pub fn score_candidates<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        y_hat: &Tensor<F>,
        candidates: &[Vec<usize>],
        m: Option<&Tensor<F>>,
    ) -> Result<Vec<F>> {
        check_row("dialog_predict", y_hat, store.get(self.prev_embed).value.rows())?;
        self.check_match(store, m)?;
        let mut cache: HashMap<(usize, usize), Vec<F>> = HashMap::new();
        candidates
            .iter()
            .map(|c| {
                let mut prev = NIL_ID;
                let mut score = F::zero();
                for (s, word) in self.pad(c)?.enumerate() {
                    let logp = cache
                        .entry((s, prev))
                        .or_insert_with(|| self.slot_log_probs(store, y_hat.data(), s, prev, m));
                    score = score + logp[word];
                    prev = word;
                }
                Ok(score)
            })
            .collect()
    }
}

/// Index of the best-scoring candidate; ties go to the lowest index.
pub fn dialog_predict<F: Scalar>(
    store: &ParamStore<F>,
    head: &DialogHead,
    y_hat: &Tensor<F>,
    candidates: &[Vec<usize>],
    m: Option<&Tensor<F>>,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(QrnError::Input("no response candidates to choose from".into()));
    }
    Ok(argmax(&head.score_candidates(store, y_hat, candidates, m)?))
}

/// Affine map from a `d`-vector to word logits, trained to reconstruct the
/// question's words from its encoding; also decodes intermediate queries.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryDecoder {
    /// `[V, d]`
    pub w: ParamId,
    /// `[1, V]`
    pub b: ParamId,
    pub weight: f64,
    /// Set once the decoder has been trained alongside the model.
    pub trained: bool,
}

impl QueryDecoder {
    pub fn register<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        d: usize,
        vocab: usize,
        weight: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(Parameter::new("decoder.w", ParamKind::Weight, normal_init(vocab, d, d, rng)))?;
        let b = store.add(Parameter::new("decoder.b", ParamKind::Bias, Tensor::zeros(&[1, vocab])))?;
        Ok(QueryDecoder {
            w,
            b,
            weight,
            trained: false,
        })
    }

    /// `weight · Σ_{w ∈ question} −log softmax(W q + b)[w]`.
    pub fn loss<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, q: Var, question: &[usize]) -> Result<Var> {
        if question.is_empty() {
            return Err(QrnError::Input("cannot reconstruct an empty question".into()));
        }
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let logits = tape.matmul_t(q, w)?;
        let logits = tape.add(logits, b)?;
        let logp = tape.log_softmax(logits)?;
        let picks = question
            .iter()
            .map(|&t| tape.pick(logp, 0, t))
            .collect::<Result<Vec<_>>>()?;
        let stacked = tape.concat_cols(&picks)?;
        let total = tape.sum(stacked);
        Ok(tape.scale(total, F::from_f64(-self.weight)))
    }

    /// Word logits `W h + b`.
    pub fn logits<F: Scalar>(&self, store: &ParamStore<F>, h: &Tensor<F>) -> Result<Vec<F>> {
        let w = &store.get(self.w).value;
        check_row("decode_query", h, w.cols())?;
        let mut out = matvec(w, h.data());
        for (o, &b) in out.iter_mut().zip(store.get(self.b).value.data()) {
            *o = *o + b;
        }
        Ok(out)
    }
}

/// The `top_k` highest-logit word indices for a reduced query `h`, best
/// first; ties keep the lower index first.
pub fn decode_query<F: Scalar>(
    store: &ParamStore<F>,
    decoder: &QueryDecoder,
    h: &Tensor<F>,
    top_k: usize,
) -> Result<Vec<(usize, F)>> {
    if !decoder.trained {
        return Err(QrnError::Usage(
            "the query decoder was not trained; enable the reconstruction loss when training".into(),
        ));
    }
    let logits = decoder.logits(store, h)?;
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal));
    Ok(order.into_iter().take(top_k).map(|i| (i, logits[i])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0f32; 4]), 0);
    }

    #[test]
    fn zero_qa_head_is_uniform() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = QaHead::register(&mut store, 3, 4, &mut rng).unwrap();
        store.get_mut(head.w_y).value = Tensor::zeros(&[4, 3]);
        let p = qa_predict(&store, &head, &Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(p, vec![0.25; 4]);
    }

    #[test]
    fn match_rows() {
        let ctx: HashSet<&str> = ["paris", "british", "madrid"].into_iter().collect();
        let q: HashSet<&str> = ["hello"].into_iter().collect();
        let cands = vec![
            vec!["paris"],
            vec!["rome"],
            vec!["api_call", "british", "madrid"],
        ];
        let m = compute_match(&cands, &ctx, &q);
        assert_eq!(m.rows, vec![[1, 0], [0, 0], [1, 0]]);
    }

    #[test]
    fn decoder_must_be_trained() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = QueryDecoder::register(&mut store, 2, 5, 1.0, &mut rng).unwrap();
        let h = Tensor::row(vec![0.0, 0.0]);
        assert!(matches!(decode_query(&store, &dec, &h, 3), Err(QrnError::Usage(_))));
    }
}
