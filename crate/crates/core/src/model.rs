//! A complete QRN model: embedding, recurrent stack and output head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{stack_forward, GateTrace, QrnConfig, QrnParams, ScanMode, StackOutput};
use crate::encoding::{IndexedExample, NIL_ID, PAD_ID};
use crate::error::{QrnError, Result};
use crate::heads::{argmax, normal_init, vocabulary_match, DialogHead, QaHead, QueryDecoder};
use crate::param::{ParamId, ParamKind, ParamStore, Parameter};
use crate::tape::{log_softmax_in_place, Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Qa,
    Dialog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub qrn: QrnConfig,
    pub task: TaskKind,
    pub vocab_size: usize,
    /// Response word slots of the dialog head.
    pub slots: usize,
    pub use_match: bool,
    /// Adds the question-reconstruction loss through the query decoder.
    pub reconstruction: bool,
    pub reconstruction_weight: f64,
}

impl ModelConfig {
    pub fn qa(qrn: QrnConfig, vocab_size: usize) -> Self {
        ModelConfig {
            qrn,
            task: TaskKind::Qa,
            vocab_size,
            slots: 0,
            use_match: false,
            reconstruction: false,
            reconstruction_weight: 1.0,
        }
    }

    pub fn dialog(qrn: QrnConfig, vocab_size: usize, slots: usize) -> Self {
        ModelConfig {
            task: TaskKind::Dialog,
            slots,
            ..ModelConfig::qa(qrn, vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.qrn.validate()?;
        if self.vocab_size <= NIL_ID {
            return Err(QrnError::Config("vocabulary has no words beyond the reserved tokens".into()));
        }
        if self.task == TaskKind::Dialog && self.slots == 0 {
            return Err(QrnError::Config("dialog model needs at least one output slot".into()));
        }
        if self.use_match && self.task != TaskKind::Dialog {
            return Err(QrnError::Config("Match features apply to the dialog head only".into()));
        }
        if !(self.reconstruction_weight.is_finite() && self.reconstruction_weight >= 0.0) {
            return Err(QrnError::Config("reconstruction_weight must be a non-negative number".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Qa(QaHead),
    Dialog(DialogHead),
}

#[derive(Clone, Debug)]
pub struct QrnModel<F> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    /// `[d, V]`; PAD and NIL columns are pinned at zero.
    pub embedding: ParamId,
    pub units: Vec<QrnParams>,
    pub head: Head,
    pub decoder: Option<QueryDecoder>,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub stack: StackOutput,
    /// `[1, d]` question encoding.
    pub q: Var,
    /// Answer (or response) cross-entropy.
    pub task_loss: Var,
    /// Task loss plus the weighted reconstruction loss, if enabled.
    pub loss: Var,
    /// `[1, V]` answer logits (QA only).
    pub logits: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<F> {
    /// Answer token (QA) or candidate position (dialog).
    pub index: usize,
    pub correct: bool,
    /// Per-example training loss, without weight decay.
    pub loss: F,
}

impl<F: Scalar> QrnModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, v) = (config.qrn.hidden_size, config.vocab_size);

        let mut a = normal_init::<F, _>(d, v, d, &mut rng);
        for k in 0..d {
            a.set(k, PAD_ID, F::zero());
            a.set(k, NIL_ID, F::zero());
        }
        let mut emb = Parameter::new("embedding", ParamKind::Embedding, a);
        emb.pinned_cols = vec![PAD_ID, NIL_ID];
        let embedding = store.add(emb)?;

        let units = (0..config.qrn.param_sets())
            .map(|k| QrnParams::register(&mut store, &config.qrn, &format!("qrn{k}"), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = match config.task {
            TaskKind::Qa => Head::Qa(QaHead::register(&mut store, d, v, &mut rng)?),
            TaskKind::Dialog => Head::Dialog(DialogHead::register(
                &mut store,
                d,
                v,
                config.slots,
                config.use_match,
                &mut rng,
            )?),
        };
        let decoder = if config.reconstruction {
            Some(QueryDecoder::register(&mut store, d, v, config.reconstruction_weight, &mut rng)?)
        } else {
            None
        };
        Ok(QrnModel {
            config,
            store,
            embedding,
            units,
            head,
            decoder,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.config.qrn.hidden_size
    }

    fn match_features(&self, ex: &IndexedExample) -> Option<Tensor<F>> {
        self.config
            .use_match
            .then(|| vocabulary_match(self.config.vocab_size, &ex.sentences, &ex.question).to_tensor())
    }

    /// Builds the per-example loss on `tape`.
    pub fn forward(&self, tape: &mut Tape<F>, ex: &IndexedExample, mode: ScanMode) -> Result<Forward> {
        let table = tape.param(&self.store, self.embedding);
        let x = tape.position_embed(table, &ex.sentences)?;
        let q = tape.position_embed(table, std::slice::from_ref(&ex.question))?;
        let bound: Vec<_> = self.units.iter().map(|u| u.bind(tape, &self.store)).collect();
        let stack = stack_forward(tape, &self.config.qrn, &bound, x, q, mode)?;

        let (task_loss, logits) = match &self.head {
            Head::Qa(head) => {
                if ex.is_dialog() {
                    return Err(QrnError::Input("dialog example given to a QA model".into()));
                }
                let logits = head.logits(tape, &self.store, stack.y_hat)?;
                let logp = tape.log_softmax(logits)?;
                if ex.answer >= self.config.vocab_size {
                    return Err(QrnError::Input(format!("answer index {} out of range", ex.answer)));
                }
                let picked = tape.pick(logp, 0, ex.answer)?;
                (tape.scale(picked, F::from_f64(-1.0)), Some(logits))
            }
            Head::Dialog(head) => {
                if !ex.is_dialog() {
                    return Err(QrnError::Input("QA example given to a dialog model".into()));
                }
                let m = self.match_features(ex);
                (head.loss(tape, &self.store, stack.y_hat, &ex.answer_tokens, m.as_ref())?, None)
            }
        };
        let loss = match &self.decoder {
            Some(dec) => {
                let rec = dec.loss(tape, &self.store, q, &ex.question)?;
                tape.add(task_loss, rec)?
            }
            None => task_loss,
        };
        Ok(Forward {
            stack,
            q,
            task_loss,
            loss,
            logits,
        })
    }

    /// Whether a parameter is subject to weight decay.
    pub fn decays(&self, id: ParamId, decay_biases: bool) -> bool {
        self.store.get(id).kind.is_decayed(decay_biases)
    }

    /// The same decay term built on the tape, for gradient checking.
    pub fn l2_on_tape(&self, tape: &mut Tape<F>, l2: f64, decay_biases: bool) -> Result<Option<Var>> {
        let mut total: Option<Var> = None;
        for id in self.store.ids() {
            if !self.decays(id, decay_biases) {
                continue;
            }
            let p = self.store.get(id);
            let mut w = tape.param(&self.store, id);
            if !p.pinned_cols.is_empty() {
                let mask = (0..p.value.len())
                    .map(|i| if p.is_pinned(i) { F::zero() } else { F::one() })
                    .collect();
                let mask = tape.constant(Tensor::new(p.value.shape().to_vec(), mask)?);
                w = tape.mul(w, mask)?;
            }
            let sq = tape.mul(w, w)?;
            let s = tape.sum(sq);
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
        Ok(total.map(|t| tape.scale(t, F::from_f64(l2))))
    }

    /// Per-example loss plus weight decay, all on the tape.
    pub fn objective(
        &self,
        tape: &mut Tape<F>,
        ex: &IndexedExample,
        mode: ScanMode,
        l2: f64,
        decay_biases: bool,
    ) -> Result<Var> {
        let fwd = self.forward(tape, ex, mode)?;
        match self.l2_on_tape(tape, l2, decay_biases)? {
            Some(decay) => tape.add(fwd.loss, decay),
            None => Ok(fwd.loss),
        }
    }

    fn prediction_from(&self, tape: &Tape<F>, fwd: &Forward, ex: &IndexedExample) -> Result<Prediction<F>> {
        let loss = tape.value(fwd.loss).item();
        Ok(match &self.head {
            Head::Qa(_) => {
                let logits = tape.value(fwd.logits.expect("QA forward has logits"));
                let index = argmax(logits.data());
                Prediction {
                    index,
                    correct: index == ex.answer,
                    loss,
                }
            }
            Head::Dialog(head) => {
                let candidates = ex.candidates.as_ref().expect("dialog example has candidates");
                let m = self.match_features(ex);
                let y_hat = tape.value(fwd.stack.y_hat);
                let index = crate::heads::dialog_predict(&self.store, head, y_hat, candidates, m.as_ref())?;
                Prediction {
                    index,
                    // a gold response missing from the candidates is always an error
                    correct: ex.gold_candidate == Some(index),
                    loss,
                }
            }
        })
    }

    pub fn predict(&self, ex: &IndexedExample, mode: ScanMode) -> Result<Prediction<F>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, ex, mode)?;
        self.prediction_from(&tape, &fwd, ex)
    }

    /// Prediction together with the gate activity of every layer.
    pub fn trace(&self, ex: &IndexedExample, mode: ScanMode) -> Result<(Prediction<F>, GateTrace)> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, ex, mode)?;
        let pred = self.prediction_from(&tape, &fwd, ex)?;
        Ok((pred, GateTrace::from_stack(&tape, &fwd.stack)))
    }

    /// QA answer distribution `softmax(W_y ŷ)` as log-probabilities.
    pub fn answer_log_probs(&self, ex: &IndexedExample, mode: ScanMode) -> Result<Vec<F>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, ex, mode)?;
        let logits = fwd
            .logits
            .ok_or_else(|| QrnError::Usage("answer distribution is only defined for QA models".into()))?;
        let mut row = tape.value(logits).data().to_vec();
        log_softmax_in_place(&mut row);
        Ok(row)
    }

    /// Question encoding `q` under the current embedding.
    pub fn question_vector(&self, ex: &IndexedExample) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let table = tape.param(&self.store, self.embedding);
        let q = tape.position_embed(table, std::slice::from_ref(&ex.question))?;
        Ok(tape.value(q).clone())
    }

    pub fn cast<G: Scalar>(&self) -> QrnModel<G> {
        QrnModel {
            config: self.config.clone(),
            store: self.store.cast(),
            embedding: self.embedding,
            units: self.units.clone(),
            head: self.head.clone(),
            decoder: self.decoder.clone(),
        }
    }
}
