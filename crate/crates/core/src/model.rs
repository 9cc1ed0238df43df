//! Byte-level language model: embedding, stacked LSTM, dropout before the
//! output projection, softmax cross-entropy.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm::{Engine, GradientSet, LstmParams, LstmState, StepCache};
use crate::masks::{Mask, MaskCase, MaskSchedule, ScheduleShape, WithinBatch};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Where dropout is applied and which mask family it uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DropoutMode {
    /// Element-wise random masks on the non-recurrent inputs, resampled per step.
    #[serde(rename = "baseline-nr-random")]
    BaselineNrRandom,
    /// Structured masks on the non-recurrent inputs.
    #[serde(rename = "nr-st")]
    NrSt,
    /// Structured masks on both the non-recurrent and recurrent inputs.
    #[serde(rename = "nr-rh-st")]
    NrRhSt,
}

impl DropoutMode {
    pub const ALL: [DropoutMode; 3] = [
        DropoutMode::BaselineNrRandom,
        DropoutMode::NrSt,
        DropoutMode::NrRhSt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DropoutMode::BaselineNrRandom => "baseline-nr-random",
            DropoutMode::NrSt => "nr-st",
            DropoutMode::NrRhSt => "nr-rh-st",
        }
    }

    /// The mask case this mode trains with.
    pub fn default_case(self) -> MaskCase {
        match self {
            DropoutMode::BaselineNrRandom => MaskCase::I,
            DropoutMode::NrSt | DropoutMode::NrRhSt => MaskCase::III,
        }
    }

    pub fn has_recurrent(self) -> bool {
        self == DropoutMode::NrRhSt
    }
}

impl fmt::Display for DropoutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DropoutMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        DropoutMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                format!("unknown mode {s:?} (expected baseline-nr-random, nr-st or nr-rh-st)")
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout_nr: f64,
    pub dropout_rh: Option<f64>,
    pub mask_case: MaskCase,
    pub mode: DropoutMode,
}

impl ModelConfig {
    /// Builds a consistent config for `mode`. The recurrent rate is only
    /// kept in `nr-rh-st`, where it falls back to `dropout_nr` if absent.
    pub fn new(
        vocab: usize,
        embed_dim: usize,
        hidden: usize,
        layers: usize,
        mode: DropoutMode,
        dropout_nr: f64,
        dropout_rh: Option<f64>,
    ) -> Self {
        ModelConfig {
            vocab,
            embed_dim,
            hidden,
            layers,
            dropout_nr,
            dropout_rh: mode
                .has_recurrent()
                .then(|| dropout_rh.unwrap_or(dropout_nr)),
            mask_case: mode.default_case(),
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.embed_dim == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config(format!(
                "model dimensions must be positive: V={} E={} H={} L={}",
                self.vocab, self.embed_dim, self.hidden, self.layers
            )));
        }
        for p in std::iter::once(self.dropout_nr).chain(self.dropout_rh) {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidRate(p));
            }
        }
        let structured = self.mask_case.within_batch == WithinBatch::Structured;
        let consistent = match self.mode {
            DropoutMode::BaselineNrRandom => !structured && self.dropout_rh.is_none(),
            DropoutMode::NrSt => structured && self.dropout_rh.is_none(),
            DropoutMode::NrRhSt => structured && self.dropout_rh.is_some(),
        };
        if !consistent {
            return Err(Error::Config(format!(
                "mode {} is inconsistent with case {} and recurrent rate {:?}",
                self.mode,
                self.mask_case.number(),
                self.dropout_rh
            )));
        }
        Ok(())
    }

    pub fn schedule_shape(&self, steps: usize) -> ScheduleShape {
        ScheduleShape {
            layers: self.layers,
            steps,
            input_width: self.embed_dim,
            hidden: self.hidden,
        }
    }

    /// Samples the training masks for one window.
    pub fn sample_schedule(&self, steps: usize, seed: u64) -> Result<MaskSchedule> {
        MaskSchedule::build(
            self.mask_case,
            self.schedule_shape(steps),
            self.dropout_nr,
            self.dropout_rh,
            seed,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    /// `V×E`.
    pub embedding: Matrix<T>,
    pub lstm: Vec<LstmParams<T>>,
    /// `H×V`.
    pub head: Matrix<T>,
    pub head_bias: Vec<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Every entry i.i.d. uniform in `[-init_range, init_range]`.
    pub fn init(config: &ModelConfig, init_range: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if init_range.is_nan() || init_range <= 0.0 {
            return Err(Error::Config(format!(
                "init_range must be positive, got {init_range}"
            )));
        }
        let r = init_range;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = Matrix::random_uniform(config.vocab, config.embed_dim, -r, r, &mut rng);
        let lstm = (0..config.layers)
            .map(|l| {
                let input = if l == 0 {
                    config.embed_dim
                } else {
                    config.hidden
                };
                LstmParams::uniform(input, config.hidden, r, &mut rng)
            })
            .collect();
        let head = Matrix::random_uniform(config.hidden, config.vocab, -r, r, &mut rng);
        let head_bias = Matrix::<T>::random_uniform(1, config.vocab, -r, r, &mut rng).into_vec();
        Ok(ModelParams {
            embedding,
            lstm,
            head,
            head_bias,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        ModelParams {
            embedding: Matrix::zeros(config.vocab, config.embed_dim),
            lstm: (0..config.layers)
                .map(|l| {
                    let input = if l == 0 {
                        config.embed_dim
                    } else {
                        config.hidden
                    };
                    LstmParams::zeros(input, config.hidden)
                })
                .collect(),
            head: Matrix::zeros(config.hidden, config.vocab),
            head_bias: vec![T::zero(); config.vocab],
        }
    }

    pub fn vocab(&self) -> usize {
        self.embedding.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn hidden(&self) -> usize {
        self.head.rows()
    }

    pub fn layers(&self) -> usize {
        self.lstm.len()
    }

    /// Parameter arrays in canonical order: embedding, then `W, U, b` per
    /// layer, then head and head bias.
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = vec![self.embedding.as_slice()];
        for p in &self.lstm {
            out.extend([p.w.as_slice(), p.u.as_slice(), p.b.as_slice()]);
        }
        out.extend([self.head.as_slice(), self.head_bias.as_slice()]);
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = vec![self.embedding.as_mut_slice()];
        for p in &mut self.lstm {
            out.push(p.w.as_mut_slice());
            out.push(p.u.as_mut_slice());
            out.push(p.b.as_mut_slice());
        }
        out.push(self.head.as_mut_slice());
        out.push(self.head_bias.as_mut_slice());
        out
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let ok = self.vocab() == config.vocab
            && self.embed_dim() == config.embed_dim
            && self.hidden() == config.hidden
            && self.layers() == config.layers
            && self.head.cols() == config.vocab
            && self.head_bias.len() == config.vocab
            && self.lstm.iter().enumerate().all(|(l, p)| {
                let input = if l == 0 {
                    config.embed_dim
                } else {
                    config.hidden
                };
                p.validate().is_ok() && p.input_width() == input && p.hidden() == config.hidden
            });
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                "model params",
                "parameter shapes do not match the model config",
            ))
        }
    }
}

/// Gradients of every model parameter for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads<T> {
    pub layers: Vec<GradientSet<T>>,
    pub embedding: Matrix<T>,
    pub head: Matrix<T>,
    pub head_bias: Vec<T>,
}

impl<T: Scalar> ModelGrads<T> {
    /// Same order as [`ModelParams::slices`].
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = vec![self.embedding.as_slice()];
        for g in &self.layers {
            out.extend([g.dw.as_slice(), g.du.as_slice(), g.db.as_slice()]);
        }
        out.extend([self.head.as_slice(), self.head_bias.as_slice()]);
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = vec![self.embedding.as_mut_slice()];
        for g in &mut self.layers {
            out.push(g.dw.as_mut_slice());
            out.push(g.du.as_mut_slice());
            out.push(g.db.as_mut_slice());
        }
        out.push(self.head.as_mut_slice());
        out.push(self.head_bias.as_mut_slice());
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Everything the backward pass needs from a forward window.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    /// Per-layer caches indexed `[step][layer]`.
    pub steps: Vec<Vec<StepCache<T>>>,
    /// Top hidden state after the head dropout, per step.
    pub head_inputs: Vec<Matrix<T>>,
    pub head_masks: Vec<Option<Arc<Mask>>>,
    pub tokens: Matrix<u32>,
}

pub struct WindowOutput<T> {
    pub logits: Vec<Matrix<T>>,
    pub tape: Tape<T>,
    pub state: Vec<LstmState<T>>,
}

pub fn initial_state<T: Scalar>(config: &ModelConfig, batch: usize) -> Vec<LstmState<T>> {
    (0..config.layers)
        .map(|_| LstmState::zeros(batch, config.hidden))
        .collect()
}

/// Rows of the embedding table for column `t` of `tokens`.
fn embed<T: Scalar>(embedding: &Matrix<T>, tokens: &Matrix<u32>, t: usize) -> Result<Matrix<T>> {
    let mut x = Matrix::zeros(tokens.rows(), embedding.cols());
    for b in 0..tokens.rows() {
        let id = tokens.get(b, t);
        if id as usize >= embedding.rows() {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: embedding.rows(),
            });
        }
        x.row_mut(b).copy_from_slice(embedding.row(id as usize));
    }
    Ok(x)
}

/// Forward pass over one `B×T` window of token ids, starting from
/// `carried` state. Returns per-step logits, the tape and the final state.
pub fn forward_window<T: Scalar>(
    engine: &mut Engine<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
    tokens: &Matrix<u32>,
    carried: &[LstmState<T>],
    schedule: &MaskSchedule,
) -> Result<WindowOutput<T>> {
    params.validate(config)?;
    let (batch, steps) = tokens.shape();
    if carried.len() != config.layers
        || carried
            .iter()
            .any(|s| s.h.shape() != (batch, config.hidden) || s.c.shape() != (batch, config.hidden))
    {
        return Err(Error::shape(
            "forward_window",
            "carried state does not match batch and hidden sizes",
        ));
    }
    let inputs = (0..steps)
        .map(|t| embed(&params.embedding, tokens, t))
        .collect::<Result<Vec<_>>>()?;
    let (tops, tape, state) = engine.forward_stack(&params.lstm, &inputs, carried, schedule)?;

    let mut logits = Vec::with_capacity(steps);
    let mut head_inputs = Vec::with_capacity(steps);
    let mut head_masks = Vec::with_capacity(steps);
    for (t, h) in tops.into_iter().enumerate() {
        let mask = schedule.head(t);
        let hd = crate::masks::apply_opt(mask.map(|m| &**m), &h)?;
        let mut out = Matrix::zeros(batch, config.vocab);
        engine.project(&hd, mask, &params.head, &mut out, false)?;
        for r in 0..batch {
            for (v, &b) in out.row_mut(r).iter_mut().zip(&params.head_bias) {
                *v = *v + b;
            }
        }
        logits.push(out);
        head_inputs.push(hd);
        head_masks.push(mask.cloned());
    }
    Ok(WindowOutput {
        logits,
        tape: Tape {
            steps: tape,
            head_inputs,
            head_masks,
            tokens: tokens.clone(),
        },
        state,
    })
}

/// Row-wise softmax.
pub fn softmax<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / sum);
    }
    out
}

/// Mean cross-entropy (nats) over all `B·T` positions and its gradient
/// with respect to every step's logits.
pub fn loss_and_grad<T: Scalar>(
    logits: &[Matrix<T>],
    targets: &Matrix<u32>,
) -> Result<(f64, Vec<Matrix<T>>)> {
    let (batch, steps) = targets.shape();
    if logits.len() != steps || logits.iter().any(|l| l.rows() != batch) {
        return Err(Error::shape(
            "loss_and_grad",
            format!(
                "{} logit matrices for targets {:?}",
                logits.len(),
                targets.shape()
            ),
        ));
    }
    let n = (batch * steps) as f64;
    let inv_n = T::of(1.0 / n);
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(steps);
    for (t, l) in logits.iter().enumerate() {
        let mut p = softmax(l);
        for b in 0..batch {
            let y = targets.get(b, t) as usize;
            if y >= l.cols() {
                return Err(Error::TokenOutOfRange {
                    id: y as u32,
                    vocab: l.cols(),
                });
            }
            let row = l.row(b);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += (lse - row[y]).as_f64();
            let prow = p.row_mut(b);
            prow[y] = prow[y] - T::one();
            prow.iter_mut().for_each(|v| *v = *v * inv_n);
        }
        grads.push(p);
    }
    Ok((total / n, grads))
}

pub fn perplexity(loss_nats: f64) -> f64 {
    loss_nats.exp()
}

/// Gradients of all parameters from the per-step logit gradients.
pub fn backward_window<T: Scalar>(
    engine: &mut Engine<T>,
    params: &ModelParams<T>,
    tape: &Tape<T>,
    d_logits: &[Matrix<T>],
    schedule: &MaskSchedule,
) -> Result<ModelGrads<T>> {
    let steps = tape.steps.len();
    if d_logits.len() != steps || tape.head_inputs.len() != steps {
        return Err(Error::shape(
            "backward_window",
            format!(
                "{} logit gradients for a tape of {steps} steps",
                d_logits.len()
            ),
        ));
    }
    for (t, m) in tape.head_masks.iter().enumerate() {
        if m.as_ref() != schedule.head(t) {
            return Err(Error::Config(format!(
                "tape head mask at step {t} differs from the schedule"
            )));
        }
    }
    let mut head = Matrix::zeros(params.hidden(), params.vocab());
    let mut head_bias = vec![T::zero(); params.vocab()];
    let mut d_top = Vec::with_capacity(steps);
    for t in 0..steps {
        let mask = tape.head_masks[t].as_ref();
        engine.weight_grad(&tape.head_inputs[t], mask, &d_logits[t], &mut head)?;
        for (acc, s) in head_bias.iter_mut().zip(d_logits[t].column_sums()) {
            *acc = *acc + s;
        }
        d_top.push(engine.back_project(&d_logits[t], &params.head, mask)?);
    }
    let (layers, d_inputs) = engine.bptt(&params.lstm, &tape.steps, &d_top, schedule)?;

    let mut embedding = Matrix::zeros(params.vocab(), params.embed_dim());
    for (t, dx) in d_inputs.iter().enumerate() {
        for b in 0..tape.tokens.rows() {
            let id = tape.tokens.get(b, t) as usize;
            for (d, &s) in embedding.row_mut(id).iter_mut().zip(dx.row(b)) {
                *d = *d + s;
            }
        }
    }
    Ok(ModelGrads {
        layers,
        embedding,
        head,
        head_bias,
    })
}
