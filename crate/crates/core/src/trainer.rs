//! Corpus ingestion, truncated-BPTT batching with carried state, clipped
//! SGD and the epoch loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::lstm::{Engine, ExecMode, LstmState};
use crate::masks::MaskSchedule;
use crate::model::{
    backward_window, forward_window, initial_state, loss_and_grad, perplexity, DropoutMode,
    ModelConfig, ModelGrads, ModelParams,
};
use crate::scalar::{Precision, Scalar};
use crate::tensor::{set_kernel_threads, Matrix};

/// Sub-seed offsets added to the run seed, one per randomness consumer.
pub mod seed_offset {
    pub const INIT: u64 = 1;
    pub const MASKS: u64 = 2;
    /// Reserved: batching is sequential, so data order consumes no randomness.
    pub const DATA: u64 = 3;
}

/// Byte-level token stream with a compact vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    /// Byte value of each token id, ascending.
    pub vocab: Vec<u8>,
    pub tokens: Vec<u32>,
}

impl Corpus {
    /// Maps the bytes present to ids `0..V` in ascending byte order.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut present = [false; 256];
        bytes.iter().for_each(|&b| present[b as usize] = true);
        let vocab: Vec<u8> = (0..=255u8).filter(|&b| present[b as usize]).collect();
        let mut id_of = [0u32; 256];
        for (i, &b) in vocab.iter().enumerate() {
            id_of[b as usize] = i as u32;
        }
        let tokens = bytes.iter().map(|&b| id_of[b as usize]).collect();
        Ok(Corpus { vocab, tokens })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<u8> {
        ids.iter().map(|&i| self.vocab[i as usize]).collect()
    }

    /// Contiguous train/valid/test cut by fraction.
    pub fn split(&self, fractions: [f64; 3]) -> Result<[&[u32]; 3]> {
        check_fractions(fractions)?;
        let n = self.tokens.len();
        let a = ((n as f64) * fractions[0]).floor() as usize;
        let b = (((n as f64) * (fractions[0] + fractions[1])).floor() as usize).clamp(a, n);
        Ok([&self.tokens[..a], &self.tokens[a..b], &self.tokens[b..]])
    }
}

fn check_fractions(f: [f64; 3]) -> Result<()> {
    if f.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got {f:?}"
        )));
    }
    Ok(())
}

/// Reads a UTF-8 text file and tokenizes it byte by byte.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let bytes = fs::read(path)?;
    std::str::from_utf8(&bytes)
        .map_err(|e| Error::Config(format!("{} is not UTF-8: {e}", path.display())))?;
    Corpus::from_bytes(&bytes)
}

/// One truncated-BPTT window: `target` is `input` shifted by one token.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub input: Matrix<u32>,
    pub target: Matrix<u32>,
}

/// Cuts the stream into `batch` contiguous lanes and walks them in windows
/// of `steps`; the trailing remainder is dropped.
pub fn make_batches(stream: &[u32], batch: usize, steps: usize) -> Result<Vec<Batch>> {
    if batch == 0 || steps == 0 {
        return Err(Error::Config(
            "batch size and unroll must be positive".into(),
        ));
    }
    if stream.len() < batch * (steps + 1) {
        return Err(Error::Config(format!(
            "stream of {} tokens is too short for batch {batch} x unroll {steps}",
            stream.len()
        )));
    }
    let lane = stream.len() / batch;
    let windows = (lane - 1) / steps;
    let mut out = Vec::with_capacity(windows);
    for w in 0..windows {
        let mut input = Vec::with_capacity(batch * steps);
        let mut target = Vec::with_capacity(batch * steps);
        for b in 0..batch {
            let start = b * lane + w * steps;
            input.extend_from_slice(&stream[start..start + steps]);
            target.extend_from_slice(&stream[start + 1..start + steps + 1]);
        }
        out.push(Batch {
            input: Matrix::from_vec(batch, steps, input)?,
            target: Matrix::from_vec(batch, steps, target)?,
        });
    }
    Ok(out)
}

/// Clipped SGD. Returns the gradient norm before clipping.
pub fn sgd_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelGrads<T>,
    lr: f64,
    clip_norm: f64,
) -> Result<f64> {
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm is {norm}")));
    }
    let scale = if clip_norm > 0.0 && norm > clip_norm {
        clip_norm / norm
    } else {
        1.0
    };
    let step = T::of(lr * scale);
    let gs = grads.slices();
    let ps = params.slices_mut();
    if gs.len() != ps.len() {
        return Err(Error::shape(
            "sgd_step",
            "parameter and gradient sets differ",
        ));
    }
    for (p, g) in ps.into_iter().zip(gs) {
        if p.len() != g.len() {
            return Err(Error::shape(
                "sgd_step",
                "parameter and gradient sizes differ",
            ));
        }
        for (p, &g) in p.iter_mut().zip(g) {
            *p = *p - step * g;
        }
    }
    Ok(norm)
}

/// Loss and gradients of one window, plus the state to carry forward.
pub struct StepResult<T> {
    pub loss: f64,
    pub grads: ModelGrads<T>,
    pub state: Vec<LstmState<T>>,
}

pub fn compute_gradients<T: Scalar>(
    engine: &mut Engine<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
    batch: &Batch,
    carried: &[LstmState<T>],
    schedule: &MaskSchedule,
) -> Result<StepResult<T>> {
    let out = forward_window(engine, params, config, &batch.input, carried, schedule)?;
    let (loss, d_logits) = loss_and_grad(&out.logits, &batch.target)?;
    let grads = backward_window(engine, params, &out.tape, &d_logits, schedule)?;
    Ok(StepResult {
        loss,
        grads,
        state: out.state,
    })
}

/// Mean loss and perplexity with dropout off, carrying state across the
/// whole stream.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    stream: &[u32],
    batch: usize,
    steps: usize,
) -> Result<(f64, f64)> {
    let batches = make_batches(stream, batch, steps)?;
    let schedule = MaskSchedule::disabled(config.schedule_shape(steps));
    let mut engine = Engine::new(ExecMode::Dense);
    let mut state = initial_state(config, batch);
    let mut total = 0.0;
    for b in &batches {
        let out = forward_window(&mut engine, params, config, &b.input, &state, &schedule)?;
        total += loss_and_grad(&out.logits, &b.target)?.0;
        state = out.state;
    }
    let loss = total / batches.len() as f64;
    Ok((loss, perplexity(loss)))
}

fn default_train_fraction() -> f64 {
    0.9
}
fn default_split_fraction() -> f64 {
    0.05
}
fn default_batch() -> usize {
    20
}
fn default_unroll() -> usize {
    35
}
fn default_epochs() -> usize {
    3
}
fn default_lr() -> f64 {
    1.0
}
fn default_lr_decay() -> f64 {
    0.8
}
fn default_decay_start() -> usize {
    2
}
fn default_clip() -> f64 {
    5.0
}
fn default_embed() -> usize {
    128
}
fn default_hidden() -> usize {
    128
}
fn default_layers() -> usize {
    2
}
fn default_mode() -> DropoutMode {
    DropoutMode::NrRhSt
}
fn default_dropout() -> f64 {
    0.5
}
fn default_init_range() -> f64 {
    0.05
}
fn default_threads() -> usize {
    1
}
fn default_kernels() -> KernelPath {
    KernelPath::Sparse
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

/// Whether training runs the compacted kernels or the dense reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelPath {
    Sparse,
    Dense,
}

impl From<KernelPath> for ExecMode {
    fn from(k: KernelPath) -> Self {
        match k {
            KernelPath::Sparse => ExecMode::Sparse,
            KernelPath::Dense => ExecMode::Dense,
        }
    }
}

/// Training run configuration, read from a flat JSON object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub corpus_path: PathBuf,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_split_fraction")]
    pub valid_fraction: f64,
    #[serde(default = "default_split_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_unroll")]
    pub unroll: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_decay_start")]
    pub lr_decay_start_epoch: usize,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_mode")]
    pub mode: DropoutMode,
    #[serde(default = "default_dropout")]
    pub dropout_nr: f64,
    #[serde(default)]
    pub dropout_rh: Option<f64>,
    #[serde(default = "default_init_range")]
    pub init_range: f64,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default = "default_kernels")]
    pub kernels: KernelPath,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl TrainConfig {
    /// Parses a config file; relative corpus paths resolve against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut config: TrainConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        if config.corpus_path.is_relative() {
            if let Some(dir) = path.parent() {
                config.corpus_path = dir.join(&config.corpus_path);
            }
        }
        Ok(config)
    }

    pub fn fractions(&self) -> [f64; 3] {
        [self.train_fraction, self.valid_fraction, self.test_fraction]
    }

    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig::new(
            vocab,
            self.embed_dim,
            self.hidden,
            self.layers,
            self.mode,
            self.dropout_nr,
            self.dropout_rh,
        )
    }

    pub fn validate(&self) -> Result<()> {
        check_fractions(self.fractions())?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be non-negative, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.unroll == 0 || self.threads == 0 {
            return Err(Error::Config(
                "batch_size, unroll and threads must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate for 1-based `epoch`: constant through
    /// `lr_decay_start_epoch`, then multiplied by `lr_decay` every epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = epoch.saturating_sub(self.lr_decay_start_epoch.max(1));
        self.lr * self.lr_decay.powi(decays as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_ppl: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: DropoutMode,
    pub precision: Precision,
    pub threads: usize,
    pub seed: u64,
    pub vocab: usize,
    pub epochs: Vec<EpochRecord>,
    pub test_loss: Option<f64>,
    pub test_perplexity: Option<f64>,
}

pub const EPOCHS_CSV_HEADER: &str = "epoch,train_loss,valid_loss,valid_ppl,lr,wall_seconds";

impl TrainReport {
    pub fn epochs_csv(&self) -> String {
        let mut s = String::from(EPOCHS_CSV_HEADER);
        s.push('\n');
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                e.epoch, e.train_loss, e.valid_loss, e.valid_ppl, e.lr, e.wall_seconds
            );
        }
        s
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir)?;
        fs::write(
            out_dir.join("report.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        fs::write(out_dir.join("epochs.csv"), self.epochs_csv())?;
        Ok(())
    }
}

/// Trains per `config`, calling `on_epoch` after each epoch, and writes
/// `report.json`, `epochs.csv` and `model.ckpt` into `config.out_dir`.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(TrainReport, ModelParams<T>)> {
    config.validate()?;
    if config.precision != T::PRECISION {
        return Err(Error::Config(format!(
            "config asks for {} but the run was instantiated for {}",
            config.precision,
            T::PRECISION
        )));
    }
    set_kernel_threads(config.threads);
    let corpus = load_corpus(&config.corpus_path)?;
    let [train_ids, valid_ids, test_ids] = corpus.split(config.fractions())?;
    let model = config.model_config(corpus.vocab_size());
    model.validate()?;
    let (b, t) = (config.batch_size, config.unroll);
    let batches = make_batches(train_ids, b, t)?;

    let mut params = ModelParams::<T>::init(
        &model,
        config.init_range,
        config.seed.wrapping_add(seed_offset::INIT),
    )?;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(seed_offset::MASKS));
    let mut engine = Engine::new(config.kernels.into());
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let lr = config.lr_at(epoch);
        let mut state = initial_state(&model, b);
        let mut total = 0.0;
        for batch in &batches {
            let schedule = model.sample_schedule(t, mask_rng.gen())?;
            let step = compute_gradients(&mut engine, &params, &model, batch, &state, &schedule)?;
            sgd_step(&mut params, &step.grads, lr, config.clip_norm)?;
            total += step.loss;
            state = step.state;
        }
        let (valid_loss, valid_ppl) = evaluate(&params, &model, valid_ids, b, t)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / batches.len() as f64,
            valid_loss,
            valid_ppl,
            lr,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        epochs.push(record);
    }

    let test = evaluate(&params, &model, test_ids, b, t).ok();
    let report = TrainReport {
        mode: config.mode,
        precision: config.precision,
        threads: config.threads,
        seed: config.seed,
        vocab: corpus.vocab_size(),
        epochs,
        test_loss: test.map(|x| x.0),
        test_perplexity: test.map(|x| x.1),
    };
    report.write(&config.out_dir)?;
    checkpoint::save(&params, &config.out_dir.join("model.ckpt"))?;
    Ok((report, params))
}
