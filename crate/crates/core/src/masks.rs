//! Dropout masks and per-window mask schedules.
//!
//! Two mask families exist. A [`StructuredMask`] drops whole feature
//! columns, identically for every row of the batch, which is what makes the
//! compacted kernels possible. An [`ElementMask`] drops individual entries
//! with independent Bernoulli draws, the conventional pattern used as the
//! baseline. Either family can be resampled at every time step or held
//! fixed across the window, giving the four [`MaskCase`]s.

use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{check_indices, Matrix};

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::InvalidRate(rate))
    }
}

/// Column-level dropout mask, uniform across the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuredMask {
    width: usize,
    dropped: Vec<usize>,
    kept: Vec<usize>,
    rate: f64,
    scale: f64,
}

impl StructuredMask {
    /// Drops exactly `round(rate * width)` distinct columns chosen uniformly
    /// without replacement.
    pub fn sample<R: Rng + ?Sized>(width: usize, rate: f64, rng: &mut R) -> Result<Self> {
        check_rate(rate)?;
        if width == 0 {
            return Err(Error::Config("mask width must be positive".into()));
        }
        let count = ((rate * width as f64).round() as usize).min(width);
        let mut dropped = index::sample(rng, width, count).into_vec();
        dropped.sort_unstable();
        Self::with_rate(width, dropped, rate)
    }

    /// A mask dropping the given columns; the rate is `|dropped| / width`.
    pub fn from_dropped(width: usize, dropped: Vec<usize>) -> Result<Self> {
        let rate = dropped.len() as f64 / width.max(1) as f64;
        Self::with_rate(width, dropped, rate)
    }

    /// A mask that keeps every column at scale 1.
    pub fn keep_all(width: usize) -> Self {
        StructuredMask {
            width,
            dropped: Vec::new(),
            kept: (0..width).collect(),
            rate: 0.0,
            scale: 1.0,
        }
    }

    fn with_rate(width: usize, dropped: Vec<usize>, rate: f64) -> Result<Self> {
        check_rate(rate)?;
        check_indices("structured mask", &dropped, width)?;
        let mut kept = Vec::with_capacity(width - dropped.len());
        let mut d = dropped.iter().peekable();
        for j in 0..width {
            if d.peek() == Some(&&j) {
                d.next();
            } else {
                kept.push(j);
            }
        }
        Ok(StructuredMask {
            width,
            dropped,
            kept,
            rate,
            scale: 1.0 / (1.0 - rate),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn drops_nothing(&self) -> bool {
        self.dropped.is_empty()
    }

    /// Zeroes the dropped columns of `x` and scales the kept ones.
    pub fn apply<T: Scalar>(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut out = x.clone();
        self.apply_in_place(&mut out)?;
        Ok(out)
    }

    pub fn apply_in_place<T: Scalar>(&self, x: &mut Matrix<T>) -> Result<()> {
        if x.cols() != self.width {
            return Err(Error::shape(
                "apply_structured",
                format!("{} columns, mask width {}", x.cols(), self.width),
            ));
        }
        let scale = T::of(self.scale);
        for r in 0..x.rows() {
            let row = x.row_mut(r);
            if self.scale != 1.0 {
                for &j in &self.kept {
                    row[j] = row[j] * scale;
                }
            }
            for &j in &self.dropped {
                row[j] = T::zero();
            }
        }
        Ok(())
    }
}

/// Element-level Bernoulli mask. The pattern is a pure function of the
/// seed and the shape it is applied to, so forward and backward passes see
/// the same pattern without storing it.
#[derive(Clone, Debug, PartialEq)]
pub struct ElementMask {
    rate: f64,
    seed: u64,
}

impl ElementMask {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        check_rate(rate)?;
        Ok(ElementMask { rate, seed })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn scale(&self) -> f64 {
        1.0 / (1.0 - self.rate)
    }

    /// Per-element multipliers: 0 for dropped entries, `1/(1-p)` for kept.
    pub fn factors<T: Scalar>(&self, rows: usize, cols: usize) -> Matrix<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let keep = T::of(self.scale());
        let data = (0..rows * cols)
            .map(|_| {
                if rng.gen::<f64>() < self.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        Matrix::from_vec(rows, cols, data).expect("length matches")
    }

    pub fn apply_in_place<T: Scalar>(&self, x: &mut Matrix<T>) {
        if self.rate == 0.0 {
            return;
        }
        let f = self.factors::<T>(x.rows(), x.cols());
        for (v, &m) in x.as_mut_slice().iter_mut().zip(f.as_slice()) {
            *v = *v * m;
        }
    }
}

/// Inverted dropout with independent per-element keep decisions.
pub fn apply_random<T: Scalar, R: Rng + ?Sized>(
    x: &Matrix<T>,
    rate: f64,
    rng: &mut R,
) -> Result<Matrix<T>> {
    let mut out = x.clone();
    ElementMask::new(rate, rng.gen())?.apply_in_place(&mut out);
    Ok(out)
}

/// A dropout mask of either family.
#[derive(Clone, Debug, PartialEq)]
pub enum Mask {
    Structured(StructuredMask),
    Elementwise(ElementMask),
}

impl Mask {
    pub fn as_structured(&self) -> Option<&StructuredMask> {
        match self {
            Mask::Structured(m) => Some(m),
            Mask::Elementwise(_) => None,
        }
    }

    pub fn rate(&self) -> f64 {
        match self {
            Mask::Structured(m) => m.rate(),
            Mask::Elementwise(m) => m.rate(),
        }
    }

    pub fn apply<T: Scalar>(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut out = x.clone();
        self.apply_in_place(&mut out)?;
        Ok(out)
    }

    /// Dropout is linear, so the same call also backpropagates a gradient.
    pub fn apply_in_place<T: Scalar>(&self, x: &mut Matrix<T>) -> Result<()> {
        match self {
            Mask::Structured(m) => m.apply_in_place(x),
            Mask::Elementwise(m) => {
                m.apply_in_place(x);
                Ok(())
            }
        }
    }
}

/// Applies an optional mask; `None` is the identity.
pub fn apply_opt<T: Scalar>(mask: Option<&Mask>, x: &Matrix<T>) -> Result<Matrix<T>> {
    match mask {
        Some(m) => m.apply(x),
        None => Ok(x.clone()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WithinBatch {
    Random,
    Structured,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcrossTime {
    Same,
    Different,
}

/// Position in the 2×2 dropout taxonomy: random or structured within the
/// batch, fixed or resampled across time steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskCase {
    pub within_batch: WithinBatch,
    pub across_time: AcrossTime,
}

impl MaskCase {
    /// Random within the batch, resampled per step.
    pub const I: MaskCase = MaskCase {
        within_batch: WithinBatch::Random,
        across_time: AcrossTime::Different,
    };
    /// Random within the batch, fixed across steps.
    pub const II: MaskCase = MaskCase {
        within_batch: WithinBatch::Random,
        across_time: AcrossTime::Same,
    };
    /// Structured within the batch, resampled per step.
    pub const III: MaskCase = MaskCase {
        within_batch: WithinBatch::Structured,
        across_time: AcrossTime::Different,
    };
    /// Structured within the batch, fixed across steps.
    pub const IV: MaskCase = MaskCase {
        within_batch: WithinBatch::Structured,
        across_time: AcrossTime::Same,
    };

    pub fn number(self) -> u8 {
        match (self.within_batch, self.across_time) {
            (WithinBatch::Random, AcrossTime::Different) => 1,
            (WithinBatch::Random, AcrossTime::Same) => 2,
            (WithinBatch::Structured, AcrossTime::Different) => 3,
            (WithinBatch::Structured, AcrossTime::Same) => 4,
        }
    }

    pub fn is_structured(self) -> bool {
        self.within_batch == WithinBatch::Structured
    }
}

/// Dimensions a schedule is built for. Layer 0's non-recurrent input has
/// `input_width` columns (the embedding width); every other mask is
/// `hidden` wide.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScheduleShape {
    pub layers: usize,
    pub steps: usize,
    pub input_width: usize,
    pub hidden: usize,
}

type MaskGrid = Vec<Vec<Option<Arc<Mask>>>>;

/// Every mask used during one truncated-BPTT window, indexed `[layer][step]`.
///
/// Non-recurrent masks act on each layer's input, recurrent masks on the
/// previous hidden state, and head masks on the top layer's output before
/// the projection. A missing mask means no dropout at that site.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSchedule {
    case: MaskCase,
    shape: ScheduleShape,
    nr: MaskGrid,
    rh: MaskGrid,
    head: Vec<Option<Arc<Mask>>>,
    seed: u64,
}

/// Stream ids: layer `l` non-recurrent is `2l`, recurrent `2l + 1`, and the
/// head mask uses `2L`.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sample_track(
    case: MaskCase,
    steps: usize,
    width: usize,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Option<Arc<Mask>>>> {
    let draw = |rng: &mut ChaCha8Rng| -> Result<Arc<Mask>> {
        Ok(Arc::new(match case.within_batch {
            WithinBatch::Structured => Mask::Structured(StructuredMask::sample(width, rate, rng)?),
            WithinBatch::Random => Mask::Elementwise(ElementMask::new(rate, rng.gen())?),
        }))
    };
    match case.across_time {
        AcrossTime::Same => {
            let m = draw(rng)?;
            Ok(vec![Some(m); steps])
        }
        AcrossTime::Different => (0..steps).map(|_| draw(rng).map(Some)).collect(),
    }
}

impl MaskSchedule {
    /// Samples a schedule. Recurrent masks exist iff `rh_rate` is given.
    pub fn build(
        case: MaskCase,
        shape: ScheduleShape,
        nr_rate: f64,
        rh_rate: Option<f64>,
        seed: u64,
    ) -> Result<Self> {
        let ScheduleShape {
            layers,
            steps,
            input_width,
            hidden,
        } = shape;
        if layers == 0 || steps == 0 || input_width == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "schedule dimensions must be positive: {shape:?}"
            )));
        }
        check_rate(nr_rate)?;
        if let Some(p) = rh_rate {
            check_rate(p)?;
        }
        let mut nr = Vec::with_capacity(layers);
        let mut rh = Vec::with_capacity(layers);
        for l in 0..layers {
            let width = if l == 0 { input_width } else { hidden };
            let mut rng = stream_rng(seed, 2 * l as u64);
            nr.push(sample_track(case, steps, width, nr_rate, &mut rng)?);
            rh.push(match rh_rate {
                Some(p) => {
                    let mut rng = stream_rng(seed, 2 * l as u64 + 1);
                    sample_track(case, steps, hidden, p, &mut rng)?
                }
                None => vec![None; steps],
            });
        }
        let mut rng = stream_rng(seed, 2 * layers as u64);
        let head = sample_track(case, steps, hidden, nr_rate, &mut rng)?;
        Ok(MaskSchedule {
            case,
            shape,
            nr,
            rh,
            head,
            seed,
        })
    }

    /// A schedule with no dropout anywhere, used for evaluation.
    pub fn disabled(shape: ScheduleShape) -> Self {
        MaskSchedule {
            case: MaskCase::III,
            shape,
            nr: vec![vec![None; shape.steps]; shape.layers],
            rh: vec![vec![None; shape.steps]; shape.layers],
            head: vec![None; shape.steps],
            seed: 0,
        }
    }

    pub fn case(&self) -> MaskCase {
        self.case
    }

    pub fn shape(&self) -> ScheduleShape {
        self.shape
    }

    pub fn layers(&self) -> usize {
        self.shape.layers
    }

    pub fn steps(&self) -> usize {
        self.shape.steps
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn has_recurrent(&self) -> bool {
        self.rh.iter().flatten().any(Option::is_some)
    }

    pub fn nr(&self, layer: usize, step: usize) -> Option<&Arc<Mask>> {
        self.nr[layer][step].as_ref()
    }

    pub fn rh(&self, layer: usize, step: usize) -> Option<&Arc<Mask>> {
        self.rh[layer][step].as_ref()
    }

    pub fn head(&self, step: usize) -> Option<&Arc<Mask>> {
        self.head[step].as_ref()
    }
}
