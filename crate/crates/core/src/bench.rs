//! Phase-wise timing of dense against compacted GEMMs for one LSTM layer
//! (input width equal to the hidden size) plus an optional output head.
//!
//! Only the matrix products of each phase are timed, gathers and scatters
//! included. Operands are prepared up front, already masked, so both paths
//! time the same work apart from the compaction.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{dense_flops, SparsityKind};
use crate::lstm::{Engine, ExecMode, GATES};
use crate::masks::{apply_opt, Mask, MaskSchedule, ScheduleShape};
use crate::model::DropoutMode;
use crate::scalar::{Precision, Scalar};
use crate::tensor::{ew, set_kernel_threads, sigmoid, EwOp, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "FP")]
    Forward,
    #[serde(rename = "BP")]
    Backward,
    #[serde(rename = "WG")]
    WeightGrad,
    #[serde(rename = "overall")]
    Overall,
}

impl Phase {
    pub const TIMED: [Phase; 3] = [Phase::Forward, Phase::Backward, Phase::WeightGrad];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Forward => "FP",
            Phase::Backward => "BP",
            Phase::WeightGrad => "WG",
            Phase::Overall => "overall",
        }
    }

    fn kind(self) -> SparsityKind {
        match self {
            Phase::Forward | Phase::Overall => SparsityKind::LhsColumnSparse,
            Phase::Backward => SparsityKind::OutputColumnSparse,
            Phase::WeightGrad => SparsityKind::LhsRowSparse,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_vocab() -> Vec<usize> {
    vec![0]
}
fn default_repetitions() -> usize {
    5
}
fn default_warmup() -> usize {
    1
}
fn default_threads() -> usize {
    1
}
fn default_modes() -> Vec<DropoutMode> {
    DropoutMode::ALL.to_vec()
}
fn default_out() -> PathBuf {
    PathBuf::from("bench.csv")
}

/// Benchmark grid. Every combination of the list fields is measured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub hidden: Vec<usize>,
    pub batch: Vec<usize>,
    pub steps: Vec<usize>,
    /// Output-head widths; 0 benchmarks the LSTM layer alone.
    #[serde(default = "default_vocab")]
    pub vocab: Vec<usize>,
    pub rates: Vec<f64>,
    #[serde(default = "default_modes")]
    pub modes: Vec<DropoutMode>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub seed: u64,
    /// Also time bias additions, gate nonlinearities and their
    /// derivatives, for end-to-end rather than GEMM-only numbers.
    #[serde(default)]
    pub elementwise: bool,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

impl BenchConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 3 || self.warmup < 1 {
            return Err(Error::Config(format!(
                "need at least 3 repetitions and 1 warmup, got {} and {}",
                self.repetitions, self.warmup
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        let dims = [&self.hidden, &self.batch, &self.steps];
        if dims.iter().any(|d| d.contains(&0)) {
            return Err(Error::Config(
                "hidden, batch and steps must be positive".into(),
            ));
        }
        for &p in &self.rates {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidRate(p));
            }
        }
        Ok(())
    }
}

/// One point of the grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Workload {
    pub hidden: usize,
    pub batch: usize,
    pub steps: usize,
    pub vocab: usize,
    pub rate: f64,
    pub mode: DropoutMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub phase: Phase,
    pub mode: DropoutMode,
    pub hidden: usize,
    pub batch: usize,
    pub steps: usize,
    pub vocab: usize,
    pub rate: f64,
    pub wall_ns_dense: u64,
    pub wall_ns_sparse: u64,
    pub speedup: f64,
    pub flops_dense: u64,
    pub flops_sparse: u64,
    pub threads: usize,
}

pub const CSV_HEADER: &str =
    "phase,mode,H,B,T,p,wall_ns_dense,wall_ns_sparse,speedup,flops_dense,flops_sparse,threads";

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{:.4},{},{},{}",
            r.phase,
            r.mode,
            r.hidden,
            r.batch,
            r.steps,
            r.rate,
            r.wall_ns_dense,
            r.wall_ns_sparse,
            r.speedup,
            r.flops_dense,
            r.flops_sparse,
            r.threads
        );
    }
    s
}

/// One GEMM site: activations, their mask, the weight and the upstream
/// gradient it multiplies in the backward phases.
struct Site<T> {
    name: &'static str,
    w: Matrix<T>,
    acts: Vec<Matrix<T>>,
    masks: Vec<Option<Arc<Mask>>>,
    grads: Vec<Matrix<T>>,
}

impl<T: Scalar> Site<T> {
    fn new(
        name: &'static str,
        rows: usize,
        cols: usize,
        batch: usize,
        masks: Vec<Option<Arc<Mask>>>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = Matrix::random_uniform(rows, cols, -0.1, 0.1, rng);
        let mut acts = Vec::with_capacity(masks.len());
        let mut grads = Vec::with_capacity(masks.len());
        for m in &masks {
            let x = Matrix::random_uniform(batch, rows, -1.0, 1.0, rng);
            acts.push(apply_opt(m.as_deref(), &x)?);
            grads.push(Matrix::random_uniform(batch, cols, -1.0, 1.0, rng));
        }
        Ok(Site {
            name,
            w,
            acts,
            masks,
            grads,
        })
    }

    fn kept(&self, t: usize) -> usize {
        match self.masks[t].as_deref().and_then(Mask::as_structured) {
            Some(s) => s.kept().len(),
            None => self.w.rows(),
        }
    }
}

/// Prepared operands for one workload.
pub struct Prepared<T> {
    workload: Workload,
    sites: Vec<Site<T>>,
    bias: Vec<T>,
    /// Stand-in gate activations for the element-wise backward work.
    gates: Vec<Matrix<T>>,
    elementwise: bool,
}

impl<T: Scalar> Prepared<T> {
    pub fn new(workload: Workload, seed: u64) -> Result<Self> {
        let Workload {
            hidden: h,
            batch: b,
            steps: t,
            vocab: v,
            rate,
            mode,
        } = workload;
        let shape = ScheduleShape {
            layers: 1,
            steps: t,
            input_width: h,
            hidden: h,
        };
        let rh_rate = mode.has_recurrent().then_some(rate);
        let schedule = MaskSchedule::build(mode.default_case(), shape, rate, rh_rate, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sites = vec![
            Site::new(
                "input",
                h,
                GATES * h,
                b,
                (0..t).map(|s| schedule.nr(0, s).cloned()).collect(),
                &mut rng,
            )?,
            Site::new(
                "recurrent",
                h,
                GATES * h,
                b,
                (0..t).map(|s| schedule.rh(0, s).cloned()).collect(),
                &mut rng,
            )?,
        ];
        if v > 0 {
            sites.push(Site::new(
                "head",
                h,
                v,
                b,
                (0..t).map(|s| schedule.head(s).cloned()).collect(),
                &mut rng,
            )?);
        }
        let bias = (0..GATES * h)
            .map(|i| T::of(0.01 * (i % 7) as f64))
            .collect();
        let gates = (0..t)
            .map(|_| Matrix::random_uniform(b, GATES * h, 0.0, 1.0, &mut rng))
            .collect();
        Ok(Prepared {
            workload,
            sites,
            bias,
            gates,
            elementwise: false,
        })
    }

    /// Includes the element-wise cell math in every timed run.
    pub fn with_elementwise(mut self, on: bool) -> Self {
        self.elementwise = on;
        self
    }

    pub fn workload(&self) -> Workload {
        self.workload
    }

    /// Dense and compacted FLOP counts of a phase over all steps, per GEMM
    /// site: `"input"` (W), `"recurrent"` (U) and, with a head, `"head"`.
    pub fn site_flops(&self, phase: Phase) -> Vec<(&'static str, u64, u64)> {
        let b = self.workload.batch;
        self.sites
            .iter()
            .map(|site| {
                let (h, m) = site.w.shape();
                let mut dense = 0;
                let mut sparse = 0;
                for t in 0..self.workload.steps {
                    dense += dense_flops(phase.kind(), b, h, m);
                    sparse += dense_flops(phase.kind(), b, site.kept(t), m);
                }
                (site.name, dense, sparse)
            })
            .collect()
    }

    /// Dense and compacted FLOP counts of a phase over all steps.
    pub fn flops(&self, phase: Phase) -> (u64, u64) {
        self.site_flops(phase)
            .iter()
            .fold((0, 0), |(d, s), &(_, sd, ss)| (d + sd, s + ss))
    }

    /// Runs every GEMM of `phase` once and returns the products.
    pub fn run(&self, engine: &mut Engine<T>, phase: Phase) -> Result<Vec<Matrix<T>>> {
        let b = self.workload.batch;
        let mut out = Vec::new();
        for site in &self.sites {
            let m = site.w.cols();
            match phase {
                Phase::Forward => {
                    for t in 0..self.workload.steps {
                        let mut y = Matrix::zeros(b, m);
                        engine.project(
                            &site.acts[t],
                            site.masks[t].as_ref(),
                            &site.w,
                            &mut y,
                            false,
                        )?;
                        out.push(y);
                    }
                }
                Phase::Backward => {
                    for t in 0..self.workload.steps {
                        out.push(engine.back_project(
                            &site.grads[t],
                            &site.w,
                            site.masks[t].as_ref(),
                        )?);
                    }
                }
                Phase::WeightGrad => {
                    let mut acc = Matrix::zeros(site.w.rows(), m);
                    for t in 0..self.workload.steps {
                        engine.weight_grad(
                            &site.acts[t],
                            site.masks[t].as_ref(),
                            &site.grads[t],
                            &mut acc,
                        )?;
                    }
                    out.push(acc);
                }
                Phase::Overall => {
                    return Err(Error::Config("overall is derived, not run".into()));
                }
            }
        }
        if self.elementwise {
            self.elementwise_work(phase, &mut out)?;
        }
        Ok(out)
    }

    fn elementwise_work(&self, phase: Phase, out: &mut [Matrix<T>]) -> Result<()> {
        let steps = self.workload.steps;
        let h = self.workload.hidden;
        for t in 0..steps {
            match phase {
                Phase::Forward => {
                    let (input, rest) = out.split_at_mut(steps);
                    let pre = &mut input[t];
                    pre.axpy(T::one(), &rest[t])?;
                    for r in 0..pre.rows() {
                        for (c, v) in pre.row_mut(r).iter_mut().enumerate() {
                            let z = *v + self.bias[c];
                            *v = if c < 3 * h { sigmoid(z) } else { z.tanh() };
                        }
                    }
                }
                Phase::Backward => {
                    let d = ew(EwOp::Hadamard, &self.sites[0].grads[t], &self.gates[t])?;
                    std::hint::black_box(d);
                }
                Phase::WeightGrad => {
                    std::hint::black_box(self.sites[0].grads[t].column_sums());
                }
                Phase::Overall => {}
            }
        }
        Ok(())
    }

    /// Checks that both paths agree before anything is timed.
    pub fn verify(&self, phase: Phase) -> Result<()> {
        let dense = self.run(&mut Engine::new(ExecMode::Dense), phase)?;
        let sparse = self.run(&mut Engine::new(ExecMode::Sparse), phase)?;
        for (d, s) in dense.iter().zip(&sparse) {
            let err = s.max_rel_diff(d);
            if !(err <= T::KERNEL_TOLERANCE) {
                return Err(Error::Verification(format!(
                    "{phase} results differ by {err:e} for {:?}",
                    self.workload
                )));
            }
        }
        Ok(())
    }
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2
    }
}

fn time_once<T: Scalar>(p: &Prepared<T>, engine: &mut Engine<T>, phase: Phase) -> Result<u64> {
    let start = Instant::now();
    let out = p.run(engine, phase)?;
    let ns = start.elapsed().as_nanos() as u64;
    drop(out);
    Ok(ns)
}

fn speedup(dense: u64, sparse: u64) -> f64 {
    dense as f64 / sparse.max(1) as f64
}

/// Median wall times of one phase over `reps` runs after `warmup` runs.
/// Dense and sparse runs alternate so drift affects both alike.
pub fn bench_prepared<T: Scalar>(
    p: &Prepared<T>,
    phase: Phase,
    reps: usize,
    warmup: usize,
) -> Result<BenchRecord> {
    p.verify(phase)?;
    let mut dense_engine = Engine::new(ExecMode::Dense);
    let mut sparse_engine = Engine::new(ExecMode::Sparse);
    let mut dense = Vec::with_capacity(reps);
    let mut sparse = Vec::with_capacity(reps);
    for i in 0..warmup + reps {
        let d = time_once(p, &mut dense_engine, phase)?;
        let s = time_once(p, &mut sparse_engine, phase)?;
        if i >= warmup {
            dense.push(d);
            sparse.push(s);
        }
    }
    let (wall_ns_dense, wall_ns_sparse) = (median(dense), median(sparse));
    let (flops_dense, flops_sparse) = p.flops(phase);
    let w = p.workload();
    Ok(BenchRecord {
        phase,
        mode: w.mode,
        hidden: w.hidden,
        batch: w.batch,
        steps: w.steps,
        vocab: w.vocab,
        rate: w.rate,
        wall_ns_dense,
        wall_ns_sparse,
        speedup: speedup(wall_ns_dense, wall_ns_sparse),
        flops_dense,
        flops_sparse,
        threads: crate::tensor::kernel_threads(),
    })
}

/// Benchmarks a single phase of a fresh workload.
pub fn bench_phase<T: Scalar>(
    phase: Phase,
    workload: Workload,
    reps: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchRecord> {
    bench_prepared(&Prepared::<T>::new(workload, seed)?, phase, reps, warmup)
}

/// Sums the three phase records of one workload.
pub fn overall(records: &[BenchRecord]) -> Result<BenchRecord> {
    let first = records
        .first()
        .ok_or_else(|| Error::Config("no phase records to combine".into()))?;
    let mut total = BenchRecord {
        phase: Phase::Overall,
        wall_ns_dense: 0,
        wall_ns_sparse: 0,
        flops_dense: 0,
        flops_sparse: 0,
        ..first.clone()
    };
    for r in records {
        total.wall_ns_dense += r.wall_ns_dense;
        total.wall_ns_sparse += r.wall_ns_sparse;
        total.flops_dense += r.flops_dense;
        total.flops_sparse += r.flops_sparse;
    }
    total.speedup = speedup(total.wall_ns_dense, total.wall_ns_sparse);
    Ok(total)
}

/// Runs the whole grid, calling `on_record` as results arrive.
pub fn bench_suite<T: Scalar>(
    config: &BenchConfig,
    mut on_record: impl FnMut(&BenchRecord),
) -> Result<Vec<BenchRecord>> {
    config.validate()?;
    set_kernel_threads(config.threads);
    let mut records = Vec::new();
    for &mode in &config.modes {
        for &hidden in &config.hidden {
            for &batch in &config.batch {
                for &steps in &config.steps {
                    for &vocab in &config.vocab {
                        for &rate in &config.rates {
                            let w = Workload {
                                hidden,
                                batch,
                                steps,
                                vocab,
                                rate,
                                mode,
                            };
                            let p = Prepared::<T>::new(w, config.seed)?
                                .with_elementwise(config.elementwise);
                            let mut phases = Vec::with_capacity(3);
                            for phase in Phase::TIMED {
                                let r =
                                    bench_prepared(&p, phase, config.repetitions, config.warmup)?;
                                on_record(&r);
                                phases.push(r);
                            }
                            let all = overall(&phases)?;
                            on_record(&all);
                            records.extend(phases);
                            records.push(all);
                        }
                    }
                }
            }
        }
    }
    Ok(records)
}

pub fn write_csv(records: &[BenchRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_csv(records))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn workload(mode: DropoutMode, rate: f64) -> Workload {
        Workload {
            hidden: 16,
            batch: 4,
            steps: 3,
            vocab: 10,
            rate,
            mode,
        }
    }

    #[test]
    fn flop_counts() {
        let p = Prepared::<f64>::new(workload(DropoutMode::NrRhSt, 0.5), 1).unwrap();
        let (dense, sparse) = p.flops(Phase::Forward);
        // two 16x64 gates GEMMs and one 16x10 head GEMM per step
        assert_eq!(dense, 3 * (2 * 2 * 4 * 16 * 64 + 2 * 4 * 16 * 10));
        assert_eq!(sparse, 3 * (2 * 2 * 4 * 8 * 64 + 2 * 4 * 8 * 10));

        let p = Prepared::<f64>::new(workload(DropoutMode::NrSt, 0.5), 1).unwrap();
        let (dense, sparse) = p.flops(Phase::WeightGrad);
        assert_eq!(dense - sparse, 3 * (2 * 8 * 4 * 64 + 2 * 8 * 4 * 10));

        let sites = p.site_flops(Phase::Backward);
        assert_eq!(sites[1].0, "recurrent");
        assert_eq!(sites[1].1, sites[1].2);
        assert_eq!(sites[0].1, 2 * sites[0].2);

        let p = Prepared::<f64>::new(workload(DropoutMode::BaselineNrRandom, 0.5), 1).unwrap();
        let (dense, sparse) = p.flops(Phase::Backward);
        assert_eq!(dense, sparse);
    }

    #[test]
    fn paths_agree_for_every_phase() {
        for mode in DropoutMode::ALL {
            for rate in [0.0, 0.25, 0.65] {
                let p = Prepared::<f32>::new(workload(mode, rate), 3).unwrap();
                for phase in Phase::TIMED {
                    p.verify(phase).unwrap();
                }
            }
        }
    }

    #[test]
    fn overall_sums_phases() {
        let p = Prepared::<f32>::new(workload(DropoutMode::NrRhSt, 0.5), 2).unwrap();
        let rs: Vec<_> = Phase::TIMED
            .iter()
            .map(|&ph| bench_prepared(&p, ph, 3, 1).unwrap())
            .collect();
        let all = overall(&rs).unwrap();
        assert_eq!(all.phase, Phase::Overall);
        assert_eq!(
            all.wall_ns_dense,
            rs.iter().map(|r| r.wall_ns_dense).sum::<u64>()
        );
        assert_eq!(
            all.flops_sparse,
            rs.iter().map(|r| r.flops_sparse).sum::<u64>()
        );
        assert!(Phase::Overall.as_str() == "overall");
    }

    #[test]
    fn csv_layout() {
        let p = Prepared::<f32>::new(workload(DropoutMode::NrSt, 0.25), 2).unwrap();
        let r = bench_prepared(&p, Phase::Forward, 3, 1).unwrap();
        let csv = to_csv(&[r]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields.len(), 12);
        assert_eq!(&fields[..6], &["FP", "nr-st", "16", "4", "3", "0.25"]);
    }

    #[test]
    fn config_validation() {
        let c: BenchConfig = serde_json::from_str(
            r#"{"hidden": [32], "batch": [4], "steps": [2], "rates": [0.5], "repetitions": 2}"#,
        )
        .unwrap();
        assert!(c.validate().is_err());
        let c: BenchConfig =
            serde_json::from_str(r#"{"hidden": [32], "batch": [4], "steps": [2], "rates": [0.5]}"#)
                .unwrap();
        c.validate().unwrap();
        assert_eq!(c.modes.len(), 3);
    }
}
