//! Self-checks: randomized kernel-versus-oracle trials and a full-network
//! finite-difference gradient check. Both run in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::kernels::{gemm_lhs_colsparse, gemm_lhs_rowsparse, gemm_output_colsparse, SparsityKind};
use crate::lstm::{Engine, ExecMode, LstmState};
use crate::masks::{MaskSchedule, StructuredMask};
use crate::model::{
    backward_window, forward_window, loss_and_grad, DropoutMode, ModelConfig, ModelParams,
};
use crate::tensor::Matrix;

pub const KERNEL_TOLERANCE: f64 = 1e-10;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
pub const GRADCHECK_EPS: f64 = 1e-5;
/// Denominator floor for relative errors, so gradients that are zero up
/// to rounding are judged on absolute error instead.
pub const GRADCHECK_FLOOR: f64 = 1e-5;

const RATES: [f64; 3] = [0.25, 0.5, 0.65];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelCheck {
    pub kind: String,
    pub hidden: usize,
    pub batch: usize,
    pub other: usize,
    pub rate: f64,
    pub rel_err: f64,
    pub exact_zeros: bool,
}

impl KernelCheck {
    pub fn passed(&self) -> bool {
        self.rel_err <= KERNEL_TOLERANCE && self.exact_zeros
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct KernelReport {
    pub checks: Vec<KernelCheck>,
}

impl KernelReport {
    pub fn passed(&self) -> usize {
        self.checks.iter().filter(|c| c.passed()).count()
    }

    pub fn failures(&self) -> impl Iterator<Item = &KernelCheck> {
        self.checks.iter().filter(|c| !c.passed())
    }

    pub fn all_passed(&self) -> bool {
        self.passed() == self.checks.len()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }
}

fn kind_name(kind: SparsityKind) -> &'static str {
    match kind {
        SparsityKind::LhsColumnSparse => "lhs-column-sparse",
        SparsityKind::OutputColumnSparse => "output-column-sparse",
        SparsityKind::LhsRowSparse => "lhs-row-sparse",
    }
}

fn check_kernel(kind: SparsityKind, rng: &mut ChaCha8Rng) -> Result<KernelCheck> {
    let h = rng.gen_range(8..=256);
    let b = rng.gen_range(1..=64);
    let m = rng.gen_range(1..=256);
    let rate = RATES[rng.gen_range(0..RATES.len())];
    let mask = StructuredMask::sample(h, rate, rng)?;
    let (got, oracle, exact_zeros) = match kind {
        SparsityKind::LhsColumnSparse => {
            let x = mask.apply(&Matrix::<f64>::random_uniform(b, h, -1.0, 1.0, rng))?;
            let w = Matrix::random_uniform(h, m, -1.0, 1.0, rng);
            let got = gemm_lhs_colsparse(&x, &mask, &w)?;
            (got, x.matmul_naive(&w)?, true)
        }
        SparsityKind::OutputColumnSparse => {
            let g = Matrix::<f64>::random_uniform(b, m, -1.0, 1.0, rng);
            let wt = Matrix::random_uniform(m, h, -1.0, 1.0, rng);
            let got = gemm_output_colsparse(&g, &wt, &mask)?;
            let oracle = mask.apply(&g.matmul_naive(&wt)?)?;
            let zeros = mask
                .dropped()
                .iter()
                .all(|&c| got.column(c).iter().all(|&v| v == 0.0));
            (got, oracle, zeros)
        }
        SparsityKind::LhsRowSparse => {
            let xt = mask
                .apply(&Matrix::<f64>::random_uniform(b, h, -1.0, 1.0, rng))?
                .transpose();
            let g = Matrix::random_uniform(b, m, -1.0, 1.0, rng);
            let got = gemm_lhs_rowsparse(&xt, &mask, &g)?;
            let oracle = xt.matmul_naive(&g)?;
            let zeros = mask
                .dropped()
                .iter()
                .all(|&r| got.row(r).iter().all(|&v| v == 0.0));
            (got, oracle, zeros)
        }
    };
    Ok(KernelCheck {
        kind: kind_name(kind).into(),
        hidden: h,
        batch: b,
        other: m,
        rate,
        rel_err: if got.shape() == oracle.shape() {
            got.max_rel_diff(&oracle)
        } else {
            f64::INFINITY
        },
        exact_zeros,
    })
}

/// Runs `trials` random instances of each of the three kernels against a
/// naive GEMM on mask-zeroed operands.
pub fn verify_kernels(trials: usize, seed: u64) -> Result<KernelReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = KernelReport::default();
    for _ in 0..trials {
        for kind in [
            SparsityKind::LhsColumnSparse,
            SparsityKind::OutputColumnSparse,
            SparsityKind::LhsRowSparse,
        ] {
            report.checks.push(check_kernel(kind, &mut rng)?);
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub hidden: usize,
    pub batch: usize,
    pub steps: usize,
    pub layers: usize,
    pub mode: DropoutMode,
    pub seed: u64,
    pub vocab: usize,
    pub embed_dim: usize,
    pub rate: f64,
    pub init_range: f64,
    pub eps: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            hidden: 8,
            batch: 4,
            steps: 5,
            layers: 2,
            mode: DropoutMode::NrRhSt,
            seed: 7,
            vocab: 12,
            embed_dim: 8,
            rate: 0.5,
            init_range: 0.5,
            eps: GRADCHECK_EPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub params_checked: usize,
    /// Parameter group and flat index of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOLERANCE
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Cross-entropy of every `(batch, step)` position.
fn position_losses(logits: &[Matrix<f64>], targets: &Matrix<u32>) -> Vec<f64> {
    let mut out = Vec::with_capacity(targets.rows() * targets.cols());
    for (t, l) in logits.iter().enumerate() {
        for b in 0..l.rows() {
            let row = l.row(b);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            out.push(lse - row[targets.get(b, t) as usize]);
        }
    }
    out
}

/// Compares every analytic parameter gradient of one window (mean
/// cross-entropy, fixed masks, random carried state) with central
/// differences.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let model = ModelConfig::new(
        cfg.vocab,
        cfg.embed_dim,
        cfg.hidden,
        cfg.layers,
        cfg.mode,
        cfg.rate,
        None,
    );
    model.validate()?;
    let mut params = ModelParams::<f64>::init(&model, cfg.init_range, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<u32> {
        (0..n).map(|_| rng.gen_range(0..cfg.vocab as u32)).collect()
    };
    let n = cfg.batch * cfg.steps;
    let tokens = Matrix::from_vec(cfg.batch, cfg.steps, draw(&mut rng, n))?;
    let targets = Matrix::from_vec(cfg.batch, cfg.steps, draw(&mut rng, n))?;
    let carried: Vec<LstmState<f64>> = (0..cfg.layers)
        .map(|_| LstmState {
            h: Matrix::random_uniform(cfg.batch, cfg.hidden, -0.5, 0.5, &mut rng),
            c: Matrix::random_uniform(cfg.batch, cfg.hidden, -0.5, 0.5, &mut rng),
        })
        .collect();
    let schedule: MaskSchedule = model.sample_schedule(cfg.steps, cfg.seed.wrapping_add(2))?;
    let mut engine = Engine::new(ExecMode::Sparse);

    let out = forward_window(&mut engine, &params, &model, &tokens, &carried, &schedule)?;
    let (_, d_logits) = loss_and_grad(&out.logits, &targets)?;
    let grads = backward_window(&mut engine, &params, &out.tape, &d_logits, &schedule)?;
    let analytic: Vec<Vec<f64>> = grads.slices().into_iter().map(<[f64]>::to_vec).collect();

    let mut losses_at = |p: &ModelParams<f64>| -> Result<Vec<f64>> {
        let out = forward_window(&mut engine, p, &model, &tokens, &carried, &schedule)?;
        Ok(position_losses(&out.logits, &targets))
    };
    let scale = 1.0 / (n as f64 * 2.0 * cfg.eps);
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        params_checked: 0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    for (g, group) in analytic.iter().enumerate() {
        for (i, &a) in group.iter().enumerate() {
            let orig = params.slices()[g][i];
            params.slices_mut()[g][i] = orig + cfg.eps;
            let plus = losses_at(&params)?;
            params.slices_mut()[g][i] = orig - cfg.eps;
            let minus = losses_at(&params)?;
            params.slices_mut()[g][i] = orig;
            // Differencing per position before summing keeps the rounding
            // of the large running total out of the quotient.
            let diff: f64 = plus.iter().zip(&minus).map(|(p, m)| p - m).sum();
            let numeric = diff * scale;
            let err = rel_err(a, numeric);
            report.params_checked += 1;
            if !(err <= report.max_rel_err) {
                report.max_rel_err = err;
                report.worst = (g, i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
