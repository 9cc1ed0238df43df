//! LSTM cell forward, backward through time and weight gradients.
//!
//! Gate weights are stacked column-wise in the fixed order `[i | f | o | g]`
//! so each direction of each step is a single `B×4H` GEMM:
//!
//! ```text
//! pre = drop_nr(x)·W + drop_rh(h_prev)·U + b
//! i, f, o = σ(pre_i), σ(pre_f), σ(pre_o);  g = tanh(pre_g)
//! c = f⊙c_prev + i⊙g;  h = o⊙tanh(c)
//! ```
//!
//! In [`ExecMode::Sparse`] every GEMM whose operand carries a structured
//! mask goes through the compacted kernels; [`ExecMode::Dense`] runs the
//! same math with plain GEMMs on the masked operands. The two must agree.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{
    gemm_lhs_colsparse_into, gemm_lhs_rowsparse_tn_add, gemm_output_colsparse_nt_into, Scratch,
};
use crate::masks::{apply_opt, Mask, MaskSchedule, StructuredMask};
use crate::scalar::Scalar;
use crate::tensor::{gemm, sigmoid, sigmoid_grad, tanh_grad, Matrix, Trans};

/// Number of stacked gates.
pub const GATES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExecMode {
    Dense,
    Sparse,
}

/// Weights of one LSTM layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<T> {
    /// Input-to-hidden, `input_width × 4H`.
    pub w: Matrix<T>,
    /// Hidden-to-hidden, `H × 4H`.
    pub u: Matrix<T>,
    /// Bias, length `4H`.
    pub b: Vec<T>,
}

impl<T: Scalar> LstmParams<T> {
    pub fn zeros(input_width: usize, hidden: usize) -> Self {
        LstmParams {
            w: Matrix::zeros(input_width, GATES * hidden),
            u: Matrix::zeros(hidden, GATES * hidden),
            b: vec![T::zero(); GATES * hidden],
        }
    }

    pub fn uniform<R: Rng + ?Sized>(
        input_width: usize,
        hidden: usize,
        range: f64,
        rng: &mut R,
    ) -> Self {
        let w = Matrix::random_uniform(input_width, GATES * hidden, -range, range, rng);
        let u = Matrix::random_uniform(hidden, GATES * hidden, -range, range, rng);
        let b = Matrix::<T>::random_uniform(1, GATES * hidden, -range, range, rng).into_vec();
        LstmParams { w, u, b }
    }

    pub fn input_width(&self) -> usize {
        self.w.rows()
    }

    pub fn hidden(&self) -> usize {
        self.u.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden();
        if self.u.cols() != GATES * h || self.w.cols() != GATES * h || self.b.len() != GATES * h {
            return Err(Error::shape(
                "lstm params",
                format!(
                    "W {:?}, U {:?}, b {} for hidden {h}",
                    self.w.shape(),
                    self.u.shape(),
                    self.b.len()
                ),
            ));
        }
        Ok(())
    }
}

/// Hidden and cell state of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<T> {
    pub h: Matrix<T>,
    pub c: Matrix<T>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        LstmState {
            h: Matrix::zeros(batch, hidden),
            c: Matrix::zeros(batch, hidden),
        }
    }
}

/// Tape record of one layer at one time step.
#[derive(Clone, Debug)]
pub struct StepCache<T> {
    pub x_dropped: Matrix<T>,
    pub h_prev_dropped: Matrix<T>,
    pub c_prev: Matrix<T>,
    /// Post-activation gates, `B×4H`, stacked `[i | f | o | g]`.
    pub gates: Matrix<T>,
    pub c_t: Matrix<T>,
    pub tanh_c_t: Matrix<T>,
    pub nr_mask: Option<Arc<Mask>>,
    pub rh_mask: Option<Arc<Mask>>,
}

impl<T: Scalar> StepCache<T> {
    pub fn hidden(&self) -> usize {
        self.c_t.cols()
    }

    /// One gate's activations as a `B×H` matrix; `k` indexes `[i, f, o, g]`.
    pub fn gate(&self, k: usize) -> Matrix<T> {
        let h = self.hidden();
        let cols: Vec<usize> = (k * h..(k + 1) * h).collect();
        self.gates
            .gather_columns(&cols)
            .expect("gate index in range")
    }
}

/// Gradients produced by one backward cell step.
#[derive(Clone, Debug)]
pub struct StepGradients<T> {
    /// Pre-activation gate gradients, `B×4H`.
    pub d_gates_pre: Matrix<T>,
    pub d_h_prev: Matrix<T>,
    pub d_c_prev: Matrix<T>,
    pub d_x: Matrix<T>,
}

/// Parameter gradients of one layer, summed over a window.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T> {
    pub dw: Matrix<T>,
    pub du: Matrix<T>,
    pub db: Vec<T>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn zeros_like(params: &LstmParams<T>) -> Self {
        GradientSet {
            dw: Matrix::zeros(params.w.rows(), params.w.cols()),
            du: Matrix::zeros(params.u.rows(), params.u.cols()),
            db: vec![T::zero(); params.b.len()],
        }
    }
}

/// Execution context: the dense/sparse switch plus scratch buffers reused
/// across steps.
#[derive(Debug)]
pub struct Engine<T> {
    mode: ExecMode,
    fp: Scratch<T>,
    bp: Scratch<T>,
    wg: Scratch<T>,
}

impl<T: Scalar> Engine<T> {
    pub fn new(mode: ExecMode) -> Self {
        Engine {
            mode,
            fp: Scratch::new(),
            bp: Scratch::new(),
            wg: Scratch::new(),
        }
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    fn compact<'a>(&self, mask: Option<&'a Arc<Mask>>) -> Option<&'a StructuredMask> {
        match self.mode {
            ExecMode::Sparse => mask.and_then(|m| m.as_structured()),
            ExecMode::Dense => None,
        }
    }

    /// `out (+)= xm · w`, compacted when `xm` carries a structured mask.
    pub(crate) fn project(
        &mut self,
        xm: &Matrix<T>,
        mask: Option<&Arc<Mask>>,
        w: &Matrix<T>,
        out: &mut Matrix<T>,
        accumulate: bool,
    ) -> Result<()> {
        let beta = if accumulate { T::one() } else { T::zero() };
        match self.compact(mask) {
            Some(s) => gemm_lhs_colsparse_into(xm, s, w, out, accumulate, &mut self.fp),
            None => gemm(T::one(), xm, Trans::No, w, Trans::No, beta, out),
        }
    }

    /// `mask(g · wᵀ)`, skipping masked output columns when possible.
    pub(crate) fn back_project(
        &mut self,
        g: &Matrix<T>,
        w: &Matrix<T>,
        mask: Option<&Arc<Mask>>,
    ) -> Result<Matrix<T>> {
        let mut out = Matrix::zeros(g.rows(), w.rows());
        match self.compact(mask) {
            Some(s) => gemm_output_colsparse_nt_into(g, w, s, &mut out, &mut self.bp)?,
            None => {
                gemm(T::one(), g, Trans::No, w, Trans::Yes, T::zero(), &mut out)?;
                if let Some(m) = mask {
                    m.apply_in_place(&mut out)?;
                }
            }
        }
        Ok(out)
    }

    /// `accum += xmᵀ · g`, skipping dropped rows when possible.
    pub(crate) fn weight_grad(
        &mut self,
        xm: &Matrix<T>,
        mask: Option<&Arc<Mask>>,
        g: &Matrix<T>,
        accum: &mut Matrix<T>,
    ) -> Result<()> {
        match self.compact(mask) {
            Some(s) => gemm_lhs_rowsparse_tn_add(xm, s, g, accum, &mut self.wg),
            None => gemm(T::one(), xm, Trans::Yes, g, Trans::No, T::one(), accum),
        }
    }

    /// One cell step. `h_t` and `c_t` are returned unmasked; dropout only
    /// ever touches the cell's inputs.
    pub fn step_forward(
        &mut self,
        params: &LstmParams<T>,
        x: &Matrix<T>,
        h_prev: &Matrix<T>,
        c_prev: &Matrix<T>,
        nr_mask: Option<&Arc<Mask>>,
        rh_mask: Option<&Arc<Mask>>,
    ) -> Result<(Matrix<T>, Matrix<T>, StepCache<T>)> {
        let hid = params.hidden();
        let batch = x.rows();
        if x.cols() != params.input_width()
            || h_prev.shape() != (batch, hid)
            || c_prev.shape() != (batch, hid)
        {
            return Err(Error::shape(
                "step_forward",
                format!(
                    "x {:?}, h_prev {:?}, c_prev {:?} for W {:?}, U {:?}",
                    x.shape(),
                    h_prev.shape(),
                    c_prev.shape(),
                    params.w.shape(),
                    params.u.shape()
                ),
            ));
        }
        let x_dropped = apply_opt(nr_mask.map(|m| &**m), x)?;
        let h_prev_dropped = apply_opt(rh_mask.map(|m| &**m), h_prev)?;

        let mut gates = Matrix::zeros(batch, GATES * hid);
        self.project(&x_dropped, nr_mask, &params.w, &mut gates, false)?;
        self.project(&h_prev_dropped, rh_mask, &params.u, &mut gates, true)?;

        let mut c_t = Matrix::zeros(batch, hid);
        let mut tanh_c_t = Matrix::zeros(batch, hid);
        let mut h_t = Matrix::zeros(batch, hid);
        for r in 0..batch {
            let row = gates.row_mut(r);
            for (v, &b) in row.iter_mut().zip(&params.b) {
                *v = *v + b;
            }
            let (ifo, g) = row.split_at_mut(3 * hid);
            ifo.iter_mut().for_each(|v| *v = sigmoid(*v));
            g.iter_mut().for_each(|v| *v = v.tanh());
            let row = gates.row(r);
            let cp = c_prev.row(r);
            for j in 0..hid {
                let (i, f, o, g) = (row[j], row[hid + j], row[2 * hid + j], row[3 * hid + j]);
                let c = f * cp[j] + i * g;
                let tc = c.tanh();
                c_t.set(r, j, c);
                tanh_c_t.set(r, j, tc);
                h_t.set(r, j, o * tc);
            }
        }
        let cache = StepCache {
            x_dropped,
            h_prev_dropped,
            c_prev: c_prev.clone(),
            gates,
            c_t: c_t.clone(),
            tanh_c_t,
            nr_mask: nr_mask.cloned(),
            rh_mask: rh_mask.cloned(),
        };
        Ok((h_t, c_t, cache))
    }

    /// Backward cell step. `d_h_total` is the full gradient arriving at
    /// `h_t`; `d_c_next` the cell-state gradient from step `t+1`.
    pub fn step_backward(
        &mut self,
        params: &LstmParams<T>,
        cache: &StepCache<T>,
        d_h_total: &Matrix<T>,
        d_c_next: &Matrix<T>,
    ) -> Result<StepGradients<T>> {
        let hid = params.hidden();
        let batch = cache.c_t.rows();
        if d_h_total.shape() != (batch, hid)
            || d_c_next.shape() != (batch, hid)
            || cache.gates.shape() != (batch, GATES * hid)
        {
            return Err(Error::shape(
                "step_backward",
                format!(
                    "d_h {:?}, d_c {:?}, cached gates {:?}, hidden {hid}",
                    d_h_total.shape(),
                    d_c_next.shape(),
                    cache.gates.shape()
                ),
            ));
        }
        let one = T::one();
        let mut d_gates_pre = Matrix::zeros(batch, GATES * hid);
        let mut d_c_prev = Matrix::zeros(batch, hid);
        for r in 0..batch {
            let gates = cache.gates.row(r);
            let tc = cache.tanh_c_t.row(r);
            let cp = cache.c_prev.row(r);
            let dh = d_h_total.row(r);
            let dcn = d_c_next.row(r);
            let dpre = d_gates_pre.row_mut(r);
            let mut dcp = vec![T::zero(); hid];
            for j in 0..hid {
                let (i, f, o, g) = (
                    gates[j],
                    gates[hid + j],
                    gates[2 * hid + j],
                    gates[3 * hid + j],
                );
                let d_o = dh[j] * tc[j];
                let d_c = dh[j] * o * (one - tc[j] * tc[j]) + dcn[j];
                let d_f = d_c * cp[j];
                let d_i = d_c * g;
                let d_g = d_c * i;
                dcp[j] = d_c * f;
                dpre[j] = sigmoid_grad(i, d_i);
                dpre[hid + j] = sigmoid_grad(f, d_f);
                dpre[2 * hid + j] = sigmoid_grad(o, d_o);
                dpre[3 * hid + j] = tanh_grad(g, d_g);
            }
            d_c_prev.row_mut(r).copy_from_slice(&dcp);
        }
        let d_h_prev = self.back_project(&d_gates_pre, &params.u, cache.rh_mask.as_ref())?;
        let d_x = self.back_project(&d_gates_pre, &params.w, cache.nr_mask.as_ref())?;
        Ok(StepGradients {
            d_gates_pre,
            d_h_prev,
            d_c_prev,
            d_x,
        })
    }

    /// Adds this step's weight and bias gradients into `accum`.
    pub fn step_weight_grads(
        &mut self,
        cache: &StepCache<T>,
        d_gates_pre: &Matrix<T>,
        accum: &mut GradientSet<T>,
    ) -> Result<()> {
        if d_gates_pre.shape() != cache.gates.shape() || accum.db.len() != d_gates_pre.cols() {
            return Err(Error::shape(
                "step_weight_grads",
                format!(
                    "d_gates_pre {:?} vs cached gates {:?}",
                    d_gates_pre.shape(),
                    cache.gates.shape()
                ),
            ));
        }
        self.weight_grad(
            &cache.x_dropped,
            cache.nr_mask.as_ref(),
            d_gates_pre,
            &mut accum.dw,
        )?;
        self.weight_grad(
            &cache.h_prev_dropped,
            cache.rh_mask.as_ref(),
            d_gates_pre,
            &mut accum.du,
        )?;
        for (acc, s) in accum.db.iter_mut().zip(d_gates_pre.column_sums()) {
            *acc = *acc + s;
        }
        Ok(())
    }

    /// Runs a layer stack over a window. Returns the top layer's hidden
    /// state per step, the tape indexed `[step][layer]`, and the final
    /// state of every layer.
    #[allow(clippy::type_complexity)]
    pub fn forward_stack(
        &mut self,
        layers: &[LstmParams<T>],
        inputs: &[Matrix<T>],
        initial: &[LstmState<T>],
        schedule: &MaskSchedule,
    ) -> Result<(Vec<Matrix<T>>, Vec<Vec<StepCache<T>>>, Vec<LstmState<T>>)> {
        if initial.len() != layers.len()
            || schedule.layers() != layers.len()
            || schedule.steps() != inputs.len()
        {
            return Err(Error::shape(
                "forward_stack",
                format!(
                    "{} layers, {} initial states, {} steps, schedule {:?}",
                    layers.len(),
                    initial.len(),
                    inputs.len(),
                    schedule.shape()
                ),
            ));
        }
        let mut state = initial.to_vec();
        let mut tops = Vec::with_capacity(inputs.len());
        let mut tape = Vec::with_capacity(inputs.len());
        for (t, x) in inputs.iter().enumerate() {
            let mut input = x.clone();
            let mut caches = Vec::with_capacity(layers.len());
            for (l, params) in layers.iter().enumerate() {
                let (h, c, cache) = self.step_forward(
                    params,
                    &input,
                    &state[l].h,
                    &state[l].c,
                    schedule.nr(l, t),
                    schedule.rh(l, t),
                )?;
                caches.push(cache);
                state[l] = LstmState { h: h.clone(), c };
                input = h;
            }
            tops.push(input);
            tape.push(caches);
        }
        Ok((tops, tape, state))
    }

    /// Backpropagation through a window. `d_top[t]` is the gradient at the
    /// top layer's `h_t`, already passed through whatever mask its consumer
    /// applied. The cell-state gradient entering the last step is zero.
    /// Returns per-layer gradients and the gradient at each step's input.
    pub fn bptt(
        &mut self,
        layers: &[LstmParams<T>],
        tape: &[Vec<StepCache<T>>],
        d_top: &[Matrix<T>],
        schedule: &MaskSchedule,
    ) -> Result<(Vec<GradientSet<T>>, Vec<Matrix<T>>)> {
        let steps = tape.len();
        if d_top.len() != steps || schedule.steps() != steps || schedule.layers() != layers.len() {
            return Err(Error::shape(
                "bptt",
                format!(
                    "tape of {steps} steps, {} top gradients, schedule {:?}",
                    d_top.len(),
                    schedule.shape()
                ),
            ));
        }
        for (t, caches) in tape.iter().enumerate() {
            if caches.len() != layers.len() {
                return Err(Error::shape(
                    "bptt",
                    format!("step {t} holds {} layers", caches.len()),
                ));
            }
            for (l, cache) in caches.iter().enumerate() {
                if cache.nr_mask.as_ref() != schedule.nr(l, t)
                    || cache.rh_mask.as_ref() != schedule.rh(l, t)
                {
                    return Err(Error::Config(format!(
                        "tape masks at layer {l}, step {t} differ from the schedule"
                    )));
                }
            }
        }

        let mut grads: Vec<GradientSet<T>> = layers.iter().map(GradientSet::zeros_like).collect();
        let batch = d_top.first().map_or(0, |m| m.rows());
        let mut d_h_rec: Vec<Matrix<T>> = layers
            .iter()
            .map(|p| Matrix::zeros(batch, p.hidden()))
            .collect();
        let mut d_c_next = d_h_rec.clone();
        let mut d_inputs = vec![Matrix::default(); steps];

        for t in (0..steps).rev() {
            let mut from_above = d_top[t].clone();
            for l in (0..layers.len()).rev() {
                from_above.axpy(T::one(), &d_h_rec[l])?;
                let sg = self.step_backward(&layers[l], &tape[t][l], &from_above, &d_c_next[l])?;
                self.step_weight_grads(&tape[t][l], &sg.d_gates_pre, &mut grads[l])?;
                d_h_rec[l] = sg.d_h_prev;
                d_c_next[l] = sg.d_c_prev;
                from_above = sg.d_x;
            }
            d_inputs[t] = from_above;
        }
        Ok((grads, d_inputs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{MaskCase, ScheduleShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type M = Matrix<f64>;

    fn smask(m: StructuredMask) -> Option<Arc<Mask>> {
        Some(Arc::new(Mask::Structured(m)))
    }

    #[test]
    fn zero_params_give_half_open_gates() {
        let p = LstmParams::<f64>::zeros(3, 4);
        let mut e = Engine::new(ExecMode::Sparse);
        let x = M::filled(2, 3, 0.7);
        let (h, c, cache) = e
            .step_forward(&p, &x, &M::zeros(2, 4), &M::zeros(2, 4), None, None)
            .unwrap();
        assert_eq!(h, M::zeros(2, 4));
        assert_eq!(c, M::zeros(2, 4));
        for k in 0..3 {
            assert_eq!(cache.gate(k), M::filled(2, 4, 0.5));
        }
        assert_eq!(cache.gate(3), M::zeros(2, 4));
    }

    #[test]
    fn saturated_forget_gate_copies_cell_state() {
        let mut p = LstmParams::<f64>::zeros(3, 4);
        p.b[4..8].iter_mut().for_each(|b| *b = 50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c_prev = M::random_uniform(2, 4, -2.0, 2.0, &mut rng);
        let x = M::random_uniform(2, 3, -1.0, 1.0, &mut rng);
        let mut e = Engine::new(ExecMode::Dense);
        let (h, c, _) = e
            .step_forward(&p, &x, &M::zeros(2, 4), &c_prev, None, None)
            .unwrap();
        for (a, b) in c.as_slice().iter().zip(c_prev.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in h.as_slice().iter().zip(c_prev.as_slice()) {
            assert!((a - 0.5 * b.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn step_forward_rejects_bad_shapes() {
        let p = LstmParams::<f64>::zeros(3, 4);
        let mut e = Engine::new(ExecMode::Dense);
        let bad = e.step_forward(
            &p,
            &M::zeros(2, 5),
            &M::zeros(2, 4),
            &M::zeros(2, 4),
            None,
            None,
        );
        assert!(bad.is_err());
        let m = smask(StructuredMask::keep_all(5));
        let bad = e.step_forward(
            &p,
            &M::zeros(2, 3),
            &M::zeros(2, 4),
            &M::zeros(2, 4),
            m.as_ref(),
            None,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn cache_reconstructs_cell_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = LstmParams::<f64>::uniform(5, 6, 0.5, &mut rng);
        let x = M::random_uniform(3, 5, -1.0, 1.0, &mut rng);
        let h0 = M::random_uniform(3, 6, -1.0, 1.0, &mut rng);
        let c0 = M::random_uniform(3, 6, -1.0, 1.0, &mut rng);
        let nr = smask(StructuredMask::sample(5, 0.4, &mut rng).unwrap());
        let mut e = Engine::new(ExecMode::Sparse);
        let (_, _, cache) = e.step_forward(&p, &x, &h0, &c0, nr.as_ref(), None).unwrap();
        let (i, f, g) = (cache.gate(0), cache.gate(1), cache.gate(3));
        for r in 0..3 {
            for j in 0..6 {
                let c = f.get(r, j) * c0.get(r, j) + i.get(r, j) * g.get(r, j);
                assert!((c - cache.c_t.get(r, j)).abs() < 1e-12);
            }
        }
        let dropped = nr.unwrap().as_structured().unwrap().dropped().to_vec();
        assert_eq!(cache.x_dropped.zero_columns(), dropped);
        assert_eq!(cache.h_prev_dropped, h0);
    }

    #[test]
    fn backward_at_zero_cell_state() {
        let p = LstmParams::<f64>::zeros(2, 3);
        let mut e = Engine::new(ExecMode::Dense);
        let (_, _, cache) = e
            .step_forward(
                &p,
                &M::zeros(2, 2),
                &M::zeros(2, 3),
                &M::zeros(2, 3),
                None,
                None,
            )
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dh = M::random_uniform(2, 3, -1.0, 1.0, &mut rng);
        let dcn = M::random_uniform(2, 3, -1.0, 1.0, &mut rng);
        let sg = e.step_backward(&p, &cache, &dh, &dcn).unwrap();
        // o = 0.5 everywhere; δo = 0, so its pre-activation gradient is 0.
        for r in 0..2 {
            for j in 0..3 {
                assert_eq!(sg.d_gates_pre.get(r, 6 + j), 0.0);
                let dc = dh.get(r, j) * 0.5 + dcn.get(r, j);
                assert!((sg.d_c_prev.get(r, j) - dc * 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn step_backward_rejects_bad_shapes() {
        let p = LstmParams::<f64>::zeros(2, 3);
        let mut e = Engine::new(ExecMode::Dense);
        let (_, _, cache) = e
            .step_forward(
                &p,
                &M::zeros(2, 2),
                &M::zeros(2, 3),
                &M::zeros(2, 3),
                None,
                None,
            )
            .unwrap();
        assert!(e
            .step_backward(&p, &cache, &M::zeros(2, 4), &M::zeros(2, 3))
            .is_err());
        let mut acc = GradientSet::zeros_like(&p);
        assert!(e
            .step_weight_grads(&cache, &M::zeros(2, 4), &mut acc)
            .is_err());
    }

    #[test]
    fn zero_gate_gradient_leaves_accumulator() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = LstmParams::<f64>::uniform(3, 4, 0.3, &mut rng);
        let mut e = Engine::new(ExecMode::Sparse);
        let nr = smask(StructuredMask::sample(3, 0.34, &mut rng).unwrap());
        let (_, _, cache) = e
            .step_forward(
                &p,
                &M::random_uniform(2, 3, -1.0, 1.0, &mut rng),
                &M::zeros(2, 4),
                &M::zeros(2, 4),
                nr.as_ref(),
                None,
            )
            .unwrap();
        let mut acc = GradientSet {
            dw: M::filled(3, 16, 1.5),
            du: M::filled(4, 16, -0.5),
            db: vec![2.0; 16],
        };
        let before = acc.clone();
        e.step_weight_grads(&cache, &M::zeros(2, 16), &mut acc)
            .unwrap();
        assert_eq!(acc, before);
    }

    #[test]
    fn bptt_rejects_inconsistent_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layers = vec![LstmParams::<f64>::uniform(3, 4, 0.3, &mut rng)];
        let shape = ScheduleShape {
            layers: 1,
            steps: 2,
            input_width: 3,
            hidden: 4,
        };
        let s1 = MaskSchedule::build(MaskCase::III, shape, 0.5, Some(0.5), 1).unwrap();
        let s2 = MaskSchedule::build(MaskCase::III, shape, 0.5, Some(0.5), 2).unwrap();
        let xs = vec![M::random_uniform(2, 3, -1.0, 1.0, &mut rng); 2];
        let init = vec![LstmState::zeros(2, 4)];
        let mut e = Engine::new(ExecMode::Sparse);
        let (_, tape, _) = e.forward_stack(&layers, &xs, &init, &s1).unwrap();
        let d = vec![M::zeros(2, 4); 2];
        assert!(e.bptt(&layers, &tape, &d, &s1).is_ok());
        assert!(e.bptt(&layers, &tape, &d, &s2).is_err());
        assert!(e.bptt(&layers, &tape, &d[..1], &s1).is_err());
    }
}
