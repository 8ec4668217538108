//! Adjoint-state gradient of the regularized training objective.
//!
//! The objective is `J = l(Q·out, c) + α R(out)` where `out = P y_n`, subject
//! to `y_1 = lift(d)` and `y_j = y_{j-1} - h f(K_j y_{j-1})` for `j = 2..n`.
//! With the Lagrangian
//!
//! ```text
//! L = l(Q·out, c) + α R(out) - Σ_{j≥2} p_jᵀ (y_j - y_{j-1} + h f(K_j y_{j-1})) - p_1ᵀ (y_1 - lift(d))
//! ```
//!
//! stationarity in the states gives the terminal multiplier
//! `p_n = Pᵀ(∇l + α∇R)` and the backward recursion
//! `p_{j-1} = p_j - h K_jᵀ diag(f'(K_j y_{j-1})) p_j`; the parameter gradient is
//! `∇_{K_j} L = -h [∂(K_j y_{j-1})/∂K_j]ᵀ diag(f'(K_j y_{j-1})) p_j`.
//!
//! The regularizer appears only in the terminal multiplier. Each kernel
//! gradient is formed as soon as its multiplier is known, so at most two
//! multipliers are alive at any point of the sweep.

use std::cell::Cell;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss_metrics::softmax_xent;
use crate::network::{forward, residual_step, select, ForwardTrace, NetworkParams, SelectionSet};
use crate::regularizer::RegularizerSpec;
use crate::tensor::{conv2d_adjoint_input, conv2d_adjoint_weights, ConvKernelStack, FeatureField};

/// A penalty on the network output, supplied unscaled with its strength.
pub trait OutputRegularizer {
    fn alpha(&self) -> f64;
    fn value(&self, y: &FeatureField) -> f64;
    fn gradient(&self, y: &FeatureField) -> FeatureField;
}

impl OutputRegularizer for RegularizerSpec {
    fn alpha(&self) -> f64 {
        self.effective_alpha()
    }

    fn value(&self, y: &FeatureField) -> f64 {
        self.raw(y).0
    }

    fn gradient(&self, y: &FeatureField) -> FeatureField {
        self.raw(y).1
    }
}

thread_local! {
    static LIVE_MULTIPLIERS: Cell<usize> = const { Cell::new(0) };
    static PEAK_MULTIPLIERS: Cell<usize> = const { Cell::new(0) };
}

/// Live and peak number of [`AdjointState`] values on the current thread.
pub fn multiplier_counts() -> (usize, usize) {
    (
        LIVE_MULTIPLIERS.with(Cell::get),
        PEAK_MULTIPLIERS.with(Cell::get),
    )
}

/// Resets the peak counter to the current live count.
pub fn reset_multiplier_peak() {
    let live = LIVE_MULTIPLIERS.with(Cell::get);
    PEAK_MULTIPLIERS.with(|p| p.set(live));
}

/// A Lagrange multiplier `p_j`, shaped like the state `y_j`.
#[derive(Debug, PartialEq)]
pub struct AdjointState {
    multiplier: FeatureField,
}

impl AdjointState {
    pub fn new(multiplier: FeatureField) -> Self {
        LIVE_MULTIPLIERS.with(|live| {
            let n = live.get() + 1;
            live.set(n);
            PEAK_MULTIPLIERS.with(|p| p.set(p.get().max(n)));
        });
        Self { multiplier }
    }

    pub fn field(&self) -> &FeatureField {
        &self.multiplier
    }
}

impl Clone for AdjointState {
    fn clone(&self) -> Self {
        AdjointState::new(self.multiplier.clone())
    }
}

impl Drop for AdjointState {
    fn drop(&mut self) {
        LIVE_MULTIPLIERS.with(|live| live.set(live.get().saturating_sub(1)));
    }
}

/// Sensitivity at the end of the network: the cotangent of the projected
/// output and the multiplier `p_n` it induces on the last state.
#[derive(Debug)]
pub struct TerminalMultiplier {
    pub output_cotangent: FeatureField,
    pub state: AdjointState,
    pub loss: f64,
    /// Unscaled `R(out)`.
    pub regularizer: f64,
    pub alpha: f64,
}

/// Parameter gradients laid out like [`NetworkParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradients {
    pub lift: ConvKernelStack,
    pub layers: Vec<ConvKernelStack>,
    pub project: ConvKernelStack,
}

impl ParamGradients {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        let zero = |k: &ConvKernelStack| {
            let (o, i, kh, kw) = k.shape();
            ConvKernelStack::zeros(o, i, kh, kw)
        };
        Self {
            lift: zero(&params.lift),
            layers: params.layers.iter().map(zero).collect(),
            project: zero(&params.project),
        }
    }

    /// Canonical order, matching [`NetworkParams::kernels`].
    pub fn kernels(&self) -> impl Iterator<Item = &ConvKernelStack> {
        std::iter::once(&self.lift)
            .chain(self.layers.iter())
            .chain(std::iter::once(&self.project))
    }

    pub fn get(&self, mut index: usize) -> f64 {
        for k in self.kernels() {
            if index < k.len() {
                return k.weights()[index];
            }
            index -= k.len();
        }
        panic!("gradient index out of range");
    }

    pub fn len(&self) -> usize {
        self.kernels().map(ConvKernelStack::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_abs(&self) -> f64 {
        self.kernels()
            .flat_map(|k| k.weights().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.kernels().all(ConvKernelStack::is_finite)
    }

    /// Euclidean norm over every entry, accumulated in parameter order.
    pub fn norm(&self) -> f64 {
        self.kernels()
            .flat_map(|k| k.weights().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Gradients plus the objective decomposition they were computed at.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub grads: ParamGradients,
    /// `loss + alpha * regularizer`
    pub objective: f64,
    pub loss: f64,
    /// Unscaled regularizer value.
    pub regularizer: f64,
    pub alpha: f64,
}

/// Called with each multiplier as the backward sweep produces it.
pub trait BackwardObserver {
    /// `j` is the 1-based state index; `p_n` arrives first, `p_1` last.
    fn multiplier(&mut self, j: usize, p: &FeatureField);
}

impl BackwardObserver for () {
    fn multiplier(&mut self, _: usize, _: &FeatureField) {}
}

/// Mean cross-entropy on the selected pixels and its gradient scattered back
/// into an output-shaped field (zero at unlabeled pixels). An empty selection
/// contributes nothing.
pub fn loss_and_cotangent(output: &FeatureField, q: &SelectionSet) -> Result<(f64, FeatureField)> {
    let (c, h, w) = output.shape();
    let mut cot = FeatureField::zeros(c, h, w);
    if q.is_empty() {
        return Ok((0.0, cot));
    }
    let picked = select(output, q)?;
    let (loss, grads) = softmax_xent(&picked)?;
    for (e, g) in q.entries().iter().zip(grads) {
        for (ch, v) in g.into_iter().enumerate() {
            cot.set(ch, e.row, e.col, v);
        }
    }
    Ok((loss, cot))
}

/// `p_n = Pᵀ(∇l + α ∇R)` with the smoother acting on the projected output.
pub fn terminal_multiplier<R: OutputRegularizer + ?Sized>(
    trace: &ForwardTrace,
    params: &NetworkParams,
    q: &SelectionSet,
    reg: &R,
) -> Result<TerminalMultiplier> {
    let alpha = reg.alpha();
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::Parameter(format!(
            "regularization strength must be finite and >= 0, got {alpha}"
        )));
    }
    let (loss, mut output_cotangent) = loss_and_cotangent(&trace.output, q)?;
    if alpha > 0.0 {
        output_cotangent.axpy(alpha, &reg.gradient(&trace.output))?;
    }
    let regularizer = reg.value(&trace.output);
    let p_n = conv2d_adjoint_input(&output_cotangent, &params.project)?;
    Ok(TerminalMultiplier {
        output_cotangent,
        state: AdjointState::new(p_n),
        loss,
        regularizer,
        alpha,
    })
}

/// Backward sweep from `p_n` down to `p_1`.
pub fn backward(trace: &ForwardTrace, params: &NetworkParams, terminal: TerminalMultiplier) -> Result<ParamGradients> {
    backward_observed(trace, params, terminal, &mut ())
}

pub fn backward_observed(
    trace: &ForwardTrace,
    params: &NetworkParams,
    terminal: TerminalMultiplier,
    observer: &mut dyn BackwardObserver,
) -> Result<ParamGradients> {
    let n = params.steps() + 1;
    if trace.states.len() != n || trace.pre_activations.len() != n - 1 {
        return Err(Error::State(format!(
            "trace holds {} states / {} pre-activations, network needs {n} / {}",
            trace.states.len(),
            trace.pre_activations.len(),
            n - 1
        )));
    }
    let h = params.step_size;
    let f = params.activation;
    let mut grads = ParamGradients::zeros_like(params);

    grads.project = conv2d_adjoint_weights(&terminal.output_cotangent, trace.last_state(), params.project.shape())?;

    let mut p = terminal.state;
    observer.multiplier(n, p.field());
    for j in (2..=n).rev() {
        let layer = j - 2;
        let kernel = &params.layers[layer];
        let prev_state = &trace.states[j - 2];
        let weighted = scaled_by_derivative(&trace.pre_activations[layer], p.field(), f);
        let mut g = conv2d_adjoint_weights(&weighted, prev_state, kernel.shape())?;
        g.weights_mut().iter_mut().for_each(|v| *v *= -h);
        grads.layers[layer] = g;
        let p_prev = AdjointState::new(previous_multiplier(p.field(), &weighted, kernel, h)?);
        p = p_prev;
        observer.multiplier(j - 1, p.field());
    }

    grads.lift = conv2d_adjoint_weights(p.field(), &trace.input, params.lift.shape())?;
    Ok(grads)
}

/// `diag(f'(z)) p`
fn scaled_by_derivative(z: &FeatureField, p: &FeatureField, f: crate::tensor::Activation) -> FeatureField {
    let mut out = p.clone();
    for (o, zv) in out.values_mut().iter_mut().zip(z.values()) {
        *o *= f.derivative(*zv);
    }
    out
}

/// `p_j - h K_jᵀ (diag(f') p_j)`
fn previous_multiplier(p: &FeatureField, weighted: &FeatureField, kernel: &ConvKernelStack, h: f64) -> Result<FeatureField> {
    let back = conv2d_adjoint_input(weighted, kernel)?;
    let mut prev = p.clone();
    prev.axpy(-h, &back)?;
    Ok(prev)
}

/// `∇_{y_{j-1}} L = p_j - h K_jᵀ diag(f'(K_j y_{j-1})) p_j - p_{j-1}` assembled
/// from given multipliers (`j` is the 1-based state index, `2 ≤ j ≤ n`).
pub fn lagrangian_state_gradient(
    trace: &ForwardTrace,
    params: &NetworkParams,
    j: usize,
    p_j: &FeatureField,
    p_prev: &FeatureField,
) -> Result<FeatureField> {
    if j < 2 || j > params.steps() + 1 {
        return Err(Error::State(format!("no multiplier pair for state index {j}")));
    }
    let layer = j - 2;
    let weighted = scaled_by_derivative(&trace.pre_activations[layer], p_j, params.activation);
    let mut g = previous_multiplier(p_j, &weighted, &params.layers[layer], params.step_size)?;
    g.axpy(-1.0, p_prev)?;
    Ok(g)
}

/// `∇_{p_j} L`, the negated constraint residual, re-evaluated from the trace.
pub fn lagrangian_multiplier_gradient(trace: &ForwardTrace, params: &NetworkParams, j: usize) -> Result<FeatureField> {
    if j < 2 || j > trace.states.len() {
        return Err(Error::State(format!("no constraint for state index {j}")));
    }
    let rhs = residual_step(
        &trace.states[j - 2],
        &trace.pre_activations[j - 2],
        params.step_size,
        params.activation,
    );
    let mut g = rhs;
    g.axpy(-1.0, &trace.states[j - 1])?;
    Ok(g)
}

/// Forward pass, terminal multiplier and backward sweep in one call.
pub fn gradient<R: OutputRegularizer + ?Sized>(
    params: &NetworkParams,
    data: &FeatureField,
    q: &SelectionSet,
    reg: &R,
) -> Result<GradientBundle> {
    let trace = forward(params, data)?;
    let terminal = terminal_multiplier(&trace, params, q, reg)?;
    let (loss, regularizer, alpha) = (terminal.loss, terminal.regularizer, terminal.alpha);
    let grads = backward(&trace, params, terminal)?;
    Ok(GradientBundle {
        grads,
        objective: loss + alpha * regularizer,
        loss,
        regularizer,
        alpha,
    })
}

/// `l + α R` without gradients.
pub fn objective<R: OutputRegularizer + ?Sized>(
    params: &NetworkParams,
    data: &FeatureField,
    q: &SelectionSet,
    reg: &R,
) -> Result<f64> {
    let trace = forward(params, data)?;
    let (loss, _) = loss_and_cotangent(&trace.output, q)?;
    let alpha = reg.alpha();
    Ok(if alpha > 0.0 { loss + alpha * reg.value(&trace.output) } else { loss })
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    /// `(flat index, adjoint, finite difference)` for every sampled coordinate.
    pub samples: Vec<(usize, f64, f64)>,
}

/// Compares adjoint gradients against central differences
/// `(J(θ+δe) - J(θ-δe)) / 2δ` on `coordinates` parameters drawn without
/// replacement (all of them if there are fewer). Relative error is
/// `|adjoint - fd| / (|fd| + 1e-12)`.
pub fn gradcheck<R: OutputRegularizer + ?Sized>(
    params: &NetworkParams,
    data: &FeatureField,
    q: &SelectionSet,
    reg: &R,
    fd_step: f64,
    coordinates: usize,
    seed: u64,
) -> Result<GradcheckReport> {
    let bundle = gradient(params, data, q, reg)?;
    let total = params.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, total, coordinates.min(total)).into_vec();
    picked.sort_unstable();
    let mut probe = params.clone();
    let mut samples = Vec::with_capacity(picked.len());
    let mut max_relative_error: f64 = 0.0;
    for idx in picked {
        let original = probe.param(idx);
        *probe.param_mut(idx) = original + fd_step;
        let plus = objective(&probe, data, q, reg)?;
        *probe.param_mut(idx) = original - fd_step;
        let minus = objective(&probe, data, q, reg)?;
        *probe.param_mut(idx) = original;
        let fd = (plus - minus) / (2.0 * fd_step);
        let adj = bundle.grads.get(idx);
        max_relative_error = max_relative_error.max((adj - fd).abs() / (fd.abs() + 1e-12));
        samples.push((idx, adj, fd));
    }
    Ok(GradcheckReport {
        max_relative_error,
        samples,
    })
}
