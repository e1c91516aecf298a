//! ADMM training loop for codebook-constrained weights.
//!
//! Each round runs three phases on the scaled form of the augmented
//! Lagrangian `f(W) + rho/2 * ||W - G + lambda||^2`:
//!
//! 1. proximal step: extragradient descent on `W` with `G`, `lambda` fixed;
//! 2. projection step: `G <- project(W + lambda)` layer by layer;
//! 3. dual update: `lambda <- lambda + W - G`.
//!
//! Only weight tensors are constrained; biases are trained freely in the
//! proximal step.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Params;
use crate::quantset::{project_state, LayerPolicy, LayerTarget};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rounds in a row the relative residual must stay under tolerance.
pub const DEFAULT_PATIENCE: usize = 3;

/// A differentiable training loss evaluated one minibatch at a time.
pub trait Objective<T: Scalar> {
    /// Loss and gradient on the current minibatch.
    fn loss_grad(&mut self, params: &Params<T>) -> Result<(T, Params<T>)>;

    /// Move on to the next minibatch.
    fn advance(&mut self) {}

    /// Held-out accuracy, if this objective has evaluation data.
    fn evaluate(&mut self, _params: &Params<T>) -> Result<Option<f64>> {
        Ok(None)
    }

    /// Minibatches in one pass over the training data.
    fn steps_per_epoch(&self) -> usize {
        1
    }
}

/// `f == 0`: leaves only the coupling term.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroObjective;

impl<T: Scalar> Objective<T> for ZeroObjective {
    fn loss_grad(&mut self, params: &Params<T>) -> Result<(T, Params<T>)> {
        Ok((T::zero(), params.zeros_like()))
    }
}

/// `f(W) = 1/2 * sum_i sum_k h_ik (W_ik - target_ik)^2`.
#[derive(Debug, Clone)]
pub struct QuadraticObjective<T> {
    pub targets: Vec<Tensor<T>>,
    pub curvature: Vec<Tensor<T>>,
}

impl<T: Scalar> QuadraticObjective<T> {
    /// Isotropic curvature `h` on every coordinate.
    pub fn isotropic(targets: Vec<Tensor<T>>, h: T) -> Self {
        let curvature = targets.iter().map(|t| Tensor::filled(t.shape(), h)).collect();
        Self { targets, curvature }
    }

    pub fn value(&self, weights: &[Tensor<T>]) -> T {
        let mut total = T::zero();
        for ((w, t), h) in weights.iter().zip(&self.targets).zip(&self.curvature) {
            for ((&w, &t), &h) in w.data().iter().zip(t.data()).zip(h.data()) {
                total += h * (w - t) * (w - t);
            }
        }
        total * T::of(0.5)
    }
}

impl<T: Scalar> Objective<T> for QuadraticObjective<T> {
    fn loss_grad(&mut self, params: &Params<T>) -> Result<(T, Params<T>)> {
        let mut grads = params.zeros_like();
        for (i, w) in params.weights.iter().enumerate() {
            let diff = w.sub(&self.targets[i])?;
            grads.weights[i] = diff.zip_with(&self.curvature[i], "quadratic gradient", |d, h| d * h)?;
        }
        Ok((self.value(&params.weights), grads))
    }
}

/// Geometric penalty growth: `rho *= factor` every `every` rounds, capped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhoGrowth {
    pub factor: f64,
    pub every: usize,
    pub cap: f64,
}

impl Default for RhoGrowth {
    fn default() -> Self {
        Self {
            factor: 1.5,
            every: 10,
            cap: 1.0,
        }
    }
}

/// Step decay of the proximal learning rates: multiply by `gamma` every
/// `every` rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub gamma: f64,
    pub every: usize,
}

impl Default for StepDecay {
    fn default() -> Self {
        Self { gamma: 1.0, every: 1 }
    }
}

impl StepDecay {
    /// Multiplier in effect during (1-based) `round`.
    pub fn factor(&self, round: usize) -> f64 {
        self.gamma.powi((round.saturating_sub(1) / self.every.max(1)) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmmConfig {
    pub rho: f64,
    pub rho_growth: Option<RhoGrowth>,
    pub beta_p: f64,
    pub beta_c: f64,
    /// Extragradient iterations per round; `None` means one epoch.
    pub proximal_steps_per_round: Option<usize>,
    pub max_rounds: usize,
    /// Threshold on `||W - G|| / ||W||`.
    pub primal_tolerance: f64,
    pub patience: usize,
    /// One entry per weight layer.
    pub layer_policy: Vec<LayerPolicy>,
    pub lr_schedule: StepDecay,
    pub seed: u64,
}

impl AdmmConfig {
    pub fn new(layer_policy: Vec<LayerPolicy>) -> Self {
        Self {
            rho: 1e-2,
            rho_growth: Some(RhoGrowth::default()),
            beta_p: 0.01,
            beta_c: 0.01,
            proximal_steps_per_round: None,
            max_rounds: 30,
            primal_tolerance: 1e-2,
            patience: DEFAULT_PATIENCE,
            layer_policy,
            lr_schedule: StepDecay::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite, got {x}")))
            }
        };
        positive("rho", self.rho)?;
        positive("beta_p", self.beta_p)?;
        positive("beta_c", self.beta_c)?;
        positive("primal_tolerance", self.primal_tolerance)?;
        positive("lr_schedule.gamma", self.lr_schedule.gamma)?;
        if self.max_rounds == 0 {
            return Err(Error::Config("max_rounds must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.proximal_steps_per_round == Some(0) {
            return Err(Error::Config("proximal_steps_per_round must be at least 1".into()));
        }
        if let Some(g) = self.rho_growth {
            positive("rho_growth.factor", g.factor)?;
            positive("rho_growth.cap", g.cap)?;
            if g.every == 0 {
                return Err(Error::Config("rho_growth.every must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// Penalty in effect during (1-based) `round`.
    pub fn rho_at(&self, round: usize) -> f64 {
        match self.rho_growth {
            Some(g) => {
                let steps = (round.saturating_sub(1) / g.every) as i32;
                (self.rho * g.factor.powi(steps)).min(g.cap.max(self.rho))
            }
            None => self.rho,
        }
    }
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub rho: f64,
    pub beta_p: f64,
    /// Mean of `f` over the round's minibatches.
    pub train_loss: f64,
    /// Accuracy of the projected weights.
    pub eval_accuracy: Option<f64>,
    /// `||W - G||` over all weight layers.
    pub primal_residual: f64,
    pub relative_residual: f64,
    /// Codebook scale or INT8 step per weight layer.
    pub alphas: Vec<Option<f64>>,
}

/// The `(W, G, lambda)` triple with penalty and round counter.
#[derive(Debug, Clone)]
pub struct AdmmState<T> {
    /// Continuous parameters; weights are constrained, biases are free.
    pub w: Params<T>,
    pub g: Vec<LayerTarget<T>>,
    /// `g` realized as dense tensors.
    pub g_values: Vec<Tensor<T>>,
    /// Scaled dual variable.
    pub lambda: Vec<Tensor<T>>,
    pub rho: T,
    pub round: usize,
}

impl<T: Scalar> AdmmState<T> {
    /// `G` from projecting the initial weights, `lambda = 0`.
    pub fn new(w: Params<T>, policies: &[LayerPolicy], rho: T) -> Result<Self> {
        if policies.len() != w.weights.len() {
            return Err(Error::Config(format!(
                "{} layer policies for {} weight layers",
                policies.len(),
                w.weights.len()
            )));
        }
        let g = project_state(&w.weights, policies, &vec![None; policies.len()])?;
        let g_values = g.iter().map(LayerTarget::realize).collect();
        let lambda = w.weights.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            w,
            g,
            g_values,
            lambda,
            rho,
            round: 0,
        })
    }

    pub fn policies(&self) -> Vec<LayerPolicy> {
        self.g.iter().map(LayerTarget::policy).collect()
    }

    /// `sum_i ||W_i - G_i + lambda_i||^2`.
    pub fn coupling_sq(&self) -> T {
        coupling_sq(&self.w.weights, &self.g_values, &self.lambda)
    }

    /// `||W - G||`.
    pub fn primal_residual(&self) -> T {
        let mut total = T::zero();
        for (w, g) in self.w.weights.iter().zip(&self.g_values) {
            total += w.data().iter().zip(g.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>();
        }
        total.sqrt()
    }

    /// `||W - G|| / ||W||`, zero when both vanish.
    pub fn relative_residual(&self) -> T {
        let r = self.primal_residual();
        let norm = self.w.weights.iter().map(Tensor::norm_sq).sum::<T>().sqrt();
        if r == T::zero() {
            T::zero()
        } else if norm == T::zero() {
            T::infinity()
        } else {
            r / norm
        }
    }

    /// Parameters with every weight replaced by its projection.
    pub fn projected_params(&self) -> Params<T> {
        Params {
            weights: self.g_values.clone(),
            biases: self.w.biases.clone(),
        }
    }

    /// Change the penalty while keeping the unscaled multiplier
    /// `mu = rho * lambda` fixed.
    pub fn set_rho(&mut self, rho: T) {
        if rho != self.rho {
            let ratio = self.rho / rho;
            for l in &mut self.lambda {
                l.data_mut().iter_mut().for_each(|x| *x *= ratio);
            }
            self.rho = rho;
        }
    }
}

fn coupling_sq<T: Scalar>(w: &[Tensor<T>], g: &[Tensor<T>], lambda: &[Tensor<T>]) -> T {
    let mut total = T::zero();
    for ((w, g), l) in w.iter().zip(g).zip(lambda) {
        for ((&w, &g), &l) in w.data().iter().zip(g.data()).zip(l.data()) {
            let d = w - g + l;
            total += d * d;
        }
    }
    total
}

fn check_layers<T: Scalar>(w: &Params<T>, g: &[Tensor<T>], lambda: &[Tensor<T>]) -> Result<()> {
    if g.len() != w.weights.len() || lambda.len() != w.weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weight layers, {} projections, {} duals",
            w.weights.len(),
            g.len(),
            lambda.len()
        )));
    }
    for ((w, g), l) in w.weights.iter().zip(g).zip(lambda) {
        for other in [g, l] {
            if other.shape() != w.shape() {
                return Err(Error::ShapeMismatch {
                    op: "admm state",
                    left: w.shape().to_vec(),
                    right: other.shape().to_vec(),
                });
            }
        }
    }
    Ok(())
}

/// `f(W) + rho/2 * ||W - G + lambda||^2` and its gradient in `W`, on the
/// objective's current minibatch.
pub fn augmented_loss_grad<T: Scalar, O: Objective<T> + ?Sized>(
    objective: &mut O,
    w: &Params<T>,
    g: &[Tensor<T>],
    lambda: &[Tensor<T>],
    rho: T,
) -> Result<(T, T, Params<T>)> {
    check_layers(w, g, lambda)?;
    let (f, mut grads) = objective.loss_grad(w)?;
    for (i, grad) in grads.weights.iter_mut().enumerate() {
        let (wd, gd, ld) = (w.weights[i].data(), g[i].data(), lambda[i].data());
        for (k, x) in grad.data_mut().iter_mut().enumerate() {
            *x += rho * (wd[k] - gd[k] + ld[k]);
        }
    }
    let total = f + rho * T::of(0.5) * coupling_sq(&w.weights, g, lambda);
    Ok((total, f, grads))
}

/// `f(W) + rho/2 * ||W - G + lambda||^2` on the current minibatch.
pub fn augmented_loss<T: Scalar, O: Objective<T> + ?Sized>(
    objective: &mut O,
    w: &Params<T>,
    g: &[Tensor<T>],
    lambda: &[Tensor<T>],
    rho: T,
) -> Result<T> {
    Ok(augmented_loss_grad(objective, w, g, lambda, rho)?.0)
}

/// Zero the gradient (weights and bias) of layers kept in full precision,
/// so they pass through training unchanged.
fn freeze<T: Scalar>(grad: &mut Params<T>, frozen: &[bool]) {
    for (i, _) in frozen.iter().enumerate().filter(|(_, &f)| f) {
        grad.weights[i].data_mut().iter_mut().for_each(|x| *x = T::zero());
        if let Some(b) = &mut grad.biases[i] {
            b.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }
}

/// One prediction/correction pair on the current minibatch:
/// `Wp = W - beta_p * grad L(W)`, `W <- W - beta_c * grad L(Wp)`.
/// Returns `f(W)` at the starting point.
pub fn extragradient_step<T: Scalar, O: Objective<T> + ?Sized>(
    objective: &mut O,
    state: &mut AdmmState<T>,
    beta_p: T,
    beta_c: T,
) -> Result<T> {
    let diverged = |loss: T| Error::Divergence {
        round: state.round,
        loss: loss.as_f64(),
    };
    let frozen: Vec<bool> = state.g.iter().map(|g| matches!(g, LayerTarget::FullPrecision(_))).collect();
    let (total, f, mut grad) = augmented_loss_grad(objective, &state.w, &state.g_values, &state.lambda, state.rho)?;
    if !total.is_finite() {
        return Err(diverged(total));
    }
    freeze(&mut grad, &frozen);
    let mut predicted = state.w.clone();
    predicted.axpy(-beta_p, &grad)?;
    let (total_p, _, mut grad_p) = augmented_loss_grad(objective, &predicted, &state.g_values, &state.lambda, state.rho)?;
    freeze(&mut grad_p, &frozen);
    if !total_p.is_finite() {
        return Err(diverged(total_p));
    }
    state.w.axpy(-beta_c, &grad_p)?;
    if !state.w.is_finite() {
        return Err(diverged(T::nan()));
    }
    Ok(f)
}

/// Run `steps` extragradient iterations, each on a fresh minibatch. Returns
/// the mean of `f` over the iterations.
pub fn proximal_step<T: Scalar, O: Objective<T> + ?Sized>(
    objective: &mut O,
    state: &mut AdmmState<T>,
    steps: usize,
    beta_p: T,
    beta_c: T,
) -> Result<T> {
    let mut total = T::zero();
    for _ in 0..steps {
        objective.advance();
        total += extragradient_step(objective, state, beta_p, beta_c)?;
    }
    Ok(total / T::of(steps.max(1) as f64))
}

/// `G <- project(W + lambda)`, warm-started from the current scales.
pub fn projection_step<T: Scalar>(state: &mut AdmmState<T>) -> Result<()> {
    let values = state
        .w
        .weights
        .iter()
        .zip(&state.lambda)
        .map(|(w, l)| w.add(l))
        .collect::<Result<Vec<_>>>()?;
    let warm: Vec<Option<T>> = state
        .g
        .iter()
        .map(|g| match g {
            LayerTarget::Codebook(q) => Some(q.alpha),
            _ => None,
        })
        .collect();
    state.g = project_state(&values, &state.policies(), &warm)?;
    state.g_values = state.g.iter().map(LayerTarget::realize).collect();
    Ok(())
}

/// `lambda_i <- lambda_i + W_i - G_i`.
pub fn dual_update<T: Scalar>(lambda: &mut [Tensor<T>], w: &[Tensor<T>], g: &[Tensor<T>]) -> Result<()> {
    for ((l, w), g) in lambda.iter_mut().zip(w).zip(g) {
        l.axpy(T::one(), &w.sub(g)?)?;
    }
    Ok(())
}

/// Why the loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// `W == G` exactly.
    ExactConsensus,
    /// Relative residual under tolerance for `patience` rounds.
    Tolerance,
    MaxRounds,
}

#[derive(Debug, Clone)]
pub struct AdmmOutcome<T> {
    pub state: AdmmState<T>,
    pub history: Vec<RoundRecord>,
    pub stop: StopReason,
}

impl<T: Scalar> AdmmOutcome<T> {
    /// Final model: projected weights with the trained biases.
    pub fn params(&self) -> Params<T> {
        self.state.projected_params()
    }
}

/// Full ADMM loop from `initial` parameters.
pub fn admm_train<T: Scalar, O: Objective<T> + ?Sized>(
    initial: Params<T>,
    config: &AdmmConfig,
    objective: &mut O,
) -> Result<AdmmOutcome<T>> {
    admm_train_with(initial, config, objective, |_| {})
}

/// [`admm_train`] with a callback after every round.
pub fn admm_train_with<T: Scalar, O: Objective<T> + ?Sized>(
    initial: Params<T>,
    config: &AdmmConfig,
    objective: &mut O,
    mut on_round: impl FnMut(&RoundRecord),
) -> Result<AdmmOutcome<T>> {
    config.validate()?;
    if !initial.is_finite() {
        return Err(Error::NonFinite("initial weights".into()));
    }
    let mut state = AdmmState::new(initial, &config.layer_policy, T::of(config.rho_at(1)))?;
    let steps = config.proximal_steps_per_round.unwrap_or_else(|| objective.steps_per_epoch());
    let mut history = Vec::new();
    let mut calm_rounds = 0;
    let mut stop = StopReason::MaxRounds;

    for round in 1..=config.max_rounds {
        state.round = round;
        state.set_rho(T::of(config.rho_at(round)));
        let decay = config.lr_schedule.factor(round);
        let beta_p = config.beta_p * decay;
        let beta_c = config.beta_c * decay;

        let train_loss = proximal_step(objective, &mut state, steps, T::of(beta_p), T::of(beta_c))?;
        projection_step(&mut state)?;
        dual_update(&mut state.lambda, &state.w.weights, &state.g_values)?;

        let record = RoundRecord {
            round,
            rho: state.rho.as_f64(),
            beta_p,
            train_loss: train_loss.as_f64(),
            eval_accuracy: objective.evaluate(&state.projected_params())?,
            primal_residual: state.primal_residual().as_f64(),
            relative_residual: state.relative_residual().as_f64(),
            alphas: state.g.iter().map(|g| g.scale().map(Scalar::as_f64)).collect(),
        };
        on_round(&record);
        let (residual, relative) = (record.primal_residual, record.relative_residual);
        history.push(record);

        if residual == 0.0 {
            stop = StopReason::ExactConsensus;
            break;
        }
        calm_rounds = if relative < config.primal_tolerance { calm_rounds + 1 } else { 0 };
        if calm_rounds >= config.patience {
            stop = StopReason::Tolerance;
            break;
        }
    }
    Ok(AdmmOutcome { state, history, stop })
}

/// Write the history as CSV: one header row, one row per round.
pub fn write_history_csv<W: Write>(mut out: W, history: &[RoundRecord], layer_names: &[String], seed: u64) -> Result<()> {
    let mut header = vec![
        "round".to_string(),
        "rho".into(),
        "beta".into(),
        "train_loss".into(),
        "eval_accuracy".into(),
        "primal_residual".into(),
        "relative_residual".into(),
    ];
    header.extend(layer_names.iter().map(|n| format!("alpha_{n}")));
    header.push("seed".into());
    writeln!(out, "{}", header.join(","))?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in history {
        let mut row = vec![
            r.round.to_string(),
            r.rho.to_string(),
            r.beta_p.to_string(),
            r.train_loss.to_string(),
            opt(r.eval_accuracy),
            r.primal_residual.to_string(),
            r.relative_residual.to_string(),
        ];
        row.extend(r.alphas.iter().map(|&a| opt(a)));
        row.push(seed.to_string());
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
