//! The optimizer family: SGD, Adagrad, NGD-FM, NGD-CW, UGD, PUGD, SAM and
//! ASAM, each a step function over parameters, a gradient oracle, a learning
//! rate, a configuration and mutable state.
//!
//! Conventions shared by every variant:
//!
//! * weight decay is coupled: `g' = g + weight_decay * w` is formed before any
//!   normalization;
//! * perturbations (PUGD, SAM, ASAM) are built from the raw loss gradient `g`
//!   and the second gradient is taken on the same oracle (same batch);
//! * a normalization whose denominator is at or below [`ZERO_NORM_GUARD`]
//!   never aborts training. The step degrades (zero update, skipped
//!   perturbation or plain SGD) and the [`StepRecord`] is flagged.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, LossKind, Mlp};
use crate::tensor::{RaggedTensor, ZERO_NORM_GUARD};

/// Anything that can produce `(loss, gradient)` at a parameter point.
///
/// Perturbed optimizers call it twice per step and rely on both calls seeing
/// the same data.
pub trait GradientOracle {
    fn loss_and_grad(&self, params: &RaggedTensor) -> Result<(f64, RaggedTensor)>;
}

impl<F> GradientOracle for F
where
    F: Fn(&RaggedTensor) -> Result<(f64, RaggedTensor)>,
{
    fn loss_and_grad(&self, params: &RaggedTensor) -> Result<(f64, RaggedTensor)> {
        self(params)
    }
}

/// Loss and gradient of an MLP on one fixed batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchObjective<'a> {
    pub model: &'a Mlp,
    pub batch: &'a Batch,
    pub loss: LossKind,
}

impl GradientOracle for BatchObjective<'_> {
    fn loss_and_grad(&self, params: &RaggedTensor) -> Result<(f64, RaggedTensor)> {
        self.model.grad_at(params, self.batch, self.loss)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adagrad,
    NgdFm,
    NgdCw,
    Ugd,
    Pugd,
    Sam,
    Asam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 8] = [
        OptimizerKind::Sgd,
        OptimizerKind::Adagrad,
        OptimizerKind::NgdFm,
        OptimizerKind::NgdCw,
        OptimizerKind::Ugd,
        OptimizerKind::Pugd,
        OptimizerKind::Sam,
        OptimizerKind::Asam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::NgdFm => "ngd_fm",
            OptimizerKind::NgdCw => "ngd_cw",
            OptimizerKind::Ugd => "ugd",
            OptimizerKind::Pugd => "pugd",
            OptimizerKind::Sam => "sam",
            OptimizerKind::Asam => "asam",
        }
    }

    /// Variants that evaluate a second, perturbed gradient per step.
    pub fn is_perturbed(self) -> bool {
        matches!(self, OptimizerKind::Pugd | OptimizerKind::Sam | OptimizerKind::Asam)
    }

    /// Variants whose applied update always has dual-norm equal to the
    /// learning rate (outside the zero-norm fallback).
    pub fn is_unit_step(self) -> bool {
        matches!(self, OptimizerKind::NgdFm | OptimizerKind::Ugd | OptimizerKind::Pugd)
    }

    pub fn uses_momentum(self) -> bool {
        matches!(self, OptimizerKind::Sgd | OptimizerKind::Sam | OptimizerKind::Asam)
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown optimizer {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr_max: f64,
    pub weight_decay: f64,
    /// Used by sgd, sam and asam only.
    pub momentum: f64,
    pub nesterov: bool,
    /// Perturbation radius for sam / asam.
    pub rho: f64,
    /// Adagrad denominator stabilizer.
    pub eps: f64,
}

impl OptimizerConfig {
    pub const DEFAULT_SAM_RHO: f64 = 0.05;
    pub const DEFAULT_ASAM_RHO: f64 = 0.5;

    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            lr_max: 0.1,
            weight_decay: 5e-4,
            momentum: 0.9,
            nesterov: false,
            rho: if kind == OptimizerKind::Asam {
                Self::DEFAULT_ASAM_RHO
            } else {
                Self::DEFAULT_SAM_RHO
            },
            eps: 1e-10,
        }
    }

    /// No weight decay, no momentum; handy for analytic checks.
    pub fn plain(kind: OptimizerKind) -> Self {
        Self {
            weight_decay: 0.0,
            momentum: 0.0,
            ..Self::new(kind)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lr_max > 0.0 && self.lr_max <= 1.0) {
            return bad(format!("lr_max must lie in (0, 1], got {}", self.lr_max));
        }
        if !(self.rho > 0.0) {
            return bad(format!("rho must be positive, got {}", self.rho));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub momentum_buf: Option<RaggedTensor>,
    pub adagrad_accum: Option<RaggedTensor>,
    /// Last unit direction, for the step-to-step difference `d_t`.
    pub prev_unit_grad: Option<RaggedTensor>,
    pub step_count: u64,
}

impl OptimizerState {
    /// Elementwise Adagrad step-size multiplier `1 / (sqrt(accum) + eps)`.
    pub fn adagrad_effective_steps(&self, eps: f64) -> Option<Vec<f64>> {
        self.adagrad_accum
            .as_ref()
            .map(|a| a.iter().map(|v| 1.0 / (v.sqrt() + eps)).collect())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepFlags {
    /// The update normalization hit the zero-norm guard.
    pub zero_norm_update: bool,
    /// The perturbation normalization hit the zero-norm guard.
    pub perturbation_skipped: bool,
}

impl StepFlags {
    pub fn any(&self) -> bool {
        self.zero_norm_update || self.perturbation_skipped
    }

    /// `|`-joined flag names, empty when no flag is set.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.zero_norm_update {
            parts.push("zero_norm_update");
        }
        if self.perturbation_skipped {
            parts.push("perturbation_skipped");
        }
        parts.join("|")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: u64,
    pub lr_used: f64,
    pub loss_before: f64,
    /// Dual-norm of the raw loss gradient at the pre-step point.
    pub grad_dual_norm: f64,
    /// Dual-norm of the update actually applied to the parameters.
    pub update_dual_norm: f64,
    /// Dual-norm of the unit direction (NGD-FM, UGD, PUGD), when one was formed.
    pub direction_norm: Option<f64>,
    pub d_t: Option<f64>,
    pub perturb_norm: Option<f64>,
    pub flags: StepFlags,
}

impl StepRecord {
    fn new(state: &OptimizerState, lr: f64, loss: f64, grad: &RaggedTensor) -> Self {
        Self {
            step_index: state.step_count,
            lr_used: lr,
            loss_before: loss,
            grad_dual_norm: grad.dual_norm(),
            update_dual_norm: 0.0,
            direction_norm: None,
            d_t: None,
            perturb_norm: None,
            flags: StepFlags::default(),
        }
    }
}

/// An optimizer configuration together with its running state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: OptimizerState::default(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn kind(&self) -> OptimizerKind {
        self.config.kind
    }

    pub fn step<O: GradientOracle + ?Sized>(
        &mut self,
        params: &mut RaggedTensor,
        oracle: &O,
        lr: f64,
    ) -> Result<StepRecord> {
        let cfg = &self.config;
        let state = &mut self.state;
        match cfg.kind {
            OptimizerKind::Sgd => sgd_step(params, oracle, lr, cfg, state),
            OptimizerKind::Adagrad => adagrad_step(params, oracle, lr, cfg, state),
            OptimizerKind::NgdFm => ngd_fm_step(params, oracle, lr, cfg, state),
            OptimizerKind::NgdCw => ngd_cw_step(params, oracle, lr, cfg, state),
            OptimizerKind::Ugd => ugd_step(params, oracle, lr, cfg, state),
            OptimizerKind::Pugd => pugd_step(params, oracle, lr, cfg, state),
            OptimizerKind::Sam => sam_step(params, oracle, lr, cfg, state),
            OptimizerKind::Asam => asam_step(params, oracle, lr, cfg, state),
        }
    }
}

fn with_weight_decay(grad: &RaggedTensor, params: &RaggedTensor, wd: f64) -> Result<RaggedTensor> {
    if wd == 0.0 {
        return Ok(grad.clone());
    }
    grad.zip_with(params, |g, w| g + wd * w)
}

/// Evaluates `oracle` at `params + eps`, then restores `params` from a saved
/// copy so the caller sees bit-identical pre-perturbation values.
pub fn evaluate_perturbed<O: GradientOracle + ?Sized>(
    params: &mut RaggedTensor,
    eps: &RaggedTensor,
    oracle: &O,
) -> Result<(f64, RaggedTensor)> {
    let saved = params.clone();
    params.add_scaled(eps, 1.0)?;
    let out = oracle.loss_and_grad(params);
    *params = saved;
    out
}

/// Applies `params -= lr * direction` and returns the applied update's norm.
fn apply(params: &mut RaggedTensor, direction: &RaggedTensor, lr: f64) -> Result<f64> {
    params.add_scaled(direction, -lr)?;
    Ok(direction.scale(lr).dual_norm())
}

/// Heavy-ball (optionally Nesterov) direction for sgd / sam / asam.
fn momentum_direction(
    grad: RaggedTensor,
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
) -> Result<RaggedTensor> {
    if cfg.momentum == 0.0 {
        return Ok(grad);
    }
    let buf = match state.momentum_buf.take() {
        None => grad.clone(),
        Some(mut buf) => {
            buf.iter_mut().for_each(|b| *b *= cfg.momentum);
            buf.add_scaled(&grad, 1.0)?;
            buf
        }
    };
    let dir = if cfg.nesterov {
        let mut d = grad;
        d.add_scaled(&buf, cfg.momentum)?;
        d
    } else {
        buf.clone()
    };
    state.momentum_buf = Some(buf);
    Ok(dir)
}

/// Records `d_t` against the previous unit direction and stores the new one.
fn track_unit_direction(
    record: &mut StepRecord,
    state: &mut OptimizerState,
    unit: RaggedTensor,
) -> Result<()> {
    if let Some(prev) = &state.prev_unit_grad {
        record.d_t = Some(prev.difference_norm(&unit)?);
    }
    state.prev_unit_grad = Some(unit);
    Ok(())
}

/// Plain SGD: `w <- w - lr * g'` with optional momentum.
pub fn sgd_step<O: GradientOracle + ?Sized>(
    params: &mut RaggedTensor,
    oracle: &O,
    lr: f64,
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
) -> Result<StepRecord> {
    let (loss, g) = oracle.loss_and_grad(params)?;
    let mut record = StepRecord::new(state, lr, loss, &g);
    let gd = with_weight_decay(&g, params, cfg.weight_decay)?;
    let dir = momentum_direction(gd, cfg, state)?;
    record.update_dual_norm = apply(params, &dir, lr)?;
    state.step_count += 1;
    Ok(record)
}

/// Adagrad: `accum += g'^2`, `w <- w - lr * g' / (sqrt(accum) + eps)`.
pub fn adagrad_step<O: GradientOracle + ?Sized>(
    params: &mut RaggedTensor,
    oracle: &O,
    lr: f64,
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
) -> Result<StepRecord> {
    let (loss, g) = oracle.loss_and_grad(params)?;
    let mut record = StepRecord::new(state, lr, loss, &g);
    let gd = with_weight_decay(&g, params, cfg.weight_decay)?;
    let mut accum = state
        .adagrad_accum
        .take()
        .unwrap_or_else(|| params.zeros_like());
    for (a, x) in accum.iter_mut().zip(gd.iter()) {
        *a += x * x;
    }
    let dir = gd.zip_with(&accum, |x, a| x / (a.sqrt() + cfg.eps))?;
    state.adagrad_accum = Some(accum);
    record.update_dual_norm = apply(params, &dir, lr)?;
    state.step_count += 1;
    Ok(record)
}

/// NGD with the full-magnitude norm: the gradient is flattened into one
/// vector and divided by its L2 norm.
pub fn ngd_fm_step<O: GradientOracle + ?Sized>(
    params: &mut RaggedTensor,
    oracle: &O,
    lr: f64,
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
) -> Result<StepRecord> {
    let (loss, g) = oracle.loss_and_grad(params)?;
    let mut record = StepRecord::new(state, lr, loss, &g);
    let gd = with_weight_decay(&g, params, cfg.weight_decay)?;
    let flat = gd.flatten();
    let l2 = flat.iter().map(|x| x * x).sum::<f64>().sqrt();
    if l2 <= ZERO_NORM_GUARD {
        record.flags.zero_norm_update = true;
    } else {
        let normalized: Vec<f64> = flat.iter().map(|x| x / l2).collect();
        let dir = gd.with_flat_values(&normalized)?;
        record.direction_norm = Some(dir.dual_norm());
        record.update_dual_norm = apply(params, &dir, lr)?;
        track_unit_direction(&mut record, state, dir)?;
    }
    state.step_count += 1;
    Ok(record)
}

/// NGD with component-wise norms: every parameter tensor is normalized on
/// its own. Components whose norm is at the guard get no update.
pub fn ngd_cw_step<O: GradientOracle + ?Sized>(
    params: &mut RaggedTensor,
    oracle: &O,
    lr: f64,
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
) -> Result<StepRecord> {
    let (loss, g) = oracle.loss_and_grad(params)?;
    let mut record = StepRecord::new(state, lr, loss, &g);
    let mut dir = with_weight_decay(&g, params, cfg.weight_decay)?;
    for c in dir.components_mut() {
        let n = c.norm();
        if n <= ZERO_NORM_GUARD {
            c.values_mut().iter_mut().for_each(|v| *v = 0.0);
        } else {
            c.values_mut().iter_mut().for_each(|v| *v /= n);
        }
    }
    record.update_dual_norm = apply(params, &dir, lr)?;
    state.step_count += 1;
    Ok(record)
}

/// Unit gradient descent: `w <- w - lr * unit(g')`.
pub fn ugd_step<O: GradientOracle + ?Sized>(
    params: &mut RaggedTensor,
    oracle: &O,
    lr: f64,
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
) -> Result<StepRecord> {
    let (loss, g) = oracle.loss_and_grad(params)?;
    let mut record = StepRecord::new(state, lr, loss, &g);
    let gd = with_weight_decay(&g, params, cfg.weight_decay)?;
    match gd.unit() {
        Ok(u) => {
            record.direction_norm = Some(u.dual_norm());
            record.update_dual_norm = apply(params, &u, lr)?;
            track_unit_direction(&mut record, state, u)?;
        }
        Err(Error::ZeroNorm { .. }) => record.flags.zero_norm_update = true,
        Err(e) => return Err(e),
    }
    state.step_count += 1;
    Ok(record)
}

/// Perturbed unit gradient descent.
///
/// 1. `g = grad(w)`
/// 2. `eps = unit(|w| * g)` (elementwise product)
/// 3. `g* = grad(w + eps)` on the same oracle
/// 4. restore `w` from a saved copy
/// 5. `w <- w - lr * unit(g*' + g')`
///
/// A zero perturbation skips steps 2-4 with `g* = g`, which reduces the step
/// to UGD.
pub fn pugd_step<O: GradientOracle + ?Sized>(
    params: &mut RaggedTensor,
    oracle: &O,
    lr: f64,
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
) -> Result<StepRecord> {
    let (loss, g) = oracle.loss_and_grad(params)?;
    let mut record = StepRecord::new(state, lr, loss, &g);

    let g_star = match params.abs().mul(&g)?.unit() {
        Ok(eps) => {
            record.perturb_norm = Some(eps.dual_norm());
            evaluate_perturbed(params, &eps, oracle)?.1
        }
        Err(Error::ZeroNorm { .. }) => {
            record.flags.perturbation_skipped = true;
            g.clone()
        }
        Err(e) => return Err(e),
    };

    let mut combined = with_weight_decay(&g_star, params, cfg.weight_decay)?;
    combined.add_scaled(&with_weight_decay(&g, params, cfg.weight_decay)?, 1.0)?;
    match combined.unit() {
        Ok(u) => {
            record.direction_norm = Some(u.dual_norm());
            record.update_dual_norm = apply(params, &u, lr)?;
            track_unit_direction(&mut record, state, u)?;
        }
        Err(Error::ZeroNorm { .. }) => record.flags.zero_norm_update = true,
        Err(e) => return Err(e),
    }
    state.step_count += 1;
    Ok(record)
}

/// Shared second half of SAM / ASAM: gradient at `w + eps` (or at `w` when
/// the perturbation degenerated), then an SGD-with-momentum update.
fn sharpness_aware_update<O: GradientOracle + ?Sized>(
    params: &mut RaggedTensor,
    oracle: &O,
    lr: f64,
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
    g: RaggedTensor,
    eps: Option<RaggedTensor>,
    mut record: StepRecord,
) -> Result<StepRecord> {
    let g_star = match eps {
        Some(eps) => {
            record.perturb_norm = Some(eps.dual_norm());
            evaluate_perturbed(params, &eps, oracle)?.1
        }
        None => {
            record.flags.perturbation_skipped = true;
            g
        }
    };
    let gd = with_weight_decay(&g_star, params, cfg.weight_decay)?;
    let dir = momentum_direction(gd, cfg, state)?;
    record.update_dual_norm = apply(params, &dir, lr)?;
    state.step_count += 1;
    Ok(record)
}

/// SAM: `eps = rho * unit(g)`, then SGD on `grad(w + eps)`.
pub fn sam_step<O: GradientOracle + ?Sized>(
    params: &mut RaggedTensor,
    oracle: &O,
    lr: f64,
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
) -> Result<StepRecord> {
    let (loss, g) = oracle.loss_and_grad(params)?;
    let record = StepRecord::new(state, lr, loss, &g);
    let eps = match g.unit() {
        Ok(u) => Some(u.scale(cfg.rho)),
        Err(Error::ZeroNorm { .. }) => None,
        Err(e) => return Err(e),
    };
    sharpness_aware_update(params, oracle, lr, cfg, state, g, eps, record)
}

/// ASAM with `T_w = |w|`: `eps = rho * |w|^2 * g / ||(|w| * g)||`.
pub fn asam_step<O: GradientOracle + ?Sized>(
    params: &mut RaggedTensor,
    oracle: &O,
    lr: f64,
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
) -> Result<StepRecord> {
    let (loss, g) = oracle.loss_and_grad(params)?;
    let record = StepRecord::new(state, lr, loss, &g);
    let scale = params.abs();
    let scaled_grad = scale.mul(&g)?;
    let norm = scaled_grad.dual_norm();
    let eps = if norm <= ZERO_NORM_GUARD {
        None
    } else {
        Some(scale.mul(&scaled_grad)?.scale(cfg.rho / norm))
    };
    sharpness_aware_update(params, oracle, lr, cfg, state, g, eps, record)
}

/// Upper bound on the step-to-step difference of unit directions.
pub const BOUNDED_DIFFERENCE_CONSTANT: f64 = 2.0;

const UNIT_TOLERANCE: f64 = 1e-6;
const FORM_AGREEMENT: f64 = 1e-9;

/// `d_t = ||u_prev - u_curr||` for two unit tensors.
///
/// The value is cross-checked against the inner-product form
/// `sqrt(||a||^2 + ||b||^2 - 2<a, b>)`, which equals `sqrt(2 (1 - <a, b>))`
/// for exact units. The two squared distances must agree within 1e-9.
pub fn check_bounded_difference(prev_unit: &RaggedTensor, curr_unit: &RaggedTensor) -> Result<f64> {
    for t in [prev_unit, curr_unit] {
        let norm = t.dual_norm();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::NotUnit { norm });
        }
    }
    let d = prev_unit.difference_norm(curr_unit)?;
    let a2 = prev_unit.dot(prev_unit)?;
    let b2 = curr_unit.dot(curr_unit)?;
    let ip_sq = (a2 + b2 - 2.0 * prev_unit.dot(curr_unit)?).max(0.0);
    if (d * d - ip_sq).abs() > FORM_AGREEMENT {
        return Err(Error::InvariantViolation(format!(
            "difference forms disagree: direct {d}, inner-product {}",
            ip_sq.sqrt()
        )));
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// L(w) = ||w||^2 / 2 over a single component.
    fn bowl(params: &RaggedTensor) -> Result<(f64, RaggedTensor)> {
        Ok((params.dot(params)? / 2.0, params.clone()))
    }

    fn vec1(v: &[f64]) -> RaggedTensor {
        RaggedTensor::from_vec("w", v.to_vec()).unwrap()
    }

    fn run(kind: OptimizerKind, cfg: OptimizerConfig, w: &[f64], lr: f64) -> (RaggedTensor, StepRecord) {
        assert_eq!(cfg.kind, kind);
        let mut opt = Optimizer { config: cfg, state: OptimizerState::default() };
        let mut p = vec1(w);
        let r = opt.step(&mut p, &bowl, lr).unwrap();
        (p, r)
    }

    #[test]
    fn sgd_quadratic() {
        let (p, r) = run(OptimizerKind::Sgd, OptimizerConfig::plain(OptimizerKind::Sgd), &[2.0], 0.1);
        assert!((p.flatten()[0] - 1.8).abs() < 1e-15);
        assert_eq!(r.loss_before, 2.0);
        assert!((r.update_dual_norm - 0.2).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_no_change() {
        let zero = |p: &RaggedTensor| Ok((0.0, p.zeros_like()));
        let cfg = OptimizerConfig::plain(OptimizerKind::Sgd);
        let mut p = vec1(&[1.5, -2.0]);
        sgd_step(&mut p, &zero, 0.1, &cfg, &mut OptimizerState::default()).unwrap();
        assert_eq!(p.flatten(), vec![1.5, -2.0]);
    }

    #[test]
    fn sgd_momentum_unrolls() {
        let constant = |p: &RaggedTensor| Ok((0.0, p.map(|_| 1.0)));
        let cfg = OptimizerConfig {
            momentum: 0.9,
            ..OptimizerConfig::plain(OptimizerKind::Sgd)
        };
        let mut state = OptimizerState::default();
        let mut p = vec1(&[0.0]);
        sgd_step(&mut p, &constant, 0.1, &cfg, &mut state).unwrap();
        assert!((p.flatten()[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut p, &constant, 0.1, &cfg, &mut state).unwrap();
        assert!((p.flatten()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn sgd_nesterov_direction() {
        let constant = |p: &RaggedTensor| Ok((0.0, p.map(|_| 1.0)));
        let cfg = OptimizerConfig {
            momentum: 0.5,
            nesterov: true,
            ..OptimizerConfig::plain(OptimizerKind::Sgd)
        };
        let mut state = OptimizerState::default();
        let mut p = vec1(&[0.0]);
        // buf = 1, dir = 1 + 0.5 * 1
        sgd_step(&mut p, &constant, 1.0, &cfg, &mut state).unwrap();
        assert_eq!(p.flatten(), vec![-1.5]);
        // buf = 1.5, dir = 1 + 0.75
        sgd_step(&mut p, &constant, 1.0, &cfg, &mut state).unwrap();
        assert_eq!(p.flatten(), vec![-3.25]);
    }

    #[test]
    fn weight_decay_is_coupled() {
        let zero = |p: &RaggedTensor| Ok((0.0, p.zeros_like()));
        let cfg = OptimizerConfig {
            weight_decay: 0.5,
            ..OptimizerConfig::plain(OptimizerKind::Sgd)
        };
        let mut p = vec1(&[2.0]);
        sgd_step(&mut p, &zero, 0.1, &cfg, &mut OptimizerState::default()).unwrap();
        assert!((p.flatten()[0] - 1.9).abs() < 1e-15);

        // normalized variants see the decayed gradient too
        let cfg = OptimizerConfig {
            weight_decay: 0.5,
            ..OptimizerConfig::plain(OptimizerKind::Ugd)
        };
        let mut p = vec1(&[-2.0]);
        ugd_step(&mut p, &zero, 0.1, &cfg, &mut OptimizerState::default()).unwrap();
        assert!((p.flatten()[0] + 1.9).abs() < 1e-15);
    }

    #[test]
    fn adagrad_first_step_self_normalizes() {
        let (p, r) = run(
            OptimizerKind::Adagrad,
            OptimizerConfig::plain(OptimizerKind::Adagrad),
            &[3.0],
            0.1,
        );
        let expected = 0.1 * 3.0 / (3.0 + 1e-10);
        assert!((r.update_dual_norm - expected).abs() < 1e-15);
        assert!((p.flatten()[0] - (3.0 - expected)).abs() < 1e-15);
    }

    #[test]
    fn adagrad_constant_gradient_decays_like_inverse_sqrt() {
        let constant = |p: &RaggedTensor| Ok((0.0, p.map(|_| 1.0)));
        let cfg = OptimizerConfig::plain(OptimizerKind::Adagrad);
        let mut state = OptimizerState::default();
        let mut p = vec1(&[0.0]);
        for k in 1..=16u32 {
            let r = adagrad_step(&mut p, &constant, 0.1, &cfg, &mut state).unwrap();
            let expected = 0.1 / (k as f64).sqrt();
            assert!((r.update_dual_norm - expected).abs() < 1e-9, "step {k}");
        }
    }

    #[test]
    fn adagrad_zero_gradient_no_change() {
        let zero = |p: &RaggedTensor| Ok((0.0, p.zeros_like()));
        let cfg = OptimizerConfig::plain(OptimizerKind::Adagrad);
        let mut p = vec1(&[0.5]);
        adagrad_step(&mut p, &zero, 0.1, &cfg, &mut OptimizerState::default()).unwrap();
        assert_eq!(p.flatten(), vec![0.5]);
    }

    #[test]
    fn ngd_fm_normalizes_full_gradient() {
        let fixed = |p: &RaggedTensor| Ok((0.0, p.with_flat_values(&[3.0, 4.0]).unwrap()));
        let cfg = OptimizerConfig::plain(OptimizerKind::NgdFm);
        let mut p = vec1(&[0.0, 0.0]);
        let r = ngd_fm_step(&mut p, &fixed, 0.1, &cfg, &mut OptimizerState::default()).unwrap();
        let f = p.flatten();
        assert!((f[0] + 0.06).abs() < 1e-15 && (f[1] + 0.08).abs() < 1e-15);
        assert!((r.update_dual_norm - 0.1).abs() < 1e-15);
    }

    #[test]
    fn one_dimensional_normalized_steps_are_sign_descent() {
        for kind in [OptimizerKind::NgdFm, OptimizerKind::Ugd] {
            for (w, expect) in [(2.0, 1.5), (-2.0, -1.5), (0.1, -0.4)] {
                let (p, _) = run(kind, OptimizerConfig::plain(kind), &[w], 0.5);
                assert!((p.flatten()[0] - expect).abs() < 1e-15, "{kind} from {w}");
            }
        }
    }

    #[test]
    fn ngd_cw_per_component() {
        let fixed = |p: &RaggedTensor| Ok((0.0, p.with_flat_values(&[3.0, 4.0, 0.0, 5.0]).unwrap()));
        let mut p = RaggedTensor::from_parts([
            ("a", vec![2], vec![0.0, 0.0]),
            ("b", vec![2], vec![0.0, 0.0]),
        ])
        .unwrap();
        let cfg = OptimizerConfig::plain(OptimizerKind::NgdCw);
        let r = ngd_cw_step(&mut p, &fixed, 1.0, &cfg, &mut OptimizerState::default()).unwrap();
        let f = p.flatten();
        let expect = [-0.6, -0.8, 0.0, -1.0];
        for (a, b) in f.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((r.update_dual_norm - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ngd_cw_leaves_zero_component_untouched() {
        let fixed = |p: &RaggedTensor| Ok((0.0, p.with_flat_values(&[0.0, 0.0, 1.0]).unwrap()));
        let mut p = RaggedTensor::from_parts([
            ("a", vec![2], vec![0.25, -0.5]),
            ("b", vec![1], vec![1.0]),
        ])
        .unwrap();
        let cfg = OptimizerConfig::plain(OptimizerKind::NgdCw);
        ngd_cw_step(&mut p, &fixed, 0.5, &cfg, &mut OptimizerState::default()).unwrap();
        assert_eq!(p.flatten(), vec![0.25, -0.5, 0.5]);
    }

    #[test]
    fn ngd_cw_single_component_matches_ngd_fm() {
        let grad = |p: &RaggedTensor| Ok((0.0, p.map(|v| v * v - 0.3)));
        let cfg_cw = OptimizerConfig::plain(OptimizerKind::NgdCw);
        let cfg_fm = OptimizerConfig::plain(OptimizerKind::NgdFm);
        let mut a = vec1(&[0.4, -1.2, 2.0]);
        let mut b = a.clone();
        let (mut sa, mut sb) = (OptimizerState::default(), OptimizerState::default());
        for _ in 0..20 {
            ngd_cw_step(&mut a, &grad, 0.05, &cfg_cw, &mut sa).unwrap();
            ngd_fm_step(&mut b, &grad, 0.05, &cfg_fm, &mut sb).unwrap();
        }
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ugd_bowl_contracts_by_lr() {
        let (p, r) = run(OptimizerKind::Ugd, OptimizerConfig::plain(OptimizerKind::Ugd), &[0.6, 0.8], 0.1);
        assert!((p.dual_norm() - 0.9).abs() < 1e-15);
        assert!((r.update_dual_norm - 0.1).abs() < 1e-15);
        assert!(r.d_t.is_none());
    }

    #[test]
    fn ugd_logs_bounded_d_t() {
        // Gradient direction flips every step on this oscillating oracle.
        let flip = |p: &RaggedTensor| Ok((0.0, p.map(|v| if v > 0.0 { 1.0 } else { -1.0 })));
        let cfg = OptimizerConfig::plain(OptimizerKind::Ugd);
        let mut state = OptimizerState::default();
        let mut p = vec1(&[0.05]);
        let mut seen = Vec::new();
        for _ in 0..4 {
            let r = ugd_step(&mut p, &flip, 0.1, &cfg, &mut state).unwrap();
            seen.extend(r.d_t);
        }
        assert_eq!(seen.len(), 3);
        assert!(seen.iter().all(|&d| d <= 2.0 + 1e-12));
        assert!(seen.iter().any(|&d| (d - 2.0).abs() < 1e-12));
    }

    #[test]
    fn ugd_zero_gradient_is_flagged_zero_step() {
        let zero = |p: &RaggedTensor| Ok((0.0, p.zeros_like()));
        let cfg = OptimizerConfig::plain(OptimizerKind::Ugd);
        let mut p = vec1(&[1.0]);
        let r = ugd_step(&mut p, &zero, 0.1, &cfg, &mut OptimizerState::default()).unwrap();
        assert!(r.flags.zero_norm_update);
        assert_eq!(r.update_dual_norm, 0.0);
        assert_eq!(p.flatten(), vec![1.0]);
        assert_eq!(r.flags.label(), "zero_norm_update");
    }

    #[test]
    fn pugd_symbolic_one_dimensional() {
        // g = 2, eps = |2|*2/4 = 1, g* = grad(3) = 3, U = (3 + 2)/5 = 1
        let (p, r) = run(OptimizerKind::Pugd, OptimizerConfig::plain(OptimizerKind::Pugd), &[2.0], 0.5);
        assert_eq!(p.flatten(), vec![1.5]);
        assert_eq!(r.perturb_norm, Some(1.0));
        assert_eq!(r.direction_norm, Some(1.0));
        assert!(!r.flags.any());
    }

    #[test]
    fn pugd_zero_gradient_skips_perturbation() {
        let zero = |p: &RaggedTensor| Ok((0.0, p.zeros_like()));
        let cfg = OptimizerConfig::plain(OptimizerKind::Pugd);
        let mut p = vec1(&[1.0, 2.0]);
        let r = pugd_step(&mut p, &zero, 0.1, &cfg, &mut OptimizerState::default()).unwrap();
        assert!(r.flags.perturbation_skipped);
        assert!(r.flags.zero_norm_update);
        assert_eq!(p.flatten(), vec![1.0, 2.0]);
    }

    #[test]
    fn pugd_zero_weights_degenerate_to_ugd() {
        // |w| * g vanishes at w = 0 even though g does not.
        let shifted = |p: &RaggedTensor| Ok((0.0, p.map(|v| v - 1.0)));
        let cfg_p = OptimizerConfig::plain(OptimizerKind::Pugd);
        let cfg_u = OptimizerConfig::plain(OptimizerKind::Ugd);
        let mut a = vec1(&[0.0, 0.0]);
        let mut b = a.clone();
        let r = pugd_step(&mut a, &shifted, 0.1, &cfg_p, &mut OptimizerState::default()).unwrap();
        ugd_step(&mut b, &shifted, 0.1, &cfg_u, &mut OptimizerState::default()).unwrap();
        assert!(r.flags.perturbation_skipped && !r.flags.zero_norm_update);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn pugd_restores_parameters_exactly() {
        let wobbly = |p: &RaggedTensor| Ok((0.0, p.map(|v| (3.0 * v).sin() + 0.1 * v)));
        let cfg = OptimizerConfig::new(OptimizerKind::Pugd);
        let start = vec1(&[0.123456789, -7.5, 1e-3, 42.0]);
        let mut p = start.clone();
        // with lr = 0 the only way p can change is an inexact restore
        let r = pugd_step(&mut p, &wobbly, 0.0, &cfg, &mut OptimizerState::default()).unwrap();
        assert!(r.perturb_norm.is_some());
        assert_eq!(p, start);

        let mut q = start.clone();
        let eps = vec1(&[0.1, 0.2, 0.3, 0.4]);
        evaluate_perturbed(&mut q, &eps, &wobbly).unwrap();
        assert_eq!(q, start);
    }

    #[test]
    fn pugd_second_gradient_sees_perturbed_point() {
        use std::cell::RefCell;
        let calls = RefCell::new(Vec::new());
        let recording = |p: &RaggedTensor| {
            calls.borrow_mut().push(p.flatten());
            bowl(p)
        };
        let cfg = OptimizerConfig::plain(OptimizerKind::Pugd);
        let mut p = vec1(&[3.0, -4.0]);
        pugd_step(&mut p, &recording, 0.1, &cfg, &mut OptimizerState::default()).unwrap();
        let calls = calls.into_inner();
        assert_eq!(calls.len(), 2);
        // eps = unit(|w| * w) = unit([9, -16])
        let n = (81.0f64 + 256.0).sqrt();
        assert!((calls[1][0] - (3.0 + 9.0 / n)).abs() < 1e-15);
        assert!((calls[1][1] - (-4.0 - 16.0 / n)).abs() < 1e-15);
    }

    #[test]
    fn sam_symbolic_one_dimensional() {
        let cfg = OptimizerConfig {
            rho: 0.05,
            ..OptimizerConfig::plain(OptimizerKind::Sam)
        };
        let (p, r) = run(OptimizerKind::Sam, cfg, &[2.0], 0.1);
        assert!((p.flatten()[0] - 1.795).abs() < 1e-15);
        assert!((r.perturb_norm.unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn zero_radius_matches_sgd() {
        let grad = |p: &RaggedTensor| Ok((0.0, p.map(|v| v.powi(3) - v)));
        let sgd_cfg = OptimizerConfig::new(OptimizerKind::Sgd);
        for kind in [OptimizerKind::Sam, OptimizerKind::Asam] {
            let cfg = OptimizerConfig {
                rho: 0.0,
                ..OptimizerConfig::new(kind)
            };
            let mut a = vec1(&[0.3, -1.7, 2.2]);
            let mut b = a.clone();
            let (mut sa, mut sb) = (OptimizerState::default(), OptimizerState::default());
            for _ in 0..10 {
                if kind == OptimizerKind::Sam {
                    sam_step(&mut a, &grad, 0.05, &cfg, &mut sa).unwrap();
                } else {
                    asam_step(&mut a, &grad, 0.05, &cfg, &mut sa).unwrap();
                }
                sgd_step(&mut b, &grad, 0.05, &sgd_cfg, &mut sb).unwrap();
            }
            assert_eq!(a, b, "{kind}");
        }
    }

    #[test]
    fn sam_zero_gradient_falls_back_to_sgd() {
        let zero = |p: &RaggedTensor| Ok((0.0, p.zeros_like()));
        let cfg = OptimizerConfig::new(OptimizerKind::Sam);
        let mut p = vec1(&[2.0]);
        let r = sam_step(&mut p, &zero, 0.1, &cfg, &mut OptimizerState::default()).unwrap();
        assert!(r.flags.perturbation_skipped);
        // only weight decay moves the point
        assert!((p.flatten()[0] - (2.0 - 0.1 * 5e-4 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn asam_symbolic_one_dimensional() {
        use std::cell::RefCell;
        let seen = RefCell::new(Vec::new());
        let recording = |p: &RaggedTensor| {
            seen.borrow_mut().push(p.flatten()[0]);
            bowl(p)
        };
        let cfg = OptimizerConfig {
            rho: 0.5,
            ..OptimizerConfig::plain(OptimizerKind::Asam)
        };
        let mut p = vec1(&[2.0]);
        let r = asam_step(&mut p, &recording, 0.1, &cfg, &mut OptimizerState::default()).unwrap();
        // eps = 0.5 * (4 * 2) / 4 = 1, so g* = grad(3) = 3
        assert_eq!(r.perturb_norm, Some(1.0));
        assert_eq!(seen.into_inner(), vec![2.0, 3.0]);
        assert!((p.flatten()[0] - 1.7).abs() < 1e-15);
    }

    #[test]
    fn asam_isotropic_scale_is_collinear_with_sam() {
        use std::cell::RefCell;
        let seen = RefCell::new(Vec::new());
        let recording = |p: &RaggedTensor| {
            seen.borrow_mut().push(p.flatten());
            Ok((0.0, p.with_flat_values(&[1.0, -2.0, 0.5]).unwrap()))
        };
        let w = [1.5, -1.5, 1.5];
        for kind in [OptimizerKind::Sam, OptimizerKind::Asam] {
            let cfg = OptimizerConfig::plain(kind);
            let mut p = vec1(&w);
            let mut st = OptimizerState::default();
            if kind == OptimizerKind::Sam {
                sam_step(&mut p, &recording, 0.1, &cfg, &mut st).unwrap();
            } else {
                asam_step(&mut p, &recording, 0.1, &cfg, &mut st).unwrap();
            }
        }
        let seen = seen.into_inner();
        let eps_sam: Vec<f64> = seen[1].iter().zip(w).map(|(a, b)| a - b).collect();
        let eps_asam: Vec<f64> = seen[3].iter().zip(w).map(|(a, b)| a - b).collect();
        let ratio = eps_asam[0] / eps_sam[0];
        assert!(ratio > 0.0);
        for (a, s) in eps_asam.iter().zip(&eps_sam) {
            assert!((a - ratio * s).abs() < 1e-12);
        }
    }

    #[test]
    fn bounded_difference_cases() {
        let e1 = vec1(&[1.0, 0.0]);
        let e2 = vec1(&[0.0, 1.0]);
        let neg = vec1(&[-1.0, 0.0]);
        assert_eq!(check_bounded_difference(&e1, &neg).unwrap(), 2.0);
        assert_eq!(check_bounded_difference(&e1, &e1).unwrap(), 0.0);
        assert!((check_bounded_difference(&e1, &e2).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(matches!(
            check_bounded_difference(&vec1(&[1.1, 0.0]), &e1),
            Err(Error::NotUnit { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(Optimizer::new(OptimizerConfig::new(OptimizerKind::Pugd)).is_ok());
        let bad_lr = OptimizerConfig {
            lr_max: 1.5,
            ..OptimizerConfig::new(OptimizerKind::Ugd)
        };
        assert!(Optimizer::new(bad_lr).is_err());
        let bad_rho = OptimizerConfig {
            rho: 0.0,
            ..OptimizerConfig::new(OptimizerKind::Sam)
        };
        assert!(Optimizer::new(bad_rho).is_err());
        assert_eq!(OptimizerConfig::new(OptimizerKind::Asam).rho, 0.5);
        assert_eq!(OptimizerConfig::new(OptimizerKind::Sam).rho, 0.05);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in OptimizerKind::ALL {
            assert_eq!(k.name().parse::<OptimizerKind>().unwrap(), k);
        }
        assert_eq!("NGD-FM".parse::<OptimizerKind>().unwrap(), OptimizerKind::NgdFm);
        assert!("adam".parse::<OptimizerKind>().is_err());
    }
}
