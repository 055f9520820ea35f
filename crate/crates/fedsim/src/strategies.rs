//! Local-training procedures: FedAvg, FedProx, SCAFFOLD, and FedGG.
//!
//! FedGG augments the supervised loss with a model-cosine term that pulls the
//! local update direction toward the most recent global update direction,
//! weighted either by a fixed constant or adaptively by the product of the
//! local model's distance from the global model and the length of its latest
//! local step. The weight is treated as a constant inside each SGD step.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, MlpSpec, ModelState};
use crate::params::{ParamVector, NORM_GUARD};
use crate::seeding;
use rand::seq::SliceRandom;

/// How the cosine-loss weight is chosen each local iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightMode {
    /// `lambda = mu * ||w - w_global|| * ||w - w_prev_iter||`.
    Adaptive { mu: f64 },
    /// Constant weight whenever the cosine term is active.
    Fixed { lambda: f64 },
}

/// Which local-training procedure a client runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    FedAvg,
    FedProx { prox_mu: f64 },
    Scaffold,
    FedGg { weight_mode: WeightMode },
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::FedAvg => "fedavg",
            Variant::FedProx { .. } => "fedprox",
            Variant::Scaffold => "scaffold",
            Variant::FedGg { .. } => "fedgg",
        }
    }
}

/// Shared local-training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub variant: Variant,
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidArgument(format!("lr {} invalid", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum {} must be in [0, 1)",
                self.momentum
            )));
        }
        if self.batch_size == 0 || self.local_epochs == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and local_epochs must be >= 1".into(),
            ));
        }
        match self.variant {
            Variant::FedProx { prox_mu } if !(prox_mu >= 0.0) => Err(Error::InvalidArgument(
                format!("prox_mu {prox_mu} must be >= 0"),
            )),
            Variant::FedGg {
                weight_mode: WeightMode::Adaptive { mu },
            } if !(mu >= 0.0) => Err(Error::InvalidArgument(format!("mu {mu} must be >= 0"))),
            Variant::FedGg {
                weight_mode: WeightMode::Fixed { lambda },
            } if !(lambda >= 0.0) => Err(Error::InvalidArgument(format!(
                "lambda {lambda} must be >= 0"
            ))),
            _ => Ok(()),
        }
    }

    /// Local steps per round: `ceil(|D_i| * E / B)`.
    pub fn tau(&self, client_samples: usize) -> usize {
        (client_samples * self.local_epochs).div_ceil(self.batch_size)
    }
}

/// Per-client training context that persists across rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub indices: Vec<usize>,
    /// Global model from this client's last participation; the guidance
    /// direction anchor under partial participation.
    pub last_received_global: Option<ParamVector>,
    /// SCAFFOLD local control variate, zero until the first round.
    pub control: ParamVector,
}

impl ClientState {
    pub fn new(id: usize, indices: Vec<usize>, param_len: usize) -> Self {
        Self {
            id,
            indices,
            last_received_global: None,
            control: ParamVector::zeros(param_len),
        }
    }
}

/// The server state a client sees for one round. `w_prev` is that client's
/// guidance anchor: the global model from its previous participation (absent
/// on its first round).
#[derive(Debug, Clone)]
pub struct GlobalContext {
    pub round: usize,
    pub w_curr: ParamVector,
    pub w_prev: Option<ParamVector>,
    /// SCAFFOLD server control variate.
    pub control: ParamVector,
}

/// Why the cosine term was skipped for one local iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    RoundZero,
    FirstIteration,
    /// `||w_global - w_anchor||` at or below the norm guard (or no anchor).
    GuardGlobalDelta,
    /// `||w_local - w_global||` at or below the norm guard.
    GuardLocalDelta,
}

/// Outcome of the cosine term at one local iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CosineIteration {
    Skipped(SkipReason),
    Evaluated { loss: f64, lambda: f64 },
}

/// Per-iteration record of cosine-term activity, for instrumentation.
#[derive(Debug, Clone, Default)]
pub struct CosineTrace {
    /// One entry per local iteration `m = 1..=tau`.
    pub iterations: Vec<CosineIteration>,
}

impl CosineTrace {
    pub fn evaluations(&self) -> usize {
        self.iterations
            .iter()
            .filter(|i| matches!(i, CosineIteration::Evaluated { .. }))
            .count()
    }

    pub fn lambda_sum(&self) -> f64 {
        self.iterations
            .iter()
            .map(|i| match i {
                CosineIteration::Evaluated { lambda, .. } => *lambda,
                CosineIteration::Skipped(_) => 0.0,
            })
            .sum()
    }
}

/// SCAFFOLD control-variate update produced by one local round.
#[derive(Debug, Clone)]
pub struct ControlUpdate {
    pub new_control: ParamVector,
    pub delta: ParamVector,
}

/// Result of one client's local round.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub params: ParamVector,
    /// Mean supervised loss across the round's local iterations.
    pub mean_loss: f64,
    /// Local iterations executed (tau).
    pub steps: usize,
    pub cosine: CosineTrace,
    pub control: Option<ControlUpdate>,
}

/// Direction pair for the cosine term: `a = w_global - w_global_prev`
/// (guidance) and `b = w_local - w_global` (local drift), with norms and the
/// clamped cosine between them.
struct CosineParts {
    a: ParamVector,
    b: ParamVector,
    norm_a: f64,
    norm_b: f64,
    cos: f64,
}

impl CosineParts {
    fn compute(
        w_local: &ParamVector,
        w_global: &ParamVector,
        w_global_prev: &ParamVector,
    ) -> Result<Self> {
        let a = w_global.sub(w_global_prev)?;
        let b = w_local.sub(w_global)?;
        let norm_a = a.norm()?;
        let norm_b = b.norm()?;
        if norm_a <= NORM_GUARD {
            return Err(Error::ZeroNorm {
                op: "model_cosine",
                norm: norm_a,
            });
        }
        if norm_b <= NORM_GUARD {
            return Err(Error::ZeroNorm {
                op: "model_cosine",
                norm: norm_b,
            });
        }
        // Cauchy-Schwarz bounds the true value; clamp away float excess so
        // the loss stays inside [0, 2].
        let cos = (a.dot(&b)? / (norm_a * norm_b)).clamp(-1.0, 1.0);
        Ok(Self {
            a,
            b,
            norm_a,
            norm_b,
            cos,
        })
    }

    fn loss(&self) -> f64 {
        1.0 - self.cos
    }

    /// `-(1/||b||) * (a/||a|| - cos * b/||b||)`: the derivative of the loss
    /// with respect to `w_local`. Orthogonal to `b`; zero when aligned.
    fn grad(&self) -> Result<ParamVector> {
        let unit = self.a.scale(1.0 / (self.norm_a * self.norm_b))?;
        let bracket = self.b.axpy(-self.cos / (self.norm_b * self.norm_b), &unit)?;
        bracket.scale(-1.0)
    }
}

/// `1 - cos(w_global - w_global_prev, w_local - w_global)`, in [0, 2].
pub fn model_cosine_loss(
    w_local: &ParamVector,
    w_global: &ParamVector,
    w_global_prev: &ParamVector,
) -> Result<f64> {
    Ok(CosineParts::compute(w_local, w_global, w_global_prev)?.loss())
}

/// Gradient of [`model_cosine_loss`] with respect to `w_local`.
pub fn model_cosine_grad(
    w_local: &ParamVector,
    w_global: &ParamVector,
    w_global_prev: &ParamVector,
) -> Result<ParamVector> {
    CosineParts::compute(w_local, w_global, w_global_prev)?.grad()
}

/// Adaptive cosine-loss weight:
/// `mu * ||w_curr - w_global|| * ||w_curr - w_prev_iter||`.
pub fn adaptive_lambda(
    w_local_curr: &ParamVector,
    w_local_prev_iter: &ParamVector,
    w_global: &ParamVector,
    mu: f64,
) -> Result<f64> {
    if !(mu >= 0.0) {
        return Err(Error::InvalidArgument(format!("mu {mu} must be >= 0")));
    }
    let dist_global = w_local_curr.sub(w_global)?.norm()?;
    let dist_step = w_local_curr.sub(w_local_prev_iter)?.norm()?;
    Ok(mu * dist_global * dist_step)
}

/// Mini-batch schedule for one round: epoch-by-epoch shuffles concatenated
/// and cut into `batch_size` chunks, giving exactly `ceil(n*E/B)` batches.
fn batch_schedule(
    indices: &[usize],
    cfg: &TrainerConfig,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Vec<Vec<usize>> {
    let mut stream = Vec::with_capacity(indices.len() * cfg.local_epochs);
    for _ in 0..cfg.local_epochs {
        let mut epoch: Vec<usize> = indices.to_vec();
        epoch.shuffle(rng);
        stream.extend(epoch);
    }
    stream.chunks(cfg.batch_size).map(|c| c.to_vec()).collect()
}

fn check_client(client: &ClientState, dataset: &Dataset) -> Result<()> {
    if client.indices.is_empty() {
        return Err(Error::EmptyClient { id: client.id });
    }
    if let Some(&bad) = client.indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::InvalidArgument(format!(
            "client {} index {bad} out of range ({})",
            client.id,
            dataset.len()
        )));
    }
    Ok(())
}

/// The shared mini-batch SGD loop. `extra_grad` lets a variant add a term to
/// the supervised gradient before the momentum step; returning `None` leaves
/// the FedAvg update untouched (bit-for-bit).
fn run_local_sgd<F>(
    client: &ClientState,
    ctx: &GlobalContext,
    cfg: &TrainerConfig,
    spec: &MlpSpec,
    dataset: &Dataset,
    master_seed: u64,
    mut extra_grad: F,
) -> Result<(ParamVector, f64, usize)>
where
    F: FnMut(usize, &ParamVector, &ParamVector) -> Result<Option<ParamVector>>,
{
    check_client(client, dataset)?;
    let mut rng = seeding::client_rng(master_seed, client.id, ctx.round);
    let schedule = batch_schedule(&client.indices, cfg, &mut rng);
    let mut w = ctx.w_curr.clone();
    let mut velocity = ParamVector::zeros(w.len());
    let mut loss_sum = 0.0;
    for (step, batch_indices) in schedule.iter().enumerate() {
        let batch = dataset.gather(batch_indices)?;
        let state = ModelState::new(spec.clone(), w.clone())?;
        let (loss, grad) = model::loss_and_grad_sup(&state, &batch)?;
        loss_sum += loss;
        let total_grad = match extra_grad(step + 1, &w, &grad)? {
            Some(g) => g,
            None => grad,
        };
        let (new_w, new_v) = model::sgd_momentum_step(&w, &total_grad, &velocity, cfg.lr, cfg.momentum)?;
        w = new_w;
        velocity = new_v;
    }
    let steps = schedule.len();
    Ok((w, loss_sum / steps as f64, steps))
}

/// Plain local SGD on the supervised loss (FedAvg client step).
pub fn local_train_fedavg(
    client: &ClientState,
    ctx: &GlobalContext,
    cfg: &TrainerConfig,
    spec: &MlpSpec,
    dataset: &Dataset,
    master_seed: u64,
) -> Result<LocalOutcome> {
    let (params, mean_loss, steps) =
        run_local_sgd(client, ctx, cfg, spec, dataset, master_seed, |_, _, _| Ok(None))?;
    Ok(LocalOutcome {
        params,
        mean_loss,
        steps,
        cosine: CosineTrace::default(),
        control: None,
    })
}

/// FedAvg loop with the proximal pull `prox_mu * (w - w_global)` added to
/// every batch gradient (the gradient of `(prox_mu/2)*||w - w_global||^2`).
pub fn local_train_fedprox(
    client: &ClientState,
    ctx: &GlobalContext,
    cfg: &TrainerConfig,
    spec: &MlpSpec,
    dataset: &Dataset,
    master_seed: u64,
    prox_mu: f64,
) -> Result<LocalOutcome> {
    if !(prox_mu >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "prox_mu {prox_mu} must be >= 0"
        )));
    }
    let w_global = ctx.w_curr.clone();
    let (params, mean_loss, steps) = run_local_sgd(
        client,
        ctx,
        cfg,
        spec,
        dataset,
        master_seed,
        |_, w, grad| {
            if prox_mu == 0.0 {
                return Ok(None);
            }
            let pull = w.sub(&w_global)?;
            Ok(Some(pull.axpy(prox_mu, grad)?))
        },
    )?;
    Ok(LocalOutcome {
        params,
        mean_loss,
        steps,
        cosine: CosineTrace::default(),
        control: None,
    })
}

/// SCAFFOLD client step: plain SGD on the corrected gradient
/// `g - c_i + c` (the control-variate form uses no momentum), then
/// `c_i+ = c_i - c + (w_global - w)/(tau*lr)` and `delta = c_i+ - c_i`.
pub fn local_train_scaffold(
    client: &ClientState,
    ctx: &GlobalContext,
    cfg: &TrainerConfig,
    spec: &MlpSpec,
    dataset: &Dataset,
    master_seed: u64,
) -> Result<LocalOutcome> {
    check_client(client, dataset)?;
    if cfg.lr <= 0.0 {
        return Err(Error::InvalidArgument(
            "scaffold requires a positive learning rate".into(),
        ));
    }
    let correction = ctx.control.sub(&client.control)?; // c - c_i
    let mut rng = seeding::client_rng(master_seed, client.id, ctx.round);
    let schedule = batch_schedule(&client.indices, cfg, &mut rng);
    let mut w = ctx.w_curr.clone();
    let mut loss_sum = 0.0;
    for batch_indices in &schedule {
        let batch = dataset.gather(batch_indices)?;
        let state = ModelState::new(spec.clone(), w.clone())?;
        let (loss, grad) = model::loss_and_grad_sup(&state, &batch)?;
        loss_sum += loss;
        let corrected = correction.axpy(1.0, &grad)?;
        w = corrected.axpy(-cfg.lr, &w)?;
    }
    let tau = schedule.len();
    // c_i+ = c_i - c + (w^r - w_i) / (tau * lr)
    let drift = ctx.w_curr.sub(&w)?;
    let new_control = drift.axpy(
        1.0 / (tau as f64 * cfg.lr),
        &client.control.sub(&ctx.control)?,
    )?;
    let delta = new_control.sub(&client.control)?;
    Ok(LocalOutcome {
        params: w,
        mean_loss: loss_sum / tau as f64,
        steps: tau,
        cosine: CosineTrace::default(),
        control: Some(ControlUpdate { new_control, delta }),
    })
}

/// FedGG client step: FedAvg plus the weighted model-cosine gradient.
///
/// The cosine term is active only when the round is nonzero, the iteration
/// index exceeds one, and both direction norms clear the guard; otherwise the
/// update is exactly the FedAvg update for that iteration. The weight is
/// recomputed every iteration and treated as a constant inside the step.
pub fn local_train_fedgg(
    client: &ClientState,
    ctx: &GlobalContext,
    cfg: &TrainerConfig,
    spec: &MlpSpec,
    dataset: &Dataset,
    master_seed: u64,
    weight_mode: WeightMode,
) -> Result<LocalOutcome> {
    // Guidance direction: current global minus the client's last-seen global
    // (equals w^{r-1} under full participation).
    let anchor = client
        .last_received_global
        .as_ref()
        .or(ctx.w_prev.as_ref());
    let global_delta = match anchor {
        Some(prev) => Some(ctx.w_curr.sub(prev)?),
        None => None,
    };
    let global_delta_norm = match &global_delta {
        Some(d) => d.norm()?,
        None => 0.0,
    };
    let round = ctx.round;
    let w_global = ctx.w_curr.clone();
    let mut prev_iterate = ctx.w_curr.clone(); // w_i^r(m-2), seeded with w_i^r(0)
    let mut trace = CosineTrace::default();

    let (params, mean_loss, steps) = run_local_sgd(
        client,
        ctx,
        cfg,
        spec,
        dataset,
        master_seed,
        |m, w, grad| {
            let outcome;
            let mut total = None;
            if round == 0 {
                outcome = CosineIteration::Skipped(SkipReason::RoundZero);
            } else if m == 1 {
                outcome = CosineIteration::Skipped(SkipReason::FirstIteration);
            } else if global_delta.is_none() || global_delta_norm <= NORM_GUARD {
                outcome = CosineIteration::Skipped(SkipReason::GuardGlobalDelta);
            } else {
                let b = w.sub(&w_global)?;
                let norm_b = b.norm()?;
                if norm_b <= NORM_GUARD {
                    outcome = CosineIteration::Skipped(SkipReason::GuardLocalDelta);
                } else {
                    let a = global_delta.as_ref().unwrap();
                    let cos = (a.dot(&b)? / (global_delta_norm * norm_b)).clamp(-1.0, 1.0);
                    let parts = CosineParts {
                        a: a.clone(),
                        b,
                        norm_a: global_delta_norm,
                        norm_b,
                        cos,
                    };
                    let lambda = match weight_mode {
                        WeightMode::Adaptive { mu } => {
                            adaptive_lambda(w, &prev_iterate, &w_global, mu)?
                        }
                        WeightMode::Fixed { lambda } => lambda,
                    };
                    outcome = CosineIteration::Evaluated {
                        loss: parts.loss(),
                        lambda,
                    };
                    if lambda != 0.0 {
                        total = Some(parts.grad()?.axpy(lambda, grad)?);
                    }
                }
            }
            trace.iterations.push(outcome);
            prev_iterate = w.clone();
            Ok(total)
        },
    )?;
    Ok(LocalOutcome {
        params,
        mean_loss,
        steps,
        cosine: trace,
        control: None,
    })
}

/// Dispatch on the configured variant.
pub fn local_train(
    client: &ClientState,
    ctx: &GlobalContext,
    cfg: &TrainerConfig,
    spec: &MlpSpec,
    dataset: &Dataset,
    master_seed: u64,
) -> Result<LocalOutcome> {
    match cfg.variant {
        Variant::FedAvg => local_train_fedavg(client, ctx, cfg, spec, dataset, master_seed),
        Variant::FedProx { prox_mu } => {
            local_train_fedprox(client, ctx, cfg, spec, dataset, master_seed, prox_mu)
        }
        Variant::Scaffold => local_train_scaffold(client, ctx, cfg, spec, dataset, master_seed),
        Variant::FedGg { weight_mode } => {
            local_train_fedgg(client, ctx, cfg, spec, dataset, master_seed, weight_mode)
        }
    }
}
