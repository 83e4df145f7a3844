//! Block online EM.
//!
//! Observations are cut into blocks of increasing length `τ_n`. The parameter
//! is frozen within a block; at the end of block `n + 1` the block statistic
//! `S̃_n` computed under `θ_n` is mapped through the M-step to give `θ_{n+1}`.
//! The averaged estimator applies the M-step to the `τ`-weighted running mean
//! `Σ̃` of the block statistics instead.

use std::borrow::Borrow;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{MStep, Parameter, ParameterBox, StateSpaceModel, SufficientStatistic};
use crate::rng::{stream, Purpose};
use crate::scalar::Real;
use crate::smc::{init_particles, InstrumentalKernel, ParticleSystem};
use crate::smoother::ForwardSmoother;

// Guards floor() against powf landing just below an integer.
const FLOOR_SLACK: f64 = 1e-12;

fn floor_count(x: f64) -> usize {
    let v = (x * (1.0 + FLOOR_SLACK)).floor();
    if v < 1.0 {
        1
    } else if v >= usize::MAX as f64 {
        usize::MAX
    } else {
        v as usize
    }
}

/// Number of particles used on a block of length `τ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParticleRule {
    /// `N = ⌊c τ^d⌋`, at least one.
    Power { c: f64, d: f64 },
    Constant(usize),
}

impl ParticleRule {
    pub fn count(&self, tau: usize) -> usize {
        match *self {
            ParticleRule::Power { c, d } => floor_count(c * (tau as f64).powf(d)),
            ParticleRule::Constant(n) => n.max(1),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            ParticleRule::Power { c, d } if !(c > 0.0 && c.is_finite() && d.is_finite()) => Err(
                Error::InvalidSchedule(format!("particle rule needs c > 0 and finite d (c = {c}, d = {d})")),
            ),
            ParticleRule::Constant(0) => Err(Error::InvalidSchedule(
                "constant particle count must be at least 1".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Length, end time and particle count of block `n` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSize {
    pub n: usize,
    pub tau: usize,
    /// `T_n = τ_1 + … + τ_n`.
    pub elapsed: usize,
    pub particles: usize,
}

/// `τ_n = ⌊c_τ n^a⌋` with `a > 1`, particle counts from a [`ParticleRule`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSchedule {
    c_tau: f64,
    a: f64,
    particles: ParticleRule,
    n_blocks: usize,
    warnings: Vec<String>,
}

impl BlockSchedule {
    pub fn new(c_tau: f64, a: f64, particles: ParticleRule, n_blocks: usize) -> Result<Self> {
        if !(a > 1.0) || !a.is_finite() {
            return Err(Error::InvalidSchedule(format!(
                "block growth exponent must satisfy a > 1, got {a}"
            )));
        }
        if !(c_tau > 0.0) || !c_tau.is_finite() {
            return Err(Error::InvalidSchedule(format!(
                "block scale must be positive, got {c_tau}"
            )));
        }
        particles.validate()?;
        Ok(BlockSchedule {
            c_tau,
            a,
            particles,
            n_blocks,
            warnings: Vec::new(),
        })
    }

    /// Records a warning when the particle exponent is below `(a + 1) / (2a)`,
    /// the smallest value for which the Monte Carlo error does not dominate.
    pub fn require_rate_optimal(mut self) -> Self {
        let needed = (self.a + 1.0) / (2.0 * self.a);
        let msg = match self.particles {
            ParticleRule::Power { d, .. } if d + 1e-12 < needed => Some(format!(
                "particle exponent d = {d} is below (a + 1)/(2a) = {needed:.4}"
            )),
            ParticleRule::Constant(_) => Some(format!(
                "constant particle count cannot match block growth; need d >= {needed:.4}"
            )),
            _ => None,
        };
        if let Some(m) = msg {
            log::warn!("{m}");
            self.warnings.push(m);
        }
        self
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn exponent(&self) -> f64 {
        self.a
    }

    pub fn particle_rule(&self) -> ParticleRule {
        self.particles
    }

    pub fn with_blocks(mut self, n_blocks: usize) -> Self {
        self.n_blocks = n_blocks;
        self
    }

    /// `τ_n` for `n ≥ 1`.
    pub fn block_length(&self, n: usize) -> usize {
        floor_count(self.c_tau * (n as f64).powf(self.a))
    }

    pub fn schedule(&self, n: usize) -> Result<BlockSize> {
        if n == 0 {
            return Err(Error::InvalidArgument("blocks are numbered from 1".into()));
        }
        let elapsed = (1..=n).map(|k| self.block_length(k)).sum();
        let tau = self.block_length(n);
        Ok(BlockSize {
            n,
            tau,
            elapsed,
            particles: self.particles.count(tau),
        })
    }

    /// Blocks `1..=n_blocks` in order.
    pub fn iter(&self) -> impl Iterator<Item = BlockSize> + '_ {
        let mut elapsed = 0;
        (1..=self.n_blocks).map(move |n| {
            let tau = self.block_length(n);
            elapsed += tau;
            BlockSize {
                n,
                tau,
                elapsed,
                particles: self.particles.count(tau),
            }
        })
    }

    /// `T_{n_blocks}`.
    pub fn total_observations(&self) -> usize {
        self.iter().last().map_or(0, |b| b.elapsed)
    }
}

/// Estimator state after `block` updates.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState<F> {
    pub theta: Parameter<F>,
    /// Running `τ`-weighted mean of the block statistics since averaging began.
    pub sigma_tilde: SufficientStatistic<F>,
    /// `θ̄(Σ̃)` once averaging is active, `θ` before.
    pub theta_tilde: Parameter<F>,
    pub block: usize,
    /// `T_n`.
    pub elapsed: usize,
    /// Observations behind `Σ̃`.
    pub averaged: usize,
    /// First block (1-based) whose statistic enters `Σ̃`; 0 and 1 both mean
    /// the first block.
    pub averaging_start: usize,
}

impl<F: Real> EstimatorState<F> {
    pub fn new(theta0: Parameter<F>, stat_dim: usize, averaging_start: usize) -> Self {
        EstimatorState {
            theta_tilde: theta0.clone(),
            theta: theta0,
            sigma_tilde: SufficientStatistic::zeros(stat_dim),
            block: 0,
            elapsed: 0,
            averaged: 0,
            averaging_start,
        }
    }

    pub fn averaging_active(&self) -> bool {
        self.averaged > 0
    }
}

/// Computes block statistics and owns the M-step for them.
pub trait BlockEstimator<F: Real> {
    type Obs;

    fn parameter_box(&self) -> &ParameterBox<F>;

    fn stat_dim(&self) -> usize;

    /// `S̃(θ, Y)` from exactly `block.tau` observations taken in order from
    /// `observations`. Fewer observations is a truncation error.
    fn block_statistic<I>(
        &mut self,
        theta: &Parameter<F>,
        block: &BlockSize,
        observations: I,
    ) -> Result<SufficientStatistic<F>>
    where
        I: Iterator,
        I::Item: Borrow<Self::Obs>;

    /// `theta` is the estimate the statistic was computed under.
    fn check_statistic(&self, theta: &Parameter<F>, s: &[F]) -> Result<()>;

    fn m_step(&self, theta: &Parameter<F>, s: &SufficientStatistic<F>) -> Result<MStep<F>>;

    fn project_statistic(
        &self,
        theta: &Parameter<F>,
        s: &SufficientStatistic<F>,
    ) -> SufficientStatistic<F>;
}

/// What happened during one update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct UpdateEvents {
    /// The M-step result was clipped into the box.
    pub clipped: bool,
    /// The block statistic was outside the domain and got projected.
    pub projected: bool,
}

/// `(w_old Σ̃ + τ s) / (w_old + τ)`.
pub fn average_statistic<F: Real>(
    sigma: &SufficientStatistic<F>,
    weight: usize,
    s: &SufficientStatistic<F>,
    tau: usize,
) -> SufficientStatistic<F> {
    let total = F::from_usize_lossy(weight + tau);
    sigma.combine(
        F::from_usize_lossy(weight) / total,
        s,
        F::from_usize_lossy(tau) / total,
    )
}

/// One parameter update from the statistic of a block of length `tau`.
pub fn pboem_update<F, B>(
    estimator: &B,
    state: EstimatorState<F>,
    s: SufficientStatistic<F>,
    tau: usize,
    strict: bool,
) -> Result<(EstimatorState<F>, UpdateEvents)>
where
    F: Real,
    B: BlockEstimator<F> + ?Sized,
{
    let block = state.block + 1;
    let mut events = UpdateEvents::default();
    let s = match estimator.check_statistic(&state.theta, s.as_slice()) {
        Ok(()) => s,
        Err(e) if strict => return Err(e),
        Err(e) => {
            log::warn!("block {block}: statistic projected onto its domain ({e})");
            events.projected = true;
            estimator.project_statistic(&state.theta, &s)
        }
    };
    let step = estimator.m_step(&state.theta, &s)?;
    if step.clipped {
        log::info!("block {block}: M-step clipped to the parameter box");
    }
    events.clipped = step.clipped;
    let theta = step.theta;

    let (sigma_tilde, averaged, theta_tilde) = if block >= state.averaging_start {
        let sigma = average_statistic(&state.sigma_tilde, state.averaged, &s, tau);
        let sigma = match estimator.check_statistic(&theta, sigma.as_slice()) {
            Ok(()) => sigma,
            Err(e) if strict => return Err(e),
            Err(e) => {
                log::warn!("block {block}: averaged statistic projected ({e})");
                estimator.project_statistic(&theta, &sigma)
            }
        };
        let avg = estimator.m_step(&theta, &sigma)?;
        (sigma, state.averaged + tau, avg.theta)
    } else {
        (state.sigma_tilde, state.averaged, theta.clone())
    };

    Ok((
        EstimatorState {
            theta,
            sigma_tilde,
            theta_tilde,
            block,
            elapsed: state.elapsed + tau,
            averaged,
            averaging_start: state.averaging_start,
        },
        events,
    ))
}

/// Settings of [`run`] that are not part of the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub averaging_start: usize,
    /// Abort instead of projecting a statistic that left its domain.
    pub strict: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            averaging_start: 25,
            strict: false,
        }
    }
}

/// One row of the estimate trajectory. Row 0 holds `θ_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord<F> {
    pub block: usize,
    pub elapsed: usize,
    pub tau: usize,
    pub particles: usize,
    pub theta: Vec<F>,
    pub theta_avg: Vec<F>,
    pub events: UpdateEvents,
}

/// Runs `schedule.n_blocks()` blocks over `stream`. The stream is read once,
/// one observation at a time.
pub fn run<F, B, I>(
    estimator: &mut B,
    schedule: &BlockSchedule,
    theta0: Parameter<F>,
    stream: I,
    options: &RunOptions,
) -> Result<Vec<TraceRecord<F>>>
where
    F: Real,
    B: BlockEstimator<F>,
    I: IntoIterator,
    I::Item: Borrow<B::Obs>,
{
    run_with(estimator, schedule, theta0, stream, options, |_, _| {})
}

/// [`run`] with a callback invoked after every block.
pub fn run_with<F, B, I, O>(
    estimator: &mut B,
    schedule: &BlockSchedule,
    theta0: Parameter<F>,
    stream: I,
    options: &RunOptions,
    mut observer: O,
) -> Result<Vec<TraceRecord<F>>>
where
    F: Real,
    B: BlockEstimator<F>,
    I: IntoIterator,
    I::Item: Borrow<B::Obs>,
    O: FnMut(&TraceRecord<F>, &EstimatorState<F>),
{
    if theta0.dim() != estimator.parameter_box().dim()
        || !estimator.parameter_box().contains(theta0.as_slice())
    {
        return Err(Error::domain("initial parameter outside the model's box"));
    }
    let mut state = EstimatorState::new(theta0, estimator.stat_dim(), options.averaging_start);
    let mut trace = Vec::with_capacity(schedule.n_blocks() + 1);
    trace.push(TraceRecord {
        block: 0,
        elapsed: 0,
        tau: 0,
        particles: 0,
        theta: state.theta.as_slice().to_vec(),
        theta_avg: state.theta_tilde.as_slice().to_vec(),
        events: UpdateEvents::default(),
    });
    let mut source = stream.into_iter();
    for size in schedule.iter() {
        let s = estimator
            .block_statistic(&state.theta, &size, source.by_ref().take(size.tau))
            .map_err(|e| e.in_block(size.n))?;
        let (next, events) = pboem_update(estimator, state, s, size.tau, options.strict)?;
        state = next;
        let record = TraceRecord {
            block: size.n,
            elapsed: size.elapsed,
            tau: size.tau,
            particles: size.particles,
            theta: state.theta.as_slice().to_vec(),
            theta_avg: state.theta_tilde.as_slice().to_vec(),
            events,
        };
        observer(&record, &state);
        trace.push(record);
    }
    Ok(trace)
}

/// Forward-only smoothing of one block under a frozen `theta`, starting from
/// `init` (a `t = 0` particle system). `observer` sees the filter after each
/// step. Returns the block statistic and the final filter.
#[allow(clippy::too_many_arguments)]
pub fn run_block<F, M, K, I, R, O>(
    model: &M,
    theta: &Parameter<F>,
    kernel: &K,
    init: ParticleSystem<F, M::State>,
    observations: I,
    block: &BlockSize,
    rng: &mut R,
    mut observer: O,
) -> Result<(SufficientStatistic<F>, ParticleSystem<F, M::State>)>
where
    F: Real,
    M: StateSpaceModel<F>,
    K: InstrumentalKernel<F, M>,
    I: Iterator,
    I::Item: Borrow<M::Obs>,
    R: Rng + ?Sized,
    O: FnMut(&ParticleSystem<F, M::State>),
{
    let mut smoother = ForwardSmoother::new(init, model.stat_dim())?;
    let mut seen = 0;
    for y in observations.take(block.tau) {
        smoother
            .step(model, theta, kernel, y.borrow(), rng)
            .map_err(|e| e.in_block(block.n))?;
        observer(smoother.particles());
        seen += 1;
    }
    if seen < block.tau {
        return Err(Error::Truncated {
            completed_blocks: block.n - 1,
        });
    }
    let s = smoother.finish().map_err(|e| e.in_block(block.n))?;
    let (ps, _) = smoother.into_parts();
    Ok((s, ps))
}

/// How each block's particle filter is started.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlockInit {
    /// Fresh draws from `χ` under the current parameter.
    #[default]
    FixedChi,
    /// Resample the final filter of the previous block (first block uses `χ`).
    CarryFilter,
}

/// Particle block statistics for a fixed model.
///
/// Block `n` draws from its own random stream `(master_seed, replication,
/// Filter, n)`.
#[derive(Debug, Clone)]
pub struct ParticleBlockEstimator<F: Real, M: StateSpaceModel<F>, K> {
    model: M,
    kernel: K,
    init: BlockInit,
    master_seed: u64,
    replication: u64,
    carried: Option<ParticleSystem<F, M::State>>,
}

impl<F: Real, M: StateSpaceModel<F>, K: InstrumentalKernel<F, M>> ParticleBlockEstimator<F, M, K> {
    pub fn new(model: M, kernel: K, init: BlockInit, master_seed: u64, replication: u64) -> Self {
        ParticleBlockEstimator {
            model,
            kernel,
            init,
            master_seed,
            replication,
            carried: None,
        }
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    /// Final filter of the last block, kept only with [`BlockInit::CarryFilter`].
    pub fn carried_filter(&self) -> Option<&ParticleSystem<F, M::State>> {
        self.carried.as_ref()
    }
}

impl<F, M, K> BlockEstimator<F> for ParticleBlockEstimator<F, M, K>
where
    F: Real,
    M: StateSpaceModel<F>,
    K: InstrumentalKernel<F, M>,
{
    type Obs = M::Obs;

    fn parameter_box(&self) -> &ParameterBox<F> {
        self.model.parameter_box()
    }

    fn stat_dim(&self) -> usize {
        self.model.stat_dim()
    }

    fn block_statistic<I>(
        &mut self,
        theta: &Parameter<F>,
        block: &BlockSize,
        observations: I,
    ) -> Result<SufficientStatistic<F>>
    where
        I: Iterator,
        I::Item: Borrow<M::Obs>,
    {
        let mut rng = stream(
            self.master_seed,
            self.replication,
            Purpose::Filter,
            block.n as u64,
        );
        let init = match (&self.init, self.carried.take()) {
            (BlockInit::CarryFilter, Some(prev)) => prev.resample(block.particles, &mut rng)?,
            _ => init_particles(&self.model, theta, block.particles, &mut rng)?,
        };
        let (s, last) = run_block(
            &self.model,
            theta,
            &self.kernel,
            init,
            observations,
            block,
            &mut rng,
            |_| {},
        )?;
        if self.init == BlockInit::CarryFilter {
            self.carried = Some(last);
        }
        Ok(s)
    }

    fn check_statistic(&self, _theta: &Parameter<F>, s: &[F]) -> Result<()> {
        self.model.check_statistic(s)
    }

    fn m_step(&self, _theta: &Parameter<F>, s: &SufficientStatistic<F>) -> Result<MStep<F>> {
        self.model.m_step(s)
    }

    fn project_statistic(
        &self,
        _theta: &Parameter<F>,
        s: &SufficientStatistic<F>,
    ) -> SufficientStatistic<F> {
        self.model.project_statistic(s)
    }
}

/// Exact E-step: the block is collected and handed to an exact smoother such
/// as [`crate::oracles::exact_statistic_lgssm`]. Reference runs only, since
/// the block is held in memory.
pub struct ExactBlockEstimator<M, E> {
    model: M,
    exact: E,
}

impl<M, E> ExactBlockEstimator<M, E> {
    pub fn new(model: M, exact: E) -> Self {
        ExactBlockEstimator { model, exact }
    }

    pub fn model(&self) -> &M {
        &self.model
    }
}

impl<F, M, E> BlockEstimator<F> for ExactBlockEstimator<M, E>
where
    F: Real,
    M: StateSpaceModel<F>,
    E: FnMut(&M, &Parameter<F>, &[M::Obs]) -> Result<SufficientStatistic<F>>,
{
    type Obs = M::Obs;

    fn parameter_box(&self) -> &ParameterBox<F> {
        self.model.parameter_box()
    }

    fn stat_dim(&self) -> usize {
        self.model.stat_dim()
    }

    fn block_statistic<I>(
        &mut self,
        theta: &Parameter<F>,
        block: &BlockSize,
        observations: I,
    ) -> Result<SufficientStatistic<F>>
    where
        I: Iterator,
        I::Item: Borrow<M::Obs>,
    {
        let ys: Vec<M::Obs> = observations
            .take(block.tau)
            .map(|y| y.borrow().clone())
            .collect();
        if ys.len() < block.tau {
            return Err(Error::Truncated {
                completed_blocks: block.n - 1,
            });
        }
        (self.exact)(&self.model, theta, &ys)
    }

    fn check_statistic(&self, _theta: &Parameter<F>, s: &[F]) -> Result<()> {
        self.model.check_statistic(s)
    }

    fn m_step(&self, _theta: &Parameter<F>, s: &SufficientStatistic<F>) -> Result<MStep<F>> {
        self.model.m_step(s)
    }

    fn project_statistic(
        &self,
        _theta: &Parameter<F>,
        s: &SufficientStatistic<F>,
    ) -> SufficientStatistic<F> {
        self.model.project_statistic(s)
    }
}
