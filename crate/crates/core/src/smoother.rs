//! Forward-only smoothing of additive functionals.
//!
//! Alongside the particle filter each particle carries `R_t^ℓ`, the particle
//! estimate of `R_t(ξ_t^ℓ)`, updated through the particle backward kernel
//!
//! ```text
//! R_t^ℓ = Σ_j w_j^ℓ [ S(ξ_{t-1}^j, ξ_t^ℓ, Y_t) / t + (t-1)/t · R_{t-1}^j ],
//! w_j^ℓ ∝ ω_{t-1}^j m_θ(ξ_{t-1}^j, ξ_t^ℓ).
//! ```
//!
//! At the end of a block the filter average of `R_τ` is the block statistic.
//! Nothing is stored beyond the current step. The update costs `O(N² d)`;
//! finite-state models that expose a [`collapse_key`] are handled in
//! `O(N + K² d)` by merging particles that sit on the same state.
//!
//! [`collapse_key`]: crate::model::StateSpaceModel::collapse_key


use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Parameter, StateSpaceModel, SufficientStatistic};
use crate::scalar::Real;
use crate::smc::{filter_step, InstrumentalKernel, ParticleSystem};

/// Per-particle smoothed statistics, `N` rows of length `dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedStatistics<F> {
    values: Vec<F>,
    dim: usize,
    pub t: usize,
}

impl<F: Real> SmoothedStatistics<F> {
    /// `R_0 = 0`.
    pub fn zeros(n: usize, dim: usize) -> Self {
        SmoothedStatistics {
            values: vec![F::zero(); n * dim],
            dim,
            t: 0,
        }
    }

    pub fn from_rows(rows: &[Vec<F>], t: usize) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidArgument("ragged statistic rows".into()));
        }
        Ok(SmoothedStatistics {
            values: rows.iter().flatten().copied().collect(),
            dim,
            t,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.values.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, l: usize) -> &[F] {
        &self.values[l * self.dim..(l + 1) * self.dim]
    }

    fn row_mut(&mut self, l: usize) -> &mut [F] {
        &mut self.values[l * self.dim..(l + 1) * self.dim]
    }
}

/// Advances the per-particle statistics from step `t - 1` to `t`.
pub fn update_statistics<F, M>(
    model: &M,
    theta: &Parameter<F>,
    prev_ps: &ParticleSystem<F, M::State>,
    prev_r: &SmoothedStatistics<F>,
    new_ps: &ParticleSystem<F, M::State>,
    y: &M::Obs,
) -> Result<SmoothedStatistics<F>>
where
    F: Real,
    M: StateSpaceModel<F>,
{
    let t = new_ps.t;
    if t == 0 || prev_r.t + 1 != t || prev_ps.t + 1 != t {
        return Err(Error::InvalidArgument(format!(
            "statistics at step {} cannot advance to step {t} (filter was at {})",
            prev_r.t, prev_ps.t
        )));
    }
    let d = model.stat_dim();
    if prev_r.dim != d || prev_r.len() != prev_ps.len() {
        return Err(Error::InvalidArgument(format!(
            "statistics are {}x{}, expected {}x{d}",
            prev_r.len(),
            prev_r.dim,
            prev_ps.len()
        )));
    }
    if let Some(out) = collapsed_update(model, theta, prev_ps, prev_r, new_ps, y)? {
        return Ok(out);
    }

    let inv_t = F::one() / F::from_usize_lossy(t);
    let carry = F::from_usize_lossy(t - 1) * inv_t;
    let active: Vec<usize> = (0..prev_ps.len())
        .filter(|&j| prev_ps.log_weights[j] > F::neg_infinity())
        .collect();
    let mut lbuf = vec![F::zero(); active.len()];
    let mut sbuf = vec![F::zero(); d];
    let mut out = SmoothedStatistics::zeros(new_ps.len(), d);
    out.t = t;

    for (l, x) in new_ps.particles.iter().enumerate() {
        let mut max = F::neg_infinity();
        for (slot, &j) in lbuf.iter_mut().zip(&active) {
            let v = prev_ps.log_weights[j] + model.log_transition(theta, &prev_ps.particles[j], x, y);
            *slot = v;
            if v > max {
                max = v;
            }
        }
        if max == F::neg_infinity() || max.is_nan() {
            return Err(Error::DegenerateBackwardKernel {
                block: None,
                t,
                particle: l,
            });
        }
        let mut total = F::zero();
        for v in lbuf.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let row = out.row_mut(l);
        for (&w, &j) in lbuf.iter().zip(&active) {
            if w.is_zero() {
                continue;
            }
            let w = w / total;
            model.statistic(&prev_ps.particles[j], x, y, &mut sbuf);
            let rj = prev_r.row(j);
            for i in 0..d {
                row[i] += w * (inv_t * sbuf[i] + carry * rj[i]);
            }
        }
    }
    Ok(out)
}

/// Merged update for models with exact state labels. `None` when some
/// particle has no label.
fn collapsed_update<F, M>(
    model: &M,
    theta: &Parameter<F>,
    prev_ps: &ParticleSystem<F, M::State>,
    prev_r: &SmoothedStatistics<F>,
    new_ps: &ParticleSystem<F, M::State>,
    y: &M::Obs,
) -> Result<Option<SmoothedStatistics<F>>>
where
    F: Real,
    M: StateSpaceModel<F>,
{
    let d = prev_r.dim;
    let t = new_ps.t;
    // groups in first-appearance order so summation order is reproducible;
    // linear search is fine since the merged path only pays off for few states
    let mut keys: Vec<u64> = Vec::new();
    let mut reps: Vec<usize> = Vec::new();
    let mut mass: Vec<F> = Vec::new();
    let mut weighted_r: Vec<F> = Vec::new();
    for (j, x) in prev_ps.particles.iter().enumerate() {
        let Some(key) = model.collapse_key(x) else {
            return Ok(None);
        };
        let g = match keys.iter().position(|&k| k == key) {
            Some(g) => g,
            None => {
                keys.push(key);
                reps.push(j);
                mass.push(F::zero());
                weighted_r.extend(std::iter::repeat_n(F::zero(), d));
                keys.len() - 1
            }
        };
        let w = prev_ps.log_weights[j].exp();
        if w.is_zero() {
            continue;
        }
        mass[g] += w;
        for (acc, &r) in weighted_r[g * d..(g + 1) * d].iter_mut().zip(prev_r.row(j)) {
            *acc += w * r;
        }
    }

    let inv_t = F::one() / F::from_usize_lossy(t);
    let carry = F::from_usize_lossy(t - 1) * inv_t;
    let mut lbuf = vec![F::zero(); reps.len()];
    let mut sbuf = vec![F::zero(); d];
    let mut new_keys: Vec<u64> = Vec::new();
    let mut rows: Vec<F> = Vec::new();
    let mut values: Vec<F> = Vec::with_capacity(new_ps.len() * d);

    for (l, x) in new_ps.particles.iter().enumerate() {
        let Some(key) = model.collapse_key(x) else {
            return Ok(None);
        };
        if let Some(r) = new_keys.iter().position(|&k| k == key) {
            values.extend_from_slice(&rows[r * d..(r + 1) * d]);
            continue;
        }
        let mut max = F::neg_infinity();
        for (g, slot) in lbuf.iter_mut().enumerate() {
            *slot = if mass[g].is_zero() {
                F::neg_infinity()
            } else {
                mass[g].ln() + model.log_transition(theta, &prev_ps.particles[reps[g]], x, y)
            };
            if *slot > max {
                max = *slot;
            }
        }
        if max == F::neg_infinity() || max.is_nan() {
            return Err(Error::DegenerateBackwardKernel {
                block: None,
                t,
                particle: l,
            });
        }
        let mut total = F::zero();
        for v in lbuf.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let start = rows.len();
        rows.extend(std::iter::repeat_n(F::zero(), d));
        let row = &mut rows[start..];
        for (g, &w) in lbuf.iter().enumerate() {
            if w.is_zero() {
                continue;
            }
            let w = w / total;
            model.statistic(&prev_ps.particles[reps[g]], x, y, &mut sbuf);
            let mean_r = &weighted_r[g * d..(g + 1) * d];
            for i in 0..d {
                row[i] += w * (inv_t * sbuf[i] + carry * mean_r[i] / mass[g]);
            }
        }
        values.extend_from_slice(row);
        new_keys.push(key);
    }
    Ok(Some(SmoothedStatistics { values, dim: d, t }))
}

/// `Σ_ℓ ω_τ^ℓ R_τ^ℓ` with weights normalised to one.
pub fn finalize_block_statistic<F: Real, S>(
    ps: &ParticleSystem<F, S>,
    r: &SmoothedStatistics<F>,
) -> Result<SufficientStatistic<F>> {
    if ps.len() != r.len() {
        return Err(Error::InvalidArgument(format!(
            "{} particles but {} statistic rows",
            ps.len(),
            r.len()
        )));
    }
    let max = ps
        .log_weights
        .iter()
        .copied()
        .fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return Err(Error::DegenerateSystem { block: None, t: ps.t });
    }
    let mut acc = vec![F::zero(); r.dim];
    let mut total = F::zero();
    for (l, &lw) in ps.log_weights.iter().enumerate() {
        let w = (lw - max).exp();
        if w.is_zero() {
            continue;
        }
        total += w;
        for (a, &v) in acc.iter_mut().zip(r.row(l)) {
            *a += w * v;
        }
    }
    for a in &mut acc {
        *a /= total;
    }
    SufficientStatistic::new(acc)
}

/// Streaming state of the forward-only smoother within one block.
#[derive(Debug, Clone)]
pub struct ForwardSmoother<F, S> {
    ps: ParticleSystem<F, S>,
    r: SmoothedStatistics<F>,
}

impl<F: Real, S: Clone> ForwardSmoother<F, S> {
    /// Starts from a `t = 0` particle system (drawn from `χ` or carried over).
    pub fn new(ps: ParticleSystem<F, S>, stat_dim: usize) -> Result<Self> {
        if ps.t != 0 {
            return Err(Error::InvalidArgument(
                "forward smoother must start at t = 0".into(),
            ));
        }
        let r = SmoothedStatistics::zeros(ps.len(), stat_dim);
        Ok(ForwardSmoother { ps, r })
    }

    pub fn particles(&self) -> &ParticleSystem<F, S> {
        &self.ps
    }

    pub fn statistics(&self) -> &SmoothedStatistics<F> {
        &self.r
    }

    /// Consumes one observation.
    pub fn step<M, K, R>(
        &mut self,
        model: &M,
        theta: &Parameter<F>,
        kernel: &K,
        y: &M::Obs,
        rng: &mut R,
    ) -> Result<()>
    where
        M: StateSpaceModel<F, State = S>,
        K: InstrumentalKernel<F, M>,
        R: Rng + ?Sized,
    {
        let next = filter_step(model, theta, kernel, &self.ps, y, rng)?;
        self.r = update_statistics(model, theta, &self.ps, &self.r, &next, y)?;
        self.ps = next;
        Ok(())
    }

    pub fn finish(&self) -> Result<SufficientStatistic<F>> {
        finalize_block_statistic(&self.ps, &self.r)
    }

    pub fn into_parts(self) -> (ParticleSystem<F, S>, SmoothedStatistics<F>) {
        (self.ps, self.r)
    }
}
