//! Auxiliary particle filter.
//!
//! One step draws `N` independent pairs `(J, ξ)` from the joint law
//! proportional to `ω_{t-1}^i ϑ_t(ξ_{t-1}^i) ι_t(ξ_{t-1}^i, dx)` and weights each
//! pair by `m g / (ϑ ι)`. Weights live in log space and are normalised after
//! every step (log-sum-exp equal to zero).

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Parameter, StateSpaceModel};
use crate::scalar::{log_sum_exp, Real};

/// Weighted particle approximation of the filtering distribution at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystem<F, S> {
    pub particles: Vec<S>,
    /// Normalised log weights: `log_sum_exp(log_weights) == 0` up to rounding.
    pub log_weights: Vec<F>,
    /// 0-based index of the parent of each particle at step `t - 1`.
    /// All zero at `t = 0`.
    pub ancestors: Vec<usize>,
    pub t: usize,
}

impl<F: Real, S: Clone> ParticleSystem<F, S> {
    /// Builds a system from particles and arbitrary (unnormalised) log weights.
    pub fn from_log_weights(particles: Vec<S>, log_weights: Vec<F>, t: usize) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::InvalidArgument("empty particle system".into()));
        }
        if particles.len() != log_weights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} particles but {} weights",
                particles.len(),
                log_weights.len()
            )));
        }
        let n = particles.len();
        let log_weights = normalize_log_weights(log_weights, t)?;
        Ok(ParticleSystem {
            particles,
            log_weights,
            ancestors: vec![0; n],
            t,
        })
    }

}

impl<F: Real, S> ParticleSystem<F, S> {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Linear weights summing to one.
    pub fn weights(&self) -> Vec<F> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    /// Weighted mean of `f` under the particle approximation.
    pub fn expectation(&self, mut f: impl FnMut(&S) -> F) -> F {
        self.particles
            .iter()
            .zip(&self.log_weights)
            .filter(|(_, w)| **w > F::neg_infinity())
            .map(|(x, w)| w.exp() * f(x))
            .sum()
    }

}

impl<F: Real, S: Clone> ParticleSystem<F, S> {
    /// Resamples `n` particles multinomially and resets weights to uniform.
    /// Used to carry the final filter of one block into the next.
    pub fn resample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("cannot resample to zero particles".into()));
        }
        let picker = CategoricalSampler::from_log_weights(&self.log_weights, self.t)?;
        let ancestors: Vec<usize> = (0..n).map(|_| picker.sample(rng)).collect();
        let particles = ancestors.iter().map(|&j| self.particles[j].clone()).collect();
        let lw = -F::from_usize_lossy(n).ln();
        Ok(ParticleSystem {
            particles,
            log_weights: vec![lw; n],
            ancestors,
            t: 0,
        })
    }
}

/// Proposal kernel `ι_t` together with the adjustment multiplier `ϑ_t`.
pub trait InstrumentalKernel<F: Real, M: StateSpaceModel<F>>: Sync {
    /// `log ϑ_t(x_prev)`; `y` is the observation at step `t`.
    fn log_adjustment(&self, model: &M, theta: &Parameter<F>, x_prev: &M::State, y: &M::Obs)
        -> F;

    /// Declared upper bound on `ϑ_t`.
    fn adjustment_bound(&self) -> F;

    fn sample<R: Rng + ?Sized>(
        &self,
        model: &M,
        theta: &Parameter<F>,
        x_prev: &M::State,
        y: &M::Obs,
        rng: &mut R,
    ) -> M::State;

    /// `log ι_t(x_prev, x)`.
    fn log_density(
        &self,
        model: &M,
        theta: &Parameter<F>,
        x_prev: &M::State,
        x: &M::State,
        y: &M::Obs,
    ) -> F;

    /// `ϑ ≡ 1` and `ι = m_θ`; the weight reduces to the emission density.
    fn is_bootstrap(&self) -> bool {
        false
    }
}

/// The bootstrap filter: propose from the model transition, no adjustment.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bootstrap;

impl<F: Real, M: StateSpaceModel<F>> InstrumentalKernel<F, M> for Bootstrap {
    fn log_adjustment(&self, _: &M, _: &Parameter<F>, _: &M::State, _: &M::Obs) -> F {
        F::zero()
    }

    fn adjustment_bound(&self) -> F {
        F::one()
    }

    fn sample<R: Rng + ?Sized>(
        &self,
        model: &M,
        theta: &Parameter<F>,
        x_prev: &M::State,
        y: &M::Obs,
        rng: &mut R,
    ) -> M::State {
        model.sample_transition(theta, x_prev, y, rng)
    }

    fn log_density(
        &self,
        model: &M,
        theta: &Parameter<F>,
        x_prev: &M::State,
        x: &M::State,
        y: &M::Obs,
    ) -> F {
        model.log_transition(theta, x_prev, x, y)
    }

    fn is_bootstrap(&self) -> bool {
        true
    }
}

/// Output of [`propagate`]: sampled parents and the new particle positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal<S> {
    pub ancestors: Vec<usize>,
    pub particles: Vec<S>,
}

/// Inverse-CDF sampler over a finite set of log weights.
#[derive(Debug, Clone)]
pub struct CategoricalSampler<F> {
    cumulative: Vec<F>,
    last_positive: usize,
}

impl<F: Real> CategoricalSampler<F> {
    pub fn from_log_weights(log_weights: &[F], t: usize) -> Result<Self> {
        let max = log_weights.iter().copied().fold(F::neg_infinity(), F::max);
        if max == F::neg_infinity() || max.is_nan() {
            return Err(Error::DegenerateSystem { block: None, t });
        }
        let mut acc = F::zero();
        let mut last_positive = 0;
        let cumulative = log_weights
            .iter()
            .enumerate()
            .map(|(i, &lw)| {
                let w = (lw - max).exp();
                if w > F::zero() {
                    last_positive = i;
                }
                acc += w;
                acc
            })
            .collect();
        Ok(CategoricalSampler {
            cumulative,
            last_positive,
        })
    }

    /// One uniform draw per call.
    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("non-empty");
        let target = F::standard_uniform(rng) * total;
        let idx = self.cumulative.partition_point(|&c| c <= target);
        idx.min(self.last_positive)
    }
}

/// Draws `n` i.i.d. particles from `χ` with uniform weights, `t = 0`.
pub fn init_particles<F, M, R>(
    model: &M,
    theta: &Parameter<F>,
    n: usize,
    rng: &mut R,
) -> Result<ParticleSystem<F, M::State>>
where
    F: Real,
    M: StateSpaceModel<F>,
    R: Rng + ?Sized,
{
    if n == 0 {
        return Err(Error::InvalidArgument("particle count must be at least 1".into()));
    }
    let particles = (0..n).map(|_| model.sample_initial(theta, rng)).collect();
    let lw = -F::from_usize_lossy(n).ln();
    Ok(ParticleSystem {
        particles,
        log_weights: vec![lw; n],
        ancestors: vec![0; n],
        t: 0,
    })
}

/// Samples `(J_t^ℓ, ξ_t^ℓ)` for `ℓ = 0..N` in index order.
pub fn propagate<F, M, K, R>(
    model: &M,
    theta: &Parameter<F>,
    ps: &ParticleSystem<F, M::State>,
    kernel: &K,
    y: &M::Obs,
    rng: &mut R,
) -> Result<Proposal<M::State>>
where
    F: Real,
    M: StateSpaceModel<F>,
    K: InstrumentalKernel<F, M>,
    R: Rng + ?Sized,
{
    let t = ps.t + 1;
    let picker = if kernel.is_bootstrap() {
        CategoricalSampler::from_log_weights(&ps.log_weights, t)?
    } else {
        let log_bound = kernel.adjustment_bound().ln();
        let mut adjusted = Vec::with_capacity(ps.len());
        for (x, &lw) in ps.particles.iter().zip(&ps.log_weights) {
            let la = kernel.log_adjustment(model, theta, x, y);
            if la.is_nan() || la > log_bound + F::epsilon() * log_bound.abs().max(F::one()) {
                return Err(Error::InvalidArgument(format!(
                    "adjustment multiplier exp({la}) exceeds its declared bound {}",
                    kernel.adjustment_bound()
                )));
            }
            adjusted.push(lw + la);
        }
        CategoricalSampler::from_log_weights(&adjusted, t)?
    };
    let n = ps.len();
    let mut ancestors = Vec::with_capacity(n);
    let mut particles = Vec::with_capacity(n);
    for _ in 0..n {
        let j = picker.sample(rng);
        particles.push(kernel.sample(model, theta, &ps.particles[j], y, rng));
        ancestors.push(j);
    }
    Ok(Proposal {
        ancestors,
        particles,
    })
}

/// Unnormalised log importance weights
/// `log m + log g − log ϑ − log ι` for a proposal.
pub fn reweight_raw<F, M, K>(
    model: &M,
    theta: &Parameter<F>,
    kernel: &K,
    prev: &ParticleSystem<F, M::State>,
    proposal: &Proposal<M::State>,
    y: &M::Obs,
) -> Result<Vec<F>>
where
    F: Real,
    M: StateSpaceModel<F>,
    K: InstrumentalKernel<F, M>,
{
    let t = prev.t + 1;
    if kernel.is_bootstrap() {
        return Ok(proposal
            .particles
            .iter()
            .map(|x| model.log_emission(theta, x, y))
            .collect());
    }
    let mut out = Vec::with_capacity(proposal.particles.len());
    for (&j, x) in proposal.ancestors.iter().zip(&proposal.particles) {
        let parent = &prev.particles[j];
        let num = model.log_transition(theta, parent, x, y) + model.log_emission(theta, x, y);
        let den = kernel.log_adjustment(model, theta, parent, y)
            + kernel.log_density(model, theta, parent, x, y);
        let lw = num - den;
        if lw.is_nan() || lw == F::infinity() {
            return Err(Error::Numerical(format!(
                "importance weight {num} - {den} at step {t}: proposal does not dominate the target"
            )));
        }
        out.push(lw);
    }
    Ok(out)
}

/// Weights a proposal and normalises the result into a new particle system.
pub fn reweight<F, M, K>(
    model: &M,
    theta: &Parameter<F>,
    kernel: &K,
    prev: &ParticleSystem<F, M::State>,
    proposal: Proposal<M::State>,
    y: &M::Obs,
) -> Result<ParticleSystem<F, M::State>>
where
    F: Real,
    M: StateSpaceModel<F>,
    K: InstrumentalKernel<F, M>,
{
    let t = prev.t + 1;
    let raw = reweight_raw(model, theta, kernel, prev, &proposal, y)?;
    let log_weights = normalize_log_weights(raw, t)?;
    Ok(ParticleSystem {
        particles: proposal.particles,
        log_weights,
        ancestors: proposal.ancestors,
        t,
    })
}

/// One full filter step: [`propagate`] then [`reweight`].
pub fn filter_step<F, M, K, R>(
    model: &M,
    theta: &Parameter<F>,
    kernel: &K,
    ps: &ParticleSystem<F, M::State>,
    y: &M::Obs,
    rng: &mut R,
) -> Result<ParticleSystem<F, M::State>>
where
    F: Real,
    M: StateSpaceModel<F>,
    K: InstrumentalKernel<F, M>,
    R: Rng + ?Sized,
{
    let proposal = propagate(model, theta, ps, kernel, y, rng)?;
    reweight(model, theta, kernel, ps, proposal, y)
}

/// Max-shift then subtract the log normaliser.
pub fn normalize_log_weights<F: Real>(mut lw: Vec<F>, t: usize) -> Result<Vec<F>> {
    if lw.iter().any(|w| w.is_nan()) {
        return Err(Error::Numerical(format!("NaN log weight at step {t}")));
    }
    let lse = log_sum_exp(&lw);
    if lse == F::neg_infinity() {
        return Err(Error::DegenerateSystem { block: None, t });
    }
    if lse == F::infinity() {
        return Err(Error::Numerical(format!("infinite weight at step {t}")));
    }
    for w in &mut lw {
        *w -= lse;
    }
    Ok(lw)
}

/// `(Σω)² / Σω²`, in `[1, N]`.
pub fn effective_sample_size<F: Real, S>(ps: &ParticleSystem<F, S>) -> F {
    let max = ps
        .log_weights
        .iter()
        .copied()
        .fold(F::neg_infinity(), F::max);
    let (s1, s2) = ps
        .log_weights
        .iter()
        .map(|&lw| (lw - max).exp())
        .fold((F::zero(), F::zero()), |(a, b), w| (a + w, b + w * w));
    s1 * s1 / s2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{FiniteHmm, SvModel, SvParams};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hmm(initial: Vec<f64>, a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> (FiniteHmm<f64>, Parameter<f64>) {
        let m = FiniteHmm::new(2, 2, initial).unwrap();
        let th = m
            .parameter(
                &[a[0].to_vec(), a[1].to_vec()],
                &[b[0].to_vec(), b[1].to_vec()],
            )
            .unwrap();
        (m, th)
    }

    fn sticky() -> (FiniteHmm<f64>, Parameter<f64>) {
        hmm(vec![0.6, 0.4], [[0.9, 0.1], [0.2, 0.8]], [[0.85, 0.15], [0.2, 0.8]])
    }

    fn system(lw: Vec<f64>) -> ParticleSystem<f64, usize> {
        let n = lw.len();
        ParticleSystem::from_log_weights((0..n).map(|i| i % 2).collect(), lw, 0).unwrap()
    }

    #[test]
    fn init_rejects_zero_particles() {
        let (m, th) = sticky();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            init_particles(&m, &th, 0, &mut rng),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn init_point_mass_and_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (m, th) = hmm(vec![1.0, 0.0], [[0.5, 0.5], [0.5, 0.5]], [[0.5, 0.5], [0.5, 0.5]]);
        let ps = init_particles(&m, &th, 1, &mut rng).unwrap();
        assert_eq!(ps.particles, vec![0]);
        assert_eq!(ps.log_weights, vec![0.0]);
        assert_eq!(ps.t, 0);
        let (m, th) = hmm(vec![0.5, 0.5], [[0.5, 0.5], [0.5, 0.5]], [[0.5, 0.5], [0.5, 0.5]]);
        let ps = init_particles(&m, &th, 3, &mut rng).unwrap();
        assert!(ps.particles.iter().all(|&x| x < 2));
        assert!(ps.log_weights.iter().all(|&w| (w + 3f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn init_from_stationary_volatility_law() {
        let m = SvModel::<f64>::new();
        let th = m.parameter(SvParams::new(0.95, 0.1, 0.6).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ps = init_particles(&m, &th, 500, &mut rng).unwrap();
        let mean = ps.expectation(|x| *x);
        let se = (0.1 / (1.0 - 0.95f64 * 0.95) / 500.0).sqrt();
        assert!(mean.abs() < 4.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn single_particle_ancestor() {
        let (m, th) = sticky();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = system(vec![0.0]);
        for _ in 0..20 {
            let p = propagate(&m, &th, &ps, &Bootstrap, &0, &mut rng).unwrap();
            assert_eq!(p.ancestors, vec![0]);
        }
    }

    #[test]
    fn zero_weight_parent_never_chosen() {
        let (m, th) = sticky();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = system(vec![0.0, f64::NEG_INFINITY]);
        let p = propagate(&m, &th, &ps, &Bootstrap, &0, &mut rng).unwrap();
        assert!(p.ancestors.iter().all(|&a| a == 0));
        let dead = ParticleSystem {
            particles: vec![0, 1],
            log_weights: vec![f64::NEG_INFINITY; 2],
            ancestors: vec![0, 0],
            t: 3,
        };
        assert!(matches!(
            propagate(&m, &th, &dead, &Bootstrap, &0, &mut rng),
            Err(Error::DegenerateSystem { t: 4, .. })
        ));
    }

    #[test]
    fn ancestor_frequencies_follow_weights() {
        let (m, th) = sticky();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ps = system(vec![0.3f64.ln(), 0.7f64.ln()]);
        let mut first = 0usize;
        let mut total = 0usize;
        while total < 100_000 {
            let p = propagate(&m, &th, &ps, &Bootstrap, &0, &mut rng).unwrap();
            first += p.ancestors.iter().filter(|&&a| a == 0).count();
            total += p.ancestors.len();
        }
        let f = first as f64 / total as f64;
        assert!((f - 0.3).abs() < 0.005, "frequency {f}");
    }

    #[test]
    fn bootstrap_weight_is_emission_bitwise() {
        let m = SvModel::<f64>::new();
        let th = m.parameter(SvParams::new(0.95, 0.1, 0.6).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps = init_particles(&m, &th, 64, &mut rng).unwrap();
        let y = 0.37;
        let p = propagate(&m, &th, &ps, &Bootstrap, &y, &mut rng).unwrap();
        let raw = reweight_raw(&m, &th, &Bootstrap, &ps, &p, &y).unwrap();
        for (w, x) in raw.iter().zip(&p.particles) {
            assert_eq!(w.to_bits(), m.log_emission(&th, x, &y).to_bits());
        }
    }

    #[test]
    fn uninformative_emission_gives_uniform_weights() {
        let (m, th) = hmm(vec![0.5, 0.5], [[0.9, 0.1], [0.3, 0.7]], [[0.5, 0.5], [0.5, 0.5]]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps = init_particles(&m, &th, 50, &mut rng).unwrap();
        let next = filter_step(&m, &th, &Bootstrap, &ps, &1, &mut rng).unwrap();
        for w in next.weights() {
            assert!((w - 0.02).abs() < 1e-15);
        }
    }

    #[test]
    fn one_step_matches_exact_filter() {
        let (m, th) = sticky();
        let y = 1;
        // exact P(X_1 = j | Y_1 = y)
        let pi = [0.6, 0.4];
        let a = [[0.9, 0.1], [0.2, 0.8]];
        let b = [[0.85, 0.15], [0.2, 0.8]];
        let pred: Vec<f64> = (0..2).map(|j| pi[0] * a[0][j] + pi[1] * a[1][j]).collect();
        let joint: Vec<f64> = (0..2).map(|j| pred[j] * b[j][y]).collect();
        let exact = joint[1] / (joint[0] + joint[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ps = init_particles(&m, &th, 10_000, &mut rng).unwrap();
        let next = filter_step(&m, &th, &Bootstrap, &ps, &y, &mut rng).unwrap();
        let est = next.expectation(|&x| x as f64);
        assert!((est - exact).abs() < 0.01, "{est} vs {exact}");
    }

    #[test]
    fn ess_examples() {
        let ps = system(vec![0.0; 100]);
        assert!((effective_sample_size(&ps) - 100.0).abs() < 1e-9);
        let ps = system(vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert_eq!(effective_sample_size(&ps), 1.0);
        let ps = system(vec![0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()]);
        assert!((effective_sample_size(&ps) - 8.0 / 3.0).abs() < 1e-12);
    }

    // Fully adapted proposal for a finite HMM: ϑ(x) = p(y | x), ι(x, j) ∝ m(x, j) g(j, y).
    struct Adapted;

    impl InstrumentalKernel<f64, FiniteHmm<f64>> for Adapted {
        fn log_adjustment(&self, m: &FiniteHmm<f64>, th: &Parameter<f64>, x: &usize, y: &usize) -> f64 {
            (0..2)
                .map(|j| m.transition_prob(th, *x, j) * m.emission_prob(th, j, *y))
                .sum::<f64>()
                .ln()
        }

        fn adjustment_bound(&self) -> f64 {
            1.0
        }

        fn sample<R: rand::Rng + ?Sized>(&self, m: &FiniteHmm<f64>, th: &Parameter<f64>, x: &usize, y: &usize, rng: &mut R) -> usize {
            let p0 = m.transition_prob(th, *x, 0) * m.emission_prob(th, 0, *y);
            let p1 = m.transition_prob(th, *x, 1) * m.emission_prob(th, 1, *y);
            usize::from(rng.random::<f64>() * (p0 + p1) >= p0)
        }

        fn log_density(&self, m: &FiniteHmm<f64>, th: &Parameter<f64>, x: &usize, j: &usize, y: &usize) -> f64 {
            let num = m.transition_prob(th, *x, *j) * m.emission_prob(th, *j, *y);
            (num).ln() - self.log_adjustment(m, th, x, y)
        }
    }

    #[test]
    fn fully_adapted_kernel_gives_equal_weights() {
        let (m, th) = sticky();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ps = init_particles(&m, &th, 40, &mut rng).unwrap();
        let next = filter_step(&m, &th, &Adapted, &ps, &1, &mut rng).unwrap();
        for w in next.weights() {
            assert!((w - 1.0 / 40.0).abs() < 1e-12);
        }
    }

    struct Overbound;

    impl InstrumentalKernel<f64, FiniteHmm<f64>> for Overbound {
        fn log_adjustment(&self, _: &FiniteHmm<f64>, _: &Parameter<f64>, _: &usize, _: &usize) -> f64 {
            1.0
        }
        fn adjustment_bound(&self) -> f64 {
            2.0
        }
        fn sample<R: rand::Rng + ?Sized>(&self, _: &FiniteHmm<f64>, _: &Parameter<f64>, x: &usize, _: &usize, _: &mut R) -> usize {
            *x
        }
        fn log_density(&self, _: &FiniteHmm<f64>, _: &Parameter<f64>, _: &usize, _: &usize, _: &usize) -> f64 {
            0.0
        }
    }

    #[test]
    fn adjustment_above_bound_is_rejected() {
        let (m, th) = sticky();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ps = init_particles(&m, &th, 4, &mut rng).unwrap();
        assert!(propagate(&m, &th, &ps, &Overbound, &1, &mut rng).is_err());
    }

    #[test]
    fn identical_streams_reproduce_bitwise() {
        let m = SvModel::<f64>::new();
        let th = m.parameter(SvParams::new(0.9, 0.2, 0.5).unwrap()).unwrap();
        let go = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut ps = init_particles(&m, &th, 100, &mut rng).unwrap();
            for y in [0.1, -0.4, 1.3, 0.0] {
                ps = filter_step(&m, &th, &Bootstrap, &ps, &y, &mut rng).unwrap();
            }
            ps
        };
        let (a, b) = (go(), go());
        assert_eq!(a.ancestors, b.ancestors);
        assert!(a.particles.iter().zip(&b.particles).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.log_weights.iter().zip(&b.log_weights).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    fn exact_filter(ys: &[usize]) -> Vec<f64> {
        let a = [[0.9, 0.1], [0.2, 0.8]];
        let b = [[0.85, 0.15], [0.2, 0.8]];
        let mut p = [0.6, 0.4];
        ys.iter()
            .map(|&y| {
                let mut q = [0.0; 2];
                for j in 0..2 {
                    q[j] = (p[0] * a[0][j] + p[1] * a[1][j]) * b[j][y];
                }
                let z = q[0] + q[1];
                p = [q[0] / z, q[1] / z];
                p[1]
            })
            .collect()
    }

    #[test]
    fn filter_error_shrinks_with_particles() {
        use crate::models::simulate_path;
        let (m, th) = sticky();
        let mut data_rng = ChaCha8Rng::seed_from_u64(100);
        let (_, ys) = simulate_path(&m, &th, 30, &mut data_rng);
        let exact = exact_filter(&ys);
        let rmse: Vec<f64> = [50usize, 200, 800]
            .iter()
            .map(|&n| {
                let mut se = 0.0;
                for rep in 0..200u64 {
                    let mut rng = ChaCha8Rng::seed_from_u64(1000 + rep);
                    let mut ps = init_particles(&m, &th, n, &mut rng).unwrap();
                    for (t, y) in ys.iter().enumerate() {
                        ps = filter_step(&m, &th, &Bootstrap, &ps, y, &mut rng).unwrap();
                        let e = ps.expectation(|&x| x as f64) - exact[t];
                        se += e * e;
                    }
                }
                (se / (200.0 * 30.0)).sqrt()
            })
            .collect();
        assert!(rmse[0] > rmse[1] && rmse[1] > rmse[2], "{rmse:?}");
        assert!(rmse[0] >= 2.0 * rmse[2], "{rmse:?}");
    }

    proptest! {
        #[test]
        fn normalized_weights_sum_to_one(raw in prop::collection::vec(-700.0f64..700.0, 1..200)) {
            let lw = normalize_log_weights(raw, 1).unwrap();
            let total: f64 = lw.iter().map(|w| w.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ess_within_bounds(raw in prop::collection::vec(-50.0f64..50.0, 1..100)) {
            let n = raw.len() as f64;
            let ps = ParticleSystem::from_log_weights(vec![0u8; raw.len()], raw, 0).unwrap();
            let ess = effective_sample_size(&ps);
            prop_assert!(ess >= 1.0 - 1e-9 && ess <= n + 1e-9);
        }
    }
}
