//! Stochastic volatility:
//! `X_{t+1} = φ X_t + σ U_t`, `Y_t = β exp(X_t / 2) V_t`, `X_0 ~ N(0, σ²/(1-φ²))`.
//!
//! `θ = (φ, σ², β²)`, `S(x, x', y) = (x², x'², x x', y² e^{-x'})`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{
    ExponentialFamily, MStep, Parameter, ParameterBox, StateSpaceModel, SufficientStatistic,
};
use crate::models::Simulate;
use crate::scalar::{normal_log_density, Real};

/// Margin keeping `|φ|` away from one.
pub const PHI_MARGIN: f64 = 1e-6;
const VAR_MIN: f64 = 1e-8;
const VAR_MAX: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvParams<F> {
    pub phi: F,
    pub sigma2: F,
    pub beta2: F,
}

impl<F: Real> SvParams<F> {
    pub fn new(phi: F, sigma2: F, beta2: F) -> Result<Self> {
        if !(phi.abs() < F::one() - F::lit(PHI_MARGIN)) {
            return Err(Error::domain(format!("|phi| < 1 - 1e-6 violated by phi = {phi}")));
        }
        if !(sigma2 > F::zero()) || !(beta2 > F::zero()) {
            return Err(Error::domain(format!(
                "variances must be positive (sigma2 = {sigma2}, beta2 = {beta2})"
            )));
        }
        Ok(SvParams { phi, sigma2, beta2 })
    }

    fn of(theta: &Parameter<F>) -> Self {
        let v = theta.as_slice();
        SvParams {
            phi: v[0],
            sigma2: v[1],
            beta2: v[2],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SvModel<F> {
    bounds: ParameterBox<F>,
}

impl<F: Real> Default for SvModel<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> SvModel<F> {
    pub fn new() -> Self {
        let p = F::one() - F::lit(PHI_MARGIN);
        let bounds = ParameterBox::new(
            vec![-p, F::lit(VAR_MIN), F::lit(VAR_MIN)],
            vec![p, F::lit(VAR_MAX), F::lit(VAR_MAX)],
        )
        .expect("static box");
        SvModel { bounds }
    }

    pub fn parameter(&self, p: SvParams<F>) -> Result<Parameter<F>> {
        Parameter::new(vec![p.phi, p.sigma2, p.beta2], &self.bounds)
    }

    pub fn params(&self, theta: &Parameter<F>) -> SvParams<F> {
        SvParams::of(theta)
    }

    /// Stationary variance of the state.
    fn stationary_var(p: &SvParams<F>) -> F {
        p.sigma2 / (F::one() - p.phi * p.phi)
    }
}

impl<F: Real> StateSpaceModel<F> for SvModel<F> {
    type State = F;
    type Obs = F;

    fn stat_dim(&self) -> usize {
        4
    }

    fn parameter_box(&self) -> &ParameterBox<F> {
        &self.bounds
    }

    fn sample_initial<R: Rng + ?Sized>(&self, theta: &Parameter<F>, rng: &mut R) -> F {
        let p = SvParams::of(theta);
        Self::stationary_var(&p).sqrt() * F::standard_normal(rng)
    }

    fn sample_transition<R: Rng + ?Sized>(
        &self,
        theta: &Parameter<F>,
        x: &F,
        _y: &F,
        rng: &mut R,
    ) -> F {
        let p = SvParams::of(theta);
        p.phi * *x + p.sigma2.sqrt() * F::standard_normal(rng)
    }

    fn log_transition(&self, theta: &Parameter<F>, x: &F, x_next: &F, _y: &F) -> F {
        let p = SvParams::of(theta);
        normal_log_density(*x_next, p.phi * *x, p.sigma2)
    }

    fn log_emission(&self, theta: &Parameter<F>, x: &F, y: &F) -> F {
        // in log space: β² e^x underflows to 0 for very negative x
        let p = SvParams::of(theta);
        let quad = if y.is_zero() { F::zero() } else { *y * *y * (-*x).exp() / p.beta2 };
        -F::lit(0.5) * (F::TAU().ln() + p.beta2.ln() + *x + quad)
    }

    fn statistic(&self, x: &F, x_next: &F, y: &F, out: &mut [F]) {
        out[0] = *x * *x;
        out[1] = *x_next * *x_next;
        out[2] = *x * *x_next;
        out[3] = *y * *y * (-*x_next).exp();
    }

    fn check_statistic(&self, s: &[F]) -> Result<()> {
        if s.len() != 4 {
            return Err(Error::domain(format!("statistic has dimension {}, expected 4", s.len())));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("statistic entries must be finite"));
        }
        if !(s[0] > F::zero()) {
            return Err(Error::domain(
                "s_xx > 0 (phi = s_xx'/s_xx is undefined when s_xx = 0)",
            ));
        }
        if s[1] < F::zero() || s[3] < F::zero() {
            return Err(Error::domain("s_x'x' >= 0 and s_yy >= 0"));
        }
        let gap = s[0] * s[1] - s[2] * s[2];
        if gap < -F::lit(1e-10) * s[0] * s[1] {
            return Err(Error::domain("s_xx s_x'x' >= s_xx'^2 (Cauchy-Schwarz)"));
        }
        Ok(())
    }

    fn m_step(&self, s: &SufficientStatistic<F>) -> Result<MStep<F>> {
        let s = s.as_slice();
        self.check_statistic(s)?;
        let lo = self.bounds.lower();
        let hi = self.bounds.upper();
        let phi_raw = s[2] / s[0];
        let phi = phi_raw.max(lo[0]).min(hi[0]);
        // profile residual variance at the (possibly clipped) phi
        let sigma2_raw = s[1] - F::lit(2.0) * phi * s[2] + phi * phi * s[0];
        let (theta, clipped) = Parameter::clipped(vec![phi, sigma2_raw, s[3]], &self.bounds)?;
        Ok(MStep {
            theta,
            clipped: clipped || phi != phi_raw,
        })
    }

    fn project_statistic(&self, s: &SufficientStatistic<F>) -> SufficientStatistic<F> {
        let v = s.as_slice();
        let tiny = F::lit(1e-12);
        let s0 = if v[0].is_finite() { v[0].max(tiny) } else { F::one() };
        let s1 = if v[1].is_finite() { v[1].max(tiny) } else { F::one() };
        let bound = (s0 * s1).sqrt();
        let s2 = if v[2].is_finite() { v[2].max(-bound).min(bound) } else { F::zero() };
        let s3 = if v[3].is_finite() { v[3].max(F::zero()) } else { F::one() };
        SufficientStatistic::new(vec![s0, s1, s2, s3]).expect("finite by construction")
    }

    fn state_is_valid(&self, x: &F) -> bool {
        !x.is_nan()
    }

    fn obs_is_valid(&self, y: &F) -> bool {
        !y.is_nan()
    }
}

impl<F: Real> ExponentialFamily<F> for SvModel<F> {
    fn phi(&self, theta: &Parameter<F>) -> F {
        let p = SvParams::of(theta);
        -F::lit(0.5) * (p.sigma2.ln() + p.beta2.ln())
    }

    fn psi(&self, theta: &Parameter<F>) -> Vec<F> {
        let p = SvParams::of(theta);
        let two = F::lit(2.0);
        vec![
            -p.phi * p.phi / (two * p.sigma2),
            -F::one() / (two * p.sigma2),
            p.phi / p.sigma2,
            -F::one() / (two * p.beta2),
        ]
    }

    fn log_base_measure(&self, _x: &F, x_next: &F, _y: &F) -> F {
        -F::TAU().ln() - F::lit(0.5) * *x_next
    }
}

impl<F: Real> Simulate<F> for SvModel<F> {
    fn simulate_step<R: Rng + ?Sized>(
        &self,
        theta: &Parameter<F>,
        x_prev: &F,
        _t: usize,
        rng: &mut R,
    ) -> (F, F) {
        let p = SvParams::of(theta);
        let x = p.phi * *x_prev + p.sigma2.sqrt() * F::standard_normal(rng);
        let y = p.beta2.sqrt() * (x / F::lit(2.0)).exp() * F::standard_normal(rng);
        (x, y)
    }
}
