//! Scalar linear-Gaussian state space model:
//! `X_t = φ X_{t-1} + σ U_t`, `Y_t = X_t + γ V_t`, `X_0 ~ N(m₀, v₀)` (known).
//!
//! `θ = (φ, σ², γ²)`, `S(x, x', y) = (x², x x', x'², y², y x')`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{
    ExponentialFamily, MStep, Parameter, ParameterBox, StateSpaceModel, SufficientStatistic,
};
use crate::models::Simulate;
use crate::scalar::{normal_log_density, Real};

const PHI_BOUND: f64 = 2.0;
const VAR_MIN: f64 = 1e-8;
const VAR_MAX: f64 = 1e6;

#[derive(Debug, Clone)]
pub struct LgssmModel<F> {
    init_mean: F,
    init_var: F,
    bounds: ParameterBox<F>,
}

impl<F: Real> LgssmModel<F> {
    /// `init_var = 0` gives a point-mass initial state.
    pub fn new(init_mean: F, init_var: F) -> Result<Self> {
        Self::with_variance_floor(init_mean, init_var, F::lit(VAR_MIN))
    }

    /// Same as [`new`](Self::new) with a custom lower bound on both variances
    /// (zero allows noiseless models).
    pub fn with_variance_floor(init_mean: F, init_var: F, floor: F) -> Result<Self> {
        if !(init_var >= F::zero()) || !init_mean.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "initial law N({init_mean}, {init_var}) is invalid"
            )));
        }
        if !(floor >= F::zero()) {
            return Err(Error::InvalidArgument("variance floor must be >= 0".into()));
        }
        let bounds = ParameterBox::new(
            vec![-F::lit(PHI_BOUND), floor, floor],
            vec![F::lit(PHI_BOUND), F::lit(VAR_MAX), F::lit(VAR_MAX)],
        )?;
        Ok(LgssmModel {
            init_mean,
            init_var,
            bounds,
        })
    }

    pub fn parameter(&self, phi: F, sigma2: F, gamma2: F) -> Result<Parameter<F>> {
        if !(sigma2 >= F::zero()) || !(gamma2 >= F::zero()) {
            return Err(Error::InvalidArgument(
                "variances must be non-negative".into(),
            ));
        }
        Parameter::new(vec![phi, sigma2, gamma2], &self.bounds)
    }

    pub fn init_mean(&self) -> F {
        self.init_mean
    }

    pub fn init_var(&self) -> F {
        self.init_var
    }

    /// `(φ, σ², γ²)`
    pub fn coeffs(theta: &Parameter<F>) -> (F, F, F) {
        let v = theta.as_slice();
        (v[0], v[1], v[2])
    }
}

impl<F: Real> StateSpaceModel<F> for LgssmModel<F> {
    type State = F;
    type Obs = F;

    fn stat_dim(&self) -> usize {
        5
    }

    fn parameter_box(&self) -> &ParameterBox<F> {
        &self.bounds
    }

    fn sample_initial<R: Rng + ?Sized>(&self, _theta: &Parameter<F>, rng: &mut R) -> F {
        self.init_mean + self.init_var.sqrt() * F::standard_normal(rng)
    }

    fn sample_transition<R: Rng + ?Sized>(
        &self,
        theta: &Parameter<F>,
        x: &F,
        _y: &F,
        rng: &mut R,
    ) -> F {
        let (phi, s2, _) = Self::coeffs(theta);
        phi * *x + s2.sqrt() * F::standard_normal(rng)
    }

    fn log_transition(&self, theta: &Parameter<F>, x: &F, x_next: &F, _y: &F) -> F {
        let (phi, s2, _) = Self::coeffs(theta);
        normal_log_density(*x_next, phi * *x, s2)
    }

    fn log_emission(&self, theta: &Parameter<F>, x: &F, y: &F) -> F {
        let (_, _, g2) = Self::coeffs(theta);
        normal_log_density(*y, *x, g2)
    }

    fn statistic(&self, x: &F, x_next: &F, y: &F, out: &mut [F]) {
        out[0] = *x * *x;
        out[1] = *x * *x_next;
        out[2] = *x_next * *x_next;
        out[3] = *y * *y;
        out[4] = *y * *x_next;
    }

    fn check_statistic(&self, s: &[F]) -> Result<()> {
        if s.len() != 5 {
            return Err(Error::domain(format!("statistic has dimension {}, expected 5", s.len())));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("statistic entries must be finite"));
        }
        if !(s[0] > F::zero()) {
            return Err(Error::domain(
                "s_xx > 0 (phi = s_xx'/s_xx is undefined when s_xx = 0)",
            ));
        }
        let tol = F::lit(1e-10);
        if s[0] * s[2] - s[1] * s[1] < -tol * s[0] * s[2].abs() {
            return Err(Error::domain("s_xx s_x'x' >= s_xx'^2 (Cauchy-Schwarz)"));
        }
        if s[3] * s[2] - s[4] * s[4] < -tol * s[3].abs() * s[2].abs() {
            return Err(Error::domain("s_yy s_x'x' >= s_yx'^2 (Cauchy-Schwarz)"));
        }
        Ok(())
    }

    fn m_step(&self, s: &SufficientStatistic<F>) -> Result<MStep<F>> {
        let s = s.as_slice();
        self.check_statistic(s)?;
        let lo = self.bounds.lower();
        let hi = self.bounds.upper();
        let phi_raw = s[1] / s[0];
        let phi = phi_raw.max(lo[0]).min(hi[0]);
        let two = F::lit(2.0);
        let sigma2 = s[2] - two * phi * s[1] + phi * phi * s[0];
        let gamma2 = s[3] - two * s[4] + s[2];
        let (theta, clipped) = Parameter::clipped(vec![phi, sigma2, gamma2], &self.bounds)?;
        Ok(MStep {
            theta,
            clipped: clipped || phi != phi_raw,
        })
    }

    fn project_statistic(&self, s: &SufficientStatistic<F>) -> SufficientStatistic<F> {
        let v = s.as_slice();
        let fin = |x: F, d: F| if x.is_finite() { x } else { d };
        let tiny = F::lit(1e-12);
        let sxx = fin(v[0], F::one()).max(tiny);
        let sx2 = fin(v[2], F::one()).max(tiny);
        let syy = fin(v[3], F::one()).max(F::zero());
        let b1 = (sxx * sx2).sqrt();
        let b2 = (syy * sx2).sqrt();
        let sxy = fin(v[1], F::zero()).max(-b1).min(b1);
        let syx = fin(v[4], F::zero()).max(-b2).min(b2);
        SufficientStatistic::new(vec![sxx, sxy, sx2, syy, syx]).expect("finite by construction")
    }

    fn state_is_valid(&self, x: &F) -> bool {
        !x.is_nan()
    }

    fn obs_is_valid(&self, y: &F) -> bool {
        !y.is_nan()
    }
}

impl<F: Real> ExponentialFamily<F> for LgssmModel<F> {
    fn phi(&self, theta: &Parameter<F>) -> F {
        let (_, s2, g2) = Self::coeffs(theta);
        -F::lit(0.5) * (s2.ln() + g2.ln())
    }

    fn psi(&self, theta: &Parameter<F>) -> Vec<F> {
        let (phi, s2, g2) = Self::coeffs(theta);
        let two = F::lit(2.0);
        vec![
            -phi * phi / (two * s2),
            phi / s2,
            -F::one() / (two * s2) - F::one() / (two * g2),
            -F::one() / (two * g2),
            F::one() / g2,
        ]
    }

    fn log_base_measure(&self, _x: &F, _x_next: &F, _y: &F) -> F {
        -F::TAU().ln()
    }
}

impl<F: Real> Simulate<F> for LgssmModel<F> {
    fn simulate_step<R: Rng + ?Sized>(
        &self,
        theta: &Parameter<F>,
        x_prev: &F,
        _t: usize,
        rng: &mut R,
    ) -> (F, F) {
        let (phi, s2, g2) = Self::coeffs(theta);
        let x = phi * *x_prev + s2.sqrt() * F::standard_normal(rng);
        let y = x + g2.sqrt() * F::standard_normal(rng);
        (x, y)
    }
}
