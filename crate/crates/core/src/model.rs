//! The model contract.
//!
//! A model is a hidden Markov chain `X` observed through `Y` whose complete
//! data log-likelihood is a curved exponential family: the E-step of EM reduces
//! to the smoothed expectation of one vector statistic `S(x, x', y)` and the
//! M-step to a closed-form map from that statistic back to the parameter.

use std::fmt::Debug;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Axis-aligned feasible set for the parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBox<F> {
    lower: Vec<F>,
    upper: Vec<F>,
}

impl<F: Real> ParameterBox<F> {
    pub fn new(lower: Vec<F>, upper: Vec<F>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::InvalidArgument(format!(
                "box bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::InvalidArgument(format!(
                    "box coordinate {i}: [{lo}, {hi}] is empty"
                )));
            }
        }
        Ok(ParameterBox { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[F] {
        &self.lower
    }

    pub fn upper(&self) -> &[F] {
        &self.upper
    }

    pub fn contains(&self, theta: &[F]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| !v.is_nan() && v >= lo && v <= hi)
    }

    /// Clips `theta` into the box in place. Returns true when any coordinate moved.
    pub fn clip(&self, theta: &mut [F]) -> bool {
        let mut active = false;
        for (v, (lo, hi)) in theta.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            if *v < *lo {
                *v = *lo;
                active = true;
            } else if *v > *hi {
                *v = *hi;
                active = true;
            }
        }
        active
    }
}

/// A point of the parameter space, always inside the model's box.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<F> {
    theta: Vec<F>,
}

impl<F: Real> Parameter<F> {
    /// Rejects vectors of the wrong length or outside `bounds`.
    pub fn new(theta: Vec<F>, bounds: &ParameterBox<F>) -> Result<Self> {
        if theta.len() != bounds.dim() {
            return Err(Error::InvalidArgument(format!(
                "parameter has dimension {}, model expects {}",
                theta.len(),
                bounds.dim()
            )));
        }
        if !bounds.contains(&theta) {
            return Err(Error::domain(format!(
                "parameter {theta:?} lies outside the feasible box"
            )));
        }
        Ok(Parameter { theta })
    }

    /// Clips into the box; the flag reports whether clipping was active.
    pub fn clipped(mut theta: Vec<F>, bounds: &ParameterBox<F>) -> Result<(Self, bool)> {
        if theta.iter().any(|v| v.is_nan()) {
            return Err(Error::Numerical(format!("NaN in parameter {theta:?}")));
        }
        let active = bounds.clip(&mut theta);
        Ok((Parameter::new(theta, bounds)?, active))
    }

    pub fn as_slice(&self) -> &[F] {
        &self.theta
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn into_vec(self) -> Vec<F> {
        self.theta
    }
}

/// A finite vector in the statistic space.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStatistic<F> {
    s: Vec<F>,
}

impl<F: Real> SufficientStatistic<F> {
    pub fn zeros(dim: usize) -> Self {
        SufficientStatistic {
            s: vec![F::zero(); dim],
        }
    }

    /// Rejects NaN and infinite entries.
    pub fn new(s: Vec<F>) -> Result<Self> {
        if let Some(i) = s.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "statistic coordinate {i} is not finite ({})",
                s[i]
            )));
        }
        Ok(SufficientStatistic { s })
    }

    pub fn as_slice(&self) -> &[F] {
        &self.s
    }

    pub fn dim(&self) -> usize {
        self.s.len()
    }

    pub fn into_vec(self) -> Vec<F> {
        self.s
    }

    /// `a·self + b·other`
    pub fn combine(&self, a: F, other: &Self, b: F) -> Self {
        debug_assert_eq!(self.dim(), other.dim());
        SufficientStatistic {
            s: self
                .s
                .iter()
                .zip(&other.s)
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
        }
    }
}

/// Result of the M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct MStep<F> {
    pub theta: Parameter<F>,
    /// The unconstrained maximiser left the box and was clipped.
    pub clipped: bool,
}

/// A hidden Markov model whose complete-data likelihood belongs to a curved
/// exponential family.
///
/// Transition and emission densities are log densities. The observation at
/// step `t` is passed to the transition as well; models driven by known
/// inputs carry them in the observation record, every other model ignores it.
pub trait StateSpaceModel<F: Real>: Send + Sync {
    type State: Clone + Debug + Send + Sync;
    type Obs: Clone + Debug + Send + Sync;

    /// Dimension of `S`.
    fn stat_dim(&self) -> usize;

    fn parameter_box(&self) -> &ParameterBox<F>;

    fn param_dim(&self) -> usize {
        self.parameter_box().dim()
    }

    /// Draws `X_0 ~ χ`.
    fn sample_initial<R: Rng + ?Sized>(&self, theta: &Parameter<F>, rng: &mut R) -> Self::State;

    /// Draws `X_t ~ m_θ(x, ·)`; `y` is the observation at time `t`.
    fn sample_transition<R: Rng + ?Sized>(
        &self,
        theta: &Parameter<F>,
        x: &Self::State,
        y: &Self::Obs,
        rng: &mut R,
    ) -> Self::State;

    /// `log m_θ(x, x_next)`.
    fn log_transition(
        &self,
        theta: &Parameter<F>,
        x: &Self::State,
        x_next: &Self::State,
        y: &Self::Obs,
    ) -> F;

    /// `log g_θ(x, y)`.
    fn log_emission(&self, theta: &Parameter<F>, x: &Self::State, y: &Self::Obs) -> F;

    /// Writes `S(x, x_next, y)` into `out` (length `stat_dim`).
    fn statistic(&self, x: &Self::State, x_next: &Self::State, y: &Self::Obs, out: &mut [F]);

    /// Membership test for the statistic domain; the error names the violated constraint.
    fn check_statistic(&self, s: &[F]) -> Result<()>;

    /// Closed-form maximiser of `φ(θ) + ⟨s, ψ(θ)⟩` over the box.
    fn m_step(&self, s: &SufficientStatistic<F>) -> Result<MStep<F>>;

    /// Nearest admissible statistic, used when Monte Carlo noise pushes a
    /// block statistic out of the domain.
    fn project_statistic(&self, s: &SufficientStatistic<F>) -> SufficientStatistic<F>;

    /// Finite-state models return an exact label for each state so the
    /// smoother can merge identical particles.
    fn collapse_key(&self, _x: &Self::State) -> Option<u64> {
        None
    }

    fn state_is_valid(&self, _x: &Self::State) -> bool {
        true
    }

    fn obs_is_valid(&self, _y: &Self::Obs) -> bool {
        true
    }
}

/// Models that expose the exponential-family decomposition
/// `log m_θ(x,x') + log g_θ(x',y) = log h(x,x',y) + φ(θ) + ⟨S(x,x',y), ψ(θ)⟩`.
pub trait ExponentialFamily<F: Real>: StateSpaceModel<F> {
    fn phi(&self, theta: &Parameter<F>) -> F;

    fn psi(&self, theta: &Parameter<F>) -> Vec<F>;

    /// The parameter-free part `log h(x, x', y)`.
    fn log_base_measure(&self, x: &Self::State, x_next: &Self::State, y: &Self::Obs) -> F;

    /// `φ(θ) + ⟨s, ψ(θ)⟩`, the quantity the M-step maximises. Terms with a
    /// zero statistic coordinate contribute nothing even when ψ is infinite.
    fn em_objective(&self, theta: &Parameter<F>, s: &[F]) -> F {
        self.phi(theta) + dot_skip_zero(s, &self.psi(theta))
    }
}

fn dot_skip_zero<F: Real>(s: &[F], psi: &[F]) -> F {
    s.iter()
        .zip(psi)
        .filter(|(a, _)| !a.is_zero())
        .map(|(&a, &b)| a * b)
        .sum()
}

/// `log m_θ(x, x_next) + log g_θ(x_next, y)`; −∞ when either density vanishes.
pub fn log_joint_increment<F: Real, M: StateSpaceModel<F>>(
    model: &M,
    theta: &Parameter<F>,
    x: &M::State,
    x_next: &M::State,
    y: &M::Obs,
) -> Result<F> {
    if !model.state_is_valid(x) || !model.state_is_valid(x_next) || !model.obs_is_valid(y) {
        return Err(Error::InvalidInput(
            "NaN in state or observation".to_string(),
        ));
    }
    let v = model.log_transition(theta, x, x_next, y) + model.log_emission(theta, x_next, y);
    if v.is_nan() {
        return Err(Error::InvalidInput("log density evaluated to NaN".into()));
    }
    Ok(v)
}

/// Runs `m_step` after checking the statistic; convenience for callers
/// holding a raw vector.
pub fn m_step<F: Real, M: StateSpaceModel<F>>(model: &M, s: &[F]) -> Result<MStep<F>> {
    let s = SufficientStatistic::new(s.to_vec())?;
    model.m_step(&s)
}

/// Checks the exponential-family identity at one probe point. Returns the
/// relative discrepancy, or `None` when both sides are −∞.
pub fn exponential_family_discrepancy<F: Real, M: ExponentialFamily<F>>(
    model: &M,
    theta: &Parameter<F>,
    x: &M::State,
    x_next: &M::State,
    y: &M::Obs,
) -> Option<F> {
    let lhs = model.log_transition(theta, x, x_next, y) + model.log_emission(theta, x_next, y);
    let mut s = vec![F::zero(); model.stat_dim()];
    model.statistic(x, x_next, y, &mut s);
    let rhs = model.log_base_measure(x, x_next, y)
        + model.phi(theta)
        + dot_skip_zero(&s, &model.psi(theta));
    if lhs == F::neg_infinity() && rhs == F::neg_infinity() {
        return None;
    }
    let scale = F::one().max(lhs.abs()).max(rhs.abs());
    Some((lhs - rhs).abs() / scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> ParameterBox<f64> {
        ParameterBox::new(vec![0.0, -1.0], vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn parameter_outside_box_is_rejected() {
        let b = unit_box();
        assert!(Parameter::new(vec![0.5, 0.0], &b).is_ok());
        assert!(matches!(
            Parameter::new(vec![1.5, 0.0], &b),
            Err(Error::Domain { .. })
        ));
        assert!(Parameter::new(vec![0.5], &b).is_err());
        assert!(Parameter::new(vec![f64::NAN, 0.0], &b).is_err());
    }

    #[test]
    fn clipping_reports_activity() {
        let b = unit_box();
        let (p, active) = Parameter::clipped(vec![2.0, -3.0], &b).unwrap();
        assert!(active);
        assert_eq!(p.as_slice(), &[1.0, -1.0]);
        let (_, active) = Parameter::clipped(vec![0.2, 0.3], &b).unwrap();
        assert!(!active);
    }

    #[test]
    fn empty_box_rejected() {
        assert!(ParameterBox::new(vec![1.0], vec![0.0]).is_err());
        assert!(ParameterBox::<f64>::new(vec![1.0], vec![]).is_err());
    }

    #[test]
    fn statistic_must_be_finite() {
        assert!(SufficientStatistic::new(vec![1.0, f64::INFINITY]).is_err());
        assert!(SufficientStatistic::new(vec![1.0, f64::NAN]).is_err());
        let a = SufficientStatistic::new(vec![1.0, 2.0]).unwrap();
        let b = SufficientStatistic::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(a.combine(0.5, &b, 0.5).as_slice(), &[2.0, 3.0]);
    }
}
