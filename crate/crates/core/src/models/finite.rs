//! Finite-state hidden Markov model with a finite observation alphabet.
//!
//! `θ` is the transition matrix `A` (K×K) followed by the emission matrix `B`
//! (K×M), both row-major and row-stochastic. The initial law `χ` is fixed.
//! `S(x, x', y)` is the indicator of the transition `(x, x')` followed by the
//! indicator of the emission `(x', y)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{
    ExponentialFamily, MStep, Parameter, ParameterBox, StateSpaceModel, SufficientStatistic,
};
use crate::models::Simulate;
use crate::oracles::FiniteStateModel;
use crate::scalar::Real;

const ROW_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct FiniteHmm<F> {
    states: usize,
    symbols: usize,
    initial: Vec<F>,
    bounds: ParameterBox<F>,
}

fn check_row<F: Real>(row: &[F], what: &str) -> Result<()> {
    if row.iter().any(|p| !(*p >= F::zero()) || *p > F::one()) {
        return Err(Error::InvalidArgument(format!(
            "{what} has entries outside [0, 1]: {row:?}"
        )));
    }
    let sum: F = row.iter().copied().sum();
    if (sum - F::one()).abs() > F::lit(ROW_TOL) {
        return Err(Error::InvalidArgument(format!(
            "{what} is not stochastic (sums to {sum})"
        )));
    }
    Ok(())
}

fn draw<F: Real, R: Rng + ?Sized>(probs: &[F], rng: &mut R) -> usize {
    let u = F::standard_uniform(rng);
    let mut acc = F::zero();
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding: fall back to the last state with positive mass
    probs.iter().rposition(|p| *p > F::zero()).unwrap_or(0)
}

impl<F: Real> FiniteHmm<F> {
    pub fn new(states: usize, symbols: usize, initial: Vec<F>) -> Result<Self> {
        if states == 0 || symbols == 0 {
            return Err(Error::InvalidArgument("empty state or symbol set".into()));
        }
        if initial.len() != states {
            return Err(Error::InvalidArgument(format!(
                "initial law has {} entries for {states} states",
                initial.len()
            )));
        }
        check_row(&initial, "initial law")?;
        let d = states * states + states * symbols;
        let bounds = ParameterBox::new(vec![F::zero(); d], vec![F::one(); d])?;
        Ok(FiniteHmm {
            states,
            symbols,
            initial,
            bounds,
        })
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }

    pub fn initial(&self) -> &[F] {
        &self.initial
    }

    /// Builds `θ` from the two tables, rejecting non-stochastic rows.
    pub fn parameter(&self, transition: &[Vec<F>], emission: &[Vec<F>]) -> Result<Parameter<F>> {
        if transition.len() != self.states || emission.len() != self.states {
            return Err(Error::InvalidArgument("table has the wrong number of rows".into()));
        }
        let mut theta = Vec::with_capacity(self.bounds.dim());
        for (i, row) in transition.iter().enumerate() {
            if row.len() != self.states {
                return Err(Error::InvalidArgument(format!("transition row {i} has wrong length")));
            }
            check_row(row, &format!("transition row {i}"))?;
            theta.extend_from_slice(row);
        }
        for (i, row) in emission.iter().enumerate() {
            if row.len() != self.symbols {
                return Err(Error::InvalidArgument(format!("emission row {i} has wrong length")));
            }
            check_row(row, &format!("emission row {i}"))?;
            theta.extend_from_slice(row);
        }
        Parameter::new(theta, &self.bounds)
    }

    #[inline]
    pub fn transition_prob(&self, theta: &Parameter<F>, i: usize, j: usize) -> F {
        theta.as_slice()[i * self.states + j]
    }

    #[inline]
    pub fn emission_prob(&self, theta: &Parameter<F>, i: usize, y: usize) -> F {
        theta.as_slice()[self.states * self.states + i * self.symbols + y]
    }

    fn transition_row<'a>(&self, theta: &'a Parameter<F>, i: usize) -> &'a [F] {
        &theta.as_slice()[i * self.states..(i + 1) * self.states]
    }

    fn emission_row<'a>(&self, theta: &'a Parameter<F>, i: usize) -> &'a [F] {
        let off = self.states * self.states;
        &theta.as_slice()[off + i * self.symbols..off + (i + 1) * self.symbols]
    }

    fn row_blocks(&self) -> impl Iterator<Item = (std::ops::Range<usize>, String)> + '_ {
        let k = self.states;
        let m = self.symbols;
        (0..k)
            .map(move |i| (i * k..(i + 1) * k, format!("transition row {i}")))
            .chain((0..k).map(move |i| (k * k + i * m..k * k + (i + 1) * m, format!("emission row {i}"))))
    }
}

impl<F: Real> StateSpaceModel<F> for FiniteHmm<F> {
    type State = usize;
    type Obs = usize;

    fn stat_dim(&self) -> usize {
        self.bounds.dim()
    }

    fn parameter_box(&self) -> &ParameterBox<F> {
        &self.bounds
    }

    fn sample_initial<R: Rng + ?Sized>(&self, _theta: &Parameter<F>, rng: &mut R) -> usize {
        draw(&self.initial, rng)
    }

    fn sample_transition<R: Rng + ?Sized>(
        &self,
        theta: &Parameter<F>,
        x: &usize,
        _y: &usize,
        rng: &mut R,
    ) -> usize {
        draw(self.transition_row(theta, *x), rng)
    }

    fn log_transition(&self, theta: &Parameter<F>, x: &usize, x_next: &usize, _y: &usize) -> F {
        self.transition_prob(theta, *x, *x_next).ln()
    }

    fn log_emission(&self, theta: &Parameter<F>, x: &usize, y: &usize) -> F {
        self.emission_prob(theta, *x, *y).ln()
    }

    fn statistic(&self, x: &usize, x_next: &usize, y: &usize, out: &mut [F]) {
        out.fill(F::zero());
        let k = self.states;
        out[x * k + x_next] = F::one();
        out[k * k + x_next * self.symbols + y] = F::one();
    }

    fn check_statistic(&self, s: &[F]) -> Result<()> {
        if s.len() != self.stat_dim() {
            return Err(Error::domain(format!(
                "statistic has dimension {}, expected {}",
                s.len(),
                self.stat_dim()
            )));
        }
        if let Some(i) = s.iter().position(|v| !v.is_finite() || *v < F::zero()) {
            return Err(Error::domain(format!(
                "statistic coordinate {i} must be finite and non-negative (got {})",
                s[i]
            )));
        }
        for (range, name) in self.row_blocks() {
            let mass: F = s[range].iter().copied().sum();
            if !(mass > F::zero()) {
                return Err(Error::domain(format!("{name} of the statistic has positive mass")));
            }
        }
        Ok(())
    }

    fn m_step(&self, s: &SufficientStatistic<F>) -> Result<MStep<F>> {
        let s = s.as_slice();
        self.check_statistic(s)?;
        let mut theta = s.to_vec();
        for (range, _) in self.row_blocks() {
            let row = &mut theta[range];
            let mass: F = row.iter().copied().sum();
            for v in row.iter_mut() {
                *v /= mass;
            }
        }
        let (theta, clipped) = Parameter::clipped(theta, &self.bounds)?;
        Ok(MStep { theta, clipped })
    }

    fn project_statistic(&self, s: &SufficientStatistic<F>) -> SufficientStatistic<F> {
        let mut v: Vec<F> = s
            .as_slice()
            .iter()
            .map(|x| if x.is_finite() { x.max(F::zero()) } else { F::zero() })
            .collect();
        let tiny = F::lit(1e-12);
        for (range, _) in self.row_blocks() {
            let len = F::from_usize_lossy(range.len());
            let row = &mut v[range];
            if !(row.iter().copied().sum::<F>() > F::zero()) {
                row.fill(tiny / len);
            }
        }
        SufficientStatistic::new(v).expect("finite by construction")
    }

    fn collapse_key(&self, x: &usize) -> Option<u64> {
        Some(*x as u64)
    }

    fn state_is_valid(&self, x: &usize) -> bool {
        *x < self.states
    }

    fn obs_is_valid(&self, y: &usize) -> bool {
        *y < self.symbols
    }
}

impl<F: Real> ExponentialFamily<F> for FiniteHmm<F> {
    fn phi(&self, _theta: &Parameter<F>) -> F {
        F::zero()
    }

    fn psi(&self, theta: &Parameter<F>) -> Vec<F> {
        theta.as_slice().iter().map(|p| p.ln()).collect()
    }

    fn log_base_measure(&self, _x: &usize, _x_next: &usize, _y: &usize) -> F {
        F::zero()
    }
}

impl<F: Real> FiniteStateModel<F> for FiniteHmm<F> {
    fn num_states(&self) -> usize {
        self.states
    }

    fn log_initial(&self, _theta: &Parameter<F>, x: usize) -> F {
        self.initial[x].ln()
    }
}

impl<F: Real> Simulate<F> for FiniteHmm<F> {
    fn simulate_step<R: Rng + ?Sized>(
        &self,
        theta: &Parameter<F>,
        x_prev: &usize,
        _t: usize,
        rng: &mut R,
    ) -> (usize, usize) {
        let x = draw(self.transition_row(theta, *x_prev), rng);
        let y = draw(self.emission_row(theta, x), rng);
        (x, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{exponential_family_discrepancy, log_joint_increment};

    fn uniform_hmm() -> (FiniteHmm<f64>, Parameter<f64>) {
        let m = FiniteHmm::new(2, 3, vec![0.5, 0.5]).unwrap();
        let th = m
            .parameter(
                &[vec![0.5, 0.5], vec![0.5, 0.5]],
                &[vec![1.0 / 3.0; 3], vec![1.0 / 3.0; 3]],
            )
            .unwrap();
        (m, th)
    }

    #[test]
    fn uniform_kernel_increment() {
        let (m, th) = uniform_hmm();
        let v = log_joint_increment(&m, &th, &0, &1, &2).unwrap();
        assert!((v - (0.5f64 / 3.0).ln()).abs() < 1e-15);
        assert!(log_joint_increment(&m, &th, &0, &5, &2).is_err());
    }

    #[test]
    fn non_stochastic_rows_rejected() {
        let m = FiniteHmm::<f64>::new(2, 2, vec![0.5, 0.5]).unwrap();
        assert!(m
            .parameter(&[vec![0.6, 0.6], vec![0.5, 0.5]], &[vec![1.0, 0.0], vec![0.0, 1.0]])
            .is_err());
        assert!(FiniteHmm::<f64>::new(2, 2, vec![0.7, 0.7]).is_err());
    }

    #[test]
    fn uniform_statistic_gives_uniform_tables() {
        let (m, _) = uniform_hmm();
        let s = SufficientStatistic::new(vec![0.25; m.stat_dim()]).unwrap();
        let th = m.m_step(&s).unwrap().theta;
        for i in 0..2 {
            for j in 0..2 {
                assert!((m.transition_prob(&th, i, j) - 0.5).abs() < 1e-15);
            }
            for y in 0..3 {
                assert!((m.emission_prob(&th, i, y) - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identity_emission_recovers_transition_frequencies() {
        // count-ratio oracle on a fixed state path observed without noise
        let m = FiniteHmm::<f64>::new(2, 2, vec![1.0, 0.0]).unwrap();
        let path = [0usize, 0, 1, 1, 1, 0, 1, 0, 0, 0, 1];
        let mut counts = [[0.0f64; 2]; 2];
        let mut acc = vec![0.0; m.stat_dim()];
        let mut buf = vec![0.0; m.stat_dim()];
        for w in path.windows(2) {
            counts[w[0]][w[1]] += 1.0;
            m.statistic(&w[0], &w[1], &w[1], &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b / 10.0;
            }
        }
        let th = m.m_step(&SufficientStatistic::new(acc).unwrap()).unwrap().theta;
        for i in 0..2 {
            let row = counts[i][0] + counts[i][1];
            for j in 0..2 {
                assert!((m.transition_prob(&th, i, j) - counts[i][j] / row).abs() < 1e-14);
            }
            assert_eq!(m.emission_prob(&th, i, i), 1.0);
        }
    }

    #[test]
    fn empty_row_is_a_domain_error() {
        let m = FiniteHmm::<f64>::new(2, 2, vec![0.5, 0.5]).unwrap();
        let s = SufficientStatistic::new(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let err = m.m_step(&s).unwrap_err();
        assert!(err.to_string().contains("transition row 1"), "{err}");
        let fixed = m.project_statistic(&s);
        assert!(m.m_step(&fixed).is_ok());
    }

    #[test]
    fn exponential_family_identity() {
        let m = FiniteHmm::new(2, 2, vec![0.5, 0.5]).unwrap();
        let th = m
            .parameter(&[vec![0.9, 0.1], vec![0.3, 0.7]], &[vec![0.8, 0.2], vec![0.25, 0.75]])
            .unwrap();
        for x in 0..2 {
            for xn in 0..2 {
                for y in 0..2 {
                    let d = exponential_family_discrepancy(&m, &th, &x, &xn, &y).unwrap();
                    assert!(d < 1e-12);
                }
            }
        }
    }
}
