//! Concrete models.

mod finite;
mod lgssm;
pub mod slam;
mod sv;

pub use finite::FiniteHmm;
pub use lgssm::LgssmModel;
pub use sv::{SvModel, SvParams};

use rand::Rng;

use crate::model::{Parameter, StateSpaceModel};
use crate::scalar::Real;

/// Models that can generate synthetic data.
pub trait Simulate<F: Real>: StateSpaceModel<F> {
    /// Draws `(X_t, Y_t)` given `X_{t-1}`; `t` is 1-based.
    fn simulate_step<R: Rng + ?Sized>(
        &self,
        theta: &Parameter<F>,
        x_prev: &Self::State,
        t: usize,
        rng: &mut R,
    ) -> (Self::State, Self::Obs);
}

/// Lazily simulated observation stream: one hidden state is kept, each
/// observation is produced on demand and handed over by value.
pub struct SimulatedStream<'a, F: Real, M: Simulate<F>, R> {
    model: &'a M,
    theta: Parameter<F>,
    state: M::State,
    t: usize,
    rng: R,
}

impl<'a, F: Real, M: Simulate<F>, R: Rng> SimulatedStream<'a, F, M, R> {
    /// Starts from `X_0 ~ χ` under `theta`.
    pub fn new(model: &'a M, theta: Parameter<F>, mut rng: R) -> Self {
        let state = model.sample_initial(&theta, &mut rng);
        Self::from_state(model, theta, state, rng)
    }

    pub fn from_state(model: &'a M, theta: Parameter<F>, state: M::State, rng: R) -> Self {
        SimulatedStream {
            model,
            theta,
            state,
            t: 0,
            rng,
        }
    }

    /// Hidden state behind the most recent observation.
    pub fn state(&self) -> &M::State {
        &self.state
    }
}

impl<F: Real, M: Simulate<F>, R: Rng> Iterator for SimulatedStream<'_, F, M, R> {
    type Item = M::Obs;

    fn next(&mut self) -> Option<M::Obs> {
        self.t += 1;
        let (x, y) = self
            .model
            .simulate_step(&self.theta, &self.state, self.t, &mut self.rng);
        self.state = x;
        Some(y)
    }
}

/// Hidden path and observations of length `len`, for tests and oracles.
pub fn simulate_path<F, M, R>(
    model: &M,
    theta: &Parameter<F>,
    len: usize,
    rng: &mut R,
) -> (Vec<M::State>, Vec<M::Obs>)
where
    F: Real,
    M: Simulate<F>,
    R: Rng + ?Sized,
{
    let mut xs = Vec::with_capacity(len + 1);
    let mut ys = Vec::with_capacity(len);
    xs.push(model.sample_initial(theta, rng));
    for t in 1..=len {
        let (x, y) = model.simulate_step(theta, &xs[t - 1], t, rng);
        xs.push(x);
        ys.push(y);
    }
    (xs, ys)
}
