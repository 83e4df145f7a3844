//! Landmark SLAM with a bicycle robot.
//!
//! The pose `x = (x1, x2, x3)` moves by the front-wheel kinematic model driven
//! by noisy controls `(v̂, ψ̂) ~ N((v, ψ), Q)`. At each step the robot measures
//! range and bearing to the landmarks within its sensing radius, with
//! correlated Gaussian noise `R`. The map (all landmark positions) is the
//! parameter.
//!
//! The exact emission is not an exponential family in the map. Each block
//! therefore uses [`SlamBlockModel`], in which `h(x, κ)` is replaced by its
//! first-order expansion in `κ` around the current map estimate. The
//! statistic per landmark is the information matrix `HᵀR⁻¹H` (three entries)
//! and information vector `HᵀR⁻¹z` (two entries), and the M-step solves one
//! 2×2 system per landmark.
//!
//! Inside the filter the transition is the Gaussian obtained by pushing `Q`
//! through the Jacobian of the kinematics, plus a small isotropic `jitter`
//! so the density has full rank. With all noise set to zero the transition is
//! deterministic.

use std::borrow::Borrow;

use rand::Rng;

use crate::boem::{run_block, BlockEstimator, BlockSize};
use crate::error::{Error, Result};
use crate::model::{
    ExponentialFamily, MStep, Parameter, ParameterBox, StateSpaceModel, SufficientStatistic,
};
use crate::rng::{stream, Purpose};
use crate::scalar::{wrap_angle, Real};
use crate::smc::{init_particles, Bootstrap, ParticleSystem};

/// Coordinates of the map are confined to `[-MAP_BOUND, MAP_BOUND]` metres.
pub const MAP_BOUND: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlamState<F> {
    pub x1: F,
    pub x2: F,
    /// Heading in `(-π, π]`.
    pub x3: F,
}

impl<F: Real> SlamState<F> {
    pub fn new(x1: F, x2: F, x3: F) -> Self {
        SlamState {
            x1,
            x2,
            x3: wrap_angle(x3),
        }
    }
}

/// Commanded velocity (m/s) and steering angle (rad).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Control<F> {
    pub v: F,
    pub psi: F,
}

/// Range (m) and bearing (rad) to one landmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reading<F> {
    pub landmark: usize,
    pub range: F,
    pub bearing: F,
}

/// Everything the robot knows at step `t`: the control sent between `t - 1`
/// and `t`, and the readings taken at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlamObservation<F> {
    pub control: Control<F>,
    pub readings: Vec<Reading<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlamMap<F> {
    landmarks: Vec<[F; 2]>,
}

impl<F: Real> SlamMap<F> {
    pub fn new(landmarks: Vec<[F; 2]>) -> Result<Self> {
        if landmarks.is_empty() {
            return Err(Error::InvalidArgument("map needs at least one landmark".into()));
        }
        if landmarks.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("landmark coordinates must be finite".into()));
        }
        Ok(SlamMap { landmarks })
    }

    /// `q` landmarks uniform in `[0, side]²`.
    pub fn random<R: Rng + ?Sized>(q: usize, side: F, rng: &mut R) -> Result<Self> {
        let landmarks = (0..q)
            .map(|_| [side * F::standard_uniform(rng), side * F::standard_uniform(rng)])
            .collect();
        Self::new(landmarks)
    }

    /// Interleaved `(κ_1, κ_2)` coordinates, as stored in the parameter.
    pub fn from_flat(theta: &[F]) -> Result<Self> {
        if theta.len() % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "map vector has odd length {}",
                theta.len()
            )));
        }
        Self::new(theta.chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn to_flat(&self) -> Vec<F> {
        self.landmarks.iter().flatten().copied().collect()
    }

    pub fn q(&self) -> usize {
        self.landmarks.len()
    }

    pub fn landmark(&self, i: usize) -> [F; 2] {
        self.landmarks[i]
    }

    pub fn landmarks(&self) -> &[[F; 2]] {
        &self.landmarks
    }

    /// Euclidean distance of each landmark to its counterpart in `other`.
    pub fn distances(&self, other: &SlamMap<F>) -> Vec<F> {
        self.landmarks
            .iter()
            .zip(&other.landmarks)
            .map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]))
            .collect()
    }
}

/// Time step (s) and wheelbase (m).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vehicle<F> {
    pub dt: F,
    pub wheelbase: F,
}

impl<F: Real> Vehicle<F> {
    pub fn new(dt: F, wheelbase: F) -> Result<Self> {
        if !(dt > F::zero()) || !(wheelbase > F::zero()) {
            return Err(Error::InvalidArgument(format!(
                "dt and wheelbase must be positive (dt = {dt}, B = {wheelbase})"
            )));
        }
        Ok(Vehicle { dt, wheelbase })
    }
}

impl<F: Real> Default for Vehicle<F> {
    fn default() -> Self {
        Vehicle {
            dt: F::lit(0.25),
            wheelbase: F::lit(1.5),
        }
    }
}

/// Standard deviations of the control noise, `Q = diag(σ_v², σ_ψ²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlNoise<F> {
    pub sigma_v: F,
    pub sigma_psi: F,
}

impl<F: Real> ControlNoise<F> {
    pub fn zero() -> Self {
        ControlNoise {
            sigma_v: F::zero(),
            sigma_psi: F::zero(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.sigma_v.is_zero() && self.sigma_psi.is_zero()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [F; 2] {
        [
            self.sigma_v * F::standard_normal(rng),
            self.sigma_psi * F::standard_normal(rng),
        ]
    }
}

impl<F: Real> Default for ControlNoise<F> {
    fn default() -> Self {
        ControlNoise {
            sigma_v: F::lit(0.5),
            sigma_psi: F::PI() / F::lit(60.0),
        }
    }
}

/// `R = [[σ_r², ρ], [ρ, σ_b²]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorNoise<F> {
    pub sigma_r: F,
    pub sigma_b: F,
    pub rho: F,
}

impl<F: Real> SensorNoise<F> {
    pub fn zero() -> Self {
        SensorNoise {
            sigma_r: F::zero(),
            sigma_b: F::zero(),
            rho: F::zero(),
        }
    }

    pub fn covariance(&self) -> [[F; 2]; 2] {
        [
            [self.sigma_r * self.sigma_r, self.rho],
            [self.rho, self.sigma_b * self.sigma_b],
        ]
    }

    /// Lower Cholesky factor; zero noise is allowed.
    pub fn cholesky(&self) -> Result<[[F; 2]; 2]> {
        let c = self.covariance();
        if c[0][0].is_zero() {
            if !c[0][1].is_zero() {
                return Err(Error::InvalidArgument(
                    "range variance is zero but the covariance is not".into(),
                ));
            }
            return Ok([[F::zero(), F::zero()], [F::zero(), self.sigma_b.abs()]]);
        }
        let l11 = c[0][0].sqrt();
        let l21 = c[0][1] / l11;
        let rest = c[1][1] - l21 * l21;
        if rest < -F::epsilon() * c[1][1] {
            return Err(Error::InvalidArgument(format!(
                "sensor covariance {c:?} is not positive semi-definite"
            )));
        }
        Ok([[l11, F::zero()], [l21, rest.max(F::zero()).sqrt()]])
    }

    /// `R⁻¹`; requires `R` positive definite.
    pub fn precision(&self) -> Result<[[F; 2]; 2]> {
        let c = self.covariance();
        let det = c[0][0] * c[1][1] - c[0][1] * c[0][1];
        if !(c[0][0] > F::zero()) || !(det > F::zero()) {
            return Err(Error::InvalidArgument(format!(
                "sensor covariance {c:?} is not positive definite"
            )));
        }
        Ok([
            [c[1][1] / det, -c[0][1] / det],
            [-c[0][1] / det, c[0][0] / det],
        ])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<[F; 2]> {
        let l = self.cholesky()?;
        let z0 = F::standard_normal(rng);
        let z1 = F::standard_normal(rng);
        Ok([l[0][0] * z0, l[1][0] * z0 + l[1][1] * z1])
    }
}

impl<F: Real> Default for SensorNoise<F> {
    fn default() -> Self {
        SensorNoise {
            sigma_r: F::lit(0.5),
            sigma_b: F::PI() / F::lit(60.0),
            rho: F::lit(0.01),
        }
    }
}

/// Front-wheel bicycle kinematics with control perturbation `noise = (v̂ - v, ψ̂ - ψ)`.
pub fn slam_transition<F: Real>(
    x: &SlamState<F>,
    control: &Control<F>,
    noise: [F; 2],
    vehicle: &Vehicle<F>,
) -> SlamState<F> {
    let v = control.v + noise[0];
    let psi = control.psi + noise[1];
    let step = v * vehicle.dt;
    let dir = x.x3 + psi;
    SlamState {
        x1: x.x1 + step * dir.cos(),
        x2: x.x2 + step * dir.sin(),
        x3: wrap_angle(x.x3 + step / vehicle.wheelbase * psi.sin()),
    }
}

/// Noise-free range and bearing from pose `x` to `kappa`.
pub fn range_bearing<F: Real>(x: &SlamState<F>, kappa: [F; 2]) -> Result<(F, F)> {
    let dx = kappa[0] - x.x1;
    let dy = kappa[1] - x.x2;
    if dx.is_zero() && dy.is_zero() {
        return Err(Error::InvalidInput(format!(
            "singular bearing: landmark at ({}, {}) coincides with the robot",
            kappa[0], kappa[1]
        )));
    }
    Ok((dx.hypot(dy), wrap_angle(dy.atan2(dx) - x.x3)))
}

/// Landmarks within `radius` of the robot, in index order.
pub fn visible_landmarks<F: Real>(x: &SlamState<F>, map: &SlamMap<F>, radius: F) -> Vec<usize> {
    map.landmarks()
        .iter()
        .enumerate()
        .filter(|(_, k)| (k[0] - x.x1).hypot(k[1] - x.x2) <= radius)
        .map(|(i, _)| i)
        .collect()
}

/// Noisy range-bearing readings of the `visible` landmarks.
pub fn slam_observe<F: Real, R: Rng + ?Sized>(
    x: &SlamState<F>,
    map: &SlamMap<F>,
    visible: &[usize],
    noise: &SensorNoise<F>,
    rng: &mut R,
) -> Result<Vec<Reading<F>>> {
    let mut out = Vec::with_capacity(visible.len());
    for &i in visible {
        if i >= map.q() {
            return Err(Error::InvalidArgument(format!(
                "landmark {i} does not exist (q = {})",
                map.q()
            )));
        }
        let (r, b) = range_bearing(x, map.landmark(i))?;
        let e = noise.sample(rng)?;
        out.push(Reading {
            landmark: i,
            range: r + e[0],
            bearing: wrap_angle(b + e[1]),
        });
    }
    Ok(out)
}

/// Steers towards a cyclic list of waypoints at constant speed.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopController<F> {
    waypoints: Vec<[F; 2]>,
    next: usize,
    speed: F,
    max_steer: F,
    capture_radius: F,
}

impl<F: Real> LoopController<F> {
    pub fn new(waypoints: Vec<[F; 2]>, speed: F, max_steer: F, capture_radius: F) -> Result<Self> {
        if waypoints.is_empty() {
            return Err(Error::InvalidArgument("controller needs waypoints".into()));
        }
        Ok(LoopController {
            waypoints,
            next: 0,
            speed,
            max_steer,
            capture_radius,
        })
    }

    /// Counter-clockwise square loop inset by `margin` in a `side × side` arena.
    /// The first target is the second corner; start the robot at the first.
    pub fn square(side: F, margin: F, speed: F) -> Self {
        let (lo, hi) = (margin, side - margin);
        let mut c = LoopController::new(
            vec![[lo, lo], [hi, lo], [hi, hi], [lo, hi]],
            speed,
            F::lit(0.5),
            F::lit(2.0),
        )
        .expect("non-empty");
        c.next = 1;
        c
    }

    pub fn start_pose(&self) -> SlamState<F> {
        let n = self.waypoints.len();
        let from = self.waypoints[(self.next + n - 1) % n];
        let to = self.waypoints[self.next];
        SlamState::new(from[0], from[1], (to[1] - from[1]).atan2(to[0] - from[0]))
    }

    /// Control for the next step given the current pose.
    pub fn command(&mut self, x: &SlamState<F>) -> Control<F> {
        let mut wp = self.waypoints[self.next];
        if (wp[0] - x.x1).hypot(wp[1] - x.x2) < self.capture_radius {
            self.next = (self.next + 1) % self.waypoints.len();
            wp = self.waypoints[self.next];
        }
        let bearing = wrap_angle((wp[1] - x.x2).atan2(wp[0] - x.x1) - x.x3);
        Control {
            v: self.speed,
            psi: bearing.max(-self.max_steer).min(self.max_steer),
        }
    }
}

/// Everything needed to simulate a SLAM data set.
#[derive(Debug, Clone, PartialEq)]
pub struct SlamWorld<F> {
    pub map: SlamMap<F>,
    pub vehicle: Vehicle<F>,
    pub control_noise: ControlNoise<F>,
    pub sensor_noise: SensorNoise<F>,
    pub sensing_radius: F,
    pub controller: LoopController<F>,
    pub start: SlamState<F>,
}

/// Lazily simulated `(true pose, observation)` pairs.
pub struct SlamSimulator<F: Real, R> {
    world: SlamWorld<F>,
    pose: SlamState<F>,
    rng: R,
    failed: bool,
}

impl<F: Real, R: Rng> SlamSimulator<F, R> {
    pub fn new(world: SlamWorld<F>, rng: R) -> Self {
        let pose = world.start;
        SlamSimulator {
            world,
            pose,
            rng,
            failed: false,
        }
    }

    pub fn pose(&self) -> &SlamState<F> {
        &self.pose
    }
}

impl<F: Real, R: Rng> Iterator for SlamSimulator<F, R> {
    type Item = Result<(SlamState<F>, SlamObservation<F>)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let control = self.world.controller.command(&self.pose);
        let noise = self.world.control_noise.sample(&mut self.rng);
        self.pose = slam_transition(&self.pose, &control, noise, &self.world.vehicle);
        let visible = visible_landmarks(&self.pose, &self.world.map, self.world.sensing_radius);
        let readings = match slam_observe(
            &self.pose,
            &self.world.map,
            &visible,
            &self.world.sensor_noise,
            &mut self.rng,
        ) {
            Ok(r) => r,
            Err(e) => {
                self.failed = true;
                return Some(Err(e));
            }
        };
        Some(Ok((self.pose, SlamObservation { control, readings })))
    }
}

/// Known quantities of the filtering model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlamModelConfig<F> {
    pub vehicle: Vehicle<F>,
    pub control_noise: ControlNoise<F>,
    pub sensor_noise: SensorNoise<F>,
    /// Variance (m², rad²) added to each pose coordinate of the transition.
    pub jitter: F,
    /// Known initial pose.
    pub start: SlamState<F>,
}

impl<F: Real> SlamModelConfig<F> {
    pub fn validate(&self) -> Result<()> {
        Vehicle::new(self.vehicle.dt, self.vehicle.wheelbase)?;
        self.sensor_noise.precision()?;
        if self.jitter < F::zero() || !self.jitter.is_finite() {
            return Err(Error::InvalidArgument("jitter must be a finite variance".into()));
        }
        if self.jitter.is_zero() && !self.control_noise.is_zero() {
            return Err(Error::InvalidArgument(
                "control noise without jitter gives a rank-deficient transition".into(),
            ));
        }
        Ok(())
    }

    fn deterministic(&self) -> bool {
        self.jitter.is_zero() && self.control_noise.is_zero()
    }
}

/// Box for a map of `q` landmarks.
pub fn map_box<F: Real>(q: usize) -> ParameterBox<F> {
    let b = F::lit(MAP_BOUND);
    ParameterBox::new(vec![-b; 2 * q], vec![b; 2 * q]).expect("static box")
}

/// SLAM model with the emission linearised in the map around `map_hat`.
#[derive(Debug, Clone)]
pub struct SlamBlockModel<F> {
    cfg: SlamModelConfig<F>,
    map_hat: SlamMap<F>,
    bounds: ParameterBox<F>,
    precision: [[F; 2]; 2],
    log_norm: F,
}

struct Linearization<F> {
    pred: [F; 2],
    h: [[F; 2]; 2],
}

impl<F: Real> SlamBlockModel<F> {
    pub fn linearized(cfg: SlamModelConfig<F>, map_hat: SlamMap<F>) -> Result<Self> {
        cfg.validate()?;
        let precision = cfg.sensor_noise.precision()?;
        let c = cfg.sensor_noise.covariance();
        let det = c[0][0] * c[1][1] - c[0][1] * c[0][1];
        let log_norm = -F::TAU().ln() - F::lit(0.5) * det.ln();
        let bounds = map_box(map_hat.q());
        Ok(SlamBlockModel {
            cfg,
            map_hat,
            bounds,
            precision,
            log_norm,
        })
    }

    pub fn map_hat(&self) -> &SlamMap<F> {
        &self.map_hat
    }

    pub fn config(&self) -> &SlamModelConfig<F> {
        &self.cfg
    }

    pub fn parameter(&self, map: &SlamMap<F>) -> Result<Parameter<F>> {
        Parameter::new(map.to_flat(), &self.bounds)
    }

    /// `h(x, θ̂_i)` and its Jacobian in `κ`. A landmark on top of the robot
    /// gives a zero Jacobian and carries no information.
    fn linearize(&self, x: &SlamState<F>, i: usize) -> Linearization<F> {
        let p = self.map_hat.landmark(i);
        let dx = p[0] - x.x1;
        let dy = p[1] - x.x2;
        let r2 = dx * dx + dy * dy;
        if r2.is_zero() {
            return Linearization {
                pred: [F::zero(), wrap_angle(-x.x3)],
                h: [[F::zero(); 2]; 2],
            };
        }
        let r = r2.sqrt();
        Linearization {
            pred: [r, wrap_angle(dy.atan2(dx) - x.x3)],
            h: [[dx / r, dy / r], [-dy / r2, dx / r2]],
        }
    }

    /// Linearised pseudo-observation `z = (y - h(x, θ̂)) + H θ̂`, bearing
    /// residual wrapped.
    fn pseudo_obs(&self, lin: &Linearization<F>, reading: &Reading<F>) -> [F; 2] {
        let p = self.map_hat.landmark(reading.landmark);
        [
            reading.range - lin.pred[0] + lin.h[0][0] * p[0] + lin.h[0][1] * p[1],
            wrap_angle(reading.bearing - lin.pred[1]) + lin.h[1][0] * p[0] + lin.h[1][1] * p[1],
        ]
    }

    fn quad(&self, e: [F; 2]) -> F {
        let p = &self.precision;
        e[0] * (p[0][0] * e[0] + p[0][1] * e[1]) + e[1] * (p[1][0] * e[0] + p[1][1] * e[1])
    }

    /// Mean and covariance of the Gaussian transition from `x` under `u`.
    fn transition_moments(&self, x: &SlamState<F>, u: &Control<F>) -> (SlamState<F>, [[F; 3]; 3]) {
        let veh = &self.cfg.vehicle;
        let mean = slam_transition(x, u, [F::zero(), F::zero()], veh);
        let dir = x.x3 + u.psi;
        let g_v = [
            veh.dt * dir.cos(),
            veh.dt * dir.sin(),
            veh.dt / veh.wheelbase * u.psi.sin(),
        ];
        let g_psi = [
            -u.v * veh.dt * dir.sin(),
            u.v * veh.dt * dir.cos(),
            u.v * veh.dt / veh.wheelbase * u.psi.cos(),
        ];
        let qv = self.cfg.control_noise.sigma_v * self.cfg.control_noise.sigma_v;
        let qp = self.cfg.control_noise.sigma_psi * self.cfg.control_noise.sigma_psi;
        let mut cov = [[F::zero(); 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] = qv * g_v[a] * g_v[b] + qp * g_psi[a] * g_psi[b];
            }
            cov[a][a] += self.cfg.jitter;
        }
        (mean, cov)
    }
}

fn cholesky3<F: Real>(c: &[[F; 3]; 3]) -> Option<[[F; 3]; 3]> {
    let mut l = [[F::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let mut s = c[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(s > F::zero()) {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

impl<F: Real> StateSpaceModel<F> for SlamBlockModel<F> {
    type State = SlamState<F>;
    type Obs = SlamObservation<F>;

    fn stat_dim(&self) -> usize {
        5 * self.map_hat.q()
    }

    fn parameter_box(&self) -> &ParameterBox<F> {
        &self.bounds
    }

    fn sample_initial<R: Rng + ?Sized>(&self, _theta: &Parameter<F>, _rng: &mut R) -> SlamState<F> {
        self.cfg.start
    }

    fn sample_transition<R: Rng + ?Sized>(
        &self,
        _theta: &Parameter<F>,
        x: &SlamState<F>,
        y: &SlamObservation<F>,
        rng: &mut R,
    ) -> SlamState<F> {
        let (mean, cov) = self.transition_moments(x, &y.control);
        if self.cfg.deterministic() {
            return mean;
        }
        let l = cholesky3(&cov).expect("jitter makes the covariance positive definite");
        let z = [
            F::standard_normal(rng),
            F::standard_normal(rng),
            F::standard_normal(rng),
        ];
        SlamState::new(
            mean.x1 + l[0][0] * z[0],
            mean.x2 + l[1][0] * z[0] + l[1][1] * z[1],
            mean.x3 + l[2][0] * z[0] + l[2][1] * z[1] + l[2][2] * z[2],
        )
    }

    fn log_transition(
        &self,
        _theta: &Parameter<F>,
        x: &SlamState<F>,
        x_next: &SlamState<F>,
        y: &SlamObservation<F>,
    ) -> F {
        let (mean, cov) = self.transition_moments(x, &y.control);
        let d = [
            x_next.x1 - mean.x1,
            x_next.x2 - mean.x2,
            wrap_angle(x_next.x3 - mean.x3),
        ];
        if self.cfg.deterministic() {
            return if d.iter().all(|v| v.is_zero()) {
                F::zero()
            } else {
                F::neg_infinity()
            };
        }
        let Some(l) = cholesky3(&cov) else {
            return F::neg_infinity();
        };
        let z0 = d[0] / l[0][0];
        let z1 = (d[1] - l[1][0] * z0) / l[1][1];
        let z2 = (d[2] - l[2][0] * z0 - l[2][1] * z1) / l[2][2];
        let log_det = l[0][0].ln() + l[1][1].ln() + l[2][2].ln();
        -F::lit(0.5) * (z0 * z0 + z1 * z1 + z2 * z2) - log_det - F::lit(1.5) * F::TAU().ln()
    }

    fn log_emission(&self, theta: &Parameter<F>, x: &SlamState<F>, y: &SlamObservation<F>) -> F {
        let th = theta.as_slice();
        let mut acc = F::zero();
        for reading in &y.readings {
            let i = reading.landmark;
            let lin = self.linearize(x, i);
            let p = self.map_hat.landmark(i);
            let dk = [th[2 * i] - p[0], th[2 * i + 1] - p[1]];
            let e = [
                reading.range - lin.pred[0] - (lin.h[0][0] * dk[0] + lin.h[0][1] * dk[1]),
                wrap_angle(reading.bearing - lin.pred[1])
                    - (lin.h[1][0] * dk[0] + lin.h[1][1] * dk[1]),
            ];
            acc += self.log_norm - F::lit(0.5) * self.quad(e);
        }
        acc
    }

    fn statistic(
        &self,
        _x: &SlamState<F>,
        x_next: &SlamState<F>,
        y: &SlamObservation<F>,
        out: &mut [F],
    ) {
        out.iter_mut().for_each(|v| *v = F::zero());
        let p = &self.precision;
        for reading in &y.readings {
            let lin = self.linearize(x_next, reading.landmark);
            let z = self.pseudo_obs(&lin, reading);
            let h = &lin.h;
            // HᵀR⁻¹, a 2×2 matrix with rows indexed by κ coordinates
            let mut ht_p = [[F::zero(); 2]; 2];
            for a in 0..2 {
                for b in 0..2 {
                    ht_p[a][b] = h[0][a] * p[0][b] + h[1][a] * p[1][b];
                }
            }
            let info = |a: usize, b: usize| ht_p[a][0] * h[0][b] + ht_p[a][1] * h[1][b];
            let o = &mut out[5 * reading.landmark..5 * reading.landmark + 5];
            o[0] += info(0, 0);
            o[1] += info(0, 1);
            o[2] += info(1, 1);
            o[3] += ht_p[0][0] * z[0] + ht_p[0][1] * z[1];
            o[4] += ht_p[1][0] * z[0] + ht_p[1][1] * z[1];
        }
    }

    fn check_statistic(&self, s: &[F]) -> Result<()> {
        check_map_statistic(s, self.map_hat.q())
    }

    fn m_step(&self, s: &SufficientStatistic<F>) -> Result<MStep<F>> {
        slam_m_step(s, &self.map_hat, &self.bounds)
    }

    fn project_statistic(&self, s: &SufficientStatistic<F>) -> SufficientStatistic<F> {
        project_map_statistic(s)
    }

    fn state_is_valid(&self, x: &SlamState<F>) -> bool {
        x.x1.is_finite() && x.x2.is_finite() && x.x3.is_finite()
    }

    fn obs_is_valid(&self, y: &SlamObservation<F>) -> bool {
        y.control.v.is_finite()
            && y.control.psi.is_finite()
            && y.readings.iter().all(|r| {
                r.range.is_finite() && r.bearing.is_finite() && r.landmark < self.map_hat.q()
            })
    }
}

impl<F: Real> ExponentialFamily<F> for SlamBlockModel<F> {
    fn phi(&self, _theta: &Parameter<F>) -> F {
        F::zero()
    }

    fn psi(&self, theta: &Parameter<F>) -> Vec<F> {
        let half = F::lit(0.5);
        theta
            .as_slice()
            .chunks(2)
            .flat_map(|k| [-half * k[0] * k[0], -k[0] * k[1], -half * k[1] * k[1], k[0], k[1]])
            .collect()
    }

    fn log_base_measure(
        &self,
        x: &SlamState<F>,
        x_next: &SlamState<F>,
        y: &SlamObservation<F>,
    ) -> F {
        let theta = Parameter::new(self.map_hat.to_flat(), &self.bounds).expect("map in box");
        let mut acc = self.log_transition(&theta, x, x_next, y);
        for reading in &y.readings {
            let lin = self.linearize(x_next, reading.landmark);
            let z = self.pseudo_obs(&lin, reading);
            acc += self.log_norm - F::lit(0.5) * self.quad(z);
        }
        acc
    }
}

/// Per-landmark information matrices must be positive semi-definite.
pub fn check_map_statistic<F: Real>(s: &[F], q: usize) -> Result<()> {
    if s.len() != 5 * q {
        return Err(Error::domain(format!(
            "statistic has dimension {}, expected {}",
            s.len(),
            5 * q
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("statistic entries must be finite"));
    }
    let tol = F::lit(1e-9);
    for (i, c) in s.chunks(5).enumerate() {
        let scale = c[0].abs().max(c[2].abs());
        if c[0] < -tol * scale
            || c[2] < -tol * scale
            || c[0] * c[2] - c[1] * c[1] < -tol * scale * scale
        {
            return Err(Error::domain(format!(
                "information matrix of landmark {i} is not positive semi-definite"
            )));
        }
    }
    Ok(())
}

fn project_map_statistic<F: Real>(s: &SufficientStatistic<F>) -> SufficientStatistic<F> {
    let mut v = s.as_slice().to_vec();
    for c in v.chunks_mut(5) {
        for x in c.iter_mut() {
            if !x.is_finite() {
                *x = F::zero();
            }
        }
        c[0] = c[0].max(F::zero());
        c[2] = c[2].max(F::zero());
        let bound = (c[0] * c[2]).sqrt();
        c[1] = c[1].max(-bound).min(bound);
    }
    SufficientStatistic::new(v).expect("finite by construction")
}

/// Solves `Λ_i κ_i = η_i` per landmark; a landmark whose information matrix is
/// singular keeps its position in `fallback`.
pub fn slam_m_step<F: Real>(
    s: &SufficientStatistic<F>,
    fallback: &SlamMap<F>,
    bounds: &ParameterBox<F>,
) -> Result<MStep<F>> {
    check_map_statistic(s.as_slice(), fallback.q())?;
    let mut theta = Vec::with_capacity(2 * fallback.q());
    for (i, c) in s.as_slice().chunks(5).enumerate() {
        let trace = c[0] + c[2];
        let det = c[0] * c[2] - c[1] * c[1];
        if trace > F::zero() && det > F::lit(1e-12) * trace * trace {
            theta.push((c[2] * c[3] - c[1] * c[4]) / det);
            theta.push((c[0] * c[4] - c[1] * c[3]) / det);
        } else {
            log::debug!("landmark {i} has singular information; left unchanged");
            let p = fallback.landmark(i);
            theta.push(p[0]);
            theta.push(p[1]);
        }
    }
    let (theta, clipped) = Parameter::clipped(theta, bounds)?;
    Ok(MStep { theta, clipped })
}

/// Weighted particle mean of the pose; heading by circular mean.
pub fn mean_pose<F: Real>(ps: &ParticleSystem<F, SlamState<F>>) -> SlamState<F> {
    let x1 = ps.expectation(|x| x.x1);
    let x2 = ps.expectation(|x| x.x2);
    let s = ps.expectation(|x| x.x3.sin());
    let c = ps.expectation(|x| x.x3.cos());
    SlamState::new(x1, x2, s.atan2(c))
}

/// Particle block statistics for SLAM: each block relinearises around the
/// current map and starts from the previous block's final filter (the first
/// block starts at the known initial pose). The bootstrap filter is used.
#[derive(Debug, Clone)]
pub struct SlamBlockEstimator<F: Real> {
    cfg: SlamModelConfig<F>,
    bounds: ParameterBox<F>,
    master_seed: u64,
    replication: u64,
    carried: Option<ParticleSystem<F, SlamState<F>>>,
    path: Vec<SlamState<F>>,
}

impl<F: Real> SlamBlockEstimator<F> {
    pub fn new(cfg: SlamModelConfig<F>, q: usize, master_seed: u64, replication: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(SlamBlockEstimator {
            cfg,
            bounds: map_box(q),
            master_seed,
            replication,
            carried: None,
            path: Vec::new(),
        })
    }

    /// Filter mean pose after every observation processed so far.
    pub fn path(&self) -> &[SlamState<F>] {
        &self.path
    }
}

impl<F: Real> BlockEstimator<F> for SlamBlockEstimator<F> {
    type Obs = SlamObservation<F>;

    fn parameter_box(&self) -> &ParameterBox<F> {
        &self.bounds
    }

    fn stat_dim(&self) -> usize {
        5 * (self.bounds.dim() / 2)
    }

    fn block_statistic<I>(
        &mut self,
        theta: &Parameter<F>,
        block: &BlockSize,
        observations: I,
    ) -> Result<SufficientStatistic<F>>
    where
        I: Iterator,
        I::Item: Borrow<SlamObservation<F>>,
    {
        let model = SlamBlockModel::linearized(self.cfg, SlamMap::from_flat(theta.as_slice())?)?;
        let mut rng = stream(
            self.master_seed,
            self.replication,
            Purpose::Filter,
            block.n as u64,
        );
        let init = match self.carried.take() {
            Some(prev) => prev.resample(block.particles, &mut rng)?,
            None => init_particles(&model, theta, block.particles, &mut rng)?,
        };
        let path = &mut self.path;
        let (s, last) = run_block(
            &model,
            theta,
            &Bootstrap,
            init,
            observations,
            block,
            &mut rng,
            |ps| path.push(mean_pose(ps)),
        )?;
        self.carried = Some(last);
        Ok(s)
    }

    fn check_statistic(&self, _theta: &Parameter<F>, s: &[F]) -> Result<()> {
        check_map_statistic(s, self.bounds.dim() / 2)
    }

    fn m_step(&self, theta: &Parameter<F>, s: &SufficientStatistic<F>) -> Result<MStep<F>> {
        slam_m_step(s, &SlamMap::from_flat(theta.as_slice())?, &self.bounds)
    }

    fn project_statistic(
        &self,
        _theta: &Parameter<F>,
        s: &SufficientStatistic<F>,
    ) -> SufficientStatistic<F> {
        project_map_statistic(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::exponential_family_discrepancy;
    use nalgebra::{DMatrix, DVector, Matrix2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn veh() -> Vehicle<f64> {
        Vehicle::default()
    }

    #[test]
    fn straight_line_advance() {
        let x = SlamState::new(1.0, 2.0, 0.0);
        let u = Control { v: 2.0, psi: 0.0 };
        let y = slam_transition(&x, &u, [0.0, 0.0], &veh());
        assert_eq!(y, SlamState::new(1.5, 2.0, 0.0));
    }

    #[test]
    fn zero_velocity_keeps_pose() {
        let x = SlamState::new(-3.0, 4.0, 2.5);
        let u = Control { v: 0.0, psi: 0.4 };
        assert_eq!(slam_transition(&x, &u, [0.0, 0.0], &veh()), x);
    }

    #[test]
    fn heading_stays_wrapped() {
        let mut x = SlamState::new(0.0, 0.0, 3.0);
        let u = Control { v: 5.0, psi: 0.6 };
        for _ in 0..500 {
            let y = slam_transition(&x, &u, [0.0, 0.0], &veh());
            assert_eq!(y, slam_transition(&x, &u, [0.0, 0.0], &veh()));
            assert!(y.x3 > -PI && y.x3 <= PI);
            x = y;
        }
    }

    // Box–Muller keeps the oracle independent of the crate's samplers.
    fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }

    fn moments(samples: &[[f64; 3]]) -> ([f64; 3], [[f64; 3]; 3]) {
        let n = samples.len() as f64;
        let mut m = [0.0; 3];
        for s in samples {
            for k in 0..3 {
                m[k] += s[k] / n;
            }
        }
        let mut c = [[0.0; 3]; 3];
        for s in samples {
            for a in 0..3 {
                for b in 0..3 {
                    c[a][b] += (s[a] - m[a]) * (s[b] - m[b]) / (n - 1.0);
                }
            }
        }
        (m, c)
    }

    #[test]
    fn noisy_transition_matches_independent_simulation() {
        let x = SlamState::new(10.0, 5.0, 0.3);
        let u = Control { v: 2.0, psi: 0.1 };
        let noise = ControlNoise::default();
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ours: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let y = slam_transition(&x, &u, noise.sample(&mut rng), &veh());
                [y.x1, y.x2, y.x3]
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let oracle: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let v = 2.0 + 0.5 * box_muller(&mut rng);
                let p = 0.1 + PI / 60.0 * box_muller(&mut rng);
                [
                    10.0 + v * 0.25 * (0.3 + p).cos(),
                    5.0 + v * 0.25 * (0.3 + p).sin(),
                    0.3 + v * 0.25 / 1.5 * p.sin(),
                ]
            })
            .collect();
        let (m1, c1) = moments(&ours);
        let (m2, c2) = moments(&oracle);
        for a in 0..3 {
            let se = (2.0 * c2[a][a] / n as f64).sqrt();
            assert!((m1[a] - m2[a]).abs() < 5.0 * se, "mean {a}: {} vs {}", m1[a], m2[a]);
            for b in 0..3 {
                let scale = (c2[a][a] * c2[b][b]).sqrt();
                assert!(
                    (c1[a][b] - c2[a][b]).abs() < 0.1 * scale,
                    "cov {a}{b}: {} vs {}",
                    c1[a][b],
                    c2[a][b]
                );
            }
        }
    }

    fn single(k: [f64; 2]) -> SlamMap<f64> {
        SlamMap::new(vec![k]).unwrap()
    }

    #[test]
    fn range_bearing_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let zero = SensorNoise::zero();
        let east = slam_observe(&SlamState::new(0.0, 0.0, 0.0), &single([3.0, 0.0]), &[0], &zero, &mut rng)
            .unwrap();
        assert_eq!((east[0].range, east[0].bearing), (3.0, 0.0));
        let north = slam_observe(
            &SlamState::new(1.0, 1.0, PI / 2.0),
            &single([1.0, 3.0]),
            &[0],
            &zero,
            &mut rng,
        )
        .unwrap();
        assert!((north[0].range - 2.0).abs() < 1e-15);
        assert!(north[0].bearing.abs() < 1e-15);
        let behind = range_bearing(&SlamState::new(0.0, 0.0, 0.0), [-1.0, 0.0]).unwrap();
        assert!((behind.1 - PI).abs() < 1e-15);
    }

    #[test]
    fn coincident_landmark_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = slam_observe(
            &SlamState::new(2.0, 2.0, 0.0),
            &single([2.0, 2.0]),
            &[0],
            &SensorNoise::default(),
            &mut rng,
        );
        assert!(matches!(r, Err(Error::InvalidInput(m)) if m.contains("singular bearing")));
    }

    #[test]
    fn sensor_noise_covariance_matches() {
        let noise = SensorNoise::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = SlamState::new(0.0, 0.0, 0.0);
        let map = single([10.0, 0.0]);
        let n = 100_000;
        let mut acc = [[0.0; 2]; 2];
        for _ in 0..n {
            let r = slam_observe(&x, &map, &[0], &noise, &mut rng).unwrap()[0];
            let e = [r.range - 10.0, r.bearing];
            for a in 0..2 {
                for b in 0..2 {
                    acc[a][b] += e[a] * e[b] / n as f64;
                }
            }
        }
        let c = noise.covariance();
        for a in 0..2 {
            for b in 0..2 {
                let se = ((c[a][a] * c[b][b] + c[a][b] * c[a][b]) / n as f64).sqrt();
                assert!((acc[a][b] - c[a][b]).abs() < 4.0 * se, "{a}{b}: {}", acc[a][b]);
            }
        }
    }

    fn cfg() -> SlamModelConfig<f64> {
        SlamModelConfig {
            vehicle: veh(),
            control_noise: ControlNoise::default(),
            sensor_noise: SensorNoise::default(),
            jitter: 1e-4,
            start: SlamState::new(0.0, 0.0, 0.0),
        }
    }

    fn stat_of(model: &SlamBlockModel<f64>, poses: &[SlamState<f64>], obs: &[SlamObservation<f64>]) -> SufficientStatistic<f64> {
        let d = model.stat_dim();
        let mut acc = vec![0.0; d];
        let mut buf = vec![0.0; d];
        for (t, y) in obs.iter().enumerate() {
            model.statistic(&poses[t], &poses[t + 1], y, &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b / obs.len() as f64;
            }
        }
        SufficientStatistic::new(acc).unwrap()
    }

    #[test]
    fn linearized_m_step_fixed_point() {
        let truth = single([4.0, 3.0]);
        let model = SlamBlockModel::linearized(cfg(), truth.clone()).unwrap();
        let pose = SlamState::new(0.0, 0.0, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let readings = slam_observe(&pose, &truth, &[0], &SensorNoise::zero(), &mut rng).unwrap();
        let obs = SlamObservation {
            control: Control { v: 0.0, psi: 0.0 },
            readings,
        };
        let s = stat_of(&model, &[pose, pose], &[obs]);
        let est = model.m_step(&s).unwrap();
        for (a, b) in est.theta.as_slice().iter().zip(truth.to_flat()) {
            assert!((a - b).abs() <= 1e-12 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn linearized_m_step_is_weighted_least_squares() {
        let map_hat = single([12.0, -4.0]);
        let truth = single([12.6, -3.3]);
        let model = SlamBlockModel::linearized(cfg(), map_hat.clone()).unwrap();
        let noise = SensorNoise::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let poses: Vec<SlamState<f64>> = (0..41)
            .map(|k| SlamState::new(0.3 * k as f64, 0.1 * k as f64, 0.01 * k as f64))
            .collect();
        let obs: Vec<SlamObservation<f64>> = poses[1..]
            .iter()
            .map(|x| SlamObservation {
                control: Control { v: 1.0, psi: 0.0 },
                readings: slam_observe(x, &truth, &[0], &noise, &mut rng).unwrap(),
            })
            .collect();
        let est = model.m_step(&stat_of(&model, &poses, &obs)).unwrap();

        // stacked normal equations of the linearised problem
        let rinv = Matrix2::new(0.25, 0.01, 0.01, (PI / 60.0).powi(2)).try_inverse().unwrap();
        let p = map_hat.landmark(0);
        let n = obs.len();
        let mut h = DMatrix::<f64>::zeros(2 * n, 2);
        let mut z = DVector::<f64>::zeros(2 * n);
        let mut w = DMatrix::<f64>::zeros(2 * n, 2 * n);
        for (k, (x, y)) in poses[1..].iter().zip(&obs).enumerate() {
            let (dx, dy) = (p[0] - x.x1, p[1] - x.x2);
            let r = (dx * dx + dy * dy).sqrt();
            let jac = [[dx / r, dy / r], [-dy / (r * r), dx / (r * r)]];
            let mut bres = y.readings[0].bearing - (dy.atan2(dx) - x.x3);
            while bres > PI {
                bres -= 2.0 * PI;
            }
            while bres <= -PI {
                bres += 2.0 * PI;
            }
            let rres = y.readings[0].range - r;
            for a in 0..2 {
                h[(2 * k + a, 0)] = jac[a][0];
                h[(2 * k + a, 1)] = jac[a][1];
                for b in 0..2 {
                    w[(2 * k + a, 2 * k + b)] = rinv[(a, b)];
                }
            }
            z[2 * k] = rres + jac[0][0] * p[0] + jac[0][1] * p[1];
            z[2 * k + 1] = bres + jac[1][0] * p[0] + jac[1][1] * p[1];
        }
        let lhs = h.transpose() * &w * &h;
        let rhs = h.transpose() * &w * &z;
        let wls = lhs.lu().solve(&rhs).unwrap();
        for k in 0..2 {
            assert!(
                (est.theta.as_slice()[k] - wls[k]).abs() < 1e-10,
                "{} vs {}",
                est.theta.as_slice()[k],
                wls[k]
            );
        }
    }

    #[test]
    fn unobserved_landmark_is_unchanged() {
        let map_hat = SlamMap::new(vec![[1.0, 1.0], [30.0, -7.5]]).unwrap();
        let model = SlamBlockModel::linearized(cfg(), map_hat.clone()).unwrap();
        let pose = SlamState::new(0.0, 0.0, 0.0);
        let obs = SlamObservation {
            control: Control { v: 0.0, psi: 0.0 },
            readings: vec![Reading {
                landmark: 0,
                range: 1.5,
                bearing: 0.7,
            }],
        };
        let est = model.m_step(&stat_of(&model, &[pose, pose], &[obs])).unwrap();
        assert_eq!(&est.theta.as_slice()[2..], &[30.0, -7.5]);
        assert_ne!(&est.theta.as_slice()[..2], &[1.0, 1.0]);
    }

    #[test]
    fn linearized_model_is_exponential_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let map_hat = SlamMap::random(4, 45.0, &mut rng).unwrap();
            let model = SlamBlockModel::linearized(cfg(), map_hat).unwrap();
            let theta = model.parameter(&SlamMap::random(4, 45.0, &mut rng).unwrap()).unwrap();
            let x = SlamState::new(45.0 * rng.random::<f64>(), 45.0 * rng.random::<f64>(), 3.0 * rng.random::<f64>());
            let u = Control { v: 2.0, psi: 0.2 * rng.random::<f64>() };
            let x_next = model.sample_transition(&theta, &x, &SlamObservation { control: u, readings: vec![] }, &mut rng);
            let readings = (0..4)
                .map(|i| Reading {
                    landmark: i,
                    range: 30.0 * rng.random::<f64>(),
                    bearing: 6.0 * rng.random::<f64>() - 3.0,
                })
                .collect();
            let y = SlamObservation { control: u, readings };
            let d = exponential_family_discrepancy(&model, &theta, &x, &x_next, &y).unwrap();
            assert!(d < 1e-10, "discrepancy {d}");
        }
    }

    #[test]
    fn deterministic_transition_density() {
        let mut c = cfg();
        c.control_noise = ControlNoise::zero();
        c.jitter = 0.0;
        let model = SlamBlockModel::linearized(c, single([5.0, 5.0])).unwrap();
        let theta = model.parameter(&single([5.0, 5.0])).unwrap();
        let x = SlamState::new(0.0, 0.0, 0.0);
        let y = SlamObservation {
            control: Control { v: 2.0, psi: 0.3 },
            readings: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let next = model.sample_transition(&theta, &x, &y, &mut rng);
        assert_eq!(model.log_transition(&theta, &x, &next, &y), 0.0);
        let off = SlamState::new(next.x1 + 1e-9, next.x2, next.x3);
        assert_eq!(model.log_transition(&theta, &x, &off, &y), f64::NEG_INFINITY);
        c.control_noise = ControlNoise::default();
        assert!(SlamBlockModel::linearized(c, single([5.0, 5.0])).is_err());
    }

    #[test]
    fn controller_stays_in_arena() {
        let world = SlamWorld {
            map: SlamMap::random(15, 45.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap(),
            vehicle: veh(),
            control_noise: ControlNoise::default(),
            sensor_noise: SensorNoise::default(),
            sensing_radius: 15.0,
            controller: LoopController::square(45.0, 7.5, 2.0),
            start: LoopController::square(45.0, 7.5, 2.0).start_pose(),
        };
        let sim = SlamSimulator::new(world, ChaCha8Rng::seed_from_u64(2));
        let mut seen = 0;
        for step in sim.take(2000) {
            let (x, y) = step.unwrap();
            assert!(x.x1 > -5.0 && x.x1 < 50.0 && x.x2 > -5.0 && x.x2 < 50.0, "{x:?}");
            seen += y.readings.len();
        }
        assert!(seen > 2000);
    }
}
