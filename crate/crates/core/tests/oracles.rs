use nalgebra::{DMatrix, DVector};
use pboem_core::model::MStep;
use pboem_core::models::{simulate_path, FiniteHmm, LgssmModel};
use pboem_core::oracles::{
    brute_force_statistic, exact_statistic_finite, exact_statistic_lgssm, lgssm_smoother,
    FiniteStateModel,
};
use pboem_core::{Error, Parameter, ParameterBox, Result, StateSpaceModel, SufficientStatistic};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let r: Vec<f64> = (0..cols).map(|_| 0.05 + rng.random::<f64>()).collect();
            let s: f64 = r.iter().sum();
            r.iter().map(|v| v / s).collect()
        })
        .collect()
}

fn random_hmm(rng: &mut ChaCha8Rng, k: usize, m: usize) -> (FiniteHmm<f64>, Parameter<f64>) {
    let init = random_rows(rng, 1, k).remove(0);
    let model = FiniteHmm::new(k, m, init).unwrap();
    let th = model
        .parameter(&random_rows(rng, k, k), &random_rows(rng, k, m))
        .unwrap();
    (model, th)
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "coord {i}: {x} vs {y}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn forward_backward_equals_enumeration(seed in any::<u64>(), k in 2usize..4, tau in 0usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, th) = random_hmm(&mut rng, k, 3);
        let (_, ys) = simulate_path(&m, &th, tau, &mut rng);
        let a = exact_statistic_finite(&m, &th, &ys).unwrap();
        let b = brute_force_statistic(&m, &th, &ys).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn two_states_four_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (m, th) = random_hmm(&mut rng, 2, 2);
    let ys = vec![1, 0, 0, 1];
    let a = exact_statistic_finite(&m, &th, &ys).unwrap();
    let b = brute_force_statistic(&m, &th, &ys).unwrap();
    assert_close(a.as_slice(), b.as_slice(), 1e-12);
}

#[test]
fn empty_block_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (m, th) = random_hmm(&mut rng, 2, 2);
    assert!(brute_force_statistic(&m, &th, &[]).unwrap().as_slice().iter().all(|v| *v == 0.0));
    assert!(exact_statistic_finite(&m, &th, &[]).unwrap().as_slice().iter().all(|v| *v == 0.0));
}

#[test]
fn enumeration_size_guard() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (m, th) = random_hmm(&mut rng, 4, 2);
    // 4^10 = 1048576 paths
    let ys = vec![0; 9];
    assert!(matches!(brute_force_statistic(&m, &th, &ys), Err(Error::SizeGuard(_))));
    assert!(brute_force_statistic(&m, &th, &ys[..8]).is_ok());
}

#[test]
fn uniform_model_averages_over_all_pairs() {
    let m = FiniteHmm::new(3, 2, vec![1.0 / 3.0; 3]).unwrap();
    let th = m.parameter(&vec![vec![1.0 / 3.0; 3]; 3], &vec![vec![0.5; 2]; 3]).unwrap();
    let ys = vec![0, 1, 1, 0, 1];
    let s = exact_statistic_finite(&m, &th, &ys).unwrap();
    let mut want = vec![0.0; m.stat_dim()];
    let mut buf = vec![0.0; m.stat_dim()];
    for y in &ys {
        for x in 0..3 {
            for xn in 0..3 {
                m.statistic(&x, &xn, y, &mut buf);
                for (w, b) in want.iter_mut().zip(&buf) {
                    *w += b / (9.0 * ys.len() as f64);
                }
            }
        }
    }
    assert_close(s.as_slice(), &want, 1e-14);
}

#[test]
fn single_step_posterior_table() {
    let m = FiniteHmm::new(2, 2, vec![0.3, 0.7]).unwrap();
    let a = [[0.6, 0.4], [0.1, 0.9]];
    let b = [[0.8, 0.2], [0.35, 0.65]];
    let th = m
        .parameter(&[a[0].to_vec(), a[1].to_vec()], &[b[0].to_vec(), b[1].to_vec()])
        .unwrap();
    let y = 1;
    let pi = [0.3, 0.7];
    let mut joint = [[0.0f64; 2]; 2];
    let mut z = 0.0f64;
    for i in 0..2 {
        for j in 0..2 {
            joint[i][j] = pi[i] * a[i][j] * b[j][y];
            z += joint[i][j];
        }
    }
    let s = exact_statistic_finite(&m, &th, &[y]).unwrap();
    let s = s.as_slice();
    for i in 0..2 {
        for j in 0..2 {
            assert!((s[2 * i + j] - joint[i][j] / z).abs() < 1e-15);
        }
    }
    // emission block: posterior of X_1 on symbol y
    assert!((s[4 + y] - (joint[0][0] + joint[1][0]) / z).abs() < 1e-15);
    assert!((s[6 + y] - (joint[0][1] + joint[1][1]) / z).abs() < 1e-15);
}

#[test]
fn forced_chain_follows_its_path() {
    let m = FiniteHmm::new(3, 2, vec![1.0, 0.0, 0.0]).unwrap();
    let th = m
        .parameter(
            &[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]],
            &[vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5]],
        )
        .unwrap();
    let ys = vec![0, 1, 1, 0];
    let s = brute_force_statistic(&m, &th, &ys).unwrap();
    let path = [0, 1, 2, 0, 1];
    let mut want = vec![0.0; m.stat_dim()];
    let mut buf = vec![0.0; m.stat_dim()];
    for t in 0..4 {
        m.statistic(&path[t], &path[t + 1], &ys[t], &mut buf);
        for (w, b) in want.iter_mut().zip(&buf) {
            *w += b / 4.0;
        }
    }
    assert_close(s.as_slice(), &want, 1e-15);
    assert_close(exact_statistic_finite(&m, &th, &ys).unwrap().as_slice(), &want, 1e-15);
}

// Emission densities multiplied by a positive factor depending on y only.
struct Scaled {
    inner: FiniteHmm<f64>,
    log_scale: Vec<f64>,
}

impl StateSpaceModel<f64> for Scaled {
    type State = usize;
    type Obs = usize;
    fn stat_dim(&self) -> usize {
        self.inner.stat_dim()
    }
    fn parameter_box(&self) -> &ParameterBox<f64> {
        self.inner.parameter_box()
    }
    fn sample_initial<R: Rng + ?Sized>(&self, th: &Parameter<f64>, rng: &mut R) -> usize {
        self.inner.sample_initial(th, rng)
    }
    fn sample_transition<R: Rng + ?Sized>(&self, th: &Parameter<f64>, x: &usize, y: &usize, rng: &mut R) -> usize {
        self.inner.sample_transition(th, x, y, rng)
    }
    fn log_transition(&self, th: &Parameter<f64>, x: &usize, xn: &usize, y: &usize) -> f64 {
        self.inner.log_transition(th, x, xn, y)
    }
    fn log_emission(&self, th: &Parameter<f64>, x: &usize, y: &usize) -> f64 {
        self.inner.log_emission(th, x, y) + self.log_scale[*y]
    }
    fn statistic(&self, x: &usize, xn: &usize, y: &usize, out: &mut [f64]) {
        self.inner.statistic(x, xn, y, out)
    }
    fn check_statistic(&self, s: &[f64]) -> Result<()> {
        self.inner.check_statistic(s)
    }
    fn m_step(&self, s: &SufficientStatistic<f64>) -> Result<MStep<f64>> {
        self.inner.m_step(s)
    }
    fn project_statistic(&self, s: &SufficientStatistic<f64>) -> SufficientStatistic<f64> {
        self.inner.project_statistic(s)
    }
}

impl FiniteStateModel<f64> for Scaled {
    fn num_states(&self) -> usize {
        self.inner.num_states()
    }
    fn log_initial(&self, th: &Parameter<f64>, x: usize) -> f64 {
        self.inner.log_initial(th, x)
    }
}

#[test]
fn invariant_to_emission_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let (m, th) = random_hmm(&mut rng, 3, 4);
        let (_, ys) = simulate_path(&m, &th, 300, &mut rng);
        let base = exact_statistic_finite(&m, &th, &ys).unwrap();
        let scaled = Scaled {
            inner: m.clone(),
            log_scale: (0..4).map(|_| 40.0 * (rng.random::<f64>() - 0.5)).collect(),
        };
        let s = exact_statistic_finite(&scaled, &th, &ys).unwrap();
        assert_close(s.as_slice(), base.as_slice(), 1e-12);
    }
}

#[test]
fn long_blocks_do_not_underflow() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (m, th) = random_hmm(&mut rng, 4, 3);
    let (_, ys) = simulate_path(&m, &th, 10_000, &mut rng);
    let s = exact_statistic_finite(&m, &th, &ys).unwrap();
    let trans: f64 = s.as_slice()[..16].iter().sum();
    assert!((trans - 1.0).abs() < 1e-10);
}

/// Smoothed moments by conditioning the joint normal of `(X_0..X_τ, Y_1..Y_τ)`.
fn dense_moments(m0: f64, v0: f64, phi: f64, s2: f64, g2: f64, ys: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let tau = ys.len();
    let n = tau + 1;
    let mut var = vec![v0];
    for t in 1..n {
        var.push(phi * phi * var[t - 1] + s2);
    }
    let cov_x = DMatrix::from_fn(n, n, |s, t| {
        let (lo, hi) = (s.min(t), s.max(t));
        phi.powi((hi - lo) as i32) * var[lo]
    });
    let mean_x = DVector::from_fn(n, |t, _| phi.powi(t as i32) * m0);
    let cov_xy = DMatrix::from_fn(n, tau, |s, t| cov_x[(s, t + 1)]);
    let cov_yy = DMatrix::from_fn(tau, tau, |s, t| cov_x[(s + 1, t + 1)] + if s == t { g2 } else { 0.0 });
    let resid = DVector::from_fn(tau, |t, _| ys[t] - mean_x[t + 1]);
    let chol = cov_yy.cholesky().expect("positive definite");
    let mean = &mean_x + &cov_xy * chol.solve(&resid);
    let cov = &cov_x - &cov_xy * chol.solve(&cov_xy.transpose());
    (mean, cov)
}

#[test]
fn kalman_statistic_matches_dense_conditioning() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10 {
        let phi = 1.6 * rng.random::<f64>() - 0.8;
        let s2 = 0.05 + rng.random::<f64>();
        let g2 = 0.05 + rng.random::<f64>();
        let m = LgssmModel::new(0.4, 0.7).unwrap();
        let th = m.parameter(phi, s2, g2).unwrap();
        let (_, ys) = simulate_path(&m, &th, 50, &mut rng);
        let (mean, cov) = dense_moments(0.4, 0.7, phi, s2, g2, &ys);
        let mut want = [0.0; 5];
        for t in 1..=50 {
            let y = ys[t - 1];
            want[0] += mean[t - 1] * mean[t - 1] + cov[(t - 1, t - 1)];
            want[1] += mean[t - 1] * mean[t] + cov[(t - 1, t)];
            want[2] += mean[t] * mean[t] + cov[(t, t)];
            want[3] += y * y;
            want[4] += y * mean[t];
        }
        let want: Vec<f64> = want.iter().map(|v| v / 50.0).collect();
        let got = exact_statistic_lgssm(&m, &th, &ys).unwrap();
        assert_close(got.as_slice(), &want, 1e-8);
    }
}

#[test]
fn noiseless_model_reads_states_off_observations() {
    let m = LgssmModel::with_variance_floor(1.0, 0.0, 0.0).unwrap();
    let th = m.parameter(0.9, 0.0, 0.0).unwrap();
    let ys: Vec<f64> = (1..=6).map(|t| 0.9f64.powi(t)).collect();
    let s = exact_statistic_lgssm(&m, &th, &ys).unwrap();
    let xs: Vec<f64> = (0..=6).map(|t| 0.9f64.powi(t)).collect();
    let mut want = [0.0; 5];
    for t in 1..=6 {
        want[0] += xs[t - 1] * xs[t - 1] / 6.0;
        want[1] += xs[t - 1] * xs[t] / 6.0;
        want[2] += xs[t] * xs[t] / 6.0;
        want[3] += ys[t - 1] * ys[t - 1] / 6.0;
        want[4] += ys[t - 1] * xs[t] / 6.0;
    }
    assert_close(s.as_slice(), &want, 1e-14);
    let bad: Vec<f64> = ys.iter().map(|y| y + 1.0).collect();
    assert!(matches!(exact_statistic_lgssm(&m, &th, &bad), Err(Error::Numerical(_))));
}

#[test]
fn white_noise_state_cross_moment_factorises() {
    let m = LgssmModel::<f64>::new(0.0, 1.0).unwrap();
    let th = m.parameter(0.0, 1.3, 0.6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (_, ys) = simulate_path(&m, &th, 30, &mut rng);
    let sm = lgssm_smoother(&m, &th, &ys).unwrap();
    for t in 1..=30 {
        assert!(sm.lag_one_cov[t - 1].abs() < 1e-15);
        // independent posteriors: X_t | Y_t only
        let want = 1.3 / (1.3 + 0.6) * ys[t - 1];
        assert!((sm.mean[t] - want).abs() < 1e-12);
    }
    let s = exact_statistic_lgssm(&m, &th, &ys).unwrap();
    let cross: f64 = (1..=30).map(|t| sm.mean[t - 1] * sm.mean[t]).sum::<f64>() / 30.0;
    assert!((s.as_slice()[1] - cross).abs() < 1e-14);
}
