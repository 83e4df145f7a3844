//! Particle block statistics against exact smoothers.

use pboem_core::models::{simulate_path, FiniteHmm, LgssmModel, SvModel, SvParams};
use pboem_core::oracles::{brute_force_statistic, exact_statistic_lgssm};
use pboem_core::rng::{stream, Purpose};
use pboem_core::{init_particles, run_block, Bootstrap, BlockSize, Parameter, StateSpaceModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn particle_statistic<M: StateSpaceModel<f64>>(
    model: &M,
    theta: &Parameter<f64>,
    obs: &[M::Obs],
    n: usize,
    rep: u64,
) -> Vec<f64> {
    let mut rng = stream(99, rep, Purpose::Filter, 1);
    let init = init_particles(model, theta, n, &mut rng).unwrap();
    let block = BlockSize { n: 1, tau: obs.len(), elapsed: obs.len(), particles: n };
    let (s, _) = run_block(model, theta, &Bootstrap, init, obs.iter(), &block, &mut rng, |_| {}).unwrap();
    s.into_vec()
}

fn mean_gap(runs: &[Vec<f64>], exact: &[f64]) -> Vec<f64> {
    let r = runs.len() as f64;
    (0..exact.len())
        .map(|i| runs.iter().map(|v| v[i]).sum::<f64>() / r - exact[i])
        .collect()
}

/// `bias` is an allowance per unit `1 + |s|`: particle smoothers carry an
/// `O(1/N)` bias on top of Monte Carlo error.
fn within_three_se(runs: &[Vec<f64>], exact: &[f64], bias: f64) {
    let r = runs.len() as f64;
    for i in 0..exact.len() {
        let mean = runs.iter().map(|v| v[i]).sum::<f64>() / r;
        let var = runs.iter().map(|v| (v[i] - mean).powi(2)).sum::<f64>() / (r - 1.0);
        let se = (var / r).sqrt();
        assert!(
            (mean - exact[i]).abs() <= 3.0 * se + bias * (1.0 + exact[i].abs()) + 1e-12,
            "coord {i}: particle mean {mean} vs exact {} (se {se})",
            exact[i]
        );
    }
}

#[test]
fn lgssm_block_statistic_is_unbiased_to_monte_carlo_error() {
    let m = LgssmModel::<f64>::new(0.0, 1.0).unwrap();
    let th = m.parameter(0.8, 0.4, 0.3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (_, ys) = simulate_path(&m, &th, 100, &mut rng);
    let exact = exact_statistic_lgssm(&m, &th, &ys).unwrap();
    let runs: Vec<Vec<f64>> = (0..20).map(|r| particle_statistic(&m, &th, &ys, 300, r)).collect();
    within_three_se(&runs, exact.as_slice(), 1.0 / 300.0);
}

#[test]
fn lgssm_bias_shrinks_with_particles() {
    let m = LgssmModel::<f64>::new(0.0, 1.0).unwrap();
    let th = m.parameter(0.8, 0.4, 0.3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (_, ys) = simulate_path(&m, &th, 60, &mut rng);
    let exact = exact_statistic_lgssm(&m, &th, &ys).unwrap();
    let size = |n: usize| {
        let runs: Vec<Vec<f64>> = (0..30).map(|r| particle_statistic(&m, &th, &ys, n, r)).collect();
        mean_gap(&runs, exact.as_slice()).iter().map(|g| g.abs()).sum::<f64>()
    };
    let (coarse, fine) = (size(50), size(400));
    assert!(fine < coarse / 3.0, "bias {coarse} at N=50, {fine} at N=400");
}

#[test]
fn finite_block_statistic_matches_enumeration() {
    let m = FiniteHmm::<f64>::new(2, 2, vec![0.5, 0.5]).unwrap();
    let th = m
        .parameter(&[vec![0.9, 0.1], vec![0.2, 0.8]], &[vec![0.85, 0.15], vec![0.2, 0.8]])
        .unwrap();
    let ys = vec![0, 1, 1, 0];
    let exact = brute_force_statistic(&m, &th, &ys).unwrap();
    let runs: Vec<Vec<f64>> = (0..30).map(|r| particle_statistic(&m, &th, &ys, 2000, r)).collect();
    within_three_se(&runs, exact.as_slice(), 0.0);
}

#[test]
fn sv_block_statistic_is_reproducible() {
    let m = SvModel::<f64>::new();
    let th = m.parameter(SvParams::new(0.95, 0.1, 0.6).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (_, ys) = simulate_path(&m, &th, 150, &mut rng);
    let a = particle_statistic(&m, &th, &ys, 200, 3);
    let b = particle_statistic(&m, &th, &ys, 200, 3);
    let c = particle_statistic(&m, &th, &ys, 200, 4);
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_ne!(a, c);
}

