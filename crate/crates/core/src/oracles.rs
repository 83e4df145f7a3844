//! Exact block statistics for models where smoothing is tractable.
//!
//! These compute `(1/τ) Σ_t E_θ[S(X_{t-1}, X_t, Y_t) | Y_{1:τ}]` with `X_0 ~ χ`
//! exactly: by forward–backward recursions for finite state spaces, by path
//! enumeration for tiny instances, and by Kalman/RTS smoothing for the
//! scalar linear-Gaussian model. They are the reference the particle
//! smoother is tested against and drive exact-E-step runs of the block EM.

use crate::error::{Error, Result};
use crate::model::{Parameter, StateSpaceModel, SufficientStatistic};
use crate::models::LgssmModel;
use crate::scalar::{log_sum_exp, Real};

/// Models whose state space is `{0, …, K-1}`.
pub trait FiniteStateModel<F: Real>: StateSpaceModel<F, State = usize> {
    fn num_states(&self) -> usize;

    /// `log χ(x)`.
    fn log_initial(&self, theta: &Parameter<F>, x: usize) -> F;
}

/// Largest number of paths [`brute_force_statistic`] will enumerate.
pub const BRUTE_FORCE_MAX_PATHS: usize = 1_000_000;

/// Exact smoothed block statistic on a finite state space via normalised
/// forward–backward pairwise marginals. Returns the zero vector for an empty
/// block.
pub fn exact_statistic_finite<F, M>(
    model: &M,
    theta: &Parameter<F>,
    observations: &[M::Obs],
) -> Result<SufficientStatistic<F>>
where
    F: Real,
    M: FiniteStateModel<F>,
{
    let k = model.num_states();
    let d = model.stat_dim();
    let tau = observations.len();
    if tau == 0 {
        return Ok(SufficientStatistic::zeros(d));
    }
    // local[t][i*k + j] = m(i, j) g(j, y_t), t = 1..τ (index t-1)
    let local: Vec<Vec<F>> = observations
        .iter()
        .map(|y| {
            let mut v = Vec::with_capacity(k * k);
            for i in 0..k {
                for j in 0..k {
                    v.push(
                        (model.log_transition(theta, &i, &j, y) + model.log_emission(theta, &j, y))
                            .exp(),
                    );
                }
            }
            v
        })
        .collect();

    let mut alpha = vec![vec![F::zero(); k]; tau + 1];
    for (i, a) in alpha[0].iter_mut().enumerate() {
        *a = model.log_initial(theta, i).exp();
    }
    normalize(&mut alpha[0], 0)?;
    for t in 1..=tau {
        let (head, tail) = alpha.split_at_mut(t);
        let prev = &head[t - 1];
        let cur = &mut tail[0];
        for j in 0..k {
            cur[j] = (0..k).map(|i| prev[i] * local[t - 1][i * k + j]).sum();
        }
        normalize(cur, t)?;
    }
    let mut beta = vec![vec![F::one(); k]; tau + 1];
    for t in (1..=tau).rev() {
        let (head, tail) = beta.split_at_mut(t);
        let next = &tail[0];
        let cur = &mut head[t - 1];
        for i in 0..k {
            cur[i] = (0..k).map(|j| local[t - 1][i * k + j] * next[j]).sum();
        }
        normalize(cur, t - 1)?;
    }

    let mut acc = vec![F::zero(); d];
    let mut sbuf = vec![F::zero(); d];
    let mut pair = vec![F::zero(); k * k];
    let inv_tau = F::one() / F::from_usize_lossy(tau);
    for t in 1..=tau {
        for i in 0..k {
            for j in 0..k {
                pair[i * k + j] = alpha[t - 1][i] * local[t - 1][i * k + j] * beta[t][j];
            }
        }
        normalize(&mut pair, t)?;
        let y = &observations[t - 1];
        for i in 0..k {
            for j in 0..k {
                let p = pair[i * k + j];
                if p.is_zero() {
                    continue;
                }
                model.statistic(&i, &j, y, &mut sbuf);
                for (a, s) in acc.iter_mut().zip(&sbuf) {
                    *a += inv_tau * p * *s;
                }
            }
        }
    }
    SufficientStatistic::new(acc)
}

fn normalize<F: Real>(v: &mut [F], t: usize) -> Result<()> {
    let total: F = v.iter().copied().sum();
    if !(total > F::zero()) || !total.is_finite() {
        return Err(Error::Numerical(format!(
            "observation at step {t} has zero likelihood"
        )));
    }
    for x in v.iter_mut() {
        *x /= total;
    }
    Ok(())
}

/// Exact smoothed block statistic by enumerating all `K^(τ+1)` paths.
pub fn brute_force_statistic<F, M>(
    model: &M,
    theta: &Parameter<F>,
    observations: &[M::Obs],
) -> Result<SufficientStatistic<F>>
where
    F: Real,
    M: FiniteStateModel<F>,
{
    let k = model.num_states();
    let d = model.stat_dim();
    let tau = observations.len();
    if tau == 0 {
        return Ok(SufficientStatistic::zeros(d));
    }
    let paths = (k as u128).checked_pow(tau as u32 + 1).unwrap_or(u128::MAX);
    if paths > BRUTE_FORCE_MAX_PATHS as u128 {
        return Err(Error::SizeGuard(format!(
            "{k}^{} paths exceed the enumeration limit of {BRUTE_FORCE_MAX_PATHS}",
            tau + 1
        )));
    }
    let paths = paths as usize;
    let mut log_w = Vec::with_capacity(paths);
    let mut sums = Vec::with_capacity(paths);
    let mut path = vec![0usize; tau + 1];
    let mut sbuf = vec![F::zero(); d];
    for code in 0..paths {
        let mut c = code;
        for x in path.iter_mut() {
            *x = c % k;
            c /= k;
        }
        let mut lw = model.log_initial(theta, path[0]);
        let mut s = vec![F::zero(); d];
        for t in 1..=tau {
            let y = &observations[t - 1];
            lw += model.log_transition(theta, &path[t - 1], &path[t], y)
                + model.log_emission(theta, &path[t], y);
            model.statistic(&path[t - 1], &path[t], y, &mut sbuf);
            for (a, b) in s.iter_mut().zip(&sbuf) {
                *a += *b;
            }
        }
        log_w.push(lw);
        sums.push(s);
    }
    let lse = log_sum_exp(&log_w);
    if lse == F::neg_infinity() {
        return Err(Error::Numerical("observations have zero likelihood".into()));
    }
    let inv_tau = F::one() / F::from_usize_lossy(tau);
    let mut acc = vec![F::zero(); d];
    for (lw, s) in log_w.iter().zip(&sums) {
        let w = (*lw - lse).exp();
        if w.is_zero() {
            continue;
        }
        for (a, v) in acc.iter_mut().zip(s) {
            *a += w * *v * inv_tau;
        }
    }
    SufficientStatistic::new(acc)
}

/// Smoothed first and second moments of a scalar linear-Gaussian model.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSmoothing<F> {
    /// `E[X_t | Y_{1:τ}]`, `t = 0..=τ`.
    pub mean: Vec<F>,
    /// `Var[X_t | Y_{1:τ}]`.
    pub var: Vec<F>,
    /// `Cov[X_{t-1}, X_t | Y_{1:τ}]` at index `t - 1`, `t = 1..=τ`.
    pub lag_one_cov: Vec<F>,
}

/// Kalman filter followed by the Rauch–Tung–Striebel backward pass.
pub fn lgssm_smoother<F: Real>(
    model: &LgssmModel<F>,
    theta: &Parameter<F>,
    observations: &[F],
) -> Result<GaussianSmoothing<F>> {
    let (phi, s2, g2) = LgssmModel::coeffs(theta);
    let tau = observations.len();
    let mut mf = Vec::with_capacity(tau + 1);
    let mut pf = Vec::with_capacity(tau + 1);
    let mut mp = vec![F::zero(); tau + 1];
    let mut pp = vec![F::zero(); tau + 1];
    mf.push(model.init_mean());
    pf.push(model.init_var());
    let scale_tol = F::lit(1e-9);
    for (t, &y) in observations.iter().enumerate().map(|(i, y)| (i + 1, y)) {
        let m_pred = phi * mf[t - 1];
        let p_pred = phi * phi * pf[t - 1] + s2;
        mp[t] = m_pred;
        pp[t] = p_pred;
        let innov = p_pred + g2;
        let resid = y - m_pred;
        if !(innov > F::zero()) {
            if resid.abs() > scale_tol * F::one().max(y.abs()) {
                return Err(Error::Numerical(format!(
                    "innovation variance {innov} at step {t} with residual {resid}"
                )));
            }
            mf.push(m_pred);
            pf.push(F::zero());
            continue;
        }
        let gain = p_pred / innov;
        mf.push(m_pred + gain * resid);
        pf.push(p_pred * g2 / innov);
    }
    let mut ms = mf.clone();
    let mut ps = pf.clone();
    let mut cross = vec![F::zero(); tau];
    for t in (0..tau).rev() {
        let j = if pp[t + 1] > F::zero() {
            pf[t] * phi / pp[t + 1]
        } else {
            F::zero()
        };
        ms[t] = mf[t] + j * (ms[t + 1] - mp[t + 1]);
        ps[t] = pf[t] + j * j * (ps[t + 1] - pp[t + 1]);
        cross[t] = j * ps[t + 1];
    }
    Ok(GaussianSmoothing {
        mean: ms,
        var: ps,
        lag_one_cov: cross,
    })
}

/// Exact smoothed block statistic of the scalar linear-Gaussian model.
pub fn exact_statistic_lgssm<F: Real>(
    model: &LgssmModel<F>,
    theta: &Parameter<F>,
    observations: &[F],
) -> Result<SufficientStatistic<F>> {
    let tau = observations.len();
    if tau == 0 {
        return Ok(SufficientStatistic::zeros(5));
    }
    let sm = lgssm_smoother(model, theta, observations)?;
    let mut acc = [F::zero(); 5];
    for t in 1..=tau {
        let (m0, m1) = (sm.mean[t - 1], sm.mean[t]);
        let y = observations[t - 1];
        acc[0] += m0 * m0 + sm.var[t - 1];
        acc[1] += m0 * m1 + sm.lag_one_cov[t - 1];
        acc[2] += m1 * m1 + sm.var[t];
        acc[3] += y * y;
        acc[4] += y * m1;
    }
    let inv = F::one() / F::from_usize_lossy(tau);
    SufficientStatistic::new(acc.iter().map(|a| *a * inv).collect())
}

/// Batch EM on a fixed data set: iterates `θ ← θ̄(exact(θ))` until the
/// parameter moves less than `tol` (max norm) or `max_iter` is reached.
/// Returns the final parameter and the number of iterations used.
pub fn batch_em<F, M, E>(
    model: &M,
    theta0: Parameter<F>,
    mut exact: E,
    tol: F,
    max_iter: usize,
) -> Result<(Parameter<F>, usize)>
where
    F: Real,
    M: StateSpaceModel<F>,
    E: FnMut(&Parameter<F>) -> Result<SufficientStatistic<F>>,
{
    let mut theta = theta0;
    for it in 1..=max_iter {
        let s = exact(&theta)?;
        let next = model.m_step(&s)?.theta;
        let step = next
            .as_slice()
            .iter()
            .zip(theta.as_slice())
            .map(|(a, b)| (*a - *b).abs())
            .fold(F::zero(), F::max);
        theta = next;
        if step < tol {
            return Ok((theta, it));
        }
    }
    Ok((theta, max_iter))
}
