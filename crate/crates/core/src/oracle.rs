//! Brute-force references for tiny instances. Everything here is built from
//! the one-step matrices `Q_i` and explicit sums over paths, never from the
//! closed forms used by the main code.

use thiserror::Error;

use crate::denoiser::{Denoiser, DenoiserError, DenoiserInput};
use crate::diffusion::{cumulative_matrix_product, step_matrix, DiffusionError, NoiseSchedule, TransitionMatrix};

/// Largest number of trajectories an enumeration will visit.
pub const MAX_TRAJECTORIES: usize = 1 << 22;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("instance too large: {0} trajectories")]
    TooLarge(usize),
    #[error("clean token {0} is the mask state")]
    MaskInClean(u32),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
}

fn step_matrices(schedule: &NoiseSchedule, m: usize) -> Result<Vec<TransitionMatrix>, OracleError> {
    (1..=schedule.steps()).map(|i| Ok(step_matrix(schedule.beta(i), m)?)).collect()
}

/// Decode `code` into `len` digits in base `base`.
fn digits(mut code: usize, base: usize, len: usize) -> Vec<usize> {
    (0..len)
        .map(|_| {
            let d = code % base;
            code /= base;
            d
        })
        .collect()
}

/// `q(x_j | x_i = xt, x_0 = x0)` by summing the probability of every path
/// `x_1 … x_i` of the forward chain that ends in `xt`. `None` when `xt` is
/// unreachable from `x0`.
pub fn posterior_by_paths(
    schedule: &NoiseSchedule,
    m: usize,
    x0: u32,
    xt: u32,
    i: usize,
    j: usize,
) -> Result<Option<Vec<f64>>, OracleError> {
    let steps = step_matrices(schedule, m)?;
    let states = m + 1;
    let count = states.checked_pow(i as u32).filter(|&c| c <= MAX_TRAJECTORIES).ok_or(OracleError::TooLarge(usize::MAX))?;
    let mut weight = vec![0.0; states];
    for code in 0..count {
        let path = digits(code, states, i);
        if i > 0 && path[i - 1] != xt as usize {
            continue;
        }
        let mut p = 1.0;
        let mut prev = x0 as usize;
        for (k, &next) in path.iter().enumerate() {
            p *= steps[k].get(prev, next);
            prev = next;
        }
        let at_j = if j == 0 { x0 as usize } else { path[j - 1] };
        weight[at_j] += p;
    }
    let total: f64 = weight.iter().sum();
    if total == 0.0 {
        return Ok(None);
    }
    Ok(Some(weight.iter().map(|w| w / total).collect()))
}

/// Plug-in reverse step `p_θ(x_{i−1} | x_i)` per position, as the mixture
/// `p(z) ∝ Σ_k x̂_k [Q_1⋯Q_{i−1}]_{k z} [Q_i]_{z x_i}`.
pub fn plugin_reverse(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    xi: &[u32],
    i: usize,
) -> Result<Vec<Vec<f64>>, OracleError> {
    let m = denoiser.num_tokens();
    let before = cumulative_matrix_product(schedule, i - 1, m)?;
    let step = step_matrix(schedule.beta(i), m)?;
    let input = DenoiserInput::new(1, xi.len(), xi.to_vec(), i as f64 / schedule.steps() as f64);
    let out = denoiser.denoise(&input)?;
    let mut result = Vec::with_capacity(xi.len());
    for (pos, &x) in xi.iter().enumerate() {
        let xhat = &out.position(pos)[..m];
        let mut p: Vec<f64> = (0..=m)
            .map(|z| xhat.iter().enumerate().map(|(k, w)| w * before.get(k, z)).sum::<f64>() * step.get(z, x as usize))
            .collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        result.push(p);
    }
    Ok(result)
}

/// Every forward trajectory `x_1 … x_T` of a row with its probability
/// under `q(· | x_0)`. Zero-probability trajectories are skipped.
fn trajectories(schedule: &NoiseSchedule, m: usize, x0: &[u32]) -> Result<Vec<(Vec<Vec<u32>>, f64)>, OracleError> {
    if let Some(&bad) = x0.iter().find(|&&x| x as usize >= m) {
        return Err(OracleError::MaskInClean(bad));
    }
    let t = schedule.steps();
    let len = x0.len();
    let states = m + 1;
    let count = states
        .checked_pow((t * len) as u32)
        .filter(|&c| c <= MAX_TRAJECTORIES)
        .ok_or(OracleError::TooLarge(usize::MAX))?;
    let steps = step_matrices(schedule, m)?;
    let mut out = Vec::new();
    for code in 0..count {
        let flat = digits(code, states, t * len);
        let path: Vec<Vec<u32>> = flat.chunks_exact(len).map(|c| c.iter().map(|&x| x as u32).collect()).collect();
        let mut p = 1.0;
        for pos in 0..len {
            let mut prev = x0[pos] as usize;
            for (k, state) in path.iter().enumerate() {
                p *= steps[k].get(prev, state[pos] as usize);
                prev = state[pos] as usize;
            }
        }
        if p > 0.0 {
            out.push((path, p));
        }
    }
    Ok(out)
}

/// `ln p_θ(x_{i−1} = prev | x_i = cur)` for a whole row.
fn reverse_logprob(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cur: &[u32],
    prev: &[u32],
    i: usize,
) -> Result<f64, OracleError> {
    let dists = plugin_reverse(denoiser, schedule, cur, i)?;
    Ok(dists.iter().zip(prev).map(|(d, &z)| d[z as usize].ln()).sum())
}

/// Negative ELBO per token,
/// `E_q[ln q(x_{1:T} | x_0) − ln p(x_T) − Σ_i ln p_θ(x_{i−1} | x_i)] / L`,
/// with the prior `p(x_T)` a point mass on the all-mask row.
pub fn nelbo_by_trajectories(x0: &[u32], denoiser: &dyn Denoiser, schedule: &NoiseSchedule) -> Result<f64, OracleError> {
    let m = denoiser.num_tokens();
    let t = schedule.steps();
    let mut total = 0.0;
    for (path, q) in trajectories(schedule, m, x0)? {
        if path[t - 1].iter().any(|&x| x as usize != m) {
            // prior puts no mass here
            return Ok(f64::INFINITY);
        }
        let mut log_ratio = q.ln();
        for i in 1..=t {
            let prev = if i == 1 { x0 } else { &path[i - 2][..] };
            log_ratio -= reverse_logprob(denoiser, schedule, &path[i - 1], prev, i)?;
        }
        total += q * log_ratio;
    }
    Ok(total / x0.len() as f64)
}

/// Exact `−ln p_θ(x_0) / L` by summing the reverse chain over every
/// intermediate trajectory starting from the all-mask row.
pub fn nll_by_trajectories(x0: &[u32], denoiser: &dyn Denoiser, schedule: &NoiseSchedule) -> Result<f64, OracleError> {
    let m = denoiser.num_tokens();
    let t = schedule.steps();
    let len = x0.len();
    let states = m + 1;
    let inner = t - 1;
    let count = states
        .checked_pow((inner * len) as u32)
        .filter(|&c| c <= MAX_TRAJECTORIES)
        .ok_or(OracleError::TooLarge(usize::MAX))?;
    let top = vec![m as u32; len];
    let mut p = 0.0;
    for code in 0..count {
        // states x_1 … x_{T−1}
        let flat = digits(code, states, inner * len);
        let mut chain: Vec<Vec<u32>> = vec![x0.to_vec()];
        chain.extend(flat.chunks_exact(len.max(1)).take(inner).map(|c| c.iter().map(|&x| x as u32).collect()));
        chain.push(top.clone());
        let mut lp = 0.0;
        for i in (1..=t).rev() {
            lp += reverse_logprob(denoiser, schedule, &chain[i], &chain[i - 1], i)?;
            if lp == f64::NEG_INFINITY {
                break;
            }
        }
        p += lp.exp();
    }
    Ok(-p.ln() / len as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Batch;
    use crate::denoiser::{OracleDenoiser, TableDenoiser, UniformDenoiser};
    use crate::diffusion::{build_schedule, posterior, CategoricalDist, ScheduleKind};
    use crate::nelbo::nelbo_terms_exact;

    #[test]
    fn path_posterior_agrees_with_closed_form() {
        let s = NoiseSchedule::from_betas(vec![0.2, 0.5, 0.7]).unwrap();
        let m = 3;
        for x0 in 0..3u32 {
            for xt in 0..=3u32 {
                for i in 1..=3 {
                    for j in 0..i {
                        let Some(want) = posterior_by_paths(&s, m, x0, xt, i, j).unwrap() else {
                            assert!(xt != x0 && xt != 3);
                            continue;
                        };
                        let got = posterior(xt, &CategoricalDist::one_hot(x0 as usize, 4), &s, i, j).unwrap();
                        let tv: f64 = 0.5 * got.probs().iter().zip(&want).map(|(a, b)| (a - b).abs()).sum::<f64>();
                        assert!(tv < 1e-12, "x0={x0} xt={xt} i={i} j={j}");
                    }
                }
            }
        }
    }

    #[test]
    fn trajectory_nelbo_matches_decomposition() {
        let s = build_schedule(ScheduleKind::AbsorbingUniform, 3).unwrap();
        let table = TableDenoiser::seeded(2, 3, 2, 5);
        for row in [[0u32, 1], [1, 1], [0, 0]] {
            let brute = nelbo_by_trajectories(&row, &table, &s).unwrap();
            let exact = nelbo_terms_exact(&Batch::new(1, 2, row.to_vec()), &table, &s).unwrap();
            assert!((brute - exact.total).abs() < 1e-10, "{brute} vs {}", exact.total);
            let nll = nll_by_trajectories(&row, &table, &s).unwrap();
            assert!(nll <= brute + 1e-12);
        }
    }

    #[test]
    fn oracle_and_uniform_likelihoods() {
        let s = build_schedule(ScheduleKind::AbsorbingUniform, 2).unwrap();
        let x0 = [1u32];
        let oracle = OracleDenoiser::new(Batch::new(1, 1, x0.to_vec()), 3);
        assert_eq!(nelbo_by_trajectories(&x0, &oracle, &s).unwrap(), 0.0);
        assert!(nll_by_trajectories(&x0, &oracle, &s).unwrap().abs() < 1e-15);
        // with one token every path from the all-mask row ends in a uniform draw
        let u = nll_by_trajectories(&x0, &UniformDenoiser::new(3), &s).unwrap();
        assert!((u - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn refuses_huge_instances() {
        let s = build_schedule(ScheduleKind::AbsorbingUniform, 12).unwrap();
        let u = UniformDenoiser::new(8);
        assert!(matches!(nelbo_by_trajectories(&[0, 1, 2], &u, &s), Err(OracleError::TooLarge(_))));
    }
}
