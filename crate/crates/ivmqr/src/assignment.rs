//! Discrete optimal transport between equal-size point clouds.
//!
//! Small problems are solved exactly by the shortest-augmenting-path
//! assignment algorithm with dual potentials (O(n^3)); larger ones fall
//! back to log-domain entropic regularization.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Exact minimum-cost perfect matching on a square cost matrix.
///
/// Returns `(assignment, total_cost)` where `assignment[i]` is the column
/// matched to row `i`.
pub fn min_cost_assignment(cost: &DMatrix<f64>) -> Result<(Vec<usize>, f64)> {
    let n = cost.nrows();
    if n == 0 {
        return Err(Error::EmptyInput("assignment needs at least one point".into()));
    }
    if cost.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: cost.ncols() });
    }
    // Dual potentials with a virtual column 0; p[j] is the row matched to
    // column j (1-based, 0 = unmatched).
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        // Unwind the augmenting path.
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| cost[(i, assignment[i])]).sum();
    Ok((assignment, total))
}

/// Converged entropic plan with its diagnostics.
#[derive(Debug, Clone)]
pub struct SinkhornOutcome {
    pub coupling: DMatrix<f64>,
    /// Transport cost `<P, C>` of the coupling.
    pub cost: f64,
    pub iterations: usize,
    /// Worst absolute row-marginal deviation at the final iterate.
    pub marginal_error: f64,
}

/// Log-domain Sinkhorn iteration with uniform marginals.
///
/// Stops at the marginal tolerance or the iteration cap, whichever comes
/// first; the achieved marginal error is reported either way.
pub fn sinkhorn_plan(
    cost: &DMatrix<f64>,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<SinkhornOutcome> {
    let n = cost.nrows();
    if n == 0 {
        return Err(Error::EmptyInput("sinkhorn needs at least one point".into()));
    }
    if cost.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: cost.ncols() });
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter("entropic epsilon must be positive".into()));
    }
    let log_mass = (1.0 / n as f64).ln();
    let mut f = vec![0.0f64; n];
    let mut g = vec![0.0f64; n];
    let mut iterations = 0;
    let mut marginal_error = f64::INFINITY;
    for it in 1..=max_iter {
        iterations = it;
        // f-update then g-update, both via stable log-sum-exp.
        for i in 0..n {
            let m = (0..n)
                .map(|j| (g[j] - cost[(i, j)]) / epsilon)
                .fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..n).map(|j| ((g[j] - cost[(i, j)]) / epsilon - m).exp()).sum();
            f[i] = epsilon * (log_mass - m - s.ln());
        }
        let mut worst = 0.0f64;
        for j in 0..n {
            let m = (0..n)
                .map(|i| (f[i] - cost[(i, j)]) / epsilon)
                .fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..n).map(|i| ((f[i] - cost[(i, j)]) / epsilon - m).exp()).sum();
            g[j] = epsilon * (log_mass - m - s.ln());
        }
        // Row marginals after the g-update measure convergence.
        for i in 0..n {
            let row: f64 = (0..n)
                .map(|j| ((f[i] + g[j] - cost[(i, j)]) / epsilon).exp())
                .sum();
            worst = worst.max((row - 1.0 / n as f64).abs());
        }
        marginal_error = worst;
        if worst < tol {
            break;
        }
    }
    let coupling =
        DMatrix::from_fn(n, n, |i, j| ((f[i] + g[j] - cost[(i, j)]) / epsilon).exp());
    let transport_cost = coupling
        .iter()
        .zip(cost.iter())
        .map(|(&p, &c)| p * c)
        .sum();
    Ok(SinkhornOutcome { coupling, cost: transport_cost, iterations, marginal_error })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force assignment oracle over all permutations (n <= 8).
    pub(crate) fn brute_force_assignment(cost: &DMatrix<f64>) -> (Vec<usize>, f64) {
        let n = cost.nrows();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = (perm.clone(), f64::INFINITY);
        permute(&mut perm, 0, &mut |p| {
            let c: f64 = (0..n).map(|i| cost[(i, p[i])]).sum();
            if c < best.1 {
                best = (p.to_vec(), c);
            }
        });
        best
    }

    fn permute(perm: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == perm.len() {
            visit(perm);
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            permute(perm, k + 1, visit);
            perm.swap(k, i);
        }
    }

    fn random_cost(n: usize, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, n, |_, _| rng.gen::<f64>())
    }

    #[test]
    fn matches_brute_force_on_small_instances() {
        for seed in 0..100 {
            let n = 3 + (seed as usize % 5); // 3..=7
            let cost = random_cost(n, seed);
            let (fast, fast_cost) = min_cost_assignment(&cost).unwrap();
            let (_, oracle_cost) = brute_force_assignment(&cost);
            assert!(
                (fast_cost - oracle_cost).abs() < 1e-12,
                "seed {seed}: {fast_cost} vs oracle {oracle_cost}"
            );
            // The returned indices must form a permutation.
            let mut seen = vec![false; n];
            for &j in &fast {
                assert!(!seen[j]);
                seen[j] = true;
            }
        }
    }

    #[test]
    fn zero_diagonal_gives_zero_cost() {
        let mut cost = random_cost(6, 9) + DMatrix::from_element(6, 6, 1.0);
        for i in 0..6 {
            cost[(i, i)] = 0.0;
        }
        let (assignment, total) = min_cost_assignment(&cost).unwrap();
        assert_eq!(assignment, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(total, 0.0);
    }

    #[test]
    fn sinkhorn_marginals_are_uniform() {
        let cost = random_cost(40, 3);
        let outcome = sinkhorn_plan(&cost, 0.05, 10_000, 1e-9).unwrap();
        assert!(outcome.marginal_error < 1e-9);
        let n = 40;
        for i in 0..n {
            let row: f64 = (0..n).map(|j| outcome.coupling[(i, j)]).sum();
            assert!((row - 1.0 / n as f64).abs() < 1e-6, "row {i} mass {row}");
        }
        for j in 0..n {
            let col: f64 = (0..n).map(|i| outcome.coupling[(i, j)]).sum();
            assert!((col - 1.0 / n as f64).abs() < 1e-6, "col {j} mass {col}");
        }
    }

    #[test]
    fn sinkhorn_cost_approaches_exact_cost() {
        let cost = random_cost(30, 17);
        let (_, exact) = min_cost_assignment(&cost).unwrap();
        let exact_avg = exact / 30.0;
        let mean_cost = cost.iter().sum::<f64>() / (30.0 * 30.0);
        let outcome = sinkhorn_plan(&cost, 0.01 * mean_cost, 10_000, 1e-6).unwrap();
        let entropic = outcome.cost;
        assert!(entropic >= exact_avg - 1e-6, "entropic {entropic} below exact {exact_avg}");
        assert!(
            entropic - exact_avg < 0.15 * exact_avg.max(0.05),
            "entropic {entropic} far from exact {exact_avg}"
        );
    }
}
