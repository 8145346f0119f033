//! Conjugate-gradient pressure solve on the fluid cells of a flag grid.

use std::collections::VecDeque;

use crate::error::{ensure, LssError, Result};
use crate::field::{FlagGrid, ScalarField};

use super::SolverConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
}

/// Fluid-cell numbering and connected components.
struct FluidIndex {
    cells: Vec<(usize, usize)>,
    /// Grid index -> fluid index.
    lookup: Vec<Option<usize>>,
    component: Vec<usize>,
    n_components: usize,
}

impl FluidIndex {
    fn new(flags: &FlagGrid) -> Self {
        let (w, h) = flags.dims();
        let mut cells = Vec::new();
        let mut lookup = vec![None; w * h];
        for j in 0..h {
            for i in 0..w {
                if flags.is_fluid(i, j) {
                    lookup[j * w + i] = Some(cells.len());
                    cells.push((i, j));
                }
            }
        }
        let mut component = vec![usize::MAX; cells.len()];
        let mut n_components = 0;
        let mut queue = VecDeque::new();
        for start in 0..cells.len() {
            if component[start] != usize::MAX {
                continue;
            }
            component[start] = n_components;
            queue.push_back(start);
            while let Some(k) = queue.pop_front() {
                let (i, j) = cells[k];
                for (ni, nj) in neighbors(i, j, w, h) {
                    if let Some(n) = lookup[nj * w + ni] {
                        if component[n] == usize::MAX {
                            component[n] = n_components;
                            queue.push_back(n);
                        }
                    }
                }
            }
            n_components += 1;
        }
        Self { cells, lookup, component, n_components }
    }

    /// Subtracts the per-component mean, projecting onto the range of the
    /// Neumann operator.
    fn remove_component_means(&self, v: &mut [f64]) {
        let mut sums = vec![0.0; self.n_components];
        let mut counts = vec![0usize; self.n_components];
        for (k, x) in v.iter().enumerate() {
            sums[self.component[k]] += x;
            counts[self.component[k]] += 1;
        }
        for (k, x) in v.iter_mut().enumerate() {
            let c = self.component[k];
            *x -= sums[c] / counts[c] as f64;
        }
    }
}

fn neighbors(i: usize, j: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let mut out = [(usize::MAX, usize::MAX); 4];
    if i > 0 {
        out[0] = (i - 1, j);
    }
    if i + 1 < w {
        out[1] = (i + 1, j);
    }
    if j > 0 {
        out[2] = (i, j - 1);
    }
    if j + 1 < h {
        out[3] = (i, j + 1);
    }
    out.into_iter().filter(|c| c.0 != usize::MAX)
}

/// `out = -L p` where `L` is the 5-point Laplacian restricted to fluid
/// neighbors.
fn apply_neg_laplacian(index: &FluidIndex, w: usize, h: usize, p: &[f64], out: &mut [f64]) {
    for (k, &(i, j)) in index.cells.iter().enumerate() {
        let mut acc = 0.0;
        for (ni, nj) in neighbors(i, j, w, h) {
            if let Some(n) = index.lookup[nj * w + ni] {
                acc += p[k] - p[n];
            }
        }
        out[k] = acc;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `laplacian(p) = div` on the fluid cells with Neumann conditions at
/// solid neighbors. The right-hand side is projected onto the operator's
/// range and `p` is returned with zero mean per fluid component.
pub fn solve_pressure(
    div: &ScalarField,
    flags: &FlagGrid,
    cfg: &SolverConfig,
) -> Result<(ScalarField, SolveStats)> {
    ensure!(div.dims() == flags.dims(), "solve_pressure: dimension mismatch");
    ensure!(cfg.cg_tol > 0.0 && cfg.cg_max_iter >= 1, "invalid CG settings");
    let (w, h) = div.dims();
    let index = FluidIndex::new(flags);
    let n = index.cells.len();
    let mut p_out = ScalarField::zeros(w, h);
    if n == 0 {
        return Ok((p_out, SolveStats { iterations: 0, residual: 0.0 }));
    }

    // -L p = -div
    let mut b: Vec<f64> = index.cells.iter().map(|&(i, j)| -div.get(i, j)).collect();
    let div_norm = dot(&b, &b).sqrt();
    index.remove_component_means(&mut b);
    let threshold = cfg.cg_tol * div_norm.max(1.0);

    let mut x = vec![0.0; n];
    let mut r = b.clone();
    let mut d = r.clone();
    let mut q = vec![0.0; n];
    let mut rr = dot(&r, &r);
    let mut iterations = 0;
    while rr.sqrt() > threshold {
        if iterations >= cfg.cg_max_iter {
            return Err(LssError::Solver { iterations, residual: rr.sqrt() });
        }
        apply_neg_laplacian(&index, w, h, &d, &mut q);
        let dq = dot(&d, &q);
        if dq <= 0.0 {
            break;
        }
        let alpha = rr / dq;
        for k in 0..n {
            x[k] += alpha * d[k];
            r[k] -= alpha * q[k];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for k in 0..n {
            d[k] = r[k] + beta * d[k];
        }
        rr = rr_new;
        iterations += 1;
    }

    index.remove_component_means(&mut x);
    // true residual of the projected system
    apply_neg_laplacian(&index, w, h, &x, &mut q);
    let residual = q.iter().zip(&b).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if residual > threshold * 1.5 {
        return Err(LssError::Solver { iterations, residual });
    }
    for (k, &(i, j)) in index.cells.iter().enumerate() {
        p_out.set(i, j, x[k]);
    }
    Ok((p_out, SolveStats { iterations, residual }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{divergence, gradient_to_faces, MaxAbs};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tight() -> SolverConfig {
        SolverConfig { cg_tol: 1e-13, cg_max_iter: 10_000, ..SolverConfig::moving_smoke() }
    }

    /// Dense Gaussian elimination on the assembled Neumann system, with the
    /// last equation replaced by `sum(p) = 0`.
    fn dense_oracle(div: &ScalarField, flags: &FlagGrid) -> ScalarField {
        let (w, h) = div.dims();
        let cells: Vec<(usize, usize)> =
            (0..h).flat_map(|j| (0..w).map(move |i| (i, j))).filter(|&(i, j)| flags.is_fluid(i, j)).collect();
        let n = cells.len();
        let pos = |i: usize, j: usize| cells.iter().position(|&c| c == (i, j));
        let mut a = vec![vec![0.0; n + 1]; n];
        for (r, &(i, j)) in cells.iter().enumerate() {
            let nbrs = [(i as i64 - 1, j as i64), (i as i64 + 1, j as i64), (i as i64, j as i64 - 1), (i as i64, j as i64 + 1)];
            for (ni, nj) in nbrs {
                if ni < 0 || nj < 0 || ni >= w as i64 || nj >= h as i64 {
                    continue;
                }
                if let Some(c) = pos(ni as usize, nj as usize) {
                    a[r][c] += 1.0;
                    a[r][r] -= 1.0;
                }
            }
            a[r][n] = div.get(i, j);
        }
        for c in 0..=n {
            a[n - 1][c] = if c < n { 1.0 } else { 0.0 };
        }
        for col in 0..n {
            let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
            a.swap(col, piv);
            for row in 0..n {
                if row != col {
                    let f = a[row][col] / a[col][col];
                    for c in col..=n {
                        a[row][c] -= f * a[col][c];
                    }
                }
            }
        }
        let mut p = ScalarField::zeros(w, h);
        for (r, &(i, j)) in cells.iter().enumerate() {
            p.set(i, j, a[r][n] / a[r][r]);
        }
        p
    }

    #[test]
    fn zero_divergence_gives_zero_pressure() {
        let flags = FlagGrid::closed_box(6, 6);
        let (p, stats) = solve_pressure(&ScalarField::zeros(6, 6), &flags, &tight()).unwrap();
        assert_eq!(p.max_abs(), 0.0);
        assert_eq!(stats.iterations, 0);
    }

    #[test]
    fn two_by_two_patch_matches_dense_solve() {
        let flags = FlagGrid::closed_box(4, 4);
        let mut div = ScalarField::zeros(4, 4);
        div.set(1, 1, 1.0);
        div.set(2, 1, -1.0);
        let (p, _) = solve_pressure(&div, &flags, &tight()).unwrap();
        let oracle = dense_oracle(&div, &flags);
        for k in 0..16 {
            assert!((p.data()[k] - oracle.data()[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn random_small_systems_match_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let w = rng.gen_range(3..=8);
            let h = rng.gen_range(3..=8);
            let mut flags = FlagGrid::closed_box(w, h);
            if w > 4 && h > 4 {
                flags.set_solid(2, 2);
            }
            let mut div = ScalarField::zeros(w, h);
            for j in 0..h {
                for i in 0..w {
                    if flags.is_fluid(i, j) {
                        div.set(i, j, rng.gen_range(-1.0..1.0));
                    }
                }
            }
            let mean = div.sum() / flags.fluid_count() as f64;
            for j in 0..h {
                for i in 0..w {
                    if flags.is_fluid(i, j) {
                        div.set(i, j, div.get(i, j) - mean);
                    }
                }
            }
            let (p, _) = solve_pressure(&div, &flags, &tight()).unwrap();
            let oracle = dense_oracle(&div, &flags);
            let oracle_mean = oracle.sum() / flags.fluid_count() as f64;
            for j in 0..h {
                for i in 0..w {
                    if flags.is_fluid(i, j) {
                        assert!((p.get(i, j) - (oracle.get(i, j) - oracle_mean)).abs() < 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn solution_satisfies_poisson_equation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let flags = FlagGrid::closed_box(12, 10);
        let mut div = ScalarField::from_fn(12, 10, |i, j| if flags.is_fluid(i, j) { rng.gen_range(-1.0..1.0) } else { 0.0 });
        let mean = div.sum() / flags.fluid_count() as f64;
        for v in div.data_mut().iter_mut() {
            *v -= mean;
        }
        for j in 0..10 {
            for i in 0..12 {
                if flags.is_solid(i, j) {
                    div.set(i, j, 0.0);
                }
            }
        }
        let cfg = SolverConfig { cg_tol: 1e-10, cg_max_iter: 1000, ..SolverConfig::moving_smoke() };
        let (p, stats) = solve_pressure(&div, &flags, &cfg).unwrap();
        let lap = divergence(&gradient_to_faces(&p, &flags).unwrap(), &flags).unwrap();
        let err: f64 = lap.data().iter().zip(div.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(err <= 1e-9, "residual {err} stats {stats:?}");
    }

    #[test]
    fn non_convergence_is_reported() {
        let flags = FlagGrid::closed_box(20, 20);
        let mut div = ScalarField::zeros(20, 20);
        div.set(3, 3, 1.0);
        div.set(16, 16, -1.0);
        let cfg = SolverConfig { cg_tol: 1e-12, cg_max_iter: 2, ..SolverConfig::moving_smoke() };
        match solve_pressure(&div, &flags, &cfg) {
            Err(LssError::Solver { iterations, residual }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 0.0);
            }
            other => panic!("expected solver failure, got {other:?}"),
        }
    }
}
