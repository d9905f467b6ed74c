//! Small dense symmetric-matrix kernels used by the latent-space model:
//! Cholesky factorization, cyclic Jacobi eigendecomposition and power
//! iteration. Matrices are row-major `d*d` slices.

/// Lower-triangular Cholesky factor of a symmetric positive-definite
/// matrix, or `None` when a pivot is not strictly positive.
pub(crate) fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[i * d + j];
            for k in 0..j {
                sum -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(sum > 0.0) {
                    return None;
                }
                l[i * d + i] = sum.sqrt();
            } else {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Solves `L y = b` for lower-triangular `L`.
pub(crate) fn solve_lower(l: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * d + k] * y[k];
        }
        y[i] = sum / l[i * d + i];
    }
    y
}

/// `ln det` of the matrix whose Cholesky factor is `l`.
pub(crate) fn log_det_from_cholesky(l: &[f64], d: usize) -> f64 {
    (0..d).map(|i| l[i * d + i].ln()).sum::<f64>() * 2.0
}

/// Squared Mahalanobis distance `diff' A^-1 diff` given `A = L L'`.
pub(crate) fn mahalanobis_sq(l: &[f64], d: usize, diff: &[f64]) -> f64 {
    solve_lower(l, d, diff).iter().map(|v| v * v).sum()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// `(eigenvalues, v)` with `v` row-major such that column `c` of `v` is the
/// eigenvector of `eigenvalues[c]`; unsorted.
pub(crate) fn jacobi_eigen(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..d {
            for q in p + 1..d {
                off = off.max(m[p * d + q].abs());
            }
        }
        if off <= 1e-14 * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let (app, aqq) = (m[p * d + p], m[q * d + q]);
                let theta = (aqq - app) / (2.0 * apq);
                // Stable tangent of the rotation angle.
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..d {
                    let (mip, miq) = (m[i * d + p], m[i * d + q]);
                    m[i * d + p] = c * mip - s * miq;
                    m[i * d + q] = s * mip + c * miq;
                }
                for i in 0..d {
                    let (mpi, mqi) = (m[p * d + i], m[q * d + i]);
                    m[p * d + i] = c * mpi - s * mqi;
                    m[q * d + i] = s * mpi + c * mqi;
                }
                for i in 0..d {
                    let (vip, viq) = (v[i * d + p], v[i * d + q]);
                    v[i * d + p] = c * vip - s * viq;
                    v[i * d + q] = s * vip + c * viq;
                }
            }
        }
    }
    let eigenvalues = (0..d).map(|i| m[i * d + i]).collect();
    (eigenvalues, v)
}

/// Rebuilds `V diag(lambda) V'` (used to clamp eigenvalues); the result is
/// explicitly symmetrized.
pub(crate) fn reconstruct_from_eigen(eigenvalues: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = 0.0;
            for c in 0..d {
                sum += v[i * d + c] * eigenvalues[c] * v[j * d + c];
            }
            out[i * d + j] = sum;
            out[j * d + i] = sum;
        }
    }
    out
}

/// Largest eigenvalue of a symmetric positive-definite matrix via power
/// iteration, converged to relative tolerance `tol`. Tries two starting
/// vectors and keeps the larger estimate so an unlucky orthogonal start
/// cannot undershoot.
pub(crate) fn spectral_norm_spd(a: &[f64], d: usize, tol: f64) -> f64 {
    let ones = vec![1.0; d];
    let mut e_major = vec![0.0; d];
    let argmax = (0..d)
        .max_by(|&i, &j| a[i * d + i].total_cmp(&a[j * d + j]))
        .unwrap_or(0);
    e_major[argmax] = 1.0;
    let mut best = 0.0f64;
    for start in [ones, e_major] {
        let mut v = start;
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        let mut lambda = 0.0;
        for _ in 0..10_000 {
            let mut av = vec![0.0; d];
            for i in 0..d {
                for j in 0..d {
                    av[i] += a[i * d + j] * v[j];
                }
            }
            let norm: f64 = av.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            av.iter_mut().for_each(|x| *x /= norm);
            let mut next = 0.0;
            for i in 0..d {
                let mut row = 0.0;
                for j in 0..d {
                    row += a[i * d + j] * av[j];
                }
                next += av[i] * row;
            }
            let done = (next - lambda).abs() <= tol * next.abs().max(1.0);
            lambda = next;
            v = av;
            if done {
                break;
            }
        }
        best = best.max(lambda);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_spd(rng: &mut ChaCha12Rng, d: usize) -> Vec<f64> {
        let b: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    a[i * d + j] += b[i * d + k] * b[j * d + k];
                }
            }
            a[i * d + i] += 0.1;
        }
        a
    }

    #[test]
    fn cholesky_known_two_by_two() {
        // [[4, 2], [2, 3]] = L L' with L = [[2, 0], [1, sqrt(2)]].
        let l = cholesky(&[4.0, 2.0, 2.0, 3.0], 2).unwrap();
        assert!((l[0] - 2.0).abs() < 1e-14);
        assert!((l[2] - 1.0).abs() < 1e-14);
        assert!((l[3] - 2.0f64.sqrt()).abs() < 1e-14);
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_none(), "indefinite must fail");
    }

    #[test]
    fn cholesky_reproduces_matrix_and_solves() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..50 {
            let d = rng.gen_range(1..8);
            let a = random_spd(&mut rng, d);
            let l = cholesky(&a, d).expect("SPD");
            for i in 0..d {
                for j in 0..d {
                    let mut sum = 0.0;
                    for k in 0..d {
                        sum += l[i * d + k] * l[j * d + k];
                    }
                    assert!((sum - a[i * d + j]).abs() < 1e-9);
                }
            }
            // Mahalanobis of a known vector agrees with explicit inverse-free
            // double solve: m^2 = y'y where L y = diff.
            let diff: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y = solve_lower(&l, d, &diff);
            let m2 = mahalanobis_sq(&l, d, &diff);
            let y2: f64 = y.iter().map(|v| v * v).sum();
            assert!((m2 - y2).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobi_recovers_diagonal_spectrum() {
        let a = [5.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, -1.0];
        let (mut vals, _) = jacobi_eigen(&a, 3);
        vals.sort_by(f64::total_cmp);
        assert!((vals[0] + 1.0).abs() < 1e-12);
        assert!((vals[1] - 2.0).abs() < 1e-12);
        assert!((vals[2] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn jacobi_eigenpairs_satisfy_definition() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..30 {
            let d = rng.gen_range(2..9);
            let a = random_spd(&mut rng, d);
            let (vals, v) = jacobi_eigen(&a, d);
            for c in 0..d {
                for i in 0..d {
                    let mut av = 0.0;
                    for j in 0..d {
                        av += a[i * d + j] * v[j * d + c];
                    }
                    assert!(
                        (av - vals[c] * v[i * d + c]).abs() < 1e-8,
                        "A v != lambda v at column {c}"
                    );
                }
            }
            let rebuilt = reconstruct_from_eigen(&vals, &v, d);
            for (x, y) in rebuilt.iter().zip(&a) {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn power_iteration_matches_jacobi_maximum() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..60 {
            let d = rng.gen_range(1..10);
            let a = random_spd(&mut rng, d);
            let (vals, _) = jacobi_eigen(&a, d);
            let top = vals.iter().copied().fold(f64::MIN, f64::max);
            let est = spectral_norm_spd(&a, d, 1e-12);
            assert!((est - top).abs() < 1e-7 * top.max(1.0), "{est} vs {top}");
        }
    }
}
