//! Small real-polynomial helpers: evaluation, companion-matrix roots, and
//! multiplicity clustering with an explicit noise scale.

use nalgebra::DMatrix;

/// Evaluates sum c_k t^k by Horner.
pub fn eval(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
}

pub fn derivative(coeffs: &[f64]) -> Vec<f64> {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, c)| k as f64 * c)
        .collect()
}

/// All complex roots via the companion matrix (leading zeros trimmed).
pub fn complex_roots(coeffs: &[f64]) -> Vec<(f64, f64)> {
    let mut c = coeffs.to_vec();
    while c.len() > 1 && c.last().map(|v| v.abs()).unwrap_or(0.0) < 1e-300 {
        c.pop();
    }
    let deg = c.len().saturating_sub(1);
    if deg == 0 {
        return Vec::new();
    }
    let lead = c[deg];
    let mut m = DMatrix::<f64>::zeros(deg, deg);
    for i in 0..deg {
        m[(i, deg - 1)] = -c[i] / lead;
        if i + 1 < deg {
            m[(i + 1, i)] = 1.0;
        }
    }
    m.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect()
}

/// A real root with multiplicity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealRoot {
    pub value: f64,
    pub multiplicity: usize,
}

/// Result of root extraction: clustered real roots plus a count of
/// genuinely complex ones.
#[derive(Debug, Clone, Default)]
pub struct RootSet {
    pub real: Vec<RealRoot>,
    pub complex_pairs: usize,
}

/// Clusters companion-matrix roots into real roots with multiplicity.
///
/// Two roots are merged when they lie within
/// max(1e-6 (1 + |m|), 20 sqrt(noise) (1 + |m|)); a repeated real root
/// perturbed by coefficient noise eps wanders by O(sqrt(eps)), so the
/// noise floor of the coefficients participates in the threshold. A
/// conjugate pair whose imaginary part falls inside the cluster radius is
/// treated as a real double root.
pub fn cluster_roots(coeffs: &[f64], noise: f64) -> RootSet {
    let zs = complex_roots(coeffs);
    let radius = |m: f64| (1.0 + m.abs()) * (1e-6f64).max(20.0 * noise.abs().sqrt());
    let mut used = vec![false; zs.len()];
    let mut out = RootSet::default();
    let mut complex_count = 0usize;
    for i in 0..zs.len() {
        if used[i] {
            continue;
        }
        let mut cluster = vec![i];
        used[i] = true;
        for j in i + 1..zs.len() {
            if used[j] {
                continue;
            }
            let d = ((zs[i].0 - zs[j].0).powi(2) + (zs[i].1 - zs[j].1).powi(2)).sqrt();
            if d <= radius(zs[i].0) {
                cluster.push(j);
                used[j] = true;
            }
        }
        let re_mean: f64 = cluster.iter().map(|&k| zs[k].0).sum::<f64>() / cluster.len() as f64;
        let im_max: f64 = cluster.iter().map(|&k| zs[k].1.abs()).fold(0.0, f64::max);
        if im_max <= radius(re_mean) {
            out.real.push(RealRoot { value: re_mean, multiplicity: cluster.len() });
        } else {
            complex_count += cluster.len();
        }
    }
    out.complex_pairs = complex_count / 2;
    out.real.sort_by(|a, b| a.value.partial_cmp(&b.value).expect("finite roots"));
    out
}

/// Scalar synthetic division by (1 - t/m): returns (quotient, remainder at m).
pub fn divide_by_root_factor(coeffs: &[f64], m: f64) -> (Vec<f64>, f64) {
    let d = coeffs.len() - 1;
    if d == 0 {
        return (vec![], coeffs[0]);
    }
    let mut q = vec![0.0; d];
    q[0] = coeffs[0];
    for k in 1..d {
        q[k] = coeffs[k] + q[k - 1] / m;
    }
    let rem = coeffs[d] + q[d - 1] / m;
    (q, rem * (-m)) // remainder expressed as value at t = m of the residue
}

/// Multiplies by (1 - t/m).
pub fn multiply_by_root_factor(coeffs: &[f64], m: f64) -> Vec<f64> {
    let mut out = vec![0.0; coeffs.len() + 1];
    for (k, c) in coeffs.iter().enumerate() {
        out[k] += c;
        out[k + 1] -= c / m;
    }
    out
}

/// Coefficients of p(t + s) by binomial expansion.
pub fn shift(coeffs: &[f64], s: f64) -> Vec<f64> {
    let d = coeffs.len() - 1;
    let mut out = vec![0.0; d + 1];
    for (j, c) in coeffs.iter().enumerate() {
        // c * (t + s)^j
        let mut binom = 1.0f64;
        for k in 0..=j {
            // binom = C(j, k) computed incrementally below
            out[j - k] += c * binom * s.powi(k as i32);
            binom = binom * (j - k) as f64 / (k + 1) as f64;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roots_of_t2_minus_t() {
        // t^2 - t: coeffs [0, -1, 1]
        let rs = cluster_roots(&[0.0, -1.0, 1.0], 0.0);
        assert_eq!(rs.real.len(), 2);
        assert!((rs.real[0].value).abs() < 1e-12);
        assert!((rs.real[1].value - 1.0).abs() < 1e-12);
        assert_eq!(rs.complex_pairs, 0);
    }

    #[test]
    fn double_root_with_noise_clusters() {
        // (1 - t/0.7)^2 (t^2 - t) with slight coefficient perturbation.
        let base = multiply_by_root_factor(&multiply_by_root_factor(&[0.0, -1.0, 1.0], 0.7), 0.7);
        let mut noisy = base.clone();
        noisy[2] += 3e-9;
        let rs = cluster_roots(&noisy, 1e-8);
        let m07 = rs.real.iter().find(|r| (r.value - 0.7).abs() < 1e-3).expect("root near 0.7");
        assert_eq!(m07.multiplicity, 2);
    }

    #[test]
    fn division_undoes_multiplication() {
        let p = [1.0, 2.0, 3.0];
        let q = multiply_by_root_factor(&p, 0.4);
        assert!(eval(&q, 0.4).abs() < 1e-14);
        let (back, rem) = divide_by_root_factor(&q, 0.4);
        assert!(rem.abs() < 1e-14);
        for (a, b) in back.iter().zip(p.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn shift_matches_direct_evaluation() {
        let p = [0.5, -1.0, 2.0, 0.25];
        let s = 0.3;
        let q = shift(&p, s);
        for t in [-1.0, 0.0, 0.7, 2.0] {
            assert!((eval(&q, t) - eval(&p, t + s)).abs() < 1e-12);
        }
    }

    #[test]
    fn complex_pair_detected() {
        // t^2 + 1
        let rs = cluster_roots(&[1.0, 0.0, 1.0], 0.0);
        assert!(rs.real.is_empty());
        assert_eq!(rs.complex_pairs, 1);
    }
}
