//! One-dimensional Gauss rules and the sphere rule used by the velocity-space
//! and collision integrals.
//!
//! Every rule is produced by Golub-Welsch on the Jacobi matrix of the weight's
//! orthogonal polynomials. For the relative-speed weight `r^3 exp(-r^2/4)`,
//! which has no textbook recurrence, the recurrence coefficients are obtained
//! with a discretized Stieltjes procedure on a fine Gauss-Legendre grid.

use nalgebra::DMatrix;

/// Nodes and weights of a one-dimensional quadrature rule.
#[derive(Debug, Clone)]
pub struct Rule1d {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule1d {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Integrates `f` against the rule's weight function.
    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Golub-Welsch: eigendecomposition of the symmetric tridiagonal Jacobi matrix
/// with diagonal `alpha` and off-diagonal `beta_sqrt`. `mass` is the total
/// integral of the weight.
fn golub_welsch(alpha: &[f64], beta_sqrt: &[f64], mass: f64) -> Rule1d {
    let n = alpha.len();
    assert!(n >= 1 && beta_sqrt.len() == n - 1);
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for (i, &a) in alpha.iter().enumerate() {
        jac[(i, i)] = a;
    }
    for (i, &b) in beta_sqrt.iter().enumerate() {
        jac[(i, i + 1)] = b;
        jac[(i + 1, i)] = b;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|j| {
            let node = eig.eigenvalues[j];
            let v0 = eig.eigenvectors[(0, j)];
            (node, mass * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Rule1d {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}

/// Gauss-Hermite rule for the unit Gaussian weight `(2pi)^{-1/2} exp(-x^2/2)`.
///
/// Exact for polynomials of degree <= 2n-1; total mass 1.
pub fn gauss_hermite_prob(n: usize) -> Rule1d {
    let alpha = vec![0.0; n];
    let beta_sqrt: Vec<f64> = (1..n).map(|j| (j as f64).sqrt()).collect();
    golub_welsch(&alpha, &beta_sqrt, 1.0)
}

/// Gauss-Legendre rule on `[-1, 1]` (weight 1, mass 2).
pub fn gauss_legendre(n: usize) -> Rule1d {
    let alpha = vec![0.0; n];
    let beta_sqrt: Vec<f64> = (1..n)
        .map(|j| {
            let j = j as f64;
            j / (4.0 * j * j - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&alpha, &beta_sqrt, 2.0)
}

/// Gauss-Legendre rule mapped to an arbitrary interval `[a, b]`.
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> Rule1d {
    let base = gauss_legendre(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    Rule1d {
        nodes: base.nodes.iter().map(|&x| mid + half * x).collect(),
        weights: base.weights.iter().map(|&w| w * half).collect(),
    }
}

/// Gauss rule for the relative-speed weight `r^3 exp(-r^2/4)` on `(0, inf)`.
///
/// Recurrence coefficients come from a discretized Stieltjes procedure against
/// a 400-point Gauss-Legendre reference on `[0, 60]`; the truncation error of
/// the reference is far below rounding. Exact moments of this weight are
/// `2^{j+3} Gamma((j+4)/2)`, used by the unit tests.
pub fn gauss_radial_relative(n: usize) -> Rule1d {
    assert!(n >= 1 && n <= 24, "radial rule limited to n <= 24");
    let reference = gauss_legendre_on(400, 0.0, 60.0);
    let rw: Vec<f64> = reference
        .nodes
        .iter()
        .zip(&reference.weights)
        .map(|(&r, &w)| w * r * r * r * (-0.25 * r * r).exp())
        .collect();
    let rx = &reference.nodes;

    // Stieltjes: alpha_j = <x p_j, p_j>/<p_j, p_j>, beta_j = <p_j, p_j>/<p_{j-1}, p_{j-1}>.
    let m = rx.len();
    let mut p_prev = vec![0.0; m];
    let mut p_cur = vec![1.0; m];
    let mut alpha = Vec::with_capacity(n);
    let mut beta_sqrt = Vec::with_capacity(n - 1);
    let mut norm_cur: f64 = rw.iter().sum();
    let mass = norm_cur;
    for j in 0..n {
        let xp: f64 = (0..m).map(|i| rw[i] * rx[i] * p_cur[i] * p_cur[i]).sum();
        let a_j = xp / norm_cur;
        alpha.push(a_j);
        if j + 1 == n {
            break;
        }
        let mut p_next = vec![0.0; m];
        for i in 0..m {
            p_next[i] = (rx[i] - a_j) * p_cur[i]
                - if j == 0 {
                    0.0
                } else {
                    beta_sqrt[j - 1] * beta_sqrt[j - 1] * p_prev[i] / 1.0
                };
        }
        // Renormalize against the running norm to keep the recurrence monic.
        let norm_next: f64 = (0..m).map(|i| rw[i] * p_next[i] * p_next[i]).sum();
        beta_sqrt.push((norm_next / norm_cur).sqrt());
        p_prev = p_cur;
        p_cur = p_next;
        norm_cur = norm_next;
    }
    golub_welsch(&alpha, &beta_sqrt, mass)
}

/// Product rule on the unit sphere: Gauss-Legendre in `cos(theta)` times a
/// uniform grid in azimuth. Integrates spherical polynomials of degree
/// `<= min(2 n_polar - 1, n_azimuth - 1)` exactly; weights sum to `4 pi`.
#[derive(Debug, Clone)]
pub struct SphereRule {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

pub fn sphere_product(n_polar: usize, n_azimuth: usize) -> SphereRule {
    let polar = gauss_legendre(n_polar);
    let dphi = std::f64::consts::TAU / n_azimuth as f64;
    let mut points = Vec::with_capacity(n_polar * n_azimuth);
    let mut weights = Vec::with_capacity(n_polar * n_azimuth);
    for (&t, &wt) in polar.nodes.iter().zip(&polar.weights) {
        let st = (1.0 - t * t).max(0.0).sqrt();
        for j in 0..n_azimuth {
            let phi = dphi * j as f64;
            points.push([st * phi.cos(), st * phi.sin(), t]);
            weights.push(wt * dphi);
        }
    }
    SphereRule { points, weights }
}


/// Right-handed orthonormal frame completing a unit vector.
pub(crate) fn orthonormal_frame(ghat: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let a = {
        let abs = [ghat[0].abs(), ghat[1].abs(), ghat[2].abs()];
        if abs[0] <= abs[1] && abs[0] <= abs[2] {
            [1.0, 0.0, 0.0]
        } else if abs[1] <= abs[2] {
            [0.0, 1.0, 0.0]
        } else {
            [0.0, 0.0, 1.0]
        }
    };
    let cross = |u: [f64; 3], v: [f64; 3]| {
        [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ]
    };
    let mut e1 = cross(a, ghat);
    let n = (e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]).sqrt();
    for c in &mut e1 {
        *c /= n;
    }
    let e2 = cross(ghat, e1);
    (e1, e2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn double_factorial(n: i64) -> f64 {
        let mut acc = 1.0;
        let mut k = n;
        while k > 1 {
            acc *= k as f64;
            k -= 2;
        }
        acc
    }

    #[test]
    fn hermite_matches_gaussian_moments() {
        let rule = gauss_hermite_prob(8);
        // E[x^{2m}] = (2m-1)!!, odd moments vanish; exact through degree 15.
        for m in 0..8 {
            let got = rule.integrate(|x| x.powi(2 * m));
            assert_relative_eq!(got, double_factorial(2 * m as i64 - 1), max_relative = 1e-13);
        }
        assert!(rule.integrate(|x| x.powi(7)).abs() < 1e-10);
    }

    #[test]
    fn legendre_mass_and_parabola() {
        let rule = gauss_legendre(6);
        assert_relative_eq!(rule.integrate(|_| 1.0), 2.0, max_relative = 1e-14);
        assert_relative_eq!(rule.integrate(|x| x * x), 2.0 / 3.0, max_relative = 1e-14);
        let shifted = gauss_legendre_on(6, 0.0, 1.0);
        assert_relative_eq!(shifted.integrate(|x| x), 0.5, max_relative = 1e-14);
    }

    #[test]
    fn radial_relative_matches_gamma_moments() {
        // Moments of r^3 exp(-r^2/4): m_j = 2^{j+3} Gamma((j+4)/2).
        fn gamma_half(two_s: i64) -> f64 {
            // Gamma(two_s / 2) for integer two_s >= 1.
            if two_s % 2 == 0 {
                let mut acc = 1.0;
                for i in 1..(two_s / 2) {
                    acc *= i as f64;
                }
                acc
            } else {
                // Gamma(n + 1/2) = (2n-1)!! sqrt(pi) / 2^n.
                let n = (two_s - 1) / 2;
                double_factorial(2 * n - 1) * std::f64::consts::PI.sqrt() / 2f64.powi(n as i32)
            }
        }
        let rule = gauss_radial_relative(12);
        for j in 0..20i64 {
            let exact = 2f64.powi(j as i32 + 3) * gamma_half(j + 4);
            let got = rule.integrate(|r| r.powi(j as i32));
            assert_relative_eq!(got, exact, max_relative = 1e-11);
        }
    }

    #[test]
    fn sphere_rule_moments() {
        let rule = sphere_product(5, 10);
        let total: f64 = rule.weights.iter().sum();
        assert_relative_eq!(total, 4.0 * std::f64::consts::PI, max_relative = 1e-13);
        // Int over S^2 of z^2 = 4 pi / 3, of x y = 0, of x^2 y^2 = 4 pi / 15.
        let mom = |f: &dyn Fn(&[f64; 3]) -> f64| -> f64 {
            rule.points
                .iter()
                .zip(&rule.weights)
                .map(|(p, &w)| w * f(p))
                .sum()
        };
        assert_relative_eq!(
            mom(&|p| p[2] * p[2]),
            4.0 * std::f64::consts::PI / 3.0,
            max_relative = 1e-13
        );
        assert!(mom(&|p| p[0] * p[1]).abs() < 1e-13);
        assert_relative_eq!(
            mom(&|p| p[0] * p[0] * p[1] * p[1]),
            4.0 * std::f64::consts::PI / 15.0,
            max_relative = 1e-13
        );
    }
}
