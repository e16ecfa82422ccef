//! Assembly and validation of the linearized hard-sphere collision operator
//! `L = -nu + K` on the Galerkin basis.
//!
//! The bilinear forms are reduced to center-of-mass/relative coordinates
//! `g = xi - xi_*`, `h = xi + xi_*`, where the Gaussian pair measure
//! factorizes and the hard-sphere kernel contributes a single `|g|` that is
//! absorbed into the radial weight `r^3 exp(-r^2/4)`. After the angular
//! transfer integral is done in a frame aligned with `g`, every remaining
//! integrand is polynomial times a classical weight, so the product rule
//! integrates the Galerkin entries exactly up to rounding. That is what makes
//! the kernel-dimension and semidefiniteness tolerances attainable.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::basis::{Scalar, TwoSpecies, VelocityBasis};
use crate::quadrature::{
    gauss_hermite_prob, gauss_legendre_on, gauss_radial_relative, orthonormal_frame,
    sphere_product, Rule1d,
};

#[derive(Debug, Error)]
pub enum CollisionError {
    #[error("assembled operator asymmetry {asymmetry:.3e} exceeds 1e-8 (insufficient quadrature)")]
    AsymmetryTooLarge { asymmetry: f64 },
    #[error("operator not negative semidefinite: max eigenvalue {max_eigenvalue:.3e} vs scale {scale:.3e}")]
    NotNegativeSemidefinite { max_eigenvalue: f64, scale: f64 },
    #[error("kernel dimension {found} != 6 at tolerance {tol:.3e}")]
    KernelDimension { found: usize, tol: f64 },
    #[error("kernel eigenvectors miss the collision invariants: principal angle {angle:.3e} rad")]
    KernelAngle { angle: f64 },
    #[error("coercivity constant non-positive ({0:.3e}); operator assembly is broken")]
    CoercivityNonPositive(f64),
    #[error("cache key mismatch: expected {expected}, found {found}")]
    CacheKeyMismatch { expected: String, found: String },
    #[error("cache parse error: {0}")]
    CacheParse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Quadrature orders for the collision assembly. The defaults integrate every
/// entry exactly for the given polynomial degree; doubling any order must
/// reproduce the same matrices to rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CollisionQuadSpec {
    /// Gauss-Hermite order per dimension of the pair-mean variable `h`.
    pub n_h: usize,
    /// Radial order for the relative-speed weight `r^3 exp(-r^2/4)`.
    pub n_r: usize,
    /// Polar order of the relative-direction sphere rule.
    pub n_polar: usize,
    /// Azimuthal order of the relative-direction sphere rule.
    pub n_azimuth: usize,
    /// Gauss-Legendre order on `[0, 1]` for `s = g_hat . omega`.
    pub n_s: usize,
    /// Azimuthal order of the transfer-direction rule.
    pub n_phi: usize,
    /// Gauss-Hermite order per dimension for the (non-polynomial) collision
    /// frequency Gram matrices.
    pub nu_quad_order: usize,
}

impl CollisionQuadSpec {
    /// Orders sufficient for exactness at polynomial degree `degree_cap`.
    pub fn for_degree(degree_cap: usize) -> Self {
        Self {
            n_h: degree_cap + 2,
            n_r: 2 * degree_cap + 2,
            n_polar: degree_cap + 2,
            n_azimuth: 2 * degree_cap + 2,
            n_s: degree_cap + 2,
            n_phi: 2 * degree_cap + 2,
            nu_quad_order: 24,
        }
    }

    fn cache_key(&self, degree_cap: usize) -> String {
        format!(
            "d{}_h{}_r{}_p{}_a{}_s{}_f{}_q{}",
            degree_cap,
            self.n_h,
            self.n_r,
            self.n_polar,
            self.n_azimuth,
            self.n_s,
            self.n_phi,
            self.nu_quad_order
        )
    }
}

/// Validity metrics of an assembled operator.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SpectralChecks {
    /// Relative Frobenius asymmetry before symmetrization.
    pub asymmetry: f64,
    /// Largest eigenvalue of the symmetrized operator.
    pub max_eigenvalue: f64,
    /// Spectral scale `max |eigenvalue|`.
    pub spectral_scale: f64,
    /// Number of eigenvalues with `|mu| <= 1e-6 * spectral_scale`.
    pub kernel_count: usize,
    /// Largest principal angle between the near-kernel eigenspace and `N`.
    pub kernel_angle: f64,
}

/// Galerkin matrices of the linearized collision operator together with the
/// collision-frequency forms and the discrete coercivity constant.
#[derive(Debug, Clone)]
pub struct CollisionOperator {
    /// `dim x dim` Gram matrix of multiplication by `nu(xi)` (one species block).
    pub nu_matrix: DMatrix<f64>,
    /// Gram matrix of multiplication by `1/nu(xi)`.
    pub nu_inv_matrix: DMatrix<f64>,
    /// `2 dim x 2 dim` matrix of `K = L + nu` on stacked two-species vectors.
    pub k_matrix: DMatrix<f64>,
    /// `2 dim x 2 dim` matrix of `L` on stacked two-species vectors.
    pub l_matrix: DMatrix<f64>,
    /// Discrete coercivity constant of `-L` against the nu-weighted norm on
    /// the microscopic subspace.
    pub lambda0: f64,
    /// Minimum of the collision frequency (attained at xi = 0).
    pub nu_min: f64,
    pub checks: SpectralChecks,
}

fn composite_radial_rules() -> &'static Vec<Rule1d> {
    // Reference pieces for the collision-frequency integral; see
    // `collision_frequency`. Offsets are relative to the kink at s = r.
    static RULES: OnceLock<Vec<Rule1d>> = OnceLock::new();
    RULES.get_or_init(|| {
        vec![
            gauss_legendre_on(48, 0.0, 1.0), // mapped onto [0, r]
            gauss_legendre_on(48, 0.0, 5.0), // [r, r+5]
            gauss_legendre_on(24, 5.0, 10.0),
            gauss_legendre_on(12, 10.0, 14.0),
        ]
    })
}

/// Hard-sphere collision frequency
/// `nu(xi) = int |(xi - xi_*) . omega| M(xi_*) domega dxi_*`.
///
/// The sphere integral of `|u . omega|` is `2 pi |u|`, which reduces the rest
/// to a 1D radial integral split at the kink `s = |xi|`:
/// `nu(r) = sqrt(2 pi)/3 [ (2/r) int_0^r s^2 (3 r^2 + s^2) e^{-s^2/2} ds
///                        + 2 int_r^inf s (3 s^2 + r^2) e^{-s^2/2} ds ]`.
pub fn collision_frequency(xi: [f64; 3]) -> f64 {
    let r = (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]).sqrt();
    let rules = composite_radial_rules();
    let mut total = 0.0;
    if r > 0.0 {
        let inner = &rules[0];
        let mut acc = 0.0;
        for (&x, &w) in inner.nodes.iter().zip(&inner.weights) {
            let s = x * r; // map [0,1] -> [0,r]
            acc += w * r * s * s * (3.0 * r * r + s * s) * (-0.5 * s * s).exp();
        }
        total += 2.0 * acc / r;
    }
    for piece in &rules[1..] {
        let mut acc = 0.0;
        for (&x, &w) in piece.nodes.iter().zip(&piece.weights) {
            let s = r + x;
            acc += w * s * (3.0 * s * s + r * r) * (-0.5 * s * s).exp();
        }
        total += 2.0 * acc;
    }
    (std::f64::consts::TAU).sqrt() / 3.0 * total
}

/// Gram matrix of multiplication by `f(|xi|)` on the basis, using an
/// independent (finer) Gauss-Hermite rule since `f` is not polynomial.
fn radial_weight_gram(
    basis: &VelocityBasis,
    order: usize,
    f: impl Fn(f64) -> f64,
) -> DMatrix<f64> {
    let rule = gauss_hermite_prob(order);
    let n1 = rule.len();
    let dim = basis.dim;
    let mut out = DMatrix::<f64>::zeros(dim, dim);
    let mut scratch = basis.eval_scratch();
    let mut p = vec![0.0; dim];
    for i in 0..n1 {
        for j in 0..n1 {
            for l in 0..n1 {
                let xi = [rule.nodes[i], rule.nodes[j], rule.nodes[l]];
                let w = rule.weights[i] * rule.weights[j] * rule.weights[l];
                let rad = (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]).sqrt();
                let wf = w * f(rad);
                basis.eval_polys_into(xi, &mut scratch, &mut p);
                for a in 0..dim {
                    let wa = wf * p[a];
                    for b in a..dim {
                        out[(a, b)] += wa * p[b];
                    }
                }
            }
        }
    }
    for a in 0..dim {
        for b in 0..a {
            out[(a, b)] = out[(b, a)];
        }
    }
    out
}

/// Species-block bilinear forms of the two linearized collision terms:
/// `a_form[alpha, beta] = <phi_a, 2 M^{-1/2} Q(M^{1/2} phi_b, M)>` and
/// `b_form[alpha, beta] = <phi_a, M^{-1/2} Q(M, M^{1/2} phi_b)>`.
fn assemble_species_forms(
    basis: &VelocityBasis,
    spec: &CollisionQuadSpec,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let dim = basis.dim;
    let gh = gauss_hermite_prob(spec.n_h);
    let radial = gauss_radial_relative(spec.n_r);
    let sphere = sphere_product(spec.n_polar, spec.n_azimuth);
    let s_rule = gauss_legendre_on(spec.n_s, 0.0, 1.0);
    let n_phi = spec.n_phi;
    let dphi = std::f64::consts::TAU / n_phi as f64;

    // h-measure e^{-|h|^2/4}: nodes sqrt(2) x, weights (2 sqrt(pi) w)^3 total.
    let n1 = gh.len();
    let mut h_nodes = Vec::with_capacity(n1 * n1 * n1);
    let mut h_weights = Vec::with_capacity(n1 * n1 * n1);
    let c1 = 2.0 * std::f64::consts::PI.sqrt();
    for i in 0..n1 {
        for j in 0..n1 {
            for l in 0..n1 {
                h_nodes.push([
                    2f64.sqrt() * gh.nodes[i],
                    2f64.sqrt() * gh.nodes[j],
                    2f64.sqrt() * gh.nodes[l],
                ]);
                h_weights.push(c1.powi(3) * gh.weights[i] * gh.weights[j] * gh.weights[l]);
            }
        }
    }

    let prefactor = (std::f64::consts::TAU).powi(-3) / 8.0;

    let partials: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..h_nodes.len())
        .into_par_iter()
        .map(|hi| {
            let h = h_nodes[hi];
            let wh = h_weights[hi];
            let mut a_loc = DMatrix::<f64>::zeros(dim, dim);
            let mut b_loc = DMatrix::<f64>::zeros(dim, dim);
            let mut scratch = basis.eval_scratch();
            let mut p_xi = vec![0.0; dim];
            let mut p_xis = vec![0.0; dim];
            let mut p_tmp = vec![0.0; dim];
            let mut y_a = vec![0.0; dim];
            let mut y_b = vec![0.0; dim];
            for (&r, &wr) in radial.nodes.iter().zip(&radial.weights) {
                for (ghat, &wg) in sphere.points.iter().zip(&sphere.weights) {
                    let g = [r * ghat[0], r * ghat[1], r * ghat[2]];
                    let xi = [
                        0.5 * (h[0] + g[0]),
                        0.5 * (h[1] + g[1]),
                        0.5 * (h[2] + g[2]),
                    ];
                    let xis = [
                        0.5 * (h[0] - g[0]),
                        0.5 * (h[1] - g[1]),
                        0.5 * (h[2] - g[2]),
                    ];
                    basis.eval_polys_into(xi, &mut scratch, &mut p_xi);
                    basis.eval_polys_into(xis, &mut scratch, &mut p_xis);
                    let (e1, e2) = orthonormal_frame(*ghat);
                    y_a.iter_mut().for_each(|v| *v = 0.0);
                    y_b.iter_mut().for_each(|v| *v = 0.0);
                    for (&s, &ws) in s_rule.nodes.iter().zip(&s_rule.weights) {
                        let st = (1.0 - s * s).max(0.0).sqrt();
                        for sign in [1.0f64, -1.0] {
                            let ss = sign * s;
                            for jphi in 0..n_phi {
                                let phi = dphi * jphi as f64;
                                let (cp, sp) = (phi.cos(), phi.sin());
                                let omega = [
                                    ss * ghat[0] + st * (cp * e1[0] + sp * e2[0]),
                                    ss * ghat[1] + st * (cp * e1[1] + sp * e2[1]),
                                    ss * ghat[2] + st * (cp * e1[2] + sp * e2[2]),
                                ];
                                // transfer d = (g . omega) omega, g . omega = r ss
                                let t = r * ss;
                                let d = [t * omega[0], t * omega[1], t * omega[2]];
                                let w_om = ws * s * dphi;
                                let xi_p = [xi[0] - d[0], xi[1] - d[1], xi[2] - d[2]];
                                basis.eval_polys_into(xi_p, &mut scratch, &mut p_tmp);
                                for m in 0..dim {
                                    y_a[m] += w_om * (p_tmp[m] - p_xi[m]);
                                }
                                let xis_p = [xis[0] + d[0], xis[1] + d[1], xis[2] + d[2]];
                                basis.eval_polys_into(xis_p, &mut scratch, &mut p_tmp);
                                for m in 0..dim {
                                    y_b[m] += w_om * (p_tmp[m] - p_xis[m]);
                                }
                            }
                        }
                    }
                    let w = prefactor * wh * wr * wg;
                    for a in 0..dim {
                        let wa2 = 2.0 * w * p_xi[a];
                        let wa = w * p_xi[a];
                        for b in 0..dim {
                            a_loc[(a, b)] += wa2 * y_a[b];
                            b_loc[(a, b)] += wa * y_b[b];
                        }
                    }
                }
            }
            (a_loc, b_loc)
        })
        .collect();

    let mut a_form = DMatrix::<f64>::zeros(dim, dim);
    let mut b_form = DMatrix::<f64>::zeros(dim, dim);
    for (a_loc, b_loc) in partials {
        a_form += a_loc;
        b_form += b_loc;
    }
    (a_form, b_form)
}

fn stack_blocks(pp: &DMatrix<f64>, pm: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = pp.nrows();
    let mut out = DMatrix::<f64>::zeros(2 * dim, 2 * dim);
    out.view_mut((0, 0), (dim, dim)).copy_from(pp);
    out.view_mut((0, dim), (dim, dim)).copy_from(pm);
    out.view_mut((dim, 0), (dim, dim)).copy_from(pm);
    out.view_mut((dim, dim), (dim, dim)).copy_from(pp);
    out
}

/// Largest coefficient `lambda0` with
/// `-<u, L u> >= lambda0 <nu {I-P} u, {I-P} u>` on the discrete space: the
/// minimum generalized Rayleigh quotient of `-L` against the nu-weighted Gram
/// restricted to the microscopic subspace.
pub fn coercivity_constant(
    l_matrix: &DMatrix<f64>,
    nu_matrix: &DMatrix<f64>,
    basis: &VelocityBasis,
) -> f64 {
    let dim = basis.dim;
    let n2 = 2 * dim;
    let null = basis.null_space_stacked();
    let mut proj = DMatrix::<f64>::identity(n2, n2);
    for psi in &null {
        proj -= psi * psi.transpose();
    }
    let eig = proj.symmetric_eigen();
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(n2 - 6);
    for j in 0..n2 {
        if eig.eigenvalues[j] > 0.5 {
            cols.push(eig.eigenvectors.column(j).into_owned());
        }
    }
    let micro = DMatrix::<f64>::from_columns(&cols);

    let nu2 = stack_blocks(nu_matrix, &DMatrix::zeros(dim, dim));
    let a_red = micro.transpose() * (-l_matrix) * &micro;
    let b_red = micro.transpose() * nu2 * &micro;
    let chol = b_red
        .clone()
        .cholesky()
        .expect("nu-weighted Gram must be positive definite");
    // lambda0 = min eig of R^{-T} A R^{-1}.
    let linv = chol.l().try_inverse().expect("triangular inverse");
    let reduced = &linv * a_red * linv.transpose();
    let sym = (&reduced + reduced.transpose()) * 0.5;
    let vals = sym.symmetric_eigen().eigenvalues;
    vals.iter().cloned().fold(f64::INFINITY, f64::min)
}

fn spectral_checks(
    l_sym: &DMatrix<f64>,
    asymmetry: f64,
    basis: &VelocityBasis,
) -> SpectralChecks {
    let eig = l_sym.clone().symmetric_eigen();
    let n = eig.eigenvalues.len();
    let spectral_scale = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    let max_eigenvalue = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-6 * spectral_scale;
    let mut kernel_cols = Vec::new();
    for j in 0..n {
        if eig.eigenvalues[j].abs() <= tol {
            kernel_cols.push(eig.eigenvectors.column(j).into_owned());
        }
    }
    let kernel_angle = if kernel_cols.len() == 6 {
        let null = basis.null_space_stacked();
        let mut overlap = DMatrix::<f64>::zeros(6, 6);
        for (i, psi) in null.iter().enumerate() {
            for (j, v) in kernel_cols.iter().enumerate() {
                overlap[(i, j)] = psi.dot(v);
            }
        }
        let svd = overlap.svd(false, false);
        let sigma_min = svd
            .singular_values
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        sigma_min.min(1.0).acos()
    } else {
        f64::NAN
    };
    SpectralChecks {
        asymmetry,
        max_eigenvalue,
        spectral_scale,
        kernel_count: kernel_cols.len(),
        kernel_angle,
    }
}

/// Assembles the two-species operator and validates the spectral invariants;
/// fails if symmetry, semidefiniteness, the 6-dimensional kernel, or the
/// coercivity constant are violated.
pub fn assemble_l(
    basis: &VelocityBasis,
    spec: &CollisionQuadSpec,
) -> Result<CollisionOperator, CollisionError> {
    let (a_form, b_form) = assemble_species_forms(basis, spec);
    let pp = &a_form + &b_form;
    let l_raw = stack_blocks(&pp, &b_form);
    let asymmetry = {
        let diff = &l_raw - l_raw.transpose();
        let denom = l_raw.norm();
        if denom > 0.0 {
            diff.norm() / denom
        } else {
            0.0
        }
    };
    let l_matrix = (&l_raw + l_raw.transpose()) * 0.5;
    finish_operator(basis, spec, l_matrix, asymmetry)
}

fn finish_operator(
    basis: &VelocityBasis,
    spec: &CollisionQuadSpec,
    l_matrix: DMatrix<f64>,
    asymmetry: f64,
) -> Result<CollisionOperator, CollisionError> {
    if asymmetry > 1e-8 {
        return Err(CollisionError::AsymmetryTooLarge { asymmetry });
    }
    let checks = spectral_checks(&l_matrix, asymmetry, basis);
    if checks.max_eigenvalue > 1e-8 * checks.spectral_scale {
        return Err(CollisionError::NotNegativeSemidefinite {
            max_eigenvalue: checks.max_eigenvalue,
            scale: checks.spectral_scale,
        });
    }
    if checks.kernel_count != 6 {
        return Err(CollisionError::KernelDimension {
            found: checks.kernel_count,
            tol: 1e-6 * checks.spectral_scale,
        });
    }
    if !(checks.kernel_angle < 1e-6) {
        return Err(CollisionError::KernelAngle {
            angle: checks.kernel_angle,
        });
    }

    let nu_matrix = radial_weight_gram(basis, spec.nu_quad_order, collision_frequency_radial);
    let nu_inv_matrix =
        radial_weight_gram(basis, spec.nu_quad_order, |r| 1.0 / collision_frequency_radial(r));
    let lambda0 = coercivity_constant(&l_matrix, &nu_matrix, basis);
    if lambda0 <= 0.0 {
        return Err(CollisionError::CoercivityNonPositive(lambda0));
    }

    let dim = basis.dim;
    let mut k_matrix = l_matrix.clone();
    for s in 0..2 {
        for a in 0..dim {
            for b in 0..dim {
                k_matrix[(s * dim + a, s * dim + b)] += nu_matrix[(a, b)];
            }
        }
    }
    Ok(CollisionOperator {
        nu_matrix,
        nu_inv_matrix,
        k_matrix,
        l_matrix,
        lambda0,
        nu_min: collision_frequency([0.0, 0.0, 0.0]),
        checks,
    })
}

fn collision_frequency_radial(r: f64) -> f64 {
    collision_frequency([r, 0.0, 0.0])
}

impl CollisionOperator {
    pub fn dim(&self) -> usize {
        self.nu_matrix.nrows()
    }

    /// Applies `L` to a two-species coefficient vector.
    pub fn apply<S: Scalar>(&self, u: &TwoSpecies<S>) -> TwoSpecies<S> {
        let dim = self.dim();
        let mut out = TwoSpecies::zeros(dim);
        for a in 0..dim {
            let mut acc_p = S::zero();
            let mut acc_m = S::zero();
            for b in 0..dim {
                acc_p += u.plus[b].clone() * S::from_real(self.l_matrix[(a, b)])
                    + u.minus[b].clone() * S::from_real(self.l_matrix[(a, dim + b)]);
                acc_m += u.plus[b].clone() * S::from_real(self.l_matrix[(dim + a, b)])
                    + u.minus[b].clone() * S::from_real(self.l_matrix[(dim + a, dim + b)]);
            }
            out.plus[a] = acc_p;
            out.minus[a] = acc_m;
        }
        out
    }

    /// `<u, L u>` (real for complex inputs since `L` is real symmetric).
    pub fn quadratic_form<S: Scalar>(&self, u: &TwoSpecies<S>) -> f64 {
        let lu = self.apply(u);
        let mut acc = 0.0;
        for i in 0..self.dim() {
            acc += (u.plus[i].clone().conjugate() * lu.plus[i].clone()).real()
                + (u.minus[i].clone().conjugate() * lu.minus[i].clone()).real();
        }
        acc
    }

    /// `|| nu^{1/2} u ||^2` through the nu-weighted Gram matrix.
    pub fn nu_norm_squared<S: Scalar>(&self, u: &TwoSpecies<S>) -> f64 {
        weighted_norm_squared(&self.nu_matrix, u)
    }

    /// `|| nu^{-1/2} u ||^2`.
    pub fn nu_inv_norm_squared<S: Scalar>(&self, u: &TwoSpecies<S>) -> f64 {
        weighted_norm_squared(&self.nu_inv_matrix, u)
    }
}

fn weighted_norm_squared<S: Scalar>(w: &DMatrix<f64>, u: &TwoSpecies<S>) -> f64 {
    let dim = w.nrows();
    let mut acc = 0.0;
    for a in 0..dim {
        for b in 0..dim {
            let wab = w[(a, b)];
            acc += wab
                * ((u.plus[a].clone().conjugate() * u.plus[b].clone()).real()
                    + (u.minus[a].clone().conjugate() * u.minus[b].clone()).real());
        }
    }
    acc
}

/// Writes the assembled matrices in the textual cache format: a key header
/// followed by row-major `%.17e` values (round-trip exact for f64).
pub fn write_cache(
    op: &CollisionOperator,
    basis: &VelocityBasis,
    spec: &CollisionQuadSpec,
    dir: &Path,
) -> Result<PathBuf, CollisionError> {
    std::fs::create_dir_all(dir)?;
    let key = spec.cache_key(basis.degree_cap);
    let path = dir.join(format!("collision_{key}.txt"));
    let mut text = String::new();
    writeln!(text, "vmb-collision-cache v1 {key} dim={}", basis.dim).unwrap();
    for (name, m) in [("NU", &op.nu_matrix), ("NU_INV", &op.nu_inv_matrix), ("L", &op.l_matrix)] {
        writeln!(text, "{name} {} {}", m.nrows(), m.ncols()).unwrap();
        for i in 0..m.nrows() {
            let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:.17e}", m[(i, j)])).collect();
            writeln!(text, "{}", row.join(" ")).unwrap();
        }
    }
    std::fs::write(&path, text)?;
    Ok(path)
}

fn parse_matrix(
    lines: &mut std::str::Lines,
    name: &str,
) -> Result<DMatrix<f64>, CollisionError> {
    let head = lines
        .next()
        .ok_or_else(|| CollisionError::CacheParse(format!("missing {name} header")))?;
    let mut parts = head.split_whitespace();
    let got = parts.next().unwrap_or("");
    if got != name {
        return Err(CollisionError::CacheParse(format!(
            "expected section {name}, found {got}"
        )));
    }
    let rows: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CollisionError::CacheParse("bad row count".into()))?;
    let cols: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CollisionError::CacheParse("bad col count".into()))?;
    let mut m = DMatrix::<f64>::zeros(rows, cols);
    for i in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| CollisionError::CacheParse(format!("{name} truncated at row {i}")))?;
        let mut vals = line.split_whitespace();
        for j in 0..cols {
            let v = vals
                .next()
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| CollisionError::CacheParse(format!("{name} bad value at ({i},{j})")))?;
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

/// Reads a cached operator; the key must match `(degree_cap, quadrature)`.
/// Spectral checks and the coercivity constant are recomputed, so a cache hit
/// reproduces the assembled operator exactly.
pub fn read_cache(
    basis: &VelocityBasis,
    spec: &CollisionQuadSpec,
    path: &Path,
) -> Result<CollisionOperator, CollisionError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CollisionError::CacheParse("empty cache file".into()))?;
    let expected = spec.cache_key(basis.degree_cap);
    let mut parts = header.split_whitespace();
    let magic = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
    if magic != ("vmb-collision-cache", "v1") {
        return Err(CollisionError::CacheParse("bad magic".into()));
    }
    let found = parts.next().unwrap_or("").to_string();
    if found != expected {
        return Err(CollisionError::CacheKeyMismatch { expected, found });
    }
    let nu_matrix = parse_matrix(&mut lines, "NU")?;
    let nu_inv_matrix = parse_matrix(&mut lines, "NU_INV")?;
    let l_matrix = parse_matrix(&mut lines, "L")?;
    let checks = spectral_checks(&l_matrix, 0.0, basis);
    let lambda0 = coercivity_constant(&l_matrix, &nu_matrix, basis);
    let dim = basis.dim;
    let mut k_matrix = l_matrix.clone();
    for s in 0..2 {
        for a in 0..dim {
            for b in 0..dim {
                k_matrix[(s * dim + a, s * dim + b)] += nu_matrix[(a, b)];
            }
        }
    }
    Ok(CollisionOperator {
        nu_matrix,
        nu_inv_matrix,
        k_matrix,
        l_matrix,
        lambda0,
        nu_min: collision_frequency([0.0, 0.0, 0.0]),
        checks,
    })
}

/// Assembles through the cache directory: hit if the keyed file exists.
/// Returns the operator and whether it was read from cache.
pub fn assemble_l_cached(
    basis: &VelocityBasis,
    spec: &CollisionQuadSpec,
    dir: &Path,
) -> Result<(CollisionOperator, bool), CollisionError> {
    let key = spec.cache_key(basis.degree_cap);
    let path = dir.join(format!("collision_{key}.txt"));
    if path.exists() {
        return Ok((read_cache(basis, spec, &path)?, true));
    }
    let op = assemble_l(basis, spec)?;
    write_cache(&op, basis, spec, dir)?;
    Ok((op, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::build_basis;
    use approx::assert_relative_eq;
    use num_complex::Complex64;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn fixture3() -> &'static (VelocityBasis, CollisionOperator) {
        crate::test_fixtures::deg3()
    }

    #[test]
    fn nu_at_zero_matches_monte_carlo_of_defining_integral() {
        // Seeded Monte-Carlo oracle over (xi_*, omega) of the double integral.
        let mut rng = ChaCha12Rng::seed_from_u64(2024);
        let n = 1_000_000usize;
        let mut acc = 0.0;
        for _ in 0..n {
            let xs: [f64; 3] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            let z: f64 = rng.random_range(-1.0..1.0);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let st = (1.0 - z * z).sqrt();
            let omega = [st * phi.cos(), st * phi.sin(), z];
            let dot = xs[0] * omega[0] + xs[1] * omega[1] + xs[2] * omega[2];
            acc += 4.0 * std::f64::consts::PI * dot.abs();
        }
        let mc = acc / n as f64;
        let nu0 = collision_frequency([0.0, 0.0, 0.0]);
        assert!(
            (nu0 - mc).abs() / mc < 3e-3,
            "nu(0) = {nu0}, MC = {mc}"
        );
        // nu(0) = 2 pi E|Z| = 4 sqrt(2 pi) analytically.
        assert_relative_eq!(nu0, 4.0 * std::f64::consts::TAU.sqrt(), max_relative = 1e-10);
    }

    #[test]
    fn nu_growth_band_and_symmetry() {
        // nu(xi) ~ (1 + |xi|^2)^{1/2}: fixed ratio band on |xi| <= 8.
        for i in 0..=40 {
            let r = 8.0 * i as f64 / 40.0;
            let ratio = collision_frequency([r, 0.0, 0.0]) / (1.0 + r * r).sqrt();
            assert!(ratio > 6.2 && ratio < 10.1, "ratio {ratio} at r = {r}");
        }
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..20 {
            let xi: [f64; 3] = [
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
            ];
            let neg = [-xi[0], -xi[1], -xi[2]];
            assert_relative_eq!(
                collision_frequency(xi),
                collision_frequency(neg),
                max_relative = 1e-12
            );
            assert!(collision_frequency(xi) > 0.0);
        }
    }

    #[test]
    fn operator_annihilates_collision_invariants() {
        let (basis, op) = fixture3();
        let scale = op.checks.spectral_scale;
        for psi in basis.null_space_stacked() {
            let out = &op.l_matrix * &psi;
            assert!(out.norm() <= 1e-8 * scale, "L psi = {}", out.norm());
        }
        // Spec examples: mass in both species, momentum in both species.
        let dim = basis.dim;
        let mut mass = TwoSpecies::<f64>::zeros(dim);
        mass.plus += basis.psi_mass();
        mass.minus += basis.psi_mass();
        let lm = op.apply(&mass);
        assert!(lm.norm() <= 1e-8 * scale);
        let mut mom = TwoSpecies::<f64>::zeros(dim);
        mom.plus += basis.psi_xi(0);
        mom.minus += basis.psi_xi(0);
        let lm = op.apply(&mom);
        assert!(lm.norm() <= 1e-8 * scale);
    }

    #[test]
    fn spectral_invariants_hold() {
        let (_, op) = fixture3();
        assert!(op.checks.asymmetry <= 1e-8);
        assert!(op.checks.max_eigenvalue <= 1e-8 * op.checks.spectral_scale);
        assert_eq!(op.checks.kernel_count, 6);
        assert!(op.checks.kernel_angle < 1e-6);
        assert!(op.lambda0 > 0.0);
    }

    #[test]
    fn monte_carlo_oracle_matches_selected_entry() {
        // Independent 6D Monte-Carlo of the linearized collision integral for
        // one Galerkin entry of the same-species block; documented seed 7.
        let (basis, op) = fixture3();
        // alpha = beta = multi-index (0,1,1): a mid-degree diagonal entry.
        let idx = basis
            .indices
            .iter()
            .position(|&m| m == [0, 1, 1])
            .unwrap();
        let exact = op.l_matrix[(idx, idx)];
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let n = 6_000_000usize;
        let mut acc = 0.0;
        for _ in 0..n {
            let mut xi = [0.0; 3];
            let mut xs = [0.0; 3];
            for a in 0..3 {
                xi[a] = rng.sample(StandardNormal);
                xs[a] = rng.sample(StandardNormal);
            }
            let z: f64 = rng.random_range(-1.0..1.0);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let st = (1.0 - z * z).sqrt();
            let omega = [st * phi.cos(), st * phi.sin(), z];
            let u = [xi[0] - xs[0], xi[1] - xs[1], xi[2] - xs[2]];
            let t = u[0] * omega[0] + u[1] * omega[1] + u[2] * omega[2];
            let d = [t * omega[0], t * omega[1], t * omega[2]];
            let xi_p = [xi[0] - d[0], xi[1] - d[1], xi[2] - d[2]];
            let xs_p = [xs[0] + d[0], xs[1] + d[1], xs[2] + d[2]];
            let p = |x: [f64; 3]| basis.eval_polys(x)[idx];
            let gain_a = p(xi_p) - p(xi);
            let gain_b = p(xs_p) - p(xs);
            acc += 4.0 * std::f64::consts::PI * t.abs() * p(xi) * (2.0 * gain_a + gain_b);
        }
        let mc = acc / n as f64;
        assert!(
            (mc - exact).abs() / exact.abs() < 0.01,
            "entry {exact}, MC {mc}"
        );
    }

    #[test]
    fn self_adjoint_and_dissipative_on_complex_vectors() {
        let (basis, op) = fixture3();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let dim = basis.dim;
        for _ in 0..20 {
            let mut u = TwoSpecies::<Complex64>::zeros(dim);
            let mut v = TwoSpecies::<Complex64>::zeros(dim);
            for i in 0..dim {
                u.plus[i] = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                u.minus[i] = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                v.plus[i] = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                v.minus[i] = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            }
            let lu = op.apply(&u);
            let lv = op.apply(&v);
            let inner = |a: &TwoSpecies<Complex64>, b: &TwoSpecies<Complex64>| {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..dim {
                    acc += a.plus[i] * b.plus[i].conj() + a.minus[i] * b.minus[i].conj();
                }
                acc
            };
            let asym = (inner(&lu, &v) - inner(&u, &lv)).norm();
            assert!(asym <= 1e-8 * u.norm() * v.norm());
            assert!(inner(&lu, &u).re <= 1e-10);
        }
    }

    #[test]
    fn projection_of_l_u_is_zero() {
        let (basis, op) = fixture3();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..20 {
            let u = TwoSpecies::<f64> {
                plus: DVector::from_fn(basis.dim, |_, _| rng.random_range(-1.0..1.0)),
                minus: DVector::from_fn(basis.dim, |_, _| rng.random_range(-1.0..1.0)),
            };
            let lu = op.apply(&u);
            let (m, _) = basis.project_p(&lu);
            let macro_norm = (m.a_plus.powi(2)
                + m.a_minus.powi(2)
                + m.b.norm_squared()
                + m.c.powi(2))
            .sqrt();
            assert!(macro_norm <= 1e-8 * op.checks.spectral_scale * u.norm());
        }
    }

    #[test]
    fn species_swap_commutes_with_l() {
        let (basis, op) = fixture3();
        let dim = basis.dim;
        let pp = op.l_matrix.view((0, 0), (dim, dim));
        let mm = op.l_matrix.view((dim, dim), (dim, dim));
        let pm = op.l_matrix.view((0, dim), (dim, dim));
        let mp = op.l_matrix.view((dim, 0), (dim, dim));
        assert!((pp - mm).norm() <= 1e-12 * op.checks.spectral_scale);
        assert!((pm - mp).norm() <= 1e-12 * op.checks.spectral_scale);
    }

    #[test]
    fn coercivity_holds_on_random_microscopic_vectors() {
        let (basis, op) = fixture3();
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for _ in 0..100 {
            let u = TwoSpecies::<f64> {
                plus: DVector::from_fn(basis.dim, |_, _| rng.random_range(-1.0..1.0)),
                minus: DVector::from_fn(basis.dim, |_, _| rng.random_range(-1.0..1.0)),
            };
            let (_, micro) = basis.project_p(&u);
            let lhs = -op.quadratic_form(&micro);
            let rhs = op.lambda0 * op.nu_norm_squared(&micro);
            assert!(lhs >= rhs - 1e-10 * micro.norm_squared().max(1e-30));
        }
    }

    #[test]
    fn lambda0_non_increasing_in_degree() {
        let (_, op3) = fixture3();
        let (_, op4) = crate::test_fixtures::deg4();
        assert!(op4.lambda0 <= op3.lambda0 + 1e-10);
        let basis5 = build_basis(5, 10).unwrap();
        let op5 = assemble_l(&basis5, &CollisionQuadSpec::for_degree(5)).unwrap();
        assert!(op5.lambda0 <= op4.lambda0 + 1e-10);
        assert!(op5.lambda0 > 0.0);
    }

    #[test]
    fn quadrature_doubling_reproduces_matrices() {
        // The product rule is exact for the polynomial degree, so raising
        // every order must only move the entries at rounding level.
        let (basis, op) = fixture3();
        let mut spec = CollisionQuadSpec::for_degree(3);
        spec.n_h += 2;
        spec.n_r += 3;
        spec.n_polar += 2;
        spec.n_azimuth += 3;
        spec.n_s += 2;
        spec.n_phi += 3;
        let refined = assemble_l(basis, &spec).unwrap();
        let scale = op.checks.spectral_scale;
        assert!((&refined.l_matrix - &op.l_matrix).norm() <= 1e-10 * scale);
    }

    #[test]
    fn cache_round_trip_is_exact() {
        let (basis, op) = fixture3();
        let spec = CollisionQuadSpec::for_degree(3);
        let dir = std::env::temp_dir().join("vmb_cache_test");
        let path = write_cache(op, basis, &spec, &dir).unwrap();
        let reread = read_cache(basis, &spec, &path).unwrap();
        assert_eq!(op.l_matrix, reread.l_matrix);
        assert_eq!(op.nu_matrix, reread.nu_matrix);
        assert_eq!(op.nu_inv_matrix, reread.nu_inv_matrix);
        assert_eq!(op.lambda0, reread.lambda0);
        // Key mismatch is rejected.
        let other = CollisionQuadSpec::for_degree(4);
        assert!(matches!(
            read_cache(basis, &other, &path),
            Err(CollisionError::CacheKeyMismatch { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }
}
