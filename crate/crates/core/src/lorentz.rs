//! Exact-signature linear algebra for R^{n+1,1} in the null-extended basis
//! {v0, e_1..e_n, vinf}.
//!
//! The Gram matrix is fixed once and for all: (v0, vinf) = (vinf, v0) = -1,
//! (e_i, e_j) = delta_ij, every other pairing zero. Signature (n+1, 1).
//! Index layout: coordinate 0 is the v0 component, 1..=n the Euclidean
//! components, n+1 the vinf component.

use nalgebra::{DMatrix, DVector};

use crate::error::{GeomError, Result};

/// Relative tolerance below which a vector counts as null.
pub const NULL_TOL: f64 = 1e-10;

/// Gram-orthogonality tolerance for maps produced by this module.
pub const ORTHO_TOL: f64 = 1e-10;

/// Element of R^{n+1,1} in the fixed basis {v0, e_1..e_n, vinf}.
#[derive(Debug, Clone, PartialEq)]
pub struct LorentzVector {
    coords: DVector<f64>,
}

impl LorentzVector {
    /// Wraps raw coordinates. Rejects non-finite entries and dimensions
    /// below 3 (n >= 1).
    pub fn new(coords: DVector<f64>) -> Result<Self> {
        if coords.len() < 3 {
            return Err(GeomError::DimensionMismatch(coords.len(), 3));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(GeomError::NonFinite);
        }
        Ok(Self { coords })
    }

    pub fn from_slice(coords: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(coords))
    }

    pub fn zeros(ambient_n: usize) -> Self {
        Self { coords: DVector::zeros(ambient_n + 2) }
    }

    /// Basis vector v0 (origin of the flat chart).
    pub fn v0(ambient_n: usize) -> Self {
        let mut c = DVector::zeros(ambient_n + 2);
        c[0] = 1.0;
        Self { coords: c }
    }

    /// Basis vector vinf (point at infinity of the flat chart).
    pub fn vinf(ambient_n: usize) -> Self {
        let mut c = DVector::zeros(ambient_n + 2);
        let len = c.len();
        c[len - 1] = 1.0;
        Self { coords: c }
    }

    /// Euclidean basis vector e_i, 1-based.
    pub fn e(ambient_n: usize, i: usize) -> Self {
        assert!(i >= 1 && i <= ambient_n, "e_i index out of range");
        let mut c = DVector::zeros(ambient_n + 2);
        c[i] = 1.0;
        Self { coords: c }
    }

    /// Embeds a Euclidean vector x into the e-block (v0 and vinf parts zero).
    pub fn from_euclidean(x: &DVector<f64>) -> Self {
        let n = x.len();
        let mut c = DVector::zeros(n + 2);
        for i in 0..n {
            c[i + 1] = x[i];
        }
        Self { coords: c }
    }

    pub fn ambient_n(&self) -> usize {
        self.coords.len() - 2
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    pub fn v0_comp(&self) -> f64 {
        self.coords[0]
    }

    pub fn vinf_comp(&self) -> f64 {
        self.coords[self.coords.len() - 1]
    }

    /// The Euclidean block e_1..e_n.
    pub fn euclidean_part(&self) -> DVector<f64> {
        let n = self.ambient_n();
        DVector::from_fn(n, |i, _| self.coords[i + 1])
    }

    /// Euclidean norm of the raw coordinates (not the Lorentz form).
    pub fn coord_norm(&self) -> f64 {
        self.coords.norm()
    }

    /// Whether |(v,v)| <= NULL_TOL * |v|^2 in coordinate norm.
    pub fn is_null(&self) -> bool {
        let n2 = self.coords.norm_squared();
        inner(self, self).abs() <= NULL_TOL * n2
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { coords: &self.coords * s }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self { coords: &self.coords + &other.coords }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self { coords: &self.coords - &other.coords }
    }

    pub fn axpy(&mut self, a: f64, x: &Self) {
        self.coords.axpy(a, &x.coords, 1.0);
    }
}

/// Lorentzian inner product under the fixed Gram matrix.
pub fn inner(x: &LorentzVector, y: &LorentzVector) -> f64 {
    debug_assert_eq!(x.dim(), y.dim(), "lorentz inner: dimension mismatch");
    let n = x.ambient_n();
    let mut s = 0.0;
    for i in 1..=n {
        s += x.coords[i] * y.coords[i];
    }
    s - x.coords[0] * y.coords[n + 1] - x.coords[n + 1] * y.coords[0]
}

/// Checked variant of [`inner`] for public API boundaries.
pub fn inner_checked(x: &LorentzVector, y: &LorentzVector) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(GeomError::DimensionMismatch(x.dim(), y.dim()));
    }
    Ok(inner(x, y))
}

/// Gram matrix G of the basis, as a dense matrix (for map-level identities).
pub fn gram_matrix(dim: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(dim, dim);
    for i in 1..dim - 1 {
        g[(i, i)] = 1.0;
    }
    g[(0, dim - 1)] = -1.0;
    g[(dim - 1, 0)] = -1.0;
    g
}

/// Applies the Gram matrix: returns the covector Gx as a column.
pub fn gram_apply(x: &LorentzVector) -> DVector<f64> {
    let n = x.ambient_n();
    let mut out = DVector::zeros(n + 2);
    for i in 1..=n {
        out[i] = x.coords[i];
    }
    out[0] = -x.coords[n + 1];
    out[n + 1] = -x.coords[0];
    out
}

/// (u wedge v) w = (u,w) v - (v,w) u.
pub fn wedge_apply(u: &LorentzVector, v: &LorentzVector, w: &LorentzVector) -> LorentzVector {
    let a = inner(u, w);
    let b = inner(v, w);
    let mut out = v.scale(a);
    out.axpy(-b, u);
    out
}

/// Skew endomorphism represented as a sum of wedges u_k wedge v_k.
#[derive(Debug, Clone, Default)]
pub struct Bivector {
    terms: Vec<(LorentzVector, LorentzVector)>,
}

impl Bivector {
    pub fn zero() -> Self {
        Self { terms: Vec::new() }
    }

    pub fn wedge(u: LorentzVector, v: LorentzVector) -> Self {
        Self { terms: vec![(u, v)] }
    }

    pub fn push(&mut self, u: LorentzVector, v: LorentzVector) {
        self.terms.push((u, v));
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            terms: self
                .terms
                .iter()
                .map(|(u, v)| (u.scale(s), v.clone()))
                .collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn apply(&self, w: &LorentzVector) -> LorentzVector {
        let mut out = LorentzVector::zeros(w.ambient_n());
        for (u, v) in &self.terms {
            let a = inner(u, w);
            let b = inner(v, w);
            out.axpy(a, v);
            out.axpy(-b, u);
        }
        out
    }

    /// Dense matrix of the skew map: sum of v (Gu)^T - u (Gv)^T.
    pub fn to_matrix(&self, dim: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(dim, dim);
        for (u, v) in &self.terms {
            let gu = gram_apply(u);
            let gv = gram_apply(v);
            m.ger(1.0, v.coords(), &gu, 1.0);
            m.ger(-1.0, u.coords(), &gv, 1.0);
        }
        m
    }
}

/// Gram-skewness defect of a matrix: max entry of G M + M^T G.
pub fn gram_skew_residual(m: &DMatrix<f64>) -> f64 {
    let g = gram_matrix(m.nrows());
    let s = &g * m + m.transpose() * &g;
    s.amax()
}

/// Linear map preserving the Gram form (to within a checked tolerance).
#[derive(Debug, Clone)]
pub struct OrthogonalMap {
    matrix: DMatrix<f64>,
}

impl OrthogonalMap {
    pub fn identity(dim: usize) -> Self {
        Self { matrix: DMatrix::identity(dim, dim) }
    }

    /// Wraps a matrix, verifying Gram orthogonality.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let m = Self { matrix };
        let r = m.gram_residual();
        if r > 1e-6 {
            return Err(GeomError::Invalid(format!(
                "matrix is not Gram-orthogonal: residual {r:e}"
            )));
        }
        Ok(m)
    }

    /// Wraps without the orthogonality check (for internally derived maps).
    pub fn from_matrix_unchecked(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, x: &LorentzVector) -> LorentzVector {
        LorentzVector { coords: &self.matrix * x.coords() }
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self { matrix: &self.matrix * &other.matrix }
    }

    /// Inverse via the Gram form: M^{-1} = G^{-1} M^T G (G is an involution
    /// composed with a swap here, so no factorization is needed).
    pub fn inverse(&self) -> Self {
        let g = gram_matrix(self.dim());
        // G^{-1} = G for this Gram matrix: G swaps v0/vinf with sign -1 and
        // squares to the identity.
        let inv = &g * self.matrix.transpose() * &g;
        Self { matrix: inv }
    }

    /// max |(M e_i, M e_j) - (e_i, e_j)| over basis pairs.
    pub fn gram_residual(&self) -> f64 {
        let g = gram_matrix(self.dim());
        let d = self.matrix.transpose() * &g * &self.matrix - &g;
        d.amax()
    }

    pub fn conjugate_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        &self.matrix * m * self.inverse().matrix
    }
}

/// Space form E(w) = { v null : (v, w) = -1 }, sectional curvature -(w,w).
#[derive(Debug, Clone)]
pub struct SpaceForm {
    pub w: LorentzVector,
}

impl SpaceForm {
    pub fn new(w: LorentzVector) -> Result<Self> {
        if w.coord_norm() == 0.0 {
            return Err(GeomError::Invalid("space-form vector must be non-zero".into()));
        }
        Ok(Self { w })
    }

    pub fn curvature(&self) -> f64 {
        -inner(&self.w, &self.w)
    }

    /// Membership defect of v in E(w): (|(v,v)|, |(v,w)+1|).
    pub fn membership_defect(&self, v: &LorentzVector) -> (f64, f64) {
        (inner(v, v).abs(), (inner(v, &self.w) + 1.0).abs())
    }
}

/// Null pair (origin, infinity) with (origin, infinity) = -1; fixes the flat
/// chart used for lifts and stereoprojection.
#[derive(Debug, Clone)]
pub struct SpaceFormChart {
    pub origin: LorentzVector,
    pub infinity: LorentzVector,
}

impl SpaceFormChart {
    pub fn new(origin: LorentzVector, infinity: LorentzVector) -> Result<Self> {
        let p = inner(&origin, &infinity);
        if !origin.is_null() {
            return Err(GeomError::NotNull(inner(&origin, &origin).abs()));
        }
        if !infinity.is_null() {
            return Err(GeomError::NotNull(inner(&infinity, &infinity).abs()));
        }
        if (p + 1.0).abs() > 1e-9 {
            return Err(GeomError::Invalid(format!(
                "chart pair must satisfy (origin, infinity) = -1, got {p}"
            )));
        }
        Ok(Self { origin, infinity })
    }

    /// Standard chart: origin = v0, infinity = vinf.
    pub fn standard(ambient_n: usize) -> Self {
        Self {
            origin: LorentzVector::v0(ambient_n),
            infinity: LorentzVector::vinf(ambient_n),
        }
    }

    /// Chart with the roles of v0 and vinf swapped (Christoffel side).
    pub fn swapped(&self) -> Self {
        Self { origin: self.infinity.clone(), infinity: self.origin.clone() }
    }
}

/// Lift of a Euclidean point into the cone: origin + x + (x,x)/2 infinity.
pub fn lift_to_cone(x: &DVector<f64>, chart: &SpaceFormChart) -> LorentzVector {
    let xe = LorentzVector::from_euclidean(x);
    let mut out = chart.origin.clone();
    out.axpy(1.0, &xe);
    out.axpy(0.5 * x.norm_squared(), &chart.infinity);
    out
}

/// Inverse of [`lift_to_cone`] on the chart: rescales so (F, infinity) = -1
/// and strips the Euclidean block.
pub fn stereo_project(f: &LorentzVector, chart: &SpaceFormChart) -> Result<DVector<f64>> {
    let pairing = inner(f, &chart.infinity);
    if pairing.abs() <= 1e-300 * f.coord_norm().max(1.0) || pairing == 0.0 {
        return Err(GeomError::PointAtInfinity);
    }
    let scaled = f.scale(-1.0 / pairing);
    // Remove the chart's null-pair components, keep the orthogonal block.
    let a = -inner(&scaled, &chart.infinity); // origin coefficient, = 1 here
    let b = -inner(&scaled, &chart.origin); // infinity coefficient
    let mut rest = scaled.clone();
    rest.axpy(-a, &chart.origin);
    rest.axpy(-b, &chart.infinity);
    Ok(rest.euclidean_part())
}

/// Rescales a cone vector into E(w): F / -(F, w).
pub fn rescale_into(f: &LorentzVector, w: &LorentzVector) -> Result<LorentzVector> {
    let p = inner(f, w);
    if p.abs() <= 1e-14 * f.coord_norm() * w.coord_norm() {
        return Err(GeomError::PointAtInfinity);
    }
    Ok(f.scale(-1.0 / p))
}

/// Eigenspace-scaling gauge map: acts as c on <dir_hat>, c^{-1} on <dir>,
/// identity on the common orthogonal complement.
pub fn gauge_map(dir: &LorentzVector, dir_hat: &LorentzVector, c: f64) -> Result<OrthogonalMap> {
    if c == 0.0 {
        return Err(GeomError::ZeroGaugeFactor);
    }
    if !dir.is_null() {
        return Err(GeomError::NotNull(inner(dir, dir).abs()));
    }
    if !dir_hat.is_null() {
        return Err(GeomError::NotNull(inner(dir_hat, dir_hat).abs()));
    }
    let s = inner(dir, dir_hat);
    if s.abs() <= 1e-12 * dir.coord_norm() * dir_hat.coord_norm() {
        return Err(GeomError::DegenerateNullPair(s));
    }
    let dim = dir.dim();
    Ok(OrthogonalMap::from_matrix_unchecked(gauge_matrix(dir, dir_hat, c, s, dim)))
}

fn gauge_matrix(dir: &LorentzVector, dir_hat: &LorentzVector, c: f64, s: f64, dim: usize) -> DMatrix<f64> {
    // P x = (x, dir_hat)/s dir, Phat x = (x, dir)/s dir_hat.
    let mut m = DMatrix::identity(dim, dim);
    let g_dir = gram_apply(dir);
    let g_hat = gram_apply(dir_hat);
    // identity - P - Phat + c^{-1} P + c Phat
    m.ger((1.0 / c - 1.0) / s, dir.coords(), &g_hat, 1.0);
    m.ger((c - 1.0) / s, dir_hat.coords(), &g_dir, 1.0);
    m
}

/// Matrix exponential of a Gram-skew map by scaling and squaring of the
/// truncated series; one hyperbolic re-orthonormalization pass if the Gram
/// residual exceeds 1e-12.
pub fn exp_bivector(b: &Bivector, dim: usize) -> OrthogonalMap {
    exp_skew_matrix(&b.to_matrix(dim))
}

pub fn exp_skew_matrix(a: &DMatrix<f64>) -> OrthogonalMap {
    let dim = a.nrows();
    let norm = a.amax() * dim as f64;
    let k = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a / 2f64.powi(k as i32);
    let mut term = DMatrix::<f64>::identity(dim, dim);
    let mut sum = term.clone();
    for j in 1..64 {
        term = &term * &scaled / j as f64;
        sum += &term;
        if term.amax() <= 1e-18 * sum.amax() {
            break;
        }
    }
    for _ in 0..k {
        sum = &sum * &sum;
    }
    let mut out = OrthogonalMap::from_matrix_unchecked(sum);
    if out.gram_residual() > 1e-12 {
        out = reorthonormalize(&out);
    }
    out
}

/// One Gram-Schmidt pass against the Lorentz form, performed in an
/// orthonormal frame (timelike direction first) where the hyperbolic
/// normalizations are stable.
fn reorthonormalize(m: &OrthogonalMap) -> OrthogonalMap {
    let dim = m.dim();
    let c = cone_to_orthonormal(dim);
    let c_inv = orthonormal_to_cone(dim);
    // X is J-orthogonal with J = diag(-1, 1, .., 1).
    let mut x = &c * m.matrix() * &c_inv;
    let signs: Vec<f64> = (0..dim).map(|i| if i == 0 { -1.0 } else { 1.0 }).collect();
    for j in 0..dim {
        for i in 0..j {
            // J-inner product of columns i, j.
            let mut dot = 0.0;
            for r in 0..dim {
                dot += signs[r] * x[(r, i)] * x[(r, j)];
            }
            let coef = dot * signs[i];
            for r in 0..dim {
                let v = x[(r, i)];
                x[(r, j)] -= coef * v;
            }
        }
        let mut nrm2 = 0.0;
        for r in 0..dim {
            nrm2 += signs[r] * x[(r, j)] * x[(r, j)];
        }
        let scale = 1.0 / nrm2.abs().sqrt().max(1e-300);
        for r in 0..dim {
            x[(r, j)] *= scale;
        }
    }
    OrthogonalMap::from_matrix_unchecked(&c_inv * x * &c)
}

/// Change of basis {v0, e, vinf} -> {t, e, s}, t = (v0+vinf)/sqrt2 timelike,
/// s = (v0-vinf)/sqrt2 spacelike; returns the coordinate map.
fn cone_to_orthonormal(dim: usize) -> DMatrix<f64> {
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let mut m = DMatrix::identity(dim, dim);
    m[(0, 0)] = r;
    m[(0, dim - 1)] = r;
    m[(dim - 1, 0)] = r;
    m[(dim - 1, dim - 1)] = -r;
    m
}

fn orthonormal_to_cone(dim: usize) -> DMatrix<f64> {
    // The map is an involution.
    cone_to_orthonormal(dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(coords: &[f64]) -> LorentzVector {
        LorentzVector::from_slice(coords).unwrap()
    }

    #[test]
    fn inner_of_chart_pair_is_minus_one() {
        let v0 = LorentzVector::v0(3);
        let vinf = LorentzVector::vinf(3);
        assert_eq!(inner(&v0, &vinf), -1.0);
        assert_eq!(inner(&v0, &v0), 0.0);
        assert_eq!(inner(&vinf, &vinf), 0.0);
    }

    #[test]
    fn inner_bilinear_hand_example() {
        // (e1 + v0, e1 + vinf) = 1 + (v0, vinf) = 0
        let n = 3;
        let a = LorentzVector::e(n, 1).add(&LorentzVector::v0(n));
        let b = LorentzVector::e(n, 1).add(&LorentzVector::vinf(n));
        assert_eq!(inner(&a, &b), 0.0);
    }

    #[test]
    fn inner_rejects_dimension_mismatch() {
        let a = LorentzVector::v0(3);
        let b = LorentzVector::v0(4);
        assert!(inner_checked(&a, &b).is_err());
    }

    #[test]
    fn wedge_apply_antisymmetry_and_basis_actions() {
        let n = 3;
        let u = v(&[0.3, -1.0, 2.0, 0.5, 0.7]);
        let w = v(&[1.0, 0.2, -0.4, 1.5, -2.0]);
        let z = wedge_apply(&u, &u, &w);
        assert!(z.coord_norm() < 1e-15);

        let e1 = LorentzVector::e(n, 1);
        let e2 = LorentzVector::e(n, 2);
        let r = wedge_apply(&e1, &e2, &e1);
        assert_eq!(r.coords(), e2.coords());

        let v0 = LorentzVector::v0(n);
        let vinf = LorentzVector::vinf(n);
        let r2 = wedge_apply(&v0, &vinf, &v0);
        // (v0,v0) vinf - (vinf,v0) v0 = v0
        assert_eq!(r2.coords(), v0.coords());
    }

    #[test]
    fn wedge_matrix_is_gram_skew() {
        let u = v(&[0.3, -1.0, 2.0, 0.5, 0.7]);
        let w = v(&[1.0, 0.2, -0.4, 1.5, -2.0]);
        let b = Bivector::wedge(u, w);
        let m = b.to_matrix(5);
        assert!(gram_skew_residual(&m) < 1e-12);
    }

    #[test]
    fn lift_and_stereo_round_trip() {
        let chart = SpaceFormChart::standard(3);
        let x = DVector::from_column_slice(&[0.3, -1.2, 0.5]);
        let f = lift_to_cone(&x, &chart);
        assert!(inner(&f, &f).abs() < 1e-14);
        assert!((inner(&f, &chart.infinity) + 1.0).abs() < 1e-14);
        let back = stereo_project(&f, &chart).unwrap();
        assert!((back - x).norm() < 1e-12);

        // Projective rescaling invariance.
        let f2 = f.scale(2.0);
        let back2 = stereo_project(&f2, &chart).unwrap();
        assert!((back2 - DVector::from_column_slice(&[0.3, -1.2, 0.5])).norm() < 1e-12);
    }

    #[test]
    fn lift_of_zero_is_origin_and_unit_example() {
        let chart = SpaceFormChart::standard(3);
        let zero = DVector::zeros(3);
        let f = lift_to_cone(&zero, &chart);
        assert_eq!(f.coords(), chart.origin.coords());

        let x = DVector::from_column_slice(&[1.0, 0.0, 0.0]);
        let fx = lift_to_cone(&x, &chart);
        // v0 + e1 + vinf/2
        assert_eq!(fx.coords().as_slice(), &[1.0, 1.0, 0.0, 0.0, 0.5]);
        assert_eq!(inner(&fx, &chart.infinity), -1.0);
    }

    #[test]
    fn stereo_rejects_point_at_infinity() {
        let chart = SpaceFormChart::standard(3);
        assert!(matches!(
            stereo_project(&chart.infinity, &chart),
            Err(GeomError::PointAtInfinity)
        ));
    }

    #[test]
    fn gauge_map_scales_eigenlines() {
        let n = 3;
        let v0 = LorentzVector::v0(n);
        let vinf = LorentzVector::vinf(n);
        let g = gauge_map(&v0, &vinf, 2.0).unwrap();
        let r = g.apply(&vinf);
        assert!((r.coords() - vinf.scale(2.0).coords()).norm() < 1e-14);
        let r0 = g.apply(&v0);
        assert!((r0.coords() - v0.scale(0.5).coords()).norm() < 1e-14);
        let e2 = LorentzVector::e(n, 2);
        assert!((g.apply(&e2).coords() - e2.coords()).norm() < 1e-14);
        assert!(g.gram_residual() < 1e-14);

        // Group property: gauge(c) gauge(1/c) = id.
        let ginv = gauge_map(&v0, &vinf, 0.5).unwrap();
        let comp = g.compose(&ginv);
        assert!((comp.matrix() - DMatrix::<f64>::identity(5, 5)).amax() < 1e-14);

        // c = 1 is the identity.
        let gid = gauge_map(&v0, &vinf, 1.0).unwrap();
        assert!((gid.matrix() - DMatrix::<f64>::identity(5, 5)).amax() < 1e-14);
    }

    #[test]
    fn gauge_map_rejects_degenerate_input() {
        let n = 3;
        let v0 = LorentzVector::v0(n);
        assert!(gauge_map(&v0, &v0.scale(2.0), 2.0).is_err());
        let vinf = LorentzVector::vinf(n);
        assert!(gauge_map(&v0, &vinf, 0.0).is_err());
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let b = Bivector::zero();
        let m = exp_bivector(&b, 5);
        assert!((m.matrix() - DMatrix::<f64>::identity(5, 5)).amax() < 1e-15);
    }

    #[test]
    fn exp_of_nilpotent_wedge_reproduces_lift() {
        // exp(x wedge vinf) v0 = v0 + x + (x,x)/2 vinf
        let n = 3;
        let chart = SpaceFormChart::standard(n);
        let x = DVector::from_column_slice(&[0.4, -0.9, 1.3]);
        let xe = LorentzVector::from_euclidean(&x);
        let b = Bivector::wedge(xe, chart.infinity.clone());
        let m = exp_bivector(&b, n + 2);
        let lhs = m.apply(&chart.origin);
        let rhs = lift_to_cone(&x, &chart);
        assert!((lhs.coords() - rhs.coords()).norm() < 1e-14);
    }

    #[test]
    fn exp_of_rotation_matches_closed_form() {
        let n = 3;
        let e1 = LorentzVector::e(n, 1);
        let e2 = LorentzVector::e(n, 2);
        let b = Bivector::wedge(e1, e2).scaled(0.7);
        let m = exp_bivector(&b, 5);
        assert!(m.gram_residual() < 1e-12);
        // Plane rotation by -0.7 in the (e1, e2) block for this wedge sign.
        let (c, s) = (0.7f64.cos(), 0.7f64.sin());
        let r = m.matrix();
        assert!((r[(1, 1)] - c).abs() < 1e-12);
        assert!((r[(2, 2)] - c).abs() < 1e-12);
        assert!((r[(1, 2)].abs() - s).abs() < 1e-12);
        assert_eq!(r[(1, 2)], -r[(2, 1)]);
    }

    #[test]
    fn orthogonal_maps_preserve_inner_products() {
        let n = 3;
        let x = v(&[0.3, -1.0, 2.0, 0.5, 0.7]);
        let y = v(&[1.0, 0.2, -0.4, 1.5, -2.0]);
        let b = {
            let mut b = Bivector::wedge(v(&[0.1, 0.5, -0.3, 0.2, 0.0]), v(&[0.0, 1.0, 1.0, -1.0, 0.3]));
            b.push(LorentzVector::e(n, 1), LorentzVector::vinf(n));
            b
        };
        let m = exp_bivector(&b, 5);
        let drift = (inner(&m.apply(&x), &m.apply(&y)) - inner(&x, &y)).abs();
        assert!(drift <= 1e-10 * x.coord_norm() * y.coord_norm());
        let minv = m.inverse();
        let comp = m.compose(&minv);
        assert!((comp.matrix() - DMatrix::<f64>::identity(5, 5)).amax() < 1e-12);
    }

    #[test]
    fn space_form_membership() {
        let n = 3;
        let chart = SpaceFormChart::standard(n);
        let w = SpaceForm::new(chart.infinity.clone()).unwrap();
        assert_eq!(w.curvature(), 0.0);
        let f = lift_to_cone(&DVector::from_column_slice(&[1.0, 2.0, 3.0]), &chart);
        let (a, b) = w.membership_defect(&f);
        assert!(a < 1e-12 && b < 1e-12);
    }
}
