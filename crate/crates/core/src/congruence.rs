//! Sphere congruences: the central sphere congruence, spherical systems of
//! Darboux pairs, sphere-planes, coincidence tests, and the quadric
//! enveloping surface.

use nalgebra::{DMatrix, DVector};

use crate::conserved::{spectral_polynomial, PolynomialSection};
use crate::error::{GeomError, Result};
use crate::eta::EtaField;
use crate::grid::{Axis, CoordGrid, GridData};
use crate::lorentz::{gram_matrix, inner, LorentzVector};
use crate::surface::{grid_diff_with, SurfacePatch};
use crate::transforms::DarbouxPair;

/// A subbundle of the trivial Lorentz bundle, given by per-node bases of a
/// fixed rank with a declared signature (positive, negative).
#[derive(Debug, Clone)]
pub struct SphereCongruence {
    pub grid: CoordGrid,
    pub basis: GridData<Vec<LorentzVector>>,
    pub signature: (usize, usize),
}

impl SphereCongruence {
    pub fn rank(&self) -> usize {
        self.basis.at(0, 0).len()
    }

    /// Verifies the declared signature nodewise by Gram eigenvalue signs;
    /// returns the smallest absolute eigenvalue (degeneracy margin).
    pub fn verify_signature(&self) -> Result<f64> {
        let r = self.rank();
        let mut margin = f64::INFINITY;
        for iv in 0..self.grid.nv {
            for iu in 0..self.grid.nu {
                let b = self.basis.at(iu, iv);
                let mut gram = DMatrix::zeros(r, r);
                for i in 0..r {
                    for j in 0..r {
                        gram[(i, j)] = inner(&b[i], &b[j]);
                    }
                }
                let eig = nalgebra::SymmetricEigen::new(gram);
                let mut pos = 0;
                let mut neg = 0;
                for ev in eig.eigenvalues.iter() {
                    if *ev > 0.0 {
                        pos += 1;
                    } else {
                        neg += 1;
                    }
                    margin = margin.min(ev.abs());
                }
                if (pos, neg) != self.signature {
                    return Err(GeomError::SignatureFailure(iu, iv));
                }
            }
        }
        Ok(margin)
    }

    /// Metric orthoprojector onto the fibre at a node.
    pub fn projector(&self, iu: usize, iv: usize) -> DMatrix<f64> {
        let b = self.basis.at(iu, iv);
        let dim = b[0].dim();
        let r = b.len();
        let mut bmat = DMatrix::zeros(dim, r);
        for (j, v) in b.iter().enumerate() {
            bmat.column_mut(j).copy_from(v.coords());
        }
        let g = gram_matrix(dim);
        let core = bmat.transpose() * &g * &bmat;
        let inv = core.try_inverse().expect("non-degenerate fibre");
        &bmat * inv * bmat.transpose() * &g
    }

    /// Euclidean orthonormal basis matrix at a node (for subspace gaps).
    pub fn euclidean_frame(&self, iu: usize, iv: usize) -> DMatrix<f64> {
        let b = self.basis.at(iu, iv);
        let dim = b[0].dim();
        let mut m = DMatrix::zeros(dim, b.len());
        for (j, v) in b.iter().enumerate() {
            m.column_mut(j).copy_from(v.coords());
        }
        let qr = m.qr();
        let q = qr.q();
        q.columns(0, b.len()).clone_owned()
    }
}

/// Central sphere congruence <F, F_u, F_v, Laplacian F>, signature (3, 1).
pub fn central_sphere_congruence(patch: &SurfacePatch) -> Result<SphereCongruence> {
    let (fu, fv) = patch.lift_derivs_best();
    let lap = patch.lift_laplacian();
    let basis = GridData::from_fn(patch.grid.nu, patch.grid.nv, |iu, iv| {
        vec![
            patch.lift.at(iu, iv).clone(),
            fu.at(iu, iv).clone(),
            fv.at(iu, iv).clone(),
            lap.at(iu, iv).clone(),
        ]
    });
    let c = SphereCongruence { grid: patch.grid.clone(), basis, signature: (3, 1) };
    c.verify_signature()?;
    Ok(c)
}

/// Spherical system of a Darboux pair: C = (Lambda^(1))^perp + <G>
/// = span{F, N, G} in codimension one, with the flatness residual of the
/// orthoprojected connection.
#[derive(Debug, Clone)]
pub struct SphericalSystem {
    pub congruence: SphereCongruence,
    /// max plaquette holonomy defect of the projected connection, per area.
    pub flatness_residual: f64,
}

pub fn spherical_system(source: &SurfacePatch, pair: &DarbouxPair) -> Result<SphericalSystem> {
    spherical_system_from_section(source, &pair.g_section)
}

/// As [`spherical_system`] but from a raw section grid (negative controls
/// feed a non-parallel section here).
pub fn spherical_system_from_section(
    source: &SurfacePatch,
    g: &GridData<LorentzVector>,
) -> Result<SphericalSystem> {
    let basis = GridData::from_fn(source.grid.nu, source.grid.nv, |iu, iv| {
        vec![
            source.lift.at(iu, iv).clone(),
            source.normal.at(iu, iv).clone(),
            g.at(iu, iv).clone(),
        ]
    });
    let congruence =
        SphereCongruence { grid: source.grid.clone(), basis, signature: (2, 1) };
    congruence.verify_signature()?;
    let flatness_residual = projected_loop_residual(&congruence);
    Ok(SphericalSystem { congruence, flatness_residual })
}

/// Per-area holonomy defect of the orthoprojected connection, measured as
/// the curvature estimate max |P [P_u, P_v] P| with projector derivatives
/// by central differences. Vanishes (to discretization error) exactly when
/// the projected connection is flat; raw projector loops would be polluted
/// by the second-order shrinkage every projection step introduces.
pub fn projected_loop_residual(c: &SphereCongruence) -> f64 {
    let grid = &c.grid;
    let dim = c.basis.at(0, 0)[0].dim();
    let projs = GridData::from_fn(grid.nu, grid.nv, |iu, iv| c.projector(iu, iv));
    let flat = projs.map(|p| DVector::from_column_slice(p.as_slice()));
    // The fibre need not close up over periodic seams (Darboux lifts have
    // monodromy); only wrap stencils when the projector field does.
    let wrap_u =
        grid.periodic_u && crate::conserved::wrap_continuity_raw(&flat, grid) < 1e-6;
    let du = grid_diff_with(&flat, grid, Axis::U, 1, 5, wrap_u);
    let dv = grid_diff_with(&flat, grid, Axis::V, 1, 5, false);
    let mut worst = 0.0f64;
    for iv in 0..grid.nv {
        for iu in 0..grid.nu {
            let p = projs.at(iu, iv);
            let pu = DMatrix::from_column_slice(dim, dim, du.at(iu, iv).as_slice());
            let pv = DMatrix::from_column_slice(dim, dim, dv.at(iu, iv).as_slice());
            let curv = p * (&pu * &pv - &pv * &pu) * p;
            let scale = (pu.amax() * pv.amax()).max(1e-300);
            worst = worst.max(curv.amax() / scale);
        }
    }
    worst
}

/// Sphere-plane congruence P = C + <w>.
pub fn sphere_planes(c: &SphereCongruence, w: &LorentzVector) -> Result<SphereCongruence> {
    let mut inside = 0usize;
    for iv in 0..c.grid.nv {
        for iu in 0..c.grid.nu {
            let q = c.euclidean_frame(iu, iv);
            let proj = &q * (q.transpose() * w.coords());
            let resid = (w.coords() - proj).norm() / w.coord_norm();
            if resid < 1e-8 {
                inside += 1;
            }
        }
    }
    if inside > 0 {
        return Err(GeomError::WInsideCongruence(inside));
    }
    let basis = c.basis.map(|b| {
        let mut out = b.clone();
        out.push(w.clone());
        out
    });
    // Appending a vector raises the positive index for spacelike-type w
    // and keeps the (k+1, 1) pattern for the congruences we build.
    let signature = (c.signature.0 + 1, c.signature.1);
    Ok(SphereCongruence { grid: c.grid.clone(), basis, signature })
}

/// max-node largest principal angle between two equal-rank congruences
/// (Euclidean-orthonormalized bases compared through their projectors).
pub fn coincidence_test(p1: &SphereCongruence, p2: &SphereCongruence) -> Result<f64> {
    if p1.rank() != p2.rank() {
        return Err(GeomError::Invalid("coincidence test needs equal ranks".into()));
    }
    let mut gap = 0.0f64;
    for iv in 0..p1.grid.nv {
        for iu in 0..p1.grid.nu {
            let q1 = p1.euclidean_frame(iu, iv);
            let q2 = p2.euclidean_frame(iu, iv);
            // Sine of the largest principal angle: numerically clean near
            // coincidence, unlike arccos of the smallest singular value.
            let resid = &q2 - &q1 * (q1.transpose() * &q2);
            let svd = resid.svd(false, false);
            let smax = svd.singular_values.iter().fold(0.0f64, |a, s| a.max(*s));
            gap = gap.max(smax.clamp(-1.0, 1.0).asin());
        }
    }
    Ok(gap)
}

/// Outcome of the degree-1 spherical-coincidence construction.
#[derive(Debug, Clone)]
pub struct SphericalCoincidence {
    pub gap: f64,
    /// Recovered quantity and the spread of the proportionality constant,
    /// present when the systems coincide.
    pub recovered: Option<(PolynomialSection, f64)>,
}

/// Tests whether the spherical systems through two Darboux transforms
/// coincide, and when they do, reconstructs the degree-1 conserved
/// quantity from p(m1) = F1, p(m2) = beta F2.
pub fn spherical_coincidence_type1(
    source: &SurfacePatch,
    eta: &EtaField,
    pair1: &DarbouxPair,
    pair2: &DarbouxPair,
    gap_threshold: f64,
) -> Result<SphericalCoincidence> {
    if (pair1.m - pair2.m).abs() < 1e-12 {
        return Err(GeomError::Invalid("coincidence needs distinct parameters".into()));
    }
    let s1 = spherical_system(source, pair1)?;
    let s2 = spherical_system(source, pair2)?;
    let gap = coincidence_test(&s1.congruence, &s2.congruence)?;
    if gap > gap_threshold {
        return Ok(SphericalCoincidence { gap, recovered: None });
    }
    // F1 = xi + beta F2 with xi in (Lambda^(1))^perp: beta from the
    // least-squares of the three pairing constraints.
    let (fu, fv) = source.lift_derivs_best();
    let grid = &source.grid;
    let mut beta_grid = GridData::fill(grid.nu, grid.nv, 0.0f64);
    for iv in 0..grid.nv {
        for iu in 0..grid.nu {
            let f1 = pair1.g_section.at(iu, iv);
            let f2 = pair2.g_section.at(iu, iv);
            let mut num = 0.0;
            let mut den = 0.0;
            for dir in [source.lift.at(iu, iv), fu.at(iu, iv), fv.at(iu, iv)] {
                let a = inner(f1, dir);
                let b = inner(f2, dir);
                num += a * b;
                den += b * b;
            }
            *beta_grid.at_mut(iu, iv) = num / den.max(1e-300);
        }
    }
    let beta = beta_grid.mean();
    let beta_spread = beta_grid.spread();
    let (m1, m2) = (pair1.m, pair2.m);
    let n = source.ambient_n();
    let p1_coeff = GridData::from_fn(grid.nu, grid.nv, |iu, iv| {
        let mut x = pair1.g_section.at(iu, iv).clone();
        x.axpy(-beta, pair2.g_section.at(iu, iv));
        x.scale(1.0 / (m1 - m2))
    });
    let p0_coeff = GridData::from_fn(grid.nu, grid.nv, |iu, iv| {
        let mut x = pair1.g_section.at(iu, iv).clone();
        x.axpy(-m1, p1_coeff.at(iu, iv));
        x
    });
    let mut section = PolynomialSection { coeffs: vec![p0_coeff, p1_coeff], residual: 0.0 };
    let _ = n;
    section.residual = crate::conserved::ladder_residual(&section, eta, &[m1, m2]);
    Ok(SphericalCoincidence { gap, recovered: Some((section, beta_spread)) })
}

/// Quadric coefficients of the enveloping-surface relation among the
/// frame coordinates (alpha, beta, gamma):
/// c_aa a^2 + c_ab a b + c_ag a g + c_bg b g + c_a a = 0.
#[derive(Debug, Clone, Copy)]
pub struct QuadricCoefficients {
    pub c_aa: f64,
    pub c_ab: f64,
    pub c_ag: f64,
    pub c_bg: f64,
    pub c_a: f64,
}

/// The enveloping surface of the sphere-plane congruence of a degree-2
/// quantity at a spectral root, trivialized into R^{2,1}.
#[derive(Debug, Clone)]
pub struct QuadricModel {
    pub coefficients: QuadricCoefficients,
    /// Trivialized curve g = Psi(G_1): frame coordinates per node.
    pub curve: GridData<DVector<f64>>,
    /// Gram matrix of the base frame (the R^{2,1} metric of the curve).
    pub frame_gram: DMatrix<f64>,
    /// max |quadric relation| over included nodes, on the Psi coordinates.
    pub relation_residual: f64,
    /// max |(dG, dG) - (dg, dg)| over interior nodes.
    pub metric_residual: f64,
    /// Nodes excluded by the genericity guard (G1, w) != 0.
    pub excluded: usize,
    /// Nullity defect of the gauged section G after choosing s.
    pub gamma_identity: f64,
    /// D-parallelism defect of the trivializing frame.
    pub psi_residual: f64,
}

/// Builds the enveloping quadric data for a degree-2 quantity p at a real
/// non-zero spectral root m, in a flat chart (w = chart infinity, null).
pub fn envelope_quadric(
    p: &PolynomialSection,
    patch: &SurfacePatch,
    eta: &EtaField,
    m: f64,
) -> Result<QuadricModel> {
    if p.degree() != 2 {
        return Err(GeomError::Invalid("envelope quadric needs a degree-2 quantity".into()));
    }
    let w = &patch.chart.infinity;
    if (patch.space_form.w.sub(w)).coord_norm() > 1e-12 {
        return Err(GeomError::Invalid("envelope quadric is built in the flat chart".into()));
    }
    // Normalize so p_2 is a unit section.
    let mut p = p.clone();
    let spec0 = spectral_polynomial(&p);
    let lead = *spec0.coeffs.last().expect("degree-2 spectral");
    if lead <= 0.0 {
        return Err(GeomError::Invalid("top coefficient must be spacelike".into()));
    }
    p.scale(1.0 / lead.sqrt());
    let spec = spectral_polynomial(&p);
    // Constant inner products from the spectral table.
    let p2p1 = spec.coeffs[3] / 2.0;
    let p1p0 = spec.coeffs[1] / 2.0;
    let b_const = {
        let mut mean = DVector::zeros(p.dim());
        let (nu, nv) = p.grid_dims();
        for v in p.coeffs[0].iter() {
            mean += v.coords();
        }
        mean /= (nu * nv) as f64;
        let p0 = LorentzVector::new(mean).expect("finite constant term");
        -inner(&p0, &patch.chart.origin)
    };

    let coefficients = QuadricCoefficients {
        c_aa: -(m * m + m * p2p1),
        c_ab: m * p1p0 - m.powi(4) - m.powi(3) * p2p1,
        c_ag: -1.0,
        c_bg: -m * m,
        c_a: b_const,
    };

    let grid = &patch.grid;
    let pm = p.value_at(m);
    // Root sanity: p(m) must be null and off the surface line.
    let scale = p.coord_scale();
    for iv in 0..grid.nv {
        for iu in 0..grid.nu {
            let g = pm.at(iu, iv);
            if g.coord_norm() < 1e-9 * scale {
                return Err(GeomError::NoRealRoot);
            }
            if inner(g, patch.lift.at(iu, iv)).abs()
                < 1e-8 * g.coord_norm() * patch.lift.at(iu, iv).coord_norm()
            {
                return Err(GeomError::TransformDegenerate { bad: 1 });
            }
        }
    }

    // Per-node (alpha, beta) from d G1 in C and the (G1, w) = -1 gauge,
    // then s for nullity and gamma from the frame identity. Nodes where
    // the envelope point escapes to infinity (the 2x2 system degenerates
    // or the coordinates blow up) are excluded, as are nodes whose frame
    // normalization degenerates.
    let mut alpha = GridData::fill(grid.nu, grid.nv, 0.0f64);
    let mut beta = GridData::fill(grid.nu, grid.nv, 0.0f64);
    let mut excluded_mask = GridData::fill(grid.nu, grid.nv, false);
    let mut g_big = GridData::fill(grid.nu, grid.nv, LorentzVector::zeros(patch.ambient_n()));
    let mut gamma_identity = 0.0f64;
    let mut magnitudes = Vec::new();
    for iv in 0..grid.nv {
        for iu in 0..grid.nu {
            let f = patch.lift.at(iu, iv);
            let p1 = p.coeffs[1].at(iu, iv);
            let p2 = p.coeffs[2].at(iu, iv);
            let g = pm.at(iu, iv);
            let a11 = inner(f, p1);
            let a12 = m * inner(f, g);
            let a21 = inner(p2, w);
            let a22 = inner(g, w);
            let det = a11 * a22 - a12 * a21;
            let entry_scale =
                a11.abs().max(a12.abs()).max(a21.abs()).max(a22.abs()).max(1e-300);
            // Guard both the envelope solve and the frame normalization
            // 1/(F, p(m)); the latter degenerates where the complementary
            // line approaches the surface line.
            let pairing = inner(f, g).abs() / (f.coord_norm() * g.coord_norm());
            if det.abs() < 1e-6 * entry_scale * entry_scale || pairing < 3e-2 {
                *excluded_mask.at_mut(iu, iv) = true;
                continue;
            }
            // [a11 a12; a21 a22] [alpha; beta] = [0; -1]
            let al = a12 / det;
            let be = -a11 / det;
            *alpha.at_mut(iu, iv) = al;
            *beta.at_mut(iu, iv) = be;
            let mut g1 = p2.scale(al);
            g1.axpy(be, g);
            let s = 0.5 * inner(&g1, &g1);
            let mut big = g1.clone();
            big.axpy(s, w);
            gamma_identity = gamma_identity.max((inner(&big, &big)).abs());
            *g_big.at_mut(iu, iv) = big;
            magnitudes.push((al * al + be * be).sqrt());
        }
    }
    // Envelope points far beyond the median scale sit near the ends of the
    // patch where the surface fails to immerse; exclude them.
    magnitudes.sort_by(|a, b| a.partial_cmp(b).expect("finite magnitudes"));
    let median = magnitudes.get(magnitudes.len() / 2).copied().unwrap_or(1.0);
    for iv in 0..grid.nv {
        for iu in 0..grid.nu {
            let mag = (alpha.at(iu, iv).powi(2) + beta.at(iu, iv).powi(2)).sqrt();
            if mag > 12.0 * median {
                *excluded_mask.at_mut(iu, iv) = true;
            }
        }
    }
    // Measurements below touch difference stencils: only nodes whose
    // neighborhood is clean participate.
    let clean = |iu: usize, iv: usize, r: isize| -> bool {
        for dv in -r..=r {
            for du in -r..=r {
                let ju = if grid.periodic_u {
                    (iu as isize + du).rem_euclid(grid.nu as isize) as usize
                } else {
                    let j = iu as isize + du;
                    if j < 0 || j >= grid.nu as isize {
                        continue;
                    }
                    j as usize
                };
                let jv = iv as isize + dv;
                if jv < 0 || jv >= grid.nv as isize {
                    continue;
                }
                if *excluded_mask.at(ju, jv as usize) {
                    return false;
                }
            }
        }
        true
    };
    let excluded = excluded_mask.iter().filter(|b| **b).count();

    // The trivializing frame {F-tilde, p(m), Z} is itself D-parallel; its
    // measured D-derivative is the Psi edge-consistency residual.
    let frames = GridData::from_fn(grid.nu, grid.nv, |iu, iv| node_frame(&p, patch, &pm, iu, iv));
    let g_lorentz = gram_matrix(p.dim());
    let frame_gram = frames.at(0, 0).transpose() * &g_lorentz * frames.at(0, 0);
    let c_basis = GridData::from_fn(grid.nu, grid.nv, |iu, iv| {
        vec![
            patch.lift.at(iu, iv).clone(),
            pm.at(iu, iv).clone(),
            p.coeffs[2].at(iu, iv).clone(),
        ]
    });
    let c_cong = SphereCongruence { grid: grid.clone(), basis: c_basis, signature: (2, 1) };
    let psi_residual = {
        let flat = frames.map(|m| DVector::from_column_slice(m.as_slice()));
        let wrap = grid.periodic_u
            && crate::conserved::wrap_continuity_raw(&flat, grid) < 1e-6;
        let du = grid_diff_with(&flat, grid, Axis::U, 1, 3, wrap);
        let dv = grid_diff_with(&flat, grid, Axis::V, 1, 3, false);
        let dim = p.dim();
        let mut worst = 0.0f64;
        for iv in 0..grid.nv {
            for iu in 0..grid.nu {
                if !clean(iu, iv, 2) {
                    continue;
                }
                let proj = c_cong.projector(iu, iv);
                for d in [du.at(iu, iv), dv.at(iu, iv)] {
                    let dm = DMatrix::from_column_slice(dim, 3, d.as_slice());
                    worst = worst.max((&proj * dm).amax());
                }
            }
        }
        worst
    };

    // Coordinates of G1 + s w (projected back to C it is G1) in the frame.
    let mut curve = GridData::fill(grid.nu, grid.nv, DVector::zeros(3));
    let mut relation_residual = 0.0f64;
    for iv in 0..grid.nv {
        for iu in 0..grid.nu {
            if *excluded_mask.at(iu, iv) {
                continue;
            }
            let b = frames.at(iu, iv);
            let core = b.transpose() * &g_lorentz * b;
            let inv = core.try_inverse().ok_or(GeomError::SignatureFailure(iu, iv))?;
            let mut g1 = p.coeffs[2].at(iu, iv).scale(*alpha.at(iu, iv));
            g1.axpy(*beta.at(iu, iv), pm.at(iu, iv));
            let coords = inv * (b.transpose() * &g_lorentz * g1.coords());
            // Frame order: (F-tilde, p(m), Z) -> coordinates (gamma, beta, alpha).
            let (ga, be, al) = (coords[0], coords[1], coords[2]);
            let q = coefficients.c_aa * al * al
                + coefficients.c_ab * al * be
                + coefficients.c_ag * al * ga
                + coefficients.c_bg * be * ga
                + coefficients.c_a * al;
            relation_residual = relation_residual.max(q.abs());
            *curve.at_mut(iu, iv) = coords;
        }
    }

    // Metric identity: (dG, dG) = (dg, dg) with the constant frame Gram.
    // Wide stencils: the identity is algebraic, the only error budget is
    // the differentiation itself, and the envelope coordinates are large.
    let raw_g = g_big.map(|x| x.coords().clone());
    let wrap = grid.periodic_u && crate::conserved::wrap_continuity(&g_big, grid) < 1e-6;
    let dgu = grid_diff_with(&raw_g, grid, Axis::U, 1, 7, wrap);
    let dgv = grid_diff_with(&raw_g, grid, Axis::V, 1, 7, wrap);
    let dcu = grid_diff_with(&curve, grid, Axis::U, 1, 7, wrap);
    let dcv = grid_diff_with(&curve, grid, Axis::V, 1, 7, wrap);
    let mut metric_residual = 0.0f64;
    for iv in 1..grid.nv - 1 {
        for iu in 0..grid.nu {
            if !clean(iu, iv, 3) {
                continue;
            }
            for (dg, dc) in [(dgu.at(iu, iv), dcu.at(iu, iv)), (dgv.at(iu, iv), dcv.at(iu, iv))] {
                let lhs = {
                    let l = LorentzVector::new(dg.clone()).expect("finite dG");
                    inner(&l, &l)
                };
                let rhs = (dc.transpose() * &frame_gram * dc)[(0, 0)];
                metric_residual = metric_residual.max((lhs - rhs).abs());
            }
        }
    }
    let _ = eta;

    Ok(QuadricModel {
        coefficients,
        curve,
        frame_gram,
        relation_residual,
        metric_residual,
        excluded,
        gamma_identity,
        psi_residual,
    })
}

/// Frame {F-tilde, p(m), Z} at a node: (F-tilde, p(m)) = -1 and
/// Z = (p_2, p(m)) F-tilde + p_2 is unit and orthogonal to both nulls.
fn node_frame(
    p: &PolynomialSection,
    patch: &SurfacePatch,
    pm: &GridData<LorentzVector>,
    iu: usize,
    iv: usize,
) -> DMatrix<f64> {
    let dim = p.dim();
    let f = patch.lift.at(iu, iv);
    let g = pm.at(iu, iv);
    let s = inner(f, g);
    let f_tilde = f.scale(-1.0 / s);
    let p2 = p.coeffs[2].at(iu, iv);
    let mut z = f_tilde.scale(inner(p2, g));
    z.axpy(1.0, p2);
    let mut out = DMatrix::zeros(dim, 3);
    out.column_mut(0).copy_from(f_tilde.coords());
    out.column_mut(1).copy_from(g.coords());
    out.column_mut(2).copy_from(z.coords());
    out
}

/// Convenience: sphere-plane congruence of a Darboux pair w.r.t. w.
pub fn pair_sphere_planes(
    source: &SurfacePatch,
    pair: &DarbouxPair,
    w: &LorentzVector,
) -> Result<SphereCongruence> {
    let sys = spherical_system(source, pair)?;
    sphere_planes(&sys.congruence, w)
}

/// Outcome of the degree-2 recovery from coincident sphere-planes.
#[derive(Debug, Clone)]
pub struct SpherePlaneRecovery {
    pub gap: f64,
    pub section: PolynomialSection,
    /// Spread of the proportionality function beta (constant in theory).
    pub beta_spread: f64,
    /// Spread of the w-component function (constant in theory).
    pub q_spread: f64,
}

/// Forward direction of the sphere-plane coincidence theorem: from two
/// Darboux transforms whose sphere-planes w.r.t. w coincide, solve
/// F1 = xi + beta F2 + s w with xi in (Lambda^(1))^perp nodewise and
/// interpolate the degree-2 quantity through
/// p(m1) = m1 F1, p(m2) = m2 beta F2, p(0) = m1 m2 / (m2 - m1) s w.
pub fn sphere_plane_recovery(
    source: &SurfacePatch,
    eta: &EtaField,
    pair1: &DarbouxPair,
    pair2: &DarbouxPair,
    w: &LorentzVector,
) -> Result<SpherePlaneRecovery> {
    let (m1, m2) = (pair1.m, pair2.m);
    if (m1 - m2).abs() < 1e-12 {
        return Err(GeomError::Invalid("recovery needs distinct parameters".into()));
    }
    let p1 = pair_sphere_planes(source, pair1, w)?;
    let p2 = pair_sphere_planes(source, pair2, w)?;
    let gap = coincidence_test(&p1, &p2)?;

    let (fu, fv) = source.lift_derivs_best();
    let grid = &source.grid;
    let mut beta_grid = GridData::fill(grid.nu, grid.nv, 0.0f64);
    let mut s_grid = GridData::fill(grid.nu, grid.nv, 0.0f64);
    for iv in 0..grid.nv {
        for iu in 0..grid.nu {
            let f1 = pair1.g_section.at(iu, iv);
            let f2 = pair2.g_section.at(iu, iv);
            // Least squares over the three tangency pairings.
            let mut ata = [[0.0f64; 2]; 2];
            let mut atb = [0.0f64; 2];
            for dir in [source.lift.at(iu, iv), fu.at(iu, iv), fv.at(iu, iv)] {
                let a = inner(f2, dir);
                let b = inner(w, dir);
                let rhs = inner(f1, dir);
                ata[0][0] += a * a;
                ata[0][1] += a * b;
                ata[1][0] += a * b;
                ata[1][1] += b * b;
                atb[0] += a * rhs;
                atb[1] += b * rhs;
            }
            let det = ata[0][0] * ata[1][1] - ata[0][1] * ata[1][0];
            if det.abs() < 1e-14 {
                return Err(GeomError::SignatureFailure(iu, iv));
            }
            *beta_grid.at_mut(iu, iv) = (atb[0] * ata[1][1] - atb[1] * ata[0][1]) / det;
            *s_grid.at_mut(iu, iv) = (ata[0][0] * atb[1] - ata[1][0] * atb[0]) / det;
        }
    }
    let beta = beta_grid.mean();
    let s_const = s_grid.mean();
    let n = source.ambient_n();
    // Quadratic interpolation through the three prescribed values.
    type NodeValue<'a> = Box<dyn Fn(usize, usize) -> LorentzVector + 'a>;
    let values: [(f64, NodeValue); 3] = [
        (0.0, Box::new(move |_, _| w_scaled(w, m1 * m2 / (m2 - m1) * s_const))),
        (m1, Box::new(|iu, iv| pair1.g_section.at(iu, iv).scale(m1))),
        (m2, Box::new(move |iu, iv| pair2.g_section.at(iu, iv).scale(m2 * beta))),
    ];
    let nodes = [0.0, m1, m2];
    let mut coeffs = vec![GridData::fill(grid.nu, grid.nv, LorentzVector::zeros(n)); 3];
    for (j, (_, val)) in values.iter().enumerate() {
        // Lagrange basis polynomial through the three nodes.
        let mut basis = vec![1.0f64];
        let mut denom = 1.0;
        for (k, &xk) in nodes.iter().enumerate() {
            if k == j {
                continue;
            }
            // multiply basis by (t - xk)
            let mut next = vec![0.0; basis.len() + 1];
            for (d, &c) in basis.iter().enumerate() {
                next[d] -= c * xk;
                next[d + 1] += c;
            }
            basis = next;
            denom *= nodes[j] - xk;
        }
        for iv in 0..grid.nv {
            for iu in 0..grid.nu {
                let v = val(iu, iv);
                for (d, &c) in basis.iter().enumerate() {
                    coeffs[d].at_mut(iu, iv).axpy(c / denom, &v);
                }
            }
        }
    }
    let mut section = PolynomialSection { coeffs, residual: 0.0 };
    section.residual = crate::conserved::ladder_residual(&section, eta, &[m1, m2]);
    Ok(SpherePlaneRecovery {
        gap,
        section,
        beta_spread: beta_grid.spread(),
        q_spread: s_grid.spread(),
    })
}

fn w_scaled(w: &LorentzVector, s: f64) -> LorentzVector {
    w.scale(s)
}
