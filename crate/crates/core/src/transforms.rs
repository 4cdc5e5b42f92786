//! Darboux, Christoffel, and T-transforms with their conserved-quantity
//! transport, complementary surfaces, degree promotion and demotion, and
//! Bianchi permutability.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::conserved::{
    connection_residual, ladder_residual, spectral_polynomial, PolynomialSection,
};
use crate::error::{GeomError, Result};
use crate::eta::{EtaClosure, EtaField};
use crate::grid::{line_increments, Axis, CoordGrid, GridData};
use crate::lorentz::{
    gram_apply, inner, lift_to_cone, stereo_project, Bivector, LorentzVector, OrthogonalMap,
    SpaceForm, SpaceFormChart,
};
use crate::pencil::{
    gauge_identity_residual as frame_gauge_residual, gauss6_step, parallel_frame,
    parallel_section, require_nonzero_parameter, TransportAtlas,
};
use crate::surface::{compute_fundamental, grid_diff, grid_diff_with, SurfacePatch};

/// Relative |(F, G)| below which the transform counts as degenerate.
pub const DEGENERACY_THRESHOLD: f64 = 1e-6;

/// Initial condition for a Darboux transform.
#[derive(Debug, Clone)]
pub enum DarbouxSeed {
    /// Lift of the point f(base) + radius (cos angle n + sin angle t1),
    /// with n the unit normal and t1 the unit u-tangent at the base node.
    Angle { angle: f64, radius: f64 },
    /// Explicit null seed vector.
    Vector(LorentzVector),
}

impl Default for DarbouxSeed {
    fn default() -> Self {
        // One normal-offset out: for rotational patches this keeps the
        // transform equivariant and the pairing (F, G) uniformly clean.
        // Sphere-congruence constructions prefer an off-axis seed; see the
        // congruence module.
        DarbouxSeed::Angle { angle: 0.0, radius: 1.0 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PairDiagnostics {
    /// max |(G, G)| relative to |G|^2.
    pub g_nullity: f64,
    /// min |(F, G)| relative to |F||G|.
    pub min_pairing: f64,
    /// Residual of Gamma(1 - t/m) (d + t eta) Gamma^{-1} = d + t eta-hat
    /// at the sample t-set (difference-based).
    pub gauge_identity: f64,
    /// Periodic-seam defect of G (order one when the transform spirals).
    pub wrap_defect: f64,
}

/// A Darboux pair: the parameter, the parallel lift of the target, the
/// target patch with its gauged 1-form, and diagnostics.
#[derive(Debug, Clone)]
pub struct DarbouxPair {
    pub m: f64,
    pub g_section: GridData<LorentzVector>,
    pub target: SurfacePatch,
    pub target_eta: EtaField,
    pub diagnostics: PairDiagnostics,
}

/// Builds the default seed vector for a patch.
pub fn seed_vector(patch: &SurfacePatch, seed: &DarbouxSeed) -> Result<LorentzVector> {
    match seed {
        DarbouxSeed::Vector(v) => Ok(v.clone()),
        DarbouxSeed::Angle { angle, radius } => {
            let f0 = patch.f.at(0, 0);
            let n3 = patch.ambient_n();
            let n_eucl = patch.normal.at(0, 0).euclidean_part();
            let (fu, _) = patch.lift_derivs_best();
            let tu = fu.at(0, 0).euclidean_part().normalize();
            let mut x = f0.clone();
            for i in 0..n3 {
                x[i] += radius * (angle.cos() * n_eucl[i] + angle.sin() * tu[i]);
            }
            Ok(lift_to_cone(&x, &patch.chart))
        }
    }
}

/// Darboux transform with parameter m: integrates the parallel lift G,
/// stereo-projects the target, and gauges eta onto it.
pub fn darboux_transform(
    source: &SurfacePatch,
    eta: &EtaField,
    m: f64,
    seed: &DarbouxSeed,
) -> Result<DarbouxPair> {
    require_nonzero_parameter(m)?;
    let seed_vec = seed_vector(source, seed)?;
    if !seed_vec.is_null() {
        return Err(GeomError::BadSeed);
    }
    let base_pairing = inner(&seed_vec, source.lift.at(0, 0)).abs()
        / (seed_vec.coord_norm() * source.lift.at(0, 0).coord_norm());
    if base_pairing < DEGENERACY_THRESHOLD {
        return Err(GeomError::BadSeed);
    }
    let atlas = TransportAtlas::best(eta);
    let section = parallel_section(&atlas, m, &seed_vec);
    pair_from_parallel_lift(source, eta, m, section.values)
}

/// Shared tail of the Darboux construction, also used by complementary
/// surfaces where G = p(m) needs no integration.
pub fn pair_from_parallel_lift(
    source: &SurfacePatch,
    eta: &EtaField,
    m: f64,
    g: GridData<LorentzVector>,
) -> Result<DarbouxPair> {
    let grid = &source.grid;
    let mut g_nullity = 0.0f64;
    let mut min_pairing = f64::INFINITY;
    let mut bad = 0usize;
    for iv in 0..grid.nv {
        for iu in 0..grid.nu {
            let gv = g.at(iu, iv);
            let f = source.lift.at(iu, iv);
            g_nullity = g_nullity.max(inner(gv, gv).abs() / gv.coords().norm_squared());
            let pairing = inner(f, gv).abs() / (f.coord_norm() * gv.coord_norm());
            min_pairing = min_pairing.min(pairing);
            if pairing < DEGENERACY_THRESHOLD {
                bad += 1;
            }
        }
    }
    if bad > 0 {
        return Err(GeomError::TransformDegenerate { bad });
    }

    // Target immersion in the source chart.
    let f_target = {
        let mut out = GridData::fill(grid.nu, grid.nv, DVector::zeros(source.ambient_n()));
        for iv in 0..grid.nv {
            for iu in 0..grid.nu {
                *out.at_mut(iu, iv) = stereo_project(g.at(iu, iv), &source.chart)?;
            }
        }
        out
    };
    // The transform has monodromy in general: the target grid is periodic
    // only when G closes up around the seam.
    let wrap_defect = crate::conserved::wrap_continuity(&g, grid);
    let target_grid = CoordGrid {
        periodic_u: grid.periodic_u && wrap_defect < 1e-8,
        periodic_v: grid.periodic_v,
        ..grid.clone()
    };
    // Exact lift derivatives from the parallel relation dG = -m eta G:
    // with F-hat = G / s, s = -(G, w-infinity),
    // dF-hat = dG / s - G ds / s^2.
    let w_inf = &source.chart.infinity;
    let exact_deriv = |axis: Axis| -> GridData<LorentzVector> {
        GridData::from_fn(grid.nu, grid.nv, |iu, iv| {
            let gv = g.at(iu, iv);
            let e = eta.value(iu, iv, axis);
            let dg = LorentzVector::new(-(e * gv.coords()) * m).expect("finite dG");
            let s = -inner(gv, w_inf);
            let ds = -inner(&dg, w_inf);
            let mut out = dg.scale(1.0 / s);
            out.axpy(-ds / (s * s), gv);
            out
        })
    };
    let exact = (exact_deriv(Axis::U), exact_deriv(Axis::V));
    let mut target = crate::surface::compute_fundamental_with(
        f_target,
        target_grid.clone(),
        source.chart.clone(),
        SpaceForm::new(source.space_form.w.clone())?,
        Some(exact),
    )?;
    target.provenance = source.provenance.clone();
    target.provenance.push(format!("darboux m={m}"));

    let target_eta = gauged_eta(source, eta, m, &g, target_grid)?;
    let gauge_identity = darboux_gauge_identity_residual(source, eta, &target_eta, m, &g);
    Ok(DarbouxPair {
        m,
        g_section: g,
        target,
        target_eta,
        diagnostics: PairDiagnostics { g_nullity, min_pairing, gauge_identity, wrap_defect },
    })
}

/// The gauged 1-form of the Darboux target, assembled algebraically per
/// node from the reflection in span{F, G}:
/// eta-hat = R eta R - (1/m) R dP_W, R = 1 - 2 P_W,
/// with dG substituted by the parallel relation dG = -m eta G.
fn gauged_eta(
    source: &SurfacePatch,
    eta: &EtaField,
    m: f64,
    g: &GridData<LorentzVector>,
    target_grid: CoordGrid,
) -> Result<EtaField> {
    let grid = source.grid.clone();
    let dim = eta.dim();
    let (fu, fv) = source.lift_derivs_best();
    let mut eta_u = GridData::fill(grid.nu, grid.nv, DMatrix::zeros(dim, dim));
    let mut eta_v = GridData::fill(grid.nu, grid.nv, DMatrix::zeros(dim, dim));
    for iv in 0..grid.nv {
        for iu in 0..grid.nu {
            let f = source.lift.at(iu, iv);
            let gv = g.at(iu, iv);
            for (axis, df) in [(Axis::U, fu.at(iu, iv)), (Axis::V, fv.at(iu, iv))] {
                let e = eta.value(iu, iv, axis);
                let dg = LorentzVector::new(-(e * gv.coords()) * m).expect("finite dG");
                let out = gauged_eta_node(f, gv, df, &dg, e, m);
                match axis {
                    Axis::U => *eta_u.at_mut(iu, iv) = out,
                    Axis::V => *eta_v.at_mut(iu, iv) = out,
                }
            }
        }
    }

    let closure: Option<Arc<dyn EtaClosure>> = match (&source.analytic, &eta.closure) {
        (Some(surf), Some(base_eta)) => Some(Arc::new(GaugedEtaClosure {
            surf: surf.clone(),
            chart: source.chart.clone(),
            base_eta: base_eta.clone(),
            g: TransportedSection {
                grid: grid.clone(),
                values: g.clone(),
                eta_closure: base_eta.clone(),
                t: m,
            },
            m,
        }) as Arc<dyn EtaClosure>),
        _ => None,
    };

    let mut field = EtaField {
        grid: target_grid,
        eta_u,
        eta_v,
        factored: None,
        closure,
        kappa: eta.kappa,
        closedness_residual: 0.0,
    };
    field.closedness_residual = crate::eta::closedness_residual(&field);
    Ok(field)
}

/// Node-level gauge of eta across the pair (F, G).
fn gauged_eta_node(
    f: &LorentzVector,
    g: &LorentzVector,
    df: &LorentzVector,
    dg: &LorentzVector,
    eta_val: &DMatrix<f64>,
    m: f64,
) -> DMatrix<f64> {
    let dim = f.dim();
    let s = inner(f, g);
    let gf = gram_apply(f);
    let gg = gram_apply(g);
    let gdf = gram_apply(df);
    let gdg = gram_apply(dg);
    let mut p_w = DMatrix::zeros(dim, dim);
    p_w.ger(1.0 / s, f.coords(), &gg, 1.0);
    p_w.ger(1.0 / s, g.coords(), &gf, 1.0);
    let ds = inner(df, g) + inner(f, dg);
    let mut dp_w = DMatrix::zeros(dim, dim);
    dp_w.ger(1.0 / s, df.coords(), &gg, 1.0);
    dp_w.ger(1.0 / s, f.coords(), &gdg, 1.0);
    dp_w.ger(1.0 / s, dg.coords(), &gf, 1.0);
    dp_w.ger(1.0 / s, g.coords(), &gdf, 1.0);
    dp_w -= &p_w * (ds / s);
    let refl = DMatrix::identity(dim, dim) - &p_w * 2.0;
    &refl * eta_val * &refl - (&refl * dp_w) / m
}

/// Parallel lift evaluated off-grid by a short high-order Magnus hop from
/// the nearest node.
struct TransportedSection {
    grid: CoordGrid,
    values: GridData<LorentzVector>,
    eta_closure: Arc<dyn EtaClosure>,
    t: f64,
}

impl TransportedSection {
    fn eval(&self, u: f64, v: f64) -> LorentzVector {
        let g = &self.grid;
        let fu = ((u - g.u0) / g.h_u).round();
        let fv = ((v - g.v0) / g.h_v).round();
        let iu = (fu as isize).rem_euclid(g.nu as isize) as usize;
        let iv = (fv as isize).clamp(0, g.nv as isize - 1) as usize;
        let (u0, v0) = (g.u0 + fu * g.h_u, g.v(iv));
        let mut x = self.values.at(iu, iv).clone();
        let du = u - u0;
        if du.abs() > 1e-15 {
            x = gauss6_step(self.eta_closure.as_ref(), u0, v0, Axis::U, du, self.t).apply(&x);
        }
        let dv = v - v0;
        if dv.abs() > 1e-15 {
            x = gauss6_step(self.eta_closure.as_ref(), u, v0, Axis::V, dv, self.t).apply(&x);
        }
        x
    }
}

struct GaugedEtaClosure {
    surf: Arc<dyn crate::surface::SurfaceClosure>,
    chart: SpaceFormChart,
    base_eta: Arc<dyn EtaClosure>,
    g: TransportedSection,
    m: f64,
}

impl EtaClosure for GaugedEtaClosure {
    fn eta(&self, u: f64, v: f64, axis: Axis) -> DMatrix<f64> {
        let f = crate::surface::closure_lift(self.surf.as_ref(), &self.chart, u, v);
        let df = crate::surface::closure_lift_deriv(self.surf.as_ref(), &self.chart, u, v, axis);
        let e = self.base_eta.eta(u, v, axis);
        let gv = self.g.eval(u, v);
        let dg = LorentzVector::new(-(&e * gv.coords()) * self.m).expect("finite dG");
        gauged_eta_node(&f, &gv, &df, &dg, &e, self.m)
    }
}

/// Difference-based residual of the gauge identity
/// Gamma(1 - t/m) (d + t eta) Gamma(1 - t/m)^{-1} = d + t eta-hat
/// over the sample t-set, applied to the transported basis sections.
fn darboux_gauge_identity_residual(
    source: &SurfacePatch,
    eta: &EtaField,
    eta_hat: &EtaField,
    m: f64,
    g: &GridData<LorentzVector>,
) -> f64 {
    let grid = &source.grid;
    let dim = eta.dim();
    // Gamma grids, flattened for differencing.
    let mut worst = 0.0f64;
    for &t in crate::conserved::T_SAMPLES.iter() {
        if (t - m).abs() < 1e-9 {
            continue;
        }
        let c = 1.0 - t / m;
        let gammas = GridData::from_fn(grid.nu, grid.nv, |iu, iv| {
            gauge_map_node(source.lift.at(iu, iv), g.at(iu, iv), c)
        });
        let flat = gammas.map(|mtx| DVector::from_column_slice(mtx.as_slice()));
        let wrap_ok = false;
        let du = grid_diff_with(&flat, grid, Axis::U, 1, 5, grid.periodic_u && wrap_ok);
        let dv = grid_diff_with(&flat, grid, Axis::V, 1, 5, false);
        for iv in 0..grid.nv {
            for iu in 0..grid.nu {
                let gam = gammas.at(iu, iv);
                let gam_inv = gauge_map_node(source.lift.at(iu, iv), g.at(iu, iv), 1.0 / c);
                for (axis, d) in [(Axis::U, du.at(iu, iv)), (Axis::V, dv.at(iu, iv))] {
                    let dgam = DMatrix::from_column_slice(dim, dim, d.as_slice());
                    // Gamma (d + t eta) Gamma^{-1} - d - t eta_hat =
                    //   -(dGamma) Gamma^{-1} + t Gamma eta Gamma^{-1} - t eta_hat
                    let lhs = -(&dgam * &gam_inv)
                        + gam * eta.value(iu, iv, axis) * &gam_inv * t
                        - eta_hat.value(iu, iv, axis) * t;
                    worst = worst.max(lhs.amax());
                }
            }
        }
    }
    worst
}

/// Gauge matrix acting as c on <g>, 1/c on <f>, identity orthogonally.
pub fn gauge_map_node(f: &LorentzVector, g: &LorentzVector, c: f64) -> DMatrix<f64> {
    let dim = f.dim();
    let s = inner(f, g);
    let gf = gram_apply(f);
    let gg = gram_apply(g);
    let mut m = DMatrix::identity(dim, dim);
    m.ger((1.0 / c - 1.0) / s, f.coords(), &gg, 1.0);
    m.ger((c - 1.0) / s, g.coords(), &gf, 1.0);
    m
}

/// Transports a conserved quantity across a Darboux pair when the
/// orthogonality hypothesis (p(m), G) = 0 holds: componentwise
/// p-hat_Lambda = p_Lambda / (1 - t/m), p-hat_LambdaHat = (1 - t/m)
/// p_LambdaHat, orthogonal part unchanged.
pub fn gauge_conserved(
    p: &PolynomialSection,
    source: &SurfacePatch,
    pair: &DarbouxPair,
) -> Result<PolynomialSection> {
    let grid = &source.grid;
    let m = pair.m;
    let d = p.degree();
    let scale = p.coord_scale();

    // Hypothesis: (p(m), G) constant and zero.
    let mut pm_g_min = f64::INFINITY;
    let mut pm_g_max = f64::NEG_INFINITY;
    for iv in 0..grid.nv {
        for iu in 0..grid.nu {
            let val = inner(&p.node_value(iu, iv, m), pair.g_section.at(iu, iv))
                / pair.g_section.at(iu, iv).coord_norm();
            pm_g_min = pm_g_min.min(val);
            pm_g_max = pm_g_max.max(val);
        }
    }
    if (pm_g_max - pm_g_min).abs() > 1e-6 * scale {
        return Err(GeomError::HypothesisFails(format!(
            "(p(m), G) drifts across the grid by {:e}",
            pm_g_max - pm_g_min
        )));
    }
    if pm_g_max.abs().max(pm_g_min.abs()) > 1e-6 * scale {
        return Err(GeomError::HypothesisFails(format!(
            "(p(m), G) = {:e} is not zero; the transform raises the degree instead",
            0.5 * (pm_g_max + pm_g_min)
        )));
    }

    let (nu, nv) = (grid.nu, grid.nv);
    let n = source.ambient_n();
    let mut out: Vec<GridData<LorentzVector>> =
        vec![GridData::fill(nu, nv, LorentzVector::zeros(n)); d + 1];
    let mut division_defect = 0.0f64;
    for iv in 0..nv {
        for iu in 0..nu {
            let f = source.lift.at(iu, iv);
            let g = pair.g_section.at(iu, iv);
            let s = inner(f, g);
            // Components along F (lambda), along G (mu), and the rest.
            let mut lambda = Vec::with_capacity(d + 1);
            let mut mu = Vec::with_capacity(d + 1);
            let mut rest: Vec<LorentzVector> = Vec::with_capacity(d + 1);
            for k in 0..=d {
                let pk = p.coeffs[k].at(iu, iv);
                let lk = inner(pk, g) / s;
                let mk = inner(pk, f) / s;
                let mut r = pk.clone();
                r.axpy(-lk, f);
                r.axpy(-mk, g);
                lambda.push(lk);
                mu.push(mk);
                rest.push(r);
            }
            // lambda-hat = lambda / (1 - t/m): synthetic division.
            let mut lam_hat = vec![0.0; d + 1];
            lam_hat[0] = lambda[0];
            for k in 1..=d {
                lam_hat[k] = lambda[k] + lam_hat[k - 1] / m;
            }
            // The series must terminate: the would-be next coefficient is
            // the division defect.
            division_defect = division_defect.max((lam_hat[d] / m).abs() / scale.max(1e-300));
            // mu-hat = (1 - t/m) mu: degree d + 1, top term mu_d = (p_d, F)/s
            // vanishes for genuine conserved quantities.
            let mut mu_hat = vec![0.0; d + 2];
            for k in 0..=d {
                mu_hat[k] += mu[k];
                mu_hat[k + 1] -= mu[k] / m;
            }
            division_defect = division_defect.max(mu_hat[d + 1].abs() / scale.max(1e-300));
            for k in 0..=d {
                let mut x = rest[k].clone();
                x.axpy(lam_hat[k], f);
                x.axpy(mu_hat[k], g);
                *out[k].at_mut(iu, iv) = x;
            }
        }
    }
    let mut section = PolynomialSection { coeffs: out, residual: 0.0 };
    if division_defect > 1e-5 {
        return Err(GeomError::HypothesisFails(format!(
            "component division leaves defect {division_defect:e}"
        )));
    }
    section.residual = ladder_residual(&section, &pair.target_eta, &[]);
    Ok(section)
}

/// q(t) = (1 - t/m) p(t): exact degree raise; q(m) = 0 by construction.
pub fn promote_degree(p: &PolynomialSection, m: f64) -> Result<PolynomialSection> {
    require_nonzero_parameter(m)?;
    let d = p.degree();
    let (nu, nv) = p.grid_dims();
    let n = p.dim() - 2;
    let mut coeffs = vec![GridData::fill(nu, nv, LorentzVector::zeros(n)); d + 2];
    for k in 0..=d {
        for iv in 0..nv {
            for iu in 0..nu {
                let pk = p.coeffs[k].at(iu, iv);
                coeffs[k].at_mut(iu, iv).axpy(1.0, pk);
                coeffs[k + 1].at_mut(iu, iv).axpy(-1.0 / m, pk);
            }
        }
    }
    Ok(PolynomialSection { coeffs, residual: p.residual })
}

/// Complementary surfaces: Darboux pairs at the real non-zero roots of
/// (p(t), p(t)), with G = p(m) and no integration.
pub fn complementary_surfaces(
    p: &PolynomialSection,
    source: &SurfacePatch,
    eta: &EtaField,
) -> Result<Vec<DarbouxPair>> {
    let spec = spectral_polynomial(p);
    let roots = spec.nonzero_real_roots();
    if roots.is_empty() {
        return Err(GeomError::NoRealRoot);
    }
    let mut out = Vec::new();
    for root in roots {
        let m = root.value;
        let g = p.value_at(m);
        let scale = p.coord_scale();
        for v in g.iter() {
            if v.coord_norm() < 1e-9 * scale {
                return Err(GeomError::Invalid(format!(
                    "p({m}) vanishes at a node; inconsistent with a parallel non-zero section"
                )));
            }
        }
        out.push(pair_from_parallel_lift(source, eta, m, g)?);
    }
    Ok(out)
}

/// Demotes a quantity at a repeated non-zero root: gauges across the
/// complementary surface at m and divides by (1 - t/m).
pub fn demote_at_repeated_root(
    p: &PolynomialSection,
    source: &SurfacePatch,
    eta: &EtaField,
    m: f64,
) -> Result<(PolynomialSection, DarbouxPair)> {
    require_nonzero_parameter(m)?;
    let spec = spectral_polynomial(p);
    let is_repeated = spec
        .roots
        .real
        .iter()
        .any(|r| r.multiplicity >= 2 && (r.value - m).abs() <= 1e-6 * (1.0 + m.abs()) + 40.0 * spec.constancy_residual.sqrt());
    if !is_repeated {
        return Err(GeomError::NotRepeatedRoot(m));
    }
    let g = p.value_at(m);
    let scale = p.coord_scale();
    for v in g.iter() {
        if v.coord_norm() < 1e-9 * scale {
            return Err(GeomError::Invalid(format!(
                "p({m}) vanishes; the quantity is divisible by (1 - t/{m}) outright"
            )));
        }
    }
    let pair = pair_from_parallel_lift(source, eta, m, g)?;
    let hat = gauge_conserved(p, source, &pair)?;
    // Divide by (1 - t/m): vector synthetic division with defect check.
    let d = hat.degree();
    let (nu, nv) = hat.grid_dims();
    let n = hat.dim() - 2;
    let mut q: Vec<GridData<LorentzVector>> =
        vec![GridData::fill(nu, nv, LorentzVector::zeros(n)); d];
    let scale = hat.coord_scale();
    let mut defect = 0.0f64;
    for iv in 0..nv {
        for iu in 0..nu {
            let mut prev = LorentzVector::zeros(n);
            for k in 0..d {
                let mut qk = hat.coeffs[k].at(iu, iv).clone();
                qk.axpy(1.0 / m, &prev);
                *q[k].at_mut(iu, iv) = qk.clone();
                prev = qk;
            }
            let mut rem = hat.coeffs[d].at(iu, iv).clone();
            rem.axpy(1.0 / m, &prev);
            defect = defect.max(rem.coord_norm() / scale.max(1e-300));
        }
    }
    if defect > 1e-5 {
        return Err(GeomError::Invalid(format!(
            "gauged quantity does not vanish at the repeated root: defect {defect:e}"
        )));
    }
    let mut section = PolynomialSection { coeffs: q, residual: 0.0 };
    section.residual = ladder_residual(&section, &pair.target_eta, &[]);
    Ok((section, pair))
}

/// Output of a Christoffel transform.
#[derive(Debug, Clone)]
pub struct ChristoffelTransform {
    pub target: SurfacePatch,
    pub target_eta: EtaField,
    /// The dual immersion into the chart's R^n.
    pub f_dual: GridData<DVector<f64>>,
    /// Closedness defect of the dual differential before integration.
    pub closedness: f64,
    /// Residual of Gamma^c(t) (d + t eta) = (d + t eta^c) Gamma^c(t) at
    /// the sample t-set.
    pub gauge_identity: f64,
}

/// Christoffel transform w.r.t. the patch chart: integrates
/// df^c = kappa e^{-2 theta} (f_u du - f_v dv), lifts into the swapped
/// chart, and builds eta^c = Ad(exp(f^c wedge v0)) (df wedge vinf).
pub fn christoffel_transform(source: &SurfacePatch, eta: &EtaField) -> Result<ChristoffelTransform> {
    let grid = &source.grid;
    let n = source.ambient_n();
    let kappa = eta.kappa;
    let dim = n + 2;
    // The dual differential, extracted algebraically from eta:
    // df^c(X) = [exp(-f wedge vinf) eta_X](vinf), since the translation
    // fixes vinf. In coordinates this is kappa e^{-2 theta} (f_u du - f_v dv).
    let dual_diff = |axis: Axis| -> GridData<DVector<f64>> {
        GridData::from_fn(grid.nu, grid.nv, |iu, iv| {
            let e_inv = translation_exp(&(-source.f.at(iu, iv)), &source.chart.infinity, dim);
            let moved = e_inv * eta.value(iu, iv, axis) * source.chart.infinity.coords();
            let l = LorentzVector::new(moved).expect("finite dual differential");
            l.euclidean_part()
        })
    };
    let gu = dual_diff(Axis::U);
    let gv = dual_diff(Axis::V);
    // Closedness of the dual differential.
    let closedness = {
        let du_of_v = grid_diff(&gv, grid, Axis::U, 1, 5);
        let dv_of_u = grid_diff(&gu, grid, Axis::V, 1, 5);
        let mut worst = 0.0f64;
        for iv in 0..grid.nv {
            for iu in 0..grid.nu {
                worst = worst.max((du_of_v.at(iu, iv) - dv_of_u.at(iu, iv)).norm());
            }
        }
        worst
    };
    if closedness > 1e-2 {
        return Err(GeomError::Invalid(format!(
            "not isothermic-parametrized: dual differential closedness {closedness:e}"
        )));
    }

    // Tree integration of f^c.
    let mut f_dual = GridData::fill(grid.nu, grid.nv, DVector::zeros(n));
    {
        let col: Vec<DVector<f64>> = (0..grid.nv).map(|iv| gv.at(0, iv).clone()).collect();
        let quad = line_increments(&col, grid.h_v, false);
        for iv in 1..grid.nv {
            let prev = f_dual.at(0, iv - 1).clone();
            *f_dual.at_mut(0, iv) = prev + &quad.increments[iv - 1];
        }
        for iv in 0..grid.nv {
            let row: Vec<DVector<f64>> = (0..grid.nu).map(|iu| gu.at(iu, iv).clone()).collect();
            let quad = line_increments(&row, grid.h_u, false);
            for iu in 1..grid.nu {
                let prev = f_dual.at(iu - 1, iv).clone();
                *f_dual.at_mut(iu, iv) = prev + &quad.increments[iu - 1];
            }
        }
    }

    // Wrap continuity of the integrated dual surface.
    let wrap_ok = {
        let as_lorentz = f_dual.map(|x| {
            LorentzVector::from_euclidean(x)
        });
        crate::conserved::wrap_continuity(&as_lorentz, grid) < 1e-8
    };
    let target_grid = CoordGrid { periodic_u: grid.periodic_u && wrap_ok, ..grid.clone() };
    let swapped = source.chart.swapped();
    let mut target = compute_fundamental(
        f_dual.clone(),
        target_grid.clone(),
        swapped.clone(),
        SpaceForm::new(swapped.infinity.clone())?,
    )?;
    target.provenance = source.provenance.clone();
    target.provenance.push("christoffel".into());

    // eta^c = Ad(E)(df wedge vinf) with E = exp(f^c wedge v0); since
    // E vinf = F^c this equals (E df) wedge F^c.
    let (fu, fv) = euclidean_derivs(source);
    let mut eta_u = GridData::fill(grid.nu, grid.nv, DMatrix::zeros(dim, dim));
    let mut eta_v = GridData::fill(grid.nu, grid.nv, DMatrix::zeros(dim, dim));
    for iv in 0..grid.nv {
        for iu in 0..grid.nu {
            let e = translation_exp(f_dual.at(iu, iv), &swapped.infinity, dim);
            for (axis, df) in [(Axis::U, fu.at(iu, iv)), (Axis::V, fv.at(iu, iv))] {
                let lifted = LorentzVector::from_euclidean(df);
                let b = Bivector::wedge(lifted, source.chart.infinity.clone());
                let conj = &e * b.to_matrix(dim) * invert_translation(&e, dim);
                match axis {
                    Axis::U => *eta_u.at_mut(iu, iv) = conj,
                    Axis::V => *eta_v.at_mut(iu, iv) = conj,
                }
            }
        }
    }
    let mut field = EtaField {
        grid: target_grid,
        eta_u,
        eta_v,
        factored: None,
        closure: None,
        kappa,
        closedness_residual: 0.0,
    };
    field.closedness_residual = crate::eta::closedness_residual(&field);

    let gauge_identity = christoffel_gauge_residual(source, eta, &field, &f_dual);
    Ok(ChristoffelTransform { target, target_eta: field, f_dual, closedness, gauge_identity })
}

fn euclidean_derivs(
    source: &SurfacePatch,
) -> (GridData<DVector<f64>>, GridData<DVector<f64>>) {
    if let Some(c) = &source.analytic {
        let g = &source.grid;
        (
            GridData::from_fn(g.nu, g.nv, |iu, iv| c.f_u(g.u(iu), g.v(iv))),
            GridData::from_fn(g.nu, g.nv, |iu, iv| c.f_v(g.u(iu), g.v(iv))),
        )
    } else {
        (
            grid_diff(&source.f, &source.grid, Axis::U, 1, 5),
            grid_diff(&source.f, &source.grid, Axis::V, 1, 5),
        )
    }
}

/// exp(x wedge pole) for Euclidean x and null pole: nilpotent, exact.
pub fn translation_exp(x: &DVector<f64>, pole: &LorentzVector, dim: usize) -> DMatrix<f64> {
    let b = Bivector::wedge(LorentzVector::from_euclidean(x), pole.clone()).to_matrix(dim);
    let b2 = &b * &b;
    DMatrix::identity(dim, dim) + b + b2 * 0.5
}

fn invert_translation(e: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    // Gram inverse of an orthogonal map.
    let g = crate::lorentz::gram_matrix(dim);
    &g * e.transpose() * &g
}

/// Gamma^c(t) = exp(f^c wedge v0) Gamma_{<v0>}^{<vinf>}(t) exp(-f wedge vinf).
pub fn christoffel_gauge(
    source: &SurfacePatch,
    f_dual: &GridData<DVector<f64>>,
    iu: usize,
    iv: usize,
    t: f64,
) -> DMatrix<f64> {
    let dim = source.ambient_n() + 2;
    let chart = &source.chart;
    let e_c = translation_exp(f_dual.at(iu, iv), &chart.origin, dim);
    let gamma0 = gauge_map_node(&chart.origin, &chart.infinity, t);
    let e_f = translation_exp(&(-source.f.at(iu, iv)), &chart.infinity, dim);
    e_c * gamma0 * e_f
}

fn christoffel_gauge_residual(
    source: &SurfacePatch,
    eta: &EtaField,
    eta_c: &EtaField,
    f_dual: &GridData<DVector<f64>>,
) -> f64 {
    let grid = &source.grid;
    let dim = source.ambient_n() + 2;
    let mut worst = 0.0f64;
    for &t in crate::conserved::T_SAMPLES.iter() {
        let gammas = GridData::from_fn(grid.nu, grid.nv, |iu, iv| {
            christoffel_gauge(source, f_dual, iu, iv, t)
        });
        let flat = gammas.map(|mtx| DVector::from_column_slice(mtx.as_slice()));
        let wrap = eta_c.grid.periodic_u;
        let du = grid_diff_with(&flat, grid, Axis::U, 1, 5, wrap);
        let dv = grid_diff_with(&flat, grid, Axis::V, 1, 5, false);
        for iv in (0..grid.nv).step_by(3) {
            for iu in (0..grid.nu).step_by(3) {
                let gam = gammas.at(iu, iv);
                let gam_inv = invert_translation(gam, dim); // orthogonal
                for (axis, d) in [(Axis::U, du.at(iu, iv)), (Axis::V, dv.at(iu, iv))] {
                    let dgam = DMatrix::from_column_slice(dim, dim, d.as_slice());
                    let lhs = -(&dgam * &gam_inv)
                        + gam * eta.value(iu, iv, axis) * &gam_inv * t
                        - eta_c.value(iu, iv, axis) * t;
                    worst = worst.max(lhs.amax());
                }
            }
        }
    }
    worst
}

/// Transports a conserved quantity across a Christoffel transform:
/// q(t) = Gamma^c(t) p(t), with the degree shift handled on the chart's
/// null-pair components.
pub fn christoffel_conserved(
    p: &PolynomialSection,
    source: &SurfacePatch,
    xf: &ChristoffelTransform,
) -> Result<PolynomialSection> {
    let grid = &source.grid;
    let chart = &source.chart;
    let d = p.degree();
    let dim = p.dim();
    let n = dim - 2;
    let scale = p.coord_scale();

    // Hypothesis: p(0) orthogonal to the chart infinity.
    let mut worst_pairing = 0.0f64;
    for v in p.coeffs[0].iter() {
        worst_pairing = worst_pairing.max(inner(v, &chart.infinity).abs());
    }
    if worst_pairing > 1e-8 * scale {
        return Err(GeomError::HypothesisFails(format!(
            "p(0) is not orthogonal to the chart infinity: pairing {worst_pairing:e}"
        )));
    }

    let (nu, nv) = (grid.nu, grid.nv);
    let mut out: Vec<GridData<LorentzVector>> =
        vec![GridData::fill(nu, nv, LorentzVector::zeros(n)); d + 1];
    let mut top_defect = 0.0f64;
    for iv in 0..nv {
        for iu in 0..nu {
            let e_f = translation_exp(&(-source.f.at(iu, iv)), &chart.infinity, dim);
            let e_c = translation_exp(xf.f_dual.at(iu, iv), &chart.origin, dim);
            // Untranslated coefficients and their null-pair components.
            let mut alpha = Vec::with_capacity(d + 2); // along origin
            let mut beta = Vec::with_capacity(d + 2); // along infinity
            let mut rest: Vec<DVector<f64>> = Vec::with_capacity(d + 1);
            for k in 0..=d {
                let moved = &e_f * p.coeffs[k].at(iu, iv).coords();
                let mv = LorentzVector::new(moved.clone()).expect("finite coefficient");
                let a = -inner(&mv, &chart.infinity);
                let b = -inner(&mv, &chart.origin);
                let mut r = moved;
                r.axpy(-a, chart.origin.coords(), 1.0);
                r.axpy(-b, chart.infinity.coords(), 1.0);
                alpha.push(a);
                beta.push(b);
                rest.push(r);
            }
            // Gamma0(t): t on <infinity>, 1/t on <origin>. Descending shift
            // for alpha (alpha_0 = 0 by hypothesis), ascending for beta;
            // beta_d pairs against the lift, so the degree is preserved.
            top_defect = top_defect.max(alpha[0].abs() / scale.max(1e-300));
            for k in 0..=d {
                let a_new = if k < d { alpha[k + 1] } else { 0.0 };
                let b_new = if k >= 1 { beta[k - 1] } else { 0.0 };
                if k == d {
                    top_defect = top_defect.max(beta[d].abs() / scale.max(1e-300));
                }
                let mut q = rest[k].clone();
                q.axpy(a_new, chart.origin.coords(), 1.0);
                q.axpy(b_new, chart.infinity.coords(), 1.0);
                let qv = &e_c * q;
                *out[k].at_mut(iu, iv) = LorentzVector::new(qv).expect("finite coefficient");
            }
        }
    }
    if top_defect > 1e-5 {
        return Err(GeomError::HypothesisFails(format!(
            "Christoffel transport would raise the degree: defect {top_defect:e}"
        )));
    }
    let mut section = PolynomialSection { coeffs: out, residual: 0.0 };
    section.residual = ladder_residual(&section, &xf.target_eta, &[]);
    Ok(section)
}

/// Output of a T-transform (Calapso deformation).
#[derive(Debug, Clone)]
pub struct TTransform {
    pub s: f64,
    pub target: SurfacePatch,
    pub target_eta: EtaField,
    pub frames: GridData<OrthogonalMap>,
    /// Residual of Phi_s (d + (t+s) eta) Phi_s^{-1} = d + t eta_s.
    pub shift_identity: f64,
}

pub fn t_transform(source: &SurfacePatch, eta: &EtaField, s: f64) -> Result<TTransform> {
    let grid = &source.grid;
    let atlas = TransportAtlas::best(eta);
    let frames = parallel_frame(&atlas, s);
    let dim = eta.dim();

    // New line bundle and immersion.
    let mut f_new = GridData::fill(grid.nu, grid.nv, DVector::zeros(source.ambient_n()));
    let mut lifted = GridData::fill(grid.nu, grid.nv, LorentzVector::zeros(source.ambient_n()));
    for iv in 0..grid.nv {
        for iu in 0..grid.nu {
            let moved = frames.at(iu, iv).apply(source.lift.at(iu, iv));
            *f_new.at_mut(iu, iv) = stereo_project(&moved, &source.chart)?;
            *lifted.at_mut(iu, iv) = moved;
        }
    }
    let wrap_ok = crate::conserved::wrap_continuity(&lifted, grid) < 1e-8;
    let target_grid = CoordGrid { periodic_u: grid.periodic_u && wrap_ok, ..grid.clone() };
    let mut target = compute_fundamental(
        f_new,
        target_grid.clone(),
        source.chart.clone(),
        SpaceForm::new(source.space_form.w.clone())?,
    )?;
    target.provenance = source.provenance.clone();
    target.provenance.push(format!("t_transform s={s}"));

    let eta_s_u = GridData::from_fn(grid.nu, grid.nv, |iu, iv| {
        frames.at(iu, iv).conjugate_matrix(eta.value(iu, iv, Axis::U))
    });
    let eta_s_v = GridData::from_fn(grid.nu, grid.nv, |iu, iv| {
        frames.at(iu, iv).conjugate_matrix(eta.value(iu, iv, Axis::V))
    });
    let mut field = EtaField {
        grid: target_grid,
        eta_u: eta_s_u,
        eta_v: eta_s_v,
        factored: None,
        closure: None,
        kappa: eta.kappa,
        closedness_residual: 0.0,
    };
    field.closedness_residual = crate::eta::closedness_residual(&field);
    let _ = dim;

    // The shift identity reduces to the frame gauge identity.
    let shift_identity = frame_gauge_residual(&atlas, s, &frames);
    Ok(TTransform { s, target, target_eta: field, frames, shift_identity })
}

/// q(t) = Phi_s p(t + s): coefficients by binomial expansion, then the
/// frame applied nodewise.
pub fn t_shift_section(
    p: &PolynomialSection,
    s: f64,
    frames: &GridData<OrthogonalMap>,
) -> PolynomialSection {
    let d = p.degree();
    let (nu, nv) = p.grid_dims();
    let n = p.dim() - 2;
    let mut coeffs = vec![GridData::fill(nu, nv, LorentzVector::zeros(n)); d + 1];
    for iv in 0..nv {
        for iu in 0..nu {
            for k in 0..=d {
                let mut acc = LorentzVector::zeros(n);
                let mut binom = 1.0f64;
                for j in k..=d {
                    // C(j, k) s^{j-k} p_j, binom updated incrementally.
                    acc.axpy(binom * s.powi((j - k) as i32), p.coeffs[j].at(iu, iv));
                    binom = binom * (j + 1) as f64 / (j + 1 - k) as f64;
                }
                *coeffs[k].at_mut(iu, iv) = frames.at(iu, iv).apply(&acc);
            }
        }
    }
    PolynomialSection { coeffs, residual: p.residual }
}

/// Lawson data of a T-transformed generalised H-surface.
#[derive(Debug, Clone)]
pub struct LawsonCheck {
    pub h_s: f64,
    pub k_s: f64,
    /// |H_s^2 + K_s - (H^2 + K)|
    pub defect: f64,
}

/// Reads the transformed mean curvature and space-form curvature off the
/// transported degree-1 quantity: H_s = -(q_1, q_0), K_s = -(q_0, q_0).
pub fn lawson_check(source: &SurfacePatch, eta: &EtaField, s: f64) -> Result<LawsonCheck> {
    let p = crate::conserved::build_type1(source, eta)?;
    let atlas = TransportAtlas::best(eta);
    let frames = parallel_frame(&atlas, s);
    let q = t_shift_section(&p, s, &frames);
    let (nu, nv) = q.grid_dims();
    let count = (nu * nv) as f64;
    let mut h_s = 0.0;
    let mut k_s = 0.0;
    for iv in 0..nv {
        for iu in 0..nu {
            h_s -= inner(q.coeffs[1].at(iu, iv), q.coeffs[0].at(iu, iv));
            k_s -= inner(q.coeffs[0].at(iu, iv), q.coeffs[0].at(iu, iv));
        }
    }
    h_s /= count;
    k_s /= count;
    let h = source.mean_h_value();
    let k = source.space_form.curvature();
    let defect = (h_s * h_s + k_s - (h * h + k)).abs();
    Ok(LawsonCheck { h_s, k_s, defect })
}

/// Fourth surface of the Bianchi quadrilateral, built algebraically.
#[derive(Debug, Clone)]
pub struct BianchiQuad {
    /// Parallel lift of the fourth surface w.r.t. the pencil of pair1's
    /// target, spectral parameter m2.
    pub g_hat: GridData<LorentzVector>,
    /// Worst angle between the two closed-form expressions for the line.
    pub expression_gap: f64,
    /// Residual of g_hat as a (d + m2 eta_1)-parallel section.
    pub parallel_residual: f64,
    /// Conserved quantity with p-hat(0) = p(0), when a source quantity
    /// with the orthogonality property was supplied.
    pub transported: Option<PolynomialSection>,
}

pub fn bianchi_quadrilateral(
    source: &SurfacePatch,
    pair1: &DarbouxPair,
    pair2: &DarbouxPair,
    p: Option<&PolynomialSection>,
) -> Result<BianchiQuad> {
    let (m1, m2) = (pair1.m, pair2.m);
    if (m1 - m2).abs() < 1e-12 * (1.0 + m1.abs()) {
        return Err(GeomError::Invalid("permutability needs distinct parameters".into()));
    }
    let grid = &source.grid;
    let mut expression_gap = 0.0f64;
    let mut g_hat = GridData::fill(grid.nu, grid.nv, LorentzVector::zeros(source.ambient_n()));
    for iv in 0..grid.nv {
        for iu in 0..grid.nu {
            let f = source.lift.at(iu, iv);
            let g1 = pair1.g_section.at(iu, iv);
            let g2 = pair2.g_section.at(iu, iv);
            if inner(g1, g2).abs()
                < 1e-10 * g1.coord_norm() * g2.coord_norm()
            {
                return Err(GeomError::TransformDegenerate { bad: 1 });
            }
            let a = LorentzVector::new(
                gauge_map_node(f, g1, 1.0 - m2 / m1) * g2.coords(),
            )
            .expect("finite quadrilateral lift");
            let b = LorentzVector::new(
                gauge_map_node(f, g2, 1.0 - m1 / m2) * g1.coords(),
            )
            .expect("finite quadrilateral lift");
            // Same line, different scales: compare directions.
            let cosang = a.coords().normalize().dot(&b.coords().normalize()).abs();
            expression_gap = expression_gap.max((1.0 - cosang.min(1.0)).sqrt());
            *g_hat.at_mut(iu, iv) = a;
        }
    }
    let parallel_residual = connection_residual(&g_hat, &pair1.target_eta, m2);
    let transported = match p {
        Some(p) => {
            let p1 = gauge_conserved(p, source, pair1)?;
            let lite = DarbouxPair {
                m: m2,
                g_section: g_hat.clone(),
                target: pair1.target.clone(),
                target_eta: pair1.target_eta.clone(),
                diagnostics: PairDiagnostics::default(),
            };
            Some(gauge_conserved(&p1, &pair1.target, &lite)?)
        }
        None => None,
    };
    Ok(BianchiQuad { g_hat, expression_gap, parallel_residual, transported })
}
