//! Acceptance suite: one test per claim, each printing a PASS line with
//! the measured figures. Desk scale: 64x64 and 128x128 grids.

use isothermic_core::congruence::{
    coincidence_test, envelope_quadric, pair_sphere_planes, sphere_plane_recovery,
};
use isothermic_core::conserved::{
    build_type1, check_darboux_bianchi, fit_class_constants, normalize_spectral, section_unknowns,
    solve_conserved, spectral_polynomial, subspace_angle, ClassConstants, PolynomialSection,
    SolveOptions,
};
use isothermic_core::error::GeomError;
use isothermic_core::eta::{build_eta, build_eta_with, BuildEtaOptions, EtaField};
use isothermic_core::grid::CoordGrid;
use isothermic_core::lorentz::inner;
use isothermic_core::pencil::{holonomy_residual, parallel_frame, TransportAtlas};
use isothermic_core::surface::{
    compute_fundamental, generate_surface, SurfaceKind, SurfacePatch,
};
use isothermic_core::transforms::{
    bianchi_quadrilateral, christoffel_conserved, christoffel_transform, complementary_surfaces,
    darboux_transform, gauge_conserved, lawson_check, promote_degree, t_shift_section,
    t_transform, DarbouxSeed,
};
use nalgebra::DVector;

const TAU: f64 = 2.0 * std::f64::consts::PI;

fn cylinder(n: usize) -> (SurfacePatch, EtaField) {
    let g = CoordGrid::new(n, n, (0.0, TAU), (-1.0, 1.0), true, false).unwrap();
    let p = generate_surface(&SurfaceKind::Cylinder { radius: 1.0 }, g, None).unwrap();
    let eta = build_eta(&p).unwrap();
    (p, eta)
}

/// Darboux-of-cylinder degree-2 patch used by the congruence criteria;
/// parameter and seed keep the envelope bounded on the whole patch.
fn type2_patch(
    n: usize,
) -> (SurfacePatch, EtaField, isothermic_core::transforms::DarbouxPair, PolynomialSection) {
    let (p, eta) = cylinder(n);
    let base = build_type1(&p, &eta).unwrap();
    let pair =
        darboux_transform(&p, &eta, 0.4, &DarbouxSeed::Angle { angle: 2.0, radius: 1.5 }).unwrap();
    let hat = gauge_conserved(&promote_degree(&base, 0.4).unwrap(), &p, &pair).unwrap();
    (p, eta, pair, hat)
}

#[test]
fn criterion_01_flat_pencil_law() {
    let (_, eta64) = cylinder(64);
    let atlas64 = TransportAtlas::midpoint(&eta64);
    let ts = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
    let mut worst64 = 0.0f64;
    for &t in &ts {
        let r = holonomy_residual(&atlas64, t);
        assert!(r <= 1e-3, "holonomy({t}) = {r:e} exceeds 1e-3 at 64x64");
        worst64 = worst64.max(r);
    }
    let (_, eta128) = cylinder(128);
    let atlas128 = TransportAtlas::midpoint(&eta128);
    let mut worst128 = 0.0f64;
    for &t in &ts {
        worst128 = worst128.max(holonomy_residual(&atlas128, t));
    }
    let ratio = worst64 / worst128;
    assert!(ratio >= 3.5, "refinement ratio {ratio} below 3.5");
    println!(
        "ACCEPTANCE 01 flat-pencil law: PASS (max holonomy {worst64:.2e} at 64x64, refinement ratio {ratio:.1})"
    );
}

#[test]
fn criterion_02_type1_closed_form() {
    let (p, eta) = cylinder(64);
    let mut sec = build_type1(&p, &eta).unwrap();
    assert!(sec.residual <= 1e-6, "ladder residual {:e} exceeds 1e-6", sec.residual);
    let spec = normalize_spectral(&mut sec);
    let expect = [0.0, -1.0, 1.0];
    for (a, e) in spec.coeffs.iter().zip(expect.iter()) {
        assert!(
            (a - e).abs() <= 1e-8,
            "spectral coefficient {a} vs {e}: {:?}",
            spec.coeffs
        );
    }
    println!(
        "ACCEPTANCE 02 type-1 closed form: PASS (ladder residual {:.2e}, spectral within {:.2e} of t^2 - t)",
        sec.residual,
        spec.coeffs
            .iter()
            .zip(expect.iter())
            .map(|(a, e)| (a - e).abs())
            .fold(0.0f64, f64::max)
    );
}

#[test]
fn criterion_03_solver_vs_closed_form() {
    let (p, eta) = cylinder(64);
    let hits = solve_conserved(&eta, 1, &SolveOptions { tol: 1e-5, threads: 2 }).unwrap();
    assert_eq!(hits.len(), 1, "degree-1 solution space must be one-dimensional");
    let closed = build_type1(&p, &eta).unwrap();
    let angle =
        subspace_angle(&[section_unknowns(&hits[0].section)], &[section_unknowns(&closed)]);
    assert!(angle <= 1e-6, "subspace angle {angle:e} exceeds 1e-6");

    let empty = solve_conserved(&eta, 0, &SolveOptions { tol: 1e-5, threads: 1 }).unwrap();
    assert!(empty.is_empty(), "full cylinder must have no degree-0 quantity");

    let g = CoordGrid::new(64, 64, (0.0, TAU), (-0.8, 0.8), true, false).unwrap();
    let sphere = generate_surface(&SurfaceKind::SpherePatch { radius: 1.0 }, g, None).unwrap();
    let eta_s = build_eta_with(&sphere, &BuildEtaOptions { allow_umbilic: true }).unwrap();
    let hits_s = solve_conserved(&eta_s, 0, &SolveOptions { tol: 1e-5, threads: 1 }).unwrap();
    assert!(!hits_s.is_empty(), "sphere-contained patch must carry a degree-0 quantity");
    println!(
        "ACCEPTANCE 03 solver vs closed form: PASS (subspace angle {angle:.2e}, degree-0: cylinder empty, sphere patch {} solution)",
        hits_s.len()
    );
}

#[test]
fn criterion_04_darboux_raises_type() {
    let (p, eta) = cylinder(64);
    let pair = darboux_transform(&p, &eta, 0.7, &DarbouxSeed::default()).unwrap();
    let hits =
        solve_conserved(&pair.target_eta, 2, &SolveOptions { tol: 2e-4, threads: 2 }).unwrap();
    assert!(!hits.is_empty(), "transform must carry a degree-2 quantity");
    let sigma = hits[0].singular_value;
    assert!(sigma <= 1e-5, "smallest singular value {sigma:e} exceeds 1e-5");

    // Perturbed non-isothermic control fails the closedness gate.
    let g = CoordGrid::new(64, 64, (0.0, TAU), (-1.0, 1.0), true, false).unwrap();
    let f = isothermic_core::grid::GridData::from_fn(64, 64, |iu, iv| {
        let (u, v) = (g.u(iu), g.v(iv));
        let bump = 0.01 * (2.0 * u).sin() * (2.0 * v).cos();
        DVector::from_column_slice(&[(1.0 + bump) * u.cos(), (1.0 + bump) * u.sin(), v])
    });
    let chart = isothermic_core::lorentz::SpaceFormChart::standard(3);
    let w = isothermic_core::lorentz::SpaceForm::new(chart.infinity.clone()).unwrap();
    let control = compute_fundamental(f, g, chart, w).unwrap();
    let eta_c = build_eta(&control).unwrap();
    let err = solve_conserved(&eta_c, 2, &SolveOptions { tol: 2e-4, threads: 1 });
    assert!(
        matches!(err, Err(GeomError::EtaNotClosed { .. })),
        "perturbed control must fail eta-closedness, got {err:?}"
    );
    println!(
        "ACCEPTANCE 04 Darboux raises type: PASS (smallest singular value {sigma:.2e}; 1%-perturbed control rejected: closedness {:.2e})",
        eta_c.closedness_residual
    );
}

#[test]
fn criterion_05_spectral_transport() {
    let (p, eta) = cylinder(64);
    let base = build_type1(&p, &eta).unwrap();
    let spec0 = spectral_polynomial(&base).coeffs;
    let mut worst = 0.0f64;
    let mut compare = |name: &str, got: &[f64], expect: &[f64]| {
        let d = got
            .iter()
            .zip(expect.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(d <= 1e-6, "{name}: spectral drift {d:e} exceeds 1e-6\n{got:?}\n{expect:?}");
        worst = worst.max(d);
    };

    // Darboux gauge across the cylinder's complementary pair.
    let comp = complementary_surfaces(&base, &p, &eta).unwrap();
    let hat = gauge_conserved(&base, &p, &comp[0]).unwrap();
    compare("darboux gauge", &spectral_polynomial(&hat).coeffs, &spec0);

    // Christoffel transport.
    let xf = christoffel_transform(&p, &eta).unwrap();
    let q = christoffel_conserved(&base, &p, &xf).unwrap();
    compare("christoffel", &spectral_polynomial(&q).coeffs, &spec0);

    // Complementary re-gauge and Bianchi permutability on the degree-2
    // patch.
    let (_, _, pair, hat2) = type2_patch(64);
    let spec2 = spectral_polynomial(&hat2).coeffs;
    let comp2 = complementary_surfaces(&hat2, &pair.target, &pair.target_eta).unwrap();
    let c04 = comp2.iter().find(|c| (c.m - 0.4).abs() < 1e-3).unwrap();
    let c10 = comp2.iter().find(|c| (c.m - 1.0).abs() < 1e-3).unwrap();
    let regauged = gauge_conserved(&hat2, &pair.target, c10).unwrap();
    compare("complementary re-gauge", &spectral_polynomial(&regauged).coeffs, &spec2);
    let quad = bianchi_quadrilateral(&pair.target, c04, c10, Some(&hat2)).unwrap();
    compare(
        "bianchi permutability",
        &spectral_polynomial(&quad.transported.unwrap()).coeffs,
        &spec2,
    );

    // T-transform shifts by t -> t + s.
    let s = 0.25;
    let tt = t_transform(&p, &eta, s).unwrap();
    let shifted = t_shift_section(&base, s, &tt.frames);
    let expect = isothermic_core::poly::shift(&spec0, s);
    compare("t-transform shift", &spectral_polynomial(&shifted).coeffs, &expect);

    println!(
        "ACCEPTANCE 05 spectral transport: PASS (worst coefficient drift {worst:.2e} across darboux/christoffel/complementary/bianchi/t-shift)"
    );
}

#[test]
fn criterion_06_lawson_identity() {
    let (p, eta) = cylinder(64);
    let mut worst = 0.0f64;
    for s in [0.1, 0.25, 0.5] {
        let lw = lawson_check(&p, &eta, s).unwrap();
        assert!(
            lw.defect <= 1e-6,
            "lawson defect {:e} at s = {s} exceeds 1e-6 (H_s = {}, K_s = {})",
            lw.defect,
            lw.h_s,
            lw.k_s
        );
        worst = worst.max(lw.defect);
    }
    println!("ACCEPTANCE 06 Lawson identity: PASS (max defect {worst:.2e} over s in {{0.1, 0.25, 0.5}})");
}

#[test]
fn criterion_07_christoffel_class_swap() {
    let (_, _, pair, _) = type2_patch(64);
    let patch = &pair.target;
    let fitted = fit_class_constants(patch);
    let original = check_darboux_bianchi(patch, &fitted);
    let xf = christoffel_transform(patch, &pair.target_eta).unwrap();
    let swapped = ClassConstants { a: fitted.a, b: fitted.c, c: fitted.b, d: fitted.d };
    let transformed = check_darboux_bianchi(&xf.target, &swapped);
    assert!(
        transformed <= 10.0 * original,
        "swapped-class residual {transformed:e} exceeds 10x original {original:e}"
    );
    println!(
        "ACCEPTANCE 07 Christoffel class swap: PASS (original residual {original:.2e}, (A,C,B,D) residual {transformed:.2e})"
    );
}

#[test]
fn criterion_08_complementary_without_integration() {
    let (p, eta) = cylinder(64);
    let base = build_type1(&p, &eta).unwrap();
    let comp = complementary_surfaces(&base, &p, &eta).unwrap();
    assert_eq!(comp.len(), 1);
    let pair = &comp[0];
    assert!((pair.m - 1.0).abs() < 1e-8, "root should be m = 2H = 1");
    let mut worst = 0.0f64;
    for iv in 0..p.grid.nv {
        for iu in 0..p.grid.nu {
            let (u, v) = (p.grid.u(iu), p.grid.v(iv));
            let expect = DVector::from_column_slice(&[-u.cos(), -u.sin(), v]);
            worst = worst.max((pair.target.f.at(iu, iv) - expect).norm());
        }
    }
    assert!(worst <= 1e-8, "parallel-surface deviation {worst:e} exceeds 1e-8");
    println!(
        "ACCEPTANCE 08 complementary without integration: PASS (max deviation {worst:.2e} from the parallel surface)"
    );
}

#[test]
fn criterion_09_sphere_plane_coincidence() {
    let (p, eta, pair, hat) = type2_patch(64);
    let w = p.chart.infinity.clone();
    let comp = complementary_surfaces(&hat, &pair.target, &pair.target_eta).unwrap();
    let c04 = comp.iter().find(|c| (c.m - 0.4).abs() < 1e-3).unwrap();
    let c10 = comp.iter().find(|c| (c.m - 1.0).abs() < 1e-3).unwrap();
    let p1 = pair_sphere_planes(&pair.target, c04, &w).unwrap();
    let p2 = pair_sphere_planes(&pair.target, c10, &w).unwrap();
    let gap = coincidence_test(&p1, &p2).unwrap();
    assert!(gap <= 1e-4, "complementary sphere-plane gap {gap:e} exceeds 1e-4");

    // Converse: recover the degree-2 quantity from the coincident planes.
    let rec = sphere_plane_recovery(&pair.target, &pair.target_eta, c04, c10, &w).unwrap();
    assert!(
        rec.section.residual <= 1e-4,
        "recovered quantity residual {:e} exceeds 1e-4",
        rec.section.residual
    );
    assert_eq!(rec.section.degree(), 2);

    // Negative control: generic transforms of the cylinder.
    let g1 =
        darboux_transform(&p, &eta, 0.45, &DarbouxSeed::Angle { angle: 0.4, radius: 1.3 }).unwrap();
    let g2 =
        darboux_transform(&p, &eta, 1.4, &DarbouxSeed::Angle { angle: 2.2, radius: 0.8 }).unwrap();
    let q1 = pair_sphere_planes(&p, &g1, &w).unwrap();
    let q2 = pair_sphere_planes(&p, &g2, &w).unwrap();
    let gap_neg = coincidence_test(&q1, &q2).unwrap();
    assert!(gap_neg >= 0.1, "negative-control gap {gap_neg:e} below 0.1");
    println!(
        "ACCEPTANCE 09 sphere-plane coincidence: PASS (gap {gap:.2e}, recovered residual {:.2e}, negative control gap {gap_neg:.2})",
        rec.section.residual
    );
}

#[test]
fn criterion_10_quadric_envelope() {
    let run = |n: usize| {
        let (_, _, pair, hat) = type2_patch(n);
        envelope_quadric(&hat, &pair.target, &pair.target_eta, 0.4).unwrap()
    };
    let q64 = run(64);
    assert!(
        q64.relation_residual <= 1e-4,
        "quadric relation {:e} exceeds 1e-4",
        q64.relation_residual
    );
    assert!(q64.metric_residual <= 1e-3, "metric match {:e} exceeds 1e-3", q64.metric_residual);
    let q128 = run(128);
    // Improvement under refinement; a residual already at the numerical
    // floor (1e-9, five orders under tolerance) counts as converged.
    let floor = 1e-9;
    let rel_ok = q64.relation_residual / q128.relation_residual >= 3.0
        || q64.relation_residual.max(q128.relation_residual) < floor;
    let met_ok = q64.metric_residual / q128.metric_residual >= 3.0
        || q64.metric_residual.max(q128.metric_residual) < floor;
    assert!(rel_ok, "relation residual fails to improve: {:e} -> {:e}", q64.relation_residual, q128.relation_residual);
    assert!(met_ok, "metric residual fails to improve: {:e} -> {:e}", q64.metric_residual, q128.metric_residual);
    println!(
        "ACCEPTANCE 10 quadric envelope: PASS (relation {:.2e}, metric {:.2e} at 64x64; metric improves {:.1}x at 128x128)",
        q64.relation_residual,
        q64.metric_residual,
        q64.metric_residual / q128.metric_residual
    );
}

/// The class constants extracted from the spectral polynomial agree with
/// the constants fitted from the surface scalars, and leave a comparable
/// Darboux-Bianchi residual; the fit works from differenced curvature data
/// on the spiraling transform, so the comparison carries that error bar.
#[test]
fn class_constant_dictionaries_agree() {
    let (p, eta, pair, mut hat) = type2_patch(64);
    let spec = normalize_spectral(&mut hat);
    let extracted = isothermic_core::conserved::extract_class_constants(
        &spec,
        &hat,
        &pair.target,
        pair.target_eta.kappa,
    );
    let fitted = fit_class_constants(&pair.target);
    for (a, b, name) in [
        (extracted.a, fitted.a, "A"),
        (extracted.b, fitted.b, "B"),
        (extracted.c, fitted.c, "C"),
        (extracted.d, fitted.d, "D"),
    ] {
        assert!((a - b).abs() < 0.05, "{name}: extracted {a} vs fitted {b}");
    }
    let db_ex = check_darboux_bianchi(&pair.target, &extracted);
    let db_fit = check_darboux_bianchi(&pair.target, &fitted);
    assert!(db_ex <= 2.0 * db_fit + 1e-6, "extracted DB {db_ex:e} vs fitted floor {db_fit:e}");
    let _ = (inner(&p.chart.origin, &p.chart.infinity), eta.kappa, parallel_frame);
}
