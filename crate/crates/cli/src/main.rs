//! Command-line front end: surface generation, analysis pipelines,
//! transform chains, congruence checks, and data export.
//!
//! Exit codes: 0 success, 2 validation error, 3 numerical degeneracy,
//! 4 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use isothermic_core::conserved::{
    build_type1, extract_class_constants, normalize_spectral, solve_conserved,
    spectral_polynomial, verify_structure, PolynomialSection, SolveOptions,
};
use isothermic_core::congruence::{
    coincidence_test, envelope_quadric, pair_sphere_planes, spherical_system,
};
use isothermic_core::error::GeomError;
use isothermic_core::eta::{build_eta_with, BuildEtaOptions, EtaField};
use isothermic_core::grid::CoordGrid;
use isothermic_core::io::{read_surface, write_scalar_csv, write_surface, write_vector_csv};
use isothermic_core::report::{Report, Value};
use isothermic_core::surface::{generate_surface, SurfaceKind, SurfacePatch};
use isothermic_core::transforms::{
    christoffel_conserved, christoffel_transform, darboux_transform, gauge_conserved,
    lawson_check, promote_degree, t_shift_section, t_transform, DarbouxSeed,
};

#[derive(Parser)]
#[command(name = "isothermic", about = "Light-cone calculus of isothermic surfaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a surface file from a config.
    Generate(CommonArgs),
    /// Analyze a surface for polynomial conserved quantities.
    Analyze(CommonArgs),
    /// Apply a transform chain and report the identity residuals.
    Transform(CommonArgs),
    /// Sphere-congruence checks and the quadric envelope.
    Congruence(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (overrides the config).
    #[arg(long)]
    threads: Option<usize>,
    /// Solver tolerance (overrides the config).
    #[arg(long)]
    tol: Option<f64>,
    /// Seed angle for Darboux transforms (overrides the config).
    #[arg(long)]
    seed_angle: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    surface: Option<SurfaceSpec>,
    #[serde(default)]
    surface_file: Option<PathBuf>,
    #[serde(default)]
    transforms: Vec<TransformStep>,
    #[serde(default)]
    solver: SolverSpec,
    #[serde(default)]
    congruence: Option<CongruenceSpec>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default = "default_threads")]
    threads: usize,
}

fn default_threads() -> usize {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SurfaceSpec {
    kind: SurfaceKind,
    nu: usize,
    nv: usize,
    u_range: [f64; 2],
    v_range: [f64; 2],
    #[serde(default = "default_true")]
    periodic_u: bool,
    #[serde(default)]
    periodic_v: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
enum TransformStep {
    Darboux {
        m: f64,
        #[serde(default)]
        seed_angle: f64,
        #[serde(default = "default_radius")]
        seed_radius: f64,
    },
    Christoffel {},
    TTransform {
        s: f64,
    },
    Analyze {
        max_degree: usize,
    },
}

fn default_radius() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverSpec {
    #[serde(default = "default_degree")]
    max_degree: usize,
    #[serde(default = "default_tol")]
    tol: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self { max_degree: default_degree(), tol: default_tol() }
    }
}

fn default_degree() -> usize {
    2
}

fn default_tol() -> f64 {
    1e-4
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CongruenceSpec {
    /// Darboux parameter for the type-2 pipeline.
    m: f64,
    #[serde(default = "default_cong_angle")]
    seed_angle: f64,
    #[serde(default = "default_cong_radius")]
    seed_radius: f64,
    /// Spectral root at which to build the quadric envelope; defaults to m.
    #[serde(default)]
    envelope_root: Option<f64>,
}

fn default_cong_angle() -> f64 {
    2.0
}

fn default_cong_radius() -> f64 {
    1.5
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::Generate(a) => ("generate", a),
        Command::Analyze(a) => ("analyze", a),
        Command::Transform(a) => ("transform", a),
        Command::Congruence(a) => ("congruence", a),
    };
    match run(name, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_class(&e))
        }
    }
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Numerical(GeomError),
    Io(std::io::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(s) => write!(f, "invalid configuration: {s}"),
            CliError::Numerical(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "i/o: {e}"),
        }
    }
}

fn exit_class(e: &CliError) -> u8 {
    match e {
        CliError::Validation(_) => 2,
        CliError::Numerical(inner) => match inner {
            GeomError::Invalid(_)
            | GeomError::DimensionMismatch(_, _)
            | GeomError::GridTooSmall { .. }
            | GeomError::NonUniformGrid
            | GeomError::ProfileTooSteep(_) => 2,
            _ => 3,
        },
        CliError::Io(_) => 4,
    }
}

fn geom(e: GeomError) -> CliError {
    CliError::Numerical(e)
}

fn run(name: &str, args: &CommonArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.config).map_err(CliError::Io)?;
    let mut config: RunConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Validation(e.to_string()))?;
    if let Some(t) = args.threads {
        config.threads = t.max(1);
    }
    if let Some(t) = args.tol {
        config.solver.tol = t;
    }
    if let Some(a) = args.seed_angle {
        if let Some(c) = config.congruence.as_mut() {
            c.seed_angle = a;
        }
        for step in &mut config.transforms {
            if let TransformStep::Darboux { seed_angle, .. } = step {
                *seed_angle = a;
            }
        }
    }
    let out_dir = args
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir).map_err(CliError::Io)?;

    match name {
        "generate" => cmd_generate(&config, &out_dir),
        "analyze" => cmd_analyze(&config, &out_dir),
        "transform" => cmd_transform(&config, &out_dir),
        "congruence" => cmd_congruence(&config, &out_dir),
        _ => unreachable!(),
    }
}

fn build_input(config: &RunConfig) -> Result<(SurfacePatch, Option<SurfaceKind>), CliError> {
    match (&config.surface, &config.surface_file) {
        (Some(spec), None) => {
            let grid = CoordGrid::new(
                spec.nu,
                spec.nv,
                (spec.u_range[0], spec.u_range[1]),
                (spec.v_range[0], spec.v_range[1]),
                spec.periodic_u,
                spec.periodic_v,
            )
            .map_err(geom)?;
            let patch = generate_surface(&spec.kind, grid, None).map_err(geom)?;
            Ok((patch, Some(spec.kind.clone())))
        }
        (None, Some(path)) => Ok((read_surface(path).map_err(geom)?, None)),
        (Some(_), Some(_)) => {
            Err(CliError::Validation("give either surface or surface_file, not both".into()))
        }
        (None, None) => Err(CliError::Validation("a surface or surface_file is required".into())),
    }
}

fn eta_for(patch: &SurfacePatch) -> Result<EtaField, CliError> {
    build_eta_with(patch, &BuildEtaOptions { allow_umbilic: true }).map_err(geom)
}

fn patch_summary(patch: &SurfacePatch) -> Value {
    let mut v = Value::object();
    v.push("nu", patch.grid.nu)
        .push("nv", patch.grid.nv)
        .push("theta_mean", patch.theta.mean())
        .push("mean_curvature", patch.mean_h_value())
        .push("conformality_residual", patch.residuals.conformality)
        .push("offdiag_ii_residual", patch.residuals.offdiag_ii)
        .push("membership_residual", patch.residuals.membership)
        .push("cmc", patch.flags.cmc)
        .push("totally_umbilic", patch.flags.totally_umbilic);
    v
}

fn write_report(out_dir: &Path, report: &Report) -> Result<(), CliError> {
    std::fs::write(out_dir.join("report.json"), report.to_json()).map_err(CliError::Io)
}

fn cmd_generate(config: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let (patch, kind) = build_input(config)?;
    write_surface(&out_dir.join("surface.surf"), &patch, kind.as_ref()).map_err(geom)?;
    let conformality = isothermic_core::surface::conformality_grid(&patch);
    for (name, data) in [
        ("theta", &patch.theta),
        ("mean_curvature", &patch.mean_h),
        ("k1", &patch.k1),
        ("k2", &patch.k2),
        ("conformality_residual", &conformality),
    ] {
        write_scalar_csv(&out_dir.join(format!("{name}.csv")), &patch.grid, data, name)
            .map_err(geom)?;
    }
    let mut report = Report::new("generate");
    report.set("surface", patch_summary(&patch));
    if patch.flags.totally_umbilic {
        report.set("warnings", Value::Array(vec![Value::Str("totally umbilic".into())]));
    }
    write_report(out_dir, &report)
}

fn analyze_value(
    patch: &SurfacePatch,
    eta: &EtaField,
    solver: &SolverSpec,
    threads: usize,
) -> Result<Value, CliError> {
    let mut section = Value::object();
    section.push("eta_closedness", eta.closedness_residual);
    section.push("eta_scale_constant", eta.kappa);
    let mut verdict = format!("not special <= {}", solver.max_degree);
    let mut best: Option<(usize, PolynomialSection, f64)> = None;
    let mut degrees = Value::object();
    for d in 0..=solver.max_degree {
        let hits =
            solve_conserved(eta, d, &SolveOptions { tol: solver.tol, threads }).map_err(geom)?;
        let mut entry = Value::object();
        entry.push("solutions", hits.len());
        if let Some(h) = hits.first() {
            entry.push("smallest_singular_value", h.singular_value);
            if best.is_none() {
                verdict = format!("type {d}");
                best = Some((d, h.section.clone(), h.singular_value));
            }
        }
        degrees.push(&format!("degree_{d}"), entry);
    }
    section.push("degrees", degrees);
    section.push("verdict", verdict.as_str());
    if let Some((d, mut sec, sigma)) = best {
        let spec = normalize_spectral(&mut sec);
        let mut b = Value::object();
        b.push("degree", d);
        b.push("singular_value", sigma);
        b.push("ladder_residual", sec.residual);
        b.push("spectral_coefficients", Value::floats(spec.coeffs.iter().copied()));
        b.push("spectral_constancy", spec.constancy_residual);
        let roots: Vec<Value> = spec
            .roots
            .real
            .iter()
            .map(|r| {
                let mut o = Value::object();
                o.push("value", r.value).push("multiplicity", r.multiplicity);
                o
            })
            .collect();
        b.push("real_roots", Value::Array(roots));
        b.push("complex_root_pairs", spec.roots.complex_pairs);
        let rep = verify_structure(&sec, patch);
        let mut s = Value::object();
        s.push("p0_spread", rep.p0_spread)
            .push("top_orthogonality", rep.top_orthogonality)
            .push("normal_parallelism", rep.normal_parallelism);
        b.push("structure", s);
        if d == 2 {
            let consts = extract_class_constants(&spec, &sec, patch, eta.kappa);
            let mut c = Value::object();
            c.push("a", consts.a).push("b", consts.b).push("c", consts.c).push("d", consts.d);
            b.push("class_constants", c);
            b.push(
                "darboux_bianchi_residual",
                isothermic_core::conserved::check_darboux_bianchi(patch, &consts),
            );
        }
        section.push("best_quantity", b);
    }
    Ok(section)
}

fn cmd_analyze(config: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let (patch, _) = build_input(config)?;
    let eta = eta_for(&patch)?;
    let mut report = Report::new("analyze");
    report.set("surface", patch_summary(&patch));
    report.set("analysis", analyze_value(&patch, &eta, &config.solver, config.threads)?);
    // Persist the best quantity alongside the report.
    for d in 0..=config.solver.max_degree {
        let hits = solve_conserved(&eta, d, &SolveOptions { tol: config.solver.tol, threads: config.threads })
            .map_err(geom)?;
        if let Some(h) = hits.first() {
            isothermic_core::io::write_section(&out_dir.join("quantity.sec"), &h.section)
                .map_err(geom)?;
            break;
        }
    }
    write_report(out_dir, &report)
}

fn cmd_transform(config: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let (mut patch, _) = build_input(config)?;
    let mut eta = eta_for(&patch)?;
    // Track a conserved quantity through the chain when the input is CMC.
    let mut tracked: Option<PolynomialSection> = build_type1(&patch, &eta).ok();
    let mut report = Report::new("transform");
    report.set("input", patch_summary(&patch));
    if let Some(t) = &tracked {
        report
            .set("input_spectral", Value::floats(spectral_polynomial(t).coeffs.iter().copied()));
    }
    let mut steps = Vec::new();
    for step in &config.transforms {
        match step {
            TransformStep::Darboux { m, seed_angle, seed_radius } => {
                let pair = darboux_transform(
                    &patch,
                    &eta,
                    *m,
                    &DarbouxSeed::Angle { angle: *seed_angle, radius: *seed_radius },
                )
                .map_err(geom)?;
                let mut s = Value::object();
                s.push("step", "darboux")
                    .push("m", *m)
                    .push("g_nullity", pair.diagnostics.g_nullity)
                    .push("min_pairing", pair.diagnostics.min_pairing)
                    .push("gauge_identity", pair.diagnostics.gauge_identity)
                    .push("wrap_defect", pair.diagnostics.wrap_defect);
                tracked = match tracked.take() {
                    Some(p) => {
                        let promoted = promote_degree(&p, *m).map_err(geom)?;
                        let hat = gauge_conserved(&promoted, &patch, &pair).map_err(geom)?;
                        s.push(
                            "transported_spectral",
                            Value::floats(spectral_polynomial(&hat).coeffs.iter().copied()),
                        );
                        s.push("transported_residual", hat.residual);
                        Some(hat)
                    }
                    None => None,
                };
                patch = pair.target;
                eta = pair.target_eta;
                steps.push(s);
            }
            TransformStep::Christoffel {} => {
                let xf = christoffel_transform(&patch, &eta).map_err(geom)?;
                let mut s = Value::object();
                s.push("step", "christoffel")
                    .push("dual_closedness", xf.closedness)
                    .push("gauge_identity", xf.gauge_identity);
                tracked = match tracked.take() {
                    Some(p) => match christoffel_conserved(&p, &patch, &xf) {
                        Ok(q) => {
                            s.push(
                                "transported_spectral",
                                Value::floats(spectral_polynomial(&q).coeffs.iter().copied()),
                            );
                            s.push("transported_residual", q.residual);
                            Some(q)
                        }
                        Err(e) => {
                            s.push("transport_skipped", format!("{e}"));
                            None
                        }
                    },
                    None => None,
                };
                patch = xf.target;
                eta = xf.target_eta;
                steps.push(s);
            }
            TransformStep::TTransform { s: shift } => {
                let lawson =
                    if patch.flags.cmc { lawson_check(&patch, &eta, *shift).ok() } else { None };
                let tt = t_transform(&patch, &eta, *shift).map_err(geom)?;
                let mut s = Value::object();
                s.push("step", "t_transform")
                    .push("s", *shift)
                    .push("shift_identity", tt.shift_identity);
                if let Some(lw) = lawson {
                    let mut l = Value::object();
                    l.push("h_s", lw.h_s).push("k_s", lw.k_s).push("defect", lw.defect);
                    s.push("lawson", l);
                }
                tracked = tracked.take().map(|p| {
                    let q = t_shift_section(&p, *shift, &tt.frames);
                    s.push(
                        "transported_spectral",
                        Value::floats(spectral_polynomial(&q).coeffs.iter().copied()),
                    );
                    q
                });
                patch = tt.target;
                eta = tt.target_eta;
                steps.push(s);
            }
            TransformStep::Analyze { max_degree } => {
                let spec = SolverSpec { max_degree: *max_degree, tol: config.solver.tol };
                let mut s = Value::object();
                s.push("step", "analyze");
                s.push("analysis", analyze_value(&patch, &eta, &spec, config.threads)?);
                steps.push(s);
            }
        }
    }
    report.set("steps", Value::Array(steps));
    report.set("output", patch_summary(&patch));
    report.set(
        "provenance",
        Value::Array(patch.provenance.iter().map(|p| Value::Str(p.clone())).collect()),
    );
    write_surface(&out_dir.join("surface.surf"), &patch, None).map_err(geom)?;
    write_report(out_dir, &report)
}

fn cmd_congruence(config: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let (patch, _) = build_input(config)?;
    let eta = eta_for(&patch)?;
    let base = build_type1(&patch, &eta).map_err(geom)?;
    let spec = config
        .congruence
        .as_ref()
        .ok_or_else(|| CliError::Validation("congruence section required".into()))?;
    let pair = darboux_transform(
        &patch,
        &eta,
        spec.m,
        &DarbouxSeed::Angle { angle: spec.seed_angle, radius: spec.seed_radius },
    )
    .map_err(geom)?;
    let promoted = promote_degree(&base, spec.m).map_err(geom)?;
    let mut hat = gauge_conserved(&promoted, &patch, &pair).map_err(geom)?;
    let spectral = normalize_spectral(&mut hat);

    let mut report = Report::new("congruence");
    report.set("surface", patch_summary(&patch));
    report.set("type2_spectral", Value::floats(spectral.coeffs.iter().copied()));

    // Complementary surfaces and their sphere-planes.
    let comp =
        isothermic_core::transforms::complementary_surfaces(&hat, &pair.target, &pair.target_eta)
            .map_err(geom)?;
    let mut gaps = Value::object();
    let w = &patch.chart.infinity;
    if comp.len() >= 2 {
        let sys: Result<Vec<_>, _> =
            comp.iter().map(|c| pair_sphere_planes(&pair.target, c, w)).collect();
        let sys = sys.map_err(geom)?;
        let gap = coincidence_test(&sys[0], &sys[1]).map_err(geom)?;
        gaps.push("complementary_sphere_plane_gap", gap);
        gaps.push(
            "verdict",
            if gap < 1e-4 { "sphere-planes coincide" } else { "sphere-planes differ" },
        );
    }
    // Flatness of the spherical system of the original pair.
    let sys = spherical_system(&patch, &pair).map_err(geom)?;
    gaps.push("spherical_system_flatness", sys.flatness_residual);
    report.set("coincidence", gaps);

    // Quadric envelope at the requested root.
    let root = spec.envelope_root.unwrap_or(spec.m);
    let quad = envelope_quadric(&hat, &pair.target, &pair.target_eta, root).map_err(geom)?;
    let mut q = Value::object();
    let c = &quad.coefficients;
    let mut coefs = Value::object();
    coefs
        .push("alpha_sq", c.c_aa)
        .push("alpha_beta", c.c_ab)
        .push("alpha_gamma", c.c_ag)
        .push("beta_gamma", c.c_bg)
        .push("alpha", c.c_a);
    q.push("root", root)
        .push("coefficients", coefs)
        .push("relation_residual", quad.relation_residual)
        .push("metric_residual", quad.metric_residual)
        .push("psi_residual", quad.psi_residual)
        .push("excluded_nodes", quad.excluded);
    report.set("quadric", q);
    let curve_rows = (0..patch.grid.nv).flat_map(|iv| {
        let curve = &quad.curve;
        (0..patch.grid.nu).map(move |iu| curve.at(iu, iv).clone())
    });
    write_vector_csv(&out_dir.join("quadric_curve.csv"), curve_rows, &["gamma", "beta", "alpha"])
        .map_err(geom)?;
    write_report(out_dir, &report)
}
