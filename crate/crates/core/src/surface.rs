//! Discrete surface patches in conformal curvature-line coordinates:
//! generators, light-cone lifts, and fundamental data.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{GeomError, Result};
use crate::grid::{diff_line, Axis, CoordGrid, GridData};
use crate::lorentz::{
    inner, lift_to_cone, rescale_into, LorentzVector, SpaceForm, SpaceFormChart,
};

/// Closed-form description of a generated immersion, used wherever the
/// numerics benefit from off-grid evaluation (high-order transport) or
/// exact curvature data.
pub trait SurfaceClosure: Send + Sync {
    fn f(&self, u: f64, v: f64) -> DVector<f64>;
    fn f_u(&self, u: f64, v: f64) -> DVector<f64>;
    fn f_v(&self, u: f64, v: f64) -> DVector<f64>;
    /// Unit normal with the generator's orientation (curvature-difference
    /// positive where possible).
    fn unit_normal(&self, u: f64, v: f64) -> DVector<f64>;
    fn theta(&self, u: f64, v: f64) -> f64;
    fn k1(&self, u: f64, v: f64) -> f64;
    fn k2(&self, u: f64, v: f64) -> f64;
}

/// Lift of the closure into the cone w.r.t. a chart.
pub fn closure_lift(c: &dyn SurfaceClosure, chart: &SpaceFormChart, u: f64, v: f64) -> LorentzVector {
    lift_to_cone(&c.f(u, v), chart)
}

/// d/dX of the lift: f_X + (f, f_X) * infinity.
pub fn closure_lift_deriv(
    c: &dyn SurfaceClosure,
    chart: &SpaceFormChart,
    u: f64,
    v: f64,
    axis: Axis,
) -> LorentzVector {
    let f = c.f(u, v);
    let fx = match axis {
        Axis::U => c.f_u(u, v),
        Axis::V => c.f_v(u, v),
    };
    let mut out = LorentzVector::from_euclidean(&fx);
    out.axpy(f.dot(&fx), &chart.infinity);
    out
}

/// Normal lift: n + (f, n) * infinity.
pub fn closure_normal_lift(
    c: &dyn SurfaceClosure,
    chart: &SpaceFormChart,
    u: f64,
    v: f64,
) -> LorentzVector {
    let f = c.f(u, v);
    let n = c.unit_normal(u, v);
    let mut out = LorentzVector::from_euclidean(&n);
    out.axpy(f.dot(&n), &chart.infinity);
    out
}

/// Surface generator kinds.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceKind {
    Cylinder { radius: f64 },
    Revolution { profile: Profile },
    Cone { half_angle: f64 },
    SpherePatch { radius: f64 },
    CustomProfile { profile: Profile },
}

/// Profile exponent phi(v) for surfaces of revolution
/// f(u,v) = (e^phi cos u, e^phi sin u, zeta(v)), zeta' = e^phi sqrt(1-phi'^2).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Const(f64),
    Linear { slope: f64, offset: f64 },
    Sine { amp: f64, freq: f64, offset: f64 },
}

impl Profile {
    pub fn phi(&self, v: f64) -> f64 {
        match self {
            Profile::Const(c) => *c,
            Profile::Linear { slope, offset } => slope * v + offset,
            Profile::Sine { amp, freq, offset } => amp * (freq * v).sin() + offset,
        }
    }

    pub fn phi_d(&self, v: f64) -> f64 {
        match self {
            Profile::Const(_) => 0.0,
            Profile::Linear { slope, .. } => *slope,
            Profile::Sine { amp, freq, .. } => amp * freq * (freq * v).cos(),
        }
    }

    pub fn phi_dd(&self, v: f64) -> f64 {
        match self {
            Profile::Const(_) => 0.0,
            Profile::Linear { .. } => 0.0,
            Profile::Sine { amp, freq, .. } => -amp * freq * freq * (freq * v).sin(),
        }
    }
}

/// Fundamental-data residual report (finite-difference measurements).
#[derive(Debug, Clone, Default)]
pub struct FundamentalResiduals {
    /// max | |F_u| - |F_v| |
    pub conformality: f64,
    /// max |(F_u, F_v)| / e^{2 theta}
    pub conformal_cross: f64,
    /// max off-diagonal second fundamental form / e^{2 theta}
    pub offdiag_ii: f64,
    /// max (|(F,F)|, |(F,w)+1|)
    pub membership: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PatchFlags {
    pub totally_umbilic: bool,
    pub cmc: bool,
    /// Fraction of nodes where H_u * H_v is numerically zero.
    pub hu_hv_vanishing_fraction: f64,
}

/// Discrete surface patch with light-cone lift and fundamental data.
#[derive(Clone)]
pub struct SurfacePatch {
    pub grid: CoordGrid,
    pub chart: SpaceFormChart,
    pub space_form: SpaceForm,
    /// Immersion into the chart's R^n.
    pub f: GridData<DVector<f64>>,
    /// Lift into E(w).
    pub lift: GridData<LorentzVector>,
    pub theta: GridData<f64>,
    pub k1: GridData<f64>,
    pub k2: GridData<f64>,
    pub mean_h: GridData<f64>,
    /// L = e^{2 theta} (k1 - k2)
    pub l_coef: GridData<f64>,
    /// M = -H L
    pub m_coef: GridData<f64>,
    /// Unit parallel normal lift N (codimension 1).
    pub normal: GridData<LorentzVector>,
    pub residuals: FundamentalResiduals,
    pub flags: PatchFlags,
    pub analytic: Option<Arc<dyn SurfaceClosure>>,
    /// Exact lift-derivative grids, set by transforms whose targets have
    /// algebraic derivatives (parallel sections of the source pencil).
    pub exact_lift_derivs: Option<(GridData<LorentzVector>, GridData<LorentzVector>)>,
    pub provenance: Vec<String>,
}

impl std::fmt::Debug for SurfacePatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SurfacePatch")
            .field("grid", &self.grid)
            .field("flags", &self.flags)
            .field("residuals", &self.residuals)
            .field("provenance", &self.provenance)
            .finish()
    }
}

impl SurfacePatch {
    pub fn ambient_n(&self) -> usize {
        self.f.at(0, 0).len()
    }

    pub fn mean_h_value(&self) -> f64 {
        self.mean_h.mean()
    }

    pub fn l_value(&self) -> f64 {
        self.l_coef.mean()
    }

    /// Laplacian of the lift w.r.t. the induced metric:
    /// e^{-2 theta} (F_uu + F_vv), by second-order differences.
    pub fn lift_laplacian(&self) -> GridData<LorentzVector> {
        let fuu = grid_diff_lorentz(&self.lift, &self.grid, Axis::U, 2, 3);
        let fvv = grid_diff_lorentz(&self.lift, &self.grid, Axis::V, 2, 3);
        GridData::from_fn(self.grid.nu, self.grid.nv, |iu, iv| {
            let mut s = fuu.at(iu, iv).clone();
            s.axpy(1.0, fvv.at(iu, iv));
            s.scale((-2.0 * self.theta.at(iu, iv)).exp())
        })
    }

    /// Lift derivative grids (second-order differences).
    pub fn lift_derivs(&self) -> (GridData<LorentzVector>, GridData<LorentzVector>) {
        (
            grid_diff_lorentz(&self.lift, &self.grid, Axis::U, 1, 3),
            grid_diff_lorentz(&self.lift, &self.grid, Axis::V, 1, 3),
        )
    }

    /// Restriction to the row band iv0..=iv1 (v becomes an open direction).
    pub fn restrict_rows(&self, iv0: usize, iv1: usize) -> Result<SurfacePatch> {
        if iv1 < iv0 + 7 {
            return Err(GeomError::GridTooSmall { need: 8, got: iv1.saturating_sub(iv0) + 1 });
        }
        let grid = CoordGrid {
            nu: self.grid.nu,
            nv: iv1 - iv0 + 1,
            u0: self.grid.u0,
            v0: self.grid.v(iv0),
            h_u: self.grid.h_u,
            h_v: self.grid.h_v,
            periodic_u: self.grid.periodic_u,
            periodic_v: false,
        };
        Ok(SurfacePatch {
            grid,
            chart: self.chart.clone(),
            space_form: self.space_form.clone(),
            f: self.f.slice_rows(iv0, iv1),
            lift: self.lift.slice_rows(iv0, iv1),
            theta: self.theta.slice_rows(iv0, iv1),
            k1: self.k1.slice_rows(iv0, iv1),
            k2: self.k2.slice_rows(iv0, iv1),
            mean_h: self.mean_h.slice_rows(iv0, iv1),
            l_coef: self.l_coef.slice_rows(iv0, iv1),
            m_coef: self.m_coef.slice_rows(iv0, iv1),
            normal: self.normal.slice_rows(iv0, iv1),
            residuals: self.residuals.clone(),
            flags: self.flags.clone(),
            analytic: self.analytic.clone(),
            exact_lift_derivs: self
                .exact_lift_derivs
                .as_ref()
                .map(|(a, b)| (a.slice_rows(iv0, iv1), b.slice_rows(iv0, iv1))),
            provenance: {
                let mut p = self.provenance.clone();
                p.push(format!("restrict rows {iv0}..={iv1}"));
                p
            },
        })
    }

    /// Lift derivatives: exact grids when a transform provided them, else
    /// the closure, else differences.
    pub fn lift_derivs_best(&self) -> (GridData<LorentzVector>, GridData<LorentzVector>) {
        if let Some((du, dv)) = &self.exact_lift_derivs {
            return (du.clone(), dv.clone());
        }
        if let Some(c) = &self.analytic {
            let g = &self.grid;
            let du = GridData::from_fn(g.nu, g.nv, |iu, iv| {
                closure_lift_deriv(c.as_ref(), &self.chart, g.u(iu), g.v(iv), Axis::U)
            });
            let dv = GridData::from_fn(g.nu, g.nv, |iu, iv| {
                closure_lift_deriv(c.as_ref(), &self.chart, g.u(iu), g.v(iv), Axis::V)
            });
            (du, dv)
        } else {
            self.lift_derivs()
        }
    }
}

/// Differentiates a Lorentz-vector grid along an axis.
pub fn grid_diff_lorentz(
    data: &GridData<LorentzVector>,
    grid: &CoordGrid,
    axis: Axis,
    m: usize,
    width: usize,
) -> GridData<LorentzVector> {
    let raw = data.map(|x| x.coords().clone());
    let out = grid_diff(&raw, grid, axis, m, width);
    out.map(|c| LorentzVector::new(c.clone()).expect("finite derivative"))
}

/// Differentiates a vector grid along an axis with Fornberg stencils.
pub fn grid_diff(
    data: &GridData<DVector<f64>>,
    grid: &CoordGrid,
    axis: Axis,
    m: usize,
    width: usize,
) -> GridData<DVector<f64>> {
    grid_diff_with(data, grid, axis, m, width, grid.periodic(axis))
}

/// As [`grid_diff`] but with an explicit periodicity override; sections of
/// a flat connection are generally not periodic even on periodic grids.
pub fn grid_diff_with(
    data: &GridData<DVector<f64>>,
    grid: &CoordGrid,
    axis: Axis,
    m: usize,
    width: usize,
    periodic: bool,
) -> GridData<DVector<f64>> {
    let mut out = GridData::fill(grid.nu, grid.nv, DVector::zeros(data.at(0, 0).len()));
    match axis {
        Axis::U => {
            for iv in 0..grid.nv {
                let line: Vec<DVector<f64>> = (0..grid.nu).map(|iu| data.at(iu, iv).clone()).collect();
                let d = diff_line(&line, grid.h_u, m, width, periodic);
                for (iu, val) in d.into_iter().enumerate() {
                    *out.at_mut(iu, iv) = val;
                }
            }
        }
        Axis::V => {
            for iu in 0..grid.nu {
                let line: Vec<DVector<f64>> = (0..grid.nv).map(|iv| data.at(iu, iv).clone()).collect();
                let d = diff_line(&line, grid.h_v, m, width, periodic);
                for (iv, val) in d.into_iter().enumerate() {
                    *out.at_mut(iu, iv) = val;
                }
            }
        }
    }
    out
}

pub fn grid_diff_scalar(
    data: &GridData<f64>,
    grid: &CoordGrid,
    axis: Axis,
    m: usize,
    width: usize,
) -> GridData<f64> {
    let vecs = data.map(|x| DVector::from_column_slice(&[*x]));
    grid_diff(&vecs, grid, axis, m, width).map(|v| v[0])
}

struct RevolutionClosure {
    profile: Profile,
    /// zeta on a fine grid for profiles without closed-form quadrature.
    zeta_table: Option<(f64, f64, Vec<f64>)>, // (v0, dv, samples)
}

impl RevolutionClosure {
    fn new(profile: Profile, v_range: (f64, f64)) -> Result<Self> {
        // Verify |phi'| < 1 across the working range.
        let samples = 4096;
        for i in 0..=samples {
            let v = v_range.0 + (v_range.1 - v_range.0) * i as f64 / samples as f64;
            if profile.phi_d(v).abs() >= 1.0 {
                return Err(GeomError::ProfileTooSteep(v));
            }
        }
        let zeta_table = match profile {
            Profile::Const(_) | Profile::Linear { .. } => None,
            Profile::Sine { .. } => {
                // Tabulate zeta' on a fine line, integrate once.
                let fine = 8192usize;
                let pad = 0.05 * (v_range.1 - v_range.0).max(1.0);
                let a = v_range.0 - pad;
                let b = v_range.1 + pad;
                let dv = (b - a) / fine as f64;
                let vals: Vec<DVector<f64>> = (0..=fine)
                    .map(|i| {
                        let v = a + i as f64 * dv;
                        let pd = profile.phi_d(v);
                        DVector::from_column_slice(&[profile.phi(v).exp() * (1.0 - pd * pd).sqrt()])
                    })
                    .collect();
                let integral = crate::grid::cumulative_integral_line(&vals, dv, false);
                Some((a, dv, integral.into_iter().map(|x| x[0]).collect()))
            }
        };
        Ok(Self { profile, zeta_table })
    }

    fn zeta(&self, v: f64) -> f64 {
        match &self.profile {
            Profile::Const(c) => c.exp() * v,
            Profile::Linear { slope, offset } => {
                let s = (1.0 - slope * slope).sqrt();
                if slope.abs() < 1e-14 {
                    (offset).exp() * v
                } else {
                    s * (slope * v + offset).exp() / slope
                }
            }
            Profile::Sine { .. } => {
                let (a, dv, table) = self.zeta_table.as_ref().expect("table built");
                // 7-point Lagrange interpolation on the fine table.
                let x = (v - a) / dv;
                let len = table.len();
                let i0 = (x.floor() as isize - 3).clamp(0, len as isize - 7) as usize;
                let xs: Vec<f64> = (0..7).map(|k| (i0 + k) as f64).collect();
                let w = crate::grid::fornberg_weights(x, &xs, 0);
                (0..7).map(|k| w[k] * table[i0 + k]).sum()
            }
        }
    }

    fn zeta_d(&self, v: f64) -> f64 {
        let pd = self.profile.phi_d(v);
        self.profile.phi(v).exp() * (1.0 - pd * pd).sqrt()
    }
}

impl SurfaceClosure for RevolutionClosure {
    fn f(&self, u: f64, v: f64) -> DVector<f64> {
        let r = self.profile.phi(v).exp();
        DVector::from_column_slice(&[r * u.cos(), r * u.sin(), self.zeta(v)])
    }

    fn f_u(&self, u: f64, v: f64) -> DVector<f64> {
        let r = self.profile.phi(v).exp();
        DVector::from_column_slice(&[-r * u.sin(), r * u.cos(), 0.0])
    }

    fn f_v(&self, u: f64, v: f64) -> DVector<f64> {
        let r = self.profile.phi(v).exp();
        let rd = self.profile.phi_d(v) * r;
        DVector::from_column_slice(&[rd * u.cos(), rd * u.sin(), self.zeta_d(v)])
    }

    fn unit_normal(&self, u: f64, v: f64) -> DVector<f64> {
        // Inward for the cylinder; (k1 - k2) >= 0 along revolution patches
        // with moderate profiles.
        let pd = self.profile.phi_d(v);
        let s = (1.0 - pd * pd).sqrt();
        DVector::from_column_slice(&[-s * u.cos(), -s * u.sin(), pd])
    }

    fn theta(&self, _u: f64, v: f64) -> f64 {
        self.profile.phi(v)
    }

    fn k1(&self, _u: f64, v: f64) -> f64 {
        let pd = self.profile.phi_d(v);
        (1.0 - pd * pd).sqrt() * (-self.profile.phi(v)).exp()
    }

    fn k2(&self, _u: f64, v: f64) -> f64 {
        let pd = self.profile.phi_d(v);
        let s = (1.0 - pd * pd).sqrt();
        -self.profile.phi_dd(v) * (-self.profile.phi(v)).exp() / s
    }
}

/// Mercator parametrization of the round sphere of radius rho:
/// conformal, totally umbilic.
struct SphereClosure {
    rho: f64,
}

impl SurfaceClosure for SphereClosure {
    fn f(&self, u: f64, v: f64) -> DVector<f64> {
        let sech = 1.0 / v.cosh();
        DVector::from_column_slice(&[
            self.rho * sech * u.cos(),
            self.rho * sech * u.sin(),
            self.rho * v.tanh(),
        ])
    }

    fn f_u(&self, u: f64, v: f64) -> DVector<f64> {
        let sech = 1.0 / v.cosh();
        DVector::from_column_slice(&[-self.rho * sech * u.sin(), self.rho * sech * u.cos(), 0.0])
    }

    fn f_v(&self, u: f64, v: f64) -> DVector<f64> {
        let sech = 1.0 / v.cosh();
        let t = v.tanh();
        DVector::from_column_slice(&[
            -self.rho * sech * t * u.cos(),
            -self.rho * sech * t * u.sin(),
            self.rho * sech * sech,
        ])
    }

    fn unit_normal(&self, u: f64, v: f64) -> DVector<f64> {
        // Inward: toward the center.
        let f = self.f(u, v);
        -f / self.rho
    }

    fn theta(&self, _u: f64, v: f64) -> f64 {
        (self.rho / v.cosh()).ln()
    }

    fn k1(&self, _u: f64, _v: f64) -> f64 {
        1.0 / self.rho
    }

    fn k2(&self, _u: f64, _v: f64) -> f64 {
        1.0 / self.rho
    }
}

/// Generates a surface patch in the standard chart; the lift lands in E(w)
/// (defaults to the chart infinity, i.e. flat R^3).
pub fn generate_surface(
    kind: &SurfaceKind,
    grid: CoordGrid,
    w: Option<LorentzVector>,
) -> Result<SurfacePatch> {
    let chart = SpaceFormChart::standard(3);
    let v_range = (
        grid.v0,
        grid.v0 + grid.h_v * if grid.periodic_v { grid.nv } else { grid.nv - 1 } as f64,
    );
    let closure: Arc<dyn SurfaceClosure> = match kind {
        SurfaceKind::Cylinder { radius } => {
            if *radius <= 0.0 {
                return Err(GeomError::Invalid("cylinder radius must be positive".into()));
            }
            Arc::new(RevolutionClosure::new(Profile::Const(radius.ln()), v_range)?)
        }
        SurfaceKind::Revolution { profile } | SurfaceKind::CustomProfile { profile } => {
            Arc::new(RevolutionClosure::new(profile.clone(), v_range)?)
        }
        SurfaceKind::Cone { half_angle } => {
            let s = half_angle.sin();
            if !(0.0 < s && s < 1.0) {
                return Err(GeomError::Invalid("cone half-angle must lie in (0, pi/2)".into()));
            }
            Arc::new(RevolutionClosure::new(
                Profile::Linear { slope: s, offset: s.ln() },
                v_range,
            )?)
        }
        SurfaceKind::SpherePatch { radius } => {
            if *radius <= 0.0 {
                return Err(GeomError::Invalid("sphere radius must be positive".into()));
            }
            Arc::new(SphereClosure { rho: *radius })
        }
    };

    let w = w.unwrap_or_else(|| chart.infinity.clone());
    let flat = {
        let d = &w.sub(&chart.infinity);
        d.coord_norm() == 0.0
    };
    let provenance = vec![format!("generate {kind:?}")];
    if flat {
        patch_from_closure(closure, grid, chart, provenance)
    } else {
        // Non-flat space form: build the f grid and take the general path.
        let f = GridData::from_fn(grid.nu, grid.nv, |iu, iv| {
            closure.f(grid.u(iu), grid.v(iv))
        });
        let mut patch = compute_fundamental(f, grid, chart, SpaceForm::new(w)?)?;
        patch.provenance = provenance;
        Ok(patch)
    }
}

/// Builds the patch with exact scalars from the closure (flat chart), with
/// difference-based residual reporting.
fn patch_from_closure(
    closure: Arc<dyn SurfaceClosure>,
    grid: CoordGrid,
    chart: SpaceFormChart,
    provenance: Vec<String>,
) -> Result<SurfacePatch> {
    let nu = grid.nu;
    let nv = grid.nv;
    let f = GridData::from_fn(nu, nv, |iu, iv| closure.f(grid.u(iu), grid.v(iv)));
    let lift = GridData::from_fn(nu, nv, |iu, iv| {
        closure_lift(closure.as_ref(), &chart, grid.u(iu), grid.v(iv))
    });
    let theta = GridData::from_fn(nu, nv, |iu, iv| closure.theta(grid.u(iu), grid.v(iv)));
    let k1 = GridData::from_fn(nu, nv, |iu, iv| closure.k1(grid.u(iu), grid.v(iv)));
    let k2 = GridData::from_fn(nu, nv, |iu, iv| closure.k2(grid.u(iu), grid.v(iv)));
    let normal = GridData::from_fn(nu, nv, |iu, iv| {
        closure_normal_lift(closure.as_ref(), &chart, grid.u(iu), grid.v(iv))
    });
    let mean_h = GridData::from_fn(nu, nv, |iu, iv| 0.5 * (k1.at(iu, iv) + k2.at(iu, iv)));
    let l_coef = GridData::from_fn(nu, nv, |iu, iv| {
        (2.0 * theta.at(iu, iv)).exp() * (k1.at(iu, iv) - k2.at(iu, iv))
    });
    let m_coef = GridData::from_fn(nu, nv, |iu, iv| -mean_h.at(iu, iv) * l_coef.at(iu, iv));

    let space_form = SpaceForm::new(chart.infinity.clone())?;
    let residuals = measure_residuals(&lift, &normal, &grid, &space_form);
    let flags = derive_flags(&mean_h, &l_coef, &theta, &grid);

    Ok(SurfacePatch {
        grid,
        chart,
        space_form,
        f,
        lift,
        theta,
        k1,
        k2,
        mean_h,
        l_coef,
        m_coef,
        normal,
        residuals,
        flags,
        analytic: Some(closure),
        exact_lift_derivs: None,
        provenance,
    })
}

/// Fills fundamental data from an immersion grid by second-order central
/// differences (one-sided at open boundaries).
pub fn compute_fundamental(
    f: GridData<DVector<f64>>,
    grid: CoordGrid,
    chart: SpaceFormChart,
    space_form: SpaceForm,
) -> Result<SurfacePatch> {
    compute_fundamental_with(f, grid, chart, space_form, None)
}

/// As [`compute_fundamental`], with optional exact lift-derivative grids
/// replacing the difference estimates (transform targets have these).
pub fn compute_fundamental_with(
    f: GridData<DVector<f64>>,
    grid: CoordGrid,
    chart: SpaceFormChart,
    space_form: SpaceForm,
    exact_derivs: Option<(GridData<LorentzVector>, GridData<LorentzVector>)>,
) -> Result<SurfacePatch> {
    let n = f.at(0, 0).len();
    if n != 3 {
        return Err(GeomError::UnsupportedCodimension(n));
    }
    let nu = grid.nu;
    let nv = grid.nv;

    // Lift into E(w).
    let lift = {
        let mut lifted = GridData::fill(nu, nv, LorentzVector::zeros(n));
        for iv in 0..nv {
            for iu in 0..nu {
                let raw = lift_to_cone(f.at(iu, iv), &chart);
                *lifted.at_mut(iu, iv) = rescale_into(&raw, &space_form.w)?;
            }
        }
        lifted
    };

    let (fu, fv) = match &exact_derivs {
        Some((du, dv)) => (du.clone(), dv.clone()),
        None => (
            grid_diff_lorentz(&lift, &grid, Axis::U, 1, 3),
            grid_diff_lorentz(&lift, &grid, Axis::V, 1, 3),
        ),
    };

    // Conformal factor and immersion check.
    let mut theta = GridData::fill(nu, nv, 0.0);
    for iv in 0..nv {
        for iu in 0..nu {
            let a = inner(fu.at(iu, iv), fu.at(iu, iv));
            let b = inner(fv.at(iu, iv), fv.at(iu, iv));
            if a <= 1e-16 || b <= 1e-16 {
                return Err(GeomError::NotImmersed(iu, iv));
            }
            *theta.at_mut(iu, iv) = 0.25 * (a * b).ln();
        }
    }

    // Unit normal in E(w): orthogonal to F, F_u, F_v, w; oriented for
    // continuity, then globally so that L >= 0 (tiebreak H >= 0).
    let mut normal = GridData::fill(nu, nv, LorentzVector::zeros(n));
    for iv in 0..nv {
        for iu in 0..nu {
            let cand = orthogonal_complement_unit(
                &[lift.at(iu, iv), fu.at(iu, iv), fv.at(iu, iv), &space_form.w],
                n + 2,
            )
            .ok_or(GeomError::SignatureFailure(iu, iv))?;
            let nn = inner(&cand, &cand);
            if nn <= 0.0 {
                return Err(GeomError::SignatureFailure(iu, iv));
            }
            let mut unit = cand.scale(1.0 / nn.sqrt());
            // Orientation continuity along the fill order.
            let reference = if iu > 0 {
                Some(normal.at(iu - 1, iv).clone())
            } else if iv > 0 {
                Some(normal.at(0, iv - 1).clone())
            } else {
                None
            };
            if let Some(r) = reference {
                if inner(&unit, &r) < 0.0 {
                    unit = unit.scale(-1.0);
                }
            }
            *normal.at_mut(iu, iv) = unit;
        }
    }

    let nu_grid = grid_diff_lorentz(&normal, &grid, Axis::U, 1, 3);
    let nv_grid = grid_diff_lorentz(&normal, &grid, Axis::V, 1, 3);

    let mut k1 = GridData::fill(nu, nv, 0.0);
    let mut k2 = GridData::fill(nu, nv, 0.0);
    for iv in 0..nv {
        for iu in 0..nu {
            let e2t = (2.0 * theta.at(iu, iv)).exp();
            *k1.at_mut(iu, iv) = -inner(nu_grid.at(iu, iv), fu.at(iu, iv)) / e2t;
            *k2.at_mut(iu, iv) = -inner(nv_grid.at(iu, iv), fv.at(iu, iv)) / e2t;
        }
    }

    // Global orientation: prefer L >= 0, then H >= 0.
    let l_probe: f64 =
        (0..nv).map(|iv| (0..nu).map(|iu| k1.at(iu, iv) - k2.at(iu, iv)).sum::<f64>()).sum();
    let h_probe: f64 =
        (0..nv).map(|iv| (0..nu).map(|iu| k1.at(iu, iv) + k2.at(iu, iv)).sum::<f64>()).sum();
    let flip = if l_probe.abs() > 1e-8 * (nu * nv) as f64 {
        l_probe < 0.0
    } else {
        h_probe < 0.0
    };
    if flip {
        for iv in 0..nv {
            for iu in 0..nu {
                *normal.at_mut(iu, iv) = normal.at(iu, iv).scale(-1.0);
                *k1.at_mut(iu, iv) = -k1.at(iu, iv);
                *k2.at_mut(iu, iv) = -k2.at(iu, iv);
            }
        }
    }

    let mean_h = GridData::from_fn(nu, nv, |iu, iv| 0.5 * (k1.at(iu, iv) + k2.at(iu, iv)));
    let l_coef = GridData::from_fn(nu, nv, |iu, iv| {
        (2.0 * theta.at(iu, iv)).exp() * (k1.at(iu, iv) - k2.at(iu, iv))
    });
    let m_coef = GridData::from_fn(nu, nv, |iu, iv| -mean_h.at(iu, iv) * l_coef.at(iu, iv));

    let residuals = measure_residuals(&lift, &normal, &grid, &space_form);
    let flags = derive_flags(&mean_h, &l_coef, &theta, &grid);

    Ok(SurfacePatch {
        grid,
        chart,
        space_form,
        f,
        lift,
        theta,
        k1,
        k2,
        mean_h,
        l_coef,
        m_coef,
        normal,
        residuals,
        flags,
        analytic: None,
        exact_lift_derivs: exact_derivs,
        provenance: Vec::new(),
    })
}

/// Euclidean-unit vector spanning the kernel of the pairing constraints
/// (x, v_k) = 0, found as the smallest eigenvector of the normal matrix.
pub fn orthogonal_complement_unit(
    constraints: &[&LorentzVector],
    dim: usize,
) -> Option<LorentzVector> {
    let mut ata = DMatrix::<f64>::zeros(dim, dim);
    for vec in constraints {
        let g = crate::lorentz::gram_apply(vec);
        ata.ger(1.0, &g, &g, 1.0);
    }
    let eig = nalgebra::SymmetricEigen::new(ata);
    let (idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite eigenvalues"))?;
    let col = eig.eigenvectors.column(idx).clone_owned();
    LorentzVector::new(col).ok()
}

/// Nodewise conformality defect | |F_u| - |F_v| | (difference-based), for
/// residual export.
pub fn conformality_grid(patch: &SurfacePatch) -> GridData<f64> {
    let fu = grid_diff_lorentz(&patch.lift, &patch.grid, Axis::U, 1, 3);
    let fv = grid_diff_lorentz(&patch.lift, &patch.grid, Axis::V, 1, 3);
    GridData::from_fn(patch.grid.nu, patch.grid.nv, |iu, iv| {
        let a = inner(fu.at(iu, iv), fu.at(iu, iv)).max(0.0).sqrt();
        let b = inner(fv.at(iu, iv), fv.at(iu, iv)).max(0.0).sqrt();
        (a - b).abs()
    })
}

fn measure_residuals(
    lift: &GridData<LorentzVector>,
    normal: &GridData<LorentzVector>,
    grid: &CoordGrid,
    space_form: &SpaceForm,
) -> FundamentalResiduals {
    let fu = grid_diff_lorentz(lift, grid, Axis::U, 1, 3);
    let fv = grid_diff_lorentz(lift, grid, Axis::V, 1, 3);
    let nu_d = grid_diff_lorentz(normal, grid, Axis::U, 1, 3);
    let mut conformality = 0.0f64;
    let mut cross = 0.0f64;
    let mut offdiag = 0.0f64;
    let mut membership = 0.0f64;
    for iv in 0..grid.nv {
        for iu in 0..grid.nu {
            let a = inner(fu.at(iu, iv), fu.at(iu, iv)).max(0.0).sqrt();
            let b = inner(fv.at(iu, iv), fv.at(iu, iv)).max(0.0).sqrt();
            let e2t = a * b;
            conformality = conformality.max((a - b).abs());
            cross = cross.max(inner(fu.at(iu, iv), fv.at(iu, iv)).abs() / e2t.max(1e-300));
            offdiag = offdiag.max(inner(nu_d.at(iu, iv), fv.at(iu, iv)).abs() / e2t.max(1e-300));
            let (m1, m2) = space_form.membership_defect(lift.at(iu, iv));
            membership = membership.max(m1.max(m2));
        }
    }
    FundamentalResiduals { conformality, conformal_cross: cross, offdiag_ii: offdiag, membership }
}

fn derive_flags(
    mean_h: &GridData<f64>,
    l_coef: &GridData<f64>,
    _theta: &GridData<f64>,
    grid: &CoordGrid,
) -> PatchFlags {
    let h_bar = mean_h.mean();
    let cmc = mean_h.spread() <= 1e-6 * (1.0 + h_bar.abs());
    let l_scale = l_coef.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let totally_umbilic = l_scale <= 1e-8 * (1.0 + h_bar.abs());
    // H_u H_v vanishing fraction, from plain central differences.
    let hu = grid_diff_scalar(mean_h, grid, Axis::U, 1, 3);
    let hv = grid_diff_scalar(mean_h, grid, Axis::V, 1, 3);
    let scale = hu.max_abs().max(hv.max_abs()).max(1e-300);
    let mut vanish = 0usize;
    for iv in 0..grid.nv {
        for iu in 0..grid.nu {
            if (hu.at(iu, iv) * hv.at(iu, iv)).abs() < 1e-6 * scale * scale {
                vanish += 1;
            }
        }
    }
    PatchFlags {
        totally_umbilic,
        cmc,
        hu_hv_vanishing_fraction: vanish as f64 / grid.node_count() as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cyl_grid(nu: usize, nv: usize) -> CoordGrid {
        CoordGrid::new(nu, nv, (0.0, 2.0 * std::f64::consts::PI), (-1.0, 1.0), true, false)
            .unwrap()
    }

    #[test]
    fn unit_cylinder_scalars() {
        let p = generate_surface(&SurfaceKind::Cylinder { radius: 1.0 }, cyl_grid(64, 64), None)
            .unwrap();
        assert!(p.theta.max_abs() < 1e-14);
        assert!((p.k1.mean() - 1.0).abs() < 1e-14);
        assert!(p.k2.max_abs() < 1e-14);
        assert!((p.mean_h_value() - 0.5).abs() < 1e-14);
        assert!((p.l_value() - 1.0).abs() < 1e-14);
        assert!((p.m_coef.mean() + 0.5).abs() < 1e-14);
        assert!(p.flags.cmc);
        assert!(!p.flags.totally_umbilic);
        assert!(p.residuals.membership < 1e-12);
    }

    #[test]
    fn sphere_patch_is_totally_umbilic() {
        let g = CoordGrid::new(32, 32, (0.0, 2.0 * std::f64::consts::PI), (-0.8, 0.8), true, false)
            .unwrap();
        let p = generate_surface(&SurfaceKind::SpherePatch { radius: 1.0 }, g, None).unwrap();
        assert!(p.flags.totally_umbilic);
        assert!((p.k1.mean() - p.k2.mean()).abs() < 1e-13);
    }

    #[test]
    fn revolution_with_const_profile_matches_cylinder() {
        let g = cyl_grid(32, 32);
        let p = generate_surface(
            &SurfaceKind::Revolution { profile: Profile::Const(0.5f64.ln()) },
            g,
            None,
        )
        .unwrap();
        assert!((p.k1.mean() - 2.0).abs() < 1e-13);
        assert!(p.k2.max_abs() < 1e-14);
        assert!((p.theta.mean() - 0.5f64.ln()).abs() < 1e-13);
    }

    #[test]
    fn steep_profile_rejected() {
        let g = cyl_grid(32, 32);
        let err = generate_surface(
            &SurfaceKind::Revolution {
                profile: Profile::Sine { amp: 2.0, freq: 1.0, offset: 0.0 },
            },
            g,
            None,
        );
        assert!(matches!(err, Err(GeomError::ProfileTooSteep(_))));
    }

    #[test]
    fn sine_profile_flips_gauss_curvature() {
        let g = CoordGrid::new(32, 64, (0.0, 2.0 * std::f64::consts::PI), (-2.0, 2.0), true, false)
            .unwrap();
        let p = generate_surface(
            &SurfaceKind::CustomProfile {
                profile: Profile::Sine { amp: 0.3, freq: 1.0, offset: 0.0 },
            },
            g,
            None,
        )
        .unwrap();
        let mut pos = false;
        let mut neg = false;
        for iv in 0..p.grid.nv {
            let gauss = p.k1.at(0, iv) * p.k2.at(0, iv);
            pos |= gauss > 1e-6;
            neg |= gauss < -1e-6;
        }
        assert!(pos && neg, "expected both curvature signs along the profile");
    }

    #[test]
    fn compute_fundamental_recovers_cylinder() {
        let g = cyl_grid(64, 64);
        let chart = SpaceFormChart::standard(3);
        let w = SpaceForm::new(chart.infinity.clone()).unwrap();
        let f = GridData::from_fn(g.nu, g.nv, |iu, iv| {
            let (u, v) = (g.u(iu), g.v(iv));
            DVector::from_column_slice(&[u.cos(), u.sin(), v])
        });
        let p = compute_fundamental(f, g, chart, w).unwrap();
        // H constant across the grid (spread), close to 1/2 up to O(h^2).
        assert!(p.mean_h.spread() < 1e-10, "spread = {:e}", p.mean_h.spread());
        assert!((p.mean_h_value() - 0.5).abs() < 2e-3);
        assert!(p.flags.cmc);
        // Inward orientation convention: k1 > 0.
        assert!(p.k1.mean() > 0.9);
        assert!(p.residuals.conformality < 5e-3);
    }

    #[test]
    fn compute_fundamental_order_two_under_refinement() {
        let chart = SpaceFormChart::standard(3);
        let res = |n: usize| {
            let g = cyl_grid(n, n);
            let w = SpaceForm::new(chart.infinity.clone()).unwrap();
            let f = GridData::from_fn(g.nu, g.nv, |iu, iv| {
                let (u, v) = (g.u(iu), g.v(iv));
                DVector::from_column_slice(&[u.cos(), u.sin(), v])
            });
            let p = compute_fundamental(f, g, chart.clone(), w).unwrap();
            (p.mean_h_value() - 0.5).abs()
        };
        let coarse = res(32);
        let fine = res(64);
        assert!(coarse / fine >= 3.5, "ratio {}", coarse / fine);
    }

    #[test]
    fn rescaled_input_shifts_theta_and_halves_curvature() {
        let g = cyl_grid(32, 32);
        let chart = SpaceFormChart::standard(3);
        let w = SpaceForm::new(chart.infinity.clone()).unwrap();
        let f = GridData::from_fn(g.nu, g.nv, |iu, iv| {
            let (u, v) = (g.u(iu), g.v(iv));
            DVector::from_column_slice(&[2.0 * u.cos(), 2.0 * u.sin(), 2.0 * v])
        });
        let p = compute_fundamental(f, g, chart, w).unwrap();
        assert!((p.theta.mean() - 2.0f64.ln()).abs() < 1e-2);
        assert!((p.mean_h_value() - 0.25).abs() < 5e-3);
    }
}
