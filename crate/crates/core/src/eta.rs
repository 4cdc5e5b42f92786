//! The closed 1-form eta of an isothermic patch, stored per node in both
//! factored (F wedge coefficient-vector) and assembled matrix form.
//!
//! Scale convention: eta = kappa * e^{-2 theta} F wedge (-F_u du + F_v dv).
//! On non-CMC patches kappa = 1. On CMC patches kappa = L/2, which makes
//! w + (H F + N) t the degree-1 conserved quantity and puts the spectral
//! root of the unit cylinder at t = 1; the two choices differ by the
//! constant real scale the form is defined up to.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{GeomError, Result};
use crate::grid::{Axis, CoordGrid, GridData};
use crate::lorentz::{Bivector, LorentzVector};
use crate::surface::{
    closure_lift, closure_lift_deriv, grid_diff, SurfaceClosure, SurfacePatch,
};

/// Off-grid evaluation of the 1-form, available when the patch (or the
/// transform that produced it) carries analytic data.
pub trait EtaClosure: Send + Sync {
    fn eta(&self, u: f64, v: f64, axis: Axis) -> DMatrix<f64>;
}

/// Factored per-node data: eta_X = F wedge c_X.
#[derive(Debug, Clone)]
pub struct FactoredEta {
    pub lift: GridData<LorentzVector>,
    pub c_u: GridData<LorentzVector>,
    pub c_v: GridData<LorentzVector>,
}

/// The 1-form on grid edges/nodes.
#[derive(Clone)]
pub struct EtaField {
    pub grid: CoordGrid,
    pub eta_u: GridData<DMatrix<f64>>,
    pub eta_v: GridData<DMatrix<f64>>,
    pub factored: Option<FactoredEta>,
    pub closure: Option<Arc<dyn EtaClosure>>,
    /// Scale constant relating this form to the bare coordinate formula.
    pub kappa: f64,
    /// max-node Frobenius norm of d(eta) by fourth-order differences.
    pub closedness_residual: f64,
}

impl std::fmt::Debug for EtaField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EtaField")
            .field("grid", &self.grid)
            .field("kappa", &self.kappa)
            .field("closedness_residual", &self.closedness_residual)
            .field("has_closure", &self.closure.is_some())
            .finish()
    }
}

#[derive(Debug, Clone, Default)]
pub struct BuildEtaOptions {
    /// Accept totally umbilic patches (eta is then one choice among many).
    pub allow_umbilic: bool,
}

struct PatchEtaClosure {
    surf: Arc<dyn SurfaceClosure>,
    chart: crate::lorentz::SpaceFormChart,
    kappa: f64,
    dim: usize,
}

impl EtaClosure for PatchEtaClosure {
    fn eta(&self, u: f64, v: f64, axis: Axis) -> DMatrix<f64> {
        let f = closure_lift(self.surf.as_ref(), &self.chart, u, v);
        let fx = closure_lift_deriv(self.surf.as_ref(), &self.chart, u, v, axis);
        let e2t = (2.0 * self.surf.theta(u, v)).exp();
        let sign = match axis {
            Axis::U => -1.0,
            Axis::V => 1.0,
        };
        Bivector::wedge(f, fx.scale(sign * self.kappa / e2t)).to_matrix(self.dim)
    }
}

pub fn build_eta(patch: &SurfacePatch) -> Result<EtaField> {
    build_eta_with(patch, &BuildEtaOptions::default())
}

pub fn build_eta_with(patch: &SurfacePatch, opts: &BuildEtaOptions) -> Result<EtaField> {
    if patch.flags.totally_umbilic && !opts.allow_umbilic {
        return Err(GeomError::TotallyUmbilic);
    }
    let kappa = eta_kappa(patch);
    let dim = patch.ambient_n() + 2;
    let (fu, fv) = patch.lift_derivs_best();
    let nu = patch.grid.nu;
    let nv = patch.grid.nv;

    let c_u = GridData::from_fn(nu, nv, |iu, iv| {
        let s = -kappa * (-2.0 * patch.theta.at(iu, iv)).exp();
        fu.at(iu, iv).scale(s)
    });
    let c_v = GridData::from_fn(nu, nv, |iu, iv| {
        let s = kappa * (-2.0 * patch.theta.at(iu, iv)).exp();
        fv.at(iu, iv).scale(s)
    });
    let eta_u = GridData::from_fn(nu, nv, |iu, iv| {
        Bivector::wedge(patch.lift.at(iu, iv).clone(), c_u.at(iu, iv).clone()).to_matrix(dim)
    });
    let eta_v = GridData::from_fn(nu, nv, |iu, iv| {
        Bivector::wedge(patch.lift.at(iu, iv).clone(), c_v.at(iu, iv).clone()).to_matrix(dim)
    });

    let closure: Option<Arc<dyn EtaClosure>> = patch.analytic.as_ref().map(|surf| {
        Arc::new(PatchEtaClosure { surf: surf.clone(), chart: patch.chart.clone(), kappa, dim })
            as Arc<dyn EtaClosure>
    });

    let mut field = EtaField {
        grid: patch.grid.clone(),
        eta_u,
        eta_v,
        factored: Some(FactoredEta { lift: patch.lift.clone(), c_u, c_v }),
        closure,
        kappa,
        closedness_residual: 0.0,
    };
    field.closedness_residual = closedness_residual(&field);
    Ok(field)
}

/// Patch-level scale constant (see module docs).
pub fn eta_kappa(patch: &SurfacePatch) -> f64 {
    let l_bar = patch.l_value();
    if patch.flags.cmc && !patch.flags.totally_umbilic && l_bar.abs() > 1e-8 {
        0.5 * l_bar
    } else {
        1.0
    }
}

impl EtaField {
    pub fn dim(&self) -> usize {
        self.eta_u.at(0, 0).nrows()
    }

    pub fn value(&self, iu: usize, iv: usize, axis: Axis) -> &DMatrix<f64> {
        match axis {
            Axis::U => self.eta_u.at(iu, iv),
            Axis::V => self.eta_v.at(iu, iv),
        }
    }

    pub fn apply(&self, iu: usize, iv: usize, axis: Axis, x: &LorentzVector) -> LorentzVector {
        LorentzVector::new(self.value(iu, iv, axis) * x.coords()).expect("finite eta value")
    }

    /// max relative norm of eta_X F over the grid (sanity for factored fields).
    pub fn annihilation_residual(&self, lift: &GridData<LorentzVector>) -> f64 {
        let mut worst = 0.0f64;
        for iv in 0..self.grid.nv {
            for iu in 0..self.grid.nu {
                let f = lift.at(iu, iv);
                for axis in [Axis::U, Axis::V] {
                    let r = self.apply(iu, iv, axis, f).coord_norm();
                    let scale = self.value(iu, iv, axis).amax() * f.coord_norm();
                    worst = worst.max(r / scale.max(1e-300));
                }
            }
        }
        worst
    }

    /// Defect between the assembled matrices and the factored wedges.
    pub fn reassembly_residual(&self) -> f64 {
        let Some(fac) = &self.factored else { return 0.0 };
        let dim = self.dim();
        let mut worst = 0.0f64;
        for iv in 0..self.grid.nv {
            for iu in 0..self.grid.nu {
                let bu = Bivector::wedge(fac.lift.at(iu, iv).clone(), fac.c_u.at(iu, iv).clone())
                    .to_matrix(dim);
                let bv = Bivector::wedge(fac.lift.at(iu, iv).clone(), fac.c_v.at(iu, iv).clone())
                    .to_matrix(dim);
                worst = worst.max((bu - self.eta_u.at(iu, iv)).amax());
                worst = worst.max((bv - self.eta_v.at(iu, iv)).amax());
            }
        }
        worst
    }

    /// Loop integral of eta around each plaquette divided by the cell area;
    /// estimates |d eta| pointwise, O(h^2) for closed smooth forms.
    pub fn plaquette_residual(&self) -> f64 {
        let g = &self.grid;
        let up = if g.periodic_u { g.nu } else { g.nu - 1 };
        let vp = if g.periodic_v { g.nv } else { g.nv - 1 };
        let area = g.h_u * g.h_v;
        let mut worst = 0.0f64;
        for iv in 0..vp {
            for iu in 0..up {
                let iu1 = (iu + 1) % g.nu;
                let iv1 = (iv + 1) % g.nv;
                let mut loop_sum = (self.eta_u.at(iu, iv) + self.eta_u.at(iu1, iv)) * (0.5 * g.h_u);
                loop_sum += (self.eta_v.at(iu1, iv) + self.eta_v.at(iu1, iv1)) * (0.5 * g.h_v);
                loop_sum -= (self.eta_u.at(iu1, iv1) + self.eta_u.at(iu, iv1)) * (0.5 * g.h_u);
                loop_sum -= (self.eta_v.at(iu, iv1) + self.eta_v.at(iu, iv)) * (0.5 * g.h_v);
                worst = worst.max(loop_sum.amax() / area);
            }
        }
        worst
    }
}

/// max-node Frobenius norm of d_u(eta_v) - d_v(eta_u) by fourth-order
/// stencils, relative to the field's largest entry.
pub fn closedness_residual(field: &EtaField) -> f64 {
    let flat_u = field.eta_u.map(flatten);
    let flat_v = field.eta_v.map(flatten);
    let du_of_v = grid_diff(&flat_v, &field.grid, Axis::U, 1, 5);
    let dv_of_u = grid_diff(&flat_u, &field.grid, Axis::V, 1, 5);
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for iv in 0..field.grid.nv {
        for iu in 0..field.grid.nu {
            let d = du_of_v.at(iu, iv) - dv_of_u.at(iu, iv);
            worst = worst.max(d.norm());
            scale = scale.max(field.eta_u.at(iu, iv).amax()).max(field.eta_v.at(iu, iv).amax());
        }
    }
    worst / scale.max(1e-300)
}

fn flatten(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Recovers the quadratic differential q from eta via
/// q(X, Y)/2 * F = eta_X dF(Y); returns per-node symmetric 2x2 tables
/// [q_uu, q_uv; q_uv, q_vv] plus the worst proportionality defect.
pub fn quadratic_differential(
    eta: &EtaField,
    patch: &SurfacePatch,
) -> (GridData<[f64; 3]>, f64) {
    let (fu, fv) = patch.lift_derivs_best();
    let mut defect = 0.0f64;
    let table = GridData::from_fn(patch.grid.nu, patch.grid.nv, |iu, iv| {
        let f = patch.lift.at(iu, iv);
        let fnorm2 = f.coords().norm_squared();
        let mut comp = |axis: Axis, dir: &LorentzVector| -> f64 {
            let val = eta.apply(iu, iv, axis, dir);
            let c = val.coords().dot(f.coords()) / fnorm2;
            let mut resid = val.clone();
            resid.axpy(-c, f);
            defect = defect.max(resid.coord_norm() / val.coord_norm().max(1e-300));
            2.0 * c
        };
        let q_uu = comp(Axis::U, fu.at(iu, iv));
        let q_uv = comp(Axis::U, fv.at(iu, iv));
        let q_vv = comp(Axis::V, fv.at(iu, iv));
        [q_uu, q_uv, q_vv]
    });
    (table, defect)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::CoordGrid;
    use crate::surface::{generate_surface, SurfaceKind};

    fn cylinder(nu: usize, nv: usize) -> SurfacePatch {
        let g = CoordGrid::new(nu, nv, (0.0, 2.0 * std::f64::consts::PI), (-1.0, 1.0), true, false)
            .unwrap();
        generate_surface(&SurfaceKind::Cylinder { radius: 1.0 }, g, None).unwrap()
    }

    #[test]
    fn cylinder_kappa_is_half_l() {
        let p = cylinder(32, 32);
        let eta = build_eta(&p).unwrap();
        assert!((eta.kappa - 0.5).abs() < 1e-12);
    }

    #[test]
    fn eta_annihilates_the_lift() {
        let p = cylinder(32, 32);
        let eta = build_eta(&p).unwrap();
        assert!(eta.annihilation_residual(&p.lift) < 1e-12);
    }

    #[test]
    fn eta_matches_scaled_coordinate_formula_on_cylinder() {
        let p = cylinder(32, 32);
        let eta = build_eta(&p).unwrap();
        // theta = 0, kappa = 1/2: eta_u = -(1/2) F wedge F_u.
        let (fu, _) = p.lift_derivs_best();
        let expect = Bivector::wedge(p.lift.at(3, 5).clone(), fu.at(3, 5).scale(-0.5)).to_matrix(5);
        assert!((expect - eta.eta_u.at(3, 5)).amax() < 1e-12);
    }

    #[test]
    fn closedness_small_and_reassembly_exact() {
        let p = cylinder(48, 48);
        let eta = build_eta(&p).unwrap();
        assert!(eta.closedness_residual < 1e-4, "closedness {:e}", eta.closedness_residual);
        assert!(eta.reassembly_residual() < 1e-12);
    }

    #[test]
    fn plaquette_residual_refines_at_second_order() {
        let coarse = {
            let p = cylinder(32, 32);
            build_eta(&p).unwrap().plaquette_residual()
        };
        let fine = {
            let p = cylinder(64, 64);
            build_eta(&p).unwrap().plaquette_residual()
        };
        assert!(coarse / fine >= 3.5, "ratio {}", coarse / fine);
    }

    #[test]
    fn umbilic_patch_rejected_without_override() {
        let g = CoordGrid::new(16, 16, (0.0, 2.0 * std::f64::consts::PI), (-0.7, 0.7), true, false)
            .unwrap();
        let p = generate_surface(&SurfaceKind::SpherePatch { radius: 1.0 }, g, None).unwrap();
        assert!(matches!(build_eta(&p), Err(GeomError::TotallyUmbilic)));
        assert!(build_eta_with(&p, &BuildEtaOptions { allow_umbilic: true }).is_ok());
    }

    #[test]
    fn quadratic_differential_on_cylinder() {
        let p = cylinder(48, 48);
        let eta = build_eta(&p).unwrap();
        let (q, defect) = quadratic_differential(&eta, &p);
        // q_uu = 2 kappa = 1, q_uv = 0, trace-free: q_uu + q_vv = 0.
        let q0 = q.at(7, 9);
        assert!((q0[0] - 2.0 * eta.kappa).abs() < 1e-8);
        assert!(q0[1].abs() < 1e-8);
        assert!((q0[0] + q0[2]).abs() < 1e-8);
        assert!(defect < 1e-8);
    }

    #[test]
    fn sign_flip_of_eta_flips_q() {
        let p = cylinder(32, 32);
        let mut eta = build_eta(&p).unwrap();
        eta.eta_u = eta.eta_u.map(|m| -m);
        eta.eta_v = eta.eta_v.map(|m| -m);
        let (q, _) = quadratic_differential(&eta, &p);
        assert!((q.at(3, 3)[0] + 2.0 * eta.kappa).abs() < 1e-8);
    }
}
