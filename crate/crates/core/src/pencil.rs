//! The pencil of connections d + t eta as discrete parallel transport on
//! grid edges, plus flatness diagnostics, parallel sections and frames.
//!
//! Edge maps are exponentials of Gram-skew generators, so every transport
//! is exactly metric: null vectors stay null and inner products are
//! preserved structurally, which the whole transform theory leans on.

use nalgebra::DMatrix;

use crate::error::{GeomError, Result};
use crate::eta::EtaField;
use crate::grid::{Axis, CoordGrid, GridData};
use crate::lorentz::{exp_skew_matrix, inner, LorentzVector, OrthogonalMap};

/// Directed edge between adjacent grid nodes (forward along the axis,
/// wrapping in periodic directions).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridEdge {
    pub iu: usize,
    pub iv: usize,
    pub axis: Axis,
}

impl GridEdge {
    pub fn from_node(&self) -> (usize, usize) {
        (self.iu, self.iv)
    }

    pub fn to_node(&self, grid: &CoordGrid) -> (usize, usize) {
        match self.axis {
            Axis::U => ((self.iu + 1) % grid.nu, self.iv),
            Axis::V => (self.iu, (self.iv + 1) % grid.nv),
        }
    }
}

/// Integration scheme for edge transports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportScheme {
    /// One-step Magnus: exponential of the edge-midpoint generator
    /// (average of the endpoint values). Second order.
    Midpoint,
    /// Three-point Gauss Magnus, sixth order; needs an eta closure.
    Gauss6,
}

/// Per-edge transport generator for the pencil.
pub struct TransportAtlas<'a> {
    pub eta: &'a EtaField,
    pub scheme: TransportScheme,
}

impl<'a> TransportAtlas<'a> {
    /// Midpoint-Magnus atlas (always available).
    pub fn midpoint(eta: &'a EtaField) -> Self {
        Self { eta, scheme: TransportScheme::Midpoint }
    }

    /// Highest-order atlas the field supports.
    pub fn best(eta: &'a EtaField) -> Self {
        let scheme =
            if eta.closure.is_some() { TransportScheme::Gauss6 } else { TransportScheme::Midpoint };
        Self { eta, scheme }
    }

    pub fn grid(&self) -> &CoordGrid {
        &self.eta.grid
    }

    /// Transport map along a forward edge for the connection d + t eta.
    pub fn transport(&self, edge: &GridEdge, t: f64) -> OrthogonalMap {
        match self.scheme {
            TransportScheme::Midpoint => edge_transport(self.eta, edge, t),
            TransportScheme::Gauss6 => gauss6_transport(self.eta, edge, t),
        }
    }
}

/// Midpoint-Magnus edge transport: exp(-t h eta_mid), eta_mid the average
/// of the endpoint values.
pub fn edge_transport(eta: &EtaField, edge: &GridEdge, t: f64) -> OrthogonalMap {
    let grid = &eta.grid;
    let (iu2, iv2) = edge.to_node(grid);
    let h = grid.spacing(edge.axis);
    let a = eta.value(edge.iu, edge.iv, edge.axis);
    let b = eta.value(iu2, iv2, edge.axis);
    let omega = (a + b) * (-0.5 * t * h);
    exp_skew_matrix(&omega)
}

/// Sixth-order Magnus step on one edge using the eta closure at the
/// three-point Gauss nodes.
fn gauss6_transport(eta: &EtaField, edge: &GridEdge, t: f64) -> OrthogonalMap {
    let closure = eta.closure.as_ref().expect("Gauss6 scheme requires an eta closure");
    let grid = &eta.grid;
    let h = grid.spacing(edge.axis);
    let (u0, v0) = (grid.u(edge.iu), grid.v(edge.iv));
    gauss6_step(closure.as_ref(), u0, v0, edge.axis, h, t)
}

/// Sixth-order Magnus step of signed length `len` from (u0, v0) along the
/// axis, for the connection d + t eta.
pub fn gauss6_step(
    closure: &dyn crate::eta::EtaClosure,
    u0: f64,
    v0: f64,
    axis: Axis,
    len: f64,
    t: f64,
) -> OrthogonalMap {
    let root15 = 15f64.sqrt();
    let cs = [0.5 - root15 / 10.0, 0.5, 0.5 + root15 / 10.0];
    let sample = |c: f64| -> DMatrix<f64> {
        let (u, v) = match axis {
            Axis::U => (u0 + c * len, v0),
            Axis::V => (u0, v0 + c * len),
        };
        closure.eta(u, v, axis) * (-t)
    };
    let b1 = sample(cs[0]);
    let b2 = sample(cs[1]);
    let b3 = sample(cs[2]);
    let a1 = &b2 * len;
    let a2 = (&b3 - &b1) * (root15 / 3.0 * len);
    let a3 = (&b1 - &b2 * 2.0 + &b3) * (10.0 / 3.0 * len);
    let c1 = comm(&a1, &a2);
    let c2 = comm(&a1, &(&a3 * 2.0 + &c1)) * (-1.0 / 60.0);
    let omega = &a1
        + &a3 * (1.0 / 12.0)
        + comm(&(&a1 * -20.0 - &a3 + &c1), &(&a2 + &c2)) * (1.0 / 240.0);
    exp_skew_matrix(&omega)
}

fn comm(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a * b - b * a
}

/// Max over plaquettes of |4-edge loop composite - identity| (max-abs entry).
pub fn holonomy_residual(atlas: &TransportAtlas, t: f64) -> f64 {
    let grid = atlas.grid();
    let up = if grid.periodic_u { grid.nu } else { grid.nu - 1 };
    let vp = if grid.periodic_v { grid.nv } else { grid.nv - 1 };
    let dim = atlas.eta.dim();
    let eye = DMatrix::<f64>::identity(dim, dim);
    let mut worst = 0.0f64;
    for iv in 0..vp {
        for iu in 0..up {
            let iu1 = (iu + 1) % grid.nu;
            let bottom = atlas.transport(&GridEdge { iu, iv, axis: Axis::U }, t);
            let right = atlas.transport(&GridEdge { iu: iu1, iv, axis: Axis::V }, t);
            let top = atlas.transport(&GridEdge { iu, iv: (iv + 1) % grid.nv, axis: Axis::U }, t);
            let left = atlas.transport(&GridEdge { iu, iv, axis: Axis::V }, t);
            let loop_map = left
                .inverse()
                .compose(&top.inverse())
                .compose(&right)
                .compose(&bottom);
            worst = worst.max((loop_map.matrix() - &eye).amax());
        }
    }
    worst
}

/// A section parallel for d + t eta along the integration tree
/// (first column, then rows), with consistency diagnostics.
#[derive(Debug, Clone)]
pub struct ParallelSection {
    pub t: f64,
    pub base: (usize, usize),
    pub values: GridData<LorentzVector>,
    /// Worst relative mismatch across non-tree edges.
    pub cross_edge_residual: f64,
    /// Worst drift of (value, value) from the base value.
    pub norm_drift: f64,
}

/// Integrates a parallel section from a base value at node (0, 0).
pub fn parallel_section(atlas: &TransportAtlas, t: f64, base_value: &LorentzVector) -> ParallelSection {
    let grid = atlas.grid().clone();
    let mut values = GridData::fill(grid.nu, grid.nv, base_value.clone());
    // First column.
    for iv in 1..grid.nv {
        let edge = GridEdge { iu: 0, iv: iv - 1, axis: Axis::V };
        let m = atlas.transport(&edge, t);
        let prev = values.at(0, iv - 1).clone();
        *values.at_mut(0, iv) = m.apply(&prev);
    }
    // Then along rows.
    for iv in 0..grid.nv {
        for iu in 1..grid.nu {
            let edge = GridEdge { iu: iu - 1, iv, axis: Axis::U };
            let m = atlas.transport(&edge, t);
            let prev = values.at(iu - 1, iv).clone();
            *values.at_mut(iu, iv) = m.apply(&prev);
        }
    }

    let cross_edge_residual = cross_edge_residual(atlas, t, &values);
    let base_norm = inner(base_value, base_value);
    let mut norm_drift = 0.0f64;
    for v in values.iter() {
        norm_drift = norm_drift.max((inner(v, v) - base_norm).abs());
    }
    ParallelSection { t, base: (0, 0), values, cross_edge_residual, norm_drift }
}

/// Relative defect of a candidate parallel section across the non-tree
/// edges of the coordinate rectangle. Wrap edges are excluded: a flat
/// connection on a periodic patch generally has nontrivial monodromy, so
/// sections live on the rectangle, not the quotient.
pub fn cross_edge_residual(atlas: &TransportAtlas, t: f64, values: &GridData<LorentzVector>) -> f64 {
    let grid = atlas.grid();
    let mut worst = 0.0f64;
    let mut check = |edge: GridEdge| {
        let (ju, jv) = edge.to_node(grid);
        let m = atlas.transport(&edge, t);
        let pushed = m.apply(values.at(edge.iu, edge.iv));
        let target = values.at(ju, jv);
        let d = pushed.sub(target).coord_norm() / target.coord_norm().max(1e-300);
        worst = worst.max(d);
    };
    for iu in 1..grid.nu {
        for iv in 0..grid.nv - 1 {
            check(GridEdge { iu, iv, axis: Axis::V });
        }
    }
    worst
}

/// Worst relative mismatch of a section across the periodic wrap edges;
/// order one when the monodromy acts nontrivially on the section.
pub fn wrap_defect(atlas: &TransportAtlas, t: f64, values: &GridData<LorentzVector>) -> f64 {
    let grid = atlas.grid();
    let mut worst = 0.0f64;
    let mut check = |edge: GridEdge| {
        let (ju, jv) = edge.to_node(grid);
        let m = atlas.transport(&edge, t);
        let pushed = m.apply(values.at(edge.iu, edge.iv));
        let target = values.at(ju, jv);
        worst = worst
            .max(pushed.sub(target).coord_norm() / target.coord_norm().max(1e-300));
    };
    if grid.periodic_u {
        for iv in 0..grid.nv {
            check(GridEdge { iu: grid.nu - 1, iv, axis: Axis::U });
        }
    }
    if grid.periodic_v {
        for iu in 0..grid.nu {
            check(GridEdge { iu, iv: grid.nv - 1, axis: Axis::V });
        }
    }
    worst
}

/// Gauge grid Phi_s with Phi_s . (d + s eta) = d: Phi_s^{-1} columns are the
/// parallel transports of the standard basis from the base node.
pub fn parallel_frame(atlas: &TransportAtlas, s: f64) -> GridData<OrthogonalMap> {
    let grid = atlas.grid().clone();
    let dim = atlas.eta.dim();
    let mut frames = GridData::fill(grid.nu, grid.nv, OrthogonalMap::identity(dim));
    // Transport the identity frame along the tree, then invert.
    let mut carried = GridData::fill(grid.nu, grid.nv, OrthogonalMap::identity(dim));
    for iv in 1..grid.nv {
        let m = atlas.transport(&GridEdge { iu: 0, iv: iv - 1, axis: Axis::V }, s);
        let prev = carried.at(0, iv - 1).clone();
        *carried.at_mut(0, iv) = m.compose(&prev);
    }
    for iv in 0..grid.nv {
        for iu in 1..grid.nu {
            let m = atlas.transport(&GridEdge { iu: iu - 1, iv, axis: Axis::U }, s);
            let prev = carried.at(iu - 1, iv).clone();
            *carried.at_mut(iu, iv) = m.compose(&prev);
        }
    }
    for iv in 0..grid.nv {
        for iu in 0..grid.nu {
            *frames.at_mut(iu, iv) = carried.at(iu, iv).inverse();
        }
    }
    frames
}

/// Residual of the gauge identity Phi_s . (d + s eta) = d, measured by
/// applying both sides to the constant basis sections with second-order
/// differences for d.
pub fn gauge_identity_residual(
    atlas: &TransportAtlas,
    s: f64,
    frames: &GridData<OrthogonalMap>,
) -> f64 {
    let grid = atlas.grid();
    let inv = frames.map(|m| m.inverse());
    let flat_inv = inv.map(|m| nalgebra::DVector::from_column_slice(m.matrix().as_slice()));
    let dim = atlas.eta.dim();
    let unflatten = |v: &nalgebra::DVector<f64>| DMatrix::from_column_slice(dim, dim, v.as_slice());
    // The frame has monodromy across periodic wraps; differentiate the
    // rectangle, not the quotient.
    let du = crate::surface::grid_diff_with(&flat_inv, grid, Axis::U, 1, 3, false);
    let dv = crate::surface::grid_diff_with(&flat_inv, grid, Axis::V, 1, 3, false);
    let mut worst = 0.0f64;
    for iv in 0..grid.nv {
        for iu in 0..grid.nu {
            let phi = frames.at(iu, iv).matrix();
            let phi_inv = inv.at(iu, iv).matrix();
            for (axis, d) in [(Axis::U, du.at(iu, iv)), (Axis::V, dv.at(iu, iv))] {
                // Phi (d + s eta) Phi^{-1} = d + Phi [d Phi^{-1} + s eta Phi^{-1}];
                // the bracket must vanish.
                let dinv = unflatten(d);
                let resid = phi * (&dinv + atlas.eta.value(iu, iv, axis) * phi_inv * s);
                worst = worst.max(resid.amax());
            }
        }
    }
    worst
}

/// Checks that m is non-zero; shared guard for spectral-parameter inputs.
pub fn require_nonzero_parameter(m: f64) -> Result<()> {
    if m == 0.0 || !m.is_finite() {
        return Err(GeomError::ZeroSpectralParameter);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eta::build_eta;
    use crate::grid::CoordGrid;
    use crate::lorentz::LorentzVector;
    use crate::surface::{generate_surface, SurfaceKind, SurfacePatch};

    fn cylinder(nu: usize, nv: usize) -> SurfacePatch {
        let g = CoordGrid::new(nu, nv, (0.0, 2.0 * std::f64::consts::PI), (-1.0, 1.0), true, false)
            .unwrap();
        generate_surface(&SurfaceKind::Cylinder { radius: 1.0 }, g, None).unwrap()
    }

    #[test]
    fn transport_at_zero_is_identity() {
        let p = cylinder(16, 16);
        let eta = build_eta(&p).unwrap();
        let m = edge_transport(&eta, &GridEdge { iu: 3, iv: 4, axis: Axis::U }, 0.0);
        assert!((m.matrix() - DMatrix::<f64>::identity(5, 5)).amax() < 1e-15);
    }

    #[test]
    fn transport_preserves_inner_products() {
        let p = cylinder(16, 16);
        let eta = build_eta(&p).unwrap();
        let atlas = TransportAtlas::midpoint(&eta);
        let x = LorentzVector::from_slice(&[0.3, -1.0, 2.0, 0.5, 0.7]).unwrap();
        let y = LorentzVector::from_slice(&[1.0, 0.2, -0.4, 1.5, -2.0]).unwrap();
        for t in [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0] {
            let m = atlas.transport(&GridEdge { iu: 7, iv: 2, axis: Axis::V }, t);
            let drift = (inner(&m.apply(&x), &m.apply(&y)) - inner(&x, &y)).abs();
            assert!(drift <= 1e-10 * x.coord_norm() * y.coord_norm());
        }
    }

    #[test]
    fn transport_expansion_matches_eta_action() {
        // Applying a u-edge transport to F(p) reproduces F(p) + O(h^2)
        // since eta F = 0.
        let p = cylinder(64, 64);
        let eta = build_eta(&p).unwrap();
        let atlas = TransportAtlas::midpoint(&eta);
        let f0 = p.lift.at(0, 32).clone();
        let m = atlas.transport(&GridEdge { iu: 0, iv: 32, axis: Axis::U }, 1.0);
        let moved = m.apply(&f0);
        let h = p.grid.h_u;
        assert!(moved.sub(&f0).coord_norm() < 2.0 * h * h);
    }

    #[test]
    fn holonomy_zero_at_t_zero_and_small_on_cylinder() {
        let p = cylinder(32, 32);
        let eta = build_eta(&p).unwrap();
        let atlas = TransportAtlas::midpoint(&eta);
        assert!(holonomy_residual(&atlas, 0.0) < 1e-14);
        let r = holonomy_residual(&atlas, 1.0);
        assert!(r > 0.0 && r < 1e-2, "holonomy {r:e}");
    }

    #[test]
    fn holonomy_refines_and_scales_in_t() {
        let r32 = {
            let p = cylinder(32, 32);
            let eta = build_eta(&p).unwrap();
            holonomy_residual(&TransportAtlas::midpoint(&eta), 1.0)
        };
        let (r64, r64_half, r64_2) = {
            let p = cylinder(64, 64);
            let eta = build_eta(&p).unwrap();
            let atlas = TransportAtlas::midpoint(&eta);
            (
                holonomy_residual(&atlas, 1.0),
                holonomy_residual(&atlas, 0.5),
                holonomy_residual(&atlas, 2.0),
            )
        };
        assert!(r32 / r64 >= 3.5, "h ratio {}", r32 / r64);
        let up = r64_2 / r64;
        let down = r64 / r64_half;
        assert!((1.8..=4.5).contains(&up), "t-doubling ratio {up}");
        assert!((1.8..=4.5).contains(&down), "t-halving ratio {down}");
    }

    #[test]
    fn gauss6_holonomy_is_tiny_with_closure() {
        let p = cylinder(32, 32);
        let eta = build_eta(&p).unwrap();
        assert!(eta.closure.is_some());
        let atlas = TransportAtlas::best(&eta);
        assert_eq!(atlas.scheme, TransportScheme::Gauss6);
        let r = holonomy_residual(&atlas, 1.0);
        assert!(r < 1e-9, "gauss6 holonomy {r:e}");
    }

    #[test]
    fn parallel_section_constant_at_t_zero() {
        let p = cylinder(16, 16);
        let eta = build_eta(&p).unwrap();
        let atlas = TransportAtlas::midpoint(&eta);
        let vinf = LorentzVector::vinf(3);
        let s = parallel_section(&atlas, 0.0, &vinf);
        for v in s.values.iter() {
            assert!((v.coords() - vinf.coords()).norm() < 1e-14);
        }
        assert!(s.cross_edge_residual < 1e-14);
    }

    #[test]
    fn null_seed_stays_null() {
        let p = cylinder(32, 32);
        let eta = build_eta(&p).unwrap();
        let atlas = TransportAtlas::best(&eta);
        let seed = crate::lorentz::lift_to_cone(
            &nalgebra::DVector::from_column_slice(&[2.0, 0.3, -0.4]),
            &p.chart,
        );
        let s = parallel_section(&atlas, 0.7, &seed);
        assert!(s.norm_drift < 1e-10);
        for v in s.values.iter() {
            assert!(inner(v, v).abs() <= 1e-10 * v.coords().norm_squared());
        }
    }

    #[test]
    fn closed_form_type1_value_is_parallel_on_cylinder() {
        // p(1) = vinf + (F/2 + N) is d + eta parallel; integrating its base
        // value must reproduce the closed-form grid to high accuracy.
        let p = cylinder(64, 64);
        let eta = build_eta(&p).unwrap();
        let atlas = TransportAtlas::best(&eta);
        let closed = |iu: usize, iv: usize| {
            let mut v = LorentzVector::vinf(3);
            v.axpy(0.5, p.lift.at(iu, iv));
            v.axpy(1.0, p.normal.at(iu, iv));
            v
        };
        let s = parallel_section(&atlas, 1.0, &closed(0, 0));
        let mut worst = 0.0f64;
        for iv in 0..p.grid.nv {
            for iu in 0..p.grid.nu {
                worst = worst.max(s.values.at(iu, iv).sub(&closed(iu, iv)).coord_norm());
            }
        }
        assert!(worst < 1e-9, "closed-form mismatch {worst:e}");
        assert!(s.cross_edge_residual < 1e-9);
    }

    #[test]
    fn parallel_frame_gauges_the_connection_flat() {
        let p = cylinder(48, 48);
        let eta = build_eta(&p).unwrap();
        let atlas = TransportAtlas::best(&eta);
        let frames = parallel_frame(&atlas, 0.5);
        for iv in [0, 17, 47] {
            for iu in [0, 9, 31] {
                assert!(frames.at(iu, iv).gram_residual() < 1e-10);
            }
        }
        let resid = gauge_identity_residual(&atlas, 0.5, &frames);
        let h = p.grid.h_u;
        assert!(resid < 3.0 * h * h, "gauge residual {resid:e}");
        let id_frames = parallel_frame(&atlas, 0.0);
        assert!((id_frames.at(5, 5).matrix() - DMatrix::<f64>::identity(5, 5)).amax() < 1e-14);
    }
}
