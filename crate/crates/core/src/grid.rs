//! Uniform (u,v) grids, finite-difference stencils, and high-order
//! cumulative quadrature along grid lines.

use nalgebra::DVector;

use crate::error::{GeomError, Result};

/// Coordinate axis of the parameter domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    U,
    V,
}

/// Uniform rectangular parameter grid.
#[derive(Debug, Clone)]
pub struct CoordGrid {
    pub nu: usize,
    pub nv: usize,
    pub u0: f64,
    pub v0: f64,
    pub h_u: f64,
    pub h_v: f64,
    pub periodic_u: bool,
    pub periodic_v: bool,
}

impl CoordGrid {
    pub fn new(
        nu: usize,
        nv: usize,
        u_range: (f64, f64),
        v_range: (f64, f64),
        periodic_u: bool,
        periodic_v: bool,
    ) -> Result<Self> {
        if nu < 8 {
            return Err(GeomError::GridTooSmall { need: 8, got: nu });
        }
        if nv < 8 {
            return Err(GeomError::GridTooSmall { need: 8, got: nv });
        }
        // Periodic directions cover [a, b) with nu steps of (b-a)/nu; open
        // directions sample both endpoints.
        let h_u = if periodic_u {
            (u_range.1 - u_range.0) / nu as f64
        } else {
            (u_range.1 - u_range.0) / (nu - 1) as f64
        };
        let h_v = if periodic_v {
            (v_range.1 - v_range.0) / nv as f64
        } else {
            (v_range.1 - v_range.0) / (nv - 1) as f64
        };
        if !(h_u.is_finite() && h_v.is_finite()) || h_u <= 0.0 || h_v <= 0.0 {
            return Err(GeomError::NonUniformGrid);
        }
        Ok(Self { nu, nv, u0: u_range.0, v0: v_range.0, h_u, h_v, periodic_u, periodic_v })
    }

    pub fn u(&self, iu: usize) -> f64 {
        self.u0 + iu as f64 * self.h_u
    }

    pub fn v(&self, iv: usize) -> f64 {
        self.v0 + iv as f64 * self.h_v
    }

    pub fn node_count(&self) -> usize {
        self.nu * self.nv
    }

    pub fn len(&self, axis: Axis) -> usize {
        match axis {
            Axis::U => self.nu,
            Axis::V => self.nv,
        }
    }

    pub fn spacing(&self, axis: Axis) -> f64 {
        match axis {
            Axis::U => self.h_u,
            Axis::V => self.h_v,
        }
    }

    pub fn periodic(&self, axis: Axis) -> bool {
        match axis {
            Axis::U => self.periodic_u,
            Axis::V => self.periodic_v,
        }
    }
}

/// Row-major (v-major) storage of per-node values.
#[derive(Debug, Clone)]
pub struct GridData<T> {
    nu: usize,
    nv: usize,
    data: Vec<T>,
}

impl<T: Clone> GridData<T> {
    pub fn from_fn(nu: usize, nv: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(nu * nv);
        for iv in 0..nv {
            for iu in 0..nu {
                data.push(f(iu, iv));
            }
        }
        Self { nu, nv, data }
    }

    pub fn fill(nu: usize, nv: usize, value: T) -> Self {
        Self { nu, nv, data: vec![value; nu * nv] }
    }

    pub fn nu(&self) -> usize {
        self.nu
    }

    pub fn nv(&self) -> usize {
        self.nv
    }

    pub fn at(&self, iu: usize, iv: usize) -> &T {
        &self.data[iv * self.nu + iu]
    }

    pub fn at_mut(&mut self, iu: usize, iv: usize) -> &mut T {
        &mut self.data[iv * self.nu + iu]
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.data.iter()
    }

    pub fn indexed_iter(&self) -> impl Iterator<Item = ((usize, usize), &T)> {
        let nu = self.nu;
        self.data.iter().enumerate().map(move |(k, t)| ((k % nu, k / nu), t))
    }

    pub fn map<S: Clone>(&self, f: impl FnMut(&T) -> S) -> GridData<S> {
        GridData { nu: self.nu, nv: self.nv, data: self.data.iter().map(f).collect() }
    }

    /// Copies the row band iv0..=iv1.
    pub fn slice_rows(&self, iv0: usize, iv1: usize) -> GridData<T> {
        GridData::from_fn(self.nu, iv1 - iv0 + 1, |iu, iv| self.at(iu, iv0 + iv).clone())
    }
}

impl GridData<f64> {
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Max deviation from the mean.
    pub fn spread(&self) -> f64 {
        let m = self.mean();
        self.data.iter().fold(0.0f64, |s, v| s.max((v - m).abs()))
    }
}

/// Fornberg weights for the m-th derivative at point `x0` from samples at
/// `xs`. Classic recursion; exact for the interpolating polynomial.
pub fn fornberg_weights(x0: f64, xs: &[f64], m: usize) -> Vec<f64> {
    let n = xs.len();
    let mut c = vec![vec![0.0; m + 1]; n];
    let mut c1 = 1.0;
    let mut c4 = xs[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|row| row[m]).collect()
}

/// Stencil (offsets and weights) for the m-th derivative at index `i` on a
/// line of `len` samples with spacing `h`; `width` points, centered where
/// possible, wrapped when periodic and clamped otherwise.
pub fn line_stencil(
    i: usize,
    len: usize,
    h: f64,
    m: usize,
    width: usize,
    periodic: bool,
) -> Vec<(usize, f64)> {
    let width = width.min(len);
    let half = width / 2;
    let offsets: Vec<isize> = if periodic {
        (0..width).map(|k| k as isize - half as isize).collect()
    } else {
        let lo = (i as isize - half as isize).clamp(0, (len - width) as isize);
        (0..width).map(|k| lo + k as isize - i as isize).collect()
    };
    let xs: Vec<f64> = offsets.iter().map(|&o| o as f64 * h).collect();
    let w = fornberg_weights(0.0, &xs, m);
    offsets
        .into_iter()
        .zip(w)
        .map(|(o, wk)| {
            let j = if periodic {
                (i as isize + o).rem_euclid(len as isize) as usize
            } else {
                (i as isize + o) as usize
            };
            (j, wk)
        })
        .collect()
}

/// Differentiates a line of vectors with the given derivative order `m` and
/// stencil width.
pub fn diff_line(
    values: &[DVector<f64>],
    h: f64,
    m: usize,
    width: usize,
    periodic: bool,
) -> Vec<DVector<f64>> {
    let len = values.len();
    let dim = values[0].len();
    (0..len)
        .map(|i| {
            let st = line_stencil(i, len, h, m, width, periodic);
            let mut out = DVector::zeros(dim);
            for (j, w) in st {
                out.axpy(w, &values[j], 1.0);
            }
            out
        })
        .collect()
}

/// Cumulative integral of a sampled line by the trapezoid rule with
/// Euler-Maclaurin endpoint corrections (h^2 and h^4 terms); derivative
/// estimates come from wide Fornberg stencils, so the cumulative error is
/// O(h^6) on smooth data.
pub fn cumulative_integral_line(
    values: &[DVector<f64>],
    h: f64,
    periodic: bool,
) -> Vec<DVector<f64>> {
    let len = values.len();
    let dim = values[0].len();
    let d1 = diff_line(values, h, 1, 7.min(len), periodic);
    let d3 = diff_line(values, h, 3, 7.min(len), periodic);
    let mut out = Vec::with_capacity(len);
    out.push(DVector::zeros(dim));
    let c2 = h * h / 12.0;
    let c4 = h.powi(4) / 720.0;
    for k in 1..len {
        let mut step = (&values[k - 1] + &values[k]) * (0.5 * h);
        step.axpy(-c2, &(&d1[k] - &d1[k - 1]), 1.0);
        step.axpy(c4, &(&d3[k] - &d3[k - 1]), 1.0);
        let prev = &out[k - 1];
        out.push(prev + step);
    }
    out
}

/// Single-interval quadrature weightings used in edge-consistency rows: the
/// trapezoid + EM-corrected increment from node a to node b along a line.
pub struct LineQuadrature {
    /// increments[k] approximates the integral from node k to node k+1.
    pub increments: Vec<DVector<f64>>,
}

pub fn line_increments(values: &[DVector<f64>], h: f64, periodic: bool) -> LineQuadrature {
    let len = values.len();
    let d1 = diff_line(values, h, 1, 7.min(len), periodic);
    let d3 = diff_line(values, h, 3, 7.min(len), periodic);
    let c2 = h * h / 12.0;
    let c4 = h.powi(4) / 720.0;
    let upper = if periodic { len } else { len - 1 };
    let mut increments = Vec::with_capacity(upper);
    for k in 0..upper {
        let k1 = (k + 1) % len;
        let mut step = (&values[k] + &values[k1]) * (0.5 * h);
        step.axpy(-c2, &(&d1[k1] - &d1[k]), 1.0);
        step.axpy(c4, &(&d3[k1] - &d3[k]), 1.0);
        increments.push(step);
    }
    LineQuadrature { increments }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fornberg_reproduces_central_second_order() {
        let w = fornberg_weights(0.0, &[-1.0, 0.0, 1.0], 1);
        assert!((w[0] + 0.5).abs() < 1e-14);
        assert!(w[1].abs() < 1e-14);
        assert!((w[2] - 0.5).abs() < 1e-14);
        let w2 = fornberg_weights(0.0, &[-1.0, 0.0, 1.0], 2);
        assert!((w2[0] - 1.0).abs() < 1e-14);
        assert!((w2[1] + 2.0).abs() < 1e-14);
        assert!((w2[2] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn diff_line_is_high_order_on_trig() {
        let n = 64;
        let h = 2.0 * std::f64::consts::PI / n as f64;
        let vals: Vec<DVector<f64>> = (0..n)
            .map(|i| DVector::from_column_slice(&[(i as f64 * h).sin()]))
            .collect();
        let d = diff_line(&vals, h, 1, 7, true);
        let err = (0..n)
            .map(|i| (d[i][0] - (i as f64 * h).cos()).abs())
            .fold(0.0f64, f64::max);
        assert!(err < 1e-8, "err = {err:e}");
    }

    #[test]
    fn cumulative_integral_high_order_on_trig() {
        let n = 64;
        let h = 2.0 * std::f64::consts::PI / n as f64;
        let vals: Vec<DVector<f64>> = (0..n)
            .map(|i| DVector::from_column_slice(&[(i as f64 * h).cos()]))
            .collect();
        let integral = cumulative_integral_line(&vals, h, true);
        let err = (0..n)
            .map(|i| (integral[i][0] - (i as f64 * h).sin()).abs())
            .fold(0.0f64, f64::max);
        assert!(err < 1e-9, "err = {err:e}");
    }

    #[test]
    fn cumulative_integral_open_line_polynomial_exact() {
        let n = 16;
        let h = 0.1;
        // g = 3 v^2 -> integral v^3, exact for the EM-corrected rule.
        let vals: Vec<DVector<f64>> = (0..n)
            .map(|i| DVector::from_column_slice(&[3.0 * (i as f64 * h).powi(2)]))
            .collect();
        let integral = cumulative_integral_line(&vals, h, false);
        for i in 0..n {
            let exact = (i as f64 * h).powi(3);
            assert!((integral[i][0] - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_rejects_small_dims() {
        assert!(CoordGrid::new(4, 64, (0.0, 1.0), (0.0, 1.0), false, false).is_err());
    }
}
