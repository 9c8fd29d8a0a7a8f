//! Flat tori with a constant metric, sampled on a periodic grid.
//!
//! Grid points are numbered in row-major order: the last axis varies fastest.
//! Every grid function in this crate is stored point-major, with a fixed
//! number of components per point.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest resolution the central-difference stencil accepts along an axis.
pub const MIN_RESOLUTION: usize = 4;

/// Largest supported base dimension.
pub const MAX_DIM: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension {0} is outside 1..={MAX_DIM}")]
    Dimension(usize),
    #[error("expected {expected} entries for {what}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("resolution {resolution} along axis {axis} is below the stencil minimum {MIN_RESOLUTION}")]
    Resolution { axis: usize, resolution: usize },
    #[error("side length {length} along axis {axis} is not a positive finite number")]
    SideLength { axis: usize, length: f64 },
    #[error("metric is not symmetric positive definite")]
    Metric,
    #[error("axis {axis} out of range for a {dim}-dimensional torus")]
    Axis { axis: usize, dim: usize },
    #[error("non-finite value {value} at grid point {point}")]
    NonFinite { point: usize, value: f64 },
}

/// Serializable description of a torus, as found in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldDescriptor {
    pub dim: usize,
    pub resolution: Vec<usize>,
    #[serde(default)]
    pub side_lengths: Option<Vec<f64>>,
    /// Row-major `dim × dim`; identity when absent.
    #[serde(default)]
    pub metric: Option<Vec<f64>>,
}

/// The flat torus `R^n / (L_1 Z × … × L_n Z)` with a constant metric `g`.
#[derive(Debug, Clone)]
pub struct GridManifold {
    resolution: Vec<usize>,
    side_lengths: Vec<f64>,
    metric: DMatrix<f64>,
    inverse_metric: DMatrix<f64>,
    volume_density: f64,
    cell_volume: f64,
    strides: Vec<usize>,
    num_points: usize,
}

impl PartialEq for GridManifold {
    fn eq(&self, other: &Self) -> bool {
        self.resolution == other.resolution && self.side_lengths == other.side_lengths && self.metric == other.metric
    }
}

impl GridManifold {
    pub fn new(resolution: Vec<usize>, side_lengths: Vec<f64>, metric: DMatrix<f64>) -> Result<Self, GeometryError> {
        let dim = resolution.len();
        if dim == 0 || dim > MAX_DIM {
            return Err(GeometryError::Dimension(dim));
        }
        if side_lengths.len() != dim {
            return Err(GeometryError::Shape {
                what: "side lengths",
                expected: dim,
                got: side_lengths.len(),
            });
        }
        if metric.nrows() != dim || metric.ncols() != dim {
            return Err(GeometryError::Shape {
                what: "metric",
                expected: dim * dim,
                got: metric.len(),
            });
        }
        for (axis, &r) in resolution.iter().enumerate() {
            if r < MIN_RESOLUTION {
                return Err(GeometryError::Resolution { axis, resolution: r });
            }
        }
        for (axis, &l) in side_lengths.iter().enumerate() {
            if !(l.is_finite() && l > 0.0) {
                return Err(GeometryError::SideLength { axis, length: l });
            }
        }
        if !is_spd(&metric) {
            return Err(GeometryError::Metric);
        }
        let inverse_metric = metric.clone().try_inverse().ok_or(GeometryError::Metric)?;
        let volume_density = metric.determinant().sqrt();
        let cell_volume = volume_density
            * resolution
                .iter()
                .zip(&side_lengths)
                .map(|(&n, &l)| l / n as f64)
                .product::<f64>();
        let mut strides = vec![1; dim];
        for axis in (0..dim.saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * resolution[axis + 1];
        }
        let num_points = resolution.iter().product();
        Ok(Self {
            resolution,
            side_lengths,
            metric,
            inverse_metric,
            volume_density,
            cell_volume,
            strides,
            num_points,
        })
    }

    /// `T^dim` with `n` points per axis, side `2π` and the Euclidean metric.
    pub fn cube(dim: usize, n: usize) -> Result<Self, GeometryError> {
        Self::new(vec![n; dim], vec![2.0 * PI; dim], DMatrix::identity(dim, dim))
    }

    pub fn from_descriptor(desc: &ManifoldDescriptor) -> Result<Self, GeometryError> {
        let dim = desc.dim;
        if dim == 0 || dim > MAX_DIM {
            return Err(GeometryError::Dimension(dim));
        }
        if desc.resolution.len() != dim {
            return Err(GeometryError::Shape {
                what: "resolution",
                expected: dim,
                got: desc.resolution.len(),
            });
        }
        let sides = desc.side_lengths.clone().unwrap_or_else(|| vec![2.0 * PI; dim]);
        let metric = match &desc.metric {
            None => DMatrix::identity(dim, dim),
            Some(v) if v.len() == dim * dim => DMatrix::from_row_slice(dim, dim, v),
            Some(v) => {
                return Err(GeometryError::Shape {
                    what: "metric",
                    expected: dim * dim,
                    got: v.len(),
                })
            }
        };
        Self::new(desc.resolution.clone(), sides, metric)
    }

    pub fn descriptor(&self) -> ManifoldDescriptor {
        let dim = self.dim();
        ManifoldDescriptor {
            dim,
            resolution: self.resolution.clone(),
            side_lengths: Some(self.side_lengths.clone()),
            metric: Some(
                (0..dim)
                    .flat_map(|i| (0..dim).map(move |j| (i, j)))
                    .map(|(i, j)| self.metric[(i, j)])
                    .collect(),
            ),
        }
    }

    /// Same torus and metric at a different per-axis resolution.
    pub fn with_resolution(&self, n: usize) -> Result<Self, GeometryError> {
        Self::new(vec![n; self.dim()], self.side_lengths.clone(), self.metric.clone())
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.resolution.len()
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn side_lengths(&self) -> &[f64] {
        &self.side_lengths
    }

    pub fn metric(&self) -> &DMatrix<f64> {
        &self.metric
    }

    pub fn inverse_metric(&self) -> &DMatrix<f64> {
        &self.inverse_metric
    }

    /// `sqrt(det g)`.
    pub fn volume_density(&self) -> f64 {
        self.volume_density
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_volume
    }

    pub fn total_volume(&self) -> f64 {
        self.cell_volume * self.num_points as f64
    }

    #[inline]
    pub fn num_points(&self) -> usize {
        self.num_points
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.side_lengths[axis] / self.resolution[axis] as f64
    }

    /// Grid coordinates of point `p` along each axis.
    pub fn grid_index(&self, p: usize) -> Vec<usize> {
        self.strides
            .iter()
            .zip(&self.resolution)
            .map(|(&s, &n)| (p / s) % n)
            .collect()
    }

    pub fn coordinates(&self, p: usize) -> Vec<f64> {
        self.grid_index(p)
            .into_iter()
            .enumerate()
            .map(|(axis, j)| j as f64 * self.spacing(axis))
            .collect()
    }

    /// Periodic neighbour of `p` shifted by `offset` cells along `axis`.
    #[inline]
    pub fn shifted(&self, p: usize, axis: usize, offset: isize) -> usize {
        let n = self.resolution[axis] as isize;
        let s = self.strides[axis];
        let j = ((p / s) % n as usize) as isize;
        let shifted = (j + offset).rem_euclid(n) as usize;
        p - j as usize * s + shifted * s
    }

    /// Samples `f` at every grid point.
    pub fn sample(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..self.num_points).map(|p| f(&self.coordinates(p))).collect()
    }

    /// Grid-sum quadrature, `cell_volume · Σ_p field(p)`.
    pub fn integrate(&self, field: &[f64]) -> Result<f64, GeometryError> {
        if field.len() != self.num_points {
            return Err(GeometryError::Shape {
                what: "grid function",
                expected: self.num_points,
                got: field.len(),
            });
        }
        if let Some((point, &value)) = field.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(GeometryError::NonFinite { point, value });
        }
        Ok(self.cell_volume * field.iter().sum::<f64>())
    }

    /// Periodic second-order central difference along `axis` (0-based) of a
    /// grid function carrying `components` values per point.
    pub fn partial_derivative(&self, field: &[f64], components: usize, axis: usize) -> Result<Vec<f64>, GeometryError> {
        if axis >= self.dim() {
            return Err(GeometryError::Axis { axis, dim: self.dim() });
        }
        if field.len() != self.num_points * components {
            return Err(GeometryError::Shape {
                what: "grid function",
                expected: self.num_points * components,
                got: field.len(),
            });
        }
        let mut out = vec![0.0; field.len()];
        self.central_difference_into(field, components, axis, 1.0, &mut out);
        Ok(out)
    }

    /// `out += scale · D_axis field`, component-wise, without shape checks.
    pub(crate) fn central_difference_into(
        &self,
        field: &[f64],
        components: usize,
        axis: usize,
        scale: f64,
        out: &mut [f64],
    ) {
        if components == 0 {
            return;
        }
        let factor = scale / (2.0 * self.spacing(axis));
        out.par_chunks_mut(components).enumerate().for_each(|(p, dst)| {
            let fwd = self.shifted(p, axis, 1) * components;
            let bwd = self.shifted(p, axis, -1) * components;
            for (c, d) in dst.iter_mut().enumerate() {
                *d += factor * (field[fwd + c] - field[bwd + c]);
            }
        });
    }
}

pub(crate) fn is_spd(m: &DMatrix<f64>) -> bool {
    if m.nrows() != m.ncols() || m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let n = m.nrows();
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return false;
            }
        }
    }
    m.clone().symmetric_eigenvalues().iter().all(|&lambda| lambda > 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn volume_of_flat_torus() {
        let m = GridManifold::cube(2, 8).unwrap();
        let ones = vec![1.0; m.num_points()];
        assert_abs_diff_eq!(m.integrate(&ones).unwrap(), 4.0 * PI * PI, epsilon = 1e-12);
        assert_abs_diff_eq!(m.total_volume(), 4.0 * PI * PI, epsilon = 1e-12);
    }

    #[test]
    fn integral_of_sine_vanishes() {
        for n in [4, 5, 16] {
            let m = GridManifold::cube(2, n).unwrap();
            let f = m.sample(|x| x[0].sin());
            assert_abs_diff_eq!(m.integrate(&f).unwrap(), 0.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn integral_of_sine_squared_is_pi() {
        let m = GridManifold::cube(1, 64).unwrap();
        let f = m.sample(|x| x[0].sin().powi(2));
        assert_abs_diff_eq!(m.integrate(&f).unwrap(), PI, epsilon = 1e-10);
    }

    #[test]
    fn integrate_rejects_non_finite() {
        let m = GridManifold::cube(1, 4).unwrap();
        let err = m.integrate(&[0.0, 1.0, f64::NAN, 0.0]).unwrap_err();
        assert!(matches!(err, GeometryError::NonFinite { point: 2, .. }));
    }

    #[test]
    fn derivative_of_constant_is_zero() {
        let m = GridManifold::cube(2, 6).unwrap();
        let f = vec![3.5; m.num_points()];
        let d = m.partial_derivative(&f, 1, 1).unwrap();
        assert!(d.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn derivative_of_sine_matches_cosine() {
        let m = GridManifold::cube(2, 64).unwrap();
        let f = m.sample(|x| x[0].sin());
        let d = m.partial_derivative(&f, 1, 0).unwrap();
        let exact = m.sample(|x| x[0].cos());
        let err = d.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        // the stencil maps sin to (sin h / h) cos, so the max error is 1 - sin(h)/h
        let h = 2.0 * PI / 64.0;
        assert!((err - (1.0 - h.sin() / h)).abs() < 1e-12, "max error {err}");
        assert!(err < 3.2e-3);
        let d2 = m.partial_derivative(&f, 1, 1).unwrap();
        assert!(d2.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn second_order_convergence() {
        let errs: Vec<f64> = [16, 32, 64]
            .iter()
            .map(|&n| {
                let m = GridManifold::cube(1, n).unwrap();
                let f = m.sample(|x| (2.0 * x[0]).sin() + x[0].cos());
                let d = m.partial_derivative(&f, 1, 0).unwrap();
                let exact = m.sample(|x| 2.0 * (2.0 * x[0]).cos() - x[0].sin());
                d.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            })
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((3.7..4.3).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn summation_by_parts() {
        let m = GridManifold::cube(3, 6).unwrap();
        let f = m.sample(|x| (x[0] + 2.0 * x[1]).sin() * x[2].cos() + x[1].exp().sin());
        for axis in 0..3 {
            let d = m.partial_derivative(&f, 1, axis).unwrap();
            assert_abs_diff_eq!(m.integrate(&d).unwrap(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            GridManifold::cube(2, 3),
            Err(GeometryError::Resolution { .. })
        ));
        assert!(matches!(GridManifold::cube(7, 4), Err(GeometryError::Dimension(7))));
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            GridManifold::new(vec![4, 4], vec![1.0, 1.0], bad),
            Err(GeometryError::Metric)
        ));
        let m = GridManifold::cube(2, 4).unwrap();
        assert!(matches!(
            m.partial_derivative(&[0.0; 16], 1, 2),
            Err(GeometryError::Axis { axis: 2, dim: 2 })
        ));
    }

    #[test]
    fn shifted_wraps_around() {
        let m = GridManifold::new(vec![4, 5], vec![1.0, 1.0], DMatrix::identity(2, 2)).unwrap();
        // point (3, 4)
        let p = 3 * 5 + 4;
        assert_eq!(m.grid_index(m.shifted(p, 0, 1)), vec![0, 4]);
        assert_eq!(m.grid_index(m.shifted(p, 1, 1)), vec![3, 0]);
        assert_eq!(m.grid_index(m.shifted(0, 1, -1)), vec![0, 4]);
    }

    #[test]
    fn cell_volume_includes_metric() {
        let g = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let m = GridManifold::new(vec![4, 4], vec![1.0, 1.0], g).unwrap();
        assert_abs_diff_eq!(m.cell_volume(), 2.0 / 16.0, epsilon = 1e-15);
    }
}
