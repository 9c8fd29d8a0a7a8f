//! Pointwise bilinear products between grid forms as sparse coefficient tables.
//!
//! A table lists `(x, y, z, c)` over per-point component indices
//! (`multi-index position · rank + fiber index`) and encodes
//! `z[p] += c · x[p] · y[p]` at every grid point `p`. The same table drives the
//! forward product and both transposes, which is what makes the gradient terms
//! exact adjoints of the operator terms.

use rayon::prelude::*;

use crate::bundle::FiberTensor;
use crate::multiindex::{binomial, shuffle_sign, Basis};

#[derive(Debug, Clone, Copy)]
struct Entry {
    x: u32,
    y: u32,
    z: u32,
    c: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct ProductTable {
    pub x_width: usize,
    pub y_width: usize,
    pub z_width: usize,
    pub out_degree: usize,
    entries: Vec<Entry>,
}

impl ProductTable {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `z += x · y`.
    pub fn forward(&self, x: &[f64], y: &[f64], z: &mut [f64]) {
        if self.entries.is_empty() || self.z_width == 0 {
            return;
        }
        let (xw, yw) = (self.x_width, self.y_width);
        z.par_chunks_mut(self.z_width).enumerate().for_each(|(p, zp)| {
            let xp = &x[p * xw..(p + 1) * xw];
            let yp = &y[p * yw..(p + 1) * yw];
            for e in &self.entries {
                zp[e.z as usize] += e.c * xp[e.x as usize] * yp[e.y as usize];
            }
        });
    }

    /// `x̄ += (∂z/∂x)ᵀ z̄` at fixed `y`.
    pub fn transpose_x(&self, y: &[f64], zbar: &[f64], xbar: &mut [f64]) {
        if self.entries.is_empty() || self.x_width == 0 {
            return;
        }
        let (yw, zw) = (self.y_width, self.z_width);
        xbar.par_chunks_mut(self.x_width).enumerate().for_each(|(p, xp)| {
            let yp = &y[p * yw..(p + 1) * yw];
            let zp = &zbar[p * zw..(p + 1) * zw];
            for e in &self.entries {
                xp[e.x as usize] += e.c * yp[e.y as usize] * zp[e.z as usize];
            }
        });
    }

    /// `ȳ += (∂z/∂y)ᵀ z̄` at fixed `x`.
    pub fn transpose_y(&self, x: &[f64], zbar: &[f64], ybar: &mut [f64]) {
        if self.entries.is_empty() || self.y_width == 0 {
            return;
        }
        let (xw, zw) = (self.x_width, self.z_width);
        ybar.par_chunks_mut(self.y_width).enumerate().for_each(|(p, yp)| {
            let xp = &x[p * xw..(p + 1) * xw];
            let zp = &zbar[p * zw..(p + 1) * zw];
            for e in &self.entries {
                yp[e.y as usize] += e.c * xp[e.x as usize] * zp[e.z as usize];
            }
        });
    }
}

/// Shuffle wedge of a degree-`kx` form of rank `t.0` with a degree-`ky` form of
/// rank `t.1` into rank `t.2`; `None` when `kx + ky > n`.
pub(crate) fn shuffle(n: usize, kx: usize, ky: usize, tensor: &FiberTensor) -> Option<ProductTable> {
    let kz = kx + ky;
    if kz > n {
        return None;
    }
    let basis = Basis::get(n);
    let (mx, my, mz) = tensor.shape();
    let mut entries = Vec::new();
    for (ix, &a) in basis.masks(kx).iter().enumerate() {
        for (iy, &b) in basis.masks(ky).iter().enumerate() {
            if a & b != 0 {
                continue;
            }
            let sign = shuffle_sign(a, b);
            let iz = basis.position(a | b);
            for &(u, v, w, c) in tensor.entries() {
                entries.push(Entry {
                    x: (ix * mx + u) as u32,
                    y: (iy * my + v) as u32,
                    z: (iz * mz + w) as u32,
                    c: sign * c,
                });
            }
        }
    }
    entries.sort_by_key(|e| (e.z, e.x, e.y));
    Some(ProductTable {
        x_width: binomial(n, kx) * mx,
        y_width: binomial(n, ky) * my,
        z_width: binomial(n, kz) * mz,
        out_degree: kz,
        entries,
    })
}

/// Right insertion action of the grade-`j` part of a degree-`i` polyvector
/// form on a degree-`s` tangent-valued form. Component `L` of the result is
/// `Σ_{A⊔K=L} sign(A,K) Σ_B γ_K^B ρ(e_A, e_B) / j!`, with `|A| = s − j` and
/// `ρ(e_A, e_B) = sign(A,B) ρ_{A∪B}`.
pub(crate) fn insertion(n: usize, s: usize, i: usize, j: usize) -> Option<ProductTable> {
    if s < j || j > n {
        return None;
    }
    let kz = s - j + i;
    if kz > n || i > n {
        return None;
    }
    let basis = Basis::get(n);
    let pv_rank = 1usize << n;
    let grade_offset: usize = (0..j).map(|g| binomial(n, g)).sum();
    let norm = 1.0 / (1..=j).map(|v| v as f64).product::<f64>();
    let mut entries = Vec::new();
    for &a in basis.masks(s - j) {
        for (iy, &k) in basis.masks(i).iter().enumerate() {
            if a & k != 0 {
                continue;
            }
            let outer = shuffle_sign(a, k);
            let iz = basis.position(a | k);
            for &b in basis.masks(j) {
                if a & b != 0 {
                    continue;
                }
                let ix = basis.position(a | b);
                let c = outer * shuffle_sign(a, b) * norm;
                let yc = iy * pv_rank + grade_offset + basis.position(b);
                for f in 0..n {
                    entries.push(Entry {
                        x: (ix * n + f) as u32,
                        y: yc as u32,
                        z: (iz * n + f) as u32,
                        c,
                    });
                }
            }
        }
    }
    entries.sort_by_key(|e| (e.z, e.x, e.y));
    Some(ProductTable {
        x_width: binomial(n, s) * n,
        y_width: binomial(n, i) * pv_rank,
        z_width: binomial(n, kz) * n,
        out_degree: kz,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposes_match_forward() {
        // <z̄, x·y> = <x, T_x(y, z̄)> = <y, T_y(x, z̄)> on two points
        let vals: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).cos()).collect();
        let t = FiberTensor::dense(2, 2, 2, &vals).unwrap();
        let table = shuffle(3, 1, 1, &t).unwrap();
        let pts = 2;
        let gen = |w: usize, s: f64| (0..w * pts).map(|i| (i as f64 * s).sin()).collect::<Vec<_>>();
        let x = gen(table.x_width, 0.3);
        let y = gen(table.y_width, 0.5);
        let zbar = gen(table.z_width, 0.9);
        let mut z = vec![0.0; table.z_width * pts];
        table.forward(&x, &y, &mut z);
        let lhs: f64 = z.iter().zip(&zbar).map(|(a, b)| a * b).sum();
        let mut xbar = vec![0.0; x.len()];
        table.transpose_x(&y, &zbar, &mut xbar);
        let mut ybar = vec![0.0; y.len()];
        table.transpose_y(&x, &zbar, &mut ybar);
        let rx: f64 = xbar.iter().zip(&x).map(|(a, b)| a * b).sum();
        let ry: f64 = ybar.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((lhs - rx).abs() < 1e-13);
        assert!((lhs - ry).abs() < 1e-13);
    }

    #[test]
    fn overflow_is_none() {
        let t = FiberTensor::scalar_left(1);
        assert!(shuffle(2, 2, 1, &t).is_none());
        assert!(insertion(4, 1, 2, 2).is_none());
        assert!(insertion(2, 2, 2, 2).is_some());
    }
}
