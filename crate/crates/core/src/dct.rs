//! Orthonormal type-II DCT in one and two dimensions, evaluated as dense
//! matrix products. Sizes here are small (≤ 64), where the O(n³) product is
//! cheaper than setting up a fast transform.

use std::f64::consts::PI;

/// `n × n` orthonormal DCT-II matrix, row `k` holding basis vector `k`.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    let c0 = (1.0 / n as f64).sqrt();
    let ck = (2.0 / n as f64).sqrt();
    for k in 0..n {
        let scale = if k == 0 { c0 } else { ck };
        for i in 0..n {
            m[k * n + i] = scale * (PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    m
}

/// Separable 2-D DCT over an `h × w` plane.
#[derive(Debug, Clone)]
pub struct Dct2 {
    h: usize,
    w: usize,
    dh: Vec<f64>,
    dw: Vec<f64>,
}

impl Dct2 {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w, dh: dct_matrix(h), dw: dct_matrix(w) }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// `C = D_h · X · D_wᵀ`, coefficient `(u, v)` at `u * w + v`.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.h * self.w);
        let (h, w) = (self.h, self.w);
        // rows: T = X · D_wᵀ
        let mut t = vec![0.0; h * w];
        for r in 0..h {
            let row = &x[r * w..(r + 1) * w];
            for v in 0..w {
                let basis = &self.dw[v * w..(v + 1) * w];
                t[r * w + v] = row.iter().zip(basis).map(|(a, b)| a * b).sum();
            }
        }
        // columns: C = D_h · T
        let mut c = vec![0.0; h * w];
        for u in 0..h {
            let basis = &self.dh[u * h..(u + 1) * h];
            for (r, b) in basis.iter().enumerate() {
                let trow = &t[r * w..(r + 1) * w];
                let crow = &mut c[u * w..(u + 1) * w];
                for (cv, tv) in crow.iter_mut().zip(trow) {
                    *cv += b * tv;
                }
            }
        }
        c
    }

    /// `X = D_hᵀ · C · D_w`.
    pub fn inverse(&self, c: &[f64]) -> Vec<f64> {
        debug_assert_eq!(c.len(), self.h * self.w);
        let (h, w) = (self.h, self.w);
        let mut t = vec![0.0; h * w];
        for u in 0..h {
            let crow = &c[u * w..(u + 1) * w];
            for (r, trow) in t.chunks_exact_mut(w).enumerate() {
                let b = self.dh[u * h + r];
                if b == 0.0 {
                    continue;
                }
                for (tv, cv) in trow.iter_mut().zip(crow) {
                    *tv += b * cv;
                }
            }
        }
        let mut x = vec![0.0; h * w];
        for r in 0..h {
            let trow = &t[r * w..(r + 1) * w];
            for (v, tv) in trow.iter().enumerate() {
                let basis = &self.dw[v * w..(v + 1) * w];
                let xrow = &mut x[r * w..(r + 1) * w];
                for (xv, b) in xrow.iter_mut().zip(basis) {
                    *xv += tv * b;
                }
            }
        }
        x
    }

    /// Spatial basis image for coefficient `(u, v)`.
    pub fn basis(&self, u: usize, v: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.h * self.w];
        for r in 0..self.h {
            for c in 0..self.w {
                out[r * self.w + c] = self.dh[u * self.h + r] * self.dw[v * self.w + c];
            }
        }
        out
    }
}
