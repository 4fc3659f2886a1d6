use super::{gemm, Init, Mat, ParamLayout, ParamRef, Real};

/// Spatial extent of one activation map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hw {
    pub h: usize,
    pub w: usize,
}

impl Hw {
    pub fn area(&self) -> usize {
        self.h * self.w
    }

    pub fn half(&self) -> Hw {
        Hw { h: self.h / 2, w: self.w / 2 }
    }

    pub fn double(&self) -> Hw {
        Hw { h: self.h * 2, w: self.w * 2 }
    }
}

/// Square convolution, stride 1, zero "same" padding.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub weight: ParamRef,
    pub bias: ParamRef,
}

impl Conv2d {
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "odd kernels only");
        let fan_in = cin * k * k;
        let weight = layout.add(format!("{name}.weight"), &[cout, cin, k, k], Init::FanIn(fan_in));
        let bias = layout.add(format!("{name}.bias"), &[cout], Init::FanIn(fan_in));
        Self { cin, cout, k, weight, bias }
    }

    fn im2col<R: Real>(&self, x: &[R], hw: Hw) -> Vec<R> {
        let (k, p) = (self.k, (self.k / 2) as isize);
        let n = hw.area();
        let mut col = vec![R::zero(); self.cin * k * k * n];
        for ci in 0..self.cin {
            let plane = &x[ci * n..(ci + 1) * n];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * n..][..n];
                    let dy = ky as isize - p;
                    let dx = kx as isize - p;
                    for y in 0..hw.h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= hw.h as isize {
                            continue;
                        }
                        let src = &plane[sy as usize * hw.w..(sy as usize + 1) * hw.w];
                        let dst = &mut row[y * hw.w..(y + 1) * hw.w];
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (hw.w as isize - dx.max(0)) as usize;
                        for xx in x0..x1 {
                            dst[xx] = src[(xx as isize + dx) as usize];
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<R: Real>(&self, col: &[R], hw: Hw) -> Vec<R> {
        let (k, p) = (self.k, (self.k / 2) as isize);
        let n = hw.area();
        let mut x = vec![R::zero(); self.cin * n];
        for ci in 0..self.cin {
            let plane = &mut x[ci * n..(ci + 1) * n];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((ci * k + ky) * k + kx) * n..][..n];
                    let dy = ky as isize - p;
                    let dx = kx as isize - p;
                    for y in 0..hw.h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= hw.h as isize {
                            continue;
                        }
                        let src = &row[y * hw.w..(y + 1) * hw.w];
                        let dst = &mut plane[sy as usize * hw.w..(sy as usize + 1) * hw.w];
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (hw.w as isize - dx.max(0)) as usize;
                        for xx in x0..x1 {
                            dst[(xx as isize + dx) as usize] += src[xx];
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward<R: Real>(&self, p: &[R], x: &[R], hw: Hw) -> Vec<R> {
        debug_assert_eq!(x.len(), self.cin * hw.area());
        let n = hw.area();
        let mut out = vec![R::zero(); self.cout * n];
        for (co, b) in self.bias.of(p).iter().enumerate() {
            out[co * n..(co + 1) * n].iter_mut().for_each(|v| *v = *b);
        }
        let kk = self.cin * self.k * self.k;
        let w = Mat::new(self.weight.of(p), self.cout, kk);
        if self.k == 1 {
            gemm(w, Mat::new(x, self.cin, n), R::one(), &mut out);
        } else {
            let col = self.im2col(x, hw);
            gemm(w, Mat::new(&col, kk, n), R::one(), &mut out);
        }
        out
    }

    /// Accumulates parameter gradients into `grads`; returns `∂L/∂x` when asked.
    pub fn backward<R: Real>(&self, p: &[R], x: &[R], hw: Hw, dout: &[R], grads: &mut [R], need_dx: bool) -> Option<Vec<R>> {
        let n = hw.area();
        let kk = self.cin * self.k * self.k;
        for (co, g) in self.bias.of_mut(grads).iter_mut().enumerate() {
            let mut s = R::zero();
            for v in &dout[co * n..(co + 1) * n] {
                s += *v;
            }
            *g += s;
        }
        let col_owned;
        let col: &[R] = if self.k == 1 {
            x
        } else {
            col_owned = self.im2col(x, hw);
            &col_owned
        };
        gemm(Mat::new(dout, self.cout, n), Mat::new(col, kk, n).t(), R::one(), self.weight.of_mut(grads));
        if !need_dx {
            return None;
        }
        let mut dcol = vec![R::zero(); kk * n];
        gemm(Mat::new(self.weight.of(p), self.cout, kk).t(), Mat::new(dout, self.cout, n), R::zero(), &mut dcol);
        Some(if self.k == 1 { dcol } else { self.col2im(&dcol, hw) })
    }
}

/// Dense layer `y = W·x + b`, `W` row-major `dout × din`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub din: usize,
    pub dout: usize,
    pub weight: ParamRef,
    pub bias: ParamRef,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, name: &str, din: usize, dout: usize) -> Self {
        let weight = layout.add(format!("{name}.weight"), &[dout, din], Init::FanIn(din));
        let bias = layout.add(format!("{name}.bias"), &[dout], Init::FanIn(din));
        Self { din, dout, weight, bias }
    }

    pub fn forward<R: Real>(&self, p: &[R], x: &[R]) -> Vec<R> {
        let mut out = self.bias.of(p).to_vec();
        gemm(Mat::new(self.weight.of(p), self.dout, self.din), Mat::new(x, self.din, 1), R::one(), &mut out);
        out
    }

    pub fn backward<R: Real>(&self, p: &[R], x: &[R], dy: &[R], grads: &mut [R]) -> Vec<R> {
        for (g, d) in self.bias.of_mut(grads).iter_mut().zip(dy) {
            *g += *d;
        }
        gemm(Mat::new(dy, self.dout, 1), Mat::new(x, 1, self.din), R::one(), self.weight.of_mut(grads));
        let mut dx = vec![R::zero(); self.din];
        gemm(Mat::new(self.weight.of(p), self.dout, self.din).t(), Mat::new(dy, self.dout, 1), R::zero(), &mut dx);
        dx
    }
}

pub fn sigmoid<R: Real>(v: R) -> R {
    R::one() / (R::one() + (-v).exp())
}

pub fn silu<R: Real>(x: &[R]) -> Vec<R> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// `dy · d silu(x)/dx`.
pub fn silu_backward<R: Real>(x: &[R], dy: &[R]) -> Vec<R> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (R::one() + v * (R::one() - s))
        })
        .collect()
}

pub fn add<R: Real>(a: &[R], b: &[R]) -> Vec<R> {
    a.iter().zip(b).map(|(x, y)| *x + *y).collect()
}

pub fn add_assign<R: Real>(a: &mut [R], b: &[R]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
}

/// Adds `bias[c]` to every pixel of channel `c`.
pub fn add_channel_bias<R: Real>(x: &[R], bias: &[R], hw: Hw) -> Vec<R> {
    let n = hw.area();
    x.chunks_exact(n).zip(bias).flat_map(|(plane, b)| plane.iter().map(move |v| *v + *b)).collect()
}

/// Gradient of [`add_channel_bias`] with respect to the bias.
pub fn channel_sums<R: Real>(dy: &[R], hw: Hw) -> Vec<R> {
    dy.chunks_exact(hw.area())
        .map(|plane| plane.iter().fold(R::zero(), |a, b| a + *b))
        .collect()
}

pub fn avgpool2<R: Real>(x: &[R], c: usize, hw: Hw) -> Vec<R> {
    let o = hw.half();
    let quarter = R::lit(0.25);
    let mut out = Vec::with_capacity(c * o.area());
    for ch in 0..c {
        let plane = &x[ch * hw.area()..];
        for y in 0..o.h {
            for xx in 0..o.w {
                let i = 2 * y * hw.w + 2 * xx;
                out.push((plane[i] + plane[i + 1] + plane[i + hw.w] + plane[i + hw.w + 1]) * quarter);
            }
        }
    }
    out
}

/// `hw` is the input (unpooled) extent.
pub fn avgpool2_backward<R: Real>(dy: &[R], c: usize, hw: Hw) -> Vec<R> {
    let o = hw.half();
    let quarter = R::lit(0.25);
    let mut dx = vec![R::zero(); c * hw.area()];
    for ch in 0..c {
        for y in 0..hw.h {
            for xx in 0..hw.w {
                dx[ch * hw.area() + y * hw.w + xx] = dy[ch * o.area() + (y / 2) * o.w + xx / 2] * quarter;
            }
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsampling; `hw` is the input extent.
pub fn upsample2<R: Real>(x: &[R], c: usize, hw: Hw) -> Vec<R> {
    let o = hw.double();
    let mut out = Vec::with_capacity(c * o.area());
    for ch in 0..c {
        for y in 0..o.h {
            for xx in 0..o.w {
                out.push(x[ch * hw.area() + (y / 2) * hw.w + xx / 2]);
            }
        }
    }
    out
}

pub fn upsample2_backward<R: Real>(dy: &[R], c: usize, hw: Hw) -> Vec<R> {
    let o = hw.double();
    let mut dx = vec![R::zero(); c * hw.area()];
    for ch in 0..c {
        for y in 0..o.h {
            for xx in 0..o.w {
                dx[ch * hw.area() + (y / 2) * hw.w + xx / 2] += dy[ch * o.area() + y * o.w + xx];
            }
        }
    }
    dx
}

/// Interpolation matrix (`n_out × n_in`, row-major) of half-pixel-centred
/// linear resampling with edge clamping.
pub fn linear_resample_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let f = src - i0 as f64;
        m[o * n_in + i0] += 1.0 - f;
        m[o * n_in + i1] += f;
    }
    m
}

/// Separable linear resampling of a `c × h × w` stack to `c × oh × ow`.
#[derive(Debug, Clone)]
pub struct Resample<R> {
    pub from: Hw,
    pub to: Hw,
    rows: Vec<R>,
    cols: Vec<R>,
}

impl<R: Real> Resample<R> {
    pub fn new(from: Hw, to: Hw) -> Self {
        Self {
            from,
            to,
            rows: super::from_f64(&linear_resample_matrix(from.h, to.h)),
            cols: super::from_f64(&linear_resample_matrix(from.w, to.w)),
        }
    }

    /// `Y = R_h · X · R_wᵀ` per channel.
    pub fn forward(&self, x: &[R], c: usize) -> Vec<R> {
        let (f, t) = (self.from, self.to);
        let mut out = vec![R::zero(); c * t.area()];
        let mut tmp = vec![R::zero(); f.h * t.w];
        for ch in 0..c {
            gemm(Mat::new(&x[ch * f.area()..], f.h, f.w), Mat::new(&self.cols, t.w, f.w).t(), R::zero(), &mut tmp);
            gemm(Mat::new(&self.rows, t.h, f.h), Mat::new(&tmp, f.h, t.w), R::zero(), &mut out[ch * t.area()..]);
        }
        out
    }

    /// `dX = R_hᵀ · dY · R_w` per channel.
    pub fn backward(&self, dy: &[R], c: usize) -> Vec<R> {
        let (f, t) = (self.from, self.to);
        let mut dx = vec![R::zero(); c * f.area()];
        let mut tmp = vec![R::zero(); t.h * f.w];
        for ch in 0..c {
            gemm(Mat::new(&dy[ch * t.area()..], t.h, t.w), Mat::new(&self.cols, t.w, f.w), R::zero(), &mut tmp);
            gemm(Mat::new(&self.rows, t.h, f.h).t(), Mat::new(&tmp, t.h, f.w), R::zero(), &mut dx[ch * f.area()..]);
        }
        dx
    }
}

/// Sinusoidal embedding of an integer step: `[sin(t·f_i), cos(t·f_i)]` with
/// `f_i = 10000^(−i/half)`.
pub fn sinusoidal_embedding<R: Real>(t: usize, dim: usize) -> Vec<R> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
    let mut out: Vec<R> = freqs.iter().map(|f| R::lit((t as f64 * f).sin())).collect();
    out.extend(freqs.iter().map(|f| R::lit((t as f64 * f).cos())));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng_from(seed);
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    /// Checks `backward` against central differences of `L = ⟨dout, f(x)⟩`.
    fn check_input_grad(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], dout: &[f64], dx: &[f64]) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let lp: f64 = f(&xp).iter().zip(dout).map(|(a, b)| a * b).sum();
            let lm: f64 = f(&xm).iter().zip(dout).map(|(a, b)| a * b).sum();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6 * (1.0 + fd.abs()), "coord {i}: fd {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut layout = ParamLayout::default();
        let conv = Conv2d::new(&mut layout, "c", 2, 3, 3);
        let p: Vec<f64> = layout.init(&mut rng_from(1));
        let hw = Hw { h: 5, w: 4 };
        let x = rand_vec(2 * 20, 2);
        let y = conv.forward(&p, &x, hw);
        let w = conv.weight.of(&p);
        for co in 0..3 {
            for yy in 0..5isize {
                for xx in 0..4isize {
                    let mut s = conv.bias.of(&p)[co];
                    for ci in 0..2 {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                if (0..5).contains(&sy) && (0..4).contains(&sx) {
                                    s += w[((co * 2 + ci) * 3 + ky as usize) * 3 + kx as usize]
                                        * x[ci * 20 + (sy * 4 + sx) as usize];
                                }
                            }
                        }
                    }
                    assert!((s - y[co * 20 + (yy * 4 + xx) as usize]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for k in [1, 3] {
            let mut layout = ParamLayout::default();
            let conv = Conv2d::new(&mut layout, "c", 2, 3, k);
            let p: Vec<f64> = layout.init(&mut rng_from(3));
            let hw = Hw { h: 4, w: 6 };
            let x = rand_vec(2 * 24, 4);
            let dout = rand_vec(3 * 24, 5);
            let mut grads = vec![0.0; layout.total()];
            let dx = conv.backward(&p, &x, hw, &dout, &mut grads, true).unwrap();
            check_input_grad(&|xx| conv.forward(&p, xx, hw), &x, &dout, &dx);
            check_input_grad(&|pp| conv.forward(pp, &x, hw), &p, &dout, &grads);
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut layout = ParamLayout::default();
        let lin = Linear::new(&mut layout, "l", 5, 3);
        let p: Vec<f64> = layout.init(&mut rng_from(6));
        let x = rand_vec(5, 7);
        let dy = rand_vec(3, 8);
        let mut grads = vec![0.0; layout.total()];
        let dx = lin.backward(&p, &x, &dy, &mut grads);
        check_input_grad(&|xx| lin.forward(&p, xx), &x, &dy, &dx);
        check_input_grad(&|pp| lin.forward(pp, &x), &p, &dy, &grads);
    }

    #[test]
    fn elementwise_and_resampling_adjoints() {
        let hw = Hw { h: 4, w: 6 };
        let x = rand_vec(2 * 24, 9);
        let d = rand_vec(2 * 24, 10);
        check_input_grad(&|v| silu(v), &x, &d, &silu_backward(&x, &d));
        let dp = rand_vec(2 * 6, 11);
        check_input_grad(&|v| avgpool2(v, 2, hw), &x, &dp, &avgpool2_backward(&dp, 2, hw));
        let small = rand_vec(2 * 6, 12);
        check_input_grad(&|v| upsample2(v, 2, hw.half()), &small, &d, &upsample2_backward(&d, 2, hw.half()));
        let rs = Resample::<f64>::new(Hw { h: 2, w: 3 }, Hw { h: 8, w: 12 });
        let up = rand_vec(2 * 96, 13);
        check_input_grad(&|v| rs.forward(v, 2), &small, &up, &rs.backward(&up, 2));
    }

    #[test]
    fn resample_matrix_rows_sum_to_one_and_match_half_pixel_rule() {
        let m = linear_resample_matrix(8, 32);
        for o in 0..32 {
            let s: f64 = m[o * 8..(o + 1) * 8].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // output 2 sits at source 0.125: weights 0.875 / 0.125
        assert!((m[2 * 8] - 0.875).abs() < 1e-12 && (m[2 * 8 + 1] - 0.125).abs() < 1e-12);
        // first outputs clamp to the edge sample
        assert_eq!(m[0], 1.0);
    }

    #[test]
    fn embedding_layout() {
        let e: Vec<f64> = sinusoidal_embedding(3, 8);
        assert_eq!(e.len(), 8);
        assert!((e[0] - 3f64.sin()).abs() < 1e-12);
        assert!((e[4] - 3f64.cos()).abs() < 1e-12);
        assert!((e[1] - (3.0 * 10f64.powf(-1.0)).sin()).abs() < 1e-12);
    }
}
