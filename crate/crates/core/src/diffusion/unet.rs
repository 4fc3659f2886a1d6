//! Two-resolution U-shaped noise predictor with sinusoidal timestep
//! conditioning, forward and backward written out by hand.

use crate::nn::{
    add, add_channel_bias, avgpool2, avgpool2_backward, channel_sums, silu, silu_backward, sinusoidal_embedding,
    upsample2, upsample2_backward, Conv2d, Hw, Linear, ParamLayout, Real,
};

#[derive(Debug, Clone)]
pub struct UNet {
    pub width: usize,
    pub image_channels: usize,
    pub size: Hw,
    pub layout: ParamLayout,
    t1: Linear,
    t2: Linear,
    inc: Conv2d,
    a1: Conv2d,
    a2: Conv2d,
    d1: Conv2d,
    b1: Conv2d,
    b2: Conv2d,
    u1: Conv2d,
    u2: Conv2d,
    outc: Conv2d,
}

/// Saved activations of one forward pass.
pub struct Tape<R> {
    emb: Vec<R>,
    te1: Vec<R>,
    x: Vec<R>,
    h0: Vec<R>,
    s0e: Vec<R>,
    a1o: Vec<R>,
    h: Vec<R>,
    d: Vec<R>,
    sd: Vec<R>,
    g0pre: Vec<R>,
    g0: Vec<R>,
    b1o: Vec<R>,
    sb1: Vec<R>,
    ucat: Vec<R>,
    u1o: Vec<R>,
    u0: Vec<R>,
    su0: Vec<R>,
    uu: Vec<R>,
    so: Vec<R>,
}

impl UNet {
    pub fn new(width: usize, image_channels: usize, size: Hw) -> Self {
        let c = width;
        let mut l = ParamLayout::default();
        let t1 = Linear::new(&mut l, "temb.1", c, 2 * c);
        let t2 = Linear::new(&mut l, "temb.2", 2 * c, 3 * c);
        let inc = Conv2d::new(&mut l, "in", image_channels, c, 3);
        let a1 = Conv2d::new(&mut l, "hi.1", c, c, 3);
        let a2 = Conv2d::new(&mut l, "hi.2", c, c, 3);
        let d1 = Conv2d::new(&mut l, "lo.down", c, 2 * c, 3);
        let b1 = Conv2d::new(&mut l, "lo.1", 2 * c, 2 * c, 3);
        let b2 = Conv2d::new(&mut l, "lo.2", 2 * c, 2 * c, 3);
        let u1 = Conv2d::new(&mut l, "up.1", 3 * c, c, 3);
        let u2 = Conv2d::new(&mut l, "up.2", c, c, 3);
        let outc = Conv2d::new(&mut l, "out", c, image_channels, 3);
        Self { width, image_channels, size, layout: l, t1, t2, inc, a1, a2, d1, b1, b2, u1, u2, outc }
    }

    /// Predicted noise for `x` (channel-major) at zero-based step index `t`.
    pub fn forward<R: Real>(&self, p: &[R], x: &[R], t: usize) -> (Vec<R>, Tape<R>) {
        let (c, s) = (self.width, self.size);
        let hs = s.half();
        let emb = sinusoidal_embedding::<R>(t, c);
        let te1 = self.t1.forward(p, &emb);
        let e = self.t2.forward(p, &silu(&te1));
        let (e1, e2) = e.split_at(c);

        let h0 = self.inc.forward(p, x, s);
        let s0e = add_channel_bias(&silu(&h0), e1, s);
        let a1o = self.a1.forward(p, &s0e, s);
        let h = silu(&a1o);
        let h1 = add(&h0, &self.a2.forward(p, &h, s));

        let d = avgpool2(&h1, c, s);
        let sd = silu(&d);
        let g0pre = add_channel_bias(&self.d1.forward(p, &sd, hs), e2, hs);
        let g0 = silu(&g0pre);
        let b1o = self.b1.forward(p, &g0, hs);
        let sb1 = silu(&b1o);
        let g1 = add(&g0, &self.b2.forward(p, &sb1, hs));

        let mut ucat = upsample2(&g1, 2 * c, hs);
        ucat.extend_from_slice(&h1);
        let u1o = self.u1.forward(p, &ucat, s);
        let u0 = silu(&u1o);
        let su0 = silu(&u0);
        let uu = add(&u0, &self.u2.forward(p, &su0, s));
        let so = silu(&uu);
        let out = self.outc.forward(p, &so, s);
        let tape = Tape {
            emb,
            te1,
            x: x.to_vec(),
            h0,
            s0e,
            a1o,
            h,
            d,
            sd,
            g0pre,
            g0,
            b1o,
            sb1,
            ucat,
            u1o,
            u0,
            su0,
            uu,
            so,
        };
        (out, tape)
    }

    /// Accumulates `∂L/∂params` into `grads` given `∂L/∂output`.
    pub fn backward<R: Real>(&self, p: &[R], tape: &Tape<R>, dout: &[R], grads: &mut [R]) {
        let (c, s) = (self.width, self.size);
        let hs = s.half();
        let dx = |r: Option<Vec<R>>| r.expect("input gradient requested");

        let dso = dx(self.outc.backward(p, &tape.so, s, dout, grads, true));
        let duu = silu_backward(&tape.uu, &dso);
        // uu = u0 + u2(silu(u0))
        let dsu0 = dx(self.u2.backward(p, &tape.su0, s, &duu, grads, true));
        let mut du0 = duu;
        crate::nn::add_assign(&mut du0, &silu_backward(&tape.u0, &dsu0));
        let du1o = silu_backward(&tape.u1o, &du0);
        let ducat = dx(self.u1.backward(p, &tape.ucat, s, &du1o, grads, true));
        let (dup, dh1_skip) = ducat.split_at(2 * c * s.area());

        // g1 = g0 + b2(silu(b1(g0)))
        let dg1 = upsample2_backward(dup, 2 * c, hs);
        let dsb1 = dx(self.b2.backward(p, &tape.sb1, hs, &dg1, grads, true));
        let db1o = silu_backward(&tape.b1o, &dsb1);
        let mut dg0 = dx(self.b1.backward(p, &tape.g0, hs, &db1o, grads, true));
        crate::nn::add_assign(&mut dg0, &dg1);
        let dg0pre = silu_backward(&tape.g0pre, &dg0);
        let de2 = channel_sums(&dg0pre, hs);
        let dsd = dx(self.d1.backward(p, &tape.sd, hs, &dg0pre, grads, true));
        let dd = silu_backward(&tape.d, &dsd);

        // h1 = h0 + a2(silu(a1(silu(h0) + e1)))
        let mut dh1 = avgpool2_backward(&dd, c, s);
        crate::nn::add_assign(&mut dh1, dh1_skip);
        let dh = dx(self.a2.backward(p, &tape.h, s, &dh1, grads, true));
        let da1o = silu_backward(&tape.a1o, &dh);
        let ds0e = dx(self.a1.backward(p, &tape.s0e, s, &da1o, grads, true));
        let de1 = channel_sums(&ds0e, s);
        let mut dh0 = dh1;
        crate::nn::add_assign(&mut dh0, &silu_backward(&tape.h0, &ds0e));
        self.inc.backward(p, &tape.x, s, &dh0, grads, false);

        let mut de = de1;
        de.extend(de2);
        let dste1 = self.t2.backward(p, &silu(&tape.te1), &de, grads);
        let dte1 = silu_backward(&tape.te1, &dste1);
        self.t1.backward(p, &tape.emb, &dte1, grads);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    #[test]
    fn backward_matches_finite_differences() {
        let net = UNet::new(4, 1, Hw { h: 8, w: 8 });
        let params: Vec<f64> = net.layout.init(&mut rng_from(1));
        let mut rng = rng_from(2);
        let x: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = 37;
        let loss = |p: &[f64]| -> f64 { net.forward(p, &x, t).0.iter().zip(&w).map(|(a, b)| a * b).sum() };
        let (_, tape) = net.forward(&params, &x, t);
        let mut grads = vec![0.0; params.len()];
        net.backward(&params, &tape, &w, &mut grads);
        // every tensor gets probed, including the timestep MLP
        for e in net.layout.entries() {
            for _ in 0..3 {
                let k = e.slot.offset + rng.gen_range(0..e.slot.len);
                let mut q = params.clone();
                let h = 1e-6;
                q[k] += h;
                let lp = loss(&q);
                q[k] -= 2.0 * h;
                let lm = loss(&q);
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - grads[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "{} [{k}]: {fd} vs {}", e.name, grads[k]);
            }
        }
    }

    #[test]
    fn timestep_changes_prediction() {
        let net = UNet::new(4, 1, Hw { h: 8, w: 8 });
        let params: Vec<f64> = net.layout.init(&mut rng_from(3));
        let x = vec![0.1; 64];
        assert_ne!(net.forward(&params, &x, 0).0, net.forward(&params, &x, 500).0);
    }
}
