use super::Real;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<R> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<R>,
    v: Vec<R>,
    t: u32,
}

impl<R: Real> Adam<R> {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![R::zero(); n], v: vec![R::zero(); n], t: 0 }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [R], grads: &[R]) {
        self.t += 1;
        let (b1, b2) = (R::lit(self.beta1), R::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = R::lit(self.lr / c1);
        let inv_c2 = R::lit(1.0 / c2);
        let eps = R::lit(self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (R::one() - b1) * *g;
            *v = b2 * *v + (R::one() - b2) * *g * *g;
            *p -= step * *m / ((*v * inv_c2).sqrt() + eps);
        }
    }
}

/// Exponential moving average of a parameter vector.
#[derive(Debug, Clone)]
pub struct Ema<R> {
    pub decay: f64,
    pub shadow: Vec<R>,
}

impl<R: Real> Ema<R> {
    pub fn new(params: &[R], decay: f64) -> Self {
        Self { decay, shadow: params.to_vec() }
    }

    pub fn update(&mut self, params: &[R]) {
        let d = R::lit(self.decay);
        for (s, p) in self.shadow.iter_mut().zip(params) {
            *s = d * *s + (R::one() - d) * *p;
        }
    }
}
