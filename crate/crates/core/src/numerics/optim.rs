use crate::numerics::{ParamStore, Scalar, Tensor};

/// Applies one update from the accumulated gradients of trainable parameters.
/// Gradients are left untouched; callers zero them.
pub trait Optimizer<T: Scalar> {
    fn step(&mut self, store: &mut ParamStore<T>);
}

fn ensure_slots<T: Scalar>(slots: &mut Vec<Tensor<T>>, store: &ParamStore<T>) {
    if slots.len() != store.len() {
        *slots = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, store: &mut ParamStore<T>) {
        ensure_slots(&mut self.m, store);
        ensure_slots(&mut self.v, store);
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// RMSProp without momentum, the usual choice for weight-clipped critics.
#[derive(Clone, Debug)]
pub struct RmsProp<T> {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    sq: Vec<Tensor<T>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(lr: f64) -> Self {
        RmsProp { lr, alpha: 0.99, eps: 1e-8, sq: Vec::new() }
    }
}

impl<T: Scalar> Optimizer<T> for RmsProp<T> {
    fn step(&mut self, store: &mut ParamStore<T>) {
        ensure_slots(&mut self.sq, store);
        let (a, lr, eps) = (T::lit(self.alpha), T::lit(self.lr), T::lit(self.eps));
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            for ((w, &g), s) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(self.sq[i].data_mut()) {
                *s = a * *s + (T::one() - a) * g * g;
                *w -= lr * g / (s.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    pub lr: f64,
    pub momentum: f64,
    vel: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum { lr, momentum, vel: Vec::new() }
    }
}

impl<T: Scalar> Optimizer<T> for SgdMomentum<T> {
    fn step(&mut self, store: &mut ParamStore<T>) {
        ensure_slots(&mut self.vel, store);
        let (mu, lr) = (T::lit(self.momentum), T::lit(self.lr));
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            for ((w, &g), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(self.vel[i].data_mut()) {
                *v = mu * *v + g;
                *w -= lr * *v;
            }
        }
    }
}
