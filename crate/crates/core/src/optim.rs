use alloc::vec::Vec;

use crate::param::ParamStore;

/// Momentum SGD with L2 weight decay folded into the gradient:
/// `buf = momentum * buf + (grad + wd * param)`, `param -= lr * buf`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    /// Applies one update to every trainable parameter using its accumulated `grad`.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.buffers.len() < store.len() {
            for (_, p) in store.iter().skip(self.buffers.len()) {
                self.buffers.push(alloc::vec![0.0; p.value.numel()]);
            }
        }
        for (p, buf) in store.iter_mut().zip(&mut self.buffers) {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..buf.len() {
                buf[i] = self.momentum * buf[i] + grad[i] + self.weight_decay * value[i];
                value[i] -= self.lr * buf[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{InitSpec, ParamKind, ParamRegistry};
    use crate::tensor::Shape;

    fn single(value: f64) -> (ParamStore, crate::param::ParamId) {
        let mut s = ParamStore::new(0);
        let id = s
            .register(
                "p".into(),
                Shape::new([1]),
                ParamKind::Weight,
                InitSpec::Constant { value },
            )
            .unwrap();
        (s, id)
    }

    #[test]
    fn zero_lr_is_identity() {
        let (mut s, id) = single(1.25);
        s.get_mut(id).grad.data_mut()[0] = 100.0;
        Sgd::new(0.0, 0.9, 1e-4).step(&mut s);
        assert_eq!(s.value(id).data()[0], 1.25);
    }

    #[test]
    fn plain_step() {
        let (mut s, id) = single(1.0);
        s.get_mut(id).grad.data_mut()[0] = 2.0;
        Sgd::new(0.1, 0.0, 0.0).step(&mut s);
        assert!((s.value(id).data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let (mut s, id) = single(0.0);
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        let mut seen = alloc::vec::Vec::new();
        for _ in 0..2 {
            s.get_mut(id).grad.data_mut()[0] = 1.0;
            opt.step(&mut s);
            seen.push(s.value(id).data()[0]);
        }
        assert!((seen[0] + 0.1).abs() < 1e-15);
        assert!((seen[1] + 0.29).abs() < 1e-15);
    }
}
