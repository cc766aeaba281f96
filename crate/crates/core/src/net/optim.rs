use ndarray::NdFloat;

use super::ops::cast;
use super::SegmentationNet;

/// Stochastic gradient descent with heavy-ball momentum:
/// `v <- momentum * v + g`, `p <- p - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<F> {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<F>>,
}

impl<F: NdFloat> Sgd<F> {
    pub fn new(net: &SegmentationNet<F>, learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: net.params().iter().map(|t| vec![F::zero(); t.len()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<F>] {
        &self.velocity
    }

    pub fn step(&mut self, net: &mut SegmentationNet<F>, grads: &[Vec<F>]) {
        let lr = cast::<F>(self.learning_rate);
        let mu = cast::<F>(self.momentum);
        for ((param, grad), vel) in net.params_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((p, &g), v) in param.data.iter_mut().zip(grad).zip(vel.iter_mut()) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetworkConfig;

    #[test]
    fn momentum_accumulates() {
        let cfg = NetworkConfig {
            width_factor: 16,
            input_dims: (16, 16),
            ..NetworkConfig::default()
        };
        let mut net = SegmentationNet::<f64>::init(&cfg).unwrap();
        let before = net.params()[0].data[0];
        let grads: Vec<Vec<f64>> = net.params().iter().map(|t| vec![1.0; t.len()]).collect();
        let mut opt = Sgd::new(&net, 0.1, 0.9);
        opt.step(&mut net, &grads);
        opt.step(&mut net, &grads);
        // 0.1 * 1 + 0.1 * 1.9
        assert!((before - net.params()[0].data[0] - 0.29).abs() < 1e-12);
    }
}
