#![allow(dead_code)]

use oodsynth_core::numcore::{Activation, DenseMatrix, Mlp, Rng};

pub const FD_STEP: f64 = 1e-5;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| scale * rng.normal())
}

/// Random net with nonzero biases so relu kinks are not aligned with the
/// origin.
pub fn random_mlp(rng: &mut Rng, dims: &[usize], hidden: Activation) -> Mlp {
    let mut net = Mlp::init(dims, hidden, rng).unwrap();
    for layer in net.layers_mut() {
        for b in layer.bias.iter_mut() {
            *b = 0.3 * rng.normal();
        }
    }
    net
}

/// Pre-activations of every hidden layer, recomputed from the weights.
pub fn preactivations(net: &Mlp, x: &[f64]) -> Vec<Vec<f64>> {
    let mut h = x.to_vec();
    let mut out = Vec::new();
    for layer in net.layers() {
        let z: Vec<f64> = (0..layer.out_dim())
            .map(|j| {
                layer.bias[j]
                    + (0..layer.in_dim())
                        .map(|i| h[i] * layer.weight.get(i, j))
                        .sum::<f64>()
            })
            .collect();
        h = z
            .iter()
            .map(|&v| match layer.activation {
                Activation::Relu => v.max(0.0),
                Activation::Tanh => v.tanh(),
                Activation::Identity => v,
            })
            .collect();
        out.push(z);
    }
    out.pop();
    out
}

/// True when no relu pre-activation changes sign between `a` and `b`.
pub fn same_relu_pattern(net: &Mlp, a: &[f64], b: &[f64]) -> bool {
    let (pa, pb) = (preactivations(net, a), preactivations(net, b));
    net.layers()
        .iter()
        .zip(pa.iter().zip(&pb))
        .filter(|(l, _)| l.activation == Activation::Relu)
        .all(|(_, (za, zb))| za.iter().zip(zb).all(|(u, v)| (*u > 0.0) == (*v > 0.0)))
}
