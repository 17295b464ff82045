use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// `h^(l+1) = W^(l) h^(l)` for `l = 0..L`, square weights, no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepLinearNet {
    dim: usize,
    weights: Vec<Tensor>,
}

impl DeepLinearNet {
    pub fn new(weights: Vec<Tensor>) -> Result<Self> {
        let first = weights.first().ok_or_else(|| Error::invalid("deep linear net needs a layer"))?;
        let dim = first.shape().first().copied().unwrap_or(0);
        if dim == 0 {
            return Err(Error::invalid("deep linear net needs a positive width"));
        }
        for (l, w) in weights.iter().enumerate() {
            if w.shape() != [dim, dim] {
                return Err(Error::invalid(format!(
                    "layer {l} weight has shape {:?}, expected [{dim}, {dim}]",
                    w.shape()
                )));
            }
        }
        Ok(Self { dim, weights })
    }

    pub fn identity(layers: usize, dim: usize) -> Result<Self> {
        let mut eye = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            eye.data_mut()[i * dim + i] = 1.0;
        }
        Self::new(vec![eye; layers])
    }

    /// Entries drawn i.i.d. from `N(0, scale²)`.
    pub fn gaussian(layers: usize, dim: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).map_err(|e| Error::invalid(e.to_string()))?;
        let weights = (0..layers)
            .map(|_| Tensor::matrix(dim, dim, (0..dim * dim).map(|_| normal.sample(&mut rng)).collect()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(weights)
    }

    /// Rebuilds a net from `Θ`, the row-major concatenation of every weight.
    pub fn from_flat(layers: usize, dim: usize, theta: &[f64]) -> Result<Self> {
        if theta.len() != layers * dim * dim {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, expected {}",
                theta.len(),
                layers * dim * dim
            )));
        }
        let weights = theta
            .chunks_exact(dim * dim)
            .map(|c| Tensor::matrix(dim, dim, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(weights)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.weights.iter().flat_map(|w| w.data().iter().copied()).collect()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    /// All intermediate states `h^(0) = x, …, h^(L)`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.dim {
            return Err(Error::Shape {
                op: "deep_linear_forward",
                lhs: vec![self.dim],
                rhs: vec![x.len()],
            });
        }
        let d = self.dim;
        let mut states = Vec::with_capacity(self.weights.len() + 1);
        states.push(x.to_vec());
        for w in &self.weights {
            let h = states.last().expect("nonempty");
            let next = (0..d)
                .map(|i| w.data()[i * d..(i + 1) * d].iter().zip(h).map(|(a, b)| a * b).sum())
                .collect();
            states.push(next);
        }
        Ok(states)
    }

    /// Records `h^(0..=upto)` on `g` given bound weights.
    pub fn forward_graph(g: &mut Graph, weights: &[Var], x: Var, upto: usize) -> Result<Vec<Var>> {
        if upto > weights.len() {
            return Err(Error::invalid(format!("depth {upto} exceeds {} layers", weights.len())));
        }
        let mut states = vec![x];
        for &w in &weights[..upto] {
            let h = g.matmul(w, *states.last().expect("nonempty"))?;
            states.push(h);
        }
        Ok(states)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_net_preserves_input() {
        let net = DeepLinearNet::identity(4, 3).unwrap();
        let x = [0.5, -1.0, 2.0];
        for h in net.forward(&x).unwrap() {
            assert_eq!(h, x);
        }
    }

    #[test]
    fn scalar_composition() {
        let two = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let three = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 3.0]).unwrap();
        let net = DeepLinearNet::new(vec![two, three]).unwrap();
        let states = net.forward(&[1.0, 1.0]).unwrap();
        assert_eq!(states[2], vec![6.0, 6.0]);
    }

    #[test]
    fn random_net_matches_dense_product() {
        let net = DeepLinearNet::gaussian(3, 2, 1.0, 4).unwrap();
        let w = net.weights();
        // Oracle: explicit P = W2·W1·W0 by index loops.
        let mul = |a: &[f64], b: &[f64]| -> Vec<f64> {
            let mut c = vec![0.0; 4];
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        c[i * 2 + j] += a[i * 2 + k] * b[k * 2 + j];
                    }
                }
            }
            c
        };
        let p = mul(w[2].data(), &mul(w[1].data(), w[0].data()));
        let x = [0.7, -1.3];
        let expected = [p[0] * x[0] + p[1] * x[1], p[2] * x[0] + p[3] * x[1]];
        let got = net.forward(&x).unwrap().pop().unwrap();
        for (a, b) in got.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_fails() {
        let net = DeepLinearNet::identity(2, 3).unwrap();
        assert!(net.forward(&[1.0, 2.0]).is_err());
        assert!(DeepLinearNet::from_flat(2, 3, &[0.0; 17]).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let net = DeepLinearNet::gaussian(3, 2, 0.5, 9).unwrap();
        assert_eq!(DeepLinearNet::from_flat(3, 2, &net.flat()).unwrap(), net);
    }
}
