//! Feedforward networks with hand-written forward and backward passes.
//!
//! A network is a chain of dense layers `y = act(x·W + b)` with `W` stored as
//! `fan_in × fan_out`. Hidden layers use ReLU and the output layer is linear.
//! The encoder (representation model) and the classifier heads are both built
//! from [`Mlp`].

mod heads;
mod optim;

pub use heads::{HeadKind, HeadLoss, HeadParams};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{init_params, InitScheme, Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
    pub activation: Activation,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

/// Anything that exposes an ordered list of parameter tensors.
///
/// The order is fixed for a given shape, which is what makes flattened
/// vectors comparable across clients during aggregation.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.as_slice());
        }
        out
    }

    /// Overwrites every tensor from a flat vector laid out as by [`Parameters::flatten`].
    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.num_params();
        if flat.len() != expected {
            return Err(Error::shape(
                "load_flat",
                format!("expected {expected} values, got {}", flat.len()),
            ));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|t| t.shape()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations recorded by [`Mlp::forward`] and consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix>,
    shapes: Vec<(usize, usize)>,
}

impl ForwardCache {
    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre
    }
}

/// Per-layer gradients, same layout as the owning [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Parameters for Grads {
    fn tensors(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

impl Mlp {
    /// Random network with layer widths `dims[0] → dims[1] → … → dims[n]`.
    pub fn new(dims: &[usize], rng: &mut RngStream) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::shape("Mlp::new", "need at least input and output widths"));
        }
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for (i, w) in dims.windows(2).enumerate() {
            let weight = init_params(w[0], w[1], InitScheme::UniformFanIn, rng)?;
            let bound = (1.0 / w[0] as f64).sqrt();
            let bias = Matrix::new(1, w[1], (0..w[1]).map(|_| rng.uniform(-bound, bound)).collect())?;
            let activation = if i + 1 == n {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(Dense {
                weight,
                bias,
                activation,
            });
        }
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("Mlp::from_layers", "no layers"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (1, l.fan_out()) {
                return Err(Error::shape(
                    "Mlp::from_layers",
                    format!("layer {i}: bias {:?} for fan_out {}", l.bias.shape(), l.fan_out()),
                ));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].fan_out() != w[1].fan_in() {
                return Err(Error::shape(
                    "Mlp::from_layers",
                    format!(
                        "layer {i} outputs {} but layer {} expects {}",
                        w[0].fan_out(),
                        i + 1,
                        w[1].fan_in()
                    ),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    /// Layer widths, input first.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.fan_out()));
        d
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "Mlp::forward",
                format!(
                    "input has {} columns, network expects {}",
                    x.cols(),
                    self.input_dim()
                ),
            ));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = h.matmul(&layer.weight)?;
            z.add_row_broadcast(&layer.bias)?;
            let out = match layer.activation {
                Activation::Relu => z.map(|v| v.max(0.0)),
                Activation::Identity => z.clone(),
            };
            inputs.push(h);
            pre.push(z);
            h = out;
        }
        Ok((
            h,
            ForwardCache {
                inputs,
                pre,
                shapes: self.shapes(),
            },
        ))
    }

    /// Output only; skips building the cache.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "Mlp::predict",
                format!(
                    "input has {} columns, network expects {}",
                    x.cols(),
                    self.input_dim()
                ),
            ));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = h.matmul(&layer.weight)?;
            z.add_row_broadcast(&layer.bias)?;
            if layer.activation == Activation::Relu {
                z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = z;
        }
        Ok(h)
    }

    /// Gradients of a scalar loss given `grad_out = ∂loss/∂output`.
    ///
    /// Returns parameter gradients and `∂loss/∂input`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Matrix) -> Result<(Grads, Matrix)> {
        if cache.shapes != self.shapes() || cache.pre.len() != self.layers.len() {
            return Err(Error::Contract(
                "forward cache does not match this network's layer shapes".into(),
            ));
        }
        let last = &cache.pre[cache.pre.len() - 1];
        if grad_out.shape() != last.shape() {
            return Err(Error::Contract(format!(
                "upstream gradient {:?} does not match cached output {:?}",
                grad_out.shape(),
                last.shape()
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                for (gv, &z) in g.as_mut_slice().iter_mut().zip(cache.pre[i].as_slice()) {
                    if z <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let weight = cache.inputs[i].matmul_tn(&g)?;
            let bias = g.sum_rows();
            let grad_in = g.matmul_nt(&layer.weight)?;
            layers.push(LayerGrad { weight, bias });
            g = grad_in;
        }
        layers.reverse();
        Ok((Grads { layers }, g))
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.fan_in(), l.fan_out()),
                    bias: Matrix::zeros(1, l.fan_out()),
                })
                .collect(),
        }
    }
}

/// The representation model φ: input `x ∈ R^d` to feature `r ∈ R^g` with `g < d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder(Mlp);

impl Encoder {
    /// `dims = [d, hidden…, g]`.
    pub fn new(dims: &[usize], rng: &mut RngStream) -> Result<Self> {
        Self::check_dims(dims)?;
        Ok(Self(Mlp::new(dims, rng)?))
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        Self::check_dims(&mlp.dims())?;
        Ok(Self(mlp))
    }

    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 2 {
            return Err(Error::Config("encoder needs input and output widths".into()));
        }
        if dims.contains(&0) {
            return Err(Error::Config(format!(
                "encoder widths must be positive: {dims:?}"
            )));
        }
        let (d, g) = (dims[0], dims[dims.len() - 1]);
        if g >= d {
            return Err(Error::Config(format!(
                "feature dim g={g} must be smaller than input dim d={d}"
            )));
        }
        Ok(())
    }

    pub fn mlp(&self) -> &Mlp {
        &self.0
    }

    pub fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.0.output_dim()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.0.forward(x)
    }

    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        self.0.predict(x)
    }

    pub fn backward(&self, cache: &ForwardCache, grad_r: &Matrix) -> Result<(Grads, Matrix)> {
        self.0.backward(cache, grad_r)
    }

    pub fn zero_grads(&self) -> Grads {
        self.0.zero_grads()
    }

    /// SHA-256 over the exact bit patterns of every parameter.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in self.0.tensors() {
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.as_slice() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

impl Parameters for Encoder {
    fn tensors(&self) -> Vec<&Matrix> {
        self.0.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.0.tensors_mut()
    }
}


#[cfg(test)]
mod tests {
    use super::gradcheck::rel_err;
    use super::*;

    fn rng(tag: u64) -> RngStream {
        RngStream::new(tag, "nn-test", 0, 0)
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
        Matrix::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_give_broadcast_bias() {
        let mut net = Mlp::new(&[4, 3], &mut rng(1)).unwrap();
        net.layers_mut()[0].weight = Matrix::zeros(4, 3);
        let bias = net.layers()[0].bias.clone();
        let x = random_matrix(5, 4, &mut rng(2));
        let (out, _) = net.forward(&x).unwrap();
        for row in out.iter_rows() {
            assert_eq!(row, bias.as_slice());
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = Dense {
            weight: Matrix::identity(3),
            bias: Matrix::zeros(1, 3),
            activation: Activation::Identity,
        };
        let net = Mlp::from_layers(vec![layer]).unwrap();
        let x = random_matrix(4, 3, &mut rng(3));
        assert_eq!(net.forward(&x).unwrap().0, x);
    }

    #[test]
    fn forward_is_pure() {
        let enc = Encoder::new(&[6, 5, 3], &mut rng(4)).unwrap();
        let x = random_matrix(7, 6, &mut rng(5));
        assert_eq!(enc.forward(&x).unwrap().0, enc.forward(&x).unwrap().0);
        assert_eq!(enc.features(&x).unwrap(), enc.forward(&x).unwrap().0);
    }

    #[test]
    fn encoder_requires_lower_dimensional_output() {
        assert!(matches!(
            Encoder::new(&[4, 8, 4], &mut rng(1)),
            Err(Error::Config(_))
        ));
        assert!(Encoder::new(&[4, 8, 3], &mut rng(1)).is_ok());
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let enc = Encoder::new(&[6, 3], &mut rng(4)).unwrap();
        assert!(matches!(
            enc.forward(&Matrix::zeros(2, 5)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let enc = Encoder::new(&[6, 5, 3], &mut rng(4)).unwrap();
        let x = random_matrix(7, 6, &mut rng(5));
        let (_, cache) = enc.forward(&x).unwrap();
        let (grads, gin) = enc.backward(&cache, &Matrix::zeros(7, 3)).unwrap();
        assert!(grads.flatten().iter().all(|&v| v == 0.0));
        assert!(gin.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_cache_is_rejected() {
        let a = Encoder::new(&[6, 5, 3], &mut rng(4)).unwrap();
        let b = Encoder::new(&[6, 4, 3], &mut rng(4)).unwrap();
        let x = random_matrix(2, 6, &mut rng(5));
        let (_, cache) = a.forward(&x).unwrap();
        assert!(matches!(
            b.backward(&cache, &Matrix::zeros(2, 3)),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            a.backward(&cache, &Matrix::zeros(3, 3)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn dead_relu_unit_has_zero_incoming_grads() {
        let mut net = Mlp::new(&[3, 4, 2], &mut rng(8)).unwrap();
        // force hidden unit 1 negative for every input in the batch
        for r in 0..3 {
            net.layers_mut()[0].weight.set(r, 1, 0.0);
        }
        net.layers_mut()[0].bias.set(0, 1, -1.0);
        let x = random_matrix(5, 3, &mut rng(9));
        let (_, cache) = net.forward(&x).unwrap();
        let (grads, _) = net.backward(&cache, &random_matrix(5, 2, &mut rng(10))).unwrap();
        for r in 0..3 {
            assert_eq!(grads.layers[0].weight.get(r, 1), 0.0);
        }
        assert_eq!(grads.layers[0].bias.get(0, 1), 0.0);
    }

    #[test]
    fn flatten_roundtrip_is_exact() {
        let enc = Encoder::new(&[6, 5, 3], &mut rng(4)).unwrap();
        let flat = enc.flatten();
        let mut other = Encoder::new(&[6, 5, 3], &mut rng(99)).unwrap();
        other.load_flat(&flat).unwrap();
        assert_eq!(other, enc);
        assert!(other.load_flat(&flat[1..]).is_err());
    }

    /// Central differences of `L = Σ out ⊙ w` with a fixed random weighting `w`.
    #[test]
    fn backward_matches_finite_differences() {
        let h = 1e-5;
        for seed in 0..20 {
            let mut r = rng(100 + seed);
            let net = Mlp::new(&[5, 7, 3], &mut r).unwrap();
            let x = random_matrix(4, 5, &mut r);
            let w = random_matrix(4, 3, &mut r);
            let loss = |m: &Mlp| -> f64 {
                let out = m.predict(&x).unwrap();
                out.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
            };
            let (_, cache) = net.forward(&x).unwrap();
            let (grads, _) = net.backward(&cache, &w).unwrap();
            let analytic = grads.flatten();
            let base = net.flatten();
            for (i, &a) in analytic.iter().enumerate() {
                let mut plus = net.clone();
                let mut p = base.clone();
                p[i] += h;
                plus.load_flat(&p).unwrap();
                let mut minus = net.clone();
                p[i] -= 2.0 * h;
                minus.load_flat(&p).unwrap();
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert!(
                    rel_err(a, numeric) < 1e-4,
                    "seed {seed} param {i}: {a} vs {numeric}"
                );
            }
        }
    }
}
