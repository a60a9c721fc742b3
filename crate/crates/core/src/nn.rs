//! Fully-connected embedding heads with hand-written reverse mode.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent methods shadow it when std is linked
use num_traits::Float;
use rand::Rng;

use crate::error::{shape, Error, Result};
use crate::linalg::{dot, Matrix};

/// Affine layer `y = x·Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Matrix::zeros(output, input), bias: alloc::vec![0.0; output] }
    }

    /// He-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / input as f64).sqrt();
        let data = (0..input * output).map(|_| rng.random_range(-bound..bound)).collect();
        Self { weight: Matrix::from_vec(output, input, data).expect("sized"), bias: alloc::vec![0.0; output] }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn num_params(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.output_dim());
        for i in 0..x.rows() {
            let xi = x.row(i);
            for (o, y) in out.row_mut(i).iter_mut().enumerate() {
                *y = self.bias[o] + dot(xi, self.weight.row(o));
            }
        }
        out
    }
}

/// ReLU MLP with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    layers: Vec<Linear>,
}

/// Activations kept by [`MlpHead::forward`] for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    /// Input of every layer; `inputs[0]` is the batch itself.
    pub inputs: Vec<Matrix>,
    /// Pre-activations of the hidden layers.
    pub hidden_pre: Vec<Matrix>,
}

impl ForwardCache {
    /// Input of the last layer (the batch itself for single-layer heads).
    pub fn penultimate(&self) -> &Matrix {
        self.inputs.last().expect("at least one layer")
    }

    /// Smallest |pre-activation| over all hidden units.
    pub fn min_relu_margin(&self) -> f64 {
        self.hidden_pre.iter().flat_map(|m| m.as_slice()).fold(f64::INFINITY, |a, &v| a.min(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    /// Gradient with respect to the batch.
    pub input: Matrix,
}

impl MlpGrads {
    /// Same layout as [`MlpHead::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn is_all_zero(&self) -> bool {
        self.weights.iter().all(|w| w.as_slice().iter().all(|&v| v == 0.0))
            && self.biases.iter().all(|b| b.iter().all(|&v| v == 0.0))
    }
}

impl MlpHead {
    /// Randomly initialised head with layer sizes `dims` (input first).
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self { layers: dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect() })
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("a head needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(shape(format!("layer {i}: bias length {} for {} outputs", l.bias.len(), l.output_dim())));
            }
            if i > 0 && layers[i - 1].output_dim() != l.input_dim() {
                return Err(shape(format!("layer {i} expects {} inputs", l.input_dim())));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    /// Layer sizes, input first.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = alloc::vec![self.input_dim()];
        d.extend(self.layers.iter().map(Linear::output_dim));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.last_layer().output_dim()
    }

    /// Width of the input to the last layer.
    pub fn penultimate_dim(&self) -> usize {
        self.last_layer().input_dim()
    }

    pub fn last_layer(&self) -> &Linear {
        self.layers.last().expect("at least one layer")
    }

    pub fn last_layer_mut(&mut self) -> &mut Linear {
        self.layers.last_mut().expect("at least one layer")
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if x.cols() != self.input_dim() {
            return Err(shape(format!("batch has {} columns, head expects {}", x.cols(), self.input_dim())));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut hidden_pre = Vec::with_capacity(self.layers.len() - 1);
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let pre = layer.apply(&cur);
            inputs.push(cur);
            if l == last {
                return Ok((pre, ForwardCache { inputs, hidden_pre }));
            }
            let mut act = pre.clone();
            act.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            hidden_pre.push(pre);
            cur = act;
        }
        unreachable!("loop returns on the last layer")
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.forward(x).map(|(y, _)| y)
    }

    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<MlpGrads> {
        self.backward_inner(cache, upstream, None)
    }

    /// Backward pass with an extra gradient arriving at the penultimate
    /// activations (from a loss that reads them directly).
    pub fn backward_with_penultimate(
        &self,
        cache: &ForwardCache,
        upstream: &Matrix,
        extra: &Matrix,
    ) -> Result<MlpGrads> {
        self.backward_inner(cache, upstream, Some(extra))
    }

    fn backward_inner(&self, cache: &ForwardCache, upstream: &Matrix, extra: Option<&Matrix>) -> Result<MlpGrads> {
        let n = cache.inputs[0].rows();
        if cache.inputs.len() != self.layers.len() || upstream.shape() != (n, self.output_dim()) {
            return Err(shape("cache or upstream gradient does not match the head"));
        }
        if let Some(e) = extra {
            if e.shape() != (n, self.penultimate_dim()) {
                return Err(shape(format!("penultimate gradient has shape {:?}", e.shape())));
            }
        }
        let depth = self.layers.len();
        let mut weights = Vec::with_capacity(depth);
        let mut biases = Vec::with_capacity(depth);
        let mut g = upstream.clone();
        for l in (0..depth).rev() {
            let layer = &self.layers[l];
            let x = &cache.inputs[l];
            let (out_dim, in_dim) = layer.weight.shape();
            let mut gw = Matrix::zeros(out_dim, in_dim);
            let mut gb = alloc::vec![0.0; out_dim];
            let mut gx = Matrix::zeros(n, in_dim);
            for i in 0..n {
                let gi = g.row(i);
                let xi = x.row(i);
                for o in 0..out_dim {
                    let go = gi[o];
                    if go == 0.0 {
                        continue;
                    }
                    gb[o] += go;
                    for (w, &xv) in gw.row_mut(o).iter_mut().zip(xi) {
                        *w += go * xv;
                    }
                    for (gxv, &wv) in gx.row_mut(i).iter_mut().zip(layer.weight.row(o)) {
                        *gxv += go * wv;
                    }
                }
            }
            weights.push(gw);
            biases.push(gb);
            if l == depth - 1 {
                if let Some(e) = extra {
                    gx.add_assign(e);
                }
            }
            if l > 0 {
                let pre = &cache.hidden_pre[l - 1];
                for (gv, &p) in gx.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if p <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            g = gx;
        }
        weights.reverse();
        biases.reverse();
        Ok(MlpGrads { weights, biases, input: g })
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Linear::num_params).sum()
    }

    /// All parameters, layer by layer: weights (row-major) then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(shape(format!("{} parameters for a head with {}", params.len(), self.num_params())));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&params[off..off + w.len()]);
            off += w.len();
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::InvalidConfig(format!("invalid layer sizes {dims:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_layer_is_identity() {
        let head = MlpHead::from_layers(vec![Linear { weight: Matrix::identity(3), bias: vec![0.0; 3] }]).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.0, -1.0]]).unwrap();
        assert_eq!(head.predict(&x).unwrap(), x);
        assert_eq!(head.dims(), vec![3, 3]);
    }

    #[test]
    fn zero_head_outputs_zero_and_zero_upstream_gives_zero_grads() {
        let head = MlpHead::from_layers(vec![Linear::zeros(3, 4), Linear::zeros(4, 2)]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let (y, cache) = head.forward(&x).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
        let g = head.backward(&cache, &Matrix::zeros(1, 2)).unwrap();
        assert!(g.is_all_zero());
        assert!(g.input.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        let head = MlpHead::from_layers(vec![Linear::zeros(2, 2)]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let (_, cache) = head.forward(&x).unwrap();
        let g = head.backward(&cache, &Matrix::identity(2)).unwrap();
        // dW = Gᵀ·X with G = I
        assert_eq!(g.weights[0], x);
        assert_eq!(g.biases[0], vec![1.0, 1.0]);
    }

    #[test]
    fn jvp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = MlpHead::new(&[4, 6, 3], &mut rng).unwrap();
        let x = random(5, 4, &mut rng);
        let v = random(5, 4, &mut rng);
        let u = random(5, 3, &mut rng);
        // <u, J v> from reverse mode equals the directional derivative of <u, f(x)>
        let (_, cache) = head.forward(&x).unwrap();
        let g = head.backward(&cache, &u).unwrap();
        let analytic = dot(g.input.as_slice(), v.as_slice());
        let h = 1e-6;
        let f = |s: f64| {
            let mut xs = x.clone();
            xs.axpy(s, &v);
            dot(head.predict(&xs).unwrap().as_slice(), u.as_slice())
        };
        let numeric = (f(h) - f(-h)) / (2.0 * h);
        assert!((analytic - numeric).abs() < 1e-6 * numeric.abs().max(1.0));
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head = MlpHead::new(&[3, 4, 2], &mut rng).unwrap();
        let p = head.params();
        assert_eq!(p.len(), 3 * 4 + 4 + 4 * 2 + 2);
        let doubled: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        head.set_params(&doubled).unwrap();
        assert_eq!(head.params(), doubled);
        assert!(head.set_params(&p[1..]).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = MlpHead::new(&[3, 2], &mut rng).unwrap();
        assert!(matches!(head.forward(&Matrix::zeros(1, 4)), Err(Error::Shape(_))));
        assert!(MlpHead::new(&[3], &mut rng).is_err());
        assert!(MlpHead::from_layers(vec![Linear::zeros(2, 3), Linear::zeros(2, 1)]).is_err());
    }
}
