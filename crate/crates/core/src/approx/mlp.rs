use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;

use super::ParamSet;
use crate::error::{usage, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// `tanh` through one `exp`; several times cheaper than the libm routine
/// and accurate to a few ulps in absolute terms.
#[inline]
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Tanh-approximated GELU.
    Gelu,
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + fast_tanh(SQRT_2_OVER_PI * (x + GELU_C * x * x * x))),
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let inner = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
                let t = fast_tanh(inner);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "gelu" => Some(Activation::Gelu),
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Dense feed-forward network stored in one flat buffer.
///
/// Layer `l` maps `dims[l] -> dims[l+1]`; its weight matrix is stored
/// row-major with shape `(dims[l], dims[l+1])` followed by the bias. Hidden
/// layers use `hidden`, the last layer uses `output`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    dims: Vec<usize>,
    hidden: Activation,
    output: Activation,
    data: Vec<f64>,
    offsets: Vec<usize>,
    version: u64,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
}

/// Gradient buffer with the same layout as [`NetParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    data: Vec<f64>,
}

impl Gradients {
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn add_assign(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|g| *g *= k);
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&g| g == 0.0)
    }
}

impl ParamSet for Gradients {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.data]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.data]
    }
}

fn layout(dims: &[usize]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(dims.len().saturating_sub(1));
    let mut off = 0;
    for w in dims.windows(2) {
        offsets.push(off);
        off += w[0] * w[1] + w[1];
    }
    (offsets, off)
}

impl NetParams {
    pub fn zeros(dims: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(usage!("network dims {dims:?} need at least two positive widths"));
        }
        let (offsets, len) = layout(dims);
        Ok(Self {
            dims: dims.to_vec(),
            hidden,
            output,
            data: vec![0.0; len],
            offsets,
            version: 0,
        })
    }

    /// Fan-in scaled uniform initialization: entries ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(dims, hidden, output)?;
        for l in 0..net.n_layers() {
            let bound = 1.0 / (net.dims[l] as f64).sqrt();
            let (start, end) = net.layer_range(l);
            for x in &mut net.data[start..end] {
                *x = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn from_flat(dims: &[usize], hidden: Activation, output: Activation, data: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(dims, hidden, output)?;
        if data.len() != net.data.len() {
            return Err(usage!(
                "flat buffer has {} values, dims {dims:?} need {}",
                data.len(),
                net.data.len()
            ));
        }
        net.data = data;
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    fn layer_range(&self, l: usize) -> (usize, usize) {
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        (self.offsets[l], self.offsets[l] + i * o + o)
    }

    fn activation(&self, l: usize) -> Activation {
        if l + 1 == self.n_layers() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        let off = self.offsets[l];
        ArrayView2::from_shape((i, o), &self.data[off..off + i * o]).expect("layout")
    }

    pub fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        let off = self.offsets[l] + i * o;
        ArrayView1::from(&self.data[off..off + o])
    }

    pub fn weight_mut(&mut self, l: usize) -> ArrayViewMut2<'_, f64> {
        self.version += 1;
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        let off = self.offsets[l];
        ArrayViewMut2::from_shape((i, o), &mut self.data[off..off + i * o]).expect("layout")
    }

    pub fn bias_mut(&mut self, l: usize) -> ArrayViewMut1<'_, f64> {
        self.version += 1;
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        let off = self.offsets[l] + i * o;
        ArrayViewMut1::from(&mut self.data[off..off + o])
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            data: vec![0.0; self.data.len()],
        }
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.dims[0] {
            return Err(usage!(
                "input width {} does not match first layer width {}",
                x.ncols(),
                self.dims[0]
            ));
        }
        Ok(())
    }

    /// Batched forward pass, one row per example.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.n_layers());
        let mut pre = Vec::with_capacity(self.n_layers());
        let mut h = x.to_owned();
        for l in 0..self.n_layers() {
            let z = h.dot(&self.weight(l)) + &self.bias(l);
            let act = self.activation(l);
            let out = z.mapv(|v| act.apply(v));
            inputs.push(h);
            pre.push(z);
            h = out;
        }
        Ok((
            h,
            ForwardCache {
                version: self.version,
                inputs,
                pre,
            },
        ))
    }

    /// Forward pass without a cache.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let first = x.dot(&self.weight(0)) + &self.bias(0);
        Ok(self.predict_from_preactivation(first))
    }

    /// Continues a forward pass from the first layer's pre-activation.
    ///
    /// Lets callers assemble the first affine map from blocks (for example,
    /// reusing a block that is constant across many evaluations).
    pub fn predict_from_preactivation(&self, mut z: Array2<f64>) -> Array2<f64> {
        for l in 0..self.n_layers() {
            let act = self.activation(l);
            z.mapv_inplace(|v| act.apply(v));
            if l + 1 == self.n_layers() {
                break;
            }
            z = z.dot(&self.weight(l + 1)) + &self.bias(l + 1);
        }
        z
    }

    /// Forward pass for a single example with scalar output.
    pub fn forward_one(&self, x: &[f64]) -> Result<f64> {
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| usage!("{e}"))?;
        let out = self.predict(view)?;
        Ok(out[[0, 0]])
    }

    /// Reverse-mode gradients of `sum(grad_out * output)`.
    ///
    /// Returns the parameter gradients and the gradient with respect to the
    /// input. Fails if the parameters changed since `cache` was produced.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<'_, f64>) -> Result<(Gradients, Array2<f64>)> {
        if cache.version != self.version || cache.pre.len() != self.n_layers() {
            return Err(usage!("stale forward cache: parameters changed after the forward pass"));
        }
        let last = &cache.pre[self.n_layers() - 1];
        if grad_out.dim() != last.dim() {
            return Err(usage!(
                "output gradient shape {:?} does not match output {:?}",
                grad_out.dim(),
                last.dim()
            ));
        }
        let mut grads = self.zero_gradients();
        let mut delta = grad_out.to_owned();
        for l in (0..self.n_layers()).rev() {
            let act = self.activation(l);
            if act != Activation::Identity {
                ndarray::Zip::from(&mut delta)
                    .and(&cache.pre[l])
                    .for_each(|d, &z| *d *= act.derivative(z));
            }
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let off = self.offsets[l];
            {
                let gw = cache.inputs[l].t().dot(&delta);
                let gb = delta.sum_axis(Axis(0));
                let buf = &mut grads.data[off..off + i * o + o];
                for (dst, src) in buf[..i * o].iter_mut().zip(gw.iter()) {
                    *dst = *src;
                }
                for (dst, src) in buf[i * o..].iter_mut().zip(gb.iter()) {
                    *dst = *src;
                }
            }
            delta = delta.dot(&self.weight(l).t());
        }
        Ok((grads, delta))
    }
}

impl ParamSet for NetParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.data]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        vec![&mut self.data]
    }
}

/// Row `i` of a batch as a 1-row view.
pub fn row_view(x: &Array2<f64>, i: usize) -> ArrayView2<'_, f64> {
    x.slice(s![i..i + 1, ..])
}

/// Builds a `(rows, cols)` matrix from a flat row-major vector.
pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), data).expect("matrix shape")
}

pub fn column(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape")
}
