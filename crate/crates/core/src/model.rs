//! Multi-view embedding network with hand-written backpropagation.
//!
//! Every view of an object runs through a shared per-view encoder, the view
//! features are max-pooled element-wise, and the pooled vector goes through
//! the embedding head. A separate linear classifier maps the embedding to
//! class logits. Cross-domain models keep one encoder per domain and share
//! the head and the classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Affine layer `y = W x + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn apply(&self, x: &[T]) -> Vec<T> {
        let mut y = self.weight.matvec(x);
        for (v, &b) in y.iter_mut().zip(&self.bias) {
            *v += b;
        }
        y
    }
}

/// Stack of affine layers with ReLU between layers and identity at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    pub layers: Vec<Layer<T>>,
}

/// Per-layer inputs and pre-activations of one MLP evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTrace<T> {
    pub inputs: Vec<Vec<T>>,
    pub pre_activations: Vec<Vec<T>>,
}

impl<T: Scalar> Mlp<T> {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument("an MLP needs at least one layer".into()));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("zero-width layer in {dims:?}")));
        }
        Ok(Self {
            layers: dims.windows(2).map(|w| Layer::zeros(w[1], w[0])).collect(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn forward(&self, x: &[T]) -> (Vec<T>, MlpTrace<T>) {
        let last = self.layers.len() - 1;
        let mut trace = MlpTrace {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let pre = layer.apply(&h);
            let out = if l < last {
                pre.iter().map(|&v| v.max(T::zero())).collect()
            } else {
                pre.clone()
            };
            trace.inputs.push(h);
            trace.pre_activations.push(pre);
            h = out;
        }
        (h, trace)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// w.r.t. the MLP input.
    pub fn backward(&self, trace: &MlpTrace<T>, grad_out: &[T], grads: &mut Mlp<T>) -> Vec<T> {
        let last = self.layers.len() - 1;
        let mut g = grad_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            if l < last {
                for (gi, &pre) in g.iter_mut().zip(&trace.pre_activations[l]) {
                    if pre <= T::zero() {
                        *gi = T::zero();
                    }
                }
            }
            let gl = &mut grads.layers[l];
            gl.weight.add_outer(&g, &trace.inputs[l]);
            for (b, &gi) in gl.bias.iter_mut().zip(&g) {
                *b += gi;
            }
            g = self.layers[l].weight.matvec_t(&g);
        }
        g
    }

    fn check_shape(&self, other: &Mlp<T>) -> Result<()> {
        ensure_dim("mlp layer count", self.layers.len(), other.layers.len())?;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.weight.shape() != b.weight.shape() {
                return Err(Error::DimensionMismatch {
                    context: "mlp layer shape",
                    expected: a.weight.as_slice().len(),
                    actual: b.weight.as_slice().len(),
                });
            }
        }
        Ok(())
    }
}

/// Sizes of the network; the number of classes and embedding dimension are
/// shared with the center bank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDims {
    pub input_dim: usize,
    /// Output widths of the encoder layers; the last one is the pooled width.
    pub encoder_widths: Vec<usize>,
    /// Hidden widths of the embedding head (may be empty).
    pub head_hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    /// One encoder per input domain.
    pub num_domains: usize,
}

impl NetworkDims {
    pub fn encoder_chain(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.encoder_widths.iter().copied())
            .collect()
    }

    pub fn head_chain(&self) -> Vec<usize> {
        let pooled = self.encoder_widths.last().copied().unwrap_or(self.input_dim);
        std::iter::once(pooled)
            .chain(self.head_hidden.iter().copied())
            .chain(std::iter::once(self.embedding_dim))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.input_dim == 0
            || self.embedding_dim == 0
            || self.encoder_widths.contains(&0)
            || self.head_hidden.contains(&0)
        {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("network needs at least two classes".into()));
        }
        if !(1..=2).contains(&self.num_domains) {
            return Err(Error::Config(format!(
                "num_domains must be 1 or 2, got {}",
                self.num_domains
            )));
        }
        Ok(())
    }
}

/// Which learning-rate group an array belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Layers before view pooling.
    PrePool,
    /// Embedding head and classifier.
    PostPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams<T> {
    pub view_encoders: Vec<Mlp<T>>,
    pub embed_head: Mlp<T>,
    /// `K × d`; separate storage from the center bank.
    pub classifier: Layer<T>,
}

impl<T: Scalar> NetworkParams<T> {
    pub fn zeros(dims: &NetworkDims) -> Result<Self> {
        dims.validate()?;
        let enc = Mlp::zeros(&dims.encoder_chain())?;
        Ok(Self {
            view_encoders: vec![enc; dims.num_domains],
            embed_head: Mlp::zeros(&dims.head_chain())?,
            classifier: Layer::zeros(dims.num_classes, dims.embedding_dim),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_array_mut(|_, a| a.iter_mut().for_each(|v| *v = T::zero()));
        z
    }

    pub fn num_domains(&self) -> usize {
        self.view_encoders.len()
    }

    pub fn input_dim(&self) -> usize {
        self.view_encoders[0].input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embed_head.output_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_dim()
    }

    /// Visits every parameter array in a fixed order.
    pub fn for_each_array<'a>(&'a self, mut f: impl FnMut(ParamGroup, &'a [T])) {
        for enc in &self.view_encoders {
            for l in &enc.layers {
                f(ParamGroup::PrePool, l.weight.as_slice());
                f(ParamGroup::PrePool, &l.bias);
            }
        }
        for l in &self.embed_head.layers {
            f(ParamGroup::PostPool, l.weight.as_slice());
            f(ParamGroup::PostPool, &l.bias);
        }
        f(ParamGroup::PostPool, self.classifier.weight.as_slice());
        f(ParamGroup::PostPool, &self.classifier.bias);
    }

    pub fn for_each_array_mut<'a>(&'a mut self, mut f: impl FnMut(ParamGroup, &'a mut [T])) {
        for enc in &mut self.view_encoders {
            for l in &mut enc.layers {
                f(ParamGroup::PrePool, l.weight.as_mut_slice());
                f(ParamGroup::PrePool, &mut l.bias);
            }
        }
        for l in &mut self.embed_head.layers {
            f(ParamGroup::PostPool, l.weight.as_mut_slice());
            f(ParamGroup::PostPool, &mut l.bias);
        }
        f(ParamGroup::PostPool, self.classifier.weight.as_mut_slice());
        f(ParamGroup::PostPool, &mut self.classifier.bias);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_array(|_, a| n += a.len());
        n
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.for_each_array(|_, a| out.extend_from_slice(a));
        out
    }

    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        ensure_dim("flat parameter vector", self.num_params(), flat.len())?;
        let mut offset = 0;
        self.for_each_array_mut(|_, a| {
            a.copy_from_slice(&flat[offset..offset + a.len()]);
            offset += a.len();
        });
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_array(|_, a| ok &= a.iter().all(|v| v.is_finite()));
        ok
    }

    pub fn check_shape(&self, other: &NetworkParams<T>) -> Result<()> {
        ensure_dim("encoder count", self.view_encoders.len(), other.view_encoders.len())?;
        for (a, b) in self.view_encoders.iter().zip(&other.view_encoders) {
            a.check_shape(b)?;
        }
        self.embed_head.check_shape(&other.embed_head)?;
        if self.classifier.weight.shape() != other.classifier.weight.shape() {
            return Err(Error::DimensionMismatch {
                context: "classifier shape",
                expected: self.classifier.weight.as_slice().len(),
                actual: other.classifier.weight.as_slice().len(),
            });
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        let layer = |l: &Layer<T>| Layer {
            weight: l.weight.cast(),
            bias: l.bias.iter().map(|&v| U::of(v.to_f64_lossy())).collect(),
        };
        let mlp = |m: &Mlp<T>| Mlp {
            layers: m.layers.iter().map(layer).collect(),
        };
        NetworkParams {
            view_encoders: self.view_encoders.iter().map(mlp).collect(),
            embed_head: mlp(&self.embed_head),
            classifier: layer(&self.classifier),
        }
    }
}

/// Weights i.i.d. `N(0, init_std²)` from a ChaCha stream keyed by `seed`,
/// biases zero.
pub fn init_params<T: Scalar>(seed: u64, dims: &NetworkDims, init_std: f64) -> Result<NetworkParams<T>> {
    let normal = Normal::new(0.0, init_std).map_err(|e| Error::Config(format!("init_std: {e}")))?;
    let mut params = NetworkParams::zeros(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = |w: &mut Matrix<T>| {
        for v in w.as_mut_slice() {
            *v = T::of(normal.sample(&mut rng));
        }
    };
    for enc in &mut params.view_encoders {
        enc.layers.iter_mut().for_each(|l| weights(&mut l.weight));
    }
    params.embed_head.layers.iter_mut().for_each(|l| weights(&mut l.weight));
    weights(&mut params.classifier.weight);
    Ok(params)
}

/// Element-wise maximum over views; ties go to the lowest view index.
pub fn view_pool<T: Scalar>(view_feats: &Matrix<T>) -> Result<(Vec<T>, Vec<usize>)> {
    if view_feats.rows() == 0 {
        return Err(Error::InvalidArgument("view pooling needs at least one view".into()));
    }
    let mut pooled = view_feats.row(0).to_vec();
    let mut argmax = vec![0usize; view_feats.cols()];
    for v in 1..view_feats.rows() {
        for ((p, a), &x) in pooled.iter_mut().zip(argmax.iter_mut()).zip(view_feats.row(v)) {
            if x > *p {
                *p = x;
                *a = v;
            }
        }
    }
    Ok((pooled, argmax))
}

/// Everything the backward pass needs for one object.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub domain: usize,
    pub views: Vec<MlpTrace<T>>,
    pub view_features: Matrix<T>,
    pub pooled: Vec<T>,
    pub pool_argmax: Vec<usize>,
    pub head: MlpTrace<T>,
    pub embedding: Vec<T>,
    pub logits: Vec<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    /// Distance to the nearest non-differentiable point: a ReLU
    /// pre-activation at zero or a tie in view pooling.
    pub fn min_kink_distance(&self) -> T {
        let relu_gap = |t: &MlpTrace<T>| {
            let hidden = t.pre_activations.len().saturating_sub(1);
            t.pre_activations[..hidden]
                .iter()
                .flatten()
                .fold(T::infinity(), |m, &v| m.min(v.abs()))
        };
        let mut gap = self.views.iter().map(relu_gap).fold(relu_gap(&self.head), T::min);
        let v = self.view_features.rows();
        for k in 0..self.view_features.cols() {
            let winner = self.pool_argmax[k];
            for j in (0..v).filter(|&j| j != winner) {
                gap = gap.min(self.view_features[(winner, k)] - self.view_features[(j, k)]);
            }
        }
        gap
    }
}

/// Runs one object (a `V × D` matrix of views) through the network.
pub fn forward_object<T: Scalar>(
    views: &Matrix<T>,
    domain: usize,
    params: &NetworkParams<T>,
) -> Result<ForwardTrace<T>> {
    let encoder = params
        .view_encoders
        .get(domain)
        .ok_or_else(|| Error::InvalidArgument(format!("no encoder for domain {domain}")))?;
    ensure_dim("view dimension", encoder.input_dim(), views.cols())?;
    if views.rows() == 0 {
        return Err(Error::InvalidArgument("object has no views".into()));
    }

    let mut view_traces = Vec::with_capacity(views.rows());
    let mut view_features = Matrix::zeros(views.rows(), encoder.output_dim());
    for (v, x) in views.row_iter().enumerate() {
        let (h, trace) = encoder.forward(x);
        view_features.row_mut(v).copy_from_slice(&h);
        view_traces.push(trace);
    }
    let (pooled, pool_argmax) = view_pool(&view_features)?;
    let (embedding, head) = params.embed_head.forward(&pooled);
    let logits = params.classifier.apply(&embedding);
    Ok(ForwardTrace {
        domain,
        views: view_traces,
        view_features,
        pooled,
        pool_argmax,
        head,
        embedding,
        logits,
    })
}

/// Parameter gradients of a batch plus the gradient w.r.t. every input view.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients<T> {
    pub params: NetworkParams<T>,
    pub inputs: Vec<Matrix<T>>,
}

/// Backpropagates embedding and logit gradients through the whole batch.
///
/// Objects are accumulated in trace order, so the result is bitwise
/// reproducible.
pub fn backward_batch<T: Scalar>(
    traces: &[ForwardTrace<T>],
    grad_embeddings: Option<&Matrix<T>>,
    grad_logits: Option<&Matrix<T>>,
    params: &NetworkParams<T>,
) -> Result<BatchGradients<T>> {
    let d = params.embedding_dim();
    let k = params.num_classes();
    if let Some(g) = grad_embeddings {
        ensure_dim("grad_embeddings rows", traces.len(), g.rows())?;
        ensure_dim("grad_embeddings cols", d, g.cols())?;
    }
    if let Some(g) = grad_logits {
        ensure_dim("grad_logits rows", traces.len(), g.rows())?;
        ensure_dim("grad_logits cols", k, g.cols())?;
    }

    let mut grads = params.zeros_like();
    let mut inputs = Vec::with_capacity(traces.len());
    for (i, trace) in traces.iter().enumerate() {
        ensure_dim("trace embedding", d, trace.embedding.len())?;
        let encoder = params
            .view_encoders
            .get(trace.domain)
            .ok_or_else(|| Error::InvalidArgument(format!("no encoder for domain {}", trace.domain)))?;
        ensure_dim("trace pooled width", encoder.output_dim(), trace.pooled.len())?;

        let mut g_emb = match grad_embeddings {
            Some(g) => g.row(i).to_vec(),
            None => vec![T::zero(); d],
        };
        if let Some(gl) = grad_logits {
            let gl = gl.row(i);
            grads.classifier.weight.add_outer(gl, &trace.embedding);
            for (b, &v) in grads.classifier.bias.iter_mut().zip(gl) {
                *b += v;
            }
            for (e, v) in g_emb.iter_mut().zip(params.classifier.weight.matvec_t(gl)) {
                *e += v;
            }
        }

        let g_pooled = params.embed_head.backward(&trace.head, &g_emb, &mut grads.embed_head);

        let n_views = trace.views.len();
        let mut routed = Matrix::zeros(n_views, g_pooled.len());
        for (kdim, (&g, &winner)) in g_pooled.iter().zip(&trace.pool_argmax).enumerate() {
            routed[(winner, kdim)] = g;
        }
        let mut g_inputs = Matrix::zeros(n_views, encoder.input_dim());
        let enc_grads = &mut grads.view_encoders[trace.domain];
        for (v, vt) in trace.views.iter().enumerate() {
            let gx = encoder.backward(vt, routed.row(v), enc_grads);
            g_inputs.row_mut(v).copy_from_slice(&gx);
        }
        inputs.push(g_inputs);
    }
    Ok(BatchGradients { params: grads, inputs })
}
