//! Differentiable building blocks: dense spatial/temporal graph convolutions
//! with learnable adjacencies, batch normalization, tanh + inverted dropout,
//! and pointwise (1×1) projections, composed into GCL and GCB units.
//!
//! Every forward returns a cache; every backward consumes it, returns the
//! input gradient, and accumulates parameter gradients into the owning
//! [`Param`] buffers. Backward passes are derived by hand and verified
//! against central finite differences in the test suites.

use crate::error::{Error, Result};
use crate::tensor::{
    matmul_left, matmul_left_t, matmul_right, matmul_right_t, transpose_frames_joints, Scalar,
    Tensor,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Forward-pass mode. Training updates batch-norm running statistics and
/// applies dropout; evaluation is deterministic and consumes no randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One learnable buffer with its gradient and Adam moment slots, all
/// shape-matched by construction.
#[derive(Clone, Debug)]
pub struct Param<S: Scalar> {
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub m: Tensor<S>,
    pub v: Tensor<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(value: Tensor<S>) -> Self {
        let grad = Tensor::zeros(value.shape());
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        Self { value, grad, m, v }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn cast<T: Scalar>(&self) -> Param<T> {
        Param {
            value: self.value.cast(),
            grad: self.grad.cast(),
            m: self.m.cast(),
            v: self.v.cast(),
        }
    }
}

/// Adjacency initialization scheme. The uniform draw keeps forward activation
/// variance near the input scale; identity-plus-noise is the documented
/// alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdjInit {
    #[default]
    Uniform,
    IdentityNoise,
}

fn uniform_tensor<S: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::of_f64(rng.random_range(-bound..bound)))
}

/// One S-DGCN or T-DGCN parameter set: a learnable square adjacency over the
/// layer's node axis plus a feature-mixing weight.
#[derive(Clone, Debug)]
pub struct DenseGraphLayerParams<S: Scalar> {
    pub adj: Param<S>,
    pub weight: Param<S>,
}

impl<S: Scalar> DenseGraphLayerParams<S> {
    pub fn init(
        nodes: usize,
        f_in: usize,
        f_out: usize,
        adj_init: AdjInit,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (nodes as f64).sqrt();
        let adj = match adj_init {
            AdjInit::Uniform => uniform_tensor(&[nodes, nodes], bound, rng),
            AdjInit::IdentityNoise => {
                let noise: Tensor<S> = uniform_tensor(&[nodes, nodes], bound, rng);
                noise.add(&Tensor::eye(nodes)).expect("same shape")
            }
        };
        // Xavier-uniform on the feature weight; standard for tanh stacks.
        let wb = (6.0 / (f_in + f_out) as f64).sqrt();
        let weight = uniform_tensor(&[f_in, f_out], wb, rng);
        Self { adj: Param::new(adj), weight: Param::new(weight) }
    }

    pub fn zeroed(nodes: usize, f_in: usize, f_out: usize) -> Self {
        Self {
            adj: Param::new(Tensor::zeros(&[nodes, nodes])),
            weight: Param::new(Tensor::zeros(&[f_in, f_out])),
        }
    }

    pub fn nodes(&self) -> usize {
        self.adj.value.shape()[0]
    }

    pub fn in_width(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_width(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn cast<T: Scalar>(&self) -> DenseGraphLayerParams<T> {
        DenseGraphLayerParams { adj: self.adj.cast(), weight: self.weight.cast() }
    }
}

/// Cache for one dense graph product `A·x·W`.
#[derive(Clone, Debug)]
pub struct GraphCache<S: Scalar> {
    x: Tensor<S>,
    ax: Tensor<S>,
}

fn graph_forward_core<S: Scalar>(
    p: &DenseGraphLayerParams<S>,
    x: &Tensor<S>,
    what: &str,
) -> Result<(Tensor<S>, GraphCache<S>)> {
    let n = p.nodes();
    if x.rank() < 2 || x.shape()[x.rank() - 2] != n {
        return Err(Error::shape(
            format!("{what} adjacency vs node axis"),
            format!("node extent {n}"),
            format!("{:?}", x.shape()),
        ));
    }
    if *x.shape().last().unwrap() != p.in_width() {
        return Err(Error::shape(
            format!("{what} weight vs feature axis"),
            format!("feature extent {}", p.in_width()),
            format!("{:?}", x.shape()),
        ));
    }
    let ax = matmul_left(&p.adj.value, x)?;
    let out = matmul_right(&ax, &p.weight.value)?;
    Ok((out, GraphCache { x: x.clone(), ax }))
}

/// Input gradient plus parameter-gradient accumulation for the core product.
///
/// With `G = dL/dout`:
///   dL/dx = Aᵀ·G·Wᵀ,  dL/dW = Σ (A·x)ᵀ·G,  dL/dA = Σ (G·Wᵀ)·xᵀ
/// where the sums run over all leading slices.
fn graph_backward_core<S: Scalar>(
    p: &mut DenseGraphLayerParams<S>,
    cache: &GraphCache<S>,
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    let mut out_shape = cache.x.shape().to_vec();
    *out_shape.last_mut().unwrap() = p.out_width();
    if grad_out.shape() != out_shape.as_slice() {
        return Err(Error::shape(
            "graph layer backward",
            format!("{out_shape:?}"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let grad_ax = matmul_right_t(grad_out, &p.weight.value)?;
    let grad_x = matmul_left_t(&p.adj.value, &grad_ax)?;

    // dW += axᵀ·G with all leading slices flattened into rows.
    let f_in = p.in_width();
    let f_out = p.out_width();
    let rows = cache.ax.len() / f_in;
    S::gemm(
        f_in,
        rows,
        f_out,
        S::one(),
        cache.ax.data(),
        true,
        grad_out.data(),
        false,
        S::one(),
        p.weight.grad.data_mut(),
    );

    // dA += Σ_slices (G·Wᵀ)·xᵀ, done as one product in node-major layout.
    let n = p.nodes();
    let gax_nm = crate::tensor::fold_node_major(&grad_ax);
    let x_nm = crate::tensor::fold_node_major(&cache.x);
    S::gemm(
        n,
        gax_nm.shape()[1],
        n,
        S::one(),
        gax_nm.data(),
        false,
        x_nm.data(),
        true,
        S::one(),
        p.adj.grad.data_mut(),
    );
    Ok(grad_x)
}

/// Spatial graph convolution: `out[b,l] = A · x[b,l] · W`, shared across all
/// frames. The adjacency spans the joint axis.
pub fn sdgcn_forward<S: Scalar>(
    p: &DenseGraphLayerParams<S>,
    x: &Tensor<S>,
) -> Result<(Tensor<S>, GraphCache<S>)> {
    graph_forward_core(p, x, "sdgcn")
}

pub fn sdgcn_backward<S: Scalar>(
    p: &mut DenseGraphLayerParams<S>,
    cache: &GraphCache<S>,
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    graph_backward_core(p, cache, grad_out)
}

/// Cache for a temporal graph convolution (the core cache lives in the
/// transposed frame-major layout).
#[derive(Clone, Debug)]
pub struct TdgcnCache<S: Scalar> {
    inner: GraphCache<S>,
}

/// Temporal graph convolution: transpose frames/joints, apply the shared
/// trajectory convolution `A·y·W`, transpose back. The adjacency spans the
/// current temporal extent (2L inside the decoder when features are copied
/// along time).
pub fn tdgcn_forward<S: Scalar>(
    p: &DenseGraphLayerParams<S>,
    x: &Tensor<S>,
) -> Result<(Tensor<S>, TdgcnCache<S>)> {
    if x.rank() != 4 {
        return Err(Error::InvalidArgument("tdgcn needs a rank-4 (B,L,M,F) tensor".into()));
    }
    if x.shape()[1] != p.nodes() {
        return Err(Error::shape(
            "tdgcn adjacency vs temporal extent",
            format!("temporal extent {}", p.nodes()),
            format!("{:?}", x.shape()),
        ));
    }
    let xt = transpose_frames_joints(x)?;
    let (yt, inner) = graph_forward_core(p, &xt, "tdgcn")?;
    Ok((transpose_frames_joints(&yt)?, TdgcnCache { inner }))
}

pub fn tdgcn_backward<S: Scalar>(
    p: &mut DenseGraphLayerParams<S>,
    cache: &TdgcnCache<S>,
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    let gt = transpose_frames_joints(grad_out)?;
    let grad_xt = graph_backward_core(p, &cache.inner, &gt)?;
    transpose_frames_joints(&grad_xt)
}

/// Batch-normalization parameters; per-feature-channel over all other axes.
#[derive(Clone, Debug)]
pub struct BatchNormParams<S: Scalar> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub eps: f64,
    pub momentum: f64,
}

impl<S: Scalar> BatchNormParams<S> {
    pub fn init(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::filled(&[channels], S::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], S::one()),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn cast<T: Scalar>(&self) -> BatchNormParams<T> {
        BatchNormParams {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            eps: self.eps,
            momentum: self.momentum,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BnCache<S: Scalar> {
    x_hat: Tensor<S>,
    inv_std: Vec<S>,
    mode: Mode,
}

/// Normalizes per feature channel. Train mode uses batch statistics
/// (population variance) and updates the running estimates in place:
/// `running ← (1−momentum)·running + momentum·batch`. Eval mode normalizes by
/// the running estimates and touches nothing.
pub fn batchnorm_forward<S: Scalar>(
    p: &mut BatchNormParams<S>,
    x: &Tensor<S>,
    mode: Mode,
) -> Result<(Tensor<S>, BnCache<S>)> {
    let f = p.channels();
    if *x.shape().last().unwrap() != f {
        return Err(Error::shape(
            "batchnorm channels",
            format!("feature extent {f}"),
            format!("{:?}", x.shape()),
        ));
    }
    let positions = x.len() / f;
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![S::zero(); f];
            let mut var = vec![S::zero(); f];
            for (i, &v) in x.data().iter().enumerate() {
                mean[i % f] += v;
            }
            let inv_n = S::one() / S::of_f64(positions as f64);
            for m in mean.iter_mut() {
                *m = *m * inv_n;
            }
            for (i, &v) in x.data().iter().enumerate() {
                let d = v - mean[i % f];
                var[i % f] += d * d;
            }
            for v in var.iter_mut() {
                *v = *v * inv_n;
            }
            let mom = S::of_f64(p.momentum);
            let keep = S::one() - mom;
            for c in 0..f {
                let rm = p.running_mean.data()[c] * keep + mean[c] * mom;
                p.running_mean.data_mut()[c] = rm;
                let rv = p.running_var.data()[c] * keep + var[c] * mom;
                p.running_var.data_mut()[c] = rv;
            }
            (mean, var)
        }
        Mode::Eval => (p.running_mean.data().to_vec(), p.running_var.data().to_vec()),
    };
    let eps = S::of_f64(p.eps);
    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    let mut x_hat = x.clone();
    for (i, v) in x_hat.data_mut().iter_mut().enumerate() {
        let c = i % f;
        *v = (*v - mean[c]) * inv_std[c];
    }
    let mut out = x_hat.clone();
    let gamma = p.gamma.value.data();
    let beta = p.beta.value.data();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = i % f;
        *v = *v * gamma[c] + beta[c];
    }
    Ok((out, BnCache { x_hat, inv_std, mode }))
}

pub fn batchnorm_backward<S: Scalar>(
    p: &mut BatchNormParams<S>,
    cache: &BnCache<S>,
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    if grad_out.shape() != cache.x_hat.shape() {
        return Err(Error::shape(
            "batchnorm backward",
            format!("{:?}", cache.x_hat.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let f = p.channels();
    let positions = grad_out.len() / f;
    let mut sum_g = vec![S::zero(); f];
    let mut sum_gx = vec![S::zero(); f];
    for (i, &g) in grad_out.data().iter().enumerate() {
        let c = i % f;
        sum_g[c] += g;
        sum_gx[c] += g * cache.x_hat.data()[i];
    }
    for c in 0..f {
        p.gamma.grad.data_mut()[c] += sum_gx[c];
        p.beta.grad.data_mut()[c] += sum_g[c];
    }
    let gamma = p.gamma.value.data();
    let mut grad_x = grad_out.clone();
    match cache.mode {
        Mode::Train => {
            // dx = γ·inv_std/N · (N·g − Σg − x̂·Σ(g·x̂)) per channel.
            let n = S::of_f64(positions as f64);
            for (i, gx) in grad_x.data_mut().iter_mut().enumerate() {
                let c = i % f;
                let coeff = gamma[c] * cache.inv_std[c] / n;
                *gx = coeff * (n * *gx - sum_g[c] - cache.x_hat.data()[i] * sum_gx[c]);
            }
        }
        Mode::Eval => {
            for (i, gx) in grad_x.data_mut().iter_mut().enumerate() {
                let c = i % f;
                *gx = *gx * gamma[c] * cache.inv_std[c];
            }
        }
    }
    Ok(grad_x)
}

#[derive(Clone, Debug)]
pub struct ActCache<S: Scalar> {
    tanh_out: Tensor<S>,
    mask: Option<Vec<S>>,
}

/// Elementwise tanh followed by inverted dropout. Train mode with a positive
/// rate multiplies by a Bernoulli(1−rate) mask scaled by 1/(1−rate); eval
/// mode (and rate 0) applies tanh only and draws nothing from the RNG.
pub fn tanh_dropout<S: Scalar>(
    x: &Tensor<S>,
    rate: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<S>, ActCache<S>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate must be in [0,1), got {rate}")));
    }
    let tanh_out = x.map(|v| v.tanh());
    if mode == Mode::Eval || rate == 0.0 {
        let cache = ActCache { tanh_out: tanh_out.clone(), mask: None };
        return Ok((tanh_out, cache));
    }
    let scale = S::of_f64(1.0 / (1.0 - rate));
    let mask: Vec<S> = (0..x.len())
        .map(|_| if rng.random::<f64>() < rate { S::zero() } else { scale })
        .collect();
    let mut out = tanh_out.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
        *v = *v * m;
    }
    Ok((out, ActCache { tanh_out, mask: Some(mask) }))
}

pub fn tanh_dropout_backward<S: Scalar>(cache: &ActCache<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    if grad_out.shape() != cache.tanh_out.shape() {
        return Err(Error::shape(
            "tanh_dropout backward",
            format!("{:?}", cache.tanh_out.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let mut grad = grad_out.clone();
    for (i, g) in grad.data_mut().iter_mut().enumerate() {
        let t = cache.tanh_out.data()[i];
        let mut v = *g * (S::one() - t * t);
        if let Some(mask) = &cache.mask {
            v = v * mask[i];
        }
        *g = v;
    }
    Ok(grad)
}

/// Shared per-position linear map: a 1×1 convolution over the (frames,
/// joints) grid. Bias is optional and off by default (the graph equations
/// carry none).
#[derive(Clone, Debug)]
pub struct PointwiseParams<S: Scalar> {
    pub weight: Param<S>,
    pub bias: Option<Param<S>>,
}

impl<S: Scalar> PointwiseParams<S> {
    pub fn init(f_in: usize, f_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let wb = (6.0 / (f_in + f_out) as f64).sqrt();
        Self {
            weight: Param::new(uniform_tensor(&[f_in, f_out], wb, rng)),
            bias: bias.then(|| Param::new(Tensor::zeros(&[f_out]))),
        }
    }

    pub fn zeroed(f_in: usize, f_out: usize) -> Self {
        Self { weight: Param::new(Tensor::zeros(&[f_in, f_out])), bias: None }
    }

    pub fn cast<T: Scalar>(&self) -> PointwiseParams<T> {
        PointwiseParams { weight: self.weight.cast(), bias: self.bias.as_ref().map(Param::cast) }
    }
}

#[derive(Clone, Debug)]
pub struct PointwiseCache<S: Scalar> {
    x: Tensor<S>,
}

pub fn pointwise_forward<S: Scalar>(
    p: &PointwiseParams<S>,
    x: &Tensor<S>,
) -> Result<(Tensor<S>, PointwiseCache<S>)> {
    let mut out = matmul_right(x, &p.weight.value)?;
    if let Some(b) = &p.bias {
        let f = b.value.len();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + b.value.data()[i % f];
        }
    }
    Ok((out, PointwiseCache { x: x.clone() }))
}

pub fn pointwise_backward<S: Scalar>(
    p: &mut PointwiseParams<S>,
    cache: &PointwiseCache<S>,
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    let f_in = p.weight.value.shape()[0];
    let f_out = p.weight.value.shape()[1];
    let rows = cache.x.len() / f_in;
    if grad_out.len() != rows * f_out {
        return Err(Error::shape(
            "pointwise backward",
            format!("{rows}x{f_out} gradient"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    S::gemm(
        f_in,
        rows,
        f_out,
        S::one(),
        cache.x.data(),
        true,
        grad_out.data(),
        false,
        S::one(),
        p.weight.grad.data_mut(),
    );
    if let Some(b) = &mut p.bias {
        for (i, &g) in grad_out.data().iter().enumerate() {
            b.grad.data_mut()[i % f_out] += g;
        }
    }
    matmul_right_t(grad_out, &p.weight.value)
}

/// Graph Convolutional Layer: S-DGCN → T-DGCN → batch norm → tanh → dropout.
#[derive(Clone, Debug)]
pub struct GclParams<S: Scalar> {
    pub sdgcn: DenseGraphLayerParams<S>,
    pub tdgcn: DenseGraphLayerParams<S>,
    pub bn: BatchNormParams<S>,
    pub dropout: f64,
}

impl<S: Scalar> GclParams<S> {
    pub fn init(
        spatial_nodes: usize,
        temporal_nodes: usize,
        f_in: usize,
        f_out: usize,
        dropout: f64,
        adj_init: AdjInit,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            sdgcn: DenseGraphLayerParams::init(spatial_nodes, f_in, f_out, adj_init, rng),
            tdgcn: DenseGraphLayerParams::init(temporal_nodes, f_out, f_out, adj_init, rng),
            bn: BatchNormParams::init(f_out),
            dropout,
        }
    }

    pub fn zeroed(spatial_nodes: usize, temporal_nodes: usize, f_in: usize, f_out: usize) -> Self {
        Self {
            sdgcn: DenseGraphLayerParams::zeroed(spatial_nodes, f_in, f_out),
            tdgcn: DenseGraphLayerParams::zeroed(temporal_nodes, f_out, f_out),
            bn: BatchNormParams::init(f_out),
            dropout: 0.0,
        }
    }

    pub fn cast<T: Scalar>(&self) -> GclParams<T> {
        GclParams {
            sdgcn: self.sdgcn.cast(),
            tdgcn: self.tdgcn.cast(),
            bn: self.bn.cast(),
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GclCache<S: Scalar> {
    s: GraphCache<S>,
    t: TdgcnCache<S>,
    bn: BnCache<S>,
    act: ActCache<S>,
}

pub fn gcl_forward<S: Scalar>(
    p: &mut GclParams<S>,
    x: &Tensor<S>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<S>, GclCache<S>)> {
    let (h1, s) = sdgcn_forward(&p.sdgcn, x)?;
    let (h2, t) = tdgcn_forward(&p.tdgcn, &h1)?;
    let (h3, bn) = batchnorm_forward(&mut p.bn, &h2, mode)?;
    let (out, act) = tanh_dropout(&h3, p.dropout, mode, rng)?;
    Ok((out, GclCache { s, t, bn, act }))
}

pub fn gcl_backward<S: Scalar>(
    p: &mut GclParams<S>,
    cache: &GclCache<S>,
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    let g3 = tanh_dropout_backward(&cache.act, grad_out)?;
    let g2 = batchnorm_backward(&mut p.bn, &cache.bn, &g3)?;
    let g1 = tdgcn_backward(&mut p.tdgcn, &cache.t, &g2)?;
    sdgcn_backward(&mut p.sdgcn, &cache.s, &g1)
}

/// Graph Convolutional Block: a residual pair of width-preserving GCLs,
/// `out = x + GCL₂(GCL₁(x))`.
#[derive(Clone, Debug)]
pub struct GcbParams<S: Scalar> {
    pub gcl1: GclParams<S>,
    pub gcl2: GclParams<S>,
}

impl<S: Scalar> GcbParams<S> {
    pub fn init(
        spatial_nodes: usize,
        temporal_nodes: usize,
        width: usize,
        dropout: f64,
        adj_init: AdjInit,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            gcl1: GclParams::init(spatial_nodes, temporal_nodes, width, width, dropout, adj_init, rng),
            gcl2: GclParams::init(spatial_nodes, temporal_nodes, width, width, dropout, adj_init, rng),
        }
    }

    pub fn zeroed(spatial_nodes: usize, temporal_nodes: usize, width: usize) -> Self {
        Self {
            gcl1: GclParams::zeroed(spatial_nodes, temporal_nodes, width, width),
            gcl2: GclParams::zeroed(spatial_nodes, temporal_nodes, width, width),
        }
    }

    pub fn cast<T: Scalar>(&self) -> GcbParams<T> {
        GcbParams { gcl1: self.gcl1.cast(), gcl2: self.gcl2.cast() }
    }
}

#[derive(Clone, Debug)]
pub struct GcbCache<S: Scalar> {
    c1: GclCache<S>,
    c2: GclCache<S>,
}

pub fn gcb_forward<S: Scalar>(
    p: &mut GcbParams<S>,
    x: &Tensor<S>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<S>, GcbCache<S>)> {
    if p.gcl1.sdgcn.in_width() != p.gcl2.sdgcn.out_width() {
        return Err(Error::Config("GCB must preserve feature width".into()));
    }
    let (h1, c1) = gcl_forward(&mut p.gcl1, x, mode, rng)?;
    let (h2, c2) = gcl_forward(&mut p.gcl2, &h1, mode, rng)?;
    Ok((x.add(&h2)?, GcbCache { c1, c2 }))
}

pub fn gcb_backward<S: Scalar>(
    p: &mut GcbParams<S>,
    cache: &GcbCache<S>,
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    let g1 = gcl_backward(&mut p.gcl2, &cache.c2, grad_out)?;
    let g0 = gcl_backward(&mut p.gcl1, &cache.c1, &g1)?;
    grad_out.add(&g0)
}

/// Visits every learnable parameter of a layer tree in a fixed order; the
/// optimizer and the checkpoint writer both rely on this ordering.
pub trait VisitParams<S: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>));
    /// Non-learnable state buffers (batch-norm running statistics).
    fn visit_state(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Tensor<S>)) {}
    fn visit_state_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Tensor<S>)) {}
}

impl<S: Scalar> VisitParams<S> for DenseGraphLayerParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        f(&format!("{prefix}.adj"), &self.adj);
        f(&format!("{prefix}.weight"), &self.weight);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&format!("{prefix}.adj"), &mut self.adj);
        f(&format!("{prefix}.weight"), &mut self.weight);
    }
}

impl<S: Scalar> VisitParams<S> for BatchNormParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f(&format!("{prefix}.running_mean"), &self.running_mean);
        f(&format!("{prefix}.running_var"), &self.running_var);
    }
    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f(&format!("{prefix}.running_mean"), &mut self.running_mean);
        f(&format!("{prefix}.running_var"), &mut self.running_var);
    }
}

impl<S: Scalar> VisitParams<S> for PointwiseParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }
}

impl<S: Scalar> VisitParams<S> for GclParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        self.sdgcn.visit(&format!("{prefix}.sdgcn"), f);
        self.tdgcn.visit(&format!("{prefix}.tdgcn"), f);
        self.bn.visit(&format!("{prefix}.bn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.sdgcn.visit_mut(&format!("{prefix}.sdgcn"), f);
        self.tdgcn.visit_mut(&format!("{prefix}.tdgcn"), f);
        self.bn.visit_mut(&format!("{prefix}.bn"), f);
    }
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        self.bn.visit_state(&format!("{prefix}.bn"), f);
    }
    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.bn.visit_state_mut(&format!("{prefix}.bn"), f);
    }
}

impl<S: Scalar> VisitParams<S> for GcbParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        self.gcl1.visit(&format!("{prefix}.gcl1"), f);
        self.gcl2.visit(&format!("{prefix}.gcl2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.gcl1.visit_mut(&format!("{prefix}.gcl1"), f);
        self.gcl2.visit_mut(&format!("{prefix}.gcl2"), f);
    }
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        self.gcl1.visit_state(&format!("{prefix}.gcl1"), f);
        self.gcl2.visit_state(&format!("{prefix}.gcl2"), f);
    }
    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.gcl1.visit_state_mut(&format!("{prefix}.gcl1"), f);
        self.gcl2.visit_state_mut(&format!("{prefix}.gcl2"), f);
    }
}
