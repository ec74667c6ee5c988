//! The Encoder-Copy-Decoder stage network and the T-stage progressive
//! prediction framework built on it.
//!
//! Each stage maps a full-length pose sequence (history plus current guess)
//! to a refined full-length sequence. Stage 1 sees the last-pose padding;
//! every later stage sees the observed history concatenated with the future
//! part of the previous stage's output.

use crate::error::{Error, Result};
use crate::layers::{
    gcb_backward, gcb_forward, gcl_backward, gcl_forward, pointwise_backward, pointwise_forward,
    sdgcn_backward, sdgcn_forward, tdgcn_backward, tdgcn_forward, AdjInit, DenseGraphLayerParams,
    GcbCache, GcbParams, GclCache, GclParams, GraphCache, Mode, Param, PointwiseCache,
    PointwiseParams, TdgcnCache, VisitParams,
};
use crate::tensor::{concat_axis, Scalar, Tensor};
use rand_chacha::ChaCha8Rng;

/// Axis along which the encoder's feature map is duplicated before decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CopyAxis {
    #[default]
    Temporal,
    Spatial,
    Channel,
}

impl CopyAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "temporal" => Ok(CopyAxis::Temporal),
            "spatial" => Ok(CopyAxis::Spatial),
            "channel" => Ok(CopyAxis::Channel),
            _ => Err(Error::Config(format!(
                "copy_axis must be temporal|spatial|channel, got '{s}'"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CopyAxis::Temporal => "temporal",
            CopyAxis::Spatial => "spatial",
            CopyAxis::Channel => "channel",
        }
    }

    fn tensor_axis(&self) -> usize {
        match self {
            CopyAxis::Temporal => 1,
            CopyAxis::Spatial => 2,
            CopyAxis::Channel => 3,
        }
    }
}

/// Architecture hyper-parameters of the full multi-stage model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Stage count T.
    pub stages: usize,
    /// Observed frames T_h.
    pub observed: usize,
    /// Future frames T_f.
    pub future: usize,
    /// Joints per pose M.
    pub joints: usize,
    /// Coordinates per joint D (3 for 3D positions).
    pub coords: usize,
    /// Feature width F inside the stage networks.
    pub features: usize,
    pub encoder_gcbs: usize,
    pub decoder_gcbs: usize,
    /// How many extra copies of the encoder output feed the decoder (0, 1 or 3).
    pub copy_count: usize,
    pub copy_axis: CopyAxis,
    pub dropout: f64,
    pub adj_init: AdjInit,
    /// Reuse one parameter set for every stage instead of independent ones.
    pub share_stage_params: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stages: 4,
            observed: 10,
            future: 25,
            joints: 22,
            coords: 3,
            features: 16,
            encoder_gcbs: 1,
            decoder_gcbs: 2,
            copy_count: 1,
            copy_axis: CopyAxis::Temporal,
            dropout: 0.3,
            adj_init: AdjInit::Uniform,
            share_stage_params: false,
        }
    }
}

impl ModelConfig {
    /// Full sequence length L = T_h + T_f.
    pub fn seq_len(&self) -> usize {
        self.observed + self.future
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages < 1 {
            return Err(Error::Config("stages must be >= 1".into()));
        }
        if self.observed < 1 || self.future < 1 {
            return Err(Error::Config("observed and future frame counts must be >= 1".into()));
        }
        if self.joints < 1 || self.coords < 1 || self.features < 1 {
            return Err(Error::Config("joints, coords and features must be >= 1".into()));
        }
        if !matches!(self.copy_count, 0 | 1 | 3) {
            return Err(Error::Config(format!(
                "copy_count must be one of 0, 1, 3; got {}",
                self.copy_count
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Temporal extent inside the decoder ((1+copies)·L for temporal copy).
    pub fn decoder_temporal(&self) -> usize {
        match self.copy_axis {
            CopyAxis::Temporal => (1 + self.copy_count) * self.seq_len(),
            _ => self.seq_len(),
        }
    }

    /// Joint extent inside the decoder.
    pub fn decoder_joints(&self) -> usize {
        match self.copy_axis {
            CopyAxis::Spatial => (1 + self.copy_count) * self.joints,
            _ => self.joints,
        }
    }

    /// Feature width inside the decoder.
    pub fn decoder_features(&self) -> usize {
        match self.copy_axis {
            CopyAxis::Channel => (1 + self.copy_count) * self.features,
            _ => self.features,
        }
    }

    fn gcl_count(spatial: usize, temporal: usize, f_in: usize, f_out: usize) -> usize {
        spatial * spatial + f_in * f_out + temporal * temporal + f_out * f_out + 2 * f_out
    }

    /// Learnable parameter count, derived from the configuration alone. The
    /// test suite checks it against a brute-force enumeration of buffers.
    pub fn param_count(&self) -> usize {
        let (l, m, d, f) = (self.seq_len(), self.joints, self.coords, self.features);
        let (dt, dm, df) = (self.decoder_temporal(), self.decoder_joints(), self.decoder_features());
        let enc = Self::gcl_count(m, l, d, f)
            + self.encoder_gcbs * 2 * Self::gcl_count(m, l, f, f)
            + d * f;
        let dec = self.decoder_gcbs * 2 * Self::gcl_count(dm, dt, df, df)
            + (dm * dm + df * d)
            + (dt * dt + d * d)
            + df * d;
        let per_stage = enc + dec;
        if self.share_stage_params {
            per_stage
        } else {
            per_stage * self.stages
        }
    }
}

/// Parameters of one Encoder-Copy-Decoder stage.
#[derive(Clone, Debug)]
pub struct StageParams<S: Scalar> {
    pub enc_in_gcl: GclParams<S>,
    pub enc_gcbs: Vec<GcbParams<S>>,
    pub enc_proj: PointwiseParams<S>,
    pub dec_gcbs: Vec<GcbParams<S>>,
    pub dec_out_sdgcn: DenseGraphLayerParams<S>,
    pub dec_out_tdgcn: DenseGraphLayerParams<S>,
    pub dec_proj: PointwiseParams<S>,
}

impl<S: Scalar> StageParams<S> {
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (l, m, d, f) = (cfg.seq_len(), cfg.joints, cfg.coords, cfg.features);
        let (dt, dm, df) = (cfg.decoder_temporal(), cfg.decoder_joints(), cfg.decoder_features());
        Self {
            enc_in_gcl: GclParams::init(m, l, d, f, cfg.dropout, cfg.adj_init, rng),
            enc_gcbs: (0..cfg.encoder_gcbs)
                .map(|_| GcbParams::init(m, l, f, cfg.dropout, cfg.adj_init, rng))
                .collect(),
            enc_proj: PointwiseParams::init(d, f, false, rng),
            dec_gcbs: (0..cfg.decoder_gcbs)
                .map(|_| GcbParams::init(dm, dt, df, cfg.dropout, cfg.adj_init, rng))
                .collect(),
            dec_out_sdgcn: DenseGraphLayerParams::init(dm, df, d, cfg.adj_init, rng),
            dec_out_tdgcn: DenseGraphLayerParams::init(dt, d, d, cfg.adj_init, rng),
            dec_proj: PointwiseParams::init(df, d, false, rng),
        }
    }

    pub fn zeroed(cfg: &ModelConfig) -> Self {
        let (l, m, d, f) = (cfg.seq_len(), cfg.joints, cfg.coords, cfg.features);
        let (dt, dm, df) = (cfg.decoder_temporal(), cfg.decoder_joints(), cfg.decoder_features());
        Self {
            enc_in_gcl: GclParams::zeroed(m, l, d, f),
            enc_gcbs: (0..cfg.encoder_gcbs).map(|_| GcbParams::zeroed(m, l, f)).collect(),
            enc_proj: PointwiseParams::zeroed(d, f),
            dec_gcbs: (0..cfg.decoder_gcbs).map(|_| GcbParams::zeroed(dm, dt, df)).collect(),
            dec_out_sdgcn: DenseGraphLayerParams::zeroed(dm, df, d),
            dec_out_tdgcn: DenseGraphLayerParams::zeroed(dt, d, d),
            dec_proj: PointwiseParams::zeroed(df, d),
        }
    }

    pub fn cast<T: Scalar>(&self) -> StageParams<T> {
        StageParams {
            enc_in_gcl: self.enc_in_gcl.cast(),
            enc_gcbs: self.enc_gcbs.iter().map(GcbParams::cast).collect(),
            enc_proj: self.enc_proj.cast(),
            dec_gcbs: self.dec_gcbs.iter().map(GcbParams::cast).collect(),
            dec_out_sdgcn: self.dec_out_sdgcn.cast(),
            dec_out_tdgcn: self.dec_out_tdgcn.cast(),
            dec_proj: self.dec_proj.cast(),
        }
    }
}

impl<S: Scalar> VisitParams<S> for StageParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        self.enc_in_gcl.visit(&format!("{prefix}.enc_in"), f);
        for (i, g) in self.enc_gcbs.iter().enumerate() {
            g.visit(&format!("{prefix}.enc_gcb{i}"), f);
        }
        self.enc_proj.visit(&format!("{prefix}.enc_proj"), f);
        for (i, g) in self.dec_gcbs.iter().enumerate() {
            g.visit(&format!("{prefix}.dec_gcb{i}"), f);
        }
        self.dec_out_sdgcn.visit(&format!("{prefix}.dec_out_sdgcn"), f);
        self.dec_out_tdgcn.visit(&format!("{prefix}.dec_out_tdgcn"), f);
        self.dec_proj.visit(&format!("{prefix}.dec_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.enc_in_gcl.visit_mut(&format!("{prefix}.enc_in"), f);
        for (i, g) in self.enc_gcbs.iter_mut().enumerate() {
            g.visit_mut(&format!("{prefix}.enc_gcb{i}"), f);
        }
        self.enc_proj.visit_mut(&format!("{prefix}.enc_proj"), f);
        for (i, g) in self.dec_gcbs.iter_mut().enumerate() {
            g.visit_mut(&format!("{prefix}.dec_gcb{i}"), f);
        }
        self.dec_out_sdgcn.visit_mut(&format!("{prefix}.dec_out_sdgcn"), f);
        self.dec_out_tdgcn.visit_mut(&format!("{prefix}.dec_out_tdgcn"), f);
        self.dec_proj.visit_mut(&format!("{prefix}.dec_proj"), f);
    }

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        self.enc_in_gcl.visit_state(&format!("{prefix}.enc_in"), f);
        for (i, g) in self.enc_gcbs.iter().enumerate() {
            g.visit_state(&format!("{prefix}.enc_gcb{i}"), f);
        }
        for (i, g) in self.dec_gcbs.iter().enumerate() {
            g.visit_state(&format!("{prefix}.dec_gcb{i}"), f);
        }
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.enc_in_gcl.visit_state_mut(&format!("{prefix}.enc_in"), f);
        for (i, g) in self.enc_gcbs.iter_mut().enumerate() {
            g.visit_state_mut(&format!("{prefix}.enc_gcb{i}"), f);
        }
        for (i, g) in self.dec_gcbs.iter_mut().enumerate() {
            g.visit_state_mut(&format!("{prefix}.dec_gcb{i}"), f);
        }
    }
}

/// The full T-stage parameter tree.
#[derive(Clone, Debug)]
pub struct ModelParams<S: Scalar> {
    pub config: ModelConfig,
    stages: Vec<StageParams<S>>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn init(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let n = if config.share_stage_params { 1 } else { config.stages };
        let stages = (0..n).map(|_| StageParams::init(&config, rng)).collect();
        Ok(Self { config, stages })
    }

    /// All-zero parameter tree with the right shapes; checkpoint loading
    /// fills it in.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let n = if config.share_stage_params { 1 } else { config.stages };
        let stages = (0..n).map(|_| StageParams::zeroed(&config)).collect();
        Ok(Self { config, stages })
    }

    /// Parameters driving stage `i` (all stages share index 0 when sharing
    /// is enabled).
    pub fn stage(&self, i: usize) -> &StageParams<S> {
        if self.config.share_stage_params {
            &self.stages[0]
        } else {
            &self.stages[i]
        }
    }

    pub fn stage_mut(&mut self, i: usize) -> &mut StageParams<S> {
        if self.config.share_stage_params {
            &mut self.stages[0]
        } else {
            &mut self.stages[i]
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Param<S>)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&format!("stage{i}"), f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&format!("stage{i}"), f);
        }
    }

    pub fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit_state(&format!("stage{i}"), f);
        }
    }

    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_state_mut(&format!("stage{i}"), f);
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    /// Learnable parameter count by enumeration.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.numel());
        n
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            config: self.config.clone(),
            stages: self.stages.iter().map(StageParams::cast).collect(),
        }
    }

    /// All learnable parameter values, concatenated in visit order.
    pub fn flatten_params(&self) -> Vec<S> {
        let mut v = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |_, p| v.extend_from_slice(p.value.data()));
        v
    }

    /// All gradients, concatenated in the same order.
    pub fn flatten_grads(&self) -> Vec<S> {
        let mut v = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |_, p| v.extend_from_slice(p.grad.data()));
        v
    }

    /// Writes a flat vector back into the parameter buffers.
    pub fn set_flattened_params(&mut self, vals: &[S]) -> Result<()> {
        if vals.len() != self.param_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} flattened parameters, got {}",
                self.param_count(),
                vals.len()
            )));
        }
        let mut off = 0;
        self.visit_params_mut(&mut |_, p| {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&vals[off..off + n]);
            off += n;
        });
        Ok(())
    }
}

pub struct EncoderCache<S: Scalar> {
    proj: PointwiseCache<S>,
    gcl_in: GclCache<S>,
    gcbs: Vec<GcbCache<S>>,
}

/// Projects the input from pose space into feature space with a global
/// residual: `out = enc_proj(x) + GCBs(GCL_in(x))`.
pub fn encoder_forward<S: Scalar>(
    p: &mut StageParams<S>,
    x: &Tensor<S>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<S>, EncoderCache<S>)> {
    let (residual, proj) = pointwise_forward(&p.enc_proj, x)?;
    let (mut h, gcl_in) = gcl_forward(&mut p.enc_in_gcl, x, mode, rng)?;
    let mut gcbs = Vec::with_capacity(p.enc_gcbs.len());
    for gcb in p.enc_gcbs.iter_mut() {
        let (next, cache) = gcb_forward(gcb, &h, mode, rng)?;
        h = next;
        gcbs.push(cache);
    }
    Ok((residual.add(&h)?, EncoderCache { proj, gcl_in, gcbs }))
}

pub fn encoder_backward<S: Scalar>(
    p: &mut StageParams<S>,
    cache: &EncoderCache<S>,
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    let mut g = grad_out.clone();
    for (gcb, c) in p.enc_gcbs.iter_mut().zip(&cache.gcbs).rev() {
        g = gcb_backward(gcb, c, &g)?;
    }
    let grad_x_body = gcl_backward(&mut p.enc_in_gcl, &cache.gcl_in, &g)?;
    let grad_x_proj = pointwise_backward(&mut p.enc_proj, &cache.proj, grad_out)?;
    grad_x_body.add(&grad_x_proj)
}

/// Appends `count` copies of the feature map along the chosen axis.
pub fn copy_features<S: Scalar>(x: &Tensor<S>, count: usize, axis: CopyAxis) -> Result<Tensor<S>> {
    if !matches!(count, 0 | 1 | 3) {
        return Err(Error::InvalidArgument(format!(
            "copy count must be one of 0, 1, 3; got {count}"
        )));
    }
    if x.rank() != 4 {
        return Err(Error::InvalidArgument("copy_features needs a rank-4 tensor".into()));
    }
    let mut out = x.clone();
    for _ in 0..count {
        out = concat_axis(&out, x, axis.tensor_axis())?;
    }
    Ok(out)
}

/// Gradient of [`copy_features`]: the copies' cotangents sum back onto the
/// original block.
fn copy_features_backward<S: Scalar>(
    grad: &Tensor<S>,
    count: usize,
    axis: CopyAxis,
    original_extent: usize,
) -> Result<Tensor<S>> {
    let ax = axis.tensor_axis();
    let mut acc = grad.narrow(ax, 0, original_extent)?;
    for i in 1..=count {
        acc = acc.add(&grad.narrow(ax, i * original_extent, original_extent)?)?;
    }
    Ok(acc)
}

pub struct DecoderCache<S: Scalar> {
    proj: PointwiseCache<S>,
    gcbs: Vec<GcbCache<S>>,
    out_s: GraphCache<S>,
    out_t: TdgcnCache<S>,
}

/// Residual decoder: GCBs in feature space, then an S-DGCN/T-DGCN pair that
/// projects back into pose space, plus a pointwise residual of the input.
pub fn decoder_forward<S: Scalar>(
    p: &mut StageParams<S>,
    h: &Tensor<S>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<S>, DecoderCache<S>)> {
    let (residual, proj) = pointwise_forward(&p.dec_proj, h)?;
    let mut b = h.clone();
    let mut gcbs = Vec::with_capacity(p.dec_gcbs.len());
    for gcb in p.dec_gcbs.iter_mut() {
        let (next, cache) = gcb_forward(gcb, &b, mode, rng)?;
        b = next;
        gcbs.push(cache);
    }
    let (b, out_s) = sdgcn_forward(&p.dec_out_sdgcn, &b)?;
    let (b, out_t) = tdgcn_forward(&p.dec_out_tdgcn, &b)?;
    Ok((residual.add(&b)?, DecoderCache { proj, gcbs, out_s, out_t }))
}

pub fn decoder_backward<S: Scalar>(
    p: &mut StageParams<S>,
    cache: &DecoderCache<S>,
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    let g = tdgcn_backward(&mut p.dec_out_tdgcn, &cache.out_t, grad_out)?;
    let mut g = sdgcn_backward(&mut p.dec_out_sdgcn, &cache.out_s, &g)?;
    for (gcb, c) in p.dec_gcbs.iter_mut().zip(&cache.gcbs).rev() {
        g = gcb_backward(gcb, c, &g)?;
    }
    let grad_h_proj = pointwise_backward(&mut p.dec_proj, &cache.proj, grad_out)?;
    g.add(&grad_h_proj)
}

pub struct StageCache<S: Scalar> {
    enc: EncoderCache<S>,
    dec: DecoderCache<S>,
    enc_out_extent: usize,
    dec_out_shape: Vec<usize>,
}

/// One full stage pass: encode, duplicate features, decode, and keep the
/// front L frames (front M joints for a spatial copy) of the result.
pub fn stage_forward<S: Scalar>(
    cfg: &ModelConfig,
    p: &mut StageParams<S>,
    x: &Tensor<S>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<S>, StageCache<S>)> {
    let (enc_out, enc) = encoder_forward(p, x, mode, rng)?;
    let ax = cfg.copy_axis.tensor_axis();
    let enc_out_extent = enc_out.shape()[ax];
    let h = copy_features(&enc_out, cfg.copy_count, cfg.copy_axis)?;
    let (dec_out, dec) = decoder_forward(p, &h, mode, rng)?;
    let dec_out_shape = dec_out.shape().to_vec();
    // The channel axis is already collapsed to pose width by the projections.
    let out = match cfg.copy_axis {
        CopyAxis::Channel => dec_out,
        _ => {
            if cfg.copy_count == 0 {
                dec_out
            } else {
                dec_out.narrow(ax, 0, x.shape()[ax])?
            }
        }
    };
    Ok((out, StageCache { enc, dec, enc_out_extent, dec_out_shape }))
}

pub fn stage_backward<S: Scalar>(
    cfg: &ModelConfig,
    p: &mut StageParams<S>,
    cache: &StageCache<S>,
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    // Undo the truncation: frames (or joints) we dropped get zero cotangent.
    let ax = cfg.copy_axis.tensor_axis();
    let grad_dec = if grad_out.shape() == cache.dec_out_shape.as_slice() {
        grad_out.clone()
    } else {
        let mut padded = Tensor::zeros(&cache.dec_out_shape);
        scatter_front(&mut padded, grad_out, ax)?;
        padded
    };
    let grad_h = decoder_backward(p, &cache.dec, &grad_dec)?;
    let grad_enc = copy_features_backward(&grad_h, cfg.copy_count, cfg.copy_axis, cache.enc_out_extent)?;
    encoder_backward(p, &cache.enc, &grad_enc)
}

/// Writes `src` into the leading block of `dst` along `axis`.
fn scatter_front<S: Scalar>(dst: &mut Tensor<S>, src: &Tensor<S>, axis: usize) -> Result<()> {
    let outer: usize = dst.shape()[..axis].iter().product();
    let inner: usize = dst.shape()[axis + 1..].iter().product();
    let (de, se) = (dst.shape()[axis], src.shape()[axis]);
    if se > de || src.len() != outer * se * inner {
        return Err(Error::shape("scatter_front", format!("{:?}", dst.shape()), format!("{:?}", src.shape())));
    }
    for o in 0..outer {
        let s = o * se * inner;
        let d = o * de * inner;
        dst.data_mut()[d..d + se * inner].copy_from_slice(&src.data()[s..s + se * inner]);
    }
    Ok(())
}

pub struct MultiStageCache<S: Scalar> {
    stage_caches: Vec<StageCache<S>>,
    /// The full-length input each stage saw; tests assert the history
    /// replacement invariant on these.
    pub stage_inputs: Vec<Tensor<S>>,
}

/// Runs all T stages on an already padded (B, L, M, D) input. Stage i ≥ 2
/// sees the observed history frames (taken from the padded input) followed
/// by the future part of the previous stage's output.
pub fn multistage_forward_padded<S: Scalar>(
    m: &mut ModelParams<S>,
    padded: &Tensor<S>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Tensor<S>>, MultiStageCache<S>)> {
    let cfg = m.config.clone();
    let (t_h, l) = (cfg.observed, cfg.seq_len());
    if padded.rank() != 4 || padded.shape()[1] != l || padded.shape()[2] != cfg.joints || padded.shape()[3] != cfg.coords {
        return Err(Error::shape(
            "multistage input",
            format!("(B,{},{},{})", l, cfg.joints, cfg.coords),
            format!("{:?}", padded.shape()),
        ));
    }
    let obs = padded.narrow(1, 0, t_h)?;
    let mut outputs = Vec::with_capacity(cfg.stages);
    let mut stage_caches = Vec::with_capacity(cfg.stages);
    let mut stage_inputs = Vec::with_capacity(cfg.stages);
    let mut input = padded.clone();
    for i in 0..cfg.stages {
        stage_inputs.push(input.clone());
        let (out, cache) = stage_forward(&cfg, m.stage_mut(i), &input, mode, rng)?;
        stage_caches.push(cache);
        if i + 1 < cfg.stages {
            let future = out.narrow(1, t_h, cfg.future)?;
            input = concat_axis(&obs, &future, 1)?;
        }
        outputs.push(out);
    }
    Ok((outputs, MultiStageCache { stage_caches, stage_inputs }))
}

/// Pads a (B, T_h, M, D) observation batch with its last pose and runs all
/// stages. Returns the T full-length refined sequences in stage order.
pub fn multistage_forward<S: Scalar>(
    m: &mut ModelParams<S>,
    obs: &Tensor<S>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Tensor<S>>, MultiStageCache<S>)> {
    if obs.rank() != 4 || obs.shape()[1] != m.config.observed {
        return Err(Error::shape(
            "multistage observation",
            format!("(B,{},M,D)", m.config.observed),
            format!("{:?}", obs.shape()),
        ));
    }
    let padded = crate::sequence::pad_last_pose_batch(obs, m.config.future)?;
    multistage_forward_padded(m, &padded, mode, rng)
}

/// Backpropagates per-stage output cotangents through the whole chain,
/// accumulating parameter gradients. `None` entries mean a stage receives no
/// direct supervision; its parameters still get gradient through the next
/// stage's input. Gradients on the replaced history frames are dropped, and
/// the gradient with respect to the stage-1 padding is discarded (it is
/// data, not a parameter).
pub fn multistage_backward<S: Scalar>(
    m: &mut ModelParams<S>,
    cache: &MultiStageCache<S>,
    grad_outputs: &[Option<Tensor<S>>],
) -> Result<()> {
    let cfg = m.config.clone();
    if grad_outputs.len() != cfg.stages {
        return Err(Error::InvalidArgument(format!(
            "expected {} stage cotangents, got {}",
            cfg.stages,
            grad_outputs.len()
        )));
    }
    let (t_h, t_f) = (cfg.observed, cfg.future);
    let mut carried: Option<Tensor<S>> = None;
    for i in (0..cfg.stages).rev() {
        let mut g = match (&grad_outputs[i], carried.take()) {
            (Some(direct), Some(chain)) => direct.add(&chain)?,
            (Some(direct), None) => direct.clone(),
            (None, Some(chain)) => chain,
            (None, None) => continue, // nothing downstream, nothing direct
        };
        let grad_in = stage_backward(&cfg, m.stage_mut(i), &cache.stage_caches[i], &g)?;
        if i > 0 {
            // Only the future part of the previous output feeds this stage.
            let future_grad = grad_in.narrow(1, t_h, t_f)?;
            g = Tensor::zeros(grad_in.shape());
            let mut full = g;
            scatter_at(&mut full, &future_grad, 1, t_h)?;
            carried = Some(full);
        }
    }
    Ok(())
}

/// Writes `src` into `dst` along `axis` starting at `offset`.
fn scatter_at<S: Scalar>(dst: &mut Tensor<S>, src: &Tensor<S>, axis: usize, offset: usize) -> Result<()> {
    let outer: usize = dst.shape()[..axis].iter().product();
    let inner: usize = dst.shape()[axis + 1..].iter().product();
    let (de, se) = (dst.shape()[axis], src.shape()[axis]);
    if offset + se > de {
        return Err(Error::shape("scatter_at", format!("{:?}", dst.shape()), format!("{:?}", src.shape())));
    }
    for o in 0..outer {
        let s = o * se * inner;
        let d = (o * de + offset) * inner;
        dst.data_mut()[d..d + se * inner].copy_from_slice(&src.data()[s..s + se * inner]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            stages: 2,
            observed: 3,
            future: 3,
            joints: 3,
            coords: 2,
            features: 4,
            encoder_gcbs: 1,
            decoder_gcbs: 1,
            copy_count: 1,
            copy_axis: CopyAxis::Temporal,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn encoder_shape_and_residual_isolation() {
        let cfg = ModelConfig { joints: 5, coords: 3, observed: 4, future: 6, ..tiny_cfg() };
        let mut r = rng(1);
        let mut p = StageParams::<f64>::init(&cfg, &mut r);
        let x = rand_tensor(&[2, cfg.seq_len(), 5, 3], &mut r);
        let (out, _) = encoder_forward(&mut p, &x, Mode::Eval, &mut rng(0)).unwrap();
        assert_eq!(out.shape(), &[2, cfg.seq_len(), 5, cfg.features]);

        // Zero the GCL/GCB stack: only the pointwise residual survives.
        p.enc_in_gcl.bn.gamma.value.fill(0.0);
        p.enc_in_gcl.bn.beta.value.fill(0.0);
        let (out, _) = encoder_forward(&mut p, &x, Mode::Eval, &mut rng(0)).unwrap();
        let (proj_only, _) = pointwise_forward(&p.enc_proj, &x).unwrap();
        assert_eq!(out, proj_only);
    }

    #[test]
    fn copy_features_variants() {
        let mut r = rng(2);
        let x = rand_tensor(&[2, 4, 3, 5], &mut r);
        let once = copy_features(&x, 1, CopyAxis::Temporal).unwrap();
        assert_eq!(once.shape(), &[2, 8, 3, 5]);
        assert_eq!(once.narrow(1, 0, 4).unwrap(), x);
        assert_eq!(once.narrow(1, 4, 4).unwrap(), x);
        assert_eq!(copy_features(&x, 0, CopyAxis::Temporal).unwrap(), x);
        let thrice = copy_features(&x, 3, CopyAxis::Temporal).unwrap();
        assert_eq!(thrice.shape(), &[2, 16, 3, 5]);
        assert_eq!(copy_features(&x, 1, CopyAxis::Spatial).unwrap().shape(), &[2, 4, 6, 5]);
        assert_eq!(copy_features(&x, 1, CopyAxis::Channel).unwrap().shape(), &[2, 4, 3, 10]);
        assert!(copy_features(&x, 2, CopyAxis::Temporal).is_err());
    }

    #[test]
    fn decoder_shape_and_residual_isolation() {
        let cfg = ModelConfig { joints: 4, coords: 3, ..tiny_cfg() };
        let mut r = rng(3);
        let mut p = StageParams::<f64>::init(&cfg, &mut r);
        let h = rand_tensor(&[2, cfg.decoder_temporal(), 4, cfg.features], &mut r);
        let (out, _) = decoder_forward(&mut p, &h, Mode::Eval, &mut rng(0)).unwrap();
        assert_eq!(out.shape(), &[2, cfg.decoder_temporal(), 4, 3]);

        // Kill the body by zeroing the final temporal projection weight.
        p.dec_out_tdgcn.weight.value.fill(0.0);
        let (out, _) = decoder_forward(&mut p, &h, Mode::Eval, &mut rng(0)).unwrap();
        let (proj_only, _) = pointwise_forward(&p.dec_proj, &h).unwrap();
        assert_eq!(out, proj_only);
    }

    #[test]
    fn stage_preserves_shape_for_every_copy_axis() {
        let mut r = rng(4);
        for (axis, count) in [
            (CopyAxis::Temporal, 1),
            (CopyAxis::Temporal, 0),
            (CopyAxis::Temporal, 3),
            (CopyAxis::Spatial, 1),
            (CopyAxis::Channel, 1),
        ] {
            let cfg = ModelConfig { copy_axis: axis, copy_count: count, ..tiny_cfg() };
            let mut p = StageParams::<f64>::init(&cfg, &mut r);
            let x = rand_tensor(&[2, cfg.seq_len(), cfg.joints, cfg.coords], &mut r);
            let (out, _) = stage_forward(&cfg, &mut p, &x, Mode::Eval, &mut rng(0)).unwrap();
            assert_eq!(out.shape(), x.shape(), "axis {axis:?} count {count}");
        }
    }

    #[test]
    fn stage_eval_is_deterministic() {
        let cfg = ModelConfig { dropout: 0.5, ..tiny_cfg() };
        let mut r = rng(5);
        let p = StageParams::<f64>::init(&cfg, &mut r);
        let x = rand_tensor(&[1, cfg.seq_len(), cfg.joints, cfg.coords], &mut r);
        let (o1, _) = stage_forward(&cfg, &mut p.clone(), &x, Mode::Eval, &mut rng(1)).unwrap();
        let (o2, _) = stage_forward(&cfg, &mut p.clone(), &x, Mode::Eval, &mut rng(2)).unwrap();
        assert_eq!(o1, o2);
    }

    #[test]
    fn multistage_single_stage_degenerates_to_stage_forward() {
        let cfg = ModelConfig { stages: 1, ..tiny_cfg() };
        let mut r = rng(6);
        let mut m = ModelParams::<f64>::init(cfg.clone(), &mut r).unwrap();
        let obs = rand_tensor(&[2, cfg.observed, cfg.joints, cfg.coords], &mut r);
        let (outs, _) = multistage_forward(&mut m, &obs, Mode::Eval, &mut rng(0)).unwrap();
        assert_eq!(outs.len(), 1);
        let padded = crate::sequence::pad_last_pose_batch(&obs, cfg.future).unwrap();
        let (direct, _) =
            stage_forward(&cfg, m.stage_mut(0), &padded, Mode::Eval, &mut rng(0)).unwrap();
        assert_eq!(outs[0], direct);
    }

    #[test]
    fn multistage_history_replacement_invariant() {
        let cfg = ModelConfig { stages: 4, ..tiny_cfg() };
        let mut r = rng(7);
        let mut m = ModelParams::<f64>::init(cfg.clone(), &mut r).unwrap();
        let obs = rand_tensor(&[2, cfg.observed, cfg.joints, cfg.coords], &mut r);
        let (outs, cache) = multistage_forward(&mut m, &obs, Mode::Eval, &mut rng(0)).unwrap();
        assert_eq!(outs.len(), 4);
        for out in &outs {
            assert_eq!(out.shape(), &[2, cfg.seq_len(), cfg.joints, cfg.coords]);
        }
        for input in &cache.stage_inputs {
            // Observed history is never overwritten by predictions (bitwise).
            assert_eq!(input.narrow(1, 0, cfg.observed).unwrap(), obs);
        }
    }

    #[test]
    fn param_count_formula_matches_enumeration() {
        let mut r = rng(8);
        for cfg in [
            tiny_cfg(),
            ModelConfig::default(),
            ModelConfig { copy_axis: CopyAxis::Spatial, ..ModelConfig::default() },
            ModelConfig { copy_axis: CopyAxis::Channel, ..ModelConfig::default() },
            ModelConfig { copy_count: 0, ..tiny_cfg() },
            ModelConfig { share_stage_params: true, ..tiny_cfg() },
        ] {
            let m = ModelParams::<f32>::init(cfg.clone(), &mut r).unwrap();
            assert_eq!(cfg.param_count(), m.param_count(), "{cfg:?}");
        }
    }

    #[test]
    fn multistage_backward_matches_finite_differences() {
        let cfg = tiny_cfg();
        let mut r = rng(9);
        let mut m = ModelParams::<f64>::init(cfg.clone(), &mut r).unwrap();
        let obs = rand_tensor(&[2, cfg.observed, cfg.joints, cfg.coords], &mut r);
        // Random per-stage cotangents make every gradient path visible.
        let cots: Vec<Option<Tensor<f64>>> = (0..cfg.stages)
            .map(|_| Some(rand_tensor(&[2, cfg.seq_len(), cfg.joints, cfg.coords], &mut r)))
            .collect();

        m.zero_grads();
        let (_, cache) = multistage_forward(&mut m, &obs, Mode::Eval, &mut rng(0)).unwrap();
        multistage_backward(&mut m, &cache, &cots).unwrap();
        let analytic = m.flatten_grads();

        let base = m.flatten_params();
        let loss = |m: &ModelParams<f64>, vals: &[f64]| -> f64 {
            let mut q = m.clone();
            q.set_flattened_params(vals).unwrap();
            let (outs, _) = multistage_forward(&mut q, &obs, Mode::Eval, &mut rng(0)).unwrap();
            outs.iter()
                .zip(&cots)
                .map(|(o, c)| {
                    o.data().iter().zip(c.as_ref().unwrap().data()).map(|(a, b)| a * b).sum::<f64>()
                })
                .sum()
        };
        let h = 1e-5;
        // Sample coordinates across the whole tree.
        let stride = (base.len() / 257).max(1);
        for k in (0..base.len()).step_by(stride) {
            let mut p = base.clone();
            p[k] = base[k] + h;
            let fp = loss(&m, &p);
            p[k] = base[k] - h;
            let fm = loss(&m, &p);
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(rel <= 1e-5, "coord {k}: analytic {a} vs fd {fd} (rel {rel:.3e})");
        }
    }

    #[test]
    fn multistage_backward_without_intermediate_cotangents() {
        // Final-only supervision still reaches stage-0 parameters through
        // the input chain.
        let cfg = tiny_cfg();
        let mut r = rng(10);
        let mut m = ModelParams::<f64>::init(cfg.clone(), &mut r).unwrap();
        let obs = rand_tensor(&[1, cfg.observed, cfg.joints, cfg.coords], &mut r);
        let cot = rand_tensor(&[1, cfg.seq_len(), cfg.joints, cfg.coords], &mut r);
        m.zero_grads();
        let (_, cache) = multistage_forward(&mut m, &obs, Mode::Eval, &mut rng(0)).unwrap();
        multistage_backward(&mut m, &cache, &[None, Some(cot)]).unwrap();
        let mut stage0_grad_norm = 0.0;
        m.stage(0).visit("stage0", &mut |_, p| {
            stage0_grad_norm += p.grad.data().iter().map(|g| g * g).sum::<f64>();
        });
        assert!(stage0_grad_norm > 0.0);
    }
}
