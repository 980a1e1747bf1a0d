//! Long-term/short-term residual vector quantization.
//!
//! Features are split into a long-term stream (one code set per `step`
//! frames) and a per-frame short-term residual stream, each quantized by its
//! own RVQ stack. Extractors come in two flavors: `AvgPooling` (pooling,
//! subtraction, and nearest-neighbor upsampling) and `Conv` (learned strided
//! and pointwise convolutions over concatenated features).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{ModelWeights, Tensor};
use crate::num::{scalar, Scalar};
use crate::tensor::{avg_pool, conv1d, repeat_frames, ConvSpec, FeatureMap};
use crate::Sample;

/// Codebook size limits: powers of two that fit the bitstream's 16-bit
/// header fields.
pub const MIN_CODEBOOK: usize = 2;
pub const MAX_CODEBOOK: usize = 32768;

/// `M` codewords of a shared dimension, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<S: Scalar = Sample> {
    dim: usize,
    data: Vec<S>,
}

impl<S: Scalar> Codebook<S> {
    pub fn new(dim: usize, data: Vec<S>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("codebook dimension must be positive"));
        }
        if data.is_empty() || data.len() % dim != 0 {
            return Err(Error::config(format!(
                "codebook data length {} is not a positive multiple of dim {}",
                data.len(),
                dim
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("codebook entries must be finite"));
        }
        Ok(Self { dim, data })
    }

    pub fn from_entries(entries: &[Vec<S>]) -> Result<Self> {
        let dim = entries.first().map(|e| e.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(entries.len() * dim);
        for e in entries {
            if e.len() != dim {
                return Err(Error::config("codebook entries must share one dimension"));
            }
            data.extend_from_slice(e);
        }
        Codebook::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires at least one entry
    }

    pub fn entry(&self, i: usize) -> &[S] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Cascade of codebooks sharing one dimension; layer `k` quantizes the
/// residual left by layers `< k`.
#[derive(Debug, Clone, PartialEq)]
pub struct RvqStack<S: Scalar = Sample> {
    layers: Vec<Codebook<S>>,
}

impl<S: Scalar> RvqStack<S> {
    pub fn new(layers: Vec<Codebook<S>>) -> Result<Self> {
        if let Some(first) = layers.first() {
            if layers.iter().any(|l| l.dim() != first.dim()) {
                return Err(Error::config("all stack layers must share one dimension"));
            }
        }
        Ok(Self { layers })
    }

    pub fn empty() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn layers(&self) -> &[Codebook<S>] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.layers.first().map(|l| l.dim())
    }

    /// The stack truncated to its first `layers` layers.
    pub fn truncated(&self, layers: usize) -> Self {
        Self {
            layers: self.layers[..layers.min(self.layers.len())].to_vec(),
        }
    }
}

/// Layer count and codebook size of one quantizer stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub layers: usize,
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractorVariant {
    AvgPooling,
    Conv,
}

/// Quantizer hyperparameters: the long-term step `N`, the feature frame
/// rate, and the two stage shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct LsrvqConfig {
    /// Frames summarized by one long-term code block (N).
    pub step: usize,
    /// Feature frames per second (S).
    pub frame_rate: usize,
    pub lt: StageConfig,
    pub st: StageConfig,
    pub extractor: ExtractorVariant,
    pub beam_width: usize,
}

impl LsrvqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step == 0 {
            return Err(Error::config("quantization step must be at least 1"));
        }
        if self.frame_rate == 0 {
            return Err(Error::config("frame_rate must be positive"));
        }
        if self.beam_width == 0 {
            return Err(Error::config("beam_width must be at least 1"));
        }
        for (name, stage) in [("lt", &self.lt), ("st", &self.st)] {
            if !stage.size.is_power_of_two()
                || stage.size < MIN_CODEBOOK
                || stage.size > MAX_CODEBOOK
            {
                return Err(Error::config(format!(
                    "{name} codebook size {} must be a power of two in {}..={}",
                    stage.size, MIN_CODEBOOK, MAX_CODEBOOK
                )));
            }
            if stage.layers > u8::MAX as usize {
                return Err(Error::config(format!(
                    "{name} layer count {} exceeds the stream header limit",
                    stage.layers
                )));
            }
        }
        if self.step > u8::MAX as usize {
            return Err(Error::config("quantization step exceeds the stream header limit"));
        }
        Ok(())
    }
}

/// Header-level shape of a coded stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamLayout {
    pub step: usize,
    pub lt_layers: usize,
    pub lt_size: usize,
    pub st_layers: usize,
    pub st_size: usize,
}

impl StreamLayout {
    pub fn from_config(cfg: &LsrvqConfig) -> Self {
        StreamLayout {
            step: cfg.step,
            lt_layers: cfg.lt.layers,
            lt_size: cfg.lt.size,
            st_layers: cfg.st.layers,
            st_size: cfg.st.size,
        }
    }

    pub fn blocks(&self, frames: usize) -> usize {
        frames.div_ceil(self.step)
    }

    pub fn padded_frames(&self, frames: usize) -> usize {
        self.blocks(frames) * self.step
    }
}

/// Quantizer output: per-block long-term codes, per-frame short-term codes,
/// and the true frame count the decoder should trim to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodedStream {
    pub layout: StreamLayout,
    pub frames: usize,
    /// One vector of `lt_layers` indices per long-term block.
    pub lt_codes: Vec<Vec<usize>>,
    /// One vector of `st_layers` indices per padded frame.
    pub st_codes: Vec<Vec<usize>>,
}

impl CodedStream {
    pub fn validate(&self) -> Result<()> {
        if self.layout.step == 0 {
            return Err(Error::config("stream layout step must be positive"));
        }
        let blocks = self.layout.blocks(self.frames);
        if self.lt_codes.len() != blocks {
            return Err(Error::config(format!(
                "{} LT code blocks for {} frames, expected {}",
                self.lt_codes.len(),
                self.frames,
                blocks
            )));
        }
        if self.st_codes.len() != self.layout.padded_frames(self.frames) {
            return Err(Error::config(format!(
                "{} ST code frames, expected padded count {}",
                self.st_codes.len(),
                self.layout.padded_frames(self.frames)
            )));
        }
        for block in &self.lt_codes {
            if block.len() != self.layout.lt_layers {
                return Err(Error::config("LT block has wrong layer count"));
            }
            if block.iter().any(|c| *c >= self.layout.lt_size) {
                return Err(Error::Encoding("LT code index out of codebook range".into()));
            }
        }
        for frame in &self.st_codes {
            if frame.len() != self.layout.st_layers {
                return Err(Error::config("ST frame has wrong layer count"));
            }
            if frame.iter().any(|c| *c >= self.layout.st_size) {
                return Err(Error::Encoding("ST code index out of codebook range".into()));
            }
        }
        Ok(())
    }
}

fn squared_dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc += d * d;
    }
    acc
}

fn squared_norm<S: Scalar>(a: &[S]) -> S {
    let mut acc = S::zero();
    for x in a {
        acc += *x * *x;
    }
    acc
}

/// Nearest codeword by squared Euclidean distance; ties go to the lowest
/// index. Returns `(index, codeword, residual)`.
pub fn vq_nearest<S: Scalar>(cb: &Codebook<S>, v: &[S]) -> Result<(usize, Vec<S>, Vec<S>)> {
    if v.len() != cb.dim() {
        return Err(Error::config(format!(
            "vector dimension {} does not match codebook dimension {}",
            v.len(),
            cb.dim()
        )));
    }
    let mut best = 0usize;
    let mut best_dist = squared_dist(cb.entry(0), v);
    for i in 1..cb.len() {
        let d = squared_dist(cb.entry(i), v);
        if d < best_dist {
            best = i;
            best_dist = d;
        }
    }
    let codeword = cb.entry(best).to_vec();
    let residual: Vec<S> = v.iter().zip(&codeword).map(|(x, c)| *x - *c).collect();
    Ok((best, codeword, residual))
}

fn greedy_encode<S: Scalar>(stack: &RvqStack<S>, v: &[S]) -> Result<(Vec<usize>, Vec<S>)> {
    let mut codes = Vec::with_capacity(stack.len());
    let mut residual = v.to_vec();
    for layer in stack.layers() {
        let (idx, _, next) = vq_nearest(layer, &residual)?;
        codes.push(idx);
        residual = next;
    }
    Ok((codes, residual))
}

#[derive(Clone)]
struct Hypothesis<S: Scalar> {
    codes: Vec<usize>,
    residual: Vec<S>,
    err: S,
}

/// Residual VQ encoding. `beam_width = 1` is exact greedy layer-by-layer
/// search; wider beams keep the best partial residuals per layer and never
/// do worse than greedy. Returns the codes and the final squared error.
pub fn rvq_encode<S: Scalar>(
    stack: &RvqStack<S>,
    v: &[S],
    beam_width: usize,
) -> Result<(Vec<usize>, S)> {
    if stack.is_empty() {
        return Err(Error::config("cannot encode with an empty RVQ stack"));
    }
    if beam_width == 0 {
        return Err(Error::config("beam_width must be at least 1"));
    }
    let (greedy_codes, greedy_residual) = greedy_encode(stack, v)?;
    let greedy_err = squared_norm(&greedy_residual);
    if beam_width == 1 {
        return Ok((greedy_codes, greedy_err));
    }

    let mut beam = vec![Hypothesis {
        codes: Vec::new(),
        residual: v.to_vec(),
        err: squared_norm(v),
    }];
    for layer in stack.layers() {
        let mut candidates: Vec<Hypothesis<S>> = Vec::with_capacity(beam.len() * layer.len());
        for hyp in &beam {
            for i in 0..layer.len() {
                let entry = layer.entry(i);
                let residual: Vec<S> = hyp
                    .residual
                    .iter()
                    .zip(entry)
                    .map(|(r, c)| *r - *c)
                    .collect();
                let err = squared_norm(&residual);
                let mut codes = hyp.codes.clone();
                codes.push(i);
                candidates.push(Hypothesis { codes, residual, err });
            }
        }
        // Stable sort keeps generation order (hypothesis rank, then entry
        // index) on ties, so pruning is deterministic.
        candidates.sort_by(|a, b| a.err.partial_cmp(&b.err).expect("finite errors"));
        let mut kept: Vec<Hypothesis<S>> = Vec::with_capacity(beam_width);
        for cand in candidates {
            if kept.len() >= beam_width {
                break;
            }
            if kept.iter().any(|k| k.residual == cand.residual) {
                continue; // identical residuals share all continuations
            }
            kept.push(cand);
        }
        beam = kept;
    }
    let best = beam
        .into_iter()
        .min_by(|a, b| a.err.partial_cmp(&b.err).expect("finite errors"))
        .expect("beam never empties");
    // The greedy path is always a valid lattice path; never return anything
    // worse, and prefer greedy on ties so beam_width only ever helps.
    if best.err < greedy_err {
        Ok((best.codes, best.err))
    } else {
        Ok((greedy_codes, greedy_err))
    }
}

/// Sum of the selected codewords across layers.
pub fn rvq_decode<S: Scalar>(stack: &RvqStack<S>, codes: &[usize]) -> Result<Vec<S>> {
    if codes.len() != stack.len() {
        return Err(Error::config(format!(
            "{} codes for a {}-layer stack",
            codes.len(),
            stack.len()
        )));
    }
    let dim = stack.dim().ok_or_else(|| Error::config("cannot decode with an empty RVQ stack"))?;
    let mut out = vec![S::zero(); dim];
    for (layer, &code) in stack.layers().iter().zip(codes) {
        if code >= layer.len() {
            return Err(Error::Encoding(format!(
                "code {} out of range for codebook of {} entries",
                code,
                layer.len()
            )));
        }
        for (o, c) in out.iter_mut().zip(layer.entry(code)) {
            *o += *c;
        }
    }
    Ok(out)
}

/// Learned convolutions of the `Conv` extractor variant: a strided
/// long-term pooling conv and two pointwise merge convs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorWeights<S: Scalar = Sample> {
    pub dim: usize,
    pub step: usize,
    /// `[dim, dim, step]` strided conv weight plus bias.
    pub lt_weight: Vec<S>,
    pub lt_bias: Vec<S>,
    /// `[dim, 2*dim, 1]` pointwise conv over `concat(x, upsampled lt)`.
    pub st_weight: Vec<S>,
    pub st_bias: Vec<S>,
    /// `[dim, 2*dim, 1]` pointwise conv over `concat(upsampled lt, st)`.
    pub synth_weight: Vec<S>,
    pub synth_bias: Vec<S>,
}

impl<S: Scalar> ExtractorWeights<S> {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.step == 0 {
            return Err(Error::config("extractor dim and step must be positive"));
        }
        let checks = [
            ("lt_weight", self.lt_weight.len(), self.dim * self.dim * self.step),
            ("lt_bias", self.lt_bias.len(), self.dim),
            ("st_weight", self.st_weight.len(), self.dim * 2 * self.dim),
            ("st_bias", self.st_bias.len(), self.dim),
            ("synth_weight", self.synth_weight.len(), self.dim * 2 * self.dim),
            ("synth_bias", self.synth_bias.len(), self.dim),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::config(format!(
                    "extractor {name} has {got} values, expected {want}"
                )));
            }
        }
        Ok(())
    }

    /// Weights that make the Conv variant reproduce the AvgPooling variant
    /// exactly: uniform `1/step` pooling kernels with identity channel
    /// mixing, subtraction and addition as signed identity blocks.
    pub fn pooling_equivalent(dim: usize, step: usize) -> Self {
        let inv = scalar::<S>(1.0 / step as f64);
        let mut lt_weight = vec![S::zero(); dim * dim * step];
        for d in 0..dim {
            for k in 0..step {
                lt_weight[(d * dim + d) * step + k] = inv;
            }
        }
        let mut st_weight = vec![S::zero(); dim * 2 * dim];
        let mut synth_weight = vec![S::zero(); dim * 2 * dim];
        for d in 0..dim {
            // st: channels [0, dim) carry x, [dim, 2*dim) the upsampled lt.
            st_weight[d * 2 * dim + d] = S::one();
            st_weight[d * 2 * dim + dim + d] = -S::one();
            // synth: channels [0, dim) carry the upsampled lt, [dim, 2*dim) st.
            synth_weight[d * 2 * dim + d] = S::one();
            synth_weight[d * 2 * dim + dim + d] = S::one();
        }
        ExtractorWeights {
            dim,
            step,
            lt_weight,
            lt_bias: vec![S::zero(); dim],
            st_weight,
            st_bias: vec![S::zero(); dim],
            synth_weight,
            synth_bias: vec![S::zero(); dim],
        }
    }
}

fn concat_channels<S: Scalar>(a: &FeatureMap<S>, b: &FeatureMap<S>) -> Result<FeatureMap<S>> {
    if a.frames() != b.frames() {
        return Err(Error::config(format!(
            "cannot concatenate feature maps of {} and {} frames",
            a.frames(),
            b.frames()
        )));
    }
    let mut data = Vec::with_capacity((a.channels() + b.channels()) * a.frames());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    FeatureMap::new(a.channels() + b.channels(), a.frames(), data)
}

fn require_conv_weights<'a, S: Scalar>(
    cfg: &LsrvqConfig,
    weights: Option<&'a ExtractorWeights<S>>,
    dim: usize,
) -> Result<&'a ExtractorWeights<S>> {
    let w = weights.ok_or_else(|| {
        Error::config("the Conv extractor variant needs extractor weights")
    })?;
    w.validate()?;
    if w.dim != dim || w.step != cfg.step {
        return Err(Error::config(format!(
            "extractor weights are for dim {} step {}, expected dim {dim} step {}",
            w.dim, w.step, cfg.step
        )));
    }
    Ok(w)
}

fn pointwise_merge<S: Scalar>(
    a: &FeatureMap<S>,
    b: &FeatureMap<S>,
    weight: &[S],
    bias: &[S],
    dim: usize,
) -> Result<FeatureMap<S>> {
    let stacked = concat_channels(a, b)?;
    conv1d(&stacked, &ConvSpec::pointwise(2 * dim, dim, 1), weight, bias)
}

/// Long-term feature extraction: pools every `step` frames down to one
/// (edge-padding a ragged tail). Output frames = ceil(F/step).
pub fn lt_extract<S: Scalar>(
    x: &FeatureMap<S>,
    cfg: &LsrvqConfig,
    weights: Option<&ExtractorWeights<S>>,
) -> Result<FeatureMap<S>> {
    cfg.validate()?;
    let layout = StreamLayout::from_config(cfg);
    let padded = x.edge_pad_frames(layout.padded_frames(x.frames()))?;
    match cfg.extractor {
        ExtractorVariant::AvgPooling => avg_pool(&padded, cfg.step),
        ExtractorVariant::Conv => {
            let w = require_conv_weights(cfg, weights, x.channels())?;
            let spec = ConvSpec {
                in_channels: w.dim,
                out_channels: w.dim,
                kernel_size: cfg.step,
                stride: cfg.step,
                dilation: 1,
                groups: 1,
                padding: 0,
                transposed: false,
            };
            conv1d(&padded, &spec, &w.lt_weight, &w.lt_bias)
        }
    }
}

/// Short-term residual extraction against the (quantized) long-term
/// features. Output covers the padded frame count `ceil(F/step)*step`.
pub fn st_extract<S: Scalar>(
    x: &FeatureMap<S>,
    lt_q: &FeatureMap<S>,
    cfg: &LsrvqConfig,
    weights: Option<&ExtractorWeights<S>>,
) -> Result<FeatureMap<S>> {
    cfg.validate()?;
    if lt_q.channels() != x.channels() {
        return Err(Error::config(format!(
            "long-term features have {} channels, input has {}",
            lt_q.channels(),
            x.channels()
        )));
    }
    let layout = StreamLayout::from_config(cfg);
    if lt_q.frames() != layout.blocks(x.frames()) {
        return Err(Error::config(format!(
            "{} long-term frames for {} input frames at step {}",
            lt_q.frames(),
            x.frames(),
            cfg.step
        )));
    }
    let padded = x.edge_pad_frames(layout.padded_frames(x.frames()))?;
    let up = repeat_frames(lt_q, cfg.step)?;
    match cfg.extractor {
        ExtractorVariant::AvgPooling => {
            let mut out = padded;
            for c in 0..out.channels() {
                let sub = up.channel(c);
                for (v, s) in out.channel_mut(c).iter_mut().zip(sub) {
                    *v = *v - *s;
                }
            }
            Ok(out)
        }
        ExtractorVariant::Conv => {
            let w = require_conv_weights(cfg, weights, x.channels())?;
            pointwise_merge(&padded, &up, &w.st_weight, &w.st_bias, w.dim)
        }
    }
}

/// Merges quantized long- and short-term features back into the full-rate
/// feature map. Output frames = st_q.frames.
pub fn synthesize<S: Scalar>(
    lt_q: &FeatureMap<S>,
    st_q: &FeatureMap<S>,
    cfg: &LsrvqConfig,
    weights: Option<&ExtractorWeights<S>>,
) -> Result<FeatureMap<S>> {
    cfg.validate()?;
    if lt_q.channels() != st_q.channels() {
        return Err(Error::config("long- and short-term channel counts differ"));
    }
    if st_q.frames() != lt_q.frames() * cfg.step {
        return Err(Error::config(format!(
            "{} short-term frames do not cover {} long-term frames at step {}",
            st_q.frames(),
            lt_q.frames(),
            cfg.step
        )));
    }
    let up = repeat_frames(lt_q, cfg.step)?;
    match cfg.extractor {
        ExtractorVariant::AvgPooling => {
            let mut out = up;
            for c in 0..out.channels() {
                let add = st_q.channel(c);
                for (v, a) in out.channel_mut(c).iter_mut().zip(add) {
                    *v += *a;
                }
            }
            Ok(out)
        }
        ExtractorVariant::Conv => {
            let w = require_conv_weights(cfg, weights, lt_q.channels())?;
            pointwise_merge(&up, st_q, &w.synth_weight, &w.synth_bias, w.dim)
        }
    }
}

/// Fitted quantizer: both stacks plus the Conv-variant extractor weights
/// when applicable.
#[derive(Debug, Clone, PartialEq)]
pub struct LsrvqStacks<S: Scalar = Sample> {
    pub lt: RvqStack<S>,
    pub st: RvqStack<S>,
    pub extractor: Option<ExtractorWeights<S>>,
}

impl<S: Scalar> LsrvqStacks<S> {
    /// Validates stack shapes against a config and returns the feature
    /// dimension.
    pub fn check_config(&self, cfg: &LsrvqConfig) -> Result<usize> {
        cfg.validate()?;
        if self.lt.len() != cfg.lt.layers {
            return Err(Error::config(format!(
                "LT stack has {} layers, config says {}",
                self.lt.len(),
                cfg.lt.layers
            )));
        }
        if self.st.len() != cfg.st.layers {
            return Err(Error::config(format!(
                "ST stack has {} layers, config says {}",
                self.st.len(),
                cfg.st.layers
            )));
        }
        for (name, stack, size) in [
            ("LT", &self.lt, cfg.lt.size),
            ("ST", &self.st, cfg.st.size),
        ] {
            for layer in stack.layers() {
                if layer.len() != size {
                    return Err(Error::config(format!(
                        "{name} layer has {} entries, config says {}",
                        layer.len(),
                        size
                    )));
                }
            }
        }
        let dim = match (self.lt.dim(), self.st.dim()) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::config("LT and ST stacks disagree on dimension"))
            }
            (Some(a), _) => a,
            (None, Some(b)) => b,
            (None, None) => {
                return Err(Error::config("quantizer has no layers in either stack"))
            }
        };
        if matches!(cfg.extractor, ExtractorVariant::Conv) {
            require_conv_weights(cfg, self.extractor.as_ref(), dim)?;
        }
        Ok(dim)
    }
}

/// Full LSRVQ encoding of a feature map.
pub fn lsrvq_encode<S: Scalar>(
    x: &FeatureMap<S>,
    cfg: &LsrvqConfig,
    stacks: &LsrvqStacks<S>,
) -> Result<CodedStream> {
    let dim = stacks.check_config(cfg)?;
    if x.channels() != dim {
        return Err(Error::config(format!(
            "features have {} channels, quantizer is fitted for {dim}",
            x.channels()
        )));
    }
    if x.frames() == 0 {
        return Err(Error::DegenerateLength("cannot encode zero frames".into()));
    }
    let layout = StreamLayout::from_config(cfg);
    let blocks = layout.blocks(x.frames());
    let ext = stacks.extractor.as_ref();

    let (lt_codes, lt_q) = if cfg.lt.layers == 0 {
        (vec![Vec::new(); blocks], FeatureMap::zeros(dim, blocks))
    } else {
        let lt_f = lt_extract(x, cfg, ext)?;
        let mut codes = Vec::with_capacity(blocks);
        let mut decoded = FeatureMap::zeros(dim, blocks);
        for b in 0..blocks {
            let (c, _) = rvq_encode(&stacks.lt, &lt_f.frame(b), cfg.beam_width)?;
            let q = rvq_decode(&stacks.lt, &c)?;
            for (ch, v) in q.iter().enumerate() {
                decoded.channel_mut(ch)[b] = *v;
            }
            codes.push(c);
        }
        (codes, decoded)
    };

    let st_f = st_extract(x, &lt_q, cfg, ext)?;
    let mut st_codes = Vec::with_capacity(st_f.frames());
    for f in 0..st_f.frames() {
        if cfg.st.layers == 0 {
            st_codes.push(Vec::new());
        } else {
            let (c, _) = rvq_encode(&stacks.st, &st_f.frame(f), cfg.beam_width)?;
            st_codes.push(c);
        }
    }

    let stream = CodedStream {
        layout,
        frames: x.frames(),
        lt_codes,
        st_codes,
    };
    stream.validate()?;
    Ok(stream)
}

/// Inverse of [`lsrvq_encode`] given the same config and stacks; output is
/// trimmed to the stream's true frame count.
pub fn lsrvq_decode<S: Scalar>(
    codes: &CodedStream,
    cfg: &LsrvqConfig,
    stacks: &LsrvqStacks<S>,
) -> Result<FeatureMap<S>> {
    let dim = stacks.check_config(cfg)?;
    codes.validate()?;
    if codes.layout != StreamLayout::from_config(cfg) {
        return Err(Error::config("stream layout does not match the quantizer config"));
    }
    let blocks = codes.lt_codes.len();
    let mut lt_q = FeatureMap::zeros(dim, blocks);
    if cfg.lt.layers > 0 {
        for (b, block) in codes.lt_codes.iter().enumerate() {
            let v = rvq_decode(&stacks.lt, block)?;
            for (ch, val) in v.iter().enumerate() {
                lt_q.channel_mut(ch)[b] = *val;
            }
        }
    }
    let mut st_q = FeatureMap::zeros(dim, codes.st_codes.len());
    if cfg.st.layers > 0 {
        for (f, frame) in codes.st_codes.iter().enumerate() {
            let v = rvq_decode(&stacks.st, frame)?;
            for (ch, val) in v.iter().enumerate() {
                st_q.channel_mut(ch)[f] = *val;
            }
        }
    }
    let full = synthesize(&lt_q, &st_q, cfg, stacks.extractor.as_ref())?;
    Ok(full.truncate_frames(codes.frames))
}

/// Bits per second: `(S/N)·M_q1·log2(M_1) + S·M_q2·log2(M_2)`.
pub fn bitrate(cfg: &LsrvqConfig) -> Result<f64> {
    cfg.validate()?;
    let s = cfg.frame_rate as f64;
    let lt = s / cfg.step as f64 * cfg.lt.layers as f64 * (cfg.lt.size as f64).log2();
    let st = s * cfg.st.layers as f64 * (cfg.st.size as f64).log2();
    Ok(lt + st)
}

/// Inference-time recomputation of the codebook/commitment losses for a
/// coded stream. Without gradients the two quantities coincide; they are
/// reported separately to mirror their distinct roles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizationDiagnostics {
    pub codebook_loss: f64,
    pub commitment_loss: f64,
    pub weighted_sum: f64,
}

pub const CODEBOOK_LOSS_WEIGHT: f64 = 1.0;
pub const COMMITMENT_LOSS_WEIGHT: f64 = 0.25;

pub fn quantization_diagnostics<S: Scalar>(
    x: &FeatureMap<S>,
    codes: &CodedStream,
    cfg: &LsrvqConfig,
    stacks: &LsrvqStacks<S>,
) -> Result<QuantizationDiagnostics> {
    let dim = stacks.check_config(cfg)?;
    if x.channels() != dim {
        return Err(Error::config("feature dimension does not match the quantizer"));
    }
    codes.validate()?;
    let ext = stacks.extractor.as_ref();
    let mut sum = 0.0f64;
    let mut count = 0usize;

    let mut accumulate = |stack: &RvqStack<S>, vector: Vec<S>, layer_codes: &[usize]| -> Result<()> {
        let mut residual = vector;
        for (layer, &code) in stack.layers().iter().zip(layer_codes) {
            let entry = layer.entry(code);
            let d = squared_dist(&residual, entry);
            sum += d.to_f64().unwrap_or(f64::NAN);
            count += 1;
            for (r, c) in residual.iter_mut().zip(entry) {
                *r = *r - *c;
            }
        }
        Ok(())
    };

    let layout = StreamLayout::from_config(cfg);
    let blocks = layout.blocks(x.frames());
    let lt_q = if cfg.lt.layers > 0 {
        let lt_f = lt_extract(x, cfg, ext)?;
        let mut decoded = FeatureMap::zeros(dim, blocks);
        for b in 0..blocks {
            accumulate(&stacks.lt, lt_f.frame(b), &codes.lt_codes[b])?;
            let q = rvq_decode(&stacks.lt, &codes.lt_codes[b])?;
            for (ch, v) in q.iter().enumerate() {
                decoded.channel_mut(ch)[b] = *v;
            }
        }
        decoded
    } else {
        FeatureMap::zeros(dim, blocks)
    };
    if cfg.st.layers > 0 {
        let st_f = st_extract(x, &lt_q, cfg, ext)?;
        for f in 0..st_f.frames() {
            accumulate(&stacks.st, st_f.frame(f), &codes.st_codes[f])?;
        }
    }

    let mean = if count == 0 { 0.0 } else { sum / count as f64 };
    Ok(QuantizationDiagnostics {
        codebook_loss: mean,
        commitment_loss: mean,
        weighted_sum: CODEBOOK_LOSS_WEIGHT * mean + COMMITMENT_LOSS_WEIGHT * mean,
    })
}

// ---------------------------------------------------------------------------
// Codebook fitting

const LLOYD_MAX_ITERS: usize = 50;
const LLOYD_REL_TOL: f64 = 1e-4;
const DUPLICATE_EPS: f64 = 1e-9;

struct KmeansScratch {
    points: Vec<Vec<f64>>,
    dim: usize,
}

impl KmeansScratch {
    fn nearest(&self, centers: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, c) in centers.iter().enumerate() {
            let mut d = 0.0;
            for (a, b) in p.iter().zip(c) {
                let t = a - b;
                d += t * t;
            }
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        (best, best_d)
    }

    /// Index of the point farthest from its nearest center.
    fn farthest_point(&self, centers: &[Vec<f64>]) -> (usize, f64) {
        let mut best = 0usize;
        let mut best_d = -1.0;
        for (i, p) in self.points.iter().enumerate() {
            let (_, d) = self.nearest(centers, p);
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        (best, best_d)
    }

    fn kmeans_pp_init(&self, m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let n = self.points.len();
        let mut centers = Vec::with_capacity(m);
        centers.push(self.points[rng.gen_range(0..n)].clone());
        let mut min_d: Vec<f64> = self
            .points
            .iter()
            .map(|p| self.nearest(&centers, p).1)
            .collect();
        while centers.len() < m {
            let total: f64 = min_d.iter().sum();
            let pick = if total > 0.0 {
                let mut target = rng.gen_range(0.0..total);
                let mut idx = n - 1;
                for (i, d) in min_d.iter().enumerate() {
                    if target < *d {
                        idx = i;
                        break;
                    }
                    target -= d;
                }
                idx
            } else {
                rng.gen_range(0..n)
            };
            let c = self.points[pick].clone();
            for (p, d) in self.points.iter().zip(min_d.iter_mut()) {
                let mut nd = 0.0;
                for (a, b) in p.iter().zip(&c) {
                    let t = a - b;
                    nd += t * t;
                }
                if nd < *d {
                    *d = nd;
                }
            }
            centers.push(c);
        }
        centers
    }

    fn lloyd(&self, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        let n = self.points.len();
        let mut centers = self.kmeans_pp_init(m, rng);
        let mut prev = f64::INFINITY;
        for _ in 0..LLOYD_MAX_ITERS {
            let mut assignments = vec![0usize; n];
            let mut dist = 0.0;
            for (i, p) in self.points.iter().enumerate() {
                let (a, d) = self.nearest(&centers, p);
                assignments[i] = a;
                dist += d;
            }
            // M-step: means of the assigned clusters; an empty cluster is
            // reseeded to the point currently served worst.
            let mut sums = vec![vec![0.0; self.dim]; m];
            let mut counts = vec![0usize; m];
            for (p, &a) in self.points.iter().zip(&assignments) {
                counts[a] += 1;
                for (s, v) in sums[a].iter_mut().zip(p) {
                    *s += v;
                }
            }
            for c in 0..m {
                if counts[c] > 0 {
                    for s in sums[c].iter_mut() {
                        *s /= counts[c] as f64;
                    }
                    centers[c] = std::mem::take(&mut sums[c]);
                }
            }
            for c in 0..m {
                if counts[c] == 0 {
                    let (far, _) = self.farthest_point(&centers);
                    centers[c] = self.points[far].clone();
                }
            }
            if prev.is_finite() {
                let improvement = (prev - dist) / prev.max(f64::MIN_POSITIVE);
                if improvement < LLOYD_REL_TOL {
                    break;
                }
            }
            prev = dist;
        }
        self.dedupe(&mut centers)?;
        Ok(centers)
    }

    /// Replaces the center nearest the origin with the exact zero vector.
    /// A cascade layer holding the zero codeword can never lengthen a
    /// residual, which is what makes greedy encoding monotone for every
    /// input, fitted or not. A second center that collides with zero is
    /// displaced to the worst-served data point.
    fn anchor_zero(&self, centers: &mut [Vec<f64>]) -> Result<()> {
        let mut anchored = 0;
        let mut best = f64::INFINITY;
        for (i, c) in centers.iter().enumerate() {
            let norm: f64 = c.iter().map(|v| v * v).sum();
            if norm < best {
                best = norm;
                anchored = i;
            }
        }
        for v in centers[anchored].iter_mut() {
            *v = 0.0;
        }
        for i in 0..centers.len() {
            if i == anchored {
                continue;
            }
            let norm: f64 = centers[i].iter().map(|v| v * v).sum();
            if norm < DUPLICATE_EPS * DUPLICATE_EPS {
                let (far, far_d) = self.farthest_point(centers);
                if far_d < DUPLICATE_EPS * DUPLICATE_EPS {
                    return Err(Error::Fit(
                        "training data has fewer distinct vectors than codebook entries".into(),
                    ));
                }
                centers[i] = self.points[far].clone();
            }
        }
        Ok(())
    }

    /// Moves one of each pair of near-identical centers to the worst-served
    /// data point. Keeping the twin preserves every point's nearest
    /// distance, so distortion never increases.
    fn dedupe(&self, centers: &mut [Vec<f64>]) -> Result<()> {
        let m = centers.len();
        for _ in 0..m {
            let mut dup = None;
            'scan: for i in 0..m {
                for j in (i + 1)..m {
                    let mut d = 0.0;
                    for (a, b) in centers[i].iter().zip(&centers[j]) {
                        let t = a - b;
                        d += t * t;
                    }
                    if d < DUPLICATE_EPS * DUPLICATE_EPS {
                        dup = Some(j);
                        break 'scan;
                    }
                }
            }
            let Some(j) = dup else { return Ok(()) };
            let (far, far_d) = self.farthest_point(centers);
            if far_d < DUPLICATE_EPS * DUPLICATE_EPS {
                return Err(Error::Fit(
                    "training data has fewer distinct vectors than codebook entries".into(),
                ));
            }
            centers[j] = self.points[far].clone();
        }
        Ok(())
    }
}

fn fit_stack<S: Scalar>(
    vectors: &[Vec<S>],
    stage: &StageConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RvqStack<S>> {
    if stage.layers == 0 {
        return Ok(RvqStack::empty());
    }
    if vectors.is_empty() {
        return Err(Error::Fit("no training vectors".into()));
    }
    if vectors.len() < stage.size {
        return Err(Error::Fit(format!(
            "{} training vectors cannot fill a codebook of {}",
            vectors.len(),
            stage.size
        )));
    }
    let dim = vectors[0].len();
    let mut residuals: Vec<Vec<S>> = vectors.to_vec();
    let mut layers = Vec::with_capacity(stage.layers);
    for _ in 0..stage.layers {
        let scratch = KmeansScratch {
            points: residuals
                .iter()
                .map(|v| v.iter().map(|x| x.to_f64().unwrap_or(0.0)).collect())
                .collect(),
            dim,
        };
        let mut centers = scratch.lloyd(stage.size, rng)?;
        scratch.anchor_zero(&mut centers)?;
        let mut data = Vec::with_capacity(stage.size * dim);
        for c in &centers {
            for v in c {
                data.push(scalar::<S>(*v));
            }
        }
        let cb = Codebook::new(dim, data)?;
        for r in residuals.iter_mut() {
            let (_, _, next) = vq_nearest(&cb, r)?;
            *r = next;
        }
        layers.push(cb);
    }
    RvqStack::new(layers)
}

/// Fits both quantizer stacks on a corpus of feature maps with seeded,
/// layer-by-layer Lloyd iteration. Every fitted layer keeps one exact zero
/// codeword, so applying a layer never lengthens the residual. The Conv
/// extractor variant gets the pooling-equivalent constructed weights.
pub fn fit_codebooks<S: Scalar>(
    features: &[FeatureMap<S>],
    cfg: &LsrvqConfig,
    seed: u64,
) -> Result<LsrvqStacks<S>> {
    cfg.validate()?;
    let Some(first) = features.first() else {
        return Err(Error::Fit("no training features".into()));
    };
    let dim = first.channels();
    if features.iter().any(|f| f.channels() != dim) {
        return Err(Error::Fit("training features disagree on channel count".into()));
    }
    if features.iter().any(|f| f.frames() == 0) {
        return Err(Error::Fit("training features must have at least one frame".into()));
    }
    let extractor = match cfg.extractor {
        ExtractorVariant::AvgPooling => None,
        ExtractorVariant::Conv => Some(ExtractorWeights::pooling_equivalent(dim, cfg.step)),
    };
    let ext = extractor.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut lt_vectors = Vec::new();
    for x in features {
        let lt_f = lt_extract(x, cfg, ext)?;
        for b in 0..lt_f.frames() {
            lt_vectors.push(lt_f.frame(b));
        }
    }
    let lt = fit_stack(&lt_vectors, &cfg.lt, &mut rng)?;

    let mut st_vectors = Vec::new();
    for x in features {
        let blocks = StreamLayout::from_config(cfg).blocks(x.frames());
        let lt_q = if cfg.lt.layers == 0 {
            FeatureMap::zeros(dim, blocks)
        } else {
            let lt_f = lt_extract(x, cfg, ext)?;
            let mut decoded = FeatureMap::zeros(dim, blocks);
            for b in 0..blocks {
                let (codes, _) = rvq_encode(&lt, &lt_f.frame(b), 1)?;
                let q = rvq_decode(&lt, &codes)?;
                for (ch, v) in q.iter().enumerate() {
                    decoded.channel_mut(ch)[b] = *v;
                }
            }
            decoded
        };
        let st_f = st_extract(x, &lt_q, cfg, ext)?;
        for f in 0..st_f.frames() {
            st_vectors.push(st_f.frame(f));
        }
    }
    let st = fit_stack(&st_vectors, &cfg.st, &mut rng)?;

    Ok(LsrvqStacks { lt, st, extractor })
}

// ---------------------------------------------------------------------------
// ModelWeights conversion

/// Serializes fitted stacks into `quantizer.*` tensors.
pub fn stacks_to_weights<S: Scalar>(stacks: &LsrvqStacks<S>) -> Result<ModelWeights<S>> {
    let mut weights = ModelWeights::new();
    for (prefix, stack) in [("quantizer.lt", &stacks.lt), ("quantizer.st", &stacks.st)] {
        for (k, layer) in stack.layers().iter().enumerate() {
            let shape = vec![layer.len(), layer.dim()];
            let mut data = Vec::with_capacity(layer.len() * layer.dim());
            for i in 0..layer.len() {
                data.extend_from_slice(layer.entry(i));
            }
            weights.insert(format!("{prefix}.layer{k}"), Tensor::new(shape, data)?)?;
        }
    }
    if let Some(ext) = &stacks.extractor {
        ext.validate()?;
        let d = ext.dim;
        let entries: [(&str, Vec<usize>, &[S]); 6] = [
            ("quantizer.extractor.lt.weight", vec![d, d, ext.step], &ext.lt_weight),
            ("quantizer.extractor.lt.bias", vec![d], &ext.lt_bias),
            ("quantizer.extractor.st.weight", vec![d, 2 * d, 1], &ext.st_weight),
            ("quantizer.extractor.st.bias", vec![d], &ext.st_bias),
            ("quantizer.extractor.synth.weight", vec![d, 2 * d, 1], &ext.synth_weight),
            ("quantizer.extractor.synth.bias", vec![d], &ext.synth_bias),
        ];
        for (name, shape, data) in entries {
            weights.insert(name, Tensor::new(shape, data.to_vec())?)?;
        }
    }
    Ok(weights)
}

/// Reconstructs stacks from `quantizer.*` tensors, validated against the
/// config.
pub fn stacks_from_weights<S: Scalar>(
    weights: &ModelWeights<S>,
    cfg: &LsrvqConfig,
) -> Result<LsrvqStacks<S>> {
    cfg.validate()?;
    let read_stack = |prefix: &str, stage: &StageConfig| -> Result<RvqStack<S>> {
        let mut layers = Vec::with_capacity(stage.layers);
        for k in 0..stage.layers {
            let name = format!("{prefix}.layer{k}");
            let tensor = weights.get(&name).ok_or_else(|| Error::Validation {
                path: name.clone(),
                reason: "required codebook tensor is missing".into(),
            })?;
            let shape = tensor.shape();
            if shape.len() != 2 || shape[0] != stage.size {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: vec![stage.size, shape.get(1).copied().unwrap_or(0)],
                    found: shape.to_vec(),
                });
            }
            layers.push(Codebook::new(shape[1], tensor.data().to_vec())?);
        }
        RvqStack::new(layers)
    };
    let lt = read_stack("quantizer.lt", &cfg.lt)?;
    let st = read_stack("quantizer.st", &cfg.st)?;
    let extractor = match cfg.extractor {
        ExtractorVariant::AvgPooling => None,
        ExtractorVariant::Conv => {
            let dim = lt
                .dim()
                .or(st.dim())
                .ok_or_else(|| Error::config("cannot infer extractor dimension"))?;
            let get = |name: &str| -> Result<Vec<S>> {
                Ok(weights
                    .get(name)
                    .ok_or_else(|| Error::Validation {
                        path: name.to_string(),
                        reason: "required extractor tensor is missing".into(),
                    })?
                    .data()
                    .to_vec())
            };
            let ext = ExtractorWeights {
                dim,
                step: cfg.step,
                lt_weight: get("quantizer.extractor.lt.weight")?,
                lt_bias: get("quantizer.extractor.lt.bias")?,
                st_weight: get("quantizer.extractor.st.weight")?,
                st_bias: get("quantizer.extractor.st.bias")?,
                synth_weight: get("quantizer.extractor.synth.weight")?,
                synth_bias: get("quantizer.extractor.synth.bias")?,
            };
            ext.validate()?;
            Some(ext)
        }
    };
    let stacks = LsrvqStacks { lt, st, extractor };
    stacks.check_config(cfg)?;
    Ok(stacks)
}
