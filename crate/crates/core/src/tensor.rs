//! 1-D signal kernels: grouped/dilated convolutions, periodic activations,
//! pooling, and the multiply-accumulate formulas used for complexity
//! accounting.
//!
//! All kernels are pure functions over [`FeatureMap`]s. Layouts follow the
//! channels-first convention:
//!
//! * feature data: `[channels, frames]`, row-major by channel
//! * convolution weights: `[out_channels, in_channels / groups, kernel]`
//! * transposed-convolution weights: `[in_channels, out_channels / groups, kernel]`
//! * bias: `[out_channels]`

use crate::error::{Error, Result};
use crate::num::{scalar, Scalar};
use crate::Sample;

/// A `channels x frames` grid of activations, row-major by channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<S: Scalar = Sample> {
    channels: usize,
    frames: usize,
    data: Vec<S>,
}

impl<S: Scalar> FeatureMap<S> {
    /// Builds a map from channel-major data. `data.len()` must equal
    /// `channels * frames`.
    pub fn new(channels: usize, frames: usize, data: Vec<S>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::config("feature map must have at least one channel"));
        }
        if data.len() != channels * frames {
            return Err(Error::config(format!(
                "feature data length {} does not match {} channels x {} frames",
                data.len(),
                channels,
                frames
            )));
        }
        Ok(Self {
            channels,
            frames,
            data,
        })
    }

    pub fn zeros(channels: usize, frames: usize) -> Self {
        Self {
            channels,
            frames,
            data: vec![S::zero(); channels * frames],
        }
    }

    /// Single-channel map over the given samples.
    pub fn from_samples(samples: Vec<S>) -> Self {
        Self {
            channels: 1,
            frames: samples.len(),
            data: samples,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[S] {
        &self.data[c * self.frames..(c + 1) * self.frames]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [S] {
        &mut self.data[c * self.frames..(c + 1) * self.frames]
    }

    pub fn at(&self, c: usize, f: usize) -> S {
        self.data[c * self.frames + f]
    }

    /// The frame-`f` column as an owned vector (one value per channel).
    pub fn frame(&self, f: usize) -> Vec<S> {
        (0..self.channels).map(|c| self.at(c, f)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Keeps only the first `frames` frames of every channel.
    pub fn truncate_frames(&self, frames: usize) -> Self {
        assert!(frames <= self.frames);
        let mut data = Vec::with_capacity(self.channels * frames);
        for c in 0..self.channels {
            data.extend_from_slice(&self.channel(c)[..frames]);
        }
        Self {
            channels: self.channels,
            frames,
            data,
        }
    }

    /// Extends every channel to `frames` frames by repeating its last value.
    pub fn edge_pad_frames(&self, frames: usize) -> Result<Self> {
        if frames < self.frames {
            return Err(Error::config("edge padding cannot shrink a feature map"));
        }
        if self.frames == 0 && frames > 0 {
            return Err(Error::config("cannot edge-pad an empty feature map"));
        }
        let mut data = Vec::with_capacity(self.channels * frames);
        for c in 0..self.channels {
            let row = self.channel(c);
            data.extend_from_slice(row);
            let last = *row.last().unwrap_or(&S::zero());
            data.extend(std::iter::repeat(last).take(frames - self.frames));
        }
        Ok(Self {
            channels: self.channels,
            frames,
            data,
        })
    }
}

/// Parameters of a (possibly transposed) grouped 1-D convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl ConvSpec {
    /// Plain convolution with stride 1 and the given symmetric padding.
    pub fn pointwise(in_channels: usize, out_channels: usize, groups: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_size: 1,
            stride: 1,
            dilation: 1,
            groups,
            padding: 0,
            transposed: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.kernel_size == 0 || self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::config(
                "kernel size, stride, dilation, and groups must be at least 1",
            ));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::config(format!(
                "channels ({} in, {} out) must be divisible by groups ({})",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    /// Output frame count for the given input length.
    ///
    /// Forward: `floor((F + 2p - d*(K-1) - 1) / s) + 1`.
    /// Transposed: `(F - 1)*s - 2p + d*(K-1) + 1`.
    pub fn output_frames(&self, input_frames: usize) -> Result<usize> {
        let f = input_frames as i64;
        let k = self.kernel_size as i64;
        let s = self.stride as i64;
        let d = self.dilation as i64;
        let p = self.padding as i64;
        let out = if self.transposed {
            (f - 1) * s - 2 * p + d * (k - 1) + 1
        } else {
            (f + 2 * p - d * (k - 1) - 1).div_euclid(s) + 1
        };
        if out <= 0 {
            return Err(Error::DegenerateLength(format!(
                "{} frames through kernel {} (stride {}, dilation {}, padding {}) \
                 leave no output",
                input_frames, self.kernel_size, self.stride, self.dilation, self.padding
            )));
        }
        Ok(out as usize)
    }

    /// Expected weight tensor shape for this spec.
    pub fn weight_shape(&self) -> [usize; 3] {
        if self.transposed {
            [
                self.in_channels,
                self.out_channels / self.groups,
                self.kernel_size,
            ]
        } else {
            [
                self.out_channels,
                self.in_channels / self.groups,
                self.kernel_size,
            ]
        }
    }

    pub fn weight_len(&self) -> usize {
        let [a, b, c] = self.weight_shape();
        a * b * c
    }
}

/// Multiply-accumulate count of one convolution applied to `input_frames`
/// frames. Bias additions and activations are not counted.
pub fn mac_count(spec: &ConvSpec, input_frames: usize) -> Result<u64> {
    spec.validate()?;
    let count = if spec.transposed {
        spec.in_channels as u64
            * (spec.out_channels / spec.groups) as u64
            * spec.kernel_size as u64
            * input_frames as u64
    } else {
        let out_frames = spec.output_frames(input_frames)? as u64;
        spec.out_channels as u64
            * (spec.in_channels / spec.groups) as u64
            * spec.kernel_size as u64
            * out_frames
    };
    Ok(count)
}

fn check_conv_inputs<S: Scalar>(
    input: &FeatureMap<S>,
    spec: &ConvSpec,
    weights: &[S],
    bias: &[S],
) -> Result<()> {
    spec.validate()?;
    if input.channels() != spec.in_channels {
        return Err(Error::config(format!(
            "input has {} channels, spec expects {}",
            input.channels(),
            spec.in_channels
        )));
    }
    if weights.len() != spec.weight_len() {
        return Err(Error::config(format!(
            "weight tensor has {} values, spec shape {:?} needs {}",
            weights.len(),
            spec.weight_shape(),
            spec.weight_len()
        )));
    }
    if bias.len() != spec.out_channels {
        return Err(Error::config(format!(
            "bias has {} values, expected one per output channel ({})",
            bias.len(),
            spec.out_channels
        )));
    }
    Ok(())
}

/// Grouped dilated 1-D convolution (cross-correlation) with zero padding.
pub fn conv1d<S: Scalar>(
    input: &FeatureMap<S>,
    spec: &ConvSpec,
    weights: &[S],
    bias: &[S],
) -> Result<FeatureMap<S>> {
    if spec.transposed {
        return Err(Error::config("conv1d requires a non-transposed spec"));
    }
    check_conv_inputs(input, spec, weights, bias)?;
    let in_frames = input.frames();
    let out_frames = spec.output_frames(in_frames)?;
    let in_per_group = spec.in_channels / spec.groups;
    let out_per_group = spec.out_channels / spec.groups;
    let mut output = FeatureMap::zeros(spec.out_channels, out_frames);

    for g in 0..spec.groups {
        for oc_local in 0..out_per_group {
            let oc = g * out_per_group + oc_local;
            let out_row = output.channel_mut(oc);
            let b = bias[oc];
            for v in out_row.iter_mut() {
                *v = b;
            }
            for ic_local in 0..in_per_group {
                let ic = g * in_per_group + ic_local;
                let in_row = input.channel(ic);
                let w_base = (oc * in_per_group + ic_local) * spec.kernel_size;
                for k in 0..spec.kernel_size {
                    let w = weights[w_base + k];
                    if w.is_zero() {
                        continue;
                    }
                    // input index for output frame t: t*stride + k*dilation - padding
                    let shift = k as i64 * spec.dilation as i64 - spec.padding as i64;
                    let t_min = if shift >= 0 {
                        0
                    } else {
                        ((-shift) as usize).div_ceil(spec.stride)
                    };
                    if t_min >= out_frames {
                        continue;
                    }
                    let max_idx = in_frames as i64 - 1 - shift;
                    if max_idx < 0 {
                        continue;
                    }
                    let t_max = ((max_idx as usize) / spec.stride).min(out_frames - 1);
                    if spec.stride == 1 {
                        // Unit stride reads a contiguous window, so the tap
                        // reduces to a saxpy over two slices.
                        let base = (t_min as i64 + shift) as usize;
                        let n = t_max - t_min + 1;
                        for (o, i) in
                            out_row[t_min..t_min + n].iter_mut().zip(&in_row[base..base + n])
                        {
                            *o = *o + w * *i;
                        }
                    } else {
                        let mut idx = (t_min as i64 * spec.stride as i64 + shift) as usize;
                        for t in t_min..=t_max {
                            out_row[t] = out_row[t] + w * in_row[idx];
                            idx += spec.stride;
                        }
                    }
                }
            }
        }
    }
    debug_assert!(output.is_finite());
    Ok(output)
}

/// Transposed grouped 1-D convolution (the adjoint of [`conv1d`] with the
/// same weight buffer and mirrored channel counts).
pub fn conv_transpose1d<S: Scalar>(
    input: &FeatureMap<S>,
    spec: &ConvSpec,
    weights: &[S],
    bias: &[S],
) -> Result<FeatureMap<S>> {
    if !spec.transposed {
        return Err(Error::config("conv_transpose1d requires a transposed spec"));
    }
    check_conv_inputs(input, spec, weights, bias)?;
    let in_frames = input.frames();
    let out_frames = spec.output_frames(in_frames)?;
    let in_per_group = spec.in_channels / spec.groups;
    let out_per_group = spec.out_channels / spec.groups;
    let mut output = FeatureMap::zeros(spec.out_channels, out_frames);

    for g in 0..spec.groups {
        for ic_local in 0..in_per_group {
            let ic = g * in_per_group + ic_local;
            let in_row = input.channel(ic);
            for oc_local in 0..out_per_group {
                let oc = g * out_per_group + oc_local;
                let out_row = output.channel_mut(oc);
                let w_base = (ic * out_per_group + oc_local) * spec.kernel_size;
                let w_row = &weights[w_base..w_base + spec.kernel_size];
                if spec.dilation == 1 {
                    // An undilated kernel lands on a contiguous output span,
                    // so each input frame is one saxpy instead of a strided
                    // scatter.
                    for (j, &v) in in_row.iter().enumerate() {
                        if v.is_zero() {
                            continue;
                        }
                        let start = j as i64 * spec.stride as i64 - spec.padding as i64;
                        if start >= out_frames as i64 {
                            continue;
                        }
                        let k_lo = if start < 0 { (-start) as usize } else { 0 };
                        let k_hi = spec.kernel_size.min((out_frames as i64 - start) as usize);
                        if k_lo >= k_hi {
                            continue;
                        }
                        let base = (start + k_lo as i64) as usize;
                        for (o, w) in out_row[base..base + (k_hi - k_lo)]
                            .iter_mut()
                            .zip(&w_row[k_lo..k_hi])
                        {
                            *o = *o + *w * v;
                        }
                    }
                } else {
                    for (k, &w) in w_row.iter().enumerate() {
                        if w.is_zero() {
                            continue;
                        }
                        // output index for input frame j: j*stride + k*dilation - padding
                        let shift = k as i64 * spec.dilation as i64 - spec.padding as i64;
                        let j_min = if shift >= 0 {
                            0
                        } else {
                            ((-shift) as usize).div_ceil(spec.stride)
                        };
                        if j_min >= in_frames {
                            continue;
                        }
                        let max_out = out_frames as i64 - 1 - shift;
                        if max_out < 0 {
                            continue;
                        }
                        let j_max = ((max_out as usize) / spec.stride).min(in_frames - 1);
                        let mut idx = (j_min as i64 * spec.stride as i64 + shift) as usize;
                        for j in j_min..=j_max {
                            out_row[idx] = out_row[idx] + w * in_row[j];
                            idx += spec.stride;
                        }
                    }
                }
            }
        }
    }
    for oc in 0..spec.out_channels {
        let b = bias[oc];
        if !b.is_zero() {
            for v in output.channel_mut(oc) {
                *v += b;
            }
        }
    }
    debug_assert!(output.is_finite());
    Ok(output)
}

/// Per-channel periodic activation parameters. Both vectors are positive,
/// one value per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationParams<S: Scalar = Sample> {
    alpha: Vec<S>,
    beta: Vec<S>,
}

impl<S: Scalar> ActivationParams<S> {
    pub fn new(alpha: Vec<S>, beta: Vec<S>) -> Result<Self> {
        if alpha.len() != beta.len() {
            return Err(Error::config(format!(
                "alpha ({}) and beta ({}) must have one value per channel",
                alpha.len(),
                beta.len()
            )));
        }
        for (name, values) in [("alpha", &alpha), ("beta", &beta)] {
            if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > S::zero())) {
                return Err(Error::config(format!(
                    "activation {name} must be positive and finite, found {v}"
                )));
            }
        }
        Ok(Self { alpha, beta })
    }

    /// `alpha = beta = 1` for every channel.
    pub fn identity(channels: usize) -> Self {
        Self {
            alpha: vec![S::one(); channels],
            beta: vec![S::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[S] {
        &self.alpha
    }

    pub fn beta(&self) -> &[S] {
        &self.beta
    }
}

/// `y = x + (1/beta) * sin^2(alpha * x)`, applied per channel.
pub fn snake_beta<S: Scalar>(x: &FeatureMap<S>, params: &ActivationParams<S>) -> Result<FeatureMap<S>> {
    if params.channels() != x.channels() {
        return Err(Error::config(format!(
            "activation has {} channels, input has {}",
            params.channels(),
            x.channels()
        )));
    }
    let mut out = x.clone();
    for c in 0..out.channels() {
        let alpha = params.alpha[c];
        let inv_beta = S::one() / params.beta[c];
        for v in out.channel_mut(c) {
            let s = (alpha * *v).sin();
            *v = *v + inv_beta * s * s;
        }
    }
    debug_assert!(out.is_finite());
    Ok(out)
}

/// The baseline periodic activation `y = x + (1/alpha) * sin^2(alpha * x)`.
pub fn snake<S: Scalar>(x: &FeatureMap<S>, alpha: &[S]) -> Result<FeatureMap<S>> {
    let params = ActivationParams::new(alpha.to_vec(), alpha.to_vec())?;
    snake_beta(x, &params)
}

/// Element-wise hyperbolic tangent.
pub fn tanh_out<S: Scalar>(x: &FeatureMap<S>) -> FeatureMap<S> {
    let mut out = x.clone();
    for c in 0..out.channels() {
        for v in out.channel_mut(c) {
            *v = v.tanh();
        }
    }
    out
}

/// Per-channel arithmetic mean over non-overlapping windows. Frames must be
/// divisible by the window; callers pad beforehand.
pub fn avg_pool<S: Scalar>(x: &FeatureMap<S>, window: usize) -> Result<FeatureMap<S>> {
    if window == 0 {
        return Err(Error::config("pooling window must be positive"));
    }
    if x.frames() % window != 0 {
        return Err(Error::config(format!(
            "{} frames not divisible by pooling window {}",
            x.frames(),
            window
        )));
    }
    let out_frames = x.frames() / window;
    let inv = scalar::<S>(1.0) / scalar::<S>(window as f64);
    let mut out = FeatureMap::zeros(x.channels(), out_frames);
    for c in 0..x.channels() {
        let row = x.channel(c);
        let out_row = out.channel_mut(c);
        for (t, chunk) in row.chunks_exact(window).enumerate() {
            let mut acc = S::zero();
            for v in chunk {
                acc += *v;
            }
            out_row[t] = acc * inv;
        }
    }
    Ok(out)
}

/// Nearest-neighbor upsampling along frames: every frame is repeated
/// `factor` times.
pub fn repeat_frames<S: Scalar>(x: &FeatureMap<S>, factor: usize) -> Result<FeatureMap<S>> {
    if factor == 0 {
        return Err(Error::config("repeat factor must be positive"));
    }
    let mut out = FeatureMap::zeros(x.channels(), x.frames() * factor);
    for c in 0..x.channels() {
        let row = x.channel(c);
        let out_row = out.channel_mut(c);
        for (t, v) in row.iter().enumerate() {
            for r in 0..factor {
                out_row[t * factor + r] = *v;
            }
        }
    }
    Ok(out)
}
