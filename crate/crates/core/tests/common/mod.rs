//! Independent reference implementations used as oracles: direct-definition
//! convolutions over materialized padding with multiply counters, a naive
//! decoder/encoder walk, exhaustive RVQ search, and an O(n^2) DFT.

#![allow(dead_code)]

use ldcodec::graph::{DecoderSpec, EncoderSpec, ModelWeights};

/// Direct grouped convolution over an explicitly zero-padded copy of the
/// input. Counts one multiply per (out, in-group, tap, frame) tuple.
pub fn naive_conv(
    input: &[Vec<f64>],
    weight: &[f64],
    bias: &[f64],
    kernel: usize,
    stride: usize,
    dilation: usize,
    groups: usize,
    padding: usize,
    out_channels: usize,
    macs: &mut u64,
) -> Vec<Vec<f64>> {
    let in_channels = input.len();
    let frames = input[0].len();
    assert_eq!(in_channels % groups, 0);
    assert_eq!(out_channels % groups, 0);
    let in_per = in_channels / groups;
    let out_per = out_channels / groups;
    assert_eq!(weight.len(), out_channels * in_per * kernel);
    assert_eq!(bias.len(), out_channels);

    let padded: Vec<Vec<f64>> = input
        .iter()
        .map(|row| {
            let mut p = vec![0.0; frames + 2 * padding];
            p[padding..padding + frames].copy_from_slice(row);
            p
        })
        .collect();
    let span = dilation * (kernel - 1) + 1;
    assert!(frames + 2 * padding >= span, "kernel span exceeds padded input");
    let out_frames = (frames + 2 * padding - span) / stride + 1;

    let mut output = vec![vec![0.0; out_frames]; out_channels];
    for oc in 0..out_channels {
        let g = oc / out_per;
        for t in 0..out_frames {
            let mut acc = bias[oc];
            for ic_local in 0..in_per {
                let ic = g * in_per + ic_local;
                for k in 0..kernel {
                    let w = weight[(oc * in_per + ic_local) * kernel + k];
                    acc += w * padded[ic][t * stride + k * dilation];
                    *macs += 1;
                }
            }
            output[oc][t] = acc;
        }
    }
    output
}

/// Direct grouped transposed convolution: scatter every input frame into a
/// full unpadded buffer, then crop `padding` frames from both ends.
pub fn naive_conv_transpose(
    input: &[Vec<f64>],
    weight: &[f64],
    bias: &[f64],
    kernel: usize,
    stride: usize,
    dilation: usize,
    groups: usize,
    padding: usize,
    out_channels: usize,
    macs: &mut u64,
) -> Vec<Vec<f64>> {
    let in_channels = input.len();
    let frames = input[0].len();
    let in_per = in_channels / groups;
    let out_per = out_channels / groups;
    assert_eq!(weight.len(), in_channels * out_per * kernel);
    assert_eq!(bias.len(), out_channels);

    let full = (frames - 1) * stride + dilation * (kernel - 1) + 1;
    assert!(full > 2 * padding, "padding swallows the whole output");
    let mut buffer = vec![vec![0.0; full]; out_channels];
    for ic in 0..in_channels {
        let g = ic / in_per;
        for oc_local in 0..out_per {
            let oc = g * out_per + oc_local;
            for j in 0..frames {
                for k in 0..kernel {
                    let w = weight[(ic * out_per + oc_local) * kernel + k];
                    buffer[oc][j * stride + k * dilation] += w * input[ic][j];
                    *macs += 1;
                }
            }
        }
    }
    buffer
        .into_iter()
        .enumerate()
        .map(|(oc, row)| {
            row[padding..full - padding]
                .iter()
                .map(|v| v + bias[oc])
                .collect()
        })
        .collect()
}

pub fn naive_snake_beta(rows: &mut [Vec<f64>], alpha: &[f64], beta: &[f64]) {
    for (c, row) in rows.iter_mut().enumerate() {
        for v in row.iter_mut() {
            let s = (alpha[c] * *v).sin();
            *v += s * s / beta[c];
        }
    }
}

pub fn naive_snake(rows: &mut [Vec<f64>], alpha: &[f64]) {
    let beta = alpha.to_vec();
    naive_snake_beta(rows, alpha, &beta);
}

fn tensor_data(weights: &ModelWeights<f64>, name: &str) -> Vec<f64> {
    weights
        .get(name)
        .unwrap_or_else(|| panic!("missing tensor {name}"))
        .data()
        .to_vec()
}

/// Decoder forward pass rebuilt from the architecture description, counting
/// convolution multiplies.
pub fn naive_decoder_forward(
    spec: &DecoderSpec,
    weights: &ModelWeights<f64>,
    latent: &[Vec<f64>],
    macs: &mut u64,
) -> Vec<f64> {
    let w = |name: &str| tensor_data(weights, name);
    let mut x = naive_conv(
        latent,
        &w("decoder.input.weight"),
        &w("decoder.input.bias"),
        7,
        1,
        1,
        1,
        3,
        spec.initial_channels,
        macs,
    );

    for (k, &r) in spec.upsample_factors.iter().enumerate() {
        let out_ch = spec.initial_channels >> (k + 1);
        let mut up = naive_conv_transpose(
            &x,
            &w(&format!("decoder.block{k}.up.weight")),
            &w(&format!("decoder.block{k}.up.bias")),
            2 * r,
            r,
            1,
            1,
            r / 2,
            out_ch,
            macs,
        );
        if r % 2 == 1 {
            for row in up.iter_mut() {
                row.pop();
            }
        }
        x = up;

        for (u, &d) in spec.dilations.iter().enumerate() {
            let base = format!("decoder.block{k}.unit{u}");
            let expanded = out_ch * spec.expand_ratio;
            let mut h = naive_conv(
                &x,
                &w(&format!("{base}.expand.weight")),
                &w(&format!("{base}.expand.bias")),
                3,
                1,
                d,
                spec.groups,
                d,
                expanded,
                macs,
            );
            naive_snake_beta(
                &mut h,
                &w(&format!("{base}.snake.alpha")),
                &w(&format!("{base}.snake.beta")),
            );
            let shrunk = naive_conv(
                &h,
                &w(&format!("{base}.shrink.weight")),
                &w(&format!("{base}.shrink.bias")),
                1,
                1,
                1,
                spec.groups,
                0,
                out_ch,
                macs,
            );
            for (row, add) in x.iter_mut().zip(&shrunk) {
                for (v, a) in row.iter_mut().zip(add) {
                    *v += a;
                }
            }
        }
    }

    let out = naive_conv(
        &x,
        &w("decoder.output.weight"),
        &w("decoder.output.bias"),
        spec.output_kernel,
        1,
        1,
        1,
        spec.output_kernel / 2,
        1,
        macs,
    );
    out[0].iter().map(|v| v.tanh()).collect()
}

/// Encoder forward pass rebuilt from the architecture description.
pub fn naive_encoder_forward(
    spec: &EncoderSpec,
    weights: &ModelWeights<f64>,
    samples: &[f64],
    macs: &mut u64,
) -> Vec<Vec<f64>> {
    let w = |name: &str| tensor_data(weights, name);
    let mut x = naive_conv(
        &[samples.to_vec()],
        &w("encoder.input.weight"),
        &w("encoder.input.bias"),
        7,
        1,
        1,
        1,
        3,
        spec.base_channels,
        macs,
    );

    for (k, &r) in spec.strides.iter().enumerate() {
        let c = spec.base_channels << k;
        for (u, &d) in spec.dilations.iter().enumerate() {
            let base = format!("encoder.block{k}.unit{u}");
            let mut h = x.clone();
            naive_snake(&mut h, &w(&format!("{base}.snake1.alpha")));
            let mut h = naive_conv(
                &h,
                &w(&format!("{base}.conv1.weight")),
                &w(&format!("{base}.conv1.bias")),
                7,
                1,
                d,
                1,
                3 * d,
                c,
                macs,
            );
            naive_snake(&mut h, &w(&format!("{base}.snake2.alpha")));
            let h = naive_conv(
                &h,
                &w(&format!("{base}.conv2.weight")),
                &w(&format!("{base}.conv2.bias")),
                1,
                1,
                1,
                1,
                0,
                c,
                macs,
            );
            for (row, add) in x.iter_mut().zip(&h) {
                for (v, a) in row.iter_mut().zip(add) {
                    *v += a;
                }
            }
        }
        naive_snake(&mut x, &w(&format!("encoder.block{k}.down.snake.alpha")));
        x = naive_conv(
            &x,
            &w(&format!("encoder.block{k}.down.weight")),
            &w(&format!("encoder.block{k}.down.bias")),
            2 * r,
            r,
            1,
            1,
            r.div_ceil(2),
            2 * c,
            macs,
        );
    }

    naive_snake(&mut x, &w("encoder.final.snake.alpha"));
    naive_conv(
        &x,
        &w("encoder.final.weight"),
        &w("encoder.final.bias"),
        3,
        1,
        1,
        1,
        1,
        spec.latent_dim,
        macs,
    )
}

/// Tries every code combination across the layers and returns the best.
pub fn exhaustive_rvq(layers: &[Vec<Vec<f64>>], target: &[f64]) -> (Vec<usize>, f64) {
    let mut best_codes = vec![0; layers.len()];
    let mut best_err = f64::INFINITY;
    let mut codes = vec![0usize; layers.len()];
    loop {
        let mut err = 0.0;
        for (d, t) in target.iter().enumerate() {
            let mut sum = 0.0;
            for (l, layer) in layers.iter().enumerate() {
                sum += layer[codes[l]][d];
            }
            let diff = t - sum;
            err += diff * diff;
        }
        if err < best_err {
            best_err = err;
            best_codes = codes.clone();
        }
        let mut pos = layers.len();
        loop {
            if pos == 0 {
                return (best_codes, best_err);
            }
            pos -= 1;
            codes[pos] += 1;
            if codes[pos] < layers[pos].len() {
                break;
            }
            codes[pos] = 0;
        }
    }
}

/// O(n^2) DFT magnitudes, first `n/2 + 1` bins.
pub fn naive_dft_magnitude(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    let mut out = Vec::with_capacity(n / 2 + 1);
    for k in 0..=n / 2 {
        let mut re = 0.0;
        let mut im = 0.0;
        for (j, v) in frame.iter().enumerate() {
            let phase = -2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
            re += v * phase.cos();
            im += v * phase.sin();
        }
        out.push((re * re + im * im).sqrt());
    }
    out
}

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    let scale = 1.0_f64.max(a.abs()).max(b.abs());
    assert!(
        (a - b).abs() <= tol * scale,
        "{what}: {a} vs {b} (diff {})",
        (a - b).abs()
    );
}
