//! The release gate. Each check here corresponds to one numbered acceptance
//! criterion and prints a single `[acceptance] criterion N: PASS` line once
//! its assertions hold; run with `--nocapture` to see the lines.


use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use ldcodec::graph::{
    build_decoder, decoder_complexity, random_weights, DecoderSpec, ModelWeights, Tensor,
};
use ldcodec::io::{
    read_bitstream, weights_from_bytes, weights_to_bytes, write_bitstream, ActEncoding,
};
use ldcodec::lsrvq::{
    bitrate, fit_codebooks, lsrvq_decode, lsrvq_encode, lt_extract, rvq_encode, st_extract,
    Codebook, CodedStream, ExtractorVariant, ExtractorWeights, LsrvqConfig, LsrvqStacks,
    RvqStack, StageConfig, StreamLayout,
};
use ldcodec::metrics::{
    default_scales, detect_transients, energy_weighted_l1, log_mel, mel_energy_loss,
    mel_transient_loss, perceptual_mel_loss, spectral_distances, transient_weighted_l1,
    LogMelGrid, TransientFlags,
};
use ldcodec::tensor::{
    conv1d, conv_transpose1d, snake, snake_beta, ActivationParams, ConvSpec, FeatureMap,
};
use ldcodec::Sample;

const HEADER_BYTES: usize = 23;

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn random_vec(rng: &mut StdRng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn random_map(rng: &mut StdRng, channels: usize, frames: usize, scale: f64) -> FeatureMap<f64> {
    FeatureMap::new(channels, frames, random_vec(rng, channels * frames, scale)).unwrap()
}

fn gaussian(rng: &mut StdRng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Frames drawn from a few spherical Gaussians with distinct centers.
fn mixture_features(rng: &mut StdRng, dim: usize, frames: usize) -> FeatureMap<f64> {
    let centers: Vec<Vec<f64>> = (0..4).map(|_| random_vec(rng, dim, 3.0)).collect();
    let mut data = vec![0.0; dim * frames];
    for f in 0..frames {
        let c = &centers[rng.gen_range(0..centers.len())];
        for d in 0..dim {
            data[d * frames + f] = c[d] + 0.3 * gaussian(rng);
        }
    }
    FeatureMap::new(dim, frames, data).unwrap()
}

fn squared_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn dot_map(a: &FeatureMap<f64>, b: &FeatureMap<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn random_stack(rng: &mut StdRng, layers: usize, entries: usize, dim: usize) -> RvqStack<f64> {
    let cbs = (0..layers)
        .map(|_| {
            let e: Vec<Vec<f64>> = (0..entries).map(|_| random_vec(rng, dim, 2.0)).collect();
            Codebook::from_entries(&e).unwrap()
        })
        .collect();
    RvqStack::new(cbs).unwrap()
}

fn stack_entries(stack: &RvqStack<f64>) -> Vec<Vec<Vec<f64>>> {
    stack
        .layers()
        .iter()
        .map(|cb| (0..cb.len()).map(|i| cb.entry(i).to_vec()).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// 1. Bitrate law

#[test]
fn criterion_1_bitrate_law() {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x1db1);
    for _ in 0..200 {
        let cfg = LsrvqConfig {
            step: rng.gen_range(1..=16),
            frame_rate: rng.gen_range(1..=200),
            lt: StageConfig {
                layers: rng.gen_range(0..=4),
                size: 1 << rng.gen_range(1..=15),
            },
            st: StageConfig {
                layers: rng.gen_range(0..=4),
                size: 1 << rng.gen_range(1..=15),
            },
            extractor: ExtractorVariant::AvgPooling,
            beam_width: 1,
        };
        cfg.validate().unwrap();

        // All sizes are powers of two, so bits per code and log2(size) agree
        // and the law can be evaluated with integer bit counts.
        let s = cfg.frame_rate as f64;
        let lt_bits = cfg.lt.size.ilog2() as usize;
        let st_bits = cfg.st.size.ilog2() as usize;
        let expected = s / cfg.step as f64 * (cfg.lt.layers * lt_bits) as f64
            + s * (cfg.st.layers * st_bits) as f64;
        let reported = bitrate(&cfg).unwrap();
        assert!(
            (reported - expected).abs() <= 1e-9 * expected.max(1.0),
            "bitrate {reported} disagrees with the law's {expected}"
        );

        // A real ten-second container must carry exactly one block's worth of
        // slack or less against the law.
        let frames = 10 * cfg.frame_rate;
        let layout = StreamLayout::from_config(&cfg);
        let blocks = frames.div_ceil(cfg.step);
        let lt_codes = (0..blocks)
            .map(|_| (0..cfg.lt.layers).map(|_| rng.gen_range(0..cfg.lt.size)).collect())
            .collect();
        let st_codes = (0..blocks * cfg.step)
            .map(|_| (0..cfg.st.layers).map(|_| rng.gen_range(0..cfg.st.size)).collect())
            .collect();
        let stream = CodedStream {
            layout,
            frames,
            lt_codes,
            st_codes,
        };
        let bytes = write_bitstream(&stream, 16000).unwrap();
        let block_bits = cfg.lt.layers * lt_bits + cfg.step * cfg.st.layers * st_bits;
        let payload = blocks * block_bits;
        assert_eq!(
            bytes.len(),
            HEADER_BYTES + payload.div_ceil(8),
            "container length disagrees with independent bit accounting"
        );
        assert!(
            (payload as f64 - 10.0 * expected).abs() <= block_bits as f64,
            "ten-second payload {payload} bits strays more than one block from {}",
            10.0 * expected
        );
    }
    assert!(started.elapsed().as_secs_f64() < 5.0, "bitrate sweep too slow");
    println!("[acceptance] criterion 1: PASS");
}

// ---------------------------------------------------------------------------
// 2. Complexity calibration

#[test]
fn criterion_2_complexity_calibration() {
    let (model, _) = ldcodec::io::load_config(config_path("reference.cfg")).unwrap();
    let report = decoder_complexity(&model.decoder_spec(), 1.0, model.sample_rate).unwrap();
    assert!(
        (report.gmacs_per_second - 0.26).abs() <= 0.26 * 0.15,
        "reference decoder costs {} GMACs/s, outside the advertised 0.26 +/- 15%",
        report.gmacs_per_second
    );

    let mut rng = StdRng::seed_from_u64(0x2ca1);
    for _ in 0..5 {
        let blocks = rng.gen_range(1..=2);
        let groups = rng.gen_range(1..=2);
        let spec = DecoderSpec {
            latent_dim: rng.gen_range(2..=4),
            initial_channels: (1 << blocks) * groups * rng.gen_range(1..=2),
            upsample_factors: (0..blocks).map(|_| rng.gen_range(2..=5)).collect(),
            dilations: (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(1..=3)).collect(),
            groups,
            expand_ratio: rng.gen_range(1..=2),
            output_kernel: 2 * rng.gen_range(1..=3) + 1,
        };
        spec.validate().unwrap();
        let frames = rng.gen_range(2..=3);
        let stride = spec.stride_product();
        let weights = random_weights::<f64>(&spec.layout().unwrap(), rng.gen());
        let latent: Vec<Vec<f64>> = (0..spec.latent_dim)
            .map(|_| random_vec(&mut rng, frames, 1.0))
            .collect();

        let mut counted = 0u64;
        let audio = oracles::naive_decoder_forward(&spec, &weights, &latent, &mut counted);
        assert_eq!(audio.len(), frames * stride);

        let report = decoder_complexity(&spec, 1.0, (frames * stride) as u32).unwrap();
        assert_eq!(
            report.total_macs, counted,
            "report disagrees with the instrumented forward pass"
        );
    }
    println!("[acceptance] criterion 2: PASS");
}

// ---------------------------------------------------------------------------
// 3. RVQ search guarantees

#[test]
fn criterion_3_rvq_properties() {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x3a7e);

    // Greedy residual norms never grow across the layers of a fitted stack,
    // even for probe vectors far off the training data.
    let features = mixture_features(&mut rng, 4, 400);
    let cfg = LsrvqConfig {
        step: 1,
        frame_rate: 50,
        lt: StageConfig { layers: 0, size: 4 },
        st: StageConfig { layers: 4, size: 8 },
        extractor: ExtractorVariant::AvgPooling,
        beam_width: 1,
    };
    let stack = fit_codebooks(&[features], &cfg, 11).unwrap().st;
    for _ in 0..1000 {
        let v = random_vec(&mut rng, 4, 6.0);
        let mut prev = squared_norm(&v);
        for depth in 1..=stack.len() {
            let (_, err) = rvq_encode(&stack.truncated(depth), &v, 1).unwrap();
            assert!(err <= prev, "residual grew at layer {depth}: {prev} -> {err}");
            prev = err;
        }
    }

    // Widening the beam can only help.
    for _ in 0..300 {
        let layers = rng.gen_range(1..=4);
        let entries = rng.gen_range(2..=6);
        let dim = rng.gen_range(1..=4);
        let stack = random_stack(&mut rng, layers, entries, dim);
        let v = random_vec(&mut rng, dim, 3.0);
        let (_, greedy) = rvq_encode(&stack, &v, 1).unwrap();
        let (_, beam) = rvq_encode(&stack, &v, rng.gen_range(2..=6)).unwrap();
        assert!(beam <= greedy, "beam {beam} worse than greedy {greedy}");
    }

    // An exhaustive-width beam must find the brute-force optimum.
    for _ in 0..100 {
        let layers = rng.gen_range(1..=3);
        let entries = rng.gen_range(2..=4);
        let dim = rng.gen_range(1..=3);
        let stack = random_stack(&mut rng, layers, entries, dim);
        let v = random_vec(&mut rng, dim, 3.0);
        let width = entries.pow(layers as u32);
        let (_, beam) = rvq_encode(&stack, &v, width).unwrap();
        let (_, brute) = oracles::exhaustive_rvq(&stack_entries(&stack), &v);
        assert!(
            (beam - brute).abs() <= 1e-12 * brute.max(1.0),
            "exhaustive beam error {beam} misses the optimum {brute}"
        );
    }

    assert!(started.elapsed().as_secs_f64() < 30.0, "search sweep too slow");
    println!("[acceptance] criterion 3: PASS");
}

// ---------------------------------------------------------------------------
// 4. Quantizer pipeline identities

#[test]
fn criterion_4_lsrvq_identities() {
    let mut rng = StdRng::seed_from_u64(0x4b0b);

    // With codebooks that can represent every pooled block and every frame
    // residual exactly, the pooling pipeline is a perfect reconstruction.
    let dim = 3;
    let cfg = LsrvqConfig {
        step: 3,
        frame_rate: 50,
        lt: StageConfig { layers: 1, size: 4 },
        st: StageConfig { layers: 1, size: 16 },
        extractor: ExtractorVariant::AvgPooling,
        beam_width: 1,
    };
    let x = random_map(&mut rng, dim, 12, 1.0);
    let lt_f = lt_extract(&x, &cfg, None).unwrap();
    let lt_entries: Vec<Vec<f64>> = (0..lt_f.frames()).map(|b| lt_f.frame(b)).collect();
    let st_f = st_extract(&x, &lt_f, &cfg, None).unwrap();
    let mut st_entries: Vec<Vec<f64>> = (0..st_f.frames()).map(|f| st_f.frame(f)).collect();
    for i in 0..4 {
        st_entries.push(vec![50.0 + i as f64; dim]); // fill to the configured size
    }
    let stacks = LsrvqStacks {
        lt: RvqStack::new(vec![Codebook::from_entries(&lt_entries).unwrap()]).unwrap(),
        st: RvqStack::new(vec![Codebook::from_entries(&st_entries).unwrap()]).unwrap(),
        extractor: None,
    };
    let decoded = lsrvq_decode(&lsrvq_encode(&x, &cfg, &stacks).unwrap(), &cfg, &stacks).unwrap();
    assert_eq!(decoded.frames(), x.frames());
    for (a, b) in x.data().iter().zip(decoded.data()) {
        assert!((a - b).abs() <= 1e-6, "lossless pipeline drifted: {a} vs {b}");
    }

    // The learned extractor, loaded with uniform averaging weights, matches
    // the pooling variant code for code.
    let cfg_avg = LsrvqConfig {
        step: 2,
        frame_rate: 50,
        lt: StageConfig { layers: 2, size: 8 },
        st: StageConfig { layers: 2, size: 8 },
        extractor: ExtractorVariant::AvgPooling,
        beam_width: 2,
    };
    let train = random_map(&mut rng, dim, 60, 1.0);
    let fitted = fit_codebooks(&[train], &cfg_avg, 23).unwrap();
    let mut cfg_conv = cfg_avg.clone();
    cfg_conv.extractor = ExtractorVariant::Conv;
    let conv_stacks = LsrvqStacks {
        lt: fitted.lt.clone(),
        st: fitted.st.clone(),
        extractor: Some(ExtractorWeights::pooling_equivalent(dim, cfg_conv.step)),
    };
    let probe = random_map(&mut rng, dim, 9, 1.0);
    let stream_avg = lsrvq_encode(&probe, &cfg_avg, &fitted).unwrap();
    let stream_conv = lsrvq_encode(&probe, &cfg_conv, &conv_stacks).unwrap();
    assert_eq!(stream_avg.lt_codes, stream_conv.lt_codes);
    assert_eq!(stream_avg.st_codes, stream_conv.st_codes);
    let out_avg = lsrvq_decode(&stream_avg, &cfg_avg, &fitted).unwrap();
    let out_conv = lsrvq_decode(&stream_conv, &cfg_conv, &conv_stacks).unwrap();
    for (a, b) in out_avg.data().iter().zip(out_conv.data()) {
        assert!((a - b).abs() <= 1e-6, "extractor variants disagree: {a} vs {b}");
    }

    // Every added fitted layer can only lower the total distortion.
    let gm = mixture_features(&mut rng, 3, 300);
    let cfg_depth = LsrvqConfig {
        step: 1,
        frame_rate: 50,
        lt: StageConfig { layers: 0, size: 4 },
        st: StageConfig { layers: 5, size: 8 },
        extractor: ExtractorVariant::AvgPooling,
        beam_width: 1,
    };
    let deep = fit_codebooks(&[gm.clone()], &cfg_depth, 31).unwrap().st;
    let mut prev: f64 = (0..gm.frames()).map(|f| squared_norm(&gm.frame(f))).sum();
    for depth in 1..=deep.len() {
        let trunc = deep.truncated(depth);
        let mut total = 0.0;
        for f in 0..gm.frames() {
            total += rvq_encode(&trunc, &gm.frame(f), 1).unwrap().1;
        }
        assert!(total <= prev, "distortion rose at depth {depth}: {prev} -> {total}");
        prev = total;
    }

    println!("[acceptance] criterion 4: PASS");
}

// ---------------------------------------------------------------------------
// 5. Kernel correctness

#[test]
fn criterion_5_kernel_correctness() {
    let mut rng = StdRng::seed_from_u64(0x5eed);

    // The transposed convolution is the exact adjoint of the forward one
    // with the same weight buffer: <conv(x), y> == <x, conv_t(y)>.
    let mut done = 0;
    while done < 100 {
        let groups = rng.gen_range(1..=2);
        let a = groups * rng.gen_range(1..=3);
        let b = groups * rng.gen_range(1..=3);
        let kernel = rng.gen_range(1..=4);
        let stride = rng.gen_range(1..=3);
        let dilation = rng.gen_range(1..=3);
        let padding = rng.gen_range(0..=3);
        let span = dilation * (kernel - 1) + 1;
        let ft = rng.gen_range(1..=8);
        let m = (ft - 1) * stride + span;
        if m <= 2 * padding {
            continue;
        }
        let m = m - 2 * padding;
        done += 1;

        let forward = ConvSpec {
            in_channels: b,
            out_channels: a,
            kernel_size: kernel,
            stride,
            dilation,
            groups,
            padding,
            transposed: false,
        };
        let transposed = ConvSpec {
            in_channels: a,
            out_channels: b,
            transposed: true,
            ..forward
        };
        let weights = random_vec(&mut rng, a * (b / groups) * kernel, 1.0);
        let x = random_map(&mut rng, b, m, 1.0);
        let y = random_map(&mut rng, a, ft, 1.0);
        let fwd = conv1d(&x, &forward, &weights, &vec![0.0; a]).unwrap();
        assert_eq!(fwd.frames(), ft);
        let bwd = conv_transpose1d(&y, &transposed, &weights, &vec![0.0; b]).unwrap();
        assert_eq!(bwd.frames(), m);
        let lhs = dot_map(&fwd, &y);
        let rhs = dot_map(&x, &bwd);
        assert!(
            (lhs - rhs).abs() <= 1e-6 * lhs.abs().max(rhs.abs()).max(1.0),
            "adjoint identity broke: {lhs} vs {rhs}"
        );
    }

    // Produced frame counts follow the closed forms exactly.
    let mut checked = 0;
    for kernel in 1..=5usize {
        for stride in 1..=3usize {
            for dilation in 1..=3usize {
                for padding in 0..=3usize {
                    for frames in 1..=10usize {
                        let span = dilation * (kernel - 1) + 1;
                        let spec = ConvSpec {
                            in_channels: 1,
                            out_channels: 1,
                            kernel_size: kernel,
                            stride,
                            dilation,
                            groups: 1,
                            padding,
                            transposed: false,
                        };
                        let w = random_vec(&mut rng, kernel, 1.0);
                        let x = random_map(&mut rng, 1, frames, 1.0);
                        if frames + 2 * padding >= span {
                            let expect = (frames + 2 * padding - span) / stride + 1;
                            let out = conv1d(&x, &spec, &w, &[0.0]).unwrap();
                            assert_eq!(out.frames(), expect);
                            checked += 1;
                        }
                        let up = (frames - 1) * stride + span;
                        if up > 2 * padding {
                            let spec_t = ConvSpec {
                                transposed: true,
                                ..spec
                            };
                            let out = conv_transpose1d(&x, &spec_t, &w, &[0.0]).unwrap();
                            assert_eq!(out.frames(), up - 2 * padding);
                            checked += 1;
                        }
                    }
                }
            }
        }
    }
    assert!(checked > 500);

    // The periodic activation matches its scalar definition, and the
    // single-parameter form is the two-parameter form with alpha == beta.
    let channels = 5;
    let x = random_map(&mut rng, channels, 40, 3.0);
    let alpha: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.05..4.0)).collect();
    let beta: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.05..4.0)).collect();
    let params = ActivationParams::new(alpha.clone(), beta.clone()).unwrap();
    let y = snake_beta(&x, &params).unwrap();
    for c in 0..channels {
        for (xv, yv) in x.channel(c).iter().zip(y.channel(c)) {
            let direct = xv + (alpha[c] * xv).sin().powi(2) / beta[c];
            assert!(
                (yv - direct).abs() <= 1e-9 * direct.abs().max(1.0),
                "activation drifted from its definition: {yv} vs {direct}"
            );
        }
    }
    let equal = ActivationParams::new(alpha.clone(), alpha.clone()).unwrap();
    assert_eq!(
        snake(&x, &alpha).unwrap().data(),
        snake_beta(&x, &equal).unwrap().data(),
        "alpha == beta must reduce exactly to the baseline activation"
    );

    println!("[acceptance] criterion 5: PASS");
}

// ---------------------------------------------------------------------------
// 6. Loss identities

#[test]
fn criterion_6_loss_identities() {
    let mut rng = StdRng::seed_from_u64(0x6c05);
    let sr = 16000;
    let x: Vec<f64> = (0..2400).map(|_| rng.gen_range(-0.8..0.8)).collect();
    let g: Vec<f64> = (0..2400).map(|_| rng.gen_range(-0.8..0.8)).collect();

    // Identical signals measure zero everywhere.
    let same = spectral_distances(&x, &x, sr).unwrap();
    assert_eq!(same.mel_distance, 0.0);
    assert_eq!(same.stft_distance, 0.0);
    assert_eq!(perceptual_mel_loss(&x, &x, &default_scales(sr)).unwrap().total, 0.0);

    // With no flagged frames the transient weighting is plain L1.
    let ga = LogMelGrid::new(7, 5, random_vec(&mut rng, 35, 4.0)).unwrap();
    let gb = LogMelGrid::new(7, 5, random_vec(&mut rng, 35, 4.0)).unwrap();
    let unflagged = TransientFlags::new(vec![false; 7]);
    let weighted = transient_weighted_l1(&ga, &gb, &unflagged).unwrap();
    let plain = ga
        .data()
        .iter()
        .zip(gb.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / ga.data().len() as f64;
    assert_eq!(weighted, plain);

    // Excess decoded energy in a single bin costs exactly twice.
    let mut spike = vec![0.0; 24];
    spike[13] = 0.7;
    let loud = LogMelGrid::new(6, 4, spike.clone()).unwrap();
    let quiet = LogMelGrid::new(6, 4, vec![0.0; 24]).unwrap();
    let decoded_quiet = energy_weighted_l1(&loud, &quiet).unwrap();
    let decoded_loud = energy_weighted_l1(&quiet, &loud).unwrap();
    assert_eq!(decoded_loud, 2.0 * decoded_quiet);

    // The multi-scale losses are exactly the mean of their per-scale parts.
    let scales = default_scales(sr);
    let mut transient_sum = 0.0;
    let mut energy_sum = 0.0;
    for scale in &scales {
        let gx = log_mel(&x, scale).unwrap();
        let gg = log_mel(&g, scale).unwrap();
        let flags = detect_transients(&x, scale).unwrap();
        transient_sum += transient_weighted_l1(&gx, &gg, &flags).unwrap();
        energy_sum += energy_weighted_l1(&gx, &gg).unwrap();
    }
    let n = scales.len() as f64;
    assert_eq!(mel_transient_loss(&x, &g, &scales).unwrap(), transient_sum / n);
    assert_eq!(mel_energy_loss(&x, &g, &scales).unwrap(), energy_sum / n);
    let report = perceptual_mel_loss(&x, &g, &scales).unwrap();
    assert_eq!(report.total, report.transient + report.energy);

    println!("[acceptance] criterion 6: PASS");
}

// ---------------------------------------------------------------------------
// 7. Wire formats

#[test]
fn criterion_7_serialization() {
    let mut rng = StdRng::seed_from_u64(0x7a11);

    for _ in 0..1000 {
        let mut weights = ModelWeights::<f32>::new();
        for t in 0..rng.gen_range(1..=3) {
            let rank = rng.gen_range(0..=3);
            let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=4)).collect();
            let len = shape.iter().product::<usize>();
            let data: Vec<f32> = (0..len).map(|_| rng.gen_range(-100.0..100.0)).collect();
            let suffix = ["weight", "bias", "gain"][rng.gen_range(0..3)];
            weights
                .insert(format!("part{t}.{suffix}"), Tensor::new(shape, data).unwrap())
                .unwrap();
        }
        let bytes = weights_to_bytes(&weights, ActEncoding::Plain).unwrap();
        let back = weights_from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(weights_to_bytes(&back, ActEncoding::Plain).unwrap(), bytes);
        for (name, tensor) in weights.iter() {
            let reread = back.get(name).unwrap();
            assert_eq!(reread.shape(), tensor.shape());
            assert_eq!(reread.data(), tensor.data());
        }
    }

    for _ in 0..1000 {
        let layout = StreamLayout {
            step: rng.gen_range(1..=5),
            lt_layers: rng.gen_range(0..=3),
            lt_size: 1 << rng.gen_range(1..=12),
            st_layers: rng.gen_range(0..=3),
            st_size: 1 << rng.gen_range(1..=12),
        };
        let frames = rng.gen_range(0..=16);
        let blocks = layout.blocks(frames);
        let stream = CodedStream {
            layout,
            frames,
            lt_codes: (0..blocks)
                .map(|_| (0..layout.lt_layers).map(|_| rng.gen_range(0..layout.lt_size)).collect())
                .collect(),
            st_codes: (0..layout.padded_frames(frames))
                .map(|_| (0..layout.st_layers).map(|_| rng.gen_range(0..layout.st_size)).collect())
                .collect(),
        };
        let rate = rng.gen_range(8000..=48000);
        let bytes = write_bitstream(&stream, rate).unwrap();
        let (back, back_rate) = read_bitstream(&bytes).unwrap();
        assert_eq!(back, stream);
        assert_eq!(back_rate, rate);
        assert_eq!(write_bitstream(&back, back_rate).unwrap(), bytes);
    }

    // Hand-packed check: code 3 in 4 bits lands MSB-first as 0x30.
    let single = CodedStream {
        layout: StreamLayout {
            step: 1,
            lt_layers: 1,
            lt_size: 16,
            st_layers: 0,
            st_size: 2,
        },
        frames: 1,
        lt_codes: vec![vec![3]],
        st_codes: vec![vec![]],
    };
    let bytes = write_bitstream(&single, 16000).unwrap();
    assert_eq!(bytes.len(), HEADER_BYTES + 1);
    assert_eq!(bytes[HEADER_BYTES], 0x30);

    println!("[acceptance] criterion 7: PASS");
}

// ---------------------------------------------------------------------------
// 8. End-to-end smoke

fn run(binary: &str, args: &[&str]) -> String {
    let output = Command::new(binary).args(args).output().unwrap();
    assert!(
        output.status.success(),
        "{} {:?} failed:\n{}",
        binary,
        args,
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8(output.stdout).unwrap()
}

fn stdout_value(stdout: &str, key: &str) -> f64 {
    stdout
        .lines()
        .find_map(|line| line.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no `{key}` line in:\n{stdout}"))
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn criterion_8_end_to_end_smoke() {
    let bin = env!("CARGO_BIN_EXE_ldcodec");
    let dir = tempfile::tempdir().unwrap();
    let config = config_path("demo.cfg");
    let config = config.to_str().unwrap();

    // One second of a 441 Hz tone; the period does not divide the frame
    // hop, so every analysis frame sees a fresh phase.
    let tone_path = dir.path().join("tone.wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(&tone_path, spec).unwrap();
    for n in 0..16000 {
        let v = 0.5 * (std::f64::consts::TAU * 441.0 * n as f64 / 16000.0).sin();
        writer.write_sample((v * 32767.0).round() as i16).unwrap();
    }
    writer.finalize().unwrap();

    let model = dir.path().join("model.ldcw");
    let codec = dir.path().join("codec.ldcw");
    let out = dir.path().join("out.wav");
    run(bin, &["init-model", "--config", config, "--output", model.to_str().unwrap()]);
    run(
        bin,
        &[
            "fit-quantizer",
            "--config",
            config,
            "--corpus",
            dir.path().to_str().unwrap(),
            "--output",
            codec.to_str().unwrap(),
            "--model",
            model.to_str().unwrap(),
        ],
    );
    let stdout = run(
        bin,
        &[
            "roundtrip",
            "--model",
            codec.to_str().unwrap(),
            "--config",
            config,
            "--input",
            tone_path.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
        ],
    );

    // 16000 samples are exactly 50 feature frames, so the duration must
    // survive unchanged and the measured rate must equal the law's value:
    // 25 blocks * (2*4 + 2*3*4) bits over one second.
    let reader = hound::WavReader::open(&out).unwrap();
    assert_eq!(reader.spec().sample_rate, 16000);
    assert_eq!(reader.len(), 16000, "roundtrip changed the duration");
    let measured = stdout_value(&stdout, "measured_bitrate_bps");
    assert!(
        (measured - 800.0).abs() < 0.05,
        "measured bitrate {measured} is not the 800 bps the layout implies"
    );

    // The reference decoder synthesizes one second comfortably faster than
    // five times realtime on a single thread.
    let spec = DecoderSpec::reference();
    let weights = random_weights::<Sample>(&spec.layout().unwrap(), 3);
    let decoder = build_decoder(&spec, &weights).unwrap();
    let mut rng = StdRng::seed_from_u64(0x8fa5);
    let frames = 16000 / spec.stride_product();
    let latent = FeatureMap::new(
        spec.latent_dim,
        frames,
        (0..spec.latent_dim * frames).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let warm = decoder.forward(&latent).unwrap();
    assert_eq!(warm.len(), 16000);
    let started = Instant::now();
    let audio = decoder.forward(&latent).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    assert_eq!(audio.len(), 16000);
    assert!(
        elapsed < 0.2,
        "one second of audio took {elapsed:.3} s to synthesize, under 5x realtime"
    );

    println!("[acceptance] criterion 8: PASS");
}
