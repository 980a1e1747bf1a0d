//! `ldcodec`: encode/decode WAV files through the neural codec, analyze
//! reconstruction quality, report decoder complexity, and fit quantizer
//! codebooks.

mod wav;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ldcodec::graph::{
    build_decoder, build_encoder, decoder_complexity, random_weights, ModelConfig, ModelWeights,
};
use ldcodec::io::{
    load_config, load_weights, payload_bits, read_bitstream, save_weights, write_bitstream,
};
use ldcodec::lsrvq::{
    bitrate, fit_codebooks, lsrvq_decode, lsrvq_encode, stacks_from_weights, stacks_to_weights,
    CodedStream, LsrvqConfig, LsrvqStacks,
};
use ldcodec::metrics::{
    default_scales, perceptual_mel_loss, spectral_distances, MEL_LOSS_TRAINING_WEIGHT,
};
use ldcodec::tensor::FeatureMap;
use ldcodec::Sample;

#[derive(Parser)]
#[command(name = "ldcodec", version, about = "Low-complexity neural audio codec runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a WAV file to a coded bitstream.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Override the configured quantizer search width.
        #[arg(long)]
        beam_width: Option<usize>,
    },
    /// Decode a coded bitstream back to a WAV file.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Compare two WAV files with the perceptual spectral measures.
    Analyze {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        degraded: PathBuf,
        /// Also write the report to a file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the decoder's multiply-accumulate budget.
    Complexity {
        #[arg(long)]
        config: PathBuf,
        /// List every layer, not just the totals.
        #[arg(long)]
        per_layer: bool,
        #[arg(long, default_value_t = 1.0)]
        seconds: f64,
    },
    /// Fit quantizer codebooks on a directory of WAV files and write a
    /// complete weight file.
    FitQuantizer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Base model weights; fresh random weights are drawn when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Encode then immediately decode, reporting the measured bitrate.
    Roundtrip {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        beam_width: Option<usize>,
    },
    /// Write randomly initialized encoder/decoder weights for a config.
    InitModel {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Encode {
            model,
            config,
            input,
            output,
            beam_width,
        } => cmd_encode(&model, &config, &input, &output, beam_width),
        Command::Decode {
            model,
            config,
            input,
            output,
        } => cmd_decode(&model, &config, &input, &output),
        Command::Analyze {
            reference,
            degraded,
            report,
        } => cmd_analyze(&reference, &degraded, report.as_deref()),
        Command::Complexity {
            config,
            per_layer,
            seconds,
        } => cmd_complexity(&config, per_layer, seconds),
        Command::FitQuantizer {
            config,
            corpus,
            output,
            seed,
            model,
        } => cmd_fit_quantizer(&config, &corpus, &output, seed, model.as_deref()),
        Command::Roundtrip {
            model,
            config,
            input,
            output,
            beam_width,
        } => cmd_roundtrip(&model, &config, &input, &output, beam_width),
        Command::InitModel {
            config,
            output,
            seed,
        } => cmd_init_model(&config, &output, seed),
    }
}

fn load_configs(path: &Path) -> Result<(ModelConfig, LsrvqConfig)> {
    load_config(path).with_context(|| format!("cannot load config {}", path.display()))
}

fn load_model(path: &Path) -> Result<ModelWeights<Sample>> {
    load_weights(path).with_context(|| format!("cannot load weights {}", path.display()))
}

fn load_stacks(weights: &ModelWeights<Sample>, cfg: &LsrvqConfig) -> Result<LsrvqStacks<Sample>> {
    stacks_from_weights(weights, cfg)
        .context("model file has no usable quantizer codebooks (run fit-quantizer first)")
}

fn check_rate(model: &ModelConfig) -> Result<()> {
    if model.sample_rate != wav::REQUIRED_RATE {
        bail!(
            "config sample rate {} does not match the {} Hz WAV contract",
            model.sample_rate,
            wav::REQUIRED_RATE
        );
    }
    Ok(())
}

fn pad_to_multiple(mut samples: Vec<Sample>, stride: usize) -> Vec<Sample> {
    let rem = samples.len() % stride;
    if rem != 0 {
        samples.resize(samples.len() + stride - rem, 0.0);
    }
    samples
}

fn encode_stream(
    weights: &ModelWeights<Sample>,
    model_cfg: &ModelConfig,
    quant_cfg: &LsrvqConfig,
    samples: Vec<Sample>,
) -> Result<CodedStream> {
    if samples.is_empty() {
        bail!("input audio is empty");
    }
    let encoder = build_encoder(&model_cfg.encoder_spec(), weights)?;
    let stacks = load_stacks(weights, quant_cfg)?;
    let padded = pad_to_multiple(samples, model_cfg.stride_product());
    let features = encoder.forward(&padded)?;
    Ok(lsrvq_encode(&features, quant_cfg, &stacks)?)
}

fn cmd_encode(
    model: &Path,
    config: &Path,
    input: &Path,
    output: &Path,
    beam_width: Option<usize>,
) -> Result<()> {
    let (model_cfg, mut quant_cfg) = load_configs(config)?;
    check_rate(&model_cfg)?;
    if let Some(width) = beam_width {
        quant_cfg.beam_width = width;
    }
    let weights = load_model(model)?;
    let samples = wav::read_wav(input)?;
    let stream = encode_stream(&weights, &model_cfg, &quant_cfg, samples)?;
    let bytes = write_bitstream(&stream, model_cfg.sample_rate)?;
    fs::write(output, &bytes).with_context(|| format!("cannot write {}", output.display()))?;
    println!(
        "wrote {} ({} bytes, {} feature frames)",
        output.display(),
        bytes.len(),
        stream.frames
    );
    Ok(())
}

fn cmd_decode(model: &Path, config: &Path, input: &Path, output: &Path) -> Result<()> {
    let (model_cfg, quant_cfg) = load_configs(config)?;
    let weights = load_model(model)?;
    let bytes = fs::read(input).with_context(|| format!("cannot read {}", input.display()))?;
    let (stream, rate) = read_bitstream(&bytes)?;
    if rate != model_cfg.sample_rate {
        bail!(
            "bitstream sample rate {rate} does not match the config's {}",
            model_cfg.sample_rate
        );
    }
    let stacks = load_stacks(&weights, &quant_cfg)?;
    let features = lsrvq_decode(&stream, &quant_cfg, &stacks)?;
    let decoder = build_decoder(&model_cfg.decoder_spec(), &weights)?;
    let samples = decoder.forward(&features)?;
    wav::write_wav(output, &samples, rate)?;
    println!(
        "wrote {} ({} samples at {rate} Hz)",
        output.display(),
        samples.len()
    );
    Ok(())
}

fn quality_report(reference: &[Sample], degraded: &[Sample], sample_rate: u32) -> Result<String> {
    let n = reference.len().min(degraded.len());
    if n == 0 {
        bail!("cannot compare empty audio");
    }
    let (x, g) = (&reference[..n], &degraded[..n]);
    let spectral = spectral_distances(x, g, sample_rate)?;
    let mel = perceptual_mel_loss(x, g, &default_scales(sample_rate))?;
    let mut out = String::new();
    out.push_str(&format!("samples: {n}\n"));
    out.push_str(&format!("sample_rate: {sample_rate}\n"));
    out.push_str(&format!("mel_distance: {:.6}\n", spectral.mel_distance));
    out.push_str(&format!("stft_distance: {:.6}\n", spectral.stft_distance));
    out.push_str(&format!("transient_loss: {:.6}\n", mel.transient));
    out.push_str(&format!("energy_loss: {:.6}\n", mel.energy));
    out.push_str(&format!("perceptual_total: {:.6}\n", mel.total));
    out.push_str(&format!(
        "mel_loss_training_weight: {MEL_LOSS_TRAINING_WEIGHT:.1}\n"
    ));
    Ok(out)
}

fn cmd_analyze(reference: &Path, degraded: &Path, report: Option<&Path>) -> Result<()> {
    let x = wav::read_wav(reference)?;
    let g = wav::read_wav(degraded)?;
    let text = quality_report(&x, &g, wav::REQUIRED_RATE)?;
    print!("{text}");
    if let Some(path) = report {
        fs::write(path, &text).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

fn cmd_complexity(config: &Path, per_layer: bool, seconds: f64) -> Result<()> {
    let (model_cfg, quant_cfg) = load_configs(config)?;
    let report = decoder_complexity(&model_cfg.decoder_spec(), seconds, model_cfg.sample_rate)?;
    print!("{}", report.render(per_layer));
    println!("bitrate_bps: {:.1}", bitrate(&quant_cfg)?);
    Ok(())
}

fn wav_corpus(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read corpus directory {}", dir.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .wav files in {}", dir.display());
    }
    Ok(files)
}

fn cmd_fit_quantizer(
    config: &Path,
    corpus: &Path,
    output: &Path,
    seed: u64,
    model: Option<&Path>,
) -> Result<()> {
    let (model_cfg, quant_cfg) = load_configs(config)?;
    check_rate(&model_cfg)?;
    let base = match model {
        Some(path) => load_model(path)?,
        None => random_weights(&model_cfg.layout()?, seed),
    };
    let encoder = build_encoder(&model_cfg.encoder_spec(), &base)?;

    let files = wav_corpus(corpus)?;
    let stride = model_cfg.stride_product();
    let mut features: Vec<FeatureMap<Sample>> = Vec::with_capacity(files.len());
    let mut frames = 0usize;
    for file in &files {
        let samples = wav::read_wav(file)?;
        if samples.is_empty() {
            bail!("{}: empty audio", file.display());
        }
        let map = encoder.forward(&pad_to_multiple(samples, stride))?;
        frames += map.frames();
        features.push(map);
    }

    let stacks = fit_codebooks(&features, &quant_cfg, seed)?;
    let mut out = ModelWeights::new();
    for (name, tensor) in base.iter() {
        if !name.starts_with("quantizer.") {
            out.insert(name, tensor.clone())?;
        }
    }
    out.merge(stacks_to_weights(&stacks)?)?;
    save_weights(output, &out)?;
    println!(
        "fitted on {} files ({frames} frames); wrote {} ({} tensors)",
        files.len(),
        output.display(),
        out.len()
    );
    Ok(())
}

fn cmd_roundtrip(
    model: &Path,
    config: &Path,
    input: &Path,
    output: &Path,
    beam_width: Option<usize>,
) -> Result<()> {
    let (model_cfg, mut quant_cfg) = load_configs(config)?;
    check_rate(&model_cfg)?;
    if let Some(width) = beam_width {
        quant_cfg.beam_width = width;
    }
    let weights = load_model(model)?;
    let samples = wav::read_wav(input)?;
    let padded = pad_to_multiple(samples, model_cfg.stride_product());

    let stream = encode_stream(&weights, &model_cfg, &quant_cfg, padded.clone())?;
    let bytes = write_bitstream(&stream, model_cfg.sample_rate)?;
    let (parsed, rate) = read_bitstream(&bytes)?;

    let stacks = load_stacks(&weights, &quant_cfg)?;
    let features = lsrvq_decode(&parsed, &quant_cfg, &stacks)?;
    let decoder = build_decoder(&model_cfg.decoder_spec(), &weights)?;
    let decoded = decoder.forward(&features)?;
    wav::write_wav(output, &decoded, rate)?;

    let seconds = parsed.frames as f64 / quant_cfg.frame_rate as f64;
    let code_bits = payload_bits(&parsed.layout, parsed.frames) as f64;
    println!("container_bytes: {}", bytes.len());
    println!("measured_bitrate_bps: {:.1}", code_bits / seconds);
    println!("configured_bitrate_bps: {:.1}", bitrate(&quant_cfg)?);
    print!("{}", quality_report(&padded, &decoded, rate)?);
    Ok(())
}

fn cmd_init_model(config: &Path, output: &Path, seed: u64) -> Result<()> {
    let (model_cfg, _) = load_configs(config)?;
    let weights = random_weights::<Sample>(&model_cfg.layout()?, seed);
    save_weights(output, &weights)?;
    println!("wrote {} ({} tensors)", output.display(), weights.len());
    Ok(())
}
