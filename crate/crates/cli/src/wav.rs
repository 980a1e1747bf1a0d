//! WAV input/output. The codec works on mono 16-bit PCM at 16 kHz; anything
//! else is rejected with a message naming the offending property.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ldcodec::Sample;

pub const REQUIRED_RATE: u32 = 16000;

pub fn read_wav(path: &Path) -> Result<Vec<Sample>> {
    let reader = hound::WavReader::open(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        bail!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        );
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        bail!(
            "{}: expected 16-bit PCM samples, found {}-bit {:?}",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        );
    }
    if spec.sample_rate != REQUIRED_RATE {
        bail!(
            "{}: expected a {} Hz sample rate, found {}",
            path.display(),
            REQUIRED_RATE,
            spec.sample_rate
        );
    }
    let samples: std::result::Result<Vec<i16>, _> = reader.into_samples().collect();
    let samples = samples.with_context(|| format!("cannot read {}", path.display()))?;
    Ok(samples.iter().map(|s| *s as Sample / 32768.0).collect())
}

pub fn write_wav(path: &Path, samples: &[Sample], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .with_context(|| format!("cannot create {}", path.display()))?;
    for s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}
