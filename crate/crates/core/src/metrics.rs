//! Frequency-domain quality measures: multi-scale log-mel spectrograms,
//! transient detection, the transient- and energy-weighted reconstruction
//! losses, and the summary mel/STFT distances.
//!
//! All spectral math runs in `f64` regardless of the waveform scalar type.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::num::Scalar;

/// Loss weight the codec was trained with; reported as metadata next to the
/// perceptual mel loss, never applied to metric values here.
pub const MEL_LOSS_TRAINING_WEIGHT: f64 = 20.0;

/// Log floor applied to mel and STFT magnitudes.
pub const LOG_FLOOR: f64 = 1e-5;

/// Transient detector: energy ratio threshold and history length.
pub const TRANSIENT_THRESHOLD: f64 = 2.5;
pub const TRANSIENT_HISTORY: usize = 8;
const ENERGY_FLOOR: f64 = 1e-8;

/// One STFT analysis configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpectralScale {
    pub window: usize,
    pub hop: usize,
    pub mel_bins: usize,
    pub sample_rate: u32,
}

impl SpectralScale {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.hop == 0 || self.mel_bins == 0 || self.sample_rate == 0 {
            return Err(Error::config("spectral scale fields must be positive"));
        }
        if self.hop > self.window {
            return Err(Error::config(format!(
                "hop {} larger than window {}",
                self.hop, self.window
            )));
        }
        Ok(())
    }

    /// Frames of the analysis grid for a waveform of `samples` samples.
    pub fn frames(&self, samples: usize) -> usize {
        samples / self.hop + 1
    }
}

/// The standard multi-resolution analysis set: windows {512, 1024, 2048}
/// with quarter-window hops and {40, 80, 160} mel bins.
pub fn default_scales(sample_rate: u32) -> Vec<SpectralScale> {
    [(512, 40), (1024, 80), (2048, 160)]
        .into_iter()
        .map(|(window, mel_bins)| SpectralScale {
            window,
            hop: window / 4,
            mel_bins,
            sample_rate,
        })
        .collect()
}

/// `frames x bins` grid of log-magnitudes at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelGrid {
    frames: usize,
    bins: usize,
    data: Vec<f64>,
}

impl LogMelGrid {
    pub fn new(frames: usize, bins: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(Error::config(format!(
                "grid data length {} does not match {frames} frames x {bins} bins",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("grid values must be finite"));
        }
        Ok(Self { frames, bins, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn at(&self, frame: usize, bin: usize) -> f64 {
        self.data[frame * self.bins + bin]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Per-frame transient markers on one scale's analysis grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransientFlags {
    flags: Vec<bool>,
}

impl TransientFlags {
    pub fn new(flags: Vec<bool>) -> Self {
        Self { flags }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn get(&self, frame: usize) -> bool {
        self.flags[frame]
    }

    pub fn any(&self) -> bool {
        self.flags.iter().any(|f| *f)
    }
}

/// Reflection-padded sample access (no edge repetition).
fn reflect_at<S: Scalar>(x: &[S], idx: i64) -> f64 {
    let n = x.len() as i64;
    if n == 1 {
        return x[0].to_f64().unwrap_or(0.0);
    }
    let mut i = idx;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            break;
        }
    }
    x[i as usize].to_f64().unwrap_or(0.0)
}

fn hann_window(window: usize) -> Vec<f64> {
    (0..window)
        .map(|j| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * j as f64 / window as f64).cos()))
        .collect()
}

fn check_waveform<S: Scalar>(x: &[S]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::DegenerateLength("empty waveform".into()));
    }
    Ok(())
}

/// Centered magnitude STFT: one row per frame, `window/2 + 1` bins.
fn magnitude_stft<S: Scalar>(x: &[S], scale: &SpectralScale) -> Vec<Vec<f64>> {
    let window = scale.window;
    let half = window as i64 / 2;
    let frames = scale.frames(x.len());
    let win = hann_window(window);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(window);
    let mut rows = Vec::with_capacity(frames);
    let mut buf = vec![Complex64::new(0.0, 0.0); window];
    for t in 0..frames {
        let start = t as i64 * scale.hop as i64 - half;
        for (j, w) in win.iter().enumerate() {
            buf[j] = Complex64::new(reflect_at(x, start + j as i64) * w, 0.0);
        }
        fft.process(&mut buf);
        rows.push(buf[..window / 2 + 1].iter().map(|c| c.norm()).collect());
        for v in buf.iter_mut() {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    rows
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank over the magnitude bins of one scale:
/// `mel_bins x (window/2 + 1)` weights.
fn mel_filterbank(scale: &SpectralScale) -> Vec<Vec<f64>> {
    let n_fft_bins = scale.window / 2 + 1;
    let nyquist = scale.sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let points: Vec<f64> = (0..scale.mel_bins + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (scale.mel_bins + 1) as f64))
        .collect();
    let bin_hz = scale.sample_rate as f64 / scale.window as f64;
    let mut bank = Vec::with_capacity(scale.mel_bins);
    for b in 0..scale.mel_bins {
        let (left, center, right) = (points[b], points[b + 1], points[b + 2]);
        let mut row = vec![0.0; n_fft_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            if f > left && f < right {
                *w = if f <= center {
                    (f - left) / (center - left).max(f64::MIN_POSITIVE)
                } else {
                    (right - f) / (right - center).max(f64::MIN_POSITIVE)
                };
            }
        }
        bank.push(row);
    }
    bank
}

/// Log-mel spectrogram of a waveform at one scale.
pub fn log_mel<S: Scalar>(x: &[S], scale: &SpectralScale) -> Result<LogMelGrid> {
    scale.validate()?;
    check_waveform(x)?;
    let stft = magnitude_stft(x, scale);
    let bank = mel_filterbank(scale);
    let frames = stft.len();
    let mut data = Vec::with_capacity(frames * scale.mel_bins);
    for row in &stft {
        for filter in &bank {
            let mut acc = 0.0;
            for (m, w) in row.iter().zip(filter) {
                acc += m * w;
            }
            data.push(acc.max(LOG_FLOOR).ln());
        }
    }
    LogMelGrid::new(frames, scale.mel_bins, data)
}

/// Log-magnitude STFT grid (no mel mapping) at one scale.
pub fn log_stft<S: Scalar>(x: &[S], scale: &SpectralScale) -> Result<LogMelGrid> {
    scale.validate()?;
    check_waveform(x)?;
    let stft = magnitude_stft(x, scale);
    let frames = stft.len();
    let bins = scale.window / 2 + 1;
    let mut data = Vec::with_capacity(frames * bins);
    for row in &stft {
        for m in row {
            data.push(m.max(LOG_FLOOR).ln());
        }
    }
    LogMelGrid::new(frames, bins, data)
}

/// Flags frames whose energy jumps above `2.5x` the median of the previous
/// 8 frames. Each frame's energy is measured on the non-overlapping
/// hop-length segment it introduces, so an isolated click flags exactly one
/// frame; the first 8 frames are never flagged.
pub fn detect_transients<S: Scalar>(x: &[S], scale: &SpectralScale) -> Result<TransientFlags> {
    scale.validate()?;
    check_waveform(x)?;
    let frames = scale.frames(x.len());
    let energies: Vec<f64> = (0..frames)
        .map(|t| {
            let start = t * scale.hop;
            let end = ((t + 1) * scale.hop).min(x.len());
            x[start.min(x.len())..end]
                .iter()
                .map(|v| {
                    let f = v.to_f64().unwrap_or(0.0);
                    f * f
                })
                .sum()
        })
        .collect();
    let mut flags = vec![false; frames];
    let w = TRANSIENT_HISTORY;
    for t in w..frames {
        let mut hist: Vec<f64> = energies[t - w..t].to_vec();
        hist.sort_by(|a, b| a.partial_cmp(b).expect("finite energies"));
        let median = if w % 2 == 0 {
            0.5 * (hist[w / 2 - 1] + hist[w / 2])
        } else {
            hist[w / 2]
        };
        flags[t] = energies[t] > TRANSIENT_THRESHOLD * median.max(ENERGY_FLOOR);
    }
    Ok(TransientFlags::new(flags))
}

fn check_same_shape(a: &LogMelGrid, b: &LogMelGrid) -> Result<()> {
    if a.frames != b.frames || a.bins != b.bins {
        return Err(Error::config(format!(
            "grid shapes differ: {}x{} vs {}x{}",
            a.frames, a.bins, b.frames, b.bins
        )));
    }
    Ok(())
}

/// Mean of `weight(t) * |a - b|` over one grid, with weight 2 on flagged
/// frames and 1 elsewhere.
pub fn transient_weighted_l1(
    a: &LogMelGrid,
    b: &LogMelGrid,
    flags: &TransientFlags,
) -> Result<f64> {
    check_same_shape(a, b)?;
    if flags.len() != a.frames {
        return Err(Error::config(format!(
            "{} transient flags for {} frames",
            flags.len(),
            a.frames
        )));
    }
    if a.data.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for t in 0..a.frames {
        let w = if flags.get(t) { 2.0 } else { 1.0 };
        for f in 0..a.bins {
            sum += w * (a.at(t, f) - b.at(t, f)).abs();
        }
    }
    Ok(sum / a.data.len() as f64)
}

/// Mean of `weight * |a - b|` with weight 2 wherever the decoded grid `b`
/// exceeds the reference `a` (excess energy), 1 elsewhere.
pub fn energy_weighted_l1(a: &LogMelGrid, b: &LogMelGrid) -> Result<f64> {
    check_same_shape(a, b)?;
    if a.data.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (x, g) in a.data.iter().zip(&b.data) {
        let w = if x < g { 2.0 } else { 1.0 };
        sum += w * (x - g).abs();
    }
    Ok(sum / a.data.len() as f64)
}

fn plain_l1(a: &LogMelGrid, b: &LogMelGrid) -> Result<f64> {
    let flags = TransientFlags::new(vec![false; a.frames]);
    transient_weighted_l1(a, b, &flags)
}

fn check_pair<S: Scalar>(x: &[S], g: &[S]) -> Result<()> {
    check_waveform(x)?;
    check_waveform(g)?;
    if x.len() != g.len() {
        return Err(Error::config(format!(
            "waveform lengths differ: {} vs {}",
            x.len(),
            g.len()
        )));
    }
    Ok(())
}

/// Transient-weighted multi-scale log-mel distance; flags come from the
/// reference signal.
pub fn mel_transient_loss<S: Scalar>(x: &[S], g: &[S], scales: &[SpectralScale]) -> Result<f64> {
    check_pair(x, g)?;
    if scales.is_empty() {
        return Err(Error::config("no spectral scales given"));
    }
    let mut total = 0.0;
    for scale in scales {
        let gx = log_mel(x, scale)?;
        let gg = log_mel(g, scale)?;
        let flags = detect_transients(x, scale)?;
        total += transient_weighted_l1(&gx, &gg, &flags)?;
    }
    Ok(total / scales.len() as f64)
}

/// Excess-energy-weighted multi-scale log-mel distance.
pub fn mel_energy_loss<S: Scalar>(x: &[S], g: &[S], scales: &[SpectralScale]) -> Result<f64> {
    check_pair(x, g)?;
    if scales.is_empty() {
        return Err(Error::config("no spectral scales given"));
    }
    let mut total = 0.0;
    for scale in scales {
        let gx = log_mel(x, scale)?;
        let gg = log_mel(g, scale)?;
        total += energy_weighted_l1(&gx, &gg)?;
    }
    Ok(total / scales.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelLossReport {
    pub transient: f64,
    pub energy: f64,
    pub total: f64,
}

/// The combined perceptual reconstruction measure: transient loss plus
/// energy loss.
pub fn perceptual_mel_loss<S: Scalar>(
    x: &[S],
    g: &[S],
    scales: &[SpectralScale],
) -> Result<MelLossReport> {
    let transient = mel_transient_loss(x, g, scales)?;
    let energy = mel_energy_loss(x, g, scales)?;
    Ok(MelLossReport {
        transient,
        energy,
        total: transient + energy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralReport {
    pub mel_distance: f64,
    pub stft_distance: f64,
}

/// Summary distances: mean L1 over the default multi-scale log-mel grids,
/// and mean L1 over a window-2048 hop-512 log-magnitude STFT.
pub fn spectral_distances<S: Scalar>(x: &[S], g: &[S], sample_rate: u32) -> Result<SpectralReport> {
    check_pair(x, g)?;
    let scales = default_scales(sample_rate);
    let mut mel = 0.0;
    for scale in &scales {
        mel += plain_l1(&log_mel(x, scale)?, &log_mel(g, scale)?)?;
    }
    mel /= scales.len() as f64;
    let stft_scale = SpectralScale {
        window: 2048,
        hop: 512,
        mel_bins: 1,
        sample_rate,
    };
    let stft = plain_l1(&log_stft(x, &stft_scale)?, &log_stft(g, &stft_scale)?)?;
    Ok(SpectralReport {
        mel_distance: mel,
        stft_distance: stft,
    })
}
