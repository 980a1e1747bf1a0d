//! Bit-exact serialization: the LDCW weight container, the LDCB coded
//! bitstream, and the flat text configuration format.
//!
//! All multi-byte integers are little-endian; bitstream payloads pack codes
//! MSB-first. Weight payloads are 32-bit floats regardless of the working
//! scalar type.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{ModelConfig, ModelWeights, Tensor};
use crate::lsrvq::{
    CodedStream, ExtractorVariant, LsrvqConfig, StageConfig, StreamLayout, MAX_CODEBOOK,
    MIN_CODEBOOK,
};
use crate::num::{scalar, Scalar};

pub const WEIGHT_MAGIC: [u8; 4] = *b"LDCW";
pub const WEIGHT_VERSION: u32 = 1;
pub const BITSTREAM_MAGIC: [u8; 4] = *b"LDCB";
pub const BITSTREAM_VERSION: u32 = 1;

/// How per-channel activation parameters (`*.alpha`, `*.beta`) are stored
/// in a weight file. In memory they are always plain positive values; `Log`
/// files store their natural logarithm and are exponentiated on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActEncoding {
    #[default]
    Plain,
    Log,
}

impl ActEncoding {
    fn to_byte(self) -> u8 {
        match self {
            ActEncoding::Plain => 0,
            ActEncoding::Log => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(ActEncoding::Plain),
            1 => Ok(ActEncoding::Log),
            other => Err(Error::Parse(format!(
                "unknown activation encoding flag {other}"
            ))),
        }
    }
}

fn is_activation_name(name: &str) -> bool {
    name.ends_with(".alpha") || name.ends_with(".beta")
}

// ---------------------------------------------------------------------------
// Weight files

/// Serializes weights into LDCW bytes. With [`ActEncoding::Log`] the
/// activation tensors are written as logarithms (so the plain round trip is
/// bit-exact, the log one exact up to float rounding).
pub fn weights_to_bytes<S: Scalar>(
    weights: &ModelWeights<S>,
    encoding: ActEncoding,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    out.push(encoding.to_byte());
    let count = u32::try_from(weights.len())
        .map_err(|_| Error::config("too many tensors for the weight format"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, tensor) in weights.iter() {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len())
            .map_err(|_| Error::config(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name_bytes);
        let rank = u8::try_from(tensor.shape().len())
            .map_err(|_| Error::config(format!("tensor rank too large: {name}")))?;
        out.push(rank);
        for dim in tensor.shape() {
            let d = u32::try_from(*dim)
                .map_err(|_| Error::config(format!("dimension too large in {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        let log_space = encoding == ActEncoding::Log && is_activation_name(name);
        for v in tensor.data() {
            let mut f = v.to_f64().unwrap_or(f64::NAN);
            if log_space {
                if !(f > 0.0) {
                    return Err(Error::config(format!(
                        "log encoding requires positive values in {name}"
                    )));
                }
                f = f.ln();
            }
            out.extend_from_slice(&(f as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated(format!(
                "file ends inside {what} (need {n} bytes at offset {})",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parses LDCW bytes, normalizing log-encoded activation parameters back to
/// plain values.
pub fn weights_from_bytes<S: Scalar>(bytes: &[u8]) -> Result<ModelWeights<S>> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4, "magic")?;
    if magic != WEIGHT_MAGIC {
        return Err(Error::BadMagic {
            expected: WEIGHT_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = cur.u32("version")?;
    if version != WEIGHT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let encoding = ActEncoding::from_byte(cur.u8("activation encoding flag")?)?;
    let count = cur.u32("tensor count")? as usize;
    let mut weights = ModelWeights::new();
    let mut prev_name: Option<String> = None;
    for _ in 0..count {
        let name_len = cur.u16("tensor name length")? as usize;
        let name_bytes = cur.take(name_len, "tensor name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Parse("tensor name is not valid UTF-8".into()))?
            .to_string();
        if let Some(prev) = &prev_name {
            if *prev == name {
                return Err(Error::DuplicateName(name));
            }
            if *prev > name {
                return Err(Error::Parse(format!(
                    "tensor names out of order: {prev:?} before {name:?}"
                )));
            }
        }
        prev_name = Some(name.clone());
        let rank = cur.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("tensor dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = cur.take(4 * n, &format!("payload of {name}"))?;
        let log_space = encoding == ActEncoding::Log && is_activation_name(&name);
        let mut data = Vec::with_capacity(n);
        for chunk in payload.chunks_exact(4) {
            let mut f = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
            if log_space {
                f = f.exp();
            }
            data.push(scalar::<S>(f));
        }
        weights.insert(name, Tensor::new(shape, data)?)?;
    }
    if cur.remaining() != 0 {
        return Err(Error::Parse(format!(
            "{} trailing bytes after the declared tensors",
            cur.remaining()
        )));
    }
    Ok(weights)
}

pub fn save_weights<S: Scalar>(path: impl AsRef<Path>, weights: &ModelWeights<S>) -> Result<()> {
    let bytes = weights_to_bytes(weights, ActEncoding::Plain)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_weights<S: Scalar>(path: impl AsRef<Path>) -> Result<ModelWeights<S>> {
    let bytes = std::fs::read(path)?;
    weights_from_bytes(&bytes)
}

// ---------------------------------------------------------------------------
// Bit packing

/// MSB-first bit accumulator.
#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    /// Bits already used in the trailing byte (0 = byte boundary).
    used: usize,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write_bits(&mut self, value: u64, bits: usize) {
        debug_assert!(bits <= 64);
        debug_assert!(bits == 64 || value < (1u64 << bits));
        for i in (0..bits).rev() {
            let bit = ((value >> i) & 1) as u8;
            if self.used == 0 {
                self.bytes.push(0);
            }
            let last = self.bytes.last_mut().expect("pushed above");
            *last |= bit << (7 - self.used);
            self.used = (self.used + 1) % 8;
        }
    }

    pub fn bit_len(&self) -> usize {
        if self.used == 0 {
            self.bytes.len() * 8
        } else {
            (self.bytes.len() - 1) * 8 + self.used
        }
    }

    /// Final bytes; the last byte is zero-padded.
    pub fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

/// MSB-first bit reader over a byte slice.
#[derive(Debug)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn read_bits(&mut self, bits: usize) -> Result<u64> {
        debug_assert!(bits <= 64);
        if self.pos + bits > self.bytes.len() * 8 {
            return Err(Error::Truncated(format!(
                "bitstream ends at bit {} of {} needed",
                self.bytes.len() * 8,
                self.pos + bits
            )));
        }
        let mut value = 0u64;
        for _ in 0..bits {
            let byte = self.bytes[self.pos / 8];
            let bit = (byte >> (7 - self.pos % 8)) & 1;
            value = (value << 1) | bit as u64;
            self.pos += 1;
        }
        Ok(value)
    }
}

/// Bits needed for an index into a codebook of `m` entries.
pub fn code_bits(m: usize) -> usize {
    if m <= 1 {
        0
    } else {
        (m - 1).ilog2() as usize + 1
    }
}

// ---------------------------------------------------------------------------
// Bitstream

const BITSTREAM_HEADER_LEN: usize = 23;

fn check_layout_fits(layout: &StreamLayout) -> Result<()> {
    if layout.step == 0 {
        return Err(Error::config("stream step must be positive"));
    }
    if layout.step > u8::MAX as usize
        || layout.lt_layers > u8::MAX as usize
        || layout.st_layers > u8::MAX as usize
    {
        return Err(Error::config("stream layout exceeds 8-bit header fields"));
    }
    if layout.lt_size > u16::MAX as usize || layout.st_size > u16::MAX as usize {
        return Err(Error::config("codebook size exceeds 16-bit header fields"));
    }
    Ok(())
}

/// Exact payload length in bits for a stream shape.
pub fn payload_bits(layout: &StreamLayout, frames: usize) -> usize {
    let blocks = layout.blocks(frames);
    blocks * layout.lt_layers * code_bits(layout.lt_size)
        + blocks * layout.step * layout.st_layers * code_bits(layout.st_size)
}

/// Serializes a coded stream: 23-byte header, then per long-term block the
/// LT codes followed by the ST codes of its frames, packed MSB-first.
pub fn write_bitstream(codes: &CodedStream, sample_rate: u32) -> Result<Vec<u8>> {
    codes.validate()?;
    check_layout_fits(&codes.layout)?;
    let layout = &codes.layout;
    let mut out = Vec::with_capacity(BITSTREAM_HEADER_LEN + payload_bits(layout, codes.frames) / 8 + 1);
    out.extend_from_slice(&BITSTREAM_MAGIC);
    out.extend_from_slice(&BITSTREAM_VERSION.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.push(layout.step as u8);
    out.push(layout.lt_layers as u8);
    out.push(layout.st_layers as u8);
    out.extend_from_slice(&(layout.lt_size as u16).to_le_bytes());
    out.extend_from_slice(&(layout.st_size as u16).to_le_bytes());
    out.extend_from_slice(&(u32::try_from(codes.frames)
        .map_err(|_| Error::config("frame count exceeds the 32-bit header field"))?)
    .to_le_bytes());

    let lt_bits = code_bits(layout.lt_size);
    let st_bits = code_bits(layout.st_size);
    let mut bits = BitWriter::new();
    for (b, block) in codes.lt_codes.iter().enumerate() {
        for code in block {
            bits.write_bits(*code as u64, lt_bits);
        }
        for frame in &codes.st_codes[b * layout.step..(b + 1) * layout.step] {
            for code in frame {
                bits.write_bits(*code as u64, st_bits);
            }
        }
    }
    debug_assert_eq!(bits.bit_len(), payload_bits(layout, codes.frames));
    out.extend_from_slice(&bits.finish());
    Ok(out)
}

/// Parses an LDCB stream back into codes plus the header's sample rate.
pub fn read_bitstream(bytes: &[u8]) -> Result<(CodedStream, u32)> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4, "magic")?;
    if magic != BITSTREAM_MAGIC {
        return Err(Error::BadMagic {
            expected: BITSTREAM_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = cur.u32("version")?;
    if version != BITSTREAM_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let sample_rate = cur.u32("sample rate")?;
    let step = cur.u8("quantization step")? as usize;
    let lt_layers = cur.u8("LT layer count")? as usize;
    let st_layers = cur.u8("ST layer count")? as usize;
    let lt_size = cur.u16("LT codebook size")? as usize;
    let st_size = cur.u16("ST codebook size")? as usize;
    let frames = cur.u32("frame count")? as usize;
    let layout = StreamLayout {
        step,
        lt_layers,
        lt_size,
        st_layers,
        st_size,
    };
    check_layout_fits(&layout)?;

    let expected_payload = payload_bits(&layout, frames).div_ceil(8);
    if cur.remaining() < expected_payload {
        return Err(Error::Truncated(format!(
            "payload has {} bytes, header implies {expected_payload}",
            cur.remaining()
        )));
    }
    if cur.remaining() > expected_payload {
        return Err(Error::Parse(format!(
            "{} trailing bytes after the payload",
            cur.remaining() - expected_payload
        )));
    }
    let mut reader = BitReader::new(cur.take(expected_payload, "payload")?);
    let lt_bits = code_bits(lt_size);
    let st_bits = code_bits(st_size);
    let blocks = layout.blocks(frames);
    let mut lt_codes = Vec::with_capacity(blocks);
    let mut st_codes = Vec::with_capacity(blocks * step);
    for _ in 0..blocks {
        let mut block = Vec::with_capacity(lt_layers);
        for _ in 0..lt_layers {
            block.push(reader.read_bits(lt_bits)? as usize);
        }
        lt_codes.push(block);
        for _ in 0..step {
            let mut frame = Vec::with_capacity(st_layers);
            for _ in 0..st_layers {
                frame.push(reader.read_bits(st_bits)? as usize);
            }
            st_codes.push(frame);
        }
    }
    let stream = CodedStream {
        layout,
        frames,
        lt_codes,
        st_codes,
    };
    stream.validate()?;
    Ok((stream, sample_rate))
}

// ---------------------------------------------------------------------------
// Configuration text

struct SectionEntries {
    name: &'static str,
    entries: BTreeMap<String, (usize, String)>,
}

impl SectionEntries {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            entries: BTreeMap::new(),
        }
    }

    fn insert(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        if self
            .entries
            .insert(key.to_string(), (line, value.to_string()))
            .is_some()
        {
            return Err(Error::Parse(format!(
                "line {line}: duplicate field '{key}' in [{}]",
                self.name
            )));
        }
        Ok(())
    }

    fn take(&mut self, key: &str) -> Result<String> {
        self.entries
            .remove(key)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::Parse(format!("missing field '{key}' in [{}]", self.name)))
    }

    fn finish(self) -> Result<()> {
        if let Some((key, (line, _))) = self.entries.into_iter().next() {
            return Err(Error::Parse(format!(
                "line {line}: unknown field '{key}' in [{}]",
                self.name
            )));
        }
        Ok(())
    }
}

fn parse_count(value: &str, field: &str, section: &str) -> Result<usize> {
    value.trim().parse().map_err(|_| {
        Error::Parse(format!(
            "field '{field}' in [{section}]: expected a count, got '{value}'"
        ))
    })
}

fn parse_count_list(value: &str, field: &str, section: &str) -> Result<Vec<usize>> {
    let items: Result<Vec<usize>> = value
        .split(',')
        .map(|part| parse_count(part, field, section))
        .collect();
    let items = items?;
    if items.is_empty() {
        return Err(Error::Parse(format!(
            "field '{field}' in [{section}] must not be empty"
        )));
    }
    Ok(items)
}

/// Parses the flat `key: value` config text into its two config halves and
/// cross-validates them.
pub fn parse_config(text: &str) -> Result<(ModelConfig, LsrvqConfig)> {
    let mut model = SectionEntries::new("model");
    let mut quantizer = SectionEntries::new("quantizer");
    let mut current: Option<&mut SectionEntries> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = match name.trim() {
                "model" => Some(&mut model),
                "quantizer" => Some(&mut quantizer),
                other => {
                    return Err(Error::Parse(format!(
                        "line {line_no}: unknown section [{other}]"
                    )))
                }
            };
            continue;
        }
        let Some((key, value)) = line.split_once(':') else {
            return Err(Error::Parse(format!(
                "line {line_no}: expected 'key: value', got '{line}'"
            )));
        };
        let Some(section) = current.as_deref_mut() else {
            return Err(Error::Parse(format!(
                "line {line_no}: field outside any section"
            )));
        };
        section.insert(key.trim(), value.trim(), line_no)?;
    }

    let model_cfg = ModelConfig {
        sample_rate: parse_count(&model.take("sample_rate")?, "sample_rate", "model")? as u32,
        latent_dim: parse_count(&model.take("latent_dim")?, "latent_dim", "model")?,
        initial_channels: parse_count(
            &model.take("initial_channels")?,
            "initial_channels",
            "model",
        )?,
        upsample_factors: parse_count_list(
            &model.take("upsample_factors")?,
            "upsample_factors",
            "model",
        )?,
        dilations: parse_count_list(&model.take("dilations")?, "dilations", "model")?,
        groups: parse_count(&model.take("groups")?, "groups", "model")?,
        expand_ratio: parse_count(&model.take("expand_ratio")?, "expand_ratio", "model")?,
        output_kernel: parse_count(&model.take("output_kernel")?, "output_kernel", "model")?,
        encoder_base_channels: parse_count(
            &model.take("encoder_base_channels")?,
            "encoder_base_channels",
            "model",
        )?,
    };
    model.finish()?;

    let extractor = match quantizer.take("extractor")?.as_str() {
        "avg_pooling" => ExtractorVariant::AvgPooling,
        "conv" => ExtractorVariant::Conv,
        other => {
            return Err(Error::Parse(format!(
                "field 'extractor' in [quantizer]: expected 'avg_pooling' or 'conv', got '{other}'"
            )))
        }
    };
    let lsrvq_cfg = LsrvqConfig {
        step: parse_count(&quantizer.take("step")?, "step", "quantizer")?,
        frame_rate: parse_count(&quantizer.take("frame_rate")?, "frame_rate", "quantizer")?,
        lt: StageConfig {
            layers: parse_count(&quantizer.take("lt_layers")?, "lt_layers", "quantizer")?,
            size: parse_count(&quantizer.take("lt_size")?, "lt_size", "quantizer")?,
        },
        st: StageConfig {
            layers: parse_count(&quantizer.take("st_layers")?, "st_layers", "quantizer")?,
            size: parse_count(&quantizer.take("st_size")?, "st_size", "quantizer")?,
        },
        extractor,
        beam_width: parse_count(&quantizer.take("beam_width")?, "beam_width", "quantizer")?,
    };
    quantizer.finish()?;

    model_cfg.validate()?;
    lsrvq_cfg.validate()?;
    let expected_rate = model_cfg.frame_rate();
    if lsrvq_cfg.frame_rate != expected_rate {
        return Err(Error::Config(format!(
            "frame_rate {} x stride product {} does not match sample_rate {} \
             (expected frame_rate {expected_rate})",
            lsrvq_cfg.frame_rate,
            model_cfg.stride_product(),
            model_cfg.sample_rate
        )));
    }
    Ok((model_cfg, lsrvq_cfg))
}

fn render_list(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Renders a config pair back to the flat text format; `parse_config` of
/// the result reproduces the inputs.
pub fn render_config(model: &ModelConfig, quantizer: &LsrvqConfig) -> String {
    let extractor = match quantizer.extractor {
        ExtractorVariant::AvgPooling => "avg_pooling",
        ExtractorVariant::Conv => "conv",
    };
    format!(
        "[model]\n\
         sample_rate: {}\n\
         latent_dim: {}\n\
         initial_channels: {}\n\
         upsample_factors: {}\n\
         dilations: {}\n\
         groups: {}\n\
         expand_ratio: {}\n\
         output_kernel: {}\n\
         encoder_base_channels: {}\n\
         \n\
         [quantizer]\n\
         frame_rate: {}\n\
         step: {}\n\
         lt_layers: {}\n\
         lt_size: {}\n\
         st_layers: {}\n\
         st_size: {}\n\
         extractor: {}\n\
         beam_width: {}\n",
        model.sample_rate,
        model.latent_dim,
        model.initial_channels,
        render_list(&model.upsample_factors),
        render_list(&model.dilations),
        model.groups,
        model.expand_ratio,
        model.output_kernel,
        model.encoder_base_channels,
        quantizer.frame_rate,
        quantizer.step,
        quantizer.lt.layers,
        quantizer.lt.size,
        quantizer.st.layers,
        quantizer.st.size,
        extractor,
        quantizer.beam_width,
    )
}

pub fn load_config(path: impl AsRef<Path>) -> Result<(ModelConfig, LsrvqConfig)> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

pub fn save_config(
    path: impl AsRef<Path>,
    model: &ModelConfig,
    quantizer: &LsrvqConfig,
) -> Result<()> {
    std::fs::write(path, render_config(model, quantizer))?;
    Ok(())
}

// Re-exported so config consumers can check sizes without reaching into lsrvq.
pub const CODEBOOK_SIZE_RANGE: (usize, usize) = (MIN_CODEBOOK, MAX_CODEBOOK);
