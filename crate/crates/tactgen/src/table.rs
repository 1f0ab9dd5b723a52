//! Frequency-table data model and its binary wire encoding.
//!
//! A frequency table is the unit of host→generator communication: four
//! channels (one per actuator output), each holding ten (frequency, amplitude)
//! tuples. On the wire each tuple becomes a little-endian `u16` frequency code
//! followed by a `u16` amplitude code, 40 bytes per channel, 160 bytes per
//! generator unit.
//!
//! Codes are Q15-flavoured: the frequency code is `floor(f / F_s * 2^15)`
//! (the generator's phase increment), the amplitude code is
//! `round(a * 32767)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Actuator channels per generator unit.
pub const CHANNELS: usize = 4;
/// Frequency components per channel.
pub const TONES_PER_CHANNEL: usize = 10;
/// Encoded package size in bytes.
pub const ENCODED_LEN: usize = CHANNELS * TONES_PER_CHANNEL * 4;
/// Phase accumulator modulus; the frequency quantization grid is `F_s / 2^15`.
pub const PHASE_STEPS: u32 = 1 << 15;
/// Full-scale amplitude code.
pub const AMP_FULL_SCALE: u16 = 32767;

// Guard added before flooring a frequency code. It absorbs the few-ulp
// rounding of `code * F_s / 2^15` on re-encode (decode∘encode must be exact
// on grid frequencies) and is far below any physically meaningful offset.
const CODE_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("channel {channel}: amplitude sum {sum} exceeds 1")]
    AmplitudeOverflow { channel: usize, sum: f64 },
    #[error("channel {channel} tone {tone}: frequency {frequency} Hz outside [0, {nyquist}] Hz")]
    FrequencyOutOfRange {
        channel: usize,
        tone: usize,
        frequency: f64,
        nyquist: f64,
    },
    #[error("channel {channel} tone {tone}: amplitude {amplitude} outside [0, 1]")]
    AmplitudeOutOfRange {
        channel: usize,
        tone: usize,
        amplitude: f64,
    },
    #[error("encoded package has {actual} bytes, expected {ENCODED_LEN}")]
    LengthMismatch { actual: usize },
    #[error("sampling rate must be positive, got {0}")]
    NonPositiveRate(f64),
}

/// One frequency component: frequency in Hz, amplitude as a fraction of full
/// scale.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Tone {
    pub frequency: f64,
    pub amplitude: f64,
}

impl Tone {
    pub fn new(frequency: f64, amplitude: f64) -> Self {
        Self {
            frequency,
            amplitude,
        }
    }
}

/// Tuples of one actuator channel.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ChannelTable {
    pub tones: [Tone; TONES_PER_CHANNEL],
}

impl ChannelTable {
    pub fn amplitude_sum(&self) -> f64 {
        self.tones.iter().map(|t| t.amplitude).sum()
    }
}

/// A full per-unit frequency table: four channels of ten tones each.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub channels: [ChannelTable; CHANNELS],
}

impl FrequencyTable {
    /// All-zero table (silence on every channel).
    pub fn silent() -> Self {
        Self::default()
    }

    /// Sets one tone slot. Panics on out-of-range indices; value validation
    /// happens at encode time.
    pub fn set_tone(&mut self, channel: usize, slot: usize, frequency: f64, amplitude: f64) {
        self.channels[channel].tones[slot] = Tone::new(frequency, amplitude);
    }

    /// Convenience: the same single tone in slot 0 of every channel.
    pub fn single_tone(frequency: f64, amplitude: f64) -> Self {
        let mut t = Self::silent();
        for ch in 0..CHANNELS {
            t.set_tone(ch, 0, frequency, amplitude);
        }
        t
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// The 160-byte wire package.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodedTable {
    bytes: [u8; ENCODED_LEN],
}

impl EncodedTable {
    pub fn from_slice(bytes: &[u8]) -> Result<Self, CodecError> {
        let actual = bytes.len();
        let bytes: [u8; ENCODED_LEN] = bytes
            .try_into()
            .map_err(|_| CodecError::LengthMismatch { actual })?;
        Ok(Self { bytes })
    }

    pub fn as_bytes(&self) -> &[u8; ENCODED_LEN] {
        &self.bytes
    }

    /// Raw (frequency, amplitude) code pair of one tone slot.
    pub fn codes(&self, channel: usize, slot: usize) -> (u16, u16) {
        let off = (channel * TONES_PER_CHANNEL + slot) * 4;
        let f = u16::from_le_bytes([self.bytes[off], self.bytes[off + 1]]);
        let a = u16::from_le_bytes([self.bytes[off + 2], self.bytes[off + 3]]);
        (f, a)
    }
}

impl Default for EncodedTable {
    fn default() -> Self {
        Self {
            bytes: [0; ENCODED_LEN],
        }
    }
}

/// Frequency code for `frequency` at the given sampling rate:
/// `floor(f / F_s * 2^15)`, truncated onto the synthesis grid.
pub fn frequency_code(frequency: f64, sampling_rate: f64) -> u16 {
    (frequency / sampling_rate * PHASE_STEPS as f64 + CODE_EPS).floor() as u16
}

/// Amplitude code: `round(a * 32767)`.
pub fn amplitude_code(amplitude: f64) -> u16 {
    (amplitude * AMP_FULL_SCALE as f64).round() as u16
}

/// The frequency the generator actually realizes for a requested `frequency`:
/// the next grid point at or below it, with grid `q = F_s / 2^15`.
pub fn quantized_frequency(frequency: f64, sampling_rate: f64) -> f64 {
    frequency_code(frequency, sampling_rate) as f64 * sampling_rate / PHASE_STEPS as f64
}

/// Encodes a table into the 160-byte wire package.
pub fn encode(table: &FrequencyTable, sampling_rate: f64) -> Result<EncodedTable, CodecError> {
    if !(sampling_rate > 0.0) {
        return Err(CodecError::NonPositiveRate(sampling_rate));
    }
    let nyquist = sampling_rate / 2.0;
    let mut out = EncodedTable::default();
    for (ci, channel) in table.channels.iter().enumerate() {
        let sum = channel.amplitude_sum();
        if sum > 1.0 {
            return Err(CodecError::AmplitudeOverflow { channel: ci, sum });
        }
        for (ti, tone) in channel.tones.iter().enumerate() {
            if !(0.0..=1.0).contains(&tone.amplitude) {
                return Err(CodecError::AmplitudeOutOfRange {
                    channel: ci,
                    tone: ti,
                    amplitude: tone.amplitude,
                });
            }
            if !tone.frequency.is_finite() || tone.frequency < 0.0 || tone.frequency > nyquist {
                return Err(CodecError::FrequencyOutOfRange {
                    channel: ci,
                    tone: ti,
                    frequency: tone.frequency,
                    nyquist,
                });
            }
            let off = (ci * TONES_PER_CHANNEL + ti) * 4;
            let f = frequency_code(tone.frequency, sampling_rate);
            let a = amplitude_code(tone.amplitude);
            out.bytes[off..off + 2].copy_from_slice(&f.to_le_bytes());
            out.bytes[off + 2..off + 4].copy_from_slice(&a.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a wire package back into a table. Inverse of [`encode`] up to
/// codec quantization.
pub fn decode(pkg: &EncodedTable, sampling_rate: f64) -> Result<FrequencyTable, CodecError> {
    if !(sampling_rate > 0.0) {
        return Err(CodecError::NonPositiveRate(sampling_rate));
    }
    let mut table = FrequencyTable::silent();
    for ci in 0..CHANNELS {
        for ti in 0..TONES_PER_CHANNEL {
            let (f, a) = pkg.codes(ci, ti);
            table.channels[ci].tones[ti] = Tone::new(
                f as f64 * sampling_rate / PHASE_STEPS as f64,
                a as f64 / AMP_FULL_SCALE as f64,
            );
        }
    }
    Ok(table)
}

/// Decodes from a raw byte slice, checking the package length.
pub fn decode_bytes(bytes: &[u8], sampling_rate: f64) -> Result<FrequencyTable, CodecError> {
    decode(&EncodedTable::from_slice(bytes)?, sampling_rate)
}
