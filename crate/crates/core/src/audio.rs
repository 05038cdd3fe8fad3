//! PCM16 mono WAV loading, linear resampling and fixed-window framing.
//!
//! Everything downstream runs at [`CANONICAL_RATE`]. Samples are held as
//! `f64` in `[-1, 1]`; a 16-bit integer `s` maps to `s / 32768`.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

/// Internal processing rate for every extractor.
pub const CANONICAL_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("not a RIFF/WAVE file")]
    BadMagic,
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("truncated data: {0}")]
    TruncatedData(String),
    #[error("sample rate must be positive")]
    ZeroRate,
    #[error("bad window: len={len}, win={win}, hop={hop}")]
    BadWindow { len: usize, win: usize, hop: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    /// Builds a buffer, clamping samples into `[-1, 1]`.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::ZeroRate);
        }
        let samples = samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Multiplies every sample by `gain`, clamping to `[-1, 1]`.
    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| (s * gain).clamp(-1.0, 1.0)).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FrameSeries {
    pub frames: Vec<Vec<f64>>,
    pub win_len: usize,
    pub hop: usize,
    pub origin_sr: u32,
}

impl FrameSeries {
    pub fn start_of(&self, index: usize) -> usize {
        index * self.hop
    }
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Loads a RIFF/WAVE PCM 16-bit mono file.
pub fn load_wav(path: &Path) -> Result<AudioBuffer, AudioError> {
    if !path.exists() {
        return Err(AudioError::MissingFile(path.display().to_string()));
    }
    let bytes = fs::read(path)?;
    decode_wav(&bytes)
}

pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer, AudioError> {
    if bytes.len() < 12 {
        if bytes.len() >= 4 && &bytes[0..4] == b"RIFF" {
            return Err(AudioError::TruncatedData("RIFF header".into()));
        }
        return Err(AudioError::BadMagic);
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::BadMagic);
    }

    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    loop {
        if pos + 8 > bytes.len() {
            return Err(AudioError::TruncatedData(if format.is_none() {
                "missing fmt chunk".into()
            } else {
                "missing data chunk".into()
            }));
        }
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(AudioError::TruncatedData("fmt chunk".into()));
                }
                format = Some((
                    read_u16(bytes, body),
                    read_u16(bytes, body + 2),
                    read_u32(bytes, body + 4),
                    read_u16(bytes, body + 14),
                ));
            }
            b"data" => {
                let Some((tag, channels, rate, bits)) = format else {
                    return Err(AudioError::UnsupportedFormat("data before fmt".into()));
                };
                if tag != 1 {
                    return Err(AudioError::UnsupportedFormat(format!("format tag {tag}")));
                }
                if channels != 1 {
                    return Err(AudioError::UnsupportedFormat(format!("{channels} channels")));
                }
                if bits != 16 {
                    return Err(AudioError::UnsupportedFormat(format!("{bits} bits")));
                }
                if rate == 0 {
                    return Err(AudioError::UnsupportedFormat("zero sample rate".into()));
                }
                if body + size > bytes.len() {
                    return Err(AudioError::TruncatedData(format!(
                        "data declares {size} bytes, {} present",
                        bytes.len() - body
                    )));
                }
                let samples = bytes[body..body + size - size % 2]
                    .chunks_exact(2)
                    .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])) / 32768.0)
                    .collect();
                return AudioBuffer::new(samples, rate);
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body + size + (size & 1);
    }
}

/// Encodes as PCM16 mono. Samples are rounded to the nearest integer step.
pub fn encode_wav(buf: &AudioBuffer) -> Vec<u8> {
    let data_len = buf.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&buf.sample_rate.to_le_bytes());
    out.extend_from_slice(&(buf.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &buf.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_wav(path: &Path, buf: &AudioBuffer) -> Result<(), AudioError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_wav(buf))?;
    Ok(())
}

/// Linear-interpolation resampling. Output length is
/// `round(len * target_sr / origin_sr)`.
pub fn resample(buf: &AudioBuffer, target_sr: u32) -> Result<AudioBuffer, AudioError> {
    if target_sr == 0 {
        return Err(AudioError::ZeroRate);
    }
    if target_sr == buf.sample_rate {
        return Ok(buf.clone());
    }
    let n = buf.len();
    let out_len = (n as f64 * f64::from(target_sr) / f64::from(buf.sample_rate)).round() as usize;
    let step = f64::from(buf.sample_rate) / f64::from(target_sr);
    let src = &buf.samples;
    let samples = (0..out_len)
        .map(|i| {
            let t = i as f64 * step;
            let lo = t.floor() as usize;
            if lo + 1 >= n {
                return src.get(n.saturating_sub(1)).copied().unwrap_or(0.0);
            }
            let frac = t - lo as f64;
            src[lo] + (src[lo + 1] - src[lo]) * frac
        })
        .collect();
    AudioBuffer::new(samples, target_sr)
}

/// Brings any buffer to the canonical rate.
pub fn to_canonical(buf: &AudioBuffer) -> AudioBuffer {
    resample(buf, CANONICAL_RATE).expect("canonical rate is nonzero")
}

/// Splits into `floor((len - win) / hop) + 1` frames; the tail is dropped.
pub fn frame(buf: &AudioBuffer, win_len: usize, hop: usize) -> Result<FrameSeries, AudioError> {
    frame_slice(&buf.samples, win_len, hop).map(|frames| FrameSeries {
        frames,
        win_len,
        hop,
        origin_sr: buf.sample_rate,
    })
}

pub(crate) fn frame_slice(
    samples: &[f64],
    win_len: usize,
    hop: usize,
) -> Result<Vec<Vec<f64>>, AudioError> {
    let len = samples.len();
    if hop == 0 || hop > win_len || win_len > len {
        return Err(AudioError::BadWindow { len, win: win_len, hop });
    }
    let n = (len - win_len) / hop + 1;
    Ok((0..n).map(|i| samples[i * hop..i * hop + win_len].to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, sr: u32, secs: f64, amp: f64) -> AudioBuffer {
        let n = (f64::from(sr) * secs).round() as usize;
        let s = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / f64::from(sr)).sin())
            .collect();
        AudioBuffer::new(s, sr).unwrap()
    }

    #[test]
    fn silence_round_trips_through_wav() {
        let buf = AudioBuffer::new(vec![0.0; 16000], 16000).unwrap();
        let back = decode_wav(&encode_wav(&buf)).unwrap();
        assert_eq!(back.len(), 16000);
        assert!(back.samples().iter().all(|&s| s == 0.0));
        assert_eq!(back.sample_rate(), 16000);
    }

    #[test]
    fn raw_16384_is_one_half() {
        let buf = AudioBuffer::new(vec![0.5], 8000).unwrap();
        let bytes = encode_wav(&buf);
        assert_eq!(i16::from_le_bytes([bytes[44], bytes[45]]), 16384);
        assert_eq!(decode_wav(&bytes).unwrap().samples()[0], 0.5);
    }

    #[test]
    fn header_cut_at_byte_20_is_truncated() {
        let bytes = encode_wav(&sine(100.0, 16000, 0.1, 0.5));
        assert!(matches!(decode_wav(&bytes[..20]), Err(AudioError::TruncatedData(_))));
    }

    #[test]
    fn short_data_chunk_is_truncated() {
        let bytes = encode_wav(&sine(100.0, 16000, 0.1, 0.5));
        assert!(matches!(
            decode_wav(&bytes[..bytes.len() - 10]),
            Err(AudioError::TruncatedData(_))
        ));
    }

    #[test]
    fn rejects_bad_magic_and_formats() {
        assert!(matches!(decode_wav(b"RIFX\0\0\0\0WAVEfmt "), Err(AudioError::BadMagic)));
        assert!(matches!(decode_wav(b"hello"), Err(AudioError::BadMagic)));

        let mut stereo = encode_wav(&sine(100.0, 16000, 0.01, 0.5));
        stereo[22] = 2;
        assert!(matches!(decode_wav(&stereo), Err(AudioError::UnsupportedFormat(_))));

        let mut float = encode_wav(&sine(100.0, 16000, 0.01, 0.5));
        float[20] = 3;
        assert!(matches!(decode_wav(&float), Err(AudioError::UnsupportedFormat(_))));

        let mut b8 = encode_wav(&sine(100.0, 16000, 0.01, 0.5));
        b8[34] = 8;
        assert!(matches!(decode_wav(&b8), Err(AudioError::UnsupportedFormat(_))));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_wav(Path::new("/nonexistent/nope.wav")),
            Err(AudioError::MissingFile(_))
        ));
    }

    #[test]
    fn skips_unknown_chunks() {
        let buf = sine(100.0, 16000, 0.01, 0.5);
        let plain = encode_wav(&buf);
        let mut bytes = plain[..36].to_vec();
        bytes.extend_from_slice(b"LIST");
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[1, 2, 3, 0]);
        bytes.extend_from_slice(&plain[36..]);
        assert_eq!(decode_wav(&bytes).unwrap(), decode_wav(&plain).unwrap());
    }

    #[test]
    fn resample_identity_and_ratio() {
        let b = sine(100.0, 8000, 1.0, 0.5);
        assert_eq!(resample(&b, 8000).unwrap(), b);
        let up = resample(&b, 16000).unwrap();
        assert_eq!(up.len(), 16000);
        assert_eq!(up.sample_rate(), 16000);
        assert!(matches!(resample(&b, 0), Err(AudioError::ZeroRate)));
    }

    #[test]
    fn up_then_down_recovers_band_limited_signal() {
        let b = sine(1000.0, 16000, 0.5, 0.8);
        let back = resample(&resample(&b, 32000).unwrap(), 16000).unwrap();
        assert_eq!(back.len(), b.len());
        let rms = (b
            .samples()
            .iter()
            .zip(back.samples())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / b.len() as f64)
            .sqrt();
        assert!(rms < 1e-3, "rms {rms}");
    }

    #[test]
    fn frame_counts() {
        let b = AudioBuffer::new(vec![0.1; 100], 16000).unwrap();
        let f = frame(&b, 40, 20).unwrap();
        assert_eq!(f.frames.len(), 4);
        assert!(f.frames.iter().all(|w| w.len() == 40));
        assert_eq!(frame(&b, 100, 10).unwrap().frames.len(), 1);
        assert!(matches!(frame(&b, 101, 10), Err(AudioError::BadWindow { .. })));
        assert!(matches!(frame(&b, 40, 0), Err(AudioError::BadWindow { .. })));
        assert!(matches!(frame(&b, 40, 41), Err(AudioError::BadWindow { .. })));
    }

    #[test]
    fn frames_index_back_into_source() {
        let s: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        let b = AudioBuffer::new(s.clone(), 16000).unwrap();
        let f = frame(&b, 64, 16).unwrap();
        for (i, w) in f.frames.iter().enumerate() {
            assert_eq!(w[..], s[f.start_of(i)..f.start_of(i) + 64]);
        }
    }
}
