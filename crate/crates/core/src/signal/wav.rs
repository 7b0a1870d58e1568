//! 16-bit PCM mono WAV files with the canonical 44-byte header.
//!
//! Samples are scaled by `1/32768` on read, so they lie in `[-1, 1)`, and by
//! `32768` on write with saturation at the `i16` range.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::Waveform;

pub fn encode(w: &Waveform) -> Result<Vec<u8>> {
    let data_len = w
        .samples
        .len()
        .checked_mul(2)
        .and_then(|n| u32::try_from(n).ok())
        .filter(|&n| n <= u32::MAX - 36)
        .ok_or_else(|| Error::Wav("too many samples for a wav file".into()))?;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &x in &w.samples {
        out.extend_from_slice(&quantize(x).to_le_bytes());
    }
    Ok(out)
}

pub fn quantize(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn decode(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 || &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Wav("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Wav(format!("chunk {:?} is truncated", String::from_utf8_lossy(id))))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Wav("fmt chunk too short".into()));
                }
                let b = &bytes[body..end];
                format = Some((
                    u16::from_le_bytes([b[0], b[1]]),
                    u16::from_le_bytes([b[2], b[3]]),
                    u32::from_le_bytes(b[4..8].try_into().unwrap()),
                    u16::from_le_bytes([b[14], b[15]]),
                ));
            }
            b"data" => {
                let (tag, channels, rate, bits) = format.ok_or_else(|| Error::Wav("data before fmt chunk".into()))?;
                if tag != 1 || channels != 1 || bits != 16 {
                    return Err(Error::Wav(format!(
                        "expected 16-bit PCM mono, got format {tag}, {channels} channels, {bits} bits"
                    )));
                }
                if !size.is_multiple_of(2) {
                    return Err(Error::Wav("odd data chunk length".into()));
                }
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return Waveform::new(samples, rate);
            }
            _ => {}
        }
        pos = end + (size & 1);
    }
    Err(Error::Wav("no data chunk".into()))
}

pub fn read(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Wav(m) => Error::Wav(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(w)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn canonical_header() {
        let w = Waveform::new(vec![0.0, 0.5, -1.0], 16_000).unwrap();
        let b = encode(&w).unwrap();
        assert_eq!(b.len(), 44 + 6);
        assert_eq!(&b[..4], b"RIFF");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 42);
        assert_eq!(&b[36..40], b"data");
        assert_eq!(i16::from_le_bytes([b[46], b[47]]), 16384);
        assert_eq!(i16::from_le_bytes([b[48], b[49]]), -32768);
    }

    #[test]
    fn saturates_on_write() {
        assert_eq!(quantize(1.5), 32767);
        assert_eq!(quantize(1.0), 32767);
        assert_eq!(quantize(-3.0), -32768);
    }

    #[test]
    fn rejects_non_pcm16_mono() {
        let w = Waveform::new(vec![0.1; 4], 8_000).unwrap();
        let mut b = encode(&w).unwrap();
        b[22] = 2; // stereo
        assert!(decode(&b).is_err());
        assert!(decode(b"RIFF").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.25, -0.125, 0.0], 22_050).unwrap();
        write(&p, &w).unwrap();
        assert_eq!(read(&p).unwrap(), w);
    }

    proptest! {
        #[test]
        fn quantized_samples_survive_round_trip(codes in proptest::collection::vec(any::<i16>(), 0..200)) {
            let samples: Vec<f64> = codes.iter().map(|&c| c as f64 / 32768.0).collect();
            let w = Waveform::new(samples, 16_000).unwrap();
            let back = decode(&encode(&w).unwrap()).unwrap();
            prop_assert_eq!(back, w);
        }
    }
}
