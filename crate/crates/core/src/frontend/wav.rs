use std::io::Cursor;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioSignal;
use crate::error::{Error, Result};

/// Reads a 16-bit PCM mono WAV file, scaling samples to `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<AudioSignal> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != SampleFormat::Int {
        return Err(Error::format(
            path,
            format!(
                "expected 16-bit PCM mono, got {} channel(s) of {}-bit {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    AudioSignal::new(samples, spec.sample_rate)
}

/// Encodes `signal` as 16-bit PCM mono WAV bytes. Samples are clipped to
/// `[-1, 1]` before quantization.
pub fn wav_bytes(signal: &AudioSignal) -> Result<Vec<u8>> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut w = WavWriter::new(&mut cursor, spec).map_err(|source| Error::Wav {
            path: "<memory>".into(),
            source,
        })?;
        for &s in signal.samples() {
            let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            w.write_sample(q).map_err(|source| Error::Wav {
                path: "<memory>".into(),
                source,
            })?;
        }
        w.finalize().map_err(|source| Error::Wav {
            path: "<memory>".into(),
            source,
        })?;
    }
    Ok(cursor.into_inner())
}

pub fn write_wav(path: &Path, signal: &AudioSignal) -> Result<()> {
    std::fs::write(path, wav_bytes(signal)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let s: Vec<f64> = (0..1000).map(|i| ((i as f64) * 0.01).sin() * 0.8).collect();
        let sig = AudioSignal::new(s.clone(), 16_000).unwrap();
        write_wav(&p, &sig).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.sample_rate(), 16_000);
        for (a, b) in s.iter().zip(back.samples()) {
            assert!((a - b).abs() < 2.0 / 32768.0);
        }
    }

    #[test]
    fn stereo_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&p, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(read_wav(&p).is_err());
    }
}
