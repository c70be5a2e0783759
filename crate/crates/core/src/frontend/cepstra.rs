use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{AudioSignal, CepstralMode, FilterScale, FrontendConfig};
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

const LOG_FLOOR: f64 = 1e-10;

/// Number of frames produced for `len` samples, or `None` if the signal is
/// shorter than one frame.
pub fn frame_count(len: usize, frame: usize, shift: usize) -> Option<usize> {
    if len < frame || shift == 0 {
        None
    } else {
        Some(1 + (len - frame) / shift)
    }
}

/// Orthonormal DCT-II of `x`, keeping the first `n_out` coefficients.
pub fn dct_ii(x: &[f64], n_out: usize) -> Vec<f64> {
    let table = dct_table(x.len(), n_out);
    table
        .iter()
        .map(|row| row.iter().zip(x).map(|(c, v)| c * v).sum())
        .collect()
}

fn dct_table(n_in: usize, n_out: usize) -> Vec<Vec<f64>> {
    let m = n_in as f64;
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            (0..n_in)
                .map(|j| scale * (PI * k as f64 * (j as f64 + 0.5) / m).cos())
                .collect()
        })
        .collect()
}

fn to_scale(scale: FilterScale, hz: f64) -> f64 {
    match scale {
        FilterScale::Mel => 1127.0 * (1.0 + hz / 700.0).ln(),
        FilterScale::Linear => hz,
    }
}

/// Triangular filters with centres equally spaced on `scale`, returned as
/// dense weight rows over the `n_fft / 2 + 1` power-spectrum bins.
fn filterbank(
    n_filters: usize,
    n_fft: usize,
    sample_rate: f64,
    low: f64,
    high: f64,
    scale: FilterScale,
) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let (lo, hi) = (to_scale(scale, low), to_scale(scale, high));
    let step = (hi - lo) / (n_filters + 1) as f64;
    (0..n_filters)
        .map(|m| {
            let left = lo + step * m as f64;
            let centre = left + step;
            let right = centre + step;
            (0..n_bins)
                .map(|k| {
                    let f = to_scale(scale, k as f64 * sample_rate / n_fft as f64);
                    if f > left && f <= centre {
                        (f - left) / (centre - left)
                    } else if f > centre && f < right {
                        (right - f) / (right - centre)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Precomputed window, FFT plan, filterbank and DCT tables for one
/// configuration and sample rate.
pub struct CepstralExtractor {
    frame: usize,
    shift: usize,
    pre_emphasis: f64,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    n_fft: usize,
    filters: Vec<Vec<f64>>,
    /// (first filter, DCT table) per cepstral block.
    blocks: Vec<(usize, Vec<Vec<f64>>)>,
}

impl CepstralExtractor {
    pub fn new(cfg: &FrontendConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate()?;
        let sr = f64::from(sample_rate);
        let frame = (cfg.frame_len_ms * sr / 1000.0).round() as usize;
        let shift = (cfg.frame_shift_ms * sr / 1000.0).round() as usize;
        if frame < 2 || shift == 0 {
            return Err(Error::config("frontend.frame_len_ms", "frame too short for sample rate"));
        }
        let high = cfg.high_freq_hz.unwrap_or(sr / 2.0);
        if !(cfg.low_freq_hz >= 0.0 && cfg.low_freq_hz < high && high <= sr / 2.0) {
            return Err(Error::config(
                "frontend.high_freq_hz",
                "need 0 <= low_freq_hz < high_freq_hz <= Nyquist",
            ));
        }
        let n_fft = frame.next_power_of_two();
        let window = (0..frame)
            .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (frame - 1) as f64).cos())
            .collect();
        let filters = filterbank(cfg.n_filters, n_fft, sr, cfg.low_freq_hz, high, cfg.filter_scale);
        let blocks = match cfg.cepstral_mode {
            CepstralMode::Dct => vec![(0, dct_table(cfg.n_filters, cfg.n_cepstra))],
            CepstralMode::BlockDct => cfg
                .block_starts()
                .into_iter()
                .zip(&cfg.block_sizes)
                .map(|(start, &size)| (start, dct_table(size, size)))
                .collect(),
        };
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self {
            frame,
            shift,
            pre_emphasis: cfg.pre_emphasis,
            window,
            fft,
            n_fft,
            filters,
            blocks,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.frame
    }

    pub fn frame_shift(&self) -> usize {
        self.shift
    }

    fn frames<'a>(&self, samples: &'a [f64]) -> Result<impl Iterator<Item = &'a [f64]> + 'a> {
        let n = frame_count(samples.len(), self.frame, self.shift).ok_or_else(|| {
            Error::invalid(format!(
                "signal of {} samples is shorter than one {}-sample frame",
                samples.len(),
                self.frame
            ))
        })?;
        let (frame, shift) = (self.frame, self.shift);
        Ok((0..n).map(move |t| &samples[t * shift..t * shift + frame]))
    }

    /// Log filterbank energies of one frame.
    pub fn log_filterbank(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for n in 0..self.frame {
            let prev = if n == 0 { frame[0] } else { frame[n - 1] };
            let x = frame[n] - self.pre_emphasis * prev;
            buf[n] = Complex::new(x * self.window[n], 0.0);
        }
        self.fft.process(&mut buf);
        let power: Vec<f64> = buf[..self.n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        self.filters
            .iter()
            .map(|w| {
                let e: f64 = w.iter().zip(&power).map(|(a, p)| a * p).sum();
                e.max(LOG_FLOOR).ln()
            })
            .collect()
    }

    /// Static cepstra, one row per frame.
    pub fn extract(&self, samples: &[f64]) -> Result<FeatureMatrix> {
        let dim: usize = self.blocks.iter().map(|(_, t)| t.len()).sum();
        let mut data = Vec::new();
        let mut rows = 0;
        for frame in self.frames(samples)? {
            let logfb = self.log_filterbank(frame);
            for (start, table) in &self.blocks {
                let width = table[0].len();
                let band = &logfb[*start..start + width];
                data.extend(table.iter().map(|row| row.iter().zip(band).map(|(c, v)| c * v).sum::<f64>()));
            }
            rows += 1;
        }
        FeatureMatrix::new(rows, dim, data)
    }

    /// Natural-log energy of each raw frame, as a one-column matrix.
    pub fn log_energies(&self, samples: &[f64]) -> Result<FeatureMatrix> {
        let e: Vec<f64> = self
            .frames(samples)?
            .map(|f| f.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE).ln())
            .collect();
        FeatureMatrix::new(e.len(), 1, e)
    }
}

/// Window, power spectrum, filterbank, log and DCT-II (whole-band or per
/// block) for every frame of `signal`.
pub fn extract_static_cepstra(signal: &AudioSignal, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    CepstralExtractor::new(cfg, signal.sample_rate())?.extract(signal.samples())
}

pub fn frame_log_energies(signal: &AudioSignal, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    CepstralExtractor::new(cfg, signal.sample_rate())?.log_energies(signal.samples())
}
