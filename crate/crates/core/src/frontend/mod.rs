//! Cepstral front-end: MFCC, LFCC and OBTC extraction with RASTA filtering,
//! dynamic coefficients, utterance-level CMVN and energy-based SAD.

mod cepstra;
mod post;
mod wav;

pub use cepstra::{
    dct_ii, extract_static_cepstra, frame_count, frame_log_energies, CepstralExtractor,
};
pub use post::{add_dynamics, cmvn, energy_sad, rasta_filter, RASTA_NUMERATOR, RASTA_POLE};
pub use wav::{read_wav, wav_bytes, write_wav};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

/// A mono waveform with amplitudes nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("audio samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterScale {
    Mel,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CepstralMode {
    /// One DCT over the whole filterbank (MFCC / LFCC).
    Dct,
    /// One DCT per overlapped sub-band block (OBTC).
    BlockDct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub frame_len_ms: f64,
    pub frame_shift_ms: f64,
    pub n_filters: usize,
    pub filter_scale: FilterScale,
    pub cepstral_mode: CepstralMode,
    /// Includes the 0th (energy) coefficient.
    pub n_cepstra: usize,
    pub block_sizes: Vec<usize>,
    /// Per-frame pre-emphasis coefficient; 0 disables.
    pub pre_emphasis: f64,
    pub low_freq_hz: f64,
    /// Upper filterbank edge; `None` means Nyquist.
    pub high_freq_hz: Option<f64>,
    pub apply_rasta: bool,
    pub apply_deltas: bool,
    pub delta_window: usize,
    pub apply_cmvn: bool,
    pub apply_sad: bool,
    pub sad_drop_db: f64,
    pub sad_abs_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            frame_len_ms: 25.0,
            frame_shift_ms: 10.0,
            n_filters: 20,
            filter_scale: FilterScale::Mel,
            cepstral_mode: CepstralMode::Dct,
            n_cepstra: 20,
            block_sizes: vec![9, 13],
            pre_emphasis: 0.97,
            low_freq_hz: 0.0,
            high_freq_hz: None,
            apply_rasta: true,
            apply_deltas: true,
            delta_window: 2,
            apply_cmvn: true,
            apply_sad: false,
            sad_drop_db: 30.0,
            sad_abs_floor: -60.0,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_shift_ms > 0.0 && self.frame_shift_ms <= self.frame_len_ms) {
            return Err(Error::config(
                "frontend.frame_shift_ms",
                "need 0 < frame_shift_ms <= frame_len_ms",
            ));
        }
        if self.n_filters == 0 {
            return Err(Error::config("frontend.n_filters", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.pre_emphasis) {
            return Err(Error::config("frontend.pre_emphasis", "must lie in [0, 1)"));
        }
        match self.cepstral_mode {
            CepstralMode::Dct => {
                if self.n_cepstra == 0 || self.n_cepstra > self.n_filters {
                    return Err(Error::config(
                        "frontend.n_cepstra",
                        "need 1 <= n_cepstra <= n_filters",
                    ));
                }
            }
            CepstralMode::BlockDct => {
                let total: usize = self.block_sizes.iter().sum();
                if self.block_sizes.is_empty()
                    || self.block_sizes.iter().any(|&b| b == 0 || b > self.n_filters)
                {
                    return Err(Error::config(
                        "frontend.block_sizes",
                        "blocks must be non-empty and no wider than the filterbank",
                    ));
                }
                if total < self.n_filters || (self.block_sizes.len() == 1 && total != self.n_filters)
                {
                    return Err(Error::config(
                        "frontend.block_sizes",
                        "blocks must cover the filterbank (sum >= n_filters)",
                    ));
                }
            }
        }
        if self.apply_deltas && self.delta_window == 0 {
            return Err(Error::config("frontend.delta_window", "must be >= 1"));
        }
        Ok(())
    }

    pub fn static_dim(&self) -> usize {
        match self.cepstral_mode {
            CepstralMode::Dct => self.n_cepstra,
            CepstralMode::BlockDct => self.block_sizes.iter().sum(),
        }
    }

    pub fn output_dim(&self) -> usize {
        if self.apply_deltas {
            3 * self.static_dim()
        } else {
            self.static_dim()
        }
    }

    /// First filter index of every OBTC block. Neighbouring blocks overlap by
    /// an even share of `sum(block_sizes) - n_filters`; the last block ends on
    /// the top filter.
    pub fn block_starts(&self) -> Vec<usize> {
        let m = self.block_sizes.len();
        if m <= 1 {
            return vec![0; m];
        }
        let overlap = self.block_sizes.iter().sum::<usize>() - self.n_filters;
        let (base, extra) = (overlap / (m - 1), overlap % (m - 1));
        let mut starts = vec![0usize];
        for i in 1..m {
            let ov = base + usize::from(i - 1 < extra);
            starts.push(starts[i - 1] + self.block_sizes[i - 1] - ov);
        }
        starts
    }
}

/// Runs the full configured chain on one utterance: static cepstra, RASTA,
/// dynamics, SAD frame dropping, then CMVN.
pub fn extract_features(signal: &AudioSignal, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    let extractor = CepstralExtractor::new(cfg, signal.sample_rate())?;
    process_with(&extractor, signal, cfg)
}

pub(crate) fn process_with(
    extractor: &CepstralExtractor,
    signal: &AudioSignal,
    cfg: &FrontendConfig,
) -> Result<FeatureMatrix> {
    let mut feats = extractor.extract(signal.samples())?;
    if cfg.apply_rasta {
        feats = rasta_filter(&feats)?;
    }
    if cfg.apply_deltas {
        feats = add_dynamics(&feats, cfg.delta_window)?;
    }
    if cfg.apply_sad {
        let energies = extractor.log_energies(signal.samples())?;
        let mask = energy_sad(&energies, 0, cfg.sad_drop_db, cfg.sad_abs_floor)?;
        if mask.iter().any(|&k| k) {
            feats = feats.select_rows(&mask)?;
        } else {
            log::warn!("no frame passed SAD; keeping the whole utterance");
        }
    }
    if cfg.apply_cmvn {
        feats = cmvn(&feats)?;
    }
    Ok(feats)
}
