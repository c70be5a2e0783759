//! Seeded synthetic corpora with speaker x phrase structure.
//!
//! Waveform mode renders each phrase as five segments of three sinusoidal
//! components taken from [`PHRASE_TABLE`]. A speaker scales every component
//! frequency by a global factor and a per-component factor and tilts the
//! component amplitudes; both are scaled by `speaker_sep`. Feature mode
//! samples frames directly from per-(speaker, phrase) diagonal Gaussians.
//!
//! Utterance `i` draws from stream `i` of a ChaCha8 generator seeded with the
//! corpus seed, and speaker `s` from stream `SPEAKER_STREAM + s`, so output
//! does not depend on scheduling.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bnfeat::FrameLabels;
use crate::error::{Error, Result};
use crate::frontend::{frame_count, write_wav, AudioSignal};
use crate::matrix::FeatureMatrix;
use crate::parallel::try_ordered_map;
use crate::trials::{write_manifest, UtteranceRecord};

pub const SAMPLE_RATE: u32 = 16_000;
pub const SEGMENTS: usize = 5;
pub const COMPONENTS: usize = 3;
const SPEAKER_STREAM: u64 = 1 << 40;
const PHRASE_STREAM: u64 = 1 << 41;
const COMPONENT_AMPLITUDES: [f64; COMPONENTS] = [1.0, 0.6, 0.35];
const OUTPUT_GAIN: f64 = 0.4;

/// Component centre frequencies in Hz, `[phrase][segment][component]`.
pub const PHRASE_TABLE: [[[f64; COMPONENTS]; SEGMENTS]; 12] = [
    [[2090.0, 2670.0, 4110.0], [560.0, 1780.0, 4100.0], [1470.0, 3700.0, 4100.0], [420.0, 890.0, 5400.0], [340.0, 670.0, 4710.0]],
    [[480.0, 670.0, 1000.0], [710.0, 940.0, 4150.0], [1140.0, 1740.0, 3020.0], [280.0, 320.0, 1470.0], [330.0, 450.0, 2130.0]],
    [[410.0, 600.0, 2110.0], [270.0, 360.0, 2220.0], [490.0, 520.0, 3560.0], [260.0, 630.0, 1830.0], [380.0, 1600.0, 1850.0]],
    [[400.0, 1000.0, 1800.0], [420.0, 950.0, 1390.0], [2110.0, 3600.0, 4410.0], [730.0, 1500.0, 5430.0], [360.0, 1250.0, 1640.0]],
    [[960.0, 3350.0, 5380.0], [250.0, 360.0, 3850.0], [660.0, 1870.0, 2390.0], [1290.0, 2640.0, 4750.0], [300.0, 360.0, 1970.0]],
    [[310.0, 700.0, 1020.0], [330.0, 550.0, 2520.0], [330.0, 630.0, 1940.0], [270.0, 290.0, 490.0], [260.0, 270.0, 1200.0]],
    [[380.0, 1280.0, 1960.0], [370.0, 590.0, 660.0], [460.0, 490.0, 830.0], [500.0, 630.0, 1390.0], [1000.0, 1850.0, 3870.0]],
    [[250.0, 450.0, 1780.0], [870.0, 3430.0, 4150.0], [600.0, 660.0, 770.0], [340.0, 590.0, 2020.0], [790.0, 3780.0, 5010.0]],
    [[850.0, 1040.0, 3320.0], [340.0, 480.0, 1490.0], [1280.0, 2180.0, 4270.0], [1360.0, 4330.0, 4960.0], [430.0, 620.0, 2280.0]],
    [[340.0, 3420.0, 5200.0], [280.0, 1690.0, 2540.0], [880.0, 1510.0, 1600.0], [290.0, 600.0, 760.0], [800.0, 1890.0, 3800.0]],
    [[550.0, 850.0, 3550.0], [330.0, 2970.0, 4380.0], [670.0, 2740.0, 3690.0], [620.0, 710.0, 5340.0], [290.0, 380.0, 470.0]],
    [[270.0, 330.0, 3150.0], [360.0, 390.0, 520.0], [260.0, 2050.0, 2750.0], [390.0, 510.0, 740.0], [540.0, 840.0, 1270.0]],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    Waveform,
    Feature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub n_phrases: usize,
    pub utts_per_pair: usize,
    pub utt_duration_s: f64,
    pub speaker_sep: f64,
    pub phrase_sep: f64,
    pub noise_level: f64,
    pub mode: SynthMode,
    /// Feature-mode dimensionality.
    pub feature_dim: usize,
    /// Framing used for the frame-label file.
    pub label_frame_len_ms: f64,
    pub label_frame_shift_ms: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            n_phrases: 10,
            utts_per_pair: 10,
            utt_duration_s: 1.0,
            speaker_sep: 2.0,
            phrase_sep: 1.0,
            noise_level: 0.01,
            mode: SynthMode::Waveform,
            feature_dim: 20,
            label_frame_len_ms: 25.0,
            label_frame_shift_ms: 10.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("synth.n_speakers", self.n_speakers),
            ("synth.n_phrases", self.n_phrases),
            ("synth.utts_per_pair", self.utts_per_pair),
            ("synth.feature_dim", self.feature_dim),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if self.mode == SynthMode::Waveform && self.n_phrases > PHRASE_TABLE.len() {
            return Err(Error::config(
                "synth.n_phrases",
                format!("waveform mode supports at most {} phrases", PHRASE_TABLE.len()),
            ));
        }
        if !(self.utt_duration_s > 0.0) {
            return Err(Error::config("synth.utt_duration_s", "must be positive"));
        }
        for (key, v) in [
            ("synth.speaker_sep", self.speaker_sep),
            ("synth.phrase_sep", self.phrase_sep),
            ("synth.noise_level", self.noise_level),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be finite and >= 0"));
            }
        }
        if !(self.label_frame_shift_ms > 0.0 && self.label_frame_len_ms >= self.label_frame_shift_ms) {
            return Err(Error::config("synth.label_frame_shift_ms", "need 0 < shift <= frame length"));
        }
        Ok(())
    }

    pub fn n_utterances(&self) -> usize {
        self.n_speakers * self.n_phrases * self.utts_per_pair
    }

    fn n_samples(&self) -> usize {
        (self.utt_duration_s * f64::from(SAMPLE_RATE)).round() as usize
    }
}

pub fn speaker_id(s: usize) -> String {
    format!("spk{s:03}")
}

pub fn phrase_id(p: usize) -> String {
    format!("phr{p:02}")
}

pub fn utt_id(s: usize, p: usize, u: usize) -> String {
    format!("spk{s:03}_phr{p:02}_u{u:02}")
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

/// Per-speaker voice parameters.
#[derive(Debug, Clone)]
struct Voice {
    /// Log frequency factor per component index, global factor included.
    log_scale: [f64; COMPONENTS],
    tilt: f64,
    /// Feature-mode mean offset.
    offset: Vec<f64>,
}

fn voice(spec: &SynthSpec, s: usize) -> Voice {
    let mut r = stream(spec.seed, SPEAKER_STREAM + s as u64);
    let global = 0.04 * normal(&mut r);
    let mut log_scale = [0.0; COMPONENTS];
    for v in &mut log_scale {
        *v = spec.speaker_sep * (global + 0.03 * normal(&mut r));
    }
    let tilt = spec.speaker_sep * 0.3 * normal(&mut r);
    let offset = (0..spec.feature_dim).map(|_| spec.speaker_sep * normal(&mut r)).collect();
    Voice { log_scale, tilt, offset }
}

/// Geometric mean of a component over the table's first `n` phrases.
fn common_frequency(n: usize, seg: usize, c: usize) -> f64 {
    (PHRASE_TABLE[..n].iter().map(|p| p[seg][c].ln()).sum::<f64>() / n as f64).exp()
}

fn phrase_frequencies(spec: &SynthSpec, p: usize) -> [[f64; COMPONENTS]; SEGMENTS] {
    let mut f = [[0.0; COMPONENTS]; SEGMENTS];
    for (seg, row) in f.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let common = common_frequency(spec.n_phrases, seg, c).ln();
            *v = (common + spec.phrase_sep * (PHRASE_TABLE[p][seg][c].ln() - common)).exp();
        }
    }
    f
}

/// Segment boundaries in samples, jittered around equal lengths.
fn segment_bounds(n: usize, r: &mut ChaCha8Rng) -> [usize; SEGMENTS + 1] {
    let weights: Vec<f64> = (0..SEGMENTS).map(|_| 1.0 + 0.1 * r.random_range(-1.0..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut b = [0usize; SEGMENTS + 1];
    let mut acc = 0.0;
    for i in 0..SEGMENTS {
        acc += weights[i];
        b[i + 1] = ((acc / total) * n as f64).round() as usize;
    }
    b[SEGMENTS] = n;
    b
}

fn render_waveform(spec: &SynthSpec, v: &Voice, freqs: &[[f64; COMPONENTS]; SEGMENTS], r: &mut ChaCha8Rng) -> (Vec<f64>, [usize; SEGMENTS + 1]) {
    let n = spec.n_samples();
    let bounds = segment_bounds(n, r);
    let jitter = 0.01 * normal(r);
    let nyquist = f64::from(SAMPLE_RATE) / 2.0;
    let mut out = vec![0.0; n];
    for seg in 0..SEGMENTS {
        for c in 0..COMPONENTS {
            let f = (freqs[seg][c].ln() + v.log_scale[c] + jitter).exp().min(0.95 * nyquist);
            let amp = COMPONENT_AMPLITUDES[c]
                * (f / 1000.0).powf(-v.tilt)
                * (1.0 + 0.1 * r.random_range(-1.0..1.0));
            let phase = r.random_range(0.0..std::f64::consts::TAU);
            let w = std::f64::consts::TAU * f / f64::from(SAMPLE_RATE);
            for (t, o) in out[bounds[seg]..bounds[seg + 1]].iter_mut().enumerate() {
                *o += amp * (w * t as f64 + phase).sin();
            }
        }
    }
    let peak = out.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1e-12);
    let gain = OUTPUT_GAIN / peak;
    for o in &mut out {
        *o = (*o * gain + spec.noise_level * normal(r)).clamp(-1.0, 1.0);
    }
    (out, bounds)
}

/// Labels `phrase * SEGMENTS + segment` for the frame whose centre falls in
/// that segment.
fn frame_labels(spec: &SynthSpec, p: usize, bounds: &[usize; SEGMENTS + 1], n_samples: usize) -> Vec<usize> {
    let sr = f64::from(SAMPLE_RATE);
    let frame = (spec.label_frame_len_ms * sr / 1000.0).round() as usize;
    let shift = (spec.label_frame_shift_ms * sr / 1000.0).round() as usize;
    let n = frame_count(n_samples, frame, shift).unwrap_or(0);
    (0..n)
        .map(|t| {
            let centre = t * shift + frame / 2;
            let seg = (0..SEGMENTS).rfind(|&s| bounds[s] <= centre).unwrap_or(0);
            p * SEGMENTS + seg
        })
        .collect()
}

pub struct Corpus {
    pub records: Vec<UtteranceRecord>,
    pub frame_labels: FrameLabels,
}

/// Writes the corpus under `out_dir`: payload files, `manifest.txt` and
/// `frame_labels.txt`.
pub fn generate_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<Corpus> {
    spec.validate()?;
    let sub = match spec.mode {
        SynthMode::Waveform => "wav",
        SynthMode::Feature => "feats",
    };
    let payload_dir = out_dir.join(sub);
    std::fs::create_dir_all(&payload_dir).map_err(|e| Error::io(&payload_dir, e))?;
    let voices: Vec<Voice> = (0..spec.n_speakers).map(|s| voice(spec, s)).collect();
    let freqs: Vec<_> = match spec.mode {
        SynthMode::Waveform => (0..spec.n_phrases).map(|p| phrase_frequencies(spec, p)).collect(),
        SynthMode::Feature => Vec::new(),
    };
    let anchors: Vec<Vec<f64>> = (0..spec.n_phrases)
        .map(|p| {
            let mut r = stream(spec.seed, PHRASE_STREAM + p as u64);
            (0..spec.feature_dim).map(|_| spec.phrase_sep * 2.0 * normal(&mut r)).collect()
        })
        .collect();

    let jobs: Vec<(usize, usize, usize, usize)> = (0..spec.n_speakers)
        .flat_map(|s| (0..spec.n_phrases).flat_map(move |p| (0..spec.utts_per_pair).map(move |u| (s, p, u))))
        .enumerate()
        .map(|(i, (s, p, u))| (i, s, p, u))
        .collect();
    let made = try_ordered_map(&jobs, |&(i, s, p, u)| -> Result<(UtteranceRecord, Vec<usize>)> {
        let id = utt_id(s, p, u);
        let mut r = stream(spec.seed, i as u64);
        let (rel, labels) = match spec.mode {
            SynthMode::Waveform => {
                let (samples, bounds) = render_waveform(spec, &voices[s], &freqs[p], &mut r);
                let n = samples.len();
                let rel = PathBuf::from(sub).join(format!("{id}.wav"));
                write_wav(&out_dir.join(&rel), &AudioSignal::new(samples, SAMPLE_RATE)?)?;
                (rel, frame_labels(spec, p, &bounds, n))
            }
            SynthMode::Feature => {
                let sr = 1000.0 / spec.label_frame_shift_ms;
                let rows = ((spec.utt_duration_s * sr).round() as usize).max(1);
                let mean: Vec<f64> = anchors[p].iter().zip(&voices[s].offset).map(|(a, o)| a + o).collect();
                let sd = 1.0 + spec.noise_level;
                let m = FeatureMatrix::from_fn(rows, spec.feature_dim, |_, d| mean[d] + sd * normal(&mut r));
                let rel = PathBuf::from(sub).join(format!("{id}.sdsv"));
                m.write_sdsv(&out_dir.join(&rel))?;
                let labels = (0..rows).map(|t| p * SEGMENTS + t * SEGMENTS / rows).collect();
                (rel, labels)
            }
        };
        Ok((
            UtteranceRecord {
                utt_id: id,
                speaker_id: speaker_id(s),
                phrase_id: phrase_id(p),
                path: rel,
            },
            labels,
        ))
    })?;
    let (records, labels): (Vec<UtteranceRecord>, Vec<Vec<usize>>) = made.into_iter().unzip();
    write_manifest(&out_dir.join("manifest.txt"), &records)?;
    let frame_labels: FrameLabels = records.iter().map(|r| r.utt_id.clone()).zip(labels).collect();
    crate::bnfeat::write_frame_labels(&out_dir.join("frame_labels.txt"), &frame_labels)?;
    let records = records
        .into_iter()
        .map(|mut r| {
            r.path = out_dir.join(&r.path);
            r
        })
        .collect();
    Ok(Corpus { records, frame_labels })
}
