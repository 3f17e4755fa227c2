//! Onset density from audio and the provider abstraction for mid-level features.
//!
//! Only onset density is computed here. The seven learned mid-level features
//! are ingested from the catalog; a [`FeatureProvider`] decides whether the
//! stored onset density is used as-is or recomputed from the recording.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Catalog, CorpusError, Performance, SCHEMA_VERSION};
use crate::features::MidLevelVector;

/// Shortest clip onset density is defined for, in seconds.
pub const MIN_CLIP_SECONDS: f64 = 1.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unsupported encoding ({detail})")]
    UnsupportedEncoding { path: String, detail: String },
    #[error("{path}: malformed or truncated WAV data ({detail})")]
    Malformed { path: String, detail: String },
    #[error("{path}: data chunk is empty")]
    EmptyData { path: String },
    #[error("clip too short: {seconds:.3} s (need at least {MIN_CLIP_SECONDS} s)")]
    ClipTooShort { seconds: f64 },
    #[error("invalid onset configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("performance {performance_id:?}: {reason}")]
    Provider { performance_id: String, reason: String },
}

/// Mono audio in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        if samples.is_empty() {
            return Err(AudioError::InvalidClip("no samples".into()));
        }
        if sample_rate == 0 {
            return Err(AudioError::InvalidClip("sample rate must be positive".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

/// Reads a RIFF/WAVE file (integer PCM or 32-bit float), averaging channels to mono.
pub fn decode_wav(path: impl AsRef<Path>) -> Result<AudioClip, AudioError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(&name, e))?;
    let spec = reader.spec();
    let channels = usize::from(spec.channels);
    let declared = reader.len() as usize;
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(|e| truncated(&name, e))?,
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / f64::from(1u32 << (bits - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()
                .map_err(|e| truncated(&name, e))?
        }
        (format, bits) => {
            return Err(AudioError::UnsupportedEncoding {
                path: name,
                detail: format!("{format:?} with {bits} bits per sample"),
            })
        }
    };
    if interleaved.is_empty() {
        return Err(AudioError::EmptyData { path: name });
    }
    if interleaved.len() < declared {
        return Err(AudioError::Malformed {
            path: name,
            detail: format!("data chunk declares {declared} samples, file holds {}", interleaved.len()),
        });
    }
    if !interleaved.len().is_multiple_of(channels) {
        return Err(AudioError::Malformed {
            path: name,
            detail: "partial sample frame".into(),
        });
    }
    let mono: Vec<f32> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    AudioClip::new(mono, spec.sample_rate)
}

fn truncated(path: &str, err: hound::Error) -> AudioError {
    AudioError::Malformed {
        path: path.into(),
        detail: format!("reading samples: {err}"),
    }
}

fn map_hound(path: &str, err: hound::Error) -> AudioError {
    match err {
        hound::Error::IoError(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => AudioError::Malformed {
            path: path.into(),
            detail: "unexpected end of file".into(),
        },
        hound::Error::IoError(source) => AudioError::Io {
            path: path.into(),
            source,
        },
        hound::Error::Unsupported => AudioError::UnsupportedEncoding {
            path: path.into(),
            detail: "format tag not PCM or IEEE float".into(),
        },
        other => AudioError::Malformed {
            path: path.into(),
            detail: other.to_string(),
        },
    }
}

/// Writes a mono 16-bit PCM file. Samples are clamped to [-1, 1].
pub fn write_wav_pcm16(path: impl AsRef<Path>, clip: &AudioClip) -> Result<(), AudioError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(&name, e))?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(|e| map_hound(&name, e))?;
    }
    writer.finalize().map_err(|e| map_hound(&name, e))
}

/// Spectral-flux onset detector settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnsetConfig {
    /// STFT frame length in samples, a power of two.
    pub frame_size: usize,
    pub hop_size: usize,
    /// Width of the moving average over the flux curve, in frames.
    pub flux_smoothing: usize,
    /// Height a peak must reach above the local median of the max-normalized flux.
    pub peak_threshold_delta: f64,
    /// Seconds.
    pub min_inter_onset_gap: f64,
    /// Span of the local median, in seconds, centered on each frame.
    pub median_window: f64,
}

impl Default for OnsetConfig {
    fn default() -> Self {
        Self {
            frame_size: 2048,
            hop_size: 512,
            flux_smoothing: 3,
            peak_threshold_delta: 0.07,
            min_inter_onset_gap: 0.05,
            median_window: 0.5,
        }
    }
}

impl OnsetConfig {
    pub fn validate(&self) -> Result<(), AudioError> {
        let bad = |msg: &str| Err(AudioError::InvalidConfig(msg.into()));
        if self.frame_size == 0 || !self.frame_size.is_power_of_two() {
            return bad("frame_size must be a positive power of two");
        }
        if self.hop_size == 0 || self.hop_size > self.frame_size {
            return bad("hop_size must be in 1..=frame_size");
        }
        if self.flux_smoothing == 0 {
            return bad("flux_smoothing must be at least 1 frame");
        }
        if !(self.peak_threshold_delta >= 0.0 && self.peak_threshold_delta.is_finite()) {
            return bad("peak_threshold_delta must be finite and >= 0");
        }
        if !(self.min_inter_onset_gap > 0.0 && self.min_inter_onset_gap.is_finite()) {
            return bad("min_inter_onset_gap must be positive");
        }
        if !(self.median_window > 0.0 && self.median_window.is_finite()) {
            return bad("median_window must be positive");
        }
        Ok(())
    }
}

/// Half-wave rectified spectral flux per STFT frame (Hann window).
///
/// The frame before the first is taken as silence, so sound present at the
/// very start counts as an onset.
pub fn spectral_flux(samples: &[f32], frame_size: usize, hop_size: usize) -> Vec<f64> {
    let n_frames = if samples.len() <= frame_size {
        1
    } else {
        1 + (samples.len() - frame_size) / hop_size
    };
    let window: Vec<f64> = (0..frame_size)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / frame_size as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(frame_size);
    let bins = frame_size / 2 + 1;
    let mut prev = vec![0.0f64; bins];
    let mut mag = vec![0.0f64; bins];
    let mut buf = vec![Complex::new(0.0, 0.0); frame_size];
    let mut flux = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let start = t * hop_size;
        for (i, slot) in buf.iter_mut().enumerate() {
            let s = samples.get(start + i).copied().unwrap_or(0.0);
            *slot = Complex::new(f64::from(s) * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (m, c) in mag.iter_mut().zip(&buf) {
            *m = c.norm();
        }
        flux.push(mag.iter().zip(&prev).map(|(m, p)| (m - p).max(0.0)).sum());
        std::mem::swap(&mut prev, &mut mag);
    }
    flux
}

fn moving_average(values: &[f64], width: usize) -> Vec<f64> {
    let left = width / 2;
    let right = width - 1 - left;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(left);
            let hi = (i + right).min(values.len() - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Onset times in seconds (frame start times).
///
/// The smoothed flux is normalized by its maximum; a frame is an onset when
/// it is a local maximum exceeding the median of its neighbourhood by
/// `peak_threshold_delta` and lies at least `min_inter_onset_gap` after the
/// previous onset.
pub fn detect_onsets(clip: &AudioClip, config: &OnsetConfig) -> Result<Vec<f64>, AudioError> {
    config.validate()?;
    let flux = spectral_flux(&clip.samples, config.frame_size, config.hop_size);
    let smooth = moving_average(&flux, config.flux_smoothing);
    let peak = smooth.iter().cloned().fold(0.0, f64::max);
    if peak <= 1e-10 {
        return Ok(Vec::new());
    }
    let norm: Vec<f64> = smooth.iter().map(|v| v / peak).collect();
    let frame_seconds = config.hop_size as f64 / f64::from(clip.sample_rate);
    let half = ((config.median_window / 2.0) / frame_seconds).round().max(1.0) as usize;
    let mut onsets: Vec<f64> = Vec::new();
    let mut scratch = Vec::with_capacity(2 * half + 1);
    for t in 0..norm.len() {
        let v = norm[t];
        let left = if t == 0 { 0.0 } else { norm[t - 1] };
        let right = norm.get(t + 1).copied().unwrap_or(0.0);
        if !(v > left && v >= right) {
            continue;
        }
        scratch.clear();
        scratch.extend_from_slice(&norm[t.saturating_sub(half)..(t + half + 1).min(norm.len())]);
        if v < median(&mut scratch) + config.peak_threshold_delta {
            continue;
        }
        let time = t as f64 * frame_seconds;
        if onsets.last().is_none_or(|&last| time - last >= config.min_inter_onset_gap) {
            onsets.push(time);
        }
    }
    Ok(onsets)
}

/// Onsets per second over the whole clip.
pub fn onset_density(clip: &AudioClip, config: &OnsetConfig) -> Result<f64, AudioError> {
    let seconds = clip.duration();
    if seconds < MIN_CLIP_SECONDS {
        return Err(AudioError::ClipTooShort { seconds });
    }
    Ok(detect_onsets(clip, config)?.len() as f64 / seconds)
}

/// Features supplied for one performance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProvidedFeatures {
    pub features: MidLevelVector,
    /// `(stored, computed)` when the catalog's onset density was replaced.
    pub onset_override: Option<(f64, f64)>,
}

/// Source of the full eight-dimensional vector for a performance.
pub trait FeatureProvider: Sync {
    fn provide(&self, performance: &Performance) -> Result<ProvidedFeatures, AudioError>;
}

/// Uses the catalog's precomputed features unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct CatalogPassthrough;

impl FeatureProvider for CatalogPassthrough {
    fn provide(&self, performance: &Performance) -> Result<ProvidedFeatures, AudioError> {
        Ok(ProvidedFeatures {
            features: performance.features,
            onset_override: None,
        })
    }
}

/// Keeps the seven stored mid-level features and recomputes onset density
/// from the performance's audio file.
#[derive(Debug, Clone)]
pub struct ComputedOnsetDensity {
    pub config: OnsetConfig,
    /// Relative `audio_path`s are resolved against this directory.
    pub base_dir: PathBuf,
}

impl ComputedOnsetDensity {
    pub fn new(config: OnsetConfig, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            config,
            base_dir: base_dir.into(),
        }
    }
}

impl FeatureProvider for ComputedOnsetDensity {
    fn provide(&self, performance: &Performance) -> Result<ProvidedFeatures, AudioError> {
        let fail = |reason: String| AudioError::Provider {
            performance_id: performance.performance_id.clone(),
            reason,
        };
        let rel = performance
            .audio_path
            .as_deref()
            .ok_or_else(|| fail("no audio_path; cannot compute onset_density".into()))?;
        let clip = decode_wav(self.base_dir.join(rel)).map_err(|e| fail(e.to_string()))?;
        let computed = onset_density(&clip, &self.config).map_err(|e| fail(e.to_string()))?;
        let stored = performance.features.onset_density();
        let features = performance.features.with_onset_density(computed).map_err(fail)?;
        Ok(ProvidedFeatures {
            features,
            onset_override: Some((stored, computed)),
        })
    }
}

pub fn provide_features(
    provider: &dyn FeatureProvider,
    performance: &Performance,
) -> Result<ProvidedFeatures, AudioError> {
    provider.provide(performance)
}

/// Onset densities computed for a batch of performances.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CatalogPatch {
    pub schema_version: u32,
    pub onset_density: BTreeMap<String, f64>,
}

/// Computes onset density for every performance that has an audio file.
///
/// Files are processed in parallel; a failing file does not affect the
/// others and is reported in the second return value.
pub fn extract_onset_patch(
    catalog: &Catalog,
    provider: &ComputedOnsetDensity,
) -> (CatalogPatch, Vec<AudioError>) {
    let results: Vec<_> = catalog
        .performances()
        .par_iter()
        .filter(|p| p.audio_path.is_some())
        .map(|p| (p.performance_id.clone(), provider.provide(p)))
        .collect();
    let mut patch = CatalogPatch {
        schema_version: SCHEMA_VERSION,
        onset_density: BTreeMap::new(),
    };
    let mut errors = Vec::new();
    for (id, result) in results {
        match result {
            Ok(provided) => {
                patch.onset_density.insert(id, provided.features.onset_density());
            }
            Err(e) => errors.push(e),
        }
    }
    (patch, errors)
}

/// Returns a catalog with onset densities replaced by the patch's values.
pub fn apply_patch(catalog: &Catalog, patch: &CatalogPatch) -> Result<Catalog, CorpusError> {
    let mut updated = std::collections::HashMap::new();
    for (id, &value) in &patch.onset_density {
        let perf = catalog
            .performance(id)
            .ok_or_else(|| CorpusError::Integrity(format!("patch names unknown performance {id:?}")))?;
        let features = perf
            .features
            .with_onset_density(value)
            .map_err(|reason| CorpusError::InvalidFeatures {
                context: format!("patch for {id:?}"),
                reason,
            })?;
        updated.insert(id.clone(), features);
    }
    catalog.with_features(&updated)
}
