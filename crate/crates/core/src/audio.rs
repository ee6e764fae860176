//! Audio front end: waveform container, resampling, log-mel spectrograms
//! and WAV I/O.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{invalid, Error, Result};

/// Mono waveform with amplitudes nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(invalid!("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(invalid!("sample {i} is not finite"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(duration_s: f64, sample_rate: u32) -> Result<Self> {
        let n = (duration_s * sample_rate as f64).round() as usize;
        Self::new(vec![0.0; n], sample_rate)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
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
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let ss: f64 = self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
        (ss / self.samples.len() as f64).sqrt()
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }
}

/// Linear-interpolation resampler.
///
/// Output length is `round(len * target / source)`; output sample `i` is read
/// at source position `i * source / target`, clamped to the last sample.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if clip.is_empty() {
        return Err(invalid!("cannot resample an empty clip"));
    }
    if target_rate == 0 {
        return Err(invalid!("target rate must be positive"));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let src = &clip.samples;
    let ratio = clip.sample_rate as f64 / target_rate as f64;
    let out_len = ((src.len() as f64) / ratio).round().max(1.0) as usize;
    let last = src.len() - 1;
    let out = (0..out_len)
        .map(|i| {
            let x = i as f64 * ratio;
            let i0 = (x.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let frac = (x - i0 as f64).clamp(0.0, 1.0);
            (src[i0] as f64 * (1.0 - frac) + src[i1] as f64 * frac) as f32
        })
        .collect();
    AudioClip::new(out, target_rate)
}

/// STFT / mel projection parameters. Defaults give a 201x64 matrix for one
/// second of 16 kHz audio.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub win: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Floor added before the logarithm.
    pub eps: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            win: 160,
            hop: 80,
            n_fft: 512,
            n_mels: 64,
            f_min: 0.0,
            f_max: 8_000.0,
            eps: 1e-6,
        }
    }
}

impl MelConfig {
    /// Number of frames produced for `len` samples under centre padding.
    pub fn num_frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    fn validate(&self) -> Result<()> {
        if self.win == 0 || self.hop == 0 || self.n_mels == 0 {
            return Err(invalid!("win, hop and n_mels must be positive"));
        }
        if self.n_fft < self.win {
            return Err(invalid!("n_fft ({}) must be >= win ({})", self.n_fft, self.win));
        }
        if !(self.f_min >= 0.0 && self.f_max > self.f_min) {
            return Err(invalid!("mel range [{}, {}] is empty", self.f_min, self.f_max));
        }
        if self.f_max > self.sample_rate as f64 / 2.0 + 1e-9 {
            return Err(invalid!("f_max above Nyquist"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    /// T x M, log-magnitude.
    pub values: Array2<f32>,
}

impl LogMelSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn mels(&self) -> usize {
        self.values.ncols()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// HTK-style triangular filters, `n_mels x (n_fft/2 + 1)`, unit peak height.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let n_bins = cfg.n_fft / 2 + 1;
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    Array2::from_shape_fn((cfg.n_mels, n_bins), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
        if f <= left || f >= right {
            0.0
        } else if f <= centre {
            (f - left) / (centre - left)
        } else {
            (right - f) / (right - centre)
        }
    })
}

/// Reusable log-mel extractor; holds the FFT plan, window and filterbank.
pub struct LogMel {
    cfg: MelConfig,
    window: Vec<f64>,
    filters: Array2<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for LogMel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMel").field("cfg", &self.cfg).finish()
    }
}

impl LogMel {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            window: hann_window(cfg.win),
            filters: mel_filterbank(&cfg),
            fft,
            cfg,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Magnitude spectrum of every centre-padded frame, `T x (n_fft/2+1)`.
    pub fn magnitudes(&self, clip: &AudioClip) -> Result<Array2<f64>> {
        let cfg = &self.cfg;
        if clip.sample_rate() != cfg.sample_rate {
            return Err(invalid!(
                "expected {} Hz audio, got {} Hz",
                cfg.sample_rate,
                clip.sample_rate()
            ));
        }
        let x = clip.samples();
        let pad = cfg.win / 2;
        if x.len() < cfg.win || x.len() <= pad {
            return Err(invalid!(
                "clip of {} samples is shorter than one window ({})",
                x.len(),
                cfg.win
            ));
        }
        let padded = reflect_pad(x, pad);
        let frames = cfg.num_frames(x.len());
        let n_bins = cfg.n_fft / 2 + 1;
        let mut out = Array2::zeros((frames, n_bins));
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        for t in 0..frames {
            let start = t * cfg.hop;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, w) in self.window.iter().enumerate() {
                let v = padded.get(start + i).copied().unwrap_or(0.0);
                buf[i] = Complex::new(v * w, 0.0);
            }
            self.fft.process(&mut buf);
            for (k, c) in buf.iter().take(n_bins).enumerate() {
                out[[t, k]] = c.norm();
            }
        }
        Ok(out)
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<LogMelSpectrogram> {
        let mags = self.magnitudes(clip)?;
        let mel = mags.dot(&self.filters.t());
        let eps = self.cfg.eps;
        Ok(LogMelSpectrogram {
            values: mel.mapv(|v| (v + eps).ln() as f32),
        })
    }
}

fn reflect_pad(x: &[f32], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i] as f64));
    out.extend(x.iter().map(|&v| v as f64));
    out.extend((0..pad).map(|i| x[n - 2 - i] as f64));
    out
}

/// One-shot log-mel with the given STFT parameters and default mel range.
pub fn log_mel(clip: &AudioClip, win: usize, hop: usize, n_mels: usize) -> Result<LogMelSpectrogram> {
    let cfg = MelConfig {
        win,
        hop,
        n_mels,
        n_fft: MelConfig::default().n_fft.max(win.next_power_of_two()),
        ..MelConfig::default()
    };
    LogMel::new(cfg)?.compute(clip)
}

/// Reads PCM16 or float32 WAV; multi-channel input is averaged to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.into_samples::<f32>().collect::<Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<Result<_, _>>()?
        }
    };
    let mono = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f32>() / channels as f32)
        .collect();
    AudioClip::new(mono, spec.sample_rate).map_err(|e| match e {
        Error::InvalidInput(msg) => Error::corrupt(path, msg),
        other => other,
    })
}

/// Writes 16-bit mono PCM; samples are clipped to [-1, 1].
pub fn write_wav_pcm16(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path.as_ref(), spec)?;
    for &s in clip.samples() {
        w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}
