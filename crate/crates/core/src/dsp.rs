//! Short-time Fourier analysis and overlap-add synthesis.
//!
//! Frames are taken without padding: a signal of `len` samples yields
//! `1 + (len - fft_size) / hop` frames, and trailing samples that do not fill
//! a whole frame are dropped. Analysis and synthesis both use a periodic
//! square-root Hann window, so the synthesis normalisation is a constant
//! whenever `hop` divides `fft_size` with at least two frames of overlap.

use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono audio samples at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
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

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    /// Truncates to at most `len` samples.
    pub fn truncated(&self, len: usize) -> Waveform {
        Waveform {
            samples: self.samples[..len.min(self.samples.len())].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    #[default]
    SqrtHann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    #[serde(default)]
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_size: 1024,
            hop: 256,
            window: Window::SqrtHann,
        }
    }
}

impl StftConfig {
    pub fn new(fft_size: usize, hop: usize) -> Result<Self> {
        let cfg = Self {
            fft_size,
            hop,
            window: Window::SqrtHann,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size == 0 || !self.fft_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "fft_size must be positive and even, got {}",
                self.fft_size
            )));
        }
        if self.hop == 0 || !self.fft_size.is_multiple_of(self.hop) {
            return Err(Error::InvalidConfig(format!(
                "hop {} must divide fft_size {}",
                self.hop, self.fft_size
            )));
        }
        // a single frame per sample position cannot satisfy COLA for sqrt-Hann
        if self.fft_size / self.hop < 2 {
            return Err(Error::InvalidConfig(format!(
                "hop {} must be at most fft_size/2",
                self.hop
            )));
        }
        Ok(())
    }

    /// Number of one-sided frequency bins.
    pub fn freq_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.fft_size {
            0
        } else {
            1 + (len - self.fft_size) / self.hop
        }
    }

    /// Signal length produced by overlap-adding `frames` frames.
    pub fn signal_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.fft_size
        }
    }

    /// Sample range covered by the full overlap of frames.
    pub fn interior(&self, len: usize) -> std::ops::Range<usize> {
        let edge = self.fft_size - self.hop;
        if len <= 2 * edge {
            edge..edge
        } else {
            edge..len - edge
        }
    }

    pub fn window(&self) -> Vec<f64> {
        match self.window {
            Window::SqrtHann => sqrt_hann(self.fft_size),
        }
    }

    /// Constant overlap-add gain of the squared window.
    fn ola_gain(&self) -> f64 {
        let w = self.window();
        (0..self.fft_size / self.hop)
            .map(|k| w[k * self.hop].powi(2))
            .sum()
    }
}

/// Periodic square-root Hann window.
pub fn sqrt_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).sqrt())
        .collect()
}

/// Complex one-sided STFT, `[F × N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub bins: Array2<Complex64>,
    pub config: StftConfig,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn new(bins: Array2<Complex64>, config: StftConfig, sample_rate: u32) -> Result<Self> {
        config.validate()?;
        if bins.nrows() != config.freq_bins() {
            return Err(Error::DimMismatch {
                what: "spectrogram frequency bins",
                expected: config.freq_bins(),
                got: bins.nrows(),
            });
        }
        if bins.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite("spectrogram bins".into()));
        }
        Ok(Self {
            bins,
            config,
            sample_rate,
        })
    }

    pub fn zeros(config: StftConfig, frames: usize, sample_rate: u32) -> Self {
        Self {
            bins: Array2::zeros((config.freq_bins(), frames)),
            config,
            sample_rate,
        }
    }

    pub fn freq_bins(&self) -> usize {
        self.bins.nrows()
    }

    pub fn frames(&self) -> usize {
        self.bins.ncols()
    }
}

/// Squared magnitudes of a [`ComplexSpectrogram`].
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrogram {
    pub power: Array2<f64>,
}

impl PowerSpectrogram {
    pub fn freq_bins(&self) -> usize {
        self.power.nrows()
    }

    pub fn frames(&self) -> usize {
        self.power.ncols()
    }

    /// Power values of frame `n`.
    pub fn frame(&self, n: usize) -> Vec<f64> {
        self.power.column(n).to_vec()
    }
}

pub fn stft(wave: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    let len = wave.len();
    if len < cfg.fft_size {
        return Err(Error::InputTooShort {
            needed: cfg.fft_size,
            got: len,
        });
    }
    // Waveform::new guarantees finiteness, but the samples may come from elsewhere
    if wave.samples().iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("stft input".into()));
    }
    let n_frames = cfg.num_frames(len);
    let f_bins = cfg.freq_bins();
    let window = cfg.window();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    let mut bins = Array2::zeros((f_bins, n_frames));
    let x = wave.samples();
    for n in 0..n_frames {
        let start = n * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(x[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for f in 0..f_bins {
            bins[[f, n]] = buf[f];
        }
    }
    Ok(ComplexSpectrogram {
        bins,
        config: *cfg,
        sample_rate: wave.sample_rate(),
    })
}

pub fn istft(spec: &ComplexSpectrogram) -> Result<Waveform> {
    let cfg = &spec.config;
    cfg.validate()?;
    if spec.freq_bins() != cfg.freq_bins() {
        return Err(Error::DimMismatch {
            what: "spectrogram frequency bins",
            expected: cfg.freq_bins(),
            got: spec.freq_bins(),
        });
    }
    let n_fft = cfg.fft_size;
    let n_frames = spec.frames();
    let window = cfg.window();
    let gain = cfg.ola_gain();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);
    let mut out = vec![0.0; cfg.signal_len(n_frames)];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let half = n_fft / 2;
    for n in 0..n_frames {
        buf[0] = spec.bins[[0, n]];
        buf[half] = spec.bins[[half, n]];
        for f in 1..half {
            let c = spec.bins[[f, n]];
            buf[f] = c;
            buf[n_fft - f] = c.conj();
        }
        ifft.process(&mut buf);
        let start = n * cfg.hop;
        let scale = 1.0 / (n_fft as f64 * gain);
        for i in 0..n_fft {
            out[start + i] += buf[i].re * window[i] * scale;
        }
    }
    Waveform::new(out, spec.sample_rate)
}

pub fn power_spectrum(spec: &ComplexSpectrogram) -> PowerSpectrogram {
    PowerSpectrogram {
        power: spec.bins.mapv(|c| c.norm_sqr()),
    }
}
