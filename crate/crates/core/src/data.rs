//! File formats, mixing at a target SNR, and the synthetic audio-visual
//! corpus generator.
//!
//! The generator draws from exactly the model family: a fixed random decoder
//! produces spectral variances from smooth latent trajectories, and lip
//! features are a noisy linear view of the latents. Its ground-truth
//! parameters (including the exact Gaussian conditional of `z` given the lip
//! features as the prior) are available as a [`WaeParams`].

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus_inv, Tensor};
use crate::dsp::{istft, ComplexSpectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, Regularizer, VisualFeatures, WaeParams};
use crate::seed;

pub const SAMPLE_RATE: u32 = 16_000;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes(b[i..i + 4].try_into().unwrap())
}

// ---------------------------------------------------------------- WAV

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    parse_wav(&read_file(path.as_ref())?)
}

pub fn write_wav(wave: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_wav(wave))
}

/// Clamps to `[-1, 1]` and rounds to the nearest 16-bit code.
pub fn quantize(x: f64) -> i16 {
    (x.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Mono PCM-16 RIFF/WAVE bytes.
pub fn encode_wav(wave: &Waveform) -> Vec<u8> {
    let data_len = (wave.len() * 2) as u32;
    let rate = wave.sample_rate();
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in wave.samples() {
        out.extend_from_slice(&quantize(s).to_le_bytes());
    }
    out
}

pub fn parse_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::MalformedWav("missing RIFF/WAVE header".into()));
    }
    let riff_end = u32_at(bytes, 4) as usize + 8;
    if riff_end < 12 {
        return Err(Error::MalformedWav("RIFF size too small".into()));
    }
    if bytes.len() < riff_end {
        return Err(Error::Truncated {
            expected: riff_end,
            found: bytes.len(),
        });
    }
    if bytes.len() > riff_end {
        return Err(Error::TrailingBytes(bytes.len() - riff_end));
    }
    let mut pos = 12;
    let mut rate = None;
    let mut samples = None;
    while pos < riff_end {
        if pos + 8 > riff_end {
            return Err(Error::MalformedWav("partial chunk header".into()));
        }
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body.checked_add(size).filter(|&e| e <= riff_end).ok_or(
            Error::Truncated {
                expected: body.saturating_add(size),
                found: riff_end,
            },
        )?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::MalformedWav("fmt chunk too short".into()));
                }
                let format = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let sr = u32_at(bytes, body + 4);
                let bits = u16_at(bytes, body + 14);
                if channels != 1 {
                    return Err(Error::UnsupportedChannels(channels));
                }
                if format != 1 || bits != 16 {
                    return Err(Error::UnsupportedEncoding { format, bits });
                }
                if sr == 0 {
                    return Err(Error::MalformedWav("zero sample rate".into()));
                }
                rate = Some(sr);
            }
            b"data" => {
                if rate.is_none() {
                    return Err(Error::MalformedWav("data chunk before fmt chunk".into()));
                }
                if !size.is_multiple_of(2) {
                    return Err(Error::MalformedWav("odd data chunk length".into()));
                }
                samples = Some(
                    bytes[body..end]
                        .chunks_exact(2)
                        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                        .collect::<Vec<_>>(),
                );
            }
            _ => {}
        }
        pos = end + (size & 1);
    }
    match (rate, samples) {
        (Some(r), Some(s)) => Waveform::new(s, r),
        (None, _) => Err(Error::MalformedWav("missing fmt chunk".into())),
        (_, None) => Err(Error::MalformedWav("missing data chunk".into())),
    }
}

// ---------------------------------------------------------------- UVFT

const UVFT_MAGIC: [u8; 4] = *b"UVFT";
const UVFT_VERSION: u32 = 1;
const UVFT_HEADER: usize = 18;

/// Single-precision feature matrix `[frames × dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub frames: Array2<f32>,
}

impl FeatureFile {
    pub fn new(frames: Array2<f32>) -> Result<Self> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "feature matrix must have at least one row and column".into(),
            ));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature file".into()));
        }
        Ok(Self { frames })
    }

    /// Rounds an `f64` matrix to single precision.
    pub fn from_f64(frames: &Array2<f64>) -> Result<Self> {
        Self::new(frames.mapv(|v| v as f32))
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.frames.mapv(f64::from)
    }
}

pub fn read_uvft(path: impl AsRef<Path>) -> Result<FeatureFile> {
    parse_uvft(&read_file(path.as_ref())?)
}

pub fn write_uvft(f: &FeatureFile, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_uvft(f))
}

pub fn encode_uvft(f: &FeatureFile) -> Vec<u8> {
    let (n, d) = f.frames.dim();
    let mut out = Vec::with_capacity(UVFT_HEADER + n * d * 4);
    out.extend_from_slice(&UVFT_MAGIC);
    out.extend_from_slice(&UVFT_VERSION.to_le_bytes());
    out.push(1);
    out.push(2);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in f.frames.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_uvft(bytes: &[u8]) -> Result<FeatureFile> {
    if bytes.len() >= 4 && bytes[0..4] != UVFT_MAGIC {
        return Err(Error::BadMagic {
            expected: UVFT_MAGIC,
            found: bytes[0..4].try_into().unwrap(),
        });
    }
    if bytes.len() < UVFT_HEADER {
        return Err(Error::Truncated {
            expected: UVFT_HEADER,
            found: bytes.len(),
        });
    }
    let version = u32_at(bytes, 4);
    if version != UVFT_VERSION {
        return Err(Error::VersionMismatch {
            expected: UVFT_VERSION,
            found: version,
        });
    }
    if bytes[8] != 1 {
        return Err(Error::UnsupportedDtype(bytes[8]));
    }
    if bytes[9] != 2 {
        return Err(Error::MalformedHeader(format!(
            "expected 2 dimensions, found {}",
            bytes[9]
        )));
    }
    let n = u32_at(bytes, 10) as usize;
    let d = u32_at(bytes, 14) as usize;
    if n == 0 || d == 0 {
        return Err(Error::MalformedHeader(format!("empty shape {n}×{d}")));
    }
    let payload = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::DimOverflow(format!("{n}×{d} f32 values")))?;
    let expected = UVFT_HEADER
        .checked_add(payload)
        .ok_or_else(|| Error::DimOverflow(format!("{n}×{d} f32 values")))?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes(bytes.len() - expected));
    }
    let data = bytes[UVFT_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureFile::new(Array2::from_shape_vec((n, d), data).expect("length checked"))
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    pub wav: PathBuf,
    pub lip: PathBuf,
    pub ident: PathBuf,
    pub split: String,
}

/// Utterance records plus the directory relative paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
    pub base_dir: PathBuf,
}

/// One loaded utterance.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub wave: Waveform,
    pub visual: VisualFeatures,
}

impl Manifest {
    pub fn new(records: Vec<UtteranceRecord>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate utterance id {:?}",
                    r.id
                )));
            }
        }
        Ok(Self {
            records,
            base_dir: base_dir.into(),
        })
    }

    /// Parses the manifest and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let records: Vec<UtteranceRecord> = serde_json::from_slice(&read_file(path)?)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::new(records, base)?;
        for r in &m.records {
            for p in [&r.wav, &r.lip, &r.ident] {
                let full = m.resolve(p);
                if !full.is_file() {
                    return Err(Error::io(
                        full,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file not found"),
                    ));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(&self.records)?;
        json.push(b'\n');
        write_file(path.as_ref(), &json)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records whose split tag equals `tag`.
    pub fn with_split<'a>(&'a self, tag: &'a str) -> impl Iterator<Item = &'a UtteranceRecord> {
        self.records.iter().filter(move |r| r.split == tag)
    }

    pub fn load_utterance(&self, r: &UtteranceRecord) -> Result<Utterance> {
        let wave = read_wav(self.resolve(&r.wav))?;
        let visual = load_visual(self.resolve(&r.lip), self.resolve(&r.ident))?;
        Ok(Utterance {
            id: r.id.clone(),
            wave,
            visual,
        })
    }

    /// Loads every record in parallel, preserving manifest order.
    pub fn load_all(&self) -> Result<Vec<Utterance>> {
        self.records
            .par_iter()
            .map(|r| self.load_utterance(r))
            .collect()
    }
}

/// Lip stream plus the identity vector from frame 0 of the identity file.
pub fn load_visual(lip: impl AsRef<Path>, ident: impl AsRef<Path>) -> Result<VisualFeatures> {
    let lip = read_uvft(lip)?.to_f64();
    let ident = read_uvft(ident)?;
    let identity = ident.frames.row(0).iter().map(|&v| f64::from(v)).collect();
    VisualFeatures::new(lip, identity)
}

// ---------------------------------------------------------------- mixing

/// `interferer` looped or trimmed to the length of `clean` and scaled so the
/// clean-to-interferer energy ratio is `snr_db`.
pub fn scaled_interferer(clean: &Waveform, interferer: &Waveform, snr_db: f64) -> Result<Waveform> {
    if clean.sample_rate() != interferer.sample_rate() {
        return Err(Error::InvalidArgument(format!(
            "sample rates differ: {} vs {}",
            clean.sample_rate(),
            interferer.sample_rate()
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("snr must be finite, got {snr_db}")));
    }
    if interferer.is_empty() {
        return Err(Error::Silent("interferer"));
    }
    let looped: Vec<f64> = interferer
        .samples()
        .iter()
        .cycle()
        .take(clean.len())
        .copied()
        .collect();
    let e_int: f64 = looped.iter().map(|s| s * s).sum();
    if e_int == 0.0 {
        return Err(Error::Silent("interferer"));
    }
    let e_clean = clean.energy();
    if e_clean == 0.0 {
        return Err(Error::Silent("clean signal"));
    }
    let alpha = (e_clean / (e_int * 10f64.powf(snr_db / 10.0))).sqrt();
    Waveform::new(
        looped.into_iter().map(|s| alpha * s).collect(),
        clean.sample_rate(),
    )
}

/// `clean + α·interferer` at the requested SNR.
pub fn mix(clean: &Waveform, interferer: &Waveform, snr_db: f64) -> Result<Waveform> {
    let scaled = scaled_interferer(clean, interferer, snr_db)?;
    Waveform::new(
        clean
            .samples()
            .iter()
            .zip(scaled.samples())
            .map(|(a, b)| a + b)
            .collect(),
        clean.sample_rate(),
    )
}

/// Sum of equal-length, equal-rate waveforms.
pub fn sum_waves(waves: &[Waveform]) -> Result<Waveform> {
    let first = waves.first().ok_or(Error::InvalidArgument("nothing to sum".into()))?;
    let mut out = vec![0.0; first.len()];
    for w in waves {
        if w.len() != first.len() || w.sample_rate() != first.sample_rate() {
            return Err(Error::InvalidArgument(
                "waveforms differ in length or sample rate".into(),
            ));
        }
        for (o, s) in out.iter_mut().zip(w.samples()) {
            *o += s;
        }
    }
    Waveform::new(out, first.sample_rate())
}

// ---------------------------------------------------------------- synthesis

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_utts: usize,
    pub frames_per_utt: usize,
    pub latent_dim: usize,
    pub lip_dim: usize,
    pub id_dim: usize,
    pub seed: u64,
    /// Hidden width of the ground-truth networks; at least `2 * latent_dim`.
    pub decoder_width: usize,
    pub stft: StftConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            n_utts: 200,
            frames_per_utt: 50,
            latent_dim: m.latent_dim,
            lip_dim: m.lip_dim,
            id_dim: m.id_dim,
            seed: 0,
            decoder_width: m.hidden,
            stft: StftConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_utts", self.n_utts),
            ("frames_per_utt", self.frames_per_utt),
            ("latent_dim", self.latent_dim),
            ("lip_dim", self.lip_dim),
            ("id_dim", self.id_dim),
            ("decoder_width", self.decoder_width),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("synth {name} must be positive")));
            }
        }
        if self.decoder_width < 2 * self.latent_dim {
            return Err(Error::InvalidConfig(format!(
                "synth decoder_width {} must be at least twice latent_dim {}",
                self.decoder_width, self.latent_dim
            )));
        }
        self.stft.validate()
    }

    /// Model configuration matching the generator's shapes.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            freq_bins: self.stft.freq_bins(),
            latent_dim: self.latent_dim,
            lip_dim: self.lip_dim,
            id_dim: self.id_dim,
            hidden: self.decoder_width,
            regularizer: Regularizer::Wasserstein,
            use_visual: true,
            ..ModelConfig::default()
        }
    }
}

/// Latent autoregression coefficient; the innovation variance keeps the
/// stationary variance at one.
pub const AR_COEF: f64 = 0.9;
/// Standard deviation of the additive noise on lip features.
pub const LIP_NOISE: f64 = 0.1;

/// Amplitude applied to sampled coefficients before resynthesis. A random
/// spectrogram is not the STFT of any signal; the overlap-add inverse keeps
/// only a `hop / fft_size` share of its energy, so scaling by the square root
/// of the overlap factor makes the re-analysed waveform carry the intended
/// per-bin variance.
pub fn synthesis_gain(stft: &StftConfig) -> f64 {
    (stft.fft_size as f64 / stft.hop as f64).sqrt()
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| std * normal(rng)).collect()).expect("shape")
}

/// Draws `N_C(0, var)` coefficients `[F × N]`; DC and Nyquist are real.
pub fn sample_coefficients(var: &Array2<f64>, rng: &mut impl Rng) -> Array2<Complex64> {
    let last = var.nrows() - 1;
    Array2::from_shape_fn(var.dim(), |(f, n)| {
        let v = var[[f, n]];
        if f == 0 || f == last {
            Complex64::new(v.sqrt() * normal(rng), 0.0)
        } else {
            let s = (v / 2.0).sqrt();
            Complex64::new(s * normal(rng), s * normal(rng))
        }
    })
}

fn resynthesize(coeffs: &Array2<Complex64>, stft: &StftConfig) -> Result<Waveform> {
    let gain = synthesis_gain(stft);
    let spec = ComplexSpectrogram::new(coeffs.mapv(|c| c * gain), *stft, SAMPLE_RATE)?;
    istft(&spec)
}

/// A generated utterance with everything the generator knows about it.
#[derive(Debug, Clone)]
pub struct SynthUtterance {
    pub id: String,
    /// `[N × L]`
    pub latent: Array2<f64>,
    /// Lip and identity features, already rounded to single precision.
    pub visual: VisualFeatures,
    /// Ground-truth decoder variance `[F × N]`.
    pub variance: Array2<f64>,
    /// Sampled coefficients `[F × N]` with variance `variance`.
    pub coefficients: Array2<Complex64>,
    pub wave: Waveform,
}

/// Fixed random ground-truth model plus the lip projection.
#[derive(Debug, Clone)]
pub struct SynthGenerator {
    cfg: SynthConfig,
    model: ModelConfig,
    params: WaeParams,
    /// `[L × lip_dim]`: `lip = z · lip_map + noise`.
    lip_map: Array2<f64>,
}

impl SynthGenerator {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let model = cfg.model_config();
        let (l, dl, h, f) = (cfg.latent_dim, cfg.lip_dim, cfg.decoder_width, model.freq_bins);
        let dv = model.visual_dim();
        let mut rng = seed::rng(cfg.seed, &[0]);
        let lip_map = Array2::from_shape_fn((l, dl), |_| normal(&mut rng) / (l as f64).sqrt());

        let mut params = WaeParams::zeros(&model);
        let d = &mut params.decoder;
        d.visual.w = normal_tensor(&mut rng, &[dv, h], 1.0 / (dv as f64).sqrt());
        let mut hidden_w = normal_tensor(&mut rng, &[l + h, h], 0.5 / (h as f64).sqrt());
        {
            let data = hidden_w.data_mut();
            for v in &mut data[..l * h] {
                *v = 1.5 / (l as f64).sqrt() * normal(&mut rng);
            }
        }
        d.hidden.w = hidden_w;
        d.hidden.b = normal_tensor(&mut rng, &[h], 0.1);
        d.out.w = normal_tensor(&mut rng, &[h, f], 2.5 / (h as f64).sqrt());
        d.out.b = Tensor::new(
            vec![f],
            (0..f).map(|i| -1.0 - 2.0 * i as f64 / f as f64).collect(),
        )?;

        Self::set_conditional_prior(&mut params, &model, &lip_map)?;
        let params = params.rounded_to_f32();
        Ok(Self {
            cfg: cfg.clone(),
            model,
            params,
            lip_map,
        })
    }

    /// Writes the exact Gaussian conditional `p(z | lip)` into the prior and
    /// the encoder (whose audio branch is zero). The linear map `B·lip` is
    /// realised through relu units as `relu(B·lip) − relu(−B·lip)`.
    fn set_conditional_prior(
        params: &mut WaeParams,
        model: &ModelConfig,
        lip_map: &Array2<f64>,
    ) -> Result<()> {
        let (l, dl, h) = (model.latent_dim, model.lip_dim, model.hidden);
        let dv = model.visual_dim();
        let a = DMatrix::from_fn(dl, l, |i, j| lip_map[[j, i]]);
        let noise_var = LIP_NOISE * LIP_NOISE;
        let precision = DMatrix::identity(l, l) + a.transpose() * &a / noise_var;
        let cov = precision
            .try_inverse()
            .ok_or_else(|| Error::InvalidConfig("singular lip map".into()))?;
        let b = &cov * a.transpose() / noise_var;
        let std: DVector<f64> = cov.diagonal().map(f64::sqrt);

        let mut vis_w = vec![0.0; dv * h];
        let mut mean_w = vec![0.0; h * l];
        for j in 0..l {
            for i in 0..dl {
                vis_w[i * h + j] = b[(j, i)];
                vis_w[i * h + l + j] = -b[(j, i)];
            }
            mean_w[j * l + j] = 1.0;
            mean_w[(l + j) * l + j] = -1.0;
        }
        let std_b: Vec<f64> = std
            .iter()
            .map(|s| softplus_inv(s - model.latent_floor))
            .collect();

        let p = &mut params.prior;
        p.visual.w = Tensor::new(vec![dv, h], vis_w.clone())?;
        p.mean.w = Tensor::new(vec![h, l], mean_w.clone())?;
        p.std.b = Tensor::new(vec![l], std_b.clone())?;

        let mut enc_mean_w = vec![0.0; 2 * h * l];
        enc_mean_w[h * l..].copy_from_slice(&mean_w);
        let e = &mut params.encoder;
        e.visual.w = Tensor::new(vec![dv, h], vis_w)?;
        e.mean.w = Tensor::new(vec![2 * h, l], enc_mean_w)?;
        e.std.b = Tensor::new(vec![l], std_b)?;
        Ok(())
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    /// Ground-truth parameters, exactly representable in single precision.
    pub fn params(&self) -> &WaeParams {
        &self.params
    }

    pub fn utterance_id(index: usize) -> String {
        format!("utt{index:05}")
    }

    /// Utterance `index`; a pure function of the seed and the index.
    pub fn utterance(&self, index: usize) -> Result<SynthUtterance> {
        let mut rng = seed::rng(self.cfg.seed, &[1, index as u64]);
        let (n, l) = (self.cfg.frames_per_utt, self.cfg.latent_dim);
        let innov = (1.0 - AR_COEF * AR_COEF).sqrt();
        let mut latent = Array2::zeros((n, l));
        for j in 0..l {
            latent[[0, j]] = normal(&mut rng);
        }
        for t in 1..n {
            for j in 0..l {
                latent[[t, j]] = AR_COEF * latent[[t - 1, j]] + innov * normal(&mut rng);
            }
        }
        let mut lip = latent.dot(&self.lip_map);
        lip.mapv_inplace(|v| (v + LIP_NOISE * normal(&mut rng)) as f32 as f64);
        let identity: Vec<f64> = (0..self.cfg.id_dim)
            .map(|_| normal(&mut rng) as f32 as f64)
            .collect();
        let visual = VisualFeatures::new(lip, identity)?;

        let rows = visual.rows(&self.model)?;
        let hv = model::decoder_visual(rows.view(), &self.params, &self.model)?;
        let variance = model::decode_batch(latent.view(), hv.view(), &self.params, &self.model)?
            .reversed_axes();
        let coefficients = sample_coefficients(&variance, &mut rng);
        let wave = resynthesize(&coefficients, &self.cfg.stft)?;
        Ok(SynthUtterance {
            id: Self::utterance_id(index),
            latent,
            visual,
            variance,
            coefficients,
            wave,
        })
    }
}

/// Noise whose spectral variance is an exact rank-`rank` nonnegative
/// factorisation: random log-normal templates with smooth log-normal
/// activations, normalised to unit mean variance.
pub fn nmf_noise(
    stft: &StftConfig,
    frames: usize,
    rank: usize,
    rng: &mut impl Rng,
) -> Result<Waveform> {
    stft.validate()?;
    if frames == 0 || rank == 0 {
        return Err(Error::InvalidArgument(
            "noise needs at least one frame and one component".into(),
        ));
    }
    let f = stft.freq_bins();
    let w = Array2::from_shape_fn((f, rank), |_| normal(rng).exp());
    let mut h = Array2::zeros((rank, frames));
    for k in 0..rank {
        let mut x = normal(rng);
        for n in 0..frames {
            if n > 0 {
                x = 0.95 * x + (1.0 - 0.95f64 * 0.95).sqrt() * normal(rng);
            }
            h[[k, n]] = (0.7 * x).exp();
        }
    }
    let mut beta = w.dot(&h);
    let mean = beta.mean().expect("nonempty");
    beta /= mean;
    let coeffs = sample_coefficients(&beta, rng);
    resynthesize(&coeffs, stft)
}

/// Writes `wav/`, `lip/`, `ident/` and `manifest.json` under `out_dir`, all
/// records tagged `train`.
pub fn synth_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out = out_dir.as_ref();
    let generator = SynthGenerator::new(cfg)?;
    for sub in ["wav", "lip", "ident"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir, e))?;
    }
    let records = (0..cfg.n_utts)
        .into_par_iter()
        .map(|i| {
            let u = generator.utterance(i)?;
            let rec = UtteranceRecord {
                id: u.id.clone(),
                wav: PathBuf::from(format!("wav/{}.wav", u.id)),
                lip: PathBuf::from(format!("lip/{}.uvft", u.id)),
                ident: PathBuf::from(format!("ident/{}.uvft", u.id)),
                split: "train".into(),
            };
            write_wav(&u.wave, out.join(&rec.wav))?;
            write_uvft(&FeatureFile::from_f64(&u.visual.lip)?, out.join(&rec.lip))?;
            let ident = Array2::from_shape_vec((1, cfg.id_dim), u.visual.identity.clone())
                .expect("identity length");
            write_uvft(&FeatureFile::from_f64(&ident)?, out.join(&rec.ident))?;
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(records, out)?;
    manifest.save(out.join("manifest.json"))?;
    Ok(manifest)
}

/// Mean of `|x|²` over frames for each row of a `[F × N]` coefficient matrix.
pub fn mean_power_per_bin(coeffs: &Array2<Complex64>) -> Vec<f64> {
    coeffs
        .map(|c| c.norm_sqr())
        .mean_axis(Axis(1))
        .expect("nonempty")
        .to_vec()
}
