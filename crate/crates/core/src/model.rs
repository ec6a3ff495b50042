//! The audio-visual Wasserstein autoencoder.
//!
//! Three small networks share one parameter set:
//!
//! * the **encoder** maps a log-compressed power frame (through a tanh
//!   branch) and the visual frame (through a relu branch) to a diagonal
//!   Gaussian posterior over the latent `z`;
//! * the **prior** maps the visual frame alone to a diagonal Gaussian, or is
//!   the standard normal when visual conditioning is disabled;
//! * the **decoder** maps `z` together with its own visual branch to a
//!   positive per-bin variance of a zero-mean complex Gaussian over the STFT
//!   coefficients.
//!
//! Training minimises the per-frame Itakura–Saito negative log-likelihood
//! plus `lambda` times either the closed-form squared 2-Wasserstein distance
//! or the KL divergence between posterior and prior.
//!
//! Two forward paths exist. [`loss_graph`] records everything on an
//! [`autodiff::Graph`](crate::autodiff::Graph) for training; the batched
//! `ndarray` functions ([`encode_batch`], [`prior_batch`], [`decode_batch`])
//! are used at inference time where no gradients are needed.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Floor inside the log compression of encoder input power.
pub const LOG_POWER_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    #[default]
    Wasserstein,
    Kl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub freq_bins: usize,
    pub latent_dim: usize,
    pub lip_dim: usize,
    pub id_dim: usize,
    pub hidden: usize,
    pub lambda: f64,
    pub regularizer: Regularizer,
    pub use_visual: bool,
    /// Floor added to every spectral variance.
    pub variance_floor: f64,
    /// Floor added to every latent standard deviation.
    pub latent_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            freq_bins: 513,
            latent_dim: 32,
            lip_dim: 768,
            id_dim: 128,
            hidden: 512,
            lambda: 0.1,
            regularizer: Regularizer::Wasserstein,
            use_visual: true,
            variance_floor: 1e-8,
            latent_floor: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("freq_bins", self.freq_bins),
            ("latent_dim", self.latent_dim),
            ("lip_dim", self.lip_dim),
            ("id_dim", self.id_dim),
            ("hidden", self.hidden),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be a finite nonnegative number, got {}",
                self.lambda
            )));
        }
        for (name, v) in [
            ("variance_floor", self.variance_floor),
            ("latent_floor", self.latent_floor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn visual_dim(&self) -> usize {
        self.lip_dim + self.id_dim
    }
}

/// Visual input for a single STFT frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFrame {
    pub lip: Vec<f64>,
    pub identity: Vec<f64>,
}

impl VisualFrame {
    pub fn concat(&self) -> Vec<f64> {
        let mut v = self.lip.clone();
        v.extend_from_slice(&self.identity);
        v
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.lip.len() != cfg.lip_dim {
            return Err(Error::DimMismatch {
                what: "lip feature",
                expected: cfg.lip_dim,
                got: self.lip.len(),
            });
        }
        if self.identity.len() != cfg.id_dim {
            return Err(Error::DimMismatch {
                what: "identity feature",
                expected: cfg.id_dim,
                got: self.identity.len(),
            });
        }
        if self.lip.iter().chain(&self.identity).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("visual frame".into()));
        }
        Ok(())
    }
}

/// Per-utterance visual stream: lip features per frame plus one identity
/// vector taken from the first video frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    /// `[frames × lip_dim]`
    pub lip: Array2<f64>,
    /// `[id_dim]`
    pub identity: Vec<f64>,
}

impl VisualFeatures {
    pub fn new(lip: Array2<f64>, identity: Vec<f64>) -> Result<Self> {
        if lip.nrows() == 0 || lip.ncols() == 0 || identity.is_empty() {
            return Err(Error::InvalidArgument("empty visual features".into()));
        }
        if lip.iter().chain(&identity).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("visual features".into()));
        }
        Ok(Self { lip, identity })
    }

    pub fn frames(&self) -> usize {
        self.lip.nrows()
    }

    pub fn frame(&self, n: usize) -> VisualFrame {
        VisualFrame {
            lip: self.lip.row(n).to_vec(),
            identity: self.identity.clone(),
        }
    }

    /// Resamples the lip stream to `n` frames by linear interpolation in time.
    pub fn aligned(&self, n: usize) -> VisualFeatures {
        let m = self.frames();
        if m == n || n == 0 {
            return self.clone();
        }
        let d = self.lip.ncols();
        let mut lip = Array2::zeros((n, d));
        for i in 0..n {
            let pos = if n == 1 {
                0.0
            } else {
                i as f64 * (m - 1) as f64 / (n - 1) as f64
            };
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(m - 1);
            let frac = pos - lo as f64;
            for j in 0..d {
                lip[[i, j]] = (1.0 - frac) * self.lip[[lo, j]] + frac * self.lip[[hi, j]];
            }
        }
        VisualFeatures {
            lip,
            identity: self.identity.clone(),
        }
    }

    /// `[frames × (lip_dim + id_dim)]` network input.
    pub fn rows(&self, cfg: &ModelConfig) -> Result<Array2<f64>> {
        if self.lip.ncols() != cfg.lip_dim {
            return Err(Error::DimMismatch {
                what: "lip feature",
                expected: cfg.lip_dim,
                got: self.lip.ncols(),
            });
        }
        if self.identity.len() != cfg.id_dim {
            return Err(Error::DimMismatch {
                what: "identity feature",
                expected: cfg.id_dim,
                got: self.identity.len(),
            });
        }
        let n = self.frames();
        let mut out = Array2::zeros((n, cfg.visual_dim()));
        for i in 0..n {
            for j in 0..cfg.lip_dim {
                out[[i, j]] = self.lip[[i, j]];
            }
            for (j, &v) in self.identity.iter().enumerate() {
                out[[i, cfg.lip_dim + j]] = v;
            }
        }
        Ok(out)
    }
}

/// Diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentGaussian {
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Weight matrix `[in × out]` and bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub w: T,
    pub b: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub audio: Layer<T>,
    pub visual: Layer<T>,
    pub mean: Layer<T>,
    pub std: Layer<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prior<T> {
    pub visual: Layer<T>,
    pub mean: Layer<T>,
    pub std: Layer<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    pub visual: Layer<T>,
    pub hidden: Layer<T>,
    pub out: Layer<T>,
}

/// Encoder, prior and decoder parameters, generic over the leaf type so the
/// same layout holds tensors, graph nodes or optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Wae<T> {
    pub encoder: Encoder<T>,
    pub prior: Prior<T>,
    pub decoder: Decoder<T>,
}

pub type WaeParams = Wae<Tensor>;

/// Names of every leaf in storage order.
pub const PARAM_NAMES: [&str; 20] = [
    "encoder.audio.w",
    "encoder.audio.b",
    "encoder.visual.w",
    "encoder.visual.b",
    "encoder.mean.w",
    "encoder.mean.b",
    "encoder.std.w",
    "encoder.std.b",
    "prior.visual.w",
    "prior.visual.b",
    "prior.mean.w",
    "prior.mean.b",
    "prior.std.w",
    "prior.std.b",
    "decoder.visual.w",
    "decoder.visual.b",
    "decoder.hidden.w",
    "decoder.hidden.b",
    "decoder.out.w",
    "decoder.out.b",
];

impl<T> Wae<T> {
    /// Leaves in [`PARAM_NAMES`] order.
    pub fn leaves(&self) -> Vec<&T> {
        let e = &self.encoder;
        let p = &self.prior;
        let d = &self.decoder;
        vec![
            &e.audio.w, &e.audio.b, &e.visual.w, &e.visual.b, &e.mean.w, &e.mean.b, &e.std.w,
            &e.std.b, &p.visual.w, &p.visual.b, &p.mean.w, &p.mean.b, &p.std.w, &p.std.b,
            &d.visual.w, &d.visual.b, &d.hidden.w, &d.hidden.b, &d.out.w, &d.out.b,
        ]
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let e = &mut self.encoder;
        let p = &mut self.prior;
        let d = &mut self.decoder;
        vec![
            &mut e.audio.w,
            &mut e.audio.b,
            &mut e.visual.w,
            &mut e.visual.b,
            &mut e.mean.w,
            &mut e.mean.b,
            &mut e.std.w,
            &mut e.std.b,
            &mut p.visual.w,
            &mut p.visual.b,
            &mut p.mean.w,
            &mut p.mean.b,
            &mut p.std.w,
            &mut p.std.b,
            &mut d.visual.w,
            &mut d.visual.b,
            &mut d.hidden.w,
            &mut d.hidden.b,
            &mut d.out.w,
            &mut d.out.b,
        ]
    }

    /// Rebuilds the layout from leaves in [`PARAM_NAMES`] order.
    pub fn from_leaves(leaves: Vec<T>) -> Result<Self> {
        if leaves.len() != PARAM_NAMES.len() {
            return Err(Error::DimMismatch {
                what: "parameter leaves",
                expected: PARAM_NAMES.len(),
                got: leaves.len(),
            });
        }
        let mut it = leaves.into_iter();
        let mut layer = || Layer {
            w: it.next().unwrap(),
            b: it.next().unwrap(),
        };
        let encoder = Encoder {
            audio: layer(),
            visual: layer(),
            mean: layer(),
            std: layer(),
        };
        let prior = Prior {
            visual: layer(),
            mean: layer(),
            std: layer(),
        };
        let decoder = Decoder {
            visual: layer(),
            hidden: layer(),
            out: layer(),
        };
        Ok(Wae {
            encoder,
            prior,
            decoder,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Wae<U> {
        Wae::from_leaves(self.leaves().into_iter().map(&mut f).collect())
            .expect("same layout")
    }
}

impl WaeParams {
    /// Expected `(name, shape)` of every leaf for `cfg`.
    pub fn layout(cfg: &ModelConfig) -> Vec<(&'static str, Vec<usize>)> {
        let (f, l, h, v) = (cfg.freq_bins, cfg.latent_dim, cfg.hidden, cfg.visual_dim());
        let shapes: [(usize, usize); 10] = [
            (f, h),
            (v, h),
            (2 * h, l),
            (2 * h, l),
            (v, h),
            (h, l),
            (h, l),
            (v, h),
            (l + h, h),
            (h, f),
        ];
        shapes
            .iter()
            .flat_map(|&(i, o)| [vec![i, o], vec![o]])
            .zip(PARAM_NAMES)
            .map(|(s, n)| (n, s))
            .collect()
    }

    /// Glorot-uniform weights and zero biases.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let leaves = Self::layout(cfg)
            .into_iter()
            .map(|(_, shape)| {
                if shape.len() == 2 {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let data = (0..shape[0] * shape[1])
                        .map(|_| rng.random_range(-bound..bound))
                        .collect();
                    Tensor::new(shape, data)
                } else {
                    Ok(Tensor::zeros(&shape))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_leaves(leaves)
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let leaves = Self::layout(cfg)
            .into_iter()
            .map(|(_, s)| Tensor::zeros(&s))
            .collect();
        Self::from_leaves(leaves).expect("layout has every leaf")
    }

    /// Every entry rounded through `f32`, the precision checkpoints store.
    pub fn rounded_to_f32(&self) -> Self {
        self.map(|t| {
            let mut t = t.clone();
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
            t
        })
    }

    pub fn param_count(&self) -> usize {
        self.leaves().iter().map(|t| t.len()).sum()
    }

    /// Checks every leaf against [`WaeParams::layout`].
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        for ((name, shape), t) in Self::layout(cfg).into_iter().zip(self.leaves()) {
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: name,
                    left: shape,
                    right: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

fn view(t: &Tensor) -> ArrayView2<'_, f64> {
    let (r, c) = t.matrix_dims().expect("matrix");
    ArrayView2::from_shape((r, c), t.data()).expect("consistent")
}

fn affine_rows(x: ArrayView2<'_, f64>, layer: &Layer<Tensor>) -> Array2<f64> {
    let mut y = x.dot(&view(&layer.w));
    let b = Array1::from(layer.b.data().to_vec());
    y += &b;
    y
}

fn softplus_floor(x: Array2<f64>, floor: f64) -> Array2<f64> {
    x.mapv(|v| softplus(v) + floor)
}

fn check_rows(what: &'static str, a: &ArrayView2<'_, f64>, cols: usize) -> Result<()> {
    if a.ncols() != cols {
        return Err(Error::DimMismatch {
            what,
            expected: cols,
            got: a.ncols(),
        });
    }
    Ok(())
}

/// Encoder posterior for a batch: `power` is `[B × F]`, `vis` is
/// `[B × (lip_dim + id_dim)]`. Returns `(mean, std)`, each `[B × L]`.
pub fn encode_batch(
    power: ArrayView2<'_, f64>,
    vis: ArrayView2<'_, f64>,
    params: &WaeParams,
    cfg: &ModelConfig,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_rows("power frame", &power, cfg.freq_bins)?;
    check_rows("visual frame", &vis, cfg.visual_dim())?;
    if power.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::InvalidArgument(
            "power must be finite and nonnegative".into(),
        ));
    }
    let e = &params.encoder;
    let log_power = power.mapv(|p| (p + LOG_POWER_FLOOR).ln());
    let ha = affine_rows(log_power.view(), &e.audio).mapv(f64::tanh);
    let hv = if cfg.use_visual {
        affine_rows(vis, &e.visual).mapv(|v| v.max(0.0))
    } else {
        Array2::zeros((power.nrows(), cfg.hidden))
    };
    let h = ndarray::concatenate(Axis(1), &[ha.view(), hv.view()]).expect("same rows");
    let mean = affine_rows(h.view(), &e.mean);
    let std = softplus_floor(affine_rows(h.view(), &e.std), cfg.latent_floor);
    Ok((mean, std))
}

/// Visually conditioned prior for a batch, or the standard normal when
/// `use_visual` is off.
pub fn prior_batch(
    vis: ArrayView2<'_, f64>,
    params: &WaeParams,
    cfg: &ModelConfig,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_rows("visual frame", &vis, cfg.visual_dim())?;
    let b = vis.nrows();
    if !cfg.use_visual {
        return Ok((
            Array2::zeros((b, cfg.latent_dim)),
            Array2::ones((b, cfg.latent_dim)),
        ));
    }
    let p = &params.prior;
    let h = affine_rows(vis, &p.visual).mapv(|v| v.max(0.0));
    let mean = affine_rows(h.view(), &p.mean);
    let std = softplus_floor(affine_rows(h.view(), &p.std), cfg.latent_floor);
    Ok((mean, std))
}

/// Output of the decoder's visual branch, `[B × hidden]`. It does not depend
/// on `z`, so samplers compute it once per utterance.
pub fn decoder_visual(
    vis: ArrayView2<'_, f64>,
    params: &WaeParams,
    cfg: &ModelConfig,
) -> Result<Array2<f64>> {
    check_rows("visual frame", &vis, cfg.visual_dim())?;
    if !cfg.use_visual {
        return Ok(Array2::zeros((vis.nrows(), cfg.hidden)));
    }
    Ok(affine_rows(vis, &params.decoder.visual).mapv(|v| v.max(0.0)))
}

/// Spectral variance `[B × F]` from latents `[B × L]` and the decoder visual
/// branch output `[B × hidden]`.
pub fn decode_batch(
    z: ArrayView2<'_, f64>,
    visual_hidden: ArrayView2<'_, f64>,
    params: &WaeParams,
    cfg: &ModelConfig,
) -> Result<Array2<f64>> {
    check_rows("latent", &z, cfg.latent_dim)?;
    check_rows("decoder visual branch", &visual_hidden, cfg.hidden)?;
    let d = &params.decoder;
    let input = ndarray::concatenate(Axis(1), &[z, visual_hidden]).map_err(|_| {
        Error::DimMismatch {
            what: "decoder batch rows",
            expected: z.nrows(),
            got: visual_hidden.nrows(),
        }
    })?;
    let h = affine_rows(input.view(), &d.hidden).mapv(f64::tanh);
    Ok(softplus_floor(affine_rows(h.view(), &d.out), cfg.variance_floor))
}

fn row(v: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, v.len()), v).expect("row")
}

/// Encoder posterior for one frame.
pub fn encode(
    power_frame: &[f64],
    vis: &VisualFrame,
    params: &WaeParams,
    cfg: &ModelConfig,
) -> Result<LatentGaussian> {
    vis.check(cfg)?;
    let v = vis.concat();
    let (m, s) = encode_batch(row(power_frame), row(&v), params, cfg)?;
    Ok(LatentGaussian {
        mean: m.row(0).to_vec(),
        std: s.row(0).to_vec(),
    })
}

/// Visually conditioned prior for one frame.
pub fn prior(vis: &VisualFrame, params: &WaeParams, cfg: &ModelConfig) -> Result<LatentGaussian> {
    vis.check(cfg)?;
    let v = vis.concat();
    let (m, s) = prior_batch(row(&v), params, cfg)?;
    Ok(LatentGaussian {
        mean: m.row(0).to_vec(),
        std: s.row(0).to_vec(),
    })
}

/// Spectral variance for one frame.
pub fn decode(
    z: &[f64],
    vis: &VisualFrame,
    params: &WaeParams,
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    vis.check(cfg)?;
    let v = vis.concat();
    let hv = decoder_visual(row(&v), params, cfg)?;
    Ok(decode_batch(row(z), hv.view(), params, cfg)?.row(0).to_vec())
}

/// `z = mean + std ⊙ eps`.
pub fn reparameterize(g: &LatentGaussian, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != g.dim() {
        return Err(Error::DimMismatch {
            what: "reparameterization noise",
            expected: g.dim(),
            got: eps.len(),
        });
    }
    Ok(g.mean
        .iter()
        .zip(&g.std)
        .zip(eps)
        .map(|((m, s), e)| m + s * e)
        .collect())
}

/// Complex-Gaussian negative log-likelihood of a power frame, without the
/// constant `F·ln π`.
pub fn is_nll(power: &[f64], variance: &[f64]) -> Result<f64> {
    if power.len() != variance.len() {
        return Err(Error::DimMismatch {
            what: "variance",
            expected: power.len(),
            got: variance.len(),
        });
    }
    if let Some(v) = variance.iter().find(|v| v.is_nan() || **v <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "variance must be positive, got {v}"
        )));
    }
    if power.iter().any(|&p| p < 0.0) {
        return Err(Error::InvalidArgument("power must be nonnegative".into()));
    }
    Ok(power
        .iter()
        .zip(variance)
        .map(|(p, v)| p / v + v.ln())
        .sum())
}

fn check_pair(q: &LatentGaussian, p: &LatentGaussian) -> Result<()> {
    if q.dim() != p.dim() || q.std.len() != q.dim() || p.std.len() != p.dim() {
        return Err(Error::DimMismatch {
            what: "latent gaussian",
            expected: q.dim(),
            got: p.dim(),
        });
    }
    Ok(())
}

/// Per-dimension squared 2-Wasserstein distance between diagonal Gaussians.
pub fn w2_per_dim(q: &LatentGaussian, p: &LatentGaussian) -> Result<Vec<f64>> {
    check_pair(q, p)?;
    Ok((0..q.dim())
        .map(|i| (q.mean[i] - p.mean[i]).powi(2) + (q.std[i] - p.std[i]).powi(2))
        .collect())
}

/// Squared 2-Wasserstein distance between diagonal Gaussians.
pub fn w2_diag_gauss(q: &LatentGaussian, p: &LatentGaussian) -> Result<f64> {
    Ok(w2_per_dim(q, p)?.iter().sum())
}

/// Per-dimension `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_per_dim(q: &LatentGaussian, p: &LatentGaussian) -> Result<Vec<f64>> {
    check_pair(q, p)?;
    Ok((0..q.dim())
        .map(|i| {
            let (mq, sq, mp, sp) = (q.mean[i], q.std[i], p.mean[i], p.std[i]);
            (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5
        })
        .collect())
}

pub fn kl_diag_gauss(q: &LatentGaussian, p: &LatentGaussian) -> Result<f64> {
    Ok(kl_per_dim(q, p)?.iter().sum())
}

/// Regularizer of the given kind, per latent dimension.
pub fn regularizer_per_dim(
    q: &LatentGaussian,
    p: &LatentGaussian,
    kind: Regularizer,
) -> Result<Vec<f64>> {
    match kind {
        Regularizer::Wasserstein => w2_per_dim(q, p),
        Regularizer::Kl => kl_per_dim(q, p),
    }
}

/// One training example: a clean power frame and its visual frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameExample {
    pub power: Vec<f64>,
    pub visual: VisualFrame,
}

/// A batch in matrix form, `[B × F]` power and `[B × Dv]` visual rows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub power: Array2<f64>,
    pub visual: Array2<f64>,
}

impl Batch {
    pub fn from_examples(examples: &[FrameExample], cfg: &ModelConfig) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let b = examples.len();
        let mut power = Array2::zeros((b, cfg.freq_bins));
        let mut visual = Array2::zeros((b, cfg.visual_dim()));
        for (i, ex) in examples.iter().enumerate() {
            if ex.power.len() != cfg.freq_bins {
                return Err(Error::DimMismatch {
                    what: "power frame",
                    expected: cfg.freq_bins,
                    got: ex.power.len(),
                });
            }
            ex.visual.check(cfg)?;
            power.row_mut(i).assign(&Array1::from(ex.power.clone()));
            visual.row_mut(i).assign(&Array1::from(ex.visual.concat()));
        }
        Ok(Self { power, visual })
    }

    pub fn len(&self) -> usize {
        self.power.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.power.nrows() == 0
    }

    /// Rows `range` of this batch.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Batch {
        Batch {
            power: self.power.slice(ndarray::s![range.clone(), ..]).to_owned(),
            visual: self.visual.slice(ndarray::s![range, ..]).to_owned(),
        }
    }
}

fn matrix_tensor(a: &Array2<f64>) -> Tensor {
    Tensor::new(vec![a.nrows(), a.ncols()], a.iter().copied().collect()).expect("non-empty")
}

fn graph_layer(g: &mut Graph, x: NodeId, l: &Layer<NodeId>) -> Result<NodeId> {
    g.affine(x, l.w, l.b)
}

/// Records the summed (not averaged) training objective of `batch` on `g`
/// and returns the scalar node `Σ_frames [nll + λ·reg] · scale`.
///
/// `eps` is `[B × L]`, one standard-normal draw per frame.
pub fn loss_graph(
    g: &mut Graph,
    ids: &Wae<NodeId>,
    batch: &Batch,
    eps: &Array2<f64>,
    cfg: &ModelConfig,
    scale: f64,
) -> Result<NodeId> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    if eps.dim() != (b, cfg.latent_dim) {
        return Err(Error::ShapeMismatch {
            op: "reparameterization noise",
            left: vec![b, cfg.latent_dim],
            right: vec![eps.nrows(), eps.ncols()],
        });
    }
    check_rows("power frame", &batch.power.view(), cfg.freq_bins)?;
    check_rows("visual frame", &batch.visual.view(), cfg.visual_dim())?;
    if batch.power.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::InvalidArgument(
            "power must be finite and nonnegative".into(),
        ));
    }
    let power = g.input(matrix_tensor(&batch.power));
    let log_power = g.input(matrix_tensor(
        &batch.power.mapv(|p| (p + LOG_POWER_FLOOR).ln()),
    ));
    let vis = g.input(matrix_tensor(&batch.visual));
    let eps = g.input(matrix_tensor(eps));
    let zeros_h = || Tensor::zeros(&[b, cfg.hidden]);

    // encoder
    let e = &ids.encoder;
    let ha = graph_layer(g, log_power, &e.audio)?;
    let ha = g.tanh(ha)?;
    let hv = if cfg.use_visual {
        let hv = graph_layer(g, vis, &e.visual)?;
        g.relu(hv)?
    } else {
        g.input(zeros_h())
    };
    let h = g.concat(ha, hv)?;
    let mu = graph_layer(g, h, &e.mean)?;
    let sd = graph_layer(g, h, &e.std)?;
    let sd = g.softplus(sd)?;
    let sd = g.add_scalar(sd, cfg.latent_floor)?;

    // prior
    let (mu_p, sd_p) = if cfg.use_visual {
        let p = &ids.prior;
        let hp = graph_layer(g, vis, &p.visual)?;
        let hp = g.relu(hp)?;
        let m = graph_layer(g, hp, &p.mean)?;
        let s = graph_layer(g, hp, &p.std)?;
        let s = g.softplus(s)?;
        (m, g.add_scalar(s, cfg.latent_floor)?)
    } else {
        (
            g.input(Tensor::zeros(&[b, cfg.latent_dim])),
            g.input(Tensor::filled(&[b, cfg.latent_dim], 1.0)),
        )
    };

    // reparameterized sample and decoder
    let noise = g.mul(sd, eps)?;
    let z = g.add(mu, noise)?;
    let d = &ids.decoder;
    let hvd = if cfg.use_visual {
        let hvd = graph_layer(g, vis, &d.visual)?;
        g.relu(hvd)?
    } else {
        g.input(zeros_h())
    };
    let zin = g.concat(z, hvd)?;
    let hd = graph_layer(g, zin, &d.hidden)?;
    let hd = g.tanh(hd)?;
    let var = graph_layer(g, hd, &d.out)?;
    let var = g.softplus(var)?;
    let var = g.add_scalar(var, cfg.variance_floor)?;

    let ratio = g.div(power, var)?;
    let log_var = g.log(var)?;
    let nll = g.add(ratio, log_var)?;
    let nll = g.sum(nll)?;

    let reg = match cfg.regularizer {
        Regularizer::Wasserstein => {
            let dm = g.sub(mu, mu_p)?;
            let dm = g.square(dm)?;
            let ds = g.sub(sd, sd_p)?;
            let ds = g.square(ds)?;
            let r = g.add(dm, ds)?;
            g.sum(r)?
        }
        Regularizer::Kl => {
            let log_sp = g.log(sd_p)?;
            let log_sq = g.log(sd)?;
            let log_ratio = g.sub(log_sp, log_sq)?;
            let vq = g.square(sd)?;
            let dm = g.sub(mu, mu_p)?;
            let dm2 = g.square(dm)?;
            let num = g.add(vq, dm2)?;
            let vp = g.square(sd_p)?;
            let vp2 = g.scale(vp, 2.0)?;
            let frac = g.div(num, vp2)?;
            let r = g.add(log_ratio, frac)?;
            let r = g.add_scalar(r, -0.5)?;
            g.sum(r)?
        }
    };
    let reg = g.scale(reg, cfg.lambda)?;
    let total = g.add(nll, reg)?;
    g.scale(total, scale)
}

/// Mean per-frame objective of `batch` under `params`.
pub fn loss(batch: &Batch, params: &WaeParams, cfg: &ModelConfig, eps: &Array2<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let ids = params.map(|t| g.param(t.clone()));
    let l = loss_graph(&mut g, &ids, batch, eps, cfg, 1.0 / batch.len().max(1) as f64)?;
    Ok(g.scalar(l))
}

/// Objective and its gradient with respect to every parameter. `scale`
/// multiplies the summed per-frame objective.
pub fn loss_and_grad(
    batch: &Batch,
    params: &WaeParams,
    cfg: &ModelConfig,
    eps: &Array2<f64>,
    scale: f64,
) -> Result<(f64, WaeParams)> {
    let mut g = Graph::new();
    let ids = params.map(|t| g.param(t.clone()));
    let l = loss_graph(&mut g, &ids, batch, eps, cfg, scale)?;
    let grads = g.backward(l)?;
    Ok((g.scalar(l), ids.map(|&id| grads.get(id))))
}

/// Mean objective with the posterior mean in place of a sample (`eps = 0`).
pub fn deterministic_loss(batch: &Batch, params: &WaeParams, cfg: &ModelConfig) -> Result<f64> {
    loss(batch, params, cfg, &Array2::zeros((batch.len(), cfg.latent_dim)))
}
