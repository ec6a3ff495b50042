//! Monte Carlo EM inference for enhancement and separation.
//!
//! The mixture STFT is modelled as `x = Σ_k √g_k · s_k + b`, where each
//! speaker image `s_k` is zero-mean complex Gaussian with the decoder
//! variance of its latent chain, and the noise `b` has an NMF-structured
//! variance `W·H`. The E-step runs a random-walk Metropolis–Hastings chain
//! per speaker and frame; the M-step refits the NMF factors and the per-frame
//! gains with multiplicative updates; a Wiener filter averaged over retained
//! samples recovers each speaker.
//!
//! Internally every spectral matrix is stored frame-major, `[N × F]`.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::{istft, power_spectrum, stft, ComplexSpectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, VisualFeatures, WaeParams};
use crate::seed;
use crate::training::Checkpoint;

/// Lower bound on gains and NMF entries.
pub const POSITIVE_FLOOR: f64 = 1e-10;

/// Frames per parallel decoding chunk.
const DECODE_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McemConfig {
    pub n_iters: usize,
    pub mh_steps: usize,
    pub burn_in: usize,
    pub proposal_std: f64,
    pub nmf_rank: usize,
    pub seed: u64,
}

impl Default for McemConfig {
    fn default() -> Self {
        Self {
            n_iters: 50,
            mh_steps: 40,
            burn_in: 30,
            proposal_std: 0.01,
            nmf_rank: 10,
            seed: 0,
        }
    }
}

impl McemConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_iters == 0 {
            return bad("n_iters must be at least 1".into());
        }
        if self.burn_in >= self.mh_steps {
            return bad(format!(
                "burn_in ({}) must be smaller than mh_steps ({})",
                self.burn_in, self.mh_steps
            ));
        }
        if !(self.proposal_std > 0.0 && self.proposal_std.is_finite()) {
            return bad(format!("proposal_std must be positive, got {}", self.proposal_std));
        }
        if self.nmf_rank == 0 {
            return bad("nmf_rank must be at least 1".into());
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        self.mh_steps - self.burn_in
    }
}

/// Noise variance `β = W·H` with `W: [F × K]` and `H: [K × N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseNmf {
    pub w: Array2<f64>,
    pub h: Array2<f64>,
}

impl NoiseNmf {
    /// `β` in `[F × N]` layout.
    pub fn variance(&self) -> Array2<f64> {
        self.w.dot(&self.h)
    }

    /// `β` in `[N × F]` layout.
    fn variance_nf(&self) -> Array2<f64> {
        self.h.t().dot(&self.w.t())
    }

    pub fn min_entry(&self) -> f64 {
        self.w.iter().chain(self.h.iter()).copied().fold(f64::INFINITY, f64::min)
    }
}

/// Latent chain and bookkeeping for one visually identified speaker.
#[derive(Debug, Clone)]
pub struct SpeakerChain {
    /// Position of this speaker in the caller's feature list.
    pub index: usize,
    pub digest: [u8; 32],
    /// Decoder visual-branch output `[N × hidden]`.
    visual_hidden: Array2<f64>,
    /// Prior mean and standard deviation `[N × L]`.
    pub prior_mean: Array2<f64>,
    pub prior_std: Array2<f64>,
    /// Current latent state `[N × L]`.
    pub z: Array2<f64>,
    /// Decoder variance of `z`, `[N × F]`.
    pub variance: Array2<f64>,
    /// Per-frame gains `[N]`.
    pub gains: Vec<f64>,
    /// Latents retained during the last E-step.
    pub retained_z: Vec<Array2<f64>>,
    /// Decoder variances `[N × F]` retained during the last E-step.
    pub retained_variance: Vec<Array2<f64>>,
}

impl SpeakerChain {
    /// Mean of the retained decoder variances, `[N × F]`.
    pub fn mean_variance(&self) -> Result<Array2<f64>> {
        let first = self.retained_variance.first().ok_or(Error::NoRetainedSamples)?;
        let mut acc = Array2::zeros(first.dim());
        for v in &self.retained_variance {
            acc += v;
        }
        Ok(acc / self.retained_variance.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct McemState {
    pub cfg: McemConfig,
    pub mixture: ComplexSpectrogram,
    /// `|x|²` in `[N × F]` layout.
    pub power: Array2<f64>,
    /// Speakers in caller order.
    pub speakers: Vec<SpeakerChain>,
    pub noise: NoiseNmf,
    pub accepted: u64,
    pub proposed: u64,
    /// Number of completed E-steps.
    pub e_steps: u64,
}

impl McemState {
    pub fn frames(&self) -> usize {
        self.power.nrows()
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    /// Speaker indices sorted by feature digest, so the sampling schedule
    /// does not depend on the order speakers were passed in.
    fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.speakers.len()).collect();
        order.sort_by(|&a, &b| {
            self.speakers[a]
                .digest
                .cmp(&self.speakers[b].digest)
                .then(a.cmp(&b))
        });
        order
    }

    fn rank_of(&self, k: usize) -> u64 {
        self.canonical_order().iter().position(|&i| i == k).unwrap() as u64
    }
}

fn feature_digest(rows: &Array2<f64>) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((rows.nrows() as u64).to_le_bytes());
    h.update((rows.ncols() as u64).to_le_bytes());
    for v in rows.iter() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

fn digest_key(d: &[u8; 32]) -> u64 {
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Decoder variance `[N × F]` for latents `[N × L]`, decoded in parallel
/// frame chunks.
fn decode_rows(
    z: ArrayView2<'_, f64>,
    visual_hidden: ArrayView2<'_, f64>,
    params: &WaeParams,
    cfg: &ModelConfig,
) -> Result<Array2<f64>> {
    let n = z.nrows();
    let parts = (0..n.div_ceil(DECODE_CHUNK))
        .into_par_iter()
        .map(|c| {
            let r = c * DECODE_CHUNK..((c + 1) * DECODE_CHUNK).min(n);
            model::decode_batch(
                z.slice(s![r.clone(), ..]),
                visual_hidden.slice(s![r, ..]),
                params,
                cfg,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
}

/// Builds the initial state: latents at the encoder posterior mean of the
/// mixture power, unit gains, and a seeded NMF scaled to half the mixture
/// power.
pub fn init_mcem(
    mixture: &ComplexSpectrogram,
    feats: &[VisualFeatures],
    ckpt: &Checkpoint,
    cfg: &McemConfig,
) -> Result<McemState> {
    cfg.validate()?;
    let mcfg = &ckpt.model;
    if feats.is_empty() {
        return Err(Error::InvalidArgument("at least one speaker's visual features are required".into()));
    }
    if mixture.freq_bins() != mcfg.freq_bins {
        return Err(Error::DimMismatch {
            what: "mixture frequency bins",
            expected: mcfg.freq_bins,
            got: mixture.freq_bins(),
        });
    }
    let n = mixture.frames();
    if n == 0 {
        return Err(Error::InvalidArgument("mixture has no frames".into()));
    }
    let power = power_spectrum(mixture).power.reversed_axes().as_standard_layout().to_owned();

    let speakers = feats
        .iter()
        .enumerate()
        .map(|(k, f)| {
            if f.frames() < n {
                return Err(Error::DimMismatch {
                    what: "visual feature frames",
                    expected: n,
                    got: f.frames(),
                });
            }
            let truncated = VisualFeatures::new(f.lip.slice(s![..n, ..]).to_owned(), f.identity.clone())?;
            let rows = truncated.rows(mcfg)?;
            let (z, _) = model::encode_batch(power.view(), rows.view(), &ckpt.params, mcfg)?;
            let (prior_mean, prior_std) = model::prior_batch(rows.view(), &ckpt.params, mcfg)?;
            let visual_hidden = model::decoder_visual(rows.view(), &ckpt.params, mcfg)?;
            let variance = decode_rows(z.view(), visual_hidden.view(), &ckpt.params, mcfg)?;
            Ok(SpeakerChain {
                index: k,
                digest: feature_digest(&rows),
                visual_hidden,
                prior_mean,
                prior_std,
                z,
                variance,
                gains: vec![1.0; n],
                retained_z: Vec::new(),
                retained_variance: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let f = mcfg.freq_bins;
    let mut rng = seed::rng(cfg.seed, &[0x4e4d46]);
    let mut w = Array2::from_shape_fn((f, cfg.nmf_rank), |_| rng.random_range(0.1..1.0));
    let mut h = Array2::from_shape_fn((cfg.nmf_rank, n), |_| rng.random_range(0.1..1.0));
    let target = (power.mean().unwrap_or(0.0) / 2.0).max(POSITIVE_FLOOR);
    let c = (target / w.dot(&h).mean().expect("nonempty")).sqrt();
    w.mapv_inplace(|v| (v * c).max(POSITIVE_FLOOR));
    h.mapv_inplace(|v| (v * c).max(POSITIVE_FLOOR));

    Ok(McemState {
        cfg: cfg.clone(),
        mixture: mixture.clone(),
        power,
        speakers,
        noise: NoiseNmf { w, h },
        accepted: 0,
        proposed: 0,
        e_steps: 0,
    })
}

/// `Σ_k g_k·v_k + β` in `[N × F]`, skipping speaker `skip` if given.
fn total_variance(state: &McemState, variances: &[&Array2<f64>], skip: Option<usize>) -> Array2<f64> {
    let mut t = state.noise.variance_nf();
    for k in state.canonical_order() {
        if Some(k) == skip {
            continue;
        }
        let (sp, v) = (&state.speakers[k], variances[k]);
        Zip::from(t.rows_mut())
            .and(v.rows())
            .and(&sp.gains)
            .for_each(|mut tr, vr, &g| tr.scaled_add(g, &vr));
    }
    t
}

/// One E-step: `mh_steps` sweeps of per-speaker block Metropolis–Hastings,
/// each frame accepting or rejecting its own proposal. Samples after
/// `burn_in` sweeps replace the retained set.
pub fn mh_step(state: &mut McemState, ckpt: &Checkpoint) -> Result<()> {
    let cfg = state.cfg.clone();
    let mcfg = &ckpt.model;
    let (n, l) = (state.frames(), mcfg.latent_dim);
    let order = state.canonical_order();
    let mut rngs: Vec<ChaCha8Rng> = state
        .speakers
        .iter()
        .map(|sp| seed::rng(cfg.seed, &[1, digest_key(&sp.digest), state.rank_of(sp.index), state.e_steps]))
        .collect();
    for sp in &mut state.speakers {
        sp.retained_z.clear();
        sp.retained_variance.clear();
    }

    for sweep in 0..cfg.mh_steps {
        for &k in &order {
            let rng = &mut rngs[k];
            let noise = Array2::from_shape_fn((n, l), |_| cfg.proposal_std * rng.sample::<f64, _>(StandardNormal));
            let uniforms: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();

            let others: Vec<&Array2<f64>> = state.speakers.iter().map(|s| &s.variance).collect();
            let t_other = total_variance(state, &others, Some(k));
            let sp = &state.speakers[k];
            let proposal = &sp.z + &noise;
            let v_new = decode_rows(proposal.view(), sp.visual_hidden.view(), &ckpt.params, mcfg)?;

            let decisions = (0..n)
                .into_par_iter()
                .map(|i| {
                    let g = sp.gains[i];
                    let mut log_ratio = 0.0;
                    for f in 0..mcfg.freq_bins {
                        let p = state.power[[i, f]];
                        let base = t_other[[i, f]];
                        let t_old = g * sp.variance[[i, f]] + base;
                        let t_new = g * v_new[[i, f]] + base;
                        log_ratio += p / t_old + t_old.ln() - p / t_new - t_new.ln();
                    }
                    for j in 0..l {
                        let (m, sd) = (sp.prior_mean[[i, j]], sp.prior_std[[i, j]]);
                        let old = (sp.z[[i, j]] - m) / sd;
                        let new = (proposal[[i, j]] - m) / sd;
                        log_ratio += 0.5 * (old * old - new * new);
                    }
                    if log_ratio.is_nan() {
                        return Err(Error::NonFiniteLikelihood { speaker: sp.index, frame: i });
                    }
                    Ok(uniforms[i].ln() < log_ratio)
                })
                .collect::<Result<Vec<bool>>>()?;

            let sp = &mut state.speakers[k];
            for (i, &acc) in decisions.iter().enumerate() {
                if acc {
                    sp.z.row_mut(i).assign(&proposal.row(i));
                    sp.variance.row_mut(i).assign(&v_new.row(i));
                    state.accepted += 1;
                }
            }
            state.proposed += n as u64;
        }
        if sweep >= cfg.burn_in {
            for sp in &mut state.speakers {
                sp.retained_z.push(sp.z.clone());
                sp.retained_variance.push(sp.variance.clone());
            }
        }
    }
    state.e_steps += 1;
    Ok(())
}

fn floor_all(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(POSITIVE_FLOOR));
}

fn mean_variances(state: &McemState) -> Result<Vec<Array2<f64>>> {
    state.speakers.iter().map(SpeakerChain::mean_variance).collect()
}

/// Itakura–Saito mixture objective `Σ |x|²/t + ln t` with `t` built from the
/// retained-sample mean variances.
pub fn is_objective(state: &McemState) -> Result<f64> {
    let vhat = mean_variances(state)?;
    let refs: Vec<&Array2<f64>> = vhat.iter().collect();
    let t = total_variance(state, &refs, None);
    Ok(Zip::from(&state.power)
        .and(&t)
        .fold(0.0, |acc, &p, &t| acc + p / t + t.ln()))
}

/// One M-step: exponent-½ multiplicative updates of `H`, then `W`, then each
/// speaker's gains, refreshing the total variance between updates.
pub fn m_step(state: &mut McemState) -> Result<()> {
    let vhat = mean_variances(state)?;
    let refs: Vec<&Array2<f64>> = vhat.iter().collect();
    let p = state.power.clone();

    let ratios = |t: &Array2<f64>| -> (Array2<f64>, Array2<f64>) {
        let inv = t.mapv(|v| 1.0 / v);
        let pt2 = &p * &inv * &inv;
        (pt2, inv)
    };

    // H: [K × N]
    let t = total_variance(state, &refs, None);
    let (pt2, inv) = ratios(&t);
    let num = pt2.dot(&state.noise.w);
    let den = inv.dot(&state.noise.w);
    Zip::from(&mut state.noise.h)
        .and(&num.t())
        .and(&den.t())
        .for_each(|h, &a, &b| *h *= (a / b).sqrt());
    floor_all(&mut state.noise.h);

    // W: [F × K]
    let t = total_variance(state, &refs, None);
    let (pt2, inv) = ratios(&t);
    let num = pt2.t().dot(&state.noise.h.t());
    let den = inv.t().dot(&state.noise.h.t());
    Zip::from(&mut state.noise.w)
        .and(&num)
        .and(&den)
        .for_each(|w, &a, &b| *w *= (a / b).sqrt());
    floor_all(&mut state.noise.w);

    // gains, one speaker at a time
    for k in state.canonical_order() {
        let t = total_variance(state, &refs, None);
        let (pt2, inv) = ratios(&t);
        let v = &vhat[k];
        let num = (&pt2 * v).sum_axis(Axis(1));
        let den = (&inv * v).sum_axis(Axis(1));
        for (g, (a, b)) in state.speakers[k].gains.iter_mut().zip(num.iter().zip(&den)) {
            *g = (*g * (a / b).sqrt()).max(POSITIVE_FLOOR);
        }
    }
    if state.noise.min_entry() < POSITIVE_FLOOR
        || state.speakers.iter().any(|s| s.gains.iter().any(|&g| g.is_nan() || g < POSITIVE_FLOOR))
    {
        return Err(Error::NonFinite("M-step update".into()));
    }
    Ok(())
}

/// Wiener estimate of each speaker, averaged over retained samples:
/// `ŝ_k = mean_r[√g_k·v_k^r / (Σ_j g_j·v_j^r + β)] · x`.
pub fn wiener_estimate(state: &McemState) -> Result<Vec<ComplexSpectrogram>> {
    let r = state
        .speakers
        .iter()
        .map(|s| s.retained_variance.len())
        .min()
        .unwrap_or(0);
    if r == 0 {
        return Err(Error::NoRetainedSamples);
    }
    let (n, f) = state.power.dim();
    let mut filters: Vec<Array2<f64>> = vec![Array2::zeros((n, f)); state.speakers.len()];
    for s in 0..r {
        let vs: Vec<&Array2<f64>> = state.speakers.iter().map(|sp| &sp.retained_variance[s]).collect();
        let t = total_variance(state, &vs, None);
        for ((filt, sp), v) in filters.iter_mut().zip(&state.speakers).zip(&vs) {
            Zip::from(filt.rows_mut())
                .and(v.rows())
                .and(t.rows())
                .and(&sp.gains)
                .for_each(|mut fr, vr, tr, &g| {
                    let sg = g.sqrt();
                    Zip::from(&mut fr).and(&vr).and(&tr).for_each(|o, &v, &t| *o += sg * v / t);
                });
        }
    }
    filters
        .into_iter()
        .map(|filt| {
            let filt = filt / r as f64;
            let bins = Array2::from_shape_fn(state.mixture.bins.dim(), |(fi, ni)| {
                state.mixture.bins[[fi, ni]] * filt[[ni, fi]]
            });
            ComplexSpectrogram::new(bins, state.mixture.config, state.mixture.sample_rate)
        })
        .collect()
}

/// Runs `n_iters` rounds of E- and M-steps from [`init_mcem`] and returns
/// the Wiener estimates with the final state.
pub fn run_mcem(
    mixture: &ComplexSpectrogram,
    feats: &[VisualFeatures],
    ckpt: &Checkpoint,
    cfg: &McemConfig,
) -> Result<(Vec<ComplexSpectrogram>, McemState)> {
    let mut state = init_mcem(mixture, feats, ckpt, cfg)?;
    for _ in 0..cfg.n_iters {
        mh_step(&mut state, ckpt)?;
        m_step(&mut state)?;
    }
    Ok((wiener_estimate(&state)?, state))
}

fn aligned(feats: &VisualFeatures, n: usize) -> VisualFeatures {
    if feats.frames() == n {
        feats.clone()
    } else {
        feats.aligned(n)
    }
}

fn pipeline(
    wave: &Waveform,
    feats: &[VisualFeatures],
    ckpt: &Checkpoint,
    stft_cfg: &StftConfig,
    cfg: &McemConfig,
) -> Result<Vec<Waveform>> {
    let spec = stft(wave, stft_cfg)?;
    let n = spec.frames();
    let feats: Vec<VisualFeatures> = feats.iter().map(|f| aligned(f, n)).collect();
    let (estimates, _) = run_mcem(&spec, &feats, ckpt, cfg)?;
    estimates.iter().map(istft).collect()
}

/// Single-speaker enhancement. Visual features whose frame count differs
/// from the STFT are linearly interpolated in time. The output covers the
/// STFT frames, `(N − 1)·hop + fft_size` samples.
pub fn enhance(
    wave: &Waveform,
    feats: &VisualFeatures,
    ckpt: &Checkpoint,
    stft_cfg: &StftConfig,
    cfg: &McemConfig,
) -> Result<Waveform> {
    Ok(pipeline(wave, std::slice::from_ref(feats), ckpt, stft_cfg, cfg)?
        .pop()
        .expect("one speaker"))
}

/// Separation of two or more visually identified speakers; output `k`
/// belongs to `feats[k]`.
pub fn separate(
    wave: &Waveform,
    feats: &[VisualFeatures],
    ckpt: &Checkpoint,
    stft_cfg: &StftConfig,
    cfg: &McemConfig,
) -> Result<Vec<Waveform>> {
    if feats.len() < 2 {
        return Err(Error::TooFewSpeakers(feats.len()));
    }
    pipeline(wave, feats, ckpt, stft_cfg, cfg)
}
