//! Adam training with frame-level batches, early stopping on a held-out set
//! of utterances, the checkpoint format, and latent-activity diagnostics.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::data::{Manifest, Utterance};
use crate::dsp::{power_spectrum, stft, StftConfig};
use crate::error::{Error, Result};
use crate::model::{
    self, deterministic_loss, loss_and_grad, Batch, LatentGaussian, ModelConfig, WaeParams,
    PARAM_NAMES,
};
use crate::seed;

/// Frames per gradient shard; shards are reduced in index order.
const SHARD: usize = 64;

/// Variance of a latent mean across frames below which the dimension counts
/// as collapsed.
pub const COLLAPSE_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without significant validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub validation_fraction: f64,
    /// A validation loss counts as an improvement only when it beats the
    /// best so far by more than `min_delta · max(1, |best|)`.
    pub min_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 512,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            validation_fraction: 0.1,
            min_delta: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return bad(format!("min_delta must be nonnegative, got {}", self.min_delta));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- Adam

/// First and second moments per parameter entry plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: WaeParams,
    pub v: WaeParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &WaeParams) -> Self {
        let zeros = params.map(|t| Tensor::zeros(t.shape()));
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every entry.
pub fn adam_step(
    params: &mut WaeParams,
    grads: &WaeParams,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    for (((p, g), m), v) in params
        .leaves()
        .into_iter()
        .zip(grads.leaves())
        .zip(state.m.leaves())
        .zip(state.v.leaves())
    {
        if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let lr = cfg.learning_rate;
    for (((p, g), m), v) in params
        .leaves_mut()
        .into_iter()
        .zip(grads.leaves())
        .zip(state.m.leaves_mut())
        .zip(state.v.leaves_mut())
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- dataset

/// Network inputs of one utterance: power frames `[N × F]` and visual rows
/// `[N × (lip_dim + id_dim)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceFrames {
    pub id: String,
    pub power: Array2<f64>,
    pub visual: Array2<f64>,
}

impl UtteranceFrames {
    /// STFT power of the waveform with the visual stream aligned to its
    /// frame count.
    pub fn from_utterance(u: &Utterance, stft_cfg: &StftConfig, cfg: &ModelConfig) -> Result<Self> {
        if stft_cfg.freq_bins() != cfg.freq_bins {
            return Err(Error::DimMismatch {
                what: "frequency bins of the STFT vs model",
                expected: cfg.freq_bins,
                got: stft_cfg.freq_bins(),
            });
        }
        let spec = power_spectrum(&stft(&u.wave, stft_cfg)?);
        let n = spec.frames();
        let visual = u.visual.aligned(n).rows(cfg)?;
        Ok(Self {
            id: u.id.clone(),
            power: spec.power.reversed_axes().as_standard_layout().to_owned(),
            visual,
        })
    }

    pub fn frames(&self) -> usize {
        self.power.nrows()
    }
}

/// Loads every non-`test` record of `manifest` as network inputs.
pub fn load_frames(
    manifest: &Manifest,
    stft_cfg: &StftConfig,
    cfg: &ModelConfig,
) -> Result<Vec<UtteranceFrames>> {
    manifest
        .records
        .par_iter()
        .filter(|r| r.split != "test")
        .map(|r| UtteranceFrames::from_utterance(&manifest.load_utterance(r)?, stft_cfg, cfg))
        .collect()
}

fn gather(data: &[UtteranceFrames], idx: &[(usize, usize)]) -> Batch {
    let (f, dv) = (data[0].power.ncols(), data[0].visual.ncols());
    let mut power = Array2::zeros((idx.len(), f));
    let mut visual = Array2::zeros((idx.len(), dv));
    for (row, &(u, n)) in idx.iter().enumerate() {
        power.row_mut(row).assign(&data[u].power.row(n));
        visual.row_mut(row).assign(&data[u].visual.row(n));
    }
    Batch { power, visual }
}

fn stack(data: &[&UtteranceFrames]) -> Batch {
    let power = ndarray::concatenate(
        Axis(0),
        &data.iter().map(|u| u.power.view()).collect::<Vec<_>>(),
    )
    .expect("equal widths");
    let visual = ndarray::concatenate(
        Axis(0),
        &data.iter().map(|u| u.visual.view()).collect::<Vec<_>>(),
    )
    .expect("equal widths");
    Batch { power, visual }
}

/// Mean per-frame objective with `eps = 0`, evaluated in fixed-order shards.
pub fn dataset_loss(batch: &Batch, params: &WaeParams, cfg: &ModelConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = batch.len();
    let chunk = 1024;
    let sums = (0..n.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let r = c * chunk..((c + 1) * chunk).min(n);
            let len = r.len() as f64;
            Ok(deterministic_loss(&batch.slice(r), params, cfg)? * len)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(sums.iter().sum::<f64>() / n as f64)
}

/// Objective and gradient of a batch, scaled by `1 / len`, computed on
/// shards in parallel and summed in shard order.
fn batch_grad(
    batch: &Batch,
    eps: &Array2<f64>,
    params: &WaeParams,
    cfg: &ModelConfig,
) -> Result<(f64, WaeParams)> {
    let n = batch.len();
    let scale = 1.0 / n as f64;
    let parts = (0..n.div_ceil(SHARD))
        .into_par_iter()
        .map(|c| {
            let r = c * SHARD..((c + 1) * SHARD).min(n);
            let e = eps.slice(s![r.clone(), ..]).to_owned();
            loss_and_grad(&batch.slice(r), params, cfg, &e, scale)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = parts.into_iter();
    let (mut loss, mut grad) = iter.next().expect("nonempty batch");
    for (l, g) in iter {
        loss += l;
        for (acc, x) in grad.leaves_mut().into_iter().zip(g.leaves()) {
            for (a, b) in acc.data_mut().iter_mut().zip(x.data()) {
                *a += b;
            }
        }
    }
    Ok((loss, grad))
}

// ---------------------------------------------------------------- training

/// Per-epoch losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the sampled minibatch objectives during the epoch.
    pub train_loss: f64,
    /// Deterministic objective of the held-out utterances after the epoch.
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Deterministic objective of the training frames before the first step.
    pub initial_train_loss: f64,
    /// Deterministic objective of the training frames after the last step.
    pub final_train_loss: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub train_utterances: Vec<String>,
    pub val_utterances: Vec<String>,
}

fn rng_digest(seed: u64, epoch: usize, steps: u64) -> String {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    h.update(steps.to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Trains from the records of `manifest` not tagged `test`.
pub fn train(
    manifest: &Manifest,
    stft_cfg: &StftConfig,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if manifest.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let data = load_frames(manifest, stft_cfg, model_cfg)?;
    train_frames(&data, model_cfg, cfg)
}

/// Trains on preloaded utterances. Utterances are split into training and
/// validation sets by a seeded shuffle; training frames are reshuffled
/// every epoch and drawn into batches of `batch_size`.
pub fn train_frames(
    data: &[UtteranceFrames],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    if data.is_empty() || data.iter().all(|u| u.frames() == 0) {
        return Err(Error::EmptyDataset);
    }
    if data.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least two utterances to hold one out for validation".into(),
        ));
    }
    for u in data {
        if u.power.ncols() != model_cfg.freq_bins {
            return Err(Error::DimMismatch {
                what: "power frame",
                expected: model_cfg.freq_bins,
                got: u.power.ncols(),
            });
        }
        if u.visual.ncols() != model_cfg.visual_dim() || u.visual.nrows() != u.frames() {
            return Err(Error::DimMismatch {
                what: "visual frame",
                expected: model_cfg.visual_dim(),
                got: u.visual.ncols(),
            });
        }
    }

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seed::rng(cfg.seed, &[1]));
    let n_val = ((data.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, data.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();

    let val_batch = stack(&val_idx.iter().map(|&i| &data[i]).collect::<Vec<_>>());
    let train_all = stack(&train_idx.iter().map(|&i| &data[i]).collect::<Vec<_>>());
    let frames: Vec<(usize, usize)> = train_idx
        .iter()
        .flat_map(|&u| (0..data[u].frames()).map(move |n| (u, n)))
        .collect();
    if frames.is_empty() || val_batch.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut params = WaeParams::init(model_cfg, &mut seed::rng(cfg.seed, &[0]))?;
    let mut adam = AdamState::new(&params);
    let initial_train_loss =
        dataset_loss(&train_all, &params, model_cfg).map_err(|e| match e {
            Error::NonFinite(_) => Error::NanLoss { epoch: 0, batch: 0 },
            other => other,
        })?;

    let mut history = Vec::new();
    let mut best: Option<(f64, WaeParams, usize)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut epochs_run = 0;
    let l = model_cfg.latent_dim;

    for epoch in 1..=cfg.max_epochs {
        let mut shuffled = frames.clone();
        shuffled.shuffle(&mut seed::rng(cfg.seed, &[2, epoch as u64]));
        let mut weighted = 0.0;
        for (b, idx) in shuffled.chunks(cfg.batch_size).enumerate() {
            let batch = gather(data, idx);
            let mut rng = seed::rng(cfg.seed, &[3, epoch as u64, b as u64]);
            let eps = Array2::from_shape_fn((idx.len(), l), |_| rng.sample(StandardNormal));
            let (loss, grads) = batch_grad(&batch, &eps, &params, model_cfg).map_err(|e| match e {
                Error::NonFinite(_) => Error::NanLoss { epoch, batch: b },
                other => other,
            })?;
            if !loss.is_finite() || grads.leaves().iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::NanLoss { epoch, batch: b });
            }
            adam_step(&mut params, &grads, &mut adam, cfg)?;
            weighted += loss * idx.len() as f64;
        }
        epochs_run = epoch;
        let snapshot = params.rounded_to_f32();
        let val_loss = dataset_loss(&val_batch, &snapshot, model_cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::NanLoss { epoch, batch: 0 });
        }
        history.push(EpochRecord {
            epoch,
            train_loss: weighted / frames.len() as f64,
            val_loss,
        });
        let improved = match &best {
            None => true,
            Some((b, _, _)) => val_loss < b - cfg.min_delta * b.abs().max(1.0),
        };
        if improved {
            best = Some((val_loss, snapshot, epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }

    let final_train_loss = dataset_loss(&train_all, &params, model_cfg)?;
    let (best_val, best_params, best_epoch) = best.expect("at least one epoch");
    let checkpoint = Checkpoint {
        model: model_cfg.clone(),
        train: cfg.clone(),
        params: best_params,
        epoch: best_epoch,
        best_val_loss: Some(best_val),
        rng_digest: rng_digest(cfg.seed, epochs_run, adam.t),
    };
    Ok(TrainOutcome {
        checkpoint,
        history,
        initial_train_loss,
        final_train_loss,
        epochs_run,
        stopped_early,
        train_utterances: train_idx.iter().map(|&i| data[i].id.clone()).collect(),
        val_utterances: val_idx.iter().map(|&i| data[i].id.clone()).collect(),
    })
}

/// Recomputes the validation objective of a checkpoint on `val`.
pub fn validation_loss(ckpt: &Checkpoint, val: &[&UtteranceFrames]) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    dataset_loss(&stack(val), &ckpt.params, &ckpt.model)
}

// ---------------------------------------------------------------- checkpoint

const CKPT_MAGIC: [u8; 4] = *b"UVCK";
const CKPT_VERSION: u32 = 1;

/// Trained parameters with the configuration that produced them. Parameters
/// are held at single precision so a save/load round trip is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: WaeParams,
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
    pub rng_digest: String,
}

impl Checkpoint {
    /// Wraps parameters not produced by [`train`], rounding them to single
    /// precision.
    pub fn from_params(model: ModelConfig, params: WaeParams) -> Result<Self> {
        model.validate()?;
        params.check(&model)?;
        Ok(Self {
            model,
            train: TrainConfig::default(),
            params: params.rounded_to_f32(),
            epoch: 0,
            best_val_loss: None,
            rng_digest: String::new(),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    best_val_loss: Option<f64>,
    rng_digest: String,
    params: Vec<ParamEntry>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.params.check(&ckpt.model)?;
    let mut offset = 0;
    let mut entries = Vec::new();
    for (name, t) in PARAM_NAMES.iter().zip(ckpt.params.leaves()) {
        entries.push(ParamEntry {
            name: (*name).into(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len() * 4;
    }
    let header = serde_json::to_vec(&Header {
        model: ckpt.model.clone(),
        train: ckpt.train.clone(),
        epoch: ckpt.epoch,
        best_val_loss: ckpt.best_val_loss,
        rng_digest: ckpt.rng_digest.clone(),
        params: entries,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset);
    out.extend_from_slice(&CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in ckpt.params.leaves() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() >= 4 && bytes[..4] != CKPT_MAGIC {
        return Err(Error::BadMagic {
            expected: CKPT_MAGIC,
            found: bytes[..4].try_into().unwrap(),
        });
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            expected: 16,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CKPT_VERSION,
            found: version,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(16))
        .ok_or_else(|| Error::DimOverflow(format!("header length {header_len}")))?;
    if bytes.len() < header_end {
        return Err(Error::Truncated {
            expected: header_end,
            found: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    header
        .model
        .validate()
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let layout = WaeParams::layout(&header.model);
    if header.params.len() != layout.len() {
        return Err(Error::MalformedHeader(format!(
            "expected {} parameter entries, found {}",
            layout.len(),
            header.params.len()
        )));
    }
    let mut offset = 0usize;
    for (entry, (name, shape)) in header.params.iter().zip(&layout) {
        if entry.name != *name || entry.shape != *shape || entry.offset != offset {
            return Err(Error::MalformedHeader(format!(
                "parameter entry {} does not match the model layout",
                entry.name
            )));
        }
        offset = shape
            .iter()
            .try_fold(4usize, |a, &d| a.checked_mul(d))
            .and_then(|len| offset.checked_add(len))
            .ok_or_else(|| Error::DimOverflow(format!("parameter {name}")))?;
    }
    let expected = header_end
        .checked_add(offset)
        .ok_or_else(|| Error::DimOverflow("payload size".into()))?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes(bytes.len() - expected));
    }
    let payload = &bytes[header_end..];
    let leaves = layout
        .iter()
        .zip(&header.params)
        .map(|((_, shape), entry)| {
            let n: usize = shape.iter().product();
            let data = payload[entry.offset..entry.offset + n * 4]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect::<Vec<_>>();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("checkpoint parameter {}", entry.name)));
            }
            Tensor::new(shape.clone(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        model: header.model,
        train: header.train,
        params: WaeParams::from_leaves(leaves)?,
        epoch: header.epoch,
        best_val_loss: header.best_val_loss,
        rng_digest: header.rng_digest,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

// ---------------------------------------------------------------- diagnostics

/// Per-latent-dimension activity of a trained encoder.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatentActivity {
    /// Mean over frames of the per-dimension regularizer.
    pub mean_reg: Vec<f64>,
    /// Variance across frames of the posterior mean.
    pub var_of_mean: Vec<f64>,
    pub collapsed: Vec<bool>,
}

impl LatentActivity {
    pub fn collapsed_count(&self) -> usize {
        self.collapsed.iter().filter(|&&c| c).count()
    }
}

pub fn latent_activity(ckpt: &Checkpoint, data: &[UtteranceFrames]) -> Result<LatentActivity> {
    let cfg = &ckpt.model;
    let refs: Vec<&UtteranceFrames> = data.iter().filter(|u| u.frames() > 0).collect();
    if refs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batch = stack(&refs);
    let (mq, sq) = model::encode_batch(batch.power.view(), batch.visual.view(), &ckpt.params, cfg)?;
    let (mp, sp) = model::prior_batch(batch.visual.view(), &ckpt.params, cfg)?;
    let n = batch.len();
    let l = cfg.latent_dim;
    let mut mean_reg = vec![0.0; l];
    for i in 0..n {
        let q = LatentGaussian {
            mean: mq.row(i).to_vec(),
            std: sq.row(i).to_vec(),
        };
        let p = LatentGaussian {
            mean: mp.row(i).to_vec(),
            std: sp.row(i).to_vec(),
        };
        for (acc, r) in mean_reg.iter_mut().zip(model::regularizer_per_dim(&q, &p, cfg.regularizer)?) {
            *acc += r.max(0.0);
        }
    }
    for v in &mut mean_reg {
        *v /= n as f64;
    }
    let var_of_mean = mq.var_axis(Axis(0), 0.0).to_vec();
    let collapsed = var_of_mean.iter().map(|&v| v < COLLAPSE_THRESHOLD).collect();
    Ok(LatentActivity {
        mean_reg,
        var_of_mean,
        collapsed,
    })
}
