//! Trains the full model and its two ablations on one dataset and scores
//! them on held-out synthetic mixtures.

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{mix, nmf_noise, Manifest, Utterance};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::inference::enhance;
use crate::metrics::{Metric, MetricReport};
use crate::model::{ModelConfig, Regularizer};
use crate::seed;
use crate::training::{latent_activity, train_frames, LatentActivity, TrainOutcome, UtteranceFrames};

/// SNR of the held-out mixtures.
pub const HELDOUT_SNR_DB: f64 = 0.0;
/// Rank of the held-out noise's spectral factorisation.
pub const HELDOUT_NOISE_RANK: usize = 4;
/// Factor applied to `lambda` for the KL variant.
pub const KL_LAMBDA_SCALE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    Kl,
    NoVisual,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::Kl, Variant::NoVisual];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Kl => "kl",
            Variant::NoVisual => "no-visual",
        }
    }

    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        match self {
            Variant::Full => base.clone(),
            Variant::Kl => ModelConfig {
                regularizer: Regularizer::Kl,
                lambda: base.lambda * KL_LAMBDA_SCALE,
                ..base.clone()
            },
            Variant::NoVisual => ModelConfig {
                use_visual: false,
                ..base.clone()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    pub outcome: TrainOutcome,
    pub activity: LatentActivity,
    pub scores: MetricReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub reference: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub heldout: Vec<String>,
    /// Scores of the unprocessed mixtures.
    pub mixture_scores: MetricReport,
    pub results: Vec<VariantResult>,
    /// Held-out utterances too short for STOI.
    pub stoi_skipped: Vec<String>,
}

struct Heldout {
    id: String,
    clean: Waveform,
    mixture: Waveform,
    utterance: Utterance,
}

/// Held-out records are those tagged `test`; without any, the last tenth of
/// the manifest (at least one record) is held out.
fn split_heldout(manifest: &Manifest) -> (Vec<usize>, Vec<usize>) {
    let n = manifest.len();
    let tagged: Vec<usize> = (0..n).filter(|&i| manifest.records[i].split == "test").collect();
    let held = if tagged.is_empty() {
        let k = n.div_ceil(10).max(1);
        (n - k..n).collect()
    } else {
        tagged
    };
    let train = (0..n).filter(|i| !held.contains(i)).collect();
    (train, held)
}

fn metrics_for(len: usize) -> &'static [Metric] {
    if len >= crate::data::SAMPLE_RATE as usize / 2 {
        &[Metric::Sdr, Metric::Stoi]
    } else {
        &[Metric::Sdr]
    }
}

fn score(report: &mut MetricReport, id: &str, clean: &Waveform, est: &Waveform) -> Result<()> {
    let clean = clean.truncated(est.len());
    let est = est.truncated(clean.len());
    report.evaluate(id, &clean, &est, metrics_for(clean.len()))
}

pub fn run_ablation(manifest: &Manifest, cfg: &RunConfig) -> Result<Ablation> {
    cfg.validate()?;
    let (train_idx, held_idx) = split_heldout(manifest);
    if train_idx.len() < 2 {
        return Err(Error::EmptyDataset);
    }
    let utterances = manifest.load_all()?;
    let train_data = train_idx
        .iter()
        .map(|&i| UtteranceFrames::from_utterance(&utterances[i], &cfg.stft, &cfg.model))
        .collect::<Result<Vec<_>>>()?;

    let heldout = held_idx
        .iter()
        .map(|&i| {
            let u = &utterances[i];
            let frames = cfg.stft.num_frames(u.wave.len()).max(1);
            let mut rng = seed::rng(cfg.train.seed, &[5, i as u64]);
            let noise = nmf_noise(&cfg.stft, frames, HELDOUT_NOISE_RANK, &mut rng)?;
            Ok(Heldout {
                id: u.id.clone(),
                clean: u.wave.clone(),
                mixture: mix(&u.wave, &noise, HELDOUT_SNR_DB)?,
                utterance: u.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut mixture_scores = MetricReport::default();
    for h in &heldout {
        score(&mut mixture_scores, &h.id, &h.clean, &h.mixture)?;
    }

    let mut results = Vec::new();
    for variant in Variant::ALL {
        let model_cfg = variant.model_config(&cfg.model);
        let outcome = train_frames(&train_data, &model_cfg, &cfg.train)?;
        let activity = latent_activity(&outcome.checkpoint, &train_data)?;
        let estimates = heldout
            .par_iter()
            .map(|h| {
                enhance(
                    &h.mixture,
                    &h.utterance.visual,
                    &outcome.checkpoint,
                    &cfg.stft,
                    &cfg.mcem,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut scores = MetricReport::default();
        for (h, est) in heldout.iter().zip(&estimates) {
            score(&mut scores, &h.id, &h.clean, est)?;
        }
        results.push(VariantResult {
            variant,
            outcome,
            activity,
            scores,
        });
    }

    let stoi_skipped = heldout
        .iter()
        .filter(|h| metrics_for(h.clean.len()).len() < 2)
        .map(|h| h.id.clone())
        .collect();
    Ok(Ablation {
        heldout: heldout.into_iter().map(|h| h.id).collect(),
        mixture_scores,
        results,
        stoi_skipped,
    })
}

impl Ablation {
    pub fn result(&self, v: Variant) -> &VariantResult {
        self.results.iter().find(|r| r.variant == v).expect("all variants run")
    }

    fn mean_sdr(&self, v: Variant) -> f64 {
        self.result(v).scores.summary(Metric::Sdr).map_or(f64::NAN, |s| s.0)
    }

    /// The two directional claims: removing the visual stream lowers SDR,
    /// and a heavily weighted KL collapses at least as many latent
    /// dimensions as the Wasserstein model.
    pub fn checks(&self) -> Vec<Check> {
        let full = self.mean_sdr(Variant::Full);
        let no_vis = self.mean_sdr(Variant::NoVisual);
        let kl = self.result(Variant::Kl).activity.collapsed_count() as f64;
        let w2 = self.result(Variant::Full).activity.collapsed_count() as f64;
        vec![
            Check {
                name: "no_visual_sdr_below_full",
                value: no_vis,
                reference: full,
                pass: no_vis < full,
            },
            Check {
                name: "kl_collapsed_at_least_w2",
                value: kl,
                reference: w2,
                pass: kl >= w2,
            },
        ]
    }

    /// `check,value,reference,pass`.
    pub fn checks_csv(&self) -> String {
        let mut out = String::from("check,value,reference,pass\n");
        for c in self.checks() {
            out.push_str(&format!("{},{:?},{:?},{}\n", c.name, c.value, c.reference, c.pass));
        }
        out
    }

    /// `utt_id,metric,value` with ids prefixed by the variant, and the
    /// unprocessed mixture under `mixture/`.
    pub fn scores_csv(&self) -> String {
        let mut out = String::from("utt_id,metric,value\n");
        let mut rows = |prefix: &str, r: &MetricReport| {
            for e in &r.entries {
                out.push_str(&format!("{prefix}/{},{},{:?}\n", e.utt_id, e.metric, e.value));
            }
        };
        rows("mixture", &self.mixture_scores);
        for r in &self.results {
            rows(r.variant.name(), &r.scores);
        }
        out
    }

    /// `variant,dim,mean_reg,var_of_mean,collapsed`.
    pub fn activity_csv(&self) -> String {
        let mut out = String::from("variant,dim,mean_reg,var_of_mean,collapsed\n");
        for r in &self.results {
            let a = &r.activity;
            for i in 0..a.mean_reg.len() {
                out.push_str(&format!(
                    "{},{},{:?},{:?},{}\n",
                    r.variant.name(),
                    i,
                    a.mean_reg[i],
                    a.var_of_mean[i],
                    a.collapsed[i]
                ));
            }
        }
        out
    }
}
