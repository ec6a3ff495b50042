use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use univoice::ablation::run_ablation;
use univoice::config::RunConfig;
use univoice::data::{load_visual, mix, read_wav, synth_dataset, write_wav, Manifest, SynthGenerator};
use univoice::dsp::{power_spectrum, stft, Waveform};
use univoice::inference::{enhance, separate};
use univoice::metrics::{Metric, MetricReport};
use univoice::training::{load_checkpoint, save_checkpoint, train, Checkpoint};

/// Audio-visual speech enhancement and separation.
#[derive(Debug, Parser)]
#[command(name = "univoice", version)]
struct Cli {
    /// Seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset, its manifest and the generating model.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the utterances of a manifest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Enhance one visually identified speaker in a noisy recording.
    Enhance {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        lip: PathBuf,
        #[arg(long)]
        ident: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Separate two or more visually identified speakers.
    Separate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        /// `LIP.uvft,IDENT.uvft`, once per speaker.
        #[arg(long = "speaker", required = true)]
        speakers: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Add an interferer to a clean signal at a given SNR.
    Mix {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        noise: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        snr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an estimate against a reference.
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        est: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "sdr,stoi")]
        metrics: Vec<Metric>,
        /// Written to standard output when omitted.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train the full model and its ablations, then score them on held-out
    /// synthetic mixtures.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the magnitude spectrogram of a recording as CSV.
    DumpSpec {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>, seed: u64) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg.with_seed(seed))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("{}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("{}", path.display()))
}

fn checkpoint_for(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.model.freq_bins != cfg.stft.freq_bins() {
        bail!(
            "checkpoint expects {} frequency bins but the configured STFT yields {}",
            ck.model.freq_bins,
            cfg.stft.freq_bins()
        );
    }
    Ok(ck)
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let manifest = synth_dataset(&cfg.synth, &out)?;
            let gen = SynthGenerator::new(&cfg.synth)?;
            let ck = Checkpoint::from_params(gen.model_config().clone(), gen.params().clone())?;
            save_checkpoint(&ck, out.join("ground_truth.uvck"))?;
            println!("wrote {} utterances to {}", manifest.len(), out.display());
        }
        Command::Train { config, manifest, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let manifest = Manifest::load(&manifest)?;
            let outcome = train(&manifest, &cfg.stft, &cfg.model, &cfg.train)?;
            save_checkpoint(&outcome.checkpoint, &out)?;
            println!(
                "epochs {} (early stop: {}), train loss {:.6} -> {:.6}, best validation loss {:.6}",
                outcome.epochs_run,
                outcome.stopped_early,
                outcome.initial_train_loss,
                outcome.final_train_loss,
                outcome.checkpoint.best_val_loss.unwrap_or(f64::NAN)
            );
        }
        Command::Enhance { config, ckpt, wav, lip, ident, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let ck = checkpoint_for(&cfg, &ckpt)?;
            let noisy = read_wav(&wav)?;
            let feats = load_visual(&lip, &ident)?;
            let est = enhance(&noisy, &feats, &ck, &cfg.stft, &cfg.mcem)?;
            write_wav(&est, &out)?;
        }
        Command::Separate { config, ckpt, wav, speakers, out_dir } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let feats = speakers
                .iter()
                .map(|s| {
                    let (lip, ident) = s
                        .split_once(',')
                        .with_context(|| format!("--speaker expects LIP,IDENT, got {s:?}"))?;
                    Ok(load_visual(lip, ident)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let ck = checkpoint_for(&cfg, &ckpt)?;
            let mixture = read_wav(&wav)?;
            let est = separate(&mixture, &feats, &ck, &cfg.stft, &cfg.mcem)?;
            fs::create_dir_all(&out_dir).with_context(|| format!("{}", out_dir.display()))?;
            for (k, w) in est.iter().enumerate() {
                write_wav(w, out_dir.join(format!("speaker{k}.wav")))?;
            }
        }
        Command::Mix { clean, noise, snr, out } => {
            let m = mix(&read_wav(&clean)?, &read_wav(&noise)?, snr)?;
            write_wav(&m, &out)?;
        }
        Command::Eval { reference, est, metrics, csv } => {
            let (r, e) = (read_wav(&reference)?, read_wav(&est)?);
            // enhancement drops the samples past the last full STFT frame
            let n = r.len().min(e.len());
            let id = est
                .file_stem()
                .map_or_else(|| "est".to_string(), |s| s.to_string_lossy().into_owned());
            let mut report = MetricReport::default();
            report.evaluate(&id, &r.truncated(n), &e.truncated(n), &metrics)?;
            match csv {
                Some(p) => write_text(&p, &report.to_csv())?,
                None => print!("{}", report.to_csv()),
            }
        }
        Command::Ablate { config, manifest, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let manifest = Manifest::load(&manifest)?;
            let ab = run_ablation(&manifest, &cfg)?;
            fs::create_dir_all(&out).with_context(|| format!("{}", out.display()))?;
            write_text(&out.join("scores.csv"), &ab.scores_csv())?;
            write_text(&out.join("activity.csv"), &ab.activity_csv())?;
            write_text(&out.join("checks.csv"), &ab.checks_csv())?;
            for r in &ab.results {
                save_checkpoint(&r.outcome.checkpoint, out.join(format!("{}.uvck", r.variant.name())))?;
            }
            print!("{}", ab.checks_csv());
        }
        Command::DumpSpec { config, wav, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let w: Waveform = read_wav(&wav)?;
            let p = power_spectrum(&stft(&w, &cfg.stft)?).power;
            let bin_hz = w.sample_rate() as f64 / cfg.stft.fft_size as f64;
            let mut text = String::from("frame,bin,freq_hz,magnitude\n");
            for n in 0..p.ncols() {
                for f in 0..p.nrows() {
                    text.push_str(&format!("{n},{f},{:?},{:?}\n", f as f64 * bin_hz, p[[f, n]].sqrt()));
                }
            }
            write_text(&out, &text)?;
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("UNIVOICE_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("UNIVOICE_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
