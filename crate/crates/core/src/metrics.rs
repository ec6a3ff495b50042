//! Objective quality measures: signal-to-distortion ratio and short-time
//! objective intelligibility, plus the band-limited resampler STOI needs.

use std::fmt;
use std::str::FromStr;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Ceiling reported when the estimate is (numerically) exact.
pub const SDR_CAP_DB: f64 = 100.0;

fn check_pair(reference: &Waveform, estimate: &Waveform) -> Result<()> {
    if reference.len() != estimate.len() {
        return Err(Error::DimMismatch {
            what: "estimate length",
            expected: reference.len(),
            got: estimate.len(),
        });
    }
    if reference.sample_rate() != estimate.sample_rate() {
        return Err(Error::InvalidArgument(format!(
            "sample rates differ: {} vs {}",
            reference.sample_rate(),
            estimate.sample_rate()
        )));
    }
    Ok(())
}

/// `10·log10(‖ref‖² / ‖ref − est‖²)`, capped at [`SDR_CAP_DB`].
pub fn sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    check_pair(reference, estimate)?;
    let e_ref = reference.energy();
    if e_ref == 0.0 {
        return Err(Error::Silent("reference"));
    }
    let e_err: f64 = reference
        .samples()
        .iter()
        .zip(estimate.samples())
        .map(|(r, e)| (r - e).powi(2))
        .sum();
    if e_err < 1e-10 * e_ref {
        return Ok(SDR_CAP_DB);
    }
    Ok((10.0 * (e_ref / e_err).log10()).min(SDR_CAP_DB))
}

// ---------------------------------------------------------------- resampling

/// Filter taps per polyphase branch.
const RESAMPLE_TAPS: usize = 64;
const KAISER_BETA: f64 = 8.0;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Rational resampling with a Kaiser-windowed sinc. Output length is
/// `ceil(len · target / source)`.
pub fn resample(wave: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::InvalidArgument("target rate must be positive".into()));
    }
    let source = wave.sample_rate();
    if source == target_rate {
        return Ok(wave.clone());
    }
    let g = gcd(source as u64, target_rate as u64);
    let (up, down) = (target_rate as u64 / g, source as u64 / g);
    let out_len = (wave.len() as u64 * up).div_ceil(down) as usize;
    // cutoff relative to the input Nyquist frequency
    let fc = (up as f64 / down as f64).min(1.0);
    let half = (RESAMPLE_TAPS as f64 / 2.0 / fc).ceil() as i64;
    let i0_beta = bessel_i0(KAISER_BETA);

    // one normalised filter per output phase
    let phases: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            let mut taps: Vec<f64> = (-half + 1..=half)
                .map(|k| {
                    let t = frac - k as f64;
                    let r = t / half as f64;
                    if r.abs() >= 1.0 {
                        return 0.0;
                    }
                    let w = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta;
                    fc * sinc(fc * t) * w
                })
                .collect();
            let s: f64 = taps.iter().sum();
            for t in &mut taps {
                *t /= s;
            }
            taps
        })
        .collect();

    let x = wave.samples();
    let out = (0..out_len)
        .map(|i| {
            let pos = i as u64 * down;
            let base = (pos / up) as i64;
            let taps = &phases[(pos % up) as usize];
            taps.iter()
                .enumerate()
                .map(|(j, &h)| {
                    let k = base + (j as i64 - half + 1);
                    if k >= 0 && (k as usize) < x.len() {
                        h * x[k as usize]
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect();
    Waveform::new(out, target_rate)
}

// ---------------------------------------------------------------- STOI

const STOI_FS: u32 = 10_000;
const STOI_FRAME: usize = 256;
const STOI_NFFT: usize = 512;
const STOI_BANDS: usize = 15;
const STOI_MIN_FREQ: f64 = 150.0;
const STOI_SEGMENT: usize = 30;
const STOI_BETA_DB: f64 = -15.0;
const STOI_DYN_RANGE_DB: f64 = 40.0;

/// `hanning(n + 2)` without its zero end points.
fn stoi_window(n: usize) -> Vec<f64> {
    let m = (n + 2) as f64;
    (1..=n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (m - 1.0)).cos())
        .collect()
}

/// Drops frames of both signals where the reference frame energy lies more
/// than `dyn_range` dB below the loudest reference frame, then overlap-adds
/// the survivors.
fn remove_silent_frames(x: &[f64], y: &[f64], dyn_range: f64, len: usize, hop: usize) -> (Vec<f64>, Vec<f64>) {
    let w = stoi_window(len);
    let starts: Vec<usize> = if x.len() >= len {
        (0..=x.len() - len).step_by(hop).collect()
    } else {
        Vec::new()
    };
    let frame = |s: &[f64], start: usize| -> Vec<f64> {
        w.iter().zip(&s[start..start + len]).map(|(a, b)| a * b).collect()
    };
    let energies: Vec<f64> = starts
        .iter()
        .map(|&st| {
            let f = frame(x, st);
            20.0 * (f.iter().map(|v| v * v).sum::<f64>().sqrt() + f64::EPSILON).log10()
        })
        .collect();
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|(_, &e)| max - dyn_range - e < 0.0)
        .map(|(&s, _)| s)
        .collect();
    let out_len = if kept.is_empty() {
        0
    } else {
        (kept.len() - 1) * hop + len
    };
    let mut xs = vec![0.0; out_len];
    let mut ys = vec![0.0; out_len];
    for (i, &st) in kept.iter().enumerate() {
        for (j, (a, b)) in frame(x, st).into_iter().zip(frame(y, st)).enumerate() {
            xs[i * hop + j] += a;
            ys[i * hop + j] += b;
        }
    }
    (xs, ys)
}

/// Magnitude-squared spectra `[frames][NFFT/2 + 1]` of Hann-windowed frames
/// with 50% overlap.
fn stoi_spectra(x: &[f64]) -> Vec<Vec<f64>> {
    let w = stoi_window(STOI_FRAME);
    let hop = STOI_FRAME / 2;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(STOI_NFFT);
    let mut buf = vec![Complex64::new(0.0, 0.0); STOI_NFFT];
    let mut out = Vec::new();
    let mut start = 0;
    while start + STOI_FRAME < x.len() {
        buf.fill(Complex64::new(0.0, 0.0));
        for i in 0..STOI_FRAME {
            buf[i] = Complex64::new(w[i] * x[start + i], 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..STOI_NFFT / 2 + 1].iter().map(|c| c.norm_sqr()).collect());
        start += hop;
    }
    out
}

/// Bin ranges `[lo, hi)` of the one-third-octave bands.
fn third_octave_bands() -> Vec<(usize, usize)> {
    let bins = STOI_NFFT / 2 + 1;
    let freqs: Vec<f64> = (0..bins)
        .map(|k| k as f64 * STOI_FS as f64 / STOI_NFFT as f64)
        .collect();
    let nearest = |target: f64| -> usize {
        let mut best = 0;
        for (i, f) in freqs.iter().enumerate() {
            if (f - target).powi(2) < (freqs[best] - target).powi(2) {
                best = i;
            }
        }
        best
    };
    (0..STOI_BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = STOI_MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = STOI_MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

fn band_envelopes(spectra: &[Vec<f64>], bands: &[(usize, usize)]) -> Vec<Vec<f64>> {
    bands
        .iter()
        .map(|&(lo, hi)| {
            spectra
                .iter()
                .map(|s| s[lo..hi].iter().sum::<f64>().sqrt())
                .collect()
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Short-time objective intelligibility of `estimate` against `reference`.
pub fn stoi(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    check_pair(reference, estimate)?;
    let min_len = reference.sample_rate() as usize / 2;
    if reference.len() < min_len {
        return Err(Error::InputTooShort {
            needed: min_len,
            got: reference.len(),
        });
    }
    let x = resample(reference, STOI_FS)?;
    let y = resample(estimate, STOI_FS)?;
    let (x, y) = remove_silent_frames(
        x.samples(),
        y.samples(),
        STOI_DYN_RANGE_DB,
        STOI_FRAME,
        STOI_FRAME / 2,
    );
    let bands = third_octave_bands();
    let xt = band_envelopes(&stoi_spectra(&x), &bands);
    let yt = band_envelopes(&stoi_spectra(&y), &bands);
    let frames = xt[0].len();
    if frames < STOI_SEGMENT {
        return Err(Error::InvalidArgument(format!(
            "not enough speech for intelligibility scoring: {frames} frames after silence removal, need {STOI_SEGMENT}"
        )));
    }
    let clip = 10f64.powf(-STOI_BETA_DB / 20.0);
    let eps = f64::EPSILON;
    let mut total = 0.0;
    let mut count = 0usize;
    for m in STOI_SEGMENT..=frames {
        for (xb, yb) in xt.iter().zip(&yt) {
            let xs = &xb[m - STOI_SEGMENT..m];
            let ys = &yb[m - STOI_SEGMENT..m];
            let scale = norm(xs) / (norm(ys) + eps);
            let mut yp: Vec<f64> = ys
                .iter()
                .zip(xs)
                .map(|(&yv, &xv)| (yv * scale).min(xv * (1.0 + clip)))
                .collect();
            let mut xc = xs.to_vec();
            for v in [&mut yp, &mut xc] {
                let mean = v.iter().sum::<f64>() / STOI_SEGMENT as f64;
                v.iter_mut().for_each(|e| *e -= mean);
                let n = norm(v) + eps;
                v.iter_mut().for_each(|e| *e /= n);
            }
            total += yp.iter().zip(&xc).map(|(a, b)| a * b).sum::<f64>();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------- reports

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Sdr,
    Stoi,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Sdr => "sdr",
            Metric::Stoi => "stoi",
        }
    }

    pub fn compute(self, reference: &Waveform, estimate: &Waveform) -> Result<f64> {
        match self {
            Metric::Sdr => sdr(reference, estimate),
            Metric::Stoi => stoi(reference, estimate),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sdr" => Ok(Metric::Sdr),
            "stoi" => Ok(Metric::Stoi),
            other => Err(Error::InvalidArgument(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricEntry {
    pub utt_id: String,
    pub metric: Metric,
    pub value: f64,
}

/// Per-utterance scores with mean and standard deviation per metric.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub entries: Vec<MetricEntry>,
}

impl MetricReport {
    pub fn push(&mut self, utt_id: impl Into<String>, metric: Metric, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{metric} score")));
        }
        self.entries.push(MetricEntry {
            utt_id: utt_id.into(),
            metric,
            value,
        });
        Ok(())
    }

    /// Scores `estimate` against `reference` for every metric in `metrics`.
    pub fn evaluate(
        &mut self,
        utt_id: &str,
        reference: &Waveform,
        estimate: &Waveform,
        metrics: &[Metric],
    ) -> Result<()> {
        for &m in metrics {
            self.push(utt_id, m, m.compute(reference, estimate)?)?;
        }
        Ok(())
    }

    pub fn values(&self, metric: Metric) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.metric == metric)
            .map(|e| e.value)
            .collect()
    }

    /// `(mean, population std)` of a metric, if any entry exists.
    pub fn summary(&self, metric: Metric) -> Option<(f64, f64)> {
        let v = self.values(metric);
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some((mean, var.sqrt()))
    }

    /// `utt_id,metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("utt_id,metric,value\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{:?}\n", e.utt_id, e.metric, e.value));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{proptest, prop_assert};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn wave(v: Vec<f64>) -> Waveform {
        Waveform::new(v, 16_000).unwrap()
    }

    fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    /// Lowpassed noise carrier under a slow syllabic envelope.
    fn speechlike(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let rate = rng.random_range(3.0..6.0);
        let phase = rng.random_range(0.0..6.3);
        let carrier = noise(rng, n);
        let mut prev = 0.0;
        carrier
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let t = i as f64 / 16_000.0;
                let env = 0.25 + 0.75 * (2.0 * std::f64::consts::PI * rate * t + phase).sin().powi(2);
                // one-pole lowpass gives a tilted spectrum
                prev = 0.7 * prev + 0.3 * c;
                env * prev
            })
            .collect()
    }

    #[test]
    fn sdr_hand_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = noise(&mut rng, 1000);
        let reference = wave(r.clone());
        assert_eq!(sdr(&reference, &reference).unwrap(), 100.0);
        assert_eq!(sdr(&reference, &wave(vec![0.0; 1000])).unwrap(), 0.0);

        // error with exactly a tenth of the reference energy
        let e = noise(&mut rng, 1000);
        let scale = (0.1 * reference.energy() / e.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let est = wave(r.iter().zip(&e).map(|(a, b)| a + scale * b).collect());
        assert!((sdr(&reference, &est).unwrap() - 10.0).abs() < 1e-9);

        for d in [0.1f64, 0.01] {
            let est = wave(r.iter().map(|v| v * (1.0 + d)).collect());
            let want = -20.0 * d.log10();
            assert!((sdr(&reference, &est).unwrap() - want).abs() < 1e-9);
        }
    }

    #[test]
    fn sdr_errors() {
        let a = wave(vec![1.0; 10]);
        assert!(matches!(sdr(&a, &wave(vec![1.0; 9])), Err(Error::DimMismatch { .. })));
        assert!(matches!(sdr(&wave(vec![0.0; 10]), &a), Err(Error::Silent(_))));
    }

    #[test]
    fn sdr_decreases_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = noise(&mut rng, 2000);
        let e = noise(&mut rng, 2000);
        let reference = wave(r.clone());
        let mut last = f64::INFINITY;
        for level in [0.01, 0.05, 0.2, 0.5, 1.0] {
            let est = wave(r.iter().zip(&e).map(|(a, b)| a + level * b).collect());
            let s = sdr(&reference, &est).unwrap();
            assert!(s < last);
            last = s;
        }
    }

    #[test]
    fn resample_lengths_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = wave(noise(&mut rng, 16_000));
        assert_eq!(resample(&w, 16_000).unwrap(), w);
        let down = resample(&w, 10_000).unwrap();
        assert_eq!(down.len(), 10_000);
        assert_eq!(down.sample_rate(), 10_000);
        let odd = wave(noise(&mut rng, 1001));
        assert_eq!(resample(&odd, 10_000).unwrap().len(), 626);
        assert_eq!(resample(&odd, 44_100).unwrap().len(), (1001u64 * 441).div_ceil(160) as usize);
    }

    fn dominant_bin(x: &[f64], n_fft: usize) -> usize {
        // naive DFT magnitude
        (1..n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, &v) in x.iter().take(n_fft).enumerate() {
                    let a = -2.0 * std::f64::consts::PI * (k * i) as f64 / n_fft as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                (k, re * re + im * im)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0
    }

    #[test]
    fn resample_keeps_sine_frequency() {
        let x: Vec<f64> = (0..16_000)
            .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 16_000.0).sin())
            .collect();
        let y = resample(&wave(x), 10_000).unwrap();
        let bin = dominant_bin(&y.samples()[1000..], 4096);
        let expected = 1000.0 * 4096.0 / 10_000.0;
        assert!((bin as f64 - expected).abs() <= 1.0, "bin {bin}");
        // amplitude is preserved away from the edges
        let rms = (y.samples()[1000..9000].iter().map(|v| v * v).sum::<f64>() / 8000.0).sqrt();
        assert!((rms - 0.5f64.sqrt()).abs() < 1e-3, "{rms}");
    }

    #[test]
    fn resample_rejects_aliases() {
        // 7 kHz is above the 5 kHz output Nyquist frequency
        let x: Vec<f64> = (0..16_000)
            .map(|i| (2.0 * std::f64::consts::PI * 7000.0 * i as f64 / 16_000.0).sin())
            .collect();
        let y = resample(&wave(x), 10_000).unwrap();
        let rms = (y.samples()[1000..9000].iter().map(|v| v * v).sum::<f64>() / 8000.0).sqrt();
        assert!(rms < 1e-3, "{rms}");
    }

    #[test]
    fn band_edges() {
        let b = third_octave_bands();
        assert_eq!(b.len(), 15);
        // 150 Hz · 2^(-1/6) ≈ 133.6 Hz → nearest bin of 19.53 Hz spacing is 7
        assert_eq!(b[0], (7, 9));
        assert!(b.windows(2).all(|w| w[0].1 == w[1].0 || w[0].1 + 1 >= w[1].0));
        assert!(b[14].1 <= 257);
    }

    #[test]
    fn stoi_identity_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = wave(speechlike(&mut rng, 32_000));
        assert!((stoi(&x, &x).unwrap() - 1.0).abs() < 1e-6);
        let doubled = wave(x.samples().iter().map(|v| 2.0 * v).collect());
        assert!((stoi(&x, &doubled).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn stoi_of_independent_noise_is_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = wave(speechlike(&mut rng, 24_000));
            let y = wave(noise(&mut rng, 24_000));
            let s = stoi(&x, &y).unwrap();
            assert!(s < 0.2, "{s}");
        }
    }

    #[test]
    fn stoi_errors() {
        let short = wave(vec![0.1; 4000]);
        assert!(matches!(stoi(&short, &short), Err(Error::InputTooShort { .. })));
        let mut v = vec![0.0; 16_000];
        v[8000] = 1.0;
        let click = wave(v);
        assert!(stoi(&click, &click).is_err());
    }

    proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(12))]
        #[test]
        fn stoi_scale_invariant_and_bounded(seed in 0u64..1000, a in 0.01f64..100.0, b in 0.01f64..100.0, mix in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = speechlike(&mut rng, 16_000);
            let n = noise(&mut rng, 16_000);
            let y: Vec<f64> = x.iter().zip(&n).map(|(s, e)| s + mix * 0.1 * e).collect();
            let base = stoi(&wave(x.clone()), &wave(y.clone())).unwrap();
            let scaled = stoi(
                &wave(x.iter().map(|v| v * a).collect()),
                &wave(y.iter().map(|v| v * b).collect()),
            ).unwrap();
            prop_assert!((base - scaled).abs() < 1e-6);
            prop_assert!((-1.0..=1.0).contains(&base));
        }
    }

    #[test]
    fn report_csv_and_summary() {
        let mut r = MetricReport::default();
        r.push("a", Metric::Sdr, 100.0).unwrap();
        r.push("a", Metric::Stoi, 1.0).unwrap();
        r.push("b", Metric::Sdr, 50.0).unwrap();
        assert_eq!(r.to_csv(), "utt_id,metric,value\na,sdr,100.0\na,stoi,1.0\nb,sdr,50.0\n");
        assert_eq!(r.summary(Metric::Sdr), Some((75.0, 25.0)));
        assert!(r.push("c", Metric::Sdr, f64::NAN).is_err());
        assert_eq!("stoi".parse::<Metric>().unwrap(), Metric::Stoi);
        assert!("pesq".parse::<Metric>().is_err());
    }
}
