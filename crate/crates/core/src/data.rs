//! Synthetic sources and mixtures, dominance labels, fixed-length chunks,
//! and the on-disk dataset layout.
//!
//! A dataset directory looks like:
//!
//! ```text
//! manifest.txt              one line per mixture (see `ManifestEntry`)
//! norm_stats.bin            feature statistics of the training split
//! wav/<split>/<id>_mix.wav  mixture
//! wav/<split>/<id>_s<c>.wav scaled source c
//! chunks/<split>/<id>_<j>.bin
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2, Array3};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::FftPlanner;

pub use crate::attractor::MembershipTensor;
use crate::attractor::flatten_bins;
use crate::signal::{
    self, log_magnitude, quantize_16bit, ComplexSpectrogram, FeatureMatrix, NormStats, Waveform,
    HOP, SAMPLE_RATE, WINDOW_LEN,
};
use crate::tensor_file::TensorFile;
use crate::{Error, Result};

/// RMS every synthesized source is normalised to.
pub const SOURCE_RMS: f64 = 0.1;
const MAX_HARMONICS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Harmonic,
    ModulatedNoise,
}

/// Everything needed to render one synthetic source.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpec {
    pub kind: SourceKind,
    /// Breakpoints of the fundamental, evenly spaced over the duration and
    /// linearly interpolated. Harmonic sources only.
    pub f0_trajectory: Vec<f64>,
    /// Pass band in Hz. Noise sources only.
    pub band: (f64, f64),
    pub am_rate: f64,
    pub seed: u64,
}

/// Register classes mixtures draw their sources from. Sources in one
/// mixture always come from distinct classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoiceClass {
    LowHarmonic,
    HighHarmonic,
    Noise,
}

impl VoiceClass {
    pub const ALL: [VoiceClass; 3] = [
        VoiceClass::LowHarmonic,
        VoiceClass::HighHarmonic,
        VoiceClass::Noise,
    ];
}

impl SourceSpec {
    /// Draws a source of the given class; every parameter is a function of
    /// `seed`.
    pub fn random(class: VoiceClass, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let am_rate = rng.gen_range(2.0..6.0);
        let harmonic = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            let mut f0 = rng.gen_range(lo..hi);
            let mut traj = Vec::with_capacity(6);
            for _ in 0..6 {
                traj.push(f0);
                f0 = (f0 * rng.gen_range(0.9..1.1)).clamp(lo * 0.9, hi * 1.1);
            }
            traj
        };
        match class {
            VoiceClass::LowHarmonic => Self {
                kind: SourceKind::Harmonic,
                f0_trajectory: harmonic(&mut rng, 85.0, 140.0),
                band: (0.0, 0.0),
                am_rate,
                seed,
            },
            VoiceClass::HighHarmonic => Self {
                kind: SourceKind::Harmonic,
                f0_trajectory: harmonic(&mut rng, 180.0, 300.0),
                band: (0.0, 0.0),
                am_rate,
                seed,
            },
            VoiceClass::Noise => {
                let lo: f64 = rng.gen_range(300.0..1200.0);
                let hi = (lo + rng.gen_range(1000.0..2500.0)).min(3900.0);
                Self {
                    kind: SourceKind::ModulatedNoise,
                    f0_trajectory: Vec::new(),
                    band: (lo, hi),
                    am_rate,
                    seed,
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.am_rate > 0.0 && self.am_rate < 50.0) {
            return Err(Error::invalid(format!("AM rate {} Hz out of range", self.am_rate)));
        }
        match self.kind {
            SourceKind::Harmonic => {
                if self.f0_trajectory.is_empty() {
                    return Err(Error::invalid("harmonic source needs an f0 trajectory"));
                }
                if let Some(f) = self.f0_trajectory.iter().find(|&&f| !(f > 60.0 && f < 400.0)) {
                    return Err(Error::invalid(format!("f0 {f} Hz outside (60, 400)")));
                }
            }
            SourceKind::ModulatedNoise => {
                let (lo, hi) = self.band;
                if !(lo > 0.0 && lo < hi && hi < 4000.0) {
                    return Err(Error::invalid(format!("noise band ({lo}, {hi}) Hz outside (0, 4000)")));
                }
            }
        }
        Ok(())
    }
}

fn interpolate(points: &[f64], pos: f64) -> f64 {
    if points.len() == 1 {
        return points[0];
    }
    let x = pos.clamp(0.0, 1.0) * (points.len() - 1) as f64;
    let i = (x.floor() as usize).min(points.len() - 2);
    let frac = x - i as f64;
    points[i] * (1.0 - frac) + points[i + 1] * frac
}

pub fn synthesize_source(spec: &SourceSpec, duration_s: f64) -> Result<Waveform> {
    spec.validate()?;
    if !(duration_s > 0.0) {
        return Err(Error::invalid(format!("duration {duration_s} s must be positive")));
    }
    let sr = SAMPLE_RATE as f64;
    let n = (duration_s * sr).round() as usize;
    if n == 0 {
        return Err(Error::invalid("duration shorter than one sample"));
    }
    // distinct stream from the one SourceSpec::random used for parameters
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_0F_A0D10);
    let am_phase = rng.gen_range(0.0..2.0 * PI);
    let envelope = |i: usize| {
        let t = i as f64 / sr;
        0.15 + 0.85 * (0.5 + 0.5 * (2.0 * PI * spec.am_rate * t + am_phase).sin())
    };

    let mut out = vec![0.0; n];
    match spec.kind {
        SourceKind::Harmonic => {
            let f0_max = spec.f0_trajectory.iter().copied().fold(0.0, f64::max);
            let n_harm = ((3800.0 / f0_max).floor() as usize).clamp(1, MAX_HARMONICS);
            let phases: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            let mut phase = 0.0;
            for (i, x) in out.iter_mut().enumerate() {
                let f0 = interpolate(&spec.f0_trajectory, i as f64 / n as f64);
                let mut v = 0.0;
                for (h, p) in phases.iter().enumerate() {
                    let h = (h + 1) as f64;
                    v += (h * phase + p).sin() / h;
                }
                *x = v * envelope(i);
                phase += 2.0 * PI * f0 / sr;
            }
        }
        SourceKind::ModulatedNoise => {
            let mut buf: Vec<Complex64> = (0..n)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), 0.0))
                .collect();
            let mut planner = FftPlanner::new();
            planner.plan_fft_forward(n).process(&mut buf);
            let (lo, hi) = spec.band;
            for (k, c) in buf.iter_mut().enumerate() {
                let k_pos = k.min(n - k);
                let freq = k_pos as f64 * sr / n as f64;
                if freq < lo || freq > hi {
                    *c = Complex64::new(0.0, 0.0);
                }
            }
            planner.plan_fft_inverse(n).process(&mut buf);
            for (i, (x, c)) in out.iter_mut().zip(&buf).enumerate() {
                *x = c.re * envelope(i);
            }
        }
    }
    let rms = (out.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
    if rms == 0.0 {
        return Err(Error::SilentSource(0));
    }
    for x in &mut out {
        *x *= SOURCE_RMS / rms;
    }
    Waveform::new(out, SAMPLE_RATE)
}

/// One mixture with its scaled sources.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureRecord {
    pub mixture: Waveform,
    pub sources: Vec<Waveform>,
    pub snr_db: Vec<f64>,
    pub id: String,
}

impl MixtureRecord {
    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }
}

/// Scales source `i` so that `10 log10(P_0 / P_i) = snr_db[i]` and sums.
pub fn mix(sources: &[Waveform], snr_db: &[f64]) -> Result<MixtureRecord> {
    if sources.is_empty() {
        return Err(Error::invalid("no sources to mix"));
    }
    if snr_db.len() != sources.len() {
        return Err(Error::invalid(format!(
            "{} sources but {} SNR values",
            sources.len(),
            snr_db.len()
        )));
    }
    if snr_db[0] != 0.0 {
        return Err(Error::invalid("the first source is the 0 dB reference"));
    }
    let len = sources[0].len();
    if let Some(i) = sources.iter().position(|s| s.len() != len) {
        return Err(Error::invalid(format!("source {i} length differs from source 0")));
    }
    if let Some(i) = sources.iter().position(|s| s.power() == 0.0) {
        return Err(Error::SilentSource(i));
    }
    let p_ref = sources[0].power();
    let scaled: Vec<Waveform> = sources
        .iter()
        .zip(snr_db)
        .map(|(s, &db)| {
            let gain = (p_ref / (s.power() * 10f64.powf(db / 10.0))).sqrt();
            Waveform {
                samples: s.samples.iter().map(|x| x * gain).collect(),
                sample_rate: s.sample_rate,
            }
        })
        .collect();
    let mut mixture = vec![0.0; len];
    for s in &scaled {
        for (m, x) in mixture.iter_mut().zip(&s.samples) {
            *m += x;
        }
    }
    Ok(MixtureRecord {
        mixture: Waveform::new(mixture, sources[0].sample_rate)?,
        sources: scaled,
        snr_db: snr_db.to_vec(),
        id: String::new(),
    })
}

/// One-hot dominance labels from `F x T x C` source magnitudes. Ties go to
/// the lowest source index.
pub fn membership(source_mags: &Array3<f64>) -> MembershipTensor {
    let (nf, nt, nc) = source_mags.dim();
    let mut y = Array2::zeros((nf * nt, nc));
    for t in 0..nt {
        for f in 0..nf {
            let mut best = 0;
            for c in 1..nc {
                if source_mags[[f, t, c]] > source_mags[[f, t, best]] {
                    best = c;
                }
            }
            y[[crate::bin_index(f, t, nf), best]] = 1.0;
        }
    }
    MembershipTensor { y }
}

/// A fixed-length slice of a mixture ready for training.
#[derive(Debug, Clone)]
pub struct Chunk {
    pub features: FeatureMatrix,
    pub mixture_mag: Array2<f64>,
    pub source_mags: Array3<f64>,
    pub membership: MembershipTensor,
    pub mixture_phase: Array2<Complex64>,
}

impl Chunk {
    pub fn n_freq(&self) -> usize {
        self.mixture_mag.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.mixture_mag.ncols()
    }

    pub fn n_sources(&self) -> usize {
        self.source_mags.dim().2
    }

    /// Mixture magnitude in time-major bin order.
    pub fn mixture_bins(&self) -> ndarray::Array1<f64> {
        flatten_bins(self.mixture_mag.view())
    }

    /// Mixture log-magnitude in bin order, the salience statistic.
    pub fn mixture_log_bins(&self) -> ndarray::Array1<f64> {
        self.mixture_bins().mapv(|m| (m + signal::LOG_EPS).ln())
    }

    pub fn source_bins(&self) -> Array2<f64> {
        crate::attractor::flatten_sources(&self.source_mags)
    }

    fn to_tensor_file(&self, id: &str, index: usize) -> TensorFile {
        let (nf, nt, nc) = self.source_mags.dim();
        let mut tf = TensorFile::new();
        tf.set_meta("kind", "chunk")
            .set_meta("id", id)
            .set_meta("index", index)
            .set_meta("frames", nt)
            .set_meta("sources", nc);
        let flat = |a: &Array2<f64>| a.iter().copied().collect::<Vec<_>>();
        tf.push("features", &[nf, nt], &flat(&self.features.values));
        tf.push("mixture_mag", &[nf, nt], &flat(&self.mixture_mag));
        tf.push(
            "source_mags",
            &[nf, nt, nc],
            &self.source_mags.iter().copied().collect::<Vec<_>>(),
        );
        tf.push("membership", &[nf * nt, nc], &flat(&self.membership.y));
        tf.push(
            "mixture_phase",
            &[nf, nt],
            &self.mixture_phase.iter().map(|c| c.arg()).collect::<Vec<_>>(),
        );
        tf
    }

    fn from_tensor_file(tf: &TensorFile, stats: &NormStats) -> Result<Self> {
        let mag = tf.get("mixture_mag")?;
        if mag.shape.len() != 2 {
            return Err(Error::shape("chunk mixture_mag must be 2-D"));
        }
        let (nf, nt) = (mag.shape[0], mag.shape[1]);
        let src = tf.get("source_mags")?;
        let nc = *src.shape.get(2).ok_or_else(|| Error::shape("chunk source_mags must be 3-D"))?;
        src.expect_shape(&[nf, nt, nc])?;
        let two_d = |name: &str| -> Result<Array2<f64>> {
            let t = tf.get(name)?;
            t.expect_shape(&[nf, nt])?;
            Ok(Array2::from_shape_vec((nf, nt), t.to_f64()).unwrap())
        };
        let y = tf.get("membership")?;
        y.expect_shape(&[nf * nt, nc])?;
        Ok(Chunk {
            features: FeatureMatrix {
                values: two_d("features")?,
                norm_stats: stats.clone(),
            },
            mixture_mag: Array2::from_shape_vec((nf, nt), mag.to_f64()).unwrap(),
            source_mags: Array3::from_shape_vec((nf, nt, nc), src.to_f64()).unwrap(),
            membership: MembershipTensor {
                y: Array2::from_shape_vec((nf * nt, nc), y.to_f64()).unwrap(),
            },
            mixture_phase: two_d("mixture_phase")?.mapv(|p| Complex64::from_polar(1.0, p)),
        })
    }
}

/// Spectrograms of a mixture and its sources.
pub struct RecordSpectra {
    pub mixture: ComplexSpectrogram,
    pub sources: Vec<ComplexSpectrogram>,
}

pub fn record_spectra(rec: &MixtureRecord) -> Result<RecordSpectra> {
    Ok(RecordSpectra {
        mixture: signal::stft(&rec.mixture, WINDOW_LEN, HOP)?,
        sources: rec
            .sources
            .iter()
            .map(|s| signal::stft(s, WINDOW_LEN, HOP))
            .collect::<Result<_>>()?,
    })
}

/// Cuts a record into non-overlapping `chunk_len`-frame chunks; a trailing
/// partial chunk is dropped.
pub fn chunk_record(spectra: &RecordSpectra, chunk_len: usize, stats: &NormStats) -> Result<Vec<Chunk>> {
    if chunk_len == 0 {
        return Err(Error::invalid("chunk length must be positive"));
    }
    let mix = &spectra.mixture;
    let nf = mix.n_freq();
    let nc = spectra.sources.len();
    let features = signal::log_magnitude_features(mix, Some(stats))?;
    let mix_mag = mix.magnitude();
    let src_mags: Vec<Array2<f64>> = spectra.sources.iter().map(|s| s.magnitude()).collect();
    let mut chunks = Vec::new();
    let mut start = 0;
    while start + chunk_len <= mix.n_frames() {
        let range = s![.., start..start + chunk_len];
        let source_mags = Array3::from_shape_fn((nf, chunk_len, nc), |(f, t, c)| {
            src_mags[c][[f, start + t]]
        });
        chunks.push(Chunk {
            features: FeatureMatrix {
                values: features.values.slice(range).to_owned(),
                norm_stats: stats.clone(),
            },
            mixture_mag: mix_mag.slice(range).to_owned(),
            membership: membership(&source_mags),
            source_mags,
            mixture_phase: mix.bins.slice(range).mapv(|c| {
                if c.norm() > 0.0 {
                    c / c.norm()
                } else {
                    Complex64::new(1.0, 0.0)
                }
            }),
        });
        start += chunk_len;
    }
    Ok(chunks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Valid => 2,
            Split::Test => 3,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub n_sources: usize,
    pub chunk_len: usize,
    pub seed: u64,
    pub snr_range: (f64, f64),
    pub duration_s: f64,
}

impl DatasetConfig {
    /// `n_mixtures` training mixtures, with validation and test splits of a
    /// fifth and two fifths of that size.
    pub fn with_mixtures(n_mixtures: usize, n_sources: usize, chunk_len: usize, seed: u64, snr_range: (f64, f64)) -> Self {
        Self {
            n_train: n_mixtures,
            n_valid: (n_mixtures / 5).max(1),
            n_test: (2 * n_mixtures / 5).max(1),
            n_sources,
            chunk_len,
            seed,
            snr_range,
            duration_s: 4.0,
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Valid => self.n_valid,
            Split::Test => self.n_test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 {
            return Err(Error::invalid("need at least one training mixture"));
        }
        if self.chunk_len < 10 {
            return Err(Error::invalid(format!("chunk length {} below 10 frames", self.chunk_len)));
        }
        if !(2..=3).contains(&self.n_sources) {
            return Err(Error::invalid(format!("{} sources; only 2 or 3 supported", self.n_sources)));
        }
        let (lo, hi) = self.snr_range;
        if !(lo <= hi) {
            return Err(Error::invalid(format!("SNR range [{lo}, {hi}] is empty")));
        }
        let frames = signal::n_frames((self.duration_s * SAMPLE_RATE as f64) as usize, WINDOW_LEN, HOP);
        if frames < self.chunk_len {
            return Err(Error::invalid(format!(
                "{} s mixtures have {frames} frames, fewer than one {}-frame chunk",
                self.duration_s, self.chunk_len
            )));
        }
        if self.count(Split::Train).max(self.n_valid).max(self.n_test) >= 1 << 18 {
            return Err(Error::invalid("too many mixtures per split"));
        }
        Ok(())
    }
}

/// Seed of source `c` of mixture `index`. The split tag occupies the top
/// byte, so seed sets of different splits never intersect.
pub fn source_seed(split: Split, dataset_seed: u64, index: usize, c: usize) -> u64 {
    (split.tag() << 56) | ((dataset_seed & 0xFFFF_FFFF) << 20) | ((index as u64) << 2) | c as u64
}

fn mixture_rng(split: Split, dataset_seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(source_seed(split, dataset_seed, index, 3))
}

/// Generates mixture `index` of `split`. Sources and mixture are already on
/// the 16-bit grid, and the mixture is exactly the sum of the sources.
pub fn generate_record(cfg: &DatasetConfig, split: Split, index: usize) -> Result<(MixtureRecord, Vec<SourceSpec>)> {
    let mut rng = mixture_rng(split, cfg.seed, index);
    let mut classes = VoiceClass::ALL.to_vec();
    classes.shuffle(&mut rng);
    classes.truncate(cfg.n_sources);
    let specs: Vec<SourceSpec> = classes
        .iter()
        .enumerate()
        .map(|(c, &class)| SourceSpec::random(class, source_seed(split, cfg.seed, index, c)))
        .collect();
    let waves = specs
        .iter()
        .map(|s| synthesize_source(s, cfg.duration_s))
        .collect::<Result<Vec<_>>>()?;
    let mut snr = vec![0.0];
    for _ in 1..cfg.n_sources {
        let (lo, hi) = cfg.snr_range;
        snr.push(if hi > lo { rng.gen_range(lo..hi) } else { lo });
    }
    let mut rec = mix(&waves, &snr)?;
    let peak = rec.mixture.samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let gain = if peak > 0.9 { 0.9 / peak } else { 1.0 };
    for s in &mut rec.sources {
        for x in &mut s.samples {
            *x = quantize_16bit(*x * gain);
        }
    }
    let len = rec.mixture.len();
    rec.mixture.samples = (0..len).map(|i| rec.sources.iter().map(|s| s.samples[i]).sum()).collect();
    rec.id = format!("{split}{index:05}");
    Ok((rec, specs))
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub n_sources: usize,
    pub snr_db: Vec<f64>,
    pub mixture: PathBuf,
    pub sources: Vec<PathBuf>,
    pub seeds: Vec<u64>,
    pub chunks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.txt";

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = format!(
            "# danet dataset\n# n_train={} n_valid={} n_test={} sources={} chunk_len={} seed={} snr_lo={} snr_hi={} duration_s={}\n",
            c.n_train, c.n_valid, c.n_test, c.n_sources, c.chunk_len, c.seed, c.snr_range.0, c.snr_range.1, c.duration_s
        );
        let join = |v: Vec<String>| v.join(",");
        for e in &self.entries {
            out.push_str(&format!(
                "id={} split={} sources={} snr_db={} mixture={} refs={} seeds={} chunks={}\n",
                e.id,
                e.split,
                e.n_sources,
                join(e.snr_db.iter().map(|x| x.to_string()).collect()),
                e.mixture.display(),
                join(e.sources.iter().map(|p| p.display().to_string()).collect()),
                join(e.seeds.iter().map(|s| s.to_string()).collect()),
                e.chunks
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = None;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let bad = |msg: String| Error::Format {
                format: "manifest",
                msg: format!("line {}: {msg}", lineno + 1),
            };
            let line = line.trim();
            if line.is_empty() || line == "# danet dataset" {
                continue;
            }
            let body = line.strip_prefix('#').map(str::trim);
            let mut kv = std::collections::HashMap::new();
            for tok in body.unwrap_or(line).split_whitespace() {
                let (k, v) = tok.split_once('=').ok_or_else(|| bad(format!("token {tok:?} is not key=value")))?;
                kv.insert(k, v);
            }
            let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("missing {k}")));
            fn num<T: FromStr>(s: &str, bad: impl Fn(String) -> Error) -> Result<T> {
                s.parse().map_err(|_| bad(format!("bad number {s:?}")))
            }
            if body.is_some() {
                config = Some(DatasetConfig {
                    n_train: num(get("n_train")?, bad)?,
                    n_valid: num(get("n_valid")?, bad)?,
                    n_test: num(get("n_test")?, bad)?,
                    n_sources: num(get("sources")?, bad)?,
                    chunk_len: num(get("chunk_len")?, bad)?,
                    seed: num(get("seed")?, bad)?,
                    snr_range: (num(get("snr_lo")?, bad)?, num(get("snr_hi")?, bad)?),
                    duration_s: num(get("duration_s")?, bad)?,
                });
                continue;
            }
            let list = |k: &str| -> Result<Vec<&str>> { Ok(get(k)?.split(',').collect()) };
            entries.push(ManifestEntry {
                id: get("id")?.to_string(),
                split: get("split")?.parse()?,
                n_sources: num(get("sources")?, bad)?,
                snr_db: list("snr_db")?.into_iter().map(|s| num(s, bad)).collect::<Result<_>>()?,
                mixture: PathBuf::from(get("mixture")?),
                sources: list("refs")?.into_iter().map(PathBuf::from).collect(),
                seeds: list("seeds")?.into_iter().map(|s| num(s, bad)).collect::<Result<_>>()?,
                chunks: num(get("chunks")?, bad)?,
            });
        }
        let config = config.ok_or_else(|| Error::Format {
            format: "manifest",
            msg: "missing configuration header".into(),
        })?;
        Ok(Self { config, entries })
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(Self::FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }
}

pub const NORM_STATS_FILE: &str = "norm_stats.bin";

pub fn norm_stats_to_file(stats: &NormStats, tf: &mut TensorFile) {
    tf.push("norm.mean", &[stats.mean.len()], &stats.mean);
    tf.push("norm.std", &[stats.std.len()], &stats.std);
}

pub fn norm_stats_from_file(tf: &TensorFile) -> Result<NormStats> {
    let mean = tf.get("norm.mean")?.to_f64();
    let std = tf.get("norm.std")?.to_f64();
    if mean.len() != std.len() {
        return Err(Error::shape("norm.mean and norm.std lengths differ"));
    }
    Ok(NormStats { mean, std })
}

fn chunk_path(split: Split, id: &str, j: usize) -> PathBuf {
    PathBuf::from("chunks").join(split.to_string()).join(format!("{id}_{j:03}.bin"))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes a complete dataset under `out`.
pub fn make_dataset(cfg: &DatasetConfig, out: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let out = out.as_ref();
    let jobs: Vec<(Split, usize)> = Split::ALL
        .iter()
        .flat_map(|&s| (0..cfg.count(s)).map(move |i| (s, i)))
        .collect();
    let generated: Vec<(Split, MixtureRecord, Vec<SourceSpec>, RecordSpectra)> = jobs
        .par_iter()
        .map(|&(split, i)| {
            let (rec, specs) = generate_record(cfg, split, i)?;
            let spectra = record_spectra(&rec)?;
            Ok((split, rec, specs, spectra))
        })
        .collect::<Result<_>>()?;

    let train_logs: Vec<Array2<f64>> = generated
        .iter()
        .filter(|g| g.0 == Split::Train)
        .map(|g| log_magnitude(&g.3.mixture))
        .collect();
    let stats = NormStats::from_log_magnitudes(&train_logs)?;
    drop(train_logs);

    create_dir(out)?;
    for split in Split::ALL {
        create_dir(&out.join("wav").join(split.to_string()))?;
        create_dir(&out.join("chunks").join(split.to_string()))?;
    }
    let mut stats_file = TensorFile::new();
    stats_file.set_meta("kind", "norm_stats");
    norm_stats_to_file(&stats, &mut stats_file);
    stats_file.write(out.join(NORM_STATS_FILE))?;

    let entries: Vec<ManifestEntry> = generated
        .par_iter()
        .map(|(split, rec, specs, spectra)| {
            let wav_dir = PathBuf::from("wav").join(split.to_string());
            let mixture = wav_dir.join(format!("{}_mix.wav", rec.id));
            signal::write_wav(out.join(&mixture), &rec.mixture)?;
            let mut sources = Vec::new();
            for (c, s) in rec.sources.iter().enumerate() {
                let p = wav_dir.join(format!("{}_s{c}.wav", rec.id));
                signal::write_wav(out.join(&p), s)?;
                sources.push(p);
            }
            let chunks = chunk_record(spectra, cfg.chunk_len, &stats)?;
            for (j, ch) in chunks.iter().enumerate() {
                ch.to_tensor_file(&rec.id, j)
                    .write(out.join(chunk_path(*split, &rec.id, j)))?;
            }
            Ok(ManifestEntry {
                id: rec.id.clone(),
                split: *split,
                n_sources: rec.n_sources(),
                snr_db: rec.snr_db.clone(),
                mixture,
                sources,
                seeds: specs.iter().map(|s| s.seed).collect(),
                chunks: chunks.len(),
            })
        })
        .collect::<Result<_>>()?;

    let manifest = Manifest {
        config: cfg.clone(),
        entries,
    };
    let path = out.join(Manifest::FILE);
    std::fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A dataset directory opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub stats: NormStats,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if !root.is_dir() {
            return Err(Error::io(
                &root,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        let manifest = Manifest::read(&root)?;
        let stats = norm_stats_from_file(&TensorFile::read(root.join(NORM_STATS_FILE))?)?;
        Ok(Self { root, manifest, stats })
    }

    pub fn n_sources(&self) -> usize {
        self.manifest.config.n_sources
    }

    pub fn record(&self, entry: &ManifestEntry) -> Result<MixtureRecord> {
        Ok(MixtureRecord {
            mixture: signal::read_wav(self.root.join(&entry.mixture))?,
            sources: entry
                .sources
                .iter()
                .map(|p| signal::read_wav(self.root.join(p)))
                .collect::<Result<_>>()?,
            snr_db: entry.snr_db.clone(),
            id: entry.id.clone(),
        })
    }

    pub fn records(&self, split: Split) -> Result<Vec<MixtureRecord>> {
        let entries: Vec<&ManifestEntry> = self.manifest.split(split).collect();
        entries.par_iter().map(|e| self.record(e)).collect()
    }

    /// Chunks of a split. The stored chunks are used when `chunk_len`
    /// matches the dataset's; any other length is re-cut from the WAVs.
    pub fn chunks(&self, split: Split, chunk_len: usize) -> Result<Vec<Chunk>> {
        let entries: Vec<&ManifestEntry> = self.manifest.split(split).collect();
        let per_entry: Vec<Vec<Chunk>> = if chunk_len == self.manifest.config.chunk_len {
            entries
                .par_iter()
                .map(|e| {
                    (0..e.chunks)
                        .map(|j| {
                            let tf = TensorFile::read(self.root.join(chunk_path(split, &e.id, j)))?;
                            Chunk::from_tensor_file(&tf, &self.stats)
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?
        } else {
            entries
                .par_iter()
                .map(|e| chunk_record(&record_spectra(&self.record(e)?)?, chunk_len, &self.stats))
                .collect::<Result<_>>()?
        };
        Ok(per_entry.into_iter().flatten().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn harmonic(f0: f64, seed: u64) -> SourceSpec {
        SourceSpec {
            kind: SourceKind::Harmonic,
            f0_trajectory: vec![f0],
            band: (0.0, 0.0),
            am_rate: 3.0,
            seed,
        }
    }

    #[test]
    fn synthesis_is_deterministic_and_normalised() {
        for class in VoiceClass::ALL {
            let spec = SourceSpec::random(class, 42);
            let a = synthesize_source(&spec, 1.0).unwrap();
            let b = synthesize_source(&spec, 1.0).unwrap();
            assert_eq!(a, b);
            assert!((a.rms() - SOURCE_RMS).abs() < 1e-6);
        }
    }

    #[test]
    fn harmonic_peaks_at_multiples_of_f0() {
        let w = synthesize_source(&harmonic(100.0, 1), 2.0).unwrap();
        // magnitude spectrum of the whole signal: 16000 points, 0.5 Hz bins
        let n = w.len();
        let mut buf: Vec<Complex64> = w.samples.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let mag: Vec<f64> = buf[..n / 2].iter().map(|c| c.norm()).collect();
        let hz_per_bin = 8000.0 / n as f64;
        // local peak picking: the strongest bins away from each other
        let mut peaks: Vec<usize> = (1..mag.len() - 1)
            .filter(|&k| mag[k] > mag[k - 1] && mag[k] >= mag[k + 1])
            .collect();
        peaks.sort_by(|&a, &b| mag[b].total_cmp(&mag[a]));
        let mut picked: Vec<f64> = Vec::new();
        for k in peaks {
            let hz = k as f64 * hz_per_bin;
            if picked.iter().all(|p| (p - hz).abs() > 20.0) {
                picked.push(hz);
            }
            if picked.len() == 5 {
                break;
            }
        }
        picked.sort_by(f64::total_cmp);
        for (i, hz) in picked.iter().enumerate() {
            assert!((hz - 100.0 * (i + 1) as f64).abs() < 2.0, "{picked:?}");
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(synthesize_source(&harmonic(50.0, 1), 1.0).is_err());
        assert!(synthesize_source(&harmonic(100.0, 1), 0.0).is_err());
        let noise = SourceSpec {
            kind: SourceKind::ModulatedNoise,
            f0_trajectory: vec![],
            band: (500.0, 4200.0),
            am_rate: 3.0,
            seed: 1,
        };
        assert!(synthesize_source(&noise, 1.0).is_err());
    }

    #[test]
    fn mixing_identities() {
        let s = synthesize_source(&harmonic(120.0, 3), 0.5).unwrap();
        let rec = mix(&[s.clone(), s.clone()], &[0.0, 0.0]).unwrap();
        for (m, x) in rec.mixture.samples.iter().zip(&s.samples) {
            assert!((m - 2.0 * x).abs() < 1e-15);
        }

        let n = synthesize_source(&SourceSpec::random(VoiceClass::Noise, 9), 0.5).unwrap();
        let rec = mix(&[s.clone(), n.clone()], &[0.0, 10.0]).unwrap();
        let ratio = rec.sources[1].power() / rec.sources[0].power();
        assert!((ratio - 0.1).abs() < 1e-9);
    }

    #[test]
    fn three_source_power_ratios() {
        let srcs: Vec<Waveform> = VoiceClass::ALL
            .iter()
            .enumerate()
            .map(|(i, &c)| synthesize_source(&SourceSpec::random(c, i as u64), 0.5).unwrap())
            .collect();
        let snr = [0.0, -5.0, 5.0];
        let rec = mix(&srcs, &snr).unwrap();
        // power meter on the returned scaled sources
        let p: Vec<f64> = rec
            .sources
            .iter()
            .map(|s| s.samples.iter().map(|x| x * x).sum::<f64>() / s.len() as f64)
            .collect();
        for i in 0..3 {
            for j in 0..3 {
                let measured = 10.0 * (p[i] / p[j]).log10();
                assert!((measured - (snr[j] - snr[i])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn silent_source_rejected() {
        let s = synthesize_source(&harmonic(120.0, 3), 0.1).unwrap();
        let z = Waveform::new(vec![0.0; s.len()], 8000).unwrap();
        assert!(matches!(mix(&[s, z], &[0.0, 3.0]), Err(Error::SilentSource(1))));
    }

    #[test]
    fn membership_rules() {
        let mut mags = Array3::zeros((2, 3, 2));
        mags.slice_mut(s![.., .., 1]).fill(1.0);
        let y = membership(&mags);
        assert!(y.y.column(1).iter().all(|&v| v == 1.0));

        let tie = Array3::from_elem((1, 1, 3), 0.5);
        assert_eq!(membership(&tie).label(0), 0);
    }

    #[test]
    fn membership_matches_argmax_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mags = Array3::from_shape_fn((4, 3, 2), |_| rng.gen_range(0.0..1.0));
        let y = membership(&mags);
        for f in 0..4 {
            for t in 0..3 {
                let want = if mags[[f, t, 1]] > mags[[f, t, 0]] { 1 } else { 0 };
                let row = y.y.row(t * 4 + f);
                assert_eq!(row.sum(), 1.0);
                assert_eq!(row[want], 1.0);
            }
        }
    }

    #[test]
    fn source_seeds_disjoint_across_splits() {
        let mut seen = HashSet::new();
        for split in Split::ALL {
            for i in 0..50 {
                for c in 0..3 {
                    assert!(seen.insert(source_seed(split, 7, i, c)));
                }
            }
        }
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = Manifest {
            config: DatasetConfig::with_mixtures(5, 2, 100, 3, (0.0, 10.0)),
            entries: vec![ManifestEntry {
                id: "train00000".into(),
                split: Split::Train,
                n_sources: 2,
                snr_db: vec![0.0, 3.5],
                mixture: "wav/train/train00000_mix.wav".into(),
                sources: vec!["a.wav".into(), "b.wav".into()],
                seeds: vec![1, 2],
                chunks: 4,
            }],
        };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn small_dataset_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = DatasetConfig::with_mixtures(10, 2, 100, 5, (0.0, 10.0));
        cfg.n_valid = 2;
        cfg.n_test = 2;
        let m = make_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(m.entries.len(), 14);
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        let chunks = ds.chunks(Split::Train, 100).unwrap();
        assert_eq!(chunks.len(), 40);
        for ch in &chunks {
            assert_eq!(ch.n_frames(), 100);
            assert!(ch.membership.y.rows().into_iter().all(|r| r.sum() == 1.0));
        }
        // the stored sources sum to the stored mixture
        for e in &m.entries {
            let rec = ds.record(e).unwrap();
            assert_eq!(rec.sources.len(), 2);
            for i in 0..rec.mixture.len() {
                let sum: f64 = rec.sources.iter().map(|s| s.samples[i]).sum();
                assert!((sum - rec.mixture.samples[i]).abs() <= 2.0 / 32768.0);
            }
        }
        // recomputing the chunks from the WAVs gives the stored ones (to f32)
        let recut = chunk_record(
            &record_spectra(&ds.record(&m.entries[0]).unwrap()).unwrap(),
            100,
            &ds.stats,
        )
        .unwrap();
        for (a, b) in recut.iter().zip(&chunks) {
            assert_eq!(a.membership, b.membership);
            for (p, q) in a.features.values.iter().zip(b.features.values.iter()) {
                assert!((p - q).abs() < 1e-5 * p.abs().max(1.0));
            }
        }
        let long = ds.chunks(Split::Train, 400).unwrap();
        assert_eq!(long.len(), 10);

        let dir2 = tempfile::tempdir().unwrap();
        let m2 = make_dataset(&cfg, dir2.path()).unwrap();
        assert_eq!(m.to_text(), m2.to_text());
    }
}
