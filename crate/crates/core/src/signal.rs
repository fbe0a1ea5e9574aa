//! Waveform I/O and the STFT front-end.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::{Error, Result};

/// Sample rate every file entering or leaving the pipeline must use.
pub const SAMPLE_RATE: u32 = 8000;
/// 32 ms at 8 kHz.
pub const WINDOW_LEN: usize = 256;
/// 8 ms at 8 kHz.
pub const HOP: usize = 64;
/// Floor added to magnitudes before taking the log.
pub const LOG_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("waveform"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }
}

/// Complex STFT, `F x T` with `F = window_len / 2 + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub bins: Array2<Complex64>,
    pub frame_hop: usize,
    pub window_len: usize,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn n_freq(&self) -> usize {
        self.bins.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.bins.ncols()
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.bins.mapv(|c| c.norm())
    }

    /// Length of the zero-padded signal the frames cover.
    pub fn padded_len(&self) -> usize {
        padded_len(self.n_frames(), self.window_len, self.frame_hop)
    }
}

/// Per-frequency normalisation statistics for log-magnitude features.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Accumulates mean and (population) standard deviation per frequency
    /// row over a collection of raw log-magnitude matrices.
    pub fn from_log_magnitudes<'a, I>(mats: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Array2<f64>>,
    {
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for m in mats {
            if sum.is_empty() {
                sum = vec![0.0; m.nrows()];
                sum_sq = vec![0.0; m.nrows()];
            } else if m.nrows() != sum.len() {
                return Err(Error::shape(format!(
                    "log-magnitude rows {} vs {}",
                    m.nrows(),
                    sum.len()
                )));
            }
            for (f, row) in m.rows().into_iter().enumerate() {
                for &x in row {
                    sum[f] += x;
                    sum_sq[f] += x * x;
                }
            }
            count += m.ncols();
        }
        if count == 0 {
            return Err(Error::invalid("no frames to compute statistics from"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sum_sq
            .iter()
            .zip(&mean)
            .map(|(s2, m)| (s2 / n - m * m).max(0.0).sqrt())
            .collect();
        let stats = Self { mean, std };
        stats.validate()?;
        Ok(stats)
    }

    pub fn n_freq(&self) -> usize {
        self.mean.len()
    }

    fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::shape("norm stats mean/std length differ"));
        }
        if let Some(f) = self.std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::DegenerateBand(f));
        }
        Ok(())
    }
}

/// Normalised log-magnitude features, `F x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
    pub norm_stats: NormStats,
}

pub fn sqrt_hann(len: usize) -> Vec<f64> {
    // periodic Hann, so that shifted copies overlap-add to a constant
    (0..len)
        .map(|n| (0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos()).sqrt())
        .collect()
}

pub fn n_frames(len: usize, window_len: usize, hop: usize) -> usize {
    if len <= window_len {
        1
    } else {
        (len - window_len).div_ceil(hop) + 1
    }
}

pub fn padded_len(frames: usize, window_len: usize, hop: usize) -> usize {
    (frames - 1) * hop + window_len
}

fn check_geometry(window_len: usize, hop: usize) -> Result<()> {
    if !window_len.is_power_of_two() || window_len < 2 {
        return Err(Error::invalid(format!(
            "window length {window_len} is not a power of two"
        )));
    }
    if hop == 0 || window_len % hop != 0 {
        return Err(Error::invalid(format!(
            "hop {hop} does not divide window length {window_len}"
        )));
    }
    Ok(())
}

pub fn stft(w: &Waveform, window_len: usize, hop: usize) -> Result<ComplexSpectrogram> {
    check_geometry(window_len, hop)?;
    if w.samples.len() < window_len {
        return Err(Error::SignalTooShort {
            len: w.samples.len(),
            window: window_len,
        });
    }
    if w.samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("stft input"));
    }
    let frames = n_frames(w.samples.len(), window_len, hop);
    let n_freq = window_len / 2 + 1;
    let window = sqrt_hann(window_len);
    let fft = FftPlanner::new().plan_fft_forward(window_len);

    let mut bins = Array2::zeros((n_freq, frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); window_len];
    for t in 0..frames {
        let start = t * hop;
        for (n, slot) in buf.iter_mut().enumerate() {
            let x = w.samples.get(start + n).copied().unwrap_or(0.0);
            *slot = Complex64::new(x * window[n], 0.0);
        }
        fft.process(&mut buf);
        for f in 0..n_freq {
            bins[[f, t]] = buf[f];
        }
    }
    Ok(ComplexSpectrogram {
        bins,
        frame_hop: hop,
        window_len,
        sample_rate: w.sample_rate,
    })
}

/// Overlap-add resynthesis. Each output sample is divided by the summed
/// squared window at that position, which is constant (= 2 for a quarter
/// hop) away from the edges.
pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform> {
    check_geometry(s.window_len, s.frame_hop)?;
    let n_freq = s.window_len / 2 + 1;
    if s.n_freq() != n_freq {
        return Err(Error::shape(format!(
            "spectrogram has {} rows, window {} implies {}",
            s.n_freq(),
            s.window_len,
            n_freq
        )));
    }
    let frames = s.n_frames();
    if frames == 0 {
        return Err(Error::invalid("spectrogram has zero frames"));
    }
    let n = s.window_len;
    let window = sqrt_hann(n);
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let out_len = padded_len(frames, n, s.frame_hop);
    let mut out = vec![0.0; out_len];
    let mut norm = vec![0.0; out_len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..frames {
        for f in 0..n_freq {
            buf[f] = s.bins[[f, t]];
        }
        for f in n_freq..n {
            buf[f] = s.bins[[n - f, t]].conj();
        }
        // DC and Nyquist bins of a real signal are real
        buf[0].im = 0.0;
        buf[n / 2].im = 0.0;
        ifft.process(&mut buf);
        let start = t * s.frame_hop;
        for k in 0..n {
            out[start + k] += buf[k].re / n as f64 * window[k];
            norm[start + k] += window[k] * window[k];
        }
    }
    for (x, w2) in out.iter_mut().zip(&norm) {
        if *w2 > 1e-12 {
            *x /= w2;
        } else {
            *x = 0.0;
        }
    }
    Waveform::new(out, s.sample_rate)
}

/// `log(|X| + eps)` without normalisation.
pub fn log_magnitude(s: &ComplexSpectrogram) -> Array2<f64> {
    s.bins.mapv(|c| (c.norm() + LOG_EPS).ln())
}

/// Normalised log-magnitude features. Without `stats` the statistics are
/// computed from `s` itself and returned alongside the values.
pub fn log_magnitude_features(
    s: &ComplexSpectrogram,
    stats: Option<&NormStats>,
) -> Result<FeatureMatrix> {
    let raw = log_magnitude(s);
    let stats = match stats {
        Some(st) => {
            st.validate()?;
            if st.n_freq() != raw.nrows() {
                return Err(Error::shape(format!(
                    "norm stats cover {} bands, spectrogram has {}",
                    st.n_freq(),
                    raw.nrows()
                )));
            }
            st.clone()
        }
        None => NormStats::from_log_magnitudes([&raw])?,
    };
    let mut values = raw;
    for (f, mut row) in values.rows_mut().into_iter().enumerate() {
        let (m, sd) = (stats.mean[f], stats.std[f]);
        row.mapv_inplace(|x| (x - m) / sd);
    }
    Ok(FeatureMatrix {
        values,
        norm_stats: stats,
    })
}

/// Rounds to the 16-bit PCM grid used by [`write_wav`].
pub fn quantize_16bit(x: f64) -> f64 {
    to_pcm(x) as f64 / 32768.0
}

fn to_pcm(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Wav(format!(
            "{}: expected mono, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Wav(format!(
            "{}: expected 16-bit PCM, found {:?} {}-bit",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Wav(format!(
            "{}: expected {SAMPLE_RATE} Hz, found {} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    Waveform::new(samples, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    if w.sample_rate != SAMPLE_RATE {
        return Err(Error::Wav(format!(
            "{}: refusing to write {} Hz audio, expected {SAMPLE_RATE} Hz",
            path.display(),
            w.sample_rate
        )));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| Error::Wav(format!("{}: {e}", path.display()));
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &x in &w.samples {
        writer.write_sample(to_pcm(x)).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}
