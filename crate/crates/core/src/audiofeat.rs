//! 16 kHz waveforms to log10 mel-spectrograms, plus the STFT machinery the
//! vocoder shares.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_FFT: usize = 1024;
pub const HOP: usize = 256;
pub const WIN: usize = 1024;
pub const N_MELS: usize = 80;
pub const FMIN: f64 = 50.0;
pub const FMAX: f64 = 8000.0;
/// Magnitude floor before the log; `log10(1e-5) = -5`.
pub const MAG_FLOOR: f64 = 1e-5;
pub const LOG_FLOOR: f64 = -5.0;
pub const N_BINS: usize = N_FFT / 2 + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFiniteValue(i));
        }
        Ok(AudioClip {
            samples,
            rate: SAMPLE_RATE,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.rate)
    }
}

/// `[F × 80]` log10 mel magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Array2<f64>,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub rate: u32,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            n_fft: N_FFT,
            n_mels: N_MELS,
            fmin: FMIN,
            fmax: FMAX,
            rate: SAMPLE_RATE,
        }
    }
}

impl MelConfig {
    /// Center frequencies of the filters in Hz.
    pub fn centers(&self) -> Vec<f64> {
        let lo = hz_to_mel(self.fmin);
        let hi = hz_to_mel(self.fmax);
        let step = (hi - lo) / (self.n_mels + 1) as f64;
        (1..=self.n_mels).map(|i| mel_to_hz(lo + step * i as f64)).collect()
    }
}

/// Triangular filters on the mel scale, each scaled so its largest weight is 1.
/// Shape `[n_mels × (n_fft/2 + 1)]`.
pub fn mel_filterbank(cfg: &MelConfig) -> Result<Array2<f64>> {
    let nyquist = f64::from(cfg.rate) / 2.0;
    if !(cfg.fmin >= 0.0 && cfg.fmin < cfg.fmax) {
        return Err(Error::InvalidBand(format!(
            "fmin {} must be below fmax {}",
            cfg.fmin, cfg.fmax
        )));
    }
    if cfg.fmax > nyquist {
        return Err(Error::InvalidBand(format!(
            "fmax {} exceeds Nyquist {nyquist}",
            cfg.fmax
        )));
    }
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + step * i as f64))
        .collect();
    let n_bins = cfg.n_fft / 2 + 1;
    let bin_hz = f64::from(cfg.rate) / cfg.n_fft as f64;
    let mut fb = Array2::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let up = (f - left) / (center - left);
            let down = (right - f) / (right - center);
            fb[[m, k]] = up.min(down).max(0.0);
        }
        let peak = fb.row(m).fold(0.0f64, |a, &b| a.max(b));
        if peak <= 0.0 {
            return Err(Error::InvalidBand(format!(
                "filter {m} covers no FFT bin; use fewer mels or a larger FFT"
            )));
        }
        fb.row_mut(m).mapv_inplace(|w| w / peak);
    }
    Ok(fb)
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i.min(n - 1)]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|i| x[n.saturating_sub(2 + i)]));
    out
}

/// Short-time Fourier transform with shared plans.
pub struct Stft {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("n_fft", &self.n_fft)
            .field("hop", &self.hop)
            .finish()
    }
}

impl Default for Stft {
    fn default() -> Self {
        Stft::new(N_FFT, HOP)
    }
}

impl Stft {
    pub fn new(n_fft: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Stft {
            n_fft,
            hop,
            window: hann(n_fft),
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frame count for a signal of `len` samples under centered framing.
    pub fn n_frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    /// Centered (reflect-padded) Hann STFT, `[frames × bins]`.
    pub fn forward(&self, signal: &[f64]) -> Array2<Complex<f64>> {
        let padded = reflect_pad(signal, self.n_fft / 2);
        self.analyze(&padded, self.n_frames(signal.len()))
    }

    /// Uncentered STFT: frame `f` starts at sample `f * hop`, reading zeros
    /// past the end of `signal`.
    pub fn analyze(&self, signal: &[f64], frames: usize) -> Array2<Complex<f64>> {
        let bins = self.n_bins();
        let mut out = Array2::zeros((frames, bins));
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for f in 0..frames {
            let start = f * self.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                let x = signal.get(start + i).copied().unwrap_or(0.0);
                *b = Complex::new(x * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            for k in 0..bins {
                out[[f, k]] = buf[k];
            }
        }
        out
    }

    /// Framed length covered by `frames` uncentered frames.
    pub fn framed_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            self.n_fft + self.hop * (frames - 1)
        }
    }

    fn overlap_add(&self, spec: &Array2<Complex<f64>>, len: usize, place: impl Fn(usize) -> Option<usize>) -> Vec<f64> {
        let (frames, bins) = spec.dim();
        let mut acc = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let scale = 1.0 / self.n_fft as f64;
        for f in 0..frames {
            for k in 0..bins {
                buf[k] = spec[[f, k]];
            }
            for k in bins..self.n_fft {
                buf[k] = spec[[f, self.n_fft - k]].conj();
            }
            self.inverse.process(&mut buf);
            let start = f * self.hop;
            for i in 0..self.n_fft {
                let Some(j) = place(start + i) else {
                    continue;
                };
                let w = self.window[i];
                acc[j] += buf[i].re * scale * w;
                norm[j] += w * w;
            }
        }
        acc.iter()
            .zip(&norm)
            .map(|(&a, &n)| if n > 1e-10 { a / n } else { 0.0 })
            .collect()
    }

    /// Least-squares inverse of [`Stft::analyze`], [`Stft::framed_len`] samples long.
    pub fn synthesize(&self, spec: &Array2<Complex<f64>>) -> Vec<f64> {
        let len = self.framed_len(spec.nrows());
        self.overlap_add(spec, len, |j| (j < len).then_some(j))
    }

    /// Least-squares inverse of [`Stft::forward`] for a `len`-sample signal.
    /// Overlap-add contributions that land in the reflect padding are folded
    /// back onto the samples they mirror.
    pub fn inverse(&self, spec: &Array2<Complex<f64>>, len: usize) -> Vec<f64> {
        let pad = self.n_fft / 2;
        self.overlap_add(spec, len, |j| reflect_index(j, pad, len))
    }
}

/// Position in a `len`-sample signal of index `j` of its `pad`-sample
/// reflect-padded copy, or `None` past the padded end.
fn reflect_index(j: usize, pad: usize, len: usize) -> Option<usize> {
    if len == 0 {
        return None;
    }
    let i = j as isize - pad as isize;
    let last = len as isize - 1;
    let r = if i < 0 {
        -i
    } else if i > last {
        2 * last - i
    } else {
        i
    };
    (0..=last).contains(&r).then_some(r as usize)
}

/// Applies the filterbank to a magnitude matrix and takes the floored log10.
pub fn magnitude_to_log_mel(mag: &Array2<f64>, fb: &Array2<f64>) -> Array2<f64> {
    mag.dot(&fb.t()).mapv(|v| {
        if v > MAG_FLOOR {
            v.log10()
        } else {
            LOG_FLOOR
        }
    })
}

/// Extracts log-mel frames: centered Hann STFT magnitude → mel filterbank →
/// floor at 1e-5 → log10.
pub struct MelExtractor {
    stft: Stft,
    filterbank: Array2<f64>,
}

impl MelExtractor {
    pub fn new() -> Result<Self> {
        Ok(MelExtractor {
            stft: Stft::default(),
            filterbank: mel_filterbank(&MelConfig::default())?,
        })
    }

    pub fn filterbank(&self) -> &Array2<f64> {
        &self.filterbank
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn magnitude(&self, samples: &[f64]) -> Array2<f64> {
        self.stft.forward(samples).mapv(|c| c.norm())
    }

    pub fn wav_to_mel(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        if clip.rate != SAMPLE_RATE {
            return Err(Error::BadAudio(format!(
                "sample rate {} (expected {SAMPLE_RATE})",
                clip.rate
            )));
        }
        if clip.samples.len() < WIN {
            return Err(Error::TooShort {
                len: clip.samples.len(),
                min: WIN,
            });
        }
        let mag = self.magnitude(&clip.samples);
        Ok(MelSpectrogram {
            frames: magnitude_to_log_mel(&mag, &self.filterbank),
        })
    }
}

pub fn wav_to_mel(clip: &AudioClip) -> Result<MelSpectrogram> {
    MelExtractor::new()?.wav_to_mel(clip)
}

/// Drops leading and trailing samples quieter than `threshold_db` dBFS.
pub fn trim_silence(samples: &[f64], threshold_db: f64) -> &[f64] {
    let thr = 10f64.powf(threshold_db / 20.0);
    let start = samples.iter().position(|s| s.abs() > thr);
    let end = samples.iter().rposition(|s| s.abs() > thr);
    match (start, end) {
        (Some(s), Some(e)) => &samples[s..=e],
        _ => &samples[..0],
    }
}

/// Reads a 16-bit PCM mono 16 kHz WAV file.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::BadAudio(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
        || spec.sample_rate != SAMPLE_RATE
    {
        return Err(Error::BadAudio(format!(
            "{}: need mono 16-bit PCM at {SAMPLE_RATE} Hz, found {} ch / {} bit / {} Hz",
            path.display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_rate
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::BadAudio(format!("{}: {e}", path.display())))?;
    AudioClip::new(samples)
}

/// Writes 16-bit PCM mono at the clip's rate, clipping to [-1, 1].
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut bytes = std::io::Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut bytes, spec)
            .map_err(|e| Error::BadAudio(e.to_string()))?;
        for &s in &clip.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            w.write_sample(v).map_err(|e| Error::BadAudio(e.to_string()))?;
        }
        w.finalize().map_err(|e| Error::BadAudio(e.to_string()))?;
    }
    crate::featalign::atomic_write(path, &bytes.into_inner())
}

/// Index of the largest value in a row.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}
