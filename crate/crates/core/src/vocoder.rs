//! Mel inversion and Griffin-Lim phase reconstruction.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::audiofeat::{AudioClip, MelExtractor, MelSpectrogram, Stft};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GriffinLimConfig {
    pub iterations: usize,
    pub momentum: f64,
    /// Exponent applied to the linear magnitude before phase reconstruction.
    pub power: f64,
}

impl Default for GriffinLimConfig {
    fn default() -> Self {
        GriffinLimConfig {
            iterations: 60,
            momentum: 0.99,
            power: 1.2,
        }
    }
}

impl GriffinLimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::ConfigError("griffin-lim needs at least one iteration".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::ConfigError(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.power <= 0.0 {
            return Err(Error::ConfigError(format!("power {} must be positive", self.power)));
        }
        Ok(())
    }
}

/// Moore–Penrose pseudo-inverse of a filterbank, `[bins × mels]`.
pub fn pseudo_inverse(fb: &Array2<f64>) -> Result<Array2<f64>> {
    let (rows, cols) = fb.dim();
    let m = nalgebra::DMatrix::from_fn(rows, cols, |i, j| fb[[i, j]]);
    let pinv = m
        .pseudo_inverse(1e-10)
        .map_err(|e| Error::NumericalError(format!("pseudo-inverse failed: {e}")))?;
    Ok(Array2::from_shape_fn((cols, rows), |(i, j)| pinv[(i, j)]))
}

/// `10^mel · pinv(fb)ᵀ`, negatives clamped to zero. Returns `[F × bins]`.
pub fn mel_to_linear(mel: &MelSpectrogram, fb_pinv: &Array2<f64>) -> Result<Array2<f64>> {
    if mel.frames.ncols() != fb_pinv.ncols() {
        return Err(Error::ConfigError(format!(
            "mel has {} bins but the filterbank has {}",
            mel.frames.ncols(),
            fb_pinv.ncols()
        )));
    }
    let lin = mel.frames.mapv(|v| 10f64.powf(v)).dot(&fb_pinv.t());
    Ok(lin.mapv(|v| v.max(0.0)))
}

/// Result of a Griffin-Lim run.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// Peak-normalized to 0.95 (all zeros for an all-zero input).
    pub samples: Vec<f64>,
    /// `‖|STFT(y_i)| − M‖ / ‖M‖` after each iteration, before normalization.
    pub spectral_convergence: Vec<f64>,
}

fn spectral_convergence(rebuilt: &Array2<Complex<f64>>, target: &Array2<f64>, target_norm: f64) -> f64 {
    let err: f64 = rebuilt
        .iter()
        .zip(target)
        .map(|(c, m)| (c.norm() - m).powi(2))
        .sum();
    err.sqrt() / target_norm
}

/// Fast Griffin-Lim (alternating projections with momentum) on `magnitude`
/// (`[frames × bins]`), starting from a seeded random phase. The iterate is the
/// whole framed signal; the centering pad is cut off only at the end.
pub fn griffin_lim(
    magnitude: &Array2<f64>,
    cfg: &GriffinLimConfig,
    stft: &Stft,
    seed: u64,
) -> Result<Reconstruction> {
    cfg.validate()?;
    if magnitude.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
        return Err(Error::NumericalError("magnitude must be finite and non-negative".into()));
    }
    if magnitude.ncols() != stft.n_bins() {
        return Err(Error::ShapeError(format!(
            "magnitude has {} bins, STFT expects {}",
            magnitude.ncols(),
            stft.n_bins()
        )));
    }
    let frames = magnitude.nrows();
    let len = stft.hop() * frames.saturating_sub(1);
    let norm = magnitude.iter().map(|m| m * m).sum::<f64>().sqrt();
    if norm == 0.0 || frames == 0 {
        return Ok(Reconstruction {
            samples: vec![0.0; len],
            spectral_convergence: vec![0.0; cfg.iterations],
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut angles = magnitude.mapv(|_| {
        let phi = rng.random::<f64>() * std::f64::consts::TAU;
        Complex::from_polar(1.0, phi)
    });
    let mut rebuilt: Array2<Complex<f64>> = Array2::zeros(magnitude.dim());
    let blend = cfg.momentum / (1.0 + cfg.momentum);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let prev = std::mem::replace(&mut rebuilt, Array2::zeros((0, 0)));
        let spec = &angles * &magnitude.mapv(|m| Complex::new(m, 0.0));
        rebuilt = stft.analyze(&stft.synthesize(&spec), frames);
        trace.push(spectral_convergence(&rebuilt, magnitude, norm));
        angles = if prev.is_empty() {
            rebuilt.clone()
        } else {
            &rebuilt - &prev.mapv(|c| c * blend)
        };
        angles.mapv_inplace(|c| {
            let n = c.norm();
            if n > 1e-16 {
                c / n
            } else {
                Complex::new(1.0, 0.0)
            }
        });
    }
    let spec = &angles * &magnitude.mapv(|m| Complex::new(m, 0.0));
    let pad = stft.n_fft() / 2;
    let mut samples = stft.synthesize(&spec)[pad..pad + len].to_vec();
    let peak = samples.iter().fold(0.0f64, |a, s| a.max(s.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|s| *s *= 0.95 / peak);
    }
    Ok(Reconstruction {
        samples,
        spectral_convergence: trace,
    })
}

/// Log-mel frames to a waveform: pseudo-inverse filterbank, power, Griffin-Lim.
pub struct Vocoder {
    extractor: MelExtractor,
    fb_pinv: Array2<f64>,
    pub config: GriffinLimConfig,
}

impl Vocoder {
    pub fn new(config: GriffinLimConfig) -> Result<Self> {
        config.validate()?;
        let extractor = MelExtractor::new()?;
        let fb_pinv = pseudo_inverse(extractor.filterbank())?;
        Ok(Vocoder {
            extractor,
            fb_pinv,
            config,
        })
    }

    pub fn fb_pinv(&self) -> &Array2<f64> {
        &self.fb_pinv
    }

    pub fn mel_to_linear(&self, mel: &MelSpectrogram) -> Result<Array2<f64>> {
        mel_to_linear(mel, &self.fb_pinv)
    }

    pub fn vocode(&self, mel: &MelSpectrogram, seed: u64) -> Result<AudioClip> {
        let lin = self.mel_to_linear(mel)?.mapv(|m| m.powf(self.config.power));
        let rec = griffin_lim(&lin, &self.config, self.extractor.stft(), seed)?;
        AudioClip::new(rec.samples)
    }
}
