//! Signal-quality and latency metrology.
//!
//! THD+N is computed the way the bench measurement defines it: fit an
//! analytical sine `A·sin(2πf·t + φ)` to the sampled record by damped
//! Gauss-Newton least squares, take the residual as the noise-plus-distortion
//! term, and report `100/A · √(Σr²/N)` in percent. Band-limited variants
//! brick-wall the residual in the Fourier domain (bins above the band edge
//! zeroed) before applying the same formula, so narrower bands can only
//! shrink the number.
//!
//! The latency harness replays the staging loop over the virtual bus and
//! reports per-iteration durations from the calibrated transfer model.

use crate::bus::{BusError, ConfigRequest, LatencyModel, Topology, VirtualBus};
use crate::generator::Command;
use crate::table::{encode, FrequencyTable};
use rustfft::{num_complex::Complex, FftPlanner};
use std::f64::consts::PI;
use thiserror::Error;

/// Default sampling interval of the capture path (200 kHz).
pub const DEFAULT_DT: f64 = 5e-6;

#[derive(Debug, Error, PartialEq)]
pub enum MetrologyError {
    #[error("signal needs at least 64 samples, got {0}")]
    TooFewSamples(usize),
    #[error("sampling interval must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("frequency hint {0} Hz outside (0, Nyquist)")]
    InvalidHint(f64),
    #[error("band edge {edge} Hz above Nyquist {nyquist} Hz")]
    BandAboveNyquist { edge: f64, nyquist: f64 },
    #[error("bus error during the measurement loop: {0}")]
    Bus(#[from] BusError),
}

/// A uniformly sampled real signal.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSignal {
    pub samples: Vec<f64>,
    pub dt: f64,
}

impl SampledSignal {
    pub fn new(samples: Vec<f64>, dt: f64) -> Result<Self, MetrologyError> {
        if samples.len() < 64 {
            return Err(MetrologyError::TooFewSamples(samples.len()));
        }
        if !(dt > 0.0) {
            return Err(MetrologyError::NonPositiveDt(dt));
        }
        Ok(Self { samples, dt })
    }

    pub fn nyquist(&self) -> f64 {
        0.5 / self.dt
    }

    /// The same signal with its mean removed (the sine model has no DC term).
    pub fn centered(&self) -> Self {
        let mean = self.samples.iter().sum::<f64>() / self.samples.len() as f64;
        Self {
            samples: self.samples.iter().map(|s| s - mean).collect(),
            dt: self.dt,
        }
    }

    /// Loads little-endian unsigned 16-bit samples (the generator's raw
    /// capture format).
    pub fn from_raw_u16_le(bytes: &[u8], dt: f64) -> Result<Self, MetrologyError> {
        let samples = bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
            .collect();
        Self::new(samples, dt)
    }
}

// ── Sine fitting ────────────────────────────────────────────────────────────

/// Result of the three-parameter sine fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SineFit {
    /// Fitted amplitude, ≥ 0 (sign folded into the phase).
    pub amplitude: f64,
    pub frequency: f64,
    /// Phase in radians, normalized to (−π, π].
    pub phase: f64,
    /// Final cost divided by the sample count: `Σr²/N`.
    pub residual_power: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl SineFit {
    pub fn model(&self, t: f64) -> f64 {
        self.amplitude * (2.0 * PI * self.frequency * t + self.phase).sin()
    }
}

fn sine_cost(sig: &SampledSignal, a: f64, f: f64, phi: f64) -> f64 {
    let w = 2.0 * PI * f * sig.dt;
    sig.samples
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            let r = u - a * (w * i as f64 + phi).sin();
            r * r
        })
        .sum()
}

fn solve3(mut m: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        b.swap(col, piv);
        for row in 0..3 {
            if row == col {
                continue;
            }
            let k = m[row][col] / m[col][col];
            for c in col..3 {
                m[row][c] -= k * m[col][c];
            }
            b[row] -= k * b[col];
        }
    }
    Some([b[0] / m[0][0], b[1] / m[1][1], b[2] / m[2][2]])
}

/// Linear least squares on the sin/cos basis at a fixed frequency; the
/// starting point for the nonlinear refinement.
fn linear_init(sig: &SampledSignal, f: f64) -> (f64, f64) {
    let w = 2.0 * PI * f * sig.dt;
    let (mut ss, mut cc, mut sc, mut us, mut uc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &u) in sig.samples.iter().enumerate() {
        let (s, c) = (w * i as f64).sin_cos();
        ss += s * s;
        cc += c * c;
        sc += s * c;
        us += u * s;
        uc += u * c;
    }
    let det = ss * cc - sc * sc;
    if det.abs() < 1e-300 {
        return (0.0, 0.0);
    }
    let a = (us * cc - uc * sc) / det;
    let b = (uc * ss - us * sc) / det;
    ((a * a + b * b).sqrt(), b.atan2(a))
}

/// Fits `A·sin(2πf·t + φ)` to the signal by damped Gauss-Newton, starting
/// from a linear regression at `f0_hint`. Refines until the relative cost
/// change drops below 1e-12 or 100 iterations pass; a non-converged fit is
/// returned with `converged == false` rather than as an error.
///
/// The hint may be off by up to 20%. Over a long record even a small
/// frequency error makes the sin/cos basis at the hint nearly orthogonal to
/// the tone, which would start Gauss-Newton in the zero-amplitude saddle; if
/// the hint basis explains less than half of the signal energy, candidate
/// frequencies across the ±20% window (spaced half a coherence bin apart)
/// are scanned for the best linear fit first.
pub fn fit_sine(sig: &SampledSignal, f0_hint: f64) -> Result<SineFit, MetrologyError> {
    if !(f0_hint > 0.0 && f0_hint < sig.nyquist()) {
        return Err(MetrologyError::InvalidHint(f0_hint));
    }
    let n = sig.samples.len();
    let signal_power: f64 = sig.samples.iter().map(|s| s * s).sum();
    let mut start_f = f0_hint;
    let (mut a0, mut phi0) = linear_init(sig, f0_hint);
    if a0 * a0 * n as f64 / 2.0 < 0.5 * signal_power {
        let half_bin = 0.5 / (n as f64 * sig.dt);
        let lo = (0.8 * f0_hint).max(half_bin);
        let hi = (1.2 * f0_hint).min(sig.nyquist() * 0.999);
        let steps = (((hi - lo) / half_bin).ceil() as usize).clamp(2, 4096);
        let mut best = (a0.abs(), f0_hint, phi0);
        for i in 0..=steps {
            let f = lo + (hi - lo) * i as f64 / steps as f64;
            let (a, phi) = linear_init(sig, f);
            if a.abs() > best.0 {
                best = (a.abs(), f, phi);
            }
        }
        a0 = best.0;
        start_f = best.1;
        phi0 = best.2;
    }
    let (mut a, mut f, mut phi) = (a0, start_f, phi0);
    let mut cost = sine_cost(sig, a, f, phi);
    let mut lambda = 1e-6;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..100 {
        iterations += 1;
        // Normal equations JᵀJ δ = Jᵀr with J the model Jacobian.
        let w = 2.0 * PI * f * sig.dt;
        let mut jtj = [[0.0f64; 3]; 3];
        let mut jtr = [0.0f64; 3];
        for (i, &u) in sig.samples.iter().enumerate() {
            let t = i as f64 * sig.dt;
            let (s, c) = (w * i as f64 + phi).sin_cos();
            let j = [s, a * 2.0 * PI * t * c, a * c];
            let r = u - a * s;
            for row in 0..3 {
                for col in row..3 {
                    jtj[row][col] += j[row] * j[col];
                }
                jtr[row] += j[row] * r;
            }
        }
        for row in 1..3 {
            for col in 0..row {
                jtj[row][col] = jtj[col][row];
            }
        }
        // Levenberg damping with retry until a step is accepted.
        let mut accepted = false;
        for _ in 0..16 {
            let mut m = jtj;
            for d in 0..3 {
                m[d][d] += lambda * jtj[d][d].max(1e-300);
            }
            let Some(delta) = solve3(m, jtr) else {
                lambda *= 10.0;
                continue;
            };
            let (na, nf, nphi) = (a + delta[0], f + delta[1], phi + delta[2]);
            if !(nf > 0.0 && nf < sig.nyquist()) {
                lambda *= 10.0;
                continue;
            }
            let new_cost = sine_cost(sig, na, nf, nphi);
            if new_cost <= cost {
                let rel_change = if cost > 0.0 {
                    (cost - new_cost) / cost
                } else {
                    0.0
                };
                a = na;
                f = nf;
                phi = nphi;
                cost = new_cost;
                lambda = (lambda / 10.0).max(1e-14);
                accepted = true;
                if rel_change < 1e-12 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No admissible step improves the cost: a (local) minimum.
            converged = true;
        }
        if converged {
            break;
        }
    }
    if a < 0.0 {
        a = -a;
        phi += PI;
    }
    phi = phi.rem_euclid(2.0 * PI);
    if phi > PI {
        phi -= 2.0 * PI;
    }
    Ok(SineFit {
        amplitude: a,
        frequency: f,
        phase: phi,
        residual_power: cost / n as f64,
        converged,
        iterations,
    })
}

/// Coarse frequency estimate from the FFT peak (with parabolic interpolation
/// on log magnitudes), for signals without a known target.
pub fn estimate_frequency(sig: &SampledSignal) -> f64 {
    let n = sig.samples.len();
    let mut buf: Vec<Complex<f64>> = sig
        .centered()
        .samples
        .iter()
        .map(|&s| Complex::new(s, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let peak = (1..n / 2)
        .max_by(|&i, &j| buf[i].norm().total_cmp(&buf[j].norm()))
        .unwrap_or(1);
    let mag = |k: usize| buf[k].norm().max(1e-300).ln();
    let (ym, y0, yp) = (mag(peak - 1), mag(peak), mag(peak + 1));
    let denom = ym - 2.0 * y0 + yp;
    let offset = if denom.abs() > 1e-12 {
        0.5 * (ym - yp) / denom
    } else {
        0.0
    };
    (peak as f64 + offset.clamp(-0.5, 0.5)) / (n as f64 * sig.dt)
}

/// Fit with the frequency hint taken from the FFT peak.
pub fn fit_sine_auto(sig: &SampledSignal) -> Result<SineFit, MetrologyError> {
    fit_sine(sig, estimate_frequency(sig))
}

// ── THD+N ───────────────────────────────────────────────────────────────────

/// Noise evaluation band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Band {
    /// Keep residual content up to and including this edge frequency.
    UpTo(f64),
    /// The raw residual, limited only by Nyquist.
    Full,
}

/// THD+N in percent over one band: `100/A · √(mean(r_band²))` where `r` is
/// the fit residual, brick-wall limited in the Fourier domain.
pub fn thdn_band(sig: &SampledSignal, fit: &SineFit, band: Band) -> Result<f64, MetrologyError> {
    let n = sig.samples.len();
    let mut residual: Vec<f64> = sig
        .samples
        .iter()
        .enumerate()
        .map(|(i, &u)| u - fit.model(i as f64 * sig.dt))
        .collect();
    if let Band::UpTo(edge) = band {
        let nyquist = sig.nyquist();
        if edge > nyquist {
            return Err(MetrologyError::BandAboveNyquist { edge, nyquist });
        }
        let mut planner = FftPlanner::new();
        let mut buf: Vec<Complex<f64>> = residual.iter().map(|&r| Complex::new(r, 0.0)).collect();
        planner.plan_fft_forward(n).process(&mut buf);
        let df = 1.0 / (n as f64 * sig.dt);
        for (k, v) in buf.iter_mut().enumerate() {
            let f = k.min(n - k) as f64 * df;
            if f > edge {
                *v = Complex::new(0.0, 0.0);
            }
        }
        planner.plan_fft_inverse(n).process(&mut buf);
        for (r, v) in residual.iter_mut().zip(buf) {
            *r = v.re / n as f64;
        }
    }
    let mean_sq = residual.iter().map(|r| r * r).sum::<f64>() / n as f64;
    Ok(100.0 / fit.amplitude * mean_sq.sqrt())
}

/// The standard report: full band plus the 20 kHz (acoustic) and 1 kHz
/// (tactile) bands. Band edges above Nyquist fall back to the full band —
/// with the default 5 µs sampling width a 1 MHz band cannot be realized, and
/// the aliasing caveat belongs to the report, not the analyzer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThdnReport {
    pub target_freq: f64,
    pub measured_freq: f64,
    pub thdn_full: f64,
    pub thdn_20k: f64,
    pub thdn_1k: f64,
}

pub fn thdn_report(
    sig: &SampledSignal,
    fit: &SineFit,
    target_freq: f64,
) -> Result<ThdnReport, MetrologyError> {
    let full = thdn_band(sig, fit, Band::Full)?;
    let band_or_full = |edge: f64| -> Result<f64, MetrologyError> {
        match thdn_band(sig, fit, Band::UpTo(edge)) {
            Err(MetrologyError::BandAboveNyquist { .. }) => Ok(full),
            other => other,
        }
    };
    Ok(ThdnReport {
        target_freq,
        measured_freq: fit.frequency,
        thdn_full: full,
        thdn_20k: band_or_full(20_000.0)?,
        thdn_1k: band_or_full(1_000.0)?,
    })
}

// ── Latency measurement harness ─────────────────────────────────────────────

/// Durations of the staging loop over many iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopStats {
    pub iterations: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Replays the host's staging loop: per iteration, one addressed package per
/// board (times `tables_per_board`), timed by the bus's latency model.
/// Runs at least 500 iterations.
pub fn measure_transfer_loop(
    topology: &Topology,
    tables_per_board: usize,
    clock: f64,
    iterations: usize,
) -> Result<LoopStats, MetrologyError> {
    let iterations = iterations.max(500);
    let mut topo = topology.clone();
    topo.bulk_clock = clock;
    let mut bus = VirtualBus::new(&topo, LatencyModel::reference())?;
    let registry = bus.enumerate()?;
    for e in &registry {
        bus.config_command(
            e.config_addr,
            ConfigRequest::Apply(Command::SetSamplingRate(25_000.0)),
        )?;
    }
    let pkg = encode(&FrequencyTable::silent(), 25_000.0).expect("silent table encodes");
    let (mut min, mut max, mut sum) = (f64::INFINITY, 0.0f64, 0.0);
    for _ in 0..iterations {
        let mut loop_time = 0.0;
        for e in &registry {
            bus.select(e.dip)?;
            for _ in 0..tables_per_board.max(1) {
                loop_time += bus.bulk_write(&pkg)?.duration;
            }
        }
        min = min.min(loop_time);
        max = max.max(loop_time);
        sum += loop_time;
    }
    Ok(LoopStats {
        iterations,
        mean: sum / iterations as f64,
        min,
        max,
    })
}
