//! Analytic models of the two analog output stages and time-domain filtering.
//!
//! The first stage is the unity-gain Sallen-Key low-pass that reconstructs the
//! analog signal from a logic-level PWM output. The second is the H-bridge
//! output filter: a symmetric series-L network into the capacitive piezo load,
//! optionally damped by a series resistor.
//!
//! Both stages are second order with transfer functions
//!
//! ```text
//! Sallen-Key:  H(s) = 1 / (1 + 2 C2 R s + C1 C2 R^2 s^2)
//! H-bridge:    H(s) = 1 / (1 + 2 (R_L + R_d) C_p s + 2 L C_p s^2)
//! ```
//!
//! Time-domain application comes in two flavours: a bilinear transform with
//! prewarping at the natural frequency for arbitrary sampled waveforms, and an
//! exact piecewise-constant integrator for PWM edge streams (the segment
//! boundaries are known exactly, so no discretization error is introduced).

use num_complex::Complex64;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalogError {
    #[error("input {name} must be positive, got {value}")]
    NonPositiveInput { name: &'static str, value: f64 },
    #[error("transfer function is unstable or marginally stable")]
    UnstableFilter,
    #[error("operation supports denominator degree up to {max}, got {got}")]
    UnsupportedOrder { max: usize, got: usize },
    #[error("improper transfer function: numerator degree {num} > denominator degree {den}")]
    Improper { num: usize, den: usize },
    #[error("denominator is zero")]
    ZeroDenominator,
}

fn require_positive(name: &'static str, value: f64) -> Result<(), AnalogError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(AnalogError::NonPositiveInput { name, value })
    }
}

// ── Rational transfer functions ─────────────────────────────────────────────

/// A proper rational function of `s` with real coefficients, stored in
/// ascending powers: `num[0] + num[1] s + ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct RationalTransferFunction {
    num: Vec<f64>,
    den: Vec<f64>,
}

fn trim(mut c: Vec<f64>) -> Vec<f64> {
    while c.len() > 1 && c.last() == Some(&0.0) {
        c.pop();
    }
    c
}

impl RationalTransferFunction {
    pub fn new(num: Vec<f64>, den: Vec<f64>) -> Result<Self, AnalogError> {
        let num = trim(num);
        let den = trim(den);
        if den.iter().all(|&c| c == 0.0) {
            return Err(AnalogError::ZeroDenominator);
        }
        if num.len() > den.len() {
            return Err(AnalogError::Improper {
                num: num.len() - 1,
                den: den.len() - 1,
            });
        }
        Ok(Self { num, den })
    }

    /// Unity passthrough.
    pub fn identity() -> Self {
        Self {
            num: vec![1.0],
            den: vec![1.0],
        }
    }

    pub fn numerator(&self) -> &[f64] {
        &self.num
    }

    pub fn denominator(&self) -> &[f64] {
        &self.den
    }

    pub fn order(&self) -> usize {
        self.den.len() - 1
    }

    fn poly_eval(coeffs: &[f64], s: Complex64) -> Complex64 {
        coeffs
            .iter()
            .rev()
            .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * s + c)
    }

    /// Complex response at frequency `f` in Hz.
    pub fn response(&self, f: f64) -> Complex64 {
        let s = Complex64::new(0.0, 2.0 * PI * f);
        Self::poly_eval(&self.num, s) / Self::poly_eval(&self.den, s)
    }

    /// Natural (undamped) frequency in Hz, derived from the outermost
    /// denominator coefficients: `ω0 = (d0/dn)^(1/n)`.
    pub fn natural_frequency(&self) -> f64 {
        let n = self.order();
        if n == 0 {
            return 0.0;
        }
        (self.den[0] / self.den[n]).abs().powf(1.0 / n as f64) / (2.0 * PI)
    }

    /// Routh-Hurwitz check: all poles strictly in the left half-plane.
    pub fn is_stable(&self) -> bool {
        let d = &self.den;
        let n = d.len() - 1;
        if n == 0 {
            return true;
        }
        // Build the Routh array; any zero or sign change in the first column
        // means not strictly Hurwitz.
        let cols = n / 2 + 1;
        let mut rows: Vec<Vec<f64>> = vec![vec![0.0; cols + 1]; n + 1];
        for (i, &c) in d.iter().rev().enumerate() {
            rows[i % 2][i / 2] = c;
        }
        for r in 2..=n {
            for c in 0..cols {
                let a = rows[r - 2][0];
                let b = rows[r - 1][0];
                if b == 0.0 {
                    return false;
                }
                rows[r][c] = (b * rows[r - 2][c + 1] - a * rows[r - 1][c + 1]) / b;
            }
        }
        let first_sign = rows[0][0].signum();
        (0..=n).all(|r| rows[r][0] != 0.0 && rows[r][0].signum() == first_sign)
    }
}

/// Magnitude (dimensionless) and phase (degrees) of `tf` at `f` Hz.
pub fn evaluate(tf: &RationalTransferFunction, f: f64) -> (f64, f64) {
    let h = tf.response(f);
    (h.norm(), h.arg().to_degrees())
}

/// Logarithmically spaced Bode data: `(f, magnitude, phase_deg)` triples.
pub fn bode_points(
    tf: &RationalTransferFunction,
    f_lo: f64,
    f_hi: f64,
    points: usize,
) -> Vec<(f64, f64, f64)> {
    assert!(f_lo > 0.0 && f_hi > f_lo && points >= 2);
    let step = (f_hi / f_lo).ln() / (points - 1) as f64;
    (0..points)
        .map(|i| {
            let f = f_lo * (step * i as f64).exp();
            let (m, p) = evaluate(tf, f);
            (f, m, p)
        })
        .collect()
}

// ── Sallen-Key stage ────────────────────────────────────────────────────────

/// Defaults fix the damping: C1 = 15 nF, C2 = 10 nF gives Q ≈ 0.61.
pub const SALLEN_KEY_C1: f64 = 15e-9;
pub const SALLEN_KEY_C2: f64 = 10e-9;

/// Unity-gain Sallen-Key low-pass with equal resistors R1 = R2 = R.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SallenKeySpec {
    pub c1: f64,
    pub c2: f64,
    pub r: f64,
}

impl SallenKeySpec {
    pub fn new(c1: f64, c2: f64, r: f64) -> Result<Self, AnalogError> {
        require_positive("C1", c1)?;
        require_positive("C2", c2)?;
        require_positive("R", r)?;
        Ok(Self { c1, c2, r })
    }

    /// Undamped natural frequency `f0 = 1 / (2π √(C1 C2) R)`.
    pub fn natural_frequency(&self) -> f64 {
        1.0 / (2.0 * PI * (self.c1 * self.c2).sqrt() * self.r)
    }

    /// `Q = √(C1/C2) / 2`, independent of R.
    pub fn q_factor(&self) -> f64 {
        0.5 * (self.c1 / self.c2).sqrt()
    }
}

/// Picks R for a requested cutoff, using the rule of thumb `f0 ≈ fc`:
/// `R = 1 / (2π √(C1 C2) fc)`.
pub fn sallen_key_design(fc: f64, c1: f64, c2: f64) -> Result<SallenKeySpec, AnalogError> {
    require_positive("fc", fc)?;
    require_positive("C1", c1)?;
    require_positive("C2", c2)?;
    let r = 1.0 / (2.0 * PI * (c1 * c2).sqrt() * fc);
    SallenKeySpec::new(c1, c2, r)
}

/// `H(s) = 1 / (1 + 2 C2 R s + C1 C2 R² s²)`.
pub fn sallen_key_tf(spec: &SallenKeySpec) -> RationalTransferFunction {
    RationalTransferFunction::new(
        vec![1.0],
        vec![
            1.0,
            2.0 * spec.c2 * spec.r,
            spec.c1 * spec.c2 * spec.r * spec.r,
        ],
    )
    .expect("valid spec yields valid tf")
}

// ── H-bridge output filter ──────────────────────────────────────────────────

/// Series resistance of the stock inductor.
pub const HBRIDGE_DEFAULT_RL: f64 = 90.0;
/// Board supply limit.
pub const HBRIDGE_MAX_VDD: f64 = 200.0;

/// Symmetric RLC low-pass into the capacitive piezo load.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HBridgeFilterSpec {
    pub l: f64,
    pub r_l: f64,
    pub r_d: f64,
    pub c_p: f64,
    pub v_dd: f64,
}

impl HBridgeFilterSpec {
    pub fn new(l: f64, r_l: f64, r_d: f64, c_p: f64, v_dd: f64) -> Result<Self, AnalogError> {
        require_positive("L", l)?;
        require_positive("C_p", c_p)?;
        if r_l < 0.0 || r_d < 0.0 {
            return Err(AnalogError::NonPositiveInput {
                name: "R_L/R_d",
                value: r_l.min(r_d),
            });
        }
        if v_dd < 0.0 || v_dd > HBRIDGE_MAX_VDD {
            return Err(AnalogError::NonPositiveInput {
                name: "V_DD (0..=200 V)",
                value: v_dd,
            });
        }
        Ok(Self {
            l,
            r_l,
            r_d,
            c_p,
            v_dd,
        })
    }

    /// `f0 = 1 / (2π √(2 L C_p))`.
    pub fn natural_frequency(&self) -> f64 {
        1.0 / (2.0 * PI * (2.0 * self.l * self.c_p).sqrt())
    }

    /// `Q = √L / ((R_L + R_d) √(2 C_p))`.
    pub fn q_factor(&self) -> f64 {
        self.l.sqrt() / ((self.r_l + self.r_d) * (2.0 * self.c_p).sqrt())
    }
}

/// Inductance for a requested cutoff into load `C_p`:
/// `L = 1 / (2 C_p (2π fc)²)`.
pub fn hbridge_design(fc: f64, c_p: f64) -> Result<f64, AnalogError> {
    require_positive("fc", fc)?;
    require_positive("C_p", c_p)?;
    Ok(1.0 / (2.0 * c_p * (2.0 * PI * fc).powi(2)))
}

/// Damping resistor for a requested Q: `R_d = √L / (Q √(2 C_p)) − R_L`.
/// The inductor's own series resistance may already exceed the target
/// damping; a negative result clamps to zero and sets `clamped`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DampingChoice {
    pub r_d: f64,
    pub clamped: bool,
}

pub fn damping_for(q: f64, l: f64, c_p: f64, r_l: f64) -> Result<DampingChoice, AnalogError> {
    require_positive("Q", q)?;
    require_positive("L", l)?;
    require_positive("C_p", c_p)?;
    let r_d = l.sqrt() / (q * (2.0 * c_p).sqrt()) - r_l;
    Ok(DampingChoice {
        r_d: r_d.max(0.0),
        clamped: r_d < 0.0,
    })
}

/// `H(s) = 1 / (1 + 2 (R_L + R_d) C_p s + 2 L C_p s²)`.
pub fn hbridge_tf(spec: &HBridgeFilterSpec) -> RationalTransferFunction {
    RationalTransferFunction::new(
        vec![1.0],
        vec![
            1.0,
            2.0 * (spec.r_l + spec.r_d) * spec.c_p,
            2.0 * spec.l * spec.c_p,
        ],
    )
    .expect("valid spec yields valid tf")
}

// ── Time-domain application ─────────────────────────────────────────────────

/// Discrete biquad (or lower order) filter obtained from `tf` by the bilinear
/// transform with prewarping at the natural frequency.
#[derive(Debug, Clone)]
pub struct DiscreteFilter {
    b: Vec<f64>,
    a: Vec<f64>, // a[0] == 1
    state: Vec<f64>,
}

impl DiscreteFilter {
    /// Bilinear transform `s → k (1 − z⁻¹)/(1 + z⁻¹)` with
    /// `k = ω0 / tan(ω0 T / 2)` so the response is exact at the natural
    /// frequency (plain `2/T` when the tf has no dynamics).
    pub fn bilinear(tf: &RationalTransferFunction, dt: f64) -> Result<Self, AnalogError> {
        if !(dt > 0.0) {
            return Err(AnalogError::NonPositiveInput {
                name: "dt",
                value: dt,
            });
        }
        if !tf.is_stable() {
            return Err(AnalogError::UnstableFilter);
        }
        let w0 = 2.0 * PI * tf.natural_frequency();
        let k = if w0 > 0.0 && w0 * dt / 2.0 < PI / 2.0 {
            w0 / (w0 * dt / 2.0).tan()
        } else {
            2.0 / dt
        };
        let n = tf.denominator().len() - 1;
        // Substitute s^m -> k^m (1 - z)^m (1 + z)^(n-m), collect powers of z
        // (z here standing for z^-1).
        let expand = |coeffs: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; n + 1];
            for (m, &c) in coeffs.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                // (1 - z)^m * (1 + z)^(n - m)
                let mut poly = vec![0.0; n + 1];
                poly[0] = 1.0;
                let mut deg = 0;
                for _ in 0..m {
                    let mut next = vec![0.0; n + 1];
                    for i in 0..=deg {
                        next[i] += poly[i];
                        next[i + 1] -= poly[i];
                    }
                    poly = next;
                    deg += 1;
                }
                for _ in 0..(n - m) {
                    let mut next = vec![0.0; n + 1];
                    for i in 0..=deg {
                        next[i] += poly[i];
                        next[i + 1] += poly[i];
                    }
                    poly = next;
                    deg += 1;
                }
                let scale = c * k.powi(m as i32);
                for i in 0..=n {
                    out[i] += scale * poly[i];
                }
            }
            out
        };
        let mut b = expand(tf.numerator());
        let mut a = expand(tf.denominator());
        let a0 = a[0];
        for c in b.iter_mut() {
            *c /= a0;
        }
        for c in a.iter_mut() {
            *c /= a0;
        }
        Ok(Self {
            state: vec![0.0; n],
            b,
            a,
        })
    }

    /// Direct form II transposed step.
    pub fn step(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.state.first().copied().unwrap_or(0.0);
        let n = self.state.len();
        for i in 0..n {
            let next = if i + 1 < n { self.state[i + 1] } else { 0.0 };
            self.state[i] = self.b[i + 1] * x + next - self.a[i + 1] * y;
        }
        y
    }

    /// Response of the discrete filter at `f` Hz for sample interval `dt`.
    pub fn response(&self, f: f64, dt: f64) -> Complex64 {
        let z = Complex64::from_polar(1.0, -2.0 * PI * f * dt);
        let eval = |c: &[f64]| {
            c.iter()
                .rev()
                .fold(Complex64::new(0.0, 0.0), |acc, &v| acc * z + v)
        };
        eval(&self.b) / eval(&self.a)
    }
}

/// Filters a uniformly sampled waveform through `tf` (bilinear transform with
/// prewarping at the natural frequency). The filter starts from rest.
pub fn apply_to_samples(
    tf: &RationalTransferFunction,
    samples: &[f64],
    dt: f64,
) -> Result<Vec<f64>, AnalogError> {
    let mut filt = DiscreteFilter::bilinear(tf, dt)?;
    Ok(samples.iter().map(|&x| filt.step(x)).collect())
}

/// Exact simulator for second-order (or simpler) transfer functions with a
/// constant numerator, driven by a piecewise-constant input. Used for PWM
/// edge streams where segment boundaries are known exactly.
#[derive(Debug, Clone)]
pub struct PiecewiseExact {
    gain: f64,  // DC gain
    w0: f64,    // natural frequency, rad/s
    zeta: f64,  // damping ratio
    order: usize,
    tau1: f64,  // first-order time constant when order == 1
    y: f64,
    v: f64,
}

impl PiecewiseExact {
    pub fn new(tf: &RationalTransferFunction) -> Result<Self, AnalogError> {
        if tf.numerator().len() != 1 {
            return Err(AnalogError::UnsupportedOrder {
                max: 0,
                got: tf.numerator().len() - 1,
            });
        }
        let d = tf.denominator();
        if d.len() > 3 {
            return Err(AnalogError::UnsupportedOrder {
                max: 2,
                got: d.len() - 1,
            });
        }
        if !tf.is_stable() {
            return Err(AnalogError::UnstableFilter);
        }
        let gain = tf.numerator()[0] / d[0];
        let (w0, zeta, tau1) = match d.len() {
            3 => {
                let w0 = (d[0] / d[2]).sqrt();
                (w0, d[1] / d[2] / (2.0 * w0), 0.0)
            }
            2 => (0.0, 0.0, d[1] / d[0]),
            _ => (0.0, 0.0, 0.0),
        };
        Ok(Self {
            gain,
            w0,
            zeta,
            order: d.len() - 1,
            tau1,
            y: 0.0,
            v: 0.0,
        })
    }

    pub fn output(&self) -> f64 {
        self.y
    }

    /// Advances the state by `tau` seconds with constant input `u`.
    pub fn advance(&mut self, tau: f64, u: f64) {
        debug_assert!(tau >= 0.0);
        if tau == 0.0 {
            return;
        }
        let yss = self.gain * u;
        match self.order {
            0 => {
                self.y = yss;
            }
            1 => {
                let e = (-tau / self.tau1).exp();
                self.y = yss + (self.y - yss) * e;
            }
            _ => {
                let a = self.y - yss;
                let z = self.zeta;
                let w0 = self.w0;
                if (z - 1.0).abs() < 1e-9 {
                    // critically damped
                    let b = self.v + w0 * a;
                    let e = (-w0 * tau).exp();
                    self.y = yss + (a + b * tau) * e;
                    self.v = (self.v - w0 * b * tau) * e;
                } else if z < 1.0 {
                    let wd = w0 * (1.0 - z * z).sqrt();
                    let b = (self.v + z * w0 * a) / wd;
                    let e = (-z * w0 * tau).exp();
                    let (s, c) = (wd * tau).sin_cos();
                    self.y = yss + e * (a * c + b * s);
                    self.v = e * ((b * wd - z * w0 * a) * c - (a * wd + z * w0 * b) * s);
                } else {
                    let dw = w0 * (z * z - 1.0).sqrt();
                    let r1 = -z * w0 + dw;
                    let r2 = -z * w0 - dw;
                    let ca = (self.v - r2 * a) / (r1 - r2);
                    let cb = (r1 * a - self.v) / (r1 - r2);
                    let e1 = (r1 * tau).exp();
                    let e2 = (r2 * tau).exp();
                    self.y = yss + ca * e1 + cb * e2;
                    self.v = ca * r1 * e1 + cb * r2 * e2;
                }
            }
        }
    }
}

/// Drives `tf` with a piecewise-constant waveform given as `(duration, level)`
/// segments and samples the output every `out_dt` seconds (starting at t =
/// `out_dt`). Integration is exact; only the output instants are discrete.
pub fn apply_to_segments<I>(
    tf: &RationalTransferFunction,
    segments: I,
    out_dt: f64,
) -> Result<Vec<f64>, AnalogError>
where
    I: IntoIterator<Item = (f64, f64)>,
{
    if !(out_dt > 0.0) {
        return Err(AnalogError::NonPositiveInput {
            name: "out_dt",
            value: out_dt,
        });
    }
    let mut sim = PiecewiseExact::new(tf)?;
    let mut out = Vec::new();
    let mut t = 0.0f64; // current simulation time
    let mut next_sample = out_dt;
    for (duration, level) in segments {
        let mut remaining = duration;
        while remaining > 0.0 {
            let boundary = t + remaining;
            if next_sample <= boundary {
                let tau = next_sample - t;
                sim.advance(tau, level);
                out.push(sim.output());
                remaining -= tau;
                t = next_sample;
                next_sample = (out.len() + 1) as f64 * out_dt;
            } else {
                sim.advance(remaining, level);
                t = boundary;
                remaining = 0.0;
            }
        }
    }
    Ok(out)
}
