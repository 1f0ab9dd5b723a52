//! Software twin of a frequency-table driven tactile display control stack.
//!
//! The crate emulates the full chain between a host computer and the piezo
//! actuators of a tactile display, without any hardware attached:
//!
//! * [`table`] — the frequency-table data model and its 160-byte wire codec.
//! * [`bus`] — a virtual backplane: 7-bit address bus, broadcast line, fast
//!   bulk channel and slow config channel, plus a calibrated transfer-latency
//!   model.
//! * [`generator`] — a deterministic emulation of the signal-generator
//!   firmware: runlevel state machine, Q15 phase-accumulation oscillator bank
//!   with a 12-bit cosine lookup table, per-component smoothing and PWM output.
//! * [`analog`] — analytic models of the two output stages (Sallen-Key
//!   low-pass and H-bridge RLC low-pass into a capacitive piezo load) and
//!   time-domain filtering of emulator output.
//! * [`metrology`] — THD+N analysis via nonlinear sine fitting with
//!   band-limited noise evaluation, and the bus latency measurement harness.
//! * [`actuator`] — frequency response of a clamped piezo bimorph on a
//!   compliant bearing, bearing-parameter fitting and banded amplitude tables.
//! * [`host`] — the high-level control surface: board manager and the
//!   dual-sensor planar pose tracker.

pub mod analog;
pub mod actuator;
pub mod bus;
pub mod generator;
pub mod host;
pub mod metrology;
pub mod table;
