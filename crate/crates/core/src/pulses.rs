//! Analytic pulse synthesizers for the polarization transfers and their
//! minimum-time formulas.
//!
//! All synthesized sequences embed their fast operations (hard-pulse prelude
//! mapping `S_z -> 2S_zI_z`, and for transverse targets the final coupling
//! phase unwind), so [`crate::dynamics::propagate`] reproduces the full
//! transfer chains starting from `S_z` without caller assembly.

use thiserror::Error;

use crate::algebra::{basis_operator, matrix_exp, BasisLabel, Operator, C64};
use crate::dynamics::{phase_unwind, ControlSequence, FastOp, SystemParams};

const PI: f64 = std::f64::consts::PI;

#[derive(Debug, Error)]
pub enum PulseError {
    #[error("the two-tone scheme is defined only for transverse targets (I_x, I_y)")]
    TwoToneForLongitudinalTarget,
    #[error("duration must be positive, got {0}")]
    NonPositiveDuration(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferTarget {
    ToIz,
    ToIx,
    ToIy,
}

impl TransferTarget {
    pub fn operator(self) -> Operator {
        match self {
            TransferTarget::ToIz => basis_operator(BasisLabel::Iz),
            TransferTarget::ToIx => basis_operator(BasisLabel::Ix),
            TransferTarget::ToIy => basis_operator(BasisLabel::Iy),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Optimal,
    ConventionalTwoTone,
}

/// Which transverse axis a square-wave pulse drives into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetAxis {
    X,
    Y,
}

/// A (target, scheme) pair; the two-tone scheme exists only for transverse
/// targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferKind {
    target: TransferTarget,
    scheme: Scheme,
}

impl TransferKind {
    pub fn new(target: TransferTarget, scheme: Scheme) -> Result<Self, PulseError> {
        if scheme == Scheme::ConventionalTwoTone && target == TransferTarget::ToIz {
            return Err(PulseError::TwoToneForLongitudinalTarget);
        }
        Ok(TransferKind { target, scheme })
    }

    pub fn optimal(target: TransferTarget) -> Self {
        TransferKind {
            target,
            scheme: Scheme::Optimal,
        }
    }

    pub fn target(&self) -> TransferTarget {
        self.target
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }
}

/// Minimum transfer time: `1/(2 v_max)` for the longitudinal target and the
/// two-tone scheme, `pi/(8 v_max)` for the optimal transverse transfers.
pub fn minimum_time(kind: TransferKind, v_max_hz: f64) -> f64 {
    assert!(v_max_hz > 0.0, "v_max must be positive");
    match (kind.target, kind.scheme) {
        (TransferTarget::ToIz, _) => 1.0 / (2.0 * v_max_hz),
        (_, Scheme::ConventionalTwoTone) => 1.0 / (2.0 * v_max_hz),
        (_, Scheme::Optimal) => PI / (8.0 * v_max_hz),
    }
}

/// The three hard operations mapping `S_z` to `2 S_zI_z`: a pi/2 pulse about
/// +y, the coupling evolution `exp(-i pi S_zI_z)` (a 1/(2A) delay), and a
/// pi/2 pulse about +x. Listed in application order.
pub fn inept_prelude() -> [Operator; 3] {
    let rot = |label: BasisLabel, angle: f64| {
        matrix_exp(&basis_operator(label).scale(C64::new(0.0, -angle)))
            .expect("rotation generator is skew-Hermitian")
    };
    [
        rot(BasisLabel::Sy, PI / 2.0),
        rot(BasisLabel::TwoSzIz, PI / 2.0),
        rot(BasisLabel::Sx, PI / 2.0),
    ]
}

/// How the fast operations are realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FastOpStyle {
    /// Instantaneous unitaries attached to the sequence (the idealization).
    #[default]
    Instantaneous,
    /// Constant-amplitude electron segments at `u_max` and coupling delays,
    /// occupying real grid steps. Quantifies the instantaneous-op
    /// idealization; faithful only when `u_max >> A`.
    Finite,
}

fn grid(duration: f64, dt_target: f64) -> (usize, f64) {
    let n = (duration / dt_target).round().max(1.0) as usize;
    (n, duration / n as f64)
}

/// Exact integral of `sgn[sin(pi A t)]` from 0 to `t`.
fn signed_area(a_hz: f64, t: f64) -> f64 {
    let half = 1.0 / a_hz; // half-period of sin(pi A t)
    let m = (t / half).floor();
    let frac = t - m * half;
    let whole = if (m as i64) % 2 == 1 { half } else { 0.0 };
    let sign = if (m as i64) % 2 == 0 { 1.0 } else { -1.0 };
    whole + sign * frac
}

/// Per-step square-wave samples of `-sgn[sin(pi A t)] * v_max` on the grid
/// `t_offset + [k dt, (k+1) dt]`. Steps straddling a sign flip carry the
/// signed-area average, so the waveform integral is preserved exactly;
/// all other steps are exactly `+-v_max`.
fn square_samples(a_hz: f64, v_max: f64, t_offset: f64, dt: f64, n: usize) -> Vec<f64> {
    let half = 1.0 / a_hz;
    (0..n)
        .map(|k| {
            let t0 = t_offset + k as f64 * dt;
            let t1 = t0 + dt;
            let m0 = (t0 / half).floor();
            let m1 = (t1 / half).floor();
            let sign0 = if (m0 as i64) % 2 == 0 { 1.0 } else { -1.0 };
            if m0 == m1 {
                return -v_max * sign0;
            }
            if m1 - m0 >= 2.0 {
                // coarse grid spanning several half-periods
                let mean = (signed_area(a_hz, t1) - signed_area(a_hz, t0)) / dt;
                return (-v_max * mean).clamp(-v_max, v_max);
            }
            let flip = m1 * half;
            let mean = (sign0 * (flip - t0) - sign0 * (t1 - flip)) / dt;
            (-v_max * mean).clamp(-v_max, v_max)
        })
        .collect()
}

struct Assembly {
    seq: ControlSequence,
    /// Absolute time at which the slow pulse starts.
    t_offset: f64,
}

/// Prepare an empty sequence holding the prelude, leaving the slow-pulse
/// steps to be filled by the synthesizer.
fn begin_sequence(p: &SystemParams, style: FastOpStyle, dt: f64, pulse_steps: usize) -> Assembly {
    match style {
        FastOpStyle::Instantaneous => {
            let mut seq = ControlSequence::zeros(dt, pulse_steps);
            for op in inept_prelude() {
                seq.fast_ops.push(FastOp { index: 0, op });
            }
            Assembly { seq, t_offset: 0.0 }
        }
        FastOpStyle::Finite => {
            // pi/2 pulse at (up to) u_max, coupling delay of 1/(2A), pi/2
            // pulse; all on the same grid.
            let n_rot = ((1.0 / (4.0 * p.u_max_hz)) / dt).ceil().max(1.0) as usize;
            let u_amp = 1.0 / (4.0 * n_rot as f64 * dt);
            let n_delay = ((1.0 / (2.0 * p.hyperfine_hz)) / dt).round().max(1.0) as usize;
            let lead = 2 * n_rot + n_delay;
            let mut seq = ControlSequence::zeros(dt, lead + pulse_steps);
            for k in 0..n_rot {
                seq.u_y[k] = u_amp;
            }
            for k in (n_rot + n_delay)..(2 * n_rot + n_delay) {
                seq.u_x[k] = u_amp;
            }
            Assembly {
                seq,
                t_offset: lead as f64 * dt,
            }
        }
    }
}

/// Attach the coupling-phase unwind for a sequence of total length
/// `seq.duration()`.
fn attach_unwind(p: &SystemParams, style: FastOpStyle, seq: &mut ControlSequence) {
    match style {
        FastOpStyle::Instantaneous => {
            let t_total = seq.duration();
            seq.fast_ops.push(FastOp {
                index: seq.steps(),
                op: phase_unwind(p, t_total),
            });
        }
        FastOpStyle::Finite => {
            // Zero-control delay bringing the accumulated coupling angle
            // 2 pi A t to a multiple of 4 pi (identity up to global phase).
            let dt = seq.dt;
            let angle = 2.0 * PI * p.hyperfine_hz * seq.duration();
            let deficit = (4.0 * PI - angle.rem_euclid(4.0 * PI)).rem_euclid(4.0 * PI);
            let t_unwind = deficit / (2.0 * PI * p.hyperfine_hz);
            let n = (t_unwind / dt).round() as usize;
            let steps = seq.steps() + n;
            seq.u_x.resize(steps, 0.0);
            seq.u_y.resize(steps, 0.0);
            seq.v_x.resize(steps, 0.0);
            seq.v_y.resize(steps, 0.0);
        }
    }
}

/// Time-optimal `S_z -> I_z` sequence: full-amplitude sinusoidal modulation
/// `v_x = v_max sin(pi A t)`, `v_y = v_max cos(pi A t)` for duration `t`,
/// with the hard prelude attached. The amplitude constraint is saturated at
/// every step.
pub fn synth_to_iz(p: &SystemParams, duration: f64) -> Result<ControlSequence, PulseError> {
    synth_to_iz_with(p, duration, p.default_dt(), FastOpStyle::Instantaneous)
}

pub fn synth_to_iz_with(
    p: &SystemParams,
    duration: f64,
    dt_target: f64,
    style: FastOpStyle,
) -> Result<ControlSequence, PulseError> {
    if !(duration > 0.0) {
        return Err(PulseError::NonPositiveDuration(duration));
    }
    let (n, dt) = grid(duration, dt_target);
    let Assembly { mut seq, t_offset } = begin_sequence(p, style, dt, n);
    let lead = seq.steps() - n;
    for k in 0..n {
        let t_mid = t_offset + (k as f64 + 0.5) * dt;
        let phase = PI * p.hyperfine_hz * t_mid;
        seq.v_x[lead + k] = p.v_max_hz * phase.sin();
        seq.v_y[lead + k] = p.v_max_hz * phase.cos();
    }
    Ok(seq)
}

/// Time-optimal `S_z -> I_x` (or `I_y`) sequence: square-wave modulation
/// `-sgn[sin(pi A t)] v_max` on the chosen nuclear channel, prelude and
/// coupling-phase unwind attached.
pub fn synth_to_ix_square(
    p: &SystemParams,
    duration: f64,
    axis: TargetAxis,
) -> Result<ControlSequence, PulseError> {
    synth_to_ix_square_with(p, duration, axis, p.default_dt(), FastOpStyle::Instantaneous)
}

pub fn synth_to_ix_square_with(
    p: &SystemParams,
    duration: f64,
    axis: TargetAxis,
    dt_target: f64,
    style: FastOpStyle,
) -> Result<ControlSequence, PulseError> {
    if !(duration > 0.0) {
        return Err(PulseError::NonPositiveDuration(duration));
    }
    let (n, dt) = grid(duration, dt_target);
    let Assembly { mut seq, t_offset } = begin_sequence(p, style, dt, n);
    let lead = seq.steps() - n;
    let samples = square_samples(p.hyperfine_hz, p.v_max_hz, t_offset, dt, n);
    match axis {
        TargetAxis::X => seq.v_x[lead..].copy_from_slice(&samples),
        TargetAxis::Y => seq.v_y[lead..].copy_from_slice(&samples),
    }
    attach_unwind(p, style, &mut seq);
    Ok(seq)
}

/// Conventional two-tone scheme: simultaneous selective pulses on both
/// doublet lines at amplitude `v_max/2`, i.e. `v_x(t) = -v_max sin(pi A t)`
/// for the fixed duration `1/(2 v_max)`; prelude and unwind attached.
pub fn synth_conventional_two_tone(p: &SystemParams) -> Result<ControlSequence, PulseError> {
    synth_conventional_two_tone_with(p, p.default_dt(), FastOpStyle::Instantaneous)
}

pub fn synth_conventional_two_tone_with(
    p: &SystemParams,
    dt_target: f64,
    style: FastOpStyle,
) -> Result<ControlSequence, PulseError> {
    let duration = 1.0 / (2.0 * p.v_max_hz);
    let (n, dt) = grid(duration, dt_target);
    let Assembly { mut seq, t_offset } = begin_sequence(p, style, dt, n);
    let lead = seq.steps() - n;
    for k in 0..n {
        // Left-endpoint sampling keeps the envelope peak |v_x| = v_max on
        // the grid when 1/(2A) is a step boundary.
        let t = t_offset + k as f64 * dt;
        seq.v_x[lead + k] = -p.v_max_hz * (PI * p.hyperfine_hz * t).sin();
    }
    attach_unwind(p, style, &mut seq);
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{basis_operator as op, conjugate, transfer_efficiency};
    use crate::dynamics::{propagate, propagate_efficiency, Frame};
    use approx::assert_abs_diff_eq;
    use BasisLabel::*;

    fn desk() -> SystemParams {
        SystemParams::new(10e6, 1e6, 20e3).unwrap()
    }

    #[test]
    fn minimum_time_values() {
        let iz = TransferKind::optimal(TransferTarget::ToIz);
        let ix = TransferKind::optimal(TransferTarget::ToIx);
        let tt = TransferKind::new(TransferTarget::ToIx, Scheme::ConventionalTwoTone).unwrap();
        assert_abs_diff_eq!(minimum_time(iz, 20e3), 25e-6, epsilon = 1e-18);
        assert_abs_diff_eq!(minimum_time(ix, 20e3), 19.635e-6, epsilon = 1e-9);
        assert_abs_diff_eq!(minimum_time(tt, 20e3), 25e-6, epsilon = 1e-18);
        let ratio = minimum_time(ix, 20e3) / minimum_time(iz, 20e3);
        assert_abs_diff_eq!(ratio, PI / 4.0, epsilon = 1e-15);
    }

    #[test]
    fn two_tone_to_iz_is_rejected() {
        assert!(TransferKind::new(TransferTarget::ToIz, Scheme::ConventionalTwoTone).is_err());
    }

    #[test]
    fn inept_steps() {
        let [g1, g2, g3] = inept_prelude();
        // first op alone: S_z -> S_x
        assert!((conjugate(&g1, &op(Sz)) - op(Sx)).max_norm() < 1e-14);
        // second op alone: S_x -> 2 S_yI_z
        assert!((conjugate(&g2, &op(Sx)) - op(TwoSyIz)).max_norm() < 1e-14);
        // composition: S_z -> 2 S_zI_z
        let u = g3 * g2 * g1;
        assert!((conjugate(&u, &op(Sz)) - op(TwoSzIz)).max_norm() < 1e-14);
    }

    #[test]
    fn sinusoid_reaches_iz() {
        let p = desk();
        let t_min = 1.0 / (2.0 * p.v_max_hz);
        let seq = synth_to_iz(&p, t_min).unwrap();
        let eta = propagate_efficiency(&seq, &p, Frame::Rotating, &op(Sz), &op(Iz)).unwrap();
        assert!(eta >= 0.99, "eta = {eta}");
    }

    #[test]
    fn sinusoid_at_half_minimum_time() {
        let p = desk();
        let t = 1.0 / (4.0 * p.v_max_hz);
        let seq = synth_to_iz(&p, t).unwrap();
        let eta = propagate_efficiency(&seq, &p, Frame::Rotating, &op(Sz), &op(Iz)).unwrap();
        assert_abs_diff_eq!(eta, 0.5, epsilon = 0.02);
    }

    #[test]
    fn sinusoid_saturates_amplitude_exactly() {
        let p = desk();
        let seq = synth_to_iz(&p, 5e-6).unwrap();
        for k in 0..seq.steps() {
            let norm_sq = seq.v_x[k].powi(2) + seq.v_y[k].powi(2);
            assert_abs_diff_eq!(norm_sq, p.v_max_hz.powi(2), epsilon = 1e-6);
        }
    }

    #[test]
    fn square_reaches_ix() {
        let p = desk();
        let t_min = PI / (8.0 * p.v_max_hz);
        let seq = synth_to_ix_square(&p, t_min, TargetAxis::X).unwrap();
        let eta = propagate_efficiency(&seq, &p, Frame::Rotating, &op(Sz), &op(Ix)).unwrap();
        assert!(eta >= 0.99, "eta = {eta}");
    }

    #[test]
    fn square_reaches_iy_on_y_axis() {
        let p = desk();
        let t_min = PI / (8.0 * p.v_max_hz);
        let seq = synth_to_ix_square(&p, t_min, TargetAxis::Y).unwrap();
        let eta = propagate_efficiency(&seq, &p, Frame::Rotating, &op(Sz), &op(Iy)).unwrap();
        assert!(eta >= 0.99, "eta = {eta}");
    }

    #[test]
    fn square_at_half_minimum_time() {
        let p = desk();
        let t = PI / (16.0 * p.v_max_hz);
        let seq = synth_to_ix_square(&p, t, TargetAxis::X).unwrap();
        let eta = propagate_efficiency(&seq, &p, Frame::Rotating, &op(Sz), &op(Ix)).unwrap();
        assert_abs_diff_eq!(eta, (PI / 4.0).sin(), epsilon = 0.02);
    }

    #[test]
    fn square_sign_flips_at_half_periods() {
        let p = desk();
        let t = PI / (8.0 * p.v_max_hz);
        let seq = synth_to_ix_square(&p, t, TargetAxis::X).unwrap();
        let half = 1.0 / p.hyperfine_hz;
        for k in 0..seq.steps() {
            let t0 = k as f64 * seq.dt;
            let t1 = t0 + seq.dt;
            // skip steps containing a flip
            if (t0 / half).floor() != (t1 / half).floor() {
                continue;
            }
            let t_mid = 0.5 * (t0 + t1);
            let want = -(PI * p.hyperfine_hz * t_mid).sin().signum() * p.v_max_hz;
            assert_abs_diff_eq!(seq.v_x[k], want, epsilon = 1e-9);
        }
    }

    #[test]
    fn square_area_is_preserved_exactly() {
        let p = desk();
        let t = PI / (8.0 * p.v_max_hz);
        let seq = synth_to_ix_square(&p, t, TargetAxis::X).unwrap();
        let sampled: f64 = seq.v_x.iter().map(|v| v * seq.dt).sum();
        let exact = -p.v_max_hz * super::signed_area(p.hyperfine_hz, seq.duration());
        assert_abs_diff_eq!(sampled, exact, epsilon = exact.abs() * 1e-12);
    }

    #[test]
    fn two_tone_duration_and_peak() {
        let p = desk();
        let seq = synth_conventional_two_tone(&p).unwrap();
        assert_abs_diff_eq!(seq.duration(), 1.0 / (2.0 * p.v_max_hz), epsilon = 1e-15);
        let peak = seq.v_x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert_abs_diff_eq!(peak, p.v_max_hz, epsilon = 1e-9);
        assert!(seq.v_y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_tone_reaches_ix() {
        let p = desk();
        let seq = synth_conventional_two_tone(&p).unwrap();
        let eta = propagate_efficiency(&seq, &p, Frame::Rotating, &op(Sz), &op(Ix)).unwrap();
        assert!(eta >= 0.99, "eta = {eta}");
    }

    #[test]
    fn square_speedup_ratio_over_two_tone() {
        let p = desk();
        let square = synth_to_ix_square(&p, PI / (8.0 * p.v_max_hz), TargetAxis::X).unwrap();
        let two_tone = synth_conventional_two_tone(&p).unwrap();
        let eta_sq = propagate_efficiency(&square, &p, Frame::Rotating, &op(Sz), &op(Ix)).unwrap();
        assert!(eta_sq >= 0.99);
        let ratio = square.duration() / two_tone.duration();
        assert_abs_diff_eq!(ratio, PI / 4.0, epsilon = 1e-9);
    }

    #[test]
    fn efficiency_curves_match_closed_forms_loosely() {
        let p = desk();
        let t_min_iz = 1.0 / (2.0 * p.v_max_hz);
        for j in 1..=5 {
            let t = t_min_iz * j as f64 / 5.0;
            let seq = synth_to_iz(&p, t).unwrap();
            let eta = propagate_efficiency(&seq, &p, Frame::Rotating, &op(Sz), &op(Iz)).unwrap();
            let want = (PI * p.v_max_hz * t).sin().powi(2);
            assert_abs_diff_eq!(eta, want, epsilon = 0.02);
        }
        let t_min_ix = PI / (8.0 * p.v_max_hz);
        for j in 1..=5 {
            let t = t_min_ix * j as f64 / 5.0;
            let seq = synth_to_ix_square(&p, t, TargetAxis::X).unwrap();
            let eta = propagate_efficiency(&seq, &p, Frame::Rotating, &op(Sz), &op(Ix)).unwrap();
            let want = (4.0 * p.v_max_hz * t).sin();
            assert_abs_diff_eq!(eta, want, epsilon = 0.02);
        }
    }

    #[test]
    fn finite_mode_converges_when_electron_controls_dominate() {
        // u_max >> A >> v_max: the finite-time prelude approaches the
        // instantaneous idealization.
        let p = SystemParams::new(1e3, 1e6, 20.0).unwrap();
        let t_min = 1.0 / (2.0 * p.v_max_hz);
        let dt = p.default_dt();
        let fin = synth_to_iz_with(&p, t_min, dt, FastOpStyle::Finite).unwrap();
        let eta = propagate_efficiency(&fin, &p, Frame::Rotating, &op(Sz), &op(Iz)).unwrap();
        assert!(eta >= 0.98, "finite-mode eta = {eta}");
        // Transverse target exercises the finite unwind as well.
        let t_ix = PI / (8.0 * p.v_max_hz);
        let fin =
            synth_to_ix_square_with(&p, t_ix, TargetAxis::X, dt, FastOpStyle::Finite).unwrap();
        let eta = propagate_efficiency(&fin, &p, Frame::Rotating, &op(Sz), &op(Ix)).unwrap();
        assert!(eta >= 0.95, "finite-mode eta onto I_x = {eta}");
    }

    #[test]
    fn synthesized_sequences_validate_against_bounds() {
        let p = desk();
        for seq in [
            synth_to_iz(&p, 25e-6).unwrap(),
            synth_to_ix_square(&p, 19.6e-6, TargetAxis::X).unwrap(),
            synth_conventional_two_tone(&p).unwrap(),
        ] {
            seq.validate(Some(&p)).unwrap();
        }
    }

    #[test]
    fn rejects_non_positive_duration() {
        let p = desk();
        assert!(synth_to_iz(&p, 0.0).is_err());
        assert!(synth_to_ix_square(&p, -1e-6, TargetAxis::X).is_err());
    }

    #[test]
    fn propagating_trivial_sequence_applies_prelude_only() {
        // Zero pulse steps: the chain collapses to the prelude, leaving
        // 2 S_zI_z; efficiencies onto I_z and I_x vanish.
        let p = desk();
        let mut seq = ControlSequence::zeros(p.default_dt(), 0);
        for g in inept_prelude() {
            seq.fast_ops.push(FastOp { index: 0, op: g });
        }
        let traj = propagate(&seq, &p, Frame::Rotating, &op(Sz), false).unwrap();
        assert!((*traj.final_state() - op(TwoSzIz)).max_norm() < 1e-13);
        assert_abs_diff_eq!(
            transfer_efficiency(traj.final_state(), &op(Iz)).unwrap(),
            0.0,
            epsilon = 1e-12
        );
    }
}
