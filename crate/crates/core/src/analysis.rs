//! Efficiency-vs-time curves, short-time Fourier transforms of controls,
//! square-wave harmonics, and carrier-harmonic ratios.

use rustfft::FftPlanner;
use thiserror::Error;

use crate::algebra::{basis_operator, BasisLabel, C64};
use crate::dynamics::{
    propagate, ControlSequence, DynamicsError, FastOp, Frame, SystemParams,
};
use crate::pulses::{
    inept_prelude, minimum_time, synth_to_ix_square, synth_to_iz, PulseError, Scheme, TargetAxis,
    TransferKind, TransferTarget,
};

const PI: f64 = std::f64::consts::PI;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("time grid must be increasing and non-negative")]
    GridNotIncreasing,
    #[error("time grid point {t} exceeds the minimum time {t_min}")]
    GridBeyondMinimum { t: f64, t_min: f64 },
    #[error("efficiency curves are defined for the optimal schemes only")]
    UnsupportedScheme,
    #[error("signal is empty")]
    EmptySignal,
    #[error("window length {window} exceeds signal length {len}")]
    WindowTooLong { window: usize, len: usize },
    #[error("waveform peak is zero")]
    ZeroPeak,
    #[error(transparent)]
    Pulse(#[from] PulseError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Transfer efficiency against time: the closed-form column next to the
/// synthesize-and-propagate column, plus an optional optimizer column.
#[derive(Debug, Clone)]
pub struct EfficiencyCurve {
    pub times: Vec<f64>,
    pub analytic: Vec<f64>,
    pub simulated: Vec<f64>,
    pub optimized: Option<Vec<f64>>,
}

/// Magnitude spectrogram, normalized to a global maximum of 1. The
/// frequency axis is signed and spans the full `[-Nyquist, +Nyquist)` band:
/// channels are analyzed as complex signals `x + i y`, with the sign
/// convention that puts the upper doublet line (the beta transition, offset
/// `+A/2`) at positive frequencies.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub window_length: usize,
    pub hop: usize,
    pub frequencies: Vec<f64>,
    pub times: Vec<f64>,
    /// `magnitudes[f_idx][t_idx]`
    pub magnitudes: Vec<Vec<f64>>,
}

/// Closed-form maximal efficiency for the optimal schemes.
pub fn analytic_efficiency(target: TransferTarget, v_max_hz: f64, t: f64) -> f64 {
    match target {
        TransferTarget::ToIz => (PI * v_max_hz * t).sin().powi(2),
        TransferTarget::ToIx | TransferTarget::ToIy => (4.0 * v_max_hz * t).sin(),
    }
}

/// Analytic and simulated efficiency over `t_grid` (within `[0, T_min]`).
/// The simulated column synthesizes the optimal pulse for each grid point
/// and propagates it from `S_z` in the rotating frame.
pub fn efficiency_curve(
    kind: TransferKind,
    p: &SystemParams,
    t_grid: &[f64],
) -> Result<EfficiencyCurve, AnalysisError> {
    if kind.scheme() != Scheme::Optimal {
        return Err(AnalysisError::UnsupportedScheme);
    }
    let t_min = minimum_time(kind, p.v_max_hz);
    let mut prev = -1.0;
    for &t in t_grid {
        if t < 0.0 || t <= prev {
            return Err(AnalysisError::GridNotIncreasing);
        }
        if t > t_min * (1.0 + 1e-9) {
            return Err(AnalysisError::GridBeyondMinimum { t, t_min });
        }
        prev = t;
    }
    let target = kind.target().operator();
    let initial = basis_operator(BasisLabel::Sz);
    let mut analytic = Vec::with_capacity(t_grid.len());
    let mut simulated = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        analytic.push(analytic_efficiency(kind.target(), p.v_max_hz, t));
        let seq = if t == 0.0 {
            // the chain collapses to the hard prelude
            let mut seq = ControlSequence::zeros(p.default_dt(), 0);
            for op in inept_prelude() {
                seq.fast_ops.push(FastOp { index: 0, op });
            }
            seq
        } else {
            match kind.target() {
                TransferTarget::ToIz => synth_to_iz(p, t)?,
                TransferTarget::ToIx => synth_to_ix_square(p, t, TargetAxis::X)?,
                TransferTarget::ToIy => synth_to_ix_square(p, t, TargetAxis::Y)?,
            }
        };
        let traj = propagate(&seq, p, Frame::Rotating, &initial, false)?;
        simulated.push(
            crate::algebra::transfer_efficiency(traj.final_state(), &target)
                .map_err(|e| AnalysisError::Dynamics(DynamicsError::Algebra(e)))?,
        );
    }
    Ok(EfficiencyCurve {
        times: t_grid.to_vec(),
        analytic,
        simulated,
        optimized: None,
    })
}

/// Complex control signal of one spin: `u_x + i u_y` or `v_x + i v_y`.
pub fn complex_channel(seq: &ControlSequence, nuclear: bool) -> Vec<C64> {
    let (x, y) = if nuclear {
        (&seq.v_x, &seq.v_y)
    } else {
        (&seq.u_x, &seq.u_y)
    };
    x.iter()
        .zip(y.iter())
        .map(|(&re, &im)| C64::new(re, im))
        .collect()
}

fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 * (1.0 - (2.0 * PI * n as f64 / len as f64).cos()))
        .collect()
}

/// Raw short-time Fourier transform: per-segment complex spectra without
/// normalization, frequency axis shifted to `[-Nyquist, +Nyquist)`.
pub fn stft_raw(
    signal: &[C64],
    dt: f64,
    window_length: usize,
    hop: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<C64>>), AnalysisError> {
    if signal.is_empty() {
        return Err(AnalysisError::EmptySignal);
    }
    if window_length == 0 || window_length > signal.len() {
        return Err(AnalysisError::WindowTooLong {
            window: window_length,
            len: signal.len(),
        });
    }
    let hop = hop.max(1);
    let l = window_length;
    let window = hann(l);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(l);
    let mut times = Vec::new();
    let mut columns: Vec<Vec<C64>> = Vec::new();
    let mut start = 0;
    while start + l <= signal.len() {
        // Conjugating before the transform flips the frequency axis so the
        // beta-line drive (x, y) = (sin, cos)(pi A t) lands at +A/2.
        let mut buf: Vec<C64> = (0..l)
            .map(|n| signal[start + n].conj() * window[n])
            .collect();
        fft.process(&mut buf);
        // shift: negative frequencies first
        let mut col = Vec::with_capacity(l);
        for k in 0..l {
            col.push(buf[(k + l / 2) % l]);
        }
        columns.push(col);
        times.push((start as f64 + l as f64 / 2.0) * dt);
        start += hop;
    }
    let df = 1.0 / (l as f64 * dt);
    let frequencies: Vec<f64> = (0..l).map(|k| (k as f64 - (l / 2) as f64) * df).collect();
    Ok((frequencies, times, columns))
}

/// Hann-windowed magnitude spectrogram normalized to a global maximum of 1.
pub fn stft(
    signal: &[C64],
    dt: f64,
    window_length: usize,
    hop: usize,
) -> Result<Spectrogram, AnalysisError> {
    let (frequencies, times, columns) = stft_raw(signal, dt, window_length, hop)?;
    let n_freq = frequencies.len();
    let mut magnitudes = vec![vec![0.0; times.len()]; n_freq];
    let mut peak = 0.0f64;
    for (t_idx, col) in columns.iter().enumerate() {
        for (f_idx, z) in col.iter().enumerate() {
            let m = z.norm();
            magnitudes[f_idx][t_idx] = m;
            peak = peak.max(m);
        }
    }
    if peak > 0.0 {
        for row in &mut magnitudes {
            for m in row {
                *m /= peak;
            }
        }
    }
    Ok(Spectrogram {
        window_length,
        hop,
        frequencies,
        times,
        magnitudes,
    })
}

/// Fourier coefficient of the unit square wave `sgn[sin]`: `4/(n pi)` for
/// odd `n`, zero for even `n`.
pub fn square_wave_fourier(n: u32) -> f64 {
    assert!(n >= 1, "harmonic index starts at 1");
    if n % 2 == 1 {
        4.0 / (n as f64 * PI)
    } else {
        0.0
    }
}

/// Magnitude of the `carrier_hz` Fourier component of a sampled waveform
/// divided by its peak amplitude. Samples are taken at step midpoints and
/// the waveform is assumed periodic over the sampled window.
pub fn effective_first_harmonic(
    samples: &[f64],
    dt: f64,
    carrier_hz: f64,
) -> Result<f64, AnalysisError> {
    if samples.is_empty() {
        return Err(AnalysisError::EmptySignal);
    }
    let peak = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak == 0.0 {
        return Err(AnalysisError::ZeroPeak);
    }
    let total = samples.len() as f64 * dt;
    let mut acc = C64::new(0.0, 0.0);
    for (k, &x) in samples.iter().enumerate() {
        let t = (k as f64 + 0.5) * dt;
        let phase = -2.0 * PI * carrier_hz * t;
        acc += C64::new(phase.cos(), phase.sin()) * x;
    }
    let coeff = acc * C64::new(2.0 * dt / total, 0.0);
    Ok(coeff.norm() / peak)
}
