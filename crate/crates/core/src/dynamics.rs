//! Hamiltonians in the lab, rotating and interaction frames, and
//! piecewise-constant propagation of states and propagators.
//!
//! All Hamiltonians are returned in rad/s; control amplitudes and the
//! hyperfine coupling are specified in Hz. Step propagators are built with
//! [`matrix_exp`], which is exact for the 4x4 size, so the only
//! discretization error is the midpoint sampling of explicitly
//! time-dependent frames.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebra::{
    basis_operator, conjugate, matrix_exp, trace_inner, AlgebraError, BasisLabel, Operator, C64,
};

const TWO_PI: f64 = std::f64::consts::TAU;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid system parameters: {0}")]
    InvalidParams(String),
    #[error("invalid control sequence: {0}")]
    InvalidSequence(String),
    #[error("fast op at step index {index} is not unitary (error {error:.3e})")]
    NonUnitaryFastOp { index: usize, error: f64 },
    #[error("fast op index {index} exceeds step count {steps}")]
    FastOpIndexOutOfRange { index: usize, steps: usize },
    #[error("interaction frame requires zero nuclear offset (got {0} rad/s)")]
    OffsetInInteractionFrame(f64),
    #[error("lab-frame carriers are not set on SystemParams")]
    LabCarriersUnset,
    #[error("lab-frame propagation drives only the x channels; u_y/v_y must be zero")]
    LabFrameYChannels,
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
}

/// Lab-frame carrier frequencies, rad/s. Only needed for lab-frame work.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabCarriers {
    pub omega_s: f64,
    pub omega_i: f64,
    pub omega_i_rf: f64,
}

/// Physical constants of the two-spin control system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    /// Secular hyperfine coupling A, Hz.
    pub hyperfine_hz: f64,
    /// Nuclear offset omega_I^off, rad/s. Zero by default.
    pub offset_rad_s: f64,
    /// Electron control amplitude bound, Hz.
    pub u_max_hz: f64,
    /// Nuclear control amplitude bound, Hz.
    pub v_max_hz: f64,
    /// Lab-frame carriers; `None` unless lab-frame mode is used.
    pub lab: Option<LabCarriers>,
}

impl SystemParams {
    pub fn new(hyperfine_hz: f64, u_max_hz: f64, v_max_hz: f64) -> Result<Self, DynamicsError> {
        let p = SystemParams {
            hyperfine_hz,
            offset_rad_s: 0.0,
            u_max_hz,
            v_max_hz,
            lab: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_offset(mut self, offset_rad_s: f64) -> Self {
        self.offset_rad_s = offset_rad_s;
        self
    }

    pub fn with_lab(mut self, lab: LabCarriers) -> Self {
        self.lab = Some(lab);
        self
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.hyperfine_hz.is_finite() && self.hyperfine_hz > 0.0) {
            return Err(DynamicsError::InvalidParams(format!(
                "hyperfine coupling must be positive, got {}",
                self.hyperfine_hz
            )));
        }
        if !(self.u_max_hz.is_finite() && self.u_max_hz >= 0.0) {
            return Err(DynamicsError::InvalidParams(format!(
                "u_max must be non-negative, got {}",
                self.u_max_hz
            )));
        }
        if !(self.v_max_hz.is_finite() && self.v_max_hz >= 0.0) {
            return Err(DynamicsError::InvalidParams(format!(
                "v_max must be non-negative, got {}",
                self.v_max_hz
            )));
        }
        if !self.offset_rad_s.is_finite() {
            return Err(DynamicsError::InvalidParams(
                "offset must be finite".to_string(),
            ));
        }
        Ok(())
    }

    /// Warnings when the asserted time-scale separation `A >> v_max`,
    /// `u_max >> v_max` is not met (taken as a factor of 20). Advisory only.
    pub fn regime_warnings(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        if self.hyperfine_hz < 20.0 * self.v_max_hz {
            warnings.push(format!(
                "time-scale separation weak: A = {} Hz < 20 * v_max = {} Hz",
                self.hyperfine_hz,
                20.0 * self.v_max_hz
            ));
        }
        if self.u_max_hz < 20.0 * self.v_max_hz {
            warnings.push(format!(
                "time-scale separation weak: u_max = {} Hz < 20 * v_max = {} Hz",
                self.u_max_hz,
                20.0 * self.v_max_hz
            ));
        }
        warnings
    }

    /// Default step length: 32 samples per coupling period 1/A.
    pub fn default_dt(&self) -> f64 {
        1.0 / (32.0 * self.hyperfine_hz)
    }
}

/// Instantaneous unitary applied before the step at `index` (an index equal
/// to the step count means "after the final step").
#[derive(Debug, Clone)]
pub struct FastOp {
    pub index: usize,
    pub op: Operator,
}

/// Piecewise-constant control amplitudes on a uniform grid, four
/// rotating-frame channels, plus embedded instantaneous unitaries.
#[derive(Debug, Clone)]
pub struct ControlSequence {
    pub dt: f64,
    pub u_x: Vec<f64>,
    pub u_y: Vec<f64>,
    pub v_x: Vec<f64>,
    pub v_y: Vec<f64>,
    pub fast_ops: Vec<FastOp>,
}

impl ControlSequence {
    pub fn zeros(dt: f64, steps: usize) -> Self {
        ControlSequence {
            dt,
            u_x: vec![0.0; steps],
            u_y: vec![0.0; steps],
            v_x: vec![0.0; steps],
            v_y: vec![0.0; steps],
            fast_ops: Vec::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.u_x.len()
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.steps() as f64
    }

    /// Structural validation; amplitude bounds are checked when `params` is
    /// supplied. A relative slack of 1e-9 absorbs roundoff from synthesis.
    pub fn validate(&self, params: Option<&SystemParams>) -> Result<(), DynamicsError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(DynamicsError::InvalidSequence(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        let n = self.u_x.len();
        if self.u_y.len() != n || self.v_x.len() != n || self.v_y.len() != n {
            return Err(DynamicsError::InvalidSequence(
                "channel lengths differ".to_string(),
            ));
        }
        for k in 0..n {
            let amps = [self.u_x[k], self.u_y[k], self.v_x[k], self.v_y[k]];
            if amps.iter().any(|a| !a.is_finite()) {
                return Err(DynamicsError::InvalidSequence(format!(
                    "non-finite amplitude at step {k}"
                )));
            }
        }
        if let Some(p) = params {
            for k in 0..n {
                let u = (self.u_x[k].powi(2) + self.u_y[k].powi(2)).sqrt();
                let v = (self.v_x[k].powi(2) + self.v_y[k].powi(2)).sqrt();
                if u > p.u_max_hz * (1.0 + 1e-9) {
                    return Err(DynamicsError::InvalidSequence(format!(
                        "electron amplitude {u} Hz exceeds bound {} Hz at step {k}",
                        p.u_max_hz
                    )));
                }
                if v > p.v_max_hz * (1.0 + 1e-9) {
                    return Err(DynamicsError::InvalidSequence(format!(
                        "nuclear amplitude {v} Hz exceeds bound {} Hz at step {k}",
                        p.v_max_hz
                    )));
                }
            }
        }
        for fo in &self.fast_ops {
            if fo.index > n {
                return Err(DynamicsError::FastOpIndexOutOfRange {
                    index: fo.index,
                    steps: n,
                });
            }
            let err = fo.op.unitarity_error();
            if err > 1e-10 {
                return Err(DynamicsError::NonUnitaryFastOp {
                    index: fo.index,
                    error: err,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Lab,
    Rotating,
    Interaction,
}

impl std::fmt::Display for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Frame::Lab => f.write_str("lab"),
            Frame::Rotating => f.write_str("rotating"),
            Frame::Interaction => f.write_str("interaction"),
        }
    }
}

/// Result of propagating a [`ControlSequence`].
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Operator>,
    pub final_propagator: Operator,
    pub frame: Frame,
}

impl Trajectory {
    pub fn final_state(&self) -> &Operator {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn duration(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }
}

/// Rotating-frame Hamiltonian:
/// `omega_off I_z + 2 pi A S_zI_z + 2 pi (u_x S_x + u_y S_y + v_x I_x + v_y I_y)`.
pub fn rotating_hamiltonian(p: &SystemParams, u_x: f64, u_y: f64, v_x: f64, v_y: f64) -> Operator {
    let mut h = basis_operator(BasisLabel::Iz) * p.offset_rad_s
        + basis_operator(BasisLabel::TwoSzIz) * (std::f64::consts::PI * p.hyperfine_hz);
    h = h
        + basis_operator(BasisLabel::Sx) * (TWO_PI * u_x)
        + basis_operator(BasisLabel::Sy) * (TWO_PI * u_y)
        + basis_operator(BasisLabel::Ix) * (TWO_PI * v_x)
        + basis_operator(BasisLabel::Iy) * (TWO_PI * v_y);
    h
}

/// Interaction-frame Hamiltonian of the coupling `2 pi A S_zI_z`: the four
/// control terms pick up `cos(pi A t)` / `sin(pi A t)` modulation. Defined
/// for zero nuclear offset only.
pub fn interaction_hamiltonian(
    p: &SystemParams,
    u_x: f64,
    u_y: f64,
    v_x: f64,
    v_y: f64,
    t: f64,
) -> Result<Operator, DynamicsError> {
    if p.offset_rad_s != 0.0 {
        return Err(DynamicsError::OffsetInInteractionFrame(p.offset_rad_s));
    }
    let (s, c) = (std::f64::consts::PI * p.hyperfine_hz * t).sin_cos();
    let h = (basis_operator(BasisLabel::Sx) * c - basis_operator(BasisLabel::TwoSyIz) * s)
        * (TWO_PI * u_x)
        + (basis_operator(BasisLabel::Sy) * c + basis_operator(BasisLabel::TwoSxIz) * s)
            * (TWO_PI * u_y)
        + (basis_operator(BasisLabel::Ix) * c - basis_operator(BasisLabel::TwoSzIy) * s)
            * (TWO_PI * v_x)
        + (basis_operator(BasisLabel::Iy) * c + basis_operator(BasisLabel::TwoSzIx) * s)
            * (TWO_PI * v_y);
    Ok(h)
}

/// Lab-frame Hamiltonian with single-coil controls along x:
/// `omega_S S_z + omega_I I_z + 2 pi A S_zI_z + 2 pi u~_x S_x + 2 pi v~_x I_x`.
pub fn lab_hamiltonian(
    p: &SystemParams,
    u_tilde_x: f64,
    v_tilde_x: f64,
) -> Result<Operator, DynamicsError> {
    let lab = p.lab.ok_or(DynamicsError::LabCarriersUnset)?;
    Ok(basis_operator(BasisLabel::Sz) * lab.omega_s
        + basis_operator(BasisLabel::Iz) * lab.omega_i
        + basis_operator(BasisLabel::TwoSzIz) * (std::f64::consts::PI * p.hyperfine_hz)
        + basis_operator(BasisLabel::Sx) * (TWO_PI * u_tilde_x)
        + basis_operator(BasisLabel::Ix) * (TWO_PI * v_tilde_x))
}

/// Diagonal coupling rotation `exp(-i phi S_zI_z)` built in closed form.
fn coupling_phase(phi: f64) -> Operator {
    let mut m = nalgebra::Matrix4::<C64>::zeros();
    let quarter = phi / 4.0;
    let plus = C64::new(quarter.cos(), -quarter.sin());
    let minus = plus.conj();
    m[(0, 0)] = plus;
    m[(1, 1)] = minus;
    m[(2, 2)] = minus;
    m[(3, 3)] = plus;
    Operator::from_matrix(m)
}

/// Instantaneous unwinding of the coupling phase accumulated over `t`:
/// `exp(+i 2 pi A t S_zI_z)`. Composing it after the rotating-frame
/// propagator of a slow pulse removes the `exp(-i 2 pi A t S_zI_z)` prefix
/// left by the interaction-picture factorization.
pub fn phase_unwind(p: &SystemParams, t: f64) -> Operator {
    coupling_phase(-TWO_PI * p.hyperfine_hz * t)
}

/// Transform a state between the rotating and interaction frames at time `t`
/// (conjugation by `exp(+/- i 2 pi A S_zI_z t)`). Lab conversions are out of
/// scope.
pub fn frame_transform(
    state: &Operator,
    from: Frame,
    to: Frame,
    p: &SystemParams,
    t: f64,
) -> Result<Operator, DynamicsError> {
    match (from, to) {
        (Frame::Rotating, Frame::Interaction) => {
            let u = coupling_phase(-TWO_PI * p.hyperfine_hz * t);
            Ok(conjugate(&u, state))
        }
        (Frame::Interaction, Frame::Rotating) => {
            let u = coupling_phase(TWO_PI * p.hyperfine_hz * t);
            Ok(conjugate(&u, state))
        }
        (a, b) if a == b && a != Frame::Lab => Ok(*state),
        (from, to) => Err(DynamicsError::InvalidSequence(format!(
            "unsupported frame transform {from} -> {to}"
        ))),
    }
}

struct HamBasis {
    drift_rot: Operator,
    sx: Operator,
    sy: Operator,
    ix: Operator,
    iy: Operator,
}

impl HamBasis {
    fn new(p: &SystemParams) -> Self {
        HamBasis {
            drift_rot: basis_operator(BasisLabel::Iz) * p.offset_rad_s
                + basis_operator(BasisLabel::TwoSzIz) * (std::f64::consts::PI * p.hyperfine_hz),
            sx: basis_operator(BasisLabel::Sx),
            sy: basis_operator(BasisLabel::Sy),
            ix: basis_operator(BasisLabel::Ix),
            iy: basis_operator(BasisLabel::Iy),
        }
    }

    fn rotating(&self, u_x: f64, u_y: f64, v_x: f64, v_y: f64) -> Operator {
        self.drift_rot
            + self.sx * (TWO_PI * u_x)
            + self.sy * (TWO_PI * u_y)
            + self.ix * (TWO_PI * v_x)
            + self.iy * (TWO_PI * v_y)
    }
}

/// Propagate `initial` under `seq` in the given frame.
///
/// Per step `U_k = exp(-i H_k dt)` with `H_k` evaluated at the step midpoint
/// for time-dependent frames; fast ops are applied before their step index.
/// The final state is `conjugate(total propagator, initial)`. With
/// `record = true` every intermediate state is kept, otherwise only the
/// initial and final states.
pub fn propagate(
    seq: &ControlSequence,
    p: &SystemParams,
    frame: Frame,
    initial: &Operator,
    record: bool,
) -> Result<Trajectory, DynamicsError> {
    p.validate()?;
    seq.validate(Some(p))?;
    match frame {
        Frame::Interaction if p.offset_rad_s != 0.0 => {
            return Err(DynamicsError::OffsetInInteractionFrame(p.offset_rad_s));
        }
        Frame::Lab => {
            if p.lab.is_none() {
                return Err(DynamicsError::LabCarriersUnset);
            }
            if seq.u_y.iter().chain(seq.v_y.iter()).any(|&a| a != 0.0) {
                return Err(DynamicsError::LabFrameYChannels);
            }
        }
        _ => {}
    }

    let n = seq.steps();
    let basis = HamBasis::new(p);
    let mut total = Operator::identity();
    let mut state = *initial;
    let mut times = Vec::with_capacity(if record { n + 1 } else { 2 });
    let mut states = Vec::with_capacity(if record { n + 1 } else { 2 });
    times.push(0.0);
    states.push(*initial);

    let mut ops_by_index: Vec<Vec<&Operator>> = vec![Vec::new(); n + 1];
    for fo in &seq.fast_ops {
        ops_by_index[fo.index].push(&fo.op);
    }

    for k in 0..n {
        for op in &ops_by_index[k] {
            total = **op * total;
            if record {
                state = conjugate(op, &state);
            }
        }
        let h = match frame {
            Frame::Rotating => basis.rotating(seq.u_x[k], seq.u_y[k], seq.v_x[k], seq.v_y[k]),
            Frame::Interaction => {
                let t_mid = (k as f64 + 0.5) * seq.dt;
                interaction_hamiltonian(p, seq.u_x[k], seq.u_y[k], seq.v_x[k], seq.v_y[k], t_mid)?
            }
            Frame::Lab => lab_hamiltonian(p, seq.u_x[k], seq.v_x[k])?,
        };
        let u = matrix_exp(&h.scale(C64::new(0.0, -seq.dt)))?;
        total = u * total;
        if record {
            state = conjugate(&u, &state);
            times.push((k + 1) as f64 * seq.dt);
            states.push(state);
        }
    }
    for op in &ops_by_index[n] {
        total = **op * total;
    }

    let final_state = conjugate(&total, initial);
    if record {
        // Fast ops after the last step change the final state but not the
        // recorded grid; refresh the last entry from the total propagator.
        *states.last_mut().unwrap() = final_state;
        if n == 0 {
            times.push(0.0);
            states.push(final_state);
        }
    } else {
        times.push(n as f64 * seq.dt);
        states.push(final_state);
    }

    Ok(Trajectory {
        times,
        states,
        final_propagator: total,
        frame,
    })
}

/// Efficiency of a propagated sequence onto `target`, starting from
/// `initial`. Convenience wrapper over [`propagate`].
pub fn propagate_efficiency(
    seq: &ControlSequence,
    p: &SystemParams,
    frame: Frame,
    initial: &Operator,
    target: &Operator,
) -> Result<f64, DynamicsError> {
    let traj = propagate(seq, p, frame, initial, false)?;
    Ok(crate::algebra::transfer_efficiency(traj.final_state(), target)?)
}

/// Trace and Hermiticity drift along a trajectory, for diagnostics.
pub fn trajectory_state_integrity(traj: &Trajectory) -> (f64, f64) {
    let tr0 = traj.states[0].trace();
    let mut max_trace_dev: f64 = 0.0;
    let mut max_herm: f64 = 0.0;
    for s in &traj.states {
        max_trace_dev = max_trace_dev.max((s.trace() - tr0).norm());
        max_herm = max_herm.max(s.hermiticity_error());
    }
    (max_trace_dev, max_herm)
}
