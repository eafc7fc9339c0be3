//! GRAPE-style projected gradient ascent over piecewise-constant controls.
//!
//! Gradients are exact: each step propagator `U_k = exp(-i H_k dt)` is
//! differentiated through its Hermitian eigendecomposition (the divided-
//! difference formula), not the first-order `-i dt G U_k` approximation.
//! Constraints are handled by alternating projection, bandwidth first, then
//! per-step radial amplitude clipping.

use nalgebra::Matrix4;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::algebra::{
    basis_operator, trace_inner, transfer_efficiency, AlgebraError, BasisLabel, Operator, C64,
};
use crate::dynamics::{propagate, ControlSequence, DynamicsError, Frame, SystemParams};

type M4 = Matrix4<C64>;

const TWO_PI: f64 = std::f64::consts::TAU;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("invalid transfer problem: {0}")]
    InvalidProblem(String),
    #[error("sequence grid does not match problem grid ({0})")]
    GridMismatch(String),
    #[error("bandwidth cutoff {cutoff} Hz exceeds the Nyquist frequency {nyquist} Hz")]
    CutoffAboveNyquist { cutoff: f64, nyquist: f64 },
    #[error("efficiency became non-finite (step size too large?)")]
    NonFiniteEfficiency,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
}

/// A state-transfer optimization problem on the rotating-frame grid.
#[derive(Debug, Clone)]
pub struct TransferProblem {
    pub params: SystemParams,
    pub initial: Operator,
    pub target: Operator,
    pub duration: f64,
    pub steps: usize,
    pub frame: Frame,
    pub bandwidth_cutoff_hz: Option<f64>,
}

impl TransferProblem {
    pub fn dt(&self) -> f64 {
        self.duration / self.steps as f64
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        self.params
            .validate()
            .map_err(|e| OptimizerError::InvalidProblem(e.to_string()))?;
        if self.frame != Frame::Rotating {
            return Err(OptimizerError::InvalidProblem(
                "optimization is defined on the rotating frame".to_string(),
            ));
        }
        if self.steps < 2 {
            return Err(OptimizerError::InvalidProblem(format!(
                "need at least 2 steps, got {}",
                self.steps
            )));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(OptimizerError::InvalidProblem(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        let norm_sq = trace_inner(&self.target, &self.target).re;
        if (norm_sq - 1.0).abs() > 1e-8 {
            return Err(OptimizerError::InvalidProblem(format!(
                "target is not trace-normalized: tr(target^2) = {norm_sq}"
            )));
        }
        if let Some(cutoff) = self.bandwidth_cutoff_hz {
            let nyquist = 0.5 / self.dt();
            if cutoff > nyquist * (1.0 + 1e-12) || cutoff < 0.0 {
                return Err(OptimizerError::CutoffAboveNyquist { cutoff, nyquist });
            }
        }
        Ok(())
    }
}

/// Optimizer settings. `step_scale` is the initial trust move as a fraction
/// of the channel bound; the step adapts by backtracking halving whenever
/// the efficiency would decrease.
#[derive(Debug, Clone)]
pub struct GrapeConfig {
    pub step_scale: f64,
    pub max_iters: usize,
    pub tolerance: f64,
    pub restarts: usize,
    pub init_amplitude: f64,
    /// Stop spawning restarts once this efficiency is reached.
    pub target_efficiency: Option<f64>,
}

impl Default for GrapeConfig {
    fn default() -> Self {
        GrapeConfig {
            step_scale: 0.05,
            max_iters: 1500,
            tolerance: 1e-7,
            restarts: 8,
            init_amplitude: 0.1,
            target_efficiency: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptResult {
    pub sequence: ControlSequence,
    pub efficiency: f64,
    pub iterations: usize,
    pub converged: bool,
    /// RNG seed of the winning restart.
    pub seed: u64,
}

/// The four control generators in Hz units: `dH/dc = 2 pi G`.
fn control_generators() -> [M4; 4] {
    [
        (basis_operator(BasisLabel::Sx) * TWO_PI).matrix().to_owned(),
        (basis_operator(BasisLabel::Sy) * TWO_PI).matrix().to_owned(),
        (basis_operator(BasisLabel::Ix) * TWO_PI).matrix().to_owned(),
        (basis_operator(BasisLabel::Iy) * TWO_PI).matrix().to_owned(),
    ]
}

struct StepData {
    u: M4,
    vecs: M4,
    vals: [f64; 4],
    rho_pre: M4,
}

struct ForwardPass {
    steps: Vec<StepData>,
    efficiency: f64,
}

fn drift_matrix(p: &SystemParams) -> M4 {
    (basis_operator(BasisLabel::Iz) * p.offset_rad_s
        + basis_operator(BasisLabel::TwoSzIz) * (std::f64::consts::PI * p.hyperfine_hz))
    .matrix()
    .to_owned()
}

/// Exponential `exp(-i H dt)` through the Hermitian eigendecomposition,
/// returning the factors needed for exact derivatives.
fn step_exp(h: &M4, dt: f64) -> (M4, M4, [f64; 4]) {
    let eig = nalgebra::SymmetricEigen::new(*h);
    let vals = [
        eig.eigenvalues[0],
        eig.eigenvalues[1],
        eig.eigenvalues[2],
        eig.eigenvalues[3],
    ];
    let mut d = M4::zeros();
    for k in 0..4 {
        let phase = -vals[k] * dt;
        d[(k, k)] = C64::new(phase.cos(), phase.sin());
    }
    let u = eig.eigenvectors * d * eig.eigenvectors.adjoint();
    (u, eig.eigenvectors, vals)
}

fn fast_ops_by_index(seq: &ControlSequence) -> Vec<Vec<M4>> {
    let n = seq.steps();
    let mut by_index: Vec<Vec<M4>> = vec![Vec::new(); n + 1];
    for fo in &seq.fast_ops {
        by_index[fo.index].push(fo.op.matrix().to_owned());
    }
    by_index
}

/// Forward sweep: step propagators with their eigenfactors, pre-step states,
/// and the final efficiency.
fn forward_pass(
    seq: &ControlSequence,
    prob: &TransferProblem,
    keep_steps: bool,
) -> Result<ForwardPass, OptimizerError> {
    let n = seq.steps();
    let dt = seq.dt;
    let drift = drift_matrix(&prob.params);
    let gens = control_generators();
    let by_index = fast_ops_by_index(seq);

    let mut rho = prob.initial.matrix().to_owned();
    let mut steps = Vec::with_capacity(if keep_steps { n } else { 0 });
    for k in 0..n {
        for f in &by_index[k] {
            rho = f * rho * f.adjoint();
        }
        let h = drift
            + gens[0] * C64::new(seq.u_x[k], 0.0)
            + gens[1] * C64::new(seq.u_y[k], 0.0)
            + gens[2] * C64::new(seq.v_x[k], 0.0)
            + gens[3] * C64::new(seq.v_y[k], 0.0);
        let (u, vecs, vals) = step_exp(&h, dt);
        let rho_pre = rho;
        rho = u * rho * u.adjoint();
        if keep_steps {
            steps.push(StepData {
                u,
                vecs,
                vals,
                rho_pre,
            });
        }
    }
    for f in &by_index[n] {
        rho = f * rho * f.adjoint();
    }
    let efficiency = transfer_efficiency(&Operator::from_matrix(rho), &prob.target)?;
    if !efficiency.is_finite() {
        return Err(OptimizerError::NonFiniteEfficiency);
    }
    Ok(ForwardPass { steps, efficiency })
}

/// Exact gradient of the transfer efficiency with respect to every step
/// amplitude, in 1/Hz. Channel order: `u_x, u_y, v_x, v_y`.
pub fn efficiency_gradient(
    seq: &ControlSequence,
    prob: &TransferProblem,
) -> Result<Vec<[f64; 4]>, OptimizerError> {
    let (grad, _) = gradient_and_efficiency(seq, prob)?;
    Ok(grad)
}

fn gradient_and_efficiency(
    seq: &ControlSequence,
    prob: &TransferProblem,
) -> Result<(Vec<[f64; 4]>, f64), OptimizerError> {
    prob.validate()?;
    if seq.steps() != prob.steps {
        return Err(OptimizerError::GridMismatch(format!(
            "sequence has {} steps, problem {}",
            seq.steps(),
            prob.steps
        )));
    }
    let dt = prob.dt();
    if (seq.dt - dt).abs() > 1e-12 * dt.max(1e-300) {
        return Err(OptimizerError::GridMismatch(format!(
            "sequence dt {} differs from problem dt {}",
            seq.dt, dt
        )));
    }
    seq.validate(None)?;

    let n = seq.steps();
    let fwd = forward_pass(seq, prob, true)?;
    let gens = control_generators();
    let by_index = fast_ops_by_index(seq);

    // Costate: lambda_k = B_k^dagger target B_k with B_k everything after
    // step k.
    let mut lambda = prob.target.matrix().to_owned();
    for f in by_index[n].iter().rev() {
        lambda = f.adjoint() * lambda * f;
    }
    let mut grad = vec![[0.0; 4]; n];
    for k in (0..n).rev() {
        let sd = &fwd.steps[k];
        // Q = V^dagger (rho_pre U^dagger lambda) V
        let q = sd.vecs.adjoint() * (sd.rho_pre * sd.u.adjoint() * lambda) * sd.vecs;
        // divided differences of f(x) = exp(-i x dt)
        let mut gamma = M4::zeros();
        let scale = sd.vals.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for p_i in 0..4 {
            for q_i in 0..4 {
                let lp = sd.vals[p_i];
                let lq = sd.vals[q_i];
                let fp = C64::new((-lp * dt).cos(), (-lp * dt).sin());
                gamma[(p_i, q_i)] = if (lp - lq).abs() > 1e-12 * scale {
                    let fq = C64::new((-lq * dt).cos(), (-lq * dt).sin());
                    (fp - fq) / C64::new(lp - lq, 0.0)
                } else {
                    C64::new(0.0, -dt) * fp
                };
            }
        }
        for (ch, gen) in gens.iter().enumerate() {
            let w = sd.vecs.adjoint() * gen * sd.vecs;
            let mut tr = C64::new(0.0, 0.0);
            for p_i in 0..4 {
                for q_i in 0..4 {
                    tr += gamma[(p_i, q_i)] * w[(p_i, q_i)] * q[(q_i, p_i)];
                }
            }
            grad[k][ch] = 2.0 * tr.re;
        }
        lambda = sd.u.adjoint() * lambda * sd.u;
        for f in by_index[k].iter().rev() {
            lambda = f.adjoint() * lambda * f;
        }
    }
    Ok((grad, fwd.efficiency))
}

/// Radial clipping of each step's `(u_x, u_y)` and `(v_x, v_y)` pairs onto
/// their amplitude disks. Feasible points are untouched; idempotent.
pub fn project_amplitude(seq: &ControlSequence, u_max: f64, v_max: f64) -> ControlSequence {
    let mut out = seq.clone();
    for k in 0..out.steps() {
        let un = (out.u_x[k].powi(2) + out.u_y[k].powi(2)).sqrt();
        if un > u_max {
            let s = u_max / un;
            out.u_x[k] *= s;
            out.u_y[k] *= s;
        }
        let vn = (out.v_x[k].powi(2) + out.v_y[k].powi(2)).sqrt();
        if vn > v_max {
            let s = v_max / vn;
            out.v_x[k] *= s;
            out.v_y[k] *= s;
        }
    }
    out
}

/// Hard frequency-domain truncation: each channel is transformed, components
/// with `|f| > cutoff` are zeroed, and the real part of the inverse
/// transform is returned. `cutoff = Nyquist` is the identity.
pub fn project_bandwidth(
    seq: &ControlSequence,
    cutoff_hz: f64,
) -> Result<ControlSequence, OptimizerError> {
    let n = seq.steps();
    let nyquist = 0.5 / seq.dt;
    if cutoff_hz > nyquist * (1.0 + 1e-12) || cutoff_hz < 0.0 {
        return Err(OptimizerError::CutoffAboveNyquist {
            cutoff: cutoff_hz,
            nyquist,
        });
    }
    if n == 0 {
        return Ok(seq.clone());
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);
    let mut out = seq.clone();
    let df = 1.0 / (n as f64 * seq.dt);
    for channel in [&mut out.u_x, &mut out.u_y, &mut out.v_x, &mut out.v_y] {
        let mut buf: Vec<C64> = channel.iter().map(|&x| C64::new(x, 0.0)).collect();
        fft.process(&mut buf);
        for (k, z) in buf.iter_mut().enumerate() {
            let idx = k.min(n - k) as f64;
            if idx * df > cutoff_hz * (1.0 + 1e-12) {
                *z = C64::new(0.0, 0.0);
            }
        }
        ifft.process(&mut buf);
        for (x, z) in channel.iter_mut().zip(buf.iter()) {
            *x = z.re / n as f64;
        }
    }
    Ok(out)
}

/// Uniform per-channel-pair rescaling into the amplitude disks. Unlike the
/// radial clip this preserves band-limitedness, so it is used for the final
/// feasibility pass of bandwidth-constrained optimizations.
fn rescale_amplitude(seq: &ControlSequence, u_max: f64, v_max: f64) -> ControlSequence {
    let mut out = seq.clone();
    let mut peak_u = 0.0f64;
    let mut peak_v = 0.0f64;
    for k in 0..out.steps() {
        peak_u = peak_u.max((out.u_x[k].powi(2) + out.u_y[k].powi(2)).sqrt());
        peak_v = peak_v.max((out.v_x[k].powi(2) + out.v_y[k].powi(2)).sqrt());
    }
    if peak_u > u_max {
        let s = u_max / peak_u;
        out.u_x.iter_mut().for_each(|x| *x *= s);
        out.u_y.iter_mut().for_each(|x| *x *= s);
    }
    if peak_v > v_max {
        let s = v_max / peak_v;
        out.v_x.iter_mut().for_each(|x| *x *= s);
        out.v_y.iter_mut().for_each(|x| *x *= s);
    }
    out
}

fn project(
    seq: &ControlSequence,
    prob: &TransferProblem,
) -> Result<ControlSequence, OptimizerError> {
    let projected = match prob.bandwidth_cutoff_hz {
        Some(cutoff) => project_bandwidth(seq, cutoff)?,
        None => seq.clone(),
    };
    Ok(project_amplitude(
        &projected,
        prob.params.u_max_hz,
        prob.params.v_max_hz,
    ))
}

struct RestartOutcome {
    seq: ControlSequence,
    efficiency: f64,
    iterations: usize,
    converged: bool,
    seed: u64,
}

fn run_restart(
    prob: &TransferProblem,
    config: &GrapeConfig,
    seed: u64,
) -> Result<RestartOutcome, OptimizerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = prob.steps;
    let dt = prob.dt();
    let mut seq = ControlSequence::zeros(dt, n);
    let ua = config.init_amplitude * prob.params.u_max_hz;
    let va = config.init_amplitude * prob.params.v_max_hz;
    for k in 0..n {
        seq.u_x[k] = rng.random_range(-ua..=ua);
        seq.u_y[k] = rng.random_range(-ua..=ua);
        seq.v_x[k] = rng.random_range(-va..=va);
        seq.v_y[k] = rng.random_range(-va..=va);
    }
    seq = project(&seq, prob)?;

    let mut eta = forward_pass(&seq, prob, false)?.efficiency;
    let mut step: Option<f64> = None;
    let mut iterations = 0;
    let mut converged = false;
    let mut window_ref = eta;
    let mut window_start = 0;

    let bounds = [
        prob.params.u_max_hz,
        prob.params.u_max_hz,
        prob.params.v_max_hz,
        prob.params.v_max_hz,
    ];

    for iter in 0..config.max_iters {
        iterations = iter + 1;
        let (grad, eta_now) = gradient_and_efficiency(&seq, prob)?;
        eta = eta_now;
        if let Some(t) = config.target_efficiency {
            if eta >= t {
                converged = true;
                break;
            }
        }
        // preconditioned ascent direction: bound^2-scaled gradient
        let mut dir = vec![[0.0; 4]; n];
        let mut peak_move = 0.0f64;
        for k in 0..n {
            for ch in 0..4 {
                dir[k][ch] = bounds[ch] * bounds[ch] * grad[k][ch];
                peak_move = peak_move.max(dir[k][ch].abs() / bounds[ch].max(1e-300));
            }
        }
        if peak_move <= 0.0 || !peak_move.is_finite() {
            converged = true;
            break;
        }
        let mut s = step.unwrap_or(config.step_scale / peak_move);
        let mut improved = false;
        for _ in 0..40 {
            let mut cand = seq.clone();
            for k in 0..n {
                cand.u_x[k] += s * dir[k][0];
                cand.u_y[k] += s * dir[k][1];
                cand.v_x[k] += s * dir[k][2];
                cand.v_y[k] += s * dir[k][3];
            }
            let cand = project(&cand, prob)?;
            let cand_eta = forward_pass(&cand, prob, false)?.efficiency;
            if cand_eta > eta {
                seq = cand;
                eta = cand_eta;
                step = Some(s * 1.3);
                improved = true;
                break;
            }
            s *= 0.5;
        }
        if !improved {
            converged = true;
            break;
        }
        // convergence window on the best efficiency
        if iter - window_start >= 25 {
            if eta - window_ref < config.tolerance {
                converged = true;
                break;
            }
            window_ref = eta;
            window_start = iter;
        }
    }

    // Final feasibility pass: for bandwidth-limited problems the radial clip
    // reintroduces out-of-band content, so project once more and rescale
    // instead of clipping.
    if let Some(cutoff) = prob.bandwidth_cutoff_hz {
        let band = project_bandwidth(&seq, cutoff)?;
        seq = rescale_amplitude(&band, prob.params.u_max_hz, prob.params.v_max_hz);
        eta = forward_pass(&seq, prob, false)?.efficiency;
    }

    Ok(RestartOutcome {
        seq,
        efficiency: eta,
        iterations,
        converged,
        seed,
    })
}

/// Projected gradient ascent from `restarts` seeded random initializations;
/// the best outcome is returned. Deterministic for a fixed `seed`: restart
/// `r` uses `seed + r`, and the reduction prefers higher efficiency with
/// earlier restarts breaking ties.
pub fn grape_optimize(
    prob: &TransferProblem,
    config: &GrapeConfig,
    seed: u64,
) -> Result<OptResult, OptimizerError> {
    prob.validate()?;
    let mut best: Option<RestartOutcome> = None;
    for r in 0..config.restarts.max(1) {
        let outcome = run_restart(prob, config, seed.wrapping_add(r as u64))?;
        let better = match &best {
            None => true,
            Some(b) => outcome.efficiency > b.efficiency,
        };
        if better {
            best = Some(outcome);
        }
        if let (Some(t), Some(b)) = (config.target_efficiency, &best) {
            if b.efficiency >= t {
                break;
            }
        }
    }
    let best = best.expect("at least one restart ran");
    // Report the efficiency of a fresh propagation of the returned sequence.
    let traj = propagate(
        &best.seq,
        &prob.params,
        Frame::Rotating,
        &prob.initial,
        false,
    )?;
    let efficiency = transfer_efficiency(traj.final_state(), &prob.target)?;
    Ok(OptResult {
        sequence: best.seq,
        efficiency,
        iterations: best.iterations,
        converged: best.converged,
        seed: best.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{basis_operator as op, conjugate};
    use crate::dynamics::propagate_efficiency;
    use approx::assert_abs_diff_eq;
    use BasisLabel::*;

    fn small_problem(n: usize, cutoff: Option<f64>) -> TransferProblem {
        TransferProblem {
            params: SystemParams::new(1e5, 1e4, 5e3).unwrap(),
            initial: op(Sz),
            target: op(Iz),
            duration: n as f64 * 1e-5,
            steps: n,
            frame: Frame::Rotating,
            bandwidth_cutoff_hz: cutoff,
        }
    }

    fn random_feasible_sequence(prob: &TransferProblem, seed: u64) -> ControlSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seq = ControlSequence::zeros(prob.dt(), prob.steps);
        for k in 0..prob.steps {
            seq.u_x[k] = rng.random_range(-0.6..0.6) * prob.params.u_max_hz;
            seq.u_y[k] = rng.random_range(-0.6..0.6) * prob.params.u_max_hz;
            seq.v_x[k] = rng.random_range(-0.6..0.6) * prob.params.v_max_hz;
            seq.v_y[k] = rng.random_range(-0.6..0.6) * prob.params.v_max_hz;
        }
        seq
    }

    /// Random low-harmonic controls: smooth enough that every gradient
    /// component stays far above the finite-difference roundoff floor.
    fn random_smooth_sequence(prob: &TransferProblem, seed: u64) -> ControlSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = prob.steps;
        let mut seq = ControlSequence::zeros(prob.dt(), n);
        let bounds = [
            prob.params.u_max_hz,
            prob.params.u_max_hz,
            prob.params.v_max_hz,
            prob.params.v_max_hz,
        ];
        for (ch, bound) in bounds.iter().enumerate() {
            let coeffs: Vec<(f64, f64)> = (0..3)
                .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            for k in 0..n {
                let x = TWO_PI * k as f64 / n as f64;
                let mut val = 0.0;
                for (m, (a, b)) in coeffs.iter().enumerate() {
                    let arg = (m + 1) as f64 * x;
                    val += a * arg.sin() + b * arg.cos();
                }
                let sample = 0.2 * bound * val;
                match ch {
                    0 => seq.u_x[k] = sample,
                    1 => seq.u_y[k] = sample,
                    2 => seq.v_x[k] = sample,
                    _ => seq.v_y[k] = sample,
                }
            }
        }
        seq
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let params = SystemParams::new(1e4, 4e3, 2e3).unwrap();
        let n = 64;
        let prob = TransferProblem {
            params,
            initial: op(Sz),
            target: op(Iz),
            duration: n as f64 * 4e-5,
            steps: n,
            frame: Frame::Rotating,
            bandwidth_cutoff_hz: None,
        };
        let seq = random_smooth_sequence(&prob, 7);
        let grad = efficiency_gradient(&seq, &prob).unwrap();
        let h = 1e-3; // Hz
        let eta_of = |s: &ControlSequence| forward_pass(s, &prob, false).unwrap().efficiency;
        fn channel(s: &mut ControlSequence, ch: usize) -> &mut Vec<f64> {
            match ch {
                0 => &mut s.u_x,
                1 => &mut s.u_y,
                2 => &mut s.v_x,
                _ => &mut s.v_y,
            }
        }
        let fd_at = |k: usize, ch: usize| {
            let mut plus = seq.clone();
            let mut minus = seq.clone();
            channel(&mut plus, ch)[k] += h;
            channel(&mut minus, ch)[k] -= h;
            (eta_of(&plus) - eta_of(&minus)) / (2.0 * h)
        };
        let mut max_fd: f64 = 0.0;
        let mut fds = Vec::new();
        for k in (0..prob.steps).step_by(9) {
            for ch in 0..4 {
                let fd = fd_at(k, ch);
                max_fd = max_fd.max(fd.abs());
                fds.push((k, ch, fd));
            }
        }
        // Components below ~5% of the gradient scale sit at the oracle's
        // roundoff floor (|delta eta| ~ 1e-15 against 2h * g), so the
        // relative comparison uses that scale as its denominator floor.
        for (k, ch, fd) in fds {
            let denom = fd.abs().max(0.05 * max_fd);
            let rel = (grad[k][ch] - fd).abs() / denom;
            assert!(
                rel < 1e-6,
                "step {k} channel {ch}: grad {:.6e} vs fd {fd:.6e} (rel {rel:.3e})",
                grad[k][ch],
            );
        }
    }

    #[test]
    fn gradient_vanishes_at_interior_maximum() {
        // Make the target exactly reachable by an interior sequence; eta = 1
        // is the global maximum, so the gradient must vanish there.
        let mut prob = small_problem(32, None);
        let seq = random_feasible_sequence(&prob, 3);
        let traj = propagate(&seq, &prob.params, Frame::Rotating, &prob.initial, false).unwrap();
        prob.target = conjugate(&traj.final_propagator, &prob.initial);
        let grad = efficiency_gradient(&seq, &prob).unwrap();
        let norm = grad
            .iter()
            .flat_map(|g| g.iter())
            .map(|g| g.abs())
            .fold(0.0f64, f64::max);
        assert!(norm < 1e-6, "gradient norm {norm:.3e} at the maximum");
    }

    #[test]
    fn flipping_target_sign_flips_gradient() {
        let mut prob = small_problem(16, None);
        let seq = random_feasible_sequence(&prob, 11);
        let g1 = efficiency_gradient(&seq, &prob).unwrap();
        prob.target = -prob.target;
        let g2 = efficiency_gradient(&seq, &prob).unwrap();
        for k in 0..prob.steps {
            for ch in 0..4 {
                assert_abs_diff_eq!(g1[k][ch], -g2[k][ch], epsilon = 1e-18);
            }
        }
    }

    #[test]
    fn gradient_rejects_grid_mismatch() {
        let prob = small_problem(16, None);
        let seq = ControlSequence::zeros(prob.dt(), 8);
        assert!(matches!(
            efficiency_gradient(&seq, &prob),
            Err(OptimizerError::GridMismatch(_))
        ));
    }

    #[test]
    fn amplitude_projection_examples() {
        let mut seq = ControlSequence::zeros(1e-6, 2);
        let v = 100.0;
        seq.v_x[0] = 3.0 * v;
        seq.v_y[0] = 4.0 * v;
        seq.v_x[1] = 0.3 * v;
        seq.v_y[1] = 0.1 * v;
        let out = project_amplitude(&seq, 50.0, v);
        assert_abs_diff_eq!(out.v_x[0], 0.6 * v, epsilon = 1e-9);
        assert_abs_diff_eq!(out.v_y[0], 0.8 * v, epsilon = 1e-9);
        // feasible step untouched
        assert_eq!(out.v_x[1], seq.v_x[1]);
        // idempotent
        let twice = project_amplitude(&out, 50.0, v);
        for k in 0..2 {
            assert_eq!(twice.v_x[k], out.v_x[k]);
            assert_eq!(twice.v_y[k], out.v_y[k]);
        }
    }

    #[test]
    fn bandwidth_projection_keeps_in_band_tone() {
        let n = 500; // 5 MHz sits exactly on bin 25
        let dt = 1e-8; // Nyquist 50 MHz
        let mut seq = ControlSequence::zeros(dt, n);
        for k in 0..n {
            seq.v_x[k] = (TWO_PI * 5e6 * (k as f64) * dt).sin() * 100.0;
        }
        let out = project_bandwidth(&seq, 6e6).unwrap();
        for k in 0..n {
            assert_abs_diff_eq!(out.v_x[k], seq.v_x[k], epsilon = 1e-9);
        }
        // cutoff at Nyquist is the identity
        let out = project_bandwidth(&seq, 0.5 / dt).unwrap();
        for k in 0..n {
            assert_abs_diff_eq!(out.v_x[k], seq.v_x[k], epsilon = 1e-9);
        }
    }

    #[test]
    fn bandwidth_projection_extracts_square_fundamental() {
        // square wave with fundamental A/2; a cutoff just above keeps only
        // the (4/pi) v sine. Oracle: direct least-squares projection onto
        // the fundamental.
        let a = 10e6;
        let v = 100.0;
        let dt = 1.0 / (32.0 * a);
        let n = 1024; // 16 full periods of sin(pi A t)
        let mut seq = ControlSequence::zeros(dt, n);
        for k in 0..n {
            let t = (k as f64 + 0.5) * dt;
            seq.v_x[k] = (std::f64::consts::PI * a * t).sin().signum() * v;
        }
        let out = project_bandwidth(&seq, 6e6).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..n {
            let t = (k as f64 + 0.5) * dt;
            let s = (std::f64::consts::PI * a * t).sin();
            num += out.v_x[k] * s;
            den += s * s;
        }
        let c = num / den;
        assert_abs_diff_eq!(c, 4.0 / std::f64::consts::PI * v, epsilon = 0.02 * v);
        for k in 0..n {
            let t = (k as f64 + 0.5) * dt;
            let want = c * (std::f64::consts::PI * a * t).sin();
            assert!((out.v_x[k] - want).abs() < 1e-6 * v);
        }
    }

    #[test]
    fn bandwidth_rejects_cutoff_above_nyquist() {
        let seq = ControlSequence::zeros(1e-6, 16);
        assert!(matches!(
            project_bandwidth(&seq, 1e6),
            Err(OptimizerError::CutoffAboveNyquist { .. })
        ));
    }

    #[test]
    fn grape_solves_small_transfer() {
        // Gentle scale so the test stays fast: A/v = 50.
        let params = SystemParams::new(1e5, 1e4, 2e3).unwrap();
        let t = 1.0 / (2.0 * params.v_max_hz);
        let steps = 400;
        let prob = TransferProblem {
            params,
            initial: op(Sz),
            target: op(Iz),
            duration: t,
            steps,
            frame: Frame::Rotating,
            bandwidth_cutoff_hz: None,
        };
        let config = GrapeConfig {
            target_efficiency: Some(0.95),
            max_iters: 800,
            ..Default::default()
        };
        let result = grape_optimize(&prob, &config, 42).unwrap();
        assert!(
            result.efficiency >= 0.95,
            "grape efficiency {:.4}",
            result.efficiency
        );
        // feasibility of the returned sequence
        result.sequence.validate(Some(&prob.params)).unwrap();
        // the reported efficiency matches a fresh propagation
        let eta = propagate_efficiency(
            &result.sequence,
            &prob.params,
            Frame::Rotating,
            &prob.initial,
            &prob.target,
        )
        .unwrap();
        assert_abs_diff_eq!(eta, result.efficiency, epsilon = 1e-9);
    }

    #[test]
    fn grape_is_deterministic_for_fixed_seed() {
        let prob = small_problem(64, None);
        let config = GrapeConfig {
            restarts: 2,
            max_iters: 40,
            ..Default::default()
        };
        let a = grape_optimize(&prob, &config, 9).unwrap();
        let b = grape_optimize(&prob, &config, 9).unwrap();
        assert_eq!(a.efficiency.to_bits(), b.efficiency.to_bits());
        for k in 0..prob.steps {
            assert_eq!(a.sequence.v_x[k].to_bits(), b.sequence.v_x[k].to_bits());
            assert_eq!(a.sequence.u_y[k].to_bits(), b.sequence.u_y[k].to_bits());
        }
        assert_eq!(a.seed, b.seed);
    }

    #[test]
    fn grape_output_respects_bandwidth_feasibility() {
        let prob = small_problem(128, Some(2e4));
        let config = GrapeConfig {
            restarts: 2,
            max_iters: 60,
            ..Default::default()
        };
        let result = grape_optimize(&prob, &config, 5).unwrap();
        result.sequence.validate(Some(&prob.params)).unwrap();
        // out-of-band content must vanish
        let band = project_bandwidth(&result.sequence, 2e4).unwrap();
        for k in 0..prob.steps {
            assert_abs_diff_eq!(band.v_x[k], result.sequence.v_x[k], epsilon = 1e-9);
            assert_abs_diff_eq!(band.u_x[k], result.sequence.u_x[k], epsilon = 1e-9);
        }
    }
}
