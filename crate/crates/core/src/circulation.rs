//! Lumped-parameter circulation: a two-element windkessel for the
//! ejection phase and a four-phase cardiac-cycle state machine driving
//! the cavity-pressure boundary condition.

use crate::{Error, Result, MMHG};

#[derive(Debug, Clone, Copy)]
pub struct CirculationParams {
    /// Arterial compliance, m^3/Pa.
    pub compliance: f64,
    /// Peripheral resistance, Pa s/m^3.
    pub resistance: f64,
    /// End-diastolic pressure, Pa.
    pub p_ed: f64,
    /// Aortic-valve opening pressure, Pa.
    pub p_avo: f64,
    /// Mitral-valve opening pressure, Pa.
    pub p_mvo: f64,
    /// Heartbeat period, s.
    pub period: f64,
}

impl CirculationParams {
    pub fn baseline() -> Self {
        CirculationParams {
            compliance: 4.5e-9,
            resistance: 3.5e7,
            p_ed: 15.0 * MMHG,
            p_avo: 82.5 * MMHG,
            p_mvo: 5.0 * MMHG,
            period: 0.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.compliance <= 0.0 || self.resistance <= 0.0 || self.period <= 0.0 {
            return Err(Error::invalid("compliance, resistance, period must be positive"));
        }
        if !(self.p_mvo < self.p_ed && self.p_ed < self.p_avo) {
            return Err(Error::invalid(format!(
                "pressure ordering must be p_mvo < p_ed < p_avo, got {} / {} / {}",
                self.p_mvo, self.p_ed, self.p_avo
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    IsoContraction,
    Ejection,
    IsoRelaxation,
    Filling,
}

/// One backward-Euler step of the two-element windkessel
/// C dp/dt + p/R = -dV/dt, where dV/dt < 0 during ejection.
pub fn windkessel_step(params: &CirculationParams, p_prev: f64, dvdt: f64, dt: f64) -> f64 {
    let c = params.compliance;
    let r = params.resistance;
    (c * p_prev / dt - dvdt) / (c / dt + 1.0 / r)
}

/// Phase-transition bookkeeping of the cardiac cycle.
#[derive(Debug, Clone)]
pub struct CycleState {
    pub phase: Phase,
    /// Steps completed while in ejection.
    pub ejection_steps: usize,
    /// Time of aortic-valve closure.
    pub t_avc: Option<f64>,
    /// Pressure at aortic-valve closure.
    pub p_avc: f64,
    /// Time of mitral-valve opening; the filling ramp is anchored there.
    pub t_mvo: Option<f64>,
    /// Pressure at mitral-valve opening.
    pub p_mvo_event: f64,
}

impl CycleState {
    pub fn new() -> Self {
        CycleState {
            phase: Phase::IsoContraction,
            ejection_steps: 0,
            t_avc: None,
            p_avc: 0.0,
            t_mvo: None,
            p_mvo_event: 0.0,
        }
    }
}

impl Default for CycleState {
    fn default() -> Self {
        Self::new()
    }
}

/// Advance the cycle state machine after a completed time step.
///
/// `p` is the cavity pressure just computed, `dvdt` the backward
/// difference of cavity volume, `t` the end-of-step time.
pub fn advance_phase(params: &CirculationParams, state: &mut CycleState, p: f64, dvdt: f64, t: f64) {
    match state.phase {
        Phase::IsoContraction => {
            if p >= params.p_avo {
                state.phase = Phase::Ejection;
                state.ejection_steps = 0;
            }
        }
        Phase::Ejection => {
            state.ejection_steps += 1;
            // valve closes when outflow stops; require one completed
            // ejection step so the opening transient cannot close it
            if state.ejection_steps > 1 && dvdt >= 0.0 {
                state.phase = Phase::IsoRelaxation;
                state.t_avc = Some(t);
                state.p_avc = p;
            }
        }
        Phase::IsoRelaxation => {
            if p <= params.p_mvo {
                state.phase = Phase::Filling;
                state.t_mvo = Some(t);
                state.p_mvo_event = p;
            }
        }
        Phase::Filling => {}
    }
}

/// Prescribed cavity pressure during filling: linear ramp from the
/// pressure reached at mitral opening up to end-diastolic pressure at the
/// end of the beat.
pub fn filling_pressure(params: &CirculationParams, t_open: f64, p_open: f64, t: f64) -> f64 {
    let t_end = params.period;
    if t >= t_end {
        return params.p_ed;
    }
    let s = ((t - t_open) / (t_end - t_open)).clamp(0.0, 1.0);
    p_open + s * (params.p_ed - p_open)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_params_valid() {
        assert!(CirculationParams::baseline().validate().is_ok());
    }

    #[test]
    fn bad_orderings_rejected() {
        let mut p = CirculationParams::baseline();
        p.p_avo = p.p_mvo; // collapses the ordering
        assert!(p.validate().is_err());
        let mut p2 = CirculationParams::baseline();
        p2.resistance = 0.0;
        assert!(p2.validate().is_err());
    }

    #[test]
    fn windkessel_matches_analytic_decay() {
        // with dV/dt = 0 the ODE decays as p(t) = p0 exp(-t/(RC));
        // backward Euler gives p_n = p0 / (1 + dt/(RC))^n, which converges
        // to the analytic value as dt -> 0
        let params = CirculationParams::baseline();
        let rc = params.resistance * params.compliance;
        let p0 = 100.0 * MMHG;
        let t_final = 0.1;
        let analytic = p0 * (-t_final / rc).exp();

        let mut err_prev = f64::INFINITY;
        for &n in &[100usize, 1000, 10000] {
            let dt = t_final / n as f64;
            let mut p = p0;
            for _ in 0..n {
                p = windkessel_step(&params, p, 0.0, dt);
            }
            let discrete = p0 / (1.0 + dt / rc).powi(n as i32);
            assert!((p - discrete).abs() < 1e-9 * p0, "closed form of the recursion");
            let err = (p - analytic).abs();
            assert!(err < err_prev, "first-order convergence in dt");
            err_prev = err;
        }
        assert!(err_prev < 1e-3 * analytic);
    }

    #[test]
    fn windkessel_steady_state_balances_outflow() {
        // constant ejection rate dV/dt = -q: fixed point is p = q R
        let params = CirculationParams::baseline();
        let q = 3.0e-4; // m^3/s
        let dt = 2.5e-3;
        let mut p = 80.0 * MMHG;
        for _ in 0..100000 {
            p = windkessel_step(&params, p, -q, dt);
        }
        let expect = q * params.resistance;
        assert!((p - expect).abs() < 1e-6 * expect);
    }

    #[test]
    fn windkessel_pressure_rises_during_outflow() {
        let params = CirculationParams::baseline();
        // outflow strong enough that its fixed point q R exceeds p0
        let p0 = params.p_avo;
        let q = 2.0 * p0 / params.resistance;
        let p1 = windkessel_step(&params, p0, -q, 2.5e-3);
        assert!(p1 > p0);
        // and decays with zero flow
        let p2 = windkessel_step(&params, p0, 0.0, 2.5e-3);
        assert!(p2 < p0);
    }

    #[test]
    fn phase_machine_full_cycle() {
        let params = CirculationParams::baseline();
        let mut st = CycleState::new();
        assert_eq!(st.phase, Phase::IsoContraction);

        // pressure below the aortic threshold: stay
        advance_phase(&params, &mut st, 0.9 * params.p_avo, 0.0, 0.1);
        assert_eq!(st.phase, Phase::IsoContraction);

        // valve opens exactly at the threshold
        advance_phase(&params, &mut st, params.p_avo, 0.0, 0.12);
        assert_eq!(st.phase, Phase::Ejection);

        // ongoing outflow keeps ejecting
        advance_phase(&params, &mut st, 90.0 * MMHG, -1.0e-5, 0.13);
        assert_eq!(st.phase, Phase::Ejection);

        // flow reversal closes the aortic valve
        advance_phase(&params, &mut st, 85.0 * MMHG, 1.0e-6, 0.30);
        assert_eq!(st.phase, Phase::IsoRelaxation);
        assert_eq!(st.t_avc, Some(0.30));

        // relaxation holds until mitral opening
        advance_phase(&params, &mut st, 20.0 * MMHG, 0.0, 0.35);
        assert_eq!(st.phase, Phase::IsoRelaxation);
        advance_phase(&params, &mut st, params.p_mvo, 0.0, 0.40);
        assert_eq!(st.phase, Phase::Filling);
        assert_eq!(st.t_mvo, Some(0.40));
        assert!((st.p_mvo_event - params.p_mvo).abs() < 1e-12);

        // filling is terminal within the beat
        advance_phase(&params, &mut st, 10.0 * MMHG, 1.0e-5, 0.6);
        assert_eq!(st.phase, Phase::Filling);
    }

    #[test]
    fn ejection_needs_one_completed_step_before_closing() {
        // dV/dt >= 0 on the very first ejection step must not close the
        // valve: the backward difference still reflects the contraction
        let params = CirculationParams::baseline();
        let mut st = CycleState::new();
        advance_phase(&params, &mut st, params.p_avo, 0.0, 0.1);
        assert_eq!(st.phase, Phase::Ejection);
        advance_phase(&params, &mut st, 85.0 * MMHG, 1.0e-7, 0.1025);
        assert_eq!(st.phase, Phase::Ejection, "first step cannot close the valve");
        advance_phase(&params, &mut st, 85.0 * MMHG, 1.0e-7, 0.105);
        assert_eq!(st.phase, Phase::IsoRelaxation);
    }

    #[test]
    fn filling_ramp_endpoints_and_monotonicity() {
        let params = CirculationParams::baseline();
        let t_open = 0.55;
        let p_open = 0.95 * params.p_mvo;
        assert!((filling_pressure(&params, t_open, p_open, t_open) - p_open).abs() < 1e-12);
        assert!(
            (filling_pressure(&params, t_open, p_open, params.period) - params.p_ed).abs() < 1e-12
        );
        // clamped beyond the beat
        assert_eq!(filling_pressure(&params, t_open, p_open, 1.5), params.p_ed);
        let mut prev = -1.0;
        for k in 0..=100 {
            let t = t_open + (params.period - t_open) * k as f64 / 100.0;
            let p = filling_pressure(&params, t_open, p_open, t);
            assert!(p >= prev);
            prev = p;
        }
    }
}
