//! Closed-loop tracking simulation.
//!
//! The plant is the analytic rigid-body model integrated by the semi-implicit
//! stepper; the controller only sees the measured state and the scenario's
//! kinematic reference. Contact and adhesion follow the reference schedule,
//! as a gait sequencer would command them, with a velocity projection at
//! every touchdown. A run ends early when a joint coordinate leaves the
//! plausible range or the dynamics can no longer be solved; the first such
//! instant is reported as the divergence time.

use serde::{Deserialize, Serialize};

use crate::data::{reference_path, Scenario};
use crate::dynamics::{inverse_dynamics, project_contact_consistent, step};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::repr::{build_sample, DesiredJoints, SampleMeta, TargetMode};
use crate::robot::{JointTorques, RobotModel, RobotState};

/// Tracking loop parameters. Joint gains apply torque feedback directly;
/// the oracle gains shape the commanded accelerations of the computed-torque
/// mode instead.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimConfig {
    pub rate_hz: f64,
    /// Simulated horizon; the scenario duration when absent.
    pub duration: Option<f64>,
    pub kp: f64,
    pub kd: f64,
    pub oracle_kp: f64,
    pub oracle_kd: f64,
    /// Every how many control steps a log row is emitted.
    pub log_every: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            rate_hz: 1000.0,
            duration: None,
            kp: 5.0,
            kd: 0.5,
            oracle_kp: 100.0,
            oracle_kd: 20.0,
            log_every: 10,
        }
    }
}

/// Torque source for the rollout.
pub enum Controller {
    /// Joint PD feedback alone.
    Pd,
    /// Learned inverse dynamics as pure feedforward; the checkpoint must
    /// predict torques from desired next states.
    Learned(Model),
    /// Learned feedforward plus joint PD feedback.
    LearnedPd(Model),
    /// Computed torque through the analytic model, with acceleration-space
    /// feedback projected onto the contact constraints.
    OracleComputedTorque,
}

impl Controller {
    pub fn name(&self) -> &'static str {
        match self {
            Controller::Pd => "pd",
            Controller::Learned(_) => "learned",
            Controller::LearnedPd(_) => "learned_pd",
            Controller::OracleComputedTorque => "oracle",
        }
    }
}

/// One decimated log row of a rollout.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimRow {
    pub t: f64,
    pub err_rms: f64,
    pub err_max: f64,
    pub tau_max: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Divergence {
    pub t: f64,
    pub reason: String,
}

/// Rollout outcome: joint tracking statistics over the completed portion and
/// the divergence record if the run ended early.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimResult {
    pub controller: String,
    pub steps_done: usize,
    pub duration_done: f64,
    pub rms_error: f64,
    pub max_error: f64,
    pub diverged: Option<Divergence>,
    pub rows: Vec<SimRow>,
}

fn pd_torques(
    model: &RobotModel,
    state: &RobotState,
    reference: &RobotState,
    kp: f64,
    kd: f64,
) -> JointTorques {
    let mut tau = JointTorques::zeros(model);
    for j in 0..tau.data.len() {
        tau.data[j] =
            kp * (reference.q[j] - state.q[j]) + kd * (reference.qd[j] - state.qd[j]);
    }
    tau
}

fn learned_torques(
    robot: &RobotModel,
    model: &Model,
    state: &RobotState,
    reference: &RobotState,
    next_reference: &RobotState,
) -> Result<JointTorques> {
    // The query is the commanded context with the measured joint state
    // substituted in. Everything about the base stays exactly as the
    // reference states it, for two reasons: the base motion is a command,
    // not a measurement (echoing the plant's last acceleration back in
    // would close a feedback loop with no damping), and slots that are
    // identically zero along the reference, such as the acceleration
    // component along the wall normal, carry floored normalization scales
    // that would magnify any re-expression residue thousandsfold.
    let mut query = reference.clone();
    query.q = state.q.clone();
    query.qd = state.qd.clone();
    query.contact = state.contact.clone();
    query.adhesion = state.adhesion.clone();
    let desired =
        DesiredJoints { q: next_reference.q.clone(), qd: next_reference.qd.clone() };
    let sample = build_sample(
        robot,
        &query,
        &JointTorques::zeros(robot),
        TargetMode::NextState,
        Some(&desired),
        SampleMeta::unlabeled(),
    );
    model.predict(robot, &sample)
}

fn oracle_torques(
    robot: &RobotModel,
    state: &RobotState,
    reference: &RobotState,
    kp: f64,
    kd: f64,
) -> Result<JointTorques> {
    let mut cmd = state.clone();
    for j in 0..cmd.q.len() {
        cmd.qdd[j] = reference.qdd[j]
            + kp * (reference.q[j] - state.q[j])
            + kd * (reference.qd[j] - state.qd[j]);
    }
    // Reference base accelerations re-expressed in the simulated body frame.
    let rel = state.r_wb.inverse() * reference.r_wb;
    cmd.a_b = rel.apply(&reference.a_b);
    cmd.alpha_b = rel.apply(&reference.alpha_b);
    let attached = cmd.attached_legs();
    let cmd = project_contact_consistent(robot, &cmd, &attached)?;
    Ok(inverse_dynamics(robot, &cmd, &attached)?.torques)
}

/// Simulates the scenario under the controller and reports joint tracking
/// quality against the reference.
pub fn rollout(
    robot: &RobotModel,
    sc: &Scenario,
    controller: &Controller,
    cfg: &SimConfig,
) -> Result<SimResult> {
    if let Controller::Learned(m) | Controller::LearnedPd(m) = controller {
        if m.spec.mode != TargetMode::NextState {
            return Err(Error::Config(
                "tracking needs a checkpoint that predicts from desired next states".into(),
            ));
        }
    }
    if !(cfg.rate_hz > 0.0) {
        return Err(Error::Config(format!("control rate {} must be positive", cfg.rate_hz)));
    }
    let reference = reference_path(robot, sc)?;
    let duration = cfg.duration.unwrap_or(reference.duration);
    let dt = 1.0 / cfg.rate_hz;
    let n_steps = (duration * cfg.rate_hz).round() as usize;
    let log_every = cfg.log_every.max(1);

    let mut state = reference.at(0.0)?;
    let mut rows = Vec::with_capacity(n_steps / log_every + 1);
    let mut sq_sum = 0.0;
    let mut sq_count = 0usize;
    let mut max_error = 0.0_f64;
    let mut diverged = None;
    let mut steps_done = 0usize;

    'run: for k in 0..n_steps {
        let t = k as f64 * dt;
        let r_now = reference.at(t)?;

        // The gait schedule owns the contact flags; a leg that just attached
        // gets its residual touchdown velocity projected out.
        let attaching = (0..robot.n_legs).any(|l| r_now.adhesion[l] && !state.adhesion[l]);
        state.contact = r_now.contact.clone();
        state.adhesion = r_now.adhesion.clone();
        let attached = state.attached_legs();
        if attaching {
            state = match project_contact_consistent(robot, &state, &attached) {
                Ok(s) => s,
                Err(e) => {
                    diverged = Some(Divergence { t, reason: format!("touchdown: {e}") });
                    break 'run;
                }
            };
        }

        let mut err_sq = 0.0;
        let mut err_max = 0.0_f64;
        for j in 0..state.q.len() {
            let e = state.q[j] - r_now.q[j];
            err_sq += e * e;
            err_max = err_max.max(e.abs());
        }
        sq_sum += err_sq;
        sq_count += state.q.len();
        max_error = max_error.max(err_max);

        let tau = match controller {
            Controller::Pd => Ok(pd_torques(robot, &state, &r_now, cfg.kp, cfg.kd)),
            Controller::Learned(m) => {
                learned_torques(robot, m, &state, &r_now, &reference.at(t + dt)?)
            }
            Controller::LearnedPd(m) => {
                learned_torques(robot, m, &state, &r_now, &reference.at(t + dt)?).map(|mut tau| {
                    let fb = pd_torques(robot, &state, &r_now, cfg.kp, cfg.kd);
                    for (a, b) in tau.data.iter_mut().zip(&fb.data) {
                        *a += b;
                    }
                    tau
                })
            }
            Controller::OracleComputedTorque => {
                oracle_torques(robot, &state, &r_now, cfg.oracle_kp, cfg.oracle_kd)
            }
        };
        let tau = match tau {
            Ok(tau) => tau,
            Err(e) => {
                diverged = Some(Divergence { t, reason: format!("controller: {e}") });
                break 'run;
            }
        };

        if k % log_every == 0 {
            rows.push(SimRow {
                t,
                err_rms: (err_sq / state.q.len() as f64).sqrt(),
                err_max,
                tau_max: tau.data.iter().fold(0.0_f64, |m, v| m.max(v.abs())),
            });
        }

        state = match step(robot, &state, &tau, &attached, dt) {
            Ok(s) => s,
            Err(e) => {
                diverged = Some(Divergence { t, reason: format!("integration: {e}") });
                break 'run;
            }
        };
        steps_done = k + 1;

        let bad_q = state.q.iter().any(|v| !v.is_finite() || v.abs() > 10.0);
        let bad_base = !state.p_w.iter().all(|v| v.is_finite());
        if bad_q || bad_base {
            diverged = Some(Divergence {
                t: t + dt,
                reason: "joint coordinates left the plausible range".into(),
            });
            break 'run;
        }
    }

    Ok(SimResult {
        controller: controller.name().to_string(),
        steps_done,
        duration_done: steps_done as f64 * dt,
        rms_error: if sq_count == 0 { 0.0 } else { (sq_sum / sq_count as f64).sqrt() },
        max_error,
        diverged,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelFamily, ModelSpec};
    use crate::robot::{make_robot, RobotFamily};

    fn short_scenario(robot: &RobotModel) -> Scenario {
        let mut sc = Scenario::new("track", robot, 90.0, 15.0, 3);
        sc.gait = vec![0, 3];
        sc
    }

    #[test]
    fn computed_torque_tracks_the_reference_tightly() {
        let robot = make_robot(RobotFamily::Hexa6);
        let sc = short_scenario(&robot);
        let cfg = SimConfig::default();
        let res = rollout(&robot, &sc, &Controller::OracleComputedTorque, &cfg).unwrap();
        assert!(res.diverged.is_none(), "{:?}", res.diverged);
        assert_eq!(res.steps_done, (sc.duration() * cfg.rate_hz).round() as usize);
        assert!(res.rms_error < 1e-3, "rms {}", res.rms_error);
        assert!(res.max_error < 1e-2, "max {}", res.max_error);
        assert!(!res.rows.is_empty());
    }

    #[test]
    fn pd_alone_sags_on_a_wall() {
        let robot = make_robot(RobotFamily::Hexa6);
        let sc = short_scenario(&robot);
        let cfg = SimConfig::default();
        let pd = rollout(&robot, &sc, &Controller::Pd, &cfg).unwrap();
        let oracle = rollout(&robot, &sc, &Controller::OracleComputedTorque, &cfg).unwrap();
        // Gravity is uncompensated, so the free directions of the stance
        // droop far beyond anything the computed-torque run shows.
        assert!(pd.rms_error > 10.0 * oracle.rms_error);
        assert!(pd.rms_error > 1e-3);
    }

    #[test]
    fn unstable_gains_are_reported_as_divergence() {
        let robot = make_robot(RobotFamily::Hexa6);
        let sc = short_scenario(&robot);
        let cfg = SimConfig {
            oracle_kp: -400.0,
            oracle_kd: -50.0,
            duration: Some(4.0),
            ..SimConfig::default()
        };
        let res = rollout(&robot, &sc, &Controller::OracleComputedTorque, &cfg).unwrap();
        let d = res.diverged.expect("negative feedback must blow up");
        assert!(d.t < 4.0);
    }

    #[test]
    fn learned_controller_requires_next_state_checkpoints() {
        let robot = make_robot(RobotFamily::Hexa6);
        let sc = short_scenario(&robot);
        let accel_model = Model::new(
            &robot,
            ModelSpec::defaults(ModelFamily::Sdnn, TargetMode::Accel),
            1,
        );
        let err = rollout(&robot, &sc, &Controller::Learned(accel_model), &SimConfig::default());
        assert!(err.is_err());

        // An untrained predictor still produces a well-formed rollout; it
        // just tracks poorly or trips the divergence guard.
        let model = Model::new(
            &robot,
            ModelSpec::defaults(ModelFamily::Sdnn, TargetMode::NextState),
            1,
        );
        let cfg = SimConfig { duration: Some(0.2), ..SimConfig::default() };
        let res = rollout(&robot, &sc, &Controller::LearnedPd(model), &cfg).unwrap();
        assert!(!res.rows.is_empty());
        assert!(res.rms_error.is_finite());
    }
}
