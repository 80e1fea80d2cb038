//! Group actions on robot states and torques.
//!
//! Three families act on a state. Rotating the whole scene about the gravity
//! axis and translating it rigidly must leave joint torques untouched.
//! Cyclically relabeling legs by the model's symmetry step, while rotating
//! the base frame by the matching azimuth, must relabel torques the same way.
//! The relabeling convention: shifting by +1 hands leg i the former values of
//! leg i+1 and rotates the base by +2*pi*k/n about its own z axis, which
//! keeps every foot where it was in the world.

use crate::error::Result;
use crate::robot::{JointTorques, RobotModel, RobotState};
use crate::spatial::{Rot3, Vec3};

/// One symmetry of the scene-robot pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GroupElement {
    /// Rotation about the world gravity axis by `angle`.
    GravityRotation { angle: f64 },
    /// Rigid world translation.
    Translation { offset: Vec3 },
    /// Leg relabeling by `steps` symmetry steps (steps * symmetry_shift legs).
    LegShift { steps: i64 },
}

impl GroupElement {
    pub fn inverse(&self) -> GroupElement {
        match *self {
            GroupElement::GravityRotation { angle } => {
                GroupElement::GravityRotation { angle: -angle }
            }
            GroupElement::Translation { offset } => GroupElement::Translation { offset: -offset },
            GroupElement::LegShift { steps } => GroupElement::LegShift { steps: -steps },
        }
    }
}

fn wrap_legs(model: &RobotModel, raw: i64) -> usize {
    let n = model.n_legs as i64;
    (((raw % n) + n) % n) as usize
}

/// Applies `g` to a state. Gravity rotations and translations move the world
/// pose only; leg shifts relabel all per-leg blocks and conjugate the
/// body-frame quantities by the azimuth rotation.
pub fn act_on_state(model: &RobotModel, g: &GroupElement, state: &RobotState) -> RobotState {
    match *g {
        GroupElement::GravityRotation { angle } => {
            let rz = Rot3::rot_z(angle);
            let mut out = state.clone();
            out.p_w = rz.apply(&state.p_w);
            out.r_wb = rz * state.r_wb;
            out
        }
        GroupElement::Translation { offset } => {
            let mut out = state.clone();
            out.p_w = state.p_w + offset;
            out
        }
        GroupElement::LegShift { steps } => {
            let raw = wrap_legs(model, steps * model.symmetry_shift as i64);
            shift_state_raw(model, raw, state)
        }
    }
}

/// Leg relabeling by a raw leg count, not necessarily a symmetry of the
/// model. Exists so checks can demonstrate that non-multiples of the
/// symmetry step genuinely break equivariance.
pub fn shift_state_raw(model: &RobotModel, raw_legs: usize, state: &RobotState) -> RobotState {
    let n = model.n_legs;
    let raw = raw_legs % n;
    let psi = 2.0 * std::f64::consts::PI * raw as f64 / n as f64;
    let rz = Rot3::rot_z(psi);

    let mut out = state.clone();
    out.r_wb = state.r_wb * rz;
    out.omega_b = rz.apply_inv(&state.omega_b);
    out.v_b = rz.apply_inv(&state.v_b);
    out.alpha_b = rz.apply_inv(&state.alpha_b);
    out.a_b = rz.apply_inv(&state.a_b);
    for leg in 0..n {
        let src = (leg + raw) % n;
        let (dst_span, src_span) = (model.leg_span(leg), model.leg_span(src));
        out.q[dst_span.clone()].copy_from_slice(&state.q[src_span.clone()]);
        out.qd[dst_span.clone()].copy_from_slice(&state.qd[src_span.clone()]);
        out.qdd[dst_span].copy_from_slice(&state.qdd[src_span]);
        out.contact[leg] = state.contact[src];
        out.adhesion[leg] = state.adhesion[src];
    }
    out
}

/// Applies `g` to torques: identity for scene motions, block relabeling for
/// leg shifts.
pub fn act_on_torques(model: &RobotModel, g: &GroupElement, tau: &JointTorques) -> JointTorques {
    match *g {
        GroupElement::GravityRotation { .. } | GroupElement::Translation { .. } => tau.clone(),
        GroupElement::LegShift { steps } => {
            let raw = wrap_legs(model, steps * model.symmetry_shift as i64);
            shift_torques_raw(model, raw, tau)
        }
    }
}

pub fn shift_torques_raw(model: &RobotModel, raw_legs: usize, tau: &JointTorques) -> JointTorques {
    let n = model.n_legs;
    let raw = raw_legs % n;
    let mut out = tau.clone();
    for leg in 0..n {
        let src = (leg + raw) % n;
        out.data[model.leg_span(leg)].copy_from_slice(&tau.data[model.leg_span(src)]);
    }
    out
}

/// Infinity norm of f(g.x) - g.f(x) for any state-to-torques map.
pub fn equivariance_residual<F>(
    model: &RobotModel,
    g: &GroupElement,
    state: &RobotState,
    f: F,
) -> Result<f64>
where
    F: Fn(&RobotState) -> Result<JointTorques>,
{
    let lhs = f(&act_on_state(model, g, state))?;
    let rhs = act_on_torques(model, g, &f(state)?);
    Ok(lhs
        .data
        .iter()
        .zip(&rhs.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Same residual with the analytic oracle as the map, attached legs taken
/// from each state's own adhesion flags.
pub fn oracle_equivariance_residual(
    model: &RobotModel,
    g: &GroupElement,
    state: &RobotState,
) -> Result<f64> {
    equivariance_residual(model, g, state, |s| {
        Ok(crate::dynamics::inverse_dynamics(model, s, &s.attached_legs())?.torques)
    })
}

/// Asserts the relabeling sign convention: after a one-step shift, new leg i
/// puts its foot exactly where old leg i+k had it.
pub fn debug_shift_convention(model: &RobotModel) {
    use crate::robot::{body_kinematics, foot_position_world};
    let mut s = RobotState::zero(model);
    for (i, qi) in s.q.iter_mut().enumerate() {
        *qi = 0.05 * (i as f64 + 1.0);
    }
    let shifted = act_on_state(model, &GroupElement::LegShift { steps: 1 }, &s);
    let kin_old = body_kinematics(model, &s);
    let kin_new = body_kinematics(model, &shifted);
    for leg in 0..model.n_legs {
        let src = (leg + model.symmetry_shift) % model.n_legs;
        let a = foot_position_world(model, &kin_new, leg);
        let b = foot_position_world(model, &kin_old, src);
        debug_assert!(
            (a - b).amax() < 1e-9,
            "leg shift convention violated for leg {leg}: {a:?} vs {b:?}"
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robot::{body_kinematics, foot_position_world, make_robot, RobotFamily};

    fn bent_state(model: &RobotModel) -> RobotState {
        let mut s = RobotState::zero(model);
        s.p_w = Vec3::new(0.4, -1.2, 0.8);
        s.r_wb = Rot3::from_euler_zyx(0.3, 0.7, -0.2);
        s.omega_b = Vec3::new(0.2, -0.1, 0.5);
        s.v_b = Vec3::new(-0.3, 0.4, 0.1);
        s.alpha_b = Vec3::new(0.6, 0.2, -0.4);
        s.a_b = Vec3::new(0.1, -0.8, 0.3);
        for (i, qi) in s.q.iter_mut().enumerate() {
            *qi = 0.1 + 0.07 * i as f64;
        }
        for (i, v) in s.qd.iter_mut().enumerate() {
            *v = 0.3 * ((i as f64) * 1.1).sin();
        }
        for (i, a) in s.qdd.iter_mut().enumerate() {
            *a = 0.5 * ((i as f64) * 0.6).cos();
        }
        s.adhesion[1] = false;
        s.contact[1] = false;
        s
    }

    #[test]
    fn shifted_feet_coincide_with_their_sources() {
        for fam in RobotFamily::all() {
            let m = make_robot(fam);
            let s = bent_state(&m);
            let shifted = act_on_state(&m, &GroupElement::LegShift { steps: 1 }, &s);
            let kin_old = body_kinematics(&m, &s);
            let kin_new = body_kinematics(&m, &shifted);
            for leg in 0..m.n_legs {
                let src = (leg + m.symmetry_shift) % m.n_legs;
                let a = foot_position_world(&m, &kin_new, leg);
                let b = foot_position_world(&m, &kin_old, src);
                assert!((a - b).amax() < 1e-12, "{fam:?} leg {leg}");
            }
        }
    }

    #[test]
    fn leg_shifts_compose_additively() {
        let m = make_robot(RobotFamily::Hexa6);
        let s = bent_state(&m);
        let one = act_on_state(&m, &GroupElement::LegShift { steps: 1 }, &s);
        let two_stepwise = act_on_state(&m, &GroupElement::LegShift { steps: 1 }, &one);
        let two_direct = act_on_state(&m, &GroupElement::LegShift { steps: 2 }, &s);
        assert!((two_stepwise.r_wb.matrix() - two_direct.r_wb.matrix()).amax() < 1e-12);
        assert!((two_stepwise.omega_b - two_direct.omega_b).amax() < 1e-12);
        for i in 0..s.q.len() {
            assert_eq!(two_stepwise.q[i], two_direct.q[i]);
        }
    }

    #[test]
    fn full_cycle_is_the_identity() {
        for fam in RobotFamily::all() {
            let m = make_robot(fam);
            let s = bent_state(&m);
            let order = m.symmetry_order() as i64;
            let cycled = act_on_state(&m, &GroupElement::LegShift { steps: order }, &s);
            assert!((cycled.r_wb.matrix() - s.r_wb.matrix()).amax() < 1e-12);
            assert!((cycled.omega_b - s.omega_b).amax() < 1e-12);
            assert_eq!(cycled.q, s.q);
            assert_eq!(cycled.adhesion, s.adhesion);
        }
    }

    #[test]
    fn inverses_cancel() {
        let m = make_robot(RobotFamily::Nona9);
        let s = bent_state(&m);
        for g in [
            GroupElement::GravityRotation { angle: 1.1 },
            GroupElement::Translation { offset: Vec3::new(0.3, -2.0, 0.7) },
            GroupElement::LegShift { steps: 4 },
        ] {
            let back = act_on_state(&m, &g.inverse(), &act_on_state(&m, &g, &s));
            assert!((back.p_w - s.p_w).amax() < 1e-12);
            assert!((back.r_wb.matrix() - s.r_wb.matrix()).amax() < 1e-12);
            assert!((back.omega_b - s.omega_b).amax() < 1e-12);
        }
    }

    #[test]
    fn scene_motions_leave_body_frame_data_alone() {
        let m = make_robot(RobotFamily::Hexa6);
        let s = bent_state(&m);
        let g = GroupElement::GravityRotation { angle: 0.9 };
        let rotated = act_on_state(&m, &g, &s);
        assert_eq!(rotated.omega_b, s.omega_b);
        assert_eq!(rotated.v_b, s.v_b);
        assert_eq!(rotated.q, s.q);
        // Gravity seen from the base is unchanged because the rotation is
        // about the gravity axis itself.
        assert!((rotated.gravity_body() - s.gravity_body()).amax() < 1e-12);

        let t = GroupElement::Translation { offset: Vec3::new(5.0, -3.0, 2.0) };
        let moved = act_on_state(&m, &t, &s);
        assert_eq!(moved.r_wb, s.r_wb);
        assert_eq!(moved.q, s.q);
    }

    #[test]
    fn torque_action_relabels_blocks() {
        let m = make_robot(RobotFamily::Magneto4);
        let tau = JointTorques {
            data: (0..12).map(|i| i as f64).collect(),
            joints_per_leg: 3,
        };
        // One symmetry step on magneto4 is two raw legs.
        let shifted = act_on_torques(&m, &GroupElement::LegShift { steps: 1 }, &tau);
        assert_eq!(shifted.leg(0), &[6.0, 7.0, 8.0]);
        assert_eq!(shifted.leg(2), &[0.0, 1.0, 2.0]);

        let same = act_on_torques(&m, &GroupElement::GravityRotation { angle: 2.0 }, &tau);
        assert_eq!(same.data, tau.data);
    }
}
