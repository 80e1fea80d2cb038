//! Robot models with circularly repeated legs, their states, and kinematics.
//!
//! A model is a floating base plus `n_legs` identical serial legs mounted at
//! azimuths 2*pi*i/n_legs. Leg frames are attached to the base at the first
//! joint of each leg: T_b_li = Rz(azimuth_i) * mount. `symmetry_shift` is the
//! smallest leg relabeling step that maps the whole robot onto itself; a
//! four-legged robot with an elongated base repeats only every second leg.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::{
    ang3, cross_motion, lin3, motion_to_child, vec6, Rot3, SpatialInertia, Transform3, Vec3, Vec6,
};

/// World gravity; the z axis is the gravity axis everywhere in this crate.
pub fn gravity_w() -> Vec3 {
    Vec3::new(0.0, 0.0, -9.81)
}

pub const AZIMUTH_TOL: f64 = 1e-12;
pub const BASE_SYMMETRY_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RobotFamily {
    Magneto4,
    Hexa6,
    Nona9,
}

impl RobotFamily {
    pub fn name(&self) -> &'static str {
        match self {
            RobotFamily::Magneto4 => "magneto4",
            RobotFamily::Hexa6 => "hexa6",
            RobotFamily::Nona9 => "nona9",
        }
    }

    pub fn all() -> [RobotFamily; 3] {
        [RobotFamily::Magneto4, RobotFamily::Hexa6, RobotFamily::Nona9]
    }
}

impl std::str::FromStr for RobotFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magneto4" => Ok(RobotFamily::Magneto4),
            "hexa6" => Ok(RobotFamily::Hexa6),
            "nona9" => Ok(RobotFamily::Nona9),
            other => Err(Error::Config(format!("unknown robot family '{other}'"))),
        }
    }
}

/// One revolute joint of the shared leg chain plus the link it carries.
///
/// `placement` is the pose of this joint's frame in the previous frame of the
/// chain at zero angle (the first joint sits at the leg frame itself). The
/// link frame coincides with the joint frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LegJoint {
    pub axis: Vec3,
    pub placement: Transform3,
    pub inertia: SpatialInertia,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobotModel {
    pub name: String,
    pub n_legs: usize,
    pub joints_per_leg: usize,
    /// Smallest symmetric relabeling step in legs; divides `n_legs`.
    pub symmetry_shift: usize,
    pub base_inertia: SpatialInertia,
    /// Leg frame in the base at azimuth zero; leg i adds Rz(azimuth_i).
    pub mount: Transform3,
    /// Shared by every leg; the loader rejects definitions where legs differ.
    pub leg_chain: Vec<LegJoint>,
    /// Foot point in the last link's frame.
    pub foot_offset: Vec3,
    /// Actuator-to-joint torque signs, one per joint of the chain.
    pub gear_signs: Vec<f64>,
}

impl RobotModel {
    pub fn n_joints(&self) -> usize {
        self.n_legs * self.joints_per_leg
    }

    /// Generalized-velocity dimension: base twist plus joint rates.
    pub fn nv(&self) -> usize {
        6 + self.n_joints()
    }

    pub fn n_bodies(&self) -> usize {
        1 + self.n_joints()
    }

    /// Distinct leg relabelings that map the robot onto itself.
    pub fn symmetry_order(&self) -> usize {
        self.n_legs / self.symmetry_shift
    }

    pub fn leg_azimuth(&self, leg: usize) -> f64 {
        2.0 * std::f64::consts::PI * leg as f64 / self.n_legs as f64
    }

    /// T_b_li: pose of leg i's frame in the base.
    pub fn leg_frame(&self, leg: usize) -> Transform3 {
        Transform3::new(Rot3::rot_z(self.leg_azimuth(leg)), Vec3::zeros()).compose(&self.mount)
    }

    /// R_ib: takes base-frame coordinates into leg i's frame.
    pub fn leg_frame_rotation(&self, leg: usize) -> Rot3 {
        self.leg_frame(leg).rot.inverse()
    }

    /// Column index of (leg, joint) in the generalized-velocity vector.
    pub fn joint_col(&self, leg: usize, joint: usize) -> usize {
        6 + leg * self.joints_per_leg + joint
    }

    /// Index range of a leg's joints inside q / qd / qdd.
    pub fn leg_span(&self, leg: usize) -> std::ops::Range<usize> {
        leg * self.joints_per_leg..(leg + 1) * self.joints_per_leg
    }

    pub fn total_mass(&self) -> f64 {
        self.base_inertia.mass
            + self.n_legs as f64 * self.leg_chain.iter().map(|j| j.inertia.mass).sum::<f64>()
    }
}

/// Full kinodynamic state. Base pose lives in the world; twist and its
/// coordinate time derivative live in the base frame, angular block first.
#[derive(Clone, Debug, PartialEq)]
pub struct RobotState {
    pub p_w: Vec3,
    pub r_wb: Rot3,
    pub omega_b: Vec3,
    pub v_b: Vec3,
    pub alpha_b: Vec3,
    pub a_b: Vec3,
    /// Leg-major joint positions, velocities, accelerations.
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub qdd: Vec<f64>,
    /// Foot touching the surface.
    pub contact: Vec<bool>,
    /// Adhesion engaged; an adhering foot is a rigid point constraint.
    pub adhesion: Vec<bool>,
}

impl RobotState {
    pub fn zero(model: &RobotModel) -> Self {
        let nj = model.n_joints();
        RobotState {
            p_w: Vec3::zeros(),
            r_wb: Rot3::identity(),
            omega_b: Vec3::zeros(),
            v_b: Vec3::zeros(),
            alpha_b: Vec3::zeros(),
            a_b: Vec3::zeros(),
            q: vec![0.0; nj],
            qd: vec![0.0; nj],
            qdd: vec![0.0; nj],
            contact: vec![true; model.n_legs],
            adhesion: vec![true; model.n_legs],
        }
    }

    /// Gravity expressed in the base frame.
    pub fn gravity_body(&self) -> Vec3 {
        self.r_wb.apply_inv(&gravity_w())
    }

    /// Legs whose feet are rigidly attached (adhesion on).
    pub fn attached_legs(&self) -> Vec<usize> {
        (0..self.adhesion.len()).filter(|&i| self.adhesion[i]).collect()
    }

    /// Generalized velocity [omega_b, v_b, qd].
    pub fn gen_velocity(&self) -> Vec<f64> {
        let mut u = Vec::with_capacity(6 + self.qd.len());
        u.extend_from_slice(self.omega_b.as_slice());
        u.extend_from_slice(self.v_b.as_slice());
        u.extend_from_slice(&self.qd);
        u
    }

    /// Generalized acceleration [alpha_b, a_b, qdd].
    pub fn gen_acceleration(&self) -> Vec<f64> {
        let mut u = Vec::with_capacity(6 + self.qdd.len());
        u.extend_from_slice(self.alpha_b.as_slice());
        u.extend_from_slice(self.a_b.as_slice());
        u.extend_from_slice(&self.qdd);
        u
    }

    pub fn set_gen_velocity(&mut self, u: &[f64]) {
        self.omega_b = Vec3::new(u[0], u[1], u[2]);
        self.v_b = Vec3::new(u[3], u[4], u[5]);
        self.qd.copy_from_slice(&u[6..]);
    }

    pub fn set_gen_acceleration(&mut self, u: &[f64]) {
        self.alpha_b = Vec3::new(u[0], u[1], u[2]);
        self.a_b = Vec3::new(u[3], u[4], u[5]);
        self.qdd.copy_from_slice(&u[6..]);
    }
}

/// Actuator torques, leg-major like the joint vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTorques {
    pub data: Vec<f64>,
    pub joints_per_leg: usize,
}

impl JointTorques {
    pub fn zeros(model: &RobotModel) -> Self {
        JointTorques { data: vec![0.0; model.n_joints()], joints_per_leg: model.joints_per_leg }
    }

    pub fn leg(&self, leg: usize) -> &[f64] {
        &self.data[leg * self.joints_per_leg..(leg + 1) * self.joints_per_leg]
    }

    pub fn n_legs(&self) -> usize {
        self.data.len() / self.joints_per_leg
    }
}

/// Builds one of the reference robots.
///
/// All three share the same leg: coxa about z, femur and tibia about y, links
/// modeled as thin solid cylinders. magneto4 has four legs on an elongated
/// plate base, so only relabelings by two legs preserve it; hexa6 and nona9
/// sit on a disk and repeat every leg.
pub fn make_robot(family: RobotFamily) -> RobotModel {
    let (n_legs, symmetry_shift, base_inertia) = match family {
        RobotFamily::Magneto4 => (4, 2, SpatialInertia::uniform_plate_z(5.0, 0.3, 0.2)),
        RobotFamily::Hexa6 => (6, 1, SpatialInertia::uniform_disk_z(5.0, 0.2)),
        RobotFamily::Nona9 => (9, 1, SpatialInertia::uniform_disk_z(5.0, 0.2)),
    };
    let link_radius = 0.01;
    let leg_chain = vec![
        LegJoint {
            axis: Vec3::z(),
            placement: Transform3::identity(),
            inertia: SpatialInertia::solid_cylinder_x(0.3, 0.08, link_radius),
        },
        LegJoint {
            axis: Vec3::y(),
            placement: Transform3::from_translation(Vec3::new(0.08, 0.0, 0.0)),
            inertia: SpatialInertia::solid_cylinder_x(0.5, 0.15, link_radius),
        },
        LegJoint {
            axis: Vec3::y(),
            placement: Transform3::from_translation(Vec3::new(0.15, 0.0, 0.0)),
            inertia: SpatialInertia::solid_cylinder_x(0.4, 0.15, link_radius),
        },
    ];
    let model = RobotModel {
        name: family.name().to_string(),
        n_legs,
        joints_per_leg: 3,
        symmetry_shift,
        base_inertia,
        mount: Transform3::from_translation(Vec3::new(0.2, 0.0, 0.0)),
        leg_chain,
        foot_offset: Vec3::new(0.15, 0.0, 0.0),
        gear_signs: vec![1.0; 3],
    };
    #[cfg(debug_assertions)]
    crate::symmetry::debug_shift_convention(&model);
    model
}

/// Loads a robot from its JSON definition, enforcing symmetry.
pub fn load_robot(path: &std::path::Path) -> Result<RobotModel> {
    let text = std::fs::read_to_string(path)?;
    let def: RobotDefinition = serde_json::from_str(&text)?;
    RobotModel::from_definition(&def)
}

/// On-disk robot description. Unlike `RobotModel` it spells every leg out,
/// so the loader can diagnose asymmetric definitions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobotDefinition {
    pub name: String,
    pub n_legs: usize,
    pub joints_per_leg: usize,
    pub symmetry_shift: usize,
    pub base_inertia: SpatialInertia,
    pub legs: Vec<LegDefinition>,
    pub foot_offset: Vec3,
    pub gear_signs: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LegDefinition {
    /// Radians from the base x axis.
    pub azimuth: f64,
    /// Mount frame with the azimuth rotation factored out.
    pub mount: Transform3,
    pub chain: Vec<LegJoint>,
}

impl RobotModel {
    pub fn to_definition(&self) -> RobotDefinition {
        RobotDefinition {
            name: self.name.clone(),
            n_legs: self.n_legs,
            joints_per_leg: self.joints_per_leg,
            symmetry_shift: self.symmetry_shift,
            base_inertia: self.base_inertia,
            legs: (0..self.n_legs)
                .map(|i| LegDefinition {
                    azimuth: self.leg_azimuth(i),
                    mount: self.mount,
                    chain: self.leg_chain.clone(),
                })
                .collect(),
            foot_offset: self.foot_offset,
            gear_signs: self.gear_signs.clone(),
        }
    }

    pub fn from_definition(def: &RobotDefinition) -> Result<RobotModel> {
        let bad = |msg: String| Err(Error::RobotDefinition(msg));
        let n = def.n_legs;
        if n < 3 {
            return bad(format!("{} legs; at least 3 are required for point-foot support", n));
        }
        if def.joints_per_leg == 0 {
            return bad("joints_per_leg must be positive".into());
        }
        if def.symmetry_shift == 0 || n % def.symmetry_shift != 0 {
            return bad(format!(
                "symmetry_shift {} does not divide n_legs {}",
                def.symmetry_shift, n
            ));
        }
        if def.legs.len() != n {
            return bad(format!("{} leg entries for n_legs = {}", def.legs.len(), n));
        }
        if !def.base_inertia.is_physical() {
            return bad("base inertia is not positive definite".into());
        }
        if def.gear_signs.len() != def.joints_per_leg
            || def.gear_signs.iter().any(|s| s.abs() != 1.0)
        {
            return bad("gear_signs must hold one +-1 entry per chain joint".into());
        }

        // Legs must repeat exactly: same azimuth grid, bit-identical
        // mounts and chains.
        for (i, leg) in def.legs.iter().enumerate() {
            let want = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            if (leg.azimuth - want).abs() > AZIMUTH_TOL {
                return bad(format!(
                    "leg {} azimuth {} deviates from the uniform grid value {}",
                    i, leg.azimuth, want
                ));
            }
            if leg.chain.len() != def.joints_per_leg {
                return bad(format!("leg {} has {} joints, expected {}", i, leg.chain.len(),
                    def.joints_per_leg));
            }
            if leg.mount != def.legs[0].mount {
                return bad(format!("leg {} mount differs from leg 0", i));
            }
            if leg.chain != def.legs[0].chain {
                return bad(format!("leg {} chain differs from leg 0", i));
            }
            for (j, joint) in leg.chain.iter().enumerate() {
                if joint.axis.norm() < 1e-12 {
                    return bad(format!("leg {} joint {} has a zero axis", i, j));
                }
                if !joint.inertia.is_physical() {
                    return bad(format!("leg {} joint {} inertia is not physical", i, j));
                }
            }
        }

        // The base must look the same after one symmetric relabeling step.
        let step = Rot3::rot_z(2.0 * std::f64::consts::PI * def.symmetry_shift as f64 / n as f64);
        let rotated = def.base_inertia.expressed_in(&Transform3::new(step, Vec3::zeros()));
        let di = (rotated.inertia_com - def.base_inertia.inertia_com).amax();
        let dc = (rotated.com - def.base_inertia.com).amax();
        if di > BASE_SYMMETRY_TOL || dc > BASE_SYMMETRY_TOL {
            return bad(format!(
                "base inertia is not invariant under a {}-leg relabeling (residual {:.2e})",
                def.symmetry_shift,
                di.max(dc)
            ));
        }

        Ok(RobotModel {
            name: def.name.clone(),
            n_legs: n,
            joints_per_leg: def.joints_per_leg,
            symmetry_shift: def.symmetry_shift,
            base_inertia: def.base_inertia,
            mount: def.legs[0].mount,
            leg_chain: def.legs[0].chain.clone(),
            foot_offset: def.foot_offset,
            gear_signs: def.gear_signs.clone(),
        })
    }
}

/// World pose plus spatial velocity/acceleration of one body, the latter two
/// in the body's own frame.
#[derive(Clone, Debug)]
pub struct BodyKin {
    pub pose: Transform3,
    pub v: Vec6,
    pub a: Vec6,
}

/// Propagates pose, twist and its derivative through every leg.
///
/// Index 0 is the base; leg i's links follow at 1 + i*joints_per_leg. The
/// accelerations are coordinate derivatives of the body-frame twists, so the
/// base entries are exactly the state's own fields.
pub fn body_kinematics(model: &RobotModel, state: &RobotState) -> Vec<BodyKin> {
    let mut out = Vec::with_capacity(model.n_bodies());
    out.push(BodyKin {
        pose: Transform3::new(state.r_wb, state.p_w),
        v: vec6(state.omega_b, state.v_b),
        a: vec6(state.alpha_b, state.a_b),
    });
    for leg in 0..model.n_legs {
        let mut parent = 0;
        for j in 0..model.joints_per_leg {
            let qi = state.q[model.leg_span(leg).start + j];
            let qdi = state.qd[model.leg_span(leg).start + j];
            let qddi = state.qdd[model.leg_span(leg).start + j];
            let joint = &model.leg_chain[j];
            let hinge = Rot3::from_axis_angle(&joint.axis, qi).expect("validated axis");
            let fixed = if j == 0 { model.leg_frame(leg) } else { joint.placement };
            let local = fixed.compose(&Transform3::new(hinge, Vec3::zeros()));

            let axis6 = vec6(joint.axis.normalize(), Vec3::zeros());
            let v = motion_to_child(&local, &out[parent].v) + axis6 * qdi;
            let a = motion_to_child(&local, &out[parent].a)
                + axis6 * qddi
                + cross_motion(&v, &(axis6 * qdi));
            out.push(BodyKin { pose: out[parent].pose.compose(&local), v, a });
            parent = out.len() - 1;
        }
    }
    out
}

/// Body index of leg i's last link.
pub fn foot_body(model: &RobotModel, leg: usize) -> usize {
    1 + leg * model.joints_per_leg + (model.joints_per_leg - 1)
}

pub fn foot_position_world(model: &RobotModel, kin: &[BodyKin], leg: usize) -> Vec3 {
    kin[foot_body(model, leg)].pose.apply_point(&model.foot_offset)
}

pub fn foot_velocity_world(model: &RobotModel, kin: &[BodyKin], leg: usize) -> Vec3 {
    let k = &kin[foot_body(model, leg)];
    let r = model.foot_offset;
    k.pose.rot.apply(&(lin3(&k.v) + ang3(&k.v).cross(&r)))
}

/// Classical (second time derivative of position) foot acceleration.
pub fn foot_acceleration_world(model: &RobotModel, kin: &[BodyKin], leg: usize) -> Vec3 {
    let k = &kin[foot_body(model, leg)];
    let r = model.foot_offset;
    let (w, l) = (ang3(&k.v), lin3(&k.v));
    let a_pt = lin3(&k.a) + ang3(&k.a).cross(&r) + w.cross(&(l + w.cross(&r)));
    k.pose.rot.apply(&a_pt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn close(a: &Vec3, b: &Vec3, tol: f64) {
        assert!((a - b).amax() <= tol, "{a:?} vs {b:?}");
    }

    #[test]
    fn hexa6_has_nineteen_bodies_and_eighteen_joints() {
        let m = make_robot(RobotFamily::Hexa6);
        assert_eq!(m.n_bodies(), 19);
        assert_eq!(m.n_joints(), 18);
        assert_eq!(m.nv(), 24);
        assert_eq!(m.symmetry_order(), 6);
    }

    #[test]
    fn leg_frames_step_by_one_azimuth() {
        for fam in RobotFamily::all() {
            let m = make_robot(fam);
            let step = Rot3::rot_z(2.0 * std::f64::consts::PI / m.n_legs as f64);
            for i in 0..m.n_legs {
                let next = m.leg_frame((i + 1) % m.n_legs);
                let stepped = Transform3::new(step, Vec3::zeros()).compose(&m.leg_frame(i));
                // Angles wrap at the last leg; compare matrices, not angles.
                assert!((next.rot.matrix() - stepped.rot.matrix()).amax() < 1e-12);
                close(&next.trans, &stepped.trans, 1e-12);
            }
        }
    }

    #[test]
    fn opposite_leg_frames_of_hexa6_differ_by_half_turn() {
        let m = make_robot(RobotFamily::Hexa6);
        let rel = m.leg_frame_rotation(3) * m.leg_frame_rotation(0).inverse();
        assert!((rel.matrix() - Rot3::rot_z(std::f64::consts::PI).matrix()).amax() < 1e-12);
    }

    #[test]
    fn zero_config_feet_lie_on_the_reach_circle() {
        let m = make_robot(RobotFamily::Hexa6);
        let s = RobotState::zero(&m);
        let kin = body_kinematics(&m, &s);
        let reach = 0.2 + 0.08 + 0.15 + 0.15;
        for leg in 0..m.n_legs {
            let phi = m.leg_azimuth(leg);
            let p = foot_position_world(&m, &kin, leg);
            close(&p, &Vec3::new(reach * phi.cos(), reach * phi.sin(), 0.0), 1e-12);
        }
    }

    /// Advances a state analytically to second order for finite differencing.
    fn nudged(m: &RobotModel, s: &RobotState, dt: f64) -> RobotState {
        let mut out = s.clone();
        let rot = Rot3::from_axis_angle(
            &(s.omega_b * dt + s.alpha_b * (0.5 * dt * dt)),
            (s.omega_b * dt + s.alpha_b * (0.5 * dt * dt)).norm(),
        )
        .unwrap_or(Rot3::identity());
        out.r_wb = s.r_wb * rot;
        out.p_w = s.p_w
            + s.r_wb.apply(&(s.v_b * dt + (s.a_b + s.omega_b.cross(&s.v_b)) * (0.5 * dt * dt)));
        for i in 0..s.q.len() {
            out.q[i] = s.q[i] + s.qd[i] * dt + 0.5 * s.qdd[i] * dt * dt;
        }
        let _ = m;
        out
    }

    fn wiggly_state(m: &RobotModel) -> RobotState {
        let mut s = RobotState::zero(m);
        s.p_w = Vec3::new(0.3, -0.2, 1.1);
        s.r_wb = Rot3::from_euler_zyx(0.4, -0.2, 0.1);
        s.omega_b = Vec3::new(0.3, -0.5, 0.8);
        s.v_b = Vec3::new(0.2, 0.1, -0.4);
        s.alpha_b = Vec3::new(1.0, 0.2, -0.7);
        s.a_b = Vec3::new(-0.3, 0.5, 0.9);
        for i in 0..s.q.len() {
            s.q[i] = 0.3 * ((i as f64) * 0.7).sin();
            s.qd[i] = 0.4 * ((i as f64) * 1.3).cos();
            s.qdd[i] = 0.6 * ((i as f64) * 0.9).sin();
        }
        s
    }

    #[test]
    fn foot_velocity_matches_finite_difference() {
        let m = make_robot(RobotFamily::Hexa6);
        let s = wiggly_state(&m);
        let dt = 1e-6;
        let (plus, minus) = (nudged(&m, &s, dt), nudged(&m, &s, -dt));
        for leg in 0..m.n_legs {
            let pf = foot_position_world(&m, &body_kinematics(&m, &plus), leg);
            let pb = foot_position_world(&m, &body_kinematics(&m, &minus), leg);
            let fd = (pf - pb) / (2.0 * dt);
            let v = foot_velocity_world(&m, &body_kinematics(&m, &s), leg);
            close(&v, &fd, 1e-5);
        }
    }

    #[test]
    fn foot_acceleration_matches_finite_difference() {
        let m = make_robot(RobotFamily::Hexa6);
        let s = wiggly_state(&m);
        let dt = 1e-4;
        let p0 = |leg| foot_position_world(&m, &body_kinematics(&m, &s), leg);
        let (plus, minus) = (nudged(&m, &s, dt), nudged(&m, &s, -dt));
        for leg in 0..m.n_legs {
            let pf = foot_position_world(&m, &body_kinematics(&m, &plus), leg);
            let pb = foot_position_world(&m, &body_kinematics(&m, &minus), leg);
            let fd = (pf - 2.0 * p0(leg) + pb) / (dt * dt);
            let a = foot_acceleration_world(&m, &body_kinematics(&m, &s), leg);
            close(&a, &fd, 1e-5);
        }
    }

    #[test]
    fn definition_round_trips_bit_exactly() {
        for fam in RobotFamily::all() {
            let m = make_robot(fam);
            let text = serde_json::to_string_pretty(&m.to_definition()).unwrap();
            let back: RobotDefinition = serde_json::from_str(&text).unwrap();
            assert_eq!(RobotModel::from_definition(&back).unwrap(), m);
        }
    }

    #[test]
    fn relabeling_legs_by_the_symmetry_step_reloads_identically() {
        let m = make_robot(RobotFamily::Magneto4);
        let mut def = m.to_definition();
        let k = m.symmetry_shift;
        let chains: Vec<_> = def.legs.iter().map(|l| l.chain.clone()).collect();
        for i in 0..def.legs.len() {
            def.legs[i].chain = chains[(i + k) % chains.len()].clone();
        }
        assert_eq!(RobotModel::from_definition(&def).unwrap(), m);
    }

    #[test]
    fn asymmetric_definitions_are_rejected_with_a_diagnostic() {
        let m = make_robot(RobotFamily::Hexa6);

        let mut def = m.to_definition();
        def.legs[2].chain[1].inertia.mass += 0.01;
        let err = RobotModel::from_definition(&def).unwrap_err().to_string();
        assert!(err.contains("leg 2"), "{err}");

        let mut def = m.to_definition();
        def.legs[4].azimuth += 1e-6;
        let err = RobotModel::from_definition(&def).unwrap_err().to_string();
        assert!(err.contains("leg 4"), "{err}");

        // A plate base only repeats every second leg; claiming every-leg
        // symmetry for magneto4 must fail on the base inertia.
        let mut def = make_robot(RobotFamily::Magneto4).to_definition();
        def.symmetry_shift = 1;
        let err = RobotModel::from_definition(&def).unwrap_err().to_string();
        assert!(err.contains("base inertia"), "{err}");

        let mut def = m.to_definition();
        def.gear_signs = vec![1.0, 0.5, 1.0];
        assert!(RobotModel::from_definition(&def).is_err());

        let mut def = m.to_definition();
        def.symmetry_shift = 4;
        assert!(RobotModel::from_definition(&def).is_err());
    }

    #[test]
    fn total_mass_adds_up() {
        let m = make_robot(RobotFamily::Hexa6);
        assert_relative_eq!(m.total_mass(), 5.0 + 6.0 * 1.2, epsilon = 1e-12);
    }
}
