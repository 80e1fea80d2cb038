//! Scenario-driven dataset generation.
//!
//! A scenario walks a robot across a plane through the origin, tilted from
//! the ground by an inclination angle and yawed about its normal. Steps
//! alternate a full-stance dwell, where the base glides along the travel
//! direction, with a single-leg swing along a two-segment Hermite spline.
//! Joint references come from closed-form leg inverse kinematics with
//! velocities and accelerations from the leg Jacobian, so attached feet stay
//! still to machine precision. Torque labels are computed by the analytic
//! inverse-dynamics oracle directly on those references; no physics-engine
//! rollout is involved, and the dataset metadata records that provenance.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::inverse_dynamics;
use crate::error::{Error, Result};
use crate::repr::{
    build_sample, from_json_line, to_json_line, DesiredJoints, SampleMeta, StructuredSample,
    TargetMode,
};
use crate::robot::{
    body_kinematics, foot_acceleration_world, foot_velocity_world, JointTorques, RobotModel,
    RobotState,
};
use crate::spatial::{Mat3, Rot3, Vec3};
use crate::symmetry::{act_on_state, act_on_torques, GroupElement};

/// Base center height above the wall plane in the nominal stance.
pub const BASE_HEIGHT: f64 = 0.12;
/// Radial distance from the base axis to each foot in the nominal stance.
pub const STANCE_RADIUS: f64 = 0.38;
/// Swing heights are drawn uniformly within this band around the scenario value.
pub const SWING_HEIGHT_JITTER: f64 = 0.01;
/// Step goals are drawn uniformly within this band around the scenario value.
pub const GOAL_OFFSET_JITTER: f64 = 0.02;
/// Labels whose oracle residual exceeds this are dropped.
pub const LABEL_RESIDUAL_TOL: f64 = 1e-8;

/// A foot this close to the wall plane counts as touching.
const PLANE_CONTACT_TOL: f64 = 1e-9;
/// Attached-foot velocity/acceleration allowance on generated frames.
const CONSISTENCY_TOL: f64 = 1e-9;
/// Reachability slack on the knee cosine before a target is rejected.
const IK_REACH_TOL: f64 = 1e-9;

/// Provenance note stored in every dataset's metadata.
pub const ORACLE_NOTE: &str =
    "analytic rigid-body inverse dynamics on kinematic gait references; no physics-engine rollouts";

/// In-plane travel direction, expressed along the base axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepDirection {
    Forward,
    Backward,
    Left,
    Right,
}

impl StepDirection {
    pub fn base_axis(&self) -> Vec3 {
        match self {
            StepDirection::Forward => Vec3::new(1.0, 0.0, 0.0),
            StepDirection::Backward => Vec3::new(-1.0, 0.0, 0.0),
            StepDirection::Left => Vec3::new(0.0, 1.0, 0.0),
            StepDirection::Right => Vec3::new(0.0, -1.0, 0.0),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            StepDirection::Forward => "fwd",
            StepDirection::Backward => "back",
            StepDirection::Left => "left",
            StepDirection::Right => "right",
        }
    }

    pub fn all() -> [StepDirection; 4] {
        [StepDirection::Forward, StepDirection::Backward, StepDirection::Left, StepDirection::Right]
    }
}

/// One climbing scenario: a wall pose, a gait order, and step shape
/// parameters. Per-step swing heights and goal offsets are jittered around
/// the scenario values by a generator seeded with `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Wall tilt from the ground plane, degrees in [0, 180].
    pub inclination_deg: f64,
    /// Base heading about the wall normal, degrees.
    pub yaw_deg: f64,
    /// Leg order within one gait cycle.
    pub gait: Vec<usize>,
    pub swing_period: f64,
    pub swing_height: f64,
    pub goal_offset: f64,
    pub direction: StepDirection,
    pub cycles: usize,
    /// Full-stance pause before each swing; the base advances during it.
    pub dwell: f64,
    pub sample_rate_hz: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn new(name: &str, model: &RobotModel, inclination_deg: f64, yaw_deg: f64, seed: u64) -> Scenario {
        Scenario {
            name: name.to_string(),
            inclination_deg,
            yaw_deg,
            gait: default_gait(model.n_legs),
            swing_period: 0.5,
            swing_height: 0.05,
            goal_offset: 0.1,
            direction: StepDirection::Forward,
            cycles: 1,
            dwell: 0.25,
            sample_rate_hz: 100.0,
            seed,
        }
    }

    pub fn validate(&self, model: &RobotModel) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=180.0).contains(&self.inclination_deg) {
            return bad(format!("inclination {} deg outside [0, 180]", self.inclination_deg));
        }
        if self.gait.is_empty() {
            return bad("empty gait sequence".into());
        }
        if let Some(&leg) = self.gait.iter().find(|&&leg| leg >= model.n_legs) {
            return bad(format!("gait names leg {} of a {}-legged robot", leg, model.n_legs));
        }
        if !(self.swing_period > 0.0) {
            return bad(format!("swing period {} must be positive", self.swing_period));
        }
        if !(self.dwell > 0.0) {
            return bad(format!("dwell {} must be positive", self.dwell));
        }
        if !(self.sample_rate_hz > 0.0) {
            return bad(format!("sample rate {} must be positive", self.sample_rate_hz));
        }
        if !(self.swing_height > SWING_HEIGHT_JITTER) {
            return bad(format!("swing height {} leaves no room for jitter", self.swing_height));
        }
        if !(self.goal_offset > GOAL_OFFSET_JITTER) {
            return bad(format!("goal offset {} leaves no room for jitter", self.goal_offset));
        }
        if self.cycles == 0 {
            return bad("cycles must be positive".into());
        }
        Ok(())
    }

    pub fn step_period(&self) -> f64 {
        self.dwell + self.swing_period
    }

    pub fn n_steps(&self) -> usize {
        self.gait.len() * self.cycles
    }

    pub fn duration(&self) -> f64 {
        self.n_steps() as f64 * self.step_period()
    }
}

/// Default leg order: halves interleaved for even leg counts, a coprime
/// stride for odd ones, so consecutive swings come from opposite sides.
pub fn default_gait(n_legs: usize) -> Vec<usize> {
    if n_legs % 2 == 0 {
        let half = n_legs / 2;
        (0..half).flat_map(|i| [i, i + half]).collect()
    } else {
        let stride = n_legs.div_ceil(2);
        (0..n_legs).map(|i| (i * stride) % n_legs).collect()
    }
}

fn fmt_deg(x: f64) -> String {
    if x == x.trunc() {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// Cartesian grid of scenarios over inclinations, yaws, and directions, with
/// seeds derived from `base_seed` in grid order.
pub fn scenario_grid(
    model: &RobotModel,
    inclinations_deg: &[f64],
    yaws_deg: &[f64],
    directions: &[StepDirection],
    base_seed: u64,
) -> Vec<Scenario> {
    let mut out = Vec::new();
    for &inc in inclinations_deg {
        for &yaw in yaws_deg {
            for &dir in directions {
                let name = format!("inc{}_yaw{}_{}", fmt_deg(inc), fmt_deg(yaw), dir.tag());
                let mut sc = Scenario::new(&name, model, inc, yaw, base_seed + out.len() as u64);
                sc.direction = dir;
                out.push(sc);
            }
        }
    }
    out
}

/// Base orientation on a wall: tilt about world y, then heading about the
/// wall normal. The base z axis always equals the wall normal.
pub fn wall_rotation(inclination_deg: f64, yaw_deg: f64) -> Rot3 {
    Rot3::rot_y(inclination_deg.to_radians()) * Rot3::rot_z(yaw_deg.to_radians())
}

/// Unit normal of the wall plane (the tilted world z axis).
pub fn wall_normal(inclination_deg: f64) -> Vec3 {
    Rot3::rot_y(inclination_deg.to_radians()).apply(&Vec3::new(0.0, 0.0, 1.0))
}

/// Link lengths of the reference leg: coxa about z at the leg frame, femur
/// and tibia about y, all offsets along local x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LegGeometry {
    pub l0: f64,
    pub l1: f64,
    pub l2: f64,
}

/// Extracts the closed-form-solvable leg layout, rejecting chains the
/// analytic inverse kinematics does not cover.
pub fn standard_leg_geometry(model: &RobotModel) -> Result<LegGeometry> {
    let bad = |msg: &str| Err(Error::Config(format!("leg chain not solvable in closed form: {msg}")));
    if model.joints_per_leg != 3 {
        return bad("expected a 3-joint leg");
    }
    let c = &model.leg_chain;
    let axis_is = |v: &Vec3, unit: Vec3| (v.normalize() - unit).amax() < 1e-12;
    if !axis_is(&c[0].axis, Vec3::new(0.0, 0.0, 1.0)) {
        return bad("first joint must rotate about z");
    }
    if !axis_is(&c[1].axis, Vec3::new(0.0, 1.0, 0.0)) || !axis_is(&c[2].axis, Vec3::new(0.0, 1.0, 0.0)) {
        return bad("second and third joints must rotate about y");
    }
    if c[0].placement.trans.amax() > 1e-12
        || (c[0].placement.rot.matrix() - Rot3::identity().matrix()).amax() > 1e-12
    {
        return bad("first joint must sit at the leg frame");
    }
    let along_x = |t: &Vec3| t.y.abs() < 1e-12 && t.z.abs() < 1e-12 && t.x > 0.0;
    for (j, joint) in c.iter().enumerate().skip(1) {
        if (joint.placement.rot.matrix() - Rot3::identity().matrix()).amax() > 1e-12
            || !along_x(&joint.placement.trans)
        {
            return bad(&format!("joint {j} offset must be a pure +x translation"));
        }
    }
    if !along_x(&model.foot_offset) {
        return bad("foot offset must be a pure +x translation");
    }
    Ok(LegGeometry {
        l0: c[1].placement.trans.x,
        l1: c[2].placement.trans.x,
        l2: model.foot_offset.x,
    })
}

/// Foot position in the leg frame.
pub fn leg_fk(geom: &LegGeometry, q: &[f64; 3]) -> Vec3 {
    let (c1, s1) = (q[1].cos(), q[1].sin());
    let u = q[1] + q[2];
    let (c12, s12) = (u.cos(), u.sin());
    let pc = Vec3::new(
        geom.l0 + geom.l1 * c1 + geom.l2 * c12,
        0.0,
        -(geom.l1 * s1 + geom.l2 * s12),
    );
    Rot3::rot_z(q[0]).apply(&pc)
}

/// Foot position, velocity, and acceleration in the leg frame.
pub fn leg_fk_motion(
    geom: &LegGeometry,
    q: &[f64; 3],
    qd: &[f64; 3],
    qdd: &[f64; 3],
) -> (Vec3, Vec3, Vec3) {
    let (c1, s1) = (q[1].cos(), q[1].sin());
    let u = q[1] + q[2];
    let (c12, s12) = (u.cos(), u.sin());
    let ud = qd[1] + qd[2];
    let udd = qdd[1] + qdd[2];
    let (l1, l2) = (geom.l1, geom.l2);

    let pc = Vec3::new(geom.l0 + l1 * c1 + l2 * c12, 0.0, -(l1 * s1 + l2 * s12));
    let vc = Vec3::new(
        -l1 * s1 * qd[1] - l2 * s12 * ud,
        0.0,
        -(l1 * c1 * qd[1] + l2 * c12 * ud),
    );
    let ac = Vec3::new(
        -l1 * (c1 * qd[1] * qd[1] + s1 * qdd[1]) - l2 * (c12 * ud * ud + s12 * udd),
        0.0,
        l1 * s1 * qd[1] * qd[1] - l1 * c1 * qdd[1] + l2 * s12 * ud * ud - l2 * c12 * udd,
    );

    let rz = Rot3::rot_z(q[0]);
    let z = Vec3::new(0.0, 0.0, 1.0);
    let p = rz.apply(&pc);
    let v = rz.apply(&(z.cross(&pc) * qd[0] + vc));
    let a = rz.apply(
        &(z.cross(&pc) * qdd[0]
            + z.cross(&z.cross(&pc)) * (qd[0] * qd[0])
            + z.cross(&vc) * (2.0 * qd[0])
            + ac),
    );
    (p, v, a)
}

/// Foot Jacobian in the leg frame, columns per joint.
pub fn leg_jacobian(geom: &LegGeometry, q: &[f64; 3]) -> Mat3 {
    let p = leg_fk(geom, q);
    let rz = Rot3::rot_z(q[0]);
    let z = Vec3::new(0.0, 0.0, 1.0);
    let y = rz.apply(&Vec3::new(0.0, 1.0, 0.0));
    let o1 = rz.apply(&Vec3::new(geom.l0, 0.0, 0.0));
    let o2 = rz.apply(&Vec3::new(geom.l0 + geom.l1 * q[1].cos(), 0.0, -geom.l1 * q[1].sin()));
    Mat3::from_columns(&[z.cross(&p), y.cross(&(p - o1)), y.cross(&(p - o2))])
}

/// Closed-form leg inverse kinematics; the knee bends away from the +z side
/// of the leg frame. Returns `None` for unreachable targets.
pub fn leg_ik(geom: &LegGeometry, p: &Vec3) -> Option<[f64; 3]> {
    let rho = p.x.hypot(p.y);
    if rho < 1e-9 {
        return None;
    }
    let q0 = p.y.atan2(p.x);
    let x = rho - geom.l0;
    let zeta = -p.z;
    let r2 = x * x + zeta * zeta;
    let c2 = (r2 - geom.l1 * geom.l1 - geom.l2 * geom.l2) / (2.0 * geom.l1 * geom.l2);
    if c2.abs() > 1.0 + IK_REACH_TOL {
        return None;
    }
    let c2 = c2.clamp(-1.0, 1.0);
    let s2 = (1.0 - c2 * c2).sqrt();
    let q2 = s2.atan2(c2);
    let q1 = zeta.atan2(x) - (geom.l2 * s2).atan2(geom.l1 + geom.l2 * c2);
    Some([q0, q1, q2])
}

/// Joint rates and accelerations realizing a leg-frame foot motion at `q`.
/// Returns `None` at singular postures.
pub fn leg_joint_motion(
    geom: &LegGeometry,
    q: &[f64; 3],
    yd: &Vec3,
    ydd: &Vec3,
) -> Option<([f64; 3], [f64; 3])> {
    let lu = leg_jacobian(geom, q).lu();
    let qd_v = lu.solve(yd)?;
    let qd = [qd_v.x, qd_v.y, qd_v.z];
    // With zero joint acceleration the foot acceleration is exactly the
    // velocity-product bias, so one more solve yields the accelerations.
    let (_, _, bias) = leg_fk_motion(geom, q, &qd, &[0.0; 3]);
    let qdd_v = lu.solve(&(ydd - bias))?;
    Some((qd, [qdd_v.x, qdd_v.y, qdd_v.z]))
}

/// Cubic Hermite segment over its own duration.
#[derive(Clone, Debug)]
struct HermiteSegment {
    p0: Vec3,
    v0: Vec3,
    p1: Vec3,
    v1: Vec3,
    duration: f64,
}

impl HermiteSegment {
    fn eval(&self, t: f64) -> (Vec3, Vec3, Vec3) {
        let d = self.duration;
        let s = t / d;
        let (s2, s3) = (s * s, s * s * s);
        let p = self.p0 * (2.0 * s3 - 3.0 * s2 + 1.0)
            + self.v0 * (d * (s3 - 2.0 * s2 + s))
            + self.p1 * (-2.0 * s3 + 3.0 * s2)
            + self.v1 * (d * (s3 - s2));
        let v = (self.p0 * (6.0 * s2 - 6.0 * s)
            + self.v0 * (d * (3.0 * s2 - 4.0 * s + 1.0))
            + self.p1 * (-6.0 * s2 + 6.0 * s)
            + self.v1 * (d * (3.0 * s2 - 2.0 * s)))
            / d;
        let a = (self.p0 * (12.0 * s - 6.0)
            + self.v0 * (d * (6.0 * s - 4.0))
            + self.p1 * (-12.0 * s + 6.0)
            + self.v1 * (d * (6.0 * s - 2.0)))
            / (d * d);
        (p, v, a)
    }
}

/// Swing foot path: rest to rest through an apex `height` above the plane at
/// half time, carrying the average travel velocity there.
#[derive(Clone, Debug)]
pub struct SwingSpline {
    segments: [HermiteSegment; 2],
    pub duration: f64,
    pub apex: Vec3,
}

impl SwingSpline {
    pub fn new(from: Vec3, to: Vec3, normal: Vec3, height: f64, duration: f64) -> SwingSpline {
        let apex = (from + to) * 0.5 + normal * height;
        let v_apex = (to - from) / duration;
        let half = duration / 2.0;
        SwingSpline {
            segments: [
                HermiteSegment { p0: from, v0: Vec3::zeros(), p1: apex, v1: v_apex, duration: half },
                HermiteSegment { p0: apex, v0: v_apex, p1: to, v1: Vec3::zeros(), duration: half },
            ],
            duration,
            apex,
        }
    }

    /// Position, velocity, and acceleration at `t`; the apex instant itself
    /// evaluates on the second segment.
    pub fn eval(&self, t: f64) -> Result<(Vec3, Vec3, Vec3)> {
        if !(0.0..=self.duration).contains(&t) {
            return Err(Error::SplineDomain { t, duration: self.duration });
        }
        let half = self.duration / 2.0;
        if t < half {
            Ok(self.segments[0].eval(t))
        } else {
            Ok(self.segments[1].eval(t - half))
        }
    }
}

struct PlannedStep {
    leg: usize,
    base_from: Vec3,
    base_delta: Vec3,
    /// World foot anchor per leg while this step runs; the swing leg's entry
    /// is its liftoff point.
    anchors: Vec<Vec3>,
    spline: SwingSpline,
    height: f64,
    goal: f64,
}

struct Plan {
    r_wb: Rot3,
    normal: Vec3,
    dir_w: Vec3,
    dwell: f64,
    swing: f64,
    steps: Vec<PlannedStep>,
    base_final: Vec3,
    anchors_final: Vec<Vec3>,
}

fn build_plan(model: &RobotModel, sc: &Scenario) -> Plan {
    let r_wb = wall_rotation(sc.inclination_deg, sc.yaw_deg);
    let normal = wall_normal(sc.inclination_deg);
    let dir_w = r_wb.apply(&sc.direction.base_axis());

    let mut base = normal * BASE_HEIGHT;
    let mut feet: Vec<Vec3> = (0..model.n_legs)
        .map(|i| {
            let az = model.leg_azimuth(i);
            base + r_wb.apply(&Vec3::new(
                STANCE_RADIUS * az.cos(),
                STANCE_RADIUS * az.sin(),
                -BASE_HEIGHT,
            ))
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let mut steps = Vec::with_capacity(sc.n_steps());
    for _ in 0..sc.cycles {
        for &leg in &sc.gait {
            let height = rng.random_range(
                sc.swing_height - SWING_HEIGHT_JITTER..sc.swing_height + SWING_HEIGHT_JITTER,
            );
            let goal = rng.random_range(
                sc.goal_offset - GOAL_OFFSET_JITTER..sc.goal_offset + GOAL_OFFSET_JITTER,
            );
            let base_from = base;
            let base_delta = dir_w * (goal / model.n_legs as f64);
            base += base_delta;

            let from = feet[leg];
            let to = from + dir_w * goal;
            let spline = SwingSpline::new(from, to, normal, height, sc.swing_period);
            steps.push(PlannedStep {
                leg,
                base_from,
                base_delta,
                anchors: feet.clone(),
                spline,
                height,
                goal,
            });
            feet[leg] = to;
        }
    }
    Plan {
        r_wb,
        normal,
        dir_w,
        dwell: sc.dwell,
        swing: sc.swing_period,
        steps,
        base_final: base,
        anchors_final: feet,
    }
}

/// Per-step landing targets and jittered shape values, for reporting and
/// tests that need the drawn numbers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepPlanSummary {
    pub index: usize,
    pub leg: usize,
    pub swing_height: f64,
    pub goal_offset: f64,
    pub base_advance: f64,
    pub foot_from: Vec3,
    pub foot_to: Vec3,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioPlanSummary {
    pub wall_normal: Vec3,
    pub direction_world: Vec3,
    pub duration: f64,
    pub n_frames: usize,
    pub steps: Vec<StepPlanSummary>,
}

pub fn plan_scenario(model: &RobotModel, sc: &Scenario) -> Result<ScenarioPlanSummary> {
    sc.validate(model)?;
    let plan = build_plan(model, sc);
    Ok(ScenarioPlanSummary {
        wall_normal: plan.normal,
        direction_world: plan.dir_w,
        duration: sc.duration(),
        n_frames: frame_count(sc) + 1,
        steps: plan
            .steps
            .iter()
            .enumerate()
            .map(|(index, s)| StepPlanSummary {
                index,
                leg: s.leg,
                swing_height: s.height,
                goal_offset: s.goal,
                base_advance: s.base_delta.norm(),
                foot_from: s.spline.segments[0].p0,
                foot_to: s.spline.segments[1].p1,
            })
            .collect(),
    })
}

/// One sampled instant of a scenario.
#[derive(Clone, Debug)]
pub struct Frame {
    pub t: f64,
    pub state: RobotState,
}

fn frame_count(sc: &Scenario) -> usize {
    (sc.duration() * sc.sample_rate_hz).round() as usize
}

/// Smooth rest-to-rest ramp over [0, 1]: value, then velocity and
/// acceleration scaled by the phase duration.
fn glide(u: f64, delta: &Vec3, duration: f64) -> (Vec3, Vec3, Vec3) {
    let two_pi = 2.0 * std::f64::consts::PI;
    let p = delta * (u - (two_pi * u).sin() / two_pi);
    let v = delta * ((1.0 - (two_pi * u).cos()) / duration);
    let a = delta * (two_pi * (two_pi * u).sin() / (duration * duration));
    (p, v, a)
}

struct FootRef {
    p: Vec3,
    v: Vec3,
    a: Vec3,
    attached: bool,
}

fn eval_frame(model: &RobotModel, geom: &LegGeometry, plan: &Plan, t: f64) -> Result<RobotState> {
    let period = plan.dwell + plan.swing;
    let s_idx = (t / period).floor() as usize;

    let (base_p, base_v, base_a, feet): (Vec3, Vec3, Vec3, Vec<FootRef>) =
        if s_idx >= plan.steps.len() {
            let feet = plan
                .anchors_final
                .iter()
                .map(|&p| FootRef { p, v: Vec3::zeros(), a: Vec3::zeros(), attached: true })
                .collect();
            (plan.base_final, Vec3::zeros(), Vec3::zeros(), feet)
        } else {
            let step = &plan.steps[s_idx];
            let tau = t - s_idx as f64 * period;
            let (bp, bv, ba) = if tau < plan.dwell {
                let (dp, v, a) = glide(tau / plan.dwell, &step.base_delta, plan.dwell);
                (step.base_from + dp, v, a)
            } else {
                (step.base_from + step.base_delta, Vec3::zeros(), Vec3::zeros())
            };
            let feet = (0..model.n_legs)
                .map(|leg| {
                    if leg == step.leg && tau >= plan.dwell {
                        let (p, v, a) = step.spline.eval(tau - plan.dwell)?;
                        Ok(FootRef { p, v, a, attached: false })
                    } else {
                        Ok(FootRef {
                            p: step.anchors[leg],
                            v: Vec3::zeros(),
                            a: Vec3::zeros(),
                            attached: true,
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            (bp, bv, ba, feet)
        };

    let mut state = RobotState::zero(model);
    state.p_w = base_p;
    state.r_wb = plan.r_wb;
    state.v_b = plan.r_wb.apply_inv(&base_v);
    state.a_b = plan.r_wb.apply_inv(&base_a);

    for (leg, foot) in feet.iter().enumerate() {
        let r_ib = model.leg_frame_rotation(leg);
        let frame = model.leg_frame(leg);
        let p_b = plan.r_wb.apply_inv(&(foot.p - base_p));
        let y = frame.inverse().apply_point(&p_b);
        let yd = r_ib.apply(&plan.r_wb.apply_inv(&(foot.v - base_v)));
        let ydd = r_ib.apply(&plan.r_wb.apply_inv(&(foot.a - base_a)));

        let q = leg_ik(geom, &y).ok_or(Error::IkUnreachable { leg, t })?;
        let (qd, qdd) =
            leg_joint_motion(geom, &q, &yd, &ydd).ok_or(Error::IkUnreachable { leg, t })?;
        let span = model.leg_span(leg);
        state.q[span.clone()].copy_from_slice(&q);
        state.qd[span.clone()].copy_from_slice(&qd);
        state.qdd[span].copy_from_slice(&qdd);
        state.adhesion[leg] = foot.attached;
        state.contact[leg] = (plan.normal.dot(&foot.p)).abs() < PLANE_CONTACT_TOL;
    }
    Ok(state)
}

/// Samples a scenario on its rate grid, ending with one extra frame at rest
/// past the last step so every emitted instant has a successor.
pub fn generate_scenario(model: &RobotModel, sc: &Scenario) -> Result<Vec<Frame>> {
    sc.validate(model)?;
    let geom = standard_leg_geometry(model)?;
    let plan = build_plan(model, sc);
    let n = frame_count(sc);

    let mut frames = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = k as f64 / sc.sample_rate_hz;
        let state = eval_frame(model, &geom, &plan, t)?;

        // The differential inverse kinematics promises still attached feet;
        // verify against the full-robot kinematics, which shares no code
        // with the per-leg closed forms.
        let kin = body_kinematics(model, &state);
        for leg in state.attached_legs() {
            let v = foot_velocity_world(model, &kin, leg).norm();
            let a = foot_acceleration_world(model, &kin, leg).norm();
            if v > CONSISTENCY_TOL || a > CONSISTENCY_TOL {
                return Err(Error::Infeasible(format!(
                    "frame at t = {t:.3} moves attached foot {leg} (v {v:.2e}, a {a:.2e})"
                )));
            }
        }
        frames.push(Frame { t, state });
    }
    Ok(frames)
}

/// Continuous view of a scenario's motion plan, for controllers that run
/// faster than the dataset sample grid. Instants past the last step return
/// the terminal rest state.
pub struct ReferencePath<'a> {
    model: &'a RobotModel,
    geom: LegGeometry,
    plan: Plan,
    pub duration: f64,
}

pub fn reference_path<'a>(model: &'a RobotModel, sc: &Scenario) -> Result<ReferencePath<'a>> {
    sc.validate(model)?;
    let geom = standard_leg_geometry(model)?;
    let plan = build_plan(model, sc);
    Ok(ReferencePath { model, geom, plan, duration: sc.duration() })
}

impl ReferencePath<'_> {
    pub fn at(&self, t: f64) -> Result<RobotState> {
        eval_frame(self.model, &self.geom, &self.plan, t.max(0.0))
    }
}

/// A frame with its oracle torque label.
#[derive(Clone, Debug)]
pub struct LabeledFrame {
    /// Index into the frame list the label was computed from.
    pub index: usize,
    pub t: f64,
    pub state: RobotState,
    pub tau: JointTorques,
    pub residual: f64,
}

/// A frame the oracle could not label.
#[derive(Clone, Debug)]
pub struct DroppedFrame {
    pub index: usize,
    pub t: f64,
    pub reason: String,
}

/// Labels every frame but the terminal one through the inverse-dynamics
/// oracle. Infeasible frames are dropped with a reason instead of failing
/// the batch.
pub fn label_frames(model: &RobotModel, frames: &[Frame]) -> (Vec<LabeledFrame>, Vec<DroppedFrame>) {
    let mut labeled = Vec::with_capacity(frames.len().saturating_sub(1));
    let mut dropped = Vec::new();
    for (index, frame) in frames.iter().enumerate().take(frames.len().saturating_sub(1)) {
        let attached = frame.state.attached_legs();
        match inverse_dynamics(model, &frame.state, &attached) {
            Ok(sol) if sol.residual <= LABEL_RESIDUAL_TOL => labeled.push(LabeledFrame {
                index,
                t: frame.t,
                state: frame.state.clone(),
                tau: sol.torques,
                residual: sol.residual,
            }),
            Ok(sol) => dropped.push(DroppedFrame {
                index,
                t: frame.t,
                reason: format!("oracle residual {:.2e} exceeds {LABEL_RESIDUAL_TOL:.0e}", sol.residual),
            }),
            Err(e) => dropped.push(DroppedFrame { index, t: frame.t, reason: e.to_string() }),
        }
    }
    (labeled, dropped)
}

/// One scenario-shift pair inside a dataset; `orbit` ties together all
/// shifted copies of the same base scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioInstance {
    pub name: String,
    pub base: String,
    pub shift: usize,
    pub orbit: u32,
    pub slope_deg: f64,
    pub yaw_deg: f64,
    pub n_samples: usize,
    pub dropped: usize,
    pub scenario: Scenario,
}

/// Labeled samples of one target mode plus their provenance table.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub robot: String,
    pub n_legs: usize,
    pub joints_per_leg: usize,
    pub mode: TargetMode,
    pub oracle: String,
    /// Worst disagreement between relabeling a shifted state through the
    /// oracle and shifting the original label.
    pub audit_max_residual: f64,
    pub scenarios: Vec<ScenarioInstance>,
    pub samples: Vec<StructuredSample>,
}

struct ScenarioOutput {
    instances: Vec<ScenarioInstance>,
    per_mode: Vec<Vec<StructuredSample>>,
    audit: f64,
}

fn wrap_deg(x: f64) -> f64 {
    let y = x % 360.0;
    if y < 0.0 {
        y + 360.0
    } else {
        y
    }
}

fn expand_scenario(
    model: &RobotModel,
    sc: &Scenario,
    orbit: u32,
    modes: &[TargetMode],
    order: usize,
) -> Result<ScenarioOutput> {
    let frames = generate_scenario(model, sc)?;
    let (labeled, dropped) = label_frames(model, &frames);

    let shift_deg = 360.0 * model.symmetry_shift as f64 / model.n_legs as f64;
    let mut instances = Vec::with_capacity(order);
    let mut per_mode: Vec<Vec<StructuredSample>> = vec![Vec::new(); modes.len()];
    let mut audit = 0.0_f64;

    for m in 0..order {
        let name = if m == 0 { sc.name.clone() } else { format!("{}#s{}", sc.name, m) };
        let yaw = wrap_deg(sc.yaw_deg + m as f64 * shift_deg);
        let g = GroupElement::LegShift { steps: m as i64 };
        let mut n_samples = 0;

        for lf in &labeled {
            let (state, tau) = if m == 0 {
                (lf.state.clone(), lf.tau.clone())
            } else {
                let state = act_on_state(model, &g, &lf.state);
                let sol = inverse_dynamics(model, &state, &state.attached_legs())?;
                let reference = act_on_torques(model, &g, &lf.tau);
                let diff = sol
                    .torques
                    .data
                    .iter()
                    .zip(&reference.data)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                audit = audit.max(diff);
                if diff > LABEL_RESIDUAL_TOL {
                    return Err(Error::Infeasible(format!(
                        "orbit audit failed: shifted relabel differs by {diff:.2e} \
                         (scenario {}, shift {m}, t = {:.3})",
                        sc.name, lf.t
                    )));
                }
                (state, sol.torques)
            };
            let next = act_on_state(model, &g, &frames[lf.index + 1].state);
            let desired = DesiredJoints { q: next.q, qd: next.qd };

            let meta = SampleMeta {
                scenario: name.clone(),
                slope_deg: sc.inclination_deg,
                yaw_deg: yaw,
                orbit,
            };
            for (mi, &mode) in modes.iter().enumerate() {
                let want = if mode == TargetMode::NextState { Some(&desired) } else { None };
                per_mode[mi].push(build_sample(model, &state, &tau, mode, want, meta.clone()));
            }
            n_samples += 1;
        }

        instances.push(ScenarioInstance {
            name,
            base: sc.name.clone(),
            shift: m,
            orbit,
            slope_deg: sc.inclination_deg,
            yaw_deg: yaw,
            n_samples,
            dropped: dropped.len(),
            scenario: sc.clone(),
        });
    }
    Ok(ScenarioOutput { instances, per_mode, audit })
}

/// Generates, labels, and optionally orbit-expands every scenario, returning
/// one dataset per requested target mode. Scenarios run in parallel across
/// `threads`; the output is identical for any thread count.
pub fn generate_dataset(
    model: &RobotModel,
    scenarios: &[Scenario],
    modes: &[TargetMode],
    expand_orbits: bool,
    threads: usize,
) -> Result<Vec<Dataset>> {
    if scenarios.is_empty() {
        return Err(Error::Config("no scenarios given".into()));
    }
    if modes.is_empty() {
        return Err(Error::Config("no target modes given".into()));
    }
    let order = if expand_orbits { model.symmetry_order() } else { 1 };

    let slots: Vec<Mutex<Option<Result<ScenarioOutput>>>> =
        scenarios.iter().map(|_| Mutex::new(None)).collect();
    let cursor = AtomicUsize::new(0);
    let workers = threads.max(1).min(scenarios.len());
    if workers == 1 {
        for (i, sc) in scenarios.iter().enumerate() {
            *slots[i].lock().unwrap() = Some(expand_scenario(model, sc, i as u32, modes, order));
        }
    } else {
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = cursor.fetch_add(1, Ordering::Relaxed);
                    if i >= scenarios.len() {
                        break;
                    }
                    let out = expand_scenario(model, &scenarios[i], i as u32, modes, order);
                    *slots[i].lock().unwrap() = Some(out);
                });
            }
        });
    }

    let mut datasets: Vec<Dataset> = modes
        .iter()
        .map(|&mode| Dataset {
            robot: model.name.clone(),
            n_legs: model.n_legs,
            joints_per_leg: model.joints_per_leg,
            mode,
            oracle: ORACLE_NOTE.to_string(),
            audit_max_residual: 0.0,
            scenarios: Vec::new(),
            samples: Vec::new(),
        })
        .collect();

    for slot in slots {
        let out = slot.into_inner().unwrap().expect("every scenario slot is filled")?;
        for ds in datasets.iter_mut() {
            ds.audit_max_residual = ds.audit_max_residual.max(out.audit);
            ds.scenarios.extend(out.instances.iter().cloned());
        }
        for (mi, samples) in out.per_mode.into_iter().enumerate() {
            datasets[mi].samples.extend(samples);
        }
    }
    Ok(datasets)
}

/// How a dataset is divided for training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitProtocol {
    /// Uniform per-sample 70/15/15.
    Random,
    /// Train and validate on unshifted scenarios only; test on every shifted
    /// copy, whose yaws never appear in training.
    OrbitHoldout,
    /// Train on this fraction of scenario instances; test on the whole set.
    RatioSweep(f64),
}

/// Training-ratio grid for sample-efficiency sweeps.
pub const RATIO_GRID: [f64; 5] = [0.05, 0.1, 0.25, 0.5, 0.75];

/// Sample indices of each split.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    idx
}

fn instance_of_samples(ds: &Dataset) -> Result<Vec<usize>> {
    let by_name: HashMap<&str, usize> =
        ds.scenarios.iter().enumerate().map(|(i, s)| (s.name.as_str(), i)).collect();
    ds.samples
        .iter()
        .map(|s| {
            by_name.get(s.meta.scenario.as_str()).copied().ok_or_else(|| {
                Error::Config(format!("sample names unknown scenario '{}'", s.meta.scenario))
            })
        })
        .collect()
}

pub fn make_splits(ds: &Dataset, protocol: SplitProtocol, seed: u64) -> Result<Splits> {
    let n = ds.samples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nonempty = |s: Splits| {
        if s.train.is_empty() || s.val.is_empty() || s.test.is_empty() {
            Err(Error::Config(format!(
                "split left an empty part (train {}, val {}, test {})",
                s.train.len(),
                s.val.len(),
                s.test.len()
            )))
        } else {
            Ok(s)
        }
    };
    match protocol {
        SplitProtocol::Random => {
            let idx = shuffled(n, &mut rng);
            let n_train = n * 70 / 100;
            let n_val = n * 15 / 100;
            nonempty(Splits {
                train: idx[..n_train].to_vec(),
                val: idx[n_train..n_train + n_val].to_vec(),
                test: idx[n_train + n_val..].to_vec(),
            })
        }
        SplitProtocol::OrbitHoldout => {
            let inst = instance_of_samples(ds)?;
            let source: Vec<usize> =
                (0..n).filter(|&i| ds.scenarios[inst[i]].shift == 0).collect();
            let held: Vec<usize> = (0..n).filter(|&i| ds.scenarios[inst[i]].shift != 0).collect();
            if held.is_empty() {
                return Err(Error::Config(
                    "orbit holdout needs shifted scenario copies; generate with orbit expansion"
                        .into(),
                ));
            }
            let order = shuffled(source.len(), &mut rng);
            let n_val = source.len() * 15 / 100;
            let val: Vec<usize> = order[..n_val].iter().map(|&k| source[k]).collect();
            let train: Vec<usize> = order[n_val..].iter().map(|&k| source[k]).collect();
            nonempty(Splits { train, val, test: held })
        }
        SplitProtocol::RatioSweep(r) => {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("training ratio {r} outside (0, 1]")));
            }
            let inst = instance_of_samples(ds)?;
            let n_inst = ds.scenarios.len();
            let picked = (r * n_inst as f64).ceil() as usize;
            let order = shuffled(n_inst, &mut rng);
            let chosen: Vec<bool> = {
                let mut c = vec![false; n_inst];
                for &k in &order[..picked] {
                    c[k] = true;
                }
                c
            };
            let pool: Vec<usize> = (0..n).filter(|&i| chosen[inst[i]]).collect();
            let suborder = shuffled(pool.len(), &mut rng);
            let n_val = pool.len() * 15 / 100;
            let val: Vec<usize> = suborder[..n_val].iter().map(|&k| pool[k]).collect();
            let train: Vec<usize> = suborder[n_val..].iter().map(|&k| pool[k]).collect();
            nonempty(Splits { train, val, test: (0..n).collect() })
        }
    }
}

/// Sidecar description of a dataset file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub robot: String,
    pub n_legs: usize,
    pub joints_per_leg: usize,
    pub mode: TargetMode,
    pub oracle: String,
    pub n_samples: usize,
    pub audit_max_residual: f64,
    pub sha256: String,
    pub scenarios: Vec<ScenarioInstance>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes through a sibling temp file and renames, so a crash never leaves a
/// half-written file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// `foo.jsonl` keeps its description in `foo.meta.json`.
pub fn dataset_meta_path(jsonl: &Path) -> PathBuf {
    jsonl.with_extension("meta.json")
}

/// Serializes samples line by line next to a metadata sidecar carrying the
/// scenario table and a content hash.
pub fn save_dataset(ds: &Dataset, jsonl_path: &Path) -> Result<DatasetMeta> {
    let mut lines = String::new();
    for s in &ds.samples {
        lines.push_str(&to_json_line(s));
        lines.push('\n');
    }
    let meta = DatasetMeta {
        robot: ds.robot.clone(),
        n_legs: ds.n_legs,
        joints_per_leg: ds.joints_per_leg,
        mode: ds.mode,
        oracle: ds.oracle.clone(),
        n_samples: ds.samples.len(),
        audit_max_residual: ds.audit_max_residual,
        sha256: sha256_hex(lines.as_bytes()),
        scenarios: ds.scenarios.clone(),
    };
    write_atomic(jsonl_path, lines.as_bytes())?;
    write_atomic(&dataset_meta_path(jsonl_path), serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(meta)
}

pub fn load_dataset(jsonl_path: &Path) -> Result<(Dataset, DatasetMeta)> {
    let meta_path = dataset_meta_path(jsonl_path);
    let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| {
        Error::Config(format!("missing dataset sidecar {}: {e}", meta_path.display()))
    })?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text)?;

    let bytes = std::fs::read(jsonl_path)?;
    let digest = sha256_hex(&bytes);
    if digest != meta.sha256 {
        return Err(Error::Config(format!(
            "dataset {} does not match its sidecar hash",
            jsonl_path.display()
        )));
    }
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::Config(format!("dataset is not UTF-8: {e}")))?;
    let mut samples = Vec::with_capacity(meta.n_samples);
    for (i, line) in text.lines().enumerate() {
        let sample = from_json_line(line, meta.joints_per_leg)
            .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        if sample.mode() != meta.mode {
            return Err(Error::Config(format!("line {} has the wrong target mode", i + 1)));
        }
        samples.push(sample);
    }
    if samples.len() != meta.n_samples {
        return Err(Error::Config(format!(
            "dataset holds {} samples, sidecar promises {}",
            samples.len(),
            meta.n_samples
        )));
    }
    let ds = Dataset {
        robot: meta.robot.clone(),
        n_legs: meta.n_legs,
        joints_per_leg: meta.joints_per_leg,
        mode: meta.mode,
        oracle: meta.oracle.clone(),
        audit_max_residual: meta.audit_max_residual,
        scenarios: meta.scenarios.clone(),
        samples,
    };
    Ok((ds, meta))
}
