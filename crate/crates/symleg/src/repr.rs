//! Leg-group data representation of robot states.
//!
//! A state is encoded as one feature block per leg, with every base-frame
//! quantity re-expressed in that leg's own frame. Because the legs of a
//! radially symmetric robot are copies of one another placed on an azimuth
//! grid, this encoding is invariant under gravity-axis rotations and world
//! translations, and a symmetric leg relabeling becomes a plain circular
//! shift of the blocks. Three views of the same sample exist: the structured
//! per-leg form consumed by the shared-encoder network, a graph form for the
//! graph networks, and a flat stacked vector for the unstructured baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::robot::{JointTorques, RobotModel, RobotState};
use crate::spatial::Vec3;

/// Gravity magnitude every sample must carry, and its check tolerance.
pub const GRAVITY_NORM: f64 = 9.81;
pub const GRAVITY_NORM_TOL: f64 = 1e-9;

/// What the per-leg target block holds.
///
/// `Accel` carries measured joint accelerations and is the form oracle
/// labels are generated in. `NextState` carries the desired joint positions
/// and velocities for the upcoming control step, the form a tracking
/// controller queries the model with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    Accel,
    NextState,
}

impl TargetMode {
    /// Width of the target block inside a leg feature.
    pub fn target_len(&self, joints_per_leg: usize) -> usize {
        match self {
            TargetMode::Accel => joints_per_leg,
            TargetMode::NextState => 2 * joints_per_leg,
        }
    }
}

/// Per-leg target values; the variant must agree across all legs of a sample.
#[derive(Clone, Debug, PartialEq)]
pub enum TargetBlock {
    Accel(Vec<f64>),
    NextState { q: Vec<f64>, qd: Vec<f64> },
}

impl TargetBlock {
    pub fn mode(&self) -> TargetMode {
        match self {
            TargetBlock::Accel(_) => TargetMode::Accel,
            TargetBlock::NextState { .. } => TargetMode::NextState,
        }
    }

    fn extend_into(&self, out: &mut Vec<f64>) {
        match self {
            TargetBlock::Accel(qdd) => out.extend_from_slice(qdd),
            TargetBlock::NextState { q, qd } => {
                out.extend_from_slice(q);
                out.extend_from_slice(qd);
            }
        }
    }
}

/// One leg's feature block. Vector quantities are expressed in the leg's
/// own frame; `p` points from the leg frame origin to the base origin and
/// is constant for a rigid mount.
#[derive(Clone, Debug, PartialEq)]
pub struct LegFeature {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub target: TargetBlock,
    /// Base angular velocity in the leg frame.
    pub omega: Vec3,
    /// Base linear acceleration in the leg frame, gravity excluded.
    pub a: Vec3,
    /// Gravity in the leg frame; norm is always 9.81.
    pub g: Vec3,
    /// Leg-to-base offset in the leg frame.
    pub p: Vec3,
    /// Foot contact and adhesion flags as 0.0 / 1.0.
    pub bc: f64,
    pub bm: f64,
}

impl LegFeature {
    /// Feature width for a given mode and joint count.
    pub fn width(mode: TargetMode, joints_per_leg: usize) -> usize {
        2 * joints_per_leg + mode.target_len(joints_per_leg) + 12 + 2
    }

    /// Full numeric form: q, qd, target, omega, a, g, p, bc, bm.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(LegFeature::width(self.target.mode(), self.q.len()));
        out.extend_from_slice(&self.q);
        out.extend_from_slice(&self.qd);
        self.target.extend_into(&mut out);
        out.extend_from_slice(self.omega.as_slice());
        out.extend_from_slice(self.a.as_slice());
        out.extend_from_slice(self.g.as_slice());
        out.extend_from_slice(self.p.as_slice());
        out.push(self.bc);
        out.push(self.bm);
        out
    }

    /// Numeric form without the contact flags, used as a graph edge feature
    /// (the flags live on the foot node there).
    pub fn motion_vec(&self) -> Vec<f64> {
        let mut out = self.to_vec();
        out.truncate(out.len() - 2);
        out
    }
}

/// Provenance of a sample: which scenario produced it and which element of
/// the symmetry orbit it is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub scenario: String,
    pub slope_deg: f64,
    pub yaw_deg: f64,
    pub orbit: u32,
}

impl SampleMeta {
    pub fn unlabeled() -> Self {
        SampleMeta { scenario: String::new(), slope_deg: 0.0, yaw_deg: 0.0, orbit: 0 }
    }
}

/// A complete training sample: one feature block per leg plus the torque
/// label, grouped by leg in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuredSample {
    pub legs: Vec<LegFeature>,
    pub tau: JointTorques,
    pub meta: SampleMeta,
}

impl StructuredSample {
    pub fn mode(&self) -> TargetMode {
        self.legs[0].target.mode()
    }

    pub fn n_legs(&self) -> usize {
        self.legs.len()
    }

    /// Largest gravity-norm error across legs.
    pub fn gravity_norm_residual(&self) -> f64 {
        self.legs
            .iter()
            .map(|l| (l.g.norm() - GRAVITY_NORM).abs())
            .fold(0.0, f64::max)
    }
}

/// Desired joint motion for `NextState` samples, leg-major like q itself.
#[derive(Clone, Debug)]
pub struct DesiredJoints {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
}

/// Builds the per-leg representation of a labeled state.
///
/// `desired` must be given exactly in `NextState` mode. The torque label is
/// carried through unchanged.
pub fn build_sample(
    model: &RobotModel,
    state: &RobotState,
    tau: &JointTorques,
    mode: TargetMode,
    desired: Option<&DesiredJoints>,
    meta: SampleMeta,
) -> StructuredSample {
    assert_eq!(tau.data.len(), model.n_joints(), "torque label size");
    assert_eq!(
        mode == TargetMode::NextState,
        desired.is_some(),
        "desired joints go with next-state mode only",
    );

    let g_b = state.gravity_body();
    let legs = (0..model.n_legs)
        .map(|i| {
            let r_ib = model.leg_frame_rotation(i);
            let span = model.leg_span(i);
            let target = match mode {
                TargetMode::Accel => TargetBlock::Accel(state.qdd[span.clone()].to_vec()),
                TargetMode::NextState => {
                    let d = desired.unwrap();
                    TargetBlock::NextState {
                        q: d.q[span.clone()].to_vec(),
                        qd: d.qd[span.clone()].to_vec(),
                    }
                }
            };
            LegFeature {
                q: state.q[span.clone()].to_vec(),
                qd: state.qd[span].to_vec(),
                target,
                omega: r_ib.apply(&state.omega_b),
                a: r_ib.apply(&state.a_b),
                g: r_ib.apply(&g_b),
                p: r_ib.apply(&(-model.leg_frame(i).trans)),
                bc: if state.contact[i] { 1.0 } else { 0.0 },
                bm: if state.adhesion[i] { 1.0 } else { 0.0 },
            }
        })
        .collect();

    StructuredSample { legs, tau: tau.clone(), meta }
}

/// Flat stacked input for the unstructured baseline: base block
/// (g_b, omega_b, a_b) in the base frame, then per-leg joint blocks
/// (q, qd, target), then per-leg contact flags (bc, bm).
pub fn to_flat_vector(model: &RobotModel, sample: &StructuredSample) -> Vec<f64> {
    let mut out = Vec::with_capacity(flat_input_len(model, sample.mode()));
    let r_b0 = model.leg_frame(0).rot;
    out.extend_from_slice(r_b0.apply(&sample.legs[0].g).as_slice());
    out.extend_from_slice(r_b0.apply(&sample.legs[0].omega).as_slice());
    out.extend_from_slice(r_b0.apply(&sample.legs[0].a).as_slice());
    for leg in &sample.legs {
        out.extend_from_slice(&leg.q);
        out.extend_from_slice(&leg.qd);
        leg.target.extend_into(&mut out);
    }
    for leg in &sample.legs {
        out.push(leg.bc);
        out.push(leg.bm);
    }
    out
}

/// Length of the flat input vector for a model and mode.
pub fn flat_input_len(model: &RobotModel, mode: TargetMode) -> usize {
    let nl = model.joints_per_leg;
    9 + model.n_legs * (2 * nl + mode.target_len(nl) + 2)
}

/// Stacked torque target, leg-major.
pub fn flat_target(sample: &StructuredSample) -> Vec<f64> {
    sample.tau.data.clone()
}

/// Rebuilds grouped torques from a stacked prediction.
pub fn unflatten_torques(model: &RobotModel, flat: &[f64]) -> JointTorques {
    assert_eq!(flat.len(), model.n_joints(), "stacked torque size");
    JointTorques { data: flat.to_vec(), joints_per_leg: model.joints_per_leg }
}

/// Graph tuple: a global feature, node features, and directed edges with
/// their own features. Node and edge widths may differ between roles;
/// consumers pad to the widest node.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphData {
    pub u: Vec<f64>,
    pub nodes: Vec<Vec<f64>>,
    /// (feature, sender node, receiver node).
    pub edges: Vec<(Vec<f64>, usize, usize)>,
}

impl GraphData {
    pub fn max_node_width(&self) -> usize {
        self.nodes.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// How base motion enters the graph.
///
/// `Structured` re-expresses it per leg on the edges, so a symmetric
/// relabeling is a pure edge permutation. `Typical` keeps the raw base-frame
/// block on the base node, the common stacked-graph encoding, whose base
/// features change under relabeling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphStyle {
    Structured,
    Typical,
}

/// Node index conventions: base node is 0, foot i sits at 1 + i, edge i
/// runs base -> foot i.
pub fn to_graph(model: &RobotModel, sample: &StructuredSample, style: GraphStyle) -> GraphData {
    let n = sample.n_legs();
    let mut nodes = Vec::with_capacity(1 + n);
    let mut edges = Vec::with_capacity(n);
    match style {
        GraphStyle::Structured => {
            nodes.push(Vec::new());
            for leg in &sample.legs {
                nodes.push(vec![leg.bc, leg.bm]);
            }
            for (i, leg) in sample.legs.iter().enumerate() {
                edges.push((leg.motion_vec(), 0, 1 + i));
            }
        }
        GraphStyle::Typical => {
            // Slots 0..9 hold the base block, slots 9..11 the contact flags,
            // so the shared node networks see disjoint roles.
            let r_b0 = model.leg_frame(0).rot;
            let mut base = Vec::with_capacity(11);
            base.extend_from_slice(r_b0.apply(&sample.legs[0].g).as_slice());
            base.extend_from_slice(r_b0.apply(&sample.legs[0].omega).as_slice());
            base.extend_from_slice(r_b0.apply(&sample.legs[0].a).as_slice());
            base.extend_from_slice(&[0.0, 0.0]);
            nodes.push(base);
            for leg in &sample.legs {
                let mut f = vec![0.0; 9];
                f.push(leg.bc);
                f.push(leg.bm);
                nodes.push(f);
            }
            for (i, leg) in sample.legs.iter().enumerate() {
                let mut joint = Vec::new();
                joint.extend_from_slice(&leg.q);
                joint.extend_from_slice(&leg.qd);
                leg.target.extend_into(&mut joint);
                edges.push((joint, 0, 1 + i));
            }
        }
    }
    GraphData { u: Vec::new(), nodes, edges }
}

/// Wire form of one leg block. Field order is part of the format.
#[derive(Serialize, Deserialize)]
struct LegRecord {
    q: Vec<f64>,
    qd: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    qdd: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target_q: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target_qd: Option<Vec<f64>>,
    omega: [f64; 3],
    a: [f64; 3],
    g: [f64; 3],
    p: [f64; 3],
    bc: f64,
    bm: f64,
}

/// Wire form of one dataset line.
#[derive(Serialize, Deserialize)]
pub struct SampleRecord {
    mode: TargetMode,
    legs: Vec<LegRecord>,
    tau: Vec<f64>,
    meta: SampleMeta,
}

fn vec3_array(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl SampleRecord {
    pub fn from_sample(sample: &StructuredSample) -> SampleRecord {
        let legs = sample
            .legs
            .iter()
            .map(|l| {
                let (qdd, target_q, target_qd) = match &l.target {
                    TargetBlock::Accel(qdd) => (Some(qdd.clone()), None, None),
                    TargetBlock::NextState { q, qd } => (None, Some(q.clone()), Some(qd.clone())),
                };
                LegRecord {
                    q: l.q.clone(),
                    qd: l.qd.clone(),
                    qdd,
                    target_q,
                    target_qd,
                    omega: vec3_array(&l.omega),
                    a: vec3_array(&l.a),
                    g: vec3_array(&l.g),
                    p: vec3_array(&l.p),
                    bc: l.bc,
                    bm: l.bm,
                }
            })
            .collect();
        SampleRecord {
            mode: sample.mode(),
            legs,
            tau: sample.tau.data.clone(),
            meta: sample.meta.clone(),
        }
    }

    pub fn into_sample(self, joints_per_leg: usize) -> Result<StructuredSample> {
        if self.legs.is_empty() {
            return Err(Error::Shape("sample record has no legs".into()));
        }
        if self.tau.len() != self.legs.len() * joints_per_leg {
            return Err(Error::Shape(format!(
                "torque length {} does not match {} legs of {} joints",
                self.tau.len(),
                self.legs.len(),
                joints_per_leg,
            )));
        }
        let mode = self.mode;
        let legs = self
            .legs
            .into_iter()
            .map(|l| {
                let target = match (mode, l.qdd, l.target_q, l.target_qd) {
                    (TargetMode::Accel, Some(qdd), None, None) => TargetBlock::Accel(qdd),
                    (TargetMode::NextState, None, Some(q), Some(qd)) => {
                        TargetBlock::NextState { q, qd }
                    }
                    _ => {
                        return Err(Error::Shape(
                            "leg target fields do not match the record mode".into(),
                        ))
                    }
                };
                let feature = LegFeature {
                    q: l.q,
                    qd: l.qd,
                    target,
                    omega: Vec3::from_row_slice(&l.omega),
                    a: Vec3::from_row_slice(&l.a),
                    g: Vec3::from_row_slice(&l.g),
                    p: Vec3::from_row_slice(&l.p),
                    bc: l.bc,
                    bm: l.bm,
                };
                if feature.q.len() != joints_per_leg || feature.qd.len() != joints_per_leg {
                    return Err(Error::Shape("leg joint block width mismatch".into()));
                }
                Ok(feature)
            })
            .collect::<Result<Vec<_>>>()?;
        let tau = JointTorques { data: self.tau, joints_per_leg };
        let sample = StructuredSample { legs, tau, meta: self.meta };
        if sample.gravity_norm_residual() > GRAVITY_NORM_TOL {
            return Err(Error::Shape("gravity feature norm is off 9.81".into()));
        }
        Ok(sample)
    }
}

/// One JSON line per sample, fields in schema order.
pub fn to_json_line(sample: &StructuredSample) -> String {
    serde_json::to_string(&SampleRecord::from_sample(sample)).expect("sample serializes")
}

pub fn from_json_line(line: &str, joints_per_leg: usize) -> Result<StructuredSample> {
    let record: SampleRecord = serde_json::from_str(line)?;
    record.into_sample(joints_per_leg)
}
