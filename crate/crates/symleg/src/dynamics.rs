//! Analytic rigid-body dynamics for the floating-base leg models.
//!
//! The equation of motion is M(q) ud + b(q, u) = S_a' tau + J_c' F_c with
//! generalized velocity u = [omega_b, v_b, qd] in base coordinates. The bias
//! b comes from a recursive Newton-Euler pass with zero acceleration, the
//! mass matrix from the composite-rigid-body algorithm, and the two routes
//! are cross-checked in the tests. Adhering feet are rigid point constraints:
//! inverse dynamics resolves the unactuated base rows with least-norm contact
//! forces, forward dynamics solves the full KKT system.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::robot::{
    body_kinematics, foot_acceleration_world, foot_position_world, gravity_w,
    JointTorques, RobotModel, RobotState,
};
use crate::spatial::{
    cross_force, cross_motion, force_to_parent, motion_to_child, skew, vec6, Mat6,
    Rot3, Transform3, Vec3, Vec6,
};

/// Singular values at or below this are treated as zero in contact solves.
pub const SV_CUTOFF: f64 = 1e-8;
/// Largest acceptable unbalanced base wrench in contact-free inverse dynamics.
pub const BASE_CONSISTENCY_TOL: f64 = 1e-8;

/// Truncated-pseudoinverse solve with iterative refinement.
///
/// The factorization alone can lose six or more digits when singular values
/// coincide, which perfectly symmetric stances produce by construction.
/// Feeding the residual against the original matrix back through the same
/// truncated pseudoinverse restores machine-precision solutions without
/// changing which directions are truncated.
fn pinv_solve(
    a: &DMatrix<f64>,
    svd: &nalgebra::linalg::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    b: &DVector<f64>,
    eps: f64,
) -> Result<DVector<f64>> {
    let mut x = svd.solve(b, eps).map_err(|e| Error::Infeasible(e.to_string()))?;
    for _ in 0..2 {
        let r = b - a * &x;
        x += svd.solve(&r, eps).map_err(|e| Error::Infeasible(e.to_string()))?;
    }
    Ok(x)
}

/// Mass matrix, bias forces, and the stacked contact Jacobian of the
/// attached feet (3 world-frame rows per foot, legs in ascending order).
#[derive(Clone, Debug)]
pub struct DynamicsTerms {
    pub mass_matrix: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub contact_jacobian: DMatrix<f64>,
    pub contact_legs: Vec<usize>,
}

/// Inverse dynamics output: actuator torques, world-frame contact force per
/// attached leg, and the equation-of-motion residual at the solution.
#[derive(Clone, Debug)]
pub struct ContactSolution {
    pub torques: JointTorques,
    pub contact_legs: Vec<usize>,
    pub contact_forces: Vec<Vec3>,
    pub residual: f64,
}

/// Forward dynamics output: generalized acceleration and the contact forces
/// that enforce the foot constraints.
#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub accel: DVector<f64>,
    pub contact_legs: Vec<usize>,
    pub contact_forces: Vec<Vec3>,
}

fn sorted_contacts(model: &RobotModel, contacts: &[usize]) -> Result<Vec<usize>> {
    let mut c: Vec<usize> = contacts.to_vec();
    c.sort_unstable();
    c.dedup();
    if let Some(&bad) = c.iter().find(|&&l| l >= model.n_legs) {
        return Err(Error::Config(format!("contact leg {bad} out of range")));
    }
    Ok(c)
}

/// Pose of body `j` of a leg in its parent frame at joint angle `q`.
fn joint_local(model: &RobotModel, leg: usize, j: usize, q: f64) -> Transform3 {
    let joint = &model.leg_chain[j];
    let hinge = Rot3::from_axis_angle(&joint.axis, q).expect("validated axis");
    let fixed = if j == 0 { model.leg_frame(leg) } else { joint.placement };
    fixed.compose(&Transform3::new(hinge, Vec3::zeros()))
}

/// Newton-Euler pass with explicit accelerations; returns the generalized
/// force M ud + b, gravity included in b.
fn rnea_with(
    model: &RobotModel,
    state: &RobotState,
    alpha_b: &Vec3,
    a_b: &Vec3,
    qdd: &[f64],
) -> DVector<f64> {
    let nv = model.nv();
    let nl = model.joints_per_leg;
    let mut out = DVector::zeros(nv);

    // Offsetting the base acceleration by -g makes every body's inertial
    // force include its gravity load.
    let v0 = vec6(state.omega_b, state.v_b);
    let a0 = vec6(*alpha_b, a_b - state.gravity_body());

    let mut f_base = state.base_inertia_force(model, &v0, &a0);
    for leg in 0..model.n_legs {
        let span = model.leg_span(leg);
        let mut locals = Vec::with_capacity(nl);
        let mut vs = Vec::with_capacity(nl);
        let mut fs = Vec::with_capacity(nl);
        let (mut v_p, mut a_p) = (v0, a0);
        for j in 0..nl {
            let local = joint_local(model, leg, j, state.q[span.start + j]);
            let axis6 = vec6(model.leg_chain[j].axis.normalize(), Vec3::zeros());
            let v = motion_to_child(&local, &v_p) + axis6 * state.qd[span.start + j];
            let a = motion_to_child(&local, &a_p)
                + axis6 * qdd[span.start + j]
                + cross_motion(&v, &(axis6 * state.qd[span.start + j]));
            let inertia = &model.leg_chain[j].inertia;
            let f = inertia.mul_vec6(&a) + cross_force(&v, &inertia.mul_vec6(&v));
            locals.push(local);
            vs.push(v);
            fs.push(f);
            v_p = v;
            a_p = a;
        }
        for j in (0..nl).rev() {
            let axis6 = vec6(model.leg_chain[j].axis.normalize(), Vec3::zeros());
            out[model.joint_col(leg, j)] = axis6.dot(&fs[j]);
            let up = force_to_parent(&locals[j], &fs[j]);
            if j == 0 {
                f_base += up;
            } else {
                fs[j - 1] += up;
            }
        }
    }
    for i in 0..6 {
        out[i] = f_base[i];
    }
    out
}

impl RobotState {
    fn base_inertia_force(&self, model: &RobotModel, v0: &Vec6, a0: &Vec6) -> Vec6 {
        let i = &model.base_inertia;
        i.mul_vec6(a0) + cross_force(v0, &i.mul_vec6(v0))
    }
}

/// Generalized force for the state's own accelerations: M ud + b.
pub fn generalized_force(model: &RobotModel, state: &RobotState) -> DVector<f64> {
    rnea_with(model, state, &state.alpha_b, &state.a_b, &state.qdd)
}

/// Bias force b(q, u): Coriolis, centrifugal and gravity terms.
pub fn bias_force(model: &RobotModel, state: &RobotState) -> DVector<f64> {
    rnea_with(model, state, &Vec3::zeros(), &Vec3::zeros(), &vec![0.0; model.n_joints()])
}

/// 6x6 Pluecker motion transform taking parent coordinates to child
/// coordinates, for a child frame posed at `t` in the parent.
fn motion_matrix_to_child(t: &Transform3) -> Mat6 {
    let rt = t.rot.matrix().transpose();
    let mut x = Mat6::zeros();
    x.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    x.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-rt * skew(&t.trans)));
    x.fixed_view_mut::<3, 3>(3, 3).copy_from(&rt);
    x
}

/// Composite-rigid-body mass matrix.
pub fn mass_matrix(model: &RobotModel, state: &RobotState) -> DMatrix<f64> {
    let nv = model.nv();
    let nl = model.joints_per_leg;
    let mut m = DMatrix::zeros(nv, nv);
    let mut ic_base = model.base_inertia.to_matrix6();

    for leg in 0..model.n_legs {
        let span = model.leg_span(leg);
        let locals: Vec<Transform3> =
            (0..nl).map(|j| joint_local(model, leg, j, state.q[span.start + j])).collect();
        let xs: Vec<Mat6> = locals.iter().map(motion_matrix_to_child).collect();

        // Composite inertias up this leg, then fold the whole leg into the base.
        let mut ic: Vec<Mat6> = model.leg_chain.iter().map(|j| j.inertia.to_matrix6()).collect();
        for j in (1..nl).rev() {
            let folded = xs[j].transpose() * ic[j] * xs[j];
            ic[j - 1] += folded;
        }
        ic_base += xs[0].transpose() * ic[0] * xs[0];

        for j in 0..nl {
            let s = vec6(model.leg_chain[j].axis.normalize(), Vec3::zeros());
            let mut f = ic[j] * s;
            let col = model.joint_col(leg, j);
            m[(col, col)] = s.dot(&f);
            for anc in (0..j).rev() {
                f = xs[anc + 1].transpose() * f;
                let s_anc = vec6(model.leg_chain[anc].axis.normalize(), Vec3::zeros());
                let row = model.joint_col(leg, anc);
                m[(row, col)] = s_anc.dot(&f);
                m[(col, row)] = m[(row, col)];
            }
            f = xs[0].transpose() * f;
            for r in 0..6 {
                m[(r, col)] = f[r];
                m[(col, r)] = f[r];
            }
        }
    }
    m.view_mut((0, 0), (6, 6)).copy_from(&ic_base);
    m
}

/// World-frame point Jacobian rows of the attached feet: 3 rows per foot,
/// mapping u to the foot's world velocity.
pub fn contact_jacobian(model: &RobotModel, state: &RobotState, contacts: &[usize]) -> DMatrix<f64> {
    let kin = body_kinematics(model, state);
    let mut j = DMatrix::zeros(3 * contacts.len(), model.nv());
    for (row_block, &leg) in contacts.iter().enumerate() {
        let p_f = foot_position_world(model, &kin, leg);
        let r_b = state.r_wb.apply_inv(&(p_f - state.p_w));
        let jw = -(state.r_wb.matrix() * skew(&r_b));
        let jv = state.r_wb.matrix();
        for r in 0..3 {
            for c in 0..3 {
                j[(3 * row_block + r, c)] = jw[(r, c)];
                j[(3 * row_block + r, 3 + c)] = jv[(r, c)];
            }
        }
        for jj in 0..model.joints_per_leg {
            let body = &kin[1 + leg * model.joints_per_leg + jj];
            let axis_w = body.pose.rot.apply(&model.leg_chain[jj].axis.normalize());
            let col_vec = axis_w.cross(&(p_f - body.pose.trans));
            let col = model.joint_col(leg, jj);
            for r in 0..3 {
                j[(3 * row_block + r, col)] = col_vec[r];
            }
        }
    }
    j
}

/// Jdot u: classical foot accelerations that remain when the generalized
/// acceleration is zero.
pub fn contact_bias_accel(
    model: &RobotModel,
    state: &RobotState,
    contacts: &[usize],
) -> DVector<f64> {
    let mut coasting = state.clone();
    coasting.alpha_b = Vec3::zeros();
    coasting.a_b = Vec3::zeros();
    coasting.qdd = vec![0.0; model.n_joints()];
    let kin = body_kinematics(model, &coasting);
    let mut out = DVector::zeros(3 * contacts.len());
    for (i, &leg) in contacts.iter().enumerate() {
        let a = foot_acceleration_world(model, &kin, leg);
        out.fixed_rows_mut::<3>(3 * i).copy_from(&a);
    }
    out
}

/// Mass matrix, bias, and contact Jacobian in one bundle.
pub fn compute_terms(
    model: &RobotModel,
    state: &RobotState,
    contacts: &[usize],
) -> Result<DynamicsTerms> {
    let c = sorted_contacts(model, contacts)?;
    Ok(DynamicsTerms {
        mass_matrix: mass_matrix(model, state),
        bias: bias_force(model, state),
        contact_jacobian: contact_jacobian(model, state, &c),
        contact_legs: c,
    })
}

/// Actuator torques realizing the state's accelerations.
///
/// The six base rows are unactuated, so the contact forces must absorb them;
/// among all consistent forces the least-norm one is taken (pseudoinverse of
/// the base-row block, singular values below `SV_CUTOFF` truncated). Errors
/// if the attached feet cannot span the base wrench.
pub fn inverse_dynamics(
    model: &RobotModel,
    state: &RobotState,
    contacts: &[usize],
) -> Result<ContactSolution> {
    let c = sorted_contacts(model, contacts)?;
    let phi = generalized_force(model, state);

    if c.is_empty() {
        let residual = (0..6).map(|i| phi[i].abs()).fold(0.0, f64::max);
        if residual > BASE_CONSISTENCY_TOL {
            return Err(Error::Infeasible(format!(
                "free flight with unbalanced base wrench (|.|inf = {residual:.3e})"
            )));
        }
        let mut torques = JointTorques::zeros(model);
        for j in 0..model.n_joints() {
            torques.data[j] = model.gear_signs[j % model.joints_per_leg] * phi[6 + j];
        }
        return Ok(ContactSolution {
            torques,
            contact_legs: c,
            contact_forces: Vec::new(),
            residual,
        });
    }

    let j = contact_jacobian(model, state, &c);
    // Base rows of J' F = phi: a 6 x 3|C| system for the stacked forces.
    let a = j.columns(0, 6).transpose().into_owned();
    let svd = a.clone().svd(true, true);
    let rank = svd.singular_values.iter().filter(|&&s| s > SV_CUTOFF).count();
    if rank < 6 {
        return Err(Error::DegenerateContact { rank, required: 6 });
    }
    let phi_base = phi.rows(0, 6).into_owned();
    let f = pinv_solve(&a, &svd, &phi_base, SV_CUTOFF)?;

    let jt_f = j.transpose() * &f;
    let mut torques = JointTorques::zeros(model);
    for jj in 0..model.n_joints() {
        torques.data[jj] = model.gear_signs[jj % model.joints_per_leg] * (phi[6 + jj] - jt_f[6 + jj]);
    }
    let residual = (0..6).map(|i| (phi[i] - jt_f[i]).abs()).fold(0.0, f64::max);
    let contact_forces = (0..c.len()).map(|i| Vec3::from(f.fixed_rows::<3>(3 * i))).collect();
    Ok(ContactSolution { torques, contact_legs: c, contact_forces, residual })
}

/// Generalized acceleration under the given torques, with adhering feet held
/// by the KKT system [M, -J'; J, 0] [ud; F] = [S' tau - b; -Jdot u].
pub fn forward_dynamics(
    model: &RobotModel,
    state: &RobotState,
    tau: &JointTorques,
    contacts: &[usize],
) -> Result<ForwardResult> {
    let c = sorted_contacts(model, contacts)?;
    let nv = model.nv();
    let m = mass_matrix(model, state);
    let b = bias_force(model, state);

    let mut rhs_top = -b;
    for j in 0..model.n_joints() {
        rhs_top[6 + j] += model.gear_signs[j % model.joints_per_leg] * tau.data[j];
    }

    if c.is_empty() {
        let chol = m.cholesky().expect("mass matrix is positive definite");
        return Ok(ForwardResult {
            accel: chol.solve(&rhs_top),
            contact_legs: c,
            contact_forces: Vec::new(),
        });
    }

    let j = contact_jacobian(model, state, &c);
    let nc = 3 * c.len();
    let mut kkt = DMatrix::zeros(nv + nc, nv + nc);
    kkt.view_mut((0, 0), (nv, nv)).copy_from(&m);
    kkt.view_mut((0, nv), (nv, nc)).copy_from(&(-j.transpose()));
    kkt.view_mut((nv, 0), (nc, nv)).copy_from(&j);
    let mut rhs = DVector::zeros(nv + nc);
    rhs.rows_mut(0, nv).copy_from(&rhs_top);
    rhs.rows_mut(nv, nc).copy_from(&(-contact_bias_accel(model, state, &c)));

    let lu = kkt.lu();
    let sol = lu.solve(&rhs).ok_or_else(|| {
        let rank = j.svd(false, false).singular_values.iter().filter(|&&s| s > SV_CUTOFF).count();
        Error::DegenerateContact { rank, required: nc }
    })?;

    let accel = sol.rows(0, nv).into_owned();
    let contact_forces =
        (0..c.len()).map(|i| Vec3::from(sol.fixed_rows::<3>(nv + 3 * i))).collect();
    Ok(ForwardResult { accel, contact_legs: c, contact_forces })
}

/// Least-squares adjustment of velocities and accelerations so every
/// attached foot has zero world velocity and acceleration. Positions are
/// left alone. Idempotent up to floating-point noise.
pub fn project_contact_consistent(
    model: &RobotModel,
    state: &RobotState,
    contacts: &[usize],
) -> Result<RobotState> {
    let c = sorted_contacts(model, contacts)?;
    if c.is_empty() {
        return Ok(state.clone());
    }
    let mut out = state.clone();
    let j = contact_jacobian(model, state, &c);
    let svd = j.clone().svd(true, true);

    let u = DVector::from_vec(state.gen_velocity());
    let du = pinv_solve(&j, &svd, &(&j * &u), SV_CUTOFF)?;
    let u_new = u - du;
    out.set_gen_velocity(u_new.as_slice());

    // The velocity fix changes the coasting term, so recompute it before
    // correcting the accelerations.
    let bias = contact_bias_accel(model, &out, &c);
    let ud = DVector::from_vec(out.gen_acceleration());
    let dud = pinv_solve(&j, &svd, &(&j * &ud + bias), SV_CUTOFF)?;
    let ud_new = ud - dud;
    out.set_gen_acceleration(ud_new.as_slice());
    Ok(out)
}

fn exp_so3(w: &Vec3) -> Rot3 {
    let n = w.norm();
    // Below the axis constructor's zero cutoff the map is the identity to
    // machine precision anyway (the error is quadratic in the angle).
    if n < 1e-12 {
        Rot3::identity()
    } else {
        Rot3::from_axis_angle(w, n).expect("nonzero axis")
    }
}

/// One semi-implicit Euler step under `tau`, followed by constraint
/// stabilization: attached feet are snapped back to their positions at step
/// entry and the velocity/acceleration fields are re-projected.
pub fn step(
    model: &RobotModel,
    state: &RobotState,
    tau: &JointTorques,
    contacts: &[usize],
    dt: f64,
) -> Result<RobotState> {
    let c = sorted_contacts(model, contacts)?;
    let kin = body_kinematics(model, state);
    let anchors: Vec<Vec3> = c.iter().map(|&l| foot_position_world(model, &kin, l)).collect();

    let fd = forward_dynamics(model, state, tau, &c)?;
    let u = DVector::from_vec(state.gen_velocity());
    let u_new = &u + &fd.accel * dt;

    let mut out = state.clone();
    out.set_gen_velocity(u_new.as_slice());
    out.set_gen_acceleration(fd.accel.as_slice());
    out.p_w = state.p_w + state.r_wb.apply(&out.v_b) * dt;
    out.r_wb = (state.r_wb * exp_so3(&(out.omega_b * dt))).renormalized();
    for i in 0..out.q.len() {
        out.q[i] += out.qd[i] * dt;
    }

    if !c.is_empty() {
        // Two Newton iterations of the position snap are ample for the
        // O(dt^2) drift a single step produces.
        for _ in 0..2 {
            let kin = body_kinematics(model, &out);
            let mut err = DVector::zeros(3 * c.len());
            for (i, &leg) in c.iter().enumerate() {
                let e = anchors[i] - foot_position_world(model, &kin, leg);
                err.fixed_rows_mut::<3>(3 * i).copy_from(&e);
            }
            if err.amax() < 1e-13 {
                break;
            }
            let j = contact_jacobian(model, &out, &c);
            let delta = pinv_solve(&j, &j.clone().svd(true, true), &err, SV_CUTOFF)?;
            let dw = Vec3::new(delta[0], delta[1], delta[2]);
            let dv = Vec3::new(delta[3], delta[4], delta[5]);
            out.p_w += out.r_wb.apply(&dv);
            out.r_wb = (out.r_wb * exp_so3(&dw)).renormalized();
            for i in 0..out.q.len() {
                out.q[i] += delta[6 + i];
            }
        }
        out = project_contact_consistent(model, &out, &c)?;
    }
    Ok(out)
}

/// Kinetic plus gravitational potential energy.
pub fn total_energy(model: &RobotModel, state: &RobotState) -> f64 {
    let kin = body_kinematics(model, state);
    let inertias = std::iter::once(&model.base_inertia)
        .chain((0..model.n_legs).flat_map(|_| model.leg_chain.iter().map(|j| &j.inertia)));
    let mut e = 0.0;
    for (body, inertia) in kin.iter().zip(inertias) {
        e += 0.5 * body.v.dot(&inertia.mul_vec6(&body.v));
        let com_w = body.pose.apply_point(&inertia.com);
        e -= inertia.mass * gravity_w().z * com_w.z;
    }
    e
}

/// Spatial momentum about the world origin, [angular; linear].
pub fn world_momentum(model: &RobotModel, state: &RobotState) -> Vec6 {
    let kin = body_kinematics(model, state);
    let inertias = std::iter::once(&model.base_inertia)
        .chain((0..model.n_legs).flat_map(|_| model.leg_chain.iter().map(|j| &j.inertia)));
    let mut h = Vec6::zeros();
    for (body, inertia) in kin.iter().zip(inertias) {
        // Momentum is force-like: moving it to world coordinates picks up
        // the p x f moment arm.
        h += force_to_parent(&body.pose, &inertia.mul_vec6(&body.v));
    }
    h
}

/// Random dynamically busy state with at least three adhering feet, made
/// contact-consistent by projection.
pub fn sample_contact_consistent_state<R: Rng>(model: &RobotModel, rng: &mut R) -> RobotState {
    let mut s = RobotState::zero(model);
    s.p_w = Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(0.5..2.0),
    );
    s.r_wb = Rot3::from_euler_zyx(
        rng.random_range(-3.0..3.0),
        rng.random_range(-1.2..1.2),
        rng.random_range(-3.0..3.0),
    );
    let mut rv = || rng_range3(rng, 0.6);
    s.omega_b = rv();
    s.v_b = rv();
    s.alpha_b = rng_range3(rng, 1.5);
    s.a_b = rng_range3(rng, 1.5);
    for leg in 0..model.n_legs {
        let span = model.leg_span(leg);
        s.q[span.start] = rng.random_range(-0.5..0.5);
        s.q[span.start + 1] = rng.random_range(0.25..0.75);
        s.q[span.start + 2] = rng.random_range(0.4..1.1);
    }
    for v in s.qd.iter_mut() {
        *v = rng.random_range(-0.8..0.8);
    }
    for a in s.qdd.iter_mut() {
        *a = rng.random_range(-1.5..1.5);
    }
    let n_attached = rng.random_range(3..=model.n_legs);
    let mut legs: Vec<usize> = (0..model.n_legs).collect();
    for i in (1..legs.len()).rev() {
        legs.swap(i, rng.random_range(0..=i));
    }
    for &l in &legs[n_attached..] {
        s.adhesion[l] = false;
        s.contact[l] = false;
    }
    let contacts = s.attached_legs();
    project_contact_consistent(model, &s, &contacts).expect("sampled contacts are non-degenerate")
}

fn rng_range3<R: Rng>(rng: &mut R, scale: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robot::{make_robot, RobotFamily};
    use crate::spatial::{ang3, lin3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn newton_euler_and_composite_mass_matrix_agree() {
        let m = make_robot(RobotFamily::Hexa6);
        let mut r = rng(7);
        for _ in 0..10 {
            let s = sample_contact_consistent_state(&m, &mut r);
            let lhs = generalized_force(&m, &s);
            let mm = mass_matrix(&m, &s);
            let ud = DVector::from_vec(s.gen_acceleration());
            let rhs = &mm * &ud + bias_force(&m, &s);
            assert!((lhs - rhs).amax() < 1e-8);
        }
    }

    #[test]
    fn mass_matrix_is_symmetric_positive_definite() {
        for fam in RobotFamily::all() {
            let m = make_robot(fam);
            let mut r = rng(11);
            for _ in 0..10 {
                let s = sample_contact_consistent_state(&m, &mut r);
                let mm = mass_matrix(&m, &s);
                assert!((&mm - mm.transpose()).amax() < 1e-10);
                assert!(mm.clone().cholesky().is_some(), "{fam:?}");
            }
        }
    }

    #[test]
    fn static_stance_base_rows_carry_the_weight() {
        let m = make_robot(RobotFamily::Hexa6);
        let mut s = RobotState::zero(&m);
        s.r_wb = Rot3::from_euler_zyx(0.4, 0.3, -0.2);
        for leg in 0..m.n_legs {
            let span = m.leg_span(leg);
            s.q[span.start + 1] = 0.5;
            s.q[span.start + 2] = 0.8;
        }
        let b = bias_force(&m, &s);
        // At rest the bias is pure gravity load; its base linear rows,
        // rotated back to the world, must be straight up with magnitude
        // total weight.
        let lin_w = s.r_wb.apply(&Vec3::new(b[3], b[4], b[5]));
        assert!((lin_w.x).abs() < 1e-9);
        assert!((lin_w.y).abs() < 1e-9);
        assert!((lin_w.z - m.total_mass() * 9.81).abs() < 1e-9);
    }

    #[test]
    fn symmetric_stances_solve_to_machine_precision() {
        // A perfectly regular stance gives the contact block exactly
        // repeated singular values, where the factorization alone loses
        // digits; the refined solve must still leave a negligible residual.
        for fam in RobotFamily::all() {
            let m = make_robot(fam);
            let mut s = RobotState::zero(&m);
            s.r_wb = Rot3::rot_y(std::f64::consts::FRAC_PI_2);
            for leg in 0..m.n_legs {
                let span = m.leg_span(leg);
                s.q[span.start + 1] = -0.5;
                s.q[span.start + 2] = 1.2;
            }
            let sol = inverse_dynamics(&m, &s, &s.attached_legs()).unwrap();
            assert!(sol.residual < 1e-11, "{fam:?}: residual {:e}", sol.residual);
        }
    }

    #[test]
    fn free_fall_needs_no_torque() {
        for fam in RobotFamily::all() {
            let m = make_robot(fam);
            let mut s = RobotState::zero(&m);
            s.r_wb = Rot3::from_euler_zyx(1.0, -0.4, 0.6);
            s.adhesion = vec![false; m.n_legs];
            s.contact = vec![false; m.n_legs];
            // Whole robot accelerating with gravity, nothing rotating.
            s.a_b = s.gravity_body();
            let sol = inverse_dynamics(&m, &s, &[]).unwrap();
            let max = sol.torques.data.iter().fold(0.0f64, |acc, t| acc.max(t.abs()));
            assert!(max < 1e-8, "{fam:?}: {max:e}");
            assert!(sol.residual < 1e-8);
        }
    }

    #[test]
    fn momentum_rate_obeys_newton_under_forward_dynamics() {
        let m = make_robot(RobotFamily::Hexa6);
        let mut r = rng(3);
        let mut s = sample_contact_consistent_state(&m, &mut r);
        s.adhesion = vec![false; m.n_legs];
        s.contact = vec![false; m.n_legs];
        let mut tau = JointTorques::zeros(&m);
        for (i, t) in tau.data.iter_mut().enumerate() {
            *t = 0.4 * ((i as f64) * 0.8).sin();
        }
        let fd = forward_dynamics(&m, &s, &tau, &[]).unwrap();
        s.set_gen_acceleration(fd.accel.as_slice());

        // Central difference of world momentum along the exact state flow.
        let dt = 1e-5;
        let (hp, hm) = (world_momentum(&m, &advance(&m, &s, dt)), world_momentum(&m, &advance(&m, &s, -dt)));
        let hdot = (hp - hm) / (2.0 * dt);

        let total = m.total_mass();
        // Linear: sum of external forces = m g. Angular about the origin:
        // torque of gravity through the instantaneous center of mass.
        let com = robot_com(&m, &s);
        let expect_lin = total * gravity_w();
        let expect_ang = com.cross(&expect_lin);
        assert!((lin3(&hdot) - expect_lin).amax() < 1e-4, "{:?}", lin3(&hdot));
        assert!((ang3(&hdot) - expect_ang).amax() < 1e-4, "{:?}", ang3(&hdot));
    }

    fn robot_com(m: &RobotModel, s: &RobotState) -> Vec3 {
        let kin = body_kinematics(m, s);
        let inertias = std::iter::once(&m.base_inertia)
            .chain((0..m.n_legs).flat_map(|_| m.leg_chain.iter().map(|j| &j.inertia)));
        let mut c = Vec3::zeros();
        for (body, inertia) in kin.iter().zip(inertias) {
            c += inertia.mass * body.pose.apply_point(&inertia.com);
        }
        c / m.total_mass()
    }

    /// Second-order analytic advance of a state along its own (u, ud).
    fn advance(m: &RobotModel, s: &RobotState, dt: f64) -> RobotState {
        let mut out = s.clone();
        let w = s.omega_b * dt + s.alpha_b * (0.5 * dt * dt);
        out.r_wb = s.r_wb * exp_so3(&w);
        out.p_w = s.p_w
            + s.r_wb.apply(&(s.v_b * dt + (s.a_b + s.omega_b.cross(&s.v_b)) * (0.5 * dt * dt)));
        for i in 0..s.q.len() {
            out.q[i] = s.q[i] + s.qd[i] * dt + 0.5 * s.qdd[i] * dt * dt;
        }
        out.set_gen_velocity(
            (DVector::from_vec(s.gen_velocity()) + DVector::from_vec(s.gen_acceleration()) * dt)
                .as_slice(),
        );
        let _ = m;
        out
    }

    #[test]
    fn inverse_then_forward_recovers_the_accelerations() {
        let m = make_robot(RobotFamily::Magneto4);
        let mut r = rng(23);
        for _ in 0..10 {
            let s = sample_contact_consistent_state(&m, &mut r);
            let c = s.attached_legs();
            let sol = inverse_dynamics(&m, &s, &c).unwrap();
            let fd = forward_dynamics(&m, &s, &sol.torques, &c).unwrap();
            let want = DVector::from_vec(s.gen_acceleration());
            assert!((fd.accel - want).amax() < 1e-6);
        }
    }

    #[test]
    fn contact_projection_is_idempotent_and_consistent() {
        let m = make_robot(RobotFamily::Nona9);
        let mut r = rng(5);
        let s = sample_contact_consistent_state(&m, &mut r);
        let c = s.attached_legs();

        let j = contact_jacobian(&m, &s, &c);
        let u = DVector::from_vec(s.gen_velocity());
        assert!((&j * u).amax() < 1e-10, "feet still moving after projection");
        let ud = DVector::from_vec(s.gen_acceleration());
        let foot_acc = &j * ud + contact_bias_accel(&m, &s, &c);
        assert!(foot_acc.amax() < 1e-10);

        let again = project_contact_consistent(&m, &s, &c).unwrap();
        assert!((again.omega_b - s.omega_b).amax() < 1e-12);
        assert!((DVector::from_vec(again.qd.clone()) - DVector::from_vec(s.qd.clone())).amax() < 1e-12);
    }

    #[test]
    fn too_few_or_collinear_contacts_are_rejected() {
        let m = make_robot(RobotFamily::Hexa6);
        let mut r = rng(17);
        let mut s = sample_contact_consistent_state(&m, &mut r);
        for l in 0..m.n_legs {
            s.adhesion[l] = l < 2;
        }
        // Two point feet leave the base free to pivot about their axis.
        match inverse_dynamics(&m, &s, &[0, 1]) {
            Err(Error::DegenerateContact { rank, required }) => {
                assert_eq!(required, 6);
                assert!(rank < 6);
            }
            other => panic!("expected degenerate contact, got {other:?}"),
        }
        assert!(inverse_dynamics(&m, &s, &[3]).is_err());

        // Unbalanced free flight cannot be realized by joint torques alone.
        let mut free = s.clone();
        free.adhesion = vec![false; m.n_legs];
        free.a_b = Vec3::zeros();
        free.alpha_b = Vec3::zeros();
        assert!(matches!(inverse_dynamics(&m, &free, &[]), Err(Error::Infeasible(_))));
    }

    #[test]
    fn static_stance_holds_under_its_own_torques() {
        let m = make_robot(RobotFamily::Hexa6);
        let mut s = RobotState::zero(&m);
        s.p_w = Vec3::new(0.0, 0.0, 0.18);
        for leg in 0..m.n_legs {
            let span = m.leg_span(leg);
            s.q[span.start + 1] = 0.5;
            s.q[span.start + 2] = 0.9;
        }
        let c: Vec<usize> = (0..m.n_legs).collect();
        let s = project_contact_consistent(&m, &s, &c).unwrap();
        let kin0 = body_kinematics(&m, &s);
        let feet0: Vec<Vec3> = c.iter().map(|&l| foot_position_world(&m, &kin0, l)).collect();

        let tau = inverse_dynamics(&m, &s, &c).unwrap().torques;
        let mut cur = s.clone();
        for _ in 0..1000 {
            cur = step(&m, &cur, &tau, &c, 1e-3).unwrap();
        }
        let kin = body_kinematics(&m, &cur);
        for (i, &l) in c.iter().enumerate() {
            let drift = (foot_position_world(&m, &kin, l) - feet0[i]).amax();
            assert!(drift < 1e-3, "foot {l} drifted {drift:e}");
        }
        assert!((cur.p_w - s.p_w).amax() < 1e-3);
    }

    #[test]
    fn free_float_nearly_conserves_energy() {
        let m = make_robot(RobotFamily::Hexa6);
        let mut s = RobotState::zero(&m);
        s.p_w = Vec3::new(0.0, 0.0, 5.0);
        s.omega_b = Vec3::new(0.8, -0.5, 0.6);
        s.v_b = Vec3::new(0.4, 0.2, 0.5);
        for (i, v) in s.qd.iter_mut().enumerate() {
            *v = 0.3 * ((i as f64) * 0.9).cos();
        }
        s.adhesion = vec![false; m.n_legs];
        s.contact = vec![false; m.n_legs];
        let e0 = total_energy(&m, &s);
        let tau = JointTorques::zeros(&m);
        for _ in 0..10_000 {
            s = step(&m, &s, &tau, &[], 1e-4).unwrap();
        }
        let e1 = total_energy(&m, &s);
        assert!((e1 - e0).abs() / e0.abs() < 0.01, "dE = {:.3e} of {:.3e}", e1 - e0, e0);
    }
}
