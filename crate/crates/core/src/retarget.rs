//! Keypoint retargeting: weighted least squares over joint angles, solved
//! with Levenberg–Marquardt, followed by projection onto the safe
//! (in-limits, collision-free) set.
//!
//! The objective is `sum_i w_i * |p_i^h - p_i^r(q)|^2` over the model's
//! correspondence set. The Jacobian is taken by central differences of the
//! forward kinematics. Every candidate step is clamped to the joint limits
//! and only accepted when it lowers the objective, so the cost is
//! monotonically non-increasing across accepted iterations.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hand_model::{segment_distance, HandPose, KeypointRef, KeypointSet, KinematicModel, PALM_CENTER};
use crate::NUM_DOF;

/// Angular resolution of the safe-manifold bisection (rad, max-norm).
pub const CLAMP_RESOLUTION: f64 = 1e-4;

const MAX_DAMPING_RETRIES: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct RetargetConfig {
    /// One non-negative weight per correspondence keypoint.
    pub weights: Vec<f64>,
    /// Iteration cap for each LM run (reseeds run their own).
    pub max_iters: usize,
    /// Stop when an accepted step moves no joint more than this (rad).
    pub tol_step: f64,
    /// Stop when the weighted RMS residual drops below this (m).
    pub tol_residual: f64,
    /// Initial Levenberg damping; adapted by x10 / /10.
    pub damping: f64,
    /// Central-difference step for the Jacobian (rad).
    pub fd_step: f64,
    /// Joints free to move; `None` means all of them.
    pub active_joints: Option<Vec<usize>>,
    /// Weight of the clearance hinge penalty relative to the mean keypoint
    /// weight. Zero turns the penalty off.
    pub collision_weight: f64,
    /// The penalty starts this far (m) outside the collision margin.
    pub collision_buffer: f64,
    /// Per-finger reseeds tried when a finger's keypoint is left off target.
    /// Zero disables reseeding.
    pub finger_restarts: usize,
}

impl RetargetConfig {
    /// Defaults for `model`: fingertips weighted 1.0, palm centre 0.5.
    pub fn for_model(model: &KinematicModel) -> Self {
        let weights = model
            .correspondence_labels()
            .iter()
            .map(|l| if l == PALM_CENTER { 0.5 } else { 1.0 })
            .collect();
        RetargetConfig {
            weights,
            max_iters: 50,
            tol_step: 1e-5,
            tol_residual: 1e-4,
            damping: 1e-3,
            fd_step: 1e-6,
            active_joints: None,
            collision_weight: 1.0,
            collision_buffer: 2e-4,
            finger_restarts: 16,
        }
    }

    fn validate(&self, n_points: usize) -> Result<()> {
        if self.weights.len() != n_points {
            return Err(Error::validation(format!(
                "{} weights for {n_points} correspondence points",
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::validation("weights must be finite and non-negative"));
        }
        if !self.weights.iter().any(|w| *w > 0.0) {
            return Err(Error::validation("at least one weight must be positive"));
        }
        if self.max_iters < 1 {
            return Err(Error::validation("max_iters must be at least 1"));
        }
        if !(self.tol_step > 0.0 && self.tol_residual > 0.0 && self.fd_step > 0.0) {
            return Err(Error::validation("tolerances and fd_step must be positive"));
        }
        if !(self.collision_weight >= 0.0 && self.collision_buffer >= 0.0) {
            return Err(Error::validation("collision penalty settings must be non-negative"));
        }
        if !(self.damping >= 0.0) {
            return Err(Error::validation("damping must be non-negative"));
        }
        if let Some(active) = &self.active_joints {
            if active.is_empty() || active.iter().any(|&j| j >= NUM_DOF) {
                return Err(Error::validation("active_joints must name valid joints"));
            }
        }
        Ok(())
    }
}

/// Output of [`retarget_pose`].
#[derive(Clone, Debug, PartialEq)]
pub struct RetargetResult {
    pub pose: HandPose,
    /// Weighted RMS keypoint error of `pose` (m).
    pub residual: f64,
    /// LM iterations summed over all runs, reseeds included.
    pub iterations: usize,
    /// True when the solver output collided and was pulled back.
    pub clamped: bool,
    pub converged: bool,
}

/// Limit-clamped optimum before the collision projection.
#[derive(Clone, Debug, PartialEq)]
pub struct IkSolution {
    pub pose: HandPose,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    /// Most recent accepted iterate that was collision-free, if any.
    pub last_safe: Option<HandPose>,
}

struct Problem<'a> {
    model: &'a KinematicModel,
    refs: &'a [KeypointRef],
    targets: &'a [Vector3<f64>],
    sqrt_w: Vec<f64>,
    weight_sum: f64,
    /// `sqrt` of the clearance penalty weight; zero disables the penalty rows.
    sqrt_penalty: f64,
    penalty_threshold: f64,
    /// Capsule pairs that can change clearance (at least one side moves with
    /// an active joint); the others only add a constant.
    pairs: Vec<(usize, usize)>,
}

impl Problem<'_> {
    fn n_keypoint_rows(&self) -> usize {
        3 * self.refs.len()
    }

    fn n_rows(&self) -> usize {
        let pairs = if self.sqrt_penalty > 0.0 {
            self.pairs.len()
        } else {
            0
        };
        self.n_keypoint_rows() + pairs
    }

    /// Residual rows: `sqrt(w_i) (p^h_i - p^r_i(q))` for every keypoint,
    /// then one hinge row per capsule pair that is closer than the threshold.
    fn residuals(&self, q: &HandPose) -> DVector<f64> {
        let links = self.model.link_transforms(q);
        let pts = self.model.points_from_links(&links, self.refs);
        let mut r = DVector::zeros(self.n_rows());
        for (i, (p, t)) in pts.iter().zip(self.targets).enumerate() {
            let e = (t - p) * self.sqrt_w[i];
            r[3 * i] = e.x;
            r[3 * i + 1] = e.y;
            r[3 * i + 2] = e.z;
        }
        if self.sqrt_penalty > 0.0 {
            let base = self.n_keypoint_rows();
            let world: Vec<_> = (0..self.model.capsules.len())
                .map(|i| self.model.capsule_world(&links, i))
                .collect();
            for (k, &(a, b)) in self.pairs.iter().enumerate() {
                let (a1, b1, r1) = world[a];
                let (a2, b2, r2) = world[b];
                let c = segment_distance(&a1, &b1, &a2, &b2) - r1 - r2;
                r[base + k] = self.sqrt_penalty * (self.penalty_threshold - c).max(0.0);
            }
        }
        r
    }

    fn keypoint_cost(&self, r: &DVector<f64>) -> f64 {
        r.rows(0, self.n_keypoint_rows()).norm_squared()
    }

    fn rms(&self, keypoint_cost: f64) -> f64 {
        (keypoint_cost / self.weight_sum).sqrt()
    }

    /// Derivative of the residual rows w.r.t. the listed joints, by central
    /// differences. Sign convention: `d(-r)/dq`, so the Gauss-Newton step is
    /// `(JtJ)^-1 Jt r`.
    fn jacobian(&self, q: &HandPose, joints: &[usize], h: f64) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.n_rows(), joints.len());
        for (col, &j) in joints.iter().enumerate() {
            let mut qp = *q;
            let mut qm = *q;
            qp[j] += h;
            qm[j] -= h;
            let rp = self.residuals(&qp);
            let rm = self.residuals(&qm);
            let d = (rm - rp) / (2.0 * h);
            jac.set_column(col, &d);
        }
        jac
    }
}

fn check_targets(model: &KinematicModel, targets: &KeypointSet) -> Result<()> {
    let n = model.correspondence.len();
    if targets.len() != n {
        return Err(Error::validation(format!(
            "expected {n} correspondence keypoints, got {}",
            targets.len()
        )));
    }
    if targets
        .points
        .iter()
        .any(|p| !p.iter().all(|c| c.is_finite()))
    {
        return Err(Error::validation("target keypoints must be finite"));
    }
    Ok(())
}

/// Joints allowed to move this iteration: the configured set minus joints
/// pinned at a limit whose descent direction points further out.
fn free_joints(model: &KinematicModel, q: &HandPose, active: &[usize], grad: &DVector<f64>) -> Vec<usize> {
    active
        .iter()
        .enumerate()
        .filter(|&(k, &j)| {
            let spec = &model.joints[j];
            !((q[j] <= spec.limit_lo && grad[k] < 0.0) || (q[j] >= spec.limit_hi && grad[k] > 0.0))
        })
        .map(|(_, &j)| j)
        .collect()
}

/// Solves the weighted keypoint least-squares problem inside the joint
/// limits, without the final collision projection.
pub fn solve_ik(
    model: &KinematicModel,
    targets: &KeypointSet,
    config: &RetargetConfig,
    q_init: &HandPose,
) -> Result<IkSolution> {
    check_targets(model, targets)?;
    config.validate(targets.len())?;
    if !q_init.is_finite() {
        return Err(Error::validation("q_init must be finite"));
    }

    let active: Vec<usize> = config
        .active_joints
        .clone()
        .unwrap_or_else(|| (0..NUM_DOF).collect());
    let mut moving = vec![false; model.num_links()];
    for (j, spec) in model.joints.iter().enumerate() {
        moving[j + 1] = active.contains(&j) || moving[spec.parent_link];
    }
    let pairs = model
        .collision_pairs()
        .iter()
        .copied()
        .filter(|&(a, b)| moving[model.capsules[a].link] || moving[model.capsules[b].link])
        .collect();

    let weight_sum: f64 = config.weights.iter().sum();
    let mean_weight = weight_sum / config.weights.len() as f64;
    let problem = Problem {
        model,
        refs: &model.correspondence,
        targets: &targets.points,
        sqrt_w: config.weights.iter().map(|w| w.sqrt()).collect(),
        weight_sum,
        sqrt_penalty: (config.collision_weight * mean_weight).sqrt(),
        penalty_threshold: model.collision_margin + config.collision_buffer,
        pairs,
    };

    let mut q = model.clamp_limits(q_init);
    let mut r = problem.residuals(&q);
    let mut cost = r.norm_squared();
    let mut history = vec![cost];
    let mut last_safe = model.collision_check(&q).free.then_some(q);
    let mut lambda = config.damping;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iters {
        let kp_cost = problem.keypoint_cost(&r);
        if problem.rms(kp_cost) < config.tol_residual && cost == kp_cost {
            converged = true;
            break;
        }
        iterations += 1;

        let jac_all = problem.jacobian(&q, &active, config.fd_step);
        let grad_all = jac_all.transpose() * &r;
        let free = free_joints(model, &q, &active, &grad_all);
        if free.is_empty() {
            converged = true;
            break;
        }
        let cols: Vec<usize> = free
            .iter()
            .map(|j| active.iter().position(|a| a == j).unwrap())
            .collect();
        let jac = jac_all.select_columns(&cols);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;

        let mut accepted = false;
        let mut stationary = false;
        for _ in 0..MAX_DAMPING_RETRIES {
            let step = solve_damped(&jtj, &jtr, lambda);
            let mut candidate = q;
            for (k, &j) in free.iter().enumerate() {
                candidate[j] += step[k];
            }
            let candidate = model.clamp_limits(&candidate);
            let moved = candidate.max_abs_diff(&q);
            let r_new = problem.residuals(&candidate);
            let cost_new = r_new.norm_squared();
            if cost_new < cost {
                q = candidate;
                r = r_new;
                cost = cost_new;
                history.push(cost);
                if model.collision_check(&q).free {
                    last_safe = Some(q);
                }
                lambda /= 10.0;
                accepted = true;
                if moved < config.tol_step {
                    converged = true;
                }
                break;
            }
            if moved < config.tol_step {
                stationary = true;
                break;
            }
            lambda = if lambda > 0.0 {
                lambda * 10.0
            } else {
                1e-3 * jtj.diagonal().max()
            };
        }
        if stationary || (accepted && converged) {
            converged = true;
            break;
        }
        if !accepted {
            // damping exhausted without progress
            break;
        }
    }
    let residual = problem.rms(problem.keypoint_cost(&r));
    if residual < config.tol_residual {
        converged = true;
    }

    Ok(IkSolution {
        pose: q,
        residual,
        iterations,
        converged,
        cost_history: history,
        last_safe,
    })
}

/// Solves `(JtJ + lambda I) x = JtR`, falling back to a pseudo-inverse when
/// the system is singular (possible with zero damping).
fn solve_damped(jtj: &DMatrix<f64>, jtr: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let n = jtj.nrows();
    let a = jtj + DMatrix::identity(n, n) * lambda;
    if let Some(chol) = a.clone().cholesky() {
        let x = chol.solve(jtr);
        if x.iter().all(|v| v.is_finite()) {
            return x;
        }
    }
    a.svd(true, true)
        .solve(jtr, 1e-14)
        .unwrap_or_else(|_| DVector::zeros(n))
}

/// Weighted RMS residual of `pose` against `targets`.
pub fn weighted_residual(
    model: &KinematicModel,
    targets: &KeypointSet,
    weights: &[f64],
    pose: &HandPose,
) -> Result<f64> {
    check_targets(model, targets)?;
    let robot = model.correspondence_keypoints(pose)?;
    let (num, den) = robot
        .points
        .iter()
        .zip(&targets.points)
        .zip(weights)
        .fold((0.0, 0.0), |(n, d), ((p, t), w)| (n + w * (t - p).norm_squared(), d + w));
    Ok((num / den).sqrt())
}

/// Maps human keypoints (already in the robot hand-base frame) to a safe
/// robot pose. `q_init` is the warm start, usually the previous frame.
pub fn retarget_pose(
    model: &KinematicModel,
    human_keypoints: &KeypointSet,
    config: &RetargetConfig,
    q_init: &HandPose,
) -> Result<RetargetResult> {
    let mut ik = solve_ik(model, human_keypoints, config, q_init)?;
    if config.finger_restarts > 0 {
        ik = reseed_fingers(model, human_keypoints, config, ik)?;
    }

    let warm = model.clamp_limits(q_init);
    let prev_safe = match ik.last_safe {
        Some(q) => q,
        None if model.collision_check(&warm).free => warm,
        None => model.rest_pose(),
    };
    let safe = clamp_to_safe_manifold(model, &ik.pose, &prev_safe)?;
    let clamped = safe != ik.pose;
    let residual = if clamped {
        weighted_residual(model, human_keypoints, &config.weights, &safe)?
    } else {
        ik.residual
    };
    Ok(RetargetResult {
        pose: safe,
        residual,
        iterations: ik.iterations,
        clamped,
        converged: ik.converged,
    })
}

/// Fixed RNG seed for finger reseeding, so retargeting stays deterministic.
const RESEED_SEED: u64 = 0x5eed_f1;
const RESEED_ROUNDS: usize = 3;
const RESEED_MAX_ITERS: usize = 15;

/// Finger driving `link`, if any.
fn finger_of_link(model: &KinematicModel, link: usize) -> Option<usize> {
    let joint = link.checked_sub(1)?;
    model.fingers.iter().position(|f| f.joints.contains(&joint))
}

/// Fingers that still need work: those whose correspondence point is off
/// target, and (second list) those touching a capsule pair in collision.
fn fingers_to_reseed(
    model: &KinematicModel,
    targets: &KeypointSet,
    config: &RetargetConfig,
    pose: &HandPose,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut off = Vec::new();
    let robot = model.correspondence_keypoints(pose)?;
    for (k, r) in model.correspondence.iter().enumerate() {
        let KeypointRef::Frame(i) = *r else { continue };
        if config.weights[k] == 0.0 || (robot.points[k] - targets.points[k]).norm() < config.tol_residual {
            continue;
        }
        off.extend(finger_of_link(model, model.keypoint_frames[i].link));
    }
    let mut hit = Vec::new();
    let clearances = model.pair_clearances(pose);
    for (&(a, b), c) in model.collision_pairs().iter().zip(clearances) {
        if c < model.collision_margin {
            hit.extend(finger_of_link(model, model.capsules[a].link));
            hit.extend(finger_of_link(model, model.capsules[b].link));
        }
    }
    for v in [&mut off, &mut hit] {
        v.sort_unstable();
        v.dedup();
    }
    Ok((off, hit))
}

/// Escapes per-finger local minima. Each finger that is off target or in
/// collision is re-solved alone from random seeds over its joint ranges
/// (fixed-seed RNG), the best seed is kept, and the whole hand is polished.
fn reseed_fingers(
    model: &KinematicModel,
    targets: &KeypointSet,
    config: &RetargetConfig,
    first: IkSolution,
) -> Result<IkSolution> {
    let done = |sol: &IkSolution| sol.residual < config.tol_residual && model.collision_check(&sol.pose).free;
    let mut current = first;
    let mut rngs: Vec<ChaCha8Rng> = (0..model.fingers.len())
        .map(|f| ChaCha8Rng::seed_from_u64(RESEED_SEED ^ f as u64))
        .collect();
    for round in 0..RESEED_ROUNDS {
        if done(&current) {
            break;
        }
        let (off, hit) = fingers_to_reseed(model, targets, config, &current.pose)?;
        let mut fingers = [off, hit].concat();
        fingers.sort_unstable();
        fingers.dedup();
        let mut pose = current.pose;
        for f in fingers {
            // a finger's exact solution can collide with a neighbour's, so
            // later rounds move the neighbours too
            let group = if round == 0 {
                f..f + 1
            } else {
                f.saturating_sub(1)..(f + 2).min(model.fingers.len())
            };
            let joints: Vec<usize> = group.clone().flat_map(|g| model.fingers[g].joints.iter().copied()).collect();
            let mut sub = config.clone();
            let sub_joints: Vec<usize> = match &config.active_joints {
                Some(active) => joints.iter().copied().filter(|j| active.contains(j)).collect(),
                None => joints,
            };
            if sub_joints.is_empty() {
                continue;
            }
            sub.active_joints = Some(sub_joints.clone());
            // seeds only need to find the basin; the final polish refines
            sub.max_iters = config.max_iters.min(RESEED_MAX_ITERS);
            let mut best: Option<(f64, HandPose)> = None;
            for _ in 0..config.finger_restarts {
                let mut seed = pose;
                for &j in &sub_joints {
                    let spec = &model.joints[j];
                    seed[j] = rng_range(&mut rngs[f], spec.limit_lo, spec.limit_hi);
                }
                let sol = solve_ik(model, targets, &sub, &seed)?;
                let cost = *sol.cost_history.last().unwrap();
                if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                    best = Some((cost, sol.pose));
                }
                let (off, hit) = fingers_to_reseed(model, targets, config, &sol.pose)?;
                if !group.clone().any(|g| off.contains(&g) || hit.contains(&g)) {
                    break;
                }
            }
            if let Some((_, p)) = best {
                pose = p;
            }
        }
        let mut polished = solve_ik(model, targets, config, &pose)?;
        polished.iterations += current.iterations;
        if polished.last_safe.is_none() {
            polished.last_safe = current.last_safe;
        }
        let better = match (done(&polished), done(&current)) {
            (true, _) => true,
            (false, true) => false,
            (false, false) => polished.cost_history.last() < current.cost_history.last(),
        };
        if better {
            current = polished;
        }
    }
    Ok(current)
}

fn rng_range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Pulls `q_star` back towards the known-safe `q_prev_safe` until it clears
/// the collision margin. Collision-free inputs are returned untouched.
///
/// Bisects on the straight segment between the two poses and returns the
/// farthest safe point found, to [`CLAMP_RESOLUTION`] in max-norm.
pub fn clamp_to_safe_manifold(
    model: &KinematicModel,
    q_star: &HandPose,
    q_prev_safe: &HandPose,
) -> Result<HandPose> {
    if !q_star.is_finite() || !q_prev_safe.is_finite() {
        return Err(Error::validation("poses must be finite"));
    }
    if !model.within_limits(q_star) || !model.within_limits(q_prev_safe) {
        return Err(Error::validation("poses must lie within joint limits"));
    }
    let prev = model.collision_check(q_prev_safe);
    if !prev.free {
        return Err(Error::Invariant(format!(
            "previous safe pose is in collision (clearance {:.6} m)",
            prev.min_clearance
        )));
    }
    if model.collision_check(q_star).free {
        return Ok(*q_star);
    }

    let span = q_star.max_abs_diff(q_prev_safe);
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while (hi - lo) * span > CLAMP_RESOLUTION {
        let mid = 0.5 * (lo + hi);
        if model.collision_check(&q_prev_safe.lerp(q_star, mid)).free {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(q_prev_safe.lerp(q_star, lo))
}

/// Brings raw human keypoints into the robot hand-base frame.
///
/// Requires `WRIST`, `INDEX_CMC` and `PINKY_CMC`. The wrist moves to the
/// origin, the wrist→index-CMC direction becomes +x, the palm normal
/// (pinky × index, as seen from the wrist) becomes +z, and everything is
/// scaled by robot palm width / human palm width.
pub fn normalize_human_frame(model: &KinematicModel, raw: &KeypointSet) -> Result<KeypointSet> {
    let get = |label: &str| {
        raw.get(label)
            .copied()
            .ok_or_else(|| Error::validation(format!("raw keypoints lack {label}")))
    };
    let wrist = get("WRIST")?;
    let index = get("INDEX_CMC")?;
    let pinky = get("PINKY_CMC")?;

    let to_index = index - wrist;
    let to_pinky = pinky - wrist;
    let normal = to_pinky.cross(&to_index);
    if normal.norm() <= 1e-9 * to_index.norm() * to_pinky.norm() || to_index.norm() == 0.0 {
        return Err(Error::validation("degenerate palm: wrist and CMC points are collinear"));
    }
    let x = to_index.normalize();
    let z = normal.normalize();
    let y = z.cross(&x);
    let rot = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);

    let human_width = (index - pinky).norm();
    let scale = model.palm_width() / human_width;

    let points = raw
        .points
        .iter()
        .map(|p| (rot * (p - wrist)) * scale)
        .collect();
    KeypointSet::new(points, raw.labels.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn targets_for(model: &KinematicModel, pose: &HandPose) -> KeypointSet {
        model.correspondence_keypoints(pose).unwrap()
    }

    #[test]
    fn rest_targets_converge_immediately() {
        let m = KinematicModel::canonical();
        let cfg = RetargetConfig::for_model(&m);
        let res = retarget_pose(&m, &targets_for(&m, &m.rest_pose()), &cfg, &m.rest_pose()).unwrap();
        assert!(res.converged);
        assert!(res.iterations <= 2);
        assert!(res.residual < 1e-9);
        assert!(!res.clamped);
    }

    #[test]
    fn config_validation() {
        let m = KinematicModel::canonical();
        let t = targets_for(&m, &m.rest_pose());
        let mut cfg = RetargetConfig::for_model(&m);
        cfg.weights = vec![0.0; 6];
        assert!(solve_ik(&m, &t, &cfg, &m.rest_pose()).is_err());
        let mut cfg = RetargetConfig::for_model(&m);
        cfg.max_iters = 0;
        assert!(solve_ik(&m, &t, &cfg, &m.rest_pose()).is_err());
        let mut cfg = RetargetConfig::for_model(&m);
        cfg.damping = -1.0;
        assert!(solve_ik(&m, &t, &cfg, &m.rest_pose()).is_err());
    }

    #[test]
    fn non_finite_targets_rejected() {
        let m = KinematicModel::canonical();
        let mut t = targets_for(&m, &m.rest_pose());
        t.points[0].x = f64::NAN;
        let cfg = RetargetConfig::for_model(&m);
        assert!(matches!(
            retarget_pose(&m, &t, &cfg, &m.rest_pose()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn exhausted_iterations_is_not_an_error() {
        let m = KinematicModel::canonical();
        let mut goal = m.mid_pose();
        goal[5] = 1.2;
        let mut cfg = RetargetConfig::for_model(&m);
        cfg.max_iters = 1;
        cfg.finger_restarts = 0;
        let res = retarget_pose(&m, &targets_for(&m, &goal), &cfg, &m.rest_pose()).unwrap();
        assert_eq!(res.iterations, 1);
        assert!(!res.converged);
    }

    #[test]
    fn clamp_identity_cases() {
        let m = KinematicModel::canonical();
        let safe = m.mid_pose();
        assert_eq!(clamp_to_safe_manifold(&m, &safe, &m.rest_pose()).unwrap(), safe);
        assert_eq!(clamp_to_safe_manifold(&m, &safe, &safe).unwrap(), safe);
    }

    #[test]
    fn clamp_rejects_colliding_anchor() {
        let m = KinematicModel::canonical();
        let mut bad = m.rest_pose();
        // index and middle abducted into each other
        bad[m.joint_index("INDEX_MCP_AA").unwrap()] = -0.35;
        bad[m.joint_index("MIDDLE_MCP_AA").unwrap()] = 0.35;
        assert!(!m.collision_check(&bad).free);
        assert!(matches!(
            clamp_to_safe_manifold(&m, &m.rest_pose(), &bad),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn normalize_rejects_collinear_palm() {
        let m = KinematicModel::canonical();
        let raw = KeypointSet::new(
            vec![Vector3::zeros(), Vector3::new(0.04, 0.0, 0.0), Vector3::new(0.08, 0.0, 0.0)],
            vec!["WRIST".into(), "INDEX_CMC".into(), "PINKY_CMC".into()],
        )
        .unwrap();
        assert!(normalize_human_frame(&m, &raw).is_err());
    }

    #[test]
    fn normalize_requires_wrist() {
        let m = KinematicModel::canonical();
        let raw = m.fk_keypoints(&m.rest_pose()).unwrap();
        assert!(normalize_human_frame(&m, &raw).is_err());
    }
}
