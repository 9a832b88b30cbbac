//! 22-DOF hand kinematics: model file, forward kinematics, joint limits and
//! capsule self-collision.
//!
//! Links are numbered so that link `0` is the palm and joint `j` drives link
//! `j + 1`. Every joint frame is a pure translation of its parent link frame
//! followed by a rotation about the joint axis, so the zero pose reproduces
//! the layout given by the `origin_offset`s.
//!
//! The canonical model shipped in `assets/canonical_hand.json` is a stand-in
//! with plausible anthropomorphic dimensions. It is not the geometry of any
//! particular commercial hand.

use std::fmt;
use std::ops::{Index, IndexMut};
use std::path::Path;

use nalgebra::{Isometry3, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{NUM_DOF, NUM_KEYPOINTS};

pub const MODEL_FORMAT: &str = "emgpose-hand/1";
/// Label of the derived palm-centre point (centroid of the four finger CMC frames).
pub const PALM_CENTER: &str = "PALM_CENTER";
pub const DEFAULT_COLLISION_MARGIN: f64 = 0.002;

const CANONICAL_JSON: &str = include_str!("../assets/canonical_hand.json");

/// Joint angles of the hand in radians, in model joint order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandPose(pub [f64; NUM_DOF]);

impl HandPose {
    pub fn zeros() -> Self {
        HandPose([0.0; NUM_DOF])
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let angles: [f64; NUM_DOF] = values.try_into().map_err(|_| {
            Error::validation(format!(
                "hand pose needs {NUM_DOF} angles, got {}",
                values.len()
            ))
        })?;
        Ok(HandPose(angles))
    }

    pub fn angles(&self) -> &[f64; NUM_DOF] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|a| a.is_finite())
    }

    /// `self + t * (other - self)`.
    pub fn lerp(&self, other: &HandPose, t: f64) -> HandPose {
        let mut out = *self;
        for (o, (a, b)) in out.0.iter_mut().zip(self.0.iter().zip(other.0.iter())) {
            *o = a + t * (b - a);
        }
        out
    }

    pub fn max_abs_diff(&self, other: &HandPose) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<usize> for HandPose {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for HandPose {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Labelled 3D points in the hand-base frame (meters).
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    pub points: Vec<Vector3<f64>>,
    pub labels: Vec<String>,
}

impl KeypointSet {
    pub fn new(points: Vec<Vector3<f64>>, labels: Vec<String>) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::validation(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::validation("keypoint coordinates must be finite"));
        }
        Ok(KeypointSet { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<&Vector3<f64>> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| &self.points[i])
    }

    pub fn max_distance(&self, other: &KeypointSet) -> f64 {
        self.points
            .iter()
            .zip(other.points.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointSpec {
    pub name: String,
    pub axis: Vector3<f64>,
    pub parent_link: usize,
    pub origin_offset: Vector3<f64>,
    pub limit_lo: f64,
    pub limit_hi: f64,
}

/// One serial chain (thumb or finger) as an ordered list of joint indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Finger {
    pub name: String,
    pub joints: Vec<usize>,
}

/// Swept sphere around the segment `a`–`b`, both expressed in the link frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Capsule {
    pub link: usize,
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointFrame {
    pub name: String,
    pub link: usize,
    pub offset: Vector3<f64>,
}

/// A point used for retargeting: either a named frame or the derived palm centre.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeypointRef {
    Frame(usize),
    PalmCenter,
}

/// Result of a self-collision query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollisionCheck {
    pub free: bool,
    /// Smallest surface-to-surface distance over the checked capsule pairs (m).
    /// Negative values mean interpenetration.
    pub min_clearance: f64,
    /// Capsule indices realising `min_clearance`, lower index first.
    pub closest_pair: Option<(usize, usize)>,
}

/// Immutable description of the robot hand.
#[derive(Clone, Debug, PartialEq)]
pub struct KinematicModel {
    pub name: String,
    pub joints: Vec<JointSpec>,
    pub fingers: Vec<Finger>,
    pub capsules: Vec<Capsule>,
    pub keypoint_frames: Vec<KeypointFrame>,
    pub correspondence: Vec<KeypointRef>,
    pub collision_margin: f64,
    collision_pairs: Vec<(usize, usize)>,
    palm_frames: [usize; 4],
}

// ---------------------------------------------------------------------------
// model file

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    note: Option<String>,
    #[serde(default = "default_margin")]
    collision_margin: f64,
    joints: Vec<JointFile>,
    fingers: Vec<FingerFile>,
    capsules: Vec<CapsuleFile>,
    keypoint_frames: Vec<FrameFile>,
    correspondence_set: Vec<String>,
}

fn default_margin() -> f64 {
    DEFAULT_COLLISION_MARGIN
}

#[derive(Serialize, Deserialize)]
struct JointFile {
    name: String,
    axis: [f64; 3],
    parent_link: usize,
    origin_offset: [f64; 3],
    limit_lo: f64,
    limit_hi: f64,
}

#[derive(Serialize, Deserialize)]
struct FingerFile {
    name: String,
    joints: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CapsuleFile {
    link: usize,
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
}

#[derive(Serialize, Deserialize)]
struct FrameFile {
    name: String,
    link: usize,
    offset: [f64; 3],
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn arr(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Canonical label form: upper case, spaces and dashes replaced by `_`.
/// Lets users write joint names as they appear on plots ("THUMB CMC FE").
pub fn normalize_label(name: &str) -> String {
    name.trim()
        .chars()
        .map(|c| match c {
            ' ' | '-' => '_',
            c => c.to_ascii_uppercase(),
        })
        .collect()
}

impl KinematicModel {
    /// The bundled stand-in hand.
    pub fn canonical() -> Self {
        Self::from_json(CANONICAL_JSON).expect("bundled hand model is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT {
            return Err(Error::validation(format!(
                "unsupported hand model format `{}` (expected `{MODEL_FORMAT}`)",
                file.format
            )));
        }
        let joints = file
            .joints
            .into_iter()
            .map(|j| JointSpec {
                name: j.name,
                axis: v3(j.axis),
                parent_link: j.parent_link,
                origin_offset: v3(j.origin_offset),
                limit_lo: j.limit_lo,
                limit_hi: j.limit_hi,
            })
            .collect();
        let fingers = file
            .fingers
            .into_iter()
            .map(|f| Finger {
                name: f.name,
                joints: f.joints,
            })
            .collect();
        let capsules = file
            .capsules
            .into_iter()
            .map(|c| Capsule {
                link: c.link,
                a: v3(c.a),
                b: v3(c.b),
                radius: c.radius,
            })
            .collect();
        let keypoint_frames: Vec<KeypointFrame> = file
            .keypoint_frames
            .into_iter()
            .map(|f| KeypointFrame {
                name: f.name,
                link: f.link,
                offset: v3(f.offset),
            })
            .collect();
        let correspondence = file
            .correspondence_set
            .iter()
            .map(|name| resolve_ref(&keypoint_frames, name))
            .collect::<Result<Vec<_>>>()?;
        Self::build(
            file.name,
            joints,
            fingers,
            capsules,
            keypoint_frames,
            correspondence,
            file.collision_margin,
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            name: self.name.clone(),
            note: None,
            collision_margin: self.collision_margin,
            joints: self
                .joints
                .iter()
                .map(|j| JointFile {
                    name: j.name.clone(),
                    axis: arr(&j.axis),
                    parent_link: j.parent_link,
                    origin_offset: arr(&j.origin_offset),
                    limit_lo: j.limit_lo,
                    limit_hi: j.limit_hi,
                })
                .collect(),
            fingers: self
                .fingers
                .iter()
                .map(|f| FingerFile {
                    name: f.name.clone(),
                    joints: f.joints.clone(),
                })
                .collect(),
            capsules: self
                .capsules
                .iter()
                .map(|c| CapsuleFile {
                    link: c.link,
                    a: arr(&c.a),
                    b: arr(&c.b),
                    radius: c.radius,
                })
                .collect(),
            keypoint_frames: self
                .keypoint_frames
                .iter()
                .map(|f| FrameFile {
                    name: f.name.clone(),
                    link: f.link,
                    offset: arr(&f.offset),
                })
                .collect(),
            correspondence_set: self.correspondence_labels(),
        };
        serde_json::to_string_pretty(&file).expect("model serialises")
    }

    /// Validates and assembles a model, deriving the collision pair list.
    pub fn build(
        name: String,
        joints: Vec<JointSpec>,
        fingers: Vec<Finger>,
        capsules: Vec<Capsule>,
        keypoint_frames: Vec<KeypointFrame>,
        correspondence: Vec<KeypointRef>,
        collision_margin: f64,
    ) -> Result<Self> {
        if joints.len() != NUM_DOF {
            return Err(Error::validation(format!(
                "hand model needs exactly {NUM_DOF} joints, found {}",
                joints.len()
            )));
        }
        if keypoint_frames.len() != NUM_KEYPOINTS {
            return Err(Error::validation(format!(
                "hand model needs exactly {NUM_KEYPOINTS} keypoint frames, found {}",
                keypoint_frames.len()
            )));
        }
        let num_links = joints.len() + 1;
        for (j, spec) in joints.iter().enumerate() {
            if !(spec.limit_lo < spec.limit_hi) {
                return Err(Error::validation(format!(
                    "joint {}: limit_lo must be below limit_hi",
                    spec.name
                )));
            }
            if (spec.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::validation(format!(
                    "joint {}: axis is not unit length",
                    spec.name
                )));
            }
            if spec.parent_link > j {
                return Err(Error::validation(format!(
                    "joint {}: parent link {} is not earlier in topological order",
                    spec.name, spec.parent_link
                )));
            }
        }
        if fingers.len() != 5 {
            return Err(Error::validation("hand model needs 5 finger chains"));
        }
        for finger in &fingers {
            if finger.joints.iter().any(|&j| j >= NUM_DOF) {
                return Err(Error::validation(format!(
                    "finger {} references an unknown joint",
                    finger.name
                )));
            }
        }
        for (i, cap) in capsules.iter().enumerate() {
            if !(cap.radius > 0.0) || cap.link >= num_links {
                return Err(Error::validation(format!(
                    "capsule {i}: needs radius > 0 and a valid link"
                )));
            }
        }
        for frame in &keypoint_frames {
            if frame.link >= num_links {
                return Err(Error::validation(format!(
                    "keypoint frame {} references link {}",
                    frame.name, frame.link
                )));
            }
        }
        if correspondence.is_empty() {
            return Err(Error::validation("correspondence set must not be empty"));
        }
        if !(collision_margin >= 0.0) {
            return Err(Error::validation("collision margin must be non-negative"));
        }

        let mut palm_frames = [0usize; 4];
        for (slot, finger) in ["INDEX", "MIDDLE", "RING", "PINKY"].iter().enumerate() {
            let label = format!("{finger}_CMC");
            palm_frames[slot] = keypoint_frames
                .iter()
                .position(|f| f.name == label)
                .ok_or_else(|| Error::validation(format!("missing keypoint frame {label}")))?;
        }

        let collision_pairs = non_adjacent_pairs(&joints, &capsules);
        Ok(KinematicModel {
            name,
            joints,
            fingers,
            capsules,
            keypoint_frames,
            correspondence,
            collision_margin,
            collision_pairs,
            palm_frames,
        })
    }

    pub fn num_links(&self) -> usize {
        self.joints.len() + 1
    }

    /// Capsule index pairs considered by the self-collision check.
    pub fn collision_pairs(&self) -> &[(usize, usize)] {
        &self.collision_pairs
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.collision_margin = margin;
        self
    }

    pub fn joint_names(&self) -> Vec<String> {
        self.joints.iter().map(|j| j.name.clone()).collect()
    }

    /// Looks up a joint by name, accepting `THUMB CMC FE` as well as `THUMB_CMC_FE`.
    pub fn joint_index(&self, name: &str) -> Option<usize> {
        let key = normalize_label(name);
        self.joints.iter().position(|j| j.name == key)
    }

    pub fn keypoint_index(&self, name: &str) -> Option<usize> {
        self.keypoint_frames.iter().position(|f| f.name == name)
    }

    pub fn limits_lo(&self) -> [f64; NUM_DOF] {
        std::array::from_fn(|j| self.joints[j].limit_lo)
    }

    pub fn limits_hi(&self) -> [f64; NUM_DOF] {
        std::array::from_fn(|j| self.joints[j].limit_hi)
    }

    /// Identity configuration: every joint at 0.
    pub fn rest_pose(&self) -> HandPose {
        HandPose::zeros()
    }

    /// Every joint at the middle of its range.
    pub fn mid_pose(&self) -> HandPose {
        HandPose(std::array::from_fn(|j| {
            0.5 * (self.joints[j].limit_lo + self.joints[j].limit_hi)
        }))
    }

    pub fn within_limits(&self, pose: &HandPose) -> bool {
        self.joints
            .iter()
            .zip(pose.0.iter())
            .all(|(j, &q)| q >= j.limit_lo && q <= j.limit_hi)
    }

    pub fn clamp_limits(&self, pose: &HandPose) -> HandPose {
        let mut out = *pose;
        for (q, j) in out.0.iter_mut().zip(self.joints.iter()) {
            *q = q.clamp(j.limit_lo, j.limit_hi);
        }
        out
    }

    /// World (hand-base) transform of every link for `pose`.
    pub fn link_transforms(&self, pose: &HandPose) -> Vec<Isometry3<f64>> {
        let mut links = Vec::with_capacity(self.num_links());
        links.push(Isometry3::identity());
        for (j, spec) in self.joints.iter().enumerate() {
            let rot = UnitQuaternion::from_axis_angle(&Unit::new_unchecked(spec.axis), pose[j]);
            let local = Isometry3::from_parts(Translation3::from(spec.origin_offset), rot);
            let parent = links[spec.parent_link];
            links.push(parent * local);
        }
        links
    }

    /// All 35 keypoints for `pose`.
    pub fn fk_keypoints(&self, pose: &HandPose) -> Result<KeypointSet> {
        if !pose.is_finite() {
            return Err(Error::validation("pose contains non-finite angles"));
        }
        let links = self.link_transforms(pose);
        let points = self
            .keypoint_frames
            .iter()
            .map(|f| (links[f.link] * nalgebra::Point3::from(f.offset)).coords)
            .collect();
        Ok(KeypointSet {
            points,
            labels: self.keypoint_frames.iter().map(|f| f.name.clone()).collect(),
        })
    }

    /// Positions of `refs` for already-computed link transforms.
    pub fn points_from_links(&self, links: &[Isometry3<f64>], refs: &[KeypointRef]) -> Vec<Vector3<f64>> {
        refs.iter()
            .map(|r| match *r {
                KeypointRef::Frame(i) => self.frame_point(links, i),
                KeypointRef::PalmCenter => self.palm_center(links),
            })
            .collect()
    }

    fn frame_point(&self, links: &[Isometry3<f64>], i: usize) -> Vector3<f64> {
        let f = &self.keypoint_frames[i];
        (links[f.link] * nalgebra::Point3::from(f.offset)).coords
    }

    fn palm_center(&self, links: &[Isometry3<f64>]) -> Vector3<f64> {
        let sum = self
            .palm_frames
            .iter()
            .fold(Vector3::zeros(), |acc, &i| acc + self.frame_point(links, i));
        sum / 4.0
    }

    pub fn correspondence_labels(&self) -> Vec<String> {
        self.correspondence
            .iter()
            .map(|r| match *r {
                KeypointRef::Frame(i) => self.keypoint_frames[i].name.clone(),
                KeypointRef::PalmCenter => PALM_CENTER.to_string(),
            })
            .collect()
    }

    /// Robot keypoints restricted to the correspondence set.
    pub fn correspondence_keypoints(&self, pose: &HandPose) -> Result<KeypointSet> {
        if !pose.is_finite() {
            return Err(Error::validation("pose contains non-finite angles"));
        }
        let links = self.link_transforms(pose);
        Ok(KeypointSet {
            points: self.points_from_links(&links, &self.correspondence),
            labels: self.correspondence_labels(),
        })
    }

    /// Picks the correspondence points out of a labelled set, by label.
    /// `PALM_CENTER` is computed from the finger CMC labels when absent.
    pub fn select_correspondence(&self, set: &KeypointSet) -> Result<KeypointSet> {
        let mut points = Vec::with_capacity(self.correspondence.len());
        for label in self.correspondence_labels() {
            let p = match set.get(&label) {
                Some(p) => *p,
                None if label == PALM_CENTER => {
                    let mut sum = Vector3::zeros();
                    for &i in &self.palm_frames {
                        let name = &self.keypoint_frames[i].name;
                        sum += set.get(name).ok_or_else(|| {
                            Error::validation(format!("cannot form palm centre: missing {name}"))
                        })?;
                    }
                    sum / 4.0
                }
                None => {
                    return Err(Error::validation(format!("keypoint {label} missing")));
                }
            };
            points.push(p);
        }
        KeypointSet::new(points, self.correspondence_labels())
    }

    /// Distance between the palm-width reference frames (index and pinky CMC).
    pub fn palm_width(&self) -> f64 {
        let links = self.link_transforms(&self.rest_pose());
        (self.frame_point(&links, self.palm_frames[0]) - self.frame_point(&links, self.palm_frames[3]))
            .norm()
    }

    /// Capsule `i` in the hand-base frame: `(a, b, radius)`.
    pub fn capsule_world(&self, links: &[Isometry3<f64>], i: usize) -> (Vector3<f64>, Vector3<f64>, f64) {
        let c = &self.capsules[i];
        let t = &links[c.link];
        (
            (t * nalgebra::Point3::from(c.a)).coords,
            (t * nalgebra::Point3::from(c.b)).coords,
            c.radius,
        )
    }

    /// Clearance of every pair in [`Self::collision_pairs`], same order.
    pub fn pair_clearances(&self, pose: &HandPose) -> Vec<f64> {
        self.pair_clearances_from_links(&self.link_transforms(pose))
    }

    pub fn pair_clearances_from_links(&self, links: &[Isometry3<f64>]) -> Vec<f64> {
        let world: Vec<_> = (0..self.capsules.len())
            .map(|i| self.capsule_world(links, i))
            .collect();
        self.collision_pairs
            .iter()
            .map(|&(i, j)| {
                let (a1, b1, r1) = world[i];
                let (a2, b2, r2) = world[j];
                segment_distance(&a1, &b1, &a2, &b2) - r1 - r2
            })
            .collect()
    }

    /// Minimum clearance over all non-adjacent capsule pairs.
    pub fn collision_check(&self, pose: &HandPose) -> CollisionCheck {
        let links = self.link_transforms(pose);
        let world: Vec<_> = (0..self.capsules.len())
            .map(|i| self.capsule_world(&links, i))
            .collect();
        let mut best = f64::INFINITY;
        let mut pair = None;
        for &(i, j) in &self.collision_pairs {
            let (a1, b1, r1) = world[i];
            let (a2, b2, r2) = world[j];
            let clearance = segment_distance(&a1, &b1, &a2, &b2) - r1 - r2;
            if clearance < best {
                best = clearance;
                pair = Some((i, j));
            }
        }
        CollisionCheck {
            free: best >= self.collision_margin,
            min_clearance: best,
            closest_pair: pair,
        }
    }

    /// `(collision free, min clearance)`.
    pub fn collision_free(&self, pose: &HandPose) -> (bool, f64) {
        let c = self.collision_check(pose);
        (c.free, c.min_clearance)
    }

    /// In limits and clear of self-collision.
    pub fn is_safe(&self, pose: &HandPose) -> bool {
        self.within_limits(pose) && self.collision_check(pose).free
    }
}

impl fmt::Display for KinematicModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({} joints, {} capsules, {} keypoints)",
            self.name,
            self.joints.len(),
            self.capsules.len(),
            self.keypoint_frames.len()
        )
    }
}

fn resolve_ref(frames: &[KeypointFrame], name: &str) -> Result<KeypointRef> {
    if name == PALM_CENTER {
        return Ok(KeypointRef::PalmCenter);
    }
    frames
        .iter()
        .position(|f| f.name == name)
        .map(KeypointRef::Frame)
        .ok_or_else(|| Error::validation(format!("correspondence keypoint {name} not defined")))
}

/// Two capsule-bearing links are adjacent when one is the nearest
/// capsule-bearing ancestor of the other; those pairs always touch at the
/// joint and are skipped. Capsules on the same link are skipped too.
fn non_adjacent_pairs(joints: &[JointSpec], capsules: &[Capsule]) -> Vec<(usize, usize)> {
    let num_links = joints.len() + 1;
    let mut has_capsule = vec![false; num_links];
    for c in capsules {
        has_capsule[c.link] = true;
    }
    let parent_of = |link: usize| -> Option<usize> {
        if link == 0 {
            None
        } else {
            Some(joints[link - 1].parent_link)
        }
    };
    let capsule_ancestor: Vec<Option<usize>> = (0..num_links)
        .map(|link| {
            let mut cur = parent_of(link);
            while let Some(l) = cur {
                if has_capsule[l] {
                    return Some(l);
                }
                cur = parent_of(l);
            }
            None
        })
        .collect();

    let mut pairs = Vec::new();
    for i in 0..capsules.len() {
        for j in (i + 1)..capsules.len() {
            let (li, lj) = (capsules[i].link, capsules[j].link);
            if li == lj || capsule_ancestor[li] == Some(lj) || capsule_ancestor[lj] == Some(li) {
                continue;
            }
            pairs.push((i, j));
        }
    }
    pairs
}

/// Closest distance between segments `p1–q1` and `p2–q2`.
pub fn segment_distance(
    p1: &Vector3<f64>,
    q1: &Vector3<f64>,
    p2: &Vector3<f64>,
    q2: &Vector3<f64>,
) -> f64 {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    const EPS: f64 = 1e-24;

    let (s, t) = if a <= EPS && e <= EPS {
        (0.0, 0.0)
    } else if a <= EPS {
        (0.0, (f / e).clamp(0.0, 1.0))
    } else {
        let c = d1.dot(&r);
        if e <= EPS {
            ((-c / a).clamp(0.0, 1.0), 0.0)
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            // parallel segments: any s works, start from 0
            let mut s = if denom > 1e-12 * a * e {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t = (b * s + f) / e;
            if t < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            }
            (s, t)
        }
    };
    ((p1 + d1 * s) - (p2 + d2 * t)).norm()
}
