//! Skeleton topology, 6D rotations, forward kinematics and body-part grouping.
//!
//! Everything here works on plain `f64` data. The differentiable counterparts
//! used inside the networks live in [`crate::kinematics`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used to accept a matrix as a rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// The five coarse body regions used to compare motions across skeletons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyPart {
    Torso,
    LeftArm,
    RightArm,
    LeftLeg,
    RightLeg,
}

impl BodyPart {
    pub const ALL: [BodyPart; 5] = [
        BodyPart::Torso,
        BodyPart::LeftArm,
        BodyPart::RightArm,
        BodyPart::LeftLeg,
        BodyPart::RightLeg,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            BodyPart::Torso => "torso",
            BodyPart::LeftArm => "left_arm",
            BodyPart::RightArm => "right_arm",
            BodyPart::LeftLeg => "left_leg",
            BodyPart::RightLeg => "right_leg",
        }
    }
}

impl fmt::Display for BodyPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A joint hierarchy in depth-first (BVH document) order.
///
/// Joint 0 is the root. Every other joint's parent precedes it and is an
/// ancestor-or-self of the previous joint, which is exactly the pre-order
/// produced by walking a BVH hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    joints: Vec<String>,
    parents: Vec<Option<usize>>,
    offsets: Vec<[f64; 3]>,
    #[serde(default)]
    part_map: Option<Vec<BodyPart>>,
    /// `End Site` leaves: owning joint and offset. Not joints.
    #[serde(default)]
    end_sites: Vec<(usize, [f64; 3])>,
}

impl Skeleton {
    pub fn new(joints: Vec<String>, parents: Vec<Option<usize>>, offsets: Vec<[f64; 3]>) -> Result<Self> {
        let n = joints.len();
        if n < 2 {
            return Err(Error::InvalidSkeleton(format!("need at least 2 joints, got {n}")));
        }
        if parents.len() != n || offsets.len() != n {
            return Err(Error::InvalidSkeleton(format!(
                "{} names, {} parents, {} offsets",
                n,
                parents.len(),
                offsets.len()
            )));
        }
        if parents[0].is_some() {
            return Err(Error::InvalidSkeleton("joint 0 must be the root".into()));
        }
        for i in 1..n {
            let Some(p) = parents[i] else {
                return Err(Error::InvalidSkeleton(format!("joint {i} ({}) is a second root", joints[i])));
            };
            if p >= i {
                return Err(Error::InvalidSkeleton(format!("joint {i} has parent {p} that does not precede it")));
            }
            // pre-order: the parent is the previous joint or one of its ancestors
            let mut cursor = Some(i - 1);
            let mut found = false;
            while let Some(c) = cursor {
                if c == p {
                    found = true;
                    break;
                }
                cursor = parents[c];
            }
            if !found {
                return Err(Error::InvalidSkeleton(format!("joint {i} breaks depth-first order")));
            }
        }
        for (i, name) in joints.iter().enumerate() {
            if joints[..i].contains(name) {
                return Err(Error::InvalidSkeleton(format!("duplicate joint name `{name}`")));
            }
        }
        Ok(Self { joints, parents, offsets, part_map: None, end_sites: Vec::new() })
    }

    pub fn with_part_map(mut self, parts: Vec<BodyPart>) -> Result<Self> {
        if parts.len() != self.num_joints() {
            return Err(Error::Topology(format!(
                "part map has {} entries for {} joints",
                parts.len(),
                self.num_joints()
            )));
        }
        self.part_map = Some(parts);
        Ok(self)
    }

    /// Attach a part map given as joint name -> label, the sidecar format.
    pub fn with_named_part_map(self, map: &BTreeMap<String, BodyPart>) -> Result<Self> {
        for name in map.keys() {
            if !self.joints.contains(name) {
                return Err(Error::Topology(format!("part map names unknown joint `{name}`")));
            }
        }
        let parts = self
            .joints
            .iter()
            .map(|j| {
                map.get(j)
                    .copied()
                    .ok_or_else(|| Error::Topology(format!("joint `{j}` missing from part map")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.with_part_map(parts)
    }

    pub fn with_part_map_json(self, json: &str) -> Result<Self> {
        let map: BTreeMap<String, BodyPart> = serde_json::from_str(json)?;
        self.with_named_part_map(&map)
    }

    pub fn load_part_map(self, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.with_part_map_json(&text)
    }

    pub fn part_map_json(&self) -> Option<String> {
        let parts = self.part_map.as_ref()?;
        let map: BTreeMap<&str, BodyPart> =
            self.joints.iter().map(String::as_str).zip(parts.iter().copied()).collect();
        serde_json::to_string_pretty(&map).ok()
    }

    pub fn with_end_sites(mut self, end_sites: Vec<(usize, [f64; 3])>) -> Result<Self> {
        if let Some((j, _)) = end_sites.iter().find(|(j, _)| *j >= self.num_joints()) {
            return Err(Error::InvalidSkeleton(format!("end site attached to missing joint {j}")));
        }
        self.end_sites = end_sites;
        Ok(self)
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joints
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn offsets(&self) -> &[[f64; 3]] {
        &self.offsets
    }

    pub fn part_map(&self) -> Option<&[BodyPart]> {
        self.part_map.as_deref()
    }

    pub fn end_sites(&self) -> &[(usize, [f64; 3])] {
        &self.end_sites
    }

    pub fn children(&self, joint: usize) -> impl Iterator<Item = usize> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter(move |(_, p)| **p == Some(joint))
            .map(|(i, _)| i)
    }

    /// Same hierarchy and offsets, ignoring part maps and end sites.
    pub fn same_structure(&self, other: &Skeleton) -> bool {
        self.joints == other.joints && self.parents == other.parents && self.offsets == other.offsets
    }

    /// Same joint names and hierarchy; offsets may differ (e.g. another body shape).
    pub fn same_topology(&self, other: &Skeleton) -> bool {
        self.joints == other.joints && self.parents == other.parents
    }

    /// The 24-joint SMPL body in depth-first order, with its part map.
    ///
    /// Offsets are the approximate neutral-shape rest offsets in meters, y up.
    pub fn smpl() -> Self {
        use BodyPart::*;
        #[rustfmt::skip]
        let table: [(&str, Option<usize>, [f64; 3], BodyPart); 24] = [
            ("pelvis",         None,     [0.0, 0.0, 0.0],         Torso),
            ("left_hip",       Some(0),  [0.058, -0.082, -0.018], LeftLeg),
            ("left_knee",      Some(1),  [0.043, -0.386, 0.008],  LeftLeg),
            ("left_ankle",     Some(2),  [-0.015, -0.427, -0.037], LeftLeg),
            ("left_foot",      Some(3),  [0.041, -0.060, 0.122],  LeftLeg),
            ("right_hip",      Some(0),  [-0.060, -0.091, -0.014], RightLeg),
            ("right_knee",     Some(5),  [-0.043, -0.383, -0.005], RightLeg),
            ("right_ankle",    Some(6),  [0.019, -0.420, -0.035], RightLeg),
            ("right_foot",     Some(7),  [-0.035, -0.062, 0.130], RightLeg),
            ("spine1",         Some(0),  [0.004, 0.124, -0.038],  Torso),
            ("spine2",         Some(9),  [0.004, 0.138, 0.027],   Torso),
            ("spine3",         Some(10), [0.0, 0.056, 0.003],     Torso),
            ("neck",           Some(11), [-0.013, 0.212, -0.034], Torso),
            ("head",           Some(12), [0.010, 0.089, 0.050],   Torso),
            ("left_collar",    Some(11), [0.072, 0.114, -0.019],  LeftArm),
            ("left_shoulder",  Some(14), [0.123, 0.045, -0.019],  LeftArm),
            ("left_elbow",     Some(15), [0.255, -0.016, -0.023], LeftArm),
            ("left_wrist",     Some(16), [0.266, 0.009, -0.006],  LeftArm),
            ("left_hand",      Some(17), [0.087, -0.011, -0.016], LeftArm),
            ("right_collar",   Some(11), [-0.083, 0.112, -0.024], RightArm),
            ("right_shoulder", Some(19), [-0.113, 0.047, -0.008], RightArm),
            ("right_elbow",    Some(20), [-0.260, -0.014, -0.031], RightArm),
            ("right_wrist",    Some(21), [-0.269, -0.007, -0.006], RightArm),
            ("right_hand",     Some(22), [-0.089, -0.009, -0.010], RightArm),
        ];
        let names = table.iter().map(|r| r.0.to_string()).collect();
        let parents = table.iter().map(|r| r.1).collect();
        let offsets = table.iter().map(|r| r.2).collect();
        let parts = table.iter().map(|r| r.3).collect();
        Skeleton::new(names, parents, offsets)
            .and_then(|s| s.with_part_map(parts))
            .expect("built-in SMPL table is valid")
    }

    /// Row-normalized 5×N averaging matrix: row g holds 1/|g| on joints of part g.
    pub fn part_average_matrix(&self) -> Result<Vec<[f64; 5]>> {
        let parts = self.part_map.as_ref().ok_or(Error::MissingPartMap(self.num_joints()))?;
        let mut counts = [0usize; 5];
        for p in parts {
            counts[p.index()] += 1;
        }
        if let Some(g) = BodyPart::ALL.iter().find(|g| counts[g.index()] == 0) {
            return Err(Error::EmptyPart(format!("no joints assigned to {g}")));
        }
        Ok(parts
            .iter()
            .map(|p| {
                let mut w = [0.0; 5];
                w[p.index()] = 1.0 / counts[p.index()] as f64;
                w
            })
            .collect())
    }

    pub fn normalized_adjacency(&self, add_self_loops: bool) -> Result<DMatrix<f64>> {
        build_normalized_adjacency(&self.parents, add_self_loops)
    }
}

/// The first two columns of a rotation matrix, column-major: `(R00, R10, R20, R01, R11, R21)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation6D(pub [f64; 6]);

impl Rotation6D {
    pub const IDENTITY: Rotation6D = Rotation6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn to_matrix(&self) -> Result<Matrix3<f64>> {
        rot6d_to_matrix(self)
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        matrix_to_rot6d(m)
    }

    fn columns(&self) -> (Vector3<f64>, Vector3<f64>) {
        let r = &self.0;
        (Vector3::new(r[0], r[1], r[2]), Vector3::new(r[3], r[4], r[5]))
    }
}

/// Gram-Schmidt on the two stored columns; the third column is their cross product.
pub fn rot6d_to_matrix(r: &Rotation6D) -> Result<Matrix3<f64>> {
    let (a1, a2) = r.columns();
    let (n1, n2) = (a1.norm(), a2.norm());
    if !(n1.is_finite() && n2.is_finite()) || n1 < 1e-12 || n2 < 1e-12 {
        return Err(Error::InvalidRotation(format!("zero or non-finite column in {:?}", r.0)));
    }
    if a1.cross(&a2).norm() <= 1e-9 * n1 * n2 {
        return Err(Error::InvalidRotation(format!("parallel columns in {:?}", r.0)));
    }
    let b1 = a1 / n1;
    let b2 = (a2 - b1 * b1.dot(&a2)).normalize();
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

pub fn is_rotation(m: &Matrix3<f64>, tol: f64) -> bool {
    let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
    ortho <= tol && (m.determinant() - 1.0).abs() <= tol
}

pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> Result<Rotation6D> {
    if !is_rotation(m, ROTATION_TOLERANCE) {
        return Err(Error::InvalidRotation(format!("not a proper rotation matrix: {m}")));
    }
    Ok(Rotation6D([m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]))
}

/// `D^{-1/2} A D^{-1/2}` for the undirected tree given by `parents`.
pub fn build_normalized_adjacency(parents: &[Option<usize>], add_self_loops: bool) -> Result<DMatrix<f64>> {
    let n = parents.len();
    let mut a = DMatrix::<f64>::zeros(n, n);
    for (i, p) in parents.iter().enumerate() {
        if let Some(p) = *p {
            if p >= n {
                return Err(Error::InvalidSkeleton(format!("parent {p} of joint {i} out of range")));
            }
            a[(i, p)] = 1.0;
            a[(p, i)] = 1.0;
        }
    }
    if add_self_loops {
        for i in 0..n {
            a[(i, i)] = 1.0;
        }
    }
    let mut inv_sqrt = vec![0.0; n];
    for i in 0..n {
        let degree: f64 = a.row(i).sum();
        if degree == 0.0 {
            return Err(Error::DegenerateDegree { joint: i });
        }
        inv_sqrt[i] = 1.0 / degree.sqrt();
    }
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    Ok(a)
}

/// Per-frame joint rotations (6D) plus the root translation track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionClip {
    num_joints: usize,
    /// Frame-major: entry `t * num_joints + j`.
    rotations: Vec<Rotation6D>,
    translation: Vec<[f64; 3]>,
    fps: f64,
}

impl MotionClip {
    pub fn new(num_joints: usize, rotations: Vec<Rotation6D>, translation: Vec<[f64; 3]>, fps: f64) -> Result<Self> {
        let frames = translation.len();
        if frames == 0 {
            return Err(Error::Shape("a clip needs at least one frame".into()));
        }
        if num_joints == 0 || rotations.len() != frames * num_joints {
            return Err(Error::Shape(format!(
                "{} rotations for {} frames of {} joints",
                rotations.len(),
                frames,
                num_joints
            )));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Shape(format!("fps must be positive, got {fps}")));
        }
        Ok(Self { num_joints, rotations, translation, fps })
    }

    /// All joints at identity, root at the origin.
    pub fn rest(num_joints: usize, frames: usize, fps: f64) -> Result<Self> {
        Self::new(num_joints, vec![Rotation6D::IDENTITY; num_joints * frames], vec![[0.0; 3]; frames], fps)
    }

    /// Build from flat `T×N×6` rotation and `T×3` translation buffers.
    pub fn from_flat(num_joints: usize, rotations: &[f64], translation: &[f64], fps: f64) -> Result<Self> {
        if rotations.len() % 6 != 0 || translation.len() % 3 != 0 {
            return Err(Error::Shape("flat buffers must hold whole 6D / 3D entries".into()));
        }
        let rots = rotations.chunks_exact(6).map(|c| Rotation6D(c.try_into().unwrap())).collect();
        let trans = translation.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self::new(num_joints, rots, trans, fps)
    }

    pub fn frames(&self) -> usize {
        self.translation.len()
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn rotation(&self, frame: usize, joint: usize) -> &Rotation6D {
        &self.rotations[frame * self.num_joints + joint]
    }

    pub fn rotation_mut(&mut self, frame: usize, joint: usize) -> &mut Rotation6D {
        &mut self.rotations[frame * self.num_joints + joint]
    }

    pub fn rotations(&self) -> &[Rotation6D] {
        &self.rotations
    }

    pub fn translation(&self) -> &[[f64; 3]] {
        &self.translation
    }

    pub fn translation_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.translation
    }

    pub fn rotations_flat(&self) -> Vec<f64> {
        self.rotations.iter().flat_map(|r| r.0).collect()
    }

    pub fn translation_flat(&self) -> Vec<f64> {
        self.translation.iter().flat_map(|t| *t).collect()
    }

    pub fn check_skeleton(&self, s: &Skeleton) -> Result<()> {
        if self.num_joints != s.num_joints() {
            return Err(Error::Shape(format!(
                "clip has {} joints, skeleton has {}",
                self.num_joints,
                s.num_joints()
            )));
        }
        Ok(())
    }

    /// Frames in reverse order.
    pub fn reversed(&self) -> Self {
        let n = self.num_joints;
        let rotations = self.rotations.chunks(n).rev().flatten().copied().collect();
        let translation = self.translation.iter().rev().copied().collect();
        Self { num_joints: n, rotations, translation, fps: self.fps }
    }

    /// Copy of frames `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames() {
            return Err(Error::Index(format!("frames {start}..{} of {}", start + len, self.frames())));
        }
        let n = self.num_joints;
        Self::new(
            n,
            self.rotations[start * n..(start + len) * n].to_vec(),
            self.translation[start..start + len].to_vec(),
            self.fps,
        )
    }
}

/// A `T×N×3` track of per-joint vectors (positions or velocities).
#[derive(Debug, Clone, PartialEq)]
pub struct JointTrack {
    pub frames: usize,
    pub joints: usize,
    pub data: Vec<[f64; 3]>,
}

impl JointTrack {
    pub fn get(&self, frame: usize, joint: usize) -> [f64; 3] {
        self.data[frame * self.joints + joint]
    }
}

pub fn forward_kinematics(s: &Skeleton, clip: &MotionClip) -> Result<JointTrack> {
    clip.check_skeleton(s)?;
    let n = s.num_joints();
    let mut data = Vec::with_capacity(clip.frames() * n);
    let mut global = vec![Matrix3::<f64>::identity(); n];
    let mut pos = vec![Vector3::<f64>::zeros(); n];
    for t in 0..clip.frames() {
        for j in 0..n {
            let local = clip.rotation(t, j).to_matrix()?;
            match s.parents[j] {
                None => {
                    let tr = clip.translation[t];
                    pos[j] = Vector3::new(tr[0], tr[1], tr[2]);
                    global[j] = local;
                }
                Some(p) => {
                    let o = s.offsets[j];
                    pos[j] = pos[p] + global[p] * Vector3::new(o[0], o[1], o[2]);
                    global[j] = global[p] * local;
                }
            }
        }
        data.extend(pos.iter().map(|p| [p.x, p.y, p.z]));
    }
    Ok(JointTrack { frames: clip.frames(), joints: n, data })
}

/// Forward differences scaled by `fps`; the last frame repeats the previous
/// velocity. A single frame yields zeros.
pub fn joint_velocities(positions: &JointTrack, fps: f64) -> JointTrack {
    let (t_len, n) = (positions.frames, positions.joints);
    let mut data = vec![[0.0; 3]; t_len * n];
    if t_len >= 2 {
        for t in 0..t_len - 1 {
            for j in 0..n {
                let (a, b) = (positions.get(t, j), positions.get(t + 1, j));
                data[t * n + j] = [(b[0] - a[0]) * fps, (b[1] - a[1]) * fps, (b[2] - a[2]) * fps];
            }
        }
        for j in 0..n {
            data[(t_len - 1) * n + j] = data[(t_len - 2) * n + j];
        }
    }
    JointTrack { frames: t_len, joints: n, data }
}

/// Mean 6D feature of each body part, per frame: `T×5×6`.
pub fn group_by_parts(clip: &MotionClip, s: &Skeleton) -> Result<Vec<[[f64; 6]; 5]>> {
    clip.check_skeleton(s)?;
    let weights = s.part_average_matrix()?;
    let parts = s.part_map().expect("checked by part_average_matrix");
    Ok((0..clip.frames())
        .map(|t| {
            let mut out = [[0.0; 6]; 5];
            for (j, part) in parts.iter().enumerate() {
                let w = weights[j][part.index()];
                for (o, v) in out[part.index()].iter_mut().zip(clip.rotation(t, j).0) {
                    *o += w * v;
                }
            }
            out
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    fn chain(n: usize) -> Skeleton {
        Skeleton::new(
            (0..n).map(|i| format!("j{i}")).collect(),
            (0..n).map(|i| i.checked_sub(1)).collect(),
            vec![[1.0, 0.0, 0.0]; n],
        )
        .unwrap()
    }

    fn rz(angle: f64) -> Matrix3<f64> {
        nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), angle).into_inner()
    }

    #[test]
    fn identity_6d() {
        assert_abs_diff_eq!(Rotation6D::IDENTITY.to_matrix().unwrap(), Matrix3::identity(), epsilon = 1e-12);
        assert_eq!(matrix_to_rot6d(&Matrix3::identity()).unwrap(), Rotation6D::IDENTITY);
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = Rotation6D([0.0, 1.0, 0.0, -1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(r.to_matrix().unwrap(), rz(FRAC_PI_2), epsilon = 1e-12);
        let back = matrix_to_rot6d(&rz(FRAC_PI_2)).unwrap();
        for (a, b) in back.0.iter().zip(r.0) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn gram_schmidt_removes_scale_and_shear() {
        let r = Rotation6D([2.0, 0.0, 0.0, 0.5, 1.0, 0.0]);
        assert_abs_diff_eq!(r.to_matrix().unwrap(), Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn degenerate_6d_is_rejected() {
        for bad in [[0.0; 6], [1.0, 0.0, 0.0, 2.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0, 1.0, 0.0]] {
            assert!(matches!(Rotation6D(bad).to_matrix(), Err(Error::InvalidRotation(_))));
        }
        let scaled = Matrix3::identity() * 2.0;
        assert!(matches!(matrix_to_rot6d(&scaled), Err(Error::InvalidRotation(_))));
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(matrix_to_rot6d(&reflection).is_err());
    }

    #[test]
    fn adjacency_small_cases() {
        let lone = build_normalized_adjacency(&[None], true).unwrap();
        assert_eq!(lone[(0, 0)], 1.0);
        assert!(matches!(build_normalized_adjacency(&[None], false), Err(Error::DegenerateDegree { joint: 0 })));

        let pair = chain(2).normalized_adjacency(true).unwrap();
        for v in pair.iter() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn adjacency_three_chain_matches_brute_force() {
        let got = chain(3).normalized_adjacency(true).unwrap();
        let a = DMatrix::from_row_slice(3, 3, &[1., 1., 0., 1., 1., 1., 0., 1., 1.]);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            1.0 / 2f64.sqrt(),
            1.0 / 3f64.sqrt(),
            1.0 / 2f64.sqrt(),
        ]));
        let want = &d * a * &d;
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn rest_pose_positions_sum_offsets() {
        let s = chain(4);
        let clip = MotionClip::rest(4, 2, 30.0).unwrap();
        let p = forward_kinematics(&s, &clip).unwrap();
        for t in 0..2 {
            for j in 0..4 {
                assert_abs_diff_eq!(p.get(t, j)[0], j as f64, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn fk_rotated_root() {
        let s = chain(2);
        let mut clip = MotionClip::rest(2, 1, 30.0).unwrap();
        *clip.rotation_mut(0, 0) = matrix_to_rot6d(&rz(FRAC_PI_2)).unwrap();
        let p = forward_kinematics(&s, &clip).unwrap();
        let c = p.get(0, 1);
        assert_abs_diff_eq!(c[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn fk_shape_error() {
        let clip = MotionClip::rest(3, 1, 30.0).unwrap();
        assert!(matches!(forward_kinematics(&chain(2), &clip), Err(Error::Shape(_))));
    }

    #[test]
    fn velocities() {
        let track = |f: &dyn Fn(usize) -> [f64; 3], t: usize| JointTrack {
            frames: t,
            joints: 1,
            data: (0..t).map(f).collect(),
        };
        let still = joint_velocities(&track(&|_| [1.0, 2.0, 3.0], 5), 30.0);
        assert!(still.data.iter().all(|v| *v == [0.0; 3]));

        let linear = joint_velocities(&track(&|t| [t as f64, 0.0, 0.0], 6), 1.0);
        assert!(linear.data.iter().all(|v| *v == [1.0, 0.0, 0.0]));

        let single = joint_velocities(&track(&|_| [4.0, 4.0, 4.0], 1), 30.0);
        assert_eq!(single.data, vec![[0.0; 3]]);

        let fps = 24.0;
        let sine = track(&|t| [(t as f64 * 0.3).sin(), 0.0, (t as f64).cos()], 9);
        let v = joint_velocities(&sine, fps);
        for t in 0..8 {
            let want = (sine.data[t + 1][0] - sine.data[t][0]) * fps;
            assert_eq!(v.data[t][0], want);
        }
        assert_eq!(v.data[8], v.data[7]);
    }

    #[test]
    fn grouping_constant_and_singletons() {
        use BodyPart::*;
        let s = Skeleton::new(
            (0..5).map(|i| format!("j{i}")).collect(),
            vec![None, Some(0), Some(0), Some(0), Some(0)],
            vec![[0.0; 3]; 5],
        )
        .unwrap()
        .with_part_map(vec![RightLeg, Torso, LeftLeg, RightArm, LeftArm])
        .unwrap();
        let feats: Vec<Rotation6D> = (0..10).map(|k| Rotation6D([k as f64; 6])).collect();
        let clip = MotionClip::new(5, feats, vec![[0.0; 3]; 2], 30.0).unwrap();
        let g = group_by_parts(&clip, &s).unwrap();
        for t in 0..2 {
            for (j, p) in s.part_map().unwrap().iter().enumerate() {
                assert_eq!(g[t][p.index()], clip.rotation(t, j).0);
            }
        }

        let smpl = Skeleton::smpl();
        let c = Rotation6D([0.3, -0.1, 0.2, 0.9, 0.0, 0.4]);
        let constant = MotionClip::new(24, vec![c; 48], vec![[0.0; 3]; 2], 30.0).unwrap();
        for frame in group_by_parts(&constant, &smpl).unwrap() {
            for part in frame {
                for (a, b) in part.iter().zip(c.0) {
                    assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
                }
            }
        }
    }

    #[test]
    fn grouping_errors() {
        let clip = MotionClip::rest(3, 1, 30.0).unwrap();
        assert!(matches!(group_by_parts(&clip, &chain(3)), Err(Error::MissingPartMap(3))));
        let s = chain(3).with_part_map(vec![BodyPart::Torso; 3]).unwrap();
        assert!(matches!(group_by_parts(&clip, &s), Err(Error::EmptyPart(_))));
    }

    #[test]
    fn skeleton_validation() {
        let names = |n: usize| (0..n).map(|i| format!("j{i}")).collect::<Vec<_>>();
        assert!(Skeleton::new(names(1), vec![None], vec![[0.0; 3]]).is_err());
        assert!(Skeleton::new(names(2), vec![None, None], vec![[0.0; 3]; 2]).is_err());
        // 0 -> 1 -> 2, then 3 child of 1 is fine; 4 child of 2 is not pre-order
        let ok = vec![None, Some(0), Some(1), Some(1)];
        assert!(Skeleton::new(names(4), ok, vec![[0.0; 3]; 4]).is_ok());
        let bad = vec![None, Some(0), Some(1), Some(0), Some(2)];
        assert!(Skeleton::new(names(5), bad, vec![[0.0; 3]; 5]).is_err());
    }

    #[test]
    fn part_map_sidecar() {
        let s = chain(2);
        let s = s.with_part_map_json(r#"{"j0": "torso", "j1": "left_arm"}"#).unwrap();
        assert_eq!(s.part_map().unwrap(), &[BodyPart::Torso, BodyPart::LeftArm]);
        assert!(chain(2).with_part_map_json(r#"{"j0": "torso"}"#).is_err());
        assert!(chain(2).with_part_map_json(r#"{"j0": "torso", "j1": "tail"}"#).is_err());
        assert!(chain(2)
            .with_part_map_json(r#"{"j0": "torso", "j1": "torso", "j9": "torso"}"#)
            .is_err());
        let round = chain(2).with_part_map_json(&s.part_map_json().unwrap()).unwrap();
        assert_eq!(round, s);
    }

    #[test]
    fn smpl_is_consistent() {
        let s = Skeleton::smpl();
        assert_eq!(s.num_joints(), 24);
        assert!(s.part_average_matrix().is_ok());
    }
}
