//! BVH reading and writing, plus temporal resampling of clips.
//!
//! Rotation channels are intrinsic Euler angles in degrees, composed in the
//! order they are declared (`Zrotation Xrotation Yrotation` means
//! `Rz · Rx · Ry`). Emission always uses ZXY.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};
use crate::skeleton::{matrix_to_rot6d, MotionClip, Skeleton};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn unit(self) -> Vector3<f64> {
        match self {
            Axis::X => Vector3::x(),
            Axis::Y => Vector3::y(),
            Axis::Z => Vector3::z(),
        }
    }

    fn letter(self) -> char {
        match self {
            Axis::X => 'X',
            Axis::Y => 'Y',
            Axis::Z => 'Z',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Position(Axis),
    Rotation(Axis),
}

impl Channel {
    fn parse(token: &str, line: usize) -> Result<Self> {
        let (axis, kind) = token.split_at(1.min(token.len()));
        let axis = match axis {
            "X" | "x" => Axis::X,
            "Y" | "y" => Axis::Y,
            "Z" | "z" => Axis::Z,
            _ => return Err(Error::UnsupportedChannel { line, channel: token.into() }),
        };
        match kind {
            "position" => Ok(Channel::Position(axis)),
            "rotation" => Ok(Channel::Rotation(axis)),
            _ => Err(Error::UnsupportedChannel { line, channel: token.into() }),
        }
    }

    fn name(self) -> String {
        match self {
            Channel::Position(a) => format!("{}position", a.letter()),
            Channel::Rotation(a) => format!("{}rotation", a.letter()),
        }
    }
}

/// One of the six proper Euler orders, named by declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EulerOrder(pub [Axis; 3]);

impl EulerOrder {
    pub const ZXY: EulerOrder = EulerOrder([Axis::Z, Axis::X, Axis::Y]);

    /// Rotation matrix for angles in degrees, given in declaration order.
    pub fn to_matrix(self, degrees: [f64; 3]) -> Matrix3<f64> {
        self.0.iter().zip(degrees).fold(Matrix3::identity(), |acc, (axis, deg)| {
            acc * Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(axis.unit()), deg.to_radians()).into_inner()
        })
    }
}

/// Decompose `R = Rz(a) · Rx(b) · Ry(c)`; returns `[a, b, c]` in degrees.
pub fn matrix_to_euler_zxy(m: &Matrix3<f64>) -> [f64; 3] {
    let sb = m[(2, 1)].clamp(-1.0, 1.0);
    let b = sb.asin();
    let (a, c) = if sb.abs() < 1.0 - 1e-12 {
        ((-m[(0, 1)]).atan2(m[(1, 1)]), (-m[(2, 0)]).atan2(m[(2, 2)]))
    } else {
        // gimbal lock: fold everything into z
        (m[(1, 0)].atan2(m[(0, 0)]), 0.0)
    };
    [a.to_degrees(), b.to_degrees(), c.to_degrees()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct BvhJoint {
    pub name: String,
    pub parent: Option<usize>,
    pub offset: [f64; 3],
    pub channels: Vec<Channel>,
    pub end_sites: Vec<[f64; 3]>,
}

/// Syntax-level BVH: the hierarchy as declared and the raw channel rows.
#[derive(Debug, Clone, PartialEq)]
pub struct BvhDocument {
    pub joints: Vec<BvhJoint>,
    pub frame_time: f64,
    pub frames: Vec<Vec<f64>>,
}

struct Tokens<'a> {
    items: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        let items = text
            .lines()
            .enumerate()
            .flat_map(|(i, line)| line.split_whitespace().map(move |tok| (i + 1, tok)))
            .collect();
        Self { items, pos: 0 }
    }

    fn line(&self) -> usize {
        self.items
            .get(self.pos)
            .or_else(|| self.items.last())
            .map_or(1, |(l, _)| *l)
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { line: self.line(), msg: msg.into() }
    }

    fn next(&mut self) -> Result<(usize, &'a str)> {
        let tok = self.items.get(self.pos).copied().ok_or_else(|| self.err("unexpected end of input"))?;
        self.pos += 1;
        Ok(tok)
    }

    fn peek(&self) -> Option<&'a str> {
        self.items.get(self.pos).map(|(_, t)| *t)
    }

    fn expect(&mut self, want: &str) -> Result<()> {
        let (line, tok) = self.next()?;
        if tok != want {
            return Err(Error::Parse { line, msg: format!("expected `{want}`, found `{tok}`") });
        }
        Ok(())
    }

    fn number<T: std::str::FromStr>(&mut self) -> Result<T> {
        let (line, tok) = self.next()?;
        tok.parse().map_err(|_| Error::Parse { line, msg: format!("expected a number, found `{tok}`") })
    }

    fn vec3(&mut self) -> Result<[f64; 3]> {
        Ok([self.number()?, self.number()?, self.number()?])
    }
}

impl BvhDocument {
    pub fn parse(text: &str) -> Result<Self> {
        let mut toks = Tokens::new(text);
        toks.expect("HIERARCHY")?;
        toks.expect("ROOT")?;
        let mut joints = Vec::new();
        parse_joint(&mut toks, None, &mut joints)?;
        toks.expect("MOTION")?;
        toks.expect("Frames:")?;
        let count: usize = toks.number()?;
        toks.expect("Frame")?;
        toks.expect("Time:")?;
        let frame_time: f64 = toks.number()?;
        if !(frame_time > 0.0 && frame_time.is_finite()) {
            return Err(toks.err(format!("frame time must be positive, got {frame_time}")));
        }
        let width: usize = joints.iter().map(|j: &BvhJoint| j.channels.len()).sum();
        let mut values = Vec::with_capacity(count * width);
        while toks.peek().is_some() {
            values.push(toks.number::<f64>()?);
        }
        if values.len() < count * width {
            return Err(Error::TruncatedData { expected: count * width, found: values.len() });
        }
        if values.len() > count * width {
            return Err(Error::Parse {
                line: toks.line(),
                msg: format!("{} values after the declared {} frames", values.len() - count * width, count),
            });
        }
        let frames = if width == 0 {
            vec![Vec::new(); count]
        } else {
            values.chunks(width).map(<[f64]>::to_vec).collect()
        };
        Ok(Self { joints, frame_time, frames })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("HIERARCHY\n");
        if !self.joints.is_empty() {
            emit_joint(&mut out, &self.joints, 0, 0);
        }
        let _ = writeln!(out, "MOTION");
        let _ = writeln!(out, "Frames: {}", self.frames.len());
        let _ = writeln!(out, "Frame Time: {}", self.frame_time);
        for row in &self.frames {
            let line: Vec<String> = row.iter().map(|v| fmt_num(*v)).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    /// Convert to a skeleton and a 6D clip.
    pub fn to_motion(&self) -> Result<(Skeleton, MotionClip)> {
        let names = self.joints.iter().map(|j| j.name.clone()).collect();
        let parents = self.joints.iter().map(|j| j.parent).collect();
        let offsets = self.joints.iter().map(|j| j.offset).collect();
        let end_sites = self
            .joints
            .iter()
            .enumerate()
            .flat_map(|(i, j)| j.end_sites.iter().map(move |e| (i, *e)))
            .collect();
        let skeleton = Skeleton::new(names, parents, offsets)?.with_end_sites(end_sites)?;

        let mut layout = Vec::with_capacity(self.joints.len());
        let mut col = 0;
        for joint in &self.joints {
            let mut rot_axes = Vec::new();
            let mut rot_cols = Vec::new();
            let mut pos_cols = [None; 3];
            for ch in &joint.channels {
                match ch {
                    Channel::Rotation(a) => {
                        rot_axes.push(*a);
                        rot_cols.push(col);
                    }
                    Channel::Position(a) => pos_cols[*a as usize] = Some(col),
                }
                col += 1;
            }
            if joint.parent.is_some() && pos_cols.iter().any(Option::is_some) {
                log::warn!("ignoring position channels on non-root joint `{}`", joint.name);
            }
            let order = match rot_axes.as_slice() {
                [] => None,
                [a, b, c] if a != b && b != c && a != c => Some(EulerOrder([*a, *b, *c])),
                _ => {
                    let names: Vec<String> = rot_axes.iter().map(|a| Channel::Rotation(*a).name()).collect();
                    return Err(Error::UnsupportedChannel {
                        line: 0,
                        channel: format!("rotation order `{}` on joint `{}`", names.join(" "), joint.name),
                    });
                }
            };
            layout.push((order, rot_cols, pos_cols));
        }

        let n = self.joints.len();
        let mut rotations = Vec::with_capacity(self.frames.len() * n);
        let mut translation = Vec::with_capacity(self.frames.len());
        for row in &self.frames {
            for (order, rot_cols, _) in &layout {
                let r = match order {
                    None => Matrix3::identity(),
                    Some(o) => o.to_matrix([row[rot_cols[0]], row[rot_cols[1]], row[rot_cols[2]]]),
                };
                rotations.push(matrix_to_rot6d(&r)?);
            }
            let root_pos = &layout[0].2;
            translation.push(std::array::from_fn(|k| root_pos[k].map_or(self.joints[0].offset[k], |c| row[c])));
        }
        let clip = MotionClip::new(n, rotations, translation, 1.0 / self.frame_time)?;
        Ok((skeleton, clip))
    }

    pub fn from_motion(s: &Skeleton, clip: &MotionClip) -> Result<Self> {
        clip.check_skeleton(s)?;
        let rot = [Channel::Rotation(Axis::Z), Channel::Rotation(Axis::X), Channel::Rotation(Axis::Y)];
        let joints = (0..s.num_joints())
            .map(|j| {
                let mut channels = Vec::new();
                if j == 0 {
                    channels.extend([Axis::X, Axis::Y, Axis::Z].map(Channel::Position));
                }
                channels.extend(rot);
                BvhJoint {
                    name: s.joint_names()[j].clone(),
                    parent: s.parents()[j],
                    offset: s.offsets()[j],
                    channels,
                    end_sites: s.end_sites().iter().filter(|(o, _)| *o == j).map(|(_, e)| *e).collect(),
                }
            })
            .collect();
        let mut frames = Vec::with_capacity(clip.frames());
        for t in 0..clip.frames() {
            let mut row = Vec::with_capacity(3 + 3 * s.num_joints());
            row.extend(clip.translation()[t]);
            for j in 0..s.num_joints() {
                row.extend(matrix_to_euler_zxy(&clip.rotation(t, j).to_matrix()?));
            }
            frames.push(row);
        }
        Ok(Self { joints, frame_time: 1.0 / clip.fps(), frames })
    }
}

fn emit_joint(out: &mut String, joints: &[BvhJoint], index: usize, depth: usize) {
    let joint = &joints[index];
    let pad = "\t".repeat(depth);
    let kw = if joint.parent.is_none() { "ROOT" } else { "JOINT" };
    let _ = writeln!(out, "{pad}{kw} {}", joint.name);
    let _ = writeln!(out, "{pad}{{");
    let _ = writeln!(out, "{pad}\tOFFSET {}", fmt_vec(&joint.offset));
    let names: Vec<String> = joint.channels.iter().map(|c| c.name()).collect();
    let _ = writeln!(out, "{pad}\tCHANNELS {} {}", joint.channels.len(), names.join(" "));
    for child in (index + 1..joints.len()).filter(|&c| joints[c].parent == Some(index)) {
        emit_joint(out, joints, child, depth + 1);
    }
    for e in &joint.end_sites {
        let _ = writeln!(out, "{pad}\tEnd Site");
        let _ = writeln!(out, "{pad}\t{{");
        let _ = writeln!(out, "{pad}\t\tOFFSET {}", fmt_vec(e));
        let _ = writeln!(out, "{pad}\t}}");
    }
    let _ = writeln!(out, "{pad}}}");
}

fn fmt_num(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

fn fmt_vec(v: &[f64; 3]) -> String {
    format!("{} {} {}", fmt_num(v[0]), fmt_num(v[1]), fmt_num(v[2]))
}

fn parse_joint(toks: &mut Tokens<'_>, parent: Option<usize>, joints: &mut Vec<BvhJoint>) -> Result<()> {
    let (_, name) = toks.next()?;
    toks.expect("{")?;
    toks.expect("OFFSET")?;
    let offset = toks.vec3()?;
    let mut channels = Vec::new();
    if toks.peek() == Some("CHANNELS") {
        toks.next()?;
        let n: usize = toks.number()?;
        for _ in 0..n {
            let (line, tok) = toks.next()?;
            channels.push(Channel::parse(tok, line)?);
        }
    }
    let index = joints.len();
    joints.push(BvhJoint { name: name.to_string(), parent, offset, channels, end_sites: Vec::new() });
    loop {
        let (line, tok) = toks.next()?;
        match tok {
            "JOINT" => parse_joint(toks, Some(index), joints)?,
            "End" => {
                toks.expect("Site")?;
                toks.expect("{")?;
                toks.expect("OFFSET")?;
                let e = toks.vec3()?;
                toks.expect("}")?;
                joints[index].end_sites.push(e);
            }
            "}" => return Ok(()),
            other => return Err(Error::Parse { line, msg: format!("unexpected `{other}` in joint `{name}`") }),
        }
    }
}

pub fn parse_bvh(text: &str) -> Result<(Skeleton, MotionClip)> {
    BvhDocument::parse(text)?.to_motion()
}

pub fn write_bvh(s: &Skeleton, clip: &MotionClip) -> Result<String> {
    Ok(BvhDocument::from_motion(s, clip)?.to_text())
}

pub fn read_bvh_file(path: impl AsRef<std::path::Path>) -> Result<(Skeleton, MotionClip)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_bvh(&text)
}

/// Linear interpolation of every 6D and translation channel onto `t_out`
/// uniformly spaced source coordinates. End frames are copied exactly.
pub fn resample(clip: &MotionClip, t_out: usize) -> Result<MotionClip> {
    if t_out == 0 {
        return Err(Error::InvalidLength("cannot resample to zero frames".into()));
    }
    let t_in = clip.frames();
    let n = clip.num_joints();
    if t_out == t_in {
        return Ok(clip.clone());
    }
    let rot = clip.rotations_flat();
    let tr = clip.translation_flat();
    let mut out_rot = Vec::with_capacity(t_out * n * 6);
    let mut out_tr = Vec::with_capacity(t_out * 3);
    for i in 0..t_out {
        let (lo, hi, w) = if t_out == 1 || t_in == 1 {
            (0, 0, 0.0)
        } else {
            let u = (i * (t_in - 1)) as f64 / (t_out - 1) as f64;
            let lo = (u.floor() as usize).min(t_in - 1);
            if lo == t_in - 1 {
                (lo, lo, 0.0)
            } else {
                (lo, lo + 1, u - lo as f64)
            }
        };
        let lerp = |data: &[f64], width: usize, k: usize| {
            let a = data[lo * width + k];
            if w == 0.0 {
                a
            } else {
                a + (data[hi * width + k] - a) * w
            }
        };
        out_rot.extend((0..n * 6).map(|k| lerp(&rot, n * 6, k)));
        out_tr.extend((0..3).map(|k| lerp(&tr, 3, k)));
    }
    MotionClip::from_flat(n, &out_rot, &out_tr, clip.fps())
}
