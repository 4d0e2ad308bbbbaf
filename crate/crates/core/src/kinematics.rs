//! Differentiable rotation and kinematics ops on candle tensors.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};
use crate::skeleton::Skeleton;

fn normalize_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    x.broadcast_div(&norm)
}

fn cross_last(a: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    let c = |t: &Tensor, i: usize| t.narrow(D::Minus1, i, 1);
    let (a0, a1, a2) = (c(a, 0)?, c(a, 1)?, c(a, 2)?);
    let (b0, b1, b2) = (c(b, 0)?, c(b, 1)?, c(b, 2)?);
    Tensor::cat(
        &[
            ((&a1 * &b2)? - (&a2 * &b1)?)?,
            ((&a2 * &b0)? - (&a0 * &b2)?)?,
            ((&a0 * &b1)? - (&a1 * &b0)?)?,
        ],
        D::Minus1,
    )
}

/// `(..., 6)` -> `(..., 3, 3)` via Gram-Schmidt; columns are the basis vectors.
pub fn rot6d_to_matrix(x: &Tensor) -> Result<Tensor> {
    let a1 = x.narrow(D::Minus1, 0, 3)?;
    let a2 = x.narrow(D::Minus1, 3, 3)?;
    let b1 = normalize_last(&a1)?;
    let proj = (&b1 * &a2)?.sum_keepdim(D::Minus1)?;
    let b2 = normalize_last(&(a2 - b1.broadcast_mul(&proj)?)?)?;
    let b3 = cross_last(&b1, &b2)?;
    Ok(Tensor::stack(&[b1, b2, b3], D::Minus1)?)
}

/// Global joint positions `(T, N, 3)` from local rotation matrices `(T, N, 3, 3)`
/// and root translation `(T, 3)`.
pub fn forward_kinematics(s: &Skeleton, rotations: &Tensor, translation: &Tensor) -> Result<Tensor> {
    let (t_len, n, _, _) = rotations.dims4()?;
    if n != s.num_joints() {
        return Err(Error::Shape(format!("{n} rotation joints for a {}-joint skeleton", s.num_joints())));
    }
    let device = rotations.device();
    let mut global: Vec<Tensor> = Vec::with_capacity(n);
    let mut pos: Vec<Tensor> = Vec::with_capacity(n);
    for j in 0..n {
        let local = rotations.narrow(1, j, 1)?.squeeze(1)?;
        match s.parents()[j] {
            None => {
                pos.push(translation.clone());
                global.push(local);
            }
            Some(p) => {
                let offset = Tensor::new(&s.offsets()[j], device)?.to_dtype(rotations.dtype())?.reshape((1, 3, 1))?;
                let offset = offset.broadcast_as((t_len, 3, 1))?;
                let step = global[p].matmul(&offset)?.squeeze(2)?;
                pos.push((&pos[p] + step)?);
                global.push(global[p].matmul(&local)?);
            }
        }
    }
    Ok(Tensor::stack(&pos, 1)?)
}

/// Differentiable counterpart of [`crate::skeleton::joint_velocities`] on `(T, ...)`.
pub fn velocities(positions: &Tensor, fps: f64) -> Result<Tensor> {
    let t_len = positions.dim(0)?;
    if t_len < 2 {
        return Ok(positions.zeros_like()?);
    }
    let diff = ((positions.narrow(0, 1, t_len - 1)? - positions.narrow(0, 0, t_len - 1)?)? * fps)?;
    let last = diff.narrow(0, t_len - 2, 1)?;
    Ok(Tensor::cat(&[diff, last], 0)?)
}

/// Mean of squared differences over every element.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("mse of {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// `(5, N)` part-averaging matrix for `s`.
pub fn part_average_tensor(s: &Skeleton, device: &Device) -> Result<Tensor> {
    let w = s.part_average_matrix()?;
    let n = w.len();
    let mut data = vec![0.0f64; 5 * n];
    for (j, row) in w.iter().enumerate() {
        for g in 0..5 {
            data[g * n + j] = row[g];
        }
    }
    Ok(Tensor::from_vec(data, (5, n), device)?)
}

/// `(T, N, 6)` -> `(T, 5, 6)` mean feature per body part.
pub fn group_by_parts(rotations: &Tensor, s: &Skeleton) -> Result<Tensor> {
    let (t_len, n, c) = rotations.dims3()?;
    if n != s.num_joints() {
        return Err(Error::Shape(format!("{n} joints for a {}-joint skeleton", s.num_joints())));
    }
    let g = part_average_tensor(s, rotations.device())?.to_dtype(rotations.dtype())?;
    let g = g.unsqueeze(0)?.broadcast_as((t_len, 5, n))?.contiguous()?;
    Ok(g.matmul(&rotations.contiguous()?)?.reshape((t_len, 5, c))?)
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{self, MotionClip, Rotation6D};
    use rand::{Rng, SeedableRng};

    #[test]
    fn matches_scalar_rotation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let raw: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = Tensor::from_vec(raw.clone(), (10, 6), &Device::Cpu).unwrap();
        let m = rot6d_to_matrix(&t).unwrap().to_vec3::<f64>().unwrap();
        for (k, chunk) in raw.chunks(6).enumerate() {
            let want = Rotation6D(chunk.try_into().unwrap()).to_matrix().unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((m[k][i][j] - want[(i, j)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fk_and_velocity_match_scalar_versions() {
        let s = Skeleton::smpl();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let frames = 4;
        let rots: Vec<Rotation6D> = (0..frames * 24)
            .map(|_| {
                let m = nalgebra::Rotation3::from_euler_angles(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                skeleton::matrix_to_rot6d(m.matrix()).unwrap()
            })
            .collect();
        let trans: Vec<[f64; 3]> = (0..frames).map(|t| [t as f64 * 0.1, 0.9, 0.0]).collect();
        let clip = MotionClip::new(24, rots, trans, 30.0).unwrap();
        let want = skeleton::forward_kinematics(&s, &clip).unwrap();
        let want_v = skeleton::joint_velocities(&want, 30.0);

        let dev = Device::Cpu;
        let r = Tensor::from_vec(clip.rotations_flat(), (frames, 24, 6), &dev).unwrap();
        let tr = Tensor::from_vec(clip.translation_flat(), (frames, 3), &dev).unwrap();
        let pos = forward_kinematics(&s, &rot6d_to_matrix(&r).unwrap(), &tr).unwrap();
        let vel = velocities(&pos, 30.0).unwrap();
        let (pos, vel) = (pos.to_vec3::<f64>().unwrap(), vel.to_vec3::<f64>().unwrap());
        for t in 0..frames {
            for j in 0..24 {
                for k in 0..3 {
                    assert!((pos[t][j][k] - want.get(t, j)[k]).abs() < 1e-12);
                    assert!((vel[t][j][k] - want_v.get(t, j)[k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn grouping_matches_scalar_version() {
        let s = Skeleton::smpl();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let flat: Vec<f64> = (0..3 * 24 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let clip = MotionClip::from_flat(24, &flat, &[0.0; 9], 30.0).unwrap();
        let want = skeleton::group_by_parts(&clip, &s).unwrap();
        let got = group_by_parts(&Tensor::from_vec(flat, (3, 24, 6), &Device::Cpu).unwrap(), &s)
            .unwrap()
            .to_vec3::<f64>()
            .unwrap();
        for t in 0..3 {
            for g in 0..5 {
                for c in 0..6 {
                    assert!((got[t][g][c] - want[t][g][c]).abs() < 1e-12);
                }
            }
        }
    }
}
