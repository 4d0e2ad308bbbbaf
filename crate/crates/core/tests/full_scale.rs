//! Default (full-size) architecture settings and the shapes they produce.

use motionstyle_core::diffusion::{TsdConfig, TsdModel};
use motionstyle_core::style_embedding::{StageOneConfig, StageOneModel};
use motionstyle_core::{BodyPart, MotionClip, Skeleton};

#[test]
fn default_sizes() {
    let s1 = StageOneConfig::default();
    assert_eq!((s1.channels, s1.encoder_layers, s1.decoder_layers), (512, 4, 4));
    let tsd = TsdConfig::default();
    assert_eq!((tsd.encoder_layers, tsd.decoder_layers), (8, 4));
    assert_eq!(Skeleton::smpl().num_joints() - 1, 23);
}

#[test]
fn full_size_shapes() {
    let model = StageOneModel::new(StageOneConfig::default(), Skeleton::smpl()).unwrap();
    assert_eq!(model.canonical_joints(), 23);
    let clip = MotionClip::rest(24, 8, 30.0).unwrap();
    let (f_p, f_m) = model.encode_style(&clip, &Skeleton::smpl()).unwrap();
    assert_eq!((f_p.dims(), f_m.dims()), (&[1, 512][..], &[8, 512][..]));
    let f = model.decode_canonical(&f_m, &f_p).unwrap();
    assert_eq!(f.dims(), (23, 8, 512));
    assert_eq!(model.reconstruct(&f).unwrap().dims(), &[8, 23, 6]);

    use BodyPart::*;
    let seven = Skeleton::new(
        (0..7).map(|i| format!("b{i}")).collect(),
        vec![None, Some(0), Some(1), Some(1), Some(1), Some(0), Some(0)],
        vec![[0.0, 0.0, 0.0], [0.0, 0.1, 0.3], [0.0, 0.1, 0.2], [0.1, -0.3, 0.1], [-0.1, -0.3, 0.1], [0.1, -0.3, 0.0], [-0.1, -0.3, 0.0]],
    )
    .unwrap()
    .with_part_map(vec![Torso, Torso, Torso, LeftArm, RightArm, LeftLeg, RightLeg])
    .unwrap();
    let tsd = TsdModel::new(TsdConfig { steps: 4, ..Default::default() }, &model, seven).unwrap();
    let style = tsd.prompt_style(&clip).unwrap();
    let x = candle_core::Tensor::zeros((8, 7, 6), candle_core::DType::F64, &candle_core::Device::Cpu).unwrap();
    let out = tsd.denoise(&x, 2, &style).unwrap();
    assert_eq!(out.x0_hat.dims(), &[8, 7, 6]);
    assert_eq!(out.x0_hat_styled.dims(), &[8, 7, 6]);
    assert_eq!(out.f_x_canon.dims(), (23, 8, 512));
}
