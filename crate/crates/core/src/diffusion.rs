//! Topology-shifted stylization diffusion.
//!
//! The denoiser encodes a noised motion on a specific skeleton into a
//! per-frame feature, lifts it into the canonical space through the frozen
//! stage-one decoder, and shifts it back with the specific skeleton's token.
//! The content branch decodes the canonical feature as is; the stylization
//! branch applies AdaIN with the prompt's statistics first.

use candle_core::{Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{self, mse, scalar};
use crate::motion_io::resample;
use crate::nn::{self, LayerNorm, Linear, LocalEncoderLayer, ParamStore, TemporalConv};
use crate::skeleton::{MotionClip, Skeleton};
use crate::style_embedding::{CanonicalFeature, StageOneModel, StyleEmbedding};
use crate::topology_shift::{AttentionScope, TopologyShift, TopologyToken};

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear β from `beta_start` to `beta_end` over `steps` steps.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::Config("diffusion needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!("beta range [{beta_start}, {beta_end}] must satisfy 0 < start <= end < 1")));
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    DiffusionSchedule::from_betas(betas)
}

impl DiffusionSchedule {
    /// Any β sequence in `[0, 1]`; `alpha_bar` is the running product of `1 − β`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::Config("betas must be non-empty and within [0, 1]".into()));
        }
        let mut acc = 1.0;
        let alpha_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, s: usize) -> Result<()> {
        if s >= self.steps() {
            return Err(Error::Index(format!("step {s} outside [0, {})", self.steps())));
        }
        Ok(())
    }

    /// `(c0, c1, variance)` of the posterior `q(x_{s-1} | x_s, x0) = N(c0·x0 + c1·x_s, variance)`, `s ≥ 1`.
    pub fn posterior(&self, s: usize) -> Result<(f64, f64, f64)> {
        self.check(s)?;
        if s == 0 {
            return Err(Error::Index("step 0 has no posterior".into()));
        }
        let (ab, ab_prev, beta) = (self.alpha_bar[s], self.alpha_bar[s - 1], self.betas[s]);
        let denom = 1.0 - ab;
        let c0 = beta * ab_prev.sqrt() / denom;
        let c1 = (1.0 - ab_prev) * (1.0 - beta).sqrt() / denom;
        Ok((c0, c1, beta * (1.0 - ab_prev) / denom))
    }
}

/// `√ᾱ_s·x0 + √(1−ᾱ_s)·noise`.
pub fn q_sample(schedule: &DiffusionSchedule, x0: &Tensor, s: usize, noise: &Tensor) -> Result<Tensor> {
    schedule.check(s)?;
    if x0.dims() != noise.dims() {
        return Err(Error::Shape(format!("x0 {:?} vs noise {:?}", x0.dims(), noise.dims())));
    }
    let ab = schedule.alpha_bar[s];
    Ok(((x0 * ab.sqrt())? + (noise * (1.0 - ab).sqrt())?)?)
}

pub fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, device)?)
}

/// Ancestral DDPM with an x0-predicting denoiser; step 0 returns the prediction itself.
pub fn ddpm_sample<F>(
    schedule: &DiffusionSchedule,
    shape: &[usize],
    seed: u64,
    stochastic: bool,
    mut predict_x0: F,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let device = Device::Cpu;
    let mut x = gaussian(shape, &mut rng, &device)?;
    for s in (0..schedule.steps()).rev() {
        let x0_hat = predict_x0(&x, s)?.detach();
        if s == 0 {
            x = x0_hat;
            break;
        }
        let (c0, c1, var) = schedule.posterior(s)?;
        x = ((x0_hat * c0)? + (&x * c1)?)?;
        if stochastic {
            x = (x + (gaussian(shape, &mut rng, &device)? * var.sqrt())?)?;
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TsdConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Local-attention window in frames.
    pub window: usize,
    pub ff_multiplier: usize,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub nu_eng: f64,
    pub nu_sty: f64,
    /// Add a frame position encoding to the canonical feature before the diffusion decoder.
    pub decoder_positional_encoding: bool,
    pub stochastic_sampling: bool,
    pub translation_kernel: usize,
    pub self_loops: bool,
    pub gcl_activation: bool,
    pub seed: u64,
}

impl Default for TsdConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 8,
            decoder_layers: 4,
            heads: 4,
            window: 8,
            ff_multiplier: 2,
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            nu_eng: 0.5,
            nu_sty: 0.1,
            decoder_positional_encoding: false,
            stochastic_sampling: false,
            translation_kernel: 3,
            self_loops: true,
            gcl_activation: false,
            seed: 0,
        }
    }
}

impl TsdConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("nu_eng", self.nu_eng), ("nu_sty", self.nu_sty)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if self.window == 0 || self.translation_kernel % 2 == 0 {
            return Err(Error::Config("window must be positive and the translation kernel odd".into()));
        }
        build_schedule(self.steps, self.beta_start, self.beta_end).map(|_| ())
    }
}

#[derive(Debug, Clone)]
pub struct DenoiseOutput {
    /// Content branch, `(T, N^Φ, 6)`.
    pub x0_hat: Tensor,
    /// Stylization branch, `(T, N^Φ, 6)`.
    pub x0_hat_styled: Tensor,
    /// Canonical feature before AdaIN.
    pub f_canon: CanonicalFeature,
    /// Canonical feature after AdaIN.
    pub f_x_canon: CanonicalFeature,
}

#[derive(Debug, Clone)]
pub struct TsdLosses {
    pub con: Tensor,
    pub eng: Tensor,
    pub sty: Tensor,
    pub total: Tensor,
}

/// Source motion and style prompt for single-sequence training.
#[derive(Debug, Clone)]
pub struct TsdBatch {
    /// `(T, N^Φ, 6)`
    pub x0: Tensor,
    /// Normalized root translation `(T, 3)`.
    pub translation: Tensor,
    /// Canonical prompt clip; without one the part-energy term is dropped.
    pub prompt: Option<MotionClip>,
    pub style: StyleEmbedding,
}

/// Root-translation normalization stats recorded from the training source.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TranslationStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub fps: f64,
}

impl Default for TranslationStats {
    fn default() -> Self {
        Self { mean: [0.0; 3], std: [1.0; 3], fps: 30.0 }
    }
}

impl TranslationStats {
    pub fn from_clip(clip: &MotionClip) -> Self {
        let n = clip.frames().max(1) as f64;
        let mut mean = [0.0; 3];
        for tr in clip.translation() {
            for k in 0..3 {
                mean[k] += tr[k] / n;
            }
        }
        let mut std = [0.0; 3];
        for tr in clip.translation() {
            for k in 0..3 {
                std[k] += (tr[k] - mean[k]).powi(2) / n;
            }
        }
        Self { mean, std: std.map(|v| v.sqrt().max(1e-6)), fps: clip.fps() }
    }

    pub fn normalize(&self, clip: &MotionClip, device: &Device) -> Result<Tensor> {
        let data: Vec<f64> = clip
            .translation()
            .iter()
            .flat_map(|tr| (0..3).map(move |k| (tr[k] - self.mean[k]) / self.std[k]))
            .collect();
        Ok(Tensor::from_vec(data, (clip.frames(), 3), device)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Branch {
    Content,
    Stylized,
    /// `(1−α)·content + α·stylized` in the canonical space.
    Blend(f64),
}

pub struct TsdModel {
    config: TsdConfig,
    stage1: StageOneModel,
    skeleton: Skeleton,
    store: ParamStore,
    input: Linear,
    step_hidden: Linear,
    step_out: Linear,
    encoder: Vec<LocalEncoderLayer>,
    encoder_norm: LayerNorm,
    token: TopologyToken,
    decoder: TopologyShift,
    output: Linear,
    translation: Vec<TemporalConv>,
    stats: TranslationStats,
    schedule: DiffusionSchedule,
}

impl TsdModel {
    /// New TSD model on `skeleton`, holding a frozen copy of `stage1`.
    pub fn new(config: TsdConfig, stage1: &StageOneModel, skeleton: Skeleton) -> Result<Self> {
        let store = ParamStore::new(config.seed);
        Self::from_store(config, stage1.frozen()?, skeleton, store, TranslationStats::default())
    }

    /// Rebuild from parts; `stage1` must already be frozen.
    pub fn from_store(
        config: TsdConfig,
        stage1: StageOneModel,
        skeleton: Skeleton,
        mut store: ParamStore,
        stats: TranslationStats,
    ) -> Result<Self> {
        config.validate()?;
        if stage1.store().is_trainable() {
            return Err(Error::Config("the stage-one model inside TSD must be frozen".into()));
        }
        let c = stage1.channels();
        if c % config.heads != 0 {
            return Err(Error::Config(format!("{c} channels do not split over {} heads", config.heads)));
        }
        let n = skeleton.num_joints();
        let hidden = c * config.ff_multiplier;
        let s = &mut store;
        let input = Linear::new(s, "encoder.input", 6 * n, c)?;
        let step_hidden = Linear::new(s, "encoder.step_hidden", c, c)?;
        let step_out = Linear::new(s, "encoder.step_out", c, c)?;
        let encoder = (0..config.encoder_layers)
            .map(|i| LocalEncoderLayer::new(s, &format!("encoder.layer{i}"), c, config.heads, hidden, config.window))
            .collect::<Result<_>>()?;
        let encoder_norm = LayerNorm::new(s, "encoder.norm", c)?;
        let token = TopologyToken::for_skeleton(s, "specific_token", &skeleton, c, config.self_loops, config.gcl_activation)?;
        let decoder =
            TopologyShift::new(s, "decoder", c, config.heads, hidden, config.decoder_layers, AttentionScope::PerFrame)?;
        let output = Linear::new(s, "output", c, 6)?;
        let k = config.translation_kernel;
        let translation = vec![
            TemporalConv::new(s, "translation.conv0", 6 * n, c, k)?,
            TemporalConv::new(s, "translation.conv1", c, c, k)?,
            TemporalConv::new(s, "translation.conv2", c, 3, k)?,
        ];
        let schedule = build_schedule(config.steps, config.beta_start, config.beta_end)?;
        Ok(Self {
            config,
            stage1,
            skeleton,
            store,
            input,
            step_hidden,
            step_out,
            encoder,
            encoder_norm,
            token,
            decoder,
            output,
            translation,
            stats,
            schedule,
        })
    }

    pub fn config(&self) -> &TsdConfig {
        &self.config
    }

    pub fn stage1(&self) -> &StageOneModel {
        &self.stage1
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn token(&self) -> &TopologyToken {
        &self.token
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn translation_stats(&self) -> TranslationStats {
        self.stats
    }

    pub fn set_translation_stats(&mut self, stats: TranslationStats) {
        self.stats = stats;
    }

    fn device(&self) -> &Device {
        self.store.device()
    }

    /// Noised motion `(T, N^Φ, 6)` at step `s` -> content feature `(T, C)`.
    pub fn encode(&self, x_s: &Tensor, s: usize) -> Result<Tensor> {
        let (t_len, n, k) = x_s.dims3()?;
        if n != self.skeleton.num_joints() || k != 6 {
            return Err(Error::Shape(format!("denoiser expects (T, {}, 6), got {:?}", self.skeleton.num_joints(), x_s.dims())));
        }
        self.schedule.check(s)?;
        let c = self.stage1.channels();
        let step = nn::sinusoidal(&[s as f64], c, self.device())?;
        let step = self.step_out.forward(&self.step_hidden.forward(&step)?.silu()?)?;
        let x = self.input.forward(&x_s.reshape((t_len, 6 * n))?)?;
        let mut h = x.broadcast_add(&step)?.add(&nn::frame_positions(t_len, c, self.device())?)?;
        for layer in &self.encoder {
            h = layer.forward(&h)?;
        }
        self.encoder_norm.forward(&h)
    }

    /// Canonical feature `(N^Ω, T, C)` -> motion `(T, N^Φ, 6)` via the specific token.
    pub fn decode_specific(&self, f: &CanonicalFeature) -> Result<Tensor> {
        let mut memory = f.tensor().transpose(0, 1)?.contiguous()?;
        if self.config.decoder_positional_encoding {
            let (t_len, _, c) = memory.dims3()?;
            memory = memory.broadcast_add(&nn::frame_positions(t_len, c, self.device())?.unsqueeze(1)?)?;
        }
        let h = self.decoder.forward(&self.token.refine()?, &memory)?;
        self.output.forward(&h)
    }

    fn check_style(&self, style: &StyleEmbedding) -> Result<()> {
        let c = self.stage1.channels();
        if style.f_p.dims() != [1, c] || style.mu.dims() != [c] || style.sigma.dims() != [c] {
            return Err(Error::Shape(format!(
                "style ({:?}, {:?}, {:?}) does not match {c} channels",
                style.f_p.dims(),
                style.mu.dims(),
                style.sigma.dims()
            )));
        }
        Ok(())
    }

    /// Both branch predictions for one noised motion.
    pub fn denoise(&self, x_s: &Tensor, s: usize, style: &StyleEmbedding) -> Result<DenoiseOutput> {
        self.check_style(style)?;
        let f_x = self.encode(x_s, s)?;
        let f_canon = self.stage1.decode_canonical(&f_x, &style.f_p)?;
        let f_x_canon = self.stage1.adain(&f_canon, style)?;
        Ok(DenoiseOutput {
            x0_hat: self.decode_specific(&f_canon)?,
            x0_hat_styled: self.decode_specific(&f_x_canon)?,
            f_canon,
            f_x_canon,
        })
    }

    /// Single prediction of `x0` along one branch or a blend of both.
    pub fn predict_x0(&self, x_s: &Tensor, s: usize, style: &StyleEmbedding, branch: Branch) -> Result<Tensor> {
        self.check_style(style)?;
        let f_x = self.encode(x_s, s)?;
        let f = self.stage1.decode_canonical(&f_x, &style.f_p)?;
        let mixed = match branch {
            Branch::Content => f,
            Branch::Stylized => self.stage1.adain(&f, style)?,
            Branch::Blend(alpha) => {
                let g = self.stage1.adain(&f, style)?;
                CanonicalFeature(((f.tensor() * (1.0 - alpha))? + (g.tensor() * alpha)?)?)
            }
        };
        self.decode_specific(&mixed)
    }

    /// The three stylization losses; `L_con` here covers rotations only.
    pub fn tsd_losses(
        &self,
        out: &DenoiseOutput,
        x0: &Tensor,
        prompt: Option<&MotionClip>,
        f_p: &Tensor,
    ) -> Result<TsdLosses> {
        let con = mse(x0, &out.x0_hat)?;
        let eng = match prompt {
            Some(x_p) => self.energy_loss(&out.x0_hat_styled, x_p)?,
            None => Tensor::new(0.0f64, self.device())?,
        };
        let (f_back, _) = self.stage1.encode_tensor(&self.stage1.reconstruct(&out.f_x_canon)?)?;
        let sty = mse(&f_p.detach(), &f_back)?;
        let total = ((&con + (&eng * self.config.nu_eng)?)? + (&sty * self.config.nu_sty)?)?;
        Ok(TsdLosses { con, eng, sty, total })
    }

    /// Part-averaged 6D mismatch between the resampled prompt and the styled prediction.
    pub fn energy_loss(&self, styled: &Tensor, x_p: &MotionClip) -> Result<Tensor> {
        let canonical = self.stage1.skeleton();
        for (name, s) in [("canonical", canonical), ("specific", &self.skeleton)] {
            if s.part_map().is_none() {
                return Err(Error::EmptyPart(format!("{name} skeleton has no part map")));
            }
        }
        x_p.check_skeleton(canonical)?;
        let t_len = styled.dim(0)?;
        let aligned = if x_p.frames() == t_len { x_p.clone() } else { resample(x_p, t_len)? };
        let p = Tensor::from_vec(aligned.rotations_flat(), (t_len, aligned.num_joints(), 6), self.device())?;
        mse(&kinematics::group_by_parts(&p, canonical)?, &kinematics::group_by_parts(styled, &self.skeleton)?)
    }

    /// Normalized translation `(T, 3)` from rotations `(T, N^Φ, 6)`.
    pub fn translation_normalized(&self, rotations: &Tensor) -> Result<Tensor> {
        let (t_len, n, _) = rotations.dims3()?;
        let mut h = rotations.reshape((t_len, 6 * n))?;
        for (i, conv) in self.translation.iter().enumerate() {
            h = conv.forward(&h)?;
            if i + 1 < self.translation.len() {
                h = h.gelu()?;
            }
        }
        Ok(h)
    }

    /// Root translation `(T, 3)` in source units.
    pub fn predict_translation(&self, rotations: &Tensor) -> Result<Tensor> {
        let h = self.translation_normalized(rotations)?;
        let std = Tensor::new(&self.stats.std, self.device())?.unsqueeze(0)?;
        let mean = Tensor::new(&self.stats.mean, self.device())?.unsqueeze(0)?;
        Ok(h.broadcast_mul(&std)?.broadcast_add(&mean)?)
    }

    /// Full training objective at a fixed step and noise draw.
    pub fn loss_at(&self, batch: &TsdBatch, s: usize, noise: &Tensor) -> Result<TsdLosses> {
        let x_s = q_sample(&self.schedule, &batch.x0, s, noise)?;
        let out = self.denoise(&x_s, s, &batch.style)?;
        let mut losses = self.tsd_losses(&out, &batch.x0, batch.prompt.as_ref(), &batch.style.f_p)?;
        let trans = mse(&self.translation_normalized(&batch.x0)?, &batch.translation)?;
        losses.con = (losses.con + &trans)?;
        losses.total = (losses.total + trans)?;
        Ok(losses)
    }

    /// Batch for training on `source` with the style of the canonical `prompt`.
    pub fn batch(&self, source: &MotionClip, prompt: Option<&MotionClip>, style: StyleEmbedding) -> Result<TsdBatch> {
        source.check_skeleton(&self.skeleton)?;
        let x0 = Tensor::from_vec(source.rotations_flat(), (source.frames(), source.num_joints(), 6), self.device())?;
        Ok(TsdBatch { x0, translation: self.stats.normalize(source, self.device())?, prompt: prompt.cloned(), style })
    }

    /// Style of a canonical prompt clip through the frozen encoder.
    pub fn prompt_style(&self, prompt: &MotionClip) -> Result<StyleEmbedding> {
        let (f_p, _) = self.stage1.encode_style(prompt, self.stage1.skeleton())?;
        self.stage1.embed_style(&f_p)
    }

    /// Generate `length` frames along `branch`, deterministic for a fixed seed.
    pub fn sample_branch(&self, length: usize, style: &StyleEmbedding, branch: Branch, seed: u64) -> Result<MotionClip> {
        if length == 0 {
            return Err(Error::InvalidLength("sample length must be at least 1".into()));
        }
        let n = self.skeleton.num_joints();
        let x = ddpm_sample(&self.schedule, &[length, n, 6], seed, self.config.stochastic_sampling, |x, s| {
            self.predict_x0(x, s, style, branch)
        })?;
        let translation = self.predict_translation(&x)?;
        let rot = x.flatten_all()?.to_vec1::<f64>()?;
        let tr = translation.flatten_all()?.to_vec1::<f64>()?;
        MotionClip::from_flat(n, &rot, &tr, self.stats.fps)
    }

    /// α-blended sample; α = 1 is the stylization path.
    pub fn sample(&self, length: usize, style: &StyleEmbedding, alpha: f64, seed: u64) -> Result<MotionClip> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        self.sample_branch(length, style, Branch::Blend(alpha), seed)
    }

    /// Mean absolute content-branch error over a fixed set of steps and noise.
    pub fn content_error(&self, batch: &TsdBatch, seed: u64) -> Result<f64> {
        let steps = self.schedule.steps();
        let probe: Vec<usize> = {
            let mut v: Vec<usize> = [0, steps / 4, steps / 2, 3 * steps / 4, steps - 1].to_vec();
            v.dedup();
            v
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        for &s in &probe {
            let noise = gaussian(batch.x0.dims(), &mut rng, self.device())?;
            let x_s = q_sample(&self.schedule, &batch.x0, s, &noise)?;
            let pred = self.predict_x0(&x_s, s, &batch.style, Branch::Content)?;
            total += scalar(&(pred - &batch.x0)?.abs()?.mean_all()?)?;
        }
        Ok(total / probe.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TsdStepLosses {
    pub step: usize,
    pub s: usize,
    pub con: f64,
    pub eng: f64,
    pub sty: f64,
    pub total: f64,
}

/// Adam over the TSD parameters only; the stage-one copy is frozen.
pub struct TsdTrainer {
    opt: AdamW,
    rng: ChaCha8Rng,
    batch: TsdBatch,
    step: usize,
}

impl TsdTrainer {
    pub fn new(model: &mut TsdModel, source: &MotionClip, prompt: Option<&MotionClip>, style: StyleEmbedding, learning_rate: f64, seed: u64) -> Result<Self> {
        model.set_translation_stats(TranslationStats::from_clip(source));
        let batch = model.batch(source, prompt, style)?;
        let params = ParamsAdamW { lr: learning_rate, weight_decay: 0.0, ..Default::default() };
        Ok(Self { opt: AdamW::new(model.store.vars(), params)?, rng: ChaCha8Rng::seed_from_u64(seed), batch, step: 0 })
    }

    pub fn batch(&self) -> &TsdBatch {
        &self.batch
    }

    pub fn step(&mut self, model: &TsdModel) -> Result<TsdStepLosses> {
        let s = self.rng.random_range(0..model.schedule.steps());
        let noise = gaussian(self.batch.x0.dims(), &mut self.rng, model.device())?;
        let losses = model.loss_at(&self.batch, s, &noise)?;
        self.opt.backward_step(&losses.total)?;
        let out = TsdStepLosses {
            step: self.step,
            s,
            con: scalar(&losses.con)?,
            eng: scalar(&losses.eng)?,
            sty: scalar(&losses.sty)?,
            total: scalar(&losses.total)?,
        };
        if !out.total.is_finite() {
            return Err(Error::Numerical(format!("TSD loss diverged at step {}", self.step)));
        }
        if self.step % 100 == 0 {
            log::info!("tsd step {}: total {:.6} con {:.6} eng {:.6} sty {:.6}", self.step, out.total, out.con, out.eng, out.sty);
        }
        self.step += 1;
        Ok(out)
    }

    pub fn run(&mut self, model: &TsdModel, steps: usize) -> Result<Vec<TsdStepLosses>> {
        (0..steps).map(|_| self.step(model)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::BodyPart;
    use crate::style_embedding::StageOneConfig;

    fn five_joint(prefix: &str) -> Skeleton {
        Skeleton::new(
            (0..5).map(|i| format!("{prefix}{i}")).collect(),
            vec![None, Some(0), Some(0), Some(0), Some(0)],
            vec![[0.0; 3], [0.2, 0.1, 0.0], [-0.2, 0.1, 0.0], [0.1, -0.3, 0.0], [-0.1, -0.3, 0.0]],
        )
        .unwrap()
        .with_part_map(vec![BodyPart::Torso, BodyPart::LeftArm, BodyPart::RightArm, BodyPart::LeftLeg, BodyPart::RightLeg])
        .unwrap()
    }

    fn seven_joint() -> Skeleton {
        Skeleton::new(
            (0..7).map(|i| format!("b{i}")).collect(),
            vec![None, Some(0), Some(1), Some(0), Some(0), Some(0), Some(0)],
            vec![[0.0; 3], [0.0, 0.2, 0.0], [0.0, 0.2, 0.0], [0.2, 0.1, 0.0], [-0.2, 0.1, 0.0], [0.1, -0.3, 0.0], [-0.1, -0.3, 0.0]],
        )
        .unwrap()
        .with_part_map(vec![
            BodyPart::Torso,
            BodyPart::Torso,
            BodyPart::Torso,
            BodyPart::LeftArm,
            BodyPart::RightArm,
            BodyPart::LeftLeg,
            BodyPart::RightLeg,
        ])
        .unwrap()
    }

    fn models() -> (StageOneModel, TsdModel) {
        let cfg = StageOneConfig { channels: 16, heads: 2, encoder_layers: 1, decoder_layers: 1, seed: 1, ..Default::default() };
        let stage1 = StageOneModel::new(cfg, five_joint("c")).unwrap();
        let tsd_cfg = TsdConfig { encoder_layers: 1, decoder_layers: 1, heads: 2, steps: 10, seed: 2, ..Default::default() };
        let tsd = TsdModel::new(tsd_cfg, &stage1, seven_joint()).unwrap();
        (stage1, tsd)
    }

    fn clip(n: usize, t: usize, seed: u64) -> MotionClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rot: Vec<f64> = (0..n * t * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tr: Vec<f64> = (0..t * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        MotionClip::from_flat(n, &rot, &tr, 30.0).unwrap()
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        scalar(&(a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap()).unwrap()
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(build_schedule(1, 0.01, 0.01).unwrap().alpha_bar(), &[0.99]);
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
        assert!(*s.alpha_bar().last().unwrap() < 0.01);
        let c = 0.03;
        let s = build_schedule(50, c, c).unwrap();
        for (i, ab) in s.alpha_bar().iter().enumerate() {
            let want = (1.0f64 - c).powi(i as i32 + 1);
            assert!((ab - want).abs() <= 1e-12 * want);
        }
        for (a, b) in [(0.0, 0.1), (0.2, 0.1), (0.1, 1.0)] {
            assert!(matches!(build_schedule(10, a, b), Err(Error::Config(_))));
        }
        assert!(matches!(build_schedule(0, 0.1, 0.2), Err(Error::Config(_))));
    }

    #[test]
    fn q_sample_examples() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = gaussian(&[4, 3, 6], &mut rng, &dev).unwrap();
        let noise = gaussian(&[4, 3, 6], &mut rng, &dev).unwrap();
        let sched = DiffusionSchedule::from_betas(vec![0.0, 1.0]).unwrap();
        assert_eq!(max_abs(&q_sample(&sched, &x0, 0, &noise).unwrap(), &x0), 0.0);
        assert_eq!(max_abs(&q_sample(&sched, &x0, 1, &noise).unwrap(), &noise), 0.0);
        let sched = build_schedule(20, 1e-4, 0.02).unwrap();
        let got = q_sample(&sched, &x0, 7, &noise).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let (a, n) = (x0.flatten_all().unwrap().to_vec1::<f64>().unwrap(), noise.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        let ab = sched.alpha_bar()[7];
        for i in 0..got.len() {
            assert_eq!(got[i], a[i] * ab.sqrt() + n[i] * (1.0 - ab).sqrt());
        }
        assert!(matches!(q_sample(&sched, &x0, 20, &noise), Err(Error::Index(_))));
    }

    #[test]
    fn oracle_denoiser_recovers_x0() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = gaussian(&[6, 4, 6], &mut rng, &Device::Cpu).unwrap();
        for steps in [10, 50, 100] {
            let sched = build_schedule(steps, 1e-4, 0.02).unwrap();
            for stochastic in [false, true] {
                let out = ddpm_sample(&sched, &[6, 4, 6], 9, stochastic, |_, _| Ok(x0.clone())).unwrap();
                assert!(max_abs(&out, &x0) < 1e-4);
            }
        }
    }

    #[test]
    fn denoise_shapes_and_branch_identity() {
        let (_, tsd) = models();
        let prompt = clip(5, 6, 1);
        let style = tsd.prompt_style(&prompt).unwrap();
        let x = clip(7, 6, 2);
        let x_s = Tensor::from_vec(x.rotations_flat(), (6, 7, 6), &Device::Cpu).unwrap();
        let out = tsd.denoise(&x_s, 3, &style).unwrap();
        assert_eq!(out.x0_hat.dims(), &[6, 7, 6]);
        assert_eq!(out.x0_hat_styled.dims(), &[6, 7, 6]);
        assert_eq!(out.f_x_canon.dims(), (4, 6, 16));

        // own statistics make AdaIN the identity (up to eps)
        let (mean, std) = crate::style_embedding::channel_stats(out.f_canon.tensor()).unwrap();
        let own = StyleEmbedding {
            f_p: style.f_p.clone(),
            mu: Tensor::new(mean.as_slice(), &Device::Cpu).unwrap(),
            sigma: Tensor::new(std.iter().map(|s| s + tsd.stage1().config().adain_eps).collect::<Vec<_>>().as_slice(), &Device::Cpu)
                .unwrap(),
        };
        let out = tsd.denoise(&x_s, 3, &own).unwrap();
        assert!(max_abs(&out.x0_hat, &out.x0_hat_styled) < 1e-9);

        // zero style statistics: content branch input unchanged, styled output moves
        let zero = tsd.stage1().embed_style(&style.f_p.zeros_like().unwrap()).unwrap();
        let probe = StyleEmbedding { f_p: style.f_p.clone(), ..zero };
        let a = tsd.denoise(&x_s, 3, &style).unwrap();
        let b = tsd.denoise(&x_s, 3, &probe).unwrap();
        assert_eq!(max_abs(a.f_canon.tensor(), b.f_canon.tensor()), 0.0);
        assert_eq!(max_abs(&a.x0_hat, &b.x0_hat), 0.0);
        assert!(max_abs(&a.x0_hat_styled, &b.x0_hat_styled) > 1e-9);
    }

    #[test]
    fn translation_net_shape_and_constant_signal() {
        let (_, tsd) = models();
        let r = Tensor::ones((9, 7, 6), nn::DTYPE, &Device::Cpu).unwrap();
        let out = tsd.predict_translation(&r).unwrap();
        assert_eq!(out.dims(), &[9, 3]);
        let rows = out.to_vec2::<f64>().unwrap();
        for row in &rows {
            for k in 0..3 {
                assert!((row[k] - rows[0][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn missing_part_map_is_empty_part_error() {
        let (stage1, _) = models();
        let bare = Skeleton::new(vec!["a".into(), "b".into()], vec![None, Some(0)], vec![[0.0; 3], [0.0, 1.0, 0.0]]).unwrap();
        let tsd = TsdModel::new(TsdConfig { encoder_layers: 1, decoder_layers: 1, heads: 2, steps: 5, ..Default::default() }, &stage1, bare).unwrap();
        let styled = Tensor::zeros((4, 2, 6), nn::DTYPE, &Device::Cpu).unwrap();
        assert!(matches!(tsd.energy_loss(&styled, &clip(5, 4, 0)), Err(Error::EmptyPart(_))));
    }

    #[test]
    fn sampling_is_deterministic_with_exact_endpoints() {
        let (_, tsd) = models();
        let style = tsd.prompt_style(&clip(5, 6, 1)).unwrap();
        let a = tsd.sample(6, &style, 0.5, 11).unwrap();
        let b = tsd.sample(6, &style, 0.5, 11).unwrap();
        assert_eq!(a, b);
        let bits = |c: &MotionClip| c.rotations_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&tsd.sample(6, &style, 0.0, 11).unwrap()), bits(&tsd.sample_branch(6, &style, Branch::Content, 11).unwrap()));
        assert_eq!(bits(&tsd.sample(6, &style, 1.0, 11).unwrap()), bits(&tsd.sample_branch(6, &style, Branch::Stylized, 11).unwrap()));
        assert!(tsd.sample(6, &style, 1.5, 11).is_err());
    }

    #[test]
    fn training_leaves_stage_one_untouched() {
        let (stage1, mut tsd) = models();
        let before = stage1.store().snapshot().unwrap();
        let inner_before = tsd.stage1().store().snapshot().unwrap();
        let prompt = clip(5, 6, 1);
        let style = tsd.prompt_style(&prompt).unwrap();
        let mut trainer = TsdTrainer::new(&mut tsd, &clip(7, 6, 3), Some(&prompt), style, 1e-3, 0).unwrap();
        let tsd_before = tsd.store().snapshot().unwrap();
        trainer.run(&tsd, 5).unwrap();
        assert_eq!(tsd.stage1().store().snapshot().unwrap(), inner_before);
        assert_eq!(inner_before, before);
        assert_ne!(tsd.store().snapshot().unwrap(), tsd_before);
    }
}
