//! Stage-one style autoencoder on the canonical skeleton.
//!
//! A canonical clip's non-root rotations are encoded into one style token
//! `f_p` and a per-frame content feature `f_m`. The canonical decoder lifts
//! `[f_m[t], f_p]` into one feature row per canonical joint; AdaIN with the
//! `(μ, σ)` derived from `f_p` stylizes that feature and a linear head maps it
//! back to 6D rotations.

use candle_core::{Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{self, mse, scalar};
use crate::nn::{self, EncoderLayer, Init, LayerNorm, Linear, ParamStore};
use crate::skeleton::{MotionClip, Rotation6D, Skeleton};
use crate::topology_shift::{AttentionScope, TopologyShift, TopologyToken};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct StageOneConfig {
    pub channels: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Feed-forward width as a multiple of `channels`.
    pub ff_multiplier: usize,
    pub attention: AttentionScope,
    pub adain_eps: f64,
    pub nu_sim: f64,
    pub self_loops: bool,
    pub gcl_activation: bool,
    pub seed: u64,
}

impl Default for StageOneConfig {
    fn default() -> Self {
        Self {
            channels: 512,
            heads: 4,
            encoder_layers: 4,
            decoder_layers: 4,
            ff_multiplier: 2,
            attention: AttentionScope::PerFrame,
            adain_eps: 1e-5,
            nu_sim: 0.1,
            self_loops: true,
            gcl_activation: false,
            seed: 0,
        }
    }
}

impl StageOneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!("{} channels do not split over {} heads", self.channels, self.heads)));
        }
        if !(self.adain_eps > 0.0) || !self.nu_sim.is_finite() || self.nu_sim < 0.0 {
            return Err(Error::Config("adain_eps must be > 0 and nu_sim finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Style token and the AdaIN statistics derived from it.
#[derive(Debug, Clone)]
pub struct StyleEmbedding {
    /// `(1, C)`
    pub f_p: Tensor,
    /// `(C)`
    pub mu: Tensor,
    /// `(C)`, strictly positive.
    pub sigma: Tensor,
}

/// `(N, T, C)` feature in a joint space (canonical unless stated otherwise).
#[derive(Debug, Clone)]
pub struct CanonicalFeature(pub Tensor);

impl CanonicalFeature {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims3()?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.0.dims();
        (d[0], d[1], d[2])
    }
}

/// Precomputed, unit-normalized external style vectors matched to a clip.
#[derive(Debug, Clone, Default)]
pub struct ExternalTokens {
    pub text: Option<Vec<f64>>,
    /// Image, or a video's frame-averaged image vector.
    pub image: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    /// Provider-side average of sampled frame embeddings; used like an image.
    Video,
}

/// One precomputed embedding from the external provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub modality: Modality,
    pub vector: Vec<f64>,
}

/// Records from a JSON array or JSON-lines text, vectors unit-normalized.
pub fn parse_embeddings(text: &str) -> Result<Vec<EmbeddingRecord>> {
    let mut records: Vec<EmbeddingRecord> = if text.trim_start().starts_with('[') {
        serde_json::from_str(text)?
    } else {
        text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<serde_json::Result<_>>()?
    };
    for r in &mut records {
        if r.vector.is_empty() || r.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("embedding `{}` is empty or non-finite", r.id)));
        }
        r.vector = unit(&r.vector);
    }
    Ok(records)
}

pub fn load_embeddings(path: impl AsRef<std::path::Path>) -> Result<Vec<EmbeddingRecord>> {
    let path = path.as_ref();
    parse_embeddings(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// External tokens recorded under `id`; video fills the image slot when no image exists.
pub fn tokens_for(records: &[EmbeddingRecord], id: &str) -> ExternalTokens {
    let find = |m: Modality| records.iter().find(|r| r.id == id && r.modality == m).map(|r| r.vector.clone());
    ExternalTokens { text: find(Modality::Text), image: find(Modality::Image).or_else(|| find(Modality::Video)) }
}

#[derive(Debug, Clone)]
pub struct PretrainLosses {
    pub rec: Tensor,
    pub sim: Tensor,
    pub total: Tensor,
}

/// Adaptive instance normalization over joints × frames, per channel.
pub fn adain(f: &CanonicalFeature, mu: &Tensor, sigma: &Tensor, eps: f64) -> Result<CanonicalFeature> {
    let (_, _, c) = f.dims();
    if mu.dims() != [c] || sigma.dims() != [c] {
        return Err(Error::Shape(format!("adain over {c} channels with mu {:?}, sigma {:?}", mu.dims(), sigma.dims())));
    }
    let x = f.tensor();
    // shift by a detached sample first so a constant channel centers to exact zeros
    let anchor = x.narrow(0, 0, 1)?.narrow(1, 0, 1)?.detach();
    let d = x.broadcast_sub(&anchor)?;
    let mean = d.mean_keepdim(0)?.mean_keepdim(1)?;
    let centered = d.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(1)?;
    let std = (var + 1e-24)?.sqrt()?;
    let scale = sigma.reshape((1, 1, c))?.broadcast_div(&(std + eps)?)?;
    let out = centered.broadcast_mul(&scale)?.broadcast_add(&mu.reshape((1, 1, c))?)?;
    Ok(CanonicalFeature(out))
}

/// Cosine similarity of two 1-D tensors, clamped to `[-1, 1]`.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = (a * b)?.sum_all()?;
    let na = a.sqr()?.sum_all()?.sqrt()?;
    let nb = b.sqr()?.sum_all()?.sqrt()?;
    Ok(dot.div(&((na * nb)? + 1e-300)?)?.clamp(-1.0, 1.0)?)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Parent list of `s` with the root dropped and indices shifted down by one.
pub fn non_root_parents(s: &Skeleton) -> Vec<Option<usize>> {
    s.parents()[1..].iter().map(|p| p.and_then(|p| p.checked_sub(1))).collect()
}

pub struct StageOneModel {
    config: StageOneConfig,
    skeleton: Skeleton,
    store: ParamStore,
    input: Linear,
    style_query: Tensor,
    encoder: Vec<EncoderLayer>,
    encoder_norm: LayerNorm,
    token: TopologyToken,
    decoder: TopologyShift,
    style_map: Linear,
    recon: Linear,
    style_norm: f64,
}

impl StageOneModel {
    /// Fresh model over `skeleton` (the canonical skeleton, root included).
    pub fn new(config: StageOneConfig, skeleton: Skeleton) -> Result<Self> {
        let store = ParamStore::new(config.seed);
        Self::from_store(config, skeleton, store, 1.0)
    }

    /// Rebuild around an existing parameter store (trainable or frozen).
    pub fn from_store(config: StageOneConfig, skeleton: Skeleton, mut store: ParamStore, style_norm: f64) -> Result<Self> {
        config.validate()?;
        if skeleton.part_map().is_none() {
            return Err(Error::MissingPartMap(skeleton.num_joints()));
        }
        let c = config.channels;
        let n = skeleton.num_joints() - 1;
        let hidden = c * config.ff_multiplier;
        let s = &mut store;
        let input = Linear::new(s, "encoder.input", 6 * n, c)?;
        let style_query = s.get("encoder.style_query", &[1, c], Init::Normal(0.02))?;
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(s, &format!("encoder.layer{i}"), c, config.heads, hidden))
            .collect::<Result<_>>()?;
        let encoder_norm = LayerNorm::new(s, "encoder.norm", c)?;
        let token =
            TopologyToken::new(s, "canonical_token", &non_root_parents(&skeleton), c, config.self_loops, config.gcl_activation)?;
        let decoder = TopologyShift::new(s, "decoder", c, config.heads, hidden, config.decoder_layers, config.attention)?;
        let style_map = Linear::new(s, "style_map", c, 2 * c)?;
        let recon = Linear::new(s, "reconstruct", c, 6)?;
        Ok(Self {
            config,
            skeleton,
            store,
            input,
            style_query,
            encoder,
            encoder_norm,
            token,
            decoder,
            style_map,
            recon,
            style_norm,
        })
    }

    /// Independent copy whose parameters can never receive updates.
    pub fn frozen(&self) -> Result<Self> {
        Self::from_store(self.config.clone(), self.skeleton.clone(), self.store.frozen_copy()?, self.style_norm)
    }

    pub fn config(&self) -> &StageOneConfig {
        &self.config
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

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    /// Number of canonical (non-root) joints.
    pub fn canonical_joints(&self) -> usize {
        self.skeleton.num_joints() - 1
    }

    /// Mean style-token norm seen in training; external tokens are scaled to it.
    pub fn style_norm(&self) -> f64 {
        self.style_norm
    }

    pub fn set_style_norm(&mut self, v: f64) {
        self.style_norm = v;
    }

    /// `(T, N^Ω, 6)` non-root rotations of a canonical clip.
    pub fn clip_tensor(&self, clip: &MotionClip, skeleton: &Skeleton) -> Result<Tensor> {
        if !skeleton.same_topology(&self.skeleton) {
            return Err(Error::Topology(format!(
                "clip skeleton has {} joints; the canonical skeleton has {}",
                skeleton.num_joints(),
                self.skeleton.num_joints()
            )));
        }
        clip.check_skeleton(skeleton)?;
        let full = Tensor::from_vec(clip.rotations_flat(), (clip.frames(), clip.num_joints(), 6), self.store.device())?;
        Ok(full.narrow(1, 1, self.canonical_joints())?)
    }

    pub fn encode_style(&self, clip: &MotionClip, skeleton: &Skeleton) -> Result<(Tensor, Tensor)> {
        self.encode_tensor(&self.clip_tensor(clip, skeleton)?)
    }

    /// `(T, N^Ω, 6)` -> (`f_p (1, C)`, `f_m (T, C)`).
    pub fn encode_tensor(&self, m: &Tensor) -> Result<(Tensor, Tensor)> {
        let (t_len, n, k) = m.dims3()?;
        if n != self.canonical_joints() || k != 6 {
            return Err(Error::Shape(format!("style encoder expects (T, {}, 6), got {:?}", self.canonical_joints(), m.dims())));
        }
        let c = self.channels();
        let x = self.input.forward(&m.reshape((t_len, 6 * n))?)?;
        let x = (x + nn::frame_positions(t_len, c, m.device())?)?;
        let mut h = Tensor::cat(&[self.style_query.clone(), x], 0)?.unsqueeze(0)?;
        for layer in &self.encoder {
            h = layer.forward(&h)?;
        }
        let h = self.encoder_norm.forward(&h)?.squeeze(0)?;
        Ok((h.narrow(0, 0, 1)?, h.narrow(0, 1, t_len)?))
    }

    /// Linear map of the style token; the σ half goes through softplus.
    pub fn embed_style(&self, f_p: &Tensor) -> Result<StyleEmbedding> {
        let c = self.channels();
        if f_p.dims() != [1, c] {
            return Err(Error::Shape(format!("style token must be (1, {c}), got {:?}", f_p.dims())));
        }
        let pre = self.style_map.forward(f_p)?.squeeze(0)?;
        Ok(StyleEmbedding { f_p: f_p.clone(), mu: pre.narrow(0, 0, c)?, sigma: nn::softplus(&pre.narrow(0, c, c)?)? })
    }

    /// The `(μ, σ)` pre-activation, exposed for the linearity check.
    pub fn style_preactivation(&self, f_p: &Tensor) -> Result<Tensor> {
        Ok(self.style_map.forward(f_p)?.squeeze(0)?)
    }

    /// Style token from an external unit vector, scaled to the learned token norm.
    pub fn external_style(&self, vector: &[f64]) -> Result<StyleEmbedding> {
        if vector.len() != self.channels() {
            return Err(Error::Shape(format!("external vector has {} dims, model has {}", vector.len(), self.channels())));
        }
        let v: Vec<f64> = unit(vector).into_iter().map(|x| x * self.style_norm).collect();
        self.embed_style(&Tensor::from_vec(v, (1, self.channels()), self.store.device())?)
    }

    /// Key/value memory `(T, 2, C)`: each frame's content row next to the style token.
    pub fn memory(&self, f_m: &Tensor, f_p: &Tensor) -> Result<Tensor> {
        let (t_len, c) = f_m.dims2()?;
        if f_p.dims() != [1, c] || c != self.channels() {
            return Err(Error::Shape(format!("content {:?} and style {:?} do not match", f_m.dims(), f_p.dims())));
        }
        let style = f_p.broadcast_as((t_len, c))?.contiguous()?;
        Ok(Tensor::stack(&[f_m.clone(), style], 1)?)
    }

    pub fn decode_canonical(&self, f_m: &Tensor, f_p: &Tensor) -> Result<CanonicalFeature> {
        self.decode_with_queries(&self.token.refine()?, &self.memory(f_m, f_p)?)
    }

    /// Decoder pass with explicit queries `(N, C)` and memory `(T, M, C)`.
    pub fn decode_with_queries(&self, queries: &Tensor, memory: &Tensor) -> Result<CanonicalFeature> {
        let out = self.decoder.forward(queries, memory)?;
        Ok(CanonicalFeature(out.transpose(0, 1)?.contiguous()?))
    }

    pub fn adain(&self, f: &CanonicalFeature, style: &StyleEmbedding) -> Result<CanonicalFeature> {
        adain(f, &style.mu, &style.sigma, self.config.adain_eps)
    }

    /// `(N^Ω, T, C)` -> `(T, N^Ω, 6)`.
    pub fn reconstruct(&self, f: &CanonicalFeature) -> Result<Tensor> {
        let x = self.recon.forward(f.tensor())?;
        Ok(x.transpose(0, 1)?.contiguous()?)
    }

    /// Reconstruction as a canonical clip with identity root and zero translation.
    pub fn reconstruct_clip(&self, f: &CanonicalFeature, fps: f64) -> Result<MotionClip> {
        let m = self.reconstruct(f)?;
        let (t_len, n, _) = m.dims3()?;
        let data = m.flatten_all()?.to_vec1::<f64>()?;
        let mut rotations = Vec::with_capacity(t_len * (n + 1));
        for t in 0..t_len {
            rotations.push(Rotation6D::IDENTITY);
            for j in 0..n {
                let o = (t * n + j) * 6;
                rotations.push(Rotation6D(data[o..o + 6].try_into().expect("six values")));
            }
        }
        MotionClip::new(n + 1, rotations, vec![[0.0; 3]; t_len], fps)
    }

    /// Encode, decode, self-stylize and reconstruct; returns `(m̂, f_p)`.
    pub fn autoencode(&self, m: &Tensor) -> Result<(Tensor, Tensor)> {
        let (f_p, f_m) = self.encode_tensor(m)?;
        let style = self.embed_style(&f_p)?;
        let f = self.decode_canonical(&f_m, &f_p)?;
        Ok((self.reconstruct(&self.adain(&f, &style)?)?, f_p))
    }

    /// Reconstruction loss of one clip plus its style token.
    pub fn reconstruction_loss(&self, clip: &MotionClip) -> Result<(Tensor, Tensor)> {
        let dev = self.store.device();
        let (t_len, n_all) = (clip.frames(), clip.num_joints());
        let full = Tensor::from_vec(clip.rotations_flat(), (t_len, n_all, 6), dev)?;
        let m = full.narrow(1, 1, n_all - 1)?;
        let translation = Tensor::from_vec(clip.translation_flat(), (t_len, 3), dev)?;
        let (m_hat, f_p) = self.autoencode(&m)?;

        let root = full.narrow(1, 0, 1)?;
        let gt_pos = kinematics::forward_kinematics(&self.skeleton, &kinematics::rot6d_to_matrix(&full)?, &translation)?;
        let rec_full = Tensor::cat(&[root, m_hat.clone()], 1)?;
        let pos = kinematics::forward_kinematics(&self.skeleton, &kinematics::rot6d_to_matrix(&rec_full)?, &translation)?;
        let gt_vel = kinematics::velocities(&gt_pos, clip.fps())?;
        let vel = kinematics::velocities(&pos, clip.fps())?;
        let rec = ((mse(&m, &m_hat)? + mse(&gt_pos, &pos)?)? + mse(&gt_vel, &vel)?)?;
        Ok((rec, f_p))
    }

    /// Batch-averaged `L_rec`, `L_sim` and `L_total`.
    pub fn pretrain_losses(&self, batch: &[MotionClip], tokens: &[ExternalTokens]) -> Result<PretrainLosses> {
        if batch.is_empty() || (!tokens.is_empty() && tokens.len() != batch.len()) {
            return Err(Error::Shape(format!("{} clips with {} token sets", batch.len(), tokens.len())));
        }
        let dev = self.store.device().clone();
        let mut rec_sum = Tensor::new(0.0f64, &dev)?;
        let mut sim_sum = Tensor::new(0.0f64, &dev)?;
        for (i, clip) in batch.iter().enumerate() {
            clip.check_skeleton(&self.skeleton)?;
            let (rec, f_p) = self.reconstruction_loss(clip)?;
            rec_sum = (rec_sum + rec)?;
            let ext = tokens.get(i).cloned().unwrap_or_default();
            sim_sum = (sim_sum + self.similarity_loss(&f_p, &ext)?)?;
        }
        let k = batch.len() as f64;
        let rec = (rec_sum / k)?;
        let sim = (sim_sum / k)?;
        let total = (&rec + (&sim * self.config.nu_sim)?)?;
        Ok(PretrainLosses { rec, sim, total })
    }

    /// `Σ (1 − cos)` over the available external tokens; absent ones are skipped.
    pub fn similarity_loss(&self, f_p: &Tensor, ext: &ExternalTokens) -> Result<Tensor> {
        let f = f_p.flatten_all()?;
        let mut loss = Tensor::new(0.0f64, f.device())?;
        for (name, token) in [("text", &ext.text), ("image", &ext.image)] {
            match token {
                Some(v) => {
                    if v.len() != f.elem_count() {
                        return Err(Error::Shape(format!("{name} token has {} dims, style token {}", v.len(), f.elem_count())));
                    }
                    let u = Tensor::from_vec(unit(v), v.len(), f.device())?;
                    loss = (loss + (cosine(&u, &f)?.neg()? + 1.0)?)?;
                }
                None => log::debug!("no {name} token for clip; similarity term skipped"),
            }
        }
        Ok(loss)
    }

    /// Mean `‖f_p‖` over `clips`.
    pub fn mean_style_norm(&self, clips: &[MotionClip]) -> Result<f64> {
        let mut sum = 0.0;
        for clip in clips {
            let (f_p, _) = self.encode_style(clip, &self.skeleton)?;
            sum += scalar(&f_p.sqr()?.sum_all()?.sqrt()?)?;
        }
        Ok(sum / clips.len().max(1) as f64)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct StepLosses {
    pub step: usize,
    pub rec: f64,
    pub sim: f64,
    pub total: f64,
}

/// Adam over every stage-one parameter; returns per-step losses.
pub fn pretrain(
    model: &mut StageOneModel,
    clips: &[MotionClip],
    tokens: &[ExternalTokens],
    steps: usize,
    learning_rate: f64,
) -> Result<Vec<StepLosses>> {
    if !model.store.is_trainable() {
        return Err(Error::Config("cannot train a frozen stage-one model".into()));
    }
    if tokens.iter().all(|t| t.text.is_none() && t.image.is_none()) {
        log::warn!("no external style tokens; training on reconstruction only");
    }
    let params = ParamsAdamW { lr: learning_rate, weight_decay: 0.0, ..Default::default() };
    let mut opt = AdamW::new(model.store.vars(), params)?;
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let losses = model.pretrain_losses(clips, tokens)?;
        opt.backward_step(&losses.total)?;
        let rec = scalar(&losses.rec)?;
        if !rec.is_finite() {
            return Err(Error::Numerical(format!("reconstruction loss diverged at step {step}")));
        }
        let entry = StepLosses { step, rec, sim: scalar(&losses.sim)?, total: scalar(&losses.total)? };
        if step % 100 == 0 || step + 1 == steps {
            log::info!("pretrain step {step}: total {:.6} rec {:.6} sim {:.6}", entry.total, entry.rec, entry.sim);
        }
        history.push(entry);
    }
    let norm = model.mean_style_norm(clips)?;
    model.set_style_norm(norm);
    Ok(history)
}

/// Per-channel `(mean, std)` of an `(N, T, C)` tensor over its first two axes.
pub fn channel_stats(f: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let mean = f.mean_keepdim(0)?.mean_keepdim(1)?;
    let var = f.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)?.mean_keepdim(1)?;
    Ok((mean.flatten_all()?.to_vec1()?, var.sqrt()?.flatten_all()?.to_vec1()?))
}

/// Last-axis L2 norms of a `(.., C)` tensor.
pub fn row_norms(t: &Tensor) -> Result<Tensor> {
    Ok(t.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?)
}
