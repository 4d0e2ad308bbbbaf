//! Topology-encoded tokens and the cross-attention shift between joint sets.
//!
//! A token is a learnable `N×C` matrix, one row per joint, refined by a
//! single graph convolution `Ã τ W` over the skeleton's normalized adjacency.
//! The refined rows then act as queries in a transformer decoder whose keys
//! and values are the per-frame features of the source space, so the output
//! carries one feature row per destination joint.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, DecoderLayer, Init, LayerNorm, ParamStore};
use crate::skeleton::{build_normalized_adjacency, Skeleton};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScope {
    /// Frame `t` queries attend only over the source tokens of frame `t`.
    #[default]
    PerFrame,
    /// Every frame attends over all source tokens of the sequence; queries
    /// get a frame position encoding so frames stay distinguishable.
    FullSequence,
}

#[derive(Debug, Clone)]
pub struct TopologyToken {
    tau: Tensor,
    weight: Tensor,
    adjacency: Tensor,
    activation: bool,
}

impl TopologyToken {
    /// Token over an explicit parent list (roots may repeat, e.g. a skeleton
    /// with its root removed).
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        parents: &[Option<usize>],
        channels: usize,
        self_loops: bool,
        activation: bool,
    ) -> Result<Self> {
        let n = parents.len();
        let adj = build_normalized_adjacency(parents, self_loops)?;
        let adjacency = Tensor::from_vec(adj.transpose().as_slice().to_vec(), (n, n), store.device())?;
        let tau = store.get(&nn::join(prefix, "tau"), &[n, channels], Init::Normal(0.02))?;
        // identity start: refinement begins as pure neighborhood mixing
        let weight = store.get(&nn::join(prefix, "gcl_weight"), &[channels, channels], Init::Eye)?;
        Ok(Self { tau, weight, adjacency, activation })
    }

    pub fn for_skeleton(
        store: &mut ParamStore,
        prefix: &str,
        skeleton: &Skeleton,
        channels: usize,
        self_loops: bool,
        activation: bool,
    ) -> Result<Self> {
        Self::new(store, prefix, skeleton.parents(), channels, self_loops, activation)
    }

    /// Assemble from explicit tensors: `tau (N, C)`, `weight (C, C)`, `adjacency (N, N)`.
    pub fn from_parts(tau: Tensor, weight: Tensor, adjacency: Tensor) -> Result<Self> {
        let (n, c) = tau.dims2()?;
        if weight.dims2()? != (c, c) || adjacency.dims2()? != (n, n) {
            return Err(Error::Shape(format!(
                "token {:?}, weight {:?}, adjacency {:?}",
                tau.dims(),
                weight.dims(),
                adjacency.dims()
            )));
        }
        Ok(Self { tau, weight, adjacency, activation: false })
    }

    pub fn num_joints(&self) -> usize {
        self.tau.dims()[0]
    }

    pub fn tau(&self) -> &Tensor {
        &self.tau
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    /// `Ã τ W`, optionally followed by GELU.
    pub fn refine(&self) -> Result<Tensor> {
        let out = self.adjacency.matmul(&self.tau)?.matmul(&self.weight)?;
        Ok(if self.activation { out.gelu()? } else { out })
    }
}

/// Transformer decoder that re-expresses a feature under a destination token.
#[derive(Debug, Clone)]
pub struct TopologyShift {
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    scope: AttentionScope,
    channels: usize,
}

impl TopologyShift {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        heads: usize,
        hidden: usize,
        layers: usize,
        scope: AttentionScope,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|i| DecoderLayer::new(store, &nn::join(prefix, &format!("layer{i}")), channels, heads, hidden))
            .collect::<Result<_>>()?;
        Ok(Self { layers, norm: LayerNorm::new(store, &nn::join(prefix, "norm"), channels)?, scope, channels })
    }

    pub fn scope(&self) -> AttentionScope {
        self.scope
    }

    /// `queries (N, C)` against `memory (T, M, C)`, giving `(T, N, C)`.
    pub fn forward(&self, queries: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let (n, c) = queries.dims2()?;
        let (t_len, m, cm) = memory.dims3()?;
        if c != self.channels || cm != self.channels {
            return Err(Error::Shape(format!(
                "shift expects {} channels, got queries {:?} and memory {:?}",
                self.channels,
                queries.dims(),
                memory.dims()
            )));
        }
        let mut q = queries.unsqueeze(0)?.broadcast_as((t_len, n, c))?.contiguous()?;
        let memory = match self.scope {
            AttentionScope::PerFrame => memory.clone(),
            AttentionScope::FullSequence => {
                let pos = nn::frame_positions(t_len, c, queries.device())?.unsqueeze(1)?;
                q = q.broadcast_add(&pos)?;
                memory.reshape((1, t_len * m, c))?.broadcast_as((t_len, t_len * m, c))?.contiguous()?
            }
        };
        for layer in &self.layers {
            q = layer.forward(&q, &memory)?;
        }
        self.norm.forward(&q)
    }

    /// Shift `f_src` (`(N_src, T, C)` or `(T, C)`) into the space of `dst`,
    /// returning `(N_dst, T, C)`.
    pub fn shift(&self, f_src: &Tensor, dst: &TopologyToken) -> Result<Tensor> {
        let memory = match f_src.rank() {
            2 => f_src.unsqueeze(1)?,
            3 => f_src.transpose(0, 1)?.contiguous()?,
            r => return Err(Error::Shape(format!("source feature must be rank 2 or 3, got {r}"))),
        };
        let out = self.forward(&dst.refine()?, &memory)?;
        Ok(out.transpose(0, 1)?.contiguous()?)
    }
}
