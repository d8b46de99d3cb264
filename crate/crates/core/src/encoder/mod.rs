//! Toy L-block towers standing in for the image and text encoders.
//!
//! Block `i` computes `hᵢ = act(Wᵢ·hᵢ₋₁)` with `Wᵢ = W₀ + offset + γ·B·A`;
//! block 0 reads the `d_in` input, the rest are `d_hidden × d_hidden`. A
//! frozen projection maps the last hidden state to `d_embed` and the result
//! is L2-normalized. Only blocks at or above `lora_start` carry adapters.

mod describe;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::lora::{compose_weight, init_lora, DenseDelta, LayerWeights, LoraDelta};
use crate::numerics::{orthonormal_rows, Matrix, Scalar, SimRng, Vector};

pub use describe::{make_descriptions, make_descriptions_around, select_variant, ClassDescription, DescStyle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Self::Tanh => x.tanh(),
            Self::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Self::Tanh => T::one() - y * y,
            Self::Identity => T::one(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_embed: usize,
    pub activation: Activation,
    pub lora_start: usize,
    pub rank: usize,
    pub gamma: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_blocks: 12,
            d_in: 16,
            d_hidden: 32,
            d_embed: 16,
            activation: Activation::Tanh,
            lora_start: 2,
            rank: 4,
            gamma: 0.25,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.d_in == 0 || self.d_hidden == 0 || self.d_embed == 0 {
            return Err(Error::Config("encoder dimensions and depth must be positive".into()));
        }
        if self.lora_start > self.num_blocks {
            return Err(Error::Config(format!(
                "lora_start {} exceeds num_blocks {}",
                self.lora_start, self.num_blocks
            )));
        }
        if self.d_embed > self.d_hidden {
            return Err(Error::Config("d_embed must not exceed d_hidden".into()));
        }
        if self.lora_start < self.num_blocks {
            let min_dim = if self.lora_start == 0 { self.d_in.min(self.d_hidden) } else { self.d_hidden };
            if self.rank == 0 || self.rank > min_dim {
                return Err(Error::Config(format!("rank {} must lie in 1..={min_dim}", self.rank)));
            }
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config("gamma must be positive".into()));
        }
        Ok(())
    }

    /// Input width of block `i`.
    pub fn block_in(&self, i: usize) -> usize {
        if i == 0 {
            self.d_in
        } else {
            self.d_hidden
        }
    }

    pub fn adapted_blocks(&self) -> std::ops::Range<usize> {
        self.lora_start..self.num_blocks
    }

    pub fn num_adapted(&self) -> usize {
        self.num_blocks - self.lora_start
    }

    /// Trainable scalars across all adapters of this tower.
    pub fn trainable_params(&self) -> usize {
        self.adapted_blocks().map(|i| crate::lora::lora_param_count(self.d_hidden, self.block_in(i), self.rank)).sum()
    }

    /// Scalars in the dense effective deltas of all adapted blocks.
    pub fn dense_delta_params(&self) -> usize {
        self.adapted_blocks().map(|i| self.d_hidden * self.block_in(i)).sum()
    }
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
pub struct EncoderState<T> {
    config: EncoderConfig,
    blocks: Vec<LayerWeights<T>>,
    projection: Matrix<T>,
    /// Changes whenever a parameter changes; ties forward caches to the
    /// exact parameter values they were computed with.
    stamp: u64,
}

impl<T: Scalar> EncoderState<T> {
    pub fn from_parts(config: EncoderConfig, blocks: Vec<LayerWeights<T>>, projection: Matrix<T>) -> Result<Self> {
        config.validate()?;
        if blocks.len() != config.num_blocks {
            return shape_err(format!("{} blocks for depth {}", blocks.len(), config.num_blocks));
        }
        for (i, b) in blocks.iter().enumerate() {
            if b.shape() != (config.d_hidden, config.block_in(i)) {
                return shape_err(format!("block {i} has shape {:?}", b.shape()));
            }
            if b.init_offset.shape() != b.shape() {
                return shape_err(format!("block {i} offset has shape {:?}", b.init_offset.shape()));
            }
            if i < config.lora_start && b.lora.is_some() {
                return Err(Error::Contract(format!("block {i} is below lora_start but has an adapter")));
            }
        }
        if projection.shape() != (config.d_embed, config.d_hidden) {
            return shape_err(format!("projection has shape {:?}", projection.shape()));
        }
        Ok(Self { config, blocks, projection, stamp: fresh_stamp() })
    }

    /// Random frozen backbone with orthonormal block maps scaled by `gain`
    /// and an orthonormal-row projection; no adapters attached.
    pub fn random_backbone(config: EncoderConfig, gain: f64, rng: &SimRng) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for i in 0..config.num_blocks {
            let mut r = rng.split_indexed("block", i);
            let (rows, cols) = (config.d_hidden, config.block_in(i));
            // orthonormalize along the longer side so the map is an isometry
            // on its domain or onto its range
            let w0 = if rows >= cols {
                let g = Matrix::from_fn(cols, rows, |_, _| T::of(r.standard_normal()));
                orthonormal_rows(&g)?.transpose()
            } else {
                let g = Matrix::from_fn(rows, cols, |_, _| T::of(r.standard_normal()));
                orthonormal_rows(&g)?
            };
            blocks.push(LayerWeights::frozen(w0.scaled(T::of(gain))));
        }
        let mut r = rng.split("projection");
        let p = Matrix::from_fn(config.d_embed, config.d_hidden, |_, _| T::of(r.standard_normal()));
        let projection = orthonormal_rows(&p)?;
        Self::from_parts(config, blocks, projection)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[LayerWeights<T>] {
        &self.blocks
    }

    pub fn projection(&self) -> &Matrix<T> {
        &self.projection
    }

    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    /// Attaches fresh zero-`B` adapters to every block at or above `lora_start`.
    pub fn reset_adapters(&mut self, rng: &SimRng) -> Result<()> {
        let cfg = self.config;
        for i in cfg.adapted_blocks() {
            let mut r = rng.split_indexed("adapter", i);
            let (d1, d2) = self.blocks[i].shape();
            self.blocks[i].lora = Some(init_lora(d1, d2, cfg.rank, T::of(cfg.gamma), &mut r)?);
        }
        self.stamp = fresh_stamp();
        Ok(())
    }

    /// Installs per-adapted-block frozen offsets (ordered from `lora_start`).
    pub fn set_offsets(&mut self, offsets: &[DenseDelta<T>]) -> Result<()> {
        if offsets.len() != self.config.num_adapted() {
            return shape_err(format!("{} offsets for {} adapted blocks", offsets.len(), self.config.num_adapted()));
        }
        for (i, off) in self.config.adapted_blocks().zip(offsets) {
            if off.shape() != self.blocks[i].shape() {
                return shape_err(format!("offset for block {i} has shape {:?}", off.shape()));
            }
        }
        for (i, off) in self.config.adapted_blocks().zip(offsets) {
            self.blocks[i].init_offset = off.clone();
        }
        self.stamp = fresh_stamp();
        Ok(())
    }

    pub fn adapters(&self) -> Vec<Option<&LoraDelta<T>>> {
        self.config.adapted_blocks().map(|i| self.blocks[i].lora.as_ref()).collect()
    }

    /// Replaces adapters on the adapted blocks (ordered from `lora_start`).
    pub fn set_adapters(&mut self, adapters: Vec<LoraDelta<T>>) -> Result<()> {
        if adapters.len() != self.config.num_adapted() {
            return shape_err("one adapter per adapted block required");
        }
        for (i, a) in self.config.adapted_blocks().zip(&adapters) {
            if (a.d1(), a.d2()) != self.blocks[i].shape() {
                return shape_err(format!("adapter for block {i} is {}x{}", a.d1(), a.d2()));
            }
        }
        for (i, a) in self.config.adapted_blocks().zip(adapters) {
            self.blocks[i].lora = Some(a);
        }
        self.stamp = fresh_stamp();
        Ok(())
    }

    /// Mutable handles to every trainable matrix, `[A, B]` per adapted
    /// block in ascending order. Invalidates outstanding forward caches.
    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix<T>> {
        self.stamp = fresh_stamp();
        let start = self.config.lora_start;
        self.blocks[start..]
            .iter_mut()
            .filter_map(|b| b.lora.as_mut())
            .flat_map(|l| {
                let (a, b) = l.factors_mut();
                [a, b]
            })
            .collect()
    }

    /// Cumulative effective delta of every adapted block.
    pub fn cumulative_deltas(&self) -> Result<Vec<DenseDelta<T>>> {
        self.config.adapted_blocks().map(|i| self.blocks[i].cumulative_delta()).collect()
    }

    pub fn compose(&self) -> Result<ComposedEncoder<'_, T>> {
        let weights = self.blocks.iter().map(compose_weight).collect::<Result<Vec<_>>>()?;
        Ok(ComposedEncoder { state: self, weights })
    }

    pub fn forward(&self, x: &Vector<T>) -> Result<(Vector<T>, ForwardCache<T>)> {
        self.compose()?.forward(x)
    }

    pub fn embed(&self, x: &Vector<T>) -> Result<Vector<T>> {
        Ok(self.forward(x)?.0)
    }

    pub fn backward(&self, cache: &ForwardCache<T>, grad_embedding: &Vector<T>) -> Result<EncoderGrads<T>> {
        let composed = self.compose()?;
        let mut acc = composed.grad_accumulator();
        composed.accumulate(cache, grad_embedding, &mut acc)?;
        composed.finish(acc)
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    stamp: u64,
    /// Input to each block: `x, h₀, …, h_{L−2}`.
    inputs: Vec<Vector<T>>,
    pre: Vec<Vector<T>>,
    last_hidden: Vector<T>,
    raw_embedding: Vector<T>,
    embedding: Vector<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn embedding(&self) -> &Vector<T> {
        &self.embedding
    }

    pub fn raw_embedding(&self) -> &Vector<T> {
        &self.raw_embedding
    }

    pub fn pre_activations(&self) -> &[Vector<T>] {
        &self.pre
    }

    pub fn last_hidden(&self) -> &Vector<T> {
        &self.last_hidden
    }
}

/// Gradient of one adapter pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrad<T> {
    pub a: Matrix<T>,
    pub b: Matrix<T>,
}

/// Adapter gradients, one entry per adapted block from `lora_start`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads<T> {
    pub blocks: Vec<LoraGrad<T>>,
}

impl<T: Scalar> EncoderGrads<T> {
    /// Flattened `[A, B]` per block, matching [`EncoderState::trainable_mut`].
    pub fn flat(&self) -> Vec<&Matrix<T>> {
        self.blocks.iter().flat_map(|g| [&g.a, &g.b]).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.iter().all(|g| g.a.is_zero() && g.b.is_zero())
    }
}

/// Accumulated `∂L/∂Wᵢ` for every adapted block.
#[derive(Debug, Clone)]
pub struct WeightGrads<T> {
    stamp: u64,
    per_block: Vec<Matrix<T>>,
}

/// Encoder with every block weight composed once, for batched passes.
pub struct ComposedEncoder<'a, T> {
    state: &'a EncoderState<T>,
    weights: Vec<Matrix<T>>,
}

impl<'a, T: Scalar> ComposedEncoder<'a, T> {
    pub fn weights(&self) -> &[Matrix<T>] {
        &self.weights
    }

    pub fn forward(&self, x: &Vector<T>) -> Result<(Vector<T>, ForwardCache<T>)> {
        let cfg = &self.state.config;
        if x.dim() != cfg.d_in {
            return shape_err(format!("input has dim {}, encoder expects {}", x.dim(), cfg.d_in));
        }
        let mut inputs = Vec::with_capacity(cfg.num_blocks);
        let mut pre = Vec::with_capacity(cfg.num_blocks);
        let mut h = x.clone();
        for w in &self.weights {
            let p = w.matvec(h.as_slice())?;
            let next = p.map(|v| cfg.activation.apply(v));
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(p);
        }
        let raw = self.state.projection.matvec(h.as_slice())?;
        let embedding = crate::numerics::l2_normalize(&raw)?;
        let cache = ForwardCache {
            stamp: self.state.stamp,
            inputs,
            pre,
            last_hidden: h,
            raw_embedding: raw,
            embedding: embedding.clone(),
        };
        Ok((embedding, cache))
    }

    pub fn embed(&self, x: &Vector<T>) -> Result<Vector<T>> {
        Ok(self.forward(x)?.0)
    }

    pub fn grad_accumulator(&self) -> WeightGrads<T> {
        let cfg = &self.state.config;
        WeightGrads {
            stamp: self.state.stamp,
            per_block: cfg.adapted_blocks().map(|i| Matrix::zeros(cfg.d_hidden, cfg.block_in(i))).collect(),
        }
    }

    /// Adds `∂L/∂Wᵢ` for one sample, given `∂L/∂embedding`.
    pub fn accumulate(
        &self,
        cache: &ForwardCache<T>,
        grad_embedding: &Vector<T>,
        acc: &mut WeightGrads<T>,
    ) -> Result<()> {
        let state = self.state;
        let cfg = &state.config;
        if cache.stamp != state.stamp || acc.stamp != state.stamp {
            return Err(Error::Contract("forward cache does not match the current encoder parameters".into()));
        }
        if grad_embedding.dim() != cfg.d_embed {
            return shape_err("embedding gradient has the wrong dimension");
        }
        if cfg.lora_start == cfg.num_blocks {
            return Ok(());
        }
        // through e = z / ‖z‖
        let e = &cache.embedding;
        let norm = cache.raw_embedding.norm();
        let mut dz = grad_embedding.clone();
        dz.axpy(-e.dot(grad_embedding), e);
        let dz = dz.scaled(T::one() / norm);

        let mut dh = state.projection.tr_matvec(dz.as_slice())?;
        for i in (cfg.lora_start..cfg.num_blocks).rev() {
            let out = if i + 1 < cfg.num_blocks { &cache.inputs[i + 1] } else { &cache.last_hidden };
            let mut dpre = dh;
            for (d, &y) in dpre.as_mut_slice().iter_mut().zip(out.iter()) {
                *d *= cfg.activation.derivative_from_output(y);
            }
            let g = &mut acc.per_block[i - cfg.lora_start];
            let input = cache.inputs[i].as_slice();
            let cols = g.cols();
            for (r, &dr) in dpre.iter().enumerate() {
                if dr == T::zero() {
                    continue;
                }
                let row = &mut g.as_mut_slice()[r * cols..(r + 1) * cols];
                for (gv, &xv) in row.iter_mut().zip(input) {
                    *gv += dr * xv;
                }
            }
            if i == cfg.lora_start {
                break;
            }
            dh = self.weights[i].tr_matvec(dpre.as_slice())?;
        }
        Ok(())
    }

    /// Maps accumulated weight gradients onto the adapter factors:
    /// `∂L/∂B = γ·G·Aᵀ`, `∂L/∂A = γ·Bᵀ·G`.
    pub fn finish(&self, acc: WeightGrads<T>) -> Result<EncoderGrads<T>> {
        let state = self.state;
        if acc.stamp != state.stamp {
            return Err(Error::Contract("gradient accumulator is stale".into()));
        }
        let mut blocks = Vec::with_capacity(acc.per_block.len());
        for (i, g) in state.config.adapted_blocks().zip(acc.per_block) {
            let lora = state.blocks[i]
                .lora
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("block {i} has no adapter to differentiate")))?;
            let gamma = lora.gamma();
            let db = g.matmul(&lora.a().transpose())?.scaled(gamma);
            let da = lora.b().transpose().matmul(&g)?.scaled(gamma);
            blocks.push(LoraGrad { a: da, b: db });
        }
        Ok(EncoderGrads { blocks })
    }
}
