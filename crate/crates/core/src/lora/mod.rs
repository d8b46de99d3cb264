//! Low-rank adapter algebra.
//!
//! An adapted weight is `W₀ + offset + γ·B·A`: the frozen backbone `W₀`, a
//! dense offset inherited from the previous aggregation round, and a fresh
//! trainable rank-`r` pair. Aggregation always happens on dense effective
//! deltas because a weighted sum of rank-`r` products is not rank `r`.

mod codec;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::numerics::{Matrix, Scalar, SimRng, Vector};

pub use codec::{
    decode_dense, decode_lora, decode_record, encode_dense, encode_lora, encode_record, FaldRecord, FORMAT_VERSION,
    MAGIC,
};

/// Trainable pair `(B, A)` with scale `γ`; `A` is `r × d₂`, `B` is `d₁ × r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraDelta<T> {
    a: Matrix<T>,
    b: Matrix<T>,
    gamma: T,
}

impl<T: Scalar> LoraDelta<T> {
    pub fn new(a: Matrix<T>, b: Matrix<T>, gamma: T) -> Result<Self> {
        let r = a.rows();
        if b.cols() != r {
            return shape_err(format!("A has {r} rows but B has {} cols", b.cols()));
        }
        if r > b.rows().min(a.cols()) {
            return param_err(format!("rank {r} exceeds min({}, {})", b.rows(), a.cols()));
        }
        if !(gamma > T::zero()) || !gamma.is_finite() {
            return param_err(format!("gamma must be positive and finite, got {gamma}"));
        }
        Ok(Self { a, b, gamma })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// Output dimension `d₁`.
    pub fn d1(&self) -> usize {
        self.b.rows()
    }

    /// Input dimension `d₂`.
    pub fn d2(&self) -> usize {
        self.a.cols()
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn b(&self) -> &Matrix<T> {
        &self.b
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn factors_mut(&mut self) -> (&mut Matrix<T>, &mut Matrix<T>) {
        (&mut self.a, &mut self.b)
    }

    pub fn param_count(&self) -> usize {
        lora_param_count(self.d1(), self.d2(), self.rank())
    }
}

/// Effective dense weight change `ΔW` (`d₁ × d₂`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseDelta<T> {
    w: Matrix<T>,
}

impl<T: Scalar> DenseDelta<T> {
    pub fn new(w: Matrix<T>) -> Self {
        Self { w }
    }

    pub fn zeros(d1: usize, d2: usize) -> Self {
        Self { w: Matrix::zeros(d1, d2) }
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.w
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.w
    }

    pub fn shape(&self) -> (usize, usize) {
        self.w.shape()
    }

    pub fn scalar_count(&self) -> usize {
        self.w.rows() * self.w.cols()
    }
}

/// One adaptable layer: frozen backbone, frozen per-round offset and an
/// optional trainable adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights<T> {
    pub w0: Matrix<T>,
    pub init_offset: DenseDelta<T>,
    pub lora: Option<LoraDelta<T>>,
}

impl<T: Scalar> LayerWeights<T> {
    /// Frozen layer with a zero offset and no adapter.
    pub fn frozen(w0: Matrix<T>) -> Self {
        let (d1, d2) = w0.shape();
        Self { w0, init_offset: DenseDelta::zeros(d1, d2), lora: None }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.w0.shape()
    }

    /// Cumulative effective change carried by this layer: `offset + γ·B·A`.
    pub fn cumulative_delta(&self) -> Result<DenseDelta<T>> {
        match &self.lora {
            None => Ok(self.init_offset.clone()),
            Some(l) => Ok(DenseDelta::new(self.init_offset.matrix().add(effective_delta(l).matrix())?)),
        }
    }
}

/// Fresh adapter: `A` Kaiming-uniform with fan-in `d₂` (bound `√(6/d₂)`), `B = 0`.
pub fn init_lora<T: Scalar>(d1: usize, d2: usize, r: usize, gamma: T, rng: &mut SimRng) -> Result<LoraDelta<T>> {
    if r == 0 || r > d1.min(d2) {
        return param_err(format!("rank {r} must lie in 1..=min({d1}, {d2})"));
    }
    let bound = (6.0 / d2 as f64).sqrt();
    let a = Matrix::from_fn(r, d2, |_, _| T::of(rng.uniform_range(-bound, bound)));
    LoraDelta::new(a, Matrix::zeros(d1, r), gamma)
}

/// `γ·B·A`
pub fn effective_delta<T: Scalar>(delta: &LoraDelta<T>) -> DenseDelta<T> {
    let ba = delta.b.matmul(&delta.a).expect("factor shapes validated at construction");
    DenseDelta::new(ba.scaled(delta.gamma))
}

/// `W₀ + offset + γ·B·A` (the adapter term is skipped when absent).
pub fn compose_weight<T: Scalar>(layer: &LayerWeights<T>) -> Result<Matrix<T>> {
    let base = layer.w0.add(layer.init_offset.matrix())?;
    match &layer.lora {
        None => Ok(base),
        Some(l) => {
            if (l.d1(), l.d2()) != layer.w0.shape() {
                return shape_err(format!(
                    "adapter is {}x{} but layer is {}x{}",
                    l.d1(),
                    l.d2(),
                    layer.w0.rows(),
                    layer.w0.cols()
                ));
            }
            base.add(effective_delta(l).matrix())
        }
    }
}

/// `Σⱼ coeffⱼ·ΔWⱼ`
pub fn linear_combine<T: Scalar>(deltas: &[&DenseDelta<T>], coeffs: &Vector<T>) -> Result<DenseDelta<T>> {
    if deltas.is_empty() || deltas.len() != coeffs.dim() {
        return shape_err(format!("{} deltas but {} coefficients", deltas.len(), coeffs.dim()));
    }
    let (d1, d2) = deltas[0].shape();
    let mut out = Matrix::zeros(d1, d2);
    for (d, &c) in deltas.iter().zip(coeffs.iter()) {
        out.axpy(c, d.matrix())?;
    }
    Ok(DenseDelta::new(out))
}

/// Combines the `A` and `B` factors separately and multiplies the results.
///
/// This is biased: `(Σαⱼ Bⱼ)(Σαⱼ Aⱼ) ≠ Σαⱼ BⱼAⱼ` in general. It exists to
/// compare against the exact dense combination.
pub fn factored_average<T: Scalar>(deltas: &[&LoraDelta<T>], coeffs: &Vector<T>) -> Result<LoraDelta<T>> {
    if deltas.is_empty() || deltas.len() != coeffs.dim() {
        return shape_err("factored average needs one coefficient per delta");
    }
    let first = deltas[0];
    let mut a = Matrix::zeros(first.a.rows(), first.a.cols());
    let mut b = Matrix::zeros(first.b.rows(), first.b.cols());
    for (d, &c) in deltas.iter().zip(coeffs.iter()) {
        if d.gamma != first.gamma {
            return param_err("factored average requires a shared gamma");
        }
        a.axpy(c, &d.a)?;
        b.axpy(c, &d.b)?;
    }
    LoraDelta::new(a, b, first.gamma)
}

/// Trainable scalars in one adapted `d₁ × d₂` matrix: `r·(d₁ + d₂)`.
pub fn lora_param_count(d1: usize, d2: usize, r: usize) -> usize {
    r * (d1 + d2)
}

/// Trainable scalars in a stack of `num_layers` square `d × d` layers
/// adapted from `lora_start` upward, one matrix per layer.
pub fn stack_param_count(d: usize, r: usize, num_layers: usize, lora_start: usize) -> usize {
    num_layers.saturating_sub(lora_start) * lora_param_count(d, d, r)
}
