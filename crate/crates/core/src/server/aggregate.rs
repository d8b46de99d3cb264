use std::collections::BTreeMap;

use crate::error::{param_err, shape_err, Result};
use crate::lora::{linear_combine, DenseDelta};
use crate::numerics::{masked_softmax, Matrix, Scalar, Similarity, Vector};

/// Class id → prototype.
pub type Prototypes<T> = BTreeMap<usize, Vector<T>>;

/// `d_{kj}^c = Σ_{c′} sim(u_{k,c}, u_{j,c′})` for every class `c` that `k`
/// has a prototype for.
pub fn relational_attention<T: Scalar>(
    protos_k: &Prototypes<T>,
    protos_j: &Prototypes<T>,
    sim: Similarity,
) -> Result<BTreeMap<usize, T>> {
    protos_k
        .iter()
        .map(|(&c, u)| {
            let mut d = T::zero();
            for v in protos_j.values() {
                d += sim.score(u, v)?;
            }
            Ok((c, d))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix<T> {
    /// Row `k` weights every client's delta in client `k`'s aggregate.
    pub alpha: Matrix<T>,
    /// Pre-softmax `Σ_c (N_{k,c}/N_k)·d_{kj}^c`.
    pub raw: Matrix<T>,
    /// `d_raw[k][j]` = per-class attention factors of `k` against `j`.
    pub d_raw: Vec<Vec<BTreeMap<usize, T>>>,
}

/// Influence of every client on every other: class-share-weighted
/// attention, row-normalized by a softmax that masks the diagonal when
/// `ex_query` is set.
pub fn influence_coefficients<T: Scalar>(
    protos: &[Prototypes<T>],
    counts: &[Vec<usize>],
    ex_query: bool,
    sim: Similarity,
) -> Result<CoefficientMatrix<T>> {
    let k = protos.len();
    if counts.len() != k {
        return shape_err(format!("{k} prototype sets but {} count rows", counts.len()));
    }
    if k == 0 {
        return param_err("no clients to aggregate");
    }
    let mut raw = Matrix::zeros(k, k);
    let mut d_raw = Vec::with_capacity(k);
    for a in 0..k {
        let n_a: usize = counts[a].iter().sum();
        let mut row = Vec::with_capacity(k);
        for b in 0..k {
            let d = relational_attention(&protos[a], &protos[b], sim)?;
            if n_a > 0 {
                let mut s = T::zero();
                for (&c, &dc) in &d {
                    let n_ac = counts[a].get(c).copied().unwrap_or(0);
                    s += T::of(n_ac as f64 / n_a as f64) * dc;
                }
                raw.set(a, b, s);
            }
            row.push(d);
        }
        d_raw.push(row);
    }
    let mut alpha = Matrix::zeros(k, k);
    for a in 0..k {
        let mask: &[usize] = if ex_query { &[a] } else { &[] };
        let p = masked_softmax(&Vector::from_vec(raw.row(a).to_vec()), mask)?;
        for b in 0..k {
            alpha.set(a, b, p[b]);
        }
    }
    Ok(CoefficientMatrix { alpha, raw, d_raw })
}

fn check_stacks<T: Scalar>(deltas: &[Vec<DenseDelta<T>>]) -> Result<usize> {
    let first = deltas.first().ok_or_else(|| crate::Error::Shape("no delta stacks".into()))?;
    for (j, d) in deltas.iter().enumerate() {
        if d.len() != first.len() {
            return shape_err(format!("client {j} uploads {} layers, expected {}", d.len(), first.len()));
        }
        for (i, (a, b)) in d.iter().zip(first).enumerate() {
            if a.shape() != b.shape() {
                return shape_err(format!("client {j} layer {i} has shape {:?}", a.shape()));
            }
        }
    }
    Ok(first.len())
}

/// Layerwise `Σ_j row_j·ΔW_j`.
pub fn query_aggregate<T: Scalar>(row: &Vector<T>, deltas: &[Vec<DenseDelta<T>>]) -> Result<Vec<DenseDelta<T>>> {
    let layers = check_stacks(deltas)?;
    if row.dim() != deltas.len() {
        return shape_err(format!("{} coefficients for {} clients", row.dim(), deltas.len()));
    }
    (0..layers)
        .map(|i| {
            let layer: Vec<&DenseDelta<T>> = deltas.iter().map(|d| &d[i]).collect();
            linear_combine(&layer, row)
        })
        .collect()
}

/// Layerwise `Σ_j (N_j/ΣN)·ΔW_j`.
pub fn weighted_aggregate<T: Scalar>(deltas: &[Vec<DenseDelta<T>>], counts: &[usize]) -> Result<Vec<DenseDelta<T>>> {
    check_stacks(deltas)?;
    if counts.len() != deltas.len() {
        return shape_err(format!("{} counts for {} clients", counts.len(), deltas.len()));
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return param_err("weighted aggregation with all-zero sample counts");
    }
    let w = Vector::from_vec(counts.iter().map(|&n| T::of(n as f64 / total as f64)).collect());
    query_aggregate(&w, deltas)
}

/// Stack for blocks `l..L`: global deltas below `m`, personalized from `m`.
pub fn splice<T: Scalar>(
    global: &[DenseDelta<T>],
    personal: &[DenseDelta<T>],
    lora_start: usize,
    boundary_m: usize,
    num_blocks: usize,
) -> Result<Vec<DenseDelta<T>>> {
    if lora_start > num_blocks || boundary_m < lora_start || boundary_m > num_blocks + 1 {
        return param_err(format!("splice needs l <= m <= L+1, got l={lora_start} m={boundary_m} L={num_blocks}"));
    }
    let n = num_blocks - lora_start;
    if global.len() != n || personal.len() != n {
        return shape_err(format!("splice of {} and {} layers, expected {n}", global.len(), personal.len()));
    }
    Ok((0..n).map(|p| if lora_start + p < boundary_m { global[p].clone() } else { personal[p].clone() }).collect())
}
