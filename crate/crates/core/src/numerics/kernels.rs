use serde::{Deserialize, Serialize};

use super::{Scalar, Vector};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimKind {
    #[default]
    Cosine,
    Dot,
    Euclidean,
}

impl std::str::FromStr for SimKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "dot" => Ok(Self::Dot),
            "euclidean" => Ok(Self::Euclidean),
            other => Err(Error::Config(format!("unknown similarity kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for SimKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::Dot => "dot",
            Self::Euclidean => "euclidean",
        })
    }
}

/// Raw similarity value. Euclidean returns the (nonnegative) distance.
pub fn similarity<T: Scalar>(x: &Vector<T>, y: &Vector<T>, kind: SimKind) -> Result<T> {
    if x.dim() != y.dim() {
        return shape_err(format!("similarity of dims {} and {}", x.dim(), y.dim()));
    }
    match kind {
        SimKind::Dot => Ok(x.dot(y)),
        SimKind::Cosine => {
            let (nx, ny) = (x.norm(), y.norm());
            if nx == T::zero() || ny == T::zero() {
                return Err(Error::Degenerate("cosine similarity with a zero vector".into()));
            }
            Ok(x.dot(y) / (nx * ny))
        }
        SimKind::Euclidean => {
            let mut acc = T::zero();
            for (&a, &b) in x.iter().zip(y.iter()) {
                acc += (a - b) * (a - b);
            }
            Ok(acc.sqrt())
        }
    }
}

/// Similarity used wherever the value is a score (softmax weighting,
/// logits). With `negate_euclidean` the euclidean distance is negated so
/// that larger always means more similar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Similarity {
    pub kind: SimKind,
    pub negate_euclidean: bool,
}

impl Default for Similarity {
    fn default() -> Self {
        Self { kind: SimKind::Cosine, negate_euclidean: true }
    }
}

impl Similarity {
    pub fn new(kind: SimKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn score<T: Scalar>(&self, x: &Vector<T>, y: &Vector<T>) -> Result<T> {
        let s = similarity(x, y, self.kind)?;
        Ok(if self.kind == SimKind::Euclidean && self.negate_euclidean { -s } else { s })
    }

    /// Partial derivatives of [`Similarity::score`] with respect to `x` and `y`.
    pub fn score_grad<T: Scalar>(&self, x: &Vector<T>, y: &Vector<T>) -> Result<(Vector<T>, Vector<T>)> {
        if x.dim() != y.dim() {
            return shape_err("similarity gradient of unequal dims");
        }
        match self.kind {
            SimKind::Dot => Ok((y.clone(), x.clone())),
            SimKind::Cosine => {
                let (nx, ny) = (x.norm(), y.norm());
                if nx == T::zero() || ny == T::zero() {
                    return Err(Error::Degenerate("cosine gradient at a zero vector".into()));
                }
                let c = x.dot(y) / (nx * ny);
                let inv = T::one() / (nx * ny);
                let mut gx = y.scaled(inv);
                gx.axpy(-c / (nx * nx), x);
                let mut gy = x.scaled(inv);
                gy.axpy(-c / (ny * ny), y);
                Ok((gx, gy))
            }
            SimKind::Euclidean => {
                let diff = x.sub(y);
                let d = diff.norm();
                if d == T::zero() {
                    return Ok((Vector::zeros(x.dim()), Vector::zeros(x.dim())));
                }
                let sign = if self.negate_euclidean { -T::one() } else { T::one() };
                let gx = diff.scaled(sign / d);
                let gy = gx.scaled(-T::one());
                Ok((gx, gy))
            }
        }
    }
}

/// Softmax restricted to the unmasked indices; masked entries are exactly 0.
pub fn masked_softmax<T: Scalar>(scores: &Vector<T>, masked: &[usize]) -> Result<Vector<T>> {
    let n = scores.dim();
    let mut keep = vec![true; n];
    for &i in masked {
        if i >= n {
            return shape_err(format!("mask index {i} out of range for {n} scores"));
        }
        keep[i] = false;
    }
    let max = (0..n)
        .filter(|&i| keep[i])
        .map(|i| scores[i])
        .fold(None, |acc: Option<T>, s| Some(acc.map_or(s, |a| a.max(s))))
        .ok_or(Error::EmptySupport)?;
    let mut out = Vector::zeros(n);
    let mut total = T::zero();
    for i in (0..n).filter(|&i| keep[i]) {
        let e = (scores[i] - max).exp();
        out[i] = e;
        total += e;
    }
    for i in (0..n).filter(|&i| keep[i]) {
        out[i] /= total;
    }
    Ok(out)
}

pub fn softmax<T: Scalar>(scores: &Vector<T>) -> Vector<T> {
    masked_softmax(scores, &[]).expect("unmasked softmax has full support")
}
