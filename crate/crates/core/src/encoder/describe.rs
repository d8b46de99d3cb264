use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::numerics::{l2_normalize, Scalar, SimRng, Vector};

/// How class descriptions are phrased: one fixed template sentence (`St`)
/// or several generated paraphrases per class (`Gt`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescStyle {
    St,
    #[default]
    Gt,
}

impl std::str::FromStr for DescStyle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "st" => Ok(Self::St),
            "gt" => Ok(Self::Gt),
            other => Err(Error::Config(format!("unknown description style {other:?}"))),
        }
    }
}

impl std::fmt::Display for DescStyle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::St => "st",
            Self::Gt => "gt",
        })
    }
}

/// Embedded text descriptions of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDescription<T> {
    pub class_id: usize,
    pub style: DescStyle,
    pub variants: Vec<Vector<T>>,
}

/// Spread of paraphrase variants around their class anchor.
pub const VARIANT_SPREAD: f64 = 0.4;

fn random_unit<T: Scalar>(dim: usize, rng: &mut SimRng) -> Result<Vector<T>> {
    let v = Vector::from_vec((0..dim).map(|_| T::of(rng.standard_normal())).collect());
    l2_normalize(&v)
}

/// Descriptions around independent random unit anchors.
pub fn make_descriptions<T: Scalar>(
    num_classes: usize,
    style: DescStyle,
    variants: usize,
    d_in: usize,
    rng: &SimRng,
) -> Result<Vec<ClassDescription<T>>> {
    if num_classes == 0 || d_in == 0 {
        return param_err("descriptions need at least one class and a positive width");
    }
    let anchors =
        (0..num_classes).map(|c| random_unit(d_in, &mut rng.split_indexed("anchor", c))).collect::<Result<Vec<_>>>()?;
    make_descriptions_around(&anchors, style, variants, VARIANT_SPREAD, rng)
}

/// Descriptions around caller-supplied anchors (one per class). `St` keeps
/// the normalized anchor; `Gt` draws `variants` normalized perturbations of
/// it. Each variant depends only on `(seed, class, variant)`.
pub fn make_descriptions_around<T: Scalar>(
    anchors: &[Vector<T>],
    style: DescStyle,
    variants: usize,
    spread: f64,
    rng: &SimRng,
) -> Result<Vec<ClassDescription<T>>> {
    if style == DescStyle::Gt && variants < 2 {
        return param_err(format!("GT descriptions need at least 2 variants, got {variants}"));
    }
    let mut out = Vec::with_capacity(anchors.len());
    for (c, anchor) in anchors.iter().enumerate() {
        let anchor = l2_normalize(anchor)?;
        let vs = match style {
            DescStyle::St => vec![anchor],
            DescStyle::Gt => {
                let scale = T::of(spread / (anchor.dim() as f64).sqrt());
                (0..variants)
                    .map(|v| {
                        let mut r = rng.split_indexed("class", c).split_indexed("variant", v);
                        let mut x = anchor.clone();
                        for xi in x.as_mut_slice() {
                            *xi += scale * T::of(r.standard_normal());
                        }
                        l2_normalize(&x)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        out.push(ClassDescription { class_id: c, style, variants: vs });
    }
    Ok(out)
}

/// `St` always yields its single variant; `Gt` picks one uniformly.
pub fn select_variant<'a, T: Scalar>(desc: &'a ClassDescription<T>, rng: &mut SimRng) -> &'a Vector<T> {
    match desc.style {
        DescStyle::St => &desc.variants[0],
        DescStyle::Gt => &desc.variants[rng.index(desc.variants.len())],
    }
}
