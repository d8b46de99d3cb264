//! On-disk form of an upload package: one delta record per adapted block,
//! one adapter record per adapted block and a JSON sidecar for everything
//! else.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::UploadPackage;
use crate::error::{Error, Result};
use crate::lora::{decode_dense, decode_lora, encode_dense, encode_lora};
use crate::numerics::{Scalar, Vector};

pub const SIDECAR_NAME: &str = "package.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedFeature {
    pub feature: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageSidecar {
    pub client_id: usize,
    pub num_blocks: usize,
    pub prototypes: BTreeMap<usize, Vec<f64>>,
    pub shared_feats: Vec<SharedFeature>,
    pub class_counts: Vec<usize>,
    pub correct_counts: Vec<usize>,
    pub empty: bool,
}

fn to_f64<T: Scalar>(v: &Vector<T>) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn from_f64<T: Scalar>(v: &[f64]) -> Result<Vector<T>> {
    Vector::new(v.iter().map(|&x| T::of(x)).collect()).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_package<T: Scalar>(pkg: &UploadPackage<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, d) in pkg.deltas.iter().enumerate() {
        fs::write(dir.join(format!("delta_{i:02}.fald")), encode_dense(d))?;
    }
    for (i, a) in pkg.adapters.iter().enumerate() {
        fs::write(dir.join(format!("adapter_{i:02}.fald")), encode_lora(a))?;
    }
    let sidecar = PackageSidecar {
        client_id: pkg.client_id,
        num_blocks: pkg.deltas.len(),
        prototypes: pkg.prototypes.iter().map(|(c, v)| (*c, to_f64(v))).collect(),
        shared_feats: pkg.shared_feats.iter().map(|(z, y)| SharedFeature { feature: to_f64(z), label: *y }).collect(),
        class_counts: pkg.class_counts.clone(),
        correct_counts: pkg.correct_counts.clone(),
        empty: pkg.empty,
    };
    fs::write(dir.join(SIDECAR_NAME), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_package<T: Scalar>(dir: &Path) -> Result<UploadPackage<T>> {
    let sidecar: PackageSidecar = serde_json::from_slice(&fs::read(dir.join(SIDECAR_NAME))?)?;
    let mut deltas = Vec::with_capacity(sidecar.num_blocks);
    let mut adapters = Vec::with_capacity(sidecar.num_blocks);
    for i in 0..sidecar.num_blocks {
        deltas.push(decode_dense(&fs::read(dir.join(format!("delta_{i:02}.fald")))?)?);
        adapters.push(decode_lora(&fs::read(dir.join(format!("adapter_{i:02}.fald")))?)?);
    }
    Ok(UploadPackage {
        client_id: sidecar.client_id,
        deltas,
        adapters,
        prototypes: sidecar.prototypes.iter().map(|(c, v)| Ok((*c, from_f64(v)?))).collect::<Result<_>>()?,
        shared_feats: sidecar
            .shared_feats
            .iter()
            .map(|s| Ok((from_f64(&s.feature)?, s.label)))
            .collect::<Result<_>>()?,
        class_counts: sidecar.class_counts,
        correct_counts: sidecar.correct_counts,
        empty: sidecar.empty,
    })
}
