use crate::datagen::{class_means, gen_gaussian_mixture, partition, Dataset, Partition, PartitionSpec};
use crate::encoder::{make_descriptions_around, ClassDescription, EncoderState};
use crate::error::Result;
use crate::numerics::{l2_normalize, Scalar, SimRng, Vector};

use super::RunConfig;

/// Everything fixed before the first round: data, partition, the frozen
/// backbone shared by both towers and the class descriptions.
#[derive(Debug, Clone)]
pub struct World<T> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
    pub partition: Partition,
    pub shards: Vec<Dataset<T>>,
    pub backbone: EncoderState<T>,
    pub descriptions: Vec<ClassDescription<T>>,
}

impl<T: Scalar> World<T> {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = SimRng::new(cfg.seed);
        let data_rng = rng.split("data");
        let per_class = cfg.train_per_class + cfg.test_per_class;
        let all: Dataset<T> =
            gen_gaussian_mixture(cfg.num_classes, per_class, cfg.d_in, cfg.separation, cfg.noise_std, &data_rng)?;
        // samples come grouped by class; the head of each group trains
        let (mut train_idx, mut test_idx) = (Vec::new(), Vec::new());
        for (i, _) in all.samples().iter().enumerate() {
            if i % per_class < cfg.train_per_class {
                train_idx.push(i);
            } else {
                test_idx.push(i);
            }
        }
        let train = all.subset(&train_idx)?;
        let test = all.subset(&test_idx)?;
        let spec = PartitionSpec { kind: cfg.partition, num_clients: cfg.num_clients, seed: cfg.seed };
        let partition = partition(&train, spec)?;
        let shards = partition.assignments.iter().map(|idx| train.subset(idx)).collect::<Result<Vec<_>>>()?;

        let backbone = EncoderState::random_backbone(cfg.encoder_config(), cfg.backbone_gain, &rng.split("backbone"))?;
        let means = class_means(cfg.num_classes, cfg.d_in, cfg.separation, cfg.noise_std, &data_rng)?;
        let descriptions = describe(cfg, &means, &rng.split("descriptions"))?;
        Ok(Self { train, test, partition, shards, backbone, descriptions })
    }
}

/// Description anchors mix each class-mean direction with a random one,
/// then sit at the mean radius of the class means so that text inputs and
/// image inputs reach the backbone at the same scale.
fn describe<T: Scalar>(cfg: &RunConfig, means: &[Vec<f64>], rng: &SimRng) -> Result<Vec<ClassDescription<T>>> {
    let radius = means.iter().map(|m| m.iter().map(|x| x * x).sum::<f64>().sqrt()).sum::<f64>() / means.len() as f64;
    let radius = if radius > 0.0 { radius } else { 1.0 };
    let beta = cfg.desc_alignment;
    let mut anchors = Vec::with_capacity(means.len());
    for (c, m) in means.iter().enumerate() {
        let mut r = rng.split_indexed("anchor", c);
        let noise = l2_normalize(&Vector::new((0..cfg.d_in).map(|_| r.standard_normal()).collect())?)?;
        let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
        let anchor: Vec<f64> = m
            .iter()
            .zip(noise.iter())
            .map(|(&x, &n)| {
                let dir = if norm > 0.0 { x / norm } else { 0.0 };
                beta * dir + (1.0 - beta) * n
            })
            .collect();
        anchors.push(Vector::new(anchor.into_iter().map(T::of).collect())?);
    }
    let mut descs =
        make_descriptions_around(&anchors, cfg.desc_style, cfg.desc_variants, cfg.desc_spread, &rng.split("variants"))?;
    for d in &mut descs {
        for v in &mut d.variants {
            *v = v.scaled(T::of(radius));
        }
    }
    Ok(descs)
}
