//! Synthetic datasets, client partitions and partition statistics.

mod io;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::numerics::{dirichlet_sample, Scalar, SimRng, Vector};

pub use io::{read_dataset_csv, write_dataset_csv, write_heatmap_csv};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    samples: Vec<(Vector<T>, usize)>,
    num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(samples: Vec<(Vector<T>, usize)>, num_classes: usize) -> Result<Self> {
        if samples.is_empty() {
            return param_err("dataset has no samples");
        }
        Self::build(samples, num_classes)
    }

    /// Validates labels and widths; an empty sample list is allowed.
    fn build(samples: Vec<(Vector<T>, usize)>, num_classes: usize) -> Result<Self> {
        if let Some(first) = samples.first() {
            let dim = first.0.dim();
            for (i, (x, y)) in samples.iter().enumerate() {
                if *y >= num_classes {
                    return param_err(format!("sample {i} has label {y} outside {num_classes} classes"));
                }
                if x.dim() != dim {
                    return param_err(format!("sample {i} has dim {}, expected {dim}", x.dim()));
                }
            }
        }
        Ok(Self { samples, num_classes })
    }

    pub fn samples(&self) -> &[(Vector<T>, usize)] {
        &self.samples
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.0.dim())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for (_, y) in &self.samples {
            counts[*y] += 1;
        }
        counts
    }

    /// Sample indices grouped by class, in ascending index order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, (_, y)) in self.samples.iter().enumerate() {
            out[*y].push(i);
        }
        out
    }

    /// The samples at `indices`, in that order. May be empty.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let samples = indices
            .iter()
            .map(|&i| self.samples.get(i).cloned().ok_or_else(|| Error::Parameter(format!("index {i} out of range"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples, num_classes: self.num_classes })
    }
}

/// Class means at pairwise distance at least `separation · noise_std`
/// (`separation` alone when `noise_std = 0`) along random directions,
/// plus isotropic Gaussian noise. Classes appear in ascending label order.
pub fn gen_gaussian_mixture<T: Scalar>(
    num_classes: usize,
    n_per_class: usize,
    d_in: usize,
    separation: f64,
    noise_std: f64,
    rng: &SimRng,
) -> Result<Dataset<T>> {
    if num_classes < 2 {
        return param_err("a mixture needs at least two classes");
    }
    if n_per_class == 0 || d_in == 0 {
        return param_err("n_per_class and d_in must be positive");
    }
    if !(separation >= 0.0) || !(noise_std >= 0.0) {
        return param_err("separation and noise_std must be nonnegative");
    }
    let means = class_means(num_classes, d_in, separation, noise_std, rng)?;
    let mut r = rng.split("samples");
    let mut samples = Vec::with_capacity(num_classes * n_per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            let x: Vec<T> = mean.iter().map(|&m| T::of(m + noise_std * r.standard_normal())).collect();
            samples.push((Vector::from_vec(x), c));
        }
    }
    Dataset::new(samples, num_classes)
}

/// Minimum pairwise distance between unit directions before rescaling.
const MIN_DIRECTION_GAP: f64 = 0.5;
const MAX_DIRECTION_TRIES: usize = 64;

/// Class means of a mixture generated by [`gen_gaussian_mixture`] with the
/// same arguments.
pub fn class_means(
    num_classes: usize,
    d_in: usize,
    separation: f64,
    noise_std: f64,
    rng: &SimRng,
) -> Result<Vec<Vec<f64>>> {
    let mut r = rng.split("means");
    for _ in 0..MAX_DIRECTION_TRIES {
        let dirs: Vec<Vec<f64>> = (0..num_classes)
            .map(|_| {
                let v: Vec<f64> = (0..d_in).map(|_| r.standard_normal()).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let mut gap = f64::INFINITY;
        for i in 0..num_classes {
            for j in i + 1..num_classes {
                gap = gap.min(euclid(&dirs[i], &dirs[j]));
            }
        }
        if gap >= MIN_DIRECTION_GAP {
            let unit = if noise_std > 0.0 { noise_std } else { 1.0 };
            let radius = separation * unit / gap;
            return Ok(dirs.into_iter().map(|d| d.into_iter().map(|x| x * radius).collect()).collect());
        }
    }
    Err(Error::Generation(format!("could not place {num_classes} separated class means in {d_in} dimensions")))
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Concentration used when a `dir` partition names no alpha.
pub const DEFAULT_DIR_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PartitionKind {
    Iid,
    Dir { alpha: f64 },
    Path { classes_per_client: usize },
}

impl std::str::FromStr for PartitionKind {
    type Err = Error;

    /// `iid`, `dir:<alpha>`, `dir` (alpha 0.1) or `path:<classes_per_client>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad partition {s:?}; expected iid, dir:<alpha> or path:<n>"));
        let lower = s.to_ascii_lowercase();
        match lower.split_once(':') {
            None if lower == "iid" => Ok(Self::Iid),
            None if lower == "dir" => Ok(Self::Dir { alpha: DEFAULT_DIR_ALPHA }),
            Some(("dir", a)) => {
                let alpha: f64 = a.parse().map_err(|_| bad())?;
                Ok(Self::Dir { alpha })
            }
            Some(("path", n)) => Ok(Self::Path { classes_per_client: n.parse().map_err(|_| bad())? }),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for PartitionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Iid => write!(f, "iid"),
            Self::Dir { alpha } => write!(f, "dir:{alpha}"),
            Self::Path { classes_per_client } => write!(f, "path:{classes_per_client}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    #[serde(flatten)]
    pub kind: PartitionKind,
    pub num_clients: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub spec: PartitionSpec,
    /// Sample indices per client.
    pub assignments: Vec<Vec<usize>>,
    /// `counts[k][c]` = samples of class `c` on client `k`.
    pub counts: Vec<Vec<usize>>,
}

impl Partition {
    fn from_assignments<T: Scalar>(spec: PartitionSpec, assignments: Vec<Vec<usize>>, data: &Dataset<T>) -> Self {
        let counts = assignments
            .iter()
            .map(|idx| {
                let mut row = vec![0; data.num_classes()];
                for &i in idx {
                    row[data.samples()[i].1] += 1;
                }
                row
            })
            .collect();
        Self { spec, assignments, counts }
    }

    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    /// Classes with at least one sample on client `k`.
    pub fn client_labels(&self, k: usize) -> BTreeSet<usize> {
        self.counts[k].iter().enumerate().filter(|(_, &n)| n > 0).map(|(c, _)| c).collect()
    }

    /// Checks disjointness, index range and count consistency.
    pub fn validate<T: Scalar>(&self, data: &Dataset<T>) -> Result<()> {
        let mut seen = vec![false; data.len()];
        for (k, idx) in self.assignments.iter().enumerate() {
            for &i in idx {
                if i >= data.len() {
                    return Err(Error::Contract(format!("client {k} holds out-of-range index {i}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Contract(format!("index {i} assigned twice")));
                }
            }
        }
        let recount = Self::from_assignments(self.spec, self.assignments.clone(), data);
        if recount.counts != self.counts {
            return Err(Error::Contract("per-class counts disagree with assignments".into()));
        }
        Ok(())
    }
}

pub fn partition<T: Scalar>(data: &Dataset<T>, spec: PartitionSpec) -> Result<Partition> {
    let rng = SimRng::new(spec.seed).split("partition");
    match spec.kind {
        PartitionKind::Iid => partition_iid(data, spec.num_clients, &rng),
        PartitionKind::Dir { alpha } => partition_dirichlet(data, spec.num_clients, alpha, &rng),
        PartitionKind::Path { classes_per_client } => {
            partition_pathological(data, spec.num_clients, classes_per_client, &rng)
        }
    }
    .map(|mut p| {
        p.spec = spec;
        p
    })
}

fn check_clients(k: usize) -> Result<()> {
    if k == 0 {
        return param_err("at least one client required");
    }
    Ok(())
}

pub fn partition_iid<T: Scalar>(data: &Dataset<T>, num_clients: usize, rng: &SimRng) -> Result<Partition> {
    check_clients(num_clients)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.split("iid").shuffle(&mut order);
    let (base, extra) = (data.len() / num_clients, data.len() % num_clients);
    let mut assignments = Vec::with_capacity(num_clients);
    let mut start = 0;
    for k in 0..num_clients {
        let size = base + usize::from(k < extra);
        assignments.push(order[start..start + size].to_vec());
        start += size;
    }
    let spec = PartitionSpec { kind: PartitionKind::Iid, num_clients, seed: rng.seed() };
    Ok(Partition::from_assignments(spec, assignments, data))
}

/// Integer counts summing to `total` proportional to `weights`: floors
/// first, then one extra unit to the largest remainders (lower index wins
/// ties).
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || !(sum > 0.0) {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Per class, draws client shares `q ∼ Dir(α·1_K)` and deals the class's
/// shuffled samples out in largest-remainder counts.
pub fn partition_dirichlet<T: Scalar>(
    data: &Dataset<T>,
    num_clients: usize,
    alpha: f64,
    rng: &SimRng,
) -> Result<Partition> {
    check_clients(num_clients)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return param_err(format!("dirichlet alpha must be positive, got {alpha}"));
    }
    let mut assignments = vec![Vec::new(); num_clients];
    for (c, mut idx) in data.indices_by_class().into_iter().enumerate() {
        let q: Vector<f64> = dirichlet_sample(&mut rng.split_indexed("share", c), alpha, num_clients)?;
        rng.split_indexed("order", c).shuffle(&mut idx);
        let counts = largest_remainder(idx.len(), q.as_slice());
        let mut start = 0;
        for (k, n) in counts.into_iter().enumerate() {
            assignments[k].extend_from_slice(&idx[start..start + n]);
            start += n;
        }
    }
    let spec = PartitionSpec { kind: PartitionKind::Dir { alpha }, num_clients, seed: rng.seed() };
    Ok(Partition::from_assignments(spec, assignments, data))
}

/// The shares drawn by [`partition_dirichlet`] for class `c`.
pub fn dirichlet_shares(rng: &SimRng, alpha: f64, num_clients: usize, class: usize) -> Result<Vec<f64>> {
    Ok(dirichlet_sample::<f64>(&mut rng.split_indexed("share", class), alpha, num_clients)?.into_vec())
}

/// Disjoint groups of `classes_per_client` shuffled classes; each client
/// gets every sample of its classes. Leftover classes stay unassigned.
pub fn partition_pathological<T: Scalar>(
    data: &Dataset<T>,
    num_clients: usize,
    classes_per_client: usize,
    rng: &SimRng,
) -> Result<Partition> {
    check_clients(num_clients)?;
    if classes_per_client == 0 || classes_per_client * num_clients > data.num_classes() {
        return param_err(format!(
            "{num_clients} clients x {classes_per_client} classes exceeds {} classes",
            data.num_classes()
        ));
    }
    let mut classes: Vec<usize> = (0..data.num_classes()).collect();
    rng.split("classes").shuffle(&mut classes);
    let by_class = data.indices_by_class();
    let assignments = classes
        .chunks(classes_per_client)
        .take(num_clients)
        .map(|group| {
            let mut idx: Vec<usize> = group.iter().flat_map(|&c| by_class[c].iter().copied()).collect();
            idx.sort_unstable();
            idx
        })
        .collect();
    let spec = PartitionSpec { kind: PartitionKind::Path { classes_per_client }, num_clients, seed: rng.seed() };
    Ok(Partition::from_assignments(spec, assignments, data))
}

/// Test samples whose label the client owns. May be empty.
pub fn build_local_testset<T: Scalar>(test: &Dataset<T>, client_labels: &BTreeSet<usize>) -> Dataset<T> {
    let samples = test.samples().iter().filter(|(_, y)| client_labels.contains(y)).cloned().collect();
    Dataset { samples, num_classes: test.num_classes() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    /// `histogram[k][c]` = samples of class `c` on client `k`.
    pub histogram: Vec<Vec<usize>>,
    pub shard_sizes: Vec<usize>,
    /// Largest single-class fraction of each shard (0 for empty shards).
    pub max_class_share: Vec<f64>,
    /// Inverse Simpson index `1 / Σ p_c²` of each shard (0 for empty shards).
    pub effective_classes: Vec<f64>,
    pub empty_clients: Vec<usize>,
}

impl PartitionStats {
    pub fn mean_max_class_share(&self) -> f64 {
        self.max_class_share.iter().sum::<f64>() / self.max_class_share.len().max(1) as f64
    }
}

pub fn partition_stats(partition: &Partition) -> PartitionStats {
    let histogram = partition.counts.clone();
    let shard_sizes: Vec<usize> = histogram.iter().map(|r| r.iter().sum()).collect();
    let mut max_class_share = Vec::with_capacity(histogram.len());
    let mut effective_classes = Vec::with_capacity(histogram.len());
    for (row, &n) in histogram.iter().zip(&shard_sizes) {
        if n == 0 {
            max_class_share.push(0.0);
            effective_classes.push(0.0);
            continue;
        }
        let n = n as f64;
        max_class_share.push(*row.iter().max().unwrap() as f64 / n);
        effective_classes.push(1.0 / row.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>());
    }
    let empty_clients = shard_sizes.iter().enumerate().filter(|(_, &n)| n == 0).map(|(k, _)| k).collect();
    PartitionStats { histogram, shard_sizes, max_class_share, effective_classes, empty_clients }
}

#[cfg(test)]
mod tests;
