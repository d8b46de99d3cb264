use super::*;

fn mixture(c: usize, n: usize, seed: u64) -> Dataset<f64> {
    gen_gaussian_mixture(c, n, 16, 6.0, 0.25, &SimRng::new(seed)).unwrap()
}

fn assert_cover(p: &Partition, data: &Dataset<f64>, expect_all: bool) {
    p.validate(data).unwrap();
    let total: usize = p.assignments.iter().map(Vec::len).sum();
    if expect_all {
        assert_eq!(total, data.len());
    }
}

#[test]
fn mixture_counts_and_degenerate_noise() {
    let d = gen_gaussian_mixture::<f64>(4, 50, 8, 3.0, 1.0, &SimRng::new(1)).unwrap();
    assert_eq!(d.len(), 200);
    assert_eq!(d.class_counts(), vec![50; 4]);

    let flat = gen_gaussian_mixture::<f64>(3, 5, 8, 3.0, 0.0, &SimRng::new(1)).unwrap();
    let means = class_means(3, 8, 3.0, 0.0, &SimRng::new(1)).unwrap();
    for (x, y) in flat.samples() {
        assert_eq!(x.as_slice(), means[*y].as_slice());
    }
    assert!(gen_gaussian_mixture::<f64>(1, 5, 8, 3.0, 1.0, &SimRng::new(1)).is_err());
    assert!(matches!(gen_gaussian_mixture::<f64>(3, 5, 1, 3.0, 1.0, &SimRng::new(1)), Err(Error::Generation(_))));
}

#[test]
fn class_means_respect_separation() {
    for seed in 0..10 {
        let m = class_means(6, 16, 6.0, 0.5, &SimRng::new(seed)).unwrap();
        for i in 0..6 {
            for j in i + 1..6 {
                assert!(euclid(&m[i], &m[j]) >= 3.0 - 1e-12);
            }
        }
    }
}

#[test]
fn separated_mixture_is_nearest_mean_classifiable() {
    let (sep, sigma) = (6.0, 0.25);
    let means = class_means(4, 16, sep, sigma, &SimRng::new(7)).unwrap();
    let fresh = gen_gaussian_mixture::<f64>(4, 500, 16, sep, sigma, &SimRng::new(7)).unwrap();
    let correct = fresh
        .samples()
        .iter()
        .filter(|(x, y)| {
            let best = (0..4)
                .min_by(|&a, &b| euclid(x.as_slice(), &means[a]).total_cmp(&euclid(x.as_slice(), &means[b])))
                .unwrap();
            best == *y
        })
        .count();
    assert!(correct as f64 / fresh.len() as f64 > 0.99);
}

#[test]
fn iid_partition_contract() {
    let d = mixture(5, 41, 2);
    let one = partition_iid(&d, 1, &SimRng::new(0)).unwrap();
    assert_eq!(one.assignments[0].len(), d.len());
    for k in [2, 3, 7] {
        let p = partition_iid(&d, k, &SimRng::new(k as u64)).unwrap();
        assert_cover(&p, &d, true);
        let sizes: Vec<usize> = p.assignments.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}

#[test]
fn iid_class_shares_track_global_shares() {
    let d = gen_gaussian_mixture::<f64>(4, 2500, 4, 2.0, 1.0, &SimRng::new(3)).unwrap();
    let p = partition_iid(&d, 5, &SimRng::new(4)).unwrap();
    for row in &p.counts {
        let n: usize = row.iter().sum();
        let se = (0.25 * 0.75 / n as f64).sqrt();
        for &c in row {
            assert!((c as f64 / n as f64 - 0.25).abs() < 3.0 * se, "{row:?}");
        }
    }
}

#[test]
fn largest_remainder_examples() {
    assert_eq!(largest_remainder(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
    assert_eq!(largest_remainder(7, &[0.5, 0.25, 0.25]), vec![3, 2, 2]);
    assert_eq!(largest_remainder(5, &[0.0, 1.0]), vec![0, 5]);
    let mut rng = SimRng::new(9);
    for _ in 0..100 {
        let w: Vec<f64> = (0..6).map(|_| rng.uniform()).collect();
        let n = rng.index(1000);
        let counts = largest_remainder(n, &w);
        assert_eq!(counts.iter().sum::<usize>(), n);
        let s: f64 = w.iter().sum();
        for (c, wi) in counts.iter().zip(&w) {
            assert!((*c as f64 - wi / s * n as f64).abs() < 1.0);
        }
    }
}

#[test]
fn dirichlet_partition_contract_and_rounding_bound() {
    let d = mixture(6, 100, 5);
    let rng = SimRng::new(11);
    let single = partition_dirichlet(&d, 1, 0.5, &rng).unwrap();
    assert_eq!(single.assignments[0].len(), d.len());
    for alpha in [0.05, 0.5, 5.0] {
        let k = 5;
        let p = partition_dirichlet(&d, k, alpha, &rng).unwrap();
        assert_cover(&p, &d, true);
        for c in 0..6 {
            let q = dirichlet_shares(&rng, alpha, k, c).unwrap();
            for kk in 0..k {
                let realized = p.counts[kk][c] as f64 / 100.0;
                assert!((realized - q[kk]).abs() <= k as f64 / 100.0);
            }
        }
    }
    assert!(partition_dirichlet(&d, 3, 0.0, &rng).is_err());
}

#[test]
fn pathological_partition_contract() {
    let d = mixture(10, 20, 6);
    let p = partition_pathological(&d, 5, 2, &SimRng::new(2)).unwrap();
    assert_cover(&p, &d, true);
    let mut union = BTreeSet::new();
    for k in 0..5 {
        let labels = p.client_labels(k);
        assert_eq!(labels.len(), 2);
        assert!(union.is_disjoint(&labels));
        union.extend(labels);
    }
    assert_eq!(union.len(), 10);
    let stats = partition_stats(&p);
    assert!(stats.histogram.iter().all(|r| r.iter().filter(|&&n| n > 0).count() == 2));

    let q = partition_pathological(&d, 3, 2, &SimRng::new(2)).unwrap();
    assert_cover(&q, &d, false);
    let owned: usize = q.assignments.iter().map(Vec::len).sum();
    assert_eq!(owned, 6 * 20);
    assert!(partition_pathological(&d, 6, 2, &SimRng::new(2)).is_err());
}

#[test]
fn partitions_are_deterministic() {
    let d = mixture(4, 30, 1);
    for kind in [PartitionKind::Iid, PartitionKind::Dir { alpha: 0.3 }, PartitionKind::Path { classes_per_client: 1 }] {
        let spec = PartitionSpec { kind, num_clients: 4, seed: 17 };
        assert_eq!(partition(&d, spec).unwrap(), partition(&d, spec).unwrap());
    }
}

#[test]
fn local_testset_filters() {
    let d = mixture(5, 10, 3);
    let all: BTreeSet<usize> = (0..5).collect();
    assert_eq!(build_local_testset(&d, &all), d);
    assert!(build_local_testset(&d, &BTreeSet::new()).is_empty());
    let some: BTreeSet<usize> = [1, 4].into_iter().collect();
    let local = build_local_testset(&d, &some);
    let brute: Vec<_> = d.samples().iter().filter(|(_, y)| *y == 1 || *y == 4).cloned().collect();
    assert_eq!(local.samples(), brute.as_slice());
}

#[test]
fn stats_conserve_counts() {
    let d = mixture(4, 25, 8);
    let p = partition_iid(&d, 1, &SimRng::new(1)).unwrap();
    let s = partition_stats(&p);
    assert_eq!(s.histogram, vec![d.class_counts()]);
    let p = partition_dirichlet(&d, 6, 0.1, &SimRng::new(2)).unwrap();
    let s = partition_stats(&p);
    for (row, &n) in s.histogram.iter().zip(&s.shard_sizes) {
        assert_eq!(row.iter().sum::<usize>(), n);
    }
    for &k in &s.empty_clients {
        assert_eq!(s.shard_sizes[k], 0);
    }
    assert!(s.max_class_share.iter().all(|&m| (0.0..=1.0).contains(&m)));
}

#[test]
fn partition_kind_parsing() {
    assert_eq!("iid".parse::<PartitionKind>().unwrap(), PartitionKind::Iid);
    assert_eq!("dir:0.1".parse::<PartitionKind>().unwrap(), PartitionKind::Dir { alpha: 0.1 });
    assert_eq!("Path:2".parse::<PartitionKind>().unwrap(), PartitionKind::Path { classes_per_client: 2 });
    assert_eq!("dir".parse::<PartitionKind>().unwrap(), PartitionKind::Dir { alpha: 0.1 });
    assert!("dir:".parse::<PartitionKind>().is_err());
    let spec = PartitionSpec { kind: PartitionKind::Dir { alpha: 0.5 }, num_clients: 3, seed: 1 };
    let json = serde_json::to_string(&spec).unwrap();
    assert_eq!(json, r#"{"kind":"dir","alpha":0.5,"num_clients":3,"seed":1}"#);
    assert_eq!(serde_json::from_str::<PartitionSpec>(&json).unwrap(), spec);
}

#[test]
fn csv_round_trip_and_errors() {
    let d = mixture(3, 4, 2);
    let mut buf = Vec::new();
    write_dataset_csv(&d, &mut buf).unwrap();
    let back: Dataset<f64> = read_dataset_csv(buf.as_slice(), Some(3)).unwrap();
    assert_eq!(back, d);
    assert!(read_dataset_csv::<f64, _>("a,b\n1,2\n".as_bytes(), None).is_err());
    assert!(read_dataset_csv::<f64, _>("x0,y\nfoo,1\n".as_bytes(), None).is_err());
    let small: Dataset<f64> = read_dataset_csv("x0,x1,y\n0.5,1,2\n".as_bytes(), None).unwrap();
    assert_eq!(small.num_classes(), 3);

    let s = partition_stats(&partition_iid(&d, 2, &SimRng::new(1)).unwrap());
    let mut out = Vec::new();
    write_heatmap_csv(&s, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("client,class_0,class_1,class_2\n0,"));
    assert_eq!(text.lines().count(), 3);
}
