use std::collections::BTreeMap;

use super::*;
use crate::encoder::{make_descriptions, Activation, DescStyle};
use crate::error::Error;
use crate::numerics::{l2_normalize, similarity, Matrix};
use crate::objectives::{cross_entropy, predict_probs};

fn unit(rng: &mut SimRng, d: usize) -> Vector<f64> {
    l2_normalize(&Vector::new((0..d).map(|_| rng.standard_normal()).collect()).unwrap()).unwrap()
}

fn random_protos(rng: &mut SimRng, classes: usize, d: usize) -> Prototypes<f64> {
    let mut out = Prototypes::new();
    for c in 0..classes {
        if rng.uniform() < 0.7 {
            out.insert(c, unit(rng, d));
        }
    }
    out
}

fn random_stack(rng: &mut SimRng, layers: usize) -> Vec<DenseDelta<f64>> {
    (0..layers).map(|_| DenseDelta::new(Matrix::from_fn(3, 4, |_, _| rng.standard_normal()))).collect()
}

fn image_config() -> EncoderConfig {
    EncoderConfig {
        num_blocks: 4,
        d_in: 6,
        d_hidden: 6,
        d_embed: 6,
        activation: Activation::Tanh,
        lora_start: 1,
        rank: 2,
        gamma: 0.25,
    }
}

fn cfg() -> ServerConfig {
    ServerConfig { boundary_m: 3, ..Default::default() }
}

fn server(cfg: ServerConfig, seed: u64) -> ServerState<f64> {
    let rng = SimRng::new(seed);
    let mut text = EncoderState::random_backbone(image_config(), 1.0, &rng.split("backbone")).unwrap();
    text.reset_adapters(&rng.split("text")).unwrap();
    let descs = make_descriptions(3, DescStyle::Gt, 3, 6, &rng.split("desc")).unwrap();
    ServerState::new(text, descs, image_config(), cfg, rng.split("server")).unwrap()
}

fn package(id: usize, rng: &mut SimRng, counts: Vec<usize>) -> UploadPackage<f64> {
    let deltas = (1..4).map(|_| DenseDelta::new(Matrix::from_fn(6, 6, |_, _| rng.standard_normal()))).collect();
    let prototypes: Prototypes<f64> =
        counts.iter().enumerate().filter(|(_, &n)| n > 0).map(|(c, _)| (c, unit(rng, 6))).collect();
    let shared_feats = prototypes.iter().map(|(c, u)| (u.clone(), *c)).collect();
    let correct_counts = counts.iter().map(|&n| n.min(1)).collect();
    UploadPackage {
        client_id: id,
        deltas,
        adapters: Vec::new(),
        prototypes,
        shared_feats,
        class_counts: counts,
        correct_counts,
        empty: false,
    }
}

#[test]
fn attention_examples_and_oracle() {
    let sim = Similarity::default();
    let e = |i| Vector::<f64>::basis(3, i);
    let k: Prototypes<f64> = [(0, e(0))].into_iter().collect();
    assert_eq!(relational_attention(&k, &k, sim).unwrap()[&0], 1.0);
    let j: Prototypes<f64> = [(1, e(1)), (2, e(2))].into_iter().collect();
    assert_eq!(relational_attention(&k, &j, sim).unwrap()[&0], 0.0);
    assert_eq!(relational_attention(&k, &BTreeMap::new(), sim).unwrap()[&0], 0.0);

    let mut rng = SimRng::new(1);
    for _ in 0..20 {
        let a = random_protos(&mut rng, 5, 4);
        let b = random_protos(&mut rng, 5, 4);
        let d = relational_attention(&a, &b, sim).unwrap();
        assert_eq!(d.len(), a.len());
        for (c, u) in &a {
            let mut want = 0.0;
            for v in b.values() {
                want += similarity(u, v, SimKind::Cosine).unwrap();
            }
            assert!((d[c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn coefficient_examples() {
    let sim = Similarity::default();
    let mut rng = SimRng::new(2);
    let p = random_protos(&mut rng, 3, 4);
    let two =
        influence_coefficients(&[p.clone(), random_protos(&mut rng, 3, 4)], &[vec![3, 1, 0], vec![0, 2, 2]], true, sim)
            .unwrap();
    assert_eq!(two.alpha.as_slice(), &[0.0, 1.0, 1.0, 0.0]);

    let same = vec![p.clone(); 3];
    let counts = vec![vec![4, 2, 1]; 3];
    let ex = influence_coefficients(&same, &counts, true, sim).unwrap();
    let inc = influence_coefficients(&same, &counts, false, sim).unwrap();
    for a in 0..3 {
        for b in 0..3 {
            let want = if a == b { 0.0 } else { 0.5 };
            assert!((ex.alpha.get(a, b) - want).abs() < 1e-15);
            assert!((inc.alpha.get(a, b) - 1.0 / 3.0).abs() < 1e-15);
        }
    }
    let single = influence_coefficients(&[p], &[vec![1, 1, 1]], true, sim);
    assert!(matches!(single, Err(Error::EmptySupport)));
}

#[test]
fn coefficients_follow_the_formula() {
    let sim = Similarity::default();
    let mut rng = SimRng::new(3);
    for _ in 0..30 {
        let k = 2 + rng.index(4);
        let protos: Vec<_> = (0..k).map(|_| random_protos(&mut rng, 4, 5)).collect();
        let counts: Vec<Vec<usize>> = (0..k).map(|_| (0..4).map(|_| rng.index(5)).collect()).collect();
        let m = influence_coefficients(&protos, &counts, false, sim).unwrap();
        for a in 0..k {
            let n_a: usize = counts[a].iter().sum();
            let raw: Vec<f64> = (0..k)
                .map(|b| {
                    if n_a == 0 {
                        return 0.0;
                    }
                    let mut s = 0.0;
                    for (c, u) in &protos[a] {
                        let d: f64 = protos[b].values().map(|v| similarity(u, v, SimKind::Cosine).unwrap()).sum();
                        s += counts[a][*c] as f64 / n_a as f64 * d;
                    }
                    s
                })
                .collect();
            let z: f64 = raw.iter().map(|r| r.exp()).sum();
            for b in 0..k {
                assert!((m.alpha.get(a, b) - raw[b].exp() / z).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn coefficients_are_permutation_equivariant_and_scale_robust() {
    let sim = Similarity::default();
    let mut rng = SimRng::new(4);
    let protos: Vec<_> = (0..4).map(|_| random_protos(&mut rng, 3, 4)).collect();
    let counts: Vec<Vec<usize>> = (0..4).map(|_| (0..3).map(|_| 1 + rng.index(5)).collect()).collect();
    let base = influence_coefficients(&protos, &counts, true, sim).unwrap();
    let perm = [2, 0, 3, 1];
    let pp: Vec<_> = perm.iter().map(|&i| protos[i].clone()).collect();
    let pc: Vec<_> = perm.iter().map(|&i| counts[i].clone()).collect();
    let permuted = influence_coefficients(&pp, &pc, true, sim).unwrap();
    for a in 0..4 {
        for b in 0..4 {
            assert!((permuted.alpha.get(a, b) - base.alpha.get(perm[a], perm[b])).abs() < 1e-15);
        }
    }
    let scaled: Vec<_> =
        protos.iter().map(|p| p.iter().map(|(c, v)| (*c, v.scaled(3.7))).collect::<Prototypes<f64>>()).collect();
    let s = influence_coefficients(&scaled, &counts, true, sim).unwrap();
    for a in 0..4 {
        for (c, d) in &base.d_raw[a][1] {
            assert!((s.d_raw[a][1][c] - d).abs() < 1e-12);
        }
    }
}

#[test]
fn aggregation_examples_and_linearity() {
    let mut rng = SimRng::new(5);
    let stacks: Vec<_> = (0..3).map(|_| random_stack(&mut rng, 2)).collect();
    let onehot = Vector::basis(3, 1);
    assert_eq!(query_aggregate(&onehot, &stacks).unwrap(), stacks[1]);
    let uniform = Vector::new(vec![1.0 / 3.0; 3]).unwrap();
    let mean = query_aggregate(&uniform, &stacks).unwrap();
    let eq = weighted_aggregate(&stacks, &[5, 5, 5]).unwrap();
    for i in 0..2 {
        for e in 0..12 {
            let want = stacks.iter().map(|s| s[i].matrix().as_slice()[e]).sum::<f64>() / 3.0;
            assert!((mean[i].matrix().as_slice()[e] - want).abs() < 1e-12);
            assert!((eq[i].matrix().as_slice()[e] - want).abs() < 1e-12);
        }
    }
    assert_eq!(weighted_aggregate(&stacks, &[0, 9, 0]).unwrap(), stacks[1]);
    assert!(weighted_aggregate(&stacks, &[0, 0, 0]).is_err());

    // superposition
    let other: Vec<_> = (0..3).map(|_| random_stack(&mut rng, 2)).collect();
    let sum: Vec<Vec<DenseDelta<f64>>> = stacks
        .iter()
        .zip(&other)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| DenseDelta::new(x.matrix().add(y.matrix()).unwrap())).collect())
        .collect();
    let row = Vector::new(vec![0.2, 0.5, 0.3]).unwrap();
    let lhs = query_aggregate(&row, &sum).unwrap();
    let (ra, rb) = (query_aggregate(&row, &stacks).unwrap(), query_aggregate(&row, &other).unwrap());
    for i in 0..2 {
        assert!(lhs[i].matrix().max_abs_diff(&ra[i].matrix().add(rb[i].matrix()).unwrap()) < 1e-12);
    }
    let bad = vec![random_stack(&mut rng, 2), random_stack(&mut rng, 1)];
    assert!(query_aggregate(&Vector::new(vec![0.5, 0.5]).unwrap(), &bad).is_err());
}

#[test]
fn splice_boundaries() {
    let mut rng = SimRng::new(6);
    let g = random_stack(&mut rng, 10);
    let p = random_stack(&mut rng, 10);
    assert_eq!(splice(&g, &p, 2, 2, 12).unwrap(), p);
    assert_eq!(splice(&g, &p, 2, 13, 12).unwrap(), g);
    assert_eq!(splice(&g, &p, 2, 12, 12).unwrap(), g);
    let s = splice(&g, &p, 2, 9, 12).unwrap();
    for (pos, layer) in s.iter().enumerate() {
        let block = 2 + pos;
        assert_eq!(layer, if block <= 8 { &g[pos] } else { &p[pos] });
    }
    assert!(splice(&g, &p, 2, 1, 12).is_err());
    assert!(splice(&g, &p, 2, 14, 12).is_err());
    assert!(splice(&g[..9], &p, 2, 9, 12).is_err());
}

#[test]
fn text_training_contracts() {
    let mut rng = SimRng::new(7);
    let pkgs: Vec<_> = (0..2).map(|k| package(k, &mut rng, vec![3, 2, 4])).collect();

    let mut frozen = server(ServerConfig { lr: 0.0, ..cfg() }, 1);
    let before = frozen.text_features().unwrap();
    let mut backbone = frozen.text_encoder().clone();
    backbone.set_adapters(Vec::new()).ok();
    let zero_shot: Vec<_> =
        frozen.descriptions().iter().map(|d| frozen.text_encoder().embed(&d.variants[0]).unwrap()).collect();
    assert_eq!(before, zero_shot);
    let out = frozen.train_text_encoder(&pkgs).unwrap();
    assert_eq!(out.text_feats, before);
    assert!(out.mean_loss.is_some());

    let mut srv = server(ServerConfig { lr: 1e-2, text_epochs: 5, ..cfg() }, 1);
    let obj = ObjectiveConfig::default();
    let union: Vec<_> = pkgs.iter().flat_map(|p| p.shared_feats.clone()).collect();
    let ce = |text: &[Vector<f64>]| {
        let probs: Vec<_> = union.iter().map(|(z, _)| predict_probs(z, text, &obj).unwrap()).collect();
        let labels: Vec<_> = union.iter().map(|u| u.1).collect();
        cross_entropy(&probs, &labels).unwrap().loss
    };
    let pre = ce(&srv.text_features().unwrap());
    let out = srv.train_text_encoder(&pkgs).unwrap();
    assert!(ce(&out.text_feats) <= pre);
    for t in &out.text_feats {
        assert!((t.norm() - 1.0).abs() < 1e-12);
    }

    let empty: Vec<UploadPackage<f64>> = pkgs
        .iter()
        .cloned()
        .map(|mut p| {
            p.shared_feats.clear();
            p
        })
        .collect();
    let out = srv.train_text_encoder(&empty).unwrap();
    assert_eq!(out.mean_loss, None);
}

#[test]
fn single_client_federation_is_identity() {
    let mut rng = SimRng::new(8);
    let pkg = package(0, &mut rng, vec![2, 2, 2]);
    let mut srv = server(ServerConfig { ex_query: false, ..cfg() }, 2);
    let text = srv.text_features().unwrap();
    let b = srv.aggregate_and_broadcast(std::slice::from_ref(&pkg), text).unwrap();
    assert_eq!(b.global, pkg.deltas);
    assert_eq!(b.personalized[0], pkg.deltas);
    assert_eq!(srv.global_deltas(), pkg.deltas.as_slice());
}

#[test]
fn identical_uploads_collapse_to_global() {
    let mut rng = SimRng::new(9);
    let base = package(0, &mut rng, vec![2, 0, 5]);
    let pkgs: Vec<_> = (0..3).map(|k| UploadPackage { client_id: k, ..base.clone() }).collect();
    for mode in [AggregationMode::Query, AggregationMode::WeightedOnly] {
        let srv = server(ServerConfig { mode, ..cfg() }, 3);
        let (personal, global, _) = srv.aggregate(&pkgs, true).unwrap();
        for p in &personal {
            for (a, b) in p.iter().zip(&global) {
                assert!(a.matrix().max_abs_diff(b.matrix()) < 1e-12);
            }
        }
    }
}

#[test]
fn spliced_layers_come_from_the_right_source() {
    let mut rng = SimRng::new(10);
    let pkgs: Vec<_> = (0..3).map(|k| package(k, &mut rng, vec![1 + k, 3, k])).collect();
    let srv = server(ServerConfig { boundary_m: 2, ..cfg() }, 4);
    let (personal, global, coeffs) = srv.aggregate(&pkgs, true).unwrap();
    let coeffs = coeffs.unwrap();
    let deltas: Vec<_> = pkgs.iter().map(|p| p.deltas.clone()).collect();
    for k in 0..3 {
        let init = query_aggregate(&Vector::new(coeffs.alpha.row(k).to_vec()).unwrap(), &deltas).unwrap();
        // blocks 1..4 adapted; block 1 is global, blocks 2 and 3 personalized
        assert_eq!(personal[k][0], global[0]);
        assert_eq!(personal[k][1..], init[1..]);
        assert_eq!(coeffs.alpha.get(k, k), 0.0);
    }
    let shuffled = vec![pkgs[1].clone(), pkgs[0].clone(), pkgs[2].clone()];
    assert!(matches!(srv.aggregate(&shuffled, true), Err(Error::Contract(_))));
}

#[test]
fn boundary_is_validated() {
    let rng = SimRng::new(1);
    let text = EncoderState::<f64>::random_backbone(image_config(), 1.0, &rng).unwrap();
    let descs = make_descriptions(3, DescStyle::St, 1, 6, &rng).unwrap();
    for m in [0, 6] {
        let cfg = ServerConfig { boundary_m: m, ..Default::default() };
        assert!(ServerState::new(text.clone(), descs.clone(), image_config(), cfg, rng.clone()).is_err());
    }
}
