use super::*;
use crate::client::{upload_cost, CostMode};
use crate::datagen::PartitionKind;
use crate::encoder::Activation;

fn tiny() -> RunConfig {
    RunConfig {
        rounds: 2,
        num_clients: 3,
        batch_size: 16,
        lr: 1e-2,
        rank: 2,
        lora_start: 1,
        boundary_m: 3,
        partition: PartitionKind::Dir { alpha: 0.5 },
        num_classes: 3,
        d_in: 6,
        train_per_class: 30,
        test_per_class: 10,
        num_blocks: 4,
        d_hidden: 8,
        d_embed: 6,
        ..RunConfig::default()
    }
}

fn metrics_bytes(m: &[RoundMetrics]) -> Vec<u8> {
    let mut out = Vec::new();
    write_metrics_jsonl(m, &mut out).unwrap();
    out
}

#[test]
fn zero_rounds_emit_zero_shot_only() {
    let cfg = RunConfig { rounds: 0, ..tiny() };
    let out = run_training::<f64>(&cfg).unwrap();
    assert_eq!(out.metrics.len(), 1);
    let zs = run_baseline::<f64>(&tiny(), RunKind::ZeroShot).unwrap();
    assert_eq!(zs.metrics.len(), 1);
    assert_eq!(zs.metrics[0].global_accuracy, out.metrics[0].global_accuracy);
    assert_eq!(zs.metrics[0].local_accuracy, out.metrics[0].local_accuracy);
    let lo = run_baseline::<f64>(&cfg, RunKind::LocalOnly).unwrap();
    assert_eq!(lo.metrics[0].global_accuracy, out.metrics[0].global_accuracy);
    let raw = run_training::<f64>(&RunConfig { local_eval_mode: LocalEvalMode::RawLocal, ..cfg }).unwrap();
    assert_eq!(raw.metrics[0].local_accuracy, out.metrics[0].local_accuracy);
}

#[test]
fn zero_shot_is_independent_of_rounds() {
    let a = run_baseline::<f64>(&RunConfig { rounds: 1, ..tiny() }, RunKind::ZeroShot).unwrap();
    let b = run_baseline::<f64>(&RunConfig { rounds: 7, ..tiny() }, RunKind::ZeroShot).unwrap();
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn runs_are_deterministic_and_thread_independent() {
    let a = run_training::<f64>(&tiny()).unwrap();
    let b = run_training::<f64>(&tiny()).unwrap();
    let serial = run_training::<f64>(&RunConfig { parallel: false, ..tiny() }).unwrap();
    assert_eq!(metrics_bytes(&a.metrics), metrics_bytes(&b.metrics));
    assert_eq!(metrics_bytes(&a.metrics), metrics_bytes(&serial.metrics));
    assert_eq!(a.checkpoint, serial.checkpoint);
    assert_eq!(a.comm, serial.comm);
}

#[test]
fn metrics_are_well_formed() {
    for kind in [RunKind::Fedalign, RunKind::LocalOnly, RunKind::WeightedOnly] {
        let out = run_baseline::<f64>(&tiny(), kind).unwrap();
        assert_eq!(out.metrics.len(), 3);
        for (t, m) in out.metrics.iter().enumerate() {
            assert_eq!(m.round, t);
            assert!((0.0..=1.0).contains(&m.global_accuracy));
            assert!(m.local_accuracy.iter().flatten().all(|a| (0.0..=1.0).contains(a)));
            assert_eq!(m.mean_local_loss.is_some(), t > 0);
        }
        let comm = kind != RunKind::LocalOnly;
        assert_eq!(out.metrics[1].upload_factored > 0, comm);
        assert_eq!(out.metrics[1].text_loss.is_some(), comm);
    }
}

#[test]
fn single_client_single_round_ledger() {
    let cfg = RunConfig { num_clients: 1, rounds: 1, ex_query: false, partition: PartitionKind::Iid, ..tiny() };
    let out = run_training::<f64>(&cfg).unwrap();
    let totals = comm_totals(&out.comm);
    let terms = out.comm[0].uploads[0];
    assert_eq!(totals.upload_factored, terms.total(CostMode::Factored));
    assert_eq!(terms.weights_factored, cfg.encoder_config().trainable_params());
    assert_eq!(terms.weights_dense, cfg.encoder_config().dense_delta_params());
    assert_eq!(totals.download_text, cfg.num_classes * cfg.d_embed);
    assert_eq!(totals.download_dense, cfg.encoder_config().dense_delta_params() + cfg.num_classes * cfg.d_embed);

    let multi = run_training::<f64>(&RunConfig { rounds: 3, ..tiny() }).unwrap();
    assert_eq!(comm_totals(&multi.comm).download_text, 3 * 3 * 6);
}

#[test]
fn transport_measures_what_upload_cost_predicts() {
    let cfg = tiny();
    let world = World::<f64>::build(&cfg).unwrap();
    let out = run_training::<f64>(&cfg).unwrap();
    assert_eq!(out.comm.len(), cfg.rounds);
    // replay round one by hand to obtain the packages
    let rng = SimRng::new(cfg.seed);
    let mut text = world.backbone.clone();
    text.reset_adapters(&rng.split("text_adapters")).unwrap();
    let server = ServerState::new(
        text,
        world.descriptions.clone(),
        cfg.encoder_config(),
        cfg.server_config(AggregationMode::Query),
        rng.split("server"),
    )
    .unwrap();
    let text0 = server.text_features().unwrap();
    for (k, shard) in world.shards.iter().enumerate() {
        let mut c =
            ClientState::new(k, shard.clone(), &world.backbone, text0.clone(), rng.split_indexed("client", k), cfg.lr)
                .unwrap();
        let (pkg, _) = c.local_update(&cfg.client_config()).unwrap();
        let terms = out.comm[0].uploads[k];
        assert_eq!(terms.total(CostMode::Factored), upload_cost(&pkg, CostMode::Factored, cfg.d_embed));
        assert_eq!(terms.total(CostMode::Dense), upload_cost(&pkg, CostMode::Dense, cfg.d_embed));
    }
}

#[test]
fn evaluation_examples() {
    let cfg = tiny();
    let world = World::<f64>::build(&cfg).unwrap();
    let obj = cfg.objective();
    let zero = zero_stack::<f64>(&cfg);
    let text: Vec<_> = world.descriptions.iter().map(|d| world.backbone.embed(&d.variants[0]).unwrap()).collect();
    let (x, _) = world.test.samples()[0].clone();
    let label = predict_label(&world.backbone.embed(&x).unwrap(), &text, &obj).unwrap();
    let one = Dataset::new(vec![(x, label)], cfg.num_classes).unwrap();
    assert_eq!(evaluate_global(&world.backbone, &zero, &text, &one, &obj).unwrap(), 1.0);

    let acc = evaluate_global(&world.backbone, &zero, &text, &world.test, &obj).unwrap();
    let mut idx: Vec<usize> = (0..world.test.len()).collect();
    SimRng::new(3).shuffle(&mut idx);
    let shuffled = world.test.subset(&idx).unwrap();
    assert_eq!(evaluate_global(&world.backbone, &zero, &text, &shuffled, &obj).unwrap(), acc);
    let empty = world.test.subset(&[]).unwrap();
    assert!(evaluate_global(&world.backbone, &zero, &text, &empty, &obj).is_err());
}

#[test]
fn random_text_features_score_near_chance() {
    let cfg = RunConfig { num_classes: 4, test_per_class: 100, ..tiny() };
    let world = World::<f64>::build(&cfg).unwrap();
    let zero = zero_stack::<f64>(&cfg);
    let n = world.test.len() as f64;
    let sigma = (0.25 * 0.75 / n).sqrt();
    let mut accs = Vec::new();
    for seed in 0..20 {
        // random unit text features carry no class information
        let mut r = SimRng::new(seed);
        let text: Vec<Vector<f64>> = (0..4)
            .map(|_| {
                crate::numerics::l2_normalize(
                    &Vector::new((0..cfg.d_embed).map(|_| r.standard_normal()).collect()).unwrap(),
                )
                .unwrap()
            })
            .collect();
        accs.push(evaluate_global(&world.backbone, &zero, &text, &world.test, &cfg.objective()).unwrap());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.25).abs() < 3.0 * sigma + 0.1, "mean accuracy {mean}");
}

#[test]
fn local_modes_coincide_for_one_client_and_differ_otherwise() {
    let one = RunConfig { num_clients: 1, ex_query: false, partition: PartitionKind::Iid, ..tiny() };
    let a =
        run_training::<f64>(&RunConfig { local_eval_mode: LocalEvalMode::AggregatedWithSelf, ..one.clone() }).unwrap();
    let b = run_training::<f64>(&RunConfig { local_eval_mode: LocalEvalMode::RawLocal, ..one }).unwrap();
    assert_eq!(a.checkpoint.local, b.checkpoint.local);
    assert_eq!(a.final_metrics().local_accuracy, b.final_metrics().local_accuracy);

    let het = RunConfig { partition: PartitionKind::Dir { alpha: 0.1 }, ..tiny() };
    let a =
        run_training::<f64>(&RunConfig { local_eval_mode: LocalEvalMode::AggregatedWithSelf, ..het.clone() }).unwrap();
    let b = run_training::<f64>(&RunConfig { local_eval_mode: LocalEvalMode::RawLocal, ..het }).unwrap();
    assert_ne!(a.checkpoint.local, b.checkpoint.local);
    assert_eq!(a.final_metrics().local_eval_mode, LocalEvalMode::AggregatedWithSelf);
    assert_eq!(b.final_metrics().local_eval_mode, LocalEvalMode::RawLocal);
}

#[test]
fn auto_mode_follows_the_partition() {
    let auto = LocalEvalMode::Auto;
    assert_eq!(auto.resolve(PartitionKind::Path { classes_per_client: 2 }), LocalEvalMode::RawLocal);
    assert_eq!(auto.resolve(PartitionKind::Iid), LocalEvalMode::AggregatedWithSelf);
    assert_eq!(auto.resolve(PartitionKind::Dir { alpha: 0.1 }), LocalEvalMode::AggregatedWithSelf);
    assert_eq!(LocalEvalMode::RawLocal.resolve(PartitionKind::Iid), LocalEvalMode::RawLocal);
}

#[test]
fn checkpoints_replay_final_metrics() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [RunKind::Fedalign, RunKind::LocalOnly] {
        let out = run_baseline::<f64>(&tiny(), kind).unwrap();
        write_run(&out, dir.path()).unwrap();
        let ckpt: Checkpoint<f64> = read_checkpoint(&dir.path().join(CHECKPOINT_DIR)).unwrap();
        assert_eq!(ckpt, out.checkpoint);
        let world = World::<f64>::build(&out.config).unwrap();
        let (global, local) = score_checkpoint(&world, &ckpt, &out.config.objective()).unwrap();
        assert_eq!(global, out.final_metrics().global_accuracy);
        assert_eq!(local, out.final_metrics().local_accuracy);
        let back = read_metrics_jsonl(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(back, out.metrics);
    }
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = RunConfig::smoke();
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    let over = RunConfig::from_toml_with(
        "rounds = 3\nmu = 0.5\n",
        &[
            ("rounds".into(), "0".into()),
            ("partition".into(), "path:2".into()),
            ("sim-kind".into(), "euclidean".into()),
            ("lr".into(), "1".into()),
            ("ex_query".into(), "false".into()),
        ],
    )
    .unwrap();
    assert_eq!(over.rounds, 0);
    assert_eq!(over.mu, 0.5);
    assert_eq!(over.lr, 1.0);
    assert!(!over.ex_query);
    assert_eq!(over.partition, PartitionKind::Path { classes_per_client: 2 });
    assert_eq!(over.sim_kind, crate::SimKind::Euclidean);
    assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_toml("partition = \"path:99\""), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_toml("boundary_m = 20"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_toml("num_clients = 1"), Err(Error::Config(_))));
}

#[test]
fn protocol_defaults() {
    let c = RunConfig::default();
    assert_eq!((c.rounds, c.num_clients, c.local_epochs, c.batch_size), (10, 5, 1, 64));
    assert_eq!((c.tau, c.lr, c.mu, c.gamma), (2.66, 1e-3, 0.1, 0.25));
    assert_eq!((c.rank, c.lora_start, c.boundary_m), (4, 2, 9));
    assert_eq!(c.encoder_config().activation, Activation::Tanh);
}
