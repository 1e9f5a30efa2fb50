use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck;
use crate::data::synth::{generate, SynthConfig};
use crate::data::Point;

fn tiny_config(p2sa: P2saConfig) -> ModelConfig {
    let mut encoder = EncoderConfig::with_width(16);
    for (spec, c) in encoder.conv1d.iter_mut().zip([8, 8, 8, 8, 16, 16]) {
        spec.channels = c;
    }
    ModelConfig {
        encoder,
        p2sa: P2saConfig {
            heads: 2,
            layers: 1,
            ..p2sa
        },
        decoder: DecoderConfig { max_len: 32 },
    }
}

fn dataset(n: usize, seed: u64) -> Vec<TrajectorySequence> {
    let cfg = SynthConfig {
        min_len: 2,
        max_len: 3,
        ..SynthConfig::default()
    };
    generate(&cfg, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn state(p2sa: P2saConfig, seed: u64) -> (ModelState, Vec<TrajectorySequence>) {
    let data = dataset(6, seed);
    let vocab = Vocabulary::build(&data).unwrap();
    (
        ModelState::new(tiny_config(p2sa), vocab, seed).unwrap(),
        data,
    )
}

fn nonzero_prefixes(
    store: &ParamStore<f64>,
    grads: &crate::autodiff::Gradients<f64>,
) -> Vec<&'static str> {
    prefix::ALL
        .into_iter()
        .filter(|p| {
            store
                .iter()
                .filter(|(_, n, _)| n.starts_with(&format!("{p}.")))
                .any(|(id, _, _)| grads.param(id).is_some_and(|g| g.iter().any(|v| *v != 0.0)))
        })
        .collect()
}

#[test]
fn loss_composition_is_exact() {
    let (st, data) = state(P2saConfig::default(), 1);
    let batch: Vec<_> = data[..3].iter().map(|s| st.example(s).unwrap()).collect();
    for lambda in [2.0, 0.0, 0.7] {
        let mut g = Graph::with_params(&st.params);
        let parts = st.model.total_loss(&mut g, &batch, lambda).unwrap();
        let v = parts.values(&g);
        assert!(v.align > 0.0);
        let expect = v.l1d + v.l2d + lambda * v.align;
        assert!((v.all - expect).abs() <= 1e-6 * expect.abs(), "λ={lambda}");
        if lambda == 0.0 {
            let f = |x: Var| g.value(x).item();
            assert_eq!(f(parts.all), f(parts.l1d) + f(parts.l2d));
        }
    }
}

#[test]
fn components_recompute_independently() {
    let (st, data) = state(P2saConfig::default(), 2);
    let batch: Vec<_> = data[..3].iter().map(|s| st.example(s).unwrap()).collect();
    let mut g = Graph::with_params(&st.params);
    let fused = st.model.total_loss(&mut g, &batch, 2.0).unwrap().values(&g);
    let mut sums = [0.0f64; 3];
    for ex in &batch {
        let mut g = Graph::with_params(&st.params);
        let (a, b, c) = st.model.sample_losses(&mut g, ex).unwrap();
        sums[0] += g.value(a).item() as f64;
        sums[1] += g.value(b).item() as f64;
        sums[2] += g.value(c.unwrap()).item() as f64;
    }
    for (got, sum) in [fused.l1d, fused.l2d, fused.align].into_iter().zip(sums) {
        assert!((got - sum / 3.0).abs() < 1e-5 * got.abs().max(1.0));
    }
}

#[test]
fn gradient_flow_matrix() {
    for sg in [true, false] {
        let cfg = tiny_config(P2saConfig {
            use_stop_gradient: sg,
            ..P2saConfig::default()
        });
        let data = dataset(2, 3);
        let vocab = Vocabulary::build(&data).unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::new(
            &mut ParamBuilder::init(&mut store, &mut rng),
            &cfg,
            vocab.len(),
        )
        .unwrap();
        let ex = Example::new(&data[0], &vocab).unwrap();

        let probe = |pick: usize| {
            let mut g = Graph::with_params(&store);
            let (a, b, c) = model.sample_losses(&mut g, &ex).unwrap();
            let loss = [a, b, c.unwrap()][pick];
            let grads = g.backward(loss).unwrap();
            nonzero_prefixes(&store, &grads)
        };
        assert_eq!(
            probe(0),
            [
                prefix::TRAJ_CONV,
                prefix::TRAJ_GRU,
                prefix::P2SA,
                prefix::TRAJ_DEC
            ]
        );
        assert_eq!(
            probe(1),
            [prefix::IMG_CNN, prefix::IMG_GRU, prefix::IMG_DEC]
        );
        if sg {
            assert_eq!(probe(2), [prefix::TRAJ_CONV, prefix::P2SA]);
        } else {
            assert_eq!(probe(2), [prefix::TRAJ_CONV, prefix::P2SA, prefix::IMG_CNN]);
        }
    }
}

#[test]
fn parameter_count_audit() {
    let (base, _) = state(P2saConfig::disabled(), 4);
    assert!(base.model.p2sa.is_none());
    assert_eq!(base.params.numel_with_prefix("p2sa."), 0);
    let per_prefix: usize = prefix::ALL
        .iter()
        .map(|p| base.params.numel_with_prefix(&format!("{p}.")))
        .sum();
    assert_eq!(per_prefix, base.num_parameters());

    let (level1, _) = state(P2saConfig::ablation(1).unwrap(), 4);
    assert_eq!(level1.num_parameters(), base.num_parameters());
    let (rope_only, _) = state(
        P2saConfig {
            use_rope: true,
            ..P2saConfig::disabled()
        },
        4,
    );
    assert!(rope_only.model.p2sa.is_some());
    assert_eq!(rope_only.num_parameters(), base.num_parameters());

    let transformer = {
        let (s, _) = state(P2saConfig::ablation(2).unwrap(), 4);
        s.params.numel_with_prefix("p2sa.")
    };
    // one layer at d=16, ff 32: 2 norms + 4 projections + feed-forward
    assert_eq!(
        transformer,
        2 * 2 * 16 + 4 * (16 * 16 + 16) + (16 * 32 + 32) + (32 * 16 + 16)
    );
    for level in 2..=5 {
        let (s, _) = state(P2saConfig::ablation(level).unwrap(), 4);
        assert_eq!(
            s.num_parameters(),
            base.num_parameters() + transformer,
            "level {level}"
        );
    }
}

#[test]
fn inference_never_touches_image_stream() {
    let (mut st, data) = state(P2saConfig::default(), 5);
    let before: Vec<_> = data.iter().map(|s| st.infer(s).unwrap()).collect();

    let mut g = Graph::with_params(&st.params);
    st.model
        .infer_tokens(&mut g, &normalize(&data[0]).unwrap())
        .unwrap();
    assert!(g
        .bound_params()
        .all(|(id, _)| !st.params.name(id).starts_with("img.")));
    drop(g);

    let image_ids: Vec<_> = st
        .params
        .iter()
        .filter(|(_, n, _)| n.starts_with("img."))
        .map(|(id, _, _)| id)
        .collect();
    assert!(!image_ids.is_empty());
    for id in image_ids {
        st.params
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let after: Vec<_> = data.iter().map(|s| st.infer(s).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn inference_handles_pen_up_only_input() {
    let (st, _) = state(P2saConfig::default(), 6);
    let points = (0..20).map(|i| Point::new(i as f64, 3.0, false)).collect();
    let out = st
        .infer(&TrajectorySequence::new("blank", points, ""))
        .unwrap();
    assert!(out.chars().count() <= 32);
}

fn quick_train(seed: u64) -> (ModelState, TrainReport) {
    let (mut st, data) = state(P2saConfig::default(), seed);
    let cfg = TrainConfig {
        batch_size: 3,
        epochs: 2,
        lr_max: 1e-3,
        seed,
        ..TrainConfig::default()
    };
    let (tr, val) = split_dataset(&data, 0.2, seed);
    let report = train(&mut st, &tr, &val, &cfg, |_| {}).unwrap();
    (st, report)
}

#[test]
fn seeded_training_is_deterministic() {
    let (a, ra) = quick_train(7);
    let (b, rb) = quick_train(7);
    assert_eq!(ra, rb);
    assert_eq!(write_checkpoint(&a), write_checkpoint(&b));
    assert_eq!(ra.steps, 4);
    assert_eq!(ra.epochs.len(), 2);
    assert!(ra.epochs.iter().all(|e| e.val_cer.is_some()));
    let first = ra.log[0];
    assert_eq!(first.lr, 1e-3);
    let json = serde_json::to_value(first).unwrap();
    let mut keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(keys, ["L_1d", "L_2d", "L_align", "L_all", "lr", "step"]);
}

#[test]
fn max_steps_caps_training_and_schedule() {
    let (mut st, data) = state(P2saConfig::disabled(), 8);
    let cfg = TrainConfig {
        batch_size: 2,
        epochs: 10,
        max_steps: Some(3),
        augment: false,
        ..TrainConfig::default()
    };
    let report = train(&mut st, &data, &[], &cfg, |_| {}).unwrap();
    assert_eq!(report.steps, 3);
    assert!(report.log.iter().all(|r| r.losses.align == 0.0));
    assert!(report.log[2].lr < report.log[1].lr);
}

#[test]
fn divergence_keeps_last_good_parameters() {
    let (mut st, data) = state(P2saConfig::default(), 9);
    let id = st.params.id("traj.dec.out.b").unwrap();
    st.params.get_mut(id).data_mut()[3] = f32::NAN;
    let snapshot = write_checkpoint(&st);
    let cfg = TrainConfig {
        batch_size: 2,
        epochs: 1,
        ..TrainConfig::default()
    };
    let err = train(&mut st, &data, &[], &cfg, |_| {}).unwrap_err();
    match err {
        TrainError::Diverged { step, component } => {
            assert_eq!((step, component.as_str()), (0, "L_1d"))
        }
        e => panic!("unexpected {e}"),
    }
    assert_eq!(write_checkpoint(&st), snapshot);
}

#[test]
fn train_config_validation() {
    TrainConfig::default().validate().unwrap();
    for bad in [
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr_max: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr_min: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lambda_align: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            val_fraction: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            max_steps: Some(0),
            ..TrainConfig::default()
        },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    let err = serde_json::from_str::<TrainConfig>(r#"{"batch_size": 4, "bogus": 1}"#).unwrap_err();
    assert!(err.to_string().contains("bogus"));
}

#[test]
fn split_is_seeded_and_disjoint() {
    let data = dataset(20, 10);
    let (tr, val) = split_dataset(&data, 0.1, 3);
    assert_eq!((tr.len(), val.len()), (18, 2));
    let (tr2, val2) = split_dataset(&data, 0.1, 3);
    assert_eq!(tr, tr2);
    assert_eq!(val, val2);
    assert!(val.iter().all(|v| !tr.iter().any(|t| t.id == v.id)));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (st, _) = quick_train(11);
    let data = dataset(6, 11);
    let bytes = write_checkpoint(&st);
    let loaded = read_checkpoint(&bytes).unwrap();
    assert_eq!(write_checkpoint(&loaded), bytes);
    assert_eq!(loaded.config, st.config);
    assert_eq!(loaded.vocab, st.vocab);
    for s in &data {
        assert_eq!(loaded.infer(s).unwrap(), st.infer(s).unwrap());
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&st, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(write_checkpoint(&load_checkpoint(&path).unwrap()), bytes);
    assert!(matches!(
        load_checkpoint(&dir.path().join("missing")),
        Err(CheckpointError::Io { .. })
    ));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (st, _) = state(P2saConfig::default(), 12);
    let bytes = write_checkpoint(&st);
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;

    assert!(matches!(
        read_checkpoint(&bytes[..bytes.len() - 4]),
        Err(CheckpointError::Format(_))
    ));
    assert!(matches!(
        read_checkpoint(&bytes[..5]),
        Err(CheckpointError::Format(_))
    ));
    assert!(matches!(
        read_checkpoint(&bytes[..8 + header_len / 2]),
        Err(CheckpointError::Format(_))
    ));

    let header = std::str::from_utf8(&bytes[8..8 + header_len]).unwrap();
    let rebuild = |h: String| {
        let mut out = (h.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(h.as_bytes());
        out.extend_from_slice(&bytes[8 + header_len..]);
        out
    };
    let unknown = header.replacen("\"use_rope\"", "\"use_ropes\"", 1);
    assert!(matches!(
        read_checkpoint(&rebuild(unknown)),
        Err(CheckpointError::Format(_))
    ));
    // a config without the transformer no longer matches the manifest
    let mismatch = header.replacen("\"use_transformer\":true", "\"use_transformer\":false", 1);
    assert!(matches!(
        read_checkpoint(&rebuild(mismatch)),
        Err(CheckpointError::Mismatch(_))
    ));
}

#[test]
fn all_three_losses_pass_gradcheck() {
    let cfg = tiny_config(P2saConfig {
        use_stop_gradient: false,
        ..P2saConfig::default()
    });
    let mut cfg = cfg;
    cfg.encoder.d = 8;
    cfg.encoder.conv1d.iter_mut().for_each(|c| c.channels = 4);
    cfg.encoder.conv1d[5].channels = 8;
    cfg.encoder.cnn2d.stem_channels = 2;
    for (s, c) in cfg.encoder.cnn2d.stages.iter_mut().zip([2, 4, 8, 8]) {
        s.channels = c;
    }
    cfg.encoder.gru_layers = 1;
    let points = (0..12)
        .map(|i| {
            Point::new(
                i as f64 * 2.0,
                16.0 + 8.0 * ((i as f64) * 0.7).sin(),
                i != 6,
            )
        })
        .collect();
    let seq = normalize(&TrajectorySequence::new("g", points, "ab")).unwrap();
    let vocab = Vocabulary::from_symbols("ab".chars()).unwrap();
    let ex = Example::new(&seq, &vocab).unwrap();
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = Model::new(
        &mut ParamBuilder::init(&mut store, &mut rng),
        &cfg,
        vocab.len(),
    )
    .unwrap();
    // zero biases put ReLU inputs exactly on the kink for dead rows
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, n, _)| n.ends_with(".b"))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-0.1..0.1));
    }
    for pick in 0..3 {
        let report =
            gradcheck::check_params_strided(&store, 1e-5, 7, |g| -> Result<Var, ModelError> {
                let (a, b, c) = model.sample_losses(g, &ex)?;
                Ok([a, b, c.unwrap()][pick])
            })
            .unwrap();
        assert!(report.max_rel_error < 1e-5, "loss {pick}: {report:?}");
    }
}
