use calibra::fusion::combine;
use calibra::losses::consistency_loss;
use calibra::model::Network;
use calibra::pipeline::clean_pass;
use calibra::synthdata::{augment_strong, AugmentParams, Dataset};
use calibra::tensor::Tape;
use calibra::trainer::{train, RunState, TrainConfig};
use calibra::{explain, Error};

fn small_cfg() -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.net.widths = [4, 4, 8, 8, 8];
    c.epochs = 3;
    c.cam_start = 1;
    c.consistency_start = 2;
    c.batch_size = 4;
    c.unlabelled_batch_size = 2;
    c.ig_steps = 2;
    c
}

fn small_data() -> Dataset {
    Dataset::generate(1, 6, 32, 0.5, 0.34).unwrap()
}

#[test]
fn runs_are_deterministic() {
    let (cfg, data) = (small_cfg(), small_data());
    let a = train(&data, &cfg, None, None).unwrap();
    let b = train(&data, &cfg, None, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resume_replays_the_uninterrupted_run() {
    let (cfg, data) = (small_cfg(), small_data());
    let whole = train(&data, &cfg, None, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let first = train(&data, &TrainConfig { epochs: 2, ..cfg.clone() }, None, None).unwrap();
    let path = dir.path().join("ckpt.bin");
    first.save(&path).unwrap();
    let loaded = RunState::load(&path).unwrap();
    assert_eq!(loaded, first);
    let resumed = train(&data, &cfg, Some(loaded), None).unwrap();
    assert_eq!(resumed.history, whole.history);
    assert_eq!(resumed.net, whole.net);
    assert_eq!(resumed.adam, whole.adam);
}

#[test]
fn resume_rejects_a_different_configuration() {
    let (cfg, data) = (small_cfg(), small_data());
    let state = train(&data, &TrainConfig { epochs: 1, ..cfg.clone() }, None, None).unwrap();
    let other = TrainConfig { lr: 5e-4, ..cfg };
    assert!(matches!(train(&data, &other, Some(state), None), Err(Error::Config(_))));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = small_cfg();
    let state = RunState::new(&cfg);
    let mut bytes = Vec::new();
    state.write_to(&mut bytes).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");

    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(RunState::load(&path).is_err());

    let mut versioned = bytes.clone();
    versioned[4] = 99;
    std::fs::write(&path, &versioned).unwrap();
    let err = RunState::load(&path).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");

    let mut trailing = bytes.clone();
    trailing.push(0);
    std::fs::write(&path, &trailing).unwrap();
    assert!(RunState::load(&path).is_err());
}

#[test]
fn loss_columns_open_at_their_gates() {
    let cfg = TrainConfig {
        epochs: 4,
        cam_start: 1,
        consistency_start: 3,
        ..small_cfg()
    };
    let state = train(&small_data(), &cfg, None, None).unwrap();
    for h in &state.history {
        assert!(h.total.is_finite());
        assert_eq!(h.cam > 0.0, h.epoch >= 1, "cam at epoch {}", h.epoch);
        assert_eq!(h.unsupervised > 0.0, h.epoch >= 3, "L_u at epoch {}", h.epoch);
    }
}

#[test]
fn ablated_cam_loss_leaves_its_column_empty() {
    let mut cfg = small_cfg();
    cfg.ablate.cam_loss = true;
    let state = train(&small_data(), &cfg, None, None).unwrap();
    assert!(state.history.iter().all(|h| h.cam == 0.0));
}

#[test]
fn a_closed_consistency_gate_matches_supervised_only() {
    let data = small_data();
    let gated = TrainConfig {
        consistency_start: 10,
        ..small_cfg()
    };
    let baseline = TrainConfig {
        supervised_only: true,
        ..small_cfg()
    };
    let a = train(&data, &gated, None, None).unwrap();
    let b = train(&data, &baseline, None, None).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.net, b.net);
}

#[test]
fn weak_labels_add_classification_terms_on_unlabelled_data() {
    let data = small_data();
    let plain = train(&data, &small_cfg(), None, None).unwrap();
    let weak = train(
        &data,
        &TrainConfig {
            weak_labels: true,
            ..small_cfg()
        },
        None,
        None,
    )
    .unwrap();
    assert_eq!(plain.history[..2], weak.history[..2]);
    assert_ne!(plain.history[2], weak.history[2]);
}

#[test]
fn non_finite_inputs_abort_with_the_sample_id() {
    let mut data = small_data();
    let id = data.manifest.labelled_train[0].clone();
    let at = data.samples.iter().position(|s| s.id == id).unwrap();
    data.samples[at].image[5] = f64::NAN;
    let err = train(&data, &small_cfg(), None, None).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
    assert!(err.to_string().contains(&id), "{err}");
}

/// Build the pseudo-label and the consistency loss on one shared tape: the
/// loss must not send any gradient into the clean pass.
#[test]
fn pseudo_label_targets_carry_no_gradient() {
    let cfg = small_cfg();
    let net = Network::new(cfg.net.clone(), 3);
    let data = small_data();
    let sample = data.get(&data.manifest.unlabelled_train[0]).unwrap();
    let size = sample.size;

    let mut tape = Tape::<f64>::new();
    let bound = net.bind(&mut tape, true);
    let clean_x = Network::image_leaf(&mut tape, &sample.image, (size, size), true).unwrap();
    let mut clean = net.encoder_forward(&mut tape, &bound, clean_x).unwrap();
    net.classify(&mut tape, &mut clean, true).unwrap();
    let clean_seg = net.decode(&mut tape, &bound, &clean).unwrap();
    let caaml = explain::refined_caam(&tape, &clean, size, size, true).unwrap();
    let saliency = vec![0.0; size * size];
    let pseudo = combine(&caaml, &saliency, &tape.value_f64(clean_seg), size, size, &cfg.fusion()).unwrap();

    let aug = augment_strong(&sample.image, size, AugmentParams::sample(9));
    let aug_x = Network::image_leaf(&mut tape, &aug, (size, size), false).unwrap();
    let bundle = net.encoder_forward(&mut tape, &bound, aug_x).unwrap();
    let seg = net.decode(&mut tape, &bound, &bundle).unwrap();
    let lu = consistency_loss(&mut tape, seg, &pseudo.foreground(), 0.5).unwrap();
    tape.backward(lu).unwrap();

    for v in [clean_seg, clean_x, clean.features[4], clean.logits.unwrap()] {
        assert!(tape.grad_f64(v).iter().all(|&g| g == 0.0));
    }
    assert!(tape.grad_f64(seg).iter().any(|&g| g != 0.0));

    // the same parameter gradient comes out of a tape that never saw the clean pass
    let mut alone = Tape::<f64>::new();
    let b2 = net.bind(&mut alone, true);
    let x2 = Network::image_leaf(&mut alone, &aug, (size, size), false).unwrap();
    let bundle2 = net.encoder_forward(&mut alone, &b2, x2).unwrap();
    let seg2 = net.decode(&mut alone, &b2, &bundle2).unwrap();
    let lu2 = consistency_loss(&mut alone, seg2, &pseudo.foreground(), 0.5).unwrap();
    alone.backward(lu2).unwrap();
    for (a, b) in bound.vars().iter().zip(b2.vars()) {
        assert_eq!(tape.grad_f64(*a), alone.grad_f64(*b));
    }

    // and the library's clean pass produces the same maps
    let lib = clean_pass::<f64>(&net, &sample.image, size, None, None, true).unwrap();
    assert_eq!(lib.caaml, caaml);
}
