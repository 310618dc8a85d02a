use std::path::Path;

use tetranet::arch::{Dec2Variant, ModelConfig};
use tetranet::data::{generate_phantoms, Dataset, PhantomSpec, RegistrationPair, Volume};
use tetranet::train::{
    evaluate, pretrain_then_extend, read_epoch_log, run_ablation, AblationSuite, Checkpoint, TrainConfig, TrainOutput,
    Trainer,
};
use tetranet::Error;

fn tiny_data(count: usize) -> Dataset {
    let spec = PhantomSpec {
        dims: [8, 8, 8],
        field_amplitude: 1.0,
        field_smoothness: 2.0,
        seed: 21,
        ..Default::default()
    };
    let ps = generate_phantoms(&spec, count + 1).unwrap();
    Dataset::from_phantoms(&ps[..count], &ps[count..])
}

fn tiny_model(levels: usize) -> ModelConfig {
    ModelConfig {
        decoder_levels: levels,
        ..ModelConfig::with_widths(&[3, 4])
    }
}

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 1e-3,
        val_every: 1,
        seed: 5,
        ..Default::default()
    }
}

fn quiet(dir: Option<&Path>) -> TrainOutput {
    TrainOutput {
        dir: dir.map(Path::to_path_buf),
        verbose: false,
    }
}

#[test]
fn identical_runs_are_bit_identical() {
    let data = tiny_data(3);
    let run = || {
        let mut t = Trainer::from_configs(&tiny_model(2), &tiny_train(3)).unwrap();
        t.train(&data, &quiet(None)).unwrap();
        t
    };
    let (a, b) = (run(), run());
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.log, b.log);
}

#[test]
fn resume_reproduces_the_next_epoch() {
    let data = tiny_data(3);
    let mut full = Trainer::from_configs(&tiny_model(2), &tiny_train(3)).unwrap();
    full.train(&data, &quiet(None)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::from_configs(&tiny_model(2), &tiny_train(2)).unwrap();
    first.train(&data, &quiet(Some(dir.path()))).unwrap();
    let mut resumed = Trainer::from_checkpoint(Checkpoint::load(&dir.path().join("final")).unwrap()).unwrap();
    resumed.cfg.epochs = 3;
    resumed.train(&data, &quiet(Some(dir.path()))).unwrap();

    assert_eq!(resumed.epoch, 3);
    assert_eq!(resumed.log[0].loss.to_bits(), full.log[2].loss.to_bits());
    assert_eq!(resumed.model.params(), full.model.params());
    assert_eq!(resumed.adam, full.adam);
    let log = read_epoch_log(&dir.path().join("epochs.csv")).unwrap();
    assert_eq!(log.len(), 3);
    assert_eq!(log, full.log);
}

#[test]
fn checkpoint_round_trip_forward_is_bit_exact() {
    let data = tiny_data(2);
    for variant in Dec2Variant::ALL {
        let cfg = ModelConfig {
            dec2_variant: variant,
            ..tiny_model(2)
        };
        let mut t = Trainer::from_configs(&cfg, &tiny_train(1)).unwrap();
        t.train(&data, &quiet(None)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.checkpoint().save(dir.path()).unwrap();
        let ck = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(ck, t.checkpoint());
        let model = ck.model().unwrap();
        let (f, m) = (data.val[0].fixed.to_tensor(), data.val[0].moving.to_tensor());
        assert_eq!(model.predict(&f, &m).unwrap(), t.model.predict(&f, &m).unwrap(), "{variant}");
    }
}

#[test]
fn checkpoint_with_tampered_shape_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::from_configs(&tiny_model(1), &tiny_train(1)).unwrap();
    t.checkpoint().save(dir.path()).unwrap();
    let params = dir.path().join("params.bin");
    let mut bytes = std::fs::read(&params).unwrap();
    bytes.truncate(bytes.len() - 8);
    std::fs::write(&params, bytes).unwrap();
    let e = Checkpoint::load(dir.path()).unwrap_err();
    assert!(matches!(e, Error::Checkpoint(_)), "{e}");
}

#[test]
fn epoch_log_has_one_row_per_epoch_and_loss_falls() {
    let data = tiny_data(3);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::from_configs(&tiny_model(2), &tiny_train(12)).unwrap();
    t.train(&data, &quiet(Some(dir.path()))).unwrap();
    let log = read_epoch_log(&dir.path().join("epochs.csv")).unwrap();
    assert_eq!(log.len(), 12);
    assert!(log.iter().all(|r| r.val_mean_dice.is_some()));
    assert!(log[11].loss < log[0].loss, "{} vs {}", log[11].loss, log[0].loss);
    assert!(dir.path().join("final/manifest.txt").exists());
    assert!(dir.path().join("best/manifest.txt").exists());
}

#[test]
fn pretraining_transfers_stage_one_weights_exactly() {
    let data = tiny_data(3);
    let cfg = TrainConfig {
        pretrain_epochs: Some(2),
        ..tiny_train(2)
    };
    let dir = tempfile::tempdir().unwrap();
    let r = pretrain_then_extend(&data, &tiny_model(2), &cfg, &quiet(Some(dir.path()))).unwrap();
    assert_eq!(r.stage1.epoch, 2);
    assert_eq!(r.stage2.epoch, 2);
    assert!(dir.path().join("stage1/epochs.csv").exists());
    assert!(dir.path().join("stage2/epochs.csv").exists());

    // Rebuild the stage-2 starting point and compare with stage 1.
    let mut start = tetranet::arch::build_model(&tiny_model(2), cfg.seed).unwrap();
    let copied = tetranet::train::transfer_pretrained(&r.stage1.model, &mut start).unwrap();
    assert!(!copied.is_empty());
    for name in &copied {
        assert_eq!(start.params().get(name), r.stage1.model.params().get(name), "{name}");
    }
    for name in start.params().names() {
        if name.starts_with("enc.") || name.starts_with("dec1.") {
            assert!(copied.iter().any(|c| c == name), "{name} not transferred");
        }
    }
    let direct = evaluate(&start, &data.val).unwrap();
    assert_eq!(direct, r.stage2_start);
    assert!(r.stage2_start.dice_after >= r.untrained.dice_after, "{:?} vs {:?}", r.stage2_start, r.untrained);
}

#[test]
fn pretraining_needs_two_levels() {
    let e = pretrain_then_extend(&tiny_data(1), &tiny_model(1), &tiny_train(1), &quiet(None)).unwrap_err();
    assert_eq!(e.exit_code(), 1);
}

#[test]
fn ablation_tables_have_the_expected_rows() {
    let data = tiny_data(2);
    let cfg = tiny_train(1);
    let levels = run_ablation(AblationSuite::Levels, &data, &tiny_model(2), &cfg, &quiet(None)).unwrap();
    let names: Vec<&str> = levels.rows.iter().map(|r| r.config.as_str()).collect();
    assert_eq!(names, ["levels_1", "levels_2", "levels_3", "levels_4"]);
    assert!(levels.rows.windows(2).all(|w| w[1].param_count > w[0].param_count));

    let skips = run_ablation(AblationSuite::EncSkips, &data, &tiny_model(2), &cfg, &quiet(None)).unwrap();
    assert_eq!(skips.rows.len(), 8);
    for v in Dec2Variant::ALL {
        assert_eq!(skips.rows.iter().filter(|r| r.config.starts_with(&format!("{v}/"))).count(), 2);
        let on = skips.get(&format!("{v}/skips_on")).unwrap();
        let off = skips.get(&format!("{v}/skips_off")).unwrap();
        assert!(on.param_count > off.param_count, "{v}");
    }
    let mut csv = Vec::new();
    skips.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 9);
}

#[test]
fn non_finite_loss_is_a_numerical_error() {
    let mut data = tiny_data(1);
    let dims = data.train[0].fixed.dims;
    data.train[0] = RegistrationPair {
        fixed: Volume::from_fn(dims, |p| if p == [2, 2, 2] { f64::NAN } else { 0.5 }),
        ..data.train[0].clone()
    };
    let mut t = Trainer::from_configs(&tiny_model(1), &tiny_train(1)).unwrap();
    let e = t.train(&data, &quiet(None)).unwrap_err();
    assert!(matches!(e, Error::Numerical(_)), "{e}");
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("epoch 1"), "{e}");
}
