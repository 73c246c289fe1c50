mod common;

use std::fs;
use std::io::BufReader;

use common::*;
use qsnn::curves::read_curves;
use qsnn::optim::ScheduleKind;
use qsnn::train::{evaluate, load_data, network_from_checkpoint, run_training_on, write_artifacts, Trainer};
use qsnn::{Checkpoint, Error};

#[test]
fn identical_seeds_give_bit_identical_records() {
    for precision in ["flt32", "int4"] {
        let cfg = tiny_config(precision);
        let data = load_data(&cfg).unwrap();
        let a = run_training_on(&cfg, &data).unwrap();
        let b = run_training_on(&cfg, &data).unwrap();
        assert_eq!(a.record.without_timing(), b.record.without_timing(), "{precision}");
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes(), "{precision}");
        assert_eq!(a.network.params(), b.network.params());

        let mut other = cfg.clone();
        other.seed += 1;
        let c = run_training_on(&other, &load_data(&other).unwrap()).unwrap();
        assert_ne!(a.record.iterations, c.record.iterations);
    }
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    for precision in ["flt32", "int4"] {
        let mut cfg = tiny_config(precision);
        cfg.dropout = 0.2;
        cfg.schedule = ScheduleKind::LossStep;
        let data = load_data(&cfg).unwrap();
        let full = run_training_on(&cfg, &data).unwrap();

        let mut first = Trainer::new(&cfg, &data).unwrap();
        first.train_epoch(&data).unwrap();
        let bytes = first.checkpoint().to_bytes();
        drop(first);
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        let mut resumed = Trainer::resume(&cfg, &data, &ckpt).unwrap();
        assert_eq!(resumed.epoch(), 1);
        assert_eq!(resumed.iteration(), resumed.iters_per_epoch());
        while !resumed.is_done() {
            resumed.train_epoch(&data).unwrap();
        }
        let resumed = resumed.finish(&data).unwrap();

        assert_eq!(resumed.network.params(), full.network.params(), "{precision}");
        assert_eq!(resumed.network.buffers(), full.network.buffers());
        assert_eq!(resumed.record.test_accuracy, full.record.test_accuracy);
        assert_eq!(resumed.record.test_loss, full.record.test_loss);
        assert_eq!(resumed.checkpoint.to_bytes(), full.checkpoint.to_bytes());
        // The resumed record only holds the iterations it ran itself.
        assert_eq!(
            resumed.record.iterations[..],
            full.record.iterations[full.record.iters_per_epoch as usize..]
        );
    }
}

#[test]
fn zero_epoch_budget_evaluates_the_initial_model() {
    let mut cfg = tiny_config("flt32");
    cfg.epochs = 0;
    let data = load_data(&cfg).unwrap();
    let out = run_training_on(&cfg, &data).unwrap();
    assert!(out.record.iterations.is_empty());
    assert!(out.record.epochs.is_empty());
    assert_eq!(out.record.best_epoch, None);
    let mut net = network_from_checkpoint(&cfg, &out.checkpoint).unwrap();
    let ev = evaluate(&mut net, &data.test, cfg.time_steps, cfg.eval_batch_size).unwrap();
    assert_eq!(ev.accuracy, out.record.test_accuracy);
}

#[test]
fn final_model_is_the_best_validation_epoch() {
    let cfg = tiny_config("int4");
    let data = load_data(&cfg).unwrap();
    let out = run_training_on(&cfg, &data).unwrap();
    let best = out.record.best_epoch.unwrap();
    let best_acc = out.record.best_validation_accuracy.unwrap();
    assert_eq!(out.record.epochs[best].validation_accuracy, best_acc);
    assert!(out.record.epochs.iter().all(|e| e.validation_accuracy <= best_acc));
    let mut net = network_from_checkpoint(&cfg, &out.checkpoint).unwrap();
    let val = evaluate(&mut net, &data.validation, cfg.time_steps, cfg.eval_batch_size).unwrap();
    assert_eq!(val.accuracy, best_acc);
    let test = evaluate(&mut net, &data.test, cfg.time_steps, cfg.eval_batch_size).unwrap();
    assert_eq!(test.accuracy, out.record.test_accuracy);
    assert_eq!(test.loss, out.record.test_loss);
}

#[test]
fn early_stopping_halts_after_patience() {
    let mut cfg = tiny_config("flt32");
    cfg.initial_lr = 1e-30;
    cfg.batchnorm = false;
    cfg.epochs = 10;
    cfg.early_stop_patience = 2;
    let data = load_data(&cfg).unwrap();
    let out = run_training_on(&cfg, &data).unwrap();
    // Updates vanish in f32 storage, so epoch 0 stays best.
    assert!(out.record.stopped_early);
    assert_eq!(out.record.epochs.len(), 3);
    assert_eq!(out.record.best_epoch, Some(0));
}

#[test]
fn learning_rate_trace_matches_every_schedule() {
    for kind in ScheduleKind::ALL {
        let mut cfg = tiny_config("flt32");
        cfg.schedule = kind;
        cfg.epochs = 4;
        cfg.cosine_period_epochs = 1;
        cfg.lrstep_interval_epochs = 1;
        cfg.lossstep_patience = 1;
        let data = load_data(&cfg).unwrap();
        let out = run_training_on(&cfg, &data).unwrap();
        assert_eq!(out.record.iterations.len() as u64, 4 * out.record.iters_per_epoch);
        assert!(out.record.lr_mismatches().is_empty(), "{kind:?}");

        let dir = tempfile::tempdir().unwrap();
        write_artifacts(&out, dir.path()).unwrap();
        let rows = read_curves(BufReader::new(fs::File::open(dir.path().join("run.csv")).unwrap())).unwrap();
        assert_eq!(rows.len(), out.record.iterations.len());
        for (row, log) in rows.iter().zip(&out.record.iterations) {
            assert_eq!(
                (row.iteration, row.epoch, row.lr, row.loss),
                (log.iteration, log.epoch, log.lr, log.loss)
            );
        }
    }
}

#[test]
fn artifacts_are_written_and_reload() {
    let cfg = tiny_config("int4");
    let data = load_data(&cfg).unwrap();
    let out = run_training_on(&cfg, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_artifacts(&out, dir.path()).unwrap();
    for f in ["run.csv", "epochs.csv", "model.ckpt", "metadata.toml"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let epochs = fs::read_to_string(dir.path().join("epochs.csv")).unwrap();
    assert_eq!(epochs.lines().count(), 1 + out.record.epochs.len());
    let meta: toml::Value = toml::from_str(&fs::read_to_string(dir.path().join("metadata.toml")).unwrap()).unwrap();
    assert_eq!(meta["test_accuracy"].as_float(), Some(out.record.test_accuracy));
    assert_eq!(meta["datasets"].as_array().unwrap().len(), 4);
    assert_eq!(meta["config"]["precision"].as_str(), Some("int4"));
    let ckpt = Checkpoint::load(dir.path().join("model.ckpt")).unwrap();
    assert_eq!(ckpt, out.checkpoint);
}

#[test]
fn checkpoint_mismatches_are_rejected() {
    let cfg = tiny_config("flt32");
    let data = load_data(&cfg).unwrap();
    let ckpt = Trainer::new(&cfg, &data).unwrap().checkpoint();

    let mut other = cfg.clone();
    other.architecture = "6Conv5-AP4-Dense10".into();
    assert!(matches!(
        Trainer::resume(&other, &data, &ckpt),
        Err(Error::Checkpoint(_))
    ));
    assert!(network_from_checkpoint(&other, &ckpt).is_err());

    let mut reseeded = cfg.clone();
    reseeded.seed = 99;
    assert!(Trainer::resume(&reseeded, &data, &ckpt).is_err());

    let bytes = ckpt.to_bytes();
    for cut in [0, 8, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..cut]),
            Err(Error::Checkpoint(_))
        ));
    }
}

#[test]
fn diverging_run_aborts_with_last_good_state() {
    let mut cfg = tiny_config("flt32");
    cfg.initial_lr = 1e300;
    cfg.grad_clip = false;
    cfg.weight_clip = false;
    let data = load_data(&cfg).unwrap();
    match run_training_on(&cfg, &data) {
        Err(Error::TrainingAborted {
            last_good, diagnostic, ..
        }) => {
            assert!(diagnostic.contains("non-finite"));
            let net = network_from_checkpoint(&cfg, &last_good).unwrap();
            assert!(net.params().iter().all(|p| p.all_finite()));
            let fresh = Trainer::new(&cfg, &data).unwrap();
            assert_eq!(net.params(), fresh.network().params());
        }
        other => panic!(
            "expected TrainingAborted, got {:?}",
            other.map(|o| o.record.test_accuracy)
        ),
    }
}

#[test]
fn unrunnable_preset_is_a_config_error() {
    let cfg = desk_preset("dvs128-int4");
    assert!(matches!(load_data(&cfg), Err(Error::Config(_))));
}
