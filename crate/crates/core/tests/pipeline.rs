use implantmamba::error::Error;
use implantmamba::eval::{cmd_eval, EVAL_CSV, EVAL_JSON, EVAL_SAMPLES_CSV};
use implantmamba::net::ModelConfig;
use implantmamba::phantom::{make_dataset, write_manifest, PhantomParams, Split, TRAIN_FRACTION};
use implantmamba::train::{cmd_train, materialize, train_on, RunConfig, CHECKPOINT_BEST, CHECKPOINT_FINAL};

fn small_run(dir: &std::path::Path) -> RunConfig {
    let records = make_dataset(6, 2, TRAIN_FRACTION, &PhantomParams::default()).unwrap();
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &records).unwrap();
    RunConfig {
        epochs: 2,
        train_limit: Some(2),
        eval_limit: Some(1),
        seed: 4,
        ..RunConfig::new(ModelConfig::tiny(), manifest, dir.join("run"))
    }
}

#[test]
fn train_writes_checkpoints_that_eval_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path());
    let out = cmd_train(&cfg).unwrap();
    assert_eq!(out.steps.len(), 2);
    let epochs: Vec<usize> = out.report.rows.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![0, 1]);
    for name in [CHECKPOINT_BEST, CHECKPOINT_FINAL] {
        assert!(cfg.output_dir.join(name).exists(), "{name}");
    }

    let report =
        cmd_eval(&cfg.output_dir.join(CHECKPOINT_FINAL), &cfg.manifest, Split::Test, Some(&cfg.model)).unwrap();
    assert_eq!(report.summary.samples, 1);
    let last = out.report.last().unwrap();
    assert_eq!(report.summary.dice, last.eval_dice);
    assert_eq!(report.summary.iou, last.eval_iou);
    let eval_dir = dir.path().join("eval");
    report.write(&eval_dir).unwrap();
    for f in [EVAL_CSV, EVAL_SAMPLES_CSV, EVAL_JSON] {
        assert!(eval_dir.join(f).exists(), "{f}");
    }

    let other = ModelConfig { scp_enabled: false, ..cfg.model.clone() };
    let err = cmd_eval(&cfg.output_dir.join(CHECKPOINT_FINAL), &cfg.manifest, Split::Test, Some(&other)).unwrap_err();
    assert!(matches!(err, Error::Integrity(_)), "{err}");
}

#[test]
fn non_finite_input_aborts_with_step_and_norms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path());
    let records = implantmamba::phantom::read_manifest(&cfg.manifest).unwrap();
    let mut train = materialize(&records[..2], 32).unwrap();
    train[0].volume.data_mut()[5] = f32::NAN;
    match train_on(&cfg, &train, &[], None) {
        Err(Error::NonFiniteLoss { step, param_norms }) => {
            assert_eq!(step, 0);
            assert!(param_norms.iter().any(|(n, _)| n == "head.weight"));
            assert!(param_norms.iter().all(|(_, v)| v.is_finite()));
        }
        other => panic!("expected a non-finite loss error, got {:?}", other.map(|o| o.steps.len())),
    }
}

#[test]
fn ablation_emits_nine_rows_to_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { epochs: 1, max_steps: Some(1), ..small_run(dir.path()) };
    let rows = implantmamba::ablate::cmd_ablate(&cfg).unwrap();
    assert_eq!(rows.len(), 9);
    assert!(rows.windows(2).all(|w| w[0].row + 1 == w[1].row));
    let path = dir.path().join("ablation.csv");
    implantmamba::ablate::write_csv(&rows, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("row,layer1,layer2,layer3,layer4,scp,params,dice,iou\n"));
}

#[test]
fn training_is_bitwise_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { max_steps: Some(2), ..small_run(dir.path()) };
    let records = implantmamba::phantom::read_manifest(&cfg.manifest).unwrap();
    let train = materialize(&records[..2], 32).unwrap();
    let eval = materialize(&records[4..5], 32).unwrap();
    let run = |threads| {
        implantmamba::parallel::with_threads(threads, || {
            let out = train_on(&cfg, &train, &eval, None).unwrap();
            let params: Vec<u32> = out.params.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect();
            (out.steps, out.report, params)
        })
    };
    assert_eq!(run(1), run(4));
}
