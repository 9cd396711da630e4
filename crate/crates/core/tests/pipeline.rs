//! End-to-end runs of the harness on a tiny configuration.

use std::fs;

use mitnet::dataset::Dataset;
use mitnet::harness::{
    cmd_eval, cmd_gen_data, cmd_reconstruct, cmd_train, read_frame_csv, run_experiment, write_frame_csv,
    ExperimentConfig, FrameSource, Method, MethodSpec, Reconstructor, Trainable, AVERAGE,
};
use mitnet::pgm::GrayImage;

const TINY: &str = r#"
methods = ["ccnn", "fcn", "nr"]
image_dumps = 1

[dataset]
split = [0.6, 0.2, 0.2]

[[dataset.objects]]
name = "CY-35"
shape = "cylinder"
size = 35.0
conductivity = 3.0
step_mm = 36.0
repetitions = 1

[[dataset.objects]]
name = "PR"
shape = "triangular-prism"
size = 40.0
conductivity = 2.0
step_mm = 36.0
repetitions = 1

[mitnet]
widths = [2, 4]
epochs = 2
batch_size = 8

[fcn]
epochs = 2
batch_size = 8

[gan]
generator_widths = [2, 2, 2, 2, 2]
discriminator_widths = [2, 2, 2, 2]
epochs = 1
pairs_per_epoch = 8
validation_pairs = 4
batch_size = 4
"#;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY, ExperimentConfig::desk())
        .unwrap()
        .with_seed(7)
}

#[test]
fn run_experiment_writes_reports_and_is_seeded() {
    let cfg = tiny();
    let a = tempfile::tempdir().unwrap();
    let o = run_experiment(&cfg, a.path()).unwrap();

    for f in [
        "mesh.txt",
        "provenance.toml",
        "data/samples.mitd",
        "data/manifest.toml",
        "checkpoints/ccnn.ckpt",
        "checkpoints/fcn.ckpt",
        "checkpoints/gan.ckpt",
        "report.csv",
        "report_samples.csv",
        "report.txt",
    ] {
        assert!(a.path().join(f).is_file(), "{f} missing");
    }
    let csv = fs::read_to_string(a.path().join("report.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "method,shape,enhanced,mean_iou,mean_cd,samples,empty_reconstructions"
    );
    for m in [Method::Ccnn, Method::Fcn, Method::Nr] {
        for enhanced in [false, true] {
            let row = o.evaluation.row(m, AVERAGE, enhanced).unwrap();
            assert!((0.0..=100.0).contains(&row.mean_iou));
        }
    }
    let per_sample = fs::read_to_string(a.path().join("report_samples.csv")).unwrap();
    let test_count = o.evaluation.row(Method::Nr, AVERAGE, false).unwrap().samples;
    assert_eq!(per_sample.lines().count(), 1 + test_count * 3 * 2);

    let b = tempfile::tempdir().unwrap();
    run_experiment(&cfg, b.path()).unwrap();
    for f in ["data/samples.mitd", "report.csv", "report_samples.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs between identical runs"
        );
    }
}

#[test]
fn subcommands_chain_through_files() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest = cmd_gen_data(&cfg, &data).unwrap();
    let dataset = Dataset::load(&data).unwrap();
    assert_eq!(dataset.samples.len(), manifest.total_samples);

    let ckpt = dir.path().join("fcn.ckpt");
    cmd_train(Trainable::Method(Method::Fcn), &data, &ckpt, &cfg, &[]).unwrap();
    assert!(dir.path().join("fcn.loss.csv").is_file());

    let spec: MethodSpec = format!("fcn={}", ckpt.display()).parse().unwrap();
    let model = Reconstructor::load(&spec, &cfg.nr_for(&cfg.dataset)).unwrap();
    let test = dataset.test();
    let direct = model.reconstruct_samples(&test).unwrap();
    let reloaded = dir.path().join("fcn_again.ckpt");
    model.save(&reloaded).unwrap();
    let again = Reconstructor::load(&format!("fcn={}", reloaded.display()).parse().unwrap(), &cfg.nr).unwrap();
    assert_eq!(direct, again.reconstruct_samples(&test).unwrap());

    let frame_path = dir.path().join("frame.csv");
    write_frame_csv(&test[0].frame, &frame_path).unwrap();
    assert_eq!(read_frame_csv(&frame_path).unwrap(), test[0].frame);

    let out = dir.path().join("recon");
    let r = cmd_reconstruct(&spec, &FrameSource::Csv(frame_path), None, &out, &cfg).unwrap();
    assert!(r.raw.is_none());
    let img = GrayImage::load(&out.join("raw.pgm")).unwrap();
    assert_eq!((img.width, img.height), (256, 256));

    let out = dir.path().join("recon_sample");
    let r = cmd_reconstruct(
        &spec,
        &FrameSource::Sample {
            data: data.clone(),
            id: None,
        },
        None,
        &out,
        &cfg,
    )
    .unwrap();
    assert!(r.raw.is_some());
    assert!(out.join("truth.pgm").is_file());

    let eval_dir = dir.path().join("eval");
    let e = cmd_eval(&data, &[spec], None, &eval_dir, &cfg).unwrap();
    assert_eq!(e.rows.iter().filter(|r| r.shape == AVERAGE).count(), 1);
    assert!(eval_dir.join("report.csv").is_file());
}

#[test]
fn gan_training_requires_conditions() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_gen_data(&cfg, &data).unwrap();
    let err = cmd_train(Trainable::Gan, &data, &dir.path().join("gan.ckpt"), &cfg, &[]);
    assert!(err.is_err());
}
