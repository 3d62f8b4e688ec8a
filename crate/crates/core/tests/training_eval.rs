use sunet_core::data::{synth_dataset, Sample};
use sunet_core::metrics::{aggregate_runs, Averaging, RunMetrics};
use sunet_core::training::{encode_checkpoint, evaluate, load_checkpoint, save_checkpoint, train, TrainConfig};
use sunet_core::{ArchConfig, Error, ModelGraph, Shape4, Tensor4};

fn toy_run(seed: u64, data: &[Sample]) -> RunMetrics {
    let refs: Vec<&Sample> = data.iter().collect();
    let mut m = ModelGraph::build(&ArchConfig::simple_unet(4), seed).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch: 4,
        seed,
        ..Default::default()
    };
    train(&mut m, &refs[..12], &refs[12..16], &cfg).unwrap();
    evaluate(&m, &refs[16..], Averaging::PerImage).unwrap().1
}

#[test]
fn aggregate_matches_recomputation_from_run_csv() {
    let data = synth_dataset(20, 16, 8).unwrap();
    let runs: Vec<RunMetrics> = (0..5).map(|s| toy_run(s, &data)).collect();
    let csv: String = std::iter::once("run,dsc,iou\n".to_string())
        .chain(
            runs.iter()
                .enumerate()
                .map(|(i, r)| format!("{i},{},{}\n", r.dsc, r.iou)),
        )
        .collect();

    let parsed: Vec<(f64, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    let n = parsed.len() as f64;
    let md = parsed.iter().map(|p| p.0).sum::<f64>() / n;
    let mi = parsed.iter().map(|p| p.1).sum::<f64>() / n;
    let sd = (parsed.iter().map(|p| (p.0 - md).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let si = (parsed.iter().map(|p| (p.1 - mi).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();

    let agg = aggregate_runs(&runs).unwrap();
    assert_eq!(agg.runs, 5);
    for (a, b) in [(agg.mdsc, md), (agg.miou, mi), (agg.dsc_std, sd), (agg.iou_std, si)] {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn single_run_has_zero_spread() {
    let data = synth_dataset(20, 16, 9).unwrap();
    let run = toy_run(0, &data);
    let agg = aggregate_runs(&[run]).unwrap();
    assert_eq!((agg.mdsc, agg.dsc_std, agg.iou_std), (run.dsc, 0.0, 0.0));
}

#[test]
fn saved_checkpoint_is_the_restored_best_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckp");
    let data = synth_dataset(16, 16, 10).unwrap();
    let refs: Vec<&Sample> = data.iter().collect();
    let mut m = ModelGraph::build(&ArchConfig::simple_unet(4), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch: 4,
        checkpoint: Some(path.clone()),
        ..Default::default()
    };
    let out = train(&mut m, &refs[..12], &refs[12..], &cfg).unwrap();
    let best = out.log.iter().map(|r| r.val_mdsc).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_val_mdsc, best);
    assert_eq!(out.log[out.best_epoch].val_mdsc, best);
    assert_eq!(std::fs::read(&path).unwrap(), encode_checkpoint(&m).unwrap());
}

#[test]
fn checkpoint_file_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckp");
    let m = ModelGraph::build(&ArchConfig::simple_unet(8), 4).unwrap();
    save_checkpoint(&path, &m).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let x = Tensor4::from_fn(Shape4::new(1, 3, 32, 32), |_, c, y, x| {
        ((c * 7 + y * 3 + x) % 11) as f32 / 11.0
    });
    assert_eq!(back.predict(&x).unwrap().data(), m.predict(&x).unwrap().data());
}

#[test]
fn non_finite_loss_reports_epoch_and_batch() {
    let data = synth_dataset(12, 16, 11).unwrap();
    let refs: Vec<&Sample> = data.iter().collect();
    let mut m = ModelGraph::build(&ArchConfig::simple_unet(4), 0).unwrap();
    let id = m.params.find("head/conv/bias").unwrap();
    m.params.get_mut(id).data_mut()[0] = f32::NAN;
    let cfg = TrainConfig {
        epochs: 1,
        batch: 4,
        ..Default::default()
    };
    let err = train(&mut m, &refs[..8], &refs[8..], &cfg).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
    let msg = err.to_string();
    assert!(msg.contains("epoch 0") && msg.contains("batch 0"), "{msg}");
}
