use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sunet_core::analysis::{count_params, ParamConvention};
use sunet_core::autodiff::Tape;
use sunet_core::layers::selected_channels;
use sunet_core::models::Variant;
use sunet_core::tensor::{read_t4f1, write_t4f1};
use sunet_core::training::{composite_loss, LossWeights};
use sunet_core::{ArchConfig, Mode, ModelGraph, Shape4, Tensor4};

fn random(shape: Shape4, seed: u64) -> Tensor4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(0.0..1.0))
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// Set `SUNET_BLESS=1` to regenerate the stored tensors.
#[test]
fn simple_unet_w16_logits_match_golden_tensor() {
    let model = ModelGraph::build(&ArchConfig::simple_unet(16), 0).unwrap();
    let x = random(Shape4::new(1, 3, 64, 64), 2024);
    let logits = model.predict(&x).unwrap();
    let (input_path, logits_path) = (
        fixture("simpleunet_w16_input.t4f1"),
        fixture("simpleunet_w16_logits.t4f1"),
    );
    if std::env::var_os("SUNET_BLESS").is_some() {
        write_t4f1(&input_path, &x).unwrap();
        write_t4f1(&logits_path, &logits).unwrap();
    }
    let stored_x: Tensor4<f32> = read_t4f1(&input_path).unwrap();
    assert_eq!(stored_x, x);
    let golden: Tensor4<f32> = read_t4f1(&logits_path).unwrap();
    assert_eq!(golden.shape(), Shape4::new(1, 1, 64, 64));
    let diff = golden.max_abs_diff(&logits);
    assert!(diff < 1e-4, "max abs diff {diff}");
}

#[test]
fn table_examples_for_param_counts() {
    let simple = ArchConfig {
        aff: false,
        ..ArchConfig::simple_unet(64)
    };
    let m = ModelGraph::build(&simple, 0).unwrap();
    let p = count_params(&m, ParamConvention::Full).total_params() as f64;
    assert!((p / 0.251e6 - 1.0).abs() < 0.05, "{p}");

    let vanilla = ArchConfig {
        blocks: 2,
        ..ArchConfig::defaults(Variant::VanillaUnet).with_width(8)
    };
    let m = ModelGraph::build(&vanilla, 0).unwrap();
    let p = count_params(&m, ParamConvention::Full).total_params() as f64;
    assert!((p / 0.54e6 - 1.0).abs() < 0.05, "{p}");
}

#[test]
fn simple_unet_w8_output_shape() {
    let mut m = ModelGraph::build(&ArchConfig::simple_unet(8), 1).unwrap();
    let y = m.forward(&random(Shape4::new(1, 3, 32, 32), 1), Mode::Infer).unwrap();
    assert_eq!(y.shape(), Shape4::new(1, 1, 32, 32));
}

fn r_squared(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    sxy * sxy / (sxx * syy)
}

#[test]
fn fixed_width_params_grow_linearly_with_depth() {
    for variant in [Variant::FixedWidthUnet, Variant::SimpleUnet] {
        let cfg = ArchConfig::defaults(variant).with_width(32);
        let depths = [3.0, 4.0, 5.0];
        let counts: Vec<f64> = depths
            .iter()
            .map(|&d| {
                let m = ModelGraph::<f32>::build_truncated(&cfg, d as usize, 0).unwrap();
                count_params(&m, ParamConvention::Full).total_params() as f64
            })
            .collect();
        let r2 = r_squared(&depths, &counts);
        assert!(r2 > 0.999, "{}: R² = {r2} over {counts:?}", variant.name());
    }
}

#[test]
fn fusion_adds_two_weights_per_selected_channel() {
    for (w, rate) in [(16, 0.5), (64, 0.5), (64, 0.25), (64, 0.75), (64, 1.0)] {
        let on = ArchConfig {
            rate,
            ..ArchConfig::simple_unet(w)
        };
        let off = ArchConfig {
            aff: false,
            ..on.clone()
        };
        let count = |c: &ArchConfig| {
            let m = ModelGraph::build(c, 0).unwrap();
            count_params(&m, ParamConvention::OptimizerVisible).total_params()
        };
        let widths = on.stage_widths();
        let expect: usize = widths[..4].iter().map(|&s| 2 * selected_channels(s, rate)).sum();
        assert_eq!(count(&on) - count(&off), expect as u64, "W={w} R={rate}");
    }
}

#[test]
fn unit_fusion_reduces_to_plain_unet_bitwise() {
    let on = ArchConfig::simple_unet(8);
    let off = ArchConfig {
        aff: false,
        ..on.clone()
    };
    let a = ModelGraph::build(&on, 5).unwrap();
    let b = ModelGraph::build(&off, 5).unwrap();
    let x = random(Shape4::new(2, 3, 32, 32), 6);
    assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
    let (mut a, mut b) = (a, b);
    assert_eq!(a.forward(&x, Mode::Train).unwrap(), b.forward(&x, Mode::Train).unwrap());
}

#[test]
fn gradients_reach_fusion_weights() {
    let mut m = ModelGraph::build(&ArchConfig::simple_unet(8), 3).unwrap();
    let x = random(Shape4::new(2, 3, 32, 32), 7);
    let t = Tensor4::from_fn(Shape4::new(2, 1, 32, 32), |n, _, y, xx| {
        ((y / 8 + xx / 8 + n) % 2) as f32
    });
    let mut tape = Tape::new();
    let xi = tape.input(x);
    let out = m.forward_on(&mut tape, xi, Mode::Train).unwrap();
    let (_, seed) = composite_loss(tape.value(out), &t, LossWeights::default()).unwrap();
    let g = tape.backward(out, &seed).unwrap();
    for d in &m.decoders {
        for id in [d.fusion.alpha.unwrap(), d.fusion.beta.unwrap()] {
            let norm: f32 = g.get(id).unwrap().data().iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "{}", m.params.name(id));
        }
    }
}

#[test]
fn parameter_names_are_unique() {
    for v in Variant::ALL {
        let m = ModelGraph::build(&ArchConfig::defaults(v).with_width(8), 0).unwrap();
        let mut names: Vec<&str> = m.params.iter().map(|(_, e)| e.name.as_str()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n, "{}", v.name());
        assert_eq!(m.encoders.len(), 5);
        assert_eq!(m.decoders.len(), 4);
        assert_eq!(m.shortcuts.len(), 4);
    }
}
