use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sunet_core::autodiff::{NodeId, ParamId, Tape};
use sunet_core::tensor::{ConvGeom, NormStats};
use sunet_core::{Shape4, Tensor4};

fn random(shape: Shape4, seed: u64) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn vshape(n: usize) -> Shape4 {
    Shape4::new(1, n, 1, 1)
}

fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Max relative error between backprop and central differences of
/// `sum(seed ⊙ f(params))` over every scalar of every parameter.
fn fd_max_rel_err(params: &[Tensor4<f64>], f: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId) -> f64 {
    let run = |ps: &[Tensor4<f64>]| {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ps
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(ParamId(i), p.clone()))
            .collect();
        let out = f(&mut tape, &ids);
        (tape, out)
    };
    let (tape, out) = run(params);
    let seed = random(tape.value(out).shape(), 99);
    let grads = tape.backward(out, &seed).unwrap();
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let g = grads.get_or_zeros(ParamId(pi), p.shape());
        for i in 0..p.len() {
            let mut ps = params.to_vec();
            ps[pi].data_mut()[i] += eps;
            let (t, o) = run(&ps);
            let plus = dot(&seed, t.value(o));
            ps[pi].data_mut()[i] -= 2.0 * eps;
            let (t, o) = run(&ps);
            let minus = dot(&seed, t.value(o));
            let numeric = (plus - minus) / (2.0 * eps);
            let a = g.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    worst
}

#[test]
fn channel_scale_gradient_is_channel_sum() {
    let x = random(Shape4::new(2, 3, 4, 4), 1);
    let mut tape = Tape::new();
    let xi = tape.input(x.clone());
    let w = tape.param(ParamId(0), Tensor4::vector(&[0.5, -1.0, 2.0]));
    let out = tape.channel_scale(xi, w).unwrap();
    let g = tape.backward(out, &Tensor4::full(x.shape(), 1.0)).unwrap();
    let gw = g.get(ParamId(0)).unwrap();
    for c in 0..3 {
        let expect: f64 = (0..2)
            .flat_map(|n| (0..16).map(move |p| (n, p)))
            .map(|(n, p)| x.at(n, c, p / 4, p % 4))
            .sum();
        assert!((gw.data()[c] - expect).abs() < 1e-12);
    }
}

#[test]
fn relu_blocks_negative_inputs() {
    let mut tape = Tape::new();
    let x = tape.input(random(Shape4::new(1, 2, 3, 3), 2).map(|v| -v.abs() - 0.1));
    let y = tape.relu(x);
    let g = tape.backward_nodes(y, &random(Shape4::new(1, 2, 3, 3), 3)).unwrap();
    let gx = g[x.index()].clone().unwrap();
    assert!(gx.data().iter().all(|&v| v == 0.0));
}

#[test]
fn two_layer_conv_net_matches_finite_differences() {
    let x = random(Shape4::new(1, 2, 6, 6), 4);
    let params = [
        random(Shape4::new(3, 2, 3, 3), 5),
        random(vshape(3), 6),
        random(Shape4::new(2, 3, 3, 3), 7),
        random(vshape(2), 8),
    ];
    let err = fd_max_rel_err(&params, |t, p| {
        let xi = t.input(x.clone());
        let h = t.conv2d(xi, p[0], p[1], ConvGeom::same(3, 1, 1)).unwrap();
        let h = t.relu(h);
        t.conv2d(h, p[2], p[3], ConvGeom::same(3, 2, 1)).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn parameterised_ops_match_finite_differences() {
    let x = random(Shape4::new(2, 4, 4, 4), 9);
    let grouped = [random(Shape4::new(2, 2, 1, 1), 10), random(vshape(2), 11)];
    let err = fd_max_rel_err(&grouped, |t, p| {
        let xi = t.input(x.clone());
        t.conv2d(xi, p[0], p[1], ConvGeom::same(1, 1, 2)).unwrap()
    });
    assert!(err < 1e-4, "grouped 1x1: {err}");

    let dilated = [random(Shape4::new(3, 4, 3, 3), 12), random(vshape(3), 13)];
    let err = fd_max_rel_err(&dilated, |t, p| {
        let xi = t.input(x.clone());
        t.conv2d(xi, p[0], p[1], ConvGeom::same(3, 2, 1)).unwrap()
    });
    assert!(err < 1e-4, "dilated: {err}");

    let tconv = [random(Shape4::new(4, 3, 2, 2), 14), random(vshape(3), 15)];
    let err = fd_max_rel_err(&tconv, |t, p| {
        let xi = t.input(x.clone());
        t.conv_transpose2x(xi, p[0], p[1]).unwrap()
    });
    assert!(err < 1e-4, "transposed: {err}");

    let affine = [random(vshape(4), 16), random(vshape(4), 17)];
    let err = fd_max_rel_err(&affine, |t, p| {
        let xi = t.input(x.clone());
        t.batch_norm(xi, p[0], p[1], &mut NormStats::new(4), 1e-5, true)
            .unwrap()
    });
    assert!(err < 1e-4, "batch norm: {err}");

    let fuse = [random(vshape(4), 18), random(vshape(4), 19)];
    let deep = random(Shape4::new(2, 4, 2, 2), 20);
    let err = fd_max_rel_err(&fuse, |t, p| {
        let (s, d) = (t.input(x.clone()), t.input(deep.clone()));
        let a = t.channel_scale(s, p[0]).unwrap();
        let b = t.channel_scale(d, p[1]).unwrap();
        let b = t.upsample2x(b);
        t.concat(a, b).unwrap()
    });
    assert!(err < 1e-4, "fusion: {err}");
}

#[test]
fn batch_norm_input_gradient_uses_batch_statistics() {
    let x = random(Shape4::new(3, 2, 3, 3), 21);
    let gamma = random(vshape(2), 22);
    let err = fd_max_rel_err(&[x.clone(), gamma], |t, p| {
        let beta = t.input(Tensor4::zeros(vshape(2)));
        let y = t
            .batch_norm(p[0], p[1], beta, &mut NormStats::new(2), 1e-5, true)
            .unwrap();
        let y = t.relu(y);
        let y = t.upsample2x(y);
        t.maxpool2x(y).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn backward_is_linear_in_the_seed() {
    let x = random(Shape4::new(2, 3, 8, 8), 23);
    let mut tape = Tape::new();
    let xi = tape.input(x);
    let w = tape.param(ParamId(0), random(Shape4::new(4, 3, 3, 3), 24));
    let b = tape.param(ParamId(1), random(vshape(4), 25));
    let gamma = tape.param(ParamId(2), Tensor4::full(vshape(4), 1.0));
    let beta = tape.param(ParamId(3), Tensor4::zeros(vshape(4)));
    let h = tape.conv2d(xi, w, b, ConvGeom::same(3, 2, 1)).unwrap();
    let h = tape
        .batch_norm(h, gamma, beta, &mut NormStats::new(4), 1e-5, true)
        .unwrap();
    let h = tape.relu(h);
    let out = tape.maxpool2x(h).unwrap();
    let shape = tape.value(out).shape();
    let (s1, s2) = (random(shape, 26), random(shape, 27));
    let (a, c) = (0.7, -1.3);
    let mut mix = s1.scale(a);
    mix.add_assign(&s2.scale(c));
    let g1 = tape.backward(out, &s1).unwrap();
    let g2 = tape.backward(out, &s2).unwrap();
    let gm = tape.backward(out, &mix).unwrap();
    for id in 0..4 {
        let id = ParamId(id);
        let mut expect = g1.get(id).unwrap().scale(a);
        expect.add_assign(&g2.get(id).unwrap().scale(c));
        assert!(gm.get(id).unwrap().max_abs_diff(&expect) < 1e-6);
    }
}

#[test]
fn unused_parameter_has_zero_gradient() {
    let mut tape = Tape::new();
    let xi = tape.input(random(Shape4::new(1, 2, 4, 4), 28));
    let used = tape.param(ParamId(0), Tensor4::vector(&[1.0, 2.0]));
    let _unused = tape.param(ParamId(1), Tensor4::vector(&[3.0, 4.0]));
    let out = tape.channel_scale(xi, used).unwrap();
    let g = tape
        .backward(out, &Tensor4::full(Shape4::new(1, 2, 4, 4), 1.0))
        .unwrap();
    let gu = g.get_or_zeros(ParamId(1), vshape(2));
    assert!(gu.data().iter().all(|&v| v == 0.0));
}

#[test]
fn reusing_a_layer_doubles_its_gradient() {
    let x = random(Shape4::new(1, 2, 5, 5), 29);
    let w = random(Shape4::new(2, 2, 3, 3), 30);
    let b = Tensor4::vector(&[0.1, 0.2]);
    let single = {
        let mut t = Tape::new();
        let xi = t.input(x.clone());
        let (wi, bi) = (t.param(ParamId(0), w.clone()), t.param(ParamId(1), b.clone()));
        let y = t.conv2d(xi, wi, bi, ConvGeom::same(3, 1, 1)).unwrap();
        t.backward(y, &Tensor4::full(t.value(y).shape(), 1.0)).unwrap()
    };
    let double = {
        let mut t = Tape::new();
        let xi = t.input(x.clone());
        let (wi, bi) = (t.param(ParamId(0), w.clone()), t.param(ParamId(1), b.clone()));
        let y1 = t.conv2d(xi, wi, bi, ConvGeom::same(3, 1, 1)).unwrap();
        let y2 = t.conv2d(xi, wi, bi, ConvGeom::same(3, 1, 1)).unwrap();
        let y = t.concat(y1, y2).unwrap();
        t.backward(y, &Tensor4::full(t.value(y).shape(), 1.0)).unwrap()
    };
    for id in [ParamId(0), ParamId(1)] {
        assert_eq!(double.get(id).unwrap(), &single.get(id).unwrap().scale(2.0));
    }
}

#[test]
fn seed_shape_mismatch_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.input(random(Shape4::new(1, 1, 2, 2), 31));
    let y = tape.relu(x);
    assert!(tape.backward(y, &Tensor4::zeros(Shape4::new(1, 1, 2, 3))).is_err());
}
