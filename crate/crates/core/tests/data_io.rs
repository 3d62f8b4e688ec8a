use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sunet_core::data::{
    load_dataset, read_image, read_mask, save_dataset, split_dataset, synth_dataset, write_image, write_mask, Split,
};
use sunet_core::tensor::{read_t4f1, write_t4f1};
use sunet_core::{Shape4, Tensor4};

#[test]
fn foreground_is_brighter_than_background() {
    let set = synth_dataset(200, 64, 0).unwrap();
    let (mut fg, mut nfg, mut bg, mut nbg) = (0.0f64, 0usize, 0.0f64, 0usize);
    for s in &set {
        let plane = 64 * 64;
        for p in 0..plane {
            let v: f64 = (0..3).map(|c| s.image.data()[c * plane + p] as f64).sum::<f64>() / 3.0;
            if s.mask.data()[p] > 0.5 {
                fg += v;
                nfg += 1;
            } else {
                bg += v;
                nbg += 1;
            }
        }
    }
    let gap = fg / nfg as f64 - bg / nbg as f64;
    assert!(gap > 0.15, "gap {gap}");
}

#[test]
fn regenerated_masks_are_pixel_identical() {
    let a = synth_dataset(12, 32, 77).unwrap();
    let b = synth_dataset(12, 32, 77).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.mask.data(), y.mask.data());
        assert_eq!(x.image.data(), y.image.data());
    }
}

#[test]
fn large_split_keeps_the_ratio() {
    let ids: Vec<String> = (0..2936).map(|i| format!("img{i}")).collect();
    let m = split_dataset(&ids, 0).unwrap();
    for (got, reference) in [(m.train.len(), 2050.0), (m.val.len(), 296.0), (m.test.len(), 590.0)] {
        assert!(
            (got as f64 / 2936.0 - reference / 2936.0).abs() < 0.01,
            "{got} vs {reference}"
        );
    }
}

#[test]
fn split_depends_only_on_seed_and_count() {
    let ids: Vec<String> = (0..40).map(|i| format!("a{i}")).collect();
    let renamed: Vec<String> = (0..40).map(|i| format!("zz{}", 1000 + i)).collect();
    let m1 = split_dataset(&ids, 5).unwrap();
    let m2 = split_dataset(&renamed, 5).unwrap();
    let pos = |list: &[String], all: &[String]| -> Vec<usize> {
        list.iter()
            .map(|id| all.iter().position(|x| x == id).unwrap())
            .collect()
    };
    for split in [Split::Train, Split::Val, Split::Test] {
        assert_eq!(pos(m1.ids(split), &ids), pos(m2.ids(split), &renamed));
    }
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let set = synth_dataset(20, 16, 3).unwrap();
    let ids: Vec<String> = set.iter().map(|s| s.id.clone()).collect();
    let manifest = split_dataset(&ids, 3).unwrap();
    save_dataset(dir.path(), &set, &manifest).unwrap();
    assert!(dir.path().join("images/s00000.ppm").exists());
    assert!(dir.path().join("masks/s00000.pgm").exists());
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.manifest.train, manifest.train);
    assert_eq!(loaded.manifest.test, manifest.test);
    for s in &set {
        let back = loaded.samples.iter().find(|l| l.id == s.id).unwrap();
        assert_eq!(back.mask, s.mask);
        assert!(back.image.max_abs_diff(&s.image) <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn greyscale_images_are_replicated() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.pgm");
    std::fs::write(&p, b"P5\n2 1\n255\n\x00\xff").unwrap();
    let t = read_image(&p).unwrap();
    assert_eq!(t.shape(), Shape4::new(1, 3, 1, 2));
    for c in 0..3 {
        assert_eq!((t.at(0, c, 0, 0), t.at(0, c, 0, 1)), (0.0, 1.0));
    }
    let m = read_mask(&p).unwrap();
    assert_eq!(m.data(), &[0.0, 1.0]);
    std::fs::write(&p, b"P5\n2 2\n255\n\x00\xff\xff\x00").unwrap();
    assert_eq!(read_mask(&p).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn image_and_tensor_dump_round_trip(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor4::from_fn(Shape4::new(1, 3, h, w), |_, _, _, _| rng.random_range(0.0..1.0));
        let mask = img.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let mask = Tensor4::from_fn(Shape4::new(1, 1, h, w), |_, _, y, x| mask.at(0, 0, y, x));
        write_image(dir.path().join("i.ppm"), &img).unwrap();
        write_mask(dir.path().join("m.pgm"), &mask).unwrap();
        let back = read_image(dir.path().join("i.ppm")).unwrap();
        write_t4f1(dir.path().join("i.t4f1"), &back).unwrap();
        let dumped: Tensor4<f32> = read_t4f1(dir.path().join("i.t4f1")).unwrap();
        prop_assert_eq!(&dumped, &back);
        prop_assert!(dumped.max_abs_diff(&img) <= 1.0 / 255.0);
        prop_assert_eq!(read_mask(dir.path().join("m.pgm")).unwrap(), mask);
    }
}
