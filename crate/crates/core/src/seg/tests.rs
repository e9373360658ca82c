use super::*;
use crate::autodiff::grad_check;
use crate::transfer::NetScale;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn img(side: usize) -> Image {
    Image::from_fn(side, side, 3, |y, x, c| 0.5 + 0.45 * ((y * 3 + x * 5 + c * 7) as f32 * 0.21).sin()).unwrap()
}

fn blob_label(side: usize) -> LabelMap {
    LabelMap::from_mask(&RegionMask::from_fn(side, side, |y, x| y.abs_diff(side / 3) < 5 && x.abs_diff(side / 2) < 7))
}

#[test]
fn init_is_deterministic_and_has_no_atrous_modules() {
    assert_eq!(init_buttonlab(3, NetScale::Desk), init_buttonlab(3, NetScale::Desk));
    let p = init_buttonlab(3, NetScale::Desk);
    for name in p.params.names() {
        let lower = name.to_lowercase();
        assert!(!lower.contains("aspp") && !lower.contains("atrous") && !lower.contains("dilat"), "{name}");
    }
    assert!(seg_schedule(NetScale::Full).iter().all(|c| c.kernel % 2 == 1));
}

#[test]
fn full_parameter_count_matches_shape_walk() {
    // Bottleneck: 1x1 reduce, 3x3, 1x1 expand, projection on the first unit.
    let unit = |i: usize, m: usize, o: usize, first: bool, norm: usize| {
        let mut t = i * m + norm * m + m * m * 9 + norm * m + m * o + norm * o;
        if first {
            t += i * o + norm * o;
        }
        t
    };
    let mut total = 3 * 64 * 49 + 2 * 64 + 64 * 64 * 9 + 2 * 64;
    let mut c = 64;
    for (m, o, u) in [(64, 256, 3), (128, 512, 4), (256, 1024, 6), (512, 2048, 3)] {
        for k in 0..u {
            total += unit(c, m, o, k == 0, 2);
            c = o;
        }
    }
    total += 3 * 64 * 49 + 64;
    c = 64;
    for k in 0..3 {
        total += unit(c, 64, 256, k == 0, 1);
        c = 256;
    }
    total += 2048 * 256 + 256 + 256 * 48 + 48 + 304 * 256 * 9 + 256;
    total += 256 * 48 + 48 + 304 * 128 * 9 + 128 + 128 * 2 + 2;
    assert_eq!(total, 25_369_378);
    assert_eq!(init_buttonlab(0, NetScale::Full).numel(), total);
}

#[test]
fn archive_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bl.dstw");
    let p = init_buttonlab(1, NetScale::Desk);
    p.save(&path).unwrap();
    let q = SegNetParams::load(&path).unwrap();
    assert_eq!(p, q);
}

#[test]
fn random_crop_full_and_reproducible() {
    let (im, lb) = (img(64), blob_label(64));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (block, lblock, spec) = random_crop(&im, &lb, (64, 64), &mut rng).unwrap();
    assert_eq!(spec, CropSpec::full(64, 64));
    assert_eq!((block, lblock), (im.clone(), lb.clone()));
    let draw = |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..20).map(|_| random_crop(&im, &lb, (32, 16), &mut r).unwrap().2).collect::<Vec<_>>()
    };
    assert_eq!(draw(5), draw(5));
    assert!(matches!(random_crop(&im, &lb, (80, 16), &mut rng), Err(Error::CropTooLarge { .. })));
    assert!(matches!(random_crop(&im, &lb, (24, 16), &mut rng), Err(Error::AlignmentError { .. })));
}

#[test]
fn random_crop_positions_are_uniform() {
    let (im, lb) = (img(64), blob_label(64));
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut counts = [[0u32; 3]; 3];
    let draws = 10_000;
    for _ in 0..draws {
        let (_, _, c) = random_crop(&im, &lb, (32, 32), &mut rng).unwrap();
        assert!(c.top % 16 == 0 && c.left % 16 == 0 && c.top <= 32 && c.left <= 32);
        counts[c.top / 16][c.left / 16] += 1;
    }
    let expected = draws as f64 / 9.0;
    let chi2: f64 = counts.iter().flatten().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    // 8 degrees of freedom, p = 0.001.
    assert!(chi2 < 26.12, "chi2 = {chi2}");
}

#[test]
fn crop_pixels_match_label_pixels() {
    let (im, lb) = (img(64), blob_label(64));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let (block, lblock, c) = random_crop(&im, &lb, (32, 48), &mut rng).unwrap();
        for y in 0..32 {
            for x in 0..48 {
                assert_eq!(block.pixel(y, x), im.pixel(c.top + y, c.left + x));
                assert_eq!(lblock.get(y, x), lb.get(c.top + y, c.left + x));
            }
        }
    }
}

#[test]
fn forward_shape_contracts() {
    let p = init_buttonlab(2, NetScale::Desk);
    for side in [64usize, 128] {
        let full = seg_forward(&p, &img(side), None).unwrap();
        assert_eq!(full.shape(), &[1, 2, side, side]);
        let crop = CropSpec { top: 16, left: 0, height: side / 2, width: side / 2 };
        assert_eq!(seg_forward(&p, &img(side), Some(crop)).unwrap().shape(), &[1, 2, side / 2, side / 2]);
        let whole = seg_forward(&p, &img(side), Some(CropSpec::full(side, side))).unwrap();
        assert_eq!(whole, full);
    }
}

#[test]
fn forward_alignment_errors() {
    let p = init_buttonlab(2, NetScale::Desk);
    let bad = CropSpec { top: 8, left: 0, height: 32, width: 32 };
    assert!(matches!(seg_forward(&p, &img(64), Some(bad)), Err(Error::AlignmentError { .. })));
    assert!(matches!(seg_forward(&p, &img(40), None), Err(Error::AlignmentError { .. })));
    assert!(matches!(predict(&p, &img(40)), Err(Error::AlignmentError { .. })));
    let big = CropSpec { top: 48, left: 0, height: 32, width: 32 };
    assert!(matches!(seg_forward(&p, &img(64), Some(big)), Err(Error::CropTooLarge { .. })));
}

#[test]
fn masked_ce_closed_forms() {
    let mut g = Graph::<f64>::new();
    let zeros = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    let lbl = blob_label(4);
    let l = masked_ce(&mut g, zeros, &lbl).unwrap();
    assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-9);
    let mut sat = vec![-20.0; 16];
    sat.extend(vec![20.0; 16]);
    let s = g.constant(Tensor::new(vec![1, 2, 4, 4], sat).unwrap());
    let all = LabelMap::new(4, 4, vec![1; 16]).unwrap();
    let l = masked_ce(&mut g, s, &all).unwrap();
    assert!(g.value(l).item() < 1e-6);
    let wrong = LabelMap::new(2, 8, vec![1; 16]).unwrap();
    assert!(matches!(masked_ce(&mut g, s, &wrong), Err(Error::ShapeMismatch(_))));
}

#[test]
fn masked_ce_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits: Vec<f64> = (0..32).map(|_| rand::Rng::random_range(&mut rng, -3.0..3.0)).collect();
    let lbl = LabelMap::new(4, 4, (0..16).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
    let point = Tensor::new(vec![1, 2, 4, 4], logits).unwrap();
    let r = grad_check(|g, x| masked_ce(g, x, &lbl), &point, 1e-6).unwrap();
    assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
}

#[test]
fn crop_loss_ignores_labels_outside_the_crop() {
    let p = init_buttonlab(4, NetScale::Desk);
    let im = img(64);
    let a = blob_label(64);
    let crop = CropSpec { top: 16, left: 16, height: 32, width: 32 };
    let mut altered = a.data().to_vec();
    for y in 0..64 {
        for x in 0..64 {
            let inside = (16..48).contains(&y) && (16..48).contains(&x);
            if !inside {
                altered[y * 64 + x] ^= 1;
            }
        }
    }
    let b = LabelMap::new(64, 64, altered).unwrap();
    let loss = |lbl: &LabelMap| {
        let mut g = Graph::<f32>::new();
        let (logits, _) = seg_logits(&mut g, &p, &im, Some(crop), false).unwrap();
        let l = masked_ce(&mut g, logits, &lbl.crop(crop)).unwrap();
        g.value(l).item()
    };
    assert_eq!(loss(&a).to_bits(), loss(&b).to_bits());
}

#[test]
fn argmax_ties_go_to_background() {
    let t = Tensor::new(vec![1, 2, 1, 3], vec![0.5f32, 1.0, -1.0, 0.5, 2.0, -2.0]).unwrap();
    assert_eq!(argmax(&t).unwrap().data(), &[0, 1, 0]);
}

#[test]
fn predict_is_deterministic_and_full_size() {
    let p = init_buttonlab(7, NetScale::Desk);
    let a = predict(&p, &img(64)).unwrap();
    assert_eq!((a.height(), a.width()), (64, 64));
    assert_eq!(a, predict(&p, &img(64)).unwrap());
}

#[test]
fn network_gradients_match_finite_differences() {
    let p = init_buttonlab(5, NetScale::Desk).cast::<f64>();
    let im = img(32);
    let lbl = blob_label(32);
    let crop = CropSpec { top: 16, left: 0, height: 16, width: 32 };
    for name in ["bl.decoder.classifier.bias", "bl.backbone.layer4.1.expand.gamma", "bl.branch.layer1.0.spatial.bias"] {
        let point = p.params.get(name).unwrap().clone();
        let r = grad_check(
            |g, v| {
                let mut b = p.params.bind(g, false);
                b.rebind(name, v);
                let x = g.constant(im.to_tensor());
                let blk = g.constant(im.crop(BBox { top: 16, left: 0, height: 16, width: 32 }).to_tensor());
                let logits = forward(g, &b, p.scale, x, blk, Some(crop))?;
                masked_ce(g, logits, &lbl.crop(crop))
            },
            &point,
            1e-6,
        )
        .unwrap();
        // Relative to the largest entry: tiny coordinates are dominated by rounding.
        let scale = r.analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let worst = r.analytic.iter().zip(&r.numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-6 * scale, "{name}: {worst} vs {scale}");
    }
}

#[test]
fn train_seg_rejects_bad_input() {
    assert!(matches!(train_seg(&[], None, &SegConfig::default()), Err(Error::NoData)));
    let data = vec![(img(32), blob_label(32))];
    let cfg = SegConfig { crop: Some(20), ..SegConfig::default() };
    assert!(matches!(train_seg(&data, None, &cfg), Err(Error::AlignmentError { .. })));
    let cfg = SegConfig { epochs: 0, ..SegConfig::default() };
    assert!(train_seg(&data, None, &cfg).is_err());
}

#[test]
fn short_training_is_deterministic() {
    let data: Vec<_> = (0..3).map(|_| (img(32), blob_label(32))).collect();
    let cfg = SegConfig { epochs: 2, batch_size: 2, replacement: true, ..SegConfig::default() };
    let a = train_seg(&data, Some(&data), &cfg).unwrap();
    let b = train_seg(&data, Some(&data), &cfg).unwrap();
    assert_eq!(a.step_losses, b.step_losses);
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.step_losses.len(), 4);
    let capped = train_seg(&data, None, &SegConfig { max_steps: Some(3), ..cfg }).unwrap();
    assert_eq!(capped.step_losses.len(), 3);
    assert_eq!(capped.epochs.iter().map(|e| e.steps).sum::<usize>(), 3);
}
