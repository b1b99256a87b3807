use cmkd::distill::{distill_confusion, kd_loss};
use cmkd::losses::{dice_loss, softmax_channels};
use cmkd::metrics::{dice_coefficient, hausdorff_distance, Mask};
use cmkd::network::Setting;
use cmkd::norm::{norm_forward, NormKind, NormSpec};
use cmkd::trainer::{learning_rate_at, TrainingConfig};
use cmkd::{Fill, LabelMap, Mode, Tape, Tensor};
use proptest::prelude::*;

fn mask_strategy(max: usize) -> impl Strategy<Value = (usize, usize, Vec<bool>, Vec<bool>)> {
    (2..=max, 2..=max).prop_flat_map(|(h, w)| {
        (
            Just(h),
            Just(w),
            proptest::collection::vec(proptest::bool::ANY, h * w),
            proptest::collection::vec(proptest::bool::ANY, h * w),
        )
    })
}

fn labels(n: usize, h: usize, w: usize, classes: usize, seed: u64) -> LabelMap {
    let u = Tensor::new(
        &[n * h * w],
        Fill::Uniform {
            lo: 0.0,
            hi: classes as f64,
            seed,
        },
    )
    .unwrap();
    LabelMap::new(
        &[n, h, w],
        u.values()
            .iter()
            .map(|v| (*v as usize).min(classes - 1))
            .collect(),
    )
    .unwrap()
}

proptest! {
    #[test]
    fn dice_is_symmetric_and_bounded((h, w, a, b) in mask_strategy(12)) {
        let (ma, mb) = (Mask::new(h, w, a).unwrap(), Mask::new(h, w, b).unwrap());
        let ab = dice_coefficient(&ma, &mb).unwrap();
        prop_assert_eq!(ab, dice_coefficient(&mb, &ma).unwrap());
        prop_assert!((0.0..=100.0).contains(&ab));
    }

    #[test]
    fn dice_ignores_joint_translation((h, w, a, b) in mask_strategy(10), dy in 0usize..4, dx in 0usize..4) {
        let shift = |v: &[bool]| {
            let (hh, ww) = (h + dy, w + dx);
            let mut out = vec![false; hh * ww];
            for y in 0..h {
                for x in 0..w {
                    out[(y + dy) * ww + x + dx] = v[y * w + x];
                }
            }
            Mask::new(hh, ww, out).unwrap()
        };
        let pad = |v: &[bool]| {
            let ww = w + dx;
            let mut out = vec![false; (h + dy) * ww];
            for y in 0..h {
                for x in 0..w {
                    out[y * ww + x] = v[y * w + x];
                }
            }
            Mask::new(h + dy, ww, out).unwrap()
        };
        let before = dice_coefficient(&pad(&a), &pad(&b)).unwrap();
        let after = dice_coefficient(&shift(&a), &shift(&b)).unwrap();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn hausdorff_is_symmetric((h, w, a, b) in mask_strategy(12), sy in 0.5f64..2.0, sx in 0.5f64..2.0) {
        let (ma, mb) = (Mask::new(h, w, a).unwrap(), Mask::new(h, w, b).unwrap());
        prop_assume!(!ma.is_empty() && !mb.is_empty());
        let ab = hausdorff_distance(&ma, &mb, [sy, sx]).unwrap();
        prop_assert_eq!(ab, hausdorff_distance(&mb, &ma, [sy, sx]).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(hausdorff_distance(&ma, &ma, [sy, sx]).unwrap(), 0.0);
    }

    #[test]
    fn kd_loss_is_symmetric_and_non_negative(seed in 0u64..100_000, classes in 2usize..6, temp in 1.0f64..6.0) {
        let mut tape = Tape::new();
        let la = labels(2, 3, 3, classes, seed);
        let lb = labels(1, 3, 3, classes, seed + 1);
        let a = tape.constant(Tensor::new(&[2, classes, 3, 3], Fill::Normal { mean: 0.0, std: 2.0, seed: seed + 2 }).unwrap());
        let b = tape.constant(Tensor::new(&[1, classes, 3, 3], Fill::Normal { mean: 0.0, std: 2.0, seed: seed + 3 }).unwrap());
        let qa = distill_confusion(&mut tape, a, &la, temp).unwrap();
        let qb = distill_confusion(&mut tape, b, &lb, temp).unwrap();
        let ab = kd_loss(&mut tape, &qa, &qb).unwrap().loss;
        let ba = kd_loss(&mut tape, &qb, &qa).unwrap().loss;
        let (ab, ba) = (tape.value(ab).unwrap().item().unwrap(), tape.value(ba).unwrap().item().unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
    }

    #[test]
    fn dice_loss_lies_in_unit_interval(seed in 0u64..100_000, classes in 2usize..5) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, classes, 4, 4], Fill::Normal { mean: 0.0, std: 3.0, seed }).unwrap());
        let p = softmax_channels(&mut tape, x).unwrap();
        let l = dice_loss(&mut tape, p, &labels(2, 4, 4, classes, seed + 9)).unwrap();
        let v = tape.value(l).unwrap().item().unwrap();
        prop_assert!(v > 0.0 && v < 1.0);
    }

    #[test]
    fn affine_free_norm_output_is_standardized(seed in 0u64..100_000, kind in 0usize..4) {
        let kind = [NormKind::Batch, NormKind::Instance, NormKind::Layer, NormKind::Group { groups: 2 }][kind];
        let spec = NormSpec::new(kind, 4).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, 4, 5, 5], Fill::Normal { mean: 2.0, std: 3.0, seed }).unwrap());
        let g = tape.constant(Tensor::new(&[4], Fill::Constant(1.0)).unwrap());
        let b = tape.constant(Tensor::zeros(&[4]).unwrap());
        let y = norm_forward(&mut tape, x, g, b, &spec, Mode::Train, None).unwrap().output;
        let v = tape.value(y).unwrap().values();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / v.len() as f64;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn learning_rate_never_increases(a in 0usize..50_000, b in 0usize..50_000) {
        let cfg = TrainingConfig::new(Setting::Ours);
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(learning_rate_at(hi, &cfg) <= learning_rate_at(lo, &cfg));
    }
}
