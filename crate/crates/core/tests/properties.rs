#![allow(clippy::needless_range_loop)]

mod common;

use proptest::prelude::*;
use s2r_core::adapt::{median8, schedule_rate, FineTuneSchedule, ScheduleReading};
use s2r_core::checkpoint::{Checkpoint, TrainMeta};
use s2r_core::degradation::{degrade, degrade_linear, BlurKernel, SubsampleMode, Subsampling};
use s2r_core::image::Image;
use s2r_core::metrics::{evaluate_pair, psnr, ssim};
use s2r_core::model::{ModelConfig, SrModel};

use common::max_abs_diff;

fn image(c: usize, h: usize, w: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f64..1.0, c * h * w).prop_map(move |d| Image::from_planar(c, h, w, d).unwrap())
}

fn sized_image(c: usize) -> impl Strategy<Value = Image> {
    (4usize..14, 4usize..14).prop_flat_map(move |(h, w)| image(c, h, w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn anisotropic_kernels_are_distributions(
        l1 in 0.05f64..8.0, l2 in 0.05f64..8.0, theta in -3.2f64..3.2, r in 1usize..8,
    ) {
        let k = BlurKernel::anisotropic_gaussian(l1, l2, theta, 2 * r + 1).unwrap();
        prop_assert!((k.values().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(k.values().iter().all(|v| *v >= 0.0));
        k.check_invariants().unwrap();
    }

    #[test]
    fn delta_kernel_degrade_is_plain_decimation(img in sized_image(3), s in 1usize..4, r in 0usize..2) {
        let out = degrade(&img, &BlurKernel::delta(2 * r + 1).unwrap(), Subsampling::direct(s)).unwrap();
        let (h, w) = img.dims();
        prop_assert_eq!(out.dims(), (h.div_ceil(s), w.div_ceil(s)));
        for c in 0..3 {
            for i in 0..out.height() {
                for j in 0..out.width() {
                    prop_assert_eq!(out.get(c, i, j), img.get(c, i * s, j * s));
                }
            }
        }
    }

    #[test]
    fn linear_degradation_is_linear(
        (x, y) in (5usize..12, 5usize..12).prop_flat_map(|(h, w)| (image(1, h, w), image(1, h, w))),
        a in -2.0f64..2.0, b in -2.0f64..2.0, bicubic in any::<bool>(),
    ) {
        let k = BlurKernel::isotropic_gaussian(1.1, 5).unwrap();
        let mode = if bicubic { SubsampleMode::Bicubic } else { SubsampleMode::Direct };
        let sub = Subsampling::new(mode, 2).unwrap();
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = degrade_linear(&mix, &k, sub).unwrap();
        let (dx, dy) = (degrade_linear(&x, &k, sub).unwrap(), degrade_linear(&y, &k, sub).unwrap());
        let rhs = dx.zip_map(&dy, |p, q| a * p + b * q).unwrap();
        prop_assert!(max_abs_diff(lhs.data(), rhs.data()) < 1e-10);
    }

    #[test]
    fn psnr_falls_as_noise_grows(img in sized_image(1), lo in 0.01f64..0.1, extra in 0.01f64..0.3) {
        let noisy = |amp: f64| {
            let mut out = img.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += amp * if i % 2 == 0 { 1.0 } else { -1.0 };
            }
            out
        };
        let (near, far) = (psnr(&img, &noisy(lo), 1.0).unwrap(), psnr(&img, &noisy(lo + extra), 1.0).unwrap());
        prop_assert!(far < near, "{far} >= {near}");
    }

    #[test]
    fn ssim_is_invariant_to_joint_rescaling(
        (x, y) in (11usize..16, 11usize..16).prop_flat_map(|(h, w)| (image(1, h, w), image(1, h, w))),
        scale in 0.2f64..5.0,
    ) {
        let base = ssim(&x, &y, 1.0).unwrap();
        let (xs, ys) = (x.map(|v| scale * v), y.map(|v| scale * v));
        prop_assert!((ssim(&xs, &ys, scale).unwrap() - base).abs() < 1e-6);
        prop_assert!((ssim(&x, &y, 1.0).unwrap() - ssim(&y, &x, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn y_channel_metrics_ignore_chroma_only_changes(
        (sr, gt) in (15usize..22, 15usize..22).prop_flat_map(|(h, w)| (image(3, h, w), image(3, h, w))),
        t in -0.2f64..0.2,
    ) {
        // a direction with zero luma weight: 65.481·dr + 128.553·dg + 24.966·db = 0
        let d = [128.553 * t / 65.481, -t, 0.0];
        let mut shifted = sr.clone();
        for c in 0..3 {
            for v in shifted.data_mut()[c * sr.height() * sr.width()..(c + 1) * sr.height() * sr.width()].iter_mut() {
                *v += d[c];
            }
        }
        let (p0, s0) = evaluate_pair(&sr, &gt, 2).unwrap();
        let (p1, s1) = evaluate_pair(&shifted, &gt, 2).unwrap();
        prop_assert!((p0 - p1).abs() < 1e-9 && (s0 - s1).abs() < 1e-9);
    }

    #[test]
    fn estimates_project_onto_valid_kernels(raw in prop::collection::vec(-1.0f64..1.0, 25)) {
        prop_assume!(raw.iter().any(|v| *v > 1e-6));
        let k = BlurKernel::from_estimate(5, &raw).unwrap();
        k.check_invariants().unwrap();
        prop_assert!((k.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (v, r) in k.values().iter().zip(&raw) {
            prop_assert_eq!(*v == 0.0, *r <= 0.0);
        }
    }

    #[test]
    fn schedule_never_increases(
        b2 in 1e-4f64..1e-2, f1 in 1.01f64..4.0, f0 in 1.01f64..4.0,
        switch_a in 1usize..6, gap in 1usize..6, total in 1usize..30, hold in any::<bool>(),
    ) {
        let sched = FineTuneSchedule {
            rates: [b2 * f1 * f0, b2 * f1, b2],
            switch_a,
            switch_b: switch_a + gap,
            total_iterations: total,
            reading: if hold { ScheduleReading::HoldFirst } else { ScheduleReading::ChangeAfterFirst },
        };
        sched.validate().unwrap();
        let rates: Vec<f64> = (1..=total).map(|i| schedule_rate(i, &sched).unwrap()).collect();
        prop_assert!(rates.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(rates.iter().all(|r| sched.rates.contains(r)));
        prop_assert!(schedule_rate(total + 1, &sched).is_err());
    }

    #[test]
    fn median_of_eight_is_bracketed(v in prop::array::uniform8(-10.0f64..10.0)) {
        let m = median8(v);
        let mut s = v;
        s.sort_by(f64::total_cmp);
        prop_assert!(s[3] <= m && m <= s[4]);
        prop_assert_eq!(m, median8([v[7], v[6], v[5], v[4], v[3], v[2], v[1], v[0]]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn model_output_is_scale_times_input(h in 1usize..12, w in 1usize..12, scale in 2usize..5) {
        let model = SrModel::new(ModelConfig { scale, ..ModelConfig::tiny() }, 0).unwrap();
        let out = model.infer(&Image::filled(3, h, w, 0.4).unwrap()).unwrap();
        prop_assert_eq!((out.channels(), out.height(), out.width()), (3, scale * h, scale * w));
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>(), steps in any::<u64>(), id in "[a-z0-9]{0,12}") {
        let model = SrModel::new(ModelConfig::tiny(), seed).unwrap();
        let meta = TrainMeta { steps_completed: steps, seed, dataset_id: id };
        let ckpt = Checkpoint::from_model(&model, None, meta);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        prop_assert!(back.parameters.bit_equal(&ckpt.parameters));
        prop_assert_eq!(back.train_meta, ckpt.train_meta);
        prop_assert_eq!(back.model_config, ckpt.model_config);
    }
}
