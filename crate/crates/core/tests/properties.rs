use proptest::prelude::*;

use tokenview::data::Image;
use tokenview::geometry::{rotate_volume, rotation_between, Interp, Pose, RotationMatrix};
use tokenview::losses::{color_loss, edge_map, ssim};
use tokenview::model::ModelConfig;
use tokenview::tensor::rng::SeededRng;
use tokenview::training::TrainConfig;
use tokenview::Tensor;

fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = SeededRng::new(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform()).collect()).unwrap()
}

fn pose() -> impl Strategy<Value = Pose> {
    (-720.0..720.0f64, -90.0..=90.0f64).prop_map(|(a, e)| Pose::new(a, e).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn poses_normalize_azimuth(p in pose()) {
        prop_assert!((0.0..360.0).contains(&p.azimuth()));
        prop_assert_eq!(Pose::new(p.azimuth(), p.elevation()).unwrap(), p);
    }

    #[test]
    fn relative_rotations_are_rotations(a in pose(), b in pose()) {
        let r = rotation_between(&a, &b);
        prop_assert!((r.det() - 1.0).abs() < 1e-9);
        prop_assert!(RotationMatrix::new(*r.rows()).is_ok());
        let back = rotation_between(&b, &a).mul(&r);
        prop_assert!(back.max_abs_diff(&RotationMatrix::IDENTITY) < 1e-9);
    }

    #[test]
    fn quarter_turns_compose_to_identity(seed in 0u64..1000, turns in 1usize..4) {
        let vol = tensor(&[1, 2, 5, 5, 5], seed);
        let q = rotation_between(&Pose::origin(), &Pose::new(90.0 * turns as f64, 0.0).unwrap());
        let mut v = vol.clone();
        for _ in 0..4 {
            v = rotate_volume(&v, &q, Interp::Nearest).unwrap();
        }
        prop_assert_eq!(v.data(), vol.data());
    }

    #[test]
    fn ssim_bounds_and_symmetry(s1 in 0u64..1000, s2 in 0u64..1000) {
        let a = tensor(&[1, 3, 12, 12], s1);
        let b = tensor(&[1, 3, 12, 12], s2 + 5000);
        let ab = ssim(&a, &b).unwrap().item();
        let ba = ssim(&b, &a).unwrap().item();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert_eq!(ssim(&a, &a).unwrap().item(), 1.0);
    }

    #[test]
    fn color_loss_is_a_metric(s1 in 0u64..1000, s2 in 0u64..1000) {
        let a = tensor(&[2, 3, 4, 4], s1);
        let b = tensor(&[2, 3, 4, 4], s2 + 5000);
        let d = color_loss(&a, &b).unwrap().item();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, color_loss(&b, &a).unwrap().item());
        prop_assert_eq!(color_loss(&a, &a).unwrap().item(), 0.0);
    }

    #[test]
    fn flat_images_have_no_edges(v in 0.0..1.0f64, size in 3usize..10) {
        let img = Tensor::<f64>::full(&[1, 3, size, size], v).unwrap();
        prop_assert!(edge_map(&img).unwrap().data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn rgb8_round_trip_is_stable(seed in 0u64..1000) {
        let img = Image::from_tensor(&tensor(&[1, 3, 5, 7], seed), 0).unwrap();
        let once = Image::from_rgb8(3, 5, 7, &img.to_rgb8());
        prop_assert_eq!(Image::from_rgb8(3, 5, 7, &once.to_rgb8()), once.clone());
        prop_assert!(img.l1(&once) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn config_text_round_trips(
        seed in any::<u64>(),
        lr in 1e-6..1.0f64,
        batch in 1usize..16,
        steps in 0u64..100_000,
        az in 0.0..360.0f64,
        weights in (0.0..20.0f64, 0.0..20.0f64, 0.0..20.0f64, 0.0..20.0f64),
    ) {
        let mut c = TrainConfig { seed, lr, batch_size: batch, stage1_steps: steps, model: ModelConfig::small(), ..TrainConfig::default() };
        c.model.reference_pose = Pose::new(az, 10.0).unwrap();
        (c.weights.alpha, c.weights.beta, c.weights.gamma, c.weights.lambda) = weights;
        prop_assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }
}
