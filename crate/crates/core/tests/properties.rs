//! Property tests for invariants that span modules.

use proptest::prelude::*;

use palsim::dataset::area_resize;
use palsim::degrade::{patchwise_convolve, ConvolveOptions};
use palsim::diffraction::{Channel, KernelTag, PsfKernel, PsfStack};
use palsim::isp::{add_noise, forward_isp, IspParams, NoiseParams};
use palsim::metrics::{mtf_from_psf, psnr, ssim};
use palsim::projection::{deform_psf, scale_profile, unfold_resample, CameraModel, RowAssignment, ScaleProfile};
use palsim::zernike::{ZernikeField, FRINGE_TERMS};
use palsim::{ColorState, Execution, Geometry, ImagePlane};

fn plane(h: usize, w: usize, c: usize, data: Vec<f64>, color: ColorState) -> ImagePlane {
    ImagePlane::new(h, w, c, data, color, Geometry::PerspectiveUnfolded).unwrap()
}

fn unit_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, len)
}

fn rgb_stack(n_fov: usize, kernel: &[f64], size: usize) -> PsfStack {
    let fovs: Vec<f64> = (0..n_fov).map(|i| 30.0 + i as f64).collect();
    let tags = Channel::ALL.iter().map(|&c| KernelTag::Channel(c)).collect();
    let kernels = fovs
        .iter()
        .flat_map(|&f| {
            Channel::ALL
                .iter()
                .map(move |&c| PsfKernel::new(size, size, kernel.to_vec(), f, KernelTag::Channel(c), 1.0).unwrap())
        })
        .collect();
    PsfStack::new(fovs, tags, kernels, vec![1.0; n_fov]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn resample_is_idempotent_and_sum_preserving(
        data in unit_vec(3 * 40),
        s in 1.05f64..4.0,
    ) {
        let img = plane(3, 40, 1, data, ColorState::LinearRgb);
        let mut p = ScaleProfile::uniform(&[50.0], 90.0);
        p.factors[0] = s;
        let a = RowAssignment::uniform(3, 0);
        let once = unfold_resample(&img, &p, &a).unwrap();
        let twice = unfold_resample(&once, &p, &a).unwrap();
        for (x, y) in once.data().iter().zip(twice.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        for r in 0..3 {
            let before: f64 = (0..40).map(|x| img.get(r, x, 0)).sum();
            let after: f64 = (0..40).map(|x| once.get(r, x, 0)).sum();
            prop_assert!((before - after).abs() < 1e-9);
        }
    }

    #[test]
    fn deformed_kernels_stay_normalized(data in unit_vec(49), s in 0.3f64..3.0) {
        prop_assume!(data.iter().sum::<f64>() > 1e-3);
        let k = PsfKernel::new(7, 7, data, 50.0, KernelTag::WavelengthNm(550.0), 1.0).unwrap();
        let d = deform_psf(&k, s).unwrap();
        prop_assert!((d.kernel.sum() - 1.0).abs() < 1e-12);
        prop_assert_eq!(d.kernel.height(), 7);
        prop_assert!(d.kernel.width() % 2 == 1);
        prop_assert!(d.kernel.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn scale_factor_is_one_at_reference_angle(a0 in 0.0f64..50.0, a1 in 1.0f64..6.0, a2 in 0.0f64..0.02) {
        let m = CameraModel::new(vec![a0, a1, a2], [0.0, 0.0], [20.0, 100.0], None).unwrap();
        let p = scale_profile(&m, &[m.theta0_deg(), 30.0, 100.0]).unwrap();
        prop_assert_eq!(p.factors[0], 1.0);
        prop_assert!(p.factors[1] > 1.0 && p.factors[2] <= 1.0);
    }

    #[test]
    fn patchwise_convolution_of_constants_is_constant(
        v in 0.0f64..1.0,
        margin in 0usize..6,
        threshold in prop::sample::select(vec![0usize, 15]),
        kernel in unit_vec(25),
    ) {
        prop_assume!(kernel.iter().sum::<f64>() > 1e-3);
        let img = ImagePlane::filled(17, 12, 3, v, ColorState::LinearRgb, Geometry::PerspectiveUnfolded).unwrap();
        let stack = rgb_stack(4, &kernel, 5);
        let a = RowAssignment::linear(17, stack.fov_samples()).unwrap();
        let opts = ConvolveOptions { blend_margin: margin, fft_threshold: threshold };
        let out = patchwise_convolve(&img, &stack, &a, opts, Execution::Sequential).unwrap();
        for x in out.data() {
            prop_assert!((x - v).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbation_keeps_ratio_and_sign(
        fraction in 0.0f64..0.5,
        seed in any::<u64>(),
        base in prop::collection::vec(-2.0f64..2.0, 2 * FRINGE_TERMS),
    ) {
        let coeffs = base
            .chunks_exact(FRINGE_TERMS)
            .map(|c| std::array::from_fn(|k| c[k]))
            .collect();
        let f = ZernikeField::new(vec![40.0, 60.0], vec![550.0], coeffs).unwrap();
        let p = f.perturb(fraction, seed).unwrap();
        for (a, b) in f.cells().iter().flatten().zip(p.cells().iter().flatten()) {
            if *a != 0.0 {
                let r = b / a;
                prop_assert!(r >= 1.0 - fraction - 1e-12 && r <= 1.0 + fraction + 1e-12);
            }
        }
    }

    #[test]
    fn sensor_output_stays_in_unit_range(
        data in unit_vec(6 * 6 * 3),
        shot in 0.0f64..0.05,
        read in 0.0f64..0.01,
        seed in any::<u64>(),
    ) {
        let img = plane(6, 6, 3, data, ColorState::LinearRgb);
        let noisy = add_noise(&img, NoiseParams { shot, read }, seed).unwrap();
        prop_assert!(noisy.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let params = IspParams { noise: NoiseParams { shot, read }, ..IspParams::default() };
        let out = forward_isp(&img, &params, seed).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn similarity_metrics_are_symmetric_and_bounded(a in unit_vec(16 * 16), b in unit_vec(16 * 16)) {
        let x = plane(16, 16, 1, a, ColorState::Srgb);
        let y = plane(16, 16, 1, b, ColorState::Srgb);
        let s1 = ssim(&x, &y).unwrap();
        let s2 = ssim(&y, &x).unwrap();
        prop_assert!((s1 - s2).abs() < 1e-12);
        prop_assert!(s1 <= 1.0 + 1e-12);
        prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psf_mtf_is_bounded_by_one(data in unit_vec(81)) {
        prop_assume!(data.iter().sum::<f64>() > 1e-3);
        let k = PsfKernel::new(9, 9, data, 50.0, KernelTag::WavelengthNm(550.0), 1.0).unwrap();
        let m = mtf_from_psf(&k).unwrap();
        for c in [&m.sagittal, &m.tangential] {
            prop_assert!((c.modulation[0] - 1.0).abs() < 1e-12);
            prop_assert!(c.modulation.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        }
    }

    #[test]
    fn area_resize_preserves_mean(data in unit_vec(12 * 20 * 3), oh in 1usize..12, ow in 1usize..20) {
        let img = plane(12, 20, 3, data, ColorState::Srgb);
        let out = area_resize(&img, oh, ow).unwrap();
        let mean = |p: &ImagePlane| p.data().iter().sum::<f64>() / p.data().len() as f64;
        prop_assert!((mean(&img) - mean(&out)).abs() < 1e-12);
    }
}
