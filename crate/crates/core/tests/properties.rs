use body_restore::body::BodyPart;
use body_restore::caption::{parse_caption, serialize_caption, CaptionField, CaptionRecord};
use body_restore::degradation::{degrade, DegradationOrder, DegradationSpec};
use body_restore::diffusion::{build_schedule, estimate_x0, forward_diffuse, ScheduleConfig};
use body_restore::image::ImageTensor;
use body_restore::metrics::{psnr, ssim};
use body_restore::nn::scalar;
use body_restore::structure::{extract_structure, ExtractionMode};
use body_restore::synth::generate_sample;
use body_restore::training::weighted_denoising_loss;
use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;

fn image(h: usize, w: usize, c: usize) -> impl Strategy<Value = ImageTensor> {
    prop::collection::vec(0.0f32..=1.0, h * w * c).prop_map(move |v| ImageTensor::new(h, w, c, v).unwrap())
}

fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn phrase() -> impl Strategy<Value = Option<String>> {
    prop::option::of("[a-z]{1,8}( [a-z]{1,8}){0,2}")
}

fn caption() -> impl Strategy<Value = CaptionRecord> {
    prop::collection::vec(phrase(), 9).prop_map(|f| {
        let mut it = f.into_iter();
        let mut next = || it.next().unwrap();
        CaptionRecord {
            identity: next(),
            hair: next(),
            accessory_on_face: next(),
            accessory_on_neck: next(),
            upper_garment: next(),
            accessory_on_hands: next(),
            lower_garment: next(),
            shoes: next(),
            carried_items: next(),
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_then_estimate_recovers_the_latent(
        z0 in prop::collection::vec(-3.0f32..3.0, 24),
        eps in prop::collection::vec(-4.0f32..4.0, 24),
        t in 1usize..=1000,
    ) {
        prop_assume!(z0.iter().any(|v| v.abs() > 0.1));
        let sched = ScheduleConfig::default().build().unwrap();
        let z = Tensor::from_vec(z0.clone(), (1, 4, 2, 3), &Device::Cpu).unwrap();
        let e = Tensor::from_vec(eps, (1, 4, 2, 3), &Device::Cpu).unwrap();
        let back = values(&estimate_x0(&forward_diffuse(&z, t, &e, &sched).unwrap(), t, &e, &sched).unwrap());
        let err: f64 = back.iter().zip(&z0).map(|(a, b)| (a - *b as f64).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = z0.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        prop_assert!(err / norm <= 1e-5, "relative error {}", err / norm);
    }

    #[test]
    fn alpha_bar_is_the_running_product(
        steps in 1usize..400,
        start in 1e-5f64..0.01,
        span in 0.0f64..0.2,
    ) {
        let s = build_schedule(steps, start, start + span, 1).unwrap();
        let mut prod = 1.0f64;
        for (i, b) in s.betas().iter().enumerate() {
            prop_assert!(*b > 0.0 && *b < 1.0);
            prod *= 1.0 - b;
            let ab = s.alpha_bars()[i];
            prop_assert!((ab - prod).abs() <= 1e-12 * prod);
            if i > 0 {
                prop_assert!(ab < s.alpha_bars()[i - 1]);
            }
        }
    }

    #[test]
    fn each_element_scales_by_the_weight_law(
        eps in prop::collection::vec(-3.0f32..3.0, 24),
        pred in prop::collection::vec(-3.0f32..3.0, 24),
        a in 0.0f32..=1.0,
    ) {
        let e = Tensor::from_vec(eps.clone(), (1, 4, 2, 3), &Device::Cpu).unwrap();
        let p = Tensor::from_vec(pred.clone(), (1, 4, 2, 3), &Device::Cpu).unwrap();
        let zero = Tensor::zeros((1, 4, 2, 1), DType::F32, &Device::Cpu).unwrap();
        let plain = scalar(&weighted_denoising_loss(&e, &p, &zero).unwrap()).unwrap();
        prop_assume!(plain > 1e-6);
        let att = Tensor::full(a, (1, 4, 2, 1), &Device::Cpu).unwrap();
        let weighted = scalar(&weighted_denoising_loss(&e, &p, &att).unwrap()).unwrap();
        let want = (1.0 + a as f64).powi(2) * plain;
        prop_assert!((weighted - want).abs() <= 1e-6 * want);
    }

    #[test]
    fn metrics_are_symmetric_and_flip_invariant(a in image(12, 13, 3), b in image(12, 13, 3)) {
        let (pab, pba) = (psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((pab - pba).abs() <= 1e-12 * pab.abs().max(1.0));
        let sab = ssim(&a, &b).unwrap();
        prop_assert!((sab - ssim(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        for (fa, fb) in [
            (a.flip_horizontal(), b.flip_horizontal()),
            (a.flip_vertical(), b.flip_vertical()),
        ] {
            prop_assert!((psnr(&fa, &fb).unwrap() - pab).abs() <= 1e-9);
            prop_assert!((ssim(&fa, &fb).unwrap() - sab).abs() <= 1e-9);
        }
    }

    #[test]
    fn degradation_stays_in_range_and_is_deterministic(
        img in image(16, 16, 3),
        blur in 0.0f32..2.0,
        down in prop::sample::select(vec![1usize, 2, 4]),
        noise in 0.0f32..0.2,
        q in prop::option::of(1u8..=100),
        swap in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let spec = DegradationSpec {
            blur_sigma: blur,
            downsample: down,
            noise_sigma: noise,
            jpeg_quality: q,
            order: if swap { DegradationOrder::JpegThenNoise } else { DegradationOrder::NoiseThenJpeg },
        };
        let out = degrade(&img, &spec, seed).unwrap();
        prop_assert_eq!(out.dims(), img.dims());
        prop_assert!(out.in_unit_range());
        prop_assert_eq!(out, degrade(&img, &spec, seed).unwrap());
        prop_assert_eq!(degrade(&img, &DegradationSpec::off(), seed).unwrap(), img);
    }

    #[test]
    fn serializer_follows_field_order(rec in caption()) {
        let text = serialize_caption(&rec);
        let expected: Vec<&str> = CaptionField::ALL.iter().filter_map(|f| rec.field(*f)).collect();
        prop_assert_eq!(text, expected.join(", "));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generated_samples_keep_their_invariants(seed in any::<u64>()) {
        let s = generate_sample(seed, None).unwrap();
        s.check_invariants().unwrap();
        prop_assert_eq!(&s.image, &generate_sample(seed, None).unwrap().image);

        let (h, w) = (s.image.height(), s.image.width());
        let counted: usize = BodyPart::ALL.iter().map(|p| s.parts.pixel_count(*p)).sum();
        let background = s.parts.labels.iter().filter(|l| l.is_none()).count();
        prop_assert_eq!(counted + background, h * w);

        let parsed = parse_caption(&serialize_caption(&s.caption));
        prop_assert_eq!(parsed.record, s.caption.clone());

        let st = extract_structure(&s.image, ExtractionMode::Heuristic, None).unwrap();
        prop_assert!(st.pose.in_unit_range() && st.attention.in_unit_range());
        let again = extract_structure(&s.image, ExtractionMode::Heuristic, None).unwrap();
        prop_assert_eq!(st.pose, again.pose);
        prop_assert_eq!(st.attention, again.attention);
    }
}
