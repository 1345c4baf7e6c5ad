use proptest::prelude::*;

use rsbp::eval::nrmse;
use rsbp::geometry::{fbp_single_view, radon_single_view, ramp_filter, Image, Projection, Unit, ViewGeometry};
use rsbp::io::{export_display, Container, Payload};
use rsbp::sbp::{denormalize_to_hu, normalize_for_network};

fn image(side: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(-1000.0f64..3000.0, side * side)
        .prop_map(move |v| Image::from_vec(side, v, Unit::Hu).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn container_round_trip(dims in prop::collection::vec(1usize..5, 1..=4), seed in any::<u64>(), f32_payload in any::<bool>()) {
        let len: usize = dims.iter().product();
        let values: Vec<f64> = (0..len).map(|i| f64::from_bits(seed.rotate_left(i as u32) >> 2)).collect();
        let payload = if f32_payload {
            Payload::F32(values.iter().map(|&v| v as f32).collect())
        } else {
            Payload::F64(values)
        };
        let c = Container::new(dims, payload, serde_json::json!({"seed": seed})).unwrap();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn projector_is_linear(a in image(12), b in image(12), s in -3.0f64..3.0, j in 0usize..6) {
        let geom = ViewGeometry::new(12, 6).unwrap();
        let combo = Image::from_vec(12, a.data().iter().zip(b.data()).map(|(x, y)| s * x + y).collect(), Unit::Hu).unwrap();
        let pa = radon_single_view(&a, &geom, j).unwrap();
        let pb = radon_single_view(&b, &geom, j).unwrap();
        let pc = radon_single_view(&combo, &geom, j).unwrap();
        let scale = pc.values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for k in 0..12 {
            prop_assert!((s * pa.values[k] + pb.values[k] - pc.values[k]).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn ramp_filter_scales_exactly(values in prop::collection::vec(-10.0f64..10.0, 9)) {
        let p = Projection { values: values.clone(), view_index: 0 };
        let twice = Projection { values: values.iter().map(|v| 2.0 * v).collect(), view_index: 0 };
        let a = ramp_filter(&p);
        let b = ramp_filter(&twice);
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn zero_projection_gives_zero_image(j in 0usize..4) {
        let geom = ViewGeometry::new(8, 4).unwrap();
        let z = fbp_single_view(&Projection { values: vec![0.0; 8], view_index: j }, &geom).unwrap();
        prop_assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn display_export_is_monotone(a in -500.0f64..2500.0, b in -500.0f64..2500.0) {
        let img = Image::from_vec(1, vec![a.min(b)], Unit::Hu).unwrap();
        let img2 = Image::from_vec(1, vec![a.max(b)], Unit::Hu).unwrap();
        prop_assert!(export_display(&img, 0.0, 2000.0).unwrap()[0] <= export_display(&img2, 0.0, 2000.0).unwrap()[0]);
    }

    #[test]
    fn nrmse_is_scale_invariant(t in image(4), h in image(4), s in 0.5f64..4.0) {
        prop_assume!(t.data().iter().any(|&v| v != 0.0));
        let scale = |img: &Image| img.map(|v| v * s);
        let a = nrmse(&t, &h).unwrap();
        let b = nrmse(&scale(&t), &scale(&h)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn normalization_round_trip_within_one_ulp(img in image(3)) {
        let back = denormalize_to_hu(&normalize_for_network(&img).unwrap()).unwrap();
        for (x, y) in img.data().iter().zip(back.data()) {
            prop_assert!((x - y).abs() <= f64::EPSILON * x.abs());
        }
    }
}
