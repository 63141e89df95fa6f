use covernet::assess::{assess, assessment_from_outputs, composite_score, crop_to_stride, AssessConfig};
use covernet::dataset::generate_scene;
use covernet::{MultiTaskNet, NetConfig};
use image::RgbImage;
use proptest::prelude::*;

proptest! {
    #[test]
    fn composite_is_monotone_in_each_term(
        c in 0.0f64..10.0, p in 0.0f64..1.0, x in 0.0f64..1.0,
        dc in 0.0f64..5.0, dp in 0.0f64..0.5, dx in 0.0f64..0.5,
    ) {
        let cfg = AssessConfig::default();
        let base = composite_score(c, p, x, &cfg);
        prop_assert!((0.0..=1.0).contains(&base));
        prop_assert!(composite_score((c + dc).min(10.0), p, x, &cfg) >= base);
        prop_assert!(composite_score(c, (p + dp).min(1.0), x, &cfg) >= base);
        prop_assert!(composite_score(c, p, (x + dx).min(1.0), &cfg) >= base);
    }

    #[test]
    fn gate_flag_agrees_with_score(clarity_norm in 0.0f64..1.0) {
        let cfg = AssessConfig::default();
        let a = assessment_from_outputs(clarity_norm, &[0.9; 16], 4, 4, &cfg);
        prop_assert_eq!(a.pass_clarity_gate, a.clarity_score > cfg.gate_threshold);
        prop_assert!((a.clarity_score - 10.0 * clarity_norm).abs() < 1e-12);
    }
}

#[test]
fn assessment_is_deterministic_and_well_formed() {
    let net = MultiTaskNet::<f32>::build(NetConfig {
        base_channels: 4,
        head_channels: 8,
        decoder_channels: 4,
        low_level_channels: 4,
        ..NetConfig::default()
    })
    .unwrap();
    let image = generate_scene(5, 64).image;
    let cfg = AssessConfig::default();
    let (a, mask) = assess(&net, &image, &cfg).unwrap();
    let (b, mask2) = assess(&net, &image, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(mask, mask2);
    assert_eq!(mask.dimensions(), (64, 64));
    let fg = mask.pixels().filter(|p| p[0] == 255).count() as f64;
    assert_eq!(a.object_proportion, fg / 4096.0);
    assert_eq!(a.centroid_defined, a.centroid.is_some());
    assert!((0.0..=10.0).contains(&a.clarity_score));
    assert!((0.0..=1.0).contains(&a.composite));

    let json: serde_json::Value = serde_json::from_str(&a.to_json()).unwrap();
    assert_eq!(json.as_object().unwrap().len(), 7);
}

#[test]
fn odd_sized_images_need_a_crop() {
    let net = MultiTaskNet::<f32>::build(NetConfig::default()).unwrap();
    let image = RgbImage::new(70, 50);
    assert!(assess(&net, &image, &AssessConfig::default()).is_err());
    let cropped = crop_to_stride(&image).unwrap();
    assert_eq!(cropped.dimensions(), (64, 48));
    assert!(assess(&net, &cropped, &AssessConfig::default()).is_ok());
}
