use fusmae::ModelConfig;
use fusmae_wasm_demo::*;

#[test]
fn sample_strip_is_three_square_panels() {
    let n = image_size();
    let a = render_sample(7, 3).unwrap();
    assert_eq!(a.len(), 3 * n * n * 4);
    assert!(a.chunks(4).all(|px| px[3] == 255));
    assert_eq!(a, render_sample(7, 3).unwrap());
    assert_ne!(a, render_sample(7, 4).unwrap());
}

#[test]
fn mask_flags_follow_the_strategy() {
    let t = ModelConfig::default().num_patches();
    for seed in 0..20 {
        let c = mask_plan_flags(seed, "consistent", 0.75).unwrap();
        assert_eq!(c.iter().filter(|&&f| f == 1).count(), 2 * 12);
        assert_eq!(c[..t], c[t..]);
        let i = mask_plan_flags(seed, "independent", 0.75).unwrap();
        assert_eq!(i[..t].iter().filter(|&&f| f == 1).count(), 12);
    }
    assert!(mask_plan_flags(0, "diagonal", 0.75).is_err());
    assert!(mask_plan_flags(0, "consistent", 1.0).is_err());
}

#[test]
fn attention_rows_are_distributions() {
    let v = attention_view("xaed", 1, 7, 0, 2).unwrap();
    let w = v.weights();
    assert_eq!(w.len(), v.rows() * v.cols());
    for r in w.chunks(v.cols()) {
        assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-4);
    }
    let m = v.within_modality_mass().unwrap();
    assert!((0.0..=1.0).contains(&m));
    assert!(attention_view("early_concat", 1, 7, 0, 0).unwrap().within_modality_mass().is_none());
    assert!(attention_view("xaed", 1, 7, 0, 99).is_err());
}
