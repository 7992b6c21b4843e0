use proptest::prelude::*;
use vspam::gabor::{build_bank, contrast_energy, wavelet_count};
use vspam::stimuli::generate_pink_noise;

#[test]
fn counts_match_the_pyramid() {
    assert_eq!(wavelet_count(6, 8), 10_920);
    assert_eq!(build_bank(32, 3, 8).unwrap().len(), 8 * (1 + 4 + 16));
}

#[test]
fn bank_hash_depends_on_parameters() {
    let a = build_bank(16, 3, 4).unwrap();
    let b = build_bank(16, 3, 4).unwrap();
    let c = build_bank(16, 3, 6).unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), c.hash());
    assert_eq!(a.hash().len(), 16);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dc_shift_and_contrast_scaling(seed in 0u64..10_000, shift in -5.0f64..5.0, c in 0.1f64..4.0) {
        let bank = build_bank(16, 3, 4).unwrap();
        let img = generate_pink_noise(16, seed).unwrap();
        let base = contrast_energy(&bank, &img).unwrap();
        let shifted = contrast_energy(&bank, &img.map(|v| v + shift)).unwrap();
        let scaled = contrast_energy(&bank, &img.map(|v| v * c)).unwrap();
        for k in 0..base.len() {
            prop_assert!((shifted[k] - base[k]).abs() <= 1e-10);
            prop_assert!((scaled[k] - c * c * base[k]).abs() <= 1e-10 * (c * c * base[k]).max(1e-300) + 1e-14);
        }
    }
}
