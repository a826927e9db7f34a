use hideseek::hsn::{attack_hsn, MaskedAutoencoder, HsnConfig};
use hideseek::hsplus::{attack_hsplus, DecodeMode, HsPlusOptions, MaskingModel, OrderVariant, PixelGenerator};
use hideseek::masking::{MaskStrategy, StrategyKind};
use hideseek::{ImageTensor, Rng, ValueDomain};
use proptest::prelude::*;

fn image(seed: u64, w: usize, h: usize) -> ImageTensor {
    let mut rng = Rng::new(seed);
    ImageTensor::from_fn(3, w, h, ValueDomain::U8, |_, _, _| rng.index(256) as f64).unwrap()
}

fn hidden_pixels_only(a: &ImageTensor, b: &ImageTensor, vis: &[u8]) -> bool {
    let n = a.pixel_count();
    (0..a.len()).all(|j| vis[j % n] == 0 || a.data()[j] == b.data()[j])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hsn_keeps_visible_pixels(seed in 0u64..1000, beta in 0.05f64..0.95, kind in 0usize..2) {
        let cfg = HsnConfig { latent: 8, ..Default::default() };
        let model = MaskedAutoencoder::new(3, 16, 16, &cfg, &mut Rng::new(seed)).unwrap();
        let img = image(seed, 16, 16);
        let kind = [StrategyKind::Random, StrategyKind::Continuous][kind];
        let strategy = MaskStrategy::new(kind, beta).unwrap();
        let out = attack_hsn(&model, &img, &strategy, &mut Rng::new(seed + 1)).unwrap();
        prop_assert!(hidden_pixels_only(&img, &out.image, &out.mask.pixel_values()));
        let hidden = out.mask.hidden_count() as f64 / out.mask.total() as f64;
        prop_assert!((hidden - beta).abs() <= 1.0 / out.mask.total() as f64);
    }

    #[test]
    fn hsplus_keeps_visible_pixels_and_ends_on_minimum(seed in 0u64..1000, gamma in 1.0f64..20.0) {
        let mut rng = Rng::new(seed);
        let masker = MaskingModel::new(3, 4, &mut rng);
        let generator = PixelGenerator::new(3, 1, 8, &mut rng);
        let img = image(seed, 10, 10);
        let opts = HsPlusOptions { gamma, ..Default::default() };
        let out = attack_hsplus(&masker, &generator, &img, &opts).unwrap();
        prop_assert!(hidden_pixels_only(&img, &out.image, &out.mask.pixel_values()));
        prop_assert_eq!(out.order.len(), out.hidden_count());
        if let Some(last) = out.order.cells().last() {
            let s = out.scores.values();
            let min = out.mask.hidden_cells().iter().map(|c| s[c.y * 10 + c.x]).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(s[last.y * 10 + last.x], min);
        }
    }
}

#[test]
fn hsplus_is_deterministic_per_seed() {
    let mut rng = Rng::new(3);
    let masker = MaskingModel::new(3, 4, &mut rng);
    let generator = PixelGenerator::new(3, 1, 8, &mut rng);
    let img = image(9, 12, 12);
    let opts = |seed| HsPlusOptions {
        mode: DecodeMode::Sample { temperature: 1.0, seed },
        ..Default::default()
    };
    let a = attack_hsplus(&masker, &generator, &img, &opts(1)).unwrap();
    let b = attack_hsplus(&masker, &generator, &img, &opts(1)).unwrap();
    assert_eq!(a.image, b.image);
    let c = attack_hsplus(&masker, &generator, &img, &opts(2)).unwrap();
    assert_eq!(a.mask, c.mask);
    if a.hidden_count() > 0 {
        assert_ne!(a.image, c.image);
    }
}

#[test]
fn inverse_order_reverses_original() {
    let mut rng = Rng::new(4);
    let masker = MaskingModel::new(3, 4, &mut rng);
    let generator = PixelGenerator::new(3, 1, 8, &mut rng);
    let img = image(5, 12, 12);
    let run = |order| {
        let opts = HsPlusOptions { order, mode: DecodeMode::Argmax, ..Default::default() };
        attack_hsplus(&masker, &generator, &img, &opts).unwrap()
    };
    let a = run(OrderVariant::Original);
    let b = run(OrderVariant::Inverse);
    let mut rev = b.order.cells().to_vec();
    rev.reverse();
    assert_eq!(a.order.cells(), rev.as_slice());
}
