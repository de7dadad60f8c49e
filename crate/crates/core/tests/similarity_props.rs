use hyperground_core::contrastive::{
    contrastive_loss, contrastive_loss_adjusted, GroundingBatch, ImageRecord, ScoreAdjust,
};
use hyperground_core::hemix::{hemix, sim_euclidean, sim_hyperbolic, EmbedStrategy, FeatureVector, MixParams, ProjectionBundle};
use proptest::prelude::*;

const D: usize = 4;

fn feature() -> impl Strategy<Value = FeatureVector> {
    prop::collection::vec(-2.0f64..2.0, D).prop_map(|v| FeatureVector::new(v).unwrap())
}

fn bundle(seed: u64, alpha: f64, embed: EmbedStrategy) -> ProjectionBundle {
    let params = MixParams {
        alpha,
        tau: 0.3,
        kappa: 1.3,
        embed,
        allow_endpoint_alpha: true,
    };
    ProjectionBundle::random(D, params, seed).unwrap()
}

fn embed() -> impl Strategy<Value = EmbedStrategy> {
    prop_oneof![Just(EmbedStrategy::Linear), Just(EmbedStrategy::ExpMap)]
}

proptest! {
    #[test]
    fn endpoints_reduce_to_single_branch(v in feature(), t in feature(), seed in any::<u64>(), e in embed()) {
        let b0 = bundle(seed, 0.0, e);
        let b1 = bundle(seed, 1.0, e);
        prop_assert_eq!(hemix(&v, &t, &b0).unwrap().to_bits(), sim_euclidean(&v, &t, &b0).unwrap().to_bits());
        prop_assert_eq!(hemix(&v, &t, &b1).unwrap().to_bits(), sim_hyperbolic(&v, &t, &b1).unwrap().to_bits());
    }

    #[test]
    fn mix_is_affine_in_alpha(v in feature(), t in feature(), seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let b = bundle(seed, alpha, EmbedStrategy::Linear);
        let se = sim_euclidean(&v, &t, &b).unwrap();
        let sh = sim_hyperbolic(&v, &t, &b).unwrap();
        let h = hemix(&v, &t, &b).unwrap();
        let expected = (1.0 - alpha) * se + alpha * sh;
        prop_assert!((h - expected).abs() <= f64::EPSILON * expected.abs());
    }

    #[test]
    fn hyperbolic_similarity_is_bounded(v in feature(), t in feature(), seed in any::<u64>(), e in embed()) {
        let b = bundle(seed, 0.5, e);
        prop_assert!(sim_hyperbolic(&v, &t, &b).unwrap() <= -1.0 / b.kappa() + 1e-12);
    }

    #[test]
    fn per_image_shift_leaves_loss_unchanged(
        anchors in prop::collection::vec(feature(), 2..4),
        texts in prop::collection::vec(feature(), 2..4),
        shifts in prop::collection::vec(-5.0f64..5.0, 3),
        seed in any::<u64>(),
        intra in any::<bool>(),
    ) {
        let n = texts.len();
        let images: Vec<ImageRecord> = texts
            .into_iter()
            .map(|t| ImageRecord::new(anchors.clone(), t).unwrap())
            .collect();
        let batch = GroundingBatch::new(images).unwrap();
        let b = bundle(seed, 0.5, EmbedStrategy::Linear);
        let base = contrastive_loss(&batch, &b, intra).unwrap();
        let adjust = ScoreAdjust { offsets: shifts[..n].to_vec(), scale: 1.0 };
        let shifted = contrastive_loss_adjusted(&batch, &b, intra, &adjust).unwrap();
        prop_assert!((base.loss - shifted.loss).abs() <= 1e-9 * (1.0 + base.loss));
        prop_assert!(base.loss >= 0.0);
    }

    #[test]
    fn single_image_without_intra_negatives_is_zero(
        anchors in prop::collection::vec(feature(), 1..5), t in feature(), seed in any::<u64>(),
    ) {
        let batch = GroundingBatch::new(vec![ImageRecord::new(anchors, t).unwrap()]).unwrap();
        let b = bundle(seed, 0.5, EmbedStrategy::Linear);
        let r = contrastive_loss(&batch, &b, false).unwrap();
        prop_assert_eq!(r.loss, 0.0);
        prop_assert!(r.grads.max_abs() <= 1e-12);
    }
}

#[test]
fn alpha_zero_leaves_hyperbolic_projections_untouched() {
    let f = |v: &[f64]| FeatureVector::new(v.to_vec()).unwrap();
    let images = vec![
        ImageRecord::new(vec![f(&[1.0, 0.5, -0.3, 0.2]), f(&[0.1, -1.0, 0.4, 0.0])], f(&[0.3, 0.3, 0.3, -0.9])).unwrap(),
        ImageRecord::new(vec![f(&[-0.5, 0.2, 0.8, 1.0]), f(&[0.0, 0.7, -0.7, 0.1])], f(&[1.0, -0.2, 0.0, 0.5])).unwrap(),
    ];
    let batch = GroundingBatch::new(images).unwrap();
    for intra in [false, true] {
        let r = contrastive_loss(&batch, &bundle(9, 0.0, EmbedStrategy::Linear), intra).unwrap();
        assert!(r.grads.w_hv.as_slice().iter().all(|g| *g == 0.0));
        assert!(r.grads.w_ht.as_slice().iter().all(|g| *g == 0.0));
        assert!(r.grads.w_ev.max_abs() > 0.0);
    }
}
