use fidel::attack::{extract_partials, DEAD_THRESHOLD};
use fidel::eval::{count_revealed, pearson};
use fidel::fed::{server_aggregate, ModelUpdate};
use fidel::nn::codec::UpdateMeta;
use fidel::nn::layer::{Activation, LayerSpec};
use fidel::nn::{Model, ParamSet};
use fidel::Tensor;
use proptest::prelude::*;

fn vector(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

fn non_constant(v: &[f64]) -> bool {
    v.iter().any(|&x| (x - v[0]).abs() > 1e-6)
}

fn small_model() -> Model {
    Model::new(&[6], vec![LayerSpec::dense(4, Activation::Relu), LayerSpec::dense(3, Activation::Softmax)], 0).unwrap()
}

fn update_from(values: &[f64], model: &Model) -> ModelUpdate {
    let mut it = values.iter().cycle();
    let layers = model
        .params()
        .layers()
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|t| Tensor::new(t.shape().to_vec(), (0..t.len()).map(|_| *it.next().unwrap()).collect()).unwrap())
                .collect()
        })
        .collect();
    ModelUpdate {
        deltas: ParamSet::new(layers),
        meta: UpdateMeta::default(),
    }
}

fn tensors(flat: &[f64], len: usize) -> Vec<Tensor> {
    flat.chunks_exact(len).map(|c| Tensor::vector(c.to_vec())).collect()
}

proptest! {
    #[test]
    fn pearson_is_affine_invariant(
        a in vector(2..64),
        c in prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3],
        d in -1e3f64..1e3,
    ) {
        prop_assume!(non_constant(&a));
        let b: Vec<f64> = a.iter().map(|x| c * x + d).collect();
        let r = pearson(&a, &b).unwrap();
        prop_assert!((r.abs() - 1.0).abs() < 1e-12, "r = {r}");
        prop_assert_eq!(r.signum(), c.signum());
    }

    #[test]
    fn pearson_is_symmetric(ab in vector(4..80)) {
        let (a, b) = ab.split_at(ab.len() / 2);
        let b = &b[..a.len()];
        prop_assert_eq!(pearson(a, b), pearson(b, a));
    }

    #[test]
    fn pearson_stays_in_range(ab in vector(4..80)) {
        let (a, b) = ab.split_at(ab.len() / 2);
        if let Some(r) = pearson(a, &b[..a.len()]) {
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn lowering_the_threshold_never_lowers_the_count(
        cands in prop::collection::vec(-1.0f64..1.0, 8 * 6),
        private in prop::collection::vec(-1.0f64..1.0, 8 * 4),
        hi in 0.0f64..1.0,
        gap in 0.0f64..1.0,
    ) {
        let cands = tensors(&cands, 8);
        let private = tensors(&private, 8);
        let lo = (hi - gap).max(0.0);
        let strict = count_revealed(&cands, &private, hi).unwrap();
        let loose = count_revealed(&cands, &private, lo).unwrap();
        prop_assert!(loose.revealed >= strict.revealed);
        prop_assert!(strict.revealed <= private.len());
    }

    #[test]
    fn adding_candidates_never_lowers_the_count(
        cands in prop::collection::vec(-1.0f64..1.0, 8 * 6),
        extra in prop::collection::vec(-1.0f64..1.0, 8 * 3),
        private in prop::collection::vec(-1.0f64..1.0, 8 * 4),
        threshold in 0.0f64..1.0,
    ) {
        let mut cands = tensors(&cands, 8);
        let private = tensors(&private, 8);
        let before = count_revealed(&cands, &private, threshold).unwrap().revealed;
        cands.extend(tensors(&extra, 8));
        let after = count_revealed(&cands, &private, threshold).unwrap().revealed;
        prop_assert!(after >= before);
    }

    #[test]
    fn exact_partials_ignore_delta_scale(
        values in prop::collection::vec(-1.0f64..1.0, 1..40),
        c in prop_oneof![-1e6f64..-1e-6, 1e-6f64..1e6],
        shift in -20i32..20,
    ) {
        let model = small_model();
        let update = update_from(&values, &model);
        let base = extract_partials(&update, &model, DEAD_THRESHOLD).unwrap();

        let pow2 = extract_partials(&update.scale(2f64.powi(shift)), &model, DEAD_THRESHOLD).unwrap();
        for (p, q) in base.iter().zip(&pow2) {
            prop_assert_eq!(p.kind, q.kind);
            if p.is_exact() {
                prop_assert_eq!(&p.values, &q.values);
            }
        }
        let scaled = extract_partials(&update.scale(c), &model, DEAD_THRESHOLD).unwrap();
        for (p, q) in base.iter().zip(&scaled) {
            prop_assert_eq!(p.kind, q.kind);
            if p.is_exact() {
                for (a, b) in p.values.data().iter().zip(q.values.data()) {
                    prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn aggregation_of_copies_is_independent_of_count(
        values in prop::collection::vec(-1.0f64..1.0, 1..40),
        k in 1usize..12,
    ) {
        let model = small_model();
        let update = update_from(&values, &model);
        let one = server_aggregate(std::slice::from_ref(&update), &model).unwrap();
        let many = server_aggregate(&vec![update; k], &model).unwrap();
        for (a, b) in one.params().tensors().zip(many.params().tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-14 * x.abs().max(1.0));
            }
        }
    }
}
