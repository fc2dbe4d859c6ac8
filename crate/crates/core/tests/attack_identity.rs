use fidel::attack::{extract_partials, reconstruct_single, DEAD_THRESHOLD};
use fidel::data::{Dataset, SampleSource, Source, Split};
use fidel::fed::{client_train, ClientConfig, ModelUpdate};
use fidel::genrec::build_pairs;
use fidel::nn::arch::{build_victim, VictimArch, VictimOptions};
use fidel::nn::codec::UpdateMeta;
use fidel::nn::layer::Activation;
use fidel::nn::{one_hot, LossKind, Phase};
use fidel::rng::seeded;
use fidel::eval::pearson;
use rand::Rng;

fn random_dataset(source: Source, n: usize, seed: u64) -> Dataset {
    let mut rng = seeded(seed);
    let per: usize = source.sample_shape().iter().product();
    let pixels = (0..n * per).map(|_| rng.gen()).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..10)).collect();
    Dataset::from_raw(source, Split::PrivatePool, pixels, labels).unwrap()
}

fn options(k: u64) -> VictimOptions {
    VictimOptions {
        first_activation: [Activation::Relu, Activation::Sigmoid, Activation::Tanh][k as usize % 3],
        dropout: (k % 2 == 0).then_some(0.5),
    }
}

#[test]
fn single_sample_exact_partials_equal_the_input() {
    for (e, &lr) in [0.001, 0.01, 0.1].iter().enumerate() {
        for k in 0..12u64 {
            let seed = 100 * e as u64 + k;
            let victim = build_victim(VictimArch::Fcnn, &[28, 28, 1], options(k), seed).unwrap();
            let data = random_dataset(Source::Mnist, 1, seed);
            let cfg = ClientConfig { learning_rate: lr, seed, ..ClientConfig::default() };
            let (_, update) = client_train(&victim, &data, &cfg).unwrap();
            let x = data.image(0);
            let scale = x.max_abs();
            let partials = extract_partials(&update, &victim, DEAD_THRESHOLD).unwrap();
            let mut live = 0;
            for p in partials.iter().filter(|p| p.is_exact()) {
                live += 1;
                for (a, b) in p.values.data().iter().zip(x.data()) {
                    assert!((a - b).abs() <= 1e-9 * scale, "lr {lr} neuron {}: {a} vs {b}", p.neuron);
                }
            }
            assert!(live > 0);
            let best = reconstruct_single(&partials).unwrap();
            assert!(pearson(best.values.data(), x.data()).unwrap() > 0.9999);
        }
    }
}

#[test]
fn unbiased_partials_are_collinear_with_the_input() {
    let victim = build_victim(VictimArch::Fcnn, &[28, 28, 1], options(1), 3).unwrap();
    let data = random_dataset(Source::Mnist, 1, 3);
    let (_, update) = client_train(&victim, &data, &ClientConfig::default()).unwrap();
    // Force every neuron down the unbiased path.
    let partials = extract_partials(&update, &victim, f64::INFINITY).unwrap();
    let x = data.image(0);
    for p in partials.iter().filter(|p| !p.dead && p.values.max_abs() > 0.0) {
        assert!(!p.is_exact());
        let r = pearson(p.values.data(), x.data()).unwrap();
        assert!((r.abs() - 1.0).abs() < 1e-9, "neuron {} r {r}", p.neuron);
    }
}

#[test]
fn attack_on_deltas_equals_attack_on_scaled_gradients() {
    let victim = build_victim(VictimArch::Fcnn, &[28, 28, 1], options(0), 9).unwrap();
    let data = random_dataset(Source::Mnist, 1, 9);
    let lr = 0.01;
    let cfg = ClientConfig { learning_rate: lr, batch_size: 1, seed: 4, ..ClientConfig::default() };
    let (_, update) = client_train(&victim, &data, &cfg).unwrap();

    let (x, labels) = data.batch(&[0]);
    let y = one_hot(&labels, 10);
    let mut rng = seeded(4);
    let trace = victim.forward(&x, Phase::Training(&mut rng)).unwrap();
    let grads = victim.backward(&trace, &y, LossKind::CategoricalCrossEntropy).unwrap();
    let from_grads = ModelUpdate { deltas: grads.scale(-lr), meta: UpdateMeta::default() };

    let a = extract_partials(&update, &victim, DEAD_THRESHOLD).unwrap();
    let b = extract_partials(&from_grads, &victim, DEAD_THRESHOLD).unwrap();
    assert_eq!(a, b);
}

#[test]
fn cnn_exact_partials_equal_victim_features() {
    for k in 0..10u64 {
        let source = if k % 2 == 0 { Source::Cifar10 } else { Source::Mnist };
        let shape = source.sample_shape();
        let victim = build_victim(VictimArch::Cnn, &shape, options(k), k).unwrap();
        let data = random_dataset(source, 1, 50 + k);
        let cfg = ClientConfig { seed: k, ..ClientConfig::default() };
        let (_, update) = client_train(&victim, &data, &cfg).unwrap();
        let pairs = build_pairs(&victim, &data).unwrap();
        let features = pairs.features.sample(0);
        let scale = features.max_abs();
        let partials = extract_partials(&update, &victim, DEAD_THRESHOLD).unwrap();
        let exact: Vec<_> = partials.iter().filter(|p| p.is_exact()).collect();
        assert!(!exact.is_empty());
        for p in exact {
            assert_eq!(p.values.shape(), features.shape());
            for (a, b) in p.values.data().iter().zip(features.data()) {
                assert!((a - b).abs() <= 1e-6 * scale, "round {k} neuron {}", p.neuron);
            }
        }
    }
}
