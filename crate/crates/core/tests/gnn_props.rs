mod common;

use hiersym::ged_gnn::{EmbeddingCache, GedModel, ModelConfig};
use hiersym::labeled::LabeledGraph;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn graph(seed: u64) -> LabeledGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ne, nn) = (rng.gen_range(1..=8), rng.gen_range(1..=6));
    common::random_bipartite(&mut rng, ne, nn)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn score_is_symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>(), init in 0u64..4) {
        let m = GedModel::new(ModelConfig { init_seed: init, ..Default::default() });
        let (a, b) = (graph(s1), graph(s2));
        let ab = m.predict(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, m.predict(&b, &a));
    }

    #[test]
    fn score_ignores_vertex_order(s1 in any::<u64>(), s2 in any::<u64>(), p in any::<u64>()) {
        let m = GedModel::new(ModelConfig::default());
        let (a, b) = (graph(s1), graph(s2));
        let mut perm: Vec<usize> = (0..a.n_vertices()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(p));
        prop_assert_eq!(m.predict(&a, &b), m.predict(&a.permuted(&perm), &b));
    }

    #[test]
    fn json_roundtrip_preserves_predictions(s1 in any::<u64>(), s2 in any::<u64>()) {
        let m = GedModel::new(ModelConfig { init_seed: 9, ..Default::default() });
        let back = GedModel::from_json(&m.to_json(None)).unwrap();
        prop_assert_eq!(back.version(), m.version());
        let (a, b) = (graph(s1), graph(s2));
        prop_assert_eq!(back.predict(&a, &b), m.predict(&a, &b));
    }
}

#[test]
fn gradients_agree_with_finite_differences() {
    for (seed, labels) in [(1, true), (2, false)] {
        let (err, name) = common::gradient_error(seed, labels);
        assert!(err < 1e-4, "seed {seed}: {name} relative error {err:e}");
    }
}

#[test]
fn cached_embedding_matches_fresh() {
    let m = GedModel::new(ModelConfig::default());
    let cache = EmbeddingCache::in_memory();
    let (a, b) = (graph(5), graph(6));
    let fresh = m.predict(&a, &b);
    for _ in 0..2 {
        let ea = cache.get_or_embed(&m, &a);
        let eb = cache.get_or_embed(&m, &b);
        assert_eq!(m.score(&ea, &eb).unwrap(), fresh);
    }
    assert_eq!(cache.misses(), 2);
    assert_eq!(cache.hits(), 2);
}

#[test]
fn modifying_params_changes_version() {
    let mut m = GedModel::new(ModelConfig::default());
    let v = m.version();
    m.params_mut().tensors_mut()[0][0] += 1.0;
    assert_ne!(m.version(), v);
}
