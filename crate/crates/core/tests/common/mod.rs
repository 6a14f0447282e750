#![allow(dead_code)]

use hiersym::labeled::{code, LabeledGraph};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Brute-force GED: try every partial injective map of `g1` into `g2`.
/// Independent of the solver: no bounds, no ordering heuristics.
pub fn ged_exhaustive(g1: &LabeledGraph, g2: &LabeledGraph) -> usize {
    let (m1, m2) = (g1.label_matrix(), g2.label_matrix());
    let mut map = vec![None; g1.n_vertices()];
    let mut used = vec![false; g2.n_vertices()];
    let mut best = usize::MAX;
    enumerate(g1, g2, &m1, &m2, 0, &mut map, &mut used, &mut best);
    best
}

#[allow(clippy::too_many_arguments)]
fn enumerate(
    g1: &LabeledGraph,
    g2: &LabeledGraph,
    m1: &[Vec<Option<u64>>],
    m2: &[Vec<Option<u64>>],
    k: usize,
    map: &mut Vec<Option<usize>>,
    used: &mut Vec<bool>,
    best: &mut usize,
) {
    if k == g1.n_vertices() {
        *best = (*best).min(cost(g1, g2, m1, m2, map));
        return;
    }
    map[k] = None;
    enumerate(g1, g2, m1, m2, k + 1, map, used, best);
    for t in 0..g2.n_vertices() {
        if !used[t] {
            used[t] = true;
            map[k] = Some(t);
            enumerate(g1, g2, m1, m2, k + 1, map, used, best);
            used[t] = false;
        }
    }
    map[k] = None;
}

/// Unit cost of the edit path induced by a complete vertex map.
pub fn cost(
    g1: &LabeledGraph,
    g2: &LabeledGraph,
    m1: &[Vec<Option<u64>>],
    m2: &[Vec<Option<u64>>],
    map: &[Option<usize>],
) -> usize {
    let mut c = 0;
    let mut hit = vec![false; g2.n_vertices()];
    for (i, t) in map.iter().enumerate() {
        match t {
            Some(t) => {
                hit[*t] = true;
                c += usize::from(g1.labels[i] != g2.labels[*t]);
            }
            None => c += 1,
        }
    }
    c += hit.iter().filter(|h| !**h).count();
    // Edges of g1, judged against their images.
    for &(u, v, l) in &g1.edges {
        c += match (map[u], map[v]) {
            (Some(a), Some(b)) => match m2[a][b] {
                Some(l2) => usize::from(l2 != l),
                None => 1,
            },
            _ => 1,
        };
    }
    // Edges of g2 with no preimage edge.
    let mut inv = vec![None; g2.n_vertices()];
    for (i, t) in map.iter().enumerate() {
        if let Some(t) = t {
            inv[*t] = Some(i);
        }
    }
    for &(a, b, _) in &g2.edges {
        match (inv[a], inv[b]) {
            (Some(u), Some(v)) if m1[u][v].is_some() => {}
            _ => c += 1,
        }
    }
    c
}

/// Random bipartite element/net graph with `ne` elements and `nn` nets.
pub fn random_bipartite(rng: &mut ChaCha8Rng, ne: usize, nn: usize) -> LabeledGraph {
    let kinds = [code::NMOS, code::PMOS, code::RES, code::CAP];
    let mut labels: Vec<u64> = (0..ne).map(|_| kinds[rng.gen_range(0..kinds.len())]).collect();
    labels.extend((0..nn).map(|_| if rng.gen_bool(0.25) { code::SUPPLY_NET } else { code::NET }));
    let mut g = LabeledGraph::new(labels);
    if nn == 0 {
        return g;
    }
    for e in 0..ne {
        let mos = g.labels[e] == code::NMOS || g.labels[e] == code::PMOS;
        let edge_labels: &[u64] = if mos {
            &[code::EDGE_G, code::EDGE_S, code::EDGE_D, code::EDGE_S | code::EDGE_D]
        } else {
            &[code::EDGE_NEUTRAL]
        };
        for _ in 0..rng.gen_range(1..=2) {
            let n = ne + rng.gen_range(0..nn);
            g.set_edge(e, n, edge_labels[rng.gen_range(0..edge_labels.len())]);
        }
    }
    g.canonicalize_edges();
    g
}

pub fn fixture(name: &str) -> String {
    std::fs::read_to_string(format!("{}/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

/// Worst per-tensor relative error `sum|a - n| / sum(|a| + |n|)` between the
/// analytic gradient and central differences, over sampled entries.
pub fn gradient_error(seed: u64, use_edge_labels: bool) -> (f64, &'static str) {
    use hiersym::ged_gnn::{GedModel, ModelConfig, Sample, TENSOR_NAMES};
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = GedModel::new(ModelConfig { use_edge_labels, init_seed: seed, ..Default::default() });
    let samples: Vec<Sample> = (0..3)
        .map(|_| {
            let (na, nb) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
            let a = random_bipartite(&mut rng, na, 3);
            let b = random_bipartite(&mut rng, nb, 3);
            Sample { a: m.input(&a), b: m.input(&b), gs: rng.gen_range(0.0..1.0) }
        })
        .collect();
    let (_, grad) = m.loss_and_grad(&samples);
    let analytic: Vec<Vec<f64>> = grad.tensors().into_iter().map(|(_, _, d)| d.to_vec()).collect();
    let eps = 1e-6;
    let mut worst = (0.0, TENSOR_NAMES[0]);
    for (t, name) in TENSOR_NAMES.iter().enumerate() {
        let len = analytic[t].len();
        // Embedding rows of absent categories have exactly zero gradient;
        // sample mostly entries that carry signal, plus a few at random.
        let live: Vec<usize> = (0..len).filter(|&i| analytic[t][i] != 0.0).collect();
        let mut idx: Vec<usize> = if live.len() > 30 {
            (0..30).map(|_| live[rng.gen_range(0..live.len())]).collect()
        } else {
            live
        };
        idx.extend((0..5).map(|_| rng.gen_range(0..len)));
        let (mut diff, mut den) = (0.0, 0.0);
        for i in idx {
            let mut plus = m.clone();
            plus.params_mut().tensors_mut()[t][i] += eps;
            let mut minus = m.clone();
            minus.params_mut().tensors_mut()[t][i] -= eps;
            let fd = (plus.loss(&samples) - minus.loss(&samples)) / (2.0 * eps);
            diff += (fd - analytic[t][i]).abs();
            den += fd.abs() + analytic[t][i].abs();
        }
        let rel = if den == 0.0 { 0.0 } else { diff / den };
        if rel > worst.0 {
            worst = (rel, name);
        }
    }
    worst
}
