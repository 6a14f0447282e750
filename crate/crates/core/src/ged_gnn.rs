//! Learned graph-similarity predictor: relational GCN node embeddings,
//! attention pooling, a neural tensor network and a small tanh FC head, trained
//! with mean squared error by plain gradient descent.
//!
//! Gradients are hand-derived; `tests` checks them against central finite
//! differences.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, OnceLock};

use log::{info, warn};
use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::circuit_graph::{CircuitGraph, VertexId};
use crate::error::{Error, Result};
use crate::ged_exact::SimilarityBins;
use crate::labeled::{code, LabeledGraph, N_CATEGORIES};
use crate::symmetry::BlockScorer;

/// Layer widths of the GCN, input first.
pub const DIMS: [usize; 4] = [N_CATEGORIES, 64, 32, 16];
pub const EMBED_DIM: usize = 16;
pub const NTN_SLICES: usize = 8;
pub const FC_HIDDEN: usize = 8;
/// Relation types with edge labels on: gate, source, drain, other.
pub const N_RELATIONS: usize = 4;
pub const MODEL_FORMAT: &str = "hiersym-ged-model/1";
/// Environment variable naming a directory for persistent embeddings.
pub const CACHE_ENV: &str = "HIERSYM_CACHE_DIR";

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub use_edge_labels: bool,
    /// Average the score over both argument orders.
    pub symmetric: bool,
    pub bins: SimilarityBins,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { use_edge_labels: true, symmetric: true, bins: SimilarityBins::default(), init_seed: 0 }
    }
}

impl ModelConfig {
    pub fn relations(&self) -> usize {
        if self.use_edge_labels {
            N_RELATIONS
        } else {
            1
        }
    }
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// Per layer, shape `[relations, in, out]`.
    pub gcn: Vec<Array3<f64>>,
    pub w2: Array2<f64>,
    /// `[slices, d, d]`
    pub w3: Array3<f64>,
    /// `[slices, 2d]`
    pub v: Array2<f64>,
    pub b: Array1<f64>,
    /// `[hidden, slices]`
    pub fc1: Array2<f64>,
    pub fc1_b: Array1<f64>,
    pub fc2: Array1<f64>,
    pub fc2_b: Array1<f64>,
}

pub const TENSOR_NAMES: [&str; 11] = ["gcn0", "gcn1", "gcn2", "w2", "w3", "v", "b", "fc1", "fc1_b", "fc2", "fc2_b"];

impl Params {
    pub fn zeros(relations: usize) -> Self {
        Params {
            gcn: (0..3).map(|l| Array3::zeros((relations, DIMS[l], DIMS[l + 1]))).collect(),
            w2: Array2::zeros((EMBED_DIM, EMBED_DIM)),
            w3: Array3::zeros((NTN_SLICES, EMBED_DIM, EMBED_DIM)),
            v: Array2::zeros((NTN_SLICES, 2 * EMBED_DIM)),
            b: Array1::zeros(NTN_SLICES),
            fc1: Array2::zeros((FC_HIDDEN, NTN_SLICES)),
            fc1_b: Array1::zeros(FC_HIDDEN),
            fc2: Array1::zeros(FC_HIDDEN),
            fc2_b: Array1::zeros(1),
        }
    }

    /// Random weights, zero biases.
    pub fn init(relations: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::zeros(relations);
        fn uniform(rng: &mut ChaCha8Rng, t: &mut [f64], a: f64) {
            for x in t {
                *x = rng.gen_range(-a..a);
            }
        }
        let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        // The one-hot input layer is an embedding lookup: unit variance.
        // Later layers use He scaling for ReLU.
        for (l, w) in p.gcn.iter_mut().enumerate() {
            let a = if l == 0 { 3f64.sqrt() } else { (6.0 / (DIMS[l] * relations) as f64).sqrt() };
            uniform(&mut rng, w.as_slice_mut().unwrap(), a);
        }
        uniform(&mut rng, p.w2.as_slice_mut().unwrap(), glorot(EMBED_DIM, EMBED_DIM));
        uniform(&mut rng, p.v.as_slice_mut().unwrap(), glorot(2 * EMBED_DIM, NTN_SLICES));
        uniform(&mut rng, p.fc1.as_slice_mut().unwrap(), glorot(NTN_SLICES, FC_HIDDEN));
        uniform(&mut rng, p.fc2.as_slice_mut().unwrap(), glorot(FC_HIDDEN, 1));
        // Start the linear NTN term as a function of h_i - h_j, so the
        // slices see graph differences from the first step. W3 starts at
        // zero: pooled embeddings are unnormalized sums and the bilinear
        // term otherwise saturates the output before training begins.
        for k in 0..NTN_SLICES {
            for i in 0..EMBED_DIM {
                p.v[[k, EMBED_DIM + i]] = -p.v[[k, i]];
            }
        }
        p.b.fill(0.1);
        p
    }

    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let mut out: Vec<(&'static str, Vec<usize>, &[f64])> = Vec::new();
        for (l, w) in self.gcn.iter().enumerate() {
            out.push((TENSOR_NAMES[l], w.shape().to_vec(), w.as_slice().unwrap()));
        }
        out.push(("w2", self.w2.shape().to_vec(), self.w2.as_slice().unwrap()));
        out.push(("w3", self.w3.shape().to_vec(), self.w3.as_slice().unwrap()));
        out.push(("v", self.v.shape().to_vec(), self.v.as_slice().unwrap()));
        out.push(("b", self.b.shape().to_vec(), self.b.as_slice().unwrap()));
        out.push(("fc1", self.fc1.shape().to_vec(), self.fc1.as_slice().unwrap()));
        out.push(("fc1_b", self.fc1_b.shape().to_vec(), self.fc1_b.as_slice().unwrap()));
        out.push(("fc2", self.fc2.shape().to_vec(), self.fc2.as_slice().unwrap()));
        out.push(("fc2_b", self.fc2_b.shape().to_vec(), self.fc2_b.as_slice().unwrap()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let Params { gcn, w2, w3, v, b, fc1, fc1_b, fc2, fc2_b } = self;
        let mut out: Vec<&mut [f64]> = gcn.iter_mut().map(|w| w.as_slice_mut().unwrap()).collect();
        out.push(w2.as_slice_mut().unwrap());
        out.push(w3.as_slice_mut().unwrap());
        out.push(v.as_slice_mut().unwrap());
        out.push(b.as_slice_mut().unwrap());
        out.push(fc1.as_slice_mut().unwrap());
        out.push(fc1_b.as_slice_mut().unwrap());
        out.push(fc2.as_slice_mut().unwrap());
        out.push(fc2_b.as_slice_mut().unwrap());
        out
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Params) {
        for (dst, (_, _, s)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in dst.iter_mut().zip(s) {
                *x += alpha * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, d)| d.iter().all(|x| x.is_finite()))
    }
}

/// Precomputed one-hot categories and normalized propagation matrices.
/// Model input for one graph, with vertices in canonical order.
///
/// Vertices are sorted by their stable colour-refinement class. Vertices in
/// one class get bit-identical features at every layer, so every sum over
/// vertices sees the same sequence of values under any input permutation and
/// the embedding is exactly permutation invariant.
#[derive(Debug, Clone)]
pub struct GraphInput {
    pub cats: Vec<usize>,
    /// One `D^-1/2 (A_r + I) D^-1/2` per relation.
    pub props: Vec<Array2<f64>>,
    /// `order[k]` is the input vertex at canonical position `k`.
    pub order: Vec<usize>,
}

fn mix(h: u64, x: u64) -> u64 {
    // splitmix64 finalizer over a running combination.
    let mut z = (h ^ x.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(h.rotate_left(17));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Vertices sorted by stable colour-refinement class over (edge key, colour)
/// neighbourhoods. Ties keep input order; tied vertices are interchangeable.
fn canonical_order(g: &LabeledGraph, use_labels: bool) -> Vec<usize> {
    let n = g.n_vertices();
    let mut nbrs: Vec<Vec<(u64, usize)>> = vec![Vec::new(); n];
    for &(u, v, l) in &g.edges {
        let key = if use_labels { l } else { 0 };
        nbrs[u].push((key, v));
        nbrs[v].push((key, u));
    }
    let mut color: Vec<u64> = g.labels.iter().map(|&l| mix(0, l % N_CATEGORIES as u64)).collect();
    let classes = |c: &[u64]| c.iter().collect::<std::collections::BTreeSet<_>>().len();
    let mut n_classes = classes(&color);
    loop {
        let next: Vec<u64> = (0..n)
            .map(|v| {
                let mut sig: Vec<(u64, u64)> = nbrs[v].iter().map(|&(k, w)| (k, color[w])).collect();
                sig.sort_unstable();
                sig.iter().fold(mix(1, color[v]), |h, &(k, c)| mix(mix(h, k), c))
            })
            .collect();
        let m = classes(&next);
        color = next;
        if m == n_classes {
            break;
        }
        n_classes = m;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&v| color[v]);
    order
}

fn relations_of(label: u64, use_labels: bool) -> Vec<usize> {
    if !use_labels {
        return vec![0];
    }
    if (1..=7).contains(&label) {
        let mut r = Vec::new();
        for (bit, rel) in [(code::EDGE_G, 0), (code::EDGE_S, 1), (code::EDGE_D, 2)] {
            if label & bit != 0 {
                r.push(rel);
            }
        }
        r
    } else {
        vec![3]
    }
}

impl GraphInput {
    pub fn new(g: &LabeledGraph, use_labels: bool) -> Self {
        let n = g.n_vertices();
        let order = canonical_order(g, use_labels);
        let mut pos = vec![0; n];
        for (k, &v) in order.iter().enumerate() {
            pos[v] = k;
        }
        let rels = if use_labels { N_RELATIONS } else { 1 };
        let mut props: Vec<Array2<f64>> = (0..rels).map(|_| Array2::eye(n)).collect();
        for &(u, v, l) in &g.edges {
            let (u, v) = (pos[u], pos[v]);
            for r in relations_of(l, use_labels) {
                props[r][[u, v]] = 1.0;
                props[r][[v, u]] = 1.0;
            }
        }
        for p in &mut props {
            let d: Vec<f64> = p.sum_axis(Axis(1)).iter().map(|x| 1.0 / x.sqrt()).collect();
            for i in 0..n {
                for j in 0..n {
                    p[[i, j]] *= d[i] * d[j];
                }
            }
        }
        let cats = order.iter().map(|&v| (g.labels[v] % N_CATEGORIES as u64) as usize).collect();
        GraphInput { cats, props, order }
    }

    pub fn n(&self) -> usize {
        self.cats.len()
    }

    pub fn features(&self) -> Array2<f64> {
        let mut x = Array2::zeros((self.n(), N_CATEGORIES));
        for (i, &c) in self.cats.iter().enumerate() {
            x[[i, c]] = 1.0;
        }
        x
    }
}

/// Intermediate values of one graph embedding.
#[derive(Debug, Clone)]
pub struct EmbedTrace {
    /// Layer inputs `H^0..H^3`.
    pub hs: Vec<Array2<f64>>,
    /// Pre-activation per layer.
    pub pre: Vec<Array2<f64>>,
    /// `P_r H^l` per layer and relation (empty for the one-hot input layer).
    pub ph: Vec<Vec<Array2<f64>>>,
    pub mean: Array1<f64>,
    pub c: Array1<f64>,
    pub att: Array1<f64>,
    pub h: Array1<f64>,
}

/// GCN layer stack: node embeddings.
pub fn gcn_forward(p: &Params, x: &GraphInput) -> (Vec<Array2<f64>>, Vec<Array2<f64>>, Vec<Vec<Array2<f64>>>) {
    let mut hs = vec![x.features()];
    let mut pre = Vec::new();
    let mut phs = Vec::new();
    for (l, w) in p.gcn.iter().enumerate() {
        let h = hs.last().unwrap();
        let mut z = Array2::zeros((h.nrows(), w.shape()[2]));
        let mut ph: Vec<Array2<f64>> = Vec::new();
        if l == 0 {
            // One-hot input: X W is a row gather.
            for (r, pr) in x.props.iter().enumerate() {
                z += &pr.dot(&w.index_axis(Axis(0), r).select(Axis(0), &x.cats));
            }
        } else {
            ph = x.props.iter().map(|pr| pr.dot(h)).collect();
            for (r, m) in ph.iter().enumerate() {
                z += &m.dot(&w.index_axis(Axis(0), r));
            }
        }
        hs.push(z.mapv(|v| v.max(0.0)));
        pre.push(z);
        phs.push(ph);
    }
    (hs, pre, phs)
}

/// Global context `tanh(mean(X) W2)`.
pub fn graph_context(p: &Params, x3: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x3.mean_axis(Axis(0)).unwrap();
    let c = mean.dot(&p.w2).mapv(f64::tanh);
    (mean, c)
}

/// Attention pooling `sum_n sigmoid(x_n . c) x_n`.
pub fn graph_embed(x3: &Array2<f64>, c: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
    let att = x3.dot(c).mapv(sigmoid);
    let mut h = Array1::zeros(x3.ncols());
    for (n, row) in x3.rows().into_iter().enumerate() {
        h.scaled_add(att[n], &row);
    }
    (h, att)
}

pub fn embed_trace(p: &Params, x: &GraphInput) -> EmbedTrace {
    let (hs, pre, ph) = gcn_forward(p, x);
    let x3 = hs.last().unwrap();
    let (mean, c) = graph_context(p, x3);
    let (h, att) = graph_embed(x3, &c);
    EmbedTrace { hs, pre, ph, mean, c, att, h }
}

fn embed_backward(p: &Params, x: &GraphInput, tr: &EmbedTrace, dh: &Array1<f64>, grad: &mut Params) {
    let x3 = tr.hs.last().unwrap();
    let n = x3.nrows();
    let mut dx = Array2::zeros(x3.raw_dim());
    let mut dc = Array1::zeros(tr.c.len());
    for i in 0..n {
        let row = x3.row(i);
        let a = tr.att[i];
        dx.row_mut(i).scaled_add(a, dh);
        let ds = dh.dot(&row) * a * (1.0 - a);
        dx.row_mut(i).scaled_add(ds, &tr.c);
        dc.scaled_add(ds, &row);
    }
    let du = &dc * &tr.c.mapv(|c| 1.0 - c * c);
    let outer = tr.mean.view().insert_axis(Axis(1)).dot(&du.view().insert_axis(Axis(0)));
    grad.w2 += &outer;
    let dmean = p.w2.dot(&du) / n as f64;
    for mut row in dx.rows_mut() {
        row += &dmean;
    }
    let mut dh_l = dx;
    for l in (0..p.gcn.len()).rev() {
        let dz = &dh_l * &tr.pre[l].mapv(|z| if z > 0.0 { 1.0 } else { 0.0 });
        let w = &p.gcn[l];
        let mut dprev = Array2::zeros(tr.hs[l].raw_dim());
        for (r, pr) in x.props.iter().enumerate() {
            let mut slot = grad.gcn[l].index_axis_mut(Axis(0), r);
            if l == 0 {
                let gp = pr.t().dot(&dz);
                for (n, &c) in x.cats.iter().enumerate() {
                    slot.row_mut(c).scaled_add(1.0, &gp.row(n));
                }
            } else {
                slot += &tr.ph[l][r].t().dot(&dz);
                dprev += &pr.dot(&dz.dot(&w.index_axis(Axis(0), r).t()));
            }
        }
        dh_l = dprev;
    }
}

/// Intermediate values of one directional pair score.
#[derive(Debug, Clone)]
pub struct ScoreTrace {
    pub g_pre: Array1<f64>,
    pub z_pre: Array1<f64>,
    pub s: f64,
}

/// NTN slice scores `relu(hi' W3[k] hj + V[k].[hi;hj] + b[k])`.
pub fn ntn_score(p: &Params, hi: &Array1<f64>, hj: &Array1<f64>) -> Array1<f64> {
    ntn_pre(p, hi, hj).mapv(|v| v.max(0.0))
}

fn ntn_pre(p: &Params, hi: &Array1<f64>, hj: &Array1<f64>) -> Array1<f64> {
    let d = hi.len();
    let mut g = p.b.clone();
    for k in 0..p.w3.shape()[0] {
        g[k] += hi.dot(&p.w3.index_axis(Axis(0), k).dot(hj));
        g[k] += p.v.slice(s![k, ..d]).dot(hi) + p.v.slice(s![k, d..]).dot(hj);
    }
    g
}

fn score_directed(p: &Params, hi: &Array1<f64>, hj: &Array1<f64>) -> ScoreTrace {
    let g_pre = ntn_pre(p, hi, hj);
    let g = g_pre.mapv(|v| v.max(0.0));
    let z_pre = p.fc1.dot(&g) + &p.fc1_b;
    let z = z_pre.mapv(f64::tanh);
    let s = sigmoid(p.fc2.dot(&z) + p.fc2_b[0]);
    ScoreTrace { g_pre, z_pre, s }
}

/// Backward through one directed score; returns `(dhi, dhj)`.
fn score_backward(
    p: &Params,
    hi: &Array1<f64>,
    hj: &Array1<f64>,
    tr: &ScoreTrace,
    ds: f64,
    grad: &mut Params,
) -> (Array1<f64>, Array1<f64>) {
    let d = hi.len();
    let dsp = ds * tr.s * (1.0 - tr.s);
    let z = tr.z_pre.mapv(f64::tanh);
    grad.fc2.scaled_add(dsp, &z);
    grad.fc2_b[0] += dsp;
    let dz = (&p.fc2 * dsp) * z.mapv(|t| 1.0 - t * t);
    let g = tr.g_pre.mapv(|v| v.max(0.0));
    grad.fc1 += &dz.view().insert_axis(Axis(1)).dot(&g.view().insert_axis(Axis(0)));
    grad.fc1_b += &dz;
    let dg = p.fc1.t().dot(&dz) * tr.g_pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let mut dhi = Array1::zeros(d);
    let mut dhj = Array1::zeros(d);
    let hh = hi.view().insert_axis(Axis(1)).dot(&hj.view().insert_axis(Axis(0)));
    for k in 0..p.w3.shape()[0] {
        let gk = dg[k];
        if gk == 0.0 {
            continue;
        }
        let w = p.w3.index_axis(Axis(0), k);
        grad.w3.index_axis_mut(Axis(0), k).scaled_add(gk, &hh);
        dhi.scaled_add(gk, &w.dot(hj));
        dhj.scaled_add(gk, &w.t().dot(hi));
        grad.v.slice_mut(s![k, ..d]).scaled_add(gk, hi);
        grad.v.slice_mut(s![k, d..]).scaled_add(gk, hj);
        dhi.scaled_add(gk, &p.v.slice(s![k, ..d]));
        dhj.scaled_add(gk, &p.v.slice(s![k, d..]));
    }
    grad.b += &dg;
    (dhi, dhj)
}

/// Training or evaluation sample: two graphs and their target similarity.
#[derive(Debug, Clone)]
pub struct Sample {
    pub a: GraphInput,
    pub b: GraphInput,
    pub gs: f64,
}

#[derive(Debug, Clone)]
pub struct GedModel {
    pub config: ModelConfig,
    params: Params,
    /// Memoized [`GedModel::version`]; cleared by [`GedModel::params_mut`].
    version: OnceLock<String>,
}

impl PartialEq for GedModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEmbedding {
    pub h: Vec<f64>,
    pub graph: String,
    pub model_version: String,
}

#[derive(Serialize, Deserialize)]
struct TensorDump {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: String,
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hyper: Option<TrainConfig>,
    tensors: Vec<TensorDump>,
}

impl GedModel {
    pub fn new(config: ModelConfig) -> Self {
        let params = Params::init(config.relations(), config.init_seed);
        GedModel { config, params, version: OnceLock::new() }
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        self.version = OnceLock::new();
        &mut self.params
    }

    pub fn input(&self, g: &LabeledGraph) -> GraphInput {
        GraphInput::new(g, self.config.use_edge_labels)
    }

    /// Hash of configuration and every parameter bit.
    pub fn version(&self) -> String {
        self.version.get_or_init(|| self.compute_version()).clone()
    }

    fn compute_version(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).unwrap());
        for (name, shape, data) in self.params.tensors() {
            h.update(name.as_bytes());
            for s in shape {
                h.update((s as u64).to_le_bytes());
            }
            for x in data {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..12])
    }

    pub fn embed_input(&self, x: &GraphInput) -> Array1<f64> {
        embed_trace(&self.params, x).h
    }

    pub fn embed(&self, g: &LabeledGraph) -> GraphEmbedding {
        GraphEmbedding {
            h: self.embed_input(&self.input(g)).to_vec(),
            graph: g.content_hash(),
            model_version: self.version(),
        }
    }

    pub fn predict_embeddings(&self, hi: &Array1<f64>, hj: &Array1<f64>) -> f64 {
        let s = score_directed(&self.params, hi, hj).s;
        if self.config.symmetric {
            0.5 * (s + score_directed(&self.params, hj, hi).s)
        } else {
            s
        }
    }

    /// Score two cached embeddings; both must come from this model.
    pub fn score(&self, a: &GraphEmbedding, b: &GraphEmbedding) -> Result<f64> {
        let v = self.version();
        for e in [a, b] {
            if e.model_version != v {
                return Err(Error::ModelVersion { expected: v, found: e.model_version.clone() });
            }
        }
        Ok(self.predict_embeddings(&Array1::from(a.h.clone()), &Array1::from(b.h.clone())))
    }

    pub fn predict(&self, a: &LabeledGraph, b: &LabeledGraph) -> f64 {
        let (ha, hb) = (self.embed_input(&self.input(a)), self.embed_input(&self.input(b)));
        self.predict_embeddings(&ha, &hb)
    }

    /// Squared error of one sample and its gradient, accumulated into `grad`.
    fn sample_grad(&self, smp: &Sample, grad: &mut Params) -> f64 {
        let p = &self.params;
        let ta = embed_trace(p, &smp.a);
        let tb = embed_trace(p, &smp.b);
        let ab = score_directed(p, &ta.h, &tb.h);
        let (ps, ba) = if self.config.symmetric {
            let ba = score_directed(p, &tb.h, &ta.h);
            (0.5 * (ab.s + ba.s), Some(ba))
        } else {
            (ab.s, None)
        };
        let err = ps - smp.gs;
        let dps = 2.0 * err;
        let w = if ba.is_some() { 0.5 } else { 1.0 };
        let (mut dha, mut dhb) = score_backward(p, &ta.h, &tb.h, &ab, dps * w, grad);
        if let Some(ba) = &ba {
            let (db, da) = score_backward(p, &tb.h, &ta.h, ba, dps * w, grad);
            dha += &da;
            dhb += &db;
        }
        embed_backward(p, &smp.a, &ta, &dha, grad);
        embed_backward(p, &smp.b, &tb, &dhb, grad);
        err * err
    }

    /// Mean squared error over `samples` and its gradient. Samples are
    /// reduced in fixed-size chunks, so the sum order does not depend on the
    /// thread count.
    pub fn loss_and_grad(&self, samples: &[Sample]) -> (f64, Params) {
        const CHUNK: usize = 16;
        let rel = self.config.relations();
        let parts: Vec<(f64, Params)> = samples
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = Params::zeros(rel);
                let l: f64 = chunk.iter().map(|smp| self.sample_grad(smp, &mut g)).sum();
                (l, g)
            })
            .collect();
        let n = samples.len().max(1) as f64;
        let mut grad = Params::zeros(rel);
        let mut loss = 0.0;
        for (l, g) in &parts {
            loss += l;
            grad.axpy(1.0 / n, g);
        }
        (loss / n, grad)
    }

    pub fn loss(&self, samples: &[Sample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let errs: Vec<f64> = samples
            .par_iter()
            .map(|s| {
                let e = self.predict_embeddings(&self.embed_input(&s.a), &self.embed_input(&s.b)) - s.gs;
                e * e
            })
            .collect();
        errs.iter().sum::<f64>() / samples.len() as f64
    }

    fn to_file(&self, hyper: Option<TrainConfig>) -> ModelFile {
        ModelFile {
            format: MODEL_FORMAT.into(),
            version: self.version(),
            config: self.config.clone(),
            hyper,
            tensors: self
                .params
                .tensors()
                .into_iter()
                .map(|(n, s, d)| TensorDump { name: n.into(), shape: s, data: d.to_vec() })
                .collect(),
        }
    }

    pub fn to_json(&self, hyper: Option<&TrainConfig>) -> String {
        serde_json::to_string(&self.to_file(hyper.cloned())).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<GedModel> {
        let f: ModelFile = serde_json::from_str(text)?;
        if f.format != MODEL_FORMAT {
            return Err(Error::Model(format!("unknown format `{}`", f.format)));
        }
        f.config.bins.validate()?;
        let mut m = GedModel::new(f.config);
        let expected: Vec<(String, Vec<usize>)> =
            m.params.tensors().into_iter().map(|(n, s, _)| (n.to_string(), s)).collect();
        if f.tensors.len() != expected.len() {
            return Err(Error::Model(format!("expected {} tensors, found {}", expected.len(), f.tensors.len())));
        }
        for ((dst, t), (name, shape)) in m.params_mut().tensors_mut().into_iter().zip(&f.tensors).zip(&expected) {
            if &t.name != name || &t.shape != shape || t.data.len() != dst.len() {
                return Err(Error::Model(format!("tensor `{}` {:?} does not match `{name}` {shape:?}", t.name, t.shape)));
            }
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Model(format!("tensor `{name}` has non-finite entries")));
            }
            dst.copy_from_slice(&t.data);
        }
        let v = m.version();
        if v != f.version {
            return Err(Error::ModelVersion { expected: f.version, found: v });
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path, hyper: Option<&TrainConfig>) -> Result<()> {
        std::fs::write(path, self.to_json(hyper))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<GedModel> {
        GedModel::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-3, epochs: 300 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
}

/// Full-batch gradient descent. Each log row holds the losses before that
/// epoch's update; a final row records the trained model.
pub fn train(model: &mut GedModel, train: &[Sample], test: &[Sample], cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    if train.len() < 2 {
        return Err(Error::TooFewPairs(train.len()));
    }
    let mut log = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..cfg.epochs {
        let (loss, grad) = model.loss_and_grad(train);
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, detail: format!("train loss {loss}") });
        }
        let test_loss = model.loss(test);
        log.push(EpochLog { epoch, train_loss: loss, test_loss });
        if epoch % 25 == 0 {
            info!("epoch {epoch}: train {loss:.6} test {test_loss:.6}");
        }
        model.params_mut().axpy(-cfg.lr, &grad);
    }
    let final_train = model.loss(train);
    if !final_train.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: cfg.epochs, detail: format!("train loss {final_train}") });
    }
    log.push(EpochLog { epoch: cfg.epochs, train_loss: final_train, test_loss: model.loss(test) });
    Ok(log)
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,test_loss\n");
    for r in log {
        s.push_str(&format!("{},{:.10},{:.10}\n", r.epoch, r.train_loss, r.test_loss));
    }
    s
}

/// Embeddings keyed by (graph hash, model version), in memory and optionally
/// on disk.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    dir: Option<PathBuf>,
    mem: Mutex<HashMap<(String, String), GraphEmbedding>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        EmbeddingCache::default()
    }

    pub fn with_dir(dir: PathBuf) -> Self {
        EmbeddingCache { dir: Some(dir), ..Default::default() }
    }

    /// Persistent when the cache-dir environment variable is set.
    pub fn from_env() -> Self {
        match std::env::var_os(CACHE_ENV) {
            Some(d) => EmbeddingCache::with_dir(PathBuf::from(d)),
            None => EmbeddingCache::in_memory(),
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    fn path(&self, graph: &str, version: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{version}-{graph}.json")))
    }

    pub fn get_or_embed(&self, model: &GedModel, g: &LabeledGraph) -> GraphEmbedding {
        let key = (g.content_hash(), model.version());
        if let Some(e) = self.mem.lock().unwrap().get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return e.clone();
        }
        if let Some(p) = self.path(&key.0, &key.1) {
            if p.exists() {
                let read = std::fs::read_to_string(&p)
                    .ok()
                    .and_then(|t| serde_json::from_str::<GraphEmbedding>(&t).ok())
                    .filter(|e| e.model_version == key.1 && e.graph == key.0 && e.h.len() == EMBED_DIM);
                match read {
                    Some(e) => {
                        self.hits.fetch_add(1, Ordering::Relaxed);
                        self.mem.lock().unwrap().insert(key, e.clone());
                        return e;
                    }
                    None => warn!("corrupt embedding cache entry {}; recomputing", p.display()),
                }
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let e = model.embed(g);
        if let Some(p) = self.path(&key.0, &key.1) {
            let write = std::fs::create_dir_all(p.parent().unwrap())
                .and_then(|_| std::fs::write(&p, serde_json::to_string(&e).unwrap()));
            if let Err(err) = write {
                warn!("cannot write embedding cache {}: {err}", p.display());
            }
        }
        self.mem.lock().unwrap().insert(key, e.clone());
        e
    }
}

/// Block similarity from the learned model, over structural labels.
pub struct GnnScorer {
    pub model: GedModel,
    pub cache: EmbeddingCache,
}

impl BlockScorer for GnnScorer {
    fn similarity(&self, ga: &CircuitGraph, a: &[VertexId], gb: &CircuitGraph, b: &[VertexId]) -> Result<f64> {
        let (la, _) = ga.to_labeled(a, false);
        let (lb, _) = gb.to_labeled(b, false);
        let ea = self.cache.get_or_embed(&self.model, &la);
        let eb = self.cache.get_or_embed(&self.model, &lb);
        self.model.score(&ea, &eb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;

    fn path3() -> LabeledGraph {
        let mut g = LabeledGraph::new(vec![code::NMOS, code::NET, code::RES]);
        g.set_edge(0, 1, code::EDGE_D);
        g.set_edge(1, 2, code::EDGE_NEUTRAL);
        g
    }

    #[test]
    fn propagation_matches_hand_computation() {
        // Path a-b-c with self loops: degrees 2, 3, 2.
        let x = GraphInput::new(&path3(), false);
        let p = &x.props[0];
        let (s2, s3) = (1.0 / 2f64.sqrt(), 1.0 / 3f64.sqrt());
        let want = [[0.5, s2 * s3, 0.0], [s2 * s3, 1.0 / 3.0, s2 * s3], [0.0, s2 * s3, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((p[[i, j]] - want[x.order[i]][x.order[j]]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn embedding_is_exactly_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for labels in [true, false] {
            let m = GedModel::new(ModelConfig { use_edge_labels: labels, ..Default::default() });
            for _ in 0..20 {
                let g = random_graph(&mut rng, 6, 5);
                let h = m.embed(&g).h;
                for _ in 0..5 {
                    let mut perm: Vec<usize> = (0..g.n_vertices()).collect();
                    perm.shuffle(&mut rng);
                    assert_eq!(h, m.embed(&g.permuted(&perm)).h);
                }
            }
        }
    }

    #[test]
    fn single_vertex_layer_is_projection() {
        let g = LabeledGraph::new(vec![code::RES]);
        let x = GraphInput::new(&g, false);
        let mut p = Params::zeros(1);
        for l in 0..3 {
            for i in 0..DIMS[l + 1] {
                p.gcn[l][[0, i, i]] = 1.0;
            }
        }
        let (hs, _, _) = gcn_forward(&p, &x);
        let h3 = hs.last().unwrap();
        // Category RES = 4 lands in column 4 after identity projections.
        assert_eq!(h3[[0, code::RES as usize]], 1.0);
        assert_eq!(h3.sum(), 1.0);
    }

    #[test]
    fn zero_features_give_zero_output() {
        let x = GraphInput::new(&path3(), true);
        let p = Params::zeros(N_RELATIONS);
        let (hs, _, _) = gcn_forward(&p, &x);
        assert!(hs.last().unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn context_and_attention() {
        let p = Params::zeros(1);
        let x3 = Array2::from_shape_fn((3, EMBED_DIM), |(i, j)| (i + j) as f64 * 0.1);
        let (_, c) = graph_context(&p, &x3);
        assert!(c.iter().all(|v| *v == 0.0));
        let (h, _) = graph_embed(&x3, &c);
        let half = x3.sum_axis(Axis(0)) * 0.5;
        assert!((h - half).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn ntn_hand_case() {
        let mut p = Params::zeros(1);
        let hi = Array1::from_shape_fn(EMBED_DIM, |i| if i < 2 { (i + 1) as f64 } else { 0.0 });
        let hj = Array1::from_shape_fn(EMBED_DIM, |i| if i < 2 { (2 - i) as f64 } else { 0.0 });
        // Slice 0: hi' I hj = 1*2 + 2*1 = 4; slice 1: V picks hj[0] = 2, bias -3.
        p.w3[[0, 0, 0]] = 1.0;
        p.w3[[0, 1, 1]] = 1.0;
        p.v[[1, EMBED_DIM]] = 1.0;
        p.b[1] = -3.0;
        p.b[2] = -1.0;
        let g = ntn_score(&p, &hi, &hj);
        assert_eq!(g[0], 4.0);
        assert_eq!(g[1], 0.0);
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn untrained_scores_are_probabilities_and_symmetric() {
        let m = GedModel::new(ModelConfig::default());
        let mut g2 = path3();
        g2.set_edge(0, 1, code::EDGE_G);
        let s = m.predict(&path3(), &g2);
        assert!((0.0..=1.0).contains(&s));
        assert_eq!(s, m.predict(&g2, &path3()));
    }

    #[test]
    fn model_file_round_trip() {
        let m = GedModel::new(ModelConfig { init_seed: 3, ..Default::default() });
        let back = GedModel::from_json(&m.to_json(None)).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.version(), m.version());
        let tampered = m.to_json(None).replacen("\"data\":[", "\"data\":[1.5,", 1);
        assert!(GedModel::from_json(&tampered).is_err());
    }

    #[test]
    fn version_mismatch_rejected() {
        let a = GedModel::new(ModelConfig { init_seed: 1, ..Default::default() });
        let b = GedModel::new(ModelConfig { init_seed: 2, ..Default::default() });
        let e = a.embed(&path3());
        assert!(matches!(b.score(&e, &e), Err(Error::ModelVersion { .. })));
    }

    #[test]
    fn cache_hits_and_invalidation() {
        let m = GedModel::new(ModelConfig::default());
        let c = EmbeddingCache::in_memory();
        c.get_or_embed(&m, &path3());
        c.get_or_embed(&m, &path3());
        assert_eq!((c.hits(), c.misses()), (1, 1));
        let m2 = GedModel::new(ModelConfig { init_seed: 9, ..Default::default() });
        c.get_or_embed(&m2, &path3());
        assert_eq!(c.misses(), 2);
    }

    #[test]
    fn persistent_cache_recovers_from_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let m = GedModel::new(ModelConfig::default());
        let e = EmbeddingCache::with_dir(dir.path().to_path_buf()).get_or_embed(&m, &path3());
        for f in std::fs::read_dir(dir.path()).unwrap() {
            std::fs::write(f.unwrap().path(), "{not json").unwrap();
        }
        let c = EmbeddingCache::with_dir(dir.path().to_path_buf());
        assert_eq!(c.get_or_embed(&m, &path3()), e);
        assert_eq!(c.misses(), 1);
        let c = EmbeddingCache::with_dir(dir.path().to_path_buf());
        c.get_or_embed(&m, &path3());
        assert_eq!(c.hits(), 1);
    }

    #[test]
    fn overfits_single_pair() {
        let mut m = GedModel::new(ModelConfig::default());
        let mut g2 = path3();
        g2.set_edge(0, 1, code::EDGE_G);
        let s = Sample { a: m.input(&path3()), b: m.input(&g2), gs: 0.25 };
        let samples = vec![s.clone(), s];
        train(&mut m, &samples, &[], &TrainConfig { lr: 0.5, epochs: 400 }).unwrap();
        assert!(m.loss(&samples) < 1e-3, "{}", m.loss(&samples));
    }

    fn random_graph(rng: &mut ChaCha8Rng, n_elem: usize, n_net: usize) -> LabeledGraph {
        let kinds = [code::NMOS, code::PMOS, code::RES, code::CAP];
        let mut labels: Vec<u64> = (0..n_elem).map(|_| kinds[rng.gen_range(0..4)]).collect();
        labels.extend((0..n_net).map(|_| if rng.gen_bool(0.2) { code::SUPPLY_NET } else { code::NET }));
        let mut g = LabeledGraph::new(labels);
        for e in 0..n_elem {
            for _ in 0..2 {
                let n = n_elem + rng.gen_range(0..n_net);
                let l = if g.labels[e] <= code::PMOS { 1 << rng.gen_range(0..3) } else { code::EDGE_NEUTRAL };
                g.set_edge(e, n, l);
            }
        }
        g
    }

    /// Per-tensor relative error `|a - n| / (|a| + |n|)` over sampled entries.
    fn check_gradients(seed: u64, use_edge_labels: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = GedModel::new(ModelConfig { use_edge_labels, init_seed: seed, ..Default::default() });
        let samples: Vec<Sample> = (0..2)
            .map(|_| {
                let a = random_graph(&mut rng, 3, 3);
                let b = random_graph(&mut rng, 4, 3);
                Sample { a: m.input(&a), b: m.input(&b), gs: rng.gen_range(0.0..1.0) }
            })
            .collect();
        let (_, grad) = m.loss_and_grad(&samples);
        let analytic: Vec<Vec<f64>> = grad.tensors().into_iter().map(|(_, _, d)| d.to_vec()).collect();
        let eps = 1e-6;
        for (t, name) in TENSOR_NAMES.iter().enumerate() {
            let len = analytic[t].len();
            // Rows of categories absent from the inputs have zero gradient
            // exactly; prefer entries that carry signal.
            let mut idx: Vec<usize> = (0..len).filter(|&i| analytic[t][i] != 0.0).collect();
            if idx.len() > 40 {
                idx = (0..40).map(|_| idx[rng.gen_range(0..idx.len())]).collect();
            }
            idx.extend((0..5).map(|_| rng.gen_range(0..len)));
            let (mut num_diff, mut den) = (0.0, 0.0);
            for i in idx {
                let mut plus = m.clone();
                plus.params_mut().tensors_mut()[t][i] += eps;
                let mut minus = m.clone();
                minus.params_mut().tensors_mut()[t][i] -= eps;
                let fd = (plus.loss(&samples) - minus.loss(&samples)) / (2.0 * eps);
                num_diff += (fd - analytic[t][i]).abs();
                den += fd.abs() + analytic[t][i].abs();
            }
            let rel = if den == 0.0 { 0.0 } else { num_diff / den };
            assert!(rel < 1e-4, "seed {seed} tensor {name}: relative error {rel:e}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            check_gradients(seed, true);
        }
        check_gradients(7, false);
    }
}
