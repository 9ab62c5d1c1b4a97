//! Suspected object graph: top-K region selection on the averaged activation
//! map, keyword-aware node features, stochastic edge construction, one round
//! of message passing, and the residual write-back into the pyramid.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoders::{TextFeatures, STRIDES};
use crate::error::{invalid, Result, SogError};
use crate::fusion::{film_modulate, FiLMParams, MultiModalState};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the second factor `α'` of every edge weight is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeVariant {
    /// Keep each score with probability `p`, otherwise substitute another.
    Erc,
    Original,
    Reverse,
    Average,
    /// Independent standard-normal draws.
    Random,
}

impl EdgeVariant {
    pub const ALL: [EdgeVariant; 5] =
        [EdgeVariant::Erc, EdgeVariant::Original, EdgeVariant::Reverse, EdgeVariant::Average, EdgeVariant::Random];

    pub fn name(self) -> &'static str {
        match self {
            EdgeVariant::Erc => "erc",
            EdgeVariant::Original => "original",
            EdgeVariant::Reverse => "reverse",
            EdgeVariant::Average => "average",
            EdgeVariant::Random => "random",
        }
    }
}

impl fmt::Display for EdgeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EdgeVariant {
    type Err = SogError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid!("unknown edge strategy '{s}' (valid: erc, original, reverse, average, random)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeStrategy {
    pub variant: EdgeVariant,
    /// Keep probability for [`EdgeVariant::Erc`].
    pub p: f64,
}

impl Default for EdgeStrategy {
    fn default() -> Self {
        Self { variant: EdgeVariant::Erc, p: 0.5 }
    }
}

impl EdgeStrategy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(invalid!("keep probability {} outside [0, 1]", self.p));
        }
        Ok(())
    }
}

/// Conditioning used when building node features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStrategy {
    /// Attention-weighted word summary per dilation rate.
    Knr,
    /// No modulation; nodes are the mean context feature.
    None,
    Sentence,
    WordAverage,
}

impl NodeStrategy {
    pub const ALL: [NodeStrategy; 4] =
        [NodeStrategy::Knr, NodeStrategy::None, NodeStrategy::Sentence, NodeStrategy::WordAverage];

    pub fn name(self) -> &'static str {
        match self {
            NodeStrategy::Knr => "knr",
            NodeStrategy::None => "none",
            NodeStrategy::Sentence => "sentence",
            NodeStrategy::WordAverage => "word_average",
        }
    }
}

impl fmt::Display for NodeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NodeStrategy {
    type Err = SogError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid!("unknown node strategy '{s}' (valid: knr, none, sentence, word_average)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    /// Edge randomness disabled: `α'` is always `α`.
    Eval,
}

/// The K most activated cells of the level-4 grid, strongest first.
#[derive(Clone, Debug, PartialEq)]
pub struct SuspectedRegionSet<F> {
    pub cells: Vec<(usize, usize)>,
    pub alpha: Vec<F>,
    pub grid: (usize, usize),
}

impl<F: Scalar> SuspectedRegionSet<F> {
    pub fn k(&self) -> usize {
        self.cells.len()
    }

    pub fn flat(&self) -> Vec<usize> {
        self.cells.iter().map(|&(i, j)| i * self.grid.1 + j).collect()
    }

    /// Region features `r_k` read from the averaged map, `[d_m, K]`.
    pub fn features(&self, mean_map: &Tensor<F>) -> Tensor<F> {
        let d = mean_map.shape()[0];
        let k = self.k();
        let mut out = Vec::with_capacity(d * k);
        for c in 0..d {
            out.extend(self.cells.iter().map(|&(i, j)| mean_map.at3(c, i, j)));
        }
        Tensor::new(&[d, k], out)
    }
}

/// Top-K cells of a `[1, h, w]` (or `[h, w]`) activation map; ties go to the
/// smaller row-major index.
pub fn select_regions<F: Scalar>(activation: &Tensor<F>, k: usize) -> Result<SuspectedRegionSet<F>> {
    let s = activation.shape();
    let (h, w) = match s.len() {
        2 => (s[0], s[1]),
        3 if s[0] == 1 => (s[1], s[2]),
        _ => return Err(invalid!("activation map must be [1, h, w], got {s:?}")),
    };
    if k == 0 || k > h * w {
        return Err(invalid!("cannot select {k} regions from a {h}x{w} grid"));
    }
    let v = activation.data();
    let mut order: Vec<usize> = (0..h * w).collect();
    order.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order.truncate(k);
    Ok(SuspectedRegionSet {
        cells: order.iter().map(|&i| (i / w, i % w)).collect(),
        alpha: order.iter().map(|&i| v[i]).collect(),
        grid: (h, w),
    })
}

/// Context features `r_k^s` (`[d_m, K]`): a bias-free 3x3 kernel with
/// dilation `s` applied at each selected cell, zero outside the grid.
pub fn context_aggregate<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    weight: ParamId,
    mean_map: Var,
    regions: &SuspectedRegionSet<F>,
    dilation: usize,
) -> Result<Var> {
    if dilation == 0 {
        return Err(invalid!("dilation rate must be at least 1"));
    }
    let w = g.param(store, weight);
    Ok(g.sparse_conv(mean_map, w, &regions.cells, dilation))
}

/// Word importance `δ^s` (`[N]`) and keyword summary `q^s` (`[d_t]`) for one
/// dilation rate.
#[derive(Clone, Copy, Debug)]
pub struct KeywordAttention {
    pub delta: Var,
    pub summary: Var,
}

/// Softmax over words of `r̄^s · w_n`, with `r̄^s` the mean context feature
/// (optionally mapped to the text width first).
pub fn keyword_attention<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    projection: Option<(ParamId, ParamId)>,
    context: Var,
    words: Var,
) -> Result<KeywordAttention> {
    let ws = g.shape(words).to_vec();
    if ws.len() != 2 || ws[0] == 0 {
        return Err(invalid!("keyword attention needs at least one unmasked word, got {ws:?}"));
    }
    let mut pooled = g.mean_cols(context);
    if let Some((pw, pb)) = projection {
        let pw = g.param(store, pw);
        let pb = g.param(store, pb);
        pooled = g.linear(pooled, pw, Some(pb));
    }
    let d = g.shape(pooled)[0];
    if d != ws[1] {
        return Err(invalid!("region width {d} does not match word width {}", ws[1]));
    }
    let col = g.reshape(pooled, &[d, 1]);
    let logits = g.matmul(words, col, false, false);
    let logits = g.reshape(logits, &[ws[0]]);
    let delta = g.softmax(logits);
    let dcol = g.reshape(delta, &[ws[0], 1]);
    let summary = g.matmul(words, dcol, true, false);
    let summary = g.reshape(summary, &[ws[1]]);
    Ok(KeywordAttention { delta, summary })
}

/// Mean over words of `[N, d]` word features.
fn word_average<F: Scalar>(g: &mut Graph<F>, words: Var) -> Var {
    let s = g.shape(words).to_vec();
    let w = g.constant(Tensor::full(&[s[0], 1], F::one() / F::of(s[0] as f64)));
    let m = g.matmul(words, w, true, false);
    g.reshape(m, &[s[1]])
}

/// Node features `v_k` (`[d_m, K]`): the mean over dilation rates of the
/// modulated context features.
pub fn build_nodes<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    film: &FiLMParams,
    contexts: &[Var],
    attention: &[KeywordAttention],
    strategy: NodeStrategy,
    text: &TextFeatures,
) -> Result<Var> {
    if contexts.is_empty() {
        return Err(invalid!("no dilation rates"));
    }
    let modulated = match strategy {
        NodeStrategy::None => contexts.to_vec(),
        NodeStrategy::Knr => {
            if attention.len() != contexts.len() {
                return Err(invalid!("one keyword attention per dilation rate is required"));
            }
            contexts
                .iter()
                .zip(attention)
                .map(|(&r, a)| film_modulate(g, store, film, r, a.summary))
                .collect::<Result<Vec<_>>>()?
        }
        NodeStrategy::Sentence | NodeStrategy::WordAverage => {
            let cond = if strategy == NodeStrategy::Sentence { text.sentence } else { word_average(g, text.words) };
            contexts.iter().map(|&r| film_modulate(g, store, film, r, cond)).collect::<Result<Vec<_>>>()?
        }
    };
    Ok(g.mean_n(&modulated))
}

/// Second edge factor. Substitutions are recorded as indices into `α` so the
/// gradient keeps flowing through the chosen scores.
#[derive(Clone, Debug, PartialEq)]
pub enum AlphaPrime<F> {
    Indices(Vec<usize>),
    Average,
    Values(Vec<F>),
}

impl<F: Scalar> AlphaPrime<F> {
    pub fn apply(&self, alpha: &[F]) -> Vec<F> {
        match self {
            AlphaPrime::Indices(idx) => idx.iter().map(|&i| alpha[i]).collect(),
            AlphaPrime::Average => {
                let mean = alpha.iter().copied().sum::<F>() / F::of(alpha.len() as f64);
                vec![mean; alpha.len()]
            }
            AlphaPrime::Values(v) => v.clone(),
        }
    }

    pub fn to_var(&self, g: &mut Graph<F>, alpha: Var) -> Var {
        match self {
            AlphaPrime::Indices(idx) => g.gather(alpha, idx),
            AlphaPrime::Average => {
                let k = g.value(alpha).len();
                let s = g.sum(alpha);
                let m = g.scale(s, 1.0 / k as f64);
                g.gather(m, &vec![0; k])
            }
            AlphaPrime::Values(v) => g.constant(Tensor::new(&[v.len()], v.clone())),
        }
    }
}

/// Draw `α'` for one forward pass. Evaluation mode always yields `α` itself.
pub fn erc_transform<F: Scalar, R: Rng + ?Sized>(
    alpha: &[F],
    strategy: &EdgeStrategy,
    mode: ForwardMode,
    rng: &mut R,
) -> Result<AlphaPrime<F>> {
    strategy.validate()?;
    let k = alpha.len();
    if mode == ForwardMode::Eval {
        return Ok(AlphaPrime::Indices((0..k).collect()));
    }
    match strategy.variant {
        EdgeVariant::Original => Ok(AlphaPrime::Indices((0..k).collect())),
        EdgeVariant::Reverse => {
            if k < 2 {
                return Err(invalid!("reverse edge strategy needs K >= 2, got {k}"));
            }
            Ok(AlphaPrime::Indices((0..k).rev().collect()))
        }
        EdgeVariant::Erc => {
            if k < 2 {
                return Err(invalid!("random connection needs K >= 2, got {k}"));
            }
            let idx = (0..k)
                .map(|j| {
                    if rng.gen::<f64>() < strategy.p {
                        j
                    } else {
                        let r = rng.gen_range(0..k - 1);
                        if r >= j {
                            r + 1
                        } else {
                            r
                        }
                    }
                })
                .collect();
            Ok(AlphaPrime::Indices(idx))
        }
        EdgeVariant::Average => Ok(AlphaPrime::Average),
        EdgeVariant::Random => {
            Ok(AlphaPrime::Values((0..k).map(|_| F::of(rng.sample::<f64, _>(StandardNormal))).collect()))
        }
    }
}

/// `e_ij = α_i · α'_j`.
pub fn build_edges<F: Scalar>(g: &mut Graph<F>, alpha: Var, alpha_prime: Var) -> Result<Var> {
    if g.shape(alpha) != g.shape(alpha_prime) {
        return Err(invalid!("alpha {:?} and alpha' {:?} differ in length", g.shape(alpha), g.shape(alpha_prime)));
    }
    Ok(g.outer(alpha, alpha_prime))
}

/// `ṽ_k = Σ_j e_jk v_j`; with nodes as columns this is `V · E`.
pub fn message_pass<F: Scalar>(g: &mut Graph<F>, nodes: Var, edges: Var) -> Result<Var> {
    let k = g.shape(nodes)[1];
    if g.shape(edges) != [k, k] {
        return Err(invalid!("edge matrix {:?} does not match {k} nodes", g.shape(edges)));
    }
    Ok(g.matmul(nodes, edges, false, false))
}

/// Cell of pyramid level `level` (0, 1, 2 for strides 8, 16, 32) whose area
/// contains the center of level-4 cell `(i, j)`.
pub fn corresponding_cell((i, j): (usize, usize), level: usize, (h, w): (usize, usize)) -> (usize, usize) {
    let center = |v: usize| (v as f64 + 0.5) * STRIDES[1] as f64;
    let s = STRIDES[level] as f64;
    let ci = ((center(i) / s).floor() as usize).min(h - 1);
    let cj = ((center(j) / s).floor() as usize).min(w - 1);
    (ci, cj)
}

/// Project updated nodes and add them residually at the selected cells of
/// every level.
pub fn fuse_nodes_back<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    (proj_w, proj_b): (ParamId, ParamId),
    maps: [Var; 3],
    regions: &SuspectedRegionSet<F>,
    updated: Var,
) -> Result<[Var; 3]> {
    let d = g.shape(updated)[0];
    if g.shape(updated)[1] != regions.k() {
        return Err(invalid!("{} updated nodes for {} regions", g.shape(updated)[1], regions.k()));
    }
    let pw = g.param(store, proj_w);
    let pb = g.param(store, proj_b);
    let projected = g.matmul(pw, updated, false, false);
    let ones = g.constant(Tensor::full(&[d], F::one()));
    let residual = g.film(projected, ones, pb);
    let mut out = maps;
    for (level, m) in out.iter_mut().enumerate() {
        let s = g.shape(*m).to_vec();
        let cells: Vec<usize> = regions
            .cells
            .iter()
            .map(|&c| {
                let (ci, cj) = corresponding_cell(c, level, (s[1], s[2]));
                ci * s[2] + cj
            })
            .collect();
        *m = g.scatter_cells(*m, residual, &cells);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SogParams {
    /// One `[d_m, d_m, 3, 3]` kernel per dilation rate.
    pub context: Vec<ParamId>,
    pub node_film: FiLMParams,
    /// Maps pooled region features to the text width when they differ.
    pub attention_proj: Option<(ParamId, ParamId)>,
    pub out_proj: (ParamId, ParamId),
}

impl SogParams {
    pub fn init<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        dilations: &[usize],
        d_m: usize,
        d_t: usize,
    ) -> Self {
        let std = (1.0 / (9 * d_m) as f64).sqrt();
        let context = dilations
            .iter()
            .map(|s| store.normal(&format!("sog.context.d{s}"), &[d_m, d_m, 3, 3], std, rng))
            .collect();
        let node_film = FiLMParams::init(store, rng, "sog.node_film", d_m, d_t);
        let attention_proj = (d_m != d_t).then(|| {
            (
                store.normal("sog.attention_proj.w", &[d_t, d_m], 1.0 / (d_m as f64).sqrt(), rng),
                store.constant("sog.attention_proj.b", &[d_t], 0.0),
            )
        });
        let out_proj = (
            store.normal("sog.out_proj.w", &[d_m, d_m], 0.1 / (d_m as f64).sqrt(), rng),
            store.constant("sog.out_proj.b", &[d_m], 0.0),
        );
        Self { context, node_film, attention_proj, out_proj }
    }
}

#[derive(Clone, Debug)]
pub struct SogSettings {
    pub k: usize,
    pub dilations: Vec<usize>,
    pub edge: EdgeStrategy,
    pub node: NodeStrategy,
}

/// Everything one graph pass produced.
#[derive(Clone, Debug)]
pub struct SogOutput<F> {
    pub regions: SuspectedRegionSet<F>,
    pub alpha: Var,
    pub alpha_prime: Var,
    pub attention: Vec<KeywordAttention>,
    pub nodes: Var,
    pub edges: Var,
    pub updated: Var,
    pub maps: [Var; 3],
}

#[allow(clippy::too_many_arguments)]
pub fn run_sog<F: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    params: &SogParams,
    settings: &SogSettings,
    state: &MultiModalState,
    text: &TextFeatures,
    mode: ForwardMode,
    rng: &mut R,
) -> Result<SogOutput<F>> {
    if settings.dilations.len() != params.context.len() {
        return Err(invalid!(
            "{} dilation rates configured but {} context kernels present",
            settings.dilations.len(),
            params.context.len()
        ));
    }
    let regions = select_regions(g.value(state.mean_activation), settings.k)?;
    let flat = regions.flat();
    let alpha = g.gather(state.mean_activation, &flat);

    let mut contexts = Vec::with_capacity(settings.dilations.len());
    for (&s, &w) in settings.dilations.iter().zip(&params.context) {
        contexts.push(context_aggregate(g, store, w, state.mean_map, &regions, s)?);
    }
    let attention = contexts
        .iter()
        .map(|&r| keyword_attention(g, store, params.attention_proj, r, text.words))
        .collect::<Result<Vec<_>>>()?;
    let nodes = build_nodes(g, store, &params.node_film, &contexts, &attention, settings.node, text)?;

    let draw = erc_transform(&regions.alpha, &settings.edge, mode, rng)?;
    let alpha_prime = draw.to_var(g, alpha);
    let edges = build_edges(g, alpha, alpha_prime)?;
    let updated = message_pass(g, nodes, edges)?;
    let maps = fuse_nodes_back(g, store, params.out_proj, state.maps, &regions, updated)?;
    Ok(SogOutput { regions, alpha, alpha_prime, attention, nodes, edges, updated, maps })
}

/// Per-pass record of the graph for inspection tools.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SogDiagnostics {
    pub grid: (usize, usize),
    pub cells: Vec<(usize, usize)>,
    pub alpha: Vec<f64>,
    pub alpha_prime: Vec<f64>,
    pub dilations: Vec<usize>,
    /// One row of word importances per dilation rate.
    pub delta: Vec<Vec<f64>>,
    /// Row-major `K x K` edge weights.
    pub edges: Vec<Vec<f64>>,
}

impl SogDiagnostics {
    pub fn from_output<F: Scalar>(g: &Graph<F>, out: &SogOutput<F>, dilations: &[usize]) -> Self {
        let to64 = |v: Var| g.value(v).data().iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        let k = out.regions.k();
        let e = to64(out.edges);
        Self {
            grid: out.regions.grid,
            cells: out.regions.cells.clone(),
            alpha: out.regions.alpha.iter().map(|x| x.as_f64()).collect(),
            alpha_prime: to64(out.alpha_prime),
            dilations: dilations.to_vec(),
            delta: out.attention.iter().map(|a| to64(a.delta)).collect(),
            edges: e.chunks(k).map(<[f64]>::to_vec).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn selection_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = rand_tensor(&[1, 5, 7], &mut rng);
        let r = select_regions(&c, 6).unwrap();
        let mut all: Vec<(f64, usize)> = c.data().iter().copied().zip(0..).collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let expect: Vec<usize> = all[..6].iter().map(|p| p.1).collect();
        assert_eq!(r.flat(), expect);
        assert!(r.alpha.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn selecting_every_cell_sorts_the_map() {
        let c = Tensor::<f64>::from_f64(&[1, 2, 2], &[0.1, 0.4, 0.3, 0.2]);
        let r = select_regions(&c, 4).unwrap();
        assert_eq!(r.alpha, vec![0.4, 0.3, 0.2, 0.1]);
        assert_eq!(r.cells, vec![(0, 1), (1, 0), (1, 1), (0, 0)]);
    }

    #[test]
    fn uniform_map_breaks_ties_row_major() {
        let c = Tensor::<f64>::zeros(&[1, 3, 3]);
        let r = select_regions(&c, 4).unwrap();
        assert_eq!(r.alpha, vec![0.0; 4]);
        assert_eq!(r.flat(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn too_many_regions_is_an_error() {
        let c = Tensor::<f64>::zeros(&[1, 2, 2]);
        assert!(select_regions(&c, 5).is_err());
    }

    fn one_region(cells: Vec<(usize, usize)>, grid: (usize, usize)) -> SuspectedRegionSet<f64> {
        let k = cells.len();
        SuspectedRegionSet { cells, alpha: vec![1.0; k], grid }
    }

    #[test]
    fn center_tap_filter_returns_region_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 3;
        let mut store = ParamStore::<f64>::new();
        let mut w = vec![0.0; d * d * 9];
        for c in 0..d {
            w[(c * d + c) * 9 + 4] = 1.0;
        }
        let id = store.insert("w", Tensor::new(&[d, d, 3, 3], w));
        let mt = rand_tensor(&[d, 6, 6], &mut rng);
        let regions = one_region(vec![(0, 0), (3, 4)], (6, 6));
        let mut g = Graph::new();
        let m = g.constant(mt.clone());
        let r = context_aggregate(&mut g, &store, id, m, &regions, 6).unwrap();
        assert_eq!(g.value(r), &regions.features(&mt));
    }

    #[test]
    fn zero_field_gives_zero_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let id = store.normal("w", &[2, 2, 3, 3], 1.0, &mut rng);
        let regions = one_region(vec![(1, 1)], (4, 4));
        let mut g = Graph::new();
        let m = g.constant(Tensor::zeros(&[2, 4, 4]));
        let r = context_aggregate(&mut g, &store, id, m, &regions, 2).unwrap();
        assert!(g.value(r).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corner_node_matches_nine_tap_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 2;
        let mut store = ParamStore::<f64>::new();
        let id = store.normal("w", &[d, d, 3, 3], 1.0, &mut rng);
        let mt = rand_tensor(&[d, 6, 6], &mut rng);
        let regions = one_region(vec![(5, 0)], (6, 6));
        let mut g = Graph::new();
        let m = g.constant(mt.clone());
        let r = context_aggregate(&mut g, &store, id, m, &regions, 2).unwrap();
        let w = store.get(id);
        for o in 0..d {
            let mut acc = 0.0;
            for c in 0..d {
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let (y, x) = (5 + 2 * dy, 2 * dx);
                        if (0..6).contains(&y) && (0..6).contains(&x) {
                            let wi = ((o * d + c) * 3 + (dy + 1) as usize) * 3 + (dx + 1) as usize;
                            acc += w.data()[wi] * mt.at3(c, y as usize, x as usize);
                        }
                    }
                }
            }
            assert!((g.value(r).at2(o, 0) - acc).abs() < 1e-6);
        }
    }

    #[test]
    fn single_word_attention_is_certain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new();
        let ctx = g.constant(rand_tensor(&[3, 4], &mut rng));
        let wt = rand_tensor(&[1, 3], &mut rng);
        let words = g.constant(wt.clone());
        let a = keyword_attention(&mut g, &store, None, ctx, words).unwrap();
        assert_eq!(g.value(a.delta).data(), &[1.0]);
        assert_eq!(g.value(a.summary).data(), wt.data());
    }

    #[test]
    fn two_word_softmax_hand_computed() {
        // pooled context (1, 0); word logits 0 and ln 3
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new();
        let ctx = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 1.0, 0.0, 0.0]));
        let words = g.constant(Tensor::from_f64(&[2, 2], &[0.0, 5.0, 3f64.ln(), -2.0]));
        let a = keyword_attention(&mut g, &store, None, ctx, words).unwrap();
        let d = g.value(a.delta).data();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn summary_is_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = ParamStore::<f64>::new();
        for _ in 0..20 {
            let mut g = Graph::new();
            let ctx = g.constant(rand_tensor(&[4, 6], &mut rng));
            let wt = rand_tensor(&[5, 4], &mut rng);
            let words = g.constant(wt.clone());
            let a = keyword_attention(&mut g, &store, None, ctx, words).unwrap();
            let delta = g.value(a.delta).data().to_vec();
            assert!((delta.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(delta.iter().all(|&v| v >= 0.0));
            for c in 0..4 {
                let q = g.value(a.summary).data()[c];
                let expect: f64 = (0..5).map(|n| delta[n] * wt.at2(n, c)).sum();
                assert!((q - expect).abs() < 1e-12);
                let lo = (0..5).map(|n| wt.at2(n, c)).fold(f64::INFINITY, f64::min);
                let hi = (0..5).map(|n| wt.at2(n, c)).fold(f64::NEG_INFINITY, f64::max);
                assert!(q >= lo - 1e-12 && q <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn attention_with_no_words_is_rejected() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new();
        let ctx = g.constant(Tensor::zeros(&[2, 2]));
        let words = g.constant(Tensor::zeros(&[0, 2]));
        assert!(keyword_attention(&mut g, &store, None, ctx, words).is_err());
    }

    #[test]
    fn node_strategies() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let film = FiLMParams::init(&mut store, &mut rng, "f", 3, 3);
        let mut g = Graph::new();
        let r1 = g.constant(rand_tensor(&[3, 2], &mut rng));
        let r2 = g.constant(rand_tensor(&[3, 2], &mut rng));
        let text = TextFeatures { words: g.constant(rand_tensor(&[4, 3], &mut rng)), sentence: g.constant(rand_tensor(&[3], &mut rng)) };
        let att: Vec<KeywordAttention> = [r1, r2]
            .iter()
            .map(|&r| keyword_attention(&mut g, &store, None, r, text.words).unwrap())
            .collect();
        let none = build_nodes(&mut g, &store, &film, &[r1, r2], &att, NodeStrategy::None, &text).unwrap();
        let mut mean = g.value(r1).clone();
        mean.add_assign(g.value(r2));
        mean.scale(0.5);
        assert!(g.value(none).max_abs_diff(&mean) < 1e-15);

        // identity FiLM and a single rate
        let mut id_store = store.clone();
        id_store.get_mut(film.gamma_w).data_mut().fill(0.0);
        id_store.get_mut(film.beta_w).data_mut().fill(0.0);
        let mut g2 = Graph::new();
        let r = g2.constant(g.value(r1).clone());
        let words = g2.constant(g.value(text.words).clone());
        let sentence = g2.constant(g.value(text.sentence).clone());
        let text2 = TextFeatures { words, sentence };
        let a = keyword_attention(&mut g2, &id_store, None, r, words).unwrap();
        let v = build_nodes(&mut g2, &id_store, &film, &[r], &[a], NodeStrategy::Knr, &text2).unwrap();
        assert_eq!(g2.value(v), g.value(r1));

        let knr = build_nodes(&mut g, &store, &film, &[r1, r2], &att, NodeStrategy::Knr, &text).unwrap();
        let sent = build_nodes(&mut g, &store, &film, &[r1, r2], &att, NodeStrategy::Sentence, &text).unwrap();
        let avg = build_nodes(&mut g, &store, &film, &[r1, r2], &att, NodeStrategy::WordAverage, &text).unwrap();
        assert!(g.value(knr).max_abs_diff(g.value(sent)) > 1e-6);
        assert!(g.value(knr).max_abs_diff(g.value(avg)) > 1e-6);
    }

    #[test]
    fn erc_degenerate_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let alpha = [0.9, 0.5, 0.3];
        let keep = EdgeStrategy { variant: EdgeVariant::Erc, p: 1.0 };
        for _ in 0..50 {
            let d = erc_transform(&alpha, &keep, ForwardMode::Train, &mut rng).unwrap();
            assert_eq!(d.apply(&alpha), alpha.to_vec());
        }
        let swap = EdgeStrategy { variant: EdgeVariant::Erc, p: 0.0 };
        for _ in 0..50 {
            let d = erc_transform(&[0.9, 0.4], &swap, ForwardMode::Train, &mut rng).unwrap();
            assert_eq!(d.apply(&[0.9, 0.4]), vec![0.4, 0.9]);
        }
    }

    #[test]
    fn erc_alternatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let alpha = [4.0, 2.0, 1.0, 1.0];
        let run = |v: EdgeVariant, rng: &mut ChaCha8Rng| {
            erc_transform(&alpha, &EdgeStrategy { variant: v, p: 0.5 }, ForwardMode::Train, rng).unwrap().apply(&alpha)
        };
        assert_eq!(run(EdgeVariant::Original, &mut rng), alpha.to_vec());
        assert_eq!(run(EdgeVariant::Reverse, &mut rng), vec![1.0, 1.0, 2.0, 4.0]);
        assert_eq!(run(EdgeVariant::Average, &mut rng), vec![2.0; 4]);
        let r = run(EdgeVariant::Random, &mut rng);
        assert_eq!(r.len(), 4);
        assert!(r.iter().all(|v: &f64| v.is_finite()) && r != alpha.to_vec());
        for v in EdgeVariant::ALL {
            let d = erc_transform(&alpha, &EdgeStrategy { variant: v, p: 0.5 }, ForwardMode::Eval, &mut rng).unwrap();
            assert_eq!(d.apply(&alpha), alpha.to_vec());
        }
    }

    #[test]
    fn erc_needs_two_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for v in [EdgeVariant::Erc, EdgeVariant::Reverse] {
            assert!(erc_transform(&[1.0], &EdgeStrategy { variant: v, p: 0.5 }, ForwardMode::Train, &mut rng).is_err());
        }
        let bad = EdgeStrategy { variant: EdgeVariant::Erc, p: 1.5 };
        assert!(erc_transform(&[1.0, 2.0], &bad, ForwardMode::Train, &mut rng).is_err());
    }

    #[test]
    fn edges_are_outer_products() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[2], &[2.0, 3.0]));
        let b = g.constant(Tensor::from_f64(&[2], &[5.0, 7.0]));
        let e = build_edges(&mut g, a, b).unwrap();
        assert_eq!(g.value(e).data(), &[10.0, 14.0, 15.0, 21.0]);
        let ones = g.constant(Tensor::full(&[3], 1.0));
        let e = build_edges(&mut g, ones, ones).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 1.0));
        let short = g.constant(Tensor::full(&[2], 1.0));
        assert!(build_edges(&mut g, ones, short).is_err());
    }

    #[test]
    fn message_passing_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut g = Graph::<f64>::new();
        let vt = rand_tensor(&[5, 4], &mut rng);
        let v = g.constant(vt.clone());
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 5] = 1.0;
        }
        let e = g.constant(eye);
        let out = message_pass(&mut g, v, e).unwrap();
        assert_eq!(g.value(out), &vt);
        let z = g.constant(Tensor::zeros(&[4, 4]));
        let out = message_pass(&mut g, v, z).unwrap();
        assert!(g.value(out).data().iter().all(|&x| x == 0.0));
        let et = rand_tensor(&[4, 4], &mut rng);
        let e = g.constant(et.clone());
        let out = message_pass(&mut g, v, e).unwrap();
        for k in 0..4 {
            for c in 0..5 {
                let expect: f64 = (0..4).map(|j| et.at2(j, k) * vt.at2(c, j)).sum();
                assert!((g.value(out).at2(c, k) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn corresponding_cells_follow_floor_convention() {
        assert_eq!(corresponding_cell((0, 0), 0, (8, 8)), (1, 1));
        assert_eq!(corresponding_cell((3, 2), 0, (8, 8)), (7, 5));
        assert_eq!(corresponding_cell((3, 2), 1, (4, 4)), (3, 2));
        assert_eq!(corresponding_cell((3, 2), 2, (2, 2)), (1, 1));
        assert_eq!(corresponding_cell((1, 0), 2, (2, 2)), (0, 0));
    }

    fn fuse_setup(proj_identity: bool, seed: u64) -> (ParamStore<f64>, (ParamId, ParamId), [Tensor<f64>; 3]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let d = 3;
        let w = if proj_identity {
            let mut t = Tensor::zeros(&[d, d]);
            for i in 0..d {
                t.data_mut()[i * (d + 1)] = 1.0;
            }
            store.insert("pw", t)
        } else {
            store.normal("pw", &[d, d], 1.0, &mut rng)
        };
        let b = store.constant("pb", &[d], 0.0);
        let maps = [rand_tensor(&[d, 8, 8], &mut rng), rand_tensor(&[d, 4, 4], &mut rng), rand_tensor(&[d, 2, 2], &mut rng)];
        (store, (w, b), maps)
    }

    #[test]
    fn null_residual_leaves_maps_untouched() {
        let (store, proj, maps) = fuse_setup(false, 11);
        let regions = one_region(vec![(1, 2), (3, 3)], (4, 4));
        let mut g = Graph::new();
        let vars = maps.clone().map(|m| g.constant(m));
        let upd = g.constant(Tensor::zeros(&[3, 2]));
        let out = fuse_nodes_back(&mut g, &store, proj, vars, &regions, upd).unwrap();
        for l in 0..3 {
            assert_eq!(g.value(out[l]), &maps[l]);
        }
    }

    #[test]
    fn single_node_changes_one_cell_per_level() {
        let (store, proj, maps) = fuse_setup(true, 12);
        let regions = one_region(vec![(2, 1)], (4, 4));
        let mut g = Graph::new();
        let vars = maps.clone().map(|m| g.constant(m));
        let vt = Tensor::from_f64(&[3, 1], &[0.5, -1.0, 2.0]);
        let upd = g.constant(vt.clone());
        let out = fuse_nodes_back(&mut g, &store, proj, vars, &regions, upd).unwrap();
        for l in 0..3 {
            let diff: Vec<(usize, f64)> = g
                .value(out[l])
                .data()
                .iter()
                .zip(maps[l].data())
                .enumerate()
                .filter(|(_, (a, b))| a != b)
                .map(|(i, (a, b))| (i, a - b))
                .collect();
            assert_eq!(diff.len(), 3, "level {l}");
            for (c, (_, d)) in diff.iter().enumerate() {
                assert!((d - vt.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residual_is_confined_to_selected_cells() {
        let (store, proj, maps) = fuse_setup(false, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let regions = one_region(vec![(0, 0), (2, 3), (3, 1)], (4, 4));
        let mut g = Graph::new();
        let vars = maps.clone().map(|m| g.constant(m));
        let upd = g.constant(rand_tensor(&[3, 3], &mut rng));
        let out = fuse_nodes_back(&mut g, &store, proj, vars, &regions, upd).unwrap();
        for l in 0..3 {
            let s = maps[l].shape();
            let allowed: Vec<(usize, usize)> =
                regions.cells.iter().map(|&c| corresponding_cell(c, l, (s[1], s[2]))).collect();
            for c in 0..3 {
                for i in 0..s[1] {
                    for j in 0..s[2] {
                        let changed = g.value(out[l]).at3(c, i, j) != maps[l].at3(c, i, j);
                        if changed {
                            assert!(allowed.contains(&(i, j)));
                        }
                    }
                }
            }
        }
    }
}
