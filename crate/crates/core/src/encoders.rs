//! Text and image encoders producing word/sentence features and a
//! three-level visual pyramid with coordinate channels.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pyramid levels, finest first; strides 8/16/32 pixels per cell.
pub const LEVELS: [usize; 3] = [3, 4, 5];
pub const STRIDES: [usize; 3] = [8, 16, 32];
pub const COORD_CHANNELS: usize = 8;
pub const TRUNK_STAGES: usize = 5;
pub const LEAKY_SLOPE: f64 = 0.1;
/// Width of the per-pixel stem that is pooled onto every level.
pub const STEM_CHANNELS: usize = 8;

/// Vocabulary indices of a referring expression with a padding mask
/// (`true` marks padding).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    pad_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        let mask = vec![false; tokens.len()];
        Self::with_mask(tokens, mask, vocab_size)
    }

    pub fn with_mask(tokens: Vec<usize>, pad_mask: Vec<bool>, vocab_size: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(invalid!("empty token sequence"));
        }
        if pad_mask.len() != tokens.len() {
            return Err(invalid!("pad mask length {} != token count {}", pad_mask.len(), tokens.len()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(invalid!("token index {t} outside vocabulary of size {vocab_size}"));
        }
        if pad_mask.iter().all(|&p| p) {
            return Err(invalid!("every position is padding"));
        }
        Ok(Self { tokens, pad_mask })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn pad_mask(&self) -> &[bool] {
        &self.pad_mask
    }

    /// Tokens at unmasked positions, in order.
    pub fn valid_tokens(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .zip(&self.pad_mask)
            .filter(|(_, &p)| !p)
            .map(|(&t, _)| t)
            .collect()
    }
}

/// Word features `[N, d_t]` (one row per unmasked token) and the sentence
/// feature `[d_t]`.
#[derive(Clone, Copy, Debug)]
pub struct TextFeatures {
    pub words: Var,
    pub sentence: Var,
}

#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct TextEncoderParams {
    pub embedding: ParamId,
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub word_w: ParamId,
    pub word_b: ParamId,
    pub sent_w: ParamId,
    pub sent_b: ParamId,
    pub hidden: usize,
    pub vocab_size: usize,
}

impl TextEncoderParams {
    pub fn init<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        vocab_size: usize,
        embed_dim: usize,
        hidden: usize,
        d_t: usize,
    ) -> Self {
        let embedding = store.normal("text.embedding", &[vocab_size, embed_dim], 0.5, rng);
        let mut lstm = |dir: &str, rng: &mut R| {
            let bound = 1.0 / (hidden as f64).sqrt();
            let w_ih = store.uniform(&format!("text.{dir}.w_ih"), &[4 * hidden, embed_dim], bound, rng);
            let w_hh = store.uniform(&format!("text.{dir}.w_hh"), &[4 * hidden, hidden], bound, rng);
            // forget-gate bias starts at 1
            let mut b = vec![0.0; 4 * hidden];
            b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
            let bias = store.insert(format!("text.{dir}.bias"), Tensor::from_f64(&[4 * hidden], &b));
            LstmParams { w_ih, w_hh, bias }
        };
        let forward = lstm("fwd", rng);
        let backward = lstm("bwd", rng);
        let word_w = store.he("text.word_proj.w", &[d_t, 2 * hidden], 2 * hidden, rng);
        let word_b = store.constant("text.word_proj.b", &[d_t], 0.0);
        let sent_w = store.he("text.sent_proj.w", &[d_t, 2 * hidden], 2 * hidden, rng);
        let sent_b = store.constant("text.sent_proj.b", &[d_t], 0.0);
        Self { embedding, forward, backward, word_w, word_b, sent_w, sent_b, hidden, vocab_size }
    }
}

fn lstm_pass<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    p: &LstmParams,
    inputs: Var,
    order: &[usize],
    hidden: usize,
) -> Vec<Var> {
    let w_ih = g.param(store, p.w_ih);
    let w_hh = g.param(store, p.w_hh);
    let bias = g.param(store, p.bias);
    let pre = g.linear(inputs, w_ih, Some(bias));
    let mut h = g.constant(Tensor::zeros(&[hidden]));
    let mut c = g.constant(Tensor::zeros(&[hidden]));
    let mut out = vec![h; order.len()];
    for &t in order {
        let x_t = g.slice(pre, t * 4 * hidden, &[4 * hidden]);
        let rec = g.linear(h, w_hh, None);
        let gates = g.add(x_t, rec);
        let i_raw = g.slice(gates, 0, &[hidden]);
        let f_raw = g.slice(gates, hidden, &[hidden]);
        let c_raw = g.slice(gates, 2 * hidden, &[hidden]);
        let o_raw = g.slice(gates, 3 * hidden, &[hidden]);
        let i = g.sigmoid(i_raw);
        let f = g.sigmoid(f_raw);
        let cand = g.tanh(c_raw);
        let o = g.sigmoid(o_raw);
        let keep = g.mul(f, c);
        let write = g.mul(i, cand);
        c = g.add(keep, write);
        let squashed = g.tanh(c);
        h = g.mul(o, squashed);
        out[t] = h;
    }
    out
}

/// Embedding followed by a bidirectional LSTM over the unmasked tokens.
/// Word features project the per-position concatenated states; the sentence
/// feature projects the two final states.
pub fn encode_text<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    p: &TextEncoderParams,
    tokens: &TokenSequence,
) -> Result<TextFeatures> {
    let ids = tokens.valid_tokens();
    if ids.is_empty() {
        return Err(invalid!("no unmasked tokens"));
    }
    if let Some(&t) = ids.iter().find(|&&t| t >= p.vocab_size) {
        return Err(invalid!("token index {t} outside vocabulary of size {}", p.vocab_size));
    }
    let n = ids.len();
    let table = g.param(store, p.embedding);
    let e = store.get(p.embedding).shape()[1];
    let flat: Vec<usize> = ids.iter().flat_map(|&t| (t * e)..(t + 1) * e).collect();
    let emb = g.gather(table, &flat);
    let emb = g.reshape(emb, &[n, e]);

    let h = p.hidden;
    let fwd_order: Vec<usize> = (0..n).collect();
    let bwd_order: Vec<usize> = (0..n).rev().collect();
    let fwd = lstm_pass(g, store, &p.forward, emb, &fwd_order, h);
    let bwd = lstm_pass(g, store, &p.backward, emb, &bwd_order, h);

    let per_pos: Vec<Var> = (0..n).map(|t| g.concat(&[fwd[t], bwd[t]])).collect();
    let states = g.concat(&per_pos);
    let states = g.reshape(states, &[n, 2 * h]);
    let ww = g.param(store, p.word_w);
    let wb = g.param(store, p.word_b);
    let words = g.linear(states, ww, Some(wb));

    let last = g.concat(&[fwd[n - 1], bwd[0]]);
    let sw = g.param(store, p.sent_w);
    let sb = g.param(store, p.sent_b);
    let sentence = g.linear(last, sw, Some(sb));
    Ok(TextFeatures { words, sentence })
}

/// Normalized per-cell geometry, `[8, h, w]`: x_min, y_min, x_center,
/// y_center, x_max, y_max, 1/w, 1/h.
pub fn coordinate_map<F: Scalar>(h: usize, w: usize) -> Tensor<F> {
    assert!(h >= 1 && w >= 1, "coordinate map needs a non-empty grid");
    let mut data = vec![F::zero(); COORD_CHANNELS * h * w];
    let (hf, wf) = (h as f64, w as f64);
    for i in 0..h {
        for j in 0..w {
            let (x, y) = (j as f64, i as f64);
            let vals = [
                x / wf,
                y / hf,
                (x + 0.5) / wf,
                (y + 0.5) / hf,
                (x + 1.0) / wf,
                (y + 1.0) / hf,
                1.0 / wf,
                1.0 / hf,
            ];
            for (c, v) in vals.into_iter().enumerate() {
                data[(c * h + i) * w + j] = F::of(v);
            }
        }
    }
    Tensor::new(&[COORD_CHANNELS, h, w], data)
}

#[derive(Clone, Debug)]
pub struct ConvParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvParams {
    pub fn init<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
    ) -> Self {
        let w = store.he(&format!("{name}.w"), &[c_out, c_in, k, k], c_in * k * k, rng);
        let b = store.constant(&format!("{name}.b"), &[c_out], 0.0);
        Self { w, b }
    }

    pub fn apply<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        stride: usize,
        pad: usize,
    ) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), stride, pad, 1)
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoderParams {
    /// Two 3x3 convolutions per stage; the first of each stage has stride 2.
    pub trunk: Vec<[ConvParams; 2]>,
    /// 1x1 convolution on raw pixels.
    pub stem: ConvParams,
    /// Per-level 1x1 projection of `[trunk ++ pooled stem ++ coords]` to `d_m`.
    pub proj: Vec<ConvParams>,
}

impl ImageEncoderParams {
    pub fn init<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        channels: &[usize; TRUNK_STAGES],
        d_m: usize,
    ) -> Self {
        let mut trunk = Vec::with_capacity(TRUNK_STAGES);
        let mut c_in = 3;
        for (s, &c) in channels.iter().enumerate() {
            let a = ConvParams::init(store, rng, &format!("image.stage{s}.conv0"), c, c_in, 3);
            let b = ConvParams::init(store, rng, &format!("image.stage{s}.conv1"), c, c, 3);
            trunk.push([a, b]);
            c_in = c;
        }
        let proj = LEVELS
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let c = channels[2 + i] + STEM_CHANNELS + COORD_CHANNELS;
                ConvParams::init(store, rng, &format!("image.proj{l}"), d_m, c, 1)
            })
            .collect();
        let stem = ConvParams::init(store, rng, "image.stem", STEM_CHANNELS, 3, 1);
        Self { trunk, stem, proj }
    }
}

/// Visual features `X^l` for levels 3, 4, 5, each `[d_m, h_l, w_l]`.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 3],
}

impl FeaturePyramid {
    pub fn strides(&self) -> [usize; 3] {
        STRIDES
    }
}

/// Strided convolutional trunk over a `[3, H, W]` image with values in
/// `[-1, 1]`. H and W must be multiples of 32. Each level projects the trunk
/// tap together with a per-pixel stem max-pooled to the level's stride and
/// the coordinates. The stem cannot see shape, so it keeps the color
/// information that the trunk tends to trade away for shape; max pooling
/// keeps it undiluted on the coarse grids.
pub fn encode_image<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    p: &ImageEncoderParams,
    image: &Tensor<F>,
) -> Result<FeaturePyramid> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(invalid!("image must be [3, H, W], got {s:?}"));
    }
    let (h, w) = (s[1], s[2]);
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(invalid!("image size {h}x{w} is not divisible by 32"));
    }
    let mut x = g.constant(image.clone());
    let stem = p.stem.apply(g, store, x, 1, 0);
    let mut pooled = g.leaky_relu(stem, LEAKY_SLOPE);
    for _ in 0..3 {
        pooled = g.max_pool2(pooled);
    }
    let mut taps = Vec::with_capacity(3);
    for (stage, convs) in p.trunk.iter().enumerate() {
        let y = convs[0].apply(g, store, x, 2, 1);
        let y = g.leaky_relu(y, LEAKY_SLOPE);
        let y = convs[1].apply(g, store, y, 1, 1);
        x = g.leaky_relu(y, LEAKY_SLOPE);
        if stage >= 2 {
            taps.push(x);
        }
    }
    let mut levels = Vec::with_capacity(3);
    for (level, (tap, proj)) in taps.into_iter().zip(&p.proj).enumerate() {
        let ts = g.shape(tap).to_vec();
        if level > 0 {
            pooled = g.max_pool2(pooled);
        }
        let coords = g.constant(coordinate_map(ts[1], ts[2]));
        let joined = g.concat(&[tap, pooled, coords]);
        levels.push(proj.apply(g, store, joined, 1, 0));
    }
    Ok(FeaturePyramid { levels: [levels[0], levels[1], levels[2]] })
}
