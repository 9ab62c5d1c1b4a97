//! Anchor-based prediction head, target encoding, loss and decoding.
//!
//! Head outputs are `[15, h, w]` per level with channel `anchor * 5 + field`
//! and fields ordered `(tx, ty, th, tw, conf)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{ConvParams, LEAKY_SLOPE, STRIDES};
use crate::error::{invalid, Result};
use crate::graph::{log_sum_exp, sigmoid, Graph, Var};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ANCHORS_PER_LEVEL: usize = 3;
pub const FIELDS: usize = 5;
pub const HEAD_CHANNELS: usize = ANCHORS_PER_LEVEL * FIELDS;
pub const CONF: usize = 4;
/// Weight of the offset term in the total loss.
pub const LAMBDA_OFF: f64 = 5.0;

/// Fractions are kept this far from 0 and 1 before taking the logit.
const FRAC_EPS: f64 = 1e-6;

/// Axis-aligned box in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self { x_min, y_min, x_max, y_max };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { x_min: cx - w / 2.0, y_min: cy - h / 2.0, x_max: cx + w / 2.0, y_max: cy + h / 2.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let c = [self.x_min, self.y_min, self.x_max, self.y_max];
        if c.iter().any(|v| !v.is_finite()) || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(invalid!("degenerate box {self:?}"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn max_coord_diff(&self, o: &BBox) -> f64 {
        [
            (self.x_min - o.x_min).abs(),
            (self.y_min - o.y_min).abs(),
            (self.x_max - o.x_max).abs(),
            (self.y_max - o.y_max).abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Three `[width, height]` anchors per pyramid level, finest level first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub levels: [[[f64; 2]; ANCHORS_PER_LEVEL]; 3],
}

impl AnchorSet {
    /// Nine sizes sorted by ascending area, assigned three per level.
    pub fn from_sizes(sizes: &[[f64; 2]]) -> Result<Self> {
        if sizes.len() != 3 * ANCHORS_PER_LEVEL {
            return Err(invalid!("expected 9 anchors, got {}", sizes.len()));
        }
        if sizes.iter().flatten().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(invalid!("anchor sizes must be positive"));
        }
        let mut sorted = sizes.to_vec();
        sorted.sort_by(|a, b| (a[0] * a[1]).total_cmp(&(b[0] * b[1])));
        let mut levels = [[[0.0; 2]; ANCHORS_PER_LEVEL]; 3];
        for (i, s) in sorted.into_iter().enumerate() {
            levels[i / ANCHORS_PER_LEVEL][i % ANCHORS_PER_LEVEL] = s;
        }
        Ok(Self { levels })
    }

    pub fn validate(&self) -> Result<()> {
        Self::from_sizes(&self.flat()).map(|_| ())
    }

    pub fn get(&self, level: usize, anchor: usize) -> [f64; 2] {
        self.levels[level][anchor]
    }

    pub fn flat(&self) -> Vec<[f64; 2]> {
        self.levels.iter().flatten().copied().collect()
    }
}

impl Default for AnchorSet {
    /// Generic sizes for 256-pixel images.
    fn default() -> Self {
        Self::from_sizes(&[
            [12.0, 12.0],
            [20.0, 20.0],
            [28.0, 28.0],
            [36.0, 36.0],
            [44.0, 44.0],
            [56.0, 56.0],
            [72.0, 72.0],
            [96.0, 96.0],
            [128.0, 128.0],
        ])
        .expect("static anchors are valid")
    }
}

/// One 3x3 conv + leaky ReLU and a 1x1 conv to 15 channels, per level.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub hidden: Vec<ConvParams>,
    pub out: Vec<ConvParams>,
}

impl HeadParams {
    pub fn init<F: Scalar, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, d_m: usize, hidden: usize) -> Self {
        let mut h = Vec::with_capacity(3);
        let mut o = Vec::with_capacity(3);
        for l in 0..3 {
            h.push(ConvParams::init(store, rng, &format!("head.l{l}.hidden"), hidden, d_m, 3));
            o.push(ConvParams {
                w: store.normal(&format!("head.l{l}.out.w"), &[HEAD_CHANNELS, hidden, 1, 1], 0.01, rng),
                b: store.constant(&format!("head.l{l}.out.b"), &[HEAD_CHANNELS], 0.0),
            });
        }
        Self { hidden: h, out: o }
    }
}

/// Raw head outputs, one `[15, h, w]` tensor per level.
pub fn predict<F: Scalar>(g: &mut Graph<F>, store: &ParamStore<F>, p: &HeadParams, maps: [Var; 3]) -> [Var; 3] {
    let mut out = maps;
    for (l, m) in out.iter_mut().enumerate() {
        let h = p.hidden[l].apply(g, store, *m, 1, 1);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        *m = p.out[l].apply(g, store, h, 1, 0);
    }
    out
}

/// The single positive location of a sample and its regression targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetAssignment {
    pub level: usize,
    pub cell: (usize, usize),
    pub anchor: usize,
    /// In-cell fractional center `(x, y)`, compared after a sigmoid.
    pub frac: [f64; 2],
    /// `[ln(h / anchor_h), ln(w / anchor_w)]`.
    pub log_size: [f64; 2],
}

impl TargetAssignment {
    /// Raw head values `(tx, ty, th, tw)` that decode exactly to the target.
    pub fn raw_offsets(&self) -> [f64; 4] {
        let logit = |f: f64| {
            let f = f.clamp(FRAC_EPS, 1.0 - FRAC_EPS);
            (f / (1.0 - f)).ln()
        };
        [logit(self.frac[0]), logit(self.frac[1]), self.log_size[0], self.log_size[1]]
    }
}

/// Grid sizes `(h, w)` of the three levels for a square or rectangular image.
pub fn grid_dims(image_h: usize, image_w: usize) -> [(usize, usize); 3] {
    STRIDES.map(|s| (image_h / s, image_w / s))
}

/// The (level, anchor) whose anchor shape best overlaps the box when both
/// share a center, and the floor cell containing the center.
pub fn assign_target(gt: &BBox, anchors: &AnchorSet, dims: [(usize, usize); 3]) -> Result<TargetAssignment> {
    gt.validate()?;
    let (cx, cy) = gt.center();
    let (img_h, img_w) = (dims[0].0 * STRIDES[0], dims[0].1 * STRIDES[0]);
    if cx < 0.0 || cy < 0.0 || cx > img_w as f64 || cy > img_h as f64 {
        return Err(invalid!("box center ({cx}, {cy}) outside the {img_w}x{img_h} image"));
    }
    let mut best = (0, 0, f64::NEG_INFINITY);
    for l in 0..3 {
        for a in 0..ANCHORS_PER_LEVEL {
            let [aw, ah] = anchors.get(l, a);
            let v = iou(gt, &BBox::from_center(cx, cy, aw, ah));
            if v > best.2 {
                best = (l, a, v);
            }
        }
    }
    let (level, anchor, _) = best;
    let s = STRIDES[level] as f64;
    let (h, w) = dims[level];
    let j = ((cx / s).floor() as usize).min(w - 1);
    let i = ((cy / s).floor() as usize).min(h - 1);
    let [aw, ah] = anchors.get(level, anchor);
    Ok(TargetAssignment {
        level,
        cell: (i, j),
        anchor,
        frac: [cx / s - j as f64, cy / s - i as f64],
        log_size: [(gt.height() / ah).ln(), (gt.width() / aw).ln()],
    })
}

/// Flat indices of every confidence logit in (level, row-major cell,
/// anchor) order, per level.
fn conf_indices(h: usize, w: usize) -> Vec<usize> {
    let hw = h * w;
    (0..hw)
        .flat_map(|c| (0..ANCHORS_PER_LEVEL).map(move |a| (a * FIELDS + CONF) * hw + c))
        .collect()
}

/// Position of `(level, cell, anchor)` in the joint confidence ordering.
pub fn joint_index(dims: [(usize, usize); 3], level: usize, (i, j): (usize, usize), anchor: usize) -> usize {
    let before: usize = dims[..level].iter().map(|&(h, w)| h * w * ANCHORS_PER_LEVEL).sum();
    before + (i * dims[level].1 + j) * ANCHORS_PER_LEVEL + anchor
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub conf: Var,
    pub off: Var,
}

/// `L = L_conf + λ_off · L_off` where `L_conf` is cross-entropy over every
/// confidence logit and `L_off` the mean squared offset error at the
/// positive location.
pub fn loss<F: Scalar>(g: &mut Graph<F>, preds: [Var; 3], target: &TargetAssignment, lambda_off: f64) -> Result<LossVars> {
    let mut dims = [(0, 0); 3];
    let mut logits = Vec::with_capacity(3);
    for (l, &p) in preds.iter().enumerate() {
        let s = g.shape(p);
        if s.len() != 3 || s[0] != HEAD_CHANNELS {
            return Err(invalid!("level {l} prediction must be [15, h, w], got {s:?}"));
        }
        dims[l] = (s[1], s[2]);
        logits.push(g.gather(p, &conf_indices(s[1], s[2])));
    }
    let (h, w) = dims[target.level];
    let (i, j) = target.cell;
    if i >= h || j >= w || target.anchor >= ANCHORS_PER_LEVEL {
        return Err(invalid!("target {target:?} outside the prediction grid"));
    }
    let all = g.concat(&logits);
    let conf = g.softmax_ce(all, joint_index(dims, target.level, target.cell, target.anchor));

    let hw = h * w;
    let at = |f: usize| (target.anchor * FIELDS + f) * hw + i * w + j;
    let pv = preds[target.level];
    let xy = g.gather(pv, &[at(0), at(1)]);
    let xy = g.sigmoid(xy);
    let hw_raw = g.gather(pv, &[at(2), at(3)]);
    let pred = g.concat(&[xy, hw_raw]);
    let tgt = g.constant(Tensor::from_f64(
        &[4],
        &[target.frac[0], target.frac[1], target.log_size[0], target.log_size[1]],
    ));
    let diff = g.sub(pred, tgt);
    let sq = g.mul(diff, diff);
    let off = g.mean(sq);
    let weighted = g.scale(off, lambda_off);
    let total = g.add(conf, weighted);
    Ok(LossVars { total, conf, off })
}

/// One decoded location.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Raw confidence logit.
    pub logit: f64,
    /// Softmax probability over all locations.
    pub confidence: f64,
    pub level: usize,
    pub cell: (usize, usize),
    pub anchor: usize,
}

/// Decode every location in (level, row-major cell, anchor) order.
pub fn decode_boxes<F: Scalar>(preds: &[Tensor<F>; 3], anchors: &AnchorSet) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (l, p) in preds.iter().enumerate() {
        let s = p.shape();
        if s.len() != 3 || s[0] != HEAD_CHANNELS {
            return Err(invalid!("level {l} prediction must be [15, h, w], got {s:?}"));
        }
        let (h, w) = (s[1], s[2]);
        let stride = STRIDES[l] as f64;
        for i in 0..h {
            for j in 0..w {
                for a in 0..ANCHORS_PER_LEVEL {
                    let v = |f: usize| p.at3(a * FIELDS + f, i, j).as_f64();
                    let [aw, ah] = anchors.get(l, a);
                    let cx = (j as f64 + sigmoid(v(0))) * stride;
                    let cy = (i as f64 + sigmoid(v(1))) * stride;
                    let bbox = BBox::from_center(cx, cy, aw * v(3).exp(), ah * v(2).exp());
                    out.push(Detection { bbox, logit: v(CONF), confidence: 0.0, level: l, cell: (i, j), anchor: a });
                }
            }
        }
    }
    let logits: Vec<f64> = out.iter().map(|d| d.logit).collect();
    let lse = log_sum_exp(&logits);
    for d in &mut out {
        d.confidence = (d.logit - lse).exp();
    }
    Ok(out)
}

/// Highest-confidence detection; the earliest location wins ties.
pub fn select_prediction(dets: &[Detection]) -> Result<Detection> {
    let mut best: Option<&Detection> = None;
    for d in dets {
        if best.map_or(true, |b| d.logit > b.logit) {
            best = Some(d);
        }
    }
    best.copied().ok_or_else(|| invalid!("no detections to select from"))
}

/// Head outputs that decode to `target` with a dominant confidence.
pub fn planted_prediction<F: Scalar>(target: &TargetAssignment, dims: [(usize, usize); 3]) -> [Tensor<F>; 3] {
    let mut out = dims.map(|(h, w)| Tensor::zeros(&[HEAD_CHANNELS, h, w]));
    let (h, w) = dims[target.level];
    let (i, j) = target.cell;
    let raw = target.raw_offsets();
    let t = &mut out[target.level];
    for (f, &v) in raw.iter().enumerate() {
        t.data_mut()[((target.anchor * FIELDS + f) * h + i) * w + j] = F::of(v);
    }
    t.data_mut()[((target.anchor * FIELDS + CONF) * h + i) * w + j] = F::of(10.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &bx(1.0, 0.0, 3.0, 2.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 3.0, 1.0, 2.0).is_err());
        let bad = BBox { x_min: 0.0, y_min: 0.0, x_max: 0.0, y_max: 0.0 };
        assert!(assign_target(&bad, &AnchorSet::default(), grid_dims(256, 256)).is_err());
    }

    #[test]
    fn anchors_sorted_by_area() {
        let a = AnchorSet::from_sizes(&[
            [90.0, 90.0],
            [10.0, 10.0],
            [40.0, 40.0],
            [20.0, 20.0],
            [70.0, 70.0],
            [30.0, 30.0],
            [50.0, 50.0],
            [60.0, 60.0],
            [80.0, 80.0],
        ])
        .unwrap();
        assert_eq!(a.get(0, 0), [10.0, 10.0]);
        assert_eq!(a.get(2, 2), [90.0, 90.0]);
        assert!(AnchorSet::from_sizes(&[[1.0, 1.0]; 8]).is_err());
        assert!(AnchorSet::from_sizes(&[[1.0, -1.0]; 9]).is_err());
    }

    #[test]
    fn perfect_anchor_match() {
        let anchors = AnchorSet::default();
        let [aw, ah] = anchors.get(1, 2);
        // center of level-4 cell (3, 5)
        let gt = BBox::from_center(5.5 * 16.0, 3.5 * 16.0, aw, ah);
        let t = assign_target(&gt, &anchors, grid_dims(256, 256)).unwrap();
        assert_eq!((t.level, t.cell, t.anchor), (1, (3, 5), 2));
        assert_eq!(t.frac, [0.5, 0.5]);
        assert_eq!(t.log_size, [0.0, 0.0]);
    }

    #[test]
    fn boundary_center_takes_floor_cell() {
        let anchors = AnchorSet::default();
        let [aw, ah] = anchors.get(0, 0);
        let gt = BBox::from_center(16.0, 24.0, aw, ah);
        let t = assign_target(&gt, &anchors, grid_dims(256, 256)).unwrap();
        assert_eq!((t.level, t.cell), (0, (3, 2)));
        assert_eq!(t.frac, [0.0, 0.0]);
    }

    #[test]
    fn assignment_is_brute_force_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let anchors = AnchorSet::default();
        for _ in 0..200 {
            let (cx, cy) = (rng.gen_range(10.0..246.0), rng.gen_range(10.0..246.0));
            let gt = BBox::from_center(cx, cy, rng.gen_range(4.0..150.0), rng.gen_range(4.0..150.0));
            let t = assign_target(&gt, &anchors, grid_dims(256, 256)).unwrap();
            let chosen = anchors.get(t.level, t.anchor);
            let v = iou(&gt, &BBox::from_center(cx, cy, chosen[0], chosen[1]));
            for s in anchors.flat() {
                assert!(iou(&gt, &BBox::from_center(cx, cy, s[0], s[1])) <= v);
            }
        }
    }

    #[test]
    fn zero_offsets_decode_to_centered_anchor() {
        let anchors = AnchorSet::default();
        let preds = grid_dims(64, 64).map(|(h, w)| Tensor::<f64>::zeros(&[15, h, w]));
        let dets = decode_boxes(&preds, &anchors).unwrap();
        assert_eq!(dets.len(), 3 * (64 + 16 + 4));
        for d in &dets {
            let s = STRIDES[d.level] as f64;
            let [aw, ah] = anchors.get(d.level, d.anchor);
            let e = BBox::from_center((d.cell.1 as f64 + 0.5) * s, (d.cell.0 as f64 + 0.5) * s, aw, ah);
            assert!(d.bbox.max_coord_diff(&e) < 1e-12);
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let anchors = AnchorSet::default();
        let dims = grid_dims(256, 256);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x0 = rng.gen_range(0.0..200.0);
            let y0 = rng.gen_range(0.0..200.0);
            let gt = bx(x0, y0, x0 + rng.gen_range(3.0..56.0), y0 + rng.gen_range(3.0..56.0));
            let t = assign_target(&gt, &anchors, dims).unwrap();
            let preds = planted_prediction::<f64>(&t, dims);
            let best = select_prediction(&decode_boxes(&preds, &anchors).unwrap()).unwrap();
            assert_eq!((best.level, best.cell, best.anchor), (t.level, t.cell, t.anchor));
            worst = worst.max(best.bbox.max_coord_diff(&gt));
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn width_grows_with_tw() {
        let anchors = AnchorSet::default();
        let mut last = 0.0;
        for tw in [-1.0, 0.0, 0.5, 2.0] {
            let mut preds = grid_dims(32, 32).map(|(h, w)| Tensor::<f64>::zeros(&[15, h, w]));
            preds[0].data_mut()[3 * 16] = tw;
            let d = decode_boxes(&preds, &anchors).unwrap()[0];
            assert!(d.bbox.width() > last);
            last = d.bbox.width();
        }
    }

    fn random_preds(rng: &mut ChaCha8Rng, dims: [(usize, usize); 3]) -> [Tensor<f64>; 3] {
        dims.map(|(h, w)| Tensor::new(&[15, h, w], (0..15 * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect()))
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let anchors = AnchorSet::default();
        let dims = grid_dims(64, 64);
        for _ in 0..10 {
            let preds = random_preds(&mut rng, dims);
            let gt = bx(10.0, 12.0, 10.0 + rng.gen_range(5.0..40.0), 12.0 + rng.gen_range(5.0..40.0));
            let t = assign_target(&gt, &anchors, dims).unwrap();
            let mut g = Graph::new();
            let vars = preds.clone().map(|p| g.constant(p));
            let l = loss(&mut g, vars, &t, LAMBDA_OFF).unwrap();

            let mut logits = Vec::new();
            let mut pos = 0;
            for (lv, p) in preds.iter().enumerate() {
                let (h, w) = dims[lv];
                for i in 0..h {
                    for j in 0..w {
                        for a in 0..3 {
                            if (lv, (i, j), a) == (t.level, t.cell, t.anchor) {
                                pos = logits.len();
                            }
                            logits.push(p.at3(a * 5 + 4, i, j));
                        }
                    }
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
            let ce = m + z.ln() - logits[pos];
            let p = &preds[t.level];
            let v = |f: usize| p.at3(t.anchor * 5 + f, t.cell.0, t.cell.1);
            let s = |x: f64| 1.0 / (1.0 + (-x).exp());
            let mse = ((s(v(0)) - t.frac[0]).powi(2)
                + (s(v(1)) - t.frac[1]).powi(2)
                + (v(2) - t.log_size[0]).powi(2)
                + (v(3) - t.log_size[1]).powi(2))
                / 4.0;
            assert!((g.value(l.conf).data()[0] - ce).abs() < 1e-6);
            assert!((g.value(l.off).data()[0] - mse).abs() < 1e-6);
            assert!((g.value(l.total).data()[0] - (ce + 5.0 * mse)).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_logits_give_log_p() {
        let dims = grid_dims(64, 64);
        let preds = dims.map(|(h, w)| Tensor::<f64>::zeros(&[15, h, w]));
        let t = assign_target(&bx(20.0, 20.0, 40.0, 40.0), &AnchorSet::default(), dims).unwrap();
        let mut g = Graph::new();
        let vars = preds.map(|p| g.constant(p));
        let l = loss(&mut g, vars, &t, LAMBDA_OFF).unwrap();
        let p = 3.0 * (64.0 + 16.0 + 4.0);
        assert!((g.value(l.conf).data()[0] - f64::ln(p)).abs() < 1e-12);
    }

    #[test]
    fn confidence_loss_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = grid_dims(64, 64);
        let preds = random_preds(&mut rng, dims);
        let t = assign_target(&bx(5.0, 30.0, 25.0, 60.0), &AnchorSet::default(), dims).unwrap();
        let conf_of = |preds: [Tensor<f64>; 3]| {
            let mut g = Graph::new();
            let vars = preds.map(|p| g.constant(p));
            let l = loss(&mut g, vars, &t, LAMBDA_OFF).unwrap();
            g.value(l.conf).data()[0]
        };
        let mut shifted = preds.clone();
        for (l, p) in shifted.iter_mut().enumerate() {
            let (h, w) = dims[l];
            for a in 0..3 {
                for c in 0..h * w {
                    p.data_mut()[(a * 5 + 4) * h * w + c] += 3.7;
                }
            }
        }
        assert!((conf_of(preds) - conf_of(shifted)).abs() < 1e-10);
    }

    #[test]
    fn exact_offsets_give_zero_offset_loss() {
        let dims = grid_dims(64, 64);
        let t = assign_target(&bx(5.0, 30.0, 25.0, 60.0), &AnchorSet::default(), dims).unwrap();
        let preds = planted_prediction::<f64>(&t, dims);
        let mut g = Graph::new();
        let vars = preds.map(|p| g.constant(p));
        let l = loss(&mut g, vars, &t, LAMBDA_OFF).unwrap();
        assert!(g.value(l.off).data()[0] < 1e-20);
        assert!(g.value(l.conf).data()[0] >= 0.0);
    }

    #[test]
    fn selection_matches_scan_and_breaks_ties_early() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let anchors = AnchorSet::default();
        let dims = grid_dims(64, 64);
        for _ in 0..20 {
            let dets = decode_boxes(&random_preds(&mut rng, dims), &anchors).unwrap();
            let best = select_prediction(&dets).unwrap();
            let mut idx = 0;
            for (k, d) in dets.iter().enumerate() {
                if d.logit > dets[idx].logit {
                    idx = k;
                }
            }
            assert_eq!(best, dets[idx]);
        }
        let zeros = dims.map(|(h, w)| Tensor::<f64>::zeros(&[15, h, w]));
        let dets = decode_boxes(&zeros, &anchors).unwrap();
        let best = select_prediction(&dets).unwrap();
        assert_eq!((best.level, best.cell, best.anchor), (0, (0, 0), 0));
        assert!(select_prediction(&[]).is_err());
        assert_eq!(select_prediction(&dets[5..6]).unwrap(), dets[5]);
    }

    #[test]
    fn head_shapes_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let p = HeadParams::init(&mut store, &mut rng, 4, 6);
        let mut g = Graph::new();
        let maps = grid_dims(256, 256).map(|(h, w)| g.constant(Tensor::zeros(&[4, h, w])));
        let out = predict(&mut g, &store, &p, maps);
        assert_eq!(g.shape(out[0]), &[15, 32, 32]);
        assert_eq!(g.shape(out[1]), &[15, 16, 16]);
        assert_eq!(g.shape(out[2]), &[15, 8, 8]);
        for o in out {
            assert!(g.value(o).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn joint_index_follows_decode_order() {
        let dims = grid_dims(64, 64);
        let preds = dims.map(|(h, w)| Tensor::<f64>::zeros(&[15, h, w]));
        let dets = decode_boxes(&preds, &AnchorSet::default()).unwrap();
        for (k, d) in dets.iter().enumerate() {
            assert_eq!(joint_index(dims, d.level, d.cell, d.anchor), k);
        }
    }
}
