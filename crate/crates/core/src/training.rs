//! Optimization loop, evaluation, checkpoint container and gradient checks.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    image_to_tensor, render, sample_seed, tokenize, Expression, Manifest, ObjectSpec, SampleRecord, SceneTransform, Split,
};
use crate::encoders::TokenSequence;
use crate::error::{invalid, Result, SogError};
use crate::graph::Graph;
use crate::head::{
    assign_target, decode_boxes, grid_dims, iou, loss, select_prediction, AnchorSet, BBox, Detection,
    TargetAssignment,
};
use crate::model::{Forward, Grounder, ModelConfig};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::sog::{EdgeVariant, ForwardMode};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SOGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// RNG stream ids; one per source of randomness.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_ERC: u64 = 1;
pub const STREAM_AUGMENT: u64 = 2;
const STREAM_DATA_BASE: u64 = 1 << 32;

/// Step ladder for double-precision gradient checks.
pub const FD_STEPS: [f64; 5] = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_off: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Evaluate on the validation split every this many epochs (0 disables).
    pub eval_every: usize,
    /// Draw a fresh recoloring, mirror flips and scene shift for every
    /// training sample visit.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_min: 0.0,
            weight_decay: 1e-4,
            batch_size: 16,
            epochs: 40,
            lambda_off: 5.0,
            grad_clip: 10.0,
            seed: 0,
            eval_every: 1,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [("lr", self.lr), ("lambda_off", self.lambda_off), ("grad_clip", self.grad_clip)];
        for (n, v) in pos {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid!("{n} must be a non-negative number, got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(invalid!("weight decay must be non-negative and 0 <= lr_min <= lr"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(invalid!("batch size and epochs must be positive"));
        }
        Ok(())
    }
}

/// `lr_min + (lr_max - lr_min)(1 + cos(πt/T)) / 2`, clamped to `lr_min`
/// past the end.
pub fn cosine_lr(t: u64, total: u64, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 || t >= total {
        return lr_min;
    }
    let frac = t as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: store.zeros_like(), v: store.zeros_like() }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Tensor<F>], lr: f64, weight_decay: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let gk = g[k].as_f64();
                let mk = b1 * m[k].as_f64() + (1.0 - b1) * gk;
                let vk = b2 * v[k].as_f64() + (1.0 - b2) * gk * gk;
                m[k] = F::of(mk);
                v[k] = F::of(vk);
                let pk = p[k].as_f64();
                let update = (mk / c1) / ((vk / c2).sqrt() + self.eps);
                p[k] = F::of(pk - lr * (update + weight_decay * pk));
            }
        }
    }
}

/// Rescale `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<F: Scalar>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::of(max_norm / norm);
        grads.iter_mut().for_each(|g| g.scale(s));
    }
    norm
}

/// A loaded training or evaluation example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub index: usize,
    pub image: RgbImage,
    pub expression: String,
    pub tokens: TokenSequence,
    pub gt: BBox,
    pub target: TargetAssignment,
    /// Source scene, kept so augmented copies can be re-rendered.
    pub objects: Vec<ObjectSpec>,
    pub target_object: usize,
    pub vocab: Arc<[String]>,
}

impl Sample {
    pub fn from_record(
        record: &SampleRecord,
        image: RgbImage,
        vocab: &[String],
        anchors: &AnchorSet,
    ) -> Result<Self> {
        Self::build(record.index, image, record.expression.clone(), &record.objects, record.target, vocab.into(), anchors)
    }

    fn build(
        index: usize,
        image: RgbImage,
        expression: String,
        objects: &[ObjectSpec],
        target_object: usize,
        vocab: Arc<[String]>,
        anchors: &AnchorSet,
    ) -> Result<Self> {
        let gt = objects.get(target_object).ok_or_else(|| invalid!("sample {index}: no object {target_object}"))?.bbox;
        let (w, h) = (image.width() as usize, image.height() as usize);
        let target = assign_target(&gt, anchors, grid_dims(h, w))?;
        Ok(Self {
            index,
            image,
            tokens: tokenize(&expression, &vocab)?,
            expression,
            gt,
            target,
            objects: objects.to_vec(),
            target_object,
            vocab,
        })
    }

    /// The same example after a scene edit, re-rendered.
    pub fn transformed(&self, t: &SceneTransform, anchors: &AnchorSet) -> Result<Self> {
        let size = self.image.width() as usize;
        let objects = t.apply_objects(&self.objects, size);
        let expr: Expression = self.expression.parse()?;
        let expression = t.apply_expression(&expr).to_string();
        let image = render(&objects, size);
        Self::build(self.index, image, expression, &objects, self.target_object, self.vocab.clone(), anchors)
    }

    pub fn tensor<F: Scalar>(&self) -> Tensor<F> {
        image_to_tensor(&self.image)
    }
}

/// Load every sample of `split`; image paths resolve against `root`.
pub fn load_split(manifest: &Manifest, root: &Path, split: Split) -> Result<Vec<Sample>> {
    let h = &manifest.header;
    let vocab: Arc<[String]> = h.vocabulary.clone().into();
    manifest
        .split(split)
        .map(|r| {
            let img = image::open(root.join(&r.image))?.to_rgb8();
            Sample::build(r.index, img, r.expression.clone(), &r.objects, r.target, vocab.clone(), &h.anchors)
        })
        .collect()
}

/// Random stream for one visit of sample `index` in `epoch`; independent of
/// batch order so resumed runs replay it.
pub fn augmentation_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let key = sample_seed(sample_seed(seed ^ STREAM_AUGMENT, epoch as u64), index as u64);
    stream(key, STREAM_AUGMENT)
}

/// Independent ChaCha8 stream `id` under `seed`.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Training-sample order for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, STREAM_DATA_BASE + epoch as u64));
    order
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub conf: f64,
    pub off: f64,
}

/// Context written out when a loss turns non-finite.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NonFiniteDump {
    pub epoch: usize,
    pub step: u64,
    pub batch: Vec<usize>,
    pub sample: usize,
    pub alpha: Vec<f64>,
    pub loss: LossTerms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub loss_conf: f64,
    pub loss_off: f64,
    pub val_pr: Option<f64>,
    pub wall_time_s: f64,
}

impl MetricsRecord {
    /// Record without the wall-clock field, for reproducibility checks.
    pub fn without_time(&self) -> Self {
        Self { wall_time_s: 0.0, ..self.clone() }
    }
}

pub fn append_metrics(path: &Path, rec: &MetricsRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    serde_json::to_writer(&mut f, rec)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(SogError::from))
        .collect()
}

/// Forward one sample and build its loss.
pub fn sample_loss<F: Scalar, R: Rng + ?Sized>(
    model: &Grounder<F>,
    g: &mut Graph<F>,
    sample: &Sample,
    lambda_off: f64,
    mode: ForwardMode,
    rng: &mut R,
) -> Result<(Forward<F>, crate::head::LossVars)> {
    let fwd = model.forward(g, &sample.tensor(), &sample.tokens, mode, rng)?;
    let l = loss(g, fwd.preds, &sample.target, lambda_off)?;
    Ok((fwd, l))
}

/// Model, optimizer and the state needed to resume exactly.
#[derive(Clone, Debug)]
pub struct Trainer<F: Scalar> {
    pub model: Grounder<F>,
    pub config: TrainConfig,
    pub optimizer: Adam<F>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub erc_rng: ChaCha8Rng,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model_cfg: ModelConfig, config: TrainConfig, vocab_size: usize, anchors: AnchorSet) -> Result<Self> {
        config.validate()?;
        let model = Grounder::new(model_cfg, vocab_size, anchors, &mut stream(config.seed, STREAM_INIT))?;
        let optimizer = Adam::new(&model.store);
        let erc_rng = stream(config.seed, STREAM_ERC);
        Ok(Self { model, config, optimizer, epoch: 0, step: 0, erc_rng })
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.config.batch_size) as u64
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        self.steps_per_epoch(n) * self.config.epochs as u64
    }

    /// One optimizer step on the mean loss of `batch`.
    pub fn train_step(&mut self, data: &[Sample], batch: &[usize], total_steps: u64) -> Result<LossTerms> {
        let mut grads = self.model.store.zeros_like();
        let mut sum = LossTerms::default();
        for &i in batch {
            let augmented;
            let s = if self.config.augment {
                let s = &data[i];
                let mut rng = augmentation_rng(self.config.seed, self.epoch, s.index);
                let t = SceneTransform::random(&mut rng, &s.objects, s.image.width() as usize);
                augmented = s.transformed(&t, &self.model.anchors)?;
                &augmented
            } else {
                &data[i]
            };
            let mut g = Graph::new();
            let (fwd, l) =
                sample_loss(&self.model, &mut g, s, self.config.lambda_off, ForwardMode::Train, &mut self.erc_rng)?;
            let terms = LossTerms {
                total: g.value(l.total).data()[0].as_f64(),
                conf: g.value(l.conf).data()[0].as_f64(),
                off: g.value(l.off).data()[0].as_f64(),
            };
            if !(terms.total.is_finite() && terms.conf.is_finite() && terms.off.is_finite()) {
                let dump = NonFiniteDump {
                    epoch: self.epoch,
                    step: self.step,
                    batch: batch.iter().map(|&b| data[b].index).collect(),
                    sample: s.index,
                    alpha: fwd.sog.map(|o| o.regions.alpha.iter().map(|a| a.as_f64()).collect()).unwrap_or_default(),
                    loss: terms,
                };
                return Err(SogError::NonFinite(serde_json::to_string(&dump)?));
            }
            sum.total += terms.total;
            sum.conf += terms.conf;
            sum.off += terms.off;
            g.backward(l.total).accumulate_params(&mut grads);
        }
        let inv = 1.0 / batch.len() as f64;
        grads.iter_mut().for_each(|t| t.scale(F::of(inv)));
        let norm = clip_global_norm(&mut grads, self.config.grad_clip);
        if !norm.is_finite() {
            let dump = serde_json::json!({ "epoch": self.epoch, "step": self.step, "gradient_norm": norm.to_string() });
            return Err(SogError::NonFinite(dump.to_string()));
        }
        let lr = cosine_lr(self.step, total_steps, self.config.lr, self.config.lr_min);
        self.optimizer.step(&mut self.model.store, &grads, lr, self.config.weight_decay);
        self.step += 1;
        Ok(LossTerms { total: sum.total * inv, conf: sum.conf * inv, off: sum.off * inv })
    }

    /// One pass over `data` in this epoch's shuffled order.
    pub fn train_epoch(&mut self, data: &[Sample]) -> Result<MetricsRecord> {
        if data.is_empty() {
            return Err(invalid!("no training samples"));
        }
        let start = Instant::now();
        let total = self.total_steps(data.len());
        let lr = cosine_lr(self.step, total, self.config.lr, self.config.lr_min);
        let order = epoch_order(self.config.seed, self.epoch, data.len());
        let mut acc = LossTerms::default();
        let mut n = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let t = self.train_step(data, batch, total)?;
            let w = batch.len() as f64;
            acc.total += t.total * w;
            acc.conf += t.conf * w;
            acc.off += t.off * w;
            n += w;
        }
        self.epoch += 1;
        Ok(MetricsRecord {
            epoch: self.epoch,
            step: self.step,
            lr,
            loss: acc.total / n,
            loss_conf: acc.conf / n,
            loss_off: acc.off / n,
            val_pr: None,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }
}

/// Evaluation must see deterministic edges.
pub fn check_eval_strategy(v: EdgeVariant) -> Result<()> {
    if v != EdgeVariant::Original {
        return Err(invalid!("evaluation requires the original edge strategy, got '{v}'"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub index: usize,
    pub expression: String,
    pub pred: BBox,
    pub confidence: f64,
    pub gt: BBox,
    pub iou: f64,
    pub hit: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pr: f64,
    pub records: Vec<EvalRecord>,
}

/// Evaluation-mode forward pass; no randomness is consumed.
pub fn eval_forward<F: Scalar>(
    model: &Grounder<F>,
    image: &Tensor<F>,
    tokens: &TokenSequence,
) -> Result<(Graph<F>, Forward<F>)> {
    let mut g = Graph::new();
    let mut unused = stream(0, STREAM_ERC);
    let fwd = model.forward(&mut g, image, tokens, ForwardMode::Eval, &mut unused)?;
    Ok((g, fwd))
}

/// Highest-confidence box for one image and expression, in evaluation mode.
pub fn infer<F: Scalar>(model: &Grounder<F>, image: &Tensor<F>, tokens: &TokenSequence) -> Result<Detection> {
    let (g, fwd) = eval_forward(model, image, tokens)?;
    let preds = fwd.preds.map(|p| g.value(p).clone());
    select_prediction(&decode_boxes(&preds, &model.anchors)?)
}

/// Pr@0.5 with per-sample records; edge randomness is off.
pub fn evaluate<F: Scalar>(model: &Grounder<F>, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(invalid!("no samples to evaluate"));
    }
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let d = infer(model, &s.tensor(), &s.tokens)?;
        let v = iou(&d.bbox, &s.gt);
        records.push(EvalRecord {
            index: s.index,
            expression: s.expression.clone(),
            pred: d.bbox,
            confidence: d.confidence,
            gt: s.gt,
            iou: v,
            hit: v >= 0.5,
        });
    }
    let pr = records.iter().filter(|r| r.hit).count() as f64 / records.len() as f64;
    Ok(EvalReport { pr, records })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(r: &ChaCha8Rng) -> Self {
        Self { seed: r.get_seed(), stream: r.get_stream(), word_pos: r.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self.word_pos.parse().map_err(|_| SogError::Checkpoint("bad rng position".into()))?;
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(pos);
        Ok(r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// JSON header of the checkpoint container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub scalar: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocabulary: Vec<String>,
    pub anchors: AnchorSet,
    pub epoch: usize,
    pub step: u64,
    pub adam_t: u64,
    pub erc_rng: RngState,
    pub params: Vec<TensorEntry>,
}

/// Container layout: magic, little-endian u32 version, u64 header length,
/// JSON header, then parameters, Adam first and second moments as raw
/// little-endian scalars in header order.
pub fn encode_checkpoint<F: Scalar>(t: &Trainer<F>, vocabulary: &[String]) -> Result<Vec<u8>> {
    let store = &t.model.store;
    let header = CheckpointHeader {
        scalar: F::NAME.into(),
        model: t.model.config.clone(),
        train: t.config.clone(),
        vocabulary: vocabulary.to_vec(),
        anchors: t.model.anchors.clone(),
        epoch: t.epoch,
        step: t.step,
        adam_t: t.optimizer.t,
        erc_rng: RngState::capture(&t.erc_rng),
        params: store.iter().map(|(_, n, v)| TensorEntry { name: n.into(), shape: v.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 3 * store.num_scalars() * F::BYTES + 20);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let groups = [store.iter().map(|(_, _, v)| v).collect::<Vec<_>>(), t.optimizer.m.iter().collect(), t.optimizer.v.iter().collect()];
    for group in groups {
        for tensor in group {
            for &x in tensor.data() {
                x.write_le(&mut out);
            }
        }
    }
    Ok(out)
}

pub fn decode_checkpoint<F: Scalar>(bytes: &[u8]) -> Result<Trainer<F>> {
    let bad = |m: &str| SogError::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(SogError::Version { what: "checkpoint", found: version, expected: CHECKPOINT_VERSION });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.scalar != F::NAME {
        return Err(bad(&format!("stored as {}, requested {}", header.scalar, F::NAME)));
    }
    let mut trainer = Trainer::<F>::new(
        header.model.clone(),
        header.train.clone(),
        header.vocabulary.len(),
        header.anchors.clone(),
    )?;
    let store = &trainer.model.store;
    if store.len() != header.params.len() {
        return Err(bad(&format!("{} tensors stored, model has {}", header.params.len(), store.len())));
    }
    for ((_, name, v), e) in store.iter().zip(&header.params) {
        if name != e.name || v.shape() != e.shape.as_slice() {
            return Err(bad(&format!("tensor {} {:?} does not match model tensor {name} {:?}", e.name, e.shape, v.shape())));
        }
    }
    let n = store.num_scalars();
    let data = &bytes[20 + hlen..];
    if data.len() != 3 * n * F::BYTES {
        return Err(bad(&format!("expected {} data bytes, found {}", 3 * n * F::BYTES, data.len())));
    }
    let mut chunks = data.chunks_exact(F::BYTES).map(F::read_le);
    let ids: Vec<ParamId> = trainer.model.store.ids().collect();
    for &id in &ids {
        trainer.model.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = chunks.next().expect("sized"));
    }
    for group in [&mut trainer.optimizer.m, &mut trainer.optimizer.v] {
        for t in group.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = chunks.next().expect("sized"));
        }
    }
    trainer.optimizer.t = header.adam_t;
    trainer.epoch = header.epoch;
    trainer.step = header.step;
    trainer.erc_rng = header.erc_rng.restore()?;
    Ok(trainer)
}

pub fn checkpoint_vocabulary(bytes: &[u8]) -> Result<Vec<String>> {
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(SogError::Checkpoint("not a checkpoint file".into()));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| SogError::Checkpoint("truncated header".into()))?;
    Ok(serde_json::from_slice::<CheckpointHeader>(body)?.vocabulary)
}

/// Write through a temporary file so a crash never leaves a partial file.
pub fn save_checkpoint<F: Scalar>(path: &Path, t: &Trainer<F>, vocabulary: &[String]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&encode_checkpoint(t, vocabulary)?)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(Trainer<F>, Vec<String>)> {
    let bytes = fs::read(path)?;
    Ok((decode_checkpoint(&bytes)?, checkpoint_vocabulary(&bytes)?))
}

/// Central-difference check of `grad` at the listed parameter entries.
///
/// Each entry is differenced at every step in `steps` and keeps its best
/// agreement: large steps can straddle a ReLU kink or a top-K swap, small
/// ones drown in rounding. Returns the largest
/// `|a - n| / max(|a|, |n|, floor)` over entries.
pub fn finite_difference_check(
    store: &mut ParamStore<f64>,
    picks: &[(ParamId, usize)],
    steps: &[f64],
    floor: f64,
    mut objective: impl FnMut(&ParamStore<f64>) -> Result<(f64, Vec<Tensor<f64>>)>,
) -> Result<f64> {
    if steps.is_empty() || steps.iter().any(|&e| !(e > 0.0)) {
        return Err(invalid!("finite-difference steps must be positive, got {steps:?}"));
    }
    let (_, grads) = objective(store)?;
    let mut worst: f64 = 0.0;
    for &(id, k) in picks {
        let orig = store.get(id).data()[k];
        let analytic = grads[id.0].data()[k];
        let mut best = f64::INFINITY;
        for &eps in steps {
            store.get_mut(id).data_mut()[k] = orig + eps;
            let (up, _) = objective(store)?;
            store.get_mut(id).data_mut()[k] = orig - eps;
            let (down, _) = objective(store)?;
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            best = best.min((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor));
        }
        worst = worst.max(best);
    }
    Ok(worst)
}

/// Random parameter entries: `per_module` from each of the encoder, fusion,
/// graph and head parameter groups present in the store.
pub fn pick_parameters<R: Rng>(store: &ParamStore<f64>, per_module: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let mut picks = Vec::new();
    for prefix in ["text.", "image.", "fusion.", "sog.", "head."] {
        let ids: Vec<ParamId> = store.iter().filter(|(_, n, _)| n.starts_with(prefix)).map(|(id, _, _)| id).collect();
        if ids.is_empty() {
            continue;
        }
        for _ in 0..per_module {
            let id = *ids.choose(rng).expect("non-empty");
            picks.push((id, rng.gen_range(0..store.get(id).len())));
        }
    }
    picks
}

/// Full-model gradient check in double precision. With `erc_seed` set, the
/// model runs in training mode and every evaluation replays the same edge
/// draws.
pub fn grad_check(
    model: &mut Grounder<f64>,
    sample: &Sample,
    picks: &[(ParamId, usize)],
    steps: &[f64],
    erc_seed: Option<u64>,
) -> Result<f64> {
    let mode = if erc_seed.is_some() { ForwardMode::Train } else { ForwardMode::Eval };
    let seed = erc_seed.unwrap_or(0);
    let image = sample.tensor::<f64>();
    let shell = model.clone();
    finite_difference_check(&mut model.store, picks, steps, 1e-6, |store| {
        let m = Grounder { store: store.clone(), ..shell.clone() };
        let mut g = Graph::new();
        let mut rng = stream(seed, STREAM_ERC);
        let fwd = m.forward(&mut g, &image, &sample.tokens, mode, &mut rng)?;
        let l = loss(&mut g, fwd.preds, &sample.target, crate::head::LAMBDA_OFF)?;
        let mut grads = store.zeros_like();
        g.backward(l.total).accumulate_params(&mut grads);
        Ok((g.value(l.total).data()[0], grads))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_sample, GenConfig};
    use crate::head::planted_prediction;

    #[test]
    fn cosine_boundaries() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 0.0), 1e-3);
        assert_eq!(cosine_lr(100, 100, 1e-3, 0.0), 0.0);
        assert_eq!(cosine_lr(150, 100, 1e-3, 1e-5), 1e-5);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for t in 0..=100 {
            let v = cosine_lr(t, 100, 1e-3, 0.0);
            assert!(v <= last && v >= 0.0);
            last = v;
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("p", Tensor::from_f64(&[2], &[1.0, -1.0]));
        let mut opt = Adam::new(&store);
        opt.step(&mut store, &[Tensor::from_f64(&[2], &[0.5, -3.0])], 0.1, 0.0);
        let p = store.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-7 && (p[1] + 0.9).abs() < 1e-7);
        let before = store.clone();
        opt.step(&mut store, &[Tensor::from_f64(&[2], &[1.0, 1.0])], 0.0, 0.5);
        assert_eq!(store, before);
    }

    #[test]
    fn decoupled_decay_without_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("p", Tensor::from_f64(&[1], &[2.0]));
        let mut opt = Adam::new(&store);
        opt.step(&mut store, &[Tensor::zeros(&[1])], 0.1, 0.5);
        assert!((store.get(id).data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Tensor::<f64>::from_f64(&[2], &[30.0, 40.0])];
        assert_eq!(clip_global_norm(&mut g, 10.0), 50.0);
        assert!((g[0].data()[0] - 6.0).abs() < 1e-12 && (g[0].data()[1] - 8.0).abs() < 1e-12);
        let mut small = vec![Tensor::<f64>::from_f64(&[1], &[3.0])];
        clip_global_norm(&mut small, 10.0);
        assert_eq!(small[0].data(), &[3.0]);
    }

    #[test]
    fn epoch_orders_are_permutations() {
        let a = epoch_order(1, 0, 50);
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(1, 0, 50));
        assert_ne!(a, epoch_order(1, 1, 50));
    }

    #[test]
    fn linear_objective_checks_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let w = store.normal("w", &[3, 4], 1.0, &mut rng);
        let b = store.normal("b", &[3], 1.0, &mut rng);
        let x = Tensor::from_f64(&[4], &[0.3, -1.2, 2.0, 0.7]);
        let picks: Vec<(ParamId, usize)> = (0..12).map(|k| (w, k)).chain((0..3).map(|k| (b, k))).collect();
        let err = finite_difference_check(&mut store, &picks, &[1e-3], 1e-12, |s| {
            let mut g = Graph::new();
            let (wv, bv) = (g.param(s, w), g.param(s, b));
            let xv = g.constant(x.clone());
            let y = g.linear(xv, wv, Some(bv));
            let l = g.sum(y);
            let mut grads = s.zeros_like();
            g.backward(l).accumulate_params(&mut grads);
            Ok((g.value(l).data()[0], grads))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig { embed_dim: 4, lstm_hidden: 4, d_m: 6, trunk_channels: [3, 4, 4, 5, 5], head_hidden: 4, ..ModelConfig::default() }
    }

    fn tiny_samples(n: usize) -> Vec<Sample> {
        let cfg = GenConfig { image_size: 64, ..GenConfig::default() };
        let vocab = crate::dataset::vocabulary();
        (0..n)
            .map(|i| {
                let s = generate_sample(&cfg, i, Split::Train).unwrap();
                Sample::from_record(&s.record, s.image, &vocab, &AnchorSet::default()).unwrap()
            })
            .collect()
    }

    #[test]
    fn frozen_parameters_stay_put() {
        let data = tiny_samples(4);
        let cfg = TrainConfig { lr: 0.0, batch_size: 2, epochs: 1, ..TrainConfig::default() };
        let mut t = Trainer::<f32>::new(tiny_model(), cfg, 16, AnchorSet::default()).unwrap();
        let before = t.model.store.clone();
        let rec = t.train_epoch(&data).unwrap();
        assert_eq!(t.model.store, before);
        assert_eq!(rec.step, 2);
        assert!(rec.loss.is_finite());
    }

    #[test]
    fn augmentation_is_keyed_by_visit() {
        let s = &tiny_samples(1)[0];
        let draw = |epoch, index| SceneTransform::random(&mut augmentation_rng(0, epoch, index), &s.objects, 64);
        assert_eq!(draw(3, 17), draw(3, 17));
        let distinct: std::collections::BTreeSet<String> = (0..50).map(|i| format!("{:?}", draw(0, i))).collect();
        assert!(distinct.len() > 40);
        assert_ne!(draw(0, 5), draw(1, 5));
    }

    #[test]
    fn transformed_sample_is_consistent() {
        let s = &tiny_samples(3)[2];
        let same = s.transformed(&SceneTransform::identity(), &AnchorSet::default()).unwrap();
        assert_eq!((same.image.clone(), same.gt, &same.expression), (s.image.clone(), s.gt, &s.expression));
        let t = SceneTransform { flip_x: true, flip_y: true, ..SceneTransform::identity() };
        let f = s.transformed(&t, &AnchorSet::default()).unwrap();
        assert_eq!(f.gt.x_min, 64.0 - s.gt.x_max);
        assert_eq!(f.gt.y_max, 64.0 - s.gt.y_min);
        let target = &f.objects[f.target_object];
        let (cx, cy) = target.bbox.center();
        assert_eq!(f.image.get_pixel(cx as u32, cy as u32).0, target.color.rgb());
    }

    #[test]
    fn recolored_pixels_match_recolored_words() {
        for (i, s) in tiny_samples(20).iter().enumerate() {
            let mut rng = augmentation_rng(5, 0, i);
            let t = SceneTransform::random(&mut rng, &s.objects, 64);
            let a = s.transformed(&t, &AnchorSet::default()).unwrap();
            let target = &a.objects[a.target_object];
            let named = match a.expression.parse::<Expression>().unwrap() {
                Expression::Class { color, .. } | Expression::Sized { color, .. } => color,
                Expression::Relational { color, .. } => color.unwrap_or(target.color),
            };
            assert_eq!(named, target.color, "{} vs {}", a.expression, s.expression);
            assert_eq!(named, t.color(s.objects[s.target_object].color));
            let (cx, cy) = target.bbox.center();
            assert_eq!(a.image.get_pixel(cx as u32, cy as u32).0, named.rgb());
            assert_eq!(a.gt, target.bbox);
        }
    }

    #[test]
    fn same_seed_same_metrics() {
        let data = tiny_samples(4);
        let run = || {
            let cfg = TrainConfig { batch_size: 2, epochs: 2, ..TrainConfig::default() };
            let mut t = Trainer::<f32>::new(tiny_model(), cfg, 16, AnchorSet::default()).unwrap();
            (0..2).map(|_| t.train_epoch(&data).unwrap().without_time()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_bytes_are_stable() {
        let data = tiny_samples(2);
        let cfg = TrainConfig { batch_size: 2, epochs: 1, ..TrainConfig::default() };
        let mut t = Trainer::<f32>::new(tiny_model(), cfg, 16, AnchorSet::default()).unwrap();
        t.train_epoch(&data).unwrap();
        let vocab = crate::dataset::vocabulary();
        let a = encode_checkpoint(&t, &vocab).unwrap();
        let back = decode_checkpoint::<f32>(&a).unwrap();
        assert_eq!(encode_checkpoint(&back, &vocab).unwrap(), a);
        assert_eq!(back.erc_rng, t.erc_rng);
        assert_eq!(back.optimizer, t.optimizer);
        assert_eq!(evaluate(&back.model, &data).unwrap(), evaluate(&t.model, &data).unwrap());
        assert!(decode_checkpoint::<f64>(&a).is_err());
        assert!(decode_checkpoint::<f32>(&a[..a.len() - 1]).is_err());
        let mut wrong = a.clone();
        wrong[8] = 9;
        assert!(matches!(decode_checkpoint::<f32>(&wrong), Err(SogError::Version { found: 9, .. })));
    }

    #[test]
    fn eval_guard_and_determinism() {
        assert!(check_eval_strategy(EdgeVariant::Original).is_ok());
        for v in [EdgeVariant::Erc, EdgeVariant::Random, EdgeVariant::Reverse, EdgeVariant::Average] {
            assert!(check_eval_strategy(v).is_err());
        }
        let data = tiny_samples(3);
        let t = Trainer::<f32>::new(tiny_model(), TrainConfig::default(), 16, AnchorSet::default()).unwrap();
        let a = evaluate(&t.model, &data).unwrap();
        assert_eq!(a, evaluate(&t.model, &data).unwrap());
        assert!((0.0..=1.0).contains(&a.pr));
        assert_eq!(a.records.len(), 3);
    }

    #[test]
    fn planted_outputs_score_perfectly() {
        let data = tiny_samples(10);
        let anchors = AnchorSet::default();
        let preds: Vec<BBox> = data
            .iter()
            .map(|s| {
                let p = planted_prediction::<f64>(&s.target, grid_dims(64, 64));
                select_prediction(&decode_boxes(&p, &anchors).unwrap()).unwrap().bbox
            })
            .collect();
        let gts: Vec<BBox> = data.iter().map(|s| s.gt).collect();
        assert_eq!(crate::dataset::pr_at_threshold(&preds, &gts, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn tiny_model_gradients_match() {
        let data = tiny_samples(1);
        let mut m = Grounder::<f64>::new(tiny_model(), 16, AnchorSet::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let picks = pick_parameters(&m.store, 2, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(picks.len(), 10);
        let err = grad_check(&mut m, &data[0], &picks, &FD_STEPS, Some(5)).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
