//! Synthetic referring-expression corpus: scenes of flat shapes that contain
//! look-alike distractors, expressions that single out one object, rendering,
//! the JSONL manifest, anchor clustering and the Pr@τ metric.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::TokenSequence;
use crate::error::{invalid, Result, SogError};
use crate::head::{iou, AnchorSet, BBox};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FORMAT: &str = "sog-manifest";
pub const BACKGROUND: [u8; 3] = [128, 128, 128];
/// Boxes closer than this many pixels count as touching.
pub const TOUCH_GAP: f64 = 4.0;
const PLACEMENT_RETRIES: usize = 500;
const SCENE_RETRIES: usize = 100;

macro_rules! word_enum {
    ($name:ident { $($var:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($var),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$var => $word),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }

        impl FromStr for $name {
            type Err = SogError;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.word() == s)
                    .ok_or_else(|| invalid!(concat!("unknown ", stringify!($name), " '{}'"), s))
            }
        }
    };
}

word_enum!(Shape { Circle => "circle", Square => "square", Triangle => "triangle" });
word_enum!(Color { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow", Purple => "purple" });
word_enum!(Size { Small => "small", Large => "large" });
word_enum!(Relation {
    LeftOf => "left_of",
    RightOf => "right_of",
    Above => "above",
    Below => "below",
    Touching => "touching",
});

impl Color {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [230, 30, 30],
            Color::Green => [30, 190, 50],
            Color::Blue => [40, 60, 230],
            Color::Yellow => [240, 215, 30],
            Color::Purple => [150, 50, 190],
        }
    }
}

/// Minimum pixel gap between two boxes along either axis.
fn gap(a: &BBox, b: &BBox) -> f64 {
    let dx = (b.x_min - a.x_max).max(a.x_min - b.x_max).max(0.0);
    let dy = (b.y_min - a.y_max).max(a.y_min - b.y_max).max(0.0);
    dx.max(dy)
}

impl Relation {
    /// Whether `a <relation> b` holds geometrically.
    pub fn holds(self, a: &BBox, b: &BBox) -> bool {
        match self {
            Relation::LeftOf => a.x_max <= b.x_min,
            Relation::RightOf => a.x_min >= b.x_max,
            Relation::Above => a.y_max <= b.y_min,
            Relation::Below => a.y_min >= b.y_max,
            Relation::Touching => gap(a, b) <= TOUCH_GAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationEdge {
    pub predicate: Relation,
    pub other: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: usize,
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub bbox: BBox,
    pub relations: Vec<RelationEdge>,
}

/// Every predicate holding from each object to every other one.
fn derive_relations(objects: &mut [ObjectSpec]) {
    let boxes: Vec<BBox> = objects.iter().map(|o| o.bbox).collect();
    let boxes = &boxes;
    for (i, o) in objects.iter_mut().enumerate() {
        o.relations = (0..boxes.len())
            .filter(|&j| j != i)
            .flat_map(|j| {
                Relation::ALL
                    .iter()
                    .filter(move |r| r.holds(&boxes[i], &boxes[j]))
                    .map(move |&r| RelationEdge { predicate: r, other: j })
            })
            .collect();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub hard_fraction: f64,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            image_size: 128,
            hard_fraction: 0.6,
            min_objects: 3,
            max_objects: 6,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects < 3 || self.max_objects > 8 || self.min_objects > self.max_objects {
            return Err(invalid!(
                "object count range {}..={} must lie within 3..=8",
                self.min_objects,
                self.max_objects
            ));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return Err(invalid!("hard fraction {} outside [0, 1]", self.hard_fraction));
        }
        if self.image_size < 64 || self.image_size % 32 != 0 {
            return Err(invalid!("image size {} must be a multiple of 32 and at least 64", self.image_size));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }
}

/// Side length range in pixels for an object size at a given image size.
fn side_range(size: Size, image: usize) -> (usize, usize) {
    let s = image as f64;
    let (lo, hi) = match size {
        Size::Small => (0.09, 0.13),
        Size::Large => (0.18, 0.25),
    };
    ((lo * s).round() as usize, (hi * s).round() as usize)
}

/// Random objects without overlap; in hard mode object `target` has a
/// same-shape, same-color twin.
pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &GenConfig, hard: bool) -> Result<(Vec<ObjectSpec>, usize)> {
    cfg.validate()?;
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let pick = |rng: &mut R| {
        (
            *Shape::ALL.choose(rng).expect("non-empty"),
            *Color::ALL.choose(rng).expect("non-empty"),
            *Size::ALL.choose(rng).expect("non-empty"),
        )
    };
    let mut attrs: Vec<(Shape, Color, Size)> = (0..n).map(|_| pick(rng)).collect();
    if hard {
        let (s, c, _) = attrs[0];
        attrs[1].0 = s;
        attrs[1].1 = c;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let target = order.iter().position(|&o| o == 0).expect("target present");
    let attrs: Vec<_> = order.iter().map(|&o| attrs[o]).collect();

    let img = cfg.image_size;
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(n);
    for (id, &(shape, color, size)) in attrs.iter().enumerate() {
        let (lo, hi) = side_range(size, img);
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let side = rng.gen_range(lo..=hi);
            let (w, h) = match shape {
                Shape::Triangle => (side, ((side as f64) * 0.9).round() as usize),
                _ => (side, side),
            };
            let x = rng.gen_range(0..=img - w) as f64;
            let y = rng.gen_range(0..=img - h) as f64;
            let b = BBox { x_min: x, y_min: y, x_max: x + w as f64, y_max: y + h as f64 };
            if objects.iter().all(|o| gap(&o.bbox, &b) >= 1.0) {
                placed = Some(b);
                break;
            }
        }
        let bbox = placed.ok_or_else(|| SogError::Generation(format!("could not place object {id} of {n}")))?;
        objects.push(ObjectSpec { id, shape, color, size, bbox, relations: Vec::new() });
    }
    derive_relations(&mut objects);
    Ok((objects, target))
}

/// Template semantics of a referring expression.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expression {
    /// `<color> <shape>`
    Class { color: Color, shape: Shape },
    /// `<size> <color> <shape>`
    Sized { size: Size, color: Color, shape: Shape },
    /// `[<color>] <shape> <relation> the <color> <shape>`; the anchor
    /// description must match exactly one object.
    Relational { color: Option<Color>, shape: Shape, relation: Relation, anchor_color: Color, anchor_shape: Shape },
}

impl Expression {
    pub fn len(&self) -> usize {
        match self {
            Expression::Class { .. } => 2,
            Expression::Sized { .. } => 3,
            Expression::Relational { color, .. } => 5 + color.is_some() as usize,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Ids of every object satisfying the expression.
    pub fn referents(&self, objects: &[ObjectSpec]) -> Vec<usize> {
        match *self {
            Expression::Class { color, shape } => {
                objects.iter().filter(|o| o.color == color && o.shape == shape).map(|o| o.id).collect()
            }
            Expression::Sized { size, color, shape } => objects
                .iter()
                .filter(|o| o.size == size && o.color == color && o.shape == shape)
                .map(|o| o.id)
                .collect(),
            Expression::Relational { color, shape, relation, anchor_color, anchor_shape } => {
                let anchors: Vec<&ObjectSpec> =
                    objects.iter().filter(|o| o.color == anchor_color && o.shape == anchor_shape).collect();
                let [anchor] = anchors.as_slice() else { return Vec::new() };
                objects
                    .iter()
                    .filter(|o| o.id != anchor.id && o.shape == shape && color.map_or(true, |c| o.color == c))
                    .filter(|o| relation.holds(&o.bbox, &anchor.bbox))
                    .map(|o| o.id)
                    .collect()
            }
        }
    }

    pub fn is_unique_for(&self, objects: &[ObjectSpec], target: usize) -> bool {
        self.referents(objects) == [target]
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expression::Class { color, shape } => write!(f, "{color} {shape}"),
            Expression::Sized { size, color, shape } => write!(f, "{size} {color} {shape}"),
            Expression::Relational { color, shape, relation, anchor_color, anchor_shape } => {
                if let Some(c) = color {
                    write!(f, "{c} ")?;
                }
                write!(f, "{shape} {relation} the {anchor_color} {anchor_shape}")
            }
        }
    }
}

impl FromStr for Expression {
    type Err = SogError;

    fn from_str(s: &str) -> Result<Self> {
        let t: Vec<&str> = s.split_whitespace().collect();
        match t.as_slice() {
            [c, sh] => Ok(Expression::Class { color: c.parse()?, shape: sh.parse()? }),
            [sz, c, sh] => Ok(Expression::Sized { size: sz.parse()?, color: c.parse()?, shape: sh.parse()? }),
            [sh, r, "the", ac, ash] => Ok(Expression::Relational {
                color: None,
                shape: sh.parse()?,
                relation: r.parse()?,
                anchor_color: ac.parse()?,
                anchor_shape: ash.parse()?,
            }),
            [c, sh, r, "the", ac, ash] => Ok(Expression::Relational {
                color: Some(c.parse()?),
                shape: sh.parse()?,
                relation: r.parse()?,
                anchor_color: ac.parse()?,
                anchor_shape: ash.parse()?,
            }),
            _ => Err(invalid!("expression '{s}' matches no template")),
        }
    }
}

/// Shortest expression that refers to `target` alone; among equally short
/// candidates one is drawn at random.
pub fn generate_expression<R: Rng + ?Sized>(objects: &[ObjectSpec], target: usize, rng: &mut R) -> Result<Expression> {
    let t = objects.get(target).ok_or_else(|| invalid!("target {target} not in scene of {}", objects.len()))?;
    let mut candidates = vec![
        Expression::Class { color: t.color, shape: t.shape },
        Expression::Sized { size: t.size, color: t.color, shape: t.shape },
    ];
    for a in objects.iter().filter(|o| o.id != target) {
        for &relation in Relation::ALL {
            if !relation.holds(&t.bbox, &a.bbox) {
                continue;
            }
            for color in [None, Some(t.color)] {
                candidates.push(Expression::Relational {
                    color,
                    shape: t.shape,
                    relation,
                    anchor_color: a.color,
                    anchor_shape: a.shape,
                });
            }
        }
    }
    candidates.retain(|e| e.is_unique_for(objects, target));
    let shortest = candidates
        .iter()
        .map(Expression::len)
        .min()
        .ok_or_else(|| SogError::Generation(format!("no unique expression for object {target}")))?;
    candidates.retain(|e| e.len() == shortest);
    Ok(candidates.swap_remove(rng.gen_range(0..candidates.len())))
}

/// Label-preserving scene edit: a bijection on colors, optional mirror
/// flips and a whole-scene translation that keeps every object inside the
/// image. Attribute equalities and relations map onto each other, so an
/// expression that singles out an object still does after the edit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneTransform {
    /// `colors[c as usize]` replaces color `c`.
    pub colors: [Color; 5],
    pub flip_x: bool,
    pub flip_y: bool,
    /// Pixel offset applied after the flips.
    pub shift: (f64, f64),
}

impl SceneTransform {
    pub fn identity() -> Self {
        Self {
            colors: [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple],
            flip_x: false,
            flip_y: false,
            shift: (0.0, 0.0),
        }
    }

    /// Uniform over color bijections, flips and the integer shifts that keep
    /// the flipped scene inside a `size`-pixel image.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, objects: &[ObjectSpec], size: usize) -> Self {
        let mut t = Self::identity();
        t.colors.shuffle(rng);
        t.flip_x = rng.gen();
        t.flip_y = rng.gen();
        let flipped = t.apply_objects(objects, size);
        let s = size as f64;
        let span = |lo: f64, hi: f64, rng: &mut R| -> f64 {
            let (a, b) = (-lo.floor() as i64, (s - hi).floor() as i64);
            if a < b {
                rng.gen_range(a..=b) as f64
            } else {
                0.0
            }
        };
        let fold = |f: fn(&BBox) -> f64, pick: fn(f64, f64) -> f64, init: f64| {
            flipped.iter().map(|o| f(&o.bbox)).fold(init, pick)
        };
        let (x0, x1) = (fold(|b| b.x_min, f64::min, s), fold(|b| b.x_max, f64::max, 0.0));
        let (y0, y1) = (fold(|b| b.y_min, f64::min, s), fold(|b| b.y_max, f64::max, 0.0));
        t.shift = (span(x0, x1, rng), span(y0, y1, rng));
        t
    }

    pub fn color(&self, c: Color) -> Color {
        self.colors[c as usize]
    }

    pub fn relation(&self, r: Relation) -> Relation {
        match r {
            Relation::LeftOf if self.flip_x => Relation::RightOf,
            Relation::RightOf if self.flip_x => Relation::LeftOf,
            Relation::Above if self.flip_y => Relation::Below,
            Relation::Below if self.flip_y => Relation::Above,
            other => other,
        }
    }

    /// Objects of a `size`-pixel scene after the edit, relations recomputed.
    pub fn apply_objects(&self, objects: &[ObjectSpec], size: usize) -> Vec<ObjectSpec> {
        let s = size as f64;
        let mut out: Vec<ObjectSpec> = objects
            .iter()
            .map(|o| {
                let mut b = o.bbox;
                if self.flip_x {
                    (b.x_min, b.x_max) = (s - b.x_max, s - b.x_min);
                }
                if self.flip_y {
                    (b.y_min, b.y_max) = (s - b.y_max, s - b.y_min);
                }
                let (dx, dy) = self.shift;
                b = BBox { x_min: b.x_min + dx, y_min: b.y_min + dy, x_max: b.x_max + dx, y_max: b.y_max + dy };
                ObjectSpec { color: self.color(o.color), bbox: b, relations: Vec::new(), ..o.clone() }
            })
            .collect();
        derive_relations(&mut out);
        out
    }

    pub fn apply_expression(&self, e: &Expression) -> Expression {
        match *e {
            Expression::Class { color, shape } => Expression::Class { color: self.color(color), shape },
            Expression::Sized { size, color, shape } => Expression::Sized { size, color: self.color(color), shape },
            Expression::Relational { color, shape, relation, anchor_color, anchor_shape } => Expression::Relational {
                color: color.map(|c| self.color(c)),
                shape,
                relation: self.relation(relation),
                anchor_color: self.color(anchor_color),
                anchor_shape,
            },
        }
    }
}

/// Flat-shaded objects on a gray background. Pixel `(x, y)` is covered when
/// its center lies inside the shape.
pub fn render(objects: &[ObjectSpec], size: usize) -> RgbImage {
    let mut img = RgbImage::from_pixel(size as u32, size as u32, Rgb(BACKGROUND));
    for o in objects {
        let b = o.bbox;
        let (cx, cy) = b.center();
        let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
        let x0 = b.x_min.max(0.0) as u32;
        let y0 = b.y_min.max(0.0) as u32;
        let x1 = (b.x_max.min(size as f64)).ceil() as u32;
        let y1 = (b.y_max.min(size as f64)).ceil() as u32;
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = match o.shape {
                    Shape::Square => true,
                    Shape::Circle => ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0,
                    Shape::Triangle => {
                        // apex at top center, base along the bottom edge
                        let t = (py - b.y_min) / b.height();
                        (px - cx).abs() <= t * rx
                    }
                };
                if inside {
                    img.put_pixel(x, y, Rgb(o.color.rgb()));
                }
            }
        }
    }
    img
}

/// `[3, H, W]` tensor with values in `[-1, 1]`; the gray background maps
/// to (almost) zero so only objects drive the trunk.
pub fn image_to_tensor<F: Scalar>(img: &RgbImage) -> Tensor<F> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![F::zero(); 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = F::of(p.0[c] as f64 / 127.5 - 1.0);
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn load_image<F: Scalar>(path: &Path) -> Result<Tensor<F>> {
    let img = image::open(path)?.to_rgb8();
    Ok(image_to_tensor(&img))
}

/// Fixed token inventory: colors, shapes, sizes, relations and "the".
pub fn vocabulary() -> Vec<String> {
    let mut v: Vec<String> = Vec::new();
    v.extend(Color::ALL.iter().map(|c| c.word().to_string()));
    v.extend(Shape::ALL.iter().map(|c| c.word().to_string()));
    v.extend(Size::ALL.iter().map(|c| c.word().to_string()));
    v.extend(Relation::ALL.iter().map(|c| c.word().to_string()));
    v.push("the".to_string());
    v
}

/// Token ids for an expression; fails on the first unknown word.
pub fn tokenize(expression: &str, vocab: &[String]) -> Result<TokenSequence> {
    let ids = expression
        .split_whitespace()
        .map(|w| vocab.iter().position(|v| v == w).ok_or_else(|| invalid!("token '{w}' is not in the vocabulary")))
        .collect::<Result<Vec<_>>>()?;
    TokenSequence::new(ids, vocab.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = SogError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid!("unknown split '{s}' (valid: train, val, test)"))
    }
}

/// Per-sample seed derived from the corpus seed (splitmix64 finalizer).
pub fn sample_seed(corpus_seed: u64, index: u64) -> u64 {
    let mut z = corpus_seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub image_size: usize,
    pub vocabulary: Vec<String>,
    pub anchors: AnchorSet,
    pub generator: GenConfig,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub index: usize,
    pub split: Split,
    pub seed: u64,
    pub hard: bool,
    /// Relative to the manifest's directory.
    pub image: String,
    pub expression: String,
    pub target: usize,
    pub gt_box: BBox,
    pub objects: Vec<ObjectSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Structural checks plus re-verification of every expression.
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.format != MANIFEST_FORMAT {
            return Err(SogError::Validation(format!("not a manifest (format '{}')", h.format)));
        }
        if h.samples != self.records.len() {
            return Err(SogError::Validation(format!(
                "header announces {} samples, found {}",
                h.samples,
                self.records.len()
            )));
        }
        h.anchors.validate().map_err(|e| SogError::Validation(e.to_string()))?;
        let mut seeds = std::collections::BTreeMap::new();
        for r in &self.records {
            for w in r.expression.split_whitespace() {
                if !h.vocabulary.iter().any(|v| v == w) {
                    return Err(SogError::Validation(format!("sample {}: token '{w}' not in vocabulary", r.index)));
                }
            }
            let expr: Expression = r
                .expression
                .parse()
                .map_err(|e: SogError| SogError::Validation(format!("sample {}: {e}", r.index)))?;
            if !expr.is_unique_for(&r.objects, r.target) {
                return Err(SogError::Validation(format!(
                    "sample {}: '{}' does not single out object {}",
                    r.index, r.expression, r.target
                )));
            }
            if r.objects.get(r.target).map(|o| o.bbox) != Some(r.gt_box) {
                return Err(SogError::Validation(format!("sample {}: gt box differs from target box", r.index)));
            }
            if let Some(prev) = seeds.insert(r.seed, r.split) {
                if prev != r.split {
                    return Err(SogError::Validation(format!("seed {} appears in two splits", r.seed)));
                }
            }
        }
        Ok(())
    }
}

pub fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &m.header)?;
    w.write_all(b"\n")?;
    for r in &m.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn parse_err(path: &Path, line: usize, e: serde_json::Error) -> SogError {
    let msg = e.to_string();
    let field = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.contains("field"))
        .unwrap_or("record")
        .to_string();
    SogError::Parse { path: path.to_path_buf(), line, field, message: msg }
}

/// Read and validate a manifest; any defect fails the whole read.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let first = lines.next().transpose()?.ok_or_else(|| SogError::Parse {
        path: path.to_path_buf(),
        line: 1,
        field: "header".into(),
        message: "empty file".into(),
    })?;
    let version: serde_json::Value = serde_json::from_str(&first).map_err(|e| parse_err(path, 1, e))?;
    match version.get("version").and_then(serde_json::Value::as_u64) {
        Some(v) if v as u32 != MANIFEST_VERSION => {
            return Err(SogError::Version { what: "manifest", found: v as u32, expected: MANIFEST_VERSION })
        }
        _ => {}
    }
    let header: ManifestHeader = serde_json::from_value(version).map_err(|e| parse_err(path, 1, e))?;
    let mut records = Vec::with_capacity(header.samples);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| parse_err(path, i + 2, e))?);
    }
    if records.len() != header.samples {
        return Err(SogError::Parse {
            path: path.to_path_buf(),
            line: records.len() + 2,
            field: "samples".into(),
            message: format!("truncated: expected {} records, found {}", header.samples, records.len()),
        });
    }
    let m = Manifest { header, records };
    m.validate()?;
    Ok(m)
}

/// One generated sample before persistence.
#[derive(Clone, Debug)]
pub struct GeneratedSample {
    pub record: SampleRecord,
    pub image: RgbImage,
}

/// Deterministic sample `index` of the corpus.
pub fn generate_sample(cfg: &GenConfig, index: usize, split: Split) -> Result<GeneratedSample> {
    let seed = sample_seed(cfg.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hard = rng.gen::<f64>() < cfg.hard_fraction;
    let mut last_err = None;
    for _ in 0..SCENE_RETRIES {
        let attempt = generate_scene(&mut rng, cfg, hard)
            .and_then(|(objects, target)| generate_expression(&objects, target, &mut rng).map(|e| (objects, target, e)));
        match attempt {
            Ok((objects, target, expr)) => {
                let image = render(&objects, cfg.image_size);
                let record = SampleRecord {
                    index,
                    split,
                    seed,
                    hard,
                    image: format!("images/{}_{index:05}.png", split.name()),
                    expression: expr.to_string(),
                    target,
                    gt_box: objects[target].bbox,
                    objects,
                };
                return Ok(GeneratedSample { record, image });
            }
            Err(e @ SogError::Generation(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| SogError::Generation(format!("sample {index} failed"))))
}

/// k-means with `1 - IoU` distance on `[w, h]` pairs (boxes sharing a
/// center), k-means++ seeding.
pub fn kmeans_anchors(sizes: &[[f64; 2]], k: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    if sizes.is_empty() || k == 0 {
        return Err(invalid!("k-means needs at least one box and one cluster"));
    }
    let d = |a: [f64; 2], b: [f64; 2]| {
        let inter = a[0].min(b[0]) * a[1].min(b[1]);
        1.0 - inter / (a[0] * a[1] + b[0] * b[1] - inter)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![sizes[rng.gen_range(0..sizes.len())]];
    while centers.len() < k {
        let w: Vec<f64> = sizes
            .iter()
            .map(|&s| centers.iter().map(|&c| d(s, c)).fold(f64::INFINITY, f64::min).powi(2))
            .collect();
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            centers.push(centers[centers.len() - 1]);
            continue;
        }
        let mut u = rng.gen::<f64>() * total;
        let mut pick = sizes.len() - 1;
        for (i, &wi) in w.iter().enumerate() {
            if u < wi {
                pick = i;
                break;
            }
            u -= wi;
        }
        centers.push(sizes[pick]);
    }
    for _ in 0..100 {
        let mut sum = vec![[0.0; 2]; k];
        let mut count = vec![0usize; k];
        for &s in sizes {
            let c = (0..k).min_by(|&a, &b| d(s, centers[a]).total_cmp(&d(s, centers[b]))).expect("k > 0");
            sum[c][0] += s[0];
            sum[c][1] += s[1];
            count[c] += 1;
        }
        let mut moved = false;
        for c in 0..k {
            if count[c] > 0 {
                let n = [sum[c][0] / count[c] as f64, sum[c][1] / count[c] as f64];
                moved |= n != centers[c];
                centers[c] = n;
            }
        }
        if !moved {
            break;
        }
    }
    centers.sort_by(|a, b| (a[0] * a[1]).total_cmp(&(b[0] * b[1])));
    Ok(centers)
}

/// Generate, render and persist a corpus under `out_dir`; returns the
/// manifest path.
pub fn generate_corpus(cfg: &GenConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    fs::create_dir_all(out_dir.join("images"))?;
    let mut records = Vec::with_capacity(cfg.total());
    let bounds = [(Split::Train, cfg.n_train), (Split::Val, cfg.n_val), (Split::Test, cfg.n_test)];
    let mut index = 0;
    for (split, n) in bounds {
        for _ in 0..n {
            let s = generate_sample(cfg, index, split)?;
            s.image.save(out_dir.join(&s.record.image))?;
            records.push(s.record);
            index += 1;
        }
    }
    let train_sizes: Vec<[f64; 2]> =
        records.iter().filter(|r| r.split == Split::Train).map(|r| [r.gt_box.width(), r.gt_box.height()]).collect();
    let anchors = if train_sizes.is_empty() {
        AnchorSet::default()
    } else {
        AnchorSet::from_sizes(&kmeans_anchors(&train_sizes, 9, cfg.seed)?)?
    };
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        image_size: cfg.image_size,
        vocabulary: vocabulary(),
        anchors,
        generator: cfg.clone(),
        samples: records.len(),
    };
    let m = Manifest { header, records };
    m.validate()?;
    let path = out_dir.join("manifest.jsonl");
    write_manifest(&path, &m)?;
    Ok(path)
}

/// Fraction of predictions with IoU at least `tau` against their ground truth.
pub fn pr_at_threshold(preds: &[BBox], gts: &[BBox], tau: f64) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(invalid!("{} predictions for {} ground-truth boxes", preds.len(), gts.len()));
    }
    if preds.is_empty() {
        return Err(invalid!("no predictions to score"));
    }
    let hits = preds.iter().zip(gts).filter(|(p, g)| iou(p, g) >= tau).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Distinct per-sample seeds of each split.
pub fn split_seeds(m: &Manifest) -> [BTreeSet<u64>; 3] {
    Split::ALL.map(|s| m.split(s).map(|r| r.seed).collect())
}
