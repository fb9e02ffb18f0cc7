//! Procedural driving-like scenes with exact ground truth.
//!
//! A scene is a sky band, a skyline of building and vegetation blocks, and a
//! road band split into a directly drivable lane flanked by alternative lanes
//! and sidewalks. Objects are axis-aligned filled rectangles that never
//! overlap, so each box annotation is exactly the extent of its shape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::Task;
use crate::tensor::Tensor;

pub const IGNORE_INDEX: u8 = 255;

/// Semantic class names the layout painter needs to find in the vocabulary.
pub const LAYOUT_CLASSES: [&str; 5] = ["sky", "building", "vegetation", "sidewalk", "road"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// `(height, width)` in pixels; both multiples of 32.
    pub image_size: (usize, usize),
    /// Inclusive `(min, max)` object count per scene.
    pub num_objects: (usize, usize),
    pub detection_classes: Vec<String>,
    pub semantic_classes: Vec<String>,
    pub drivable_classes: Vec<String>,
    /// Which entry of `drivable_classes` is the background.
    pub drivable_background: String,
    /// Semantic class painted for each detection class (same length).
    pub object_semantic: Vec<String>,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Self {
            image_size: (64, 64),
            num_objects: (1, 4),
            detection_classes: s(&["car", "truck", "bus", "pedestrian", "rider", "traffic sign"]),
            semantic_classes: s(&[
                "road",
                "sidewalk",
                "building",
                "vegetation",
                "sky",
                "vehicle",
                "person",
                "traffic sign",
            ]),
            drivable_classes: s(&["directly drivable", "alternatively drivable", "background"]),
            drivable_background: "background".into(),
            object_semantic: s(&["vehicle", "vehicle", "vehicle", "person", "person", "traffic sign"]),
            rng_seed: 0,
        }
    }
}

fn check_vocab(name: &str, v: &[String]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Config(format!("{name} must not be empty")));
    }
    if v.len() >= IGNORE_INDEX as usize {
        return Err(Error::Config(format!("{name} has {} classes; at most 254 allowed", v.len())));
    }
    for (i, a) in v.iter().enumerate() {
        if v[..i].contains(a) {
            return Err(Error::Config(format!("{name} lists `{a}` twice")));
        }
    }
    Ok(())
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("image size {h}x{w} must be a positive multiple of 32")));
        }
        if self.num_objects.0 > self.num_objects.1 {
            return Err(Error::Config(format!("num_objects range {:?} is empty", self.num_objects)));
        }
        check_vocab("detection_classes", &self.detection_classes)?;
        check_vocab("semantic_classes", &self.semantic_classes)?;
        check_vocab("drivable_classes", &self.drivable_classes)?;
        let bg = self.drivable_classes.iter().filter(|c| **c == self.drivable_background).count();
        if bg != 1 {
            return Err(Error::Config(format!(
                "drivable_classes must contain the background `{}` exactly once",
                self.drivable_background
            )));
        }
        if self.drivable_classes.len() < 2 {
            return Err(Error::Config("drivable_classes needs at least one drivable class".into()));
        }
        if self.object_semantic.len() != self.detection_classes.len() {
            return Err(Error::Config("object_semantic must map every detection class".into()));
        }
        for name in LAYOUT_CLASSES.iter().copied().chain(self.object_semantic.iter().map(String::as_str)) {
            if !self.semantic_classes.iter().any(|c| c == name) {
                return Err(Error::Config(format!("semantic_classes is missing `{name}`")));
            }
        }
        Ok(())
    }

    pub fn vocabulary(&self, task: Task) -> &[String] {
        match task {
            Task::Det => &self.detection_classes,
            Task::Sem => &self.semantic_classes,
            Task::Driv => &self.drivable_classes,
        }
    }

    pub fn num_classes(&self, task: Task) -> usize {
        self.vocabulary(task).len()
    }

    fn sem_index(&self, name: &str) -> u8 {
        self.semantic_classes.iter().position(|c| c == name).expect("validated vocabulary") as u8
    }

    /// Drivable indices `(direct, alternative, background)`. With more than
    /// two drivable classes the first two non-background entries are used.
    fn driv_indices(&self) -> (u8, u8, u8) {
        let bg = self.drivable_classes.iter().position(|c| *c == self.drivable_background).unwrap();
        let mut others = (0..self.drivable_classes.len()).filter(|&i| i != bg);
        let direct = others.next().unwrap();
        let alt = others.next().unwrap_or(direct);
        (direct as u8, alt as u8, bg as u8)
    }
}

/// Class names for `task` under `spec`; list order defines class indices.
pub fn class_vocabulary(spec: &SceneSpec, task: Task) -> Vec<String> {
    spec.vocabulary(task).to_vec()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxAnn {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class: usize,
}

impl BoxAnn {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn iou(&self, other: &BoxAnn) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Nearest-neighbour downsampling that keeps pixel `(f·y, f·x)`.
    pub fn downsample(&self, factor: usize) -> Mask {
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Mask::filled(h, w, 0);
        for y in 0..h {
            for x in 0..w {
                out.set(y, x, self.get(y * factor, x * factor));
            }
        }
        out
    }

    pub fn upsample(&self, factor: usize) -> Mask {
        let (h, w) = (self.height * factor, self.width * factor);
        let mut out = Mask::filled(h, w, 0);
        for y in 0..h {
            for x in 0..w {
                out.set(y, x, self.get(y / factor, x / factor));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    GroundTruth,
    Pseudo { teacher_digest: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotated<T> {
    pub value: T,
    pub provenance: Provenance,
}

impl<T> Annotated<T> {
    pub fn ground_truth(value: T) -> Self {
        Self { value, provenance: Provenance::GroundTruth }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: usize,
    /// `(H, W, 3)` RGB in `[0, 1]`, every value exactly representable as `f32`.
    pub image: Tensor,
    pub boxes: Option<Annotated<Vec<BoxAnn>>>,
    pub semantic_mask: Option<Annotated<Mask>>,
    pub drivable_mask: Option<Annotated<Mask>>,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    /// `(det, sem, driv)` availability; true iff the annotation is present.
    pub fn availability(&self) -> [bool; 3] {
        [self.boxes.is_some(), self.semantic_mask.is_some(), self.drivable_mask.is_some()]
    }

    pub fn has(&self, task: Task) -> bool {
        self.availability()[task.index()]
    }

    pub fn provenance(&self, task: Task) -> Option<&Provenance> {
        match task {
            Task::Det => self.boxes.as_ref().map(|a| &a.provenance),
            Task::Sem => self.semantic_mask.as_ref().map(|a| &a.provenance),
            Task::Driv => self.drivable_mask.as_ref().map(|a| &a.provenance),
        }
    }

    pub fn seg_mask(&self, task: Task) -> Option<&Mask> {
        match task {
            Task::Sem => self.semantic_mask.as_ref().map(|a| &a.value),
            Task::Driv => self.drivable_mask.as_ref().map(|a| &a.value),
            Task::Det => None,
        }
    }

    pub fn drop_annotation(&mut self, task: Task) {
        match task {
            Task::Det => self.boxes = None,
            Task::Sem => self.semantic_mask = None,
            Task::Driv => self.drivable_mask = None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Building,
    Vegetation,
}

/// A skyline column `[x0, x1)` occupied from row `top` down to the horizon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub x0: usize,
    pub x1: usize,
    pub top: usize,
    pub kind: BlockKind,
}

/// Integer rectangle `[x1, x2) × [y1, y2)` of detection class `class`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectShape {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
    pub class: usize,
}

impl ObjectShape {
    fn overlaps(&self, o: &ObjectShape) -> bool {
        self.x1 < o.x2 && o.x1 < self.x2 && self.y1 < o.y2 && o.y1 < self.y2
    }
}

/// Everything needed to paint a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub height: usize,
    pub width: usize,
    /// First row of the road band.
    pub horizon: usize,
    pub blocks: Vec<Block>,
    /// Road columns `[road.0, road.1)`; sidewalk elsewhere below the horizon.
    pub road: (usize, usize),
    /// Directly drivable columns inside the road.
    pub lane: (usize, usize),
    pub objects: Vec<ObjectShape>,
    pub brightness: f64,
    pub noise_seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix(seed ^ splitmix(stream))
}

/// Size range `(w_lo, w_hi, h_lo, h_hi)` by the painted semantic class.
fn object_size(sem_name: &str, w: usize) -> (usize, usize, usize, usize) {
    let u = (w / 64).max(1);
    match sem_name {
        "vehicle" => (8 * u, 16 * u, 6 * u, 11 * u),
        "person" => (3 * u, 5 * u, 7 * u, 12 * u),
        "traffic sign" => (4 * u, 6 * u, 4 * u, 6 * u),
        _ => (4 * u, 10 * u, 4 * u, 10 * u),
    }
}

pub fn scene_layout(spec: &SceneSpec, index: usize) -> Result<SceneLayout> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.rng_seed, index as u64));

    let horizon = rng.random_range(h * 9 / 20..=h * 6 / 10);
    let mut blocks = Vec::new();
    let mut x = 0;
    while x < w {
        let width = rng.random_range(w / 8..=w / 4).min(w - x);
        let kind = if rng.random_bool(0.6) { BlockKind::Building } else { BlockKind::Vegetation };
        let top = rng.random_range(h / 8..horizon.saturating_sub(2).max(h / 8 + 1));
        blocks.push(Block { x0: x, x1: x + width, top, kind });
        x += width;
    }
    let road_l = rng.random_range(0..=w / 8);
    let road_r = w - rng.random_range(0..=w / 8);
    let lane_w = rng.random_range((road_r - road_l) / 4..=(road_r - road_l) / 2);
    let lane_l = rng.random_range(road_l + 1..road_r - lane_w);
    let lane = (lane_l, lane_l + lane_w);

    let n_obj = rng.random_range(spec.num_objects.0..=spec.num_objects.1);
    let mut objects: Vec<ObjectShape> = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        for _attempt in 0..64 {
            let class = rng.random_range(0..spec.detection_classes.len());
            let (wl, wh, hl, hh) = object_size(&spec.object_semantic[class], w);
            let ow = rng.random_range(wl..=wh).min(w);
            let oh = rng.random_range(hl..=hh).min(h);
            let x1 = rng.random_range(0..=w - ow);
            let y1 = if spec.object_semantic[class] == "traffic sign" {
                rng.random_range(h / 8..=horizon.saturating_sub(oh).max(h / 8))
            } else {
                let lo = horizon.saturating_sub(oh / 2);
                rng.random_range(lo.min(h - oh)..=h - oh)
            };
            let cand = ObjectShape { x1, y1, x2: x1 + ow, y2: y1 + oh, class };
            if !objects.iter().any(|o| o.overlaps(&cand)) {
                objects.push(cand);
                break;
            }
        }
    }
    Ok(SceneLayout {
        height: h,
        width: w,
        horizon,
        blocks,
        road: (road_l, road_r),
        lane,
        objects,
        brightness: rng.random_range(0.85..1.15),
        noise_seed: rng.random(),
    })
}

/// Paints the semantic and drivable masks of a layout.
pub fn rasterize_masks(spec: &SceneSpec, layout: &SceneLayout) -> (Mask, Mask) {
    let (h, w) = (layout.height, layout.width);
    let sky = spec.sem_index("sky");
    let road = spec.sem_index("road");
    let sidewalk = spec.sem_index("sidewalk");
    let (direct, alt, bg) = spec.driv_indices();
    let mut sem = Mask::filled(h, w, sky);
    let mut driv = Mask::filled(h, w, bg);
    for b in &layout.blocks {
        let cls = spec.sem_index(match b.kind {
            BlockKind::Building => "building",
            BlockKind::Vegetation => "vegetation",
        });
        for y in b.top..layout.horizon {
            for x in b.x0..b.x1 {
                sem.set(y, x, cls);
            }
        }
    }
    for y in layout.horizon..h {
        for x in 0..w {
            if x >= layout.road.0 && x < layout.road.1 {
                sem.set(y, x, road);
                driv.set(y, x, if x >= layout.lane.0 && x < layout.lane.1 { direct } else { alt });
            } else {
                sem.set(y, x, sidewalk);
            }
        }
    }
    for o in &layout.objects {
        let cls = spec.sem_index(&spec.object_semantic[o.class]);
        for y in o.y1..o.y2 {
            for x in o.x1..o.x2 {
                sem.set(y, x, cls);
            }
        }
    }
    (sem, driv)
}

fn base_color(name: &str) -> [f64; 3] {
    match name {
        "sky" => [0.55, 0.75, 0.95],
        "building" => [0.60, 0.45, 0.40],
        "vegetation" => [0.25, 0.60, 0.25],
        "sidewalk" => [0.75, 0.72, 0.65],
        "road" => [0.35, 0.35, 0.38],
        _ => [0.5, 0.5, 0.5],
    }
}

fn object_color(class: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.85, 0.10, 0.10],
        [0.10, 0.20, 0.85],
        [0.95, 0.80, 0.10],
        [0.90, 0.40, 0.80],
        [0.10, 0.85, 0.80],
        [0.95, 0.55, 0.05],
        [0.50, 0.10, 0.60],
        [0.05, 0.05, 0.05],
    ];
    PALETTE[class % PALETTE.len()]
}

fn render_image(spec: &SceneSpec, layout: &SceneLayout, sem: &Mask, driv: &Mask) -> Tensor {
    let (h, w) = (layout.height, layout.width);
    let mut rng = ChaCha8Rng::seed_from_u64(layout.noise_seed);
    let (direct, _, _) = spec.driv_indices();
    let mut object_at = vec![usize::MAX; h * w];
    for o in &layout.objects {
        for y in o.y1..o.y2 {
            for x in o.x1..o.x2 {
                object_at[y * w + x] = o.class;
            }
        }
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let mut c = if object_at[y * w + x] != usize::MAX {
                object_color(object_at[y * w + x])
            } else {
                base_color(&spec.semantic_classes[sem.get(y, x) as usize])
            };
            if object_at[y * w + x] == usize::MAX && driv.get(y, x) == direct {
                c[0] += 0.12;
                c[2] -= 0.05;
            }
            for v in c {
                let noisy = v * layout.brightness + rng.random_range(-0.04..0.04);
                data.push(noisy.clamp(0.0, 1.0) as f32 as f64);
            }
        }
    }
    Tensor::new([h, w, 3], data)
}

/// Deterministic, fully annotated scene number `index`.
pub fn generate_scene(spec: &SceneSpec, index: usize) -> Result<ImageSample> {
    let layout = scene_layout(spec, index)?;
    let (sem, driv) = rasterize_masks(spec, &layout);
    let image = render_image(spec, &layout, &sem, &driv);
    let boxes = layout
        .objects
        .iter()
        .map(|o| BoxAnn { x1: o.x1 as f64, y1: o.y1 as f64, x2: o.x2 as f64, y2: o.y2 as f64, class: o.class })
        .collect();
    Ok(ImageSample {
        id: index,
        image,
        boxes: Some(Annotated::ground_truth(boxes)),
        semantic_mask: Some(Annotated::ground_truth(sem)),
        drivable_mask: Some(Annotated::ground_truth(driv)),
    })
}

pub fn generate_scenes(spec: &SceneSpec, range: std::ops::Range<usize>) -> Result<Vec<ImageSample>> {
    range.map(|i| generate_scene(spec, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_inputs_same_sample() {
        let spec = SceneSpec::default();
        let a = generate_scene(&spec, 0).unwrap();
        let b = generate_scene(&spec, 0).unwrap();
        assert!(a.image.bit_eq(&b.image));
        assert_eq!(a.boxes, b.boxes);
        assert_eq!(a.semantic_mask, b.semantic_mask);
        assert_ne!(generate_scene(&spec, 1).unwrap().image, a.image);
    }

    #[test]
    fn zero_objects_still_available() {
        let spec = SceneSpec { num_objects: (0, 0), ..SceneSpec::default() };
        let s = generate_scene(&spec, 3).unwrap();
        assert!(s.boxes.as_ref().unwrap().value.is_empty());
        assert_eq!(s.availability(), [true, true, true]);
    }

    #[test]
    fn rejects_bad_specs() {
        let bad_size = SceneSpec { image_size: (48, 64), ..SceneSpec::default() };
        assert!(matches!(generate_scene(&bad_size, 0), Err(Error::Config(_))));
        let mut dup = SceneSpec::default();
        dup.detection_classes[1] = "car".into();
        assert!(dup.validate().is_err());
        let mut two_bg = SceneSpec::default();
        two_bg.drivable_classes = vec!["a".into(), "background".into(), "background".into()];
        assert!(two_bg.validate().is_err());
    }

    #[test]
    fn ground_truth_masks_have_no_ignore() {
        let spec = SceneSpec::default();
        for i in 0..20 {
            let s = generate_scene(&spec, i).unwrap();
            let sem = &s.semantic_mask.unwrap().value;
            let driv = &s.drivable_mask.unwrap().value;
            assert!(sem.data.iter().all(|&v| (v as usize) < spec.semantic_classes.len()));
            assert!(driv.data.iter().all(|&v| (v as usize) < spec.drivable_classes.len()));
            for b in s.boxes.unwrap().value {
                assert!(b.x1 < b.x2 && b.y1 < b.y2 && b.x2 <= 64.0 && b.y2 <= 64.0 && b.x1 >= 0.0);
            }
        }
    }

    #[test]
    fn vocabulary_order_is_stable() {
        let spec = SceneSpec::default();
        assert_eq!(class_vocabulary(&spec, Task::Driv), ["directly drivable", "alternatively drivable", "background"]);
        assert_eq!(class_vocabulary(&spec, Task::Sem).len(), 8);
        assert_eq!(class_vocabulary(&spec, Task::Det), class_vocabulary(&spec, Task::Det));
        assert!("lane".parse::<Task>().is_err());
    }
}
