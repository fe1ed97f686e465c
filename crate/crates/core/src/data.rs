//! Synthetic localization benchmark.
//!
//! Every image contains one large "body" (rectangle or ellipse) whose shape,
//! size, and color are drawn from the same distribution for every class, plus
//! a small 8x8 class "marker" pattern sitting on the body's perimeter. The
//! marker is the only class-discriminative content, so a classifier that
//! attends only to the most discriminative region will box the marker, not
//! the object — the failure mode the attention module is meant to fix.
//! Background noise and up to three unmarked distractor blobs complete the
//! scene. Ground truth is the tight box around body plus marker.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cam::BBox;
use crate::error::{CoreError, Result};
use crate::io;
use crate::rng::{RngStream, StreamKind};
use crate::tensor::FeatureMap;

/// Side of the square marker stencil.
pub const MARKER_CELL: usize = 8;
/// Number of marker patterns, and therefore of classes.
pub const NUM_MARKER_PATTERNS: usize = 4;

/// Body box must keep this margin to the image edge so a perimeter marker
/// never clips.
const MARGIN: usize = 5;
const BODY_AREA_FRAC: (f64, f64) = (0.12, 0.32);
const BODY_ASPECT: (f64, f64) = (0.6, 1.6);
const BODY_INTENSITY: (f64, f64) = (0.45, 0.75);
const BACKGROUND: (f64, f64) = (0.05, 0.15);
const DISTRACTOR_AREA_FRAC: (f64, f64) = (0.01, 0.05);
/// Markers are chroma outliers, not luminance outliers: a saturated red whose
/// channel mean sits below the body range, so average-pooled attention peaks
/// on the body rather than on the class-discriminative pattern.
const MARKER_RED: (f64, f64) = (0.88, 0.98);
const MARKER_GREEN_BLUE: (f64, f64) = (0.05, 0.12);
const TINT: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    /// Maximum number of unmarked distractor blobs per image.
    pub clutter_max: usize,
    /// Intensity range distractors are painted with.
    pub clutter_intensity: (f64, f64),
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: NUM_MARKER_PATTERNS,
            train_per_class: 500,
            test_per_class: 200,
            image_size: 64,
            clutter_max: 3,
            clutter_intensity: (0.25, 0.55),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_MARKER_PATTERNS {
            return Err(CoreError::Config(format!(
                "num_classes must be {NUM_MARKER_PATTERNS} (one per marker pattern), got {}",
                self.num_classes
            )));
        }
        // Marker cell area must stay under 15% of the smallest body.
        let min_body = BODY_AREA_FRAC.0 * (self.image_size * self.image_size) as f64;
        if (MARKER_CELL * MARKER_CELL) as f64 > 0.15 * min_body {
            return Err(CoreError::Config(format!(
                "image_size {} too small for the marker-to-body area budget",
                self.image_size
            )));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(CoreError::Config("per-class sample counts must be >= 1".into()));
        }
        let (lo, hi) = self.clutter_intensity;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(CoreError::Config(format!(
                "clutter intensity range ({lo}, {hi}) is not an ordered subrange of [0,1]"
            )));
        }
        Ok(())
    }

    pub fn train_total(&self) -> usize {
        self.num_classes * self.train_per_class
    }

    pub fn test_total(&self) -> usize {
        self.num_classes * self.test_per_class
    }
}

/// One image with its label and ground-truth box.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// 3 x S x S, values in [0,1] quantized to 8-bit levels.
    pub image: FeatureMap,
    pub label: usize,
    pub gt_box: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: u64,
    pub file: String,
    pub split: Split,
    pub label: usize,
    /// Half-open [x0, y0, x1, y1].
    #[serde(rename = "box")]
    pub bbox: [usize; 4],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
}

/// The marker pattern of a class as an 8x8 stencil; `true` cells get paint.
pub fn marker_stencil(class: usize) -> [[bool; MARKER_CELL]; MARKER_CELL] {
    let mut cell = [[false; MARKER_CELL]; MARKER_CELL];
    for (y, row) in cell.iter_mut().enumerate() {
        for (x, on) in row.iter_mut().enumerate() {
            let dx = x as f64 - 3.5;
            let dy = y as f64 - 3.5;
            let r = (dx * dx + dy * dy).sqrt();
            *on = match class {
                0 => r <= 3.3,                       // solid dot
                1 => (2.0..=3.4).contains(&r),       // ring
                2 => x == 3 || x == 4 || y == 3 || y == 4, // cross
                3 => (x / 2 + y / 2) % 2 == 0,       // checker patch
                _ => false,
            };
        }
    }
    cell
}

#[derive(Clone, Copy, PartialEq)]
enum BodyShape {
    Rect,
    Ellipse,
}

/// Channel-major float canvas plus the occupancy box of the labeled object.
struct Canvas {
    s: usize,
    rgb: Vec<f64>,
    occ: Option<(usize, usize, usize, usize)>, // min_x, min_y, max_x, max_y
}

impl Canvas {
    fn new(s: usize) -> Self {
        Canvas { s, rgb: vec![0.0; 3 * s * s], occ: None }
    }

    fn paint(&mut self, x: usize, y: usize, color: [f64; 3], track: bool) {
        let plane = self.s * self.s;
        let idx = y * self.s + x;
        for (k, &v) in color.iter().enumerate() {
            self.rgb[k * plane + idx] = v.clamp(0.0, 1.0);
        }
        if track {
            let (mut x0, mut y0, mut x1, mut y1) = self.occ.unwrap_or((x, y, x, y));
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            self.occ = Some((x0, y0, x1, y1));
        }
    }

    fn paint_body(
        &mut self,
        shape: BodyShape,
        x0: usize,
        y0: usize,
        bw: usize,
        bh: usize,
        color: [f64; 3],
        track: bool,
    ) {
        match shape {
            BodyShape::Rect => {
                for y in y0..y0 + bh {
                    for x in x0..x0 + bw {
                        self.paint(x, y, color, track);
                    }
                }
            }
            BodyShape::Ellipse => {
                let cx = x0 as f64 + bw as f64 / 2.0;
                let cy = y0 as f64 + bh as f64 / 2.0;
                let a = bw as f64 / 2.0;
                let b = bh as f64 / 2.0;
                for y in y0..y0 + bh {
                    for x in x0..x0 + bw {
                        let nx = (x as f64 + 0.5 - cx) / a;
                        let ny = (y as f64 + 0.5 - cy) / b;
                        if nx * nx + ny * ny <= 1.0 {
                            self.paint(x, y, color, track);
                        }
                    }
                }
            }
        }
    }
}

fn tinted(base: f64, rng: &mut RngStream) -> [f64; 3] {
    [
        base + rng.uniform(-TINT, TINT),
        base + rng.uniform(-TINT, TINT),
        base + rng.uniform(-TINT, TINT),
    ]
}

/// Box dims whose *painted* area approximates `area_px` for the shape.
fn body_dims(shape: BodyShape, area_px: f64, aspect: f64) -> (usize, usize) {
    let box_area = match shape {
        BodyShape::Rect => area_px,
        // An inscribed ellipse fills pi/4 of its box.
        BodyShape::Ellipse => area_px * 4.0 / std::f64::consts::PI,
    };
    let bw = (box_area * aspect).sqrt().round().max(6.0) as usize;
    let bh = (box_area / bw as f64).round().max(6.0) as usize;
    (bw, bh)
}

struct Rendered {
    sample: Sample,
    marker_box: BBox,
}

fn render_impl(spec: &DatasetSpec, class: usize, id: u64, rng: &mut RngStream) -> Result<Rendered> {
    if class >= spec.num_classes {
        return Err(CoreError::InvalidArgument(format!(
            "class {class} out of range 0..{}",
            spec.num_classes
        )));
    }
    let s = spec.image_size;
    let mut canvas = Canvas::new(s);

    // Background noise: gray per-pixel.
    for y in 0..s {
        for x in 0..s {
            let lum = rng.uniform(BACKGROUND.0, BACKGROUND.1);
            canvas.paint(x, y, [lum, lum, lum], false);
        }
    }

    // Distractor blobs: bodies without markers, painted *under* the object.
    let n_distract = rng.below(spec.clutter_max + 1);
    for _ in 0..n_distract {
        let shape = if rng.bernoulli(0.5)? { BodyShape::Rect } else { BodyShape::Ellipse };
        let frac = rng.uniform(DISTRACTOR_AREA_FRAC.0, DISTRACTOR_AREA_FRAC.1);
        let aspect = rng.uniform(BODY_ASPECT.0, BODY_ASPECT.1);
        let (bw, bh) = body_dims(shape, frac * (s * s) as f64, aspect);
        if bw >= s || bh >= s {
            continue;
        }
        let x0 = rng.below(s - bw + 1);
        let y0 = rng.below(s - bh + 1);
        let color = tinted(
            rng.uniform(spec.clutter_intensity.0, spec.clutter_intensity.1),
            rng,
        );
        canvas.paint_body(shape, x0, y0, bw, bh, color, false);
    }

    // The labeled body, retried until it fits inside the margins.
    let mut placed = None;
    for _ in 0..100 {
        let shape = if rng.bernoulli(0.5)? { BodyShape::Rect } else { BodyShape::Ellipse };
        let frac = rng.uniform(BODY_AREA_FRAC.0, BODY_AREA_FRAC.1);
        let aspect = rng.uniform(BODY_ASPECT.0, BODY_ASPECT.1);
        let (bw, bh) = body_dims(shape, frac * (s * s) as f64, aspect);
        if bw + 2 * MARGIN > s || bh + 2 * MARGIN > s {
            continue;
        }
        let x0 = MARGIN + rng.below(s - 2 * MARGIN - bw + 1);
        let y0 = MARGIN + rng.below(s - 2 * MARGIN - bh + 1);
        placed = Some((shape, x0, y0, bw, bh));
        break;
    }
    let (shape, x0, y0, bw, bh) = placed.ok_or_else(|| CoreError::Dataset {
        id,
        msg: "could not place a body after 100 attempts".into(),
    })?;
    let body_color = tinted(rng.uniform(BODY_INTENSITY.0, BODY_INTENSITY.1), rng);
    canvas.paint_body(shape, x0, y0, bw, bh, body_color, true);

    // Marker centered on a perimeter point, clamped to stay in the image.
    let (mx, my) = match shape {
        BodyShape::Rect => match rng.below(4) {
            0 => (x0 + rng.below(bw), y0),               // top
            1 => (x0 + bw - 1, y0 + rng.below(bh)),      // right
            2 => (x0 + rng.below(bw), y0 + bh - 1),      // bottom
            _ => (x0, y0 + rng.below(bh)),               // left
        },
        BodyShape::Ellipse => {
            let t = rng.uniform(0.0, std::f64::consts::TAU);
            let cx = x0 as f64 + bw as f64 / 2.0;
            let cy = y0 as f64 + bh as f64 / 2.0;
            let px = cx + (bw as f64 / 2.0 - 0.5) * t.cos();
            let py = cy + (bh as f64 / 2.0 - 0.5) * t.sin();
            (px.round() as usize, py.round() as usize)
        }
    };
    let half = MARKER_CELL / 2;
    let cell_x = mx.saturating_sub(half).min(s - MARKER_CELL);
    let cell_y = my.saturating_sub(half).min(s - MARKER_CELL);
    let marker_color = [
        rng.uniform(MARKER_RED.0, MARKER_RED.1),
        rng.uniform(MARKER_GREEN_BLUE.0, MARKER_GREEN_BLUE.1),
        rng.uniform(MARKER_GREEN_BLUE.0, MARKER_GREEN_BLUE.1),
    ];
    let stencil = marker_stencil(class);
    for (dy, row) in stencil.iter().enumerate() {
        for (dx, &on) in row.iter().enumerate() {
            if on {
                canvas.paint(cell_x + dx, cell_y + dy, marker_color, true);
            }
        }
    }
    let marker_box = BBox::new(cell_x, cell_y, cell_x + MARKER_CELL, cell_y + MARKER_CELL)?;

    // Quantize to the 8-bit grid so files reload bit-exactly.
    for v in &mut canvas.rgb {
        *v = (*v * 255.0).round() / 255.0;
    }

    let (ox0, oy0, ox1, oy1) = canvas.occ.expect("body was painted");
    let gt_box = BBox::new(ox0, oy0, ox1 + 1, oy1 + 1)?;
    let image = FeatureMap::new(3, s, s, canvas.rgb)?;
    Ok(Rendered {
        sample: Sample { id, image, label: class, gt_box },
        marker_box,
    })
}

/// Render the sample for (`class`, `id`) from an already-positioned stream.
pub fn render_sample(
    spec: &DatasetSpec,
    class: usize,
    id: u64,
    rng: &mut RngStream,
) -> Result<Sample> {
    render_impl(spec, class, id, rng).map(|r| r.sample)
}

/// Like [`render_sample`] but also reports where the marker landed. Used by
/// diagnostics that need the discriminative crop.
pub fn render_sample_detailed(
    spec: &DatasetSpec,
    class: usize,
    id: u64,
    rng: &mut RngStream,
) -> Result<(Sample, BBox)> {
    render_impl(spec, class, id, rng).map(|r| (r.sample, r.marker_box))
}

/// The stream a given sample id is rendered from.
pub fn sample_stream(seed: u64, id: u64) -> RngStream {
    RngStream::derived(seed, StreamKind::DataGen, id)
}

fn sample_plan(spec: &DatasetSpec) -> Vec<(u64, Split, usize)> {
    let mut plan = Vec::with_capacity(spec.train_total() + spec.test_total());
    let mut id = 0u64;
    for (split, per_class) in [(Split::Train, spec.train_per_class), (Split::Test, spec.test_per_class)] {
        for _ in 0..per_class {
            for class in 0..spec.num_classes {
                plan.push((id, split, class));
                id += 1;
            }
        }
    }
    plan
}

/// Interleaved row-major RGB bytes of a rendered image.
pub fn image_to_rgb8(image: &FeatureMap) -> Vec<u8> {
    let (c, h, w) = image.shape();
    debug_assert_eq!(c, 3);
    let mut out = Vec::with_capacity(3 * h * w);
    for idx in 0..h * w {
        for k in 0..3 {
            out.push((image.data()[k * h * w + idx] * 255.0).round() as u8);
        }
    }
    out
}

pub fn rgb8_to_image(w: usize, h: usize, bytes: &[u8]) -> Result<FeatureMap> {
    if bytes.len() != 3 * w * h {
        return Err(CoreError::InvalidArgument(format!(
            "rgb payload: expected {} bytes, got {}",
            3 * w * h,
            bytes.len()
        )));
    }
    let mut data = vec![0.0; 3 * w * h];
    for idx in 0..w * h {
        for k in 0..3 {
            data[k * w * h + idx] = bytes[idx * 3 + k] as f64 / 255.0;
        }
    }
    FeatureMap::new(3, h, w, data)
}

/// Render the whole dataset under `out_dir`: `img/NNNNNN.ppm` files plus an
/// `index.jsonl` manifest. Same spec, same bytes, regardless of when or in
/// what order ids are rendered.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetIndex> {
    spec.validate()?;
    let img_dir = out_dir.join("img");
    std::fs::create_dir_all(&img_dir)?;

    let mut entries = Vec::new();
    for (id, split, class) in sample_plan(spec) {
        let mut rng = sample_stream(spec.seed, id);
        let sample = render_sample(spec, class, id, &mut rng)?;
        let file = format!("img/{id:06}.ppm");
        io::write_ppm(
            &out_dir.join(&file),
            spec.image_size,
            spec.image_size,
            &image_to_rgb8(&sample.image),
        )?;
        let b = sample.gt_box;
        entries.push(IndexEntry {
            id,
            file,
            split,
            label: class,
            bbox: [b.x0, b.y0, b.x1, b.y1],
        });
    }

    let mut index_text = String::new();
    for entry in &entries {
        let line = serde_json::to_string(entry)
            .map_err(|e| CoreError::Parse(format!("index encode: {e}")))?;
        let _ = writeln!(index_text, "{line}");
    }
    io::atomic_write(&out_dir.join("index.jsonl"), index_text.as_bytes())?;
    Ok(DatasetIndex { entries })
}

/// A dataset pulled back into memory, index order preserved.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub entries: Vec<IndexEntry>,
    pub samples: Vec<Sample>,
}

impl LoadedDataset {
    /// Indices (into `samples`) of one split, in index order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.entries.iter().map(|e| e.label + 1).max().unwrap_or(0)
    }
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let index_path = dir.join("index.jsonl");
    let text = std::fs::read_to_string(&index_path)
        .map_err(|e| CoreError::Parse(format!("cannot read {}: {e}", index_path.display())))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: IndexEntry = serde_json::from_str(line).map_err(|e| {
            CoreError::Parse(format!("index line {}: {e}", lineno + 1))
        })?;
        entries.push(entry);
    }

    let mut samples = Vec::with_capacity(entries.len());
    for entry in &entries {
        let id = entry.id;
        let fail = |msg: String| CoreError::Dataset { id, msg };
        let path = dir.join(&entry.file);
        let (w, h, rgb) =
            crate::io::read_ppm(&path).map_err(|e| fail(format!("image {}: {e}", entry.file)))?;
        let image = rgb8_to_image(w, h, &rgb).map_err(|e| fail(e.to_string()))?;
        let [x0, y0, x1, y1] = entry.bbox;
        let gt_box = BBox::new(x0, y0, x1, y1).map_err(|e| fail(e.to_string()))?;
        if x1 > w || y1 > h {
            return Err(fail(format!(
                "box ({x0},{y0})..({x1},{y1}) exceeds the {w}x{h} image"
            )));
        }
        samples.push(Sample { id, image, label: entry.label, gt_box });
    }
    Ok(LoadedDataset { entries, samples })
}
