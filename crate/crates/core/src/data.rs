//! Procedural shape-segmentation dataset, labeled/unlabeled partition and
//! geometric augmentation.
//!
//! Every sample is a pure function of `(SceneSpec, index)`: the generator
//! seeds a ChaCha stream from the spec seed and selects the stream number by
//! sample index, so any subset can be regenerated independently.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Foreground shape kinds, one per foreground class in this order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
    Diamond,
    Ring,
    Cross,
}

pub const SHAPE_KINDS: [ShapeKind; 6] = [
    ShapeKind::Disk,
    ShapeKind::Rectangle,
    ShapeKind::Triangle,
    ShapeKind::Diamond,
    ShapeKind::Ring,
    ShapeKind::Cross,
];

// Nominal per-class colors; `color_jitter` blends these toward a uniform
// random color.
const PALETTE: [[f32; 3]; 6] = [
    [0.85, 0.25, 0.2],
    [0.2, 0.7, 0.3],
    [0.25, 0.35, 0.85],
    [0.85, 0.75, 0.2],
    [0.7, 0.3, 0.75],
    [0.2, 0.75, 0.8],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
    pub num_classes: usize,
    /// Inclusive (min, max) number of shapes per image.
    pub shapes_per_image: (usize, usize),
    pub color_jitter: f32,
    pub noise_std: f32,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: (64, 64),
            num_classes: 4,
            shapes_per_image: (2, 4),
            color_jitter: 0.15,
            noise_std: 0.05,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if self.num_classes > SHAPE_KINDS.len() + 1 {
            return Err(Error::config(
                "num_classes",
                format!("at most {} supported", SHAPE_KINDS.len() + 1),
            ));
        }
        if self.image_size.0 < 32 || self.image_size.1 < 32 {
            return Err(Error::config("image_size", "both dimensions must be >= 32"));
        }
        if self.shapes_per_image.0 < 1 {
            return Err(Error::config("shapes_per_image", "minimum must be >= 1"));
        }
        if self.shapes_per_image.0 > self.shapes_per_image.1 {
            return Err(Error::config("shapes_per_image", "minimum exceeds maximum"));
        }
        if !(0.0..=1.0).contains(&self.color_jitter) {
            return Err(Error::config("color_jitter", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.noise_std) {
            return Err(Error::config("noise_std", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One image with its dense label map. The image is HWC with values that
/// are exact multiples of 1/255, so PNG round trips are lossless.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub label: Vec<u8>,
}

impl Sample {
    pub fn new(height: usize, width: usize, image: Vec<f32>, label: Vec<u8>) -> Result<Self> {
        if image.len() != height * width * 3 || label.len() != height * width {
            return Err(Error::shape(format!(
                "sample {height}x{width}: image has {} values, label has {}",
                image.len(),
                label.len()
            )));
        }
        Ok(Sample {
            height,
            width,
            image,
            label,
        })
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.image[o], self.image[o + 1], self.image[o + 2]]
    }

    #[inline]
    pub fn label_at(&self, y: usize, x: usize) -> u8 {
        self.label[y * self.width + x]
    }

    /// Mean color of background-labeled pixels (all pixels if none).
    pub fn background_color(&self) -> [f32; 3] {
        let mut acc = [0.0f64; 3];
        let mut n = 0usize;
        for (p, &l) in self.label.iter().enumerate() {
            if l == 0 {
                for c in 0..3 {
                    acc[c] += self.image[p * 3 + c] as f64;
                }
                n += 1;
            }
        }
        if n == 0 {
            for p in 0..self.label.len() {
                for c in 0..3 {
                    acc[c] += self.image[p * 3 + c] as f64;
                }
            }
            n = self.label.len().max(1);
        }
        [
            (acc[0] / n as f64) as f32,
            (acc[1] / n as f64) as f32,
            (acc[2] / n as f64) as f32,
        ]
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.image
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

#[inline]
fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct Shape {
    kind: ShapeKind,
    class: u8,
    cy: f32,
    cx: f32,
    r: f32,
    // rectangle half extents as fractions of r
    ax: f32,
    ay: f32,
    color: [f32; 3],
}

impl Shape {
    fn contains(&self, py: f32, px: f32) -> bool {
        let dx = px - self.cx;
        let dy = py - self.cy;
        let r = self.r;
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Rectangle => dx.abs() <= self.ax * r && dy.abs() <= self.ay * r,
            ShapeKind::Triangle => {
                // apex up, base at +0.8 r
                let (x0, y0) = (0.0, -r);
                let (x1, y1) = (-r, 0.8 * r);
                let (x2, y2) = (r, 0.8 * r);
                let e = |ax: f32, ay: f32, bx: f32, by: f32| (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
                let e0 = e(x0, y0, x1, y1);
                let e1 = e(x1, y1, x2, y2);
                let e2 = e(x2, y2, x0, y0);
                (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
            }
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
            ShapeKind::Cross => {
                let t = r / 3.0;
                (dx.abs() <= t && dy.abs() <= r) || (dy.abs() <= t && dx.abs() <= r)
            }
        }
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates sample `index` of the dataset described by `spec`.
pub fn generate_sample(spec: &SceneSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let mut rng = sample_rng(spec.seed, index);
    // A scene fully covered by shapes would lack background; redraw.
    for _ in 0..64 {
        let s = draw_scene(spec, &mut rng);
        if s.label.iter().any(|&l| l == 0) {
            return Ok(s);
        }
    }
    Err(Error::Internal(format!(
        "could not place a background pixel in sample {index}"
    )))
}

fn draw_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Sample {
    let (h, w) = spec.image_size;
    let min_dim = h.min(w) as f32;

    let base: [f32; 3] = [
        rng.random_range(0.15..0.85),
        rng.random_range(0.15..0.85),
        rng.random_range(0.15..0.85),
    ];
    let fy: f32 = rng.random_range(0.05..0.3);
    let fx: f32 = rng.random_range(0.05..0.3);
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let tex_amp: f32 = rng.random_range(0.03..0.12);

    let mut image = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let t = tex_amp * (fy * y as f32 + fx * x as f32 + phase).sin();
            let o = (y * w + x) * 3;
            for c in 0..3 {
                image[o + c] = base[c] + t * (1.0 - 0.3 * c as f32);
            }
        }
    }
    let mut label = vec![0u8; h * w];

    let n_shapes = rng.random_range(spec.shapes_per_image.0..=spec.shapes_per_image.1);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let class = rng.random_range(1..spec.num_classes) as u8;
        let kind = SHAPE_KINDS[class as usize - 1];
        let r = rng.random_range(0.1..0.22) * min_dim;
        let cy = rng.random_range(0.0..h as f32);
        let cx = rng.random_range(0.0..w as f32);
        let ax = rng.random_range(0.55..1.0);
        let ay = rng.random_range(0.55..1.0);
        let random: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let pal = PALETTE[class as usize - 1];
        let j = spec.color_jitter;
        let color = [
            (1.0 - j) * pal[0] + j * random[0],
            (1.0 - j) * pal[1] + j * random[1],
            (1.0 - j) * pal[2] + j * random[2],
        ];
        shapes.push(Shape {
            kind,
            class,
            cy,
            cx,
            r,
            ax,
            ay,
            color,
        });
    }

    for s in &shapes {
        let y0 = (s.cy - s.r - 1.0).floor().max(0.0) as usize;
        let y1 = ((s.cy + s.r + 1.0).ceil() as usize).min(h);
        let x0 = (s.cx - s.r - 1.0).floor().max(0.0) as usize;
        let x1 = ((s.cx + s.r + 1.0).ceil() as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                if s.contains(y as f32 + 0.5, x as f32 + 0.5) {
                    label[y * w + x] = s.class;
                    let o = (y * w + x) * 3;
                    image[o..o + 3].copy_from_slice(&s.color);
                }
            }
        }
    }

    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise_std).expect("validated noise_std");
        for v in image.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    for v in image.iter_mut() {
        *v = quantize(*v);
    }

    Sample {
        height: h,
        width: w,
        image,
        label,
    }
}

/// Generates `count` samples.
pub fn generate_dataset(spec: &SceneSpec, count: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::config("count", "must be at least 1"));
    }
    (0..count).map(|i| generate_sample(spec, i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub labeled_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Seeded uniform draw of `max(1, round(fraction * len))` labeled indices;
/// the remainder is unlabeled. Both index lists are sorted.
pub fn split_labeled(len: usize, split: &SplitSpec) -> Result<Split> {
    if len == 0 {
        return Err(Error::config("dataset", "must be non-empty"));
    }
    let f = split.labeled_fraction;
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::config("labeled_fraction", "must lie in (0, 1]"));
    }
    let n_labeled = ((f * len as f64).round() as usize).clamp(1, len);
    let mut rng = ChaCha8Rng::seed_from_u64(split.seed);
    let mut labeled = index::sample(&mut rng, len, n_labeled).into_vec();
    labeled.sort_unstable();
    let mut is_labeled = vec![false; len];
    for &i in &labeled {
        is_labeled[i] = true;
    }
    let unlabeled = (0..len).filter(|&i| !is_labeled[i]).collect();
    Ok(Split { labeled, unlabeled })
}

/// Geometric transforms drawn for one augmentation call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentPlan {
    pub hflip: bool,
    /// Counter-clockwise quarter turns in 0..4.
    pub quarter_turns: u8,
    /// (dy, dx): output(y, x) = input(y - dy, x - dx).
    pub translate: (isize, isize),
    /// Top-left corner of the crop window.
    pub crop_origin: (usize, usize),
}

impl AugmentPlan {
    /// Maps an output pixel back to its source pixel, or `None` when it was
    /// vacated by the translation.
    pub fn source_of(&self, h: usize, w: usize, y: usize, x: usize) -> Option<(usize, usize)> {
        // undo crop
        let (mut y, mut x) = (y + self.crop_origin.0, x + self.crop_origin.1);
        // dims after rotation
        let (rh, rw) = if self.quarter_turns % 2 == 1 { (w, h) } else { (h, w) };
        let sy = y as isize - self.translate.0;
        let sx = x as isize - self.translate.1;
        if sy < 0 || sx < 0 || sy >= rh as isize || sx >= rw as isize {
            return None;
        }
        y = sy as usize;
        x = sx as usize;
        // undo rotation: each ccw turn maps (r, c) of the output to
        // (c, W_in - 1 - r) of its input.
        let (mut ch, mut cw) = (rh, rw);
        for _ in 0..self.quarter_turns {
            let (ih, iw) = (cw, ch);
            let (ny, nx) = (x, iw - 1 - y);
            y = ny;
            x = nx;
            ch = ih;
            cw = iw;
        }
        if self.hflip {
            x = w - 1 - x;
        }
        Some((y, x))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// (height, width) of the output crop.
    pub crop: (usize, usize),
}

pub fn hflip(s: &Sample) -> Sample {
    let (h, w) = (s.height, s.width);
    let mut out = s.clone();
    for y in 0..h {
        for x in 0..w {
            let src = y * w + (w - 1 - x);
            let dst = y * w + x;
            out.label[dst] = s.label[src];
            out.image[dst * 3..dst * 3 + 3].copy_from_slice(&s.image[src * 3..src * 3 + 3]);
        }
    }
    out
}

/// One counter-clockwise quarter turn.
pub fn rot90(s: &Sample) -> Sample {
    let (h, w) = (s.height, s.width);
    let (oh, ow) = (w, h);
    let mut image = vec![0.0; h * w * 3];
    let mut label = vec![0; h * w];
    for r in 0..oh {
        for c in 0..ow {
            let (sy, sx) = (c, w - 1 - r);
            let src = sy * w + sx;
            let dst = r * ow + c;
            label[dst] = s.label[src];
            image[dst * 3..dst * 3 + 3].copy_from_slice(&s.image[src * 3..src * 3 + 3]);
        }
    }
    Sample {
        height: oh,
        width: ow,
        image,
        label,
    }
}

/// Shifts content by `(dy, dx)`; vacated pixels get `fill` in the image and
/// IGNORE in the label.
pub fn translate(s: &Sample, dy: isize, dx: isize, fill: [f32; 3]) -> Sample {
    let (h, w) = (s.height, s.width);
    let mut out = s.clone();
    for y in 0..h {
        for x in 0..w {
            let dst = y * w + x;
            let sy = y as isize - dy;
            let sx = x as isize - dx;
            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                out.label[dst] = IGNORE;
                out.image[dst * 3..dst * 3 + 3].copy_from_slice(&fill);
            } else {
                let src = sy as usize * w + sx as usize;
                out.label[dst] = s.label[src];
                out.image[dst * 3..dst * 3 + 3].copy_from_slice(&s.image[src * 3..src * 3 + 3]);
            }
        }
    }
    out
}

pub fn crop(s: &Sample, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<Sample> {
    if y0 + ch > s.height || x0 + cw > s.width {
        return Err(Error::config(
            "crop",
            format!("{ch}x{cw} at ({y0},{x0}) exceeds {}x{}", s.height, s.width),
        ));
    }
    let mut image = Vec::with_capacity(ch * cw * 3);
    let mut label = Vec::with_capacity(ch * cw);
    for y in y0..y0 + ch {
        let row = y * s.width;
        label.extend_from_slice(&s.label[row + x0..row + x0 + cw]);
        image.extend_from_slice(&s.image[(row + x0) * 3..(row + x0 + cw) * 3]);
    }
    Ok(Sample {
        height: ch,
        width: cw,
        image,
        label,
    })
}

/// Draws an augmentation plan. Each of flip, rotation and translation is
/// applied with independent probability 0.5. Non-square inputs only rotate
/// by half turns so the output keeps its orientation.
pub fn draw_plan<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<AugmentPlan> {
    let (ch, cw) = cfg.crop;
    let mut plan = AugmentPlan::default();
    plan.hflip = rng.random_bool(0.5);
    if rng.random_bool(0.5) {
        plan.quarter_turns = if h == w { rng.random_range(1..4) } else { 2 };
    }
    let (rh, rw) = if plan.quarter_turns % 2 == 1 { (w, h) } else { (h, w) };
    if ch > rh || cw > rw || ch == 0 || cw == 0 {
        return Err(Error::config(
            "crop",
            format!("crop {ch}x{cw} does not fit image {rh}x{rw}"),
        ));
    }
    if rng.random_bool(0.5) {
        let my = (rh as f64 * 0.125).floor() as i64;
        let mx = (rw as f64 * 0.125).floor() as i64;
        plan.translate = (
            rng.random_range(-my..=my) as isize,
            rng.random_range(-mx..=mx) as isize,
        );
    }
    plan.crop_origin = (rng.random_range(0..=rh - ch), rng.random_range(0..=rw - cw));
    Ok(plan)
}

pub fn apply_plan(s: &Sample, plan: &AugmentPlan, cfg: &AugmentConfig) -> Result<Sample> {
    let fill = s.background_color();
    let mut out = if plan.hflip { hflip(s) } else { s.clone() };
    for _ in 0..plan.quarter_turns {
        out = rot90(&out);
    }
    if plan.translate != (0, 0) {
        out = translate(&out, plan.translate.0, plan.translate.1, fill);
    }
    crop(&out, plan.crop_origin.0, plan.crop_origin.1, cfg.crop.0, cfg.crop.1)
}

/// Random geometric augmentation: flip, quarter-turn rotation, translation,
/// then crop. Image and label receive identical transforms.
pub fn augment<R: Rng + ?Sized>(s: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Result<Sample> {
    let plan = draw_plan(s.height, s.width, cfg, rng)?;
    apply_plan(s, &plan, cfg)
}

/// Nearest-neighbour label downsampling by `stride`: feature pixel `(y, x)`
/// takes the label at `(y * stride + stride / 2, x * stride + stride / 2)`.
pub fn downsample_nearest(label: &[u8], h: usize, w: usize, stride: usize) -> Vec<u8> {
    let (oh, ow) = (h / stride, w / stride);
    let off = stride / 2;
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            out.push(label[(y * stride + off) * w + x * stride + off]);
        }
    }
    out
}

/// A dataset directory loaded from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    count: usize,
    scene: SceneSpec,
}

fn sample_name(i: usize) -> String {
    format!("{i:06}.png")
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::integrity(path, e.to_string()))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::integrity(path, e.to_string()))?;
    writer
        .finish()
        .map_err(|e| Error::integrity(path, e.to_string()))
}

fn read_png(path: &Path, expect: png::ColorType) -> Result<(usize, usize, Vec<u8>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let dec = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::integrity(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::integrity(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::integrity(path, e.to_string()))?;
    if info.color_type != expect || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::integrity(
            path,
            format!("expected 8-bit {expect:?}, found {:?}", info.color_type),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, buf))
}

/// Writes `samples` under `dir` as `manifest`, `images/NNNNNN.png` and
/// `labels/NNNNNN.png`.
pub fn write_dataset(dir: &Path, spec: &SceneSpec, samples: &[Sample]) -> Result<()> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    fs::create_dir_all(&labels).map_err(|e| Error::io(&labels, e))?;
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        count: samples.len(),
        scene: spec.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Internal(e.to_string()))?;
    let mpath = dir.join("manifest");
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    for (i, s) in samples.iter().enumerate() {
        write_png(
            &images.join(sample_name(i)),
            s.width,
            s.height,
            png::ColorType::Rgb,
            &s.to_rgb8(),
        )?;
        write_png(
            &labels.join(sample_name(i)),
            s.width,
            s.height,
            png::ColorType::Grayscale,
            &s.label,
        )?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<(SceneSpec, usize)> {
    let mpath = dir.join("manifest");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::integrity(&mpath, e.to_string()))?;
    if m.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::integrity(
            &mpath,
            format!("unsupported format_version {}", m.format_version),
        ));
    }
    Ok((m.scene, m.count))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let (spec, count) = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let ipath = dir.join("images").join(sample_name(i));
        let lpath = dir.join("labels").join(sample_name(i));
        let (h, w, rgb) = read_png(&ipath, png::ColorType::Rgb)?;
        let (lh, lw, label) = read_png(&lpath, png::ColorType::Grayscale)?;
        if (h, w) != (lh, lw) {
            return Err(Error::integrity(&lpath, "label size differs from image"));
        }
        if let Some(&bad) = label
            .iter()
            .find(|&&l| l != IGNORE && l as usize >= spec.num_classes)
        {
            return Err(Error::integrity(&lpath, format!("label value {bad} out of range")));
        }
        let image = rgb.iter().map(|&v| v as f32 / 255.0).collect();
        samples.push(Sample::new(h, w, image, label)?);
    }
    Ok(Dataset { spec, samples })
}

pub fn write_indices(path: &Path, indices: &[usize]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for i in indices {
        writeln!(w, "{i}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_indices(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|_| Error::integrity(PathBuf::from(path), format!("bad index line {l:?}")))
        })
        .collect()
}
