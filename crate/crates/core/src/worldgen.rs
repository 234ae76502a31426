//! Abstract shape worlds: scene sampling under count, overlap and withholding
//! constraints, and supersampled rasterization.
//!
//! The canvas is the unit square with the origin in the top-left corner; `y`
//! grows downwards, so "above" means a smaller `y`.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference resolution for overlap masks.
pub const OVERLAP_RESOLUTION: usize = 256;
/// Object counts that never appear in train/val scenes.
pub const WITHHELD_COUNTS: [usize; 3] = [5, 10, 15];
/// (shape, color) combinations that never appear in train/val scenes.
pub const WITHHELD_COMBOS: [(ShapeKind, ColorName); 6] = [
    (ShapeKind::Square, ColorName::Red),
    (ShapeKind::Triangle, ColorName::Green),
    (ShapeKind::Circle, ColorName::Blue),
    (ShapeKind::Rectangle, ColorName::Yellow),
    (ShapeKind::Cross, ColorName::Magenta),
    (ShapeKind::Ellipse, ColorName::Cyan),
];

pub const MIN_SHADE: f64 = 0.6;
pub const MAX_SHADE: f64 = 1.0;

/// Minimum |w/h - 1| for rectangles and ellipses.
const MIN_ASPECT_DEVIATION: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Rectangle,
    Triangle,
    Pentagon,
    Cross,
    Circle,
    Ellipse,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 7] = [
        ShapeKind::Square,
        ShapeKind::Rectangle,
        ShapeKind::Triangle,
        ShapeKind::Pentagon,
        ShapeKind::Cross,
        ShapeKind::Circle,
        ShapeKind::Ellipse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Pentagon => "pentagon",
            ShapeKind::Cross => "cross",
            ShapeKind::Circle => "circle",
            ShapeKind::Ellipse => "ellipse",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            ShapeKind::Square => "squares",
            ShapeKind::Rectangle => "rectangles",
            ShapeKind::Triangle => "triangles",
            ShapeKind::Pentagon => "pentagons",
            ShapeKind::Cross => "crosses",
            ShapeKind::Circle => "circles",
            ShapeKind::Ellipse => "ellipses",
        }
    }

    /// Rectangles and ellipses are the only kinds with independent width and height.
    pub fn is_elongated(self) -> bool {
        matches!(self, ShapeKind::Rectangle | ShapeKind::Ellipse)
    }

    /// Shape area as a fraction of its `w × h` bounding box.
    pub fn area_factor(self) -> f64 {
        match self {
            ShapeKind::Square | ShapeKind::Rectangle => 1.0,
            ShapeKind::Triangle => 0.5,
            ShapeKind::Pentagon => 2.5 * (72f64.to_radians()).sin() / 4.0,
            ShapeKind::Cross => 5.0 / 9.0,
            ShapeKind::Circle | ShapeKind::Ellipse => PI / 4.0,
        }
    }

    /// Point-in-shape test in the object's local (unrotated, centered) frame.
    pub fn contains_local(self, u: f64, v: f64, w: f64, h: f64) -> bool {
        let (hw, hh) = (w / 2.0, h / 2.0);
        match self {
            ShapeKind::Square | ShapeKind::Rectangle => u.abs() <= hw && v.abs() <= hh,
            ShapeKind::Circle | ShapeKind::Ellipse => {
                let (a, b) = (u / hw, v / hh);
                a * a + b * b <= 1.0
            }
            ShapeKind::Cross => {
                (u.abs() <= hw && v.abs() <= hh / 3.0) || (u.abs() <= hw / 3.0 && v.abs() <= hh)
            }
            ShapeKind::Triangle => {
                // apex at the top, base at the bottom
                if v.abs() > hh {
                    return false;
                }
                let t = (v + hh) / h;
                u.abs() <= hw * t
            }
            ShapeKind::Pentagon => {
                let verts = pentagon_vertices(hw, hh);
                (0..5).all(|k| {
                    let (x0, y0) = verts[k];
                    let (x1, y1) = verts[(k + 1) % 5];
                    // vertices run clockwise on screen, interior on the right
                    (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0) >= 0.0
                })
            }
        }
    }
}

fn pentagon_vertices(hw: f64, hh: f64) -> [(f64, f64); 5] {
    let mut out = [(0.0, 0.0); 5];
    for (k, vert) in out.iter_mut().enumerate() {
        let theta = (-90.0 + 72.0 * k as f64).to_radians();
        *vert = (hw * theta.cos(), hh * theta.sin());
    }
    out
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown shape '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl ColorName {
    pub const ALL: [ColorName; 6] = [
        ColorName::Red,
        ColorName::Green,
        ColorName::Blue,
        ColorName::Yellow,
        ColorName::Magenta,
        ColorName::Cyan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
            ColorName::Magenta => "magenta",
            ColorName::Cyan => "cyan",
        }
    }

    /// Canonical RGB triple at full shade.
    pub fn rgb(self) -> [f64; 3] {
        match self {
            ColorName::Red => [1.0, 0.0, 0.0],
            ColorName::Green => [0.0, 1.0, 0.0],
            ColorName::Blue => [0.0, 0.0, 1.0],
            ColorName::Yellow => [1.0, 1.0, 0.0],
            ColorName::Magenta => [1.0, 0.0, 1.0],
            ColorName::Cyan => [0.0, 1.0, 1.0],
        }
    }
}

impl fmt::Display for ColorName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ColorName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ColorName::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown color '{s}'")))
    }
}

/// Rec.601 luma of the canonical color, scaled by the shade factor.
pub fn luminance(color: ColorName, shade: f64) -> f64 {
    let [r, g, b] = color.rgb();
    (0.299 * r + 0.587 * g + 0.114 * b) * shade
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub shape: ShapeKind,
    pub color: ColorName,
    /// Multiplicative brightness factor in `[0.6, 1.0]`.
    pub shade: f64,
    pub center: [f64; 2],
    /// Width and height as fractions of the canvas.
    pub size: [f64; 2],
    /// Fraction of a full turn in `[0, 1)`.
    pub rotation: f64,
}

impl WorldObject {
    pub fn area(&self) -> f64 {
        self.shape.area_factor() * self.size[0] * self.size[1]
    }

    pub fn luminance(&self) -> f64 {
        luminance(self.color, self.shade)
    }

    /// Euclidean distance of the center from the canvas center.
    pub fn center_distance(&self) -> f64 {
        let dx = self.center[0] - 0.5;
        let dy = self.center[1] - 0.5;
        (dx * dx + dy * dy).sqrt()
    }

    pub fn rgb(&self) -> [f64; 3] {
        let [r, g, b] = self.color.rgb();
        [r * self.shade, g * self.shade, b * self.shade]
    }

    /// Half extents of the axis-aligned box around the rotated shape.
    pub fn half_extents(&self) -> [f64; 2] {
        let theta = self.rotation * 2.0 * PI;
        let (s, c) = (theta.sin().abs(), theta.cos().abs());
        let (hw, hh) = (self.size[0] / 2.0, self.size[1] / 2.0);
        [c * hw + s * hh, s * hw + c * hh]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let theta = self.rotation * 2.0 * PI;
        let (s, c) = theta.sin_cos();
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        self.shape.contains_local(u, v, self.size[0], self.size[1])
    }

    /// True if the whole rotated extent lies inside the unit square.
    pub fn is_contained(&self) -> bool {
        let [ex, ey] = self.half_extents();
        let [cx, cy] = self.center;
        cx - ex >= 0.0 && cx + ex <= 1.0 && cy - ey >= 0.0 && cy + ey <= 1.0
    }

    /// Pixel index range `[lo, hi)` covered by the bounding box on each axis.
    fn pixel_box(&self, resolution: usize) -> [(usize, usize); 2] {
        let ext = self.half_extents();
        let mut out = [(0, 0); 2];
        for axis in 0..2 {
            let lo = ((self.center[axis] - ext[axis]) * resolution as f64 - 0.5).floor();
            let hi = ((self.center[axis] + ext[axis]) * resolution as f64 - 0.5).ceil() + 1.0;
            out[axis] = (
                lo.max(0.0) as usize,
                (hi.max(0.0) as usize).min(resolution),
            );
        }
        out
    }

    /// Number of pixel centers inside the shape at the given resolution.
    pub fn mask_size(&self, resolution: usize) -> usize {
        let [(x0, x1), (y0, y1)] = self.pixel_box(resolution);
        let r = resolution as f64;
        let mut n = 0;
        for i in y0..y1 {
            let y = (i as f64 + 0.5) / r;
            for j in x0..x1 {
                if self.contains((j as f64 + 0.5) / r, y) {
                    n += 1;
                }
            }
        }
        n
    }
}

/// Fraction of the smaller object's mask that is covered by the other,
/// measured on a 256×256 pixel-center grid.
pub fn overlap_fraction(a: &WorldObject, b: &WorldObject) -> f64 {
    let res = OVERLAP_RESOLUTION;
    let [(ax0, ax1), (ay0, ay1)] = a.pixel_box(res);
    let [(bx0, bx1), (by0, by1)] = b.pixel_box(res);
    let (x0, x1) = (ax0.max(bx0), ax1.min(bx1));
    let (y0, y1) = (ay0.max(by0), ay1.min(by1));
    if x0 >= x1 || y0 >= y1 {
        return 0.0;
    }
    let r = res as f64;
    let mut both = 0usize;
    for i in y0..y1 {
        let y = (i as f64 + 0.5) / r;
        for j in x0..x1 {
            let x = (j as f64 + 0.5) / r;
            if a.contains(x, y) && b.contains(x, y) {
                both += 1;
            }
        }
    }
    if both == 0 {
        return 0.0;
    }
    let smaller = a.mask_size(res).min(b.mask_size(res));
    if smaller == 0 {
        0.0
    } else {
        both as f64 / smaller as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<WorldObject>,
    pub seed: u64,
}

impl Scene {
    pub fn new(objects: Vec<WorldObject>) -> Self {
        Scene { objects, seed: 0 }
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    /// True if any object uses one of the given (shape, color) pairs.
    pub fn has_combo(&self, combos: &[(ShapeKind, ColorName)]) -> bool {
        self.objects
            .iter()
            .any(|o| combos.contains(&(o.shape, o.color)))
    }

    /// Largest pairwise overlap fraction.
    pub fn max_overlap(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, a) in self.objects.iter().enumerate() {
            for b in &self.objects[i + 1..] {
                worst = worst.max(overlap_fraction(a, b));
            }
        }
        worst
    }
}

/// Constraints for scene sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub count_sets: BTreeSet<usize>,
    pub max_overlap: f64,
    pub withheld_combos: Vec<(ShapeKind, ColorName)>,
    /// Permit withheld combos for freely sampled objects.
    pub allow_withheld_combos: bool,
    /// Permit counts listed in [`WITHHELD_COUNTS`] in `count_sets`.
    pub allow_withheld_counts: bool,
    /// Objects whose (shape, color) is fixed; they are placed first.
    pub required: Vec<(ShapeKind, ColorName)>,
    pub min_size: f64,
    pub max_size: f64,
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<ColorName>,
    /// Placement attempts per object before giving up.
    pub placement_attempts: usize,
}

pub fn default_count_set() -> BTreeSet<usize> {
    (1..=4).chain(6..=9).chain(11..=14).collect()
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            count_sets: default_count_set(),
            max_overlap: 0.25,
            withheld_combos: WITHHELD_COMBOS.to_vec(),
            allow_withheld_combos: false,
            allow_withheld_counts: false,
            required: Vec::new(),
            min_size: 0.1,
            max_size: 0.25,
            shapes: ShapeKind::ALL.to_vec(),
            colors: ColorName::ALL.to_vec(),
            placement_attempts: 1000,
        }
    }
}

impl SceneSpec {
    pub fn with_counts(mut self, counts: impl IntoIterator<Item = usize>) -> Self {
        self.count_sets = counts.into_iter().collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if self.count_sets.is_empty() {
            return bad("count_sets is empty");
        }
        if !self.allow_withheld_counts && self.count_sets.iter().any(|c| WITHHELD_COUNTS.contains(c)) {
            return bad("count_sets contains a withheld count");
        }
        if self.count_sets.iter().any(|&c| c < self.required.len()) {
            return bad("count_sets smaller than the number of required objects");
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return bad("max_overlap must lie in [0, 1]");
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size <= 0.5) {
            return bad("sizes must satisfy 0 < min_size <= max_size <= 0.5");
        }
        if self.shapes.is_empty() || self.colors.is_empty() {
            return bad("shape and color pools must be non-empty");
        }
        if !self.allow_withheld_combos
            && self
                .shapes
                .iter()
                .all(|s| self.colors.iter().all(|c| self.withheld_combos.contains(&(*s, *c))))
        {
            return bad("every (shape, color) pair is withheld");
        }
        if self.placement_attempts == 0 {
            return bad("placement_attempts must be positive");
        }
        Ok(())
    }

    fn sample_attributes<R: Rng + ?Sized>(&self, rng: &mut R) -> (ShapeKind, ColorName) {
        loop {
            let shape = self.shapes[rng.gen_range(0..self.shapes.len())];
            let color = self.colors[rng.gen_range(0..self.colors.len())];
            if self.allow_withheld_combos || !self.withheld_combos.contains(&(shape, color)) {
                return (shape, color);
            }
        }
    }

    fn sample_geometry<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        shape: ShapeKind,
        color: ColorName,
    ) -> WorldObject {
        let w = rng.gen_range(self.min_size..=self.max_size);
        let h = if shape.is_elongated() {
            let mut h;
            let mut tries = 0;
            loop {
                h = rng.gen_range(self.min_size..=self.max_size);
                tries += 1;
                if (w / h - 1.0).abs() >= MIN_ASPECT_DEVIATION || tries > 64 {
                    break;
                }
            }
            if (w / h - 1.0).abs() < MIN_ASPECT_DEVIATION {
                // narrow size range: force the aspect instead
                h = w / (1.0 + 2.0 * MIN_ASPECT_DEVIATION);
            }
            h
        } else {
            w
        };
        let rotation = if shape == ShapeKind::Circle {
            0.0
        } else {
            rng.gen_range(0.0..1.0)
        };
        let shade = rng.gen_range(MIN_SHADE..=MAX_SHADE);
        let mut obj = WorldObject {
            shape,
            color,
            shade,
            center: [0.5, 0.5],
            size: [w, h],
            rotation,
        };
        let [ex, ey] = obj.half_extents();
        obj.center = [rng.gen_range(ex..=1.0 - ex), rng.gen_range(ey..=1.0 - ey)];
        obj
    }
}

/// Sample a scene satisfying `spec`. Placement is rejection sampling with
/// `spec.placement_attempts` tries per object.
pub fn sample_scene<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Result<Scene> {
    spec.validate()?;
    let counts: Vec<usize> = spec.count_sets.iter().copied().collect();
    let n = counts[rng.gen_range(0..counts.len())];
    let seed = rng.gen();
    let mut objects: Vec<WorldObject> = Vec::with_capacity(n);
    for k in 0..n {
        let (shape, color) = match spec.required.get(k) {
            Some(&attrs) => attrs,
            None => spec.sample_attributes(rng),
        };
        let mut placed = None;
        for _ in 0..spec.placement_attempts {
            let cand = spec.sample_geometry(rng, shape, color);
            if objects
                .iter()
                .all(|o| overlap_fraction(o, &cand) <= spec.max_overlap)
            {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(obj) => objects.push(obj),
            None => {
                return Err(Error::SceneInfeasible {
                    placed: objects.len(),
                    requested: n,
                })
            }
        }
    }
    // required objects should not always be drawn first
    if !spec.required.is_empty() {
        use rand::seq::SliceRandom;
        objects.shuffle(rng);
    }
    Ok(Scene { objects, seed })
}

/// An H×W×3 float image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Quantize to bytes (round to nearest).
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Render `scene` at `resolution × resolution`, each pixel the mean of
/// `supersample²` point samples. Later objects are drawn on top.
pub fn rasterize(scene: &Scene, resolution: usize, supersample: usize) -> Image {
    assert!(resolution >= 16, "resolution must be at least 16");
    assert!(supersample >= 1, "supersample must be at least 1");
    let mut data = vec![0f32; resolution * resolution * 3];
    let r = resolution as f64;
    let s = supersample as f64;
    let norm = 1.0 / (s * s);
    let colors: Vec<[f64; 3]> = scene.objects.iter().map(WorldObject::rgb).collect();
    let boxes: Vec<[(usize, usize); 2]> = scene
        .objects
        .iter()
        .map(|o| o.pixel_box(resolution))
        .collect();
    for i in 0..resolution {
        for j in 0..resolution {
            let candidates: Vec<usize> = (0..scene.objects.len())
                .filter(|&k| {
                    let [(x0, x1), (y0, y1)] = boxes[k];
                    // pixel_box is built from pixel centers; widen by one for subsamples
                    j + 1 >= x0 && j < x1 + 1 && i + 1 >= y0 && i < y1 + 1
                })
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let mut acc = [0f64; 3];
            for a in 0..supersample {
                let y = (i as f64 + (a as f64 + 0.5) / s) / r;
                for b in 0..supersample {
                    let x = (j as f64 + (b as f64 + 0.5) / s) / r;
                    if let Some(&k) = candidates
                        .iter()
                        .rev()
                        .find(|&&k| scene.objects[k].contains(x, y))
                    {
                        for (c, v) in acc.iter_mut().zip(colors[k]) {
                            *c += v;
                        }
                    }
                }
            }
            let o = (i * resolution + j) * 3;
            for c in 0..3 {
                data[o + c] = (acc[c] * norm) as f32;
            }
        }
    }
    Image {
        height: resolution,
        width: resolution,
        data,
    }
}
