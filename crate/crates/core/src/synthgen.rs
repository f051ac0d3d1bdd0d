//! Procedural street scenes in two appearance domains.
//!
//! A scene is a static layout (sky, building blocks, vegetation, road) with
//! car and person sprites that move at constant per-sprite velocity between
//! the two frames. Every layer is a function of continuous coordinates, so
//! labels and ground-truth flow follow from the geometry alone. The domain
//! shift changes palettes, texture statistics and photometry, never the
//! geometry.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imagecore::{
    quantize_u8, write_flo, write_pgm_labels, write_ppm, FlowField, Image, LabelMap,
};

/// Largest per-frame sprite speed the flow pyramid is expected to reach.
pub const MAX_VELOCITY: f32 = 8.0;

/// Placement attempts per sprite before generation fails.
pub const PLACEMENT_ATTEMPTS: usize = 100;

/// Offset between source and target per-image seeds.
pub const TARGET_SEED_OFFSET: u64 = 100_000;

pub const MANIFEST_VERSION: u32 = 1;

const CITYSCAPES: [&str; 19] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

/// What a scene element depicts, independent of the label numbering.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Road,
    Sky,
    Building,
    Vegetation,
    Car,
    Person,
}

/// Label numbering.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Taxonomy {
    /// road, sky, building, vegetation, car, person as 0..6.
    #[default]
    Desk6,
    /// The 19 Cityscapes evaluation classes; scenes use six of them.
    Cityscapes19,
}

impl Taxonomy {
    pub fn classes(self) -> usize {
        match self {
            Taxonomy::Desk6 => 6,
            Taxonomy::Cityscapes19 => 19,
        }
    }

    pub fn class_names(self) -> Vec<String> {
        match self {
            Taxonomy::Desk6 => ["road", "sky", "building", "vegetation", "car", "person"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            Taxonomy::Cityscapes19 => CITYSCAPES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn label(self, role: Role) -> u8 {
        match (self, role) {
            (Taxonomy::Desk6, Role::Road) => 0,
            (Taxonomy::Desk6, Role::Sky) => 1,
            (Taxonomy::Desk6, Role::Building) => 2,
            (Taxonomy::Desk6, Role::Vegetation) => 3,
            (Taxonomy::Desk6, Role::Car) => 4,
            (Taxonomy::Desk6, Role::Person) => 5,
            (Taxonomy::Cityscapes19, Role::Road) => 0,
            (Taxonomy::Cityscapes19, Role::Building) => 2,
            (Taxonomy::Cityscapes19, Role::Vegetation) => 8,
            (Taxonomy::Cityscapes19, Role::Sky) => 10,
            (Taxonomy::Cityscapes19, Role::Person) => 11,
            (Taxonomy::Cityscapes19, Role::Car) => 13,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MovingClass {
    Car,
    Person,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub taxonomy: Taxonomy,
    pub moving_classes: Vec<MovingClass>,
    /// Inclusive range of car sprites per scene.
    pub cars: (usize, usize),
    pub persons: (usize, usize),
    /// Speed range in px/frame.
    pub car_speed: (f32, f32),
    pub person_speed: (f32, f32),
    /// Peak texture deviation in 8-bit levels.
    pub texture_amplitude: f32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 96,
            taxonomy: Taxonomy::Desk6,
            moving_classes: vec![MovingClass::Car, MovingClass::Person],
            cars: (1, 3),
            persons: (1, 3),
            car_speed: (1.0, 4.0),
            person_speed: (0.5, 1.5),
            texture_amplitude: 40.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 48 || self.height < 32 {
            return invalid(format!(
                "scene must be at least 48x32, got {}x{}",
                self.width, self.height
            ));
        }
        if self.width > crate::imagecore::MAX_SIDE || self.height > crate::imagecore::MAX_SIDE {
            return invalid("scene side too large");
        }
        for (name, (lo, hi)) in [("car", self.cars), ("person", self.persons)] {
            if lo > hi {
                return invalid(format!("{name} count range is empty"));
            }
        }
        for (name, (lo, hi)) in [("car", self.car_speed), ("person", self.person_speed)] {
            if !(lo >= 0.0 && lo <= hi && hi <= MAX_VELOCITY) {
                return invalid(format!(
                    "{name} speed range must satisfy 0 <= lo <= hi <= {MAX_VELOCITY}"
                ));
            }
        }
        if !(self.texture_amplitude >= 0.0 && self.texture_amplitude <= 128.0) {
            return invalid("texture amplitude must lie in [0, 128]");
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.taxonomy.classes()
    }

    /// Per-class flag: does the class contain moving sprites.
    pub fn moving_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.classes()];
        for m in &self.moving_classes {
            let role = match m {
                MovingClass::Car => Role::Car,
                MovingClass::Person => Role::Person,
            };
            flags[self.taxonomy.label(role) as usize] = true;
        }
        flags
    }

    fn moves(&self, m: MovingClass) -> bool {
        self.moving_classes.contains(&m)
    }
}

/// Appearance change applied identically to both frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainShift {
    pub gamma: f32,
    pub gain: [f32; 3],
    pub noise_sigma: f32,
    /// 0: source palette and texture statistics, 1: target.
    pub texture_style: u32,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self::identity()
    }
}

impl DomainShift {
    pub fn identity() -> Self {
        Self {
            gamma: 1.0,
            gain: [1.0; 3],
            noise_sigma: 0.0,
            texture_style: 0,
        }
    }

    /// Default appearance of the target domain.
    pub fn target_default() -> Self {
        Self {
            gamma: 1.25,
            gain: [0.95, 1.0, 1.08],
            noise_sigma: 3.0,
            texture_style: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.5..=2.0).contains(&self.gamma) {
            return invalid(format!("gamma must lie in [0.5, 2], got {}", self.gamma));
        }
        if self.gain.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
            return invalid("channel gains must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return invalid("noise sigma must be non-negative");
        }
        if self.texture_style > 1 {
            return invalid(format!("unknown texture style {}", self.texture_style));
        }
        Ok(())
    }
}

type Rgb = [f32; 3];

struct Style {
    road: Rgb,
    marking: Rgb,
    sky: Rgb,
    buildings: [Rgb; 3],
    window: Rgb,
    vegetation: Rgb,
    cars: [Rgb; 5],
    glass: Rgb,
    tyre: Rgb,
    clothes: [Rgb; 4],
    skin: Rgb,
    /// Texture cells per pixel.
    frequency: f32,
    amplitude: f32,
}

const STYLES: [Style; 2] = [
    Style {
        road: [95.0, 95.0, 100.0],
        marking: [225.0, 225.0, 210.0],
        sky: [120.0, 170.0, 230.0],
        buildings: [
            [165.0, 110.0, 85.0],
            [185.0, 165.0, 130.0],
            [135.0, 125.0, 120.0],
        ],
        window: [60.0, 70.0, 90.0],
        vegetation: [55.0, 125.0, 45.0],
        cars: [
            [200.0, 30.0, 30.0],
            [30.0, 60.0, 180.0],
            [220.0, 220.0, 220.0],
            [35.0, 35.0, 35.0],
            [230.0, 200.0, 40.0],
        ],
        glass: [40.0, 50.0, 70.0],
        tyre: [20.0, 20.0, 20.0],
        clothes: [
            [180.0, 60.0, 60.0],
            [60.0, 60.0, 150.0],
            [70.0, 130.0, 70.0],
            [90.0, 80.0, 70.0],
        ],
        skin: [220.0, 180.0, 150.0],
        frequency: 0.18,
        amplitude: 1.0,
    },
    Style {
        road: [112.0, 106.0, 96.0],
        marking: [200.0, 195.0, 170.0],
        sky: [175.0, 185.0, 198.0],
        buildings: [
            [125.0, 128.0, 132.0],
            [150.0, 148.0, 140.0],
            [100.0, 96.0, 92.0],
        ],
        window: [80.0, 85.0, 88.0],
        vegetation: [80.0, 110.0, 55.0],
        cars: [
            [150.0, 25.0, 30.0],
            [25.0, 45.0, 110.0],
            [185.0, 185.0, 188.0],
            [55.0, 55.0, 60.0],
            [165.0, 125.0, 35.0],
        ],
        glass: [60.0, 65.0, 75.0],
        tyre: [30.0, 30.0, 30.0],
        clothes: [
            [120.0, 45.0, 50.0],
            [45.0, 50.0, 95.0],
            [60.0, 95.0, 60.0],
            [140.0, 120.0, 95.0],
        ],
        skin: [200.0, 165.0, 140.0],
        frequency: 0.3,
        amplitude: 1.3,
    },
];

fn hash2(ix: i32, iy: i32, seed: u32) -> f32 {
    let mut h = (ix as u32).wrapping_mul(0x27d4_eb2d)
        ^ (iy as u32).wrapping_mul(0x1656_67b1)
        ^ seed.wrapping_mul(0x9e37_79b9);
    h ^= h >> 15;
    h = h.wrapping_mul(0x85eb_ca6b);
    h ^= h >> 13;
    h = h.wrapping_mul(0xc2b2_ae35);
    h ^= h >> 16;
    h as f32 / u32::MAX as f32 * 2.0 - 1.0
}

/// Lattice value noise in [-1, 1], continuous in `(x, y)`.
fn value_noise(x: f32, y: f32, seed: u32) -> f32 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i32, fy as i32);
    let s = |t: f32| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (s(x - fx), s(y - fy));
    let a = hash2(ix, iy, seed);
    let b = hash2(ix + 1, iy, seed);
    let c = hash2(ix, iy + 1, seed);
    let d = hash2(ix + 1, iy + 1, seed);
    let top = a + (b - a) * tx;
    let bot = c + (d - c) * tx;
    top + (bot - top) * ty
}

fn fbm(x: f32, y: f32, seed: u32) -> f32 {
    0.65 * value_noise(x, y, seed) + 0.35 * value_noise(2.03 * x, 2.03 * y, seed ^ 0x5bd1_e995)
}

#[derive(Clone, Copy, Debug)]
struct Block {
    x0: f32,
    x1: f32,
    /// Building top; `None` marks a vegetated gap.
    top: Option<f32>,
    palette: usize,
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Sprite {
    kind: MovingClass,
    x0: f32,
    y0: f32,
    w: f32,
    h: f32,
    vx: f32,
    vy: f32,
    palette: usize,
    tex_seed: u32,
}

impl Sprite {
    /// Bounding box covering both frames.
    fn swept_box(&self) -> (f32, f32, f32, f32) {
        let (ax, ay) = (
            self.x0.min(self.x0 + self.vx),
            self.y0.min(self.y0 + self.vy),
        );
        let (bx, by) = (
            self.x0.max(self.x0 + self.vx) + self.w,
            self.y0.max(self.y0 + self.vy) + self.h,
        );
        (ax, ay, bx, by)
    }

    fn overlaps_heavily(&self, other: &Sprite) -> bool {
        let a = self.swept_box();
        let b = other.swept_box();
        let ix = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
        let iy = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
        let area = |r: (f32, f32, f32, f32)| (r.2 - r.0) * (r.3 - r.1);
        ix * iy > 0.5 * area(a).min(area(b))
    }

    /// Shape test in sprite-local coordinates; returns the part hit.
    fn part(&self, lx: f32, ly: f32) -> Option<Part> {
        if lx < 0.0 || ly < 0.0 || lx >= self.w || ly >= self.h {
            return None;
        }
        let (w, h) = (self.w, self.h);
        match self.kind {
            MovingClass::Car => {
                let roof = 0.42 * h;
                if ly < roof {
                    let (c0, c1) = (0.22 * w, 0.78 * w);
                    if lx < c0 || lx >= c1 {
                        return None;
                    }
                    let glass = ly > 0.12 * h
                        && lx > c0 + 0.05 * w
                        && lx < c1 - 0.05 * w
                        && (lx - 0.5 * w).abs() > 0.03 * w;
                    return Some(if glass { Part::Glass } else { Part::Body });
                }
                let r = 0.2 * h;
                for cx in [0.22 * w, 0.78 * w] {
                    let (dx, dy) = (lx - cx, ly - (h - r));
                    if dx * dx + dy * dy <= r * r {
                        return Some(Part::Tyre);
                    }
                }
                if ly >= h - r {
                    return None;
                }
                Some(Part::Body)
            }
            MovingClass::Person => {
                let r = 0.5 * w;
                if ly < 2.0 * r {
                    let (dx, dy) = (lx - 0.5 * w, ly - r);
                    return (dx * dx + dy * dy <= r * r).then_some(Part::Skin);
                }
                if ly > 0.6 * h && (lx - 0.5 * w).abs() < 0.12 * w {
                    return None;
                }
                Some(Part::Body)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Part {
    Body,
    Glass,
    Tyre,
    Skin,
}

/// Geometry of one scene: everything that determines labels and flow.
#[derive(Clone, Debug)]
struct Layout {
    width: usize,
    height: usize,
    horizon: f32,
    road_top: f32,
    lane_y: f32,
    blocks: Vec<Block>,
    blobs: Vec<Blob>,
    /// Back to front.
    sprites: Vec<Sprite>,
    tex_seed: u32,
}

fn range_f(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

impl Layout {
    fn generate(spec: &SceneSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (spec.width as f32, spec.height as f32);
        let horizon = range_f(&mut rng, 0.38 * h, 0.48 * h);
        let road_top = range_f(&mut rng, 0.56 * h, 0.64 * h);
        let lane_y = road_top + range_f(&mut rng, 0.3, 0.5) * (h - road_top);

        let mut blocks = Vec::new();
        let mut x = 0.0;
        while x < w {
            let bw = range_f(&mut rng, 0.08 * w, 0.28 * w);
            let top = if rng.random_bool(0.75) {
                Some(range_f(&mut rng, 0.08 * h, horizon - 2.0))
            } else {
                None
            };
            blocks.push(Block {
                x0: x,
                x1: x + bw,
                top,
                palette: rng.random_range(0..3),
            });
            x += bw;
        }

        let n_blobs = rng.random_range(1..=4);
        let blobs = (0..n_blobs)
            .map(|_| Blob {
                cx: range_f(&mut rng, 0.0, w),
                cy: range_f(&mut rng, horizon - 0.08 * h, road_top - 2.0),
                rx: range_f(&mut rng, 0.04 * w, 0.1 * w),
                ry: range_f(&mut rng, 0.05 * h, 0.11 * h),
            })
            .collect();

        let mut sprites: Vec<Sprite> = Vec::new();
        let n_cars = rng.random_range(spec.cars.0..=spec.cars.1);
        let n_persons = rng.random_range(spec.persons.0..=spec.persons.1);
        // cars are placed first so persons end up in front
        let kinds = std::iter::repeat_n(MovingClass::Car, n_cars)
            .chain(std::iter::repeat_n(MovingClass::Person, n_persons));
        for kind in kinds {
            let sprite = place_sprite(spec, kind, road_top, &sprites, &mut rng)?;
            sprites.push(sprite);
        }
        Ok(Layout {
            width: spec.width,
            height: spec.height,
            horizon,
            road_top,
            lane_y,
            blocks,
            blobs,
            sprites,
            tex_seed: rng.random(),
        })
    }

    /// Static background role at world point `(x, y)`.
    fn background(&self, x: f32, y: f32) -> (Role, usize, Option<&Block>) {
        if y >= self.road_top {
            return (Role::Road, 0, None);
        }
        for b in &self.blobs {
            let (dx, dy) = ((x - b.cx) / b.rx, (y - b.cy) / b.ry);
            if dx * dx + dy * dy <= 1.0 {
                return (Role::Vegetation, 0, None);
            }
        }
        let block = self
            .blocks
            .iter()
            .find(|b| x >= b.x0 && x < b.x1)
            .or(self.blocks.last().filter(|b| x >= b.x1))
            .or(self.blocks.first());
        match block {
            Some(b) => match b.top {
                Some(top) if y >= top => (Role::Building, b.palette, Some(b)),
                Some(_) => (Role::Sky, 0, None),
                None if y >= self.horizon => (Role::Vegetation, 0, None),
                None => (Role::Sky, 0, None),
            },
            None => (Role::Sky, 0, None),
        }
    }

    /// Color, role and velocity at world point `(x, y)` at time `t`.
    fn sample(&self, x: f32, y: f32, t: f32, style: &Style, amp: f32) -> (Rgb, Role, (f32, f32)) {
        let amp = amp * style.amplitude;
        let f = style.frequency;
        for s in self.sprites.iter().rev() {
            let (lx, ly) = (x - s.x0 - s.vx * t, y - s.y0 - s.vy * t);
            let Some(part) = s.part(lx, ly) else {
                continue;
            };
            let (base, role) = match (s.kind, part) {
                (MovingClass::Car, Part::Glass) => (style.glass, Role::Car),
                (MovingClass::Car, Part::Tyre) => (style.tyre, Role::Car),
                (MovingClass::Car, _) => (style.cars[s.palette % 5], Role::Car),
                (MovingClass::Person, Part::Skin) => (style.skin, Role::Person),
                (MovingClass::Person, _) => (style.clothes[s.palette % 4], Role::Person),
            };
            let col = textured(base, lx * f * 1.5, ly * f * 1.5, s.tex_seed, 0.6 * amp);
            return (col, role, (s.vx, s.vy));
        }
        let (role, palette, block) = self.background(x, y);
        let seed = self.tex_seed.wrapping_add(role as u32 * 7919);
        let col = match role {
            Role::Road => {
                let mark = (y - self.lane_y).abs() < 1.0 && (x / 12.0).rem_euclid(2.0) < 1.0;
                let base = if mark { style.marking } else { style.road };
                textured(base, x * f, y * f * 1.5, seed, amp)
            }
            Role::Sky => textured(style.sky, x * f * 0.4, y * f * 0.6, seed, 0.5 * amp),
            Role::Vegetation => {
                textured(style.vegetation, x * f * 1.4, y * f * 1.4, seed, 1.2 * amp)
            }
            Role::Building => {
                let b = block.expect("building without block");
                let (lx, ly) = (x - b.x0, y - b.top.unwrap_or(0.0));
                let window = lx.rem_euclid(8.0) >= 2.0
                    && lx.rem_euclid(8.0) < 6.0
                    && ly.rem_euclid(10.0) >= 3.0
                    && ly.rem_euclid(10.0) < 8.0
                    && lx > 1.0
                    && lx < b.x1 - b.x0 - 1.0;
                let base = if window {
                    style.window
                } else {
                    style.buildings[palette]
                };
                textured(base, x * f, y * f, seed ^ palette as u32, 0.8 * amp)
            }
            Role::Car | Role::Person => unreachable!(),
        };
        (col, role, (0.0, 0.0))
    }
}

fn textured(base: Rgb, x: f32, y: f32, seed: u32, amp: f32) -> Rgb {
    let lum = fbm(x, y, seed);
    let mut out = base;
    for (c, o) in out.iter_mut().enumerate() {
        let chroma = value_noise(
            0.7 * x + 13.1,
            0.7 * y - 7.3,
            seed.wrapping_add(c as u32 + 1),
        );
        *o += amp * (lum + 0.25 * chroma);
    }
    out
}

fn place_sprite(
    spec: &SceneSpec,
    kind: MovingClass,
    road_top: f32,
    placed: &[Sprite],
    rng: &mut ChaCha8Rng,
) -> Result<Sprite> {
    let (w, h) = (spec.width as f32, spec.height as f32);
    let (speed, moves) = match kind {
        MovingClass::Car => (spec.car_speed, spec.moves(MovingClass::Car)),
        MovingClass::Person => (spec.person_speed, spec.moves(MovingClass::Person)),
    };
    for _ in 0..PLACEMENT_ATTEMPTS {
        let bottom = range_f(rng, road_top + 3.0, h - 1.0);
        let depth = (bottom - road_top) / (h - road_top);
        let scale = (0.6 + 0.7 * depth) * h / 96.0;
        let (sw, sh) = match kind {
            MovingClass::Car => (
                scale * range_f(rng, 22.0, 30.0),
                scale * range_f(rng, 10.0, 13.0),
            ),
            MovingClass::Person => (
                scale * range_f(rng, 4.5, 6.5),
                scale * range_f(rng, 14.0, 19.0),
            ),
        };
        let (sw, sh) = (sw.round().max(3.0), sh.round().max(4.0));
        let (vx, vy) = if moves {
            let s = range_f(rng, speed.0, speed.1);
            let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            match kind {
                MovingClass::Car => (dir * s, 0.0),
                MovingClass::Person => {
                    let a = range_f(rng, -0.4, 0.4);
                    (dir * s * a.cos(), s * a.sin())
                }
            }
        } else {
            (0.0, 0.0)
        };
        let lo = 1.0f32.max(1.0 - vx);
        let hi = (w - sw - 1.0).min(w - sw - 1.0 - vx);
        if hi <= lo {
            continue;
        }
        let x0 = range_f(rng, lo, hi);
        let y0 = bottom - sh;
        if y0 < 0.0 || y0 + vy < 0.0 || bottom + vy > h {
            continue;
        }
        let sprite = Sprite {
            kind,
            x0,
            y0,
            w: sw,
            h: sh,
            vx,
            vy,
            palette: rng.random_range(0..5),
            tex_seed: rng.random(),
        };
        if placed.iter().all(|p| !p.overlaps_heavily(&sprite)) {
            return Ok(sprite);
        }
    }
    Err(Error::Generation(format!(
        "could not place a {kind:?} sprite after {PLACEMENT_ATTEMPTS} attempts"
    )))
}

/// Two frames with the labels and ground-truth flow of the first.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub frame_t: Image,
    pub frame_t1: Image,
    pub labels_t: LabelMap,
    pub gt_flow: FlowField,
}

fn photometric(v: f32, c: usize, shift: &DomainShift) -> f32 {
    let x = (v / 255.0).clamp(0.0, 1.0);
    255.0 * shift.gain[c] * x.powf(shift.gamma)
}

fn finish_frame(
    raw: Vec<f32>,
    w: usize,
    h: usize,
    shift: &DomainShift,
    noise_seed: u64,
) -> Result<Image> {
    let mut data = raw;
    for (i, v) in data.iter_mut().enumerate() {
        *v = photometric(*v, i % 3, shift);
    }
    if shift.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, shift.noise_sigma)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        for v in data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    for v in data.iter_mut() {
        *v = quantize_u8(*v) as f32;
    }
    Image::from_vec(w, h, 3, data)
}

struct Rendered {
    rgb: Vec<f32>,
    labels: Vec<u8>,
    flow: Vec<f32>,
}

fn render(
    layout: &Layout,
    spec: &SceneSpec,
    style: &Style,
    t: f32,
    offset: (f32, f32),
) -> Rendered {
    let (w, h) = (layout.width, layout.height);
    let rows: Vec<Rendered> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut r = Rendered {
                rgb: Vec::with_capacity(3 * w),
                labels: Vec::with_capacity(w),
                flow: Vec::with_capacity(2 * w),
            };
            for x in 0..w {
                let (col, role, (u, v)) = layout.sample(
                    x as f32 - offset.0,
                    y as f32 - offset.1,
                    t,
                    style,
                    spec.texture_amplitude,
                );
                r.rgb.extend_from_slice(&col);
                r.labels.push(spec.taxonomy.label(role));
                r.flow.extend_from_slice(&[u, v]);
            }
            r
        })
        .collect();
    let mut out = Rendered {
        rgb: Vec::with_capacity(3 * w * h),
        labels: Vec::with_capacity(w * h),
        flow: Vec::with_capacity(2 * w * h),
    };
    for r in rows {
        out.rgb.extend(r.rgb);
        out.labels.extend(r.labels);
        out.flow.extend(r.flow);
    }
    out
}

fn noise_seed(seed: u64, frame: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(frame + 1)
}

/// Renders one scene at two instants. Without a shift the source
/// appearance is used with no photometric change.
pub fn gen_scene_pair(
    spec: &SceneSpec,
    shift: Option<&DomainShift>,
    seed: u64,
) -> Result<ScenePair> {
    spec.validate()?;
    let identity = DomainShift::identity();
    let shift = shift.unwrap_or(&identity);
    shift.validate()?;
    let layout = Layout::generate(spec, seed)?;
    let style = &STYLES[shift.texture_style as usize];
    let (w, h) = (spec.width, spec.height);
    let f0 = render(&layout, spec, style, 0.0, (0.0, 0.0));
    let f1 = render(&layout, spec, style, 1.0, (0.0, 0.0));
    Ok(ScenePair {
        frame_t: finish_frame(f0.rgb, w, h, shift, noise_seed(seed, 0))?,
        frame_t1: finish_frame(f1.rgb, w, h, shift, noise_seed(seed, 1))?,
        labels_t: LabelMap::from_vec(w, h, f0.labels)?,
        gt_flow: FlowField::from_vec(w, h, f0.flow)?,
    })
}

/// Renders a scene with frozen sprites and its copy translated by
/// `(tx, ty)`; the ground-truth flow is that translation everywhere.
pub fn gen_translation_pair(
    spec: &SceneSpec,
    shift: Option<&DomainShift>,
    seed: u64,
    translation: (f32, f32),
) -> Result<ScenePair> {
    spec.validate()?;
    let identity = DomainShift::identity();
    let shift = shift.unwrap_or(&identity);
    shift.validate()?;
    let layout = Layout::generate(spec, seed)?;
    let style = &STYLES[shift.texture_style as usize];
    let (w, h) = (spec.width, spec.height);
    let f0 = render(&layout, spec, style, 0.0, (0.0, 0.0));
    let f1 = render(&layout, spec, style, 0.0, translation);
    Ok(ScenePair {
        frame_t: finish_frame(f0.rgb, w, h, shift, noise_seed(seed, 0))?,
        frame_t1: finish_frame(f1.rgb, w, h, shift, noise_seed(seed, 1))?,
        labels_t: LabelMap::from_vec(w, h, f0.labels)?,
        gt_flow: FlowField::constant(w, h, translation.0, translation.1)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainManifest {
    pub count: usize,
    pub seeds: Vec<u64>,
    pub shift: DomainShift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub classes: usize,
    pub class_names: Vec<String>,
    pub moving: Vec<bool>,
    pub spec: SceneSpec,
    pub source: DomainManifest,
    pub target: DomainManifest,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest version {}",
                m.version
            )));
        }
        Ok(m)
    }
}

/// File locations of one frame pair inside a dataset root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairPaths {
    pub frame_t: PathBuf,
    pub frame_t1: PathBuf,
    pub labels: PathBuf,
    pub flow_gt: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn dir(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

pub fn pair_paths(root: &Path, domain: Domain, i: usize) -> PairPaths {
    let d = root.join(domain.dir());
    let labels_dir = match domain {
        Domain::Source => "labels",
        Domain::Target => "eval_only",
    };
    PairPaths {
        frame_t: d.join("rgb").join(format!("{i}_t0.ppm")),
        frame_t1: d.join("rgb").join(format!("{i}_t1.ppm")),
        labels: d.join(labels_dir).join(format!("{i}.pgm")),
        flow_gt: d.join("flow_gt").join(format!("{i}.flo")),
    }
}

/// Writes `n_source` labeled source pairs and `n_target` target pairs,
/// target labels quarantined under `target/eval_only/`. Image `i` of the
/// source uses seed `seed + i`, of the target `seed + TARGET_SEED_OFFSET + i`.
pub fn gen_dataset(
    spec: &SceneSpec,
    shift_source: &DomainShift,
    shift_target: &DomainShift,
    n_source: usize,
    n_target: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    if n_source == 0 || n_target == 0 {
        return invalid("datasets need at least one source and one target pair");
    }
    spec.validate()?;
    shift_source.validate()?;
    shift_target.validate()?;
    for domain in [Domain::Source, Domain::Target] {
        let p = pair_paths(out_dir, domain, 0);
        for f in [&p.frame_t, &p.labels, &p.flow_gt] {
            fs::create_dir_all(f.parent().expect("dataset file has a parent"))?;
        }
    }
    let source_seeds: Vec<u64> = (0..n_source as u64).map(|i| seed.wrapping_add(i)).collect();
    let target_seeds: Vec<u64> = (0..n_target as u64)
        .map(|i| seed.wrapping_add(TARGET_SEED_OFFSET + i))
        .collect();
    let jobs: Vec<(Domain, usize, u64, &DomainShift)> = source_seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| (Domain::Source, i, s, shift_source))
        .chain(
            target_seeds
                .iter()
                .enumerate()
                .map(|(i, &s)| (Domain::Target, i, s, shift_target)),
        )
        .collect();
    jobs.par_iter()
        .try_for_each(|&(domain, i, s, shift)| -> Result<()> {
            let pair = gen_scene_pair(spec, Some(shift), s)?;
            let p = pair_paths(out_dir, domain, i);
            write_ppm(&p.frame_t, &pair.frame_t)?;
            write_ppm(&p.frame_t1, &pair.frame_t1)?;
            write_pgm_labels(&p.labels, &pair.labels_t)?;
            write_flo(&p.flow_gt, &pair.gt_flow)?;
            Ok(())
        })?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        classes: spec.classes(),
        class_names: spec.taxonomy.class_names(),
        moving: spec.moving_flags(),
        spec: spec.clone(),
        source: DomainManifest {
            count: n_source,
            seeds: source_seeds,
            shift: shift_source.clone(),
        },
        target: DomainManifest {
            count: n_target,
            seeds: target_seeds,
            shift: shift_target.clone(),
        },
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(out_dir.join("manifest.json"), json + "\n")?;
    Ok(manifest)
}
