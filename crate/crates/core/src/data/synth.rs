//! Procedural panoptic data: two stuff regions split by a line, overlaid
//! with disks, squares and triangles in z-order.

use pmt_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::config::SyntheticSpec;
use crate::metrics::panoptic::{PanopticMap, SegmentInfo};

pub const NUM_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background-a", "background-b", "disk", "square", "triangle"];
const PALETTE: [[f64; 3]; NUM_CLASSES] = [
    [0.30, 0.30, 0.35],
    [0.55, 0.50, 0.35],
    [0.85, 0.20, 0.20],
    [0.20, 0.75, 0.30],
    [0.25, 0.35, 0.90],
];
pub const FIRST_THING_ID: u32 = 3;

pub fn is_thing(class: usize) -> bool {
    class >= 2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
}

impl Shape {
    pub fn class(self) -> usize {
        match self {
            Shape::Disk => 2,
            Shape::Square => 3,
            Shape::Triangle => 4,
        }
    }

    fn from_index(i: usize) -> Self {
        [Shape::Disk, Shape::Square, Shape::Triangle][i % 3]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeInstance {
    pub id: u32,
    pub shape: Shape,
    pub center: (f64, f64),
    pub radius: f64,
    pub angle: f64,
    pub color: [f64; 3],
}

impl ShapeInstance {
    /// Inclusion test at pixel centre `(x, y)`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        match self.shape {
            Shape::Disk => dx * dx + dy * dy <= self.radius * self.radius,
            Shape::Square => {
                let half = self.radius * 0.8;
                u.abs() <= half && v.abs() <= half
            }
            Shape::Triangle => {
                // Equilateral, circumradius `radius`: inside iff on the inner
                // side of all three edges (apothem = radius / 2).
                (0..3).all(|k| {
                    let phi = std::f64::consts::PI + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                    u * phi.cos() + v * phi.sin() <= self.radius * 0.5
                })
            }
        }
    }
}

/// One frame's layout: the stuff split line and the instances in z-order.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// Point on the split line and its normal; pixels with
    /// `(p - point) . normal >= 0` are background-b.
    pub split_point: (f64, f64),
    pub split_normal: (f64, f64),
    pub stuff_colors: [[f64; 3]; 2],
    pub instances: Vec<ShapeInstance>,
}

#[derive(Clone, Debug)]
pub struct ImageSample {
    /// `[3, H, W]`, roughly in `[0, 1]`.
    pub image: Tensor<f32>,
    pub panoptic: PanopticMap,
}

#[derive(Clone, Debug)]
pub struct ClipSample {
    pub frames: Vec<ImageSample>,
    /// `(id, frame)` of every object creation, in allocation order.
    pub spawned: Vec<(u32, usize)>,
    /// `(id, frame)` of every removal.
    pub despawned: Vec<(u32, usize)>,
}

/// `hash(base_seed, index)` used for per-sample seeds.
pub fn sample_seed(base: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(base ^ mix(index))
}

fn jitter(base: [f64; 3], amount: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    base.map(|c| c + if amount > 0.0 { rng.gen_range(-amount..amount) } else { 0.0 })
}

/// Pixel owners after z-order resolution: `Some(i)` is instance `i`.
fn owners(size: usize, instances: &[ShapeInstance]) -> Vec<Option<usize>> {
    let mut own = vec![None; size * size];
    for (i, inst) in instances.iter().enumerate() {
        for y in 0..size {
            for x in 0..size {
                if inst.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    own[y * size + x] = Some(i);
                }
            }
        }
    }
    own
}

/// Removes instances whose visible area falls below `min_area`, re-resolving
/// occlusion after every removal so uncovered pixels revert to whatever lies
/// beneath.
pub fn prune_small(size: usize, min_area: usize, instances: &mut Vec<ShapeInstance>) -> Vec<Option<usize>> {
    loop {
        let own = owners(size, instances);
        let mut area = vec![0usize; instances.len()];
        for i in own.iter().flatten() {
            area[*i] += 1;
        }
        match area.iter().position(|&a| a < min_area) {
            Some(i) => {
                instances.remove(i);
            }
            None => return own,
        }
    }
}

/// Renders a scene; `noise` is `[3, size, size]`. Instances must already be
/// pruned so every one is visible.
pub fn render_scene(size: usize, scene: &Scene, noise: &[f64]) -> ImageSample {
    let own = owners(size, &scene.instances);
    let mut ids = vec![0u32; size * size];
    let mut rgb = vec![0.0f32; 3 * size * size];
    let mut stuff_present = [false; 2];
    let mut thing_present = vec![false; scene.instances.len()];
    for y in 0..size {
        for x in 0..size {
            let px = y * size + x;
            let color = match own[px] {
                Some(i) => {
                    thing_present[i] = true;
                    ids[px] = scene.instances[i].id;
                    scene.instances[i].color
                }
                None => {
                    let (px_x, px_y) = (x as f64 + 0.5, y as f64 + 0.5);
                    let side = (px_x - scene.split_point.0) * scene.split_normal.0
                        + (px_y - scene.split_point.1) * scene.split_normal.1;
                    let s = usize::from(side >= 0.0);
                    stuff_present[s] = true;
                    ids[px] = 1 + s as u32;
                    scene.stuff_colors[s]
                }
            };
            for c in 0..3 {
                let i = c * size * size + px;
                rgb[i] = (color[c] + noise[i]) as f32;
            }
        }
    }
    let mut segments = Vec::new();
    for (s, present) in stuff_present.iter().enumerate() {
        if *present {
            segments.push(SegmentInfo {
                id: 1 + s as u32,
                class: s,
                is_thing: false,
            });
        }
    }
    for (inst, present) in scene.instances.iter().zip(&thing_present) {
        if *present {
            segments.push(SegmentInfo {
                id: inst.id,
                class: inst.shape.class(),
                is_thing: true,
            });
        }
    }
    ImageSample {
        image: Tensor::new(&[3, size, size], rgb).expect("sized buffer"),
        panoptic: PanopticMap {
            height: size,
            width: size,
            ids,
            segments,
        },
    }
}

fn noise_field(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = 3 * spec.image_size * spec.image_size;
    if spec.noise_std <= 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, spec.noise_std).expect("valid std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn random_stuff(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> ((f64, f64), (f64, f64), [[f64; 3]; 2]) {
    let s = spec.image_size as f64;
    let point = (rng.gen_range(0.2 * s..0.8 * s), rng.gen_range(0.2 * s..0.8 * s));
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let colors = [
        jitter(PALETTE[0], spec.color_jitter, rng),
        jitter(PALETTE[1], spec.color_jitter, rng),
    ];
    (point, (theta.cos(), theta.sin()), colors)
}

fn random_instance(spec: &SyntheticSpec, id: u32, rng: &mut ChaCha8Rng) -> ShapeInstance {
    let scale = spec.image_size as f64 / 64.0;
    let radius = rng.gen_range(spec.min_radius..=spec.max_radius) * scale;
    let s = spec.image_size as f64;
    let shape = Shape::from_index(rng.gen_range(0..3));
    ShapeInstance {
        id,
        shape,
        center: (rng.gen_range(radius * 0.5..s - radius * 0.5), rng.gen_range(radius * 0.5..s - radius * 0.5)),
        radius,
        angle: rng.gen_range(0.0..std::f64::consts::TAU),
        color: jitter(PALETTE[shape.class()], spec.color_jitter, rng),
    }
}

/// A single image from the given generator.
pub fn generate_image(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> ImageSample {
    let (split_point, split_normal, stuff_colors) = random_stuff(spec, rng);
    let count = rng.gen_range(spec.min_instances..=spec.max_instances);
    let mut instances: Vec<ShapeInstance> = (0..count)
        .map(|i| random_instance(spec, FIRST_THING_ID + i as u32, rng))
        .collect();
    prune_small(spec.image_size, spec.min_area, &mut instances);
    // Keep ids dense after pruning.
    for (i, inst) in instances.iter_mut().enumerate() {
        inst.id = FIRST_THING_ID + i as u32;
    }
    let noise = noise_field(spec, rng);
    let scene = Scene {
        split_point,
        split_normal,
        stuff_colors,
        instances,
    };
    render_scene(spec.image_size, &scene, &noise)
}

/// A shape with a constant per-frame displacement.
#[derive(Clone, Debug, PartialEq)]
pub struct MovingObject {
    pub instance: ShapeInstance,
    pub velocity: (f64, f64),
}

fn spawn_object(spec: &SyntheticSpec, id: u32, rng: &mut ChaCha8Rng) -> MovingObject {
    let instance = random_instance(spec, id, rng);
    let velocity = if spec.max_speed > 0.0 {
        (rng.gen_range(-spec.max_speed..=spec.max_speed), rng.gen_range(-spec.max_speed..=spec.max_speed))
    } else {
        (0.0, 0.0)
    };
    MovingObject { instance, velocity }
}

/// A clip of moving shapes. Noise and stuff layout are fixed for the clip,
/// objects move with constant velocity and bounce off the borders, and ids
/// are never reused.
pub fn generate_clip(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> ClipSample {
    let (split_point, split_normal, stuff_colors) = random_stuff(spec, rng);
    let noise = noise_field(spec, rng);
    let count = rng.gen_range(spec.min_instances..=spec.max_instances);
    let objects = (0..count)
        .map(|i| spawn_object(spec, FIRST_THING_ID + i as u32, rng))
        .collect();
    let stuff = Scene {
        split_point,
        split_normal,
        stuff_colors,
        instances: Vec::new(),
    };
    simulate_clip(spec, &stuff, &noise, objects, rng)
}

/// Runs the motion model from explicit initial objects over `spec.frames`
/// frames. `stuff` supplies the background; its instances are ignored.
pub fn simulate_clip(
    spec: &SyntheticSpec,
    stuff: &Scene,
    noise: &[f64],
    mut objects: Vec<MovingObject>,
    rng: &mut ChaCha8Rng,
) -> ClipSample {
    let s = spec.image_size as f64;
    let mut next_id = objects.iter().map(|o| o.instance.id + 1).max().unwrap_or(FIRST_THING_ID).max(FIRST_THING_ID);
    let mut spawned: Vec<(u32, usize)> = objects.iter().map(|o| (o.instance.id, 0)).collect();
    let mut despawned = Vec::new();
    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        if t > 0 {
            for o in objects.iter_mut() {
                let inst = &mut o.instance;
                for (p, v) in [(&mut inst.center.0, &mut o.velocity.0), (&mut inst.center.1, &mut o.velocity.1)] {
                    *p += *v;
                    if *p < 0.0 {
                        *p = -*p;
                        *v = -*v;
                    } else if *p > s {
                        *p = 2.0 * s - *p;
                        *v = -*v;
                    }
                }
            }
            if spec.despawn_prob > 0.0 {
                objects.retain(|o| {
                    let gone = rng.gen_bool(spec.despawn_prob);
                    if gone {
                        despawned.push((o.instance.id, t));
                    }
                    !gone
                });
            }
            if spec.spawn_prob > 0.0 && rng.gen_bool(spec.spawn_prob) {
                objects.push(spawn_object(spec, next_id, rng));
                spawned.push((next_id, t));
                next_id += 1;
            }
        }
        let mut visible: Vec<ShapeInstance> = objects.iter().map(|o| o.instance.clone()).collect();
        prune_small(spec.image_size, spec.min_area, &mut visible);
        let scene = Scene {
            instances: visible,
            ..stuff.clone()
        };
        frames.push(render_scene(spec.image_size, &scene, noise));
    }
    ClipSample {
        frames,
        spawned,
        despawned,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0000,
            Split::Val => 0x7661_6c00_0000_0000,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

fn rng_for(spec: &SyntheticSpec, split: Split, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sample_seed(spec.seed ^ split.tag(), index as u64))
}

/// The split's images; a pure function of `(spec, split)`.
pub fn image_split(spec: &SyntheticSpec, split: Split) -> Vec<ImageSample> {
    let n = match split {
        Split::Train => spec.train_images,
        Split::Val => spec.val_images,
    };
    (0..n)
        .into_par_iter()
        .map(|i| generate_image(spec, &mut rng_for(spec, split, i)))
        .collect()
}

/// The split's clips; clip seeds are disjoint from image seeds.
pub fn clip_split(spec: &SyntheticSpec, split: Split) -> Vec<ClipSample> {
    let n = match split {
        Split::Train => spec.train_clips,
        Split::Val => spec.val_clips,
    };
    (0..n)
        .into_par_iter()
        .map(|i| generate_clip(spec, &mut rng_for(spec, split, usize::MAX - i)))
        .collect()
}
