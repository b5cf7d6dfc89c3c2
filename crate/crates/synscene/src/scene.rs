//! Scene layout and rasterization.
//!
//! A scene is a sky band above a ground plane plus a handful of boxes and
//! disks standing on the ground. Inverse depth is 0 in the sky, ramps linearly
//! on the ground from the row below the horizon (small) to 1 at the bottom row,
//! and is constant over each object. Objects are painted far to near, so the
//! nearer object owns every contested pixel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use tensorcore::Tensor;

use crate::error::{Result, SceneError};
use crate::spec::{DatasetSpec, CLASS_GROUND, CLASS_SKY};

const MAX_OBJECTS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ObjectShape {
    /// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
    Box { x0: usize, y0: usize, x1: usize, y1: usize },
    /// Pixel `(x, y)` is covered when its center lies within `r` of `(cx, cy)`.
    Disk { cx: f64, cy: f64, r: f64 },
}

impl ObjectShape {
    pub fn covers(&self, x: usize, y: usize) -> bool {
        match *self {
            ObjectShape::Box { x0, y0, x1, y1 } => (x0..x1).contains(&x) && (y0..y1).contains(&y),
            ObjectShape::Disk { cx, cy, r } => {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                dx * dx + dy * dy <= r * r
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: u32,
    pub shape: ObjectShape,
    /// Constant inverse depth in (0.2, 0.9).
    pub inv_depth: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub size: usize,
    /// Index of the last sky row.
    pub horizon: usize,
    pub sky_color: [f64; 3],
    pub ground_color: [f64; 3],
    pub objects: Vec<SceneObject>,
}

/// Noise-free raster of a layout, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub image: Vec<f64>,
    pub seg: Vec<u32>,
    pub inv_depth: Vec<f64>,
}

/// A rendered scene. Label fields are `None` when withheld from a view.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3 x H x W`, values in [0, 1].
    pub image: Tensor,
    /// Row-major `H x W` class map.
    pub seg: Option<Vec<u32>>,
    /// `1 x H x W` inverse depth in [0, 1].
    pub inv_depth: Option<Tensor>,
}

fn scene_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

/// Ground inverse depth on row `y` for a horizon at `horizon`.
pub fn ground_inv_depth(size: usize, horizon: usize, y: usize) -> f64 {
    (y - horizon) as f64 / (size - 1 - horizon) as f64
}

/// Deterministic layout for sample `index` of `spec`.
pub fn plan_scene(spec: &DatasetSpec, index: usize) -> Result<SceneLayout> {
    spec.validate()?;
    if index >= spec.size {
        return Err(SceneError::IndexOutOfRange { index, size: spec.size });
    }
    let n = spec.image_size;
    let mut rng = scene_rng(spec.seed, 2 * index as u64);
    let horizon = rng.random_range(n / 4..=n / 2);
    let sky_color = jitter(&mut rng, [0.55, 0.7, 0.95], 0.05);
    let ground_color = jitter(&mut rng, [0.5, 0.42, 0.28], 0.05);

    let density = spec.domain.object_density;
    let count = if density > 0.0 {
        let p = Poisson::new(density).map_err(|e| SceneError::InvalidSpec(e.to_string()))?;
        (p.sample(&mut rng) as usize).min(MAX_OBJECTS)
    } else {
        0
    };

    let depth_rows = (n - 1 - horizon) as f64;
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(2..spec.num_classes as u32);
        let inv_depth = rng.random_range(0.2..0.9);
        let bottom = (horizon + (inv_depth * depth_rows).round() as usize).clamp(horizon + 1, n - 1);
        let scale = 1.5 + inv_depth * 0.25 * n as f64;
        let cx = rng.random_range(0.0..n as f64);
        let shape = if class % 2 == 0 {
            let half_w = ((scale * rng.random_range(0.6..1.2)).round() as usize).max(1);
            let height = ((2.0 * scale * rng.random_range(0.6..1.2)).round() as usize).max(2);
            let c = cx as usize;
            ObjectShape::Box {
                x0: c.saturating_sub(half_w),
                y0: (bottom + 1).saturating_sub(height),
                x1: (c + half_w).min(n),
                y1: bottom + 1,
            }
        } else {
            let r = scale * rng.random_range(0.7..1.1);
            ObjectShape::Disk { cx, cy: (bottom + 1) as f64 - r, r }
        };
        let base = if class % 2 == 0 { [0.75, 0.2, 0.2] } else { [0.85, 0.75, 0.15] };
        let color = jitter(&mut rng, base, 0.1);
        objects.push(SceneObject { class, shape, inv_depth, color });
    }
    Ok(SceneLayout { size: n, horizon, sky_color, ground_color, objects })
}

pub fn rasterize(layout: &SceneLayout) -> Raster {
    let n = layout.size;
    let hw = n * n;
    let mut image = vec![0.0; 3 * hw];
    let mut seg = vec![CLASS_SKY; hw];
    let mut inv_depth = vec![0.0; hw];
    for y in 0..n {
        for x in 0..n {
            let p = y * n + x;
            let color = if y <= layout.horizon {
                let shade = 0.85 + 0.15 * y as f64 / layout.horizon.max(1) as f64;
                layout.sky_color.map(|c| c * shade)
            } else {
                let d = ground_inv_depth(n, layout.horizon, y);
                seg[p] = CLASS_GROUND;
                inv_depth[p] = d;
                layout.ground_color.map(|c| c * (0.55 + 0.45 * d))
            };
            for (ch, v) in color.iter().enumerate() {
                image[ch * hw + p] = *v;
            }
        }
    }
    let mut order: Vec<&SceneObject> = layout.objects.iter().collect();
    order.sort_by(|a, b| a.inv_depth.total_cmp(&b.inv_depth));
    for obj in order {
        for y in 0..n {
            for x in 0..n {
                if obj.shape.covers(x, y) {
                    let p = y * n + x;
                    seg[p] = obj.class;
                    inv_depth[p] = obj.inv_depth;
                    for ch in 0..3 {
                        image[ch * hw + p] = obj.color[ch];
                    }
                }
            }
        }
    }
    Raster { image, seg, inv_depth }
}

/// Applies gain, palette shift and Gaussian noise. The noise draws depend only
/// on `(seed, index)`, so renders differing only in `noise_sigma` share them.
fn apply_domain(spec: &DatasetSpec, index: usize, image: &mut [f64]) {
    let d = &spec.domain;
    let hw = spec.image_size * spec.image_size;
    let mut rng = scene_rng(spec.seed, 2 * index as u64 + 1);
    for (i, v) in image.iter_mut().enumerate() {
        let z: f64 = StandardNormal.sample(&mut rng);
        let ch = i / hw;
        *v = (d.illumination_gain * *v + d.palette_shift[ch] + d.noise_sigma * z).clamp(0.0, 1.0);
    }
}

/// Renders sample `index` of `spec` with full ground truth.
pub fn render_scene(spec: &DatasetSpec, index: usize) -> Result<Sample> {
    let layout = plan_scene(spec, index)?;
    let Raster { mut image, seg, inv_depth } = rasterize(&layout);
    apply_domain(spec, index, &mut image);
    let n = spec.image_size;
    Ok(Sample {
        image: Tensor::new(&[3, n, n], image)?,
        seg: Some(seg),
        inv_depth: Some(Tensor::new(&[1, n, n], inv_depth)?),
    })
}
