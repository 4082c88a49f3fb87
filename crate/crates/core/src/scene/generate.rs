use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::camera::{Camera, Pose, NEAR_EPS};
use super::SceneBundle;
use crate::error::{Error, Result};
use crate::seed;

/// Smallest raster cell (pixels) an object footprint may occupy.
const MIN_CELL_PX: usize = 8;
const MAX_DEPTH_M: f64 = 60.0;
const PROTOTYPE_SEED: u64 = 0x05EE_D0FF_1E1D;

/// A kind of synthetic object: an axis-aligned box, or a plane when one
/// extent is zero.
#[derive(Clone, Copy, Debug)]
pub struct ObjectShape {
    pub name: &'static str,
    /// Extent along camera x, y, z in meters before per-instance scaling.
    pub dims: [f64; 3],
    pub color: [f64; 3],
}

pub const OBJECT_SHAPES: [ObjectShape; 6] = [
    ObjectShape { name: "cube", dims: [0.5, 0.5, 0.5], color: [0.8, 0.3, 0.2] },
    ObjectShape { name: "pillar", dims: [0.25, 1.0, 0.25], color: [0.3, 0.7, 0.3] },
    ObjectShape { name: "bar", dims: [1.0, 0.25, 0.3], color: [0.2, 0.3, 0.8] },
    ObjectShape { name: "panel", dims: [0.8, 0.8, 0.0], color: [0.9, 0.8, 0.2] },
    ObjectShape { name: "slab", dims: [0.6, 0.2, 0.8], color: [0.6, 0.2, 0.7] },
    ObjectShape { name: "tall_panel", dims: [0.4, 1.0, 0.0], color: [0.2, 0.8, 0.8] },
];

pub fn n_object_types() -> usize {
    OBJECT_SHAPES.len()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// One object per cell of a shuffled grid, at independent depths.
    Grid,
    /// All objects side by side in one row at a shared depth, nearly touching.
    Row,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Layout::Grid),
            "row" => Ok(Layout::Row),
            other => Err(Error::InvalidSpec(format!("unknown layout `{other}` (grid or row)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub n_objects: usize,
    pub points_per_object_range: (usize, usize),
    pub feature_dim: usize,
    pub imbalance_exponent: f64,
    pub noise_sigma: f64,
    pub layout: Layout,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_objects: 6,
            points_per_object_range: (32, 192),
            feature_dim: 32,
            imbalance_exponent: 1.0,
            noise_sigma: 0.05,
            layout: Layout::Grid,
            seed: 0,
        }
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.points_per_object_range;
        if self.n_objects == 0 {
            return Err(Error::InvalidSpec("n_objects must be at least 1".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::InvalidSpec("feature_dim must be at least 2".into()));
        }
        if lo == 0 || lo > hi {
            return Err(Error::InvalidSpec(format!("bad points_per_object_range ({lo}, {hi})")));
        }
        if !(self.imbalance_exponent.is_finite() && self.imbalance_exponent >= 0.0) {
            return Err(Error::InvalidSpec("imbalance_exponent must be finite and >= 0".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidSpec("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Stand-in for a frozen 2D encoder: one unit prototype per region plus
/// per-pixel Gaussian noise.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField {
    pub prototypes: Vec<Vec<f64>>,
    pub noise_sigma: f64,
}

impl FeatureField {
    /// Prototypes are shared by object type across all scenes, so geometry
    /// determines the feature a region should receive.
    pub fn for_types(region_types: &[u32], feature_dim: usize, noise_sigma: f64) -> Self {
        let bank = type_prototypes(feature_dim);
        Self {
            prototypes: region_types.iter().map(|&t| bank[t as usize].clone()).collect(),
            noise_sigma,
        }
    }
}

/// One fixed unit vector per object type.
pub fn type_prototypes(feature_dim: usize) -> Vec<Vec<f64>> {
    let mut rng = seed::stream(PROTOTYPE_SEED, &[feature_dim as u64]);
    (0..OBJECT_SHAPES.len())
        .map(|_| {
            let v: Vec<f64> = (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Point count of the object at `rank`: a power law in rank scaled into the
/// configured range, with a multiplicative draw in `[0.75, 1]`.
pub fn object_point_count(range: (usize, usize), exponent: f64, rank: usize, draw: f64) -> usize {
    let (lo, hi) = (range.0 as f64, range.1 as f64);
    (lo + (hi - lo) * ((rank + 1) as f64).powf(-exponent) * draw).round() as usize
}

/// Relative frequency of each object type: `(t + 1)^-exponent`.
pub fn type_weights(exponent: f64) -> Vec<f64> {
    (0..OBJECT_SHAPES.len())
        .map(|t| ((t + 1) as f64).powf(-exponent))
        .collect()
}

struct Placement {
    center: [f64; 3],
    dims: [f64; 3],
}

struct CellRect {
    u: (f64, f64),
    v: (f64, f64),
}

fn corners(p: &Placement) -> impl Iterator<Item = [f64; 3]> + '_ {
    (0..8).map(move |i| {
        let s = |bit: usize, axis: usize| {
            if i >> bit & 1 == 1 {
                0.5 * p.dims[axis]
            } else {
                -0.5 * p.dims[axis]
            }
        };
        [p.center[0] + s(0, 0), p.center[1] + s(1, 1), p.center[2] + s(2, 2)]
    })
}

/// Projected `(u_min, u_max, v_min, v_max)` of a box in the camera frame.
fn footprint(cam: &Camera, p: &Placement) -> Option<(f64, f64, f64, f64)> {
    let mut fp = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for c in corners(p) {
        if c[2] <= NEAR_EPS {
            return None;
        }
        let u = cam.fx * c[0] / c[2] + cam.cx;
        let v = cam.fy * c[1] / c[2] + cam.cy;
        fp = (fp.0.min(u), fp.1.max(u), fp.2.min(v), fp.3.max(v));
    }
    Some(fp)
}

fn inside(fp: (f64, f64, f64, f64), rect: &CellRect) -> bool {
    fp.0 >= rect.u.0 && fp.1 <= rect.u.1 && fp.2 >= rect.v.0 && fp.3 <= rect.v.1
}

/// Pixel rectangle whose rounded cells stay inside `[lo, hi)` on each axis.
fn cell_rect(u: (usize, usize), v: (usize, usize)) -> CellRect {
    CellRect {
        u: (u.0 as f64 + 1.0, u.1 as f64 - 1.5),
        v: (v.0 as f64 + 1.0, v.1 as f64 - 1.5),
    }
}

/// Places a box so its whole projection lies inside `cell`, pushing it back
/// until it fits.
fn place(cam: &Camera, cell: &CellRect, pixel: (f64, f64), dims: [f64; 3], mut near: f64) -> Result<Placement> {
    loop {
        let p = Placement {
            center: [
                (pixel.0 - cam.cx) * near / cam.fx,
                (pixel.1 - cam.cy) * near / cam.fy,
                near + 0.5 * dims[2],
            ],
            dims,
        };
        if footprint(cam, &p).is_some_and(|fp| inside(fp, cell)) {
            return Ok(p);
        }
        near *= 1.05;
        if near > MAX_DEPTH_M {
            return Err(Error::InvalidSpec("objects cannot fit the frustum".into()));
        }
    }
}

/// One object per grid cell (cells shuffled), each at its own depth.
fn grid_layout(rng: &mut ChaCha8Rng, cam: &Camera, dims: &[[f64; 3]]) -> Result<Vec<Placement>> {
    let n = dims.len();
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (cw, ch) = (cam.width / cols, cam.height / rows);
    if cw < MIN_CELL_PX || ch < MIN_CELL_PX {
        return Err(Error::InvalidSpec(format!(
            "{n} objects cannot fit the frustum ({cw}x{ch} px cells)"
        )));
    }
    let mut cells: Vec<usize> = (0..rows * cols).collect();
    cells.shuffle(rng);
    let fill = 0.7;
    dims.iter()
        .zip(cells)
        .map(|(d, cell)| {
            let (cu, cv) = (cell % cols, cell / cols);
            let rect = cell_rect((cu * cw, (cu + 1) * cw), (cv * ch, (cv + 1) * ch));
            let center = (
                0.5 * (rect.u.0 + rect.u.1) + rng.random_range(-0.1..0.1) * cw as f64,
                0.5 * (rect.v.0 + rect.v.1) + rng.random_range(-0.1..0.1) * ch as f64,
            );
            let near = (cam.fx * d[0] / (fill * cw as f64)).max(cam.fy * d[1] / (fill * ch as f64));
            place(cam, &rect, center, *d, (near * rng.random_range(1.0..1.4)).max(0.5))
        })
        .collect()
}

/// All objects in one horizontal row at a shared depth, separated by the
/// smallest metric gap that keeps their projections at least
/// `ROW_GAP_PX` apart.
fn row_layout(cam: &Camera, dims: &[[f64; 3]]) -> Result<Vec<Placement>> {
    const ROW_GAP_PX: f64 = 2.0;
    if cam.width / dims.len() < MIN_CELL_PX {
        return Err(Error::InvalidSpec(format!(
            "{} objects cannot fit the frustum in one row",
            dims.len()
        )));
    }
    let frame = cell_rect((0, cam.width), (0, cam.height));
    let total_x: f64 = dims.iter().map(|d| d[0]).sum();
    let max_y = dims.iter().map(|d| d[1]).fold(0.0, f64::max);
    let mut near = (cam.fx * total_x / (0.9 * cam.width as f64))
        .max(cam.fy * max_y / (0.9 * cam.height as f64))
        .max(0.5);
    'depth: loop {
        if near > MAX_DEPTH_M {
            return Err(Error::InvalidSpec(format!(
                "{} objects cannot fit the frustum in one row",
                dims.len()
            )));
        }
        let mut gap = 0.01;
        loop {
            let width = total_x + gap * (dims.len() - 1) as f64;
            let mut x = -0.5 * width;
            let placements: Vec<Placement> = dims
                .iter()
                .map(|d| {
                    let p = Placement {
                        center: [x + 0.5 * d[0], 0.0, near + 0.5 * d[2]],
                        dims: *d,
                    };
                    x += d[0] + gap;
                    p
                })
                .collect();
            let fps: Vec<_> = placements.iter().map(|p| footprint(cam, p)).collect();
            if fps.iter().any(|fp| !fp.is_some_and(|fp| inside(fp, &frame))) {
                near *= 1.05;
                continue 'depth;
            }
            let fps: Vec<_> = fps.into_iter().flatten().collect();
            if fps.windows(2).all(|w| w[1].0 - w[0].1 >= ROW_GAP_PX) {
                return Ok(placements);
            }
            gap += 0.01;
        }
    }
}

fn sample_surface(rng: &mut ChaCha8Rng, p: &Placement) -> [f64; 3] {
    let [dx, dy, dz] = p.dims;
    let areas = [dy * dz, dx * dz, dx * dy];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut axis = 2;
    for (a, &area) in areas.iter().enumerate() {
        if pick < area {
            axis = a;
            break;
        }
        pick -= area;
    }
    let mut offset = [0.0; 3];
    for (k, o) in offset.iter_mut().enumerate() {
        *o = if k == axis {
            if rng.random_bool(0.5) {
                0.5 * p.dims[k]
            } else {
                -0.5 * p.dims[k]
            }
        } else {
            (rng.random::<f64>() - 0.5) * p.dims[k]
        };
    }
    [p.center[0] + offset[0], p.center[1] + offset[1], p.center[2] + offset[2]]
}

/// Generates one synthetic frame whose mask raster is the exact projection of
/// the ground-truth regions.
pub fn generate_scene(spec: &SceneSpec) -> Result<SceneBundle> {
    spec.validate()?;
    let mut rng = seed::stream(spec.seed, &[1]);
    let n = spec.n_objects;

    let pose = Pose::yaw(
        rng.random_range(-0.35..0.35),
        [
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        ],
    );
    let camera = Camera::desk(pose);

    let counts: Vec<usize> = (0..n)
        .map(|i| {
            let draw = rng.random_range(0.75..=1.0);
            object_point_count(spec.points_per_object_range, spec.imbalance_exponent, i, draw)
        })
        .collect();
    let type_dist = WeightedIndex::new(type_weights(spec.imbalance_exponent))
        .map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let region_types: Vec<u32> = (0..n).map(|_| type_dist.sample(&mut rng) as u32).collect();

    let dims: Vec<[f64; 3]> = region_types
        .iter()
        .map(|&t| {
            let s = rng.random_range(0.85..1.15);
            OBJECT_SHAPES[t as usize].dims.map(|d| d * s)
        })
        .collect();
    let placements = match spec.layout {
        Layout::Grid => grid_layout(&mut rng, &camera, &dims)?,
        Layout::Row => row_layout(&camera, &dims)?,
    };

    let mut points = Vec::new();
    let mut colors = Vec::new();
    let mut gt_region = Vec::new();
    for (r, (p, &count)) in placements.iter().zip(&counts).enumerate() {
        let base = OBJECT_SHAPES[region_types[r] as usize].color;
        for _ in 0..count {
            let world = camera.pose.invert(sample_surface(&mut rng, p));
            points.push(world.map(|v| v as f32));
            let c: [f32; 3] = std::array::from_fn(|k| {
                let jitter: f64 = rng.sample(StandardNormal);
                (base[k] + 0.03 * jitter).clamp(0.0, 1.0) as f32
            });
            colors.push(c);
            gt_region.push(r as i32);
        }
    }

    let (w, h) = (camera.width, camera.height);
    let mut mask = vec![-1i32; w * h];
    for r in 0..n {
        let mut lo = (usize::MAX, usize::MAX);
        let mut hi = (0, 0);
        for (p, _) in points.iter().zip(&gt_region).filter(|(_, &g)| g == r as i32) {
            let px = camera.project_point(p.map(f64::from))?;
            let (col, row) = px
                .cell(w, h)
                .ok_or_else(|| Error::Inconsistency(format!("region {r} point left the raster")))?;
            lo = (lo.0.min(col), lo.1.min(row));
            hi = (hi.0.max(col), hi.1.max(row));
        }
        for row in lo.1..=hi.1 {
            for col in lo.0..=hi.0 {
                let cell = &mut mask[row * w + col];
                if *cell != -1 {
                    return Err(Error::Inconsistency(format!("regions {} and {r} overlap", *cell)));
                }
                *cell = r as i32;
            }
        }
    }

    let field = FeatureField::for_types(&region_types, spec.feature_dim, spec.noise_sigma);
    let l = spec.feature_dim;
    let mut feat2d = vec![0.0f32; w * h * l];
    for (pix, &id) in mask.iter().enumerate() {
        if id < 0 {
            continue;
        }
        let proto = &field.prototypes[id as usize];
        for k in 0..l {
            let noise: f64 = rng.sample(StandardNormal);
            feat2d[pix * l + k] = (proto[k] + spec.noise_sigma * noise) as f32;
        }
    }

    let bundle = SceneBundle {
        points,
        colors: Some(colors),
        camera,
        gt_region,
        mask,
        feat2d,
        feature_dim: l,
        region_count: n,
        region_types,
        noise_sigma: spec.noise_sigma,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// `n_scenes` bundles; scene `k` is generated from a seed derived from
/// `(spec.seed, k)`.
pub fn generate_dataset(spec: &SceneSpec, n_scenes: usize) -> Result<Vec<SceneBundle>> {
    (0..n_scenes)
        .map(|k| {
            generate_scene(&SceneSpec {
                seed: seed::derive(spec.seed, &[k as u64]),
                ..spec.clone()
            })
        })
        .collect()
}
