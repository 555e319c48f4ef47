//! Splat projection and CPU rasterization.
//!
//! Camera space follows the pinhole convention x right, y down, z forward.
//! Pixel `(x, y)` is sampled at its center `(x + 0.5, y + 0.5)`. A splat
//! contributes to a pixel when the center lies inside the splat's 3σ
//! bounding box and its alpha is at least 1/255; compositing is front to
//! back by (depth, splat index) and stops once transmittance drops below
//! 1/255. The reference and tiled rasterizers and the GPU shader all follow
//! exactly these rules.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrective::PosedGaussians;
use crate::decode::{decode_frame, StageTimings};
use crate::error::{Error, Result};
use crate::model::AvatarModel;
use crate::pose::Pose;

pub const TILE_SIZE: u32 = 16;
/// Added to the diagonal of every screen-space covariance, in px².
pub const COV_DILATION: f32 = 0.3;
pub const ALPHA_MIN: f32 = 1.0 / 255.0;
pub const T_MIN: f32 = 1.0 / 255.0;
/// Half-extent multiplier of the tile footprint, in standard deviations.
pub const EXTENT_SIGMA: f32 = 3.0;
/// Screen-space clamp of the Jacobian, as a multiple of the half field of view.
const GUARD_BAND: f32 = 1.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// World-to-camera rotation, row-major.
    pub rotation: [[f32; 3]; 3],
    pub translation: [f32; 3],
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    pub width: u32,
    pub height: u32,
    pub near: f32,
    pub far: f32,
}

impl Camera {
    /// Camera at `eye` looking at `target`, with `fov_y` the vertical field
    /// of view in radians and the principal point at the image center.
    pub fn look_at(eye: [f32; 3], target: [f32; 3], up: [f32; 3], fov_y: f32, width: u32, height: u32) -> Self {
        let eye = glam::Vec3::from(eye);
        let f = (glam::Vec3::from(target) - eye).normalize();
        let r = f.cross(glam::Vec3::from(up)).normalize();
        let d = f.cross(r);
        let fy = 0.5 * height as f32 / (0.5 * fov_y).tan();
        Self {
            rotation: [r.to_array(), d.to_array(), f.to_array()],
            translation: [-r.dot(eye), -d.dot(eye), -f.dot(eye)],
            fx: fy,
            fy,
            cx: 0.5 * width as f32,
            cy: 0.5 * height as f32,
            width,
            height,
            near: 0.01,
            far: 100.0,
        }
    }

    /// Front view of a standing avatar whose feet are at y = 0 and which
    /// faces +z.
    pub fn front(width: u32, height: u32) -> Self {
        Self::look_at([0.0, 0.9, 3.2], [0.0, 0.9, 0.0], [0.0, 1.0, 0.0], 0.6, width, height)
    }

    pub fn check(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.near > 0.0
            && self.far > self.near
            && self.width > 0
            && self.height > 0
            && self
                .rotation
                .iter()
                .flatten()
                .chain(&self.translation)
                .all(|v| v.is_finite())
            && [self.cx, self.cy].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Precondition(format!("invalid camera {self:?}")))
        }
    }

    pub fn to_camera(&self, p: [f32; 3]) -> [f32; 3] {
        let r = &self.rotation;
        let mut out = self.translation;
        for (i, o) in out.iter_mut().enumerate() {
            *o += r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Splat2D {
    pub mean: [f32; 2],
    /// Inverse screen covariance `[a, b, c]` for `[[a, b], [b, c]]`.
    pub conic: [f32; 3],
    /// Half-widths of the 3σ bounding box, in pixels.
    pub extent: [f32; 2],
    pub depth: f32,
    pub color: [f32; 3],
    pub opacity: f32,
}

impl Splat2D {
    /// Screen covariance recovered from the conic.
    pub fn covariance(&self) -> [f32; 3] {
        let [a, b, c] = self.conic;
        let det = a * c - b * b;
        [c / det, -b / det, a / det]
    }

    /// Alpha at pixel center `(px, py)`, or `None` when the splat does not
    /// contribute there.
    #[inline]
    pub fn alpha_at(&self, px: f32, py: f32) -> Option<f32> {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        if dx.abs() > self.extent[0] || dy.abs() > self.extent[1] {
            return None;
        }
        let [a, b, c] = self.conic;
        let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
        if power > 0.0 {
            return None;
        }
        let alpha = (self.opacity * power.exp()).min(1.0);
        (alpha >= ALPHA_MIN).then_some(alpha)
    }
}

/// Projects posed Gaussians; culled Gaussians are dropped, the rest keep
/// their relative order.
pub fn project_gaussians(posed: &PosedGaussians, cam: &Camera) -> Result<Vec<Splat2D>> {
    cam.check()?;
    Ok((0..posed.len()).filter_map(|k| project_one(posed, k, cam)).collect())
}

fn project_one(g: &PosedGaussians, k: usize, cam: &Camera) -> Option<Splat2D> {
    let [x, y, z] = cam.to_camera(g.positions[k]);
    if !(z > cam.near && z < cam.far) {
        return None;
    }
    // Σ = R S² Rᵀ in world space, then W Σ Wᵀ into camera space.
    let [qx, qy, qz, qw] = g.rotations[k];
    let rot = glam::Mat3::from_quat(glam::Quat::from_xyzw(qx, qy, qz, qw).normalize());
    let s = glam::Vec3::from(g.scales[k]);
    let m = rot * glam::Mat3::from_diagonal(s);
    let sigma = m * m.transpose();
    let w = glam::Mat3::from_cols_array_2d(&cam.rotation).transpose();
    let sigma_cam = w * sigma * w.transpose();

    let lim_x = GUARD_BAND * (0.5 * cam.width as f32) / cam.fx;
    let lim_y = GUARD_BAND * (0.5 * cam.height as f32) / cam.fy;
    let tx = (x / z).clamp(-lim_x, lim_x) * z;
    let ty = (y / z).clamp(-lim_y, lim_y) * z;
    let j = glam::Mat3::from_cols(
        glam::Vec3::new(cam.fx / z, 0.0, 0.0),
        glam::Vec3::new(0.0, cam.fy / z, 0.0),
        glam::Vec3::new(-cam.fx * tx / (z * z), -cam.fy * ty / (z * z), 0.0),
    );
    let cov = j * sigma_cam * j.transpose();
    let (sxx, sxy, syy) = (cov.x_axis.x + COV_DILATION, cov.y_axis.x, cov.y_axis.y + COV_DILATION);
    let det = sxx * syy - sxy * sxy;
    if !(det > 0.0) {
        return None;
    }
    let conic = [syy / det, -sxy / det, sxx / det];
    let mean = [cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy];
    let extent = [EXTENT_SIGMA * sxx.sqrt(), EXTENT_SIGMA * syy.sqrt()];
    let outside = mean[0] + extent[0] < 0.0
        || mean[0] - extent[0] > cam.width as f32
        || mean[1] + extent[1] < 0.0
        || mean[1] - extent[1] > cam.height as f32;
    if outside || !mean.iter().chain(&conic).all(|v| v.is_finite()) {
        return None;
    }
    Some(Splat2D {
        mean,
        conic,
        extent,
        depth: z,
        color: g.colors[k],
        opacity: g.opacities[k],
    })
}

/// Premultiplied RGBA image over a transparent background.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[f32; 4]>,
}

impl Image {
    pub fn transparent(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            pixels: vec![[0.0; 4]; (width * height) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> [f32; 4] {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn to_rgba8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }

    /// Largest per-channel absolute difference; infinite for mismatched sizes.
    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        if (self.width, self.height) != (other.width, other.height) {
            return f32::INFINITY;
        }
        self.pixels
            .iter()
            .zip(&other.pixels)
            .flat_map(|(a, b)| (0..4).map(move |c| (a[c] - b[c]).abs()))
            .fold(0.0, f32::max)
    }
}

/// Order-preserving map from f32 to u32 (sign-flip trick).
pub fn sortable_depth(d: f32) -> u32 {
    let bits = d.to_bits();
    if bits & 0x8000_0000 != 0 {
        !bits
    } else {
        bits | 0x8000_0000
    }
}

#[inline]
fn composite<'a>(splats: impl Iterator<Item = &'a Splat2D>, px: f32, py: f32) -> [f32; 4] {
    let mut rgb = [0f32; 3];
    let mut t = 1f32;
    for s in splats {
        let Some(alpha) = s.alpha_at(px, py) else {
            continue;
        };
        let w = alpha * t;
        for c in 0..3 {
            rgb[c] += s.color[c] * w;
        }
        t *= 1.0 - alpha;
        if t < T_MIN {
            break;
        }
    }
    [rgb[0], rgb[1], rgb[2], 1.0 - t]
}

fn front_to_back(splats: &[Splat2D]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..splats.len() as u32).collect();
    order.sort_by_key(|&i| (sortable_depth(splats[i as usize].depth), i));
    order
}

/// Single-threaded reference rasterizer: one global depth sort, every splat
/// tested at every pixel.
pub fn rasterize_cpu(splats: &[Splat2D], width: u32, height: u32) -> Image {
    let order = front_to_back(splats);
    let sorted: Vec<&Splat2D> = order.iter().map(|&i| &splats[i as usize]).collect();
    let mut img = Image::transparent(width, height);
    for y in 0..height {
        for x in 0..width {
            img.pixels[(y * width + x) as usize] = composite(sorted.iter().copied(), x as f32 + 0.5, y as f32 + 0.5);
        }
    }
    img
}

/// Per-tile splat lists built the way the GPU pipeline builds them: one key
/// `(tile << 32) | depth` per overlapped tile, radix sorted, then split into
/// contiguous per-tile ranges.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TileBins {
    pub tiles_x: u32,
    pub tiles_y: u32,
    /// Sorted `(key, splat)` pairs.
    pub keys: Vec<u64>,
    pub values: Vec<u32>,
    /// Per tile `[start, end)` into `keys`.
    pub ranges: Vec<[u32; 2]>,
}

/// Inclusive tile rectangle overlapped by a splat's bounding box.
pub fn tile_rect(s: &Splat2D, tiles_x: u32, tiles_y: u32) -> Option<[u32; 4]> {
    let t = TILE_SIZE as f32;
    // Pixel centers x + 0.5 within mean ± extent, widened by one pixel so
    // rounding here can never drop a pixel that the per-pixel test accepts.
    let x0 = (s.mean[0] - s.extent[0] - 0.5).floor().max(0.0);
    let y0 = (s.mean[1] - s.extent[1] - 0.5).floor().max(0.0);
    let x1 = (s.mean[0] + s.extent[0] - 0.5).ceil();
    let y1 = (s.mean[1] + s.extent[1] - 0.5).ceil();
    if x1 < x0 || y1 < y0 || !(x1 >= 0.0 && y1 >= 0.0) {
        return None;
    }
    let tx0 = (x0 / t) as u32;
    let ty0 = (y0 / t) as u32;
    let tx1 = ((x1 / t) as u32).min(tiles_x - 1);
    let ty1 = ((y1 / t) as u32).min(tiles_y - 1);
    (tx0 <= tx1 && ty0 <= ty1).then_some([tx0, ty0, tx1, ty1])
}

/// Stable LSD radix sort of `keys` (8-bit digits), permuting `values` along.
/// Passes whose digit is constant across all keys are skipped.
pub fn radix_sort_pairs(keys: &mut Vec<u64>, values: &mut Vec<u32>) {
    let n = keys.len();
    let mut k2 = vec![0u64; n];
    let mut v2 = vec![0u32; n];
    for pass in 0..8 {
        let shift = pass * 8;
        let mut counts = [0usize; 256];
        for &k in keys.iter() {
            counts[((k >> shift) & 0xff) as usize] += 1;
        }
        if counts.contains(&n) {
            continue;
        }
        let mut offsets = [0usize; 256];
        let mut acc = 0;
        for d in 0..256 {
            offsets[d] = acc;
            acc += counts[d];
        }
        for i in 0..n {
            let d = ((keys[i] >> shift) & 0xff) as usize;
            k2[offsets[d]] = keys[i];
            v2[offsets[d]] = values[i];
            offsets[d] += 1;
        }
        std::mem::swap(keys, &mut k2);
        std::mem::swap(values, &mut v2);
    }
}

pub fn bin_splats(splats: &[Splat2D], width: u32, height: u32) -> TileBins {
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for (i, s) in splats.iter().enumerate() {
        let Some([tx0, ty0, tx1, ty1]) = tile_rect(s, tiles_x, tiles_y) else {
            continue;
        };
        let depth = sortable_depth(s.depth) as u64;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                keys.push(((ty * tiles_x + tx) as u64) << 32 | depth);
                values.push(i as u32);
            }
        }
    }
    radix_sort_pairs(&mut keys, &mut values);
    let n_tiles = (tiles_x * tiles_y) as usize;
    let mut ranges = vec![[0u32; 2]; n_tiles];
    let mut start = 0;
    while start < keys.len() {
        let tile = (keys[start] >> 32) as usize;
        let mut end = start;
        while end < keys.len() && (keys[end] >> 32) as usize == tile {
            end += 1;
        }
        ranges[tile] = [start as u32, end as u32];
        start = end;
    }
    TileBins {
        tiles_x,
        tiles_y,
        keys,
        values,
        ranges,
    }
}

/// Tiled rasterizer, parallel over tile rows. Produces the same image as
/// [`rasterize_cpu`].
pub fn rasterize_tiled(splats: &[Splat2D], width: u32, height: u32) -> Image {
    let bins = bin_splats(splats, width, height);
    composite_bins(splats, &bins, width, height)
}

pub fn composite_bins(splats: &[Splat2D], bins: &TileBins, width: u32, height: u32) -> Image {
    let mut img = Image::transparent(width, height);
    let row_len = (width * TILE_SIZE) as usize;
    img.pixels.par_chunks_mut(row_len).enumerate().for_each(|(ty, rows)| {
        for tx in 0..bins.tiles_x {
            let [a, b] = bins.ranges[(ty as u32 * bins.tiles_x + tx) as usize];
            let list = &bins.values[a as usize..b as usize];
            for ly in 0..TILE_SIZE {
                let y = ty as u32 * TILE_SIZE + ly;
                if y >= height {
                    break;
                }
                for lx in 0..TILE_SIZE {
                    let x = tx * TILE_SIZE + lx;
                    if x >= width {
                        break;
                    }
                    rows[(ly * width + x) as usize] = composite(
                        list.iter().map(|&i| &splats[i as usize]),
                        x as f32 + 0.5,
                        y as f32 + 0.5,
                    );
                }
            }
        }
    });
    img
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Projects, bins and rasterizes posed Gaussians on the CPU, filling the
/// projection, sort and raster stages of `timings`.
pub fn render_posed(posed: &PosedGaussians, cam: &Camera, timings: &mut StageTimings) -> Result<Image> {
    let t = Instant::now();
    let splats = project_gaussians(posed, cam)?;
    timings.projection_ms = ms(t);
    let t = Instant::now();
    let bins = bin_splats(&splats, cam.width, cam.height);
    timings.sort_ms = ms(t);
    let t = Instant::now();
    let img = composite_bins(&splats, &bins, cam.width, cam.height);
    timings.raster_ms = ms(t);
    Ok(img)
}

/// Decodes `pose` and renders it on the CPU.
pub fn render_frame(model: &AvatarModel, pose: &Pose, cam: &Camera) -> Result<(Image, StageTimings)> {
    cam.check()?;
    let (posed, mut timings) = decode_frame(model, pose)?;
    let img = render_posed(&posed, cam, &mut timings)?;
    Ok((img, timings))
}
