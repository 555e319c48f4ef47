use std::time::Instant;

use bytemuck::{Pod, Zeroable};
use lbsplat_core::render::TILE_SIZE;
use lbsplat_core::{Camera, Image, PosedGaussians, Splat2D, StageTimings};

use crate::context::{dispatch, groups, WG};
use crate::{Gpu, Result};

const RADIX_BITS: u32 = 4;
const RADIX: u32 = 1 << RADIX_BITS;

/// Splat as laid out in GPU buffers: (mean, extent), (conic, depth),
/// (color, opacity). Negative opacity marks a culled splat.
#[repr(C)]
#[derive(Clone, Copy, Debug, Pod, Zeroable)]
pub struct GpuSplat {
    pub s0: [f32; 4],
    pub s1: [f32; 4],
    pub s2: [f32; 4],
}

impl From<&Splat2D> for GpuSplat {
    fn from(s: &Splat2D) -> Self {
        Self {
            s0: [s.mean[0], s.mean[1], s.extent[0], s.extent[1]],
            s1: [s.conic[0], s.conic[1], s.conic[2], s.depth],
            s2: [s.color[0], s.color[1], s.color[2], s.opacity],
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Pod, Zeroable)]
pub(crate) struct CameraUniform {
    rows: [[f32; 4]; 3],
    focal: [f32; 4],
    clip: [f32; 4],
    count: [u32; 4],
}

impl CameraUniform {
    pub fn new(cam: &Camera, n_splats: u32) -> Self {
        let r = &cam.rotation;
        let t = &cam.translation;
        let (tiles_x, tiles_y) = tile_grid(cam.width, cam.height);
        Self {
            rows: [0, 1, 2].map(|i| [r[i][0], r[i][1], r[i][2], t[i]]),
            focal: [cam.fx, cam.fy, cam.cx, cam.cy],
            clip: [cam.near, cam.far, cam.width as f32, cam.height as f32],
            count: [n_splats, tiles_x, tiles_y, 0],
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Pod, Zeroable)]
struct ScanParams {
    n: u32,
    blocks: u32,
    _pad: [u32; 2],
}

#[repr(C)]
#[derive(Clone, Copy, Pod, Zeroable)]
struct SortParams {
    n: u32,
    blocks: u32,
    shift: u32,
    hi_word: u32,
    splats: u32,
    tiles_x: u32,
    _pad: [u32; 2],
}

#[repr(C)]
#[derive(Clone, Copy, Pod, Zeroable)]
struct RasterParams {
    width: u32,
    height: u32,
    tiles_x: u32,
    tiles_y: u32,
}

fn tile_grid(width: u32, height: u32) -> (u32, u32) {
    (width.div_ceil(TILE_SIZE), height.div_ceil(TILE_SIZE))
}

/// Key, depth and splat-index columns of one sort buffer.
struct Keys {
    hi: wgpu::Buffer,
    lo: wgpu::Buffer,
    val: wgpu::Buffer,
}

impl Keys {
    fn new(gpu: &Gpu, n: u32) -> Self {
        let size = n as u64 * 4;
        Self {
            hi: gpu.scratch("keys hi", size),
            lo: gpu.scratch("keys lo", size),
            val: gpu.scratch("keys val", size),
        }
    }
}

impl Gpu {
    /// Exclusive in-place prefix sum of the first `n` words of `data`; the
    /// total lands in `total[0]`.
    fn encode_scan(
        &self,
        enc: &mut wgpu::CommandEncoder,
        data: &wgpu::Buffer,
        n: u32,
        total: &wgpu::Buffer,
    ) -> Result<()> {
        let p = &self.pipelines;
        let blocks = groups(n, WG)?;
        let params = self.uniform(
            "scan params",
            &ScanParams {
                n,
                blocks,
                _pad: [0; 2],
            },
        );
        let sums = self.scratch("block sums", blocks as u64 * 4);
        let bg_blocks = self.bind(&p.scan_blocks, 0, &[(0, &params), (1, data), (2, &sums)]);
        let bg_sums = self.bind(&p.scan_sums, 0, &[(0, &params), (2, &sums), (3, total)]);
        let bg_add = self.bind(&p.add_offsets, 0, &[(0, &params), (1, data), (2, &sums)]);
        enc.clear_buffer(total, 0, None);
        dispatch(enc, &p.scan_blocks, &[&bg_blocks], blocks, 1);
        dispatch(enc, &p.scan_sums, &[&bg_sums], 1, 1);
        dispatch(enc, &p.add_offsets, &[&bg_add], blocks, 1);
        Ok(())
    }

    /// Bins, sorts and composites `n` projected splats held in `splats`.
    /// `camera` only needs its splat count and tile grid filled in.
    pub(crate) fn composite(
        &self,
        splats: &wgpu::Buffer,
        camera: &wgpu::Buffer,
        n: u32,
        width: u32,
        height: u32,
        timings: &mut StageTimings,
    ) -> Result<Image> {
        let p = &self.pipelines;
        let (tiles_x, tiles_y) = tile_grid(width, height);
        let n_tiles = tiles_x * tiles_y;

        // Tile footprints, then key offsets by exclusive scan.
        let t = Instant::now();
        let rects = self.scratch("rects", n as u64 * 16);
        let counts = self.scratch("tile counts", n as u64 * 4);
        let offsets = self.scratch("key offsets", n as u64 * 4);
        let total = self.scratch("key total", 4);
        let bg = self.bind(&p.footprint, 0, &[(0, camera), (3, splats), (4, &rects), (5, &counts)]);
        let mut enc = self.encoder();
        dispatch(&mut enc, &p.footprint, &[&bg], groups(n, WG)?, 1);
        timings.projection_ms += self.submit_wait(enc, t)?;

        let t = Instant::now();
        let mut enc = self.encoder();
        enc.copy_buffer_to_buffer(&counts, 0, &offsets, 0, (n as u64 * 4).max(16));
        self.encode_scan(&mut enc, &offsets, n, &total)?;
        self.queue.submit([enc.finish()]);
        let n_keys = u32::from_le_bytes(self.read(&total, 4)?[..4].try_into().unwrap());
        if n_keys == 0 {
            timings.sort_ms += t.elapsed().as_secs_f64() * 1e3;
            return Ok(Image::transparent(width, height));
        }

        let mut enc = self.encoder();
        let blocks = groups(n_keys, WG)?;
        let sort_params = |shift: u32, hi_word: u32| {
            self.uniform(
                "sort params",
                &SortParams {
                    n: n_keys,
                    blocks,
                    shift,
                    hi_word,
                    splats: n,
                    tiles_x,
                    _pad: [0; 2],
                },
            )
        };
        let mut a = Keys::new(self, n_keys);
        let mut b = Keys::new(self, n_keys);
        let base = sort_params(0, 0);
        let g0 = self.bind(&p.emit, 0, &[(0, &base)]);
        let g1 = self.bind(
            &p.emit,
            1,
            &[
                (0, splats),
                (1, &rects),
                (2, &counts),
                (3, &offsets),
                (4, &a.hi),
                (5, &a.lo),
                (6, &a.val),
            ],
        );
        dispatch(&mut enc, &p.emit, &[&g0, &g1], groups(n, WG)?, 1);

        // Stable LSD passes: every depth digit, then the tile digits in use.
        let tile_bits = u32::BITS - (n_tiles - 1).leading_zeros();
        let passes = (0..32 / RADIX_BITS)
            .map(|i| (i * RADIX_BITS, 0))
            .chain((0..tile_bits.div_ceil(RADIX_BITS)).map(|i| (i * RADIX_BITS, 1)));
        let hist = self.scratch("histogram", (RADIX * blocks) as u64 * 4);
        let hist_total = self.scratch("histogram total", 4);
        for (shift, hi_word) in passes {
            let params = sort_params(shift, hi_word);
            let h0 = self.bind(&p.histogram, 0, &[(0, &params)]);
            let h1 = self.bind(&p.histogram, 1, &[(0, &a.hi), (1, &a.lo), (3, &hist)]);
            dispatch(&mut enc, &p.histogram, &[&h0, &h1], blocks, 1);
            self.encode_scan(&mut enc, &hist, RADIX * blocks, &hist_total)?;
            let s0 = self.bind(&p.scatter, 0, &[(0, &params)]);
            let s1 = self.bind(
                &p.scatter,
                1,
                &[
                    (0, &a.hi),
                    (1, &a.lo),
                    (2, &a.val),
                    (3, &hist),
                    (4, &b.hi),
                    (5, &b.lo),
                    (6, &b.val),
                ],
            );
            dispatch(&mut enc, &p.scatter, &[&s0, &s1], blocks, 1);
            std::mem::swap(&mut a, &mut b);
        }

        let ranges = self.scratch("tile ranges", n_tiles as u64 * 8);
        enc.clear_buffer(&ranges, 0, None);
        let r0 = self.bind(&p.tile_ranges, 0, &[(0, &base)]);
        let r1 = self.bind(&p.tile_ranges, 1, &[(0, &a.hi), (1, &ranges)]);
        dispatch(&mut enc, &p.tile_ranges, &[&r0, &r1], blocks, 1);
        timings.sort_ms += self.submit_wait(enc, t)?;

        let t = Instant::now();
        let image_bytes = width as u64 * height as u64 * 16;
        let image = self.scratch("image", image_bytes);
        let rp = self.uniform(
            "raster params",
            &RasterParams {
                width,
                height,
                tiles_x,
                tiles_y,
            },
        );
        let bg = self.bind(
            &p.rasterize,
            0,
            &[(0, &rp), (1, splats), (2, &a.val), (3, &ranges), (4, &image)],
        );
        let mut enc = self.encoder();
        enc.clear_buffer(&image, 0, None);
        dispatch(&mut enc, &p.rasterize, &[&bg], tiles_x, tiles_y);
        timings.raster_ms += self.submit_wait(enc, t)?;

        let bytes = self.read(&image, image_bytes)?;
        let floats: &[f32] = bytemuck::cast_slice(&bytes[..image_bytes as usize]);
        Ok(Image {
            width,
            height,
            pixels: floats.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
        })
    }

    /// Tiled GPU rasterization of splats projected on the CPU.
    pub fn rasterize(&self, splats: &[Splat2D], width: u32, height: u32) -> Result<Image> {
        if width == 0 || height == 0 {
            return Err(lbsplat_core::Error::Precondition("empty image".into()).into());
        }
        let n =
            u32::try_from(splats.len()).map_err(|_| crate::GpuError::Unsupported("more than 2^32 splats".into()))?;
        let packed: Vec<GpuSplat> = splats.iter().map(GpuSplat::from).collect();
        let buf = self.storage("splats", bytemuck::cast_slice(&packed));
        let mut cam = CameraUniform::zeroed();
        let (tiles_x, tiles_y) = tile_grid(width, height);
        cam.count = [n, tiles_x, tiles_y, 0];
        let cam = self.uniform("camera", &cam);
        self.composite(&buf, &cam, n, width, height, &mut StageTimings::default())
    }

    /// Projects and renders host-side posed Gaussians on the GPU.
    pub fn render_gaussians(&self, posed: &PosedGaussians, cam: &Camera) -> Result<(Image, StageTimings)> {
        cam.check()?;
        let n =
            u32::try_from(posed.len()).map_err(|_| crate::GpuError::Unsupported("more than 2^32 Gaussians".into()))?;
        let rows: Vec<[f32; 16]> = (0..posed.len())
            .map(|k| {
                let (p, r, s, c) = (posed.positions[k], posed.rotations[k], posed.scales[k], posed.colors[k]);
                [
                    p[0],
                    p[1],
                    p[2],
                    posed.opacities[k],
                    r[0],
                    r[1],
                    r[2],
                    r[3],
                    s[0],
                    s[1],
                    s[2],
                    0.0,
                    c[0],
                    c[1],
                    c[2],
                    0.0,
                ]
            })
            .collect();
        let posed = self.storage("posed", bytemuck::cast_slice(&rows));
        let mut timings = StageTimings::default();
        let image = self.render_device(&posed, n, cam, &mut timings)?;
        Ok((image, timings))
    }

    /// Projection plus [`Gpu::composite`] for posed Gaussians already on the device.
    pub(crate) fn render_device(
        &self,
        posed: &wgpu::Buffer,
        n: u32,
        cam: &Camera,
        timings: &mut StageTimings,
    ) -> Result<Image> {
        let p = &self.pipelines;
        let t = Instant::now();
        let camera = self.uniform("camera", &CameraUniform::new(cam, n));
        let splats = self.scratch("splats", n as u64 * 48);
        let bg = self.bind(&p.project, 0, &[(0, &camera), (1, posed), (2, &splats)]);
        let mut enc = self.encoder();
        dispatch(&mut enc, &p.project, &[&bg], groups(n, WG)?, 1);
        timings.projection_ms += self.submit_wait(enc, t)?;
        self.composite(&splats, &camera, n, cam.width, cam.height, timings)
    }
}
