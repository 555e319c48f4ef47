use std::time::Instant;

use wgpu::util::DeviceExt;

use crate::{shaders, GpuError, Result};

pub(crate) const WG: u32 = 256;
const MIN_BUFFER: u64 = 16;

pub(crate) struct Pipelines {
    pub mlp: wgpu::ComputePipeline,
    pub combine_dense: wgpu::ComputePipeline,
    pub combine_sparse: wgpu::ComputePipeline,
    pub nodes: wgpu::ComputePipeline,
    pub interpolate: wgpu::ComputePipeline,
    pub skin: wgpu::ComputePipeline,
    pub project: wgpu::ComputePipeline,
    pub footprint: wgpu::ComputePipeline,
    pub scan_blocks: wgpu::ComputePipeline,
    pub scan_sums: wgpu::ComputePipeline,
    pub add_offsets: wgpu::ComputePipeline,
    pub emit: wgpu::ComputePipeline,
    pub histogram: wgpu::ComputePipeline,
    pub scatter: wgpu::ComputePipeline,
    pub tile_ranges: wgpu::ComputePipeline,
    pub rasterize: wgpu::ComputePipeline,
}

/// Device, queue and compiled kernels.
pub struct Gpu {
    pub(crate) device: wgpu::Device,
    pub(crate) queue: wgpu::Queue,
    pub(crate) pipelines: Pipelines,
    info: wgpu::AdapterInfo,
}

impl Gpu {
    /// Opens the default adapter. Fails with [`GpuError::NoAdapter`] on
    /// machines without a usable backend.
    pub fn new() -> Result<Self> {
        let instance = wgpu::Instance::new(&wgpu::InstanceDescriptor::default());
        let adapter = pollster::block_on(instance.request_adapter(&wgpu::RequestAdapterOptions {
            power_preference: wgpu::PowerPreference::HighPerformance,
            force_fallback_adapter: false,
            compatible_surface: None,
        }))
        .map_err(|e| GpuError::NoAdapter(e.to_string()))?;
        let info = adapter.get_info();
        let (device, queue) = pollster::block_on(adapter.request_device(&wgpu::DeviceDescriptor {
            label: Some("lbsplat"),
            required_limits: adapter.limits(),
            ..Default::default()
        }))
        .map_err(|e| GpuError::Device(e.to_string()))?;
        let pipelines = Pipelines::new(&device);
        Ok(Self {
            device,
            queue,
            pipelines,
            info,
        })
    }

    pub fn adapter_name(&self) -> String {
        format!("{} ({:?})", self.info.name, self.info.backend)
    }

    pub(crate) fn storage(&self, label: &str, data: &[u8]) -> wgpu::Buffer {
        let mut bytes = data.to_vec();
        let padded = (bytes.len() as u64).max(MIN_BUFFER).next_multiple_of(4);
        bytes.resize(padded as usize, 0);
        self.device.create_buffer_init(&wgpu::util::BufferInitDescriptor {
            label: Some(label),
            contents: &bytes,
            usage: wgpu::BufferUsages::STORAGE | wgpu::BufferUsages::COPY_SRC | wgpu::BufferUsages::COPY_DST,
        })
    }

    pub(crate) fn scratch(&self, label: &str, size: u64) -> wgpu::Buffer {
        self.device.create_buffer(&wgpu::BufferDescriptor {
            label: Some(label),
            size: size.max(MIN_BUFFER).next_multiple_of(4),
            usage: wgpu::BufferUsages::STORAGE | wgpu::BufferUsages::COPY_SRC | wgpu::BufferUsages::COPY_DST,
            mapped_at_creation: false,
        })
    }

    pub(crate) fn uniform<T: bytemuck::Pod>(&self, label: &str, value: &T) -> wgpu::Buffer {
        let mut bytes = bytemuck::bytes_of(value).to_vec();
        bytes.resize(bytes.len().max(MIN_BUFFER as usize).next_multiple_of(16), 0);
        self.device.create_buffer_init(&wgpu::util::BufferInitDescriptor {
            label: Some(label),
            contents: &bytes,
            usage: wgpu::BufferUsages::UNIFORM | wgpu::BufferUsages::COPY_DST,
        })
    }

    pub(crate) fn bind(
        &self,
        pipeline: &wgpu::ComputePipeline,
        group: u32,
        buffers: &[(u32, &wgpu::Buffer)],
    ) -> wgpu::BindGroup {
        let entries: Vec<wgpu::BindGroupEntry> = buffers
            .iter()
            .map(|&(binding, b)| wgpu::BindGroupEntry {
                binding,
                resource: b.as_entire_binding(),
            })
            .collect();
        self.device.create_bind_group(&wgpu::BindGroupDescriptor {
            label: None,
            layout: &pipeline.get_bind_group_layout(group),
            entries: &entries,
        })
    }

    pub(crate) fn encoder(&self) -> wgpu::CommandEncoder {
        self.device
            .create_command_encoder(&wgpu::CommandEncoderDescriptor::default())
    }

    /// Submits and blocks until the queue drains; returns wall time in ms.
    pub(crate) fn submit_wait(&self, encoder: wgpu::CommandEncoder, started: Instant) -> Result<f64> {
        self.queue.submit([encoder.finish()]);
        self.device
            .poll(wgpu::PollType::Wait)
            .map_err(|e| GpuError::Readback(e.to_string()))?;
        Ok(started.elapsed().as_secs_f64() * 1e3)
    }

    pub(crate) fn read(&self, src: &wgpu::Buffer, size: u64) -> Result<Vec<u8>> {
        let size = size.next_multiple_of(4);
        if size == 0 {
            return Ok(Vec::new());
        }
        let staging = self.device.create_buffer(&wgpu::BufferDescriptor {
            label: Some("readback"),
            size,
            usage: wgpu::BufferUsages::MAP_READ | wgpu::BufferUsages::COPY_DST,
            mapped_at_creation: false,
        });
        let mut enc = self.encoder();
        enc.copy_buffer_to_buffer(src, 0, &staging, 0, size);
        self.queue.submit([enc.finish()]);
        let slice = staging.slice(..);
        let (tx, rx) = std::sync::mpsc::channel();
        slice.map_async(wgpu::MapMode::Read, move |r| {
            let _ = tx.send(r);
        });
        self.device
            .poll(wgpu::PollType::Wait)
            .map_err(|e| GpuError::Readback(e.to_string()))?;
        rx.recv()
            .map_err(|e| GpuError::Readback(e.to_string()))?
            .map_err(|e| GpuError::Readback(e.to_string()))?;
        let bytes = slice.get_mapped_range().to_vec();
        staging.unmap();
        Ok(bytes)
    }
}

pub(crate) fn groups(n: u32, per: u32) -> Result<u32> {
    let g = n.div_ceil(per);
    if g > 65_535 {
        return Err(GpuError::Unsupported(format!(
            "{n} items exceed one dispatch dimension"
        )));
    }
    Ok(g)
}

pub(crate) fn dispatch(
    enc: &mut wgpu::CommandEncoder,
    pipeline: &wgpu::ComputePipeline,
    bind_groups: &[&wgpu::BindGroup],
    x: u32,
    y: u32,
) {
    if x == 0 || y == 0 {
        return;
    }
    let mut pass = enc.begin_compute_pass(&wgpu::ComputePassDescriptor::default());
    pass.set_pipeline(pipeline);
    for (i, bg) in bind_groups.iter().enumerate() {
        pass.set_bind_group(i as u32, *bg, &[]);
    }
    pass.dispatch_workgroups(x, y, 1);
}

impl Pipelines {
    fn new(device: &wgpu::Device) -> Self {
        let module = |label: &str, src: &str| {
            device.create_shader_module(wgpu::ShaderModuleDescriptor {
                label: Some(label),
                source: wgpu::ShaderSource::Wgsl(src.into()),
            })
        };
        let decode = module("decode", shaders::DECODE);
        let project = module("project", shaders::PROJECT);
        let scan = module("scan", shaders::SCAN);
        let sort = module("sort", shaders::SORT);
        let raster = module("raster", shaders::RASTER);
        let pipe = |m: &wgpu::ShaderModule, entry: &str| {
            device.create_compute_pipeline(&wgpu::ComputePipelineDescriptor {
                label: Some(entry),
                layout: None,
                module: m,
                entry_point: Some(entry),
                compilation_options: Default::default(),
                cache: None,
            })
        };
        Self {
            mlp: pipe(&decode, "mlp"),
            combine_dense: pipe(&decode, "combine_dense"),
            combine_sparse: pipe(&decode, "combine_sparse"),
            nodes: pipe(&decode, "nodes"),
            interpolate: pipe(&decode, "interpolate"),
            skin: pipe(&decode, "skin_gaussians"),
            project: pipe(&project, "project"),
            footprint: pipe(&project, "footprint"),
            scan_blocks: pipe(&scan, "scan_blocks"),
            scan_sums: pipe(&scan, "scan_sums"),
            add_offsets: pipe(&scan, "add_offsets"),
            emit: pipe(&sort, "emit"),
            histogram: pipe(&sort, "histogram"),
            scatter: pipe(&sort, "scatter"),
            tile_ranges: pipe(&sort, "tile_ranges"),
            rasterize: pipe(&raster, "rasterize"),
        }
    }
}
