//! wgpu compute path: per-frame avatar decode and tiled splat rasterization.
//!
//! Kernels follow the CPU reference in `lbsplat-core` operation for
//! operation, so images agree to within float reassociation.

mod avatar;
mod context;
mod tiles;

pub use avatar::GpuAvatar;
pub use context::Gpu;
pub use tiles::GpuSplat;

pub mod shaders {
    pub const DECODE: &str = include_str!("shaders/decode.wgsl");
    pub const PROJECT: &str = include_str!("shaders/project.wgsl");
    pub const SCAN: &str = include_str!("shaders/scan.wgsl");
    pub const SORT: &str = include_str!("shaders/sort.wgsl");
    pub const RASTER: &str = include_str!("shaders/raster.wgsl");

    pub const ALL: [(&str, &str); 5] = [
        ("decode", DECODE),
        ("project", PROJECT),
        ("scan", SCAN),
        ("sort", SORT),
        ("raster", RASTER),
    ];
}

#[derive(Debug, thiserror::Error)]
pub enum GpuError {
    #[error("no GPU adapter available ({0}); use the CPU renderer instead")]
    NoAdapter(String),
    #[error("GPU device request failed: {0}")]
    Device(String),
    #[error("unsupported on the GPU path: {0}")]
    Unsupported(String),
    #[error("GPU readback failed: {0}")]
    Readback(String),
    #[error(transparent)]
    Core(#[from] lbsplat_core::Error),
}

pub type Result<T> = std::result::Result<T, GpuError>;
