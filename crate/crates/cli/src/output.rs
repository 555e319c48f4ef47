use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use lbsplat_core::Image;
use serde::Serialize;

/// A failed command: exit code and message for stderr.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn domain(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

macro_rules! domain_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::domain(e.to_string())
            }
        }
    )*};
}

domain_from!(
    lbsplat_core::Error,
    lbsplat_gpu::GpuError,
    serde_json::Error,
    png::EncodingError
);

pub type CmdResult<T = ()> = Result<T, Failure>;

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::domain(format!("{}: {e}", path.display()))
}

pub fn read(path: &Path) -> CmdResult<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}

pub fn write(path: &Path, bytes: &[u8]) -> CmdResult {
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(path, s.as_bytes())
}

/// Prints `value` as JSON or the text lines from `text`.
pub fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> Vec<String>) -> CmdResult {
    let mut out = std::io::stdout().lock();
    let r = if json {
        writeln!(out, "{}", serde_json::to_string_pretty(value)?)
    } else {
        text().iter().try_for_each(|line| writeln!(out, "{line}"))
    };
    match r {
        // A closed pipe (`| head`) is not an error of the command.
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::domain(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "seed")]
pub enum Grouping {
    Global,
    Parts,
    Random(u64),
}

impl FromStr for Grouping {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "global" => Ok(Grouping::Global),
            "parts" => Ok(Grouping::Parts),
            _ => s
                .strip_prefix("random:")
                .and_then(|v| v.parse().ok())
                .map(Grouping::Random)
                .ok_or_else(|| format!("expected global, parts or random:SEED, got {s:?}")),
        }
    }
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Grouping::Global => write!(f, "global"),
            Grouping::Parts => write!(f, "parts"),
            Grouping::Random(s) => write!(f, "random:{s}"),
        }
    }
}

/// Summary statistics of per-frame stage times, in milliseconds.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(samples: &[f64]) -> Self {
        let mut v = samples.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            return Self {
                mean: 0.0,
                median: 0.0,
                p95: 0.0,
                min: 0.0,
                max: 0.0,
            };
        }
        // Nearest-rank percentiles.
        let rank = |p: f64| v[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
        Self {
            mean: v.iter().sum::<f64>() / n as f64,
            median: rank(0.5),
            p95: rank(0.95),
            min: v[0],
            max: v[n - 1],
        }
    }
}

/// PNG (RGBA8, straight alpha) of a premultiplied image.
pub fn write_png(path: &Path, image: &Image) -> CmdResult {
    let data: Vec<u8> = image
        .pixels
        .iter()
        .flat_map(|p| {
            let a = p[3].clamp(0.0, 1.0);
            let un = |c: f32| if a > 0.0 { (c / a).clamp(0.0, 1.0) } else { 0.0 };
            [un(p[0]), un(p[1]), un(p[2]), a].map(|v| (v * 255.0).round() as u8)
        })
        .collect();
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), image.width, image.height);
    enc.set_color(png::ColorType::Rgba);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&data)?;
    writer.finish()?;
    Ok(())
}
