//! Four-stage runtime breakdown: rig, motion-texture baking, decoding with
//! activation and posing, rasterization.

use splat_avatar::render::Camera;
use splat_avatar::rig::{GraphFrame, PoseFrame};

use crate::error::{CliError, CliResult};
use crate::pipeline::{FramePipeline, StageTimings};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub resolution: usize,
    pub gaussians: usize,
    pub width: usize,
    pub height: usize,
    /// Timed frames (the warmup frame is not counted).
    pub timed: usize,
    pub mean: StageTimings,
}

pub const TABLE_HEADER: &str = "   Stg.1    Stg.2    Stg.3    Stg.4     Time      FPS";

impl BenchmarkReport {
    /// Mean milliseconds per stage in fixed-width columns, plus the time
    /// not attributed to any stage.
    pub fn table(&self) -> String {
        let m = &self.mean;
        format!(
            "# R={} N={} size={}x{} frames={} (first excluded), times in ms\n{TABLE_HEADER}\n{:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.2}\noverhead {:.3} ms\n",
            self.resolution,
            self.gaussians,
            self.width,
            self.height,
            self.timed,
            m.stg1,
            m.stg2,
            m.stg3,
            m.stg4,
            m.total,
            m.fps(),
            m.overhead()
        )
    }
}

/// Parses the row of a printed table back into timings.
pub fn parse_table(text: &str) -> Option<StageTimings> {
    let mut lines = text.lines().skip_while(|l| *l != TABLE_HEADER);
    lines.next()?;
    let v: Vec<f64> = lines.next()?.split_whitespace().map(|t| t.parse().ok()).collect::<Option<_>>()?;
    if v.len() != 6 {
        return None;
    }
    Some(StageTimings {
        stg1: v[0],
        stg2: v[1],
        stg3: v[2],
        stg4: v[3],
        total: v[4],
    })
}

/// Renders `frames` frames cycling through the poses; the first is a
/// warmup and is excluded from the mean.
pub fn run_benchmark(
    pipeline: &FramePipeline,
    poses: &[PoseFrame],
    graphs: &[GraphFrame],
    camera: &Camera,
    frames: usize,
) -> CliResult<BenchmarkReport> {
    if frames < 2 {
        return Err(CliError::input("benchmark needs at least 2 frames"));
    }
    if poses.is_empty() || poses.len() != graphs.len() {
        return Err(CliError::input("benchmark needs matching, non-empty pose and graph sequences"));
    }
    let mut samples = Vec::with_capacity(frames - 1);
    for i in 0..frames {
        let f = i % poses.len();
        let (_, t) = pipeline.run(&poses[f], &graphs[f], camera)?;
        if i > 0 {
            samples.push(t);
        }
    }
    Ok(BenchmarkReport {
        resolution: pipeline.avatar.resolution(),
        gaussians: pipeline.avatar.gaussian_count(),
        width: camera.width,
        height: camera.height,
        timed: samples.len(),
        mean: StageTimings::mean(&samples),
    })
}
