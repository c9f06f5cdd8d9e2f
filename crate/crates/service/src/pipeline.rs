//! Pose-to-pixels pipeline shared by `render`, `benchmark` and `serve`,
//! split at the module boundaries so each stage can be timed:
//! rig | bake | decode+pose | rasterize.

use std::path::Path;
use std::time::Instant;

use splat_avatar::avatar::{Avatar, GaussianParamMaps};
use splat_avatar::image::Image;
use splat_avatar::io::read_param_maps;
use splat_avatar::nn::Decoders;
use splat_avatar::render::{render, Camera, RenderOptions};
use splat_avatar::rig::{GraphFrame, PoseFrame};
use splat_avatar::train::{motion_input, predict_maps};

use crate::error::{CliError, CliResult};

/// What drives the parameter maps.
#[derive(Debug, Clone)]
pub enum Model {
    /// Fixed activated maps (ground truth or a fitted snapshot).
    Maps(GaussianParamMaps),
    Decoders(Box<Decoders>),
}

impl Model {
    /// Opens an `.ashp` map checkpoint or an `.ashw` weight archive,
    /// recognized by magic.
    pub fn load(path: &Path) -> CliResult<Self> {
        if !path.is_file() {
            return Err(CliError::input(format!("checkpoint not found: {}", path.display())));
        }
        let mut magic = [0u8; 4];
        {
            use std::io::Read;
            let mut f = std::fs::File::open(path)?;
            f.read_exact(&mut magic)
                .map_err(|_| CliError::input(format!("{}: file too short for a checkpoint", path.display())))?;
        }
        match &magic {
            b"ASHP" => Ok(Model::Maps(read_param_maps(path).map_err(CliError::input)?.0)),
            b"ASHW" => Ok(Model::Decoders(Box::new(Decoders::load(path).map_err(CliError::input)?))),
            _ => Err(CliError::input(format!(
                "{}: not a parameter-map or weight checkpoint",
                path.display()
            ))),
        }
    }
}

/// Per-frame stage times in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub stg1: f64,
    pub stg2: f64,
    pub stg3: f64,
    pub stg4: f64,
    /// Wall time of the whole frame, including work between stages.
    pub total: f64,
}

impl StageTimings {
    pub fn stage_sum(&self) -> f64 {
        self.stg1 + self.stg2 + self.stg3 + self.stg4
    }

    pub fn overhead(&self) -> f64 {
        self.total - self.stage_sum()
    }

    pub fn fps(&self) -> f64 {
        1000.0 / self.total
    }

    pub fn mean(samples: &[StageTimings]) -> StageTimings {
        let n = samples.len().max(1) as f64;
        samples.iter().fold(StageTimings::default(), |a, s| StageTimings {
            stg1: a.stg1 + s.stg1 / n,
            stg2: a.stg2 + s.stg2 / n,
            stg3: a.stg3 + s.stg3 / n,
            stg4: a.stg4 + s.stg4 / n,
            total: a.total + s.total / n,
        })
    }
}

pub struct FramePipeline {
    pub avatar: Avatar,
    pub model: Model,
    pub background: [f64; 3],
    pub options: RenderOptions,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl FramePipeline {
    pub fn new(avatar: Avatar, model: Model, background: [f64; 3]) -> CliResult<Self> {
        if let Model::Maps(m) = &model {
            if m.resolution != avatar.resolution() {
                return Err(CliError::input(format!(
                    "checkpoint maps have resolution {}, scene uses {}",
                    m.resolution,
                    avatar.resolution()
                )));
            }
            m.validate(&avatar.table).map_err(CliError::input)?;
        }
        Ok(Self {
            avatar,
            model,
            background,
            options: RenderOptions::default(),
        })
    }

    pub fn run(&self, pose: &PoseFrame, graph: &GraphFrame, camera: &Camera) -> CliResult<(Image, StageTimings)> {
        let start = Instant::now();
        let mut t = StageTimings::default();

        let s = Instant::now();
        let frame = self.avatar.rig.evaluate(pose, graph)?;
        t.stg1 = ms(s);

        let s = Instant::now();
        let input = match &self.model {
            Model::Decoders(_) => Some(motion_input(&self.avatar, &frame.posed)?),
            Model::Maps(_) => None,
        };
        t.stg2 = ms(s);

        let s = Instant::now();
        let predicted;
        let maps = match (&self.model, &input) {
            (Model::Decoders(d), Some(input)) => {
                predicted = predict_maps(&self.avatar, d, input, &pose.root_translation)?;
                &predicted
            }
            (Model::Maps(m), _) => m,
            (Model::Decoders(_), None) => unreachable!(),
        };
        let placement = self.avatar.placement(&frame)?;
        let splats = self.avatar.pose(&placement, maps)?;
        t.stg3 = ms(s);

        let s = Instant::now();
        let image = render(&splats, camera, self.background, &self.options, false)?.image;
        t.stg4 = ms(s);

        t.total = ms(start);
        Ok((image, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_overhead() {
        let a = StageTimings {
            stg1: 1.0,
            stg2: 2.0,
            stg3: 3.0,
            stg4: 4.0,
            total: 10.5,
        };
        let b = StageTimings {
            total: 11.5,
            ..a
        };
        let m = StageTimings::mean(&[a, b]);
        assert_eq!(m.total, 11.0);
        assert_eq!(m.overhead(), 1.0);
        assert!((m.fps() - 1000.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn missing_checkpoint_is_an_input_error() {
        let e = Model::load(Path::new("/nonexistent/w.ashw")).unwrap_err();
        assert_eq!(e.to_string(), "checkpoint not found: /nonexistent/w.ashw");
        assert_eq!(e.exit_code(), 2);
    }
}
