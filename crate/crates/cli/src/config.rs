//! Run configuration: a TOML file with one block per concern, overridden by
//! command-line flags, echoed as `config.toml` into every output directory.
//!
//! The top-level `seed` drives every generator. The seeds inside `[orbit]`
//! and `[train]` are overwritten from it when the config is resolved.

use std::fs;
use std::path::{Path, PathBuf};

use gsfit::grad::GradcheckOptions;
use gsfit::loss::{MetricScale, Stage};
use gsfit::synth::{CloudStyle, OrbitConfig};
use gsfit::train::TrainConfig;
use gsfit::RenderOptions;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub gaussians: usize,
    pub sh_degree: usize,
    pub style: CloudStyle,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            gaussians: 32,
            sh_degree: 0,
            style: CloudStyle::Blob,
        }
    }
}

/// Random starting cloud used when no `init_cloud` file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub gaussians: usize,
    pub radius: f64,
    pub scale: f64,
    pub opacity: f64,
    pub sh_degree: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            gaussians: 128,
            radius: 0.45,
            scale: 0.05,
            opacity: 0.5,
            sh_degree: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Dataset directory written by `gen`.
    pub data: Option<PathBuf>,
    /// Every k-th view (k-1, 2k-1, ...) is held out; 0 trains on all views.
    pub holdout_every: usize,
    pub init_cloud: Option<PathBuf>,
    pub init: InitConfig,
    /// Stage 2 starting cameras; perturbed dataset cameras when absent.
    pub init_cameras: Option<PathBuf>,
    pub perturb_rotation_deg: f64,
    pub perturb_translation_frac: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            data: None,
            holdout_every: 8,
            init_cloud: None,
            init: InitConfig::default(),
            init_cameras: None,
            perturb_rotation_deg: 5.0,
            perturb_translation_frac: 0.05,
        }
    }
}

/// Cloud and cameras for `render`; orbit cameras are sampled when no camera
/// file is given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderInputs {
    pub cloud: Option<PathBuf>,
    pub cameras: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum GradcheckScene {
    /// The bundled four-Gaussian, 16 x 16 scene.
    Fixture,
    Random {
        gaussians: usize,
        resolution: u32,
        sh_degree: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub tolerance: f64,
    pub step: f64,
    pub scene: GradcheckScene,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        let d = GradcheckOptions::default();
        Self {
            tolerance: d.tolerance,
            step: d.step,
            scene: GradcheckScene::Fixture,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub prediction: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub scale: MetricScale,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prediction: None,
            ground_truth: None,
            scale: MetricScale::Normalized,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub render: RenderOptions,
    pub orbit: OrbitConfig,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub fit: FitConfig,
    pub inputs: RenderInputs,
    pub gradcheck: GradcheckConfig,
    pub eval: EvalConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub stage: Option<Stage>,
    pub views: Option<usize>,
    pub resolution: Option<u32>,
    pub tol: Option<f64>,
    pub metric_scale: bool,
    pub deterministic: bool,
    pub base_lr: Option<f64>,
    pub steps: Option<usize>,
    pub data: Option<PathBuf>,
    pub cloud: Option<PathBuf>,
    pub cameras: Option<PathBuf>,
    pub prediction: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
}

pub fn parse_config(text: &str, origin: &Path) -> Result<RunConfig, CliError> {
    toml::from_str(text).map_err(|e| CliError::config(format!("{}: {e}", origin.display())))
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            parse_config(&text, p)
        }
    }
}

impl RunConfig {
    /// Applies flag overrides and propagates the top-level seed and render
    /// options into the blocks that carry their own copies.
    pub fn resolve(mut self, o: &Overrides) -> Self {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(s) = o.stage {
            self.train.stage = s;
        }
        if let Some(v) = o.views {
            self.orbit.views_per_orbit = v;
            self.train.sampler.max_views = v;
        }
        if let Some(r) = o.resolution {
            self.orbit.resolution = r;
        }
        if let Some(t) = o.tol {
            self.gradcheck.tolerance = t;
        }
        if o.metric_scale {
            self.eval.scale = MetricScale::Metric;
        }
        if o.deterministic {
            self.render.deterministic = true;
        }
        if let Some(lr) = o.base_lr {
            self.train.base_lr = lr;
        }
        if let Some(n) = o.steps {
            self.train.steps = n;
        }
        let set = |dst: &mut Option<PathBuf>, src: &Option<PathBuf>| {
            if src.is_some() {
                dst.clone_from(src);
            }
        };
        set(&mut self.fit.data, &o.data);
        set(&mut self.inputs.cloud, &o.cloud);
        set(&mut self.inputs.cameras, &o.cameras);
        set(&mut self.eval.prediction, &o.prediction);
        set(&mut self.eval.ground_truth, &o.ground_truth);
        self.orbit.seed = self.seed;
        self.train.seed = self.seed;
        self.train.render = self.render;
        self
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::config(format!("cannot serialize config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, CliError> {
        parse_config(text, Path::new("test.toml"))
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c.train.base_lr, 0.00016);
        assert_eq!(c.train.sampler.lambda, 0.5);
        assert_eq!(c.orbit.resolution, 64);
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = parse("[train]\nbase_lrr = 0.1\n").unwrap_err();
        assert!(e.message.contains("base_lrr"), "{}", e.message);
        assert!(parse("colour = 1\n").is_err());
    }

    #[test]
    fn parse_errors_carry_the_line() {
        let e = parse("seed = 1\n[train]\nsteps = \"many\"\n").unwrap_err();
        assert!(e.message.contains("line 3"), "{}", e.message);
    }

    #[test]
    fn flags_override_file_values() {
        let c = parse("seed = 3\n[train]\nbase_lr = 0.001\nstage = \"1\"\n").unwrap();
        let o = Overrides {
            seed: Some(9),
            base_lr: Some(0.002),
            stage: Some(Stage::Unposed),
            resolution: Some(32),
            ..Default::default()
        };
        let r = c.resolve(&o);
        assert_eq!(r.seed, 9);
        assert_eq!(r.orbit.seed, 9);
        assert_eq!(r.train.seed, 9);
        assert_eq!(r.train.base_lr, 0.002);
        assert_eq!(r.train.stage, Stage::Unposed);
        assert_eq!(r.orbit.resolution, 32);
    }

    #[test]
    fn echo_round_trips() {
        let o = Overrides {
            seed: Some(5),
            data: Some(PathBuf::from("data/x")),
            metric_scale: true,
            ..Default::default()
        };
        let mut c = RunConfig::default().resolve(&o);
        c.scene.style = CloudStyle::Shell {
            inner: 0.3,
            outer: 0.6,
        };
        c.gradcheck.scene = GradcheckScene::Random {
            gaussians: 3,
            resolution: 8,
            sh_degree: 1,
        };
        let text = c.to_toml().unwrap();
        let back = parse(&text).unwrap().resolve(&Overrides::default());
        assert_eq!(back, c);
        assert_eq!(back.to_toml().unwrap(), text);
    }
}
