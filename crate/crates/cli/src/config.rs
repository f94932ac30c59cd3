//! Run configuration: one JSON document per run, with `--set` overrides.

use std::path::{Path, PathBuf};

use forge_core::diffusion::{NetConfig, ScheduleConfig, TrainConfig};
use forge_core::guidance::GuidanceConfig;
use forge_core::latent::CodecConfig;
use forge_core::sdf::{Dims, ShapeDistribution};
use forge_core::texture::Placement;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    GenShapes,
    TrainShapeModel,
    TrainTextureModel,
    SynthMask,
    SynthVolume,
    Sweep,
    Metrics,
    ExportMesh,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Self::GenShapes => "gen-shapes",
            Self::TrainShapeModel => "train-shape-model",
            Self::TrainTextureModel => "train-texture-model",
            Self::SynthMask => "synth-mask",
            Self::SynthVolume => "synth-volume",
            Self::Sweep => "sweep",
            Self::Metrics => "metrics",
            Self::ExportMesh => "export-mesh",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Net,
    Gmm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapesConfig {
    pub count: usize,
    pub dims: Dims,
    pub spacing: f64,
    pub distribution: ShapeDistribution,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self { count: 200, dims: [32; 3], spacing: 1.0, distribution: ShapeDistribution::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeModelConfig {
    /// Directory of `*.sdf` volumes written by `gen-shapes`.
    pub data: Option<PathBuf>,
    pub backend: BackendKind,
    pub codec: CodecConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub gmm_variance: f64,
}

impl Default for ShapeModelConfig {
    fn default() -> Self {
        Self {
            data: None,
            backend: BackendKind::Net,
            codec: CodecConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            gmm_variance: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureModelConfig {
    pub patch_dims: Dims,
    pub count: usize,
    pub levels: [f64; 2],
    pub backend: BackendKind,
    pub gmm_variance: f64,
    pub net: NetConfig,
    pub train: TrainConfig,
}

impl Default for TextureModelConfig {
    fn default() -> Self {
        Self {
            patch_dims: [16; 3],
            count: 200,
            levels: [-0.7, 0.9],
            backend: BackendKind::Gmm,
            gmm_variance: 0.02,
            net: NetConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Checkpoint written by `train-shape-model`.
    pub model: Option<PathBuf>,
    pub count: usize,
    pub refine_passes: usize,
    /// Also write an OBJ surface per mask.
    pub meshes: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { model: None, count: 8, refine_passes: 1, meshes: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeConfig {
    /// Checkpoint written by `train-texture-model`.
    pub model: Option<PathBuf>,
    /// A mask stem, or a directory of `*.mask` volumes. Without it a
    /// centred spherical lesion is used.
    pub masks: Option<PathBuf>,
    /// An intensity volume stem; a toy background is generated otherwise.
    pub background: Option<PathBuf>,
    pub background_seed: Option<u64>,
    pub placement: Placement,
    pub n_resample: usize,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        Self { model: None, masks: None, background: None, background_seed: None, placement: Placement::default(), n_resample: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    CiTarget,
    SiTarget,
    Eta0,
    Gamma0,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: Option<SweepAxis>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub generated: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub align: bool,
    pub distances_csv: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { generated: None, reference: None, align: true, distances_csv: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    /// An SDF stem or a directory of `*.sdf` volumes.
    pub input: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Option<Task>,
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
    pub shapes: ShapesConfig,
    pub shape_model: ShapeModelConfig,
    pub texture_model: TextureModelConfig,
    pub synth: SynthConfig,
    pub volume: VolumeConfig,
    pub sweep: SweepConfig,
    pub metrics: MetricsConfig,
    pub export: ExportConfig,
}

/// Parses `a.b.c=value`; the value is read as JSON, falling back to a string.
pub fn parse_override(arg: &str) -> CliResult<(Vec<String>, Value)> {
    let (key, raw) = arg.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{arg}`")))?;
    let path: Vec<String> = key.split('.').map(str::to_owned).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Config(format!("bad --set key `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok((path, value))
}

pub fn apply_override(doc: &mut Value, path: &[String], value: Value) -> CliResult<()> {
    let mut node = doc;
    for (i, part) in path.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("--set {}: `{}` is not an object", path.join("."), path[..i].join("."))))?;
        if i + 1 == path.len() {
            obj.insert(part.clone(), value);
            return Ok(());
        }
        node = obj.entry(part.clone()).or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    Ok(())
}

fn absolute(p: &Path) -> CliResult<PathBuf> {
    if p.is_absolute() {
        return Ok(p.to_path_buf());
    }
    Ok(std::env::current_dir()?.join(p))
}

impl RunConfig {
    /// Reads `file` (if any), applies overrides and fills defaults.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut doc = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => Value::Object(Default::default()),
        };
        if !overrides.is_empty() {
            // overrides apply on top of the filled-in defaults, so a single
            // field of a tagged section can be changed
            let filled: Self = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
            doc = serde_json::to_value(filled).map_err(|e| CliError::Config(e.to_string()))?;
            for arg in overrides {
                let (path, value) = parse_override(arg)?;
                apply_override(&mut doc, &path, value)?;
            }
        }
        serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Fixes the task, requires a seed and makes every path absolute.
    pub fn resolve(mut self, task: Task) -> CliResult<Self> {
        if let Some(t) = self.task {
            if t != task {
                return Err(CliError::Config(format!("config is for task `{}`, not `{}`", t.name(), task.name())));
            }
        }
        self.task = Some(task);
        if self.seed.is_none() {
            return Err(CliError::Config("a seed is required (config `seed` or --seed)".into()));
        }
        for p in [
            &mut self.output,
            &mut self.shape_model.data,
            &mut self.synth.model,
            &mut self.volume.model,
            &mut self.volume.masks,
            &mut self.volume.background,
            &mut self.metrics.generated,
            &mut self.metrics.reference,
            &mut self.export.input,
        ]
        .into_iter()
        .flatten()
        {
            *p = absolute(p)?;
        }
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("resolved config has a seed")
    }

    pub fn output_dir(&self) -> CliResult<&Path> {
        self.output.as_deref().ok_or_else(|| CliError::Config("an output directory is required (--output)".into()))
    }
}

/// Requires an input path (file, directory or volume stem) to be set and
/// present on disk.
pub fn require_input<'a>(path: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    let p = path.as_deref().ok_or_else(|| CliError::Config(format!("`{key}` must be set")))?;
    if !p.exists() && !forge_core::io::volume_paths(p).1.exists() {
        return Err(CliError::Config(format!("`{key}`: {} does not exist", p.display())));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nest_and_parse() {
        let cfg = RunConfig::load(None, &["guidance.eta0=0.5".into(), "seed=4".into(), "synth.model=m.bin".into()]).unwrap();
        assert_eq!(cfg.guidance.eta0, 0.5);
        assert_eq!(cfg.seed, Some(4));
        assert_eq!(cfg.synth.model, Some(PathBuf::from("m.bin")));
        let cfg = RunConfig::load(None, &["shape_model.codec.components=8".into()]).unwrap();
        assert!(matches!(cfg.shape_model.codec, CodecConfig::LinearAe { components: 8, .. }));
        assert!(RunConfig::load(None, &["guidance.nope=1".into()]).is_ok());
        assert!(matches!(RunConfig::load(None, &["synth.nope=1".into()]), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::load(None, &["seed".into()]), Err(CliError::Config(_))));
    }

    #[test]
    fn seed_required_and_task_checked() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert!(matches!(cfg.clone().resolve(Task::Metrics), Err(CliError::Config(_))));
        let mut seeded = cfg;
        seeded.seed = Some(1);
        seeded.task = Some(Task::Sweep);
        assert!(seeded.clone().resolve(Task::Metrics).is_err());
        assert_eq!(seeded.resolve(Task::Sweep).unwrap().task, Some(Task::Sweep));
    }
}
