//! Task implementations. Each writes its artifacts into the output directory;
//! the caller adds the manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use forge_core::diffusion::{
    load_checkpoint, save_checkpoint, train_denoiser, Checkpoint, DenoiserBackend, GaussianMixture, NoiseSchedule,
    ScheduleConfig,
};
use forge_core::guidance::{synthesize_masks, GuidanceConfig};
use forge_core::io::{read_mask, read_sdf, read_volume, write_mask, write_sdf, write_volume};
use forge_core::latent::{CodecConfig, LatentCodec};
use forge_core::metrics::{evaluate, ShapeSet};
use forge_core::rng::derive_seed;
use forge_core::sdf::{binarize, curvature_index, export_mesh, make_shape, BinaryMask, SdfGrid, ShapeParams};
use forge_core::texture::{make_toy_background, signal_intensity, synthesize_volume, toy_lesion_dataset, TexturePrior, Volume};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{require_input, BackendKind, RunConfig, SweepAxis, Task};
use crate::error::{CliError, CliResult};

/// Seed stream for procedural training shapes.
const SHAPE_STREAM: u64 = 16;

pub const SHAPE_MODEL_FILE: &str = "shape_model.cafm";
pub const TEXTURE_MODEL_FILE: &str = "texture_model.cafm";

fn pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().map_err(|e| CliError::Config(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

/// Volume stems (`<dir>/<name>.<suffix>`) in `dir`, sorted, or `path` itself
/// when it is a stem.
fn volume_stems(path: &Path, suffix: &str) -> CliResult<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let tail = format!(".{suffix}.json");
    let mut stems: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?.to_owned();
            name.strip_suffix(".json").filter(|_| name.ends_with(&tail)).map(|stem| p.with_file_name(stem))
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(CliError::Data(format!("no *.{suffix} volumes in {}", path.display())));
    }
    Ok(stems)
}

fn stem_name(stem: &Path, suffix: &str) -> String {
    let name = stem.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.strip_suffix(&format!(".{suffix}")).map(str::to_owned).unwrap_or(name)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Serialize)]
struct ShapeRecord {
    index: usize,
    seed: u64,
    params: ShapeParams,
    voxels: usize,
    curvature_index: f64,
}

fn gen_shapes(cfg: &RunConfig, out: &Path, jobs: usize) -> CliResult<()> {
    let sc = &cfg.shapes;
    if sc.count == 0 {
        return Err(CliError::Config("shapes.count must be positive".into()));
    }
    let records = pool(jobs)?.install(|| {
        (0..sc.count)
            .into_par_iter()
            .map(|i| -> CliResult<ShapeRecord> {
                let seed = derive_seed(cfg.seed(), SHAPE_STREAM, i as u64);
                let params = sc.distribution.sample(sc.dims, sc.spacing, seed);
                let sdf = make_shape(&params, sc.dims, sc.spacing, seed)?;
                let mask = binarize(&sdf, 0.0);
                write_sdf(&out.join(format!("shape_{i:04}.sdf")), &sdf)?;
                write_mask(&out.join(format!("shape_{i:04}.mask")), &mask)?;
                let ci = curvature_index(&sdf, cfg.guidance.ci_band * sc.spacing)?;
                Ok(ShapeRecord { index: i, seed, params, voxels: mask.count(), curvature_index: ci })
            })
            .collect::<CliResult<Vec<_>>>()
    })?;
    write_json(&out.join("shapes.json"), &records)?;
    info!("wrote {} shapes", records.len());
    Ok(())
}

fn fit_codec(cfg: &CodecConfig, grids: &[SdfGrid]) -> CliResult<LatentCodec> {
    let codec = match *cfg {
        CodecConfig::LinearAe { components, .. } => LatentCodec::fit_linear_ae(grids, components)?,
        CodecConfig::Pooled { factor, fitted: true, .. } => LatentCodec::fit_pooled(grids, factor)?,
        _ => LatentCodec::from_config(cfg)?,
    };
    let expected = codec.grid_dims();
    let want = match cfg {
        CodecConfig::Identity { dims, .. } | CodecConfig::LinearAe { dims, .. } => *dims,
        CodecConfig::Pooled { fine_dims, .. } => *fine_dims,
    };
    if grids[0].dims != want || expected != want {
        return Err(CliError::Config(format!("codec dims {want:?} do not match training grids {:?}", grids[0].dims)));
    }
    Ok(codec)
}

fn train_backend(
    kind: BackendKind,
    data: &[Vec<f64>],
    cfg: &RunConfig,
    net: &forge_core::diffusion::NetConfig,
    train: &forge_core::diffusion::TrainConfig,
    variance: f64,
    out: &Path,
) -> CliResult<DenoiserBackend> {
    match kind {
        BackendKind::Gmm => Ok(DenoiserBackend::GmmOracle(GaussianMixture::from_samples(data.to_vec(), variance)?)),
        BackendKind::Net => {
            let schedule = NoiseSchedule::from_config(&cfg.schedule)?;
            let (backend, report) = train_denoiser(data, net, &schedule, train, cfg.seed())?;
            write_text(&out.join("train_log.csv"), &report.to_csv())?;
            if let (Some(first), Some(last)) = (report.epoch_losses.first(), report.epoch_losses.last()) {
                info!("training loss {first:.4} -> {last:.4}");
            }
            Ok(backend)
        }
    }
}

fn train_shape_model(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let mc = &cfg.shape_model;
    let dir = require_input(&mc.data, "shape_model.data")?;
    let stems = volume_stems(dir, "sdf")?;
    let grids = stems.iter().map(|s| read_sdf(s)).collect::<forge_core::Result<Vec<_>>>()?;
    let volumes: Vec<usize> = grids.iter().map(|g| binarize(g, 0.0).count()).collect();
    let codec = fit_codec(&mc.codec, &grids)?;
    let data = grids.iter().map(|g| codec.encode(g)).collect::<forge_core::Result<Vec<_>>>()?;
    info!("encoded {} grids into {}-d latents", data.len(), codec.latent_dim());
    let backend = train_backend(mc.backend, &data, cfg, &mc.net, &mc.train, mc.gmm_variance, out)?;
    let metadata = json!({
        "kind": "shape",
        "codec": codec.config(),
        "schedule": cfg.schedule,
        "volume_range": [volumes.iter().min(), volumes.iter().max()],
    });
    save_checkpoint(&out.join(SHAPE_MODEL_FILE), &Checkpoint { backend, metadata, extra_arrays: codec.arrays() })?;
    Ok(())
}

fn train_texture_model(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let tc = &cfg.texture_model;
    if tc.count == 0 {
        return Err(CliError::Config("texture_model.count must be positive".into()));
    }
    let patches = toy_lesion_dataset(tc.count, tc.patch_dims, tc.levels, cfg.seed())?;
    let data: Vec<Vec<f64>> = patches.into_iter().map(|v| v.values).collect();
    let backend = train_backend(tc.backend, &data, cfg, &tc.net, &tc.train, tc.gmm_variance, out)?;
    let metadata = json!({ "kind": "texture", "patch_dims": tc.patch_dims, "schedule": cfg.schedule });
    save_checkpoint(&out.join(TEXTURE_MODEL_FILE), &Checkpoint { backend, metadata, extra_arrays: Vec::new() })?;
    Ok(())
}

fn checkpoint_of_kind(path: &Path, kind: &str) -> CliResult<(Checkpoint, NoiseSchedule)> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.metadata.get("kind").and_then(Value::as_str) != Some(kind) {
        return Err(CliError::Data(format!("{} is not a {kind} model", path.display())));
    }
    let schedule: ScheduleConfig = serde_json::from_value(ckpt.metadata["schedule"].clone())
        .map_err(|e| CliError::Data(format!("{}: schedule: {e}", path.display())))?;
    Ok((ckpt, NoiseSchedule::from_config(&schedule)?))
}

/// Backend, codec and schedule of a shape-model checkpoint.
pub fn load_shape_model(path: &Path) -> CliResult<(DenoiserBackend, LatentCodec, NoiseSchedule)> {
    let (ckpt, schedule) = checkpoint_of_kind(path, "shape")?;
    let codec_cfg: CodecConfig = serde_json::from_value(ckpt.metadata["codec"].clone())
        .map_err(|e| CliError::Data(format!("{}: codec: {e}", path.display())))?;
    let codec = LatentCodec::from_parts(&codec_cfg, &ckpt.extra_arrays)?;
    Ok((ckpt.backend, codec, schedule))
}

pub fn load_texture_model(path: &Path) -> CliResult<(TexturePrior, NoiseSchedule)> {
    let (ckpt, schedule) = checkpoint_of_kind(path, "texture")?;
    let dims = serde_json::from_value(ckpt.metadata["patch_dims"].clone())
        .map_err(|e| CliError::Data(format!("{}: patch_dims: {e}", path.display())))?;
    Ok((TexturePrior::new(ckpt.backend, dims)?, schedule))
}

/// Per-run means reported to `sweep`.
#[derive(Clone, Debug, Default)]
pub struct Summary {
    pub achieved_ci: Option<f64>,
    pub achieved_si: Option<f64>,
    pub loss_final: Option<f64>,
}

fn synth_mask(cfg: &RunConfig, out: &Path, jobs: usize) -> CliResult<Summary> {
    let sc = &cfg.synth;
    let (backend, codec, schedule) = load_shape_model(require_input(&sc.model, "synth.model")?)?;
    let results = synthesize_masks(&backend, &cfg.guidance, &codec, &schedule, cfg.seed(), sc.count, sc.refine_passes, jobs)?;
    let mut csv = String::from("index,seed,achieved_ci,loss_final,voxels,status\n");
    let (mut cis, mut losses) = (Vec::new(), Vec::new());
    let mut first_error = None;
    for (i, r) in results.into_iter().enumerate() {
        let seed = cfg.seed() + i as u64;
        match r {
            Ok(s) => {
                write_sdf(&out.join(format!("mask_{i:04}.sdf")), &s.sdf)?;
                write_mask(&out.join(format!("mask_{i:04}.mask")), &s.mask)?;
                if sc.meshes {
                    export_mesh(&s.sdf, &out.join(format!("mask_{i:04}.obj")))?;
                }
                let _ = writeln!(csv, "{i},{seed},{},{},{},ok", s.achieved_ci, fmt_opt(s.final_loss), s.mask.count());
                cis.push(s.achieved_ci);
                losses.extend(s.final_loss);
            }
            Err(e) => {
                warn!("sample {i} (seed {seed}) failed: {e}");
                let _ = writeln!(csv, "{i},{seed},,,0,{}", e.to_string().replace(',', ";"));
                first_error.get_or_insert(e);
            }
        }
    }
    write_text(&out.join("samples.csv"), &csv)?;
    if cis.is_empty() {
        if let Some(e) = first_error {
            return Err(e.into());
        }
    }
    Ok(Summary { achieved_ci: mean(&cis), achieved_si: None, loss_final: mean(&losses) })
}

/// Centred sphere of radius `0.22 * min(dims)`.
pub fn default_lesion(dims: [usize; 3]) -> BinaryMask {
    let n = dims.iter().copied().min().unwrap_or(0) as f64;
    let r = 0.22 * n;
    let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
    BinaryMask::from_fn(dims, 1.0, |x, y, z| {
        (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2) <= r * r
    })
}

fn synth_volume(cfg: &RunConfig, out: &Path, jobs: usize) -> CliResult<Summary> {
    let vc = &cfg.volume;
    let (prior, schedule) = load_texture_model(require_input(&vc.model, "volume.model")?)?;
    let background: Volume = match &vc.background {
        Some(_) => read_volume(require_input(&vc.background, "volume.background")?)?,
        None => {
            let bg = make_toy_background(prior.patch_dims, 1.0, vc.background_seed.unwrap_or(cfg.seed()))?;
            write_volume(&out.join("background.img"), &bg)?;
            bg
        }
    };
    let masks: Vec<BinaryMask> = match &vc.masks {
        Some(_) => volume_stems(require_input(&vc.masks, "volume.masks")?, "mask")?
            .iter()
            .map(|s| read_mask(s))
            .collect::<forge_core::Result<_>>()?,
        None => vec![default_lesion(prior.patch_dims)],
    };
    let guidance: &GuidanceConfig = &cfg.guidance;
    let samples = pool(jobs)?.install(|| {
        masks
            .par_iter()
            .enumerate()
            .map(|(i, m)| {
                let seed = cfg.seed() + i as u64;
                synthesize_volume(&prior, &background, m, &vc.placement, guidance.si_target, guidance, &schedule, seed, vc.n_resample)
                    .map_err(|e| match e {
                        forge_core::Error::ShapeTooLarge => CliError::Config(format!(
                            "mask {i} ({:?} bounding box) does not fit the {:?} patch",
                            m.crop_to_content().map(|c| c.dims).unwrap_or(m.dims),
                            prior.patch_dims
                        )),
                        e => e.into(),
                    })
            })
            .collect::<CliResult<Vec<_>>>()
    })?;
    let mut csv = String::from("index,seed,offset_x,offset_y,offset_z,achieved_si,loss_final\n");
    let (mut sis, mut losses) = (Vec::new(), Vec::new());
    for (i, s) in samples.iter().enumerate() {
        write_volume(&out.join(format!("case_{i:04}.img")), &s.volume)?;
        write_mask(&out.join(format!("case_{i:04}.mask")), &s.mask)?;
        let si = signal_intensity(&s.volume, &s.mask)?;
        let loss = guidance.si_target.map(|t| (si - t).powi(2));
        let [ox, oy, oz] = s.offset;
        let _ = writeln!(csv, "{i},{},{ox},{oy},{oz},{si},{}", cfg.seed() + i as u64, fmt_opt(loss));
        sis.push(si);
        losses.extend(loss);
    }
    write_text(&out.join("volumes.csv"), &csv)?;
    Ok(Summary { achieved_ci: None, achieved_si: mean(&sis), loss_final: mean(&losses) })
}

fn sweep(cfg: &RunConfig, out: &Path, jobs: usize) -> CliResult<()> {
    let axis = cfg.sweep.axis.ok_or_else(|| CliError::Config("sweep.axis must be set".into()))?;
    if cfg.sweep.values.is_empty() {
        return Err(CliError::Config("sweep.values must not be empty".into()));
    }
    let mut csv = String::from("value,achieved_ci,achieved_si,loss_final\n");
    for (k, &value) in cfg.sweep.values.iter().enumerate() {
        let mut point = cfg.clone();
        match axis {
            SweepAxis::CiTarget => point.guidance.ci_target = Some(value),
            SweepAxis::SiTarget => point.guidance.si_target = Some(value),
            SweepAxis::Eta0 => point.guidance.eta0 = value,
            SweepAxis::Gamma0 => point.guidance.gamma0 = value,
        }
        let dir = out.join(format!("value_{k:02}"));
        fs::create_dir_all(&dir)?;
        info!("sweep point {k}: {value}");
        let summary = match axis {
            SweepAxis::CiTarget | SweepAxis::Eta0 => synth_mask(&point, &dir, jobs)?,
            SweepAxis::SiTarget | SweepAxis::Gamma0 => synth_volume(&point, &dir, jobs)?,
        };
        let _ = writeln!(
            csv,
            "{value},{},{},{}",
            fmt_opt(summary.achieved_ci),
            fmt_opt(summary.achieved_si),
            fmt_opt(summary.loss_final)
        );
    }
    write_text(&out.join("sweep.csv"), &csv)
}

fn load_mask_set(path: &Path) -> CliResult<ShapeSet> {
    let masks = volume_stems(path, "mask")?.iter().map(|s| read_mask(s)).collect::<forge_core::Result<Vec<_>>>()?;
    Ok(ShapeSet::new(masks)?)
}

fn metrics(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let mc = &cfg.metrics;
    let generated = load_mask_set(require_input(&mc.generated, "metrics.generated")?)?;
    let reference = load_mask_set(require_input(&mc.reference, "metrics.reference")?)?;
    let report = evaluate(&generated, &reference, mc.align)?;
    write_json(&out.join("metrics.json"), &report)?;
    if mc.distances_csv {
        write_text(&out.join("distances.csv"), &report.distances_csv())?;
    }
    info!("mmd {:.4} cov {:.1}% pdsc {:.1}%", report.mmd, report.cov_percent, report.pdsc_percent);
    Ok(())
}

fn export_meshes(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let input = require_input(&cfg.export.input, "export.input")?;
    let mut csv = String::from("name,triangles\n");
    for stem in volume_stems(input, "sdf")? {
        let name = stem_name(&stem, "sdf");
        let sdf = read_sdf(&stem)?;
        let triangles = export_mesh(&sdf, &out.join(format!("{name}.obj")))?;
        let _ = writeln!(csv, "{name},{triangles}");
    }
    write_text(&out.join("meshes.csv"), &csv)
}

/// Runs the resolved task, writing artifacts into `out`.
pub fn execute(cfg: &RunConfig, out: &Path, jobs: usize) -> CliResult<()> {
    match cfg.task.expect("resolved config has a task") {
        Task::GenShapes => gen_shapes(cfg, out, jobs),
        Task::TrainShapeModel => train_shape_model(cfg, out),
        Task::TrainTextureModel => train_texture_model(cfg, out),
        Task::SynthMask => synth_mask(cfg, out, jobs).map(drop),
        Task::SynthVolume => synth_volume(cfg, out, jobs).map(drop),
        Task::Sweep => sweep(cfg, out, jobs),
        Task::Metrics => metrics(cfg, out),
        Task::ExportMesh => export_meshes(cfg, out),
    }
}
