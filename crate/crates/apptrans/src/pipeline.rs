//! End-to-end orchestration: dataset manifest, stage configuration, the six
//! stage orderings and deterministic on-disk outputs.
//!
//! A dataset is described by a TOML manifest listing the calibrated low-res
//! cameras with their frame sequences, the calibrated high-res stills, the
//! per-frame mesh files and an output directory. A separate TOML config
//! selects the stage ordering and the numeric parameters of each stage.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colortransfer::{
    apply_transfer, fit_multi_from_colors, foreground_colors, kmeans_colors, save_tps,
    TpsParams, TransferConfig, TransferError,
};
use crate::imaging::{
    chroma_key, load_mask_png, load_png, save_mask_png, save_png, ImageError, ImageRgb, Mask,
};
use crate::matching::{pair_couples, similarity_matrix, MatchError, PartialTextureMap};
use crate::metrics::{evaluate_correction, MetricError, MetricReport};
use crate::projection::{
    bake_texture, render_view, BakeView, CameraCalib, Mesh, ProjectionError, TextureAtlas,
};
use crate::sr::{upscale, SrBackendSpec, SrError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Sr(#[from] SrError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChromaKeySpec {
    pub color: [f32; 3],
    #[serde(default = "default_chroma_tolerance")]
    pub tolerance: f32,
}

fn default_chroma_tolerance() -> f32 {
    0.15
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrCameraSpec {
    pub id: String,
    /// Calibration text file, relative to the manifest.
    pub calib: String,
    /// Frame image path pattern containing `{frame}`.
    pub frame_pattern: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HrStillSpec {
    pub id: String,
    pub calib: String,
    pub image: String,
    /// Explicit mask image; when absent the manifest chroma key is used.
    #[serde(default)]
    pub mask: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub output_dir: String,
    pub n_frames: usize,
    /// Mesh path pattern containing `{frame}`.
    pub mesh_pattern: String,
    pub lr_cameras: Vec<LrCameraSpec>,
    pub hr_stills: Vec<HrStillSpec>,
    #[serde(default)]
    pub chroma_key: Option<ChromaKeySpec>,
    /// Directory the manifest was loaded from; all paths resolve against it.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut manifest: Manifest =
            toml::from_str(&text).map_err(|e| PipelineError::Manifest(e.to_string()))?;
        manifest.root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(manifest)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn frame_path(&self, camera: &LrCameraSpec, frame: usize) -> PathBuf {
        self.resolve(&camera.frame_pattern.replace("{frame}", &frame.to_string()))
    }

    pub fn mesh_path(&self, frame: usize) -> PathBuf {
        self.resolve(&self.mesh_pattern.replace("{frame}", &frame.to_string()))
    }
}

/// Checks the manifest exhaustively and returns every problem found, so a
/// broken dataset is reported in one pass.
pub fn validate_manifest(manifest: &Manifest) -> Vec<String> {
    let mut problems = Vec::new();
    if manifest.n_frames == 0 {
        problems.push("n_frames must be at least 1".to_string());
    }
    if manifest.lr_cameras.is_empty() {
        problems.push("at least one [[lr_cameras]] entry is required".to_string());
    }
    if manifest.hr_stills.is_empty() {
        problems.push("at least one [[hr_stills]] entry is required".to_string());
    }
    if !manifest.mesh_pattern.contains("{frame}") {
        problems.push("mesh_pattern must contain `{frame}`".to_string());
    }
    fn check_file(problems: &mut Vec<String>, label: String, path: PathBuf) {
        if !path.is_file() {
            problems.push(format!("{label}: missing file {}", path.display()));
        }
    }
    for frame in 0..manifest.n_frames {
        check_file(&mut problems, format!("mesh frame {frame}"), manifest.mesh_path(frame));
    }
    for cam in &manifest.lr_cameras {
        check_file(&mut problems, format!("camera {} calib", cam.id), manifest.resolve(&cam.calib));
        if !cam.frame_pattern.contains("{frame}") {
            problems.push(format!(
                "camera {}: frame_pattern must contain `{{frame}}`",
                cam.id
            ));
            continue;
        }
        for frame in 0..manifest.n_frames {
            check_file(
                &mut problems,
                format!("camera {} frame {frame}", cam.id),
                manifest.frame_path(cam, frame),
            );
        }
    }
    for still in &manifest.hr_stills {
        check_file(&mut problems, format!("still {} calib", still.id), manifest.resolve(&still.calib));
        check_file(&mut problems, format!("still {} image", still.id), manifest.resolve(&still.image));
        match &still.mask {
            Some(m) => check_file(&mut problems, format!("still {} mask", still.id), manifest.resolve(m)),
            None => {
                if manifest.chroma_key.is_none() {
                    problems.push(format!(
                        "still {}: no mask and no [chroma_key] in the manifest",
                        still.id
                    ));
                }
            }
        }
    }
    let mut ids: Vec<&str> = manifest
        .lr_cameras
        .iter()
        .map(|c| c.id.as_str())
        .chain(manifest.hr_stills.iter().map(|s| s.id.as_str()))
        .collect();
    ids.sort_unstable();
    for w in ids.windows(2) {
        if w[0] == w[1] {
            problems.push(format!("duplicate id `{}`", w[0]));
        }
    }
    problems
}

// ---------------------------------------------------------------------------
// Configuration

/// The six supported stage orderings. `srat` is the reference ordering:
/// color transfer on the raw frames, baking, then super-resolution of the
/// baked atlas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ordering {
    /// transfer -> bake -> SR (on the atlas)
    Srat,
    /// bake -> transfer (on texture maps) -> SR
    Cfg1,
    /// bake -> SR -> transfer (on the upscaled maps)
    Cfg2,
    /// transfer -> SR (on frames, scaled intrinsics) -> bake
    Cfg3,
    /// SR (on frames) -> transfer -> bake
    Cfg4,
    /// SR (on frames) -> bake -> transfer (on maps)
    Cfg5,
}

impl Ordering {
    pub const ALL: [Ordering; 6] = [
        Ordering::Srat,
        Ordering::Cfg1,
        Ordering::Cfg2,
        Ordering::Cfg3,
        Ordering::Cfg4,
        Ordering::Cfg5,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Ordering::Srat => "srat",
            Ordering::Cfg1 => "cfg1",
            Ordering::Cfg2 => "cfg2",
            Ordering::Cfg3 => "cfg3",
            Ordering::Cfg4 => "cfg4",
            Ordering::Cfg5 => "cfg5",
        }
    }

    /// True when the color transfer operates on texture maps rather than on
    /// camera frames.
    pub fn transfer_on_maps(&self) -> bool {
        matches!(self, Ordering::Cfg1 | Ordering::Cfg2 | Ordering::Cfg5)
    }

    /// True when super-resolution runs on camera frames before baking.
    pub fn sr_on_frames(&self) -> bool {
        matches!(self, Ordering::Cfg3 | Ordering::Cfg4 | Ordering::Cfg5)
    }
}

impl FromStr for Ordering {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ordering::ALL
            .iter()
            .copied()
            .find(|o| o.name() == s)
            .ok_or_else(|| {
                format!(
                    "unknown ordering `{s}` (expected one of srat, cfg1, cfg2, cfg3, cfg4, cfg5)"
                )
            })
    }
}

impl fmt::Display for Ordering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn default_couples() -> usize {
    2
}

fn default_atlas_size() -> usize {
    2048
}

fn default_coverage() -> f64 {
    0.05
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default = "default_ordering")]
    pub ordering: Ordering,
    /// Number of view couples used for the multi-couple fit.
    #[serde(default = "default_couples")]
    pub couples: usize,
    #[serde(default = "default_atlas_size")]
    pub atlas_size: usize,
    /// Minimum foreground fraction for a partial map to enter the pairing.
    #[serde(default = "default_coverage")]
    pub coverage_threshold: f64,
    #[serde(default)]
    pub transfer: TransferConfig,
    #[serde(default)]
    pub sr: SrBackendSpec,
}

fn default_ordering() -> Ordering {
    Ordering::Srat
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ordering: default_ordering(),
            couples: default_couples(),
            atlas_size: default_atlas_size(),
            coverage_threshold: default_coverage(),
            transfer: TransferConfig::default(),
            sr: SrBackendSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        toml::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))
    }
}

/// Evenly spreads `n_couples` picks over `n_lr` cameras:
/// camera index of couple `i` is `floor(i * n_lr / n_couples)`.
pub fn select_couple_cameras(n_lr: usize, n_couples: usize) -> Vec<usize> {
    assert!(n_lr > 0);
    let n_couples = n_couples.clamp(1, n_lr);
    (0..n_couples).map(|i| i * n_lr / n_couples).collect()
}

// ---------------------------------------------------------------------------
// Timing

#[derive(Debug, Clone, Default)]
pub struct TimingReport {
    pub stages: Vec<(String, Duration)>,
}

impl TimingReport {
    pub fn record<T>(
        &mut self,
        name: &str,
        f: impl FnOnce() -> Result<T, PipelineError>,
    ) -> Result<T, PipelineError> {
        let start = Instant::now();
        let out = f()?;
        self.stages.push((name.to_string(), start.elapsed()));
        Ok(out)
    }

    pub fn total(&self) -> Duration {
        self.stages.iter().map(|(_, d)| *d).sum()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (name, d) in &self.stages {
            out.push_str(&format!("{name},{:.3}\n", d.as_secs_f64() * 1000.0));
        }
        out.push_str(&format!("total,{:.3}\n", self.total().as_secs_f64() * 1000.0));
        out
    }
}

// ---------------------------------------------------------------------------
// Loaded dataset

struct LoadedCamera {
    spec: LrCameraSpec,
    calib: CameraCalib,
    /// One image + mask per frame.
    frames: Vec<(ImageRgb, Mask)>,
}

struct LoadedStill {
    spec: HrStillSpec,
    calib: CameraCalib,
    image: ImageRgb,
    mask: Mask,
}

struct Dataset {
    cameras: Vec<LoadedCamera>,
    stills: Vec<LoadedStill>,
    meshes: Vec<Mesh>,
}

fn mask_for(
    image: &ImageRgb,
    alpha: Option<Mask>,
    explicit: Option<&Path>,
    key: Option<&ChromaKeySpec>,
) -> Result<Mask, PipelineError> {
    if let Some(path) = explicit {
        return Ok(load_mask_png(path)?);
    }
    if let Some(k) = key {
        return Ok(chroma_key(image, k.color, k.tolerance));
    }
    if let Some(a) = alpha {
        return Ok(a);
    }
    Ok(Mask::full(image.width(), image.height()))
}

/// Per-source partial texture maps of one frame with their filled masks.
struct Partials {
    lr: Vec<PartialTextureMap>,
    lr_masks: Vec<Mask>,
    hr: Vec<PartialTextureMap>,
    hr_masks: Vec<Mask>,
}

fn load_dataset(manifest: &Manifest) -> Result<Dataset, PipelineError> {
    let problems = validate_manifest(manifest);
    if !problems.is_empty() {
        return Err(PipelineError::Validation(problems));
    }
    let key = manifest.chroma_key.as_ref();
    let mut cameras = Vec::new();
    for spec in &manifest.lr_cameras {
        let calib = CameraCalib::load(&manifest.resolve(&spec.calib))?;
        let mut frames = Vec::new();
        for frame in 0..manifest.n_frames {
            let path = manifest.frame_path(spec, frame);
            let (image, alpha) = load_png(&path)?;
            let mask = mask_for(&image, alpha, None, key)?;
            frames.push((image, mask));
        }
        cameras.push(LoadedCamera {
            spec: spec.clone(),
            calib,
            frames,
        });
    }
    let mut stills = Vec::new();
    for spec in &manifest.hr_stills {
        let calib = CameraCalib::load(&manifest.resolve(&spec.calib))?;
        let (image, alpha) = load_png(&manifest.resolve(&spec.image))?;
        let mask_path = spec.mask.as_ref().map(|m| manifest.resolve(m));
        let mask = mask_for(&image, alpha, mask_path.as_deref(), key)?;
        stills.push(LoadedStill {
            spec: spec.clone(),
            calib,
            image,
            mask,
        });
    }
    let meshes = (0..manifest.n_frames)
        .map(|f| Mesh::load_obj(&manifest.mesh_path(f)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        cameras,
        stills,
        meshes,
    })
}

// ---------------------------------------------------------------------------
// Stages

fn atlas_to_partial(atlas: &TextureAtlas, source_id: &str) -> (PartialTextureMap, Mask) {
    (
        PartialTextureMap::new(atlas.image.clone(), source_id),
        atlas.filled.clone(),
    )
}

fn bake_one(
    mesh: &Mesh,
    calib: &CameraCalib,
    image: &ImageRgb,
    mask: &Mask,
    size: usize,
) -> TextureAtlas {
    bake_texture(
        mesh,
        &[BakeView {
            calib,
            image,
            mask,
        }],
        size,
    )
}

fn bake_partials(data: &Dataset, frame: usize, atlas_size: usize) -> Partials {
    let mesh = &data.meshes[frame];
    let mut lr = Vec::new();
    let mut lr_masks = Vec::new();
    for cam in &data.cameras {
        let (img, mask) = &cam.frames[frame];
        let (p, m) =
            atlas_to_partial(&bake_one(mesh, &cam.calib, img, mask, atlas_size), &cam.spec.id);
        lr.push(p);
        lr_masks.push(m);
    }
    // stills are static: always projected through the same frame's mesh
    let mut hr = Vec::new();
    let mut hr_masks = Vec::new();
    for st in &data.stills {
        let (p, m) = atlas_to_partial(
            &bake_one(mesh, &st.calib, &st.image, &st.mask, atlas_size),
            &st.spec.id,
        );
        hr.push(p);
        hr_masks.push(m);
    }
    Partials {
        lr,
        lr_masks,
        hr,
        hr_masks,
    }
}

fn save_partials(dir: &Path, partials: &Partials, frame: usize) -> Result<(), PipelineError> {
    let lr_dir = dir.join("partials").join("lr");
    let hr_dir = dir.join("partials").join("hr");
    fs::create_dir_all(&lr_dir).map_err(|e| io_err(&lr_dir, e))?;
    fs::create_dir_all(&hr_dir).map_err(|e| io_err(&hr_dir, e))?;
    for (p, m) in partials.lr.iter().zip(&partials.lr_masks) {
        save_png(
            &p.image,
            &lr_dir.join(format!("{}_{}.png", p.source_id, frame)),
        )?;
        save_mask_png(m, &lr_dir.join(format!("{}_{}_mask.png", p.source_id, frame)))?;
    }
    if frame == 0 {
        for (p, m) in partials.hr.iter().zip(&partials.hr_masks) {
            save_png(&p.image, &hr_dir.join(format!("{}.png", p.source_id)))?;
            save_mask_png(m, &hr_dir.join(format!("{}_mask.png", p.source_id)))?;
        }
    }
    Ok(())
}

/// Pairing result: for each LR camera index, the paired HR still index and
/// the SSIM score.
pub struct Pairing {
    pub pairs: Vec<(usize, usize, f64)>,
    pub rejected: Vec<usize>,
}

impl Pairing {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lr_index,hr_index,ssim\n");
        for (lr, hr, s) in &self.pairs {
            out.push_str(&format!("{lr},{hr},{s:.6}\n"));
        }
        for r in &self.rejected {
            out.push_str(&format!("{r},,rejected\n"));
        }
        out
    }
}

fn pair_stage(partials: &Partials, coverage_threshold: f64) -> Result<Pairing, PipelineError> {
    let sim = similarity_matrix(&partials.lr, &partials.hr, coverage_threshold)?;
    let pairing = pair_couples(&sim)?;
    Ok(Pairing {
        pairs: pairing.pairs,
        rejected: pairing.rejected,
    })
}

fn colors_of(image: &ImageRgb, mask: &Mask, cap: usize) -> Vec<Vector3<f64>> {
    foreground_colors(image, mask, cap)
}

/// Fits the shared transfer on the selected couples. The couple colors come
/// from camera frames or from partial texture maps depending on where the
/// ordering applies the transfer.
fn fit_stage(
    data: &Dataset,
    partials: &Partials,
    pairing: &Pairing,
    config: &PipelineConfig,
    frame: usize,
) -> Result<(TpsParams, Vec<(usize, usize)>), PipelineError> {
    let pair_of: BTreeMap<usize, (usize, f64)> = pairing
        .pairs
        .iter()
        .map(|&(lr, hr, s)| (lr, (hr, s)))
        .collect();
    let selected = select_couple_cameras(data.cameras.len(), config.couples);
    let mut couples = Vec::new();
    let mut used = Vec::new();
    let cap = config.transfer.max_pixels;
    let per_cap = cap.div_ceil(selected.len().max(1)).max(1);
    for &lr in &selected {
        let Some(&(hr, _)) = pair_of.get(&lr) else {
            continue; // camera rejected during pairing
        };
        let (t_colors, r_colors) = if config.ordering.transfer_on_maps() {
            (
                colors_of(&partials.lr[lr].image, &partials.lr_masks[lr], per_cap),
                colors_of(&partials.hr[hr].image, &partials.hr_masks[hr], per_cap),
            )
        } else {
            let (img, mask) = &data.cameras[lr].frames[frame];
            let still = &data.stills[hr];
            (
                colors_of(img, mask, per_cap),
                colors_of(&still.image, &still.mask, per_cap),
            )
        };
        couples.push((t_colors, r_colors));
        used.push((lr, hr));
    }
    if couples.is_empty() {
        return Err(PipelineError::Manifest(
            "no usable couples: every selected camera was rejected during pairing".to_string(),
        ));
    }
    // shared control points over the union of all target colors
    let union: Vec<Vector3<f64>> = couples.iter().flat_map(|(t, _)| t.iter().copied()).collect();
    let centers = kmeans_colors(&union, config.transfer.n_control, config.transfer.seed);
    let fit = fit_multi_from_colors(&couples, centers.centers, &config.transfer)?;
    Ok((fit.theta, used))
}

// ---------------------------------------------------------------------------
// Run orchestration

/// Everything `run` leaves on disk, keyed for the final report.
pub struct RunSummary {
    pub ordering: Ordering,
    pub pairing: Pairing,
    pub timing: TimingReport,
    pub report: MetricReport,
    /// Final corrected atlas path per frame.
    pub atlases: Vec<PathBuf>,
}

/// Executes the configured ordering over all frames and writes masks,
/// partial maps, the pairing table, the fitted transfer, per-frame atlases,
/// the metric report and the timing table under the manifest output
/// directory. Outputs are deterministic for fixed inputs and configuration.
pub fn run_pipeline(
    manifest: &Manifest,
    config: &PipelineConfig,
    out_base: Option<&Path>,
) -> Result<RunSummary, PipelineError> {
    let out_dir = out_base
        .map(Path::to_path_buf)
        .unwrap_or_else(|| manifest.output_dir())
        .join(config.ordering.name());
    fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
    let mut timing = TimingReport::default();

    let data = timing.record("load", || load_dataset(manifest))?;

    // masks
    timing.record("masks", || {
        let dir = out_dir.join("masks");
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        for cam in &data.cameras {
            for (frame, (_, mask)) in cam.frames.iter().enumerate() {
                save_mask_png(mask, &dir.join(format!("{}_{}.png", cam.spec.id, frame)))?;
            }
        }
        for st in &data.stills {
            save_mask_png(&st.mask, &dir.join(format!("{}.png", st.spec.id)))?;
        }
        Ok(())
    })?;

    // optional frame-space SR (cfg3 runs it after the transfer, handled below)
    let factor = config.sr.factor as usize;
    let sr_frame = |data: &Dataset, frame: usize| -> Result<Vec<(ImageRgb, Mask)>, PipelineError> {
        let mut out = Vec::new();
        for cam in &data.cameras {
            let (img, mask) = &cam.frames[frame];
            out.push((upscale(img, &config.sr)?, upscale_mask(mask, factor)));
        }
        Ok(out)
    };

    // partial maps of frame 0 drive pairing and (for map-space transfer) the fit
    let partials0 = timing.record("partials", || Ok(bake_partials(&data, 0, config.atlas_size)))?;
    save_partials(&out_dir, &partials0, 0)?;

    let pairing = timing.record("pair", || pair_stage(&partials0, config.coverage_threshold))?;
    fs::write(out_dir.join("pairing.csv"), pairing.to_csv())
        .map_err(|e| io_err(&out_dir.join("pairing.csv"), e))?;

    let (theta, used) =
        timing.record("fit", || fit_stage(&data, &partials0, &pairing, config, 0))?;
    save_tps(&theta, &out_dir.join("transfer.tps"))?;
    let couples_txt: String = used
        .iter()
        .map(|(lr, hr)| {
            format!(
                "{},{}\n",
                data.cameras[*lr].spec.id, data.stills[*hr].spec.id
            )
        })
        .collect();
    fs::write(out_dir.join("couples.csv"), format!("lr_id,hr_id\n{couples_txt}"))
        .map_err(|e| io_err(&out_dir.join("couples.csv"), e))?;

    // per-frame processing in the configured order
    let atlas_dir = out_dir.join("atlas");
    fs::create_dir_all(&atlas_dir).map_err(|e| io_err(&atlas_dir, e))?;
    let mut atlases = Vec::new();
    let mut final_maps: Vec<TextureAtlas> = Vec::new();

    for frame in 0..manifest.n_frames {
        let mesh = &data.meshes[frame];
        let atlas = match config.ordering {
            Ordering::Srat => {
                // transfer on frames -> bake -> SR on the atlas
                let corrected = timing.record("transfer", || {
                    Ok(corrected_frames(&data, &theta, frame))
                })?;
                let baked = timing.record("bake", || {
                    Ok(bake_frame(&data, &corrected, mesh, config.atlas_size, 1))
                })?;
                timing.record("sr", || {
                    Ok(TextureAtlas {
                        image: upscale(&baked.image, &config.sr)?,
                        filled: upscale_mask(&baked.filled, factor),
                    })
                })?
            }
            Ordering::Cfg1 => {
                // bake -> transfer on the map -> SR
                let baked = timing.record("bake", || {
                    Ok(bake_frame(&data, &original_frames(&data, frame), mesh, config.atlas_size, 1))
                })?;
                let transferred = timing.record("transfer", || {
                    Ok(TextureAtlas {
                        image: apply_transfer(&theta, &baked.image, &baked.filled),
                        filled: baked.filled.clone(),
                    })
                })?;
                timing.record("sr", || {
                    Ok(TextureAtlas {
                        image: upscale(&transferred.image, &config.sr)?,
                        filled: upscale_mask(&transferred.filled, factor),
                    })
                })?
            }
            Ordering::Cfg2 => {
                // bake -> SR -> transfer on the upscaled map
                let baked = timing.record("bake", || {
                    Ok(bake_frame(&data, &original_frames(&data, frame), mesh, config.atlas_size, 1))
                })?;
                let up = timing.record("sr", || {
                    Ok(TextureAtlas {
                        image: upscale(&baked.image, &config.sr)?,
                        filled: upscale_mask(&baked.filled, factor),
                    })
                })?;
                timing.record("transfer", || {
                    Ok(TextureAtlas {
                        image: apply_transfer(&theta, &up.image, &up.filled),
                        filled: up.filled.clone(),
                    })
                })?
            }
            Ordering::Cfg3 => {
                // transfer on frames -> SR on frames -> bake with scaled intrinsics
                let corrected = timing.record("transfer", || {
                    Ok(corrected_frames(&data, &theta, frame))
                })?;
                let upscaled = timing.record("sr", || {
                    let mut out = Vec::new();
                    for (img, mask) in &corrected {
                        out.push((upscale(img, &config.sr)?, upscale_mask(mask, factor)));
                    }
                    Ok(out)
                })?;
                timing.record("bake", || {
                    Ok(bake_frame(&data, &upscaled, mesh, config.atlas_size * factor, factor))
                })?
            }
            Ordering::Cfg4 => {
                // SR on frames -> transfer -> bake
                let upscaled = timing.record("sr", || sr_frame(&data, frame))?;
                let corrected = timing.record("transfer", || {
                    Ok(upscaled
                        .iter()
                        .map(|(img, mask)| (apply_transfer(&theta, img, mask), mask.clone()))
                        .collect::<Vec<_>>())
                })?;
                timing.record("bake", || {
                    Ok(bake_frame(&data, &corrected, mesh, config.atlas_size * factor, factor))
                })?
            }
            Ordering::Cfg5 => {
                // SR on frames -> bake -> transfer on the map
                let upscaled = timing.record("sr", || sr_frame(&data, frame))?;
                let baked = timing.record("bake", || {
                    Ok(bake_frame(&data, &upscaled, mesh, config.atlas_size * factor, factor))
                })?;
                timing.record("transfer", || {
                    Ok(TextureAtlas {
                        image: apply_transfer(&theta, &baked.image, &baked.filled),
                        filled: baked.filled.clone(),
                    })
                })?
            }
        };
        let path = atlas_dir.join(format!("frame_{frame}.png"));
        save_png(&atlas.image, &path)?;
        save_mask_png(&atlas.filled, &atlas_dir.join(format!("frame_{frame}_mask.png")))?;
        atlases.push(path);
        final_maps.push(atlas);
    }

    // evaluation: corrected atlases against the HR partial maps
    let report = timing.record("eval", || {
        let mut corrected_store: Vec<(String, ImageRgb, Mask)> = Vec::new();
        let mut reference_store: Vec<(ImageRgb, Mask)> = Vec::new();
        for (frame, atlas) in final_maps.iter().enumerate() {
            for (hp, hm) in partials0.hr.iter().zip(&partials0.hr_masks) {
                let (a_img, a_mask, h_img, h_mask) = harmonized(atlas, hp, hm);
                corrected_store.push((
                    format!("frame{}_vs_{}", frame, hp.source_id),
                    a_img,
                    a_mask,
                ));
                reference_store.push((h_img, h_mask));
            }
        }
        let corrected: Vec<(String, &ImageRgb, &Mask)> = corrected_store
            .iter()
            .map(|(n, i, m)| (n.clone(), i, m))
            .collect();
        let references: Vec<(&ImageRgb, &Mask)> =
            reference_store.iter().map(|(i, m)| (i, m)).collect();
        Ok(evaluate_correction(&corrected, &references)?)
    })?;
    fs::write(out_dir.join("report.csv"), report.to_csv())
        .map_err(|e| io_err(&out_dir.join("report.csv"), e))?;
    fs::write(out_dir.join("timing.csv"), timing.to_table())
        .map_err(|e| io_err(&out_dir.join("timing.csv"), e))?;

    Ok(RunSummary {
        ordering: config.ordering,
        pairing,
        timing,
        report,
        atlases,
    })
}

/// Brings an atlas and a partial map to a common resolution for histogram
/// comparison (the final atlas may be SR-upscaled).
fn harmonized(
    atlas: &TextureAtlas,
    partial: &PartialTextureMap,
    partial_mask: &Mask,
) -> (ImageRgb, Mask, ImageRgb, Mask) {
    let (aw, ah) = (atlas.image.width(), atlas.image.height());
    let (pw, ph) = (partial.image.width(), partial.image.height());
    let w = aw.min(pw);
    let h = ah.min(ph);
    let resize = |img: &ImageRgb, mask: &Mask| -> (ImageRgb, Mask) {
        if img.width() == w && img.height() == h {
            (img.clone(), mask.clone())
        } else {
            (
                crate::imaging::resize_bicubic(img, w, h),
                downscale_mask(mask, w, h),
            )
        }
    };
    let (ai, am) = resize(&atlas.image, &atlas.filled);
    let (pi, pm) = resize(&partial.image, partial_mask);
    (ai, am, pi, pm)
}

fn original_frames(data: &Dataset, frame: usize) -> Vec<(ImageRgb, Mask)> {
    data.cameras
        .iter()
        .map(|c| c.frames[frame].clone())
        .collect()
}

fn corrected_frames(data: &Dataset, theta: &TpsParams, frame: usize) -> Vec<(ImageRgb, Mask)> {
    data.cameras
        .iter()
        .map(|c| {
            let (img, mask) = &c.frames[frame];
            (apply_transfer(theta, img, mask), mask.clone())
        })
        .collect()
}

/// Bakes one frame from per-camera images. `intrinsics_factor` scales the
/// calibration when the images were upscaled beforehand.
fn bake_frame(
    data: &Dataset,
    frames: &[(ImageRgb, Mask)],
    mesh: &Mesh,
    atlas_size: usize,
    intrinsics_factor: usize,
) -> TextureAtlas {
    let calibs: Vec<CameraCalib> = data
        .cameras
        .iter()
        .map(|c| {
            if intrinsics_factor == 1 {
                c.calib.clone()
            } else {
                c.calib.scaled(intrinsics_factor)
            }
        })
        .collect();
    let views: Vec<BakeView<'_>> = calibs
        .iter()
        .zip(frames)
        .map(|(calib, (image, mask))| BakeView { calib, image, mask })
        .collect();
    bake_texture(mesh, &views, atlas_size)
}

/// Nearest-neighbor mask upscaling (masks are crisp; bicubic would blur the
/// boundary).
pub fn upscale_mask(mask: &Mask, factor: usize) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let mut bits = Vec::with_capacity(w * factor * h * factor);
    for y in 0..h * factor {
        for x in 0..w * factor {
            bits.push(mask.get(x / factor, y / factor));
        }
    }
    Mask::new(w * factor, h * factor, bits)
}

/// Nearest-neighbor mask resampling to an arbitrary size.
pub fn downscale_mask(mask: &Mask, new_w: usize, new_h: usize) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let mut bits = Vec::with_capacity(new_w * new_h);
    for y in 0..new_h {
        for x in 0..new_w {
            let sx = (x * w / new_w).min(w - 1);
            let sy = (y * h / new_h).min(h - 1);
            bits.push(mask.get(sx, sy));
        }
    }
    Mask::new(new_w, new_h, bits)
}

/// Renders every final atlas back into its camera for visual inspection.
/// Used by the eval subcommand when ground-truth views are available.
pub fn reproject_atlas(
    mesh: &Mesh,
    atlas: &TextureAtlas,
    calib: &CameraCalib,
) -> (ImageRgb, Mask) {
    render_view(mesh, atlas, calib, [0.0, 0.0, 0.0])
}

// ---------------------------------------------------------------------------
// Single-stage entry points used by the command-line interface

fn ensure_dir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Bakes the frame-0 partial maps, writes them with the pairing table under
/// `out` and returns the pairing.
pub fn cmd_pair(
    manifest: &Manifest,
    config: &PipelineConfig,
    out: &Path,
) -> Result<Pairing, PipelineError> {
    let data = load_dataset(manifest)?;
    let partials = bake_partials(&data, 0, config.atlas_size);
    ensure_dir(out)?;
    save_partials(out, &partials, 0)?;
    let pairing = pair_stage(&partials, config.coverage_threshold)?;
    fs::write(out.join("pairing.csv"), pairing.to_csv())
        .map_err(|e| io_err(&out.join("pairing.csv"), e))?;
    Ok(pairing)
}

/// Pairs, fits the shared color transfer and writes `transfer.tps` plus the
/// couple table under `out`.
pub fn cmd_fit(
    manifest: &Manifest,
    config: &PipelineConfig,
    out: &Path,
) -> Result<TpsParams, PipelineError> {
    let data = load_dataset(manifest)?;
    let partials = bake_partials(&data, 0, config.atlas_size);
    let pairing = pair_stage(&partials, config.coverage_threshold)?;
    let (theta, used) = fit_stage(&data, &partials, &pairing, config, 0)?;
    ensure_dir(out)?;
    save_tps(&theta, &out.join("transfer.tps"))?;
    let couples_txt: String = used
        .iter()
        .map(|(lr, hr)| format!("{},{}\n", data.cameras[*lr].spec.id, data.stills[*hr].spec.id))
        .collect();
    fs::write(out.join("couples.csv"), format!("lr_id,hr_id\n{couples_txt}"))
        .map_err(|e| io_err(&out.join("couples.csv"), e))?;
    Ok(theta)
}

/// Applies the fitted transfer at `out/transfer.tps` to every frame of every
/// camera, writing `out/corrected/<camera>_<frame>.png`.
pub fn cmd_apply(
    manifest: &Manifest,
    _config: &PipelineConfig,
    out: &Path,
) -> Result<(), PipelineError> {
    let theta = crate::colortransfer::load_tps(&out.join("transfer.tps"))?;
    let data = load_dataset(manifest)?;
    let dir = out.join("corrected");
    ensure_dir(&dir)?;
    for cam in &data.cameras {
        for (frame, (img, mask)) in cam.frames.iter().enumerate() {
            let corrected = apply_transfer(&theta, img, mask);
            save_png(&corrected, &dir.join(format!("{}_{}.png", cam.spec.id, frame)))?;
        }
    }
    Ok(())
}

/// Bakes every frame from the raw camera images into `out/atlas/`.
pub fn cmd_bake(
    manifest: &Manifest,
    config: &PipelineConfig,
    out: &Path,
) -> Result<Vec<PathBuf>, PipelineError> {
    let data = load_dataset(manifest)?;
    let dir = out.join("atlas");
    ensure_dir(&dir)?;
    let mut paths = Vec::new();
    for frame in 0..manifest.n_frames {
        let atlas = bake_frame(
            &data,
            &original_frames(&data, frame),
            &data.meshes[frame],
            config.atlas_size,
            1,
        );
        let path = dir.join(format!("frame_{frame}.png"));
        save_png(&atlas.image, &path)?;
        save_mask_png(&atlas.filled, &dir.join(format!("frame_{frame}_mask.png")))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Upscales every frame of every camera with the configured backend into
/// `out/sr/`.
pub fn cmd_sr(
    manifest: &Manifest,
    config: &PipelineConfig,
    out: &Path,
) -> Result<(), PipelineError> {
    let data = load_dataset(manifest)?;
    let dir = out.join("sr");
    ensure_dir(&dir)?;
    for cam in &data.cameras {
        for (frame, (img, _)) in cam.frames.iter().enumerate() {
            let up = upscale(img, &config.sr)?;
            save_png(&up, &dir.join(format!("{}_{}.png", cam.spec.id, frame)))?;
        }
    }
    Ok(())
}

/// Evaluates baked atlases under `out/atlas/` against the high-res partial
/// maps; falls back to the raw per-camera partial maps when no atlases were
/// baked yet. Writes `out/report.csv`.
pub fn cmd_eval(
    manifest: &Manifest,
    config: &PipelineConfig,
    out: &Path,
) -> Result<MetricReport, PipelineError> {
    let data = load_dataset(manifest)?;
    let partials = bake_partials(&data, 0, config.atlas_size);
    let mut corrected_store: Vec<(String, ImageRgb, Mask)> = Vec::new();
    let mut reference_store: Vec<(ImageRgb, Mask)> = Vec::new();
    let atlas_dir = out.join("atlas");
    if atlas_dir.join("frame_0.png").is_file() {
        for frame in 0..manifest.n_frames {
            let (img, _) = load_png(&atlas_dir.join(format!("frame_{frame}.png")))?;
            let mask = load_mask_png(&atlas_dir.join(format!("frame_{frame}_mask.png")))?;
            let atlas = TextureAtlas { image: img, filled: mask };
            for (hp, hm) in partials.hr.iter().zip(&partials.hr_masks) {
                let (ai, am, pi, pm) = harmonized(&atlas, hp, hm);
                corrected_store.push((format!("frame{}_vs_{}", frame, hp.source_id), ai, am));
                reference_store.push((pi, pm));
            }
        }
    } else {
        for (lp, lm) in partials.lr.iter().zip(&partials.lr_masks) {
            for (hp, hm) in partials.hr.iter().zip(&partials.hr_masks) {
                corrected_store.push((
                    format!("{}_vs_{}", lp.source_id, hp.source_id),
                    lp.image.clone(),
                    lm.clone(),
                ));
                reference_store.push((hp.image.clone(), hm.clone()));
            }
        }
    }
    let corrected: Vec<(String, &ImageRgb, &Mask)> = corrected_store
        .iter()
        .map(|(n, i, m)| (n.clone(), i, m))
        .collect();
    let references: Vec<(&ImageRgb, &Mask)> =
        reference_store.iter().map(|(i, m)| (i, m)).collect();
    let report = evaluate_correction(&corrected, &references)?;
    ensure_dir(out)?;
    fs::write(out.join("report.csv"), report.to_csv())
        .map_err(|e| io_err(&out.join("report.csv"), e))?;
    Ok(report)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_couple_cameras_even_spread() {
        assert_eq!(
            select_couple_cameras(16, 8),
            vec![0, 2, 4, 6, 8, 10, 12, 14]
        );
        assert_eq!(select_couple_cameras(4, 2), vec![0, 2]);
        assert_eq!(select_couple_cameras(3, 3), vec![0, 1, 2]);
        // more couples than cameras clamps
        assert_eq!(select_couple_cameras(2, 5), vec![0, 1]);
        assert_eq!(select_couple_cameras(5, 1), vec![0]);
    }

    #[test]
    fn ordering_names_round_trip() {
        for o in Ordering::ALL {
            assert_eq!(o.name().parse::<Ordering>().unwrap(), o);
        }
        assert!("bogus".parse::<Ordering>().is_err());
    }

    #[test]
    fn config_defaults_and_parse() {
        let c: PipelineConfig = toml::from_str("").unwrap();
        assert_eq!(c.ordering, Ordering::Srat);
        assert_eq!(c.atlas_size, 2048);
        let c: PipelineConfig =
            toml::from_str("ordering = \"cfg3\"\ncouples = 4\natlas_size = 128\n").unwrap();
        assert_eq!(c.ordering, Ordering::Cfg3);
        assert_eq!(c.couples, 4);
        assert_eq!(c.atlas_size, 128);
    }

    #[test]
    fn manifest_parse_and_validation_reports_all_problems() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"
output_dir = "out"
n_frames = 2
mesh_pattern = "mesh_{frame}.obj"

[[lr_cameras]]
id = "cam0"
calib = "cam0.txt"
frame_pattern = "cam0_{frame}.png"

[[hr_stills]]
id = "still0"
calib = "still0.txt"
image = "still0.png"
"#;
        let path = dir.path().join("manifest.toml");
        fs::write(&path, text).unwrap();
        let manifest = Manifest::load(&path).unwrap();
        let problems = validate_manifest(&manifest);
        // meshes (2), cam calib, 2 frames, still calib + image, missing mask source
        assert!(problems.len() >= 7, "{problems:?}");
        assert!(problems.iter().any(|p| p.contains("mesh_0.obj")));
        assert!(problems.iter().any(|p| p.contains("cam0_1.png")));
        assert!(problems.iter().any(|p| p.contains("no mask")));
    }

    #[test]
    fn timing_total_is_sum() {
        let mut t = TimingReport::default();
        t.stages.push(("a".into(), Duration::from_millis(12)));
        t.stages.push(("b".into(), Duration::from_millis(30)));
        assert_eq!(t.total(), Duration::from_millis(42));
        let table = t.to_table();
        assert!(table.ends_with("total,42.000\n"));
    }

    #[test]
    fn mask_resampling() {
        let mut m = Mask::empty(2, 2);
        m.set(0, 0, true);
        let up = upscale_mask(&m, 2);
        assert_eq!(up.width(), 4);
        assert!(up.get(0, 0) && up.get(1, 1));
        assert!(!up.get(2, 2));
        let down = downscale_mask(&up, 2, 2);
        assert_eq!(down, m);
    }
}
