//! Texture super-resolution stage behind a pluggable backend: a built-in
//! bicubic baseline and an external-command backend so any trained model
//! can be dropped in.

use std::process::Command;

use thiserror::Error;

use crate::imaging::{load_png, luma, resize_bicubic, save_png, ImageRgb};

#[derive(Debug, Error)]
pub enum SrError {
    #[error("upscale factor must be 2 or 4, got {0}")]
    BadFactor(u32),
    #[error("texture is empty")]
    EmptyTexture,
    #[error("dimensions {0}x{1} not divisible by factor {2}")]
    NotDivisible(usize, usize, u32),
    #[error("external command failed with {status}: {stderr}")]
    CommandFailed { status: String, stderr: String },
    #[error("external command produced no output at {0}")]
    MissingOutput(String),
    #[error("external backend returned {got_w}x{got_h}, expected {want_w}x{want_h}")]
    WrongOutputSize {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("failed to run command {cmd:?}: {source}")]
    Spawn {
        cmd: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] crate::imaging::ImageError),
    #[error("temp dir: {0}")]
    TempDir(std::io::Error),
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SrBackend {
    Bicubic,
    /// Shell command with `{in}`, `{out}`, and `{factor}` placeholders,
    /// run in a per-invocation temp dir.
    External { command_template: String },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SrBackendSpec {
    #[serde(flatten)]
    pub backend: SrBackend,
    pub factor: u32,
}

impl Default for SrBackendSpec {
    fn default() -> Self {
        Self {
            backend: SrBackend::Bicubic,
            factor: 2,
        }
    }
}

impl SrBackendSpec {
    pub fn validate(&self) -> Result<(), SrError> {
        if self.factor != 2 && self.factor != 4 {
            return Err(SrError::BadFactor(self.factor));
        }
        Ok(())
    }
}

fn temp_dir() -> Result<tempfile::TempDir, SrError> {
    // APPTRANS_TMPDIR overrides the system temp location
    let base = std::env::var_os("APPTRANS_TMPDIR")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(std::env::temp_dir);
    tempfile::Builder::new()
        .prefix("apptrans-sr-")
        .tempdir_in(base)
        .map_err(SrError::TempDir)
}

/// Upscale a texture by the configured factor. The output dimension contract is
/// enforced for every backend: a wrong-size result is an error, never a
/// silently wrong image.
pub fn upscale(texture: &ImageRgb, spec: &SrBackendSpec) -> Result<ImageRgb, SrError> {
    spec.validate()?;
    if texture.width() == 0 || texture.height() == 0 {
        return Err(SrError::EmptyTexture);
    }
    let want_w = texture.width() * spec.factor as usize;
    let want_h = texture.height() * spec.factor as usize;
    let out = match &spec.backend {
        SrBackend::Bicubic => resize_bicubic(texture, want_w, want_h),
        SrBackend::External { command_template } => {
            let dir = temp_dir()?;
            let in_path = dir.path().join("input.png");
            let out_path = dir.path().join("output.png");
            save_png(texture, &in_path)?;
            let cmd = command_template
                .replace("{in}", &in_path.display().to_string())
                .replace("{out}", &out_path.display().to_string())
                .replace("{factor}", &spec.factor.to_string());
            let result = Command::new("sh")
                .arg("-c")
                .arg(&cmd)
                .current_dir(dir.path())
                .output()
                .map_err(|source| SrError::Spawn {
                    cmd: cmd.clone(),
                    source,
                })?;
            if !result.status.success() {
                return Err(SrError::CommandFailed {
                    status: result.status.to_string(),
                    stderr: String::from_utf8_lossy(&result.stderr).into_owned(),
                });
            }
            if !out_path.exists() {
                return Err(SrError::MissingOutput(out_path.display().to_string()));
            }
            let (img, _) = load_png(&out_path)?;
            img
        }
    };
    if out.width() != want_w || out.height() != want_h {
        return Err(SrError::WrongOutputSize {
            got_w: out.width(),
            got_h: out.height(),
            want_w,
            want_h,
        });
    }
    Ok(out)
}

/// Bicubic downscale used to build (LR, ground-truth) evaluation pairs.
pub fn downscale_eval(texture: &ImageRgb, factor: u32) -> Result<ImageRgb, SrError> {
    if factor != 2 && factor != 4 {
        return Err(SrError::BadFactor(factor));
    }
    let f = factor as usize;
    if texture.width() % f != 0 || texture.height() % f != 0 {
        return Err(SrError::NotDivisible(
            texture.width(),
            texture.height(),
            factor,
        ));
    }
    Ok(resize_bicubic(texture, texture.width() / f, texture.height() / f))
}

/// Heatmap scale: luma error 0.25 and above maps to the red end.
pub const HEATMAP_MAX_ERROR: f32 = 0.25;

fn heatmap_color(t: f32) -> [f32; 3] {
    // blue -> green -> red
    let t = t.clamp(0.0, 1.0);
    if t < 0.5 {
        let u = t * 2.0;
        [0.0, u, 1.0 - u]
    } else {
        let u = (t - 0.5) * 2.0;
        [u, 1.0 - u, 0.0]
    }
}

/// Per-pixel absolute luma error mapped through a blue-green-red colormap
/// with a fixed [0, 0.25] scale so heatmaps are comparable across methods.
pub fn sr_heatmap(sr: &ImageRgb, gt: &ImageRgb) -> Result<ImageRgb, SrError> {
    if !sr.same_size(gt) {
        return Err(SrError::DimensionMismatch(
            sr.width(),
            sr.height(),
            gt.width(),
            gt.height(),
        ));
    }
    Ok(ImageRgb::from_fn(sr.width(), sr.height(), |x, y| {
        let e = (luma(sr.pixel(x, y)) - luma(gt.pixel(x, y))).abs();
        heatmap_color(e / HEATMAP_MAX_ERROR)
    }))
}
