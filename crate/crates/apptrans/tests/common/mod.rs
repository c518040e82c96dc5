//! Shared helpers for the integration tests: a synthetic, fully calibrated
//! toy dataset (textured tetrahedron, four low-res cameras, two high-res
//! stills, two frames) written to disk in the on-disk formats the pipeline
//! consumes.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};

use apptrans::imaging::{save_png, ImageRgb, Mask};
use apptrans::projection::{render_view, CameraCalib, Mesh, TextureAtlas};

/// Background color rendered behind the object and keyed out by the
/// pipeline's chroma key.
pub const BACKGROUND: [f32; 3] = [0.0, 1.0, 0.0];

/// Per-channel gain simulating the low-res cameras' color cast.
pub const LR_GAIN: [f32; 3] = [0.8, 0.9, 1.05];
/// Per-channel offset of the low-res color cast.
pub const LR_OFFSET: [f32; 3] = [0.08, 0.02, 0.0];

/// Right-handed look-at pose: camera z axis points from `eye` to `target`.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, focal: f64, size: usize) -> CameraCalib {
    let forward = (target - eye).normalize();
    let up_hint = if forward.cross(&Vector3::y()).norm() < 1e-6 {
        Vector3::z()
    } else {
        Vector3::y()
    };
    let right = forward.cross(&up_hint).normalize();
    let down = forward.cross(&right).normalize();
    let mut r = Matrix3::zeros();
    for c in 0..3 {
        r[(0, c)] = right[c];
        r[(1, c)] = down[c];
        r[(2, c)] = forward[c];
    }
    if r.determinant() < 0.0 {
        for c in 0..3 {
            r[(0, c)] = -r[(0, c)];
        }
    }
    let t = -(r * eye);
    let k = Matrix3::new(
        focal,
        0.0,
        size as f64 / 2.0,
        0.0,
        focal,
        size as f64 / 2.0,
        0.0,
        0.0,
        1.0,
    );
    CameraCalib::new(k, r, t, size, size).unwrap()
}

/// Tetrahedron around `center` with one UV chart per face (atlas quadrants,
/// with margins), wound so every face normal points away from the centroid.
pub fn tetrahedron(center: Vector3<f64>, scale: f64) -> Mesh {
    let base = [
        Vector3::new(1.0, 1.0, 1.0),
        Vector3::new(1.0, -1.0, -1.0),
        Vector3::new(-1.0, 1.0, -1.0),
        Vector3::new(-1.0, -1.0, 1.0),
    ];
    let positions: Vec<Vector3<f64>> = base.iter().map(|v| center + v * scale).collect();
    let face_indices = [[0usize, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
    let chart_offsets = [(0.0, 0.0), (0.5, 0.0), (0.0, 0.5), (0.5, 0.5)];
    let mut texcoords = Vec::new();
    let mut faces = Vec::new();
    let centroid = center;
    for (f, idx) in face_indices.iter().enumerate() {
        let (ox, oy) = chart_offsets[f];
        let chart = [
            Vector2::new(ox + 0.06, oy + 0.06),
            Vector2::new(ox + 0.44, oy + 0.06),
            Vector2::new(ox + 0.06, oy + 0.44),
        ];
        let t0 = texcoords.len();
        texcoords.extend(chart);
        let mut tri = *idx;
        // orient outward
        let a = positions[tri[0]];
        let n = (positions[tri[1]] - a).cross(&(positions[tri[2]] - a));
        let face_center = (positions[tri[0]] + positions[tri[1]] + positions[tri[2]]) / 3.0;
        if n.dot(&(face_center - centroid)) < 0.0 {
            tri.swap(1, 2);
        }
        faces.push([(tri[0], t0), (tri[1], t0 + 1), (tri[2], t0 + 2)]);
    }
    Mesh {
        positions,
        texcoords,
        faces,
    }
}

/// Ground-truth atlas: each face chart gets a distinct base color with a
/// smooth gradient so texture structure survives resampling.
pub fn ground_truth_atlas(size: usize) -> TextureAtlas {
    let chart_colors = [
        [0.85f32, 0.15, 0.20],
        [0.20, 0.35, 0.85],
        [0.90, 0.60, 0.15],
        [0.60, 0.20, 0.70],
    ];
    let image = ImageRgb::from_fn(size, size, |x, y| {
        let u = (x as f32 + 0.5) / size as f32;
        let v = 1.0 - (y as f32 + 0.5) / size as f32;
        let quad = match (u >= 0.5, v >= 0.5) {
            (false, false) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (true, true) => 3,
        };
        let base = chart_colors[quad];
        let lu = (u % 0.5) * 2.0;
        let lv = (v % 0.5) * 2.0;
        [
            (base[0] + 0.10 * lu - 0.05).clamp(0.0, 1.0),
            (base[1] + 0.10 * lv - 0.05).clamp(0.0, 1.0),
            (base[2] + 0.05 * (lu + lv) - 0.05).clamp(0.0, 1.0),
        ]
    });
    TextureAtlas {
        filled: Mask::full(size, size),
        image,
    }
}

/// Applies the synthetic low-res color cast.
pub fn cast_lr(image: &ImageRgb, mask: &Mask) -> ImageRgb {
    ImageRgb::from_fn(image.width(), image.height(), |x, y| {
        let p = image.pixel(x, y);
        if !mask.get(x, y) {
            return p;
        }
        [
            (p[0] * LR_GAIN[0] + LR_OFFSET[0]).clamp(0.0, 1.0),
            (p[1] * LR_GAIN[1] + LR_OFFSET[1]).clamp(0.0, 1.0),
            (p[2] * LR_GAIN[2] + LR_OFFSET[2]).clamp(0.0, 1.0),
        ]
    })
}

pub struct ToyDataset {
    pub manifest_path: std::path::PathBuf,
}

/// Writes the complete toy dataset under `dir` and returns the manifest
/// location: 4 low-res 64x64 cameras with 2 frames each (color-cast), 2
/// high-res 256x256 stills (true colors), per-frame tetrahedron meshes and
/// a green-screen chroma key.
pub fn write_toy_dataset(dir: &Path) -> ToyDataset {
    let calib_dir = dir.join("calib");
    let frame_dir = dir.join("frames");
    let hr_dir = dir.join("hr");
    let mesh_dir = dir.join("mesh");
    for d in [&calib_dir, &frame_dir, &hr_dir, &mesh_dir] {
        fs::create_dir_all(d).unwrap();
    }

    let center = Vector3::new(0.0, 0.0, 0.0);
    let atlas = ground_truth_atlas(128);
    let n_frames = 2;
    let meshes: Vec<Mesh> = (0..n_frames)
        .map(|f| {
            let shift = Vector3::new(0.05 * f as f64, 0.0, 0.0);
            tetrahedron(center + shift, 0.6)
        })
        .collect();
    for (f, mesh) in meshes.iter().enumerate() {
        mesh.save_obj(&mesh_dir.join(format!("frame_{f}.obj"))).unwrap();
    }

    // low-res ring
    let mut lr_entries = String::new();
    for k in 0..4 {
        let angle = std::f64::consts::TAU * k as f64 / 4.0 + 0.3;
        let eye = Vector3::new(2.5 * angle.cos(), 0.8, 2.5 * angle.sin());
        let calib = look_at(eye, center, 64.0, 64);
        calib.save(&calib_dir.join(format!("cam{k}.txt"))).unwrap();
        for (f, mesh) in meshes.iter().enumerate() {
            let (rendered, mask) = render_view(mesh, &atlas, &calib, BACKGROUND);
            let cast = cast_lr(&rendered, &mask);
            save_png(&cast, &frame_dir.join(format!("cam{k}_{f}.png"))).unwrap();
        }
        lr_entries.push_str(&format!(
            "[[lr_cameras]]\nid = \"cam{k}\"\ncalib = \"calib/cam{k}.txt\"\nframe_pattern = \"frames/cam{k}_{{frame}}.png\"\n\n"
        ));
    }

    // high-res stills (true appearance, frame-0 geometry)
    let mut hr_entries = String::new();
    for (j, angle) in [0.9f64, 3.8].iter().enumerate() {
        let eye = Vector3::new(2.2 * angle.cos(), 1.0, 2.2 * angle.sin());
        let calib = look_at(eye, center, 256.0, 256);
        calib.save(&calib_dir.join(format!("still{j}.txt"))).unwrap();
        let (rendered, _) = render_view(&meshes[0], &atlas, &calib, BACKGROUND);
        save_png(&rendered, &hr_dir.join(format!("still{j}.png"))).unwrap();
        hr_entries.push_str(&format!(
            "[[hr_stills]]\nid = \"still{j}\"\ncalib = \"calib/still{j}.txt\"\nimage = \"hr/still{j}.png\"\n\n"
        ));
    }

    let manifest = format!(
        "output_dir = \"out\"\nn_frames = {n_frames}\nmesh_pattern = \"mesh/frame_{{frame}}.obj\"\n\n[chroma_key]\ncolor = [0.0, 1.0, 0.0]\ntolerance = 0.35\n\n{lr_entries}{hr_entries}"
    );
    let manifest_path = dir.join("manifest.toml");
    fs::write(&manifest_path, manifest).unwrap();
    ToyDataset { manifest_path }
}

/// Fast transfer/pipeline configuration for the toy dataset.
pub fn toy_config_toml(ordering: &str) -> String {
    format!(
        "ordering = \"{ordering}\"\ncouples = 2\natlas_size = 64\ncoverage_threshold = 0.02\n\n[transfer]\nk = 8\nn_control = 8\nmax_iters = 60\nmax_pixels = 20000\n\n[sr]\nkind = \"bicubic\"\nfactor = 2\n"
    )
}
