//! Thin-plate-spline color transfer learned by minimizing the L2 divergence
//! between Gaussian-mixture color distributions over several view couples.
//!
//! Each couple (target frame, reference still) contributes one parameter
//! set fitted by gradient descent; all couples share one control-point
//! basis so the sets can be averaged entrywise into the final transfer.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use thiserror::Error;

use crate::imaging::{ImageRgb, Mask};

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("couple {0} has an empty foreground; supply a non-empty mask")]
    EmptyForeground(String),
    #[error("all {0} couples were rejected; nothing to fit")]
    AllCouplesRejected(usize),
    #[error("no colors available for control point selection")]
    NoColors,
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
}

/// Gaussian mixture over RGB space with equiprobable component weights
/// 1/K and a shared isotropic bandwidth.
#[derive(Debug, Clone)]
pub struct GmmModel {
    pub means: Vec<Vector3<f64>>,
    pub bandwidth: f64,
}

impl GmmModel {
    pub fn new(means: Vec<Vector3<f64>>, bandwidth: f64) -> Self {
        assert!(bandwidth > 0.0);
        assert!(!means.is_empty());
        Self { means, bandwidth }
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.means.len() as f64
    }
}

/// Thin-plate-spline map of RGB space: affine part plus radially weighted
/// kernel terms U(r) = r anchored at fixed control points.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsParams {
    pub affine: Matrix3<f64>,
    pub offset: Vector3<f64>,
    /// One weight row per control point.
    pub radial_weights: Vec<Vector3<f64>>,
    pub control_points: Vec<Vector3<f64>>,
}

impl TpsParams {
    pub fn identity(control_points: Vec<Vector3<f64>>) -> Self {
        let n = control_points.len();
        Self {
            affine: Matrix3::identity(),
            offset: Vector3::zeros(),
            radial_weights: vec![Vector3::zeros(); n],
            control_points,
        }
    }

    pub fn n_control(&self) -> usize {
        self.control_points.len()
    }
}

/// Optimizer and model-size knobs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    /// Gaussian mixture component count.
    pub k: usize,
    /// Mixture bandwidth in [0,1] RGB units.
    pub h: f64,
    /// Control point count of the shared basis.
    pub n_control: usize,
    pub max_iters: usize,
    /// Initial gradient step; halved whenever a step increases the energy.
    pub step: f64,
    /// Weight of the |W|^2 smoothness term.
    pub lambda: f64,
    pub seed: u64,
    /// Foreground pixels per image are stride-subsampled down to this cap.
    pub max_pixels: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            k: 50,
            h: 0.1,
            n_control: 30,
            max_iters: 500,
            step: 0.05,
            lambda: 1e-3,
            seed: 0,
            max_pixels: 100_000,
        }
    }
}

/// Energy trace of one couple's descent; `energies` holds the accepted
/// (non-increasing) total energies.
#[derive(Debug, Clone)]
pub struct FitLog {
    pub energies: Vec<f64>,
    pub final_energy: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct MultiFit {
    pub theta: TpsParams,
    pub per_couple: Vec<FitLog>,
    /// Indices of couples skipped for empty foregrounds.
    pub rejected: Vec<usize>,
}

// ---------------------------------------------------------------------------
// K-means

#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub centers: Vec<Vector3<f64>>,
    /// True when K was reduced because fewer distinct points exist.
    pub reduced: bool,
}

/// Lloyd's algorithm with k-means++ seeding; converges when no assignment
/// changes or after 100 iterations. Deterministic for a given seed.
pub fn kmeans_colors(points: &[Vector3<f64>], k: usize, seed: u64) -> KmeansResult {
    use rand::distributions::{Distribution, WeightedIndex};
    use rand::{Rng, SeedableRng};

    assert!(k >= 1);
    assert!(!points.is_empty());
    let mut distinct: Vec<Vector3<f64>> = Vec::new();
    for p in points {
        if !distinct.iter().any(|q| q == p) {
            distinct.push(*p);
            if distinct.len() > k {
                break;
            }
        }
    }
    let (k, reduced) = if distinct.len() < k {
        (distinct.len(), true)
    } else {
        (k, false)
    };

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    // k-means++ seeding
    let mut centers: Vec<Vector3<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.gen_range(0..points.len())]);
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| (p - centers[0]).norm_squared())
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all remaining points coincide with a center; pick any unseen
            match points.iter().find(|p| !centers.contains(p)) {
                Some(p) => *p,
                None => break,
            }
        } else {
            let dist = WeightedIndex::new(&d2).expect("nonnegative weights");
            points[dist.sample(&mut rng)]
        };
        centers.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min((p - next).norm_squared());
        }
    }

    // Lloyd iterations
    let mut assignment = vec![usize::MAX; points.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let d = (p - c).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![Vector3::<f64>::zeros(); centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (i, p) in points.iter().enumerate() {
            sums[assignment[i]] += p;
            counts[assignment[i]] += 1;
        }
        for j in 0..centers.len() {
            if counts[j] > 0 {
                centers[j] = sums[j] / counts[j] as f64;
            }
        }
    }
    KmeansResult { centers, reduced }
}

// ---------------------------------------------------------------------------
// TPS evaluation

#[inline]
fn tps_kernel(r: f64) -> f64 {
    // 3D biharmonic kernel
    r
}

/// Evaluate the spline without clipping.
pub fn tps_eval(theta: &TpsParams, x: Vector3<f64>) -> Vector3<f64> {
    let mut y = theta.affine * x + theta.offset;
    for (w, c) in theta.radial_weights.iter().zip(&theta.control_points) {
        y += w * tps_kernel((x - c).norm());
    }
    y
}

/// Evaluate and clip to the unit RGB cube; used when correcting pixels.
pub fn tps_eval_clipped(theta: &TpsParams, x: Vector3<f64>) -> Vector3<f64> {
    let y = tps_eval(theta, x);
    Vector3::new(
        y.x.clamp(0.0, 1.0),
        y.y.clamp(0.0, 1.0),
        y.z.clamp(0.0, 1.0),
    )
}

// ---------------------------------------------------------------------------
// L2 divergence energy

/// L2 divergence between the transferred target mixture and the reference
/// mixture: |p_f|^2 - 2<p_f|p_I>. The |p_I|^2 constant is dropped.
pub fn l2_energy(theta: &TpsParams, gmm_f: &GmmModel, gmm_i: &GmmModel) -> f64 {
    let h = gmm_f.bandwidth;
    debug_assert_eq!(h, gmm_i.bandwidth, "mixtures must share a bandwidth");
    let norm = gaussian_norm_const(h);
    let denom = 4.0 * h * h;
    let pf = gmm_f.weight();
    let pi = gmm_i.weight();
    let y: Vec<Vector3<f64>> = gmm_f.means.iter().map(|m| tps_eval(theta, *m)).collect();

    let mut self_term = 0.0;
    for yk in &y {
        for yi in &y {
            self_term += norm * (-(yk - yi).norm_squared() / denom).exp();
        }
    }
    self_term *= pf * pf;

    let mut cross = 0.0;
    for yk in &y {
        for mi in &gmm_i.means {
            cross += norm * (-(yk - mi).norm_squared() / denom).exp();
        }
    }
    cross *= pf * pi;

    self_term - 2.0 * cross
}

#[inline]
fn gaussian_norm_const(h: f64) -> f64 {
    // N(0; ., 2h^2 I) at its mean offset d: (4 pi h^2)^{-3/2} exp(-|d|^2/(4h^2))
    (4.0 * std::f64::consts::PI * h * h).powf(-1.5)
}

/// Gradient of [`l2_energy`] with respect to the affine part, offset, and
/// radial weights (control points fixed).
#[derive(Debug, Clone)]
pub struct EnergyGradient {
    pub d_affine: Matrix3<f64>,
    pub d_offset: Vector3<f64>,
    pub d_radial: Vec<Vector3<f64>>,
}

pub fn l2_energy_gradient(theta: &TpsParams, gmm_f: &GmmModel, gmm_i: &GmmModel) -> EnergyGradient {
    let h = gmm_f.bandwidth;
    let norm = gaussian_norm_const(h);
    let denom = 4.0 * h * h;
    let pf = gmm_f.weight();
    let pi = gmm_i.weight();
    let y: Vec<Vector3<f64>> = gmm_f.means.iter().map(|m| tps_eval(theta, *m)).collect();

    // Gradient with respect to each transferred mean.
    let mut g = vec![Vector3::<f64>::zeros(); y.len()];
    for (k, yk) in y.iter().enumerate() {
        for (i, yi) in y.iter().enumerate() {
            if i == k {
                continue;
            }
            let d = yk - yi;
            let t = pf * pf * norm * (-d.norm_squared() / denom).exp();
            let dd = t * (-2.0 / denom) * d;
            g[k] += dd;
            g[i] -= dd;
        }
    }
    for (k, yk) in y.iter().enumerate() {
        for mi in &gmm_i.means {
            let d = yk - mi;
            let t = pf * pi * norm * (-d.norm_squared() / denom).exp();
            g[k] += -2.0 * t * (-2.0 / denom) * d;
        }
    }

    // Chain through the spline parameters.
    let mut d_affine = Matrix3::zeros();
    let mut d_offset = Vector3::zeros();
    let mut d_radial = vec![Vector3::<f64>::zeros(); theta.n_control()];
    for (m, mu) in gmm_f.means.iter().enumerate() {
        d_affine += g[m] * mu.transpose();
        d_offset += g[m];
        for (j, c) in theta.control_points.iter().enumerate() {
            d_radial[j] += g[m] * tps_kernel((mu - c).norm());
        }
    }
    EnergyGradient {
        d_affine,
        d_offset,
        d_radial,
    }
}

// ---------------------------------------------------------------------------
// Fitting

/// Projects each radial-weight column onto the TPS side conditions
/// sum_j W_j = 0 and sum_j W_j c_j^T = 0, keeping the affine part
/// identifiable.
struct SideConditionProjector {
    /// C x C projector onto the null space of [1 c]^T.
    proj: DMatrix<f64>,
}

impl SideConditionProjector {
    fn new(control_points: &[Vector3<f64>]) -> Self {
        let c = control_points.len();
        let mut p = DMatrix::zeros(c, 4);
        for (j, cp) in control_points.iter().enumerate() {
            p[(j, 0)] = 1.0;
            p[(j, 1)] = cp.x;
            p[(j, 2)] = cp.y;
            p[(j, 3)] = cp.z;
        }
        let ptp = p.transpose() * &p;
        let pinv = ptp.pseudo_inverse(1e-12).expect("pseudo inverse");
        let proj = DMatrix::identity(c, c) - &p * pinv * p.transpose();
        Self { proj }
    }

    fn apply(&self, weights: &mut [Vector3<f64>]) {
        let c = weights.len();
        for ch in 0..3 {
            let col = DMatrix::from_fn(c, 1, |j, _| weights[j][ch]);
            let out = &self.proj * col;
            for (j, w) in weights.iter_mut().enumerate() {
                w[ch] = out[(j, 0)];
            }
        }
    }
}

/// Foreground colors of an image, stride-subsampled to at most `cap`.
pub fn foreground_colors(image: &ImageRgb, mask: &Mask, cap: usize) -> Vec<Vector3<f64>> {
    let mut colors = Vec::new();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if mask.get(x, y) {
                let p = image.pixel(x, y);
                colors.push(Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64));
            }
        }
    }
    if colors.len() > cap {
        let stride = colors.len().div_ceil(cap);
        colors = colors.into_iter().step_by(stride).collect();
    }
    colors
}

/// Fit one couple's parameter set by gradient descent on the L2 energy plus
/// the smoothness term, starting from the identity spline.
pub fn fit_single_from_colors(
    target_colors: &[Vector3<f64>],
    reference_colors: &[Vector3<f64>],
    control_points: &[Vector3<f64>],
    config: &TransferConfig,
) -> (TpsParams, FitLog) {
    let gmm_f = GmmModel::new(
        kmeans_colors(target_colors, config.k, config.seed).centers,
        config.h,
    );
    let gmm_i = GmmModel::new(
        kmeans_colors(reference_colors, config.k, config.seed).centers,
        config.h,
    );
    descend(&gmm_f, &gmm_i, control_points, config)
}

pub fn fit_single_couple(
    target: (&ImageRgb, &Mask),
    reference: (&ImageRgb, &Mask),
    control_points: &[Vector3<f64>],
    config: &TransferConfig,
    couple_id: &str,
) -> Result<(TpsParams, FitLog), TransferError> {
    let t = foreground_colors(target.0, target.1, config.max_pixels);
    let r = foreground_colors(reference.0, reference.1, config.max_pixels);
    if t.is_empty() || r.is_empty() {
        return Err(TransferError::EmptyForeground(couple_id.to_string()));
    }
    Ok(fit_single_from_colors(&t, &r, control_points, config))
}

fn descend(
    gmm_f: &GmmModel,
    gmm_i: &GmmModel,
    control_points: &[Vector3<f64>],
    config: &TransferConfig,
) -> (TpsParams, FitLog) {
    let projector = SideConditionProjector::new(control_points);
    let mut theta = TpsParams::identity(control_points.to_vec());
    let total_energy = |th: &TpsParams| -> f64 {
        let reg: f64 = th
            .radial_weights
            .iter()
            .map(|w| w.norm_squared())
            .sum::<f64>();
        l2_energy(th, gmm_f, gmm_i) + config.lambda * reg
    };
    let mut energy = total_energy(&theta);
    let mut energies = vec![energy];
    let mut iterations = 0;
    for _ in 0..config.max_iters {
        iterations += 1;
        // Fresh step each iteration so one early backtrack does not cap the
        // step size for the rest of the descent.
        let mut step = config.step;
        let mut grad = l2_energy_gradient(&theta, gmm_f, gmm_i);
        for (gw, w) in grad.d_radial.iter_mut().zip(&theta.radial_weights) {
            *gw += 2.0 * config.lambda * w;
        }
        projector.apply(&mut grad.d_radial);

        // backtracking: halve the step until the energy stops increasing
        let mut accepted = false;
        while step > 1e-12 {
            let mut cand = theta.clone();
            cand.affine -= step * grad.d_affine;
            cand.offset -= step * grad.d_offset;
            for (w, gw) in cand.radial_weights.iter_mut().zip(&grad.d_radial) {
                *w -= step * gw;
            }
            projector.apply(&mut cand.radial_weights);
            let cand_energy = total_energy(&cand);
            if cand_energy <= energy {
                let delta = energy - cand_energy;
                theta = cand;
                energy = cand_energy;
                energies.push(energy);
                accepted = true;
                if delta < 1e-8 {
                    return (
                        theta,
                        FitLog {
                            energies,
                            final_energy: energy,
                            iterations,
                        },
                    );
                }
                break;
            }
            step /= 2.0;
        }
        if !accepted {
            break;
        }
    }
    (
        theta,
        FitLog {
            energies,
            final_energy: energy,
            iterations,
        },
    )
}

/// Fit every couple against one shared control-point basis (k-means over
/// the union of all target foregrounds) and average the parameter sets
/// entrywise.
pub fn fit_multi_couple(
    couples: &[((&ImageRgb, &Mask), (&ImageRgb, &Mask))],
    config: &TransferConfig,
) -> Result<MultiFit, TransferError> {
    assert!(!couples.is_empty());
    let per_couple_cap = config.max_pixels.div_ceil(couples.len()).max(1);
    let mut union = Vec::new();
    let mut couple_colors = Vec::with_capacity(couples.len());
    for (target, reference) in couples {
        let t = foreground_colors(target.0, target.1, config.max_pixels);
        let r = foreground_colors(reference.0, reference.1, config.max_pixels);
        union.extend(foreground_colors(target.0, target.1, per_couple_cap));
        couple_colors.push((t, r));
    }
    if union.is_empty() {
        return Err(TransferError::NoColors);
    }
    let control_points = kmeans_colors(&union, config.n_control, config.seed).centers;
    fit_multi_from_colors(&couple_colors, control_points, config)
}

/// Color-sample variant of [`fit_multi_couple`] with an explicit basis;
/// synthetic rigs and texture-domain fits feed this directly.
pub fn fit_multi_from_colors(
    couples: &[(Vec<Vector3<f64>>, Vec<Vector3<f64>>)],
    control_points: Vec<Vector3<f64>>,
    config: &TransferConfig,
) -> Result<MultiFit, TransferError> {
    let mut fitted = Vec::new();
    let mut logs = Vec::new();
    let mut rejected = Vec::new();
    for (idx, (t, r)) in couples.iter().enumerate() {
        if t.is_empty() || r.is_empty() {
            rejected.push(idx);
            continue;
        }
        let (theta, log) = fit_single_from_colors(t, r, &control_points, config);
        fitted.push(theta);
        logs.push(log);
    }
    if fitted.is_empty() {
        return Err(TransferError::AllCouplesRejected(couples.len()));
    }
    let n = fitted.len() as f64;
    let mut mean = TpsParams::identity(control_points);
    mean.affine = Matrix3::zeros();
    for th in &fitted {
        mean.affine += th.affine;
        mean.offset += th.offset;
        for (acc, w) in mean.radial_weights.iter_mut().zip(&th.radial_weights) {
            *acc += w;
        }
    }
    mean.affine /= n;
    mean.offset /= n;
    for w in &mut mean.radial_weights {
        *w /= n;
    }
    Ok(MultiFit {
        theta: mean,
        per_couple: logs,
        rejected,
    })
}

/// Replace every foreground pixel by the clipped spline value; background
/// pixels pass through unchanged.
pub fn apply_transfer(theta: &TpsParams, image: &ImageRgb, mask: &Mask) -> ImageRgb {
    assert!(mask.matches(image));
    ImageRgb::from_fn(image.width(), image.height(), |x, y| {
        let p = image.pixel(x, y);
        if !mask.get(x, y) {
            return p;
        }
        let out = tps_eval_clipped(theta, Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64));
        [out.x as f32, out.y as f32, out.z as f32]
    })
}

// ---------------------------------------------------------------------------
// Serialization

const TPS_MAGIC: &str = "APPTRANS-TPS 1";

/// Serialize to the versioned text format: magic line, control point count,
/// control points, affine rows, offset, weight rows; 17 significant digits
/// so the round trip is bit-exact.
pub fn tps_to_string(theta: &TpsParams) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{TPS_MAGIC}");
    let _ = writeln!(s, "C {}", theta.n_control());
    let fmt = |v: f64| format!("{v:.16e}");
    for c in &theta.control_points {
        let _ = writeln!(s, "{} {} {}", fmt(c.x), fmt(c.y), fmt(c.z));
    }
    for r in 0..3 {
        let row = theta.affine.row(r);
        let _ = writeln!(s, "{} {} {}", fmt(row[0]), fmt(row[1]), fmt(row[2]));
    }
    let _ = writeln!(
        s,
        "{} {} {}",
        fmt(theta.offset.x),
        fmt(theta.offset.y),
        fmt(theta.offset.z)
    );
    for w in &theta.radial_weights {
        let _ = writeln!(s, "{} {} {}", fmt(w.x), fmt(w.y), fmt(w.z));
    }
    s
}

pub fn save_tps(theta: &TpsParams, path: &Path) -> Result<(), TransferError> {
    std::fs::write(path, tps_to_string(theta)).map_err(|source| TransferError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn tps_from_str(text: &str, path: &str) -> Result<TpsParams, TransferError> {
    let err = |line: usize, msg: String| TransferError::Parse {
        path: path.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (ln, magic) = lines
        .next()
        .ok_or_else(|| err(1, "empty file".to_string()))?;
    if magic.trim() != TPS_MAGIC {
        return Err(err(ln + 1, format!("bad magic line {magic:?}")));
    }
    let (ln, header) = lines
        .next()
        .ok_or_else(|| err(2, "missing control point count".to_string()))?;
    let c: usize = header
        .strip_prefix("C ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| err(ln + 1, format!("bad count line {header:?}")))?;
    let mut parse_vec3 = |what: &str| -> Result<Vector3<f64>, TransferError> {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| err(0, format!("unexpected end of file reading {what}")))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| err(ln + 1, format!("{what}: {e}")))?;
        if vals.len() != 3 {
            return Err(err(ln + 1, format!("{what}: expected 3 values")));
        }
        Ok(Vector3::new(vals[0], vals[1], vals[2]))
    };
    let mut control_points = Vec::with_capacity(c);
    for _ in 0..c {
        control_points.push(parse_vec3("control point")?);
    }
    let mut affine = Matrix3::zeros();
    for r in 0..3 {
        let row = parse_vec3("affine row")?;
        affine.set_row(r, &row.transpose());
    }
    let offset = parse_vec3("offset")?;
    let mut radial_weights = Vec::with_capacity(c);
    for _ in 0..c {
        radial_weights.push(parse_vec3("weight row")?);
    }
    Ok(TpsParams {
        affine,
        offset,
        radial_weights,
        control_points,
    })
}

pub fn load_tps(path: &Path) -> Result<TpsParams, TransferError> {
    let text = std::fs::read_to_string(path).map_err(|source| TransferError::Io {
        path: path.display().to_string(),
        source,
    })?;
    tps_from_str(&text, &path.display().to_string())
}
