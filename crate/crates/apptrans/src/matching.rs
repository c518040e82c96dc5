//! Couple identification: pair each low-resolution camera view with its
//! most-similar high-resolution still by comparing partial texture maps
//! with SSIM.

use thiserror::Error;

use crate::imaging::{luma, resize_bicubic, ImageRgb};

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("image {0}x{1} is smaller than the 11x11 SSIM window")]
    TooSmall(usize, usize),
    #[error("empty input sequence: {0}")]
    EmptyInput(&'static str),
    #[error("no valid LR partial texture maps (all below coverage threshold); supply masks or non-black partials")]
    AllRowsInvalid,
}

/// UV-space raster of the subject surface visible from one camera.
#[derive(Debug, Clone)]
pub struct PartialTextureMap {
    pub image: ImageRgb,
    /// Fraction of non-black texels in [0,1].
    pub coverage: f64,
    pub source_id: String,
}

impl PartialTextureMap {
    pub fn new(image: ImageRgb, source_id: impl Into<String>) -> Self {
        let coverage = compute_coverage(&image);
        Self {
            image,
            coverage,
            source_id: source_id.into(),
        }
    }
}

/// Fraction of texels with any channel above zero.
pub fn compute_coverage(image: &ImageRgb) -> f64 {
    let n = image.width() * image.height();
    if n == 0 {
        return 0.0;
    }
    let filled = image
        .data()
        .chunks_exact(3)
        .filter(|p| p[0] > 0.0 || p[1] > 0.0 || p[2] > 0.0)
        .count();
    filled as f64 / n as f64
}

/// LR view to HR still correspondence with SSIM scores.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplePairing {
    /// (lr index, hr index, ssim score)
    pub pairs: Vec<(usize, usize, f64)>,
    /// LR indices excluded for low coverage.
    pub rejected: Vec<usize>,
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Mean local SSIM on the luma channel: 11x11 Gaussian window sigma 1.5,
/// C1 = (0.01 L)^2, C2 = (0.03 L)^2 with L = 1. Result in [-1, 1].
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64, MatchError> {
    if !a.same_size(b) {
        return Err(MatchError::DimensionMismatch(
            a.width(),
            a.height(),
            b.width(),
            b.height(),
        ));
    }
    let la: Vec<f64> = a.data().chunks_exact(3).map(|p| luma([p[0], p[1], p[2]]) as f64).collect();
    let lb: Vec<f64> = b.data().chunks_exact(3).map(|p| luma([p[0], p[1], p[2]]) as f64).collect();
    ssim_luma(&la, &lb, a.width(), a.height())
}

/// SSIM on pre-extracted single-channel rasters.
pub fn ssim_luma(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64, MatchError> {
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(MatchError::TooSmall(width, height));
    }
    assert_eq!(a.len(), width * height);
    assert_eq!(b.len(), width * height);
    let w = gaussian_window();

    // Separable Gaussian filtering of the five statistics maps, valid region only.
    let filt = |src: &dyn Fn(usize) -> f64| -> Vec<f64> {
        // horizontal pass
        let out_w = width - SSIM_WINDOW + 1;
        let mut tmp = vec![0.0f64; out_w * height];
        for y in 0..height {
            for x in 0..out_w {
                let mut acc = 0.0;
                for (k, wk) in w.iter().enumerate() {
                    acc += wk * src(y * width + x + k);
                }
                tmp[y * out_w + x] = acc;
            }
        }
        // vertical pass
        let out_h = height - SSIM_WINDOW + 1;
        let mut out = vec![0.0f64; out_w * out_h];
        for y in 0..out_h {
            for x in 0..out_w {
                let mut acc = 0.0;
                for (k, wk) in w.iter().enumerate() {
                    acc += wk * tmp[(y + k) * out_w + x];
                }
                out[y * out_w + x] = acc;
            }
        }
        out
    };

    let mu_a = filt(&|i| a[i]);
    let mu_b = filt(&|i| b[i]);
    let e_aa = filt(&|i| a[i] * a[i]);
    let e_bb = filt(&|i| b[i] * b[i]);
    let e_ab = filt(&|i| a[i] * b[i]);

    let mut sum = 0.0f64;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        sum += s;
    }
    Ok(sum / mu_a.len() as f64)
}

/// SSIM scores between every LR and HR partial texture map. Rows for LR
/// maps with coverage below the threshold are marked invalid.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    /// scores[i][j] = ssim(lr_i, hr_j)
    pub scores: Vec<Vec<f64>>,
    pub row_valid: Vec<bool>,
}

/// Compute the full LR x HR SSIM matrix. If raster sizes differ, all maps
/// are bicubic-resampled to the smallest common size first.
pub fn similarity_matrix(
    lr: &[PartialTextureMap],
    hr: &[PartialTextureMap],
    coverage_threshold: f64,
) -> Result<SimilarityMatrix, MatchError> {
    if lr.is_empty() {
        return Err(MatchError::EmptyInput("lr"));
    }
    if hr.is_empty() {
        return Err(MatchError::EmptyInput("hr"));
    }
    let min_w = lr
        .iter()
        .chain(hr)
        .map(|m| m.image.width())
        .min()
        .unwrap();
    let min_h = lr
        .iter()
        .chain(hr)
        .map(|m| m.image.height())
        .min()
        .unwrap();
    let to_luma = |m: &PartialTextureMap| -> Vec<f64> {
        let img = if m.image.width() == min_w && m.image.height() == min_h {
            m.image.clone()
        } else {
            resize_bicubic(&m.image, min_w, min_h)
        };
        img.data()
            .chunks_exact(3)
            .map(|p| luma([p[0], p[1], p[2]]) as f64)
            .collect()
    };
    let lr_luma: Vec<Vec<f64>> = lr.iter().map(to_luma).collect();
    let hr_luma: Vec<Vec<f64>> = hr.iter().map(to_luma).collect();

    let mut scores = Vec::with_capacity(lr.len());
    let mut row_valid = Vec::with_capacity(lr.len());
    for (i, li) in lr_luma.iter().enumerate() {
        let valid = lr[i].coverage >= coverage_threshold;
        let mut row = Vec::with_capacity(hr.len());
        for hj in &hr_luma {
            row.push(ssim_luma(li, hj, min_w, min_h)?);
        }
        scores.push(row);
        row_valid.push(valid);
    }
    Ok(SimilarityMatrix { scores, row_valid })
}

/// Pair each valid LR row with the argmax HR column; ties break to the
/// lowest HR index. Several LR views may map to the same HR still.
pub fn pair_couples(matrix: &SimilarityMatrix) -> Result<CouplePairing, MatchError> {
    if !matrix.row_valid.iter().any(|&v| v) {
        return Err(MatchError::AllRowsInvalid);
    }
    let mut pairs = Vec::new();
    let mut rejected = Vec::new();
    for (i, row) in matrix.scores.iter().enumerate() {
        if !matrix.row_valid[i] {
            rejected.push(i);
            continue;
        }
        let mut best_j = 0;
        let mut best = row[0];
        for (j, &s) in row.iter().enumerate().skip(1) {
            if s > best {
                best = s;
                best_j = j;
            }
        }
        pairs.push((i, best_j, best));
    }
    Ok(CouplePairing { pairs, rejected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::ImageRgb;
    use rand::{Rng, SeedableRng};

    fn random_image(seed: u64, w: usize, h: usize) -> ImageRgb {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ImageRgb::from_fn(w, h, |_, _| {
            [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()]
        })
    }

    #[test]
    fn ssim_identical_is_one() {
        let x = random_image(1, 16, 16);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = ImageRgb::filled(16, 16, [0.5, 0.5, 0.5]);
        let b = ImageRgb::filled(16, 16, [0.25, 0.25, 0.25]);
        // luminance term only; contrast/structure is exactly 1 on constants
        let expected = (2.0 * 0.5 * 0.25 + 1e-4) / (0.25 + 0.0625 + 1e-4);
        let got = ssim(&a, &b).unwrap();
        assert!((got - expected).abs() < 1e-4, "{got} vs {expected}");
        assert!((got - 0.8001).abs() < 1e-3);
    }

    #[test]
    fn ssim_symmetric() {
        for seed in 0..5 {
            let x = random_image(seed, 32, 32);
            let y = random_image(seed + 100, 32, 32);
            let fwd = ssim(&x, &y).unwrap();
            let bwd = ssim(&y, &x).unwrap();
            assert!((fwd - bwd).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_errors() {
        let x = random_image(1, 16, 16);
        let y = random_image(2, 20, 16);
        assert!(matches!(
            ssim(&x, &y),
            Err(MatchError::DimensionMismatch(..))
        ));
        let small = random_image(3, 8, 8);
        assert!(matches!(ssim(&small, &small), Err(MatchError::TooSmall(..))));
    }

    #[test]
    fn matrix_identical_pair_scores_one() {
        let x = PartialTextureMap::new(random_image(1, 16, 16), "x");
        let y = PartialTextureMap::new(random_image(2, 16, 16), "y");
        let m = similarity_matrix(&[x.clone()], &[x.clone(), y], 0.02).unwrap();
        assert!((m.scores[0][0] - 1.0).abs() < 1e-9);
        assert!(m.scores[0][1] < 1.0);
    }

    #[test]
    fn matrix_black_row_invalid() {
        let black = PartialTextureMap::new(ImageRgb::black(16, 16), "black");
        let x = PartialTextureMap::new(random_image(1, 16, 16), "x");
        let m = similarity_matrix(&[black, x.clone()], &[x], 0.02).unwrap();
        assert!(!m.row_valid[0]);
        assert!(m.row_valid[1]);
        let p = pair_couples(&m).unwrap();
        assert_eq!(p.rejected, vec![0]);
        assert_eq!(p.pairs.len(), 1);
    }

    #[test]
    fn matrix_mixed_sizes_resampled() {
        let a = PartialTextureMap::new(random_image(1, 24, 16), "a");
        let b = PartialTextureMap::new(random_image(2, 16, 20), "b");
        let m = similarity_matrix(&[a], &[b], 0.02).unwrap();
        assert_eq!(m.scores.len(), 1);
        assert!(m.scores[0][0].abs() <= 1.0);
    }

    #[test]
    fn pairing_row_argmax_and_tiebreak() {
        let m = SimilarityMatrix {
            scores: vec![vec![0.9, 0.2], vec![0.3, 0.8], vec![0.5, 0.5]],
            row_valid: vec![true, true, true],
        };
        let p = pair_couples(&m).unwrap();
        assert_eq!(p.pairs, vec![(0, 0, 0.9), (1, 1, 0.8), (2, 0, 0.5)]);
    }

    #[test]
    fn pairing_non_bijective() {
        let m = SimilarityMatrix {
            scores: vec![vec![0.1, 0.2, 0.9]; 4],
            row_valid: vec![true; 4],
        };
        let p = pair_couples(&m).unwrap();
        assert!(p.pairs.iter().all(|&(_, j, _)| j == 2));
    }

    #[test]
    fn pairing_all_invalid_is_error() {
        let m = SimilarityMatrix {
            scores: vec![vec![0.5]],
            row_valid: vec![false],
        };
        assert!(matches!(pair_couples(&m), Err(MatchError::AllRowsInvalid)));
    }

    #[test]
    fn shuffle_recovery() {
        let maps: Vec<PartialTextureMap> = (0..6)
            .map(|i| PartialTextureMap::new(random_image(i as u64, 16, 16), format!("m{i}")))
            .collect();
        let shuffle = [3usize, 0, 5, 1, 4, 2];
        let hr: Vec<PartialTextureMap> = shuffle.iter().map(|&i| maps[i].clone()).collect();
        let m = similarity_matrix(&maps, &hr, 0.02).unwrap();
        let p = pair_couples(&m).unwrap();
        for &(i, j, s) in &p.pairs {
            assert_eq!(shuffle[j], i);
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pairing_invariant_to_dominated_column() {
        let maps: Vec<PartialTextureMap> = (0..4)
            .map(|i| PartialTextureMap::new(random_image(i as u64, 16, 16), format!("m{i}")))
            .collect();
        let m = similarity_matrix(&maps, &maps, 0.02).unwrap();
        let base = pair_couples(&m).unwrap();
        // appending a strictly dominated column changes nothing
        let mut extended = m.clone();
        for row in &mut extended.scores {
            row.push(-1.0);
        }
        let ext = pair_couples(&extended).unwrap();
        assert_eq!(base, ext);
    }
}
