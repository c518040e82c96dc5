//! Quantitative evaluation: PSNR, RMSE, SAM, SRE on image pairs and
//! Jensen-Shannon / chi-squared distances on normalized color histograms.
//! SSIM lives in [`crate::matching`] and is re-exported here.

use thiserror::Error;

pub use crate::matching::ssim;

use crate::imaging::{color_histogram, rgb_to_y, Histogram, ImageRgb, Mask};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("bin count mismatch: {0} vs {1}")]
    BinMismatch(usize, usize),
    #[error("histogram is not normalized (channel {channel} sums to {sum})")]
    Unnormalized { channel: usize, sum: f64 },
    #[error("undefined: {0}")]
    Undefined(&'static str),
    #[error(transparent)]
    Image(#[from] crate::imaging::ImageError),
    #[error("no couples to evaluate")]
    Empty,
}

fn check_dims(a: &ImageRgb, b: &ImageRgb) -> Result<(), MetricError> {
    if !a.same_size(b) {
        return Err(MetricError::DimensionMismatch(
            a.width(),
            a.height(),
            b.width(),
            b.height(),
        ));
    }
    Ok(())
}

/// PSNR on the BT.601 Y channel with peak 1, in dB. Identical images
/// return `f64::INFINITY`.
pub fn psnr_y(a: &ImageRgb, b: &ImageRgb) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    let ya = rgb_to_y(a);
    let yb = rgb_to_y(b);
    let mse: f64 = ya
        .iter()
        .zip(&yb)
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum::<f64>()
        / ya.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Root mean square error over all RGB channel values.
pub fn rmse(a: &ImageRgb, b: &ImageRgb) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    Ok(mse.sqrt())
}

/// Spectral angle mapper: mean per-pixel angle between RGB vectors, in
/// radians. Pixels where either vector is zero are skipped.
pub fn sam(a: &ImageRgb, b: &ImageRgb) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (pa, pb) in a.data().chunks_exact(3).zip(b.data().chunks_exact(3)) {
        let na = (pa[0] as f64).hypot(pa[1] as f64).hypot(pa[2] as f64);
        let nb = (pb[0] as f64).hypot(pb[1] as f64).hypot(pb[2] as f64);
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        let dot = pa[0] as f64 * pb[0] as f64
            + pa[1] as f64 * pb[1] as f64
            + pa[2] as f64 * pb[2] as f64;
        sum += (dot / (na * nb)).clamp(-1.0, 1.0).acos();
        n += 1;
    }
    if n == 0 {
        return Err(MetricError::Undefined(
            "sam: no pixel where both vectors are nonzero",
        ));
    }
    Ok(sum / n as f64)
}

/// Signal-to-reconstruction-error ratio in dB: 10 log10(mean(a)^2 / MSE)
/// per channel, averaged. Identical images return `f64::INFINITY`.
pub fn sre(reference: &ImageRgb, estimate: &ImageRgb) -> Result<f64, MetricError> {
    check_dims(reference, estimate)?;
    let n = (reference.width() * reference.height()) as f64;
    let mut ratios = [0.0f64; 3];
    let mut any_infinite = false;
    for c in 0..3 {
        let mut mean = 0.0f64;
        let mut mse = 0.0f64;
        for (pa, pb) in reference
            .data()
            .chunks_exact(3)
            .zip(estimate.data().chunks_exact(3))
        {
            mean += pa[c] as f64;
            let d = pa[c] as f64 - pb[c] as f64;
            mse += d * d;
        }
        mean /= n;
        mse /= n;
        if mean == 0.0 {
            return Err(MetricError::Undefined("sre: zero-mean reference channel"));
        }
        if mse == 0.0 {
            any_infinite = true;
        } else {
            ratios[c] = 10.0 * (mean * mean / mse).log10();
        }
    }
    if any_infinite {
        return Ok(f64::INFINITY);
    }
    Ok((ratios[0] + ratios[1] + ratios[2]) / 3.0)
}

fn check_histograms(h: &Histogram, hp: &Histogram, require_norm: bool) -> Result<(), MetricError> {
    if h.n_bins() != hp.n_bins() {
        return Err(MetricError::BinMismatch(h.n_bins(), hp.n_bins()));
    }
    if require_norm {
        for hist in [h, hp] {
            if hist.is_degenerate() {
                continue;
            }
            for c in 0..3 {
                let sum: f64 = hist.channel(c).iter().sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(MetricError::Unnormalized { channel: c, sum });
                }
            }
        }
    }
    Ok(())
}

/// Jensen-Shannon divergence per channel, averaged. Uses the summation
/// form sum H ln(2H/(H+H')) + H' ln(2H'/(H+H')) with natural log and the
/// convention 0 ln(0/x) = 0.
pub fn js_divergence(h: &Histogram, hp: &Histogram) -> Result<f64, MetricError> {
    check_histograms(h, hp, true)?;
    let mut total = 0.0f64;
    for c in 0..3 {
        let mut acc = 0.0f64;
        for (&a, &b) in h.channel(c).iter().zip(hp.channel(c)) {
            if a > 0.0 {
                acc += a * (2.0 * a / (a + b)).ln();
            }
            if b > 0.0 {
                acc += b * (2.0 * b / (a + b)).ln();
            }
        }
        total += acc;
    }
    Ok(total / 3.0)
}

/// Chi-squared distance per channel, averaged: sum 2(H - H')^2 / (H + H')
/// with 0/0 = 0.
pub fn chi_squared(h: &Histogram, hp: &Histogram) -> Result<f64, MetricError> {
    check_histograms(h, hp, false)?;
    let mut total = 0.0f64;
    for c in 0..3 {
        let mut acc = 0.0f64;
        for (&a, &b) in h.channel(c).iter().zip(hp.channel(c)) {
            let s = a + b;
            if s > 0.0 {
                let d = a - b;
                acc += 2.0 * d * d / s;
            }
        }
        total += acc;
    }
    Ok(total / 3.0)
}

/// One evaluated pair in a [`MetricReport`].
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub item: String,
    pub values: Vec<f64>,
}

/// Named per-pair metric values with aggregate means.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub metric_names: Vec<String>,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn new(metric_names: Vec<String>) -> Self {
        Self {
            metric_names,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, item: impl Into<String>, values: Vec<f64>) {
        assert_eq!(values.len(), self.metric_names.len());
        self.rows.push(MetricRow {
            item: item.into(),
            values,
        });
    }

    /// Arithmetic mean of each metric over the rows. Infinite entries
    /// propagate to an infinite aggregate.
    pub fn aggregates(&self) -> Vec<f64> {
        let n = self.rows.len() as f64;
        (0..self.metric_names.len())
            .map(|c| self.rows.iter().map(|r| r.values[c]).sum::<f64>() / n)
            .collect()
    }

    fn render_value(v: f64) -> String {
        if v.is_infinite() {
            "identical".to_string()
        } else {
            format!("{v:.6}")
        }
    }

    /// CSV: header row, one row per pair, aggregate footer.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("item");
        for name in &self.metric_names {
            s.push(',');
            s.push_str(name);
        }
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.item);
            for v in &row.values {
                s.push(',');
                s.push_str(&Self::render_value(*v));
            }
            s.push('\n');
        }
        s.push_str("aggregate");
        for v in self.aggregates() {
            s.push(',');
            s.push_str(&Self::render_value(v));
        }
        s.push('\n');
        s
    }

    /// Human-readable aligned table.
    pub fn to_table(&self) -> String {
        let mut widths: Vec<usize> = self.metric_names.iter().map(|n| n.len().max(10)).collect();
        let item_w = self
            .rows
            .iter()
            .map(|r| r.item.len())
            .chain(["aggregate".len()])
            .max()
            .unwrap_or(9);
        let mut s = format!("{:<item_w$}", "item");
        for (name, w) in self.metric_names.iter().zip(&mut widths) {
            s.push_str(&format!("  {name:>w$}"));
        }
        s.push('\n');
        let line = |item: &str, values: &[f64]| {
            let mut row = format!("{item:<item_w$}");
            for (v, w) in values.iter().zip(&widths) {
                row.push_str(&format!("  {:>w$}", Self::render_value(*v)));
            }
            row.push('\n');
            row
        };
        for row in &self.rows {
            s.push_str(&line(&row.item, &row.values));
        }
        s.push_str(&line("aggregate", &self.aggregates()));
        s
    }
}

/// JS / chi-squared report over corrected-frame vs reference couples,
/// computed on 64-bin foreground histograms.
pub fn evaluate_correction(
    corrected: &[(String, &ImageRgb, &Mask)],
    references: &[(&ImageRgb, &Mask)],
) -> Result<MetricReport, MetricError> {
    if corrected.is_empty() || corrected.len() != references.len() {
        return Err(MetricError::Empty);
    }
    let mut report = MetricReport::new(vec!["js".to_string(), "chi2".to_string()]);
    for ((item, img, mask), (rimg, rmask)) in corrected.iter().zip(references) {
        if mask.count_foreground() == 0 || rmask.count_foreground() == 0 {
            return Err(MetricError::Undefined("empty foreground in couple"));
        }
        let h = color_histogram(img, mask, 64)?;
        let hp = color_histogram(rimg, rmask, 64)?;
        let js = js_divergence(&h, &hp)?;
        let chi = chi_squared(&h, &hp)?;
        report.push(item.clone(), vec![js, chi]);
    }
    Ok(report)
}
