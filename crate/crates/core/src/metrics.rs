//! Frame and landmark quality metrics.

use serde::{Deserialize, Serialize};

use crate::media::{layout, Frame, LandmarkSet};
use crate::{Error, Result};

/// PSNR of two `[-1, 1]` frames after mapping to `[0, 1]` (peak 1).
/// Identical frames give `f64::INFINITY`.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!("psnr on {}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width())));
    }
    let n = a.as_slice().len() as f64;
    let mse = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| ((*x as f64 - *y as f64) / 2.0).powi(2))
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Rec. 601 luma of a frame mapped to `[0, 1]`, row-major.
pub fn luminance(frame: &Frame) -> Vec<f64> {
    frame
        .as_slice()
        .chunks_exact(3)
        .map(|p| {
            let [r, g, b] = [p[0], p[1], p[2]].map(|v| (v as f64 + 1.0) / 2.0);
            0.299 * r + 0.587 * g + 0.114 * b
        })
        .collect()
}

/// Valid-region separable filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over the valid region of the luma planes, 11x11 Gaussian window.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!("ssim on {}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width())));
    }
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let x = luminance(a);
    let y = luminance(b);
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mu_x = filter_valid(&x, h, w, &taps);
    let mu_y = filter_valid(&y, h, w, &taps);
    let xx = filter_valid(&prod(&x, &x), h, w, &taps);
    let yy = filter_valid(&prod(&y, &y), h, w, &taps);
    let xy = filter_valid(&prod(&x, &y), h, w, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cxy = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmdOptions {
    /// Point indices compared.
    pub region: Vec<usize>,
    /// Side of the frame the normalized coordinates are scaled to.
    pub frame_size: f64,
    /// Subtract each frame's region centroid before measuring.
    pub align_centroid: bool,
}

impl Default for LmdOptions {
    fn default() -> Self {
        Self { region: layout::mouth_indices(), frame_size: 128.0, align_centroid: true }
    }
}

/// Mean point distance in pixels over frames and region points.
pub fn lmd(predicted: &[LandmarkSet], reference: &[LandmarkSet], options: &LmdOptions) -> Result<f64> {
    if predicted.len() != reference.len() {
        return Err(Error::Shape(format!("lmd on {} vs {} frames", predicted.len(), reference.len())));
    }
    if options.region.is_empty() {
        return Err(Error::Config("lmd region is empty".into()));
    }
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let s = options.frame_size;
    let centroid = |shape: &LandmarkSet| -> [f64; 2] {
        let n = options.region.len() as f64;
        let mut c = [0.0; 2];
        for &i in &options.region {
            c[0] += shape.points[i][0] as f64 * s / n;
            c[1] += shape.points[i][1] as f64 * s / n;
        }
        c
    };
    let mut total = 0.0;
    for (p, r) in predicted.iter().zip(reference) {
        let (cp, cr) = if options.align_centroid { (centroid(p), centroid(r)) } else { ([0.0; 2], [0.0; 2]) };
        for &i in &options.region {
            let dx = (p.points[i][0] as f64 * s - cp[0]) - (r.points[i][0] as f64 * s - cr[0]);
            let dy = (p.points[i][1] as f64 * s - cp[1]) - (r.points[i][1] as f64 * s - cr[1]);
            total += (dx * dx + dy * dy).sqrt();
        }
    }
    Ok(total / (predicted.len() * options.region.len()) as f64)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return 0.0;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (xs[i] - mx, ys[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Ranks starting at 1, ties share their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    pearson(&ranks(xs), &ranks(ys))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LandmarkSource {
    GtLandmarks,
    PredictedLandmarks,
}

impl LandmarkSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::GtLandmarks => "gt-landmarks",
            Self::PredictedLandmarks => "predicted-landmarks",
        }
    }
}

/// Metrics of one evaluated sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub id: String,
    /// Mean over frames with finite PSNR; `None` when every frame was identical.
    pub psnr: Option<f64>,
    pub infinite_psnr_frames: usize,
    pub ssim: f64,
    pub lmd: f64,
}

/// Scores one generated sequence against its reference.
pub fn sequence_metrics(
    id: &str,
    generated: &[Frame],
    reference: &[Frame],
    generated_landmarks: &[LandmarkSet],
    reference_landmarks: &[LandmarkSet],
    lmd_options: &LmdOptions,
) -> Result<SequenceMetrics> {
    if generated.len() != reference.len() || generated.is_empty() {
        return Err(Error::Shape(format!("{id}: {} generated vs {} reference frames", generated.len(), reference.len())));
    }
    let mut finite = Vec::new();
    let mut infinite = 0;
    let mut ssim_sum = 0.0;
    for (g, r) in generated.iter().zip(reference) {
        let p = psnr(g, r)?;
        if p.is_finite() {
            finite.push(p);
        } else {
            infinite += 1;
        }
        ssim_sum += ssim(g, r)?;
    }
    Ok(SequenceMetrics {
        id: id.to_string(),
        psnr: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
        infinite_psnr_frames: infinite,
        ssim: ssim_sum / generated.len() as f64,
        lmd: lmd(generated_landmarks, reference_landmarks, lmd_options)?,
    })
}

/// Summary written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    pub lmd: f64,
    pub n_sequences: usize,
    pub mode: LandmarkSource,
}

/// Means over sequences; sequences without a finite PSNR are left out of the PSNR mean.
pub fn summarize(rows: &[SequenceMetrics], mode: LandmarkSource) -> EvalReport {
    let n = rows.len();
    let finite: Vec<f64> = rows.iter().filter_map(|r| r.psnr).collect();
    let mean = |v: &mut dyn Iterator<Item = f64>| -> f64 {
        if n == 0 {
            0.0
        } else {
            v.sum::<f64>() / n as f64
        }
    };
    EvalReport {
        psnr: if finite.is_empty() { f64::INFINITY } else { finite.iter().sum::<f64>() / finite.len() as f64 },
        ssim: mean(&mut rows.iter().map(|r| r.ssim)),
        lmd: mean(&mut rows.iter().map(|r| r.lmd)),
        n_sequences: n,
        mode,
    }
}

/// CSV with one line per sequence.
pub fn rows_to_csv(rows: &[SequenceMetrics]) -> String {
    let mut out = String::from("id,psnr,infinite_psnr_frames,ssim,lmd\n");
    for r in rows {
        let p = r.psnr.map(|v| format!("{v:.6}")).unwrap_or_else(|| "inf".into());
        out.push_str(&format!("{},{},{},{:.6},{:.6}\n", r.id, p, r.infinite_psnr_frames, r.ssim, r.lmd));
    }
    out
}
