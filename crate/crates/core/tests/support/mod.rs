//! Reference implementations written from the textbook definitions, independent of the
//! library code they check. Shared by the integration tests and the acceptance target.
#![allow(dead_code)]

pub mod contracts;

use std::f64::consts::PI;

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
}

// ---------------------------------------------------------------------------------------
// Small deterministic generator so the oracles need nothing beyond std.

pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Self(seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut x = self.0;
        x ^= x >> 33;
        x = x.wrapping_mul(0xff51afd7ed558ccd);
        x ^ (x >> 33)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

// ---------------------------------------------------------------------------------------
// Compositing and losses, on plain nested vectors.

/// `alpha` is `h*w`, `motion` and `base` are `h*w*3` channel-last.
pub fn composite(alpha: &[f64], motion: &[f64], base: &[f64]) -> Vec<f64> {
    motion
        .iter()
        .zip(base)
        .enumerate()
        .map(|(i, (m, b))| {
            let a = alpha[i / 3];
            a * m + (1.0 - a) * b
        })
        .collect()
}

/// Mean over every frame, pixel and channel of `|target - generated| * (alpha + beta)`.
pub fn pixel_loss(generated: &[Vec<f64>], target: &[Vec<f64>], alpha: &[Vec<f64>], beta: f64) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in 0..generated.len() {
        for i in 0..generated[t].len() {
            sum += (target[t][i] - generated[t][i]).abs() * (alpha[t][i / 3] + beta);
            n += 1;
        }
    }
    sum / n as f64
}

/// `sum_t sum_i M_i ||p̂_ti - p_ti||^2 / T` with shapes as `(x, y)` pairs.
pub fn regression_loss(regressed: &[Vec<[f64; 2]>], target: &[Vec<[f64; 2]>], mask: &[f64]) -> f64 {
    let mut sum = 0.0;
    for (r, p) in regressed.iter().zip(target) {
        for i in 0..mask.len() {
            let dx = r[i][0] - p[i][0];
            let dy = r[i][1] - p[i][1];
            sum += mask[i] * (dx * dx + dy * dy);
        }
    }
    sum / regressed.len() as f64
}

/// `-log s_fake + regression + lambda * pixel`.
pub fn generator_objective(s_fake: f64, regression: f64, pixel: f64, lambda: f64) -> f64 {
    -s_fake.ln() + regression + lambda * pixel
}

/// `mean + sum_j h_j * boost_j * u_j`.
pub fn reconstruct(mean: &[f64], components: &[Vec<f64>], boost: &[f64], h: &[f64]) -> Vec<f64> {
    (0..mean.len())
        .map(|d| mean[d] + (0..h.len()).map(|j| h[j] * boost[j] * components[j][d]).sum::<f64>())
        .collect()
}

// ---------------------------------------------------------------------------------------
// Symmetric eigendecomposition by cyclic Jacobi rotations.

/// Eigenvalues in descending order with matching unit eigenvectors.
pub fn jacobi_eigen(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y][y].total_cmp(&a[x][x]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    (values, vectors)
}

/// Population covariance of row vectors.
pub fn covariance(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]) / n;
            }
        }
    }
    (mean, cov)
}

// ---------------------------------------------------------------------------------------
// Image metrics.

/// Luma in `[0, 1]` from channel-last `[-1, 1]` RGB.
pub fn luma(rgb: &[f32]) -> Vec<f64> {
    rgb.chunks(3)
        .map(|p| {
            let c = |v: f32| (v as f64 + 1.0) / 2.0;
            0.299 * c(p[0]) + 0.587 * c(p[1]) + 0.114 * c(p[2])
        })
        .collect()
}

pub fn psnr(a: &[f32], b: &[f32]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| ((*x as f64 - *y as f64) / 2.0).powi(2)).sum::<f64>() / a.len() as f64;
    10.0 * (1.0 / mse).log10()
}

/// SSIM with an explicit 11x11 Gaussian window (sigma 1.5) slid over every position that
/// fits inside the image, evaluated directly per window.
pub fn ssim(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    let x = luma(a);
    let y = luma(b);
    let size = 11;
    let mut win = vec![vec![0.0; size]; size];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for oy in 0..=h - size {
        for ox in 0..=w - size {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    let g = win[i][j] / total;
                    mx += g * x[(oy + i) * w + ox + j];
                    my += g * y[(oy + i) * w + ox + j];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    let g = win[i][j] / total;
                    let (p, q) = (x[(oy + i) * w + ox + j] - mx, y[(oy + i) * w + ox + j] - my);
                    vx += g * p * p;
                    vy += g * q * q;
                    cxy += g * p * q;
                }
            }
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

// ---------------------------------------------------------------------------------------
// MFCC: pre-emphasis, Hamming window, naive DFT, triangular mel filters, log, DCT-II.

pub struct MfccReference {
    pub sample_rate: f64,
    pub hop: usize,
    pub window: usize,
    pub filters: usize,
    pub cepstra: usize,
    pub pre_emphasis: f64,
}

impl MfccReference {
    pub fn standard(sample_rate: u32) -> Self {
        let sr = sample_rate as f64;
        Self {
            sample_rate: sr,
            hop: (0.010 * sr).round() as usize,
            window: (0.025 * sr).round() as usize,
            filters: 26,
            cepstra: 13,
            pre_emphasis: 0.97,
        }
    }

    fn mel(hz: f64) -> f64 {
        2595.0 * (1.0 + hz / 700.0).log10()
    }

    fn hz(mel: f64) -> f64 {
        700.0 * (10f64.powf(mel / 2595.0) - 1.0)
    }

    /// 28 rows of 12 coefficients for the 280 ms segment centered on frame `index`.
    pub fn chunk(&self, samples: &[f32], index: usize, fps: f64) -> Vec<Vec<f64>> {
        let at = |i: i64| if i < 0 || i >= samples.len() as i64 { 0.0 } else { samples[i as usize] as f64 };
        let mut nfft = 1;
        while nfft < self.window {
            nfft *= 2;
        }
        let top = Self::mel(self.sample_rate / 2.0);
        let edges: Vec<usize> = (0..self.filters + 2)
            .map(|i| ((nfft + 1) as f64 * Self::hz(top * i as f64 / (self.filters + 1) as f64) / self.sample_rate).floor() as usize)
            .collect();
        let center = ((index as f64 + 0.5) / fps * self.sample_rate).round() as i64;
        let start = center - (28 * self.hop / 2) as i64;
        (0..28)
            .map(|step| {
                let w0 = start + (step * self.hop + self.hop / 2) as i64 - (self.window / 2) as i64;
                let frame: Vec<f64> = (0..self.window)
                    .map(|k| {
                        let i = w0 + k as i64;
                        let ham = 0.54 - 0.46 * (2.0 * PI * k as f64 / (self.window - 1) as f64).cos();
                        (at(i) - self.pre_emphasis * at(i - 1)) * ham
                    })
                    .collect();
                let power: Vec<f64> = (0..=nfft / 2)
                    .map(|f| {
                        let (mut re, mut im) = (0.0, 0.0);
                        for (k, v) in frame.iter().enumerate() {
                            let ang = -2.0 * PI * (f * k) as f64 / nfft as f64;
                            re += v * ang.cos();
                            im += v * ang.sin();
                        }
                        (re * re + im * im) / nfft as f64
                    })
                    .collect();
                let logs: Vec<f64> = (0..self.filters)
                    .map(|m| {
                        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                        let mut e = 0.0;
                        for (f, p) in power.iter().enumerate() {
                            let wgt = if f >= l && f < c {
                                (f - l) as f64 / (c - l) as f64
                            } else if f >= c && f < r {
                                (r - f) as f64 / (r - c) as f64
                            } else {
                                0.0
                            };
                            e += wgt * p;
                        }
                        e.max(1e-10).ln()
                    })
                    .collect();
                let n = self.filters as f64;
                (1..self.cepstra)
                    .map(|k| {
                        let s: f64 = logs.iter().enumerate().map(|(i, v)| v * (PI * k as f64 * (i as f64 + 0.5) / n).cos()).sum();
                        s * (2.0 / n).sqrt()
                    })
                    .collect()
            })
            .collect()
    }
}
