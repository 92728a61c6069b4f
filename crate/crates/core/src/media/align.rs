//! Similarity alignment of a face to a canonical crop using the eye centers and nose tip.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::layout::{left_eye_center, right_eye_center, NOSE_TIP};
use super::{u8_to_unit, Frame, LandmarkSet};
use crate::{Error, Result};

/// Target positions of the key-points in the canonical crop, normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanonicalAnchors {
    pub right_eye: [f64; 2],
    pub left_eye: [f64; 2],
    pub nose_tip: [f64; 2],
}

impl Default for CanonicalAnchors {
    fn default() -> Self {
        Self { right_eye: [0.35, 0.40], left_eye: [0.65, 0.40], nose_tip: [0.50, 0.56] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub output_size: usize,
    pub anchors: CanonicalAnchors,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { output_size: 128, anchors: CanonicalAnchors::default() }
    }
}

/// `q = [[a, -b], [b, a]] p + t`, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Self { a: 1.0, b: 0.0, tx: 0.0, ty: 0.0 }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.a * p[0] - self.b * p[1] + self.tx,
            self.b * p[0] + self.a * p[1] + self.ty,
        ]
    }

    pub fn inverse(&self) -> Self {
        let det = self.a * self.a + self.b * self.b;
        let (ia, ib) = (self.a / det, -self.b / det);
        Self { a: ia, b: ib, tx: -(ia * self.tx - ib * self.ty), ty: -(ib * self.tx + ia * self.ty) }
    }

    pub fn scale(&self) -> f64 {
        (self.a * self.a + self.b * self.b).sqrt()
    }

    /// Least-squares similarity mapping `src` onto `dst` (no reflection).
    pub fn fit(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Option<Self> {
        let n = src.len() as f64;
        let mean = |pts: &[[f64; 2]]| {
            let s = pts.iter().fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
            [s[0] / n, s[1] / n]
        };
        let (ms, md) = (mean(src), mean(dst));
        let (mut num_a, mut num_b, mut den) = (0.0, 0.0, 0.0);
        for (p, q) in src.iter().zip(dst) {
            let (px, py) = (p[0] - ms[0], p[1] - ms[1]);
            let (qx, qy) = (q[0] - md[0], q[1] - md[1]);
            num_a += px * qx + py * qy;
            num_b += px * qy - py * qx;
            den += px * px + py * py;
        }
        if den <= 1e-12 {
            return None;
        }
        let (a, b) = (num_a / den, num_b / den);
        Some(Self {
            a,
            b,
            tx: md[0] - (a * ms[0] - b * ms[1]),
            ty: md[1] - (b * ms[0] + a * ms[1]),
        })
    }
}

fn key_points(landmarks: &LandmarkSet) -> [[f64; 2]; 3] {
    let r = right_eye_center(landmarks);
    let l = left_eye_center(landmarks);
    let n = landmarks.points[NOSE_TIP];
    [
        [r[0] as f64, r[1] as f64],
        [l[0] as f64, l[1] as f64],
        [n[0] as f64, n[1] as f64],
    ]
}

/// Transform from raw-image pixel coordinates to canonical-crop pixel coordinates.
pub fn alignment_transform(
    width: usize,
    height: usize,
    landmarks: &LandmarkSet,
    config: &AlignConfig,
    sample_id: &str,
) -> Result<Similarity> {
    let keys = key_points(landmarks);
    let src: Vec<[f64; 2]> = keys.iter().map(|p| [p[0] * width as f64, p[1] * height as f64]).collect();
    let eye_dx = src[1][0] - src[0][0];
    let eye_dy = src[1][1] - src[0][1];
    let eye_dist2 = eye_dx * eye_dx + eye_dy * eye_dy;
    if eye_dist2 < 1e-6 {
        return Err(Error::sample(sample_id, "degenerate key-points: eye centers coincide"));
    }
    let cross = eye_dx * (src[2][1] - src[0][1]) - eye_dy * (src[2][0] - src[0][0]);
    if cross.abs() < 1e-3 * eye_dist2 {
        return Err(Error::sample(sample_id, "degenerate key-points: eyes and nose are collinear"));
    }
    let s = config.output_size as f64;
    let a = &config.anchors;
    let dst = [
        [a.right_eye[0] * s, a.right_eye[1] * s],
        [a.left_eye[0] * s, a.left_eye[1] * s],
        [a.nose_tip[0] * s, a.nose_tip[1] * s],
    ];
    Similarity::fit(&src, &dst)
        .ok_or_else(|| Error::sample(sample_id, "degenerate key-points: no spread"))
}

/// Bilinear sample at continuous pixel coordinates (pixel `i` is centered at `i + 0.5`),
/// replicating the border.
pub fn sample_bilinear(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (fx, fy) = (x - 0.5, y - 0.5);
    let (x0, y0) = (fx.floor(), fy.floor());
    let (wx, wy) = (fx - x0, fy - y0);
    let px = |xi: i64, yi: i64| {
        let p = img.get_pixel(xi.clamp(0, w - 1) as u32, yi.clamp(0, h - 1) as u32);
        [p[0] as f64, p[1] as f64, p[2] as f64]
    };
    let (x0, y0) = (x0 as i64, y0 as i64);
    let (p00, p10, p01, p11) = (px(x0, y0), px(x0 + 1, y0), px(x0, y0 + 1), px(x0 + 1, y0 + 1));
    let mut out = [0.0; 3];
    for c in 0..3 {
        let top = p00[c] * (1.0 - wx) + p10[c] * wx;
        let bottom = p01[c] * (1.0 - wx) + p11[c] * wx;
        out[c] = top * (1.0 - wy) + bottom * wy;
    }
    out
}

/// Warps `image` into the canonical crop and maps the landmarks with the same transform.
pub fn align_face(
    image: &RgbImage,
    landmarks: &LandmarkSet,
    config: &AlignConfig,
    sample_id: &str,
) -> Result<(Frame, LandmarkSet)> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let forward = alignment_transform(w, h, landmarks, config, sample_id)?;
    let inverse = forward.inverse();
    let s = config.output_size;
    let mut data = Vec::with_capacity(s * s * 3);
    for y in 0..s {
        for x in 0..s {
            let src = inverse.apply([x as f64 + 0.5, y as f64 + 0.5]);
            let rgb = sample_bilinear(image, src[0], src[1]);
            data.extend(rgb.iter().map(|&v| (v / 127.5 - 1.0).clamp(-1.0, 1.0) as f32));
        }
    }
    let mut points = landmarks.points;
    for p in points.iter_mut() {
        let q = forward.apply([p[0] as f64 * w as f64, p[1] as f64 * h as f64]);
        *p = [
            ((q[0] / s as f64) as f32).clamp(0.0, 1.0),
            ((q[1] / s as f64) as f32).clamp(0.0, 1.0),
        ];
    }
    Ok((Frame::new(s, s, data)?, LandmarkSet::new(points)))
}

/// Inverse-maps a raw image through an arbitrary similarity; used to build test inputs.
pub fn warp_image(image: &RgbImage, forward: &Similarity, out_w: u32, out_h: u32) -> RgbImage {
    let inverse = forward.inverse();
    RgbImage::from_fn(out_w, out_h, |x, y| {
        let src = inverse.apply([x as f64 + 0.5, y as f64 + 0.5]);
        let rgb = sample_bilinear(image, src[0], src[1]);
        image::Rgb([rgb[0].round() as u8, rgb[1].round() as u8, rgb[2].round() as u8])
    })
}

pub fn frame_from_image(image: &RgbImage) -> Frame {
    let data = image.as_raw().iter().map(|&v| u8_to_unit(v)).collect();
    Frame::new(image.height() as usize, image.width() as usize, data).expect("u8 values map into range")
}
