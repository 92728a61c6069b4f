//! Index ranges of the 68-point facial landmark layout (zero based).

use std::ops::Range;

use super::LandmarkSet;

pub const JAW: Range<usize> = 0..17;
pub const RIGHT_BROW: Range<usize> = 17..22;
pub const LEFT_BROW: Range<usize> = 22..27;
pub const NOSE_BRIDGE: Range<usize> = 27..31;
pub const NOSTRILS: Range<usize> = 31..36;
/// Subject's right eye, drawn on the left of the image.
pub const RIGHT_EYE: Range<usize> = 36..42;
pub const LEFT_EYE: Range<usize> = 42..48;
pub const OUTER_LIP: Range<usize> = 48..60;
pub const INNER_LIP: Range<usize> = 60..68;
pub const MOUTH: Range<usize> = 48..68;
pub const NOSE_TIP: usize = 30;

/// Upper/lower inner-lip point pairs facing each other across the mouth opening.
pub const INNER_LIP_PAIRS: [(usize, usize); 3] = [(61, 67), (62, 66), (63, 65)];

pub fn mouth_indices() -> Vec<usize> {
    MOUTH.collect()
}

pub fn right_eye_center(shape: &LandmarkSet) -> [f32; 2] {
    shape.centroid(&RIGHT_EYE.collect::<Vec<_>>())
}

pub fn left_eye_center(shape: &LandmarkSet) -> [f32; 2] {
    shape.centroid(&LEFT_EYE.collect::<Vec<_>>())
}

/// Vertical gap between facing inner-lip points, averaged over the three pairs.
pub fn mouth_aperture(shape: &LandmarkSet) -> f32 {
    let sum: f32 = INNER_LIP_PAIRS
        .iter()
        .map(|&(top, bottom)| shape.points[bottom][1] - shape.points[top][1])
        .sum();
    sum / INNER_LIP_PAIRS.len() as f32
}
