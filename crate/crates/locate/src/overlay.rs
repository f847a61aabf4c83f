//! Heatmap colouring and blending for visual inspection.

use locate_core::{Image, Map2};

/// Viridis sampled at nine evenly spaced points.
const VIRIDIS: [[f64; 3]; 9] = [
    [0.267004, 0.004874, 0.329415],
    [0.282623, 0.140926, 0.457517],
    [0.253935, 0.265254, 0.529983],
    [0.206756, 0.371758, 0.553117],
    [0.163625, 0.471133, 0.558148],
    [0.127568, 0.566949, 0.550556],
    [0.134692, 0.658636, 0.517649],
    [0.266941, 0.748751, 0.440573],
    [0.993248, 0.906157, 0.143936],
];

pub const OVERLAY_ALPHA: f64 = 0.5;

/// Piecewise-linear viridis; input is clamped to `[0, 1]`.
pub fn colormap(value: f64) -> [f64; 3] {
    let v = if value.is_nan() { 0.0 } else { value.clamp(0.0, 1.0) };
    let pos = v * (VIRIDIS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(VIRIDIS.len() - 2);
    let f = pos - i as f64;
    std::array::from_fn(|c| VIRIDIS[i][c] * (1.0 - f) + VIRIDIS[i + 1][c] * f)
}

/// `(1 - alpha) * image + alpha * colormap(heatmap)`, pixelwise.
pub fn blend(image: &Image, heatmap: &Map2, alpha: f64) -> Image {
    assert_eq!((image.height(), image.width()), heatmap.shape(), "overlay needs matching sizes");
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            let base = image.pixel(y, x);
            let hue = colormap(heatmap.get(y, x));
            out.set_pixel(y, x, std::array::from_fn(|c| (1.0 - alpha) * base[c] + alpha * hue[c]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_clamping() {
        assert_eq!(colormap(0.0), VIRIDIS[0]);
        assert_eq!(colormap(1.0), VIRIDIS[8]);
        assert_eq!(colormap(-3.0), VIRIDIS[0]);
        assert_eq!(colormap(7.0), VIRIDIS[8]);
    }

    #[test]
    fn blend_is_midpoint_at_half_alpha() {
        let image = Image::zeros(1, 1);
        let out = blend(&image, &Map2::filled(1, 1, 1.0), OVERLAY_ALPHA);
        let expected = VIRIDIS[8].map(|c| c * 0.5);
        assert_eq!(out.pixel(0, 0), expected);
    }
}
