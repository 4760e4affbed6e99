//! sRGB (D65) to CIE-Lab conversion in f64.

/// A CIE-Lab colour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabColor {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

// sRGB -> XYZ (D65) matrix rows.
const XR: [f64; 3] = [0.4124564390896921, 0.357576077643909, 0.18043748326639894];
const YR: [f64; 3] = [0.21267285140562248, 0.715152155287818, 0.07217499330655958];
const ZR: [f64; 3] = [0.019333895582329317, 0.119192025881303, 0.9503040785363677];

// Reference white as the exact row sums, so the gray axis maps to zero chroma.
const XN: f64 = XR[0] + XR[1] + XR[2];
const YN: f64 = YR[0] + YR[1] + YR[2];
const ZN: f64 = ZR[0] + ZR[1] + ZR[2];

#[inline]
fn srgb_to_linear(c: u8) -> f64 {
    let c = c as f64 / 255.0;
    if c > 0.04045 {
        ((c + 0.055) / 1.055).powf(2.4)
    } else {
        c / 12.92
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

/// Convert an 8-bit sRGB pixel to Lab.
pub fn rgb_to_lab(rgb: [u8; 3]) -> LabColor {
    let r = srgb_to_linear(rgb[0]);
    let g = srgb_to_linear(rgb[1]);
    let b = srgb_to_linear(rgb[2]);

    let x = r * XR[0] + g * XR[1] + b * XR[2];
    let y = r * YR[0] + g * YR[1] + b * YR[2];
    let z = r * ZR[0] + g * ZR[1] + b * ZR[2];

    let fx = lab_f(x / XN);
    let fy = lab_f(y / YN);
    let fz = lab_f(z / ZN);

    LabColor {
        l: 116.0 * fy - 16.0,
        a: 500.0 * (fx - fy),
        b: 200.0 * (fy - fz),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn white_and_black_anchor_points() {
        let white = rgb_to_lab([255, 255, 255]);
        assert_relative_eq!(white.l, 100.0, epsilon = 1e-3);
        assert!(white.a.abs() < 1e-2 && white.b.abs() < 1e-2);
        let black = rgb_to_lab([0, 0, 0]);
        assert_relative_eq!(black.l, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn gray_axis_has_no_chroma() {
        for v in [10u8, 64, 128, 200] {
            let lab = rgb_to_lab([v, v, v]);
            assert!(lab.a.abs() < 1e-6, "a* = {}", lab.a);
            assert!(lab.b.abs() < 1e-6, "b* = {}", lab.b);
        }
    }

    #[test]
    fn reference_red() {
        // Standard sRGB red in Lab, checked against published tables.
        let lab = rgb_to_lab([255, 0, 0]);
        assert_relative_eq!(lab.l, 53.24, epsilon = 0.05);
        assert_relative_eq!(lab.a, 80.09, epsilon = 0.1);
        assert_relative_eq!(lab.b, 67.20, epsilon = 0.1);
    }
}
