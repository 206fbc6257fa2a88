//! sRGB <-> CIELAB conversion under the D65 illuminant.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

// The white point is the image of sRGB white, so (1, 1, 1) lands on a = b = 0.
fn white() -> [f64; 3] {
    RGB_TO_XYZ.map(|row| row.iter().sum())
}

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn f_inv(t: f64) -> f64 {
    let t3 = t * t * t;
    if t3 > EPSILON {
        t3
    } else {
        (116.0 * t - 16.0) / KAPPA
    }
}

fn mat(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    m.map(|row| row[0] * v[0] + row[1] * v[1] + row[2] * v[2])
}

/// One sRGB triple in `[0, 1]` to `(L, a, b)`.
pub fn srgb_to_lab_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let xyz = mat(&RGB_TO_XYZ, rgb.map(srgb_to_linear));
    let wp = white();
    let [fx, fy, fz] = [f(xyz[0] / wp[0]), f(xyz[1] / wp[1]), f(xyz[2] / wp[2])];
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Inverse of [`srgb_to_lab_pixel`], clamped to `[0, 1]`.
pub fn lab_to_srgb_pixel(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let wp = white();
    let xyz = [f_inv(fx) * wp[0], f_inv(fy) * wp[1], f_inv(fz) * wp[2]];
    mat(&XYZ_TO_RGB, xyz).map(|c| linear_to_srgb(c.clamp(0.0, 1.0)).clamp(0.0, 1.0))
}

/// CIELAB image `[H, W, 3]` plus the number of input values that had to be
/// clamped into `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabImage<T> {
    pub values: Tensor<T>,
    pub clamped: usize,
}

pub fn rgb_to_lab<T: Scalar>(image: &Tensor<T>) -> Result<LabImage<T>> {
    let (_, _, c) = image.dims3()?;
    if c != 3 {
        return shape_err(format!("expected 3 color channels, got {c}"));
    }
    let mut clamped = 0;
    let mut out = Vec::with_capacity(image.len());
    for px in image.data().chunks_exact(3) {
        let rgb = [0, 1, 2].map(|i| {
            let v = px[i].to_f64().unwrap_or(0.0);
            if !(0.0..=1.0).contains(&v) {
                clamped += 1;
            }
            if v.is_nan() {
                0.0
            } else {
                v.clamp(0.0, 1.0)
            }
        });
        out.extend(srgb_to_lab_pixel(rgb).map(T::of));
    }
    Ok(LabImage { values: Tensor::new(image.shape(), out)?, clamped })
}

pub fn lab_to_rgb<T: Scalar>(lab: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, c) = lab.dims3()?;
    if c != 3 {
        return shape_err(format!("expected 3 Lab channels, got {c}"));
    }
    let mut out = Vec::with_capacity(lab.len());
    for px in lab.data().chunks_exact(3) {
        let v = [0, 1, 2].map(|i| px[i].to_f64().unwrap_or(0.0));
        out.extend(lab_to_srgb_pixel(v).map(T::of));
    }
    Tensor::new(lab.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn reference_colors() {
        assert!(close(srgb_to_lab_pixel([1.0; 3]), [100.0, 0.0, 0.0], 0.01));
        assert!(close(srgb_to_lab_pixel([0.0; 3]), [0.0, 0.0, 0.0], 1e-9));
        assert!(close(srgb_to_lab_pixel([0.5; 3]), [53.39, 0.0, 0.0], 0.01));
    }

    #[test]
    fn gray_oracle() {
        // L* from relative luminance computed from the published transfer curve
        for v in [0.02, 0.2, 0.5, 0.8] {
            let y: f64 = if v <= 0.04045 { v / 12.92 } else { ((v + 0.055) / 1.055f64).powf(2.4) };
            let l = if y > 0.008856 { 116.0 * y.cbrt() - 16.0 } else { 903.3 * y };
            assert!((srgb_to_lab_pixel([v; 3])[0] - l).abs() < 0.01);
        }
    }

    #[test]
    fn red_is_saturated_positive_a() {
        let lab = srgb_to_lab_pixel([1.0, 0.0, 0.0]);
        assert!((lab[0] - 53.24).abs() < 0.05 && (lab[1] - 80.09).abs() < 0.1 && (lab[2] - 67.20).abs() < 0.1);
    }

    #[test]
    fn eight_bit_round_trip() {
        for r in (0..256).step_by(15) {
            for g in (0..256).step_by(17) {
                for b in (0..256).step_by(51) {
                    let rgb = [r, g, b].map(|v| v as f64 / 255.0);
                    let back = lab_to_srgb_pixel(srgb_to_lab_pixel(rgb));
                    for i in 0..3 {
                        assert!(((back[i] * 255.0).round() - (rgb[i] * 255.0)).abs() <= 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_range_values_are_counted() {
        let img = Tensor::<f32>::new(&[1, 2, 3], vec![1.5, 0.5, -0.2, 0.1, 0.2, 0.3]).unwrap();
        let lab = rgb_to_lab(&img).unwrap();
        assert_eq!(lab.clamped, 2);
        assert!(lab.values.all_finite());
        let back = lab_to_rgb(&lab.values).unwrap();
        assert!((back.at(&[0, 1, 2]) - 0.3).abs() < 1e-3);
    }
}
