//! Annotation-driven ROI cropping and bilinear resampling.

use super::{Annotation, DataError, GrayImage, RoiSample};
use crate::tensor::Tensor;

/// Cuts the square window of side `2 * radius` centered on the annotation,
/// zero-padding whatever falls outside the image, and resamples it to
/// `out_resolution` with bilinear interpolation.
pub fn extract_roi(
    image: &GrayImage,
    annotation: &Annotation,
    out_resolution: usize,
) -> Result<RoiSample, DataError> {
    if annotation.radius <= 0 {
        return Err(DataError::InvalidAnnotation(format!(
            "radius must be positive, got {} (image {})",
            annotation.radius, annotation.image
        )));
    }
    let (cx, cy) = (annotation.cx, annotation.cy);
    if cx < 0 || cy < 0 || cx >= image.width as i64 || cy >= image.height as i64 {
        return Err(DataError::InvalidAnnotation(format!(
            "center ({cx},{cy}) outside {}x{} image {}",
            image.width, image.height, annotation.image
        )));
    }
    if out_resolution == 0 {
        return Err(DataError::InvalidAnnotation(
            "output resolution must be positive".into(),
        ));
    }

    let side = (2 * annotation.radius) as usize;
    let x0 = cx - annotation.radius;
    let y0 = cy - annotation.radius;
    let mut crop = vec![0.0; side * side];
    for row in 0..side {
        let sy = y0 + row as i64;
        if sy < 0 || sy >= image.height as i64 {
            continue;
        }
        for col in 0..side {
            let sx = x0 + col as i64;
            if sx < 0 || sx >= image.width as i64 {
                continue;
            }
            crop[row * side + col] = image.pixels[sy as usize * image.width + sx as usize];
        }
    }

    let resized = bilinear_resize(&crop, side, side, out_resolution, out_resolution);
    let patch = Tensor::from_vec(&[1, out_resolution, out_resolution], resized)
        .expect("resample length matches resolution");
    Ok(RoiSample {
        patch,
        label: annotation.label,
        source_id: format!("{}:{cx},{cy},{}", annotation.image, annotation.radius),
    })
}

/// Bilinear resampling with half-pixel sample centers, so equal input and
/// output sizes reproduce the input exactly and constants stay constant.
pub(crate) fn bilinear_resize(
    src: &[f64],
    src_w: usize,
    src_h: usize,
    dst_w: usize,
    dst_h: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; dst_w * dst_h];
    let scale_x = src_w as f64 / dst_w as f64;
    let scale_y = src_h as f64 / dst_h as f64;
    for dy in 0..dst_h {
        let sy = ((dy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (src_h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let fy = sy - y0 as f64;
        for dx in 0..dst_w {
            let sx = ((dx as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (src_w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let fx = sx - x0 as f64;
            let top = src[y0 * src_w + x0] * (1.0 - fx) + src[y0 * src_w + x1] * fx;
            let bottom = src[y1 * src_w + x0] * (1.0 - fx) + src[y1 * src_w + x1] * fx;
            out[dy * dst_w + dx] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}
