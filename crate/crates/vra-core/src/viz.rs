//! Per-frame visualization of perturbed clips: clean frame, perturbed
//! frame, and the difference amplified for visibility, side by side.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;

use crate::data::{PixelTensor, VideoClip};
use crate::error::{Error, Result};

/// Default amplification for the difference panel.
pub const DEFAULT_AMPLIFY: f64 = 32.0;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes one triptych PNG per frame (clean | perturbed | amplified diff)
/// and returns the written paths.
pub fn dump_triptychs(
    clip: &VideoClip,
    perturbation: &PixelTensor,
    out_dir: &Path,
    amplify: f64,
) -> Result<Vec<PathBuf>> {
    if clip.pixels.dim() != perturbation.dim() {
        return Err(Error::Interface(format!(
            "perturbation shape {:?} does not match clip shape {:?}",
            perturbation.dim(),
            clip.pixels.dim()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let (t_len, height, width, _) = clip.pixels.dim();
    let sep = 2usize;
    let canvas_w = (width * 3 + sep * 2) as u32;
    let mut paths = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut img = RgbImage::from_pixel(canvas_w, height as u32, image::Rgb([255, 255, 255]));
        for y in 0..height {
            for x in 0..width {
                let mut clean = [0u8; 3];
                let mut adv = [0u8; 3];
                let mut diff = [0u8; 3];
                for c in 0..3 {
                    let p = clip.pixels[[t, y, x, c]];
                    let d = perturbation[[t, y, x, c]];
                    clean[c] = to_u8(p);
                    adv[c] = to_u8(p + d);
                    diff[c] = to_u8(0.5 + amplify * d);
                }
                img.put_pixel(x as u32, y as u32, image::Rgb(clean));
                img.put_pixel((width + sep + x) as u32, y as u32, image::Rgb(adv));
                img.put_pixel((2 * (width + sep) + x) as u32, y as u32, image::Rgb(diff));
            }
        }
        let path = out_dir.join(format!("frame_{t:05}_triptych.png"));
        img.save(&path)
            .map_err(|e| Error::Format(format!("writing {}: {e}", path.display())))?;
        paths.push(path);
    }
    Ok(paths)
}
