//! Reading and writing calibrations, scenes and images.

mod colmap;
mod image;
mod ply;

use std::path::Path;

pub use colmap::{
    parse_colmap_text, write_colmap_text, CameraModel, ColmapCamera, ColmapImage,
    ColmapReconstruction, NamedCamera,
};
pub use image::{
    quantize, read_image, read_pfm, read_ppm, write_image, write_pfm, write_ppm, ImageFormat,
};
pub use ply::{read_ply_gaussians, read_ply_gaussians_with_extras, write_ply_gaussians, SH_C0};

use crate::error::Result;
use crate::renderer::Image;
use crate::scene::GaussianScene;

/// `x` with 17 significant digits, in `%.17g` style without trailing
/// zeros. Parsing the result gives back `x` exactly.
pub fn fmt_g17(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 && x.is_sign_negative() {
            "-0".into()
        } else {
            format!("{x}")
        };
    }
    let sci = format!("{x:.16e}");
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..17).contains(&exp) {
        let fixed = format!("{x:.*}", (16 - exp).max(0) as usize);
        trim_zeros(&fixed).to_string()
    } else {
        format!("{}e{exp}", trim_zeros(mant))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Reads `cameras.txt` and `images.txt` from `dir`.
pub fn read_colmap_dir(dir: &Path) -> Result<ColmapReconstruction> {
    let cams = std::fs::read_to_string(dir.join("cameras.txt"))?;
    let imgs = std::fs::read_to_string(dir.join("images.txt"))?;
    parse_colmap_text(&cams, &imgs)
}

pub fn write_colmap_dir(dir: &Path, recon: &ColmapReconstruction) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (cams, imgs) = write_colmap_text(recon);
    std::fs::write(dir.join("cameras.txt"), cams)?;
    std::fs::write(dir.join("images.txt"), imgs)?;
    Ok(())
}

pub fn read_scene_file(path: &Path) -> Result<GaussianScene> {
    read_ply_gaussians(&std::fs::read(path)?)
}

pub fn write_scene_file(path: &Path, scene: &GaussianScene) -> Result<()> {
    std::fs::write(path, write_ply_gaussians(scene)?)?;
    Ok(())
}

pub fn read_image_file(path: &Path) -> Result<Image> {
    read_image(&std::fs::read(path)?)
}

/// Format chosen from the extension.
pub fn write_image_file(path: &Path, img: &Image) -> Result<()> {
    let format = ImageFormat::from_path(path)?;
    std::fs::write(path, write_image(img, format))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn g17_examples() {
        assert_eq!(fmt_g17(0.0), "0");
        assert_eq!(fmt_g17(400.0), "400");
        assert_eq!(fmt_g17(0.1), "0.10000000000000001");
        assert_eq!(fmt_g17(-2.5), "-2.5");
        assert_eq!(fmt_g17(1e-7), "9.9999999999999995e-8");
        assert_eq!(fmt_g17(1.5e20), "1.5e20");
    }

    proptest! {
        #[test]
        fn g17_round_trips(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(x.is_finite());
            let s = fmt_g17(x);
            prop_assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }
}
