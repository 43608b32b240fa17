//! Ordered slice stacks.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// An ordered stack of grayscale slices. The slice index plays the role of
/// time for rank pooling: slice `t` comes physically after slice `t-1`.
#[derive(Debug, Clone)]
pub struct Volume {
    slices: Vec<Array2<f64>>,
    source_id: String,
}

impl Volume {
    /// Build a volume, validating that all slices share one shape and all
    /// intensities lie in `[0, 1]`.
    pub fn new(slices: Vec<Array2<f64>>, source_id: impl Into<String>) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::invalid_input(
                "volume must contain at least one slice",
            ));
        }
        let dim = slices[0].dim();
        if dim.0 == 0 || dim.1 == 0 {
            return Err(Error::invalid_input("slices must be non-empty"));
        }
        for (t, s) in slices.iter().enumerate() {
            if s.dim() != dim {
                return Err(Error::invalid_input(format!(
                    "slice {} has shape {:?}, expected {:?}",
                    t,
                    s.dim(),
                    dim
                )));
            }
            if s.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::invalid_input(format!(
                    "slice {} has intensities outside [0, 1]",
                    t
                )));
            }
        }
        Ok(Volume {
            slices,
            source_id: source_id.into(),
        })
    }

    /// Load a volume from a directory of PNG/JPEG slices. Slice order is the
    /// lexicographic order of file names; 8-bit values are scaled to `[0, 1]`.
    pub fn from_slice_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase),
                    Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
                )
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::invalid_input(format!(
                "no PNG/JPEG slices found in {}",
                dir.display()
            )));
        }
        let mut slices = Vec::with_capacity(files.len());
        for f in &files {
            slices.push(load_grayscale(f)?);
        }
        let source_id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("volume")
            .to_string();
        Volume::new(slices, source_id)
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// (height, width) of every slice.
    pub fn slice_dim(&self) -> (usize, usize) {
        self.slices[0].dim()
    }

    pub fn slices(&self) -> &[Array2<f64>] {
        &self.slices
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// A copy with the slice order reversed (same source id).
    pub fn reversed(&self) -> Volume {
        let mut slices = self.slices.clone();
        slices.reverse();
        Volume {
            slices,
            source_id: self.source_id.clone(),
        }
    }
}

/// Load an image file as a grayscale raster scaled to `[0, 1]`.
pub fn load_grayscale(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let img = image::open(path.as_ref())?.into_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        out[(y as usize, x as usize)] = f64::from(p.0[0]) / 255.0;
    }
    Ok(out)
}

/// Save a raster in `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_grayscale(path: impl AsRef<Path>, raster: &Array2<f64>) -> Result<()> {
    let (h, w) = raster.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for ((y, x), &v) in raster.indexed_iter() {
        let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        img.put_pixel(x as u32, y as u32, image::Luma([q]));
    }
    img.save(path.as_ref())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_empty_and_mismatched() {
        assert!(Volume::new(vec![], "v").is_err());
        let a = Array2::zeros((2, 2));
        let b = Array2::zeros((2, 3));
        assert!(Volume::new(vec![a, b], "v").is_err());
    }

    #[test]
    fn rejects_out_of_range_intensity() {
        let s = array![[0.0, 1.5]];
        assert!(Volume::new(vec![s], "v").is_err());
    }

    #[test]
    fn reversed_flips_order() {
        let a = array![[0.0]];
        let b = array![[1.0]];
        let v = Volume::new(vec![a.clone(), b.clone()], "v").unwrap();
        let r = v.reversed();
        assert_eq!(r.slices()[0], b);
        assert_eq!(r.slices()[1], a);
    }

    #[test]
    fn grayscale_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.png");
        let raster = array![[0.0, 0.5], [1.0, 0.25]];
        save_grayscale(&path, &raster).unwrap();
        let back = load_grayscale(&path).unwrap();
        for (a, b) in raster.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn loads_slices_in_lexicographic_order() {
        let dir = tempfile::tempdir().unwrap();
        // Deliberately create out of order; names sort 01, 02, 10.
        for (name, v) in [("10.png", 0.8), ("01.png", 0.2), ("02.png", 0.4)] {
            save_grayscale(dir.path().join(name), &Array2::from_elem((2, 2), v)).unwrap();
        }
        let vol = Volume::from_slice_dir(dir.path()).unwrap();
        assert_eq!(vol.len(), 3);
        let means: Vec<f64> = vol.slices().iter().map(|s| s.mean().unwrap()).collect();
        assert!(means[0] < means[1] && means[1] < means[2]);
    }
}
