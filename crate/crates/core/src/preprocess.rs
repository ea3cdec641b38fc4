//! The slice pipeline shared by translation and segmentation:
//! rib-cage crop (HU) → resize → lung window → per-image z-score.

use serde::{Deserialize, Serialize};

use crate::cropping::{apply_box_to_mask, crop_to_ribcage, CropConfig, RibCageBox};
use crate::error::Result;
use crate::imaging::{apply_window, zscore_normalize, BinaryMask, Image2D, WindowSpec};
use crate::phantom::PhantomSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub crop: CropConfig,
    pub window: WindowSpec,
    /// Side length of the network input.
    pub out_size: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            crop: CropConfig::default(),
            window: WindowSpec::lung(),
            out_size: 64,
        }
    }
}

/// A network-ready slice with masks cropped by the same box.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSlice {
    pub image: Image2D,
    pub lung_mask: BinaryMask,
    pub pathology_mask: BinaryMask,
    pub rib_box: RibCageBox,
    pub patient_id: String,
    pub slice_id: String,
}

/// Crops, windows and normalizes an HU slice; returns it with the box used.
pub fn preprocess_image(img: &Image2D, cfg: &PreprocessConfig) -> Result<(Image2D, RibCageBox)> {
    let cropped = crop_to_ribcage(img, &cfg.crop, cfg.out_size)?;
    Ok((normalize(&cropped.image, &cfg.window)?, cropped.rib_box))
}

/// Windows an already-cropped HU slice and z-scores it.
pub fn normalize(img: &Image2D, window: &WindowSpec) -> Result<Image2D> {
    zscore_normalize(&apply_window(img, window)?)
}

pub fn preprocess_sample(sample: &PhantomSample, cfg: &PreprocessConfig) -> Result<PreparedSlice> {
    let (image, rib_box) = preprocess_image(&sample.image, cfg)?;
    Ok(PreparedSlice {
        image,
        lung_mask: apply_box_to_mask(&sample.lung_mask, &rib_box, cfg.out_size)?,
        pathology_mask: apply_box_to_mask(&sample.pathology_mask, &rib_box, cfg.out_size)?,
        rib_box,
        patient_id: sample.patient_id.clone(),
        slice_id: sample.slice_id.clone(),
    })
}
