//! Browser bindings: render a phantom slice through an adjustable window and
//! show each stage of the rib-cage crop.

use shapelock::cropping::{apply_box, crop_stages, CropConfig, CropStages};
use shapelock::imaging::{apply_window, BinaryMask, Image2D, WindowSpec};
use shapelock::phantom::{generate_sample_at_zoom, Domain, PhantomSample, PhantomSpec};
use wasm_bindgen::prelude::*;

fn js(e: shapelock::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Grayscale RGBA of a `[0, 1]` image.
fn gray_rgba(img: &Image2D) -> Vec<u8> {
    img.values()
        .iter()
        .flat_map(|&v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

/// Alpha-blends `color` over `rgba` wherever `mask` is set.
fn blend(rgba: &mut [u8], mask: &BinaryMask, color: [u8; 3], alpha: f32) {
    for (px, &on) in rgba.chunks_exact_mut(4).zip(mask.values()) {
        if on {
            for (c, &t) in px.iter_mut().zip(&color) {
                *c = (*c as f32 * (1.0 - alpha) + t as f32 * alpha).round() as u8;
            }
        }
    }
}

#[wasm_bindgen]
pub struct Slice {
    sample: PhantomSample,
    crop: CropConfig,
    stages: Option<CropStages>,
    crop_error: Option<String>,
}

impl Slice {
    pub fn generate(seed: u32, pathological: bool, zoom: f32) -> shapelock::Result<Self> {
        let domain = if pathological {
            Domain::Pathological
        } else {
            Domain::Healthy
        };
        let sample = generate_sample_at_zoom(&PhantomSpec::default(), domain, seed as u64, zoom)?;
        let crop = CropConfig::default();
        let (stages, crop_error) = match crop_stages(&sample.image, &crop) {
            Ok(s) => (Some(s), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Ok(Self {
            sample,
            crop,
            stages,
            crop_error,
        })
    }

    pub fn render(&self, center: f32, width: f32) -> shapelock::Result<Vec<u8>> {
        let w = WindowSpec::new(center, width)?;
        Ok(gray_rgba(&apply_window(&self.sample.image, &w)?))
    }

    /// The windowed slice with one crop stage overlaid.
    pub fn render_stage(&self, stage: &str, center: f32, width: f32) -> shapelock::Result<Vec<u8>> {
        let Some(st) = &self.stages else {
            return self.render(center, width);
        };
        let w = WindowSpec::new(center, width)?;
        let mut rgba = match stage {
            "filled" => gray_rgba(&apply_window(&st.filled, &w)?),
            _ => self.render(center, width)?,
        };
        match stage {
            "body" => blend(&mut rgba, &st.body, [40, 160, 255], 0.45),
            "ribs" => blend(&mut rgba, &st.ribs, [255, 80, 40], 0.7),
            "lungs" => blend(&mut rgba, &self.sample.lung_mask, [60, 220, 90], 0.45),
            "pathology" => blend(&mut rgba, &self.sample.pathology_mask, [255, 200, 0], 0.6),
            _ => {}
        }
        if matches!(stage, "ribs" | "box") {
            let b = st.rib_box;
            let size = self.sample.image.width();
            let border = BinaryMask::from_fn(self.sample.image.height(), size, |r, c| {
                b.contains(r, c) && (r == b.row_min || r == b.row_max || c == b.col_min || c == b.col_max)
            });
            blend(&mut rgba, &border, [255, 230, 0], 1.0);
        }
        Ok(rgba)
    }

    pub fn render_cropped(&self, out_size: usize, center: f32, width: f32) -> shapelock::Result<Vec<u8>> {
        let Some(st) = &self.stages else {
            return Err(shapelock::Error::Data(self.crop_error.clone().unwrap_or_default()));
        };
        let cropped = apply_box(&self.sample.image, &st.rib_box, out_size)?;
        Ok(gray_rgba(&apply_window(&cropped, &WindowSpec::new(center, width)?)?))
    }
}

#[wasm_bindgen]
impl Slice {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, pathological: bool, zoom: f32) -> Result<Slice, JsError> {
        Self::generate(seed, pathological, zoom).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.sample.image.width()
    }

    /// HU value at a pixel, for the hover readout.
    pub fn hu(&self, row: usize, col: usize) -> f32 {
        let n = self.size();
        self.sample.image.get(row.min(n - 1), col.min(n - 1))
    }

    pub fn windowed(&self, center: f32, width: f32) -> Result<Vec<u8>, JsError> {
        self.render(center, width).map_err(js)
    }

    /// Stage is one of `image`, `filled`, `body`, `ribs`, `box`, `lungs`, `pathology`.
    pub fn stage(&self, stage: &str, center: f32, width: f32) -> Result<Vec<u8>, JsError> {
        self.render_stage(stage, center, width).map_err(js)
    }

    pub fn cropped(&self, out_size: usize, center: f32, width: f32) -> Result<Vec<u8>, JsError> {
        self.render_cropped(out_size, center, width).map_err(js)
    }

    /// `[row_min, row_max, col_min, col_max]`, empty if cropping failed.
    pub fn rib_box(&self) -> Vec<u32> {
        self.stages.as_ref().map_or_else(Vec::new, |s| {
            let b = s.rib_box;
            [b.row_min, b.row_max, b.col_min, b.col_max].map(|v| v as u32).to_vec()
        })
    }

    /// Ground-truth rib box the phantom was drawn with.
    pub fn true_rib_box(&self) -> Vec<u32> {
        let b = self.sample.rib_box;
        [b.row_min, b.row_max, b.col_min, b.col_max].map(|v| v as u32).to_vec()
    }

    pub fn crop_error(&self) -> Option<String> {
        self.crop_error.clone()
    }

    pub fn body_threshold(&self) -> f32 {
        self.crop.body_threshold
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_every_stage_at_full_size() {
        let s = Slice::generate(3, true, 1.0).unwrap();
        let n = s.size();
        assert_eq!(s.render(-500.0, 1500.0).unwrap().len(), n * n * 4);
        for stage in ["image", "filled", "body", "ribs", "box", "lungs", "pathology"] {
            assert_eq!(
                s.render_stage(stage, -500.0, 1500.0).unwrap().len(),
                n * n * 4,
                "{stage}"
            );
        }
        assert_eq!(s.render_cropped(64, -500.0, 1500.0).unwrap().len(), 64 * 64 * 4);
        assert_eq!(s.rib_box().len(), 4);
        assert!(s.render(0.0, 0.0).is_err());
    }

    #[test]
    fn window_controls_contrast() {
        let s = Slice::generate(1, false, 1.0).unwrap();
        let narrow = s.render(-850.0, 1.0).unwrap();
        let wide = s.render(-500.0, 1500.0).unwrap();
        let levels = |px: &[u8]| {
            px.chunks(4)
                .map(|p| p[0])
                .collect::<std::collections::BTreeSet<_>>()
                .len()
        };
        assert!(levels(&narrow) < levels(&wide));
    }

    #[test]
    fn box_overlay_marks_border() {
        let s = Slice::generate(2, false, 1.1).unwrap();
        let px = s.render_stage("box", -500.0, 1500.0).unwrap();
        let b = s.rib_box();
        let idx = (b[0] as usize * s.size() + b[2] as usize) * 4;
        assert_eq!(&px[idx..idx + 3], &[255, 230, 0]);
    }
}
