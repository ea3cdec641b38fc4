//! On-disk formats: 16-bit HU PNGs (`HU + 32768`), 8-bit `{0, 255}` mask
//! PNGs, JSON manifests and RGB preview panels.

use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::cropping::RibCageBox;
use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, Image2D, ValueDomain};
use crate::phantom::{Domain, PhantomDataset, Split};
use crate::preprocess::PreparedSlice;

pub const HU_PNG_OFFSET: f32 = 32768.0;

pub fn save_hu_png(img: &Image2D, path: &Path) -> Result<()> {
    if img.domain() != ValueDomain::Hu {
        return Err(Error::DomainMismatch {
            expected: ValueDomain::Hu.name(),
            actual: img.domain().name(),
        });
    }
    let data: Vec<u16> = img
        .values()
        .iter()
        .map(|&v| (v + HU_PNG_OFFSET).round().clamp(0.0, u16::MAX as f32) as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, data).expect("buffer size matches image");
    buf.save(path)?;
    Ok(())
}

pub fn load_hu_png(path: &Path) -> Result<Image2D> {
    let buf = image::open(path)?;
    if !matches!(buf.color(), image::ColorType::L16) {
        return Err(Error::Data(format!(
            "{}: expected a 16-bit grayscale PNG",
            path.display()
        )));
    }
    let buf = buf.into_luma16();
    let (w, h) = buf.dimensions();
    let data = buf.into_raw().into_iter().map(|v| v as f32 - HU_PNG_OFFSET).collect();
    Image2D::new(h as usize, w as usize, data, ValueDomain::Hu)
}

pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let data = mask.values().iter().map(|&b| if b { 255u8 } else { 0 }).collect();
    let buf = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, data).expect("buffer size matches mask");
    buf.save(path)?;
    Ok(())
}

pub fn load_mask_png(path: &Path) -> Result<BinaryMask> {
    let buf = image::open(path)?.into_luma8();
    let (w, h) = buf.dimensions();
    BinaryMask::new(
        h as usize,
        w as usize,
        buf.into_raw().into_iter().map(|v| v > 127).collect(),
    )
}

/// One slice of a dataset on disk; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub slice_id: String,
    pub domain: Domain,
    pub split: Split,
    pub image: String,
    pub lung_mask: String,
    pub pathology_mask: String,
    /// Box in the source image; set on cropped datasets.
    pub rib_box: Option<RibCageBox>,
    pub zoom: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub domain: Domain,
    pub image_size: usize,
    pub cropped: bool,
    pub slices: Vec<ManifestEntry>,
}

/// A manifest together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub root: PathBuf,
    pub manifest: Manifest,
}

/// An HU slice with its masks, as read from disk.
#[derive(Debug, Clone)]
pub struct DiskSlice {
    pub entry: ManifestEntry,
    pub image: Image2D,
    pub lung_mask: BinaryMask,
    pub pathology_mask: BinaryMask,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<LoadedManifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("invalid manifest {}: {e}", path.display())))?;
        Ok(LoadedManifest {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            manifest,
        })
    }
}

impl LoadedManifest {
    pub fn read(&self, entry: &ManifestEntry) -> Result<DiskSlice> {
        Ok(DiskSlice {
            entry: entry.clone(),
            image: load_hu_png(&self.root.join(&entry.image))?,
            lung_mask: load_mask_png(&self.root.join(&entry.lung_mask))?,
            pathology_mask: load_mask_png(&self.root.join(&entry.pathology_mask))?,
        })
    }

    /// Reads every slice, optionally restricted to some splits.
    pub fn read_all(&self, splits: Option<&[Split]>) -> Result<Vec<DiskSlice>> {
        self.manifest
            .slices
            .iter()
            .filter(|e| splits.is_none_or(|s| s.contains(&e.split)))
            .map(|e| self.read(e))
            .collect()
    }
}

fn slice_stem(patient_id: &str, slice_id: &str) -> String {
    format!("{patient_id}_{slice_id}")
}

/// Writes a generated dataset (images, masks, manifest) under `dir`.
pub fn write_dataset(ds: &PhantomDataset, dir: &Path) -> Result<Manifest> {
    for sub in ["images", "lung_masks", "pathology_masks"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let mut slices = Vec::with_capacity(ds.slices.len());
    let mut image_size = 0;
    for s in &ds.slices {
        let p = &s.sample;
        image_size = p.image.height();
        let stem = slice_stem(&p.patient_id, &p.slice_id);
        let entry = ManifestEntry {
            patient_id: p.patient_id.clone(),
            slice_id: p.slice_id.clone(),
            domain: p.domain,
            split: s.split,
            image: format!("images/{stem}.png"),
            lung_mask: format!("lung_masks/{stem}.png"),
            pathology_mask: format!("pathology_masks/{stem}.png"),
            rib_box: None,
            zoom: Some(p.zoom),
        };
        save_hu_png(&p.image, &dir.join(&entry.image))?;
        save_mask_png(&p.lung_mask, &dir.join(&entry.lung_mask))?;
        save_mask_png(&p.pathology_mask, &dir.join(&entry.pathology_mask))?;
        slices.push(entry);
    }
    let manifest = Manifest {
        domain: ds.domain,
        image_size,
        cropped: false,
        slices,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Writes a cropped slice (HU image and masks) next to its manifest.
pub fn write_cropped_slice(
    dir: &Path,
    entry: &ManifestEntry,
    image: &Image2D,
    lung: &BinaryMask,
    pathology: &BinaryMask,
    rib_box: RibCageBox,
) -> Result<ManifestEntry> {
    for sub in ["images", "lung_masks", "pathology_masks"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let stem = slice_stem(&entry.patient_id, &entry.slice_id);
    let out = ManifestEntry {
        image: format!("images/{stem}.png"),
        lung_mask: format!("lung_masks/{stem}.png"),
        pathology_mask: format!("pathology_masks/{stem}.png"),
        rib_box: Some(rib_box),
        ..entry.clone()
    };
    save_hu_png(image, &dir.join(&out.image))?;
    save_mask_png(lung, &dir.join(&out.lung_mask))?;
    save_mask_png(pathology, &dir.join(&out.pathology_mask))?;
    Ok(out)
}

/// A cropped on-disk slice turned into network input.
pub fn prepare_cropped(slice: &DiskSlice, window: &crate::imaging::WindowSpec) -> Result<PreparedSlice> {
    let rib_box = slice.entry.rib_box.ok_or_else(|| {
        Error::Data(format!(
            "slice {} has no rib box; run `crop` first",
            slice.entry.slice_id
        ))
    })?;
    Ok(PreparedSlice {
        image: crate::preprocess::normalize(&slice.image, window)?,
        lung_mask: slice.lung_mask.clone(),
        pathology_mask: slice.pathology_mask.clone(),
        rib_box,
        patient_id: slice.entry.patient_id.clone(),
        slice_id: slice.entry.slice_id.clone(),
    })
}

/// Maps `[lo, hi]` linearly to 0..=255.
fn gray(v: f32, lo: f32, hi: f32) -> u8 {
    ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Black → red → yellow → white ramp for `t` in `[0, 1]`.
pub fn heat(t: f32) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * 3.0;
    let c = |x: f32| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [c(t), c(t - 1.0), c(t - 2.0)]
}

/// `input | generated | |input - generated|` side by side. Intensities map
/// `[lo, hi]` to gray; the difference map saturates at `diff_max`.
pub fn render_panel(input: &Image2D, generated: &Image2D, lo: f32, hi: f32, diff_max: f32) -> Result<RgbImage> {
    input.ensure_same_dims(generated.dims(), "panel")?;
    let (h, w) = input.dims();
    let mut out = RgbImage::new(3 * w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let (a, b) = (input.get(r, c), generated.get(r, c));
            let (ga, gb) = (gray(a, lo, hi), gray(b, lo, hi));
            out.put_pixel(c as u32, r as u32, Rgb([ga, ga, ga]));
            out.put_pixel((w + c) as u32, r as u32, Rgb([gb, gb, gb]));
            out.put_pixel((2 * w + c) as u32, r as u32, Rgb(heat((a - b).abs() / diff_max)));
        }
    }
    Ok(out)
}
