//! Rib-cage based cropping.
//!
//! Pipeline: fill the lungs by grayscale reconstruction from the image
//! border, keep the largest bright connected component (the body), threshold
//! bone inside the body and open it to get the rib cage, then crop the
//! original slice to the rib bounding box and resize it.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{resize, BinaryMask, Image2D, ValueDomain};

/// Inclusive pixel bounds of the rib cage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RibCageBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl RibCageBox {
    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row_min..=self.row_max).contains(&row) && (self.col_min..=self.col_max).contains(&col)
    }

    /// Largest per-side deviation from `other`, in pixels.
    pub fn max_side_error(&self, other: &RibCageBox) -> usize {
        [
            self.row_min.abs_diff(other.row_min),
            self.row_max.abs_diff(other.row_max),
            self.col_min.abs_diff(other.col_min),
            self.col_max.abs_diff(other.col_max),
        ]
        .into_iter()
        .max()
        .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(format!("connectivity must be 4 or 8, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
        const EIGHT: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropConfig {
    /// HU level separating soft tissue from air.
    pub body_threshold: f32,
    /// HU level separating bone from soft tissue.
    pub rib_threshold: f32,
    pub opening_radius: usize,
    pub connectivity: Connectivity,
    pub margin: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            body_threshold: -200.0,
            rib_threshold: 200.0,
            opening_radius: 2,
            connectivity: Connectivity::Eight,
            margin: 2,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rib_threshold > self.body_threshold) {
            return Err(Error::param(
                "rib_threshold",
                format!(
                    "must exceed body_threshold ({} <= {})",
                    self.rib_threshold, self.body_threshold
                ),
            ));
        }
        Ok(())
    }
}

fn require_hu(img: &Image2D) -> Result<()> {
    if img.domain() != ValueDomain::Hu {
        return Err(Error::DomainMismatch {
            expected: ValueDomain::Hu.name(),
            actual: img.domain().name(),
        });
    }
    Ok(())
}

/// Orders finite floats so they can sit in a heap.
#[inline]
fn sort_key(v: f32) -> u32 {
    let bits = v.to_bits();
    if bits >> 31 == 1 {
        !bits
    } else {
        bits | 0x8000_0000
    }
}

/// Grayscale reconstruction by erosion with the image border as marker.
///
/// Computed by priority flooding from the border: each pixel receives the
/// lowest possible "spill level" of any 8-connected path to the border, so
/// dark basins enclosed by brighter tissue are raised to their rim.
pub fn fill_lungs_by_reconstruction(img: &Image2D) -> Image2D {
    let (h, w) = img.dims();
    let src = img.values();
    let mut out = src.to_vec();
    let mut done = vec![false; h * w];
    let mut heap = BinaryHeap::new();
    for r in 0..h {
        for c in 0..w {
            if r == 0 || c == 0 || r + 1 == h || c + 1 == w {
                let i = r * w + c;
                done[i] = true;
                heap.push(Reverse((sort_key(src[i]), i)));
            }
        }
    }
    while let Some(Reverse((_, i))) = heap.pop() {
        let level = out[i];
        let (r, c) = ((i / w) as isize, (i % w) as isize);
        for &(dr, dc) in Connectivity::Eight.offsets() {
            let (nr, nc) = (r + dr, c + dc);
            if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                continue;
            }
            let j = nr as usize * w + nc as usize;
            if done[j] {
                continue;
            }
            done[j] = true;
            out[j] = src[j].max(level);
            heap.push(Reverse((sort_key(out[j]), j)));
        }
    }
    Image2D::from_parts(h, w, out, img.domain())
}

/// Connected components of `mask`, in raster order of their first pixel.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> Vec<Vec<usize>> {
    let (h, w) = mask.dims();
    let vals = mask.values();
    let mut seen = vec![false; h * w];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !vals[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for &(dr, dc) in connectivity.offsets() {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if vals[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        comps.push(comp);
    }
    comps
}

/// Keeps the largest connected component; ties go to the component whose
/// first raster-order pixel comes first.
pub fn largest_component(mask: &BinaryMask, connectivity: Connectivity) -> BinaryMask {
    let (h, w) = mask.dims();
    let mut out = BinaryMask::empty(h, w);
    let comps = connected_components(mask, connectivity);
    let mut best: Option<&Vec<usize>> = None;
    for comp in &comps {
        if best.is_none_or(|b| comp.len() > b.len()) {
            best = Some(comp);
        }
    }
    if let Some(comp) = best {
        let vals = out.values_mut();
        for &i in comp {
            vals[i] = true;
        }
    }
    out
}

pub fn select_body_region(filled: &Image2D, cfg: &CropConfig) -> Result<BinaryMask> {
    require_hu(filled)?;
    cfg.validate()?;
    let (h, w) = filled.dims();
    let bright = BinaryMask::new(h, w, filled.values().iter().map(|&v| v >= cfg.body_threshold).collect())?;
    if bright.is_empty() {
        return Err(Error::NoBody);
    }
    Ok(largest_component(&bright, cfg.connectivity))
}

fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dr in -r..=r {
        for dc in -r..=r {
            if dr * dr + dc * dc <= r * r {
                out.push((dr, dc));
            }
        }
    }
    out
}

/// Binary erosion by a disk; pixels outside the image count as background.
pub fn erode_disk(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    let offs = disk_offsets(radius);
    BinaryMask::from_fn(h, w, |r, c| {
        offs.iter().all(|&(dr, dc)| {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            nr >= 0 && nc >= 0 && nr < h as isize && nc < w as isize && mask.get(nr as usize, nc as usize)
        })
    })
}

pub fn dilate_disk(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    let offs = disk_offsets(radius);
    BinaryMask::from_fn(h, w, |r, c| {
        offs.iter().any(|&(dr, dc)| {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            nr >= 0 && nc >= 0 && nr < h as isize && nc < w as isize && mask.get(nr as usize, nc as usize)
        })
    })
}

pub fn open_disk(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    dilate_disk(&erode_disk(mask, radius), radius)
}

pub fn segment_rib_cage(img: &Image2D, body: &BinaryMask, cfg: &CropConfig) -> Result<BinaryMask> {
    require_hu(img)?;
    cfg.validate()?;
    body.ensure_same_dims(img.dims(), "body mask vs image")?;
    if body.is_empty() {
        return Err(Error::NoBody);
    }
    let (h, w) = img.dims();
    let dense: Vec<bool> = img
        .values()
        .iter()
        .zip(body.values())
        .map(|(&v, &b)| b && v >= cfg.rib_threshold)
        .collect();
    let ribs = open_disk(&BinaryMask::new(h, w, dense)?, cfg.opening_radius);
    if ribs.is_empty() {
        return Err(Error::NoRibs);
    }
    Ok(ribs)
}

/// Tightest box around `mask`, grown by `margin` and clamped to the image.
pub fn compute_bounding_box(mask: &BinaryMask, margin: usize) -> Result<RibCageBox> {
    let (h, w) = mask.dims();
    let mut bounds: Option<RibCageBox> = None;
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let b = bounds.get_or_insert(RibCageBox {
                row_min: r,
                row_max: r,
                col_min: c,
                col_max: c,
            });
            b.row_min = b.row_min.min(r);
            b.row_max = b.row_max.max(r);
            b.col_min = b.col_min.min(c);
            b.col_max = b.col_max.max(c);
        }
    }
    let b = bounds.ok_or(Error::EmptyMask)?;
    Ok(RibCageBox {
        row_min: b.row_min.saturating_sub(margin),
        row_max: (b.row_max + margin).min(h - 1),
        col_min: b.col_min.saturating_sub(margin),
        col_max: (b.col_max + margin).min(w - 1),
    })
}

/// Output of [`crop_to_ribcage`].
#[derive(Debug, Clone)]
pub struct CropResult {
    pub image: Image2D,
    pub rib_box: RibCageBox,
}

/// Intermediate masks of the cropping pipeline, mainly for visualisation.
#[derive(Debug, Clone)]
pub struct CropStages {
    pub filled: Image2D,
    pub body: BinaryMask,
    pub ribs: BinaryMask,
    pub rib_box: RibCageBox,
}

pub fn crop_stages(img: &Image2D, cfg: &CropConfig) -> Result<CropStages> {
    require_hu(img)?;
    cfg.validate()?;
    let filled = fill_lungs_by_reconstruction(img);
    let body = select_body_region(&filled, cfg)?;
    let ribs = segment_rib_cage(img, &body, cfg)?;
    let rib_box = compute_bounding_box(&ribs, cfg.margin)?;
    Ok(CropStages {
        filled,
        body,
        ribs,
        rib_box,
    })
}

/// Full pipeline: returns the HU slice cropped to the rib box and resized to
/// `out_size x out_size`.
pub fn crop_to_ribcage(img: &Image2D, cfg: &CropConfig, out_size: usize) -> Result<CropResult> {
    let stages = crop_stages(img, cfg)?;
    let image = apply_box(img, &stages.rib_box, out_size)?;
    Ok(CropResult {
        image,
        rib_box: stages.rib_box,
    })
}

pub fn apply_box(img: &Image2D, b: &RibCageBox, out_size: usize) -> Result<Image2D> {
    let cropped = img.crop(b.row_min, b.row_max, b.col_min, b.col_max)?;
    resize(&cropped, out_size, out_size)
}

/// Crops a mask paired with an image using that image's box.
pub fn apply_box_to_mask(mask: &BinaryMask, b: &RibCageBox, out_size: usize) -> Result<BinaryMask> {
    mask.crop(b.row_min, b.row_max, b.col_min, b.col_max)?
        .resize_nearest(out_size, out_size)
}
