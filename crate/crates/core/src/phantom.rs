//! Deterministic synthetic thorax slices with full ground truth.
//!
//! A phantom is a body ellipse over air, two lung ellipses, a ring of rib
//! arcs between the lungs and the body wall, an optional scanner bed below
//! the body, and additive Gaussian texture noise. Pathological slices raise
//! the outer band of each lung to a dense-tissue HU level.
//!
//! Geometry is expressed in unzoomed pixel units relative to the image
//! centre; axes are `(horizontal, vertical)` semi-axes and offsets are
//! `(row, col)`. The per-slice zoom factor scales the whole anatomy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cropping::{compute_bounding_box, RibCageBox};
use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, Image2D, ValueDomain, HU_MAX, HU_MIN};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Healthy,
    Pathological,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Healthy => "healthy",
            Domain::Pathological => "pathological",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "healthy" => Ok(Domain::Healthy),
            "pathological" => Ok(Domain::Pathological),
            other => Err(Error::param("domain", format!("unknown domain `{other}`"))),
        }
    }
}

/// Bed gap below the body and bed thickness, as fractions of the vertical body semi-axis.
const BED_GAP: f32 = 0.16;
const BED_THICKNESS: f32 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub body_axes: (f32, f32),
    /// `(0, 0)` produces a slice without lungs.
    pub lung_axes: (f32, f32),
    pub lung_offsets: [(f32, f32); 2],
    /// Must be a positive multiple of 4 so that arcs sit at the four
    /// extreme directions of the ring.
    pub rib_count: usize,
    pub rib_thickness: f32,
    pub rib_arc_degrees: f32,
    /// Gap between the outer rib ring and the body wall.
    pub rib_inset: f32,
    pub rib_hu: f32,
    pub body_hu: f32,
    pub lung_hu: f32,
    pub pathology_band_fraction: f32,
    pub pathology_hu: f32,
    pub texture_noise_std: f32,
    pub zoom_range: (f32, f32),
    pub scanner_bed: bool,
    pub bed_hu: f32,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_size: 128,
            body_axes: (50.0, 38.0),
            lung_axes: (14.0, 20.0),
            lung_offsets: [(0.0, -22.0), (0.0, 22.0)],
            rib_count: 12,
            rib_thickness: 8.0,
            rib_arc_degrees: 18.0,
            rib_inset: 2.0,
            rib_hu: 700.0,
            body_hu: 0.0,
            lung_hu: -850.0,
            pathology_band_fraction: 0.35,
            pathology_hu: -100.0,
            texture_noise_std: 20.0,
            zoom_range: (0.8, 1.2),
            scanner_bed: true,
            bed_hu: 300.0,
        }
    }
}

const AIR_HU: f32 = -1000.0;

#[inline]
fn ellipse_radius(dx: f32, dy: f32, axes: (f32, f32)) -> f32 {
    ((dx / axes.0).powi(2) + (dy / axes.1).powi(2)).sqrt()
}

impl PhantomSpec {
    /// Spec scaled for a different image size (all lengths scale linearly).
    pub fn scaled_to(image_size: usize) -> Self {
        let base = Self::default();
        let f = image_size as f32 / base.image_size as f32;
        let s2 = |(a, b): (f32, f32)| (a * f, b * f);
        Self {
            image_size,
            body_axes: s2(base.body_axes),
            lung_axes: s2(base.lung_axes),
            lung_offsets: [s2(base.lung_offsets[0]), s2(base.lung_offsets[1])],
            rib_thickness: base.rib_thickness * f,
            rib_inset: base.rib_inset * f,
            ..base
        }
    }

    fn rib_outer_axes(&self) -> (f32, f32) {
        (self.body_axes.0 - self.rib_inset, self.body_axes.1 - self.rib_inset)
    }

    fn rib_inner_axes(&self) -> (f32, f32) {
        let (a, b) = self.rib_outer_axes();
        (a - self.rib_thickness, b - self.rib_thickness)
    }

    pub fn has_lungs(&self) -> bool {
        self.lung_axes.0 > 0.0 && self.lung_axes.1 > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Spec(msg));
        if self.image_size < 16 {
            return bad(format!("image_size {} < 16", self.image_size));
        }
        let (zmin, zmax) = self.zoom_range;
        if !(zmin > 0.0 && zmin <= zmax) {
            return bad(format!("zoom_range {:?} must satisfy 0 < min <= max", self.zoom_range));
        }
        if !(0.0..=1.0).contains(&self.pathology_band_fraction) {
            return bad(format!(
                "pathology_band_fraction {} outside [0, 1]",
                self.pathology_band_fraction
            ));
        }
        if self.texture_noise_std < 0.0 || !self.texture_noise_std.is_finite() {
            return bad("texture_noise_std must be >= 0".into());
        }
        for (name, v) in [
            ("rib_hu", self.rib_hu),
            ("body_hu", self.body_hu),
            ("lung_hu", self.lung_hu),
            ("pathology_hu", self.pathology_hu),
            ("bed_hu", self.bed_hu),
        ] {
            if !(HU_MIN..=HU_MAX).contains(&v) {
                return bad(format!("{name} = {v} outside the HU range"));
            }
        }
        if self.rib_count < 4 || !self.rib_count.is_multiple_of(4) {
            return bad(format!("rib_count {} must be a positive multiple of 4", self.rib_count));
        }
        if !(self.rib_arc_degrees > 0.0 && self.rib_arc_degrees <= 360.0 / self.rib_count as f32) {
            return bad(format!(
                "rib_arc_degrees {} must be in (0, 360/rib_count]",
                self.rib_arc_degrees
            ));
        }
        if self.rib_thickness <= 0.0 || self.rib_inset < 0.0 {
            return bad("rib_thickness must be > 0 and rib_inset >= 0".into());
        }
        let (ia, ib) = self.rib_inner_axes();
        if ia <= 0.0 || ib <= 0.0 {
            return bad("rib ring does not fit inside the body".into());
        }
        let half = self.image_size as f32 / 2.0;
        let bed_extent = if self.scanner_bed {
            (BED_GAP + BED_THICKNESS) * self.body_axes.1
        } else {
            0.0
        };
        if self.body_axes.0 * zmax >= half - 1.0 || (self.body_axes.1 + bed_extent) * zmax >= half - 1.0 {
            return bad("body (and bed) must fit in the frame at the largest zoom".into());
        }
        if self.has_lungs() {
            for &(oy, ox) in &self.lung_offsets {
                for k in 0..720 {
                    let t = k as f32 * std::f32::consts::PI / 360.0;
                    let x = ox + self.lung_axes.0 * t.cos();
                    let y = oy + self.lung_axes.1 * t.sin();
                    if ellipse_radius(x, y, (ia, ib)) >= 1.0 {
                        return bad("lungs must lie inside the rib ring".into());
                    }
                }
            }
        } else if self.lung_axes != (0.0, 0.0) {
            return bad(format!(
                "lung_axes {:?} must be both positive or both zero",
                self.lung_axes
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub image: Image2D,
    pub lung_mask: BinaryMask,
    /// Empty for healthy samples.
    pub pathology_mask: BinaryMask,
    pub body_mask: BinaryMask,
    pub rib_mask: BinaryMask,
    /// Tight bounding box of `rib_mask`.
    pub rib_box: RibCageBox,
    pub domain: Domain,
    pub zoom: f32,
    pub patient_id: String,
    pub slice_id: String,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Air,
    Bed,
    Body,
    Rib,
    Lung,
    Pathology,
}

/// Generates one slice. The zoom factor is drawn uniformly from
/// `spec.zoom_range`; noise and zoom are drawn identically for both domains,
/// so two samples sharing `(spec, seed)` differ only on the pathology mask.
pub fn generate_sample(spec: &PhantomSpec, domain: Domain, seed: u64) -> Result<PhantomSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (zmin, zmax) = spec.zoom_range;
    let zoom = if zmax > zmin { rng.gen_range(zmin..=zmax) } else { zmin };
    render(spec, domain, zoom, &mut rng)
}

/// Like [`generate_sample`] with an explicit zoom factor.
pub fn generate_sample_at_zoom(spec: &PhantomSpec, domain: Domain, seed: u64, zoom: f32) -> Result<PhantomSample> {
    spec.validate()?;
    let check = PhantomSpec {
        zoom_range: (zoom, zoom),
        ..spec.clone()
    };
    check.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Keep the stream aligned with generate_sample.
    let _: f32 = rng.gen();
    render(spec, domain, zoom, &mut rng)
}

fn render(spec: &PhantomSpec, domain: Domain, zoom: f32, rng: &mut ChaCha8Rng) -> Result<PhantomSample> {
    let n = spec.image_size;
    let half = n as f32 / 2.0;
    let outer = spec.rib_outer_axes();
    let inner = spec.rib_inner_axes();
    let spacing = 2.0 * std::f32::consts::PI / spec.rib_count as f32;
    let arc_half = spec.rib_arc_degrees.to_radians() / 2.0;
    let band = match domain {
        Domain::Healthy => 0.0,
        Domain::Pathological => spec.pathology_band_fraction,
    };

    let classify = |r: usize, c: usize| -> Tissue {
        let dy = (r as f32 + 0.5 - half) / zoom;
        let dx = (c as f32 + 0.5 - half) / zoom;
        if ellipse_radius(dx, dy, spec.body_axes) > 1.0 {
            let bed_top = spec.body_axes.1 * (1.0 + BED_GAP);
            if spec.scanner_bed
                && dy >= bed_top
                && dy <= bed_top + BED_THICKNESS * spec.body_axes.1
                && dx.abs() <= spec.body_axes.0 * 1.1
            {
                return Tissue::Bed;
            }
            return Tissue::Air;
        }
        if ellipse_radius(dx, dy, outer) <= 1.0 && ellipse_radius(dx, dy, inner) > 1.0 {
            // Angle measured in the normalized ring frame.
            let theta = (dy / outer.1)
                .atan2(dx / outer.0)
                .rem_euclid(2.0 * std::f32::consts::PI);
            let nearest = (theta / spacing).round() * spacing;
            if (theta - nearest).abs() <= arc_half {
                return Tissue::Rib;
            }
        }
        if spec.has_lungs() {
            for &(oy, ox) in &spec.lung_offsets {
                let rho = ellipse_radius(dx - ox, dy - oy, spec.lung_axes);
                if rho <= 1.0 {
                    let sick = band >= 1.0 || (band > 0.0 && rho > 1.0 - band);
                    return if sick { Tissue::Pathology } else { Tissue::Lung };
                }
            }
        }
        Tissue::Body
    };

    let noise = if spec.texture_noise_std > 0.0 {
        Some(Normal::new(0.0f32, spec.texture_noise_std).map_err(|e| Error::Spec(e.to_string()))?)
    } else {
        None
    };
    let mut values = Vec::with_capacity(n * n);
    let mut lung = Vec::with_capacity(n * n);
    let mut pathology = Vec::with_capacity(n * n);
    let mut body = Vec::with_capacity(n * n);
    let mut ribs = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let t = classify(r, c);
            let base = match t {
                Tissue::Air => AIR_HU,
                Tissue::Bed => spec.bed_hu,
                Tissue::Body => spec.body_hu,
                Tissue::Rib => spec.rib_hu,
                Tissue::Lung => spec.lung_hu,
                Tissue::Pathology => spec.pathology_hu,
            };
            // Always draw so the stream does not depend on the tissue layout.
            let eps = noise.map_or(0.0, |d| d.sample(rng));
            // Integer HU keeps PNG round trips lossless.
            values.push((base + eps).round().clamp(HU_MIN, HU_MAX));
            lung.push(matches!(t, Tissue::Lung | Tissue::Pathology));
            pathology.push(t == Tissue::Pathology);
            body.push(!matches!(t, Tissue::Air | Tissue::Bed));
            ribs.push(t == Tissue::Rib);
        }
    }
    let rib_mask = BinaryMask::new(n, n, ribs)?;
    let rib_box = compute_bounding_box(&rib_mask, 0)?;
    Ok(PhantomSample {
        image: Image2D::new(n, n, values, ValueDomain::Hu)?,
        lung_mask: BinaryMask::new(n, n, lung)?,
        pathology_mask: BinaryMask::new(n, n, pathology)?,
        body_mask: BinaryMask::new(n, n, body)?,
        rib_mask,
        rib_box,
        domain,
        zoom,
        patient_id: String::new(),
        slice_id: String::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 || self.train < 0.0 || self.val < 0.0 || self.test < 0.0 {
            return Err(Error::param(
                "split",
                format!("fractions must be >= 0 and sum to 1, got {sum}"),
            ));
        }
        Ok(())
    }

    /// Patient counts per split; every split must receive at least one patient.
    pub fn patient_counts(&self, n_patients: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let train = (self.train * n_patients as f64).round() as usize;
        let val = (self.val * n_patients as f64).round() as usize;
        let counts = (train, val, n_patients.saturating_sub(train + val));
        if counts.0 == 0 || counts.1 == 0 || counts.2 == 0 || train + val > n_patients {
            return Err(Error::DatasetSize(format!(
                "{n_patients} patients cannot fill train/val/test splits ({counts:?})"
            )));
        }
        Ok(counts)
    }
}

/// Fraction of slices per patient without lung tissue.
pub const NON_LUNG_SLICE_FRACTION: f64 = 0.05;

pub fn non_lung_slice_count(slices_per_patient: usize) -> usize {
    (slices_per_patient as f64 * NON_LUNG_SLICE_FRACTION).round() as usize
}

#[derive(Debug, Clone)]
pub struct DatasetSlice {
    pub split: Split,
    pub sample: PhantomSample,
}

#[derive(Debug, Clone)]
pub struct PhantomDataset {
    pub domain: Domain,
    pub slices: Vec<DatasetSlice>,
}

impl PhantomDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &PhantomSample> {
        self.slices.iter().filter(move |s| s.split == split).map(|s| &s.sample)
    }

    pub fn patients(&self, split: Split) -> Vec<String> {
        let mut ids: Vec<String> = self.split(split).map(|s| s.patient_id.clone()).collect();
        ids.dedup();
        ids
    }
}

/// Options for [`generate_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub domain: Domain,
    pub n_patients: usize,
    pub slices_per_patient: usize,
    pub split: SplitFractions,
    /// Patient-level jitter of the band fraction (pathological domain only).
    pub band_jitter: f32,
    pub id_prefix: Option<String>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            domain: Domain::Healthy,
            n_patients: 10,
            slices_per_patient: 20,
            split: SplitFractions::default(),
            band_jitter: 0.1,
            id_prefix: None,
        }
    }
}

impl DatasetConfig {
    fn prefix(&self) -> String {
        self.id_prefix.clone().unwrap_or_else(|| match self.domain {
            Domain::Healthy => "H".into(),
            Domain::Pathological => "P".into(),
        })
    }
}

/// Per-patient anatomy; draws depend only on `(seed, patient_id)`.
fn patient_spec(base: &PhantomSpec, cfg: &DatasetConfig, seed: u64, patient_id: &str) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[patient_id, "anatomy"]));
    let body_scale: f32 = rng.gen_range(0.95..=1.02);
    let lung_scale: f32 = rng.gen_range(0.9..=1.0);
    let band_shift: f32 = rng.gen_range(-1.0..=1.0) * cfg.band_jitter;
    let s2 = |(a, b): (f32, f32), f: f32| (a * f, b * f);
    PhantomSpec {
        body_axes: s2(base.body_axes, body_scale),
        lung_axes: s2(base.lung_axes, lung_scale * body_scale),
        lung_offsets: [
            s2(base.lung_offsets[0], body_scale),
            s2(base.lung_offsets[1], body_scale),
        ],
        rib_thickness: base.rib_thickness * body_scale,
        pathology_band_fraction: (base.pathology_band_fraction + band_shift).clamp(0.0, 1.0),
        ..base.clone()
    }
}

/// Lung size along the craniocaudal axis: small near the apex and base.
fn slice_lung_scale(index: usize, n_lung: usize) -> f32 {
    let t = (index as f32 + 0.5) / n_lung as f32;
    0.7 + 0.3 * (std::f32::consts::PI * t).sin()
}

/// Generates a patient-split dataset. Each slice's randomness depends only on
/// `(seed, patient_id, slice_id)`, so parallel generation is order-independent.
pub fn generate_dataset(spec: &PhantomSpec, cfg: &DatasetConfig, seed: u64) -> Result<PhantomDataset> {
    spec.validate()?;
    let (n_train, n_val, _) = cfg.split.patient_counts(cfg.n_patients)?;
    if cfg.slices_per_patient == 0 {
        return Err(Error::DatasetSize("slices_per_patient must be >= 1".into()));
    }
    let prefix = cfg.prefix();
    let mut order: Vec<usize> = (0..cfg.n_patients).collect();
    rand::seq::SliceRandom::shuffle(
        order.as_mut_slice(),
        &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[&prefix, "split"])),
    );
    let mut split_of = vec![Split::Test; cfg.n_patients];
    for (rank, &p) in order.iter().enumerate() {
        split_of[p] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let n_slices = cfg.slices_per_patient;
    let n_empty = non_lung_slice_count(n_slices).min(n_slices);
    let n_lung = n_slices - n_empty;
    // Non-lung slices sit below and above the lungs.
    let below = n_empty / 2;

    let mut jobs = Vec::with_capacity(cfg.n_patients * n_slices);
    for p in 0..cfg.n_patients {
        let patient_id = format!("{prefix}{p:03}");
        let pspec = patient_spec(spec, cfg, seed, &patient_id);
        for s in 0..n_slices {
            let slice_id = format!("s{s:03}");
            let mut sspec = pspec.clone();
            if s < below || s >= below + n_lung {
                sspec.lung_axes = (0.0, 0.0);
            } else {
                let f = slice_lung_scale(s - below, n_lung);
                sspec.lung_axes = (pspec.lung_axes.0 * f, pspec.lung_axes.1 * f);
            }
            jobs.push((split_of[p], patient_id.clone(), slice_id, sspec));
        }
    }

    let make = |(split, patient_id, slice_id, sspec): &(Split, String, String, PhantomSpec)| -> Result<DatasetSlice> {
        let sample_seed = derive_seed(seed, &[patient_id, slice_id]);
        let mut sample = generate_sample(sspec, cfg.domain, sample_seed)?;
        sample.patient_id = patient_id.clone();
        sample.slice_id = slice_id.clone();
        Ok(DatasetSlice { split: *split, sample })
    };
    #[cfg(feature = "parallel")]
    let slices: Result<Vec<_>> = {
        use rayon::prelude::*;
        jobs.par_iter().map(make).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let slices: Result<Vec<_>> = jobs.iter().map(make).collect();
    Ok(PhantomDataset {
        domain: cfg.domain,
        slices: slices?,
    })
}
