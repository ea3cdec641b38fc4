//! Desk-scale phantom experiments: dataset builders shared by the CLI and
//! the acceptance suite.

use serde::{Deserialize, Serialize};

use crate::cyclegan::MaskedSlice;
use crate::error::Result;
use crate::imaging::Image2D;
use crate::phantom::{generate_dataset, generate_sample, DatasetConfig, Domain, PhantomSpec, Split};
use crate::preprocess::{preprocess_sample, PreparedSlice, PreprocessConfig};
use crate::seed::derive_seed_n;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Unpaired translation data: healthy slices with masks, pathological
/// slices without, and a held-out healthy test set.
#[derive(Debug, Clone)]
pub struct GanData {
    pub healthy: Vec<MaskedSlice>,
    pub pathological: Vec<Image2D>,
    pub test: Vec<MaskedSlice>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanDataConfig {
    pub n_healthy: usize,
    pub n_pathological: usize,
    pub n_test: usize,
}

impl Default for GanDataConfig {
    fn default() -> Self {
        Self {
            n_healthy: 100,
            n_pathological: 100,
            n_test: 50,
        }
    }
}

fn prepared(
    spec: &PhantomSpec,
    pre: &PreprocessConfig,
    domain: Domain,
    seed: u64,
    label: &str,
    n: usize,
) -> Result<Vec<PreparedSlice>> {
    let one = |i: usize| {
        preprocess_sample(
            &generate_sample(spec, domain, derive_seed_n(seed, label, i as u64))?,
            pre,
        )
    };
    #[cfg(feature = "parallel")]
    let out = (0..n).into_par_iter().map(one).collect();
    #[cfg(not(feature = "parallel"))]
    let out = (0..n).map(one).collect();
    out
}

fn masked(p: PreparedSlice) -> MaskedSlice {
    MaskedSlice {
        image: p.image,
        lung_mask: p.lung_mask,
    }
}

/// Independent single-slice phantoms (random zoom each), cropped and normalized.
pub fn gan_data(spec: &PhantomSpec, pre: &PreprocessConfig, cfg: &GanDataConfig, seed: u64) -> Result<GanData> {
    Ok(GanData {
        healthy: prepared(spec, pre, Domain::Healthy, seed, "gan-healthy", cfg.n_healthy)?
            .into_iter()
            .map(masked)
            .collect(),
        pathological: prepared(
            spec,
            pre,
            Domain::Pathological,
            seed,
            "gan-pathological",
            cfg.n_pathological,
        )?
        .into_iter()
        .map(|p| p.image)
        .collect(),
        test: prepared(spec, pre, Domain::Healthy, seed, "gan-test", cfg.n_test)?
            .into_iter()
            .map(masked)
            .collect(),
    })
}

/// Patient-structured segmentation data: healthy train/val splits and
/// healthy and pathological test sets.
#[derive(Debug, Clone)]
pub struct SegData {
    pub train: Vec<PreparedSlice>,
    pub val: Vec<PreparedSlice>,
    pub test_healthy: Vec<PreparedSlice>,
    pub test_pathological: Vec<PreparedSlice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegDataConfig {
    pub healthy: DatasetConfig,
    pub pathological: DatasetConfig,
}

impl Default for SegDataConfig {
    fn default() -> Self {
        Self {
            healthy: DatasetConfig::default(),
            pathological: DatasetConfig {
                domain: Domain::Pathological,
                ..DatasetConfig::default()
            },
        }
    }
}

fn prepare_split(
    ds: &crate::phantom::PhantomDataset,
    split: Split,
    pre: &PreprocessConfig,
) -> Result<Vec<PreparedSlice>> {
    ds.split(split).map(|s| preprocess_sample(s, pre)).collect()
}

pub fn seg_data(spec: &PhantomSpec, pre: &PreprocessConfig, cfg: &SegDataConfig, seed: u64) -> Result<SegData> {
    let healthy = generate_dataset(spec, &cfg.healthy, derive_seed_n(seed, "seg-healthy", 0))?;
    let path = generate_dataset(spec, &cfg.pathological, derive_seed_n(seed, "seg-pathological", 0))?;
    let mut test_pathological = prepare_split(&path, Split::Test, pre)?;
    test_pathological.extend(prepare_split(&path, Split::Val, pre)?);
    test_pathological.extend(prepare_split(&path, Split::Train, pre)?);
    Ok(SegData {
        train: prepare_split(&healthy, Split::Train, pre)?,
        val: prepare_split(&healthy, Split::Val, pre)?,
        test_healthy: prepare_split(&healthy, Split::Test, pre)?,
        test_pathological,
    })
}
