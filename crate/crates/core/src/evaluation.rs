//! Dice metrics, per-patient aggregation and report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, Image2D};
use crate::preprocess::PreparedSlice;
use crate::segmentation::{predict_mask, UNet};

/// `2|P∩T| / (|P| + |T|)`; two empty masks score 1.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.ensure_same_dims(gt.dims(), "dice")?;
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.values().iter().zip(gt.values()) {
        inter += (a && b) as usize;
        p += a as usize;
        t += b as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

/// Percentage of lung area covered by pathology; 0 for an empty lung.
pub fn pathology_amount(pathology: &BinaryMask, lung: &BinaryMask) -> Result<f64> {
    pathology.ensure_same_dims(lung.dims(), "pathology amount")?;
    if !pathology.is_subset_of(lung) {
        return Err(Error::Precondition(
            "pathology mask must lie inside the lung mask".into(),
        ));
    }
    let l = lung.count();
    Ok(if l == 0 {
        0.0
    } else {
        100.0 * pathology.count() as f64 / l as f64
    })
}

/// Anything mapping a preprocessed slice to a lung mask.
pub trait Segmenter {
    fn segment(&self, img: &Image2D) -> Result<BinaryMask>;
}

/// A U-Net with its binarization threshold.
pub struct ThresholdedUNet<'a> {
    pub model: &'a UNet,
    pub threshold: f32,
}

impl Segmenter for ThresholdedUNet<'_> {
    fn segment(&self, img: &Image2D) -> Result<BinaryMask> {
        predict_mask(img, self.model, self.threshold)
    }
}

impl<F: Fn(&Image2D) -> Result<BinaryMask>> Segmenter for F {
    fn segment(&self, img: &Image2D) -> Result<BinaryMask> {
        self(img)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceResult {
    pub dataset: String,
    pub patient_id: String,
    pub model: String,
    pub n_slices: usize,
    pub pathology_amount_pct: f64,
    pub mean_dice: f64,
}

/// Per-patient mean of per-slice Dice, ordered by patient id.
pub fn evaluate_model(model: &dyn Segmenter, test: &[PreparedSlice]) -> Result<Vec<DiceResult>> {
    evaluate_named(model, test, "", "")
}

fn evaluate_named(model: &dyn Segmenter, test: &[PreparedSlice], dataset: &str, name: &str) -> Result<Vec<DiceResult>> {
    // patient -> (dice sum, slices, pathology px, lung px)
    let mut acc: BTreeMap<&str, (f64, usize, usize, usize)> = BTreeMap::new();
    for s in test {
        let pred = model.segment(&s.image)?;
        let d = dice(&pred, &s.lung_mask)?;
        // validates pathology ⊆ lung
        pathology_amount(&s.pathology_mask, &s.lung_mask)?;
        let e = acc.entry(s.patient_id.as_str()).or_default();
        e.0 += d;
        e.1 += 1;
        e.2 += s.pathology_mask.count();
        e.3 += s.lung_mask.count();
    }
    Ok(acc
        .into_iter()
        .map(|(pid, (sum, n, path, lung))| DiceResult {
            dataset: dataset.to_string(),
            patient_id: pid.to_string(),
            model: name.to_string(),
            n_slices: n,
            pathology_amount_pct: if lung == 0 {
                0.0
            } else {
                100.0 * path as f64 / lung as f64
            },
            mean_dice: sum / n as f64,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub model: String,
    pub n_patients: usize,
    pub mean_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub rows: Vec<DiceResult>,
    pub summary: Vec<SummaryRow>,
}

/// Evaluates every model on every dataset. Rows are ordered by dataset,
/// then patient id, then model (in the given order).
pub fn compare_models(models: &[(&str, &dyn Segmenter)], datasets: &[(&str, &[PreparedSlice])]) -> Result<ReportTable> {
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &(ds, slices) in datasets {
        let mut per_model = Vec::new();
        for &(name, model) in models {
            let r = evaluate_named(model, slices, ds, name)?;
            let n = r.len();
            summary.push(SummaryRow {
                dataset: ds.to_string(),
                model: name.to_string(),
                n_patients: n,
                mean_dice: if n == 0 {
                    0.0
                } else {
                    r.iter().map(|x| x.mean_dice).sum::<f64>() / n as f64
                },
            });
            per_model.push(r);
        }
        let n_patients = per_model.first().map_or(0, Vec::len);
        for i in 0..n_patients {
            for r in &per_model {
                rows.push(r[i].clone());
            }
        }
    }
    Ok(ReportTable { rows, summary })
}

impl ReportTable {
    pub fn summary_for(&self, dataset: &str, model: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.dataset == dataset && s.model == model)
            .map(|s| s.mean_dice)
    }

    /// One row per (dataset, patient) with a Dice column per model.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let models = self.models();
        let mut keyed: Vec<(&DiceResult, Vec<Option<f64>>)> = Vec::new();
        for r in &self.rows {
            let slot = match keyed
                .iter()
                .position(|(k, _)| k.dataset == r.dataset && k.patient_id == r.patient_id)
            {
                Some(i) => i,
                None => {
                    keyed.push((r, vec![None; models.len()]));
                    keyed.len() - 1
                }
            };
            let m = models
                .iter()
                .position(|m| *m == r.model)
                .expect("row model appears in summary");
            keyed[slot].1[m] = Some(r.mean_dice);
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["dataset", "patient_id", "n_slices", "pathology_amount_pct"];
        header.extend(&models);
        w.write_record(&header)?;
        for (k, dices) in keyed {
            let mut rec = vec![
                k.dataset.clone(),
                k.patient_id.clone(),
                k.n_slices.to_string(),
                format!("{:.2}", k.pathology_amount_pct),
            ];
            rec.extend(dices.iter().map(|d| d.map_or_else(String::new, |d| format!("{d:.6}"))));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    fn models(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for s in &self.summary {
            if !out.contains(&s.model.as_str()) {
                out.push(&s.model);
            }
        }
        out
    }

    fn datasets(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for s in &self.summary {
            if !out.contains(&s.dataset.as_str()) {
                out.push(&s.dataset);
            }
        }
        out
    }

    /// Summary table (datasets × models, Dice in percent) followed by one
    /// per-patient table per dataset.
    pub fn to_markdown(&self) -> String {
        let models = self.models();
        let mut md = String::from("## Mean Dice (%)\n\n| Dataset |");
        for m in &models {
            let _ = write!(md, " {m} |");
        }
        md.push_str("\n|---|");
        md.push_str(&"---:|".repeat(models.len()));
        md.push('\n');
        for ds in self.datasets() {
            let _ = write!(md, "| {ds} |");
            for m in &models {
                match self.summary_for(ds, m) {
                    Some(v) => {
                        let _ = write!(md, " {:.2} |", 100.0 * v);
                    }
                    None => md.push_str(" - |"),
                }
            }
            md.push('\n');
        }
        for ds in self.datasets() {
            let _ = write!(
                md,
                "\n## {ds}: per-patient Dice (%)\n\n| Patient | Slices | Pathology amount % |"
            );
            for m in &models {
                let _ = write!(md, " {m} |");
            }
            md.push_str("\n|---|---:|---:|");
            md.push_str(&"---:|".repeat(models.len()));
            md.push('\n');
            let mut patients: Vec<&str> = Vec::new();
            for r in self.rows.iter().filter(|r| r.dataset == ds) {
                if !patients.contains(&r.patient_id.as_str()) {
                    patients.push(&r.patient_id);
                }
            }
            for p in patients {
                let rs: Vec<&DiceResult> = self
                    .rows
                    .iter()
                    .filter(|r| r.dataset == ds && r.patient_id == p)
                    .collect();
                let _ = write!(md, "| {p} | {} | {:.2} |", rs[0].n_slices, rs[0].pathology_amount_pct);
                for m in &models {
                    match rs.iter().find(|r| r.model == *m) {
                        Some(r) => {
                            let _ = write!(md, " {:.2} |", 100.0 * r.mean_dice);
                        }
                        None => md.push_str(" - |"),
                    }
                }
                md.push('\n');
            }
        }
        md
    }

    pub fn write_markdown(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_markdown())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cropping::RibCageBox;
    use crate::imaging::ValueDomain;
    use proptest::prelude::*;

    fn mask(bits: &[u8], w: usize) -> BinaryMask {
        BinaryMask::new(bits.len() / w, w, bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask(&[1, 1, 0, 0], 2);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &mask(&[0, 0, 1, 1], 2)).unwrap(), 0.0);
        assert_eq!(dice(&BinaryMask::empty(2, 2), &BinaryMask::empty(2, 2)).unwrap(), 1.0);
        // |P| = 4, |T| = 6, |P∩T| = 3 on a 4×4 grid.
        let p = mask(&[1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0], 4);
        let t = mask(&[0, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0], 4);
        let (np, nt) = (p.count(), t.count());
        let ni = p.and(&t).unwrap().count();
        assert_eq!((np, nt, ni), (4, 6, 3));
        assert!((dice(&p, &t).unwrap() - 0.6).abs() < 1e-15);
        assert!(dice(&p, &BinaryMask::empty(3, 3)).is_err());
    }

    #[test]
    fn pathology_amount_examples() {
        let lung = BinaryMask::from_fn(8, 5, |_, _| true);
        assert_eq!(pathology_amount(&BinaryMask::empty(8, 5), &lung).unwrap(), 0.0);
        assert_eq!(pathology_amount(&lung, &lung).unwrap(), 100.0);
        let path = BinaryMask::from_fn(8, 5, |r, _| r < 2);
        assert_eq!(path.count(), 10);
        assert_eq!(pathology_amount(&path, &lung).unwrap(), 25.0);
        assert_eq!(
            pathology_amount(&BinaryMask::empty(2, 2), &BinaryMask::empty(2, 2)).unwrap(),
            0.0
        );
        let outside = BinaryMask::from_fn(2, 2, |r, c| r == c);
        assert!(pathology_amount(&outside, &BinaryMask::empty(2, 2)).is_err());
    }

    proptest! {
        #[test]
        fn dice_symmetric_and_permutation_invariant(
            a in proptest::collection::vec(any::<bool>(), 16 * 16),
            b in proptest::collection::vec(any::<bool>(), 16 * 16),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let ma = BinaryMask::new(16, 16, a.clone()).unwrap();
            let mb = BinaryMask::new(16, 16, b.clone()).unwrap();
            let d = dice(&ma, &mb).unwrap();
            prop_assert_eq!(d, dice(&mb, &ma).unwrap());
            let mut perm: Vec<usize> = (0..256).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let pa = BinaryMask::new(16, 16, perm.iter().map(|&i| a[i]).collect()).unwrap();
            let pb = BinaryMask::new(16, 16, perm.iter().map(|&i| b[i]).collect()).unwrap();
            prop_assert_eq!(d, dice(&pa, &pb).unwrap());
            // set-cardinality oracle
            let sa: std::collections::HashSet<usize> = (0..256).filter(|&i| a[i]).collect();
            let sb: std::collections::HashSet<usize> = (0..256).filter(|&i| b[i]).collect();
            let want = if sa.is_empty() && sb.is_empty() { 1.0 } else {
                2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
            };
            prop_assert_eq!(d, want);
        }
    }

    fn slice(patient: &str, gt: BinaryMask) -> PreparedSlice {
        let (h, w) = gt.dims();
        PreparedSlice {
            image: Image2D::new(
                h,
                w,
                gt.values().iter().map(|&v| v as u8 as f32).collect(),
                ValueDomain::ZScored,
            )
            .unwrap(),
            pathology_mask: BinaryMask::empty(h, w),
            lung_mask: gt,
            rib_box: RibCageBox {
                row_min: 0,
                row_max: h - 1,
                col_min: 0,
                col_max: w - 1,
            },
            patient_id: patient.into(),
            slice_id: "0".into(),
        }
    }

    fn perfect(img: &Image2D) -> Result<BinaryMask> {
        BinaryMask::new(
            img.height(),
            img.width(),
            img.values().iter().map(|&v| v > 0.5).collect(),
        )
    }

    #[test]
    fn per_patient_means() {
        // Slice 1: pred = gt → 1.0. Slice 2: pred covers 2 of 3 gt pixels
        // plus 0 extra → 2·2/(2+3) = 0.8.
        let s1 = slice("B", mask(&[1, 1, 0, 0], 2));
        let s2 = slice("B", mask(&[1, 1, 1, 0], 2));
        let model = |img: &Image2D| -> Result<BinaryMask> {
            let m = perfect(img)?;
            if m.count() == 3 {
                return Ok(mask(&[1, 1, 0, 0], 2));
            }
            Ok(m)
        };
        let s3 = slice("A", BinaryMask::empty(2, 2));
        let r = evaluate_model(&model, &[s1, s2, s3]).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].patient_id, "A");
        assert_eq!(r[0].mean_dice, 1.0);
        assert!((r[1].mean_dice - 0.9).abs() < 1e-12);
        assert_eq!(r[1].n_slices, 2);
    }

    #[test]
    fn report_summary_and_files() {
        let data = vec![slice("P1", mask(&[1, 0, 0, 1], 2)), slice("P0", mask(&[1, 1, 0, 0], 2))];
        let empty = |img: &Image2D| -> Result<BinaryMask> { Ok(BinaryMask::empty(img.height(), img.width())) };
        let one = compare_models(&[("perfect", &perfect)], &[("phantom", &data[..1])]).unwrap();
        assert_eq!(one.rows.len(), 1);
        assert_eq!(one.summary[0].mean_dice, one.rows[0].mean_dice);

        let t = compare_models(&[("perfect", &perfect), ("empty", &empty)], &[("phantom", &data)]).unwrap();
        assert_eq!(t.rows.len(), 4);
        assert_eq!(t.rows[0].patient_id, "P0");
        for s in &t.summary {
            let rows: Vec<f64> = t
                .rows
                .iter()
                .filter(|r| r.model == s.model)
                .map(|r| r.mean_dice)
                .collect();
            let mean = rows.iter().sum::<f64>() / rows.len() as f64;
            assert!((mean - s.mean_dice).abs() < 1e-9);
        }
        let dir = tempfile::tempdir().unwrap();
        t.write_csv(&dir.path().join("report.csv")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert!(csv.starts_with("dataset,patient_id,n_slices,pathology_amount_pct,perfect,empty\n"));
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("phantom,P0,1,0.00,1.000000,0.000000"));
        let md = t.to_markdown();
        assert!(md.contains("| phantom | 100.00 | 0.00 |"));
    }
}
