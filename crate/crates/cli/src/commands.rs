use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use shapelock::checkpoint::Archive;
use shapelock::cropping::{apply_box_to_mask, crop_to_ribcage, RibCageBox};
use shapelock::cyclegan::{self, build_models, GanTrainer, Generator, MaskedSlice};
use shapelock::evaluation::{compare_models, ReportTable, Segmenter, ThresholdedUNet};
use shapelock::io::{self, load_hu_png, DiskSlice, LoadedManifest, Manifest, ManifestEntry};
use shapelock::phantom::{generate_dataset, Domain, Split};
use shapelock::preprocess::{normalize, preprocess_image, PreparedSlice};
use shapelock::seed::derive_seed;
use shapelock::segmentation::{self, load_unet, SegTrainer, UNet};

use crate::config::{NamedPath, PipelineConfig};
use crate::{CliError, Command};

const CHECKPOINT: &str = "checkpoint.safetensors";
/// Z-score range shown as black..white in translation panels.
const PANEL_RANGE: (f32, f32) = (-3.0, 3.0);
const PANEL_DIFF_MAX: f32 = 1.5;

pub fn dispatch(cfg: &PipelineConfig, command: Command, resume: bool) -> Result<(), CliError> {
    match command {
        Command::PhantomGen => phantom_gen(cfg),
        Command::Crop { input } => crop(cfg, input),
        Command::TrainCyclegan {
            healthy,
            pathological,
            halt_after,
        } => train_cyclegan(cfg, healthy, pathological, resume, halt_after),
        Command::Translate { checkpoint, input } => translate(cfg, checkpoint, input),
        Command::TrainUnet {
            train,
            generator,
            name,
            halt_after,
        } => train_unet(cfg, train, generator, name, resume, halt_after),
        Command::Evaluate { models, datasets } => evaluate(cfg, models, datasets),
        Command::Report { input } => report(cfg, input),
    }
}

fn context<T>(r: shapelock::Result<T>, what: &str) -> Result<T, CliError> {
    r.map_err(|e| {
        let mut c = CliError::from(e);
        c.message = format!("{what}: {}", c.message);
        c
    })
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::config(format!("{what} {} does not exist", path.display())))
    }
}

fn phantom_dir(cfg: &PipelineConfig, d: Domain) -> PathBuf {
    cfg.out.join("phantoms").join(d.as_str())
}

fn cropped_manifest(cfg: &PipelineConfig, d: Domain) -> PathBuf {
    cfg.out.join("cropped").join(d.as_str()).join("manifest.json")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn phantom_gen(cfg: &PipelineConfig) -> Result<(), CliError> {
    let p = &cfg.phantom;
    context(p.spec.validate(), "phantom.spec").map_err(as_config)?;
    for (label, ds_cfg, domain) in [
        ("phantom.healthy", &p.healthy, Domain::Healthy),
        ("phantom.pathological", &p.pathological, Domain::Pathological),
    ] {
        let mut ds_cfg = ds_cfg.clone();
        ds_cfg.domain = domain;
        context(ds_cfg.split.validate(), label).map_err(as_config)?;
        let seed = derive_seed(cfg.seed, &["phantom-gen", domain.as_str()]);
        let ds = context(generate_dataset(&p.spec, &ds_cfg, seed), label).map_err(as_config)?;
        let dir = phantom_dir(cfg, domain);
        let m = context(io::write_dataset(&ds, &dir), "writing dataset")?;
        println!(
            "{}: {} slices -> {}",
            domain.as_str(),
            m.slices.len(),
            dir.join("manifest.json").display()
        );
    }
    Ok(())
}

/// Generation failures other than I/O come from the configuration.
fn as_config(mut e: CliError) -> CliError {
    if e.code == crate::EXIT_DATA && !e.message.contains("os error") {
        e.code = crate::EXIT_CONFIG;
    }
    e
}

#[derive(Serialize)]
struct BoxRecord<'a> {
    patient_id: &'a str,
    slice_id: &'a str,
    rib_box: RibCageBox,
}

#[derive(Serialize)]
struct Failure<'a> {
    patient_id: &'a str,
    slice_id: &'a str,
    error: String,
}

fn crop(cfg: &PipelineConfig, inputs: Vec<PathBuf>) -> Result<(), CliError> {
    context(cfg.crop.detect.validate(), "crop").map_err(as_config)?;
    let inputs = if inputs.is_empty() {
        [Domain::Healthy, Domain::Pathological]
            .map(|d| phantom_dir(cfg, d).join("manifest.json"))
            .to_vec()
    } else {
        inputs
    };
    for p in &inputs {
        require(p, "input manifest")?;
    }
    let size = cfg.crop.out_size;
    for path in inputs {
        let loaded = context(Manifest::load(&path), "input")?;
        if loaded.manifest.cropped {
            return Err(CliError::data(format!("{} is already cropped", path.display())));
        }
        let dir = cfg.out.join("cropped").join(loaded.manifest.domain.as_str());
        std::fs::create_dir_all(&dir)?;
        let results: Vec<Result<ManifestEntry, String>> = loaded
            .manifest
            .slices
            .par_iter()
            .map(|entry| -> Result<Result<ManifestEntry, String>, CliError> {
                let s = context(loaded.read(entry), &entry.image)?;
                let cropped = match crop_to_ribcage(&s.image, &cfg.crop.detect, size) {
                    Ok(c) => c,
                    Err(e) => return Ok(Err(e.to_string())),
                };
                let lung = context(apply_box_to_mask(&s.lung_mask, &cropped.rib_box, size), "lung mask")?;
                let path = context(
                    apply_box_to_mask(&s.pathology_mask, &cropped.rib_box, size),
                    "pathology mask",
                )?;
                let out = io::write_cropped_slice(&dir, entry, &cropped.image, &lung, &path, cropped.rib_box);
                Ok(Ok(context(out, "writing cropped slice")?))
            })
            .collect::<Result<_, _>>()?;
        let mut slices = Vec::new();
        let mut failures = Vec::new();
        for (entry, r) in loaded.manifest.slices.iter().zip(results) {
            match r {
                Ok(e) => slices.push(e),
                Err(error) => failures.push(Failure {
                    patient_id: &entry.patient_id,
                    slice_id: &entry.slice_id,
                    error,
                }),
            }
        }
        let boxes: Vec<BoxRecord> = slices
            .iter()
            .map(|e| BoxRecord {
                patient_id: &e.patient_id,
                slice_id: &e.slice_id,
                rib_box: e.rib_box.expect("cropped entries carry a box"),
            })
            .collect();
        write_json(&dir.join("boxes.json"), &boxes)?;
        write_json(&dir.join("failures.json"), &failures)?;
        let n = slices.len();
        let manifest = Manifest {
            domain: loaded.manifest.domain,
            image_size: size,
            cropped: true,
            slices,
        };
        context(manifest.save(&dir.join("manifest.json")), "writing manifest")?;
        if !failures.is_empty() {
            eprintln!(
                "warning: {} slice(s) failed rib detection; see {}",
                failures.len(),
                dir.join("failures.json").display()
            );
        }
        println!(
            "{}: {n} cropped, {} failed -> {}",
            manifest.domain.as_str(),
            failures.len(),
            dir.display()
        );
    }
    Ok(())
}

fn read_slices(loaded: &LoadedManifest, splits: Option<&[Split]>) -> Result<Vec<DiskSlice>, CliError> {
    loaded
        .manifest
        .slices
        .par_iter()
        .filter(|e| splits.is_none_or(|s| s.contains(&e.split)))
        .map(|e| context(loaded.read(e), &e.image))
        .collect()
}

/// Cropped, normalized slices of a manifest.
fn load_prepared(cfg: &PipelineConfig, path: &Path, splits: Option<&[Split]>) -> Result<Vec<PreparedSlice>, CliError> {
    let loaded = context(Manifest::load(path), "manifest")?;
    if !loaded.manifest.cropped {
        return Err(CliError::data(format!(
            "{} is not cropped; run `crop` first",
            path.display()
        )));
    }
    read_slices(&loaded, splits)?
        .par_iter()
        .map(|s| context(io::prepare_cropped(s, &cfg.crop.window), &s.entry.image))
        .collect()
}

fn masked(slices: Vec<PreparedSlice>) -> Vec<MaskedSlice> {
    slices
        .into_iter()
        .filter(|s| !s.lung_mask.is_empty())
        .map(|s| MaskedSlice {
            image: s.image,
            lung_mask: s.lung_mask,
        })
        .collect()
}

fn load_archive(path: &Path, what: &str) -> Result<Archive, CliError> {
    require(path, what)?;
    context(Archive::load(path), what)
}

fn train_cyclegan(
    cfg: &PipelineConfig,
    healthy: Option<PathBuf>,
    pathological: Option<PathBuf>,
    resume: bool,
    halt_after: Option<usize>,
) -> Result<(), CliError> {
    let sec = &cfg.cyclegan;
    context(sec.model.validate(), "cyclegan.model")?;
    context(sec.train.validate(), "cyclegan.train")?;
    let healthy = healthy.unwrap_or_else(|| cropped_manifest(cfg, Domain::Healthy));
    let pathological = pathological.unwrap_or_else(|| cropped_manifest(cfg, Domain::Pathological));
    require(&healthy, "healthy manifest")?;
    require(&pathological, "pathological manifest")?;
    let dir = cfg.out.join("cyclegan");
    std::fs::create_dir_all(&dir)?;
    let ckpt = dir.join(CHECKPOINT);

    let train_x = masked(load_prepared(cfg, &healthy, Some(&[Split::Train]))?);
    let test = masked(load_prepared(cfg, &healthy, Some(&[sec.test_split]))?);
    let train_y: Vec<_> = load_prepared(cfg, &pathological, None)?
        .into_iter()
        .map(|s| s.image)
        .collect();

    let (mut trainer, mut config) = if resume && ckpt.exists() {
        let (t, c) = context(
            GanTrainer::from_archive(&load_archive(&ckpt, "checkpoint")?),
            "checkpoint",
        )?;
        eprintln!("resuming CycleGAN at epoch {}", t.next_epoch);
        (t, c)
    } else {
        let models = context(build_models(&sec.model, cfg.seed), "cyclegan.model")?;
        (GanTrainer::new(models, &sec.train), sec.train)
    };
    config.epochs = sec.train.epochs;
    let mut done = 0;
    let result = cyclegan::train(&train_x, &train_y, &test, &mut trainer, &config, |t| {
        let r = t.reports.last().expect("epoch report");
        eprintln!(
            "epoch {:>3}  G {:.4}  D {:.4}  outside {:.4}  inside {:.4}",
            r.epoch, r.train.total, r.discriminator, r.shape_preservation, r.inside_change
        );
        t.to_archive(&config)?.save(&ckpt)?;
        cyclegan::write_reports_csv(&t.reports, &dir.join("epochs.csv"))?;
        done += 1;
        Ok(halt_after.is_none_or(|h| done < h))
    });
    context(result, "cyclegan")?;
    if trainer.reports.is_empty() {
        context(trainer.to_archive(&config).and_then(|a| a.save(&ckpt)), "checkpoint")?;
    }
    match trainer.best_report() {
        Some(b) => println!(
            "best epoch {}: outside {:.4}, inside {:.4} -> {}",
            b.epoch,
            b.shape_preservation,
            b.inside_change,
            ckpt.display()
        ),
        None => println!("no epoch passed the inside-change floor -> {}", ckpt.display()),
    }
    Ok(())
}

/// The best generator of a CycleGAN checkpoint, or its latest if none qualified.
fn load_generator(path: &Path) -> Result<Generator, CliError> {
    let ar = load_archive(path, "generator checkpoint")?;
    let group = if ar.has_group("best.g") { "best.g" } else { "model.g" };
    context(Generator::from_archive(&ar, group), "generator checkpoint")
}

fn translate(cfg: &PipelineConfig, checkpoint: Option<PathBuf>, input: Option<PathBuf>) -> Result<(), CliError> {
    let checkpoint = checkpoint.unwrap_or_else(|| cfg.out.join("cyclegan").join(CHECKPOINT));
    let input = input.unwrap_or_else(|| cfg.out.join("cropped").join(Domain::Healthy.as_str()));
    require(&input, "input directory")?;
    let g = load_generator(&checkpoint)?;
    let size = g.spec.input_size;
    let pre = cfg.crop.preprocess();
    let prepare = |img: &shapelock::imaging::Image2D| {
        if img.dims() == (size, size) {
            normalize(img, &pre.window)
        } else {
            preprocess_image(img, &shapelock::preprocess::PreprocessConfig { out_size: size, ..pre }).map(|(i, _)| i)
        }
    };
    let mut items: Vec<(String, shapelock::imaging::Image2D)> = Vec::new();
    let manifest = input.join("manifest.json");
    if manifest.exists() {
        let loaded = context(Manifest::load(&manifest), "manifest")?;
        for s in read_slices(&loaded, None)? {
            let name = format!("{}_{}", s.entry.patient_id, s.entry.slice_id);
            items.push((name, s.image));
        }
    } else {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        for f in files {
            let name = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            items.push((name, context(load_hu_png(&f), &f.display().to_string())?));
        }
    }
    if items.is_empty() {
        return Err(CliError::data(format!("no slices found in {}", input.display())));
    }
    let dir = cfg.out.join("translate");
    std::fs::create_dir_all(&dir)?;
    items.par_iter().try_for_each(|(name, img)| -> Result<(), CliError> {
        let x = context(prepare(img), name)?;
        let y = context(g.translate(&x), name)?;
        let panel = context(
            io::render_panel(&x, &y, PANEL_RANGE.0, PANEL_RANGE.1, PANEL_DIFF_MAX),
            name,
        )?;
        panel
            .save(dir.join(format!("{name}.png")))
            .map_err(|e| CliError::data(format!("{name}: {e}")))
    })?;
    println!("{} panels -> {}", items.len(), dir.display());
    Ok(())
}

fn train_unet(
    cfg: &PipelineConfig,
    train: Option<PathBuf>,
    generator: Option<PathBuf>,
    name: Option<String>,
    resume: bool,
    halt_after: Option<usize>,
) -> Result<(), CliError> {
    let sec = &cfg.segmentation;
    context(sec.model.validate(), "segmentation.model")?;
    context(sec.train.validate(), "segmentation.train")?;
    let train = train.unwrap_or_else(|| cropped_manifest(cfg, Domain::Healthy));
    require(&train, "training manifest")?;
    let generator = generator.or_else(|| sec.generator.clone());
    let g = generator.as_deref().map(load_generator).transpose()?;
    let name = name.unwrap_or_else(|| if g.is_some() { "unet-aug".into() } else { "unet".into() });
    let dir = cfg.out.join(&name);
    std::fs::create_dir_all(&dir)?;
    let ckpt = dir.join(CHECKPOINT);

    let train_set = load_prepared(cfg, &train, Some(&[Split::Train]))?;
    let val_set = load_prepared(cfg, &train, Some(&[Split::Val]))?;

    let (mut trainer, mut config) = if resume && ckpt.exists() {
        let (t, c) = context(
            SegTrainer::from_archive(&load_archive(&ckpt, "checkpoint")?),
            "checkpoint",
        )?;
        eprintln!("resuming {name} at epoch {}", t.next_epoch);
        (t, c)
    } else {
        let unet = context(UNet::new(&sec.model, cfg.seed), "segmentation.model")?;
        (SegTrainer::new(unet, &sec.train), sec.train)
    };
    config.epochs = sec.train.epochs;
    let mut done = 0;
    let result = segmentation::train_segmenter(&train_set, &val_set, g.as_ref(), &mut trainer, &config, |t| {
        let h = t.history.last().expect("epoch record");
        eprintln!(
            "epoch {:>3}  loss {:.4}  val dice {:.4}  soft {:.4}  lr {:.4}  aug {:.2}",
            h.epoch, h.train_loss, h.val_dice, h.val_soft_dice, h.lr, h.augmented_fraction
        );
        t.to_archive(&config)?.save(&ckpt)?;
        segmentation::write_history_csv(&t.history, &dir.join("history.csv"))?;
        done += 1;
        Ok(halt_after.is_none_or(|h| done < h))
    });
    context(result, &name)?;
    if trainer.history.is_empty() {
        context(trainer.to_archive(&config).and_then(|a| a.save(&ckpt)), "checkpoint")?;
    }
    println!("{name}: {} epochs -> {}", trainer.next_epoch, ckpt.display());
    Ok(())
}

fn parse_named(items: &[String], what: &str) -> Result<Vec<NamedPath>, CliError> {
    items
        .iter()
        .map(|s| {
            let (name, path) = s
                .split_once('=')
                .filter(|(n, p)| !n.is_empty() && !p.is_empty())
                .ok_or_else(|| CliError::config(format!("--{what} expects name=path, got `{s}`")))?;
            Ok(NamedPath {
                name: name.into(),
                path: path.into(),
            })
        })
        .collect()
}

fn evaluate(cfg: &PipelineConfig, models: Vec<String>, datasets: Vec<String>) -> Result<(), CliError> {
    let sec = &cfg.evaluation;
    let models = match parse_named(&models, "model")? {
        m if m.is_empty() => sec.models.clone(),
        m => m,
    };
    let datasets = match parse_named(&datasets, "dataset")? {
        d if !d.is_empty() => d,
        _ if !sec.datasets.is_empty() => sec.datasets.clone(),
        _ => [Domain::Healthy, Domain::Pathological]
            .map(|d| NamedPath {
                name: d.as_str().into(),
                path: cropped_manifest(cfg, d),
            })
            .to_vec(),
    };
    if models.is_empty() {
        return Err(CliError::config("no models to evaluate; pass --model name=checkpoint"));
    }
    for m in &models {
        require(&m.path, "model checkpoint")?;
    }
    for d in &datasets {
        require(&d.path, "dataset manifest")?;
    }
    let unets: Vec<(String, UNet)> = models
        .iter()
        .map(|m| {
            Ok((
                m.name.clone(),
                context(load_unet(&load_archive(&m.path, "checkpoint")?), &m.name)?,
            ))
        })
        .collect::<Result<_, CliError>>()?;
    let mut data: Vec<(String, Vec<PreparedSlice>)> = Vec::new();
    for d in &datasets {
        let loaded = context(Manifest::load(&d.path), &d.name)?;
        let splits = (loaded.manifest.domain == Domain::Healthy).then_some(sec.healthy_splits.as_slice());
        data.push((d.name.clone(), load_prepared(cfg, &d.path, splits)?));
    }
    let wrapped: Vec<ThresholdedUNet> = unets
        .iter()
        .map(|(_, m)| ThresholdedUNet {
            model: m,
            threshold: sec.threshold,
        })
        .collect();
    let named: Vec<(&str, &dyn Segmenter)> = unets
        .iter()
        .zip(&wrapped)
        .map(|((n, _), w)| (n.as_str(), w as &dyn Segmenter))
        .collect();
    let sets: Vec<(&str, &[PreparedSlice])> = data.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
    let table = context(compare_models(&named, &sets), "evaluation")?;
    let dir = cfg.out.join("evaluation");
    std::fs::create_dir_all(&dir)?;
    write_table(&table, &dir)?;
    write_json(&dir.join("report.json"), &table)?;
    print!("{}", table.to_markdown());
    Ok(())
}

fn write_table(table: &ReportTable, dir: &Path) -> Result<(), CliError> {
    context(table.write_csv(&dir.join("report.csv")), "report.csv")?;
    context(table.write_markdown(&dir.join("report.md")), "report.md")
}

fn report(cfg: &PipelineConfig, inputs: Vec<PathBuf>) -> Result<(), CliError> {
    let inputs = if inputs.is_empty() {
        vec![cfg.out.join("evaluation").join("report.json")]
    } else {
        inputs
    };
    let mut merged = ReportTable {
        rows: Vec::new(),
        summary: Vec::new(),
    };
    for p in &inputs {
        require(p, "evaluation report")?;
        let text = std::fs::read_to_string(p)?;
        let t: ReportTable =
            serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
        merged.rows.extend(t.rows);
        merged.summary.extend(t.summary);
    }
    let dir = cfg.out.join("report");
    std::fs::create_dir_all(&dir)?;
    write_table(&merged, &dir)?;
    print!("{}", merged.to_markdown());
    Ok(())
}
