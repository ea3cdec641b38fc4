use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const TINY: &str = r#"
seed = 5
[phantom.healthy]
n_patients = 10
slices_per_patient = 3
[phantom.pathological]
n_patients = 10
slices_per_patient = 3
[cyclegan.train]
epochs = 3
[segmentation.train]
epochs = 3
"#;

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Run {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("c.toml"), config).unwrap();
        Run { _dir: dir, root }
    }

    fn out(&self) -> PathBuf {
        self.root.join("out")
    }

    fn cmd(&self, args: &[&str]) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_shapelock"));
        c.current_dir(&self.root)
            .args(["--config", "c.toml", "--out", "out"])
            .args(args)
            .env_remove("SHAPELOCK_NUM_WORKERS");
        c
    }

    fn run(&self, args: &[&str]) -> Output {
        self.cmd(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let o = self.run(args);
        assert!(
            o.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        o
    }

    fn prepared(config: &str) -> Self {
        let r = Run::new(config);
        r.ok(&["phantom-gen"]);
        r.ok(&["crop"]);
        r
    }
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn json(p: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&read(p)).unwrap()
}

#[test]
fn phantom_gen_writes_manifest_and_is_deterministic() {
    let a = Run::new(TINY);
    let b = Run::new(TINY);
    a.ok(&["phantom-gen"]);
    b.ok(&["phantom-gen"]);
    for domain in ["healthy", "pathological"] {
        let ma = a.out().join("phantoms").join(domain).join("manifest.json");
        let mb = b.out().join("phantoms").join(domain).join("manifest.json");
        assert_eq!(std::fs::read(&ma).unwrap(), std::fs::read(&mb).unwrap());
        let m = json(&ma);
        let slices = m["slices"].as_array().unwrap();
        assert_eq!(slices.len(), 30);
        let img = a
            .out()
            .join("phantoms")
            .join(domain)
            .join(slices[0]["image"].as_str().unwrap());
        assert_eq!(
            std::fs::read(&img).unwrap(),
            std::fs::read(
                b.out()
                    .join("phantoms")
                    .join(domain)
                    .join(slices[0]["image"].as_str().unwrap())
            )
            .unwrap()
        );
    }
    let c = Run::new(TINY);
    c.ok(&["phantom-gen", "--seed", "6"]);
    assert_ne!(
        read(a.out().join("phantoms/healthy/manifest.json")),
        read(c.out().join("phantoms/healthy/manifest.json"))
    );
}

#[test]
fn config_errors_exit_2() {
    let r = Run::new(&format!(
        "{TINY}\n[phantom.healthy.split]\ntrain = 0.5\nval = 0.1\ntest = 0.1\n"
    ));
    let o = r.run(&["phantom-gen"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("split"), "{err}");

    let r = Run::new("[phantom]\nbogus = 1\n");
    assert_eq!(r.run(&["phantom-gen"]).status.code(), Some(2));

    let r = Run::new(TINY);
    assert_eq!(
        r.cmd(&["phantom-gen"])
            .env("SHAPELOCK_NUM_WORKERS", "zero")
            .output()
            .unwrap()
            .status
            .code(),
        Some(2)
    );
    assert!(r
        .cmd(&["phantom-gen"])
        .env("SHAPELOCK_NUM_WORKERS", "1")
        .output()
        .unwrap()
        .status
        .success());
    // referenced paths must exist
    assert_eq!(r.run(&["train-unet", "--train", "missing.json"]).status.code(), Some(2));
}

#[test]
fn crop_reports_boxes_and_failures() {
    let r = Run::new(TINY);
    r.ok(&["phantom-gen"]);
    // a slice with no body cannot be cropped
    let m = json(r.out().join("phantoms/healthy/manifest.json"));
    let victim = m["slices"][4]["image"].as_str().unwrap().to_string();
    let air: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_pixel(128, 128, image::Luma([32768 - 1000]));
    air.save(r.out().join("phantoms/healthy").join(&victim)).unwrap();

    let o = r.ok(&["crop"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning: 1 slice"));
    let dir = r.out().join("cropped/healthy");
    let boxes = json(dir.join("boxes.json"));
    let failures = json(dir.join("failures.json"));
    assert_eq!(boxes.as_array().unwrap().len(), 29);
    assert_eq!(failures.as_array().unwrap().len(), 1);
    assert_eq!(failures[0]["slice_id"], m["slices"][4]["slice_id"]);
    let cropped = json(dir.join("manifest.json"));
    assert_eq!(cropped["cropped"], true);
    for s in cropped["slices"].as_array().unwrap() {
        let img = image::open(dir.join(s["image"].as_str().unwrap())).unwrap();
        assert_eq!((img.width(), img.height()), (64, 64));
        assert!(matches!(img.color(), image::ColorType::L16));
        assert!(s["rib_box"].is_object());
    }
    assert_eq!(
        json(r.out().join("cropped/pathological/boxes.json"))
            .as_array()
            .unwrap()
            .len(),
        30
    );
}

#[test]
fn data_errors_exit_3() {
    let r = Run::new(TINY);
    r.ok(&["phantom-gen"]);
    let o = r.run(&["train-unet", "--train", "out/phantoms/healthy/manifest.json"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn diverging_training_exits_4() {
    let r = Run::prepared(&format!(
        "{TINY}\n[segmentation.train.schedule]\nbase_lr = 1e30\nmax_lr = 1e30\n"
    ));
    let o = r.run(&["train-unet"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn translate_writes_panels_and_evaluate_compares_models() {
    let r = Run::prepared(&TINY.replace("epochs = 3", "epochs = 1"));
    r.ok(&["train-cyclegan"]);
    r.ok(&["translate"]);
    let panels: Vec<_> = std::fs::read_dir(r.out().join("translate")).unwrap().collect();
    assert_eq!(panels.len(), 30);
    let p = image::open(panels[0].as_ref().unwrap().path()).unwrap();
    assert_eq!((p.width(), p.height()), (3 * 64, 64));

    // plain HU PNGs at phantom resolution are cropped on the fly
    let o = r.ok(&["translate", "--input", "out/phantoms/pathological/images"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("30 panels"));

    r.ok(&["train-unet"]);
    r.ok(&["train-unet", "--generator", "out/cyclegan/checkpoint.safetensors"]);
    r.ok(&[
        "evaluate",
        "--model",
        "plain=out/unet/checkpoint.safetensors",
        "--model",
        "augmented=out/unet-aug/checkpoint.safetensors",
    ]);
    let csv = read(r.out().join("evaluation/report.csv"));
    let header = csv.lines().next().unwrap();
    assert_eq!(
        header,
        "dataset,patient_id,n_slices,pathology_amount_pct,plain,augmented"
    );
    // 2 healthy test patients + 10 pathological patients
    assert_eq!(csv.lines().count(), 1 + 2 + 10);
    let o = r.ok(&["report"]);
    let md = String::from_utf8_lossy(&o.stdout);
    assert!(md.contains("| Dataset | plain | augmented |"), "{md}");
    assert!(r.out().join("report/report.md").exists());
}

#[test]
fn halted_training_resumes_to_the_same_result() {
    let full = Run::prepared(TINY);
    full.ok(&["train-cyclegan"]);
    full.ok(&["train-unet"]);

    let split = Run::prepared(TINY);
    split.ok(&["train-cyclegan", "--halt-after", "1"]);
    assert_eq!(read(split.out().join("cyclegan/epochs.csv")).lines().count(), 2);
    split.ok(&["train-cyclegan", "--resume"]);
    split.ok(&["train-unet", "--halt-after", "2"]);
    split.ok(&["train-unet", "--resume"]);

    assert_eq!(
        read(full.out().join("cyclegan/epochs.csv")),
        read(split.out().join("cyclegan/epochs.csv"))
    );
    assert_eq!(
        read(full.out().join("unet/history.csv")),
        read(split.out().join("unet/history.csv"))
    );
    assert_eq!(read(full.out().join("unet/history.csv")).lines().count(), 4);
}

#[test]
fn killed_training_resumes_from_last_checkpoint() {
    let cfg = TINY.replace("[segmentation.train]\nepochs = 3", "[segmentation.train]\nepochs = 12");
    let reference = Run::prepared(&cfg);
    reference.ok(&["train-unet"]);

    let r = Run::prepared(&cfg);
    let mut child = r
        .cmd(&["train-unet"])
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let ckpt = r.out().join("unet/checkpoint.safetensors");
    let start = Instant::now();
    while !ckpt.exists() && start.elapsed() < Duration::from_secs(120) {
        std::thread::sleep(Duration::from_millis(20));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(ckpt.exists(), "no checkpoint written before the kill");

    r.ok(&["train-unet", "--resume"]);
    let history = read(r.out().join("unet/history.csv"));
    assert_eq!(history.lines().count(), 13);
    assert_eq!(history, read(reference.out().join("unet/history.csv")));
}
