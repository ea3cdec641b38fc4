//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 2 3`.

use std::process::ExitCode;
use std::time::Instant;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapelock::cropping::crop_stages;
use shapelock::cyclegan::{build_models, train, EpochReport, GanModelSpec, GanTrainConfig, GanTrainer, Generator};
use shapelock::evaluation::{compare_models, dice, Segmenter, ThresholdedUNet};
use shapelock::experiments::{gan_data, seg_data, GanDataConfig, SegData, SegDataConfig};
use shapelock::imaging::{BinaryMask, Image2D, ValueDomain};
use shapelock::losses::{
    adversarial_mse, adversarial_mse_grad, cycle_consistency, dice_focal_grad, l1_grad, surrounding_l1,
    surrounding_l1_grad, total_cyclegan_loss, weighted_total, LossWeights, RegionNormalization,
};
use shapelock::phantom::{generate_sample_at_zoom, Domain, PhantomSpec};
use shapelock::preprocess::PreprocessConfig;
use shapelock::segmentation::{
    cyclic_lr, train_segmenter, CyclicSchedule, SegEpoch, SegTrainConfig, SegTrainer, UNet, UNetSpec,
};

const SEEDS: [u64; 3] = [1, 2, 3];
const GAN_EPOCHS: usize = 20;
const SEG_EPOCHS: usize = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(label: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xACCE_7000 + label)
}

fn random_image(r: &mut ChaCha8Rng, h: usize, w: usize) -> Image2D {
    Image2D::from_fn(h, w, ValueDomain::ZScored, |_, _| r.gen_range(-3.0f32..3.0)).unwrap()
}

fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| r.gen_bool(p))
}

// ---------------------------------------------------------------- 1

fn oracle_surrounding(a: &Image2D, b: &Image2D, m: &BinaryMask) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for r in 0..a.height() {
        for c in 0..a.width() {
            if !m.get(r, c) {
                sum += (a.get(r, c) as f64 - b.get(r, c) as f64).abs();
                n += 1;
            }
        }
    }
    sum / n as f64
}

fn oracle_l1(a: &Image2D, b: &Image2D) -> f64 {
    let mut sum = 0.0;
    for r in 0..a.height() {
        for c in 0..a.width() {
            sum += (a.get(r, c) as f64 - b.get(r, c) as f64).abs();
        }
    }
    sum / (a.height() * a.width()) as f64
}

fn oracle_dice(p: &BinaryMask, t: &BinaryMask) -> f64 {
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for r in 0..p.height() {
        for c in 0..p.width() {
            let (a, b) = (p.get(r, c), t.get(r, c));
            if a && b {
                inter += 1.0;
            }
            if a {
                sp += 1.0;
            }
            if b {
                st += 1.0;
            }
        }
    }
    if sp + st == 0.0 {
        1.0
    } else {
        2.0 * inter / (sp + st)
    }
}

fn criterion_1() -> Outcome {
    let mut r = rng(1);
    let mut worst = [0.0f64; 4];
    for case in 0..1000 {
        let (h, w) = (r.gen_range(8..=16), r.gen_range(8..=16));
        let a = random_image(&mut r, h, w);
        let b = random_image(&mut r, h, w);
        let p_lung = r.gen_range(0.0..0.9);
        let mut m = random_mask(&mut r, h, w, p_lung);
        m.set(0, 0, false);
        worst[0] = worst[0].max((surrounding_l1(&a, &b, &m).unwrap() - oracle_surrounding(&a, &b, &m)).abs());
        worst[1] = worst[1].max((cycle_consistency(&a, &b).unwrap() - oracle_l1(&a, &b)).abs());
        let scores: Vec<f64> = (0..h * w).map(|_| r.gen_range(-1.5..2.5)).collect();
        let real = case % 2 == 0;
        let t = if real { 1.0 } else { 0.0 };
        let mut sq = 0.0;
        for s in &scores {
            sq += (s - t) * (s - t);
        }
        worst[2] = worst[2].max((adversarial_mse(&scores, real) - sq / scores.len() as f64).abs());
        // include sparse and empty masks
        let p = random_mask(&mut r, h, w, [0.0, 0.02, 0.5, 0.9][case % 4]);
        let g = random_mask(&mut r, h, w, [0.0, 0.3, 0.5, 0.05][(case % 4) ^ 1]);
        worst[3] = worst[3].max((dice(&p, &g).unwrap() - oracle_dice(&p, &g)).abs());
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    outcome(
        max <= 1e-6,
        format!(
            "max abs error surrounding {:.1e}, cycle {:.1e}, adversarial {:.1e}, dice {:.1e} (<= 1e-6)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// ---------------------------------------------------------------- 2

/// Largest relative error between an analytic gradient and central differences.
fn grad_error(x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    const H: f64 = 1e-5;
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + H;
        let up = f(&xp);
        xp[i] = x[i] - H;
        let down = f(&xp);
        xp[i] = x[i];
        let numeric = (up - down) / (2.0 * H);
        let scale = analytic[i].abs().max(numeric.abs());
        if scale > 1e-12 {
            worst = worst.max((analytic[i] - numeric).abs() / scale);
        }
    }
    worst
}

/// Values at least `gap` away from `avoid` so L1 kinks stay out of the stencil.
fn away_from(r: &mut ChaCha8Rng, avoid: &[f64], gap: f64) -> Vec<f64> {
    avoid
        .iter()
        .map(|&a| {
            let d = r.gen_range(gap..2.0);
            if r.gen_bool(0.5) {
                a + d
            } else {
                a - d
            }
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let mut r = rng(2);
    let n = 36;
    let mut worst = [0.0f64; 4];
    for case in 0..50 {
        let healthy: Vec<f64> = (0..n).map(|_| r.gen_range(-2.0..2.0)).collect();
        let gen = away_from(&mut r, &healthy, 1e-2);
        let mut mask: Vec<bool> = (0..n).map(|_| r.gen_bool(0.4)).collect();
        mask[case % n] = false;
        let norm = if case % 2 == 0 {
            RegionNormalization::Region
        } else {
            RegionNormalization::AllPixels
        };
        let (_, g) = surrounding_l1_grad(&healthy, &gen, &mask, norm).unwrap();
        worst[0] = worst[0].max(grad_error(&gen, &g, |x| {
            surrounding_l1_grad(&healthy, x, &mask, norm).unwrap().0
        }));

        let (_, g) = l1_grad(&healthy, &gen).unwrap();
        worst[1] = worst[1].max(grad_error(&gen, &g, |x| l1_grad(&healthy, x).unwrap().0));

        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..2.0)).collect();
        let real = case % 2 == 1;
        let (_, g) = adversarial_mse_grad(&scores, real);
        worst[2] = worst[2].max(grad_error(&scores, &g, |x| adversarial_mse_grad(x, real).0));

        let probs: Vec<f64> = (0..n).map(|_| r.gen_range(0.02..0.98)).collect();
        let target: Vec<bool> = (0..n).map(|_| r.gen_bool(0.5)).collect();
        let (_, g) = dice_focal_grad(&probs, &target, 2.0).unwrap();
        worst[3] = worst[3].max(grad_error(&probs, &g, |x| dice_focal_grad(x, &target, 2.0).unwrap().0));
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    outcome(
        max < 1e-4,
        format!(
            "max relative error surrounding {:.1e}, cycle {:.1e}, adversarial {:.1e}, dice-focal {:.1e} (< 1e-4)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let spec = PhantomSpec::default();
    let cfg = shapelock::cropping::CropConfig::default();
    let n = 200;
    let (mut ok, mut within, mut lung_kept, mut failed) = (0, 0, 0, 0);
    let mut worst_err = 0;
    for i in 0..n {
        let zoom = spec.zoom_range.0 + (spec.zoom_range.1 - spec.zoom_range.0) * i as f32 / (n - 1) as f32;
        let domain = if i % 2 == 0 {
            Domain::Healthy
        } else {
            Domain::Pathological
        };
        let s = generate_sample_at_zoom(&spec, domain, 3000 + i as u64, zoom).unwrap();
        let Ok(st) = crop_stages(&s.image, &cfg) else {
            failed += 1;
            continue;
        };
        ok += 1;
        let err = st.rib_box.max_side_error(&s.rib_box);
        worst_err = worst_err.max(err);
        if err <= 2 {
            within += 1;
        }
        let (h, w) = s.lung_mask.dims();
        let all_in = (0..h).all(|r| (0..w).all(|c| !s.lung_mask.get(r, c) || st.rib_box.contains(r, c)));
        if all_in {
            lung_kept += 1;
        }
    }
    let frac = within as f64 / n as f64;
    outcome(
        frac >= 0.95 && lung_kept == ok,
        format!(
            "{within}/{n} boxes within ±2 px ({:.1}%, >= 95%), worst {worst_err} px; lungs fully inside on {lung_kept}/{ok} crops; {failed} failures",
            100.0 * frac
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    let mut linear = true;
    for _ in 0..100 {
        let t: [f64; 5] = std::array::from_fn(|_| r.gen_range(0.0..5.0));
        let w = LossWeights {
            delta: r.gen_range(0.0..20.0),
            lambda: r.gen_range(0.0..5.0),
            gamma_identity: if r.gen_bool(0.3) { 0.0 } else { r.gen_range(0.0..5.0) },
        };
        let b = total_cyclegan_loss(t[0], t[1], t[2], t[3], t[4], &w);
        let expected = t[0] + t[1] + w.delta * t[2] + w.lambda * t[3] + w.gamma_identity * t[4];
        worst = worst.max((b.total - expected).abs() / expected.abs().max(1e-12));

        // exact arithmetic: the total is affine in lambda with slope = surrounding term
        let q = |r: &mut ChaCha8Rng| Ratio::new(r.gen_range(-1000i128..1000), r.gen_range(1i128..300));
        let terms: [Ratio<i128>; 5] = std::array::from_fn(|_| q(&mut r));
        let (delta, gamma, l1, l2) = (q(&mut r), q(&mut r), q(&mut r), q(&mut r));
        let f = |lambda| weighted_total(terms[0], terms[1], terms[2], terms[3], terms[4], delta, lambda, gamma);
        let zero = Ratio::from_integer(0);
        linear &= f(l1 + l2) - f(zero) == (f(l1) - f(zero)) + (f(l2) - f(zero));
        linear &= f(l1) - f(zero) == l1 * terms[3];
        linear &= f(l1 * l2) - f(zero) == l2 * (f(l1) - f(zero));
    }
    outcome(
        worst <= 1e-6 && linear,
        format!(
            "max relative error {worst:.1e} (<= 1e-6); exact lambda linearity {}",
            if linear { "holds" } else { "FAILS" }
        ),
    )
}

// ---------------------------------------------------------------- shared training runs

struct GanRun {
    reports: Vec<EpochReport>,
    best: Option<EpochReport>,
    generator: Generator,
    secs: f64,
}

struct SegRun {
    history: Vec<SegEpoch>,
    healthy: f64,
    pathological: f64,
    secs: f64,
}

fn gan_config(seed: u64, lambda: f64) -> GanTrainConfig {
    GanTrainConfig {
        epochs: GAN_EPOCHS,
        seed,
        weights: LossWeights {
            delta: 10.0,
            lambda,
            gamma_identity: 0.0,
        },
        ..Default::default()
    }
}

fn run_gan(seed: u64, lambda: f64) -> GanRun {
    let t = Instant::now();
    let data = gan_data(
        &PhantomSpec::default(),
        &PreprocessConfig::default(),
        &GanDataConfig::default(),
        seed,
    )
    .unwrap();
    assert_eq!(
        (data.healthy.len(), data.pathological.len(), data.test.len()),
        (100, 100, 50)
    );
    let cfg = gan_config(seed, lambda);
    let mut trainer = GanTrainer::new(build_models(&GanModelSpec::desk(), seed).unwrap(), &cfg);
    train(
        &data.healthy,
        &data.pathological,
        &data.test,
        &mut trainer,
        &cfg,
        |_| Ok(true),
    )
    .unwrap();
    let run = GanRun {
        best: trainer.best_report().copied(),
        generator: trainer.best_generator(),
        reports: trainer.reports.clone(),
        secs: t.elapsed().as_secs_f64(),
    };
    match &run.best {
        Some(b) => eprintln!(
            "  cyclegan seed {seed} lambda {lambda}: best epoch {} outside {:.4} inside {:.4} ratio {:.2} ({:.0} s)",
            b.epoch,
            b.shape_preservation,
            b.inside_change,
            b.change_ratio(),
            run.secs
        ),
        None => eprintln!(
            "  cyclegan seed {seed} lambda {lambda}: no eligible epoch ({:.0} s)",
            run.secs
        ),
    }
    run
}

fn seg_config(seed: u64) -> SegTrainConfig {
    SegTrainConfig {
        epochs: SEG_EPOCHS,
        seed,
        ..Default::default()
    }
}

fn run_seg(data: &SegData, g: Option<&Generator>, seed: u64) -> SegRun {
    let t = Instant::now();
    let cfg = seg_config(seed);
    let mut trainer = SegTrainer::new(UNet::new(&UNetSpec::desk(), seed).unwrap(), &cfg);
    train_segmenter(&data.train, &data.val, g, &mut trainer, &cfg, |_| Ok(true)).unwrap();
    let model = ThresholdedUNet {
        model: trainer.best_model(),
        threshold: cfg.threshold,
    };
    let table = compare_models(
        &[("m", &model as &dyn Segmenter)],
        &[
            ("healthy", &data.test_healthy),
            ("pathological", &data.test_pathological),
        ],
    )
    .unwrap();
    let run = SegRun {
        history: trainer.history.clone(),
        healthy: table.summary_for("healthy", "m").unwrap(),
        pathological: table.summary_for("pathological", "m").unwrap(),
        secs: t.elapsed().as_secs_f64(),
    };
    eprintln!(
        "  unet seed {seed} {}: healthy {:.4} pathological {:.4} ({:.0} s)",
        if g.is_some() { "augmented" } else { "plain" },
        run.healthy,
        run.pathological,
        run.secs
    );
    run
}

fn seg_dataset(seed: u64) -> SegData {
    seg_data(
        &PhantomSpec::default(),
        &PreprocessConfig::default(),
        &SegDataConfig::default(),
        seed,
    )
    .unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[derive(Default)]
struct Runs {
    gan: Vec<GanRun>,
    gan_l0: Vec<GanRun>,
    seg_plain: Vec<SegRun>,
    seg_aug: Vec<SegRun>,
}

impl Runs {
    fn gan(&mut self) -> &[GanRun] {
        if self.gan.is_empty() {
            self.gan = SEEDS.iter().map(|&s| run_gan(s, 1.0)).collect();
        }
        &self.gan
    }

    fn seg(&mut self) {
        if self.seg_plain.is_empty() {
            self.gan();
            for (i, &s) in SEEDS.iter().enumerate() {
                let data = seg_dataset(s);
                self.seg_plain.push(run_seg(&data, None, s));
                self.seg_aug.push(run_seg(&data, Some(&self.gan[i].generator), s));
            }
        }
    }
}

// ---------------------------------------------------------------- 5

fn criterion_5(runs: &mut Runs) -> Outcome {
    let gan = runs.gan();
    let first = &gan[0];
    let ratios: Vec<String> = gan
        .iter()
        .map(|g| g.best.map_or("none".into(), |b| format!("{:.2}", b.change_ratio())))
        .collect();
    let Some(best) = first.best else {
        return outcome(false, "no epoch passed the inside-change floor");
    };
    outcome(
        best.change_ratio() >= 3.0 && first.secs < 15.0 * 60.0,
        format!(
            "seed {} best epoch {}: inside {:.3} / outside {:.3} = {:.2} (>= 3) in {:.0} s; all seeds [{}]",
            SEEDS[0],
            best.epoch,
            best.inside_change,
            best.shape_preservation,
            best.change_ratio(),
            first.secs,
            ratios.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 6

fn outside_change(r: &GanRun) -> f64 {
    r.best.map_or_else(
        || r.reports.last().unwrap().shape_preservation,
        |b| b.shape_preservation,
    )
}

fn criterion_6(runs: &mut Runs) -> Outcome {
    runs.gan();
    if runs.gan_l0.is_empty() {
        runs.gan_l0 = SEEDS.iter().map(|&s| run_gan(s, 0.0)).collect();
    }
    let with: Vec<f64> = runs.gan.iter().map(outside_change).collect();
    let without: Vec<f64> = runs.gan_l0.iter().map(outside_change).collect();
    let (m1, m0) = (median(with.clone()), median(without.clone()));
    outcome(
        m0 > m1,
        format!("median outside change lambda=0 {m0:.4} > lambda=1 {m1:.4}; per seed {without:.3?} vs {with:.3?}"),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7(runs: &mut Runs) -> Outcome {
    runs.seg();
    let gains: Vec<f64> = runs
        .seg_aug
        .iter()
        .zip(&runs.seg_plain)
        .map(|(a, p)| 100.0 * (a.pathological - p.pathological))
        .collect();
    let gain = median(gains.clone());
    let healthy_min = runs
        .seg_aug
        .iter()
        .chain(&runs.seg_plain)
        .map(|r| r.healthy)
        .fold(f64::INFINITY, f64::min);
    let secs: f64 = runs.seg_aug.iter().chain(&runs.seg_plain).map(|r| r.secs).sum();
    let path: Vec<String> = runs
        .seg_plain
        .iter()
        .zip(&runs.seg_aug)
        .map(|(p, a)| format!("{:.3}->{:.3}", p.pathological, a.pathological))
        .collect();
    outcome(
        gain >= 2.0 && healthy_min >= 0.95,
        format!(
            "median pathological gain {gain:.2} Dice points (>= 2), per seed [{}]; min healthy Dice {healthy_min:.4} (>= 0.95); {secs:.0} s",
            path.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8(runs: &mut Runs) -> Outcome {
    let cfg = seg_config(0);
    let data_len = seg_dataset(SEEDS[0]).train.len();
    let schedules = [
        cfg.schedule,
        cfg.schedule_for(data_len.div_ceil(cfg.batch_size)),
        CyclicSchedule::default(),
    ];
    let mut in_range = true;
    let mut at_zero = true;
    for s in &schedules {
        at_zero &= (cyclic_lr(0, s) - 0.01).abs() < 1e-12;
        for it in 0..100_000u64 {
            let lr = cyclic_lr(it, s);
            in_range &= (0.01..=0.1).contains(&lr);
        }
    }
    runs.seg();
    let max_post = runs
        .seg_aug
        .iter()
        .chain(&runs.seg_plain)
        .flat_map(|r| r.history.iter().map(|h| h.max_post_clip_norm))
        .fold(0.0, f64::max);
    let max_pre = runs
        .seg_aug
        .iter()
        .chain(&runs.seg_plain)
        .flat_map(|r| r.history.iter().map(|h| h.max_pre_clip_norm))
        .fold(0.0, f64::max);
    outcome(
        in_range && at_zero && max_post <= 1.0 + 1e-6,
        format!(
            "lr in [0.01, 0.1] over 1e5 iterations: {in_range}; lr(0) = 0.01: {at_zero}; max post-clip norm {max_post:.6} (pre-clip max {max_pre:.2})"
        ),
    )
}

// ---------------------------------------------------------------- 9

fn curve_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

fn criterion_9(runs: &mut Runs) -> Outcome {
    runs.seg();
    let seed = SEEDS[0];
    let again = run_gan(seed, 1.0);
    let gan_curve = |r: &GanRun| -> Vec<f64> {
        r.reports
            .iter()
            .flat_map(|e| [e.train.total, e.discriminator])
            .collect()
    };
    let d_gan = curve_diff(&gan_curve(&runs.gan[0]), &gan_curve(&again));
    let data = seg_dataset(seed);
    let seg_again = run_seg(&data, Some(&again.generator), seed);
    let seg_curve =
        |r: &SegRun| -> Vec<f64> { r.history.iter().flat_map(|h| [h.train_loss, h.val_soft_dice]).collect() };
    let d_seg = curve_diff(&seg_curve(&runs.seg_aug[0]), &seg_curve(&seg_again));
    outcome(
        d_gan <= 1e-3 && d_seg <= 1e-3,
        format!("max relative deviation cyclegan {d_gan:.1e}, augmented unet {d_seg:.1e} (<= 1e-3)"),
    )
}

type Criterion<'a> = (usize, &'static str, &'a mut dyn FnMut(&mut Runs) -> Outcome);

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut runs = Runs::default();
    let criteria: [Criterion; 9] = [
        (1, "loss oracles", &mut |_| criterion_1()),
        (2, "gradient checks", &mut |_| criterion_2()),
        (3, "cropping recovery", &mut |_| criterion_3()),
        (4, "loss assembly", &mut |_| criterion_4()),
        (5, "shape preservation", &mut criterion_5),
        (6, "lambda ablation", &mut criterion_6),
        (7, "augmentation benefit", &mut criterion_7),
        (8, "schedule and clipping", &mut criterion_8),
        (9, "determinism", &mut criterion_9),
    ];
    let mut failed = 0;
    let mut lines = Vec::new();
    for (n, name, f) in criteria {
        if !want(n) {
            continue;
        }
        let t = Instant::now();
        let o = f(&mut runs);
        let line = format!(
            "criterion {n} {name}: {} ({:.1} s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
        println!("{line}");
        lines.push(line);
        failed += usize::from(!o.pass);
    }
    println!("\nacceptance summary:");
    for l in &lines {
        println!("  {l}");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
