//! Two-generator / two-discriminator translation model with a
//! shape-preserving surrounding-L1 term on the healthy → pathological path.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, Image2D, ValueDomain};
use crate::losses::{
    adversarial_mse_grad, l1_grad, surrounding_l1_grad, total_cyclegan_loss, LossBreakdown, LossWeights,
    RegionNormalization,
};
use crate::nn::{
    Adam, AdamConfig, Conv2d, ConvTranspose2d, Ctx, Init, InstanceNorm2d, Layer, Module, PadMode, Param, Sequential,
    SequentialCache, Tensor,
};
use crate::seed::{derive_seed, derive_seed_n};

/// Generator output is `OUTPUT_SCALE * tanh(.)`, covering ±3σ of z-scored data.
pub const OUTPUT_SCALE: f32 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorSpec {
    pub base_channels: usize,
    /// Number of stride-2 4×4 convolutions before the 1-channel score layer.
    pub n_strided: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            base_channels: 8,
            n_strided: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanModelSpec {
    pub input_size: usize,
    pub base_channels: usize,
    pub n_resnet_blocks: usize,
    pub discriminator: DiscriminatorSpec,
}

impl Default for GanModelSpec {
    fn default() -> Self {
        Self::full()
    }
}

impl GanModelSpec {
    pub fn full() -> Self {
        Self {
            input_size: 256,
            base_channels: 64,
            n_resnet_blocks: 6,
            discriminator: DiscriminatorSpec {
                base_channels: 64,
                n_strided: 3,
            },
        }
    }

    /// The 64 px configuration used for CPU runs.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            base_channels: 8,
            n_resnet_blocks: 3,
            discriminator: DiscriminatorSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 16 || !self.input_size.is_multiple_of(4) {
            return Err(Error::param(
                "input_size",
                format!("must be a multiple of 4 and >= 16, got {}", self.input_size),
            ));
        }
        if self.base_channels == 0 {
            return Err(Error::param("base_channels", "must be >= 1"));
        }
        let d = self.discriminator;
        if d.base_channels == 0 || d.n_strided == 0 {
            return Err(Error::param(
                "discriminator",
                "base_channels and n_strided must be >= 1",
            ));
        }
        if self.patch_grid() == 0 {
            return Err(Error::param(
                "discriminator",
                "too many strided layers for the input size",
            ));
        }
        Ok(())
    }

    /// Side of the discriminator score grid.
    pub fn patch_grid(&self) -> usize {
        let mut s = self.input_size;
        for _ in 0..self.discriminator.n_strided {
            s /= 2;
        }
        // final 4×4, stride 1, pad 1 convolution
        (s + 2).saturating_sub(3)
    }
}

fn block(layers: &mut Vec<Layer>, conv: Conv2d) {
    layers.push(Layer::Conv(conv));
    layers.push(Layer::InstanceNorm(InstanceNorm2d));
    layers.push(Layer::Relu);
}

fn build_generator(spec: &GanModelSpec, rng: &mut ChaCha8Rng) -> Sequential {
    let init = Init::Normal(0.02);
    let b = spec.base_channels;
    let mut layers = Vec::new();
    block(
        &mut layers,
        Conv2d::new(1, b, 7, 1, 3, PadMode::Reflect, true, init, rng),
    );
    block(
        &mut layers,
        Conv2d::new(b, 2 * b, 3, 2, 1, PadMode::Zero, true, init, rng),
    );
    block(
        &mut layers,
        Conv2d::new(2 * b, 4 * b, 3, 2, 1, PadMode::Zero, true, init, rng),
    );
    for _ in 0..spec.n_resnet_blocks {
        let c = 4 * b;
        let body = vec![
            Layer::Conv(Conv2d::new(c, c, 3, 1, 1, PadMode::Reflect, true, init, rng)),
            Layer::InstanceNorm(InstanceNorm2d),
            Layer::Relu,
            Layer::Conv(Conv2d::new(c, c, 3, 1, 1, PadMode::Reflect, true, init, rng)),
            Layer::InstanceNorm(InstanceNorm2d),
        ];
        layers.push(Layer::Residual(Sequential::new(body)));
    }
    for (cin, cout) in [(4 * b, 2 * b), (2 * b, b)] {
        layers.push(Layer::ConvTranspose(ConvTranspose2d::new(
            cin, cout, 3, 2, 1, 1, init, rng,
        )));
        layers.push(Layer::InstanceNorm(InstanceNorm2d));
        layers.push(Layer::Relu);
    }
    layers.push(Layer::Conv(Conv2d::new(
        b,
        1,
        7,
        1,
        3,
        PadMode::Reflect,
        true,
        init,
        rng,
    )));
    layers.push(Layer::Tanh(OUTPUT_SCALE));
    Sequential::new(layers)
}

fn build_discriminator(spec: &DiscriminatorSpec, rng: &mut ChaCha8Rng) -> Sequential {
    let init = Init::Normal(0.02);
    let mut layers = Vec::new();
    let mut cin = 1;
    for i in 0..spec.n_strided {
        let cout = spec.base_channels << i;
        layers.push(Layer::Conv(Conv2d::new(
            cin,
            cout,
            4,
            2,
            1,
            PadMode::Zero,
            true,
            init,
            rng,
        )));
        if i > 0 {
            layers.push(Layer::InstanceNorm(InstanceNorm2d));
        }
        layers.push(Layer::LeakyRelu(0.2));
        cin = cout;
    }
    layers.push(Layer::Conv(Conv2d::new(
        cin,
        1,
        4,
        1,
        1,
        PadMode::Zero,
        true,
        init,
        rng,
    )));
    Sequential::new(layers)
}

/// `G: X → Y` (healthy → pathological), `F: Y → X`, and their discriminators.
#[derive(Debug, Clone)]
pub struct CycleGan {
    pub spec: GanModelSpec,
    pub g: Sequential,
    pub f: Sequential,
    pub d_x: Sequential,
    pub d_y: Sequential,
}

impl Module for CycleGan {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        let p = |n: &str| crate::nn::join(prefix, n);
        self.g.visit_params(&p("g"), out);
        self.f.visit_params(&p("f"), out);
        self.d_x.visit_params(&p("d_x"), out);
        self.d_y.visit_params(&p("d_y"), out);
    }
}

impl CycleGan {
    pub fn generator_params(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.g.visit_params("g", &mut out);
        self.f.visit_params("f", &mut out);
        out
    }

    pub fn discriminator_params(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.d_x.visit_params("d_x", &mut out);
        self.d_y.visit_params("d_y", &mut out);
        out
    }

    /// The healthy → pathological generator as a standalone translator.
    pub fn generator(&self) -> Generator {
        Generator {
            spec: self.spec,
            net: self.g.clone(),
        }
    }
}

/// Deterministically initialized models for `seed`.
pub fn build_models(spec: &GanModelSpec, seed: u64) -> Result<CycleGan> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["cyclegan-init"]));
    Ok(CycleGan {
        spec: *spec,
        g: build_generator(spec, &mut rng),
        f: build_generator(spec, &mut rng),
        d_x: build_discriminator(&spec.discriminator, &mut rng),
        d_y: build_discriminator(&spec.discriminator, &mut rng),
    })
}

/// A trained `G`, immutable and safe to share across threads.
#[derive(Debug, Clone)]
pub struct Generator {
    pub spec: GanModelSpec,
    pub net: Sequential,
}

impl Generator {
    pub fn translate(&self, img: &Image2D) -> Result<Image2D> {
        translate(img, self)
    }

    pub fn from_archive(archive: &Archive, group: &str) -> Result<Self> {
        let spec: GanModelSpec = archive.json("model_spec")?;
        let mut g = Generator {
            spec,
            net: build_models(&spec, 0)?.g,
        };
        archive.load_module(group, &mut g.net)?;
        Ok(g)
    }
}

/// Healthy → pathological translation of a z-scored slice.
pub fn translate(img: &Image2D, g: &Generator) -> Result<Image2D> {
    if img.domain() != ValueDomain::ZScored {
        return Err(Error::DomainMismatch {
            expected: ValueDomain::ZScored.name(),
            actual: img.domain().name(),
        });
    }
    let s = g.spec.input_size;
    if img.dims() != (s, s) {
        return Err(Error::DimensionMismatch(format!(
            "generator trained at {s}x{s}, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    let out = g.net.infer(&to_tensor(img));
    if !out.all_finite() {
        return Err(Error::TrainingFailure("generator produced non-finite output".into()));
    }
    Image2D::new(s, s, out.data, ValueDomain::ZScored)
}

pub(crate) fn to_tensor(img: &Image2D) -> Tensor {
    Tensor::from_vec(1, 1, img.height(), img.width(), img.values().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub weights: LossWeights,
    pub precision_bits: u32,
    pub seed: u64,
    pub test_every_epoch: bool,
    /// Minimum test inside-lung change for an epoch to be checkpoint-eligible.
    pub inside_change_floor: f64,
    /// Size of the fake-image history buffer fed to discriminators; 0 disables it.
    pub image_pool_size: usize,
    /// Linear learning-rate decay to zero over the second half of training.
    pub lr_decay: bool,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 1,
            optimizer: AdamConfig::default(),
            weights: LossWeights::default(),
            precision_bits: 32,
            seed: 0,
            test_every_epoch: true,
            inside_change_floor: 0.05,
            image_pool_size: 0,
            lr_decay: false,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size != 1 {
            return Err(Error::param("batch_size", "only batch size 1 is supported"));
        }
        if self.precision_bits != 32 {
            return Err(Error::param("precision_bits", "training is 32-bit only"));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::param("optimizer.lr", "must be > 0"));
        }
        self.weights.validate()
    }

    fn lr_at(&self, epoch: usize) -> f32 {
        let base = self.optimizer.lr;
        if !self.lr_decay || self.epochs < 2 {
            return base;
        }
        let half = self.epochs / 2;
        if epoch < half {
            base
        } else {
            base * (1.0 - (epoch - half) as f32 / (self.epochs - half) as f32)
        }
    }
}

/// A healthy training or test slice with its lung mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSlice {
    pub image: Image2D,
    pub lung_mask: BinaryMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub discriminator: f64,
    /// Mean test surrounding L1 of `G`.
    pub shape_preservation: f64,
    /// Mean test `|x - G(x)|` over lung pixels.
    pub inside_change: f64,
}

impl EpochReport {
    /// Inside-lung change relative to outside-lung change.
    pub fn change_ratio(&self) -> f64 {
        self.inside_change / self.shape_preservation
    }
}

/// Fake-image history (the classic CycleGAN replay buffer).
#[derive(Debug, Clone, Default)]
struct ImagePool {
    size: usize,
    images: Vec<Tensor>,
}

impl ImagePool {
    fn query(&mut self, fake: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
        if self.size == 0 {
            return fake.clone();
        }
        if self.images.len() < self.size {
            self.images.push(fake.clone());
            return fake.clone();
        }
        if rng.gen::<f32>() < 0.5 {
            let i = rng.gen_range(0..self.size);
            std::mem::replace(&mut self.images[i], fake.clone())
        } else {
            fake.clone()
        }
    }
}

/// Everything needed to continue training: models, optimizer moments,
/// epoch counter, reports and the best checkpoint so far.
#[derive(Debug, Clone)]
pub struct GanTrainer {
    pub models: CycleGan,
    pub g_opt: Adam,
    pub d_opt: Adam,
    pub next_epoch: usize,
    pub reports: Vec<EpochReport>,
    /// Epoch and `G` parameters of the best eligible epoch.
    pub best: Option<(usize, Sequential)>,
    pool_x: ImagePool,
    pool_y: ImagePool,
}

impl GanTrainer {
    pub fn new(models: CycleGan, config: &GanTrainConfig) -> Self {
        Self {
            models,
            g_opt: Adam::new(config.optimizer),
            d_opt: Adam::new(config.optimizer),
            next_epoch: 0,
            reports: Vec::new(),
            best: None,
            pool_x: ImagePool {
                size: config.image_pool_size,
                images: Vec::new(),
            },
            pool_y: ImagePool {
                size: config.image_pool_size,
                images: Vec::new(),
            },
        }
    }

    pub fn best_report(&self) -> Option<&EpochReport> {
        let (e, _) = self.best.as_ref()?;
        self.reports.iter().find(|r| r.epoch == *e)
    }

    /// The best checkpointed generator, or the current one if no epoch qualified.
    pub fn best_generator(&self) -> Generator {
        Generator {
            spec: self.models.spec,
            net: self
                .best
                .as_ref()
                .map_or_else(|| self.models.g.clone(), |(_, g)| g.clone()),
        }
    }

    pub fn to_archive(&mut self, config: &GanTrainConfig) -> Result<Archive> {
        let mut ar = Archive::new();
        ar.set_json("kind", &"cyclegan")?;
        ar.set_json("model_spec", &self.models.spec)?;
        ar.set_json("train_config", config)?;
        ar.set_json("next_epoch", &self.next_epoch)?;
        ar.set_json("reports", &self.reports)?;
        ar.push_module("model", &mut self.models);
        ar.push_adam("opt.g", &self.g_opt)?;
        ar.push_adam("opt.d", &self.d_opt)?;
        if let Some((epoch, g)) = &mut self.best {
            ar.set_json("best_epoch", epoch)?;
            ar.push_module("best.g", g);
        }
        // The replay buffers are not persisted, so resume is exact only with the pool disabled.
        Ok(ar)
    }

    pub fn from_archive(ar: &Archive) -> Result<(Self, GanTrainConfig)> {
        let kind: String = ar.json("kind")?;
        if kind != "cyclegan" {
            return Err(Error::Checkpoint(format!(
                "expected a cyclegan checkpoint, got `{kind}`"
            )));
        }
        let spec: GanModelSpec = ar.json("model_spec")?;
        let config: GanTrainConfig = ar.json("train_config")?;
        let mut models = build_models(&spec, 0)?;
        ar.load_module("model", &mut models)?;
        let mut t = GanTrainer::new(models, &config);
        t.g_opt = ar.adam("opt.g")?;
        t.d_opt = ar.adam("opt.d")?;
        t.next_epoch = ar.json("next_epoch")?;
        t.reports = ar.json("reports")?;
        if ar.has_group("best.g") {
            let mut g = t.models.g.clone();
            ar.load_module("best.g", &mut g)?;
            t.best = Some((ar.json("best_epoch")?, g));
        }
        Ok((t, config))
    }
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn grad_tensor(like: &Tensor, g: &[f64], scale: f64) -> Tensor {
    Tensor::from_vec(
        like.n,
        like.c,
        like.h,
        like.w,
        g.iter().map(|&v| (v * scale) as f32).collect(),
    )
}

fn check_pair(x: &Image2D, mask: &BinaryMask, y: &Image2D, spec: &GanModelSpec) -> Result<()> {
    let s = spec.input_size;
    for (name, dims) in [("x", x.dims()), ("mask_x", mask.dims()), ("y", y.dims())] {
        if dims != (s, s) {
            return Err(Error::DimensionMismatch(format!(
                "{name} is {dims:?}, model expects {s}x{s}"
            )));
        }
    }
    Ok(())
}

/// One generator update on the full objective followed by one discriminator update.
pub fn train_step(
    x: &Image2D,
    mask_x: Option<&BinaryMask>,
    y: &Image2D,
    trainer: &mut GanTrainer,
    config: &GanTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, f64)> {
    let mask = mask_x.ok_or_else(|| Error::Precondition("healthy input requires a lung mask".into()))?;
    check_pair(x, mask, y, &trainer.models.spec)?;
    let w = config.weights;
    let m = &mut trainer.models;
    let xt = to_tensor(x);
    let yt = to_tensor(y);
    // No stochastic layers in these networks; the context RNG is never drawn.
    let mut ctx_rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = Ctx::train(&mut ctx_rng);

    let (fake_y, c_g1) = m.g.forward(&xt, &mut ctx);
    let (rec_x, c_f1) = m.f.forward(&fake_y, &mut ctx);
    let (fake_x, c_f2) = m.f.forward(&yt, &mut ctx);
    let (rec_y, c_g2) = m.g.forward(&fake_x, &mut ctx);
    let (s_fy, c_dy) = m.d_y.forward(&fake_y, &mut ctx);
    let (s_fx, c_dx) = m.d_x.forward(&fake_x, &mut ctx);

    let (adv_g, g_sfy) = adversarial_mse_grad(&to_f64(&s_fy.data), true);
    let (adv_f, g_sfx) = adversarial_mse_grad(&to_f64(&s_fx.data), true);
    let xv = to_f64(&xt.data);
    let yv = to_f64(&yt.data);
    let (cyc_x, g_recx) = l1_grad(&xv, &to_f64(&rec_x.data))?;
    let (cyc_y, g_recy) = l1_grad(&yv, &to_f64(&rec_y.data))?;
    let (surr, g_surr) = surrounding_l1_grad(&xv, &to_f64(&fake_y.data), mask.values(), RegionNormalization::Region)?;

    let identity = if w.gamma_identity > 0.0 {
        Some((m.g.forward(&yt, &mut ctx), m.f.forward(&xt, &mut ctx)))
    } else {
        None
    };
    let mut id_total = 0.0;
    let mut id_grads = None;
    if let Some(((id_y, _), (id_x, _))) = &identity {
        let (ly, gy) = l1_grad(&yv, &to_f64(&id_y.data))?;
        let (lx, gx) = l1_grad(&xv, &to_f64(&id_x.data))?;
        id_total = ly + lx;
        id_grads = Some((gy, gx));
    }

    let breakdown = total_cyclegan_loss(adv_g, adv_f, cyc_x + cyc_y, surr, id_total, &w);
    if !breakdown.total.is_finite() {
        return Err(Error::TrainingFailure(format!(
            "non-finite generator loss {breakdown:?}"
        )));
    }

    m.zero_grad();
    // x → G → fake_y: adversarial via D_y, cycle via F, shape term.
    let mut d_fake_y = m.d_y.backward(&c_dy, &grad_tensor(&s_fy, &g_sfy, 1.0));
    d_fake_y.add_assign(&m.f.backward(&c_f1, &grad_tensor(&rec_x, &g_recx, w.delta)));
    if w.lambda > 0.0 {
        d_fake_y.add_assign(&grad_tensor(&fake_y, &g_surr, w.lambda));
    }
    m.g.backward(&c_g1, &d_fake_y);
    // y → F → fake_x: adversarial via D_x, cycle via G. No shape term here.
    let mut d_fake_x = m.d_x.backward(&c_dx, &grad_tensor(&s_fx, &g_sfx, 1.0));
    d_fake_x.add_assign(&m.g.backward(&c_g2, &grad_tensor(&rec_y, &g_recy, w.delta)));
    m.f.backward(&c_f2, &d_fake_x);
    if let (Some(((id_y, c_idy), (id_x, c_idx))), Some((gy, gx))) = (&identity, &id_grads) {
        m.g.backward(c_idy, &grad_tensor(id_y, gy, w.gamma_identity));
        m.f.backward(c_idx, &grad_tensor(id_x, gx, w.gamma_identity));
    }
    trainer.g_opt.step(&mut m.generator_params());

    // Discriminators: 0.5 * (mse(real, 1) + mse(fake, 0)).
    m.zero_grad();
    let pooled_y = trainer.pool_y.query(&fake_y, rng);
    let pooled_x = trainer.pool_x.query(&fake_x, rng);
    let mut d_loss = 0.0;
    for (d, real, fake, cached, use_cache) in [
        (&mut m.d_y, &yt, &pooled_y, (&s_fy, &c_dy), config.image_pool_size == 0),
        (&mut m.d_x, &xt, &pooled_x, (&s_fx, &c_dx), config.image_pool_size == 0),
    ] {
        let (s_real, c_real) = d.forward(real, &mut ctx);
        // D is unchanged since the generator pass, so its fake-score cache is reusable.
        let fresh: (Tensor, SequentialCache);
        let (s_fake, c_fake) = if use_cache {
            (cached.0, cached.1)
        } else {
            fresh = d.forward(fake, &mut ctx);
            (&fresh.0, &fresh.1)
        };
        let (lr, gr) = adversarial_mse_grad(&to_f64(&s_real.data), true);
        let (lf, gf) = adversarial_mse_grad(&to_f64(&s_fake.data), false);
        d_loss += 0.5 * (lr + lf);
        d.backward(&c_real, &grad_tensor(&s_real, &gr, 0.5));
        d.backward(c_fake, &grad_tensor(s_fake, &gf, 0.5));
    }
    if !d_loss.is_finite() {
        return Err(Error::TrainingFailure("non-finite discriminator loss".into()));
    }
    trainer.d_opt.step(&mut m.discriminator_params());
    Ok((breakdown, d_loss))
}

/// Test-phase metrics of `g`: (mean surrounding L1, mean inside-lung change).
pub fn evaluate_generator(g: &Generator, test: &[MaskedSlice]) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let mut outside = 0.0;
    let mut inside = 0.0;
    let mut n_inside = 0usize;
    for s in test {
        let out = g.translate(&s.image)?;
        let x = to_f64(s.image.values());
        outside += surrounding_l1_grad(
            &x,
            &to_f64(out.values()),
            s.lung_mask.values(),
            RegionNormalization::Region,
        )?
        .0;
        let lung = s.lung_mask.count();
        if lung > 0 {
            let sum: f64 = s
                .image
                .values()
                .iter()
                .zip(out.values())
                .zip(s.lung_mask.values())
                .filter(|(_, &m)| m)
                .map(|((&a, &b), _)| (a as f64 - b as f64).abs())
                .sum();
            inside += sum / lung as f64;
            n_inside += 1;
        }
    }
    Ok((outside / test.len() as f64, inside / n_inside.max(1) as f64))
}

/// Runs the remaining epochs of `trainer`. `on_epoch` sees the trainer after
/// each epoch (for checkpointing) and returns `false` to stop early.
pub fn train(
    healthy: &[MaskedSlice],
    pathological: &[Image2D],
    test: &[MaskedSlice],
    trainer: &mut GanTrainer,
    config: &GanTrainConfig,
    mut on_epoch: impl FnMut(&mut GanTrainer) -> Result<bool>,
) -> Result<()> {
    config.validate()?;
    if config.epochs > trainer.next_epoch && (healthy.is_empty() || pathological.is_empty()) {
        return Err(Error::Data("both training domains need at least one slice".into()));
    }
    if config.epochs > trainer.next_epoch && config.test_every_epoch && test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    while trainer.next_epoch < config.epochs {
        let epoch = trainer.next_epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_n(config.seed, "cyclegan-epoch", epoch as u64));
        let mut xi: Vec<usize> = (0..healthy.len()).collect();
        let mut yi: Vec<usize> = (0..pathological.len()).collect();
        xi.shuffle(&mut rng);
        yi.shuffle(&mut rng);
        let lr = config.lr_at(epoch);
        trainer.g_opt.config.lr = lr;
        trainer.d_opt.config.lr = lr;
        let mut parts = Vec::with_capacity(xi.len().min(yi.len()));
        let mut d_sum = 0.0;
        for (&i, &j) in xi.iter().zip(&yi) {
            let (b, d) = train_step(
                &healthy[i].image,
                Some(&healthy[i].lung_mask),
                &pathological[j],
                trainer,
                config,
                &mut rng,
            )?;
            parts.push(b);
            d_sum += d;
        }
        if !trainer.models.all_finite() {
            return Err(Error::TrainingFailure(format!(
                "non-finite parameters after epoch {epoch}"
            )));
        }
        let (shape_preservation, inside_change) = if config.test_every_epoch {
            evaluate_generator(&trainer.models.generator(), test)?
        } else {
            (f64::NAN, f64::NAN)
        };
        let report = EpochReport {
            epoch,
            train: LossBreakdown::mean(&parts),
            discriminator: d_sum / parts.len().max(1) as f64,
            shape_preservation,
            inside_change,
        };
        let eligible = report.inside_change >= config.inside_change_floor;
        let better = trainer
            .best_report()
            .is_none_or(|b| report.shape_preservation < b.shape_preservation);
        if eligible && better {
            trainer.best = Some((epoch, trainer.models.g.clone()));
        }
        trainer.reports.push(report);
        trainer.next_epoch += 1;
        if !on_epoch(trainer)? {
            break;
        }
    }
    Ok(())
}

/// Writes per-epoch reports as CSV.
pub fn write_reports_csv(reports: &[EpochReport], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "adv_g",
        "adv_f",
        "cycle",
        "surrounding_l1",
        "identity",
        "total",
        "discriminator",
        "shape_preservation",
        "inside_change",
    ])?;
    for r in reports {
        let t = r.train;
        w.write_record(
            [
                r.epoch as f64,
                t.adv_g,
                t.adv_f,
                t.cycle,
                t.surrounding_l1,
                t.identity,
                t.total,
                r.discriminator,
                r.shape_preservation,
                r.inside_change,
            ]
            .iter()
            .map(|v| v.to_string()),
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> GanModelSpec {
        GanModelSpec {
            input_size: 16,
            base_channels: 2,
            n_resnet_blocks: 1,
            discriminator: DiscriminatorSpec {
                base_channels: 2,
                n_strided: 2,
            },
        }
    }

    fn rand_image(seed: u64, s: usize) -> Image2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image2D::new(
            s,
            s,
            (0..s * s).map(|_| rng.gen_range(-1.5f32..1.5)).collect(),
            ValueDomain::ZScored,
        )
        .unwrap()
    }

    fn disk_mask(s: usize) -> BinaryMask {
        let c = s as f32 / 2.0 - 0.5;
        BinaryMask::from_fn(s, s, |r, q| {
            (r as f32 - c).powi(2) + (q as f32 - c).powi(2) < (s as f32 / 4.0).powi(2)
        })
    }

    #[test]
    fn shapes_and_patch_grid() {
        let spec = GanModelSpec::desk();
        let m = build_models(&spec, 1).unwrap();
        let x = to_tensor(&rand_image(0, 64));
        assert_eq!(m.g.infer(&x).shape(), [1, 1, 64, 64]);
        let scores = m.d_y.infer(&x);
        // 64 → 32 → 16 after two stride-2 convs; k4 s1 p1 gives 16 + 2 - 4 + 1.
        assert_eq!(scores.shape(), [1, 1, 15, 15]);
        assert_eq!(spec.patch_grid(), 15);
        assert!(spec.patch_grid() < spec.input_size);
    }

    #[test]
    fn same_seed_same_parameters() {
        let mut a = build_models(&tiny_spec(), 3).unwrap();
        let mut b = build_models(&tiny_spec(), 3).unwrap();
        let mut c = build_models(&tiny_spec(), 4).unwrap();
        assert_eq!(a.state(), b.state());
        assert_ne!(a.state(), c.state());
    }

    #[test]
    fn output_bounded() {
        let mut m = build_models(&tiny_spec(), 0).unwrap();
        for (_, p) in m.params_mut() {
            p.value.iter_mut().for_each(|v| *v *= 200.0);
        }
        let out = m.generator().translate(&rand_image(1, 16)).unwrap();
        assert!(out.values().iter().all(|v| v.abs() <= OUTPUT_SCALE));
    }

    #[test]
    fn translate_contracts() {
        let g = build_models(&tiny_spec(), 0).unwrap().generator();
        let x = rand_image(2, 16);
        let a = g.translate(&x).unwrap();
        assert_eq!(a.dims(), x.dims());
        assert_eq!(a, g.translate(&x).unwrap());
        assert!(matches!(
            g.translate(&rand_image(2, 32)),
            Err(Error::DimensionMismatch(_))
        ));
        let hu = Image2D::filled(16, 16, 0.0, ValueDomain::Hu).unwrap();
        assert!(matches!(g.translate(&hu), Err(Error::DomainMismatch { .. })));
    }

    #[test]
    fn step_requires_mask_and_zero_lambda_drops_term() {
        let cfg = GanTrainConfig {
            weights: LossWeights {
                lambda: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut t = GanTrainer::new(build_models(&tiny_spec(), 0).unwrap(), &cfg);
        let (x, y) = (rand_image(1, 16), rand_image(2, 16));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            train_step(&x, None, &y, &mut t, &cfg, &mut rng),
            Err(Error::Precondition(_))
        ));
        let (b, _) = train_step(&x, Some(&disk_mask(16)), &y, &mut t, &cfg, &mut rng).unwrap();
        assert!(b.surrounding_l1 > 0.0);
        let expected = b.adv_g + b.adv_f + 10.0 * b.cycle;
        assert!((b.total - expected).abs() <= 1e-5 * expected.abs());
    }

    #[test]
    fn repeated_steps_reduce_generator_loss() {
        let cfg = GanTrainConfig {
            optimizer: AdamConfig {
                lr: 1e-3,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut t = GanTrainer::new(build_models(&tiny_spec(), 5).unwrap(), &cfg);
        let (x, y, mask) = (rand_image(7, 16), rand_image(8, 16), disk_mask(16));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let totals: Vec<f64> = (0..50)
            .map(|_| train_step(&x, Some(&mask), &y, &mut t, &cfg, &mut rng).unwrap().0.total)
            .collect();
        let first: f64 = totals[..5].iter().sum::<f64>() / 5.0;
        let last: f64 = totals[45..].iter().sum::<f64>() / 5.0;
        assert!(last < first, "window means {first} -> {last}");
    }

    #[test]
    fn zero_epochs_leaves_models_untouched() {
        let cfg = GanTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let models = build_models(&tiny_spec(), 0).unwrap();
        let mut t = GanTrainer::new(models.clone(), &cfg);
        train(&[], &[], &[], &mut t, &cfg, |_| Ok(true)).unwrap();
        assert!(t.reports.is_empty());
        assert_eq!(t.models.clone().state(), models.clone().state());
    }

    fn tiny_data() -> (Vec<MaskedSlice>, Vec<Image2D>) {
        let healthy = (0..3)
            .map(|i| MaskedSlice {
                image: rand_image(10 + i, 16),
                lung_mask: disk_mask(16),
            })
            .collect();
        let path = (0..4).map(|i| rand_image(20 + i, 16)).collect();
        (healthy, path)
    }

    #[test]
    fn reports_per_epoch_and_resume_matches() {
        let cfg = GanTrainConfig {
            epochs: 3,
            inside_change_floor: 0.0,
            ..Default::default()
        };
        let (healthy, path) = tiny_data();
        let mut full = GanTrainer::new(build_models(&tiny_spec(), 0).unwrap(), &cfg);
        train(&healthy, &path, &healthy, &mut full, &cfg, |_| Ok(true)).unwrap();
        assert_eq!(full.reports.len(), 3);
        assert!(full.best.is_some());

        let mut part = GanTrainer::new(build_models(&tiny_spec(), 0).unwrap(), &cfg);
        train(&healthy, &path, &healthy, &mut part, &cfg, |t| Ok(t.next_epoch < 1)).unwrap();
        let ar = Archive::from_bytes(&part.to_archive(&cfg).unwrap().to_bytes().unwrap()).unwrap();
        let (mut resumed, cfg2) = GanTrainer::from_archive(&ar).unwrap();
        assert_eq!(cfg2, cfg);
        train(&healthy, &path, &healthy, &mut resumed, &cfg, |_| Ok(true)).unwrap();
        assert_eq!(resumed.reports, full.reports);
        assert_eq!(resumed.models.state(), full.models.state());
    }

    #[test]
    fn empty_domain_is_data_error() {
        let cfg = GanTrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let (healthy, _) = tiny_data();
        let mut t = GanTrainer::new(build_models(&tiny_spec(), 0).unwrap(), &cfg);
        assert!(matches!(
            train(&healthy, &[], &healthy, &mut t, &cfg, |_| Ok(true)),
            Err(Error::Data(_))
        ));
    }
}
