//! U-Net lung segmenter trained with on-the-fly healthy → pathological
//! augmentation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::cyclegan::Generator;
use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur, BinaryMask, Image2D, ValueDomain, DEFAULT_BLUR_SIGMA};
use crate::losses::{dice_focal_grad, soft_dice_grad};
use crate::nn::{
    clip_grad_norm, grad_norm, BatchNorm2d, Conv2d, ConvTranspose2d, Ctx, Dropout, Init, Layer, LayerCache, MaxPool2d,
    Module, PadMode, Param, Sequential, SequentialCache, Sgd, SgdConfig, Tensor,
};
use crate::preprocess::PreparedSlice;
use crate::seed::{derive_seed, derive_seed_n};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetSpec {
    pub input_size: usize,
    /// Number of resolution levels.
    pub depth: usize,
    /// Features at the first level; doubled at every level below.
    pub base_features: usize,
    pub batch_norm: bool,
    pub decoder_dropout: f32,
}

impl Default for UNetSpec {
    fn default() -> Self {
        Self::full()
    }
}

impl UNetSpec {
    pub fn full() -> Self {
        Self {
            input_size: 256,
            depth: 5,
            base_features: 64,
            batch_norm: true,
            decoder_dropout: 0.2,
        }
    }

    pub fn desk() -> Self {
        Self {
            input_size: 64,
            base_features: 8,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_features == 0 {
            return Err(Error::param("depth", "depth and base_features must be >= 1"));
        }
        let div = 1usize << (self.depth - 1);
        if !self.input_size.is_multiple_of(div) || self.input_size / div < 1 {
            return Err(Error::param(
                "input_size",
                format!("must be divisible by {div} for depth {}", self.depth),
            ));
        }
        if !(0.0..1.0).contains(&self.decoder_dropout) {
            return Err(Error::param("decoder_dropout", "must be in [0, 1)"));
        }
        Ok(())
    }

    fn features(&self, level: usize) -> usize {
        self.base_features << level
    }
}

fn conv_block(cin: usize, cout: usize, spec: &UNetSpec, rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let mut layers = Vec::new();
    for c in [cin, cout] {
        layers.push(Layer::Conv(Conv2d::new(
            c,
            cout,
            3,
            1,
            1,
            PadMode::Zero,
            !spec.batch_norm,
            Init::FanIn,
            rng,
        )));
        if spec.batch_norm {
            layers.push(Layer::BatchNorm(BatchNorm2d::new(cout)));
        }
        layers.push(Layer::Relu);
    }
    layers
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub spec: UNetSpec,
    enc: Vec<Sequential>,
    up: Vec<Layer>,
    dec: Vec<Sequential>,
    head: Sequential,
}

#[derive(Debug, Clone)]
pub struct UNetCache {
    enc: Vec<SequentialCache>,
    pool: Vec<LayerCache>,
    up: Vec<LayerCache>,
    dec: Vec<SequentialCache>,
    head: SequentialCache,
}

impl Module for UNet {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        let p = |n: String| crate::nn::join(prefix, &n);
        for (i, e) in self.enc.iter_mut().enumerate() {
            e.visit_params(&p(format!("enc.{i}")), out);
        }
        for (j, (u, d)) in self.up.iter_mut().zip(&mut self.dec).enumerate() {
            u.visit_params(&p(format!("up.{j}")), out);
            d.visit_params(&p(format!("dec.{j}")), out);
        }
        self.head.visit_params(&p("head".into()), out);
    }
}

impl UNet {
    pub fn new(spec: &UNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["unet-init"]));
        let mut enc = Vec::new();
        let mut cin = 1;
        for level in 0..spec.depth {
            enc.push(Sequential::new(conv_block(cin, spec.features(level), spec, &mut rng)));
            cin = spec.features(level);
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for level in 0..spec.depth - 1 {
            let f = spec.features(level);
            up.push(Layer::ConvTranspose(ConvTranspose2d::new(
                2 * f,
                f,
                2,
                2,
                0,
                0,
                Init::FanIn,
                &mut rng,
            )));
            let mut block = conv_block(2 * f, f, spec, &mut rng);
            if spec.decoder_dropout > 0.0 {
                block.push(Layer::Dropout(Dropout {
                    p: spec.decoder_dropout,
                }));
            }
            dec.push(Sequential::new(block));
        }
        let head = Sequential::new(vec![
            Layer::Conv(Conv2d::new(
                spec.base_features,
                1,
                1,
                1,
                0,
                PadMode::Zero,
                true,
                Init::FanIn,
                &mut rng,
            )),
            Layer::Sigmoid,
        ]);
        Ok(Self {
            spec: *spec,
            enc,
            up,
            dec,
            head,
        })
    }

    /// Training-mode forward pass returning probabilities and the cache.
    pub fn forward(&mut self, x: &Tensor, ctx: &mut Ctx) -> (Tensor, UNetCache) {
        let depth = self.spec.depth;
        let mut cache = UNetCache {
            enc: Vec::with_capacity(depth),
            pool: Vec::with_capacity(depth - 1),
            up: Vec::new(),
            dec: Vec::new(),
            head: SequentialCache::default(),
        };
        let mut skips = Vec::with_capacity(depth - 1);
        let mut cur = x.clone();
        for (level, block) in self.enc.iter_mut().enumerate() {
            let (y, c) = block.forward(&cur, ctx);
            cache.enc.push(c);
            cur = y;
            if level + 1 < depth {
                let (pooled, pc) = Layer::MaxPool(MaxPool2d).forward(&cur, ctx);
                cache.pool.push(pc);
                skips.push(std::mem::replace(&mut cur, pooled));
            }
        }
        let mut up_caches = vec![None; depth - 1];
        let mut dec_caches = vec![None; depth - 1];
        for level in (0..depth - 1).rev() {
            let (u, uc) = self.up[level].forward(&cur, ctx);
            let cat = Tensor::concat_channels(&u, &skips[level]);
            let (y, dc) = self.dec[level].forward(&cat, ctx);
            up_caches[level] = Some(uc);
            dec_caches[level] = Some(dc);
            cur = y;
        }
        cache.up = up_caches
            .into_iter()
            .map(|c| c.expect("decoder level visited"))
            .collect();
        cache.dec = dec_caches
            .into_iter()
            .map(|c| c.expect("decoder level visited"))
            .collect();
        let (out, hc) = self.head.forward(&cur, ctx);
        cache.head = hc;
        (out, cache)
    }

    /// Accumulates parameter gradients for `dprob = dL/d(probabilities)`.
    pub fn backward(&mut self, cache: &UNetCache, dprob: &Tensor) {
        let depth = self.spec.depth;
        let mut d = self.head.backward(&cache.head, dprob);
        let mut dskips = Vec::with_capacity(depth - 1);
        for level in 0..depth - 1 {
            let dcat = self.dec[level].backward(&cache.dec[level], &d);
            let (du, dskip) = Tensor::split_channels(&dcat, self.spec.features(level));
            dskips.push(dskip);
            d = self.up[level].backward(&cache.up[level], &du);
        }
        for level in (0..depth).rev() {
            if level + 1 < depth {
                d = Layer::MaxPool(MaxPool2d).backward(&cache.pool[level], &d);
                d.add_assign(&dskips[level]);
            }
            d = self.enc[level].backward(&cache.enc[level], &d);
        }
    }

    /// Inference: dropout off, batch norm on running statistics.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        let depth = self.spec.depth;
        let mut skips = Vec::with_capacity(depth - 1);
        let mut cur = x.clone();
        for (level, block) in self.enc.iter().enumerate() {
            cur = block.infer(&cur);
            if level + 1 < depth {
                let pooled = Layer::MaxPool(MaxPool2d).infer(&cur);
                skips.push(std::mem::replace(&mut cur, pooled));
            }
        }
        for level in (0..depth - 1).rev() {
            let u = self.up[level].infer(&cur);
            cur = self.dec[level].infer(&Tensor::concat_channels(&u, &skips[level]));
        }
        self.head.infer(&cur)
    }

    pub fn probabilities(&self, img: &Image2D) -> Result<Image2D> {
        self.check_input(img)?;
        let out = self.infer(&Tensor::from_vec(
            1,
            1,
            img.height(),
            img.width(),
            img.values().to_vec(),
        ));
        Image2D::new(img.height(), img.width(), out.data, ValueDomain::Unit)
    }

    fn check_input(&self, img: &Image2D) -> Result<()> {
        let s = self.spec.input_size;
        if img.dims() != (s, s) {
            return Err(Error::DimensionMismatch(format!(
                "U-Net expects {s}x{s}, got {:?}",
                img.dims()
            )));
        }
        if img.domain() != ValueDomain::ZScored {
            return Err(Error::DomainMismatch {
                expected: ValueDomain::ZScored.name(),
                actual: img.domain().name(),
            });
        }
        Ok(())
    }
}

/// Thresholded sigmoid output (`p >= threshold`).
pub fn predict_mask(img: &Image2D, model: &UNet, threshold: f32) -> Result<BinaryMask> {
    let p = model.probabilities(img)?;
    BinaryMask::new(
        p.height(),
        p.width(),
        p.values().iter().map(|&v| v >= threshold).collect(),
    )
}

/// Triangular cyclic schedule whose amplitude decays as `gamma^iteration`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CyclicSchedule {
    pub base_lr: f64,
    pub max_lr: f64,
    /// Half-cycle length in iterations.
    pub step_size: usize,
    pub gamma: f64,
}

impl Default for CyclicSchedule {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            max_lr: 0.1,
            step_size: 2000,
            gamma: 0.9999,
        }
    }
}

impl CyclicSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr <= self.max_lr) {
            return Err(Error::param("base_lr", "need 0 < base_lr <= max_lr"));
        }
        if self.step_size == 0 {
            return Err(Error::param("step_size", "must be >= 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::param("gamma", "must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Learning rate at `iteration` in exponential-range mode.
pub fn cyclic_lr(iteration: u64, s: &CyclicSchedule) -> f64 {
    let step = s.step_size as f64;
    let it = iteration as f64;
    let cycle = (1.0 + it / (2.0 * step)).floor();
    let x = (it / step - 2.0 * cycle + 1.0).abs();
    let amp = (1.0 - x).max(0.0) * s.gamma.powf(it);
    (s.base_lr + (s.max_lr - s.base_lr) * amp).clamp(s.base_lr, s.max_lr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub clip_norm: f32,
    pub schedule: CyclicSchedule,
    /// Half-cycle length in epochs; overrides `schedule.step_size` once the
    /// number of iterations per epoch is known.
    pub step_size_epochs: Option<usize>,
    pub augment_prob: f64,
    pub blur_kernel: usize,
    pub blur_sigma: f32,
    pub focal_gamma: f64,
    pub threshold: f32,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            sgd: SgdConfig::default(),
            clip_norm: 1.0,
            schedule: CyclicSchedule::default(),
            step_size_epochs: Some(2),
            augment_prob: 0.5,
            blur_kernel: 5,
            blur_sigma: DEFAULT_BLUR_SIGMA,
            focal_gamma: 2.0,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(0.0..=1.0).contains(&self.augment_prob) {
            return Err(Error::param("augment_prob", "must be in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be >= 1"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::param("clip_norm", "must be > 0"));
        }
        if self.blur_kernel.is_multiple_of(2) {
            return Err(Error::param("blur_kernel", "must be odd"));
        }
        Ok(())
    }

    pub fn schedule_for(&self, iters_per_epoch: usize) -> CyclicSchedule {
        let mut s = self.schedule;
        if let Some(e) = self.step_size_epochs {
            s.step_size = (e * iters_per_epoch).max(1);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBatch {
    pub images: Vec<Image2D>,
    pub masks: Vec<BinaryMask>,
    pub augmented: Vec<bool>,
}

/// Per item with probability `augment_prob`: translate with `g`, then blur.
/// One uniform is drawn per item whether or not `g` is given.
pub fn augment_batch(
    images: &[Image2D],
    masks: &[BinaryMask],
    g: Option<&Generator>,
    rng: &mut ChaCha8Rng,
    config: &SegTrainConfig,
) -> Result<AugmentedBatch> {
    if images.len() != masks.len() {
        return Err(Error::DimensionMismatch("images vs masks count".into()));
    }
    let mut out = Vec::with_capacity(images.len());
    let mut flags = Vec::with_capacity(images.len());
    for img in images {
        let hit = rng.gen::<f64>() < config.augment_prob;
        match (hit, g) {
            (true, Some(g)) => {
                out.push(gaussian_blur(
                    &g.translate(img)?,
                    config.blur_kernel,
                    config.blur_sigma,
                )?);
                flags.push(true);
            }
            _ => {
                out.push(img.clone());
                flags.push(false);
            }
        }
    }
    Ok(AugmentedBatch {
        images: out,
        masks: masks.to_vec(),
        augmented: flags,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean soft Dice on the validation set (checkpoint metric).
    pub val_soft_dice: f64,
    /// Mean thresholded Dice on the validation set.
    pub val_dice: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub max_pre_clip_norm: f64,
    pub max_post_clip_norm: f64,
    pub augmented_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct SegTrainer {
    pub unet: UNet,
    pub opt: Sgd,
    pub next_epoch: usize,
    pub iteration: u64,
    pub history: Vec<SegEpoch>,
    pub best: Option<(usize, UNet)>,
}

impl SegTrainer {
    pub fn new(unet: UNet, config: &SegTrainConfig) -> Self {
        Self {
            unet,
            opt: Sgd::new(config.sgd),
            next_epoch: 0,
            iteration: 0,
            history: Vec::new(),
            best: None,
        }
    }

    /// Best-validation model, or the current one if no epoch has run.
    pub fn best_model(&self) -> &UNet {
        self.best.as_ref().map_or(&self.unet, |(_, m)| m)
    }

    pub fn to_archive(&mut self, config: &SegTrainConfig) -> Result<Archive> {
        let mut ar = Archive::new();
        ar.set_json("kind", &"unet")?;
        ar.set_json("model_spec", &self.unet.spec)?;
        ar.set_json("train_config", config)?;
        ar.set_json("next_epoch", &self.next_epoch)?;
        ar.set_json("iteration", &self.iteration)?;
        ar.set_json("history", &self.history)?;
        ar.push_module("model", &mut self.unet);
        ar.push_sgd("opt", &self.opt)?;
        if let Some((epoch, m)) = &mut self.best {
            ar.set_json("best_epoch", epoch)?;
            ar.push_module("best", m);
        }
        Ok(ar)
    }

    pub fn from_archive(ar: &Archive) -> Result<(Self, SegTrainConfig)> {
        let kind: String = ar.json("kind")?;
        if kind != "unet" {
            return Err(Error::Checkpoint(format!("expected a unet checkpoint, got `{kind}`")));
        }
        let spec: UNetSpec = ar.json("model_spec")?;
        let config: SegTrainConfig = ar.json("train_config")?;
        let mut unet = UNet::new(&spec, 0)?;
        ar.load_module("model", &mut unet)?;
        let mut t = SegTrainer::new(unet, &config);
        t.opt = ar.sgd("opt")?;
        t.next_epoch = ar.json("next_epoch")?;
        t.iteration = ar.json("iteration")?;
        t.history = ar.json("history")?;
        if ar.has_group("best") {
            let mut m = t.unet.clone();
            ar.load_module("best", &mut m)?;
            t.best = Some((ar.json("best_epoch")?, m));
        }
        Ok((t, config))
    }
}

/// Loads the best model of a U-Net checkpoint for inference.
pub fn load_unet(ar: &Archive) -> Result<UNet> {
    let (t, _) = SegTrainer::from_archive(ar)?;
    Ok(t.best_model().clone())
}

fn batch_tensor(images: &[Image2D]) -> Tensor {
    let (h, w) = images[0].dims();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        data.extend_from_slice(img.values());
    }
    Tensor::from_vec(images.len(), 1, h, w, data)
}

/// Mean soft and thresholded Dice of `model` on `slices`.
pub fn validation_dice(model: &UNet, slices: &[PreparedSlice], threshold: f32) -> Result<(f64, f64)> {
    if slices.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    let mut soft = 0.0;
    let mut hard = 0.0;
    for chunk in slices.chunks(16) {
        let imgs: Vec<Image2D> = chunk.iter().map(|s| s.image.clone()).collect();
        for img in &imgs {
            model.check_input(img)?;
        }
        let prob = model.infer(&batch_tensor(&imgs));
        for (i, s) in chunk.iter().enumerate() {
            let p: Vec<f64> = prob.item(i).iter().map(|&v| v as f64).collect();
            soft += 1.0 - soft_dice_grad(&p, s.lung_mask.values()).0;
            let pred = BinaryMask::new(
                s.image.height(),
                s.image.width(),
                prob.item(i).iter().map(|&v| v >= threshold).collect(),
            )?;
            hard += crate::evaluation::dice(&pred, &s.lung_mask)?;
        }
    }
    let n = slices.len() as f64;
    Ok((soft / n, hard / n))
}

/// Runs the remaining epochs. `g` enables augmentation; `on_epoch` returns
/// `false` to stop early (used for checkpoint-and-halt).
pub fn train_segmenter(
    train: &[PreparedSlice],
    val: &[PreparedSlice],
    g: Option<&Generator>,
    trainer: &mut SegTrainer,
    config: &SegTrainConfig,
    mut on_epoch: impl FnMut(&mut SegTrainer) -> Result<bool>,
) -> Result<()> {
    config.validate()?;
    if trainer.next_epoch >= config.epochs {
        return Ok(());
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let iters_per_epoch = train.len().div_ceil(config.batch_size);
    let schedule = config.schedule_for(iters_per_epoch);
    while trainer.next_epoch < config.epochs {
        let epoch = trainer.next_epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_n(config.seed, "seg-epoch", epoch as u64));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut max_pre: f64 = 0.0;
        let mut max_post: f64 = 0.0;
        let mut n_aug = 0usize;
        let mut lr = schedule.base_lr;
        for idx in order.chunks(config.batch_size) {
            let images: Vec<Image2D> = idx.iter().map(|&i| train[i].image.clone()).collect();
            let masks: Vec<BinaryMask> = idx.iter().map(|&i| train[i].lung_mask.clone()).collect();
            let batch = augment_batch(&images, &masks, g, &mut rng, config)?;
            n_aug += batch.augmented.iter().filter(|&&a| a).count();
            let x = batch_tensor(&batch.images);
            let u = &mut trainer.unet;
            u.zero_grad();
            let (prob, cache) = u.forward(&x, &mut Ctx::train(&mut rng));
            let n = idx.len();
            let mut dprob = prob.zeros_like();
            let mut loss = 0.0;
            for i in 0..n {
                let p: Vec<f64> = prob.item(i).iter().map(|&v| v as f64).collect();
                let (l, dp) = dice_focal_grad(&p, batch.masks[i].values(), config.focal_gamma)?;
                loss += l / n as f64;
                for (d, g) in dprob.item_mut(i).iter_mut().zip(dp) {
                    *d = (g / n as f64) as f32;
                }
            }
            if !loss.is_finite() {
                return Err(Error::TrainingFailure(format!(
                    "non-finite segmentation loss at iteration {}",
                    trainer.iteration
                )));
            }
            u.backward(&cache, &dprob);
            let mut params = u.params_mut();
            let pre = clip_grad_norm(&mut params, config.clip_norm) as f64;
            let post = grad_norm(&params) as f64;
            if !(post <= config.clip_norm as f64 + 1e-6) {
                return Err(Error::TrainingFailure(format!(
                    "post-clip gradient norm {post} exceeds {}",
                    config.clip_norm
                )));
            }
            lr = cyclic_lr(trainer.iteration, &schedule);
            trainer.opt.step(&mut params, lr as f32);
            trainer.iteration += 1;
            loss_sum += loss * n as f64;
            max_pre = max_pre.max(pre);
            max_post = max_post.max(post);
        }
        if !trainer.unet.all_finite() {
            return Err(Error::TrainingFailure(format!(
                "non-finite U-Net parameters after epoch {epoch}"
            )));
        }
        let (val_soft_dice, val_dice) = validation_dice(&trainer.unet, val, config.threshold)?;
        let record = SegEpoch {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_soft_dice,
            val_dice,
            lr,
            max_pre_clip_norm: max_pre,
            max_post_clip_norm: max_post,
            augmented_fraction: n_aug as f64 / train.len() as f64,
        };
        let better = trainer
            .best
            .as_ref()
            .and_then(|(e, _)| trainer.history.iter().find(|h| h.epoch == *e))
            .is_none_or(|b| record.val_soft_dice > b.val_soft_dice);
        if better {
            trainer.best = Some((epoch, trainer.unet.clone()));
        }
        trainer.history.push(record);
        trainer.next_epoch += 1;
        if !on_epoch(trainer)? {
            break;
        }
    }
    Ok(())
}

pub fn write_history_csv(history: &[SegEpoch], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "train_loss",
        "val_dice",
        "val_soft_dice",
        "lr",
        "max_pre_clip_norm",
        "max_post_clip_norm",
    ])?;
    for h in history {
        w.write_record(&[
            h.epoch.to_string(),
            h.train_loss.to_string(),
            h.val_dice.to_string(),
            h.val_soft_dice.to_string(),
            h.lr.to_string(),
            h.max_pre_clip_norm.to_string(),
            h.max_post_clip_norm.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
