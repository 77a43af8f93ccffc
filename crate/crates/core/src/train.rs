//! Translation passes, the alternating update schedule, the training loop
//! and test-time deblurring.
//!
//! Every random draw of an epoch (batch indices, crops, flips, code noise)
//! comes from one stream keyed by `(master_seed, epoch)` and is consumed in
//! a fixed order, so resuming from an epoch checkpoint replays the remaining
//! epochs exactly.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use unblur_autograd::{Graph, Tensor, Var};

use crate::checkpoint::{config_hash, Checkpoint};
use crate::config::{Components, TrainConfig};
use crate::error::{Error, Result};
use crate::features::{self, Depth, FeatureExtractor};
use crate::image::{self, ImageTensor};
use crate::losses::{self, LossBreakdown, LossComponents, TaskPreset};
use crate::manifest::Manifest;
use crate::nets::{self, init_model, role_of, Binder, BlurCode, BlurPosterior, Domain, ModelState, Role};
use crate::optim::{clip_grad_norm, Adam};
use crate::seed;

pub const METRICS_FILE: &str = "metrics.tsv";
pub const CONFIG_ECHO_FILE: &str = "config.txt";
pub const METRICS_HEADER: &str = "epoch\titer\tkl\tadv_ds\tadv_db\tcycle\tperceptual\ttotal\tlr";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch_{epoch:04}.safetensors")
}

/// Learning rate of a (0-based) epoch: `lr0` over the flat phase, then
/// `lr0·γ^(epoch − epochs_flat + 1)` with `γ = 0.01^(1/epochs_decay)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.total_epochs() {
        return Err(Error::Param(format!(
            "epoch {epoch} outside schedule of {} epochs",
            cfg.total_epochs()
        )));
    }
    if epoch < cfg.epochs_flat {
        return Ok(cfg.lr0);
    }
    let gamma = 0.01f64.powf(1.0 / cfg.epochs_decay as f64);
    Ok(cfg.lr0 * gamma.powi((epoch - cfg.epochs_flat + 1) as i32))
}

/// One training batch: equally many blurred and sharp crops plus the
/// standard-normal noise for the forward and backward blur codes.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub b: Tensor<f32>,
    pub s: Tensor<f32>,
    pub noise_fwd: Tensor<f32>,
    pub noise_bwd: Tensor<f32>,
}

/// Images of one domain held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Vec<ImageTensor>,
}

impl Dataset {
    pub fn new(images: Vec<ImageTensor>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        Ok(Dataset { images })
    }

    /// Loads every usable record of a manifest file.
    pub fn load(manifest_path: &Path, channels: usize) -> Result<Self> {
        let (manifest, base) = Manifest::read(manifest_path)?;
        let images = manifest
            .usable()
            .map(|r| ImageTensor::load(&base.join(&r.path), Some(channels)))
            .collect::<Result<Vec<_>>>()?;
        if images.is_empty() {
            return Err(Error::Data(format!(
                "{}: no usable images",
                manifest_path.display()
            )));
        }
        Ok(Dataset { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    fn check_crop(&self, crop: usize) -> Result<()> {
        match self.images.iter().find(|i| i.height() < crop || i.width() < crop) {
            Some(i) => Err(Error::Data(format!(
                "image of {}x{} is smaller than the {crop}-pixel crop",
                i.height(),
                i.width()
            ))),
            None => Ok(()),
        }
    }

    /// Uniform draw with replacement, random crop, optional mirror.
    fn sample(&self, rng: &mut ChaCha8Rng, crop: usize, flips: bool) -> Result<ImageTensor> {
        let img = &self.images[rng.random_range(0..self.images.len())];
        let y0 = rng.random_range(0..=img.height() - crop);
        let x0 = rng.random_range(0..=img.width() - crop);
        let flip = flips && rng.random_bool(0.5);
        img.crop(y0, x0, crop, flip)
    }
}

fn draw_batch(
    rng: &mut ChaCha8Rng,
    blurred: &Dataset,
    sharp: &Dataset,
    cfg: &TrainConfig,
) -> Result<Batch> {
    let crop = cfg.net.crop_size;
    let flips = cfg.task_preset != TaskPreset::Text;
    let n = cfg.batch_size;
    let b = (0..n)
        .map(|_| blurred.sample(rng, crop, flips))
        .collect::<Result<Vec<_>>>()?;
    let s = (0..n)
        .map(|_| sharp.sample(rng, crop, flips))
        .collect::<Result<Vec<_>>>()?;
    let d = cfg.net.latent_dim;
    let mut noise = || Tensor::from_fn(vec![n, d], |_| rng.sample::<f32, _>(StandardNormal));
    let noise_fwd = noise();
    let noise_bwd = noise();
    Ok(Batch {
        b: image::stack(&b)?,
        s: image::stack(&s)?,
        noise_fwd,
        noise_bwd,
    })
}

/// Tape nodes of the forward translation.
struct Forward {
    s_b: Var,
    b_s: Option<Var>,
    posterior: Option<(Var, Var)>,
    code: Option<Var>,
}

/// `s_b = G_S(E_B^c(b), z_b)` and, with the blurring branch,
/// `b_s = G_B(E_S^c(s), z_b)`; one code `z_b` drawn from `E^b(b)` feeds both.
fn forward_pass(
    g: &mut Graph<f32>,
    binder: &mut Binder,
    comps: Components,
    b: Var,
    s: Var,
    noise: Var,
) -> Forward {
    let cb = binder.content_encoder(g, Domain::Blurred, b);
    let (posterior, code) = if comps.blur_encoder {
        let (mu, lv) = binder.blur_encoder(g, b);
        (Some((mu, lv)), Some(nets::reparameterize(g, mu, lv, noise)))
    } else {
        (None, None)
    };
    let s_b = binder.generator(g, Domain::Sharp, cb, code);
    let b_s = comps.blurring_branch.then(|| {
        let cs = binder.content_encoder(g, Domain::Sharp, s);
        binder.generator(g, Domain::Blurred, cs, code)
    });
    Forward {
        s_b,
        b_s,
        posterior,
        code,
    }
}

/// Tape nodes of the backward translation.
struct Backward {
    b_hat: Var,
    s_hat: Option<Var>,
    code: Option<Var>,
}

/// `b̂ = G_B(E_S^c(s_b), z)` and `ŝ = G_S(E_B^c(b_s), z)` with `z` drawn from
/// `E^b(b_s)`. Without the blurring branch only `b̂` exists and it reuses the
/// forward code.
fn backward_pass(
    g: &mut Graph<f32>,
    binder: &mut Binder,
    comps: Components,
    fwd: &Forward,
    noise: Var,
) -> Backward {
    let code = match (comps.blur_encoder, fwd.b_s) {
        (true, Some(b_s)) => {
            let (mu, lv) = binder.blur_encoder(g, b_s);
            Some(nets::reparameterize(g, mu, lv, noise))
        }
        _ => fwd.code,
    };
    let cs = binder.content_encoder(g, Domain::Sharp, fwd.s_b);
    let b_hat = binder.generator(g, Domain::Blurred, cs, code);
    let s_hat = fwd.b_s.map(|b_s| {
        let cb = binder.content_encoder(g, Domain::Blurred, b_s);
        binder.generator(g, Domain::Sharp, cb, code)
    });
    Backward { b_hat, s_hat, code }
}

/// All images of one forward/backward translation of a single pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationBundle {
    pub b: ImageTensor,
    pub s: ImageTensor,
    pub s_b: ImageTensor,
    pub b_s: Option<ImageTensor>,
    pub b_hat: ImageTensor,
    pub s_hat: Option<ImageTensor>,
    pub posterior_b: Option<BlurPosterior>,
    pub code_fwd: Option<BlurCode>,
    pub code_bwd: Option<BlurCode>,
}

fn row(g: &Graph<f32>, v: Var) -> Vec<f32> {
    g.value(v).data().to_vec()
}

/// Runs both translations on one `(b, s)` pair with the given code noise.
pub fn forward_backward_translate(
    state: &ModelState,
    comps: Components,
    b: &ImageTensor,
    s: &ImageTensor,
    noise_fwd: &[f32],
    noise_bwd: &[f32],
) -> Result<TranslationBundle> {
    if b.dims() != s.dims() {
        return Err(Error::Shape(format!("b is {:?} but s is {:?}", b.dims(), s.dims())));
    }
    let (c, h, w) = b.dims();
    if c != state.config.image_channels || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Shape(format!(
            "inputs must have {} channels and sides divisible by 8, got {:?}",
            state.config.image_channels,
            b.dims()
        )));
    }
    if comps.blur_encoder != state.config.blur_encoder {
        return Err(Error::Param("components do not match the model's blur encoder".into()));
    }
    let d = state.config.latent_dim;
    if noise_fwd.len() != d || noise_bwd.len() != d {
        return Err(Error::Shape(format!("noise vectors must have length {d}")));
    }
    let mut g = Graph::new();
    let mut binder = Binder::frozen(state);
    let bv = g.constant(b.to_tensor());
    let sv = g.constant(s.to_tensor());
    let nf = g.constant(Tensor::new(vec![1, d], noise_fwd.to_vec()));
    let nb = g.constant(Tensor::new(vec![1, d], noise_bwd.to_vec()));
    let fwd = forward_pass(&mut g, &mut binder, comps, bv, sv, nf);
    let bwd = backward_pass(&mut g, &mut binder, comps, &fwd, nb);
    let img = |g: &Graph<f32>, v: Var| ImageTensor::from_batch(g.value(v), 0);
    let posterior_b = fwd.posterior.map(|(mu, lv)| BlurPosterior {
        mu: row(&g, mu),
        log_var: row(&g, lv),
    });
    let code_fwd = fwd.code.map(|z| BlurCode {
        z_b: row(&g, z),
        noise: noise_fwd.to_vec(),
    });
    let code_bwd = bwd.code.map(|z| BlurCode {
        z_b: row(&g, z),
        noise: if fwd.b_s.is_some() { noise_bwd } else { noise_fwd }.to_vec(),
    });
    Ok(TranslationBundle {
        b: b.clone(),
        s: s.clone(),
        s_b: img(&g, fwd.s_b)?,
        b_s: fwd.b_s.map(|v| img(&g, v)).transpose()?,
        b_hat: img(&g, bwd.b_hat)?,
        s_hat: bwd.s_hat.map(|v| img(&g, v)).transpose()?,
        posterior_b,
        code_fwd,
        code_bwd,
    })
}

/// Test-time deblurring: `G_S(E_B^c(b), μ)` with the code noise fixed to 0.
pub fn deblur(state: &ModelState, b: &ImageTensor) -> Result<ImageTensor> {
    let (c, h, w) = b.dims();
    if c != state.config.image_channels || h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "input must have {} channels and sides divisible by 8, got {c}x{h}x{w}",
            state.config.image_channels
        )));
    }
    let mut g = Graph::new();
    let mut binder = Binder::frozen(state);
    let x = g.constant(b.to_tensor());
    let content = binder.content_encoder(&mut g, Domain::Blurred, x);
    let code = state.config.blur_encoder.then(|| binder.blur_encoder(&mut g, x).0);
    let out = binder.generator(&mut g, Domain::Sharp, content, code);
    ImageTensor::from_batch(g.value(out), 0)
}

fn finite(term: &'static str, v: f64, iteration: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term, iteration })
    }
}

/// Model, optimizers and loss configuration for the update steps.
pub struct Trainer {
    pub config: TrainConfig,
    pub state: ModelState,
    pub opt_d: Adam,
    pub opt_g: Adam,
    extractor: Option<Box<dyn FeatureExtractor<f32>>>,
}

impl Trainer {
    /// Fresh model initialized from the master seed.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = init_model(&config.network(), config.master_seed)?;
        let (b1, b2) = config.adam_betas;
        Trainer::with_state(config, state, Adam::new(b1, b2), Adam::new(b1, b2))
    }

    pub fn from_checkpoint(config: &TrainConfig, ck: Checkpoint) -> Result<Self> {
        config.validate()?;
        if ck.state.config != config.network() {
            return Err(Error::Config("checkpoint network does not match the config".into()));
        }
        Trainer::with_state(config, ck.state, ck.opt_d, ck.opt_g)
    }

    fn with_state(config: &TrainConfig, state: ModelState, opt_d: Adam, opt_g: Adam) -> Result<Self> {
        let extractor = if config.components().perceptual {
            Some(features::build(
                config.vgg19_weights.as_deref(),
                config.net.image_channels,
                Depth::Conv3_3,
            )?)
        } else {
            None
        };
        Ok(Trainer {
            config: config.clone(),
            state,
            opt_d,
            opt_g,
            extractor,
        })
    }

    pub fn checkpoint(&self, epoch: u64) -> Checkpoint {
        Checkpoint {
            state: self.state.clone(),
            opt_d: self.opt_d.clone(),
            opt_g: self.opt_g.clone(),
            epoch,
            config_text: self.config.echo(),
        }
    }

    fn apply(
        &mut self,
        g: &Graph<f32>,
        loss: Var,
        vars: Vec<(String, Var)>,
        lr: f64,
        discriminator: bool,
    ) -> Result<()> {
        let mut grads = g.backward(loss);
        let mut named: Vec<(String, Tensor<f32>)> = vars
            .into_iter()
            .filter_map(|(n, v)| grads.take(v).map(|t| (n, t)))
            .collect();
        if self.config.grad_clip > 0.0 {
            clip_grad_norm(&mut named, self.config.grad_clip);
        }
        let opt = if discriminator { &mut self.opt_d } else { &mut self.opt_g };
        opt.step(&mut self.state, &named, lr)
    }

    /// One discriminator update; returns the discriminator loss.
    pub fn discriminator_step(&mut self, batch: &Batch, lr: f64, iteration: u64) -> Result<f64> {
        let comps = self.config.components();
        let mut g = Graph::new();
        let (loss, vars) = {
            let mut binder = Binder::new(&self.state, |n| role_of(n) == Role::Discriminator);
            let b = g.constant(batch.b.clone());
            let s = g.constant(batch.s.clone());
            let noise = g.constant(batch.noise_fwd.clone());
            let fwd = forward_pass(&mut g, &mut binder, comps, b, s, noise);
            let real_s = binder.discriminator(&mut g, Domain::Sharp, s);
            let fake_s = binder.discriminator(&mut g, Domain::Sharp, fwd.s_b);
            let mut loss = losses::disc_adv_term(&mut g, &real_s, &fake_s);
            if let Some(b_s) = fwd.b_s {
                let real_b = binder.discriminator(&mut g, Domain::Blurred, b);
                let fake_b = binder.discriminator(&mut g, Domain::Blurred, b_s);
                let lb = losses::disc_adv_term(&mut g, &real_b, &fake_b);
                loss = g.add(loss, lb);
            }
            let vars: Vec<(String, Var)> = binder
                .trainable_vars(&g)
                .into_iter()
                .map(|(n, v)| (n.to_string(), v))
                .collect();
            (loss, vars)
        };
        let value = finite("discriminator", g.scalar(loss) as f64, iteration)?;
        self.apply(&g, loss, vars, lr, true)?;
        Ok(value)
    }

    /// One joint update of encoders and generators; returns the loss
    /// breakdown of this step (before the update).
    pub fn generator_step(&mut self, batch: &Batch, lr: f64, iteration: u64) -> Result<LossBreakdown> {
        let comps = self.config.components();
        let weights = self.config.effective_weights();
        let mut g = Graph::new();
        let (terms, total, vars) = {
            let mut binder = Binder::new(&self.state, |n| role_of(n) != Role::Discriminator);
            let b = g.constant(batch.b.clone());
            let s = g.constant(batch.s.clone());
            let nf = g.constant(batch.noise_fwd.clone());
            let nb = g.constant(batch.noise_bwd.clone());
            let fwd = forward_pass(&mut g, &mut binder, comps, b, s, nf);
            let bwd = backward_pass(&mut g, &mut binder, comps, &fwd, nb);

            let ds = binder.discriminator(&mut g, Domain::Sharp, fwd.s_b);
            let adv_ds = losses::gen_adv_term(&mut g, &ds);
            let adv_db = fwd.b_s.map(|b_s| {
                let db = binder.discriminator(&mut g, Domain::Blurred, b_s);
                losses::gen_adv_term(&mut g, &db)
            });
            let kl = match (comps.kl, fwd.posterior) {
                (true, Some((mu, lv))) => Some(losses::kl_term(&mut g, mu, lv)),
                _ => None,
            };
            let mut cycle = losses::l1_term(&mut g, b, bwd.b_hat);
            if let Some(s_hat) = bwd.s_hat {
                let cs = losses::l1_term(&mut g, s, s_hat);
                cycle = g.add(cycle, cs);
            }
            let perceptual = match &self.extractor {
                Some(ex) => Some(losses::perceptual_term(&mut g, ex.as_ref(), fwd.s_b, b)?),
                None => None,
            };

            let mut adv = adv_ds;
            if let Some(a) = adv_db {
                adv = g.add(adv, a);
            }
            let mut total = g.scale(adv, weights.lambda_adv);
            let weighted = [
                (kl, weights.lambda_kl),
                (Some(cycle), weights.lambda_cc),
                (perceptual, weights.lambda_p),
            ];
            for (term, w) in weighted {
                if let Some(t) = term {
                    let wt = g.scale(t, w);
                    total = g.add(total, wt);
                }
            }
            let vars: Vec<(String, Var)> = binder
                .trainable_vars(&g)
                .into_iter()
                .map(|(n, v)| (n.to_string(), v))
                .collect();
            ((adv_ds, adv_db, kl, cycle, perceptual), total, vars)
        };
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v) as f64);
        let (adv_ds, adv_db, kl, cycle, perceptual) = terms;
        let components = LossComponents {
            kl: finite("kl", val(kl), iteration)?,
            adv_ds: finite("adv_ds", val(Some(adv_ds)), iteration)?,
            adv_db: finite("adv_db", val(adv_db), iteration)?,
            cycle: finite("cycle", val(Some(cycle)), iteration)?,
            perceptual: finite("perceptual", val(perceptual), iteration)?,
        };
        finite("total", g.scalar(total) as f64, iteration)?;
        let breakdown = losses::total_loss(&components, &weights, self.config.task_preset)?;
        self.apply(&g, total, vars, lr, false)?;
        Ok(breakdown)
    }

    /// `d_steps_per_g` discriminator updates (one per batch in `d_batches`)
    /// followed by one encoder/generator update.
    pub fn train_step(
        &mut self,
        d_batches: &[Batch],
        g_batch: &Batch,
        lr: f64,
        iteration: u64,
    ) -> Result<LossBreakdown> {
        for batch in d_batches {
            self.discriminator_step(batch, lr, iteration)?;
        }
        self.generator_step(g_batch, lr, iteration)
    }
}

fn iters_per_epoch(cfg: &TrainConfig, blurred: &Dataset, sharp: &Dataset) -> usize {
    if cfg.iters_per_epoch > 0 {
        cfg.iters_per_epoch
    } else {
        (blurred.len().max(sharp.len()) / cfg.batch_size).max(1)
    }
}

/// Random stream for one epoch.
pub fn epoch_rng(master_seed: u64, epoch: usize) -> ChaCha8Rng {
    seed::rng(seed::derive(seed::derive_named(master_seed, "batches"), epoch as u64))
}

fn metrics_line(epoch: usize, iter: u64, l: &LossBreakdown, lr: f64) -> String {
    format!(
        "{epoch}\t{iter}\t{}\t{}\t{}\t{}\t{}\t{}\t{lr}\n",
        l.kl, l.adv_ds, l.adv_db, l.cycle, l.perceptual, l.total
    )
}

/// Keeps the header and the lines of epochs before `epoch`.
fn truncate_metrics(path: &Path, epoch: usize) -> Result<String> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = format!("{METRICS_HEADER}\n");
    for line in text.lines().skip(1) {
        let e: Option<usize> = line.split('\t').next().and_then(|f| f.parse().ok());
        if e.is_some_and(|e| e < epoch) {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Trains on datasets already in memory. See [`train`].
pub fn train_datasets(
    cfg: &TrainConfig,
    sharp: &Dataset,
    blurred: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    cfg.validate()?;
    sharp.check_crop(cfg.net.crop_size)?;
    blurred.check_crop(cfg.net.crop_size)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let echo = cfg.echo();
    let echo_path = out_dir.join(CONFIG_ECHO_FILE);
    std::fs::write(&echo_path, &echo).map_err(|e| Error::io(&echo_path, e))?;

    let (mut trainer, start) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if config_hash(&ck.config_text) != config_hash(&echo) {
                return Err(Error::Config(format!(
                    "{}: checkpoint was written with a different configuration",
                    p.display()
                )));
            }
            let start = ck.epoch as usize;
            (Trainer::from_checkpoint(cfg, ck)?, start)
        }
        None => (Trainer::new(cfg)?, 0),
    };
    let total_epochs = cfg.total_epochs();
    if start >= total_epochs {
        return resume
            .map(Path::to_path_buf)
            .ok_or_else(|| Error::Param("nothing to train".into()));
    }

    let metrics_path = out_dir.join(METRICS_FILE);
    let kept = truncate_metrics(&metrics_path, if resume.is_some() { start } else { 0 })?;
    std::fs::write(&metrics_path, kept).map_err(|e| Error::io(&metrics_path, e))?;
    let file = std::fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = std::io::BufWriter::new(file);

    let iters = iters_per_epoch(cfg, blurred, sharp);
    let mut last = None;
    for epoch in start..total_epochs {
        let lr = lr_at(epoch, cfg)?;
        let mut rng = epoch_rng(cfg.master_seed, epoch);
        let mut sum = LossBreakdown::default();
        for it in 0..iters {
            let iteration = (epoch * iters + it) as u64;
            let d_batches = (0..cfg.d_steps_per_g)
                .map(|_| draw_batch(&mut rng, blurred, sharp, cfg))
                .collect::<Result<Vec<_>>>()?;
            let g_batch = draw_batch(&mut rng, blurred, sharp, cfg)?;
            let step = trainer.train_step(&d_batches, &g_batch, lr, iteration);
            let l = match step {
                Ok(l) => l,
                Err(e) => {
                    let _ = log.flush();
                    return Err(e);
                }
            };
            if iteration.is_multiple_of(cfg.log_every as u64) {
                log.write_all(metrics_line(epoch, iteration, &l, lr).as_bytes())
                    .map_err(|e| Error::io(&metrics_path, e))?;
            }
            sum.total += l.total;
            sum.cycle += l.cycle;
        }
        log.flush().map_err(|e| Error::io(&metrics_path, e))?;
        let path = out_dir.join(checkpoint_name(epoch + 1));
        trainer.checkpoint(epoch as u64 + 1).save(&path)?;
        log::info!(
            "epoch {}/{}: lr {lr:.3e}, mean total {:.4}, mean cycle {:.4}",
            epoch + 1,
            total_epochs,
            sum.total / iters as f64,
            sum.cycle / iters as f64
        );
        last = Some(path);
    }
    Ok(last.expect("at least one epoch ran"))
}

/// Runs the schedule from scratch or from `resume`, writing a checkpoint per
/// epoch, `metrics.tsv` and the resolved `config.txt` into `out_dir`.
/// Returns the final checkpoint path.
pub fn train(
    cfg: &TrainConfig,
    sharp_manifest: &Path,
    blurred_manifest: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    let channels = cfg.net.image_channels;
    let sharp = Dataset::load(sharp_manifest, channels)?;
    let blurred = Dataset::load(blurred_manifest, channels)?;
    train_datasets(cfg, &sharp, &blurred, out_dir, resume)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AblationPreset;

    fn tiny_cfg() -> TrainConfig {
        let mut c = TrainConfig::toy(1);
        c.net.base_width = 4;
        c.net.latent_dim = 2;
        c.net.disc_scales = 1;
        c.net.crop_size = 16;
        c.batch_size = 2;
        c.epochs_flat = 1;
        c.epochs_decay = 1;
        c.iters_per_epoch = 2;
        c
    }

    fn images(n: usize, seed_value: u64) -> Dataset {
        let mut r = seed::rng(seed_value);
        Dataset::new(
            (0..n)
                .map(|_| ImageTensor::from_fn(1, 20, 20, |_, _, _| r.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn schedule_examples() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c).unwrap(), 2e-4);
        assert_eq!(lr_at(39, &c).unwrap(), 2e-4);
        assert!((lr_at(79, &c).unwrap() - 2e-6).abs() < 1e-18);
        assert!(lr_at(80, &c).is_err());
    }

    #[test]
    fn generator_step_keeps_tie_and_is_deterministic() {
        let cfg = tiny_cfg();
        let mut rng = epoch_rng(1, 0);
        let batch = draw_batch(&mut rng, &images(3, 1), &images(3, 2), &cfg).unwrap();
        let mut a = Trainer::new(&cfg).unwrap();
        let mut b = Trainer::new(&cfg).unwrap();
        let la = a.train_step(std::slice::from_ref(&batch), &batch, 1e-3, 0).unwrap();
        let lb = b.train_step(std::slice::from_ref(&batch), &batch, 1e-3, 0).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.state, b.state);
        assert_eq!(
            a.state.content_final_layer(Domain::Blurred),
            a.state.content_final_layer(Domain::Sharp)
        );
        let before = Trainer::new(&cfg).unwrap().state;
        assert_ne!(a.state, before);
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let cfg = tiny_cfg();
        let mut rng = epoch_rng(2, 0);
        let batch = draw_batch(&mut rng, &images(3, 1), &images(3, 2), &cfg).unwrap();
        let mut t = Trainer::new(&cfg).unwrap();
        let before = t.state.clone();
        t.train_step(&[batch.clone(), batch.clone()], &batch, 0.0, 0).unwrap();
        assert_eq!(t.state, before);
    }

    #[test]
    fn discriminator_step_touches_only_discriminators() {
        let cfg = tiny_cfg();
        let mut rng = epoch_rng(3, 0);
        let batch = draw_batch(&mut rng, &images(3, 1), &images(3, 2), &cfg).unwrap();
        let mut t = Trainer::new(&cfg).unwrap();
        let before = t.state.clone();
        t.discriminator_step(&batch, 1e-2, 0).unwrap();
        for (name, p) in t.state.params() {
            let changed = p != before.param(name).unwrap();
            assert_eq!(changed, role_of(name) == Role::Discriminator, "{name}");
        }
    }

    #[test]
    fn bundle_fields_follow_the_preset() {
        let cfg = tiny_cfg();
        let t = Trainer::new(&cfg).unwrap();
        let b = images(1, 5).images()[0].crop(0, 0, 16, false).unwrap();
        let s = images(1, 6).images()[0].crop(2, 2, 16, false).unwrap();
        let full = forward_backward_translate(&t.state, cfg.components(), &b, &s, &[0.1, 0.2], &[0.3, -0.1])
            .unwrap();
        assert!(full.b_s.is_some() && full.s_hat.is_some() && full.posterior_b.is_some());
        assert_eq!(full.s_b.dims(), b.dims());
        let again = forward_backward_translate(&t.state, cfg.components(), &b, &s, &[0.1, 0.2], &[0.3, -0.1])
            .unwrap();
        assert_eq!(full, again);

        let mut c = cfg.clone();
        c.ablation_preset = AblationPreset::DeblurOnly;
        let t = Trainer::new(&c).unwrap();
        let bundle = forward_backward_translate(&t.state, c.components(), &b, &s, &[0.0; 2], &[0.0; 2]).unwrap();
        assert!(bundle.b_s.is_none() && bundle.s_hat.is_none() && bundle.posterior_b.is_none());
        assert_eq!(bundle.b_hat.dims(), b.dims());
    }

    #[test]
    fn deblur_is_deterministic_and_shape_preserving() {
        let t = Trainer::new(&tiny_cfg()).unwrap();
        let img = ImageTensor::from_fn(1, 24, 16, |_, y, x| ((y + x) % 5) as f32 * 0.3 - 0.6);
        let a = deblur(&t.state, &img).unwrap();
        assert_eq!(a.dims(), img.dims());
        assert_eq!(a, deblur(&t.state, &img).unwrap());
        assert!(deblur(&t.state, &ImageTensor::filled(1, 20, 16, 0.0)).is_err());
    }

    #[test]
    fn training_writes_checkpoints_and_resumes_exactly() {
        let cfg = tiny_cfg();
        let (sharp, blurred) = (images(4, 7), images(4, 8));
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("full");
        let last = train_datasets(&cfg, &sharp, &blurred, &full, None).unwrap();
        assert_eq!(last, full.join(checkpoint_name(2)));
        assert!(full.join(checkpoint_name(1)).exists());
        let full_log = std::fs::read_to_string(full.join(METRICS_FILE)).unwrap();
        assert_eq!(full_log.lines().count(), 1 + 4);

        let resumed = dir.path().join("resumed");
        train_datasets(&cfg, &sharp, &blurred, &resumed, Some(&full.join(checkpoint_name(1)))).unwrap();
        let resumed_log = std::fs::read_to_string(resumed.join(METRICS_FILE)).unwrap();
        let tail = |s: &str| s.lines().filter(|l| l.starts_with("1\t")).map(String::from).collect::<Vec<_>>();
        assert_eq!(tail(&full_log), tail(&resumed_log));
        assert_eq!(
            Checkpoint::load(&full.join(checkpoint_name(2))).unwrap().state,
            Checkpoint::load(&resumed.join(checkpoint_name(2))).unwrap().state
        );

        let mut other = cfg.clone();
        other.lr0 = 1e-3;
        let err = train_datasets(&other, &sharp, &blurred, &resumed, Some(&last)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
