//! The optimization loop: alternating discriminator/generator updates,
//! momentum-twin and queue maintenance, the learning-rate schedule,
//! checkpointing with exact resume, and metric logging.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use rand::Rng;

use crate::bank::{MomentumTwin, NegativeQueue};
use crate::checkpoint::{
    collect_adam, collect_params, restore_adam, restore_params, Checkpoint,
};
use crate::config::{Preset, RunDirs, TrainConfig};
use crate::data::{load_image, save_image, single_image_batch, IndexSampler, UnpairedDataset};
use crate::error::{Error, Result};
use crate::networks::{
    default_taps, merge_tile_grads, split_tiles, Discriminator, DiscriminatorSpec,
    DiscriminatorVariant, Generator, GeneratorSpec, GeneratorVariant, HeadSet,
};
use crate::nn::{GradMode, HasParams, Param};
use crate::objectives::{
    gan_discriminator_score_grads, gan_generator_score_grad, gan_losses, r1_accumulate_param_grads,
    r1_penalty, term_backward, term_forward, term_nce_loss, KeyPath, NegativeContext,
    NegativeSource, TranslationNets,
};
use crate::optim::Adam;
use crate::seeds::stream_rng;

/// Loss components of one training step.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub gan_g: f32,
    pub gan_d: f32,
    pub nce_x: f32,
    pub nce_y: Option<f32>,
    pub r1: Option<f32>,
}

impl StepLosses {
    pub fn all_finite(&self) -> bool {
        self.gan_g.is_finite()
            && self.gan_d.is_finite()
            && self.nce_x.is_finite()
            && self.nce_y.map(|v| v.is_finite()).unwrap_or(true)
            && self.r1.map(|v| v.is_finite()).unwrap_or(true)
    }
}

/// Wrapper presenting every generator-side parameter (generator, heads, and
/// the separate key path when present) as one optimizer target.
struct GeneratorSide<'a> {
    nets: &'a mut TranslationNets<f32>,
}

impl HasParams<f32> for GeneratorSide<'_> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<f32>)) {
        self.nets.gen.visit_params(f);
        self.nets.heads.visit_params(f);
        if let Some(kp) = &self.nets.key_path {
            kp.gen.visit_params(f);
            kp.heads.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f32>)) {
        self.nets.gen.visit_params_mut(f);
        self.nets.heads.visit_params_mut(f);
        if let Some(kp) = &mut self.nets.key_path {
            kp.gen.visit_params_mut(f);
            kp.heads.visit_params_mut(f);
        }
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub nets: TranslationNets<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub twin: Option<MomentumTwin<f32>>,
    pub queue: Option<NegativeQueue<f32>>,
    pub sampler: IndexSampler,
    pub iteration: u64,
}

pub fn generator_spec_for(cfg: &TrainConfig) -> GeneratorSpec {
    let variant = match cfg.preset {
        Preset::Sincut => GeneratorVariant::SingleImage,
        _ => GeneratorVariant::Resnet9,
    };
    GeneratorSpec {
        variant,
        input_channels: 3,
        output_channels: 3,
        base_width: cfg.model.base_width,
        tap_layers: default_taps(variant),
    }
}

pub fn discriminator_spec_for(cfg: &TrainConfig) -> DiscriminatorSpec {
    let variant = match cfg.preset {
        Preset::Sincut => DiscriminatorVariant::Tile64,
        _ => DiscriminatorVariant::PatchGan,
    };
    DiscriminatorSpec { variant, input_channels: 3, base_width: cfg.model.disc_base_width }
}

/// Constant for the first half of the epoch budget, then linear decay to 0.
pub fn lr_factor(epoch: u64, total_epochs: usize) -> f64 {
    let half = (total_epochs / 2).max(1) as f64;
    let decay_span = total_epochs as f64 - half;
    let over = (epoch as f64 + 1.0 - half).max(0.0);
    (1.0 - over / (decay_span + 1.0)).max(0.0)
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = stream_rng(cfg.seed, "init", &[]);
        let gen: Generator<f32> = Generator::new(generator_spec_for(&cfg), &mut init_rng)?;
        let heads = HeadSet::new(
            &mut init_rng,
            &gen.tap_channels(),
            cfg.model.hidden_dim,
            cfg.model.embed_dim,
        );
        let disc: Discriminator<f32> = Discriminator::new(discriminator_spec_for(&cfg), &mut init_rng);
        let key_path = if cfg.objective.shared_embedding_weights {
            None
        } else {
            let kgen: Generator<f32> = Generator::new(generator_spec_for(&cfg), &mut init_rng)?;
            let kheads = HeadSet::new(
                &mut init_rng,
                &kgen.tap_channels(),
                cfg.model.hidden_dim,
                cfg.model.embed_dim,
            );
            Some(KeyPath { gen: kgen, heads: kheads })
        };
        let nets = TranslationNets { gen, heads, key_path, disc };
        let external = !matches!(cfg.negative_source, NegativeSource::Internal);
        let twin = external.then(|| MomentumTwin::new(&nets.gen, &nets.heads, cfg.bank.momentum));
        let queue = external.then(|| {
            NegativeQueue::new(
                nets.gen.taps.len(),
                cfg.model.embed_dim,
                cfg.bank.queue_capacity,
            )
        });
        let sampler = IndexSampler::new(cfg.seed, cfg.model.patches_per_layer);
        Ok(Trainer {
            opt_g: Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2),
            opt_d: Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2),
            nets,
            twin,
            queue,
            sampler,
            iteration: 0,
            cfg,
        })
    }

    fn zero_all_grads(&mut self) {
        self.nets.gen.zero_grads();
        self.nets.heads.zero_grads();
        if let Some(kp) = &mut self.nets.key_path {
            kp.gen.zero_grads();
            kp.heads.zero_grads();
        }
        self.nets.disc.zero_grads();
    }

    /// External-negative context for this step; `None` means the contrastive
    /// term is inactive (external-only mode during queue warm-up).
    fn negative_context(&self) -> Option<NegativeContext<f32>> {
        match self.cfg.negative_source {
            NegativeSource::Internal => Some(NegativeContext::internal()),
            NegativeSource::External | NegativeSource::Both => {
                let warm = self
                    .queue
                    .as_ref()
                    .map(|q| q.is_warm(self.cfg.bank.warmup_rows))
                    .unwrap_or(false);
                let include_internal = self.cfg.negative_source == NegativeSource::Both;
                if warm {
                    let queues = self.queue.as_ref().unwrap().sample_all().ok()?;
                    Some(NegativeContext { queues: Some(queues), include_internal })
                } else if include_internal {
                    Some(NegativeContext::internal())
                } else {
                    None
                }
            }
        }
    }

    /// The discriminator consumes tiles in single-image mode, whole images
    /// otherwise.
    fn disc_input(&self, images: &Array4<f32>) -> Result<Array4<f32>> {
        if self.nets.disc.spec.variant == DiscriminatorVariant::Tile64 {
            split_tiles(images, crate::networks::TILE_SIZE)
        } else {
            Ok(images.clone())
        }
    }

    pub fn train_step(&mut self, x: &Array4<f32>, y: &Array4<f32>, lr_scale: f64) -> Result<StepLosses> {
        let it = self.iteration;
        let cfg = self.cfg.clone();
        self.zero_all_grads();

        let flip = cfg.data.flip_equivariance
            && stream_rng(cfg.seed, "flip", &[it]).random_bool(0.5);
        let (_, _, h, w) = x.dim();
        let shapes = self.nets.gen.tap_shapes(h, w);
        let idx_x = self.sampler.sample(2 * it, &shapes);
        let idx_y = self.sampler.sample(2 * it + 1, &shapes);

        // Generate once; the same fake serves the D step (detached) and the
        // G step (with the freshly updated discriminator).
        let term_x = term_forward(&self.nets, x, &idx_x, flip)?;

        // Discriminator update.
        let real_d = self.disc_input(y)?;
        let fake_d = self.disc_input(&term_x.fake)?;
        let (scores_real, caches_real) = self.nets.disc.discriminate(&real_d)?;
        let (scores_fake, caches_fake) = self.nets.disc.discriminate(&fake_d)?;
        let (_, gan_d) = gan_losses(&scores_real, &scores_fake, cfg.objective.gan_mode);
        let (g_real, g_fake) =
            gan_discriminator_score_grads(&scores_real, &scores_fake, cfg.objective.gan_mode);
        self.nets.disc.backward(g_real, &caches_real, GradMode::Accumulate);
        self.nets.disc.backward(g_fake, &caches_fake, GradMode::Accumulate);
        let r1 = if cfg.objective.r1_gamma > 0.0 {
            let r1res = r1_penalty(&self.nets.disc, &real_d, cfg.objective.r1_gamma)?;
            r1_accumulate_param_grads(&mut self.nets.disc, &r1res, cfg.objective.r1_gamma)?;
            Some(r1res.penalty)
        } else {
            None
        };
        self.opt_d.step(&mut self.nets.disc, lr_scale);
        self.nets.disc.zero_grads();

        // Generator + heads update against the updated discriminator.
        let (scores_fake2, caches_fake2) = self.nets.disc.discriminate(&fake_d)?;
        let (gan_g, _) = gan_losses(&scores_fake2, &scores_fake2, cfg.objective.gan_mode);
        let score_grad = gan_generator_score_grad(&scores_fake2, cfg.objective.gan_mode);
        let fake_d_grad = self
            .nets
            .disc
            .backward(score_grad, &caches_fake2, GradMode::SkipParams);
        let fake_grad = if self.nets.disc.spec.variant == DiscriminatorVariant::Tile64 {
            merge_tile_grads(&fake_d_grad, term_x.fake.dim(), crate::networks::TILE_SIZE)
        } else {
            fake_d_grad
        };

        let negs = self.negative_context();
        let mut nce_x = 0f32;
        match (&negs, cfg.objective.lambda_x > 0.0) {
            (Some(negs), true) => {
                let (value, grads) = term_nce_loss(&term_x, &cfg.objective, negs, true)?;
                nce_x = value;
                term_backward(
                    &mut self.nets,
                    &term_x,
                    &grads.expect("grads"),
                    cfg.objective.lambda_x,
                    Some(fake_grad),
                    &cfg.objective,
                )?;
            }
            _ => {
                // Adversarial gradient only.
                let d_deepest = self.nets.gen.decode_backward(
                    fake_grad,
                    &term_x.dec_caches,
                    GradMode::Accumulate,
                );
                let none_taps = vec![None; self.nets.gen.taps.len()];
                let _ = self.nets.gen.encode_backward(
                    d_deepest,
                    &none_taps,
                    &term_x.enc_gen.caches,
                    GradMode::Accumulate,
                );
            }
        }

        let mut nce_y = None;
        if cfg.objective.lambda_y > 0.0 {
            if let Some(negs) = &negs {
                let term_y = term_forward(&self.nets, y, &idx_y, flip)?;
                let (value, grads) = term_nce_loss(&term_y, &cfg.objective, negs, true)?;
                nce_y = Some(value);
                term_backward(
                    &mut self.nets,
                    &term_y,
                    &grads.expect("grads"),
                    cfg.objective.lambda_y,
                    None,
                    &cfg.objective,
                )?;
            }
        }

        self.opt_g.step(&mut GeneratorSide { nets: &mut self.nets }, lr_scale);

        // Momentum twin + dictionary maintenance (external negatives).
        if let (Some(twin), Some(queue)) = (&mut self.twin, &mut self.queue) {
            twin.update_from(&self.nets.gen, &self.nets.heads)?;
            let batch = x.dim().0;
            for n in 0..batch {
                let rows = twin.embed(x, &idx_x, n)?;
                queue.enqueue(&rows)?;
            }
        }

        let losses = StepLosses { gan_g, gan_d, nce_x, nce_y, r1 };
        if !losses.all_finite() {
            let gside = GeneratorSide { nets: &mut self.nets };
            let pnorm = gside.param_sq_norm().sqrt();
            return Err(Error::Aborted(format!(
                "non-finite loss at iteration {it}: gan_g={} gan_d={} nce_x={} nce_y={:?} r1={:?}; generator parameter norm {pnorm:.3e}",
                losses.gan_g, losses.gan_d, losses.nce_x, losses.nce_y, losses.r1
            )));
        }
        self.iteration += 1;
        Ok(losses)
    }

    pub fn save_checkpoint(&self, path: &Path, epoch: u64) -> Result<()> {
        let mut tensors = BTreeMap::new();
        collect_params("gen", &self.nets.gen, &mut tensors);
        collect_params("heads", &self.nets.heads, &mut tensors);
        if let Some(kp) = &self.nets.key_path {
            collect_params("key_gen", &kp.gen, &mut tensors);
            collect_params("key_heads", &kp.heads, &mut tensors);
        }
        collect_params("disc", &self.nets.disc, &mut tensors);
        let mut extra = BTreeMap::new();
        collect_adam("adam_g", &self.opt_g, &mut tensors, &mut extra);
        collect_adam("adam_d", &self.opt_d, &mut tensors, &mut extra);
        if let Some(twin) = &self.twin {
            collect_params("twin_gen", &twin.gen, &mut tensors);
            collect_params("twin_heads", &twin.heads, &mut tensors);
        }
        if let Some(queue) = &self.queue {
            for (l, rows) in queue.state_rows().iter().enumerate() {
                tensors.insert(format!("queue.{l}"), rows.clone().into_dyn());
            }
        }
        let mut param_counts = BTreeMap::new();
        param_counts.insert("gen".to_string(), self.nets.gen.param_count());
        param_counts.insert("heads".to_string(), self.nets.heads.param_count());
        param_counts.insert("disc".to_string(), self.nets.disc.param_count());
        let ckpt = Checkpoint {
            iteration: self.iteration,
            epoch,
            seed: self.cfg.seed,
            gen_spec: self.nets.gen.spec.clone(),
            disc_spec: self.nets.disc.spec.clone(),
            config_toml: self.cfg.to_toml(),
            param_counts,
            extra_u64: extra,
            tensors,
        };
        ckpt.save(path)
    }

    /// Rebuild a trainer from a checkpoint; the continuation reproduces the
    /// uninterrupted run exactly.
    pub fn resume(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let cfg: TrainConfig = toml::from_str(&ckpt.config_toml)
            .map_err(|e| Error::InvalidCheckpoint(format!("embedded config: {e}")))?;
        let mut trainer = Trainer::new(cfg)?;
        if trainer.nets.gen.spec != ckpt.gen_spec || trainer.nets.disc.spec != ckpt.disc_spec {
            return Err(Error::InvalidCheckpoint(
                "checkpoint specs do not match the rebuilt networks".into(),
            ));
        }
        for (group, count) in &ckpt.param_counts {
            let actual = match group.as_str() {
                "gen" => trainer.nets.gen.param_count(),
                "heads" => trainer.nets.heads.param_count(),
                "disc" => trainer.nets.disc.param_count(),
                _ => continue,
            };
            if actual != *count {
                return Err(Error::InvalidCheckpoint(format!(
                    "parameter count mismatch for {group}: checkpoint {count}, model {actual}"
                )));
            }
        }
        restore_params("gen", &mut trainer.nets.gen, &ckpt.tensors)?;
        restore_params("heads", &mut trainer.nets.heads, &ckpt.tensors)?;
        if let Some(kp) = &mut trainer.nets.key_path {
            restore_params("key_gen", &mut kp.gen, &ckpt.tensors)?;
            restore_params("key_heads", &mut kp.heads, &ckpt.tensors)?;
        }
        restore_params("disc", &mut trainer.nets.disc, &ckpt.tensors)?;
        restore_adam("adam_g", &mut trainer.opt_g, &ckpt.tensors, &ckpt.extra_u64)?;
        restore_adam("adam_d", &mut trainer.opt_d, &ckpt.tensors, &ckpt.extra_u64)?;
        if let Some(twin) = &mut trainer.twin {
            restore_params("twin_gen", &mut twin.gen, &ckpt.tensors)?;
            restore_params("twin_heads", &mut twin.heads, &ckpt.tensors)?;
        }
        if let Some(queue) = &mut trainer.queue {
            let mut rows = Vec::new();
            for l in 0..queue.n_layers() {
                match ckpt.tensors.get(&format!("queue.{l}")) {
                    Some(t) => rows.push(
                        t.clone()
                            .into_dimensionality::<ndarray::Ix2>()
                            .map_err(|e| Error::InvalidCheckpoint(format!("queue.{l}: {e}")))?,
                    ),
                    None => rows.push(ndarray::Array2::zeros((0, trainer.cfg.model.embed_dim))),
                }
            }
            queue.restore_rows(&rows)?;
        }
        trainer.iteration = ckpt.iteration;
        Ok(trainer)
    }
}

/// Data source feeding `fit`: the unpaired loader or a single image pair.
pub enum TrainData {
    Unpaired(UnpairedDataset),
    SingleImage { source: Array3<f32>, target: Array3<f32> },
}

impl TrainData {
    pub fn epoch_len(&self) -> u64 {
        match self {
            TrainData::Unpaired(ds) => ds.epoch_len(),
            TrainData::SingleImage { .. } => 1,
        }
    }

    fn batch(&self, cfg: &TrainConfig, iteration: u64) -> Result<(Array4<f32>, Array4<f32>)> {
        match self {
            TrainData::Unpaired(ds) => ds.batch(iteration),
            TrainData::SingleImage { source, target } => {
                single_image_batch(source, target, &cfg.single_image, cfg.seed, iteration)
            }
        }
    }

    /// Open unpaired training data under the standard layout, or the first
    /// image of each domain in single-image mode.
    pub fn open(root: &Path, cfg: &TrainConfig) -> Result<Self> {
        if cfg.preset == Preset::Sincut {
            let a = crate::data::discover_images(&root.join("trainA"))?;
            let b = crate::data::discover_images(&root.join("trainB"))?;
            let (Some(pa), Some(pb)) = (a.first(), b.first()) else {
                return Err(Error::invalid_state("single-image mode needs one image per domain"));
            };
            if a.len() > 1 || b.len() > 1 {
                log::warn!("single-image mode uses only the first image of each domain");
            }
            Ok(TrainData::SingleImage { source: load_image(pa)?, target: load_image(pb)? })
        } else {
            Ok(TrainData::Unpaired(UnpairedDataset::from_root(
                root,
                "train",
                cfg.data.load_size,
                cfg.data.crop_size,
                cfg.data.random_flip,
                cfg.seed,
            )?))
        }
    }

    pub fn files(&self) -> Vec<PathBuf> {
        match self {
            TrainData::Unpaired(ds) => {
                let mut f = ds.domain_x.clone();
                f.extend(ds.domain_y.clone());
                f
            }
            TrainData::SingleImage { .. } => Vec::new(),
        }
    }
}

/// One metrics row per iteration.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub iteration: u64,
    pub losses: StepLosses,
    pub wall_time_s: f64,
}

pub struct FitReport {
    pub rows: Vec<MetricsRow>,
    pub final_checkpoint: PathBuf,
}

fn metrics_header(cfg: &TrainConfig) -> String {
    let mut cols = vec!["iteration", "gan_g", "gan_d", "nce_x"];
    if cfg.objective.lambda_y > 0.0 {
        cols.push("nce_y");
    }
    if cfg.objective.r1_gamma > 0.0 {
        cols.push("r1");
    }
    cols.push("wall_time_s");
    cols.join(",")
}

fn metrics_row_string(cfg: &TrainConfig, row: &MetricsRow) -> String {
    let mut cols = vec![
        row.iteration.to_string(),
        format!("{:.6}", row.losses.gan_g),
        format!("{:.6}", row.losses.gan_d),
        format!("{:.6}", row.losses.nce_x),
    ];
    if cfg.objective.lambda_y > 0.0 {
        cols.push(format!("{:.6}", row.losses.nce_y.unwrap_or(f32::NAN)));
    }
    if cfg.objective.r1_gamma > 0.0 {
        cols.push(format!("{:.6}", row.losses.r1.unwrap_or(f32::NAN)));
    }
    cols.push(format!("{:.3}", row.wall_time_s));
    cols.join(",")
}

/// Keep only rows at or before `iteration` (metric continuity on resume).
fn truncate_metrics(path: &Path, iteration: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let content = std::fs::read_to_string(path)?;
    let mut out = String::new();
    for (i, line) in content.lines().enumerate() {
        if i == 0 {
            out.push_str(line);
            out.push('\n');
            continue;
        }
        let first = line.split(',').next().unwrap_or("");
        if let Ok(it) = first.parse::<u64>() {
            if it <= iteration {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_sample_strip(
    trainer: &Trainer,
    x: &Array4<f32>,
    y: &Array4<f32>,
    path: &Path,
) -> Result<()> {
    let gx = trainer.nets.gen.translate(x)?;
    let gy = trainer.nets.gen.translate(y)?;
    let pick = |a: &Array4<f32>| a.index_axis(Axis(0), 0).to_owned();
    let panels = [pick(x), pick(&gx), pick(y), pick(&gy)];
    let (c, h, w) = panels[0].dim();
    let mut strip = Array3::<f32>::zeros((c, h, w * panels.len()));
    for (i, p) in panels.iter().enumerate() {
        strip
            .slice_mut(ndarray::s![.., .., i * w..(i + 1) * w])
            .assign(p);
    }
    save_image(&strip.view(), path)
}

/// Run the training loop. Writes `metrics.csv`, periodic checkpoints and
/// sample strips under the run directory; fails fast on unwritable output.
pub fn fit(trainer: &mut Trainer, data: &TrainData, dirs: &RunDirs) -> Result<FitReport> {
    let cfg = trainer.cfg.clone();
    let epoch_len = data.epoch_len();
    let total: u64 = (cfg.epochs as u64) * epoch_len;
    let total = cfg.max_iterations.map(|m| m.min(total)).unwrap_or(total);

    // Fail fast if the run directory is not writable.
    let probe = dirs.root.join(".write_probe");
    std::fs::write(&probe, b"ok").map_err(Error::Io)?;
    std::fs::remove_file(&probe).ok();

    let start_iter = trainer.iteration;
    truncate_metrics(&dirs.metrics_csv, start_iter)?;
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&dirs.metrics_csv)?;
    if start_iter == 0 && metrics.metadata()?.len() == 0 {
        writeln!(metrics, "{}", metrics_header(&cfg))?;
    }

    let val_pair = data.batch(&cfg, 0)?;
    let t0 = std::time::Instant::now();
    let mut rows = Vec::new();
    while trainer.iteration < total {
        let it = trainer.iteration;
        let epoch = it / epoch_len;
        let scale = lr_factor(epoch, cfg.epochs);
        let (x, y) = data.batch(&cfg, it)?;
        let losses = trainer.train_step(&x, &y, scale)?;
        let row = MetricsRow { iteration: it + 1, losses, wall_time_s: t0.elapsed().as_secs_f64() };
        writeln!(metrics, "{}", metrics_row_string(&cfg, &row))?;
        rows.push(row);

        let done = trainer.iteration == total;
        if trainer.iteration % cfg.checkpoint_interval == 0 || done {
            metrics.flush()?;
            let ck = dirs.checkpoints.join(format!("iter_{:07}.ckpt", trainer.iteration));
            trainer.save_checkpoint(&ck, epoch)?;
            let strip = dirs.samples.join(format!("iter_{:07}.png", trainer.iteration));
            write_sample_strip(trainer, &val_pair.0, &val_pair.1, &strip)?;
        }
    }
    metrics.flush()?;
    let final_ck = dirs.checkpoints.join(format!("iter_{:07}.ckpt", trainer.iteration));
    if !final_ck.exists() {
        trainer.save_checkpoint(&final_ck, trainer.iteration / epoch_len.max(1))?;
    }
    Ok(FitReport { rows, final_checkpoint: final_ck })
}

/// Reflect-pad to the generator's size divisor, translate, crop back.
pub fn translate_image(gen: &Generator<f32>, img: &Array3<f32>) -> Result<Array3<f32>> {
    let (c, h, w) = img.dim();
    let d = gen.spec.size_divisor();
    let ph = h.div_ceil(d) * d;
    let pw = w.div_ceil(d) * d;
    let mut batch = Array4::<f32>::zeros((1, c, ph, pw));
    for ci in 0..c {
        for i in 0..ph {
            let si = if i < h { i } else { 2 * h - 2 - i.min(2 * h - 2) };
            for j in 0..pw {
                let sj = if j < w { j } else { 2 * w - 2 - j.min(2 * w - 2) };
                batch[(0, ci, i, j)] = img[(ci, si.min(h - 1), sj.min(w - 1))];
            }
        }
    }
    let out = gen.translate(&batch)?;
    Ok(out.slice(ndarray::s![0, .., ..h, ..w]).to_owned())
}

/// Rebuild the generator (and heads) from a checkpoint for inference and
/// visualization.
pub fn load_generator(path: &Path) -> Result<(Generator<f32>, HeadSet<f32>, TrainConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg: TrainConfig = toml::from_str(&ckpt.config_toml)
        .map_err(|e| Error::InvalidCheckpoint(format!("embedded config: {e}")))?;
    let mut rng = stream_rng(ckpt.seed, "init", &[]);
    let mut gen: Generator<f32> = Generator::new(ckpt.gen_spec.clone(), &mut rng)?;
    let mut heads = HeadSet::new(
        &mut rng,
        &gen.tap_channels(),
        cfg.model.hidden_dim,
        cfg.model.embed_dim,
    );
    if let Some(expected) = ckpt.param_counts.get("gen") {
        if gen.param_count() != *expected {
            return Err(Error::InvalidCheckpoint(format!(
                "generator parameter count mismatch: checkpoint {expected}, model {}",
                gen.param_count()
            )));
        }
    }
    restore_params("gen", &mut gen, &ckpt.tensors)?;
    restore_params("heads", &mut heads, &ckpt.tensors)?;
    Ok((gen, heads, cfg))
}

/// Translate every image in a directory; output count equals input count and
/// re-running is bit-identical.
pub fn translate_dir(ckpt: &Path, input_dir: &Path, output_dir: &Path) -> Result<usize> {
    let (gen, _, _) = load_generator(ckpt)?;
    let files = crate::data::discover_images(input_dir)?;
    std::fs::create_dir_all(output_dir)?;
    let mut n = 0;
    for f in &files {
        let img = load_image(f)?;
        let out = translate_image(&gen, &img)?;
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
        save_image(&out.view(), &output_dir.join(format!("{stem}.png")))?;
        n += 1;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{resolve_config, run_dir_layout};

    fn desk_config(root: &Path, seed: u64, iters: u64) -> TrainConfig {
        let overrides = vec![
            format!("seed={seed}"),
            format!("max_iterations={iters}"),
            "base_width=4".to_string(),
            "disc_base_width=4".to_string(),
            "embed_dim=16".to_string(),
            "hidden_dim=16".to_string(),
            "patches_per_layer=16".to_string(),
            "load_size=32".to_string(),
            "data.crop_size=32".to_string(),
            "checkpoint_interval=5".to_string(),
        ];
        let _ = root;
        resolve_config(Preset::Cut, None, &overrides).unwrap().0
    }

    fn tiny_dataset(root: &Path) {
        crate::synthetic::write_dataset(root, 6, 2, 32, 11).unwrap();
    }

    #[test]
    fn lr_schedule_is_constant_then_linear() {
        assert_eq!(lr_factor(0, 400), 1.0);
        assert_eq!(lr_factor(199, 400), 1.0);
        let mid = lr_factor(299, 400);
        assert!(mid > 0.45 && mid < 0.55, "{mid}");
        assert!(lr_factor(399, 400) < 0.01);
        // Monotone non-increasing.
        let mut prev = f64::INFINITY;
        for e in 0..400 {
            let v = lr_factor(e, 400);
            assert!(v <= prev + 1e-12);
            prev = v;
        }
    }

    #[test]
    fn step_losses_have_expected_keys_and_are_deterministic() {
        let tmp = tempfile::tempdir().unwrap();
        tiny_dataset(tmp.path());
        let cfg = desk_config(tmp.path(), 3, 10);
        let data = TrainData::open(tmp.path(), &cfg).unwrap();
        let mut t1 = Trainer::new(cfg.clone()).unwrap();
        let mut t2 = Trainer::new(cfg.clone()).unwrap();
        let mut seq1 = Vec::new();
        let mut seq2 = Vec::new();
        for it in 0..4u64 {
            let (x, y) = data.batch(&cfg, it).unwrap();
            let l1 = t1.train_step(&x, &y, 1.0).unwrap();
            let l2 = t2.train_step(&x, &y, 1.0).unwrap();
            assert!(l1.nce_y.is_some(), "identity term present under the default preset");
            assert!(l1.r1.is_none());
            seq1.push((l1.gan_g, l1.gan_d, l1.nce_x, l1.nce_y.unwrap()));
            seq2.push((l2.gan_g, l2.gan_d, l2.nce_x, l2.nce_y.unwrap()));
        }
        assert_eq!(seq1, seq2, "same seed, same data, same losses");

        // lambda_y = 0 drops the identity component.
        let mut cfg0 = cfg.clone();
        cfg0.objective.lambda_y = 0.0;
        let mut t0 = Trainer::new(cfg0.clone()).unwrap();
        let (x, y) = data.batch(&cfg0, 0).unwrap();
        let l = t0.train_step(&x, &y, 1.0).unwrap();
        assert!(l.nce_y.is_none());
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let tmp = tempfile::tempdir().unwrap();
        tiny_dataset(tmp.path());
        let cfg = desk_config(tmp.path(), 4, 10);
        let data = TrainData::open(tmp.path(), &cfg).unwrap();
        let mut t = Trainer::new(cfg.clone()).unwrap();
        // Poison the output projection: the rectifiers upstream would clamp
        // a NaN away, but nothing between dec.out and the losses does.
        t.nets.gen.visit_params_mut(&mut |p| {
            if p.name == "dec.out.w" {
                p.value.as_slice_mut().unwrap()[0] = f32::NAN;
            }
        });
        let (x, y) = data.batch(&cfg, 0).unwrap();
        let err = t.train_step(&x, &y, 1.0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("iteration 0"), "{msg}");
        assert!(msg.contains("parameter norm"), "{msg}");
    }

    #[test]
    fn discriminator_isolated_from_contrastive_updates() {
        // Parameter-hash comparison around isolated updates: with the GAN
        // terms unable to move (we skip the D optimizer by zeroing lr via a
        // manual step), the contrastive backward must leave D untouched.
        let tmp = tempfile::tempdir().unwrap();
        tiny_dataset(tmp.path());
        let cfg = desk_config(tmp.path(), 5, 10);
        let data = TrainData::open(tmp.path(), &cfg).unwrap();
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let (x, _y) = data.batch(&cfg, 0).unwrap();
        let disc_before = t.nets.disc.snapshot_values();
        let gen_before = t.nets.gen.snapshot_values();
        // Contrastive-only backward path.
        let shapes = t.nets.gen.tap_shapes(32, 32);
        let idx = t.sampler.sample(0, &shapes);
        let term = term_forward(&t.nets, &x, &idx, false).unwrap();
        let (_, grads) =
            term_nce_loss(&term, &cfg.objective, &NegativeContext::internal(), true).unwrap();
        term_backward(&mut t.nets, &term, &grads.unwrap(), 1.0, None, &cfg.objective).unwrap();
        let mut d_grad_sq = 0.0f64;
        t.nets.disc.visit_params(&mut |p| {
            d_grad_sq += p.grad.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>();
        });
        assert_eq!(d_grad_sq, 0.0, "patch contrastive loss must not touch D");
        assert_eq!(t.nets.disc.snapshot_values(), disc_before);
        // And the generator did receive gradients.
        let mut g_grad_sq = 0.0f64;
        t.nets.gen.visit_params(&mut |p| {
            g_grad_sq += p.grad.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>();
        });
        assert!(g_grad_sq > 0.0);
        assert_eq!(t.nets.gen.snapshot_values(), gen_before, "no optimizer step ran");
    }

    #[test]
    fn fit_writes_metrics_checkpoints_and_resume_continues_exactly() {
        let tmp = tempfile::tempdir().unwrap();
        tiny_dataset(tmp.path());
        let cfg = desk_config(tmp.path(), 6, 10);
        let data = TrainData::open(tmp.path(), &cfg).unwrap();
        let dirs = run_dir_layout(&tmp.path().join("run"), false).unwrap();
        let mut trainer = Trainer::new(cfg.clone()).unwrap();
        let report = fit(&mut trainer, &data, &dirs).unwrap();
        assert_eq!(report.rows.len(), 10);
        assert!(dirs.metrics_csv.is_file());
        let metrics = std::fs::read_to_string(&dirs.metrics_csv).unwrap();
        assert_eq!(metrics.lines().count(), 11, "header + 10 rows");
        assert!(metrics.lines().next().unwrap().starts_with("iteration,gan_g,gan_d,nce_x,nce_y"));
        let ck5 = dirs.checkpoints.join("iter_0000005.ckpt");
        assert!(ck5.is_file());

        // Resume from iteration 5 and compare rows 6..10 to the straight run.
        let mut resumed = Trainer::resume(&ck5).unwrap();
        assert_eq!(resumed.iteration, 5);
        let dirs2 = run_dir_layout(&tmp.path().join("run2"), false).unwrap();
        let report2 = fit(&mut resumed, &data, &dirs2).unwrap();
        assert_eq!(report2.rows.len(), 5);
        for (a, b) in report.rows[5..].iter().zip(&report2.rows) {
            assert_eq!(a.iteration, b.iteration);
            assert!((a.losses.gan_g - b.losses.gan_g).abs() < 1e-6);
            assert!((a.losses.gan_d - b.losses.gan_d).abs() < 1e-6);
            assert!((a.losses.nce_x - b.losses.nce_x).abs() < 1e-6);
        }
        // Metrics continuity: resuming into the original dir replays rows
        // after the checkpoint without gaps or duplicates.
        let mut resumed2 = Trainer::resume(&ck5).unwrap();
        let report3 = fit(&mut resumed2, &data, &dirs).unwrap();
        let metrics = std::fs::read_to_string(&dirs.metrics_csv).unwrap();
        let iters: Vec<u64> = metrics
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(iters, (1..=10).collect::<Vec<u64>>());
        let _ = report3;
    }

    #[test]
    fn translate_is_deterministic_and_size_preserving() {
        let tmp = tempfile::tempdir().unwrap();
        tiny_dataset(tmp.path());
        let cfg = desk_config(tmp.path(), 7, 2);
        let data = TrainData::open(tmp.path(), &cfg).unwrap();
        let dirs = run_dir_layout(&tmp.path().join("run"), false).unwrap();
        let mut trainer = Trainer::new(cfg.clone()).unwrap();
        let report = fit(&mut trainer, &data, &dirs).unwrap();

        let out1 = tmp.path().join("out1");
        let out2 = tmp.path().join("out2");
        let n1 = translate_dir(&report.final_checkpoint, &tmp.path().join("testA"), &out1).unwrap();
        let n2 = translate_dir(&report.final_checkpoint, &tmp.path().join("testA"), &out2).unwrap();
        assert_eq!(n1, 2);
        assert_eq!(n2, 2);
        assert_eq!(append_count(&out1), append_count(&out2));
        for f in crate::data::discover_images(&out1).unwrap() {
            let name = f.file_name().unwrap();
            let a = std::fs::read(&f).unwrap();
            let b = std::fs::read(out2.join(name)).unwrap();
            assert_eq!(a, b, "bit-identical outputs");
        }
        // Odd-size input keeps its size through pad + crop.
        let (gen, _, _) = load_generator(&report.final_checkpoint).unwrap();
        let odd = Array3::<f32>::zeros((3, 21, 30));
        let out = translate_image(&gen, &odd).unwrap();
        assert_eq!(out.dim(), (3, 21, 30));
    }

    fn append_count(dir: &Path) -> usize {
        crate::data::discover_images(dir).unwrap().len()
    }
}
