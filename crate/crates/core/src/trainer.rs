//! Alternating generator/discriminator optimization with Adam, seeded
//! epoch scheduling, checkpoint/resume, held-out evaluation, and the
//! ablation harness.
//!
//! Determinism contract: `(seed, config, dataset)` fully determine the
//! training trajectory. Every random stream is derived from the master seed
//! with a fixed tag, and per-epoch streams are re-derived from the epoch
//! index, so resuming from a checkpoint replays exactly the schedule an
//! uninterrupted run would have used.

use std::collections::HashMap;
use std::io::Write as IoWrite;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, ClassTable, DatasetEntry, LabelMap};
use crate::error::{Error, Result};
use crate::losses::{self, LossBundle, LossWeights};
use crate::metrics::MetricReport;
use crate::models::{
    CascadeNet, CascadeNetConfig, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
};
use crate::nn::BnMode;
use crate::rng::{derive_seed, Rng};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Per-epoch metrics log, one CSV row per epoch.
pub const TRAIN_LOG_NAME: &str = "train_log.csv";
/// Checkpoint written when training completes.
pub const CHECKPOINT_FINAL_NAME: &str = "checkpoint_final.dgz";
/// Rolling checkpoint written every `checkpoint_every` epochs (resume anchor).
pub const CHECKPOINT_LATEST_NAME: &str = "checkpoint_latest.dgz";
/// Fully resolved config copy written next to every run's outputs.
pub const RESOLVED_CONFIG_NAME: &str = "resolved_config.txt";
/// Ablation summary table.
pub const ABLATION_CSV_NAME: &str = "ablation.csv";

// Stream tags for seed derivation. Each independent random stream gets its
// own tag so adding draws to one stream never shifts another.
const TAG_GEN_INIT: u64 = 0x4745_4e49;
const TAG_DISC_INIT: u64 = 0x4449_5343;
const TAG_PHI: u64 = 0x5048_4945;
const TAG_ORDER: u64 = 0x4f52_4452;
const TAG_DRAW: u64 = 0x4452_4157;
const TAG_NOISE_FIXED: u64 = 0x4e4f_4953;
const TAG_EVAL_NOISE: u64 = 0x4556_4e5a;
const TAG_INFER: u64 = 0x494e_4652;

fn stream_seed(master: u64, tag: u64, index: u64) -> u64 {
    derive_seed(derive_seed(master, tag), index)
}

/// Writes the fully resolved config next to a run's outputs.
pub fn write_resolved_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(RESOLVED_CONFIG_NAME), cfg.to_text())?;
    Ok(())
}

/// Splits a manifest into (train, eval) slices: the last `holdout` entries
/// are held out, clamped so at least one training sample remains. With an
/// effective holdout of zero the training slice doubles as the eval slice.
pub fn split_holdout(entries: &[DatasetEntry], holdout: usize) -> (&[DatasetEntry], &[DatasetEntry]) {
    let k = holdout.min(entries.len().saturating_sub(1));
    let (train, eval) = entries.split_at(entries.len() - k);
    if k == 0 {
        (train, train)
    } else {
        (train, eval)
    }
}

/// Adam optimizer state: per-parameter first/second moment buffers and the
/// step counter. Buffers are created lazily on the first step and always
/// shape-match their parameters afterwards.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Step counter; strictly increasing, starts at 0.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(lr: f32, beta1: f32, beta2: f32) -> Self {
        AdamState {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One Adam update with bias correction:
    /// `m <- b1*m + (1-b1)*g`; `v <- b2*v + (1-b2)*g^2`;
    /// `p <- p - lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract(format!(
                "adam_step got {} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::contract(format!(
                "adam state holds {} moment buffers but got {} params",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::contract(format!(
                    "adam_step param {i}: shapes diverge (param {:?}, grad {:?}, moment {:?})",
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::contract(format!(
                    "adam_step param {i}: non-finite gradient"
                )));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            let gd = g.data();
            for j in 0..pd.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gd[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gd[j] * gd[j];
                let m_hat = (m[j] as f64) / bc1;
                let v_hat = (v[j] as f64) / bc2;
                pd[j] -= (self.lr as f64 * m_hat / (v_hat.sqrt() + self.eps as f64)) as f32;
            }
        }
        Ok(())
    }

    fn collect(&self, prefix: &str, ck: &mut Checkpoint) {
        ck.insert(format!("{prefix}.t"), Tensor::scalar(self.t as f32));
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            ck.insert(format!("{prefix}.m{i:04}"), m.clone());
            ck.insert(format!("{prefix}.v{i:04}"), v.clone());
        }
    }

    fn load(
        prefix: &str,
        map: &mut HashMap<String, Tensor>,
        lr: f32,
        beta1: f32,
        beta2: f32,
    ) -> Result<AdamState> {
        let t = map
            .remove(&format!("{prefix}.t"))
            .ok_or_else(|| Error::Checkpoint(format!("missing entry '{prefix}.t'")))?
            .item()? as u64;
        let mut m = Vec::new();
        let mut v = Vec::new();
        loop {
            let i = m.len();
            let Some(mi) = map.remove(&format!("{prefix}.m{i:04}")) else {
                break;
            };
            let vi = map.remove(&format!("{prefix}.v{i:04}")).ok_or_else(|| {
                Error::Checkpoint(format!("missing entry '{prefix}.v{i:04}'"))
            })?;
            if mi.shape() != vi.shape() {
                return Err(Error::Checkpoint(format!(
                    "moment buffers '{prefix}.m{i:04}' and '.v{i:04}' disagree on shape"
                )));
            }
            m.push(mi);
            v.push(vi);
        }
        let mut state = AdamState::new(lr, beta1, beta2);
        state.t = t;
        state.m = m;
        state.v = v;
        Ok(state)
    }
}

/// The three networks of one run: trainable G and D plus the frozen cascade
/// feature extractor.
#[derive(Debug)]
pub struct Models {
    pub gen: Generator,
    pub disc: Discriminator,
    pub phi: CascadeNet,
}

impl Models {
    /// Builds models from a run config. `num_classes` and `num_complex` come
    /// from the dataset's class table and the resolved complex-class list;
    /// they set the conditioning channel count
    /// (`num_classes + num_complex` when instance channels are enabled).
    pub fn from_run_config(cfg: &RunConfig, num_classes: usize, num_complex: usize) -> Result<Models> {
        let input_channels = num_classes + if cfg.use_instance { num_complex } else { 0 };
        if input_channels == 0 {
            return Err(Error::config("model needs at least one input channel"));
        }
        let gen_cfg = GeneratorConfig {
            input_channels,
            base_width: cfg.gen_base_width,
            num_res_blocks: cfg.gen_res_blocks,
            output_channels: 3,
            image_size: cfg.image_size,
        };
        let disc_cfg = DiscriminatorConfig {
            condition_channels: input_channels,
            image_channels: 3,
            layers: cfg.disc_layers,
            base_width: cfg.disc_base_width,
        };
        let phi_cfg = CascadeNetConfig {
            widths: cfg.cascade_widths.clone(),
            seed: derive_seed(cfg.seed, TAG_PHI),
        };
        let mut gen_rng = Rng::new(derive_seed(cfg.seed, TAG_GEN_INIT));
        let mut disc_rng = Rng::new(derive_seed(cfg.seed, TAG_DISC_INIT));
        Ok(Models {
            gen: Generator::new(gen_cfg, &mut gen_rng)?,
            disc: Discriminator::new(disc_cfg, &mut disc_rng)?,
            phi: CascadeNet::new(phi_cfg)?,
        })
    }
}

/// Summary of a completed [`Trainer::train`] call.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Epochs executed by this call (0 when resuming past the end).
    pub epochs_run: usize,
    /// Held-out L1 (raw pixel scale) after the first epoch of this process.
    pub first_holdout_l1: Option<f64>,
    /// Held-out L1 after the final epoch.
    pub final_holdout_l1: Option<f64>,
    /// Held-out metric report from the final epoch.
    pub final_report: Option<MetricReport>,
}

fn weights_from(cfg: &RunConfig) -> LossWeights {
    LossWeights {
        gamma: cfg.gamma,
        theta: cfg.theta,
        sigma: cfg.sigma_c,
        lambda: if cfg.lambda.is_empty() {
            None
        } else {
            Some(cfg.lambda.clone())
        },
        saturating_g: cfg.saturating_g,
    }
}

/// One training run: models, optimizer states, and the epoch cursor.
#[derive(Debug)]
pub struct Trainer {
    pub models: Models,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    pub run_cfg: RunConfig,
    pub weights: LossWeights,
    /// Index of the next epoch to run.
    pub epoch: usize,
    pub num_classes: usize,
    pub complex_ids: Vec<usize>,
}

impl Trainer {
    /// Builds a fresh trainer (epoch 0, random init) from a validated config
    /// and the dataset's class table.
    pub fn new(run_cfg: RunConfig, table: &ClassTable) -> Result<Trainer> {
        run_cfg.validate()?;
        let mut complex_ids = Vec::new();
        for name in &run_cfg.complex_classes {
            let id = table.id_of(name).ok_or_else(|| {
                Error::config(format!("complex class '{name}' is not in the class table"))
            })?;
            complex_ids.push(id);
        }
        let weights = weights_from(&run_cfg);
        weights.validate(run_cfg.cascade_widths.len())?;
        let models = Models::from_run_config(&run_cfg, table.names.len(), complex_ids.len())?;
        let adam_g = AdamState::new(run_cfg.lr, run_cfg.beta1, run_cfg.beta2);
        let adam_d = adam_g.clone();
        Ok(Trainer {
            models,
            adam_g,
            adam_d,
            run_cfg,
            weights,
            epoch: 0,
            num_classes: table.names.len(),
            complex_ids,
        })
    }

    /// Conditioning channel count expected by both G and D.
    pub fn input_channels(&self) -> usize {
        self.num_classes
            + if self.run_cfg.use_instance {
                self.complex_ids.len()
            } else {
                0
            }
    }

    /// One alternating optimization step on a prepared batch.
    ///
    /// `cond` is the clean conditioning tensor (what D sees), `g_input` the
    /// same conditioning with training noise applied (what G sees); both are
    /// `[B, C, H, W]`, `target` is `[B, 3, H, W]`.
    ///
    /// Order of operations: (1) one G forward on the noised input; (2) D
    /// update minimizing `adv_d (+ theta * perturbed)` against the detached
    /// G output; (3) G update minimizing `adv_g + gamma * L1 (+ sigma_c *
    /// cascade)` through the freshly updated, frozen D. The cascade network
    /// is never trainable, and the D leaves used in step (3) receive no
    /// updates.
    pub fn train_step(
        &mut self,
        cond: &Tensor,
        g_input: &Tensor,
        target: &Tensor,
        rng: &mut Rng,
    ) -> Result<LossBundle> {
        for (name, t) in [("cond", cond), ("g_input", g_input), ("target", target)] {
            if !t.is_finite() {
                return Err(Error::contract(format!(
                    "train_step: non-finite values in {name} tensor"
                )));
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(g_input.clone());
        let cond_v = tape.constant(cond.clone());
        let y = tape.constant(target.clone());

        // (1) Generator forward, once; the attached result serves the G step,
        // the detached copy serves the D step.
        let gvars = self.models.gen.lease(&mut tape, true);
        let fake = gvars.forward(&mut tape, x, BnMode::Train)?;
        let fake_det = tape.detach(fake);

        // (2) Discriminator step.
        let (adv_d_val, perturbed_val, total_d_val, d_grads) = {
            let dvars = self.models.disc.lease(&mut tape, true);
            let d_real = dvars.forward(&mut tape, cond_v, y, BnMode::Train)?;
            let d_fake = dvars.forward(&mut tape, cond_v, fake_det, BnMode::Train)?;
            let adv_d = losses::adv_d_loss(&mut tape, d_real, d_fake)?;
            let perturbed = if self.run_cfg.use_perturbed {
                let mixed = losses::perturb_mix(&mut tape, fake_det, y, None, rng)?;
                let d_mixed = dvars.forward(&mut tape, cond_v, mixed, BnMode::Train)?;
                Some(losses::perturbed_loss(&mut tape, d_mixed))
            } else {
                None
            };
            let total_d = losses::total_d_loss(&mut tape, adv_d, perturbed, &self.weights)?;
            tape.backward(total_d)?;
            let mut grads = Vec::new();
            for (i, v) in dvars.params().into_iter().enumerate() {
                grads.push(tape.take_grad(v).ok_or_else(|| {
                    Error::contract(format!("discriminator parameter {i} received no gradient"))
                })?);
            }
            let perturbed_val = match perturbed {
                Some(p) => tape.value(p).item()?,
                None => 0.0,
            };
            (
                tape.value(adv_d).item()?,
                perturbed_val,
                tape.value(total_d).item()?,
                grads,
            )
        };
        {
            let mut params = self.models.disc.learnable_mut();
            self.adam_d.step(&mut params, &d_grads)?;
        }

        // (3) Generator step against the updated, frozen discriminator.
        let dvars = self.models.disc.lease(&mut tape, false);
        let d_fake = dvars.forward(&mut tape, cond_v, fake, BnMode::Train)?;
        let adv_g = losses::adv_g_loss(&mut tape, d_fake, self.weights.saturating_g);
        let l1 = losses::l1_loss(&mut tape, fake, y)?;
        let cascade = if self.run_cfg.use_cascade {
            let pvars = self.models.phi.lease(&mut tape);
            let feats_target = pvars.forward(&mut tape, y)?;
            let feats_output = pvars.forward(&mut tape, fake)?;
            Some(losses::cascade_loss(
                &mut tape,
                &feats_target,
                &feats_output,
                self.weights.lambda.as_deref(),
            )?)
        } else {
            None
        };
        let total_g = losses::total_g_loss(&mut tape, adv_g, l1, cascade, &self.weights)?;
        tape.backward(total_g)?;
        let mut g_grads = Vec::new();
        for (i, v) in gvars.params().into_iter().enumerate() {
            g_grads.push(tape.take_grad(v).ok_or_else(|| {
                Error::contract(format!("generator parameter {i} received no gradient"))
            })?);
        }
        let bundle = LossBundle {
            adv_d: adv_d_val,
            adv_g: tape.value(adv_g).item()?,
            l1: tape.value(l1).item()?,
            perturbed: perturbed_val,
            cascade: match cascade {
                Some(c) => tape.value(c).item()?,
                None => 0.0,
            },
            total_g: tape.value(total_g).item()?,
            total_d: total_d_val,
        };
        drop(dvars);
        drop(gvars);
        drop(tape);
        {
            let mut params = self.models.gen.learnable_mut();
            self.adam_g.step(&mut params, &g_grads)?;
        }
        for (name, v) in [
            ("adv_d", bundle.adv_d),
            ("adv_g", bundle.adv_g),
            ("l1", bundle.l1),
            ("perturbed", bundle.perturbed),
            ("cascade", bundle.cascade),
            ("total_g", bundle.total_g),
            ("total_d", bundle.total_d),
        ] {
            if !v.is_finite() {
                return Err(Error::contract(format!(
                    "non-finite loss: {name} = {v} (bundle {bundle:?})"
                )));
            }
        }
        Ok(bundle)
    }

    /// Loads one manifest entry and prepares the training triple
    /// `(cond, g_input, target)` at `image_size` resolution, applying
    /// jitter-crop augmentation and input noise per the seeded schedule.
    fn prepare_sample(
        &self,
        entry: &DatasetEntry,
        draw_rng: &mut Rng,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let (label_map, target) = data::load_pair(entry)?;
        let cond = data::encode_input(
            &label_map,
            self.num_classes,
            &self.complex_ids,
            self.run_cfg.use_instance,
        )?;
        let base = self.run_cfg.image_size;
        let enlarged = self.run_cfg.jitter_enlarged.max(base);
        let (cond, target) = data::jitter_crop(&cond, &target, base, enlarged, draw_rng)?;
        let g_input = if self.run_cfg.fresh_noise {
            data::add_noise(&cond, self.run_cfg.sigma, draw_rng)?
        } else {
            let mut noise_rng = Rng::new(derive_seed(entry.seed, TAG_NOISE_FIXED));
            data::add_noise(&cond, self.run_cfg.sigma, &mut noise_rng)?
        };
        Ok((cond, g_input, target))
    }

    /// Runs the epoch loop from the current epoch cursor up to
    /// `run_cfg.epochs`, writing the CSV log, periodic checkpoints, and the
    /// final checkpoint into `out_dir`.
    pub fn train(&mut self, entries: &[DatasetEntry], out_dir: &Path) -> Result<TrainOutcome> {
        if entries.is_empty() {
            return Err(Error::config("training manifest has no entries"));
        }
        std::fs::create_dir_all(out_dir)?;
        write_resolved_config(out_dir, &self.run_cfg)?;
        let (train_set, eval_set) = split_holdout(entries, self.run_cfg.holdout);

        let log_path = out_dir.join(TRAIN_LOG_NAME);
        let mut log = if self.epoch == 0 || !log_path.exists() {
            let mut f = std::fs::File::create(&log_path)?;
            writeln!(f, "epoch,adv_d,adv_g,l1,perturbed,cascade,psnr,mse,rmse,ssim")?;
            f
        } else {
            std::fs::OpenOptions::new().append(true).open(&log_path)?
        };

        let start_epoch = self.epoch;
        let mut first_l1 = None;
        let mut final_l1 = None;
        let mut final_report = None;
        for e in start_epoch..self.run_cfg.epochs {
            let mut order: Vec<usize> = (0..train_set.len()).collect();
            let mut order_rng = Rng::new(stream_seed(self.run_cfg.seed, TAG_ORDER, e as u64));
            order_rng.shuffle(&mut order);
            let mut draw_rng = Rng::new(stream_seed(self.run_cfg.seed, TAG_DRAW, e as u64));

            let mut sums = [0f64; 5];
            let mut steps = 0usize;
            for chunk in order.chunks(self.run_cfg.batch_size) {
                let mut conds = Vec::with_capacity(chunk.len());
                let mut g_inputs = Vec::with_capacity(chunk.len());
                let mut targets = Vec::with_capacity(chunk.len());
                for &idx in chunk {
                    let (c, g, t) = self.prepare_sample(&train_set[idx], &mut draw_rng)?;
                    conds.push(c);
                    g_inputs.push(g);
                    targets.push(t);
                }
                let cond = Tensor::stack_batch(&conds.iter().collect::<Vec<_>>())?;
                let g_input = Tensor::stack_batch(&g_inputs.iter().collect::<Vec<_>>())?;
                let target = Tensor::stack_batch(&targets.iter().collect::<Vec<_>>())?;
                let bundle = self
                    .train_step(&cond, &g_input, &target, &mut draw_rng)
                    .map_err(|err| {
                        Error::contract(format!(
                            "epoch {e}, step {steps} (first sample '{}'): {err}",
                            train_set[chunk[0]].layout_path.display()
                        ))
                    })?;
                sums[0] += bundle.adv_d as f64;
                sums[1] += bundle.adv_g as f64;
                sums[2] += bundle.l1 as f64;
                sums[3] += bundle.perturbed as f64;
                sums[4] += bundle.cascade as f64;
                steps += 1;
            }
            let n = steps.max(1) as f64;

            let (report, holdout_l1) =
                self.evaluate_entries(eval_set, self.run_cfg.eval_sigma)?;
            writeln!(
                log,
                "{e},{},{},{},{},{},{},{},{},{}",
                sums[0] / n,
                sums[1] / n,
                sums[2] / n,
                sums[3] / n,
                sums[4] / n,
                report.mean_psnr,
                report.mean_mse,
                report.mean_rmse,
                report.mean_ssim
            )?;
            log.flush()?;

            self.epoch = e + 1;
            if e == 0 {
                first_l1 = Some(holdout_l1);
            }
            final_l1 = Some(holdout_l1);
            final_report = Some(report);
            if self.run_cfg.checkpoint_every > 0 && self.epoch % self.run_cfg.checkpoint_every == 0
            {
                self.save_checkpoint(&out_dir.join(CHECKPOINT_LATEST_NAME))?;
            }
        }

        self.save_checkpoint(&out_dir.join(CHECKPOINT_FINAL_NAME))?;
        self.save_checkpoint(&out_dir.join(CHECKPOINT_LATEST_NAME))?;
        Ok(TrainOutcome {
            epochs_run: self.epoch.saturating_sub(start_epoch),
            first_holdout_l1: first_l1,
            final_holdout_l1: final_l1,
            final_report,
        })
    }

    /// Runs the generator (eval mode, frozen) over a set of manifest entries
    /// and aggregates image metrics. `sigma > 0` adds input noise from a
    /// stream keyed to each entry's seed, so evaluation stays deterministic.
    /// Returns the report plus the mean per-image L1 on the raw pixel scale.
    pub fn evaluate_entries(
        &self,
        entries: &[DatasetEntry],
        sigma: f32,
    ) -> Result<(MetricReport, f64)> {
        let mut pairs = Vec::with_capacity(entries.len());
        let mut l1_sum = 0f64;
        for entry in entries {
            let (label_map, target) = data::load_pair(entry)?;
            let mut noise_rng = Rng::new(derive_seed(entry.seed, TAG_EVAL_NOISE));
            let output = self.infer(&label_map, sigma, &mut noise_rng)?;
            let mut diff = 0f64;
            for (a, b) in output.data().iter().zip(target.data()) {
                diff += (a - b).abs() as f64;
            }
            l1_sum += diff / output.numel() as f64;
            pairs.push((entry.layout_path.display().to_string(), output, target));
        }
        let count = entries.len().max(1) as f64;
        let report = MetricReport::from_pairs(pairs)?;
        Ok((report, l1_sum / count))
    }

    /// Synthesizes one image `[3, H, W]` from a label map with the generator
    /// in eval mode. `sigma > 0` draws input noise from `rng`.
    pub fn infer(&self, label_map: &LabelMap, sigma: f32, rng: &mut Rng) -> Result<Tensor> {
        let cond = data::encode_input(
            label_map,
            self.num_classes,
            &self.complex_ids,
            self.run_cfg.use_instance,
        )?;
        let noised = data::add_noise(&cond, sigma, rng)?;
        let mut tape = Tape::new();
        let x = tape.constant(noised.unsqueeze_batch()?);
        let gvars = self.models.gen.lease(&mut tape, false);
        let out = gvars.forward(&mut tape, x, BnMode::Eval)?;
        tape.value(out).batch_slice(0)
    }

    /// Seeded inference noise stream for a standalone run (used by the CLI).
    pub fn infer_rng(&self, seed: u64) -> Rng {
        Rng::new(derive_seed(seed, TAG_INFER))
    }

    /// Serializes models, both Adam states, the config snapshot, and the
    /// epoch cursor.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut named = Vec::new();
        self.models.gen.collect("generator", &mut named);
        self.models.disc.collect("discriminator", &mut named);
        self.models.phi.collect("cascade", &mut named);
        let mut ck = Checkpoint::new();
        for (name, t) in named {
            ck.insert(name, t);
        }
        self.adam_g.collect("adam_g", &mut ck);
        self.adam_d.collect("adam_d", &mut ck);
        ck.insert("trainer.epoch", Tensor::scalar(self.epoch as f32));
        ck.insert(
            "trainer.num_classes",
            Tensor::scalar(self.num_classes as f32),
        );
        ck.insert(
            "trainer.complex_ids",
            Tensor::from_vec(
                &[self.complex_ids.len()],
                self.complex_ids.iter().map(|&i| i as f32).collect(),
            )?,
        );
        ck.insert_text("config.blob", &self.run_cfg.to_text());
        ck.save(path)
    }

    /// Restores a trainer bit-exactly from a checkpoint file.
    pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
        let ck = Checkpoint::load(path)?;
        let blob = ck.text("config.blob")?;
        let run_cfg = RunConfig::parse(&blob)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        run_cfg.validate()?;
        let mut map = ck.into_map();
        let num_classes = map
            .remove("trainer.num_classes")
            .ok_or_else(|| Error::Checkpoint("missing entry 'trainer.num_classes'".into()))?
            .item()? as usize;
        let complex_ids: Vec<usize> = map
            .remove("trainer.complex_ids")
            .ok_or_else(|| Error::Checkpoint("missing entry 'trainer.complex_ids'".into()))?
            .data()
            .iter()
            .map(|&v| v as usize)
            .collect();
        let epoch = map
            .remove("trainer.epoch")
            .ok_or_else(|| Error::Checkpoint("missing entry 'trainer.epoch'".into()))?
            .item()? as usize;
        map.remove("config.blob");
        let mut models = Models::from_run_config(&run_cfg, num_classes, complex_ids.len())?;
        models.gen.load("generator", &mut map)?;
        models.disc.load("discriminator", &mut map)?;
        models.phi.load("cascade", &mut map)?;
        let adam_g = AdamState::load("adam_g", &mut map, run_cfg.lr, run_cfg.beta1, run_cfg.beta2)?;
        let adam_d = AdamState::load("adam_d", &mut map, run_cfg.lr, run_cfg.beta1, run_cfg.beta2)?;
        if !map.is_empty() {
            let mut leftover: Vec<&String> = map.keys().collect();
            leftover.sort();
            return Err(Error::Checkpoint(format!(
                "unexpected entries: {leftover:?}"
            )));
        }
        let weights = weights_from(&run_cfg);
        weights.validate(run_cfg.cascade_widths.len())?;
        Ok(Trainer {
            models,
            adam_g,
            adam_d,
            weights,
            epoch,
            num_classes,
            complex_ids,
            run_cfg,
        })
    }
}

/// One ablation configuration: a row label plus the knobs it flips.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub label: String,
    pub sigma: f32,
    pub use_perturbed: bool,
    pub use_cascade: bool,
    pub use_instance: bool,
}

impl AblationSpec {
    fn new(label: &str, sigma: f32, p: bool, c: bool, ins: bool) -> AblationSpec {
        AblationSpec {
            label: label.to_string(),
            sigma,
            use_perturbed: p,
            use_cascade: c,
            use_instance: ins,
        }
    }

    /// Directory-safe form of the row label.
    pub fn slug(&self) -> String {
        let mut out = String::new();
        for ch in self.label.chars() {
            if ch.is_ascii_alphanumeric() {
                out.push(ch.to_ascii_lowercase());
            } else if !out.ends_with('_') && !out.is_empty() {
                out.push('_');
            }
        }
        out.trim_end_matches('_').to_string()
    }
}

/// The named ablation subset: noise-level sweep rows (extra losses off),
/// loss/instance combination rows (noise off), and the full recipe.
pub fn named_ablation_specs() -> Vec<AblationSpec> {
    vec![
        AblationSpec::new("Z0.1", 0.1, false, false, false),
        AblationSpec::new("Z0.04", 0.04, false, false, false),
        AblationSpec::new("Z0.4", 0.4, false, false, false),
        AblationSpec::new("L_p", 0.0, true, false, false),
        AblationSpec::new("L_c", 0.0, false, true, false),
        AblationSpec::new("L_c+L_p", 0.0, true, true, false),
        AblationSpec::new("L_c+Ins.", 0.0, false, true, true),
        AblationSpec::new("L_p+Ins.", 0.0, true, false, true),
        AblationSpec::new("L_c+L_p+Ins.", 0.0, true, true, true),
        AblationSpec::new("Ours", 0.1, true, true, true),
    ]
}

/// The exhaustive grid {0.04, 0.1, 0.4} x {±perturbed} x {±cascade} x
/// {±instance}: 24 configurations.
pub fn grid_ablation_specs() -> Vec<AblationSpec> {
    let mut specs = Vec::new();
    for &sigma in &[0.04f32, 0.1, 0.4] {
        for &p in &[false, true] {
            for &c in &[false, true] {
                for &ins in &[false, true] {
                    let mut label = format!("Z{sigma}");
                    if p {
                        label.push_str("+L_p");
                    }
                    if c {
                        label.push_str("+L_c");
                    }
                    if ins {
                        label.push_str("+Ins.");
                    }
                    specs.push(AblationSpec::new(&label, sigma, p, c, ins));
                }
            }
        }
    }
    specs
}

/// One result row of the ablation table, in the report's column order.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub psnr: f64,
    pub mse: f64,
    pub rmse: f64,
    pub ssim: f64,
}

/// Serializes ablation rows as CSV in the standard column order.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("label,psnr,mse,rmse,ssim\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.label, r.psnr, r.mse, r.rmse, r.ssim
        ));
    }
    out
}

/// Trains one configuration per spec (same base config, same seed, knobs
/// flipped per row) and evaluates each on the held-out split. Artifacts for
/// row X land in `out_dir/run_<slug>/`; the summary table is written to
/// `out_dir/ablation.csv` and returned.
pub fn run_ablation(
    base: &RunConfig,
    specs: &[AblationSpec],
    table: &ClassTable,
    entries: &[DatasetEntry],
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut cfg = base.clone();
        cfg.sigma = spec.sigma;
        cfg.use_perturbed = spec.use_perturbed;
        cfg.use_cascade = spec.use_cascade;
        cfg.use_instance = spec.use_instance;
        let run_dir = out_dir.join(format!("run_{}", spec.slug()));
        let mut trainer = Trainer::new(cfg, table)?;
        trainer.train(entries, &run_dir)?;
        let (_, eval_set) = split_holdout(entries, trainer.run_cfg.holdout);
        let (report, _) = trainer.evaluate_entries(eval_set, trainer.run_cfg.eval_sigma)?;
        rows.push(AblationRow {
            label: spec.label.clone(),
            psnr: report.mean_psnr,
            mse: report.mean_mse,
            rmse: report.mean_rmse,
            ssim: report.mean_ssim,
        });
    }
    std::fs::write(out_dir.join(ABLATION_CSV_NAME), ablation_csv(&rows))?;
    Ok(rows)
}
