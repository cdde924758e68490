//! WGAN training loop, checkpointed runs and single-image inference.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::{load_checkpoint, load_checkpoint_checked, save_checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, VggConfig, VggExtractor};
use crate::imaging::{
    composite_output, from_nchw, load_dataset, masks_to_n1hw, to_nchw, BinaryMask, HoleMask, ImageTensor,
    LoadOptions, SamplePair, Split, ValueRange,
};
use crate::loss::{critic_loss_node, generator_objective, LossBreakdown};
use crate::net::{critic_graph, generate_batch, generator_graph, generator_input, init_params, BoundParams, NetParams};
use crate::optim::{clip_weights, Adam};

const EMA_DECAY: f64 = 0.98;

/// Exponential moving averages of the logged losses.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunningAverages {
    pub losses: LossBreakdown,
    pub critic: f64,
    pub updates: u64,
}

impl RunningAverages {
    fn push(&mut self, losses: &LossBreakdown, critic: f64) {
        let a = if self.updates == 0 { 0.0 } else { EMA_DECAY };
        let mix = |old: f64, new: f64| a * old + (1.0 - a) * new;
        self.losses = LossBreakdown {
            l_cf: mix(self.losses.l_cf, losses.l_cf),
            l_f: mix(self.losses.l_f, losses.l_f),
            l_pf: mix(self.losses.l_pf, losses.l_pf),
            l_adv: mix(self.losses.l_adv, losses.l_adv),
            total: mix(self.losses.total, losses.total),
        };
        self.critic = mix(self.critic, critic);
        self.updates += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: NetParams,
    /// Completed generator steps.
    pub step: u64,
    pub running: RunningAverages,
}

impl TrainState {
    /// Fresh weights for `cfg`, with the critic already inside the clip box.
    pub fn fresh(cfg: &RunConfig) -> Result<Self> {
        let mut params = init_params(cfg.seed, &cfg.generator_spec(), &cfg.critic_spec())?;
        clip_weights(&mut params.critic, cfg.clip_value);
        Ok(Self {
            params,
            step: 0,
            running: RunningAverages::default(),
        })
    }

    pub fn load(path: &Path, cfg: &RunConfig) -> Result<Self> {
        let (params, meta) = load_checkpoint_checked(path, &cfg.generator_spec(), &cfg.critic_spec())?;
        let running = serde_json::from_value(meta.extra.get("running").cloned().unwrap_or_default())
            .unwrap_or_default();
        Ok(Self {
            params,
            step: meta.step,
            running,
        })
    }

    pub fn save(&self, path: &Path, cfg: &RunConfig, epoch: u64) -> Result<()> {
        let meta = CheckpointMeta {
            seed: cfg.seed,
            step: self.step,
            epoch,
            extra: serde_json::json!({
                "running": self.running,
                "config_hash": cfg.hash(),
            }),
        };
        save_checkpoint(path, &self.params, &meta)
    }
}

/// One training batch in the symmetric range.
pub struct Batch<'a> {
    pub gt: Array4<f64>,
    pub masked: Array4<f64>,
    pub holes: Array4<f64>,
    pub fg: Vec<&'a crate::imaging::ForegroundMask>,
}

impl<'a> Batch<'a> {
    pub fn from_samples(samples: &[&'a SamplePair]) -> Result<Self> {
        let gt: Vec<ImageTensor> = samples.iter().map(|s| s.image.to_range(ValueRange::Symmetric)).collect();
        let masked: Vec<ImageTensor> = samples
            .iter()
            .map(|s| s.masked().to_range(ValueRange::Symmetric))
            .collect();
        let holes: Vec<&BinaryMask> = samples.iter().map(|s| &*s.hole).collect();
        Ok(Self {
            gt: to_nchw(&gt.iter().collect::<Vec<_>>())?,
            masked: to_nchw(&masked.iter().collect::<Vec<_>>())?,
            holes: masks_to_n1hw(&holes)?,
            fg: samples.iter().map(|s| &s.foreground).collect(),
        })
    }
}

/// What happened during one generator step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub losses: LossBreakdown,
    /// Critic loss after each critic update of this step.
    pub critic_losses: Vec<f64>,
    /// Largest absolute critic weight after each critic update.
    pub critic_max_abs: Vec<f64>,
}

fn non_finite(step: u64, what: &str) -> Error {
    Error::NonFinite(format!("step {step}: {what}"))
}

/// `critic_steps_per_gen_step` critic updates (each followed by weight
/// clipping), then one generator update. Learning rates are used as given,
/// so zero rates leave the weights untouched.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch<'_>,
    cfg: &RunConfig,
    fx: &dyn FeatureExtractor,
) -> Result<StepReport> {
    let step = state.step + 1;
    let holes = cfg.hole_channel.then_some(&batch.holes);
    let mut critic_losses = Vec::new();
    let mut critic_max_abs = Vec::new();

    let critic_opt = Adam::new(cfg.lr_d, cfg.beta1, cfg.beta2);
    for _ in 0..cfg.critic_steps_per_gen_step {
        let fake = generate_batch(&state.params, &batch.masked, holes).map_err(|_| non_finite(step, "generator output"))?;
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &state.params.critic, true);
        let real_v = tape.constant(batch.gt.clone().into_dyn());
        let fake_v = tape.constant(fake.into_dyn());
        let real_s = critic_graph(&mut tape, &state.params.cspec, &bound, real_v);
        let fake_s = critic_graph(&mut tape, &state.params.cspec, &bound, fake_v);
        let loss = critic_loss_node(&mut tape, real_s, fake_s);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(non_finite(step, "critic loss"));
        }
        let mut grads = tape.backward(loss);
        let g = bound.grads(&tape, &mut grads);
        let p = &mut state.params;
        critic_opt.step(&mut p.critic, &g, &mut p.critic_opt);
        clip_weights(&mut p.critic, cfg.clip_value);
        critic_losses.push(value);
        critic_max_abs.push(p.max_abs_critic());
    }

    let mut tape = Tape::new();
    let input = generator_input(&mut tape, &state.params.gspec, &batch.masked, holes)?;
    let gbound = BoundParams::bind(&mut tape, &state.params.generator, true);
    let cbound = BoundParams::bind(&mut tape, &state.params.critic, false);
    let pred = generator_graph(&mut tape, &state.params.gspec, &gbound, input);
    let fake_s = critic_graph(&mut tape, &state.params.cspec, &cbound, pred);
    let nodes = generator_objective(
        &mut tape,
        &batch.gt,
        &batch.masked,
        pred,
        &batch.fg,
        fx,
        fake_s,
        &cfg.loss_weights(),
        cfg.cf_target,
    )?;
    let losses = nodes.breakdown(&tape);
    if let Some(term) = losses.first_non_finite() {
        return Err(non_finite(step, &format!("loss term {term}")));
    }
    let mut grads = tape.backward(nodes.total);
    let g = gbound.grads(&tape, &mut grads);
    let p = &mut state.params;
    Adam::new(cfg.lr_g, cfg.beta1, cfg.beta2).step(&mut p.generator, &g, &mut p.gen_opt);
    if !p.all_finite() {
        return Err(non_finite(step, "parameters after update"));
    }

    state.step = step;
    state.running.push(&losses, critic_losses.last().copied().unwrap_or(0.0));
    Ok(StepReport {
        step,
        losses,
        critic_losses,
        critic_max_abs,
    })
}

/// Builds the perceptual feature network named by the config.
pub fn feature_extractor(cfg: &RunConfig) -> Result<Box<dyn FeatureExtractor>> {
    let vcfg = match cfg.feature_net.as_str() {
        "vgg16" => VggConfig::vgg16(),
        "compact" => VggConfig::compact(),
        other => return Err(Error::Config(format!("unknown feature_net `{other}`"))),
    };
    Ok(Box::new(match &cfg.vgg_weights {
        Some(path) => VggExtractor::from_archive(path, vcfg)?,
        None => {
            log::warn!("no vgg_weights given; perceptual loss uses a fixed random network");
            VggExtractor::random(vcfg, cfg.seed)?
        }
    }))
}

/// A run over an in-memory dataset: batching, logging, checkpoints and
/// sample grids.
pub struct Trainer {
    cfg: RunConfig,
    data: Vec<SamplePair>,
    fx: Box<dyn FeatureExtractor>,
    state: TrainState,
    loss_log: Option<File>,
    critic_log: Option<File>,
}

const LOSS_HEADER: &str = "step,l_cF,l_F,l_pF,l_adv,total";
const CRITIC_HEADER: &str = "step,critic_step,critic_loss,max_abs_weight";

impl Trainer {
    /// Starts fresh or, when `cfg.resume` is set, from that checkpoint.
    /// Log files under `out_dir` are created (or truncated past the resumed
    /// step).
    pub fn new(cfg: RunConfig, data: Vec<SamplePair>) -> Result<Self> {
        Self::with_extractor(cfg.clone(), data, feature_extractor(&cfg)?)
    }

    pub fn with_extractor(cfg: RunConfig, data: Vec<SamplePair>, fx: Box<dyn FeatureExtractor>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let state = match &cfg.resume {
            Some(path) => TrainState::load(path, &cfg)?,
            None => TrainState::fresh(&cfg)?,
        };
        let out = &cfg.out_dir;
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        std::fs::write(out.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(out.join("config.toml"), e))?;
        let loss_log = Some(open_log(&out.join("loss.csv"), LOSS_HEADER, state.step)?);
        let critic_log = Some(open_log(&out.join("critic.csv"), CRITIC_HEADER, state.step)?);
        Ok(Self {
            cfg,
            data,
            fx,
            state,
            loss_log,
            critic_log,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.data.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.epochs * self.steps_per_epoch()
    }

    pub fn epoch(&self) -> u64 {
        self.state.step / self.steps_per_epoch()
    }

    /// Sample indices for the batch that step `step + 1` trains on. Each
    /// epoch visits the data in a seeded permutation.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let mut perm: Vec<usize> = (0..self.data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(16 + epoch);
        perm.shuffle(&mut rng);
        let start = (step % spe) as usize * self.cfg.batch_size;
        let end = (start + self.cfg.batch_size).min(perm.len());
        perm[start..end].to_vec()
    }

    /// Runs the next step and appends its rows to the logs.
    pub fn step(&mut self) -> Result<StepReport> {
        let idx = self.batch_indices(self.state.step);
        let samples: Vec<&SamplePair> = idx.iter().map(|&i| &self.data[i]).collect();
        let batch = Batch::from_samples(&samples)?;
        let report = train_step(&mut self.state, &batch, &self.cfg, self.fx.as_ref())?;
        let l = &report.losses;
        if let Some(f) = &mut self.loss_log {
            writeln!(f, "{},{},{},{},{},{}", report.step, l.l_cf, l.l_f, l.l_pf, l.l_adv, l.total)
                .map_err(|e| Error::io(self.cfg.out_dir.join("loss.csv"), e))?;
        }
        if let Some(f) = &mut self.critic_log {
            for (k, (c, m)) in report.critic_losses.iter().zip(&report.critic_max_abs).enumerate() {
                writeln!(f, "{},{k},{c},{m}", report.step).map_err(|e| Error::io(self.cfg.out_dir.join("critic.csv"), e))?;
            }
        }
        Ok(report)
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.cfg.out_dir.join("checkpoints").join(format!("step_{step:08}.ckpt"))
    }

    pub fn save_checkpoint(&self) -> Result<PathBuf> {
        let path = self.checkpoint_path(self.state.step);
        self.state.save(&path, &self.cfg, self.epoch())?;
        Ok(path)
    }

    /// Trains until `target` steps are complete (capped at the configured
    /// total), checkpointing every `checkpoint_every` steps and writing a
    /// sample grid at the configured epoch interval. Returns the path of the
    /// checkpoint for the last completed step.
    pub fn run_until(&mut self, target: u64) -> Result<PathBuf> {
        let target = target.min(self.total_steps());
        let spe = self.steps_per_epoch();
        let mut last_ckpt = None;
        while self.state.step < target {
            let report = self.step()?;
            if report.step % 10 == 0 || report.step == 1 {
                let r = &self.state.running;
                log::info!(
                    "step {} epoch {}: total {:.5} (l_cF {:.5} l_F {:.5} l_pF {:.5} l_adv {:.5}) critic {:.5}",
                    report.step,
                    self.epoch(),
                    r.losses.total,
                    r.losses.l_cf,
                    r.losses.l_f,
                    r.losses.l_pf,
                    r.losses.l_adv,
                    r.critic
                );
            }
            if self.cfg.checkpoint_every > 0 && report.step % self.cfg.checkpoint_every == 0 {
                last_ckpt = Some((report.step, self.save_checkpoint()?));
            }
            if report.step % spe == 0 && self.cfg.sample_every > 0 && (report.step / spe) % self.cfg.sample_every == 0 {
                self.write_samples(report.step / spe)?;
            }
        }
        self.flush()?;
        match last_ckpt {
            Some((step, path)) if step == self.state.step => Ok(path),
            _ => self.save_checkpoint(),
        }
    }

    fn flush(&mut self) -> Result<()> {
        for (f, name) in [(&mut self.loss_log, "loss.csv"), (&mut self.critic_log, "critic.csv")] {
            if let Some(f) = f {
                f.flush().map_err(|e| Error::io(self.cfg.out_dir.join(name), e))?;
            }
        }
        Ok(())
    }

    /// `input | prediction | composite | ground truth` rows for the first
    /// few samples, saved as `samples/epoch_XXXX.png`.
    pub fn write_samples(&self, epoch: u64) -> Result<PathBuf> {
        let picks: Vec<&SamplePair> = self.data.iter().take(4).collect();
        let batch = Batch::from_samples(&picks)?;
        let holes = self.cfg.hole_channel.then_some(&batch.holes);
        let pred = from_nchw(&generate_batch(&self.state.params, &batch.masked, holes)?, ValueRange::Symmetric)?;
        let (h, w) = (picks[0].image.height(), picks[0].image.width());
        let mut grid = Array3::<f64>::zeros((h * picks.len(), w * 4, 3));
        for (row, (s, p)) in picks.iter().zip(&pred).enumerate() {
            let p = p.to_range(ValueRange::Unit);
            let gt = s.image.to_range(ValueRange::Unit);
            let comp = composite_output(&p, &gt, &s.hole)?;
            for (col, tile) in [s.masked().to_range(ValueRange::Unit), p, comp, gt].iter().enumerate() {
                let rgb = tile.data();
                let mut dst = grid.slice_mut(s![row * h..(row + 1) * h, col * w..(col + 1) * w, ..]);
                for c in 0..3 {
                    let src_c = c.min(tile.channels() - 1);
                    dst.slice_mut(s![.., .., c]).assign(&rgb.slice(s![.., .., src_c]));
                }
            }
        }
        let dir = self.cfg.out_dir.join("samples");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("epoch_{epoch:04}.png"));
        ImageTensor::new_clamped(grid, ValueRange::Unit)?.save_png(&path)?;
        Ok(path)
    }
}

/// Opens a CSV log for appending. Rows with a step beyond `keep_through`
/// are dropped; a fresh run (`keep_through == 0`) starts from the header.
fn open_log(path: &Path, header: &str, keep_through: u64) -> Result<File> {
    let mut kept = vec![header.to_string()];
    if keep_through > 0 && path.exists() {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(|e| Error::io(path, e))?;
            let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
            if step.is_some_and(|s| s <= keep_through) {
                kept.push(line);
            }
        }
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    for line in kept {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

/// Loads the configured dataset and trains to completion. With zero epochs
/// only the initial checkpoint is written. Returns the final checkpoint.
pub fn train(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let opts = LoadOptions {
        seed: cfg.seed,
        image_size: Some(cfg.image_size),
        test_fraction: cfg.test_fraction,
        range: ValueRange::Unit,
    };
    let data = load_dataset(&cfg.data_root, Split::Train, &opts)?;
    if data.is_empty() {
        return Err(Error::Config(format!(
            "no training images under {}",
            cfg.data_root.join("images").display()
        )));
    }
    log::info!("training on {} samples, config hash {}", data.len(), cfg.hash());
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    let total = trainer.total_steps();
    trainer.run_until(total)
}

/// Inpaints one image. The output is the composite (known pixels kept) by
/// default, or the raw generator output.
pub fn infer(ckpt: &Path, image: &Path, hole: &Path, out: &Path, composite: bool) -> Result<ImageTensor> {
    let (params, _) = load_checkpoint(ckpt)?;
    let gt = ImageTensor::load_png(image, ValueRange::Unit)?;
    if gt.channels() != params.gspec.input_channels {
        return Err(Error::Dimension(format!(
            "model expects {} channels, image has {}",
            params.gspec.input_channels,
            gt.channels()
        )));
    }
    let hole = HoleMask::from_binary(BinaryMask::load_png(hole)?);
    let sample = SamplePair::new("infer", gt.clone(), crate::imaging::ForegroundMask::from_binary(BinaryMask::ones(gt.height(), gt.width())), hole)?;
    let masked = sample.masked().to_range(ValueRange::Symmetric);
    let pred = crate::net::generator_forward(&params, &masked, Some(&sample.hole).filter(|_| params.gspec.hole_channel))?
        .to_range(ValueRange::Unit);
    let result = if composite {
        composite_output(&pred, &gt, &sample.hole)?
    } else {
        pred
    };
    result.save_png(out)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::IdentityExtractor;
    use crate::imaging::ForegroundMask;
    use ndarray::Array2;
    use rand::Rng;

    pub(crate) fn tiny_cfg(out: &Path) -> RunConfig {
        RunConfig {
            image_size: 16,
            batch_size: 2,
            epochs: 2,
            lr_d: 1e-4,
            gen_depth: 3,
            gen_base_channels: 4,
            critic_depth: 2,
            critic_base_channels: 4,
            feature_net: "compact".into(),
            out_dir: out.to_path_buf(),
            checkpoint_every: 2,
            ..RunConfig::default()
        }
    }

    pub(crate) fn tiny_data(n: usize, side: usize) -> Vec<SamplePair> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (0..n)
            .map(|i| {
                let img = ImageTensor::new(
                    Array3::from_shape_fn((side, side, 3), |_| rng.random_range(0.0..1.0)),
                    ValueRange::Unit,
                )
                .unwrap();
                let fg = ForegroundMask::new(Array2::from_shape_fn((side, side), |(y, _)| (y < side * 3 / 4) as u8 as f64)).unwrap();
                let hole = HoleMask::new(Array2::from_shape_fn((side, side), |(y, x)| {
                    if (side / 4..side / 2).contains(&y) && (side / 4..side / 2).contains(&x) { 0.0 } else { 1.0 }
                }))
                .unwrap();
                SamplePair::new(format!("s{i}"), img, fg, hole).unwrap()
            })
            .collect()
    }

    fn trainer(cfg: RunConfig, data: Vec<SamplePair>) -> Trainer {
        Trainer::with_extractor(cfg, data, Box::new(IdentityExtractor::new(3))).unwrap()
    }

    #[test]
    fn critic_stays_clipped() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            lr_d: 0.5,
            critic_steps_per_gen_step: 3,
            ..tiny_cfg(dir.path())
        };
        let mut t = trainer(cfg, tiny_data(3, 16));
        for _ in 0..2 {
            let r = t.step().unwrap();
            assert_eq!(r.critic_max_abs.len(), 3);
            assert!(r.critic_max_abs.iter().all(|&m| m <= 0.01));
        }
    }

    #[test]
    fn zero_rates_leave_weights_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            lr_g: 0.0,
            lr_d: 0.0,
            ..tiny_cfg(dir.path())
        };
        let mut t = trainer(cfg, tiny_data(2, 16));
        let before = t.state().params.clone();
        t.step().unwrap();
        assert_eq!(t.state().params.generator, before.generator);
        assert_eq!(t.state().params.critic, before.critic);
    }

    #[test]
    fn batches_cover_each_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let t = trainer(tiny_cfg(dir.path()), tiny_data(5, 16));
        assert_eq!(t.steps_per_epoch(), 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|s| t.batch_indices(s)).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(t.batch_indices(4), t.batch_indices(4));
    }

    #[test]
    fn logs_truncate_on_resume() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = trainer(tiny_cfg(dir.path()), tiny_data(2, 16));
        let ckpt1 = {
            t.step().unwrap();
            t.save_checkpoint().unwrap()
        };
        t.run_until(2).unwrap();
        drop(t);
        let cfg = RunConfig {
            resume: Some(ckpt1),
            ..tiny_cfg(dir.path())
        };
        let t2 = trainer(cfg, tiny_data(2, 16));
        assert_eq!(t2.state().step, 1);
        let text = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with(LOSS_HEADER));
    }

    #[test]
    fn run_writes_samples_and_final_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = trainer(tiny_cfg(dir.path()), tiny_data(2, 16));
        let last = t.run_until(u64::MAX).unwrap();
        assert_eq!(t.state().step, 2);
        assert_eq!(last, t.checkpoint_path(2));
        assert!(dir.path().join("samples/epoch_0001.png").exists());
        assert!(dir.path().join("samples/epoch_0002.png").exists());
        let (_, meta) = load_checkpoint(&last).unwrap();
        assert_eq!(meta.step, 2);
    }
}
