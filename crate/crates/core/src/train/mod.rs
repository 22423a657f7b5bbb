//! Training: the optimizer loop, metric logging, checkpoints and gradient
//! checking.

mod checkpoint;
mod config;
pub mod gradcheck;
mod optim;

pub use checkpoint::{Checkpoint, StoredTensor, MAGIC, VERSION};
pub use config::{parse_lengths, Precision, TrainConfig};
pub use optim::{scheduled_lr, Adam};

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::cells::derive_seed;
use crate::data::ExposureSequence;
use crate::error::{Error, Result};
use crate::hdr::{loss_var, psnr_linear, psnr_tonemapped, TonemapConfig};
use crate::network::{FusionNet, SequenceBatch};
use crate::tensor::{Element, Tensor};

pub const LOG_HEADER: &str = "step,epoch,lr,loss,psnr_l,psnr_t";

/// Metrics of one optimizer step, measured on that step's batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub psnr_l: f64,
    pub psnr_t: f64,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.epoch, self.lr, self.loss, self.psnr_l, self.psnr_t
        )
    }
}

/// PSNR-L and PSNR-T of the network's estimate for one sequence.
pub fn evaluate<T: Element>(net: &FusionNet<T>, seq: &ExposureSequence, tonemap: TonemapConfig) -> Result<(f64, f64)> {
    let gt: Tensor<T> = seq
        .hdr_gt()
        .ok_or_else(|| Error::InvalidArgument("sequence has no ground truth".into()))?
        .cast();
    let y = net.predict(seq)?;
    Ok((psnr_linear(&y, &gt)?, psnr_tonemapped(&y, &gt, tonemap)?))
}

/// Mean PSNR-L and PSNR-T over `seqs`.
pub fn evaluate_set<T: Element>(
    net: &FusionNet<T>,
    seqs: &[ExposureSequence],
    tonemap: TonemapConfig,
) -> Result<(f64, f64)> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let (mut l, mut t) = (0.0, 0.0);
    for s in seqs {
        let (pl, pt) = evaluate(net, s, tonemap)?;
        l += pl;
        t += pt;
    }
    Ok((l / seqs.len() as f64, t / seqs.len() as f64))
}

/// Optimizer state and data stream for one training run.
pub struct Trainer<T> {
    config: TrainConfig,
    net: FusionNet<T>,
    adam: Adam<T>,
    dataset: Vec<ExposureSequence>,
    rng: ChaCha8Rng,
    step: u64,
    epoch: usize,
    order: Vec<usize>,
    cursor: usize,
    tonemap: TonemapConfig,
}

impl<T: Element> Trainer<T> {
    pub fn new(config: TrainConfig, dataset: Vec<ExposureSequence>) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        if dataset.iter().any(|s| s.hdr_gt().is_none()) {
            return Err(Error::InvalidArgument(
                "every training sequence needs a ground truth".into(),
            ));
        }
        let net = FusionNet::new(config.net_config())?;
        let adam = Adam::new(net.params(), config.beta1, config.beta2, config.epsilon);
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x0074_7261_696e));
        let order = (0..dataset.len()).collect();
        Ok(Trainer {
            config,
            net,
            adam,
            dataset,
            rng,
            step: 0,
            epoch: 1,
            order,
            cursor: 0,
            tonemap: TonemapConfig::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn net(&self) -> &FusionNet<T> {
        &self.net
    }

    pub fn dataset(&self) -> &[ExposureSequence] {
        &self.dataset
    }

    /// Steps completed so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// 1-based epoch the next step belongs to.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.dataset.len().div_ceil(self.config.batch_size)
    }

    pub fn is_finished(&self) -> bool {
        self.epoch > self.config.epochs || (self.config.max_steps > 0 && self.step >= self.config.max_steps as u64)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_net(&self.net, self.step, &self.config)
    }

    fn next_batch(&mut self) -> Result<Vec<ExposureSequence>> {
        if self.cursor == 0 {
            self.order.shuffle(&mut self.rng);
        }
        let end = (self.cursor + self.config.batch_size).min(self.order.len());
        let picked: Vec<usize> = self.order[self.cursor..end].to_vec();
        self.cursor = if end == self.order.len() { 0 } else { end };

        let n = match self.config.variable_length_set.as_slice() {
            [] => None,
            set => Some(set[self.rng.random_range(0..set.len())]),
        };
        let mut items = Vec::with_capacity(picked.len());
        for idx in picked {
            let src = &self.dataset[idx];
            let mut seq = match n {
                Some(n) => src.random_subset(n, &mut self.rng)?,
                None => src.clone(),
            };
            if self.config.shuffle_exposure_order {
                seq = seq.shuffled(&mut self.rng)?;
            }
            let (h, w) = seq.size();
            let p = self.config.patch_size;
            let (ph, pw) = (p.min(h), p.min(w));
            let top = self.rng.random_range(0..=h - ph);
            let left = self.rng.random_range(0..=w - pw);
            items.push(seq.crop(top, left, ph, pw)?);
        }
        Ok(items)
    }

    /// One optimizer step. On a non-finite loss the parameters are left as
    /// they were, so [`Trainer::checkpoint`] still holds the last good state.
    pub fn train_step(&mut self) -> Result<LogRow> {
        let epoch = self.epoch;
        let lr = scheduled_lr(self.config.learning_rate, self.config.halve_every, epoch);
        let items = self.next_batch()?;
        if self.cursor == 0 {
            self.epoch += 1;
        }
        let batch = SequenceBatch::<T>::from_sequences(&items)?;
        let target = batch.target.clone().expect("ground truth checked at construction");

        let tape = Tape::new();
        let params = self.net.params().bind(&tape);
        let y = self.net.forward(&tape, &params, &batch)?;
        let t = tape.constant(target.clone());
        let loss = loss_var(&tape, y, t, self.tonemap)?;
        let loss_value = tape.value(loss).item()?.as_f64();
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step + 1 });
        }
        let prediction = tape.value(y);
        let psnr_l = psnr_linear(&prediction, &target)?;
        let psnr_t = psnr_tonemapped(&prediction, &target, self.tonemap)?;

        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor<T>> = params
            .vars()
            .iter()
            .map(|&v| grads.take(v).expect("every parameter receives a gradient"))
            .collect();
        self.adam.update(self.net.params_mut(), &grads, lr)?;
        self.step += 1;
        Ok(LogRow {
            step: self.step,
            epoch,
            lr,
            loss: loss_value,
            psnr_l,
            psnr_t,
        })
    }

    /// Train until the epoch or step budget is spent. `on_step` sees every
    /// step's metrics; rows at the log interval (and the last one) are
    /// returned.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &LogRow, bool) -> Result<()>) -> Result<Vec<LogRow>> {
        let mut log = Vec::new();
        while !self.is_finished() {
            let row = self.train_step()?;
            let logged = row.step % self.config.eval_interval as u64 == 0 || self.is_finished();
            if logged {
                log.push(row);
            }
            on_step(self, &row, logged)?;
        }
        Ok(log)
    }
}

/// Files written by [`train_to_dir`].
pub const MODEL_FILE: &str = "model.sgmf";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_GOOD_FILE: &str = "last_good.sgmf";

/// Train and write `model.sgmf`, `metrics.csv` and periodic
/// `step_<n>.sgmf` checkpoints into `dir`. If the loss diverges the last good
/// parameters are saved as `last_good.sgmf` before the error is returned.
pub fn train_to_dir<T: Element>(config: TrainConfig, dataset: Vec<ExposureSequence>, dir: &Path) -> Result<Checkpoint> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut metrics = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(metrics, "{}", LOG_HEADER).map_err(|e| Error::io(&metrics_path, e))?;

    let mut trainer = Trainer::<T>::new(config, dataset)?;
    let every = trainer.config().checkpoint_every as u64;
    let outcome = trainer.run(|tr, row, logged| {
        if logged {
            writeln!(metrics, "{}", row.to_csv()).map_err(|e| Error::io(&metrics_path, e))?;
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        }
        if every > 0 && row.step % every == 0 {
            tr.checkpoint().save(&dir.join(format!("step_{}.sgmf", row.step)))?;
        }
        Ok(())
    });
    match outcome {
        Ok(_) => {
            let ckpt = trainer.checkpoint();
            ckpt.save(&dir.join(MODEL_FILE))?;
            Ok(ckpt)
        }
        Err(e) => {
            trainer.checkpoint().save(&dir.join(LAST_GOOD_FILE))?;
            Err(e)
        }
    }
}
