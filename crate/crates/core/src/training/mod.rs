//! Loss, optimizer, schedule and the train / validate / test loop.

mod checkpoint;
mod loss;
mod optim;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, model_from_checkpoint, save_checkpoint, CKP1_MAGIC,
    CKP1_VERSION,
};
pub use loss::{composite_loss, LossWeights, DICE_SMOOTH};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, OptimizerState};

use crate::autodiff::Tape;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::metrics::{confusion_counts, set_metrics, Averaging, ConfusionCounts, RunMetrics};
use crate::models::ModelGraph;
use crate::tensor::{Shape4, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub adamw: AdamWConfig,
    pub seed: u64,
    pub loss: LossWeights,
    pub flip: bool,
    /// Written whenever validation improves.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch: 8,
            lr: 1e-3,
            lr_min: 0.0,
            adamw: AdamWConfig::default(),
            seed: 0,
            loss: LossWeights::default(),
            flip: true,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }

    /// Same `key = value` grammar as architecture configs. Keys: `epochs`,
    /// `batch`, `lr`, `lr_min`, `weight_decay`, `beta1`, `beta2`, `adam_eps`,
    /// `seed`, `lambda_bce`, `lambda_dice`, `flip`, `checkpoint`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let line_no = lineno + 1;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected key = value")))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || Error::Config(format!("line {line_no}: invalid value '{v}' for {k}"));
            let num = || v.parse::<f64>().map_err(|_| bad());
            match k {
                "epochs" => cfg.epochs = v.parse().map_err(|_| bad())?,
                "batch" => cfg.batch = v.parse().map_err(|_| bad())?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
                "lr" => cfg.lr = num()?,
                "lr_min" => cfg.lr_min = num()?,
                "weight_decay" => cfg.adamw.weight_decay = num()?,
                "beta1" => cfg.adamw.beta1 = num()?,
                "beta2" => cfg.adamw.beta2 = num()?,
                "adam_eps" => cfg.adamw.eps = num()?,
                "lambda_bce" => cfg.loss.bce = num()?,
                "lambda_dice" => cfg.loss.dice = num()?,
                "flip" => {
                    cfg.flip = match v {
                        "true" | "on" | "yes" | "1" => true,
                        "false" | "off" | "no" | "0" => false,
                        _ => return Err(bad()),
                    }
                }
                "checkpoint" => cfg.checkpoint = Some(PathBuf::from(v)),
                _ => return Err(Error::Config(format!("line {line_no}: unknown key '{k}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Optimizer settings, recorded at the head of every run log.
    pub fn describe(&self) -> String {
        format!(
            "AdamW beta1={} beta2={} eps={:e} weight_decay={} lr={} lr_min={} cosine/epoch; loss {}·BCE + {}·(1 − softDice, smooth {}); flip={}; seed={}",
            self.adamw.beta1,
            self.adamw.beta2,
            self.adamw.eps,
            self.adamw.weight_decay,
            self.lr,
            self.lr_min,
            self.loss.bce,
            self.loss.dice,
            DICE_SMOOTH,
            self.flip,
            self.seed
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mdsc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mdsc: f64,
}

impl TrainOutcome {
    /// `epoch,lr,train_loss,val_mdsc` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_mdsc\n");
        for r in &self.log {
            let _ = writeln!(s, "{},{:.9e},{:.9},{:.9}", r.epoch, r.lr, r.train_loss, r.val_mdsc);
        }
        s
    }
}

fn hflip(t: &Tensor4<f32>) -> Tensor4<f32> {
    let s = t.shape();
    Tensor4::from_fn(s, |n, c, y, x| t.at(n, c, y, s.w - 1 - x))
}

/// Stacks samples into an image batch and a mask batch.
pub fn stack_batch(samples: &[&Sample]) -> Result<(Tensor4<f32>, Tensor4<f32>)> {
    let images: Vec<&Tensor4<f32>> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&Tensor4<f32>> = samples.iter().map(|s| &s.mask).collect();
    Ok((Tensor4::stack(&images)?, Tensor4::stack(&masks)?))
}

/// Loss and gradients of one batch; updates running statistics.
pub fn train_step(
    model: &mut ModelGraph<f32>,
    state: &mut OptimizerState<f32>,
    images: &Tensor4<f32>,
    masks: &Tensor4<f32>,
    loss: LossWeights,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.input(images.clone());
    let out = model.forward_on(&mut tape, x, Mode::Train)?;
    let (l, seed) = composite_loss(tape.value(out), masks, loss)?;
    if !l.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = tape.backward(out, &seed)?;
    adamw_step(state, &mut model.params, &grads, lr)?;
    Ok(l as f64)
}

/// Trains in place and leaves the model at its best validation epoch.
pub fn train(
    model: &mut ModelGraph<f32>,
    train_set: &[&Sample],
    val_set: &[&Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut state = OptimizerState::new(&model.params, cfg.adamw);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, BTreeMap<String, Tensor4<f32>>)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_min);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            let mut masks = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = train_set[i];
                if cfg.flip && rng.random_bool(0.5) {
                    images.push(hflip(&s.image));
                    masks.push(hflip(&s.mask));
                } else {
                    images.push(s.image.clone());
                    masks.push(s.mask.clone());
                }
            }
            let images = Tensor4::stack(&images.iter().collect::<Vec<_>>())?;
            let masks = Tensor4::stack(&masks.iter().collect::<Vec<_>>())?;
            let l = train_step(model, &mut state, &images, &masks, cfg.loss, lr).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}, batch {b}")),
                other => other,
            })?;
            loss_sum += l * chunk.len() as f64;
            seen += chunk.len();
        }
        let val = evaluate(model, val_set, Averaging::PerImage)?.1.dsc;
        log.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            val_mdsc: val,
        });
        if best.as_ref().is_none_or(|(_, b, _)| val > *b) {
            best = Some((epoch, val, model.named_tensors().into_iter().collect()));
            if let Some(p) = &cfg.checkpoint {
                save_checkpoint(p, model)?;
            }
        }
    }
    let (best_epoch, best_val_mdsc, snapshot) = best.expect("at least one epoch ran");
    model.load_named(&snapshot)?;
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_mdsc,
    })
}

/// Binary prediction (logit > 0, i.e. probability > 0.5) per pixel.
pub fn predict_masks(model: &ModelGraph<f32>, images: &Tensor4<f32>) -> Result<Vec<Vec<bool>>> {
    let logits = model.predict(images)?;
    let per = logits.shape().c * logits.shape().plane();
    Ok(logits
        .data()
        .chunks(per)
        .map(|c| c.iter().map(|&z| z > 0.0).collect())
        .collect())
}

/// Per-image confusion counts and the set score under `mode`.
pub fn evaluate(
    model: &ModelGraph<f32>,
    samples: &[&Sample],
    mode: Averaging,
) -> Result<(Vec<(String, ConfusionCounts)>, RunMetrics)> {
    const CHUNK: usize = 8;
    let mut per_image = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let (images, masks) = stack_batch(chunk)?;
        let preds = predict_masks(model, &images)?;
        let per = masks.shape().plane();
        for ((s, pred), gt) in chunk.iter().zip(preds).zip(masks.data().chunks(per)) {
            let gt: Vec<bool> = gt.iter().map(|&v| v >= 0.5).collect();
            per_image.push((s.id.clone(), confusion_counts(&pred, &gt)?));
        }
    }
    let counts: Vec<ConfusionCounts> = per_image.iter().map(|(_, c)| *c).collect();
    let score = set_metrics(&counts, mode)?;
    Ok((per_image, score))
}

/// Input shape of a batch of `n` samples like `s`.
pub fn batch_shape(s: &Sample, n: usize) -> Shape4 {
    let (h, w) = s.size();
    Shape4::new(n, 3, h, w)
}
