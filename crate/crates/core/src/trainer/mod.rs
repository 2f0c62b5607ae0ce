//! Two-stage training, episodic evaluation, ablation sweeps and checkpoints.

mod ablation;
mod checkpoint;
mod config;
mod eval;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use ablation::{ablation_csv, run_ablation, AblationRow, CSV_HEADER};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, Stage, TrainState};
pub use config::{lr_at, EpisodeConfig, Stage1Config, Stage2Config, TrainConfig};
pub use eval::{evaluate, EpisodeScorer, EvalReport, ModelScorer};

use crate::data::{sample_episode, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::model;
use crate::tensor::{layers, Ctx, Hyper, Mode, OptimizerState, ParamSet};

/// Progress notifications emitted while training.
#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Step {
        stage: Stage,
        epoch: usize,
        step: usize,
        loss: f64,
        lr: f64,
    },
    Epoch {
        stage: Stage,
        epoch: usize,
        loss: f64,
        lr: f64,
        val_acc: Option<f64>,
    },
}

pub const CLASSIFIER: &str = "classifier.fc";

// Independent random streams derived from the run seed.
const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_META_INIT: u64 = 3;
const STREAM_META_TRAIN: u64 = 4;
const STREAM_VAL: u64 = 5;
const STREAM_TEST: u64 = 6;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Seed of the episode stream used for final evaluation of a run.
pub fn test_seed(seed: u64) -> u64 {
    seed ^ (STREAM_TEST << 56)
}

fn val_seed(seed: u64) -> u64 {
    seed ^ (STREAM_VAL << 56)
}

fn check_image_size(cfg: &TrainConfig, ds: &Dataset) -> Result<()> {
    if ds.image_size() != cfg.model.image_size {
        return Err(Error::Config(format!(
            "dataset images are {}px but model.image_size is {}",
            ds.image_size(),
            cfg.model.image_size
        )));
    }
    Ok(())
}

/// Fresh stage-one state: backbone plus a linear classifier over flattened
/// features, one output per base class.
pub fn init_pretrain(cfg: &TrainConfig, ds: &Dataset) -> Result<Checkpoint> {
    cfg.validate()?;
    check_image_size(cfg, ds)?;
    let mut init = stream(cfg.seed, STREAM_INIT);
    let mut params = ParamSet::new();
    model::init_backbone(&mut params, &cfg.model, &mut init)?;
    let [c, h, w] = cfg.model.feature_shape();
    params.add_linear(CLASSIFIER, ds.base.num_classes(), c * h * w, &mut init)?;
    let s1 = &cfg.stage1;
    let mut optimizers = std::collections::BTreeMap::new();
    optimizers.insert("all".into(), OptimizerState::new(Hyper::sgd(s1.lr, s1.momentum, s1.weight_decay)));
    Ok(Checkpoint {
        config: cfg.clone(),
        norm: NormStats::from_split(&ds.base),
        state: TrainState {
            stage: Stage::Pretrain,
            epoch: 0,
            best: None,
        },
        params,
        best_params: None,
        optimizers,
        rng: Some(RngState::capture(&stream(cfg.seed, STREAM_TRAIN))),
    })
}

/// Stage-two state: the pretrained backbone plus freshly initialized
/// cross-attention layers and relation head.
pub fn init_meta(cfg: &TrainConfig, ds: &Dataset, pretrained: &Checkpoint) -> Result<Checkpoint> {
    cfg.validate()?;
    check_image_size(cfg, ds)?;
    let mut params = model::init_params(&cfg.model, &mut stream(cfg.seed, STREAM_META_INIT))?;
    let paths: Vec<String> = params.paths_with_prefix("backbone").map(str::to_owned).collect();
    for path in paths {
        let src = pretrained.params.get(&path).ok_or_else(|| {
            Error::Config(format!("pretrained checkpoint lacks {path}; was it trained with this model config?"))
        })?;
        let dst = params.get_mut(&path).unwrap();
        if src.value.shape() != dst.value.shape() {
            return Err(Error::Config(format!(
                "pretrained {path} has shape {:?}, model expects {:?}",
                src.value.shape(),
                dst.value.shape()
            )));
        }
        dst.value = src.value.clone();
    }
    let s2 = &cfg.stage2;
    let mut optimizers = std::collections::BTreeMap::new();
    optimizers.insert(
        "backbone".into(),
        OptimizerState::new(Hyper::sgd(s2.lr, s2.backbone_momentum, s2.backbone_weight_decay)),
    );
    optimizers.insert("new".into(), OptimizerState::new(Hyper::adam(s2.lr)));
    Ok(Checkpoint {
        config: cfg.clone(),
        norm: pretrained.norm,
        state: TrainState {
            stage: Stage::Meta,
            epoch: 0,
            best: None,
        },
        params,
        best_params: None,
        optimizers,
        rng: Some(RngState::capture(&stream(cfg.seed, STREAM_META_TRAIN))),
    })
}

/// Runs stage one to completion and drops the classifier.
pub fn pretrain_backbone(cfg: &TrainConfig, ds: &Dataset, progress: &mut dyn FnMut(&Event)) -> Result<Checkpoint> {
    resume(init_pretrain(cfg, ds)?, ds, None, progress)
}

/// Runs stage two to completion from a finished stage-one checkpoint.
pub fn meta_train(
    cfg: &TrainConfig,
    ds: &Dataset,
    pretrained: &Checkpoint,
    progress: &mut dyn FnMut(&Event),
) -> Result<Checkpoint> {
    resume(init_meta(cfg, ds, pretrained)?, ds, None, progress)
}

fn total_epochs(ckpt: &Checkpoint) -> usize {
    match ckpt.state.stage {
        Stage::Pretrain => ckpt.config.stage1.epochs,
        Stage::Meta => ckpt.config.stage2.epochs,
    }
}

pub fn is_finished(ckpt: &Checkpoint) -> bool {
    ckpt.state.epoch >= total_epochs(ckpt)
}

/// Continues the stage recorded in `ckpt`. With `stop_after = Some(k)` the
/// run pauses once `k` epochs of the stage are complete and returns a
/// resumable checkpoint.
pub fn resume(
    mut ckpt: Checkpoint,
    ds: &Dataset,
    stop_after: Option<usize>,
    progress: &mut dyn FnMut(&Event),
) -> Result<Checkpoint> {
    check_image_size(&ckpt.config, ds)?;
    let total = total_epochs(&ckpt);
    let end = stop_after.map_or(total, |s| s.min(total));
    if ckpt.state.epoch < end {
        let mut rng = ckpt
            .rng
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint has no training state to resume".into()))?
            .restore();
        while ckpt.state.epoch < end {
            match ckpt.state.stage {
                Stage::Pretrain => pretrain_epoch(&mut ckpt, ds, &mut rng, progress)?,
                Stage::Meta => meta_epoch(&mut ckpt, ds, &mut rng, progress)?,
            }
            ckpt.state.epoch += 1;
        }
        ckpt.rng = Some(RngState::capture(&rng));
    }
    if ckpt.state.epoch >= total && ckpt.state.stage == Stage::Pretrain {
        ckpt.params.remove_prefix("classifier");
        ckpt.optimizers.clear();
        ckpt.rng = None;
    }
    Ok(ckpt)
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Pretrain => "pretrain",
        Stage::Meta => "meta-train",
    }
}

/// Non-finite values during a step mean the run diverged; report them
/// against the stage and epoch rather than the op that noticed.
fn in_step<T>(stage: Stage, epoch: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric(msg) => Error::Training {
            stage: stage_name(stage),
            epoch,
            msg,
        },
        other => other,
    })
}

fn check_loss(stage: Stage, epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    Err(Error::Training {
        stage: stage_name(stage),
        epoch,
        msg: format!("loss became {loss}"),
    })
}

fn trainable_paths(ps: &ParamSet, prefixes: &[&str]) -> Vec<String> {
    ps.iter()
        .filter(|(k, p)| p.trainable && prefixes.iter().any(|pre| k.starts_with(pre)))
        .map(|(k, _)| k.clone())
        .collect()
}

fn pretrain_epoch(
    ckpt: &mut Checkpoint,
    ds: &Dataset,
    rng: &mut ChaCha8Rng,
    progress: &mut dyn FnMut(&Event),
) -> Result<()> {
    let cfg = ckpt.config.clone();
    let epoch = ckpt.state.epoch;
    let lr = lr_at(cfg.stage1.lr, &cfg.stage1.decay_epochs, cfg.decay_factor, epoch);
    let opt = ckpt.optimizers.get_mut("all").ok_or_else(|| Error::Config("missing stage-one optimizer".into()))?;
    opt.set_lr(lr);
    let paths = trainable_paths(&ckpt.params, &["backbone.", "classifier."]);
    let mut refs = ds.base.all_refs();
    refs.shuffle(rng);
    let [c, h, w] = cfg.model.feature_shape();
    let (mut sum, mut n) = (0.0, 0usize);
    for (step, chunk) in refs.chunks(cfg.stage1.batch).enumerate() {
        let x = ds.base.batch(chunk, &ckpt.norm)?;
        let labels: Vec<usize> = chunk.iter().map(|r| r.class).collect();
        let params = &mut ckpt.params;
        let value = in_step(Stage::Pretrain, epoch, (|| {
            let mut ctx = Ctx::new(params, Mode::Train, true);
            let xv = ctx.input(x);
            let f = model::backbone_forward(&mut ctx, &cfg.model, xv)?;
            let flat = ctx.graph.reshape(f, &[chunk.len(), c * h * w])?;
            let logits = layers::linear(&mut ctx, CLASSIFIER, flat)?;
            let loss = ctx.graph.cross_entropy(logits, &labels)?;
            let value = ctx.graph.value(loss).item();
            check_loss(Stage::Pretrain, epoch, value)?;
            ctx.backward(loss)?;
            ctx.finish().apply(params)?;
            opt.step(params, paths.iter().map(String::as_str))?;
            Ok(value)
        })())?;
        progress(&Event::Step {
            stage: Stage::Pretrain,
            epoch,
            step,
            loss: value,
            lr,
        });
        sum += value;
        n += 1;
    }
    progress(&Event::Epoch {
        stage: Stage::Pretrain,
        epoch,
        loss: sum / n.max(1) as f64,
        lr,
        val_acc: None,
    });
    Ok(())
}

fn meta_epoch(
    ckpt: &mut Checkpoint,
    ds: &Dataset,
    rng: &mut ChaCha8Rng,
    progress: &mut dyn FnMut(&Event),
) -> Result<()> {
    let cfg = ckpt.config.clone();
    let epoch = ckpt.state.epoch;
    let s2 = &cfg.stage2;
    let lr = lr_at(s2.lr, &s2.decay_epochs, cfg.decay_factor, epoch);
    for opt in ckpt.optimizers.values_mut() {
        opt.set_lr(lr);
    }
    let backbone = trainable_paths(&ckpt.params, &["backbone."]);
    let new = trainable_paths(&ckpt.params, &["helix.", "head."]);
    let ep = &cfg.episode;
    let (mut sum, mut n) = (0.0, 0usize);
    for step in 0..s2.episodes_per_epoch {
        let e = sample_episode(&ds.base, ep.way, ep.shot, ep.query_per_class, rng)?;
        let support = ds.base.batch(&e.support, &ckpt.norm)?;
        let query = ds.base.batch(&e.query, &ckpt.norm)?;
        let (params, opts) = (&mut ckpt.params, &mut ckpt.optimizers);
        let value = in_step(Stage::Meta, epoch, (|| {
            let mut ctx = Ctx::new(params, Mode::Train, true);
            let logits = model::episode_forward(&mut ctx, &cfg.model, &support, ep.shot, &query)?;
            let loss = ctx.graph.cross_entropy(logits, &e.query_labels)?;
            let value = ctx.graph.value(loss).item();
            check_loss(Stage::Meta, epoch, value)?;
            ctx.backward(loss)?;
            ctx.finish().apply(params)?;
            opts.get_mut("backbone")
                .ok_or_else(|| Error::Config("missing backbone optimizer".into()))?
                .step(params, backbone.iter().map(String::as_str))?;
            opts.get_mut("new")
                .ok_or_else(|| Error::Config("missing cross-attention optimizer".into()))?
                .step(params, new.iter().map(String::as_str))?;
            Ok(value)
        })())?;
        progress(&Event::Step {
            stage: Stage::Meta,
            epoch,
            step,
            loss: value,
            lr,
        });
        sum += value;
        n += 1;
    }
    let done = epoch + 1;
    let val_acc = if done.is_multiple_of(s2.val_every) || done == s2.epochs {
        let scorer = ModelScorer::new(cfg.model, &ckpt.params, ckpt.norm);
        let report = evaluate(&scorer, &ds.val, ep, s2.val_episodes, val_seed(cfg.seed))?;
        if ckpt.state.best.is_none_or(|(b, _)| report.mean > b) {
            ckpt.state.best = Some((report.mean, done));
            ckpt.best_params = Some(ckpt.params.clone());
        }
        Some(report.mean)
    } else {
        None
    };
    progress(&Event::Epoch {
        stage: Stage::Meta,
        epoch,
        loss: sum / n.max(1) as f64,
        lr,
        val_acc,
    });
    Ok(())
}
