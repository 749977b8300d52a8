//! Two-stage training with SGD, per-epoch validation and checkpoints.

mod checkpoint;
mod optim;
mod schedule;

pub use checkpoint::{Checkpoint, VERSION as CHECKPOINT_VERSION};
pub use optim::{clip_global_norm, Sgd};
pub use schedule::{compressed_epoch, learning_rate, lr_schedule, COMPRESSED_SPAN};

use std::collections::HashMap;

use rand::seq::SliceRandom;

use crate::config::{FrozenNorm, RunConfig, Strategy, Unfreeze};
use crate::data::{Dataset, SplitData};
use crate::error::{Error, Result};
use crate::image::{augment_batch, normalize, stack, AugmentConfig};
use crate::loss::total_loss;
use crate::model::{update_running_stats, Binder, BnMode, DualPath, Group, ParamId, ParamStore};
use crate::retrieval::{evaluate_rank_k, DescriptorSet, Evaluation};
use crate::rng::{derive_seed, substream};
use crate::tensor::{Tape, Tensor};
use crate::text::{embed_batch, tokenize_and_pad, EmbeddingTable, TokenSequence};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub stage: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_rank1: f64,
    pub val_rank5: f64,
    pub val_rank10: f64,
}

pub const METRICS_HEADER: &str = "epoch,stage,lr,train_loss,val_rank1,val_rank5,val_rank10";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.stage, r.lr, r.train_loss, r.val_rank1, r.val_rank5, r.val_rank10
        ));
    }
    out
}

/// Embedding table for a run: frozen, seeded, sized to the vocabulary.
pub fn embedding_table(config: &RunConfig, vocab_size: usize) -> Result<EmbeddingTable> {
    let dim = config.embed_dim()?;
    Ok(EmbeddingTable::random(
        vocab_size,
        dim,
        derive_seed(config.seed()?, "embedding", &[dim as u64]),
    ))
}

/// Descriptors of a split: every image as gallery, every caption as query.
pub struct SplitDescriptors {
    pub gallery: DescriptorSet,
    pub queries: DescriptorSet,
}

const EVAL_CHUNK: usize = 64;

pub fn embed_split(
    model: &DualPath,
    store: &ParamStore<f32>,
    split: &SplitData,
    dataset: &Dataset,
    table: &EmbeddingTable,
    seq_len: usize,
) -> Result<SplitDescriptors> {
    if split.is_empty() {
        return Err(Error::Data("cannot embed an empty split".into()));
    }
    let images: Vec<_> = split.images.iter().map(|img| normalize(img, &dataset.stats)).collect();
    let v = model.embed_images(store, &stack(&images)?, EVAL_CHUNK)?;
    let seqs = split
        .captions
        .iter()
        .map(|c| tokenize_and_pad(&c.text, &dataset.vocab, seq_len))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let t = model.embed_text(store, &embed_batch(&refs, table)?, EVAL_CHUNK)?;
    let dim = model.config().descriptor_dim();
    Ok(SplitDescriptors {
        gallery: DescriptorSet::new(dim, split.image_ids.clone(), v.into_data())?,
        queries: DescriptorSet::new(dim, split.caption_ids(), t.into_data())?,
    })
}

struct Pair {
    image: usize,
    tokens: TokenSequence,
    label: usize,
}

/// Owns the model, its parameters and optimizer state for one run.
pub struct Trainer<'d> {
    config: RunConfig,
    data: &'d Dataset,
    model: DualPath,
    store: ParamStore<f32>,
    optimizer: Sgd,
    epoch: usize,
    metrics: Vec<MetricsRow>,
    pairs: Vec<Pair>,
    table: EmbeddingTable,
    augment: AugmentConfig,
    seed: u64,
}

impl<'d> Trainer<'d> {
    pub fn new(config: RunConfig, data: &'d Dataset) -> Result<Self> {
        config.validate()?;
        let classes = data.train_classes();
        let model_cfg = config.model_config(classes.len())?;
        let (model, store) = DualPath::new(model_cfg, config.seed()?)?;
        Self::assemble(config, data, model, store)
    }

    fn assemble(config: RunConfig, data: &'d Dataset, model: DualPath, store: ParamStore<f32>) -> Result<Self> {
        let (h, w) = config.image_size()?;
        if let Some(img) = data.train.images.first() {
            if (img.height(), img.width()) != (h, w) {
                return Err(Error::Config(format!(
                    "dataset images are {}×{} but the config expects {h}×{w}",
                    img.height(),
                    img.width()
                )));
            }
        }
        if data.train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        if data.validation().is_empty() {
            return Err(Error::Data("validation split is empty".into()));
        }
        let classes: HashMap<u32, usize> = data.train_classes().into_iter().enumerate().map(|(i, id)| (id, i)).collect();
        let seq_len = config.seq_len()?;
        let pairs = data
            .train
            .captions
            .iter()
            .map(|c| {
                Ok(Pair {
                    image: c.image,
                    tokens: tokenize_and_pad(&c.text, &data.vocab, seq_len)?,
                    label: classes[&data.train.image_ids[c.image]],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let table = embedding_table(&config, data.vocab.len())?;
        let augment = config.augment(data.stats)?;
        let optimizer = Sgd::new(config.momentum()?, store.len())?;
        let seed = config.seed()?;
        Ok(Self {
            config,
            data,
            model,
            store,
            optimizer,
            epoch: 0,
            metrics: Vec::new(),
            pairs,
            table,
            augment,
            seed,
        })
    }

    /// Continues a run from a checkpoint; `config` must match the one the
    /// checkpoint was written with.
    pub fn resume(checkpoint: &Checkpoint, config: RunConfig, data: &'d Dataset) -> Result<Self> {
        if checkpoint.fingerprint != config.fingerprint() {
            return Err(Error::Config(format!(
                "checkpoint fingerprint {:016x} does not match config {:016x}",
                checkpoint.fingerprint,
                config.fingerprint()
            )));
        }
        let mut t = Self::new(config, data)?;
        for (name, value) in &checkpoint.tensors {
            t.store.set(name, value.clone())?;
        }
        if checkpoint.tensors.len() != t.store.len() {
            return Err(Error::Corrupt(format!(
                "checkpoint holds {} tensors, model has {}",
                checkpoint.tensors.len(),
                t.store.len()
            )));
        }
        for (name, v) in &checkpoint.velocity {
            let id = t
                .store
                .id(name)
                .ok_or_else(|| Error::Corrupt(format!("velocity for unknown parameter `{name}`")))?;
            if v.shape() != t.store.get(id).shape() {
                return Err(Error::Corrupt(format!("velocity of `{name}` has the wrong shape")));
            }
            t.optimizer.set_velocity(id, v.clone())?;
        }
        if checkpoint.seed != t.seed {
            return Err(Error::Corrupt("checkpoint seed disagrees with its config".into()));
        }
        t.epoch = checkpoint.epoch as usize;
        t.metrics = checkpoint.metrics.clone();
        Ok(t)
    }

    /// Resumes using the config stored inside the checkpoint.
    pub fn from_checkpoint(checkpoint: &Checkpoint, data: &'d Dataset) -> Result<Self> {
        let config = RunConfig::parse(&checkpoint.config)?;
        Self::resume(checkpoint, config, data)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            fingerprint: self.config.fingerprint(),
            epoch: self.epoch as u32,
            tensors: self.store.ids().map(|id| (self.store.name(id).to_owned(), self.store.get(id).clone())).collect(),
            momentum: self.optimizer.momentum(),
            velocity: self
                .store
                .ids()
                .filter_map(|id| self.optimizer.velocity(id).map(|v| (self.store.name(id).to_owned(), v.clone())))
                .collect(),
            seed: self.seed,
            metrics: self.metrics.clone(),
            config: self.config.to_text(),
        }
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &DualPath {
        &self.model
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn total_epochs(&self) -> usize {
        self.config.total_epochs().expect("validated")
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn stage_of(&self, epoch: usize) -> usize {
        let (s1, _) = self.config.stage_epochs().expect("validated");
        if epoch <= s1 {
            1
        } else {
            2
        }
    }

    /// First vision stage released in stage 2 under `Unfreeze::LastStages`.
    fn first_released_stage(&self) -> usize {
        self.model.config().vision.stages.len().saturating_sub(1).max(1)
    }

    /// Whether vision backbone stage `stage` (stem = 0) trains in `epoch`.
    fn vision_stage_trains(&self, epoch: usize, stage: usize) -> bool {
        match self.config.strategy().expect("validated") {
            Strategy::Scratch | Strategy::Joint => true,
            Strategy::FrozenVision => false,
            Strategy::TwoStage => {
                self.stage_of(epoch) == 2
                    && match self.config.unfreeze().expect("validated") {
                        Unfreeze::All => true,
                        Unfreeze::LastStages => stage >= self.first_released_stage(),
                    }
            }
        }
    }

    /// Which stored tensors the optimizer updates during `epoch`.
    pub fn trainable_mask(&self, epoch: usize) -> Vec<bool> {
        self.store
            .ids()
            .map(|id| {
                let name = self.store.name(id);
                if self.store.is_buffer(id) {
                    return false;
                }
                match DualPath::group_of(name) {
                    Group::VisionBackbone => {
                        let stage = DualPath::vision_stage_of(name).expect("vision tensors carry a stage");
                        self.vision_stage_trains(epoch, stage)
                    }
                    _ => true,
                }
            })
            .collect()
    }

    /// Normalization mode of the vision path during `epoch`. Frozen layers
    /// use their running statistics only under `FrozenNorm::Running`.
    pub fn vision_mode(&self, epoch: usize) -> BnMode {
        if self.config.frozen_norm().expect("validated") == FrozenNorm::Batch {
            return BnMode::Train;
        }
        let stages = self.model.config().vision.stages.len();
        match (0..=stages).find(|&s| self.vision_stage_trains(epoch, s)) {
            None => BnMode::Eval,
            Some(0) => BnMode::Train,
            Some(first) => BnMode::TrainFrom(first),
        }
    }

    pub fn learning_rate(&self, epoch: usize) -> Result<f64> {
        Ok(learning_rate(self.config.schedule()?, epoch, self.total_epochs())? * self.config.lr_scale()?)
    }

    /// One SGD step on the given training pairs with the augmentation draw
    /// keyed by `epoch`. Returns the loss before the update.
    pub fn train_step(&mut self, pairs: &[usize], epoch: usize, lr: f64) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let batch: Vec<&Pair> = pairs
            .iter()
            .map(|&i| self.pairs.get(i).ok_or_else(|| Error::Index(format!("no training pair {i}"))))
            .collect::<Result<_>>()?;
        let imgs: Vec<_> = batch.iter().map(|p| &self.data.train.images[p.image]).collect();
        let keys: Vec<u64> = pairs.iter().map(|&i| i as u64).collect();
        let images = stack(&augment_batch(&imgs, &keys, &self.augment, self.seed, epoch as u64)?)?;
        let seqs: Vec<&TokenSequence> = batch.iter().map(|p| &p.tokens).collect();
        let embeds = embed_batch(&seqs, &self.table)?;
        let labels: Vec<usize> = batch.iter().map(|p| p.label).collect();

        let mask = self.trainable_mask(epoch);
        let vision_mode = self.vision_mode(epoch);
        let loss_cfg = self.config.loss()?;
        let mut tape = Tape::new();
        let (loss, grads, stats) = {
            let mut b = Binder::new(&mut tape, &self.store, mask)?;
            let x = b.tape.constant(images);
            let e = b.tape.constant(embeds);
            let v = self.model.encode_images(&mut b, x, vision_mode)?;
            let t = self.model.encode_text(&mut b, e, BnMode::Train)?;
            let w = b.var(self.model.classifier());
            let loss = total_loss(b.tape, v, t, w, &labels, &loss_cfg)?;
            let bound: Vec<(ParamId, _)> = b.bound().collect();
            let stats = b.take_bn_stats();
            let mut grads = b.tape.backward(loss)?;
            let value = b.tape.value(loss).item()? as f64;
            let collected: Vec<(ParamId, Tensor<f32>)> =
                bound.into_iter().filter_map(|(id, var)| grads.take(var).map(|g| (id, g))).collect();
            (value, collected, stats)
        };
        let mut grads = grads;
        if let Some(c) = self.config.clip_norm()? {
            clip_global_norm(&mut grads, c);
        }
        self.optimizer.step(&mut self.store, &grads, lr)?;
        update_running_stats(&mut self.store, &stats, self.config.bn_momentum()? as f32);
        Ok(loss)
    }

    /// Trains one epoch over a seeded shuffle of all pairs, then validates.
    pub fn run_epoch(&mut self) -> Result<MetricsRow> {
        let epoch = self.epoch + 1;
        if epoch > self.total_epochs() {
            return Err(Error::Contract("training already finished".into()));
        }
        let lr = self.learning_rate(epoch)?;
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut substream(self.seed, "sampler", &[epoch as u64]));
        let batch = self.config.batch_size()?;
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(batch) {
            // A single leftover pair has no batch statistics to normalize with.
            if chunk.len() < 2 {
                continue;
            }
            total += self.train_step(chunk, epoch, lr)?;
            steps += 1;
        }
        let eval = self.validate()?;
        let row = MetricsRow {
            epoch,
            stage: self.stage_of(epoch),
            lr,
            train_loss: if steps > 0 { total / steps as f64 } else { f64::NAN },
            val_rank1: eval.rank(1),
            val_rank5: eval.rank(5),
            val_rank10: eval.rank(10),
        };
        self.epoch = epoch;
        self.metrics.push(row.clone());
        Ok(row)
    }

    pub fn run_until(&mut self, epoch: usize) -> Result<()> {
        while self.epoch < epoch.min(self.total_epochs()) {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.total_epochs())
    }

    pub fn embed(&self, split: &SplitData) -> Result<SplitDescriptors> {
        embed_split(&self.model, &self.store, split, self.data, &self.table, self.config.seq_len()?)
    }

    pub fn evaluate(&self, split: &SplitData) -> Result<Evaluation> {
        let d = self.embed(split)?;
        evaluate_rank_k(&d.queries, &d.gallery)
    }

    pub fn validate(&self) -> Result<Evaluation> {
        self.evaluate(self.data.validation())
    }
}
