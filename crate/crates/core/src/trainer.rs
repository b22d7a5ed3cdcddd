//! The optimization loop.
//!
//! Each step applies three sub-updates to disjoint parameter groups, each on a
//! fresh forward pass:
//!
//! 1. `L3 = L_DA-D` updates θ_d with the embeddings treated as constants;
//! 2. `L1 = L_IDE + λ1·L_Triplet` updates θ_e, θ_m and θ_i;
//! 3. `L2 = λ2·L_DA-T + λ3·L_SE` updates θ_m only; gradients flow through D
//!    but θ_d is left untouched.
//!
//! The embeddings of the third forward pass (after the θ_e update) are then
//! written to the ID pool as plain values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data_synth::{Dataset, PkSampler};
use crate::error::{Error, Result};
use crate::id_pool::IdPool;
use crate::losses::{self, LossTerms, PoolQuery};
use crate::model::{FeatureScope, Group, Model, ModelConfig, Mode};
use crate::optim::Sgd;

pub const CHECKPOINT_MAGIC: &str = "DDAN-CKPT-v1";
pub const LOSS_LOG: &str = "losses.tsv";
pub const EPOCH_LOG: &str = "epochs.tsv";

/// Learning rate at a 0-based epoch: `base · factor^⌊epoch / every⌋`.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    config.base_lr * config.lr_decay_factor.powi((epoch / config.lr_decay_every.max(1)) as i32)
}

/// Whether the similarity term is switched on at a 0-based epoch.
pub fn se_enabled_at(config: &TrainConfig, epoch: usize) -> bool {
    epoch >= config.se_start_epoch && config.weights.lambda3 != 0.0 && config.weights.k_similar > 0
}

/// A labelled mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Array4<f64>,
    pub identities: Vec<u32>,
    pub domains: Vec<u32>,
    pub is_central: Vec<bool>,
}

impl Batch {
    pub fn from_rows(dataset: &Dataset, rows: &[usize], central: u32) -> Self {
        let identities: Vec<u32> = rows.iter().map(|&r| dataset.identities[r]).collect();
        let domains: Vec<u32> = rows.iter().map(|&r| dataset.domains[r]).collect();
        Self {
            images: dataset.gather(rows),
            is_central: domains.iter().map(|&d| d == central).collect(),
            identities,
            domains,
        }
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

/// Scalars recorded for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    /// 1-indexed epoch.
    pub epoch: usize,
    pub step: usize,
    pub terms: LossTerms,
    pub lr: f64,
    pub se_active: bool,
    pub se_skipped: usize,
}

impl LossTrace {
    pub const HEADER: &'static str = "epoch\tstep\tide\ttriplet\tda_t\tda_d\tse\tlr";

    pub fn tsv_row(&self) -> String {
        let t = &self.terms;
        format!(
            "{}\t{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:?}",
            self.epoch, self.step, t.ide, t.triplet, t.da_transfer, t.da_disc, t.se, self.lr
        )
    }
}

/// The three sub-updates of a step, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubUpdate {
    Discriminator,
    Identity,
    Mapping,
}

impl SubUpdate {
    fn slot(self) -> u8 {
        match self {
            SubUpdate::Discriminator => 3,
            SubUpdate::Identity => 1,
            SubUpdate::Mapping => 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trainer {
    pub model: Model,
    pub pool: IdPool,
    pub optimizer: Sgd,
    pub config: TrainConfig,
    pub central_domain: u32,
    /// Training identity ids in class-index order.
    pub classes: Vec<u32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Steps taken within the current epoch.
    pub step: usize,
    pub rng: ChaCha8Rng,
    #[serde(skip)]
    class_index: BTreeMap<u32, usize>,
}

impl Trainer {
    /// `identity_domains` lists every training identity with its domain.
    pub fn new(input: crate::data_synth::ImageShape, config: TrainConfig, identity_domains: &BTreeMap<u32, u32>, central_domain: u32) -> Result<Self> {
        config.validate()?;
        let classes: Vec<u32> = identity_domains.keys().copied().collect();
        let model_config = ModelConfig {
            input,
            encoder_widths: config.encoder_widths.clone(),
            embedding_dim: config.embedding_dim,
            domain_hidden: config.domain_hidden,
            num_identities: classes.len(),
            use_bnneck: config.use_bnneck,
            init_seed: crate::data_synth::derive_seed(config.seed, &[0x494e_4954]),
        };
        let model = Model::new(model_config)?;
        let pool = IdPool::new(config.embedding_dim, config.alpha, identity_domains)?;
        let rng = ChaCha8Rng::seed_from_u64(crate::data_synth::derive_seed(config.seed, &[0x5341_4d50]));
        let class_index = classes.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Ok(Self {
            model,
            pool,
            optimizer: Sgd::new(config.momentum),
            central_domain,
            classes,
            epoch: 0,
            step: 0,
            rng,
            class_index,
            config,
        })
    }

    pub fn for_dataset(dataset: &Dataset, config: TrainConfig) -> Result<Self> {
        let central = config.central_domain.unwrap_or(dataset.central_domain());
        Self::new(dataset.manifest.shape, config, &dataset.manifest.identity_domains(), central)
    }

    fn class_labels(&self, identities: &[u32]) -> Result<Vec<usize>> {
        identities
            .iter()
            .map(|id| {
                self.class_index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("identity {id} is not a training class")))
            })
            .collect()
    }

    fn apply(&mut self, update: SubUpdate, group: Group, grads: &[ndarray::ArrayD<f64>], lr: f64) {
        let params = self.model.params.group_mut(group);
        self.optimizer.step(update.slot(), group, params, &grads.to_vec(), lr);
    }

    pub fn train_step(&mut self, batch: &Batch) -> Result<LossTrace> {
        self.train_step_observed(batch, |_, _| {})
    }

    /// One optimization step; `observe` runs after each sub-update.
    pub fn train_step_observed(&mut self, batch: &Batch, mut observe: impl FnMut(SubUpdate, &Model)) -> Result<LossTrace> {
        let weights = self.config.weights;
        let lr = lr_at(&self.config, self.epoch);
        let se_active = se_enabled_at(&self.config, self.epoch) && self.pool.epoch() > 0;
        let labels = self.class_labels(&batch.identities)?;
        let mut terms = LossTerms::default();

        // L3: discriminator on detached embeddings
        let (emb, _) = self.model.forward_features(&batch.images, Mode::Train)?;
        let (dlogits, dcache) = self.model.domain_logits(&emb, Mode::Train)?;
        let disc = losses::da_disc_loss(&dlogits, &batch.is_central)?;
        terms.da_disc = disc.value;
        terms.da_transfer = losses::da_transfer_loss(&dlogits, &batch.is_central, weights.transfer_on_peripheral_only)?.value;
        let (_, dgrads) = self.model.domain_backward(&dcache, &disc.grad);
        self.apply(SubUpdate::Discriminator, Group::Domain, &dgrads, lr);
        self.model.update_domain_stats(&dcache);
        observe(SubUpdate::Discriminator, &self.model);

        // L1: identity + triplet on θ_f ∪ θ_i
        let (emb, fcache) = self.model.forward_features(&batch.images, Mode::Train)?;
        let (ilogits, icache) = self.model.identity_logits(&emb, Mode::Train)?;
        let ide = losses::ide_loss(&ilogits, &labels)?;
        terms.ide = ide.value;
        let (mut d_emb, igrads) = self.model.identity_backward(&icache, &ide.grad);
        match losses::triplet_batch_hard(&emb, &batch.identities, weights.margin) {
            Ok(tri) => {
                terms.triplet = tri.value;
                if weights.lambda1 != 0.0 {
                    d_emb.scaled_add(weights.lambda1, &tri.grad);
                }
            }
            Err(e) if weights.lambda1 != 0.0 => return Err(e),
            Err(_) => {}
        }
        let fgrads = self.model.backward_features(&fcache, &d_emb, FeatureScope::Full);
        self.apply(SubUpdate::Identity, Group::Encoder, fgrads.encoder.as_ref().expect("full scope"), lr);
        self.apply(SubUpdate::Identity, Group::Mapping, &fgrads.mapping, lr);
        self.apply(SubUpdate::Identity, Group::Identity, &igrads, lr);
        self.model.update_feature_stats(&fcache);
        self.model.update_identity_stats(&icache);
        observe(SubUpdate::Identity, &self.model);

        // L2: transfer + similarity enhancement on θ_m
        let needs_pool = weights.lambda3 != 0.0 && weights.k_similar > 0;
        let mapping_update = weights.lambda2 != 0.0 || se_active;
        let mut se_skipped = 0;
        if needs_pool || mapping_update {
            let (emb, fcache) = self.model.forward_features(&batch.images, Mode::Train)?;
            if mapping_update {
                let mut d_emb = Array2::<f64>::zeros(emb.raw_dim());
                if weights.lambda2 != 0.0 {
                    let (dlogits, dcache) = self.model.domain_logits(&emb, Mode::Train)?;
                    let transfer = losses::da_transfer_loss(&dlogits, &batch.is_central, weights.transfer_on_peripheral_only)?;
                    terms.da_transfer = transfer.value;
                    let (d_from_d, _) = self.model.domain_backward(&dcache, &transfer.grad);
                    d_emb.scaled_add(weights.lambda2, &d_from_d);
                }
                if se_active {
                    let queries: Vec<PoolQuery> = (0..batch.len())
                        .map(|i| PoolQuery {
                            identity_id: batch.identities[i],
                            domain_id: batch.domains[i],
                            is_central: batch.is_central[i],
                        })
                        .collect();
                    let se = losses::se_loss(&emb, &queries, &self.pool, weights.k_similar, weights.tau)?;
                    terms.se = se.value;
                    se_skipped = se.skipped;
                    d_emb.scaled_add(weights.lambda3, &se.grad);
                }
                let fgrads = self.model.backward_features(&fcache, &d_emb, FeatureScope::MappingOnly);
                self.apply(SubUpdate::Mapping, Group::Mapping, &fgrads.mapping, lr);
            }
            observe(SubUpdate::Mapping, &self.model);
            for (i, &id) in batch.identities.iter().enumerate() {
                self.pool.update_running_mean(id, emb.row(i))?;
            }
        } else {
            observe(SubUpdate::Mapping, &self.model);
        }

        let objective = losses::total_objective(&terms, &weights, se_active)?;
        if !(terms.ide.is_finite() && terms.triplet.is_finite() && terms.da_transfer.is_finite() && terms.da_disc.is_finite() && terms.se.is_finite()) {
            return Err(Error::NonFinite(format!(
                "epoch {} step {}: {terms:?} (objective {objective:?})",
                self.epoch + 1,
                self.step
            )));
        }
        let trace = LossTrace {
            epoch: self.epoch + 1,
            step: self.step,
            terms,
            lr,
            se_active,
            se_skipped,
        };
        self.step += 1;
        Ok(trace)
    }

    /// Closes the current epoch: finalizes the ID pool and advances counters.
    pub fn finish_epoch(&mut self) {
        self.pool.finalize_epoch();
        self.epoch += 1;
        self.step = 0;
    }

    pub fn steps_per_epoch(&self, sampler: &PkSampler) -> usize {
        if self.config.steps_per_epoch > 0 {
            self.config.steps_per_epoch
        } else {
            sampler.batches_per_epoch()
        }
    }

    /// Runs the remainder of the current epoch.
    pub fn run_epoch(&mut self, dataset: &Dataset, sampler: &PkSampler) -> Result<Vec<LossTrace>> {
        let steps = self.steps_per_epoch(sampler);
        let mut traces = Vec::with_capacity(steps);
        while self.step < steps {
            let rows = sampler.sample(&mut self.rng);
            let batch = Batch::from_rows(dataset, &rows, self.central_domain);
            traces.push(self.train_step(&batch)?);
        }
        self.finish_epoch();
        Ok(traces)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_string(self).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{CHECKPOINT_MAGIC}")
            .and_then(|_| file.write_all(body.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let body = text
            .strip_prefix(CHECKPOINT_MAGIC)
            .and_then(|rest| rest.strip_prefix('\n'))
            .ok_or_else(|| Error::format("checkpoint", format!("{} lacks the {CHECKPOINT_MAGIC} header", path.display())))?;
        let mut trainer: Self = serde_json::from_str(body).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        trainer.class_index = trainer.classes.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Ok(trainer)
    }
}

/// Loads just the model from a checkpoint.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    Ok(Trainer::load_checkpoint(path)?.model)
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub traces: Vec<LossTrace>,
    pub final_checkpoint: Option<PathBuf>,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_{epoch:04}.bin")
}

/// Mean of each loss term over an epoch's traces.
pub fn epoch_means(traces: &[LossTrace]) -> LossTerms {
    let n = traces.len().max(1) as f64;
    let mut m = LossTerms::default();
    for t in traces {
        m.ide += t.terms.ide / n;
        m.triplet += t.terms.triplet / n;
        m.da_transfer += t.terms.da_transfer / n;
        m.da_disc += t.terms.da_disc / n;
        m.se += t.terms.se / n;
    }
    m
}

/// Trains to `config.epochs`, optionally resuming `resume`. With `out_dir`
/// set, writes `losses.tsv`, `epochs.tsv` and checkpoints there.
pub fn train(dataset: &Dataset, config: &TrainConfig, out_dir: Option<&Path>, resume: Option<Trainer>) -> Result<TrainOutcome> {
    config.validate()?;
    let mut trainer = match resume {
        Some(mut t) => {
            t.config.epochs = config.epochs;
            t
        }
        None => Trainer::for_dataset(dataset, config.clone())?,
    };
    let sampler = PkSampler::new(&dataset.identities, trainer.config.batch_p, trainer.config.batch_k)?;

    let mut loss_log = String::new();
    let mut epoch_log = String::new();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let existing = dir.join(LOSS_LOG);
        if trainer.epoch > 0 && existing.exists() {
            loss_log = fs::read_to_string(&existing).map_err(|e| Error::io(&existing, e))?;
            let ep = dir.join(EPOCH_LOG);
            epoch_log = fs::read_to_string(&ep).unwrap_or_default();
        } else {
            let _ = writeln!(loss_log, "{}", LossTrace::HEADER);
            let _ = writeln!(epoch_log, "epoch\tide\ttriplet\tda_t\tda_d\tse\tlr");
        }
    }

    let mut traces = Vec::new();
    let mut final_checkpoint = None;
    while trainer.epoch < trainer.config.epochs {
        let lr = lr_at(&trainer.config, trainer.epoch);
        let epoch_traces = trainer.run_epoch(dataset, &sampler)?;
        let means = epoch_means(&epoch_traces);
        log::info!(
            "epoch {}/{}: ide {:.4} triplet {:.4} da_t {:.4} da_d {:.4} se {:.4}",
            trainer.epoch,
            trainer.config.epochs,
            means.ide,
            means.triplet,
            means.da_transfer,
            means.da_disc,
            means.se
        );
        if let Some(dir) = out_dir {
            for t in &epoch_traces {
                let _ = writeln!(loss_log, "{}", t.tsv_row());
            }
            let _ = writeln!(
                epoch_log,
                "{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{lr:?}",
                trainer.epoch, means.ide, means.triplet, means.da_transfer, means.da_disc, means.se
            );
            let write = |name: &str, text: &str| {
                let p = dir.join(name);
                fs::write(&p, text).map_err(|e| Error::io(&p, e))
            };
            write(LOSS_LOG, &loss_log)?;
            write(EPOCH_LOG, &epoch_log)?;
            let every = trainer.config.checkpoint_every;
            let last = trainer.epoch == trainer.config.epochs;
            if last || (every > 0 && trainer.epoch % every == 0) {
                let path = dir.join(checkpoint_name(trainer.epoch));
                trainer.save_checkpoint(&path)?;
                if last {
                    final_checkpoint = Some(path);
                }
            }
        }
        traces.extend(epoch_traces);
    }
    Ok(TrainOutcome {
        trainer,
        traces,
        final_checkpoint,
    })
}
