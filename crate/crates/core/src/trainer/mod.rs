//! Staged optimization: label objective first, then reconstruction, then domain
//! supervision of the residual; ablation variants and the Base/Oracle baselines.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::alignment::{label_matrix, label_objective, LossWeights, MmdConfig};
use crate::config::ExperimentConfig;
use crate::datagen::PatientRecord;
use crate::diffcore::{Adam, AdamConfig, Bound, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::encoder::{encode_all, encode_batch};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::orthoinfer::{domain_loss_pooled, project_rows};
use crate::probeval::compute_metrics;
use crate::rng;
use crate::saecore::{forward_rows, metric_node, recon_loss_from, MetricMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoRecNoDcl,
    NoOrthNoDcl,
    EuclideanMetric,
    NoDcl,
    /// Source-only supervised training.
    Base,
    /// Supervised training on labeled target data.
    Oracle,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoRecNoDcl,
        Variant::NoOrthNoDcl,
        Variant::EuclideanMetric,
        Variant::NoDcl,
        Variant::Base,
        Variant::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRecNoDcl => "no_rec_no_dcl",
            Variant::NoOrthNoDcl => "no_orth_no_dcl",
            Variant::EuclideanMetric => "euclidean_metric",
            Variant::NoDcl => "no_dcl",
            Variant::Base => "base",
            Variant::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }

    /// Loss weights after switching off the terms the variant removes.
    pub fn effective_weights(self, w: LossWeights) -> LossWeights {
        match self {
            Variant::Full | Variant::EuclideanMetric => w,
            Variant::NoRecNoDcl => LossWeights { lambda2: 0.0, lambda3: 0.0, ..w },
            Variant::NoOrthNoDcl | Variant::NoDcl => LossWeights { lambda3: 0.0, ..w },
            Variant::Base | Variant::Oracle => LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, ..w },
        }
    }

    /// First stage at which every term the variant keeps is switched on. Checkpoints
    /// from earlier stages were not trained with the variant's objective.
    pub fn complete_stage(self, w: LossWeights) -> u8 {
        let w = self.effective_weights(w);
        if w.lambda3 > 0.0 {
            3
        } else if w.lambda2 > 0.0 {
            2
        } else {
            1
        }
    }

    /// Metric of the reconstruction error and of the projection.
    pub fn metric_modes(self, freeze_metric_in_recon: bool) -> (MetricMode, MetricMode) {
        match self {
            Variant::EuclideanMetric => (MetricMode::Identity, MetricMode::Identity),
            _ if freeze_metric_in_recon => (MetricMode::FrozenDictionary, MetricMode::Dictionary),
            _ => (MetricMode::Dictionary, MetricMode::Dictionary),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Last epochs of stages one, two, and three.
    pub stage_boundaries: (usize, usize, usize),
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs after which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub epsilon: f64,
    /// Treats the metric as a constant inside the reconstruction error. With gradient
    /// through it, shrinking the dictionary to zero minimizes that error.
    pub freeze_metric_in_recon: bool,
    pub detach_alpha: bool,
    /// Size of the unlabeled target subset used during training.
    pub target_pool: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage_boundaries: (5, 15, 30),
            batch_size: 128,
            learning_rate: 1e-3,
            lr_milestones: vec![15, 20, 25],
            lr_decay: 0.1,
            epsilon: 1e-6,
            freeze_metric_in_recon: true,
            detach_alpha: false,
            target_pool: 500,
            variant: Variant::Full,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (e1, e2, e3) = self.stage_boundaries;
        if !(e1 <= e2 && e2 <= e3) {
            return Err(Error::Config(format!(
                "stage boundaries must satisfy E1 <= E2 <= E3, got ({e1}, {e2}, {e3})"
            )));
        }
        if e3 == 0 {
            return Err(Error::Config("at least one training epoch is required".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("learning_rate and lr_decay must be positive".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.target_pool < 2 {
            return Err(Error::Config("target_pool must hold at least 2 records".into()));
        }
        Ok(())
    }

    /// Stage (1, 2, or 3) of a 1-based epoch.
    pub fn stage(&self, epoch: usize) -> u8 {
        let (e1, e2, _) = self.stage_boundaries;
        if epoch <= e1 {
            1
        } else if epoch <= e2 {
            2
        } else {
            3
        }
    }

    /// Learning rate of a 1-based epoch: one decay per milestone already passed.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| epoch > m).count();
        self.learning_rate * self.lr_decay.powi(passed as i32)
    }
}

/// Gradient norms of the four parameter groups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradNorms {
    pub encoder: f64,
    pub label_head: f64,
    pub sae: f64,
    pub domain_head: f64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: u8,
    pub learning_rate: f64,
    pub steps: usize,
    /// Step-averaged components; `None` when the term was not evaluated.
    pub label_bce: f64,
    pub alignment: Option<f64>,
    pub recon: Option<f64>,
    pub domain: Option<f64>,
    pub total: f64,
    /// `bce + λ1·alignment + λ2·recon + λ3·domain` from the logged components.
    pub weighted_sum: f64,
    /// Largest per-step gradient norm of each group during the epoch.
    pub max_grad_norm: GradNorms,
    pub selection_w_f1: Option<f64>,
    pub selected: bool,
}

/// Records used by one training run.
pub struct TrainData<'a> {
    /// Labeled records the label objective is fit on.
    pub source: &'a [PatientRecord],
    /// Unlabeled target records; only their visits are read.
    pub target_pool: &'a [PatientRecord],
    /// Labeled target validation records for checkpoint selection.
    pub selection: Option<&'a [PatientRecord]>,
}

pub struct TrainOutcome {
    /// Best epoch by selection w-F1 among epochs of the variant's complete stage, or the
    /// last epoch without selection data.
    pub selected: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn group_norm(store: &ParamStore, ids: &[ParamId]) -> f64 {
    ids.iter().map(|&p| store.grad(p).sq_norm()).sum::<f64>().sqrt()
}

/// Per-record label probabilities `p(f(x))`; the SAE, projection, and domain head are
/// not used.
pub fn predict(model: &Model, records: &[PatientRecord]) -> Result<Vec<Vec<f64>>> {
    for (i, r) in records.iter().enumerate() {
        r.validate(model.config.n_codes, None).map_err(|e| {
            Error::Input(format!("record {i} does not fit the checkpoint vocabulary: {e}"))
        })?;
    }
    let v = encode_all(&model.store, &model.encoder, records)?;
    (0..v.rows())
        .map(|i| {
            let row = Tensor::vector(v.row(i).to_vec());
            Ok(crate::encoder::predict(&model.store, &model.label_head, &row)?.into_data())
        })
        .collect()
}

pub fn predict_target(checkpoint: &Checkpoint, target: &[PatientRecord]) -> Result<Vec<Vec<f64>>> {
    predict(&checkpoint.model, target)
}

/// What one optimizer step evaluates.
#[derive(Clone, Copy, Debug)]
pub struct StepSettings {
    pub weights: LossWeights,
    pub use_rec: bool,
    pub use_dcl: bool,
    pub rec_mode: MetricMode,
    pub proj_mode: MetricMode,
    pub epsilon: f64,
    pub detach_alpha: bool,
    pub mmd: MmdConfig,
}

impl StepSettings {
    /// Settings of a given stage for a config, with the variant's switches applied.
    pub fn for_stage(cfg: &ExperimentConfig, stage: u8) -> Self {
        let tc = &cfg.train;
        let weights = tc.variant.effective_weights(cfg.loss);
        let (rec_mode, proj_mode) = tc.variant.metric_modes(tc.freeze_metric_in_recon);
        StepSettings {
            weights,
            use_rec: stage >= 2 && weights.lambda2 > 0.0,
            use_dcl: stage >= 3 && weights.lambda3 > 0.0,
            rec_mode,
            proj_mode,
            epsilon: tc.epsilon,
            detach_alpha: tc.detach_alpha,
            mmd: cfg.mmd,
        }
    }
}

/// Graph nodes of one step's objective; absent terms are `None`.
pub struct StepTerms {
    pub bce: NodeId,
    pub alignment: Option<NodeId>,
    pub recon: Option<NodeId>,
    pub domain: Option<NodeId>,
    pub total: NodeId,
}

/// `L_label + λ2·L_rec + λ3·L_dcl` on one paired batch. The reconstruction and the
/// projection act on the pooled `[V; V']` rows; `target` may be omitted only when no
/// term needs it.
pub fn step_objective(
    g: &mut Graph,
    bound: &Bound,
    model: &Model,
    source: &[&PatientRecord],
    target: Option<&[&PatientRecord]>,
    st: &StepSettings,
) -> Result<StepTerms> {
    let n_codes = model.config.n_codes;
    let vs = encode_batch(g, bound, &model.encoder, source, n_codes)?;
    let labels = label_matrix(source)?;
    let vt = target.map(|t| encode_batch(g, bound, &model.encoder, t, n_codes)).transpose()?;
    let w = st.weights;
    if vt.is_none() && (w.lambda1 > 0.0 || st.use_rec || st.use_dcl) {
        return Err(Error::Input("this objective needs a target batch".into()));
    }
    let label = label_objective(g, bound, &model.label_head, vs, vt.unwrap_or(vs), &labels, w.lambda1, &st.mmd)?;
    let mut terms = StepTerms {
        bce: label.bce,
        alignment: (w.lambda1 > 0.0).then_some(label.alignment),
        recon: None,
        domain: None,
        total: label.total,
    };
    if let (Some(vt), true) = (vt, st.use_rec || st.use_dcl) {
        let pooled = g.concat(&[vs, vt])?;
        let dict = bound.node(model.sae.dictionary);
        let fwd = forward_rows(g, dict, pooled)?;
        let rec_metric = metric_node(g, dict, st.rec_mode)?;
        if st.use_rec {
            let rec = recon_loss_from(g, pooled, &fwd, rec_metric, w.gamma)?;
            let weighted = g.scale(rec, w.lambda2);
            terms.total = g.add(terms.total, weighted)?;
            terms.recon = Some(rec);
        }
        if st.use_dcl {
            let m = if st.proj_mode == st.rec_mode { rec_metric } else { metric_node(g, dict, st.proj_mode)? };
            let proj = project_rows(g, pooled, fwd.recon, m, st.epsilon, st.detach_alpha)?;
            let dcl = domain_loss_pooled(g, bound, &model.domain_head, proj.z, source.len())?;
            let weighted = g.scale(dcl, w.lambda3);
            terms.total = g.add(terms.total, weighted)?;
            terms.domain = Some(dcl);
        }
    }
    Ok(terms)
}

/// Running sums of one epoch.
#[derive(Default)]
struct EpochAcc {
    steps: usize,
    bce: f64,
    alignment: Option<f64>,
    recon: Option<f64>,
    domain: Option<f64>,
    total: f64,
    norms: GradNorms,
}

fn add_opt(slot: &mut Option<f64>, x: f64) {
    *slot = Some(slot.unwrap_or(0.0) + x);
}

/// Trains one model. `on_epoch` sees every epoch's log line and end-of-epoch state.
pub fn train(
    cfg: &ExperimentConfig,
    data: &TrainData,
    mut on_epoch: impl FnMut(&EpochLog, &Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = &cfg.train;
    if data.source.len() < 2 {
        return Err(Error::Input("training needs at least 2 labeled records".into()));
    }
    let weights = tc.variant.effective_weights(cfg.loss);
    let needs_target = weights.lambda1 > 0.0 || weights.lambda2 > 0.0 || weights.lambda3 > 0.0;
    let pool: Vec<&PatientRecord> = data.target_pool.iter().take(tc.target_pool).collect();
    if needs_target && pool.len() < 2 {
        return Err(Error::Input("the adaptive objective needs at least 2 unlabeled target records".into()));
    }

    let mut model = Model::init(cfg.model_config(), tc.seed)?;
    let mut opt = Adam::new(AdamConfig::default(), &model.store);
    let encoder_ids = model.encoder.ids();
    let head_ids = model.label_head.ids();
    let sae_ids = model.sae.ids();
    let domain_ids = model.domain_head.ids();

    let (_, _, epochs) = tc.stage_boundaries;
    let complete_stage = tc.variant.complete_stage(cfg.loss);
    let mut log = Vec::with_capacity(epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut last: Option<Checkpoint> = None;

    let mut source_order: Vec<usize> = (0..data.source.len()).collect();
    let mut target_order: Vec<usize> = (0..pool.len()).collect();
    for epoch in 1..=epochs {
        let stage = tc.stage(epoch);
        let lr = tc.learning_rate_at(epoch);
        let settings = StepSettings::for_stage(cfg, stage);

        source_order.shuffle(&mut rng::indexed_stream(tc.seed, "shuffle/source", epoch as u64));
        target_order.shuffle(&mut rng::indexed_stream(tc.seed, "shuffle/target", epoch as u64));
        let mut target_cursor = 0usize;

        let mut acc = EpochAcc::default();
        for chunk in source_order.chunks(tc.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let src: Vec<&PatientRecord> = chunk.iter().map(|&i| &data.source[i]).collect();
            let tgt: Vec<&PatientRecord> = if needs_target {
                (0..tc.batch_size.min(pool.len()))
                    .map(|_| {
                        let r = pool[target_order[target_cursor % pool.len()]];
                        target_cursor += 1;
                        r
                    })
                    .collect()
            } else {
                Vec::new()
            };

            model.store.zero_grad();
            let mut g = Graph::new();
            let bound = model.store.bind(&mut g);
            let terms = step_objective(
                &mut g,
                &bound,
                &model,
                &src,
                needs_target.then_some(tgt.as_slice()),
                &settings,
            )?;
            acc.bce += g.value(terms.bce).item();
            if let Some(a) = terms.alignment {
                add_opt(&mut acc.alignment, g.value(a).item());
            }
            if let Some(r) = terms.recon {
                add_opt(&mut acc.recon, g.value(r).item());
            }
            if let Some(d) = terms.domain {
                add_opt(&mut acc.domain, g.value(d).item());
            }
            let total = terms.total;
            let value = g.value(total).item();
            if !value.is_finite() {
                return Err(Error::Input(format!("training diverged at epoch {epoch}: loss {value}")));
            }
            acc.total += value;
            g.backward(total)?;
            model.store.accumulate(&g, &bound);

            let n = GradNorms {
                encoder: group_norm(&model.store, &encoder_ids),
                label_head: group_norm(&model.store, &head_ids),
                sae: group_norm(&model.store, &sae_ids),
                domain_head: group_norm(&model.store, &domain_ids),
            };
            acc.norms.encoder = acc.norms.encoder.max(n.encoder);
            acc.norms.label_head = acc.norms.label_head.max(n.label_head);
            acc.norms.sae = acc.norms.sae.max(n.sae);
            acc.norms.domain_head = acc.norms.domain_head.max(n.domain_head);
            opt.step(&mut model.store, lr);
            acc.steps += 1;
        }

        let steps = acc.steps.max(1) as f64;
        let mean = |x: Option<f64>| x.map(|v| v / steps);
        let (bce, alignment, recon, domain) = (acc.bce / steps, mean(acc.alignment), mean(acc.recon), mean(acc.domain));
        let weighted_sum = bce
            + weights.lambda1 * alignment.unwrap_or(0.0)
            + weights.lambda2 * recon.unwrap_or(0.0)
            + weights.lambda3 * domain.unwrap_or(0.0);

        let selection_w_f1 = match data.selection {
            Some(sel) if !sel.is_empty() => {
                let probs = predict(&model, sel)?;
                let labels: Vec<Vec<u8>> = sel.iter().map(|r| r.label.clone()).collect();
                Some(compute_metrics(&probs, &labels, &cfg.eval)?.w_f1)
            }
            _ => None,
        };
        let snapshot = Checkpoint::new(cfg.clone(), epoch, stage, model.clone(), opt.clone());
        let selected = match (selection_w_f1, &best) {
            _ if stage < complete_stage => false,
            (Some(s), Some((b, _))) => s > *b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        let line = EpochLog {
            epoch,
            stage,
            learning_rate: lr,
            steps: acc.steps,
            label_bce: bce,
            alignment,
            recon,
            domain,
            total: acc.total / steps,
            weighted_sum,
            max_grad_norm: acc.norms,
            selection_w_f1,
            selected,
        };
        on_epoch(&line, &snapshot)?;
        if selected {
            best = Some((selection_w_f1.expect("selected implies a score"), snapshot.clone()));
        }
        last = Some(snapshot);
        log.push(line);
    }
    let selected = match best {
        Some((_, c)) => c,
        None => last.expect("at least one epoch ran"),
    };
    Ok(TrainOutcome { selected, log })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    Base,
    Oracle,
}

/// Plain supervised training with every adaptation term disabled: on source data for
/// `Base`, on labeled target training data for `Oracle`.
pub fn run_baseline(
    kind: BaselineKind,
    cfg: &ExperimentConfig,
    source_train: &[PatientRecord],
    target_train: &[PatientRecord],
    selection: Option<&[PatientRecord]>,
) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    let records = match kind {
        BaselineKind::Base => {
            cfg.train.variant = Variant::Base;
            source_train
        }
        BaselineKind::Oracle => {
            cfg.train.variant = Variant::Oracle;
            if target_train.is_empty() || target_train.iter().any(|r| r.label.is_empty()) {
                return Err(Error::Input("the Oracle baseline needs labeled target records".into()));
            }
            target_train
        }
    };
    train(
        &cfg,
        &TrainData { source: records, target_pool: &[], selection },
        |_, _| Ok(()),
    )
}

/// Trains the configured variant, dispatching Base and Oracle to [`run_baseline`].
pub fn run_variant(
    cfg: &ExperimentConfig,
    source_train: &[PatientRecord],
    target_train: &[PatientRecord],
    selection: Option<&[PatientRecord]>,
    on_epoch: impl FnMut(&EpochLog, &Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    match cfg.train.variant {
        Variant::Base => run_baseline(BaselineKind::Base, cfg, source_train, target_train, selection),
        Variant::Oracle => run_baseline(BaselineKind::Oracle, cfg, source_train, target_train, selection),
        _ => train(
            cfg,
            &TrainData { source: source_train, target_pool: target_train, selection },
            on_epoch,
        ),
    }
}

/// Copies of records with labels removed, for handing target data to training code
/// that must not see them.
pub fn strip_labels(records: &[PatientRecord]) -> Vec<PatientRecord> {
    records
        .iter()
        .map(|r| PatientRecord { visits: r.visits.clone(), label: Vec::new(), domain: r.domain })
        .collect()
}

/// Zeroes every domain-head parameter.
pub fn zero_domain_head(model: &mut Model) {
    for p in model.domain_head.ids() {
        model.store.value_mut(p).fill(0.0);
    }
}

/// Representations of many records with no gradient tracking, re-exported for callers
/// that only hold a checkpoint.
pub fn representations(checkpoint: &Checkpoint, records: &[PatientRecord]) -> Result<Tensor> {
    encode_all(&checkpoint.model.store, &checkpoint.model.encoder, records)
}
