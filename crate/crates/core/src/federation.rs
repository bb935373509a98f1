//! Round protocol: broadcast, adaptive head aggregation, local training and
//! sample-weighted averaging.
//!
//! Every site computation is a pure function of the broadcast globals, the
//! site's stored state and streams derived from the master seed, so the
//! outcome does not depend on how a [`SiteExecutor`] schedules sites.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::losses::{self, GatedCrfConfig, LossTerms, LossWeights, SparseLabelMap};
use crate::metrics::{self, BinaryMask};
use crate::optim::{poly_lr, AdamW, AdamWConfig};
use crate::params::ParamSet;
use crate::rng::{self, Purpose};
use crate::segnet::{self, ForwardOptions, ModelParams, ModelVars, SiteEncoding, UNetConfig};
use crate::synthdata::{self, SiteData, Task};
use crate::tensor::{Tape, Tensor, Var};
use crate::treefilter::{self, AffinityConfig};

/// Which of the four method components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub aa: bool,
    pub scr: bool,
    pub mstree: bool,
    pub gcrf: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    FedIcra,
    FedAvg,
}

impl Mode {
    /// Component flags implied by the mode; plain averaging is every flag off.
    pub fn ablation(self) -> Ablation {
        let on = self == Mode::FedIcra;
        Ablation {
            aa: on,
            scr: on,
            mstree: on,
            gcrf: on,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_power: f64,
    pub adamw: AdamWConfig,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub rounds: usize,
    /// Learning rate of the aggregation weights (no weight decay).
    pub aa_lr: f64,
    /// Rounds (1-based, inclusive) during which the aggregation weights are
    /// trained to convergence; afterwards one epoch per round.
    pub aa_full_rounds: usize,
    pub aa_max_epochs: usize,
    pub aa_tol: f64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-2,
            lr_power: 0.9,
            adamw: AdamWConfig::default(),
            batch_size: 4,
            local_epochs: 1,
            rounds: 50,
            aa_lr: 1e-2,
            aa_full_rounds: 2,
            aa_max_epochs: 5,
            aa_tol: 1e-4,
            augment: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationConfig {
    pub seed: u64,
    pub model: UNetConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub crf: GatedCrfConfig,
    pub affinity: AffinityConfig,
    pub ablation: Ablation,
    /// Also evaluate every `n` rounds (the final evaluation always runs).
    pub eval_every: Option<usize>,
}

/// Stored per-site state.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteState {
    pub phi: ParamSet,
    pub theta: ParamSet,
    /// Element-wise aggregation weights aligned with `theta`.
    pub w: ParamSet,
    pub num_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationState {
    /// Completed rounds.
    pub round: usize,
    pub total_rounds: usize,
    pub global: ModelParams,
    pub sites: Vec<SiteState>,
}

impl FederationState {
    pub fn new(cfg: &FederationConfig, counts: &[usize]) -> Result<Self> {
        if counts.len() != cfg.model.num_sites {
            return Err(Error::InvalidConfig(alloc::format!(
                "{} datasets for a model configured with {} sites",
                counts.len(),
                cfg.model.num_sites
            )));
        }
        if let Some(k) = counts.iter().position(|&n| n == 0) {
            return Err(Error::EmptyDataset(k));
        }
        let global = segnet::build_model(&cfg.model, cfg.seed)?;
        let sites = counts
            .iter()
            .map(|&n| SiteState {
                phi: global.phi.clone(),
                theta: global.theta.clone(),
                w: global.theta.filled(1.0),
                num_samples: n,
            })
            .collect();
        Ok(Self {
            round: 0,
            total_rounds: cfg.train.rounds,
            global,
            sites,
        })
    }

    /// Parameters used to evaluate site `k`: the shared part from the
    /// server with the site's own head when aggregation is adaptive, the
    /// server head otherwise.
    pub fn personalized(&self, k: usize, ablation: Ablation) -> ModelParams {
        let theta = if ablation.aa {
            self.sites[k].theta.clone()
        } else {
            self.global.theta.clone()
        };
        ModelParams {
            phi: self.global.phi.clone(),
            theta,
        }
    }
}

/// Element-wise `Σ_k (n_k / Σn) · part_k`.
pub fn weighted_average(parts: &[&ParamSet], counts: &[usize]) -> Result<ParamSet> {
    if parts.is_empty() || parts.len() != counts.len() {
        return Err(Error::invalid("weighted_average", "need one count per part"));
    }
    if counts.contains(&0) {
        return Err(Error::invalid("weighted_average", "sample counts must be positive"));
    }
    for p in &parts[1..] {
        if !p.same_layout(parts[0]) {
            return Err(Error::invalid("weighted_average", "parameter layouts differ"));
        }
    }
    let total: usize = counts.iter().sum();
    let mut out = parts[0].filled(0.0);
    for (part, &n) in parts.iter().zip(counts) {
        let a = n as f64 / total as f64;
        for (o, p) in out.iter_mut().zip(part.iter()) {
            for (x, y) in o.value.data_mut().iter_mut().zip(p.value.data()) {
                *x += a * y;
            }
        }
    }
    Ok(out)
}

/// `θ̂ = θ_i + (θ_g − θ_i) ⊙ W`.
pub fn adaptive_aggregate(theta_i: &ParamSet, theta_g: &ParamSet, w: &ParamSet) -> Result<ParamSet> {
    theta_i.zip3_map(theta_g, w, |ti, tg, wi| ti + (tg - ti) * wi)
}

/// Maps every entry into `[0, 1]`.
pub fn clip_weights(w: &mut ParamSet) {
    for p in w.iter_mut() {
        for v in p.value.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Result of one aggregation-weight optimization phase.
#[derive(Clone, Debug, PartialEq)]
pub struct AaOutcome {
    pub theta_hat: ParamSet,
    pub epoch_losses: Vec<f64>,
}

/// Optimizes `w` by AdamW on `loss_grad(epoch, batch, θ̂) -> (loss, ∂L/∂θ̂)`.
///
/// Runs up to `max_epochs` epochs of `batches` steps, stopping early once
/// the epoch-mean loss improves by less than `tol` relative to the previous
/// epoch. Each step uses `∂L/∂W = (θ_g − θ_i) ⊙ ∂L/∂θ̂` and clips `w`.
#[allow(clippy::too_many_arguments)]
pub fn update_weights_with<F>(
    theta_i: &ParamSet,
    theta_g: &ParamSet,
    w: &mut ParamSet,
    lr: f64,
    max_epochs: usize,
    batches: usize,
    tol: f64,
    mut loss_grad: F,
) -> Result<AaOutcome>
where
    F: FnMut(usize, usize, &ParamSet) -> Result<(f64, ParamSet)>,
{
    let diff = theta_g.zip_map(theta_i, |g, i| g - i)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        w.num_elements(),
    );
    let mut epoch_losses = Vec::new();
    for epoch in 0..max_epochs {
        let mut total = 0.0;
        for b in 0..batches {
            let theta_hat = adaptive_aggregate(theta_i, theta_g, w)?;
            let (loss, grad) = loss_grad(epoch, b, &theta_hat)?;
            let gw = diff.zip_map(&grad, |d, g| d * g)?;
            opt.step(w, &gw, lr)?;
            clip_weights(w);
            total += loss;
        }
        let mean = total / batches.max(1) as f64;
        let converged = epoch_losses
            .last()
            .map(|&prev: &f64| (prev - mean) / prev.abs().max(f64::MIN_POSITIVE) < tol)
            .unwrap_or(false);
        epoch_losses.push(mean);
        if converged {
            break;
        }
    }
    Ok(AaOutcome {
        theta_hat: adaptive_aggregate(theta_i, theta_g, w)?,
        epoch_losses,
    })
}

/// One training image with cached pairwise kernel weights.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub image: Tensor,
    pub labels: SparseLabelMap,
    pairs: Option<Vec<(u32, u32, f64)>>,
}

/// Training split of one site prepared for the loss computations.
#[derive(Clone, Debug)]
pub struct SiteTrainSet {
    pub items: Vec<TrainItem>,
}

impl SiteTrainSet {
    pub fn new(data: &SiteData, cfg: &FederationConfig) -> Result<Self> {
        let cache = cfg.ablation.gcrf && !cfg.train.augment;
        let items = data
            .train
            .iter()
            .map(|s| {
                Ok(TrainItem {
                    image: s.image.clone(),
                    labels: s.sparse.labels.clone(),
                    pairs: if cache {
                        Some(losses::crf_pairs(&s.image, &cfg.crf)?)
                    } else {
                        None
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Running sums of the loss terms over an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub pce: f64,
    pub mstree: f64,
    pub gcrf: f64,
    pub con: f64,
    pub total: f64,
    pub images: usize,
    /// Largest `|Σ_c P_c − 1|` over every softmax and filtered output seen.
    pub max_simplex_error: f64,
}

impl LossTrace {
    fn mean(&self) -> LossTrace {
        let n = self.images.max(1) as f64;
        LossTrace {
            pce: self.pce / n,
            mstree: self.mstree / n,
            gcrf: self.gcrf / n,
            con: self.con / n,
            total: self.total / n,
            images: self.images,
            max_simplex_error: self.max_simplex_error,
        }
    }
}

fn simplex_error(p: &Tensor) -> f64 {
    let (c, h, w) = p.dims3().expect("class-first map");
    let n = h * w;
    let d = p.data();
    (0..n)
        .map(|i| ((0..c).map(|k| d[k * n + i]).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// What a batch evaluation needs to know besides the data.
struct BatchSpec<'a> {
    cfg: &'a FederationConfig,
    site: SiteEncoding,
    with_con: bool,
}

/// Image, sparse labels and the cached gCRF pairs, if any.
type BatchItem<'a> = (Tensor, SparseLabelMap, Option<&'a [(u32, u32, f64)]>);

/// Mean local objective over `batch`, built on `tape`.
fn batch_objective(
    tape: &mut Tape,
    vars: &ModelVars,
    batch: &[BatchItem<'_>],
    spec: &BatchSpec,
    trace: &mut LossTrace,
) -> Result<Var> {
    let ab = spec.cfg.ablation;
    let all_sites = spec.with_con && ab.scr && spec.site.num_sites() > 1;
    let mut sum: Option<Var> = None;
    for (image, labels, pairs) in batch {
        let x = tape.constant(image.clone());
        let out = segnet::forward(
            tape,
            vars,
            x,
            spec.site,
            ForwardOptions {
                scr: ab.scr,
                all_sites,
            },
        )?;
        let probs_value = tape.value(out.probs).clone();
        trace.max_simplex_error = trace.max_simplex_error.max(simplex_error(&probs_value));
        let pce = losses::partial_ce(tape, out.probs, labels)?;
        let mstree = if ab.mstree {
            let target = treefilter::cascade_pseudo_label(
                &probs_value,
                image,
                tape.value(out.d2),
                tape.value(out.d3),
                spec.cfg.affinity,
            )?;
            trace.max_simplex_error = trace.max_simplex_error.max(simplex_error(&target));
            Some(losses::tree_energy(tape, out.probs, &target, labels)?)
        } else {
            None
        };
        let gcrf = if ab.gcrf {
            Some(match pairs {
                Some(p) => losses::gated_crf_with_pairs(tape, out.probs, p.to_vec())?,
                None => losses::gated_crf(tape, out.probs, image, &spec.cfg.crf)?,
            })
        } else {
            None
        };
        let con = match (all_sites, out.attention) {
            (true, Some(att)) => {
                let others = segnet::other_sites(&out, spec.site);
                Some(segnet::contrastive_loss(tape, att, &others)?)
            }
            _ => None,
        };
        let terms = LossTerms {
            pce,
            mstree,
            gcrf,
            con,
        };
        let total = losses::total_loss(tape, &terms, &spec.cfg.weights)?;
        trace.pce += tape.value(pce).item();
        trace.mstree += mstree.map_or(0.0, |v| tape.value(v).item());
        trace.gcrf += gcrf.map_or(0.0, |v| tape.value(v).item());
        trace.con += con.map_or(0.0, |v| tape.value(v).item());
        trace.total += tape.value(total).item();
        trace.images += 1;
        sum = Some(match sum {
            Some(s) => tape.add(s, total)?,
            None => total,
        });
    }
    let sum = sum.ok_or_else(|| Error::invalid("batch", "empty batch"))?;
    Ok(tape.scale(sum, 1.0 / batch.len() as f64))
}

/// Shuffled batches for one epoch; the image/label pairs are augmented
/// when enabled.
#[allow(clippy::type_complexity)]
fn epoch_batches<'a>(
    data: &'a SiteTrainSet,
    batch_size: usize,
    augment: bool,
    rng: &mut rng::Rng,
    aug_rng: &mut rng::Rng,
) -> Result<Vec<Vec<(Tensor, SparseLabelMap, Option<&'a [(u32, u32, f64)]>)>>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            chunk
                .iter()
                .map(|&i| {
                    let item = &data.items[i];
                    if augment {
                        let (img, lab) = synthdata::augment(&item.image, &item.labels, aug_rng)?;
                        Ok((img, lab, None))
                    } else {
                        Ok((item.image.clone(), item.labels.clone(), item.pairs.as_deref()))
                    }
                })
                .collect()
        })
        .collect()
}

/// Aggregation-weight phase for site `k` in (0-based) round `round`.
pub fn update_weight_matrix(
    cfg: &FederationConfig,
    global: &ModelParams,
    site_state: &mut SiteState,
    k: usize,
    data: &SiteTrainSet,
    round: usize,
) -> Result<AaOutcome> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(k));
    }
    let site = SiteEncoding::new(k, cfg.model.num_sites)?;
    let epochs = if round < cfg.train.aa_full_rounds {
        cfg.train.aa_max_epochs
    } else {
        1
    };
    let tol = if round < cfg.train.aa_full_rounds {
        cfg.train.aa_tol
    } else {
        f64::NEG_INFINITY
    };
    let nb = data.len().div_ceil(cfg.train.batch_size.max(1));
    let mut rng = rng::stream(cfg.seed, k as u64, round as u64, Purpose::AggregationShuffle);
    let mut aug_rng = rng::stream(cfg.seed, k as u64, round as u64 | 1 << 31, Purpose::Augment);
    let mut batches = Vec::new();
    let spec = BatchSpec {
        cfg,
        site,
        with_con: false,
    };
    update_weights_with(
        &site_state.theta,
        &global.theta,
        &mut site_state.w,
        cfg.train.aa_lr,
        epochs,
        nb,
        tol,
        |_, b, theta_hat| {
            if b == 0 {
                batches = epoch_batches(data, cfg.train.batch_size, cfg.train.augment, &mut rng, &mut aug_rng)?;
            }
            let params = ModelParams {
                phi: global.phi.clone(),
                theta: theta_hat.clone(),
            };
            let mut tape = Tape::new();
            let vars = ModelVars::register(&mut tape, &params, false, true);
            let mut trace = LossTrace::default();
            let loss = batch_objective(&mut tape, &vars, &batches[b], &spec, &mut trace)?;
            let value = tape.value(loss).item();
            tape.backward(loss)?;
            Ok((value, vars.grads(&mut tape, &params)?.theta))
        },
    )
}

/// Per-site result of local training.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalMetrics {
    /// Epoch means, one per local epoch.
    pub epochs: Vec<LossTrace>,
    pub max_simplex_error: f64,
}

/// `E` epochs of AdamW on the local objective starting from `params`.
pub fn local_train(
    cfg: &FederationConfig,
    mut params: ModelParams,
    k: usize,
    data: &SiteTrainSet,
    round: usize,
) -> Result<(ModelParams, LocalMetrics)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(k));
    }
    let site = SiteEncoding::new(k, cfg.model.num_sites)?;
    let lr = poly_lr(cfg.train.lr0, round, cfg.train.rounds, cfg.train.lr_power);
    let mut opt_phi = AdamW::new(cfg.train.adamw, params.phi.num_elements());
    let mut opt_theta = AdamW::new(cfg.train.adamw, params.theta.num_elements());
    let mut rng = rng::stream(cfg.seed, k as u64, round as u64, Purpose::Shuffle);
    let mut aug_rng = rng::stream(cfg.seed, k as u64, round as u64, Purpose::Augment);
    let spec = BatchSpec {
        cfg,
        site,
        with_con: true,
    };
    let mut metrics = LocalMetrics {
        epochs: Vec::new(),
        max_simplex_error: 0.0,
    };
    for _ in 0..cfg.train.local_epochs {
        let mut trace = LossTrace::default();
        for batch in epoch_batches(data, cfg.train.batch_size, cfg.train.augment, &mut rng, &mut aug_rng)? {
            let mut tape = Tape::new();
            let vars = ModelVars::register(&mut tape, &params, true, true);
            let loss = batch_objective(&mut tape, &vars, &batch, &spec, &mut trace)?;
            tape.backward(loss)?;
            let g = vars.grads(&mut tape, &params)?;
            opt_phi.step(&mut params.phi, &g.phi, lr)?;
            opt_theta.step(&mut params.theta, &g.theta, lr)?;
        }
        metrics.max_simplex_error = metrics.max_simplex_error.max(trace.max_simplex_error);
        metrics.epochs.push(trace.mean());
    }
    Ok((params, metrics))
}

/// Per-structure scores averaged over a site's test split.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureScore {
    pub name: &'static str,
    pub dsc: f64,
    pub hd95: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiteEval {
    pub site: usize,
    pub structures: Vec<StructureScore>,
    /// Mean over structures.
    pub dsc: f64,
    pub hd95: f64,
}

/// Scores `params` on `samples` of a site.
pub fn evaluate(
    params: &ModelParams,
    samples: &[synthdata::Sample],
    task: Task,
    site: SiteEncoding,
    scr: bool,
) -> Result<(SiteEval, Vec<Vec<u8>>)> {
    let structs = task.structures();
    let mut sums = vec![(0.0, 0.0); structs.len()];
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let probs = segnet::predict(params, &s.image, site, scr)?;
        let (_, h, w) = probs.dims3()?;
        let pred = segnet::argmax_classes(&probs)?;
        for (acc, &(_, lo)) in sums.iter_mut().zip(structs) {
            let a = BinaryMask::from_fn(h, w, |i| pred[i] >= lo);
            let b = BinaryMask::from_fn(h, w, |i| s.full_mask[i] >= lo);
            acc.0 += metrics::dsc(&a, &b)?;
            acc.1 += metrics::hd95(&a, &b)?;
        }
        predictions.push(pred);
    }
    let n = samples.len().max(1) as f64;
    let structures: Vec<StructureScore> = structs
        .iter()
        .zip(&sums)
        .map(|(&(name, _), &(d, h))| StructureScore {
            name,
            dsc: d / n,
            hd95: h / n,
        })
        .collect();
    let m = structures.len() as f64;
    Ok((
        SiteEval {
            site: site.index(),
            dsc: structures.iter().map(|s| s.dsc).sum::<f64>() / m,
            hd95: structures.iter().map(|s| s.hd95).sum::<f64>() / m,
            structures,
        },
        predictions,
    ))
}

/// Schedules independent site computations. Results come back in site
/// order whatever the execution order.
pub trait SiteExecutor {
    fn map_sites<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs sites one after another.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl SiteExecutor for Sequential {
    fn map_sites<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}

/// Per-site outcome of one round.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteRound {
    pub site: usize,
    /// Mean of the last local epoch (zeros when no epoch ran).
    pub losses: LossTrace,
    /// Aggregation-weight epochs run (0 when skipped).
    pub aa_epochs: usize,
    pub mean_w: f64,
    pub eval: Option<SiteEval>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    /// 1-based round number.
    pub round: usize,
    pub sites: Vec<SiteRound>,
}

struct SiteOutcome {
    state: SiteState,
    metrics: LocalMetrics,
    aa_epochs: usize,
}

fn site_round(
    cfg: &FederationConfig,
    global: &ModelParams,
    prev: &SiteState,
    k: usize,
    data: &SiteTrainSet,
    round: usize,
) -> Result<SiteOutcome> {
    let mut state = prev.clone();
    let mut aa_epochs = 0;
    let head = if !cfg.ablation.aa {
        global.theta.clone()
    } else if state.theta == global.theta {
        // θ_g = θ_k: every W gives the same head and a zero gradient
        state.theta.clone()
    } else {
        let out = update_weight_matrix(cfg, global, &mut state, k, data, round)?;
        aa_epochs = out.epoch_losses.len();
        out.theta_hat
    };
    let start = ModelParams {
        phi: global.phi.clone(),
        theta: head,
    };
    let (trained, metrics) = local_train(cfg, start, k, data, round)?;
    state.phi = trained.phi;
    state.theta = trained.theta;
    Ok(SiteOutcome {
        state,
        metrics,
        aa_epochs,
    })
}

/// One full round: per-site aggregation weights and local training, then
/// sample-weighted averaging of both parameter parts.
pub fn run_round<E: SiteExecutor>(
    cfg: &FederationConfig,
    state: &FederationState,
    data: &[SiteTrainSet],
    exec: &E,
) -> Result<(FederationState, RoundRecord)> {
    let round = state.round;
    let outcomes = exec.map_sites(state.sites.len(), |k| {
        site_round(cfg, &state.global, &state.sites[k], k, &data[k], round)
    });
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let counts: Vec<usize> = outcomes.iter().map(|o| o.state.num_samples).collect();
    let phis: Vec<&ParamSet> = outcomes.iter().map(|o| &o.state.phi).collect();
    let thetas: Vec<&ParamSet> = outcomes.iter().map(|o| &o.state.theta).collect();
    let global = ModelParams {
        phi: weighted_average(&phis, &counts)?,
        theta: weighted_average(&thetas, &counts)?,
    };
    let sites: Vec<SiteRound> = outcomes
        .iter()
        .enumerate()
        .map(|(k, o)| {
            let mut losses = o.metrics.epochs.last().copied().unwrap_or_default();
            losses.max_simplex_error = o.metrics.max_simplex_error;
            let n = o.state.w.num_elements().max(1) as f64;
            SiteRound {
                site: k,
                losses,
                aa_epochs: o.aa_epochs,
                mean_w: o.state.w.values().sum::<f64>() / n,
                eval: None,
            }
        })
        .collect();
    let next = FederationState {
        round: round + 1,
        total_rounds: state.total_rounds,
        global,
        sites: outcomes.into_iter().map(|o| o.state).collect(),
    };
    Ok((next, RoundRecord { round: round + 1, sites }))
}

/// Final per-site scores plus the round history.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rounds: Vec<RoundRecord>,
    pub sites: Vec<SiteEval>,
    pub average_dsc: f64,
    pub average_hd95: f64,
    /// Largest simplex deviation observed during training.
    pub max_simplex_error: f64,
}

/// Evaluates every site's personalized model on its test split.
pub fn evaluate_all<E: SiteExecutor>(
    cfg: &FederationConfig,
    state: &FederationState,
    sites: &[SiteData],
    exec: &E,
) -> Result<Vec<(SiteEval, Vec<Vec<u8>>)>> {
    exec.map_sites(sites.len(), |k| {
        let params = state.personalized(k, cfg.ablation);
        let enc = SiteEncoding::new(k, cfg.model.num_sites)?;
        evaluate(&params, &sites[k].test, sites[k].spec.task, enc, cfg.ablation.scr)
    })
    .into_iter()
    .collect()
}

/// Runs `cfg.train.rounds` rounds and evaluates. `observer` sees the state
/// and record after every round.
pub fn run_federation<E, O>(
    cfg: &FederationConfig,
    sites: &[SiteData],
    exec: &E,
    mut observer: O,
) -> Result<(FederationState, Report)>
where
    E: SiteExecutor,
    O: FnMut(&FederationState, &RoundRecord) -> Result<()>,
{
    let sets: Vec<SiteTrainSet> = exec
        .map_sites(sites.len(), |k| SiteTrainSet::new(&sites[k], cfg))
        .into_iter()
        .collect::<Result<_>>()?;
    let counts: Vec<usize> = sets.iter().map(SiteTrainSet::len).collect();
    let mut state = FederationState::new(cfg, &counts)?;
    let mut rounds = Vec::with_capacity(cfg.train.rounds);
    let mut max_simplex_error: f64 = 0.0;
    for _ in 0..cfg.train.rounds {
        let (next, mut record) = run_round(cfg, &state, &sets, exec)?;
        state = next;
        if cfg.eval_every.is_some_and(|e| e > 0 && state.round % e == 0 && state.round < cfg.train.rounds) {
            for (s, (ev, _)) in record.sites.iter_mut().zip(evaluate_all(cfg, &state, sites, exec)?) {
                s.eval = Some(ev);
            }
        }
        for s in &record.sites {
            max_simplex_error = max_simplex_error.max(s.losses.max_simplex_error);
        }
        observer(&state, &record)?;
        rounds.push(record);
    }
    let evals: Vec<SiteEval> = evaluate_all(cfg, &state, sites, exec)?.into_iter().map(|(e, _)| e).collect();
    if let Some(last) = rounds.last_mut() {
        for (s, e) in last.sites.iter_mut().zip(&evals) {
            s.eval = Some(e.clone());
        }
    }
    let n = evals.len().max(1) as f64;
    let report = Report {
        average_dsc: evals.iter().map(|e| e.dsc).sum::<f64>() / n,
        average_hd95: evals.iter().map(|e| e.hd95).sum::<f64>() / n,
        sites: evals,
        rounds,
        max_simplex_error,
    };
    Ok((state, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Param;

    fn scalar_set(v: f64) -> ParamSet {
        core::iter::once(Param {
            name: "x".into(),
            value: Tensor::scalar(v),
        })
        .collect()
    }

    #[test]
    fn weighted_average_closed_forms() {
        let a = scalar_set(2.0);
        let b = scalar_set(4.0);
        let avg = weighted_average(&[&a, &b], &[1, 3]).unwrap();
        assert_eq!(avg.values().next().unwrap(), 3.5);
        assert_eq!(weighted_average(&[&a], &[7]).unwrap(), a);
        assert!(weighted_average(&[&a, &b], &[1, 0]).is_err());
    }

    #[test]
    fn aggregation_endpoints_and_midpoint() {
        let ti = scalar_set(1.0);
        let tg = scalar_set(3.0);
        let at = |w: f64| adaptive_aggregate(&ti, &tg, &scalar_set(w)).unwrap().values().next().unwrap();
        assert_eq!(at(1.0), 3.0);
        assert_eq!(at(0.0), 1.0);
        assert_eq!(at(0.5), 2.0);
    }

    #[test]
    fn clip_maps_into_unit_interval() {
        let mut w: ParamSet = [1.3, -0.2, 0.7]
            .iter()
            .enumerate()
            .map(|(i, &v)| Param {
                name: alloc::format!("w{}", i),
                value: Tensor::scalar(v),
            })
            .collect();
        clip_weights(&mut w);
        assert_eq!(w.values().collect::<Vec<_>>(), vec![1.0, 0.0, 0.7]);
    }

    /// Runs the scalar toy and returns the first step at which `w` is
    /// within 0.05 of its target, plus the final `w`.
    fn toy(target_global: bool, w0: f64) -> (Option<usize>, f64) {
        let (ti, tg) = (scalar_set(-1.0), scalar_set(2.0));
        let mut w = scalar_set(w0);
        let target = if target_global { 2.0 } else { -1.0 };
        let goal = if target_global { 1.0 } else { 0.0 };
        let mut reached = None;
        update_weights_with(&ti, &tg, &mut w, 1e-2, 500, 1, f64::NEG_INFINITY, |e, _, th| {
            let x = th.values().next().unwrap();
            if reached.is_none() && ((x + 1.0) / 3.0 - goal).abs() < 0.05 {
                reached = Some(e);
            }
            Ok(((x - target) * (x - target), scalar_set(2.0 * (x - target))))
        })
        .unwrap();
        let final_w = w.values().next().unwrap();
        (reached, final_w)
    }

    #[test]
    fn scalar_toys_converge() {
        let (steps, w) = toy(true, 0.0);
        assert!(steps.unwrap() < 500 && (w - 1.0).abs() < 0.05, "{:?} {}", steps, w);
        let (steps, w) = toy(false, 1.0);
        assert!(steps.unwrap() < 500 && w.abs() < 0.05, "{:?} {}", steps, w);
    }

    #[test]
    fn equal_heads_give_zero_weight_gradient() {
        let t = scalar_set(0.3);
        let mut w = scalar_set(0.6);
        let out = update_weights_with(&t, &t, &mut w, 1e-2, 3, 2, 0.0, |_, _, th| {
            let x = th.values().next().unwrap();
            Ok((x * x, scalar_set(2.0 * x)))
        })
        .unwrap();
        assert_eq!(w.values().next().unwrap(), 0.6);
        assert_eq!(out.theta_hat, t);
    }
}
