//! Round orchestration and experiment execution.
//!
//! A round broadcasts the global weights, lets every client train locally
//! and sanitize its update, then applies the data-weighted mean of the
//! sanitized updates. After each round the global model is scored on the
//! clients' validation shards and the best-scoring weights are kept next to
//! the latest ones.

use crate::config::ExperimentConfig;
use crate::data::{build_federation, Federation, FederationConfig};
use crate::error::{Error, Result};
use crate::metrics::{binarize, dice_coefficient, DiceReport, StdConvention};
use crate::model::{cosine_lr, local_train, Example, LocalTraining, OptimizerState, ToyModel};
use crate::params::ParamVector;
use crate::privacy::{sanitize, PrivacyConfig, PrivacyMode, SanitizationTrace};
use crate::rng::{self, domain};

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModelState {
    pub weights: ParamVector,
    /// Index of the next round to run.
    pub round: usize,
    pub best_weights: ParamVector,
    pub best_val_dice: f64,
    /// Round after which `best_weights` was taken; `None` for the initial model.
    pub best_round: Option<usize>,
}

impl GlobalModelState {
    pub fn new(weights: ParamVector, initial_val_dice: f64) -> Self {
        Self {
            best_weights: weights.clone(),
            weights,
            round: 0,
            best_val_dice: initial_val_dice,
            best_round: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub site_id: usize,
    pub delta: ParamVector,
    pub n_k: usize,
    pub trace: SanitizationTrace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientRoundStats {
    pub site_id: usize,
    pub n_k: usize,
    pub local_loss: f64,
    pub trace: SanitizationTrace,
    /// Mean validation Dice of this site's shard on the new global model.
    pub val_dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub lr: f64,
    pub mean_val_dice: f64,
    pub best_val_dice: f64,
    pub clients: Vec<ClientRoundStats>,
}

pub fn compute_update(local: &ParamVector, global: &ParamVector) -> Result<ParamVector> {
    local.sub(global)
}

/// `w + sum_k (n_k / N) delta_k`, accumulated in site-id order with
/// Neumaier compensation.
pub fn aggregate(updates: &[ClientUpdate], global: &ParamVector) -> Result<ParamVector> {
    if updates.is_empty() {
        return Err(Error::config("aggregation needs at least one client update"));
    }
    let d = global.len();
    for u in updates {
        if u.delta.len() != d {
            return Err(Error::Dimension {
                expected: d,
                found: u.delta.len(),
            });
        }
        if u.n_k == 0 {
            return Err(Error::config(format!("client {} reports zero samples", u.site_id)));
        }
    }
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.site_id);
    let total: usize = ordered.iter().map(|u| u.n_k).sum();

    let mut sum = vec![0.0; d];
    let mut comp = vec![0.0; d];
    for u in &ordered {
        let weight = u.n_k as f64 / total as f64;
        for (j, &x) in u.delta.iter().enumerate() {
            let term = weight * x;
            let t = sum[j] + term;
            if sum[j].abs() >= term.abs() {
                comp[j] += (sum[j] - t) + term;
            } else {
                comp[j] += (term - t) + sum[j];
            }
            sum[j] = t;
        }
    }
    let out = global
        .iter()
        .zip(sum.iter().zip(&comp))
        .map(|(w, (s, c))| w + (s + c))
        .collect();
    Ok(ParamVector::new(out))
}

/// A site with features precomputed.
#[derive(Clone, Debug)]
pub struct PreparedSite {
    pub site_id: usize,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

impl PreparedSite {
    pub fn n_k(&self) -> usize {
        self.train.len()
    }
}

/// Per-sample Dice of the binarized predictions of `weights` on `examples`.
pub fn evaluate(weights: &ParamVector, hidden: usize, examples: &[Example]) -> Result<Vec<f64>> {
    let model = ToyModel::from_params(hidden, weights.clone())?;
    examples
        .iter()
        .map(|ex| dice_coefficient(&binarize(&model.predict(&ex.features)), &ex.mask))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimulationSettings {
    pub hidden: usize,
    pub training: LocalTraining,
    pub total_rounds: usize,
    pub reset_optimizer: bool,
}

/// Client-side state of a federation across rounds.
#[derive(Clone, Debug)]
pub struct Simulation {
    seed: u64,
    settings: SimulationSettings,
    sites: Vec<PreparedSite>,
    optimizers: Vec<OptimizerState>,
}

struct ClientOutcome {
    update: ClientUpdate,
    loss: f64,
}

impl Simulation {
    pub fn new(seed: u64, settings: SimulationSettings, sites: Vec<PreparedSite>) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::config("federation has no client sites"));
        }
        if let Some(s) = sites.iter().find(|s| s.train.is_empty()) {
            return Err(Error::config(format!("site {} has an empty training shard", s.site_id)));
        }
        let d = crate::model::param_count(settings.hidden);
        let optimizers = sites.iter().map(|_| OptimizerState::new(d)).collect();
        Ok(Self {
            seed,
            settings,
            sites,
            optimizers,
        })
    }

    pub fn from_federation(seed: u64, settings: SimulationSettings, fed: &Federation) -> Result<Self> {
        let sites = fed
            .sites
            .iter()
            .map(|s| PreparedSite {
                site_id: s.site_id,
                train: s.train.iter().map(Example::from_sample).collect(),
                val: s.val.iter().map(Example::from_sample).collect(),
            })
            .collect();
        Self::new(seed, settings, sites)
    }

    pub fn settings(&self) -> &SimulationSettings {
        &self.settings
    }

    pub fn sites(&self) -> &[PreparedSite] {
        &self.sites
    }

    /// Unweighted mean over sites of each site's mean validation Dice, plus
    /// the per-site values. Sites without a validation shard are skipped;
    /// if no site has one, training shards are scored instead.
    pub fn validation_dice(&self, weights: &ParamVector) -> Result<(f64, Vec<Option<f64>>)> {
        let any_val = self.sites.iter().any(|s| !s.val.is_empty());
        let per_site: Vec<Option<f64>> = self
            .sites
            .iter()
            .map(|s| {
                let shard = if any_val { &s.val } else { &s.train };
                if shard.is_empty() {
                    return Ok(None);
                }
                let scores = evaluate(weights, self.settings.hidden, shard)?;
                Ok(Some(scores.iter().sum::<f64>() / scores.len() as f64))
            })
            .collect::<Result<_>>()?;
        let scored: Vec<f64> = per_site.iter().flatten().copied().collect();
        Ok((scored.iter().sum::<f64>() / scored.len() as f64, per_site))
    }

    fn client_round(
        &mut self,
        global: &ParamVector,
        round: usize,
        lr: f64,
        privacy: &PrivacyConfig,
        shuffle_domain: u64,
    ) -> Result<Vec<ClientOutcome>> {
        let seed = self.seed;
        let settings = self.settings;
        let work = |(site, opt): (&PreparedSite, &mut OptimizerState)| -> Result<ClientOutcome> {
            if settings.reset_optimizer {
                *opt = OptimizerState::new(global.len());
            }
            let k = site.site_id as u64;
            let mut shuffle = rng::derive(seed, &[shuffle_domain, round as u64, k]);
            let (local, loss) = local_train(
                global,
                settings.hidden,
                &site.train,
                &settings.training,
                lr,
                opt,
                &mut shuffle,
            )?;
            let delta = compute_update(&local, global)?;
            let mut noise = rng::derive(seed, &[domain::NOISE, round as u64, k]);
            let (sanitized, trace) = sanitize(&delta, privacy, &mut noise)?;
            Ok(ClientOutcome {
                update: ClientUpdate {
                    site_id: site.site_id,
                    delta: sanitized,
                    n_k: site.n_k(),
                    trace,
                },
                loss,
            })
        };

        #[cfg(feature = "parallel")]
        let outcomes: Vec<Result<ClientOutcome>> = {
            use rayon::prelude::*;
            self.sites
                .par_iter()
                .zip(self.optimizers.par_iter_mut())
                .map(work)
                .collect()
        };
        #[cfg(not(feature = "parallel"))]
        let outcomes: Vec<Result<ClientOutcome>> =
            self.sites.iter().zip(self.optimizers.iter_mut()).map(work).collect();

        outcomes.into_iter().collect()
    }

    /// One communication round: broadcast, local training, sanitization,
    /// aggregation, validation and best-model bookkeeping.
    pub fn run_round(&mut self, state: &mut GlobalModelState, privacy: &PrivacyConfig) -> Result<RoundRecord> {
        let t = state.round;
        let lr = cosine_lr(t, self.settings.total_rounds, self.settings.training.adam.lr)?;
        let outcomes = self.client_round(&state.weights, t, lr, privacy, domain::SHUFFLE)?;
        let updates: Vec<ClientUpdate> = outcomes.iter().map(|o| o.update.clone()).collect();
        let next = aggregate(&updates, &state.weights)?;

        let (mean_val, per_site) = if next.is_finite() {
            self.validation_dice(&next)?
        } else {
            (f64::NAN, vec![None; self.sites.len()])
        };
        state.weights = next;
        state.round += 1;
        if mean_val > state.best_val_dice {
            state.best_val_dice = mean_val;
            state.best_weights = state.weights.clone();
            state.best_round = Some(t);
        }
        let clients = outcomes
            .iter()
            .zip(per_site)
            .map(|(o, val)| ClientRoundStats {
                site_id: o.update.site_id,
                n_k: o.update.n_k,
                local_loss: o.loss,
                trace: o.update.trace,
                val_dice: val,
            })
            .collect();
        Ok(RoundRecord {
            round: t,
            lr,
            mean_val_dice: mean_val,
            best_val_dice: state.best_val_dice,
            clients,
        })
    }

    /// Median raw update norm over `rounds` non-private rounds run on copies
    /// of the simulation and state; the originals are left untouched.
    pub fn calibrate_static_threshold(&self, state: &GlobalModelState, rounds: usize) -> Result<f64> {
        let mut sim = self.clone();
        for opt in &mut sim.optimizers {
            *opt = OptimizerState::new(state.weights.len());
        }
        let total = sim.settings.total_rounds.max(rounds);
        let mut weights = state.weights.clone();
        let mut norms = Vec::new();
        let np = PrivacyConfig::non_private();
        for t in 0..rounds {
            let lr = cosine_lr(t, total, sim.settings.training.adam.lr)?;
            let outcomes = sim.client_round(&weights, t, lr, &np, domain::WARMUP_SHUFFLE)?;
            norms.extend(outcomes.iter().map(|o| o.update.trace.pre_clip_norm));
            let updates: Vec<ClientUpdate> = outcomes.into_iter().map(|o| o.update).collect();
            weights = aggregate(&updates, &weights)?;
        }
        let c = median(&mut norms);
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::config(format!(
                "static threshold calibration produced {c}; set privacy.fixed_threshold"
            )));
        }
        Ok(c)
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// Stopped after the given round produced non-finite or exploding weights.
    Diverged { round: usize },
}

impl RunStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::Diverged { .. } => "diverged",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub seed: u64,
    pub mode: PrivacyMode,
    pub status: RunStatus,
    pub state: GlobalModelState,
    pub records: Vec<RoundRecord>,
    /// Test scores of the best-validation model; the headline numbers.
    pub test_best: DiceReport,
    pub test_latest: DiceReport,
    pub init_checksum: u64,
    pub static_threshold: Option<f64>,
    pub site_ids: Vec<usize>,
}

impl ExperimentResult {
    pub fn headline(&self) -> f64 {
        self.test_best.mean_across_samples
    }
}

fn settings_for(cfg: &ExperimentConfig) -> SimulationSettings {
    SimulationSettings {
        hidden: cfg.hidden,
        training: LocalTraining {
            epochs: cfg.local_epochs,
            batch_size: cfg.batch_size,
            adam: cfg.adam,
        },
        total_rounds: cfg.rounds,
        reset_optimizer: cfg.reset_optimizer,
    }
}

fn diverged(weights: &ParamVector, val: f64, max_norm: f64) -> bool {
    val.is_nan() || !weights.is_finite() || weights.l2_norm() > max_norm
}

/// Runs `cfg.rounds` rounds with every random stream derived from `seed`.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentResult> {
    cfg.validate()?;
    let fed = build_federation(&FederationConfig {
        seed,
        ..cfg.data.clone()
    })?;
    let mut sim = Simulation::from_federation(seed, settings_for(cfg), &fed)?;
    let test: Vec<Example> = fed.test.iter().map(Example::from_sample).collect();

    let init = ToyModel::init(cfg.hidden, &mut rng::derive(seed, &[domain::INIT]))?.into_params();
    let init_checksum = init.checksum();
    let (init_val, _) = sim.validation_dice(&init)?;
    let mut state = GlobalModelState::new(init, init_val);

    let mut privacy = cfg.privacy.clone();
    let mut static_threshold = None;
    if privacy.mode == PrivacyMode::Static && privacy.fixed_threshold.is_none() {
        let c = sim.calibrate_static_threshold(&state, cfg.warmup_rounds)?;
        privacy.fixed_threshold = Some(c);
        static_threshold = Some(c);
    } else if privacy.mode == PrivacyMode::Static {
        static_threshold = privacy.fixed_threshold;
    }

    let mut records = Vec::with_capacity(cfg.rounds);
    let mut status = RunStatus::Completed;
    for _ in 0..cfg.rounds {
        let rec = sim.run_round(&mut state, &privacy)?;
        let bad = diverged(&state.weights, rec.mean_val_dice, cfg.max_weight_norm);
        let round = rec.round;
        records.push(rec);
        if bad {
            status = RunStatus::Diverged { round };
            break;
        }
    }

    let convention: StdConvention = cfg.std_convention();
    let score = |w: &ParamVector| -> Result<DiceReport> {
        let per_sample = if w.is_finite() {
            evaluate(w, cfg.hidden, &test)?
        } else {
            vec![f64::NAN; test.len()]
        };
        DiceReport::from_per_sample(per_sample, convention)
    };
    Ok(ExperimentResult {
        seed,
        mode: privacy.mode,
        status,
        test_best: score(&state.best_weights)?,
        test_latest: score(&state.weights)?,
        state,
        records,
        init_checksum,
        static_threshold,
        site_ids: sim.sites().iter().map(|s| s.site_id).collect(),
    })
}
