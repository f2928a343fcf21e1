//! Minibatch training loop with resumable state.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::optim::{sgd_step, Momentum, StepSizes};
use super::regularizer::{binarizing_penalty, model_complexity_penalty, regularizer_grads, RegConfig};
use crate::arch::InitConfig;
use crate::data::Dataset;
use crate::nn::{Network, SteCounterpart};
use crate::{Error, Result, SeededRng};

/// Multiply the weight and gate learning rates by `factor` every
/// `every_epochs` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub factor: f64,
    pub every_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Gate learning rate; the weight learning rate when absent.
    pub gate_lr: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds weight initialisation and the shuffling stream.
    pub seed: u64,
    pub init: InitConfig,
    /// Iterations between metrics records; 0 records once per epoch.
    pub eval_every: usize,
    /// Evaluate on at most this many validation samples.
    pub val_limit: Option<usize>,
    pub lr_decay: Option<StepDecay>,
    pub ste: SteCounterpart,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            gate_lr: None,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            init: InitConfig::default(),
            eval_every: 0,
            val_limit: None,
            lr_decay: None,
            ste: SteCounterpart::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Domain(m.into()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if let Some(g) = self.gate_lr {
            if !(g.is_finite() && g >= 0.0) {
                return bad("gate learning rate must be non-negative");
            }
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if let Some(d) = self.lr_decay {
            if d.every_epochs == 0 || !(d.factor.is_finite() && d.factor > 0.0) {
                return bad("step decay needs a positive factor and period");
            }
        }
        if !(0.0..=1.0).contains(&self.init.gate_w0) || !(0.0..=1.0).contains(&self.init.gate_d0) {
            return bad("initial gate values must lie in [0, 1]");
        }
        Ok(())
    }

    /// Seed of the minibatch shuffling stream, distinct from the init stream.
    pub fn shuffle_seed(&self) -> u64 {
        self.seed ^ 0x5348_5546_464c_4531
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    /// Mean minibatch loss since the previous record.
    pub loss: f64,
    pub r_binarize: f64,
    pub r_complexity: f64,
    /// Active units (or feature maps) per parametric layer.
    pub phi: Vec<usize>,
    pub val_acc: Option<f64>,
}

/// Binarized width of every parametric layer; ungated layers count in full.
pub fn binarized_phi(net: &Network) -> Result<Vec<usize>> {
    net.layers()
        .iter()
        .filter(|l| l.is_parametric())
        .map(|l| match l.gate() {
            Some(g) => Ok(g.binarized()?.w.iter().filter(|&&w| w).count()),
            None => Ok(l.width().unwrap_or(0)),
        })
        .collect()
}

/// Classification accuracy on the first `limit` samples (all by default).
pub fn evaluate(net: &Network, ds: &Dataset, limit: Option<usize>) -> Result<f64> {
    const CHUNK: usize = 500;
    let n = limit.map_or(ds.len(), |l| l.min(ds.len()));
    if n == 0 {
        return Err(Error::EmptySplit("evaluation on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (x, y) = ds.batch(&idx);
        correct += net.predict(&x)?.iter().zip(&y).filter(|(p, t)| p == t).count();
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// What is needed, besides the network, to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub iteration: u64,
    /// Shuffling RNG state at the start of the current epoch.
    pub rng_state: u64,
    pub momentum: Momentum,
}

/// Stepwise trainer. Epoch `e` visits the training set in the order of one
/// Fisher–Yates shuffle drawn from the shuffling stream; the last minibatch
/// of an epoch may be short.
#[derive(Debug)]
pub struct Trainer<'a> {
    net: Network,
    momentum: Momentum,
    cfg: TrainConfig,
    reg: RegConfig,
    train: &'a Dataset,
    val: Option<&'a Dataset>,
    rng: SeededRng,
    epoch_start: u64,
    perm: Vec<usize>,
    iteration: u64,
    loss_sum: f64,
    loss_count: usize,
    timeline: Vec<MetricsRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        net: Network,
        train: &'a Dataset,
        val: Option<&'a Dataset>,
        cfg: TrainConfig,
        reg: RegConfig,
    ) -> Result<Self> {
        let state = TrainState {
            iteration: 0,
            rng_state: SeededRng::new(cfg.shuffle_seed()).state(),
            momentum: Momentum::zeros(&net),
        };
        Self::resume(net, train, val, cfg, reg, state)
    }

    pub fn resume(
        net: Network,
        train: &'a Dataset,
        val: Option<&'a Dataset>,
        cfg: TrainConfig,
        reg: RegConfig,
        state: TrainState,
    ) -> Result<Self> {
        cfg.validate()?;
        if !reg.is_valid() {
            return Err(Error::Domain("regularization weights must be non-negative and the step clip positive".into()));
        }
        if train.is_empty() {
            return Err(Error::EmptySplit("training set is empty".into()));
        }
        for ds in core::iter::once(train).chain(val) {
            if ds.sample_shape() != net.input_shape() {
                return Err(Error::Dimension {
                    op: "dataset vs network input",
                    left: ds.sample_shape().to_vec(),
                    right: net.input_shape().to_vec(),
                });
            }
            if ds.class_count() > net.classes() {
                return Err(Error::Domain(format!("{} classes but {} outputs", ds.class_count(), net.classes())));
            }
        }
        if !state.momentum.matches(&net) {
            return Err(Error::Domain("optimizer state does not match the network".into()));
        }
        let mut t = Self {
            net,
            momentum: state.momentum,
            cfg,
            reg,
            train,
            val,
            rng: SeededRng::from_state(state.rng_state),
            epoch_start: state.rng_state,
            perm: Vec::new(),
            iteration: state.iteration,
            loss_sum: 0.0,
            loss_count: 0,
            timeline: Vec::new(),
        };
        if !t.iteration.is_multiple_of(t.batches_per_epoch()) {
            t.shuffle();
        }
        Ok(t)
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_iterations(&self) -> u64 {
        self.cfg.epochs as u64 * self.batches_per_epoch()
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn timeline(&self) -> &[MetricsRecord] {
        &self.timeline
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> TrainState {
        let at_boundary = self.iteration.is_multiple_of(self.batches_per_epoch());
        TrainState {
            iteration: self.iteration,
            rng_state: if at_boundary { self.rng.state() } else { self.epoch_start },
            momentum: self.momentum.clone(),
        }
    }

    fn shuffle(&mut self) {
        self.epoch_start = self.rng.state();
        self.perm = (0..self.train.len()).collect();
        self.rng.shuffle(&mut self.perm);
    }

    /// Step-decay multiplier, shared by the weight and gate learning rates.
    fn decay(&self) -> f64 {
        match self.cfg.lr_decay {
            Some(d) => {
                let epoch = self.iteration / self.batches_per_epoch();
                let k = epoch / d.every_epochs as u64;
                libm::pow(d.factor, k as f64)
            }
            None => 1.0,
        }
    }

    /// One minibatch update. Returns the metrics record if one was due.
    pub fn step(&mut self) -> Result<Option<MetricsRecord>> {
        let bpe = self.batches_per_epoch();
        let k = (self.iteration % bpe) as usize;
        if k == 0 {
            self.shuffle();
        }
        let b = self.cfg.batch_size;
        let idx = &self.perm[k * b..((k + 1) * b).min(self.perm.len())];
        let (x, y) = self.train.batch(idx);
        let (_, cache) = self.net.forward(&x)?;
        let grads = self.net.backward_with(&cache, &y, self.cfg.ste)?;
        if !grads.loss.is_finite() {
            return Err(Error::Diverged { iteration: self.iteration, what: "loss".into() });
        }
        let reg_grads = regularizer_grads(self.net.gates().map(|(_, g)| g), &self.reg);
        let decay = self.decay();
        let steps = StepSizes {
            lr: self.cfg.lr * decay,
            momentum: self.cfg.momentum,
            gate_lr: self.cfg.gate_lr.unwrap_or(self.cfg.lr) * decay,
        };
        sgd_step(&mut self.net, &grads, &reg_grads, steps, &self.reg, &mut self.momentum, self.iteration)?;
        self.iteration += 1;
        self.loss_sum += grads.loss;
        self.loss_count += 1;

        let due = match self.cfg.eval_every {
            0 => self.iteration.is_multiple_of(bpe),
            n => self.iteration.is_multiple_of(n as u64),
        };
        if due {
            Ok(Some(self.record()?))
        } else {
            Ok(None)
        }
    }

    /// Appends a metrics record for the current state and returns it.
    pub fn record(&mut self) -> Result<MetricsRecord> {
        let gates = || self.net.gates().map(|(_, g)| g);
        let rec = MetricsRecord {
            iteration: self.iteration,
            loss: if self.loss_count > 0 { self.loss_sum / self.loss_count as f64 } else { f64::NAN },
            r_binarize: binarizing_penalty(gates(), &self.reg).total(),
            r_complexity: model_complexity_penalty(gates(), &self.reg),
            phi: binarized_phi(&self.net)?,
            val_acc: self.val.map(|v| evaluate(&self.net, v, self.cfg.val_limit)).transpose()?,
        };
        self.loss_sum = 0.0;
        self.loss_count = 0;
        self.timeline.push(rec.clone());
        Ok(rec)
    }

    /// Steps until `iteration` reaches `target`.
    pub fn run_until(&mut self, target: u64) -> Result<()> {
        while self.iteration < target {
            self.step()?;
        }
        Ok(())
    }

    /// Trains for the configured number of epochs and makes sure the final
    /// state is recorded.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.total_iterations())?;
        if self.timeline.last().map(|r| r.iteration) != Some(self.iteration) {
            self.record()?;
        }
        Ok(())
    }

    pub fn finish(self) -> (Network, Vec<MetricsRecord>) {
        (self.net, self.timeline)
    }
}

/// Trains `net` on `train` and returns the trained network with its metrics
/// timeline. A divergence aborts with [`Error::Diverged`]; use [`Trainer`]
/// directly to keep the last finite state.
pub fn train(
    net: Network,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    reg: &RegConfig,
) -> Result<(Network, Vec<MetricsRecord>)> {
    let mut t = Trainer::new(net, train, val, cfg.clone(), *reg)?;
    t.run()?;
    Ok(t.finish())
}
