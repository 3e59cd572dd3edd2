use rand::Rng;

use super::objective::{hypergradient, match_loss, unroll_params, MatchLoss};
use super::stats::{pearson_r, should_expand};
use super::syn::SyntheticDataset;
use crate::error::{Error, Result};
use crate::seed;
use crate::teacher::TrajectorySet;
use crate::tensor::Tensor;

const STREAM_BUFFER: u64 = 1;
const STREAM_START: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// Student steps `N` per unroll.
    pub syn_steps: usize,
    pub lr_pixels: f64,
    pub lr_alpha: f64,
    /// Significance multiplier λ of the expansion test.
    pub lambda: f64,
    /// Iterations without expansion before the run stops.
    pub max_iter: usize,
    /// Growth of the epoch pool per expansion.
    pub expand_increment: usize,
    /// Validation loss is computed every `validation_stride` iterations.
    pub validation_stride: usize,
    /// Hard cap on outer iterations across all expansions.
    pub max_total_iter: Option<u64>,
    pub seed: u64,
    /// Caps the L2 norm of the pixel hypergradient; the α gradient is scaled
    /// by the same factor.
    pub grad_clip: Option<f64>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            syn_steps: 10,
            lr_pixels: 100.0,
            lr_alpha: 1e-5,
            lambda: 5.0,
            max_iter: 1000,
            expand_increment: 1,
            validation_stride: 1,
            max_total_iter: None,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be > 0");
        }
        if self.max_iter == 0 || self.expand_increment == 0 || self.validation_stride == 0 {
            return bad("max_iter, expand_increment and validation_stride must be at least 1");
        }
        if !(self.lr_pixels >= 0.0 && self.lr_pixels.is_finite()) || !(self.lr_alpha >= 0.0 && self.lr_alpha.is_finite()) {
            return bad("learning rates must be finite and >= 0");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return bad("grad_clip must be finite and > 0");
        }
        Ok(())
    }
}

/// Controller state: iterations since the last expansion, the cycling start
/// epoch `t`, the epoch pool size `T` and the validation series.
#[derive(Debug, Clone, PartialEq)]
pub struct StmState {
    iter: usize,
    t: usize,
    pool: usize,
    ell_val: Vec<f64>,
    lambda: f64,
    max_iter: usize,
    syn_steps: usize,
    increment: usize,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Expansion {
    /// Global step at which the test fired.
    pub step: u64,
    /// Iterations since the previous expansion.
    pub iteration: usize,
    pub series_len: usize,
    pub r: f64,
    pub new_pool: usize,
}

impl StmState {
    pub fn new(cfg: &DistillConfig) -> Self {
        Self {
            iter: 0,
            t: 0,
            pool: 1,
            ell_val: Vec::new(),
            lambda: cfg.lambda,
            max_iter: cfg.max_iter,
            syn_steps: cfg.syn_steps,
            increment: cfg.expand_increment,
            step: 0,
        }
    }

    pub(super) fn restore(cfg: &DistillConfig, iter: usize, t: usize, pool: usize, step: u64, ell_val: Vec<f64>) -> Self {
        Self { iter, t, pool, ell_val, step, ..Self::new(cfg) }
    }

    pub fn iter(&self) -> usize {
        self.iter
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Epoch pool size `T`.
    pub fn pool(&self) -> usize {
        self.pool
    }

    pub fn ell_val(&self) -> &[f64] {
        &self.ell_val
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn max_iter(&self) -> usize {
        self.max_iter
    }

    pub fn syn_steps(&self) -> usize {
        self.syn_steps
    }

    /// Outer iterations completed since the start of the run.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn finished(&self) -> bool {
        self.iter >= self.max_iter
    }

    /// Counts an iteration and advances `t`, wrapping to 0 at `T`. Returns
    /// the start epoch to match.
    pub fn begin_iteration(&mut self) -> usize {
        self.iter += 1;
        self.step += 1;
        self.t = (self.t + 1) % self.pool;
        self.t
    }

    pub fn record(&mut self, ell: f64) {
        self.ell_val.push(ell);
    }

    /// Applies the expansion test to the current series; on success grows
    /// `T` and resets `iter` and the series.
    pub fn try_expand(&mut self) -> Option<Expansion> {
        if !should_expand(&self.ell_val, self.lambda) {
            return None;
        }
        let r = pearson_r(&self.ell_val).map(|c| c.r).unwrap_or(0.0);
        let e = Expansion {
            step: self.step,
            iteration: self.iter,
            series_len: self.ell_val.len(),
            r,
            new_pool: self.pool + self.increment,
        };
        self.pool += self.increment;
        self.iter = 0;
        self.ell_val.clear();
        Some(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub t: usize,
    pub buffer: usize,
    pub loss: MatchLoss,
}

fn pick_buffer(set: &TrajectorySet, seed_: u64, step: u64) -> usize {
    seed::rng(seed_, &[STREAM_BUFFER, step]).random_range(0..set.len())
}

fn check_snapshot(set: &TrajectorySet, index: usize) -> Result<()> {
    if index >= set.min_snapshots() {
        return Err(Error::TrajectoryExhausted { needed: index, available: set.min_snapshots() });
    }
    Ok(())
}

/// Matches `N` student steps from epoch `t` against epoch `t + m` of
/// buffer `b` and takes one SGD step on the pixels and α.
fn match_and_update(
    cfg: &DistillConfig,
    set: &TrajectorySet,
    syn: &SyntheticDataset,
    b: usize,
    t: usize,
    m: usize,
) -> Result<(SyntheticDataset, MatchLoss)> {
    check_snapshot(set, t + m)?;
    let arch = set.arch();
    syn.check_arch(arch)?;
    let snaps = set.buffers()[b].snapshots();
    let hg = hypergradient(
        arch,
        snaps[t].values(),
        snaps[t + m].values(),
        syn.images(),
        &syn.labels(),
        syn.alpha(),
        cfg.syn_steps,
    )?;
    let scale = match cfg.grad_clip {
        Some(c) => {
            let norm = hg.d_images.data().iter().map(|&g| g as f64 * g as f64).sum::<f64>().sqrt();
            if norm > c { c / norm } else { 1.0 }
        }
        None => 1.0,
    };
    let lr = (cfg.lr_pixels * scale) as f32;
    let images: Vec<f32> = syn.images().data().iter().zip(hg.d_images.data()).map(|(&x, &g)| x - lr * g).collect();
    let alpha = (syn.alpha() as f64 - cfg.lr_alpha * scale * hg.d_alpha) as f32;
    let next = syn.updated(Tensor::new(syn.images().shape().to_vec(), images)?, alpha)?;
    Ok((next, hg.loss))
}

/// One outer iteration: advance `t`, sample a buffer, match with `M = 1`
/// and update the synthetic set.
pub fn distill_step(
    state: &mut StmState,
    set: &TrajectorySet,
    syn: &SyntheticDataset,
    cfg: &DistillConfig,
) -> Result<(SyntheticDataset, StepInfo)> {
    if set.is_empty() {
        return Err(Error::Empty("trajectory set"));
    }
    let t = state.begin_iteration();
    let b = pick_buffer(set, cfg.seed, state.step);
    let (next, loss) = match_and_update(cfg, set, syn, b, t, 1)?;
    Ok((next, StepInfo { t, buffer: b, loss }))
}

/// Match loss at the first epoch outside the pool (`T → T+1`) of buffer
/// `b`, without updating anything; appended to the validation series.
pub fn validation_loss(state: &mut StmState, set: &TrajectorySet, syn: &SyntheticDataset, b: usize) -> Result<f64> {
    let t = state.pool;
    check_snapshot(set, t + 1)?;
    let snaps = set.buffers()[b].snapshots();
    let student = unroll_params(&snaps[t], syn, state.syn_steps)?;
    let l = match_loss(&student, &snaps[t], &snaps[t + 1])?.value;
    state.record(l);
    Ok(l)
}

/// Fixed-pool baseline: `t` uniform in `[0, pool)`, target `t + m`. `step`
/// keys the random draws; the buffer draw matches [`distill_step`] at the
/// same step.
pub fn mtt_baseline_step(
    cfg: &DistillConfig,
    pool: usize,
    m: usize,
    set: &TrajectorySet,
    syn: &SyntheticDataset,
    step: u64,
) -> Result<(SyntheticDataset, StepInfo)> {
    if set.is_empty() {
        return Err(Error::Empty("trajectory set"));
    }
    if pool == 0 || m == 0 {
        return Err(Error::InvalidArgument("pool and matching epochs must be at least 1".into()));
    }
    let t = sample_start(cfg.seed, pool, step);
    let b = pick_buffer(set, cfg.seed, step);
    let (next, loss) = match_and_update(cfg, set, syn, b, t, m)?;
    Ok((next, StepInfo { t, buffer: b, loss }))
}

pub fn sample_start(seed_: u64, pool: usize, step: u64) -> usize {
    seed::rng(seed_, &[STREAM_START, step]).random_range(0..pool)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryEntry {
    pub step: u64,
    pub iter: usize,
    pub t: usize,
    pub pool: usize,
    pub buffer: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub alpha: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// `max_iter` iterations passed without an expansion.
    MaxIter,
    /// The pool reached the end of the recorded trajectories; the result is
    /// kept and this is only a warning.
    TrajectoryExhausted { needed: usize, available: usize },
    /// `max_total_iter` reached.
    Budget,
}

/// Algorithm state of one distillation run, steppable and checkpointable.
#[derive(Debug, Clone, PartialEq)]
pub struct Stm {
    pub(super) cfg: DistillConfig,
    pub(super) syn: SyntheticDataset,
    pub(super) state: StmState,
    pub(super) history: Vec<HistoryEntry>,
    pub(super) expansions: Vec<Expansion>,
    pub(super) termination: Option<Termination>,
}

impl Stm {
    pub fn new(cfg: DistillConfig, syn: SyntheticDataset) -> Result<Self> {
        cfg.validate()?;
        let state = StmState::new(&cfg);
        Ok(Self { cfg, syn, state, history: Vec::new(), expansions: Vec::new(), termination: None })
    }

    pub fn config(&self) -> &DistillConfig {
        &self.cfg
    }

    pub fn syn(&self) -> &SyntheticDataset {
        &self.syn
    }

    pub fn state(&self) -> &StmState {
        &self.state
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn expansions(&self) -> &[Expansion] {
        &self.expansions
    }

    pub fn termination(&self) -> Option<Termination> {
        self.termination
    }

    /// Changes the total-iteration cap, reopening a run that stopped on
    /// its budget.
    pub fn set_budget(&mut self, max_total_iter: Option<u64>) {
        self.cfg.max_total_iter = max_total_iter;
        if self.termination == Some(Termination::Budget) {
            self.termination = None;
        }
    }

    fn stop_reason(&self, set: &TrajectorySet) -> Option<Termination> {
        if let Some(t) = self.termination {
            return Some(t);
        }
        if self.state.finished() {
            return Some(Termination::MaxIter);
        }
        if self.cfg.max_total_iter.is_some_and(|cap| self.state.step >= cap) {
            return Some(Termination::Budget);
        }
        let needed = self.state.pool + 1;
        if needed >= set.min_snapshots() {
            return Some(Termination::TrajectoryExhausted { needed, available: set.min_snapshots() });
        }
        None
    }

    /// One outer iteration with the real validation loss.
    pub fn step(&mut self, set: &TrajectorySet) -> Result<Option<Termination>> {
        self.step_with(set, |state, syn, b| validation_loss(state, set, syn, b))
    }

    /// One outer iteration; `validate(state, syn, buffer)` must append one
    /// value to the state's series and return it.
    pub fn step_with(
        &mut self,
        set: &TrajectorySet,
        mut validate: impl FnMut(&mut StmState, &SyntheticDataset, usize) -> Result<f64>,
    ) -> Result<Option<Termination>> {
        if let Some(t) = self.stop_reason(set) {
            self.termination = Some(t);
            return Ok(Some(t));
        }
        let (next, info) = distill_step(&mut self.state, set, &self.syn, &self.cfg)?;
        self.syn = next;
        let mut entry = HistoryEntry {
            step: self.state.step,
            iter: self.state.iter,
            t: info.t,
            pool: self.state.pool,
            buffer: info.buffer,
            train_loss: info.loss.value,
            val_loss: None,
            alpha: self.syn.alpha(),
        };
        if self.state.iter % self.cfg.validation_stride == 0 {
            let before = self.state.ell_val.len();
            let v = validate(&mut self.state, &self.syn, info.buffer)?;
            if self.state.ell_val.len() != before + 1 {
                self.state.record(v);
            }
            entry.val_loss = Some(v);
            if let Some(e) = self.state.try_expand() {
                self.expansions.push(e);
            }
        }
        self.history.push(entry);
        Ok(None)
    }

    pub fn run(&mut self, set: &TrajectorySet) -> Result<Termination> {
        loop {
            if let Some(t) = self.step(set)? {
                return Ok(t);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct StmResult {
    pub syn: SyntheticDataset,
    pub history: Vec<HistoryEntry>,
    pub expansions: Vec<Expansion>,
    pub termination: Termination,
    pub final_pool: usize,
}

impl From<Stm> for StmResult {
    fn from(s: Stm) -> Self {
        Self {
            termination: s.termination.unwrap_or(Termination::Budget),
            final_pool: s.state.pool,
            syn: s.syn,
            history: s.history,
            expansions: s.expansions,
        }
    }
}

pub fn run_stm(cfg: &DistillConfig, set: &TrajectorySet, syn_init: SyntheticDataset) -> Result<StmResult> {
    if set.is_empty() {
        return Err(Error::Empty("trajectory set"));
    }
    let mut stm = Stm::new(cfg.clone(), syn_init)?;
    stm.run(set)?;
    Ok(stm.into())
}

/// Fixed-pool matching for `iterations` steps; history carries no
/// validation values.
pub fn run_mtt(
    cfg: &DistillConfig,
    pool: usize,
    m: usize,
    set: &TrajectorySet,
    syn_init: SyntheticDataset,
    iterations: u64,
) -> Result<(SyntheticDataset, Vec<HistoryEntry>)> {
    cfg.validate()?;
    let mut syn = syn_init;
    let mut history = Vec::with_capacity(iterations as usize);
    for step in 1..=iterations {
        let (next, info) = mtt_baseline_step(cfg, pool, m, set, &syn, step)?;
        syn = next;
        history.push(HistoryEntry {
            step,
            iter: step as usize,
            t: info.t,
            pool,
            buffer: info.buffer,
            train_loss: info.loss.value,
            val_loss: None,
            alpha: syn.alpha(),
        });
    }
    Ok((syn, history))
}
