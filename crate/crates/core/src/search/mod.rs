//! The constrained search loop: alternating weight/logit updates, periodic
//! projection onto the cost box, and final derivation.

mod checkpoint;
pub mod reference;
mod retrain;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use retrain::{evaluate, retrain_eval, RetrainConfig, RetrainMetrics};

use std::fmt::Write as _;
use std::time::Instant;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cellgraph::{derive_discrete, ArchParams, DiscreteArch, MixWeights, Network, NetworkPlan};
use crate::costmodel::{exact_cost, expected_cost, ConstraintBox, CostScope, CostTable, M};
use crate::data::{BatchStream, Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig, Sgd, SgdConfig};
use crate::projection::{decay_lambda, project, ProjectionConfig, ProjectionStep};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Phase-I steps per round after the first.
    pub e_u: usize,
    /// The first round runs `warm_start_multiplier * e_u` steps.
    pub warm_start_multiplier: usize,
    /// Budget in passes over the architecture-train split.
    pub epochs: usize,
    /// Explicit round count; overrides the epoch budget.
    pub rounds: Option<usize>,
    pub batch_size: usize,
    pub w_optimizer: SgdConfig,
    pub theta_optimizer: AdamConfig,
    /// Logits start uniform in `[-theta_init, theta_init]`.
    pub theta_init: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            e_u: 150,
            warm_start_multiplier: 10,
            epochs: 50,
            rounds: None,
            batch_size: 64,
            w_optimizer: SgdConfig::default(),
            theta_optimizer: AdamConfig::default(),
            theta_init: 1e-3,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.e_u == 0 || self.warm_start_multiplier == 0 || self.batch_size == 0 {
            return Err(Error::Config("search.e_u, warm_start_multiplier and batch_size must be positive".into()));
        }
        if self.rounds == Some(0) || (self.rounds.is_none() && self.epochs == 0) {
            return Err(Error::Config("search budget must allow at least one round".into()));
        }
        if !(self.theta_init >= 0.0) {
            return Err(Error::Config("search.theta_init must be non-negative".into()));
        }
        Ok(())
    }

    /// Number of outer rounds: the explicit count, or the fewest rounds whose
    /// Phase-I steps cover `epochs` passes over `n_train` examples.
    pub fn n_rounds(&self, n_train: usize) -> usize {
        if let Some(r) = self.rounds {
            return r;
        }
        let budget = self.epochs * (n_train / self.batch_size).max(1);
        let warm = self.warm_start_multiplier * self.e_u;
        1 + budget.saturating_sub(warm).div_ceil(self.e_u)
    }

    /// Phase-I steps of round `t`.
    pub fn steps_in_round(&self, t: usize) -> usize {
        if t == 0 {
            self.warm_start_multiplier * self.e_u
        } else {
            self.e_u
        }
    }

    /// Independent seeds for network init, the train stream and the val stream.
    pub fn seeds(&self) -> (u64, u64, u64) {
        let s = self.seed;
        (s, s ^ 0x7472_6169_6e00_0000, s ^ 0x7661_6c00_0000_0000)
    }
}

/// Everything that defines a search apart from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpec {
    pub plan: NetworkPlan,
    pub search: SearchConfig,
    pub projection: ProjectionConfig,
    pub scope: CostScope,
    pub constraints: ConstraintBox,
}

impl Default for SearchSpec {
    fn default() -> Self {
        Self {
            plan: NetworkPlan::default(),
            search: SearchConfig::default(),
            projection: ProjectionConfig::default(),
            scope: CostScope::TopK,
            constraints: ConstraintBox::unbounded(),
        }
    }
}

impl SearchSpec {
    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        self.search.validate()?;
        self.projection.validate()?;
        self.constraints.validate()
    }
}

/// Weights, logits, optimizer moments, batch streams and counters.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: Network,
    pub theta: ArchParams<f64>,
    pub w_opt: Sgd,
    pub theta_opt: Adam,
    pub train_stream: BatchStream,
    pub val_stream: BatchStream,
    pub norm: Normalizer,
    /// Next outer round to run.
    pub round: usize,
    pub w_steps: usize,
    pub theta_steps: usize,
}

impl TrainState {
    pub fn new(plan: &NetworkPlan, cfg: &SearchConfig, train: &Dataset, val: &Dataset) -> Result<Self> {
        check_data(plan, train)?;
        check_data(plan, val)?;
        let (s_init, s_train, s_val) = cfg.seeds();
        let mut rng = ChaCha8Rng::seed_from_u64(s_init);
        let net = Network::supernet(plan, &mut rng)?;
        let space = plan.space()?;
        let theta = ArchParams::random(&space, &plan.kinds(), cfg.theta_init, &mut rng);
        let sizes: Vec<usize> = net.store().iter().map(|p| p.tensor.numel()).collect();
        Ok(Self {
            w_opt: Sgd::new(cfg.w_optimizer, &sizes),
            theta_opt: Adam::new(cfg.theta_optimizer, &[theta.len()]),
            net,
            theta,
            train_stream: BatchStream::new(train.len(), cfg.batch_size, s_train)?,
            val_stream: BatchStream::new(val.len(), cfg.batch_size, s_val)?,
            norm: Normalizer::fit(train),
            round: 0,
            w_steps: 0,
            theta_steps: 0,
        })
    }
}

fn check_data(plan: &NetworkPlan, ds: &Dataset) -> Result<()> {
    if ds.channels != plan.in_channels || ds.size != plan.image_size || ds.n_classes != plan.n_classes {
        return Err(Error::Config(format!(
            "data ({} channels, {}x{}, {} classes) does not match the plan ({} channels, {}x{}, {} classes)",
            ds.channels, ds.size, ds.size, ds.n_classes, plan.in_channels, plan.image_size, plan.image_size, plan.n_classes
        )));
    }
    Ok(())
}

pub(crate) fn grad_norm<'a>(grads: impl Iterator<Item = &'a [f64]>) -> f64 {
    grads.flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Gradients of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    /// Per parameter, indexed by `ParamId`; `None` where no gradient flowed.
    pub w: Vec<Option<Vec<f64>>>,
    /// `None` when the logits were held fixed.
    pub theta: Option<ArchParams<f64>>,
}

/// Cross-entropy of the supernet on one batch and its gradients with respect
/// to the weights and/or the logits. Whatever is held fixed enters the tape as
/// a constant, so no gradient is even accumulated for it.
pub fn supernet_gradients(
    net: &Network,
    theta: &ArchParams<f64>,
    batch: &(Tensor, Vec<usize>),
    want_w: bool,
    want_theta: bool,
) -> Result<Gradients> {
    let mut g = Graph::new();
    let vars = net.store().bind(&mut g, want_w);
    let mix = MixWeights::bind(&mut g, theta, want_theta);
    let x = g.constant(batch.0.clone());
    let logits = net.forward(&mut g, &vars, Some(&mix), x)?;
    let loss_v = g.cross_entropy(logits, &batch.1)?;
    let loss = g.value(loss_v).data()[0];
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss = {loss}")));
    }
    g.backward(loss_v)?;
    let w = vars.iter().map(|&v: &Var| g.grad(v).map(<[f64]>::to_vec)).collect();
    let theta_grad = want_theta.then(|| mix.theta_grad(&g, theta));
    Ok(Gradients { loss, w, theta: theta_grad })
}

/// Losses of one Phase-I step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub train: f64,
    pub val: f64,
}

/// One alternation: weights descend the training loss with the logits fixed,
/// then the logits descend the validation loss with the new weights fixed.
pub fn phase1_step(
    state: &mut TrainState,
    train_batch: &(Tensor, Vec<usize>),
    val_batch: &(Tensor, Vec<usize>),
) -> Result<StepLosses> {
    let it = state.w_steps;
    let step1 = supernet_gradients(&state.net, &state.theta, train_batch, true, false)
        .map_err(|e| annotate(e, it, "weight step"))?;
    debug_assert!(step1.theta.is_none());
    let norm = grad_norm(step1.w.iter().flatten().map(Vec::as_slice));
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!(
            "weight gradient at step {it}: loss = {}, grad norm = {norm}",
            step1.loss
        )));
    }
    for (slot, (p, g)) in state.net.store_mut().iter_mut().zip(&step1.w).enumerate() {
        if let Some(g) = g {
            state.w_opt.step(slot, p.tensor.data_mut(), g);
        }
    }
    state.w_steps += 1;

    let step2 = supernet_gradients(&state.net, &state.theta, val_batch, false, true)
        .map_err(|e| annotate(e, it, "logit step"))?;
    debug_assert!(step2.w.iter().all(Option::is_none));
    let grad = step2.theta.expect("requested logit gradient").to_flat();
    let norm = grad_norm(std::iter::once(grad.as_slice()));
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!(
            "logit gradient at step {it}: loss = {}, grad norm = {norm}",
            step2.loss
        )));
    }
    let mut flat = state.theta.to_flat();
    state.theta_opt.step(0, &mut flat, &grad);
    state.theta.set_flat(&flat);
    state.theta_steps += 1;
    Ok(StepLosses { train: step1.loss, val: step2.loss })
}

fn annotate(e: Error, it: usize, what: &str) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("{what} at step {it}: {msg}")),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "I")]
    Unconstrained,
    #[serde(rename = "II")]
    Projection,
}

/// One line of the search log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub outer_iter: usize,
    pub inner_iter: usize,
    pub phase: Phase,
    pub l_train: Option<f64>,
    pub l_val: Option<f64>,
    pub phi: [f64; M],
    pub lambda: f64,
    pub feasible: bool,
}

/// Summary of one projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub phase1_steps: usize,
    pub lambda: f64,
    pub phi_before: [f64; M],
    pub phi_after: [f64; M],
    pub projection_steps: usize,
    pub feasible: bool,
    #[serde(skip)]
    pub trace: Vec<ProjectionStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub rounds: Vec<RoundSummary>,
    pub w_steps: usize,
    pub theta_steps: usize,
    pub final_phi: [f64; M],
    pub exact_cost: [u64; M],
    /// Whether the last projection ended inside the box.
    pub feasible: bool,
    pub wall_clock_secs: f64,
    #[serde(skip)]
    pub log: Vec<LogRow>,
}

impl SearchReport {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("outer_iter,inner_iter,phase,l_train,l_val,phi_params,phi_flops,lambda,feasible\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.log {
            let phase = match r.phase {
                Phase::Unconstrained => "I",
                Phase::Projection => "II",
            };
            let _ = writeln!(
                s,
                "{},{},{phase},{},{},{},{},{},{}",
                r.outer_iter,
                r.inner_iter,
                opt(r.l_train),
                opt(r.l_val),
                r.phi[0],
                r.phi[1],
                r.lambda,
                r.feasible
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub arch: DiscreteArch,
    pub theta: ArchParams<f64>,
    pub report: SearchReport,
    pub state: TrainState,
}

/// Hooks into a running search.
pub trait SearchObserver {
    /// Called after every Phase-I step.
    fn on_step(&mut self, _state: &TrainState) {}
    /// Called after every projection; `state.round` is the next round.
    fn on_round(&mut self, _state: &TrainState, _summary: &RoundSummary) -> Result<()> {
        Ok(())
    }
}

impl SearchObserver for () {}

/// Runs the search from a fresh state, or from `resume` (see [`Checkpoint`]).
/// The log and summaries cover only the rounds run by this call.
pub fn run_search_observed(
    spec: &SearchSpec,
    train: &Dataset,
    val: &Dataset,
    resume: Option<TrainState>,
    observer: &mut dyn SearchObserver,
) -> Result<SearchOutcome> {
    spec.validate()?;
    let start = Instant::now();
    let plan = &spec.plan;
    let cfg = &spec.search;
    let space = plan.space()?;
    let table = CostTable::new(plan)?;
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(plan, cfg, train, val)?,
    };
    let b = &spec.constraints;
    let eps = spec.projection.eps;
    let phi_of = |theta: &ArchParams<f64>| expected_cost(theta, &table, &space, spec.scope);
    let rounds = cfg.n_rounds(train.len());
    let mut log = Vec::new();
    let mut summaries = Vec::with_capacity(rounds);
    let mut feasible = b.is_feasible(&phi_of(&state.theta)?, eps);

    for t in state.round..rounds {
        let (lambda, _) = decay_lambda(&spec.projection, t);
        let steps = cfg.steps_in_round(t);
        for s in 0..steps {
            let tb = train.batch(&state.train_stream.next_batch(), Some(&state.norm));
            let vb = val.batch(&state.val_stream.next_batch(), Some(&state.norm));
            let losses = phase1_step(&mut state, &tb, &vb)?;
            let phi = phi_of(&state.theta)?;
            log.push(LogRow {
                outer_iter: t,
                inner_iter: s,
                phase: Phase::Unconstrained,
                l_train: Some(losses.train),
                l_val: Some(losses.val),
                phi,
                lambda,
                feasible: b.is_feasible(&phi, eps),
            });
            observer.on_step(&state);
        }
        let phi_before = phi_of(&state.theta)?;
        let res = project(&state.theta, b, &table, &space, spec.scope, &spec.projection, (lambda, lambda))?;
        state.theta = res.theta_p;
        state.round = t + 1;
        let phi_after = phi_of(&state.theta)?;
        feasible = res.feasible;
        log.push(LogRow {
            outer_iter: t,
            inner_iter: res.iterations,
            phase: Phase::Projection,
            l_train: None,
            l_val: None,
            phi: phi_after,
            lambda,
            feasible,
        });
        info!(
            "round {t}: {steps} steps, phi {:?} -> {:?}, {} projection steps, feasible {feasible}",
            phi_before, phi_after, res.iterations
        );
        let summary = RoundSummary {
            round: t,
            phase1_steps: steps,
            lambda,
            phi_before,
            phi_after,
            projection_steps: res.iterations,
            feasible,
            trace: res.trajectory,
        };
        observer.on_round(&state, &summary)?;
        summaries.push(summary);
    }

    let arch = derive_discrete(&state.theta, &space);
    let exact = exact_cost(&arch, plan)?;
    debug!("derived {}", arch.hash());
    let report = SearchReport {
        rounds: summaries,
        w_steps: state.w_steps,
        theta_steps: state.theta_steps,
        final_phi: phi_of(&state.theta)?,
        exact_cost: exact,
        feasible,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        log,
    };
    Ok(SearchOutcome {
        arch,
        theta: state.theta.clone(),
        report,
        state,
    })
}

pub fn run_search(spec: &SearchSpec, train: &Dataset, val: &Dataset) -> Result<SearchOutcome> {
    run_search_observed(spec, train, val, None, &mut ())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, split, Generator, SplitSpec};
    use crate::opset::OpKind;

    pub(crate) fn tiny_spec() -> SearchSpec {
        SearchSpec {
            plan: NetworkPlan {
                n_cells: 2,
                init_channels: 4,
                levels: 1,
                n_nodes: 4,
                image_size: 8,
                n_classes: 2,
                cell_ops: vec![OpKind::Zero, OpKind::Identity, OpKind::SepConv3, OpKind::MaxPool3],
                connection_ops: vec![OpKind::GroupConv1x1G1, OpKind::GroupConv1x1G2],
                ..NetworkPlan::default()
            },
            search: SearchConfig {
                e_u: 2,
                warm_start_multiplier: 3,
                rounds: Some(3),
                batch_size: 8,
                seed: 3,
                ..SearchConfig::default()
            },
            ..SearchSpec::default()
        }
    }

    pub(crate) fn tiny_data() -> (Dataset, Dataset) {
        let ds = gen_synthetic(Generator::Shapes, 64, 8, 2, 1).unwrap();
        split(&ds, &SplitSpec::default()).unwrap()
    }

    #[test]
    fn round_budget() {
        let cfg = SearchConfig { e_u: 150, warm_start_multiplier: 10, epochs: 50, batch_size: 64, ..Default::default() };
        // 25000 examples -> 390 steps per epoch -> 19500 steps
        assert_eq!(cfg.n_rounds(25000), 1 + (19500 - 1500usize).div_ceil(150));
        assert_eq!(cfg.steps_in_round(0), 1500);
        assert_eq!(cfg.steps_in_round(7), 150);
        let tiny = SearchConfig { epochs: 1, ..cfg };
        assert_eq!(tiny.n_rounds(640), 1);
    }

    #[test]
    fn warm_start_and_budget_counters() {
        let spec = tiny_spec();
        let (tr, va) = tiny_data();
        let out = run_search(&spec, &tr, &va).unwrap();
        let steps: Vec<usize> = out.report.rounds.iter().map(|r| r.phase1_steps).collect();
        assert_eq!(steps, vec![6, 2, 2]);
        assert_eq!(out.report.w_steps, 3 * 2 + 2 * 2);
        assert_eq!(out.report.theta_steps, out.report.w_steps);
        out.arch.validate_for(&spec.plan.space().unwrap(), &spec.plan.kinds()).unwrap();
    }

    #[test]
    fn zero_theta_lr_leaves_theta() {
        let mut spec = tiny_spec();
        spec.search.theta_optimizer.lr = 0.0;
        let (tr, va) = tiny_data();
        let mut st = TrainState::new(&spec.plan, &spec.search, &tr, &va).unwrap();
        let theta0 = st.theta.clone();
        let w0: Vec<f64> = st.net.store().iter().flat_map(|p| p.tensor.data().to_vec()).collect();
        let tb = tr.batch(&st.train_stream.next_batch(), Some(&st.norm));
        let vb = va.batch(&st.val_stream.next_batch(), Some(&st.norm));
        phase1_step(&mut st, &tb, &vb).unwrap();
        assert_eq!(st.theta, theta0);
        let w1: Vec<f64> = st.net.store().iter().flat_map(|p| p.tensor.data().to_vec()).collect();
        assert_ne!(w0, w1);
    }

    #[test]
    fn zero_learning_rates_change_only_counters() {
        let mut spec = tiny_spec();
        spec.search.theta_optimizer.lr = 0.0;
        spec.search.w_optimizer = SgdConfig { lr: 0.0, momentum: 0.9, weight_decay: 3e-4 };
        let (tr, va) = tiny_data();
        let mut st = TrainState::new(&spec.plan, &spec.search, &tr, &va).unwrap();
        let before = st.clone();
        let tb = tr.batch(&st.train_stream.next_batch(), Some(&st.norm));
        let vb = va.batch(&st.val_stream.next_batch(), Some(&st.norm));
        phase1_step(&mut st, &tb, &vb).unwrap();
        assert_eq!(st.theta, before.theta);
        assert_eq!(st.net.store(), before.net.store());
        assert_eq!((st.w_steps, st.theta_steps), (1, 1));
    }

    #[test]
    fn alternation_isolation() {
        let spec = tiny_spec();
        let (tr, va) = tiny_data();
        let st = TrainState::new(&spec.plan, &spec.search, &tr, &va).unwrap();
        let b = tr.batch(&[0, 1, 2, 3], Some(&st.norm));
        let g1 = supernet_gradients(&st.net, &st.theta, &b, true, false).unwrap();
        assert!(g1.theta.is_none());
        assert!(g1.w.iter().any(Option::is_some));
        let g2 = supernet_gradients(&st.net, &st.theta, &b, false, true).unwrap();
        assert!(g2.w.iter().all(Option::is_none));
        assert!(g2.theta.unwrap().values().any(|&v| v != 0.0));
    }

    #[test]
    fn rejects_mismatched_data() {
        let spec = tiny_spec();
        let ds = gen_synthetic(Generator::Shapes, 64, 16, 2, 1).unwrap();
        let (tr, va) = split(&ds, &SplitSpec::default()).unwrap();
        assert!(matches!(run_search(&spec, &tr, &va), Err(Error::Config(_))));
    }

    #[test]
    fn inert_box_matches_reference_loop() {
        let mut spec = tiny_spec();
        spec.constraints = ConstraintBox::unbounded();
        let (tr, va) = tiny_data();
        let mut thetas = Vec::new();
        struct Rec<'a>(&'a mut Vec<ArchParams<f64>>);
        impl SearchObserver for Rec<'_> {
            fn on_step(&mut self, s: &TrainState) {
                self.0.push(s.theta.clone());
            }
        }
        let out = run_search_observed(&spec, &tr, &va, None, &mut Rec(&mut thetas)).unwrap();
        let reference = reference::darts_reference(&spec.plan, &spec.search, &tr, &va, thetas.len()).unwrap();
        assert_eq!(thetas, reference.thetas);
        assert_eq!(out.state.net.store(), reference.net.store());

        let mut spec0 = tiny_spec();
        spec0.projection.lambda0 = 0.0;
        spec0.constraints = ConstraintBox::new([0.0, 0.0], [1.0, 1.0]).unwrap();
        let out0 = run_search(&spec0, &tr, &va).unwrap();
        assert_eq!(out0.theta, *reference.thetas.last().unwrap());
        assert!(!out0.report.feasible);
    }

    #[test]
    fn resume_from_checkpoint_is_bit_identical() {
        struct Saver(Option<String>);
        impl SearchObserver for Saver {
            fn on_round(&mut self, state: &TrainState, _: &RoundSummary) -> Result<()> {
                if state.round == 1 {
                    self.0 = Some(Checkpoint::capture(&tiny_spec(), state).to_json());
                }
                Ok(())
            }
        }
        let spec = tiny_spec();
        let (tr, va) = tiny_data();
        let mut saver = Saver(None);
        let full = run_search_observed(&spec, &tr, &va, None, &mut saver).unwrap();
        let ck = Checkpoint::from_json(&saver.0.unwrap()).unwrap();
        assert_eq!(ck.spec, spec);
        let state = ck.restore(&tr, &va).unwrap();
        let resumed = run_search_observed(&spec, &tr, &va, Some(state), &mut ()).unwrap();
        assert_eq!(resumed.theta, full.theta);
        assert_eq!(resumed.state.net.store(), full.state.net.store());
        assert_eq!(resumed.arch, full.arch);
        assert_eq!(resumed.report.rounds.len(), 2);
    }
}
