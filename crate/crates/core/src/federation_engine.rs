//! Round orchestration.
//!
//! One round `t`:
//! 1. optionally restart stale error accumulators,
//! 2. sample the participating set `M_t`,
//! 3. each participant runs `K` local steps from the broadcast model and
//!    uploads its compressed (error-compensated) update,
//! 4. the server averages the reconstructed updates over `M_t`, takes a
//!    global SGD or AMSGrad step, optionally through a compressed broadcast
//!    with its own error accumulator,
//! 5. runtime invariants are checked and metrics recorded.
//!
//! All cross-client reductions run in ascending client order and every
//! random draw comes from a stream keyed by `(seed, purpose, client, round)`,
//! so a run is a pure function of its configuration.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compressors::{CompressorSpec, FLOAT_BITS};
use crate::error::{Error, Result};
use crate::local_trainer::{ef_upload, run_local_round, ClientState, Hyperparams};
use crate::metrics::{grad_metrics, q_a_from_parts, RoundRecord};
use crate::param_space::{split_residual, ParamVector};
use crate::problems::{Problem, ProblemSpec};
use crate::server::{GlobalOptimizer, ServerOptimizerState, TwoWayServerState};
use crate::streams::{stream, Purpose};

/// Largest tolerated [`split_residual`] for the error-feedback identities.
pub const EF_RESIDUAL_TOL: f64 = 2.0;
/// Relative tolerance of the virtual-iterate recursion.
pub const VIRTUAL_ITERATE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestartPolicy {
    /// Zero any accumulator last written more than this many rounds ago.
    pub threshold: usize,
    /// First round in which restarting is active.
    #[serde(default = "one")]
    pub start_round: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    /// Seed for the problem data; defaults to `master_seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem_seed: Option<u64>,
    /// Participants per round (`m`).
    pub participants: usize,
    /// Number of rounds (`T`).
    pub rounds: usize,
    pub hp: Hyperparams,
    pub optimizer: GlobalOptimizer,
    pub upload: CompressorSpec,
    /// Compressor for the server broadcast; `None` broadcasts the full model.
    pub download: Option<CompressorSpec>,
    pub ef: bool,
    pub restart: Option<RestartPolicy>,
    pub master_seed: u64,
    /// Record metrics every this many rounds (the last round always records).
    pub metrics_every: usize,
}

impl RunConfig {
    /// Full participation, SGD, error feedback on, one-way compression.
    pub fn new(problem: ProblemSpec, rounds: usize, hp: Hyperparams, upload: CompressorSpec) -> Self {
        Self {
            participants: problem.num_clients(),
            problem,
            problem_seed: None,
            rounds,
            hp,
            optimizer: GlobalOptimizer::Sgd,
            upload,
            download: None,
            ef: true,
            restart: None,
            master_seed: 0,
            metrics_every: 1,
        }
    }

    pub fn num_clients(&self) -> usize {
        self.problem.num_clients()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_clients();
        if n == 0 {
            return Err(Error::config("problem.n", "must be >= 1"));
        }
        self.validate_participation(n)?;
        if self.rounds == 0 {
            return Err(Error::config("fl.T", "must be >= 1"));
        }
        self.hp.validate()?;
        self.upload
            .validate()
            .map_err(|e| Error::config("compression.upload", e.to_string()))?;
        if let Some(d) = &self.download {
            d.validate()
                .map_err(|e| Error::config("compression.download", e.to_string()))?;
        }
        if let Some(r) = &self.restart {
            if r.threshold == 0 {
                return Err(Error::config("compression.restart_S", "must be >= 1"));
            }
        }
        if self.metrics_every == 0 {
            return Err(Error::config("output.metrics_every", "must be >= 1"));
        }
        Ok(())
    }

    fn validate_participation(&self, n: usize) -> Result<()> {
        if self.participants == 0 || self.participants > n {
            return Err(Error::config(
                "fl.m",
                format!("must lie in [1, n = {n}], got {}", self.participants),
            ));
        }
        Ok(())
    }
}

/// `m` distinct clients drawn uniformly without replacement, ascending.
pub fn sample_participants<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if m > n {
        return Err(Error::config("fl.m", format!("cannot pick {m} of {n} clients")));
    }
    if m == n {
        return Ok((0..n).collect());
    }
    let mut picked = rand::seq::index::sample(rng, n, m).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Zeroes every accumulator with `t − last_update > threshold` and stamps it
/// with `t`. Returns how many were restarted.
pub fn maybe_restart_errors(clients: &mut [ClientState], t: usize, threshold: usize) -> usize {
    let mut count = 0;
    for c in clients.iter_mut() {
        if c.staleness(t) > threshold {
            c.restart(t);
            count += 1;
        }
    }
    count
}

/// Worst observed residuals of the runtime identities.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct InvariantLog {
    /// Client EF split `C(Δ+e) + e' = Δ + e`, in [`split_residual`] units.
    pub max_client_ef_residual: f64,
    /// Server EF split `H̃ + φ' = direction + φ`, same units.
    pub max_server_ef_residual: f64,
    /// Relative error of the virtual-iterate recursion, when monitored.
    pub max_virtual_iterate_rel_err: Option<f64>,
    pub client_ef_checks: u64,
    pub server_ef_checks: u64,
    pub virtual_iterate_checks: u64,
}

/// Per-participant data of the most recent round, for inspection.
#[derive(Debug, Clone)]
pub struct ParticipantTrace {
    pub client: usize,
    pub delta: ParamVector,
    pub error_before: ParamVector,
    pub error_after: ParamVector,
    pub upload: ParamVector,
    pub bits: u64,
}

#[derive(Debug, Clone)]
pub struct RoundTrace {
    pub round: usize,
    pub participants: Vec<ParticipantTrace>,
    pub avg_update: ParamVector,
    pub restarted: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub config: RunConfig,
    pub rounds_run: usize,
    pub final_grad_norm_sq: f64,
    pub final_train_loss: f64,
    pub bits_up_total: u64,
    pub bits_down_total: u64,
    pub restarts_total: usize,
    /// Participant staleness `t − last_update` at upload time → count.
    pub staleness_histogram: BTreeMap<usize, u64>,
    pub invariants: InvariantLog,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub records: Vec<RoundRecord>,
    pub summary: ExperimentSummary,
}

pub struct Engine {
    config: RunConfig,
    problem: Arc<Problem>,
    server: ServerOptimizerState,
    two_way: Option<TwoWayServerState>,
    /// The model as held by the clients; equals the server model bitwise.
    client_model: ParamVector,
    clients: Vec<ClientState>,
    next_round: usize,
    bits_up: u64,
    bits_down: u64,
    restarts_total: usize,
    virtual_iterate: Option<ParamVector>,
    invariants: InvariantLog,
    staleness: BTreeMap<usize, u64>,
    last_trace: Option<RoundTrace>,
}

impl Engine {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.problem_seed.unwrap_or(config.master_seed);
        let problem = config.problem.build(&mut stream(seed, Purpose::ProblemData, 0, 0))?;
        Self::with_problem(config, Arc::new(problem))
    }

    /// Runs `config` against an already-built problem; `config.problem` is
    /// kept only as a label.
    pub fn with_problem(config: RunConfig, problem: Arc<Problem>) -> Result<Self> {
        config.hp.validate()?;
        let n = problem.num_clients();
        config.validate_participation(n)?;
        if config.rounds == 0 {
            return Err(Error::config("fl.T", "must be >= 1"));
        }
        if config.metrics_every == 0 {
            return Err(Error::config("output.metrics_every", "must be >= 1"));
        }
        config.upload.validate()?;
        let layout = problem.layout().clone();
        let theta = problem.initial_params(&mut stream(config.master_seed, Purpose::ModelInit, 0, 0));
        let monitor = config.optimizer == GlobalOptimizer::Sgd
            && config.participants == n
            && config.ef
            && config.restart.is_none();
        let two_way = config
            .download
            .map(|spec| TwoWayServerState::zeros(layout.clone(), spec));
        Ok(Self {
            server: ServerOptimizerState::new(theta.clone(), config.optimizer),
            two_way,
            virtual_iterate: monitor.then(|| theta.clone()),
            client_model: theta,
            clients: (0..n).map(|i| ClientState::new(i, layout.clone())).collect(),
            config,
            problem,
            next_round: 1,
            bits_up: 0,
            bits_down: 0,
            restarts_total: 0,
            invariants: InvariantLog {
                max_virtual_iterate_rel_err: monitor.then_some(0.0),
                ..InvariantLog::default()
            },
            staleness: BTreeMap::new(),
            last_trace: None,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn problem(&self) -> &Arc<Problem> {
        &self.problem
    }

    pub fn theta(&self) -> &ParamVector {
        self.server.theta()
    }

    pub fn server(&self) -> &ServerOptimizerState {
        &self.server
    }

    pub fn two_way(&self) -> Option<&TwoWayServerState> {
        self.two_way.as_ref()
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn invariants(&self) -> &InvariantLog {
        &self.invariants
    }

    pub fn last_trace(&self) -> Option<&RoundTrace> {
        self.last_trace.as_ref()
    }

    pub fn rounds_done(&self) -> usize {
        self.next_round - 1
    }

    pub fn is_finished(&self) -> bool {
        self.next_round > self.config.rounds
    }

    fn violation(&self, round: usize, what: String) -> Error {
        Error::Invariant { round, what }
    }

    /// Executes the next round. Returns a record when metrics are due.
    pub fn run_round(&mut self) -> Result<Option<RoundRecord>> {
        let t = self.next_round;
        if t > self.config.rounds {
            return Err(Error::config(
                "fl.T",
                format!("all {} rounds already ran", self.config.rounds),
            ));
        }
        let seed = self.config.master_seed;
        let n = self.clients.len();
        let m = self.config.participants;
        let d = self.problem.layout().dim() as u64;

        let restarted = match self.config.restart {
            Some(p) if t >= p.start_round => maybe_restart_errors(&mut self.clients, t, p.threshold),
            _ => 0,
        };
        self.restarts_total += restarted;

        let participants = sample_participants(n, m, &mut stream(seed, Purpose::Participation, 0, t as u64))?;
        if self.two_way.is_none() {
            // full-precision model to each participant
            self.bits_down += FLOAT_BITS * d * m as u64;
        }

        let frozen: Vec<ParamVector> = self.clients.iter().map(|c| c.error_acc().clone()).collect();
        let theta_t = self.client_model.clone();
        let mut traces = Vec::with_capacity(m);
        let mut adjusted = Vec::with_capacity(m);
        for &i in &participants {
            let delta = run_local_round(
                &self.problem,
                i,
                &theta_t,
                &self.config.hp,
                t,
                &mut stream(seed, Purpose::LocalTraining, i as u64, t as u64),
            )?;
            let client = &mut self.clients[i];
            *self.staleness.entry(client.staleness(t)).or_default() += 1;
            let error_before = client.error_acc().clone();
            let up = ef_upload(
                client,
                &delta,
                &self.config.upload,
                self.config.ef,
                t,
                &mut stream(seed, Purpose::Upload, i as u64, t as u64),
            )?;
            if self.config.ef {
                let r = split_residual(&up.dense, client.error_acc(), &up.adjusted)?;
                self.invariants.client_ef_checks += 1;
                self.invariants.max_client_ef_residual = self.invariants.max_client_ef_residual.max(r);
                if r > EF_RESIDUAL_TOL {
                    return Err(self.violation(t, format!("client {i} EF split residual {r}")));
                }
            }
            self.bits_up += up.compressed.bit_cost();
            traces.push(ParticipantTrace {
                client: i,
                delta,
                error_before,
                error_after: client.error_acc().clone(),
                upload: up.dense,
                bits: up.compressed.bit_cost(),
            });
            adjusted.push(up.adjusted);
        }

        for (i, (client, before)) in self.clients.iter().zip(&frozen).enumerate() {
            if participants.binary_search(&i).is_err() && client.error_acc() != before {
                return Err(self.violation(t, format!("inactive client {i} accumulator changed")));
            }
        }

        let uploads: Vec<&ParamVector> = traces.iter().map(|p| &p.upload).collect();
        let avg = ParamVector::mean(&uploads)?;
        let q_a_sq = q_a_from_parts(&adjusted.iter().collect::<Vec<_>>(), &uploads).ok();

        let eta = self.config.hp.eta;
        // Δ points from θ_t towards the local optimum, so the server descends
        // along the pseudo-gradient −Δ̄.
        let pseudo_grad = avg.scale(-1.0);
        let direction = self.server.step_direction(&pseudo_grad, &self.config.hp)?;
        match &mut self.two_way {
            Some(tw) => {
                let b = tw.emit(&direction, &mut stream(seed, Purpose::Download, 0, t as u64))?;
                let r = split_residual(&b.dense, tw.phi(), &b.adjusted)?;
                self.invariants.server_ef_checks += 1;
                self.invariants.max_server_ef_residual = self.invariants.max_server_ef_residual.max(r);
                if r > EF_RESIDUAL_TOL {
                    return Err(self.violation(t, format!("server EF split residual {r}")));
                }
                self.server.apply(&b.dense, eta)?;
                self.client_model.axpy(-eta, &b.dense)?;
                self.bits_down += b.compressed.bit_cost() * n as u64;
                if self.client_model.values() != self.server.theta().values() {
                    return Err(self.violation(t, "client model copy diverged from server".into()));
                }
            }
            None => {
                self.server.apply(&direction, eta)?;
                self.client_model = self.server.theta().clone();
            }
        }
        if !self.server.theta().is_finite() {
            return Err(Error::Divergence {
                round: t,
                client: None,
                what: "non-finite global model",
            });
        }

        if let Some(x_prev) = self.virtual_iterate.take() {
            let x_next = self.check_virtual_iterate(t, &x_prev, &traces)?;
            self.virtual_iterate = Some(x_next);
        }

        self.last_trace = Some(RoundTrace {
            round: t,
            participants: traces,
            avg_update: avg,
            restarted,
        });
        self.next_round += 1;

        if t.is_multiple_of(self.config.metrics_every) || t == self.config.rounds {
            let (grad_norm_sq, train_loss) = grad_metrics(&self.problem, self.server.theta())?;
            Ok(Some(RoundRecord {
                round: t,
                grad_norm_sq,
                train_loss,
                bits_up_cum: self.bits_up,
                bits_down_cum: self.bits_down,
                q_a_sq,
                participants: m,
                restarts: restarted,
            }))
        } else {
            Ok(None)
        }
    }

    /// `x = θ − ηφ + ηē` must follow `x_{t+1} = x_t + η Δ̄_t`, i.e. plain
    /// SGD on the pseudo-gradient `−Δ̄` with no compression at all.
    fn check_virtual_iterate(
        &mut self,
        t: usize,
        x_prev: &ParamVector,
        traces: &[ParticipantTrace],
    ) -> Result<ParamVector> {
        let eta = self.config.hp.eta;
        let errors: Vec<&ParamVector> = self.clients.iter().map(|c| c.error_acc()).collect();
        let mut memory = ParamVector::mean(&errors)?;
        if let Some(tw) = &self.two_way {
            memory = memory.sub(tw.phi())?;
        }
        let actual = ParamVector::add_scaled(eta, &memory, self.server.theta())?;
        let deltas: Vec<&ParamVector> = traces.iter().map(|p| &p.delta).collect();
        let mean_delta = ParamVector::mean(&deltas)?;
        let expected = ParamVector::add_scaled(eta, &mean_delta, x_prev)?;
        let scale = [
            actual.norm(),
            x_prev.norm(),
            self.server.theta().norm(),
            eta * memory.norm(),
            eta * mean_delta.norm(),
        ]
        .into_iter()
        .fold(f64::MIN_POSITIVE, f64::max);
        let rel = actual.sub(&expected)?.norm() / scale;
        self.invariants.virtual_iterate_checks += 1;
        let worst = self.invariants.max_virtual_iterate_rel_err.get_or_insert(0.0);
        *worst = worst.max(rel);
        if rel > VIRTUAL_ITERATE_TOL {
            return Err(self.violation(t, format!("virtual iterate relative error {rel:e}")));
        }
        Ok(actual)
    }

    pub fn summary(&self) -> Result<ExperimentSummary> {
        let (g, l) = grad_metrics(&self.problem, self.server.theta())?;
        Ok(ExperimentSummary {
            config: self.config.clone(),
            rounds_run: self.rounds_done(),
            final_grad_norm_sq: g,
            final_train_loss: l,
            bits_up_total: self.bits_up,
            bits_down_total: self.bits_down,
            restarts_total: self.restarts_total,
            staleness_histogram: self.staleness.clone(),
            invariants: self.invariants.clone(),
        })
    }

    /// Runs all remaining rounds.
    pub fn run_to_end(&mut self) -> Result<Vec<RoundRecord>> {
        let mut records = Vec::new();
        while !self.is_finished() {
            if let Some(r) = self.run_round()? {
                records.push(r);
            }
        }
        Ok(records)
    }
}

/// Builds the engine and runs `config.rounds` rounds.
pub fn run_experiment(config: RunConfig) -> Result<ExperimentOutcome> {
    let mut engine = Engine::new(config)?;
    let records = engine.run_to_end()?;
    Ok(ExperimentOutcome {
        records,
        summary: engine.summary()?,
    })
}
