//! Round orchestration: participant sampling, parallel local training,
//! sequential aggregation and per-round reporting.

use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{partition, substream, Dataset, DomainTransform, PartitionResult, ScenarioKind, ScenarioSpec};
use crate::error::{invalid, HtflError, Result};
use crate::methods::{
    evaluate as client_evaluate, purpose, run_local_epoch, ClientData, ClientState, GlobalKnowledge, KnowledgePacket,
    LocalContext, LocalStats, MethodConfig, Server,
};
use crate::metrics::{self, byte_account, RepeatSummary, RoundReport, SummaryRow};
use crate::modelzoo::{assign_model, auxiliary_spec, builtin_group, ModelGroup, ZooConfig};
use crate::numcore::{seeded_rng, SgdConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub n_clients: usize,
    pub rounds: usize,
    pub participation: f64,
    pub local_epochs: usize,
    pub scenario: ScenarioSpec,
    pub group: String,
    pub method: MethodConfig,
    pub sgd: SgdConfig,
    pub zoo: ZooConfig,
    pub seed: u64,
    pub repeats: usize,
    /// Evaluate every `eval_every` rounds; the last round is always evaluated.
    pub eval_every: usize,
    /// Worker threads for client training; 0 uses every core.
    pub workers: usize,
    /// When off, timing columns are written as 0 so outputs are byte-stable.
    pub record_timing: bool,
    pub convergence_window: usize,
    pub convergence_threshold: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            n_clients: 20,
            rounds: 1000,
            participation: 1.0,
            local_epochs: 1,
            scenario: ScenarioSpec::default(),
            group: "mlp-4".into(),
            method: MethodConfig::default(),
            sgd: SgdConfig::default(),
            zoo: ZooConfig::default(),
            seed: 0,
            repeats: 3,
            eval_every: 1,
            workers: 0,
            record_timing: true,
            convergence_window: 10,
            convergence_threshold: 0.99,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(invalid("n_clients must be ≥ 1"));
        }
        if self.rounds == 0 {
            return Err(invalid("rounds must be ≥ 1"));
        }
        if self.local_epochs == 0 {
            return Err(invalid("local_epochs must be ≥ 1"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(invalid(format!("participation must lie in (0, 1], got {}", self.participation)));
        }
        if self.repeats == 0 {
            return Err(invalid("repeats must be ≥ 1"));
        }
        if self.eval_every == 0 {
            return Err(invalid("eval_every must be ≥ 1"));
        }
        if self.convergence_window == 0 || !(self.convergence_threshold > 0.0 && self.convergence_threshold <= 1.0) {
            return Err(invalid("convergence_window must be ≥ 1 and convergence_threshold in (0, 1]"));
        }
        self.sgd.validate()?;
        self.method.validate()?;
        self.scenario_for_run().validate()
    }

    /// The scenario with the experiment's client count.
    pub fn scenario_for_run(&self) -> ScenarioSpec {
        ScenarioSpec {
            n_clients: self.n_clients,
            ..self.scenario
        }
    }

    pub fn participants_per_round(&self) -> usize {
        participants_count(self.n_clients, self.participation)
    }
}

fn participants_count(n: usize, rho: f64) -> usize {
    (((rho * n as f64) - 1e-9).ceil() as usize).clamp(1, n)
}

/// `⌈ρN⌉` distinct ids drawn from a round-indexed stream, sorted.
pub fn sample_participants(seed: u64, round: usize, n_clients: usize, participation: f64) -> Vec<usize> {
    let m = participants_count(n_clients, participation);
    if m == n_clients {
        return (0..n_clients).collect();
    }
    let mut rng = seeded_rng(substream(seed, u64::MAX, round as u64, purpose::SAMPLE));
    let mut ids = index::sample(&mut rng, n_clients, m).into_vec();
    ids.sort_unstable();
    ids
}

/// One full federated run over a fixed partition.
pub struct Simulation {
    spec: ExperimentSpec,
    group: ModelGroup,
    seed: u64,
    clients: Vec<ClientState>,
    server: Server,
    global: GlobalKnowledge,
    pool: rayon::ThreadPool,
    round: usize,
}

impl Simulation {
    pub fn new(spec: &ExperimentSpec, ds: &Dataset, part: &PartitionResult, seed: u64) -> Result<Self> {
        spec.validate()?;
        if part.n_clients() != spec.n_clients {
            return Err(invalid(format!(
                "partition has {} clients but n_clients = {}",
                part.n_clients(),
                spec.n_clients
            )));
        }
        let group = builtin_group(&spec.group, &spec.zoo, ds.shape(), ds.num_classes())?;
        let method = spec.method.method;
        method.check_group(&group)?;
        let aux = if method.uses_aux() {
            Some(auxiliary_spec(&group)?)
        } else {
            None
        };
        let shift = part.scenario.kind == ScenarioKind::FeatureShift;
        let clients = (0..spec.n_clients)
            .map(|i| {
                let transform = shift.then(|| DomainTransform::new(ds.shape(), part.seed, part.client_domain[i]));
                let data = ClientData::from_partition(ds, part, i, transform.as_ref())?;
                ClientState::setup(i, assign_model(i, &group)?, aux, method, data, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        let server = Server::new(&spec.method, &group, seed)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.workers)
            .build()
            .map_err(|e| invalid(format!("cannot start worker pool: {e}")))?;
        Ok(Self {
            spec: spec.clone(),
            group,
            seed,
            clients,
            server,
            global: GlobalKnowledge::default(),
            pool,
            round: 0,
        })
    }

    pub fn group(&self) -> &ModelGroup {
        &self.group
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn server(&self) -> &Server {
        &self.server
    }

    pub fn global(&self) -> &GlobalKnowledge {
        &self.global
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    /// Runs the next round (1-based).
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let t = self.round + 1;
        let spec = &self.spec;
        let ids = sample_participants(self.seed, t, spec.n_clients, spec.participation);
        let mut selected = vec![false; spec.n_clients];
        for &i in &ids {
            selected[i] = true;
        }
        let ctx = LocalContext {
            method: &spec.method,
            sgd: &spec.sgd,
            epochs: spec.local_epochs,
            seed: self.seed,
            round: t as u64,
        };
        let global = &self.global;

        let started = Instant::now();
        let outcomes: Vec<(usize, Result<(Option<KnowledgePacket>, LocalStats)>)> = self.pool.install(|| {
            self.clients
                .par_iter_mut()
                .filter(|c| selected[c.id])
                .map(|c| (c.id, run_local_epoch(c, global, &ctx)))
                .collect()
        });
        let client_seconds = started.elapsed().as_secs_f64();

        let mut packets = Vec::with_capacity(ids.len());
        for (id, out) in outcomes {
            let (packet, _) = out.map_err(|e| HtflError::Client {
                client: id,
                stage: "local_train",
                source: Box::new(e),
            })?;
            packets.extend(packet);
        }
        let tally = byte_account(&packets, &self.global, ids.len());

        let started = Instant::now();
        self.global = self.server.aggregate(t as u64, &packets)?;
        let server_seconds = started.elapsed().as_secs_f64();

        let mut report = RoundReport {
            round: t,
            upload_bytes: tally.upload,
            download_bytes: tally.download,
            ..Default::default()
        };
        if spec.record_timing {
            report.client_seconds = client_seconds;
            report.server_seconds = server_seconds;
        }
        if t % spec.eval_every == 0 || t == spec.rounds {
            let method = spec.method.method;
            let counts: Vec<Result<(usize, usize)>> = self
                .pool
                .install(|| self.clients.par_iter().map(|c| client_evaluate(c, method)).collect());
            let counts = counts
                .into_iter()
                .enumerate()
                .map(|(id, r)| {
                    r.map_err(|e| HtflError::Client {
                        client: id,
                        stage: "evaluate",
                        source: Box::new(e),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let ev = metrics::evaluate(&counts)?;
            report.per_client_accuracy = ev.per_client;
            report.avg_accuracy = Some(ev.weighted);
            report.unweighted_avg_accuracy = Some(ev.unweighted);
        }
        self.round = t;
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub reports: Vec<Vec<RoundReport>>,
    pub repeat_summaries: Vec<RepeatSummary>,
    pub summary: Vec<SummaryRow>,
}

/// Runs `spec.repeats` independent runs with seeds `seed + j`, calling
/// `on_round(j, report)` as each round finishes.
///
/// With `fixed` the same partition is reused for every repeat; otherwise
/// each repeat partitions `ds` with its own seed.
pub fn run_experiment_with(
    spec: &ExperimentSpec,
    ds: &Dataset,
    fixed: Option<&PartitionResult>,
    mut on_round: impl FnMut(usize, &RoundReport) -> Result<()>,
) -> Result<ExperimentResult> {
    spec.validate()?;
    let mut reports = Vec::with_capacity(spec.repeats);
    let mut repeat_summaries = Vec::with_capacity(spec.repeats);
    for j in 0..spec.repeats {
        let seed = spec.seed.wrapping_add(j as u64);
        let owned;
        let part = match fixed {
            Some(p) => p,
            None => {
                owned = partition(ds, &spec.scenario_for_run(), seed)?;
                &owned
            }
        };
        let mut sim = Simulation::new(spec, ds, part, seed)?;
        let mut stream = Vec::with_capacity(spec.rounds);
        for _ in 0..spec.rounds {
            let r = sim.run_round()?;
            on_round(j, &r)?;
            stream.push(r);
        }
        repeat_summaries.push(metrics::summarize_repeat(
            &stream,
            spec.convergence_window,
            spec.convergence_threshold,
        )?);
        reports.push(stream);
    }
    let summary = metrics::summarize(&repeat_summaries)?;
    Ok(ExperimentResult {
        reports,
        repeat_summaries,
        summary,
    })
}

pub fn run_experiment(spec: &ExperimentSpec, ds: &Dataset) -> Result<ExperimentResult> {
    run_experiment_with(spec, ds, None, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn participant_counts() {
        assert_eq!(sample_participants(1, 1, 20, 1.0), (0..20).collect::<Vec<_>>());
        let ids = sample_participants(1, 3, 100, 0.1);
        assert_eq!(ids.len(), 10);
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(ids, sample_participants(1, 3, 100, 0.1));
        assert_ne!(ids, sample_participants(1, 4, 100, 0.1));
        assert_eq!(sample_participants(0, 1, 3, 0.01).len(), 1);
    }

    #[test]
    fn spec_validation() {
        assert!(ExperimentSpec::default().validate().is_ok());
        for bad in [
            ExperimentSpec {
                participation: 0.0,
                ..Default::default()
            },
            ExperimentSpec {
                rounds: 0,
                ..Default::default()
            },
            ExperimentSpec {
                local_epochs: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
