use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, HtflError, Result};
use crate::numcore::seeded_rng;

use super::dataset::Dataset;
use super::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Pathological,
    Dirichlet,
    FeatureShift,
    RealWorld,
}

impl ScenarioKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioKind::Pathological => "pathological",
            ScenarioKind::Dirichlet => "dirichlet",
            ScenarioKind::FeatureShift => "feature_shift",
            ScenarioKind::RealWorld => "real_world",
        }
    }
}

/// How each client's pool is cut into train and test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    #[default]
    Uniform,
    /// 3:1 within every class the client holds.
    Stratified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub alpha: f64,
    pub classes_per_client: usize,
    pub shift_domains: usize,
    pub n_clients: usize,
    pub split: SplitMode,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::Dirichlet,
            alpha: 0.1,
            classes_per_client: 2,
            shift_domains: 1,
            n_clients: 20,
            split: SplitMode::Uniform,
        }
    }
}

impl ScenarioSpec {
    pub fn dirichlet(n_clients: usize, alpha: f64) -> Self {
        Self {
            kind: ScenarioKind::Dirichlet,
            alpha,
            n_clients,
            ..Default::default()
        }
    }

    pub fn pathological(n_clients: usize, classes_per_client: usize) -> Self {
        Self {
            kind: ScenarioKind::Pathological,
            classes_per_client,
            n_clients,
            ..Default::default()
        }
    }

    pub fn feature_shift(n_clients: usize, shift_domains: usize) -> Self {
        Self {
            kind: ScenarioKind::FeatureShift,
            shift_domains,
            n_clients,
            ..Default::default()
        }
    }

    pub fn real_world(n_clients: usize) -> Self {
        Self {
            kind: ScenarioKind::RealWorld,
            n_clients,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(invalid("scenario needs at least one client"));
        }
        match self.kind {
            ScenarioKind::Dirichlet if !(self.alpha > 0.0 && self.alpha.is_finite()) => {
                Err(invalid(format!("dirichlet alpha must be positive, got {}", self.alpha)))
            }
            ScenarioKind::Pathological if self.classes_per_client == 0 => {
                Err(invalid("classes_per_client must be positive"))
            }
            ScenarioKind::FeatureShift if self.shift_domains == 0 => {
                Err(invalid("shift_domains must be at least 1"))
            }
            _ => Ok(()),
        }
    }

    /// Short human-readable tag, e.g. `dirichlet(alpha=0.1)`.
    pub fn describe(&self) -> String {
        match self.kind {
            ScenarioKind::Dirichlet => format!("dirichlet(alpha={})", self.alpha),
            ScenarioKind::Pathological => {
                format!("pathological(classes_per_client={})", self.classes_per_client)
            }
            ScenarioKind::FeatureShift => {
                format!("feature_shift(shift_domains={})", self.shift_domains)
            }
            ScenarioKind::RealWorld => "real_world".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionResult {
    pub client_train: Vec<Vec<usize>>,
    pub client_test: Vec<Vec<usize>>,
    pub scenario: ScenarioSpec,
    pub seed: u64,
    pub num_classes: usize,
    /// Domain index per client; all zero outside the feature-shift scenario.
    pub client_domain: Vec<usize>,
}

impl PartitionResult {
    pub fn n_clients(&self) -> usize {
        self.client_train.len()
    }

    pub fn train_sizes(&self) -> Vec<usize> {
        self.client_train.iter().map(Vec::len).collect()
    }

    /// Per-client class histogram of train ∪ test.
    pub fn class_histograms(&self, ds: &Dataset) -> Vec<Vec<usize>> {
        let labels = ds.labels();
        self.client_train
            .iter()
            .zip(&self.client_test)
            .map(|(tr, te)| {
                let mut h = vec![0; ds.num_classes()];
                for &i in tr.iter().chain(te) {
                    h[labels[i]] += 1;
                }
                h
            })
            .collect()
    }

    /// Classes that appear in each client's training set.
    pub fn train_classes(&self, ds: &Dataset) -> Vec<Vec<usize>> {
        let labels = ds.labels();
        self.client_train
            .iter()
            .map(|tr| {
                let mut seen = vec![false; ds.num_classes()];
                for &i in tr {
                    seen[labels[i]] = true;
                }
                (0..seen.len()).filter(|&c| seen[c]).collect()
            })
            .collect()
    }
}

pub fn partition(ds: &Dataset, spec: &ScenarioSpec, seed: u64) -> Result<PartitionResult> {
    match spec.kind {
        ScenarioKind::Pathological => partition_pathological(ds, spec, seed),
        ScenarioKind::Dirichlet => partition_dirichlet(ds, spec, seed),
        ScenarioKind::FeatureShift => partition_feature_shift(ds, spec, seed),
        ScenarioKind::RealWorld => partition_real_world(ds, spec, seed),
    }
}

const PURPOSE_ASSIGN: u64 = 1;
const PURPOSE_SPLIT: u64 = 2;

fn assign_rng(seed: u64) -> ChaCha8Rng {
    seeded_rng(substream(seed, 0, 0, PURPOSE_ASSIGN))
}

pub fn partition_pathological(
    ds: &Dataset,
    spec: &ScenarioSpec,
    seed: u64,
) -> Result<PartitionResult> {
    spec.validate()?;
    let (n, c, cpc) = (spec.n_clients, ds.num_classes(), spec.classes_per_client);
    if cpc > c {
        return Err(HtflError::Infeasible(format!(
            "classes_per_client {cpc} exceeds the {c} available classes"
        )));
    }
    if n * cpc < c {
        return Err(HtflError::Infeasible(format!(
            "{n} clients × {cpc} classes cannot cover {c} classes"
        )));
    }
    let mut rng = assign_rng(seed);
    let mut perm: Vec<usize> = (0..c).collect();
    perm.shuffle(&mut rng);

    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); c];
    for i in 0..n {
        for j in 0..cpc {
            holders[perm[(i * cpc + j) % c]].push(i);
        }
    }
    let mut pools = vec![Vec::new(); n];
    for (class, mut idx) in ds.indices_by_class().into_iter().enumerate() {
        let h = &holders[class];
        if idx.len() < h.len() {
            return Err(HtflError::Infeasible(format!(
                "class {class} has {} samples for {} holder clients",
                idx.len(),
                h.len()
            )));
        }
        idx.shuffle(&mut rng);
        for (r, &s) in idx.iter().enumerate() {
            pools[h[r % h.len()]].push(s);
        }
    }
    finish(ds, spec, seed, pools, vec![0; n])
}

const DIRICHLET_ATTEMPTS: usize = 100;

pub fn partition_dirichlet(ds: &Dataset, spec: &ScenarioSpec, seed: u64) -> Result<PartitionResult> {
    spec.validate()?;
    let n = spec.n_clients;
    let mut rng = assign_rng(seed);
    let gamma = Gamma::new(spec.alpha, 1.0).map_err(|e| invalid(e.to_string()))?;
    let by_class = ds.indices_by_class();
    let class_sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();

    let mut counts = Vec::new();
    for _ in 0..DIRICHLET_ATTEMPTS {
        counts = class_sizes
            .iter()
            .map(|&total| {
                let q = draw_simplex(&gamma, n, &mut rng);
                largest_remainder(&q, total)
            })
            .collect::<Vec<_>>();
        if every_client_usable(&counts, n) {
            break;
        }
    }
    if !every_client_usable(&counts, n) {
        rebalance(&mut counts, n)?;
    }

    let mut pools = vec![Vec::new(); n];
    for (class, mut idx) in by_class.into_iter().enumerate() {
        idx.shuffle(&mut rng);
        let mut at = 0;
        for (i, &k) in counts[class].iter().enumerate() {
            pools[i].extend_from_slice(&idx[at..at + k]);
            at += k;
        }
    }
    finish(ds, spec, seed, pools, vec![0; n])
}

fn draw_simplex<R: Rng>(gamma: &Gamma<f64>, n: usize, rng: &mut R) -> Vec<f64> {
    let g: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let s: f64 = g.iter().sum();
    if s > 0.0 && s.is_finite() {
        return g.iter().map(|v| v / s).collect();
    }
    // Every draw underflowed (tiny alpha): the limit is a vertex of the simplex.
    let mut q = vec![0.0; n];
    q[rng.random_range(0..n)] = 1.0;
    q
}

/// Integer allocation of `total` proportional to `q`; leftover units go to
/// the largest fractional parts, ties to the lower client index.
pub fn largest_remainder(q: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = q.iter().map(|&p| p * total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut left = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

fn every_client_usable(counts: &[Vec<usize>], n: usize) -> bool {
    (0..n).all(|i| counts.iter().any(|per_class| per_class[i] >= 2))
}

/// Moves single samples from the largest client's most abundant class until
/// every client holds at least 2 samples of some class.
fn rebalance(counts: &mut [Vec<usize>], n: usize) -> Result<()> {
    let total = |counts: &[Vec<usize>], i: usize| counts.iter().map(|pc| pc[i]).sum::<usize>();
    while let Some(needy) = (0..n).find(|&i| counts.iter().all(|pc| pc[i] < 2)) {
        let donor = (0..n)
            .filter(|&i| i != needy)
            .max_by(|&a, &b| total(counts, a).cmp(&total(counts, b)).then(b.cmp(&a)))
            .ok_or_else(|| HtflError::Infeasible("need at least two clients".into()))?;
        let class = (0..counts.len())
            .max_by(|&a, &b| counts[a][donor].cmp(&counts[b][donor]).then(b.cmp(&a)))
            .ok_or_else(|| HtflError::Infeasible("dataset has no classes".into()))?;
        if counts[class][donor] <= 2 {
            return Err(HtflError::Infeasible(
                "too few samples to give every client 2 of one class".into(),
            ));
        }
        counts[class][donor] -= 1;
        counts[class][needy] += 1;
    }
    Ok(())
}

pub fn partition_feature_shift(
    ds: &Dataset,
    spec: &ScenarioSpec,
    seed: u64,
) -> Result<PartitionResult> {
    spec.validate()?;
    let n = spec.n_clients;
    let mut rng = assign_rng(seed);
    let mut pools = vec![Vec::new(); n];
    let mut next = 0;
    for mut idx in ds.indices_by_class() {
        idx.shuffle(&mut rng);
        for s in idx {
            pools[next % n].push(s);
            next += 1;
        }
    }
    let domains = (0..n).map(|i| i % spec.shift_domains).collect();
    finish(ds, spec, seed, pools, domains)
}

pub fn partition_real_world(ds: &Dataset, spec: &ScenarioSpec, seed: u64) -> Result<PartitionResult> {
    spec.validate()?;
    let groups = ds
        .group_id()
        .ok_or_else(|| invalid("real-world partitioning needs group_id on the dataset"))?;
    let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        by_group.entry(g).or_default().push(i);
    }
    let n = spec.n_clients;
    if by_group.len() < n {
        return Err(HtflError::Infeasible(format!(
            "{} groups cannot populate {n} clients",
            by_group.len()
        )));
    }
    let mut pools = vec![Vec::new(); n];
    for (r, (_, idx)) in by_group.into_iter().enumerate() {
        pools[r % n].extend(idx);
    }
    finish(ds, spec, seed, pools, vec![0; n])
}

fn finish(
    ds: &Dataset,
    spec: &ScenarioSpec,
    seed: u64,
    pools: Vec<Vec<usize>>,
    client_domain: Vec<usize>,
) -> Result<PartitionResult> {
    let mut client_train = Vec::with_capacity(pools.len());
    let mut client_test = Vec::with_capacity(pools.len());
    for (i, pool) in pools.into_iter().enumerate() {
        if pool.len() < 2 {
            return Err(HtflError::Infeasible(format!(
                "client {i} received {} samples; at least 2 are needed for a train/test split",
                pool.len()
            )));
        }
        let mut rng = seeded_rng(substream(seed, i as u64, 0, PURPOSE_SPLIT));
        let (tr, te) = match spec.split {
            SplitMode::Uniform => split_uniform(pool, &mut rng),
            SplitMode::Stratified => split_stratified(pool, ds.labels(), &mut rng),
        };
        client_train.push(tr);
        client_test.push(te);
    }
    Ok(PartitionResult {
        client_train,
        client_test,
        scenario: *spec,
        seed,
        num_classes: ds.num_classes(),
        client_domain,
    })
}

/// Train size for a pool of `n`: `round(0.75·n)` kept inside `[1, n-1]`.
pub fn train_len(n: usize) -> usize {
    let t = (0.75 * n as f64).round() as usize;
    if n >= 2 {
        t.clamp(1, n - 1)
    } else {
        t
    }
}

fn split_uniform(mut pool: Vec<usize>, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    pool.sort_unstable();
    pool.shuffle(rng);
    let t = train_len(pool.len());
    let mut test = pool.split_off(t);
    pool.sort_unstable();
    test.sort_unstable();
    (pool, test)
}

fn split_stratified(
    pool: Vec<usize>,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let total = pool.len();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for s in pool {
        by_class.entry(labels[s]).or_default().push(s);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut idx) in by_class {
        idx.sort_unstable();
        idx.shuffle(rng);
        let t = (0.75 * idx.len() as f64).round() as usize;
        test.extend(idx.split_off(t));
        train.extend(idx);
    }
    // Per-class rounding can drift; pull the totals back inside the band.
    let want = train_len(total);
    while train.len() > want {
        test.push(train.pop().expect("non-empty"));
    }
    while train.len() < want {
        train.push(test.pop().expect("non-empty"));
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}
