//! Experiment scenarios, metric rows, summaries and layer embeddings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use fedrt_core::aggregate::{federated_evaluate, CentreMetrics, Strategy};
use fedrt_core::data::{ablate, partition, CentreShard, Partition, PartitionConfig, Standardizer, StructureRecord};
use fedrt_core::model::{
    build_network, evaluate, layer_activations, train_local_epoch, Modalities, ModelWeights, NetworkSpec, Tap,
    TrainConfig,
};
use fedrt_core::phantom::{generate_cohort, ExtractConfig, PhantomConfig, HEART, LUNG_LEFT};
use fedrt_core::stats::{mean, silhouette, silhouette_subset, std_pop};
use fedrt_core::tsne::{tsne, Embedding, TsneConfig};
use fedrt_core::{rng, Tensor, CLASS_NAMES};
use serde::Serialize;

use crate::error::{FedError, FedResult};
use crate::orchestrator::{run_in_process, FedConfig, FedOutcome};

/// Cohort size, input dims and round budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Profile {
    pub name: &'static str,
    pub n_patients: usize,
    pub holdout_patients: usize,
    pub rounds: u32,
    pub cohort_seed: u64,
    #[serde(skip)]
    pub phantom: PhantomConfig,
    #[serde(skip)]
    pub extract: ExtractConfig,
}

impl Profile {
    /// 60 phantoms, 16×16 slices, 8×16×16 volumes, 20 rounds.
    pub fn desk() -> Self {
        Profile {
            name: "desk",
            n_patients: 60,
            holdout_patients: 12,
            rounds: 20,
            cohort_seed: 2024,
            phantom: PhantomConfig::default(),
            extract: ExtractConfig::desk(),
        }
    }

    /// 422 patients, 64×64 slices, 32×64×64 volumes, 100 rounds.
    pub fn paper() -> Self {
        Profile {
            name: "paper",
            n_patients: 422,
            holdout_patients: 50,
            rounds: 100,
            cohort_seed: 2024,
            phantom: PhantomConfig::default(),
            extract: ExtractConfig::default(),
        }
    }

    pub fn by_name(name: &str) -> FedResult<Self> {
        match name {
            "desk" => Ok(Profile::desk()),
            "paper" => Ok(Profile::paper()),
            other => Err(FedError::Config(format!("unknown profile '{other}' (desk, paper)"))),
        }
    }

    pub fn generate(&self) -> FedResult<Vec<StructureRecord>> {
        Ok(generate_cohort(
            self.n_patients,
            self.cohort_seed,
            &self.phantom,
            &self.extract,
        )?)
    }

    pub fn spec(&self, m: Modalities) -> FedResult<NetworkSpec> {
        let spec = NetworkSpec::for_modalities(m)?.with_input_dims(self.extract.slice_hw, self.extract.volume_dhw);
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Federated,
    Centralized,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Federated => "federated",
            Mode::Centralized => "centralized",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = FedError;

    fn from_str(s: &str) -> FedResult<Self> {
        match s.to_ascii_lowercase().as_str() {
            "federated" | "fed" => Ok(Mode::Federated),
            "centralized" | "centralised" | "central" => Ok(Mode::Centralized),
            other => Err(FedError::Config(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub mode: Mode,
    pub n_centres: usize,
    pub strategy: Strategy,
    pub modalities: Modalities,
    pub fraction: f64,
    pub rounds: u32,
    pub seeds: Vec<u64>,
}

impl Scenario {
    pub fn federated(n_centres: usize, strategy: Strategy, modalities: Modalities, rounds: u32) -> Self {
        Scenario {
            mode: Mode::Federated,
            n_centres,
            strategy,
            modalities,
            fraction: 1.0,
            rounds,
            seeds: vec![0, 1, 2],
        }
    }

    pub fn centralized(modalities: Modalities, rounds: u32) -> Self {
        Scenario {
            mode: Mode::Centralized,
            n_centres: 1,
            strategy: Strategy::FedAvg,
            modalities,
            fraction: 1.0,
            rounds,
            seeds: vec![0, 1, 2],
        }
    }

    pub fn with_fraction(mut self, fraction: f64) -> Self {
        self.fraction = fraction;
        self
    }

    pub fn with_seeds(mut self, seeds: Vec<u64>) -> Self {
        self.seeds = seeds;
        self
    }

    /// Centres actually used: centralized runs pool everything in one.
    pub fn effective_centres(&self) -> usize {
        match self.mode {
            Mode::Federated => self.n_centres,
            Mode::Centralized => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub mode: Mode,
    /// Empty for centralized runs.
    pub centres: Option<usize>,
    #[serde(serialize_with = "strategy_name")]
    pub strategy: Option<Strategy>,
    pub modalities: String,
    pub fraction: f64,
    pub seed: u64,
    /// Hold-out categorical accuracy of the best checkpoint.
    pub accuracy: Option<f64>,
    pub best_round: Option<u32>,
    pub best_val_accuracy: Option<f64>,
    pub wall_secs: f64,
    pub error: Option<String>,
}

fn strategy_name<S: serde::Serializer>(v: &Option<Strategy>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(st) => s.serialize_some(st.name()),
        None => s.serialize_none(),
    }
}

/// Partition `records` for `n_centres` and z-score tabular features with
/// statistics from training and validation records only.
pub fn prepare(
    records: &[StructureRecord],
    n_centres: usize,
    holdout_patients: usize,
    seed: u64,
) -> FedResult<Partition> {
    let mut p = partition(
        records,
        &PartitionConfig {
            n_centres,
            holdout_patients,
            val_frac: 0.2,
            seed,
        },
    )?;
    let st = Standardizer::fit_partition(&p)?;
    st.apply_partition(&mut p);
    Ok(p)
}

/// Seeds used by one repeat of a scenario.
#[derive(Clone, Copy, Debug)]
pub struct RunSeeds {
    pub init: u64,
    pub ablation: u64,
    pub client_base: u64,
}

impl RunSeeds {
    pub fn new(seed: u64) -> Self {
        RunSeeds {
            init: rng::derive(seed, 1),
            ablation: rng::derive(seed, 2),
            client_base: rng::derive(seed, 3),
        }
    }

    pub fn client(&self, index: usize) -> u64 {
        rng::derive(self.client_base, index as u64)
    }
}

pub fn ablate_shards(shards: &[CentreShard], fraction: f64, seed: u64) -> FedResult<Vec<CentreShard>> {
    shards
        .iter()
        .enumerate()
        .map(|(i, s)| Ok(ablate(s, fraction, rng::derive(seed, i as u64))?))
        .collect()
}

/// Train on the pooled shards for `rounds` epochs, evaluating on the pooled
/// validation set after each and keeping the best epoch. Epoch `r` uses seed
/// `client_seed ^ r`, matching a single federated centre.
pub fn train_centralized(
    spec: &NetworkSpec,
    shards: &[CentreShard],
    client_seed: u64,
    rounds: u32,
    init: ModelWeights<f32>,
) -> FedResult<FedOutcome> {
    let train: Vec<StructureRecord> = shards.iter().flat_map(|s| s.train.iter().cloned()).collect();
    let val: Vec<StructureRecord> = shards.iter().flat_map(|s| s.validation.iter().cloned()).collect();
    let cfg = TrainConfig::default();
    let mut w = init;
    let mut history = Vec::new();
    let mut best: Option<(f64, u32, ModelWeights<f32>)> = None;
    for round in 1..=rounds {
        let started = Instant::now();
        let (next, loss) = train_local_epoch(&w, &train, spec, client_seed ^ round as u64, &cfg)?;
        let ev = evaluate(&next, &val, spec)?;
        let (acc, vloss) = federated_evaluate(&[CentreMetrics {
            centre_id: "pooled".into(),
            accuracy: ev.accuracy,
            loss: ev.loss,
            n: ev.n,
        }])?;
        if best.as_ref().is_none_or(|(a, _, _)| acc > *a) {
            best = Some((acc, round, next.clone()));
        }
        history.push(crate::orchestrator::RoundRecord {
            round,
            val_accuracy: acc,
            val_loss: vloss,
            train_losses: vec![("pooled".into(), loss)],
            wall_time: started.elapsed(),
        });
        w = next;
    }
    let (_, best_round, best) = best.ok_or_else(|| FedError::Config("at least one round is required".into()))?;
    Ok(FedOutcome {
        best,
        best_round,
        last: w,
        history,
    })
}

/// Train one repeat of `scenario` on a prepared partition.
pub fn train_scenario(scenario: &Scenario, p: &Partition, spec: &NetworkSpec, seed: u64) -> FedResult<FedOutcome> {
    let seeds = RunSeeds::new(seed);
    let shards = ablate_shards(&p.shards, scenario.fraction, seeds.ablation)?;
    if let Some(s) = shards.iter().find(|s| s.train.len() < 2 || s.validation.is_empty()) {
        return Err(FedError::Config(format!(
            "centre {} has {} training and {} validation records",
            s.centre_id,
            s.train.len(),
            s.validation.len()
        )));
    }
    let (_, init) = build_network::<f32>(spec, seeds.init)?;
    let client_seeds: Vec<u64> = (0..shards.len()).map(|i| seeds.client(i)).collect();
    match scenario.mode {
        Mode::Centralized => train_centralized(spec, &shards, client_seeds[0], scenario.rounds, init),
        Mode::Federated => {
            let ids = shards.iter().map(|s| s.centre_id.clone()).collect();
            let cfg = FedConfig::new(scenario.strategy, scenario.rounds, ids);
            run_in_process(cfg, spec, &shards, &client_seeds, init).map_err(|a| a.error)
        }
    }
}

fn run_one(scenario: &Scenario, p: &Partition, spec: &NetworkSpec, seed: u64) -> MetricsRow {
    let started = Instant::now();
    let result =
        train_scenario(scenario, p, spec, seed).and_then(|out| Ok((evaluate(&out.best, &p.test, spec)?.accuracy, out)));
    let federated = scenario.mode == Mode::Federated;
    let mut row = MetricsRow {
        mode: scenario.mode,
        centres: federated.then_some(scenario.n_centres),
        strategy: federated.then_some(scenario.strategy),
        modalities: scenario.modalities.to_string(),
        fraction: scenario.fraction,
        seed,
        accuracy: None,
        best_round: None,
        best_val_accuracy: None,
        wall_secs: 0.0,
        error: None,
    };
    match result {
        Ok((acc, out)) => {
            row.accuracy = Some(acc);
            row.best_round = Some(out.best_round);
            row.best_val_accuracy = out.history.get(out.best_round as usize - 1).map(|r| r.val_accuracy);
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row.wall_secs = started.elapsed().as_secs_f64();
    row
}

/// One row per seed. Failures become rows with `error` set.
pub fn run_scenario(scenario: &Scenario, records: &[StructureRecord], profile: &Profile) -> FedResult<Vec<MetricsRow>> {
    run_scenarios(std::slice::from_ref(scenario), records, profile, 1)
}

/// Run every (scenario, seed) pair on up to `jobs` threads. Rows come back
/// in scenario then seed order regardless of `jobs`.
pub fn run_scenarios(
    scenarios: &[Scenario],
    records: &[StructureRecord],
    profile: &Profile,
    jobs: usize,
) -> FedResult<Vec<MetricsRow>> {
    let mut partitions: BTreeMap<usize, Partition> = BTreeMap::new();
    for s in scenarios {
        let n = s.effective_centres();
        if let std::collections::btree_map::Entry::Vacant(e) = partitions.entry(n) {
            e.insert(prepare(records, n, profile.holdout_patients, profile.cohort_seed)?);
        }
    }
    let mut work = Vec::new();
    for (si, s) in scenarios.iter().enumerate() {
        let spec = profile.spec(s.modalities)?;
        for &seed in &s.seeds {
            work.push((si, spec.clone(), seed));
        }
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<MetricsRow>>> = Mutex::new(vec![None; work.len()]);
    thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, work.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((si, spec, seed)) = work.get(i) else { break };
                let s = &scenarios[*si];
                let row = run_one(s, &partitions[&s.effective_centres()], spec, *seed);
                results.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(row);
            });
        }
    });
    Ok(results
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .flatten()
        .collect())
}

/// Every federated (centres, strategy, modalities) cell at full data plus a
/// centralized arm per modality set.
pub fn grid_scenarios(rounds: u32, seeds: &[u64]) -> Vec<Scenario> {
    let mut out = Vec::new();
    for centres in [3, 5, 7] {
        for strategy in Strategy::ALL {
            for m in ALL_MODALITY_SETS {
                out.push(Scenario::federated(centres, strategy, m, rounds).with_seeds(seeds.to_vec()));
            }
        }
    }
    for m in ALL_MODALITY_SETS {
        out.push(Scenario::centralized(m, rounds).with_seeds(seeds.to_vec()));
    }
    out
}

/// FedAvg at 3/5/7 centres and 100%/50%/25% of each class per centre.
pub fn ablation_scenarios(modalities: Modalities, rounds: u32, seeds: &[u64]) -> Vec<Scenario> {
    let mut out = Vec::new();
    for centres in [3, 5, 7] {
        for fraction in [1.0, 0.5, 0.25] {
            out.push(
                Scenario::federated(centres, Strategy::FedAvg, modalities, rounds)
                    .with_fraction(fraction)
                    .with_seeds(seeds.to_vec()),
            );
        }
    }
    out
}

pub const ALL_MODALITY_SETS: [Modalities; 5] = [
    Modalities::TABULAR,
    Modalities::VISUAL,
    Modalities::VOLUME,
    Modalities::TABULAR_VISUAL,
    Modalities::TABULAR_VOLUME,
];

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct CellKey {
    pub mode: Mode,
    pub centres: Option<usize>,
    pub strategy: Option<&'static str>,
    pub modalities: String,
    /// Fraction in thousandths, so keys order and compare exactly.
    pub fraction_milli: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryCell {
    pub key: CellKey,
    pub n: usize,
    pub failed: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub max: Option<f64>,
}

impl SummaryCell {
    /// `"98.17 (0.24)"` in percent; `"-"` when every seed failed.
    pub fn formatted(&self) -> String {
        match (self.mean, self.std) {
            (Some(m), Some(s)) => format_mean_std(m, s),
            _ => "-".into(),
        }
    }
}

/// Mean and std (fractions) as percentages with two decimals.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.2} ({:.2})", 100.0 * mean, 100.0 * std)
}

pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryCell> {
    let mut groups: BTreeMap<CellKey, Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        let key = CellKey {
            mode: r.mode,
            centres: r.centres,
            strategy: r.strategy.map(Strategy::name),
            modalities: r.modalities.clone(),
            fraction_milli: (r.fraction * 1000.0).round() as u32,
        };
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(key, rs)| {
            let acc: Vec<f64> = rs.iter().filter_map(|r| r.accuracy).collect();
            SummaryCell {
                key,
                n: rs.len(),
                failed: rs.len() - acc.len(),
                mean: mean(&acc),
                std: std_pop(&acc),
                max: acc.iter().copied().reduce(f64::max),
            }
        })
        .collect()
}

/// Plain-text table, one line per cell.
pub fn format_summary(cells: &[SummaryCell]) -> String {
    let mut s = format!(
        "{:<12} {:>7} {:<8} {:<16} {:>8} {:>15} {:>7} {:>6}\n",
        "mode", "centres", "strategy", "modalities", "fraction", "accuracy", "max", "failed"
    );
    for c in cells {
        let k = &c.key;
        let _ = writeln!(
            s,
            "{:<12} {:>7} {:<8} {:<16} {:>8.2} {:>15} {:>7} {:>6}",
            k.mode.name(),
            k.centres.map_or("-".into(), |n| n.to_string()),
            k.strategy.unwrap_or("-"),
            k.modalities,
            k.fraction_milli as f64 / 1000.0,
            c.formatted(),
            c.max.map_or("-".into(), |m| format!("{:.2}", 100.0 * m)),
            c.failed,
        );
    }
    s
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

/// Metrics CSV. Wall time is left out so reruns are byte-identical.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s =
        String::from("mode,centres,strategy,modalities,fraction,seed,accuracy,best_round,best_val_accuracy,error\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.mode.name(),
            opt(r.centres),
            opt(r.strategy.map(Strategy::name)),
            r.modalities,
            r.fraction,
            r.seed,
            opt(r.accuracy.map(|a| format!("{a:.6}"))),
            opt(r.best_round),
            opt(r.best_val_accuracy.map(|a| format!("{a:.6}"))),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
        );
    }
    s
}

/// Accuracy-vs-fraction series, one line per (centres, fraction).
pub fn ablation_csv(cells: &[SummaryCell]) -> String {
    let mut s = String::from("centres,modalities,fraction,mean_accuracy,std_accuracy,n\n");
    for c in cells.iter().filter(|c| c.key.mode == Mode::Federated) {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            opt(c.key.centres),
            c.key.modalities,
            c.key.fraction_milli as f64 / 1000.0,
            opt(c.mean.map(|m| format!("{m:.6}"))),
            opt(c.std.map(|m| format!("{m:.6}"))),
            c.n - c.failed,
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerEmbedding {
    pub tap: Tap,
    pub embedding: Embedding,
    pub labels: Vec<usize>,
    /// Silhouette of the true labels in the 2D embedding.
    pub silhouette: f64,
    /// Silhouette restricted to Lung-Left and Heart.
    pub lung_heart_silhouette: Option<f64>,
}

pub const TAPS: [Tap; 3] = [Tap::TabularOut, Tap::ConvOut, Tap::FusionHidden];

/// Perplexity actually used for `n` points: the requested value, capped at
/// `(n − 1)/3`.
pub fn effective_perplexity(requested: f64, n: usize) -> f64 {
    requested.min((n as f64 - 1.0) / 3.0)
}

/// t-SNE of one layer's activations over `records`.
pub fn embed_layer(
    weights: &ModelWeights<f32>,
    records: &[StructureRecord],
    spec: &NetworkSpec,
    tap: Tap,
    cfg: &TsneConfig,
) -> FedResult<LayerEmbedding> {
    let acts: Tensor<f64> = layer_activations(weights, records, spec, tap)?.cast();
    let cfg = TsneConfig {
        perplexity: effective_perplexity(cfg.perplexity, records.len()),
        ..*cfg
    };
    let embedding = tsne(&acts, &cfg)?;
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let rows = embedding.rows();
    let silhouette = silhouette(&rows, &labels)?;
    let lung_heart_silhouette = silhouette_subset(&rows, &labels, &[LUNG_LEFT, HEART]).ok();
    Ok(LayerEmbedding {
        tap,
        embedding,
        labels,
        silhouette,
        lung_heart_silhouette,
    })
}

/// Embeddings at the tabular branch output, conv block output and last
/// hidden layer.
pub fn analyze_layers(
    weights: &ModelWeights<f32>,
    records: &[StructureRecord],
    spec: &NetworkSpec,
    cfg: &TsneConfig,
) -> FedResult<Vec<LayerEmbedding>> {
    TAPS.iter()
        .map(|&t| embed_layer(weights, records, spec, t, cfg))
        .collect()
}

pub fn embedding_csv(e: &LayerEmbedding) -> String {
    let mut s = String::from("x,y,label,class\n");
    for (p, &l) in e.embedding.points.iter().zip(&e.labels) {
        let _ = writeln!(s, "{:.6},{:.6},{},{}", p[0], p[1], l, CLASS_NAMES[l]);
    }
    s
}

pub fn kl_csv(e: &LayerEmbedding) -> String {
    let mut s = String::from("iteration,kl\n");
    for (i, kl) in &e.embedding.kl {
        let _ = writeln!(s, "{i},{kl:.6}");
    }
    s
}

pub fn total_wall(rows: &[MetricsRow]) -> Duration {
    Duration::from_secs_f64(rows.iter().map(|r| r.wall_secs).sum())
}
