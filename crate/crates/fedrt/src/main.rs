use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fedrt::client::Client;
use fedrt::dataset::{read_dataset, read_partition, write_partition};
use fedrt::harness::{
    ablation_csv, ablation_scenarios, analyze_layers, embed_layer, embedding_csv, format_summary, grid_scenarios,
    kl_csv, metrics_csv, prepare, run_scenarios, summarize, train_scenario, MetricsRow, Mode, Profile, RunSeeds,
    Scenario, TAPS,
};
use fedrt::orchestrator::{FedConfig, Orchestrator};
use fedrt::transport::{Link, TcpLink};
use fedrt_core::aggregate::Strategy;
use fedrt_core::data::{Standardizer, StructureRecord};
use fedrt_core::model::{build_network, evaluate, Modalities, Tap};
use fedrt_core::tsne::TsneConfig;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "fedrt",
    version,
    about = "Federated structure-name standardisation on synthetic phantoms"
)]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "FEDRT_OUT_DIR", default_value = "fedrt-out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a phantom cohort and write it as an RTFD file with a split manifest.
    GenData {
        #[command(flatten)]
        data: DataArgs,
        /// Centres in the written split.
        #[arg(long, default_value_t = 3)]
        centres: usize,
        /// Target file (default: <out>/cohort.rtfd).
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Run one scenario over several seeds.
    Run {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 3)]
        centres: usize,
        #[arg(long, default_value = "fedavg")]
        strategy: Strategy,
        #[arg(long, default_value = "tabular+volume")]
        modalities: Modalities,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long, default_value = "federated")]
        mode: Mode,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Every centres x strategy x modality cell plus centralized arms.
    Grid {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// FedAvg at 3/5/7 centres with 100/50/25 % of each class per centre.
    Ablation {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "tabular+volume")]
        modalities: Modalities,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train once, then embed hold-out activations at one or all tap points.
    Tsne {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 3)]
        centres: usize,
        #[arg(long, default_value = "fedavg")]
        strategy: Strategy,
        #[arg(long, default_value = "tabular+volume")]
        modalities: Modalities,
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// tabular_out, conv_out, fusion_hidden or all.
        #[arg(long, default_value = "all")]
        tap: String,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        /// Embed the untrained network instead.
        #[arg(long)]
        untrained: bool,
    },
    /// Serve as orchestrator over TCP for the centres in a dataset split.
    Orchestrate {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// RTFD file written by gen-data.
        #[arg(long)]
        file: PathBuf,
        #[arg(long, default_value = "fedavg")]
        strategy: Strategy,
        #[arg(long, default_value = "tabular+volume")]
        modalities: Modalities,
        #[arg(long, default_value_t = 20)]
        rounds: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 600)]
        timeout_secs: u64,
    },
    /// Serve one centre of a dataset split over TCP.
    Client {
        #[arg(long, default_value = "127.0.0.1:7878")]
        connect: String,
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        centre: String,
        #[arg(long, default_value = "tabular+volume")]
        modalities: Modalities,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Clone)]
struct DataArgs {
    /// desk or paper.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Read records from an RTFD file instead of generating them.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Override image dims as H,W,D (slice HxW, volume DxHxW).
    #[arg(long)]
    dims: Option<String>,
    /// Override the number of generated patients.
    #[arg(long)]
    patients: Option<usize>,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Parallel scenario workers.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl DataArgs {
    fn profile(&self) -> Result<Profile> {
        let mut p = Profile::by_name(&self.profile)?;
        if let Some(d) = &self.dims {
            let v: Vec<usize> = d
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<Result<_, _>>()
                .with_context(|| format!("--dims {d}"))?;
            let [h, w, depth] = v[..] else {
                bail!("--dims expects H,W,D, got {d}");
            };
            p.extract.slice_hw = [h, w];
            p.extract.volume_dhw = [depth, h, w];
        }
        if let Some(n) = self.patients {
            p.n_patients = n;
            p.holdout_patients = p.holdout_patients.min(n / 5);
        }
        Ok(p)
    }

    fn load(&self) -> Result<(Profile, Vec<StructureRecord>)> {
        let mut profile = self.profile()?;
        let records = match &self.data {
            Some(path) => {
                let r = read_dataset(path).with_context(|| format!("reading {}", path.display()))?;
                if let Some(first) = r.first() {
                    if let Some(s) = &first.slice {
                        profile.extract.slice_hw = [s.dims()[0], s.dims()[1]];
                    }
                    if let Some(v) = &first.volume {
                        profile.extract.volume_dhw = [v.dims()[0], v.dims()[1], v.dims()[2]];
                    }
                }
                r
            }
            None => profile.generate()?,
        };
        Ok((profile, records))
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn emit(out: &Path, profile: &Profile, scenarios: &[Scenario], rows: &[MetricsRow], jobs: usize) -> Result<()> {
    let cells = summarize(rows);
    let table = format_summary(&cells);
    print!("{table}");
    write(out, "metrics.csv", &metrics_csv(rows))?;
    write(out, "summary.txt", &table)?;
    let manifest = json!({
        "tool": "fedrt",
        "version": env!("CARGO_PKG_VERSION"),
        "profile": profile,
        "dims": { "slice_hw": profile.extract.slice_hw, "volume_dhw": profile.extract.volume_dhw },
        "jobs": jobs,
        "scenarios": scenarios.iter().map(|s| json!({
            "mode": s.mode,
            "centres": s.n_centres,
            "strategy": s.strategy.name(),
            "modalities": s.modalities.to_string(),
            "fraction": s.fraction,
            "rounds": s.rounds,
            "seeds": s.seeds,
        })).collect::<Vec<_>>(),
        "rows": rows,
    });
    write(out, "manifest.json", &serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn run_rows(out: &Path, data: &DataArgs, scenarios: Vec<Scenario>, jobs: usize) -> Result<Vec<MetricsRow>> {
    let (profile, records) = data.load()?;
    let rows = run_scenarios(&scenarios, &records, &profile, jobs)?;
    emit(out, &profile, &scenarios, &rows, jobs)?;
    Ok(rows)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let out = cli.out;
    match cli.cmd {
        Cmd::GenData { data, centres, file } => {
            let (profile, records) = data.load()?;
            let p = fedrt_core::data::partition(
                &records,
                &fedrt_core::data::PartitionConfig {
                    n_centres: centres,
                    holdout_patients: profile.holdout_patients,
                    val_frac: 0.2,
                    seed: profile.cohort_seed,
                },
            )?;
            fs::create_dir_all(&out)?;
            let path = file.unwrap_or_else(|| out.join("cohort.rtfd"));
            write_partition(&path, &p)?;
            println!(
                "wrote {} records for {} patients to {}",
                records.len(),
                profile.n_patients,
                path.display()
            );
        }
        Cmd::Run {
            data,
            centres,
            strategy,
            modalities,
            fraction,
            mode,
            run,
        } => {
            let rounds = run.rounds.unwrap_or(data.profile()?.rounds);
            let s = match mode {
                Mode::Federated => Scenario::federated(centres, strategy, modalities, rounds),
                Mode::Centralized => Scenario::centralized(modalities, rounds),
            };
            run_rows(
                &out,
                &data,
                vec![s.with_fraction(fraction).with_seeds(run.seeds)],
                run.jobs,
            )?;
        }
        Cmd::Grid { data, run } => {
            let rounds = run.rounds.unwrap_or(data.profile()?.rounds);
            run_rows(&out, &data, grid_scenarios(rounds, &run.seeds), run.jobs)?;
        }
        Cmd::Ablation { data, modalities, run } => {
            let rounds = run.rounds.unwrap_or(data.profile()?.rounds);
            let rows = run_rows(
                &out,
                &data,
                ablation_scenarios(modalities, rounds, &run.seeds),
                run.jobs,
            )?;
            write(&out, "ablation.csv", &ablation_csv(&summarize(&rows)))?;
        }
        Cmd::Tsne {
            data,
            centres,
            strategy,
            modalities,
            rounds,
            seed,
            tap,
            perplexity,
            iterations,
            untrained,
        } => {
            let (profile, records) = data.load()?;
            let spec = profile.spec(modalities)?;
            let rounds = rounds.unwrap_or(profile.rounds);
            let p = prepare(&records, centres, profile.holdout_patients, profile.cohort_seed)?;
            let weights = if untrained {
                build_network::<f32>(&spec, RunSeeds::new(seed).init)?.1
            } else {
                let s = Scenario::federated(centres, strategy, modalities, rounds).with_seeds(vec![seed]);
                let outcome = train_scenario(&s, &p, &spec, seed)?;
                println!(
                    "best round {} hold-out accuracy {:.4}",
                    outcome.best_round,
                    evaluate(&outcome.best, &p.test, &spec)?.accuracy
                );
                outcome.best
            };
            let cfg = TsneConfig {
                perplexity,
                iterations,
                seed,
                ..TsneConfig::default()
            };
            let embeddings = if tap == "all" {
                analyze_layers(&weights, &p.test, &spec, &cfg)?
            } else {
                let t: Tap = tap.parse()?;
                vec![embed_layer(&weights, &p.test, &spec, t, &cfg)?]
            };
            for e in &embeddings {
                println!(
                    "{}: {} points, silhouette {:.4}, final KL {:.4}",
                    e.tap,
                    e.labels.len(),
                    e.silhouette,
                    e.embedding.kl.last().map_or(f64::NAN, |k| k.1)
                );
                write(&out, &format!("tsne_{}.csv", e.tap), &embedding_csv(e))?;
                write(&out, &format!("tsne_{}_kl.csv", e.tap), &kl_csv(e))?;
            }
            debug_assert!(embeddings.len() <= TAPS.len());
        }
        Cmd::Orchestrate {
            listen,
            file,
            strategy,
            modalities,
            rounds,
            seed,
            timeout_secs,
        } => {
            let mut p = read_partition(&file)?;
            Standardizer::fit_partition(&p)?.apply_partition(&mut p);
            let spec = spec_for(&p, modalities)?;
            let ids: Vec<String> = p.shards.iter().map(|s| s.centre_id.clone()).collect();
            let listener = TcpListener::bind(&listen).with_context(|| format!("binding {listen}"))?;
            println!("waiting for {} centres on {listen}", ids.len());
            let links: Vec<Box<dyn Link>> = TcpLink::accept(&listener, ids.len())?
                .into_iter()
                .map(|l| Box::new(l) as Box<dyn Link>)
                .collect();
            let mut cfg = FedConfig::new(strategy, rounds, ids);
            cfg.timeout = Duration::from_secs(timeout_secs);
            let mut orch = Orchestrator::connect(cfg, links)?;
            let (_, init) = build_network::<f32>(&spec, RunSeeds::new(seed).init)?;
            let outcome = orch.run(init)?;
            let mut csv = String::from("round,val_accuracy,val_loss\n");
            for r in &outcome.history {
                println!(
                    "round {:>3}: val accuracy {:.4} loss {:.4}",
                    r.round, r.val_accuracy, r.val_loss
                );
                csv.push_str(&format!("{},{:.6},{:.6}\n", r.round, r.val_accuracy, r.val_loss));
            }
            write(&out, "history.csv", &csv)?;
            let acc = evaluate(&outcome.best, &p.test, &spec)?.accuracy;
            println!("best round {} hold-out accuracy {acc:.4}", outcome.best_round);
        }
        Cmd::Client {
            connect,
            file,
            centre,
            modalities,
            seed,
        } => {
            let mut p = read_partition(&file)?;
            Standardizer::fit_partition(&p)?.apply_partition(&mut p);
            let spec = spec_for(&p, modalities)?;
            let index = p
                .shards
                .iter()
                .position(|s| s.centre_id == centre)
                .with_context(|| format!("no centre {centre} in {}", file.display()))?;
            let client = Client::new(p.shards[index].clone(), spec, RunSeeds::new(seed).client(index));
            let mut link = TcpLink::connect(&connect).with_context(|| format!("connecting to {connect}"))?;
            client.serve(&mut link)?;
        }
    }
    Ok(())
}

fn spec_for(p: &fedrt_core::data::Partition, m: Modalities) -> Result<fedrt_core::model::NetworkSpec> {
    let first = p
        .shards
        .iter()
        .flat_map(|s| s.train.first())
        .next()
        .context("dataset has no training records")?;
    let mut profile = Profile::desk();
    if let Some(s) = &first.slice {
        profile.extract.slice_hw = [s.dims()[0], s.dims()[1]];
    }
    if let Some(v) = &first.volume {
        profile.extract.volume_dhw = [v.dims()[0], v.dims()[1], v.dims()[2]];
    }
    Ok(profile.spec(m)?)
}
