//! `hreid` command-line driver.
//!
//! Every subcommand loads and validates its inputs before it writes
//! anything, so a rejected run leaves no partial output behind. Exit codes:
//! 0 on success, 1 on filesystem errors, 2 on invalid input.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use hreid::data::{load_dataset_dir, write_dataset, Dataset, Split};
use hreid::engine::{index_gallery, query_all, write_jsonl, AttributeSource, GalleryIndex, QueryResult};
use hreid::eval;
use hreid::pipeline::{evaluate_model, load_data, train_model, truncate, ModelKind, RunConfig};
use hreid::synth;
use hreid::tree::{build_random_tree, build_structure, train_hierarchy, Hierarchy, TrainOptions};
use hreid::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "hreid", version, about = "Attribute-routed hierarchical re-identification")]
struct Cli {
    /// Worker threads for training and query evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive the tree structure (untrained) and its build log.
    Build {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        random_seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build and train a model, or train a skeleton written by `build`.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, conflicts_with = "flat")]
        random_seed: Option<u64>,
        /// Train the single-network baseline instead of a tree.
        #[arg(long)]
        flat: bool,
        #[arg(long, conflicts_with_all = ["flat", "random_seed"])]
        skeleton: Option<PathBuf>,
        #[arg(long)]
        fixed_layers: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Route the gallery split and write the partitioned index.
    Index {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = SourceArg::Predicted)]
        attribute_source: SourceArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer every query of the query split against an index (JSON lines).
    Query {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one or more models and write the comparison report.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        #[arg(long, value_enum)]
        attribute_source: Vec<SourceArg>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        dump_queries: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole pipeline: data, every method, report.
    Report {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        fixed_layers: Option<usize>,
        #[arg(long, value_enum)]
        attribute_source: Vec<SourceArg>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        dump_queries: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the global seed of the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset directory; without it the config's data source is used.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SourceArg {
    Predicted,
    #[value(name = "ground_truth", alias = "ground-truth")]
    GroundTruth,
    Both,
}

impl SourceArg {
    fn expand(self) -> &'static [AttributeSource] {
        match self {
            SourceArg::Predicted => &[AttributeSource::Predicted],
            SourceArg::GroundTruth => &[AttributeSource::GroundTruth],
            SourceArg::Both => &[AttributeSource::Predicted, AttributeSource::GroundTruth],
        }
    }
}

fn sources(args: &[SourceArg]) -> Option<Vec<AttributeSource>> {
    if args.is_empty() {
        return None;
    }
    let mut out = Vec::new();
    for a in args {
        for &s in a.expand() {
            if !out.contains(&s) {
                out.push(s);
            }
        }
    }
    Some(out)
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

impl DataArgs {
    fn load(&self, cfg: &RunConfig) -> Result<Dataset> {
        match &self.data {
            Some(dir) => load_dataset_dir(dir),
            None => load_data(cfg),
        }
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_queries(path: &Path, results: &[QueryResult]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_jsonl(results, BufWriter::new(file))
}

fn save_model(dir: &Path, name: &str, model: &hreid::pipeline::TrainedModel) -> Result<()> {
    mkdir(dir)?;
    model.hierarchy.save(dir.join(format!("{name}.json")))?;
    if let Some(log) = &model.build_log {
        write_json(&dir.join(format!("{name}.build_log.json")), log)?;
    }
    write_json(&dir.join(format!("{name}.train_log.json")), &model.train_log)
}

fn check_top_k(top_k: Option<usize>) -> Result<()> {
    if top_k == Some(0) {
        return Err(Error::Config("--top-k must be at least 1".into()));
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { run, out } => {
            let cfg = run.load()?;
            let seeded = cfg.seeded();
            let hreid::pipeline::DataSource::Synth(s) = &seeded.data else {
                return Err(Error::Config("synth needs a synthetic data source in the config".into()));
            };
            let data = synth::generate(s)?;
            write_dataset(&data, &out)?;
            info!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::Build {
            run,
            data,
            random_seed,
            out,
        } => {
            let cfg = run.load()?;
            let dataset = data.load(&cfg)?;
            let seeded = cfg.seeded();
            let train = dataset.split(Split::Train);
            let (skeleton, log) = match random_seed {
                Some(s) => build_random_tree(&train, &seeded.build, s)?,
                None => build_structure(&train, &seeded.build)?,
            };
            mkdir(&out)?;
            skeleton.save(out.join("skeleton.json"))?;
            write_json(&out.join("build_log.json"), &log)?;
            info!("{} nodes, {} leaves", skeleton.nodes().len(), skeleton.leaves().len());
        }
        Command::Train {
            run,
            data,
            random_seed,
            flat,
            skeleton,
            fixed_layers,
            out,
        } => {
            let mut cfg = run.load()?;
            if fixed_layers.is_some() {
                cfg.fixed_layers = fixed_layers;
            }
            cfg.validate()?;
            let dataset = data.load(&cfg)?;
            let model = match skeleton {
                Some(path) => {
                    let skel = Hierarchy::load(&path)?;
                    let seeded = cfg.seeded();
                    let train = dataset.split(Split::Train);
                    let tag = match skel.method {
                        hreid::tree::Method::RandomTree { seed } => format!("train:random-tree:{seed}"),
                        hreid::tree::Method::Flat => "train:flat".to_string(),
                        hreid::tree::Method::Hierarchical => "train".to_string(),
                    };
                    let layers = match skel.method {
                        hreid::tree::Method::Flat => hreid::tree::LayerPolicy::Assigned,
                        _ => seeded.layer_policy(),
                    };
                    let opts = TrainOptions {
                        triplet: seeded.triplet.clone(),
                        head: seeded.head.clone(),
                        layers,
                        seed: hreid::seed::derive(seeded.seed, &tag),
                    };
                    let (hierarchy, train_log) = train_hierarchy(&skel, &train, &opts)?;
                    hreid::pipeline::TrainedModel {
                        hierarchy,
                        build_log: None,
                        train_log,
                    }
                }
                None => {
                    let kind = match (flat, random_seed) {
                        (true, _) => ModelKind::Flat,
                        (false, Some(s)) => ModelKind::RandomTree(s),
                        (false, None) => ModelKind::Hierarchical,
                    };
                    train_model(&cfg, &dataset, kind)?
                }
            };
            save_model(&out, "model", &model)?;
            info!("wrote {}", out.join("model.json").display());
        }
        Command::Index {
            run,
            data,
            model,
            attribute_source,
            out,
        } => {
            let cfg = run.load()?;
            let h = Hierarchy::load(&model)?;
            let dataset = data.load(&cfg)?;
            let source = match attribute_source {
                SourceArg::Predicted => AttributeSource::Predicted,
                SourceArg::GroundTruth => AttributeSource::GroundTruth,
                SourceArg::Both => {
                    return Err(Error::Config("index takes a single attribute source".into()));
                }
            };
            let index = index_gallery(&h, &dataset.split(Split::Gallery), source)?;
            write_json(&out, &index)?;
        }
        Command::Query {
            run,
            data,
            model,
            index,
            top_k,
            out,
        } => {
            check_top_k(top_k)?;
            let cfg = run.load()?;
            let h = Hierarchy::load(&model)?;
            let text = fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
            let idx: GalleryIndex = serde_json::from_str(&text).map_err(|e| Error::Format {
                path: index.clone(),
                msg: e.to_string(),
            })?;
            let dataset = data.load(&cfg)?;
            let results = query_all(&h, &idx, &dataset.split(Split::Query), top_k.unwrap_or(cfg.eval.top_k))?;
            write_queries(&out, &results)?;
        }
        Command::Eval {
            run,
            data,
            model,
            attribute_source,
            top_k,
            dump_queries,
            out,
        } => {
            check_top_k(top_k)?;
            let mut cfg = run.load()?;
            if let Some(s) = sources(&attribute_source) {
                cfg.eval.attribute_sources = s;
            }
            let top_k = top_k.unwrap_or(cfg.eval.top_k);
            let models = model.iter().map(Hierarchy::load).collect::<Result<Vec<_>>>()?;
            let dataset = data.load(&cfg)?;
            let mut results = Vec::new();
            let mut dumps = Vec::new();
            for &source in &cfg.eval.attribute_sources {
                for h in &models {
                    let (r, mut q) = evaluate_model(h, &dataset, source, &cfg.eval)?;
                    truncate(&mut q, top_k);
                    dumps.push((format!("{}.{}.jsonl", r.method, r.attribute_source), q));
                    results.push(r);
                }
            }
            let report = eval::compare(&results)?;
            report.write(&out)?;
            if dump_queries {
                for (name, q) in &dumps {
                    write_queries(&out.join("queries").join(name), q)?;
                }
            }
            print!("{}", report.to_text());
        }
        Command::Report {
            run,
            fixed_layers,
            attribute_source,
            top_k,
            dump_queries,
            out,
        } => {
            check_top_k(top_k)?;
            let mut cfg = run.load()?;
            if fixed_layers.is_some() {
                cfg.fixed_layers = fixed_layers;
            }
            if let Some(s) = sources(&attribute_source) {
                cfg.eval.attribute_sources = s;
            }
            if let Some(k) = top_k {
                cfg.eval.top_k = k;
            }
            let out = out
                .or_else(|| cfg.out.clone())
                .ok_or_else(|| Error::Config("no output directory: pass --out or set `out`".into()))?;
            cfg.validate()?;
            let dataset = load_data(&cfg)?;
            let mut kinds = vec![ModelKind::Hierarchical, ModelKind::Flat];
            kinds.extend((0..cfg.random_trees as u64).map(ModelKind::RandomTree));
            let models = kinds
                .iter()
                .map(|&k| train_model(&cfg, &dataset, k))
                .collect::<Result<Vec<_>>>()?;
            let mut results = Vec::new();
            let mut dumps = Vec::new();
            for &source in &cfg.eval.attribute_sources {
                for m in &models {
                    let (r, mut q) = evaluate_model(&m.hierarchy, &dataset, source, &cfg.eval)?;
                    truncate(&mut q, cfg.eval.top_k);
                    dumps.push((format!("{}.{}.jsonl", r.method, r.attribute_source), q));
                    results.push(r);
                }
            }
            let report = eval::compare(&results)?;

            if matches!(cfg.data, hreid::pipeline::DataSource::Synth(_)) {
                write_dataset(&dataset, out.join("data"))?;
            }
            for m in &models {
                save_model(&out.join("models"), &m.hierarchy.method.label(), m)?;
            }
            write_json(&out.join("config.json"), &cfg)?;
            report.write(&out)?;
            if dump_queries {
                for (name, q) in &dumps {
                    write_queries(&out.join("queries").join(name), q)?;
                }
            }
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

#[cfg(feature = "parallel")]
fn with_jobs(jobs: usize, f: impl FnOnce() -> Result<()> + Send) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

#[cfg(not(feature = "parallel"))]
fn with_jobs(_jobs: usize, f: impl FnOnce() -> Result<()> + Send) -> Result<()> {
    f()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = if cli.jobs == 0 {
        Err(Error::Config("--jobs must be at least 1".into()))
    } else {
        with_jobs(cli.jobs, || run(cli.command))
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
