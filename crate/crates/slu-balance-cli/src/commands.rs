//! CLI subcommands: generate, train, evaluate, compare.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use slu_balance::augment::{generate_corpus, generate_synthetic, load_generation_config};
use slu_balance::corpus::{load_corpus, save_corpus, ClassHistogram, Corpus, Split, Utterance};
use slu_balance::metrics::{evaluate, relative_change, EvalReport};
use slu_balance::model::Model;
use slu_balance::trainer::{train_method, write_history, MethodSpec, RunData, TrainerConfig};
use slu_balance::{Error, Result};

use crate::config::{load_experiment_config, ExperimentConfig, RunMeta};

#[derive(Parser)]
#[command(
    name = "slu-balance",
    version,
    about = "Imbalance-handling experiments for joint intent classification and slot filling"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/validation/test/synthetic corpora from a template
    /// grammar config, plus a manifest with class histograms.
    Generate {
        /// Generation config (grammar, noise model, synthetic counts).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the corpus files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured method once per seed; writes a checkpoint,
    /// history and evaluation reports per run.
    Train {
        /// Experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed list, e.g. --seed 1,2,3.
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate existing per-seed checkpoints on the test corpus.
    Evaluate {
        /// Experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed list.
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare methods against the Baseline: median-over-seeds SemER per
    /// intent group and relative change, as an aligned table plus records.
    Compare {
        /// A directory of experiment configs (one per method) or a single
        /// config file.
        #[arg(long)]
        config: PathBuf,
        /// Where to write the table and records (defaults to the shared
        /// output directory of the runs).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out } => cmd_generate(&config, &out),
        Command::Train { config, seed, out } => cmd_train(&config, seed, out),
        Command::Evaluate { config, seed, out } => cmd_evaluate(&config, seed, out),
        Command::Compare { config, out } => cmd_compare(&config, out),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    files: BTreeMap<String, PathBuf>,
    histograms: BTreeMap<String, ClassHistogram>,
}

fn cmd_generate(config_path: &Path, out: &Path) -> Result<()> {
    let config = load_generation_config(config_path)?;
    fs::create_dir_all(out).map_err(io_err(out))?;

    let (train, validation, test) = generate_corpus(&config.generator)?;
    let mut files = BTreeMap::new();
    let mut histograms = BTreeMap::new();
    for (name, corpus) in [
        ("train", &train),
        ("validation", &validation),
        ("test", &test),
    ] {
        let path = out.join(format!("{name}.jsonl"));
        save_corpus(corpus, &path)?;
        println!("wrote {} ({} utterances)", path.display(), corpus.len());
        files.insert(name.to_string(), path);
        histograms.insert(name.to_string(), corpus.class_histogram());
    }
    if !config.synthetic_counts.is_empty() {
        let synthetic =
            generate_synthetic(&config.generator, &config.noise, &config.synthetic_counts)?;
        let path = out.join("synthetic.jsonl");
        save_corpus(&synthetic, &path)?;
        println!("wrote {} ({} utterances)", path.display(), synthetic.len());
        files.insert("synthetic".to_string(), path);
        histograms.insert("synthetic".to_string(), synthetic.class_histogram());
    }

    let manifest_path = out.join("manifest.json");
    let manifest = Manifest { files, histograms };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json + "\n").map_err(io_err(&manifest_path))?;
    println!("wrote {}", manifest_path.display());
    Ok(())
}

struct LoadedData {
    train: Corpus,
    validation: Corpus,
    test: Option<Corpus>,
    synthetic: Option<Corpus>,
}

fn load_data(config: &ExperimentConfig) -> Result<LoadedData> {
    Ok(LoadedData {
        train: load_corpus(&config.data.train, Split::Train)?,
        validation: load_corpus(&config.data.validation, Split::Validation)?,
        test: config
            .data
            .test
            .as_ref()
            .map(|p| load_corpus(p, Split::Test))
            .transpose()?,
        synthetic: config
            .data
            .synthetic
            .as_ref()
            .map(|p| load_corpus(p, Split::Train))
            .transpose()?,
    })
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_predictions(model: &Model, corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for utt in &corpus.utterances {
        let (intent, slots) = model.predict(&utt.tokens)?;
        let record = Utterance {
            tokens: utt.tokens.clone(),
            intent,
            slots,
            origin: utt.origin,
        };
        out.push(serde_json::to_string(&record).expect("record serializes"));
    }
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    for line in out {
        writeln!(file, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}

fn run_one_seed(
    config: &ExperimentConfig,
    method: &MethodSpec,
    data: &LoadedData,
    seed: u64,
) -> Result<()> {
    let trainer_cfg = TrainerConfig {
        seed,
        ..config.trainer.clone()
    };
    let run_data = RunData {
        train: &data.train,
        validation: &data.validation,
        synthetic: data.synthetic.as_ref(),
    };
    let outcome = train_method(
        method,
        &run_data,
        &config.model,
        &trainer_cfg,
        config.sampler.batch_size,
    )?;

    let run_dir = config.run_dir(seed);
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    outcome.model.save_checkpoint(&run_dir.join("checkpoint.json"))?;
    write_history(&outcome.history, &run_dir.join("history.jsonl"))?;

    let groups = config.group_map();
    let val_report = evaluate(&outcome.model, &data.validation, &groups)?;
    val_report.write(&run_dir.join("eval_val.jsonl"))?;
    if let Some(test) = &data.test {
        let test_report = evaluate(&outcome.model, test, &groups)?;
        test_report.write(&run_dir.join("eval_test.jsonl"))?;
        write_predictions(&outcome.model, test, &run_dir.join("predictions_test.jsonl"))?;
    }

    let meta = RunMeta {
        method: config.method.clone(),
        seed,
        best_epoch: outcome.best_epoch,
        best_val_semer: outcome.best_val_semer,
        test_path: config.data.test.clone(),
        test_sha256: config
            .data
            .test
            .as_ref()
            .map(|p| sha256_file(p))
            .transpose()?,
    };
    let meta_path = run_dir.join("run_meta.json");
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, json + "\n").map_err(io_err(&meta_path))?;

    println!(
        "{} seed {seed}: best epoch {} (val SemER {:.4}), outputs in {}",
        config.method,
        outcome.best_epoch,
        outcome.best_val_semer,
        run_dir.display()
    );
    Ok(())
}

fn cmd_train(config_path: &Path, seeds: Option<Vec<u64>>, out: Option<PathBuf>) -> Result<()> {
    let mut config = load_experiment_config(config_path)?;
    if let Some(seeds) = seeds {
        config.seeds = seeds;
    }
    if let Some(out) = out {
        config.output_dir = out;
    }
    config.validate()?;
    let method = MethodSpec::of(config.method_name()?);
    if method.requires_synthetic() && config.data.synthetic.is_none() {
        return Err(Error::Config(format!(
            "method {} requires a synthetic corpus path",
            method.name
        )));
    }
    let data = load_data(&config)?;
    for &seed in &config.seeds {
        run_one_seed(&config, &method, &data, seed)?;
    }
    Ok(())
}

fn cmd_evaluate(config_path: &Path, seeds: Option<Vec<u64>>, out: Option<PathBuf>) -> Result<()> {
    let mut config = load_experiment_config(config_path)?;
    if let Some(seeds) = seeds {
        config.seeds = seeds;
    }
    if let Some(out) = out {
        config.output_dir = out;
    }
    config.validate()?;
    let test_path = config
        .data
        .test
        .as_ref()
        .ok_or_else(|| Error::Config("evaluate needs a test corpus path".into()))?;
    let test = load_corpus(test_path, Split::Test)?;
    let groups = config.group_map();
    for &seed in &config.seeds {
        let run_dir = config.run_dir(seed);
        let model = Model::load_checkpoint(&run_dir.join("checkpoint.json"))?;
        let report = evaluate(&model, &test, &groups)?;
        report.write(&run_dir.join("eval_test.jsonl"))?;
        write_predictions(&model, &test, &run_dir.join("predictions_test.jsonl"))?;
        println!(
            "{} seed {seed}: test SemER {:.4}, accuracy {:.4}, F1 {:.4}",
            config.method, report.overall_semer, report.intent_accuracy, report.slot_f1
        );
    }
    Ok(())
}

/// Median of a nonempty list.
fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite semer"));
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CompareRecord {
    Cell {
        method: String,
        group: String,
        median_semer: f64,
        baseline_median: f64,
        relative_change: Option<f64>,
    },
    Seed {
        method: String,
        group: String,
        seed: u64,
        semer: f64,
    },
}

struct MethodRuns {
    config: ExperimentConfig,
    reports: BTreeMap<u64, EvalReport>,
}

fn load_method_runs(config: ExperimentConfig) -> Result<MethodRuns> {
    let mut reports = BTreeMap::new();
    for &seed in &config.seeds {
        let run_dir = config.run_dir(seed);
        let report_path = run_dir.join("eval_test.jsonl");
        if !report_path.exists() {
            return Err(Error::Config(format!(
                "missing test report {} (train or evaluate this run first)",
                report_path.display()
            )));
        }
        reports.insert(seed, EvalReport::read(&report_path)?);
    }
    Ok(MethodRuns { config, reports })
}

fn check_runs_comparable(runs: &[MethodRuns]) -> Result<()> {
    let reference = &runs[0].config;
    let ref_seeds: Vec<u64> = {
        let mut s = reference.seeds.clone();
        s.sort_unstable();
        s
    };
    let mut reference_sha: Option<String> = None;
    for method_runs in runs {
        let mut seeds = method_runs.config.seeds.clone();
        seeds.sort_unstable();
        if seeds != ref_seeds {
            return Err(Error::Config(format!(
                "seed sets differ: {} has {:?}, {} has {:?}",
                reference.method, ref_seeds, method_runs.config.method, seeds
            )));
        }
        for &seed in &method_runs.config.seeds {
            let meta_path = method_runs.config.run_dir(seed).join("run_meta.json");
            let json = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
            let meta: RunMeta =
                serde_json::from_str(&json).map_err(|e| Error::MalformedRecord {
                    path: meta_path.clone(),
                    line: 0,
                    message: e.to_string(),
                })?;
            let sha = meta.test_sha256.ok_or_else(|| {
                Error::Config(format!(
                    "{}: run was trained without a test corpus",
                    meta_path.display()
                ))
            })?;
            match &reference_sha {
                None => reference_sha = Some(sha),
                Some(reference_sha) if *reference_sha != sha => {
                    return Err(Error::Config(format!(
                        "{} seed {seed} was evaluated on different test data",
                        method_runs.config.method
                    )));
                }
                Some(_) => {}
            }
        }
    }
    Ok(())
}

fn cmd_compare(config_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let config_files: Vec<PathBuf> = if config_path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(config_path)
            .map_err(io_err(config_path))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
            .collect();
        files.sort();
        files
    } else {
        vec![config_path.to_path_buf()]
    };
    if config_files.is_empty() {
        return Err(Error::Config(format!(
            "no experiment configs found in {}",
            config_path.display()
        )));
    }

    let mut runs = Vec::new();
    for file in &config_files {
        let config = load_experiment_config(file)?;
        config.validate()?;
        runs.push(load_method_runs(config)?);
    }
    check_runs_comparable(&runs)?;

    let baseline_index = runs
        .iter()
        .position(|r| r.config.method == "Baseline")
        .ok_or_else(|| Error::Config("missing baseline: no Baseline config among runs".into()))?;

    // Column order: the baseline config's group order.
    let group_names: Vec<String> = runs[baseline_index]
        .config
        .groups
        .iter()
        .map(|g| g.name.clone())
        .collect();
    if group_names.is_empty() {
        return Err(Error::Config("configs define no intent groups".into()));
    }

    let group_medians = |method_runs: &MethodRuns, group: &str| -> (Vec<(u64, f64)>, f64) {
        let per_seed: Vec<(u64, f64)> = method_runs
            .reports
            .iter()
            .map(|(&seed, report)| (seed, report.group_semer.get(group).copied().unwrap_or(0.0)))
            .collect();
        let values: Vec<f64> = per_seed.iter().map(|(_, v)| *v).collect();
        let median_value = median(&values);
        (per_seed, median_value)
    };

    let mut records = Vec::new();
    let mut table_rows: Vec<(String, Vec<String>)> = Vec::new();

    // Baseline row reports absolute SemER (scaled to percent for display).
    let mut baseline_medians = BTreeMap::new();
    {
        let method_runs = &runs[baseline_index];
        let mut cells = Vec::new();
        for group in &group_names {
            let (per_seed, median_value) = group_medians(method_runs, group);
            for (seed, semer) in &per_seed {
                records.push(CompareRecord::Seed {
                    method: "Baseline".into(),
                    group: group.clone(),
                    seed: *seed,
                    semer: *semer,
                });
            }
            baseline_medians.insert(group.clone(), median_value);
            cells.push(format!("{:.2}", 100.0 * median_value));
        }
        table_rows.push(("Baseline (SemER %)".to_string(), cells));
    }

    for (index, method_runs) in runs.iter().enumerate() {
        if index == baseline_index {
            continue;
        }
        let mut cells = Vec::new();
        for group in &group_names {
            let (per_seed, median_value) = group_medians(method_runs, group);
            for (seed, semer) in &per_seed {
                records.push(CompareRecord::Seed {
                    method: method_runs.config.method.clone(),
                    group: group.clone(),
                    seed: *seed,
                    semer: *semer,
                });
            }
            let baseline_median = baseline_medians[group];
            let change = if baseline_median > 0.0 {
                Some(relative_change(baseline_median, median_value)?)
            } else {
                None
            };
            records.push(CompareRecord::Cell {
                method: method_runs.config.method.clone(),
                group: group.clone(),
                median_semer: median_value,
                baseline_median,
                relative_change: change,
            });
            cells.push(match change {
                Some(c) => format!("{c:+.2}"),
                None => "--".to_string(),
            });
        }
        table_rows.push((method_runs.config.method.clone(), cells));
    }

    let table = render_table(&group_names, &table_rows);
    print!("{table}");

    let out_dir = out.unwrap_or_else(|| runs[baseline_index].config.output_dir.clone());
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let table_path = out_dir.join("compare_table.txt");
    fs::write(&table_path, &table).map_err(io_err(&table_path))?;
    let records_path = out_dir.join("comparison.jsonl");
    let mut file = fs::File::create(&records_path).map_err(io_err(&records_path))?;
    for record in &records {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(file, "{line}").map_err(io_err(&records_path))?;
    }
    println!(
        "wrote {} and {}",
        table_path.display(),
        records_path.display()
    );
    Ok(())
}

fn render_table(group_names: &[String], rows: &[(String, Vec<String>)]) -> String {
    let method_width = rows
        .iter()
        .map(|(name, _)| name.len())
        .chain(["Method".len()])
        .max()
        .unwrap();
    let col_width = group_names
        .iter()
        .map(String::len)
        .chain(rows.iter().flat_map(|(_, cells)| cells.iter().map(String::len)))
        .max()
        .unwrap()
        .max(8);

    let mut out = String::new();
    out.push_str(&format!("{:<method_width$}", "Method"));
    for group in group_names {
        out.push_str(&format!("  {group:>col_width$}"));
    }
    out.push('\n');
    out.push_str(&"-".repeat(method_width + group_names.len() * (col_width + 2)));
    out.push('\n');
    for (name, cells) in rows {
        out.push_str(&format!("{name:<method_width$}"));
        for cell in cells {
            out.push_str(&format!("  {cell:>col_width$}"));
        }
        out.push('\n');
    }
    out
}
