use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rlpf::checkpoint::Checkpoint;
use rlpf::data::{self, Manifest};
use rlpf::methods::{Built, Method};
use rlpf::params::ParameterStore;
use rlpf::rng::{derive_key, purpose};
use rlpf::ssm::{generate_dataset, Dataset};
use rlpf::training::{self, evaluate, EpochMetrics, Evaluation, TEST_KEY};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const SPLITS: [&str; 3] = ["train", "validation", "test"];

pub fn load_config(overrides: &crate::Overrides) -> Result<ExperimentConfig, CliError> {
    let mut config = match &overrides.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::User(format!("cannot read {}: {e}", path.display())))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Some(jobs) = overrides.jobs {
        config.jobs = jobs;
    }
    if let Some(output) = &overrides.output {
        config.output = output.clone();
    }
    if let Some(method) = &overrides.method {
        config.method = method.clone();
    }
    if let Some(experiment) = &overrides.experiment {
        config.experiment = experiment.parse()?;
    }
    config.validate()?;
    Ok(config)
}

pub fn data_dir(config: &ExperimentConfig) -> PathBuf {
    config.output.join("data")
}

pub fn method_dir(config: &ExperimentConfig) -> PathBuf {
    config.output.join(&config.method)
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::User(format!("cannot create {}: {e}", path.display())))
}

/// Simulates the dataset and writes one CSV per split (and the packed form
/// if configured) plus `manifest.toml`.
pub fn generate(config: &ExperimentConfig) -> Result<Manifest, CliError> {
    let data = generate_dataset(
        &config.dynamic(),
        &config.bank(),
        config.n_trajectories,
        config.t_final,
        derive_key(config.seed, &[purpose::DATASET]),
    )
    .map_err(|e| CliError::User(e.to_string()))?;
    let dir = data_dir(config);
    create_dir(&dir)?;
    let mut splits = Vec::new();
    for (name, trs) in SPLITS.iter().zip([&data.train, &data.validation, &data.test]) {
        let mut bytes = Vec::new();
        data::write_csv(trs, &mut bytes)?;
        let file = format!("{name}.csv");
        let hash = data::write_hashed(&dir.join(&file), &bytes)?;
        splits.push((name.to_string(), file, trs.len(), hash));
        if config.packed {
            let mut packed = Vec::new();
            data::write_packed(trs, &mut packed)?;
            let file = format!("{name}.bin");
            let hash = data::write_hashed(&dir.join(&file), &packed)?;
            splits.push((format!("{name}-packed"), file, trs.len(), hash));
        }
    }
    let manifest = Manifest {
        experiment: config.experiment_name().into(),
        seed: config.seed,
        n_regimes: config.n_regimes,
        t_final: config.t_final,
        splits,
    };
    fs::write(dir.join("manifest.toml"), manifest.to_text())?;
    Ok(manifest)
}

pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset, CliError> {
    let dir = data_dir(config);
    let read = |name: &str| -> Result<_, CliError> {
        let path = dir.join(format!("{name}.csv"));
        let file = fs::File::open(&path).map_err(|e| {
            CliError::User(format!(
                "cannot open {} ({e}); run `rlpf generate` first",
                path.display()
            ))
        })?;
        Ok(data::read_csv(std::io::BufReader::new(file))?)
    };
    let dataset = Dataset {
        train: read("train")?,
        validation: read("validation")?,
        test: read("test")?,
    };
    let steps = config.t_final + 1;
    if [&dataset.train, &dataset.validation, &dataset.test]
        .iter()
        .flat_map(|s| s.iter())
        .any(|t| t.len() != steps || t.k.iter().any(|&k| k >= config.n_regimes))
    {
        return Err(CliError::User(
            "dataset does not match the config's t_final or n_regimes".into(),
        ));
    }
    Ok(dataset)
}

fn build(config: &ExperimentConfig) -> Result<(Method, Built), CliError> {
    let method = config.method()?;
    Ok((method, method.build(&config.bank(), &config.dynamic())))
}

pub fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "train_loss",
        "elbo_term",
        "mse_term",
        "validation_mse",
        "wall_time_s",
    ])?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for m in metrics {
        w.write_record([
            m.epoch.to_string(),
            m.train_loss.to_string(),
            opt(m.elbo_term),
            opt(m.mse_term),
            m.validation_mse.to_string(),
            format!("{:.3}", m.wall_time_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Trains the configured method; writes `checkpoint.bin` and `metrics.csv`.
pub fn train(config: &ExperimentConfig) -> Result<Checkpoint, CliError> {
    let (method, built) = build(config)?;
    let Some(learner) = built.learner() else {
        return Err(CliError::User(format!(
            "{method} runs on the true system and has nothing to train; use `rlpf eval`"
        )));
    };
    let data = load_dataset(config)?;
    let outcome = training::train(learner, &data, &config.train_config(), config.hash())?;
    let dir = method_dir(config);
    create_dir(&dir)?;
    fs::write(dir.join("checkpoint.bin"), outcome.best.to_bytes())?;
    write_metrics(&dir.join("metrics.csv"), &outcome.metrics)?;
    Ok(outcome.best)
}

/// Evaluates on the test split with the evaluation particle count; writes
/// `eval.csv` and `per_step.csv`.
pub fn eval(config: &ExperimentConfig) -> Result<Evaluation, CliError> {
    let (method, built) = build(config)?;
    let dir = method_dir(config);
    let params = if built.learner().is_some() {
        let path = dir.join("checkpoint.bin");
        let bytes = fs::read(&path).map_err(|e| {
            CliError::User(format!(
                "cannot read {} ({e}); run `rlpf train` first",
                path.display()
            ))
        })?;
        let checkpoint = Checkpoint::from_bytes(&bytes)?;
        checkpoint.check_config(&config.hash())?;
        checkpoint.params
    } else {
        ParameterStore::new()
    };
    let data = load_dataset(config)?;
    let train = config.train_config();
    let result = evaluate(
        built.estimator(),
        &params,
        &data.test,
        train.eval_particles,
        config.seed,
        &TEST_KEY,
        train.chunk,
    )?;
    create_dir(&dir)?;
    let mut w = csv::Writer::from_path(dir.join("eval.csv"))?;
    w.write_record(["method", "experiment", "mse", "particles", "trajectories"])?;
    w.write_record([
        method.name().to_string(),
        config.experiment_name().to_string(),
        result.mse.to_string(),
        train.eval_particles.to_string(),
        data.test.len().to_string(),
    ])?;
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("per_step.csv"))?;
    w.write_record(["t", "mse"])?;
    for (t, v) in result.per_step.iter().enumerate() {
        w.write_record([t.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(result)
}

/// Grid search; writes the best cell's checkpoint and metrics, `grid.csv`
/// with every cell, and `best.toml`, the config with the chosen values.
pub fn grid(config: &ExperimentConfig) -> Result<ExperimentConfig, CliError> {
    let (method, built) = build(config)?;
    let Some(learner) = built.learner() else {
        return Err(CliError::User(format!("{method} has nothing to train")));
    };
    let data = load_dataset(config)?;
    let grid = config.grid();
    let cells = grid.cells(&config.train_config());
    // Each cell is trained under the config it would be written as, so its
    // checkpoint carries the matching hash.
    let cell_configs: Vec<ExperimentConfig> = cells
        .iter()
        .map(|c| {
            let mut e = config.clone();
            e.train.lambda = c.lambda;
            e.train.alpha = c.alpha;
            e.train.learning_rate = c.learning_rate;
            e
        })
        .collect();
    let results = training::parallel_map(&cells, config.jobs, |cell| {
        let index = cells.iter().position(|c| c == cell).expect("cell from list");
        training::train(learner, &data, cell, cell_configs[index].hash())
    });
    let summary: Vec<_> = cells
        .iter()
        .zip(&results)
        .map(|(c, r)| (*c, r.as_ref().ok().map(|o| o.best.validation_mse)))
        .collect();
    let dir = method_dir(config);
    create_dir(&dir)?;
    let mut w = csv::Writer::from_path(dir.join("grid.csv"))?;
    w.write_record(["lambda", "alpha", "learning_rate", "seed", "validation_mse"])?;
    for (c, v) in &summary {
        w.write_record([
            c.lambda.to_string(),
            c.alpha.to_string(),
            c.learning_rate.to_string(),
            c.seed.to_string(),
            v.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    let Some(index) = training::select_cell(&summary) else {
        let failures = results
            .into_iter()
            .filter_map(|r| r.err().map(|e| e.to_string()))
            .collect();
        return Err(training::TrainError::AllCellsFailed(failures).into());
    };
    let outcome = results.into_iter().nth(index).expect("in range").expect("selected cell succeeded");
    let best = cell_configs[index].clone();
    fs::write(dir.join("checkpoint.bin"), outcome.best.to_bytes())?;
    write_metrics(&dir.join("metrics.csv"), &outcome.metrics)?;
    fs::write(dir.join("best.toml"), best.to_toml())?;
    Ok(best)
}

/// Wall time of one training epoch at the configured batch shape and of one
/// test run on the test split; writes `timing.csv`.
pub fn bench(config: &ExperimentConfig) -> Result<(Option<f64>, f64), CliError> {
    let (method, built) = build(config)?;
    let data = generate_dataset(
        &config.dynamic(),
        &config.bank(),
        config.n_trajectories,
        config.t_final,
        derive_key(config.seed, &[purpose::DATASET]),
    )
    .map_err(|e| CliError::User(e.to_string()))?;
    let train_config = config.train_config();
    let epoch = match built.learner() {
        Some(learner) => {
            let shortened = Dataset {
                validation: data.validation[..1].to_vec(),
                ..data.clone()
            };
            let one = rlpf::training::TrainConfig {
                max_epochs: 1,
                ..train_config
            };
            let start = Instant::now();
            training::train(learner, &shortened, &one, config.hash())?;
            Some(start.elapsed().as_secs_f64())
        }
        None => None,
    };
    let params = built
        .learner()
        .map(|l| l.init(config.seed))
        .unwrap_or_default();
    let start = Instant::now();
    evaluate(
        built.estimator(),
        &params,
        &data.test,
        train_config.eval_particles,
        config.seed,
        &TEST_KEY,
        train_config.chunk,
    )?;
    let test = start.elapsed().as_secs_f64();
    let dir = method_dir(config);
    create_dir(&dir)?;
    let mut w = csv::Writer::from_path(dir.join("timing.csv"))?;
    w.write_record(["method", "train_epoch_s", "test_run_s"])?;
    w.write_record([
        method.name().to_string(),
        epoch.map(|v| format!("{v:.3}")).unwrap_or_default(),
        format!("{test:.3}"),
    ])?;
    w.flush()?;
    println!(
        "{method}: train epoch {} s, test run {test:.3} s",
        epoch.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into())
    );
    Ok((epoch, test))
}

/// The config of pipeline repeat `r`: its own seed and subdirectory.
pub fn repeat_config(config: &ExperimentConfig, r: usize) -> ExperimentConfig {
    ExperimentConfig {
        seed: derive_key(config.seed, &[purpose::REPEAT, r as u64]),
        output: config.output.join(format!("repeat-{r}")),
        ..config.clone()
    }
}

/// For every repeat: generate, then train (or grid-search) and evaluate
/// every method; finally write the table. Repeats run on `jobs` threads.
pub fn pipeline(config: &ExperimentConfig) -> Result<(), CliError> {
    let methods = config.pipeline_methods()?;
    let repeats: Vec<usize> = (0..config.repeats).collect();
    let inner_jobs = 1;
    let results = training::parallel_map(&repeats, config.jobs, |&r| -> Result<(), CliError> {
        let base = ExperimentConfig {
            jobs: inner_jobs,
            ..repeat_config(config, r)
        };
        generate(&base)?;
        for &m in &methods {
            let mut run = ExperimentConfig {
                method: m.name().into(),
                ..base.clone()
            };
            if m.build(&run.bank(), &run.dynamic()).learner().is_some() {
                if config.grid_search {
                    run = grid(&run)?;
                } else {
                    train(&run)?;
                }
            }
            let e = eval(&run)?;
            println!("repeat {r} {m}: test MSE {:.4}", e.mse);
        }
        Ok(())
    });
    for r in results {
        r?;
    }
    let t = crate::table::collect(&config.output, &methods)?;
    crate::table::write(&config.output, &t)?;
    print!("{}", crate::table::render_text(&t));
    Ok(())
}
