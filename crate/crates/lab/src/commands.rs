//! What each subcommand does, minus argument parsing.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lco_core::converge::{converge_experiment, AffineLogits, ConvergeConfig, ConvergeReport};
use lco_core::dist::AdvantageVector;
use lco_core::linalg::Matrix;
use lco_core::model::{Init, ModelFamily, PolicyModel};
use lco_core::trainer::{DynamicsRecord, Trainer, TrainerConfig};
use lco_core::{LcoError, ObjectiveKind};

use crate::config::{ConfigError, ConvergeFamily, ConvergeSpec, ExperimentConfig, ModelSpec};
use crate::dynamics::{summarize, DynamicsSummary, SUMMARY_HEADER};
use crate::svg::{render, Series};
use crate::tables::{fmt_float, model_dump, write_dynamics_csv, CsvColumns};

#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: String, column: String },
    #[error("{0}")]
    Core(#[from] LcoError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
}

impl CommandError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CommandError::Config(_) | CommandError::MissingColumn { .. } => 2,
            CommandError::Core(LcoError::StepSizeTooLarge { .. }) => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CommandError + '_ {
    move |source| CommandError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> CommandError + '_ {
    move |source| CommandError::Csv {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CommandError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn ensure_dir(dir: &Path) -> Result<(), CommandError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn build_model(
    spec: &ModelSpec,
    env: &lco_core::model::ToyEnvironment,
) -> Result<PolicyModel, LcoError> {
    let mut model = PolicyModel::for_env(spec.family, env, &spec.init, spec.init_seed)?;
    if let Some(bias) = &spec.init_logits {
        model.add_output_bias(bias)?;
    }
    Ok(model)
}

struct TrainSetup<'a> {
    model: PolicyModel,
    env: &'a lco_core::model::ToyEnvironment,
    trainer: &'a TrainerConfig,
}

fn train_setup<'a>(cfg: &'a ExperimentConfig, path: &Path) -> Result<TrainSetup<'a>, CommandError> {
    let env = cfg.need(path, "env", &cfg.env)?;
    let spec = cfg.need(path, "model", &cfg.model)?;
    let trainer = cfg.need(path, "trainer", &cfg.trainer)?;
    let model = build_model(spec, env).map_err(|e| ConfigError {
        path: path.display().to_string(),
        line: None,
        field: Some("model".into()),
        message: e.to_string(),
    })?;
    Ok(TrainSetup {
        model,
        env,
        trainer,
    })
}

pub fn run_training(
    model: PolicyModel,
    env: &lco_core::model::ToyEnvironment,
    config: TrainerConfig,
) -> Result<(Vec<DynamicsRecord>, PolicyModel), LcoError> {
    let mut t = Trainer::new(model, env.clone(), config)?;
    let records = t.run()?;
    Ok((records, t.model().clone()))
}

fn csv_bytes(records: &[DynamicsRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_dynamics_csv(&mut buf, records).expect("writing to memory");
    buf
}

fn grad_series(label: &str, records: &[DynamicsRecord]) -> Vec<Series> {
    vec![
        Series {
            label: format!("{label}grad_norm_param"),
            points: records
                .iter()
                .map(|r| (r.step as f64, r.grad_norm_param))
                .collect(),
        },
        Series {
            label: format!("{label}bound"),
            points: records
                .iter()
                .map(|r| (r.step as f64, r.bound.unwrap_or(f64::NAN)))
                .collect(),
        },
    ]
}

/// `train`: writes `dynamics.csv`, `model.txt` and, with plotting on, `dynamics.svg`.
pub fn train(config_path: &Path, out: &Path) -> Result<Vec<DynamicsRecord>, CommandError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let setup = train_setup(&cfg, config_path)?;
    let (records, model) = run_training(setup.model, setup.env, setup.trainer.clone())?;
    ensure_dir(out)?;
    write_file(&out.join("dynamics.csv"), &csv_bytes(&records))?;
    write_file(&out.join("model.txt"), model_dump(&model).as_bytes())?;
    if cfg.plot {
        write_file(
            &out.join("dynamics.svg"),
            render(&grad_series("", &records), "step", "gradient norm").as_bytes(),
        )?;
    }
    Ok(records)
}

pub fn dynamics_file_name(kind: ObjectiveKind) -> String {
    format!("dynamics_{}.csv", kind.name().to_ascii_lowercase())
}

/// `dynamics`: the same run under two objectives, executed in parallel.
pub fn dynamics(
    config_path: &Path,
    out: &Path,
) -> Result<Vec<(DynamicsSummary, Vec<DynamicsRecord>)>, CommandError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let spec = cfg.need(config_path, "dynamics", &cfg.dynamics)?.clone();
    let setup = train_setup(&cfg, config_path)?;
    if spec.compare[0] == spec.compare[1] {
        return Err(ConfigError {
            path: config_path.display().to_string(),
            line: None,
            field: Some("dynamics.compare".into()),
            message: "the two objectives must differ".into(),
        }
        .into());
    }
    let mut configs = Vec::new();
    for kind in spec.compare {
        let c = TrainerConfig {
            objective: kind,
            ..setup.trainer.clone()
        };
        c.validate(setup.env).map_err(|e| ConfigError {
            path: config_path.display().to_string(),
            line: None,
            field: Some("dynamics.compare".into()),
            message: e.to_string(),
        })?;
        configs.push(c);
    }
    let runs: Vec<Result<Vec<DynamicsRecord>, LcoError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = configs
            .into_iter()
            .map(|c| {
                let model = setup.model.clone();
                let env = setup.env;
                scope.spawn(move || run_training(model, env, c).map(|(r, _)| r))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    });

    ensure_dir(out)?;
    let mut results = Vec::new();
    let mut summary = SUMMARY_HEADER.join(",");
    summary.push('\n');
    let mut series = Vec::new();
    for (kind, run) in spec.compare.into_iter().zip(runs) {
        let records = run?;
        write_file(&out.join(dynamics_file_name(kind)), &csv_bytes(&records))?;
        let s = summarize(kind, &records, spec.smoothing_window);
        summary.push_str(&s.csv_row());
        summary.push('\n');
        series.extend(grad_series(&format!("{} ", kind.name()), &records));
        results.push((s, records));
    }
    write_file(&out.join("summary.csv"), summary.as_bytes())?;
    if cfg.plot {
        write_file(
            &out.join("dynamics.svg"),
            render(&series, "step", "gradient norm").as_bytes(),
        )?;
    }
    Ok(results)
}

/// The affine logit map, behavioral logits and advantages of a convergence run.
pub fn converge_inputs(
    spec: &ConvergeSpec,
    seed: u64,
) -> Result<(AffineLogits, Vec<f64>, AdvantageVector), LcoError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = spec.vocab;
    let map = match spec.family {
        ConvergeFamily::Random => {
            let j = Matrix::from_fn(v, spec.params, |_, _| rng.random_range(-1.0..1.0));
            AffineLogits::new(vec![0.0; v], j)?
        }
        ConvergeFamily::Tabular | ConvergeFamily::Linear => {
            let family = if spec.family == ConvergeFamily::Tabular {
                ModelFamily::Tabular
            } else {
                ModelFamily::Linear
            };
            let model = PolicyModel::new(family, v, spec.horizon, &Init::Zeros, seed)?;
            AffineLogits::from_model(&model, &spec.state)?
        }
    };
    let z_old = spec
        .z_old
        .clone()
        .unwrap_or_else(|| (0..v).map(|_| rng.random_range(-2.0..2.0)).collect());
    let a = match &spec.advantages {
        Some(a) => a.clone(),
        None => (0..v).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    Ok((map, z_old, AdvantageVector::dense(a)?))
}

pub const CONVERGE_HEADER: [&str; 6] = ["k", "loss", "bound", "rho", "residual_inf", "asserted"];

/// `converge`: writes `converge.csv`; the caller turns a failed report into exit 1.
pub fn converge(config_path: &Path, out: &Path) -> Result<ConvergeReport, CommandError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let spec = cfg.need(config_path, "converge", &cfg.converge)?;
    let (map, z_old, a) = converge_inputs(spec, cfg.seed).map_err(|e| match e {
        LcoError::InvalidInput(_) | LcoError::InvalidState(_) => {
            CommandError::Config(ConfigError {
                path: config_path.display().to_string(),
                line: None,
                field: Some("converge".into()),
                message: e.to_string(),
            })
        }
        other => other.into(),
    })?;
    let report = converge_experiment(
        &map,
        &z_old,
        &a,
        &ConvergeConfig {
            objective: spec.objective,
            learning_rate: spec.learning_rate,
            beta: spec.beta,
            steps: spec.steps,
        },
    )?;
    ensure_dir(out)?;
    let path = out.join("converge.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CONVERGE_HEADER).map_err(csv_err(&path))?;
    for r in &report.rows {
        w.write_record([
            r.k.to_string(),
            fmt_float(r.loss),
            fmt_float(r.bound),
            fmt_float(report.rho),
            fmt_float(r.residual_inf),
            r.asserted.to_string(),
        ])
        .map_err(csv_err(&path))?;
    }
    let bytes = w.into_inner().map_err(|e| CommandError::Io {
        path: path.display().to_string(),
        source: e.into_error(),
    })?;
    write_file(&path, &bytes)?;
    if cfg.plot {
        let series = ["loss", "bound"]
            .iter()
            .map(|name| Series {
                label: name.to_string(),
                points: report
                    .rows
                    .iter()
                    .map(|r| (r.k as f64, if *name == "loss" { r.loss } else { r.bound }))
                    .collect(),
            })
            .collect::<Vec<_>>();
        write_file(
            &out.join("converge.svg"),
            render(&series, "k", "loss").as_bytes(),
        )?;
    }
    Ok(report)
}

/// `plot`: one series per (file, column). Labels carry the file stem only
/// when several files are plotted.
pub fn plot(csvs: &[PathBuf], x: &str, columns: &[String], out: &Path) -> Result<(), CommandError> {
    let mut series = Vec::new();
    for path in csvs {
        let data = CsvColumns::read(path).map_err(csv_err(path))?;
        let missing = |column: &str| CommandError::MissingColumn {
            path: path.display().to_string(),
            column: column.to_string(),
        };
        let xs = data.column(x).ok_or_else(|| missing(x))?;
        for c in columns {
            let ys = data.column(c).ok_or_else(|| missing(c))?;
            let label = if csvs.len() > 1 {
                format!(
                    "{}:{c}",
                    path.file_stem()
                        .map(|s| s.to_string_lossy())
                        .unwrap_or_default()
                )
            } else {
                c.clone()
            };
            series.push(Series {
                label,
                points: xs.iter().copied().zip(ys).collect(),
            });
        }
    }
    let y_label = columns.join(", ");
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_file(out, render(&series, x, &y_label).as_bytes())
}
