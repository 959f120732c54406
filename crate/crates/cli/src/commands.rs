use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use scalla::checkpoint::{Checkpoint, SurrogateSection as CheckpointSurrogate};
use scalla::data::idx::load_idx;
use scalla::data::{Dataset, Role};
use scalla::experiment::{class_targets, desk_data, evaluate_method, ExperimentData, Method};
use scalla::lla::{tune_prior, Likelihood};
use scalla::metrics::{format_key_values, format_table};
use scalla::models::{accuracy, train_map, ORACLE_LIMIT};
use scalla::network::NetworkSpec;
use scalla::params::ParamVector;
use scalla::surrogate::{kernel_error, train_surrogate, SurrogateSpec};
use scalla::Error;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, ExperimentConfig};
use crate::CliError;

pub const MAP_CHECKPOINT: &str = "map.ckpt";
pub const PRIOR_FILE: &str = "prior.toml";

pub fn surrogate_checkpoint(biased: bool) -> &'static str {
    if biased {
        "surrogate-biased.ckpt"
    } else {
        "surrogate.ckpt"
    }
}

/// Exclusive ownership of an output directory for the lifetime of a command.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(out: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out)
            .map_err(|e| CliError::config(format!("cannot create output directory {}: {e}", out.display())))?;
        let path = out.join(".scalla.lock");
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|_| {
                CliError::config(format!(
                    "output directory {} is in use (remove {} if no other run is active)",
                    out.display(),
                    path.display()
                ))
            })?;
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn echo_config(config: &ExperimentConfig, out: &Path, command: &str) -> Result<(), CliError> {
    write(&out.join(format!("{command}.resolved.toml")), config.to_toml()?)
}

fn load_checkpoint(path: &Path, hint: &str) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::config(format!("checkpoint {} not found; {hint}", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn idx_set(config: &ExperimentConfig, images: &str, labels: &str, role: Role, limit: usize) -> Result<Dataset, CliError> {
    let idx = &config.dataset.idx;
    let (ip, lp) = (idx.path(images), idx.path(labels));
    for p in [&ip, &lp] {
        if !p.exists() {
            return Err(CliError::config(format!("dataset not found: {}", p.display())));
        }
    }
    let data = load_idx(&ip, &lp)?.with_role(role);
    Ok(if limit > 0 && limit < data.len() {
        data.truncated(limit)
    } else {
        data
    })
}

pub fn load_data(config: &ExperimentConfig) -> Result<ExperimentData, CliError> {
    match config.dataset.kind {
        DatasetKind::TwoMoons => Ok(desk_data(&config.dataset.synthetic, config.seed())?),
        DatasetKind::Idx => {
            let idx = &config.dataset.idx;
            let train = idx_set(config, &idx.train_images, &idx.train_labels, Role::Train, idx.max_train)?;
            let test = idx_set(config, &idx.test_images, &idx.test_labels, Role::Test, idx.max_eval)?;
            let context = idx_set(config, &idx.context_images, &idx.context_labels, Role::Context, idx.max_eval)?;
            let ood = idx_set(config, &idx.ood_images, &idx.ood_labels, Role::Ood, idx.max_eval)?;
            Ok(ExperimentData::new(train, test, context, ood)?)
        }
    }
}

fn check_spec(config: &ExperimentConfig, ckpt: &Checkpoint) -> Result<NetworkSpec, CliError> {
    let spec = config.model.network()?;
    if ckpt.header.spec != spec {
        return Err(CliError::config("MAP checkpoint was trained with a different model block"));
    }
    Ok(spec)
}

fn oracle_ok(p: usize) -> bool {
    p.checked_mul(p).is_some_and(|pp| pp <= ORACLE_LIMIT)
}

pub fn train_map_cmd(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let _lock = DirLock::acquire(out)?;
    echo_config(config, out, "train-map")?;
    let seed = config.seed();
    let data = load_data(config)?;
    let spec = config.model.network()?;
    let fit = train_map(&spec, &data.train, config.map.sigma0, &config.map.to_core(seed))?;
    let acc = accuracy(&spec, &fit.theta, &data.test)?;
    Checkpoint::map(&spec, &fit.theta, seed)?
        .with_metadata("map_sigma0", config.map.sigma0)
        .with_metadata("epochs", config.map.epochs as u64)
        .with_metadata("test_accuracy", acc)
        .save(out.join(MAP_CHECKPOINT))?;
    let mut trace = String::from("# epoch loss\n");
    for (e, l) in fit.trace.iter().enumerate() {
        let _ = writeln!(trace, "{e} {l:?}");
    }
    write(&out.join("map-trace.txt"), trace)?;
    println!("MAP training done: test accuracy {:.2}%", 100.0 * acc);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorRecord {
    pub sigma0: f64,
    /// `tune_prior` or `map-prior` when the evidence is out of oracle scale.
    pub source: String,
    pub grid: Vec<f64>,
    pub evidence: Vec<f64>,
}

fn tune(config: &ExperimentConfig, spec: &NetworkSpec, theta: &ParamVector, data: &ExperimentData) -> Result<PriorRecord, CliError> {
    if !oracle_ok(spec.param_count()) {
        return Ok(PriorRecord {
            sigma0: config.map.sigma0,
            source: "map-prior".into(),
            grid: vec![],
            evidence: vec![],
        });
    }
    let search = tune_prior(
        spec,
        theta,
        Likelihood::Softmax,
        &data.train.inputs,
        &class_targets(&data.train),
        &config.prior.grid,
    )?;
    Ok(PriorRecord {
        sigma0: search.sigma0,
        source: "tune_prior".into(),
        grid: search.evidence.iter().map(|e| e.0).collect(),
        evidence: search.evidence.iter().map(|e| e.1).collect(),
    })
}

pub fn fit_surrogate_cmd(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let biased = config.surrogate.biased;
    let data_needed = biased || config.surrogate.context_batch_size > 0;
    if data_needed && config.dataset.kind == DatasetKind::TwoMoons && config.dataset.synthetic.n_context == 0 {
        return Err(CliError::config("biased surrogate training needs a context dataset (n_context = 0)"));
    }
    let _lock = DirLock::acquire(out)?;
    echo_config(config, out, "fit-surrogate")?;
    let seed = config.seed();
    let map = load_checkpoint(&out.join(MAP_CHECKPOINT), "run train-map first")?;
    let spec = check_spec(config, &map)?;
    let data = load_data(config)?;

    let prior = tune(config, &spec, &map.params, &data)?;
    write(
        &out.join(PRIOR_FILE),
        toml::to_string(&prior).map_err(|e| CliError::runtime(e.to_string()))?,
    )?;

    let core = config.surrogate.to_core(seed);
    let fit = train_surrogate(&spec, &map.params, &data.train.inputs, &data.context.inputs, &core)?;
    let grid: Vec<Vec<f64>> = data.test.inputs.iter().take(config.surrogate.kernel_grid).cloned().collect();
    let errors = match (
        kernel_error(&SurrogateSpec::from_base(&spec, core.m, seed)?, &spec, &map.params, &grid),
        kernel_error(&fit.surrogate, &spec, &map.params, &grid),
    ) {
        (Ok(e0), Ok(e1)) => Some((e0, e1)),
        (Err(Error::OracleScale { .. }), _) | (_, Err(Error::OracleScale { .. })) => None,
        (Err(e), _) | (_, Err(e)) => return Err(e.into()),
    };

    let section = CheckpointSurrogate {
        m: core.m,
        classes: fit.surrogate.classes,
        base_checkpoint: MAP_CHECKPOINT.into(),
        biased,
        context_id: context_id(config),
        sigma0: prior.sigma0,
    };
    let mut ckpt = Checkpoint::surrogate(&fit.surrogate, seed, section)?
        .with_metadata("steps", core.steps as u64)
        .with_metadata("final_loss", fit.trace.last().copied().unwrap_or(f64::NAN));
    if let Some((e0, e1)) = errors {
        ckpt = ckpt.with_metadata("kernel_error_init", e0).with_metadata("kernel_error", e1);
    }
    ckpt.save(out.join(surrogate_checkpoint(biased)))?;

    let stem = surrogate_checkpoint(biased).trim_end_matches(".ckpt");
    let mut trace = String::from("# step loss\n");
    for (s, l) in fit.trace.iter().enumerate() {
        let _ = writeln!(trace, "{s} {l:?}");
    }
    write(&out.join(format!("{stem}-trace.txt")), trace)?;
    match errors {
        Some((e0, e1)) => println!("surrogate fitted: sigma0 = {}, kernel error {e0:.4} -> {e1:.4}", prior.sigma0),
        None => println!("surrogate fitted: sigma0 = {} (kernel error skipped: oracle scale exceeded)", prior.sigma0),
    }
    Ok(())
}

fn context_id(config: &ExperimentConfig) -> String {
    match config.dataset.kind {
        DatasetKind::TwoMoons => format!("ring-{}", config.dataset.synthetic.context_radius),
        DatasetKind::Idx => config.dataset.idx.context_images.clone(),
    }
}

pub fn evaluate_cmd(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let methods = &config.evaluation.methods;
    if methods.is_empty() {
        return Err(CliError::config("evaluation.methods is empty"));
    }
    let _lock = DirLock::acquire(out)?;
    echo_config(config, out, "evaluate")?;
    let seed = config.seed();
    let map = load_checkpoint(&out.join(MAP_CHECKPOINT), "run train-map first")?;
    let spec = check_spec(config, &map)?;
    if methods.contains(&Method::LlaExact) && !oracle_ok(spec.param_count()) {
        return Err(CliError::config(format!(
            "lla-exact needs a {p}x{p} GGN precision, beyond the oracle limit; use the scalla methods instead",
            p = spec.param_count()
        )));
    }
    let data = load_data(config)?;
    let needs_prior = methods.iter().any(|m| *m != Method::Map);
    let sigma0 = if !needs_prior {
        config.map.sigma0
    } else {
        let path = out.join(PRIOR_FILE);
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| CliError::config(e.to_string()))?;
            toml::from_str::<PriorRecord>(&text)
                .map_err(|e| CliError::config(format!("invalid {}: {e}", path.display())))?
                .sigma0
        } else {
            tune(config, &spec, &map.params, &data)?.sigma0
        }
    };
    let eval = config.evaluation.to_core(seed);
    let mut rows = Vec::with_capacity(methods.len());
    for &method in methods {
        let surrogate = match method {
            Method::Scalla | Method::ScallaBiased => {
                let biased = method == Method::ScallaBiased;
                let hint = format!("run fit-surrogate with surrogate.biased = {biased}");
                Some(load_checkpoint(&out.join(surrogate_checkpoint(biased)), &hint)?.to_surrogate()?)
            }
            _ => None,
        };
        rows.push(evaluate_method(method, &spec, &map.params, sigma0, surrogate.as_ref(), &data, &eval)?);
    }
    let table = format_table(&rows);
    write(&out.join("report.txt"), &table)?;
    write(&out.join("report.kv"), format_key_values(&rows))?;
    print!("{table}");
    Ok(())
}
