//! Experiment drivers: data preparation, per-seed fit and scoring, control
//! runs, ablations and diagnostics exports.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use sampled_rnn_core::control::{
    feature_subspace, fit_lift_projection, lqr_fit, lqr_fit_subspace, mpc_run, ControlTrace, LqrWeights, MpcOptions, OdePlant,
};
use sampled_rnn_core::dynamics::{generate_dataset, RangeScaler, TrajectoryDataset};
use sampled_rnn_core::embedding::{embed_dataset, embed_with, EmbeddingMap};
use sampled_rnn_core::linalg::LstsqOptions;
use sampled_rnn_core::metrics::{ekl, mse};
use sampled_rnn_core::rnn::{
    chunked_horizon_predict, fit_controlled, fit_uncontrolled, DirectRnn, Forecaster,
    InputDictionary, Prediction, SampledRnn,
};
use sampled_rnn_core::{DMatrix, Error as CoreError};

use crate::config::{
    DataConfig, EvaluationConfig, ExperimentConfig, GeneratedData, KoopmanMode, Metric,
    SamplingMode,
};
use crate::error::{Error, Result, Stage, StageContext};
use crate::ingest::ingest_csv;
use crate::io::{create_parent, save_model, write_eigenvalues, write_json, write_pairs, write_trace};

/// Offsets added to `data_seed` for the held-out splits.
pub const TEST_SEED_OFFSET: u64 = 1;
pub const VALIDATION_SEED_OFFSET: u64 = 2;

/// Held-out data ready for scoring, in model coordinates.
#[derive(Debug, Clone)]
pub enum EvalSet {
    /// Closed-loop rollouts from the first state of every trajectory.
    Trajectories {
        data: TrajectoryDataset,
        /// Observations before embedding; scoring happens on these when an
        /// embedding is active.
        observations: Option<TrajectoryDataset>,
    },
    /// A single series scored by chunked rollouts.
    Series { series: DMatrix<f64>, value_dims: usize },
}

/// Data shared by every seed of a run.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: TrajectoryDataset,
    pub validation: Option<EvalSet>,
    pub test: EvalSet,
    pub scaler: Option<RangeScaler>,
    pub embedding: Option<EmbeddingMap>,
}

/// Generate or ingest every split, then normalize and embed using training
/// statistics only.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    match &cfg.data {
        DataConfig::Generated(g) => prepare_generated(cfg, g),
        DataConfig::Csv(c) => {
            let delay = cfg
                .embedding
                .ok_or_else(|| Error::Config("CSV series need a delay embedding".into()))?;
            let ing = ingest_csv(c, &delay).at(Stage::Ingest, None)?;
            let series = |s: crate::ingest::Split| EvalSet::Series {
                series: s.series,
                value_dims: ing.value_dims,
            };
            Ok(PreparedData {
                train: ing.train.embedded,
                validation: ing.validation.map(series),
                test: series(ing.test),
                scaler: ing.scaler,
                embedding: Some(ing.map),
            })
        }
    }
}

/// Raw train, validation and test datasets of a generated config.
pub fn generate_splits(
    g: &GeneratedData,
) -> Result<(TrajectoryDataset, Option<TrajectoryDataset>, TrajectoryDataset)> {
    let train = generate_dataset(&g.system, &g.train, g.data_seed)?;
    let test = generate_dataset(&g.system, &g.test, g.data_seed + TEST_SEED_OFFSET)?;
    let validation = g
        .validation
        .as_ref()
        .map(|v| generate_dataset(&g.system, v, g.data_seed + VALIDATION_SEED_OFFSET))
        .transpose()?;
    Ok((train, validation, test))
}

fn prepare_generated(cfg: &ExperimentConfig, g: &GeneratedData) -> Result<PreparedData> {
    let (mut train, mut validation, mut test) = generate_splits(g).at(Stage::Generate, None)?;
    let mut held_out = |f: &dyn Fn(&TrajectoryDataset) -> sampled_rnn_core::Result<TrajectoryDataset>|
     -> Result<()> {
        test = f(&test)?;
        if let Some(v) = &validation {
            validation = Some(f(v)?);
        }
        Ok(())
    };
    if let Some(dims) = &g.observed_dims {
        train = train.select_state_dims(dims)?;
        held_out(&|d| d.select_state_dims(dims))?;
    }
    let scaler = match g.normalize {
        Some((lo, hi)) => Some(RangeScaler::fit_dataset(&train, lo, hi)?),
        None => None,
    };
    if let Some(s) = &scaler {
        train = s.apply_dataset(&train)?;
        test = s.apply_dataset(&test)?;
        validation = validation.map(|v| s.apply_dataset(&v)).transpose()?;
    }
    let (train, embedding) = match &cfg.embedding {
        Some(delay) => {
            let (emb, map) = embed_dataset(&train, delay)?;
            (emb, Some(map))
        }
        None => (train, None),
    };
    let wrap = |d: TrajectoryDataset| -> Result<EvalSet> {
        Ok(match &embedding {
            Some(map) => EvalSet::Trajectories {
                data: embed_with(&d, map)?,
                observations: Some(d),
            },
            None => EvalSet::Trajectories {
                data: d,
                observations: None,
            },
        })
    };
    Ok(PreparedData {
        validation: validation.map(wrap).transpose()?,
        test: wrap(test)?,
        train,
        scaler,
        embedding,
    })
}

/// A fitted model of either architecture.
#[derive(Debug, Clone)]
pub enum FittedModel {
    Koopman(SampledRnn),
    Direct(DirectRnn),
}

impl FittedModel {
    pub fn koopman(&self) -> Option<&SampledRnn> {
        match self {
            FittedModel::Koopman(m) => Some(m),
            FittedModel::Direct(_) => None,
        }
    }
}

impl Forecaster for FittedModel {
    fn state_dim(&self) -> usize {
        match self {
            FittedModel::Koopman(m) => Forecaster::state_dim(m),
            FittedModel::Direct(m) => m.state_dim(),
        }
    }

    fn rollout(
        &self,
        h0: &[f64],
        steps: usize,
        inputs: Option<&DMatrix<f64>>,
    ) -> sampled_rnn_core::Result<Prediction> {
        match self {
            FittedModel::Koopman(m) => m.rollout(h0, steps, inputs),
            FittedModel::Direct(m) => m.rollout(h0, steps, inputs),
        }
    }
}

/// Sample the dictionaries and solve the outer matrices; returns the model
/// and the wall time of that step alone.
pub fn fit_model(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    seed: u64,
) -> Result<(FittedModel, f64)> {
    let snaps = data.train.snapshots();
    let state_spec = cfg.model.state_dictionary();
    let input_spec = cfg.model.input_dictionary();
    let opts = cfg.model.fit_options();
    let start = Instant::now();
    let model = match (cfg.model.koopman, &snaps.inputs) {
        (KoopmanMode::With, None) => FittedModel::Koopman(fit_uncontrolled(
            &snaps.current,
            &snaps.next,
            None,
            &state_spec,
            &opts,
            seed,
        )?),
        (KoopmanMode::With, Some(x)) => FittedModel::Koopman(fit_controlled(
            &snaps.current,
            &snaps.next,
            x,
            None,
            &state_spec,
            &input_spec,
            &opts,
            seed,
        )?),
        (KoopmanMode::Without, x) => FittedModel::Direct(DirectRnn::fit(
            &snaps,
            &state_spec,
            x.as_ref().map(|_| &input_spec),
            &opts,
            seed,
        )?),
    };
    let seconds = start.elapsed().as_secs_f64();
    let model = match model {
        FittedModel::Koopman(mut m) => {
            if let Some(s) = &data.scaler {
                if s.dim() == m.state_dim() && data.embedding.is_none() {
                    m = m.with_scaler(s.clone())?;
                }
            }
            if let Some(map) = &data.embedding {
                m = m.with_embedding(map.clone())?;
            }
            FittedModel::Koopman(m)
        }
        direct => direct,
    };
    Ok((model, seconds))
}

/// Predicted and true observations of one held-out trajectory or series.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPrediction {
    pub predicted: DMatrix<f64>,
    pub truth: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    /// `f64::INFINITY` when any rollout diverged.
    pub value: f64,
    pub diverged: bool,
    pub predictions: Vec<ScoredPrediction>,
}

fn rollouts<F: Forecaster + ?Sized>(
    model: &F,
    data: &TrajectoryDataset,
    observations: Option<&TrajectoryDataset>,
    embedding: Option<&EmbeddingMap>,
    horizon: Option<usize>,
) -> Result<(Vec<ScoredPrediction>, bool)> {
    let mut out = Vec::with_capacity(data.trajectories.len());
    for (k, traj) in data.trajectories.iter().enumerate() {
        let steps = horizon.map_or(traj.len() - 1, |h| h.min(traj.len() - 1));
        let inputs = traj.inputs.as_ref().map(|x| x.rows(0, steps).into_owned());
        let pred = model.rollout(&traj.state(0), steps, inputs.as_ref())?;
        if pred.diverged_at.is_some() {
            return Ok((out, true));
        }
        let (predicted, truth) = match (embedding, observations) {
            (Some(map), Some(obs)) => {
                let raw = &obs.trajectories[k].states;
                (
                    map.latest_observation(&pred.states)?,
                    raw.rows(map.delays, steps).into_owned(),
                )
            }
            _ => (pred.states, traj.states.rows(1, steps).into_owned()),
        };
        out.push(ScoredPrediction { predicted, truth });
    }
    Ok((out, false))
}

fn stack(parts: impl Iterator<Item = DMatrix<f64>>) -> DMatrix<f64> {
    let parts: Vec<_> = parts.collect();
    let rows = parts.iter().map(|p| p.nrows()).sum();
    let cols = parts.first().map_or(0, |p| p.ncols());
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for p in parts {
        out.rows_mut(r, p.nrows()).copy_from(&p);
        r += p.nrows();
    }
    out
}

/// Score a model on a held-out set in model coordinates. MSE pools every
/// predicted entry; EKL is averaged over trajectories.
pub fn score<F: Forecaster + ?Sized>(
    model: &F,
    set: &EvalSet,
    embedding: Option<&EmbeddingMap>,
    eval: &EvaluationConfig,
) -> Result<Score> {
    let (predictions, diverged) = match set {
        EvalSet::Trajectories { data, observations } => {
            rollouts(model, data, observations.as_ref(), embedding, eval.horizon)?
        }
        EvalSet::Series { series, value_dims } => {
            let map = embedding
                .ok_or_else(|| Error::Config("series scoring needs a delay embedding".into()))?;
            let horizon = eval.chunk_horizon.or(eval.horizon).unwrap_or(1);
            match chunked_horizon_predict(model, map, series, horizon) {
                Ok(pred) => {
                    let n = pred.nrows();
                    let scored = ScoredPrediction {
                        predicted: pred.columns(0, *value_dims).into_owned(),
                        truth: series.view((map.delays, 0), (n, *value_dims)).into_owned(),
                    };
                    (vec![scored], false)
                }
                Err(CoreError::BlowUp { .. }) => (Vec::new(), true),
                Err(e) => return Err(e.into()),
            }
        }
    };
    if diverged {
        return Ok(Score {
            value: f64::INFINITY,
            diverged,
            predictions,
        });
    }
    // Both metrics pool the snapshots of every test trajectory.
    let predicted = stack(predictions.iter().map(|p| p.predicted.clone()));
    let truth = stack(predictions.iter().map(|p| p.truth.clone()));
    let value = match eval.metric {
        Metric::Mse => mse(&predicted, &truth)?,
        Metric::Ekl => ekl(&truth, &predicted, &eval.ekl)?,
    };
    Ok(Score {
        value,
        diverged,
        predictions,
    })
}

/// Mean, minimum and maximum of a list of values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    #[serde(with = "json_float")]
    pub mean: f64,
    #[serde(with = "json_float")]
    pub min: f64,
    #[serde(with = "json_float")]
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        Self {
            mean: values.iter().sum::<f64>() / n,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Non-finite values are written as `null` and read back as infinity.
mod json_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlOutcome {
    pub cumulative_cost: f64,
    pub state_cost: f64,
    pub input_cost: f64,
    pub initial_error: f64,
    pub final_error: f64,
    /// `final_error / initial_error`.
    pub relative_error: f64,
    pub trace_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    #[serde(with = "json_float")]
    pub metric: f64,
    pub diverged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_metric: Option<f64>,
    pub fit_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_eigenvalue_modulus: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub metric: Metric,
    pub seeds: Vec<SeedResult>,
    pub aggregate: Stats,
    pub fit_seconds: Stats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_cost: Option<Stats>,
}

impl RunSummary {
    pub fn from_seeds(name: &str, metric: Metric, seeds: Vec<SeedResult>) -> Self {
        let values: Vec<f64> = seeds.iter().map(|s| s.metric).collect();
        let times: Vec<f64> = seeds.iter().map(|s| s.fit_seconds).collect();
        let costs: Option<Vec<f64>> = seeds
            .iter()
            .map(|s| s.control.as_ref().map(|c| c.cumulative_cost))
            .collect();
        Self {
            name: name.to_string(),
            metric,
            aggregate: Stats::of(&values),
            fit_seconds: Stats::of(&times),
            control_cost: costs.map(|c| Stats::of(&c)),
            seeds,
        }
    }

    pub fn metric_values(&self) -> Vec<f64> {
        self.seeds.iter().map(|s| s.metric).collect()
    }
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// `traj_id,step,pred1..pred_k,true1..true_k`.
pub fn write_predictions(path: &Path, predictions: &[ScoredPrediction]) -> Result<()> {
    create_parent(path)?;
    let k = predictions.first().map_or(0, |p| p.truth.ncols());
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let header: Vec<String> = ["traj_id".to_string(), "step".to_string()]
        .into_iter()
        .chain((1..=k).map(|i| format!("pred{i}")))
        .chain((1..=k).map(|i| format!("true{i}")))
        .collect();
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for (id, p) in predictions.iter().enumerate() {
        for t in 0..p.truth.nrows() {
            let row: Vec<String> = [id.to_string(), (t + 1).to_string()]
                .into_iter()
                .chain(p.predicted.row(t).iter().map(f64::to_string))
                .chain(p.truth.row(t).iter().map(f64::to_string))
                .collect();
            w.write_record(&row).map_err(|e| Error::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn max_modulus(model: &SampledRnn) -> Result<f64> {
    Ok(model
        .koopman_eigenvalues()?
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max))
}

/// Closed-loop LQR run on the simulated plant.
pub fn run_control(cfg: &ExperimentConfig, model: &SampledRnn, data: &PreparedData) -> Result<ControlTrace> {
    let ctl = cfg
        .control
        .as_ref()
        .ok_or_else(|| Error::Config("config has no control section".into()))?;
    let system = *cfg
        .system()
        .ok_or_else(|| Error::Config("control runs need a simulated plant".into()))?;
    let dt = data.train.dt;
    let plant_cfg = match &cfg.data {
        DataConfig::Generated(g) => &g.train,
        DataConfig::Csv(_) => unreachable!("system() returned a plant"),
    };
    let mut plant = OdePlant::new(system, dt, plant_cfg.substeps)?;
    let weights = LqrWeights::diagonal(model.state_dim(), ctl.q, model.input_dim(), ctl.r)?;
    let mut controller = match ctl.subspace_cutoff {
        Some(cutoff) => {
            let states = data.train.snapshots().current.transpose();
            let basis = feature_subspace(model, &states, cutoff)?;
            lqr_fit_subspace(model, &weights, &ctl.target, &basis, ctl.dare)?
        }
        None => lqr_fit(model, &weights, &ctl.target, ctl.dare)?,
    };
    if let Some(InputDictionary::Layer(layer)) = model.input_dict() {
        let x = data
            .train
            .snapshots()
            .inputs
            .ok_or_else(|| Error::Config("controlled model trained without inputs".into()))?;
        let n = x.ncols().min(ctl.projection_samples);
        let samples = x.columns(0, n).transpose();
        let p = fit_lift_projection(layer, &samples, LstsqOptions::new(cfg.model.rcond)?)?;
        controller = controller.with_lift_projection(p)?;
    }
    Ok(mpc_run(
        &mut plant,
        model,
        &controller,
        &ctl.h0,
        &MpcOptions {
            steps: ctl.steps,
            dt,
            clamp: ctl.clamp,
        },
    )?)
}

/// Fit, score and optionally control for one seed.
pub fn run_seed(cfg: &ExperimentConfig, data: &PreparedData, seed: u64) -> Result<(SeedResult, FittedModel, Score)> {
    let (model, fit_seconds) = fit_model(cfg, data, seed).at(Stage::Fit, Some(seed))?;
    let embedding = data.embedding.as_ref();
    let test = score(&model, &data.test, embedding, &cfg.evaluation).at(Stage::Predict, Some(seed))?;
    let validation_metric = data
        .validation
        .as_ref()
        .map(|v| score(&model, v, embedding, &cfg.evaluation).map(|s| s.value))
        .transpose()
        .at(Stage::Evaluate, Some(seed))?;
    let max_eigenvalue_modulus = model
        .koopman()
        .map(max_modulus)
        .transpose()
        .at(Stage::Diagnose, Some(seed))?;
    let mut result = SeedResult {
        seed,
        metric: test.value,
        diverged: test.diverged,
        validation_metric,
        fit_seconds,
        max_eigenvalue_modulus,
        model_path: None,
        control: None,
    };
    let out = cfg.output_dir.as_ref().map(|d| seed_dir(d, seed));
    if cfg.control.is_some() {
        let koopman = model
            .koopman()
            .ok_or_else(|| Error::Config("control needs the Koopman model".into()))
            .at(Stage::Control, Some(seed))?;
        let trace = run_control(cfg, koopman, data).at(Stage::Control, Some(seed))?;
        let target = &cfg.control.as_ref().expect("checked").target;
        let errors = trace.target_error(target);
        let trace_path = out.as_ref().map(|d| d.join("trace.csv"));
        if let Some(p) = &trace_path {
            write_trace(p, &trace).at(Stage::Write, Some(seed))?;
        }
        result.control = Some(ControlOutcome {
            cumulative_cost: trace.cumulative_cost,
            state_cost: trace.state_cost,
            input_cost: trace.input_cost,
            initial_error: errors[0],
            final_error: errors[errors.len() - 1],
            relative_error: errors[errors.len() - 1] / errors[0],
            trace_path,
        });
    }
    if let Some(dir) = &out {
        let write = || -> Result<Option<PathBuf>> {
            write_predictions(&dir.join("prediction.csv"), &test.predictions)?;
            match &model {
                FittedModel::Koopman(m) => {
                    let path = dir.join("model.json");
                    save_model(&path, m)?;
                    write_eigenvalues(&dir.join("eigenvalues.csv"), &m.koopman_eigenvalues()?)?;
                    Ok(Some(path))
                }
                FittedModel::Direct(_) => Ok(None),
            }
        };
        result.model_path = write().at(Stage::Write, Some(seed))?;
    }
    Ok((result, model, test))
}

/// Run every seed of a config and aggregate.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate().at(Stage::Config, None)?;
    let data = prepare_data(cfg).at(Stage::Generate, None)?;
    let seeds = cfg
        .seeds
        .iter()
        .map(|&s| run_seed(cfg, &data, s).map(|(r, _, _)| r))
        .collect::<Result<Vec<_>>>()?;
    let summary = RunSummary::from_seeds(&cfg.name, cfg.evaluation.metric, seeds);
    if let Some(dir) = &cfg.output_dir {
        write_summary(&dir.join("summary.json"), &summary).at(Stage::Write, None)?;
    }
    Ok(summary)
}

/// Write through a temporary file so readers never see a partial summary.
pub fn write_summary<T: Serialize>(path: &Path, summary: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    write_json(&tmp, summary)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum AblationAxis {
    SamplingMode,
    KoopmanMode,
    WidthSweep,
    DtSweep,
}

pub const SWEEP_WIDTHS: [usize; 8] = [4, 8, 16, 32, 64, 128, 256, 512];
pub const SWEEP_DTS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub sampling: SamplingMode,
    pub koopman: KoopmanMode,
    pub width: usize,
    pub dt: Option<f64>,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

/// The configs an ablation runs, each with a label.
pub fn ablation_variants(
    base: &ExperimentConfig,
    axis: AblationAxis,
) -> Result<Vec<(String, ExperimentConfig)>> {
    let with = |label: String, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        cfg.name = format!("{}_{label}", base.name);
        cfg.output_dir = base.output_dir.as_ref().map(|d| d.join(&label));
        (label, cfg)
    };
    Ok(match axis {
        AblationAxis::SamplingMode => [SamplingMode::Swim, SamplingMode::Gaussian]
            .into_iter()
            .map(|m| {
                let label = format!("{m:?}").to_lowercase();
                with(label, &|c| c.model.sampling = m)
            })
            .collect(),
        AblationAxis::KoopmanMode => [KoopmanMode::With, KoopmanMode::Without]
            .into_iter()
            .map(|m| {
                let label = format!("koopman_{m:?}").to_lowercase();
                with(label, &|c| c.model.koopman = m)
            })
            .collect(),
        AblationAxis::WidthSweep => SWEEP_WIDTHS
            .into_iter()
            .map(|w| with(format!("width_{w}"), &|c| c.model.width = w))
            .collect(),
        AblationAxis::DtSweep => {
            if !matches!(base.data, DataConfig::Generated(_)) {
                return Err(Error::Config("dt sweeps need generated data".into()));
            }
            let mut out = Vec::new();
            for dt in SWEEP_DTS {
                for m in [KoopmanMode::With, KoopmanMode::Without] {
                    let label = format!("dt_{dt}_koopman_{m:?}").to_lowercase();
                    out.push(with(label, &|c| {
                        c.model.koopman = m;
                        if let DataConfig::Generated(g) = &mut c.data {
                            for split in [Some(&mut g.train), Some(&mut g.test), g.validation.as_mut()]
                                .into_iter()
                                .flatten()
                            {
                                split.dt = dt;
                                split.substeps = None;
                            }
                        }
                    }));
                }
            }
            out
        }
    })
}

pub fn run_ablation(base: &ExperimentConfig, axis: AblationAxis) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (label, cfg) in ablation_variants(base, axis)? {
        let summary = run_experiment(&cfg)?;
        let dt = match &cfg.data {
            DataConfig::Generated(g) if axis == AblationAxis::DtSweep => Some(g.train.dt),
            _ => None,
        };
        rows.push(AblationRow {
            label,
            sampling: cfg.model.sampling,
            koopman: cfg.model.koopman,
            width: cfg.model.width,
            dt,
            summary,
        });
    }
    let table = AblationTable { axis, rows };
    if let Some(dir) = &base.output_dir {
        let name = snake_name(&axis);
        write_ablation_csv(&dir.join(format!("ablation_{name}.csv")), &table).at(Stage::Write, None)?;
    }
    Ok(table)
}

/// `label,sampling,koopman,width,dt,mean,min,max,fit_seconds_mean`.
pub fn write_ablation_csv(path: &Path, table: &AblationTable) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record([
        "label", "sampling", "koopman", "width", "dt", "mean", "min", "max", "fit_seconds_mean",
    ])
    .map_err(|e| Error::csv(path, e))?;
    for r in &table.rows {
        let s = &r.summary;
        w.write_record([
            r.label.clone(),
            snake_name(&r.sampling),
            snake_name(&r.koopman),
            r.width.to_string(),
            r.dt.map_or(String::new(), |d| d.to_string()),
            s.aggregate.mean.to_string(),
            s.aggregate.min.to_string(),
            s.aggregate.max.to_string(),
            s.fit_seconds.mean.to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn snake_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub eigenvalues: PathBuf,
    pub eigenvalue_count: usize,
    pub max_modulus: f64,
    pub pairs: Option<PathBuf>,
    pub note: Option<String>,
}

/// Koopman spectrum and, for sampled layers, the pairs behind each neuron.
pub fn export_diagnostics(model: &SampledRnn, dir: &Path) -> Result<DiagnosticsReport> {
    let eig = model.koopman_eigenvalues()?;
    let eigenvalues = dir.join("eigenvalues.csv");
    write_eigenvalues(&eigenvalues, &eig)?;
    let (pairs, note) = match model.state_dict().provenance() {
        Some(p) => {
            let path = dir.join("pairs.csv");
            write_pairs(&path, p)?;
            (Some(path), None)
        }
        None => (
            None,
            Some("state dictionary has no pair provenance; pair file skipped".to_string()),
        ),
    };
    Ok(DiagnosticsReport {
        eigenvalue_count: eig.len(),
        max_modulus: eig.iter().map(|l| l.norm()).fold(0.0, f64::max),
        eigenvalues,
        pairs,
        note,
    })
}
