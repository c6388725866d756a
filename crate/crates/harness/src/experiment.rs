//! Config-driven pipelines that produce a JSON report plus CSV dumps.
//!
//! Everything is computed before the output directory is touched, so a
//! failing run leaves nothing behind. Reports hold no wall-clock data and are
//! byte-identical across reruns of the same config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use attacks::AttackSpec;
use autograd::StreamKey;
use enresnet::{ArchSpec, EnResNetModel, Member, NoiseSpec, TinyResNet};
use serde::{Deserialize, Serialize};
use transport::{
    compare_with_pde, grad_sup_norm, sample_random_terminal, sample_random_velocity,
    solve_convection_diffusion, ComparisonReport, ConvectionScheme, DiffusionConfig, Grid2D,
    SdeConfig,
};

use crate::checkpoint::{encode_checkpoint, Checkpoint};
use crate::data::{load_dataset, Dataset, DatasetSpec};
use crate::error::{config, io_err, HarnessError, Result};
use crate::eval::{evaluate, evaluate_against, EvalReport};
use crate::train::{init_key, train, EpochRecord, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pipeline", rename_all = "kebab-case")]
pub enum ExperimentConfig {
    PdeFigure(PdeFigureConfig),
    FkCompare(FkCompareConfig),
    TrainEval(TrainEvalConfig),
    BlindMatrix(TrainEvalConfig),
    WeightLearning(WeightLearningConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdeFigureConfig {
    pub n: usize,
    pub sigmas: Vec<f64>,
    pub seed: u64,
    /// Low-pass cutoff of the random terminal condition.
    pub cutoff: usize,
    pub dt: f64,
    pub scheme: ConvectionScheme,
}

impl Default for PdeFigureConfig {
    fn default() -> Self {
        Self {
            n: 128,
            sigmas: vec![0.0, 0.01, 0.1],
            seed: 0,
            cutoff: 16,
            dt: 1e-3,
            scheme: ConvectionScheme::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FkCompareConfig {
    pub n: usize,
    pub sigma: f64,
    pub paths: usize,
    pub probes: usize,
    pub seed: u64,
    pub cutoff: usize,
    pub dt: f64,
}

impl Default for FkCompareConfig {
    fn default() -> Self {
        Self {
            n: 32,
            sigma: 0.1,
            paths: 20_000,
            probes: 16,
            seed: 0,
            cutoff: 8,
            dt: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberArch {
    pub channels: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub members: usize,
    pub channels: usize,
    pub blocks: usize,
    pub noise: NoiseSpec,
    /// Per-member architectures; when non-empty, replaces
    /// `members`/`channels`/`blocks`.
    pub member_archs: Vec<MemberArch>,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            name: "model".into(),
            members: 1,
            channels: 16,
            blocks: 3,
            noise: NoiseSpec::default(),
            member_archs: Vec::new(),
            train: TrainConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Fresh model for `data`, drawn from the training seed.
    pub fn build(&self, data: &Dataset) -> Result<EnResNetModel> {
        let arch = |channels, blocks| ArchSpec {
            input: data.input,
            channels,
            blocks,
            classes: data.classes,
        };
        let key = init_key(self.train.seed);
        if self.member_archs.is_empty() {
            return Ok(EnResNetModel::init(
                self.members,
                arch(self.channels, self.blocks),
                self.noise,
                key,
            )?);
        }
        let members = (0u64..)
            .zip(&self.member_archs)
            .map(|(id, m)| {
                let net = TinyResNet::init(arch(m.channels, m.blocks), &mut key.derive(id).rng())?;
                Ok(Member {
                    net,
                    noise: self.noise,
                    stream_id: id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EnResNetModel::uniform(members)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainEvalConfig {
    pub data: DatasetSpec,
    pub models: Vec<ModelConfig>,
    pub attacks: Vec<AttackSpec>,
    pub eval_seed: u64,
}

impl Default for TrainEvalConfig {
    fn default() -> Self {
        Self {
            data: DatasetSpec::default(),
            models: vec![ModelConfig::default()],
            attacks: vec![AttackSpec::fgsm(8.0 / 255.0), AttackSpec::default()],
            eval_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightLearningConfig {
    pub data: DatasetSpec,
    /// Trained with `learn_weights` forced on.
    pub model: ModelConfig,
    pub attacks: Vec<AttackSpec>,
    pub eval_seed: u64,
}

impl Default for WeightLearningConfig {
    fn default() -> Self {
        Self {
            data: DatasetSpec::default(),
            model: ModelConfig {
                name: "weighted".into(),
                member_archs: vec![
                    MemberArch {
                        channels: 16,
                        blocks: 3,
                    },
                    MemberArch {
                        channels: 8,
                        blocks: 2,
                    },
                ],
                ..ModelConfig::default()
            },
            attacks: vec![AttackSpec::fgsm(8.0 / 255.0)],
            eval_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PdeRow {
    pub sigma: f64,
    pub grad_sup_norm: f64,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PdeSummary {
    pub rows: Vec<PdeRow>,
    /// `grad_sup_norm` strictly decreases along the σ list.
    pub strictly_decreasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelResult {
    pub name: String,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub weights: Vec<f64>,
    pub history: Vec<EpochRecord>,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub pipeline: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pde: Option<PdeSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fk: Option<ComparisonReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub models: Vec<ModelResult>,
}

/// Named output files, written together once the pipeline has finished.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub report: ExperimentReport,
    pub files: Vec<(String, Vec<u8>)>,
}

pub fn parse_experiment(text: &str) -> Result<ExperimentConfig> {
    serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("experiment config: {e}")))
}

pub fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    parse_experiment(&std::fs::read_to_string(path).map_err(io_err(path))?)
}

impl ExperimentConfig {
    pub fn name(&self) -> &'static str {
        match self {
            Self::PdeFigure(_) => "pde-figure",
            Self::FkCompare(_) => "fk-compare",
            Self::TrainEval(_) => "train-eval",
            Self::BlindMatrix(_) => "blind-matrix",
            Self::WeightLearning(_) => "weight-learning",
        }
    }
}

fn pde_figure(cfg: &PdeFigureConfig) -> Result<Artifacts> {
    if cfg.sigmas.is_empty() {
        return config("pde-figure: sigmas is empty");
    }
    let grid = Grid2D::new(cfg.n)?;
    let terminal = sample_random_terminal(grid, cfg.seed, cfg.cutoff)?;
    let velocity = sample_random_velocity(grid, cfg.seed);
    let mut rows = Vec::new();
    let mut files = Vec::new();
    let mut summary = String::from("sigma,grad_sup_norm\n");
    for (i, &sigma) in cfg.sigmas.iter().enumerate() {
        let solve_cfg = DiffusionConfig {
            sigma,
            dt: cfg.dt,
            scheme: cfg.scheme,
            ..DiffusionConfig::default()
        };
        let u0 = solve_convection_diffusion(&terminal, &velocity, &solve_cfg)?;
        let g = grad_sup_norm(&u0);
        let file = format!("field_{i}_sigma_{sigma}.csv");
        files.push((file.clone(), u0.to_csv(sigma).into_bytes()));
        let _ = writeln!(summary, "{sigma},{g}");
        rows.push(PdeRow {
            sigma,
            grad_sup_norm: g,
            file,
        });
    }
    files.push(("summary.csv".into(), summary.into_bytes()));
    let strictly_decreasing = rows
        .windows(2)
        .all(|w| w[1].grad_sup_norm < w[0].grad_sup_norm);
    let report = ExperimentReport {
        pipeline: "pde-figure".into(),
        pde: Some(PdeSummary {
            rows,
            strictly_decreasing,
        }),
        fk: None,
        models: Vec::new(),
    };
    Ok(Artifacts { report, files })
}

fn fk_compare(cfg: &FkCompareConfig) -> Result<Artifacts> {
    let grid = Grid2D::new(cfg.n)?;
    let terminal = sample_random_terminal(grid, cfg.seed, cfg.cutoff)?;
    let velocity = sample_random_velocity(grid, cfg.seed);
    let points = transport::feynman_kac::probe_points(grid, cfg.probes);
    let mc = SdeConfig {
        sigma: cfg.sigma,
        dt: cfg.dt,
        n_paths: cfg.paths,
        seed: cfg.seed,
    };
    let pde = DiffusionConfig {
        dt: cfg.dt,
        ..DiffusionConfig::default()
    };
    let cmp = compare_with_pde(&points, &terminal, &velocity, cfg.sigma, &mc, &pde)?;
    let mut csv = String::from("x,y,mc_mean,mc_stderr,pde,abs_err,err_over_stderr\n");
    for r in &cmp.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.x, r.y, r.mc_mean, r.mc_stderr, r.pde, r.abs_err, r.err_over_stderr
        );
    }
    let report = ExperimentReport {
        pipeline: "fk-compare".into(),
        pde: None,
        fk: Some(cmp),
        models: Vec::new(),
    };
    Ok(Artifacts {
        report,
        files: vec![("probes.csv".into(), csv.into_bytes())],
    })
}

fn check_names(models: &[ModelConfig]) -> Result<()> {
    if models.is_empty() {
        return config("models is empty");
    }
    for (i, m) in models.iter().enumerate() {
        if m.name.is_empty()
            || !m
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return config(format!(
                "models[{i}].name must be non-empty ASCII letters, digits, '-' or '_'"
            ));
        }
        if models[..i].iter().any(|o| o.name == m.name) {
            return config(format!("models[{i}].name {} is used twice", m.name));
        }
    }
    Ok(())
}

struct Trained {
    name: String,
    outcome: crate::train::TrainOutcome,
}

fn train_all(data: &Dataset, models: &[ModelConfig]) -> Result<Vec<Trained>> {
    check_names(models)?;
    for m in models {
        m.train.validate()?;
        m.noise.validate()?;
    }
    models
        .iter()
        .map(|m| {
            Ok(Trained {
                name: m.name.clone(),
                outcome: train(m.build(data)?, data, &m.train)?,
            })
        })
        .collect()
}

fn metrics_csv(results: &[ModelResult]) -> String {
    let mut out = String::from("model,a_nat");
    let labels: Vec<String> = results
        .first()
        .map(|r| r.eval.a_rob.keys().cloned().collect())
        .unwrap_or_default();
    for l in &labels {
        let _ = write!(out, ",{l}");
    }
    out.push('\n');
    for r in results {
        let _ = write!(out, "{},{}", r.name, r.eval.a_nat);
        for l in &labels {
            let _ = write!(out, ",{}", r.eval.a_rob[l]);
        }
        out.push('\n');
    }
    out
}

fn history_csv(results: &[ModelResult]) -> String {
    let mut out = String::from("model,epoch,lr,train_loss,val_acc,weights\n");
    for r in results {
        for h in &r.history {
            let w: Vec<String> = h.weights.iter().map(f64::to_string).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.name,
                h.epoch,
                h.lr,
                h.train_loss,
                h.val_acc,
                w.join(";")
            );
        }
    }
    out
}

fn model_pipeline(
    name: &str,
    data_spec: &DatasetSpec,
    models: &[ModelConfig],
    attacks: &[AttackSpec],
    eval_seed: u64,
    blind: bool,
) -> Result<Artifacts> {
    for (i, a) in attacks.iter().enumerate() {
        a.validate()
            .map_err(|e| HarnessError::Config(format!("attacks[{i}]: {e}")))?;
    }
    let data = load_dataset(data_spec)?;
    let trained = train_all(&data, models)?;
    let key = StreamKey(eval_seed);
    let mut results = Vec::with_capacity(trained.len());
    let mut files = Vec::new();
    let mut blind_csv = String::from("target,oracle,attack,accuracy\n");
    for t in &trained {
        let mut eval = evaluate(&t.outcome.model, &data.test, attacks, key)?;
        if blind {
            let mut map = std::collections::BTreeMap::new();
            for o in trained.iter().filter(|o| o.name != t.name) {
                let rep =
                    evaluate_against(&t.outcome.model, &o.outcome.model, &data.test, attacks, key)?;
                for (label, acc) in &rep.a_rob {
                    let _ = writeln!(blind_csv, "{},{},{label},{acc}", t.name, o.name);
                }
                eval.runtime.attacked_examples += rep.runtime.attacked_examples;
                map.insert(o.name.clone(), rep.a_rob);
            }
            eval.blind = Some(map);
        }
        let ckpt = Checkpoint {
            model: t.outcome.model.clone(),
            best_val_acc: t.outcome.best_val_acc,
            epoch: t.outcome.best_epoch,
        };
        files.push((format!("{}.enrn", t.name), encode_checkpoint(&ckpt)?));
        results.push(ModelResult {
            name: t.name.clone(),
            best_val_acc: t.outcome.best_val_acc,
            best_epoch: t.outcome.best_epoch,
            weights: t.outcome.model.weights().to_vec(),
            history: t.outcome.history.clone(),
            eval,
        });
    }
    files.push(("metrics.csv".into(), metrics_csv(&results).into_bytes()));
    files.push(("history.csv".into(), history_csv(&results).into_bytes()));
    if blind {
        files.push(("blind.csv".into(), blind_csv.into_bytes()));
    }
    let report = ExperimentReport {
        pipeline: name.into(),
        pde: None,
        fk: None,
        models: results,
    };
    Ok(Artifacts { report, files })
}

/// Runs the pipeline in memory.
pub fn compute_experiment(cfg: &ExperimentConfig) -> Result<Artifacts> {
    match cfg {
        ExperimentConfig::PdeFigure(c) => pde_figure(c),
        ExperimentConfig::FkCompare(c) => fk_compare(c),
        ExperimentConfig::TrainEval(c) => model_pipeline(
            "train-eval",
            &c.data,
            &c.models,
            &c.attacks,
            c.eval_seed,
            false,
        ),
        ExperimentConfig::BlindMatrix(c) => {
            if c.models.len() < 2 {
                return config("blind-matrix needs at least two models");
            }
            model_pipeline(
                "blind-matrix",
                &c.data,
                &c.models,
                &c.attacks,
                c.eval_seed,
                true,
            )
        }
        ExperimentConfig::WeightLearning(c) => {
            let mut m = c.model.clone();
            m.train.learn_weights = true;
            model_pipeline(
                "weight-learning",
                &c.data,
                std::slice::from_ref(&m),
                &c.attacks,
                c.eval_seed,
                false,
            )
        }
    }
}

/// Runs the pipeline and writes `report.json` plus its CSV and checkpoint
/// artifacts into `out_dir`. Returns the written paths.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<(ExperimentReport, Vec<PathBuf>)> {
    let Artifacts { report, mut files } = compute_experiment(cfg)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| HarnessError::Config(format!("report: {e}")))?;
    files.push(("report.json".into(), (json + "\n").into_bytes()));
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = out_dir.join(name);
        std::fs::write(&path, bytes).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok((report, written))
}
