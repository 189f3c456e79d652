//! Experiment driver: config parsing, sweeps, checkpoints and the result CSV.
//!
//! A config is a TOML file. Only `sweep.axis` is required; everything else
//! falls back to the desk-scale defaults.
//!
//! ```toml
//! output = "runs/snr"
//!
//! [sweep]
//! axis = "snr_db"          # or "bandwidth"
//! values = [-6, 0, 6, 12]  # default grid for the axis
//! fixed = 16               # value of the other axis
//! channel = "awgn"
//! schemes = ["cl_sc", "noma_jscc", "single_source"]
//! seeds = [0, 1, 2]
//!
//! [world]   # identities, dimensions, view noise
//! [model]   # feature_dim, z_dim, proj_dim, hidden
//! [train]   # epochs per stage, batch size, learning rates, tau
//! [eval]    # trials
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelConfig, ChannelKind};
use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{Architecture, ClScModel};
use crate::retrieval::{evaluate, EvalConfig};
use crate::source::{build_dataset, DatasetSplit, WorldConfig};
use crate::training::{train, Scheme, StageContext, StageReport, TrainConfig};

pub const CSV_HEADER: &str = "scheme,channel,snr_db,bandwidth,seed,top1,seconds";

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    SnrDb,
    Bandwidth,
}

impl SweepAxis {
    fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::SnrDb => vec![-6.0, 0.0, 6.0, 12.0],
            SweepAxis::Bandwidth => vec![4.0, 8.0, 16.0, 32.0],
        }
    }

    fn default_fixed(self) -> f64 {
        match self {
            SweepAxis::SnrDb => 16.0,
            SweepAxis::Bandwidth => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub z_dim: usize,
    pub proj_dim: usize,
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = Architecture::desk(1, 2, ChannelKind::Awgn);
        Self {
            feature_dim: a.feature_dim,
            z_dim: a.z_dim,
            proj_dim: a.proj_dim,
            hidden: a.hidden,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self, obs_dim: usize, bandwidth: usize, num_classes: usize, channel: ChannelKind) -> Architecture {
        Architecture {
            obs_dim,
            feature_dim: self.feature_dim,
            bandwidth,
            z_dim: self.z_dim,
            proj_dim: self.proj_dim,
            hidden: self.hidden,
            num_classes,
            channel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Channel draws per query.
    pub trials: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { trials: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    #[serde(default)]
    pub values: Vec<f64>,
    #[serde(default)]
    pub fixed: Option<f64>,
    #[serde(default = "default_channel")]
    pub channel: ChannelKind,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_channel() -> ChannelKind {
    ChannelKind::Awgn
}

fn default_schemes() -> Vec<Scheme> {
    Scheme::ALL.to_vec()
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    /// Default desk-scale experiment along `axis`.
    pub fn desk(axis: SweepAxis) -> Self {
        let mut cfg = Self {
            output: default_output(),
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            sweep: SweepConfig {
                axis,
                values: Vec::new(),
                fixed: None,
                channel: default_channel(),
                schemes: default_schemes(),
                seeds: default_seeds(),
            },
        };
        cfg.fill_defaults();
        cfg
    }

    fn fill_defaults(&mut self) {
        if self.sweep.values.is_empty() {
            self.sweep.values = self.sweep.axis.default_values();
        }
        if self.sweep.fixed.is_none() {
            self.sweep.fixed = Some(self.sweep.axis.default_fixed());
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        if self.sweep.values.is_empty() {
            return Err(Error::config("sweep.values", "empty sweep"));
        }
        if self.sweep.schemes.is_empty() {
            return Err(Error::config("sweep.schemes", "no schemes"));
        }
        if self.sweep.seeds.is_empty() {
            return Err(Error::config("sweep.seeds", "no seeds"));
        }
        let mut seeds = self.sweep.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.sweep.seeds.len() {
            return Err(Error::config("sweep.seeds", "seeds must be distinct"));
        }
        if self.eval.trials == 0 {
            return Err(Error::config("eval.trials", "must be at least 1"));
        }
        for p in self.points()? {
            ChannelConfig::new(self.sweep.channel, p.snr_db, p.bandwidth)?;
        }
        Ok(())
    }

    /// Channel condition of each sweep point, in file order.
    pub fn points(&self) -> Result<Vec<SweepPoint>> {
        let fixed = self.sweep.fixed.unwrap_or(self.sweep.axis.default_fixed());
        let as_k = |v: f64, key: &str| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 && v.is_finite() {
                Ok(v as usize)
            } else {
                Err(Error::config(key, format!("bandwidth {v} is not a positive integer")))
            }
        };
        self.sweep
            .values
            .iter()
            .map(|&v| {
                Ok(match self.sweep.axis {
                    SweepAxis::SnrDb => SweepPoint {
                        snr_db: v,
                        bandwidth: as_k(fixed, "sweep.fixed")?,
                    },
                    SweepAxis::Bandwidth => SweepPoint {
                        snr_db: fixed,
                        bandwidth: as_k(v, "sweep.values")?,
                    },
                })
            })
            .collect()
    }

    /// Every (scheme, point, seed) job.
    pub fn jobs(&self) -> Result<Vec<Job>> {
        let mut jobs = Vec::new();
        for &scheme in &self.sweep.schemes {
            for p in self.points()? {
                for &seed in &self.sweep.seeds {
                    jobs.push(Job {
                        scheme,
                        channel: ChannelConfig::new(self.sweep.channel, p.snr_db, p.bandwidth)?,
                        seed,
                    });
                }
            }
        }
        Ok(jobs)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("# config could not be rendered: {e}\n"))
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub snr_db: f64,
    pub bandwidth: usize,
}

/// Parses and validates a config; missing fields take their defaults.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let msg = e.message().to_string();
        if msg.contains("missing field `sweep`") {
            Error::config("sweep.axis", "missing sweep section")
        } else if msg.contains("missing field `axis`") {
            Error::config("sweep.axis", "missing sweep axis")
        } else {
            Error::Parse {
                what: "config",
                line: e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0),
                reason: msg,
            }
        }
    })?;
    cfg.fill_defaults();
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

const WORLD_PREFIX: &str = "world.";

/// World settings as checkpoint `meta` entries, so a checkpoint can be
/// evaluated on the split it was trained for.
pub fn world_meta(world: &WorldConfig) -> Vec<(String, String)> {
    let text = toml::to_string(world).expect("world config serializes");
    text.lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (format!("{WORLD_PREFIX}{k}"), v.to_string()))
        .collect()
}

/// Inverse of [`world_meta`]; absent keys take their defaults.
pub fn world_from_meta(meta: &BTreeMap<String, String>) -> Result<WorldConfig> {
    let text: String = meta
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(WORLD_PREFIX).map(|k| format!("{k} = {v}\n")))
        .collect();
    let world: WorldConfig = toml::from_str(&text).map_err(|e| Error::config("checkpoint world", e.message()))?;
    world.validate()?;
    Ok(world)
}

/// One trained-and-evaluated model.
#[derive(Clone, Debug, PartialEq)]
pub struct Job {
    pub scheme: Scheme,
    pub channel: ChannelConfig,
    pub seed: u64,
}

impl Job {
    pub fn tag(&self) -> String {
        format!(
            "{}_{}_snr{}_k{}_seed{}",
            self.scheme, self.channel.kind, self.channel.snr_db, self.channel.bandwidth, self.seed
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub scheme: Scheme,
    pub channel: ChannelKind,
    pub snr_db: f64,
    pub bandwidth: usize,
    pub seed: u64,
    pub top1: f64,
    pub seconds: f64,
}

impl ResultRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.scheme, self.channel, self.snr_db, self.bandwidth, self.seed, self.top1, self.seconds
        )
    }

    fn sort_key(&self) -> (Scheme, ChannelKind, u64, usize, u64) {
        // total order on SNR via its bit pattern, adjusted for sign
        let bits = self.snr_db.to_bits();
        let key = if self.snr_db.is_sign_negative() { !bits } else { bits | (1 << 63) };
        (self.scheme, self.channel, key, self.bandwidth, self.seed)
    }
}

pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by_key(ResultRow::sort_key);
}

pub fn to_csv(rows: &[ResultRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                what: "results csv",
                line: 1,
                reason: format!("expected header `{CSV_HEADER}`"),
            })
        }
    }
    let err = |line: usize, reason: String| Error::Parse {
        what: "results csv",
        line: line + 1,
        reason,
    };
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(err(i, format!("{} fields, expected 7", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(i, format!("`{s}`: {e}")));
            let int = |s: &str| s.parse::<u64>().map_err(|e| err(i, format!("`{s}`: {e}")));
            Ok(ResultRow {
                scheme: f[0].parse()?,
                channel: f[1].parse()?,
                snr_db: num(f[2])?,
                bandwidth: int(f[3])? as usize,
                seed: int(f[4])?,
                top1: num(f[5])?,
                seconds: num(f[6])?,
            })
        })
        .collect()
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(contents.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub struct JobOutput {
    pub row: ResultRow,
    pub model: ClScModel,
    pub reports: Vec<StageReport>,
}

/// Trains one model on the split for `job.seed` and evaluates it.
pub fn run_job(
    job: &Job,
    world: &WorldConfig,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    eval: &EvalSettings,
) -> Result<JobOutput> {
    let start = Instant::now();
    let split = build_dataset(world, job.seed)?;
    run_job_on(job, &split, model_cfg, train_cfg, eval, start)
}

/// [`run_job`] on an existing split.
pub fn run_job_on(
    job: &Job,
    split: &DatasetSplit,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    eval: &EvalSettings,
    start: Instant,
) -> Result<JobOutput> {
    let data = split.train_set();
    let arch = model_cfg.architecture(split.obs_dim, job.channel.bandwidth, data.num_classes, job.channel.kind);
    let mut model = ClScModel::new(arch, job.seed)?;
    let cfg = TrainConfig {
        seed: job.seed,
        ..train_cfg.clone()
    };
    let ctx = StageContext {
        data: &data,
        cfg: &cfg,
        channel: &job.channel,
        scheme: job.scheme,
    };
    let reports = train(&mut model, ctx)?;
    let result = evaluate(
        &model,
        split,
        job.scheme,
        &job.channel,
        &EvalConfig {
            trials: eval.trials,
            seed: job.seed,
            execution: Execution::Sequential,
        },
    )?;
    Ok(JobOutput {
        row: ResultRow {
            scheme: job.scheme,
            channel: job.channel.kind,
            snr_db: job.channel.snr_db,
            bandwidth: job.channel.bandwidth,
            seed: job.seed,
            top1: result.top1(),
            seconds: start.elapsed().as_secs_f64(),
        },
        model,
        reports,
    })
}

/// Runs every job, saves one checkpoint and stage log per job, and writes
/// `results.csv` (sorted rows) atomically once all jobs have finished.
pub fn run_sweep(cfg: &ExperimentConfig, exec: Execution) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let out = &cfg.output;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let log_path = out.join("run.log");
    let mut log = format!("# config\n{}", cfg.to_toml());

    let jobs = cfg.jobs()?;
    let outputs = exec.map(&jobs, |job| -> Result<(ResultRow, String)> {
        let o = run_job(job, &cfg.world, &cfg.model, &cfg.train, &cfg.eval)?;
        let mut meta = BTreeMap::new();
        meta.insert("seed".to_string(), job.seed.to_string());
        meta.insert("snr_db".to_string(), job.channel.snr_db.to_string());
        meta.extend(world_meta(&cfg.world));
        let ckpt = Checkpoint {
            scheme: job.scheme,
            meta,
            model: o.model,
        };
        checkpoint::save(&ckpt, &ckpt_dir.join(format!("{}.ckpt", job.tag())))?;
        let mut lines = String::new();
        for r in &o.reports {
            for l in r.log_lines().lines() {
                let _ = writeln!(lines, "{}\t{l}", job.tag());
            }
        }
        let _ = writeln!(lines, "{}\ttop1\t{}", job.tag(), o.row.top1);
        Ok((o.row, lines))
    });
    let mut rows = Vec::with_capacity(outputs.len());
    for o in outputs {
        let (row, lines) = o?;
        log.push_str(&lines);
        rows.push(row);
    }
    sort_rows(&mut rows);
    write_atomic(&log_path, &log)?;
    write_atomic(&out.join("results.csv"), &to_csv(&rows))?;
    Ok(rows)
}
