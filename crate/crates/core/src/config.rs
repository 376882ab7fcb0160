//! Flat `key = value` pipeline configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::{Arch, LayerKind, TrainConfig};
use crate::search::{Granularity, Mode, SearchConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dataset {
    Mnist,
    Cifar10,
    Synthetic,
}

impl FromStr for Dataset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(Dataset::Mnist),
            "cifar10" => Ok(Dataset::Cifar10),
            "synthetic" => Ok(Dataset::Synthetic),
            _ => Err(Error::InvalidArgument(format!("unknown dataset '{s}'"))),
        }
    }
}

impl Dataset {
    pub fn name(self) -> &'static str {
        match self {
            Dataset::Mnist => "mnist",
            Dataset::Cifar10 => "cifar10",
            Dataset::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Full,
    Desk,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::InvalidArgument(format!("unknown profile '{s}'"))),
        }
    }
}

/// One prune-retrain stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub granularity: Granularity,
    pub target: f64,
}

impl Stage {
    pub fn name(&self) -> String {
        match &self.granularity {
            Granularity::Channel => format!("channel:{}", self.target),
            Granularity::Kernel => format!("kernel:{}", self.target),
            Granularity::Strided { strides } => {
                let s: Vec<String> = strides.iter().map(u8::to_string).collect();
                format!("strided:{}:{}", self.target, s.join("/"))
            }
        }
    }
}

/// Parses `channel:0.46,strided:1.0:2` style stage lists.
pub fn parse_stages(s: &str) -> Result<Vec<Stage>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|item| {
            let parts: Vec<&str> = item.trim().split(':').collect();
            let bad = || Error::InvalidArgument(format!("bad stage '{item}'"));
            let target: f64 = parts.get(1).ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if !(0.0..=1.0).contains(&target) {
                return Err(bad());
            }
            let granularity = match (parts[0], parts.len()) {
                ("channel", 2) => Granularity::Channel,
                ("kernel", 2) => Granularity::Kernel,
                ("strided", 3) => Granularity::Strided {
                    strides: parts[2].split('/').map(|x| x.parse::<u8>().map_err(|_| bad())).collect::<Result<_>>()?,
                },
                _ => return Err(bad()),
            };
            Ok(Stage { granularity, target })
        })
        .collect()
}

/// Parses `3/3/3/7;7/7/7/15` into per-row level lists.
pub fn parse_level_rows(s: &str) -> Result<Vec<Vec<u32>>> {
    s.split(';')
        .filter(|r| !r.trim().is_empty())
        .map(|row| {
            row.trim()
                .split('/')
                .map(|x| x.trim().parse::<u32>().map_err(|_| Error::InvalidArgument(format!("bad level row '{row}'"))))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub dataset: Dataset,
    pub profile: Profile,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub arch: String,
    pub kinds: String,
    pub input_size: usize,
    pub train_limit: usize,
    pub test_limit: usize,
    pub synthetic_classes: usize,
    pub train: TrainConfig,
    pub retrain_epochs: usize,
    pub particles: usize,
    pub generations: usize,
    pub mutation_rate: f64,
    pub crossover_rate: f64,
    pub eval_set_size: usize,
    pub search_mode: Mode,
    pub first_conv_cap: f64,
    pub stages: Vec<Stage>,
    /// Largest allowed validation MCR increase per stage; negative disables.
    pub mcr_budget: f64,
    pub quant_levels: Vec<Vec<u32>>,
    pub quant_epochs: usize,
    pub quant_learning_rate: f32,
    pub transfer_small_arch: String,
    pub transfer_seeds: Vec<u64>,
    pub transfer_epochs: usize,
    pub bench_repeats: usize,
}

impl PipelineConfig {
    pub fn defaults(dataset: Dataset, profile: Profile) -> Self {
        let desk = profile == Profile::Desk;
        let (arch, kinds, size, small) = match (dataset, desk) {
            (Dataset::Mnist, true) => ("1-8-8-16-16-128-10", "i-c5-p-c5-p-f-f", 28, "1-8-8-8-8-128-10"),
            (Dataset::Mnist, false) => ("1-20-20-50-50-500-10", "i-c5-p-c5-p-f-f", 28, "1-20-20-20-20-500-10"),
            (Dataset::Cifar10, true) => ("3-16-16-16-16-32-10", "i-c5-p-c5-p-c5-f", 32, "3-16-16-11-11-19-10"),
            (Dataset::Cifar10, false) => ("3-32-32-32-32-64-10", "i-c5-p-c5-p-c5-f", 32, "3-32-32-21-21-38-10"),
            (Dataset::Synthetic, _) => ("1-4-4-8-8-16-4", "i-c3-p-c3-p-f-f", 16, "1-4-4-4-4-16-4"),
        };
        let stages = match dataset {
            Dataset::Cifar10 => "channel:0.46,strided:1.0:2",
            _ => "channel:0.5",
        };
        let limit = if desk { 10_000 } else { usize::MAX };
        Self {
            dataset,
            profile,
            data_dir: std::env::var_os("STRIDER_DATA_DIR").map_or_else(|| PathBuf::from("data"), PathBuf::from),
            out_dir: PathBuf::from("out"),
            seed: 2016,
            arch: arch.into(),
            kinds: kinds.into(),
            input_size: size,
            train_limit: if dataset == Dataset::Synthetic { 600 } else { limit },
            test_limit: if dataset == Dataset::Synthetic { 200 } else { limit },
            synthetic_classes: 4,
            train: TrainConfig { epochs: if desk { 15 } else { 40 }, ..TrainConfig::default() },
            retrain_epochs: if desk { 6 } else { 20 },
            particles: 32,
            generations: 30,
            mutation_rate: 0.02,
            crossover_rate: 0.9,
            eval_set_size: 1000,
            search_mode: Mode::Epf,
            first_conv_cap: 0.0,
            stages: parse_stages(stages).expect("default stages"),
            mcr_budget: 0.01,
            quant_levels: parse_level_rows("3/3/3/7;7/7/7/15;15/15/15/15;31/31/31/31").expect("default levels"),
            quant_epochs: if desk { 3 } else { 10 },
            quant_learning_rate: 1e-4,
            transfer_small_arch: small.into(),
            transfer_seeds: vec![1, 2, 3],
            transfer_epochs: if desk { 8 } else { 30 },
            bench_repeats: 20,
        }
    }

    pub fn arch(&self) -> Result<Arch> {
        Arch::parse(&self.arch, &LayerKind::parse_list(&self.kinds)?, self.input_size)
    }

    pub fn small_arch(&self) -> Result<Arch> {
        Arch::parse(&self.transfer_small_arch, &LayerKind::parse_list(&self.kinds)?, self.input_size)
    }

    /// Search settings for one stage on `arch`: the stage target on every
    /// conv layer, clipped by the caps.
    pub fn search_config(&self, arch: &Arch, stage: &Stage, seed: u64) -> SearchConfig {
        let n = arch.conv_positions().len();
        let mut caps = vec![1.0; n];
        if n > 0 {
            caps[0] = self.first_conv_cap;
        }
        let targets = caps.iter().map(|&c: &f64| stage.target.min(c)).collect();
        SearchConfig {
            n_particles: self.particles,
            generations: self.generations,
            granularity: stage.granularity.clone(),
            targets,
            caps,
            mutation_rate: self.mutation_rate,
            crossover_rate: self.crossover_rate,
            eval_set_size: self.eval_set_size,
            mode: self.search_mode,
            seed,
        }
    }

    /// Applies one `key = value` setting. `dataset` and `profile` are
    /// handled by the caller since they reset the defaults.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::InvalidArgument(format!("bad value '{v}' for {key}")))
        }
        let v = value.trim();
        match key {
            "dataset" => self.dataset = v.parse()?,
            "profile" => self.profile = v.parse()?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "seed" => self.seed = p(key, v)?,
            "arch" => self.arch = v.into(),
            "kinds" => self.kinds = v.into(),
            "input_size" => self.input_size = p(key, v)?,
            "train_limit" => self.train_limit = p(key, v)?,
            "test_limit" => self.test_limit = p(key, v)?,
            "synthetic_classes" => self.synthetic_classes = p(key, v)?,
            "batch_size" => self.train.batch_size = p(key, v)?,
            "learning_rate" => self.train.learning_rate = p(key, v)?,
            "rmsprop_decay" => self.train.rmsprop_decay = p(key, v)?,
            "rmsprop_epsilon" => self.train.rmsprop_epsilon = p(key, v)?,
            "epochs" => self.train.epochs = p(key, v)?,
            "lr_patience" => self.train.lr_patience = p(key, v)?,
            "early_stop" => self.train.early_stop = p(key, v)?,
            "retrain_epochs" => self.retrain_epochs = p(key, v)?,
            "particles" => self.particles = p(key, v)?,
            "generations" => self.generations = p(key, v)?,
            "mutation_rate" => self.mutation_rate = p(key, v)?,
            "crossover_rate" => self.crossover_rate = p(key, v)?,
            "eval_set_size" => self.eval_set_size = p(key, v)?,
            "search_mode" => {
                self.search_mode = match v {
                    "pf" => Mode::Pf,
                    "epf" => Mode::Epf,
                    _ => return Err(Error::InvalidArgument(format!("unknown search mode '{v}'"))),
                }
            }
            "first_conv_cap" => self.first_conv_cap = p(key, v)?,
            "stages" => self.stages = parse_stages(v)?,
            "mcr_budget" => self.mcr_budget = p(key, v)?,
            "quant_levels" => self.quant_levels = parse_level_rows(v)?,
            "quant_epochs" => self.quant_epochs = p(key, v)?,
            "quant_learning_rate" => self.quant_learning_rate = p(key, v)?,
            "transfer_small_arch" => self.transfer_small_arch = v.into(),
            "transfer_seeds" => {
                self.transfer_seeds = v.split(',').map(|s| p(key, s.trim())).collect::<Result<_>>()?;
            }
            "transfer_epochs" => self.transfer_epochs = p(key, v)?,
            "bench_repeats" => self.bench_repeats = p(key, v)?,
            _ => return Err(Error::InvalidArgument(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parses a config file body. `dataset` and `profile` pick the defaults
    /// first, the remaining keys are applied in file order.
    pub fn parse(text: &str, dataset: Option<Dataset>, profile: Option<Profile>) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config { line: i + 1, message: format!("expected key = value, got '{line}'") });
            };
            entries.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let find = |key: &str| entries.iter().rev().find(|e| e.1 == key);
        let ds = match (dataset, find("dataset")) {
            (Some(d), _) => d,
            (None, Some((line, _, v))) => v.parse().map_err(|e: Error| Error::Config { line: *line, message: e.to_string() })?,
            (None, None) => Dataset::Mnist,
        };
        let pr = match (profile, find("profile")) {
            (Some(p), _) => p,
            (None, Some((line, _, v))) => v.parse().map_err(|e: Error| Error::Config { line: *line, message: e.to_string() })?,
            (None, None) => Profile::Desk,
        };
        let mut cfg = Self::defaults(ds, pr);
        for (line, k, v) in &entries {
            if k == "dataset" || k == "profile" {
                continue;
            }
            cfg.set(k, v).map_err(|e| Error::Config { line: *line, message: e.to_string() })?;
        }
        Ok(cfg)
    }

    /// Every key with its current value, in a form [`PipelineConfig::parse`]
    /// reads back.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let stages: Vec<String> = self.stages.iter().map(Stage::name).collect();
        let levels: Vec<String> = self
            .quant_levels
            .iter()
            .map(|r| r.iter().map(u32::to_string).collect::<Vec<_>>().join("/"))
            .collect();
        let seeds: Vec<String> = self.transfer_seeds.iter().map(u64::to_string).collect();
        let mode = match self.search_mode {
            Mode::Pf => "pf",
            Mode::Epf => "epf",
        };
        let profile = match self.profile {
            Profile::Full => "full",
            Profile::Desk => "desk",
        };
        let t = &self.train;
        let rows: Vec<(&str, String)> = vec![
            ("dataset", self.dataset.name().into()),
            ("profile", profile.into()),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("seed", self.seed.to_string()),
            ("arch", self.arch.clone()),
            ("kinds", self.kinds.clone()),
            ("input_size", self.input_size.to_string()),
            ("train_limit", self.train_limit.to_string()),
            ("test_limit", self.test_limit.to_string()),
            ("synthetic_classes", self.synthetic_classes.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("rmsprop_decay", t.rmsprop_decay.to_string()),
            ("rmsprop_epsilon", t.rmsprop_epsilon.to_string()),
            ("epochs", t.epochs.to_string()),
            ("lr_patience", t.lr_patience.to_string()),
            ("early_stop", t.early_stop.to_string()),
            ("retrain_epochs", self.retrain_epochs.to_string()),
            ("particles", self.particles.to_string()),
            ("generations", self.generations.to_string()),
            ("mutation_rate", self.mutation_rate.to_string()),
            ("crossover_rate", self.crossover_rate.to_string()),
            ("eval_set_size", self.eval_set_size.to_string()),
            ("search_mode", mode.into()),
            ("first_conv_cap", self.first_conv_cap.to_string()),
            ("stages", stages.join(",")),
            ("mcr_budget", self.mcr_budget.to_string()),
            ("quant_levels", levels.join(";")),
            ("quant_epochs", self.quant_epochs.to_string()),
            ("quant_learning_rate", self.quant_learning_rate.to_string()),
            ("transfer_small_arch", self.transfer_small_arch.clone()),
            ("transfer_seeds", seeds.join(",")),
            ("transfer_epochs", self.transfer_epochs.to_string()),
            ("bench_repeats", self.bench_repeats.to_string()),
        ];
        for (k, v) in &rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_syntax() {
        let s = parse_stages("channel:0.46, strided:1.0:2/3,kernel:0.2").unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[1].granularity, Granularity::Strided { strides: vec![2, 3] });
        assert_eq!(s[1].name(), "strided:1:2/3");
        assert!(parse_stages("channel").is_err());
        assert!(parse_stages("channel:1.5").is_err());
        assert!(parse_stages("strided:0.5").is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut c = PipelineConfig::defaults(Dataset::Cifar10, Profile::Full);
        c.set("epochs", "7").unwrap();
        c.set("search_mode", "pf").unwrap();
        let back = PipelineConfig::parse(&c.render(), None, None).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn errors_carry_line_numbers() {
        match PipelineConfig::parse("seed = 1\n# c\nbogus = 2\n", None, None) {
            Err(Error::Config { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match PipelineConfig::parse("seed 1\n", None, None) {
            Err(Error::Config { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn explicit_dataset_overrides_file() {
        let c = PipelineConfig::parse("dataset = cifar10\nepochs = 2\n", Some(Dataset::Synthetic), None).unwrap();
        assert_eq!(c.dataset, Dataset::Synthetic);
        assert_eq!(c.train.epochs, 2);
    }

    #[test]
    fn level_rows() {
        assert_eq!(parse_level_rows("3/3/3/7;31/31/31/31").unwrap(), vec![vec![3, 3, 3, 7], vec![31; 4]]);
    }
}
