//! Experiment commands: baseline training, staged prune-retrain, fixed-point
//! retraining, lowering benchmark, the small-network comparison and mask
//! reports. Every command writes its artifacts under the configured output
//! directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{Dataset, PipelineConfig, Stage};
use crate::data::{self, Splits};
use crate::error::{Error, Result};
use crate::lowering::{lower_dense, lower_strided, mac_count, ConvGeometry, StridedPattern};
use crate::network::{
    evaluate_mcr, load_checkpoint, save_checkpoint, train, Arch, Network, TrainConfig, TrainReport,
};
use crate::pruning::{
    compact, kernel_heatmap_pgm, mask_summary_csv, prune_stats, PruneMaskSet, PruneStats,
};
use crate::quantization::{quantize_network, retrain_quantized, table_csv, QuantScheme};
use crate::search::{run_search, Granularity, NetworkEvaluator, SearchConfig, SearchSpace};
use crate::tensor::{gemm, Rng, Tensor4};

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Loads the configured dataset with its train/test limits applied.
pub fn load_dataset(cfg: &PipelineConfig) -> Result<Splits> {
    let splits = match cfg.dataset {
        Dataset::Mnist => data::load_mnist(&cfg.data_dir)?,
        Dataset::Cifar10 => data::load_cifar10(&cfg.data_dir)?,
        Dataset::Synthetic => {
            let arch = cfg.arch()?;
            let mut rng = Rng::new(cfg.seed).substream(0x5359_4e54);
            return data::synthetic_splits(
                cfg.synthetic_classes,
                arch.input_channels(),
                arch.input_size(),
                cfg.train_limit,
                cfg.test_limit,
                &mut rng,
            );
        }
    };
    splits.limit(cfg.train_limit, cfg.test_limit)
}

pub fn epochs_csv(report: &TrainReport) -> String {
    let mut s = String::from("epoch,loss,train_mcr,val_mcr,learning_rate\n");
    for e in &report.epochs {
        let val = e.val_mcr.map_or(String::new(), |v| format!("{v:.6}"));
        let _ = writeln!(s, "{},{:.6},{:.6},{},{}", e.epoch, e.loss, e.train_mcr, val, e.learning_rate);
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub report: TrainReport,
    pub test_mcr: f64,
    pub checkpoint: PathBuf,
}

/// Trains the configured architecture from scratch (early stopping on
/// validation MCR) and writes `baseline.spcn` and `train_epochs.csv`.
pub fn cmd_train(cfg: &PipelineConfig, splits: &Splits) -> Result<TrainOutcome> {
    ensure_dir(&cfg.out_dir)?;
    let arch = cfg.arch()?;
    let mut net = Network::init(&arch, &mut Rng::new(cfg.seed).substream(0x494e_4954));
    let tcfg = TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    let report = train(&mut net, &splits.train, Some(&splits.validation), &tcfg, None)?;
    let test_mcr = evaluate_mcr(&net, &splits.test, None)?;
    let checkpoint = cfg.out_dir.join("baseline.spcn");
    save_checkpoint(&checkpoint, &net, None)?;
    write_file(&cfg.out_dir.join("train_epochs.csv"), epochs_csv(&report))?;
    Ok(TrainOutcome { net, report, test_mcr, checkpoint })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: usize,
    pub granularity: String,
    pub target: f64,
    pub before: PruneStats,
    pub after: PruneStats,
    /// Test MCR before the stage, right after masking, and after retraining.
    pub mcr_before: f64,
    pub mcr_pruned: f64,
    pub mcr_after: f64,
    pub val_mcr_before: f64,
    pub val_mcr_after: f64,
    /// False when the stage broke the MCR budget and was rolled back.
    pub accepted: bool,
}

pub fn stage_reports_csv(reports: &[StageReport]) -> String {
    let mut s = String::from(
        "stage,granularity,target,params_before,params_after,connections_before,connections_after,\
         macs_before,macs_after,mcr_before,mcr_pruned,mcr_after,val_mcr_before,val_mcr_after,accepted\n",
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.stage,
            r.granularity,
            r.target,
            r.before.params,
            r.after.params,
            r.before.connections,
            r.after.connections,
            r.before.macs,
            r.after.macs,
            r.mcr_before,
            r.mcr_pruned,
            r.mcr_after,
            r.val_mcr_before,
            r.val_mcr_after,
            r.accepted
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub net: Network,
    pub mask: PruneMaskSet,
    pub reports: Vec<StageReport>,
}

/// One search + retrain stage on top of `(net, mask)`. Returns the retrained
/// network, the new mask and the stage report (not yet budget-checked).
pub fn prune_stage(
    cfg: &PipelineConfig,
    splits: &Splits,
    net: &Network,
    mask: &PruneMaskSet,
    stage: &Stage,
    index: usize,
) -> Result<(Network, PruneMaskSet, StageReport, String)> {
    let arch = net.arch();
    let scfg = cfg.search_config(arch, stage, cfg.seed.wrapping_add(index as u64));
    let space = SearchSpace::new(arch, mask, &scfg)?;
    let eval = NetworkEvaluator { net, data: &splits.validation };
    let result = run_search(&eval, &space, &scfg)?;
    let history = result.history_csv();
    let new_mask = result.best_mask;
    let before = prune_stats(arch, Some(mask))?;
    let after = prune_stats(arch, Some(&new_mask))?;
    let mcr_before = evaluate_mcr(net, &splits.test, Some(mask))?;
    let val_mcr_before = evaluate_mcr(net, &splits.validation, Some(mask))?;
    let mcr_pruned = evaluate_mcr(net, &splits.test, Some(&new_mask))?;
    let mut retrained = net.clone();
    let tcfg = TrainConfig { epochs: cfg.retrain_epochs, seed: cfg.seed.wrapping_add(index as u64), ..cfg.train.clone() };
    train(&mut retrained, &splits.train, Some(&splits.validation), &tcfg, Some(&new_mask))?;
    let mcr_after = evaluate_mcr(&retrained, &splits.test, Some(&new_mask))?;
    let val_mcr_after = evaluate_mcr(&retrained, &splits.validation, Some(&new_mask))?;
    let report = StageReport {
        stage: index,
        granularity: stage.name(),
        target: stage.target,
        before,
        after,
        mcr_before,
        mcr_pruned,
        mcr_after,
        val_mcr_before,
        val_mcr_after,
        accepted: true,
    };
    Ok((retrained, new_mask, report, history))
}

/// Runs the configured stages from a baseline checkpoint. A stage whose
/// retrained validation MCR exceeds the baseline's by more than the budget
/// is rolled back and ends the escalation.
pub fn cmd_prune(cfg: &PipelineConfig, splits: &Splits, checkpoint: &Path) -> Result<PruneOutcome> {
    if cfg.stages.is_empty() {
        return Err(Error::InvalidArgument("no pruning stages configured".into()));
    }
    ensure_dir(&cfg.out_dir)?;
    let (mut net, mask) = load_checkpoint(checkpoint)?;
    let mut mask = mask.unwrap_or_else(|| PruneMaskSet::full(net.arch()));
    let baseline_val = evaluate_mcr(&net, &splits.validation, Some(&mask))?;
    let mut reports = Vec::new();
    for (i, stage) in cfg.stages.iter().enumerate() {
        let (n2, m2, mut report, history) = prune_stage(cfg, splits, &net, &mask, stage, i + 1)?;
        write_file(&cfg.out_dir.join(format!("search_stage{}.csv", i + 1)), history)?;
        let over = cfg.mcr_budget >= 0.0 && report.val_mcr_after - baseline_val > cfg.mcr_budget;
        report.accepted = !over;
        reports.push(report);
        if over {
            break;
        }
        net = n2;
        mask = m2;
        save_checkpoint(&cfg.out_dir.join(format!("stage{}.spcn", i + 1)), &net, Some(&mask))?;
        let (small, residual) = compact(&net, &mask)?;
        save_checkpoint(&cfg.out_dir.join(format!("stage{}_compact.spcn", i + 1)), &small, Some(&residual))?;
    }
    save_checkpoint(&cfg.out_dir.join("pruned.spcn"), &net, Some(&mask))?;
    write_file(&cfg.out_dir.join("stages.csv"), stage_reports_csv(&reports))?;
    Ok(PruneOutcome { net, mask, reports })
}

#[derive(Debug, Clone)]
pub struct QuantOutcome {
    pub float_mcr: f64,
    /// `(levels per weighted layer, test MCR)` after retraining.
    pub retrained: Vec<(Vec<u32>, f64)>,
    /// Same rows with direct quantization only.
    pub direct: Vec<(Vec<u32>, f64)>,
}

/// For every level row: direct quantization and fixed-point retraining of
/// the checkpoint. Writes `quant.csv`, `quant_direct.csv` and one
/// checkpoint per retrained row.
pub fn cmd_quantize(cfg: &PipelineConfig, splits: &Splits, checkpoint: &Path) -> Result<QuantOutcome> {
    ensure_dir(&cfg.out_dir)?;
    let (net, mask) = load_checkpoint(checkpoint)?;
    let float_mcr = evaluate_mcr(&net, &splits.test, mask.as_ref())?;
    let mut retrained = Vec::new();
    let mut direct = Vec::new();
    for (r, row) in cfg.quant_levels.iter().enumerate() {
        let mut scheme = QuantScheme::from_weighted_levels(&net, row)?;
        let q = quantize_network(&net, &mut scheme)?;
        direct.push((row.clone(), evaluate_mcr(&q, &splits.test, mask.as_ref())?));
        let mut float = net.clone();
        let tcfg = TrainConfig {
            epochs: cfg.quant_epochs,
            learning_rate: cfg.quant_learning_rate,
            seed: cfg.seed.wrapping_add(r as u64),
            ..cfg.train.clone()
        };
        let (qnet, _) =
            retrain_quantized(&mut float, &mut scheme, &splits.train, Some(&splits.validation), &tcfg, mask.as_ref())?;
        retrained.push((row.clone(), evaluate_mcr(&qnet, &splits.test, mask.as_ref())?));
        save_checkpoint(&cfg.out_dir.join(format!("quant_row{}.spcn", r + 1)), &qnet, mask.as_ref())?;
    }
    write_file(&cfg.out_dir.join("quant.csv"), table_csv(&net, &retrained))?;
    write_file(&cfg.out_dir.join("quant_direct.csv"), table_csv(&net, &direct))?;
    Ok(QuantOutcome { float_mcr, retrained, direct })
}

/// One benchmarked lowering geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub geometry: ConvGeometry,
    pub stride: u8,
    pub offset: u8,
    pub dense_feature: (usize, usize),
    pub sparse_feature: (usize, usize),
    pub dense_kernel: (usize, usize),
    pub sparse_kernel: (usize, usize),
    pub dense_macs: u64,
    pub sparse_macs: u64,
    pub dense_ms: f64,
    pub sparse_ms: f64,
}

impl BenchRow {
    pub fn mac_ratio(&self) -> f64 {
        self.sparse_macs as f64 / self.dense_macs as f64
    }
}

/// Geometries benchmarked by default: the small worked example and the
/// conv layers of the MNIST and CIFAR-10 networks.
pub fn default_bench_geometries() -> Vec<ConvGeometry> {
    let g = |c, h, k, m| ConvGeometry { in_channels: c, in_h: h, in_w: h, kernel: k, out_maps: m };
    vec![g(3, 5, 3, 2), g(3, 32, 5, 32), g(32, 14, 5, 32), g(32, 5, 5, 64), g(1, 28, 5, 20), g(20, 12, 5, 50)]
}

pub fn lower_bench(geometries: &[ConvGeometry], patterns: &[(u8, u8)], repeats: usize) -> Result<Vec<BenchRow>> {
    let mut rng = Rng::new(7);
    let mut rows = Vec::new();
    for geom in geometries {
        geom.validate()?;
        let input = random_tensor([1, geom.in_channels, geom.in_h, geom.in_w], &mut rng)?;
        let kernels = random_tensor([geom.out_maps, geom.in_channels, geom.kernel, geom.kernel], &mut rng)?;
        for &(s, o) in patterns {
            let pattern = vec![StridedPattern::new(s, o)?; geom.in_channels];
            let dense = lower_dense(&input, &kernels)?;
            let sparse = lower_strided(&input, &kernels, &pattern)?;
            let time = |a: &crate::tensor::Matrix, b: &crate::tensor::Matrix| -> Result<f64> {
                let t = Instant::now();
                for _ in 0..repeats.max(1) {
                    std::hint::black_box(gemm(a, b)?);
                }
                Ok(t.elapsed().as_secs_f64() * 1e3 / repeats.max(1) as f64)
            };
            rows.push(BenchRow {
                geometry: *geom,
                stride: s,
                offset: o,
                dense_feature: (dense.feature.rows(), dense.feature.cols()),
                sparse_feature: (sparse.feature.rows(), sparse.feature.cols()),
                dense_kernel: (dense.kernel.rows(), dense.kernel.cols()),
                sparse_kernel: (sparse.kernel.rows(), sparse.kernel.cols()),
                dense_macs: mac_count(geom, None)?,
                sparse_macs: mac_count(geom, Some(&pattern))?,
                dense_ms: time(&dense.feature, &dense.kernel)?,
                sparse_ms: time(&sparse.feature, &sparse.kernel)?,
            });
        }
    }
    Ok(rows)
}

fn random_tensor(dims: [usize; 4], rng: &mut Rng) -> Result<Tensor4> {
    let n = dims.iter().product();
    Tensor4::from_vec(dims, (0..n).map(|_| rng.normal()).collect())
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(
        "geometry,stride,offset,dense_feature,sparse_feature,dense_kernel,sparse_kernel,dense_macs,sparse_macs,\
         dense_ms,sparse_ms,mac_ratio\n",
    );
    let d = |(r, c): (usize, usize)| format!("{r}x{c}");
    for r in rows {
        let g = &r.geometry;
        let _ = writeln!(
            s,
            "{}x{}x{}/k{}/m{},{},{},{},{},{},{},{},{},{:.4},{:.4},{:.6}",
            g.in_channels,
            g.in_h,
            g.in_w,
            g.kernel,
            g.out_maps,
            r.stride,
            r.offset,
            d(r.dense_feature),
            d(r.sparse_feature),
            d(r.dense_kernel),
            d(r.sparse_kernel),
            r.dense_macs,
            r.sparse_macs,
            r.dense_ms,
            r.sparse_ms,
            r.mac_ratio()
        );
    }
    s
}

pub fn cmd_lower_bench(cfg: &PipelineConfig) -> Result<Vec<BenchRow>> {
    ensure_dir(&cfg.out_dir)?;
    let rows = lower_bench(&default_bench_geometries(), &[(1, 0), (2, 0), (2, 1), (3, 0)], cfg.bench_repeats)?;
    write_file(&cfg.out_dir.join("lower_bench.csv"), bench_csv(&rows))?;
    Ok(rows)
}

/// Per-epoch validation MCR of one run, plus its final test MCR.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub seed: u64,
    pub run: &'static str,
    pub val_mcr: Vec<f64>,
    pub test_mcr: f64,
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub curves: Vec<Curve>,
    pub large_connections: usize,
    pub small_connections: usize,
}

impl TransferOutcome {
    fn finals(&self, run: &str) -> Vec<f64> {
        self.curves.iter().filter(|c| c.run == run).map(|c| c.test_mcr).collect()
    }

    pub fn median_final(&self, run: &str) -> f64 {
        median(&self.finals(run))
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn curves_csv(curves: &[Curve]) -> String {
    let mut s = String::from("seed,run,epoch,val_mcr\n");
    for c in curves {
        for (e, v) in c.val_mcr.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{:.6}", c.seed, c.run, e, v);
        }
    }
    s
}

fn conv_connections(arch: &Arch) -> usize {
    crate::pruning::count_connections(arch).iter().map(|c| c.connections).sum()
}

/// Per conv layer, the channel prune fraction taking `large` to `small`.
fn channel_targets(large: &Arch, small: &Arch) -> Result<Vec<f64>> {
    if large.kinds() != small.kinds() || large.input_size() != small.input_size() {
        return Err(Error::InvalidArgument(format!("{small} is not a narrowing of {large}")));
    }
    large
        .conv_positions()
        .iter()
        .map(|&p| {
            let (a, b) = (large.layers()[p].out_maps, small.layers()[p].out_maps);
            if b > a || b == 0 {
                return Err(Error::InvalidArgument(format!("{small} is not a narrowing of {large}")));
            }
            Ok(1.0 - b as f64 / a as f64)
        })
        .collect()
}

/// Three runs per seed with identical epoch counts: the large network from
/// scratch, the large network pruned to the small one's shape by channel
/// search then retrained, and the small network from scratch.
pub fn cmd_transfer(cfg: &PipelineConfig, splits: &Splits) -> Result<TransferOutcome> {
    ensure_dir(&cfg.out_dir)?;
    let large = cfg.arch()?;
    let small = cfg.small_arch()?;
    let targets = channel_targets(&large, &small)?;
    let tcfg = |seed: u64| TrainConfig { epochs: cfg.transfer_epochs, early_stop: 0, seed, ..cfg.train.clone() };
    let curve = |r: &TrainReport| r.epochs.iter().map(|e| e.val_mcr.unwrap_or(f64::NAN)).collect::<Vec<_>>();
    let mut curves = Vec::new();
    for &seed in &cfg.transfer_seeds {
        let mut big = Network::init(&large, &mut Rng::new(seed).substream(1));
        let r1 = train(&mut big, &splits.train, Some(&splits.validation), &tcfg(seed), None)?;
        curves.push(Curve { seed, run: "nw1", val_mcr: curve(&r1), test_mcr: evaluate_mcr(&big, &splits.test, None)? });

        let scfg = SearchConfig {
            n_particles: cfg.particles,
            generations: cfg.generations,
            granularity: Granularity::Channel,
            caps: vec![1.0; targets.len()],
            targets: targets.clone(),
            mutation_rate: cfg.mutation_rate,
            crossover_rate: cfg.crossover_rate,
            eval_set_size: cfg.eval_set_size,
            mode: cfg.search_mode,
            seed,
        };
        let full = PruneMaskSet::full(&large);
        let space = SearchSpace::new(&large, &full, &scfg)?;
        let found = run_search(&NetworkEvaluator { net: &big, data: &splits.validation }, &space, &scfg)?;
        let (mut pruned, residual) = compact(&big, &found.best_mask)?;
        let r2 = train(&mut pruned, &splits.train, Some(&splits.validation), &tcfg(seed), Some(&residual))?;
        curves.push(Curve {
            seed,
            run: "pruned_nw2",
            val_mcr: curve(&r2),
            test_mcr: evaluate_mcr(&pruned, &splits.test, Some(&residual))?,
        });

        let mut scratch = Network::init(&small, &mut Rng::new(seed).substream(2));
        let r3 = train(&mut scratch, &splits.train, Some(&splits.validation), &tcfg(seed), None)?;
        curves.push(Curve {
            seed,
            run: "scratch_nw2",
            val_mcr: curve(&r3),
            test_mcr: evaluate_mcr(&scratch, &splits.test, None)?,
        });
    }
    write_file(&cfg.out_dir.join("transfer_curves.csv"), curves_csv(&curves))?;
    let out = TransferOutcome { curves, large_connections: conv_connections(&large), small_connections: conv_connections(&small) };
    let mut summary = String::from("run,median_final_test_mcr\n");
    for run in ["nw1", "pruned_nw2", "scratch_nw2"] {
        let _ = writeln!(summary, "{run},{:.6}", out.median_final(run));
    }
    let _ = writeln!(summary, "connections,{}/{}", out.small_connections, out.large_connections);
    write_file(&cfg.out_dir.join("transfer_summary.csv"), summary)?;
    Ok(out)
}

/// Writes one PGM heatmap per conv layer plus the mask summary, and returns
/// a text summary of the checkpoint.
pub fn cmd_report(checkpoint: &Path, out_dir: &Path) -> Result<String> {
    ensure_dir(out_dir)?;
    let (net, mask) = load_checkpoint(checkpoint)?;
    let arch = net.arch();
    let mut s = String::new();
    let _ = writeln!(s, "arch: {arch} ({})", arch.kinds_string());
    let dense = prune_stats(arch, None)?;
    match &mask {
        None => {
            let _ = writeln!(s, "mask: none");
            let _ = writeln!(s, "params: {}\nconnections: {}\nmacs: {}", dense.params, dense.connections, dense.macs);
        }
        Some(m) => {
            let st = prune_stats(arch, Some(m))?;
            let _ = writeln!(s, "params: {} of {}", st.params, dense.params);
            let _ = writeln!(s, "connections: {} of {}", st.connections, dense.connections);
            let _ = writeln!(s, "macs: {} of {}", st.macs, dense.macs);
            let (small, _) = compact(&net, m)?;
            let _ = writeln!(s, "compacted arch: {}", small.arch());
            for (ci, &pos) in arch.conv_positions().iter().enumerate() {
                let name = arch.layer_name(pos);
                write_file(&out_dir.join(format!("{name}_kernels.pgm")), kernel_heatmap_pgm(m, ci, 8))?;
            }
            let csv = mask_summary_csv(arch, m)?;
            write_file(&out_dir.join("mask_summary.csv"), &csv)?;
            s.push_str(&csv);
        }
    }
    write_file(&out_dir.join("report.txt"), &s)?;
    Ok(s)
}

