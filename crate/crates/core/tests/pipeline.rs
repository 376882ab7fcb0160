use std::path::Path;
use std::process::Command;

use strider_core::config::{parse_level_rows, parse_stages, Dataset, PipelineConfig, Profile};
use strider_core::network::{evaluate_mcr, load_checkpoint, train, TrainConfig};
use strider_core::pipeline::{
    cmd_lower_bench, cmd_prune, cmd_quantize, cmd_report, cmd_train, load_dataset,
};
use strider_core::pruning::prune_stats;

fn synthetic(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::defaults(Dataset::Synthetic, Profile::Desk);
    cfg.out_dir = out.to_path_buf();
    cfg.train.epochs = 8;
    cfg.retrain_epochs = 2;
    cfg.particles = 8;
    cfg.generations = 4;
    cfg.eval_set_size = 60;
    cfg.quant_epochs = 1;
    cfg
}

#[test]
fn separable_two_class_set_is_learned_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synthetic(dir.path());
    cfg.synthetic_classes = 2;
    let splits = load_dataset(&cfg).unwrap();
    let out = cmd_train(&cfg, &splits).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("train_epochs.csv")).unwrap();
    assert!(csv.starts_with("epoch,loss,train_mcr,val_mcr,learning_rate\n"));
    assert_eq!(csv.lines().count(), out.report.epochs.len() + 1);

    let mut net = out.net.clone();
    let tcfg = TrainConfig { epochs: 20, early_stop: 0, ..cfg.train.clone() };
    train(&mut net, &splits.train, None, &tcfg, None).unwrap();
    assert_eq!(evaluate_mcr(&net, &splits.train, None).unwrap(), 0.0);
}

#[test]
fn fixed_seed_gives_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        let cfg = synthetic(d);
        let splits = load_dataset(&cfg).unwrap();
        cmd_train(&cfg, &splits).unwrap();
        cmd_prune(&cfg, &splits, &d.join("baseline.spcn")).unwrap();
    }
    for f in ["baseline.spcn", "train_epochs.csv", "pruned.spcn", "stages.csv", "search_stage1.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn prune_quantize_and_report_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synthetic(dir.path());
    cfg.stages = parse_stages("channel:0.5,kernel:0.25,strided:1.0:2/3").unwrap();
    cfg.mcr_budget = -1.0;
    let splits = load_dataset(&cfg).unwrap();
    let base = cmd_train(&cfg, &splits).unwrap();
    let pruned = cmd_prune(&cfg, &splits, &base.checkpoint).unwrap();
    assert_eq!(pruned.reports.len(), 3);

    let arch = base.net.arch().clone();
    for (i, r) in pruned.reports.iter().enumerate() {
        let (net, mask) = load_checkpoint(&dir.path().join(format!("stage{}.spcn", i + 1))).unwrap();
        let mask = mask.unwrap();
        assert_eq!(prune_stats(net.arch(), Some(&mask)).unwrap(), r.after);
        assert!(mask.layer(0).out_keep.iter().all(|&k| k), "first conv layer was pruned");
        assert!(mask.layer(0).kernel_keep.iter().all(|&k| k));
        assert!(r.after.params <= r.before.params);
        let (small, _) = load_checkpoint(&dir.path().join(format!("stage{}_compact.spcn", i + 1))).unwrap();
        assert!(small.param_count() <= arch.param_count());
    }
    assert_eq!(pruned.mask.layer(1).out_keep.iter().filter(|&&k| !k).count(), 4);

    cfg.quant_levels = parse_level_rows("3/3/3/3;31/31/31/31").unwrap();
    let q = cmd_quantize(&cfg, &splits, &dir.path().join("pruned.spcn")).unwrap();
    assert_eq!(q.retrained.len(), 2);
    let table = std::fs::read_to_string(dir.path().join("quant.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("C1_M,C3_M,F5_M,F6_M,test_MCR"));
    assert!(lines.next().unwrap().starts_with("3,3,3,3,"));
    assert!(dir.path().join("quant_direct.csv").exists());

    let report_dir = dir.path().join("report");
    let text = cmd_report(&dir.path().join("pruned.spcn"), &report_dir).unwrap();
    assert!(text.contains("compacted arch: 1-4-4-4-4-16-4"), "{text}");
    let pgm = std::fs::read(report_dir.join("C3_kernels.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));
}

#[test]
fn huge_level_count_is_near_identity() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synthetic(dir.path());
    cfg.quant_levels = parse_level_rows("4095/4095/4095/4095").unwrap();
    cfg.quant_epochs = 0;
    let splits = load_dataset(&cfg).unwrap();
    let base = cmd_train(&cfg, &splits).unwrap();
    let q = cmd_quantize(&cfg, &splits, &base.checkpoint).unwrap();
    assert!((q.direct[0].1 - q.float_mcr).abs() <= 0.003);
}

#[test]
fn empty_search_leaves_counts_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synthetic(dir.path());
    cfg.stages = parse_stages("channel:0").unwrap();
    cfg.generations = 0;
    cfg.retrain_epochs = 1;
    let splits = load_dataset(&cfg).unwrap();
    let base = cmd_train(&cfg, &splits).unwrap();
    let out = cmd_prune(&cfg, &splits, &base.checkpoint).unwrap();
    let r = &out.reports[0];
    assert_eq!(r.before, r.after);
    assert!(out.mask.is_full());
}

#[test]
fn lower_bench_writes_exact_mac_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synthetic(dir.path());
    cfg.bench_repeats = 1;
    let rows = cmd_lower_bench(&cfg).unwrap();
    let first = rows.iter().find(|r| r.geometry.in_h == 5 && r.stride == 2 && r.offset == 0).unwrap();
    assert_eq!((first.dense_feature, first.sparse_feature), ((9, 27), (9, 15)));
    assert_eq!((first.dense_kernel, first.sparse_kernel), ((27, 2), (15, 2)));
    for r in &rows {
        assert_eq!(r.sparse_macs * r.dense_feature.1 as u64, r.dense_macs * r.sparse_feature.1 as u64);
        if r.stride == 1 {
            assert_eq!(r.sparse_feature, r.dense_feature);
        }
    }
    assert!(dir.path().join("lower_bench.csv").exists());
}

fn strider() -> Command {
    Command::new(env!("CARGO_BIN_EXE_strider"))
}

#[test]
fn cli_print_config_round_trips() {
    let out = strider().args(["--dataset", "synthetic", "--seed", "9", "print-config"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("seed = 9"), "{text}");
    let cfg = PipelineConfig::parse(&text, None, None).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.dataset, Dataset::Synthetic);
}

#[test]
fn cli_train_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "dataset = synthetic\nepochs = 2\n").unwrap();
    let out = strider()
        .arg("--config")
        .arg(&conf)
        .arg("--out")
        .arg(dir.path())
        .arg("train")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("test MCR"));

    let out = strider().arg("--out").arg(dir.path().join("r")).arg("report").arg(dir.path().join("baseline.spcn")).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("mask: none"));
}

#[test]
fn cli_reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "seed = 1\nbogus_key = 3\n").unwrap();
    let out = strider().arg("--config").arg(&conf).arg("print-config").output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: ") && err.contains("line 2"), "{err}");

    let out = strider().args(["report", "/nonexistent.spcn"]).output().unwrap();
    assert!(!out.status.success());
}
