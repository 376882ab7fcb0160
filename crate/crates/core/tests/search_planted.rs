mod common;

use strider_core::pruning::PruneMaskSet;
use strider_core::search::{run_search, Granularity, Mode, SearchConfig, SearchSpace};

use common::{planted_arch, planted_oracle};

fn config(mode: Mode, seed: u64) -> SearchConfig {
    SearchConfig {
        n_particles: 32,
        generations: 30,
        granularity: Granularity::Channel,
        targets: vec![0.5; 4],
        caps: vec![1.0; 4],
        eval_set_size: 100,
        mode,
        seed,
        ..SearchConfig::default()
    }
}

#[test]
fn pruning_a_critical_map_lowers_the_weight() {
    let arch = planted_arch();
    let oracle = planted_oracle(0);
    let full = PruneMaskSet::full(&arch);
    let mut one = full.clone();
    let (l, m) = oracle.critical[0];
    one.drop_channel(l, m);
    use strider_core::search::Evaluator;
    let keep = 1.0 - oracle.mcr(&full, &[]).unwrap();
    let cut = 1.0 - oracle.mcr(&one, &[]).unwrap();
    assert!(cut < keep);
}

#[test]
fn epf_keeps_planted_units_and_improves_the_swarm() {
    let arch = planted_arch();
    let full = PruneMaskSet::full(&arch);
    let (mut kept, mut total, mut rising, mut epf_wins) = (0, 0, 0, 0);
    for seed in 0..20 {
        let oracle = planted_oracle(seed);
        let cfg = config(Mode::Epf, seed);
        let space = SearchSpace::new(&arch, &full, &cfg).unwrap();
        let epf = run_search(&oracle, &space, &cfg).unwrap();
        assert_eq!(space.prune_counts(), vec![4; 4]);
        kept += oracle.critical.len() - oracle.pruned_critical(&epf.best_mask);
        total += oracle.critical.len();
        let h = &epf.history;
        if h.last().unwrap().mean_weight >= h[0].mean_weight {
            rising += 1;
        }

        let pf_cfg = config(Mode::Pf, seed);
        let pf = run_search(&oracle, &space, &pf_cfg).unwrap();
        if epf.best_weight >= pf.best_weight {
            epf_wins += 1;
        }
    }
    assert!(kept as f64 >= 0.9 * total as f64, "{kept}/{total} critical maps kept");
    assert!(rising >= 18, "mean weight rose in {rising}/20 runs");
    assert!(epf_wins >= 14, "EPF matched or beat PF in {epf_wins}/20 runs");
}

#[test]
fn same_seed_same_result() {
    let arch = planted_arch();
    let full = PruneMaskSet::full(&arch);
    let oracle = planted_oracle(3);
    let cfg = config(Mode::Epf, 3);
    let space = SearchSpace::new(&arch, &full, &cfg).unwrap();
    let a = run_search(&oracle, &space, &cfg).unwrap();
    let b = run_search(&oracle, &space, &cfg).unwrap();
    assert_eq!(a.best_genome, b.best_genome);
    assert_eq!(a.history_csv(), b.history_csv());
}
