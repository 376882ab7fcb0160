//! Particle-filter search over pruning masks, optionally hybridized with a
//! genetic algorithm (evolutionary particle filter).

use rayon::prelude::*;

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::lowering::StridedPattern;
use crate::network::{Arch, Network, Prepared};
use crate::pruning::PruneMaskSet;
use crate::tensor::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Granularity {
    Channel,
    Kernel,
    /// Per-source-map strided patterns; strides drawn from the list.
    Strided { strides: Vec<u8> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Pf,
    Epf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub n_particles: usize,
    pub generations: usize,
    pub granularity: Granularity,
    /// Prune fraction per conv layer, relative to that layer's candidates.
    pub targets: Vec<f64>,
    /// Upper bound on each conv layer's prune fraction.
    pub caps: Vec<f64>,
    pub mutation_rate: f64,
    pub crossover_rate: f64,
    pub eval_set_size: usize,
    pub mode: Mode,
    pub seed: u64,
}

impl SearchConfig {
    /// Same target on every conv layer, clipped to its cap; the first conv
    /// layer's cap is 0.
    pub fn uniform(arch: &Arch, granularity: Granularity, target: f64) -> Self {
        let n = arch.conv_positions().len();
        let mut caps = vec![1.0; n];
        if n > 0 {
            caps[0] = 0.0;
        }
        let targets = caps.iter().map(|&c: &f64| target.min(c)).collect();
        Self { targets, caps, granularity, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.n_particles < 2 {
            return Err(Error::InvalidArgument("at least 2 particles are needed".into()));
        }
        if !unit(self.mutation_rate) || !unit(self.crossover_rate) {
            return Err(Error::InvalidArgument("rates must lie in [0, 1]".into()));
        }
        if self.targets.len() != self.caps.len() {
            return Err(Error::InvalidArgument("targets and caps differ in length".into()));
        }
        for (i, (&t, &c)) in self.targets.iter().zip(&self.caps).enumerate() {
            if !unit(t) || !unit(c) {
                return Err(Error::InvalidArgument(format!("target/cap of conv layer {i} outside [0, 1]")));
            }
            if t > c {
                return Err(Error::Infeasible(format!("conv layer {i}: target {t} exceeds cap {c}")));
            }
        }
        if self.eval_set_size == 0 {
            return Err(Error::InvalidArgument("eval_set_size must be positive".into()));
        }
        if let Granularity::Strided { strides } = &self.granularity {
            if strides.is_empty() || strides.contains(&0) {
                return Err(Error::InvalidArgument("strided search needs strides >= 1".into()));
            }
        }
        Ok(())
    }
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            n_particles: 32,
            generations: 30,
            granularity: Granularity::Channel,
            targets: Vec::new(),
            caps: Vec::new(),
            mutation_rate: 0.02,
            crossover_rate: 0.9,
            eval_set_size: 1000,
            mode: Mode::Epf,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unit {
    Channel(usize),
    Kernel(usize, usize),
    Source(usize),
}

#[derive(Debug, Clone)]
struct LayerSpace {
    units: Vec<Unit>,
    prune: usize,
}

/// Candidate units of every conv layer relative to a base mask.
#[derive(Debug, Clone)]
pub struct SearchSpace {
    arch: Arch,
    base: PruneMaskSet,
    granularity: Granularity,
    layers: Vec<LayerSpace>,
}

impl SearchSpace {
    pub fn new(arch: &Arch, base: &PruneMaskSet, cfg: &SearchConfig) -> Result<Self> {
        cfg.validate()?;
        base.validate(arch)?;
        let n = arch.conv_positions().len();
        if cfg.targets.len() != n {
            return Err(Error::InvalidArgument(format!("{} targets for {n} conv layers", cfg.targets.len())));
        }
        let mut layers = Vec::with_capacity(n);
        for ci in 0..n {
            let m = base.layer(ci);
            let units: Vec<Unit> = match &cfg.granularity {
                Granularity::Channel => (0..m.out_maps()).filter(|&o| m.out_keep[o]).map(Unit::Channel).collect(),
                Granularity::Kernel => (0..m.out_maps())
                    .flat_map(|o| (0..m.in_maps()).map(move |i| (o, i)))
                    .filter(|&(o, i)| base.kernel_alive(ci, o, i))
                    .map(|(o, i)| Unit::Kernel(o, i))
                    .collect(),
                Granularity::Strided { .. } => {
                    let alive = base.in_keep(ci);
                    (0..m.in_maps()).filter(|&i| alive[i] && m.strided[i].is_dense()).map(Unit::Source).collect()
                }
            };
            let prune = (cfg.targets[ci] * units.len() as f64).round() as usize;
            if matches!(cfg.granularity, Granularity::Channel) && prune > 0 && prune >= units.len() {
                return Err(Error::Infeasible(format!("conv layer {ci}: target would remove every map")));
            }
            layers.push(LayerSpace { units, prune });
        }
        Ok(Self { arch: arch.clone(), base: base.clone(), granularity: cfg.granularity.clone(), layers })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    /// Pruned-unit count per conv layer.
    pub fn prune_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.prune).collect()
    }

    pub fn unit_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.units.len()).collect()
    }

    /// Mask obtained by applying `genome` on top of the base mask.
    pub fn to_mask(&self, genome: &Genome) -> Result<PruneMaskSet> {
        let mut m = self.base.clone();
        for (ci, (ls, g)) in self.layers.iter().zip(&genome.layers).enumerate() {
            for (u, unit) in ls.units.iter().enumerate() {
                if !g.pruned[u] {
                    continue;
                }
                match *unit {
                    Unit::Channel(o) => m.drop_channel(ci, o),
                    Unit::Kernel(o, i) => m.layer_mut(ci).set_kernel(o, i, false),
                    Unit::Source(i) => {
                        m.layer_mut(ci).strided[i] = StridedPattern::new(g.strides[u], g.offsets[u])?;
                    }
                }
            }
        }
        m.validate(&self.arch)?;
        Ok(m)
    }

    fn random_genome(&self, rng: &mut Rng) -> Result<Genome> {
        let layers = self
            .layers
            .iter()
            .map(|ls| {
                let n = ls.units.len();
                let mut pruned = vec![false; n];
                for i in rng.sample_indices(n, ls.prune) {
                    pruned[i] = true;
                }
                let (strides, offsets) = match &self.granularity {
                    Granularity::Strided { strides } => {
                        let mut s = Vec::with_capacity(n);
                        let mut o = Vec::with_capacity(n);
                        for _ in 0..n {
                            let st = strides[rng.uniform_int(strides.len())?];
                            s.push(st);
                            o.push(rng.uniform_int(st as usize)? as u8);
                        }
                        (s, o)
                    }
                    _ => (Vec::new(), Vec::new()),
                };
                Ok(LayerGenes { pruned, strides, offsets })
            })
            .collect::<Result<_>>()?;
        Ok(Genome { layers })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerGenes {
    /// One bit per candidate unit, `true` = pruned.
    pub pruned: Vec<bool>,
    pub strides: Vec<u8>,
    pub offsets: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Genome {
    pub layers: Vec<LayerGenes>,
}

impl Genome {
    pub fn pruned_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.pruned.iter().filter(|&&b| b).count()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub genome: Genome,
    /// Normalized importance weight.
    pub weight: f64,
    /// `1 − MCR` from the last weighting.
    pub raw_weight: f64,
    pub last_mcr: f64,
}

#[derive(Debug, Clone)]
pub struct Swarm {
    pub particles: Vec<Particle>,
    pub generation: usize,
}

/// Scores masks by misclassification rate on a sample subset.
pub trait Evaluator: Sync {
    /// Number of samples available for weighting.
    fn len(&self) -> usize;
    fn mcr(&self, mask: &PruneMaskSet, samples: &[usize]) -> Result<f64>;
}

/// Evaluates masks on a trained network over a labeled set.
pub struct NetworkEvaluator<'a> {
    pub net: &'a Network,
    pub data: &'a LabeledSet,
}

impl Evaluator for NetworkEvaluator<'_> {
    fn len(&self) -> usize {
        self.data.len()
    }

    fn mcr(&self, mask: &PruneMaskSet, samples: &[usize]) -> Result<f64> {
        let prepared = Prepared::new(self.net, Some(mask))?;
        crate::network::mcr_prepared(&prepared, self.data, samples)
    }
}

pub fn init_swarm(space: &SearchSpace, cfg: &SearchConfig, rng: &mut Rng) -> Result<Swarm> {
    let n = cfg.n_particles;
    let particles = (0..n)
        .map(|_| {
            Ok(Particle { genome: space.random_genome(rng)?, weight: 1.0 / n as f64, raw_weight: 0.0, last_mcr: 1.0 })
        })
        .collect::<Result<_>>()?;
    Ok(Swarm { particles, generation: 0 })
}

/// Sets raw weights to `1 − MCR` and normalizes them.
pub fn weigh(swarm: &mut Swarm, space: &SearchSpace, eval: &dyn Evaluator, samples: &[usize]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mcrs: Vec<f64> = swarm
        .particles
        .par_iter()
        .map(|p| eval.mcr(&space.to_mask(&p.genome)?, samples))
        .collect::<Result<_>>()?;
    for (p, m) in swarm.particles.iter_mut().zip(mcrs) {
        p.last_mcr = m;
        p.raw_weight = 1.0 - m;
    }
    normalize(swarm);
    Ok(())
}

fn normalize(swarm: &mut Swarm) {
    let total: f64 = swarm.particles.iter().map(|p| p.raw_weight).sum();
    for p in &mut swarm.particles {
        p.weight = if total > 0.0 { p.raw_weight / total } else { 0.0 };
    }
}

/// `1 / Σ wᵢ²` of normalized weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().map(|w| w * w).sum();
    if s > 0.0 {
        1.0 / s
    } else {
        0.0
    }
}

/// Systematic resampling: `n` strata `(u0 + j) / n` with `u0 ∈ [0, 1)`
/// walked against the weight CDF. Returns the chosen index per slot.
pub fn systematic_resample(weights: &[f64], n: usize, u0: f64) -> Result<Vec<usize>> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::DegenerateSwarm);
    }
    let mut out = Vec::with_capacity(n);
    let mut cdf = weights[0] / total;
    let mut i = 0;
    for j in 0..n {
        let u = (u0 + j as f64) / n as f64;
        while u >= cdf && i + 1 < weights.len() {
            i += 1;
            cdf += weights[i] / total;
        }
        out.push(i);
    }
    Ok(out)
}

/// SIR step: systematic resampling from the normalized weights, which are
/// then reset to `1/N`.
pub fn resample_sir(swarm: &mut Swarm, rng: &mut Rng) -> Result<()> {
    let w: Vec<f64> = swarm.particles.iter().map(|p| p.weight).collect();
    let n = swarm.particles.len();
    let picks = systematic_resample(&w, n, rng.uniform())?;
    swarm.particles = picks.into_iter().map(|i| swarm.particles[i].clone()).collect();
    for p in &mut swarm.particles {
        p.weight = 1.0 / n as f64;
    }
    Ok(())
}

fn mutate(genome: &mut Genome, rate: f64, strides: Option<&[u8]>, rng: &mut Rng) -> Result<()> {
    if rate == 0.0 {
        return Ok(());
    }
    for lg in &mut genome.layers {
        let n = lg.pruned.len();
        let pruned = lg.pruned.iter().filter(|&&b| b).count();
        if pruned == 0 || pruned == n {
            continue;
        }
        let mut touched = vec![false; n];
        for u in 0..n {
            if touched[u] || !rng.bernoulli(rate) {
                continue;
            }
            let other: Vec<usize> = (0..n).filter(|&v| !touched[v] && lg.pruned[v] != lg.pruned[u]).collect();
            if other.is_empty() {
                continue;
            }
            let v = other[rng.uniform_int(other.len())?];
            lg.pruned.swap(u, v);
            touched[u] = true;
            touched[v] = true;
        }
        if strides.is_some() {
            for u in 0..lg.offsets.len() {
                if rng.bernoulli(rate) {
                    lg.offsets[u] = rng.uniform_int(lg.strides[u] as usize)? as u8;
                }
            }
        }
    }
    Ok(())
}

fn strides_of(space: &SearchSpace) -> Option<&[u8]> {
    match &space.granularity {
        Granularity::Strided { strides } => Some(strides),
        _ => None,
    }
}

/// Transition: fraction-preserving swaps of pruned and kept units, plus
/// offset redraws for strided genomes.
pub fn perturb(swarm: &mut Swarm, space: &SearchSpace, cfg: &SearchConfig, rng: &mut Rng) -> Result<()> {
    for p in &mut swarm.particles {
        mutate(&mut p.genome, cfg.mutation_rate, strides_of(space), rng)?;
    }
    Ok(())
}

/// Child with layers `< point` from `a` and the rest from `b`.
pub fn crossover(a: &Genome, b: &Genome, point: usize) -> Genome {
    let layers = a.layers[..point].iter().chain(&b.layers[point..]).cloned().collect();
    Genome { layers }
}

fn best_index(swarm: &Swarm) -> usize {
    let mut best = 0;
    for (i, p) in swarm.particles.iter().enumerate() {
        if p.raw_weight > swarm.particles[best].raw_weight {
            best = i;
        }
    }
    best
}

fn roulette(cdf: &[f64], rng: &mut Rng) -> usize {
    let u = rng.uniform() * cdf.last().copied().unwrap_or(0.0);
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

/// One GA generation: the elite survives unchanged, every other slot gets a
/// child of two fitness-proportional parents (layer-boundary crossover,
/// then swap mutation) weighted by its parents' mean weight.
pub fn ga_step(swarm: &mut Swarm, space: &SearchSpace, cfg: &SearchConfig, rng: &mut Rng) -> Result<()> {
    let n = swarm.particles.len();
    let elite = best_index(swarm);
    let mut acc = 0.0;
    let cdf: Vec<f64> = swarm
        .particles
        .iter()
        .map(|p| {
            acc += p.weight.max(0.0);
            acc
        })
        .collect();
    if !(acc > 0.0) {
        return Err(Error::DegenerateSwarm);
    }
    let layers = space.layers.len();
    let mut next = Vec::with_capacity(n);
    next.push(swarm.particles[elite].clone());
    while next.len() < n {
        let a = &swarm.particles[roulette(&cdf, rng)];
        let b = &swarm.particles[roulette(&cdf, rng)];
        let mut genome = if layers >= 2 && rng.bernoulli(cfg.crossover_rate) {
            let point = 1 + rng.uniform_int(layers - 1)?;
            crossover(&a.genome, &b.genome, point)
        } else {
            a.genome.clone()
        };
        mutate(&mut genome, cfg.mutation_rate, strides_of(space), rng)?;
        let weight = 0.5 * (a.weight + b.weight);
        let raw_weight = 0.5 * (a.raw_weight + b.raw_weight);
        next.push(Particle { genome, weight, raw_weight, last_mcr: 1.0 - raw_weight });
    }
    swarm.particles = next;
    let total: f64 = swarm.particles.iter().map(|p| p.weight).sum();
    for p in &mut swarm.particles {
        p.weight /= total;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationStats {
    pub generation: usize,
    pub best_weight: f64,
    pub mean_weight: f64,
    pub ess: f64,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best_mask: PruneMaskSet,
    pub best_genome: Genome,
    /// Highest raw weight ever observed.
    pub best_weight: f64,
    pub history: Vec<GenerationStats>,
}

impl SearchResult {
    pub fn history_csv(&self) -> String {
        let mut s = String::from("generation,best_weight,mean_weight,ess\n");
        for h in &self.history {
            s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", h.generation, h.best_weight, h.mean_weight, h.ess));
        }
        s
    }
}

/// Runs `generations` rounds of weigh → (GA) → resample → perturb, plus a
/// final weighing, and returns the best genome seen.
pub fn run_search(eval: &dyn Evaluator, space: &SearchSpace, cfg: &SearchConfig) -> Result<SearchResult> {
    if eval.len() == 0 {
        return Err(Error::Empty("evaluation set"));
    }
    let root = Rng::new(cfg.seed);
    let mut rng = root.substream(1);
    let mut sample_rng = root.substream(2);
    let mut swarm = init_swarm(space, cfg, &mut rng)?;
    let size = cfg.eval_set_size.min(eval.len());
    let mut best: Option<(f64, Genome)> = None;
    let mut history = Vec::new();
    for g in 0..=cfg.generations {
        swarm.generation = g;
        let mut samples = sample_rng.sample_indices(eval.len(), size);
        samples.sort_unstable();
        weigh(&mut swarm, space, eval, &samples)?;
        let bi = best_index(&swarm);
        let top = &swarm.particles[bi];
        if best.as_ref().is_none_or(|(w, _)| top.raw_weight > *w) {
            best = Some((top.raw_weight, top.genome.clone()));
        }
        let weights: Vec<f64> = swarm.particles.iter().map(|p| p.weight).collect();
        history.push(GenerationStats {
            generation: g,
            best_weight: top.raw_weight,
            mean_weight: swarm.particles.iter().map(|p| p.raw_weight).sum::<f64>() / swarm.particles.len() as f64,
            ess: effective_sample_size(&weights),
        });
        if g == cfg.generations {
            break;
        }
        let elite = top.clone();
        if cfg.mode == Mode::Epf {
            ga_step(&mut swarm, space, cfg, &mut rng)?;
        }
        resample_sir(&mut swarm, &mut rng)?;
        perturb(&mut swarm, space, cfg, &mut rng)?;
        if cfg.mode == Mode::Epf && !swarm.particles.iter().any(|p| p.genome == elite.genome) {
            swarm.particles[0] = elite;
        }
    }
    let (best_weight, best_genome) = best.expect("at least one weighing");
    Ok(SearchResult { best_mask: space.to_mask(&best_genome)?, best_genome, best_weight, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LayerKind;

    fn arch() -> Arch {
        let kinds = LayerKind::parse_list("i-c3-c3-f").unwrap();
        Arch::parse("1-4-6-2", &kinds, 7).unwrap()
    }

    fn cfg(target: f64) -> SearchConfig {
        SearchConfig { targets: vec![target, target], caps: vec![1.0, 1.0], n_particles: 8, ..SearchConfig::default() }
    }

    #[test]
    fn zero_target_gives_full_genomes() {
        let a = arch();
        let space = SearchSpace::new(&a, &PruneMaskSet::full(&a), &cfg(0.0)).unwrap();
        let s = init_swarm(&space, &cfg(0.0), &mut Rng::new(1)).unwrap();
        for p in &s.particles {
            assert!(space.to_mask(&p.genome).unwrap().is_full());
            assert!((p.weight - 0.125).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_prune_fraction_and_determinism() {
        let a = arch();
        let c = cfg(0.5);
        let space = SearchSpace::new(&a, &PruneMaskSet::full(&a), &c).unwrap();
        let s1 = init_swarm(&space, &c, &mut Rng::new(7)).unwrap();
        let s2 = init_swarm(&space, &c, &mut Rng::new(7)).unwrap();
        for (p, q) in s1.particles.iter().zip(&s2.particles) {
            assert_eq!(p.genome.pruned_counts(), vec![2, 3]);
            assert_eq!(p.genome, q.genome);
        }
    }

    #[test]
    fn infeasible_targets() {
        let a = arch();
        let mut c = cfg(1.0);
        assert!(matches!(SearchSpace::new(&a, &PruneMaskSet::full(&a), &c), Err(Error::Infeasible(_))));
        c.caps = vec![0.0, 1.0];
        c.targets = vec![0.5, 0.5];
        assert!(matches!(SearchSpace::new(&a, &PruneMaskSet::full(&a), &c), Err(Error::Infeasible(_))));
    }

    #[test]
    fn systematic_copy_counts() {
        let picks = systematic_resample(&[0.9, 0.1], 10, 0.37).unwrap();
        assert_eq!(picks.iter().filter(|&&i| i == 0).count(), 9);
        let uni = systematic_resample(&[0.25; 4], 4, 0.99).unwrap();
        assert_eq!(uni, vec![0, 1, 2, 3]);
        let one = systematic_resample(&[0.0, 1.0, 0.0], 3, 0.5).unwrap();
        assert_eq!(one, vec![1, 1, 1]);
        assert!(matches!(systematic_resample(&[0.0, 0.0], 2, 0.1), Err(Error::DegenerateSwarm)));
    }

    #[test]
    fn ess_closed_forms() {
        assert!((effective_sample_size(&[0.1; 10]) - 10.0).abs() < 1e-12);
        assert_eq!(effective_sample_size(&[1.0, 0.0, 0.0]), 1.0);
        assert_eq!(effective_sample_size(&[0.5, 0.5, 0.0, 0.0]), 2.0);
    }

    #[test]
    fn forced_swap_flips_position() {
        let mut g = Genome { layers: vec![LayerGenes { pruned: vec![true, false], strides: vec![], offsets: vec![] }] };
        mutate(&mut g, 1.0, None, &mut Rng::new(1)).unwrap();
        assert_eq!(g.layers[0].pruned, vec![false, true]);
        let before = g.clone();
        mutate(&mut g, 0.0, None, &mut Rng::new(1)).unwrap();
        assert_eq!(g, before);
    }

    #[test]
    fn crossover_takes_prefix_and_suffix() {
        let mk = |b: bool| LayerGenes { pruned: vec![b; 3], strides: vec![], offsets: vec![] };
        let a = Genome { layers: vec![mk(true), mk(true), mk(true)] };
        let b = Genome { layers: vec![mk(false), mk(false), mk(false)] };
        let c = crossover(&a, &b, 2);
        assert_eq!(c.layers, vec![mk(true), mk(true), mk(false)]);
        assert_eq!(crossover(&a, &a, 1), a);
    }
}
