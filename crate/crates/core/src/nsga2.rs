use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::genotype::{crossover, mutate, sample, Genotype};
use crate::score::ScoreReport;

/// Population member with its minimized objectives and the NSGA-II
/// bookkeeping (front rank, crowding distance).
#[derive(Debug, Clone)]
pub struct Individual {
    pub genotype: Genotype,
    pub objectives: Vec<f64>,
    pub rank: usize,
    pub crowding: f64,
}

/// Fast non-dominated sort (minimization). Returns fronts of indices into
/// `objectives`; within a front, indices stay ascending. With a single
/// objective this degenerates to equal-value groups in ascending value
/// order.
pub fn non_dominated_sort(objectives: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let n = objectives.len();
    if n == 0 {
        return Vec::new();
    }
    let mut dominated: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut dom_count = vec![0usize; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if dominates(&objectives[i], &objectives[j]) {
                dominated[i].push(j);
                dom_count[j] += 1;
            } else if dominates(&objectives[j], &objectives[i]) {
                dominated[j].push(i);
                dom_count[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dom_count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &p in &current {
            for &q in &dominated[p] {
                dom_count[q] -= 1;
                if dom_count[q] == 0 {
                    next.push(q);
                }
            }
        }
        next.sort_unstable();
        fronts.push(std::mem::replace(&mut current, next));
    }
    fronts
}

/// a dominates b: no objective worse, at least one strictly better.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    let mut strictly = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        if x < y {
            strictly = true;
        }
    }
    strictly
}

/// Crowding distances for one front, parallel to `front` order. Boundary
/// members per objective get infinity; interior members accumulate the
/// normalized gap between their neighbors; a zero-range objective
/// contributes nothing.
pub fn crowding_distance(front: &[usize], objectives: &[Vec<f64>]) -> Vec<f64> {
    let len = front.len();
    let mut dist = vec![0.0f64; len];
    if len == 0 {
        return dist;
    }
    let m = objectives[front[0]].len();
    for obj in 0..m {
        let mut order: Vec<usize> = (0..len).collect();
        order.sort_by(|&a, &b| {
            objectives[front[a]][obj]
                .partial_cmp(&objectives[front[b]][obj])
                .expect("objectives are finite")
        });
        let lo = objectives[front[order[0]]][obj];
        let hi = objectives[front[order[len - 1]]][obj];
        dist[order[0]] = f64::INFINITY;
        dist[order[len - 1]] = f64::INFINITY;
        let range = hi - lo;
        if range > 0.0 {
            for w in 1..len.saturating_sub(1) {
                let prev = objectives[front[order[w - 1]]][obj];
                let next = objectives[front[order[w + 1]]][obj];
                dist[order[w]] += (next - prev) / range;
            }
        }
    }
    dist
}

/// Assigns rank and crowding in place.
fn assign_fronts(pop: &mut [Individual]) {
    let objectives: Vec<Vec<f64>> = pop.iter().map(|i| i.objectives.clone()).collect();
    let fronts = non_dominated_sort(&objectives);
    for (rank, front) in fronts.iter().enumerate() {
        let dist = crowding_distance(front, &objectives);
        for (&idx, &d) in front.iter().zip(&dist) {
            pop[idx].rank = rank;
            pop[idx].crowding = d;
        }
    }
}

/// Standard NSGA-II environmental selection: fill by ascending front; the
/// front that straddles the cut is ordered by descending crowding with
/// ties broken by genotype text form ascending. Rank/crowding of the
/// survivors reflect the combined pool they were selected from.
pub fn select_survivors(combined: Vec<Individual>, p_size: usize) -> Vec<Individual> {
    let mut pool: Vec<Option<Individual>> = combined.into_iter().map(Some).collect();
    let objectives: Vec<Vec<f64>> = pool
        .iter()
        .map(|i| i.as_ref().expect("pool is fully populated").objectives.clone())
        .collect();
    let fronts = non_dominated_sort(&objectives);
    for (rank, front) in fronts.iter().enumerate() {
        let dist = crowding_distance(front, &objectives);
        for (&idx, &d) in front.iter().zip(&dist) {
            let ind = pool[idx].as_mut().expect("not yet taken");
            ind.rank = rank;
            ind.crowding = d;
        }
    }
    let mut out = Vec::with_capacity(p_size);
    for front in fronts {
        if out.len() == p_size {
            break;
        }
        if out.len() + front.len() <= p_size {
            for idx in front {
                out.push(pool[idx].take().expect("front indices are unique"));
            }
        } else {
            let mut boundary = front;
            boundary.sort_by(|&a, &b| {
                let (ca, cb) = (
                    pool[a].as_ref().expect("untaken").crowding,
                    pool[b].as_ref().expect("untaken").crowding,
                );
                cb.partial_cmp(&ca)
                    .expect("crowding is a number or +inf")
                    .then_with(|| {
                        let ta = pool[a].as_ref().expect("untaken").genotype.text();
                        let tb = pool[b].as_ref().expect("untaken").genotype.text();
                        ta.cmp(&tb)
                    })
            });
            for idx in boundary.into_iter().take(p_size - out.len()) {
                out.push(pool[idx].take().expect("front indices are unique"));
            }
        }
    }
    out
}

/// (rank ascending, crowding descending); first contestant wins exact ties.
fn tournament<'a>(pop: &'a [Individual], rng: &mut impl Rng) -> &'a Individual {
    let a = &pop[rng.gen_range(0..pop.len())];
    let b = &pop[rng.gen_range(0..pop.len())];
    if b.rank < a.rank || (b.rank == a.rank && b.crowding > a.crowding) {
        b
    } else {
        a
    }
}

/// One candidate evaluation's outcome, as the search loop sees it.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    /// Minimized objectives; must be finite (failures map to worst finite
    /// values upstream).
    pub objectives: Vec<f64>,
    /// Present when the evaluator produces a full search-stage report.
    pub report: Option<ScoreReport>,
    pub wall_time_s: f64,
}

/// A candidate evaluator the search loop can drive. `lookup` is the memo
/// probe (return None to force evaluation); `evaluate` computes the
/// outcome and is responsible for any cache insertion. Both may be called
/// concurrently for distinct genotypes.
pub trait SearchEvaluator: Sync {
    fn lookup(&self, g: &Genotype) -> Option<EvalOutcome>;
    fn evaluate(&self, g: &Genotype) -> EvalOutcome;
}

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub n: usize,
    pub c: usize,
    pub generations: usize,
    pub p_size: usize,
    pub p_mut: f64,
    pub seed: u64,
    /// When false, the memo probe is skipped and every request evaluates.
    pub use_cache: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct GenStats {
    pub generation: usize,
    pub best_score: f64,
    pub mean_score: f64,
    /// Distinct genotypes present now but absent from the previous
    /// generation's population.
    pub new_survival: usize,
    pub evaluations_performed: usize,
    pub cache_hits: usize,
}

#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub generation: usize,
    pub report: ScoreReport,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub population: Vec<Individual>,
    pub stats: Vec<GenStats>,
    /// One record per performed (non-memoized) evaluation that yielded a
    /// report, in evaluation order.
    pub evaluations: Vec<EvalRecord>,
}

/// The generational loop: sample, evaluate, then per generation tournament
/// selection, crossover + mutation into p_size offspring, cache-aware
/// evaluation, and combined survivor selection.
pub fn run_search<E: SearchEvaluator>(cfg: &SearchConfig, evaluator: &E) -> Result<SearchResult> {
    if cfg.p_size == 0 || cfg.generations == 0 || cfg.n == 0 || cfg.c == 0 {
        return Err(Error::Invalid("search needs positive n, c, generations, p_size".into()));
    }
    if !(0.0..=1.0).contains(&cfg.p_mut) {
        return Err(Error::Invalid(format!("p_mut must be in [0,1], got {}", cfg.p_mut)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut evaluations = Vec::new();
    let mut stats = Vec::with_capacity(cfg.generations);

    let initial: Vec<Genotype> = (0..cfg.p_size).map(|_| sample(cfg.n, cfg.c, &mut rng)).collect();
    let (mut pop, performed, hits) =
        evaluate_batch(&initial, evaluator, cfg.use_cache, 1, &mut evaluations);
    assign_fronts(&mut pop);
    let mut prev_set: BTreeSet<Genotype> = pop.iter().map(|i| i.genotype.clone()).collect();
    stats.push(make_stats(1, &pop, prev_set.len(), performed, hits));

    for generation in 2..=cfg.generations {
        let mut offspring = Vec::with_capacity(cfg.p_size);
        while offspring.len() < cfg.p_size {
            let pa = tournament(&pop, &mut rng).genotype.clone();
            let pb = tournament(&pop, &mut rng).genotype.clone();
            let (c1, c2) = crossover(&pa, &pb, &mut rng);
            offspring.push(mutate(&c1, cfg.p_mut, cfg.n, &mut rng));
            if offspring.len() < cfg.p_size {
                offspring.push(mutate(&c2, cfg.p_mut, cfg.n, &mut rng));
            }
        }
        let (children, performed, hits) =
            evaluate_batch(&offspring, evaluator, cfg.use_cache, generation, &mut evaluations);
        let mut combined = pop;
        combined.extend(children);
        pop = select_survivors(combined, cfg.p_size);
        let cur_set: BTreeSet<Genotype> = pop.iter().map(|i| i.genotype.clone()).collect();
        let new_survival = cur_set.difference(&prev_set).count();
        stats.push(make_stats(generation, &pop, new_survival, performed, hits));
        prev_set = cur_set;
    }
    Ok(SearchResult { population: pop, stats, evaluations })
}

fn make_stats(
    generation: usize,
    pop: &[Individual],
    new_survival: usize,
    evaluations_performed: usize,
    cache_hits: usize,
) -> GenStats {
    let scores: Vec<f64> = pop.iter().map(|i| i.objectives[0]).collect();
    let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    GenStats {
        generation,
        best_score: best,
        mean_score: mean,
        new_survival,
        evaluations_performed,
        cache_hits,
    }
}

/// Evaluates one generation's worth of genotypes. With the cache on,
/// instances resolved by the memo probe or by being duplicates within the
/// batch count as hits and only first-seen genotypes evaluate (in
/// parallel, order-preserving, so stats and results do not depend on the
/// worker count). With the cache off every instance evaluates.
fn evaluate_batch<E: SearchEvaluator>(
    batch: &[Genotype],
    evaluator: &E,
    use_cache: bool,
    generation: usize,
    evaluations: &mut Vec<EvalRecord>,
) -> (Vec<Individual>, usize, usize) {
    if !use_cache {
        let outcomes: Vec<EvalOutcome> =
            batch.par_iter().map(|g| evaluator.evaluate(g)).collect();
        let mut pop = Vec::with_capacity(batch.len());
        for (g, out) in batch.iter().zip(outcomes) {
            if let Some(report) = &out.report {
                evaluations.push(EvalRecord {
                    generation,
                    report: report.clone(),
                    wall_time_s: out.wall_time_s,
                });
            }
            pop.push(individual(g, &out));
        }
        return (pop, batch.len(), 0);
    }

    #[derive(Clone, Copy)]
    enum Slot {
        Cached(usize),
        Fresh(usize),
    }
    let mut cached: Vec<EvalOutcome> = Vec::new();
    let mut fresh_genotypes: Vec<Genotype> = Vec::new();
    let mut fresh_index: std::collections::BTreeMap<Genotype, usize> =
        std::collections::BTreeMap::new();
    let mut slots: Vec<Slot> = Vec::with_capacity(batch.len());
    let mut hits = 0usize;
    for g in batch {
        if let Some(prev) = fresh_index.get(g) {
            hits += 1;
            slots.push(Slot::Fresh(*prev));
        } else if let Some(out) = evaluator.lookup(g) {
            hits += 1;
            slots.push(Slot::Cached(cached.len()));
            cached.push(out);
        } else {
            let idx = fresh_genotypes.len();
            fresh_index.insert(g.clone(), idx);
            fresh_genotypes.push(g.clone());
            slots.push(Slot::Fresh(idx));
        }
    }
    let fresh_outcomes: Vec<EvalOutcome> =
        fresh_genotypes.par_iter().map(|g| evaluator.evaluate(g)).collect();
    for out in &fresh_outcomes {
        if let Some(report) = &out.report {
            evaluations.push(EvalRecord {
                generation,
                report: report.clone(),
                wall_time_s: out.wall_time_s,
            });
        }
    }
    let performed = fresh_genotypes.len();
    let pop = batch
        .iter()
        .zip(&slots)
        .map(|(g, slot)| match slot {
            Slot::Cached(i) => individual(g, &cached[*i]),
            Slot::Fresh(i) => individual(g, &fresh_outcomes[*i]),
        })
        .collect();
    (pop, performed, hits)
}

fn individual(g: &Genotype, out: &EvalOutcome) -> Individual {
    debug_assert!(out.objectives.iter().all(|v| v.is_finite()), "objectives must be finite");
    Individual {
        genotype: g.clone(),
        objectives: out.objectives.clone(),
        rank: 0,
        crowding: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn objs(v: &[&[f64]]) -> Vec<Vec<f64>> {
        v.iter().map(|r| r.to_vec()).collect()
    }

    #[test]
    fn sort_examples() {
        assert_eq!(non_dominated_sort(&objs(&[&[1.0, 2.0]])), vec![vec![0]]);
        let fronts = non_dominated_sort(&objs(&[&[1.0, 2.0], &[2.0, 1.0], &[3.0, 3.0]]));
        assert_eq!(fronts, vec![vec![0, 1], vec![2]]);
        // single objective degenerates to ascending equal-value groups
        let fronts = non_dominated_sort(&objs(&[&[3.0], &[1.0], &[2.0], &[1.0]]));
        assert_eq!(fronts, vec![vec![1, 3], vec![2], vec![0]]);
    }

    #[test]
    fn crowding_examples() {
        // front of <= 2: all infinite
        let d = crowding_distance(&[0, 1], &objs(&[&[0.0], &[5.0]]));
        assert!(d.iter().all(|v| v.is_infinite()));
        // 0, 5, 10: middle gets (10-0)/(10-0) = 1
        let d = crowding_distance(&[0, 1, 2], &objs(&[&[0.0], &[5.0], &[10.0]]));
        assert!(d[0].is_infinite() && d[2].is_infinite());
        assert_eq!(d[1], 1.0);
        // identical objectives: interior contribution zero
        let d = crowding_distance(&[0, 1, 2], &objs(&[&[4.0], &[4.0], &[4.0]]));
        assert_eq!(d[1], 0.0);
    }

    fn ind(genes: &[usize], score: f64) -> Individual {
        Individual {
            genotype: Genotype::new(genes.to_vec()),
            objectives: vec![score],
            rank: 0,
            crowding: 0.0,
        }
    }

    #[test]
    fn survivors_keep_best_scores() {
        let combined = vec![
            ind(&[1], 5.0),
            ind(&[2], 1.0),
            ind(&[3], 4.0),
            ind(&[4], 2.0),
            ind(&[5], 3.0),
            ind(&[6], 0.5),
        ];
        let out = select_survivors(combined, 3);
        let mut scores: Vec<f64> = out.iter().map(|i| i.objectives[0]).collect();
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(scores, vec![0.5, 1.0, 2.0]);
    }

    #[test]
    fn survivor_ties_break_by_text() {
        // One front of five equal scores, room for four. The front's first
        // and last members ("4", "5") hold the boundary-infinity crowding;
        // the interior ties at zero, where the text ordering decides.
        let combined =
            vec![ind(&[4], 1.0), ind(&[2], 1.0), ind(&[3], 1.0), ind(&[1], 1.0), ind(&[5], 1.0)];
        let out = select_survivors(combined, 4);
        let texts: Vec<String> = out.iter().map(|i| i.genotype.text()).collect();
        assert_eq!(texts, vec!["4".to_string(), "5".to_string(), "1".to_string(), "2".to_string()]);
    }

    struct TableEval {
        table: Vec<Vec<f64>>,
    }

    impl SearchEvaluator for TableEval {
        fn lookup(&self, _g: &Genotype) -> Option<EvalOutcome> {
            None
        }
        fn evaluate(&self, g: &Genotype) -> EvalOutcome {
            let score: f64 =
                g.genes().iter().enumerate().map(|(j, &gene)| self.table[j][gene - 1]).sum();
            EvalOutcome { objectives: vec![score], report: None, wall_time_s: 0.0 }
        }
    }

    #[test]
    fn search_is_elitist_and_deterministic() {
        let table = vec![
            vec![0.3, 0.1, 0.9],
            vec![0.5, 0.2, 0.4],
            vec![0.8, 0.6, 0.05],
        ];
        let cfg = SearchConfig {
            n: 3,
            c: 3,
            generations: 12,
            p_size: 8,
            p_mut: 1.0 / 3.0,
            seed: 7,
            use_cache: false,
        };
        let eval = TableEval { table };
        let a = run_search(&cfg, &eval).unwrap();
        let b = run_search(&cfg, &eval).unwrap();
        for (x, y) in a.stats.iter().zip(&b.stats) {
            assert_eq!(x.best_score, y.best_score);
            assert_eq!(x.new_survival, y.new_survival);
        }
        let mut prev = f64::INFINITY;
        for s in &a.stats {
            assert!(s.best_score <= prev + 1e-12, "best must not regress");
            prev = s.best_score;
        }
        // optimum is 0.1 + 0.2 + 0.05
        assert!((a.stats.last().unwrap().best_score - 0.35).abs() < 1e-9);
        assert_eq!(a.population.len(), cfg.p_size);
    }

    #[test]
    fn gen_one_returns_evaluated_initial_population() {
        let eval = TableEval { table: vec![vec![0.0, 1.0]; 2] };
        let cfg = SearchConfig {
            n: 2,
            c: 2,
            generations: 1,
            p_size: 5,
            p_mut: 0.5,
            seed: 3,
            use_cache: false,
        };
        let res = run_search(&cfg, &eval).unwrap();
        assert_eq!(res.population.len(), 5);
        assert_eq!(res.stats.len(), 1);
        assert_eq!(res.stats[0].evaluations_performed, 5);
    }
}
