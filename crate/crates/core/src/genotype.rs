use rand::Rng;

use crate::adapter::{plan_adapter, AdapterPlan};
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;
use crate::scalar::Scalar;

/// Integer string i1..ic, one 1-based source-architecture index per depth
/// position. Text form joins genes with hyphens: "3-4-1-2-5".
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Genotype(pub Vec<usize>);

impl Genotype {
    pub fn new(genes: Vec<usize>) -> Self {
        Self(genes)
    }

    pub fn genes(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn text(&self) -> String {
        self.0.iter().map(|g| g.to_string()).collect::<Vec<_>>().join("-")
    }

    pub fn parse(s: &str) -> Result<Self> {
        let genes: Vec<usize> = s
            .split('-')
            .map(|part| {
                part.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Genotype(format!("bad gene {part:?} in {s:?}")))
            })
            .collect::<Result<_>>()?;
        if genes.is_empty() || genes.iter().any(|&g| g == 0) {
            return Err(Error::Genotype(format!("genes must be >= 1 in {s:?}")));
        }
        Ok(Self(genes))
    }

    /// All genes in [1, n] and length == c.
    pub fn validate(&self, n: usize, c: usize) -> Result<()> {
        if self.len() != c {
            return Err(Error::Genotype(format!(
                "genotype {} has {} genes, expected {c}",
                self.text(),
                self.len()
            )));
        }
        if let Some(&g) = self.0.iter().find(|&&g| g == 0 || g > n) {
            return Err(Error::Genotype(format!(
                "gene {g} out of range [1, {n}] in {}",
                self.text()
            )));
        }
        Ok(())
    }
}

/// What a genotype unrolls to: module picks per depth, the adapter at each
/// junction, and the head input geometry.
#[derive(Debug, Clone)]
pub struct AssemblySpec {
    /// (depth 0-based, arch gene 1-based) per position.
    pub picks: Vec<(usize, usize)>,
    /// Junction adapters, length c-1.
    pub adapters: Vec<AdapterPlan>,
    pub head_in_channels: usize,
    pub head_in_hw: usize,
}

/// Resolves a genotype against the knowledge base. `baseline` swaps every
/// junction adapter for the trainable 1x1-conv variant.
pub fn decode<S: Scalar>(
    g: &Genotype,
    kb: &KnowledgeBase<S>,
    baseline: bool,
) -> Result<AssemblySpec> {
    g.validate(kb.n, kb.c)?;
    let picks: Vec<(usize, usize)> = g.genes().iter().copied().enumerate().collect();
    let mut adapters = Vec::with_capacity(kb.c.saturating_sub(1));
    for d in 0..kb.c - 1 {
        let out_ch = kb.module(d, g.genes()[d])?.desc.out_ch;
        let in_ch = kb.module(d + 1, g.genes()[d + 1])?.desc.in_ch;
        adapters.push(plan_adapter(out_ch, in_ch, baseline)?);
    }
    let last = kb.module(kb.c - 1, g.genes()[kb.c - 1])?;
    Ok(AssemblySpec {
        picks,
        adapters,
        head_in_channels: last.desc.out_ch,
        head_in_hw: kb.head_in_hw(),
    })
}

/// |Omega| = n^c, rejecting overflow.
pub fn space_size(n: usize, c: usize) -> Result<u64> {
    if n == 0 || c == 0 {
        return Err(Error::Genotype(format!("space needs n, c >= 1, got n={n} c={c}")));
    }
    let n = n as u64;
    let mut total: u64 = 1;
    for _ in 0..c {
        total = total
            .checked_mul(n)
            .ok_or_else(|| Error::Genotype(format!("n^c overflows u64 for n={n} c={c}")))?;
    }
    Ok(total)
}

/// Uniform random genotype: each gene independent over [1, n].
pub fn sample(n: usize, c: usize, rng: &mut impl Rng) -> Genotype {
    Genotype::new((0..c).map(|_| rng.gen_range(1..=n)).collect())
}

/// Single-point crossover at a uniform cut in [1, c-1], swapping suffixes.
/// Length-1 genotypes have no interior cut; the parents come back as-is.
pub fn crossover(a: &Genotype, b: &Genotype, rng: &mut impl Rng) -> (Genotype, Genotype) {
    debug_assert_eq!(a.len(), b.len());
    let c = a.len();
    if c < 2 {
        return (a.clone(), b.clone());
    }
    let cut = rng.gen_range(1..c);
    let mut c1 = a.genes()[..cut].to_vec();
    c1.extend_from_slice(&b.genes()[cut..]);
    let mut c2 = b.genes()[..cut].to_vec();
    c2.extend_from_slice(&a.genes()[cut..]);
    (Genotype::new(c1), Genotype::new(c2))
}

/// Resamples each gene independently with probability `p_mut` to a uniform
/// *different* value in [1, n]. With n = 1 there is no different value and
/// the gene stays put.
pub fn mutate(g: &Genotype, p_mut: f64, n: usize, rng: &mut impl Rng) -> Genotype {
    let genes = g
        .genes()
        .iter()
        .map(|&gene| {
            if rng.gen::<f64>() < p_mut && n > 1 {
                let r = rng.gen_range(1..n);
                if r >= gene { r + 1 } else { r }
            } else {
                gene
            }
        })
        .collect();
    Genotype::new(genes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn text_round_trip() {
        let g = Genotype::new(vec![3, 4, 1, 2, 5]);
        assert_eq!(g.text(), "3-4-1-2-5");
        assert_eq!(Genotype::parse("3-4-1-2-5").unwrap(), g);
        assert!(Genotype::parse("3-0-1").is_err());
        assert!(Genotype::parse("a-b").is_err());
        assert!(Genotype::parse("").is_err());
    }

    #[test]
    fn validate_checks_range_and_length() {
        let g = Genotype::new(vec![1, 4, 2]);
        assert!(g.validate(4, 3).is_ok());
        assert!(g.validate(3, 3).is_err());
        assert!(g.validate(4, 2).is_err());
    }

    #[test]
    fn space_size_matches_powers() {
        assert_eq!(space_size(7, 5).unwrap(), 16807);
        assert_eq!(space_size(1, 9).unwrap(), 1);
        assert_eq!(space_size(6, 1).unwrap(), 6);
        assert!(space_size(10, 30).is_err());
        assert!(space_size(0, 3).is_err());
    }

    #[test]
    fn sample_is_uniform_per_position() {
        let (n, c, trials) = (4usize, 5usize, 10_000usize);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = vec![vec![0usize; n]; c];
        for _ in 0..trials {
            let g = sample(n, c, &mut rng);
            g.validate(n, c).unwrap();
            for (pos, &gene) in g.genes().iter().enumerate() {
                counts[pos][gene - 1] += 1;
            }
        }
        // binomial: mean trials/n, sd = sqrt(trials * p * (1-p))
        let mean = trials as f64 / n as f64;
        let sd = (trials as f64 * (1.0 / n as f64) * (1.0 - 1.0 / n as f64)).sqrt();
        for pos in counts {
            for count in pos {
                assert!(
                    (count as f64 - mean).abs() < 3.0 * sd,
                    "count {count} vs mean {mean} (sd {sd})"
                );
            }
        }
    }

    #[test]
    fn crossover_of_identical_parents_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Genotype::new(vec![2, 2, 3, 1]);
        let (c1, c2) = crossover(&a, &a.clone(), &mut rng);
        assert_eq!(c1, a);
        assert_eq!(c2, a);
    }

    #[test]
    fn crossover_swaps_suffixes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Genotype::new(vec![1, 1, 1, 1]);
        let b = Genotype::new(vec![2, 2, 2, 2]);
        for _ in 0..20 {
            let (c1, c2) = crossover(&a, &b, &mut rng);
            // find the cut: prefix from a, suffix from b
            let cut = c1.genes().iter().take_while(|&&g| g == 1).count();
            assert!((1..4).contains(&cut), "cut {cut}");
            assert!(c1.genes()[cut..].iter().all(|&g| g == 2));
            assert!(c2.genes()[..cut].iter().all(|&g| g == 2));
            assert!(c2.genes()[cut..].iter().all(|&g| g == 1));
        }
    }

    #[test]
    fn mutate_rates_and_closure() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Genotype::new(vec![1, 2, 3, 4]);
        assert_eq!(mutate(&g, 0.0, 4, &mut rng), g);
        for _ in 0..200 {
            let m = mutate(&g, 1.0, 4, &mut rng);
            m.validate(4, 4).unwrap();
            for (a, b) in m.genes().iter().zip(g.genes()) {
                assert_ne!(a, b, "forced mutation must change every gene");
            }
        }
        // n = 1: nothing else to resample to
        let ones = Genotype::new(vec![1, 1]);
        assert_eq!(mutate(&ones, 1.0, 1, &mut rng), ones);
    }

    #[test]
    fn operators_preserve_validity() {
        let (n, c) = (5usize, 7usize);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..10_000 {
            let a = sample(n, c, &mut rng);
            let b = sample(n, c, &mut rng);
            let (c1, c2) = crossover(&a, &b, &mut rng);
            c1.validate(n, c).unwrap();
            c2.validate(n, c).unwrap();
            mutate(&c1, 0.5, n, &mut rng).validate(n, c).unwrap();
        }
    }
}
