use crate::error::{Error, Result};
use crate::genotype::Genotype;

/// Similarity of a genotype to its own first gene: the length of the
/// maximal prefix whose genes all equal gene 1, normalized by the code
/// length. Counted by the recursion
///
///   f(a, x) = 1 + f(a, x+1)  if x <= c and a[x] == a[1], else 0
///
/// so (1,1,2,3,1) scores 2/5: the run stops at the first mismatch even if
/// the first gene reappears later.
pub fn compute_sim(g: &Genotype) -> f64 {
    fn f_sim(a: &[usize], x: usize) -> usize {
        if x < a.len() && a[x] == a[0] {
            1 + f_sim(a, x + 1)
        } else {
            0
        }
    }
    if g.is_empty() {
        return 0.0;
    }
    // x counts matches from position 1 (the first gene trivially matches
    // itself, contributing the leading 1).
    (1 + f_sim(g.genes(), 1)) as f64 / g.len() as f64
}

/// Relative training-loss decrease (loss_1 - loss_n)/loss_1 over the
/// recorded epochs, clamped to [0, 1] so rising loss earns no credit.
pub fn compute_l_rate(loss_history: &[f64]) -> Result<f64> {
    if loss_history.len() < 2 {
        return Err(Error::Invalid(format!(
            "loss-rate needs at least 2 epochs, got {}",
            loss_history.len()
        )));
    }
    let first = loss_history[0];
    let last = *loss_history.last().expect("non-empty checked above");
    if !(first > 0.0) {
        return Err(Error::Invalid(format!("first-epoch loss must be positive, got {first}")));
    }
    Ok(((first - last) / first).clamp(0.0, 1.0))
}

/// The composite search score: err_val - alpha*l_rate + beta*sim.
/// Lower is better.
pub fn compose_score(err_val: f64, l_rate: f64, sim: f64, alpha: f64, beta: f64) -> f64 {
    err_val - alpha * l_rate + beta * sim
}

/// Everything the search stage learns about one candidate.
#[derive(Debug, Clone)]
pub struct ScoreReport {
    pub genotype: Genotype,
    pub err_val: f64,
    pub acc_val: f64,
    pub l_rate: f64,
    pub sim: f64,
    pub score: f64,
    pub loss_history: Vec<f64>,
    /// False when evaluation failed (non-finite loss); such reports carry
    /// the worst finite score so selection can still order them.
    pub valid: bool,
}

impl ScoreReport {
    pub fn new(
        genotype: Genotype,
        acc_val: f64,
        loss_history: Vec<f64>,
        alpha: f64,
        beta: f64,
    ) -> Result<Self> {
        let err_val = 1.0 - acc_val;
        let l_rate = compute_l_rate(&loss_history)?;
        let sim = compute_sim(&genotype);
        let score = compose_score(err_val, l_rate, sim, alpha, beta);
        Ok(Self { genotype, err_val, acc_val, l_rate, sim, score, loss_history, valid: true })
    }

    /// Report for a failed evaluation: worst legitimate values everywhere
    /// (err 1, no convergence credit, maximal similarity penalty).
    pub fn failed(genotype: Genotype, beta: f64) -> Self {
        Self {
            genotype,
            err_val: 1.0,
            acc_val: 0.0,
            l_rate: 0.0,
            sim: 1.0,
            score: 1.0 + beta,
            loss_history: Vec::new(),
            valid: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim_of(code: &[usize]) -> f64 {
        compute_sim(&Genotype::new(code.to_vec()))
    }

    #[test]
    fn sim_hand_values() {
        assert_eq!(sim_of(&[1, 1, 1, 1, 1]), 1.0);
        assert_eq!(sim_of(&[1, 2, 3, 4, 5]), 0.2);
        assert_eq!(sim_of(&[1, 1, 2, 3, 1]), 0.4);
        assert_eq!(sim_of(&[7]), 1.0);
        assert_eq!(sim_of(&[2, 2, 2, 1]), 0.75);
    }

    #[test]
    fn l_rate_arithmetic_and_clamp() {
        assert_eq!(compute_l_rate(&[2.0, 1.5, 1.0]).unwrap(), 0.5);
        assert_eq!(compute_l_rate(&[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(compute_l_rate(&[1.0, 1.5]).unwrap(), 0.0);
        assert!(compute_l_rate(&[1.0]).is_err());
        assert!(compute_l_rate(&[0.0, 1.0]).is_err());
        assert!(compute_l_rate(&[-1.0, 0.5]).is_err());
    }

    #[test]
    fn score_composition_example() {
        let s = compose_score(0.40, 0.5, 0.2, 25.0, 25.0);
        assert!((s - (0.40 - 12.5 + 5.0)).abs() < 1e-12);
        assert_eq!(compose_score(0.3, 0.9, 0.9, 0.0, 0.0), 0.3);
    }

    #[test]
    fn report_upholds_identities() {
        let g = Genotype::new(vec![1, 1, 2]);
        let r = ScoreReport::new(g, 0.75, vec![2.0, 1.0], 25.0, 25.0).unwrap();
        assert!((r.err_val - (1.0 - r.acc_val)).abs() < 1e-15);
        assert_eq!(r.score - r.err_val + 25.0 * r.l_rate - 25.0 * r.sim, 0.0);
        assert!(r.valid);
    }

    #[test]
    fn failed_report_is_worst_finite() {
        let r = ScoreReport::failed(Genotype::new(vec![1]), 25.0);
        assert!(!r.valid);
        assert_eq!(r.score, 26.0);
        assert!(r.score.is_finite());
    }
}
