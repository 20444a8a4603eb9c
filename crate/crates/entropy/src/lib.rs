//! Exact inference over small discrete intent models: posteriors,
//! conditional entropies, the response decomposition through the intent,
//! and the argmax gap between population and trait-specific posteriors.
//!
//! Everything is computed by enumeration, so results are exact up to
//! floating-point rounding.

mod world;

pub use world::{demo_worlds, prior_gap_world, ToyWorld, MAX_CELLS, SUM_TOLERANCE};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EntropyError {
    #[error("invalid world: {0}")]
    Invalid(String),
    #[error("world has {0} intent×trait×context cells, over the limit of 1000000")]
    TooLarge(usize),
    #[error("world file: {0}")]
    Json(String),
    #[error("{what} index {index} out of range")]
    OutOfRange { what: &'static str, index: usize },
    #[error("observation (context {context}, history {history:?}) has zero probability")]
    ZeroEvidence { context: usize, history: Option<usize> },
}

fn check_index(index: usize, len: usize, what: &'static str) -> Result<(), EntropyError> {
    if index >= len {
        return Err(EntropyError::OutOfRange { what, index });
    }
    Ok(())
}

/// Unnormalized P(i, c, h) for every intent; `h = None` marginalizes history.
fn intent_weights(world: &ToyWorld, c: usize, h: Option<usize>) -> Vec<f64> {
    (0..world.n_intents())
        .map(|i| {
            (0..world.n_traits())
                .map(|t| {
                    let ph = h.map_or(1.0, |h| world.history_prob(t, h));
                    world.prior[i][t] * world.emission[i][t][c] * ph
                })
                .sum()
        })
        .collect()
}

fn normalize(w: Vec<f64>) -> Option<Vec<f64>> {
    let s: f64 = w.iter().sum();
    (s > 0.0).then(|| w.into_iter().map(|x| x / s).collect())
}

/// P(I | c) or P(I | c, h).
pub fn posterior(world: &ToyWorld, c: usize, h: Option<usize>) -> Result<Vec<f64>, EntropyError> {
    check_index(c, world.n_contexts(), "context")?;
    if let Some(h) = h {
        check_index(h, world.n_histories(), "history")?;
    }
    normalize(intent_weights(world, c, h)).ok_or(EntropyError::ZeroEvidence { context: c, history: h })
}

/// Shannon entropy in bits.
pub fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter().filter(|x| **x > 0.0).map(|x| x * x.log2()).sum::<f64>()
}

/// What the intent is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    Context,
    ContextAndHistory,
}

/// H(I | C) or H(I | C, H) in bits. H(I | C, H) is taken as H(I | C) minus
/// the information history adds, so it never exceeds H(I | C) even under
/// rounding.
pub fn conditional_entropy(world: &ToyWorld, on: Conditioning) -> f64 {
    let mut total = 0.0;
    for c in 0..world.n_contexts() {
        let w = intent_weights(world, c, None);
        let mass: f64 = w.iter().sum();
        if let Some(p) = normalize(w) {
            total += mass * entropy_bits(&p);
        }
    }
    match on {
        Conditioning::Context => total,
        Conditioning::ContextAndHistory => (total - history_information(world)).max(0.0),
    }
}

/// I(I; H | C) in bits: Σ P(c, h) · KL(P(I | c, h) ‖ P(I | c)), with each
/// divergence clamped at zero.
fn history_information(world: &ToyWorld) -> f64 {
    let mut total = 0.0;
    for c in 0..world.n_contexts() {
        let Some(q) = normalize(intent_weights(world, c, None)) else { continue };
        for h in 0..world.n_histories() {
            let w = intent_weights(world, c, Some(h));
            let mass: f64 = w.iter().sum();
            let Some(p) = normalize(w) else { continue };
            let kl: f64 = p
                .iter()
                .zip(&q)
                .filter(|(pi, qi)| **pi > 0.0 && **qi > 0.0)
                .map(|(pi, qi)| pi * (pi / qi).log2())
                .sum();
            total += mass * kl.max(0.0);
        }
    }
    total
}

/// H(I|C) − H(I|C,H).
pub fn history_gap(world: &ToyWorld) -> f64 {
    conditional_entropy(world, Conditioning::Context) - conditional_entropy(world, Conditioning::ContextAndHistory)
}

/// Both sides of P(r | c) = Σ_i P(r | i)·P(i | c) for an execution table
/// `execution[i][r]` = P(r | i). The left side enumerates the joint over
/// (i, t) directly.
pub fn decomposition_check(
    world: &ToyWorld,
    execution: &[Vec<f64>],
    r: usize,
    c: usize,
) -> Result<(f64, f64), EntropyError> {
    check_index(c, world.n_contexts(), "context")?;
    if execution.len() != world.n_intents() {
        return Err(EntropyError::Invalid(format!(
            "execution table has {} rows for {} intents",
            execution.len(),
            world.n_intents()
        )));
    }
    for (i, row) in execution.iter().enumerate() {
        check_index(r, row.len(), "response")?;
        let s: f64 = row.iter().sum();
        if row.iter().any(|x| !x.is_finite() || *x < 0.0) || (s - 1.0).abs() > SUM_TOLERANCE {
            return Err(EntropyError::Invalid(format!("execution row {i} is not a distribution")));
        }
    }
    let mut joint_rc = 0.0;
    let mut joint_c = 0.0;
    for (i, exec) in execution.iter().enumerate() {
        for t in 0..world.n_traits() {
            let p = world.prior[i][t] * world.emission[i][t][c];
            joint_c += p;
            joint_rc += p * exec[r];
        }
    }
    if joint_c == 0.0 {
        return Err(EntropyError::ZeroEvidence { context: c, history: None });
    }
    let post = posterior(world, c, None)?;
    let rhs = post.iter().zip(execution).map(|(p, row)| p * row[r]).sum();
    Ok((joint_rc / joint_c, rhs))
}

/// Trait-marginalized P(I | c) per context; `None` where c is impossible.
pub fn population_posteriors(world: &ToyWorld) -> Vec<Option<Vec<f64>>> {
    (0..world.n_contexts()).map(|c| normalize(intent_weights(world, c, None))).collect()
}

/// P(I | c, t) per context; `None` where c is impossible under t.
pub fn trait_posteriors(world: &ToyWorld, t: usize) -> Result<Vec<Option<Vec<f64>>>, EntropyError> {
    check_index(t, world.n_traits(), "trait")?;
    Ok((0..world.n_contexts())
        .map(|c| normalize((0..world.n_intents()).map(|i| world.prior[i][t] * world.emission[i][t][c]).collect()))
        .collect())
}

/// Temperature sharpening p^β / Σ p^β (β > 1 sharpens), computed in log
/// space so large β does not underflow to all zeros.
pub fn sharpen(p: &[f64], beta: f64) -> Vec<f64> {
    let logs: Vec<f64> = p.iter().map(|x| if *x > 0.0 { beta * x.ln() } else { f64::NEG_INFINITY }).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, x) in p.iter().enumerate() {
        if *x > p[best] {
            best = k;
        }
    }
    best
}

/// Fraction of contexts where the population posterior's argmax differs
/// from that of the trait-`t*` posterior. Contexts impossible under either
/// are left out; with none left the rate is 0.
pub fn average_prior_gap(
    world: &ToyWorld,
    population: &[Option<Vec<f64>>],
    t_star: usize,
) -> Result<f64, EntropyError> {
    if population.len() != world.n_contexts() {
        return Err(EntropyError::Invalid(format!(
            "population posterior covers {} contexts, world has {}",
            population.len(),
            world.n_contexts()
        )));
    }
    let specific = trait_posteriors(world, t_star)?;
    let mut counted = 0usize;
    let mut disagree = 0usize;
    for (pop, spec) in population.iter().zip(&specific) {
        if let (Some(pop), Some(spec)) = (pop, spec) {
            counted += 1;
            if argmax(pop) != argmax(spec) {
                disagree += 1;
            }
        }
    }
    Ok(if counted == 0 { 0.0 } else { disagree as f64 / counted as f64 })
}

/// One row of `entropy demo`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EntropySummary {
    pub world: String,
    pub h_i_given_c: f64,
    pub h_i_given_c_h: f64,
    pub gap_bits: f64,
}

pub fn summarize(world: &ToyWorld) -> EntropySummary {
    let a = conditional_entropy(world, Conditioning::Context);
    let b = conditional_entropy(world, Conditioning::ContextAndHistory);
    EntropySummary { world: world.name.clone(), h_i_given_c: a, h_i_given_c_h: b, gap_bits: a - b }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_uninformative() -> ToyWorld {
        ToyWorld::from_json(
            r#"{"intents":["a","b"],"traits":["t"],"contexts":["c"],
                "prior":[[0.5],[0.5]],"emission":[[[1.0]],[[1.0]]]}"#,
        )
        .unwrap()
    }

    #[test]
    fn symmetric_posterior() {
        assert_eq!(posterior(&uniform_uninformative(), 0, None).unwrap(), [0.5, 0.5]);
    }

    #[test]
    fn injective_emission_gives_point_mass() {
        let w = ToyWorld::from_json(
            r#"{"intents":["a","b","c"],"traits":["t"],"contexts":["x","y","z"],
                "prior":[[0.2],[0.3],[0.5]],
                "emission":[[[0,1,0]],[[0,0,1]],[[1,0,0]]]}"#,
        )
        .unwrap();
        assert_eq!(posterior(&w, 0, None).unwrap(), [0.0, 0.0, 1.0]);
        assert_eq!(posterior(&w, 1, None).unwrap(), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_evidence_and_ranges() {
        let w = prior_gap_world();
        let mut w2 = w.clone();
        w2.emission = vec![vec![vec![1.0, 0.0]; 2]; 2];
        assert_eq!(posterior(&w2, 1, None), Err(EntropyError::ZeroEvidence { context: 1, history: None }));
        assert!(matches!(posterior(&w, 5, None), Err(EntropyError::OutOfRange { .. })));
        assert!(matches!(posterior(&w, 0, Some(3)), Err(EntropyError::OutOfRange { .. })));
    }

    #[test]
    fn uniform_binary_is_one_bit() {
        let w = uniform_uninformative();
        assert_eq!(conditional_entropy(&w, Conditioning::Context), 1.0);
        assert_eq!(conditional_entropy(&w, Conditioning::ContextAndHistory), 1.0);
    }

    #[test]
    fn revealing_history_removes_uncertainty() {
        let w = &demo_worlds()[0];
        assert_eq!(conditional_entropy(w, Conditioning::Context), 1.0);
        assert_eq!(conditional_entropy(w, Conditioning::ContextAndHistory), 0.0);
    }

    #[test]
    fn demo_worlds_show_large_gap() {
        for w in demo_worlds() {
            let s = summarize(&w);
            assert!(s.gap_bits >= 0.9, "{}: {}", s.world, s.gap_bits);
        }
    }

    #[test]
    fn decomposition_point_mass() {
        let w = &demo_worlds()[0];
        let mut one = w.clone();
        one.emission = vec![vec![vec![1.0, 0.0], vec![1.0, 0.0]], vec![vec![0.0, 1.0], vec![0.0, 1.0]]];
        let exec = vec![vec![0.3, 0.7], vec![0.9, 0.1]];
        let (lhs, rhs) = decomposition_check(&one, &exec, 1, 0).unwrap();
        assert_eq!(lhs, 0.7);
        assert!((lhs - rhs).abs() <= 1e-12);
    }

    #[test]
    fn decomposition_rejects_bad_tables() {
        let w = prior_gap_world();
        assert!(decomposition_check(&w, &[vec![1.0]], 0, 0).is_err());
        assert!(decomposition_check(&w, &[vec![0.5, 0.6], vec![1.0, 0.0]], 0, 0).is_err());
    }

    #[test]
    fn single_trait_never_disagrees() {
        let w = uniform_uninformative();
        assert_eq!(average_prior_gap(&w, &population_posteriors(&w), 0).unwrap(), 0.0);
    }

    #[test]
    fn minority_trait_flips_half_the_contexts() {
        let w = prior_gap_world();
        let rare = w.trait_index("rare").unwrap();
        let pop = population_posteriors(&w);
        assert_eq!(average_prior_gap(&w, &pop, rare).unwrap(), 0.5);
        assert_eq!(average_prior_gap(&w, &pop, w.trait_index("common").unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn sharpening_keeps_argmax() {
        let p = [0.2, 0.5, 0.3];
        for beta in [1.0, 2.0, 10.0, 1e4] {
            let q = sharpen(&p, beta);
            assert_eq!(argmax(&q), 1);
            assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(sharpen(&p, 5.0)[1] > 0.5);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
