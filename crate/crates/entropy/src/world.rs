//! Finite intent/trait/context worlds.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::EntropyError;

/// Tolerance for a distribution to count as normalized.
pub const SUM_TOLERANCE: f64 = 1e-12;

/// Upper bound on |I|·|T|·|C|.
pub const MAX_CELLS: usize = 1_000_000;

/// A discrete latent-intent model.
///
/// The joint factorizes as
/// `P(i, t, c, h) = prior[i][t] · emission[i][t][c] · history_channel[t][h]`,
/// so a context depends on intent and trait, and the history depends on the
/// trait alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyWorld {
    #[serde(default)]
    pub name: String,
    pub intents: Vec<String>,
    pub traits: Vec<String>,
    pub contexts: Vec<String>,
    /// History alphabet. Omitted means one uninformative symbol.
    #[serde(default = "default_histories")]
    pub histories: Vec<String>,
    /// `prior[i][t]`.
    pub prior: Vec<Vec<f64>>,
    /// `emission[i][t][c]` = P(c | i, t).
    pub emission: Vec<Vec<Vec<f64>>>,
    /// `history_channel[t][h]` = P(h | t).
    #[serde(default)]
    pub history_channel: Vec<Vec<f64>>,
}

fn default_histories() -> Vec<String> {
    vec!["none".into()]
}

fn check_dist(xs: &[f64], what: &str) -> Result<(), EntropyError> {
    if let Some(x) = xs.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(EntropyError::Invalid(format!("{what} has entry {x}")));
    }
    let sum: f64 = xs.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(EntropyError::Invalid(format!("{what} sums to {sum}")));
    }
    Ok(())
}

fn check_len<T>(xs: &[T], n: usize, what: &str) -> Result<(), EntropyError> {
    if xs.len() != n {
        return Err(EntropyError::Invalid(format!("{what} has {} entries, expected {n}", xs.len())));
    }
    Ok(())
}

fn check_names(names: &[String], what: &str) -> Result<(), EntropyError> {
    if names.is_empty() {
        return Err(EntropyError::Invalid(format!("no {what}")));
    }
    let mut seen = std::collections::HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(EntropyError::Invalid(format!("duplicate {what} {n:?}")));
        }
    }
    Ok(())
}

impl ToyWorld {
    pub fn n_intents(&self) -> usize {
        self.intents.len()
    }

    pub fn n_traits(&self) -> usize {
        self.traits.len()
    }

    pub fn n_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn n_histories(&self) -> usize {
        self.histories.len()
    }

    /// P(h | t), with the implicit uninformative channel when none is given.
    pub fn history_prob(&self, t: usize, h: usize) -> f64 {
        if self.history_channel.is_empty() {
            1.0
        } else {
            self.history_channel[t][h]
        }
    }

    pub fn validate(&self) -> Result<(), EntropyError> {
        check_names(&self.intents, "intents")?;
        check_names(&self.traits, "traits")?;
        check_names(&self.contexts, "contexts")?;
        check_names(&self.histories, "histories")?;
        let (ni, nt, nc, nh) = (self.n_intents(), self.n_traits(), self.n_contexts(), self.n_histories());
        let cells = ni.saturating_mul(nt).saturating_mul(nc);
        if cells > MAX_CELLS {
            return Err(EntropyError::TooLarge(cells));
        }
        check_len(&self.prior, ni, "prior")?;
        for (i, row) in self.prior.iter().enumerate() {
            check_len(row, nt, &format!("prior[{i}]"))?;
        }
        check_dist(&self.prior.concat(), "prior")?;
        check_len(&self.emission, ni, "emission")?;
        for (i, rows) in self.emission.iter().enumerate() {
            check_len(rows, nt, &format!("emission[{i}]"))?;
            for (t, row) in rows.iter().enumerate() {
                check_len(row, nc, &format!("emission[{i}][{t}]"))?;
                check_dist(row, &format!("emission[{i}][{t}]"))?;
            }
        }
        if self.history_channel.is_empty() {
            if nh != 1 {
                return Err(EntropyError::Invalid("history_channel missing for a multi-symbol alphabet".into()));
            }
        } else {
            check_len(&self.history_channel, nt, "history_channel")?;
            for (t, row) in self.history_channel.iter().enumerate() {
                check_len(row, nh, &format!("history_channel[{t}]"))?;
                check_dist(row, &format!("history_channel[{t}]"))?;
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, EntropyError> {
        let w: Self = serde_json::from_str(text).map_err(|e| EntropyError::Json(e.to_string()))?;
        w.validate()?;
        Ok(w)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes") + "\n"
    }

    pub fn intent_index(&self, name: &str) -> Option<usize> {
        self.intents.iter().position(|x| x == name)
    }

    pub fn trait_index(&self, name: &str) -> Option<usize> {
        self.traits.iter().position(|x| x == name)
    }

    pub fn context_index(&self, name: &str) -> Option<usize> {
        self.contexts.iter().position(|x| x == name)
    }

    pub fn history_index(&self, name: &str) -> Option<usize> {
        self.histories.iter().position(|x| x == name)
    }

    /// A world with every table drawn from a seeded generator.
    pub fn random(seed: u64, intents: usize, traits: usize, contexts: usize, histories: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dist = |n: usize| -> Vec<f64> {
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect()
        };
        let flat = dist(intents * traits);
        let prior = flat.chunks(traits).map(|c| c.to_vec()).collect();
        let emission = (0..intents).map(|_| (0..traits).map(|_| dist(contexts)).collect()).collect();
        let history_channel = (0..traits).map(|_| dist(histories)).collect();
        let names = |p: &str, n: usize| (0..n).map(|k| format!("{p}{k}")).collect::<Vec<_>>();
        Self {
            name: format!("random-{seed}"),
            intents: names("i", intents),
            traits: names("t", traits),
            contexts: names("c", contexts),
            histories: names("h", histories),
            prior,
            emission,
            history_channel,
        }
    }
}

/// Bundled demonstration worlds.
pub fn demo_worlds() -> Vec<ToyWorld> {
    [
        include_str!("../worlds/mirrored_traits.json"),
        include_str!("../worlds/noisy_history.json"),
    ]
    .iter()
    .map(|s| ToyWorld::from_json(s).expect("bundled world is valid"))
    .collect()
}

/// The 2×2×2 world where the minority trait flips the likely intent.
pub fn prior_gap_world() -> ToyWorld {
    ToyWorld::from_json(include_str!("../worlds/prior_gap.json")).expect("bundled world is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_worlds_validate() {
        assert_eq!(demo_worlds().len(), 2);
        prior_gap_world();
    }

    #[test]
    fn random_worlds_validate() {
        for seed in 0..20 {
            ToyWorld::random(seed, 5, 3, 4, 3).validate().unwrap();
        }
        assert_eq!(ToyWorld::random(7, 2, 2, 2, 2), ToyWorld::random(7, 2, 2, 2, 2));
    }

    #[test]
    fn rejects_bad_tables() {
        let mut w = prior_gap_world();
        w.prior[0][0] += 1e-9;
        assert!(matches!(w.validate(), Err(EntropyError::Invalid(_))));
        let mut w = prior_gap_world();
        w.emission[1][0] = vec![0.5, 0.5, 0.0];
        assert!(w.validate().is_err());
        let mut w = prior_gap_world();
        w.emission[0][0] = vec![1.5, -0.5];
        assert!(w.validate().is_err());
        let mut w = prior_gap_world();
        w.traits.push("t0".into());
        assert!(w.validate().is_err());
    }

    #[test]
    fn size_cap() {
        let w = ToyWorld {
            name: String::new(),
            intents: (0..1001).map(|k| k.to_string()).collect(),
            traits: (0..1000).map(|k| k.to_string()).collect(),
            contexts: vec!["c".into(), "d".into()],
            histories: default_histories(),
            prior: vec![],
            emission: vec![],
            history_channel: vec![],
        };
        assert!(matches!(w.validate(), Err(EntropyError::TooLarge(2_002_000))));
    }

    #[test]
    fn missing_history_channel_means_single_symbol() {
        let w = ToyWorld::from_json(
            r#"{"intents":["a","b"],"traits":["t"],"contexts":["c"],
                "prior":[[0.5],[0.5]],"emission":[[[1.0]],[[1.0]]]}"#,
        )
        .unwrap();
        assert_eq!(w.n_histories(), 1);
        assert_eq!(w.history_prob(0, 0), 1.0);
        assert!(ToyWorld::from_json(r#"{"intents":["a"]}"#).is_err());
    }
}
