//! Seeded surface-level perturbations for noisy variants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRates {
    /// Per-character probability of swapping a letter with its right neighbor.
    pub swap: f64,
    /// Per-whitespace probability of doubling it.
    pub double_space: f64,
    /// Per-letter probability of flipping case.
    pub case_flip: f64,
}

impl Default for NoiseRates {
    fn default() -> Self {
        NoiseRates {
            swap: 0.01,
            double_space: 0.005,
            case_flip: 0.005,
        }
    }
}

/// Applies spelling-style swaps, whitespace doubling and casing flips.
/// Identical `(text, rates, seed)` always yields identical output.
pub fn perturb(text: &str, rates: &NoiseRates, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i + 1 < chars.len() {
        if chars[i].is_alphabetic() && chars[i + 1].is_alphabetic() && rng.random_bool(rates.swap) {
            chars.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
    let mut out = String::with_capacity(text.len() + 8);
    for c in chars {
        if c.is_whitespace() {
            out.push(c);
            if rng.random_bool(rates.double_space) {
                out.push(c);
            }
        } else if c.is_alphabetic() && rng.random_bool(rates.case_flip) {
            if c.is_uppercase() {
                out.extend(c.to_lowercase());
            } else {
                out.extend(c.to_uppercase());
            }
        } else {
            out.push(c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rates_are_identity() {
        let r = NoiseRates {
            swap: 0.0,
            double_space: 0.0,
            case_flip: 0.0,
        };
        assert_eq!(perturb("Hello there world", &r, 1), "Hello there world");
    }

    #[test]
    fn deterministic_per_seed_and_changes_long_text() {
        let text = "The quick brown fox jumps over the lazy dog. ".repeat(40);
        let r = NoiseRates::default();
        let a = perturb(&text, &r, 7);
        assert_eq!(a, perturb(&text, &r, 7));
        assert_ne!(a, text);
        assert_ne!(a, perturb(&text, &r, 8));
        let letters = |s: &str| {
            let mut v: Vec<char> = s
                .chars()
                .filter(|c| !c.is_whitespace())
                .flat_map(|c| c.to_lowercase())
                .collect();
            v.sort();
            v
        };
        assert_eq!(
            letters(&a),
            letters(&text),
            "perturbations only permute and recase"
        );
    }
}
