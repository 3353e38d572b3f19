//! Shared caption-loss fixtures: user bag, generated steps and the expected
//! loss, for checking other implementations of the loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{caption_loss, CaptionBag};
use super::{ObjectiveError, CAPTION_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagFixture {
    pub id: String,
    pub eps: f64,
    pub user: Vec<f64>,
    pub steps: Vec<Vec<f64>>,
    pub expected: f64,
}

fn random_distribution(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    // occasional exact zeros exercise the epsilon path
    let raw: Vec<f64> = (0..len).map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random::<f64>() }).collect();
    let sum: f64 = raw.iter().sum();
    if sum == 0.0 {
        let mut one = vec![0.0; len];
        one[rng.random_range(0..len)] = 1.0;
        return one;
    }
    raw.into_iter().map(|v| v / sum).collect()
}

/// `count` seeded fixtures over vocabularies of 2 to 12 words.
pub fn bag_loss_fixtures(count: usize, seed: u64) -> Result<Vec<BagFixture>, ObjectiveError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let v = rng.random_range(2..=12);
            let words = rng.random_range(1..=4);
            let mut user = vec![0.0; v];
            for _ in 0..words {
                user[rng.random_range(0..v)] += 1.0 / words as f64;
            }
            let steps: Vec<Vec<f64>> = (0..rng.random_range(1..=6)).map(|_| random_distribution(v, &mut rng)).collect();
            let bag = CaptionBag::from_probs(user.clone(), words);
            let expected = caption_loss(&bag, &steps)?.value;
            Ok(BagFixture { id: format!("bag-{i:04}"), eps: CAPTION_EPS, user, steps, expected })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_seeded_and_recomputable() {
        let a = bag_loss_fixtures(20, 3).unwrap();
        assert_eq!(a, bag_loss_fixtures(20, 3).unwrap());
        for f in &a {
            let bag = CaptionBag::from_probs(f.user.clone(), 1);
            assert_eq!(caption_loss(&bag, &f.steps).unwrap().value, f.expected);
            assert!(f.expected >= 0.0);
        }
    }
}
