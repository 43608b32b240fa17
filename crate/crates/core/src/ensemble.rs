//! Weighted majority voting over classifier predictions.
//!
//! The winning class maximizes the weight mass of the classifiers voting
//! for it: `argmax_i sum_j w_j * I(h_j = i)`. Ties break toward the class
//! with the larger weighted sum of its voters' confidences, then toward the
//! lower class index.

use crate::classifier::Prediction;
use crate::error::{Error, Result};

/// Normalized nonnegative voter weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    weights: Vec<f64>,
}

impl EnsembleConfig {
    /// Build from raw nonnegative weights; they are normalized to sum to 1,
    /// so any uniform rescaling yields the same config.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid_input("ensemble needs at least one weight"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid_input(
                "weights must be finite and nonnegative",
            ));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::invalid_input("weights must not all be zero"));
        }
        Ok(EnsembleConfig {
            weights: weights.into_iter().map(|w| w / sum).collect(),
        })
    }

    pub fn uniform(k: usize) -> Result<Self> {
        EnsembleConfig::new(vec![1.0; k.max(1)])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn check_len(&self, votes: usize) -> Result<()> {
        if votes != self.weights.len() {
            return Err(Error::invalid_input(format!(
                "{} votes but {} weights",
                votes,
                self.weights.len()
            )));
        }
        Ok(())
    }
}

fn class_mass(votes: &[usize], weights: &[f64]) -> Result<[f64; 2]> {
    let mut mass = [0.0; 2];
    for (&vote, &w) in votes.iter().zip(weights) {
        if vote > 1 {
            return Err(Error::invalid_input(format!(
                "vote {} outside {{0, 1}}",
                vote
            )));
        }
        mass[vote] += w;
    }
    Ok(mass)
}

/// The weighted majority class of bare votes. Without member confidences a
/// tie falls back directly to the lower class index.
pub fn majority_vote(votes: &[usize], cfg: &EnsembleConfig) -> Result<usize> {
    cfg.check_len(votes.len())?;
    let mass = class_mass(votes, &cfg.weights)?;
    Ok(if mass[1] > mass[0] { 1 } else { 0 })
}

/// Combine full member predictions: the class comes from the weighted
/// majority vote (confidence tiebreak, then lower index); the reported
/// probabilities are the weighted mean of member probabilities,
/// renormalized; the confidence is the combined probability of the winning
/// class.
///
/// Note the returned class follows the vote, which can disagree with the
/// arg-max of the averaged probabilities.
pub fn ensemble_predict(predictions: &[Prediction], cfg: &EnsembleConfig) -> Result<Prediction> {
    cfg.check_len(predictions.len())?;
    let votes: Vec<usize> = predictions.iter().map(|p| p.predicted_class).collect();
    let mass = class_mass(&votes, &cfg.weights)?;

    let winner = if mass[1] > mass[0] {
        1
    } else if mass[0] > mass[1] {
        0
    } else {
        // Tie on weight mass: compare the weighted confidence of each
        // class's voters.
        let mut conf_mass = [0.0; 2];
        for (p, &w) in predictions.iter().zip(&cfg.weights) {
            conf_mass[p.predicted_class] += w * p.confidence;
        }
        if conf_mass[1] > conf_mass[0] {
            1
        } else {
            0
        }
    };

    let mut probs = [0.0; 2];
    for (p, &w) in predictions.iter().zip(&cfg.weights) {
        probs[0] += w * p.probs[0];
        probs[1] += w * p.probs[1];
    }
    let total = probs[0] + probs[1];
    probs[0] /= total;
    probs[1] /= total;

    Ok(Prediction {
        probs,
        predicted_class: winner,
        confidence: probs[winner],
    })
}
