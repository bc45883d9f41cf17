//! Ensemble decision rules over per-model votes.
//!
//! All three rules are deterministic. Ties between models go to the lowest
//! index in input order; ties between classes in a vote go to the class whose
//! supporters put more final-layer probability on it, then to the lowest class.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("no votes to combine")]
    NoVotes,
    #[error("vote from {model_id} has {found} choice probabilities, expected {expected}")]
    InconsistentChoices {
        model_id: String,
        expected: usize,
        found: usize,
    },
    #[error("vote from {model_id} predicts class {prediction} with only {num_choices} choices")]
    PredictionOutOfRange {
        model_id: String,
        prediction: usize,
        num_choices: usize,
    },
    #[error("vote from {0} carries no confidence")]
    MissingConfidence(String),
    #[error("{decisions} decisions but {golds} gold labels")]
    LengthMismatch { decisions: usize, golds: usize },
    #[error("cannot score an empty decision list")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    MajorityVote,
    ProbabilityMax,
    MaxConfidence,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::MajorityVote,
        Strategy::ProbabilityMax,
        Strategy::MaxConfidence,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::MajorityVote => "majority_vote",
            Strategy::ProbabilityMax => "probability_max",
            Strategy::MaxConfidence => "max_confidence",
        }
    }

    /// Row label used in rendered tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Strategy::MajorityVote => "Majority Vote",
            Strategy::ProbabilityMax => "Probability Max",
            Strategy::MaxConfidence => "Max Confidence",
        }
    }

    pub fn needs_confidence(self) -> bool {
        self == Strategy::MaxConfidence
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

/// What one model contributes to an ensemble decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVote {
    pub model_id: String,
    pub prediction: usize,
    /// The model's final-layer choice distribution.
    pub final_probs: Vec<f64>,
    pub confidence: Option<f64>,
}

impl ModelVote {
    /// Probability the model put on its own answer.
    pub fn chosen_prob(&self) -> f64 {
        self.final_probs[self.prediction]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleDecision {
    pub chosen_class: usize,
    pub strategy: Strategy,
    pub winning_model: Option<String>,
    pub tie_broken: bool,
}

fn check_votes(votes: &[ModelVote]) -> Result<usize, EnsembleError> {
    let first = votes.first().ok_or(EnsembleError::NoVotes)?;
    let k = first.final_probs.len();
    for v in votes {
        if v.final_probs.len() != k {
            return Err(EnsembleError::InconsistentChoices {
                model_id: v.model_id.clone(),
                expected: k,
                found: v.final_probs.len(),
            });
        }
        if v.prediction >= k {
            return Err(EnsembleError::PredictionOutOfRange {
                model_id: v.model_id.clone(),
                prediction: v.prediction,
                num_choices: k,
            });
        }
    }
    Ok(k)
}

/// Index of the first maximal score and whether another index shares it.
fn first_max(scores: impl Iterator<Item = f64>) -> (usize, bool) {
    let mut best = (0, f64::NEG_INFINITY);
    let mut tied = false;
    for (i, s) in scores.enumerate() {
        if s > best.1 {
            best = (i, s);
            tied = false;
        } else if s == best.1 {
            tied = true;
        }
    }
    (best.0, tied)
}

/// The modal prediction.
///
/// Class ties are broken by the summed final-layer probability the class's
/// supporters gave it, then by the lowest class index.
pub fn majority_vote(votes: &[ModelVote]) -> Result<EnsembleDecision, EnsembleError> {
    let k = check_votes(votes)?;
    let mut counts = vec![0usize; k];
    let mut mass = vec![0.0f64; k];
    for v in votes {
        counts[v.prediction] += 1;
        mass[v.prediction] += v.chosen_prob();
    }
    let top = *counts.iter().max().expect("k >= 1");
    let tied: Vec<usize> = (0..k).filter(|&c| counts[c] == top).collect();
    let chosen_class = if tied.len() == 1 {
        tied[0]
    } else {
        let (i, _) = first_max(tied.iter().map(|&c| mass[c]));
        tied[i]
    };
    Ok(EnsembleDecision {
        chosen_class,
        strategy: Strategy::MajorityVote,
        winning_model: None,
        tie_broken: tied.len() > 1,
    })
}

/// The answer of the model that put the most probability on its own choice.
pub fn probability_max(votes: &[ModelVote]) -> Result<EnsembleDecision, EnsembleError> {
    check_votes(votes)?;
    let (i, tied) = first_max(votes.iter().map(ModelVote::chosen_prob));
    Ok(EnsembleDecision {
        chosen_class: votes[i].prediction,
        strategy: Strategy::ProbabilityMax,
        winning_model: Some(votes[i].model_id.clone()),
        tie_broken: tied,
    })
}

/// The answer of the model whose confidence predictor scored highest.
pub fn max_confidence(votes: &[ModelVote]) -> Result<EnsembleDecision, EnsembleError> {
    check_votes(votes)?;
    let confidences = votes
        .iter()
        .map(|v| {
            v.confidence
                .ok_or_else(|| EnsembleError::MissingConfidence(v.model_id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (i, tied) = first_max(confidences.into_iter());
    Ok(EnsembleDecision {
        chosen_class: votes[i].prediction,
        strategy: Strategy::MaxConfidence,
        winning_model: Some(votes[i].model_id.clone()),
        tie_broken: tied,
    })
}

pub fn decide(strategy: Strategy, votes: &[ModelVote]) -> Result<EnsembleDecision, EnsembleError> {
    match strategy {
        Strategy::MajorityVote => majority_vote(votes),
        Strategy::ProbabilityMax => probability_max(votes),
        Strategy::MaxConfidence => max_confidence(votes),
    }
}

/// Fraction of decisions whose class equals the gold label.
pub fn accuracy(decisions: &[EnsembleDecision], golds: &[usize]) -> Result<f64, EnsembleError> {
    if decisions.len() != golds.len() {
        return Err(EnsembleError::LengthMismatch {
            decisions: decisions.len(),
            golds: golds.len(),
        });
    }
    if decisions.is_empty() {
        return Err(EnsembleError::Empty);
    }
    let hits = decisions
        .iter()
        .zip(golds)
        .filter(|(d, &g)| d.chosen_class == g)
        .count();
    Ok(hits as f64 / decisions.len() as f64)
}
