use proptest::prelude::*;

use lens_core::ensemble::{
    accuracy, decide, majority_vote, max_confidence, probability_max, ModelVote, Strategy as Rule,
};
use lens_core::features::argmax_lowest;

fn arb_vote(i: usize, k: usize) -> impl Strategy<Value = ModelVote> {
    (prop::collection::vec(0.01f64..1.0, k), 0.0f64..1.0).prop_map(move |(raw, c)| {
        let total: f64 = raw.iter().sum();
        let final_probs: Vec<f64> = raw.iter().map(|x| x / total).collect();
        ModelVote {
            model_id: format!("m{i}"),
            prediction: argmax_lowest(&final_probs).unwrap(),
            final_probs,
            confidence: Some(c),
        }
    })
}

fn arb_votes() -> impl Strategy<Value = Vec<ModelVote>> {
    (1usize..7, 2usize..5)
        .prop_flat_map(|(n, k)| (0..n).map(|i| arb_vote(i, k)).collect::<Vec<_>>())
}

fn distinct(values: impl Iterator<Item = f64>) -> bool {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.windows(2).all(|w| w[0] != w[1])
}

proptest! {
    #[test]
    fn a_single_model_is_always_followed(vote in arb_vote(0, 3)) {
        for rule in Rule::ALL {
            let d = decide(rule, std::slice::from_ref(&vote)).unwrap();
            prop_assert_eq!(d.chosen_class, vote.prediction);
            prop_assert!(!d.tie_broken);
        }
    }

    #[test]
    fn unanimous_models_decide_together(mut votes in arb_votes(), class in 0usize..2) {
        for v in &mut votes {
            v.prediction = class;
        }
        for rule in Rule::ALL {
            prop_assert_eq!(decide(rule, &votes).unwrap().chosen_class, class);
        }
    }

    #[test]
    fn max_confidence_follows_the_most_confident_model(votes in arb_votes()) {
        let d = max_confidence(&votes).unwrap();
        let best = votes.iter().map(|v| v.confidence.unwrap()).fold(f64::NEG_INFINITY, f64::max);
        let first = votes.iter().position(|v| v.confidence == Some(best)).unwrap();
        prop_assert_eq!(d.chosen_class, votes[first].prediction);
        prop_assert_eq!(d.winning_model.as_deref(), Some(votes[first].model_id.as_str()));
    }

    #[test]
    fn probability_max_follows_the_most_certain_model(votes in arb_votes()) {
        let d = probability_max(&votes).unwrap();
        let best = votes.iter().map(ModelVote::chosen_prob).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(votes.iter().any(|v| v.chosen_prob() == best && v.prediction == d.chosen_class));
    }

    #[test]
    fn strictly_monotone_rescaling_keeps_the_winner(votes in arb_votes()) {
        let squashed: Vec<ModelVote> = votes
            .iter()
            .map(|v| ModelVote { confidence: v.confidence.map(|c| (3.0 * c - 1.0).tanh()), ..v.clone() })
            .collect();
        prop_assert_eq!(max_confidence(&votes).unwrap(), max_confidence(&squashed).unwrap());
    }

    #[test]
    fn order_does_not_matter_without_ties(votes in arb_votes(), rot in 0usize..7) {
        let mut shuffled = votes.clone();
        let n = shuffled.len();
        shuffled.rotate_left(rot % n);
        shuffled.reverse();
        if distinct(votes.iter().map(|v| v.confidence.unwrap())) {
            prop_assert_eq!(max_confidence(&votes).unwrap(), max_confidence(&shuffled).unwrap());
        }
        if distinct(votes.iter().map(ModelVote::chosen_prob)) {
            prop_assert_eq!(probability_max(&votes).unwrap(), probability_max(&shuffled).unwrap());
        }
        let a = majority_vote(&votes).unwrap();
        let b = majority_vote(&shuffled).unwrap();
        prop_assert_eq!(a.chosen_class, b.chosen_class);
    }

    #[test]
    fn majority_picks_a_modal_class(votes in arb_votes()) {
        let d = majority_vote(&votes).unwrap();
        let count = |c: usize| votes.iter().filter(|v| v.prediction == c).count();
        let top = (0..votes[0].final_probs.len()).map(count).max().unwrap();
        prop_assert_eq!(count(d.chosen_class), top);
    }

    #[test]
    fn accuracy_is_a_plain_recount(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
    ) {
        let decisions: Vec<_> = pairs
            .iter()
            .map(|&(pred, _)| {
                decide(Rule::MajorityVote, &[ModelVote {
                    model_id: "m".into(),
                    prediction: pred,
                    final_probs: vec![0.25; 4],
                    confidence: None,
                }])
                .unwrap()
            })
            .collect();
        let golds: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let mut hits = 0;
        for (p, g) in &pairs {
            if p == g {
                hits += 1;
            }
        }
        prop_assert_eq!(accuracy(&decisions, &golds).unwrap(), hits as f64 / pairs.len() as f64);
    }
}

#[test]
fn majority_tie_goes_to_the_heavier_class() {
    let vote = |i: usize, pred: usize, p: f64| ModelVote {
        model_id: format!("m{i}"),
        prediction: pred,
        final_probs: if pred == 0 {
            vec![p, 1.0 - p]
        } else {
            vec![1.0 - p, p]
        },
        confidence: None,
    };
    let d = majority_vote(&[vote(0, 0, 0.6), vote(1, 1, 0.9)]).unwrap();
    assert_eq!(d.chosen_class, 1);
    assert!(d.tie_broken);
    let d = majority_vote(&[vote(0, 1, 0.7), vote(1, 0, 0.7)]).unwrap();
    assert_eq!(d.chosen_class, 0);
    assert!(d.tie_broken);
}

#[test]
fn missing_confidence_is_reported() {
    let v = ModelVote {
        model_id: "m".into(),
        prediction: 0,
        final_probs: vec![0.5, 0.5],
        confidence: None,
    };
    assert!(max_confidence(std::slice::from_ref(&v)).is_err());
    assert!(probability_max(&[v]).is_ok());
    assert!(majority_vote(&[]).is_err());
}
