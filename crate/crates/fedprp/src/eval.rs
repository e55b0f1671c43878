//! Accuracy metrics: nearest-prototype inference, the three accuracy views
//! (global model, personalized models on the balanced test set, personalized
//! models on their own distribution), and per-group reporting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{ClassGroups, LabeledDataset};
use crate::error::{FedError, Result};
use crate::model::{PersonalParams, SharedParams};

/// Per-group accuracy plus the overall and unweighted-average views.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub many: f64,
    pub medium: f64,
    pub few: f64,
    pub all: f64,
    pub average: f64,
}

/// The metrics recorded per round.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSet {
    pub acc_glo: f64,
    pub acc_loc: f64,
    pub acc_sel: f64,
    pub group_acc: GroupAccuracy,
}

/// Class of the L2-nearest prototype to the embedding of `x`; ties go to the
/// smallest class id. Works with either client empirical prototypes or the
/// server's global set.
pub fn predict_prototype(
    mu: &SharedParams,
    protos: &BTreeMap<usize, Vec<f64>>,
    x: &[f64],
) -> Result<usize> {
    if protos.is_empty() {
        return Err(FedError::Input("prototype set is empty".into()));
    }
    let z = mu.embed(x)?;
    let mut best_class = usize::MAX;
    let mut best_d2 = f64::INFINITY;
    for (&class, proto) in protos {
        let d2: f64 = proto
            .iter()
            .zip(&z)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        // BTreeMap iterates in ascending class order, so strict < keeps the
        // smallest class on ties.
        if d2 < best_d2 {
            best_d2 = d2;
            best_class = class;
        }
    }
    Ok(best_class)
}

/// Argmax over classifier logits, ties to the smallest class id.
pub fn predict_classifier(
    mu: &SharedParams,
    nu: &PersonalParams,
    x: &[f64],
) -> Result<usize> {
    let z = mu.embed(x)?;
    let logits = nu.logits(&z)?;
    let mut best = 0usize;
    for (i, l) in logits.iter().enumerate() {
        if *l > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

/// A model surface that can label a sample; lets the metrics run over both
/// prototype inference and classifier-head inference.
pub enum Predictor<'a> {
    Prototype {
        mu: &'a SharedParams,
        protos: &'a BTreeMap<usize, Vec<f64>>,
    },
    Classifier {
        mu: &'a SharedParams,
        nu: &'a PersonalParams,
    },
}

impl Predictor<'_> {
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        match self {
            Predictor::Prototype { mu, protos } => predict_prototype(mu, protos, x),
            Predictor::Classifier { mu, nu } => predict_classifier(mu, nu, x),
        }
    }
}

/// Fraction of `test` the predictor labels correctly. Classes with no
/// prototype are simply never predicted, so their samples count as errors.
pub fn accuracy(predictor: &Predictor, test: &LabeledDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(FedError::Input("empty test set".into()));
    }
    let mut correct = 0usize;
    for s in &test.samples {
        if predictor.predict(&s.features)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Predictions for every test sample, for group reporting.
pub fn predictions(predictor: &Predictor, test: &LabeledDataset) -> Result<Vec<usize>> {
    test.samples
        .iter()
        .map(|s| predictor.predict(&s.features))
        .collect()
}

/// Per-group accuracy over predictions on a test set. `groups` must
/// partition the class set of the labels.
pub fn group_report(
    predictions: &[usize],
    labels: &[usize],
    groups: &ClassGroups,
) -> Result<GroupAccuracy> {
    if predictions.len() != labels.len() {
        return Err(FedError::Input("predictions/labels length mismatch".into()));
    }
    let num_classes = groups.many.len() + groups.medium.len() + groups.few.len();
    let mut membership = vec![None::<u8>; num_classes];
    for (tag, set) in [(0u8, &groups.many), (1, &groups.medium), (2, &groups.few)] {
        for &c in set {
            if c >= num_classes || membership[c].is_some() {
                return Err(FedError::Input("groups do not partition the class set".into()));
            }
            membership[c] = Some(tag);
        }
    }
    let mut correct = [0usize; 3];
    let mut total = [0usize; 3];
    let mut all_correct = 0usize;
    for (&pred, &label) in predictions.iter().zip(labels) {
        if label >= num_classes {
            return Err(FedError::Input(format!("label {label} outside grouped classes")));
        }
        let g = membership[label].unwrap() as usize;
        total[g] += 1;
        if pred == label {
            correct[g] += 1;
            all_correct += 1;
        }
    }
    let acc = |g: usize| {
        if total[g] == 0 {
            0.0
        } else {
            correct[g] as f64 / total[g] as f64
        }
    };
    let (many, medium, few) = (acc(0), acc(1), acc(2));
    Ok(GroupAccuracy {
        many,
        medium,
        few,
        all: all_correct as f64 / predictions.len().max(1) as f64,
        average: (many + medium + few) / 3.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use crate::model::AffineLayer;
    use crate::numerics::Matrix;

    fn identity_mu(dim: usize) -> SharedParams {
        let mut w = Matrix::zeros(dim, dim);
        for i in 0..dim {
            *w.at_mut(i, i) = 1.0;
        }
        SharedParams::from_layers(vec![AffineLayer {
            weight: w,
            bias: vec![0.0; dim],
        }])
        .unwrap()
    }

    #[test]
    fn predict_nearest() {
        let mu = identity_mu(2);
        let protos: BTreeMap<usize, Vec<f64>> =
            [(0, vec![1.0, 0.0]), (1, vec![5.0, 5.0])].into_iter().collect();
        assert_eq!(predict_prototype(&mu, &protos, &[0.0, 0.0]).unwrap(), 0);
    }

    #[test]
    fn predict_exact_prototype_hit() {
        let mu = identity_mu(2);
        let protos: BTreeMap<usize, Vec<f64>> =
            [(0, vec![1.0, 0.0]), (1, vec![5.0, 5.0])].into_iter().collect();
        assert_eq!(predict_prototype(&mu, &protos, &[5.0, 5.0]).unwrap(), 1);
    }

    #[test]
    fn predict_tie_goes_to_lowest_class() {
        let mu = identity_mu(1);
        let protos: BTreeMap<usize, Vec<f64>> =
            [(2, vec![-1.0]), (7, vec![1.0])].into_iter().collect();
        assert_eq!(predict_prototype(&mu, &protos, &[0.0]).unwrap(), 2);
    }

    #[test]
    fn predict_translation_invariance() {
        let mu = identity_mu(2);
        let protos: BTreeMap<usize, Vec<f64>> =
            [(0, vec![1.0, 2.0]), (1, vec![-3.0, 0.5])].into_iter().collect();
        let shift = [10.0, -4.0];
        let shifted: BTreeMap<usize, Vec<f64>> = protos
            .iter()
            .map(|(c, p)| (*c, p.iter().zip(&shift).map(|(a, b)| a + b).collect()))
            .collect();
        for q in [[0.3, 0.4], [-2.0, 1.0], [5.0, 5.0]] {
            let moved = [q[0] + shift[0], q[1] + shift[1]];
            assert_eq!(
                predict_prototype(&mu, &protos, &q).unwrap(),
                predict_prototype(&mu, &shifted, &moved).unwrap()
            );
        }
    }

    #[test]
    fn degenerate_protos_at_origin_predict_tie_winner() {
        let mu = identity_mu(2);
        let protos: BTreeMap<usize, Vec<f64>> =
            [(0, vec![0.0, 0.0]), (1, vec![0.0, 0.0])].into_iter().collect();
        let test = LabeledDataset::new(
            vec![
                Sample { features: vec![1.0, 1.0], label: 0 },
                Sample { features: vec![2.0, 2.0], label: 1 },
            ],
            2,
        )
        .unwrap();
        let acc = accuracy(&Predictor::Prototype { mu: &mu, protos: &protos }, &test).unwrap();
        // Everything predicts class 0, so accuracy equals class 0's share.
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn empty_prototype_set_errors() {
        let mu = identity_mu(2);
        let protos = BTreeMap::new();
        assert!(predict_prototype(&mu, &protos, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn group_report_hand_fixture() {
        // 6 predictions with known per-group counts.
        let groups = ClassGroups {
            many: vec![0],
            medium: vec![1],
            few: vec![2],
        };
        let labels = [0, 0, 1, 1, 2, 2];
        let preds = [0, 1, 1, 1, 2, 0];
        let g = group_report(&preds, &labels, &groups).unwrap();
        assert_eq!(g.many, 0.5);
        assert_eq!(g.medium, 1.0);
        assert_eq!(g.few, 0.5);
        assert!((g.all - 4.0 / 6.0).abs() < 1e-12);
        assert!((g.average - (0.5 + 1.0 + 0.5) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn group_report_perfect_predictor() {
        let groups = ClassGroups {
            many: vec![0],
            medium: vec![1],
            few: vec![2],
        };
        let labels = [0, 1, 2, 2];
        let g = group_report(&labels, &labels, &groups).unwrap();
        assert_eq!(
            (g.many, g.medium, g.few, g.all, g.average),
            (1.0, 1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn group_report_single_group_equals_all() {
        let groups = ClassGroups {
            many: vec![0, 1, 2],
            medium: vec![],
            few: vec![],
        };
        let labels = [0, 1, 2, 1];
        let preds = [0, 1, 0, 1];
        let g = group_report(&preds, &labels, &groups).unwrap();
        assert_eq!(g.many, g.all);
    }

    #[test]
    fn group_report_rejects_non_partition() {
        let groups = ClassGroups {
            many: vec![0, 1],
            medium: vec![1],
            few: vec![],
        };
        assert!(group_report(&[0], &[0], &groups).is_err());
    }

    #[test]
    fn all_bounded_by_group_extremes() {
        let groups = ClassGroups {
            many: vec![0],
            medium: vec![1],
            few: vec![2],
        };
        let labels = [0, 0, 0, 1, 2, 2];
        let preds = [0, 0, 1, 1, 0, 2];
        let g = group_report(&preds, &labels, &groups).unwrap();
        let lo = g.many.min(g.medium).min(g.few);
        let hi = g.many.max(g.medium).max(g.few);
        assert!(g.all >= lo - 1e-12 && g.all <= hi + 1e-12);
    }
}
