//! Vehicle orientation handling: the eight canonical viewpoints, group
//! likelihood aggregation, and adaptive key-point selection.
//!
//! Each orientation group is named after its center viewpoint and contains
//! that viewpoint plus its two circular neighbors (the front group is
//! left front / front / right front). Every group maps to a fixed ordered
//! list of seven prominent key-points.

use crate::error::{Error, Result};
use crate::heatmaps::NUM_SELECTED_KEYPOINTS;
use std::fmt;
use std::str::FromStr;

pub const NUM_ORIENTATIONS: usize = 8;

/// Canonical viewpoint order. Index 0 is front, proceeding clockwise through
/// the right side, rear, and left side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Orientation {
    Front,
    RightFront,
    Right,
    RightRear,
    Rear,
    LeftRear,
    Left,
    LeftFront,
}

impl Orientation {
    pub const ALL: [Orientation; NUM_ORIENTATIONS] = [
        Orientation::Front,
        Orientation::RightFront,
        Orientation::Right,
        Orientation::RightRear,
        Orientation::Rear,
        Orientation::LeftRear,
        Orientation::Left,
        Orientation::LeftFront,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Orientation::ALL
            .get(index)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("orientation index {index} out of 0..8")))
    }

    pub fn label(self) -> &'static str {
        match self {
            Orientation::Front => "front",
            Orientation::RightFront => "right_front",
            Orientation::Right => "right",
            Orientation::RightRear => "right_rear",
            Orientation::Rear => "rear",
            Orientation::LeftRear => "left_rear",
            Orientation::Left => "left",
            Orientation::LeftFront => "left_front",
        }
    }

    /// Circular neighbors `(previous, next)` in canonical order.
    pub fn neighbors(self) -> (Orientation, Orientation) {
        let i = self.index();
        (
            Orientation::ALL[(i + NUM_ORIENTATIONS - 1) % NUM_ORIENTATIONS],
            Orientation::ALL[(i + 1) % NUM_ORIENTATIONS],
        )
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Orientation::ALL
            .iter()
            .copied()
            .find(|o| o.label() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown orientation label `{s}`")))
    }
}

/// Seven prominent key-points per orientation group, ordered as selected.
/// Rows follow the canonical orientation order of the group centers;
/// key-point ids are 1-based.
const GROUP_KEYPOINTS: [[usize; NUM_SELECTED_KEYPOINTS]; NUM_ORIENTATIONS] = [
    [11, 12, 7, 8, 9, 13, 14],    // front
    [9, 13, 5, 7, 12, 3, 16],     // right front
    [7, 3, 12, 13, 16, 4, 18],    // right
    [3, 4, 12, 16, 18, 19, 13],   // right rear
    [18, 16, 15, 19, 17, 11, 12], // rear
    [2, 17, 15, 11, 14, 19, 1],   // left rear
    [8, 1, 11, 14, 15, 2, 17],    // left
    [9, 14, 6, 8, 11, 1, 15],     // left front
];

/// The ordered key-point row for a group, identified by its center viewpoint.
pub fn keypoints_for_group(center: Orientation) -> [usize; NUM_SELECTED_KEYPOINTS] {
    GROUP_KEYPOINTS[center.index()]
}

/// An orientation group: center viewpoint, its three member viewpoints, and
/// the key-points visible from that group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrientationGroup {
    pub center: Orientation,
    pub members: [Orientation; 3],
    pub keypoints: [usize; NUM_SELECTED_KEYPOINTS],
}

impl OrientationGroup {
    pub fn for_center(center: Orientation) -> Self {
        let (prev, next) = center.neighbors();
        OrientationGroup {
            center,
            members: [prev, center, next],
            keypoints: keypoints_for_group(center),
        }
    }
}

/// An 8-way viewpoint likelihood. Entries are non-negative with positive
/// total mass; vectors built from logits are softmax-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientationLikelihood {
    p: [f64; NUM_ORIENTATIONS],
}

impl OrientationLikelihood {
    pub fn from_probabilities(p: [f64; NUM_ORIENTATIONS]) -> Result<Self> {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("orientation likelihood".into()));
        }
        if p.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(
                "orientation likelihood entries must be non-negative".into(),
            ));
        }
        if p.iter().sum::<f64>() <= 0.0 {
            return Err(Error::DegenerateInput(
                "orientation likelihood has zero total mass".into(),
            ));
        }
        Ok(OrientationLikelihood { p })
    }

    /// Softmax over raw logits, computed with the max-shift for stability.
    pub fn from_logits(logits: [f64; NUM_ORIENTATIONS]) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("orientation logits".into()));
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps = logits.map(|v| (v - max).exp());
        let total: f64 = exps.iter().sum();
        Ok(OrientationLikelihood {
            p: exps.map(|e| e / total),
        })
    }

    pub fn values(&self) -> &[f64; NUM_ORIENTATIONS] {
        &self.p
    }

    pub fn get(&self, o: Orientation) -> f64 {
        self.p[o.index()]
    }

    /// Most likely single viewpoint; ties resolve to canonical order.
    pub fn argmax(&self) -> Orientation {
        let mut best = 0;
        for i in 1..NUM_ORIENTATIONS {
            if self.p[i] > self.p[best] {
                best = i;
            }
        }
        Orientation::ALL[best]
    }
}

/// Per-group likelihood: the plain sum of the three member viewpoints'
/// likelihoods, indexed by group center.
pub fn group_scores(lik: &OrientationLikelihood) -> [f64; NUM_ORIENTATIONS] {
    let mut scores = [0.0; NUM_ORIENTATIONS];
    for (i, center) in Orientation::ALL.iter().enumerate() {
        let (prev, next) = center.neighbors();
        scores[i] = lik.get(prev) + lik.get(*center) + lik.get(next);
    }
    scores
}

/// Picks the group with the highest aggregated likelihood. Ties break first
/// by larger center-viewpoint likelihood, then by canonical group order.
pub fn select_group(lik: &OrientationLikelihood) -> OrientationGroup {
    let scores = group_scores(lik);
    let mut best = 0;
    for i in 1..NUM_ORIENTATIONS {
        let better = scores[i] > scores[best]
            || (scores[i] == scores[best]
                && lik.p[i] > lik.p[best]);
        if better {
            best = i;
        }
    }
    OrientationGroup::for_center(Orientation::ALL[best])
}

/// Row-by-column confusion counts over the eight viewpoints: entry `(i, j)`
/// counts ground-truth `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: [[u64; NUM_ORIENTATIONS]; NUM_ORIENTATIONS],
}

impl ConfusionMatrix {
    pub fn counts(&self) -> &[[u64; NUM_ORIENTATIONS]; NUM_ORIENTATIONS] {
        &self.counts
    }

    pub fn count(&self, ground_truth: Orientation, predicted: Orientation) -> u64 {
        self.counts[ground_truth.index()][predicted.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return f64::NAN;
        }
        let trace: u64 = (0..NUM_ORIENTATIONS).map(|i| self.counts[i][i]).sum();
        trace as f64 / total as f64
    }
}

pub fn confusion_matrix(
    predictions: &[Orientation],
    ground_truth: &[Orientation],
) -> Result<ConfusionMatrix> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::dim(
            "confusion matrix inputs",
            ground_truth.len(),
            predictions.len(),
        ));
    }
    let mut counts = [[0u64; NUM_ORIENTATIONS]; NUM_ORIENTATIONS];
    for (&pred, &gt) in predictions.iter().zip(ground_truth) {
        counts[gt.index()][pred.index()] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lik(entries: &[(Orientation, f64)]) -> OrientationLikelihood {
        let mut p = [0.0; 8];
        for &(o, v) in entries {
            p[o.index()] = v;
        }
        OrientationLikelihood::from_probabilities(p).unwrap()
    }

    #[test]
    fn front_group_members_match_definition() {
        let g = OrientationGroup::for_center(Orientation::Front);
        assert_eq!(
            g.members,
            [Orientation::LeftFront, Orientation::Front, Orientation::RightFront]
        );
    }

    #[test]
    fn every_group_is_center_with_circular_neighbors() {
        for center in Orientation::ALL {
            let g = OrientationGroup::for_center(center);
            assert_eq!(g.members[1], center);
            let (prev, next) = center.neighbors();
            assert_eq!(g.members[0], prev);
            assert_eq!(g.members[2], next);
        }
    }

    #[test]
    fn table_rows_have_seven_distinct_in_range_entries() {
        for center in Orientation::ALL {
            let row = keypoints_for_group(center);
            let mut sorted = row;
            sorted.sort_unstable();
            for w in sorted.windows(2) {
                assert!(w[0] < w[1], "duplicate key-point in {center} row");
            }
            assert!(row.iter().all(|&k| (1..=20).contains(&k)));
        }
    }

    #[test]
    fn group_score_examples() {
        // One-hot at front: the three groups containing front score 1.
        let one_hot = lik(&[(Orientation::Front, 1.0)]);
        let s = group_scores(&one_hot);
        assert_eq!(s[Orientation::Front.index()], 1.0);
        assert_eq!(s[Orientation::LeftFront.index()], 1.0);
        assert_eq!(s[Orientation::RightFront.index()], 1.0);
        assert_eq!(s[Orientation::Rear.index()], 0.0);

        // Uniform likelihood: every group sums to 3/8 exactly.
        let uniform = OrientationLikelihood::from_probabilities([0.125; 8]).unwrap();
        for v in group_scores(&uniform) {
            assert_eq!(v, 0.375);
        }

        let mixed = lik(&[
            (Orientation::Front, 0.5),
            (Orientation::RightFront, 0.3),
            (Orientation::Right, 0.2),
        ]);
        let s = group_scores(&mixed);
        assert!((s[Orientation::RightFront.index()] - 1.0).abs() < 1e-15);
        assert!((s[Orientation::Front.index()] - 0.8).abs() < 1e-15);
        assert!((s[Orientation::Right.index()] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn group_scores_match_membership_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..200 {
            let mut p = [0.0; 8];
            for v in &mut p {
                *v = rng.random_range(0.0..1.0);
            }
            let l = OrientationLikelihood::from_probabilities(p).unwrap();
            let scores = group_scores(&l);
            for center in Orientation::ALL {
                let g = OrientationGroup::for_center(center);
                let expected: f64 = g.members.iter().map(|m| p[m.index()]).sum();
                assert_eq!(scores[center.index()], expected);
            }
        }
    }

    #[test]
    fn select_group_examples() {
        let mixed = lik(&[
            (Orientation::Front, 0.5),
            (Orientation::RightFront, 0.3),
            (Orientation::Right, 0.2),
        ]);
        let g = select_group(&mixed);
        assert_eq!(g.center, Orientation::RightFront);
        assert_eq!(g.keypoints, [9, 13, 5, 7, 12, 3, 16]);

        // One-hot front ties three groups at 1.0; center likelihood wins.
        let g = select_group(&lik(&[(Orientation::Front, 1.0)]));
        assert_eq!(g.center, Orientation::Front);

        let g = select_group(&lik(&[(Orientation::LeftRear, 1.0)]));
        assert_eq!(g.center, Orientation::LeftRear);
        assert_eq!(g.keypoints, [2, 17, 15, 11, 14, 19, 1]);
    }

    #[test]
    fn keypoint_rows_match_selection_table() {
        assert_eq!(
            keypoints_for_group(Orientation::Rear),
            [18, 16, 15, 19, 17, 11, 12]
        );
        assert_eq!(
            keypoints_for_group(Orientation::Left),
            [8, 1, 11, 14, 15, 2, 17]
        );
        assert_eq!(
            keypoints_for_group(Orientation::RightRear),
            [3, 4, 12, 16, 18, 19, 13]
        );
    }

    #[test]
    fn likelihood_constructors_validate() {
        assert!(OrientationLikelihood::from_probabilities([0.0; 8]).is_err());
        let mut neg = [0.125; 8];
        neg[3] = -0.1;
        assert!(OrientationLikelihood::from_probabilities(neg).is_err());
        let mut nan = [0.125; 8];
        nan[0] = f64::NAN;
        assert!(OrientationLikelihood::from_probabilities(nan).is_err());

        let soft = OrientationLikelihood::from_logits([0.0; 8]).unwrap();
        let sum: f64 = soft.values().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(soft.values().iter().all(|&v| (v - 0.125).abs() < 1e-12));
    }

    #[test]
    fn orientation_labels_round_trip() {
        for o in Orientation::ALL {
            assert_eq!(o.label().parse::<Orientation>().unwrap(), o);
        }
        assert!("sideways".parse::<Orientation>().is_err());
    }

    #[test]
    fn confusion_identity_and_counting() {
        let all = Orientation::ALL.to_vec();
        let m = confusion_matrix(&all, &all).unwrap();
        assert_eq!(m.accuracy(), 1.0);
        for gt in Orientation::ALL {
            for pred in Orientation::ALL {
                let expected = u64::from(gt == pred);
                assert_eq!(m.count(gt, pred), expected);
            }
        }

        let preds = vec![Orientation::Front; 8];
        let m = confusion_matrix(&preds, &all).unwrap();
        assert!((m.accuracy() - 0.125).abs() < 1e-15);

        assert!(confusion_matrix(&preds[..3], &all).is_err());
    }

    #[test]
    fn confusion_matches_brute_force_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let preds: Vec<Orientation> = (0..100)
            .map(|_| Orientation::ALL[rng.random_range(0..8)])
            .collect();
        let gts: Vec<Orientation> = (0..100)
            .map(|_| Orientation::ALL[rng.random_range(0..8)])
            .collect();
        let m = confusion_matrix(&preds, &gts).unwrap();

        let mut correct = 0u64;
        for gt in Orientation::ALL {
            for pred in Orientation::ALL {
                let tally = preds
                    .iter()
                    .zip(&gts)
                    .filter(|(p, g)| **p == pred && **g == gt)
                    .count() as u64;
                assert_eq!(m.count(gt, pred), tally);
                if gt == pred {
                    correct += tally;
                }
            }
        }
        assert_eq!(m.accuracy(), correct as f64 / 100.0);
    }

    proptest! {
        #[test]
        fn selection_is_scale_invariant(
            raw in proptest::collection::vec(0.001f64..1.0, 8),
            scale in prop_oneof![Just(0.1f64), Just(1.0f64), Just(10.0f64)],
        ) {
            let mut p = [0.0; 8];
            p.copy_from_slice(&raw);
            let base = OrientationLikelihood::from_probabilities(p).unwrap();
            let scaled =
                OrientationLikelihood::from_probabilities(p.map(|v| v * scale)).unwrap();
            prop_assert_eq!(select_group(&base).center, select_group(&scaled).center);
        }
    }
}
