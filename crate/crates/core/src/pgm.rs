//! Pairwise geometric re-ranking of a retrieval shortlist.
//!
//! Tentative correspondences are first filtered by a vote on their relative
//! rotation and log-scale. Two surviving correspondences are then consistent
//! when the vector joining their database keypoints is the vector joining
//! their query keypoints, rotated and scaled by the voted transform.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::{PI, TAU};

use crate::exec::Exec;
use crate::features::{FeatureSet, Keypoint};
use crate::index::{FeatureMatch, KeypointStore, RankedMatch};

pub const ROTATION_BIN: f64 = PI / 8.0;
pub const SCALE_BIN: f64 = 0.2;
pub const ROTATION_TOLERANCE: f64 = PI / 8.0;
pub const SCALE_TOLERANCE: f64 = 0.2;
pub const PAIR_SCALE_TOLERANCE: f64 = 0.25;
pub const MIN_PAIR_LENGTH: f64 = 2.0;
/// Number of other correspondences an inlier must agree with.
pub const MIN_SUPPORT: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub query: Keypoint,
    pub db: Keypoint,
    pub hamming: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgmScore {
    /// Parallel to the scored correspondences.
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    pub pairs: usize,
    pub rotation: f64,
    pub log_scale: f64,
}

impl PgmScore {
    fn zero(n: usize) -> Self {
        PgmScore {
            inliers: vec![false; n],
            inlier_count: 0,
            pairs: 0,
            rotation: 0.0,
            log_scale: 0.0,
        }
    }
}

/// Greedy one-to-one selection: matches are taken by ascending Hamming
/// distance, then query index, then database feature, skipping any whose
/// query or database keypoint is already used.
pub fn select_one_to_one(matches: &[FeatureMatch]) -> Vec<FeatureMatch> {
    let mut sorted = matches.to_vec();
    sorted.sort_by_key(|m| (m.hamming, m.query, m.db));
    let mut used_q = HashSet::new();
    let mut used_db = HashSet::new();
    sorted
        .into_iter()
        .filter(|m| {
            if used_q.contains(&m.query) || used_db.contains(&m.db.keypoint) {
                return false;
            }
            used_q.insert(m.query);
            used_db.insert(m.db.keypoint);
            true
        })
        .collect()
}

/// One-to-one correspondences between `query` and database image `image_id`.
/// Matches whose keypoints cannot be resolved are skipped.
pub fn tentative_correspondences(
    matches: &[FeatureMatch],
    query: &FeatureSet,
    store: &impl KeypointStore,
    image_id: &str,
) -> Vec<Correspondence> {
    select_one_to_one(matches)
        .into_iter()
        .filter_map(|m| {
            Some(Correspondence {
                query: *query.keypoints().get(m.query as usize)?,
                db: store.keypoint(image_id, m.db.keypoint)?,
                hamming: m.hamming,
            })
        })
        .collect()
}

/// Signed difference `a - b` wrapped into `[-π, π)`.
fn angle_diff(a: f64, b: f64) -> f64 {
    (a - b + PI).rem_euclid(TAU) - PI
}

fn rotation_of(c: &Correspondence) -> f64 {
    (c.db.orientation as f64 - c.query.orientation as f64).rem_euclid(TAU)
}

fn log_scale_of(c: &Correspondence) -> f64 {
    (c.db.scale as f64 / c.query.scale as f64).ln()
}

/// Peak of the rotation/log-scale vote histogram and the mean of its votes.
fn vote(corrs: &[Correspondence]) -> (f64, f64) {
    let n_rot = (TAU / ROTATION_BIN).round() as i64;
    let mut bins: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, c) in corrs.iter().enumerate() {
        let r = ((rotation_of(c) / ROTATION_BIN).floor() as i64).min(n_rot - 1);
        let s = (log_scale_of(c) / SCALE_BIN).floor() as i64;
        bins.entry((r, s)).or_default().push(i);
    }
    // BTreeMap order makes the lowest bin win ties
    let mut peak: &[usize] = &[];
    for members in bins.values() {
        if members.len() > peak.len() {
            peak = members;
        }
    }
    let n = peak.len() as f64;
    // rotations in one bin never straddle the wrap point
    let rotation = peak.iter().map(|&i| rotation_of(&corrs[i])).sum::<f64>() / n;
    let log_scale = peak.iter().map(|&i| log_scale_of(&corrs[i])).sum::<f64>() / n;
    (rotation, log_scale)
}

/// Whether correspondences `a` and `b` agree on the transform
/// (`rotation`, `log_scale`). `None` when the query keypoints are too close.
pub fn pair_consistent(a: &Correspondence, b: &Correspondence, rotation: f64, log_scale: f64) -> Option<bool> {
    let qx = b.query.x as f64 - a.query.x as f64;
    let qy = b.query.y as f64 - a.query.y as f64;
    let dx = b.db.x as f64 - a.db.x as f64;
    let dy = b.db.y as f64 - a.db.y as f64;
    let q_len = qx.hypot(qy);
    if q_len < MIN_PAIR_LENGTH {
        return None;
    }
    let d_len = dx.hypot(dy);
    if d_len == 0.0 {
        return Some(false);
    }
    // angle from the query vector to the db vector; unchanged when a and b swap
    let relative = (qx * dy - qy * dx).atan2(qx * dx + qy * dy);
    let angle_ok = angle_diff(relative, rotation).abs() <= ROTATION_TOLERANCE;
    let scale_ok = ((d_len / q_len).ln() - log_scale).abs() <= PAIR_SCALE_TOLERANCE;
    Some(angle_ok && scale_ok)
}

pub fn pgm_score(corrs: &[Correspondence]) -> PgmScore {
    if corrs.len() < 2 {
        return PgmScore::zero(corrs.len());
    }
    let (rotation, log_scale) = vote(corrs);
    let survivors: Vec<usize> = (0..corrs.len())
        .filter(|&i| {
            let c = &corrs[i];
            angle_diff(rotation_of(c), rotation).abs() <= ROTATION_TOLERANCE
                && (log_scale_of(c) - log_scale).abs() <= SCALE_TOLERANCE
        })
        .collect();
    let mut support = vec![0usize; corrs.len()];
    let mut pairs = 0;
    for (k, &i) in survivors.iter().enumerate() {
        for &j in &survivors[k + 1..] {
            if pair_consistent(&corrs[i], &corrs[j], rotation, log_scale) == Some(true) {
                pairs += 1;
                support[i] += 1;
                support[j] += 1;
            }
        }
    }
    let inliers: Vec<bool> = support.iter().map(|&s| s >= MIN_SUPPORT).collect();
    PgmScore {
        inlier_count: inliers.iter().filter(|b| **b).count(),
        inliers,
        pairs,
        rotation,
        log_scale,
    }
}

/// A shortlist candidate with its geometric score.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifiedMatch {
    pub candidate: RankedMatch,
    pub pgm: PgmScore,
}

/// Re-orders `candidates` by consistent pair count (descending), then
/// retrieval score (descending), then image id. Candidates without any
/// consistent pair follow in their original order.
pub fn rerank(
    candidates: Vec<RankedMatch>,
    query: &FeatureSet,
    store: &(impl KeypointStore + Sync),
    exec: Exec,
) -> Vec<VerifiedMatch> {
    let scores = exec.map(&candidates, |c| {
        pgm_score(&tentative_correspondences(&c.matches, query, store, &c.image_id))
    });
    let (mut positive, zero): (Vec<VerifiedMatch>, Vec<VerifiedMatch>) = candidates
        .into_iter()
        .zip(scores)
        .map(|(candidate, pgm)| VerifiedMatch { candidate, pgm })
        .partition(|v| v.pgm.pairs > 0);
    positive.sort_by(|a, b| {
        b.pgm
            .pairs
            .cmp(&a.pgm.pairs)
            .then_with(|| b.candidate.score.total_cmp(&a.candidate.score))
            .then_with(|| a.candidate.image_id.cmp(&b.candidate.image_id))
    });
    positive.extend(zero);
    positive
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::PostingRef;
    use crate::synth::planted_correspondences;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn fm(query: u32, keypoint: u32, hamming: u32) -> FeatureMatch {
        FeatureMatch {
            query,
            db: PostingRef { word: 0, keypoint },
            hamming,
        }
    }

    fn kp(x: f32, y: f32) -> Keypoint {
        Keypoint {
            x,
            y,
            scale: 2.0,
            orientation: 1.0,
        }
    }

    #[test]
    fn greedy_keeps_lowest_hamming() {
        let kept = select_one_to_one(&[fm(0, 1, 7), fm(0, 2, 3)]);
        assert_eq!(kept, vec![fm(0, 2, 3)]);
        let disjoint = [fm(0, 0, 5), fm(1, 1, 9), fm(2, 2, 1)];
        assert_eq!(select_one_to_one(&disjoint).len(), 3);
    }

    /// Replays the greedy rule over every permutation-free ordering: the
    /// selection is the lexicographically smallest sequence of the sorted
    /// match list that is one-to-one and maximal.
    fn greedy_oracle(matches: &[FeatureMatch]) -> Vec<FeatureMatch> {
        let mut sorted = matches.to_vec();
        sorted.sort_by_key(|m| (m.hamming, m.query, m.db));
        let n = sorted.len();
        let mut best: Option<Vec<usize>> = None;
        for mask in 0u32..(1 << n) {
            let chosen: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let ok = chosen.iter().enumerate().all(|(a, &i)| {
                chosen[a + 1..]
                    .iter()
                    .all(|&j| sorted[i].query != sorted[j].query && sorted[i].db.keypoint != sorted[j].db.keypoint)
            });
            let maximal = (0..n).filter(|i| !chosen.contains(i)).all(|i| {
                chosen
                    .iter()
                    .any(|&j| sorted[i].query == sorted[j].query || sorted[i].db.keypoint == sorted[j].db.keypoint)
            });
            if ok && maximal && best.as_ref().is_none_or(|b| chosen < *b) {
                best = Some(chosen);
            }
        }
        best.unwrap().into_iter().map(|i| sorted[i]).collect()
    }

    #[test]
    fn greedy_matches_enumeration() {
        let matches = [
            fm(0, 0, 4),
            fm(0, 1, 2),
            fm(1, 1, 2),
            fm(1, 2, 6),
            fm(2, 2, 3),
            fm(2, 0, 3),
            fm(3, 3, 8),
            fm(3, 0, 1),
            fm(4, 3, 5),
        ];
        assert_eq!(select_one_to_one(&matches), greedy_oracle(&matches));
    }

    #[test]
    fn identity_transform_counts_every_pair() {
        let corrs: Vec<Correspondence> = (0..10)
            .map(|i| {
                let k = kp(10.0 * i as f32, 7.0 * (i * i % 5) as f32);
                Correspondence {
                    query: k,
                    db: k,
                    hamming: 0,
                }
            })
            .collect();
        let s = pgm_score(&corrs);
        assert_eq!((s.inlier_count, s.pairs), (10, 45));
        assert!(s.rotation.abs() < 1e-12 && s.log_scale.abs() < 1e-12);
    }

    #[test]
    fn too_few_correspondences() {
        assert_eq!(pgm_score(&[]).pairs, 0);
        let c = Correspondence {
            query: kp(0.0, 0.0),
            db: kp(1.0, 1.0),
            hamming: 0,
        };
        let s = pgm_score(&[c]);
        assert_eq!((s.pairs, s.inlier_count), (0, 0));
    }

    #[test]
    fn planted_transform_is_recovered() {
        let inst = planted_correspondences(3, 12, 5, 30f64.to_radians(), 1.5f64.ln());
        let s = pgm_score(&inst.correspondences);
        for (i, planted) in inst.planted.iter().enumerate() {
            assert_eq!(s.inliers[i], *planted, "correspondence {i}");
        }
        assert!(angle_diff(s.rotation, 30f64.to_radians()).abs() < PI / 16.0);
        assert!((s.log_scale - 1.5f64.ln()).abs() < 0.1);
    }

    struct Store(HashMap<String, Vec<Keypoint>>);

    impl KeypointStore for Store {
        fn keypoint(&self, image_id: &str, kp: u32) -> Option<Keypoint> {
            self.0.get(image_id)?.get(kp as usize).copied()
        }
    }

    fn candidate(id: &str, score: f64, n: u32) -> RankedMatch {
        RankedMatch {
            image_id: id.into(),
            score,
            matches: (0..n).map(|i| fm(i, i, 0)).collect(),
        }
    }

    #[test]
    fn rerank_orders() {
        let layout: Vec<Keypoint> = (0..8).map(|i| kp(13.0 * i as f32, 5.0 * (i % 3) as f32)).collect();
        let query = FeatureSet::new(
            "q",
            layout.clone(),
            vec![crate::features::random_descriptor(&mut rand::rng()); 8],
        )
        .unwrap();
        let scrambled: Vec<Keypoint> = layout
            .iter()
            .rev()
            .enumerate()
            .map(|(i, k)| Keypoint {
                orientation: i as f32,
                ..*k
            })
            .collect();
        let mut store = HashMap::new();
        for id in ["a", "b", "c", "d", "e"] {
            store.insert(id.to_string(), scrambled.clone());
        }
        store.insert("true".to_string(), layout.clone());
        let store = Store(store);

        let mut list: Vec<RankedMatch> = ["a", "b", "c", "d"]
            .iter()
            .enumerate()
            .map(|(i, id)| candidate(id, 10.0 - i as f64, 8))
            .collect();
        list.push(candidate("true", 1.0, 8));
        let out = rerank(list.clone(), &query, &store, Exec::Sequential);
        assert_eq!(out[0].candidate.image_id, "true");
        let rest: Vec<&str> = out[1..].iter().map(|v| v.candidate.image_id.as_str()).collect();
        assert_eq!(rest, ["a", "b", "c", "d"]);

        let unchanged: Vec<RankedMatch> = list[..4].to_vec();
        let out = rerank(unchanged.clone(), &query, &store, Exec::Sequential);
        assert!(out.iter().all(|v| v.pgm.pairs == 0));
        assert_eq!(out.into_iter().map(|v| v.candidate).collect::<Vec<_>>(), unchanged);

        let single = vec![candidate("e", 2.0, 3)];
        assert_eq!(
            rerank(single.clone(), &query, &store, Exec::Parallel)[0].candidate,
            single[0]
        );
    }

    #[test]
    fn rerank_tie_break_on_score_then_id() {
        let layout: Vec<Keypoint> = (0..5).map(|i| kp(9.0 * i as f32, 4.0 * (i % 2) as f32)).collect();
        let query = FeatureSet::new(
            "q",
            layout.clone(),
            vec![crate::features::random_descriptor(&mut rand::rng()); 5],
        )
        .unwrap();
        let store = Store(
            ["x", "y", "z"]
                .iter()
                .map(|id| (id.to_string(), layout.clone()))
                .collect(),
        );
        let list = vec![candidate("z", 1.0, 5), candidate("y", 2.0, 5), candidate("x", 2.0, 5)];
        let ids: Vec<String> = rerank(list, &query, &store, Exec::Sequential)
            .into_iter()
            .map(|v| v.candidate.image_id)
            .collect();
        assert_eq!(ids, ["x", "y", "z"]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn translation_invariant(seed in 0u64..1000, tx in -500f32..500.0, ty in -500f32..500.0) {
            let inst = planted_correspondences(seed, 12, 5, 0.7, 0.3);
            let shifted: Vec<Correspondence> = inst.correspondences.iter().map(|c| Correspondence {
                query: Keypoint { x: c.query.x + tx, y: c.query.y + ty, ..c.query },
                ..*c
            }).collect();
            let a = pgm_score(&inst.correspondences);
            let b = pgm_score(&shifted);
            prop_assert_eq!(a.inliers, b.inliers);
            prop_assert_eq!(a.pairs, b.pairs);
        }

        #[test]
        fn global_rotation_shifts_estimate(seed in 0u64..1000, rho in 0f64..TAU) {
            let inst = planted_correspondences(seed, 12, 0, 0.4, 0.2);
            let (s, c) = rho.sin_cos();
            let rotated: Vec<Correspondence> = inst.correspondences.iter().map(|k| {
                let (x, y) = (k.db.x as f64, k.db.y as f64);
                Correspondence {
                    db: Keypoint {
                        x: (c * x - s * y) as f32,
                        y: (s * x + c * y) as f32,
                        orientation: ((k.db.orientation as f64 + rho).rem_euclid(TAU)) as f32,
                        ..k.db
                    },
                    ..*k
                }
            }).collect();
            let a = pgm_score(&inst.correspondences);
            let b = pgm_score(&rotated);
            prop_assert_eq!(&a.inliers, &b.inliers);
            prop_assert!(angle_diff(b.rotation, a.rotation + rho).abs() < 1e-3);
        }

        #[test]
        fn pair_relation_symmetric(seed in 0u64..1000, rot in 0f64..TAU, ls in -0.7f64..0.7) {
            let inst = planted_correspondences(seed, 6, 6, rot, ls);
            let cs = &inst.correspondences;
            for a in cs {
                for b in cs {
                    prop_assert_eq!(pair_consistent(a, b, rot, ls), pair_consistent(b, a, rot, ls));
                }
            }
        }
    }
}
