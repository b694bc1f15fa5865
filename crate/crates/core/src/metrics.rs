//! AUC and position-wise AUC.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::features::Traffic;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredImpression {
    pub score: f64,
    pub label: u8,
    pub position: u32,
    pub traffic: Traffic,
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::usage(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::numeric(format!("non-finite score {s}")));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::usage("labels must be 0 or 1"));
    }
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({pos} positives, {neg} negatives)"
        )));
    }
    Ok((pos, neg))
}

/// Rank-sum AUC with tied scores sharing their average rank.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of 1-based ranks of positives, doubled to stay integral under ties
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u128;
        let positives = order[i..=j].iter().filter(|&&o| labels[o] == 1).count() as u128;
        twice_rank_sum += twice_avg * positives;
        i = j + 1;
    }
    let p = pos as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Explicit pair counting; quadratic, used to verify [`auc`].
pub fn auc_oracle(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut twice: u64 = 0;
    for (i, &yi) in labels.iter().enumerate() {
        if yi != 1 {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj != 0 {
                continue;
            }
            if scores[i] > scores[j] {
                twice += 2;
            } else if scores[i] == scores[j] {
                twice += 1;
            }
        }
    }
    Ok(twice as f64 / (2.0 * pos as f64 * neg as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionAuc {
    pub position: u32,
    pub impressions: usize,
    /// `None` when the position lacks one of the classes.
    pub auc: Option<f64>,
}

impl PositionAuc {
    pub fn included(&self) -> bool {
        self.auc.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PaucReport {
    pub pauc: f64,
    /// Pooled AUC over all impressions, if defined.
    pub auc: Option<f64>,
    pub positions: Vec<PositionAuc>,
}

impl PaucReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("k\tn\tauc_k\tincluded\n");
        for p in &self.positions {
            let auc = p.auc.map_or("NA".to_string(), |a| format!("{a:.6}"));
            let _ = writeln!(out, "{}\t{}\t{}\t{}", p.position, p.impressions, auc, u8::from(p.included()));
        }
        let auc = self.auc.map_or("NA".to_string(), |a| format!("{a:.6}"));
        let _ = writeln!(out, "# pauc={:.6} auc={} impressions={}", self.pauc, auc, self.impressions());
        out
    }

    pub fn impressions(&self) -> usize {
        self.positions.iter().map(|p| p.impressions).sum()
    }
}

/// Impression-weighted mean of per-position AUC. Positions with a single
/// class drop out of both the numerator and the denominator.
pub fn pauc(rows: &[ScoredImpression]) -> Result<PaucReport> {
    if rows.is_empty() {
        return Err(Error::UndefinedMetric("PAUC of an empty set".into()));
    }
    let mut groups: BTreeMap<u32, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for r in rows {
        let g = groups.entry(r.position).or_default();
        g.0.push(r.score);
        g.1.push(r.label);
    }
    let mut positions = Vec::with_capacity(groups.len());
    let (mut num, mut den) = (0.0, 0usize);
    for (k, (scores, labels)) in &groups {
        let auc_k = match auc(scores, labels) {
            Ok(a) => Some(a),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        if let Some(a) = auc_k {
            num += scores.len() as f64 * a;
            den += scores.len();
        }
        positions.push(PositionAuc { position: *k, impressions: scores.len(), auc: auc_k });
    }
    if den == 0 {
        return Err(Error::UndefinedMetric("no position has both clicks and non-clicks".into()));
    }
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    let overall = auc(&scores, &labels).ok();
    Ok(PaucReport { pauc: num / den as f64, auc: overall, positions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn imp(score: f64, label: u8, position: u32) -> ScoredImpression {
        ScoredImpression { score, label, position, traffic: Traffic::Regular }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.9], &[1, 0]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        assert_eq!(auc_oracle(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.2, 0.4], &[1, 1]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(auc(&[f64::NAN, 0.4], &[1, 0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn pauc_examples() {
        // position 1: 3 of 4 pairs concordant; position 2: perfect
        let rows = [
            imp(0.8, 1, 1),
            imp(0.6, 0, 1),
            imp(0.4, 1, 1),
            imp(0.2, 0, 1),
            imp(0.7, 1, 2),
            imp(0.3, 0, 2),
        ];
        let r = pauc(&rows).unwrap();
        assert_eq!(r.positions[0].auc, Some(0.75));
        assert!((r.pauc - 5.0 / 6.0).abs() < 1e-12);

        let single = pauc(&rows[..4]).unwrap();
        assert_eq!(single.pauc, 0.75);

        let mut with_dead = rows.to_vec();
        with_dead.extend([imp(0.9, 0, 3), imp(0.1, 0, 3)]);
        let r2 = pauc(&with_dead).unwrap();
        assert_eq!(r2.pauc, r.pauc);
        assert!(!r2.positions[2].included());
        assert!(r2.to_tsv().starts_with("k\tn\tauc_k\tincluded\n1\t4\t0.750000\t1\n"));

        assert!(matches!(pauc(&[imp(0.1, 0, 1)]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(pauc(&[]), Err(Error::UndefinedMetric(_))));
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..500).prop_flat_map(|n| {
            (
                // coarse grid so ties are common
                prop::collection::vec((0u32..40).prop_map(|v| v as f64 / 40.0), n),
                prop::collection::vec(0u8..2, n),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn fast_auc_matches_pair_counting((scores, mut labels) in instance()) {
            labels[0] = 1;
            labels[1] = 0;
            let fast = auc(&scores, &labels).unwrap();
            let slow = auc_oracle(&scores, &labels).unwrap();
            prop_assert!((fast - slow).abs() < 1e-12);
            let logits: Vec<f64> = scores.iter().map(|s| (s + 0.01).ln() * 3.0 - 1.0).collect();
            prop_assert!((auc(&logits, &labels).unwrap() - fast).abs() < 1e-12);
        }

        #[test]
        fn pauc_ignores_per_position_shifts(
            rows in prop::collection::vec((0.0f64..1.0, 0u8..2, 1u32..5), 8..200),
            shifts in prop::collection::vec(-5.0f64..5.0, 4),
        ) {
            let a: Vec<ScoredImpression> = rows.iter().map(|&(s, y, k)| imp(s, y, k)).collect();
            let b: Vec<ScoredImpression> =
                rows.iter().map(|&(s, y, k)| imp(s + shifts[k as usize - 1], y, k)).collect();
            match (pauc(&a), pauc(&b)) {
                (Ok(ra), Ok(rb)) => {
                    for (pa, pb) in ra.positions.iter().zip(&rb.positions) {
                        prop_assert_eq!(pa.auc.is_some(), pb.auc.is_some());
                        if let (Some(x), Some(y)) = (pa.auc, pb.auc) {
                            prop_assert!((x - y).abs() < 1e-12);
                        }
                    }
                    prop_assert!((ra.pauc - rb.pauc).abs() < 1e-12);
                    let weighted: f64 = ra.positions.iter().filter_map(|p| p.auc.map(|a| a * p.impressions as f64)).sum();
                    let n: usize = ra.positions.iter().filter(|p| p.included()).map(|p| p.impressions).sum();
                    prop_assert!((ra.pauc - weighted / n as f64).abs() < 1e-12);
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "shift changed definedness"),
            }
        }
    }
}
