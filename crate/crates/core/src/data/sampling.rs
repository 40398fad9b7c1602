use rand::seq::index;
use rand::Rng;

use super::Impression;

/// One clicked candidate contrasted with `F` non-clicked candidates from
/// the same impression.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingInstance {
    /// Index of the source impression.
    pub impression: usize,
    /// Clicked news indices, oldest first (untruncated).
    pub history: Vec<usize>,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

impl TrainingInstance {
    /// Positive first, then negatives.
    pub fn candidates(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.positive).chain(self.negatives.iter().copied())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampledInstances {
    pub instances: Vec<TrainingInstance>,
    /// Impressions with clicks but no non-clicked candidate.
    pub skipped_impressions: usize,
}

/// One instance per clicked candidate. Negatives are drawn without
/// replacement when the impression has at least `f` non-clicks, with
/// replacement otherwise; impressions with no non-clicks are skipped.
pub fn sample_instances<R: Rng + ?Sized>(impressions: &[Impression], f: usize, rng: &mut R) -> SampledInstances {
    assert!(f >= 1, "need at least one negative per instance");
    let mut out = SampledInstances::default();
    for (idx, imp) in impressions.iter().enumerate() {
        let negs: Vec<usize> = imp.non_clicks().collect();
        let clicks: Vec<usize> = imp.clicks().collect();
        if clicks.is_empty() {
            continue;
        }
        if negs.is_empty() {
            out.skipped_impressions += 1;
            continue;
        }
        for positive in clicks {
            let negatives = if negs.len() >= f {
                index::sample(rng, negs.len(), f).iter().map(|i| negs[i]).collect()
            } else {
                (0..f).map(|_| negs[rng.gen_range(0..negs.len())]).collect()
            };
            out.instances.push(TrainingInstance {
                impression: idx,
                history: imp.history.clone(),
                positive,
                negatives,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn imp(clicks: &[usize], non: &[usize]) -> Impression {
        Impression {
            id: "1".into(),
            user: "U".into(),
            time: String::new(),
            history: vec![100],
            candidates: clicks
                .iter()
                .map(|&c| (c, true))
                .chain(non.iter().map(|&c| (c, false)))
                .collect(),
        }
    }

    #[test]
    fn distinct_negatives_when_enough() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_instances(&[imp(&[0], &[1, 2, 3, 4, 5, 6])], 4, &mut rng);
        assert_eq!(s.instances.len(), 1);
        let mut negs = s.instances[0].negatives.clone();
        negs.sort();
        negs.dedup();
        assert_eq!(negs.len(), 4);
        assert!(negs.iter().all(|n| (1..=6).contains(n)));
    }

    #[test]
    fn replacement_when_short() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sample_instances(&[imp(&[0], &[1, 2])], 4, &mut rng);
        let negs = &s.instances[0].negatives;
        assert_eq!(negs.len(), 4);
        assert!(negs.iter().all(|n| [1, 2].contains(n)));
    }

    #[test]
    fn counts_and_skips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let imps = [imp(&[0, 1], &[2]), imp(&[3], &[]), imp(&[], &[4, 5]), imp(&[6, 7, 8], &[9, 10])];
        let s = sample_instances(&imps, 4, &mut rng);
        let total_clicks = 2 + 1 + 3;
        assert_eq!(s.skipped_impressions, 1);
        assert_eq!(s.instances.len(), total_clicks - 1);
    }

    #[test]
    fn same_seed_same_stream() {
        let imps = [imp(&[0, 1], &[2, 3, 4, 5, 6, 7, 8])];
        let a = sample_instances(&imps, 4, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_instances(&imps, 4, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }
}
