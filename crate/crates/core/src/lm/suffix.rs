use std::collections::{HashMap, HashSet};

use super::{recent, ContextPolicy, Corpus, TokenId};

/// Suffix lengths tracked by [`SuffixTables`].
pub const SUFFIX_ORDERS: usize = 4;

/// Occurrence statistics of one context suffix in the training data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SuffixStat {
    /// Number of positions whose preceding tokens end with the suffix.
    pub count: u32,
    /// Number of distinct tokens observed right after the suffix.
    pub fertility: u32,
}

fn pack(context: &[TokenId], n: usize) -> u128 {
    let mut key = 0u128;
    for j in 1..=n {
        key |= (recent(context, j).0 as u128) << (32 * (j - 1));
    }
    key
}

/// Frequency and fertility of every 1..=4 token context suffix.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SuffixTables {
    tables: [HashMap<u128, SuffixStat>; SUFFIX_ORDERS],
}

impl SuffixTables {
    pub fn build(corpus: &Corpus, policy: ContextPolicy) -> Self {
        let mut seen: [HashSet<(u128, u32)>; SUFFIX_ORDERS] = Default::default();
        let mut tables: [HashMap<u128, SuffixStat>; SUFFIX_ORDERS] = Default::default();
        corpus.for_each_position(policy, |ctx, w| {
            for n in 1..=SUFFIX_ORDERS {
                let key = pack(ctx, n);
                let stat = tables[n - 1].entry(key).or_default();
                stat.count += 1;
                if seen[n - 1].insert((key, w.0)) {
                    stat.fertility += 1;
                }
            }
        });
        Self { tables }
    }

    /// Statistics of the last `n` tokens of `context`; zero when unseen.
    pub fn lookup(&self, context: &[TokenId], n: usize) -> SuffixStat {
        assert!((1..=SUFFIX_ORDERS).contains(&n));
        self.tables[n - 1]
            .get(&pack(context, n))
            .copied()
            .unwrap_or_default()
    }

    /// `(ln(freq + 1), ln(fert + 1))` for n = 1..=4.
    pub fn log_features(&self, context: &[TokenId]) -> ([f64; 4], [f64; 4]) {
        let mut freq = [0.0; 4];
        let mut fert = [0.0; 4];
        for n in 1..=SUFFIX_ORDERS {
            let s = self.lookup(context, n);
            freq[n - 1] = (s.count as f64 + 1.0).ln();
            fert[n - 1] = (s.fertility as f64 + 1.0).ln();
        }
        (freq, fert)
    }

    pub fn len(&self, n: usize) -> usize {
        self.tables[n - 1].len()
    }

    pub fn iter(&self, n: usize) -> impl Iterator<Item = SuffixStat> + '_ {
        self.tables[n - 1].values().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::Vocabulary;

    #[test]
    fn abab_hand_count() {
        let vocab = Vocabulary::from_texts(["a b a b"]);
        let corpus = Corpus::from_text("a b a b", &vocab);
        let t = SuffixTables::build(&corpus, ContextPolicy::PerDocument);
        let a = vocab.get("a").unwrap();
        let s = t.lookup(&[a], 1);
        assert_eq!(s.count, 2);
        assert_eq!(s.fertility, 1);
        let unseen = t.lookup(&[vocab.unk()], 1);
        assert_eq!(unseen, SuffixStat::default());
        let (f, g) = t.log_features(&[vocab.unk()]);
        assert_eq!(f, [0.0; 4]);
        assert_eq!(g, [0.0; 4]);
    }

    #[test]
    fn fertility_bounded_by_frequency() {
        let text = "x y z x y y z x\nz z y x";
        let vocab = Vocabulary::from_texts([text]);
        let corpus = Corpus::from_text(text, &vocab);
        let t = SuffixTables::build(&corpus, ContextPolicy::PerDocument);
        for n in 1..=4 {
            for s in t.iter(n) {
                assert!(s.fertility >= 1 && s.fertility <= s.count);
            }
        }
    }
}
