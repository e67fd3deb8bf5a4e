//! Synthetic domain-shift corpora for benchmarking.
//!
//! The generic domain is a sparse first-order Markov chain over "common"
//! words. The target domain interleaves short generic segments with noisy
//! instances of recurring phrase templates built mostly from "domain" words,
//! which the generic domain never uses. A language model fitted on the
//! generic domain therefore knows little about the templates, while a
//! datastore built from target-domain text can recall them.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyParams {
    pub seed: u64,
    pub common_words: usize,
    pub domain_words: usize,
    pub templates: usize,
    /// Successors per common word in the Markov chain.
    pub branching: usize,
    /// Probability of leaving the chain for a unigram draw.
    pub jump: f64,
    /// Probability of replacing a template token by a random domain word.
    pub noise: f64,
    pub generic_tokens: usize,
    pub datastore_tokens: usize,
    pub valid_tokens: usize,
    pub test_tokens: usize,
    pub doc_tokens: usize,
}

impl Default for ToyParams {
    fn default() -> Self {
        Self {
            seed: 0,
            common_words: 400,
            domain_words: 800,
            templates: 300,
            branching: 6,
            jump: 0.15,
            noise: 0.05,
            generic_tokens: 100_000,
            datastore_tokens: 80_000,
            valid_tokens: 10_000,
            test_tokens: 10_000,
            doc_tokens: 120,
        }
    }
}

impl ToyParams {
    /// Every split scaled by `factor`.
    pub fn scaled(mut self, factor: f64) -> Self {
        let s = |n: usize| ((n as f64 * factor).round() as usize).max(1);
        self.generic_tokens = s(self.generic_tokens);
        self.datastore_tokens = s(self.datastore_tokens);
        self.valid_tokens = s(self.valid_tokens);
        self.test_tokens = s(self.test_tokens);
        self
    }
}

/// Generated text, one document per line.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpora {
    /// Generic domain, for fitting the language model.
    pub generic: String,
    /// Target domain, for building the datastore.
    pub datastore: String,
    pub valid: String,
    pub test: String,
}

impl ToyCorpora {
    pub fn splits(&self) -> [(&'static str, &str); 4] {
        [
            ("generic", &self.generic),
            ("datastore", &self.datastore),
            ("valid", &self.valid),
            ("test", &self.test),
        ]
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Pronounceable word number `i` with `syllables` syllables.
fn word(mut i: usize, syllables: usize) -> String {
    let base = CONSONANTS.len() * VOWELS.len();
    let mut s = String::new();
    for _ in 0..syllables {
        let syl = i % base;
        i /= base;
        s.push(CONSONANTS[syl / VOWELS.len()] as char);
        s.push(VOWELS[syl % VOWELS.len()] as char);
    }
    s
}

fn zipf(n: usize) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|r| 1.0 / r as f64)).unwrap()
}

struct Generator {
    common: Vec<String>,
    domain: Vec<String>,
    successors: Vec<Vec<usize>>,
    successor_dist: WeightedIndex<f64>,
    unigram: WeightedIndex<f64>,
    templates: Vec<Vec<String>>,
    template_dist: WeightedIndex<f64>,
    params: ToyParams,
}

impl Generator {
    fn new(params: &ToyParams, rng: &mut ChaCha8Rng) -> Self {
        let common: Vec<String> = (0..params.common_words).map(|i| word(i, 2)).collect();
        let domain: Vec<String> = (0..params.domain_words).map(|i| word(i, 3)).collect();
        let successors = (0..params.common_words)
            .map(|_| (0..params.branching).map(|_| rng.random_range(0..params.common_words)).collect())
            .collect();
        let domain_dist = zipf(params.domain_words);
        let templates = (0..params.templates)
            .map(|_| {
                let len = rng.random_range(6..=12);
                (0..len)
                    .map(|_| {
                        if rng.random::<f64>() < 0.8 {
                            domain[domain_dist.sample(rng)].clone()
                        } else {
                            common[rng.random_range(0..params.common_words)].clone()
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            successor_dist: zipf(params.branching),
            unigram: zipf(params.common_words),
            template_dist: zipf(params.templates),
            common,
            domain,
            successors,
            templates,
            params: params.clone(),
        }
    }

    fn generic_run(&self, rng: &mut ChaCha8Rng, len: usize, out: &mut Vec<String>) {
        let mut cur = self.unigram.sample(rng);
        for _ in 0..len {
            out.push(self.common[cur].clone());
            cur = if rng.random::<f64>() < self.params.jump {
                self.unigram.sample(rng)
            } else {
                self.successors[cur][self.successor_dist.sample(rng)]
            };
        }
    }

    fn template(&self, rng: &mut ChaCha8Rng, out: &mut Vec<String>) {
        let t = &self.templates[self.template_dist.sample(rng)];
        for w in t {
            if rng.random::<f64>() < self.params.noise {
                out.push(self.domain[rng.random_range(0..self.domain.len())].clone());
            } else {
                out.push(w.clone());
            }
        }
    }

    fn split(&self, rng: &mut ChaCha8Rng, tokens: usize, target_domain: bool) -> String {
        let mut lines = Vec::new();
        let mut total = 0;
        while total < tokens {
            let want = self.params.doc_tokens.min(tokens - total).max(1);
            let mut doc = Vec::with_capacity(want + 12);
            while doc.len() < want {
                if target_domain {
                    let len = rng.random_range(4..=12);
                    self.generic_run(rng, len, &mut doc);
                    self.template(rng, &mut doc);
                } else {
                    self.generic_run(rng, want - doc.len(), &mut doc);
                }
            }
            doc.truncate(want);
            total += doc.len();
            lines.push(doc.join(" "));
        }
        lines.join("\n") + "\n"
    }
}

/// Generate all four splits deterministically from `params.seed`.
pub fn generate(params: &ToyParams) -> ToyCorpora {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let g = Generator::new(params, &mut rng);
    let split_rng = |k: u64| ChaCha8Rng::seed_from_u64(params.seed.wrapping_mul(31).wrapping_add(k));
    ToyCorpora {
        generic: g.split(&mut split_rng(1), params.generic_tokens, false),
        datastore: g.split(&mut split_rng(2), params.datastore_tokens, true),
        valid: g.split(&mut split_rng(3), params.valid_tokens, true),
        test: g.split(&mut split_rng(4), params.test_tokens, true),
    }
}
