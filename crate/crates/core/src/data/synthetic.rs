//! Seeded synthetic classification tasks.
//!
//! Keyword sentiment: the label is the class of the single keyword embedded
//! among neutral distractor words. Reflexive agreement: the label says whether
//! a subject pronoun and a later reflexive pronoun agree.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Example};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distractor {
    Uniform,
    /// Rank-frequency law `p(rank) ∝ rank^(−exponent)`.
    Zipf { exponent: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    /// Number of distinct content words (keywords + distractors, or
    /// pronouns + distractors).
    pub vocab_size: usize,
    pub num_classes: usize,
    pub keywords_per_class: usize,
    /// Sentence length range in words, inclusive.
    pub min_words: usize,
    pub max_words: usize,
    pub distractor: Distractor,
    pub train_size: usize,
    pub dev_size: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            num_classes: 2,
            keywords_per_class: 5,
            min_words: 4,
            max_words: 10,
            distractor: Distractor::Uniform,
            train_size: 2000,
            dev_size: 500,
            seed: 0,
        }
    }
}

/// Subject pronoun and its agreeing reflexive.
pub const REFLEXIVE_PAIRS: [(&str, &str); 6] = [
    ("i", "myself"),
    ("you", "yourself"),
    ("he", "himself"),
    ("she", "herself"),
    ("we", "ourselves"),
    ("they", "themselves"),
];

impl TaskSpec {
    fn validate(&self, reserved_words: usize) -> Result<()> {
        if self.train_size == 0 || self.dev_size == 0 || self.num_classes < 2 {
            return Err(Error::Data("task needs ≥ 2 classes and non-empty splits".into()));
        }
        if self.min_words < 2 || self.min_words > self.max_words {
            return Err(Error::Data(format!(
                "sentence length range [{}, {}] needs 2 ≤ min ≤ max",
                self.min_words, self.max_words
            )));
        }
        if self.vocab_size <= reserved_words {
            return Err(Error::Data(format!(
                "vocab_size {} leaves no distractors after {reserved_words} task words",
                self.vocab_size
            )));
        }
        if let Distractor::Zipf { exponent } = self.distractor {
            if !(exponent.is_finite() && exponent >= 0.0) {
                return Err(Error::Data(format!("zipf exponent {exponent} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }

    /// Keyword strings of class `c`.
    pub fn keywords(&self, class: usize) -> Vec<String> {
        (0..self.keywords_per_class).map(|j| format!("c{class}kw{j}")).collect()
    }

    pub fn all_keywords(&self) -> Vec<String> {
        (0..self.num_classes).flat_map(|c| self.keywords(c)).collect()
    }

    fn distractors(&self, reserved_words: usize) -> Vec<String> {
        (0..self.vocab_size - reserved_words).map(|i| format!("w{i:03}")).collect()
    }
}

struct DistractorSampler {
    words: Vec<String>,
    cumulative: Option<Vec<f64>>,
}

impl DistractorSampler {
    fn new(words: Vec<String>, dist: Distractor) -> Self {
        let cumulative = match dist {
            Distractor::Uniform => None,
            Distractor::Zipf { exponent } => {
                let mut acc = 0.0;
                let mut c: Vec<f64> = (1..=words.len())
                    .map(|r| {
                        acc += (r as f64).powf(-exponent);
                        acc
                    })
                    .collect();
                let total = acc;
                c.iter_mut().for_each(|x| *x /= total);
                Some(c)
            }
        };
        Self { words, cumulative }
    }

    fn sample(&self, rng: &mut impl Rng) -> &str {
        let idx = match &self.cumulative {
            None => rng.gen_range(0..self.words.len()),
            Some(c) => {
                let u: f64 = rng.gen();
                c.partition_point(|&x| x < u).min(self.words.len() - 1)
            }
        };
        &self.words[idx]
    }
}

/// Balanced label sequence of length `n`, shuffled.
fn balanced_labels(n: usize, classes: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

fn label_names(classes: usize) -> Vec<String> {
    (0..classes).map(|c| c.to_string()).collect()
}

pub fn generate_keyword_sentiment(spec: &TaskSpec) -> Result<(Dataset, Dataset)> {
    let reserved = spec.num_classes * spec.keywords_per_class;
    if spec.keywords_per_class == 0 {
        return Err(Error::Data("keywords_per_class must be positive".into()));
    }
    spec.validate(reserved)?;
    let keywords: Vec<Vec<String>> = (0..spec.num_classes).map(|c| spec.keywords(c)).collect();
    let sampler = DistractorSampler::new(spec.distractors(reserved), spec.distractor);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let split = |n: usize, rng: &mut ChaCha8Rng| {
        let labels = balanced_labels(n, spec.num_classes, rng);
        let examples = labels
            .into_iter()
            .map(|label| {
                let len = rng.gen_range(spec.min_words..=spec.max_words);
                let slot = rng.gen_range(0..len);
                let words: Vec<&str> = (0..len)
                    .map(|i| {
                        if i == slot {
                            keywords[label][rng.gen_range(0..spec.keywords_per_class)].as_str()
                        } else {
                            sampler.sample(rng)
                        }
                    })
                    .collect();
                Example {
                    text: words.join(" "),
                    label,
                }
            })
            .collect();
        Dataset {
            examples,
            label_names: label_names(spec.num_classes),
        }
    };
    let train = split(spec.train_size, &mut rng);
    let dev = split(spec.dev_size, &mut rng);
    Ok((train, dev))
}

/// Binary task: label 1 iff the reflexive agrees with the subject pronoun.
/// `num_classes` and `keywords_per_class` of the spec are ignored.
pub fn generate_reflexive_agreement(spec: &TaskSpec) -> Result<(Dataset, Dataset)> {
    let reserved = REFLEXIVE_PAIRS.len() * 2;
    let spec = TaskSpec {
        num_classes: 2,
        ..spec.clone()
    };
    spec.validate(reserved)?;
    let sampler = DistractorSampler::new(spec.distractors(reserved), spec.distractor);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let split = |n: usize, rng: &mut ChaCha8Rng| {
        let labels = balanced_labels(n, 2, rng);
        let examples = labels
            .into_iter()
            .map(|label| {
                let len = rng.gen_range(spec.min_words..=spec.max_words);
                let subject_pos = rng.gen_range(0..len - 1);
                let reflexive_pos = rng.gen_range(subject_pos + 1..len);
                let pair = rng.gen_range(0..REFLEXIVE_PAIRS.len());
                let reflexive = if label == 1 {
                    pair
                } else {
                    (pair + rng.gen_range(1..REFLEXIVE_PAIRS.len())) % REFLEXIVE_PAIRS.len()
                };
                let words: Vec<&str> = (0..len)
                    .map(|i| {
                        if i == subject_pos {
                            REFLEXIVE_PAIRS[pair].0
                        } else if i == reflexive_pos {
                            REFLEXIVE_PAIRS[reflexive].1
                        } else {
                            sampler.sample(rng)
                        }
                    })
                    .collect();
                Example {
                    text: words.join(" "),
                    label,
                }
            })
            .collect();
        Dataset {
            examples,
            label_names: label_names(2),
        }
    };
    let train = split(spec.train_size, &mut rng);
    let dev = split(spec.dev_size, &mut rng);
    Ok((train, dev))
}
