//! Synthetic QA corpus generator.
//!
//! Each example states one fact ("<subject> <relation> <object>."), asks
//! for the object, and plants the fact sentence in 1-3 of K passages. The
//! remaining sentences are distractors: same subject with a different
//! relation, a different subject with the same relation, or plain filler.
//! Word pools use disjoint syllable alphabets (subjects / objects /
//! fillers), and every non-planted sentence is checked to not contain the
//! answer, so the crucial-sentence annotation recovers exactly the planted
//! sentences.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::normalize;
use crate::data::{Passage, QAExample, Vocabulary};
use crate::error::Result;

const SUBJECT_SYLLABLES: [&str; 12] = [
    "bar", "dek", "fin", "gol", "hax", "jor", "kel", "lum", "mor", "nim", "pag", "rev",
];
const OBJECT_SYLLABLES: [&str; 12] = [
    "ast", "brel", "cind", "dorv", "elph", "frus", "glim", "hent", "ixl", "jamb", "krop", "lurn",
];
const FILLER_SYLLABLES: [&str; 12] = [
    "ca", "do", "fe", "gi", "hu", "jo", "ki", "lo", "mu", "ne", "po", "qua",
];
const RELATIONS: [&str; 12] = [
    "orbits", "contains", "follows", "predates", "mirrors", "guards", "feeds", "borders",
    "signals", "echoes", "binds", "carries",
];

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_examples: usize,
    pub k_passages: usize,
    /// Probability that a distractor sentence is confusable (shares the
    /// subject or the relation with the planted fact) instead of filler.
    pub difficulty: f64,
    pub sentences_per_passage: (usize, usize),
    pub filler_words_per_sentence: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_examples: 2000,
            k_passages: 10,
            difficulty: 0.5,
            sentences_per_passage: (3, 4),
            filler_words_per_sentence: (3, 6),
        }
    }
}

/// Generated examples plus, per example, the planted (passage, sentence)
/// locations — the oracle for annotation-recovery tests.
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub examples: Vec<QAExample>,
    pub plants: Vec<Vec<(usize, usize)>>,
}

fn two_syllable_pool(syllables: &[&str]) -> Vec<String> {
    let mut out = Vec::new();
    for a in syllables {
        for b in syllables {
            out.push(format!("{a}{b}"));
        }
    }
    out
}

struct Pools {
    subjects: Vec<String>,
    objects: Vec<String>,
    fillers: Vec<String>,
}

fn pools() -> Pools {
    let subjects = two_syllable_pool(&SUBJECT_SYLLABLES)[..110].to_vec();
    let objects = two_syllable_pool(&OBJECT_SYLLABLES)[..130].to_vec();
    let mut fillers: Vec<String> = FILLER_SYLLABLES.iter().map(|s| s.to_string()).collect();
    fillers.extend(two_syllable_pool(&FILLER_SYLLABLES));
    fillers.truncate(140);
    Pools {
        subjects,
        objects,
        fillers,
    }
}

fn filler_sentence(rng: &mut ChaCha8Rng, pools: &Pools, cfg: &SynthConfig) -> String {
    let (lo, hi) = cfg.filler_words_per_sentence;
    let n = rng.gen_range(lo..=hi);
    let words: Vec<&str> = (0..n)
        .map(|_| pools.fillers.choose(rng).unwrap().as_str())
        .collect();
    format!("{}.", words.join(" "))
}

/// Generate a deterministic synthetic dataset. Same seed and config give
/// byte-identical examples.
pub fn synth_generate(seed: u64, cfg: &SynthConfig) -> Result<GeneratedDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pools = pools();
    let mut examples = Vec::with_capacity(cfg.n_examples);
    let mut plants = Vec::with_capacity(cfg.n_examples);
    for _ in 0..cfg.n_examples {
        let (ex, plant) = gen_example(&mut rng, &pools, cfg);
        examples.push(ex);
        plants.push(plant);
    }
    Ok(GeneratedDataset { examples, plants })
}

fn gen_example(rng: &mut ChaCha8Rng, pools: &Pools, cfg: &SynthConfig) -> (QAExample, Vec<(usize, usize)>) {
    let k = cfg.k_passages.max(1);
    let subject = pools.subjects.choose(rng).unwrap().clone();
    let relation = RELATIONS[rng.gen_range(0..RELATIONS.len())];
    let answer_words = if rng.gen_bool(0.5) { 1 } else { 2 };
    let mut obj_words = Vec::with_capacity(answer_words);
    while obj_words.len() < answer_words {
        let w = pools.objects.choose(rng).unwrap().clone();
        if !obj_words.contains(&w) {
            obj_words.push(w);
        }
    }
    let answer = obj_words.join(" ");
    let norm_answer = normalize(&answer);
    let question = format!("what does {subject} {relation}");
    let fact = format!("{subject} {relation} {answer}.");

    let n_plants = rng.gen_range(1..=3.min(k));
    let mut passage_ids: Vec<usize> = (0..k).collect();
    passage_ids.shuffle(rng);
    let planted_in: Vec<usize> = passage_ids[..n_plants].to_vec();

    let mut passages = Vec::with_capacity(k);
    let mut plant_locs = Vec::new();
    for p in 0..k {
        let (lo, hi) = cfg.sentences_per_passage;
        let n_sent = rng.gen_range(lo..=hi);
        let plant_at = if planted_in.contains(&p) {
            Some(rng.gen_range(0..n_sent))
        } else {
            None
        };
        let mut sentences = Vec::with_capacity(n_sent);
        for s in 0..n_sent {
            if plant_at == Some(s) {
                plant_locs.push((p, s));
                sentences.push(fact.clone());
                continue;
            }
            sentences.push(distractor(rng, pools, cfg, &subject, relation, &norm_answer));
        }
        let title = loop {
            let t = format!(
                "{} {}",
                pools.fillers.choose(rng).unwrap(),
                pools.fillers.choose(rng).unwrap()
            );
            if !normalize(&t).contains(&norm_answer) {
                break t;
            }
        };
        passages.push(Passage {
            title,
            text: sentences.join(" "),
        });
    }
    let ex = QAExample {
        question,
        answers: vec![answer],
        passages,
        long_answer: Some(fact.trim_end_matches('.').trim().to_string()),
    };
    (ex, plant_locs)
}

/// A distractor sentence guaranteed (by check-and-resample) to not contain
/// the answer. Confusable forms share the subject or the relation.
fn distractor(
    rng: &mut ChaCha8Rng,
    pools: &Pools,
    cfg: &SynthConfig,
    subject: &str,
    relation: &str,
    norm_answer: &str,
) -> String {
    for _ in 0..20 {
        let candidate = if rng.gen_bool(cfg.difficulty.clamp(0.0, 1.0)) {
            let other_obj = pools.objects.choose(rng).unwrap();
            if rng.gen_bool(0.5) {
                // same subject, different relation
                let mut rel = RELATIONS[rng.gen_range(0..RELATIONS.len())];
                while rel == relation {
                    rel = RELATIONS[rng.gen_range(0..RELATIONS.len())];
                }
                format!("{subject} {rel} {other_obj}.")
            } else {
                // different subject, same relation
                let mut subj = pools.subjects.choose(rng).unwrap();
                while subj.as_str() == subject {
                    subj = pools.subjects.choose(rng).unwrap();
                }
                format!("{subj} {relation} {other_obj}.")
            }
        } else {
            filler_sentence(rng, pools, cfg)
        };
        if !normalize(&candidate).contains(norm_answer) {
            return candidate;
        }
    }
    // filler words cannot collide with answer words
    filler_sentence(rng, pools, cfg)
}

/// Vocabulary over everything the generator can emit.
pub fn build_vocab(examples: &[QAExample], max_size: usize) -> Result<Vocabulary> {
    let mut texts: Vec<String> = Vec::new();
    for ex in examples {
        texts.push(ex.question.clone());
        for a in &ex.answers {
            texts.push(a.clone());
        }
        for p in &ex.passages {
            texts.push(p.title.clone());
            texts.push(p.text.clone());
        }
    }
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    Vocabulary::build(&refs, max_size)
}

impl GeneratedDataset {
    pub fn build_vocab(&self, max_size: usize) -> Result<Vocabulary> {
        build_vocab(&self.examples, max_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{annotate_crucial_sentences, format_input, sentence_split};

    #[test]
    fn generation_is_seed_deterministic() {
        let cfg = SynthConfig {
            n_examples: 20,
            ..Default::default()
        };
        let a = synth_generate(7, &cfg).unwrap();
        let b = synth_generate(7, &cfg).unwrap();
        let bytes_a = serde_json::to_vec(&a.examples).unwrap();
        let bytes_b = serde_json::to_vec(&b.examples).unwrap();
        assert_eq!(bytes_a, bytes_b);
        let c = synth_generate(8, &cfg).unwrap();
        assert_ne!(bytes_a, serde_json::to_vec(&c.examples).unwrap());
    }

    #[test]
    fn annotation_recovers_exactly_the_planted_sentences() {
        let cfg = SynthConfig {
            n_examples: 30,
            k_passages: 6,
            difficulty: 0.8,
            ..Default::default()
        };
        let gen = synth_generate(3, &cfg).unwrap();
        let vocab = gen.build_vocab(512).unwrap();
        for (ex, plants) in gen.examples.iter().zip(&gen.plants) {
            let inputs: Vec<_> = ex
                .passages
                .iter()
                .map(|p| format_input(&vocab, &ex.question, &p.title, &p.text, 64).unwrap())
                .collect();
            let gold = annotate_crucial_sentences(ex, &inputs, &vocab);
            // map plant (passage, sentence index) to token spans
            let mut want: Vec<(usize, (usize, usize))> = Vec::new();
            for &(p, s) in plants {
                want.push((p, inputs[p].sentences[s]));
            }
            let mut got: Vec<(usize, (usize, usize))> = Vec::new();
            for (p, spans) in gold.spans.iter().enumerate() {
                for &sp in spans {
                    got.push((p, sp));
                }
            }
            want.sort();
            got.sort();
            assert_eq!(want, got, "question {:?}", ex.question);
        }
    }

    #[test]
    fn supports_k_100() {
        let cfg = SynthConfig {
            n_examples: 2,
            k_passages: 100,
            ..Default::default()
        };
        let gen = synth_generate(0, &cfg).unwrap();
        assert!(gen.examples.iter().all(|e| e.passages.len() == 100));
    }

    #[test]
    fn vocab_fits_default_budget() {
        let cfg = SynthConfig {
            n_examples: 300,
            ..Default::default()
        };
        let gen = synth_generate(0, &cfg).unwrap();
        let vocab = gen.build_vocab(512).unwrap();
        assert!(vocab.len() <= 512, "vocab size {}", vocab.len());
        // and nothing in the corpus tokenizes through <unk>
        for ex in &gen.examples {
            for p in &ex.passages {
                assert!(!vocab.tokenize(&p.text).contains(&crate::data::UNK_ID));
            }
        }
    }

    #[test]
    fn passages_fit_default_input_budget() {
        let cfg = SynthConfig {
            n_examples: 50,
            ..Default::default()
        };
        let gen = synth_generate(1, &cfg).unwrap();
        let vocab = gen.build_vocab(512).unwrap();
        for ex in &gen.examples {
            for p in &ex.passages {
                let f = format_input(&vocab, &ex.question, &p.title, &p.text, 64).unwrap();
                assert!(f.len() < 64, "formatted length {}", f.len());
                // every sentence survived truncation
                assert_eq!(f.sentences.len(), sentence_split(&p.text).len());
            }
        }
    }
}
