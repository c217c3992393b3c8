//! Synthetic persona-dialogue corpora with explicit conversational regimes.
//!
//! Each regime owns a disjoint vocabulary (every token carries the regime's
//! prefix), its own persona templates, response style, and a turn-position
//! lexicon: openings, mid-conversation markers and closings differ by turn
//! index. Regime labels are stored per record for evaluation only; the
//! model never sees them. Cross-regime contexts share no tokens, so their
//! pairwise BLEU sits near zero, while the shared within-regime skeletons
//! keep same-regime BLEU high.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SptError};
use crate::text::{DialogueContext, Speaker, Utterance};

const PREFIXES: [&str; 8] = ["zu", "mi", "ka", "vo", "ne", "su", "ro", "li"];
const NOUN_STEMS: [&str; 6] = ["lume", "dani", "rapo", "simi", "tovu", "gema"];
const ADJ_STEMS: [&str; 4] = ["brav", "tilk", "morn", "pelt"];
const FLAVOR_STEMS: [&str; 5] = ["quol", "farn", "welt", "hix", "dorv"];
const STAGE_STEMS: [&str; 3] = ["hallo", "mida", "enda"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub regimes: usize,
    pub train_dialogues_per_regime: usize,
    pub valid_dialogues_per_regime: usize,
    /// Size of the style-decoupled backbone-pretraining split.
    pub pretrain_dialogues_per_regime: usize,
    pub seed: u64,
    /// Persona sentences per dialogue.
    pub persona_sentences: usize,
    /// Maximum human turns per dialogue (1..=max).
    pub max_turns: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            regimes: 2,
            train_dialogues_per_regime: 50,
            valid_dialogues_per_regime: 20,
            pretrain_dialogues_per_regime: 50,
            seed: 7,
            persona_sentences: 4,
            max_turns: 3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.regimes == 0 {
            return Err(SptError::Config("regimes must be >= 1".into()));
        }
        if self.regimes > PREFIXES.len() {
            return Err(SptError::Config(format!(
                "at most {} regimes supported",
                PREFIXES.len()
            )));
        }
        if self.persona_sentences == 0 {
            return Err(SptError::Config("persona_sentences must be >= 1".into()));
        }
        if self.max_turns == 0 || self.max_turns > STAGE_STEMS.len() {
            return Err(SptError::Config(format!(
                "max_turns must be in 1..={}",
                STAGE_STEMS.len()
            )));
        }
        Ok(())
    }
}

pub struct SynthCorpus {
    pub train: Vec<DialogueContext>,
    pub valid: Vec<DialogueContext>,
    /// Backbone-pretraining split: contexts as usual, but each response is
    /// rendered in a uniformly random regime's style. The backbone learns
    /// every style grammar and the noun-copy pattern without any
    /// context-to-style association, which is then the signal left for the
    /// prompts to carry.
    pub pretrain: Vec<DialogueContext>,
}

struct Lexicon {
    nouns: Vec<String>,
    adjectives: Vec<String>,
    flavors: Vec<String>,
    /// Turn-position words: index 0 opens a conversation, later indices
    /// mark mid and late stages.
    stages: Vec<String>,
    f: Vec<String>,
    style_open: String,
    style_close: String,
    style_mark: String,
    style_seal: String,
    identity: String,
    /// Style-cue sentence used only in the pretraining split.
    hint: String,
}

fn lexicon(regime: usize) -> Lexicon {
    let p = PREFIXES[regime];
    let w = |stem: &str| format!("{p}{stem}");
    Lexicon {
        nouns: NOUN_STEMS.iter().map(|s| w(s)).collect(),
        adjectives: ADJ_STEMS.iter().map(|s| w(s)).collect(),
        flavors: FLAVOR_STEMS.iter().map(|s| w(s)).collect(),
        stages: STAGE_STEMS.iter().map(|s| w(s)).collect(),
        f: (0..5).map(|i| w(&format!("fil{i}"))).collect(),
        style_open: w("open"),
        style_close: w("close"),
        style_mark: w("mark"),
        style_seal: w("seal"),
        identity: format!("{} {} {} {}", w("fil0"), w("self"), w("from"), w("world")),
        hint: format!("{} {}", w("hinta"), w("hintb")),
    }
}

/// Generates the train, validation and pretraining splits from one seeded
/// stream.
pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lexicons: Vec<Lexicon> = (0..config.regimes).map(lexicon).collect();
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut pretrain = Vec::new();
    for regime in 0..config.regimes {
        for _ in 0..config.train_dialogues_per_regime {
            train.push(dialogue(regime, &lexicons, config, &mut rng, false));
        }
        for _ in 0..config.valid_dialogues_per_regime {
            valid.push(dialogue(regime, &lexicons, config, &mut rng, false));
        }
        for _ in 0..config.pretrain_dialogues_per_regime {
            pretrain.push(dialogue(regime, &lexicons, config, &mut rng, true));
        }
    }
    // Interleave regimes so batches mix them even without shuffling.
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x51ab);
    shuffle(&mut train, &mut order_rng);
    shuffle(&mut valid, &mut order_rng);
    shuffle(&mut pretrain, &mut order_rng);
    Ok(SynthCorpus {
        train,
        valid,
        pretrain,
    })
}

fn shuffle(records: &mut [DialogueContext], rng: &mut ChaCha8Rng) {
    for i in (1..records.len()).rev() {
        let j = rng.random_range(0..=i);
        records.swap(i, j);
    }
}

/// One dialogue whose context belongs to `regime`. With `hint_style` on
/// (the pretraining split) an extra leading persona sentence of dedicated
/// cue words is drawn from a uniformly random regime, and every machine
/// utterance follows the CUE's style rather than the context's. The cue
/// vocabulary never appears in the train or valid splits, so the
/// pretrained model learns to take its response style from front-position
/// cue evidence and falls back to hedging when none is present; a soft
/// prompt sits exactly where the cue used to be.
fn dialogue(
    regime: usize,
    lexicons: &[Lexicon],
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
    hint_style: bool,
) -> DialogueContext {
    let lex = &lexicons[regime];
    let style = if hint_style {
        rng.random_range(0..lexicons.len())
    } else {
        regime
    };

    // Persona: the fixed regime identity sentence plus liked-noun sentences
    // from a shared skeleton, so same-regime contexts overlap heavily.
    let mut persona = Vec::new();
    if hint_style {
        persona.push(lexicons[style].hint.clone());
    }
    persona.push(lex.identity.clone());
    for _ in 1..config.persona_sentences {
        let noun = lex.nouns.choose(rng).unwrap();
        let adj = lex.adjectives.choose(rng).unwrap();
        persona.push(format!("{} {} {} {}", lex.f[1], lex.f[2], adj, noun));
    }

    let human_turns = rng.random_range(1..=config.max_turns);
    let mut history = Vec::new();
    let mut last_noun_idx = 0;
    for turn in 0..human_turns {
        last_noun_idx = rng.random_range(0..lex.nouns.len());
        history.push(Utterance {
            speaker: Speaker::Human,
            text: format!("{} {} {}", lex.stages[turn], lex.f[3], lex.nouns[last_noun_idx]),
        });
        if turn + 1 < human_turns {
            history.push(Utterance {
                speaker: Speaker::Machine,
                text: response_text(style, lexicons, lex, last_noun_idx, turn),
            });
        }
    }
    let response = response_text(style, lexicons, lex, last_noun_idx, human_turns - 1);

    DialogueContext {
        persona,
        history,
        response,
        regime: Some(format!("r{regime}")),
    }
}

/// A response is two style-bearing clauses in the voice of `style`: even
/// regimes lead with their markers, odd regimes trail with them. The stage
/// word ties the first clause to the turn index; the second clause echoes
/// the last human noun with its fixed flavor word.
fn response_text(
    style: usize,
    lexicons: &[Lexicon],
    context: &Lexicon,
    noun_index: usize,
    stage: usize,
) -> String {
    let s_lex = &lexicons[style];
    let stage_word = &s_lex.stages[stage];
    let clause_a = if style % 2 == 0 {
        format!("{} {}", s_lex.style_open, stage_word)
    } else {
        format!("{} {}", stage_word, s_lex.style_close)
    };
    let noun = &context.nouns[noun_index];
    let flavor = &s_lex.flavors[noun_index % s_lex.flavors.len()];
    let clause_b = if style % 2 == 0 {
        format!("{} {} {}", s_lex.style_mark, noun, flavor)
    } else {
        format!("{} {} {}", noun, flavor, s_lex.style_seal)
    };
    format!("{} {}", clause_a, clause_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::context_similarity;

    #[test]
    fn counts_and_schema_are_valid() {
        let config = SynthConfig::default();
        let corpus = generate(&config).unwrap();
        assert_eq!(corpus.train.len(), 100);
        assert_eq!(corpus.valid.len(), 40);
        for record in corpus.train.iter().chain(&corpus.valid) {
            record.validate(true).unwrap();
            assert!(record.regime.is_some());
            assert_eq!(record.persona.len(), 4);
        }
    }

    #[test]
    fn same_seed_reproduces_the_corpus() {
        let config = SynthConfig::default();
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        let texts = |c: &SynthCorpus| {
            c.train
                .iter()
                .map(|r| r.raw_context_text() + " | " + &r.response)
                .collect::<Vec<_>>()
        };
        assert_eq!(texts(&a), texts(&b));

        let other = generate(&SynthConfig {
            seed: 8,
            ..config
        })
        .unwrap();
        assert_ne!(texts(&a), texts(&other));
    }

    #[test]
    fn regime_vocabularies_are_disjoint() {
        let config = SynthConfig::default();
        let corpus = generate(&config).unwrap();
        let tokens_of = |regime: &str| {
            let mut set = std::collections::BTreeSet::new();
            for r in corpus.train.iter().filter(|r| r.regime.as_deref() == Some(regime)) {
                for tok in crate::text::tokenize(&(r.raw_context_text() + " " + &r.response)) {
                    set.insert(tok);
                }
            }
            set
        };
        let r0 = tokens_of("r0");
        let r1 = tokens_of("r1");
        assert!(!r0.is_empty() && !r1.is_empty());
        assert!(r0.is_disjoint(&r1));
    }

    #[test]
    fn pairwise_bleu_separates_regimes_at_the_gate() {
        // Audit of the emitted corpus: same-regime context BLEU above the
        // gate, cross-regime below, for at least 90% of pairs.
        let config = SynthConfig {
            train_dialogues_per_regime: 25,
            valid_dialogues_per_regime: 5,
            ..Default::default()
        };
        let corpus = generate(&config).unwrap();
        let gamma = 20.0;
        let mut within = (0usize, 0usize);
        let mut cross = (0usize, 0usize);
        for i in 0..corpus.train.len() {
            for j in i + 1..corpus.train.len() {
                let a = &corpus.train[i];
                let b = &corpus.train[j];
                let sim = context_similarity(&a.raw_context_text(), &b.raw_context_text());
                if a.regime == b.regime {
                    within.1 += 1;
                    if sim > gamma {
                        within.0 += 1;
                    }
                } else {
                    cross.1 += 1;
                    if sim < gamma {
                        cross.0 += 1;
                    }
                }
            }
        }
        let within_rate = within.0 as f64 / within.1 as f64;
        let cross_rate = cross.0 as f64 / cross.1 as f64;
        assert!(within_rate >= 0.9, "within-regime rate {}", within_rate);
        assert!(cross_rate >= 0.9, "cross-regime rate {}", cross_rate);
    }
}
