//! Tokenization, persona-dialogue corpus ingestion, and serialization of
//! (persona, history) pairs into the context token sequence fed to the model.
//!
//! Persona order is kept exactly as it appears in the corpus. Partner
//! persona fields, when present in a record, are ignored: only the speaking
//! side's persona is revealed to the model (self-persona setting).

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RecordError, Result, SptError};

/// Reserved token ids, fixed at 0..8 in declaration order.
pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const PERSONA_SEP: usize = 4;
pub const TURN_SEP: usize = 5;
pub const SPEAKER_H: usize = 6;
pub const SPEAKER_M: usize = 7;

const RESERVED: [&str; 8] = [
    "<pad>", "<unk>", "<bos>", "<eos>", "<psep>", "<tsep>", "<human>", "<machine>",
];

pub const DEFAULT_MAX_CONTEXT_LEN: usize = 256;

/// Lowercased whitespace/punctuation tokenizer. Punctuation characters are
/// split off as their own tokens so "hi!" and "hi !" encode identically.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_ascii_punctuation() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_string());
        } else {
            current.push(ch);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Human,
    Machine,
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Speaker::Human => write!(f, "human"),
            Speaker::Machine => write!(f, "machine"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

/// One persona-grounded dialogue: persona sentences, the alternating
/// exchange so far (starting and ending with the human), and the machine
/// response the model should produce.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DialogueContext {
    pub persona: Vec<String>,
    pub history: Vec<Utterance>,
    pub response: String,
    /// Evaluation-only tag from synthetic corpora; never fed to the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<String>,
}

impl DialogueContext {
    /// Checks the structural invariants; `require_response` is off for
    /// inference-time contexts that carry no target.
    pub fn validate(&self, require_response: bool) -> std::result::Result<(), String> {
        if self.persona.is_empty() {
            return Err("persona must contain at least one sentence".into());
        }
        if self.persona.iter().any(|p| tokenize(p).is_empty()) {
            return Err("persona sentences must be non-empty".into());
        }
        if self.history.is_empty() {
            return Err("history must contain at least one utterance".into());
        }
        if self.history[0].speaker != Speaker::Human {
            return Err("history must start with a human utterance".into());
        }
        for (i, pair) in self.history.windows(2).enumerate() {
            if pair[0].speaker == pair[1].speaker {
                return Err(format!(
                    "history speakers must alternate (positions {} and {})",
                    i,
                    i + 1
                ));
            }
        }
        if self.history.last().unwrap().speaker != Speaker::Human {
            return Err("history must end with a human utterance".into());
        }
        if require_response && tokenize(&self.response).is_empty() {
            return Err("field 'response' must be non-empty".into());
        }
        Ok(())
    }

    /// The plain text the contrastive gate measures similarity on:
    /// persona sentences followed by the dialogue history, lowercased.
    pub fn raw_context_text(&self) -> String {
        let mut parts: Vec<String> = self.persona.iter().map(|p| p.to_lowercase()).collect();
        parts.extend(self.history.iter().map(|u| u.text.to_lowercase()));
        parts.join(" ")
    }
}

/// Token-to-id bijection with the eight reserved entries at ids 0..8.
/// Persisted as its id-ordered token list; rebuild with [`Vocabulary::from_tokens`].
#[derive(Debug, Clone)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.id_to_token == other.id_to_token
    }
}

impl Vocabulary {
    /// Builds a vocabulary from plain texts: lowercased split tokens with
    /// corpus frequency >= `min_count`, plus the reserved tokens.
    pub fn build_from_texts<S: AsRef<str>>(texts: &[S], min_count: usize) -> Result<Self> {
        if texts.is_empty() {
            return Err(SptError::Ingestion(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for token in tokenize(text.as_ref()) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, count)| *count >= min_count && !RESERVED.contains(&tok.as_str()))
            .collect();
        // Frequency-descending then lexicographic: deterministic id layout.
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(kept.into_iter().map(|(tok, _)| tok));
        Ok(Vocabulary::from_tokens(id_to_token))
    }

    /// Builds from dialogue records: persona, history, and response text
    /// all contribute tokens.
    pub fn build(records: &[DialogueContext], min_count: usize) -> Result<Self> {
        let mut texts = Vec::new();
        for r in records {
            texts.extend(r.persona.iter().cloned());
            texts.extend(r.history.iter().map(|u| u.text.clone()));
            texts.push(r.response.clone());
        }
        if texts.is_empty() {
            return Err(SptError::Ingestion(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        Self::build_from_texts(&texts, min_count)
    }

    /// Reconstructs from an id-ordered token list (checkpoint loading).
    pub fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            id_to_token,
            token_to_id,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with single spaces, skipping PAD.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Decodes dropping all reserved tokens; used for generated responses.
    pub fn decode_content(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= RESERVED.len())
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Outcome of serializing one context, with truncation accounting.
#[derive(Debug, Clone)]
pub struct SerializedContext {
    pub ids: Vec<usize>,
    /// Whole turns dropped from the oldest end to fit `max_context_len`.
    pub dropped_turns: usize,
}

/// Flattens a context into ids:
/// BOS, persona sentences joined by PSEP, TSEP, then each utterance
/// prefixed by its speaker tag. When the result would exceed
/// `max_context_len`, whole turns are dropped oldest-first; persona tokens
/// are never dropped.
pub fn serialize_context(
    ctx: &DialogueContext,
    vocab: &Vocabulary,
    max_context_len: usize,
) -> Result<SerializedContext> {
    ctx.validate(false)
        .map_err(|m| SptError::Contract(format!("serialize_context: {m}")))?;

    let mut head = vec![BOS];
    for (i, sentence) in ctx.persona.iter().enumerate() {
        if i > 0 {
            head.push(PERSONA_SEP);
        }
        head.extend(vocab.encode(sentence));
    }
    head.push(TURN_SEP);

    let turns: Vec<Vec<usize>> = ctx
        .history
        .iter()
        .map(|u| {
            let tag = match u.speaker {
                Speaker::Human => SPEAKER_H,
                Speaker::Machine => SPEAKER_M,
            };
            let mut ids = vec![tag];
            ids.extend(vocab.encode(&u.text));
            ids
        })
        .collect();

    let turn_total: usize = turns.iter().map(Vec::len).sum();
    let mut dropped = 0;
    while dropped < turns.len()
        && head.len() + turn_total - turns[..dropped].iter().map(Vec::len).sum::<usize>()
            > max_context_len
    {
        // Keep at least the most recent turn.
        if dropped + 1 == turns.len() {
            break;
        }
        dropped += 1;
    }

    let mut ids = head;
    for turn in &turns[dropped..] {
        ids.extend_from_slice(turn);
    }
    Ok(SerializedContext {
        ids,
        dropped_turns: dropped,
    })
}

/// A context ready for the model: context ids, target ids (response plus
/// EOS), and the raw context text consumed by the contrastive gate.
#[derive(Debug, Clone)]
pub struct EncodedExample {
    pub context_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub raw_context_text: String,
    pub regime: Option<String>,
    pub dropped_turns: usize,
    /// Number of human turns in the history; drives per-turn usage reports.
    pub turn_index: usize,
}

pub fn encode_example(
    ctx: &DialogueContext,
    vocab: &Vocabulary,
    max_context_len: usize,
) -> Result<EncodedExample> {
    ctx.validate(true)
        .map_err(|m| SptError::Contract(format!("encode_example: {m}")))?;
    let serialized = serialize_context(ctx, vocab, max_context_len)?;
    let mut target_ids = vocab.encode(&ctx.response);
    target_ids.push(EOS);
    let turn_index = ctx
        .history
        .iter()
        .filter(|u| u.speaker == Speaker::Human)
        .count()
        .saturating_sub(1);
    Ok(EncodedExample {
        context_ids: serialized.ids,
        target_ids,
        raw_context_text: ctx.raw_context_text(),
        regime: ctx.regime.clone(),
        dropped_turns: serialized.dropped_turns,
        turn_index,
    })
}

/// Loads a JSONL corpus: one record per line with fields `persona`,
/// `history` and `response`. Unknown fields `regime` (kept as metadata) and
/// `partner_persona` (ignored) are tolerated. All malformed lines are
/// collected and reported together with their line numbers.
pub fn load_corpus<P: AsRef<Path>>(path: P) -> Result<Vec<DialogueContext>> {
    load_corpus_inner(path.as_ref(), true)
}

/// Same as [`load_corpus`] but without requiring a response field; used for
/// inference-time inputs.
pub fn load_contexts<P: AsRef<Path>>(path: P) -> Result<Vec<DialogueContext>> {
    load_corpus_inner(path.as_ref(), false)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    persona: Vec<String>,
    history: Vec<Utterance>,
    #[serde(default)]
    response: Option<String>,
    #[serde(default)]
    regime: Option<String>,
    #[serde(default)]
    #[allow(dead_code)]
    partner_persona: Option<Vec<String>>,
}

fn load_corpus_inner(path: &Path, require_response: bool) -> Result<Vec<DialogueContext>> {
    let file = std::fs::File::open(path).map_err(|e| {
        SptError::Ingestion(format!("cannot open {}: {}", path.display(), e))
    })?;
    let reader = BufReader::new(file);

    let mut records = Vec::new();
    let mut errors: Vec<RecordError> = Vec::new();
    let mut lines_seen = 0;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        lines_seen += 1;
        match serde_json::from_str::<RawRecord>(&line) {
            Ok(raw) => {
                if require_response && raw.response.is_none() {
                    errors.push(RecordError {
                        line: line_no,
                        message: "missing field 'response'".into(),
                    });
                    continue;
                }
                let ctx = DialogueContext {
                    persona: raw.persona,
                    history: raw.history,
                    response: raw.response.unwrap_or_default(),
                    regime: raw.regime,
                };
                match ctx.validate(require_response) {
                    Ok(()) => records.push(ctx),
                    Err(m) => errors.push(RecordError {
                        line: line_no,
                        message: m,
                    }),
                }
            }
            Err(e) => errors.push(RecordError {
                line: line_no,
                message: format!("parse error: {}", e),
            }),
        }
    }

    if lines_seen == 0 {
        return Err(SptError::Ingestion(format!(
            "{} contains no records",
            path.display()
        )));
    }
    if !errors.is_empty() {
        return Err(SptError::InvalidRecords {
            path: path.display().to_string(),
            records: errors,
        });
    }
    Ok(records)
}

/// Writes records as JSONL, one record per line.
pub fn save_corpus<P: AsRef<Path>>(path: P, records: &[DialogueContext]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for r in records {
        serde_json::to_writer(&mut file, r)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h(text: &str) -> Utterance {
        Utterance {
            speaker: Speaker::Human,
            text: text.into(),
        }
    }

    fn m(text: &str) -> Utterance {
        Utterance {
            speaker: Speaker::Machine,
            text: text.into(),
        }
    }

    fn sample_ctx() -> DialogueContext {
        DialogueContext {
            persona: vec!["i like tea".into()],
            history: vec![h("hello there")],
            response: "hi friend".into(),
            regime: None,
        }
    }

    #[test]
    fn vocabulary_counts_reserved_plus_unique_tokens() {
        let vocab = Vocabulary::build_from_texts(&["a b", "b c"], 1).unwrap();
        assert_eq!(vocab.len(), 11); // 8 reserved + {a, b, c}
        assert_eq!(vocab.token(PAD), "<pad>");
        assert_eq!(vocab.token(SPEAKER_M), "<machine>");
        // b is the most frequent content token, so it gets the first free id.
        assert_eq!(vocab.id("b"), 8);
    }

    #[test]
    fn encode_decode_roundtrip_identity_in_vocab() {
        let vocab = Vocabulary::build_from_texts(&["the cat sat on the mat"], 1).unwrap();
        let text = "the mat sat on the cat";
        let ids = vocab.encode(text);
        assert_eq!(vocab.decode(&ids), text);
    }

    #[test]
    fn out_of_vocab_token_maps_to_unk() {
        let vocab = Vocabulary::build_from_texts(&["a b"], 1).unwrap();
        assert_eq!(vocab.encode("a zebra"), vec![vocab.id("a"), UNK]);
    }

    #[test]
    fn min_count_filters_rare_tokens() {
        let vocab = Vocabulary::build_from_texts(&["a a b"], 2).unwrap();
        assert_eq!(vocab.id("a"), 8);
        assert_eq!(vocab.id("b"), UNK);
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("Hi, there!"), vec!["hi", ",", "there", "!"]);
        assert_eq!(tokenize("  spaced   out  "), vec!["spaced", "out"]);
    }

    #[test]
    fn serialize_shape_arithmetic_single_persona_single_turn() {
        let ctx = sample_ctx();
        let vocab = Vocabulary::build(&[ctx.clone()], 1).unwrap();
        let s = serialize_context(&ctx, &vocab, 256).unwrap();
        // BOS + |p1| + TSEP + SPEAKER_H + |u|
        assert_eq!(s.ids.len(), 1 + 3 + 1 + 1 + 2);
        assert_eq!(s.ids[0], BOS);
        assert_eq!(s.ids[4], TURN_SEP);
        assert_eq!(s.ids[5], SPEAKER_H);
        assert_eq!(s.dropped_turns, 0);
    }

    #[test]
    fn empty_persona_rejected_by_precondition() {
        let mut ctx = sample_ctx();
        ctx.persona.clear();
        let vocab = Vocabulary::build_from_texts(&["hello"], 1).unwrap();
        assert!(serialize_context(&ctx, &vocab, 256).is_err());
    }

    #[test]
    fn truncation_drops_oldest_turns_never_persona() {
        let mut ctx = DialogueContext {
            persona: vec!["keep me always".into()],
            history: vec![],
            response: "done".into(),
            regime: None,
        };
        for i in 0..20 {
            ctx.history.push(h(&format!("question number {i} please")));
            ctx.history.push(m(&format!("answer number {i} given")));
        }
        ctx.history.push(h("final question"));
        let vocab = Vocabulary::build(&[ctx.clone()], 1).unwrap();

        let full = serialize_context(&ctx, &vocab, 10_000).unwrap();
        let max_len = full.ids.len() / 2;
        let truncated = serialize_context(&ctx, &vocab, max_len).unwrap();

        assert!(truncated.ids.len() <= max_len);
        assert!(truncated.dropped_turns > 0);
        // All persona tokens retained.
        for token in vocab.encode("keep me always") {
            assert!(truncated.ids.contains(&token));
        }
        // The most recent turn survives.
        let final_q = vocab.encode("final question");
        let tail = &truncated.ids[truncated.ids.len() - final_q.len()..];
        assert_eq!(tail, final_q.as_slice());
        // The oldest turn is gone.
        let first_marker = vocab.id("0");
        assert!(!truncated.ids.contains(&first_marker));
    }

    #[test]
    fn serialization_is_deterministic_and_injective_on_small_cases() {
        let a = DialogueContext {
            persona: vec!["a b".into()],
            history: vec![h("c")],
            response: "r".into(),
            regime: None,
        };
        let b = DialogueContext {
            persona: vec!["a".into(), "b".into()],
            history: vec![h("c")],
            response: "r".into(),
            regime: None,
        };
        let vocab = Vocabulary::build(&[a.clone(), b.clone()], 1).unwrap();
        let sa1 = serialize_context(&a, &vocab, 256).unwrap();
        let sa2 = serialize_context(&a, &vocab, 256).unwrap();
        assert_eq!(sa1.ids, sa2.ids);
        let sb = serialize_context(&b, &vocab, 256).unwrap();
        assert_ne!(sa1.ids, sb.ids); // persona split differs via PSEP
    }

    #[test]
    fn decode_of_context_matches_serialized_tokens() {
        let ctx = sample_ctx();
        let vocab = Vocabulary::build(&[ctx.clone()], 1).unwrap();
        let s = serialize_context(&ctx, &vocab, 256).unwrap();
        let decoded = vocab.decode(&s.ids);
        let reencoded: Vec<usize> = decoded
            .split_whitespace()
            .map(|t| vocab.id(t))
            .collect();
        assert_eq!(reencoded, s.ids);
    }

    #[test]
    fn encode_example_builds_target_with_eos() {
        let ctx = sample_ctx();
        let vocab = Vocabulary::build(&[ctx.clone()], 1).unwrap();
        let ex = encode_example(&ctx, &vocab, 256).unwrap();
        assert_eq!(ex.target_ids.last(), Some(&EOS));
        assert_eq!(ex.target_ids.len(), 3);
        assert_eq!(ex.raw_context_text, "i like tea hello there");
        assert_eq!(ex.turn_index, 0);
    }

    #[test]
    fn load_corpus_rejects_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(load_corpus(&path), Err(SptError::Ingestion(_))));
    }

    #[test]
    fn load_corpus_accepts_valid_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ok.jsonl");
        let line = r#"{"persona":["i like tea"],"history":[{"speaker":"human","text":"hi"}],"response":"hello"}"#;
        std::fs::write(&path, format!("{line}\n{line}\n")).unwrap();
        let records = load_corpus(&path).unwrap();
        assert_eq!(records.len(), 2);
    }

    #[test]
    fn load_corpus_reports_missing_response_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = r#"{"persona":["p"],"history":[{"speaker":"human","text":"hi"}],"response":"r"}"#;
        let bad = r#"{"persona":["p"],"history":[{"speaker":"human","text":"hi"}]}"#;
        std::fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        let err = load_corpus(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("response"), "{msg}");
    }

    #[test]
    fn load_corpus_rejects_non_alternating_history() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("alt.jsonl");
        let bad = r#"{"persona":["p"],"history":[{"speaker":"human","text":"a"},{"speaker":"human","text":"b"}],"response":"r"}"#;
        std::fs::write(&path, format!("{bad}\n")).unwrap();
        let err = load_corpus(&path).unwrap_err();
        assert!(err.to_string().contains("alternate"), "{err}");
    }

    #[test]
    fn save_and_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.jsonl");
        let mut ctx = sample_ctx();
        ctx.regime = Some("r0".into());
        save_corpus(&path, &[ctx.clone()]).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].regime.as_deref(), Some("r0"));
        assert_eq!(loaded[0].response, ctx.response);
    }
}
