//! Automatic dialogue metrics: BLEU, distinct n-grams, and slot-level
//! precision/recall/F1 over delexicalized tokens.
//!
//! Dialogue-level scoring compares everything after the seed turn; the seed
//! is the shared input, not a model output. Slot F1 is the harmonic mean of
//! the macro-averaged precision and recall (not the average of per-dialogue
//! F1s).

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{extract_slots, Dialogue, GoalSchema, Role, TokenId, Vocabulary};
use crate::generation::{
    generate_dialogue, generate_response, parallel_map, GeneratedDialogue, GenerationRequest,
};
use crate::models::Model;
use crate::scalar::Scalar;
use crate::{Error, Result};

/// Floor applied to zero match counts so the geometric mean stays defined.
pub const BLEU_EPSILON: f64 = 1e-9;

fn ngram_counts(tokens: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut counts: HashMap<&[TokenId], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU-n of a candidate against a single reference: geometric mean of the
/// modified k-gram precisions for k = 1..=n, times the brevity penalty
/// `exp(1 - |ref| / |cand|)` when the candidate is shorter. An order k both
/// sides are too short for is vacuously perfect; identical sequences score
/// exactly 1 at every n.
pub fn bleu(candidate: &[TokenId], reference: &[TokenId], n: usize) -> f64 {
    assert!(n >= 1);
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let cand_counts = ngram_counts(candidate, k);
        let ref_counts = ngram_counts(reference, k);
        let total: usize = cand_counts.values().sum();
        let matched: usize = cand_counts
            .iter()
            .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
            .sum();
        let p = if total == 0 && ref_counts.is_empty() {
            1.0
        } else if total == 0 || matched == 0 {
            BLEU_EPSILON
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let precision = (log_sum / n as f64).exp();
    let bp = if candidate.len() < reference.len() {
        (1.0 - reference.len() as f64 / candidate.len() as f64).exp()
    } else {
        1.0
    };
    bp * precision
}

/// Ratio of unique n-grams to total n-grams across `utterances`.
/// Zero when there are no n-grams at all.
pub fn distinct_n(utterances: &[Vec<TokenId>], n: usize) -> f64 {
    let mut total = 0usize;
    let mut unique: BTreeSet<&[TokenId]> = BTreeSet::new();
    for u in utterances {
        if u.len() >= n {
            for w in u.windows(n) {
                total += 1;
                unique.insert(w);
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

/// Ratio of unique whole utterances to the number of utterances.
pub fn distinct_u(utterances: &[Vec<TokenId>]) -> f64 {
    if utterances.is_empty() {
        return 0.0;
    }
    let unique: BTreeSet<&[TokenId]> = utterances.iter().map(|u| u.as_slice()).collect();
    unique.len() as f64 / utterances.len() as f64
}

/// Precision and recall of a generated slot set against a reference slot
/// set. An empty generated set has perfect precision, an empty reference
/// set perfect recall.
pub fn slot_precision_recall(
    generated: &BTreeSet<String>,
    reference: &BTreeSet<String>,
) -> (f64, f64) {
    let hit = generated.intersection(reference).count() as f64;
    let p = if generated.is_empty() {
        1.0
    } else {
        hit / generated.len() as f64
    };
    let r = if reference.is_empty() {
        1.0
    } else {
        hit / reference.len() as f64
    };
    (p, r)
}

fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Flat metric report; inapplicable lengths are `None` (dialogue lengths
/// for the response task, response length for the dialogue task).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    /// Number of scored units (dialogues or responses).
    pub count: usize,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub distinct_u: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub slot_f1: f64,
    pub len_dialogue: Option<f64>,
    pub len_utterance: Option<f64>,
    pub len_response: Option<f64>,
}

impl MetricReport {
    /// Fixed-width table for terminal output.
    pub fn render_table(&self, label: &str) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map_or("-".to_string(), |x| format!("{x:.2}"))
        }
        let mut s = String::new();
        s.push_str(&format!("{label} ({} items)\n", self.count));
        s.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>8} {:>8}\n",
            "bleu", "1", "2", "3", "4"
        ));
        s.push_str(&format!(
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            "", self.bleu1, self.bleu2, self.bleu3, self.bleu4
        ));
        s.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>8}\n",
            "distinct", "1", "2", "U"
        ));
        s.push_str(&format!(
            "{:<12} {:>8.4} {:>8.4} {:>8.4}\n",
            "", self.distinct1, self.distinct2, self.distinct_u
        ));
        s.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>8}\n",
            "slots", "P", "R", "F1"
        ));
        s.push_str(&format!(
            "{:<12} {:>8.4} {:>8.4} {:>8.4}\n",
            "", self.slot_precision, self.slot_recall, self.slot_f1
        ));
        s.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>8}\n",
            "length", "dlg", "utt", "resp"
        ));
        s.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>8}\n",
            "",
            opt(self.len_dialogue),
            opt(self.len_utterance),
            opt(self.len_response)
        ));
        s
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Scores generated dialogues against aligned references. Every turn after
/// the seed counts; BLEU concatenates those turns per dialogue.
pub fn score_dialogues(
    vocab: &Vocabulary,
    pairs: &[(&GeneratedDialogue, &Dialogue)],
) -> MetricReport {
    let mut bleu_scores = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    let mut precisions = Vec::new();
    let mut recalls = Vec::new();
    let mut generated_utts: Vec<Vec<TokenId>> = Vec::new();
    let mut dialogue_lens = Vec::new();

    for (gen, reference) in pairs {
        let cand: Vec<TokenId> = gen.turns[1..]
            .iter()
            .flat_map(|u| u.content_tokens().iter().copied())
            .collect();
        let refc: Vec<TokenId> = reference.turns[1..]
            .iter()
            .flat_map(|u| u.content_tokens().iter().copied())
            .collect();
        for (i, store) in bleu_scores.iter_mut().enumerate() {
            store.push(bleu(&cand, &refc, i + 1));
        }

        let gen_slots = extract_slots(&cand, vocab);
        let ref_slots = extract_slots(&refc, vocab);
        let (p, r) = slot_precision_recall(&gen_slots, &ref_slots);
        precisions.push(p);
        recalls.push(r);

        dialogue_lens.push(gen.turns.len() as f64);
        for u in &gen.turns[1..] {
            generated_utts.push(u.content_tokens().to_vec());
        }
    }

    let p = mean(&precisions);
    let r = mean(&recalls);
    let utt_lens: Vec<f64> = generated_utts.iter().map(|u| u.len() as f64).collect();
    MetricReport {
        count: pairs.len(),
        bleu1: mean(&bleu_scores[0]),
        bleu2: mean(&bleu_scores[1]),
        bleu3: mean(&bleu_scores[2]),
        bleu4: mean(&bleu_scores[3]),
        distinct1: distinct_n(&generated_utts, 1),
        distinct2: distinct_n(&generated_utts, 2),
        distinct_u: distinct_u(&generated_utts),
        slot_precision: p,
        slot_recall: r,
        slot_f1: harmonic_mean(p, r),
        len_dialogue: (!pairs.is_empty()).then(|| mean(&dialogue_lens)),
        len_utterance: (!utt_lens.is_empty()).then(|| mean(&utt_lens)),
        len_response: None,
    }
}

/// Scores generated responses against their reference turns.
pub fn score_responses(
    vocab: &Vocabulary,
    pairs: &[(&crate::corpus::Utterance, &crate::corpus::Utterance)],
) -> MetricReport {
    let mut bleu_scores = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    let mut precisions = Vec::new();
    let mut recalls = Vec::new();
    let mut responses: Vec<Vec<TokenId>> = Vec::new();

    for (gen, reference) in pairs {
        let cand = gen.content_tokens();
        let refc = reference.content_tokens();
        for (i, store) in bleu_scores.iter_mut().enumerate() {
            store.push(bleu(cand, refc, i + 1));
        }
        let (p, r) =
            slot_precision_recall(&extract_slots(cand, vocab), &extract_slots(refc, vocab));
        precisions.push(p);
        recalls.push(r);
        responses.push(cand.to_vec());
    }

    let p = mean(&precisions);
    let r = mean(&recalls);
    let lens: Vec<f64> = responses.iter().map(|u| u.len() as f64).collect();
    MetricReport {
        count: pairs.len(),
        bleu1: mean(&bleu_scores[0]),
        bleu2: mean(&bleu_scores[1]),
        bleu3: mean(&bleu_scores[2]),
        bleu4: mean(&bleu_scores[3]),
        distinct1: distinct_n(&responses, 1),
        distinct2: distinct_n(&responses, 2),
        distinct_u: distinct_u(&responses),
        slot_precision: p,
        slot_recall: r,
        slot_f1: harmonic_mean(p, r),
        len_dialogue: None,
        len_utterance: None,
        len_response: (!lens.is_empty()).then(|| mean(&lens)),
    }
}

/// Rolls out each reference dialogue from its goals and seed turn, then
/// scores the generations. Returns the generations for inspection.
pub fn evaluate_dialogue_task<S: Scalar>(
    model: &Model<S>,
    schema: &GoalSchema,
    vocab: &Vocabulary,
    references: &[Dialogue],
    threads: usize,
) -> Result<(Vec<GeneratedDialogue>, MetricReport)> {
    let generated = parallel_map(references, threads, |d| {
        let req = GenerationRequest::new(d.id.clone(), d.goals.clone(), d.turns[0].clone())?;
        generate_dialogue(model, schema, &req)
    })?;
    let pairs: Vec<(&GeneratedDialogue, &Dialogue)> =
        generated.iter().zip(references.iter()).collect();
    let report = score_dialogues(vocab, &pairs);
    Ok((generated, report))
}

/// A generated next turn for position `turn_index` of dialogue `id`.
#[derive(Clone, Debug)]
pub struct ResponseRecord {
    pub id: String,
    pub turn_index: usize,
    pub utterance: crate::corpus::Utterance,
}

/// Generates `role`'s turns for every context prefix in `references` and
/// scores them against the reference turns. Every turn of the role is a
/// task; the user's opening turn is generated from an empty context.
pub fn evaluate_response_task<S: Scalar>(
    model: &Model<S>,
    schema: &GoalSchema,
    vocab: &Vocabulary,
    references: &[Dialogue],
    role: Role,
    threads: usize,
) -> Result<(Vec<ResponseRecord>, MetricReport)> {
    let mut tasks: Vec<(&Dialogue, usize)> = Vec::new();
    for d in references {
        for (t, turn) in d.turns.iter().enumerate() {
            if turn.role == role {
                tasks.push((d, t));
            }
        }
    }
    if tasks.is_empty() {
        return Err(Error::Generation(format!("no {role} turns to respond to")));
    }
    let responses = parallel_map(&tasks, threads, |&(d, t)| {
        let utterance = generate_response(model, schema, &d.goals, &d.turns[..t], role)?;
        Ok(ResponseRecord {
            id: d.id.clone(),
            turn_index: t,
            utterance,
        })
    })?;
    let pairs: Vec<(&crate::corpus::Utterance, &crate::corpus::Utterance)> = responses
        .iter()
        .zip(&tasks)
        .map(|(rec, &(d, t))| (&rec.utterance, &d.turns[t]))
        .collect();
    let report = score_responses(vocab, &pairs);
    Ok((responses, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu1_is_unigram_precision() {
        // Candidate [a b c] vs reference [a b d]: 2 of 3 unigrams match,
        // equal lengths so no brevity penalty.
        assert!((bleu(&[6, 7, 8], &[6, 7, 9], 1) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_exact_match_is_one() {
        let tokens = [6, 7, 8, 9, 10];
        for n in 1..=4 {
            assert!((bleu(&tokens, &tokens, n) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bleu_clips_repeated_ngrams() {
        // Candidate repeats [a] seven times; the reference holds two. The
        // clipped count is 2 of 7.
        let cand = [6, 6, 6, 6, 6, 6, 6];
        let reference = [6, 6];
        let expect = (2.0 / 7.0) * 1.0; // candidate longer, no penalty
        assert!((bleu(&cand, &reference, 1) - expect).abs() < 1e-12);
    }

    #[test]
    fn bleu_applies_brevity_penalty() {
        // Candidate [a b] vs reference [a b c d]: p1 = 1, bp = exp(1 - 2).
        let got = bleu(&[6, 7], &[6, 7, 8, 9], 1);
        let expect = (1.0f64 - 4.0 / 2.0).exp();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn bleu_floors_missing_ngrams() {
        // No bigram overlap: p2 = eps, p1 = 1; geometric mean sqrt(eps).
        let got = bleu(&[6, 7], &[7, 6], 2);
        let expect = BLEU_EPSILON.sqrt();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        assert_eq!(bleu(&[], &[6], 4), 0.0);
    }

    #[test]
    fn distinct_ratios() {
        let utts = vec![vec![6, 7, 6], vec![6, 7, 6], vec![8, 9]];
        // Unigrams: total 8, unique {6,7,8,9} = 4.
        assert!((distinct_n(&utts, 1) - 0.5).abs() < 1e-12);
        // Bigrams: total 5 ((6,7),(7,6) twice each, (8,9)), unique 3.
        assert!((distinct_n(&utts, 2) - 3.0 / 5.0).abs() < 1e-12);
        // Utterances: 3 total, 2 unique.
        assert!((distinct_u(&utts) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(distinct_n(&[], 1), 0.0);
        assert_eq!(distinct_u(&[]), 0.0);
    }

    #[test]
    fn slot_prf_empty_set_conventions() {
        let empty = BTreeSet::new();
        let some: BTreeSet<String> = ["[a]".to_string()].into();
        assert_eq!(slot_precision_recall(&empty, &some), (1.0, 0.0));
        assert_eq!(slot_precision_recall(&some, &empty), (0.0, 1.0));
        assert_eq!(slot_precision_recall(&empty, &empty), (1.0, 1.0));
        let (p, r) = slot_precision_recall(&some, &some);
        assert_eq!((p, r), (1.0, 1.0));
    }

    #[test]
    fn f1_is_harmonic_mean_of_averaged_pr() {
        // Two dialogues: (P=1, R=0.5) and (P=0.5, R=1). Averaged P = R =
        // 0.75, so F1 = 0.75 even though per-dialogue F1s are 2/3.
        let p = mean(&[1.0, 0.5]);
        let r = mean(&[0.5, 1.0]);
        assert!((harmonic_mean(p, r) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn report_serializes_flat() {
        let report = MetricReport {
            count: 1,
            bleu1: 0.5,
            bleu2: 0.25,
            bleu3: 0.1,
            bleu4: 0.05,
            distinct1: 0.9,
            distinct2: 0.8,
            distinct_u: 1.0,
            slot_precision: 1.0,
            slot_recall: 0.5,
            slot_f1: 2.0 / 3.0,
            len_dialogue: Some(6.0),
            len_utterance: Some(5.5),
            len_response: None,
        };
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"bleu1\":0.5"));
        assert!(json.contains("\"len_response\":null"));
        let table = report.render_table("test");
        assert!(table.contains("bleu"));
        assert!(table.contains("0.6667"));
    }
}
