//! Brute-force reference implementations of the evaluation metrics.
//!
//! Written independently of the library versions (string-keyed n-grams,
//! match-without-replacement clipping, naive loops) so that agreement
//! between the two is evidence of correctness rather than shared bugs.

use std::collections::HashSet;

pub const ORACLE_BLEU_EPSILON: f64 = 1e-9;

fn grams(xs: &[u32], k: usize) -> Vec<String> {
    if xs.len() < k {
        return Vec::new();
    }
    (0..=xs.len() - k)
        .map(|i| {
            xs[i..i + k]
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// Modified n-gram precision BLEU with an epsilon floor and a brevity
/// penalty for short candidates. Clipping is done by pairing each candidate
/// n-gram with an unused reference occurrence, which equals the usual
/// min-of-counts formulation. An order k with no k-grams on either side is
/// vacuously perfect.
pub fn oracle_bleu(cand: &[u32], reference: &[u32], n: usize) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let cg = grams(cand, k);
        let rg = grams(reference, k);
        let mut used = vec![false; rg.len()];
        let mut matched = 0usize;
        for g in &cg {
            for (j, r) in rg.iter().enumerate() {
                if !used[j] && r == g {
                    used[j] = true;
                    matched += 1;
                    break;
                }
            }
        }
        let p = if cg.is_empty() && rg.is_empty() {
            1.0
        } else if cg.is_empty() || matched == 0 {
            ORACLE_BLEU_EPSILON
        } else {
            matched as f64 / cg.len() as f64
        };
        log_sum += p.ln();
    }
    let mean = (log_sum / n as f64).exp();
    let bp = if cand.len() < reference.len() {
        (1.0 - reference.len() as f64 / cand.len() as f64).exp()
    } else {
        1.0
    };
    bp * mean
}

pub fn oracle_distinct_n(utterances: &[Vec<u32>], n: usize) -> f64 {
    let mut seen: HashSet<String> = HashSet::new();
    let mut total = 0usize;
    for u in utterances {
        for g in grams(u, n) {
            seen.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

pub fn oracle_distinct_u(utterances: &[Vec<u32>]) -> f64 {
    if utterances.is_empty() {
        return 0.0;
    }
    let seen: HashSet<String> = utterances
        .iter()
        .map(|u| {
            u.iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    seen.len() as f64 / utterances.len() as f64
}

/// Set-based precision/recall over slot names, counted with naive loops.
/// Empty generated set: precision 1. Empty reference set: recall 1.
pub fn oracle_slot_pr(generated: &[&str], reference: &[&str]) -> (f64, f64) {
    let mut gen: Vec<&str> = Vec::new();
    for g in generated {
        if !gen.contains(g) {
            gen.push(g);
        }
    }
    let mut rf: Vec<&str> = Vec::new();
    for r in reference {
        if !rf.contains(r) {
            rf.push(r);
        }
    }
    let mut hit = 0usize;
    for g in &gen {
        if rf.contains(g) {
            hit += 1;
        }
    }
    let p = if gen.is_empty() {
        1.0
    } else {
        hit as f64 / gen.len() as f64
    };
    let r = if rf.is_empty() {
        1.0
    } else {
        hit as f64 / rf.len() as f64
    };
    (p, r)
}
