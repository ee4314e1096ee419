//! Synthetic corpora with known structure, for end-to-end checks.
//!
//! Both recipes are pure functions of (recipe, n, seed): the same inputs
//! produce byte-identical corpora. Dialogues are generated on a fixed
//! 12-step cycle of goal/template combinations, so train, validation, and
//! test splits (which continue the same global index) draw from the same
//! 12 dialogue classes.

use std::str::FromStr;

use crate::corpus::{Corpus, Dialogue, Goal, GoalSchema, Role, Utterance, Vocabulary, EOS};
use crate::{Error, Result};

/// Which synthetic corpus to build.
///
/// `GoalKeyword`: 6-turn dialogues where the agent's first reply names the
/// goal domain and later turns carry domain-specific slot tokens; separates
/// goal-conditioned models from goal-blind ones.
///
/// `FixedLength`: dialogues whose turn count (4 or 6) is determined by the
/// goal's book flag; exercises the end-of-dialogue decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recipe {
    GoalKeyword,
    FixedLength,
}

impl Recipe {
    pub fn as_str(self) -> &'static str {
        match self {
            Recipe::GoalKeyword => "goal-keyword",
            Recipe::FixedLength => "fixed-length",
        }
    }
}

impl std::fmt::Display for Recipe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "goal-keyword" => Ok(Recipe::GoalKeyword),
            "fixed-length" => Ok(Recipe::FixedLength),
            other => Err(Error::Config(format!(
                "unknown recipe {other:?} (expected goal-keyword or fixed-length)"
            ))),
        }
    }
}

const DOMAINS: [&str; 3] = ["attraction", "hotel", "restaurant"];
const REQUESTS: [&str; 2] = ["phone", "address"];
const OPENERS: [&str; 4] = [
    "hello i am looking for help",
    "hi i need some help",
    "hello can you help me",
    "hello i have a request",
];

/// Turn texts for one goal-keyword dialogue; roles alternate user-first.
fn goal_keyword_turns(domain: &str, request: &str, book: bool, variant: usize) -> Vec<String> {
    vec![
        OPENERS[variant].to_string(),
        format!("we found a nice {domain} for you"),
        format!("what is the {request} please"),
        format!("the {request} is [{domain}_{request}]"),
        if book { "yes please book it" } else { "no thank you" }.to_string(),
        if book {
            "done have a good day"
        } else {
            "okay have a good day"
        }
        .to_string(),
    ]
}

/// Turn texts for one fixed-length dialogue: 4 turns without booking,
/// 6 with.
fn fixed_length_turns(domain: &str, book: bool, variant: usize) -> Vec<String> {
    let mut turns = vec![
        OPENERS[variant].to_string(),
        format!("we found a nice {domain} for you"),
    ];
    if book {
        turns.push("yes please book it".to_string());
        turns.push("done anything else today".to_string());
        turns.push("no thank you".to_string());
    } else {
        turns.push("that is all thank you".to_string());
    }
    turns.push("okay have a good day".to_string());
    turns
}

/// Goal and turn texts for global dialogue index `j` under `seed`.
fn dialogue_texts(recipe: Recipe, j: usize, seed: u64) -> (Goal, Vec<String>) {
    let shift = (seed % 3) as usize;
    let domain = DOMAINS[(j + shift) % 3];
    let book = (j / 6) % 2 == 1;
    let variant = j % 4;
    match recipe {
        Recipe::GoalKeyword => {
            let request = REQUESTS[(j / 3) % 2];
            let goal = Goal {
                domain: domain.to_string(),
                user_slots: vec!["area".to_string()],
                request_slots: vec![request.to_string()],
                book,
            };
            (goal, goal_keyword_turns(domain, request, book, variant))
        }
        Recipe::FixedLength => {
            let book = (j / 3) % 2 == 1;
            let goal = Goal {
                domain: domain.to_string(),
                user_slots: Vec::new(),
                request_slots: Vec::new(),
                book,
            };
            (goal, fixed_length_turns(domain, book, variant))
        }
    }
}

/// Both recipes share one slot inventory.
fn schema() -> GoalSchema {
    GoalSchema {
        domains: DOMAINS.iter().map(|s| s.to_string()).collect(),
        user_slots: vec!["area".to_string(), "name".to_string()],
        request_slots: REQUESTS.iter().map(|s| s.to_string()).collect(),
    }
}

/// Builds a corpus of `n` training dialogues plus validation and test
/// splits (max(3, n/4) and max(6, n/2) dialogues) that continue the same
/// deterministic cycle.
pub fn build(recipe: Recipe, n: usize, seed: u64) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".to_string()));
    }
    let valid_n = (n / 4).max(3);
    let test_n = (n / 2).max(6);

    // The vocabulary is every token any index can produce, sorted. A
    // sweep over one full 12-index cycle covers all templates.
    let mut words = std::collections::BTreeSet::new();
    for j in 0..12 {
        let (_, turns) = dialogue_texts(recipe, j, seed);
        for turn in turns {
            for w in turn.split_whitespace() {
                words.insert(w.to_string());
            }
        }
    }
    // Slot fillers span all domain/request products even if the sampled
    // cycle misses some.
    if recipe == Recipe::GoalKeyword {
        for d in DOMAINS {
            for r in REQUESTS {
                words.insert(format!("[{d}_{r}]"));
            }
        }
    }
    let vocab = Vocabulary::new(words.into_iter().collect())?;

    let build_split = |start: usize, count: usize, prefix: &str| -> Result<Vec<Dialogue>> {
        (0..count)
            .map(|i| {
                let j = start + i;
                let (goal, turns) = dialogue_texts(recipe, j, seed);
                let turns = turns
                    .iter()
                    .enumerate()
                    .map(|(t, text)| {
                        let (mut tokens, unk) = vocab.encode_text(text)?;
                        debug_assert_eq!(unk, 0, "synthetic text outside its own vocabulary");
                        tokens.push(EOS);
                        Ok(Utterance {
                            role: if t % 2 == 0 { Role::User } else { Role::Agent },
                            tokens,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Dialogue {
                    id: format!("{prefix}{i:04}"),
                    goals: vec![goal],
                    turns,
                })
            })
            .collect()
    };

    let train = build_split(0, n, "train-")?;
    let valid = build_split(n, valid_n, "valid-")?;
    let test = build_split(n + valid_n, test_n, "test-")?;
    Ok(Corpus {
        schema: schema(),
        vocab,
        train,
        valid,
        test,
    })
}
