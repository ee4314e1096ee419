//! Dialogue corpus: goal schema, vocabulary, and JSONL loading.
//!
//! A corpus directory holds `schema.json`, `vocab.txt`, and
//! `{train,valid,test}.jsonl`. Overlong dialogues and utterances are
//! truncated to the caps rather than rejected; out-of-vocabulary tokens map
//! to `<unk>`. Both events are counted in [`LoadStats`].

use std::collections::HashMap;
use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
/// Utterance boundary marker for user turns in the flat-stream language model.
pub const EOU_USER: TokenId = 4;
/// Utterance boundary marker for agent turns in the flat-stream language model.
pub const EOU_AGENT: TokenId = 5;

pub const RESERVED: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<unk>", "<eou_user>", "<eou_agent>"];

/// Length caps applied at load time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Caps {
    pub max_turns: usize,
    /// Maximum utterance length in tokens, including the trailing `<eos>`.
    pub max_seq_len: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Caps {
            max_turns: 22,
            max_seq_len: 36,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Agent,
}

impl Role {
    pub fn other(self) -> Role {
        match self {
            Role::User => Role::Agent,
            Role::Agent => Role::User,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Agent => "agent",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        match s {
            "user" => Some(Role::User),
            "agent" => Some(Role::Agent),
            _ => None,
        }
    }

    /// Branch index: 0 for user, 1 for agent.
    pub fn index(self) -> usize {
        match self {
            Role::User => 0,
            Role::Agent => 1,
        }
    }

    pub fn eou_token(self) -> TokenId {
        match self {
            Role::User => EOU_USER,
            Role::Agent => EOU_AGENT,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One turn. `tokens` ends with `<eos>` for corpus utterances; a generated
/// utterance may omit it only when generation hit the length cap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub role: Role,
    pub tokens: Vec<TokenId>,
}

impl Utterance {
    /// Tokens without the trailing `<eos>`, if present.
    pub fn content_tokens(&self) -> &[TokenId] {
        match self.tokens.split_last() {
            Some((&last, rest)) if last == EOS => rest,
            _ => &self.tokens,
        }
    }

    pub fn text(&self, vocab: &Vocabulary) -> String {
        self.content_tokens()
            .iter()
            .map(|&t| vocab.token(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One goal: a domain with its constraint and request slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub domain: String,
    #[serde(default)]
    pub user_slots: Vec<String>,
    #[serde(default)]
    pub request_slots: Vec<String>,
    #[serde(default)]
    pub book: bool,
}

/// Closed inventories the goal encoding is laid out over.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalSchema {
    pub domains: Vec<String>,
    pub user_slots: Vec<String>,
    pub request_slots: Vec<String>,
}

impl GoalSchema {
    pub fn validate(&self) -> Result<()> {
        for (field, list) in [
            ("domains", &self.domains),
            ("user_slots", &self.user_slots),
            ("request_slots", &self.request_slots),
        ] {
            if list.is_empty() {
                return Err(Error::Schema(format!("{field} must be non-empty")));
            }
            let unique: BTreeSet<&String> = list.iter().collect();
            if unique.len() != list.len() {
                return Err(Error::Schema(format!("{field} contains duplicates")));
            }
        }
        Ok(())
    }

    /// Width of [`encode_goal`]'s output:
    /// `|domains| + |user_slots| + |request_slots| + 1`.
    pub fn encoding_dim(&self) -> usize {
        self.domains.len() + self.user_slots.len() + self.request_slots.len() + 1
    }

    /// Binary layout: domain one-hot, user-slot multi-hot, request-slot
    /// multi-hot, book flag.
    pub fn encode_goal(&self, goal: &Goal) -> Result<Vec<u8>> {
        let mut bits = vec![0u8; self.encoding_dim()];
        let d = self
            .domains
            .iter()
            .position(|x| *x == goal.domain)
            .ok_or_else(|| Error::Schema(format!("unknown domain {:?}", goal.domain)))?;
        bits[d] = 1;
        let mut offset = self.domains.len();
        for s in &goal.user_slots {
            let i = self
                .user_slots
                .iter()
                .position(|x| x == s)
                .ok_or_else(|| Error::Schema(format!("unknown user slot {s:?}")))?;
            bits[offset + i] = 1;
        }
        offset += self.user_slots.len();
        for s in &goal.request_slots {
            let i = self
                .request_slots
                .iter()
                .position(|x| x == s)
                .ok_or_else(|| Error::Schema(format!("unknown request slot {s:?}")))?;
            bits[offset + i] = 1;
        }
        offset += self.request_slots.len();
        bits[offset] = u8::from(goal.book);
        Ok(bits)
    }

    fn validate_goal(&self, goal: &Goal) -> Result<()> {
        for (field, list, inventory) in [
            ("user_slots", &goal.user_slots, &self.user_slots),
            ("request_slots", &goal.request_slots, &self.request_slots),
        ] {
            let unique: BTreeSet<&String> = list.iter().collect();
            if unique.len() != list.len() {
                return Err(Error::Schema(format!("goal {field} contains duplicates")));
            }
            for s in list {
                if !inventory.contains(s) {
                    return Err(Error::Schema(format!("unknown {field} entry {s:?}")));
                }
            }
        }
        if !self.domains.contains(&goal.domain) {
            return Err(Error::Schema(format!("unknown domain {:?}", goal.domain)));
        }
        Ok(())
    }
}

/// Token table. Ids 0..6 are reserved; `vocab.txt` line `k` is id `k + 6`.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds from the non-reserved token list.
    pub fn new(content_tokens: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(content_tokens);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!(
                    "token {i} {t:?} is empty or contains whitespace"
                )));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Tokens after the reserved block, in id order.
    pub fn content_vocab(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// Whitespace-tokenizes `text`; unknown tokens become `<unk>` and are
    /// counted. Reserved surface forms are rejected.
    pub fn encode_text(&self, text: &str) -> Result<(Vec<TokenId>, usize)> {
        let mut ids = Vec::new();
        let mut unk = 0;
        for word in text.split_whitespace() {
            match self.id(word) {
                Some(id) if (id as usize) < RESERVED.len() => {
                    return Err(Error::Vocab(format!(
                        "reserved token {word:?} appears in text"
                    )));
                }
                Some(id) => ids.push(id),
                None => {
                    ids.push(UNK);
                    unk += 1;
                }
            }
        }
        Ok((ids, unk))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub goals: Vec<Goal>,
    pub turns: Vec<Utterance>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Valid,
    Test,
}

impl SplitKind {
    pub fn file_name(self) -> &'static str {
        match self {
            SplitKind::Train => "train.jsonl",
            SplitKind::Valid => "valid.jsonl",
            SplitKind::Test => "test.jsonl",
        }
    }

    pub fn parse(s: &str) -> Option<SplitKind> {
        match s {
            "train" => Some(SplitKind::Train),
            "valid" => Some(SplitKind::Valid),
            "test" => Some(SplitKind::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub schema: GoalSchema,
    pub vocab: Vocabulary,
    pub train: Vec<Dialogue>,
    pub valid: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

impl Corpus {
    pub fn split(&self, kind: SplitKind) -> &[Dialogue] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Valid => &self.valid,
            SplitKind::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    /// Dialogue counts per split: train, valid, test.
    pub dialogues: [usize; 3],
    /// Dialogues that lost turns to the turn cap.
    pub truncated_dialogues: usize,
    /// Utterances that lost tokens to the length cap.
    pub truncated_utterances: usize,
    /// Tokens mapped to `<unk>`.
    pub unk_tokens: usize,
}

#[derive(Serialize, Deserialize)]
struct TurnRecord {
    role: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct DialogueRecord {
    id: String,
    goals: Vec<Goal>,
    turns: Vec<TurnRecord>,
}

fn record_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Record {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn build_dialogue(
    record: DialogueRecord,
    schema: &GoalSchema,
    vocab: &Vocabulary,
    caps: Caps,
    stats: &mut LoadStats,
) -> Result<Dialogue> {
    let id = record.id;
    let fail = |msg: String| Error::Dialogue {
        id: id.clone(),
        msg,
    };
    if id.is_empty() {
        return Err(Error::Dialogue {
            id: "<empty>".into(),
            msg: "empty id".into(),
        });
    }
    if record.goals.is_empty() {
        return Err(fail("no goals".into()));
    }
    for goal in &record.goals {
        schema
            .validate_goal(goal)
            .map_err(|e| fail(e.to_string()))?;
    }
    if record.turns.len() < 2 {
        return Err(fail(format!("{} turns, need at least 2", record.turns.len())));
    }
    let mut turns = Vec::new();
    for (i, t) in record.turns.iter().enumerate() {
        let role = Role::parse(&t.role)
            .ok_or_else(|| fail(format!("turn {i}: bad role {:?}", t.role)))?;
        let expected = if i % 2 == 0 { Role::User } else { Role::Agent };
        if role != expected {
            return Err(fail(format!(
                "turn {i}: expected {expected} (roles alternate starting with user), got {role}"
            )));
        }
        let (mut tokens, unk) = vocab.encode_text(&t.text).map_err(|e| {
            fail(format!("turn {i}: {e}"))
        })?;
        stats.unk_tokens += unk;
        if tokens.len() > caps.max_seq_len - 1 {
            tokens.truncate(caps.max_seq_len - 1);
            stats.truncated_utterances += 1;
        }
        tokens.push(EOS);
        turns.push(Utterance { role, tokens });
    }
    if turns.len() > caps.max_turns {
        turns.truncate(caps.max_turns);
        stats.truncated_dialogues += 1;
    }
    Ok(Dialogue {
        id,
        goals: record.goals,
        turns,
    })
}

fn load_split(
    path: &Path,
    schema: &GoalSchema,
    vocab: &Vocabulary,
    caps: Caps,
    stats: &mut LoadStats,
) -> Result<Vec<Dialogue>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = fs::File::open(path).map_err(|e| record_err(path, 0, e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| record_err(path, i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DialogueRecord = serde_json::from_str(&line)
            .map_err(|e| record_err(path, i + 1, e.to_string()))?;
        let dialogue = build_dialogue(record, schema, vocab, caps, stats)
            .map_err(|e| record_err(path, i + 1, e.to_string()))?;
        out.push(dialogue);
    }
    Ok(out)
}

/// Loads a corpus directory. `train.jsonl` is required; the other splits
/// default to empty.
pub fn load_corpus(dir: &Path, caps: Caps) -> Result<(Corpus, LoadStats)> {
    let schema_path = dir.join("schema.json");
    let schema_text =
        fs::read_to_string(&schema_path).map_err(|e| record_err(&schema_path, 0, e.to_string()))?;
    let schema: GoalSchema = serde_json::from_str(&schema_text)
        .map_err(|e| record_err(&schema_path, 0, e.to_string()))?;
    schema.validate()?;

    let vocab_path = dir.join("vocab.txt");
    let vocab_text =
        fs::read_to_string(&vocab_path).map_err(|e| record_err(&vocab_path, 0, e.to_string()))?;
    let mut content = Vec::new();
    for (i, line) in vocab_text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            return Err(record_err(&vocab_path, i + 1, "empty token"));
        }
        content.push(t.to_string());
    }
    let vocab = Vocabulary::new(content)?;

    let train_path = dir.join(SplitKind::Train.file_name());
    if !train_path.exists() {
        return Err(record_err(&train_path, 0, "missing file"));
    }
    let mut stats = LoadStats::default();
    let train = load_split(&train_path, &schema, &vocab, caps, &mut stats)?;
    let valid = load_split(
        &dir.join(SplitKind::Valid.file_name()),
        &schema,
        &vocab,
        caps,
        &mut stats,
    )?;
    let test = load_split(
        &dir.join(SplitKind::Test.file_name()),
        &schema,
        &vocab,
        caps,
        &mut stats,
    )?;
    stats.dialogues = [train.len(), valid.len(), test.len()];
    Ok((
        Corpus {
            schema,
            vocab,
            train,
            valid,
            test,
        },
        stats,
    ))
}

fn dialogue_to_record(d: &Dialogue, vocab: &Vocabulary) -> DialogueRecord {
    DialogueRecord {
        id: d.id.clone(),
        goals: d.goals.clone(),
        turns: d
            .turns
            .iter()
            .map(|u| TurnRecord {
                role: u.role.as_str().to_string(),
                text: u.text(vocab),
            })
            .collect(),
    }
}

/// Writes `corpus` as a corpus directory (creating it if needed).
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let schema_json = serde_json::to_string_pretty(&corpus.schema)?;
    fs::write(dir.join("schema.json"), schema_json + "\n")?;

    let mut vocab_txt = String::new();
    for t in corpus.vocab.content_vocab() {
        vocab_txt.push_str(t);
        vocab_txt.push('\n');
    }
    fs::write(dir.join("vocab.txt"), vocab_txt)?;

    for kind in [SplitKind::Train, SplitKind::Valid, SplitKind::Test] {
        let mut file = fs::File::create(dir.join(kind.file_name()))?;
        for d in corpus.split(kind) {
            let record = dialogue_to_record(d, &corpus.vocab);
            serde_json::to_writer(&mut file, &record)?;
            file.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Surface forms like `[hotel_phone]`: delexicalized slot values.
pub fn is_slot_token(surface: &str) -> bool {
    surface.len() > 2 && surface.starts_with('[') && surface.ends_with(']')
}

/// Set of slot surfaces appearing in `tokens`.
pub fn extract_slots(tokens: &[TokenId], vocab: &Vocabulary) -> BTreeSet<String> {
    tokens
        .iter()
        .map(|&t| vocab.token(t))
        .filter(|s| is_slot_token(s))
        .map(str::to_string)
        .collect()
}

/// Reads a `token v1 .. vd` text file of pretrained vectors. Returns one
/// entry per vocabulary id; tokens without a vector get `None`, file tokens
/// outside the vocabulary are skipped.
pub fn load_embeddings(path: &Path, vocab: &Vocabulary, dim: usize) -> Result<Vec<Option<Vec<f32>>>> {
    let text = fs::read_to_string(path).map_err(|e| record_err(path, 0, e.to_string()))?;
    let mut out: Vec<Option<Vec<f32>>> = vec![None; vocab.len()];
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().ok_or_else(|| record_err(path, i + 1, "empty line"))?;
        let values: Vec<f32> = parts
            .map(|p| {
                p.parse::<f32>()
                    .map_err(|e| record_err(path, i + 1, format!("bad value {p:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(record_err(
                path,
                i + 1,
                format!("expected {dim} values, got {}", values.len()),
            ));
        }
        if let Some(id) = vocab.id(token) {
            out[id as usize] = Some(values);
        }
    }
    Ok(out)
}
