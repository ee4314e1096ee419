//! Randomized structural invariants over the numerics, layers, models,
//! generation, corpus, and metric code. Every suite runs at least 200 cases.

mod common;

use std::collections::BTreeSet;

use proptest::collection::vec as pvec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use goaldial_core::corpus::{
    extract_slots, load_corpus, write_corpus, Caps, Corpus, Dialogue, Goal, GoalSchema, Role,
    TokenId, Utterance, Vocabulary, EOS, RESERVED,
};
use goaldial_core::generation::{generate_dialogue, GenerationRequest};
use goaldial_core::graph::Graph;
use goaldial_core::layers::{AdditiveAttention, GruStack};
use goaldial_core::metrics::{bleu, distinct_n, distinct_u, slot_precision_recall};
use goaldial_core::models::{Model, ModelConfig, ModelKind};
use goaldial_core::params::Params;
use goaldial_core::tensor::Tensor;

const CASES: u32 = 200;

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

// ---------------------------------------------------------------- numerics

proptest! {
    #![proptest_config(cfg(CASES))]

    #[test]
    fn softmax_rows_are_distributions(xs in pvec(-10.0f64..10.0, 1..8)) {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::vector(xs));
        let s = g.softmax(x, 0).unwrap();
        let out = g.value(s).data();
        for &w in out {
            prop_assert!(w >= 0.0);
        }
        let sum: f64 = out.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6, "softmax sum {sum}");
    }

    /// Summing a slice of concat(x, y) routes gradient 1 to exactly the
    /// sliced positions and 0 elsewhere: add/concat/slice conserve mass.
    #[test]
    fn grad_mass_conserved_through_add_concat_slice(
        xs in pvec(-2.0f64..2.0, 1..5),
        ys in pvec(-2.0f64..2.0, 1..5),
        pick in 0.0f64..1.0,
        len_frac in 0.0f64..1.0,
    ) {
        let n = xs.len() + ys.len();
        let start = (pick * (n - 1) as f64) as usize;
        let len = 1 + (len_frac * (n - start - 1) as f64) as usize;
        let mut params: Params<f64> = Params::new();
        let px = params.add("x", Tensor::vector(xs.clone()));
        let py = params.add("y", Tensor::vector(ys.clone()));
        let mut g: Graph<f64> = Graph::new();
        let vx = g.param(&params, px);
        let vy = g.param(&params, py);
        let cat = g.concat(&[vx, vy]).unwrap();
        let doubled = g.add(cat, cat).unwrap();
        let window = g.slice(doubled, start, len).unwrap();
        let loss = g.sum(window).unwrap();
        g.backward(loss, &mut params).unwrap();
        let gx = params.grad(px).data().to_vec();
        let gy = params.grad(py).data().to_vec();
        let all: Vec<f64> = gx.iter().chain(gy.iter()).copied().collect();
        for (i, &gi) in all.iter().enumerate() {
            let expected = if i >= start && i < start + len { 2.0 } else { 0.0 };
            prop_assert_eq!(gi, expected, "position {}", i);
        }
        let mass: f64 = all.iter().sum();
        prop_assert_eq!(mass, 2.0 * len as f64);
    }

    #[test]
    fn attention_weights_normalized_and_permutation_equivariant(
        seed in 0u64..1_000_000,
        dim in 1usize..5,
        kvs in pvec(pvec(-3.0f64..3.0, 4), 1..6),
        query in pvec(-3.0f64..3.0, 4),
        rot in 0usize..6,
    ) {
        let mut params: Params<f64> = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let att = AdditiveAttention::register(&mut params, &mut rng, "att", dim, dim, 3);
        let run = |order: &[usize]| {
            let mut g: Graph<f64> = Graph::new();
            let q = g.constant(Tensor::vector(query[..dim].to_vec()));
            let keys: Vec<_> = order
                .iter()
                .map(|&i| g.constant(Tensor::vector(kvs[i][..dim].to_vec())))
                .collect();
            let values: Vec<_> = order
                .iter()
                .map(|&i| {
                    let mut v = kvs[i][..dim].to_vec();
                    v.reverse();
                    g.constant(Tensor::vector(v))
                })
                .collect();
            let (ctx, w) = att.attend(&mut g, &params, q, &keys, &values).unwrap();
            (g.value(ctx).data().to_vec(), g.value(w).data().to_vec())
        };

        let order: Vec<usize> = (0..kvs.len()).collect();
        let (ctx, weights) = run(&order);
        prop_assert_eq!(weights.len(), kvs.len());
        for &w in &weights {
            prop_assert!(w >= 0.0);
        }
        let sum: f64 = weights.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6, "weight sum {sum}");

        let rotated: Vec<usize> = (0..kvs.len())
            .map(|i| (i + rot) % kvs.len())
            .collect();
        let (ctx2, weights2) = run(&rotated);
        for (i, &src) in rotated.iter().enumerate() {
            prop_assert!((weights2[i] - weights[src]).abs() < 1e-9);
        }
        for (a, b) in ctx.iter().zip(&ctx2) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    /// Convex gating keeps every state component strictly inside (-1, 1)
    /// whenever the previous state starts there.
    #[test]
    fn gru_state_stays_inside_unit_box(
        seed in 0u64..1_000_000,
        layers in 1usize..3,
        inputs in pvec(pvec(-1.0f64..1.0, 3), 1..4),
    ) {
        let mut params: Params<f64> = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = GruStack::register(&mut params, &mut rng, "gru", 3, 4, layers);
        let mut g: Graph<f64> = Graph::new();
        let mut state = stack.zero_state(&mut g);
        for step in &inputs {
            let x = g.constant(Tensor::vector(step.clone()));
            state = stack.step(&mut g, &params, x, &state).unwrap();
            for layer in &state {
                for &h in g.value(*layer).data() {
                    prop_assert!(h > -1.0 && h < 1.0, "state component {h}");
                }
            }
        }
    }
}

// ------------------------------------------------------------------ models

fn tiny_schema() -> GoalSchema {
    GoalSchema {
        domains: vec!["alpha".into(), "beta".into(), "gamma".into()],
        user_slots: vec!["area".into(), "price".into()],
        request_slots: vec!["phone".into(), "address".into()],
    }
}

fn goal_strategy() -> impl Strategy<Value = Goal> {
    (0usize..3, proptest::bits::u8::between(0, 4), any::<bool>()).prop_map(|(d, bits, book)| {
        let schema = tiny_schema();
        Goal {
            domain: schema.domains[d].clone(),
            user_slots: schema
                .user_slots
                .iter()
                .enumerate()
                .filter(|(i, _)| bits & (1 << i) != 0)
                .map(|(_, s)| s.clone())
                .collect(),
            request_slots: schema
                .request_slots
                .iter()
                .enumerate()
                .filter(|(i, _)| bits & (1 << (i + 2)) != 0)
                .map(|(_, s)| s.clone())
                .collect(),
            book,
        }
    })
}

fn tiny_model(kind: ModelKind, vocab: usize, seed: u64) -> Model<f64> {
    let schema = tiny_schema();
    let mut cfg = ModelConfig::small(vocab, schema.encoding_dim(), 4);
    cfg.max_turns = 5;
    cfg.max_seq_len = 6;
    Model::new(kind, cfg, seed).unwrap()
}

fn utterance(role: Role, content: &[TokenId]) -> Utterance {
    let mut tokens = content.to_vec();
    tokens.push(EOS);
    Utterance { role, tokens }
}

proptest! {
    #![proptest_config(cfg(CASES))]

    /// The goal embedding is an order-free sum of per-goal terms: embedding
    /// a list equals summing singleton embeddings, a permuted list embeds
    /// bit-identically, and a duplicated goal contributes exactly twice.
    #[test]
    fn goal_embedding_additive_and_permutation_invariant(
        seed in 0u64..1_000_000,
        g1 in goal_strategy(),
        g2 in goal_strategy(),
    ) {
        let schema = tiny_schema();
        let model = tiny_model(ModelKind::Gduha, 12, seed);
        let Model::Gduha(m) = &model else { unreachable!() };
        let embed = |goals: &[Goal]| {
            let mut g: Graph<f64> = Graph::new();
            let v = m.embed_goals(&mut g, &schema, goals).unwrap();
            g.value(v).data().to_vec()
        };

        let single1 = embed(std::slice::from_ref(&g1));
        let single2 = embed(std::slice::from_ref(&g2));
        let pair = embed(&[g1.clone(), g2.clone()]);
        let swapped = embed(&[g2.clone(), g1.clone()]);
        prop_assert_eq!(&pair, &swapped, "permutation changed the embedding");
        for i in 0..pair.len() {
            prop_assert_eq!(pair[i], single1[i] + single2[i], "component {}", i);
        }

        let twice = embed(&[g1.clone(), g1.clone()]);
        for i in 0..twice.len() {
            prop_assert_eq!(twice[i], 2.0 * single1[i]);
        }
    }

    /// A dialogue containing only a user turn leaves every agent-branch
    /// parameter without gradient; the user branch trains.
    #[test]
    fn branch_gradients_stay_separated(
        seed in 0u64..1_000_000,
        content in pvec(0u32..6, 1..4),
        goal in goal_strategy(),
    ) {
        let schema = tiny_schema();
        let mut model = tiny_model(ModelKind::Gduha, 12, seed);
        let tokens: Vec<TokenId> =
            content.iter().map(|c| RESERVED.len() as TokenId + c).collect();
        let dialogue = Dialogue {
            id: "p".into(),
            goals: vec![goal],
            turns: vec![utterance(Role::User, &tokens)],
        };
        let mut g: Graph<f64> = Graph::new();
        let loss = model
            .dialogue_loss(&mut g, &schema, &dialogue, &mut None)
            .unwrap();
        let total = loss.total;
        g.backward(total, model.params_mut()).unwrap();

        let mut user_mass = 0.0f64;
        for (_, entry) in model.params().iter() {
            let mass: f64 = entry.grad.data().iter().map(|x| x.abs()).sum();
            if entry.name.starts_with("agent.") {
                prop_assert_eq!(mass, 0.0, "{} got gradient", &entry.name);
            }
            if entry.name.starts_with("user.") {
                user_mass += mass;
            }
        }
        prop_assert!(user_mass > 0.0, "user branch got no gradient at all");
    }

    /// Teacher-forced likelihoods are proper: per-token NLL is finite and
    /// non-negative for all three models, so exp(-NLL) lands in (0, 1].
    #[test]
    fn dialogue_likelihoods_are_proper(
        seed in 0u64..1_000_000,
        kind_pick in 0usize..3,
        lens in pvec(1usize..4, 1..4),
        goal in goal_strategy(),
    ) {
        let schema = tiny_schema();
        let model = tiny_model(ModelKind::ALL[kind_pick], 12, seed);
        let turns: Vec<Utterance> = lens
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let role = if i % 2 == 0 { Role::User } else { Role::Agent };
                let content: Vec<TokenId> =
                    (0..l).map(|k| (RESERVED.len() + (i + k) % 6) as TokenId).collect();
                utterance(role, &content)
            })
            .collect();
        let dialogue = Dialogue { id: "p".into(), goals: vec![goal], turns };
        let mut g: Graph<f64> = Graph::new();
        let loss = model
            .dialogue_loss(&mut g, &schema, &dialogue, &mut None)
            .unwrap();
        let nll = g.value(loss.nll_sum).item();
        prop_assert!(nll.is_finite());
        prop_assert!(nll >= 0.0);
        let per_token = nll / loss.token_count as f64;
        let likelihood = (-per_token).exp();
        prop_assert!(likelihood > 0.0 && likelihood <= 1.0);
    }
}

// -------------------------------------------------------------- generation

proptest! {
    #![proptest_config(cfg(CASES))]

    /// Structural bounds hold for any weights: the turn cap, the length cap,
    /// strict role alternation for the hierarchical models, a consistent
    /// confusion count for the flat LM, clean utterances, and determinism.
    #[test]
    fn generation_respects_roles_and_caps(
        seed in 0u64..1_000_000,
        kind_pick in 0usize..3,
        seed_content in pvec(0u32..6, 1..4),
        goal in goal_strategy(),
    ) {
        let schema = tiny_schema();
        let kind = ModelKind::ALL[kind_pick];
        let model = tiny_model(kind, 12, seed);
        let tokens: Vec<TokenId> =
            seed_content.iter().map(|c| RESERVED.len() as TokenId + c).collect();
        let req = GenerationRequest::new(
            "p",
            vec![goal],
            utterance(Role::User, &tokens),
        ).unwrap();

        let out = generate_dialogue(&model, &schema, &req).unwrap();
        let cfg = model.config();
        prop_assert!(!out.turns.is_empty());
        prop_assert!(out.turns.len() <= cfg.max_turns, "turn cap broken");
        prop_assert_eq!(out.turns[0].role, Role::User);
        for (i, t) in out.turns.iter().enumerate() {
            prop_assert!(!t.tokens.is_empty());
            prop_assert!(t.tokens.len() <= cfg.max_seq_len, "length cap broken");
            for &tok in &t.tokens {
                prop_assert!(tok != 0 && tok != 1, "PAD/BOS leaked into turn {}", i);
            }
            prop_assert!(
                *t.tokens.last().unwrap() == EOS || t.tokens.len() == cfg.max_seq_len,
                "turn {} neither closed nor at the length cap",
                i
            );
        }
        match kind {
            ModelKind::Gduha | ModelKind::Hred => {
                prop_assert_eq!(out.role_confusions, 0);
                for w in out.turns.windows(2) {
                    prop_assert_eq!(w[1].role, w[0].role.other(), "roles repeated");
                }
            }
            ModelKind::Lmg => {
                let repeats = out
                    .turns
                    .windows(2)
                    .filter(|w| w[1].role == w[0].role)
                    .count();
                prop_assert_eq!(out.role_confusions, repeats);
            }
        }

        let again = generate_dialogue(&model, &schema, &req).unwrap();
        prop_assert_eq!(again.turns, out.turns);
        prop_assert_eq!(again.termination_reason, out.termination_reason);
    }
}

// ------------------------------------------------------------------ corpus

fn word_strategy() -> impl Strategy<Value = String> {
    "[a-z]{2,6}".prop_filter("reserved surface", |w| !RESERVED.contains(&w.as_str()))
}

proptest! {
    #![proptest_config(cfg(CASES))]

    #[test]
    fn goal_encoding_popcount(goal in goal_strategy()) {
        let schema = tiny_schema();
        let bits = schema.encode_goal(&goal).unwrap();
        prop_assert_eq!(bits.len(), schema.encoding_dim());
        let ones: usize = bits.iter().map(|&b| b as usize).sum();
        let expected =
            1 + goal.user_slots.len() + goal.request_slots.len() + goal.book as usize;
        prop_assert_eq!(ones, expected);
    }

    #[test]
    fn slot_extraction_distributes_over_concatenation(
        a in pvec(0usize..6, 0..6),
        b in pvec(0usize..6, 0..6),
    ) {
        let vocab = Vocabulary::new(vec![
            "hello".into(),
            "[hotel_phone]".into(),
            "world".into(),
            "[train_id]".into(),
            "[hotel_area]".into(),
            "stop".into(),
        ]).unwrap();
        let to_ids = |xs: &[usize]| -> Vec<TokenId> {
            xs.iter().map(|&x| (RESERVED.len() + x) as TokenId).collect()
        };
        let ia = to_ids(&a);
        let ib = to_ids(&b);
        let joined: Vec<TokenId> = ia.iter().chain(ib.iter()).copied().collect();
        let union: BTreeSet<String> = extract_slots(&ia, &vocab)
            .union(&extract_slots(&ib, &vocab))
            .cloned()
            .collect();
        prop_assert_eq!(extract_slots(&joined, &vocab), union);
    }

    /// Write → load reproduces the corpus exactly when nothing needs
    /// truncation, and loading what was loaded is a fixed point even when
    /// the caps did truncate.
    #[test]
    fn corpus_round_trip_and_truncation_idempotence(
        words in proptest::collection::btree_set(word_strategy(), 4..10),
        turn_lens in pvec(pvec(1usize..12, 2..6), 1..4),
        book in any::<bool>(),
    ) {
        let words: Vec<String> = words.into_iter().collect();
        let vocab = Vocabulary::new(words.clone()).unwrap();
        let schema = GoalSchema {
            domains: vec!["alpha".into()],
            user_slots: vec!["area".into()],
            request_slots: vec!["phone".into()],
        };
        let goal = Goal {
            domain: "alpha".into(),
            user_slots: vec!["area".into()],
            request_slots: vec![],
            book,
        };
        let dialogues: Vec<Dialogue> = turn_lens
            .iter()
            .enumerate()
            .map(|(d, lens)| Dialogue {
                id: format!("train-{d:04}"),
                goals: vec![goal.clone()],
                turns: lens
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| {
                        let role = if i % 2 == 0 { Role::User } else { Role::Agent };
                        let content: Vec<TokenId> = (0..l)
                            .map(|k| (RESERVED.len() + (d + i + k) % words.len()) as TokenId)
                            .collect();
                        utterance(role, &content)
                    })
                    .collect(),
            })
            .collect();
        let corpus = Corpus {
            schema,
            vocab,
            train: dialogues.clone(),
            valid: dialogues.clone(),
            test: dialogues,
        };

        let dir = tempfile::tempdir().unwrap();
        write_corpus(&corpus, dir.path()).unwrap();

        // Generous caps: nothing truncated, so the round trip is exact.
        let wide = Caps { max_turns: 22, max_seq_len: 36 };
        let (loaded, stats) = load_corpus(dir.path(), wide).unwrap();
        prop_assert_eq!(stats.truncated_utterances, 0);
        prop_assert_eq!(stats.unk_tokens, 0);
        prop_assert_eq!(&loaded.train, &corpus.train);
        prop_assert_eq!(&loaded.valid, &corpus.valid);
        prop_assert_eq!(&loaded.test, &corpus.test);

        // Tight caps force truncation; re-saving and re-loading the capped
        // corpus must then be a fixed point.
        let tight = Caps { max_turns: 3, max_seq_len: 5 };
        let (capped, _) = load_corpus(dir.path(), tight).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        write_corpus(&capped, dir2.path()).unwrap();
        let (again, stats2) = load_corpus(dir2.path(), tight).unwrap();
        prop_assert_eq!(stats2.truncated_utterances, 0);
        prop_assert_eq!(stats2.truncated_dialogues, 0);
        prop_assert_eq!(&again.train, &capped.train);
    }
}

// ----------------------------------------------------------------- metrics

proptest! {
    #![proptest_config(cfg(CASES))]

    #[test]
    fn bleu_of_identical_sequences_is_one(
        xs in pvec(0u32..30, 1..12),
        n in 1usize..5,
    ) {
        prop_assert_eq!(bleu(&xs, &xs, n), 1.0);
    }

    #[test]
    fn bleu_is_invariant_under_token_renaming(
        cand in pvec(0u32..10, 0..10),
        reference in pvec(0u32..10, 1..10),
        n in 1usize..5,
        offset in 1u32..100,
    ) {
        let rename = |xs: &[u32]| -> Vec<u32> { xs.iter().map(|&x| x * 131 + offset).collect() };
        let direct = bleu(&cand, &reference, n);
        let renamed = bleu(&rename(&cand), &rename(&reference), n);
        prop_assert_eq!(direct, renamed);
    }

    #[test]
    fn bleu_agrees_with_oracle(
        cand in pvec(0u32..8, 0..12),
        reference in pvec(0u32..8, 1..12),
        n in 1usize..5,
    ) {
        let got = bleu(&cand, &reference, n);
        let want = common::oracle_bleu(&cand, &reference, n);
        prop_assert!((got - want).abs() < 1e-9, "bleu {got} vs oracle {want}");
    }

    #[test]
    fn distinct_ratios_live_in_unit_interval(
        utts in pvec(pvec(0u32..6, 1..6), 1..8),
    ) {
        for n in 1..=2 {
            let d = distinct_n(&utts, n);
            if utts.iter().any(|u| u.len() >= n) {
                prop_assert!(d > 0.0 && d <= 1.0);
            } else {
                prop_assert_eq!(d, 0.0);
            }
            prop_assert!((d - common::oracle_distinct_n(&utts, n)).abs() < 1e-9);
        }
        let du = distinct_u(&utts);
        prop_assert!(du > 0.0 && du <= 1.0);
        prop_assert!((du - common::oracle_distinct_u(&utts)).abs() < 1e-9);
        let all_distinct =
            utts.iter().collect::<BTreeSet<_>>().len() == utts.len();
        prop_assert_eq!(du == 1.0, all_distinct, "distinct-U = 1 iff no repeats");
    }

    /// Precision of A against B is the recall of B against A: the
    /// intersection is symmetric and only the denominator swaps.
    #[test]
    fn slot_precision_recall_swap_symmetry(
        a in proptest::collection::btree_set("[a-d]_[a-d]", 0..6),
        b in proptest::collection::btree_set("[a-d]_[a-d]", 0..6),
    ) {
        let a: BTreeSet<String> = a.into_iter().collect();
        let b: BTreeSet<String> = b.into_iter().collect();
        let (p_ab, r_ab) = slot_precision_recall(&a, &b);
        let (p_ba, r_ba) = slot_precision_recall(&b, &a);
        prop_assert_eq!(p_ab, r_ba);
        prop_assert_eq!(r_ab, p_ba);

        let av: Vec<&str> = a.iter().map(|s| s.as_str()).collect();
        let bv: Vec<&str> = b.iter().map(|s| s.as_str()).collect();
        let (op, or) = common::oracle_slot_pr(&av, &bv);
        prop_assert!((p_ab - op).abs() < 1e-9);
        prop_assert!((r_ab - or).abs() < 1e-9);
    }
}
