//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use varnn::cells::CellKind;
use varnn::checkpoint::{Checkpoint, CheckpointHeader};
use varnn::corpus::{score, Sequence, Vocabulary};
use varnn::gradcheck::{check, GradcheckSpec};
use varnn::math::Rng;
use varnn::network::{forward_sequence, sample_mask_set, Direction, Mode, ModelConfig, ModelParams, Regime};
use varnn::synth;
use varnn::training::{bptt, evaluate, train, train_sequence_traced, TrainConfig};

const DIRECTIONS: [Direction; 2] = [Direction::Uni, Direction::Bi];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 7] = [
        ("gradient oracle", gradient_oracle),
        ("regime collapse at p=0", regime_collapse),
        ("overfit smoke test", overfit),
        ("scorer oracle", scorer_oracle),
        ("desk-scale trends", trends),
        ("determinism", determinism),
        ("mask sharing", mask_sharing),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {} [{status}] {name} ({:.1}s): {}",
            i + 1,
            start.elapsed().as_secs_f64(),
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn small_config(
    cell: CellKind,
    direction: Direction,
    vocab: usize,
    labels: usize,
    dim: usize,
) -> ModelConfig {
    ModelConfig {
        embed_dim: dim,
        hidden_dim: dim,
        label_count: labels,
        regime: Regime::None,
        ..ModelConfig::new(cell, direction, vocab)
    }
}

/// Finite differences with step 1e-5, tolerance 1e-4, T=4, E=H=5, L=3, five
/// seeds, every cell and direction, masks frozen.
fn gradient_oracle() -> Verdict {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut combos = 0;
    for seed in 1..=5 {
        let spec = GradcheckSpec {
            seed,
            ..GradcheckSpec::default()
        };
        assert_eq!(
            (spec.seq_len, spec.embed_dim, spec.hidden_dim, spec.label_count),
            (4, 5, 5, 3)
        );
        assert_eq!((spec.step, spec.tolerance), (1e-5, 1e-4));
        for cell in CellKind::ALL {
            for dir in DIRECTIONS {
                for regime in [Regime::None, Regime::Variational, Regime::Naive] {
                    let r = check(cell, dir, regime, &spec, None).expect("gradcheck runs");
                    combos += 1;
                    if r.max_rel_error() > worst.0 || r.max_rel_error().is_nan() {
                        worst = (r.max_rel_error(), format!("seed {seed} {r}"));
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst.0 < 1e-4 && elapsed < Duration::from_secs(60),
        format!("{combos} checks, max rel error {:.3e} ({})", worst.0, worst.1),
    )
}

fn bits(p: &ModelParams) -> Vec<u64> {
    p.tensors()
        .iter()
        .flat_map(|(_, _, t)| t.values().iter().map(|v| v.to_bits()))
        .collect()
}

/// Variational with p=0 against no dropout, forward and backward.
fn regime_collapse() -> Verdict {
    let mut rng = Rng::new(2024);
    let mut mismatches = 0;
    for i in 0..100 {
        let cell = CellKind::ALL[i % 3];
        let dir = DIRECTIONS[(i / 3) % 2];
        let none = small_config(cell, dir, 12, 4, 6);
        let var = ModelConfig {
            regime: Regime::Variational,
            drop_prob: 0.0,
            ..none.clone()
        };
        let params = ModelParams::init(&none, &mut rng).unwrap();
        let len = 1 + rng.below(12);
        let tokens: Vec<usize> = (0..len).map(|_| rng.below(12)).collect();
        let labels: Vec<usize> = (0..len).map(|_| rng.below(4)).collect();

        let (la, ta) = forward_sequence(&params, &none, &tokens, None, None, Mode::Train).unwrap();
        let masks = sample_mask_set(&var, &mut rng).unwrap();
        let (lb, tb) = forward_sequence(&params, &var, &tokens, Some(&masks), None, Mode::Train).unwrap();
        let (loss_a, ga) = bptt(&params, &la, &ta, &labels).unwrap();
        let (loss_b, gb) = bptt(&params, &lb, &tb, &labels).unwrap();

        let logits_equal = la.len() == lb.len()
            && la
                .iter()
                .zip(&lb)
                .all(|(a, b)| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        if !logits_equal || loss_a.to_bits() != loss_b.to_bits() || bits(&ga) != bits(&gb) {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("{mismatches}/100 sequences differ"))
}

/// Every architecture, regime none, lr 0.1, reaches training F = 1 on eight
/// synthetic sentences within 300 epochs.
fn overfit() -> Verdict {
    let raw = synth::generate(8, 11);
    let vocab = Vocabulary::build(&raw, 1, false);
    let data = vocab.encode_corpus(&raw).unwrap();
    let mut lines = Vec::new();
    let mut pass = true;
    for cell in CellKind::ALL {
        for dir in DIRECTIONS {
            let start = Instant::now();
            let config = small_config(cell, dir, vocab.word_count(), vocab.label_count(), 32);
            let cfg = TrainConfig {
                learning_rate: 0.1,
                epochs: 300,
                patience: 300,
                seed: 1,
                ..TrainConfig::default()
            };
            let (epoch, f) = match overfit_until_perfect(&config, &cfg, &data, &vocab) {
                Some(e) => (e, 1.0),
                None => (0, 0.0),
            };
            let ok = f == 1.0 && start.elapsed() < Duration::from_secs(120);
            pass &= ok;
            lines.push(if ok {
                format!("{cell}/{dir} F=1 at epoch {epoch}")
            } else {
                format!("{cell}/{dir} did not reach F=1")
            });
        }
    }
    verdict(pass, lines.join(", "))
}

/// First epoch (1-based) after which the training set is tagged perfectly.
fn overfit_until_perfect(
    config: &ModelConfig,
    cfg: &TrainConfig,
    data: &[Sequence],
    vocab: &Vocabulary,
) -> Option<usize> {
    // Train once with the full budget and selection on the training set,
    // then read the first perfect epoch off the history.
    let outcome = train(config, data, data, vocab, cfg).ok()?;
    let first = outcome
        .history
        .epochs
        .iter()
        .find(|r| r.validation.f_measure == 1.0)?
        .epoch;
    (evaluate(&outcome.params, config, data, vocab).ok()?.f_measure == 1.0).then_some(first)
}

/// All chunks by direct scan over every `(start, end, type)` triple.
fn brute_chunks(labels: &[String]) -> BTreeSet<(String, usize, usize)> {
    let kind_of = |l: &str| l.get(2..).unwrap_or("").to_string();
    let mut out = BTreeSet::new();
    let n = labels.len();
    for start in 0..n {
        let l = &labels[start];
        if l == "O" {
            continue;
        }
        let kind = kind_of(l);
        let opens = l.starts_with("B-")
            || start == 0
            || labels[start - 1] == "O"
            || kind_of(&labels[start - 1]) != kind;
        if !opens {
            continue;
        }
        for end in start..n {
            let inner_ok = (start + 1..=end).all(|t| labels[t] == format!("I-{kind}"));
            let closes = end + 1 == n || labels[end + 1] != format!("I-{kind}");
            if inner_ok && closes {
                out.insert((kind.clone(), start, end));
            }
        }
    }
    out
}

/// Chunk P/R/F against the brute-force scan on 200 random pairs.
fn scorer_oracle() -> Verdict {
    const LABELS: [&str; 7] = ["O", "B-a", "I-a", "B-b", "I-b", "B-c", "I-c"];
    let mut rng = Rng::new(77);
    let mut mismatches = 0;
    let mut chunks_seen = 0;
    for _ in 0..200 {
        let len = 1 + rng.below(15);
        let mut draw = || -> Vec<String> {
            (0..len)
                .map(|_| LABELS[rng.below(LABELS.len())].to_string())
                .collect()
        };
        let gold = draw();
        let pred = draw();
        let g = brute_chunks(&gold);
        let p = brute_chunks(&pred);
        chunks_seen += g.len() + p.len();
        let tp = g.intersection(&p).count();
        let precision = if p.is_empty() {
            0.0
        } else {
            tp as f64 / p.len() as f64
        };
        let recall = if g.is_empty() {
            0.0
        } else {
            tp as f64 / g.len() as f64
        };
        let f = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let r = score(&[gold], &[pred]).unwrap();
        if (r.true_positives, r.predicted_count, r.gold_count) != (tp, p.len(), g.len())
            || r.precision != precision
            || r.recall != recall
            || r.f_measure != f
        {
            mismatches += 1;
        }
    }
    verdict(
        mismatches == 0,
        format!("{mismatches}/200 pairs disagree ({chunks_seen} chunks)"),
    )
}

/// Trend reproduction on the bundled corpus, LSTM and GRU, five seeds.
fn trends() -> Verdict {
    let (tr, va, te) = synth::desk_corpus(1);
    let vocab = Vocabulary::build(&tr, 1, false);
    let (tr, va, te) = (
        vocab.encode_corpus(&tr).unwrap(),
        vocab.encode_corpus(&va).unwrap(),
        vocab.encode_corpus(&te).unwrap(),
    );
    let cells = [CellKind::Lstm, CellKind::Gru];
    let regimes = [Regime::Naive, Regime::Variational];
    let mut mean = std::collections::HashMap::new();
    let mut table = Vec::new();
    for cell in cells {
        for dir in DIRECTIONS {
            for regime in regimes {
                let mut total = 0.0;
                for seed in 1..=5 {
                    let config = ModelConfig {
                        regime,
                        drop_prob: 0.25,
                        ..small_config(cell, dir, vocab.word_count(), vocab.label_count(), 32)
                    };
                    let cfg = TrainConfig {
                        epochs: 15,
                        seed,
                        ..TrainConfig::default()
                    };
                    let out = train(&config, &tr, &va, &vocab, &cfg).unwrap();
                    total += evaluate(&out.params, &config, &te, &vocab).unwrap().f_measure;
                }
                let avg = total / 5.0;
                table.push(format!("{regime} {dir} {cell} {avg:.4}"));
                mean.insert((cell, dir, regime), avg);
            }
        }
    }
    let mut failures = Vec::new();
    for cell in cells {
        for regime in regimes {
            if mean[&(cell, Direction::Bi, regime)] < mean[&(cell, Direction::Uni, regime)] {
                failures.push(format!("{regime} {cell}: bi < uni"));
            }
        }
        let pooled = |r| (mean[&(cell, Direction::Uni, r)] + mean[&(cell, Direction::Bi, r)]) / 2.0;
        if pooled(Regime::Variational) < pooled(Regime::Naive) {
            failures.push(format!(
                "{cell}: variational {:.4} < naive {:.4}",
                pooled(Regime::Variational),
                pooled(Regime::Naive)
            ));
        }
    }
    let detail = format!(
        "test F: {}{}",
        table.join(", "),
        if failures.is_empty() {
            String::new()
        } else {
            format!("; violated: {}", failures.join(", "))
        }
    );
    verdict(failures.is_empty(), detail)
}

fn trained_checkpoint(cell: CellKind, dir: Direction, regime: Regime) -> (Vec<u8>, String) {
    let (tr, va, te) = synth::splits(150, 40, 40, 5, &synth::DESK_NOISE);
    let vocab = Vocabulary::build(&tr, 1, false);
    let config = ModelConfig {
        regime,
        drop_prob: 0.5,
        ..small_config(cell, dir, vocab.word_count(), vocab.label_count(), 12)
    };
    let cfg = TrainConfig {
        epochs: 3,
        seed: 42,
        ..TrainConfig::default()
    };
    let train_set = vocab.encode_corpus(&tr).unwrap();
    let val_set = vocab.encode_corpus(&va).unwrap();
    let out = train(&config, &train_set, &val_set, &vocab, &cfg).unwrap();
    let line = evaluate(&out.params, &config, &vocab.encode_corpus(&te).unwrap(), &vocab)
        .unwrap()
        .to_string();
    let header = CheckpointHeader {
        config,
        vocabulary: vocab,
        train_config: cfg.clone(),
        seed: cfg.seed,
        best_validation_f: out.best_validation.f_measure,
    };
    let bytes = Checkpoint::new(header, out.params).unwrap().to_bytes().unwrap();
    (bytes, line)
}

/// Two identical trainings produce identical checkpoint bytes and eval lines.
fn determinism() -> Verdict {
    let mut differing = Vec::new();
    for (cell, dir, regime) in [
        (CellKind::Gru, Direction::Bi, Regime::Variational),
        (CellKind::Lstm, Direction::Uni, Regime::Naive),
        (CellKind::Vanilla, Direction::Bi, Regime::None),
    ] {
        let (a, la) = trained_checkpoint(cell, dir, regime);
        let (b, lb) = trained_checkpoint(cell, dir, regime);
        if a != b || la != lb {
            differing.push(format!("{regime} {dir} {cell}"));
        }
    }
    verdict(
        differing.is_empty(),
        if differing.is_empty() {
            "3 configurations byte-identical".to_string()
        } else {
            format!("differ: {}", differing.join(", "))
        },
    )
}

/// Mask instances recorded during real training steps on a 10-token sequence.
fn mask_sharing() -> Verdict {
    let seq = Sequence {
        tokens: (0..10).map(|t| t % 7).collect(),
        labels: (0..10).map(|t| t % 3).collect(),
    };
    let cfg = TrainConfig::default();
    let mut detail = Vec::new();
    let mut pass = true;

    for cell in CellKind::ALL {
        let config = ModelConfig {
            regime: Regime::Variational,
            drop_prob: 0.5,
            ..small_config(cell, Direction::Bi, 7, 3, 6)
        };
        let mut rng = Rng::new(3);
        let mut params = ModelParams::init(&config, &mut rng).unwrap();
        let (_, tape) = train_sequence_traced(&mut params, &config, &cfg, &seq, &mut rng).unwrap();
        let c = tape.mask_census();
        let z_x = tape.embed_masks[0].clone().expect("masked");
        let cell_inputs_share_z_x = tape
            .forward
            .iter()
            .chain(&tape.backward)
            .all(|t| t.masks().is_some_and(|m| Arc::ptr_eq(&m.z_x, &z_x)));
        let ok =
            (c.embedding, c.hidden_fwd, c.hidden_bwd, c.decoder) == (1, 1, 1, 1) && cell_inputs_share_z_x;
        pass &= ok;
        detail.push(format!(
            "variational bi {cell}: z_x {} z_h {}+{} z_d {}",
            c.embedding, c.hidden_fwd, c.hidden_bwd, c.decoder
        ));
    }

    let config = ModelConfig {
        embed_dim: 1000,
        hidden_dim: 4,
        regime: Regime::Naive,
        drop_prob: 0.5,
        ..ModelConfig::new(CellKind::Lstm, Direction::Uni, 7)
    };
    let config = ModelConfig {
        label_count: 3,
        ..config
    };
    let mut rng = Rng::new(4);
    let mut params = ModelParams::init(&config, &mut rng).unwrap();
    let (_, tape) = train_sequence_traced(&mut params, &config, &cfg, &seq, &mut rng).unwrap();
    let c = tape.mask_census();
    let masks: Vec<_> = tape.embed_masks.iter().flatten().collect();
    let distinct_values = masks
        .iter()
        .map(|m| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect::<BTreeSet<_>>()
        .len();
    let ok = c.embedding >= 2 && distinct_values >= 2 && c.hidden_fwd == 0 && c.decoder >= 2;
    pass &= ok;
    detail.push(format!(
        "naive E=1000: {} embedding masks ({distinct_values} distinct by value), {} recurrent, {} decoder",
        c.embedding, c.hidden_fwd, c.decoder
    ));
    verdict(pass, detail.join("; "))
}
