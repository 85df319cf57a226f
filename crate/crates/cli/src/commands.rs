use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::Path;

use varnn::cells::{CellKind, InjectedFault};
use varnn::checkpoint::{Checkpoint, CheckpointHeader};
use varnn::corpus::{parse_conll, split_train_val, RawCorpus, Vocabulary};
use varnn::gradcheck::{check_all, GradcheckSpec};
use varnn::network::{predict, Direction, ModelConfig, Regime};
use varnn::synth::{self, Noise};
use varnn::training::{evaluate, train as train_model, TrainConfig};
use varnn::Error;

use crate::{EvalArgs, GradcheckArgs, Hyper, SynthArgs, TagArgs, TrainArgs};

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn code(&self) -> u8 {
        self.code
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NonFinite { .. } => 3,
            Error::Schema(_) | Error::Label(_) => 4,
            _ => 2,
        };
        CliError::new(code, e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::new(2, format!("{}: {e}", path.display()))
}

fn read_corpus(path: &Path) -> CliResult<RawCorpus> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_conll(&text).map_err(|e| io_err(path, e))
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => io_err(path, io),
        other => {
            let mut err = CliError::from(other);
            err.message = format!("{}: {}", path.display(), err.message);
            err
        }
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn read_hyper(path: &Path) -> CliResult<Hyper> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

/// Flags first, then the config file, then the built-in default.
fn merge(flags: Hyper, file: Hyper) -> Hyper {
    Hyper {
        cell: flags.cell.or(file.cell),
        direction: flags.direction.or(file.direction),
        regime: flags.regime.or(file.regime),
        p: flags.p.or(file.p),
        embed_dim: flags.embed_dim.or(file.embed_dim),
        hidden_dim: flags.hidden_dim.or(file.hidden_dim),
        label_count: flags.label_count.or(file.label_count),
        mask_gru_candidate_hidden: flags.mask_gru_candidate_hidden || file.mask_gru_candidate_hidden,
        lr: flags.lr.or(file.lr),
        weight_decay: flags.weight_decay.or(file.weight_decay),
        clip: flags.clip.or(file.clip),
        epochs: flags.epochs.or(file.epochs),
        patience: flags.patience.or(file.patience),
        min_count: flags.min_count.or(file.min_count),
        lowercase: flags.lowercase || file.lowercase,
    }
}

fn model_config(h: &Hyper, vocab: &Vocabulary) -> CliResult<ModelConfig> {
    let base = ModelConfig::new(
        h.cell.unwrap_or(CellKind::Gru),
        h.direction.unwrap_or(Direction::Bi),
        vocab.word_count(),
    );
    let config = ModelConfig {
        embed_dim: h.embed_dim.unwrap_or(base.embed_dim),
        hidden_dim: h.hidden_dim.unwrap_or(base.hidden_dim),
        label_count: h.label_count.unwrap_or(vocab.label_count()),
        regime: h.regime.unwrap_or(base.regime),
        drop_prob: h.p.unwrap_or(base.drop_prob),
        mask_gru_candidate_hidden: h.mask_gru_candidate_hidden,
        ..base
    };
    config.validate()?;
    if config.label_count < vocab.label_count() {
        return Err(CliError::new(
            4,
            format!(
                "--label-count {} is below the {} labels in the training data",
                config.label_count,
                vocab.label_count()
            ),
        ));
    }
    Ok(config)
}

fn train_config(h: &Hyper, seed: u64) -> CliResult<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        learning_rate: h.lr.unwrap_or(d.learning_rate),
        epochs: h.epochs.unwrap_or(d.epochs),
        weight_decay: h.weight_decay.unwrap_or(d.weight_decay),
        clip_norm: match h.clip {
            Some(0.0) => None,
            Some(c) => Some(c),
            None => d.clip_norm,
        },
        seed,
        patience: h.patience.unwrap_or(d.patience),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(args: TrainArgs) -> CliResult {
    let hyper = match &args.config {
        Some(p) => merge(args.hyper, read_hyper(p)?),
        None => args.hyper,
    };
    if args.runs == 0 {
        return Err(CliError::new(2, "--runs must be at least 1"));
    }
    let full = read_corpus(&args.train)?;
    let (train_raw, val_raw) = match &args.val {
        Some(v) => (full, read_corpus(v)?),
        None => {
            let (t, v) = split_train_val(&full.sentences, args.split.unwrap_or(0.8), args.seed)?;
            (RawCorpus { sentences: t }, RawCorpus { sentences: v })
        }
    };
    let test_raw = args.test.as_deref().map(read_corpus).transpose()?;

    let vocab = Vocabulary::build(&train_raw, hyper.min_count.unwrap_or(1), hyper.lowercase);
    let config = model_config(&hyper, &vocab)?;
    let train_set = vocab.encode_corpus(&train_raw)?;
    let val_set = vocab.encode_corpus(&val_raw)?;
    let test_set = test_raw.as_ref().map(|t| vocab.encode_corpus(t)).transpose()?;
    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;

    let metric = if test_set.is_some() { "test" } else { "validation" };
    let mut scores = Vec::with_capacity(args.runs);
    let mut summary_rows = String::from("run\tseed\tbest_epoch\tvalidation_f\ttest_f\n");
    for run in 0..args.runs {
        let seed = args.seed.wrapping_add(run as u64);
        let cfg = train_config(&hyper, seed)?;
        let outcome = train_model(&config, &train_set, &val_set, &vocab, &cfg)?;
        let test_report = test_set
            .as_ref()
            .map(|t| evaluate(&outcome.params, &config, t, &vocab))
            .transpose()?;
        let f = test_report.map_or(outcome.best_validation.f_measure, |r| r.f_measure);
        scores.push(f);

        let stem = format!("run{:02}", run + 1);
        let header = CheckpointHeader {
            config: config.clone(),
            vocabulary: vocab.clone(),
            train_config: cfg,
            seed,
            best_validation_f: outcome.best_validation.f_measure,
        };
        Checkpoint::new(header, outcome.params)?
            .save(args.out.join(format!("{stem}.ckpt")))
            .map_err(|e| io_err(&args.out, e))?;
        write_file(
            &args.out.join(format!("{stem}.history.tsv")),
            format!(
                "epoch\ttrain_loss\tval_p\tval_r\tval_f\n{}",
                outcome.history.to_tsv()
            ),
        )?;
        let test_f = test_report.map_or("-".to_string(), |r| format!("{:.4}", r.f_measure));
        summary_rows.push_str(&format!(
            "{}\t{seed}\t{}\t{:.4}\t{test_f}\n",
            run + 1,
            outcome.history.best_epoch,
            outcome.best_validation.f_measure
        ));
        eprintln!(
            "run {} seed {seed}: best epoch {}, validation F {:.4}, test F {test_f}",
            run + 1,
            outcome.history.best_epoch,
            outcome.best_validation.f_measure
        );
    }
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let average = scores.iter().sum::<f64>() / scores.len() as f64;
    let line = format!(
        "{metric}\truns={}\tbest_f={best:.4}\taverage_f={average:.4}",
        scores.len()
    );
    write_file(&args.out.join("runs.tsv"), summary_rows)?;
    write_file(&args.out.join("summary.tsv"), format!("{line}\n"))?;
    println!("{line}");
    Ok(())
}

pub fn eval(args: EvalArgs) -> CliResult {
    let ck = load_checkpoint(&args.model)?;
    let raw = read_corpus(&args.test)?;
    let vocab = &ck.header.vocabulary;
    let data = vocab.encode_corpus(&raw)?;
    let report = evaluate(&ck.params, &ck.header.config, &data, vocab)?;
    println!("{report}");
    Ok(())
}

pub fn tag(args: TagArgs) -> CliResult {
    let ck = load_checkpoint(&args.model)?;
    let reader: Box<dyn BufRead> = match &args.input {
        Some(p) => Box::new(io::BufReader::new(
            std::fs::File::open(p).map_err(|e| io_err(p, e))?,
        )),
        None => Box::new(io::stdin().lock()),
    };
    let vocab = &ck.header.vocabulary;
    let stdout = io::stdout();
    let mut out = io::BufWriter::new(stdout.lock());
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CliError::new(2, format!("reading input: {e}")))?;
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.is_empty() {
            eprintln!("warning: line {} is empty, skipped", i + 1);
            continue;
        }
        let tokens: Vec<usize> = words.iter().map(|w| vocab.encode_word(w)).collect();
        let labels = predict(&ck.params, &ck.header.config, &tokens)?;
        let write = |out: &mut io::BufWriter<_>| -> io::Result<()> {
            for (w, &l) in words.iter().zip(&labels) {
                writeln!(out, "{w}\t{}", vocab.decode_label(l))?;
            }
            writeln!(out)
        };
        write(&mut out).map_err(|e| CliError::new(2, format!("writing output: {e}")))?;
    }
    out.flush()
        .map_err(|e| CliError::new(2, format!("writing output: {e}")))?;
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> CliResult {
    let fault = match args.inject_fault.as_deref() {
        None => None,
        Some("forget-gate-sign") => Some(InjectedFault::ForgetGateSign),
        Some(other) => return Err(CliError::new(2, format!("unknown fault {other:?}"))),
    };
    let spec = GradcheckSpec {
        seq_len: args.seq_len,
        embed_dim: args.embed_dim,
        hidden_dim: args.hidden_dim,
        label_count: args.label_count,
        drop_prob: args.p,
        tolerance: args.tolerance,
        seed: args.seed,
        ..GradcheckSpec::default()
    };
    let cells = args.cell.map_or(CellKind::ALL.to_vec(), |c| vec![c]);
    let directions = args
        .direction
        .map_or(vec![Direction::Uni, Direction::Bi], |d| vec![d]);
    let regimes = args
        .regime
        .map_or(vec![Regime::None, Regime::Naive, Regime::Variational], |r| {
            vec![r]
        });
    let results = check_all(&cells, &directions, &regimes, &spec, fault)?;
    println!("cell\tdirection\tregime\tmax_rel_error\tworst_tensor");
    let mut failures = Vec::new();
    for r in &results {
        println!("{r}");
        let mut bad = r.failing(spec.tolerance);
        if !bad.is_empty() {
            bad.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
            let mut names: Vec<String> = bad
                .iter()
                .take(4)
                .map(|t| format!("{} ({:.3e})", t.tensor, t.rel_error))
                .collect();
            if bad.len() > 4 {
                names.push(format!("{} more", bad.len() - 4));
            }
            failures.push(format!(
                "{} {} {}: {}",
                r.cell,
                r.direction,
                r.regime,
                names.join(", ")
            ));
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(
            5,
            format!(
                "gradient check failed above {:e}:\n  {}",
                spec.tolerance,
                failures.join("\n  ")
            ),
        ))
    }
}

pub fn synth(args: SynthArgs) -> CliResult {
    let noise = Noise {
        filler_rate: args.filler_rate,
        swap_rate: args.swap_rate,
    };
    if !(0.0..=1.0).contains(&noise.filler_rate) || !(0.0..=1.0).contains(&noise.swap_rate) {
        return Err(CliError::new(2, "noise rates must lie in [0, 1]"));
    }
    let (train, val, test) = synth::splits(args.train, args.val, args.test, args.seed, &noise);
    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    for (name, corpus) in [("train", train), ("val", val), ("test", test)] {
        write_file(&args.out.join(format!("{name}.conll")), corpus.to_conll())?;
    }
    Ok(())
}
