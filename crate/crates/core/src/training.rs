//! Objective, backpropagation through time, clipping, SGD and the epoch
//! loop.
//!
//! The objective of one sequence is the summed per-token negative
//! log-likelihood plus `λ · ‖w‖²` over all weight matrices (biases
//! excluded). Masks sampled for a sequence are frozen for its backward
//! pass: the tape holds the very instances the forward pass used.

use std::fmt::Write as _;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::cells::{self, InjectedFault};
use crate::corpus::{self, EvalReport, Sequence, Vocabulary};
use crate::error::{shape_err, Error, Result};
use crate::math::{softmax_xent, Rng, TensorKind, Vector};
use crate::network::{
    self, forward_sequence, sample_mask_set, Mode, ModelConfig, ModelParams, Regime, SequenceTape,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Coefficient λ of the squared-weight penalty.
    pub weight_decay: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Epochs without a validation-F improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 50,
            weight_decay: 1e-5,
            clip_norm: Some(5.0),
            seed: 1,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if matches!(self.clip_norm, Some(c) if c.is_nan() || c <= 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// One gradient tensor per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub ModelParams);

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients(params.zeros_like())
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .tensors()
            .iter()
            .flat_map(|(_, _, t)| t.values().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0
            .tensors()
            .iter()
            .all(|(_, _, t)| t.values().iter().all(|v| v.is_finite()))
    }
}

impl Deref for Gradients {
    type Target = ModelParams;
    fn deref(&self) -> &ModelParams {
        &self.0
    }
}

impl DerefMut for Gradients {
    fn deref_mut(&mut self) -> &mut ModelParams {
        &mut self.0
    }
}

/// Σ_t −log softmax(logits_t)[y_t].
pub fn sequence_loss(logits: &[Vector], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(shape_err("sequence_loss", logits.len(), labels.len()));
    }
    let mut total = 0.0;
    for (l, &y) in logits.iter().zip(labels) {
        total += softmax_xent(l, y)?.0;
    }
    Ok(total)
}

/// `loss_nll + λ · l2_norm_sq(params)`.
pub fn total_objective(params: &ModelParams, loss_nll: f64, lambda: f64) -> f64 {
    loss_nll + lambda * params.l2_norm_sq()
}

/// Exact gradient of `sequence_loss` for the pass recorded in `tape`.
/// Returns the loss alongside.
pub fn bptt(
    params: &ModelParams,
    logits: &[Vector],
    tape: &SequenceTape,
    labels: &[usize],
) -> Result<(f64, Gradients)> {
    bptt_with(params, logits, tape, labels, None)
}

#[doc(hidden)]
pub fn bptt_with(
    params: &ModelParams,
    logits: &[Vector],
    tape: &SequenceTape,
    labels: &[usize],
    fault: Option<InjectedFault>,
) -> Result<(f64, Gradients)> {
    let n = tape.len();
    if tape.forward.len() != n || tape.decoder_inputs.len() != n || logits.len() != n {
        return Err(Error::Tape("incomplete sequence tape".into()));
    }
    if labels.len() != n {
        return Err(shape_err(
            "bptt",
            format!("{n} steps"),
            format!("{} labels", labels.len()),
        ));
    }
    if params.backward.is_some() != !tape.backward.is_empty() {
        return Err(Error::Tape("tape direction does not match parameters".into()));
    }
    let mut grads = Gradients::zeros_like(params);
    let h = params.forward.dims().1;

    // Decoder, and the gradient reaching each direction's hidden states.
    let mut loss = 0.0;
    let mut dh_fwd = Vec::with_capacity(n);
    let mut dh_bwd = Vec::with_capacity(n);
    for t in 0..n {
        let (l, probs) = softmax_xent(&logits[t], labels[t])?;
        loss += l;
        let mut dlogits = probs;
        dlogits[labels[t]] -= 1.0;
        grads.decoder.outer_acc(&dlogits, &tape.decoder_inputs[t]);
        for (b, d) in grads.decoder_bias.iter_mut().zip(dlogits.iter()) {
            *b += d;
        }
        let mut dinput = vec![0.0; params.decoder.cols()];
        params.decoder.gemv_t_acc(&dlogits, &mut dinput);
        if let Some(m) = &tape.decoder_masks[t] {
            for (d, z) in dinput.iter_mut().zip(m.iter()) {
                *d *= z;
            }
        }
        let back = dinput.split_off(h);
        dh_fwd.push(dinput);
        dh_bwd.push(back);
    }

    let mut dx: Vec<Vec<f64>> = vec![vec![0.0; params.embedding.cols()]; n];
    let sweep = |weights: &cells::CellWeights,
                 acc: &mut cells::CellWeights,
                 steps: &[cells::TapeStep],
                 dh: &[Vec<f64>],
                 order: &mut dyn Iterator<Item = usize>,
                 dx: &mut [Vec<f64>]|
     -> Result<()> {
        let mut carry_h = vec![0.0; h];
        let mut carry_c: Option<Vector> = None;
        for t in order {
            let gh: Vec<f64> = dh[t].iter().zip(&carry_h).map(|(a, b)| a + b).collect();
            let g = cells::backward_step_with(weights, &steps[t], &gh, carry_c.as_deref(), acc, fault)?;
            for (d, v) in dx[t].iter_mut().zip(g.x.iter()) {
                *d += v;
            }
            carry_h = g.h_prev.into_inner();
            carry_c = g.c_prev;
        }
        Ok(())
    };
    sweep(
        &params.forward,
        &mut grads.0.forward,
        &tape.forward,
        &dh_fwd,
        &mut (0..n).rev(),
        &mut dx,
    )?;
    if let (Some(w), Some(acc)) = (&params.backward, grads.0.backward.as_mut()) {
        sweep(w, acc, &tape.backward, &dh_bwd, &mut (0..n), &mut dx)?;
    }

    for (t, d) in dx.iter_mut().enumerate() {
        if tape.regime == Regime::Naive {
            if let Some(m) = &tape.embed_masks[t] {
                for (v, z) in d.iter_mut().zip(m.iter()) {
                    *v *= z;
                }
            }
        }
        for (e, v) in grads.embedding.row_mut(tape.tokens[t]).iter_mut().zip(d.iter()) {
            *e += v;
        }
    }
    Ok((loss, grads))
}

/// Adds the penalty gradient `2λw` to every weight tensor.
pub fn add_decay_gradient(params: &ModelParams, grads: &mut Gradients, lambda: f64) {
    for ((_, kind, w), (_, _, g)) in params.tensors().into_iter().zip(grads.tensors_mut()) {
        if kind == TensorKind::Weight {
            for (gv, wv) in g.values_mut().iter_mut().zip(w.values()) {
                *gv += 2.0 * lambda * wv;
            }
        }
    }
}

/// Rescales to `threshold` when the global L2 norm exceeds it. Returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, threshold: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > threshold {
        let scale = threshold / norm;
        for (_, _, t) in grads.tensors_mut() {
            t.values_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// `w ← w − lr·(g + 2λw)` for weights, `b ← b − lr·g` for biases.
pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, lr: f64, lambda: f64) -> Result<()> {
    let grad_tensors = grads.tensors();
    let mut param_tensors = params.tensors_mut();
    if grad_tensors.len() != param_tensors.len() {
        return Err(shape_err("sgd_step", param_tensors.len(), grad_tensors.len()));
    }
    for ((name, kind, w), (_, _, g)) in param_tensors.iter_mut().zip(&grad_tensors) {
        if w.shape() != g.shape() {
            return Err(shape_err(
                "sgd_step",
                format!("{name} {:?}", w.shape()),
                format!("{:?}", g.shape()),
            ));
        }
        let decay = if *kind == TensorKind::Weight {
            2.0 * lambda
        } else {
            0.0
        };
        for (wv, gv) in w.values_mut().iter_mut().zip(g.values()) {
            *wv -= lr * (gv + decay * *wv);
        }
    }
    Ok(())
}

/// Chunk scores of infer-mode predictions on `data`.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    data: &[Sequence],
    vocab: &Vocabulary,
) -> Result<EvalReport> {
    let mut gold = Vec::with_capacity(data.len());
    let mut pred = Vec::with_capacity(data.len());
    for seq in data {
        let p = network::predict(params, config, &seq.tokens)?;
        gold.push(
            seq.labels
                .iter()
                .map(|&l| vocab.decode_label(l))
                .collect::<Vec<_>>(),
        );
        pred.push(p.iter().map(|&l| vocab.decode_label(l)).collect::<Vec<_>>());
    }
    corpus::score(&gold, &pred)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-token negative log-likelihood under training-mode dropout.
    pub train_loss: f64,
    pub validation: EvalReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl History {
    /// One `epoch\ttrain_loss\tval_precision\tval_recall\tval_f` line per
    /// epoch.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.epochs {
            let v = &r.validation;
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.4}\t{:.4}\t{:.4}",
                r.epoch, r.train_loss, v.precision, v.recall, v.f_measure
            );
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: History,
    pub best_validation: EvalReport,
}

/// One SGD update on one sequence. Returns the sequence's NLL.
pub fn train_sequence(
    params: &mut ModelParams,
    config: &ModelConfig,
    cfg: &TrainConfig,
    seq: &Sequence,
    rng: &mut Rng,
) -> Result<f64> {
    train_sequence_traced(params, config, cfg, seq, rng).map(|(loss, _)| loss)
}

/// `train_sequence`, also returning the tape of the forward pass.
pub fn train_sequence_traced(
    params: &mut ModelParams,
    config: &ModelConfig,
    cfg: &TrainConfig,
    seq: &Sequence,
    rng: &mut Rng,
) -> Result<(f64, SequenceTape)> {
    let masks = match config.regime {
        Regime::Variational => Some(sample_mask_set(config, rng)?),
        _ => None,
    };
    let naive_rng = (config.regime == Regime::Naive).then_some(rng);
    let (logits, tape) = forward_sequence(
        params,
        config,
        &seq.tokens,
        masks.as_ref(),
        naive_rng,
        Mode::Train,
    )?;
    let (loss, mut grads) = bptt(params, &logits, &tape, &seq.labels)?;
    if let Some(c) = cfg.clip_norm {
        clip_gradients(&mut grads, c);
    }
    sgd_step(params, &grads, cfg.learning_rate, cfg.weight_decay)?;
    Ok((loss, tape))
}

/// Trains from a fresh initialization seeded by `cfg.seed`.
///
/// Every epoch shuffles the training set, updates sequence by sequence,
/// then scores the validation set in infer mode. The parameters with the
/// best validation F are kept; training stops after `patience` epochs
/// without a strict improvement.
pub fn train(
    config: &ModelConfig,
    train_set: &[Sequence],
    val_set: &[Sequence],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if vocab.label_count() > config.label_count {
        return Err(Error::Schema(format!(
            "{} labels in the data, model has {}",
            vocab.label_count(),
            config.label_count
        )));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut params = ModelParams::init(config, &mut rng)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History::default();
    let mut best: Option<(ModelParams, EvalReport)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut tokens = 0;
        for (k, &i) in order.iter().enumerate() {
            let loss = train_sequence(&mut params, config, cfg, &train_set[i], &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { epoch, sequence: k });
            }
            loss_sum += loss;
            tokens += train_set[i].len();
        }
        let report = evaluate(&params, config, val_set, vocab)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / tokens.max(1) as f64,
            validation: report,
        });
        let improved = best.as_ref().is_none_or(|(_, b)| report.f_measure > b.f_measure);
        if improved {
            best = Some((params.clone(), report));
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (params, best_validation) = match best {
        Some(b) => b,
        None => {
            let report = evaluate(&params, config, val_set, vocab)?;
            (params, report)
        }
    };
    Ok(TrainOutcome {
        params,
        history,
        best_validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellKind;
    use crate::math::{sample_mask, Matrix};
    use crate::network::Direction;
    use std::sync::Arc;

    fn cfg(cell: CellKind, direction: Direction, regime: Regime) -> ModelConfig {
        ModelConfig {
            cell,
            direction,
            vocab_size: 6,
            embed_dim: 5,
            hidden_dim: 5,
            label_count: 3,
            regime,
            drop_prob: 0.5,
            mask_gru_candidate_hidden: false,
        }
    }

    #[test]
    fn sequence_loss_examples() {
        let uniform = vec![Vector::zeros(128)];
        assert!((sequence_loss(&uniform, &[7]).unwrap() - 128f64.ln()).abs() < 1e-12);
        assert!((128f64.ln() - 4.85203).abs() < 5e-6);
        let three = vec![Vector::zeros(128); 3];
        assert!((sequence_loss(&three, &[0, 1, 2]).unwrap() - 3.0 * 128f64.ln()).abs() < 1e-12);
        let confident = vec![Vector::from(vec![0.0, 800.0])];
        assert_eq!(sequence_loss(&confident, &[1]).unwrap(), 0.0);
        assert!(sequence_loss(&three, &[0]).is_err());
    }

    #[test]
    fn total_objective_examples() {
        let c = cfg(CellKind::Lstm, Direction::Uni, Regime::None);
        let p = ModelParams::init(&c, &mut Rng::new(0)).unwrap();
        assert_eq!(total_objective(&p, 2.0, 0.0), 2.0);
        assert_eq!(total_objective(&ModelParams::zeros(&c), 2.0, 0.3), 2.0);
        let mut single = ModelParams::zeros(&c);
        single.decoder.set(0, 0, 3.0);
        single.decoder.set(0, 1, 4.0);
        assert!((total_objective(&single, 2.0, 0.01) - 2.25).abs() < 1e-15);
    }

    #[test]
    fn clip_examples() {
        let c = ModelConfig {
            vocab_size: 1,
            embed_dim: 1,
            hidden_dim: 1,
            label_count: 2,
            ..cfg(CellKind::Vanilla, Direction::Uni, Regime::None)
        };
        let mut g = Gradients::zeros_like(&ModelParams::zeros(&c));
        g.decoder = Matrix::from_rows(&[&[3.0], &[4.0]]);
        let mut same = g.clone();
        assert_eq!(clip_gradients(&mut same, 5.0), 5.0);
        assert_eq!(same, g);
        let mut half = g.clone();
        clip_gradients(&mut half, 2.5);
        assert_eq!(half.decoder.data(), &[1.5, 2.0]);

        let mut zero = Gradients::zeros_like(&ModelParams::zeros(&c));
        assert_eq!(clip_gradients(&mut zero, 1.0), 0.0);
        assert!(zero.is_finite());
    }

    #[test]
    fn clipping_preserves_direction() {
        let c = cfg(CellKind::Gru, Direction::Bi, Regime::None);
        let params = ModelParams::init(&c, &mut Rng::new(3)).unwrap();
        let (logits, tape) = forward_sequence(&params, &c, &[1, 2, 3], None, None, Mode::Train).unwrap();
        let (_, g) = bptt(&params, &logits, &tape, &[0, 1, 2]).unwrap();
        let mut clipped = g.clone();
        let norm = clip_gradients(&mut clipped, 1e-3);
        assert!(norm > 1e-3);
        let scale = 1e-3 / norm;
        for ((_, _, a), (_, _, b)) in g.tensors().iter().zip(clipped.tensors().iter()) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x * scale - y).abs() <= 1e-15 * x.abs().max(1.0));
            }
        }
        assert!((clipped.global_norm() - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn sgd_examples() {
        let c = ModelConfig {
            vocab_size: 1,
            embed_dim: 1,
            hidden_dim: 1,
            label_count: 2,
            ..cfg(CellKind::Vanilla, Direction::Uni, Regime::None)
        };
        let mut p = ModelParams::zeros(&c);
        p.decoder.set(0, 0, 1.0);
        p.decoder_bias[0] = 1.0;
        let mut g = Gradients::zeros_like(&p);
        g.decoder.set(0, 0, 0.5);

        let mut q = p.clone();
        sgd_step(&mut q, &g, 0.0, 0.0).unwrap();
        assert_eq!(q, p);

        sgd_step(&mut q, &g, 0.1, 0.0).unwrap();
        assert!((q.decoder.get(0, 0) - 0.95).abs() < 1e-15);

        let zero = Gradients::zeros_like(&p);
        let mut r = p.clone();
        let mut prev = r.decoder.get(0, 0);
        for _ in 0..5 {
            sgd_step(&mut r, &zero, 0.1, 0.5).unwrap();
            let now = r.decoder.get(0, 0);
            assert!(now < prev && now > 0.0);
            prev = now;
        }
        // Biases are not decayed.
        assert_eq!(r.decoder_bias[0], 1.0);

        let other = ModelParams::zeros(&cfg(CellKind::Lstm, Direction::Uni, Regime::None));
        assert!(sgd_step(&mut r, &Gradients::zeros_like(&other), 0.1, 0.0).is_err());
    }

    #[test]
    fn absent_tokens_get_no_embedding_gradient() {
        let c = cfg(CellKind::Lstm, Direction::Bi, Regime::None);
        let params = ModelParams::init(&c, &mut Rng::new(1)).unwrap();
        let tokens = [1, 3, 1, 4];
        let (logits, tape) = forward_sequence(&params, &c, &tokens, None, None, Mode::Train).unwrap();
        let (_, g) = bptt(&params, &logits, &tape, &[0, 2, 1, 0]).unwrap();
        for row in [0, 2, 5] {
            assert!(g.embedding.row(row).iter().all(|&v| v == 0.0));
        }
        for row in [1, 3, 4] {
            assert!(g.embedding.row(row).iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn columns_dropped_by_shared_masks_get_zero_gradient() {
        let c = ModelConfig {
            drop_prob: 0.5,
            ..cfg(CellKind::Lstm, Direction::Uni, Regime::Variational)
        };
        let params = ModelParams::init(&c, &mut Rng::new(1)).unwrap();
        let keep_x = [true, false, true, false, true];
        let keep_h = [false, true, true, true, false];
        let masks = network::DropoutMaskSet {
            z_x: Arc::new(crate::math::MaskVector::from_keep(&keep_x, 0.5).unwrap()),
            z_h_fwd: Arc::new(crate::math::MaskVector::from_keep(&keep_h, 0.5).unwrap()),
            z_h_bwd: None,
            z_d: Arc::new(sample_mask(5, 0.5, &mut Rng::new(2)).unwrap()),
        };
        let (logits, tape) =
            forward_sequence(&params, &c, &[1, 2, 3], Some(&masks), None, Mode::Train).unwrap();
        let (_, g) = bptt(&params, &logits, &tape, &[0, 1, 2]).unwrap();
        let cells::CellWeights::Lstm(gw) = &g.forward else {
            panic!()
        };
        for (mx, mh) in [
            (&gw.w_xi, &gw.w_hi),
            (&gw.w_xf, &gw.w_hf),
            (&gw.w_xo, &gw.w_ho),
            (&gw.w_xg, &gw.w_hg),
        ] {
            // A whole row can vanish when its unit is dropped on both the
            // hidden and decoder paths, so kept columns are checked per column.
            for j in 0..5 {
                let col_x: Vec<f64> = (0..5).map(|r| mx.get(r, j)).collect();
                assert_eq!(col_x.iter().all(|&v| v == 0.0), !keep_x[j]);
                if !keep_h[j] {
                    assert!((0..5).all(|r| mh.get(r, j) == 0.0));
                }
            }
        }
    }

    #[test]
    fn zero_upstream_means_zero_gradient() {
        // Decoder weights and bias zero with uniform targets: the softmax is
        // uniform and its gradient w.r.t. the hidden states vanishes once
        // the decoder is zero, so only the decoder tensors get gradient.
        let c = cfg(CellKind::Gru, Direction::Bi, Regime::None);
        let mut params = ModelParams::init(&c, &mut Rng::new(1)).unwrap();
        params.decoder = Matrix::zeros(3, 10);
        let (logits, tape) = forward_sequence(&params, &c, &[1, 2], None, None, Mode::Train).unwrap();
        let (_, g) = bptt(&params, &logits, &tape, &[0, 1]).unwrap();
        for (name, _, t) in g.tensors() {
            if !name.starts_with("decoder") {
                assert!(t.values().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn bptt_rejects_bad_inputs() {
        let c = cfg(CellKind::Lstm, Direction::Uni, Regime::None);
        let params = ModelParams::init(&c, &mut Rng::new(1)).unwrap();
        let (logits, mut tape) = forward_sequence(&params, &c, &[1, 2], None, None, Mode::Train).unwrap();
        assert!(bptt(&params, &logits, &tape, &[0]).is_err());
        tape.forward.pop();
        assert!(matches!(
            bptt(&params, &logits, &tape, &[0, 1]),
            Err(Error::Tape(_))
        ));
    }

    fn toy_data() -> (Vocabulary, Vec<Sequence>) {
        let text = "a O\nb B-x\nc I-x\n\nb B-x\nd O\n\nd O\na O\nc B-y\n\nc B-y\nb B-x\n";
        let corpus = corpus::parse_conll(text).unwrap();
        let vocab = Vocabulary::build(&corpus, 1, false);
        let data = vocab.encode_corpus(&corpus).unwrap();
        (vocab, data)
    }

    #[test]
    fn training_is_deterministic() {
        let (vocab, data) = toy_data();
        for regime in [Regime::Naive, Regime::Variational] {
            let c = ModelConfig {
                vocab_size: vocab.word_count(),
                label_count: vocab.label_count(),
                ..cfg(CellKind::Gru, Direction::Bi, regime)
            };
            let tc = TrainConfig {
                epochs: 5,
                patience: 5,
                ..TrainConfig::default()
            };
            let a = train(&c, &data, &data, &vocab, &tc).unwrap();
            let b = train(&c, &data, &data, &vocab, &tc).unwrap();
            assert_eq!(a.history, b.history);
            assert_eq!(a.params, b.params);
        }
    }

    #[test]
    fn early_stopping_keeps_the_best_epoch() {
        let (vocab, data) = toy_data();
        let c = ModelConfig {
            vocab_size: vocab.word_count(),
            label_count: vocab.label_count(),
            ..cfg(CellKind::Lstm, Direction::Uni, Regime::None)
        };
        // A learning rate this large wrecks the model after the first
        // epoch, so validation F cannot improve on epoch 1.
        let tc = TrainConfig {
            epochs: 40,
            patience: 1,
            learning_rate: 0.5,
            ..TrainConfig::default()
        };
        let out = train(&c, &data, &data, &vocab, &tc).unwrap();
        let h = &out.history;
        let best = h
            .epochs
            .iter()
            .map(|e| e.validation.f_measure)
            .fold(f64::MIN, f64::max);
        assert_eq!(out.best_validation.f_measure, best);
        assert_eq!(h.epochs[h.best_epoch - 1].validation.f_measure, best);
        // Stopped exactly one epoch after the last improvement.
        assert_eq!(h.epochs.len(), h.best_epoch + 1);
        assert_eq!(
            evaluate(&out.params, &c, &data, &vocab).unwrap(),
            out.best_validation
        );
        let tsv = h.to_tsv();
        assert_eq!(tsv.lines().count(), h.epochs.len());
        assert_eq!(tsv.lines().next().unwrap().split('\t').count(), 5);
    }

    #[test]
    fn train_rejects_empty_and_oversized_label_sets() {
        let (vocab, data) = toy_data();
        let c = ModelConfig {
            vocab_size: vocab.word_count(),
            label_count: vocab.label_count(),
            ..cfg(CellKind::Lstm, Direction::Uni, Regime::None)
        };
        assert!(matches!(
            train(&c, &[], &data, &vocab, &TrainConfig::default()),
            Err(Error::EmptyCorpus)
        ));
        let small = ModelConfig {
            label_count: 2,
            ..c.clone()
        };
        assert!(matches!(
            train(&small, &data, &data, &vocab, &TrainConfig::default()),
            Err(Error::Schema(_))
        ));
        let bad = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(train(&c, &data, &data, &vocab, &bad).is_err());
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let (vocab, data) = toy_data();
        let c = ModelConfig {
            vocab_size: vocab.word_count(),
            label_count: vocab.label_count(),
            ..cfg(CellKind::Vanilla, Direction::Uni, Regime::None)
        };
        let tc = TrainConfig {
            learning_rate: 1e300,
            clip_norm: None,
            epochs: 3,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&c, &data, &data, &vocab, &tc),
            Err(Error::NonFinite { .. })
        ));
    }
}
