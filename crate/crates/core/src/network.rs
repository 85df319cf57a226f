//! Embedding → recurrent layer (one or two directions) → per-token decoder.
//!
//! Dropout regimes in train mode:
//!
//! * `None`: no masks.
//! * `Naive`: a fresh mask per timestep on the embedding output and another
//!   on the decoder input; recurrent transitions are never masked. Masks are
//!   drawn from the caller's `Rng`: all embedding masks (t = 1..T) first,
//!   then all decoder masks.
//! * `Variational`: one `DropoutMaskSet` per sequence. `z_x` masks every
//!   embedded token (it is the cell's input mask), `z_h_fwd`/`z_h_bwd` mask
//!   the hidden input of each direction at every step, `z_d` masks every
//!   decoder input.
//!
//! Infer mode never masks. Initial states are zero.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cells::{self, CellKind, CellState, CellWeights, StepMasks, TapeStep};
use crate::error::{shape_err, Error, Result};
use crate::math::{self, sample_mask, MaskVector, Matrix, Rng, Tensor, TensorKind, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Uni,
    Bi,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Uni => "uni",
            Direction::Bi => "bi",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uni" => Ok(Direction::Uni),
            "bi" => Ok(Direction::Bi),
            _ => Err(Error::Config(format!("unknown direction {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    None,
    Naive,
    Variational,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::None => "none",
            Regime::Naive => "naive",
            Regime::Variational => "variational",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Regime::None),
            "naive" => Ok(Regime::Naive),
            "variational" => Ok(Regime::Variational),
            _ => Err(Error::Config(format!("unknown regime {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Architecture and regularization of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub cell: CellKind,
    pub direction: Direction,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub label_count: usize,
    pub regime: Regime,
    /// Drop probability of every mask.
    pub drop_prob: f64,
    /// Also apply `z_h` to the GRU candidate's hidden path.
    #[serde(default)]
    pub mask_gru_candidate_hidden: bool,
}

impl ModelConfig {
    /// 100-unit embeddings and hidden layers, 128 labels, variational
    /// dropout with p = 0.5.
    pub fn new(cell: CellKind, direction: Direction, vocab_size: usize) -> Self {
        ModelConfig {
            cell,
            direction,
            vocab_size,
            embed_dim: 100,
            hidden_dim: 100,
            label_count: 128,
            regime: Regime::Variational,
            drop_prob: 0.5,
            mask_gru_candidate_hidden: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.label_count < 2 {
            return Err(Error::Config(format!(
                "label_count must be at least 2, got {}",
                self.label_count
            )));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::InvalidProbability(self.drop_prob));
        }
        Ok(())
    }

    /// Width of the decoder input: `H` or `2H`.
    pub fn decoder_width(&self) -> usize {
        match self.direction {
            Direction::Uni => self.hidden_dim,
            Direction::Bi => 2 * self.hidden_dim,
        }
    }
}

/// All trainable tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `V_in × E`; row `s` is the embedding of token `s`.
    pub embedding: Matrix,
    pub forward: CellWeights,
    pub backward: Option<CellWeights>,
    /// `L × H` (uni) or `L × 2H` (bi).
    pub decoder: Matrix,
    pub decoder_bias: Vector,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (e, h) = (config.embed_dim, config.hidden_dim);
        ModelParams {
            embedding: Matrix::zeros(config.vocab_size, e),
            forward: CellWeights::zeros(config.cell, e, h),
            backward: (config.direction == Direction::Bi).then(|| CellWeights::zeros(config.cell, e, h)),
            decoder: Matrix::zeros(config.label_count, config.decoder_width()),
            decoder_bias: Vector::zeros(config.label_count),
        }
    }

    /// Random initialization. Draw order: embedding, forward cell, backward
    /// cell, decoder.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (e, h) = (config.embed_dim, config.hidden_dim);
        let embedding = Matrix::glorot(config.vocab_size, e, rng);
        let forward = CellWeights::init(config.cell, e, h, rng);
        let backward = (config.direction == Direction::Bi).then(|| CellWeights::init(config.cell, e, h, rng));
        let decoder = Matrix::glorot(config.label_count, config.decoder_width(), rng);
        Ok(ModelParams {
            embedding,
            forward,
            backward,
            decoder,
            decoder_bias: Vector::zeros(config.label_count),
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            embedding: Matrix::zeros(self.embedding.rows(), self.embedding.cols()),
            forward: self.forward.zeros_like(),
            backward: self.backward.as_ref().map(CellWeights::zeros_like),
            decoder: Matrix::zeros(self.decoder.rows(), self.decoder.cols()),
            decoder_bias: Vector::zeros(self.decoder_bias.len()),
        }
    }

    /// Every tensor in a fixed order under a stable name (`embedding`,
    /// `fwd.W_xi`, …, `bwd.W_xi`, …, `decoder.V`, `decoder.b`).
    pub fn tensors(&self) -> Vec<(String, TensorKind, &dyn Tensor)> {
        let mut out: Vec<(String, TensorKind, &dyn Tensor)> =
            vec![("embedding".into(), TensorKind::Weight, &self.embedding)];
        out.extend(
            self.forward
                .tensors()
                .into_iter()
                .map(|(n, k, t)| (format!("fwd.{n}"), k, t)),
        );
        if let Some(b) = &self.backward {
            out.extend(
                b.tensors()
                    .into_iter()
                    .map(|(n, k, t)| (format!("bwd.{n}"), k, t)),
            );
        }
        out.push(("decoder.V".into(), TensorKind::Weight, &self.decoder));
        out.push(("decoder.b".into(), TensorKind::Bias, &self.decoder_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, TensorKind, &mut dyn Tensor)> {
        let mut out: Vec<(String, TensorKind, &mut dyn Tensor)> =
            vec![("embedding".into(), TensorKind::Weight, &mut self.embedding)];
        out.extend(
            self.forward
                .tensors_mut()
                .into_iter()
                .map(|(n, k, t)| (format!("fwd.{n}"), k, t)),
        );
        if let Some(b) = &mut self.backward {
            out.extend(
                b.tensors_mut()
                    .into_iter()
                    .map(|(n, k, t)| (format!("bwd.{n}"), k, t)),
            );
        }
        out.push(("decoder.V".into(), TensorKind::Weight, &mut self.decoder));
        out.push(("decoder.b".into(), TensorKind::Bias, &mut self.decoder_bias));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.values().len()).sum()
    }

    /// Sum of squared weights; biases excluded, embedding included.
    pub fn l2_norm_sq(&self) -> f64 {
        math::l2_norm_sq(
            self.tensors()
                .into_iter()
                .filter(|(_, kind, _)| *kind == TensorKind::Weight)
                .map(|(_, _, t)| t.values()),
        )
    }

    /// Checks that every tensor has the shape `config` implies.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        let shapes = |p: &ModelParams| -> Vec<(String, (usize, usize))> {
            p.tensors().into_iter().map(|(n, _, t)| (n, t.shape())).collect()
        };
        let want = shapes(&ModelParams::zeros(config));
        let have = shapes(self);
        if want != have {
            return Err(Error::Schema(format!(
                "parameters do not match configuration: expected {want:?}, found {have:?}"
            )));
        }
        Ok(())
    }
}

/// The per-sequence masks of the variational regime.
#[derive(Clone, Debug)]
pub struct DropoutMaskSet {
    pub z_x: Arc<MaskVector>,
    pub z_h_fwd: Arc<MaskVector>,
    pub z_h_bwd: Option<Arc<MaskVector>>,
    pub z_d: Arc<MaskVector>,
}

impl DropoutMaskSet {
    /// All-ones masks shaped for `config`.
    pub fn identity(config: &ModelConfig) -> Self {
        DropoutMaskSet {
            z_x: Arc::new(MaskVector::identity(config.embed_dim)),
            z_h_fwd: Arc::new(MaskVector::identity(config.hidden_dim)),
            z_h_bwd: (config.direction == Direction::Bi)
                .then(|| Arc::new(MaskVector::identity(config.hidden_dim))),
            z_d: Arc::new(MaskVector::identity(config.decoder_width())),
        }
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        let bad = |what: &str, want: usize, got: usize| {
            Err(shape_err("DropoutMaskSet", format!("{what} {want}"), got))
        };
        if self.z_x.len() != config.embed_dim {
            return bad("z_x", config.embed_dim, self.z_x.len());
        }
        if self.z_h_fwd.len() != config.hidden_dim {
            return bad("z_h_fwd", config.hidden_dim, self.z_h_fwd.len());
        }
        match (&self.z_h_bwd, config.direction) {
            (Some(m), Direction::Bi) if m.len() != config.hidden_dim => {
                return bad("z_h_bwd", config.hidden_dim, m.len())
            }
            (None, Direction::Bi) | (Some(_), Direction::Uni) => {
                return Err(Error::Regime(
                    "z_h_bwd must be present exactly for bi-directional models".into(),
                ))
            }
            _ => {}
        }
        if self.z_d.len() != config.decoder_width() {
            return bad("z_d", config.decoder_width(), self.z_d.len());
        }
        Ok(())
    }

    fn step_masks(&self) -> (StepMasks, Option<StepMasks>) {
        let fwd = StepMasks {
            z_x: self.z_x.clone(),
            z_h: self.z_h_fwd.clone(),
        };
        let bwd = self.z_h_bwd.as_ref().map(|z_h| StepMasks {
            z_x: self.z_x.clone(),
            z_h: z_h.clone(),
        });
        (fwd, bwd)
    }
}

/// Samples one variational mask set, in the order z_x, z_h_fwd, z_h_bwd, z_d.
pub fn sample_mask_set(config: &ModelConfig, rng: &mut Rng) -> Result<DropoutMaskSet> {
    if config.regime != Regime::Variational {
        return Err(Error::Regime(format!(
            "mask sets belong to the variational regime, config is {}",
            config.regime
        )));
    }
    let p = config.drop_prob;
    let z_x = Arc::new(sample_mask(config.embed_dim, p, rng)?);
    let z_h_fwd = Arc::new(sample_mask(config.hidden_dim, p, rng)?);
    let z_h_bwd = match config.direction {
        Direction::Bi => Some(Arc::new(sample_mask(config.hidden_dim, p, rng)?)),
        Direction::Uni => None,
    };
    let z_d = Arc::new(sample_mask(config.decoder_width(), p, rng)?);
    Ok(DropoutMaskSet {
        z_x,
        z_h_fwd,
        z_h_bwd,
        z_d,
    })
}

/// Row `token` of the embedding matrix.
pub fn embed(params: &ModelParams, token: usize) -> Result<Vector> {
    if token >= params.embedding.rows() {
        return Err(Error::Index {
            what: "vocabulary",
            index: token,
            len: params.embedding.rows(),
        });
    }
    Ok(params.embedding.row(token).into())
}

/// Runs one direction over `xs`; `reverse` walks t = T..1. Tapes are
/// returned in time order either way.
pub fn run_direction(
    weights: &CellWeights,
    xs: &[Vector],
    masks: Option<&StepMasks>,
    reverse: bool,
    mask_candidate_hidden: bool,
) -> Result<Vec<TapeStep>> {
    let (_, h) = weights.dims();
    let mut state = CellState::zeros(weights.kind(), h);
    let mut tapes: Vec<Option<TapeStep>> = (0..xs.len()).map(|_| None).collect();
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..xs.len()).rev())
    } else {
        Box::new(0..xs.len())
    };
    for t in order {
        let (next, tape) = cells::step(weights, &xs[t], &state, masks, mask_candidate_hidden)?;
        state = next;
        tapes[t] = Some(tape);
    }
    Ok(tapes
        .into_iter()
        .map(|t| t.expect("every step visited"))
        .collect())
}

/// Output of a two-direction pass.
#[derive(Clone, Debug)]
pub struct BiOutput {
    /// `concat(h_t^→, h_t^←)` per step.
    pub hidden: Vec<Vector>,
    pub forward: Vec<TapeStep>,
    pub backward: Vec<TapeStep>,
}

/// Left-to-right pass with `fwd` and an independent right-to-left pass with
/// `bwd`, both from zero states.
pub fn forward_bidirectional(
    fwd: &CellWeights,
    bwd: &CellWeights,
    xs: &[Vector],
    fwd_masks: Option<&StepMasks>,
    bwd_masks: Option<&StepMasks>,
    mask_candidate_hidden: bool,
) -> Result<BiOutput> {
    if xs.is_empty() {
        return Err(Error::EmptySequence);
    }
    let forward = run_direction(fwd, xs, fwd_masks, false, mask_candidate_hidden)?;
    let backward = run_direction(bwd, xs, bwd_masks, true, mask_candidate_hidden)?;
    let hidden = forward
        .iter()
        .zip(&backward)
        .map(|(f, b)| f.h().iter().chain(b.h()).copied().collect::<Vec<_>>().into())
        .collect();
    Ok(BiOutput {
        hidden,
        forward,
        backward,
    })
}

/// Everything the reverse sweep needs from one `forward_sequence` call.
#[derive(Clone, Debug)]
pub struct SequenceTape {
    pub tokens: Vec<usize>,
    /// Regime actually applied (`None` in infer mode).
    pub regime: Regime,
    /// Mask on each embedded token. In the variational regime this is the
    /// cells' `z_x`, applied inside the cell; in the naive regime it is
    /// applied before the cell.
    pub embed_masks: Vec<Option<Arc<MaskVector>>>,
    pub forward: Vec<TapeStep>,
    /// Time-ordered; empty for uni-directional models.
    pub backward: Vec<TapeStep>,
    pub decoder_masks: Vec<Option<Arc<MaskVector>>>,
    /// Masked decoder inputs.
    pub decoder_inputs: Vec<Vector>,
}

/// Distinct mask instances seen in a tape, per site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskCensus {
    pub embedding: usize,
    pub hidden_fwd: usize,
    pub hidden_bwd: usize,
    pub decoder: usize,
}

fn distinct_instances<'a>(masks: impl Iterator<Item = &'a Arc<MaskVector>>) -> usize {
    let mut seen: Vec<*const MaskVector> = Vec::new();
    for m in masks {
        let p = Arc::as_ptr(m);
        if !seen.contains(&p) {
            seen.push(p);
        }
    }
    seen.len()
}

impl SequenceTape {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Counts mask instances by identity (not by value).
    pub fn mask_census(&self) -> MaskCensus {
        let hidden =
            |tapes: &[TapeStep]| distinct_instances(tapes.iter().filter_map(|t| t.masks().map(|m| &m.z_h)));
        MaskCensus {
            embedding: distinct_instances(self.embed_masks.iter().flatten()),
            hidden_fwd: hidden(&self.forward),
            hidden_bwd: hidden(&self.backward),
            decoder: distinct_instances(self.decoder_masks.iter().flatten()),
        }
    }
}

/// Full forward pass over one token sequence. Returns per-step logits and
/// the tape.
pub fn forward_sequence(
    params: &ModelParams,
    config: &ModelConfig,
    tokens: &[usize],
    masks: Option<&DropoutMaskSet>,
    rng: Option<&mut Rng>,
    mode: Mode,
) -> Result<(Vec<Vector>, SequenceTape)> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let regime = match mode {
        Mode::Infer => Regime::None,
        Mode::Train => config.regime,
    };
    let mut rng = rng;
    let mut naive_rng = None;
    let mut var_masks = None;
    match regime {
        Regime::None => {}
        Regime::Naive => {
            if masks.is_some() {
                return Err(Error::Regime("naive regime samples its own masks".into()));
            }
            naive_rng = Some(
                rng.take()
                    .ok_or_else(|| Error::Regime("naive regime needs an rng".into()))?,
            );
        }
        Regime::Variational => {
            let m = masks.ok_or_else(|| Error::Regime("variational regime needs a mask set".into()))?;
            m.check(config)?;
            var_masks = Some(m);
        }
    }
    let p = config.drop_prob;

    let mut embed_masks = Vec::with_capacity(tokens.len());
    let mut xs = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        let x = embed(params, tok)?;
        match (regime, naive_rng.as_deref_mut(), var_masks) {
            (Regime::Naive, Some(r), _) => {
                let m = Arc::new(sample_mask(config.embed_dim, p, r)?);
                xs.push(m.apply(&x)?);
                embed_masks.push(Some(m));
            }
            (Regime::Variational, _, Some(set)) => {
                xs.push(x);
                embed_masks.push(Some(set.z_x.clone()));
            }
            _ => {
                xs.push(x);
                embed_masks.push(None);
            }
        }
    }

    let (fwd_masks, bwd_masks) = match var_masks {
        Some(set) => {
            let (f, b) = set.step_masks();
            (Some(f), b)
        }
        None => (None, None),
    };
    let flag = config.mask_gru_candidate_hidden;
    let (hidden, forward, backward) = match (&params.backward, config.direction) {
        (Some(bwd), Direction::Bi) => {
            let out = forward_bidirectional(
                &params.forward,
                bwd,
                &xs,
                fwd_masks.as_ref(),
                bwd_masks.as_ref(),
                flag,
            )?;
            (out.hidden, out.forward, out.backward)
        }
        (None, Direction::Uni) => {
            let fwd = run_direction(&params.forward, &xs, fwd_masks.as_ref(), false, flag)?;
            let hidden = fwd.iter().map(|t| Vector::from(t.h())).collect();
            (hidden, fwd, Vec::new())
        }
        _ => {
            return Err(Error::Schema(format!(
                "parameters do not match direction {}",
                config.direction
            )))
        }
    };
    if params.decoder.cols() != config.decoder_width() {
        return Err(shape_err(
            "decoder",
            format!("V {}x{}", params.decoder.rows(), params.decoder.cols()),
            format!("hidden width {}", config.decoder_width()),
        ));
    }

    let mut decoder_masks = Vec::with_capacity(tokens.len());
    let mut decoder_inputs = Vec::with_capacity(tokens.len());
    let mut logits = Vec::with_capacity(tokens.len());
    for h in hidden {
        let (input, mask) = match (regime, naive_rng.as_deref_mut(), var_masks) {
            (Regime::Naive, Some(r), _) => {
                let m = Arc::new(sample_mask(config.decoder_width(), p, r)?);
                (m.apply(&h)?, Some(m))
            }
            (Regime::Variational, _, Some(set)) => (set.z_d.apply(&h)?, Some(set.z_d.clone())),
            _ => (h, None),
        };
        logits.push(math::affine(&params.decoder, &input, Some(&params.decoder_bias))?);
        decoder_inputs.push(input);
        decoder_masks.push(mask);
    }

    let tape = SequenceTape {
        tokens: tokens.to_vec(),
        regime,
        embed_masks,
        forward,
        backward,
        decoder_masks,
        decoder_inputs,
    };
    Ok((logits, tape))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-token argmax labels in infer mode.
pub fn predict(params: &ModelParams, config: &ModelConfig, tokens: &[usize]) -> Result<Vec<usize>> {
    let (logits, _) = forward_sequence(params, config, tokens, None, None, Mode::Infer)?;
    Ok(logits.iter().map(|l| argmax(l)).collect())
}
