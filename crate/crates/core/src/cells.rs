//! Single-timestep recurrences (vanilla tanh RNN, LSTM, GRU) in plain and
//! masked form, with a tape per step and the matching reverse-mode step.
//!
//! The masked ("variational") forms take a pair of masks `z_x`, `z_h` that
//! the caller shares across every step of a sequence. Masks are held in
//! `Arc`s so a tape can show that every step saw the same instance.
//!
//! GRU update: `h_t = (1 - z_t) ⊙ h_{t-1} + z_t ⊙ g_t`. The candidate's
//! hidden path `W_hg (r_t ⊙ h_{t-1})` is left unmasked unless
//! `mask_candidate_hidden` is set.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::math::{sigm, MaskVector, Matrix, Rng, Tensor, TensorKind, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Vanilla,
    Lstm,
    Gru,
}

impl CellKind {
    pub const ALL: [CellKind; 3] = [CellKind::Vanilla, CellKind::Lstm, CellKind::Gru];
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Vanilla => "vanilla",
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        })
    }
}

impl FromStr for CellKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(CellKind::Vanilla),
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            _ => Err(Error::Config(format!("unknown cell kind {s:?}"))),
        }
    }
}

macro_rules! impl_tensors {
    ($ty:ident { $($field:ident => $name:literal, $kind:ident;)* }) => {
        impl $ty {
            pub fn tensors(&self) -> Vec<(&'static str, TensorKind, &dyn Tensor)> {
                vec![$( ($name, TensorKind::$kind, &self.$field as &dyn Tensor), )*]
            }

            pub fn tensors_mut(&mut self) -> Vec<(&'static str, TensorKind, &mut dyn Tensor)> {
                vec![$( ($name, TensorKind::$kind, &mut self.$field as &mut dyn Tensor), )*]
            }
        }
    };
}

/// `h_t = tanh(W x_t + U h_{t-1} + b)`
#[derive(Clone, Debug, PartialEq)]
pub struct VanillaWeights {
    pub w: Matrix,
    pub u: Matrix,
    pub b: Vector,
}

impl_tensors!(VanillaWeights {
    w => "W", Weight;
    u => "U", Weight;
    b => "b", Bias;
});

impl VanillaWeights {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        VanillaWeights {
            w: Matrix::zeros(hidden, input),
            u: Matrix::zeros(hidden, hidden),
            b: Vector::zeros(hidden),
        }
    }

    pub fn init(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        VanillaWeights {
            w: Matrix::glorot(hidden, input, rng),
            u: Matrix::glorot(hidden, hidden, rng),
            b: Vector::zeros(hidden),
        }
    }
}

/// Input (`i`), forget (`f`), output (`o`) gates and candidate (`g`).
#[derive(Clone, Debug, PartialEq)]
pub struct LstmWeights {
    pub w_xi: Matrix,
    pub w_hi: Matrix,
    pub w_xf: Matrix,
    pub w_hf: Matrix,
    pub w_xo: Matrix,
    pub w_ho: Matrix,
    pub w_xg: Matrix,
    pub w_hg: Matrix,
    pub b_i: Vector,
    pub b_f: Vector,
    pub b_o: Vector,
    pub b_g: Vector,
}

impl_tensors!(LstmWeights {
    w_xi => "W_xi", Weight;
    w_hi => "W_hi", Weight;
    w_xf => "W_xf", Weight;
    w_hf => "W_hf", Weight;
    w_xo => "W_xo", Weight;
    w_ho => "W_ho", Weight;
    w_xg => "W_xg", Weight;
    w_hg => "W_hg", Weight;
    b_i => "b_i", Bias;
    b_f => "b_f", Bias;
    b_o => "b_o", Bias;
    b_g => "b_g", Bias;
});

impl LstmWeights {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let wx = || Matrix::zeros(hidden, input);
        let wh = || Matrix::zeros(hidden, hidden);
        LstmWeights {
            w_xi: wx(),
            w_hi: wh(),
            w_xf: wx(),
            w_hf: wh(),
            w_xo: wx(),
            w_ho: wh(),
            w_xg: wx(),
            w_hg: wh(),
            b_i: Vector::zeros(hidden),
            b_f: Vector::zeros(hidden),
            b_o: Vector::zeros(hidden),
            b_g: Vector::zeros(hidden),
        }
    }

    /// Glorot weights, zero biases except the forget gate (1.0).
    pub fn init(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut w = LstmWeights::zeros(input, hidden);
        for m in [
            &mut w.w_xi,
            &mut w.w_hi,
            &mut w.w_xf,
            &mut w.w_hf,
            &mut w.w_xo,
            &mut w.w_ho,
            &mut w.w_xg,
            &mut w.w_hg,
        ] {
            *m = Matrix::glorot(m.rows(), m.cols(), rng);
        }
        w.b_f.iter_mut().for_each(|b| *b = 1.0);
        w
    }
}

/// Update (`z`), reset (`r`) gates and candidate (`g`).
#[derive(Clone, Debug, PartialEq)]
pub struct GruWeights {
    pub w_xz: Matrix,
    pub w_hz: Matrix,
    pub w_xr: Matrix,
    pub w_hr: Matrix,
    pub w_xg: Matrix,
    pub w_hg: Matrix,
    pub b_z: Vector,
    pub b_r: Vector,
    pub b_g: Vector,
}

impl_tensors!(GruWeights {
    w_xz => "W_xz", Weight;
    w_hz => "W_hz", Weight;
    w_xr => "W_xr", Weight;
    w_hr => "W_hr", Weight;
    w_xg => "W_xg", Weight;
    w_hg => "W_hg", Weight;
    b_z => "b_z", Bias;
    b_r => "b_r", Bias;
    b_g => "b_g", Bias;
});

impl GruWeights {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let wx = || Matrix::zeros(hidden, input);
        let wh = || Matrix::zeros(hidden, hidden);
        GruWeights {
            w_xz: wx(),
            w_hz: wh(),
            w_xr: wx(),
            w_hr: wh(),
            w_xg: wx(),
            w_hg: wh(),
            b_z: Vector::zeros(hidden),
            b_r: Vector::zeros(hidden),
            b_g: Vector::zeros(hidden),
        }
    }

    pub fn init(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut w = GruWeights::zeros(input, hidden);
        for m in [
            &mut w.w_xz,
            &mut w.w_hz,
            &mut w.w_xr,
            &mut w.w_hr,
            &mut w.w_xg,
            &mut w.w_hg,
        ] {
            *m = Matrix::glorot(m.rows(), m.cols(), rng);
        }
        w
    }
}

/// Weights of one recurrent direction.
#[derive(Clone, Debug, PartialEq)]
pub enum CellWeights {
    Vanilla(VanillaWeights),
    Lstm(LstmWeights),
    Gru(GruWeights),
}

impl CellWeights {
    pub fn zeros(kind: CellKind, input: usize, hidden: usize) -> Self {
        match kind {
            CellKind::Vanilla => CellWeights::Vanilla(VanillaWeights::zeros(input, hidden)),
            CellKind::Lstm => CellWeights::Lstm(LstmWeights::zeros(input, hidden)),
            CellKind::Gru => CellWeights::Gru(GruWeights::zeros(input, hidden)),
        }
    }

    pub fn init(kind: CellKind, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        match kind {
            CellKind::Vanilla => CellWeights::Vanilla(VanillaWeights::init(input, hidden, rng)),
            CellKind::Lstm => CellWeights::Lstm(LstmWeights::init(input, hidden, rng)),
            CellKind::Gru => CellWeights::Gru(GruWeights::init(input, hidden, rng)),
        }
    }

    pub fn kind(&self) -> CellKind {
        match self {
            CellWeights::Vanilla(_) => CellKind::Vanilla,
            CellWeights::Lstm(_) => CellKind::Lstm,
            CellWeights::Gru(_) => CellKind::Gru,
        }
    }

    /// `(input_dim, hidden_dim)`
    pub fn dims(&self) -> (usize, usize) {
        let w = match self {
            CellWeights::Vanilla(w) => &w.w,
            CellWeights::Lstm(w) => &w.w_xi,
            CellWeights::Gru(w) => &w.w_xz,
        };
        (w.cols(), w.rows())
    }

    pub fn zeros_like(&self) -> Self {
        let (e, h) = self.dims();
        CellWeights::zeros(self.kind(), e, h)
    }

    pub fn tensors(&self) -> Vec<(&'static str, TensorKind, &dyn Tensor)> {
        match self {
            CellWeights::Vanilla(w) => w.tensors(),
            CellWeights::Lstm(w) => w.tensors(),
            CellWeights::Gru(w) => w.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, TensorKind, &mut dyn Tensor)> {
        match self {
            CellWeights::Vanilla(w) => w.tensors_mut(),
            CellWeights::Lstm(w) => w.tensors_mut(),
            CellWeights::Gru(w) => w.tensors_mut(),
        }
    }
}

/// Recurrent state carried between steps; `c` only for LSTM.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub h: Vector,
    pub c: Option<Vector>,
}

impl CellState {
    pub fn zeros(kind: CellKind, hidden: usize) -> Self {
        CellState {
            h: Vector::zeros(hidden),
            c: (kind == CellKind::Lstm).then(|| Vector::zeros(hidden)),
        }
    }
}

/// The input and hidden masks one direction applies at every step.
#[derive(Clone, Debug)]
pub struct StepMasks {
    pub z_x: Arc<MaskVector>,
    pub z_h: Arc<MaskVector>,
}

#[derive(Clone, Debug)]
pub struct VanillaTape {
    pub x: Vector,
    pub h_prev: Vector,
    pub masks: Option<StepMasks>,
    pub x_in: Vector,
    pub h_in: Vector,
    pub pre: Vector,
    pub h: Vector,
}

#[derive(Clone, Debug)]
pub struct LstmTape {
    pub x: Vector,
    pub h_prev: Vector,
    pub c_prev: Vector,
    pub masks: Option<StepMasks>,
    pub x_in: Vector,
    pub h_in: Vector,
    pub pre_i: Vector,
    pub pre_f: Vector,
    pub pre_o: Vector,
    pub pre_g: Vector,
    pub i: Vector,
    pub f: Vector,
    pub o: Vector,
    pub g: Vector,
    pub c: Vector,
    pub tanh_c: Vector,
    pub h: Vector,
}

#[derive(Clone, Debug)]
pub struct GruTape {
    pub x: Vector,
    pub h_prev: Vector,
    pub masks: Option<StepMasks>,
    pub mask_candidate_hidden: bool,
    pub x_in: Vector,
    /// Hidden input of the update and reset gates.
    pub h_in: Vector,
    /// Hidden input of the candidate before the reset gate is applied.
    pub h_cand: Vector,
    pub pre_z: Vector,
    pub pre_r: Vector,
    pub pre_g: Vector,
    pub z: Vector,
    pub r: Vector,
    pub rh: Vector,
    pub g: Vector,
    pub h: Vector,
}

/// Everything the reverse step needs from one forward step.
#[derive(Clone, Debug)]
pub enum TapeStep {
    Vanilla(VanillaTape),
    Lstm(LstmTape),
    Gru(GruTape),
}

impl TapeStep {
    pub fn kind(&self) -> CellKind {
        match self {
            TapeStep::Vanilla(_) => CellKind::Vanilla,
            TapeStep::Lstm(_) => CellKind::Lstm,
            TapeStep::Gru(_) => CellKind::Gru,
        }
    }

    pub fn h(&self) -> &[f64] {
        match self {
            TapeStep::Vanilla(t) => &t.h,
            TapeStep::Lstm(t) => &t.h,
            TapeStep::Gru(t) => &t.h,
        }
    }

    pub fn masks(&self) -> Option<&StepMasks> {
        match self {
            TapeStep::Vanilla(t) => t.masks.as_ref(),
            TapeStep::Lstm(t) => t.masks.as_ref(),
            TapeStep::Gru(t) => t.masks.as_ref(),
        }
    }

    /// The state this step hands to the next one.
    pub fn state(&self) -> CellState {
        match self {
            TapeStep::Lstm(t) => CellState {
                h: t.h.clone(),
                c: Some(t.c.clone()),
            },
            _ => CellState {
                h: self.h().into(),
                c: None,
            },
        }
    }
}

fn check_step(
    op: &'static str,
    dims: (usize, usize),
    x: &[f64],
    h: &[f64],
    masks: Option<&StepMasks>,
) -> Result<()> {
    let (e, hd) = dims;
    if x.len() != e {
        return Err(shape_err(
            op,
            format!("input dim {e}"),
            format!("x_t {}", x.len()),
        ));
    }
    if h.len() != hd {
        return Err(shape_err(
            op,
            format!("hidden dim {hd}"),
            format!("h_prev {}", h.len()),
        ));
    }
    if let Some(m) = masks {
        if m.z_x.len() != e {
            return Err(shape_err(
                op,
                format!("input dim {e}"),
                format!("z_x {}", m.z_x.len()),
            ));
        }
        if m.z_h.len() != hd {
            return Err(shape_err(
                op,
                format!("hidden dim {hd}"),
                format!("z_h {}", m.z_h.len()),
            ));
        }
    }
    Ok(())
}

fn masked(v: &[f64], m: Option<&MaskVector>) -> Vector {
    match m {
        Some(m) => v
            .iter()
            .zip(m.iter())
            .map(|(a, b)| a * b)
            .collect::<Vec<_>>()
            .into(),
        None => v.into(),
    }
}

fn pre_activation(wx: &Matrix, x: &[f64], wh: &Matrix, h: &[f64], b: &[f64]) -> Vector {
    let mut pre = b.to_vec();
    wx.gemv_acc(x, &mut pre);
    wh.gemv_acc(h, &mut pre);
    pre.into()
}

fn map(v: &[f64], f: impl Fn(f64) -> f64) -> Vector {
    v.iter().map(|&a| f(a)).collect::<Vec<_>>().into()
}

fn vanilla_forward(
    w: &VanillaWeights,
    x: &[f64],
    h_prev: &[f64],
    masks: Option<&StepMasks>,
) -> Result<(Vector, TapeStep)> {
    check_step("vanilla_step", (w.w.cols(), w.w.rows()), x, h_prev, masks)?;
    let x_in = masked(x, masks.map(|m| &*m.z_x));
    let h_in = masked(h_prev, masks.map(|m| &*m.z_h));
    let pre = pre_activation(&w.w, &x_in, &w.u, &h_in, &w.b);
    let h = map(&pre, f64::tanh);
    let tape = TapeStep::Vanilla(VanillaTape {
        x: x.into(),
        h_prev: h_prev.into(),
        masks: masks.cloned(),
        x_in,
        h_in,
        pre,
        h: h.clone(),
    });
    Ok((h, tape))
}

pub fn vanilla_step(w: &VanillaWeights, x: &[f64], h_prev: &[f64]) -> Result<(Vector, TapeStep)> {
    vanilla_forward(w, x, h_prev, None)
}

pub fn vanilla_step_variational(
    w: &VanillaWeights,
    x: &[f64],
    h_prev: &[f64],
    z_x: &Arc<MaskVector>,
    z_h: &Arc<MaskVector>,
) -> Result<(Vector, TapeStep)> {
    let masks = StepMasks {
        z_x: z_x.clone(),
        z_h: z_h.clone(),
    };
    vanilla_forward(w, x, h_prev, Some(&masks))
}

fn lstm_forward(
    w: &LstmWeights,
    x: &[f64],
    state: &CellState,
    masks: Option<&StepMasks>,
) -> Result<(CellState, TapeStep)> {
    let c_prev = state
        .c
        .as_ref()
        .ok_or_else(|| Error::Tape("LSTM step needs a memory vector".into()))?;
    check_step("lstm_step", (w.w_xi.cols(), w.w_xi.rows()), x, &state.h, masks)?;
    if c_prev.len() != state.h.len() {
        return Err(shape_err(
            "lstm_step",
            state.h.len(),
            format!("c_prev {}", c_prev.len()),
        ));
    }
    let x_in = masked(x, masks.map(|m| &*m.z_x));
    let h_in = masked(&state.h, masks.map(|m| &*m.z_h));

    let pre_i = pre_activation(&w.w_xi, &x_in, &w.w_hi, &h_in, &w.b_i);
    let pre_f = pre_activation(&w.w_xf, &x_in, &w.w_hf, &h_in, &w.b_f);
    let pre_o = pre_activation(&w.w_xo, &x_in, &w.w_ho, &h_in, &w.b_o);
    let pre_g = pre_activation(&w.w_xg, &x_in, &w.w_hg, &h_in, &w.b_g);
    let i = map(&pre_i, sigm);
    let f = map(&pre_f, sigm);
    let o = map(&pre_o, sigm);
    let g = map(&pre_g, f64::tanh);

    let c: Vector = (0..c_prev.len())
        .map(|j| f[j] * c_prev[j] + i[j] * g[j])
        .collect::<Vec<_>>()
        .into();
    let tanh_c = map(&c, f64::tanh);
    let h: Vector = o
        .iter()
        .zip(tanh_c.iter())
        .map(|(a, b)| a * b)
        .collect::<Vec<_>>()
        .into();

    let next = CellState {
        h: h.clone(),
        c: Some(c.clone()),
    };
    let tape = TapeStep::Lstm(LstmTape {
        x: x.into(),
        h_prev: state.h.clone(),
        c_prev: c_prev.clone(),
        masks: masks.cloned(),
        x_in,
        h_in,
        pre_i,
        pre_f,
        pre_o,
        pre_g,
        i,
        f,
        o,
        g,
        c,
        tanh_c,
        h,
    });
    Ok((next, tape))
}

pub fn lstm_step(w: &LstmWeights, x: &[f64], state: &CellState) -> Result<(CellState, TapeStep)> {
    lstm_forward(w, x, state, None)
}

pub fn lstm_step_variational(
    w: &LstmWeights,
    x: &[f64],
    state: &CellState,
    z_x: &Arc<MaskVector>,
    z_h: &Arc<MaskVector>,
) -> Result<(CellState, TapeStep)> {
    let masks = StepMasks {
        z_x: z_x.clone(),
        z_h: z_h.clone(),
    };
    lstm_forward(w, x, state, Some(&masks))
}

fn gru_forward(
    w: &GruWeights,
    x: &[f64],
    state: &CellState,
    masks: Option<&StepMasks>,
    mask_candidate_hidden: bool,
) -> Result<(CellState, TapeStep)> {
    if state.c.is_some() {
        return Err(Error::Tape("GRU state carries no memory vector".into()));
    }
    check_step("gru_step", (w.w_xz.cols(), w.w_xz.rows()), x, &state.h, masks)?;
    let h_prev = &state.h;
    let x_in = masked(x, masks.map(|m| &*m.z_x));
    let h_in = masked(h_prev, masks.map(|m| &*m.z_h));
    let h_cand = if mask_candidate_hidden {
        h_in.clone()
    } else {
        h_prev.clone()
    };

    let pre_z = pre_activation(&w.w_xz, &x_in, &w.w_hz, &h_in, &w.b_z);
    let pre_r = pre_activation(&w.w_xr, &x_in, &w.w_hr, &h_in, &w.b_r);
    let z = map(&pre_z, sigm);
    let r = map(&pre_r, sigm);
    let rh: Vector = r
        .iter()
        .zip(h_cand.iter())
        .map(|(a, b)| a * b)
        .collect::<Vec<_>>()
        .into();
    let pre_g = pre_activation(&w.w_xg, &x_in, &w.w_hg, &rh, &w.b_g);
    let g = map(&pre_g, f64::tanh);
    let h: Vector = (0..h_prev.len())
        .map(|j| (1.0 - z[j]) * h_prev[j] + z[j] * g[j])
        .collect::<Vec<_>>()
        .into();

    let next = CellState {
        h: h.clone(),
        c: None,
    };
    let tape = TapeStep::Gru(GruTape {
        x: x.into(),
        h_prev: h_prev.clone(),
        masks: masks.cloned(),
        mask_candidate_hidden,
        x_in,
        h_in,
        h_cand,
        pre_z,
        pre_r,
        pre_g,
        z,
        r,
        rh,
        g,
        h,
    });
    Ok((next, tape))
}

pub fn gru_step(w: &GruWeights, x: &[f64], state: &CellState) -> Result<(CellState, TapeStep)> {
    gru_forward(w, x, state, None, false)
}

pub fn gru_step_variational(
    w: &GruWeights,
    x: &[f64],
    state: &CellState,
    z_x: &Arc<MaskVector>,
    z_h: &Arc<MaskVector>,
    mask_candidate_hidden: bool,
) -> Result<(CellState, TapeStep)> {
    let masks = StepMasks {
        z_x: z_x.clone(),
        z_h: z_h.clone(),
    };
    gru_forward(w, x, state, Some(&masks), mask_candidate_hidden)
}

/// Dispatches to the cell's forward step; `masks = None` is the plain form.
pub fn step(
    w: &CellWeights,
    x: &[f64],
    state: &CellState,
    masks: Option<&StepMasks>,
    mask_candidate_hidden: bool,
) -> Result<(CellState, TapeStep)> {
    match w {
        CellWeights::Vanilla(w) => {
            if state.c.is_some() {
                return Err(Error::Tape("vanilla state carries no memory vector".into()));
            }
            let (h, tape) = vanilla_forward(w, x, &state.h, masks)?;
            Ok((CellState { h, c: None }, tape))
        }
        CellWeights::Lstm(w) => lstm_forward(w, x, state, masks),
        CellWeights::Gru(w) => gru_forward(w, x, state, masks, mask_candidate_hidden),
    }
}

/// Deliberate backward defects, used to show the gradient checker catches
/// them.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InjectedFault {
    /// Negates the forget-gate pre-activation gradient of the LSTM.
    ForgetGateSign,
}

/// Gradients flowing out of one step into its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct StepGrads {
    pub x: Vector,
    pub h_prev: Vector,
    pub c_prev: Option<Vector>,
}

/// Reverse step: accumulates weight gradients into `acc` and returns the
/// gradients w.r.t. the step's inputs. Masks recorded in the tape act as
/// constants.
pub fn backward_step(
    w: &CellWeights,
    tape: &TapeStep,
    grad_h: &[f64],
    grad_c: Option<&[f64]>,
    acc: &mut CellWeights,
) -> Result<StepGrads> {
    backward_step_with(w, tape, grad_h, grad_c, acc, None)
}

#[doc(hidden)]
pub fn backward_step_with(
    w: &CellWeights,
    tape: &TapeStep,
    grad_h: &[f64],
    grad_c: Option<&[f64]>,
    acc: &mut CellWeights,
    fault: Option<InjectedFault>,
) -> Result<StepGrads> {
    if w.kind() != tape.kind() || acc.kind() != tape.kind() {
        return Err(Error::Tape(format!(
            "weights are {}, tape is {}, accumulator is {}",
            w.kind(),
            tape.kind(),
            acc.kind()
        )));
    }
    let hidden = tape.h().len();
    if grad_h.len() != hidden {
        return Err(shape_err(
            "backward_step",
            hidden,
            format!("grad_h {}", grad_h.len()),
        ));
    }
    if let Some(gc) = grad_c {
        if tape.kind() != CellKind::Lstm {
            return Err(Error::Tape(format!("{} has no memory gradient", tape.kind())));
        }
        if gc.len() != hidden {
            return Err(shape_err("backward_step", hidden, format!("grad_c {}", gc.len())));
        }
    }
    match (w, tape, acc) {
        (CellWeights::Vanilla(w), TapeStep::Vanilla(t), CellWeights::Vanilla(a)) => {
            Ok(vanilla_backward(w, t, grad_h, a))
        }
        (CellWeights::Lstm(w), TapeStep::Lstm(t), CellWeights::Lstm(a)) => {
            Ok(lstm_backward(w, t, grad_h, grad_c, a, fault))
        }
        (CellWeights::Gru(w), TapeStep::Gru(t), CellWeights::Gru(a)) => Ok(gru_backward(w, t, grad_h, a)),
        _ => unreachable!("kinds checked above"),
    }
}

fn unmask(grad: Vec<f64>, m: Option<&MaskVector>) -> Vector {
    masked(&grad, m)
}

fn vanilla_backward(w: &VanillaWeights, t: &VanillaTape, gh: &[f64], a: &mut VanillaWeights) -> StepGrads {
    let dpre: Vec<f64> = gh
        .iter()
        .zip(t.h.iter())
        .map(|(g, h)| g * (1.0 - h * h))
        .collect();
    a.w.outer_acc(&dpre, &t.x_in);
    a.u.outer_acc(&dpre, &t.h_in);
    for (b, d) in a.b.iter_mut().zip(&dpre) {
        *b += d;
    }
    let mut dx = vec![0.0; t.x.len()];
    w.w.gemv_t_acc(&dpre, &mut dx);
    let mut dh = vec![0.0; t.h_prev.len()];
    w.u.gemv_t_acc(&dpre, &mut dh);
    StepGrads {
        x: unmask(dx, t.masks.as_ref().map(|m| &*m.z_x)),
        h_prev: unmask(dh, t.masks.as_ref().map(|m| &*m.z_h)),
        c_prev: None,
    }
}

fn lstm_backward(
    w: &LstmWeights,
    t: &LstmTape,
    gh: &[f64],
    gc: Option<&[f64]>,
    a: &mut LstmWeights,
    fault: Option<InjectedFault>,
) -> StepGrads {
    let n = gh.len();
    let mut dpre_i = vec![0.0; n];
    let mut dpre_f = vec![0.0; n];
    let mut dpre_o = vec![0.0; n];
    let mut dpre_g = vec![0.0; n];
    let mut dc_prev = vec![0.0; n];
    for j in 0..n {
        let d_o = gh[j] * t.tanh_c[j];
        let dc = gc.map_or(0.0, |g| g[j]) + gh[j] * t.o[j] * (1.0 - t.tanh_c[j] * t.tanh_c[j]);
        let di = dc * t.g[j];
        let dg = dc * t.i[j];
        let df = dc * t.c_prev[j];
        dc_prev[j] = dc * t.f[j];
        dpre_i[j] = di * t.i[j] * (1.0 - t.i[j]);
        dpre_f[j] = df * t.f[j] * (1.0 - t.f[j]);
        dpre_o[j] = d_o * t.o[j] * (1.0 - t.o[j]);
        dpre_g[j] = dg * (1.0 - t.g[j] * t.g[j]);
    }
    if fault == Some(InjectedFault::ForgetGateSign) {
        dpre_f.iter_mut().for_each(|d| *d = -*d);
    }

    let mut dx = vec![0.0; t.x.len()];
    let mut dh = vec![0.0; n];
    let gates = [
        (&dpre_i, &w.w_xi, &w.w_hi, &mut a.w_xi, &mut a.w_hi, &mut a.b_i),
        (&dpre_f, &w.w_xf, &w.w_hf, &mut a.w_xf, &mut a.w_hf, &mut a.b_f),
        (&dpre_o, &w.w_xo, &w.w_ho, &mut a.w_xo, &mut a.w_ho, &mut a.b_o),
        (&dpre_g, &w.w_xg, &w.w_hg, &mut a.w_xg, &mut a.w_hg, &mut a.b_g),
    ];
    for (dpre, wx, wh, ax, ah, ab) in gates {
        ax.outer_acc(dpre, &t.x_in);
        ah.outer_acc(dpre, &t.h_in);
        for (b, d) in ab.iter_mut().zip(dpre.iter()) {
            *b += d;
        }
        wx.gemv_t_acc(dpre, &mut dx);
        wh.gemv_t_acc(dpre, &mut dh);
    }
    StepGrads {
        x: unmask(dx, t.masks.as_ref().map(|m| &*m.z_x)),
        h_prev: unmask(dh, t.masks.as_ref().map(|m| &*m.z_h)),
        c_prev: Some(dc_prev.into()),
    }
}

fn gru_backward(w: &GruWeights, t: &GruTape, gh: &[f64], a: &mut GruWeights) -> StepGrads {
    let n = gh.len();
    let mut dpre_z = vec![0.0; n];
    let mut dpre_g = vec![0.0; n];
    // Direct path through (1 - z) ⊙ h_prev.
    let mut dh_prev: Vec<f64> = (0..n).map(|j| gh[j] * (1.0 - t.z[j])).collect();
    for j in 0..n {
        let dz = gh[j] * (t.g[j] - t.h_prev[j]);
        let dg = gh[j] * t.z[j];
        dpre_z[j] = dz * t.z[j] * (1.0 - t.z[j]);
        dpre_g[j] = dg * (1.0 - t.g[j] * t.g[j]);
    }

    let mut dx = vec![0.0; t.x.len()];
    a.w_xg.outer_acc(&dpre_g, &t.x_in);
    a.w_hg.outer_acc(&dpre_g, &t.rh);
    for (b, d) in a.b_g.iter_mut().zip(&dpre_g) {
        *b += d;
    }
    w.w_xg.gemv_t_acc(&dpre_g, &mut dx);
    let mut drh = vec![0.0; n];
    w.w_hg.gemv_t_acc(&dpre_g, &mut drh);

    let mut dpre_r = vec![0.0; n];
    let mut dh_cand = vec![0.0; n];
    for j in 0..n {
        let dr = drh[j] * t.h_cand[j];
        dh_cand[j] = drh[j] * t.r[j];
        dpre_r[j] = dr * t.r[j] * (1.0 - t.r[j]);
    }
    let z_h = t.masks.as_ref().map(|m| &*m.z_h);
    let cand_mask = if t.mask_candidate_hidden { z_h } else { None };
    for (d, c) in dh_prev.iter_mut().zip(unmask(dh_cand, cand_mask).iter()) {
        *d += c;
    }

    let mut dh_in = vec![0.0; n];
    for (dpre, wx, wh, ax, ah, ab) in [
        (&dpre_z, &w.w_xz, &w.w_hz, &mut a.w_xz, &mut a.w_hz, &mut a.b_z),
        (&dpre_r, &w.w_xr, &w.w_hr, &mut a.w_xr, &mut a.w_hr, &mut a.b_r),
    ] {
        ax.outer_acc(dpre, &t.x_in);
        ah.outer_acc(dpre, &t.h_in);
        for (b, d) in ab.iter_mut().zip(dpre.iter()) {
            *b += d;
        }
        wx.gemv_t_acc(dpre, &mut dx);
        wh.gemv_t_acc(dpre, &mut dh_in);
    }
    for (d, g) in dh_prev.iter_mut().zip(unmask(dh_in, z_h).iter()) {
        *d += g;
    }
    StepGrads {
        x: unmask(dx, t.masks.as_ref().map(|m| &*m.z_x)),
        h_prev: dh_prev.into(),
        c_prev: None,
    }
}
