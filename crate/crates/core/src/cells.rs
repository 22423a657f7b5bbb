//! Convolutional recurrent cells.
//!
//! Every cell maps `(E_n, (h_{n-1}, c_{n-1}))` to `(h_n, (h_n, c_n))`, where
//! `E_n` is the encoded frame and all maps are `(B, F, H, W)` with `F` feature
//! channels. Writing `psi(x) = x * sigmoid(x)` and `conv` for a 3x3
//! convolution with its own kernel and bias, the self-gated memory cell is
//!
//! ```text
//! i_n = psi(conv(h_{n-1} ++ E_n))
//! t_n = psi(conv(c_{n-1}))
//! w_n = sigmoid(conv(i_n ++ t_n))
//! c_n = w_n * t_n + (1 - w_n) * i_n
//! h_n = psi(conv(c_{n-1} ++ (c_n + E_n)))
//! ```
//!
//! with `++` channel concatenation. The `Type*` kinds are ablations of this
//! cell; LSTM, GRU and vanilla are the usual convolutional baselines.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Activation, Bound, ConvLayer, ConvSpec, ParamRegistry};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    Sgm,
    /// Output gate drops the `c_{n-1}` block: `h = psi(conv(c_n + E_n))`.
    SgmType1,
    /// Output gate drops `E_n`: `h = psi(conv(c_{n-1} ++ c_n))`.
    SgmType2,
    /// Output gate reads only the new state: `h = psi(conv(c_n))`.
    SgmType3,
    /// No transform gate; `c_{n-1}` stands where `t_n` stood.
    SgmType4,
    /// Every self-gated layer becomes `tanh(conv_a(x)) * sigmoid(conv_b(x))`,
    /// output gate wired like an LSTM's.
    SgmType5,
    /// Weight map computed from `h_{n-1} ++ E_n` only, blending `c_{n-1}` and `i_n`.
    SgmType6,
    /// Forget from `c_{n-1}` first, then add the gated input.
    SgmType7,
    Lstm,
    Gru,
    Vanilla,
}

impl CellKind {
    pub const ALL: [CellKind; 11] = [
        CellKind::Sgm,
        CellKind::SgmType1,
        CellKind::SgmType2,
        CellKind::SgmType3,
        CellKind::SgmType4,
        CellKind::SgmType5,
        CellKind::SgmType6,
        CellKind::SgmType7,
        CellKind::Lstm,
        CellKind::Gru,
        CellKind::Vanilla,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Sgm => "sgm",
            CellKind::SgmType1 => "type1",
            CellKind::SgmType2 => "type2",
            CellKind::SgmType3 => "type3",
            CellKind::SgmType4 => "type4",
            CellKind::SgmType5 => "type5",
            CellKind::SgmType6 => "type6",
            CellKind::SgmType7 => "type7",
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
            CellKind::Vanilla => "vanilla",
        }
    }

    /// Kinds whose new state is the convex blend `w * t + (1 - w) * i`.
    pub fn blends_input_and_transform(self) -> bool {
        matches!(
            self,
            CellKind::Sgm | CellKind::SgmType1 | CellKind::SgmType2 | CellKind::SgmType3 | CellKind::SgmType5
        )
    }

    /// Gate layout: name, input width as a multiple of `F`, activation.
    fn gates(self) -> &'static [(&'static str, usize, Activation)] {
        use Activation::*;
        match self {
            CellKind::Sgm => &[
                ("input_gate", 2, Swish),
                ("transform_gate", 1, Swish),
                ("update_gate", 2, Sigmoid),
                ("output_gate", 2, Swish),
            ],
            CellKind::SgmType1 | CellKind::SgmType3 => &[
                ("input_gate", 2, Swish),
                ("transform_gate", 1, Swish),
                ("update_gate", 2, Sigmoid),
                ("output_gate", 1, Swish),
            ],
            CellKind::SgmType2 => &[
                ("input_gate", 2, Swish),
                ("transform_gate", 1, Swish),
                ("update_gate", 2, Sigmoid),
                ("output_gate", 2, Swish),
            ],
            CellKind::SgmType4 | CellKind::SgmType6 => &[
                ("input_gate", 2, Swish),
                ("update_gate", 2, Sigmoid),
                ("output_gate", 2, Swish),
            ],
            CellKind::SgmType5 => &[
                ("input_gate_tanh", 2, Tanh),
                ("input_gate_sigmoid", 2, Sigmoid),
                ("transform_gate_tanh", 1, Tanh),
                ("transform_gate_sigmoid", 1, Sigmoid),
                ("update_gate", 2, Sigmoid),
                ("output_gate_tanh", 1, Tanh),
                ("output_gate_sigmoid", 2, Sigmoid),
            ],
            CellKind::SgmType7 => &[
                ("input_gate", 2, Swish),
                ("forget_gate", 2, Sigmoid),
                ("output_gate", 2, Swish),
            ],
            CellKind::Lstm => &[
                ("forget_gate", 2, Sigmoid),
                ("input_gate", 2, Sigmoid),
                ("output_gate", 2, Sigmoid),
                ("candidate", 2, Tanh),
            ],
            CellKind::Gru => &[
                ("update_gate", 2, Sigmoid),
                ("reset_gate", 2, Sigmoid),
                ("candidate", 2, Tanh),
            ],
            CellKind::Vanilla => &[("candidate", 2, Tanh)],
        }
    }

    /// Scalar parameters of one cell with `features` channels and 3x3 kernels.
    pub fn param_count(self, features: usize) -> usize {
        self.gates()
            .iter()
            .map(|&(_, mult, _)| features * features * mult * 9 + features)
            .sum()
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        CellKind::ALL
            .into_iter()
            .find(|k| k.name() == key || (key.starts_with("sgm_") && k.name() == &key[4..]))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown cell kind `{}`", s)))
    }
}

/// Short-term output `h` and internal memory `c` of a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellState {
    pub h: Var,
    pub c: Var,
}

impl CellState {
    /// All-zero initial state.
    pub fn zeros<T: Element>(tape: &Tape<T>, shape: [usize; 4]) -> Self {
        CellState {
            h: tape.constant(Tensor::zeros(shape)),
            c: tape.constant(Tensor::zeros(shape)),
        }
    }
}

/// Intermediate maps of one step, for inspection in tests and tools.
#[derive(Clone, Copy, Debug)]
pub struct StepTrace {
    pub h: Var,
    pub c: Var,
    /// `i_n` for kinds with an input gate.
    pub input: Option<Var>,
    /// `t_n` for kinds with a transform gate.
    pub transform: Option<Var>,
    /// Blend weight `w_n` (or forget weight for LSTM-style kinds).
    pub weight: Option<Var>,
}

/// One recurrent cell with its own parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    kind: CellKind,
    features: usize,
    prefix: String,
    gates: Vec<(&'static str, ConvLayer)>,
}

pub(crate) fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Cell {
    /// Create the gates of `kind` under `prefix` (e.g. `fwd_cell`).
    pub fn register<T: Element>(
        registry: &mut ParamRegistry<T>,
        prefix: &str,
        kind: CellKind,
        features: usize,
        seed: u64,
    ) -> Result<Self> {
        let gates = kind
            .gates()
            .iter()
            .enumerate()
            .map(|(i, &(name, mult, act))| {
                let layer = ConvLayer::register(
                    registry,
                    &format!("{}.{}", prefix, name),
                    ConvSpec::new(mult * features, features, act),
                    derive_seed(seed, i as u64),
                )?;
                Ok((name, layer))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Cell {
            kind,
            features,
            prefix: prefix.to_string(),
            gates,
        })
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn param_count(&self) -> usize {
        self.gates.iter().map(|(_, l)| l.param_count()).sum()
    }

    pub fn gate(&self, name: &str) -> Option<&ConvLayer> {
        self.gates.iter().find(|(n, _)| *n == name).map(|(_, l)| l)
    }

    fn apply(&self, tape_params: (&Tape<impl Element>, &Bound), name: &str, x: Var) -> Result<Var> {
        let (tape, params) = tape_params;
        self.gate(name)
            .expect("gate layout fixed by kind")
            .forward(tape, params, x)
    }

    /// Advance one timestep; returns `h_n` and the new state.
    pub fn step<T: Element>(
        &self,
        tape: &Tape<T>,
        params: &Bound,
        input: Var,
        state: CellState,
    ) -> Result<(Var, CellState)> {
        let trace = self.step_traced(tape, params, input, state)?;
        Ok((trace.h, CellState { h: trace.h, c: trace.c }))
    }

    pub fn step_traced<T: Element>(
        &self,
        tape: &Tape<T>,
        params: &Bound,
        e: Var,
        state: CellState,
    ) -> Result<StepTrace> {
        self.check_shapes(tape, e, state)?;
        let g = (tape, params);
        let CellState { h: h_prev, c: c_prev } = state;
        let blend = |w: Var, a: Var, b: Var| -> Result<Var> {
            // w * a + (1 - w) * b
            let wa = tape.mul(w, a)?;
            let rest = tape.mul(tape.one_minus(w), b)?;
            tape.add(wa, rest)
        };

        let trace = match self.kind {
            CellKind::Sgm | CellKind::SgmType1 | CellKind::SgmType2 | CellKind::SgmType3 => {
                let he = tape.concat_channels(h_prev, e)?;
                let i = self.apply(g, "input_gate", he)?;
                let t = self.apply(g, "transform_gate", c_prev)?;
                let w = self.apply(g, "update_gate", tape.concat_channels(i, t)?)?;
                let c = blend(w, t, i)?;
                let out_in = match self.kind {
                    CellKind::Sgm => tape.concat_channels(c_prev, tape.add(c, e)?)?,
                    CellKind::SgmType1 => tape.add(c, e)?,
                    CellKind::SgmType2 => tape.concat_channels(c_prev, c)?,
                    _ => c,
                };
                let h = self.apply(g, "output_gate", out_in)?;
                StepTrace {
                    h,
                    c,
                    input: Some(i),
                    transform: Some(t),
                    weight: Some(w),
                }
            }
            CellKind::SgmType4 => {
                let i = self.apply(g, "input_gate", tape.concat_channels(h_prev, e)?)?;
                let w = self.apply(g, "update_gate", tape.concat_channels(i, c_prev)?)?;
                let c = blend(w, c_prev, i)?;
                let h = self.apply(g, "output_gate", tape.concat_channels(c_prev, tape.add(c, e)?)?)?;
                StepTrace {
                    h,
                    c,
                    input: Some(i),
                    transform: None,
                    weight: Some(w),
                }
            }
            CellKind::SgmType5 => {
                let he = tape.concat_channels(h_prev, e)?;
                let i = tape.mul(
                    self.apply(g, "input_gate_tanh", he)?,
                    self.apply(g, "input_gate_sigmoid", he)?,
                )?;
                let t = tape.mul(
                    self.apply(g, "transform_gate_tanh", c_prev)?,
                    self.apply(g, "transform_gate_sigmoid", c_prev)?,
                )?;
                let w = self.apply(g, "update_gate", tape.concat_channels(i, t)?)?;
                let c = blend(w, t, i)?;
                let h = tape.mul(
                    self.apply(g, "output_gate_tanh", c)?,
                    self.apply(g, "output_gate_sigmoid", he)?,
                )?;
                StepTrace {
                    h,
                    c,
                    input: Some(i),
                    transform: Some(t),
                    weight: Some(w),
                }
            }
            CellKind::SgmType6 => {
                let he = tape.concat_channels(h_prev, e)?;
                let i = self.apply(g, "input_gate", he)?;
                let w = self.apply(g, "update_gate", he)?;
                let c = blend(w, c_prev, i)?;
                let h = self.apply(g, "output_gate", tape.concat_channels(c_prev, tape.add(c, e)?)?)?;
                StepTrace {
                    h,
                    c,
                    input: Some(i),
                    transform: None,
                    weight: Some(w),
                }
            }
            CellKind::SgmType7 => {
                let he = tape.concat_channels(h_prev, e)?;
                let w = self.apply(g, "forget_gate", he)?;
                let kept = tape.mul(w, c_prev)?;
                let i = self.apply(g, "input_gate", he)?;
                let c = tape.add(kept, i)?;
                let h = self.apply(g, "output_gate", tape.concat_channels(c_prev, tape.add(c, e)?)?)?;
                StepTrace {
                    h,
                    c,
                    input: Some(i),
                    transform: None,
                    weight: Some(w),
                }
            }
            CellKind::Lstm => {
                let he = tape.concat_channels(h_prev, e)?;
                let f = self.apply(g, "forget_gate", he)?;
                let i = self.apply(g, "input_gate", he)?;
                let o = self.apply(g, "output_gate", he)?;
                let cand = self.apply(g, "candidate", he)?;
                let c = tape.add(tape.mul(f, c_prev)?, tape.mul(i, cand)?)?;
                let h = tape.mul(o, tape.tanh(c))?;
                StepTrace {
                    h,
                    c,
                    input: Some(i),
                    transform: None,
                    weight: Some(f),
                }
            }
            CellKind::Gru => {
                let he = tape.concat_channels(h_prev, e)?;
                let z = self.apply(g, "update_gate", he)?;
                let r = self.apply(g, "reset_gate", he)?;
                let rh = tape.mul(r, h_prev)?;
                let cand = self.apply(g, "candidate", tape.concat_channels(rh, e)?)?;
                let h = blend(z, h_prev, cand)?;
                StepTrace {
                    h,
                    c: c_prev,
                    input: None,
                    transform: None,
                    weight: Some(z),
                }
            }
            CellKind::Vanilla => {
                let h = self.apply(g, "candidate", tape.concat_channels(h_prev, e)?)?;
                StepTrace {
                    h,
                    c: c_prev,
                    input: None,
                    transform: None,
                    weight: None,
                }
            }
        };
        Ok(trace)
    }

    fn check_shapes<T: Element>(&self, tape: &Tape<T>, e: Var, state: CellState) -> Result<()> {
        let es = tape.shape(e);
        if es.len() != 4 || es[1] != self.features {
            return Err(Error::InvalidShape {
                op: "cell step",
                detail: format!("input must be (B, {}, H, W), got {:?}", self.features, es),
            });
        }
        for s in [state.h, state.c] {
            let ss = tape.shape(s);
            if ss != es {
                return Err(Error::ShapeMismatch {
                    op: "cell step",
                    lhs: es,
                    rhs: ss,
                });
            }
        }
        Ok(())
    }
}
