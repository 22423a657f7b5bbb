//! The fusion network: a shared encoder, forward and reverse recurrent cells,
//! and a dilated-convolution decoder.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::cells::{derive_seed, Cell, CellKind, CellState};
use crate::data::ExposureSequence;
use crate::error::{Error, Result};
use crate::hdr::lift_to_hdr;
use crate::layers::{Activation, Bound, ConvLayer, ConvSpec, ParamRegistry};
use crate::tensor::{Element, Tensor};

/// Dilation rates of the parallel branches in a decoder block.
pub const SDC_DILATIONS: [usize; 4] = [1, 2, 4, 8];

/// Channels of one encoder input: LDR frame plus its linearized version.
const FRAME_CHANNELS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Unidirectional,
    Bidirectional,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Unidirectional => "uni",
            Mode::Bidirectional => "bi",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uni" | "unidirectional" => Ok(Mode::Unidirectional),
            "bi" | "bidirectional" => Ok(Mode::Bidirectional),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode `{}` (expected uni or bi)",
                other
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub cell: CellKind,
    pub mode: Mode,
    pub features: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            cell: CellKind::Sgm,
            mode: Mode::Bidirectional,
            features: 64,
            seed: 0,
        }
    }
}

/// Four parallel dilated convolutions whose outputs are concatenated.
#[derive(Clone, Debug, PartialEq)]
pub struct SdcBlock {
    branches: Vec<ConvLayer>,
}

impl SdcBlock {
    fn register<T: Element>(
        registry: &mut ParamRegistry<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        seed: u64,
    ) -> Result<Self> {
        if !out_ch.is_multiple_of(SDC_DILATIONS.len()) {
            return Err(Error::InvalidArgument(format!(
                "block width {} is not divisible by {} branches",
                out_ch,
                SDC_DILATIONS.len()
            )));
        }
        let per_branch = out_ch / SDC_DILATIONS.len();
        let branches = SDC_DILATIONS
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                ConvLayer::register(
                    registry,
                    &format!("{}.d{}", name, d),
                    ConvSpec::new(in_ch, per_branch, Activation::Swish).dilated(d),
                    derive_seed(seed, i as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SdcBlock { branches })
    }

    pub fn branches(&self) -> &[ConvLayer] {
        &self.branches
    }

    pub fn forward<T: Element>(&self, tape: &Tape<T>, params: &Bound, x: Var) -> Result<Var> {
        let mut out = self.branches[0].forward(tape, params, x)?;
        for b in &self.branches[1..] {
            let y = b.forward(tape, params, x)?;
            out = tape.concat_channels(out, y)?;
        }
        Ok(out)
    }
}

/// Frames of several same-sized sequences stacked along the batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch<T> {
    /// Per timestep, `(B, 6, H, W)`: each item's frame and its linearization.
    pub frames: Vec<Tensor<T>>,
    /// `(B, 6, H, W)` reference frames, same layout.
    pub reference: Tensor<T>,
    /// `(B, 3, H, W)` ground truth when every item has one.
    pub target: Option<Tensor<T>>,
}

/// `(6, H, W)`: the frame and its linearization.
fn frame_input<T: Element>(ldr: &Tensor<f32>, exposure: f64) -> Result<Tensor<T>> {
    let ldr: Tensor<T> = ldr.cast();
    let hdr = lift_to_hdr(&ldr, exposure)?;
    let [c, h, w] = ldr.dims3()?;
    let stacked = Tensor::concat_channels(&ldr.reshape([1, c, h, w])?, &hdr.reshape([1, c, h, w])?)?;
    stacked.reshape([2 * c, h, w])
}

impl<T: Element> SequenceBatch<T> {
    /// Stack sequences that agree in length and frame size.
    pub fn from_sequences(seqs: &[ExposureSequence]) -> Result<Self> {
        let first = seqs
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        for s in seqs {
            if s.len() != first.len() || s.size() != first.size() {
                return Err(Error::InvalidArgument(format!(
                    "batch items must share length and size: {} frames of {:?} vs {} frames of {:?}",
                    first.len(),
                    first.size(),
                    s.len(),
                    s.size()
                )));
            }
        }
        let mut frames = Vec::with_capacity(first.len());
        for n in 0..first.len() {
            let items = seqs
                .iter()
                .map(|s| frame_input(&s.frames()[n], s.exposure_times()[n]))
                .collect::<Result<Vec<_>>>()?;
            frames.push(Tensor::stack(&items)?);
        }
        let reference = Tensor::stack(
            &seqs
                .iter()
                .map(|s| frame_input(s.reference(), s.exposure_times()[s.ref_index()]))
                .collect::<Result<Vec<_>>>()?,
        )?;
        let target = if seqs.iter().all(|s| s.hdr_gt().is_some()) {
            let gts: Vec<Tensor<T>> = seqs.iter().map(|s| s.hdr_gt().expect("checked").cast()).collect();
            Some(Tensor::stack(&gts)?)
        } else {
            None
        };
        Ok(SequenceBatch {
            frames,
            reference,
            target,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.reference.shape()[0]
    }
}

/// Parameters and structure of the full model.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionNet<T> {
    config: NetConfig,
    registry: ParamRegistry<T>,
    encoder: Vec<ConvLayer>,
    fwd_cell: Cell,
    rev_cell: Option<Cell>,
    decoder: Vec<SdcBlock>,
    head: ConvLayer,
}

impl<T: Element> FusionNet<T> {
    pub fn new(config: NetConfig) -> Result<Self> {
        if config.features == 0 {
            return Err(Error::InvalidArgument("feature width must be positive".into()));
        }
        let f = config.features;
        let seed = |i: u64| derive_seed(config.seed, i);
        let mut reg = ParamRegistry::new();
        let encoder = vec![
            ConvLayer::register(
                &mut reg,
                "encoder.0",
                ConvSpec::new(2 * FRAME_CHANNELS, f, Activation::Swish),
                seed(0),
            )?,
            ConvLayer::register(&mut reg, "encoder.1", ConvSpec::new(f, f, Activation::Swish), seed(1))?,
        ];
        let fwd_cell = Cell::register(&mut reg, "fwd_cell", config.cell, f, seed(2))?;
        let rev_cell = match config.mode {
            Mode::Bidirectional => Some(Cell::register(&mut reg, "rev_cell", config.cell, f, seed(3))?),
            Mode::Unidirectional => None,
        };
        let decoder_in = match config.mode {
            Mode::Bidirectional => 2 * f,
            Mode::Unidirectional => f,
        };
        let decoder = vec![
            SdcBlock::register(&mut reg, "decoder.sdc0", decoder_in, f, seed(4))?,
            SdcBlock::register(&mut reg, "decoder.sdc1", f, f, seed(5))?,
        ];
        let head = ConvLayer::register(
            &mut reg,
            "decoder.out",
            ConvSpec::new(f, 3, Activation::Sigmoid),
            seed(6),
        )?;
        Ok(FusionNet {
            config,
            registry: reg,
            encoder,
            fwd_cell,
            rev_cell,
            decoder,
            head,
        })
    }

    /// Build the architecture of `config` and take every parameter from
    /// `params`, which must hold exactly the same names and shapes.
    pub fn from_params(config: NetConfig, params: ParamRegistry<T>) -> Result<Self> {
        let mut net = Self::new(config)?;
        if params.len() != net.registry.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                net.registry.len(),
                params.len()
            )));
        }
        for (name, value) in params.iter() {
            net.registry.set(name, value.clone())?;
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamRegistry<T> {
        &self.registry
    }

    pub fn params_mut(&mut self) -> &mut ParamRegistry<T> {
        &mut self.registry
    }

    pub fn param_count(&self) -> usize {
        self.registry.param_count()
    }

    pub fn fwd_cell(&self) -> &Cell {
        &self.fwd_cell
    }

    pub fn rev_cell(&self) -> Option<&Cell> {
        self.rev_cell.as_ref()
    }

    pub fn encoder(&self) -> &[ConvLayer] {
        &self.encoder
    }

    pub fn decoder(&self) -> &[SdcBlock] {
        &self.decoder
    }

    pub fn head(&self) -> &ConvLayer {
        &self.head
    }

    /// Encoded features `E_n`, one `(B, F, H, W)` map per timestep.
    pub fn encode(&self, tape: &Tape<T>, params: &Bound, batch: &SequenceBatch<T>) -> Result<Vec<Var>> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("cannot encode an empty sequence".into()));
        }
        let reference = tape.constant(batch.reference.clone());
        batch
            .frames
            .iter()
            .map(|frame| {
                let x = tape.concat_channels(tape.constant(frame.clone()), reference)?;
                let mut e = x;
                for layer in &self.encoder {
                    e = layer.forward(tape, params, e)?;
                }
                Ok(e)
            })
            .collect()
    }

    /// Run `cell` over `features` in the given order from a zero state and
    /// return every hidden map.
    fn run_cell<'a>(
        &self,
        tape: &Tape<T>,
        params: &Bound,
        cell: &Cell,
        features: impl Iterator<Item = &'a Var>,
        shape: [usize; 4],
    ) -> Result<Var> {
        let mut state = CellState::zeros(tape, shape);
        let mut h = None;
        for &e in features {
            let (out, next) = cell.step(tape, params, e, state)?;
            state = next;
            h = Some(out);
        }
        h.ok_or_else(|| Error::InvalidArgument("cannot unroll an empty sequence".into()))
    }

    /// Final hidden maps of the forward cell (after `E_N`) and, in
    /// bidirectional mode, of the reverse cell (after `E_1`).
    pub fn unroll(&self, tape: &Tape<T>, params: &Bound, features: &[Var]) -> Result<(Var, Option<Var>)> {
        let first = features
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot unroll an empty sequence".into()))?;
        let shape_vec = tape.shape(*first);
        for &e in features {
            if tape.shape(e) != shape_vec {
                return Err(Error::ShapeMismatch {
                    op: "unroll",
                    lhs: shape_vec,
                    rhs: tape.shape(e),
                });
            }
        }
        let shape: [usize; 4] = shape_vec.as_slice().try_into().map_err(|_| Error::InvalidShape {
            op: "unroll",
            detail: format!("features must be (B, F, H, W), got {:?}", shape_vec),
        })?;
        let h_fwd = self.run_cell(tape, params, &self.fwd_cell, features.iter(), shape)?;
        let h_rev = match &self.rev_cell {
            Some(cell) => Some(self.run_cell(tape, params, cell, features.iter().rev(), shape)?),
            None => None,
        };
        Ok((h_fwd, h_rev))
    }

    /// Map the final hidden maps to the HDR estimate in `(0, 1)`.
    pub fn decode(&self, tape: &Tape<T>, params: &Bound, h_fwd: Var, h_rev: Option<Var>) -> Result<Var> {
        let mut x = match (self.config.mode, h_rev) {
            (Mode::Bidirectional, Some(r)) => tape.concat_channels(h_fwd, r)?,
            (Mode::Unidirectional, None) => h_fwd,
            (mode, r) => {
                return Err(Error::InvalidArgument(format!(
                    "{} decoder given {} hidden maps",
                    mode,
                    if r.is_some() { 2 } else { 1 }
                )))
            }
        };
        for block in &self.decoder {
            x = block.forward(tape, params, x)?;
        }
        self.head.forward(tape, params, x)
    }

    /// Encode, unroll and decode; returns `(B, 3, H, W)`.
    pub fn forward(&self, tape: &Tape<T>, params: &Bound, batch: &SequenceBatch<T>) -> Result<Var> {
        let features = self.encode(tape, params, batch)?;
        let (h_fwd, h_rev) = self.unroll(tape, params, &features)?;
        self.decode(tape, params, h_fwd, h_rev)
    }

    /// Fuse one sequence without recording gradients; returns `(3, H, W)`.
    pub fn predict(&self, seq: &ExposureSequence) -> Result<Tensor<T>> {
        let batch = SequenceBatch::from_sequences(std::slice::from_ref(seq))?;
        let tape = Tape::new();
        let params = self.registry.bind_frozen(&tape);
        let y = self.forward(&tape, &params, &batch)?;
        let out = tape.value(y);
        out.index_outer(0)
    }

    /// Parameters of the network that, fed the reversed sequence, reproduces
    /// this network's output: the two cells trade places and the decoder's
    /// first convolutions swap their input halves.
    pub fn mirrored(&self) -> Result<Self> {
        if self.config.mode != Mode::Bidirectional {
            return Err(Error::InvalidArgument(
                "only a bidirectional network has a mirror".into(),
            ));
        }
        let mut out = self.clone();
        let names: Vec<String> = self.registry.names().map(str::to_string).collect();
        for name in &names {
            let value = self.registry.get(name).expect("own name");
            if let Some(rest) = name.strip_prefix("fwd_cell.") {
                out.registry.set(&format!("rev_cell.{}", rest), value.clone())?;
            } else if let Some(rest) = name.strip_prefix("rev_cell.") {
                out.registry.set(&format!("fwd_cell.{}", rest), value.clone())?;
            }
        }
        let f = self.config.features;
        for branch in self.decoder[0].branches() {
            let (name, kernel) = self.registry.by_id(branch.kernel);
            let [o, i, kh, kw] = kernel.dims4()?;
            let tap = kh * kw;
            let src = kernel.data();
            let swapped = Tensor::from_fn([o, i, kh, kw], |idx| {
                let (oc, rem) = (idx / (i * tap), idx % (i * tap));
                let (ic, k) = (rem / tap, rem % tap);
                let from = (ic + f) % (2 * f);
                src[(oc * i + from) * tap + k]
            });
            out.registry.set(name, swapped)?;
        }
        Ok(out)
    }

    pub fn cast<U: Element>(&self) -> FusionNet<U> {
        FusionNet {
            config: self.config,
            registry: self.registry.cast(),
            encoder: self.encoder.clone(),
            fwd_cell: self.fwd_cell.clone(),
            rev_cell: self.rev_cell.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SceneSpec};

    fn small(cell: CellKind, mode: Mode) -> NetConfig {
        NetConfig {
            cell,
            mode,
            features: 8,
            seed: 1,
        }
    }

    fn scene(n: usize) -> ExposureSequence {
        generate(&SceneSpec {
            height: 8,
            width: 8,
            ..SceneSpec::default().with_frames(n)
        })
        .unwrap()
    }

    #[test]
    fn full_size_counts() {
        let bi = FusionNet::<f32>::new(NetConfig::default()).unwrap();
        assert_eq!(bi.params().param_count_with_prefix("fwd_cell."), 258_304);
        assert_eq!(bi.params().param_count_with_prefix("rev_cell."), 258_304);
        let uni = FusionNet::<f32>::new(NetConfig {
            mode: Mode::Unidirectional,
            ..NetConfig::default()
        })
        .unwrap();
        assert!(uni.param_count() < bi.param_count());
        assert!(uni.rev_cell().is_none());
        // the two cells are initialized independently
        assert_ne!(
            bi.params().get("fwd_cell.input_gate.kernel"),
            bi.params().get("rev_cell.input_gate.kernel")
        );
    }

    #[test]
    fn output_in_unit_interval() {
        for mode in [Mode::Bidirectional, Mode::Unidirectional] {
            let net = FusionNet::<f64>::new(small(CellKind::Sgm, mode)).unwrap();
            for n in 1..=4 {
                let y = net.predict(&scene(n)).unwrap();
                assert_eq!(y.shape(), &[3, 8, 8]);
                assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn from_params_checks_layout() {
        let net = FusionNet::<f32>::new(small(CellKind::Sgm, Mode::Bidirectional)).unwrap();
        let again = FusionNet::from_params(*net.config(), net.params().clone()).unwrap();
        assert_eq!(again, net);
        let other = FusionNet::<f32>::new(small(CellKind::Gru, Mode::Bidirectional)).unwrap();
        assert!(FusionNet::from_params(*net.config(), other.params().clone()).is_err());
    }

    #[test]
    fn batch_rejects_mixed_lengths() {
        assert!(SequenceBatch::<f32>::from_sequences(&[scene(3), scene(5)]).is_err());
        assert!(SequenceBatch::<f32>::from_sequences(&[]).is_err());
        let b = SequenceBatch::<f32>::from_sequences(&[scene(3), scene(3)]).unwrap();
        assert_eq!(b.batch_size(), 2);
        assert_eq!(b.frames[0].shape(), &[2, 6, 8, 8]);
        assert_eq!(b.target.as_ref().unwrap().shape(), &[2, 3, 8, 8]);
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in [Mode::Unidirectional, Mode::Bidirectional] {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("both".parse::<Mode>().is_err());
    }
}
