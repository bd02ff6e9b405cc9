//! Model architectures: block encoders, projection heads, additive decoder,
//! and the plain classifier used by the ERM baseline.
//!
//! Images go through a 3-block strided conv encoder (widths 32/64/64, 3×3
//! kernels, stride 2, pad 1, GELU) followed by global average pooling into a
//! 64-d representation `r`; vectors go through a 2-layer 256-wide GELU MLP.
//! Each block's projection head is a 2-layer MLP (hidden width = `r`'s width)
//! whose output is L2-normalised onto the unit sphere — contrastive losses
//! only ever see unit embeddings. The decoder is additive:
//! `x_hat = Dec_c(z_c) + Dec_s(z_s)`, each stack a linear layer into a
//! `32×(h/4)×(w/4)` feature map followed by two stride-2 transposed convs
//! (images), or a 2-layer MLP (vectors).
//!
//! Parameters live in a name→array map so the optimizer and checkpoints can
//! treat them uniformly; initialisation is Kaiming-uniform
//! (`±sqrt(6/fan_in)`) for weights and zero for biases, drawn from a named
//! substream so a seed fully determines the model.

use std::collections::BTreeMap;

use rand::Rng;

use crate::ndcore::{Array, NdError, NodeId, Tape};
use crate::util::rng::substream;

/// Encoder input family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Image { c: usize, h: usize, w: usize },
    Vector { dim: usize },
}

impl InputKind {
    /// Per-example feature shape.
    pub fn feature_shape(&self) -> Vec<usize> {
        match *self {
            InputKind::Image { c, h, w } => vec![c, h, w],
            InputKind::Vector { dim } => vec![dim],
        }
    }

    fn r_dim(&self) -> usize {
        match self {
            InputKind::Image { .. } => CONV_WIDTHS[2],
            InputKind::Vector { .. } => MLP_WIDTH,
        }
    }
}

const CONV_WIDTHS: [usize; 3] = [32, 64, 64];
const MLP_WIDTH: usize = 256;
const DEC_CH: [usize; 2] = [32, 16];

/// Architecture of the two-block SCBD model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchConfig {
    pub input: InputKind,
    /// Content embedding width.
    pub d_zc: usize,
    /// Style embedding width.
    pub d_zs: usize,
    /// Drop the style block entirely (ablation).
    pub single_block: bool,
    /// Whether decoder parameters exist.
    pub with_decoder: bool,
}

impl ArchConfig {
    /// Width of the pre-projection representation `r`.
    pub fn d_r(&self) -> usize {
        self.input.r_dim()
    }

    fn validate(&self) -> Result<(), NetError> {
        if self.d_zc == 0 || (!self.single_block && self.d_zs == 0) {
            return Err(NetError::BadArch("embedding widths must be >= 1".into()));
        }
        match self.input {
            InputKind::Image { c, h, w } => {
                if c == 0 {
                    return Err(NetError::BadArch("image needs >= 1 channel".into()));
                }
                if h < 8 || w < 8 {
                    return Err(NetError::BadArch(format!(
                        "image {h}x{w} too small for three stride-2 blocks"
                    )));
                }
                if self.with_decoder && (h % 4 != 0 || w % 4 != 0) {
                    return Err(NetError::BadArch(format!(
                        "decoder upsamples from ({}, {}); image sides must be multiples of 4",
                        h / 4,
                        w / 4
                    )));
                }
            }
            InputKind::Vector { dim } => {
                if dim == 0 {
                    return Err(NetError::BadArch("vector input needs dim >= 1".into()));
                }
            }
        }
        Ok(())
    }
}

/// Architecture of the ERM baseline classifier (encoder + linear head).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErmArchConfig {
    pub input: InputKind,
    pub classes: usize,
}

/// Either model family; decides which forward passes are available.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelArch {
    Scbd(ArchConfig),
    Erm(ErmArchConfig),
}

impl ModelArch {
    pub fn input(&self) -> InputKind {
        match self {
            ModelArch::Scbd(a) => a.input,
            ModelArch::Erm(a) => a.input,
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            ModelArch::Scbd(_) => "scbd",
            ModelArch::Erm(_) => "erm",
        }
    }
}

/// Errors from architecture validation, parameter plumbing and forwards.
#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error("arch: {0}")]
    BadArch(String),
    #[error("params: missing array {0:?}")]
    MissingParam(String),
    #[error("params: {name:?} has shape {got:?}, expected {want:?}")]
    ParamShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("model kind is {got}, operation needs {want}")]
    WrongKind {
        got: &'static str,
        want: &'static str,
    },
    #[error("input batch shape {got:?} does not match architecture input {want:?}")]
    BadInput { got: Vec<usize>, want: Vec<usize> },
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    /// `None` for biases (zero-initialised).
    fan_in: Option<usize>,
}

fn linear_spec(specs: &mut Vec<ParamSpec>, prefix: &str, name: &str, din: usize, dout: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.{name}.w"),
        shape: vec![din, dout],
        fan_in: Some(din),
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.{name}.b"),
        shape: vec![dout],
        fan_in: None,
    });
}

fn conv_spec(specs: &mut Vec<ParamSpec>, prefix: &str, name: &str, oc: usize, ic: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.{name}.w"),
        shape: vec![oc, ic, 3, 3],
        fan_in: Some(ic * 9),
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.{name}.b"),
        shape: vec![oc],
        fan_in: None,
    });
}

fn convt_spec(specs: &mut Vec<ParamSpec>, prefix: &str, name: &str, ic: usize, oc: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.{name}.w"),
        shape: vec![ic, oc, 3, 3],
        fan_in: Some(ic * 9),
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.{name}.b"),
        shape: vec![oc],
        fan_in: None,
    });
}

fn encoder_specs(specs: &mut Vec<ParamSpec>, prefix: &str, input: InputKind) {
    match input {
        InputKind::Image { c, .. } => {
            conv_spec(specs, prefix, "conv0", CONV_WIDTHS[0], c);
            conv_spec(specs, prefix, "conv1", CONV_WIDTHS[1], CONV_WIDTHS[0]);
            conv_spec(specs, prefix, "conv2", CONV_WIDTHS[2], CONV_WIDTHS[1]);
        }
        InputKind::Vector { dim } => {
            linear_spec(specs, prefix, "fc0", dim, MLP_WIDTH);
            linear_spec(specs, prefix, "fc1", MLP_WIDTH, MLP_WIDTH);
        }
    }
}

fn projection_specs(specs: &mut Vec<ParamSpec>, prefix: &str, d_r: usize, d_z: usize) {
    linear_spec(specs, prefix, "fc0", d_r, d_r);
    linear_spec(specs, prefix, "fc1", d_r, d_z);
}

fn decoder_specs(specs: &mut Vec<ParamSpec>, prefix: &str, input: InputKind, d_z: usize) {
    match input {
        InputKind::Image { c, h, w } => {
            let (hh, ww) = (h / 4, w / 4);
            linear_spec(specs, prefix, "fc", d_z, DEC_CH[0] * hh * ww);
            convt_spec(specs, prefix, "convt0", DEC_CH[0], DEC_CH[1]);
            convt_spec(specs, prefix, "convt1", DEC_CH[1], c);
        }
        InputKind::Vector { dim } => {
            linear_spec(specs, prefix, "fc0", d_z, MLP_WIDTH);
            linear_spec(specs, prefix, "fc1", MLP_WIDTH, dim);
        }
    }
}

fn param_specs(arch: &ModelArch) -> Result<Vec<ParamSpec>, NetError> {
    let mut specs = Vec::new();
    match arch {
        ModelArch::Scbd(a) => {
            a.validate()?;
            encoder_specs(&mut specs, "enc_c", a.input);
            projection_specs(&mut specs, "proj_c", a.d_r(), a.d_zc);
            if !a.single_block {
                encoder_specs(&mut specs, "enc_s", a.input);
                projection_specs(&mut specs, "proj_s", a.d_r(), a.d_zs);
            }
            if a.with_decoder {
                decoder_specs(&mut specs, "dec_c", a.input, a.d_zc);
                if !a.single_block {
                    decoder_specs(&mut specs, "dec_s", a.input, a.d_zs);
                }
            }
        }
        ModelArch::Erm(a) => {
            if a.classes < 2 {
                return Err(NetError::BadArch("classifier needs >= 2 classes".into()));
            }
            encoder_specs(&mut specs, "enc", a.input);
            linear_spec(&mut specs, "head", "out", a.input.r_dim(), a.classes);
        }
    }
    Ok(specs)
}

/// A model: its architecture plus the named parameter arrays.
#[derive(Debug, Clone)]
pub struct ModelParams {
    arch: ModelArch,
    arrays: BTreeMap<String, Array>,
}

impl ModelParams {
    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    /// The SCBD architecture, or an error for other kinds.
    pub fn scbd_arch(&self) -> Result<&ArchConfig, NetError> {
        match &self.arch {
            ModelArch::Scbd(a) => Ok(a),
            other => Err(NetError::WrongKind {
                got: other.kind_name(),
                want: "scbd",
            }),
        }
    }

    /// The ERM architecture, or an error for other kinds.
    pub fn erm_arch(&self) -> Result<&ErmArchConfig, NetError> {
        match &self.arch {
            ModelArch::Erm(a) => Ok(a),
            other => Err(NetError::WrongKind {
                got: other.kind_name(),
                want: "erm",
            }),
        }
    }

    pub fn arrays(&self) -> &BTreeMap<String, Array> {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut BTreeMap<String, Array> {
        &mut self.arrays
    }

    /// Total scalar parameter count.
    pub fn num_parameters(&self) -> usize {
        self.arrays.values().map(Array::len).sum()
    }

    /// Rebuilds a model from named arrays (e.g. a loaded checkpoint),
    /// verifying that every expected parameter is present with the right
    /// shape and nothing extra tags along.
    pub fn from_arrays(
        arch: ModelArch,
        arrays: BTreeMap<String, Array>,
    ) -> Result<Self, NetError> {
        let specs = param_specs(&arch)?;
        if arrays.len() != specs.len() {
            let expected: std::collections::BTreeSet<&str> =
                specs.iter().map(|s| s.name.as_str()).collect();
            for name in arrays.keys() {
                if !expected.contains(name.as_str()) {
                    return Err(NetError::MissingParam(format!(
                        "unexpected array {name}"
                    )));
                }
            }
        }
        for spec in &specs {
            let arr = arrays
                .get(&spec.name)
                .ok_or_else(|| NetError::MissingParam(spec.name.clone()))?;
            if arr.shape() != spec.shape.as_slice() {
                return Err(NetError::ParamShape {
                    name: spec.name.clone(),
                    got: arr.shape().to_vec(),
                    want: spec.shape.clone(),
                });
            }
        }
        Ok(Self { arch, arrays })
    }
}

/// Fresh Kaiming-uniform parameters for `arch`, fully determined by `seed`.
pub fn init_params(seed: u64, arch: &ModelArch) -> Result<ModelParams, NetError> {
    let specs = param_specs(arch)?;
    let mut arrays = BTreeMap::new();
    for (idx, spec) in specs.iter().enumerate() {
        let n: usize = spec.shape.iter().product();
        let data = match spec.fan_in {
            None => vec![0.0f32; n],
            Some(fan_in) => {
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                let mut rng = substream(seed, "init", idx as u64);
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        let arr = Array::new(spec.shape.clone(), data)
            .expect("spec shapes are consistent")
            .with_grad();
        arrays.insert(spec.name.clone(), arr);
    }
    Ok(ModelParams {
        arch: arch.clone(),
        arrays,
    })
}

/// Tape handles for every parameter of a model.
pub type ParamNodes = BTreeMap<String, NodeId>;

/// Inserts all parameters as leaves; `trainable` controls whether backward
/// will produce gradients for them.
pub fn insert_params(tape: &mut Tape, params: &ModelParams, trainable: bool) -> ParamNodes {
    params
        .arrays
        .iter()
        .map(|(name, arr)| {
            let leaf = if trainable {
                arr.clone().with_grad()
            } else {
                Array::new(arr.shape().to_vec(), arr.data().to_vec()).expect("valid array")
            };
            (name.clone(), tape.leaf(leaf))
        })
        .collect()
}

fn node(nodes: &ParamNodes, name: &str) -> Result<NodeId, NetError> {
    nodes
        .get(name)
        .copied()
        .ok_or_else(|| NetError::MissingParam(name.to_string()))
}

fn linear(
    tape: &mut Tape,
    nodes: &ParamNodes,
    prefix: &str,
    name: &str,
    x: NodeId,
) -> Result<NodeId, NetError> {
    let w = node(nodes, &format!("{prefix}.{name}.w"))?;
    let b = node(nodes, &format!("{prefix}.{name}.b"))?;
    let xw = tape.matmul(x, w)?;
    Ok(tape.add_row_vec(xw, b)?)
}

fn check_input(tape: &Tape, x: NodeId, input: InputKind) -> Result<usize, NetError> {
    let shape = tape.value(x).shape().to_vec();
    let want = input.feature_shape();
    if shape.len() != want.len() + 1 || shape[1..] != want[..] {
        let mut full = vec![0];
        full.extend_from_slice(&want);
        return Err(NetError::BadInput {
            got: shape,
            want: full,
        });
    }
    Ok(shape[0])
}

/// Runs one encoder stack (`prefix`) to its pooled representation `r`.
fn forward_encoder(
    tape: &mut Tape,
    nodes: &ParamNodes,
    prefix: &str,
    input: InputKind,
    x: NodeId,
) -> Result<NodeId, NetError> {
    match input {
        InputKind::Image { .. } => {
            let mut h = x;
            for i in 0..3 {
                let w = node(nodes, &format!("{prefix}.conv{i}.w"))?;
                let b = node(nodes, &format!("{prefix}.conv{i}.b"))?;
                h = tape.conv2d(h, w, b, 2, 1)?;
                h = tape.gelu(h)?;
            }
            // Global average pool: mean over width, then height.
            let pooled_w = tape.mean_axis(h, 3)?;
            Ok(tape.mean_axis(pooled_w, 2)?)
        }
        InputKind::Vector { .. } => {
            let h0 = linear(tape, nodes, prefix, "fc0", x)?;
            let a0 = tape.gelu(h0)?;
            let h1 = linear(tape, nodes, prefix, "fc1", a0)?;
            Ok(tape.gelu(h1)?)
        }
    }
}

/// Projects `r` to a unit-norm embedding through the 2-layer head `prefix`.
fn forward_projection(
    tape: &mut Tape,
    nodes: &ParamNodes,
    prefix: &str,
    r: NodeId,
) -> Result<NodeId, NetError> {
    let h = linear(tape, nodes, prefix, "fc0", r)?;
    let a = tape.gelu(h)?;
    let z = linear(tape, nodes, prefix, "fc1", a)?;
    Ok(tape.l2_normalize_rows(z)?)
}

/// Embedding nodes from [`encode_nodes`].
#[derive(Debug, Clone, Copy)]
pub struct EncodedNodes {
    pub r_c: NodeId,
    pub z_c: NodeId,
    pub r_s: Option<NodeId>,
    pub z_s: Option<NodeId>,
}

/// Embedding values from [`encode`].
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub r_c: Array,
    pub z_c: Array,
    pub r_s: Option<Array>,
    pub z_s: Option<Array>,
}

/// Records both encoder blocks on the tape. With `content_only` the style
/// stack is skipped even when the architecture has one (cheaper evaluation).
pub fn encode_nodes(
    tape: &mut Tape,
    nodes: &ParamNodes,
    arch: &ArchConfig,
    x: NodeId,
    content_only: bool,
) -> Result<EncodedNodes, NetError> {
    check_input(tape, x, arch.input)?;
    let r_c = forward_encoder(tape, nodes, "enc_c", arch.input, x)?;
    let z_c = forward_projection(tape, nodes, "proj_c", r_c)?;
    let (r_s, z_s) = if arch.single_block || content_only {
        (None, None)
    } else {
        let r_s = forward_encoder(tape, nodes, "enc_s", arch.input, x)?;
        let z_s = forward_projection(tape, nodes, "proj_s", r_s)?;
        (Some(r_s), Some(z_s))
    };
    Ok(EncodedNodes { r_c, z_c, r_s, z_s })
}

fn forward_decoder_stack(
    tape: &mut Tape,
    nodes: &ParamNodes,
    prefix: &str,
    input: InputKind,
    z: NodeId,
) -> Result<NodeId, NetError> {
    match input {
        InputKind::Image { c, h, w } => {
            let (hh, ww) = (h / 4, w / 4);
            let lin = linear(tape, nodes, prefix, "fc", z)?;
            let act = tape.gelu(lin)?;
            let n = tape.value(act).dim(0);
            let grid = tape.reshape(act, &[n, DEC_CH[0], hh, ww])?;
            let w0 = node(nodes, &format!("{prefix}.convt0.w"))?;
            let b0 = node(nodes, &format!("{prefix}.convt0.b"))?;
            let up0 = tape.conv_transpose2d(grid, w0, b0, 2, 1, 1)?;
            let a0 = tape.gelu(up0)?;
            let w1 = node(nodes, &format!("{prefix}.convt1.w"))?;
            let b1 = node(nodes, &format!("{prefix}.convt1.b"))?;
            let out = tape.conv_transpose2d(a0, w1, b1, 2, 1, 1)?;
            debug_assert_eq!(tape.value(out).shape(), &[n, c, h, w]);
            Ok(out)
        }
        InputKind::Vector { .. } => {
            let h0 = linear(tape, nodes, prefix, "fc0", z)?;
            let a0 = tape.gelu(h0)?;
            Ok(linear(tape, nodes, prefix, "fc1", a0)?)
        }
    }
}

/// Records the additive decoder: `Dec_c(z_c) + Dec_s(z_s)` (content stack
/// alone when the model is single-block or `z_s` is absent).
pub fn decode_nodes(
    tape: &mut Tape,
    nodes: &ParamNodes,
    arch: &ArchConfig,
    z_c: NodeId,
    z_s: Option<NodeId>,
) -> Result<NodeId, NetError> {
    if !arch.with_decoder {
        return Err(NetError::BadArch(
            "architecture was built without a decoder".into(),
        ));
    }
    let from_c = forward_decoder_stack(tape, nodes, "dec_c", arch.input, z_c)?;
    match z_s {
        Some(z_s) if !arch.single_block => {
            let from_s = forward_decoder_stack(tape, nodes, "dec_s", arch.input, z_s)?;
            Ok(tape.add(from_c, from_s)?)
        }
        _ => Ok(from_c),
    }
}

/// Records the ERM classifier forward: encoder `r` then a linear head.
pub fn erm_logits_nodes(
    tape: &mut Tape,
    nodes: &ParamNodes,
    arch: &ErmArchConfig,
    x: NodeId,
) -> Result<NodeId, NetError> {
    check_input(tape, x, arch.input)?;
    let r = forward_encoder(tape, nodes, "enc", arch.input, x)?;
    Ok(linear(tape, nodes, "head", "out", r)?)
}

/// Value-level encode of a feature batch.
pub fn encode(params: &ModelParams, x: &Array) -> Result<EmbeddingSet, NetError> {
    encode_with(params, x, false)
}

/// [`encode`] with the option to skip the style stack.
pub fn encode_with(
    params: &ModelParams,
    x: &Array,
    content_only: bool,
) -> Result<EmbeddingSet, NetError> {
    let arch = params.scbd_arch()?.clone();
    let mut tape = Tape::new();
    let nodes = insert_params(&mut tape, params, false);
    let xn = tape.leaf(x.clone());
    let enc = encode_nodes(&mut tape, &nodes, &arch, xn, content_only)?;
    Ok(EmbeddingSet {
        r_c: tape.value(enc.r_c).clone(),
        z_c: tape.value(enc.z_c).clone(),
        r_s: enc.r_s.map(|id| tape.value(id).clone()),
        z_s: enc.z_s.map(|id| tape.value(id).clone()),
    })
}

/// Value-level decode of embedding batches.
pub fn decode(
    params: &ModelParams,
    z_c: &Array,
    z_s: Option<&Array>,
) -> Result<Array, NetError> {
    let arch = params.scbd_arch()?.clone();
    let mut tape = Tape::new();
    let nodes = insert_params(&mut tape, params, false);
    let zc = tape.leaf(z_c.clone());
    let zs = z_s.map(|z| tape.leaf(z.clone()));
    let out = decode_nodes(&mut tape, &nodes, &arch, zc, zs)?;
    Ok(tape.value(out).clone())
}

/// Value-level classifier logits.
pub fn erm_logits(params: &ModelParams, x: &Array) -> Result<Array, NetError> {
    let arch = params.erm_arch()?.clone();
    let mut tape = Tape::new();
    let nodes = insert_params(&mut tape, params, false);
    let xn = tape.leaf(x.clone());
    let out = erm_logits_nodes(&mut tape, &nodes, &arch, xn)?;
    Ok(tape.value(out).clone())
}
