//! Convolutional transformer MIL network.
//!
//! Snippet features are linearly projected to the model width, a learnable
//! cls token is prepended, and a stack of blocks is applied. Inside each block
//! the query/key/value projections of the snippet tokens are depthwise
//! separable temporal convolutions; the cls token has no temporal position
//! and only goes through the pointwise part. A sigmoid snippet head scores
//! every snippet token and a sigmoid video head scores the cls token.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_core::{scaled_dot_product_attention, Tape, Tensor, Var};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Snippets per video.
    pub snippets: usize,
    pub input_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Number of transformer blocks.
    pub depth: usize,
    /// Width of the depthwise temporal kernel; must be odd.
    pub conv_width: usize,
    pub dropout_rate: f64,
    /// Adds a learnable per-position embedding to the snippet tokens.
    pub positional_embedding: bool,
    /// When false the network is a single linear snippet head on the raw
    /// features, with no cls token and no video head.
    pub use_transformer: bool,
    /// Starts every block as the identity by zeroing the weights of the
    /// attention output and second feed-forward projections.
    pub zero_init_residual: bool,
    /// Applies a layer norm to the output of the last block.
    pub final_norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            snippets: 32,
            input_dim: 32,
            model_dim: 32,
            heads: 4,
            depth: 2,
            conv_width: 3,
            dropout_rate: 0.0,
            positional_embedding: false,
            use_transformer: true,
            zero_init_residual: true,
            final_norm: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.snippets == 0 || self.input_dim == 0 {
            return fail("snippets and input_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !self.use_transformer {
            return Ok(());
        }
        if self.model_dim == 0 || self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.conv_width.is_multiple_of(2) {
            return fail(format!("conv_width must be odd, got {}", self.conv_width));
        }
        Ok(())
    }

    /// Width of the features seen by the snippet head.
    pub fn feature_dim(&self) -> usize {
        if self.use_transformer {
            self.model_dim
        } else {
            self.input_dim
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, Copy)]
struct LinearIdx {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormIdx {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvProjIdx {
    depth: usize,
    point: usize,
}

#[derive(Debug, Clone)]
struct BlockIdx {
    norm1: NormIdx,
    query: ConvProjIdx,
    key: ConvProjIdx,
    value: ConvProjIdx,
    out: LinearIdx,
    norm2: NormIdx,
    ff1: LinearIdx,
    ff2: LinearIdx,
}

#[derive(Debug, Clone)]
struct TransformerIdx {
    input: LinearIdx,
    cls: usize,
    position: Option<usize>,
    blocks: Vec<BlockIdx>,
    final_norm: Option<NormIdx>,
}

#[derive(Debug, Clone)]
struct Layout {
    transformer: Option<TransformerIdx>,
    snippet_head: LinearIdx,
    video_head: Option<LinearIdx>,
}

#[derive(Default)]
struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIdx {
        self.linear_init(name, fan_in, fan_out, Init::Uniform { fan_in })
    }

    fn linear_init(&mut self, name: &str, fan_in: usize, fan_out: usize, init: Init) -> LinearIdx {
        LinearIdx {
            weight: self.add(format!("{name}.weight"), vec![fan_in, fan_out], init),
            bias: self.add(format!("{name}.bias"), vec![fan_out], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> NormIdx {
        NormIdx {
            gain: self.add(format!("{name}.gain"), vec![dim], Init::Ones),
            bias: self.add(format!("{name}.bias"), vec![dim], Init::Zeros),
        }
    }

    fn conv(&mut self, name: &str, dim: usize, width: usize) -> ConvProjIdx {
        ConvProjIdx {
            depth: self.add(
                format!("{name}.depth"),
                vec![dim, width],
                Init::Uniform { fan_in: width },
            ),
            point: self.add(format!("{name}.point"), vec![dim, dim], Init::Uniform { fan_in: dim }),
        }
    }

    fn build(config: &EncoderConfig) -> (Layout, Self) {
        let mut b = LayoutBuilder::default();
        let transformer = config.use_transformer.then(|| {
            let d = config.model_dim;
            let input = b.linear("input", config.input_dim, d);
            let cls = b.add("cls_token".into(), vec![1, d], Init::Uniform { fan_in: d });
            let position = config
                .positional_embedding
                .then(|| b.add("position".into(), vec![config.snippets, d], Init::Uniform { fan_in: d }));
            let residual = |fan_in| {
                if config.zero_init_residual {
                    Init::Zeros
                } else {
                    Init::Uniform { fan_in }
                }
            };
            let blocks = (0..config.depth)
                .map(|i| BlockIdx {
                    norm1: b.norm(&format!("block{i}.norm1"), d),
                    query: b.conv(&format!("block{i}.query"), d, config.conv_width),
                    key: b.conv(&format!("block{i}.key"), d, config.conv_width),
                    value: b.conv(&format!("block{i}.value"), d, config.conv_width),
                    out: b.linear_init(&format!("block{i}.attn_out"), d, d, residual(d)),
                    norm2: b.norm(&format!("block{i}.norm2"), d),
                    ff1: b.linear(&format!("block{i}.ff1"), d, 2 * d),
                    ff2: b.linear_init(&format!("block{i}.ff2"), 2 * d, d, residual(2 * d)),
                })
                .collect();
            let final_norm = config.final_norm.then(|| b.norm("final_norm", d));
            TransformerIdx {
                input,
                cls,
                position,
                blocks,
                final_norm,
            }
        });
        let snippet_head = b.linear("snippet_head", config.feature_dim(), 1);
        let video_head = config
            .use_transformer
            .then(|| b.linear("video_head", config.model_dim, 1));
        (
            Layout {
                transformer,
                snippet_head,
                video_head,
            },
            b,
        )
    }
}

/// All learnable tensors of the network, in declaration order.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: EncoderConfig,
    layout: Layout,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

/// Rounds to the nearest `f32`, the storage precision of checkpoints.
pub(crate) fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl ModelParams {
    /// Fan-in scaled uniform weights, zero biases, unit norm gains.
    /// Values are rounded to `f32` so that checkpoints store them exactly.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, b) = LayoutBuilder::build(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = b
            .shapes
            .iter()
            .zip(&b.inits)
            .map(|(shape, init)| {
                let n = shape.iter().product();
                let data = match *init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Uniform { fan_in } => {
                        let a = 1.0 / (fan_in as f64).sqrt();
                        (0..n).map(|_| round_f32(rng.random_range(-a..a))).collect()
                    }
                };
                Tensor::new(shape.clone(), data)
            })
            .collect::<Result<_>>()?;
        Ok(ModelParams {
            config: config.clone(),
            layout,
            names: b.names,
            tensors,
        })
    }

    /// Rebuilds parameters from tensors in declaration order, checking shapes.
    pub fn from_tensors(config: &EncoderConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let (layout, b) = LayoutBuilder::build(config);
        if tensors.len() != b.shapes.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter tensors, got {}",
                b.shapes.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in b.names.iter().zip(&b.shapes).zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Numerical(format!("parameter {name} is not finite")));
            }
        }
        Ok(ModelParams {
            config: config.clone(),
            layout,
            names: b.names,
            tensors,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn has_video_head(&self) -> bool {
        self.layout.video_head.is_some()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams<'_> {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        BoundParams { params: self, vars }
    }

    /// Uses existing tape variables, one per parameter in declaration order,
    /// in place of this model's values.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundParams<'_>> {
        if vars.len() != self.tensors.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter variables, got {}",
                self.tensors.len(),
                vars.len()
            )));
        }
        Ok(BoundParams {
            params: self,
            vars: vars.to_vec(),
        })
    }

    /// Forward pass without dropout: per-snippet scores and, when the model
    /// has a video head, the video score.
    pub fn score(&self, features: &Tensor) -> Result<(Vec<f64>, Option<f64>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let f = tape.leaf(features.clone());
        let enc = encode(&mut tape, &bound, f, None)?;
        let s = snippet_scores(&mut tape, &bound, &enc)?;
        let v = match enc.cls {
            Some(_) => {
                let v = video_score(&mut tape, &bound, &enc)?;
                Some(tape.value(v).item())
            }
            None => None,
        };
        Ok((tape.value(s).data().to_vec(), v))
    }
}

/// Parameters recorded on a tape, addressed by the model's layout.
pub struct BoundParams<'a> {
    params: &'a ModelParams,
    vars: Vec<Var>,
}

impl BoundParams<'_> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.params.config
    }

    fn at(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

/// Inverted dropout driven by a deterministic generator.
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = tape.value(x).shape().to_vec();
        let n = tape.value(x).len();
        let mask = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mask = tape.leaf(Tensor::new(shape, mask)?);
        tape.mul(x, mask)
    }
}

/// Encoder output for one video.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVideo {
    /// `[(T+1)×D]` with the cls token at row 0, or `[T×D]` for the linear
    /// baseline which has no cls token.
    pub tokens: Var,
    pub cls: Option<Var>,
    /// `[T×D]` snippet features.
    pub snippets: Var,
}

fn linear(tape: &mut Tape, p: &BoundParams, idx: LinearIdx, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.at(idx.weight))?;
    tape.add_row(y, p.at(idx.bias))
}

fn norm(tape: &mut Tape, p: &BoundParams, idx: NormIdx, x: Var) -> Result<Var> {
    let n = tape.layer_norm(x, LAYER_NORM_EPS);
    let n = tape.mul_row(n, p.at(idx.gain))?;
    tape.add_row(n, p.at(idx.bias))
}

/// Convolutional projection of `[cls; snippets]`.
fn conv_projection(tape: &mut Tape, p: &BoundParams, idx: ConvProjIdx, cls: Var, snippets: Var) -> Result<Var> {
    let s = tape.dws_conv1d(snippets, p.at(idx.depth), p.at(idx.point))?;
    let c = tape.matmul(cls, p.at(idx.point))?;
    tape.concat_rows(&[c, s])
}

fn block(
    tape: &mut Tape,
    p: &BoundParams,
    idx: &BlockIdx,
    x: Var,
    t_len: usize,
    dropout: &mut Option<&mut Dropout>,
) -> Result<Var> {
    let heads = p.config().heads;
    let n = norm(tape, p, idx.norm1, x)?;
    let n_cls = tape.slice_rows(n, 0, 1)?;
    let n_snp = tape.slice_rows(n, 1, t_len)?;
    let q = conv_projection(tape, p, idx.query, n_cls, n_snp)?;
    let k = conv_projection(tape, p, idx.key, n_cls, n_snp)?;
    let v = conv_projection(tape, p, idx.value, n_cls, n_snp)?;
    let attn = scaled_dot_product_attention(tape, q, k, v, heads)?.output;
    let mut attn = linear(tape, p, idx.out, attn)?;
    if let Some(d) = dropout.as_deref_mut() {
        attn = d.apply(tape, attn)?;
    }
    let x = tape.add(x, attn)?;

    let n = norm(tape, p, idx.norm2, x)?;
    let h = linear(tape, p, idx.ff1, n)?;
    let h = tape.gelu(h);
    let mut h = linear(tape, p, idx.ff2, h)?;
    if let Some(d) = dropout.as_deref_mut() {
        h = d.apply(tape, h)?;
    }
    tape.add(x, h)
}

/// Encodes one video's `[T×D_in]` feature sequence.
pub fn encode(
    tape: &mut Tape,
    p: &BoundParams,
    features: Var,
    mut dropout: Option<&mut Dropout>,
) -> Result<EncodedVideo> {
    let cfg = p.config();
    let shape = tape.value(features).shape();
    if shape != [cfg.snippets, cfg.input_dim] {
        return Err(Error::Dimension(format!(
            "features have shape {shape:?}, model expects [{}, {}]",
            cfg.snippets, cfg.input_dim
        )));
    }
    let Some(tr) = &p.params.layout.transformer else {
        return Ok(EncodedVideo {
            tokens: features,
            cls: None,
            snippets: features,
        });
    };
    let t_len = cfg.snippets;
    let mut h = linear(tape, p, tr.input, features)?;
    if let Some(pos) = tr.position {
        h = tape.add(h, p.at(pos))?;
    }
    let mut x = tape.concat_rows(&[p.at(tr.cls), h])?;
    for b in &tr.blocks {
        x = block(tape, p, b, x, t_len, &mut dropout)?;
    }
    let tokens = match tr.final_norm {
        Some(n) => norm(tape, p, n, x)?,
        None => x,
    };
    Ok(EncodedVideo {
        tokens,
        cls: Some(tape.slice_rows(tokens, 0, 1)?),
        snippets: tape.slice_rows(tokens, 1, t_len)?,
    })
}

/// Per-snippet anomaly scores, `[T×1]`, each in (0, 1).
pub fn snippet_scores(tape: &mut Tape, p: &BoundParams, enc: &EncodedVideo) -> Result<Var> {
    let logits = linear(tape, p, p.params.layout.snippet_head, enc.snippets)?;
    Ok(tape.sigmoid(logits))
}

/// Video-level anomaly score from the cls token, `[1×1]`.
pub fn video_score(tape: &mut Tape, p: &BoundParams, enc: &EncodedVideo) -> Result<Var> {
    let (Some(head), Some(cls)) = (p.params.layout.video_head, enc.cls) else {
        return Err(Error::Config(
            "the linear baseline has no cls token or video head".into(),
        ));
    };
    let logit = linear(tape, p, head, cls)?;
    Ok(tape.sigmoid(logit))
}
