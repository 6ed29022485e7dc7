//! The shared Transformer: token + position + segment embeddings, a stack
//! of masked multi-head self-attention layers, a token classifier tied to
//! the embedding table, and the next-sentence head.
//!
//! Every objective runs through the same weights; only the attention mask
//! and the segment ids change.

mod checkpoint;

pub use checkpoint::{read_tensor_file, write_tensor_file, NamedArray, TensorFile, CHECKPOINT_MAGIC};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::masks::{AttentionMask, LMObjective, ObjectiveKind};
use crate::optim::ParamSlot;
use crate::rng::{derive_seed, rng_for};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{TokenId, EOS, SOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_inner: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub n_segments: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            ff_inner: 256,
            vocab_size: 200,
            max_len: 64,
            n_segments: 6,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!(
                "hidden size {} must be a positive multiple of the head count {}",
                self.hidden, self.heads
            ));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.ff_inner == 0 {
            return bad("vocab_size, max_len and ff_inner must be positive".into());
        }
        if self.n_segments < 6 {
            return bad(format!(
                "n_segments must be at least 6 (one id per objective segment), got {}",
                self.n_segments
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.layer_norm_eps < 0.0 || self.init_std < 0.0 {
            return bad("layer_norm_eps and init_std must be non-negative".into());
        }
        Ok(())
    }
}

/// Token ids, segment ids and positions of one model input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedInput {
    pub ids: Vec<TokenId>,
    pub segments: Vec<usize>,
    pub positions: Vec<usize>,
    pub objective: LMObjective,
}

impl PackedInput {
    /// General constructor; checks only lengths, the leading SOS and the
    /// objective's segmentation.
    pub fn new(ids: Vec<TokenId>, segments: Vec<usize>, objective: LMObjective) -> Result<Self> {
        if ids.is_empty() || ids.len() != segments.len() {
            return Err(Error::Input(format!(
                "packed input needs matching non-empty ids and segments ({} vs {})",
                ids.len(),
                segments.len()
            )));
        }
        if ids[0] != SOS {
            return Err(Error::Input("packed input must start with SOS".into()));
        }
        let positions = (0..ids.len()).collect();
        let input = PackedInput {
            ids,
            segments,
            positions,
            objective,
        };
        input.mask()?;
        Ok(input)
    }

    /// `SOS tokens EOS`, for the unidirectional objectives (or a
    /// single-segment bidirectional input).
    pub fn single(kind: ObjectiveKind, tokens: &[TokenId]) -> Result<Self> {
        let objective = match kind {
            ObjectiveKind::Bidirectional => LMObjective::Bidirectional,
            ObjectiveKind::LeftToRight => LMObjective::LeftToRight,
            ObjectiveKind::RightToLeft => LMObjective::RightToLeft,
            ObjectiveKind::Seq2Seq => {
                return Err(Error::Input("seq2seq inputs need two segments".into()))
            }
        };
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(SOS);
        ids.extend_from_slice(tokens);
        ids.push(EOS);
        let seg = kind.segment_ids().0;
        let segments = vec![seg; ids.len()];
        Self::new(ids, segments, objective)
    }

    /// `SOS a EOS b EOS`. For seq2seq the source segment is `SOS a EOS`.
    pub fn pair(kind: ObjectiveKind, a: &[TokenId], b: &[TokenId]) -> Result<Self> {
        let first = a.len() + 2;
        let objective = match kind {
            ObjectiveKind::Bidirectional => LMObjective::Bidirectional,
            ObjectiveKind::Seq2Seq => LMObjective::Seq2Seq { source_len: first },
            ObjectiveKind::LeftToRight => LMObjective::LeftToRight,
            ObjectiveKind::RightToLeft => LMObjective::RightToLeft,
        };
        let mut ids = Vec::with_capacity(a.len() + b.len() + 3);
        ids.push(SOS);
        ids.extend_from_slice(a);
        ids.push(EOS);
        ids.extend_from_slice(b);
        ids.push(EOS);
        let (s0, s1) = kind.segment_ids();
        let segments = (0..ids.len()).map(|i| if i < first { s0 } else { s1 }).collect();
        Self::new(ids, segments, objective)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mask(&self) -> Result<AttentionMask> {
        AttentionMask::build(self.objective, self.ids.len())
    }
}

/// Flags a parameter for decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub decay: bool,
}

impl ParamInfo {
    fn new(name: impl Into<String>, decay: bool) -> Self {
        ParamInfo {
            name: name.into(),
            decay,
        }
    }
}

/// Per-layer parameters. `P` is a tensor for stored weights or a [`Var`]
/// once bound to a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<P> {
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
    pub bo: P,
    pub ln1_gain: P,
    pub ln1_bias: P,
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
    pub ln2_gain: P,
    pub ln2_bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights<P> {
    /// Also the output projection of the token classifier.
    pub token_emb: P,
    pub pos_emb: P,
    pub seg_emb: P,
    pub layers: Vec<LayerWeights<P>>,
    pub nsp_head: P,
    pub lm_bias: P,
}

impl<P> LayerWeights<P> {
    fn entries(&self, l: usize) -> Vec<(ParamInfo, &P)> {
        let n = |s: &str| format!("layer.{l}.{s}");
        vec![
            (ParamInfo::new(n("attn.wq"), true), &self.wq),
            (ParamInfo::new(n("attn.wk"), true), &self.wk),
            (ParamInfo::new(n("attn.wv"), true), &self.wv),
            (ParamInfo::new(n("attn.wo"), true), &self.wo),
            (ParamInfo::new(n("attn.bo"), false), &self.bo),
            (ParamInfo::new(n("ln1.gain"), false), &self.ln1_gain),
            (ParamInfo::new(n("ln1.bias"), false), &self.ln1_bias),
            (ParamInfo::new(n("ffn.w1"), true), &self.w1),
            (ParamInfo::new(n("ffn.b1"), false), &self.b1),
            (ParamInfo::new(n("ffn.w2"), true), &self.w2),
            (ParamInfo::new(n("ffn.b2"), false), &self.b2),
            (ParamInfo::new(n("ln2.gain"), false), &self.ln2_gain),
            (ParamInfo::new(n("ln2.bias"), false), &self.ln2_bias),
        ]
    }

    fn slots_mut(&mut self) -> [&mut P; 13] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }

    fn try_map<Q>(&self, f: &mut impl FnMut(&P) -> Result<Q>) -> Result<LayerWeights<Q>> {
        Ok(LayerWeights {
            wq: f(&self.wq)?,
            wk: f(&self.wk)?,
            wv: f(&self.wv)?,
            wo: f(&self.wo)?,
            bo: f(&self.bo)?,
            ln1_gain: f(&self.ln1_gain)?,
            ln1_bias: f(&self.ln1_bias)?,
            w1: f(&self.w1)?,
            b1: f(&self.b1)?,
            w2: f(&self.w2)?,
            b2: f(&self.b2)?,
            ln2_gain: f(&self.ln2_gain)?,
            ln2_bias: f(&self.ln2_bias)?,
        })
    }
}

impl<P> Weights<P> {
    /// Every parameter in the fixed checkpoint/optimizer order.
    pub fn entries(&self) -> Vec<(ParamInfo, &P)> {
        let mut out = vec![
            (ParamInfo::new("embed.token", false), &self.token_emb),
            (ParamInfo::new("embed.position", false), &self.pos_emb),
            (ParamInfo::new("embed.segment", false), &self.seg_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.entries(l));
        }
        out.push((ParamInfo::new("head.nsp", true), &self.nsp_head));
        out.push((ParamInfo::new("head.lm_bias", false), &self.lm_bias));
        out
    }

    /// Mutable slots in the same order as [`Weights::entries`].
    pub fn slots_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![&mut self.token_emb, &mut self.pos_emb, &mut self.seg_emb];
        for layer in &mut self.layers {
            out.extend(layer.slots_mut());
        }
        out.push(&mut self.nsp_head);
        out.push(&mut self.lm_bias);
        out
    }

    pub fn try_map<Q>(&self, mut f: impl FnMut(&P) -> Result<Q>) -> Result<Weights<Q>> {
        Ok(Weights {
            token_emb: f(&self.token_emb)?,
            pos_emb: f(&self.pos_emb)?,
            seg_emb: f(&self.seg_emb)?,
            layers: self
                .layers
                .iter()
                .map(|l| l.try_map(&mut f))
                .collect::<Result<_>>()?,
            nsp_head: f(&self.nsp_head)?,
            lm_bias: f(&self.lm_bias)?,
        })
    }
}

/// All trainable state of the backbone plus its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub weights: Weights<Tensor<T>>,
}

/// Activations `H⁰ … Hᴸ`, each `n × hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates<T> {
    pub layers: Vec<Tensor<T>>,
}

impl<T: Scalar> HiddenStates<T> {
    pub fn last(&self) -> &Tensor<T> {
        self.layers.last().expect("at least the embedding layer")
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Layer-norm gains 1, biases 0, everything else Normal(0, init_std).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[0x1417]);
        let (d, f, v) = (config.hidden, config.ff_inner, config.vocab_size);
        let std = config.init_std;
        let mut randn = |shape: &[usize]| Tensor::randn(shape, std, &mut rng);
        let token_emb = randn(&[v, d]);
        let pos_emb = randn(&[config.max_len, d]);
        let seg_emb = randn(&[config.n_segments, d]);
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                wq: randn(&[d, d]),
                wk: randn(&[d, d]),
                wv: randn(&[d, d]),
                wo: randn(&[d, d]),
                bo: Tensor::zeros(&[d]),
                ln1_gain: Tensor::filled(&[d], T::one()),
                ln1_bias: Tensor::zeros(&[d]),
                w1: randn(&[d, f]),
                b1: Tensor::zeros(&[f]),
                w2: randn(&[f, d]),
                b2: Tensor::zeros(&[d]),
                ln2_gain: Tensor::filled(&[d], T::one()),
                ln2_bias: Tensor::zeros(&[d]),
            })
            .collect();
        let nsp_head = randn(&[d, 2]);
        Ok(ModelParams {
            weights: Weights {
                token_emb,
                pos_emb,
                seg_emb,
                layers,
                nsp_head,
                lm_bias: Tensor::zeros(&[v]),
            },
            config,
        })
    }

    /// All parameters zero, with the shapes `config` implies.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut p = Self::init(config, 0)?;
        for t in p.weights.slots_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
        Ok(p)
    }

    pub fn num_params(&self) -> usize {
        self.weights.entries().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Parameter counts grouped by component, for inspection.
    pub fn component_counts(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (info, t) in self.weights.entries() {
            let component = match info.name.split('.').collect::<Vec<_>>().as_slice() {
                ["layer", l, part, ..] => format!("layer.{l}.{part}"),
                [a, b, ..] => format!("{a}.{b}"),
                _ => info.name.clone(),
            };
            match out.last_mut() {
                Some((c, n)) if *c == component => *n += t.numel(),
                _ => out.push((component, t.numel())),
            }
        }
        out
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.weights.entries().iter().map(|(_, t)| t.shape().to_vec()).collect()
    }

    /// Update slots pairing each weight with its gradient in `graph`.
    pub fn slots<'a>(&'a mut self, vars: &ModelVars, graph: &'a Graph<T>) -> Vec<ParamSlot<'a, T>> {
        let infos: Vec<(bool, Var)> = vars.vars.entries().iter().map(|(i, &v)| (i.decay, v)).collect();
        self.weights
            .slots_mut()
            .into_iter()
            .zip(infos)
            .map(|(value, (decay, var))| ParamSlot {
                value,
                grad: graph.grad(var),
                decay,
            })
            .collect()
    }

    /// Records the weights as graph leaves.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> ModelVars {
        let vars = self
            .weights
            .try_map(|t| {
                Ok(if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                })
            })
            .expect("binding cannot fail");
        ModelVars {
            config: self.config.clone(),
            vars,
        }
    }

    /// Summed token, position and segment embeddings.
    pub fn embed(&self, input: &PackedInput) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let h = m.embed(&mut g, std::slice::from_ref(input))?;
        Ok(g.value(h).clone())
    }

    /// Runs the full stack on one input. Dropout is active only in
    /// `train_mode`, with masks drawn from `seed`.
    pub fn forward(&self, input: &PackedInput, train_mode: bool, seed: u64) -> Result<HiddenStates<T>> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let enc = m.encode(&mut g, std::slice::from_ref(input), train_mode, seed)?;
        Ok(HiddenStates {
            layers: enc.layers.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }

    /// `h[pos] · Eᵀ + b` with the tied token embedding table `E`.
    pub fn lm_logits(&self, h: &Tensor<T>, positions: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let hv = g.constant(h.clone());
        let out = m.lm_logits(&mut g, hv, positions)?;
        Ok(g.value(out).clone())
    }

    /// IsNext / NotNext logits from the SOS-position vector.
    pub fn nsp_logits(&self, h1: &[T]) -> Result<[T; 2]> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let hv = g.constant(Tensor::new(vec![1, h1.len()], h1.to_vec())?);
        let out = m.nsp_logits(&mut g, hv, &[0])?;
        let d = g.value(out).data();
        Ok([d[0], d[1]])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "kind": "model", "config": self.config });
        let entries = self.weights.entries();
        let named: Vec<(&str, &Tensor<T>)> =
            entries.iter().map(|(i, t)| (i.name.as_str(), *t)).collect();
        write_tensor_file(path, &meta, &named)
    }

    /// Reads a checkpoint, taking the configuration from its header.
    pub fn load(path: &Path) -> Result<Self> {
        let file = read_tensor_file(path)?;
        let config: ModelConfig = match file.meta.get("config") {
            Some(c) if file.meta.get("kind").and_then(|k| k.as_str()) == Some("model") => {
                serde_json::from_value(c.clone())
                    .map_err(|e| Error::CheckpointFormat(format!("bad config header: {e}")))?
            }
            _ => return Err(Error::CheckpointFormat("not a model checkpoint".into())),
        };
        let mut params = Self::zeros(config)?;
        params.assign_from(file)?;
        Ok(params)
    }

    /// Overwrites these weights from a checkpoint with identical shapes.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let file = read_tensor_file(path)?;
        self.assign_from(file)
    }

    fn assign_from(&mut self, file: TensorFile) -> Result<()> {
        let names: Vec<String> = self.weights.entries().into_iter().map(|(i, _)| i.name).collect();
        let slots = self.weights.slots_mut();
        if file.tensors.len() != slots.len() {
            return Err(Error::CheckpointFormat(format!(
                "checkpoint holds {} tensors, model expects {}",
                file.tensors.len(),
                slots.len()
            )));
        }
        for ((slot, name), arr) in slots.into_iter().zip(names).zip(file.tensors) {
            if arr.name != name {
                return Err(Error::CheckpointFormat(format!(
                    "expected tensor {name}, found {}",
                    arr.name
                )));
            }
            arr.assign_to(slot)?;
        }
        Ok(())
    }
}

/// Model weights bound to a [`Graph`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub config: ModelConfig,
    pub vars: Weights<Var>,
}

/// Hidden states of a batch concatenated along rows; example `e` occupies
/// rows `offsets[e] .. offsets[e] + lens[e]`.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub layers: Vec<Var>,
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
}

impl Encoded {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("embedding layer present")
    }

    /// Global row index of position `pos` in example `e`.
    pub fn row(&self, e: usize, pos: usize) -> usize {
        self.offsets[e] + pos
    }
}

/// Attention mask placement for one example of a batch.
struct Block<T> {
    offset: usize,
    len: usize,
    additive: Vec<T>,
}

impl ModelVars {
    fn check_input(&self, input: &PackedInput) -> Result<()> {
        let c = &self.config;
        if input.len() > c.max_len {
            return Err(Error::TooLong {
                len: input.len(),
                max_len: c.max_len,
            });
        }
        if input.segments.len() != input.len() || input.positions.len() != input.len() {
            return Err(Error::Input("ids, segments and positions differ in length".into()));
        }
        for &id in &input.ids {
            if id as usize >= c.vocab_size {
                return Err(Error::Index {
                    what: "token id",
                    index: id as usize,
                    limit: c.vocab_size,
                });
            }
        }
        if let Some(&s) = input.segments.iter().find(|&&s| s >= c.n_segments) {
            return Err(Error::Index {
                what: "segment id",
                index: s,
                limit: c.n_segments,
            });
        }
        if let Some(&p) = input.positions.iter().find(|&&p| p >= c.max_len) {
            return Err(Error::Index {
                what: "position",
                index: p,
                limit: c.max_len,
            });
        }
        Ok(())
    }

    /// `H⁰` for a batch, rows concatenated.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[PackedInput]) -> Result<Var> {
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut seg = Vec::new();
        for input in inputs {
            self.check_input(input)?;
            ids.extend(input.ids.iter().map(|&i| i as usize));
            pos.extend_from_slice(&input.positions);
            seg.extend_from_slice(&input.segments);
        }
        let w = &self.vars;
        let t = g.gather_rows(w.token_emb, &ids)?;
        let p = g.gather_rows(w.pos_emb, &pos)?;
        let s = g.gather_rows(w.seg_emb, &seg)?;
        let tp = g.add(t, p)?;
        g.add(tp, s)
    }

    /// Embeds and encodes a batch through every layer.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        inputs: &[PackedInput],
        train_mode: bool,
        seed: u64,
    ) -> Result<Encoded> {
        if inputs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let h0 = self.embed(g, inputs)?;
        let mut blocks = Vec::with_capacity(inputs.len());
        let mut offsets = Vec::with_capacity(inputs.len());
        let mut off = 0;
        for input in inputs {
            blocks.push(Block {
                offset: off,
                len: input.len(),
                additive: input.mask()?.additive(),
            });
            offsets.push(off);
            off += input.len();
        }
        let mut layers = vec![h0];
        let mut h = h0;
        for l in 0..self.config.layers {
            let layer_seed = derive_seed(seed, &[l as u64]);
            h = self.transformer_layer(g, l, h, &blocks, train_mode, layer_seed, None)?;
            layers.push(h);
        }
        Ok(Encoded {
            layers,
            offsets,
            lens: inputs.iter().map(PackedInput::len).collect(),
        })
    }

    /// Attention weights of layer `layer` for a single input, one matrix
    /// per head. Runs the stack up to that layer in evaluation mode.
    pub fn attention_probs<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        input: &PackedInput,
        layer: usize,
    ) -> Result<Vec<Var>> {
        let mut h = self.embed(g, std::slice::from_ref(input))?;
        let blocks = [Block {
            offset: 0,
            len: input.len(),
            additive: input.mask()?.additive(),
        }];
        let mut probs = Vec::new();
        for l in 0..=layer.min(self.config.layers.saturating_sub(1)) {
            let capture = (l == layer).then_some(&mut probs);
            h = self.transformer_layer(g, l, h, &blocks, false, 0, capture)?;
        }
        Ok(probs)
    }

    #[allow(clippy::too_many_arguments)]
    fn transformer_layer<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        l: usize,
        h: Var,
        blocks: &[Block<T>],
        train_mode: bool,
        seed: u64,
        capture: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let w = &self.vars.layers[l];
        let p = if train_mode { self.config.dropout } else { 0.0 };
        let attn = self.attention(g, w, h, blocks, p, seed, capture)?;
        let attn = g.dropout(attn, p, derive_seed(seed, &[1]));
        let res1 = g.add(h, attn)?;
        let eps = T::of(self.config.layer_norm_eps);
        let h1 = g.layer_norm(res1, w.ln1_gain, w.ln1_bias, eps)?;

        let inner = g.matmul(h1, w.w1)?;
        let inner = g.add_bias(inner, w.b1)?;
        let inner = g.gelu(inner);
        let ff = g.matmul(inner, w.w2)?;
        let ff = g.add_bias(ff, w.b2)?;
        let ff = g.dropout(ff, p, derive_seed(seed, &[2]));
        let res2 = g.add(h1, ff)?;
        g.layer_norm(res2, w.ln2_gain, w.ln2_bias, eps)
    }

    /// Masked multi-head self-attention followed by the output projection.
    #[allow(clippy::too_many_arguments)]
    fn attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        w: &LayerWeights<Var>,
        h: Var,
        blocks: &[Block<T>],
        dropout: f64,
        seed: u64,
        mut capture: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let heads = self.config.heads;
        let dk = self.config.head_dim();
        let scale = T::one() / T::of(dk as f64).sqrt();
        let q = g.matmul(h, w.wq)?;
        let k = g.matmul(h, w.wk)?;
        let v = g.matmul(h, w.wv)?;
        let mut per_example = Vec::with_capacity(blocks.len());
        for (e, b) in blocks.iter().enumerate() {
            let (qe, ke, ve) = if blocks.len() == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_rows(q, b.offset, b.len)?,
                    g.slice_rows(k, b.offset, b.len)?,
                    g.slice_rows(v, b.offset, b.len)?,
                )
            };
            let mut ctx = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (qh, kh, vh) = if heads == 1 {
                    (qe, ke, ve)
                } else {
                    (
                        g.slice_cols(qe, hd * dk, dk)?,
                        g.slice_cols(ke, hd * dk, dk)?,
                        g.slice_cols(ve, hd * dk, dk)?,
                    )
                };
                let scores = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores, scale);
                let scores = g.add_const(scores, &b.additive)?;
                let probs = g.softmax_rows(scores)?;
                if let Some(c) = capture.as_deref_mut() {
                    c.push(probs);
                }
                let probs = g.dropout(probs, dropout, derive_seed(seed, &[0, e as u64, hd as u64]));
                ctx.push(g.matmul(probs, vh)?);
            }
            per_example.push(if heads == 1 { ctx[0] } else { g.concat_cols(&ctx)? });
        }
        let ctx = if per_example.len() == 1 {
            per_example[0]
        } else {
            g.concat_rows(&per_example)?
        };
        let out = g.matmul(ctx, w.wo)?;
        g.add_bias(out, w.bo)
    }

    /// Token logits at the given rows of `h`, through the tied embedding table.
    pub fn lm_logits<T: Scalar>(&self, g: &mut Graph<T>, h: Var, rows: &[usize]) -> Result<Var> {
        let n = g.value(h).rows();
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index {
                what: "lm_logits position",
                index: r,
                limit: n,
            });
        }
        let sel = g.gather_rows(h, rows)?;
        let logits = g.matmul_nt(sel, self.vars.token_emb)?;
        g.add_bias(logits, self.vars.lm_bias)
    }

    /// IsNext/NotNext logits at the given (SOS) rows of `h`.
    pub fn nsp_logits<T: Scalar>(&self, g: &mut Graph<T>, h: Var, rows: &[usize]) -> Result<Var> {
        let sel = g.gather_rows(h, rows)?;
        g.matmul(sel, self.vars.nsp_head)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::MASK;

    fn tiny(layers: usize) -> ModelConfig {
        ModelConfig {
            layers,
            hidden: 8,
            heads: 2,
            ff_inner: 16,
            vocab_size: 12,
            max_len: 16,
            dropout: 0.1,
            ..ModelConfig::default()
        }
    }

    fn noisy(config: ModelConfig, seed: u64) -> ModelParams<f64> {
        ModelParams::init(
            ModelConfig {
                init_std: 0.5,
                ..config
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            hidden: 10,
            heads: 4,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn packing_conventions() {
        let p = PackedInput::pair(ObjectiveKind::Seq2Seq, &[7, 8], &[9, 10, 11]).unwrap();
        assert_eq!(p.ids, vec![SOS, 7, 8, EOS, 9, 10, 11, EOS]);
        assert_eq!(p.segments, vec![4, 4, 4, 4, 5, 5, 5, 5]);
        assert_eq!(p.objective, LMObjective::Seq2Seq { source_len: 4 });
        let s = PackedInput::single(ObjectiveKind::RightToLeft, &[7]).unwrap();
        assert_eq!(s.segments, vec![3, 3, 3]);
        assert!(PackedInput::new(vec![7, 8], vec![0, 0], LMObjective::Bidirectional).is_err());
    }

    #[test]
    fn zero_tables_embed_to_zero() {
        let p = ModelParams::<f64>::zeros(tiny(1)).unwrap();
        let input = PackedInput::single(ObjectiveKind::Bidirectional, &[6, 7]).unwrap();
        assert!(p.embed(&input).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn embedding_is_sum_of_three_rows() {
        let mut p = ModelParams::<f64>::zeros(tiny(0)).unwrap();
        let d = p.config.hidden;
        let w = &mut p.weights;
        w.token_emb.data_mut()[SOS as usize * d] = 1.0;
        w.pos_emb.data_mut()[1] = 2.0;
        w.seg_emb.data_mut()[2 * d + 2] = 4.0;
        let input = PackedInput::new(vec![SOS], vec![2], LMObjective::LeftToRight).unwrap();
        let h = p.embed(&input).unwrap();
        assert_eq!(&h.data()[..4], &[1.0, 2.0, 4.0, 0.0]);
    }

    #[test]
    fn zero_layers_yield_embeddings_only() {
        let p = noisy(tiny(0), 1);
        let input = PackedInput::single(ObjectiveKind::LeftToRight, &[5, 6]).unwrap();
        let hs = p.forward(&input, false, 0).unwrap();
        assert_eq!(hs.layers.len(), 1);
        assert_eq!(hs.layers[0], p.embed(&input).unwrap());
    }

    #[test]
    fn forward_is_deterministic_including_dropout() {
        let p = noisy(tiny(2), 2);
        let input = PackedInput::pair(ObjectiveKind::Seq2Seq, &[5, 6], &[7, 8]).unwrap();
        assert_eq!(p.forward(&input, true, 9).unwrap(), p.forward(&input, true, 9).unwrap());
        assert_ne!(p.forward(&input, true, 9).unwrap(), p.forward(&input, true, 10).unwrap());
        assert_eq!(p.forward(&input, false, 1).unwrap(), p.forward(&input, false, 2).unwrap());
    }

    #[test]
    fn single_position_attends_to_itself() {
        let p = noisy(tiny(1), 3);
        let input = PackedInput::new(vec![SOS], vec![2], LMObjective::LeftToRight).unwrap();
        let mut g = Graph::new();
        let m = p.bind(&mut g, false);
        let probs = m.attention_probs(&mut g, &input, 0).unwrap();
        for pr in probs {
            assert_eq!(g.value(pr).data(), &[1.0]);
        }
    }

    #[test]
    fn last_row_matches_between_bidirectional_and_causal() {
        let p = noisy(tiny(1), 4);
        let ids = vec![SOS, 5, 6, 7, EOS];
        let bi = PackedInput::new(ids.clone(), vec![2; 5], LMObjective::Bidirectional).unwrap();
        let l2r = PackedInput::new(ids, vec![2; 5], LMObjective::LeftToRight).unwrap();
        let mut g = Graph::new();
        let m = p.bind(&mut g, false);
        let a = m.attention_probs(&mut g, &bi, 0).unwrap();
        let b = m.attention_probs(&mut g, &l2r, 0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(g.value(*x).row(4), g.value(*y).row(4));
        }
    }

    #[test]
    fn lm_logits_examples() {
        let mut p = ModelParams::<f64>::zeros(tiny(0)).unwrap();
        let h = Tensor::zeros(&[2, 8]);
        let logits = p.lm_logits(&h, &[1]).unwrap();
        assert!(logits.data().iter().all(|&x| x == 0.0));

        let d = 8;
        for k in 0..8 {
            p.weights.token_emb.data_mut()[k * d + k] = 1.0;
        }
        let mut h = Tensor::zeros(&[1, 8]);
        h.data_mut()[6] = 1.0;
        let logits = p.lm_logits(&h, &[0]).unwrap();
        let argmax = (0..12)
            .max_by(|&a, &b| logits.data()[a].total_cmp(&logits.data()[b]))
            .unwrap();
        assert_eq!(argmax, 6);
        assert!(p.lm_logits(&h, &[1]).is_err());
    }

    #[test]
    fn nsp_zero_head() {
        let p = ModelParams::<f64>::zeros(tiny(0)).unwrap();
        assert_eq!(p.nsp_logits(&[0.0; 8]).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn out_of_range_id_is_index_error() {
        let p = noisy(tiny(1), 5);
        let input = PackedInput::single(ObjectiveKind::LeftToRight, &[50]).unwrap();
        assert!(matches!(p.forward(&input, false, 0), Err(Error::Index { .. })));
        let long = PackedInput::single(ObjectiveKind::LeftToRight, &[5; 20]).unwrap();
        assert!(matches!(p.forward(&long, false, 0), Err(Error::TooLong { .. })));
    }

    #[test]
    fn position_sensitive() {
        let p = noisy(tiny(2), 6);
        let a = PackedInput::single(ObjectiveKind::Bidirectional, &[5, 6, 7]).unwrap();
        let b = PackedInput::single(ObjectiveKind::Bidirectional, &[7, 6, 5]).unwrap();
        let ha = p.forward(&a, false, 0).unwrap();
        let hb = p.forward(&b, false, 0).unwrap();
        assert_ne!(ha.last().row(1), hb.last().row(3));
    }

    #[test]
    fn batch_encoding_matches_single_encoding() {
        let p = noisy(tiny(2), 7);
        let a = PackedInput::pair(ObjectiveKind::Seq2Seq, &[5, 6], &[7, MASK]).unwrap();
        let b = PackedInput::single(ObjectiveKind::RightToLeft, &[8, 9, 10]).unwrap();
        let mut g = Graph::new();
        let m = p.bind(&mut g, false);
        let enc = m.encode(&mut g, &[a.clone(), b.clone()], false, 0).unwrap();
        let last = g.value(enc.last()).clone();
        let ha = p.forward(&a, false, 0).unwrap();
        let hb = p.forward(&b, false, 0).unwrap();
        for i in 0..a.len() {
            for (x, y) in last.row(enc.row(0, i)).iter().zip(ha.last().row(i)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        for i in 0..b.len() {
            for (x, y) in last.row(enc.row(1, i)).iter().zip(hb.last().row(i)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn runs_in_single_precision() {
        let p = ModelParams::<f32>::init(tiny(2), 1).unwrap();
        let input = PackedInput::pair(ObjectiveKind::Bidirectional, &[5], &[6]).unwrap();
        let hs = p.forward(&input, false, 0).unwrap();
        assert!(hs.last().data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn component_counts_cover_everything() {
        let p = ModelParams::<f64>::init(tiny(2), 0).unwrap();
        let total: usize = p.component_counts().iter().map(|(_, n)| n).sum();
        assert_eq!(total, p.num_params());
        assert!(p.component_counts().iter().any(|(c, _)| c == "layer.1.attn"));
    }
}
