//! Decoder-only transformer host, passthrough-block injection and removal,
//! and activation taps around every passthrough stack.

mod checkpoint;
mod config;
mod generate;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{Graph, NodeId, ParamId, ParamStore, Tensor};

pub use checkpoint::{split_checkpoint, Manifest, ManifestParam, MaskRecord, FORMAT_VERSION, MAGIC};
pub use config::{InsertionPlan, ModelConfig};
pub use generate::{argmax, sample_categorical, Decode};

pub type TokenId = u32;

const INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// Residual output projections start at zero, so each new block is the
    /// identity map until trained.
    Identity,
    Random,
}

/// Parameter handles of one pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    /// Per-hidden-unit multiplier (0 or 1) applied after the MLP nonlinearity.
    pub mlp_mask: Option<Vec<f32>>,
}

impl Block {
    pub fn param_ids(&self) -> [ParamId; 16] {
        [
            self.ln1_gain,
            self.ln1_bias,
            self.wq,
            self.bq,
            self.wk,
            self.bk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.ln2_gain,
            self.ln2_bias,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
        ]
    }
}

/// Activations around the passthrough stack at one position.
#[derive(Clone, Copy, Debug)]
pub struct GraphTap {
    pub position: usize,
    /// Stack input `z_{i-1}`.
    pub input: NodeId,
    /// Stack output.
    pub output: NodeId,
}

#[derive(Clone, Debug, Default)]
pub struct GraphForward {
    pub logits: NodeId,
    /// Output of the last host block, before the final norm.
    pub last_hidden: NodeId,
    pub taps: Vec<GraphTap>,
    /// `(position, block index, node)` of post-nonlinearity MLP activations
    /// inside passthrough blocks.
    pub mlp_hidden: Vec<(usize, usize, NodeId)>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub taps: bool,
    pub capture_mlp: bool,
}

#[derive(Clone, Debug)]
pub struct Tap {
    pub position: usize,
    pub input: Tensor,
    pub output: Tensor,
}

#[derive(Clone, Debug)]
pub struct TapTrace {
    pub taps: Vec<Tap>,
    pub logits: Tensor,
    pub last_hidden: Tensor,
}

/// A host transformer, optionally carrying passthrough stacks.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    host: Vec<Block>,
    lnf_gain: ParamId,
    lnf_bias: ParamId,
    head_weight: Option<ParamId>,
    head_bias: ParamId,
    stacks: Vec<Vec<Block>>,
    plan: InsertionPlan,
    host_params: usize,
    pub training_step: u64,
}

struct Init<'r> {
    rng: &'r mut ChaCha8Rng,
    std: f32,
}

impl Init<'_> {
    fn normal(&mut self, shape: &[usize], std: f32) -> Tensor {
        let dist = Normal::new(0.0f32, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut *self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }
}

fn new_block(
    store: &mut ParamStore,
    prefix: &str,
    m: usize,
    init: Option<&mut Init<'_>>,
    mode: InitMode,
    residual_std: f32,
) -> Block {
    let h = 4 * m;
    let mut init = init;
    let mut w = |store: &mut ParamStore, name: &str, shape: &[usize], std: f32, zero: bool| -> ParamId {
        let t = match (&mut init, zero) {
            (Some(i), false) => {
                let s = if std > 0.0 { std } else { i.std };
                i.normal(shape, s)
            }
            _ => Tensor::zeros(shape),
        };
        store.add(format!("{prefix}.{name}"), t, true)
    };
    let zero_out = mode == InitMode::Identity;
    Block {
        ln1_gain: store.add(format!("{prefix}.ln1.gain"), Tensor::full(&[m], 1.0), true),
        ln1_bias: store.add(format!("{prefix}.ln1.bias"), Tensor::zeros(&[m]), true),
        wq: w(store, "attn.wq", &[m, m], 0.0, false),
        bq: store.add(format!("{prefix}.attn.bq"), Tensor::zeros(&[m]), true),
        wk: w(store, "attn.wk", &[m, m], 0.0, false),
        bk: store.add(format!("{prefix}.attn.bk"), Tensor::zeros(&[m]), true),
        wv: w(store, "attn.wv", &[m, m], 0.0, false),
        bv: store.add(format!("{prefix}.attn.bv"), Tensor::zeros(&[m]), true),
        wo: w(store, "attn.wo", &[m, m], residual_std, zero_out),
        bo: store.add(format!("{prefix}.attn.bo"), Tensor::zeros(&[m]), true),
        ln2_gain: store.add(format!("{prefix}.ln2.gain"), Tensor::full(&[m], 1.0), true),
        ln2_bias: store.add(format!("{prefix}.ln2.bias"), Tensor::zeros(&[m]), true),
        w1: w(store, "mlp.w1", &[m, h], 0.0, false),
        b1: store.add(format!("{prefix}.mlp.b1"), Tensor::zeros(&[h]), true),
        w2: w(store, "mlp.w2", &[h, m], residual_std, zero_out),
        b2: store.add(format!("{prefix}.mlp.b2"), Tensor::zeros(&[m]), true),
        mlp_mask: None,
    }
}

fn stack_prefix(position: usize, k: usize) -> String {
    format!("pt.{position}.{k}")
}

impl Model {
    /// Builds a freshly initialised host model, deterministic in `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self::build(config, Some(&mut rng)))
    }

    /// Same layout as [`Model::init`] with all-zero weights (used by loaders).
    pub(crate) fn skeleton(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::build(config, None))
    }

    fn build(config: ModelConfig, rng: Option<&mut ChaCha8Rng>) -> Self {
        let (m, v, l) = (config.width, config.vocab, config.layers);
        let residual_std = INIT_STD / ((2 * l) as f32).sqrt();
        let mut store = ParamStore::new();
        let mut init = rng.map(|rng| Init { rng, std: INIT_STD });
        let mut tensor = |shape: &[usize]| match &mut init {
            Some(i) => i.normal(shape, INIT_STD),
            None => Tensor::zeros(shape),
        };
        let tok = tensor(&[v, m]);
        let pos = tensor(&[config.max_seq, m]);
        let tok_emb = store.add("tok_emb", tok, true);
        let pos_emb = store.add("pos_emb", pos, true);
        let host = (0..l)
            .map(|i| {
                new_block(
                    &mut store,
                    &format!("host.{i}"),
                    m,
                    init.as_mut(),
                    InitMode::Random,
                    residual_std,
                )
            })
            .collect();
        let lnf_gain = store.add("ln_f.gain", Tensor::full(&[m], 1.0), true);
        let lnf_bias = store.add("ln_f.bias", Tensor::zeros(&[m]), true);
        let head_weight = if config.tie_head {
            None
        } else {
            let t = match &mut init {
                Some(i) => i.normal(&[m, v], INIT_STD),
                None => Tensor::zeros(&[m, v]),
            };
            Some(store.add("head.weight", t, true))
        };
        let head_bias = store.add("head.bias", Tensor::zeros(&[v]), true);
        let host_params = store.len();
        Self {
            plan: InsertionPlan::zeros(l),
            stacks: vec![Vec::new(); l],
            config,
            store,
            tok_emb,
            pos_emb,
            host,
            lnf_gain,
            lnf_bias,
            head_weight,
            head_bias,
            host_params,
            training_step: 0,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> &InsertionPlan {
        &self.plan
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::new(&self.store)
    }

    pub fn host_blocks(&self) -> &[Block] {
        &self.host
    }

    /// Passthrough blocks before host layer `position`, in application order.
    pub fn stack(&self, position: usize) -> &[Block] {
        &self.stacks[position]
    }

    pub fn stacks_mut(&mut self) -> impl Iterator<Item = (usize, &mut Vec<Block>)> {
        self.stacks.iter_mut().enumerate()
    }

    pub fn has_passthrough(&self) -> bool {
        self.plan.total() > 0
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Parameters of the output head (final norm, projection, bias).
    pub fn head_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.lnf_gain, self.lnf_bias, self.head_bias];
        ids.push(self.head_weight.unwrap_or(self.tok_emb));
        ids
    }

    /// Parameters belonging to passthrough blocks.
    pub fn passthrough_params(&self) -> Vec<ParamId> {
        (self.host_params..self.store.len()).collect()
    }

    /// Parameters of the last host block.
    pub fn last_host_block_params(&self) -> Vec<ParamId> {
        self.host.last().map(|b| b.param_ids().to_vec()).unwrap_or_default()
    }

    /// Parameters of the final passthrough block (highest position, last in
    /// its stack).
    pub fn last_passthrough_block_params(&self) -> Vec<ParamId> {
        self.stacks
            .iter()
            .rev()
            .find_map(|s| s.last())
            .map(|b| b.param_ids().to_vec())
            .unwrap_or_default()
    }

    /// Inserts `plan.counts()[i]` passthrough blocks before every host layer
    /// `i`. The new blocks share the host block architecture.
    pub fn inject(&self, plan: &InsertionPlan, mode: InitMode, seed: u64) -> Result<Model> {
        if plan.len() != self.config.layers {
            return Err(Error::PlanMismatch {
                plan: plan.len(),
                layers: self.config.layers,
            });
        }
        if self.has_passthrough() {
            return Err(Error::InvalidArgument(
                "model already carries passthrough layers".into(),
            ));
        }
        let mut out = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            rng: &mut rng,
            std: INIT_STD,
        };
        let residual_std = INIT_STD / ((2 * self.config.layers) as f32).sqrt();
        for (i, &n) in plan.counts().iter().enumerate() {
            for k in 0..n {
                let block = new_block(
                    &mut out.store,
                    &stack_prefix(i, k),
                    self.config.width,
                    Some(&mut init),
                    mode,
                    residual_std,
                );
                out.stacks[i].push(block);
            }
        }
        out.plan = plan.clone();
        Ok(out)
    }

    /// Removes every passthrough block, keeping the current host weights.
    pub fn strip(&self) -> Model {
        let mut store = ParamStore::new();
        for p in self.store.iter().take(self.host_params) {
            store.push_parameter(p.clone());
        }
        Model {
            config: self.config.clone(),
            store,
            tok_emb: self.tok_emb,
            pos_emb: self.pos_emb,
            host: self.host.clone(),
            lnf_gain: self.lnf_gain,
            lnf_bias: self.lnf_bias,
            head_weight: self.head_weight,
            head_bias: self.head_bias,
            stacks: vec![Vec::new(); self.config.layers],
            plan: InsertionPlan::zeros(self.config.layers),
            host_params: self.host_params,
            training_step: self.training_step,
        }
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        if tokens.is_empty() {
            return Err(Error::EmptySample);
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    fn block_forward(
        &self,
        g: &mut Graph<'_>,
        block: &Block,
        x: NodeId,
        capture: Option<&mut Vec<NodeId>>,
    ) -> Result<NodeId> {
        let p = |g: &mut Graph<'_>, id| g.param(id);
        let (g1, b1) = (p(g, block.ln1_gain), p(g, block.ln1_bias));
        let h = g.layer_norm(x, g1, b1)?;
        let linear = |g: &mut Graph<'_>, input, w, b| -> Result<NodeId> {
            let wn = g.param(w);
            let bn = g.param(b);
            let y = g.matmul(input, wn)?;
            g.add_row(y, bn)
        };
        let q = linear(g, h, block.wq, block.bq)?;
        let k = linear(g, h, block.wk, block.bk)?;
        let v = linear(g, h, block.wv, block.bv)?;
        let a = g.causal_attention(q, k, v, self.config.heads)?;
        let a = linear(g, a, block.wo, block.bo)?;
        let x = g.add(x, a)?;
        let (g2, b2) = (p(g, block.ln2_gain), p(g, block.ln2_bias));
        let h = g.layer_norm(x, g2, b2)?;
        let u = linear(g, h, block.w1, block.b1)?;
        let mut u = g.gelu(u)?;
        if let Some(mask) = &block.mlp_mask {
            u = g.mask_cols(u, mask)?;
        }
        if let Some(c) = capture {
            c.push(u);
        }
        let o = linear(g, u, block.w2, block.b2)?;
        g.add(x, o)
    }

    /// Records one causal forward pass over `tokens` into `g`.
    ///
    /// At each position `i` the passthrough stack runs first, then host
    /// layer `i`.
    pub fn forward_graph(&self, g: &mut Graph<'_>, tokens: &[TokenId], opts: ForwardOptions) -> Result<GraphForward> {
        self.check_tokens(tokens)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = g.param(self.tok_emb);
        let pos = g.param(self.pos_emb);
        let te = g.embed(tok, &ids)?;
        let pe = g.embed(pos, &positions)?;
        let mut x = g.add(te, pe)?;
        let mut out = GraphForward::default();
        for (i, host_block) in self.host.iter().enumerate() {
            let stack = &self.stacks[i];
            if !stack.is_empty() {
                let input = x;
                for (k, block) in stack.iter().enumerate() {
                    let mut captured = Vec::new();
                    x = self.block_forward(g, block, x, opts.capture_mlp.then_some(&mut captured))?;
                    if let Some(&u) = captured.first() {
                        out.mlp_hidden.push((i, k, u));
                    }
                }
                if opts.taps {
                    out.taps.push(GraphTap {
                        position: i,
                        input,
                        output: x,
                    });
                }
            }
            x = self.block_forward(g, host_block, x, None)?;
        }
        out.last_hidden = x;
        let (gain, bias) = (g.param(self.lnf_gain), g.param(self.lnf_bias));
        let h = g.layer_norm(x, gain, bias)?;
        let logits = match self.head_weight {
            Some(w) => {
                let w = g.param(w);
                g.matmul(h, w)?
            }
            None => g.matmul_bt(h, tok)?,
        };
        let hb = g.param(self.head_bias);
        out.logits = g.add_row(logits, hb)?;
        Ok(out)
    }

    /// Next-token logits `[T x V]`, plus the tap trace when requested.
    pub fn forward(&self, tokens: &[TokenId], want_taps: bool) -> Result<(Tensor, Option<TapTrace>)> {
        let mut g = self.graph();
        let f = self.forward_graph(
            &mut g,
            tokens,
            ForwardOptions {
                taps: want_taps,
                capture_mlp: false,
            },
        )?;
        let logits = g.value(f.logits).clone();
        let trace = want_taps.then(|| TapTrace {
            taps: f
                .taps
                .iter()
                .map(|t| Tap {
                    position: t.position,
                    input: g.value(t.input).clone(),
                    output: g.value(t.output).clone(),
                })
                .collect(),
            logits: logits.clone(),
            last_hidden: g.value(f.last_hidden).clone(),
        });
        Ok((logits, trace))
    }

    pub fn logits(&self, tokens: &[TokenId]) -> Result<Tensor> {
        Ok(self.forward(tokens, false)?.0)
    }

    /// Zeroes the weights feeding and leaving masked MLP units in every
    /// passthrough block that carries a mask.
    pub fn enforce_masks(&mut self) {
        let h = self.config.mlp_width();
        let m = self.config.width;
        let blocks: Vec<(Vec<f32>, ParamId, ParamId, ParamId)> = self
            .stacks
            .iter()
            .flatten()
            .filter_map(|b| b.mlp_mask.clone().map(|mask| (mask, b.w1, b.b1, b.w2)))
            .collect();
        for (mask, w1, b1, w2) in blocks {
            for (u, &keep) in mask.iter().enumerate() {
                if keep != 0.0 {
                    continue;
                }
                let w1d = self.store.get_mut(w1).value.data_mut();
                for r in 0..m {
                    w1d[r * h + u] = 0.0;
                }
                self.store.get_mut(b1).value.data_mut()[u] = 0.0;
                let w2d = self.store.get_mut(w2).value.data_mut();
                w2d[u * m..(u + 1) * m].fill(0.0);
            }
        }
    }
}
