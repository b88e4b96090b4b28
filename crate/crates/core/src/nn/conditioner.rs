//! Conditioning networks `H` mapping a conditional to the representation
//! fused into the main generative network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gated::GatedRewriter;
use super::layers::{build_stack, stack_forward, Activation, DenseLayer, Init};
use super::param::{Ctx, Param, Parameterized};
use crate::conditional::Conditional;
use crate::error::{Error, Result};
use crate::rng::normal_tensor;
use crate::tensor::{NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    OneHot,
    Gaussian,
}

/// Frozen token embedding table standing in for a pretrained text encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub table: Param,
}

/// Encoded batch of equal-length conditionals.
#[derive(Clone, Debug)]
pub struct CondBatch {
    pub conds: Vec<Conditional>,
    /// Mean token embedding per conditional, `[batch, dim]`.
    pub sentence: Tensor,
    /// Token embeddings by position, each `[batch, dim]`.
    pub words: Vec<Tensor>,
}

impl CondBatch {
    pub fn len(&self) -> usize {
        self.conds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conds.is_empty()
    }
}

impl TextEncoder {
    pub fn new(
        name: &str,
        vocab: usize,
        dim: usize,
        kind: EmbeddingKind,
        rng: &mut impl Rng,
    ) -> Self {
        let table = match kind {
            EmbeddingKind::OneHot => {
                let mut t = Tensor::zeros(&[vocab, dim]);
                for i in 0..vocab.min(dim) {
                    t.set(i, i, 1.0);
                }
                t
            }
            EmbeddingKind::Gaussian => normal_tensor(rng, &[vocab, dim], 1.0 / (dim as f64).sqrt()),
        };
        Self {
            table: Param::frozen(format!("{name}.table"), table),
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.value.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.value.cols()
    }

    pub fn encode(&self, conds: &[Conditional]) -> Result<CondBatch> {
        let first = conds
            .first()
            .ok_or(Error::EmptyBatch("conditional batch"))?;
        let len = first.len();
        if len == 0 {
            return Err(Error::InvalidConditional("empty token sequence".into()));
        }
        let dim = self.dim();
        let mut words = vec![Vec::with_capacity(conds.len() * dim); len];
        let mut sentence = Vec::with_capacity(conds.len() * dim);
        for c in conds {
            if c.len() != len {
                return Err(Error::InvalidConditional(format!(
                    "batch mixes sequence lengths {len} and {}",
                    c.len()
                )));
            }
            let mut mean = vec![0.0; dim];
            for (pos, &tok) in c.tokens().iter().enumerate() {
                if tok >= self.vocab() {
                    return Err(Error::InvalidConditional(format!(
                        "token {tok} outside vocabulary of {}",
                        self.vocab()
                    )));
                }
                let row = self.table.value.row(tok);
                words[pos].extend_from_slice(row);
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            sentence.extend(mean.into_iter().map(|m| m / len as f64));
        }
        let b = conds.len();
        Ok(CondBatch {
            conds: conds.to_vec(),
            sentence: Tensor::new(vec![b, dim], sentence)?,
            words: words
                .into_iter()
                .map(|w| Tensor::new(vec![b, dim], w))
                .collect::<Result<_>>()?,
        })
    }
}

impl Parameterized for TextEncoder {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.table);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.table);
    }
}

/// `H(c_i) = M v_i` over `k` fixed embedding vectors.
///
/// `embedding` holds the vectors as columns (`[embed_dim, k]`) and is always
/// frozen; `map` is `M` with shape `[rep_dim, embed_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineConditioner {
    pub embedding: Param,
    pub map: Param,
}

impl AffineConditioner {
    pub fn labels(&self) -> usize {
        self.embedding.value.cols()
    }

    pub fn forward(&self, ctx: &mut Ctx, batch: &CondBatch) -> Result<NodeId> {
        let k = self.labels();
        let re = self.embedding.value.rows();
        let mut rows = Vec::with_capacity(batch.len() * re);
        for c in &batch.conds {
            if c.len() != 1 || c.tokens()[0] >= k {
                return Err(Error::InvalidConditional(format!(
                    "affine conditioner expects one label below {k}, got {c}"
                )));
            }
            rows.extend(self.embedding.value.column(c.tokens()[0]));
        }
        let v = ctx.input(Tensor::new(vec![batch.len(), re], rows)?);
        let m = ctx.param(&self.map);
        let mt = ctx.graph.transpose(m)?;
        ctx.graph.matmul(v, mt)
    }
}

impl Parameterized for AffineConditioner {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.embedding);
        f(&self.map);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.embedding);
        f(&mut self.map);
    }
}

/// Dense stack over the mean token embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpConditioner {
    pub layers: Vec<DenseLayer>,
}

impl Parameterized for MlpConditioner {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.layers.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layers.visit_mut(f);
    }
}

/// Recurrent encoder over token embeddings whose output projection starts at
/// zero, so attaching it leaves the host conditioner unchanged at init.
#[derive(Clone, Debug, PartialEq)]
pub struct CapacityPrefix {
    pub input: DenseLayer,
    pub recurrent: Param,
    pub projection: DenseLayer,
}

impl CapacityPrefix {
    pub fn new(name: &str, embed_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (2 * hidden) as f64).sqrt();
        Self {
            input: DenseLayer::new(
                &format!("{name}.input"),
                embed_dim,
                hidden,
                Activation::Linear,
                Init::Xavier,
                rng,
            ),
            recurrent: Param::new(
                format!("{name}.recurrent"),
                crate::rng::uniform_tensor(rng, &[hidden, hidden], bound),
            ),
            projection: DenseLayer::new(
                &format!("{name}.projection"),
                hidden,
                embed_dim,
                Activation::Linear,
                Init::Zeros,
                rng,
            ),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, words: &[Tensor]) -> Result<NodeId> {
        let mut state: Option<NodeId> = None;
        for w in words {
            let x = ctx.input(w.clone());
            let mut pre = self.input.forward(ctx, x)?;
            if let Some(h) = state {
                let r = ctx.param(&self.recurrent);
                let rt = ctx.graph.transpose(r)?;
                let hr = ctx.graph.matmul(h, rt)?;
                pre = ctx.graph.add(pre, hr)?;
            }
            state = Some(ctx.graph.tanh(pre)?);
        }
        let h = state.ok_or(Error::EmptyBatch("token sequence"))?;
        self.projection.forward(ctx, h)
    }
}

impl Parameterized for CapacityPrefix {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.input.visit(f);
        f(&self.recurrent);
        self.projection.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.input.visit_mut(f);
        f(&mut self.recurrent);
        self.projection.visit_mut(f);
    }
}

/// Conditioning-augmentation head: a mean branch on the trunk output and a
/// per-dimension scale branch (sigmoid output) reading the sentence embedding
/// directly. The scale branch can be frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead {
    pub mean: DenseLayer,
    pub scale: DenseLayer,
    pub freeze_variance: bool,
}

impl GaussianHead {
    /// `mean_input` is the trunk width, `scale_input` the raw sentence
    /// embedding width.
    pub fn new(
        name: &str,
        mean_input: usize,
        scale_input: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            mean: DenseLayer::new(
                &format!("{name}.mean"),
                mean_input,
                dim,
                Activation::Linear,
                Init::Xavier,
                rng,
            ),
            scale: DenseLayer::new(
                &format!("{name}.scale"),
                scale_input,
                dim,
                Activation::Sigmoid,
                Init::Xavier,
                rng,
            ),
            freeze_variance: false,
        }
    }

    pub fn set_freeze_variance(&mut self, freeze: bool) {
        self.freeze_variance = freeze;
        self.scale.set_frozen(freeze);
    }

    pub fn dim(&self) -> usize {
        self.mean.out_dim()
    }
}

impl Parameterized for GaussianHead {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.mean.visit(f);
        self.scale.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.mean.visit_mut(f);
        self.scale.visit_mut(f);
    }
}

/// Sentence-level conditioner: `trunk(v_s(c) + prefix(v_w(c)))`, optionally
/// followed by a Gaussian head whose scale branch sees `v_s(c)` only.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqConditioner {
    pub prefix: Option<CapacityPrefix>,
    pub trunk: Vec<DenseLayer>,
    pub head: Option<GaussianHead>,
}

impl SeqConditioner {
    /// Mean and (when a head is present) scale parts of the representation.
    pub fn forward_parts(
        &self,
        ctx: &mut Ctx,
        batch: &CondBatch,
    ) -> Result<(NodeId, Option<NodeId>)> {
        let vs = ctx.input(batch.sentence.clone());
        let mut v = vs;
        if let Some(prefix) = &self.prefix {
            let delta = prefix.forward(ctx, &batch.words)?;
            v = ctx.graph.add(v, delta)?;
        }
        let h = stack_forward(&self.trunk, ctx, v)?;
        match &self.head {
            Some(head) => {
                let mean = head.mean.forward(ctx, h)?;
                let scale = head.scale.forward(ctx, vs)?;
                Ok((mean, Some(scale)))
            }
            None => Ok((h, None)),
        }
    }
}

impl Parameterized for SeqConditioner {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.prefix.visit(f);
        self.trunk.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.prefix.visit_mut(f);
        self.trunk.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Word-level conditioner fusing token-wise features with an auxiliary input
/// (the previous stage's output): `trunk([mean_t tanh(A e_t + a), aux])`.
#[derive(Clone, Debug, PartialEq)]
pub struct WordConditioner {
    pub token: DenseLayer,
    pub trunk: Vec<DenseLayer>,
    pub aux_dim: usize,
}

impl Parameterized for WordConditioner {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.token.visit(f);
        self.trunk.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.token.visit_mut(f);
        self.trunk.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum BlockOutput {
    Conv(DenseLayer),
    Rewriter(GatedRewriter),
}

/// Per-block conditioner of a residual generator: an up-sampling layer
/// (frozen during distillation) followed by an output layer or a gated
/// rewriter around it.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockConditioner {
    pub upsample: DenseLayer,
    pub output: BlockOutput,
}

impl BlockConditioner {
    /// Features entering the output layer.
    pub fn upsampled(&self, ctx: &mut Ctx, batch: &CondBatch) -> Result<NodeId> {
        let v = ctx.input(batch.sentence.clone());
        self.upsample.forward(ctx, v)
    }
}

impl Parameterized for BlockConditioner {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.upsample.visit(f);
        match &self.output {
            BlockOutput::Conv(l) => l.visit(f),
            BlockOutput::Rewriter(g) => g.visit(f),
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.upsample.visit_mut(f);
        match &mut self.output {
            BlockOutput::Conv(l) => l.visit_mut(f),
            BlockOutput::Rewriter(g) => g.visit_mut(f),
        }
    }
}

/// Architecture of a conditioner, serialized into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditionerSpec {
    Affine {
        labels: usize,
        embed_dim: usize,
        rep_dim: usize,
        embedding: EmbeddingKind,
    },
    Mlp {
        hidden: Vec<usize>,
        rep_dim: usize,
    },
    Seq {
        hidden: Vec<usize>,
        rep_dim: usize,
        #[serde(default)]
        prefix_hidden: Option<usize>,
        #[serde(default)]
        gaussian: bool,
    },
    Word {
        token_hidden: usize,
        aux_dim: usize,
        hidden: Vec<usize>,
        rep_dim: usize,
    },
    Block {
        up_dim: usize,
        rep_dim: usize,
        #[serde(default)]
        rewriter: bool,
    },
}

impl ConditionerSpec {
    /// Output width of the conditioner. A Gaussian head contributes mean and
    /// scale halves.
    pub fn rep_dim(&self) -> usize {
        match self {
            ConditionerSpec::Seq {
                rep_dim,
                gaussian: true,
                ..
            } => 2 * rep_dim,
            ConditionerSpec::Affine { rep_dim, .. }
            | ConditionerSpec::Mlp { rep_dim, .. }
            | ConditionerSpec::Seq { rep_dim, .. }
            | ConditionerSpec::Word { rep_dim, .. }
            | ConditionerSpec::Block { rep_dim, .. } => *rep_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Conditioner {
    Affine(AffineConditioner),
    Mlp(MlpConditioner),
    Seq(SeqConditioner),
    Word(WordConditioner),
    Block(BlockConditioner),
}

impl Conditioner {
    /// Builds a freshly initialized conditioner. `input_dim` is the text
    /// encoder width (ignored by the affine variant).
    pub fn build(
        spec: &ConditionerSpec,
        name: &str,
        input_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match spec {
            ConditionerSpec::Affine {
                labels,
                embed_dim,
                rep_dim,
                embedding,
            } => {
                if embed_dim < labels {
                    return Err(Error::config(
                        "embed_dim",
                        format!(
                            "affine embedding dimension {embed_dim} below label count {labels}"
                        ),
                    ));
                }
                let v = match embedding {
                    EmbeddingKind::OneHot => {
                        let mut v = Tensor::zeros(&[*embed_dim, *labels]);
                        for i in 0..*labels {
                            v.set(i, i, 1.0);
                        }
                        v
                    }
                    EmbeddingKind::Gaussian => normal_tensor(rng, &[*embed_dim, *labels], 1.0),
                };
                let bound = (6.0 / (embed_dim + rep_dim) as f64).sqrt();
                Conditioner::Affine(AffineConditioner {
                    embedding: Param::frozen(format!("{name}.embedding"), v),
                    map: Param::new(
                        format!("{name}.map"),
                        crate::rng::uniform_tensor(rng, &[*rep_dim, *embed_dim], bound),
                    ),
                })
            }
            ConditionerSpec::Mlp { hidden, rep_dim } => {
                let sizes: Vec<usize> = std::iter::once(input_dim)
                    .chain(hidden.iter().copied())
                    .chain(std::iter::once(*rep_dim))
                    .collect();
                Conditioner::Mlp(MlpConditioner {
                    layers: build_stack(
                        name,
                        &sizes,
                        Activation::Tanh,
                        Activation::Tanh,
                        Init::Xavier,
                        rng,
                    ),
                })
            }
            ConditionerSpec::Seq {
                hidden,
                rep_dim,
                prefix_hidden,
                gaussian,
            } => {
                let prefix = prefix_hidden
                    .map(|h| CapacityPrefix::new(&format!("{name}.prefix"), input_dim, h, rng));
                let mut sizes = vec![input_dim];
                sizes.extend(hidden);
                let (trunk, head) = if *gaussian {
                    let trunk = build_stack(
                        &format!("{name}.trunk"),
                        &sizes,
                        Activation::Tanh,
                        Activation::Tanh,
                        Init::Xavier,
                        rng,
                    );
                    let last = *sizes.last().unwrap();
                    let head =
                        GaussianHead::new(&format!("{name}.head"), last, input_dim, *rep_dim, rng);
                    (trunk, Some(head))
                } else {
                    sizes.push(*rep_dim);
                    let trunk = build_stack(
                        &format!("{name}.trunk"),
                        &sizes,
                        Activation::Tanh,
                        Activation::Tanh,
                        Init::Xavier,
                        rng,
                    );
                    (trunk, None)
                };
                Conditioner::Seq(SeqConditioner {
                    prefix,
                    trunk,
                    head,
                })
            }
            ConditionerSpec::Word {
                token_hidden,
                aux_dim,
                hidden,
                rep_dim,
            } => {
                let token = DenseLayer::new(
                    &format!("{name}.token"),
                    input_dim,
                    *token_hidden,
                    Activation::Tanh,
                    Init::Xavier,
                    rng,
                );
                let sizes: Vec<usize> = std::iter::once(token_hidden + aux_dim)
                    .chain(hidden.iter().copied())
                    .chain(std::iter::once(*rep_dim))
                    .collect();
                Conditioner::Word(WordConditioner {
                    token,
                    trunk: build_stack(
                        &format!("{name}.trunk"),
                        &sizes,
                        Activation::Tanh,
                        Activation::Tanh,
                        Init::Xavier,
                        rng,
                    ),
                    aux_dim: *aux_dim,
                })
            }
            ConditionerSpec::Block {
                up_dim,
                rep_dim,
                rewriter,
            } => {
                let upsample = DenseLayer::new(
                    &format!("{name}.upsample"),
                    input_dim,
                    *up_dim,
                    Activation::Tanh,
                    Init::Xavier,
                    rng,
                );
                let conv = DenseLayer::new(
                    &format!("{name}.conv"),
                    *up_dim,
                    *rep_dim,
                    Activation::Linear,
                    Init::Xavier,
                    rng,
                );
                let output = if *rewriter {
                    BlockOutput::Rewriter(GatedRewriter::around(
                        &format!("{name}.rewriter"),
                        conv,
                        rng,
                    ))
                } else {
                    BlockOutput::Conv(conv)
                };
                Conditioner::Block(BlockConditioner { upsample, output })
            }
        })
    }

    /// Representation `H(c)` for a batch, `[batch, rep_dim]`.
    ///
    /// `aux` is required by word-level conditioners and ignored otherwise.
    pub fn forward(&self, ctx: &mut Ctx, batch: &CondBatch, aux: Option<NodeId>) -> Result<NodeId> {
        match self {
            Conditioner::Affine(a) => a.forward(ctx, batch),
            Conditioner::Mlp(m) => {
                let v = ctx.input(batch.sentence.clone());
                stack_forward(&m.layers, ctx, v)
            }
            Conditioner::Seq(s) => match s.forward_parts(ctx, batch)? {
                (mean, Some(scale)) => ctx.graph.concat(mean, scale),
                (h, None) => Ok(h),
            },
            Conditioner::Word(w) => {
                let aux = aux.ok_or_else(|| {
                    Error::InvalidArgument(
                        "word conditioner needs the previous stage output".into(),
                    )
                })?;
                let mut pooled: Option<NodeId> = None;
                for word in &batch.words {
                    let x = ctx.input(word.clone());
                    let u = w.token.forward(ctx, x)?;
                    pooled = Some(match pooled {
                        Some(p) => ctx.graph.add(p, u)?,
                        None => u,
                    });
                }
                let pooled = pooled.ok_or(Error::EmptyBatch("token sequence"))?;
                let pooled = ctx.graph.scale(pooled, 1.0 / batch.words.len() as f64)?;
                let fused = ctx.graph.concat(pooled, aux)?;
                stack_forward(&w.trunk, ctx, fused)
            }
            Conditioner::Block(b) => {
                let v = b.upsampled(ctx, batch)?;
                match &b.output {
                    BlockOutput::Conv(l) => l.forward(ctx, v),
                    BlockOutput::Rewriter(g) => g.forward(ctx, v),
                }
            }
        }
    }

    /// The part of `H(c)` matched during distillation: the mean alone when a
    /// Gaussian head keeps its variance fixed, the full output otherwise.
    pub fn distill_forward(
        &self,
        ctx: &mut Ctx,
        batch: &CondBatch,
        aux: Option<NodeId>,
    ) -> Result<NodeId> {
        match self {
            Conditioner::Seq(s) if s.head.as_ref().is_some_and(|h| h.freeze_variance) => {
                Ok(s.forward_parts(ctx, batch)?.0)
            }
            _ => self.forward(ctx, batch, aux),
        }
    }

    /// Freezes the parts that distillation must leave untouched.
    pub fn apply_frozen_policy(&mut self, freeze_variance: bool, freeze_upsample: bool) {
        match self {
            Conditioner::Seq(s) => {
                if let Some(h) = &mut s.head {
                    h.set_freeze_variance(freeze_variance);
                }
            }
            Conditioner::Block(b) => b.upsample.set_frozen(freeze_upsample),
            _ => {}
        }
    }

    /// Replaces a block conditioner's output layer by a gated rewriter
    /// wrapped around it.
    pub fn attach_rewriter(&mut self, rng: &mut impl Rng) -> Result<()> {
        match self {
            Conditioner::Block(b) => {
                if let BlockOutput::Conv(conv) = &b.output {
                    let base = conv
                        .weight
                        .name
                        .trim_end_matches(".conv.weight")
                        .to_string();
                    b.output = BlockOutput::Rewriter(GatedRewriter::around(
                        &format!("{base}.rewriter"),
                        conv.clone(),
                        rng,
                    ));
                }
                Ok(())
            }
            _ => Err(Error::InvalidArgument(
                "only block conditioners take a rewriter".into(),
            )),
        }
    }

    /// Attaches a zero-initialized capacity prefix to a sequence conditioner.
    pub fn attach_prefix(&mut self, hidden: usize, rng: &mut impl Rng) -> Result<()> {
        match self {
            Conditioner::Seq(s) => {
                if s.prefix.is_none() {
                    let first = s
                        .trunk
                        .first()
                        .ok_or_else(|| Error::InvalidArgument("empty trunk".into()))?;
                    let base = first
                        .weight
                        .name
                        .trim_end_matches(".trunk.0.weight")
                        .to_string();
                    s.prefix = Some(CapacityPrefix::new(
                        &format!("{base}.prefix"),
                        first.in_dim(),
                        hidden,
                        rng,
                    ));
                }
                Ok(())
            }
            _ => Err(Error::InvalidArgument(
                "only sequence conditioners take a prefix".into(),
            )),
        }
    }

    /// Evaluates `H(c)` outside of any training tape.
    pub fn represent(&self, batch: &CondBatch, aux: Option<&Tensor>) -> Result<Tensor> {
        let mut ctx = Ctx::inference();
        let aux = aux.map(|a| ctx.input(a.clone()));
        let out = self.forward(&mut ctx, batch, aux)?;
        Ok(ctx.value(out).clone())
    }
}

impl Parameterized for Conditioner {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            Conditioner::Affine(c) => c.visit(f),
            Conditioner::Mlp(c) => c.visit(f),
            Conditioner::Seq(c) => c.visit(f),
            Conditioner::Word(c) => c.visit(f),
            Conditioner::Block(c) => c.visit(f),
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Conditioner::Affine(c) => c.visit_mut(f),
            Conditioner::Mlp(c) => c.visit_mut(f),
            Conditioner::Seq(c) => c.visit_mut(f),
            Conditioner::Word(c) => c.visit_mut(f),
            Conditioner::Block(c) => c.visit_mut(f),
        }
    }
}
