use serde::{Deserialize, Serialize};

use super::task::SyntheticTask;
use crate::conditional::Conditional;
use crate::error::{Error, Result};
use crate::nn::{
    build_stack, stack_forward, Activation, CondBatch, Conditioner, ConditionerSpec, Ctx,
    DenseLayer, EmbeddingKind, Init, Param, Parameterized, TextEncoder,
};
use crate::rng::{derive_seed, normal_tensor, rng};
use crate::tensor::{NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    Single,
    Cascaded,
    Residual,
}

impl Topology {
    pub fn tag(&self) -> &'static str {
        match self {
            Topology::Single => "single",
            Topology::Cascaded => "cascaded",
            Topology::Residual => "residual",
        }
    }
}

/// Everything needed to rebuild a generator from its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub topology: Topology,
    pub latent_dim: usize,
    pub output_dim: usize,
    pub vocab: usize,
    pub embed_dim: usize,
    pub embedding: EmbeddingKind,
    /// Hidden widths of each main network.
    pub hidden: Vec<usize>,
    pub conditioners: Vec<ConditionerSpec>,
    /// Residual state width.
    #[serde(default)]
    pub state_dim: usize,
    /// Residual dilation cycle length.
    #[serde(default)]
    pub cycle: usize,
}

pub const DEFAULT_LATENT: usize = 4;

impl GeneratorArch {
    /// One conditioner fused with `z` by a single MLP.
    pub fn single(task: &SyntheticTask, conditioner: ConditionerSpec, hidden: Vec<usize>) -> Self {
        let embed_dim = task.vocab_size();
        Self {
            topology: Topology::Single,
            latent_dim: DEFAULT_LATENT,
            output_dim: task.output_dim(),
            vocab: task.vocab_size(),
            embed_dim,
            embedding: EmbeddingKind::OneHot,
            hidden,
            conditioners: vec![conditioner],
            state_dim: 0,
            cycle: 0,
        }
    }

    /// Affine label conditioner with one-hot embeddings.
    pub fn affine_single(task: &SyntheticTask, rep_dim: usize, hidden: Vec<usize>) -> Self {
        let k = task.vocab_size();
        Self::single(
            task,
            ConditionerSpec::Affine {
                labels: k,
                embed_dim: k,
                rep_dim,
                embedding: EmbeddingKind::OneHot,
            },
            hidden,
        )
    }

    /// Two stages: a sentence-level conditioner with a Gaussian head feeding
    /// stage 1, then a word-level conditioner reading stage 1's output.
    pub fn cascaded(task: &SyntheticTask, embed_dim: usize, hidden: Vec<usize>) -> Result<Self> {
        if task.output_dim() < 3 {
            return Err(Error::config(
                "task.dim",
                "cascaded generators need at least 3 output dimensions",
            ));
        }
        Ok(Self {
            topology: Topology::Cascaded,
            latent_dim: DEFAULT_LATENT,
            output_dim: task.output_dim(),
            vocab: task.vocab_size(),
            embed_dim,
            embedding: EmbeddingKind::Gaussian,
            hidden,
            conditioners: vec![
                ConditionerSpec::Seq {
                    hidden: vec![16],
                    rep_dim: 2,
                    prefix_hidden: None,
                    gaussian: true,
                },
                ConditionerSpec::Word {
                    token_hidden: 8,
                    aux_dim: 2,
                    hidden: vec![16],
                    rep_dim: 6,
                },
            ],
            state_dim: 0,
            cycle: 0,
        })
    }

    /// `blocks` residual blocks, each fusing its own block conditioner.
    pub fn residual(
        task: &SyntheticTask,
        embed_dim: usize,
        blocks: usize,
        cycle: usize,
        state_dim: usize,
        width: usize,
    ) -> Self {
        Self {
            topology: Topology::Residual,
            latent_dim: DEFAULT_LATENT,
            output_dim: task.output_dim(),
            vocab: task.vocab_size(),
            embed_dim,
            embedding: EmbeddingKind::Gaussian,
            hidden: vec![width],
            conditioners: (0..blocks)
                .map(|_| ConditionerSpec::Block {
                    up_dim: 8,
                    rep_dim: width,
                    rewriter: false,
                })
                .collect(),
            state_dim,
            cycle,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.output_dim == 0 || self.vocab == 0 || self.embed_dim == 0 {
            return Err(Error::config("architecture", "dimensions must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config(
                "architecture.hidden",
                "widths must be positive",
            ));
        }
        match self.topology {
            Topology::Single => {
                if self.conditioners.len() != 1 {
                    return Err(Error::config(
                        "architecture.conditioners",
                        "single topology takes one conditioner",
                    ));
                }
            }
            Topology::Cascaded => {
                let ok = matches!(
                    self.conditioners.as_slice(),
                    [
                        ConditionerSpec::Seq { gaussian: true, .. },
                        ConditionerSpec::Word { aux_dim: 2, .. }
                    ]
                );
                if !ok {
                    return Err(Error::config(
                        "architecture.conditioners",
                        "cascaded topology takes a Gaussian sequence conditioner then a word conditioner over 2 stage-1 outputs",
                    ));
                }
                if let ConditionerSpec::Seq { rep_dim, .. } = &self.conditioners[0] {
                    if *rep_dim > self.latent_dim {
                        return Err(Error::config(
                            "architecture.conditioners",
                            "augmentation width exceeds latent width",
                        ));
                    }
                }
                if self.output_dim < 3 {
                    return Err(Error::config(
                        "architecture.output_dim",
                        "cascaded output needs at least 3 dimensions",
                    ));
                }
            }
            Topology::Residual => {
                if self.conditioners.is_empty() || self.state_dim == 0 || self.hidden.len() != 1 {
                    return Err(Error::config(
                        "architecture",
                        "residual topology needs blocks, a state width and one block width",
                    ));
                }
                if self
                    .conditioners
                    .iter()
                    .any(|c| c.rep_dim() != self.hidden[0])
                {
                    return Err(Error::config(
                        "architecture.conditioners",
                        "block conditioner width mismatch",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Main network plus separately owned conditioners.
///
/// Parameter names: `encoder.table`, `cond{i}.*` for conditioner `i` and
/// `main.*` for everything else.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalGenerator {
    pub arch: GeneratorArch,
    pub encoder: TextEncoder,
    pub conditioners: Vec<Conditioner>,
    /// Single: `[net]`. Cascaded: `[stage0, stage1]`. Residual:
    /// `[input, block0 (a, c), ..., output]`.
    pub main: Vec<Vec<DenseLayer>>,
}

pub const MAIN_PREFIX: &str = "main.";

pub fn cond_prefix(i: usize) -> String {
    format!("cond{i}.")
}

fn mlp(
    name: &str,
    input: usize,
    hidden: &[usize],
    output: usize,
    r: &mut impl rand::Rng,
) -> Vec<DenseLayer> {
    let sizes: Vec<usize> = std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect();
    build_stack(
        name,
        &sizes,
        Activation::Tanh,
        Activation::Linear,
        Init::Xavier,
        r,
    )
}

impl ConditionalGenerator {
    pub fn build(arch: &GeneratorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut enc_rng = rng(derive_seed(seed, "encoder"));
        let encoder = TextEncoder::new(
            "encoder",
            arch.vocab,
            arch.embed_dim,
            arch.embedding,
            &mut enc_rng,
        );
        let mut cond_rng = rng(derive_seed(seed, "conditioners"));
        let conditioners = arch
            .conditioners
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                Conditioner::build(spec, &format!("cond{i}"), arch.embed_dim, &mut cond_rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut r = rng(derive_seed(seed, "main"));
        let reps: Vec<usize> = arch
            .conditioners
            .iter()
            .map(ConditionerSpec::rep_dim)
            .collect();
        let main = match arch.topology {
            Topology::Single => vec![mlp(
                "main.net",
                arch.latent_dim + reps[0],
                &arch.hidden,
                arch.output_dim,
                &mut r,
            )],
            Topology::Cascaded => {
                let ca = reps[0] / 2;
                vec![
                    mlp("main.stage0", arch.latent_dim + ca, &arch.hidden, 2, &mut r),
                    mlp(
                        "main.stage1",
                        arch.latent_dim + 2 + reps[1],
                        &arch.hidden,
                        arch.output_dim - 2,
                        &mut r,
                    ),
                ]
            }
            Topology::Residual => {
                let (s, w) = (arch.state_dim, arch.hidden[0]);
                let mut main = vec![vec![DenseLayer::new(
                    "main.input",
                    arch.latent_dim,
                    s,
                    Activation::Linear,
                    Init::Xavier,
                    &mut r,
                )]];
                for i in 0..arch.conditioners.len() {
                    main.push(vec![
                        DenseLayer::new(
                            &format!("main.block{i}.a"),
                            s,
                            w,
                            Activation::Linear,
                            Init::Xavier,
                            &mut r,
                        ),
                        DenseLayer::new(
                            &format!("main.block{i}.c"),
                            w,
                            s,
                            Activation::Linear,
                            Init::Xavier,
                            &mut r,
                        ),
                    ]);
                }
                main.push(vec![DenseLayer::new(
                    "main.output",
                    s,
                    arch.output_dim,
                    Activation::Linear,
                    Init::Xavier,
                    &mut r,
                )]);
                main
            }
        };
        Ok(Self {
            arch: arch.clone(),
            encoder,
            conditioners,
            main,
        })
    }

    pub fn topology(&self) -> Topology {
        self.arch.topology
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn output_dim(&self) -> usize {
        self.arch.output_dim
    }

    pub fn encode(&self, conds: &[Conditional]) -> Result<CondBatch> {
        self.encoder.encode(conds)
    }

    /// Standard normal latents, `[n, latent_dim]`.
    pub fn sample_latent(&self, n: usize, r: &mut impl rand::Rng) -> Tensor {
        normal_tensor(r, &[n, self.arch.latent_dim], 1.0)
    }

    fn check_latent(&self, z: &Tensor, batch: &CondBatch) -> Result<()> {
        if z.rank() != 2 || z.cols() != self.arch.latent_dim || z.rows() != batch.len() {
            return Err(Error::Shape {
                op: "generate",
                lhs: z.shape().to_vec(),
                rhs: vec![batch.len(), self.arch.latent_dim],
            });
        }
        Ok(())
    }

    /// Single topology main network over a fused representation.
    pub fn single_main(&self, ctx: &mut Ctx, z: NodeId, rep: NodeId) -> Result<NodeId> {
        let input = ctx.graph.concat(z, rep)?;
        stack_forward(&self.main[0], ctx, input)
    }

    /// Stage-1 output of a cascaded generator.
    pub fn stage1(&self, ctx: &mut Ctx, z: &Tensor, batch: &CondBatch) -> Result<NodeId> {
        let Conditioner::Seq(h1) = &self.conditioners[0] else {
            return Err(Error::InvalidArgument(
                "stage 1 needs a sequence conditioner".into(),
            ));
        };
        let (mean, scale) = h1.forward_parts(ctx, batch)?;
        let scale =
            scale.ok_or_else(|| Error::InvalidArgument("stage 1 needs a Gaussian head".into()))?;
        let m = ctx.value(mean).cols();
        let eps = ctx.input(z.slice_cols(0, m)?);
        let noise = ctx.graph.hadamard(scale, eps)?;
        let code = ctx.graph.add(mean, noise)?;
        let zi = ctx.input(z.clone());
        let input = ctx.graph.concat(zi, code)?;
        stack_forward(&self.main[0], ctx, input)
    }

    /// Stage-2 output given stage 1's output and the word conditioner's
    /// representation.
    pub fn stage2_main(&self, ctx: &mut Ctx, z: NodeId, x1: NodeId, rep: NodeId) -> Result<NodeId> {
        let a = ctx.graph.concat(z, x1)?;
        let input = ctx.graph.concat(a, rep)?;
        stack_forward(&self.main[1], ctx, input)
    }

    /// Residual main network over per-block representations.
    pub fn residual_main(&self, ctx: &mut Ctx, z: NodeId, reps: &[NodeId]) -> Result<NodeId> {
        let blocks = self.conditioners.len();
        if reps.len() != blocks {
            return Err(Error::InvalidArgument(format!(
                "{} block representations for {blocks} blocks",
                reps.len()
            )));
        }
        let mut x = self.main[0][0].forward(ctx, z)?;
        for (i, &rep) in reps.iter().enumerate() {
            let layers = &self.main[i + 1];
            let a = layers[0].forward(ctx, x)?;
            let pre = ctx.graph.add(a, rep)?;
            let h = ctx.graph.tanh(pre)?;
            let delta = layers[1].forward(ctx, h)?;
            x = ctx.graph.add(x, delta)?;
        }
        self.main[blocks + 1][0].forward(ctx, x)
    }

    pub fn forward(&self, ctx: &mut Ctx, z: &Tensor, batch: &CondBatch) -> Result<NodeId> {
        self.check_latent(z, batch)?;
        match self.arch.topology {
            Topology::Single => {
                let rep = self.conditioners[0].forward(ctx, batch, None)?;
                let zi = ctx.input(z.clone());
                self.single_main(ctx, zi, rep)
            }
            Topology::Cascaded => {
                let x1 = self.stage1(ctx, z, batch)?;
                let rep = self.conditioners[1].forward(ctx, batch, Some(x1))?;
                let zi = ctx.input(z.clone());
                let x2 = self.stage2_main(ctx, zi, x1, rep)?;
                ctx.graph.concat(x1, x2)
            }
            Topology::Residual => {
                let reps = self
                    .conditioners
                    .iter()
                    .map(|h| h.forward(ctx, batch, None))
                    .collect::<Result<Vec<_>>>()?;
                let zi = ctx.input(z.clone());
                self.residual_main(ctx, zi, &reps)
            }
        }
    }

    /// `G(z | c)` row by row: row `i` of the result uses `z[i]` and `conds[i]`.
    pub fn generate(&self, conds: &[Conditional], z: &Tensor) -> Result<Tensor> {
        let batch = self.encode(conds)?;
        let mut ctx = Ctx::inference();
        let out = self.forward(&mut ctx, z, &batch)?;
        Ok(ctx.value(out).clone())
    }

    /// `n` samples for one conditional.
    pub fn sample(&self, c: &Conditional, n: usize, r: &mut impl rand::Rng) -> Result<Tensor> {
        let z = self.sample_latent(n, r);
        self.generate(&vec![c.clone(); n], &z)
    }

    /// Parameters of the main networks only.
    pub fn main_params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for stage in &self.main {
            for layer in stage {
                out.push(&layer.weight);
                out.push(&layer.bias);
            }
        }
        out
    }
}

impl Parameterized for ConditionalGenerator {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.encoder.visit(f);
        self.conditioners.visit(f);
        self.main.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_mut(f);
        self.conditioners.visit_mut(f);
        self.main.visit_mut(f);
    }
}
