//! Classical, quantum and fusion classifiers built on the tape.
//!
//! Every model maps a batch of classical features `x_c` (`B x d_c`) and
//! quantum features `x_q` (`B x Q`) to logits: one column for binary tasks,
//! `C` columns otherwise. Models ignore the inputs of branches they do not have.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{LinearLayer, Mlp, ParamId, ParamStore, Real, Tape, TransformerBlock, Var};
use crate::error::{Error, Result};
use crate::quantum::{CircuitConfig, QuantumLayer};

/// Half-width of the uniform initialization of token identity embeddings.
pub const EMBED_INIT_BOUND: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "classical")]
    Classical,
    #[serde(rename = "best_classical", alias = "classical_deep")]
    BestClassical,
    #[serde(rename = "quantum_only")]
    QuantumOnly,
    #[serde(rename = "quantum_deep_head")]
    QuantumDeepHead,
    #[serde(rename = "early_fusion")]
    EarlyFusion,
    #[serde(rename = "late_fusion")]
    LateFusion,
    #[serde(rename = "late_fusion_deep")]
    LateFusionDeep,
    #[serde(rename = "midfusion_linear")]
    MidfusionLinear,
    #[serde(rename = "midfusion_attn")]
    MidfusionAttn,
    #[serde(rename = "midfusion_attn_deep")]
    MidfusionAttnDeep,
    #[serde(rename = "deep_fusion")]
    DeepFusion,
    #[serde(rename = "very_deep_fusion")]
    VeryDeepFusion,
}

impl ModelKind {
    pub const ALL: [ModelKind; 12] = [
        ModelKind::Classical,
        ModelKind::BestClassical,
        ModelKind::QuantumOnly,
        ModelKind::QuantumDeepHead,
        ModelKind::EarlyFusion,
        ModelKind::LateFusion,
        ModelKind::LateFusionDeep,
        ModelKind::MidfusionLinear,
        ModelKind::MidfusionAttn,
        ModelKind::MidfusionAttnDeep,
        ModelKind::DeepFusion,
        ModelKind::VeryDeepFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Classical => "classical",
            ModelKind::BestClassical => "best_classical",
            ModelKind::QuantumOnly => "quantum_only",
            ModelKind::QuantumDeepHead => "quantum_deep_head",
            ModelKind::EarlyFusion => "early_fusion",
            ModelKind::LateFusion => "late_fusion",
            ModelKind::LateFusionDeep => "late_fusion_deep",
            ModelKind::MidfusionLinear => "midfusion_linear",
            ModelKind::MidfusionAttn => "midfusion_attn",
            ModelKind::MidfusionAttnDeep => "midfusion_attn_deep",
            ModelKind::DeepFusion => "deep_fusion",
            ModelKind::VeryDeepFusion => "very_deep_fusion",
        }
    }

    pub fn uses_classical(self) -> bool {
        !matches!(self, ModelKind::QuantumOnly | ModelKind::QuantumDeepHead)
    }

    pub fn uses_quantum(self) -> bool {
        !matches!(self, ModelKind::Classical | ModelKind::BestClassical)
    }

    pub fn is_fusion(self) -> bool {
        self.uses_classical() && self.uses_quantum()
    }

    /// Depth of the classical trunk (or of the quantum head MLP for
    /// `quantum_deep_head`) when the spec does not override it.
    pub fn default_trunk_depth(self) -> usize {
        match self {
            ModelKind::BestClassical
            | ModelKind::QuantumDeepHead
            | ModelKind::LateFusionDeep
            | ModelKind::MidfusionAttnDeep
            | ModelKind::DeepFusion => 3,
            ModelKind::VeryDeepFusion => 4,
            _ => 2,
        }
    }

    /// Whether the classical features go through the 95% variance PCA.
    pub fn default_classical_pca(self) -> bool {
        matches!(
            self,
            ModelKind::LateFusion
                | ModelKind::LateFusionDeep
                | ModelKind::MidfusionLinear
                | ModelKind::MidfusionAttn
                | ModelKind::MidfusionAttnDeep
                | ModelKind::DeepFusion
                | ModelKind::VeryDeepFusion
        )
    }

    fn deep_trunk(self) -> bool {
        !matches!(
            self,
            ModelKind::Classical | ModelKind::EarlyFusion | ModelKind::LateFusion
        )
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        if key == "classical_deep" {
            return Ok(ModelKind::BestClassical);
        }
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?}")))
    }
}

/// Architecture hyperparameters of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default = "default_latent")]
    pub latent_dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trunk_depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classical_pca: Option<bool>,
}

fn default_latent() -> usize {
    64
}

fn default_heads() -> usize {
    4
}

fn default_dropout() -> f64 {
    0.10
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            latent_dim: default_latent(),
            heads: default_heads(),
            dropout: default_dropout(),
            trunk_depth: None,
            classical_pca: None,
        }
    }

    pub fn trunk_depth(&self) -> usize {
        self.trunk_depth.unwrap_or(self.kind.default_trunk_depth())
    }

    pub fn classical_pca(&self) -> bool {
        self.kind.uses_classical() && self.classical_pca.unwrap_or(self.kind.default_classical_pca())
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.heads == 0 || !self.latent_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{}: latent width {} must be a positive multiple of {} heads",
                self.kind, self.latent_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "{}: dropout {} outside [0, 1)",
                self.kind, self.dropout
            )));
        }
        if !(2..=4).contains(&self.trunk_depth()) {
            return Err(Error::Config(format!(
                "{}: trunk depth {} outside 2..=4",
                self.kind,
                self.trunk_depth()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Arch {
    Classical {
        trunk: Mlp,
        head: LinearLayer,
    },
    Quantum {
        circuit: QuantumLayer,
        trunk: Option<Mlp>,
        head: LinearLayer,
    },
    Early {
        circuit: QuantumLayer,
        trunk: Mlp,
        head: LinearLayer,
    },
    Late {
        trunk: Mlp,
        classical_head: LinearLayer,
        circuit: QuantumLayer,
        quantum_head: LinearLayer,
        gate: ParamId,
    },
    Mid {
        classical_trunk: Option<Mlp>,
        classical_proj: Option<LinearLayer>,
        circuit: QuantumLayer,
        quantum_trunk: Option<Mlp>,
        quantum_proj: Option<LinearLayer>,
        gate: ParamId,
        head: LinearLayer,
    },
    Attn {
        classical_trunk: Option<Mlp>,
        classical_proj: Option<LinearLayer>,
        circuit: QuantumLayer,
        token_weight: ParamId,
        token_bias: ParamId,
        embed: ParamId,
        block: TransformerBlock,
        head: LinearLayer,
    },
}

/// A model together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub spec: ModelSpec,
    pub circuit: CircuitConfig,
    pub classes: usize,
    pub classical_dim: usize,
    pub store: ParamStore<T>,
    arch: Arch,
}

/// Logit width: one for binary tasks.
pub fn output_dim(classes: usize) -> usize {
    if classes == 2 {
        1
    } else {
        classes
    }
}

impl<T: Real> Model<T> {
    pub fn new<R: Rng + ?Sized>(
        spec: &ModelSpec,
        circuit: CircuitConfig,
        classes: usize,
        classical_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        circuit.validate()?;
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        if spec.kind.uses_classical() && classical_dim == 0 {
            return Err(Error::Config(format!("{} needs classical features", spec.kind)));
        }
        let mut store = ParamStore::new();
        let s = &mut store;
        let d = spec.latent_dim;
        let out = output_dim(classes);
        let z_dim = circuit.output_dim();
        let depth = spec.trunk_depth();
        let ln = spec.kind.deep_trunk();
        let p = spec.dropout;

        let arch = match spec.kind {
            ModelKind::Classical | ModelKind::BestClassical => Arch::Classical {
                trunk: Mlp::new(s, "trunk", classical_dim, d, depth, ln, p, rng),
                head: LinearLayer::new(s, "head", d, out, rng),
            },
            ModelKind::QuantumOnly => Arch::Quantum {
                circuit: QuantumLayer::new(s, "circuit", circuit, rng)?,
                trunk: None,
                head: LinearLayer::new(s, "head", z_dim, out, rng),
            },
            ModelKind::QuantumDeepHead => Arch::Quantum {
                circuit: QuantumLayer::new(s, "circuit", circuit, rng)?,
                trunk: Some(Mlp::new(s, "q_trunk", z_dim, d, depth, true, p, rng)),
                head: LinearLayer::new(s, "head", d, out, rng),
            },
            ModelKind::EarlyFusion => Arch::Early {
                circuit: QuantumLayer::new(s, "circuit", circuit, rng)?,
                trunk: Mlp::new(s, "trunk", classical_dim + z_dim, d, depth, ln, p, rng),
                head: LinearLayer::new(s, "head", d, out, rng),
            },
            ModelKind::LateFusion | ModelKind::LateFusionDeep => Arch::Late {
                trunk: Mlp::new(s, "c_trunk", classical_dim, d, depth, ln, p, rng),
                classical_head: LinearLayer::new(s, "c_head", d, out, rng),
                circuit: QuantumLayer::new(s, "circuit", circuit, rng)?,
                quantum_head: LinearLayer::new(s, "q_head", z_dim, out, rng),
                gate: s.zeros("gate", &[1]),
            },
            ModelKind::MidfusionLinear => Arch::Mid {
                classical_trunk: None,
                classical_proj: Some(LinearLayer::new(s, "c_proj", classical_dim, d, rng)),
                circuit: QuantumLayer::new(s, "circuit", circuit, rng)?,
                quantum_trunk: None,
                quantum_proj: Some(LinearLayer::new(s, "q_proj", z_dim, d, rng)),
                gate: s.zeros("gate", &[1]),
                head: LinearLayer::new(s, "head", d, out, rng),
            },
            ModelKind::DeepFusion | ModelKind::VeryDeepFusion => Arch::Mid {
                classical_trunk: Some(Mlp::new(s, "c_trunk", classical_dim, d, depth, true, p, rng)),
                classical_proj: None,
                circuit: QuantumLayer::new(s, "circuit", circuit, rng)?,
                quantum_trunk: Some(Mlp::new(s, "q_trunk", z_dim, d, 2, true, p, rng)),
                quantum_proj: None,
                gate: s.zeros("gate", &[1]),
                head: LinearLayer::new(s, "head", d, out, rng),
            },
            ModelKind::MidfusionAttn | ModelKind::MidfusionAttnDeep => {
                let deep = spec.kind == ModelKind::MidfusionAttnDeep;
                Arch::Attn {
                    classical_trunk: deep
                        .then(|| Mlp::new(s, "c_trunk", classical_dim, d, depth, true, p, rng)),
                    classical_proj: (!deep).then(|| LinearLayer::new(s, "c_proj", classical_dim, d, rng)),
                    circuit: QuantumLayer::new(s, "circuit", circuit, rng)?,
                    token_weight: s.uniform("token.weight", &[d], 1.0, rng),
                    token_bias: s.zeros("token.bias", &[d]),
                    embed: s.uniform("token.embed", &[z_dim, d], EMBED_INIT_BOUND, rng),
                    block: TransformerBlock::new(s, "attn", d, spec.heads, rng)?,
                    head: LinearLayer::new(s, "head", d, out, rng),
                }
            }
        };
        Ok(Self {
            spec: spec.clone(),
            circuit,
            classes,
            classical_dim,
            store,
            arch,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn output_dim(&self) -> usize {
        output_dim(self.classes)
    }

    /// Parameters of the circuit, if the model has one.
    pub fn quantum_layer(&self) -> Option<&QuantumLayer> {
        match &self.arch {
            Arch::Classical { .. } => None,
            Arch::Quantum { circuit, .. }
            | Arch::Early { circuit, .. }
            | Arch::Late { circuit, .. }
            | Arch::Mid { circuit, .. }
            | Arch::Attn { circuit, .. } => Some(circuit),
        }
    }

    /// Trainable gate scalar `a` of the late and mid fusion families.
    pub fn gate(&self) -> Option<ParamId> {
        match &self.arch {
            Arch::Late { gate, .. } | Arch::Mid { gate, .. } => Some(*gate),
            _ => None,
        }
    }

    /// Output node of the final linear head, for tests that zero it.
    pub fn head(&self) -> &LinearLayer {
        match &self.arch {
            Arch::Classical { head, .. }
            | Arch::Quantum { head, .. }
            | Arch::Early { head, .. }
            | Arch::Mid { head, .. }
            | Arch::Attn { head, .. } => head,
            Arch::Late { classical_head, .. } => classical_head,
        }
    }

    /// Sequence length seen by the attention block (`2Q + 1`).
    pub fn token_count(&self) -> Option<usize> {
        matches!(self.arch, Arch::Attn { .. }).then(|| self.circuit.output_dim() + 1)
    }

    /// Builds the forward graph and returns the logits node.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        xc: Var,
        xq: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let st = &self.store;
        match &self.arch {
            Arch::Classical { trunk, head } => {
                let h = trunk.forward(tape, st, xc, training, rng)?;
                head.forward(tape, st, h)
            }
            Arch::Quantum { circuit, trunk, head } => {
                let mut z = circuit.forward(tape, st, xq)?;
                if let Some(trunk) = trunk {
                    z = trunk.forward(tape, st, z, training, rng)?;
                }
                head.forward(tape, st, z)
            }
            Arch::Early { circuit, trunk, head } => {
                let z = circuit.forward(tape, st, xq)?;
                let u = tape.concat_cols(xc, z)?;
                let h = trunk.forward(tape, st, u, training, rng)?;
                head.forward(tape, st, h)
            }
            Arch::Late {
                trunk,
                classical_head,
                circuit,
                quantum_head,
                gate,
            } => {
                let h = trunk.forward(tape, st, xc, training, rng)?;
                let lc = classical_head.forward(tape, st, h)?;
                let z = circuit.forward(tape, st, xq)?;
                let lq = quantum_head.forward(tape, st, z)?;
                let a = tape.param(st, *gate);
                tape.gated_mix(a, lc, lq)
            }
            Arch::Mid {
                classical_trunk,
                classical_proj,
                circuit,
                quantum_trunk,
                quantum_proj,
                gate,
                head,
            } => {
                let mut hc = xc;
                if let Some(t) = classical_trunk {
                    hc = t.forward(tape, st, hc, training, rng)?;
                }
                if let Some(p) = classical_proj {
                    hc = p.forward(tape, st, hc)?;
                }
                let mut hq = circuit.forward(tape, st, xq)?;
                if let Some(t) = quantum_trunk {
                    hq = t.forward(tape, st, hq, training, rng)?;
                }
                if let Some(p) = quantum_proj {
                    hq = p.forward(tape, st, hq)?;
                }
                let a = tape.param(st, *gate);
                let h = tape.gated_mix(a, hc, hq)?;
                head.forward(tape, st, h)
            }
            Arch::Attn { .. } => self.forward_attention(tape, xc, xq, training, rng).map(|(l, _)| l),
        }
    }

    /// Forward pass of the attention families, also returning the attention node.
    pub fn forward_attention<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        xc: Var,
        xq: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let Arch::Attn {
            classical_trunk,
            classical_proj,
            circuit,
            token_weight,
            token_bias,
            embed,
            block,
            head,
        } = &self.arch
        else {
            return Err(Error::Usage(format!("{} has no attention block", self.kind())));
        };
        let st = &self.store;
        let mut cls = xc;
        if let Some(t) = classical_trunk {
            cls = t.forward(tape, st, cls, training, rng)?;
        }
        if let Some(p) = classical_proj {
            cls = p.forward(tape, st, cls)?;
        }
        let z = circuit.forward(tape, st, xq)?;
        let w = tape.param(st, *token_weight);
        let b = tape.param(st, *token_bias);
        let e = tape.param(st, *embed);
        let seq = tape.token_sequence(cls, z, w, b, e)?;
        let len = self.circuit.output_dim() + 1;
        let (out, attn) = block.forward_with_attention(tape, st, seq, len)?;
        let first = tape.take_rows(out, len, 0)?;
        Ok((head.forward(tape, st, first)?, attn))
    }

    /// Class probabilities in evaluation mode, `f64` row-major. Binary models
    /// return one positive-class probability per row.
    pub fn predict_proba(&self, xc: &[T], xq: &[T], rows: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (vc, vq) = self.inputs(&mut tape, xc, xq, rows)?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let logits = self.forward(&mut tape, vc, vq, false, &mut rng)?;
        let values: Vec<f64> = tape.value(logits).iter().map(|v| v.as_f64()).collect();
        Ok(probabilities(&values, self.output_dim()))
    }

    /// Places the feature matrices on the tape as constants.
    pub fn inputs(&self, tape: &mut Tape<T>, xc: &[T], xq: &[T], rows: usize) -> Result<(Var, Var)> {
        let dc = if self.kind().uses_classical() { self.classical_dim } else { xc.len() / rows.max(1) };
        let q = if self.kind().uses_quantum() { self.circuit.qubits } else { xq.len() / rows.max(1) };
        let vc = tape.constant(&[rows, dc], xc.to_vec())?;
        let vq = tape.constant(&[rows, q], xq.to_vec())?;
        Ok((vc, vq))
    }
}

/// Sigmoid of single logits, or row-wise softmax.
pub fn probabilities(logits: &[f64], width: usize) -> Vec<f64> {
    if width == 1 {
        return logits.iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect();
    }
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(width) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}
