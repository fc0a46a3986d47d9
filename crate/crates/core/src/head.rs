//! Semantic head: attribute-attention local projection, pooled global
//! projection, their fusion, the training losses and calibrated prediction.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ReduceKind, Tape, Var};
use crate::encoder::FeatureMap;
use crate::error::{invalid, shape_err, Result};
use crate::params::{Bound, ParamBuilder, ParamId};
use crate::tensor::{Scalar, Tensor};

/// Guard used wherever a vector norm appears in a denominator.
pub const NORM_EPS: f64 = 1e-12;

/// Class attribute signatures and per-attribute embeddings.
///
/// `prototypes` is `[K, C]` (column `c` is the signature of class `c`);
/// `embeddings` is `[K, d_s]` (row `k` embeds attribute `k`).
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticSpace {
    prototypes: Tensor<f64>,
    embeddings: Tensor<f64>,
}

impl SemanticSpace {
    pub fn new(prototypes: Tensor<f64>, embeddings: Tensor<f64>) -> Result<Self> {
        if prototypes.rank() != 2 || embeddings.rank() != 2 {
            return Err(shape_err!(
                "prototypes {:?} and embeddings {:?} must be matrices",
                prototypes.shape(),
                embeddings.shape()
            ));
        }
        if prototypes.shape()[0] != embeddings.shape()[0] {
            return Err(invalid!(
                "attribute count mismatch: prototypes have K={}, embeddings have K={}",
                prototypes.shape()[0],
                embeddings.shape()[0]
            ));
        }
        Ok(SemanticSpace {
            prototypes,
            embeddings,
        })
    }

    pub fn attribute_count(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn class_count(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn prototypes(&self) -> &Tensor<f64> {
        &self.prototypes
    }

    pub fn embeddings(&self) -> &Tensor<f64> {
        &self.embeddings
    }

    /// Signature of class `c` (a column of the prototype matrix).
    pub fn prototype(&self, c: usize) -> Vec<f64> {
        let (k, n) = (self.attribute_count(), self.class_count());
        (0..k).map(|i| self.prototypes.data()[i * n + c]).collect()
    }

    /// Per-class signatures and the embedding matrix at precision `T`.
    pub fn tensors<T: Scalar>(&self) -> SemanticTensors<T> {
        let k = self.attribute_count();
        SemanticTensors {
            embeddings: self.embeddings.cast(),
            prototypes: (0..self.class_count())
                .map(|c| Tensor::from_f64(&[k], &self.prototype(c)).expect("shape"))
                .collect(),
        }
    }
}

/// [`SemanticSpace`] converted once to the working precision.
#[derive(Clone, Debug)]
pub struct SemanticTensors<T: Scalar> {
    pub embeddings: Tensor<T>,
    pub prototypes: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Hidden layers in each of the two semantic MLPs.
    pub mlp_hidden_layers: usize,
    pub norm_eps: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            mlp_hidden_layers: 1,
            norm_eps: 1e-5,
        }
    }
}

/// Stack of affine layers with relu between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    /// `(weight [in, out], bias [out])` per layer.
    pub layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    pub fn init(pb: &mut ParamBuilder, name: &str, widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                (
                    pb.weight(format!("{name}.fc{i}.weight"), &[w[0], w[1]], w[0]),
                    pb.full(format!("{name}.fc{i}.bias"), &[w[1]], 0.0),
                )
            })
            .collect();
        Mlp { layers }
    }

    /// Applies the MLP to a vector.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let n = tape.value(x).len();
        let mut h = tape.reshape(x, &[1, n])?;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h)?;
            }
            h = tape.linear_rows(h, bound[w], Some(bound[b]))?;
        }
        let out = tape.shape(h)[1];
        tape.reshape(h, &[out])
    }
}

/// Head parameter layout.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub attributes: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    /// `[d_s, d_v]`, attention query projection.
    pub w1: ParamId,
    /// `[d_s, d_v]`, score projection.
    pub w2: ParamId,
    /// `K -> K`
    pub mlp_ls: Mlp,
    /// `d_v -> K`
    pub mlp_gs: Mlp,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub norm_eps: f64,
}

impl HeadParams {
    pub fn init(
        pb: &mut ParamBuilder,
        cfg: &HeadConfig,
        attributes: usize,
        embed_dim: usize,
        feature_dim: usize,
    ) -> Self {
        let (k, ds, dv) = (attributes, embed_dim, feature_dim);
        let w1 = pb.weight("head.w1", &[ds, dv], ds);
        let w2 = pb.weight("head.w2", &[ds, dv], ds);
        let hidden = cfg.mlp_hidden_layers;
        let ls_widths: Vec<usize> = std::iter::repeat(k).take(hidden + 2).collect();
        let mut gs_widths: Vec<usize> = std::iter::repeat(dv).take(hidden + 1).collect();
        gs_widths.push(k);
        let mlp_ls = Mlp::init(pb, "head.mlp_ls", &ls_widths);
        let mlp_gs = Mlp::init(pb, "head.mlp_gs", &gs_widths);
        let norm_gain = pb.full("head.norm.gain", &[dv], 1.0);
        let norm_bias = pb.full("head.norm.bias", &[dv], 0.0);
        HeadParams {
            attributes,
            embed_dim,
            feature_dim,
            w1,
            w2,
            mlp_ls,
            mlp_gs,
            norm_gain,
            norm_bias,
            norm_eps: cfg.norm_eps,
        }
    }
}

/// Intermediate values of the local branch.
#[derive(Clone, Copy, Debug)]
pub struct SlpOutput {
    /// `[K, r*r]`, a softmax over regions per attribute.
    pub attention: Var,
    /// `[K]`, per-attribute scores before the MLP.
    pub scores: Var,
    /// `[K]`
    pub local: Var,
}

/// The four semantic vectors produced for one image.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub local: Var,
    pub global: Var,
    pub fused: Var,
}

fn flat_features<T: Scalar>(tape: &mut Tape<T>, f: &FeatureMap) -> Result<Var> {
    tape.reshape(f.values, &[f.channels, f.regions()])
}

/// Local branch. With `F` the `[d_v, r']` flattened map and `S` the
/// `[K, d_s]` embeddings: `M = softmax_regions(S W1 F)`, `V = M F^T`,
/// `f_s[k] = (S W2)[k] . V[k]`, `local = mlp_ls(f_s)`.
pub fn slp_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    head: &HeadParams,
    f: &FeatureMap,
    embeddings: Var,
) -> Result<SlpOutput> {
    let s = tape.shape(embeddings).to_vec();
    if s != [head.attributes, head.embed_dim] || f.channels != head.feature_dim {
        return Err(shape_err!(
            "slp: embeddings {s:?} / features {} channels do not match head (K={}, d_s={}, d_v={})",
            f.channels,
            head.attributes,
            head.embed_dim,
            head.feature_dim
        ));
    }
    let flat = flat_features(tape, f)?;
    let query = tape.matmul(embeddings, bound[head.w1])?;
    let logits = tape.matmul(query, flat)?;
    let attention = tape.softmax(logits, 1)?;
    let flat_t = tape.transpose(flat)?;
    let attended = tape.matmul(attention, flat_t)?;
    let key = tape.matmul(embeddings, bound[head.w2])?;
    let prod = tape.mul(key, attended)?;
    let scores = tape.reduce(ReduceKind::Sum, prod, 1)?;
    let local = head.mlp_ls.apply(tape, bound, scores)?;
    Ok(SlpOutput {
        attention,
        scores,
        local,
    })
}

/// Global branch: LayerNorm over channels at each site, average over sites,
/// then `mlp_gs`.
pub fn grl_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    head: &HeadParams,
    f: &FeatureMap,
) -> Result<Var> {
    let flat = flat_features(tape, f)?;
    let normed = tape.layernorm(flat, 0, bound[head.norm_gain], bound[head.norm_bias], head.norm_eps)?;
    let pooled = tape.reduce(ReduceKind::Mean, normed, 1)?;
    head.mlp_gs.apply(tape, bound, pooled)
}

/// `global + local / max(|local|, 1e-12)`.
pub fn sef_fuse<T: Scalar>(tape: &mut Tape<T>, global: Var, local: Var) -> Result<Var> {
    if tape.shape(global) != tape.shape(local) {
        return Err(shape_err!(
            "sef_fuse: global {:?} and local {:?} differ",
            tape.shape(global),
            tape.shape(local)
        ));
    }
    let unit = tape.l2_normalize(local, NORM_EPS)?;
    tape.add(global, unit)
}

/// Full head for one feature map.
pub fn head_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    head: &HeadParams,
    f: &FeatureMap,
    embeddings: Var,
) -> Result<HeadOutput> {
    let slp = slp_forward(tape, bound, head, f, embeddings)?;
    let global = grl_forward(tape, bound, head, f)?;
    let fused = sef_fuse(tape, global, slp.local)?;
    Ok(HeadOutput {
        local: slp.local,
        global,
        fused,
    })
}

/// Mean absolute difference between the fused vector and a class signature.
pub fn semantic_constraint_loss<T: Scalar>(tape: &mut Tape<T>, a_hat: Var, proto: Var) -> Result<Var> {
    let diff = tape.sub(a_hat, proto)?;
    let abs = tape.abs(diff)?;
    tape.mean_all(abs)
}

/// Cosine similarity of `a_hat` with each class signature in `protos`.
pub fn class_scores<T: Scalar>(tape: &mut Tape<T>, a_hat: Var, protos: &[Var]) -> Result<Var> {
    if protos.is_empty() {
        return Err(invalid!("class_scores needs at least one candidate class"));
    }
    let scores = protos
        .iter()
        .map(|&p| tape.cosine_similarity(a_hat, p, NORM_EPS))
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&scores)
}

/// `-log softmax(tau * scores)[label]`.
pub fn ce_loss<T: Scalar>(tape: &mut Tape<T>, scores: Var, label: usize, temperature: f64) -> Result<Var> {
    let n = tape.value(scores).len();
    if label >= n {
        return Err(invalid!("label {label} outside the {n} seen classes"));
    }
    let logits = tape.scale(scores, temperature)?;
    tape.cross_entropy(logits, label)
}

/// `ce + lambda_sc * sc`.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, ce: Var, sc: Var, lambda_sc: f64) -> Result<Var> {
    if !(lambda_sc >= 0.0) {
        return Err(invalid!("lambda_sc must be nonnegative, got {lambda_sc}"));
    }
    let weighted = tape.scale(sc, lambda_sc)?;
    tape.add(ce, weighted)
}

/// Candidate set used at prediction time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Unseen classes only.
    Czsl,
    /// All classes, with calibration.
    Gzsl,
}

impl std::str::FromStr for EvalMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "czsl" => Ok(EvalMode::Czsl),
            "gzsl" => Ok(EvalMode::Gzsl),
            _ => Err(format!("unknown mode {s:?} (expected czsl or gzsl)")),
        }
    }
}

/// Calibrated argmax: `argmax_y scores[y] + lambda_col [y unseen]` over the
/// candidate set. Ties go to the lowest class index.
pub fn predict(scores: &[f64], unseen: &[bool], lambda_col: f64, mode: EvalMode) -> Result<usize> {
    if scores.len() != unseen.len() {
        return Err(shape_err!(
            "{} scores for {} class flags",
            scores.len(),
            unseen.len()
        ));
    }
    let mut best: Option<(usize, f64)> = None;
    for (y, (&s, &u)) in scores.iter().zip(unseen).enumerate() {
        if mode == EvalMode::Czsl && !u {
            continue;
        }
        let v = if u && mode == EvalMode::Gzsl { s + lambda_col } else { s };
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((y, v));
        }
    }
    best.map(|(y, _)| y)
        .ok_or_else(|| invalid!("no candidate classes for prediction"))
}
