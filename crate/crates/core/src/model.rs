//! Encoder plus semantic head, and the per-image training loss.

use crate::autodiff::{Tape, Var};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{invalid, Result};
use crate::head::{
    ce_loss, class_scores, head_forward, semantic_constraint_loss, total_loss, HeadConfig,
    HeadOutput, HeadParams, SemanticTensors,
};
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Everything that fixes the parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    /// `[channels, height, width]` of every input image.
    pub image_shape: [usize; 3],
    pub attributes: usize,
    pub embed_dim: usize,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

/// Parameter layout of the full model. Values live in a separate
/// [`ParamStore`] so one layout serves every precision.
#[derive(Clone, Debug)]
pub struct ZslModel {
    pub spec: ModelSpec,
    pub encoder: Encoder,
    pub head: HeadParams,
    /// Side of the final feature grid.
    pub feature_side: usize,
}

impl ZslModel {
    /// Builds the layout and seeded initial values.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<(Self, ParamStore<f64>)> {
        let [c, h, w] = spec.image_shape;
        let feature_side = spec.encoder.validate(c, h, w)?;
        if spec.attributes == 0 || spec.embed_dim == 0 {
            return Err(invalid!(
                "attribute count and embedding width must be positive (K={}, d_s={})",
                spec.attributes,
                spec.embed_dim
            ));
        }
        let mut pb = ParamBuilder::new(seed);
        let encoder = Encoder::init(&mut pb, &spec.encoder, c);
        let head = HeadParams::init(
            &mut pb,
            &spec.head,
            spec.attributes,
            spec.embed_dim,
            spec.encoder.feature_dim(),
        );
        let model = ZslModel {
            spec: spec.clone(),
            encoder,
            head,
            feature_side,
        };
        Ok((model, pb.finish()))
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        image: Var,
        embeddings: Var,
    ) -> Result<HeadOutput> {
        let f = self.encoder.encode(tape, bound, image)?;
        head_forward(tape, bound, &self.head, &f, embeddings)
    }

    /// Cosine scores of one image against every class in `classes`.
    pub fn scores<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        sem: &SemanticTensors<T>,
        image: Tensor<T>,
        classes: &[usize],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let x = tape.constant(image);
        let emb = tape.constant(sem.embeddings.clone());
        let out = self.forward(&mut tape, &bound, x, emb)?;
        let protos = proto_vars(&mut tape, sem, classes)?;
        let s = class_scores(&mut tape, out.fused, &protos)?;
        Ok(tape.value(s).to_f64_vec())
    }
}

fn proto_vars<T: Scalar>(tape: &mut Tape<T>, sem: &SemanticTensors<T>, classes: &[usize]) -> Result<Vec<Var>> {
    classes
        .iter()
        .map(|&c| {
            sem.prototypes
                .get(c)
                .map(|p| tape.constant(p.clone()))
                .ok_or_else(|| invalid!("class {c} has no prototype ({} classes)", sem.prototypes.len()))
        })
        .collect()
}

/// Loss weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_sc: f64,
    pub temperature: f64,
}

/// Loss nodes for one training image.
#[derive(Clone, Copy, Debug)]
pub struct SampleLoss {
    pub ce: Var,
    pub sc: Var,
    pub total: Var,
}

/// Records the loss of one image whose class is `class`, scored against the
/// seen classes `seen` (which must contain `class`).
#[allow(clippy::too_many_arguments)]
pub fn sample_loss<T: Scalar>(
    model: &ZslModel,
    tape: &mut Tape<T>,
    bound: &Bound,
    sem: &SemanticTensors<T>,
    seen: &[usize],
    image: Tensor<T>,
    class: usize,
    weights: LossWeights,
) -> Result<SampleLoss> {
    let label = seen
        .iter()
        .position(|&c| c == class)
        .ok_or_else(|| invalid!("training label {class} is not a seen class"))?;
    let x = tape.constant(image);
    let emb = tape.constant(sem.embeddings.clone());
    let out = model.forward(tape, bound, x, emb)?;
    let protos = proto_vars(tape, sem, seen)?;
    let scores = class_scores(tape, out.fused, &protos)?;
    let ce = ce_loss(tape, scores, label, weights.temperature)?;
    let sc = semantic_constraint_loss(tape, out.fused, protos[label])?;
    let total = total_loss(tape, ce, sc, weights.lambda_sc)?;
    Ok(SampleLoss { ce, sc, total })
}
