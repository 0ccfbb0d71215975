//! Seeded stand-ins for the pretrained networks the attack targets.
//!
//! Weights are drawn once from [`layers::WeightRng`] and never trained. A
//! [`ModelBundle`] is immutable after construction and can be shared across
//! threads for read-only use.

mod layers;
mod networks;
mod weights;

pub use layers::{Conv, Linear, WeightRng};
pub use networks::{ConvStack, CrossAttentionBlock, FaceProjector, IdentityEmbedder, PNetToy};
pub use weights::{digest_hex, FORMAT_VERSION, MAGIC};

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub seed: u64,
    pub projector: FaceProjector,
    pub attention: CrossAttentionBlock,
    pub pnet: PNetToy,
    pub embedder: IdentityEmbedder,
}

/// Draws every weight from a single stream in declaration order:
/// projector, attention block, P-Net, embedder.
pub fn init_models(seed: u64) -> ModelBundle {
    let mut rng = WeightRng::new(seed);
    ModelBundle {
        seed,
        projector: FaceProjector::init(&mut rng),
        attention: CrossAttentionBlock::init(&mut rng),
        pnet: PNetToy::init(&mut rng),
        embedder: IdentityEmbedder::init(&mut rng),
    }
}

impl ModelBundle {
    /// `(model name, [(tensor name, tensor)])` in serialisation order.
    pub fn layer_table(&self) -> Vec<(&'static str, Vec<(String, &Tensor)>)> {
        self.layout()
            .into_iter()
            .zip(self.tensors())
            .map(|((model, names), tensors)| (model, names.into_iter().zip(tensors).collect()))
            .collect()
    }

    fn layout(&self) -> Vec<(&'static str, Vec<String>)> {
        let stack = |p: &str| {
            vec![
                format!("{p}.conv1.weight"),
                format!("{p}.conv1.bias"),
                format!("{p}.conv2.weight"),
                format!("{p}.conv2.bias"),
            ]
        };
        let mut proj = stack("encoder");
        proj.extend(["head.weight".into(), "head.bias".into()]);
        let mut attn = stack("query_encoder");
        attn.extend(["w_q".into(), "w_k".into()]);
        let pnet = ["conv1", "conv2", "conv3", "head"]
            .iter()
            .flat_map(|c| [format!("{c}.weight"), format!("{c}.bias")])
            .collect();
        let mut emb = stack("encoder");
        emb.extend(["head.weight".into(), "head.bias".into()]);
        vec![
            ("projector", proj),
            ("attention", attn),
            ("pnet", pnet),
            ("embedder", emb),
        ]
    }

    fn tensors(&self) -> Vec<Vec<&Tensor>> {
        let p = &self.projector;
        let a = &self.attention;
        let n = &self.pnet;
        let e = &self.embedder;
        vec![
            vec![
                &p.encoder.conv1.weight,
                &p.encoder.conv1.bias,
                &p.encoder.conv2.weight,
                &p.encoder.conv2.bias,
                &p.head.weight,
                &p.head.bias,
            ],
            vec![
                &a.query_encoder.conv1.weight,
                &a.query_encoder.conv1.bias,
                &a.query_encoder.conv2.weight,
                &a.query_encoder.conv2.bias,
                &a.w_q,
                &a.w_k,
            ],
            vec![
                &n.conv1.weight,
                &n.conv1.bias,
                &n.conv2.weight,
                &n.conv2.bias,
                &n.conv3.weight,
                &n.conv3.bias,
                &n.head.weight,
                &n.head.bias,
            ],
            vec![
                &e.encoder.conv1.weight,
                &e.encoder.conv1.bias,
                &e.encoder.conv2.weight,
                &e.encoder.conv2.bias,
                &e.head.weight,
                &e.head.bias,
            ],
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let p = &mut self.projector;
        let a = &mut self.attention;
        let n = &mut self.pnet;
        let e = &mut self.embedder;
        vec![
            &mut p.encoder.conv1.weight,
            &mut p.encoder.conv1.bias,
            &mut p.encoder.conv2.weight,
            &mut p.encoder.conv2.bias,
            &mut p.head.weight,
            &mut p.head.bias,
            &mut a.query_encoder.conv1.weight,
            &mut a.query_encoder.conv1.bias,
            &mut a.query_encoder.conv2.weight,
            &mut a.query_encoder.conv2.bias,
            &mut a.w_q,
            &mut a.w_k,
            &mut n.conv1.weight,
            &mut n.conv1.bias,
            &mut n.conv2.weight,
            &mut n.conv2.bias,
            &mut n.conv3.weight,
            &mut n.conv3.bias,
            &mut n.head.weight,
            &mut n.head.bias,
            &mut e.encoder.conv1.weight,
            &mut e.encoder.conv1.bias,
            &mut e.encoder.conv2.weight,
            &mut e.encoder.conv2.bias,
            &mut e.head.weight,
            &mut e.head.bias,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().flatten().map(|t| t.len()).sum()
    }

    /// Condition tokens `[seq, d]`.
    pub fn project_condition<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
    ) -> Result<Var<'t>, TensorError> {
        self.projector.forward(tape, x)
    }

    /// Attention map `[1, res, seq]` with queries from `x_query`.
    pub fn attention_forward<'t>(
        &self,
        tape: &'t Tape,
        x_query: Var<'t>,
        tokens: Var<'t>,
    ) -> Result<Var<'t>, TensorError> {
        self.attention.forward(tape, x_query, tokens)
    }

    /// `(P_F, P_T)`, each `[h', w']`.
    pub fn pnet_forward<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>), TensorError> {
        self.pnet.probabilities(tape, x)
    }

    /// Unit-norm identity embedding `[128]`.
    pub fn embed_identity<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.embedder.forward(tape, x)
    }

    /// Embedding of a plain image, evaluated on a private tape.
    pub fn embedding(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let tape = Tape::new();
        Ok(self.embed_identity(&tape, tape.constant(x))?.value())
    }
}
