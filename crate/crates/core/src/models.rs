//! Base net (shared backbone with a primary multi-label head and an
//! auxiliary class head) and the meta net that maps an embedding to a
//! per-sample weight.
//!
//! Parameters live in plain [`Tensor`]s between updates. To run a forward
//! pass they are bound onto a [`Graph`], which yields the `*Nodes` mirrors
//! used by the loss and training code.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Node, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }

    fn apply(self, g: &mut Graph, x: Node) -> Result<Node> {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
        }
    }
}

/// Backbone shape: `input_dim -> hidden_dim -> embed_dim`, activation after
/// both layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { input_dim: 32, hidden_dim: 64, embed_dim: 64, activation: Activation::Tanh }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// `x W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Tensor::zeros(Shape::new(input, output)), bias: Tensor::zeros(Shape::new(1, output)) }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in))` for both weight and bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = Tensor::uniform(Shape::new(input, output), bound, rng);
        let bias = Tensor::uniform(Shape::new(1, output), bound, rng);
        Self { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> AffineNodes {
        let bind = |g: &mut Graph, t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        AffineNodes { weight: bind(g, &self.weight), bias: bind(g, &self.bias) }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AffineNodes {
    pub weight: Node,
    pub bias: Node,
}

impl AffineNodes {
    pub fn forward(&self, g: &mut Graph, x: Node) -> Result<Node> {
        let xin = g.shape(x).cols;
        let win = g.shape(self.weight).rows;
        if xin != win {
            return Err(Error::Config(format!("affine layer expects {win} input features, got {xin}")));
        }
        let h = g.matmul(x, self.weight)?;
        g.add_broadcast(h, self.bias)
    }

    pub fn values(&self, g: &Graph) -> Affine {
        Affine { weight: g.value(self.weight).clone(), bias: g.value(self.bias).clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub layers: Vec<Affine>,
    pub activation: Activation,
}

impl Backbone {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let layers = vec![
            Affine::init(cfg.input_dim, cfg.hidden_dim, rng),
            Affine::init(cfg.hidden_dim, cfg.embed_dim, rng),
        ];
        Self { layers, activation: cfg.activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Affine::input_dim)
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().map_or(0, Affine::output_dim)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BackboneNodes {
        BackboneNodes { layers: self.layers.iter().map(|l| l.bind(g, trainable)).collect(), activation: self.activation }
    }

    /// Embeddings for a batch of features, evaluated on a scratch graph.
    pub fn embed(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g, false);
        let x = g.constant(features.clone());
        let e = backbone_forward(&mut g, &nodes, x)?;
        Ok(g.value(e).clone())
    }
}

#[derive(Clone, Debug)]
pub struct BackboneNodes {
    pub layers: Vec<AffineNodes>,
    pub activation: Activation,
}

/// Meta-net parameters: a linear map from the embedding to one logit.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl MetaParams {
    /// Zero weight and bias, so every sample starts at weight 0.5.
    pub fn new(embed_dim: usize) -> Self {
        Self { weight: Tensor::zeros(Shape::new(embed_dim, 1)), bias: Tensor::zeros(Shape::SCALAR) }
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> MetaNodes {
        let bind = |g: &mut Graph, t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        MetaNodes { weight: bind(g, &self.weight), bias: bind(g, &self.bias) }
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn from_tensors(mut t: Vec<Tensor>) -> Self {
        let bias = t.pop().expect("meta bias");
        let weight = t.pop().expect("meta weight");
        Self { weight, bias }
    }

    /// Per-sample weights for a batch of embeddings, as a `B x 1` column.
    pub fn weights(&self, embeddings: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g, false);
        let e = g.constant(embeddings.clone());
        let w = meta_forward(&mut g, &nodes, e)?;
        Ok(g.value(w).clone())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MetaNodes {
    pub weight: Node,
    pub bias: Node,
}

impl MetaNodes {
    pub fn nodes(&self) -> [Node; 2] {
        [self.weight, self.bias]
    }

    pub fn values(&self, g: &Graph) -> MetaParams {
        MetaParams { weight: g.value(self.weight).clone(), bias: g.value(self.bias).clone() }
    }
}

/// The primary-task half of the base net: backbone plus primary head.
#[derive(Clone, Copy, Debug)]
pub struct AuView<'a> {
    pub backbone: &'a Backbone,
    pub head: &'a Affine,
}

impl AuView<'_> {
    pub fn num_labels(&self) -> usize {
        self.head.output_dim()
    }

    /// Sigmoid scores `B x J` for a batch of features.
    pub fn predict(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bb = self.backbone.bind(&mut g, false);
        let head = self.head.bind(&mut g, false);
        let x = g.constant(features.clone());
        let (_, scores) = au_forward(&mut g, &bb, &head, x)?;
        Ok(g.value(scores).clone())
    }
}

/// The auxiliary-task half of the base net.
#[derive(Clone, Copy, Debug)]
pub struct FeView<'a> {
    pub backbone: &'a Backbone,
    pub head: &'a Affine,
}

/// An owned primary-task model (what single-task training produces).
#[derive(Clone, Debug, PartialEq)]
pub struct AuDetector {
    pub backbone: Backbone,
    pub head: Affine,
}

impl AuDetector {
    pub fn view(&self) -> AuView<'_> {
        AuView { backbone: &self.backbone, head: &self.head }
    }
}

/// Base-net parameters. The two task views share one backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseParams {
    pub backbone: Backbone,
    pub au_head: Affine,
    pub fe_head: Affine,
}

impl BaseParams {
    /// Fan-in scaled uniform init for the backbone, then the primary head,
    /// then the auxiliary head, all from `rng` in that order.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, num_labels: usize, num_classes: usize, rng: &mut R) -> Self {
        let backbone = Backbone::init(cfg, rng);
        let au_head = Affine::init(cfg.embed_dim, num_labels, rng);
        let fe_head = Affine::init(cfg.embed_dim, num_classes, rng);
        Self { backbone, au_head, fe_head }
    }

    pub fn num_labels(&self) -> usize {
        self.au_head.output_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.fe_head.output_dim()
    }

    pub fn theta_au(&self) -> AuView<'_> {
        AuView { backbone: &self.backbone, head: &self.au_head }
    }

    pub fn theta_fe(&self) -> FeView<'_> {
        FeView { backbone: &self.backbone, head: &self.fe_head }
    }

    pub fn au_detector(&self) -> AuDetector {
        AuDetector { backbone: self.backbone.clone(), head: self.au_head.clone() }
    }

    /// All parameter arrays in binding order: backbone layers (weight,
    /// bias), primary head, auxiliary head.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.backbone.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.extend([&self.au_head.weight, &self.au_head.bias, &self.fe_head.weight, &self.fe_head.bias]);
        out
    }

    /// Inverse of [`tensors`](Self::tensors), reusing `self`'s layout.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Self {
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("parameter count mismatch");
        let layers = self.backbone.layers.iter().map(|_| Affine { weight: next(), bias: next() }).collect();
        let au_head = Affine { weight: next(), bias: next() };
        let fe_head = Affine { weight: next(), bias: next() };
        Self { backbone: Backbone { layers, activation: self.backbone.activation }, au_head, fe_head }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BaseNodes {
        BaseNodes {
            backbone: self.backbone.bind(g, trainable),
            au_head: self.au_head.bind(g, trainable),
            fe_head: self.fe_head.bind(g, trainable),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct BaseNodes {
    pub backbone: BackboneNodes,
    pub au_head: AffineNodes,
    pub fe_head: AffineNodes,
}

impl BaseNodes {
    /// Nodes in the same order as [`BaseParams::tensors`].
    pub fn nodes(&self) -> Vec<Node> {
        let mut out = Vec::new();
        for l in &self.backbone.layers {
            out.push(l.weight);
            out.push(l.bias);
        }
        out.extend([self.au_head.weight, self.au_head.bias, self.fe_head.weight, self.fe_head.bias]);
        out
    }

    /// The primary-task nodes (backbone and primary head) in binding order.
    pub fn au_nodes(&self) -> Vec<Node> {
        let n = self.nodes();
        n[..n.len() - 2].to_vec()
    }

    pub fn with_nodes(&self, nodes: &[Node]) -> Self {
        let mut it = nodes.iter().copied();
        let mut next = || it.next().expect("parameter count mismatch");
        let layers = self.backbone.layers.iter().map(|_| AffineNodes { weight: next(), bias: next() }).collect();
        let au_head = AffineNodes { weight: next(), bias: next() };
        let fe_head = AffineNodes { weight: next(), bias: next() };
        Self { backbone: BackboneNodes { layers, activation: self.backbone.activation }, au_head, fe_head }
    }

    pub fn values(&self, g: &Graph, layout: &BaseParams) -> BaseParams {
        layout.with_tensors(self.nodes().iter().map(|n| g.value(*n).clone()).collect())
    }
}

/// Features `B x D_in` to embeddings `B x D_emb`.
pub fn backbone_forward(g: &mut Graph, backbone: &BackboneNodes, features: Node) -> Result<Node> {
    let mut h = features;
    for layer in &backbone.layers {
        let z = layer.forward(g, h)?;
        h = backbone.activation.apply(g, z)?;
    }
    Ok(h)
}

/// Returns `(embeddings, sigmoid scores)` for the primary head.
pub fn au_forward(g: &mut Graph, backbone: &BackboneNodes, head: &AffineNodes, features: Node) -> Result<(Node, Node)> {
    let e = backbone_forward(g, backbone, features)?;
    let logits = head.forward(g, e)?;
    Ok((e, g.sigmoid(logits)?))
}

/// Returns `(embeddings, softmax probabilities)` for the auxiliary head.
pub fn fe_forward(g: &mut Graph, backbone: &BackboneNodes, head: &AffineNodes, features: Node) -> Result<(Node, Node)> {
    let e = backbone_forward(g, backbone, features)?;
    let logits = head.forward(g, e)?;
    Ok((e, g.softmax(logits)?))
}

/// Both heads on one batch: `(au_scores B x J, fe_probs B x Q)`.
pub fn base_forward(g: &mut Graph, theta: &BaseNodes, features: Node) -> Result<(Node, Node)> {
    let e = backbone_forward(g, &theta.backbone, features)?;
    let au_logits = theta.au_head.forward(g, e)?;
    let fe_logits = theta.fe_head.forward(g, e)?;
    Ok((g.sigmoid(au_logits)?, g.softmax(fe_logits)?))
}

/// `sigmoid(e w + b)` per row of `embeddings`, as a `B x 1` column.
pub fn meta_forward(g: &mut Graph, psi: &MetaNodes, embeddings: Node) -> Result<Node> {
    let d = g.shape(embeddings).cols;
    let expect = g.shape(psi.weight).rows;
    if d != expect {
        return Err(Error::Config(format!("meta net expects {expect}-dimensional embeddings, got {d}")));
    }
    let z = g.matmul(embeddings, psi.weight)?;
    let z = g.add_broadcast(z, psi.bias)?;
    g.sigmoid(z)
}
