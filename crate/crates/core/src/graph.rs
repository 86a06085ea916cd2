//! Layer graph: a DAG of input, batch-norm, dense and concat nodes kept in
//! topological order, with whole-network forward and backward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    batchnorm, batchnorm_backward, batchnorm_train_frozen, concat, concat_backward, dense,
    dense_backward, Activation, ActivationCache, BatchNormState, DenseParams, Mode,
};
use crate::modelspec::{validate_spec, ArchitectureSpec, Merge, SpecError};
use crate::scalar::Scalar;
use crate::tensor::{add, Matrix};

/// Seed used by [`ModelGraph::build_default`].
pub const DEFAULT_INIT_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind<T = f64> {
    Input {
        width: usize,
    },
    BatchNorm {
        state: BatchNormState<T>,
        grad_gamma: Matrix<T>,
        grad_beta: Matrix<T>,
    },
    Dense {
        params: DenseParams<T>,
        activation: Activation,
        grads: DenseParams<T>,
    },
    Concat {
        widths: Vec<usize>,
    },
}

impl<T> NodeKind<T> {
    pub fn keyword(&self) -> &'static str {
        match self {
            NodeKind::Input { .. } => "input",
            NodeKind::BatchNorm { .. } => "batchnorm",
            NodeKind::Dense { .. } => "dense",
            NodeKind::Concat { .. } => "concat",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode<T = f64> {
    pub id: usize,
    pub name: String,
    pub kind: NodeKind<T>,
    pub predecessors: Vec<usize>,
    pub(crate) width: usize,
    pub(crate) cache: Option<ActivationCache<T>>,
}

impl<T: Scalar> LayerNode<T> {
    /// Output width of this node.
    pub fn width(&self) -> usize {
        self.width
    }
}

/// A trainable tensor together with its most recent gradient.
pub struct ParamSlot<'a, T> {
    pub name: String,
    pub value: &'a mut Matrix<T>,
    pub grad: &'a Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T = f64> {
    nodes: Vec<LayerNode<T>>,
    input_width: usize,
    output_width: usize,
    architecture: Option<ArchitectureSpec>,
    cache_ready: bool,
}

/// Incremental graph construction. Node ids are assigned in insertion order,
/// which is also the evaluation order; a node may only reference ids that
/// already exist, so the result is acyclic by construction.
pub struct GraphBuilder<T = f64> {
    nodes: Vec<LayerNode<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> GraphBuilder<T> {
    /// Starts a graph with its input node (id 0). Dense weights drawn later
    /// come from a ChaCha8 stream seeded with `init_seed`.
    pub fn new(input_width: usize, init_seed: u64) -> Result<Self> {
        if input_width == 0 {
            return Err(Error::Config("input width must be positive".into()));
        }
        Ok(Self {
            nodes: vec![LayerNode {
                id: 0,
                name: "input".into(),
                kind: NodeKind::Input { width: input_width },
                predecessors: Vec::new(),
                width: input_width,
                cache: None,
            }],
            rng: ChaCha8Rng::seed_from_u64(init_seed),
        })
    }

    /// Output width of an already added node.
    pub fn node_width(&self, id: usize) -> Option<usize> {
        self.nodes.get(id).map(|n| n.width)
    }

    fn check_pred(&self, pred: usize) -> Result<usize> {
        self.nodes
            .get(pred)
            .map(|n| n.width)
            .ok_or_else(|| Error::Config(format!("predecessor {pred} is not defined yet")))
    }

    fn push(&mut self, name: &str, kind: NodeKind<T>, predecessors: Vec<usize>, width: usize) -> Result<usize> {
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(Error::Config(format!("duplicate node name '{name}'")));
        }
        let id = self.nodes.len();
        self.nodes.push(LayerNode {
            id,
            name: name.to_string(),
            kind,
            predecessors,
            width,
            cache: None,
        });
        Ok(id)
    }

    pub fn batchnorm(&mut self, name: &str, pred: usize) -> Result<usize> {
        let width = self.check_pred(pred)?;
        self.batchnorm_with(name, pred, BatchNormState::new(width))
    }

    pub fn batchnorm_with(&mut self, name: &str, pred: usize, state: BatchNormState<T>) -> Result<usize> {
        let width = self.check_pred(pred)?;
        if state.width() != width {
            return Err(Error::Shape(format!(
                "batchnorm '{name}' has width {} but its input is {width} wide",
                state.width()
            )));
        }
        let kind = NodeKind::BatchNorm {
            grad_gamma: Matrix::zeros(1, width),
            grad_beta: Matrix::zeros(1, width),
            state,
        };
        self.push(name, kind, vec![pred], width)
    }

    /// Dense layer with Glorot-uniform weights and zero bias.
    pub fn dense(&mut self, name: &str, pred: usize, units: usize, activation: Activation) -> Result<usize> {
        let in_dim = self.check_pred(pred)?;
        if units == 0 {
            return Err(Error::Config(format!("dense '{name}' needs at least one unit")));
        }
        let params = DenseParams::glorot(in_dim, units, &mut self.rng);
        let kind = NodeKind::Dense {
            grads: DenseParams::zeros(in_dim, units),
            params,
            activation,
        };
        self.push(name, kind, vec![pred], units)
    }

    pub fn concat(&mut self, name: &str, preds: &[usize]) -> Result<usize> {
        if preds.len() < 2 {
            return Err(Error::Config(format!(
                "concat '{name}' needs at least 2 inputs, got {}",
                preds.len()
            )));
        }
        let widths = preds.iter().map(|&p| self.check_pred(p)).collect::<Result<Vec<_>>>()?;
        let width = widths.iter().sum();
        self.push(name, NodeKind::Concat { widths }, preds.to_vec(), width)
    }

    /// Finishes the graph. The last node added is the output; every other
    /// node must feed at least one later node.
    pub fn finish(self) -> Result<ModelGraph<T>> {
        let n = self.nodes.len();
        if n < 2 {
            return Err(Error::Config("graph needs at least one layer after the input".into()));
        }
        let mut used = vec![false; n];
        for node in &self.nodes {
            for &p in &node.predecessors {
                used[p] = true;
            }
        }
        if let Some(dangling) = (0..n - 1).find(|&i| !used[i]) {
            return Err(Error::Config(format!(
                "node '{}' has no successor; only the last node may be terminal",
                self.nodes[dangling].name
            )));
        }
        let input_width = self.nodes[0].width;
        let output_width = self.nodes[n - 1].width;
        Ok(ModelGraph {
            nodes: self.nodes,
            input_width,
            output_width,
            architecture: None,
            cache_ready: false,
        })
    }
}

impl<T: Scalar> ModelGraph<T> {
    /// The reference network, initialized from [`DEFAULT_INIT_SEED`].
    pub fn build_default() -> Self {
        Self::build_default_seeded(DEFAULT_INIT_SEED)
    }

    pub fn build_default_seeded(init_seed: u64) -> Self {
        Self::from_spec(&ArchitectureSpec::canonical(), init_seed).expect("canonical spec builds")
    }

    /// Realizes a validated architecture.
    ///
    /// Nodes are laid out level by level: the level's dense branches first,
    /// then its merge concats. Dense weights are drawn in that order.
    pub fn from_spec(spec: &ArchitectureSpec, init_seed: u64) -> Result<Self> {
        validate_spec(spec).map_err(SpecError::Invalid)?;
        let mut b = GraphBuilder::new(spec.input_width, init_seed)?;
        let mut streams = vec![if spec.use_batchnorm { b.batchnorm("batchnorm", 0)? } else { 0 }];

        for (li, level) in spec.levels.iter().enumerate() {
            let ln = li + 1;
            let mut outs = Vec::with_capacity(level.branches);
            for bi in 0..level.branches {
                let src = if li == 0 { streams[0] } else { streams[bi] };
                outs.push(b.dense(&format!("level{ln}.dense{}", bi + 1), src, level.units, level.activation)?);
            }
            streams = match level.merge {
                Merge::None => outs,
                Merge::Pairs => outs
                    .chunks(2)
                    .enumerate()
                    .map(|(pi, pair)| b.concat(&format!("level{ln}.concat{}", pi + 1), pair))
                    .collect::<Result<_>>()?,
                Merge::All if outs.len() == 1 => outs,
                Merge::All => vec![b.concat(&format!("level{ln}.concat1"), &outs)?],
            };
        }
        b.dense("output", streams[0], spec.output_units, spec.output_activation)?;
        let mut g = b.finish()?;
        g.architecture = Some(spec.clone());
        Ok(g)
    }

    pub fn nodes(&self) -> &[LayerNode<T>] {
        &self.nodes
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn output_width(&self) -> usize {
        self.output_width
    }

    pub fn architecture(&self) -> Option<&ArchitectureSpec> {
        self.architecture.as_ref()
    }

    pub(crate) fn set_architecture(&mut self, spec: Option<ArchitectureSpec>) {
        self.architecture = spec;
    }

    /// Drops cached activations from the last train-mode forward pass.
    pub fn clear_caches(&mut self) {
        for node in &mut self.nodes {
            node.cache = None;
        }
        self.cache_ready = false;
    }

    /// Number of nodes of the given kind (`"dense"`, `"concat"`, ...).
    pub fn count_kind(&self, keyword: &str) -> usize {
        self.nodes.iter().filter(|n| n.kind.keyword() == keyword).count()
    }

    /// `(trainable, non_trainable)` scalar counts.
    pub fn param_count(&self) -> (usize, usize) {
        let mut trainable = 0;
        let mut frozen = 0;
        for node in &self.nodes {
            match &node.kind {
                NodeKind::Dense { params, .. } => trainable += params.weights.len() + params.bias.len(),
                NodeKind::BatchNorm { state, .. } => {
                    trainable += state.gamma.len() + state.beta.len();
                    frozen += state.running_mean.len() + state.running_var.len();
                }
                _ => {}
            }
        }
        (trainable, frozen)
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.input_width {
            return Err(Error::Shape(format!(
                "graph expects {} input columns, got {}x{}",
                self.input_width,
                x.rows(),
                x.cols()
            )));
        }
        Ok(())
    }

    /// Inference-mode forward pass. Reads batch-norm running statistics and
    /// never mutates the graph.
    pub fn predict(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        let mut outs: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let out = match &node.kind {
                NodeKind::Input { .. } => x.clone(),
                NodeKind::BatchNorm { state, .. } => {
                    let mut s = state.clone();
                    batchnorm(input_of(&outs, node.predecessors[0]), &mut s, Mode::Infer)?.0
                }
                NodeKind::Dense { params, activation, .. } => {
                    dense(input_of(&outs, node.predecessors[0]), params, *activation, Mode::Infer)?.0
                }
                NodeKind::Concat { .. } => concat_inputs(&outs, node)?,
            };
            outs[i] = Some(out);
        }
        Ok(outs.pop().flatten().expect("terminal output"))
    }

    /// Forward pass. Train mode caches activations for [`backward`](Self::backward)
    /// and updates batch-norm running statistics; infer mode is [`predict`](Self::predict).
    pub fn forward(&mut self, x: &Matrix<T>, mode: Mode) -> Result<Matrix<T>> {
        match mode {
            Mode::Infer => self.predict(x),
            Mode::Train => self.forward_train(x, true),
        }
    }

    /// Train-mode forward pass that leaves running statistics untouched.
    pub fn forward_train_frozen(&mut self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.forward_train(x, false)
    }

    fn forward_train(&mut self, x: &Matrix<T>, update_stats: bool) -> Result<Matrix<T>> {
        self.check_input(x)?;
        self.cache_ready = false;
        let mut outs: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        for i in 0..self.nodes.len() {
            let node = &mut self.nodes[i];
            let pred = node.predecessors.first().copied().unwrap_or(0);
            let (out, cache) = match &mut node.kind {
                NodeKind::Input { .. } => (x.clone(), None),
                NodeKind::BatchNorm { state, .. } => {
                    let input = input_of(&outs, pred);
                    if update_stats {
                        batchnorm(input, state, Mode::Train)?
                    } else {
                        let (o, c) = batchnorm_train_frozen(input, state)?;
                        (o, Some(c))
                    }
                }
                NodeKind::Dense { params, activation, .. } => {
                    let input = input_of(&outs, pred);
                    dense(input, params, *activation, Mode::Train)?
                }
                NodeKind::Concat { .. } => (concat_inputs(&outs, node)?, None),
            };
            node.cache = cache;
            outs[i] = Some(out);
        }
        self.cache_ready = true;
        Ok(outs.pop().flatten().expect("terminal output"))
    }

    /// Back-propagates `loss_grad` (gradient of the loss with respect to the
    /// graph output) and overwrites every parameter gradient. Consumes the
    /// activations cached by the preceding train-mode forward pass.
    pub fn backward(&mut self, loss_grad: &Matrix<T>) -> Result<()> {
        if !self.cache_ready {
            return Err(Error::State(
                "backward requires a train-mode forward pass immediately before".into(),
            ));
        }
        let n = self.nodes.len();
        let last = &self.nodes[n - 1];
        let out_rows = last
            .cache
            .as_ref()
            .map(|c| c.output.rows())
            .ok_or_else(|| Error::State("output node has no cached activations".into()))?;
        if loss_grad.shape() != (out_rows, self.output_width) {
            return Err(Error::Shape(format!(
                "loss gradient is {}x{}, graph output is {out_rows}x{}",
                loss_grad.rows(),
                loss_grad.cols(),
                self.output_width
            )));
        }
        self.cache_ready = false;

        let mut upstream: Vec<Option<Matrix<T>>> = vec![None; n];
        upstream[n - 1] = Some(loss_grad.clone());
        for i in (0..n).rev() {
            let node = &mut self.nodes[i];
            let cache = node.cache.take();
            let grad = match upstream[i].take() {
                Some(g) => g,
                None => continue,
            };
            let to_preds: Vec<Matrix<T>> = match &mut node.kind {
                NodeKind::Input { .. } => Vec::new(),
                NodeKind::Dense {
                    params,
                    activation,
                    grads,
                } => {
                    let cache = cache.ok_or_else(|| missing_cache(&node.name))?;
                    let g = dense_backward(&grad, params, *activation, &cache)?;
                    grads.weights = g.weights;
                    grads.bias = g.bias;
                    vec![g.input]
                }
                NodeKind::BatchNorm {
                    state,
                    grad_gamma,
                    grad_beta,
                } => {
                    let cache = cache.ok_or_else(|| missing_cache(&node.name))?;
                    let g = batchnorm_backward(&grad, state, &cache)?;
                    *grad_gamma = g.gamma;
                    *grad_beta = g.beta;
                    vec![g.input]
                }
                NodeKind::Concat { widths } => concat_backward(&grad, widths)?,
            };
            let preds = node.predecessors.clone();
            for (p, g) in preds.into_iter().zip(to_preds) {
                upstream[p] = Some(match upstream[p].take() {
                    Some(acc) => add(&acc, &g)?,
                    None => g,
                });
            }
        }
        Ok(())
    }

    /// Trainable tensors paired with their gradients, in node order.
    pub fn param_slots(&mut self) -> Vec<ParamSlot<'_, T>> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            match &mut node.kind {
                NodeKind::Dense { params, grads, .. } => {
                    out.push(ParamSlot {
                        name: format!("{}.weight", node.name),
                        value: &mut params.weights,
                        grad: &grads.weights,
                    });
                    out.push(ParamSlot {
                        name: format!("{}.bias", node.name),
                        value: &mut params.bias,
                        grad: &grads.bias,
                    });
                }
                NodeKind::BatchNorm {
                    state,
                    grad_gamma,
                    grad_beta,
                } => {
                    out.push(ParamSlot {
                        name: format!("{}.gamma", node.name),
                        value: &mut state.gamma,
                        grad: grad_gamma,
                    });
                    out.push(ParamSlot {
                        name: format!("{}.beta", node.name),
                        value: &mut state.beta,
                        grad: grad_beta,
                    });
                }
                _ => {}
            }
        }
        out
    }

    /// Trainable tensors and their latest gradients, by name.
    pub fn gradients(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.kind {
                NodeKind::Dense { grads, .. } => {
                    out.push((format!("{}.weight", node.name), &grads.weights));
                    out.push((format!("{}.bias", node.name), &grads.bias));
                }
                NodeKind::BatchNorm {
                    grad_gamma, grad_beta, ..
                } => {
                    out.push((format!("{}.gamma", node.name), grad_gamma));
                    out.push((format!("{}.beta", node.name), grad_beta));
                }
                _ => {}
            }
        }
        out
    }

    /// Every stored tensor (trainable parameters and running statistics).
    pub fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.kind {
                NodeKind::Dense { params, .. } => {
                    out.push((format!("{}.weight", node.name), &params.weights));
                    out.push((format!("{}.bias", node.name), &params.bias));
                }
                NodeKind::BatchNorm { state, .. } => {
                    out.push((format!("{}.gamma", node.name), &state.gamma));
                    out.push((format!("{}.beta", node.name), &state.beta));
                    out.push((format!("{}.running_mean", node.name), &state.running_mean));
                    out.push((format!("{}.running_var", node.name), &state.running_var));
                }
                _ => {}
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            match &mut node.kind {
                NodeKind::Dense { params, .. } => {
                    out.push((format!("{}.weight", node.name), &mut params.weights));
                    out.push((format!("{}.bias", node.name), &mut params.bias));
                }
                NodeKind::BatchNorm { state, .. } => {
                    out.push((format!("{}.gamma", node.name), &mut state.gamma));
                    out.push((format!("{}.beta", node.name), &mut state.beta));
                    out.push((format!("{}.running_mean", node.name), &mut state.running_mean));
                    out.push((format!("{}.running_var", node.name), &mut state.running_var));
                }
                _ => {}
            }
        }
        out
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.tensors_mut().into_iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Scales the stored gradient of one tensor in place. Returns false when no
    /// trainable tensor has that name.
    pub fn scale_gradient(&mut self, name: &str, factor: T) -> bool {
        for node in &mut self.nodes {
            let slot = match &mut node.kind {
                NodeKind::Dense { grads, .. } if name == format!("{}.weight", node.name) => &mut grads.weights,
                NodeKind::Dense { grads, .. } if name == format!("{}.bias", node.name) => &mut grads.bias,
                NodeKind::BatchNorm { grad_gamma, .. } if name == format!("{}.gamma", node.name) => grad_gamma,
                NodeKind::BatchNorm { grad_beta, .. } if name == format!("{}.beta", node.name) => grad_beta,
                _ => continue,
            };
            *slot = slot.scale(factor);
            return true;
        }
        false
    }
}

fn missing_cache(name: &str) -> Error {
    Error::State(format!("node '{name}' has no cached activations"))
}

fn input_of<T>(outs: &[Option<Matrix<T>>], pred: usize) -> &Matrix<T> {
    outs[pred].as_ref().expect("predecessor evaluated first")
}

fn concat_inputs<T: Scalar>(outs: &[Option<Matrix<T>>], node: &LayerNode<T>) -> Result<Matrix<T>> {
    let parts: Vec<&Matrix<T>> = node
        .predecessors
        .iter()
        .map(|&p| outs[p].as_ref().expect("predecessor evaluated first"))
        .collect();
    concat(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::mse_loss;
    use crate::modelspec::parse_spec;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn bits(g: &ModelGraph) -> Vec<u64> {
        g.tensors()
            .iter()
            .flat_map(|(_, m)| m.as_slice().iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn default_census() {
        let g = ModelGraph::<f64>::build_default();
        assert_eq!(g.nodes().len(), 17);
        assert_eq!(g.count_kind("input"), 1);
        assert_eq!(g.count_kind("batchnorm"), 1);
        assert_eq!(g.count_kind("dense"), 11);
        assert_eq!(g.count_kind("concat"), 4);
        let concat_widths: Vec<usize> = g
            .nodes()
            .iter()
            .filter(|n| n.kind.keyword() == "concat")
            .map(|n| n.width())
            .collect();
        assert_eq!(concat_widths, vec![256, 256, 256, 384]);
    }

    #[test]
    fn default_param_count_matches_symbolic_count() {
        let expected = 26 + 6 * (13 * 128 + 128) + 3 * (256 * 128 + 128) + (384 * 128 + 128) + (128 + 1);
        assert_eq!(expected, 158_875);
        assert_eq!(ModelGraph::<f64>::build_default().param_count(), (158_875, 26));
    }

    #[test]
    fn small_graph_counts() {
        let mut b = GraphBuilder::<f64>::new(13, 0).unwrap();
        b.dense("out", 0, 1, Activation::Linear).unwrap();
        assert_eq!(b.finish().unwrap().param_count(), (14, 0));

        let mut b = GraphBuilder::<f64>::new(13, 0).unwrap();
        b.batchnorm("bn", 0).unwrap();
        assert_eq!(b.finish().unwrap().param_count(), (26, 26));

        let spec = parse_spec("input 13\nlevel 1: branches 1, units 4, relu\noutput: 1, linear").unwrap();
        let g = ModelGraph::<f64>::from_spec(&spec, 3).unwrap();
        assert_eq!(g.param_count(), (4 * 13 + 4 + 4 + 1, 0));
        assert_eq!(g.nodes().len(), 3);
    }

    #[test]
    fn topological_order_is_a_linear_extension() {
        let g = ModelGraph::<f64>::build_default();
        for (i, node) in g.nodes().iter().enumerate() {
            assert_eq!(node.id, i);
            assert!(node.predecessors.iter().all(|&p| p < i));
            match node.kind {
                NodeKind::Input { .. } => assert!(node.predecessors.is_empty()),
                NodeKind::Concat { .. } => assert!(node.predecessors.len() >= 2),
                _ => assert_eq!(node.predecessors.len(), 1),
            }
        }
        // level-1 pairs concatenate adjacent branches in declaration order
        let c1 = g.nodes().iter().find(|n| n.name == "level1.concat1").unwrap();
        let names: Vec<&str> = c1.predecessors.iter().map(|&p| g.nodes()[p].name.as_str()).collect();
        assert_eq!(names, ["level1.dense1", "level1.dense2"]);
    }

    #[test]
    fn default_equals_canonical_spec_build() {
        let a = ModelGraph::<f64>::build_default();
        let b = ModelGraph::<f64>::from_spec(&parse_spec(crate::modelspec::CANONICAL_SPEC).unwrap(), 0).unwrap();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let mut spec = ArchitectureSpec::canonical();
        spec.levels[1].branches = 2;
        assert!(matches!(
            ModelGraph::<f64>::from_spec(&spec, 0),
            Err(Error::Spec(SpecError::Invalid(_)))
        ));
    }

    #[test]
    fn forward_shapes_and_infer_purity() {
        let mut g = ModelGraph::<f64>::build_default();
        let x = random(5, 13, 1);
        let before = bits(&g);
        let a = g.forward(&x, Mode::Infer).unwrap();
        let b = g.forward(&x, Mode::Infer).unwrap();
        assert_eq!(a.shape(), (5, 1));
        assert!(a.is_finite());
        assert_eq!(
            a.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(before, bits(&g));

        let t = g.forward(&x, Mode::Train).unwrap();
        assert_eq!(t.shape(), (5, 1));
        assert_ne!(before, bits(&g), "train mode moves running statistics");

        assert!(matches!(g.predict(&random(2, 12, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_weights_output_final_bias() {
        let mut g = ModelGraph::<f64>::build_default();
        for (name, m) in g.tensors_mut() {
            if name.ends_with(".weight") {
                *m = Matrix::zeros(m.rows(), m.cols());
            }
        }
        *g.tensor_mut("output.bias").unwrap() = Matrix::row_vector(&[3.25]).unwrap();
        let y = g.predict(&random(4, 13, 2)).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn backward_requires_forward() {
        let mut g = ModelGraph::<f64>::build_default();
        assert!(matches!(g.backward(&Matrix::zeros(4, 1)), Err(Error::State(_))));
        g.forward(&random(4, 13, 3), Mode::Infer).unwrap();
        assert!(matches!(g.backward(&Matrix::zeros(4, 1)), Err(Error::State(_))));
        g.forward(&random(4, 13, 3), Mode::Train).unwrap();
        assert!(matches!(g.backward(&Matrix::zeros(3, 1)), Err(Error::Shape(_))));
        g.forward(&random(4, 13, 3), Mode::Train).unwrap();
        g.backward(&Matrix::zeros(4, 1)).unwrap();
        // the cache is consumed
        assert!(matches!(g.backward(&Matrix::zeros(4, 1)), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut g = ModelGraph::<f64>::build_default();
        let x = random(4, 13, 4);
        g.forward(&x, Mode::Train).unwrap();
        g.backward(&Matrix::zeros(4, 1)).unwrap();
        for (name, grad) in g.gradients() {
            assert!(grad.as_slice().iter().all(|&v| v == 0.0), "{name}");
        }
    }

    #[test]
    fn gradients_scale_linearly() {
        let x = random(4, 13, 5);
        let up = random(4, 1, 6);
        let mut g1 = ModelGraph::<f64>::build_default();
        g1.forward_train_frozen(&x).unwrap();
        g1.backward(&up).unwrap();
        let mut g2 = ModelGraph::<f64>::build_default();
        g2.forward_train_frozen(&x).unwrap();
        g2.backward(&up.scale(4.0)).unwrap();
        for ((name, a), (_, b)) in g1.gradients().into_iter().zip(g2.gradients()) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert_eq!(x * 4.0, *y, "{name}");
            }
        }
    }

    #[test]
    fn whole_graph_gradient_matches_finite_differences_on_samples() {
        let x = random(4, 13, 9);
        let y = random(4, 1, 10);
        let mut g = ModelGraph::<f64>::build_default_seeded(9);
        let pred = g.forward_train_frozen(&x).unwrap();
        let (_, dl) = mse_loss(&pred, &y).unwrap();
        g.backward(&dl).unwrap();
        let grads: Vec<(String, Matrix)> = g.gradients().into_iter().map(|(n, m)| (n, m.clone())).collect();
        let h = 1e-5;
        for (name, grad) in &grads {
            for idx in [0, grad.len() / 2, grad.len() - 1] {
                let orig = g.tensor_mut(name).unwrap().as_slice()[idx];
                g.tensor_mut(name).unwrap().as_mut_slice()[idx] = orig + h;
                let lp = mse_loss(&g.forward_train_frozen(&x).unwrap(), &y).unwrap().0;
                g.tensor_mut(name).unwrap().as_mut_slice()[idx] = orig - h;
                let lm = mse_loss(&g.forward_train_frozen(&x).unwrap(), &y).unwrap().0;
                g.tensor_mut(name).unwrap().as_mut_slice()[idx] = orig;
                let num = (lp - lm) / (2.0 * h);
                let a = grad.as_slice()[idx];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
                assert!(rel <= 1e-4, "{name}[{idx}]: analytic {a} numeric {num}");
            }
        }
    }

    #[test]
    fn builder_rejects_malformed_graphs() {
        let mut b = GraphBuilder::<f64>::new(3, 0).unwrap();
        assert!(b.dense("d", 5, 2, Activation::Relu).is_err());
        let d = b.dense("d", 0, 2, Activation::Relu).unwrap();
        assert!(b.concat("c", &[d]).is_err());
        assert!(b.dense("d", 0, 2, Activation::Relu).is_err(), "duplicate name");
        b.dense("e", 0, 2, Activation::Relu).unwrap();
        // "d" dangles
        assert!(b.finish().is_err());
        assert!(GraphBuilder::<f64>::new(3, 0).unwrap().finish().is_err());
    }

    #[test]
    fn generic_over_f32() {
        let g = ModelGraph::<f32>::build_default();
        let x = random(3, 13, 11).cast::<f32>();
        let y = g.predict(&x).unwrap();
        assert_eq!(y.shape(), (3, 1));
        assert!(y.is_finite());
    }
}
