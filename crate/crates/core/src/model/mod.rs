//! Graph description, scaling, assembly and end-to-end forward.

mod builtin;
mod config;
mod heads;
mod scale;
mod weights;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::blocks::{init_default, join, Backend, C2f, C2psa, C3k2, Cbs, Eager, ParamMut, ParamRef, Params, Sppf};
use crate::tensor::{Tensor4, TensorError};

pub use builtin::{builtin_config, BUILTIN_CONFIGS};
pub use config::{parse_config, LayerDecl, ModelSpec, ModuleDecl, Scale, Task, VARIANTS};
pub use heads::{Branch, Classify, Detect, BOX_OBJ_CHANNELS};
pub use scale::{
    apply_scale, round_channels, scale_channels, scale_repeats, ScaledLayer, ScaledModule, ScaledSpec, INPUT_CHANNELS,
};
pub use weights::{load_weights, save_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

/// Input size at which layer shapes are recorded.
pub const REFERENCE_SIZE: usize = 640;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("syntax error at line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("forward reference at line {line} (from={from})")]
    ForwardReference { line: usize, from: i64 },
    #[error("dangling reference at line {line} (from={from})")]
    DanglingReference { line: usize, from: i64 },
    #[error("duplicate head at line {line} (first head at line {first})")]
    DuplicateHead { line: usize, first: usize },
    #[error("config does not end with a Detect or Classify head")]
    MissingHead,
    #[error("config has no task in [meta]")]
    MissingTask,
    #[error("unknown module {name:?} at line {line}")]
    UnknownModule { line: usize, name: String },
    #[error("unknown variant {variant:?}{}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    UnknownVariant { variant: String, line: Option<usize> },
    #[error("layer {layer}: {message}")]
    InvalidLayer { layer: usize, message: String },
    #[error("layer {layer}: {source}")]
    Layer { layer: usize, source: TensorError },
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("unexpected end of data")]
    UnexpectedEof,
    #[error("not a weights file (bad magic)")]
    BadMagic,
    #[error("unsupported weights version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed weights header: {0}")]
    BadHeader(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("unexpected tensor {0:?}")]
    UnexpectedTensor(String),
    #[error("shape mismatch for {name:?}: model has {expected:?}, file has {found:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// One executable graph node.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Cbs),
    C2f(C2f),
    C3k2(C3k2),
    Sppf(Sppf),
    C2psa(C2psa),
    Upsample,
    Concat,
    Detect(Detect),
    Classify(Classify),
}

impl Layer {
    fn build(layer: &ScaledLayer) -> std::result::Result<Self, TensorError> {
        let c1 = layer.c_in[0];
        Ok(match layer.module {
            ScaledModule::Conv { c_out, k, s, g } => {
                Layer::Conv(Cbs::grouped(c1, c_out, k, s, g, crate::blocks::Activation::Silu)?)
            }
            ScaledModule::C2f { c_out, n, shortcut, e } => Layer::C2f(C2f::new(c1, c_out, n, shortcut, e)?),
            ScaledModule::C3k2 {
                c_out,
                n,
                c3k,
                e,
                shortcut,
            } => Layer::C3k2(C3k2::new(c1, c_out, n, c3k, e, shortcut)?),
            ScaledModule::Sppf { c_out, k } => Layer::Sppf(Sppf::new(c1, c_out, k)?),
            ScaledModule::C2psa { c, n, e } => Layer::C2psa(C2psa::new(c, n, e)?),
            ScaledModule::Upsample => Layer::Upsample,
            ScaledModule::Concat => Layer::Concat,
            ScaledModule::Detect { nc, dw } => Layer::Detect(Detect::new(&layer.c_in, nc, dw)?),
            ScaledModule::Classify { hidden, nc } => Layer::Classify(Classify::new(c1, hidden, nc)?),
        })
    }

    /// Output shapes given input shapes, without running anything.
    pub fn infer_shapes(&self, inputs: &[[usize; 4]]) -> std::result::Result<Vec<[usize; 4]>, String> {
        let [n, c, h, w] = inputs[0];
        let same = |c_out: usize| Ok(vec![[n, c_out, h, w]]);
        let expect_c = |want: usize| {
            if c == want {
                Ok(())
            } else {
                Err(format!("expects {want} input channels, got {c}"))
            }
        };
        match self {
            Layer::Conv(b) => {
                expect_c(b.c_in())?;
                let (oh, ow) = b.params.output_hw(h, w).ok_or("output would be empty")?;
                Ok(vec![[n, b.c_out(), oh, ow]])
            }
            Layer::C2f(b) => {
                expect_c(b.cv1.c_in())?;
                same(b.cv2.c_out())
            }
            Layer::C3k2(b) => {
                expect_c(b.cv1.c_in())?;
                same(b.cv2.c_out())
            }
            Layer::Sppf(b) => {
                expect_c(b.cv1.c_in())?;
                same(b.cv2.c_out())
            }
            Layer::C2psa(b) => {
                expect_c(b.cv1.c_in())?;
                same(b.cv2.c_out())
            }
            Layer::Upsample => Ok(vec![[n, c, 2 * h, 2 * w]]),
            Layer::Concat => {
                let mut total = 0;
                for s in inputs {
                    if (s[0], s[2], s[3]) != (n, h, w) {
                        return Err(format!("cannot concatenate {s:?} with {:?}", inputs[0]));
                    }
                    total += s[1];
                }
                Ok(vec![[n, total, h, w]])
            }
            Layer::Detect(d) => inputs
                .iter()
                .zip(&d.box_branches)
                .map(|(s, b)| {
                    if s[1] != b.stack[0].c_in() {
                        return Err(format!("level expects {} channels, got {}", b.stack[0].c_in(), s[1]));
                    }
                    Ok([s[0], BOX_OBJ_CHANNELS + d.nc, s[2], s[3]])
                })
                .collect(),
            Layer::Classify(cl) => {
                expect_c(cl.conv.c_in())?;
                Ok(vec![[n, cl.linear.c_out(), 1, 1]])
            }
        }
    }

    /// Runs one node. Heads may return several outputs.
    pub fn forward<B: Backend>(&self, be: &mut B, xs: &[&B::Value]) -> crate::tensor::Result<Vec<B::Value>> {
        let x = xs[0];
        Ok(match self {
            Layer::Conv(b) => vec![b.forward(be, x)?],
            Layer::C2f(b) => vec![b.forward(be, x)?],
            Layer::C3k2(b) => vec![b.forward(be, x)?],
            Layer::Sppf(b) => vec![b.forward(be, x)?],
            Layer::C2psa(b) => vec![b.forward(be, x)?],
            Layer::Upsample => vec![be.upsample2x(x)?],
            Layer::Concat => vec![be.concat(xs)?],
            Layer::Detect(d) => d.forward(be, xs)?,
            Layer::Classify(c) => vec![c.forward(be, x)?],
        })
    }

    fn as_params(&self) -> Option<&dyn Params> {
        match self {
            Layer::Conv(b) => Some(b),
            Layer::C2f(b) => Some(b),
            Layer::C3k2(b) => Some(b),
            Layer::Sppf(b) => Some(b),
            Layer::C2psa(b) => Some(b),
            Layer::Detect(b) => Some(b),
            Layer::Classify(b) => Some(b),
            Layer::Upsample | Layer::Concat => None,
        }
    }

    fn as_params_mut(&mut self) -> Option<&mut dyn Params> {
        match self {
            Layer::Conv(b) => Some(b),
            Layer::C2f(b) => Some(b),
            Layer::C3k2(b) => Some(b),
            Layer::Sppf(b) => Some(b),
            Layer::C2psa(b) => Some(b),
            Layer::Detect(b) => Some(b),
            Layer::Classify(b) => Some(b),
            Layer::Upsample | Layer::Concat => None,
        }
    }
}

impl Params for Layer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRef<'_>)) {
        if let Some(p) = self.as_params() {
            p.visit_params(prefix, f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        if let Some(p) = self.as_params_mut() {
            p.visit_params_mut(prefix, f);
        }
    }
}

/// A layer with its place in the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode {
    pub index: usize,
    pub module: &'static str,
    pub from_text: String,
    pub args_text: String,
    /// Absolute source indices; empty for the layer reading the image.
    pub sources: Vec<usize>,
    pub repeats: usize,
    /// Hyperparameters the layer was built from.
    pub spec: ScaledModule,
    /// Channel count of each input.
    pub c_in: Vec<usize>,
    pub layer: Layer,
    /// Output shapes for a batch-1 input at [`REFERENCE_SIZE`].
    pub out_shapes: Vec<[usize; 4]>,
}

/// Raw network outputs.
#[derive(Clone, Debug, PartialEq)]
pub enum RawPredictions {
    /// Maps `(n, 5 + nc, h, w)`, finest level first.
    Detect { maps: Vec<Tensor4>, strides: Vec<usize> },
    /// Logits `(n, nc, 1, 1)`.
    Classify { logits: Tensor4 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub name: String,
    pub variant: String,
    pub task: Task,
    pub num_classes: usize,
    pub nodes: Vec<LayerNode>,
    /// Detect strides, finest first; empty for classifiers.
    pub strides: Vec<usize>,
    /// Index of the last layer reading each output, for freeing activations.
    last_use: Vec<usize>,
}

/// Parses, scales and builds in one step.
pub fn build_from_text(name: &str, text: &str, variant: &str, seed: u64) -> Result<Model> {
    let spec = parse_config(text)?;
    let scaled = apply_scale(&spec, variant)?;
    build_model(name, &scaled, seed)
}

/// Assembles the graph and initializes every tensor from `seed`.
pub fn build_model(name: &str, spec: &ScaledSpec, seed: u64) -> Result<Model> {
    let mut nodes = Vec::with_capacity(spec.layers.len());
    for l in &spec.layers {
        let layer = Layer::build(l).map_err(|source| ModelError::Layer {
            layer: l.decl.index,
            source,
        })?;
        nodes.push(LayerNode {
            index: l.decl.index,
            module: l.decl.module.name(),
            from_text: l.decl.from_text.clone(),
            args_text: l.decl.args_text.clone(),
            sources: l.decl.sources.clone(),
            repeats: match l.module {
                ScaledModule::C2f { n, .. } | ScaledModule::C3k2 { n, .. } | ScaledModule::C2psa { n, .. } => n,
                _ => 1,
            },
            spec: l.module.clone(),
            c_in: l.c_in.clone(),
            layer,
            out_shapes: Vec::new(),
        });
    }
    let mut last_use: Vec<usize> = (0..nodes.len()).collect();
    for node in &nodes {
        for &s in &node.sources {
            last_use[s] = last_use[s].max(node.index);
        }
    }
    let mut model = Model {
        name: name.to_string(),
        variant: spec.variant.clone(),
        task: spec.task,
        num_classes: spec.num_classes,
        nodes,
        strides: Vec::new(),
        last_use,
    };
    let shapes = model.infer_shapes(REFERENCE_SIZE, REFERENCE_SIZE)?;
    for (node, s) in model.nodes.iter_mut().zip(shapes) {
        node.out_shapes = s;
    }
    if model.task == Task::Detect {
        let head = model.nodes.last().expect("spec has a head");
        let mut strides = Vec::new();
        for s in &head.out_shapes {
            if !REFERENCE_SIZE.is_multiple_of(s[2]) || REFERENCE_SIZE / s[2] != REFERENCE_SIZE / s[3] {
                return Err(ModelError::InvalidLayer {
                    layer: head.index,
                    message: format!("level grid {}x{} is not an integer stride", s[2], s[3]),
                });
            }
            strides.push(REFERENCE_SIZE / s[2]);
        }
        if strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ModelError::InvalidLayer {
                layer: head.index,
                message: format!("head levels must go from fine to coarse, got strides {strides:?}"),
            });
        }
        model.strides = strides;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_default(&mut model, &mut rng);
    Ok(model)
}

impl Model {
    pub fn head(&self) -> &LayerNode {
        self.nodes.last().expect("model has a head")
    }

    /// Largest stride; detect inputs must be a multiple of it.
    pub fn max_stride(&self) -> usize {
        self.strides.last().copied().unwrap_or(1)
    }

    /// Batch-1 output shapes of every layer for an `h`×`w` input.
    pub fn infer_shapes(&self, h: usize, w: usize) -> Result<Vec<Vec<[usize; 4]>>> {
        let mut shapes: Vec<Vec<[usize; 4]>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let inputs: Vec<[usize; 4]> = if node.sources.is_empty() {
                vec![[1, INPUT_CHANNELS, h, w]]
            } else {
                node.sources.iter().map(|&s| shapes[s][0]).collect()
            };
            let out = node
                .layer
                .infer_shapes(&inputs)
                .map_err(|message| ModelError::InvalidLayer {
                    layer: node.index,
                    message,
                })?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let [n, c, h, w] = x.shape();
        if n == 0 || c != INPUT_CHANNELS || h == 0 || w == 0 {
            return Err(ModelError::Input(format!(
                "expected (n, {INPUT_CHANNELS}, h, w), got {:?}",
                x.shape()
            )));
        }
        let stride = match self.task {
            Task::Detect => 32.max(self.max_stride()),
            Task::Classify => 1,
        };
        if h % stride != 0 || w % stride != 0 {
            return Err(ModelError::Input(format!("{h}x{w} is not divisible by {stride}")));
        }
        if x.data().iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Input("input contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor4) -> Result<RawPredictions> {
        self.forward_observed(x, |_, _| {})
    }

    /// Forward that reports every layer's output shapes as it goes.
    pub fn forward_observed(&self, x: &Tensor4, mut observe: impl FnMut(usize, &[Tensor4])) -> Result<RawPredictions> {
        self.check_input(x)?;
        let mut cache: Vec<Option<Tensor4>> = vec![None; self.nodes.len()];
        for node in &self.nodes {
            let inputs: Vec<&Tensor4> = if node.sources.is_empty() {
                vec![x]
            } else {
                node.sources
                    .iter()
                    .map(|&s| cache[s].as_ref().expect("sources run before consumers"))
                    .collect()
            };
            let layer_err = |source| ModelError::Layer {
                layer: node.index,
                source,
            };
            let mut out = node.layer.forward(&mut Eager, &inputs).map_err(|e| match e {
                TensorError::NonFinite { .. } => ModelError::NonFinite { layer: node.index },
                e => layer_err(e),
            })?;
            if out.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
                return Err(ModelError::NonFinite { layer: node.index });
            }
            observe(node.index, &out);
            for &s in &node.sources {
                if self.last_use[s] == node.index {
                    cache[s] = None;
                }
            }
            if node.index + 1 == self.nodes.len() {
                return Ok(match self.task {
                    Task::Detect => RawPredictions::Detect {
                        maps: out,
                        strides: self.strides.clone(),
                    },
                    Task::Classify => RawPredictions::Classify {
                        logits: out.pop().expect("classifier has one output"),
                    },
                });
            }
            cache[node.index] = out.pop();
        }
        unreachable!("validated models end with a head")
    }

    pub fn param_count(&self) -> usize {
        Params::param_count(self)
    }
}

impl Params for Model {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRef<'_>)) {
        for node in &self.nodes {
            node.layer
                .visit_params(&join(prefix, &format!("model.{}", node.index)), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        for node in &mut self.nodes {
            node.layer
                .visit_params_mut(&join(prefix, &format!("model.{}", node.index)), f);
        }
    }
}
