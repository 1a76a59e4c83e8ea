//! The view-specific classifier: a single-channel convolutional adapter in
//! place of the ResNet-18 (3D) stem, the four residual stages of `r3d_18`,
//! global average pooling, dropout and a three-way affine head.
//!
//! Parameter names follow torchvision (`layer2.0.downsample.0.weight`,
//! `layer4.1.conv2.1.running_var`, `fc.bias`) so that backbone weights
//! exported from there can be loaded by name. The adapter lives under
//! `adapter.0` (convolution) and `adapter.1` (normalization).

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::{tensor::TensorView, Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vol3d::{
    join_name, BatchNorm3d, Conv3d, ConvGeometry, Ctx, Dropout, Dropout3d, GlobalAvgPool, Linear, Module, Param,
    Relu, Scalar, Tensor,
};

use crate::error::{Error, Result};

/// Channel widths of the four residual stages of ResNet-18.
pub const STAGE_WIDTHS: [usize; 4] = [64, 128, 256, 512];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { in_channels: 1, out_channels: 64, kernel: [9, 7, 7], stride: [1, 3, 3], padding: [1, 3, 3] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// The `r3d_18` widths (64, 128, 256, 512).
    Full,
    /// Same topology with every width (adapter output included) divided by
    /// `width_divisor`, for CPU-sized runs.
    Reduced { width_divisor: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub adapter: AdapterConfig,
    pub adapter_dropout: f64,
    pub head_dropout: f64,
    pub n_classes: usize,
    pub backbone: Backbone,
    pub pretrained_weights_path: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            adapter: AdapterConfig::default(),
            adapter_dropout: 0.1,
            head_dropout: 0.2,
            n_classes: 3,
            backbone: Backbone::Full,
            pretrained_weights_path: None,
        }
    }
}

impl ModelConfig {
    pub fn reduced(width_divisor: usize) -> Self {
        Self { backbone: Backbone::Reduced { width_divisor }, ..Self::default() }
    }

    fn divisor(&self) -> usize {
        match self.backbone {
            Backbone::Full => 1,
            Backbone::Reduced { width_divisor } => width_divisor,
        }
    }

    /// Output channels of the adapter after width reduction.
    pub fn adapter_channels(&self) -> usize {
        self.adapter.out_channels / self.divisor()
    }

    pub fn stage_widths(&self) -> [usize; 4] {
        STAGE_WIDTHS.map(|w| w / self.divisor())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes != 3 {
            return bad(format!("n_classes must be 3, got {}", self.n_classes));
        }
        let d = self.divisor();
        if d == 0 || self.adapter.out_channels % d != 0 || STAGE_WIDTHS.iter().any(|w| w % d != 0) {
            return bad(format!("width divisor {d} must divide the adapter and stage widths"));
        }
        let a = &self.adapter;
        if a.in_channels != 1 {
            return bad(format!("the adapter takes single-channel video, got in_channels {}", a.in_channels));
        }
        if a.kernel.contains(&0) || a.stride.contains(&0) {
            return bad("adapter kernel and stride must be positive".into());
        }
        for (name, p) in [("adapter_dropout", self.adapter_dropout), ("head_dropout", self.head_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        Ok(())
    }

    fn adapter_geometry(&self) -> ConvGeometry {
        let a = &self.adapter;
        ConvGeometry {
            in_channels: a.in_channels,
            out_channels: self.adapter_channels(),
            kernel: a.kernel,
            stride: a.stride,
            padding: a.padding,
        }
    }
}

/// Convolution (no bias) followed by batch normalization; torchvision names
/// the pair `<prefix>.0` and `<prefix>.1`.
#[derive(Debug, Clone)]
struct ConvBn<S> {
    conv: Conv3d<S>,
    bn: BatchNorm3d<S>,
}

impl<S: Scalar> ConvBn<S> {
    fn new(geometry: ConvGeometry, rng: &mut ChaCha8Rng) -> Self {
        let bn = BatchNorm3d::new(geometry.out_channels);
        Self { conv: Conv3d::new(geometry, false, rng), bn }
    }

    fn forward(&mut self, x: &Tensor<S>, ctx: &Ctx) -> Result<Tensor<S>> {
        let y = self.conv.forward(x, ctx)?;
        Ok(self.bn.forward(y, ctx)?)
    }

    fn backward(&mut self, grad: Tensor<S>) -> Result<Option<Tensor<S>>> {
        let g = self.bn.backward(grad)?;
        Ok(self.conv.backward(&g)?)
    }
}

impl<S: Scalar> Module<S> for ConvBn<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.conv.visit_params(&join_name(prefix, "0"), f);
        self.bn.visit_params(&join_name(prefix, "1"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.bn.visit_buffers(&join_name(prefix, "1"), f);
    }
}

#[derive(Debug, Clone)]
struct BasicBlock<S> {
    conv1: ConvBn<S>,
    relu1: Relu,
    conv2: ConvBn<S>,
    downsample: Option<ConvBn<S>>,
    relu: Relu,
}

impl<S: Scalar> BasicBlock<S> {
    fn new(inp: usize, out: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv1 = ConvBn::new(ConvGeometry::cubic(inp, out, 3, stride, 1), rng);
        let conv2 = ConvBn::new(ConvGeometry::cubic(out, out, 3, 1, 1), rng);
        let downsample =
            (stride != 1 || inp != out).then(|| ConvBn::new(ConvGeometry::cubic(inp, out, 1, stride, 0), rng));
        Self { conv1, relu1: Relu::new(), conv2, downsample, relu: Relu::new() }
    }

    fn forward(&mut self, x: Tensor<S>, ctx: &Ctx) -> Result<Tensor<S>> {
        let h = self.conv1.forward(&x, ctx)?;
        let h = self.relu1.forward(h, ctx);
        let mut h = self.conv2.forward(&h, ctx)?;
        let identity = match &mut self.downsample {
            Some(d) => d.forward(&x, ctx)?,
            None => x,
        };
        h.add_assign(&identity);
        Ok(self.relu.forward(h, ctx))
    }

    fn backward(&mut self, grad: Tensor<S>) -> Result<Tensor<S>> {
        let g = self.relu.backward(grad)?;
        let skip = match &mut self.downsample {
            Some(d) => d.backward(g.clone())?.expect("downsample propagates"),
            None => g.clone(),
        };
        let g = self.conv2.backward(g)?.expect("inner conv propagates");
        let g = self.relu1.backward(g)?;
        let mut dx = self.conv1.backward(g)?.expect("inner conv propagates");
        dx.add_assign(&skip);
        Ok(dx)
    }
}

impl<S: Scalar> Module<S> for BasicBlock<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.conv1.visit_params(&join_name(prefix, "conv1"), f);
        self.conv2.visit_params(&join_name(prefix, "conv2"), f);
        if let Some(d) = &mut self.downsample {
            d.visit_params(&join_name(prefix, "downsample"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.conv1.visit_buffers(&join_name(prefix, "conv1"), f);
        self.conv2.visit_buffers(&join_name(prefix, "conv2"), f);
        if let Some(d) = &mut self.downsample {
            d.visit_buffers(&join_name(prefix, "downsample"), f);
        }
    }
}

/// Convolution whose activations and gradients feed Grad-CAM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookLayer {
    Adapter,
    Layer1,
    Layer2,
    Layer3,
    /// Last convolution of the last residual stage (the deepest one).
    #[default]
    Layer4,
}

pub struct IceNet<S> {
    config: ModelConfig,
    adapter: ConvBn<S>,
    adapter_drop: Dropout3d<S>,
    stages: Vec<[BasicBlock<S>; 2]>,
    pool: GlobalAvgPool,
    head_drop: Dropout<S>,
    fc: Linear<S>,
    hook: Option<HookLayer>,
}

/// Builds the network with freshly initialized weights (seeded), then loads
/// the backbone stages from `pretrained_weights_path` if one is configured.
pub fn build_model<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<IceNet<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapter = ConvBn::new(cfg.adapter_geometry(), &mut rng);
    adapter.conv.input_grad = false;
    let widths = cfg.stage_widths();
    let mut inp = cfg.adapter_channels();
    let mut stages = Vec::with_capacity(4);
    for (i, &w) in widths.iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        let first = BasicBlock::new(inp, w, stride, &mut rng);
        let second = BasicBlock::new(w, w, 1, &mut rng);
        stages.push([first, second]);
        inp = w;
    }
    let fc = Linear::new(inp, cfg.n_classes, &mut rng);
    let mut model = IceNet {
        config: cfg.clone(),
        adapter,
        adapter_drop: Dropout3d::new(cfg.adapter_dropout),
        stages,
        pool: GlobalAvgPool::new(),
        head_drop: Dropout::new(cfg.head_dropout),
        fc,
        hook: None,
    };
    if let Some(path) = &cfg.pretrained_weights_path {
        model.load_backbone(path)?;
    }
    Ok(model)
}

impl<S: Scalar> IceNet<S> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Shapes of the adapter and every stage output for a `(B, 1, T, H, W)`
    /// input, checked before any compute happens.
    pub fn feature_shapes(&self, input: &[usize]) -> Result<Vec<[usize; 4]>> {
        if input.len() != 5 || input[1] != 1 {
            return Err(Error::InvalidArgument(format!("expected a (B, 1, T, H, W) batch, got {input:?}")));
        }
        let mut dims = [input[2], input[3], input[4]];
        let mut out = Vec::with_capacity(5);
        let collapse = |e: vol3d::Error| Error::InvalidArgument(format!("input {input:?} collapses: {e}"));
        dims = self.adapter.conv.geometry.output_dims(dims).map_err(collapse)?;
        out.push([self.config.adapter_channels(), dims[0], dims[1], dims[2]]);
        for stage in &self.stages {
            for block in stage {
                dims = block.conv1.conv.geometry.output_dims(dims).map_err(collapse)?;
            }
            let c = stage[1].conv2.conv.geometry.out_channels;
            out.push([c, dims[0], dims[1], dims[2]]);
        }
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("input {input:?} collapses to {dims:?}")));
        }
        Ok(out)
    }

    /// Runs the adapter block alone (convolution, normalization, dropout).
    pub fn forward_adapter(&mut self, x: &Tensor<S>, ctx: &mut Ctx) -> Result<Tensor<S>> {
        let h = self.adapter.forward(x, ctx)?;
        Ok(self.adapter_drop.forward(h, ctx)?)
    }

    /// `(B, 1, T, H, W) -> (B, n_classes)` logits.
    pub fn forward(&mut self, x: &Tensor<S>, ctx: &mut Ctx) -> Result<Tensor<S>> {
        self.feature_shapes(x.shape())?;
        let mut h = self.forward_adapter(x, ctx)?;
        for stage in &mut self.stages {
            for block in stage.iter_mut() {
                h = block.forward(h, ctx)?;
            }
        }
        let pooled = self.pool.forward(&h, ctx)?;
        let pooled = self.head_drop.forward(pooled, ctx)?;
        self.fc.forward(&pooled, ctx).map_err(Error::from)
    }

    /// Back-propagates the gradient of the loss w.r.t. the logits of the last
    /// `forward` (which must have run with `keep_graph`), accumulating
    /// parameter gradients.
    pub fn backward(&mut self, grad_logits: &Tensor<S>) -> Result<()> {
        let g = self.fc.backward(grad_logits)?;
        let g = self.head_drop.backward(g)?;
        let mut g = self.pool.backward(&g)?;
        for stage in self.stages.iter_mut().rev() {
            for block in stage.iter_mut().rev() {
                g = block.backward(g)?;
            }
        }
        let g = self.adapter_drop.backward(g)?;
        self.adapter.backward(g)?;
        Ok(())
    }

    fn hook_conv(&mut self, layer: HookLayer) -> &mut Conv3d<S> {
        match layer {
            HookLayer::Adapter => &mut self.adapter.conv,
            HookLayer::Layer1 => &mut self.stages[0][1].conv2.conv,
            HookLayer::Layer2 => &mut self.stages[1][1].conv2.conv,
            HookLayer::Layer3 => &mut self.stages[2][1].conv2.conv,
            HookLayer::Layer4 => &mut self.stages[3][1].conv2.conv,
        }
    }

    /// Installs (or with `None` removes) the activation/gradient hook.
    pub fn set_hook(&mut self, layer: Option<HookLayer>) {
        if let Some(old) = self.hook.take() {
            let conv = self.hook_conv(old);
            conv.capture = false;
            conv.captured_output = None;
            conv.captured_grad = None;
        }
        if let Some(layer) = layer {
            self.hook_conv(layer).capture = true;
            self.hook = Some(layer);
        }
    }

    /// Activations and their gradients captured at the hooked convolution.
    pub fn take_hooked(&mut self) -> Option<(Tensor<S>, Tensor<S>)> {
        let layer = self.hook?;
        let conv = self.hook_conv(layer);
        let a = conv.captured_output.take()?;
        let g = conv.captured_grad.take()?;
        Some((a, g))
    }

    /// Direct access to the head (used to construct degenerate models in
    /// tests and diagnostics).
    pub fn head_mut(&mut self) -> &mut Linear<S> {
        &mut self.fc
    }

    pub fn adapter_weight_mut(&mut self) -> &mut Param<S> {
        &mut self.adapter.conv.weight
    }

    /// Every named parameter and buffer, in a fixed order.
    pub fn named_tensors(&mut self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |n, p| out.push((n.to_string(), p.value.clone())));
        self.visit_buffers("", &mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    /// Overwrites named tensors; returns names that were not found or had
    /// the wrong shape.
    fn assign(&mut self, values: &HashMap<String, Tensor<S>>, filter: impl Fn(&str) -> bool) -> Vec<String> {
        let mut problems = Vec::new();
        let mut seen = 0usize;
        let mut put = |name: &str, dst: &mut Tensor<S>| {
            if !filter(name) {
                return;
            }
            match values.get(name) {
                Some(v) if v.shape() == dst.shape() => {
                    dst.data_mut().copy_from_slice(v.data());
                    seen += 1;
                }
                Some(v) => problems.push(format!("{name} (shape {:?}, expected {:?})", v.shape(), dst.shape())),
                None => problems.push(format!("{name} (missing)")),
            }
        };
        self.visit_params("", &mut |n, p| put(n, &mut p.value));
        self.visit_buffers("", &mut |n, t| put(n, t));
        problems
    }

    /// Loads the four residual stages from a safetensors file with
    /// torchvision names. The adapter and head stay freshly initialized.
    pub fn load_backbone(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let tensors = read_tensors::<S>(path, &bytes)?;
        let problems = self.assign(&tensors, |n| n.starts_with("layer"));
        if !problems.is_empty() {
            return Err(Error::checkpoint(path, format!("incompatible backbone weights: {}", problems.join(", "))));
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        Module::zero_grad(self);
    }

    pub fn param_count(&mut self) -> usize {
        Module::param_count(self)
    }
}

impl<S: Scalar> Module<S> for IceNet<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.adapter.visit_params(&join_name(prefix, "adapter"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let name = join_name(prefix, &format!("layer{}", i + 1));
            for (j, block) in stage.iter_mut().enumerate() {
                block.visit_params(&join_name(&name, &j.to_string()), f);
            }
        }
        self.fc.visit_params(&join_name(prefix, "fc"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.adapter.visit_buffers(&join_name(prefix, "adapter"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let name = join_name(prefix, &format!("layer{}", i + 1));
            for (j, block) in stage.iter_mut().enumerate() {
                block.visit_buffers(&join_name(&name, &j.to_string()), f);
            }
        }
    }
}

/// State of the training random streams: every stream is derived from the
/// run seed and the epoch, so these two numbers are enough to continue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    /// 1-based epoch the weights come from.
    pub epoch: usize,
    /// Sample-level validation accuracy in percent.
    pub val_accuracy: f64,
    pub rng_state: RngState,
}

const META_KEY: &str = "ice_localizer.meta";
const DIGEST_KEY: &str = "ice_localizer.sha256";

fn dtype_of<S: Scalar>() -> Dtype {
    if std::mem::size_of::<S>() == 4 {
        Dtype::F32
    } else {
        Dtype::F64
    }
}

fn to_bytes<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    if std::mem::size_of::<S>() == 4 {
        t.data().iter().flat_map(|v| (v.as_f64() as f32).to_le_bytes()).collect()
    } else {
        t.data().iter().flat_map(|v| v.as_f64().to_le_bytes()).collect()
    }
}

fn digest<'a>(items: impl Iterator<Item = (&'a str, &'a [usize], &'a [u8])>) -> String {
    let mut h = Sha256::new();
    for (name, shape, data) in items {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for d in shape {
            h.update((*d as u64).to_le_bytes());
        }
        h.update((data.len() as u64).to_le_bytes());
        h.update(data);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn read_tensors<S: Scalar>(path: &Path, bytes: &[u8]) -> Result<HashMap<String, Tensor<S>>> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::checkpoint(path, e.to_string()))?;
    let mut out = HashMap::new();
    for (name, view) in st.tensors() {
        let data: Vec<S> = match view.dtype() {
            Dtype::F32 => {
                view.data().chunks_exact(4).map(|c| S::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect()
            }
            Dtype::F64 => view.data().chunks_exact(8).map(|c| S::lit(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
            other => return Err(Error::checkpoint(path, format!("tensor {name} has unsupported dtype {other:?}"))),
        };
        let t = Tensor::from_vec(view.shape(), data).map_err(|e| Error::checkpoint(path, e.to_string()))?;
        out.insert(name, t);
    }
    Ok(out)
}

/// Writes every parameter and buffer plus JSON metadata and a SHA-256 over
/// the tensor contents.
pub fn save_checkpoint<S: Scalar>(model: &mut IceNet<S>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let named: BTreeMap<String, (Vec<usize>, Vec<u8>)> =
        model.named_tensors().into_iter().map(|(n, t)| (n, (t.shape().to_vec(), to_bytes(&t)))).collect();
    let dtype = dtype_of::<S>();
    let views = named
        .iter()
        .map(|(n, (shape, data))| Ok((n.clone(), TensorView::new(dtype, shape.clone(), data)?)))
        .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
        .map_err(|e| Error::checkpoint(path, e.to_string()))?;
    let sha = digest(named.iter().map(|(n, (s, d))| (n.as_str(), s.as_slice(), d.as_slice())));
    let meta_json = serde_json::to_string(meta).map_err(|e| Error::checkpoint(path, e.to_string()))?;
    let info = HashMap::from([(META_KEY.to_string(), meta_json), (DIGEST_KEY.to_string(), sha)]);
    let bytes = safetensors::serialize(views, Some(info)).map_err(|e| Error::checkpoint(path, e.to_string()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write then rename so an interrupted run never leaves a torn file.
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads only the metadata block of a checkpoint.
pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_meta(path, &bytes)
}

fn parse_meta(path: &Path, bytes: &[u8]) -> Result<CheckpointMeta> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::checkpoint(path, e.to_string()))?;
    let info = header.metadata().as_ref().ok_or_else(|| Error::checkpoint(path, "no metadata block"))?;
    let json = info.get(META_KEY).ok_or_else(|| Error::checkpoint(path, "no model metadata"))?;
    serde_json::from_str(json).map_err(|e| Error::checkpoint(path, format!("bad metadata: {e}")))
}

/// Rebuilds the model recorded in a checkpoint after verifying its digest.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(IceNet<S>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let meta = parse_meta(path, &bytes)?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::checkpoint(path, e.to_string()))?;
    let expected = header.metadata().as_ref().and_then(|m| m.get(DIGEST_KEY)).cloned();
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::checkpoint(path, e.to_string()))?;
    let mut views = st.tensors();
    views.sort_by(|a, b| a.0.cmp(&b.0));
    let actual = digest(views.iter().map(|(n, v)| (n.as_str(), v.shape(), v.data())));
    if expected.as_deref() != Some(actual.as_str()) {
        return Err(Error::checkpoint(path, "integrity check failed (content digest mismatch)"));
    }
    let tensors = read_tensors::<S>(path, &bytes)?;
    let mut config = meta.config.clone();
    // The weights come from the checkpoint, not from the original file.
    config.pretrained_weights_path = None;
    let mut model = build_model::<S>(&config, 0)?;
    model.config = meta.config.clone();
    let problems = model.assign(&tensors, |_| true);
    if !problems.is_empty() {
        return Err(Error::checkpoint(path, format!("tensors do not match the recorded config: {}", problems.join(", "))));
    }
    Ok((model, meta))
}

/// Like [`load_checkpoint`], but insists that the checkpoint was produced
/// for `expected`.
pub fn load_checkpoint_for<S: Scalar>(path: &Path, expected: &ModelConfig) -> Result<(IceNet<S>, CheckpointMeta)> {
    let meta = read_checkpoint_meta(path)?;
    if !same_architecture(&meta.config, expected) {
        return Err(Error::checkpoint(
            path,
            format!("model config mismatch: checkpoint has {:?}, expected {:?}", meta.config, expected),
        ));
    }
    load_checkpoint(path)
}

fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    ModelConfig { pretrained_weights_path: None, ..a.clone() } == ModelConfig { pretrained_weights_path: None, ..b.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(shape: &[usize], seed: u64) -> Tensor<f32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn default_adapter_shape() {
        let mut m = build_model::<f32>(&ModelConfig::default(), 0).unwrap();
        assert_eq!(m.adapter_weight_mut().value.shape(), &[64, 1, 9, 7, 7]);
        assert_eq!(m.head_mut().out_features(), 3);
    }

    #[test]
    fn stage_shapes_for_desk_input() {
        let m = build_model::<f32>(&ModelConfig::reduced(4), 0).unwrap();
        let shapes = m.feature_shapes(&[8, 1, 32, 64, 64]).unwrap();
        assert_eq!(
            shapes,
            vec![[16, 26, 22, 22], [16, 26, 22, 22], [32, 13, 11, 11], [64, 7, 6, 6], [128, 4, 3, 3]]
        );
    }

    #[test]
    fn clinical_resolution_shapes() {
        // (32 + 2 - 9) + 1 = 26 frames; (138 + 6 - 7) / 3 + 1 = 46; (189 + 6 - 7) / 3 + 1 = 63.
        let m = build_model::<f32>(&ModelConfig::default(), 0).unwrap();
        let shapes = m.feature_shapes(&[8, 1, 32, 138, 189]).unwrap();
        assert_eq!(shapes[0], [64, 26, 46, 63]);
        assert_eq!(shapes[4], [512, 4, 6, 8]);
    }

    #[test]
    fn collapsing_input_is_rejected_before_compute() {
        let mut m = build_model::<f32>(&ModelConfig::reduced(8), 0).unwrap();
        let x = Tensor::zeros(&[1, 1, 4, 16, 16]);
        assert!(matches!(m.forward(&x, &mut Ctx::eval()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn eval_rows_are_identical_for_identical_inputs() {
        let mut m = build_model::<f32>(&ModelConfig::reduced(8), 3).unwrap();
        let one = batch(&[1, 1, 32, 32, 32], 1);
        let two = Tensor::stack(&[&one.clone().reshape(&[1, 32, 32, 32]).unwrap(), &one.reshape(&[1, 32, 32, 32]).unwrap()])
            .unwrap();
        let y = m.forward(&two, &mut Ctx::eval()).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.outer(0), y.outer(1));
        assert!(y.all_finite());
    }

    #[test]
    fn names_follow_torchvision() {
        let mut m = build_model::<f32>(&ModelConfig::reduced(4), 0).unwrap();
        let names: Vec<String> = m.named_tensors().into_iter().map(|(n, _)| n).collect();
        for expected in [
            "adapter.0.weight",
            "adapter.1.running_mean",
            "layer1.0.conv1.0.weight",
            "layer1.1.conv2.1.bias",
            "layer2.0.downsample.0.weight",
            "layer2.0.downsample.1.num_batches_tracked",
            "layer4.1.conv2.0.weight",
            "fc.weight",
            "fc.bias",
        ] {
            assert!(names.iter().any(|n| n == expected), "{expected} missing");
        }
        assert!(!names.iter().any(|n| n.starts_with("layer1.0.downsample")));
    }

    #[test]
    fn parameter_counts_are_stable() {
        // torchvision's r3d_18 has 33,137,920 parameters outside its stem
        // and head. The adapter adds 64*1*9*7*7 weights plus 2*64
        // normalization affines, the head 512*3 + 3.
        let full = build_model::<f32>(&ModelConfig::default(), 0).unwrap().param_count();
        assert_eq!(full, 33_137_920 + 64 * 9 * 7 * 7 + 128 + 512 * 3 + 3);
        assert_eq!(build_model::<f32>(&ModelConfig::reduced(4), 0).unwrap().param_count(), 2_080_371);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.safetensors");
        let cfg = ModelConfig::reduced(8);
        let mut m = build_model::<f32>(&cfg, 5).unwrap();
        // Move the running statistics away from their initial values.
        let x = batch(&[2, 1, 32, 32, 32], 2);
        m.forward(&x, &mut Ctx::train(1)).unwrap();
        let meta = CheckpointMeta { config: cfg.clone(), epoch: 7, val_accuracy: 83.25, rng_state: RngState { seed: 9, next_epoch: 8 } };
        save_checkpoint(&mut m, &meta, &path).unwrap();
        let (mut back, meta_back) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(meta_back, meta);
        let a = m.forward(&x, &mut Ctx::eval()).unwrap();
        let b = back.forward(&x, &mut Ctx::eval()).unwrap();
        assert_eq!(a.max_abs_diff(&b), 0.0);

        assert!(load_checkpoint_for::<f32>(&path, &ModelConfig::reduced(4)).is_err());
        assert!(load_checkpoint_for::<f32>(&path, &cfg).is_ok());
    }

    #[test]
    fn corrupted_checkpoint_fails_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.safetensors");
        let cfg = ModelConfig::reduced(8);
        let mut m = build_model::<f32>(&cfg, 5).unwrap();
        let meta = CheckpointMeta { config: cfg, epoch: 1, val_accuracy: 0.0, rng_state: RngState { seed: 0, next_epoch: 1 } };
        save_checkpoint(&mut m, &meta, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 5] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint::<f32>(&path).err().expect("must fail");
        assert!(err.to_string().contains("integrity"), "{err}");
    }

    #[test]
    fn backbone_loading_reports_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backbone.safetensors");
        let mut donor = build_model::<f32>(&ModelConfig::reduced(8), 1).unwrap();
        let meta = CheckpointMeta {
            config: ModelConfig::reduced(8),
            epoch: 0,
            val_accuracy: 0.0,
            rng_state: RngState { seed: 0, next_epoch: 0 },
        };
        save_checkpoint(&mut donor, &meta, &path).unwrap();

        let cfg = ModelConfig { pretrained_weights_path: Some(path.clone()), ..ModelConfig::reduced(8) };
        let mut m = build_model::<f32>(&cfg, 2).unwrap();
        let donor_t: HashMap<_, _> = donor.named_tensors().into_iter().collect();
        for (name, t) in m.named_tensors() {
            let same = donor_t[&name] == t;
            if name.starts_with("layer") {
                assert!(same, "{name} should be loaded");
            } else if name == "adapter.0.weight" || name == "fc.weight" {
                assert!(!same, "{name} should stay freshly initialized");
            }
        }

        let wrong = ModelConfig { pretrained_weights_path: Some(path), ..ModelConfig::reduced(4) };
        let err = build_model::<f32>(&wrong, 2).err().expect("widths differ");
        assert!(err.to_string().contains("layer1.0.conv1.0.weight"), "{err}");
    }
}
