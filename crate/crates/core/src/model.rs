//! Residual embedding CNNs whose head is global average pooling followed by a
//! bias-free linear map.
//!
//! Because the head has no additive term, the embedding can be computed either
//! as `W · GAP(A)` or as `GAP(W · A)` with `W` applied per feature location
//! ([`EmbeddingNetwork::fold_head`]). The point-specific saliency maps rely on
//! the second form.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::canonical;
use crate::corpus::Snippet;
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub const MODEL_MAGIC: &[u8; 4] = b"GSCM";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Fixed input standardization `(x - mean) / std` for binary pages (paper 1,
/// ink 0) with roughly ten percent ink. Without it the constant paper response
/// swamps the ink signal and every snippet embeds to almost the same direction.
pub const INPUT_MEAN: f32 = 0.9;
pub const INPUT_STD: f32 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthPreset {
    Tiny,
    Small,
    Medium,
}

impl DepthPreset {
    pub fn stages(self) -> usize {
        match self {
            DepthPreset::Tiny => 2,
            DepthPreset::Small => 3,
            DepthPreset::Medium => 4,
        }
    }

    pub const BLOCKS_PER_STAGE: usize = 2;

    /// Stride-2 stem plus one stride-2 block per stage.
    pub fn downsampling(self) -> usize {
        1 << (self.stages() + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth_preset: DepthPreset,
    pub base_channels: usize,
    pub embedding_dim: usize,
    pub input_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth_preset: DepthPreset::Tiny,
            base_channels: 8,
            embedding_dim: 16,
            input_size: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let down = self.depth_preset.downsampling();
        if self.embedding_dim < 2 {
            return Err(Error::Config(format!("embedding_dim must be at least 2, got {}", self.embedding_dim)));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.input_size == 0 || self.input_size % down != 0 {
            let valid: Vec<String> = (1..=4).map(|k| (k * down).to_string()).collect();
            return Err(Error::Config(format!(
                "input_size {} is not divisible by the {:?} downsampling factor {down}; valid sizes are multiples of {down} ({}, ...)",
                self.input_size,
                self.depth_preset,
                valid.join(", ")
            )));
        }
        Ok(())
    }
}

/// One convolution followed by a per-channel affine transform.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvUnit {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvUnit {
    fn param_shapes(&self) -> [Vec<usize>; 3] {
        [
            vec![self.out_channels, self.in_channels, self.kernel, self.kernel],
            vec![self.out_channels],
            vec![self.out_channels],
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// conv → affine → relu.
    Stem { conv: ConvUnit },
    /// relu(affine(conv(relu(affine(conv(x))))) + skip(x)); the outer relu is
    /// dropped when `relu_out` is false.
    Residual {
        conv1: ConvUnit,
        conv2: ConvUnit,
        projection: Option<ConvUnit>,
        relu_out: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Head {
    pub pool: String,
    pub bias: bool,
    pub activation: Option<String>,
    pub in_channels: usize,
    pub out_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub loss: Option<String>,
    pub dataset: Option<String>,
    pub fold: Option<usize>,
    pub epoch: Option<usize>,
}

/// Serialized verbatim (as canonical JSON) into model files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub config: ArchitectureConfig,
    pub layers: Vec<Layer>,
    pub head: Head,
    pub params: Vec<ParamSpec>,
    pub provenance: Provenance,
}

/// [`ModelConfig`] plus the sizes derived from it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub depth_preset: DepthPreset,
    pub base_channels: usize,
    pub embedding_dim: usize,
    pub input_size: usize,
    pub input_channels: usize,
    pub downsampling: usize,
    pub seed: u64,
}

impl Architecture {
    fn from_config(config: &ModelConfig) -> Self {
        let mut layers = Vec::new();
        let mut channels = config.base_channels;
        layers.push(Layer::Stem {
            conv: ConvUnit {
                in_channels: 1,
                out_channels: channels,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
        });
        for stage in 0..config.depth_preset.stages() {
            let out = config.base_channels << stage;
            for block in 0..DepthPreset::BLOCKS_PER_STAGE {
                let stride = if block == 0 { 2 } else { 1 };
                let projection = (stride != 1 || out != channels).then(|| ConvUnit {
                    in_channels: channels,
                    out_channels: out,
                    kernel: 1,
                    stride,
                    padding: 0,
                });
                layers.push(Layer::Residual {
                    conv1: ConvUnit {
                        in_channels: channels,
                        out_channels: out,
                        kernel: 3,
                        stride,
                        padding: 1,
                    },
                    conv2: ConvUnit {
                        in_channels: out,
                        out_channels: out,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                    },
                    projection,
                    relu_out: true,
                });
                channels = out;
            }
        }
        // The final block stays linear so pooled features are not confined to
        // the positive orthant, where every embedding starts out nearly parallel.
        if let Some(Layer::Residual { relu_out, .. }) = layers.last_mut() {
            *relu_out = false;
        }
        let head = Head {
            pool: "global_avg".into(),
            bias: false,
            activation: None,
            in_channels: channels,
            out_dim: config.embedding_dim,
        };
        let mut arch = Self {
            config: ArchitectureConfig {
                depth_preset: config.depth_preset,
                base_channels: config.base_channels,
                embedding_dim: config.embedding_dim,
                input_size: config.input_size,
                input_channels: 1,
                downsampling: config.depth_preset.downsampling(),
                seed: config.seed,
            },
            layers,
            head,
            params: vec![],
            provenance: Provenance::default(),
        };
        arch.params = arch.derive_params();
        arch
    }

    fn derive_params(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let mut push_unit = |prefix: String, unit: &ConvUnit| {
            for (suffix, shape) in ["kernel", "scale", "offset"].iter().zip(unit.param_shapes()) {
                out.push(ParamSpec {
                    name: format!("{prefix}.{suffix}"),
                    shape,
                });
            }
        };
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Stem { conv } => push_unit(format!("layer{i}.stem"), conv),
                Layer::Residual {
                    conv1,
                    conv2,
                    projection,
                    ..
                } => {
                    push_unit(format!("layer{i}.conv1"), conv1);
                    push_unit(format!("layer{i}.conv2"), conv2);
                    if let Some(p) = projection {
                        push_unit(format!("layer{i}.projection"), p);
                    }
                }
            }
        }
        out.push(ParamSpec {
            name: "head.weight".into(),
            shape: vec![self.head.out_dim, self.head.in_channels],
        });
        out
    }

    /// Rejects any architecture whose head is not GAP followed by a bias-free
    /// linear map with no activation, or whose parameter list disagrees with
    /// its layers.
    pub fn audit(&self) -> Result<()> {
        let h = &self.head;
        if h.pool != "global_avg" {
            return Err(Error::ModelFormat(format!("head pooling must be global_avg, found {:?}", h.pool)));
        }
        if h.bias {
            return Err(Error::ModelFormat("head linear map must not carry a bias".into()));
        }
        if let Some(a) = &h.activation {
            return Err(Error::ModelFormat(format!("head must not apply an activation, found {a:?}")));
        }
        if self.params.iter().any(|p| p.name.starts_with("head.") && p.name != "head.weight") {
            return Err(Error::ModelFormat("head carries parameters besides its weight matrix".into()));
        }
        let last_channels = match self.layers.last() {
            Some(Layer::Residual { conv2, .. }) => conv2.out_channels,
            Some(Layer::Stem { conv }) => conv.out_channels,
            None => return Err(Error::ModelFormat("architecture has no convolutional layers".into())),
        };
        if last_channels != h.in_channels {
            return Err(Error::ModelFormat(format!(
                "head expects {} channels, last convolution produces {last_channels}",
                h.in_channels
            )));
        }
        if self.params != self.derive_params() {
            return Err(Error::ModelFormat("parameter list does not match the layer descriptor".into()));
        }
        Ok(())
    }
}

/// Pre-GAP activations of the last convolutional layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField {
    /// `[C, H', W']`.
    pub values: Tensor,
    /// Input pixels per feature cell along each axis.
    pub stride_to_input: usize,
    pub source_id: String,
}

impl FeatureField {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub features: NodeId,
    pub embedding: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNetwork {
    pub architecture: Architecture,
    pub params: Vec<Tensor>,
}

fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()).expect("param shape")
}

impl EmbeddingNetwork {
    /// Deterministic fan-in-scaled uniform initialization from `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let architecture = Architecture::from_config(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = architecture
            .params
            .iter()
            .map(|spec| {
                if spec.name.ends_with(".scale") {
                    Tensor::full(&spec.shape, 1.0)
                } else if spec.name.ends_with(".offset") {
                    Tensor::zeros(&spec.shape)
                } else if spec.name == "head.weight" {
                    let fan_in = spec.shape[1] as f32;
                    init_uniform(&mut rng, &spec.shape, (3.0 / fan_in).sqrt())
                } else {
                    let fan_in: usize = spec.shape[1..].iter().product();
                    init_uniform(&mut rng, &spec.shape, (6.0 / fan_in as f32).sqrt())
                }
            })
            .collect();
        let net = Self { architecture, params };
        net.architecture.audit()?;
        Ok(net)
    }

    pub fn input_size(&self) -> usize {
        self.architecture.config.input_size
    }

    pub fn embedding_dim(&self) -> usize {
        self.architecture.head.out_dim
    }

    pub fn downsampling(&self) -> usize {
        self.architecture.config.downsampling
    }

    pub fn head_weights(&self) -> &Tensor {
        self.params.last().expect("head weight is the final parameter")
    }

    pub fn head_weights_mut(&mut self) -> &mut Tensor {
        self.params.last_mut().expect("head weight is the final parameter")
    }

    pub fn provenance(&self) -> &Provenance {
        &self.architecture.provenance
    }

    pub fn set_provenance(&mut self, provenance: Provenance) {
        self.architecture.provenance = provenance;
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Adds every parameter to `g` as a leaf, in descriptor order.
    pub fn attach(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| if trainable { g.variable(p.clone()) } else { g.constant(p.clone()) })
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.input_size();
        if shape != [1, s, s] {
            return Err(Error::Shape(format!("network expects a [1, {s}, {s}] input, got {shape:?}")));
        }
        Ok(())
    }

    /// Builds the forward pass into `g`; `params` must come from [`Self::attach`].
    pub fn forward(&self, g: &mut Graph, params: &[NodeId], input: NodeId) -> Result<ForwardNodes> {
        self.check_input(g.shape(input))?;
        let mut next = params.iter().copied();
        let mut take = || next.next().ok_or_else(|| Error::Shape("too few parameter nodes".into()));
        let unit = |g: &mut Graph, x: NodeId, u: &ConvUnit, take: &mut dyn FnMut() -> Result<NodeId>| {
            let (k, s, o) = (take()?, take()?, take()?);
            let c = g.conv2d(x, k, u.stride, u.padding)?;
            g.channel_affine(c, s, o)
        };
        let centered = g.add_scalar(input, -INPUT_MEAN)?;
        let mut x = g.scale(centered, 1.0 / INPUT_STD)?;
        for layer in &self.architecture.layers {
            x = match layer {
                Layer::Stem { conv } => {
                    let a = unit(g, x, conv, &mut take)?;
                    g.relu(a)?
                }
                Layer::Residual {
                    conv1,
                    conv2,
                    projection,
                    relu_out,
                } => {
                    let a1 = unit(g, x, conv1, &mut take)?;
                    let r1 = g.relu(a1)?;
                    let a2 = unit(g, r1, conv2, &mut take)?;
                    let skip = match projection {
                        Some(p) => unit(g, x, p, &mut take)?,
                        None => x,
                    };
                    let sum = g.add(a2, skip)?;
                    if *relu_out {
                        g.relu(sum)?
                    } else {
                        sum
                    }
                }
            };
        }
        let features = x;
        let head = take()?;
        let pooled = g.global_avg_pool(features)?;
        let embedding = g.linear_no_bias(pooled, head)?;
        Ok(ForwardNodes { features, embedding })
    }

    fn run(&self, pixels: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(pixels.shape())?;
        let mut g = Graph::new();
        let params = self.attach(&mut g, false);
        let input = g.constant(pixels.clone());
        let out = self.forward(&mut g, &params, input)?;
        Ok((g.value(out.features).clone(), g.value(out.embedding).clone()))
    }

    /// Unnormalized embedding `W · GAP(A)`.
    pub fn embed_pixels(&self, pixels: &Tensor) -> Result<Tensor> {
        Ok(self.run(pixels)?.1)
    }

    pub fn embed(&self, snippet: &Snippet) -> Result<Tensor> {
        self.embed_pixels(&snippet.pixels)
    }

    pub fn feature_maps_pixels(&self, pixels: &Tensor, source_id: &str) -> Result<FeatureField> {
        Ok(FeatureField {
            values: self.run(pixels)?.0,
            stride_to_input: self.downsampling(),
            source_id: source_id.to_string(),
        })
    }

    /// Feature field and embedding from a single forward pass.
    pub fn features_and_embedding(&self, pixels: &Tensor, source_id: &str) -> Result<(FeatureField, Tensor)> {
        let (values, embedding) = self.run(pixels)?;
        let field = FeatureField {
            values,
            stride_to_input: self.downsampling(),
            source_id: source_id.to_string(),
        };
        Ok((field, embedding))
    }

    pub fn feature_maps(&self, snippet: &Snippet) -> Result<FeatureField> {
        self.feature_maps_pixels(&snippet.pixels, &snippet.id().to_string())
    }

    /// Applies the head weights at every feature location:
    /// `out[d, i, j] = sum_c W[d, c] * field[c, i, j]`.
    pub fn fold_head(&self, field: &FeatureField) -> Result<FeatureField> {
        let w = self.head_weights();
        let [d, c] = *w.shape() else { unreachable!() };
        if field.channels() != c {
            return Err(Error::Shape(format!(
                "feature field has {} channels, head expects {c}",
                field.channels()
            )));
        }
        Ok(FeatureField {
            values: fold_with(w.data(), d, c, &field.values)?,
            stride_to_input: field.stride_to_input,
            source_id: field.source_id.clone(),
        })
    }

    /// Order-sensitive checksum over every parameter bit.
    pub fn checksum(&self) -> u64 {
        let bytes: Vec<u8> = self.params.iter().flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes())).collect();
        canonical::checksum(&bytes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.architecture.audit()?;
        let descriptor = canonical::to_string(&self.architecture)?;
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(descriptor.len() as u64).to_le_bytes());
        out.extend_from_slice(descriptor.as_bytes());
        for p in &self.params {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = canonical::checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::ModelFormat(m.to_string());
        if bytes.len() < 4 + 4 + 8 + 8 || &bytes[..4] != MODEL_MAGIC {
            return Err(bad("missing GSCM header"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if canonical::checksum(body) != stored {
            return Err(bad("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != MODEL_FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let desc_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let desc_end = 16usize.checked_add(desc_len).filter(|&e| e <= body.len()).ok_or_else(|| bad("truncated descriptor"))?;
        let architecture: Architecture = serde_json::from_slice(&body[16..desc_end])?;
        architecture.audit()?;
        let mut offset = desc_end;
        let mut params = Vec::with_capacity(architecture.params.len());
        for spec in &architecture.params {
            let n: usize = spec.shape.iter().product();
            let end = offset + 4 * n;
            if end > body.len() {
                return Err(bad(&format!("truncated parameter block {}", spec.name)));
            }
            let data = body[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(Tensor::new(spec.shape.clone(), data)?);
            offset = end;
        }
        if offset != body.len() {
            return Err(bad("trailing bytes after parameter blocks"));
        }
        Ok(Self { architecture, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn fold_with(w: &[f32], d: usize, c: usize, field: &Tensor) -> Result<Tensor> {
    let [_, h, wd] = *field.shape() else {
        return Err(Error::Shape(format!("feature field must be [C, H, W], got {:?}", field.shape())));
    };
    let area = h * wd;
    let f = field.data();
    let mut out = vec![0.0f32; d * area];
    for row in 0..d {
        let dst = &mut out[row * area..(row + 1) * area];
        for k in 0..c {
            let wk = w[row * c + k];
            for (o, &v) in dst.iter_mut().zip(&f[k * area..(k + 1) * area]) {
                *o += wk * v;
            }
        }
    }
    Tensor::new(vec![d, h, wd], out)
}

/// `GAP` of a folded field; equals the embedding up to float rounding.
pub fn pooled_embedding(folded: &FeatureField) -> Tensor {
    tensor::global_avg_pool_tensor(&folded.values).expect("folded field is [D, H, W]")
}
