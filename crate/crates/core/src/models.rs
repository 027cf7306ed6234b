//! Differentiable scorers and a small zoo with known ground truth.
//!
//! Models are layer lists replayed on a [`Graph`]. A model may declare a split
//! index, turning it into a head (image to activations) and a tail
//! (activations to score) for channel attribution. On disk a model is a JSON
//! document whose weights are FT1 files referenced by relative path.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Padding, Var};
use crate::tensor::Tensor;

/// A scalar-valued differentiable function of an image.
pub trait ScorerModel: Send + Sync {
    /// Expected input extents `[C, H, W]`.
    fn input_shape(&self) -> [usize; 3];

    /// Records the forward pass; returns a one-element score.
    fn forward(&self, g: &mut Graph, image: Var) -> Result<Var>;

    fn split(&self) -> Option<&dyn SplitModel> {
        None
    }

    fn score(&self, image: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let s = self.forward(&mut g, x)?;
        Ok(g.value(s).item())
    }
}

/// A model cut at an intermediate layer.
pub trait SplitModel: Send + Sync {
    /// Extents `[C, H, W]` of the images the head accepts.
    fn image_shape(&self) -> [usize; 3];
    /// Extents `[K, H, W]` of the intermediate activations.
    fn activation_shape(&self) -> [usize; 3];
    fn head(&self, g: &mut Graph, image: Var) -> Result<Var>;
    fn tail(&self, g: &mut Graph, activations: Var) -> Result<Var>;

    fn activations(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let a = self.head(&mut g, x)?;
        Ok(g.value(a).clone())
    }

    fn tail_score(&self, activations: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let a = g.constant(activations.clone());
        let s = self.tail(&mut g, a)?;
        Ok(g.value(s).item())
    }
}

/// Axis-aligned pixel rectangle `[y0, y0 + height) x [x0, x0 + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(y0: usize, x0: usize, height: usize, width: usize) -> Self {
        Rect { y0, x0, height, width }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y0 + self.height).contains(&y) && (self.x0..self.x0 + self.width).contains(&x)
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.area() > 0 && self.y0 + self.height <= h && self.x0 + self.width <= w
    }

    /// `[h, w]` mask with ones inside the rectangle.
    pub fn indicator(&self, h: usize, w: usize) -> Tensor {
        let data = (0..h * w)
            .map(|i| if self.contains(i / w, i % w) { 1.0 } else { 0.0 })
            .collect();
        Tensor::from_parts(vec![h, w], data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// Same-size convolution; `weight` is `[O, C, kh, kw]`, `bias` is `[O]`.
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        padding: Padding,
    },
    Relu,
    /// Non-overlapping `size x size` average pooling.
    MeanPool {
        size: usize,
    },
    /// Dense layer on the flattened input; `weight` is `[O, I]`, `bias` is `[O]`.
    Linear {
        weight: Tensor,
        bias: Tensor,
    },
    /// `weight` times the mean of the input inside `rect`, over all channels.
    PlantedBox {
        rect: Rect,
        weight: f64,
    },
    /// Sum over `channels` of the spatial mean of that channel.
    PlantedChannels {
        channels: Vec<usize>,
    },
}

impl Layer {
    fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::MeanPool { .. } => "mean_pool",
            Layer::Linear { .. } => "linear",
            Layer::PlantedBox { .. } => "planted_box",
            Layer::PlantedChannels { .. } => "planted_channels",
        }
    }

    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        let chw = || -> std::result::Result<(usize, usize, usize), String> {
            match *input {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(format!("{} needs a [C, H, W] input, got {input:?}", self.kind())),
            }
        };
        match self {
            Layer::Conv2d { weight, bias, .. } => {
                let (c, h, w) = chw()?;
                let &[o, wc, kh, kw] = weight.shape() else {
                    return Err(format!(
                        "conv2d weight must be [O, C, kh, kw], got {:?}",
                        weight.shape()
                    ));
                };
                if wc != c {
                    return Err(format!("conv2d expects {wc} input channels, got {c}"));
                }
                if kh % 2 == 0 || kw % 2 == 0 || kh > 2 * h - 1 || kw > 2 * w - 1 {
                    return Err(format!("conv2d kernel {kh}x{kw} unusable on {h}x{w}"));
                }
                if bias.shape() != [o] {
                    return Err(format!("conv2d bias must be [{o}], got {:?}", bias.shape()));
                }
                Ok(vec![o, h, w])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MeanPool { size } => {
                let (c, h, w) = chw()?;
                if *size == 0 || h % size != 0 || w % size != 0 {
                    return Err(format!("mean_pool size {size} does not tile {h}x{w}"));
                }
                Ok(vec![c, h / size, w / size])
            }
            Layer::Linear { weight, bias } => {
                let &[o, i] = weight.shape() else {
                    return Err(format!("linear weight must be [O, I], got {:?}", weight.shape()));
                };
                let n: usize = input.iter().product();
                if i != n {
                    return Err(format!("linear expects {i} inputs, got {n}"));
                }
                if bias.shape() != [o] {
                    return Err(format!("linear bias must be [{o}], got {:?}", bias.shape()));
                }
                Ok(vec![o])
            }
            Layer::PlantedBox { rect, weight } => {
                let (_, h, w) = chw()?;
                if !rect.fits(h, w) {
                    return Err(format!("box {rect:?} empty or outside {h}x{w}"));
                }
                if !weight.is_finite() {
                    return Err("planted box weight must be finite".into());
                }
                Ok(vec![1])
            }
            Layer::PlantedChannels { channels } => {
                let (k, _, _) = chw()?;
                if channels.is_empty() {
                    return Err("planted channel set is empty".into());
                }
                if let Some(&c) = channels.iter().find(|&&c| c >= k) {
                    return Err(format!("planted channel {c} out of range for {k} channels"));
                }
                Ok(vec![1])
            }
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Layer::Conv2d { weight, bias, padding } => {
                let k = g.constant(weight.clone());
                let y = g.conv2d(x, k, *padding)?;
                let b = g.constant(bias.clone());
                g.channel_bias(y, b)
            }
            Layer::Relu => g.relu(x),
            Layer::MeanPool { size } => g.avg_pool(x, *size),
            Layer::Linear { weight, bias } => {
                let w = g.constant(weight.clone());
                let y = g.matvec(w, x)?;
                let b = g.constant(bias.clone());
                g.add(y, b)
            }
            Layer::PlantedBox { rect, weight } => {
                let shape = g.value(x).shape().to_vec();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let scale = weight / (c * rect.area()) as f64;
                let plane = rect.indicator(h, w).map(|v| v * scale);
                let mut data = Vec::with_capacity(c * h * w);
                for _ in 0..c {
                    data.extend_from_slice(plane.data());
                }
                let sel = g.constant(Tensor::from_parts(shape, data));
                let y = g.mul(x, sel)?;
                g.sum(y)
            }
            Layer::PlantedChannels { channels } => {
                let shape = g.value(x).shape().to_vec();
                let mut sel = vec![0.0; shape[0]];
                let plane = (shape[1] * shape[2]) as f64;
                for &c in channels {
                    sel[c] = 1.0 / plane;
                }
                let sel = g.constant(Tensor::from_vec(sel));
                let y = g.channel_scale(x, sel)?;
                g.sum(y)
            }
        }
    }
}

/// A layer list with an optional split point.
#[derive(Clone, Debug, PartialEq)]
pub struct SequentialModel {
    input: [usize; 3],
    layers: Vec<Layer>,
    split: Option<usize>,
    activation: Option<[usize; 3]>,
}

impl SequentialModel {
    /// Validates that layer shapes chain from `input` to a single score and
    /// that the split, if any, falls on a `[K, H, W]` activation.
    pub fn new(input: [usize; 3], layers: Vec<Layer>, split: Option<usize>) -> Result<Self> {
        if input.contains(&0) {
            return Err(Error::invalid(format!("model input {input:?} has a zero extent")));
        }
        if layers.is_empty() {
            return Err(Error::invalid("model has no layers"));
        }
        let mut shape = input.to_vec();
        let mut activation = None;
        for (index, layer) in layers.iter().enumerate() {
            if split == Some(index) {
                match *shape {
                    [k, h, w] => activation = Some([k, h, w]),
                    _ => {
                        return Err(Error::Layer {
                            index,
                            message: format!("split needs [K, H, W] activations, got {shape:?}"),
                        })
                    }
                }
            }
            shape = layer
                .output_shape(&shape)
                .map_err(|message| Error::Layer { index, message })?;
        }
        if shape != [1] {
            return Err(Error::Layer {
                index: layers.len() - 1,
                message: format!("model must end in a single score, got {shape:?}"),
            });
        }
        if let Some(s) = split {
            if s == 0 || s >= layers.len() {
                return Err(Error::invalid(format!(
                    "split index {s} must lie in 1..{}",
                    layers.len()
                )));
            }
        }
        Ok(SequentialModel {
            input,
            layers,
            split,
            activation,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn split_index(&self) -> Option<usize> {
        self.split
    }

    fn check_input(&self, g: &Graph, image: Var) -> Result<()> {
        if g.value(image).shape() != self.input {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: self.input.to_vec(),
                rhs: g.value(image).shape().to_vec(),
            });
        }
        Ok(())
    }

    fn run(&self, g: &mut Graph, mut x: Var, layers: &[Layer]) -> Result<Var> {
        for layer in layers {
            x = layer.forward(g, x)?;
        }
        Ok(x)
    }
}

impl ScorerModel for SequentialModel {
    fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    fn forward(&self, g: &mut Graph, image: Var) -> Result<Var> {
        self.check_input(g, image)?;
        self.run(g, image, &self.layers)
    }

    fn split(&self) -> Option<&dyn SplitModel> {
        self.split.map(|_| self as &dyn SplitModel)
    }
}

impl SplitModel for SequentialModel {
    fn image_shape(&self) -> [usize; 3] {
        self.input
    }

    fn activation_shape(&self) -> [usize; 3] {
        self.activation.expect("split model")
    }

    fn head(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let s = self.split.ok_or_else(|| Error::invalid("model has no split point"))?;
        self.check_input(g, image)?;
        self.run(g, image, &self.layers[..s])
    }

    fn tail(&self, g: &mut Graph, activations: Var) -> Result<Var> {
        let s = self.split.ok_or_else(|| Error::invalid("model has no split point"))?;
        let expected = self.activation_shape();
        if g.value(activations).shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "model tail",
                lhs: expected.to_vec(),
                rhs: g.value(activations).shape().to_vec(),
            });
        }
        self.run(g, activations, &self.layers[s..])
    }
}

/// Layer entry of a model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        weight: PathBuf,
        bias: PathBuf,
        #[serde(default)]
        padding: Padding,
    },
    Relu,
    MeanPool {
        size: usize,
    },
    Linear {
        weight: PathBuf,
        bias: PathBuf,
    },
    PlantedBox {
        #[serde(flatten)]
        rect: Rect,
        weight: f64,
    },
    PlantedChannels {
        channels: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input extents `[C, H, W]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<usize>,
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SequentialModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: ModelSpec = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let blob = |p: &Path| Tensor::load_ft1(dir.join(p));
    let layers = spec
        .layers
        .iter()
        .map(|l| {
            Ok(match l {
                LayerSpec::Conv2d { weight, bias, padding } => Layer::Conv2d {
                    weight: blob(weight)?,
                    bias: blob(bias)?,
                    padding: *padding,
                },
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MeanPool { size } => Layer::MeanPool { size: *size },
                LayerSpec::Linear { weight, bias } => Layer::Linear {
                    weight: blob(weight)?,
                    bias: blob(bias)?,
                },
                LayerSpec::PlantedBox { rect, weight } => Layer::PlantedBox {
                    rect: *rect,
                    weight: *weight,
                },
                LayerSpec::PlantedChannels { channels } => Layer::PlantedChannels {
                    channels: channels.clone(),
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SequentialModel::new(spec.input, layers, spec.split)
}

/// Writes `path` and one FT1 file per weight tensor next to it, named after
/// the model file stem and layer index.
pub fn save_model(model: &SequentialModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or(Path::new("."));
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
    let write_blob = |i: usize, role: &str, t: &Tensor| -> Result<PathBuf> {
        let name = PathBuf::from(format!("{stem}.layer{i}.{role}.ft1"));
        t.save_ft1(dir.join(&name))?;
        Ok(name)
    };
    let layers = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            Ok(match l {
                Layer::Conv2d { weight, bias, padding } => LayerSpec::Conv2d {
                    weight: write_blob(i, "weight", weight)?,
                    bias: write_blob(i, "bias", bias)?,
                    padding: *padding,
                },
                Layer::Relu => LayerSpec::Relu,
                Layer::MeanPool { size } => LayerSpec::MeanPool { size: *size },
                Layer::Linear { weight, bias } => LayerSpec::Linear {
                    weight: write_blob(i, "weight", weight)?,
                    bias: write_blob(i, "bias", bias)?,
                },
                Layer::PlantedBox { rect, weight } => LayerSpec::PlantedBox {
                    rect: *rect,
                    weight: *weight,
                },
                Layer::PlantedChannels { channels } => LayerSpec::PlantedChannels {
                    channels: channels.clone(),
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = ModelSpec {
        input: model.input,
        layers,
        split: model.split,
    };
    let text = serde_json::to_string_pretty(&spec)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `weight` times the mean of the image inside `rect`.
pub fn planted_region_model(input: [usize; 3], rect: Rect, weight: f64) -> Result<SequentialModel> {
    if rect.area() == 0 {
        return Err(Error::invalid("planted box is empty"));
    }
    SequentialModel::new(input, vec![Layer::PlantedBox { rect, weight }], None)
}

/// Seeded `3x3` convolution with positive bias and a ReLU, split before a
/// tail that sums the spatial means of `channels`.
pub fn planted_channel_model(
    input: [usize; 3],
    width: usize,
    channels: &[usize],
    seed: u64,
) -> Result<SequentialModel> {
    if channels.is_empty() {
        return Err(Error::invalid("planted channel set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weight = Tensor::random(&[width, input[0], 3, 3], -0.3, 0.3, &mut rng);
    let bias = Tensor::random(&[width], 0.5, 1.0, &mut rng);
    SequentialModel::new(
        input,
        vec![
            Layer::Conv2d {
                weight,
                bias,
                padding: Padding::Replicate,
            },
            Layer::Relu,
            Layer::PlantedChannels {
                channels: channels.to_vec(),
            },
        ],
        Some(2),
    )
}

/// Seeded conv, ReLU, pooling and dense layers ending in one score; a generic
/// non-planted model for gradient checks and I/O tests.
pub fn seeded_conv_model(input: [usize; 3], width: usize, pool: usize, seed: u64) -> Result<SequentialModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = input;
    if pool == 0 || h % pool != 0 || w % pool != 0 {
        return Err(Error::invalid(format!("pool {pool} does not tile {h}x{w}")));
    }
    let features = width * (h / pool) * (w / pool);
    SequentialModel::new(
        input,
        vec![
            Layer::Conv2d {
                weight: Tensor::random(&[width, c, 3, 3], -0.5, 0.5, &mut rng),
                bias: Tensor::random(&[width], -0.1, 0.1, &mut rng),
                padding: Padding::Zero,
            },
            Layer::Relu,
            Layer::MeanPool { size: pool },
            Layer::Linear {
                weight: Tensor::random(&[1, features], -1.0, 1.0, &mut rng),
                bias: Tensor::zeros(&[1]),
            },
        ],
        Some(2),
    )
}
