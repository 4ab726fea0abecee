//! Classifier architectures, losses and accuracy.

use crate::array::{Array, DenseArray};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
}

/// Conv blocks (conv → relu → 2x2 average pool), then a dense head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CnnSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub blocks: Vec<ConvBlock>,
    /// Hidden dense widths between the flattened features and the output.
    pub hidden: Vec<usize>,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelSpec {
    /// Layer widths from input to classes; relu between layers.
    Mlp { widths: Vec<usize> },
    Cnn(CnnSpec),
}

impl ModelSpec {
    pub fn mlp(widths: &[usize]) -> Self {
        ModelSpec::Mlp {
            widths: widths.to_vec(),
        }
    }

    /// The desk-scale CNN: 8- and 16-channel 3x3 blocks, then `hidden`, then
    /// `classes`.
    pub fn small_cnn(
        in_channels: usize,
        side: usize,
        hidden: &[usize],
        classes: usize,
    ) -> Self {
        ModelSpec::Cnn(CnnSpec {
            in_channels,
            height: side,
            width: side,
            blocks: vec![
                ConvBlock {
                    out_channels: 8,
                    kernel: 3,
                },
                ConvBlock {
                    out_channels: 16,
                    kernel: 3,
                },
            ],
            hidden: hidden.to_vec(),
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        match self {
            ModelSpec::Mlp { widths } => *widths.last().unwrap_or(&0),
            ModelSpec::Cnn(c) => c.classes,
        }
    }

    /// Number of input features per example.
    pub fn input_len(&self) -> usize {
        match self {
            ModelSpec::Mlp { widths } => widths.first().copied().unwrap_or(0),
            ModelSpec::Cnn(c) => c.in_channels * c.height * c.width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::contract("ModelSpec", msg));
        match self {
            ModelSpec::Mlp { widths } => {
                if widths.len() < 2 {
                    return bad(format!("mlp needs input and output widths, got {widths:?}"));
                }
                if widths.contains(&0) {
                    return bad(format!("zero width in {widths:?}"));
                }
            }
            ModelSpec::Cnn(c) => {
                if c.in_channels == 0 || c.height == 0 || c.width == 0 {
                    return bad("empty input geometry".into());
                }
                let div = 1usize << c.blocks.len();
                if c.height % div != 0 || c.width % div != 0 {
                    return bad(format!(
                        "{}x{} input not divisible by {div} for {} pooling blocks",
                        c.height,
                        c.width,
                        c.blocks.len()
                    ));
                }
                for b in &c.blocks {
                    if b.out_channels == 0 || b.kernel % 2 == 0 {
                        return bad(format!("invalid conv block {b:?}"));
                    }
                }
                if c.hidden.contains(&0) {
                    return bad("zero hidden width".into());
                }
            }
        }
        if self.classes() < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes()));
        }
        Ok(())
    }

    /// `(name, shape, fan_in, fan_out)` for every parameter in traversal order.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize, usize)> {
        let mut out = Vec::new();
        let dense = |out: &mut Vec<_>, idx: usize, fan_in: usize, fan_out: usize| {
            out.push((format!("fc{idx}.weight"), vec![fan_in, fan_out], fan_in, fan_out));
            out.push((format!("fc{idx}.bias"), vec![fan_out], fan_in, fan_out));
        };
        match self {
            ModelSpec::Mlp { widths } => {
                for (i, pair) in widths.windows(2).enumerate() {
                    dense(&mut out, i, pair[0], pair[1]);
                }
            }
            ModelSpec::Cnn(c) => {
                let (mut ch, mut h, mut w) = (c.in_channels, c.height, c.width);
                for (i, b) in c.blocks.iter().enumerate() {
                    let k2 = b.kernel * b.kernel;
                    out.push((
                        format!("conv{i}.weight"),
                        vec![b.kernel, b.kernel, ch, b.out_channels],
                        k2 * ch,
                        k2 * b.out_channels,
                    ));
                    out.push((
                        format!("conv{i}.bias"),
                        vec![b.out_channels],
                        k2 * ch,
                        k2 * b.out_channels,
                    ));
                    ch = b.out_channels;
                    h /= 2;
                    w /= 2;
                }
                let mut width = ch * h * w;
                for (i, &hid) in c.hidden.iter().chain(std::iter::once(&c.classes)).enumerate() {
                    dense(&mut out, i, width, hid);
                    width = hid;
                }
            }
        }
        out
    }
}

/// Named parameters in a fixed traversal order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    entries: Vec<(String, Array<T>)>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn from_entries(entries: Vec<(String, Array<T>)>) -> Self {
        Self { entries }
    }

    pub fn zeros_like(spec: &ModelSpec) -> Self {
        Self {
            entries: spec
                .layout()
                .into_iter()
                .map(|(name, shape, _, _)| (name, Array::zeros(&shape)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn arrays(&self) -> impl Iterator<Item = &Array<T>> {
        self.entries.iter().map(|(_, a)| a)
    }

    pub fn arrays_mut(&mut self) -> impl Iterator<Item = &mut Array<T>> {
        self.entries.iter_mut().map(|(_, a)| a)
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(n, a)| (n.clone(), a.cast()))
                .collect(),
        }
    }

    /// Checks names and shapes against `spec`.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let layout = spec.layout();
        if layout.len() != self.entries.len() {
            return Err(Error::contract(
                "ModelParams",
                format!("expected {} entries, found {}", layout.len(), self.entries.len()),
            ));
        }
        for ((name, shape, _, _), (have_name, arr)) in layout.iter().zip(&self.entries) {
            if name != have_name || shape.as_slice() != arr.shape() {
                return Err(Error::contract(
                    "ModelParams",
                    format!("expected {name} {shape:?}, found {have_name} {:?}", arr.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Puts every parameter on `tape`, as leaves when `trainable` and as
    /// constants otherwise.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|(_, a)| {
                if trainable {
                    tape.leaf(a.clone())
                } else {
                    tape.constant(a.clone())
                }
            })
            .collect()
    }
}

/// Glorot-uniform weights, `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`;
/// zero biases.
pub fn init_params(spec: &ModelSpec, rng: &mut Rng) -> Result<ModelParams> {
    spec.validate()?;
    let entries = spec
        .layout()
        .into_iter()
        .map(|(name, shape, fan_in, fan_out)| {
            let arr = if name.ends_with(".bias") {
                DenseArray::zeros(&shape)
            } else {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
                DenseArray::from_parts(shape, data)
            };
            (name, arr)
        })
        .collect();
    Ok(ModelParams { entries })
}

/// Records the forward pass on `tape` and returns the `n x C` logits node.
///
/// `params` are the nodes returned by [`ModelParams::bind`]. Inputs may be
/// `[n, features]` or `[n, C, H, W]`.
pub fn forward<T: Scalar>(
    spec: &ModelSpec,
    tape: &mut Tape<T>,
    params: &[NodeId],
    x: NodeId,
) -> Result<NodeId> {
    let n = tape.shape(x).first().copied().unwrap_or(0);
    let features: usize = tape.shape(x).iter().skip(1).product();
    if features != spec.input_len() || tape.shape(x).len() < 2 {
        return Err(Error::contract(
            "forward",
            format!(
                "input {:?} does not match model input of {} features",
                tape.shape(x),
                spec.input_len()
            ),
        ));
    }
    let mut p = params.iter().copied();
    let mut pair = || match (p.next(), p.next()) {
        (Some(w), Some(b)) => Ok((w, b)),
        _ => Err(Error::contract("forward", "too few parameter nodes")),
    };
    let (mut h, dense_layers) = match spec {
        ModelSpec::Mlp { widths } => (tape.reshape(x, &[n, features])?, widths.len() - 1),
        ModelSpec::Cnn(c) => {
            let mut h = if c.in_channels == 1 {
                tape.reshape(x, &[n, c.height, c.width, 1])?
            } else {
                let nchw = tape.reshape(x, &[n, c.in_channels, c.height, c.width])?;
                tape.nchw_to_nhwc(nchw)?
            };
            for _ in &c.blocks {
                let (w, b) = pair()?;
                let z = tape.conv2d(h, w)?;
                let z = tape.add_bias(z, b)?;
                let a = tape.relu(z);
                h = tape.avg_pool2(a)?;
            }
            let flat: usize = tape.shape(h).iter().skip(1).product();
            (tape.reshape(h, &[n, flat])?, c.hidden.len() + 1)
        }
    };
    for layer in 0..dense_layers {
        let (w, b) = pair()?;
        let z = tape.matmul(h, w)?;
        h = tape.add_bias(z, b)?;
        if layer + 1 < dense_layers {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Logits without recording gradients.
pub fn predict<T: Scalar>(spec: &ModelSpec, params: &ModelParams<T>, x: &Array<T>) -> Result<Array<T>> {
    let mut tape = Tape::new();
    let nodes = params.bind(&mut tape, false);
    let xi = tape.constant(x.clone());
    let out = forward(spec, &mut tape, &nodes, xi)?;
    let logits = tape.value(out).clone();
    logits.ensure_finite("forward")?;
    Ok(logits)
}

fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Array<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::contract(
                "cross_entropy",
                format!("label {y} outside [0, {classes})"),
            ));
        }
        data[i * classes + y] = T::one();
    }
    Ok(Array::from_parts(vec![labels.len(), classes], data))
}

/// Cross-entropy of `n x C` logits. Returns `(per_example, mean)` nodes.
pub fn cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: NodeId,
    labels: &[usize],
) -> Result<(NodeId, NodeId)> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::contract(
            "cross_entropy",
            format!("logits {shape:?} for {} labels", labels.len()),
        ));
    }
    let onehot = tape.constant(one_hot(labels, shape[1])?);
    let logp = tape.log_softmax(logits)?;
    let picked = tape.mul(logp, onehot)?;
    let picked = tape.row_sum(picked)?;
    let per_example = tape.scale(picked, -T::one());
    let mean = tape.mean(per_example)?;
    Ok((per_example, mean))
}

/// Batch mean of `KL(softmax(p) || softmax(q))`.
pub fn kl_div<T: Scalar>(tape: &mut Tape<T>, logits_p: NodeId, logits_q: NodeId) -> Result<NodeId> {
    if tape.shape(logits_p) != tape.shape(logits_q) || tape.shape(logits_p).len() != 2 {
        return Err(Error::contract(
            "kl_div",
            format!("{:?} vs {:?}", tape.shape(logits_p), tape.shape(logits_q)),
        ));
    }
    let logp = tape.log_softmax(logits_p)?;
    let logq = tape.log_softmax(logits_q)?;
    let prob = tape.exp(logp);
    let diff = tape.sub(logp, logq)?;
    let terms = tape.mul(prob, diff)?;
    let rows = tape.row_sum(terms)?;
    tape.mean(rows)
}

/// Per-example cross-entropy values, computed without gradients.
pub fn cross_entropy_values<T: Scalar>(logits: &Array<T>, labels: &[usize]) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let (per, _) = cross_entropy(&mut tape, l, labels)?;
    Ok(tape.value(per).data().to_vec())
}

/// Value of [`kl_div`] without gradients.
pub fn kl_div_value<T: Scalar>(logits_p: &Array<T>, logits_q: &Array<T>) -> Result<T> {
    let mut tape = Tape::new();
    let p = tape.constant(logits_p.clone());
    let q = tape.constant(logits_q.clone());
    let kl = kl_div(&mut tape, p, q)?;
    Ok(tape.value(kl).data()[0])
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Array<T>) -> Vec<usize> {
    let c = logits.row_len().max(1);
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy<T: Scalar>(logits: &Array<T>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || logits.rows() != labels.len() {
        return Err(Error::contract(
            "accuracy",
            format!("{} logit rows for {} labels", logits.rows(), labels.len()),
        ));
    }
    Ok(correct_count(logits, labels) as f64 / labels.len() as f64)
}

pub(crate) fn correct_count<T: Scalar>(logits: &Array<T>, labels: &[usize]) -> usize {
    argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count()
}
