//! DCGAN generator/discriminator pair and its adversarial training loop.
//!
//! The generator decodes a uniform latent vector into a spectrogram image
//! through two stride-2 transposed convolutions; the discriminator mirrors
//! it with two stride-2 convolutions. The discriminator additionally
//! exposes its intermediate block activations, which the detector uses as
//! the feature map f(·) for feature-matching reconstruction scores.

use rand::Rng;

use crate::dsp::NormStats;
use crate::error::{Error, Result};
use crate::nncore::{AdamConfig, AdamState, Graph, NodeId, Tensor};
use crate::seed;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;
const PROB_CLAMP: f64 = 1e-7;
const LEAKY_SLOPE: f64 = 0.2;
const INIT_STD: f64 = 0.02;

/// Uniform prior over [−1, 1]^latent_dim.
#[derive(Debug, Clone, Copy)]
pub struct NoisePrior {
    pub latent_dim: usize,
}

impl NoisePrior {
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Tensor {
        Tensor::rand_uniform(&[n, self.latent_dim], -1.0, 1.0, rng)
    }
}

/// Whether batch normalization uses batch statistics (training) or the
/// stored running statistics (scoring/inversion).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub dense_w: Tensor,
    pub dense_b: Tensor,
    pub convt1_w: Tensor,
    pub bn1_gamma: Tensor,
    pub bn1_beta: Tensor,
    pub bn1_running_mean: Vec<f64>,
    pub bn1_running_var: Vec<f64>,
    pub convt2_w: Tensor,
    pub convt2_b: Tensor,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub bn2_gamma: Tensor,
    pub bn2_beta: Tensor,
    pub bn2_running_mean: Vec<f64>,
    pub bn2_running_var: Vec<f64>,
    pub dense_w: Tensor,
    pub dense_b: Tensor,
}

/// One persistable tensor: name, shape, and flattened values.
pub type ModelEntry = (&'static str, Vec<usize>, Vec<f64>);

/// The full model: both networks, the image geometry, and the
/// normalization statistics the spectrograms were produced with (attached
/// once fitted, persisted alongside the weights).
#[derive(Debug, Clone)]
pub struct GanModel {
    pub latent_dim: usize,
    pub image_shape: [usize; 3],
    pub base_channels: usize,
    /// Which discriminator block (0-based) provides f(·).
    pub feature_layer_index: usize,
    pub norm_stats: Option<NormStats>,
    pub g: Generator,
    pub d: Discriminator,
}

pub const G_PARAM_NAMES: [&str; 7] = [
    "g.dense.w",
    "g.dense.b",
    "g.convt1.w",
    "g.bn1.gamma",
    "g.bn1.beta",
    "g.convt2.w",
    "g.convt2.b",
];

pub const D_PARAM_NAMES: [&str; 7] = [
    "d.conv1.w",
    "d.conv1.b",
    "d.conv2.w",
    "d.bn2.gamma",
    "d.bn2.beta",
    "d.dense.w",
    "d.dense.b",
];

/// A generator forward pass: the output image node, any train-mode batch
/// norm nodes (in execution order), and the parameter leaves by name.
pub struct GenPass {
    pub out: NodeId,
    pub bn_nodes: Vec<NodeId>,
    pub params: Vec<(&'static str, NodeId)>,
}

/// A discriminator forward pass: probability output, flattened per-block
/// feature taps, batch norm nodes, and parameter leaves by name.
pub struct DiscPass {
    pub prob: NodeId,
    pub features: Vec<NodeId>,
    pub bn_nodes: Vec<NodeId>,
    pub params: Vec<(&'static str, NodeId)>,
}

impl GanModel {
    /// Initializes both networks with N(0, 0.02) weights (batch norm gains
    /// N(1, 0.02)), zero biases, and identity running statistics.
    pub fn build<R: Rng>(
        latent_dim: usize,
        image_shape: [usize; 3],
        base_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let [c, h, w] = image_shape;
        if latent_dim == 0 || base_channels == 0 || c == 0 {
            return Err(Error::InvalidShape(format!(
                "latent_dim {latent_dim}, base_channels {base_channels}, channels {c} must all be positive"
            )));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidShape(format!(
                "image height and width must be positive multiples of 4, got {h}x{w}"
            )));
        }
        let b = base_channels;
        let (h4, w4) = (h / 4, w / 4);
        let proj = 4 * b * h4 * w4;
        let flat = 2 * b * h4 * w4;

        let bn_gamma = |rng: &mut R, n: usize| Tensor::randn(&[n], INIT_STD, rng).map(|v| v + 1.0);
        let g = Generator {
            dense_w: Tensor::randn(&[latent_dim, proj], INIT_STD, rng),
            dense_b: Tensor::zeros(&[proj]),
            convt1_w: Tensor::randn(&[4 * b, 2 * b, 4, 4], INIT_STD, rng),
            bn1_gamma: bn_gamma(rng, 2 * b),
            bn1_beta: Tensor::zeros(&[2 * b]),
            bn1_running_mean: vec![0.0; 2 * b],
            bn1_running_var: vec![1.0; 2 * b],
            convt2_w: Tensor::randn(&[2 * b, c, 4, 4], INIT_STD, rng),
            convt2_b: Tensor::zeros(&[c]),
        };
        let d = Discriminator {
            conv1_w: Tensor::randn(&[b, c, 4, 4], INIT_STD, rng),
            conv1_b: Tensor::zeros(&[b]),
            conv2_w: Tensor::randn(&[2 * b, b, 4, 4], INIT_STD, rng),
            bn2_gamma: bn_gamma(rng, 2 * b),
            bn2_beta: Tensor::zeros(&[2 * b]),
            bn2_running_mean: vec![0.0; 2 * b],
            bn2_running_var: vec![1.0; 2 * b],
            dense_w: Tensor::randn(&[flat, 1], INIT_STD, rng),
            dense_b: Tensor::zeros(&[1]),
        };
        Ok(GanModel {
            latent_dim,
            image_shape,
            base_channels,
            feature_layer_index: 1,
            norm_stats: None,
            g,
            d,
        })
    }

    /// Length of the flattened f(·) vector for one image.
    pub fn feature_len(&self) -> usize {
        let [_, h, w] = self.image_shape;
        match self.feature_layer_index {
            0 => self.base_channels * (h / 2) * (w / 2),
            _ => 2 * self.base_channels * (h / 4) * (w / 4),
        }
    }

    fn insert_params(
        g: &mut Graph,
        names: &[&'static str],
        tensors: &[&Tensor],
        trainable: bool,
    ) -> Vec<(&'static str, NodeId)> {
        names
            .iter()
            .zip(tensors)
            .map(|(&n, &t)| (n, g.leaf(t.clone(), trainable)))
            .collect()
    }

    /// Builds the generator onto `graph` from the latent node `z` of shape
    /// [n, latent_dim].
    pub fn generator_pass(
        &self,
        graph: &mut Graph,
        z: NodeId,
        mode: Mode,
        trainable: bool,
    ) -> Result<GenPass> {
        let zs = graph.value(z).shape().to_vec();
        if zs.len() != 2 || zs[1] != self.latent_dim {
            return Err(Error::InvalidShape(format!(
                "latent batch must be [n, {}], got {zs:?}",
                self.latent_dim
            )));
        }
        let n = zs[0];
        let [c, h, w] = self.image_shape;
        let b = self.base_channels;
        let params = Self::insert_params(
            graph,
            &G_PARAM_NAMES,
            &[
                &self.g.dense_w,
                &self.g.dense_b,
                &self.g.convt1_w,
                &self.g.bn1_gamma,
                &self.g.bn1_beta,
                &self.g.convt2_w,
                &self.g.convt2_b,
            ],
            trainable,
        );
        let p = |name: &str| params.iter().find(|(n, _)| *n == name).unwrap().1;

        let mut bn_nodes = Vec::new();
        let hd = graph.dense(z, p("g.dense.w"), p("g.dense.b"))?;
        let hr = graph.reshape(hd, &[n, 4 * b, h / 4, w / 4])?;
        let t1 = graph.conv2d_transpose(hr, p("g.convt1.w"), 2, 1)?;
        let bn = match mode {
            Mode::Train => {
                let node = graph.batch_norm_train(t1, p("g.bn1.gamma"), p("g.bn1.beta"), BN_EPS)?;
                bn_nodes.push(node);
                node
            }
            Mode::Eval => graph.batch_norm_eval(
                t1,
                p("g.bn1.gamma"),
                p("g.bn1.beta"),
                &self.g.bn1_running_mean,
                &self.g.bn1_running_var,
                BN_EPS,
            )?,
        };
        let a1 = graph.relu(bn);
        let t2 = graph.conv2d_transpose(a1, p("g.convt2.w"), 2, 1)?;
        let t2b = graph.add_chan_bias(t2, p("g.convt2.b"))?;
        let out = graph.tanh(t2b);
        debug_assert_eq!(graph.value(out).shape(), &[n, c, h, w]);
        Ok(GenPass {
            out,
            bn_nodes,
            params,
        })
    }

    /// Builds the discriminator onto `graph` from the image node `x` of
    /// shape [n, C, H, W].
    pub fn discriminator_pass(
        &self,
        graph: &mut Graph,
        x: NodeId,
        mode: Mode,
        trainable: bool,
    ) -> Result<DiscPass> {
        let xs = graph.value(x).shape().to_vec();
        let [c, h, w] = self.image_shape;
        if xs.len() != 4 || xs[1..] != [c, h, w] {
            return Err(Error::InvalidShape(format!(
                "image batch must be [n, {c}, {h}, {w}], got {xs:?}"
            )));
        }
        let params = Self::insert_params(
            graph,
            &D_PARAM_NAMES,
            &[
                &self.d.conv1_w,
                &self.d.conv1_b,
                &self.d.conv2_w,
                &self.d.bn2_gamma,
                &self.d.bn2_beta,
                &self.d.dense_w,
                &self.d.dense_b,
            ],
            trainable,
        );
        let p = |name: &str| params.iter().find(|(n, _)| *n == name).unwrap().1;

        let mut bn_nodes = Vec::new();
        let c1 = graph.conv2d(x, p("d.conv1.w"), 2, 1)?;
        let c1b = graph.add_chan_bias(c1, p("d.conv1.b"))?;
        let b0 = graph.leaky_relu(c1b, LEAKY_SLOPE);

        let c2 = graph.conv2d(b0, p("d.conv2.w"), 2, 1)?;
        let bn = match mode {
            Mode::Train => {
                let node = graph.batch_norm_train(c2, p("d.bn2.gamma"), p("d.bn2.beta"), BN_EPS)?;
                bn_nodes.push(node);
                node
            }
            Mode::Eval => graph.batch_norm_eval(
                c2,
                p("d.bn2.gamma"),
                p("d.bn2.beta"),
                &self.d.bn2_running_mean,
                &self.d.bn2_running_var,
                BN_EPS,
            )?,
        };
        let b1 = graph.leaky_relu(bn, LEAKY_SLOPE);

        let f0 = graph.flatten(b0)?;
        let f1 = graph.flatten(b1)?;
        let logits = graph.dense(f1, p("d.dense.w"), p("d.dense.b"))?;
        let prob = graph.sigmoid(logits);
        Ok(DiscPass {
            prob,
            features: vec![f0, f1],
            bn_nodes,
            params,
        })
    }

    /// G(z) without gradients, eval-mode batch norm. `z` is [n, latent].
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let zn = graph.leaf(z.clone(), false);
        let pass = self.generator_pass(&mut graph, zn, Mode::Eval, false)?;
        Ok(graph.value(pass.out).clone())
    }

    /// D(x) probabilities without gradients, eval-mode batch norm.
    pub fn discriminate(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut graph = Graph::new();
        let xn = graph.leaf(x.clone(), false);
        let pass = self.discriminator_pass(&mut graph, xn, Mode::Eval, false)?;
        Ok(graph.value(pass.prob).data().to_vec())
    }

    /// Flattened f(·) feature batch [n, feature_len], eval mode.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let xn = graph.leaf(x.clone(), false);
        let pass = self.discriminator_pass(&mut graph, xn, Mode::Eval, false)?;
        Ok(graph.value(pass.features[self.feature_layer_index]).clone())
    }

    /// All persistable tensors: trainable parameters plus running stats.
    pub fn entries(&self) -> Vec<ModelEntry> {
        let t = |t: &Tensor| (t.shape().to_vec(), t.data().to_vec());
        let v = |v: &Vec<f64>| (vec![v.len()], v.clone());
        let pairs = vec![
            ("g.dense.w", t(&self.g.dense_w)),
            ("g.dense.b", t(&self.g.dense_b)),
            ("g.convt1.w", t(&self.g.convt1_w)),
            ("g.bn1.gamma", t(&self.g.bn1_gamma)),
            ("g.bn1.beta", t(&self.g.bn1_beta)),
            ("g.bn1.running_mean", v(&self.g.bn1_running_mean)),
            ("g.bn1.running_var", v(&self.g.bn1_running_var)),
            ("g.convt2.w", t(&self.g.convt2_w)),
            ("g.convt2.b", t(&self.g.convt2_b)),
            ("d.conv1.w", t(&self.d.conv1_w)),
            ("d.conv1.b", t(&self.d.conv1_b)),
            ("d.conv2.w", t(&self.d.conv2_w)),
            ("d.bn2.gamma", t(&self.d.bn2_gamma)),
            ("d.bn2.beta", t(&self.d.bn2_beta)),
            ("d.bn2.running_mean", v(&self.d.bn2_running_mean)),
            ("d.bn2.running_var", v(&self.d.bn2_running_var)),
            ("d.dense.w", t(&self.d.dense_w)),
            ("d.dense.b", t(&self.d.dense_b)),
        ];
        pairs.into_iter().map(|(n, (s, d))| (n, s, d)).collect()
    }

    /// Restores one tensor by name, validating its shape against the
    /// model's architecture.
    pub fn set_entry(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        let assign_tensor = |slot: &mut Tensor, shape: &[usize], data: Vec<f64>| -> Result<()> {
            if slot.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(shape.to_vec(), data)?;
            Ok(())
        };
        let assign_vec = |slot: &mut Vec<f64>, shape: &[usize], data: Vec<f64>| -> Result<()> {
            if shape != [slot.len()] {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected [{}]",
                    shape,
                    slot.len()
                )));
            }
            *slot = data;
            Ok(())
        };
        match name {
            "g.dense.w" => assign_tensor(&mut self.g.dense_w, shape, data),
            "g.dense.b" => assign_tensor(&mut self.g.dense_b, shape, data),
            "g.convt1.w" => assign_tensor(&mut self.g.convt1_w, shape, data),
            "g.bn1.gamma" => assign_tensor(&mut self.g.bn1_gamma, shape, data),
            "g.bn1.beta" => assign_tensor(&mut self.g.bn1_beta, shape, data),
            "g.bn1.running_mean" => assign_vec(&mut self.g.bn1_running_mean, shape, data),
            "g.bn1.running_var" => assign_vec(&mut self.g.bn1_running_var, shape, data),
            "g.convt2.w" => assign_tensor(&mut self.g.convt2_w, shape, data),
            "g.convt2.b" => assign_tensor(&mut self.g.convt2_b, shape, data),
            "d.conv1.w" => assign_tensor(&mut self.d.conv1_w, shape, data),
            "d.conv1.b" => assign_tensor(&mut self.d.conv1_b, shape, data),
            "d.conv2.w" => assign_tensor(&mut self.d.conv2_w, shape, data),
            "d.bn2.gamma" => assign_tensor(&mut self.d.bn2_gamma, shape, data),
            "d.bn2.beta" => assign_tensor(&mut self.d.bn2_beta, shape, data),
            "d.bn2.running_mean" => assign_vec(&mut self.d.bn2_running_mean, shape, data),
            "d.bn2.running_var" => assign_vec(&mut self.d.bn2_running_var, shape, data),
            "d.dense.w" => assign_tensor(&mut self.d.dense_w, shape, data),
            "d.dense.b" => assign_tensor(&mut self.d.dense_b, shape, data),
            other => Err(Error::Checkpoint(format!("unknown tensor `{other}`"))),
        }
    }

    fn param_mut(&mut self, name: &str) -> &mut Tensor {
        match name {
            "g.dense.w" => &mut self.g.dense_w,
            "g.dense.b" => &mut self.g.dense_b,
            "g.convt1.w" => &mut self.g.convt1_w,
            "g.bn1.gamma" => &mut self.g.bn1_gamma,
            "g.bn1.beta" => &mut self.g.bn1_beta,
            "g.convt2.w" => &mut self.g.convt2_w,
            "g.convt2.b" => &mut self.g.convt2_b,
            "d.conv1.w" => &mut self.d.conv1_w,
            "d.conv1.b" => &mut self.d.conv1_b,
            "d.conv2.w" => &mut self.d.conv2_w,
            "d.bn2.gamma" => &mut self.d.bn2_gamma,
            "d.bn2.beta" => &mut self.d.bn2_beta,
            "d.dense.w" => &mut self.d.dense_w,
            "d.dense.b" => &mut self.d.dense_b,
            other => panic!("not a trainable parameter: {other}"),
        }
    }
}

/// −mean[ln clamp(p)] over all entries of the probability node.
fn neg_mean_ln(g: &mut Graph, p: NodeId) -> NodeId {
    let c = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let l = g.ln(c);
    let m = g.reduce_mean(l);
    g.scale(m, -1.0)
}

/// −mean[ln(1 − clamp(p))].
fn neg_mean_ln_complement(g: &mut Graph, p: NodeId) -> NodeId {
    let c = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let neg = g.scale(c, -1.0);
    let one_minus = g.add_const(neg, 1.0);
    let l = g.ln(one_minus);
    let m = g.reduce_mean(l);
    g.scale(m, -1.0)
}

/// Discriminator objective −mean[log D(x)] − mean[log(1 − D(x̃))] on given
/// real and fake image batches, with train-mode batch norm (the quantity a
/// training step optimizes for that batch).
pub fn d_loss(model: &GanModel, real: &Tensor, fake: &Tensor) -> Result<f64> {
    let mut graph = Graph::new();
    let r = graph.leaf(real.clone(), false);
    let f = graph.leaf(fake.clone(), false);
    let pr = model.discriminator_pass(&mut graph, r, Mode::Train, false)?;
    let pf = model.discriminator_pass(&mut graph, f, Mode::Train, false)?;
    let lr = neg_mean_ln(&mut graph, pr.prob);
    let lf = neg_mean_ln_complement(&mut graph, pf.prob);
    let total = graph.add(lr, lf)?;
    Ok(graph.value(total).scalar_value())
}

/// Non-saturating generator objective −mean[log D(G(z))] on a noise batch,
/// train-mode batch norm throughout.
pub fn g_loss(model: &GanModel, noise: &Tensor) -> Result<f64> {
    let mut graph = Graph::new();
    let z = graph.leaf(noise.clone(), false);
    let gen = model.generator_pass(&mut graph, z, Mode::Train, false)?;
    let disc = model.discriminator_pass(&mut graph, gen.out, Mode::Train, false)?;
    let l = neg_mean_ln(&mut graph, disc.prob);
    Ok(graph.value(l).scalar_value())
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub seed: u64,
    pub d_steps_per_g_step: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr_g: 2e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            seed: 7,
            d_steps_per_g_step: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.d_steps_per_g_step == 0 {
            return Err(Error::Config(
                "batch_size and d_steps_per_g_step must be positive".into(),
            ));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::Config(format!(
                "beta1 must be in [0, 1), got {}",
                self.beta1
            )));
        }
        Ok(())
    }
}

/// Per-epoch mean losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub d_loss: f64,
    pub g_loss: f64,
}

fn stack(images: &[Tensor], idx: &[usize]) -> Tensor {
    let per = images[0].numel();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(images[i].data());
    }
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(images[0].shape());
    Tensor::new(shape, data).expect("stacked batch shape")
}

/// momentum update of running statistics from a train-mode batch norm
/// node; the batch variance is unbiased before entering the average.
fn update_running(
    running_mean: &mut [f64],
    running_var: &mut [f64],
    batch_mean: &[f64],
    batch_var: &[f64],
    count: usize,
) {
    let unbias = if count > 1 {
        count as f64 / (count as f64 - 1.0)
    } else {
        1.0
    };
    for c in 0..running_mean.len() {
        running_mean[c] = BN_MOMENTUM * running_mean[c] + (1.0 - BN_MOMENTUM) * batch_mean[c];
        running_var[c] =
            BN_MOMENTUM * running_var[c] + (1.0 - BN_MOMENTUM) * batch_var[c] * unbias;
    }
}

enum Network {
    G,
    D,
}

fn apply_bn_updates(model: &mut GanModel, graph: &Graph, updates: &[(Network, NodeId)], batch: usize) {
    for (net, node) in updates {
        let (mean, var) = graph.batch_stats(*node).expect("train-mode bn node");
        let [_, h, w] = model.image_shape;
        // both BN layers sit at the half-resolution stage of their network
        let count = batch * (h / 2) * (w / 2);
        match net {
            Network::G => update_running(
                &mut model.g.bn1_running_mean,
                &mut model.g.bn1_running_var,
                &mean,
                &var,
                count,
            ),
            Network::D => update_running(
                &mut model.d.bn2_running_mean,
                &mut model.d.bn2_running_var,
                &mean,
                &var,
                count,
            ),
        }
    }
}

/// Alternating adversarial training on normal-only images. Shuffling and
/// noise draws come from one RNG stream seeded by `cfg.seed`, so a rerun
/// with identical inputs is bit-identical. Returns per-epoch mean losses.
pub fn train(model: &mut GanModel, images: &[Tensor], cfg: &TrainConfig) -> Result<Vec<EpochLosses>> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let [c, h, w] = model.image_shape;
    for im in images {
        if im.shape() != [c, h, w] {
            return Err(Error::ShapeMismatch {
                op: "train",
                lhs: im.shape().to_vec(),
                rhs: vec![c, h, w],
            });
        }
    }
    if cfg.batch_size > images.len() {
        return Err(Error::Config(format!(
            "batch_size {} exceeds training set size {}",
            cfg.batch_size,
            images.len()
        )));
    }

    let prior = NoisePrior {
        latent_dim: model.latent_dim,
    };
    let adam_g = AdamConfig {
        lr: cfg.lr_g,
        beta1: cfg.beta1,
        ..AdamConfig::default()
    };
    let adam_d = AdamConfig {
        lr: cfg.lr_d,
        beta1: cfg.beta1,
        ..AdamConfig::default()
    };
    let mut g_states: Vec<AdamState> = G_PARAM_NAMES
        .iter()
        .map(|n| AdamState::new(param_numel(model, n)))
        .collect();
    let mut d_states: Vec<AdamState> = D_PARAM_NAMES
        .iter()
        .map(|n| AdamState::new(param_numel(model, n)))
        .collect();

    let mut rng = seed::rng(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        shuffle(&mut order, &mut rng);

        let mut d_sum = 0.0;
        let mut d_count = 0usize;
        let mut g_sum = 0.0;
        let mut g_count = 0usize;

        for batch_idx in order.chunks_exact(cfg.batch_size) {
            let real = stack(images, batch_idx);

            for _ in 0..cfg.d_steps_per_g_step {
                let noise = prior.sample(cfg.batch_size, &mut rng);
                let mut graph = Graph::new();
                let z = graph.leaf(noise, false);
                let gen = model.generator_pass(&mut graph, z, Mode::Train, false)?;
                let rl = graph.leaf(real.clone(), false);
                let dr = model.discriminator_pass(&mut graph, rl, Mode::Train, true)?;
                let df = model.discriminator_pass(&mut graph, gen.out, Mode::Train, true)?;
                let lr = neg_mean_ln(&mut graph, dr.prob);
                let lf = neg_mean_ln_complement(&mut graph, df.prob);
                let loss = graph.add(lr, lf)?;
                d_sum += graph.value(loss).scalar_value();
                d_count += 1;

                let mut grads = graph.backward(loss)?;
                // real-pass and fake-pass leaves are distinct nodes over
                // the same parameter; their gradients add
                for (i, name) in D_PARAM_NAMES.iter().enumerate() {
                    let shape = param_numel_shape(model, name);
                    let nr = dr.params[i].1;
                    let nf = df.params[i].1;
                    debug_assert_eq!(dr.params[i].0, *name);
                    let mut grad = grads.take_or_zeros(nr, &shape);
                    let gf = grads.take_or_zeros(nf, &shape);
                    for (a, b) in grad.data_mut().iter_mut().zip(gf.data()) {
                        *a += b;
                    }
                    d_states[i].step(&adam_d, model.param_mut(name), &grad);
                }
                let mut updates: Vec<(Network, NodeId)> =
                    gen.bn_nodes.iter().map(|&n| (Network::G, n)).collect();
                updates.extend(dr.bn_nodes.iter().map(|&n| (Network::D, n)));
                updates.extend(df.bn_nodes.iter().map(|&n| (Network::D, n)));
                apply_bn_updates(model, &graph, &updates, cfg.batch_size);
            }

            let noise = prior.sample(cfg.batch_size, &mut rng);
            let mut graph = Graph::new();
            let z = graph.leaf(noise, false);
            let gen = model.generator_pass(&mut graph, z, Mode::Train, true)?;
            let disc = model.discriminator_pass(&mut graph, gen.out, Mode::Train, false)?;
            let loss = neg_mean_ln(&mut graph, disc.prob);
            g_sum += graph.value(loss).scalar_value();
            g_count += 1;

            let mut grads = graph.backward(loss)?;
            for (i, name) in G_PARAM_NAMES.iter().enumerate() {
                let shape = param_numel_shape(model, name);
                debug_assert_eq!(gen.params[i].0, *name);
                let grad = grads.take_or_zeros(gen.params[i].1, &shape);
                g_states[i].step(&adam_g, model.param_mut(name), &grad);
            }
            let mut updates: Vec<(Network, NodeId)> =
                gen.bn_nodes.iter().map(|&n| (Network::G, n)).collect();
            updates.extend(disc.bn_nodes.iter().map(|&n| (Network::D, n)));
            apply_bn_updates(model, &graph, &updates, cfg.batch_size);
        }

        history.push(EpochLosses {
            d_loss: d_sum / d_count.max(1) as f64,
            g_loss: g_sum / g_count.max(1) as f64,
        });
    }
    Ok(history)
}

fn param_numel(model: &GanModel, name: &str) -> usize {
    model
        .entries()
        .iter()
        .find(|(n, _, _)| *n == name)
        .map(|(_, s, _)| s.iter().product())
        .expect("known parameter")
}

fn param_numel_shape(model: &GanModel, name: &str) -> Vec<usize> {
    model
        .entries()
        .iter()
        .find(|(n, _, _)| *n == name)
        .map(|(_, s, _)| s.clone())
        .expect("known parameter")
}

/// Fisher–Yates with the training RNG (avoids depending on shuffle
/// implementation details of the rand crate staying stable).
fn shuffle<R: Rng>(order: &mut [usize], rng: &mut R) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(seed: u64) -> GanModel {
        let mut rng = seed::rng(seed);
        GanModel::build(4, [1, 8, 8], 2, &mut rng).unwrap()
    }

    fn tiny_images(n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = seed::rng(seed);
        (0..n)
            .map(|_| Tensor::rand_uniform(&[1, 8, 8], -0.9, 0.9, &mut rng))
            .collect()
    }

    #[test]
    fn generator_produces_contract_shape() {
        let mut rng = seed::rng(3);
        let model = GanModel::build(16, [1, 64, 64], 16, &mut rng).unwrap();
        let z = Tensor::rand_uniform(&[2, 16], -1.0, 1.0, &mut rng);
        let out = model.generate(&z).unwrap();
        assert_eq!(out.shape(), &[2, 1, 64, 64]);
        assert!(out.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn discriminator_outputs_open_unit_interval() {
        let model = tiny_model(5);
        let mut rng = seed::rng(17);
        let x = Tensor::rand_uniform(&[3, 1, 8, 8], -1.0, 1.0, &mut rng);
        let probs = model.discriminate(&x).unwrap();
        assert_eq!(probs.len(), 3);
        for p in probs {
            assert!(p > 0.0 && p < 1.0, "prob {p}");
        }
    }

    #[test]
    fn feature_vector_length_matches_shape_arithmetic() {
        let mut rng = seed::rng(9);
        let model = GanModel::build(16, [1, 64, 64], 16, &mut rng).unwrap();
        assert_eq!(model.feature_len(), 32 * 16 * 16);
        let x = Tensor::rand_uniform(&[1, 1, 64, 64], -1.0, 1.0, &mut rng);
        let f = model.features(&x).unwrap();
        assert_eq!(f.shape(), &[1, 32 * 16 * 16]);
    }

    #[test]
    fn build_rejects_bad_image_shape() {
        let mut rng = seed::rng(1);
        assert!(matches!(
            GanModel::build(16, [1, 62, 64], 16, &mut rng),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn d_loss_at_half_probability_is_two_ln_two() {
        // dense weights zero and bias zero force D(x) = sigmoid(0) = 0.5
        let mut model = tiny_model(21);
        model.d.dense_w = Tensor::zeros(model.d.dense_w.shape());
        model.d.dense_b = Tensor::zeros(model.d.dense_b.shape());
        let mut rng = seed::rng(4);
        let real = Tensor::rand_uniform(&[4, 1, 8, 8], -1.0, 1.0, &mut rng);
        let fake = Tensor::rand_uniform(&[4, 1, 8, 8], -1.0, 1.0, &mut rng);
        let l = d_loss(&model, &real, &fake).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12, "loss {l}");
        let g = g_loss(&model, &Tensor::rand_uniform(&[4, 4], -1.0, 1.0, &mut rng)).unwrap();
        assert!((g - std::f64::consts::LN_2).abs() < 1e-12, "g loss {g}");
    }

    #[test]
    fn d_loss_near_zero_for_confident_discriminator() {
        // push the dense bias far positive/negative to saturate D
        let mut model = tiny_model(22);
        model.d.dense_w = Tensor::zeros(model.d.dense_w.shape());
        let mut rng = seed::rng(4);
        let real = Tensor::rand_uniform(&[2, 1, 8, 8], -1.0, 1.0, &mut rng);
        let fake = real.clone();
        // D ≡ 1−1e-7 after clamping: real term ≈ 1e-7; fake term is the
        // symmetric worst case, so evaluate the two halves separately
        model.d.dense_b = Tensor::filled(&[1], 50.0);
        let l_real_half = {
            let mut graph = Graph::new();
            let r = graph.leaf(real.clone(), false);
            let pass = model.discriminator_pass(&mut graph, r, Mode::Train, false).unwrap();
            let l = neg_mean_ln(&mut graph, pass.prob);
            graph.value(l).scalar_value()
        };
        assert!(l_real_half < 2e-7, "real half {l_real_half}");
        model.d.dense_b = Tensor::filled(&[1], -50.0);
        let l_fake_half = {
            let mut graph = Graph::new();
            let f = graph.leaf(fake, false);
            let pass = model.discriminator_pass(&mut graph, f, Mode::Train, false).unwrap();
            let l = neg_mean_ln_complement(&mut graph, pass.prob);
            graph.value(l).scalar_value()
        };
        assert!(l_fake_half < 2e-7, "fake half {l_fake_half}");
    }

    #[test]
    fn losses_match_reevaluation_oracle() {
        let model = tiny_model(23);
        let mut rng = seed::rng(6);
        let real = Tensor::rand_uniform(&[5, 1, 8, 8], -1.0, 1.0, &mut rng);
        let noise = Tensor::rand_uniform(&[5, 4], -1.0, 1.0, &mut rng);

        // oracle: pull D outputs out of the same graphs, recompute scalars
        let mut graph = Graph::new();
        let z = graph.leaf(noise.clone(), false);
        let gen = model.generator_pass(&mut graph, z, Mode::Train, false).unwrap();
        let fake = graph.value(gen.out).clone();

        let l = d_loss(&model, &real, &fake).unwrap();
        let probs_real = {
            let mut g2 = Graph::new();
            let r = g2.leaf(real.clone(), false);
            let p = model.discriminator_pass(&mut g2, r, Mode::Train, false).unwrap();
            g2.value(p.prob).data().to_vec()
        };
        let probs_fake = {
            let mut g2 = Graph::new();
            let f = g2.leaf(fake.clone(), false);
            let p = model.discriminator_pass(&mut g2, f, Mode::Train, false).unwrap();
            g2.value(p.prob).data().to_vec()
        };
        let clamp = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let oracle_d = -probs_real.iter().map(|&p| clamp(p).ln()).sum::<f64>()
            / probs_real.len() as f64
            - probs_fake
                .iter()
                .map(|&p| (1.0 - clamp(p)).ln())
                .sum::<f64>()
                / probs_fake.len() as f64;
        assert!((l - oracle_d).abs() < 1e-12, "{l} vs {oracle_d}");

        let lg = g_loss(&model, &noise).unwrap();
        let oracle_g = -probs_fake.iter().map(|&p| clamp(p).ln()).sum::<f64>()
            / probs_fake.len() as f64;
        assert!((lg - oracle_g).abs() < 1e-12, "{lg} vs {oracle_g}");
    }

    #[test]
    fn zero_epochs_returns_model_unchanged() {
        let mut model = tiny_model(31);
        let before = model.entries();
        let images = tiny_images(8, 77);
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let history = train(&mut model, &images, &cfg).unwrap();
        assert!(history.is_empty());
        assert_eq!(model.entries(), before);
    }

    #[test]
    fn one_adam_step_does_not_increase_d_loss_materially() {
        let mut model = tiny_model(33);
        let images = tiny_images(4, 55);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            lr_d: 1e-4,
            lr_g: 1e-12, // keep G essentially frozen for the comparison
            seed: 100,
            ..TrainConfig::default()
        };
        // the training step draws its noise from rng(seed=100): replicate
        let mut rng = seed::rng(cfg.seed);
        let mut order: Vec<usize> = (0..images.len()).collect();
        shuffle(&mut order, &mut rng);
        let noise = NoisePrior { latent_dim: 4 }.sample(4, &mut rng);
        let real = stack(&images, &order[..4]);
        let fake = {
            // train-mode generation matching the step's forward
            let mut graph = Graph::new();
            let z = graph.leaf(noise.clone(), false);
            let gen = model.generator_pass(&mut graph, z, Mode::Train, false).unwrap();
            graph.value(gen.out).clone()
        };
        let before = d_loss(&model, &real, &fake).unwrap();
        train(&mut model, &images, &cfg).unwrap();
        let after = d_loss(&model, &real, &fake).unwrap();
        assert!(
            after <= before + 1e-3,
            "d_loss rose from {before} to {after}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let images = tiny_images(8, 99);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 42,
            ..TrainConfig::default()
        };
        let mut m1 = tiny_model(50);
        let h1 = train(&mut m1, &images, &cfg).unwrap();
        let mut m2 = tiny_model(50);
        let h2 = train(&mut m2, &images, &cfg).unwrap();
        assert_eq!(h1, h2);
        for ((n1, s1, d1), (n2, s2, d2)) in m1.entries().iter().zip(m2.entries().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(s1, s2);
            assert_eq!(d1, d2, "parameter {n1} diverged");
        }
    }

    #[test]
    fn gradient_reaches_latent_input() {
        let model = tiny_model(61);
        let mut rng = seed::rng(8);
        let mut graph = Graph::new();
        let z = graph.leaf(Tensor::rand_uniform(&[1, 4], -1.0, 1.0, &mut rng), true);
        let gen = model.generator_pass(&mut graph, z, Mode::Eval, false).unwrap();
        let disc = model.discriminator_pass(&mut graph, gen.out, Mode::Eval, false).unwrap();
        let loss = neg_mean_ln(&mut graph, disc.prob);
        let grads = graph.backward(loss).unwrap();
        let dz = grads.get(z).expect("z gradient");
        assert!(dz.data().iter().any(|&v| v != 0.0), "∂loss/∂z vanished");
    }

    #[test]
    fn entries_round_trip_through_set_entry() {
        let model = tiny_model(71);
        let mut rebuilt = tiny_model(72);
        for (name, shape, data) in model.entries() {
            rebuilt.set_entry(name, &shape, data).unwrap();
        }
        assert_eq!(model.entries(), rebuilt.entries());
        assert!(matches!(
            rebuilt.set_entry("g.dense.w", &[1, 1], vec![0.0]),
            Err(Error::Checkpoint(_))
        ));
    }
}
