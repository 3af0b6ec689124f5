//! Convolutional network mapping an 8-channel ultrasound stack to an
//! 8-dimensional embedding and articulation-class posteriors.

mod gradcheck;
mod input;
pub(crate) mod layers;

pub use gradcheck::{gradient_check, GradCheckReport, GradCheckable, SoftmaxRegression, DEFAULT_CHECK_SAMPLES};
pub use input::{build_input_stack, extract_embeddings, speaker_mean, EmbeddingSequence, CONTEXT_FRAMES};

use std::io::{BufReader, BufWriter, Write as _};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::matrix::softmax_in_place;
use layers::{conv_backward, conv_forward, dense_backward, dense_forward, pool_backward, pool_forward};

pub const INPUT_CHANNELS: usize = 8;
pub const EMBEDDING_DIM: usize = 8;

const MAGIC: &[u8; 4] = b"TTCN";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CnnConfig {
    pub height: usize,
    pub width: usize,
    pub c1: usize,
    pub k1: usize,
    pub c2: usize,
    pub k2: usize,
    pub h1: usize,
    pub h2: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Embedding read before (true) or after the rectifier of the 8-unit layer.
    pub embedding_pre_activation: bool,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            height: crate::session_io::RAW_SCANLINES,
            width: crate::session_io::RAW_ECHOES,
            c1: 16,
            k1: 5,
            c2: 32,
            k2: 5,
            h1: 256,
            h2: 64,
            num_classes: 11,
            seed: 0,
            embedding_pre_activation: true,
        }
    }
}

impl CnnConfig {
    /// A network of a few thousand parameters on 24×32 frames.
    pub fn small() -> Self {
        Self {
            height: 24,
            width: 32,
            c1: 4,
            k1: 5,
            c2: 8,
            k2: 3,
            h1: 32,
            h2: 16,
            ..Self::default()
        }
    }

    pub fn with_geometry(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    fn shapes(&self) -> Result<Shapes> {
        let positive = [self.height, self.width, self.c1, self.k1, self.c2, self.k2, self.h1, self.h2];
        if positive.contains(&0) || self.num_classes < 2 {
            return Err(Error::Validation(format!("invalid network configuration {self:?}")));
        }
        let conv = |h: usize, w: usize, k: usize, layer: &str| -> Result<(usize, usize)> {
            if h < k + 1 || w < k + 1 {
                return Err(Error::Validation(format!(
                    "{layer}: {h}x{w} input too small for a {k}x{k} kernel followed by 2x2 pooling"
                )));
            }
            Ok((h - k + 1, w - k + 1))
        };
        let conv1 = conv(self.height, self.width, self.k1, "conv1")?;
        let pool1 = (conv1.0 / 2, conv1.1 / 2);
        let conv2 = conv(pool1.0, pool1.1, self.k2, "conv2")?;
        let pool2 = (conv2.0 / 2, conv2.1 / 2);
        Ok(Shapes {
            conv1,
            pool1,
            conv2,
            pool2,
            flat: self.c2 * pool2.0 * pool2.1,
        })
    }

    pub fn input_len(&self) -> usize {
        INPUT_CHANNELS * self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Shapes {
    conv1: (usize, usize),
    pool1: (usize, usize),
    conv2: (usize, usize),
    pool2: (usize, usize),
    flat: usize,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    conv1_w: Range<usize>,
    conv1_b: Range<usize>,
    conv2_w: Range<usize>,
    conv2_b: Range<usize>,
    fc1_w: Range<usize>,
    fc1_b: Range<usize>,
    fc2_w: Range<usize>,
    fc2_b: Range<usize>,
    fc3_w: Range<usize>,
    fc3_b: Range<usize>,
    out_w: Range<usize>,
    out_b: Range<usize>,
}

impl Layout {
    fn new(c: &CnnConfig, s: &Shapes) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        Self {
            conv1_w: take(c.c1 * INPUT_CHANNELS * c.k1 * c.k1),
            conv1_b: take(c.c1),
            conv2_w: take(c.c2 * c.c1 * c.k2 * c.k2),
            conv2_b: take(c.c2),
            fc1_w: take(c.h1 * s.flat),
            fc1_b: take(c.h1),
            fc2_w: take(c.h2 * c.h1),
            fc2_b: take(c.h2),
            fc3_w: take(EMBEDDING_DIM * c.h2),
            fc3_b: take(EMBEDDING_DIM),
            out_w: take(c.num_classes * EMBEDDING_DIM),
            out_b: take(c.num_classes),
        }
    }

    fn len(&self) -> usize {
        self.out_b.end
    }

    /// Weight ranges with their fan-in.
    fn weights(&self, c: &CnnConfig, s: &Shapes) -> [(Range<usize>, usize); 6] {
        [
            (self.conv1_w.clone(), INPUT_CHANNELS * c.k1 * c.k1),
            (self.conv2_w.clone(), c.c1 * c.k2 * c.k2),
            (self.fc1_w.clone(), s.flat),
            (self.fc2_w.clone(), c.h1),
            (self.fc3_w.clone(), c.h2),
            (self.out_w.clone(), EMBEDDING_DIM),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnParams {
    config: CnnConfig,
    shapes: Shapes,
    layout: Layout,
    theta: Vec<f64>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    z1: Vec<f64>,
    p1: Vec<f64>,
    arg1: Vec<usize>,
    z2: Vec<f64>,
    p2: Vec<f64>,
    arg2: Vec<usize>,
    z3: Vec<f64>,
    z4: Vec<f64>,
    z5: Vec<f64>,
    probs: Vec<f64>,
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

fn relu_grad(g: &mut [f64], z: &[f64]) {
    for (gi, &zi) in g.iter_mut().zip(z) {
        if zi <= 0.0 {
            *gi = 0.0;
        }
    }
}

impl CnnParams {
    /// Fan-in-scaled uniform weights `U(±sqrt(6 / fan_in))`, zero biases.
    pub fn init(config: &CnnConfig) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for (range, fan_in) in p.layout.weights(&p.config, &p.shapes) {
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in &mut p.theta[range] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn zeros(config: &CnnConfig) -> Result<Self> {
        let shapes = config.shapes()?;
        let layout = Layout::new(config, &shapes);
        Ok(Self {
            config: config.clone(),
            shapes,
            theta: vec![0.0; layout.len()],
            layout,
        })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.config.input_len() {
            return Err(Error::dim("conv1 input", self.config.input_len(), input.len()));
        }
        Ok(())
    }

    pub(crate) fn trace(&self, input: &[f64]) -> Result<Trace> {
        self.check_input(input)?;
        let (c, s, l, th) = (&self.config, &self.shapes, &self.layout, &self.theta);
        let z1 = conv_forward(
            input,
            (INPUT_CHANNELS, c.height, c.width),
            &th[l.conv1_w.clone()],
            &th[l.conv1_b.clone()],
            c.c1,
            c.k1,
        );
        let (p1, arg1) = pool_forward(&relu(&z1), c.c1, s.conv1);
        let z2 = conv_forward(
            &p1,
            (c.c1, s.pool1.0, s.pool1.1),
            &th[l.conv2_w.clone()],
            &th[l.conv2_b.clone()],
            c.c2,
            c.k2,
        );
        let (p2, arg2) = pool_forward(&relu(&z2), c.c2, s.conv2);
        let z3 = dense_forward(&p2, &th[l.fc1_w.clone()], &th[l.fc1_b.clone()]);
        let z4 = dense_forward(&relu(&z3), &th[l.fc2_w.clone()], &th[l.fc2_b.clone()]);
        let z5 = dense_forward(&relu(&z4), &th[l.fc3_w.clone()], &th[l.fc3_b.clone()]);
        let mut probs = dense_forward(&relu(&z5), &th[l.out_w.clone()], &th[l.out_b.clone()]);
        softmax_in_place(&mut probs);
        Ok(Trace {
            z1,
            p1,
            arg1,
            z2,
            p2,
            arg2,
            z3,
            z4,
            z5,
            probs,
        })
    }

    /// Class posteriors and the 8-dimensional embedding.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let t = self.trace(input)?;
        let emb = if self.config.embedding_pre_activation {
            t.z5.clone()
        } else {
            relu(&t.z5)
        };
        Ok((t.probs, emb))
    }

    /// Cross-entropy of `label` under the forward pass.
    pub fn loss(&self, input: &[f64], label: usize) -> Result<f64> {
        let t = self.trace(input)?;
        Ok(-t.probs[label].ln())
    }

    /// Adds `scale` times the gradient of the cross-entropy loss to `grad`;
    /// returns the loss.
    pub(crate) fn backward(&self, input: &[f64], label: usize, scale: f64, grad: &mut [f64]) -> Result<f64> {
        let t = self.trace(input)?;
        let (c, s, l, th) = (&self.config, &self.shapes, &self.layout, &self.theta);
        let loss = -t.probs[label].ln();
        let mut g_logits: Vec<f64> = t.probs.iter().map(|p| p * scale).collect();
        g_logits[label] -= scale;

        let a5 = relu(&t.z5);
        let mut g5 = dense_backward(&g_logits, &a5, &th[l.out_w.clone()], grad, l.out_w.clone(), l.out_b.clone());
        relu_grad(&mut g5, &t.z5);
        let a4 = relu(&t.z4);
        let mut g4 = dense_backward(&g5, &a4, &th[l.fc3_w.clone()], grad, l.fc3_w.clone(), l.fc3_b.clone());
        relu_grad(&mut g4, &t.z4);
        let a3 = relu(&t.z3);
        let mut g3 = dense_backward(&g4, &a3, &th[l.fc2_w.clone()], grad, l.fc2_w.clone(), l.fc2_b.clone());
        relu_grad(&mut g3, &t.z3);
        let g_p2 = dense_backward(&g3, &t.p2, &th[l.fc1_w.clone()], grad, l.fc1_w.clone(), l.fc1_b.clone());

        let mut g_z2 = pool_backward(&g_p2, &t.arg2, c.c2 * s.conv2.0 * s.conv2.1);
        relu_grad(&mut g_z2, &t.z2);
        let g_p1 = conv_backward(
            &g_z2,
            &t.p1,
            (c.c1, s.pool1.0, s.pool1.1),
            &th[l.conv2_w.clone()],
            c.c2,
            c.k2,
            grad,
            l.conv2_w.clone(),
            l.conv2_b.clone(),
            true,
        );
        let mut g_z1 = pool_backward(&g_p1, &t.arg1, c.c1 * s.conv1.0 * s.conv1.1);
        relu_grad(&mut g_z1, &t.z1);
        conv_backward(
            &g_z1,
            input,
            (INPUT_CHANNELS, c.height, c.width),
            &th[l.conv1_w.clone()],
            c.c1,
            c.k1,
            grad,
            l.conv1_w.clone(),
            l.conv1_b.clone(),
            false,
        );
        Ok(loss)
    }

    /// Signs of every rectifier input and every pooling choice.
    pub(crate) fn activation_pattern(&self, input: &[f64]) -> Result<Vec<usize>> {
        let t = self.trace(input)?;
        let mut pat: Vec<usize> = Vec::new();
        for z in [&t.z1, &t.z2, &t.z3, &t.z4, &t.z5] {
            pat.extend(z.iter().map(|&v| usize::from(v > 0.0)));
        }
        pat.extend(&t.arg1);
        pat.extend(&t.arg2);
        Ok(pat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Writer::new(BufWriter::new(file));
        let io = |e| Error::io(path, e);
        let c = &self.config;
        w.bytes(MAGIC).map_err(io)?;
        w.u32(VERSION).map_err(io)?;
        for v in [c.height, c.width, c.c1, c.k1, c.c2, c.k2, c.h1, c.h2, c.num_classes] {
            w.u32(v as u32).map_err(io)?;
        }
        w.u64(c.seed).map_err(io)?;
        w.u32(u32::from(c.embedding_pre_activation)).map_err(io)?;
        w.u64(self.theta.len() as u64).map_err(io)?;
        for &v in &self.theta {
            w.f32(v as f32).map_err(io)?;
        }
        w.into_inner().flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader::new(BufReader::new(file), "cnn_params");
        r.magic(MAGIC)?;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format("cnn_params.version", format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 9];
        for (d, name) in dims.iter_mut().zip(["height", "width", "c1", "k1", "c2", "k2", "h1", "h2", "num_classes"]) {
            *d = r.u32(name)? as usize;
            if *d > 1 << 16 {
                return Err(Error::format(format!("cnn_params.{name}"), format!("implausible value {d}")));
            }
        }
        let config = CnnConfig {
            height: dims[0],
            width: dims[1],
            c1: dims[2],
            k1: dims[3],
            c2: dims[4],
            k2: dims[5],
            h1: dims[6],
            h2: dims[7],
            num_classes: dims[8],
            seed: r.u64("seed")?,
            embedding_pre_activation: r.u32("embedding_pre_activation")? != 0,
        };
        let mut p = Self::zeros(&config).map_err(|e| Error::format("cnn_params.config", e.to_string()))?;
        let n = r.count("num_params", 1 << 30)?;
        if n != p.theta.len() {
            return Err(Error::dim("cnn_params tensors", p.theta.len(), n));
        }
        for v in p.theta.iter_mut() {
            *v = f64::from(r.f32("tensor")?);
        }
        if p.theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("cnn_params.tensor", "non-finite value"));
        }
        Ok(p)
    }
}

/// Batch items per gradient chunk; fixed so results do not depend on the
/// thread count.
const GRAD_CHUNK: usize = 4;

/// Mean cross-entropy gradient of the batch and the pre-update mean loss.
pub fn batch_gradient(params: &CnnParams, batch: &[(&[f64], usize)]) -> Result<(Vec<f64>, f64)> {
    if batch.is_empty() {
        return Err(Error::EmptyRequest("training batch is empty".into()));
    }
    if let Some((_, l)) = batch.iter().find(|(_, l)| *l >= params.config.num_classes) {
        return Err(Error::Range(format!(
            "label {l} outside 0..{}",
            params.config.num_classes
        )));
    }
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<(Vec<f64>, f64)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; params.num_params()];
            let mut loss = 0.0;
            for (x, label) in chunk {
                loss += params.backward(x, *label, scale, &mut g)?;
            }
            Ok((g, loss))
        })
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0; params.num_params()];
    let mut loss = 0.0;
    for (g, l) in parts {
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        loss += l;
    }
    Ok((grad, loss * scale))
}

/// One SGD step on the mean cross-entropy; returns the loss before the update.
/// A non-finite loss or parameter is a divergence and leaves `params` as is.
pub fn train_step(params: &mut CnnParams, batch: &[(&[f64], usize)], learning_rate: f64) -> Result<f64> {
    let (grad, loss) = batch_gradient(params, batch)?;
    if !loss.is_finite() {
        return Err(Error::Divergence { loss });
    }
    let next: Vec<f64> = params.theta.iter().zip(&grad).map(|(p, g)| p - learning_rate * g).collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { loss });
    }
    params.theta = next;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

/// Shuffled mini-batch SGD; returns the mean loss of each epoch.
pub fn train(params: &mut CnnParams, examples: &[(Vec<f64>, usize)], config: &TrainConfig) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::EmptyRequest("no training examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<(&[f64], usize)> = idx.iter().map(|&i| (examples[i].0.as_slice(), examples[i].1)).collect();
            total += train_step(params, &batch, config.learning_rate)? * batch.len() as f64;
        }
        history.push(total / examples.len() as f64);
    }
    Ok(history)
}
