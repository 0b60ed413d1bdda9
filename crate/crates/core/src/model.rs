//! Compact dropout-enabled per-pixel classifier.
//!
//! Stands in for a Bayesian U-net: hand-crafted local features feed a
//! two-hidden-layer MLP trained with multi-class focal loss. Dropout masks
//! after each hidden layer provide the stochasticity for MC-dropout
//! uncertainty estimation. Training runs in f64; the inference path runs in
//! f32 with per-pass weight compaction that skips dropped units.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Volume;
use crate::metrics::ConfusionCounts;
use crate::rng::substream;

/// Per-pixel feature dimension: intensity, 3x3/7x7 box mean and std,
/// Gaussian-smoothed intensity, normalized row and column coordinates.
pub const FEATURE_DIM: usize = 8;

const PROB_FLOOR: f64 = 1e-12;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training pool is empty")]
    EmptyPool,
    #[error("loss became non-finite at step {step}")]
    NanLoss { step: usize },
}

/// Extract the per-pixel feature vectors for one slice. Boundary handling is
/// edge replication; deterministic.
pub fn extract_features(intensities: &[f32], height: usize, width: usize) -> Vec<f32> {
    assert_eq!(intensities.len(), height * width);
    let at = |y: isize, x: isize| -> f64 {
        let y = y.clamp(0, height as isize - 1) as usize;
        let x = x.clamp(0, width as isize - 1) as usize;
        intensities[y * width + x] as f64
    };

    // Separable Gaussian, sigma = 2 px, radius 6.
    let sigma = 2.0f64;
    let radius = 6isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / ksum).collect();

    let mut blur_rows = vec![0.0f64; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                acc += k * at(y as isize, x as isize + ki as isize - radius);
            }
            blur_rows[y * width + x] = acc;
        }
    }
    let blur_at = |y: isize, x: usize| -> f64 {
        let y = y.clamp(0, height as isize - 1) as usize;
        blur_rows[y * width + x]
    };

    let mut features = vec![0.0f32; height * width * FEATURE_DIM];
    for y in 0..height {
        for x in 0..width {
            let box_stats = |r: isize| -> (f64, f64) {
                let mut sum = 0.0;
                let mut sum_sq = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let v = at(y as isize + dy, x as isize + dx);
                        sum += v;
                        sum_sq += v * v;
                    }
                }
                let n = ((2 * r + 1) * (2 * r + 1)) as f64;
                let mean = sum / n;
                let var = (sum_sq / n - mean * mean).max(0.0);
                (mean, var.sqrt())
            };
            let (mean3, std3) = box_stats(1);
            let (mean7, std7) = box_stats(3);
            let mut gauss = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                gauss += k * blur_at(y as isize + ki as isize - radius, x);
            }
            let row = if height > 1 { y as f64 / (height - 1) as f64 } else { 0.0 };
            let col = if width > 1 { x as f64 / (width - 1) as f64 } else { 0.0 };
            let out = &mut features[(y * width + x) * FEATURE_DIM..][..FEATURE_DIM];
            out.copy_from_slice(&[
                intensities[y * width + x],
                mean3 as f32,
                std3 as f32,
                mean7 as f32,
                std7 as f32,
                gauss as f32,
                row as f32,
                col as f32,
            ]);
        }
    }
    features
}

/// Features and labels for one slice, ready for training or inference.
#[derive(Debug, Clone)]
pub struct SliceData {
    pub pixels: usize,
    pub features: Vec<f32>,
    pub labels: Vec<u8>,
}

impl SliceData {
    pub fn from_volume(volume: &Volume, z: usize) -> Self {
        SliceData {
            pixels: volume.slice_len(),
            features: extract_features(volume.slice_intensities(z), volume.height, volume.width),
            labels: volume.slice_labels(z).to_vec(),
        }
    }
}

/// Per-pixel focal loss term: −α·(1−p)^γ·log(p), with p floored at 1e-12
/// before the log.
pub fn focal_loss_term(p_true: f64, alpha: f64, gamma: f64) -> f64 {
    let q = p_true.max(PROB_FLOOR);
    -alpha * (1.0 - p_true).max(0.0).powf(gamma) * q.ln()
}

/// Mean focal loss over a batch plus the analytic gradient w.r.t. the
/// logits (already divided by the batch size).
///
/// `probs` is row-major `[pixel][class]` softmax output.
pub fn focal_loss_batch(
    probs: &[f64],
    labels: &[u8],
    classes_out: usize,
    alpha: f64,
    gamma: f64,
) -> (f64, Vec<f64>) {
    let n = labels.len();
    assert_eq!(probs.len(), n * classes_out);
    let mut loss = 0.0;
    let mut dlogits = vec![0.0f64; probs.len()];
    let inv_n = 1.0 / n as f64;
    for (i, &label) in labels.iter().enumerate() {
        let row = &probs[i * classes_out..(i + 1) * classes_out];
        let t = label as usize;
        let p = row[t];
        let q = p.max(PROB_FLOOR);
        let om = (1.0 - p).max(0.0);
        loss += focal_loss_term(p, alpha, gamma);

        // dL/dp for L = −α(1−p)^γ ln(max(p, floor)).
        let pow_term = if gamma == 0.0 {
            0.0
        } else if om == 0.0 {
            // Limit as p→1; only the γ=1 case keeps a finite log factor.
            if gamma == 1.0 {
                1.0
            } else {
                0.0
            }
        } else {
            gamma * om.powf(gamma - 1.0)
        };
        let log_grad = if p > PROB_FLOOR { om.powf(gamma) / q } else { 0.0 };
        let dl_dp = alpha * pow_term * q.ln() - alpha * log_grad;

        // Through softmax: dp_t/dz_j = p_t(δ_tj − p_j).
        let out = &mut dlogits[i * classes_out..(i + 1) * classes_out];
        for (j, (&pj, slot)) in row.iter().zip(out.iter_mut()).enumerate() {
            let jac = p * ((j == t) as usize as f64 - pj);
            *slot = dl_dp * jac * inv_n;
        }
    }
    (loss * inv_n, dlogits)
}

/// T stochastic forward passes of per-pixel class probabilities plus their
/// mean, pass-major `[t][class][pixel]`.
#[derive(Debug, Clone)]
pub struct PredictiveSamples {
    pub passes: usize,
    pub classes_out: usize,
    pub pixels: usize,
    pub probs: Vec<f64>,
    pub mean: Vec<f64>,
}

impl PredictiveSamples {
    pub fn pass(&self, t: usize) -> &[f64] {
        let plane = self.classes_out * self.pixels;
        &self.probs[t * plane..(t + 1) * plane]
    }
}

/// Training hyperparameters. Defaults carry the reference optimizer
/// settings at the desk-scale step budget.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub eval_every: usize,
    pub dropout: f64,
    pub mc_passes: usize,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.67,
            gamma: 2.0,
            lr: 4e-4,
            weight_decay: 1e-5,
            batch_size: 512,
            steps: 2000,
            eval_every: 200,
            dropout: 0.5,
            mc_passes: 10,
            hidden: 64,
        }
    }
}

/// Two-hidden-layer MLP with rectified-linear activations, dropout after
/// each hidden layer, and a softmax output over C+1 classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: u8,
    pub dropout: f64,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

/// Gradient buffers mirroring [`Classifier`] parameters.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

impl ParamGrads {
    fn zeros(model: &Classifier) -> Self {
        ParamGrads {
            w1: vec![0.0; model.w1.len()],
            b1: vec![0.0; model.b1.len()],
            w2: vec![0.0; model.w2.len()],
            b2: vec![0.0; model.b2.len()],
            w3: vec![0.0; model.w3.len()],
            b3: vec![0.0; model.b3.len()],
        }
    }

    pub fn slices(&self) -> [&[f64]; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }
}

/// Dropout masks for one forward pass: per-unit scale factors, 0 for a
/// dropped unit and 1/(1−d) for a kept one (inverted dropout).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub layer1: Vec<f64>,
    pub layer2: Vec<f64>,
}

impl Classifier {
    pub fn new(input_dim: usize, hidden: usize, classes: u8, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        let out = classes as usize + 1;
        let he = |fan_in: usize, len: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let scale = (2.0 / fan_in as f64).sqrt();
            (0..len).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect()
        };
        Classifier {
            input_dim,
            hidden,
            classes,
            dropout,
            // Small positive hidden biases keep fresh units off the exact
            // ReLU kink (an all-zero previous layer would otherwise pin
            // every pre-activation at 0).
            w1: he(input_dim, hidden * input_dim, rng),
            b1: vec![0.01; hidden],
            w2: he(hidden, hidden * hidden, rng),
            b2: vec![0.01; hidden],
            w3: he(hidden, out * hidden, rng),
            b3: vec![0.0; out],
        }
    }

    pub fn classes_out(&self) -> usize {
        self.classes as usize + 1
    }

    pub fn param_count(&self) -> usize {
        (self.input_dim + 1) * self.hidden
            + (self.hidden + 1) * self.hidden
            + (self.hidden + 1) * self.classes_out()
    }

    pub fn params(&self) -> [&[f64]; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn params_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    /// Draw one pair of dropout masks from `rng`. Returns `None` when the
    /// dropout rate is zero, which makes every pass exactly deterministic.
    pub fn draw_masks(&self, rng: &mut ChaCha8Rng) -> Option<DropoutMasks> {
        if self.dropout == 0.0 {
            return None;
        }
        let scale = 1.0 / (1.0 - self.dropout);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..self.hidden)
                .map(|_| if rng.gen::<f64>() < self.dropout { 0.0 } else { scale })
                .collect()
        };
        Some(DropoutMasks {
            layer1: draw(rng),
            layer2: draw(rng),
        })
    }

    /// f32 inference over a slice: probabilities written row-major
    /// `[pixel][class]`. Dropped hidden units are skipped entirely; kept
    /// units fold their inverted-dropout scale into the next layer's
    /// compacted weights. Pixels run in lockstep blocks so the inner loops
    /// vectorize across pixels.
    fn forward_infer(&self, features: &[f32], pixels: usize, masks: Option<&DropoutMasks>, out: &mut [f32]) {
        const B: usize = 16;
        let h = self.hidden;
        let f = self.input_dim;
        let o = self.classes_out();
        assert_eq!(features.len(), pixels * f);
        assert_eq!(out.len(), pixels * o);

        let active = |m: Option<&Vec<f64>>| -> Vec<usize> {
            match m {
                None => (0..h).collect(),
                Some(scales) => (0..h).filter(|&j| scales[j] > 0.0).collect(),
            }
        };
        let active1 = active(masks.map(|m| &m.layer1));
        let active2 = active(masks.map(|m| &m.layer2));
        let scale = if masks.is_some() { 1.0 / (1.0 - self.dropout) } else { 1.0 };

        // Compacted weights with the inverted-dropout scale folded downstream.
        let w1c: Vec<f32> = active1
            .iter()
            .flat_map(|&j| self.w1[j * f..(j + 1) * f].iter().map(|&w| w as f32))
            .collect();
        let b1c: Vec<f32> = active1.iter().map(|&j| self.b1[j] as f32).collect();
        let w2c: Vec<f32> = active2
            .iter()
            .flat_map(|&j| active1.iter().map(move |&k| (self.w2[j * h + k] * scale) as f32))
            .collect();
        let b2c: Vec<f32> = active2.iter().map(|&j| self.b2[j] as f32).collect();
        let w3c: Vec<f32> = (0..o)
            .flat_map(|oj| active2.iter().map(move |&j| (self.w3[oj * h + j] * scale) as f32))
            .collect();

        let n1 = active1.len();
        let n2 = active2.len();
        let mut xt = vec![0.0f32; f * B];
        let mut h1 = vec![0.0f32; n1 * B];
        let mut h2 = vec![0.0f32; n2 * B];
        let mut logits = vec![0.0f32; o * B];
        let mut row = vec![0.0f32; o];
        let mut px0 = 0usize;
        while px0 < pixels {
            let count = (pixels - px0).min(B);
            for k in 0..f {
                let dst = &mut xt[k * B..(k + 1) * B];
                for b in 0..count {
                    dst[b] = features[(px0 + b) * f + k];
                }
                dst[count..].fill(0.0);
            }
            for j in 0..n1 {
                let wrow = &w1c[j * f..(j + 1) * f];
                let mut acc = [0.0f32; B];
                acc.fill(b1c[j]);
                for (k, &w) in wrow.iter().enumerate() {
                    let xk = &xt[k * B..(k + 1) * B];
                    for b in 0..B {
                        acc[b] += w * xk[b];
                    }
                }
                let dst = &mut h1[j * B..(j + 1) * B];
                for b in 0..B {
                    dst[b] = acc[b].max(0.0);
                }
            }
            for j in 0..n2 {
                let wrow = &w2c[j * n1..(j + 1) * n1];
                let mut acc = [0.0f32; B];
                acc.fill(b2c[j]);
                for (k, &w) in wrow.iter().enumerate() {
                    let hk = &h1[k * B..(k + 1) * B];
                    for b in 0..B {
                        acc[b] += w * hk[b];
                    }
                }
                let dst = &mut h2[j * B..(j + 1) * B];
                for b in 0..B {
                    dst[b] = acc[b].max(0.0);
                }
            }
            for oj in 0..o {
                let wrow = &w3c[oj * n2..(oj + 1) * n2];
                let mut acc = [0.0f32; B];
                acc.fill(self.b3[oj] as f32);
                for (k, &w) in wrow.iter().enumerate() {
                    let hk = &h2[k * B..(k + 1) * B];
                    for b in 0..B {
                        acc[b] += w * hk[b];
                    }
                }
                logits[oj * B..(oj + 1) * B].copy_from_slice(&acc);
            }
            for b in 0..count {
                for oj in 0..o {
                    row[oj] = logits[oj * B + b];
                }
                softmax_row_f32(&mut row);
                out[(px0 + b) * o..(px0 + b + 1) * o].copy_from_slice(&row);
            }
            px0 += count;
        }
    }

    /// Deterministic inference (dropout disabled): class-major
    /// `[class][pixel]` probabilities.
    pub fn predict_deterministic(&self, slice: &SliceData) -> Vec<f64> {
        let o = self.classes_out();
        let mut rows = vec![0.0f32; slice.pixels * o];
        self.forward_infer(&slice.features, slice.pixels, None, &mut rows);
        let mut planes = vec![0.0f64; slice.pixels * o];
        for px in 0..slice.pixels {
            for c in 0..o {
                planes[c * slice.pixels + px] = rows[px * o + c] as f64;
            }
        }
        planes
    }

    /// Deterministic hard labels (argmax over `predict_deterministic`,
    /// lowest class wins ties).
    pub fn predict_labels(&self, slice: &SliceData) -> Vec<u8> {
        let o = self.classes_out();
        let mut rows = vec![0.0f32; slice.pixels * o];
        self.forward_infer(&slice.features, slice.pixels, None, &mut rows);
        rows.chunks_exact(o)
            .map(|row| {
                let mut best = 0usize;
                for (c, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }

    /// T stochastic MC-dropout passes with masks drawn from the seeded
    /// stream; pass `t` consumes substream `(seed, "mc-pass", t)` so results
    /// are schedule-independent.
    pub fn predict_mc(&self, slice: &SliceData, passes: usize, seed: u64) -> PredictiveSamples {
        assert!(passes >= 1);
        let o = self.classes_out();
        let n = slice.pixels;
        let plane = o * n;
        let mut probs = vec![0.0f64; passes * plane];
        let mut rows = vec![0.0f32; n * o];
        for t in 0..passes {
            let mut rng = substream(seed, "mc-pass", t as u64);
            let masks = self.draw_masks(&mut rng);
            self.forward_infer(&slice.features, n, masks.as_ref(), &mut rows);
            let dst = &mut probs[t * plane..(t + 1) * plane];
            for px in 0..n {
                for c in 0..o {
                    dst[c * n + px] = rows[px * o + c] as f64;
                }
            }
        }
        let mut mean = vec![0.0f64; plane];
        for t in 0..passes {
            for (m, &p) in mean.iter_mut().zip(&probs[t * plane..(t + 1) * plane]) {
                *m += p;
            }
        }
        for m in &mut mean {
            *m /= passes as f64;
        }
        PredictiveSamples {
            passes,
            classes_out: o,
            pixels: n,
            probs,
            mean,
        }
    }

    /// Active-unit lists and the shared inverted-dropout scale for one set
    /// of masks.
    fn compaction(&self, masks: Option<&DropoutMasks>) -> (Vec<usize>, Vec<usize>, f64) {
        match masks {
            None => ((0..self.hidden).collect(), (0..self.hidden).collect(), 1.0),
            Some(m) => (
                (0..self.hidden).filter(|&j| m.layer1[j] > 0.0).collect(),
                (0..self.hidden).filter(|&j| m.layer2[j] > 0.0).collect(),
                1.0 / (1.0 - self.dropout),
            ),
        }
    }

    /// f64 forward over one lane block. `xt` is feature-major
    /// `[feature][lane]`; writes post-mask activations (unit-major blocked)
    /// and row-major softmax probabilities for the first `count` lanes.
    #[allow(clippy::too_many_arguments)]
    fn forward_block(
        &self,
        a1: &[usize],
        a2: &[usize],
        scale: f64,
        xt: &[f64],
        count: usize,
        h1c: &mut [f64],
        h2c: &mut [f64],
        probs: &mut [f64],
    ) {
        const B: usize = TRAIN_BLOCK;
        let h = self.hidden;
        let f = self.input_dim;
        let o = self.classes_out();
        let mut wrow = vec![0.0f64; a1.len().max(a2.len())];
        for (jc, &j) in a1.iter().enumerate() {
            let row = &self.w1[j * f..(j + 1) * f];
            let mut acc = [0.0f64; B];
            acc.fill(self.b1[j]);
            for (k, &w) in row.iter().enumerate() {
                let xk = &xt[k * B..(k + 1) * B];
                for b in 0..B {
                    acc[b] += w * xk[b];
                }
            }
            let dst = &mut h1c[jc * B..(jc + 1) * B];
            for b in 0..B {
                dst[b] = acc[b].max(0.0) * scale;
            }
        }
        for (jc, &j) in a2.iter().enumerate() {
            for (kc, &k) in a1.iter().enumerate() {
                wrow[kc] = self.w2[j * h + k];
            }
            let mut acc = [0.0f64; B];
            acc.fill(self.b2[j]);
            for (kc, &w) in wrow[..a1.len()].iter().enumerate() {
                let hk = &h1c[kc * B..(kc + 1) * B];
                for b in 0..B {
                    acc[b] += w * hk[b];
                }
            }
            let dst = &mut h2c[jc * B..(jc + 1) * B];
            for b in 0..B {
                dst[b] = acc[b].max(0.0) * scale;
            }
        }
        let mut logits = vec![[0.0f64; B]; o];
        for (oj, acc) in logits.iter_mut().enumerate() {
            for (kc, &k) in a2.iter().enumerate() {
                wrow[kc] = self.w3[oj * h + k];
            }
            acc.fill(self.b3[oj]);
            for (kc, &w) in wrow[..a2.len()].iter().enumerate() {
                let hk = &h2c[kc * B..(kc + 1) * B];
                for b in 0..B {
                    acc[b] += w * hk[b];
                }
            }
        }
        for b in 0..count {
            let row = &mut probs[b * o..(b + 1) * o];
            for (oj, slot) in row.iter_mut().enumerate() {
                *slot = logits[oj][b];
            }
            softmax_row_f64(row);
        }
    }

    /// Mean focal loss of a batch under fixed dropout masks (f64 path).
    pub fn loss_only(&self, x: &[f64], labels: &[u8], masks: Option<&DropoutMasks>, alpha: f64, gamma: f64) -> f64 {
        const B: usize = TRAIN_BLOCK;
        let batch = labels.len();
        let f = self.input_dim;
        let o = self.classes_out();
        let (a1, a2, scale) = self.compaction(masks);
        let mut xt = vec![0.0f64; f * B];
        let mut h1c = vec![0.0f64; a1.len() * B];
        let mut h2c = vec![0.0f64; a2.len() * B];
        let mut probs = vec![0.0f64; B * o];
        let mut sum = 0.0f64;
        let mut i0 = 0usize;
        while i0 < batch {
            let count = (batch - i0).min(B);
            transpose_block(x, f, i0, count, &mut xt);
            self.forward_block(&a1, &a2, scale, &xt, count, &mut h1c, &mut h2c, &mut probs);
            for b in 0..count {
                let p = probs[b * o + labels[i0 + b] as usize];
                sum += focal_loss_term(p, alpha, gamma);
            }
            i0 += count;
        }
        sum / batch as f64
    }

    /// Mean focal loss and its analytic gradient w.r.t. every parameter,
    /// backpropagated through softmax, both hidden layers, and the dropout
    /// scale factors. Dropped units receive zero gradient and are skipped
    /// outright; lanes run in blocks so the inner loops vectorize.
    pub fn loss_and_grads(
        &self,
        x: &[f64],
        labels: &[u8],
        masks: Option<&DropoutMasks>,
        alpha: f64,
        gamma: f64,
    ) -> (f64, ParamGrads) {
        const B: usize = TRAIN_BLOCK;
        let batch = labels.len();
        let h = self.hidden;
        let f = self.input_dim;
        let o = self.classes_out();
        let (a1, a2, scale) = self.compaction(masks);
        let (n1, n2) = (a1.len(), a2.len());

        let mut g = ParamGrads::zeros(self);
        let mut xt = vec![0.0f64; f * B];
        let mut h1c = vec![0.0f64; n1 * B];
        let mut h2c = vec![0.0f64; n2 * B];
        let mut probs = vec![0.0f64; B * o];
        let mut d3t = vec![0.0f64; o * B];
        let mut dz2 = vec![0.0f64; n2 * B];
        let mut dz1 = vec![0.0f64; n1 * B];
        let mut wrow = vec![0.0f64; n1.max(n2)];
        let mut total_loss = 0.0f64;
        let inv_n = 1.0 / batch as f64;

        let mut i0 = 0usize;
        while i0 < batch {
            let count = (batch - i0).min(B);
            transpose_block(x, f, i0, count, &mut xt);
            self.forward_block(&a1, &a2, scale, &xt, count, &mut h1c, &mut h2c, &mut probs);

            // Per-lane focal loss and dL/dlogits, scaled for the full-batch
            // mean; padding lanes carry zero gradient.
            let (block_loss, dlogits) =
                focal_loss_batch(&probs[..count * o], &labels[i0..i0 + count], o, alpha, gamma);
            total_loss += block_loss * count as f64 * inv_n;
            let rescale = count as f64 * inv_n;
            for oj in 0..o {
                let dst = &mut d3t[oj * B..(oj + 1) * B];
                for b in 0..count {
                    dst[b] = dlogits[b * o + oj] * rescale;
                }
                dst[count..].fill(0.0);
            }

            for oj in 0..o {
                let d = &d3t[oj * B..(oj + 1) * B];
                g.b3[oj] += d.iter().sum::<f64>();
                for (jc, &j) in a2.iter().enumerate() {
                    let hk = &h2c[jc * B..(jc + 1) * B];
                    let mut acc = [0.0f64; B];
                    for b in 0..B {
                        acc[b] = d[b] * hk[b];
                    }
                    g.w3[oj * h + j] += acc.iter().sum::<f64>();
                }
            }

            for (jc, &j) in a2.iter().enumerate() {
                let mut acc = [0.0f64; B];
                for oj in 0..o {
                    let w = self.w3[oj * h + j];
                    let d = &d3t[oj * B..(oj + 1) * B];
                    for b in 0..B {
                        acc[b] += w * d[b];
                    }
                }
                let hk = &h2c[jc * B..(jc + 1) * B];
                let dst = &mut dz2[jc * B..(jc + 1) * B];
                for b in 0..B {
                    // Post-mask activation is positive iff the kept unit's
                    // pre-activation was positive.
                    dst[b] = if hk[b] > 0.0 { acc[b] * scale } else { 0.0 };
                }
            }

            for (jc, &j) in a2.iter().enumerate() {
                let d = &dz2[jc * B..(jc + 1) * B];
                g.b2[j] += d.iter().sum::<f64>();
                for (kc, &k) in a1.iter().enumerate() {
                    let hk = &h1c[kc * B..(kc + 1) * B];
                    let mut acc = [0.0f64; B];
                    for b in 0..B {
                        acc[b] = d[b] * hk[b];
                    }
                    g.w2[j * h + k] += acc.iter().sum::<f64>();
                }
            }

            for (kc, &k) in a1.iter().enumerate() {
                for (jc, &j) in a2.iter().enumerate() {
                    wrow[jc] = self.w2[j * h + k];
                }
                let mut acc = [0.0f64; B];
                for (jc, &w) in wrow[..n2].iter().enumerate() {
                    let d = &dz2[jc * B..(jc + 1) * B];
                    for b in 0..B {
                        acc[b] += w * d[b];
                    }
                }
                let hk = &h1c[kc * B..(kc + 1) * B];
                let dst = &mut dz1[kc * B..(kc + 1) * B];
                for b in 0..B {
                    dst[b] = if hk[b] > 0.0 { acc[b] * scale } else { 0.0 };
                }
            }

            for (kc, &k) in a1.iter().enumerate() {
                let d = &dz1[kc * B..(kc + 1) * B];
                g.b1[k] += d.iter().sum::<f64>();
                for feat in 0..f {
                    let xk = &xt[feat * B..(feat + 1) * B];
                    let mut acc = [0.0f64; B];
                    for b in 0..B {
                        acc[b] = d[b] * xk[b];
                    }
                    g.w1[k * f + feat] += acc.iter().sum::<f64>();
                }
            }
            i0 += count;
        }
        (total_loss, g)
    }
}

const TRAIN_BLOCK: usize = 8;

/// Gather `count` samples starting at `i0` from row-major `x` into the
/// feature-major lane block `xt`, zero-padding unused lanes.
fn transpose_block(x: &[f64], f: usize, i0: usize, count: usize, xt: &mut [f64]) {
    const B: usize = TRAIN_BLOCK;
    for k in 0..f {
        let dst = &mut xt[k * B..(k + 1) * B];
        for b in 0..count {
            dst[b] = x[(i0 + b) * f + k];
        }
        dst[count..].fill(0.0);
    }
}

fn softmax_row_f32(row: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &v in row.iter() {
        max = max.max(v);
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn softmax_row_f64(row: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in row.iter() {
        max = max.max(v);
    }
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Foreground mean DSC of deterministic predictions over whole volumes
/// (confusion counts pooled across each volume's slices).
pub fn evaluate_mean_dice(model: &Classifier, volumes: &[&[SliceData]], classes: u8) -> f64 {
    if volumes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for slices in volumes {
        let mut counts: Option<ConfusionCounts> = None;
        for slice in *slices {
            let pred = model.predict_labels(slice);
            let tally = ConfusionCounts::tally(&pred, &slice.labels, classes).expect("slice dims");
            match &mut counts {
                None => counts = Some(tally),
                Some(c) => c.merge(&tally),
            }
        }
        let counts = counts.expect("volume has slices");
        let dice_sum: f64 = (1..=classes).map(|c| counts.dice(c)).sum();
        total += dice_sum / classes as f64;
    }
    total / volumes.len() as f64
}

/// Train a freshly initialized classifier on the given slices with AdamW and
/// focal loss. The checkpoint with the highest validation mean DSC
/// (evaluated every `eval_every` steps and at the final step) is returned;
/// with no validation volumes the final parameters are returned.
/// Deterministic for a fixed `(slices, config, seed)`.
pub fn train(
    train_slices: &[&SliceData],
    validation: &[&[SliceData]],
    classes: u8,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Classifier, TrainError> {
    let total_pixels: usize = train_slices.iter().map(|s| s.pixels).sum();
    if total_pixels == 0 {
        return Err(TrainError::EmptyPool);
    }
    let mut offsets = Vec::with_capacity(train_slices.len());
    let mut acc = 0usize;
    for s in train_slices {
        offsets.push(acc);
        acc += s.pixels;
    }

    let mut init_rng = substream(seed, "model-init", 0);
    let mut batch_rng = substream(seed, "batch-order", 0);
    let mut dropout_rng = substream(seed, "dropout", 0);
    let mut model = Classifier::new(FEATURE_DIM, cfg.hidden, classes, cfg.dropout, &mut init_rng);

    let mut adam_m: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut adam_v = adam_m.clone();

    let f = model.input_dim;
    let mut x = vec![0.0f64; cfg.batch_size * f];
    let mut labels = vec![0u8; cfg.batch_size];

    let mut best: Option<(f64, Classifier)> = None;
    for step in 1..=cfg.steps {
        for i in 0..cfg.batch_size {
            let pick = batch_rng.gen_range(0..total_pixels);
            let slice_idx = match offsets.binary_search(&pick) {
                Ok(j) => j,
                Err(j) => j - 1,
            };
            let s = train_slices[slice_idx];
            let px = pick - offsets[slice_idx];
            for (dst, &v) in x[i * f..(i + 1) * f].iter_mut().zip(&s.features[px * f..(px + 1) * f]) {
                *dst = v as f64;
            }
            labels[i] = s.labels[px];
        }
        let masks = model.draw_masks(&mut dropout_rng);
        let (loss, grads) = model.loss_and_grads(&x, &labels, masks.as_ref(), cfg.alpha, cfg.gamma);
        if !loss.is_finite() {
            return Err(TrainError::NanLoss { step });
        }

        let bias1 = 1.0 - ADAM_BETA1.powi(step as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(step as i32);
        let grad_slices = grads.slices();
        for (group, (params, grad)) in model.params_mut().into_iter().zip(grad_slices).enumerate() {
            // Decoupled weight decay on weight matrices only.
            let wd = if group % 2 == 0 { cfg.weight_decay } else { 0.0 };
            let m = &mut adam_m[group];
            let v = &mut adam_v[group];
            for ((p, &g), (m, v)) in params.iter_mut().zip(grad).zip(m.iter_mut().zip(v.iter_mut())) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= cfg.lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * *p);
            }
        }

        if !validation.is_empty() && (step % cfg.eval_every == 0 || step == cfg.steps) {
            let score = evaluate_mean_dice(&model, validation, classes);
            if best.as_ref().map_or(true, |(b, _)| score > *b) {
                best = Some((score, model.clone()));
            }
        }
    }
    Ok(best.map(|(_, m)| m).unwrap_or(model))
}
