//! The supervised autoencoder: a convolutional encoder projecting into a
//! small latent space, plus a fully-connected classifier reading labels
//! back out of it.
//!
//! The encoder is a stem double-conv block followed by four down stages
//! (max-pool then double-conv), flattened into two parallel linear heads
//! `a` and `b`. The latent code is `a + b` for the plain head; the vae head
//! reads the two linear outputs as mean and (softplus-mapped) standard
//! deviation; the polar head deflects angles out of prohibited sectors.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, Nchw, PolarParams};
use crate::tape::{BnState, Mode, Tape, Var};
use crate::tensor::Tensor;

/// Latent head variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[default]
    Plain,
    Vae,
    Polar,
}

/// Angular layout of the polar head, radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarConfig {
    pub sector_period: f64,
    pub inner_test_modulus: f64,
    pub prohibited_threshold: f64,
    pub extra_rotation: f64,
}

impl Default for PolarConfig {
    /// Sixty-degree sectors with the forty-degree inner test, ten-degree
    /// threshold, and thirty-degree deflection.
    fn default() -> Self {
        use std::f64::consts::PI;
        PolarConfig {
            sector_period: PI / 3.0,
            inner_test_modulus: 2.0 * PI / 9.0,
            prohibited_threshold: PI / 18.0,
            extra_rotation: PI / 6.0,
        }
    }
}

impl PolarConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("sector_period", self.sector_period),
            ("inner_test_modulus", self.inner_test_modulus),
            ("prohibited_threshold", self.prohibited_threshold),
            ("extra_rotation", self.extra_rotation),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("polar {name} must be positive, got {v}")));
            }
        }
        if !(self.prohibited_threshold < self.inner_test_modulus
            && self.inner_test_modulus <= self.sector_period)
        {
            return Err(Error::config(
                "polar config needs prohibited_threshold < inner_test_modulus <= sector_period",
            ));
        }
        Ok(())
    }

    pub fn params(&self) -> PolarParams {
        PolarParams {
            sector_period: self.sector_period,
            inner_test_modulus: self.inner_test_modulus,
            prohibited_threshold: self.prohibited_threshold,
            extra_rotation: self.extra_rotation,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeConfig {
    #[serde(default = "default_input_hw")]
    pub input_hw: usize,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    /// Scales the reference channel widths (64..512); channels round to a
    /// minimum of 8 so the shape survives small scales.
    #[serde(default = "default_width_scale")]
    pub width_scale: f64,
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    #[serde(default = "default_latent_dims")]
    pub latent_dims: usize,
    #[serde(default)]
    pub head: HeadKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polar: Option<PolarConfig>,
}

fn default_input_hw() -> usize {
    32
}
fn default_input_channels() -> usize {
    1
}
fn default_width_scale() -> f64 {
    1.0
}
fn default_n_classes() -> usize {
    5
}
fn default_latent_dims() -> usize {
    2
}

impl Default for SaeConfig {
    fn default() -> Self {
        SaeConfig {
            input_hw: default_input_hw(),
            input_channels: default_input_channels(),
            width_scale: default_width_scale(),
            n_classes: default_n_classes(),
            latent_dims: default_latent_dims(),
            head: HeadKind::Plain,
            polar: None,
        }
    }
}

/// Reference channel widths of the encoder stages.
const STAGE_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];

impl SaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_hw % 16 != 0 || self.input_hw == 0 {
            return Err(Error::config(format!(
                "input_hw must be a positive multiple of 16 (four down stages), got {}",
                self.input_hw
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::config("input_channels must be positive"));
        }
        if !(self.width_scale > 0.0 && self.width_scale <= 1.0) {
            return Err(Error::config(format!(
                "width_scale must lie in (0, 1], got {}",
                self.width_scale
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::config(format!("n_classes must be >= 2, got {}", self.n_classes)));
        }
        if self.latent_dims < 2 {
            return Err(Error::config(format!(
                "latent_dims must be >= 2, got {}",
                self.latent_dims
            )));
        }
        if self.head == HeadKind::Polar && self.latent_dims != 2 {
            return Err(Error::config("the polar head requires latent_dims == 2"));
        }
        if let Some(polar) = &self.polar {
            polar.validate()?;
        }
        Ok(())
    }

    pub fn stage_channels(&self) -> [usize; 5] {
        STAGE_WIDTHS.map(|w| ((w as f64 * self.width_scale).round() as usize).max(8))
    }

    /// Flattened feature count entering the latent heads.
    pub fn flat_features(&self) -> usize {
        let side = self.input_hw / 16;
        self.stage_channels()[4] * side * side
    }

    pub fn polar_or_default(&self) -> PolarConfig {
        self.polar.unwrap_or_default()
    }
}

#[derive(Debug, Clone)]
struct Conv {
    weight: Tensor,
    bias: Tensor,
}

#[derive(Debug, Clone)]
struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    state: BnState,
}

/// conv -> batchnorm -> relu
#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv,
    bn: BatchNorm,
}

/// Two stacked [`ConvBlock`]s.
#[derive(Debug, Clone)]
struct DoubleBlock {
    first: ConvBlock,
    second: ConvBlock,
}

#[derive(Debug, Clone)]
struct LinearLayer {
    weight: Tensor,
    bias: Tensor,
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

impl Conv {
    fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Self {
        Conv {
            weight: kaiming_uniform(rng, &[cout, cin, 3, 3], cin * 9),
            bias: Tensor::zeros(&[cout]),
        }
    }
}

impl BatchNorm {
    fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            state: BnState::new(channels),
        }
    }
}

impl ConvBlock {
    fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Self {
        ConvBlock { conv: Conv::new(rng, cin, cout), bn: BatchNorm::new(cout) }
    }

    fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let w = tape.watch(&mut self.conv.weight)?;
        let b = tape.watch(&mut self.conv.bias)?;
        let conv = tape.conv2d(x, w, b)?;
        let gamma = tape.watch(&mut self.bn.gamma)?;
        let beta = tape.watch(&mut self.bn.beta)?;
        let bn = tape.batchnorm2d(conv, gamma, beta, &mut self.bn.state, mode)?;
        tape.relu(bn)
    }

    /// Tape-free eval forward; normalizes by running statistics.
    fn forward_eval(&self, input: &[f64], dims: Nchw) -> (Vec<f64>, Nchw) {
        let cout = self.conv.weight.shape[0];
        let out_dims = Nchw { n: dims.n, c: cout, h: dims.h, w: dims.w };
        let mut out = vec![0.0; out_dims.numel()];
        kernels::conv2d_forward(
            input,
            dims,
            &self.conv.weight.data,
            &self.conv.bias.data,
            cout,
            &mut out,
        );
        let mut normed = vec![0.0; out.len()];
        kernels::batchnorm_forward_eval(
            &out,
            out_dims,
            &self.bn.gamma.data,
            &self.bn.beta.data,
            &self.bn.state.running_mean,
            &self.bn.state.running_var,
            &mut normed,
        );
        for v in &mut normed {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        (normed, out_dims)
    }
}

impl DoubleBlock {
    fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Self {
        DoubleBlock {
            first: ConvBlock::new(rng, cin, cout),
            second: ConvBlock::new(rng, cout, cout),
        }
    }

    fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let x = self.first.forward(tape, x, mode)?;
        self.second.forward(tape, x, mode)
    }

    fn forward_eval(&self, input: &[f64], dims: Nchw) -> (Vec<f64>, Nchw) {
        let (x, dims) = self.first.forward_eval(input, dims);
        self.second.forward_eval(&x, dims)
    }
}

impl LinearLayer {
    fn new(rng: &mut ChaCha8Rng, din: usize, dout: usize) -> Self {
        LinearLayer { weight: kaiming_uniform(rng, &[dout, din], din), bias: Tensor::zeros(&[dout]) }
    }

    fn forward(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.watch(&mut self.weight)?;
        let b = tape.watch(&mut self.bias)?;
        tape.linear(x, w, b)
    }

    fn forward_eval(&self, input: &[f64], n: usize) -> Vec<f64> {
        let dout = self.weight.shape[0];
        let din = self.weight.shape[1];
        let mut out = vec![0.0; n * dout];
        kernels::linear_forward(input, n, din, &self.weight.data, &self.bias.data, dout, &mut out);
        out
    }
}

/// Tape handles produced by a training forward pass.
pub struct ForwardVars {
    pub z: Var,
    pub logits: Var,
    /// (mu, sigma) when the vae head is active.
    pub vae: Option<(Var, Var)>,
}

#[derive(Debug, Clone)]
pub struct SaeModel {
    pub config: SaeConfig,
    stem: DoubleBlock,
    downs: Vec<DoubleBlock>,
    head_a: LinearLayer,
    head_b: LinearLayer,
    classifier: Vec<LinearLayer>,
}

impl SaeModel {
    /// Build a freshly initialized model; `seed` fixes every weight.
    pub fn new(config: SaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = config.stage_channels();
        let stem = DoubleBlock::new(&mut rng, config.input_channels, ch[0]);
        let downs = vec![
            DoubleBlock::new(&mut rng, ch[0], ch[1]),
            DoubleBlock::new(&mut rng, ch[1], ch[2]),
            DoubleBlock::new(&mut rng, ch[2], ch[3]),
            DoubleBlock::new(&mut rng, ch[3], ch[4]),
        ];
        let flat = config.flat_features();
        let head_a = LinearLayer::new(&mut rng, flat, config.latent_dims);
        let head_b = LinearLayer::new(&mut rng, flat, config.latent_dims);
        let classifier = vec![
            LinearLayer::new(&mut rng, config.latent_dims, 32),
            LinearLayer::new(&mut rng, 32, 64),
            LinearLayer::new(&mut rng, 64, config.n_classes),
        ];
        Ok(SaeModel { config, stem, downs, head_a, head_b, classifier })
    }

    fn check_batch(&self, shape: &[usize]) -> Result<Nchw> {
        let dims = Nchw::from_shape("encode", shape)?;
        if dims.c != self.config.input_channels
            || dims.h != self.config.input_hw
            || dims.w != self.config.input_hw
        {
            return Err(Error::Dim {
                op: "encode",
                detail: format!(
                    "batch shape {:?} does not match model input [N,{},{},{}]",
                    shape, self.config.input_channels, self.config.input_hw, self.config.input_hw
                ),
            });
        }
        Ok(dims)
    }

    /// Run the encoder on the tape up to the two head activations (a, b).
    fn heads_on_tape(&mut self, tape: &mut Tape, batch: Var, mode: Mode) -> Result<(Var, Var)> {
        let mut x = self.stem.forward(tape, batch, mode)?;
        for down in &mut self.downs {
            let pooled = tape.maxpool2(x)?;
            x = down.forward(tape, pooled, mode)?;
        }
        let n = tape.shape(x)[0];
        let flat = tape.reshape(x, &[n, self.config.flat_features()])?;
        let a = self.head_a.forward(tape, flat)?;
        let b = self.head_b.forward(tape, flat)?;
        Ok((a, b))
    }

    /// Training-path encode; also returns (mu, sigma) for the vae head.
    /// `rng` drives the vae head's sampling in train mode.
    pub fn encode_on_tape(
        &mut self,
        tape: &mut Tape,
        batch: &Tensor,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Option<(Var, Var)>)> {
        self.check_batch(&batch.shape)?;
        let n = batch.shape[0];
        let input = tape.leaf(&batch.shape, batch.data.clone())?;
        let (a, b) = self.heads_on_tape(tape, input, mode)?;
        match self.config.head {
            HeadKind::Plain => Ok((tape.add(a, b)?, None)),
            HeadKind::Vae => {
                let sigma = tape.softplus(b)?;
                let z = match mode {
                    Mode::Train => {
                        let eps: Vec<f64> = (0..n * self.config.latent_dims)
                            .map(|_| rng.sample(StandardNormal))
                            .collect();
                        let eps = tape.leaf(&[n, self.config.latent_dims], eps)?;
                        let noise = tape.mul(sigma, eps)?;
                        tape.add(a, noise)?
                    }
                    // Mean inference: deterministic, epsilon = 0.
                    Mode::Eval => a,
                };
                Ok((z, Some((a, sigma))))
            }
            HeadKind::Polar => {
                let raw = tape.add(a, b)?;
                let z = tape.polar(raw, self.config.polar_or_default().params())?;
                Ok((z, None))
            }
        }
    }

    /// Mean and positivity-mapped standard deviation of the vae head.
    pub fn vae_kld_inputs(
        &mut self,
        tape: &mut Tape,
        batch: &Tensor,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        if self.config.head != HeadKind::Vae {
            return Err(Error::contract("vae_kld_inputs requires the vae head"));
        }
        self.check_batch(&batch.shape)?;
        let input = tape.leaf(&batch.shape, batch.data.clone())?;
        let (a, b) = self.heads_on_tape(tape, input, mode)?;
        let sigma = tape.softplus(b)?;
        Ok((a, sigma))
    }

    /// Classifier on the tape.
    pub fn classify_on_tape(&mut self, tape: &mut Tape, z: Var) -> Result<Var> {
        if tape.shape(z).last() != Some(&self.config.latent_dims) {
            return Err(Error::Dim {
                op: "classify",
                detail: format!(
                    "latent axis must be {}, got shape {:?}",
                    self.config.latent_dims,
                    tape.shape(z)
                ),
            });
        }
        let h1 = self.classifier[0].forward(tape, z)?;
        let h1 = tape.relu(h1)?;
        let h2 = self.classifier[1].forward(tape, h1)?;
        let h2 = tape.relu(h2)?;
        self.classifier[2].forward(tape, h2)
    }

    /// Full training forward pass: encode, then classify.
    pub fn forward_on_tape(
        &mut self,
        tape: &mut Tape,
        batch: &Tensor,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardVars> {
        let (z, vae) = self.encode_on_tape(tape, batch, mode, rng)?;
        let logits = self.classify_on_tape(tape, z)?;
        Ok(ForwardVars { z, logits, vae })
    }

    /// Deterministic tape-free encode: batch norm uses running statistics,
    /// the vae head returns its mean. Pure in (parameters, input), so
    /// concurrent callers are fine.
    pub fn encode_eval(&self, batch: &Tensor) -> Result<Tensor> {
        let dims = self.check_batch(&batch.shape)?;
        let (mut x, mut d) = self.stem.forward_eval(&batch.data, dims);
        for down in &self.downs {
            let mut pooled = vec![0.0; d.n * d.c * (d.h / 2) * (d.w / 2)];
            let mut argmax = Vec::new();
            kernels::maxpool2_forward(&x, d, &mut pooled, &mut argmax)?;
            d = Nchw { n: d.n, c: d.c, h: d.h / 2, w: d.w / 2 };
            let (nx, nd) = down.forward_eval(&pooled, d);
            x = nx;
            d = nd;
        }
        let n = dims.n;
        let a = self.head_a.forward_eval(&x, n);
        let z = match self.config.head {
            HeadKind::Plain => {
                let b = self.head_b.forward_eval(&x, n);
                a.iter().zip(&b).map(|(x, y)| x + y).collect()
            }
            // Mean inference.
            HeadKind::Vae => a,
            HeadKind::Polar => {
                let b = self.head_b.forward_eval(&x, n);
                let raw: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
                let mut out = vec![0.0; raw.len()];
                kernels::polar_forward(&raw, n, self.config.polar_or_default().params(), &mut out);
                out
            }
        };
        Tensor::new(&[n, self.config.latent_dims], z)
    }

    /// Classifier logits from latent positions, tape-free.
    pub fn logits_from_latent(&self, z: &Tensor) -> Result<Tensor> {
        if z.shape.len() != 2 || z.shape[1] != self.config.latent_dims {
            return Err(Error::Dim {
                op: "classify",
                detail: format!("latent batch must be [N,{}], got {:?}", self.config.latent_dims, z.shape),
            });
        }
        let n = z.shape[0];
        let mut h = self.classifier[0].forward_eval(&z.data, n);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut h = self.classifier[1].forward_eval(&h, n);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        let logits = self.classifier[2].forward_eval(&h, n);
        Tensor::new(&[n, self.config.n_classes], logits)
    }

    /// Encode and classify a batch in eval mode; labels are row argmaxes
    /// with ties broken toward the lowest class index.
    pub fn predict(&self, batch: &Tensor) -> Result<Prediction> {
        let z = self.encode_eval(batch)?;
        let logits = self.logits_from_latent(&z)?;
        let labels = argmax_rows(&logits.data, self.config.n_classes);
        Ok(Prediction { z, logits, labels })
    }

    /// Every learnable parameter, in a stable order shared by the
    /// optimizer and the checkpoint format.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        let blocks: Vec<(String, &mut DoubleBlock)> = std::iter::once(("stem".to_string(), &mut self.stem))
            .chain(self.downs.iter_mut().enumerate().map(|(i, d)| (format!("down{i}"), d)))
            .collect();
        for (prefix, block) in blocks {
            for (half, cb) in
                [("1", &mut block.first), ("2", &mut block.second)].map(|(s, b)| (s, b))
            {
                out.push((format!("{prefix}.conv{half}.weight"), &mut cb.conv.weight));
                out.push((format!("{prefix}.conv{half}.bias"), &mut cb.conv.bias));
                out.push((format!("{prefix}.bn{half}.gamma"), &mut cb.bn.gamma));
                out.push((format!("{prefix}.bn{half}.beta"), &mut cb.bn.beta));
            }
        }
        out.push(("head_a.weight".into(), &mut self.head_a.weight));
        out.push(("head_a.bias".into(), &mut self.head_a.bias));
        out.push(("head_b.weight".into(), &mut self.head_b.weight));
        out.push(("head_b.bias".into(), &mut self.head_b.bias));
        for (i, layer) in self.classifier.iter_mut().enumerate() {
            out.push((format!("classifier{i}.weight"), &mut layer.weight));
            out.push((format!("classifier{i}.bias"), &mut layer.bias));
        }
        out
    }

    /// Batch-norm running statistics, named like the parameters.
    pub fn named_state_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = Vec::new();
        let blocks: Vec<(String, &mut DoubleBlock)> = std::iter::once(("stem".to_string(), &mut self.stem))
            .chain(self.downs.iter_mut().enumerate().map(|(i, d)| (format!("down{i}"), d)))
            .collect();
        for (prefix, block) in blocks {
            for (half, cb) in [("1", &mut block.first), ("2", &mut block.second)] {
                out.push((format!("{prefix}.bn{half}.running_mean"), &mut cb.bn.state.running_mean));
                out.push((format!("{prefix}.bn{half}.running_var"), &mut cb.bn.state.running_var));
            }
        }
        out
    }

    /// Accumulate tape gradients into every watched parameter.
    pub fn collect_grads(&mut self, tape: &Tape) {
        for (_, p) in self.named_params_mut() {
            tape.collect_grad(p);
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
            p.tape_id = None;
        }
    }

    /// Direct access to the latent head biases (used by tests).
    pub fn head_biases_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.head_a.bias, &mut self.head_b.bias)
    }

    /// Head weight matrices a and b (used by the head-merge identity test).
    pub fn head_weights(&self) -> (&Tensor, &Tensor) {
        (&self.head_a.weight, &self.head_b.weight)
    }

    pub fn set_head_params(&mut self, weight_a: Tensor, bias_a: Tensor, weight_b: Tensor, bias_b: Tensor) {
        self.head_a.weight = weight_a;
        self.head_a.bias = bias_a;
        self.head_b.weight = weight_b;
        self.head_b.bias = bias_b;
    }
}

/// Eval-mode model outputs for one batch.
pub struct Prediction {
    pub z: Tensor,
    pub logits: Tensor,
    pub labels: Vec<usize>,
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(logits: &[f64], n_classes: usize) -> Vec<usize> {
    logits
        .chunks_exact(n_classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Standalone polar transform over a latent batch [N,2].
pub fn polar_transform(z: &Tensor, cfg: &PolarConfig) -> Result<Tensor> {
    if z.shape.len() != 2 || z.shape[1] != 2 {
        return Err(Error::Dim {
            op: "polar_transform",
            detail: format!("expected [N,2], got {:?}", z.shape),
        });
    }
    cfg.validate()?;
    let n = z.shape[0];
    let mut out = vec![0.0; z.data.len()];
    kernels::polar_forward(&z.data, n, cfg.params(), &mut out);
    Tensor::new(&z.shape, out)
}
