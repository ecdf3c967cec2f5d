//! The two self-trained noise predictors: a fully connected spectral network
//! operating on `[d x C]` basis samples and a UNet-style spatial network
//! operating on `[d x H x W]` coefficient maps, both conditioned on the
//! diffusion step through a sinusoidal embedding.

use crate::datapipe::randn_like;
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;

/// Embedding dimension for the diffusion step.
pub const TIME_EMBED_DIM: usize = 128;

/// Deterministic sinusoidal embedding of the step index.
#[derive(Debug, Clone)]
pub struct TimestepEmbedding {
    pub dim: usize,
}

impl TimestepEmbedding {
    pub fn new(dim: usize) -> Self {
        TimestepEmbedding { dim }
    }

    pub fn embed(&self, t: usize) -> Vec<f64> {
        let half = self.dim / 2;
        let mut out = vec![0.0; self.dim];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / (half - 1) as f64).exp();
            out[i] = (t as f64 * freq).sin();
            out[half + i] = (t as f64 * freq).cos();
        }
        out
    }
}

/// Centered uniform init with scale 1/sqrt(fan_in); biases start at zero.
fn init_weight(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor { shape: shape.to_vec(), data, requires_grad: true, grad: None }
}

fn zero_param(shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.requires_grad = true;
    t
}

#[derive(Debug, Clone)]
struct Linear {
    w: Tensor, // [in x out]
    b: Tensor, // [out]
}

impl Linear {
    fn new(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        Linear { w: init_weight(&[n_in, n_out], n_in, rng), b: zero_param(&[n_out]) }
    }

    fn apply(&self, tape: &mut Tape, x: Var, vars: &mut Vec<Var>) -> Result<Var> {
        let wv = tape.input(&self.w)?;
        let bv = tape.input(&self.b)?;
        vars.push(wv);
        vars.push(bv);
        let y = tape.matmul(x, wv)?;
        tape.add_row_vec(y, bv)
    }

}

#[derive(Debug, Clone)]
struct Conv {
    w: Tensor, // [co x ci x 3 x 3]
    b: Tensor, // [co]
}

impl Conv {
    fn new(ci: usize, co: usize, rng: &mut impl Rng) -> Self {
        Conv { w: init_weight(&[co, ci, 3, 3], ci * 9, rng), b: zero_param(&[co]) }
    }

    fn apply(&self, tape: &mut Tape, x: Var, stride: usize, vars: &mut Vec<Var>) -> Result<Var> {
        let wv = tape.input(&self.w)?;
        let bv = tape.input(&self.b)?;
        vars.push(wv);
        vars.push(bv);
        let y = tape.conv2d(x, wv, stride)?;
        tape.add_chan_vec(y, bv)
    }

}

/// Anything that predicts noise from a noisy sample and a step index.
pub trait NoiseModel {
    /// Run the forward pass on `tape`, registering parameters in
    /// [`NoiseModel::params`] order; returns the output and the parameter vars.
    fn forward_traced(&self, tape: &mut Tape, x: Var, t: usize) -> Result<(Var, Vec<Var>)>;

    fn forward(&self, tape: &mut Tape, x: Var, t: usize) -> Result<Var> {
        Ok(self.forward_traced(tape, x, t)?.0)
    }

    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

// ---------------------------------------------------------------------------
// Spectral network
// ---------------------------------------------------------------------------

/// Fully connected denoiser for `[d x C]` spectral samples. Hidden widths
/// default to 256-512-256; the step embedding is projected and added after
/// each hidden activation. All d rows share one set of weights.
#[derive(Debug, Clone)]
pub struct SpectralNet {
    pub bands: usize,
    pub hidden: Vec<usize>,
    emb: TimestepEmbedding,
    layers: Vec<Linear>,
    temb_proj: Vec<Linear>,
}

impl SpectralNet {
    pub fn new(bands: usize, rng: &mut impl Rng) -> Self {
        Self::with_hidden(bands, &[256, 512, 256], rng)
    }

    pub fn with_hidden(bands: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut dims = vec![bands];
        dims.extend_from_slice(hidden);
        dims.push(bands);
        let layers = dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        let temb_proj = hidden.iter().map(|&h| Linear::new(TIME_EMBED_DIM, h, rng)).collect();
        SpectralNet {
            bands,
            hidden: hidden.to_vec(),
            emb: TimestepEmbedding::new(TIME_EMBED_DIM),
            layers,
            temb_proj,
        }
    }
}

impl NoiseModel for SpectralNet {
    fn forward_traced(&self, tape: &mut Tape, x: Var, t: usize) -> Result<(Var, Vec<Var>)> {
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != self.bands {
            return Err(Error::Dimension {
                op: "spectral_forward",
                detail: format!("input {:?} vs {} bands", tape.shape(x), self.bands),
            });
        }
        let mut vars = Vec::new();
        let temb = tape.constant(&[1, TIME_EMBED_DIM], &self.emb.embed(t))?;
        let mut h = x;
        let n_hidden = self.hidden.len();
        for i in 0..n_hidden {
            h = self.layers[i].apply(tape, h, &mut vars)?;
            h = tape.silu(h)?;
            let proj = self.temb_proj[i].apply(tape, temb, &mut vars)?;
            let proj = tape.reshape(proj, &[self.hidden[i]])?;
            h = tape.add_row_vec(h, proj)?;
        }
        let out = self.layers[n_hidden].apply(tape, h, &mut vars)?;
        Ok((out, vars))
    }

    // Enumeration order below mirrors forward registration order exactly;
    // the optimizer pairs gradients with parameters positionally.

    fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for i in 0..self.hidden.len() {
            out.push(&self.layers[i].w);
            out.push(&self.layers[i].b);
            out.push(&self.temb_proj[i].w);
            out.push(&self.temb_proj[i].b);
        }
        let last = self.layers.last().unwrap();
        out.push(&last.w);
        out.push(&last.b);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let n = self.hidden.len();
        let (head, tail) = self.layers.split_at_mut(n);
        let mut out: Vec<&mut Tensor> = Vec::new();
        for (l, p) in head.iter_mut().zip(self.temb_proj.iter_mut()) {
            out.push(&mut l.w);
            out.push(&mut l.b);
            out.push(&mut p.w);
            out.push(&mut p.b);
        }
        out.push(&mut tail[0].w);
        out.push(&mut tail[0].b);
        out
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for i in 0..self.hidden.len() {
            out.push((format!("layer{i}.w"), &self.layers[i].w));
            out.push((format!("layer{i}.b"), &self.layers[i].b));
            out.push((format!("temb{i}.w"), &self.temb_proj[i].w));
            out.push((format!("temb{i}.b"), &self.temb_proj[i].b));
        }
        let last = self.layers.len() - 1;
        out.push((format!("layer{last}.w"), &self.layers[last].w));
        out.push((format!("layer{last}.b"), &self.layers[last].b));
        out
    }
}

// ---------------------------------------------------------------------------
// Spatial network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
}

impl ResBlock {
    fn new(width: usize, rng: &mut impl Rng) -> Self {
        ResBlock { conv1: Conv::new(width, width, rng), conv2: Conv::new(width, width, rng) }
    }

    fn apply(&self, tape: &mut Tape, x: Var, temb_c: Var, vars: &mut Vec<Var>) -> Result<Var> {
        let mut h = tape.silu(x)?;
        h = self.conv1.apply(tape, h, 1, vars)?;
        h = tape.add_chan_vec(h, temb_c)?;
        h = tape.silu(h)?;
        h = self.conv2.apply(tape, h, 1, vars)?;
        tape.add(x, h)
    }

}

/// One resolution stage: two residual blocks sharing a step-embedding
/// projection at the stage width.
#[derive(Debug, Clone)]
struct Stage {
    blocks: [ResBlock; 2],
    temb: Linear,
}

impl Stage {
    fn new(width: usize, rng: &mut impl Rng) -> Self {
        Stage {
            blocks: [ResBlock::new(width, rng), ResBlock::new(width, rng)],
            temb: Linear::new(TIME_EMBED_DIM, width, rng),
        }
    }

    fn apply(&self, tape: &mut Tape, x: Var, temb: Var, width: usize, vars: &mut Vec<Var>) -> Result<Var> {
        let proj = self.temb.apply(tape, temb, vars)?;
        let proj = tape.reshape(proj, &[width])?;
        let h = self.blocks[0].apply(tape, x, proj, vars)?;
        self.blocks[1].apply(tape, h, proj, vars)
    }

}

/// UNet-style denoiser for `[d x H x W]` coefficient maps: four stride-2
/// encoder stages, one intermediate stage, four nearest-upsampling decoder
/// stages with skip concatenation. H and W must be divisible by 16.
#[derive(Debug, Clone)]
pub struct SpatialNet {
    pub channels: usize,
    pub base: usize,
    pub mults: Vec<usize>,
    emb: TimestepEmbedding,
    stem: Conv,
    down: Vec<(Conv, Stage)>,
    mid: Stage,
    up: Vec<(Conv, Stage)>,
    head: Conv,
}

impl SpatialNet {
    pub fn new(channels: usize, base: usize, rng: &mut impl Rng) -> Self {
        Self::with_mults(channels, base, &[1, 2, 3, 4], rng)
    }

    pub fn with_mults(channels: usize, base: usize, mults: &[usize], rng: &mut impl Rng) -> Self {
        assert_eq!(mults.len(), 4, "four encoder stages");
        let widths: Vec<usize> = mults.iter().map(|m| base * m).collect();
        let stem = Conv::new(channels, base, rng);
        let mut down = Vec::new();
        let mut prev = base;
        for &w in &widths {
            down.push((Conv::new(prev, w, rng), Stage::new(w, rng)));
            prev = w;
        }
        let mid = Stage::new(widths[3], rng);
        // decoder mirrors the encoder; skip sources are the stage outputs at
        // [base, w0, w1, w2]
        let skip_widths = [widths[2], widths[1], widths[0], base];
        let out_widths = [widths[2], widths[1], widths[0], base];
        let mut up = Vec::new();
        let mut cur = widths[3];
        for i in 0..4 {
            up.push((Conv::new(cur + skip_widths[i], out_widths[i], rng), Stage::new(out_widths[i], rng)));
            cur = out_widths[i];
        }
        let head = Conv::new(base, channels, rng);
        SpatialNet {
            channels,
            base,
            mults: mults.to_vec(),
            emb: TimestepEmbedding::new(TIME_EMBED_DIM),
            stem,
            down,
            mid,
            up,
            head,
        }
    }

    fn widths(&self) -> Vec<usize> {
        self.mults.iter().map(|m| self.base * m).collect()
    }
}

impl NoiseModel for SpatialNet {
    fn forward_traced(&self, tape: &mut Tape, x: Var, t: usize) -> Result<(Var, Vec<Var>)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(Error::Dimension {
                op: "spatial_forward",
                detail: format!("input {:?} vs {} channels", shape, self.channels),
            });
        }
        if shape[1] % 16 != 0 || shape[2] % 16 != 0 {
            return Err(Error::Dimension {
                op: "spatial_forward",
                detail: format!("spatial size {}x{} not divisible by 16", shape[1], shape[2]),
            });
        }
        let mut vars = Vec::new();
        let temb = tape.constant(&[1, TIME_EMBED_DIM], &self.emb.embed(t))?;
        let widths = self.widths();

        let mut h = self.stem.apply(tape, x, 1, &mut vars)?;
        let mut skips = vec![h];
        for (i, (downconv, stage)) in self.down.iter().enumerate() {
            h = downconv.apply(tape, h, 2, &mut vars)?;
            h = stage.apply(tape, h, temb, widths[i], &mut vars)?;
            skips.push(h);
        }
        h = self.mid.apply(tape, h, temb, widths[3], &mut vars)?;
        for (i, (fuse, stage)) in self.up.iter().enumerate() {
            let skip = skips[3 - i];
            let w_out = if i < 3 { widths[2 - i] } else { self.base };
            h = tape.resize_nearest(h, 2)?;
            h = tape.concat_channels(h, skip)?;
            h = fuse.apply(tape, h, 1, &mut vars)?;
            h = stage.apply(tape, h, temb, w_out, &mut vars)?;
        }
        let out = self.head.apply(tape, h, 1, &mut vars)?;
        Ok((out, vars))
    }

    fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    // Enumeration order below mirrors forward registration order exactly
    // (stage = step projection first, then both blocks); the optimizer pairs
    // gradients with parameters positionally.

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        fn push_conv<'a>(out: &mut Vec<&'a mut Tensor>, c: &'a mut Conv) {
            out.push(&mut c.w);
            out.push(&mut c.b);
        }
        fn push_stage<'a>(out: &mut Vec<&'a mut Tensor>, s: &'a mut Stage) {
            out.push(&mut s.temb.w);
            out.push(&mut s.temb.b);
            for b in &mut s.blocks {
                out.push(&mut b.conv1.w);
                out.push(&mut b.conv1.b);
                out.push(&mut b.conv2.w);
                out.push(&mut b.conv2.b);
            }
        }
        let mut out: Vec<&mut Tensor> = Vec::new();
        push_conv(&mut out, &mut self.stem);
        for (c, s) in &mut self.down {
            push_conv(&mut out, c);
            push_stage(&mut out, s);
        }
        push_stage(&mut out, &mut self.mid);
        for (c, s) in &mut self.up {
            push_conv(&mut out, c);
            push_stage(&mut out, s);
        }
        push_conv(&mut out, &mut self.head);
        out
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        fn push_conv<'a>(out: &mut Vec<(String, &'a Tensor)>, name: String, c: &'a Conv) {
            out.push((format!("{name}.w"), &c.w));
            out.push((format!("{name}.b"), &c.b));
        }
        fn push_stage<'a>(out: &mut Vec<(String, &'a Tensor)>, name: String, s: &'a Stage) {
            out.push((format!("{name}.temb.w"), &s.temb.w));
            out.push((format!("{name}.temb.b"), &s.temb.b));
            for (bi, b) in s.blocks.iter().enumerate() {
                out.push((format!("{name}.block{bi}.conv1.w"), &b.conv1.w));
                out.push((format!("{name}.block{bi}.conv1.b"), &b.conv1.b));
                out.push((format!("{name}.block{bi}.conv2.w"), &b.conv2.w));
                out.push((format!("{name}.block{bi}.conv2.b"), &b.conv2.b));
            }
        }
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        push_conv(&mut out, "stem".into(), &self.stem);
        for (i, (c, s)) in self.down.iter().enumerate() {
            push_conv(&mut out, format!("down{i}.conv"), c);
            push_stage(&mut out, format!("down{i}"), s);
        }
        push_stage(&mut out, "mid".into(), &self.mid);
        for (i, (c, s)) in self.up.iter().enumerate() {
            push_conv(&mut out, format!("up{i}.conv"), c);
            push_stage(&mut out, format!("up{i}"), s);
        }
        push_conv(&mut out, "head".into(), &self.head);
        out
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Adam with standard bias correction, one state slot per parameter tensor.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize], lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for i in 0..p.data.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Denoising-objective training: at each step draw a batch, a uniform step
/// index and fresh noise, then descend the mean squared error between the
/// predicted and true noise. Returns the per-step loss trace.
pub fn train_network<N, S>(
    net: &mut N,
    mut sample: S,
    schedule: &NoiseSchedule,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>>
where
    N: NoiseModel,
    S: FnMut(&mut rand_chacha::ChaCha8Rng) -> Result<Tensor>,
{
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = net.params().iter().map(|p| p.numel()).collect();
    let mut adam = Adam::new(&sizes, lr);
    let mut trace = Vec::with_capacity(steps);

    for step in 0..steps {
        let x0 = sample(&mut rng)?;
        let t = rng.gen_range(1..=schedule.steps);
        let eps = randn_like(&x0, &mut rng);
        let x_t = q_sample(&x0, &eps, schedule.abar(t))?;

        let mut tape = Tape::new();
        let x_var = tape.input(&x_t)?;
        let (out, param_vars) = net.forward_traced(&mut tape, x_var, t)?;
        let target = tape.constant(&eps.shape, &eps.data)?;
        let loss = tape.mse_loss(out, target)?;
        let loss_val = tape.value(loss)[0];
        if !loss_val.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        tape.backward(loss)?;

        let grads: Vec<&[f64]> = param_vars
            .iter()
            .map(|&v| tape.grad(v).unwrap_or(&[]))
            .collect();
        let mut params = net.params_mut();
        adam.update(&mut params, &grads);
        trace.push(loss_val);
    }
    Ok(trace)
}
