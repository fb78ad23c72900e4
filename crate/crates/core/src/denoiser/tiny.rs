use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::ImageTensor;
use crate::tensorops::{conv2d, conv2d_backward, ConvKernel};

use super::{DenoiseRequest, Denoiser};

pub const EMBED_DIM: usize = 8;
const KERNEL_SIZE: usize = 3;

/// Sinusoidal features of `t / T`: `sin(pi 2^i s)`, `cos(pi 2^i s)` for
/// `i = 0..4`.
pub fn sinusoidal_embedding(t: usize, num_steps: usize) -> [f64; EMBED_DIM] {
    let s = t as f64 / num_steps as f64;
    let mut e = [0.0; EMBED_DIM];
    for i in 0..EMBED_DIM / 2 {
        let w = std::f64::consts::PI * (1u32 << i) as f64;
        e[2 * i] = (w * s).sin();
        e[2 * i + 1] = (w * s).cos();
    }
    e
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    /// Leaky rectifier with the given negative slope.
    Leaky(f64),
    Identity,
}

impl Activation {
    fn slope(self) -> f64 {
        match self {
            Activation::Leaky(s) => s,
            Activation::Identity => 1.0,
        }
    }

    #[inline]
    fn apply(self, v: f64) -> f64 {
        if v > 0.0 {
            v
        } else {
            self.slope() * v
        }
    }

    #[inline]
    fn derivative(self, v: f64) -> f64 {
        if v > 0.0 {
            1.0
        } else {
            self.slope()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TinyConfig {
    pub data_channels: usize,
    /// Extra input channels carrying an image condition.
    pub cond_channels: usize,
    /// Length of the text-like condition vector (0 disables it).
    pub text_dim: usize,
    pub hidden: usize,
    pub activation: Activation,
}

impl Default for TinyConfig {
    fn default() -> Self {
        Self {
            data_channels: 1,
            cond_channels: 0,
            text_dim: 0,
            hidden: 16,
            activation: Activation::Leaky(0.1),
        }
    }
}

/// Three 3x3 convolutions `in -> C -> C -> out` with a timestep- and
/// condition-dependent bias added before the first activation.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyDenoiser {
    config: TinyConfig,
    layers: [ConvKernel; 3],
    /// `hidden x EMBED_DIM`.
    time_embed: Vec<f64>,
    /// `hidden x text_dim`.
    text_proj: Vec<f64>,
    /// Learned stand-in for "no condition", starts at zero.
    null_text: Vec<f64>,
}

/// Activations kept for the backward pass.
pub(crate) struct ForwardCache {
    x_in: ImageTensor,
    a1: ImageTensor,
    h1: ImageTensor,
    a2: ImageTensor,
    h2: ImageTensor,
    embed: [f64; EMBED_DIM],
    text: Option<Vec<f64>>,
    used_null: bool,
    pub(crate) out: ImageTensor,
}

impl TinyDenoiser {
    /// He-style random initialization from `seed`.
    pub fn new(config: TinyConfig, seed: u64) -> Result<Self> {
        if config.data_channels == 0 || config.hidden == 0 {
            return Err(Error::domain("data_channels and hidden must be positive"));
        }
        let mut rng = Rng::seed_from_u64(seed);
        let c_in = config.data_channels + config.cond_channels;
        let h = config.hidden;
        let mut layer = |o: usize, i: usize, gain: f64| -> Result<ConvKernel> {
            let n = o * i * KERNEL_SIZE * KERNEL_SIZE;
            let std = gain / ((i * KERNEL_SIZE * KERNEL_SIZE) as f64).sqrt();
            ConvKernel::new(
                o,
                i,
                KERNEL_SIZE,
                (0..n).map(|_| std * rng.normal()).collect(),
                vec![0.0; o],
            )
        };
        let layers = [
            layer(h, c_in, 2f64.sqrt())?,
            layer(h, h, 2f64.sqrt())?,
            layer(config.data_channels, h, 1.0)?,
        ];
        let time_embed = (0..h * EMBED_DIM).map(|_| 0.5 * rng.normal()).collect();
        let text_proj = (0..h * config.text_dim)
            .map(|_| 0.5 * rng.normal())
            .collect();
        Ok(Self {
            config,
            layers,
            time_embed,
            text_proj,
            null_text: vec![0.0; config.text_dim],
        })
    }

    /// Every parameter zero.
    pub fn zeroed(config: TinyConfig) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        let n = net.num_params();
        net.set_params(&vec![0.0; n])?;
        Ok(net)
    }

    pub fn config(&self) -> &TinyConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvKernel; 3] {
        &self.layers
    }

    pub fn middle_dilation(&self) -> usize {
        self.layers[1].dilation()
    }

    /// Changes only the middle layer's tap spacing; weights are untouched.
    pub fn with_middle_dilation(&self, delta: usize) -> Result<Self> {
        let mut net = self.clone();
        net.layers[1].set_dilation(delta)?;
        Ok(net)
    }

    pub fn set_middle_dilation(&mut self, delta: usize) -> Result<()> {
        self.layers[1].set_dilation(delta)
    }

    /// Receptive field of each layer, first to last.
    pub fn receptive_fields(&self) -> [usize; 3] {
        [
            self.layers[0].receptive_field(),
            self.layers[1].receptive_field(),
            self.layers[2].receptive_field(),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(ConvKernel::num_params)
            .sum::<usize>()
            + self.time_embed.len()
            + self.text_proj.len()
            + self.null_text.len()
    }

    /// Flat parameter vector: conv1 weights, conv1 bias, conv2 weights,
    /// conv2 bias, conv3 weights, conv3 bias, time embedding, text
    /// projection, null condition.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            p.extend_from_slice(&l.weights);
            p.extend_from_slice(&l.bias);
        }
        p.extend_from_slice(&self.time_embed);
        p.extend_from_slice(&self.text_proj);
        p.extend_from_slice(&self.null_text);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::shape(self.num_params(), p.len()));
        }
        let mut rest = p;
        let mut take = |dst: &mut Vec<f64>| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        for l in &mut self.layers {
            take(&mut l.weights);
            take(&mut l.bias);
        }
        take(&mut self.time_embed);
        take(&mut self.text_proj);
        take(&mut self.null_text);
        Ok(())
    }

    fn bias_vector(&self, embed: &[f64; EMBED_DIM], text: Option<&[f64]>) -> Vec<f64> {
        let h = self.config.hidden;
        let td = self.config.text_dim;
        (0..h)
            .map(|c| {
                let mut v: f64 = (0..EMBED_DIM)
                    .map(|j| self.time_embed[c * EMBED_DIM + j] * embed[j])
                    .sum();
                if let Some(txt) = text {
                    v += (0..td)
                        .map(|j| self.text_proj[c * td + j] * txt[j])
                        .sum::<f64>();
                }
                v
            })
            .collect()
    }

    pub(crate) fn forward(&self, req: &DenoiseRequest<'_>) -> Result<ForwardCache> {
        req.validate()?;
        let cfg = &self.config;
        if req.input.channels() != cfg.data_channels {
            return Err(Error::shape(
                format!("{} data channels", cfg.data_channels),
                format!("{} channels", req.input.channels()),
            ));
        }
        let x_in = match (cfg.cond_channels, req.image_cond) {
            (0, None) => req.input.clone(),
            (0, Some(_)) => {
                return Err(Error::domain(
                    "denoiser takes no image condition but one was supplied",
                ))
            }
            (n, Some(c)) if c.channels() == n => req.input.concat_channels(c)?,
            (n, Some(c)) => {
                return Err(Error::shape(
                    format!("{n} condition channels"),
                    format!("{} channels", c.channels()),
                ))
            }
            // absent image condition: zero-filled condition channels
            (n, None) => req.input.concat_channels(&ImageTensor::zeros(
                n,
                req.input.height(),
                req.input.width(),
            ))?,
        };
        let (text, used_null) = if cfg.text_dim == 0 {
            (None, false)
        } else {
            match req.text_cond {
                Some(c) if c.len() == cfg.text_dim => (Some(c.to_vec()), false),
                Some(c) => {
                    return Err(Error::shape(
                        format!("text condition of length {}", cfg.text_dim),
                        c.len(),
                    ))
                }
                None => (Some(self.null_text.clone()), true),
            }
        };
        let embed = sinusoidal_embedding(req.t, req.schedule.num_steps());
        let tb = self.bias_vector(&embed, text.as_deref());
        let act = cfg.activation;

        let mut a1 = conv2d(&x_in, &self.layers[0])?;
        for (c, &b) in tb.iter().enumerate() {
            for v in a1.channel_mut(c) {
                *v += b;
            }
        }
        let h1 = a1.map(|v| act.apply(v));
        let a2 = conv2d(&h1, &self.layers[1])?;
        let h2 = a2.map(|v| act.apply(v));
        let out = conv2d(&h2, &self.layers[2])?;
        Ok(ForwardCache {
            x_in,
            a1,
            h1,
            a2,
            h2,
            embed,
            text,
            used_null,
            out,
        })
    }

    /// Gradient of a scalar loss with respect to the flat parameter vector,
    /// given the loss gradient at the output.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: &ImageTensor,
    ) -> Result<Vec<f64>> {
        let act = self.config.activation;
        let g3 = conv2d_backward(&cache.h2, &self.layers[2], grad_out)?;
        let ga2 = g3.input.zip_with(&cache.a2, |g, a| g * act.derivative(a))?;
        let g2 = conv2d_backward(&cache.h1, &self.layers[1], &ga2)?;
        let ga1 = g2.input.zip_with(&cache.a1, |g, a| g * act.derivative(a))?;
        let g1 = conv2d_backward(&cache.x_in, &self.layers[0], &ga1)?;

        let h = self.config.hidden;
        let td = self.config.text_dim;
        let g_tb: Vec<f64> = (0..h).map(|c| ga1.channel(c).iter().sum()).collect();
        let mut g_time = vec![0.0; h * EMBED_DIM];
        for c in 0..h {
            for j in 0..EMBED_DIM {
                g_time[c * EMBED_DIM + j] = g_tb[c] * cache.embed[j];
            }
        }
        let mut g_text = vec![0.0; h * td];
        let mut g_null = vec![0.0; td];
        if let Some(txt) = &cache.text {
            for c in 0..h {
                for j in 0..td {
                    g_text[c * td + j] = g_tb[c] * txt[j];
                }
            }
            if cache.used_null {
                for (j, g) in g_null.iter_mut().enumerate() {
                    *g = (0..h).map(|c| g_tb[c] * self.text_proj[c * td + j]).sum();
                }
            }
        }

        let mut grads = Vec::with_capacity(self.num_params());
        for g in [&g1, &g2, &g3] {
            grads.extend_from_slice(&g.weights);
            grads.extend_from_slice(&g.bias);
        }
        grads.extend_from_slice(&g_time);
        grads.extend_from_slice(&g_text);
        grads.extend_from_slice(&g_null);
        Ok(grads)
    }

    /// Mean squared error against `target` and its parameter gradient.
    pub fn loss_and_grad(
        &self,
        req: &DenoiseRequest<'_>,
        target: &ImageTensor,
    ) -> Result<(f64, Vec<f64>)> {
        let cache = self.forward(req)?;
        cache.out.ensure_same_shape(target)?;
        let n = target.len() as f64;
        let resid = cache.out.axpby(1.0, target, -1.0)?;
        let loss = resid.sum_squares() / n;
        let grad_out = resid.scale(2.0 / n);
        Ok((loss, self.backward(&cache, &grad_out)?))
    }

    pub fn loss(&self, req: &DenoiseRequest<'_>, target: &ImageTensor) -> Result<f64> {
        let out = self.forward(req)?.out;
        out.ensure_same_shape(target)?;
        Ok(out.axpby(1.0, target, -1.0)?.sum_squares() / target.len() as f64)
    }

    // -----------------------------------------------------------------------
    // MFW1 weight files
    // -----------------------------------------------------------------------

    fn tensor_table(&self) -> Vec<(String, Vec<usize>)> {
        let mut t = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let k = l.size();
            t.push((
                format!("conv{}.weight", i + 1),
                vec![l.out_channels(), l.in_channels(), k, k],
            ));
            t.push((format!("conv{}.bias", i + 1), vec![l.out_channels()]));
        }
        t.push(("time_embed".into(), vec![self.config.hidden, EMBED_DIM]));
        t.push((
            "text_proj".into(),
            vec![self.config.hidden, self.config.text_dim],
        ));
        t.push(("null_text".into(), vec![self.config.text_dim]));
        t
    }

    /// ASCII header (`MFW1`, hyperparameters, one `tensor <name> <dims>` line
    /// per parameter block, `end`), then every parameter as a little-endian
    /// `f32` in flat-parameter order.
    pub fn write_weights<W: Write>(&self, mut w: W) -> Result<()> {
        let cfg = &self.config;
        let slope = match cfg.activation {
            Activation::Leaky(s) => s,
            Activation::Identity => 1.0,
        };
        writeln!(w, "MFW1")?;
        writeln!(w, "data_channels {}", cfg.data_channels)?;
        writeln!(w, "cond_channels {}", cfg.cond_channels)?;
        writeln!(w, "text_dim {}", cfg.text_dim)?;
        writeln!(w, "hidden {}", cfg.hidden)?;
        writeln!(w, "slope {slope}")?;
        writeln!(w, "middle_dilation {}", self.middle_dilation())?;
        for (name, dims) in self.tensor_table() {
            let dims: Vec<String> = dims.iter().map(usize::to_string).collect();
            writeln!(w, "tensor {name} {}", dims.join(" "))?;
        }
        writeln!(w, "end")?;
        let mut bytes = Vec::with_capacity(self.num_params() * 4);
        for v in self.params() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_weights<R: BufRead>(mut r: R) -> Result<Self> {
        let bad = |why: String| Error::format("MFW1", why);
        let mut line = String::new();
        let mut next_line = |r: &mut R| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::format("MFW1", "unexpected end of header"));
            }
            Ok(line.trim_end().to_string())
        };
        if next_line(&mut r)? != "MFW1" {
            return Err(bad("missing magic".into()));
        }
        let mut field = |r: &mut R, key: &str| -> Result<String> {
            let l = next_line(r)?;
            match l.split_once(' ') {
                Some((k, v)) if k == key => Ok(v.to_string()),
                _ => Err(Error::format("MFW1", format!("expected {key}, got {l:?}"))),
            }
        };
        let parse_usize = |s: String| s.parse::<usize>().map_err(|e| bad(e.to_string()));
        let data_channels = parse_usize(field(&mut r, "data_channels")?)?;
        let cond_channels = parse_usize(field(&mut r, "cond_channels")?)?;
        let text_dim = parse_usize(field(&mut r, "text_dim")?)?;
        let hidden = parse_usize(field(&mut r, "hidden")?)?;
        let slope: f64 = field(&mut r, "slope")?
            .parse()
            .map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
        let dilation = parse_usize(field(&mut r, "middle_dilation")?)?;
        let activation = if slope == 1.0 {
            Activation::Identity
        } else {
            Activation::Leaky(slope)
        };
        let config = TinyConfig {
            data_channels,
            cond_channels,
            text_dim,
            hidden,
            activation,
        };
        let mut net = Self::zeroed(config)?;
        net.set_middle_dilation(dilation)?;
        for (name, dims) in net.tensor_table() {
            let l = next_line(&mut r)?;
            let mut parts = l.split_whitespace();
            if parts.next() != Some("tensor") || parts.next() != Some(name.as_str()) {
                return Err(bad(format!("expected tensor {name}, got {l:?}")));
            }
            let got: Vec<usize> = parts
                .map(|p| p.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(e.to_string()))?;
            if got != dims {
                return Err(bad(format!("{name}: dims {got:?}, expected {dims:?}")));
            }
        }
        if next_line(&mut r)? != "end" {
            return Err(bad("missing end marker".into()));
        }
        let mut bytes = vec![0u8; net.num_params() * 4];
        r.read_exact(&mut bytes)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(bad("trailing bytes after parameters".into()));
        }
        let params: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if params.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite parameter".into()));
        }
        net.set_params(&params)?;
        Ok(net)
    }

    /// Rounds every parameter through `f32`, matching what a weight file
    /// stores.
    pub fn quantized_f32(&self) -> Self {
        let mut net = self.clone();
        let p: Vec<f64> = self.params().iter().map(|&v| v as f32 as f64).collect();
        net.set_params(&p).expect("same layout");
        net
    }
}

impl Denoiser for TinyDenoiser {
    fn data_channels(&self) -> usize {
        self.config.data_channels
    }

    fn image_cond_channels(&self) -> usize {
        self.config.cond_channels
    }

    fn predict_eps(&self, req: &DenoiseRequest<'_>) -> Result<ImageTensor> {
        Ok(self.forward(req)?.out)
    }

    fn middle_dilation(&self) -> usize {
        TinyDenoiser::middle_dilation(self)
    }

    fn set_middle_dilation(&mut self, delta: usize) -> Result<()> {
        TinyDenoiser::set_middle_dilation(self, delta)
    }
}
