//! Style-based generator, residual discriminator and their adversarial
//! training loop with differentiable augmentation and lazy R1.
//!
//! The generator maps `z` through a pixel-normalized MLP to `w`; every
//! synthesis layer modulates its convolution weights with an affine
//! projection of `w`, injects per-pixel noise, and the output is the sum of
//! per-resolution RGB projections squashed by `tanh`. All trainable weights
//! use equalized learning rate (unit-variance storage, runtime scaling).

use std::f32::consts::SQRT_2;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{Label, Manifest};
use crate::diffaug::{AugDraw, DiffAugPolicy};
use crate::error::{Error, Result};
use crate::image::{stack, TensorImage};
use crate::nn::{normal_init, Adam, Param, ParamStore};
use crate::rng;
use crate::tensor::{grad, no_grad, set_grad_enabled, Tensor};
use crate::transforms::resize;

const LRELU_SLOPE: f32 = 0.2;
const W_AVG_BETA: f32 = 0.995;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    /// Output side length; a power of two, at least 8.
    pub resolution: usize,
    pub latent_dim: usize,
    pub mapping_depth: usize,
    /// Feature maps at resolution `r` are `min(channels_max, channels_base / r)`.
    pub channels_base: usize,
    pub channels_max: usize,
    pub r1_gamma: f32,
    /// R1 is evaluated every this many steps and scaled by it.
    pub r1_interval: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    /// Learning-rate multiplier of the mapping network.
    pub mapping_lr_mul: f32,
    pub batch_size: usize,
    pub total_steps: usize,
    pub diffaug: DiffAugPolicy,
    /// Initial strength of every noise input.
    pub noise_strength: f32,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Decay of an exponential moving average of the generator weights.
    /// When set, checkpoints and the trained bundle carry the average.
    pub ema_beta: Option<f32>,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            resolution: 64,
            latent_dim: 64,
            mapping_depth: 3,
            channels_base: 1024,
            channels_max: 32,
            r1_gamma: 10.0,
            r1_interval: 16,
            lr_g: 0.002,
            lr_d: 0.002,
            mapping_lr_mul: 0.01,
            batch_size: 16,
            total_steps: 2000,
            diffaug: DiffAugPolicy::default(),
            noise_strength: 0.1,
            checkpoint_every: 0,
            ema_beta: None,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::usage(m));
        if self.resolution < 8 || !self.resolution.is_power_of_two() {
            return bad(format!(
                "resolution must be a power of two >= 8, got {}",
                self.resolution
            ));
        }
        if self.latent_dim < 2 {
            return bad(format!("latent_dim must be at least 2, got {}", self.latent_dim));
        }
        if self.r1_gamma < 0.0 || self.r1_gamma.is_nan() {
            return bad(format!("r1_gamma must be non-negative, got {}", self.r1_gamma));
        }
        if self.batch_size == 0 || self.r1_interval == 0 {
            return bad("batch_size and r1_interval must be positive".into());
        }
        if let Some(b) = self.ema_beta.filter(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("ema_beta must lie in [0, 1), got {b}"));
        }
        if self.channels(self.resolution) == 0 {
            return bad("channel configuration leaves a layer with zero feature maps".into());
        }
        Ok(())
    }

    pub fn channels(&self, res: usize) -> usize {
        (self.channels_base / res).min(self.channels_max)
    }

    fn block_resolutions(&self) -> Vec<usize> {
        let mut v = Vec::new();
        let mut r = 8;
        while r <= self.resolution {
            v.push(r);
            r *= 2;
        }
        v
    }

    /// Number of per-layer `w` inputs of the synthesis network.
    pub fn num_ws(&self) -> usize {
        2 + 3 * self.block_resolutions().len()
    }
}

fn lrelu(x: &Tensor) -> Tensor {
    x.leaky_relu(LRELU_SLOPE).scale(SQRT_2)
}

/// Fully connected layer with equalized learning rate.
#[derive(Clone)]
struct EqLinear {
    weight: Param,
    bias: Param,
    weight_gain: f32,
    lr_mul: f32,
}

impl EqLinear {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias_init: f32,
        lr_mul: f32,
        rng: &mut R,
    ) -> Self {
        EqLinear {
            weight: store.weight(format!("{name}.weight"), normal_init(&[d_in, d_out], 1.0 / lr_mul, rng)),
            bias: store.weight(format!("{name}.bias"), Tensor::full(&[d_out], bias_init / lr_mul)),
            weight_gain: lr_mul / (d_in as f32).sqrt(),
            lr_mul,
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.weight.value().scale(self.weight_gain))
            .add(&self.bias.value().scale(self.lr_mul))
    }
}

/// Style-modulated convolution.
#[derive(Clone)]
struct ModConv {
    weight: Param,
    affine: EqLinear,
    bias: Param,
    noise_strength: Option<Param>,
    kernel: usize,
    demodulate: bool,
    activate: bool,
}

impl ModConv {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        w_dim: usize,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rgb: bool,
        noise_strength: f32,
        rng: &mut R,
    ) -> Self {
        ModConv {
            weight: store.weight(
                format!("{name}.weight"),
                normal_init(&[c_out, c_in, kernel, kernel], 1.0, rng),
            ),
            affine: EqLinear::new(store, &format!("{name}.affine"), w_dim, c_in, 1.0, 1.0, rng),
            bias: store.weight(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            noise_strength: (!rgb)
                .then(|| store.weight(format!("{name}.noise_strength"), Tensor::full(&[1], noise_strength))),
            kernel,
            demodulate: !rgb,
            activate: !rgb,
        }
    }

    fn forward(&self, x: &Tensor, w: &Tensor, noise: Option<&Tensor>) -> Tensor {
        let (n, c_in) = (x.dim(0), x.dim(1));
        let wt = self.weight.value();
        let c_out = wt.dim(0);
        let wt = wt.scale(1.0 / ((c_in * self.kernel * self.kernel) as f32).sqrt());
        let styles = self.affine.forward(w);
        let mut y = x.mul(&styles.reshape(&[n, c_in, 1, 1])).conv2d(&wt, 1, self.kernel / 2);
        if self.demodulate {
            let energy = wt.square().sum_to(&[c_out, c_in, 1, 1]).reshape(&[c_out, c_in]);
            let d = styles.square().matmul(&energy.t()).add_scalar(1e-8).powf(-0.5);
            y = y.mul(&d.reshape(&[n, c_out, 1, 1]));
        }
        if let (Some(strength), Some(noise)) = (&self.noise_strength, noise) {
            y = y.add(&noise.mul(&strength.value().reshape(&[1, 1, 1, 1])));
        }
        y = y.add(&self.bias.value().reshape(&[1, c_out, 1, 1]));
        if self.activate {
            lrelu(&y)
        } else {
            y
        }
    }
}

#[derive(Clone)]
struct SynthBlock {
    res: usize,
    conv0: ModConv,
    conv1: ModConv,
    torgb: ModConv,
}

/// Mapping plus synthesis network for one image class.
#[derive(Clone)]
pub struct GeneratorBundle {
    pub config: GanConfig,
    pub class_label: Label,
    pub store: ParamStore,
    mapping: Vec<EqLinear>,
    w_avg: Param,
    constant: Param,
    conv4: ModConv,
    torgb4: ModConv,
    blocks: Vec<SynthBlock>,
}

impl GeneratorBundle {
    pub fn new(cfg: &GanConfig, class_label: Label) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(cfg.seed, "gan-generator-init", &[]);
        let wd = cfg.latent_dim;
        let mapping = (0..cfg.mapping_depth)
            .map(|i| {
                EqLinear::new(
                    &mut store,
                    &format!("mapping.fc{i}"),
                    wd,
                    wd,
                    0.0,
                    cfg.mapping_lr_mul,
                    &mut r,
                )
            })
            .collect();
        let w_avg = store.buffer("mapping.w_avg", Tensor::zeros(&[wd]));
        let c4 = cfg.channels(4);
        let constant = store.weight("synthesis.const", normal_init(&[1, c4, 4, 4], 1.0, &mut r));
        let ns = cfg.noise_strength;
        let conv4 = ModConv::new(&mut store, "synthesis.b4.conv1", wd, c4, c4, 3, false, ns, &mut r);
        let torgb4 = ModConv::new(&mut store, "synthesis.b4.torgb", wd, c4, 3, 1, true, ns, &mut r);
        let mut blocks = Vec::new();
        let mut c_prev = c4;
        for res in cfg.block_resolutions() {
            let c = cfg.channels(res);
            let name = format!("synthesis.b{res}");
            blocks.push(SynthBlock {
                res,
                conv0: ModConv::new(
                    &mut store,
                    &format!("{name}.conv0"),
                    wd,
                    c_prev,
                    c,
                    3,
                    false,
                    ns,
                    &mut r,
                ),
                conv1: ModConv::new(&mut store, &format!("{name}.conv1"), wd, c, c, 3, false, ns, &mut r),
                torgb: ModConv::new(&mut store, &format!("{name}.torgb"), wd, c, 3, 1, true, ns, &mut r),
            });
            c_prev = c;
        }
        Ok(GeneratorBundle {
            config: cfg.clone(),
            class_label,
            store,
            mapping,
            w_avg,
            constant,
            conv4,
            torgb4,
            blocks,
        })
    }

    pub fn num_ws(&self) -> usize {
        self.config.num_ws()
    }

    pub fn w_avg(&self) -> Tensor {
        self.w_avg.value()
    }

    fn map(&self, z: &Tensor) -> Tensor {
        let n = z.dim(0);
        let mut x = z.mul(&z.square().mean_to(&[n, 1]).add_scalar(1e-8).powf(-0.5));
        for fc in &self.mapping {
            x = lrelu(&fc.forward(&x));
        }
        x
    }

    fn noise(&self, n: usize, res: usize, layer: usize, noise_seed: u64) -> Tensor {
        let mut data = Vec::with_capacity(n * res * res);
        for i in 0..n {
            let mut r = rng::stream(noise_seed, "gan-noise", &[layer as u64, i as u64]);
            data.extend((0..res * res).map(|_| r.sample::<f32, _>(StandardNormal)));
        }
        Tensor::from_vec(data, &[n, 1, res, res])
    }

    fn synth(&self, ws: &[Tensor], noise_seed: u64) -> Tensor {
        assert_eq!(ws.len(), self.num_ws(), "one w per synthesis layer");
        let n = ws[0].dim(0);
        let c = self.constant.value();
        let mut x = c.broadcast_to(&[n, c.dim(1), 4, 4]);
        x = self.conv4.forward(&x, &ws[0], Some(&self.noise(n, 4, 0, noise_seed)));
        let mut img = self.torgb4.forward(&x, &ws[1], None);
        for (b, block) in self.blocks.iter().enumerate() {
            let k = 2 + 3 * b;
            x = x.upsample2();
            x = block
                .conv0
                .forward(&x, &ws[k], Some(&self.noise(n, block.res, 1 + 2 * b, noise_seed)));
            x = block
                .conv1
                .forward(&x, &ws[k + 1], Some(&self.noise(n, block.res, 2 + 2 * b, noise_seed)));
            img = img.upsample2().add(&block.torgb.forward(&x, &ws[k + 2], None));
        }
        img.tanh()
    }

    /// Generated images `[N, 3, res, res]` for latents `z: [N, latent_dim]`.
    fn generate(&self, z: &Tensor, noise_seed: u64) -> Tensor {
        let w = self.map(z);
        self.synth(&vec![w; self.num_ws()], noise_seed)
    }

    pub fn save(&self, path: &Path, step: usize) -> Result<()> {
        checkpoint::save_tensors(path, &self.store.named_tensors())?;
        let sidecar = GanSidecar {
            config: self.config.clone(),
            class_label: self.class_label,
            step,
        };
        checkpoint::write_json(&checkpoint::sidecar_path(path), &sidecar)
    }

    pub fn load(path: &Path) -> Result<(GeneratorBundle, GanSidecar)> {
        let sidecar: GanSidecar = checkpoint::read_json(&checkpoint::sidecar_path(path))?;
        let bundle = GeneratorBundle::new(&sidecar.config, sidecar.class_label)?;
        bundle.store.load(&checkpoint::load_tensors(path)?, |_| false, true)?;
        Ok((bundle, sidecar))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanSidecar {
    pub config: GanConfig,
    pub class_label: Label,
    pub step: usize,
}

/// Maps latents `z: [N, latent_dim]` to intermediate latents `w`.
pub fn map_latent(bundle: &GeneratorBundle, z: &Tensor) -> Result<Tensor> {
    if z.shape().len() != 2 || z.dim(1) != bundle.config.latent_dim {
        return Err(Error::usage(format!(
            "latents must have shape [N, {}], got {:?}",
            bundle.config.latent_dim,
            z.shape()
        )));
    }
    Ok(bundle.map(z))
}

/// Renders `w: [N, w_dim]` with per-pixel noise drawn from `noise_seed`.
/// Output is `[N, 3, res, res]` in `[-1, 1]`.
pub fn synthesize(bundle: &GeneratorBundle, w: &Tensor, noise_seed: u64) -> Tensor {
    bundle.synth(&vec![w.clone(); bundle.num_ws()], noise_seed)
}

/// Like [`synthesize`] with one `w` per synthesis layer, coarse first.
pub fn synthesize_layers(bundle: &GeneratorBundle, ws: &[Tensor], noise_seed: u64) -> Result<Tensor> {
    if ws.len() != bundle.num_ws() {
        return Err(Error::usage(format!(
            "expected {} per-layer latents, got {}",
            bundle.num_ws(),
            ws.len()
        )));
    }
    Ok(bundle.synth(ws, noise_seed))
}

/// Anything that scores a batch `[N, C, H, W]` with one logit per image.
pub trait Critic {
    fn score(&self, x: &Tensor) -> Tensor;
}

#[derive(Clone)]
struct DConv {
    weight: Param,
    bias: Option<Param>,
    gain: f32,
    pad: usize,
    activate: bool,
}

impl DConv {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        bias: bool,
        activate: bool,
        rng: &mut R,
    ) -> Self {
        DConv {
            weight: store.weight(
                format!("{name}.weight"),
                normal_init(&[c_out, c_in, kernel, kernel], 1.0, rng),
            ),
            bias: bias.then(|| store.weight(format!("{name}.bias"), Tensor::zeros(&[c_out]))),
            gain: 1.0 / ((c_in * kernel * kernel) as f32).sqrt(),
            pad: kernel / 2,
            activate,
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let w = self.weight.value();
        let c_out = w.dim(0);
        let mut y = x.conv2d(&w.scale(self.gain), 1, self.pad);
        if let Some(b) = &self.bias {
            y = y.add(&b.value().reshape(&[1, c_out, 1, 1]));
        }
        if self.activate {
            lrelu(&y)
        } else {
            y
        }
    }
}

#[derive(Clone)]
struct DBlock {
    conv0: DConv,
    conv1: DConv,
    skip: DConv,
}

/// Residual discriminator: 1×1 RGB input layer, one downsampling residual
/// block per resolution, then a 4×4 convolution and two dense layers.
#[derive(Clone)]
pub struct Discriminator {
    pub store: ParamStore,
    fromrgb: DConv,
    blocks: Vec<DBlock>,
    conv4: DConv,
    fc: EqLinear,
    out: EqLinear,
}

impl Discriminator {
    pub fn new(cfg: &GanConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(cfg.seed, "gan-discriminator-init", &[]);
        let top = cfg.channels(cfg.resolution);
        let fromrgb = DConv::new(
            &mut store,
            &format!("d.b{}.fromrgb", cfg.resolution),
            3,
            top,
            1,
            true,
            true,
            &mut r,
        );
        let mut blocks = Vec::new();
        for res in cfg.block_resolutions().into_iter().rev() {
            let (c, c_next) = (cfg.channels(res), cfg.channels(res / 2));
            let name = format!("d.b{res}");
            blocks.push(DBlock {
                conv0: DConv::new(&mut store, &format!("{name}.conv0"), c, c, 3, true, true, &mut r),
                conv1: DConv::new(&mut store, &format!("{name}.conv1"), c, c_next, 3, true, true, &mut r),
                skip: DConv::new(&mut store, &format!("{name}.skip"), c, c_next, 1, false, false, &mut r),
            });
        }
        let c4 = cfg.channels(4);
        let conv4 = DConv::new(&mut store, "d.b4.conv", c4, c4, 3, true, true, &mut r);
        let fc = EqLinear::new(&mut store, "d.b4.fc", c4 * 16, c4, 0.0, 1.0, &mut r);
        let out = EqLinear::new(&mut store, "d.b4.out", c4, 1, 0.0, 1.0, &mut r);
        Ok(Discriminator {
            store,
            fromrgb,
            blocks,
            conv4,
            fc,
            out,
        })
    }
}

impl Critic for Discriminator {
    fn score(&self, x: &Tensor) -> Tensor {
        let mut h = self.fromrgb.forward(x);
        for b in &self.blocks {
            let skip = b.skip.forward(&h.avg_pool2());
            let main = b.conv1.forward(&b.conv0.forward(&h).avg_pool2());
            h = main.add(&skip).scale(std::f32::consts::FRAC_1_SQRT_2);
        }
        h = self.conv4.forward(&h);
        let n = h.dim(0);
        let flat = h.reshape(&[n, h.numel() / n]);
        self.out.forward(&lrelu(&self.fc.forward(&flat)))
    }
}

/// `(gamma / 2) * mean_i ||d critic(x_i) / d x_i||^2` over the batch.
pub fn r1_penalty(critic: &dyn Critic, real: &Tensor, gamma: f32) -> Tensor {
    r1_penalty_with(|x| critic.score(x), real, gamma)
}

/// [`r1_penalty`] for an arbitrary scoring function, which may itself
/// augment its input. The result is differentiable with respect to the
/// critic's parameters.
pub fn r1_penalty_with(score: impl Fn(&Tensor) -> Tensor, real: &Tensor, gamma: f32) -> Tensor {
    let _g = set_grad_enabled(true);
    let x = real.detach().requires_grad_();
    let total = score(&x).sum();
    let g = grad(&total, &[&x], true).remove(0);
    let n = x.dim(0);
    let mut per_sample = vec![1; x.shape().len()];
    per_sample[0] = n;
    g.square().sum_to(&per_sample).mean().scale(gamma / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub d_loss: f32,
    pub g_loss: f32,
    /// Present on steps where R1 was evaluated.
    pub r1: Option<f32>,
}

/// One step's losses plus the augmentation draws actually applied.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub losses: StepLosses,
    pub real_draw: AugDraw,
    pub fake_draw: AugDraw,
    pub generator_draw: AugDraw,
}

/// Generator, discriminator and their optimizers.
pub struct GanTrainer {
    pub generator: GeneratorBundle,
    pub discriminator: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    /// Moving average of each trainable generator tensor.
    ema: Option<Vec<Vec<f32>>>,
    pub step: usize,
}

fn params_and_values(store: &ParamStore) -> (Vec<Param>, Vec<Tensor>) {
    let params = store.trainable();
    let values = params.iter().map(Param::value).collect();
    (params, values)
}

fn refs(v: &[Tensor]) -> Vec<&Tensor> {
    v.iter().collect()
}

impl GanTrainer {
    pub fn new(cfg: &GanConfig, class_label: Label) -> Result<Self> {
        let generator = GeneratorBundle::new(cfg, class_label)?;
        let ema = cfg
            .ema_beta
            .map(|_| generator.store.trainable().iter().map(|p| p.value().to_vec()).collect());
        Ok(GanTrainer {
            generator,
            discriminator: Discriminator::new(cfg)?,
            opt_g: Adam::new(0.0, 0.99),
            opt_d: Adam::new(0.0, 0.99),
            ema,
            step: 0,
        })
    }

    fn update_ema(&mut self) {
        let (Some(beta), Some(ema)) = (self.config().ema_beta, self.ema.as_mut()) else {
            return;
        };
        for (avg, p) in ema.iter_mut().zip(self.generator.store.trainable()) {
            for (a, v) in avg.iter_mut().zip(p.value().data()) {
                *a = v + beta * (*a - v);
            }
        }
    }

    /// Runs `f` on the generator with its averaged weights swapped in, if
    /// averaging is enabled.
    pub fn with_exported_generator<T>(&self, f: impl FnOnce(&GeneratorBundle) -> T) -> T {
        let Some(ema) = &self.ema else {
            return f(&self.generator);
        };
        let params = self.generator.store.trainable();
        let live: Vec<Vec<f32>> = params.iter().map(|p| p.value().to_vec()).collect();
        for (p, avg) in params.iter().zip(ema) {
            p.set_data(avg.clone());
        }
        let out = f(&self.generator);
        for (p, v) in params.iter().zip(live) {
            p.set_data(v);
        }
        out
    }

    /// The generator as it should be used after training: averaged weights
    /// when enabled, the live ones otherwise.
    pub fn into_generator(self) -> GeneratorBundle {
        if let Some(ema) = &self.ema {
            for (p, avg) in self.generator.store.trainable().iter().zip(ema) {
                p.set_data(avg.clone());
            }
        }
        self.generator
    }

    pub fn config(&self) -> &GanConfig {
        &self.generator.config
    }

    fn latents(&self, tag: &str, n: usize) -> Tensor {
        let cfg = self.config();
        Tensor::randn(
            &[n, cfg.latent_dim],
            &mut rng::stream(cfg.seed, tag, &[self.step as u64]),
        )
    }

    fn noise_seed(&self, tag: &str) -> u64 {
        rng::derive_key(self.config().seed, tag, &[self.step as u64])
    }

    fn draw(&self, tag: &str, n: usize) -> AugDraw {
        let cfg = self.config();
        let r = cfg.resolution;
        cfg.diffaug
            .sample(n, r, r, &mut rng::stream(cfg.seed, tag, &[self.step as u64]))
    }

    /// Generator loss on a fresh fake batch and its gradients with respect
    /// to every trainable generator parameter.
    pub fn generator_loss_and_grads(&self, n: usize) -> (Tensor, Vec<Param>, Vec<Tensor>, AugDraw, Tensor) {
        let z = self.latents("gan-z-g", n);
        let w = self.generator.map(&z);
        let fake = self.generator.synth(
            &vec![w.clone(); self.generator.num_ws()],
            self.noise_seed("gan-noise-g"),
        );
        let draw = self.draw("gan-aug-g", n);
        let loss = self.discriminator.score(&draw.apply(&fake)).neg().softplus().mean();
        let (params, values) = params_and_values(&self.generator.store);
        let grads = grad(&loss, &refs(&values), false);
        (loss, params, grads, draw, w.detach())
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self, real: &Tensor) -> Result<StepRecord> {
        let cfg = self.config().clone();
        let n = real.dim(0);
        let expected = [cfg.resolution, cfg.resolution];
        if real.shape().len() != 4 || real.dim(1) != 3 || real.shape()[2..] != expected {
            return Err(Error::usage(format!(
                "real batch must be [N, 3, {r}, {r}], got {:?}",
                real.shape(),
                r = cfg.resolution
            )));
        }
        let non_finite = |what: &str, lr: f64, step: usize| Error::NonFinite {
            what: what.into(),
            epoch: 0,
            step,
            lr,
        };

        let fake = {
            let _g = no_grad();
            self.generator
                .generate(&self.latents("gan-z-d", n), self.noise_seed("gan-noise-d"))
        };
        let draw = self.draw("gan-aug-d", n);
        let (real_draw, fake_draw) = (draw.clone(), draw.clone());
        let d = &self.discriminator;
        let d_real = d.score(&real_draw.apply(real));
        let d_fake = d.score(&fake_draw.apply(&fake));
        let d_loss = d_fake.softplus().mean().add(&d_real.neg().softplus().mean());
        let mut total = d_loss.clone();
        let mut r1_value = None;
        if cfg.r1_gamma > 0.0 && self.step.is_multiple_of(cfg.r1_interval) {
            let r1 = r1_penalty_with(|x| d.score(&draw.apply(x)), real, cfg.r1_gamma);
            r1_value = Some(r1.item());
            total = total.add(&r1.scale(cfg.r1_interval as f32));
        }
        if !total.all_finite() {
            return Err(non_finite("discriminator loss", cfg.lr_d, self.step));
        }
        let (params, values) = params_and_values(&d.store);
        let grads = grad(&total, &refs(&values), false);
        self.opt_d.step(&params, &grads, cfg.lr_d);

        let (g_loss, params, grads, generator_draw, w) = self.generator_loss_and_grads(n);
        if !g_loss.all_finite() {
            return Err(non_finite("generator loss", cfg.lr_g, self.step));
        }
        self.opt_g.step(&params, &grads, cfg.lr_g);
        self.update_ema();
        let batch_w = w.mean_to(&[1, cfg.latent_dim]);
        let w_avg: Vec<f32> = self
            .generator
            .w_avg
            .value()
            .data()
            .iter()
            .zip(batch_w.data())
            .map(|(a, b)| b + W_AVG_BETA * (a - b))
            .collect();
        self.generator.w_avg.set_data(w_avg);

        let losses = StepLosses {
            d_loss: d_loss.item(),
            g_loss: g_loss.item(),
            r1: r1_value,
        };
        self.step += 1;
        Ok(StepRecord {
            losses,
            real_draw,
            fake_draw,
            generator_draw,
        })
    }
}

/// Runs one adversarial step; see [`GanTrainer::step`].
pub fn gan_step(trainer: &mut GanTrainer, real: &Tensor) -> Result<StepRecord> {
    trainer.step(real)
}

/// Images in `[0, 1]` resized to the GAN resolution and mapped to `[-1, 1]`.
pub fn prepare_real(images: &[TensorImage], resolution: usize) -> Result<Vec<TensorImage>> {
    images
        .iter()
        .map(|img| {
            let mut r = resize(img, (resolution, resolution))?;
            if r.channels == 1 {
                let plane = r.data.clone();
                r = TensorImage::new(3, resolution, resolution, plane.repeat(3));
            }
            r.data.iter_mut().for_each(|v| *v = *v * 2.0 - 1.0);
            Ok(r)
        })
        .collect()
}

/// Single class of a corpus; an error if it is empty or mixed.
pub fn corpus_label(corpus: &Manifest) -> Result<Label> {
    let first = corpus
        .records()
        .first()
        .ok_or_else(|| Error::usage("GAN training corpus is empty"))?
        .label;
    if corpus.records().iter().any(|r| r.label != first) {
        return Err(Error::usage("GAN training corpus must contain a single class"));
    }
    Ok(first)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanHistory {
    pub losses: Vec<StepLosses>,
}

/// Trains a generator for the single class present in `corpus`.
pub fn train_gan(corpus: &Manifest, cfg: &GanConfig) -> Result<(GeneratorBundle, GanHistory)> {
    train_gan_with(corpus, cfg, None, &mut |_, _| Ok(()))
}

/// [`train_gan`] with checkpoints written to `checkpoint_dir` every
/// `cfg.checkpoint_every` steps and a per-step observer.
pub fn train_gan_with(
    corpus: &Manifest,
    cfg: &GanConfig,
    checkpoint_dir: Option<&Path>,
    observer: &mut dyn FnMut(usize, &StepLosses) -> Result<()>,
) -> Result<(GeneratorBundle, GanHistory)> {
    cfg.validate()?;
    let label = corpus_label(corpus)?;
    let images = corpus
        .records()
        .iter()
        .map(|r| TensorImage::load(&r.path))
        .collect::<Result<Vec<_>>>()?;
    train_gan_on_images(&images, label, cfg, checkpoint_dir, observer)
}

/// Adversarial training on in-memory `[0, 1]` images of one class.
pub fn train_gan_on_images(
    images: &[TensorImage],
    label: Label,
    cfg: &GanConfig,
    checkpoint_dir: Option<&Path>,
    observer: &mut dyn FnMut(usize, &StepLosses) -> Result<()>,
) -> Result<(GeneratorBundle, GanHistory)> {
    if images.is_empty() {
        return Err(Error::usage("GAN training corpus is empty"));
    }
    let real = prepare_real(images, cfg.resolution)?;
    let mut trainer = GanTrainer::new(cfg, label)?;
    let mut history = GanHistory::default();
    for step in 0..cfg.total_steps {
        let mut r = rng::stream(cfg.seed, "gan-batch", &[step as u64]);
        let batch: Vec<&TensorImage> = (0..cfg.batch_size)
            .map(|_| &real[r.random_range(0..real.len())])
            .collect();
        let rec = trainer.step(&stack(&batch))?;
        observer(step, &rec.losses)?;
        history.losses.push(rec.losses);
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("step_{:06}.safetensors", step + 1));
                trainer.with_exported_generator(|g| g.save(&path, step + 1))?;
            }
        }
    }
    Ok((trainer.into_generator(), history))
}
