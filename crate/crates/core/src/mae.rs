//! Stage one: masked-autoencoder pretraining of the per-visit feature
//! encoder. Images are cut into patches, a fixed fraction of patches is
//! masked, the encoder sees only the visible patches, and a light decoder
//! reconstructs the masked ones. After pretraining the decoder is dropped
//! and the encoder produces one fixed-dimension embedding per image by mean
//! pooling its output tokens.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{Binder, LayerNorm, Linear, ParamId, ParamSet, TransformerBlock};
use crate::optim::{clip_grad_norm, gaussian_init, AdamW, AdamWConfig, Schedule};
use crate::tensor::{elem, Element, Graph, Result, Tensor, TensorError, Var};

/// Architecture and masking configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MAEConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub mask_ratio: f64,
    pub encoder_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub decoder_dim: usize,
    pub decoder_layers: usize,
    /// Normalize each masked patch's target pixels to zero mean / unit
    /// variance before the reconstruction loss.
    pub norm_masked_patches: bool,
}

impl MAEConfig {
    /// Desk-scale default: 32×32 grayscale, 8×8 patches, 64-dim encoder.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            mask_ratio: 0.75,
            encoder_dim: 64,
            encoder_layers: 2,
            encoder_heads: 4,
            decoder_dim: 32,
            decoder_layers: 1,
            norm_masked_patches: false,
        }
    }

    /// Full-scale preset (224×224 RGB, ViT-Base-like encoder). Present for
    /// completeness; not exercised by the test suite.
    pub fn full_scale() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            mask_ratio: 0.75,
            encoder_dim: 768,
            encoder_layers: 12,
            encoder_heads: 12,
            decoder_dim: 512,
            decoder_layers: 8,
            norm_masked_patches: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(TensorError::Invalid {
                op: "mae_config",
                msg: format!("image size {} not divisible by patch size {}", self.image_size, self.patch_size),
            });
        }
        if !(0.0..1.0).contains(&self.mask_ratio) || self.mask_ratio <= 0.0 {
            return Err(TensorError::Invalid {
                op: "mae_config",
                msg: format!("mask ratio {} outside (0,1)", self.mask_ratio),
            });
        }
        if !self.encoder_dim.is_multiple_of(self.encoder_heads) {
            return Err(TensorError::Invalid {
                op: "mae_config",
                msg: format!("encoder dim {} not divisible by {} heads", self.encoder_dim, self.encoder_heads),
            });
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Total patch count N.
    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattened pixels per patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    fn decoder_heads(&self) -> usize {
        let head_dim = self.encoder_dim / self.encoder_heads;
        (self.decoder_dim / head_dim).max(1)
    }
}

/// Cut an H×W×C image tensor into row-major patches, one flattened patch
/// per row.
pub fn patchify<T: Element>(image: &Tensor<T>, patch_size: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(TensorError::Invalid { op: "patchify", msg: format!("expected H×W×C, got {:?}", s) });
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(TensorError::Invalid {
            op: "patchify",
            msg: format!("{}×{} not divisible by patch size {}", h, w, patch_size),
        });
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let pdim = patch_size * patch_size * c;
    let mut out = Vec::with_capacity(gh * gw * pdim);
    let data = image.data();
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch_size {
                let y = py * patch_size + dy;
                let x0 = px * patch_size;
                let row = &data[(y * w + x0) * c..(y * w + x0 + patch_size) * c];
                out.extend_from_slice(row);
            }
        }
    }
    Tensor::new(vec![gh * gw, pdim], out)
}

/// Inverse of [`patchify`]: reassemble patches into the H×W×C image.
pub fn unpatchify<T: Element>(patches: &Tensor<T>, image_size: usize, patch_size: usize, channels: usize) -> Result<Tensor<T>> {
    let grid = image_size / patch_size;
    let pdim = patch_size * patch_size * channels;
    if patches.shape() != [grid * grid, pdim] {
        return Err(TensorError::ShapeMismatch {
            op: "unpatchify",
            lhs: patches.shape().to_vec(),
            rhs: vec![grid * grid, pdim],
        });
    }
    let mut out = vec![T::zero(); image_size * image_size * channels];
    let data = patches.data();
    for py in 0..grid {
        for px in 0..grid {
            let p = py * grid + px;
            for dy in 0..patch_size {
                let y = py * patch_size + dy;
                let x0 = px * patch_size;
                let src = &data[p * pdim + dy * patch_size * channels..p * pdim + (dy + 1) * patch_size * channels];
                out[(y * image_size + x0) * channels..(y * image_size + x0 + patch_size) * channels]
                    .copy_from_slice(src);
            }
        }
    }
    Tensor::new(vec![image_size, image_size, channels], out)
}

/// Which patches of one image are masked. Exactly `round(ρ·N)` indices are
/// chosen uniformly without replacement; index lists are kept in ascending
/// order.
#[derive(Debug, Clone)]
pub struct MaskPlan {
    pub masked: Vec<bool>,
    pub masked_idx: Vec<usize>,
    pub visible_idx: Vec<usize>,
    pub seed: u64,
}

/// Sample a [`MaskPlan`] for `n` patches at mask ratio `rho`.
pub fn sample_mask(n: usize, rho: f64, seed: u64) -> Result<MaskPlan> {
    let k = (rho * n as f64).round() as usize;
    if k == 0 || k >= n {
        return Err(TensorError::Invalid {
            op: "sample_mask",
            msg: format!("mask count {} degenerate for {} patches (ratio {})", k, n, rho),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    // partial Fisher–Yates: the first k entries are a uniform k-subset
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut masked = vec![false; n];
    for &i in &idx[..k] {
        masked[i] = true;
    }
    let masked_idx: Vec<usize> = (0..n).filter(|&i| masked[i]).collect();
    let visible_idx: Vec<usize> = (0..n).filter(|&i| !masked[i]).collect();
    Ok(MaskPlan { masked, masked_idx, visible_idx, seed })
}

#[derive(Debug)]
struct EncoderParts {
    patch_embed: Linear,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

#[derive(Debug)]
struct DecoderParts {
    embed: Linear,
    mask_token: ParamId,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    head: Linear,
}

/// The full masked autoencoder. Embedding extraction uses only the encoder
/// half; the decoder exists for pretraining.
#[derive(Debug)]
pub struct EncoderModel<T: Element> {
    pub cfg: MAEConfig,
    pub params: ParamSet<T>,
    enc: EncoderParts,
    dec: DecoderParts,
}

impl<T: Element> EncoderModel<T> {
    /// Orthogonally initialized model (positional embeddings and the mask
    /// token are small Gaussians).
    pub fn init(cfg: MAEConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let n = cfg.n_patches();

        let patch_embed = Linear::init(&mut params, "enc.patch_embed", cfg.patch_dim(), cfg.encoder_dim, &mut rng)?;
        let pos = params.add("enc.pos", gaussian_init(&[n, cfg.encoder_dim], 0.02, &mut rng), true);
        let mut blocks = Vec::with_capacity(cfg.encoder_layers);
        for i in 0..cfg.encoder_layers {
            blocks.push(TransformerBlock::init(
                &mut params,
                &format!("enc.block{i}"),
                cfg.encoder_dim,
                cfg.encoder_heads,
                4 * cfg.encoder_dim,
                &mut rng,
            )?);
        }
        let norm = LayerNorm::init(&mut params, "enc.norm", cfg.encoder_dim);
        let enc = EncoderParts { patch_embed, pos, blocks, norm };

        let embed = Linear::init(&mut params, "dec.embed", cfg.encoder_dim, cfg.decoder_dim, &mut rng)?;
        let mask_token = params.add("dec.mask_token", gaussian_init(&[1, cfg.decoder_dim], 0.02, &mut rng), true);
        let dpos = params.add("dec.pos", gaussian_init(&[n, cfg.decoder_dim], 0.02, &mut rng), true);
        let mut dblocks = Vec::with_capacity(cfg.decoder_layers);
        for i in 0..cfg.decoder_layers {
            dblocks.push(TransformerBlock::init(
                &mut params,
                &format!("dec.block{i}"),
                cfg.decoder_dim,
                cfg.decoder_heads(),
                4 * cfg.decoder_dim,
                &mut rng,
            )?);
        }
        let dnorm = LayerNorm::init(&mut params, "dec.norm", cfg.decoder_dim);
        let head = Linear::init(&mut params, "dec.head", cfg.decoder_dim, cfg.patch_dim(), &mut rng)?;
        let dec = DecoderParts { embed, mask_token, pos: dpos, blocks: dblocks, norm: dnorm, head };

        Ok(Self { cfg, params, enc, dec })
    }

    /// Encode a subset of patch rows (ascending patch indices). Only the
    /// listed rows are read — masked patch pixels never reach the encoder.
    pub fn encode_visible(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder,
        patches: &Tensor<T>,
        visible_idx: &[usize],
    ) -> Result<Var> {
        let pdim = self.cfg.patch_dim();
        if patches.shape() != [self.cfg.n_patches(), pdim] {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                lhs: patches.shape().to_vec(),
                rhs: vec![self.cfg.n_patches(), pdim],
            });
        }
        let mut rows = Vec::with_capacity(visible_idx.len() * pdim);
        for &i in visible_idx {
            rows.extend_from_slice(&patches.data()[i * pdim..(i + 1) * pdim]);
        }
        let tokens = g.leaf(Tensor::new(vec![visible_idx.len(), pdim], rows)?, false);
        let mut x = self.enc.patch_embed.forward(g, &self.params, binder, tokens)?;
        let pos = binder.var(g, &self.params, self.enc.pos);
        let pos_rows = g.gather_rows(pos, visible_idx.to_vec())?;
        x = g.add(x, pos_rows)?;
        for block in &self.enc.blocks {
            x = block.forward(g, &self.params, binder, x)?;
        }
        self.enc.norm.forward(g, &self.params, binder, x)
    }

    /// Reconstruction loss for one image under a mask plan: mean squared
    /// error over the masked patches only.
    pub fn mae_loss(&self, g: &mut Graph<T>, binder: &mut Binder, patches: &Tensor<T>, plan: &MaskPlan) -> Result<Var> {
        let n = self.cfg.n_patches();
        if plan.masked.len() != n {
            return Err(TensorError::Invalid {
                op: "mae_loss",
                msg: format!("plan covers {} patches, image has {}", plan.masked.len(), n),
            });
        }
        let encoded = self.encode_visible(g, binder, patches, &plan.visible_idx)?;
        let vis_dec = self.dec.embed.forward(g, &self.params, binder, encoded)?;
        let mask_token = binder.var(g, &self.params, self.dec.mask_token);
        let masked_tokens = g.repeat_rows(mask_token, plan.masked_idx.len())?;
        let stack = g.concat(&[vis_dec, masked_tokens], 0)?;
        // Restore patch order: visible rows live at 0..V, masked at V..N.
        let mut restore = vec![0usize; n];
        for (r, &p) in plan.visible_idx.iter().enumerate() {
            restore[p] = r;
        }
        for (r, &p) in plan.masked_idx.iter().enumerate() {
            restore[p] = plan.visible_idx.len() + r;
        }
        let ordered = g.gather_rows(stack, restore)?;
        let dpos = binder.var(g, &self.params, self.dec.pos);
        let mut x = g.add(ordered, dpos)?;
        for block in &self.dec.blocks {
            x = block.forward(g, &self.params, binder, x)?;
        }
        let x = self.dec.norm.forward(g, &self.params, binder, x)?;
        let pred = self.dec.head.forward(g, &self.params, binder, x)?;
        let pred_masked = g.gather_rows(pred, plan.masked_idx.clone())?;

        let pdim = self.cfg.patch_dim();
        let mut target = Vec::with_capacity(plan.masked_idx.len() * pdim);
        for &i in &plan.masked_idx {
            let row = &patches.data()[i * pdim..(i + 1) * pdim];
            if self.cfg.norm_masked_patches {
                target.extend(normalize_patch(row));
            } else {
                target.extend_from_slice(row);
            }
        }
        let target = g.leaf(Tensor::new(vec![plan.masked_idx.len(), pdim], target)?, false);
        let diff = g.sub(pred_masked, target)?;
        let sq = g.mul(diff, diff)?;
        g.mean_all(sq)
    }

    /// Deterministic per-image embedding: encode all patches (no mask) and
    /// mean-pool the output tokens.
    pub fn extract_embedding(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let patches = patchify(image, self.cfg.patch_size)?;
        let all: Vec<usize> = (0..self.cfg.n_patches()).collect();
        let mut g = Graph::new();
        let mut binder = Binder::new(&self.params);
        let tokens = self.encode_visible(&mut g, &mut binder, &patches, &all)?;
        let pooled = g.mean_axis(tokens, 0)?;
        Ok(g.value(pooled).clone())
    }
}

fn normalize_patch<T: Element>(row: &[T]) -> Vec<T> {
    let n = elem::<T>(row.len() as f64);
    let mean = row.iter().fold(T::zero(), |a, &b| a + b) / n;
    let var = row.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
    let inv = (var + elem::<T>(1e-6)).sqrt().recip();
    row.iter().map(|&x| (x - mean) * inv).collect()
}

/// Pretraining hyperparameters. The effective learning rate is
/// `base_lr·batch_size/256`, ramped linearly over the warmup epochs and
/// cosine-decayed to zero afterwards.
#[derive(Debug, Clone, Copy)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 32, base_lr: 8e-3, warmup_epochs: 2, seed: 0 }
    }
}

/// Pretrain on a label-free image corpus (images may come from several
/// merged corpora). Returns the trained model and the mean loss per epoch.
pub fn pretrain<T: Element>(
    images: &[Tensor<T>],
    cfg: MAEConfig,
    opts: PretrainOptions,
) -> Result<(EncoderModel<T>, Vec<f64>)> {
    if images.is_empty() {
        return Err(TensorError::Invalid { op: "pretrain", msg: "empty image corpus".into() });
    }
    let model = EncoderModel::init(cfg, opts.seed)?;
    let patches: Vec<Tensor<T>> = images.iter().map(|img| patchify(img, cfg.patch_size)).collect::<Result<_>>()?;
    pretrain_from(model, &patches, opts)
}

fn pretrain_from<T: Element>(
    mut model: EncoderModel<T>,
    patches: &[Tensor<T>],
    opts: PretrainOptions,
) -> Result<(EncoderModel<T>, Vec<f64>)> {
    let mut opt = AdamW::new(AdamWConfig::pretrain(), model.params.len()).with_exempt(model.params.exempt_flags());
    let lr_peak = crate::optim::scaled_base_lr(opts.base_lr, opts.batch_size);
    let sched = if opts.epochs == 0 {
        None
    } else {
        Some(Schedule::WarmupCosine {
            lr_start: lr_peak,
            lr_end: 0.0,
            warmup_epochs: opts.warmup_epochs.min(opts.epochs),
            total_epochs: opts.epochs,
        })
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0001);
    let n = model.cfg.n_patches();
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        let lr = sched.as_ref().unwrap().lr(epoch)?;
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let mut g = Graph::new();
            let mut binder = Binder::new(&model.params);
            let mut batch_loss: Option<Var> = None;
            for &i in chunk {
                let plan = sample_mask(n, model.cfg.mask_ratio, rng.gen())?;
                let loss = model.mae_loss(&mut g, &mut binder, &patches[i], &plan)?;
                batch_loss = Some(match batch_loss {
                    Some(acc) => g.add(acc, loss)?,
                    None => loss,
                });
            }
            let sum = batch_loss.expect("non-empty chunk");
            let mean = g.scale(sum, elem::<T>(1.0 / chunk.len() as f64))?;
            total += g.value(mean).item().to_f64().unwrap() * chunk.len() as f64;
            count += chunk.len();
            g.backward(mean)?;
            let mut grads = binder.grads(&g);
            clip_grad_norm(&mut grads, 5.0)?;
            opt.step(model.params.tensors_mut(), &grads, lr)?;
        }
        epoch_losses.push(total / count as f64);
    }
    Ok((model, epoch_losses))
}

/// Continue pretraining an existing model (used by tests to compare
/// epoch-0 loss against the trained loss).
pub fn pretrain_model<T: Element>(
    model: EncoderModel<T>,
    images: &[Tensor<T>],
    opts: PretrainOptions,
) -> Result<(EncoderModel<T>, Vec<f64>)> {
    if images.is_empty() {
        return Err(TensorError::Invalid { op: "pretrain", msg: "empty image corpus".into() });
    }
    let patches: Vec<Tensor<T>> =
        images.iter().map(|img| patchify(img, model.cfg.patch_size)).collect::<Result<_>>()?;
    pretrain_from(model, &patches, opts)
}

/// Mean masked-reconstruction loss of a model over a corpus without
/// training (fixed mask seeds derived from `seed`).
pub fn eval_loss<T: Element>(model: &EncoderModel<T>, images: &[Tensor<T>], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.cfg.n_patches();
    let mut total = 0.0;
    for img in images {
        let patches = patchify(img, model.cfg.patch_size)?;
        let plan = sample_mask(n, model.cfg.mask_ratio, rng.gen())?;
        let mut g = Graph::new();
        let mut binder = Binder::new(&model.params);
        let loss = model.mae_loss(&mut g, &mut binder, &patches, &plan)?;
        total += g.value(loss).item().to_f64().unwrap();
    }
    Ok(total / images.len() as f64)
}
