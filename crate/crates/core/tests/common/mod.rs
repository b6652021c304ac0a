//! Shared helpers for the integration suites: a central finite-difference
//! gradient harness (64-bit, h = 1e-5) plus the op-by-op check groups used
//! by both the dedicated gradient tests and the acceptance gate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsdf_core::aggregator::{AggregatorConfig, AggregatorModel, SeqExample, Variant};
use tsdf_core::mae::{patchify, sample_mask, EncoderModel, MAEConfig};
use tsdf_core::nn::Binder;
use tsdf_core::tensor::{Graph, Result, Tensor, Var};

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-6;
pub const SEEDS: u64 = 20;

fn seed_for(name: &str, seed: u64) -> u64 {
    name.bytes().fold(seed.wrapping_mul(0x9e37_79b9), |acc, b| {
        acc.rotate_left(5) ^ u64::from(b)
    })
}

fn assert_close(name: &str, seed: u64, where_: String, analytic: f64, numeric: f64) {
    let abs = (analytic - numeric).abs();
    if abs < ABS_TOL {
        return;
    }
    let rel = abs / analytic.abs().max(numeric.abs());
    assert!(
        rel < REL_TOL,
        "{name} (seed {seed}, {where_}): analytic {analytic:.10e} vs numeric {numeric:.10e} (rel {rel:.3e})"
    );
}

/// Values bounded away from zero so h-perturbations never cross a ReLU kink.
fn draw_kink_safe(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            let mag = rng.gen_range(0.05f64..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Check one op: `build` receives leaves for `shapes` (all tracked) and the
/// per-seed rng (for indices, labels, …) and returns the op output, which
/// the harness contracts to a scalar with a fixed random projection.
pub fn check_op<F>(name: &str, shapes: &[&[usize]], build: F)
where
    F: Fn(&mut Graph<f64>, &[Var], &mut ChaCha8Rng) -> Result<Var>,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(name, seed));
        let inputs: Vec<Tensor<f64>> =
            shapes.iter().map(|s| draw_kink_safe(s, &mut rng)).collect();
        let rng_snapshot = rng.clone();

        // project the op output to a scalar with fixed random coefficients
        // so every output coordinate influences the loss
        let eval = |tensors: &[Tensor<f64>]| -> f64 {
            let mut rng = rng_snapshot.clone();
            let mut g = Graph::new();
            let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let out = build(&mut g, &vars, &mut rng).expect("op construction");
            let coefs: Vec<f64> =
                (0..g.value(out).numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let coef_t = Tensor::new(g.shape(out).to_vec(), coefs).unwrap();
            let c = g.leaf(coef_t, false);
            let prod = g.mul(out, c).expect("projection");
            let loss = g.sum_all(prod).expect("sum");
            g.value(loss).item()
        };
        let grads = {
            let mut rng = rng_snapshot.clone();
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let out = build(&mut g, &vars, &mut rng).expect("op construction");
            let coefs: Vec<f64> =
                (0..g.value(out).numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let coef_t = Tensor::new(g.shape(out).to_vec(), coefs).unwrap();
            let c = g.leaf(coef_t, false);
            let prod = g.mul(out, c).expect("projection");
            let loss = g.sum_all(prod).expect("sum");
            g.backward(loss).expect("backward");
            vars.iter().map(|&v| g.grad(v).cloned()).collect::<Vec<_>>()
        };

        for (ti, tensor) in inputs.iter().enumerate() {
            let analytic = grads[ti]
                .as_ref()
                .unwrap_or_else(|| panic!("{name}: input {ti} received no gradient"));
            for j in 0..tensor.numel() {
                let mut plus = inputs.clone();
                plus[ti].data_mut()[j] += H;
                let mut minus = inputs.clone();
                minus[ti].data_mut()[j] -= H;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
                assert_close(name, seed, format!("input {ti}[{j}]"), analytic.data()[j], numeric);
            }
        }
    }
}

/// Check a composed model loss against finite differences on a random
/// subset of parameter coordinates (the full Jacobian would be slow and
/// adds nothing: every op is already covered exhaustively by `check_op`).
pub fn check_params<M, F>(name: &str, coords_per_seed: usize, init: impl Fn(u64) -> M, loss: F)
where
    F: Fn(&M, &mut ChaCha8Rng) -> (Vec<Option<Tensor<f64>>>, f64),
    M: ParamAccess,
{
    for seed in 0..SEEDS {
        let mut model = init(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(name, seed));
        let rng_snapshot = rng.clone();
        let (grads, _) = loss(&model, &mut rng);

        let layout: Vec<(usize, usize)> = (0..model.n_params())
            .flat_map(|p| (0..model.param_numel(p)).map(move |j| (p, j)))
            .collect();
        for _ in 0..coords_per_seed {
            let &(p, j) = &layout[rng.gen_range(0..layout.len())];
            let analytic = match &grads[p] {
                Some(t) => t.data()[j],
                None => continue, // parameter legitimately outside the active path
            };
            let original = model.read(p, j);
            model.write(p, j, original + H);
            let up = loss(&model, &mut rng_snapshot.clone()).1;
            model.write(p, j, original - H);
            let down = loss(&model, &mut rng_snapshot.clone()).1;
            model.write(p, j, original);
            let numeric = (up - down) / (2.0 * H);
            assert_close(name, seed, format!("param {p}[{j}]"), analytic, numeric);
        }
    }
}

pub trait ParamAccess {
    fn n_params(&self) -> usize;
    fn param_numel(&self, p: usize) -> usize;
    fn read(&self, p: usize, j: usize) -> f64;
    fn write(&mut self, p: usize, j: usize, v: f64);
}

impl ParamAccess for AggregatorModel<f64> {
    fn n_params(&self) -> usize {
        self.params.len()
    }
    fn param_numel(&self, p: usize) -> usize {
        self.params.tensors()[p].numel()
    }
    fn read(&self, p: usize, j: usize) -> f64 {
        self.params.tensors()[p].data()[j]
    }
    fn write(&mut self, p: usize, j: usize, v: f64) {
        self.params.tensors_mut()[p].data_mut()[j] = v;
    }
}

impl ParamAccess for EncoderModel<f64> {
    fn n_params(&self) -> usize {
        self.params.len()
    }
    fn param_numel(&self, p: usize) -> usize {
        self.params.tensors()[p].numel()
    }
    fn read(&self, p: usize, j: usize) -> f64 {
        self.params.tensors()[p].data()[j]
    }
    fn write(&mut self, p: usize, j: usize, v: f64) {
        self.params.tensors_mut()[p].data_mut()[j] = v;
    }
}

pub fn toy_example(m: usize, d: usize, rng: &mut ChaCha8Rng) -> SeqExample<f64> {
    let data: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    SeqExample {
        frames: Tensor::new(vec![m, d], data).unwrap(),
        frame_labels: Some((0..m).map(|_| rng.gen_range(0..2)).collect()),
        label: rng.gen_range(0..2),
    }
}

pub fn small_aggregator_config(variant: Variant) -> AggregatorConfig {
    AggregatorConfig {
        d: 6,
        d_prime: 4,
        conv_out_channels: 3,
        conv_kernel: 3,
        n_class: 2,
        lambda1: 1.5,
        lambda2: 1.0,
        variant,
    }
}

pub fn gradcheck_elementwise() {
    check_op("add", &[&[2, 3], &[2, 3]], |g, v, _| g.add(v[0], v[1]));
    check_op("sub", &[&[2, 3], &[2, 3]], |g, v, _| g.sub(v[0], v[1]));
    check_op("mul", &[&[2, 3], &[2, 3]], |g, v, _| g.mul(v[0], v[1]));
    check_op("scale", &[&[2, 3]], |g, v, _| g.scale(v[0], -1.7));
}

pub fn gradcheck_activations() {
    check_op("relu", &[&[3, 4]], |g, v, _| g.relu(v[0]));
    check_op("gelu", &[&[3, 4]], |g, v, _| g.gelu(v[0]));
    check_op("sigmoid", &[&[3, 4]], |g, v, _| g.sigmoid(v[0]));
    check_op("softmax_rows", &[&[3, 4]], |g, v, _| g.softmax(v[0], 1));
    check_op("softmax_vector", &[&[5]], |g, v, _| g.softmax(v[0], 0));
}

pub fn gradcheck_linear_algebra() {
    check_op("matmul", &[&[2, 3], &[3, 4]], |g, v, _| g.matmul(v[0], v[1]));
    check_op("linear", &[&[5, 3], &[4, 3], &[4]], |g, v, _| g.linear(v[0], v[1], v[2]));
    check_op("conv1d", &[&[4, 6], &[3, 4, 3], &[3]], |g, v, _| g.conv1d(v[0], v[1], v[2]));
    check_op("conv1d_kernel1", &[&[4, 5], &[2, 4, 1], &[2]], |g, v, _| {
        g.conv1d(v[0], v[1], v[2])
    });
    check_op("outer_accumulate", &[&[4, 6], &[4, 6]], |g, v, _| g.outer_accumulate(v[0], v[1]));
    check_op("transpose", &[&[3, 5]], |g, v, _| g.transpose(v[0]));
}

pub fn gradcheck_shape_ops() {
    check_op("reshape", &[&[3, 4]], |g, v, _| g.reshape(v[0], vec![2, 6]));
    check_op("gather_rows", &[&[5, 3]], |g, v, rng| {
        let idx: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
        g.gather_rows(v[0], idx)
    });
    check_op("repeat_rows", &[&[1, 4]], |g, v, _| g.repeat_rows(v[0], 5));
    check_op("slice_cols", &[&[3, 6]], |g, v, rng| {
        let start = rng.gen_range(0..3);
        g.slice_cols(v[0], start, 3)
    });
    check_op("concat_rows", &[&[2, 3], &[4, 3]], |g, v, _| g.concat(&v[..2], 0));
    check_op("concat_cols", &[&[3, 2], &[3, 4]], |g, v, _| g.concat(&v[..2], 1));
}

pub fn gradcheck_reductions() {
    check_op("sum_all", &[&[3, 4]], |g, v, _| g.sum_all(v[0]));
    check_op("mean_all", &[&[3, 4]], |g, v, _| g.mean_all(v[0]));
    check_op("sum_axis0", &[&[3, 4]], |g, v, _| g.sum_axis(v[0], 0));
    check_op("sum_axis1", &[&[3, 4]], |g, v, _| g.sum_axis(v[0], 1));
    check_op("mean_axis0", &[&[3, 4]], |g, v, _| g.mean_axis(v[0], 0));
    check_op("mean_axis1", &[&[3, 4]], |g, v, _| g.mean_axis(v[0], 1));
    check_op("global_avg_pool", &[&[3, 5]], |g, v, _| g.global_avg_pool(v[0]));
    check_op("layer_norm", &[&[3, 6], &[6], &[6]], |g, v, _| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    });
}

pub fn gradcheck_losses() {
    check_op("cross_entropy", &[&[1, 4]], |g, v, rng| {
        let label = rng.gen_range(0..4);
        g.cross_entropy(v[0], label)
    });
    check_op("cross_entropy_mean", &[&[5, 3]], |g, v, rng| {
        let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
        g.cross_entropy_mean(v[0], &labels)
    });
}

fn dual_loss_once(
    model: &AggregatorModel<f64>,
    rng: &mut ChaCha8Rng,
) -> (Vec<Option<Tensor<f64>>>, f64) {
    let example = toy_example(rng.gen_range(1..6), 6, rng);
    let mut g = Graph::new();
    let mut binder = Binder::new(&model.params);
    let dual = model.dual_loss(&mut g, &mut binder, &example).unwrap();
    let value = g.value(dual.total).item();
    g.backward(dual.total).unwrap();
    (binder.grads(&g), value)
}

pub fn gradcheck_dual_loss_bilinear() {
    let cfg = small_aggregator_config(Variant::Bilinear);
    check_params(
        "dual_loss_bilinear",
        25,
        |seed| AggregatorModel::<f64>::init(cfg, seed).unwrap(),
        dual_loss_once,
    );
}

pub fn gradcheck_dual_loss_attention() {
    let cfg = small_aggregator_config(Variant::SelfAttention);
    check_params(
        "dual_loss_attention",
        25,
        |seed| AggregatorModel::<f64>::init(cfg, seed).unwrap(),
        dual_loss_once,
    );
}

pub fn gradcheck_mae_loss() {
    let cfg = MAEConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        mask_ratio: 0.75,
        encoder_dim: 6,
        encoder_layers: 1,
        encoder_heads: 2,
        decoder_dim: 4,
        decoder_layers: 1,
        norm_masked_patches: false,
    };
    check_params(
        "mae_loss",
        25,
        |seed| EncoderModel::<f64>::init(cfg, seed).unwrap(),
        |model, rng| {
            let pixels: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let image = Tensor::new(vec![8, 8, 1], pixels).unwrap();
            let patches = patchify(&image, 4).unwrap();
            let plan = sample_mask(model.cfg.n_patches(), 0.75, rng.gen()).unwrap();
            let mut g = Graph::new();
            let mut binder = Binder::new(&model.params);
            let loss = model.mae_loss(&mut g, &mut binder, &patches, &plan).unwrap();
            let value = g.value(loss).item();
            g.backward(loss).unwrap();
            (binder.grads(&g), value)
        },
    );
}

/// Every op group plus the composed losses, as one sweep. Not every test
/// target that compiles this module calls it, hence the dead-code allow.
#[allow(dead_code)]
pub fn gradcheck_everything() {
    gradcheck_elementwise();
    gradcheck_activations();
    gradcheck_linear_algebra();
    gradcheck_shape_ops();
    gradcheck_reductions();
    gradcheck_losses();
    gradcheck_dual_loss_bilinear();
    gradcheck_dual_loss_attention();
    gradcheck_mae_loss();
}
