//! Tape gradients against central finite differences (step 1e-5, 64-bit) on
//! randomized instances: every op, every block, the whole network and both losses.

use dfnet::blocks::{AmiModule, BranchSpec, ChannelAttention, MagModule};
use dfnet::gradcheck::{grad_check, grad_check_elements, GradCheckReport};
use dfnet::kernels::{Conv2dOptions, Padding};
use dfnet::loss::{cross_entropy_on, mae_on, sharpening_loss_on, LossConfig};
use dfnet::model::{BackboneKind, BackboneSpec, DfnetConfig, DfnetModel, ModelVariant};
use dfnet::params::{Binding, ParamStore};
use dfnet::{Float, Result, Shape, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: Float = 1e-5;
const MAX_REL: Float = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, shape: impl Into<Shape>, lo: Float, hi: Float) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// `Σ r ⊙ x` for a fixed random `r`, so every output element gets a
/// distinct weight in the checked scalar.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let v = tape.value(x);
    let r = Tensor::uniform(v.shape(), -1.0, 1.0, &mut rng(seed));
    let value = v.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
    tape.scalar_fn(x, value, r)
}

fn check(name: &str, report: GradCheckReport) {
    eprintln!(
        "{name:<28} max rel err {:.2e} over {} elements",
        report.max_relative_error, report.elements_checked
    );
    assert!(
        report.max_relative_error < MAX_REL,
        "{name}: {report:?}"
    );
}

pub fn elementwise_and_reduction_ops() {
    let mut r = rng(1);
    let x = uniform(&mut r, [2, 3, 16, 16], -2.0, 2.0);
    let y = uniform(&mut r, [2, 3, 16, 16], -2.0, 2.0);
    check("relu", grad_check(std::slice::from_ref(&x), STEP, |t, v| {
        let a = t.relu(v[0])?;
        project(t, a, 10)
    }).unwrap());
    check("sigmoid", grad_check(std::slice::from_ref(&x), STEP, |t, v| {
        let a = t.sigmoid(v[0])?;
        project(t, a, 11)
    }).unwrap());
    check("add", grad_check(&[x.clone(), y.clone()], STEP, |t, v| {
        let a = t.add(v[0], v[1])?;
        project(t, a, 12)
    }).unwrap());
    check("scale+sum", grad_check(std::slice::from_ref(&x), STEP, |t, v| {
        let a = t.scale(v[0], -0.7)?;
        let b = t.sigmoid(a)?;
        t.sum(b)
    }).unwrap());
    check("global_avg_pool", grad_check(std::slice::from_ref(&x), STEP, |t, v| {
        let a = t.global_avg_pool(v[0])?;
        project(t, a, 13)
    }).unwrap());
    check("max_pool2", grad_check(std::slice::from_ref(&x), STEP, |t, v| {
        let a = t.max_pool2(v[0])?;
        project(t, a, 14)
    }).unwrap());
    check("upsample_bilinear", grad_check(&[uniform(&mut r, [2, 2, 8, 8], -1.0, 1.0)], STEP, |t, v| {
        let a = t.upsample_bilinear(v[0], 2)?;
        project(t, a, 15)
    }).unwrap());
    let z = uniform(&mut r, [2, 2, 16, 16], -1.0, 1.0);
    check("concat_channels", grad_check(&[x.clone(), z], STEP, |t, v| {
        let a = t.concat_channels(&[v[0], v[1]])?;
        project(t, a, 16)
    }).unwrap());
    let w = uniform(&mut r, [2, 3, 1, 1], 0.1, 0.9);
    check("scale_channels", grad_check(&[x, w], STEP, |t, v| {
        let a = t.scale_channels(v[0], v[1])?;
        project(t, a, 17)
    }).unwrap());
}

pub fn convolution_and_dense_ops() {
    let mut r = rng(2);
    let x = uniform(&mut r, [2, 3, 16, 16], -1.0, 1.0);
    let cases = [
        ("conv3x3", [4, 3, 3, 3], Conv2dOptions::default()),
        ("conv3x3 dilation 2", [4, 3, 3, 3], Conv2dOptions::dilated(2)),
        ("conv1x7", [2, 3, 1, 7], Conv2dOptions::default()),
        ("conv3x1 dilation 5", [2, 3, 3, 1], Conv2dOptions::dilated(5)),
        ("conv2x2 stride 2", [2, 3, 2, 2], Conv2dOptions { stride: 2, ..Default::default() }),
        ("conv3x3 explicit pad", [2, 3, 3, 3], Conv2dOptions { padding: Padding::Explicit(0, 2), ..Default::default() }),
    ];
    for (i, (name, wshape, opts)) in cases.into_iter().enumerate() {
        let w = uniform(&mut r, wshape, -0.5, 0.5);
        let b = uniform(&mut r, [1, wshape[0], 1, 1], -0.5, 0.5);
        check(name, grad_check(&[x.clone(), w, b], STEP, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), &opts)?;
            project(t, y, 20 + i as u64)
        }).unwrap());
    }
    let feats = uniform(&mut r, [3, 5, 1, 1], -1.0, 1.0);
    let w = uniform(&mut r, [4, 5, 1, 1], -1.0, 1.0);
    let b = uniform(&mut r, [1, 4, 1, 1], -1.0, 1.0);
    check("dense", grad_check(&[feats, w, b], STEP, |t, v| {
        let y = t.dense(v[0], v[1], Some(v[2]))?;
        project(t, y, 30)
    }).unwrap());
}

/// Parameters moved off their initialization. Zero biases meeting exact ReLU
/// zeros put pre-activations exactly on the kink, where the two one-sided
/// derivatives differ and no finite-difference check is meaningful.
fn jittered(params: &[Tensor], seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    params
        .iter()
        .map(|t| {
            let data = t.data().iter().map(|v| v + r.gen_range(-0.05..0.05)).collect();
            Tensor::from_vec(t.shape(), data).unwrap()
        })
        .collect()
}

/// Checks a block's gradient with respect to its input(s) and all parameters.
fn check_block(
    name: &str,
    store: &ParamStore,
    inputs: Vec<Tensor>,
    forward: impl Fn(&mut Tape, &Binding, &[Var]) -> Result<Var>,
) {
    let n_in = inputs.len();
    let mut all = inputs;
    all.extend(jittered(store.tensors(), 41));
    let report = grad_check(&all, STEP, |t, v| {
        let p = Binding::from_vars(v[n_in..].to_vec());
        let y = forward(t, &p, &v[..n_in])?;
        project(t, y, 40)
    })
    .unwrap();
    check(name, report);
}

pub fn attention_blocks() {
    let mut r = rng(3);
    let mut store = ParamStore::new();
    let ca = ChannelAttention::new(&mut store, &mut r, "ca", 8, 4).unwrap();
    let x = uniform(&mut r, [2, 8, 16, 16], -1.0, 1.0);
    check_block("channel attention", &store, vec![x], |t, p, v| ca.forward(t, p, v[0]));

    for with_ca in [true, false] {
        let mut store = ParamStore::new();
        let mag = MagModule::new(&mut store, &mut r, "mag", 3, &BranchSpec::default_table(2), with_ca).unwrap();
        let x = uniform(&mut r, [2, 3, 16, 16], -1.0, 1.0);
        check_block(if with_ca { "MAG" } else { "MAG without CA" }, &store, vec![x], |t, p, v| {
            mag.forward(t, p, v[0])
        });

        let mut store = ParamStore::new();
        let ami = AmiModule::new(&mut store, &mut r, "ami", 3, 4, 4, with_ca).unwrap();
        let low = uniform(&mut r, [2, 3, 16, 16], -1.0, 1.0);
        let high = uniform(&mut r, [2, 4, 16, 16], -1.0, 1.0);
        check_block(if with_ca { "AMI" } else { "AMI without CA" }, &store, vec![low, high], |t, p, v| {
            ami.forward(t, p, v[0], v[1])
        });
    }
}

fn small_model(variant: ModelVariant, seed: u64) -> DfnetModel {
    DfnetModel::new(DfnetConfig {
        backbone: BackboneSpec::with_stage_channels(BackboneKind::Tiny3, &[4, 4, 4]),
        branch_channels: 2,
        fuse_channels: 4,
        ami_channels: 4,
        input_size: (16, 16),
        seed,
        variant,
    })
    .unwrap()
}

fn target(rng: &mut ChaCha8Rng) -> Tensor {
    let (cy, cx) = (rng.gen_range(5.0..11.0), rng.gen_range(5.0..11.0));
    let data = (0..2 * 256)
        .map(|i| {
            let (y, x) = (((i % 256) / 16) as Float, (i % 16) as Float);
            if (y - cy).powi(2) + (x - cx).powi(2) < 16.0 { 1.0 } else { 0.0 }
        })
        .collect();
    Tensor::from_vec([2, 1, 16, 16], data).unwrap()
}

fn check_model(name: &str, model: &DfnetModel, seed: u64, loss: impl Fn(&mut Tape, Var, &Tensor) -> Result<Var>) {
    let mut r = rng(seed);
    let images = uniform(&mut r, [2, 3, 16, 16], 0.0, 1.0);
    let g = target(&mut r);
    let mut inputs = vec![images];
    inputs.extend(jittered(model.params.tensors(), seed + 1));
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    let report = grad_check_elements(&inputs, &all, STEP, |t, v| {
        let p = Binding::from_vars(v[1..].to_vec());
        let s = model.forward(t, &p, v[0])?;
        loss(t, s, &g)
    })
    .unwrap();
    check(name, report);
}

pub fn whole_network_with_sharpening_loss() {
    for (i, variant) in ModelVariant::ALL.into_iter().enumerate() {
        let model = small_model(variant, 5 + i as u64);
        check_model(&format!("network {variant}"), &model, 50 + i as u64, |t, s, g| {
            Ok(sharpening_loss_on(t, s, g, &LossConfig::default())?.0)
        });
    }
}

pub fn whole_network_with_cross_entropy() {
    let model = small_model(ModelVariant::Full, 7);
    check_model("network cross-entropy", &model, 60, |t, s, g| cross_entropy_on(t, s, g, 1e-7));
}

pub fn losses_on_random_maps() {
    let mut r = rng(8);
    let s = uniform(&mut r, [2, 1, 16, 16], 0.02, 0.98);
    let g = target(&mut r);
    check("sharpening loss", grad_check(std::slice::from_ref(&s), STEP, |t, v| {
        Ok(sharpening_loss_on(t, v[0], &g, &LossConfig::default())?.0)
    }).unwrap());
    check("sharpening loss λ=0.5", grad_check(std::slice::from_ref(&s), STEP, |t, v| {
        Ok(sharpening_loss_on(t, v[0], &g, &LossConfig::with_lambda(0.5))?.0)
    }).unwrap());
    check("cross-entropy", grad_check(std::slice::from_ref(&s), STEP, |t, v| cross_entropy_on(t, v[0], &g, 1e-7)).unwrap());
    check("mae", grad_check(&[s], STEP, |t, v| mae_on(t, v[0], &g)).unwrap());
    // Through the sigmoid, as in training.
    let logits = uniform(&mut r, [2, 1, 16, 16], -3.0, 3.0);
    check("sigmoid + sharpening loss", grad_check(&[logits], STEP, |t, v| {
        let s = t.sigmoid(v[0])?;
        Ok(sharpening_loss_on(t, s, &g, &LossConfig::default())?.0)
    }).unwrap());
}

// Each check is a plain function so the acceptance gate can call it too.
#[cfg(test)]
mod tests {
    #[test]
    fn elementwise_and_reduction_ops() {
        super::elementwise_and_reduction_ops()
    }
    #[test]
    fn convolution_and_dense_ops() {
        super::convolution_and_dense_ops()
    }
    #[test]
    fn attention_blocks() {
        super::attention_blocks()
    }
    #[test]
    fn whole_network_with_sharpening_loss() {
        super::whole_network_with_sharpening_loss()
    }
    #[test]
    fn whole_network_with_cross_entropy() {
        super::whole_network_with_cross_entropy()
    }
    #[test]
    fn losses_on_random_maps() {
        super::losses_on_random_maps()
    }
}
