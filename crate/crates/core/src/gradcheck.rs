//! Gradient-check suite: every differentiable tensor operation and every
//! attack loss, analytic tape gradients against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::rc::Rc;

use crate::losses::{divergence, identity_term, LossConfig, Objective};
use crate::models::ModelBundle;
use crate::noise::project;
use crate::synth::{synth_face, uniform_noise};
use crate::tensor::{
    compare_with_finite_differences, grad_check, ResizeMode, Tape, Tensor, TensorError, Var,
};
use crate::Result;

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const EPS: f64 = 1e-5;
/// Side of the image used for the loss checks.
pub const IMAGE_SIDE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckItem {
    pub name: String,
    pub max_rel_error: f64,
    /// Number of checked coordinates.
    pub coords: usize,
}

impl CheckItem {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type ScalarFn = Box<dyn for<'t> Fn(&'t Tape, Var<'t>) -> std::result::Result<Var<'t>, TensorError>>;

/// Runs one check of `f` at `x`.
pub fn check(name: &str, f: ScalarFn, x: &Tensor) -> Result<CheckItem> {
    let out = grad_check(f, x, EPS)?;
    Ok(CheckItem {
        name: name.to_string(),
        max_rel_error: out.max_rel_error,
        coords: x.len(),
    })
}

/// Checks a supplied analytic gradient of `f` at `x`.
pub fn check_against(
    name: &str,
    analytic: &[f64],
    f: impl FnMut(&Tensor) -> std::result::Result<f64, TensorError>,
    x: &Tensor,
) -> Result<CheckItem> {
    let out = compare_with_finite_differences(analytic, f, x, EPS)?;
    Ok(CheckItem {
        name: name.to_string(),
        max_rel_error: out.max_rel_error,
        coords: x.len(),
    })
}

struct Sampler(ChaCha8Rng);

impl Sampler {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.0.random_range(lo..hi))
    }

    /// Values with magnitude in `[0.1, 1)` and random sign, clear of kinks at 0.
    fn off_zero(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| {
            let v = self.0.random_range(0.1..1.0);
            if self.0.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
    }
}

/// Reduces any output to a scalar through fixed pseudo-random weights, so
/// every output coordinate contributes a distinct amount.
fn project_out<'t>(tape: &'t Tape, y: Var<'t>) -> std::result::Result<Var<'t>, TensorError> {
    let shape = y.shape();
    let w = Tensor::from_fn(&shape, |i| ((i * 7919 % 101) as f64 / 101.0) - 0.37);
    y.mul(&tape.constant(&w)).map(|v| v.sum())
}

fn op_checks(seed: u64) -> Result<Vec<CheckItem>> {
    let mut s = Sampler(ChaCha8Rng::seed_from_u64(seed));
    let mut items = Vec::new();
    let a = s.off_zero(&[3, 4]);
    let b = s.off_zero(&[3, 4]);
    let positive = s.uniform(&[3, 4], 0.5, 2.0);

    macro_rules! item {
        ($name:expr, $x:expr, |$tape:ident, $v:ident| $body:expr) => {{
            let f: ScalarFn = Box::new(move |$tape: &Tape, $v: Var<'_>| {
                let y = $body;
                project_out($tape, y)
            });
            items.push(check($name, f, &$x)?);
        }};
    }

    let (b1, b2, b3, p1) = (b.clone(), b.clone(), positive.clone(), positive.clone());
    item!("add", a, |t, v| v.add(&t.constant(&b1))?);
    item!("sub", a, |t, v| t.constant(&b2).sub(&v)?);
    item!("mul", a, |t, v| v.mul(&v.add(&t.constant(&b3))?)?);
    item!("div", a, |t, v| v.div(&t.constant(&p1))?);
    item!("div (denominator)", positive, |t, v| t
        .constant(&Tensor::full(&[3, 4], 0.7))
        .div(&v)?);
    item!("scale", a, |_t, v| v.scale(-1.7));
    item!("add_scalar", a, |_t, v| v.add_scalar(0.3).square());
    // inputs lie in ±[0.1, 1); bounds at ±0.05 keep every coordinate clear of them
    item!("clamp", a, |_t, v| v
        .clamp(-0.05, 0.05)
        .add(&v.clamp(-2.0, 2.0))?);
    item!("abs", a, |_t, v| v.abs());
    item!("sign", a, |_t, v| v.sign().mul(&v)?);
    item!("square", a, |_t, v| v.square());
    item!("sqrt", positive, |_t, v| v.sqrt());
    item!("tanh", a, |_t, v| v.scale(2.0).tanh());
    item!("relu", a, |_t, v| v.relu());
    item!("sum", a, |_t, v| v.square().sum());
    item!("mean", a, |_t, v| v.square().mean());

    let m = s.off_zero(&[4, 5]);
    let rhs = s.off_zero(&[5, 3]);
    let (r1, m1) = (rhs.clone(), m.clone());
    item!("matmul (lhs)", m, |t, v| v.matmul(&t.constant(&r1))?);
    item!("matmul (rhs)", rhs, |t, v| t.constant(&m1).matmul(&v)?);
    let batched = s.off_zero(&[2, 3, 4]);
    let batched_rhs = s.off_zero(&[2, 4, 2]);
    item!("matmul (batched)", batched, |t, v| v
        .matmul(&t.constant(&batched_rhs))?);
    item!("transpose", m, |_t, v| v.transpose()?.square());
    item!("reshape", m, |_t, v| v.reshape(&[2, 10])?.square());
    let logits = s.uniform(&[3, 4], -2.0, 2.0);
    item!("softmax", logits, |_t, v| v.softmax(1)?);
    item!("softmax (axis 0)", logits, |_t, v| v.softmax(0)?);
    item!("variance", logits, |_t, v| v.variance(1)?);
    item!("variance (axis 0)", logits, |_t, v| v.variance(0)?);

    let img = s.uniform(&[2, 6, 7], 0.0, 1.0);
    let kernel = s.off_zero(&[3, 2, 3, 3]);
    let bias = s.off_zero(&[3]);
    let (k1, bias1, img1) = (kernel.clone(), bias.clone(), img.clone());
    item!("conv2d (input)", img, |t, v| v.conv2d(
        &t.constant(&k1),
        Some(&t.constant(&bias1)),
        2,
        1
    )?);
    item!("conv2d (weight)", kernel, |t, v| t
        .constant(&img1)
        .conv2d(&v, None, 1, 0)?);
    item!("conv2d (bias)", bias, |t, v| t.constant(&img).conv2d(
        &t.constant(&kernel),
        Some(&v),
        1,
        1
    )?);
    let pool_in = s.uniform(&[2, 4, 6], 0.0, 1.0);
    item!("pool_avg", pool_in, |_t, v| v
        .pool_avg((2, 3), (2, 3))?
        .square());
    item!("pad2d", pool_in, |_t, v| v.pad2d(1, 0, 2, 1)?.square());
    let small = s.uniform(&[3, 5, 7], 0.0, 1.0);
    item!("resize nearest", small, |_t, v| v
        .resize((8, 4), ResizeMode::Nearest)?);
    item!("resize bilinear", small, |_t, v| v
        .resize((8, 4), ResizeMode::Bilinear)?);
    item!("resize area", small, |_t, v| v
        .resize((3, 5), ResizeMode::Area)?);
    item!("select", small, |_t, v| v.select(1)?.square());
    let vec = s.off_zero(&[8]);
    item!("l2_normalize", vec, |_t, v| v.l2_normalize()?);

    let x = s.uniform(&[2, 6, 6], 0.0, 1.0);
    let ck = s.off_zero(&[4, 2, 3, 3]);
    let wm = s.off_zero(&[4, 3]);
    item!("composite softmax(matmul(conv))", x, |t, v| {
        let h = v.conv2d(&t.constant(&ck), None, 1, 0)?.tanh();
        h.reshape(&[4, 16])?
            .transpose()?
            .matmul(&t.constant(&wm))?
            .softmax(1)?
    });
    Ok(items)
}

fn to_tensor_error(e: crate::Error) -> TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "loss",
            reason: other.to_string(),
        },
    }
}

/// Configuration for the loss checks.
pub fn loss_check_config() -> LossConfig {
    LossConfig::default()
}

#[derive(Clone, Copy)]
enum Term {
    Proj,
    Attn,
    Mtcnn,
    Id,
}

fn loss_term<'t>(
    term: Term,
    objective: &Objective,
    bundle: &ModelBundle,
    tape: &'t Tape,
    x_adv: Var<'t>,
) -> Result<Var<'t>> {
    Ok(match term {
        Term::Proj => divergence(
            tape,
            bundle.project_condition(tape, x_adv)?,
            objective.clean_tokens(),
        )?,
        Term::Attn => objective.attention.loss(tape, bundle, x_adv)?,
        Term::Mtcnn => objective.detector.loss(tape, bundle, x_adv)?.loss,
        Term::Id => identity_term(
            tape,
            bundle.embed_identity(tape, x_adv)?,
            objective.clean_embedding(),
        )?,
    })
}

fn loss_checks(bundle: &ModelBundle, seed: u64) -> Result<Vec<CheckItem>> {
    let x = synth_face(seed, IMAGE_SIDE);
    let objective = Rc::new(Objective::prepare(bundle, &x, &loss_check_config())?);
    let mut delta = uniform_noise(seed.wrapping_add(1), x.shape(), 4.0 / 255.0);
    project(&mut delta, &x, 4.0 / 255.0);
    let terms = [
        ("loss_proj", Term::Proj),
        ("loss_attn", Term::Attn),
        ("loss_mtcnn", Term::Mtcnn),
        ("loss_id", Term::Id),
    ];
    let bundle = Rc::new(bundle.clone());
    let mut items = Vec::new();
    for (name, term) in terms {
        let (x, objective, bundle) = (x.clone(), objective.clone(), bundle.clone());
        let f: ScalarFn = Box::new(move |tape: &Tape, d: Var<'_>| {
            let x_adv = tape.constant(&x).add(&d)?;
            loss_term(term, &objective, &bundle, tape, x_adv).map_err(to_tensor_error)
        });
        items.push(check(name, f, &delta)?);
    }
    Ok(items)
}

/// Full suite: tensor operations first, then the losses on a seeded
/// 32×32 synthetic face.
pub fn run_suite(bundle: &ModelBundle, seed: u64) -> Result<Vec<CheckItem>> {
    let mut items = op_checks(seed)?;
    items.extend(loss_checks(bundle, seed)?);
    Ok(items)
}

/// Active detector cells on the loss-check image.
pub fn loss_check_active_cells(bundle: &ModelBundle, seed: u64) -> Result<usize> {
    let x = synth_face(seed, IMAGE_SIDE);
    let objective = Objective::prepare(bundle, &x, &loss_check_config())?;
    Ok(objective
        .values(bundle, &x, &Tensor::zeros(x.shape()))?
        .active_cells)
}
