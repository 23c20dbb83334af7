//! The finite-difference suite behind `agnet gradcheck`: every primitive
//! op on random shapes, single MARCU blocks, and the whole network.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{gradcheck, random_projection, GradReport, GradcheckConfig};
use crate::graph::{Eltwise, Graph, Var};
use crate::head::{AttributeLabels, AttributeSchema};
use crate::layers::{Bound, ParamStore};
use crate::marcu::{MarcuBlock, MarcuBlockConfig, NetworkConfig};
use crate::model::{AgeNet, Batch, LossOptions, ModelSpec};
use crate::ranking::{make_interval_points, LossKind};
use crate::tensor::Tensor;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const BLOCK_TOLERANCE: f64 = 1e-5;
pub const FULL_TOLERANCE: f64 = 1e-4;
/// Denominator floor for composite checks. Their losses sum hundreds of
/// terms, so central differences carry ~1e-10 of rounding noise and
/// gradients smaller than this are compared absolutely.
pub const COMPOSITE_ABS_FLOOR: f64 = 1e-4;

pub const PRIMITIVES: [&str; 17] = [
    "affine",
    "conv2d",
    "conv1d",
    "maxpool2d",
    "global_avg_pool",
    "add",
    "mul_channel_broadcast",
    "sigmoid",
    "relu",
    "concat_channels",
    "scale",
    "sum",
    "reshape",
    "softmax_xent",
    "ecr",
    "l1",
    "eltwise",
];

/// Result of one named check over one or more seeds.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub runs: usize,
    /// Elements compared, summed over runs.
    pub checked: usize,
    /// Elements skipped because every trial step crossed a kink.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Description of the first failing run.
    pub failure: Option<String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

/// Entries with magnitude in [0.05, 1), so no element sits near a kink.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (0.05 + 0.95 * v.abs());
    }
    t
}

/// A shuffled grid with spacing 0.05 plus jitter below 0.01: pooling
/// windows never hold near-ties.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    data.shuffle(rng);
    for v in &mut data {
        *v += rng.gen_range(0.0..0.01);
    }
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// The op under test plus its random inputs for `seed`. Outputs are
/// reduced with a seeded random projection.
fn primitive_case(name: &str, seed: u64) -> (Build, Vec<Tensor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=3);
    let proj_seed = rng.gen::<u64>();
    let project = move |g: &mut Graph, y: Var| {
        let mut r = ChaCha8Rng::seed_from_u64(proj_seed);
        random_projection(g, y, &mut r)
    };
    match name {
        "affine" => {
            let (d, m) = (rng.gen_range(1..=5), rng.gen_range(1..=4));
            let inputs = vec![uniform(&[n, d], &mut rng), uniform(&[d, m], &mut rng), uniform(&[m], &mut rng)];
            (Box::new(move |g, v| {
                let y = g.affine(v[0], v[1], v[2])?;
                project(g, y)
            }), inputs)
        }
        "conv2d" => {
            let k = *[1usize, 3, 5].choose(&mut rng).expect("non-empty");
            let stride = rng.gen_range(1..=2);
            let pad = if rng.gen_bool(0.5) { k / 2 } else { 0 };
            let (c, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let side = rng.gen_range(k..=k + 3);
            let with_bias = rng.gen_bool(0.5);
            let mut inputs = vec![uniform(&[n, c, side, side + 1], &mut rng), uniform(&[co, c, k, k], &mut rng)];
            if with_bias {
                inputs.push(uniform(&[co], &mut rng));
            }
            (Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)?;
                project(g, y)
            }), inputs)
        }
        "conv1d" => {
            let k = *[1usize, 3, 5].choose(&mut rng).expect("non-empty");
            let len = rng.gen_range(1..=9);
            let inputs = vec![uniform(&[n, len], &mut rng), uniform(&[k], &mut rng)];
            (Box::new(move |g, v| {
                let y = g.conv1d(v[0], v[1], (k - 1) / 2)?;
                project(g, y)
            }), inputs)
        }
        "maxpool2d" => {
            let k = rng.gen_range(2..=3);
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=(k - 1) / 2);
            let c = rng.gen_range(1..=2);
            let side = rng.gen_range(k..=k + 4);
            let inputs = vec![distinct(&[n, c, side, side], &mut rng)];
            (Box::new(move |g, v| {
                let y = g.maxpool2d(v[0], k, stride, pad)?;
                project(g, y)
            }), inputs)
        }
        "global_avg_pool" => {
            let shape = [n, rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4)];
            let inputs = vec![uniform(&shape, &mut rng)];
            (Box::new(move |g, v| {
                let y = g.global_avg_pool(v[0])?;
                project(g, y)
            }), inputs)
        }
        "add" => {
            let shape = [n, rng.gen_range(1..=4), rng.gen_range(1..=3)];
            let inputs = vec![uniform(&shape, &mut rng), uniform(&shape, &mut rng)];
            (Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                project(g, y)
            }), inputs)
        }
        "mul_channel_broadcast" => {
            let c = rng.gen_range(1..=4);
            let inputs = vec![uniform(&[n, c, 3, 2], &mut rng), uniform(&[n, c], &mut rng)];
            (Box::new(move |g, v| {
                let y = g.mul_channel(v[0], v[1])?;
                project(g, y)
            }), inputs)
        }
        "sigmoid" => {
            let mut x = uniform(&[n, 5], &mut rng);
            x.data_mut().iter_mut().for_each(|v| *v *= 6.0);
            (Box::new(move |g, v| {
                let y = g.sigmoid(v[0]);
                project(g, y)
            }), vec![x])
        }
        "relu" => {
            let inputs = vec![away_from_zero(&[n, 6], &mut rng)];
            (Box::new(move |g, v| {
                let y = g.relu(v[0]);
                project(g, y)
            }), inputs)
        }
        "concat_channels" => {
            let parts = rng.gen_range(1..=3);
            let inputs: Vec<Tensor> = (0..parts)
                .map(|_| {
                    let c = rng.gen_range(1..=3);
                    uniform(&[n, c, 2, 2], &mut rng)
                })
                .collect();
            (Box::new(move |g, v| {
                let y = g.concat(v)?;
                project(g, y)
            }), inputs)
        }
        "scale" => {
            let f = rng.gen_range(-3.0..3.0);
            let inputs = vec![uniform(&[n, 4], &mut rng)];
            (Box::new(move |g, v| {
                let y = g.scale(v[0], f);
                project(g, y)
            }), inputs)
        }
        "sum" => {
            let inputs = vec![uniform(&[n, 3, 2], &mut rng)];
            (Box::new(move |g, v| Ok(g.sum(v[0]))), inputs)
        }
        "reshape" => {
            let inputs = vec![uniform(&[n, 2, 3], &mut rng)];
            (Box::new(move |g, v| {
                let y = g.reshape(v[0], &[3, 2 * n])?;
                project(g, y)
            }), inputs)
        }
        "softmax_xent" => {
            let classes = rng.gen_range(2..=5);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            let mut x = uniform(&[n, classes], &mut rng);
            x.data_mut().iter_mut().for_each(|v| *v *= 4.0);
            (Box::new(move |g, v| g.softmax_xent(v[0], &labels)), vec![x])
        }
        "ecr" => {
            let a_min = rng.gen_range(1..=20);
            let points = make_interval_points(a_min, a_min + rng.gen_range(1..=15)).expect("valid range");
            let ages: Vec<i32> = (0..n).map(|_| rng.gen_range(points.a_min()..=points.a_max())).collect();
            let h: Vec<f64> = (0..n)
                .map(|_| rng.gen_range(f64::from(points.a_min()) - 3.0..f64::from(points.a_max()) + 3.0))
                .collect();
            let inputs = vec![Tensor::new([n], h).expect("n values")];
            (Box::new(move |g, v| {
                crate::ranking::baseline_loss(g, LossKind::Ecr, v[0], &ages, &points, Default::default())
            }), inputs)
        }
        "l1" => {
            let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let offsets = away_from_zero(&[n], &mut rng);
            let h: Vec<f64> = targets.iter().zip(offsets.data()).map(|(t, o)| t + o).collect();
            (Box::new(move |g, v| g.abs_error(v[0], &targets)), vec![Tensor::new([n], h).expect("n values")])
        }
        "eltwise" => {
            let c = rng.gen_range(1..=3);
            let inputs = vec![
                uniform(&[n, c, 2, 3], &mut rng),
                uniform(&[n, c, 2, 3], &mut rng),
                uniform(&[n, c], &mut rng),
            ];
            (Box::new(move |g, v| {
                let s = g.eltwise(Eltwise::Add, &[v[0], v[1]])?;
                let gate = g.eltwise(Eltwise::Sigmoid, &[v[2]])?;
                let m = g.eltwise(Eltwise::MulChannelBroadcast, &[s, gate])?;
                let cat = g.eltwise(Eltwise::ConcatChannels, &[m, v[0]])?;
                project(g, cat)
            }), inputs)
        }
        other => panic!("no gradcheck case for `{other}`"),
    }
}

fn fold(name: &str, tolerance: f64, runs: Vec<(u64, std::result::Result<GradReport, String>)>) -> CheckOutcome {
    let mut out = CheckOutcome {
        name: name.to_string(),
        runs: runs.len(),
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        tolerance,
        failure: None,
    };
    for (seed, r) in runs {
        match r {
            Ok(rep) => {
                out.max_rel_err = out.max_rel_err.max(rep.max_rel_err());
                out.checked += rep.checked();
                out.skipped += rep.skipped();
            }
            Err(msg) => {
                if out.failure.is_none() {
                    out.failure = Some(format!("seed {seed}: {msg}"));
                }
            }
        }
    }
    out
}

fn run_one<F>(name: &str, f: F, inputs: &[Tensor], cfg: &GradcheckConfig) -> Result<std::result::Result<GradReport, String>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    Ok(gradcheck(name, f, inputs, cfg)?.map_err(|fail| fail.to_string()))
}

/// Checks primitive `name` once per seed at [`PRIMITIVE_TOLERANCE`].
pub fn check_primitive(name: &str, seeds: impl IntoIterator<Item = u64>) -> Result<CheckOutcome> {
    let cfg = GradcheckConfig {
        tolerance: PRIMITIVE_TOLERANCE,
        ..GradcheckConfig::default()
    };
    let mut runs = Vec::new();
    for seed in seeds {
        let (f, inputs) = primitive_case(name, seed);
        runs.push((seed, run_one(name, f, &inputs, &cfg)?));
    }
    Ok(fold(name, PRIMITIVE_TOLERANCE, runs))
}

pub fn check_primitives(seeds: std::ops::Range<u64>) -> Result<Vec<CheckOutcome>> {
    PRIMITIVES.iter().map(|n| check_primitive(n, seeds.clone())).collect()
}

/// One MARCU block with and without a projection shortcut, checked
/// against input and every block parameter.
pub fn check_blocks(seeds: std::ops::Range<u64>) -> Result<Vec<CheckOutcome>> {
    let variants = [
        ("marcu_block_identity", MarcuBlockConfig { in_channels: 8, out_channels: 8, stride: 1, attention_kernel: 3 }),
        ("marcu_block_projection", MarcuBlockConfig { in_channels: 4, out_channels: 8, stride: 2, attention_kernel: 5 }),
    ];
    let cfg = GradcheckConfig {
        tolerance: BLOCK_TOLERANCE,
        abs_floor: COMPOSITE_ABS_FLOOR,
        ..GradcheckConfig::default()
    };
    let mut out = Vec::new();
    for (name, bc) in variants {
        let mut runs = Vec::new();
        for seed in seeds.clone() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let block = MarcuBlock::new(&mut store, "b", bc, &mut rng)?;
            let mut inputs = vec![uniform(&[2, bc.in_channels, 6, 6], &mut rng)];
            inputs.extend(store.tensors());
            let proj_seed = rng.gen::<u64>();
            let f = |g: &mut Graph, v: &[Var]| {
                let bound = Bound::from_vars(v[1..].to_vec());
                let y = block.forward(g, &bound, v[0])?;
                let mut r = ChaCha8Rng::seed_from_u64(proj_seed);
                random_projection(g, y, &mut r)
            };
            runs.push((seed, run_one(name, f, &inputs, &cfg)?));
        }
        out.push(fold(name, BLOCK_TOLERANCE, runs));
    }
    Ok(out)
}

/// The summed ECR plus attribute loss of the desk-preset network on a
/// random two-image batch, against a sample of `elements_per_tensor`
/// entries of every parameter tensor.
pub fn check_full(seed: u64, elements_per_tensor: usize) -> Result<CheckOutcome> {
    let schema = AttributeSchema::morph();
    let spec = ModelSpec::new(NetworkConfig::desk(), schema.clone(), LossKind::Ecr);
    let res = spec.network.input_resolution;
    let model = AgeNet::new(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut images = uniform(&[2, 3, res, res], &mut rng);
    images.data_mut().iter_mut().for_each(|v| *v = 0.5 + 0.5 * *v);
    let ages = vec![rng.gen_range(16..=77), rng.gen_range(16..=77)];
    let attributes = ages
        .iter()
        .map(|&a| AttributeLabels::new(a, rng.gen_range(0..2), rng.gen_range(0..4), &schema))
        .collect::<Result<Vec<_>>>()?;
    let batch = Batch { images, ages, attributes };
    let opts = LossOptions::default();
    let f = |g: &mut Graph, v: &[Var]| {
        let bound = Bound::from_vars(v.to_vec());
        let x = g.constant(batch.images.clone());
        let fwd = model.forward(g, &bound, x)?;
        model.loss(g, &fwd, &batch, &opts)
    };
    let cfg = GradcheckConfig {
        tolerance: FULL_TOLERANCE,
        abs_floor: COMPOSITE_ABS_FLOOR,
        max_elements: Some(elements_per_tensor),
        seed,
        ..GradcheckConfig::default()
    };
    let run = run_one("agenet_desk", f, &model.store.tensors(), &cfg)?;
    Ok(fold("agenet_desk", FULL_TOLERANCE, vec![(seed, run)]))
}
