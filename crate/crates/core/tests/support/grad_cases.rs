//! Finite-difference cases for every engine operation and loss, shared by
//! the engine tests and the acceptance harness.

use calibra::losses::{self, LossWeights, Phase};
use calibra::model::ActivationBundle;
use calibra::tensor::{Tape, Var};
use calibra::Result;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
pub const COORDS: usize = 20;

type Graph = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: String,
    pub inputs: Vec<(Vec<usize>, Vec<f64>)>,
    pub graph: Graph,
}

pub fn random(shape: &[usize], seed: u64) -> (Vec<usize>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    (shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Reduce an array to a scalar with a fixed random projection so every
/// output element carries a distinct upstream gradient.
pub fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let n = tape.value(v).len();
    let (_, w) = random(&[n], seed ^ 0x5eed);
    let weighted = tape.mul_const(v, &w)?;
    Ok(tape.sum(weighted))
}

fn case(
    out: &mut Vec<Case>,
    name: impl Into<String>,
    inputs: Vec<(Vec<usize>, Vec<f64>)>,
    graph: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) {
    out.push(Case {
        name: name.into(),
        inputs,
        graph: Box::new(graph),
    });
}

/// A bundle whose head features and kernels are free leaves.
fn bundle(t: &mut Tape<f64>, v: &[Var]) -> ActivationBundle {
    ActivationBundle {
        input_hw: (8, 8),
        features: [v[0], v[0], v[0], v[1], v[2]],
        score_maps: [v[0], v[1], v[2]],
        score_vectors: [v[0], v[1], v[2]],
        head_kernels: [v[3], v[4], v[5]],
        logits: None,
        probs: Some(t.softmax(v[6]).unwrap()),
    }
}

fn bundle_inputs() -> Vec<(Vec<usize>, Vec<f64>)> {
    vec![
        random(&[4, 4, 4], 40),
        random(&[4, 2, 2], 41),
        random(&[4, 3, 3], 42),
        random(&[3, 4, 1, 1], 43),
        random(&[3, 4, 1, 1], 44),
        random(&[3, 4, 1, 1], 45),
        random(&[3], 46),
    ]
}

pub fn engine_cases() -> Vec<Case> {
    let mut c = Vec::new();
    for (stride, padding) in [(1, 1), (2, 1), (1, 0)] {
        let inputs = vec![random(&[2, 6, 6], 1), random(&[3, 2, 3, 3], 2), random(&[3], 3)];
        case(&mut c, format!("conv2d s{stride} p{padding}"), inputs, move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride, padding)?;
            project(t, y, 11)
        });
    }
    let inputs = vec![random(&[1, 5, 5], 4), random(&[1, 1, 3, 3], 5), random(&[1], 6)];
    case(&mut c, "conv2d summed", inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
        Ok(t.sum(y))
    });
    let pool = vec![random(&[2, 4, 4], 8)];
    case(&mut c, "max_pool2d", pool.clone(), |t, v| {
        let y = t.max_pool2d(v[0], 2)?;
        project(t, y, 12)
    });
    case(&mut c, "global_max_pool", pool, |t, v| {
        let y = t.global_max_pool(v[0])?;
        project(t, y, 13)
    });
    let norm = vec![random(&[3, 3, 4], 14)];
    case(&mut c, "instance_norm", norm.clone(), |t, v| {
        let y = t.instance_norm(v[0], 1e-5)?;
        project(t, y, 15)
    });
    case(&mut c, "minmax_normalize", norm, |t, v| {
        let y = t.minmax_normalize(v[0]);
        project(t, y, 16)
    });
    case(&mut c, "softmax", vec![random(&[3], 17)], |t, v| {
        let y = t.softmax(v[0])?;
        project(t, y, 18)
    });
    let pair = vec![random(&[2, 3, 3], 19), random(&[2, 3, 3], 20)];
    case(&mut c, "leaky_relu", pair.clone(), |t, v| {
        let y = t.leaky_relu(v[0], 0.01);
        project(t, y, 21)
    });
    case(&mut c, "sigmoid", pair.clone(), |t, v| {
        let y = t.sigmoid(v[0]);
        project(t, y, 22)
    });
    case(&mut c, "mul sub abs", pair.clone(), |t, v| {
        let y = t.mul(v[0], v[1])?;
        let z = t.sub(y, v[0])?;
        let a = t.abs(z);
        project(t, a, 23)
    });
    case(&mut c, "clamp ln affine mean", pair, |t, v| {
        let s = t.sigmoid(v[0]);
        let c = t.clamp(s, 1e-7, 1.0 - 1e-7);
        let l = t.ln(c);
        let a = t.affine(l, -2.0, 0.5);
        Ok(t.mean(a))
    });
    let chan = vec![random(&[3, 2, 3], 24), random(&[2, 3, 1, 1], 25)];
    case(&mut c, "channel_combine channel_sum", chan.clone(), |t, v| {
        let cam = t.channel_combine(v[0], v[1], 1)?;
        let caam = t.channel_sum(v[0])?;
        let d = t.sub(cam, caam)?;
        project(t, d, 26)
    });
    case(&mut c, "upsample_bilinear", chan.clone(), |t, v| {
        let up = t.upsample_bilinear(v[0], 5, 7)?;
        project(t, up, 27)
    });
    case(&mut c, "concat pick", chan, |t, v| {
        let cat = t.concat(&[v[0], v[0]])?;
        let p = t.pick(cat, 5)?;
        let s = project(t, cat, 28)?;
        t.add(p, s)
    });
    let net = vec![
        random(&[1, 8, 8], 30),
        random(&[4, 1, 3, 3], 31),
        random(&[4], 32),
        random(&[3, 4, 1, 1], 33),
        random(&[3], 34),
    ];
    case(&mut c, "composed network-like graph", net, |t, v| {
        let c = t.conv2d(v[0], v[1], v[2], 1, 1)?;
        let n = t.instance_norm(c, 1e-5)?;
        let a = t.leaky_relu(n, 0.01);
        let p = t.max_pool2d(a, 2)?;
        let s = t.conv2d(p, v[3], v[4], 1, 0)?;
        let g = t.global_max_pool(s)?;
        let prob = t.softmax(g)?;
        let pick = t.pick(prob, 1)?;
        let clamped = t.clamp(pick, 1e-12, 1.0);
        let ce = t.ln(clamped);
        let up = t.upsample_bilinear(p, 8, 8)?;
        let caam = t.channel_sum(up)?;
        let norm = t.minmax_normalize(caam);
        let m = t.mean(norm);
        let neg = t.affine(ce, -1.0, 0.0);
        t.add(neg, m)
    });
    c
}

pub fn loss_cases() -> Vec<Case> {
    let mut c = Vec::new();
    case(&mut c, "cross_entropy", vec![random(&[3], 50)], |t, v| {
        let p = t.softmax(v[0])?;
        losses::cross_entropy(t, p, 1)
    });
    case(&mut c, "cam_distance", vec![random(&[3, 4], 51), random(&[3, 4], 52)], |t, v| {
        losses::cam_distance(t, v[0], v[1])
    });
    for (ablate_cam, ablate_multiscale) in [(false, false), (false, true), (true, false)] {
        let name = format!("multiscale_cam_loss cam-ablated={ablate_cam} multiscale-ablated={ablate_multiscale}");
        case(&mut c, name, bundle_inputs(), move |t, v| {
            let w = LossWeights::default();
            let b = bundle(t, v);
            let parts = losses::multiscale_cam_loss(t, &b, b.probs.unwrap(), 2, &w, ablate_cam, ablate_multiscale)?;
            Ok(parts.total)
        });
    }
    let logits = vec![random(&[1, 4, 4], 54)];
    case(&mut c, "weighted_bce_supervised", logits.clone(), |t, v| {
        let mask: Vec<f64> = (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let f = t.sigmoid(v[0]);
        losses::weighted_bce_supervised(t, f, &mask, 0.3)
    });
    case(&mut c, "consistency_loss", logits, |t, v| {
        let (_, soft) = random(&[16], 53);
        let soft: Vec<f64> = soft.iter().map(|v| 0.5 + 0.4 * v).collect();
        let f = t.sigmoid(v[0]);
        losses::consistency_loss(t, f, &soft, 0.7)
    });
    for phase in [Phase::Warmup, Phase::Full] {
        let mut inputs = bundle_inputs();
        inputs.push(random(&[1, 3, 3], 55));
        inputs.push(random(&[1, 3, 3], 56));
        case(&mut c, format!("joint objective {phase:?}"), inputs, move |t, v| {
            let w = LossWeights::default();
            let mask: Vec<f64> = (0..9).map(|i| (i < 3) as u8 as f64).collect();
            let b = bundle(t, v);
            let cam = losses::multiscale_cam_loss(t, &b, b.probs.unwrap(), 0, &w, false, false)?;
            let fs = t.sigmoid(v[7]);
            let ls = losses::weighted_bce_supervised(t, fs, &mask, 0.5)?;
            let fu = t.sigmoid(v[8]);
            let lu = losses::consistency_loss(t, fu, &[0.52; 9], 0.5)?;
            losses::total_objective(t, cam.total, ls, Some(lu), &w, phase)
        });
    }
    c
}
