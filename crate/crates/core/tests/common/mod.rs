#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vogseg::mask::ClassMask;
use vogseg::ops;
use vogseg::segmenter::{Architecture, ModelParams};
use vogseg::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: u8) -> ClassMask {
    ClassMask::from_vec(h, w, (0..h * w).map(|_| rng.random_range(0..classes)).collect()).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub const FD_STEP: f64 = 1e-5;

/// Worst relative error between `analytic` and the central difference of
/// `f` with respect to every entry of `x`.
pub fn check_all(x: &mut [f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let up = f(x);
        x[i] = orig - FD_STEP;
        let down = f(x);
        x[i] = orig;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

#[derive(Debug)]
pub struct GradientCheck {
    pub name: String,
    pub max_rel_err: f64,
}

fn conv_instances(rng: &mut ChaCha8Rng, count: usize, out: &mut Vec<GradientCheck>) {
    for i in 0..count {
        let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let k = [1, 3, 5][rng.random_range(0..3)];
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let mut x = random_tensor(rng, &[cin, h, w]);
        let mut kern = random_tensor(rng, &[cout, cin, k, k]);
        let mut bias = random_tensor(rng, &[cout]).into_data();
        let r = random_tensor(rng, &[cout, h, w]);
        let grads = ops::conv2d_backward(&x, &kern, &r).unwrap();
        let objective = |x: &Tensor<f64>, kern: &Tensor<f64>, b: &[f64]| dot(ops::conv2d(x, kern, b).unwrap().data(), r.data());
        let (kc, bc) = (kern.clone(), bias.clone());
        let shape = x.shape().to_vec();
        let ex = check_all(x.data_mut(), grads.input.data(), |v| {
            objective(&Tensor::from_vec(&shape, v.to_vec()).unwrap(), &kc, &bc)
        });
        let xc = x.clone();
        let kshape = kern.shape().to_vec();
        let ek = check_all(kern.data_mut(), grads.kernels.data(), |v| {
            objective(&xc, &Tensor::from_vec(&kshape, v.to_vec()).unwrap(), &bc)
        });
        let kc = kern.clone();
        let eb = check_all(&mut bias, &grads.bias, |v| objective(&xc, &kc, v));
        out.push(GradientCheck {
            name: format!("conv2d #{i} ({cin}->{cout}, k{k}, {h}x{w})"),
            max_rel_err: ex.max(ek).max(eb),
        });
    }
}

fn relu_instances(rng: &mut ChaCha8Rng, count: usize, out: &mut Vec<GradientCheck>) {
    for i in 0..count {
        let (c, h, w) = (rng.random_range(1..=3), rng.random_range(1..=8), rng.random_range(1..=8));
        let mut x = random_tensor(rng, &[c, h, w]).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let r = random_tensor(rng, &[c, h, w]);
        let y = ops::relu(&x);
        let mut g = r.clone();
        ops::relu_backward_in_place(&y, &mut g);
        let shape = x.shape().to_vec();
        let e = check_all(x.data_mut(), g.data(), |v| {
            dot(ops::relu(&Tensor::from_vec(&shape, v.to_vec()).unwrap()).data(), r.data())
        });
        out.push(GradientCheck {
            name: format!("relu #{i}"),
            max_rel_err: e,
        });
    }
}

fn pool_instances(rng: &mut ChaCha8Rng, count: usize, out: &mut Vec<GradientCheck>) {
    for i in 0..count {
        let c = rng.random_range(1..=3);
        let (h, w) = (2 * rng.random_range(1..=4), 2 * rng.random_range(1..=4));
        let n = c * h * w;
        // distinct values spaced well beyond the step so no maximum changes
        let mut values: Vec<f64> = (0..n).map(|j| j as f64 * 0.01).collect();
        for j in (1..n).rev() {
            values.swap(j, rng.random_range(0..=j));
        }
        let mut x = Tensor::from_vec(&[c, h, w], values).unwrap();
        let r = random_tensor(rng, &[c, h / 2, w / 2]);
        let (_, idx) = ops::max_pool2(&x).unwrap();
        let g = ops::max_pool2_backward(x.shape(), &idx, &r).unwrap();
        let shape = x.shape().to_vec();
        let e = check_all(x.data_mut(), g.data(), |v| {
            dot(ops::max_pool2(&Tensor::from_vec(&shape, v.to_vec()).unwrap()).unwrap().0.data(), r.data())
        });
        out.push(GradientCheck {
            name: format!("max_pool2 #{i}"),
            max_rel_err: e,
        });
    }
}

fn upsample_instances(rng: &mut ChaCha8Rng, count: usize, out: &mut Vec<GradientCheck>) {
    for i in 0..count {
        let (c, h, w) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4));
        let mut x = random_tensor(rng, &[c, h, w]);
        let r = random_tensor(rng, &[c, 2 * h, 2 * w]);
        let g = ops::upsample2_backward(&r).unwrap();
        let shape = x.shape().to_vec();
        let e = check_all(x.data_mut(), g.data(), |v| {
            dot(ops::upsample2(&Tensor::from_vec(&shape, v.to_vec()).unwrap()).unwrap().data(), r.data())
        });
        out.push(GradientCheck {
            name: format!("upsample2 #{i}"),
            max_rel_err: e,
        });
    }
}

fn cross_entropy_instances(rng: &mut ChaCha8Rng, count: usize, out: &mut Vec<GradientCheck>) {
    for i in 0..count {
        let c = rng.random_range(2..=4);
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let mut z = random_tensor(rng, &[c, h, w]).map(|v| 3.0 * v);
        let target = random_mask(rng, h, w, c as u8);
        let (_, g) = ops::softmax_cross_entropy(&z, &target).unwrap();
        let shape = z.shape().to_vec();
        let e = check_all(z.data_mut(), g.data(), |v| {
            ops::softmax_cross_entropy(&Tensor::from_vec(&shape, v.to_vec()).unwrap(), &target)
                .unwrap()
                .0
        });
        out.push(GradientCheck {
            name: format!("softmax_cross_entropy #{i} (C={c}, {h}x{w})"),
            max_rel_err: e,
        });
    }
}

/// Parameter gradients of a small U-Net, seeded either with the
/// cross-entropy logit gradient or with a random logit weighting.
fn unet_instances(rng: &mut ChaCha8Rng, count: usize, out: &mut Vec<GradientCheck>) {
    for i in 0..count {
        let arch = Architecture {
            levels: rng.random_range(1..=2),
            base_channels: rng.random_range(2..=3),
            num_classes: 4,
            in_channels: 1,
        };
        let side = if arch.levels == 1 { [4, 6, 8][rng.random_range(0..3)] } else { [4, 8][rng.random_range(0..2)] };
        let mut params = ModelParams::<f64>::init(arch, rng.random()).unwrap();
        for t in params.tensors_mut() {
            for v in t.tensor.data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
        let image = random_tensor(rng, &[1, side, side]).map(|v| 0.5 + 0.5 * v);
        let use_ce = i % 2 == 0;
        let target = random_mask(rng, side, side, 4);
        let weights = random_tensor(rng, &[4, side, side]);
        let objective = |p: &ModelParams<f64>| {
            let logits = p.forward(&image).unwrap();
            if use_ce {
                ops::softmax_cross_entropy(&logits, &target).unwrap().0
            } else {
                dot(logits.data(), weights.data())
            }
        };
        let (logits, tape) = params.forward_recorded(&image).unwrap();
        let seed = if use_ce {
            ops::softmax_cross_entropy(&logits, &target).unwrap().1
        } else {
            weights.clone()
        };
        let bundle = params.backward(&tape, &seed).unwrap();
        let mut worst: f64 = 0.0;
        for (ti, grad) in bundle.parameter_grads.iter().enumerate() {
            for j in 0..grad.len() {
                let orig = params.tensors()[ti].tensor.data()[j];
                params.tensors_mut()[ti].tensor.data_mut()[j] = orig + FD_STEP;
                let up = objective(&params);
                params.tensors_mut()[ti].tensor.data_mut()[j] = orig - FD_STEP;
                let down = objective(&params);
                params.tensors_mut()[ti].tensor.data_mut()[j] = orig;
                worst = worst.max(rel_err(grad.data()[j], (up - down) / (2.0 * FD_STEP)));
            }
        }
        out.push(GradientCheck {
            name: format!(
                "unet #{i} (levels {}, base {}, {side}x{side}, {})",
                arch.levels,
                arch.base_channels,
                if use_ce { "cross-entropy" } else { "weighted logits" }
            ),
            max_rel_err: worst,
        });
    }
}

/// Every randomized gradient check instance.
pub fn gradient_checks(seed: u64) -> Vec<GradientCheck> {
    let mut rng = rng(seed);
    let mut out = Vec::new();
    conv_instances(&mut rng, 16, &mut out);
    relu_instances(&mut rng, 6, &mut out);
    pool_instances(&mut rng, 6, &mut out);
    upsample_instances(&mut rng, 6, &mut out);
    cross_entropy_instances(&mut rng, 10, &mut out);
    unet_instances(&mut rng, 12, &mut out);
    out
}

/// Two-pass evaluation of the variance-of-gradients score of one window.
pub fn vog_two_pass(window: &[Vec<f32>], t: usize) -> f64 {
    let d = window[0].len();
    let mut total = 0.0;
    for k in 0..d {
        let mean = window.iter().map(|g| g[k] as f64).sum::<f64>() / window.len() as f64;
        let ss = window.iter().map(|g| (g[k] as f64 - mean).powi(2)).sum::<f64>();
        total += (ss / t as f64).sqrt();
    }
    total / d as f64
}

/// Two-sided exact Wilcoxon p-value by enumerating all sign assignments,
/// with average ranks for ties and zeros dropped.
pub fn wilcoxon_oracle(diffs: &[f64]) -> (f64, f64) {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nz.len();
    let ranks: Vec<f64> = nz
        .iter()
        .map(|d| {
            let below = nz.iter().filter(|e| e.abs() < d.abs()).count() as f64;
            let equal = nz.iter().filter(|e| e.abs() == d.abs()).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let plus: f64 = ranks.iter().zip(&nz).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let total: f64 = ranks.iter().sum();
    let w = plus.min(total - plus);
    if n < 5 {
        return (w, 1.0);
    }
    let mut hits = 0u64;
    for signs in 0u64..(1 << n) {
        let p: f64 = (0..n).filter(|i| signs >> i & 1 == 1).map(|i| ranks[i]).sum();
        if p.min(total - p) <= w + 1e-9 {
            hits += 1;
        }
    }
    (w, (hits as f64 / (1u64 << n) as f64).min(1.0))
}

/// Erosion by brute force: a pixel survives when every element offset lands
/// on an in-canvas region pixel.
pub fn erode_oracle(region: &[bool], h: usize, w: usize, offsets: &[(isize, isize)]) -> Vec<bool> {
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            offsets.iter().all(|&(dy, dx)| {
                let (ny, nx) = (y + dy, x + dx);
                ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize && region[ny as usize * w + nx as usize]
            })
        })
        .collect()
}

pub fn quartiles_oracle(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    (at(0.25), at(0.75))
}
