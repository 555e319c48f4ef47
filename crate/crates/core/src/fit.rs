//! Per-part MLP fitting against target features.
//!
//! Inputs and targets are standardized per column for training and the affine
//! maps are folded back into the first and last layers afterwards, so the
//! returned weights act on raw poses and emit raw features.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DenseLayer, MlpWeights, PartMlp};
use crate::pose::init_part_mlp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Momentum,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub optimizer: Optimizer,
    pub iterations: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    /// Samples per step; 0 means full batch.
    pub batch_size: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            iterations: 20000,
            learning_rate: 0.005,
            momentum: 0.9,
            batch_size: 256,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PartFitStats {
    /// Mean squared feature error on the training samples, in raw units.
    pub mse: f64,
    pub constant_outputs: usize,
}

const CONSTANT_STD: f64 = 1e-12;

fn column_stats(x: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows().max(1) as f64;
    let mean: Vec<f64> = x.sum_axis(Axis(0)).iter().map(|s| s / n).collect();
    let std: Vec<f64> = x
        .axis_iter(Axis(1))
        .zip(&mean)
        .map(|(col, m)| (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt())
        .collect();
    (mean, std)
}

struct Net {
    w: Vec<Array2<f32>>,
    b: Vec<Array1<f32>>,
}

impl Net {
    fn from_mlp(mlp: &PartMlp) -> Self {
        Self {
            w: mlp
                .layers
                .iter()
                .map(|l| Array2::from_shape_vec((l.out_dim, l.in_dim), l.weights.clone()).unwrap())
                .collect(),
            b: mlp.layers.iter().map(|l| Array1::from(l.bias.clone())).collect(),
        }
    }

    /// Pre-activations and activations of every layer.
    fn forward(&self, x: &Array2<f32>) -> (Vec<Array2<f32>>, Vec<Array2<f32>>) {
        let last = self.w.len() - 1;
        let mut zs = Vec::with_capacity(self.w.len());
        let mut acts = vec![x.clone()];
        for l in 0..self.w.len() {
            let mut z = acts[l].dot(&self.w[l].t());
            z += &self.b[l];
            let a = if l == last { z.clone() } else { z.mapv(|v| v.max(0.0)) };
            zs.push(z);
            acts.push(a);
        }
        (zs, acts)
    }

    fn predict(&self, x: &Array2<f32>) -> Array2<f32> {
        self.forward(x).1.pop().unwrap()
    }
}

fn train(
    net: &mut Net,
    xn: &Array2<f32>,
    yn: &Array2<f32>,
    constant: &[bool],
    cfg: &FitConfig,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<(), &'static str> {
    let n = xn.nrows();
    let n_out = yn.ncols();
    let n_layers = net.w.len();
    let batch = if cfg.batch_size == 0 { n } else { cfg.batch_size.min(n) };
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut mw: Vec<Array2<f32>> = net.w.iter().map(|w| Array2::zeros(w.dim())).collect();
    let mut mb: Vec<Array1<f32>> = net.b.iter().map(|b| Array1::zeros(b.len())).collect();
    let mut sw = mw.clone();
    let mut sb = mb.clone();
    let (beta1, beta2, eps) = (0.9f32, 0.999f32, 1e-8f32);
    let grad_scale = 2.0 / (batch * n_out) as f32;
    for it in 0..cfg.iterations {
        let (xb, yb) = if batch == n {
            (xn.clone(), yn.clone())
        } else {
            if cursor + batch > n {
                order.shuffle(rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + batch];
            cursor += batch;
            (xn.select(Axis(0), idx), yn.select(Axis(0), idx))
        };
        let (zs, acts) = net.forward(&xb);
        let mut delta = (&acts[n_layers] - &yb) * grad_scale;
        for (c, &is_const) in constant.iter().enumerate() {
            if is_const {
                delta.column_mut(c).fill(0.0);
            }
        }
        let lr = cfg.learning_rate * 0.5 * (1.0 + (std::f32::consts::PI * it as f32 / cfg.iterations as f32).cos());
        let t = (it + 1) as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for l in (0..n_layers).rev() {
            let gw = delta.t().dot(&acts[l]);
            let gb = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut next = delta.dot(&net.w[l]);
                next.zip_mut_with(&zs[l - 1], |d, &z| {
                    if z <= 0.0 {
                        *d = 0.0
                    }
                });
                delta = next;
            }
            match cfg.optimizer {
                Optimizer::Momentum => {
                    mw[l].zip_mut_with(&gw, |v, &g| *v = cfg.momentum * *v - lr * g);
                    mb[l].zip_mut_with(&gb, |v, &g| *v = cfg.momentum * *v - lr * g);
                    net.w[l] += &mw[l];
                    net.b[l] += &mb[l];
                }
                Optimizer::Adam => {
                    adam(
                        &mut net.w[l],
                        &mut mw[l],
                        &mut sw[l],
                        &gw,
                        lr,
                        c1,
                        c2,
                        beta1,
                        beta2,
                        eps,
                    );
                    adam(
                        &mut net.b[l],
                        &mut mb[l],
                        &mut sb[l],
                        &gb,
                        lr,
                        c1,
                        c2,
                        beta1,
                        beta2,
                        eps,
                    );
                }
            }
        }
        if it % 100 == 0 && !net.w.iter().all(|w| w.iter().all(|v| v.is_finite())) {
            return Err("loss diverged");
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn adam<D: ndarray::Dimension>(
    w: &mut ndarray::Array<f32, D>,
    m: &mut ndarray::Array<f32, D>,
    v: &mut ndarray::Array<f32, D>,
    g: &ndarray::Array<f32, D>,
    lr: f32,
    c1: f32,
    c2: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
) {
    ndarray::Zip::from(w).and(m).and(v).and(g).for_each(|w, m, v, &g| {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    });
}

fn mse(pred: &Array2<f32>, y: &Array2<f32>) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(y.iter())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / n
}

/// Fits one MLP to `(x, y)` by gradient descent (Adam or heavy-ball momentum)
/// with a cosine-decayed step. Output columns that are constant are solved
/// exactly by the output bias.
pub fn fit_part_mlp(
    x: &Array2<f32>,
    y: &Array2<f64>,
    shapes: &[(usize, usize)],
    cfg: &FitConfig,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<(PartMlp, PartFitStats), &'static str> {
    let n = x.nrows();
    let mut mlp = init_part_mlp(shapes, rng);
    let (x_mean, x_std) = column_stats(&x.mapv(|v| v as f64));
    let (y_mean, y_std) = column_stats(y);
    let constant: Vec<bool> = y_std.iter().map(|&s| s <= CONSTANT_STD).collect();
    let x_scale: Vec<f64> = x_std.iter().map(|&s| if s > CONSTANT_STD { s } else { 1.0 }).collect();
    let y_scale: Vec<f64> = y_std
        .iter()
        .zip(&constant)
        .map(|(&s, &c)| if c { 1.0 } else { s })
        .collect();

    let xn = Array2::from_shape_fn(x.dim(), |(r, c)| ((x[[r, c]] as f64 - x_mean[c]) / x_scale[c]) as f32);
    let yn = Array2::from_shape_fn(y.dim(), |(r, c)| {
        if constant[c] {
            0.0
        } else {
            ((y[[r, c]] - y_mean[c]) / y_scale[c]) as f32
        }
    });

    let mut net = Net::from_mlp(&mlp);
    let n_layers = net.w.len();
    if constant.iter().any(|&c| !c) && n > 0 {
        train(&mut net, &xn, &yn, &constant, cfg, rng)?;
    }
    let final_pred = net.predict(&xn);
    if !final_pred.iter().all(|v| v.is_finite()) {
        return Err("loss diverged");
    }

    // Fold input standardization into the first layer and output
    // standardization into the last.
    for (l, layer) in mlp.layers.iter_mut().enumerate() {
        let mut w = net.w[l].mapv(|v| v as f64);
        let mut b = net.b[l].mapv(|v| v as f64);
        if l == 0 {
            for c in 0..layer.in_dim {
                let s = x_scale[c];
                for r in 0..layer.out_dim {
                    w[[r, c]] /= s;
                }
            }
            for r in 0..layer.out_dim {
                let shift: f64 = (0..layer.in_dim).map(|c| w[[r, c]] * x_mean[c]).sum();
                b[r] -= shift;
            }
        }
        if l == n_layers - 1 {
            for r in 0..layer.out_dim {
                if constant[r] {
                    w.row_mut(r).fill(0.0);
                    b[r] = y_mean[r];
                } else {
                    w.row_mut(r).mapv_inplace(|v| v * y_scale[r]);
                    b[r] = b[r] * y_scale[r] + y_mean[r];
                }
            }
        }
        *layer = DenseLayer {
            in_dim: layer.in_dim,
            out_dim: layer.out_dim,
            weights: w.iter().map(|&v| v as f32).collect(),
            bias: b.iter().map(|&v| v as f32).collect(),
        };
    }
    let raw = Net::from_mlp(&mlp).predict(x);
    let stats = PartFitStats {
        mse: mse(&raw, &y.mapv(|v| v as f32)),
        constant_outputs: constant.iter().filter(|&&c| c).count(),
    };
    if !stats.mse.is_finite() {
        return Err("loss diverged");
    }
    Ok((mlp, stats))
}

/// Masked MLP input rows for one part.
pub fn part_inputs(inputs: &[Vec<f32>], pose_dim: usize, is_head: bool) -> Array2<f32> {
    let d = inputs.first().map_or(0, Vec::len);
    Array2::from_shape_fn((inputs.len(), d), |(r, c)| {
        if !is_head && c >= pose_dim {
            0.0
        } else {
            inputs[r][c]
        }
    })
}

/// Fits every part's MLP. `inputs` are the concatenated `theta_p ++ theta_e`
/// vectors, `targets[i]` is part `i`'s `[samples, N_B]` feature matrix.
pub fn fit_part_mlps(
    inputs: &[Vec<f32>],
    targets: &[Array2<f64>],
    head: &[bool],
    pose_dim: usize,
    shapes: &[(usize, usize)],
    cfg: &FitConfig,
    seed: u64,
) -> Result<(MlpWeights, Vec<PartFitStats>)> {
    let n_blend = shapes.last().map_or(0, |s| s.1);
    let in_dim = shapes.first().map_or(0, |s| s.0);
    if head.len() != targets.len() {
        return Err(Error::Shape("one head flag per part is required".into()));
    }
    if inputs.iter().any(|x| x.len() != in_dim) {
        return Err(Error::Shape(format!("every input must have {in_dim} values")));
    }
    if inputs.len() < 2 * n_blend {
        return Err(Error::Precondition(format!(
            "{} samples, at least {} required",
            inputs.len(),
            2 * n_blend
        )));
    }
    for (i, t) in targets.iter().enumerate() {
        if t.dim() != (inputs.len(), n_blend) {
            return Err(Error::Shape(format!("part {i} targets are {:?}", t.dim())));
        }
    }
    let results: Vec<Result<(PartMlp, PartFitStats)>> = targets
        .par_iter()
        .enumerate()
        .map(|(i, y)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let x = part_inputs(inputs, pose_dim, head[i]);
            fit_part_mlp(&x, y, shapes, cfg, &mut rng).map_err(|_| Error::Divergence { part: i })
        })
        .collect();
    let mut parts = Vec::with_capacity(results.len());
    let mut stats = Vec::with_capacity(results.len());
    for r in results {
        let (m, s) = r?;
        parts.push(m);
        stats.push(s);
    }
    Ok((MlpWeights { parts }, stats))
}
