//! Forward and backward passes.
//!
//! Feature maps are `(channels, frames, bands)` in standard layout.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};

use super::{ModelState, Real, Stage};
use crate::error::{Error, Result};
use crate::mel::{MelFrameMatrix, N_MELS};

pub const LAYER_NORM_EPS: f64 = 1e-8;
const STANDARDIZE_EPS: f64 = 1e-5;

/// Zero-mean, unit-variance copy of the mel matrix as a `(1, T, 64)` map.
fn standardized_input<T: Real>(mel: &MelFrameMatrix) -> Array3<T> {
    let v = mel.values();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let scale = 1.0 / (var.sqrt() + STANDARDIZE_EPS);
    Array3::from_shape_fn((1, mel.frames(), N_MELS), |(_, t, b)| {
        T::of((mel.get(t, b) - mean) * scale)
    })
}

/// Same-padded depthwise 3×3 conv.
fn depthwise_forward<T: Real>(x: &Array3<T>, k: &Array3<T>, b: &Array1<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        let xs = x.index_axis(Axis(0), ch);
        let xs = xs.as_slice().unwrap();
        let mut os = out.index_axis_mut(Axis(0), ch);
        let os = os.as_slice_mut().unwrap();
        os.fill(b[ch]);
        for di in 0..3 {
            for dj in 0..3 {
                let kv = k[[ch, di, dj]];
                let (i0, i1) = valid_range(di, h);
                let (j0, j1) = valid_range(dj, w);
                for i in i0..i1 {
                    let src = (i + di - 1) * w;
                    let dst = i * w;
                    for j in j0..j1 {
                        os[dst + j] += kv * xs[src + j + dj - 1];
                    }
                }
            }
        }
    }
    out
}

/// Output rows `i` for which `i + d - 1` is inside `[0, n)`.
fn valid_range(d: usize, n: usize) -> (usize, usize) {
    let lo = 1usize.saturating_sub(d);
    let hi = (n + 1).saturating_sub(d).min(n);
    (lo, hi)
}

/// Accumulates kernel/bias gradients; returns the input gradient if asked.
fn depthwise_backward<T: Real>(
    x: &Array3<T>,
    k: &Array3<T>,
    g: &Array3<T>,
    dk: &mut Array3<T>,
    db: &mut Array1<T>,
    want_input: bool,
) -> Option<Array3<T>> {
    let (c, h, w) = x.dim();
    let mut dx = want_input.then(|| Array3::<T>::zeros((c, h, w)));
    for ch in 0..c {
        let xs = x.index_axis(Axis(0), ch);
        let xs = xs.as_slice().unwrap();
        let gs = g.index_axis(Axis(0), ch);
        let gs = gs.as_slice().unwrap();
        db[ch] += gs.iter().copied().sum::<T>();
        for di in 0..3 {
            for dj in 0..3 {
                let (i0, i1) = valid_range(di, h);
                let (j0, j1) = valid_range(dj, w);
                let mut acc = T::zero();
                for i in i0..i1 {
                    let src = (i + di - 1) * w;
                    let dst = i * w;
                    for j in j0..j1 {
                        acc += gs[dst + j] * xs[src + j + dj - 1];
                    }
                }
                dk[[ch, di, dj]] += acc;
                if let Some(dx) = dx.as_mut() {
                    let kv = k[[ch, di, dj]];
                    let mut ds = dx.index_axis_mut(Axis(0), ch);
                    let ds = ds.as_slice_mut().unwrap();
                    for i in i0..i1 {
                        let src = (i + di - 1) * w;
                        let dst = i * w;
                        for j in j0..j1 {
                            ds[src + j + dj - 1] += kv * gs[dst + j];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn as_matrix<T: Real>(x: &Array3<T>) -> ArrayView2<'_, T> {
    let (c, h, w) = x.dim();
    x.view().into_shape_with_order((c, h * w)).unwrap()
}

/// `relu(W·x + b)` over channels.
fn pointwise_relu<T: Real>(x: &Array3<T>, wt: &Array2<T>, b: &Array1<T>) -> Array3<T> {
    let (_, h, w) = x.dim();
    let mut y = wt.dot(&as_matrix(x));
    for (mut row, &bias) in y.axis_iter_mut(Axis(0)).zip(b.iter()) {
        row.mapv_inplace(|v| (v + bias).max(T::zero()));
    }
    y.into_shape_with_order((wt.nrows(), h, w)).unwrap()
}

/// Backward of [`pointwise_relu`] given the activated output `a`.
fn pointwise_relu_backward<T: Real>(
    x: &Array3<T>,
    a: &Array3<T>,
    wt: &Array2<T>,
    g: Array3<T>,
    dw: &mut Array2<T>,
    db: &mut Array1<T>,
) -> Array3<T> {
    let (cin, h, w) = x.dim();
    let mut g = g;
    ndarray::Zip::from(&mut g).and(a).for_each(|gv, &av| {
        if av <= T::zero() {
            *gv = T::zero();
        }
    });
    let gm = g.into_shape_with_order((wt.nrows(), h * w)).unwrap();
    *dw += &gm.dot(&as_matrix(x).t());
    *db += &gm.sum_axis(Axis(1));
    wt.t().dot(&gm).into_shape_with_order((cin, h, w)).unwrap()
}

fn avg_pool2<T: Real>(x: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    Array3::from_shape_fn((c, ho, wo), |(ch, i, j)| {
        (x[[ch, 2 * i, 2 * j]]
            + x[[ch, 2 * i, 2 * j + 1]]
            + x[[ch, 2 * i + 1, 2 * j]]
            + x[[ch, 2 * i + 1, 2 * j + 1]])
            * quarter
    })
}

fn avg_pool2_backward<T: Real>(g: &Array3<T>, shape: (usize, usize, usize)) -> Array3<T> {
    let mut dx = Array3::zeros(shape);
    let quarter = T::of(0.25);
    for ((ch, i, j), &v) in g.indexed_iter() {
        let q = v * quarter;
        dx[[ch, 2 * i, 2 * j]] = q;
        dx[[ch, 2 * i, 2 * j + 1]] = q;
        dx[[ch, 2 * i + 1, 2 * j]] = q;
        dx[[ch, 2 * i + 1, 2 * j + 1]] = q;
    }
    dx
}

#[derive(Debug, Clone)]
struct StageCache<T> {
    input: Array3<T>,
    depthwise: Array3<T>,
    activated: Array3<T>,
}

/// Intermediate tensors kept for [`backward_encode`].
#[derive(Debug, Clone)]
pub struct EncodeCache<T> {
    stages: Vec<StageCache<T>>,
    head_input: Array3<T>,
    head_activated: Array3<T>,
}

fn check_input<T: Real>(mel: &MelFrameMatrix, state: &ModelState<T>) -> Result<()> {
    let need = state.config.min_frames();
    if mel.frames() < need || mel.bands() < need {
        return Err(Error::TooFewFrames {
            frames: mel.frames(),
            bands: mel.bands(),
            required: need,
        });
    }
    Ok(())
}

fn run_stage<T: Real>(x: Array3<T>, st: &Stage<T>) -> (Array3<T>, StageCache<T>) {
    let d = depthwise_forward(&x, &st.dw_kernel, &st.dw_bias);
    let a = pointwise_relu(&d, &st.pw_weight, &st.pw_bias);
    let pooled = avg_pool2(&a);
    (
        pooled,
        StageCache {
            input: x,
            depthwise: d,
            activated: a,
        },
    )
}

fn global_pool<T: Real>(a: &Array3<T>) -> Array1<T> {
    let (_, h, w) = a.dim();
    as_matrix(a).sum_axis(Axis(1)) / T::of((h * w) as f64)
}

/// Embedding of one mel excerpt.
pub fn encode<T: Real>(mel: &MelFrameMatrix, state: &ModelState<T>) -> Result<Array1<T>> {
    check_input(mel, state)?;
    let mut x = standardized_input(mel);
    for st in &state.stages {
        let d = depthwise_forward(&x, &st.dw_kernel, &st.dw_bias);
        x = avg_pool2(&pointwise_relu(&d, &st.pw_weight, &st.pw_bias));
    }
    let a = pointwise_relu(&x, &state.head_weight, &state.head_bias);
    Ok(global_pool(&a))
}

pub fn encode_with_cache<T: Real>(
    mel: &MelFrameMatrix,
    state: &ModelState<T>,
) -> Result<(Array1<T>, EncodeCache<T>)> {
    check_input(mel, state)?;
    let mut x = standardized_input(mel);
    let mut stages = Vec::with_capacity(state.stages.len());
    for st in &state.stages {
        let (next, cache) = run_stage(x, st);
        stages.push(cache);
        x = next;
    }
    let a = pointwise_relu(&x, &state.head_weight, &state.head_bias);
    let e = global_pool(&a);
    Ok((
        e,
        EncodeCache {
            stages,
            head_input: x,
            head_activated: a,
        },
    ))
}

/// Accumulates parameter gradients of `⟨grad, encode(mel)⟩` into `grads`.
pub fn backward_encode<T: Real>(
    cache: &EncodeCache<T>,
    grad: ArrayView1<T>,
    state: &ModelState<T>,
    grads: &mut ModelState<T>,
) {
    let (e, h, w) = cache.head_activated.dim();
    let inv = T::of(1.0 / (h * w) as f64);
    let g = Array3::from_shape_fn((e, h, w), |(c, _, _)| grad[c] * inv);
    let mut g = pointwise_relu_backward(
        &cache.head_input,
        &cache.head_activated,
        &state.head_weight,
        g,
        &mut grads.head_weight,
        &mut grads.head_bias,
    );
    for (i, sc) in cache.stages.iter().enumerate().rev() {
        let st = &state.stages[i];
        let gs = &mut grads.stages[i];
        let ga = avg_pool2_backward(&g, sc.activated.dim());
        let gd = pointwise_relu_backward(
            &sc.depthwise,
            &sc.activated,
            &st.pw_weight,
            ga,
            &mut gs.pw_weight,
            &mut gs.pw_bias,
        );
        match depthwise_backward(
            &sc.input,
            &st.dw_kernel,
            &gd,
            &mut gs.dw_kernel,
            &mut gs.dw_bias,
            i > 0,
        ) {
            Some(dx) => g = dx,
            None => break,
        }
    }
}

/// Intermediate values kept for [`backward_project`].
#[derive(Debug, Clone)]
pub struct ProjectCache<T> {
    input: Array1<T>,
    normalized: Array1<T>,
    inv_std: T,
    output: Array1<T>,
}

impl<T: Real> ProjectCache<T> {
    /// Layer-norm output before gain, bias and tanh.
    pub fn normalized(&self) -> ArrayView1<'_, T> {
        self.normalized.view()
    }
}

fn check_embedding<T: Real>(e: ArrayView1<T>, state: &ModelState<T>) -> Result<()> {
    if e.len() != state.config.embed_dim {
        return Err(Error::Dimension {
            what: "embedding",
            expected: state.config.embed_dim,
            got: e.len(),
        });
    }
    Ok(())
}

/// `tanh(layernorm(linear(e)))`.
pub fn project<T: Real>(e: ArrayView1<T>, state: &ModelState<T>) -> Result<Array1<T>> {
    project_with_cache(e, state).map(|(y, _)| y)
}

pub fn project_with_cache<T: Real>(
    e: ArrayView1<T>,
    state: &ModelState<T>,
) -> Result<(Array1<T>, ProjectCache<T>)> {
    check_embedding(e, state)?;
    let z = state.proj_weight.dot(&e) + &state.proj_bias;
    let n = T::of(z.len() as f64);
    let mean = z.sum() / n;
    let var = z.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
    let normalized = z.mapv(|v| (v - mean) * inv_std);
    let output = ndarray::Zip::from(&normalized)
        .and(&state.ln_gain)
        .and(&state.ln_bias)
        .map_collect(|&x, &g, &b| (g * x + b).tanh());
    Ok((
        output.clone(),
        ProjectCache {
            input: e.to_owned(),
            normalized,
            inv_std,
            output,
        },
    ))
}

/// Accumulates parameter gradients and returns the gradient wrt the embedding.
pub fn backward_project<T: Real>(
    cache: &ProjectCache<T>,
    grad: ArrayView1<T>,
    state: &ModelState<T>,
    grads: &mut ModelState<T>,
) -> Array1<T> {
    // through tanh
    let du = ndarray::Zip::from(&grad)
        .and(&cache.output)
        .map_collect(|&g, &y| g * (T::one() - y * y));
    grads.ln_bias += &du;
    grads.ln_gain += &(&du * &cache.normalized);
    let dx = &du * &state.ln_gain;
    let n = T::of(dx.len() as f64);
    let mean_dx = dx.sum() / n;
    let mean_dx_x = (&dx * &cache.normalized).sum() / n;
    let dz = ndarray::Zip::from(&dx)
        .and(&cache.normalized)
        .map_collect(|&d, &x| (d - mean_dx - x * mean_dx_x) * cache.inv_std);
    let dz2 = dz.view().insert_axis(Axis(1));
    let e2 = cache.input.view().insert_axis(Axis(0));
    grads.proj_weight += &dz2.dot(&e2);
    grads.proj_bias += &dz;
    state.proj_weight.t().dot(&dz)
}

/// `yᵀ W ŷ`.
pub fn bilinear_similarity<T: Real>(
    y: ArrayView1<T>,
    y_hat: ArrayView1<T>,
    w: ArrayView2<T>,
) -> Result<T> {
    if w.nrows() != y.len() {
        return Err(Error::Dimension {
            what: "bilinear left operand",
            expected: w.nrows(),
            got: y.len(),
        });
    }
    if w.ncols() != y_hat.len() {
        return Err(Error::Dimension {
            what: "bilinear right operand",
            expected: w.ncols(),
            got: y_hat.len(),
        });
    }
    Ok(y.dot(&w.dot(&y_hat)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::seeding;
    use ndarray::array;

    fn toy_config() -> EncoderConfig {
        EncoderConfig {
            stage_channels: vec![2, 3],
            embed_dim: 4,
            proj_dim: 5,
        }
    }

    fn mel(frames: usize, seed: u64) -> MelFrameMatrix {
        use rand::Rng;
        let mut rng = seeding::stream(seed, &[]);
        let v = (0..frames * N_MELS)
            .map(|_| rng.random_range(-8.0..2.0))
            .collect();
        MelFrameMatrix::from_values(frames, v).unwrap()
    }

    #[test]
    fn default_shape() {
        let cfg = EncoderConfig::default();
        let st = ModelState::<f32>::init(&cfg, &mut seeding::stream(1, &[])).unwrap();
        let e = encode(&mel(98, 2), &st).unwrap();
        assert_eq!(e.len(), 128);
        let y = project(e.view(), &st).unwrap();
        assert_eq!(y.len(), 512);
        assert!(y.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn too_few_frames() {
        let cfg = EncoderConfig::default();
        let st = ModelState::<f32>::init(&cfg, &mut seeding::stream(1, &[])).unwrap();
        assert!(encode(&mel(7, 2), &st).is_err());
        assert!(encode(&mel(8, 2), &st).is_ok());
    }

    #[test]
    fn zero_input_is_deterministic() {
        let cfg = EncoderConfig::default();
        let st = ModelState::<f64>::init(&cfg, &mut seeding::stream(3, &[])).unwrap();
        let m = MelFrameMatrix::from_values(98, vec![0.0; 98 * N_MELS]).unwrap();
        let a = encode(&m, &st).unwrap();
        let b = encode(&m, &st).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cached_forward_matches_plain() {
        let st = ModelState::<f64>::init(&toy_config(), &mut seeding::stream(4, &[])).unwrap();
        let m = mel(13, 5);
        let (e, _) = encode_with_cache(&m, &st).unwrap();
        assert_eq!(e, encode(&m, &st).unwrap());
    }

    #[test]
    fn layer_norm_moments() {
        let cfg = EncoderConfig::default();
        let st = ModelState::<f64>::init(&cfg, &mut seeding::stream(6, &[])).unwrap();
        let e = encode(&mel(98, 7), &st).unwrap();
        let (_, cache) = project_with_cache(e.view(), &st).unwrap();
        let x = cache.normalized();
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bilinear_examples() {
        let i2 = Array2::<f64>::eye(2);
        let u = array![0.6, 0.8];
        assert!((bilinear_similarity(u.view(), u.view(), i2.view()).unwrap() - 1.0).abs() < 1e-15);
        let z = Array2::<f64>::zeros((2, 2));
        assert_eq!(
            bilinear_similarity(u.view(), u.view(), z.view()).unwrap(),
            0.0
        );
        let w = array![[0.0, 2.0], [0.0, 0.0]];
        let y = array![1.0, 0.0];
        let yh = array![0.0, 1.0];
        assert_eq!(
            bilinear_similarity(y.view(), yh.view(), w.view()).unwrap(),
            2.0
        );
        let bad = array![1.0, 0.0, 0.0];
        assert!(bilinear_similarity(bad.view(), yh.view(), w.view()).is_err());
    }

    #[test]
    fn depthwise_matches_naive() {
        let mut rng = seeding::stream(8, &[]);
        use rand::Rng;
        let x: Array3<f64> = Array3::from_shape_fn((2, 5, 4), |_| rng.random_range(-1.0..1.0));
        let k = Array3::from_shape_fn((2, 3, 3), |_| rng.random_range(-1.0..1.0));
        let b = array![0.5, -0.25];
        let y = depthwise_forward(&x, &k, &b);
        for ((c, i, j), &v) in y.indexed_iter() {
            let mut acc = b[c];
            for di in 0..3 {
                for dj in 0..3 {
                    let (r, q) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                    if r >= 0 && q >= 0 && r < 5 && q < 4 {
                        acc += k[[c, di, dj]] * x[[c, r as usize, q as usize]];
                    }
                }
            }
            assert!((acc - v).abs() < 1e-12);
        }
    }

    fn perturb_biases(st: &mut ModelState<f64>, seed: u64) {
        use rand::Rng;
        let mut rng = seeding::stream(seed, &[]);
        for (name, t) in st.tensors_mut() {
            if name.ends_with("bias") || name == "ln.gain" {
                for v in t.iter_mut() {
                    *v += rng.random_range(0.05..0.3);
                }
            }
        }
    }

    fn probe_loss(st: &ModelState<f64>, m: &MelFrameMatrix, dir: &Array1<f64>) -> f64 {
        let e = encode(m, st).unwrap();
        let y = project(e.view(), st).unwrap();
        y.dot(dir)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = toy_config();
        let mut st = ModelState::<f64>::init(&cfg, &mut seeding::stream(9, &[])).unwrap();
        // random biases keep every ReLU away from its kink at zero
        perturb_biases(&mut st, 12);
        let m = mel(13, 10);
        let dir = array![0.3, -1.0, 0.7, 0.2, -0.4];
        let (e, ec) = encode_with_cache(&m, &st).unwrap();
        let (_, pc) = project_with_cache(e.view(), &st).unwrap();
        let mut grads = st.zeros_like();
        let ge = backward_project(&pc, dir.view(), &st, &mut grads);
        backward_encode(&ec, ge.view(), &st, &mut grads);

        let h = 1e-5;
        let analytic: Vec<(String, Vec<f64>)> = grads
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.to_vec()))
            .collect();
        for (ti, (name, an)) in analytic.iter().enumerate() {
            if name == "bilinear" {
                continue;
            }
            for k in 0..an.len() {
                let mut plus = st.clone();
                plus.tensors_mut()[ti].1[k] += h;
                let mut minus = st.clone();
                minus.tensors_mut()[ti].1[k] -= h;
                let fd = (probe_loss(&plus, &m, &dir) - probe_loss(&minus, &m, &dir)) / (2.0 * h);
                let err = (fd - an[k]).abs() / fd.abs().max(an[k].abs()).max(1e-6);
                assert!(err < 1e-4, "{name}[{k}]: fd {fd} analytic {}", an[k]);
            }
        }
    }
}
