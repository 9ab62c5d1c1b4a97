//! Sentence-conditioned modulation of the visual pyramid and the textual
//! activation maps that drive suspected-region selection.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Affine maps producing per-channel scale and shift from a conditioning
/// vector.
#[derive(Clone, Debug)]
pub struct FiLMParams {
    pub gamma_w: ParamId,
    pub gamma_b: ParamId,
    pub beta_w: ParamId,
    pub beta_b: ParamId,
}

impl FiLMParams {
    /// Starts near the identity modulation (gamma ≈ 1, beta ≈ 0).
    pub fn init<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        d_out: usize,
        d_cond: usize,
    ) -> Self {
        let std = 0.5 / (d_cond as f64).sqrt();
        Self {
            gamma_w: store.normal(&format!("{name}.gamma.w"), &[d_out, d_cond], std, rng),
            gamma_b: store.constant(&format!("{name}.gamma.b"), &[d_out], 1.0),
            beta_w: store.normal(&format!("{name}.beta.w"), &[d_out, d_cond], std, rng),
            beta_b: store.constant(&format!("{name}.beta.b"), &[d_out], 0.0),
        }
    }

    pub fn out_dim<F: Scalar>(&self, store: &ParamStore<F>) -> usize {
        store.get(self.gamma_w).shape()[0]
    }

    pub fn cond_dim<F: Scalar>(&self, store: &ParamStore<F>) -> usize {
        store.get(self.gamma_w).shape()[1]
    }
}

/// `out[c, ..] = FC_γ(f)[c] · x[c, ..] + FC_β(f)[c]`. Works for maps
/// `[C, H, W]` and node sets `[C, K]` alike.
pub fn film_modulate<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    p: &FiLMParams,
    x: Var,
    cond: Var,
) -> Result<Var> {
    let c = g.shape(x)[0];
    if c != p.out_dim(store) {
        return Err(invalid!("FiLM expects {} channels, got {c}", p.out_dim(store)));
    }
    if g.shape(cond) != [p.cond_dim(store)] {
        return Err(invalid!(
            "FiLM conditioning must be a vector of length {}, got {:?}",
            p.cond_dim(store),
            g.shape(cond)
        ));
    }
    let gw = g.param(store, p.gamma_w);
    let gb = g.param(store, p.gamma_b);
    let bw = g.param(store, p.beta_w);
    let bb = g.param(store, p.beta_b);
    let gamma = g.linear(cond, gw, Some(gb));
    let beta = g.linear(cond, bw, Some(bb));
    Ok(g.film(x, gamma, beta))
}

/// Single-output 1x1 convolution producing the textual activation map.
#[derive(Clone, Debug)]
pub struct ActivationParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl ActivationParams {
    pub fn init<F: Scalar, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, d_m: usize) -> Self {
        let w = store.normal("fusion.activation.w", &[1, d_m, 1, 1], 1.0 / (d_m as f64).sqrt(), rng);
        // positive start keeps the map (and the graph edges) alive at init
        let b = store.constant("fusion.activation.b", &[1], 0.5);
        Self { w, b }
    }
}

/// `C = ReLU(Conv1x1(M))`, shape `[1, h, w]`.
pub fn activation_map<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    p: &ActivationParams,
    m: Var,
) -> Var {
    let w = g.param(store, p.w);
    let b = g.param(store, p.b);
    let pre = g.conv2d(m, w, Some(b), 1, 0, 1);
    g.relu(pre)
}

/// Fused maps `M^l`, activation maps `C^l` and their level-4 averages.
#[derive(Clone, Copy, Debug)]
pub struct MultiModalState {
    pub maps: [Var; 3],
    pub activations: [Var; 3],
    pub mean_map: Var,
    pub mean_activation: Var,
}

/// Resample levels 3 and 5 onto the level-4 grid (2x2 average pooling down,
/// nearest-neighbour up) and average the three.
pub fn pyramid_average<F: Scalar>(g: &mut Graph<F>, levels: [Var; 3]) -> Var {
    let down = g.avg_pool2(levels[0]);
    let up = g.upsample2(levels[2]);
    g.mean_n(&[down, levels[1], up])
}

/// Per-level modulation plus activation maps.
pub fn fuse<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    films: &[FiLMParams; 3],
    act: &ActivationParams,
    pyramid: [Var; 3],
    sentence: Var,
) -> Result<MultiModalState> {
    let mut maps = [pyramid[0]; 3];
    let mut activations = [pyramid[0]; 3];
    for l in 0..3 {
        maps[l] = film_modulate(g, store, &films[l], pyramid[l], sentence)?;
        activations[l] = activation_map(g, store, act, maps[l]);
    }
    let mean_map = pyramid_average(g, maps);
    let mean_activation = pyramid_average(g, activations);
    Ok(MultiModalState { maps, activations, mean_map, mean_activation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn identity_modulation_returns_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let p = FiLMParams::init(&mut store, &mut rng, "film", 3, 2);
        store.get_mut(p.gamma_w).data_mut().fill(0.0);
        store.get_mut(p.beta_w).data_mut().fill(0.0);
        let mut g = Graph::new();
        let xt = rand_tensor(&[3, 2, 2], &mut rng);
        let x = g.constant(xt.clone());
        let f = g.constant(rand_tensor(&[2], &mut rng));
        let out = film_modulate(&mut g, &store, &p, x, f).unwrap();
        assert_eq!(g.value(out), &xt);
    }

    #[test]
    fn zero_input_gives_beta_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let p = FiLMParams::init(&mut store, &mut rng, "film", 3, 2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 2, 2]));
        let ft = rand_tensor(&[2], &mut rng);
        let f = g.constant(ft.clone());
        let out = film_modulate(&mut g, &store, &p, x, f).unwrap();
        let bw = store.get(p.beta_w);
        let bb = store.get(p.beta_b);
        for c in 0..3 {
            let beta = bb.data()[c] + (0..2).map(|k| bw.at2(c, k) * ft.data()[k]).sum::<f64>();
            for i in 0..2 {
                for j in 0..2 {
                    assert!((g.value(out).at3(c, i, j) - beta).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn film_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let p = FiLMParams::init(&mut store, &mut rng, "film", 3, 4);
        let xt = rand_tensor(&[3, 2, 2], &mut rng);
        let ft = rand_tensor(&[4], &mut rng);
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let f = g.constant(ft.clone());
        let out = film_modulate(&mut g, &store, &p, x, f).unwrap();
        let (gw, gb, bw, bb) = (store.get(p.gamma_w), store.get(p.gamma_b), store.get(p.beta_w), store.get(p.beta_b));
        for c in 0..3 {
            let mut gamma = gb.data()[c];
            let mut beta = bb.data()[c];
            for k in 0..4 {
                gamma += gw.at2(c, k) * ft.data()[k];
                beta += bw.at2(c, k) * ft.data()[k];
            }
            for i in 0..2 {
                for j in 0..2 {
                    let expect = gamma * xt.at3(c, i, j) + beta;
                    assert!((g.value(out).at3(c, i, j) - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn film_rejects_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let p = FiLMParams::init(&mut store, &mut rng, "film", 3, 4);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2, 2]));
        let f = g.constant(Tensor::zeros(&[4]));
        assert!(film_modulate(&mut g, &store, &p, x, f).is_err());
        let x = g.constant(Tensor::zeros(&[3, 2, 2]));
        let f = g.constant(Tensor::zeros(&[5]));
        assert!(film_modulate(&mut g, &store, &p, x, f).is_err());
    }

    #[test]
    fn activation_floor_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let p = ActivationParams::init(&mut store, &mut rng, 3);
        store.get_mut(p.w).data_mut().copy_from_slice(&[1.0, 1.0, 1.0]);
        store.get_mut(p.b).data_mut()[0] = -100.0;
        let mut g = Graph::new();
        let m = g.constant(rand_tensor(&[3, 4, 4], &mut rng));
        let c = activation_map(&mut g, &store, &p, m);
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));

        let mut store = ParamStore::<f64>::new();
        let p = ActivationParams::init(&mut store, &mut rng, 1);
        store.get_mut(p.w).data_mut()[0] = 1.0;
        store.get_mut(p.b).data_mut()[0] = 0.0;
        let mt = rand_tensor(&[1, 3, 3], &mut rng).map(f64::abs);
        let mut g = Graph::new();
        let m = g.constant(mt.clone());
        let c = activation_map(&mut g, &store, &p, m);
        assert_eq!(g.value(c), &mt);
    }

    #[test]
    fn activation_matches_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let p = ActivationParams::init(&mut store, &mut rng, 4);
        let mt = rand_tensor(&[4, 3, 5], &mut rng);
        let mut g = Graph::new();
        let m = g.constant(mt.clone());
        let c = activation_map(&mut g, &store, &p, m);
        let w = store.get(p.w).data();
        let b = store.get(p.b).data()[0];
        for i in 0..3 {
            for j in 0..5 {
                let pre: f64 = (0..4).map(|ch| w[ch] * mt.at3(ch, i, j)).sum::<f64>() + b;
                assert!((g.value(c).at3(0, i, j) - pre.max(0.0)).abs() < 1e-6);
            }
        }
    }

    fn average_oracle(l3: &Tensor<f64>, l4: &Tensor<f64>, l5: &Tensor<f64>) -> Tensor<f64> {
        let s = l4.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = Tensor::zeros(s);
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let pooled = (l3.at3(ch, 2 * i, 2 * j)
                        + l3.at3(ch, 2 * i + 1, 2 * j)
                        + l3.at3(ch, 2 * i, 2 * j + 1)
                        + l3.at3(ch, 2 * i + 1, 2 * j + 1))
                        / 4.0;
                    let nearest = l5.at3(ch, i / 2, j / 2);
                    out.data_mut()[(ch * h + i) * w + j] = (pooled + l4.at3(ch, i, j) + nearest) / 3.0;
                }
            }
        }
        out
    }

    #[test]
    fn pyramid_average_cases() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(&[2, 8, 8], 1.5));
        let b = g.constant(Tensor::full(&[2, 4, 4], 1.5));
        let c = g.constant(Tensor::full(&[2, 2, 2], 1.5));
        let m = pyramid_average(&mut g, [a, b, c]);
        assert!(g.value(m).data().iter().all(|&v| v == 1.5));

        let a = g.constant(Tensor::zeros(&[2, 8, 8]));
        let b = g.constant(Tensor::full(&[2, 4, 4], 3.0));
        let c = g.constant(Tensor::zeros(&[2, 2, 2]));
        let m = pyramid_average(&mut g, [a, b, c]);
        assert!(g.value(m).data().iter().all(|&v| (v - 1.0).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t3 = rand_tensor(&[3, 8, 8], &mut rng);
        let t4 = rand_tensor(&[3, 4, 4], &mut rng);
        let t5 = rand_tensor(&[3, 2, 2], &mut rng);
        let expect = average_oracle(&t3, &t4, &t5);
        let mut g = Graph::<f64>::new();
        let vars = [g.constant(t3), g.constant(t4), g.constant(t5)];
        let m = pyramid_average(&mut g, vars);
        assert!(g.value(m).max_abs_diff(&expect) < 1e-6);
    }
}
