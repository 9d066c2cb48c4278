//! Parameterized building blocks recorded onto a [`Graph`].

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Uniform in `±1/sqrt(fan_in)`.
pub(crate) fn uniform_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
}

/// `x·W (+ b)` with `W` stored as `in×out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn register(
        store: &mut ParamStore,
        weight_name: &str,
        bias_name: Option<&str>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.register(weight_name, uniform_init(rng, &[fan_in, fan_out], fan_in))?;
        let bias = match bias_name {
            Some(name) => Some(store.register(name, uniform_init(rng, &[fan_out], fan_in))?),
            None => None,
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Fully connected stack with ReLU between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// Registers layers `{prefix}.w{i}` / `{prefix}.b{i}` for `i = 1..`.
    pub fn register(store: &mut ParamStore, prefix: &str, widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Linear::register(
                    store,
                    &format!("{prefix}.w{}", i + 1),
                    Some(&format!("{prefix}.b{}", i + 1)),
                    w[0],
                    w[1],
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn register(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.register(format!("{prefix}.gain"), Tensor::full(&[dim], 1.0))?,
            bias: store.register(format!("{prefix}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// GRU weights with gates packed as `[reset | update | candidate]` columns.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
}

impl GruParams {
    pub fn register(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            w_ih: store.register(format!("{prefix}.w_ih"), uniform_init(rng, &[dim, 3 * dim], dim))?,
            w_hh: store.register(format!("{prefix}.w_hh"), uniform_init(rng, &[dim, 3 * dim], dim))?,
            b_ih: store.register(format!("{prefix}.b_ih"), uniform_init(rng, &[3 * dim], dim))?,
            b_hh: store.register(format!("{prefix}.b_hh"), uniform_init(rng, &[3 * dim], dim))?,
        })
    }
}

/// One GRU step applied independently to every row:
///
/// ```text
/// r = σ(x·W_ir + b_ir + h·W_hr + b_hr)
/// z = σ(x·W_iz + b_iz + h·W_hz + b_hz)
/// n = tanh(x·W_in + b_in + r ⊙ (h·W_hn + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
pub fn gru_cell(g: &mut Graph, store: &ParamStore, p: &GruParams, state: Var, input: Var) -> Result<Var> {
    if g.shape(state) != g.shape(input) {
        return Err(crate::Error::Shape {
            op: "gru_cell",
            lhs: g.shape(state).to_vec(),
            rhs: g.shape(input).to_vec(),
        });
    }
    let d = g.value(state).cols();
    let (w_ih, w_hh) = (g.param(store, p.w_ih), g.param(store, p.w_hh));
    let (b_ih, b_hh) = (g.param(store, p.b_ih), g.param(store, p.b_hh));
    let gi = g.matmul(input, w_ih)?;
    let gi = g.add_row(gi, b_ih)?;
    let gh = g.matmul(state, w_hh)?;
    let gh = g.add_row(gh, b_hh)?;

    let gi_r = g.slice_cols(gi, 0, d)?;
    let gh_r = g.slice_cols(gh, 0, d)?;
    let gi_z = g.slice_cols(gi, d, 2 * d)?;
    let gh_z = g.slice_cols(gh, d, 2 * d)?;
    let gi_n = g.slice_cols(gi, 2 * d, 3 * d)?;
    let gh_n = g.slice_cols(gh, 2 * d, 3 * d)?;

    let r = g.add(gi_r, gh_r)?;
    let r = g.sigmoid(r);
    let z = g.add(gi_z, gh_z)?;
    let z = g.sigmoid(z);
    let rn = g.mul(r, gh_n)?;
    let n = g.add(gi_n, rn)?;
    let n = g.tanh(n);

    let keep = g.affine(z, -1.0, 1.0);
    let fresh = g.mul(keep, n)?;
    let carried = g.mul(z, state)?;
    g.add(fresh, carried)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gru_store(dim: usize, rng: &mut ChaCha8Rng) -> (ParamStore, GruParams) {
        let mut store = ParamStore::new();
        let p = GruParams::register(&mut store, "gru", dim, rng).unwrap();
        (store, p)
    }

    #[test]
    fn zero_weights_halve_the_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut store, p) = gru_store(3, &mut rng);
        for id in [p.w_ih, p.w_hh, p.b_ih, p.b_hh] {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = Tensor::zeros(&shape);
        }
        let mut g = Graph::new();
        let state = Tensor::from_rows(&[[1.0, -2.0, 4.0], [0.5, 0.0, 3.0]]).unwrap();
        let h = g.constant(state.clone());
        let x = g.constant(Tensor::from_rows(&[[9.0, 9.0, 9.0], [-9.0, 1.0, 2.0]]).unwrap());
        let out = gru_cell(&mut g, &store, &p, h, x).unwrap();
        assert_eq!(g.value(out), &state.map(|v| 0.5 * v));
    }

    #[test]
    fn saturated_update_gate_keeps_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut store, p) = gru_store(4, &mut rng);
        let bias = store.get_mut(p.b_ih);
        for v in &mut bias.value.data_mut()[4..8] {
            *v = 1e4;
        }
        let mut g = Graph::new();
        let state = uniform_init(&mut rng, &[3, 4], 1);
        let h = g.constant(state.clone());
        let x = g.constant(uniform_init(&mut rng, &[3, 4], 1));
        let out = gru_cell(&mut g, &store, &p, h, x).unwrap();
        assert_eq!(g.value(out), &state);
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (store, p) = gru_store(8, &mut rng);
        let state = uniform_init(&mut rng, &[3, 8], 1);
        let input = uniform_init(&mut rng, &[3, 8], 1);
        let target = uniform_init(&mut rng, &[3, 8], 1);
        let loss_of = |store: &ParamStore| {
            let mut g = Graph::new();
            let h = g.constant(state.clone());
            let x = g.constant(input.clone());
            let t = g.constant(target.clone());
            let out = gru_cell(&mut g, store, &p, h, x).unwrap();
            let d = g.sub(out, t).unwrap();
            let sq = g.mul(d, d).unwrap();
            let loss = g.sum(sq);
            (g, loss)
        };
        let (g, loss) = loss_of(&store);
        let grads = g.backward(loss).unwrap();
        let analytic: std::collections::HashMap<_, _> = grads.params().map(|(id, t)| (id, t.clone())).collect();
        for id in [p.w_ih, p.w_hh, p.b_ih, p.b_hh] {
            let mut num = Vec::new();
            for i in 0..store.value(id).numel() {
                let mut plus = store.clone();
                plus.get_mut(id).value.data_mut()[i] += 1e-5;
                let mut minus = store.clone();
                minus.get_mut(id).value.data_mut()[i] -= 1e-5;
                let (gp, lp) = loss_of(&plus);
                let (gm, lm) = loss_of(&minus);
                num.push((gp.value(lp).item() - gm.value(lm).item()) / 2e-5);
            }
            let a = analytic[&id].data();
            let err: f64 = a.iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = num.iter().map(|y| y * y).sum::<f64>().sqrt();
            assert!(err / scale < 1e-4, "{} rel err {}", store.get(id).name, err / scale);
        }
    }

    #[test]
    fn mismatched_gru_shapes_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (store, p) = gru_store(2, &mut rng);
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros(&[2, 2]));
        let x = g.constant(Tensor::zeros(&[3, 2]));
        assert!(gru_cell(&mut g, &store, &p, h, x).is_err());
    }
}
