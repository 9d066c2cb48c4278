//! Multi-query slot attention.
//!
//! `h` query heads, each with its own slot distribution, query projection, GRU
//! and residual MLP, iterate against a single shared key/value projection of
//! the input tokens. Per iteration and head `j`:
//!
//! ```text
//! q       = Q_j(LN(s))
//! logits  = k · qᵀ / sqrt(D_slots)              N×K
//! attn    = softmax over slots, per patch       N×K
//! weights = (attn + ε) / Σ_patches (attn + ε)   N×K
//! updates = weightsᵀ · v                        K×D_slots
//! s       = GRU_j(state = s, input = updates)
//! s       = s + MLP_j(LN(s))
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::model::ModelConfig;
use crate::nn::{gru_cell, uniform_init, GruParams, LayerNormParams, Linear, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Parameters owned by a single query head.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub mu: ParamId,
    pub log_sigma: ParamId,
    pub q: Linear,
    pub gru: GruParams,
    pub mlp: Mlp,
    pub norm_slots: Option<LayerNormParams>,
    pub norm_mlp: Option<LayerNormParams>,
}

impl HeadParams {
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.mu, self.log_sigma, self.q.weight];
        ids.extend([self.gru.w_ih, self.gru.w_hh, self.gru.b_ih, self.gru.b_hh]);
        for l in &self.mlp.layers {
            ids.push(l.weight);
            ids.extend(l.bias);
        }
        for n in self.norm_slots.iter().chain(&self.norm_mlp) {
            ids.extend([n.gain, n.bias]);
        }
        ids
    }
}

/// All query heads plus the one key/value projection pair they share.
#[derive(Clone, Debug)]
pub struct HeadBank {
    pub heads: Vec<HeadParams>,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub norm_input: Option<LayerNormParams>,
    pub num_slots: usize,
    pub slot_dim: usize,
    pub iters: usize,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlotSet {
    pub slots: Tensor,
    pub head_index: usize,
}

impl SlotSet {
    pub fn num_slots(&self) -> usize {
        self.slots.rows()
    }

    pub fn dim(&self) -> usize {
        self.slots.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState {
    pub logits: Tensor,
    pub attn: Tensor,
    pub weights: Tensor,
    pub updates: Tensor,
}

/// Graph handles for one attention evaluation.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub logits: Var,
    pub attn: Var,
    pub weights: Var,
    pub updates: Var,
}

impl AttentionVars {
    pub fn values(&self, g: &Graph) -> AttentionState {
        AttentionState {
            logits: g.value(self.logits).clone(),
            attn: g.value(self.attn).clone(),
            weights: g.value(self.weights).clone(),
            updates: g.value(self.updates).clone(),
        }
    }
}

/// Independent rng stream for head `j` derived from one seed.
pub fn head_rng(seed: u64, head: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(head as u64);
    rng
}

pub fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

impl HeadBank {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.slot_dim;
        let norm_input = if cfg.layer_norm {
            Some(LayerNormParams::register(store, "shared.norm_input", cfg.feat_dim)?)
        } else {
            None
        };
        let k_proj = Linear::register(store, "shared.k", None, cfg.feat_dim, d, rng)?;
        let v_proj = Linear::register(store, "shared.v", None, cfg.feat_dim, d, rng)?;
        let limit = (6.0 / (1 + d) as f64).sqrt();
        let heads = (0..cfg.heads)
            .map(|j| {
                let p = |s: &str| format!("head{j}.{s}");
                let mu = store.register(p("mu"), uniform_init(rng, &[d], 1).map(|v| v * limit))?;
                let log_sigma = store.register(p("log_sigma"), uniform_init(rng, &[d], 1).map(|v| v * limit))?;
                let q = Linear::register(store, &p("q"), None, d, d, rng)?;
                let gru = GruParams::register(store, &p("gru"), d, rng)?;
                let mlp = Mlp::register(store, &p("mlp"), &[d, cfg.slot_mlp_hidden, d], rng)?;
                let (norm_slots, norm_mlp) = if cfg.layer_norm {
                    (
                        Some(LayerNormParams::register(store, &p("norm_slots"), d)?),
                        Some(LayerNormParams::register(store, &p("norm_mlp"), d)?),
                    )
                } else {
                    (None, None)
                };
                Ok(HeadParams {
                    mu,
                    log_sigma,
                    q,
                    gru,
                    mlp,
                    norm_slots,
                    norm_mlp,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            heads,
            k_proj,
            v_proj,
            norm_input,
            num_slots: cfg.num_slots,
            slot_dim: d,
            iters: cfg.iters,
            epsilon: cfg.epsilon,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    fn head(&self, j: usize) -> Result<&HeadParams> {
        self.heads.get(j).ok_or(Error::Bounds {
            index: j,
            len: self.heads.len(),
        })
    }

    /// Shared keys and values of the input tokens (`N×D_slots` each).
    pub fn project(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<(Var, Var)> {
        let x = match &self.norm_input {
            Some(n) => n.forward(g, store, tokens)?,
            None => tokens,
        };
        let k = self.k_proj.forward(g, store, x)?;
        let v = self.v_proj.forward(g, store, x)?;
        Ok((k, v))
    }

    /// `mu_j + exp(log_sigma_j) ⊙ noise`, with `noise` a `K×D_slots` standard-normal draw.
    pub fn init_slots_var(&self, g: &mut Graph, store: &ParamStore, j: usize, noise: Tensor) -> Result<Var> {
        let h = self.head(j)?;
        let mu = g.param(store, h.mu);
        let log_sigma = g.param(store, h.log_sigma);
        let sigma = g.exp(log_sigma);
        let noise = g.constant(noise);
        let scaled = g.mul_row(noise, sigma)?;
        g.add_row(scaled, mu)
    }

    pub fn sample_noise(&self, rng: &mut impl Rng) -> Tensor {
        standard_normal(rng, self.num_slots, self.slot_dim)
    }

    pub fn init_slots(&self, store: &ParamStore, j: usize, rng: &mut impl Rng) -> Result<SlotSet> {
        let mut g = Graph::new();
        let noise = self.sample_noise(rng);
        let s = self.init_slots_var(&mut g, store, j, noise)?;
        Ok(SlotSet {
            slots: g.value(s).clone(),
            head_index: j,
        })
    }

    /// Attention of head `j`'s slots over the shared keys and values, without updating.
    pub fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        j: usize,
        k: Var,
        v: Var,
        slots: Var,
    ) -> Result<AttentionVars> {
        let h = self.head(j)?;
        let normed = match &h.norm_slots {
            Some(n) => n.forward(g, store, slots)?,
            None => slots,
        };
        let q = h.q.forward(g, store, normed)?;
        let qt = g.transpose(q)?;
        let dots = g.matmul(k, qt)?;
        let logits = g.scale(dots, 1.0 / (self.slot_dim as f64).sqrt());
        let attn = g.softmax(logits, 1)?;
        let weights = g.renormalize(attn, 0, self.epsilon)?;
        let wt = g.transpose(weights)?;
        let updates = g.matmul(wt, v)?;
        Ok(AttentionVars {
            logits,
            attn,
            weights,
            updates,
        })
    }

    /// One full iteration: attention, GRU update, residual MLP.
    pub fn attention_iteration(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        j: usize,
        k: Var,
        v: Var,
        slots: Var,
    ) -> Result<(Var, AttentionVars)> {
        let h = self.head(j)?;
        let att = self.attend(g, store, j, k, v, slots)?;
        let updated = gru_cell(g, store, &h.gru, slots, att.updates)?;
        let normed = match &h.norm_mlp {
            Some(n) => n.forward(g, store, updated)?,
            None => updated,
        };
        let delta = h.mlp.forward(g, store, normed)?;
        let next = g.add(updated, delta)?;
        Ok((next, att))
    }

    /// `iters` iterations from the given initial slots. With zero iterations the
    /// initial slots are returned together with a single attention evaluation.
    pub fn iterate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        j: usize,
        k: Var,
        v: Var,
        initial: Var,
    ) -> Result<(Var, AttentionVars)> {
        if self.iters == 0 {
            let att = self.attend(g, store, j, k, v, initial)?;
            return Ok((initial, att));
        }
        let mut slots = initial;
        let mut last = None;
        for _ in 0..self.iters {
            let (next, att) = self.attention_iteration(g, store, j, k, v, slots)?;
            slots = next;
            last = Some(att);
        }
        Ok((slots, last.expect("at least one iteration")))
    }

    /// Projects `features` once and runs head `j` from a fresh slot draw.
    pub fn run_head(
        &self,
        store: &ParamStore,
        features: &FeatureMap,
        j: usize,
        rng: &mut impl Rng,
    ) -> Result<(SlotSet, AttentionState)> {
        let mut g = Graph::new();
        let tokens = g.constant(features.tokens().clone());
        let (k, v) = self.project(&mut g, store, tokens)?;
        let noise = self.sample_noise(rng);
        let init = self.init_slots_var(&mut g, store, j, noise)?;
        let (slots, att) = self.iterate(&mut g, store, j, k, v, init)?;
        Ok((
            SlotSet {
                slots: g.value(slots).clone(),
                head_index: j,
            },
            att.values(&g),
        ))
    }

    /// Runs head `j` from caller-provided initial slots.
    pub fn run_head_from(
        &self,
        store: &ParamStore,
        features: &FeatureMap,
        initial: &SlotSet,
    ) -> Result<(SlotSet, AttentionState)> {
        let mut g = Graph::new();
        let tokens = g.constant(features.tokens().clone());
        let (k, v) = self.project(&mut g, store, tokens)?;
        let init = g.constant(initial.slots.clone());
        let (slots, att) = self.iterate(&mut g, store, initial.head_index, k, v, init)?;
        Ok((
            SlotSet {
                slots: g.value(slots).clone(),
                head_index: initial.head_index,
            },
            att.values(&g),
        ))
    }

    /// Every head over one shared projection; head `j` draws from `head_rng(seed, j)`.
    pub fn run_all_heads(
        &self,
        store: &ParamStore,
        features: &FeatureMap,
        seed: u64,
    ) -> Result<Vec<(SlotSet, AttentionState)>> {
        let mut g = Graph::new();
        let tokens = g.constant(features.tokens().clone());
        let (k, v) = self.project(&mut g, store, tokens)?;
        (0..self.num_heads())
            .map(|j| {
                let noise = self.sample_noise(&mut head_rng(seed, j));
                let init = self.init_slots_var(&mut g, store, j, noise)?;
                let (slots, att) = self.iterate(&mut g, store, j, k, v, init)?;
                Ok((
                    SlotSet {
                        slots: g.value(slots).clone(),
                        head_index: j,
                    },
                    att.values(&g),
                ))
            })
            .collect()
    }
}
