//! Optimization loop: mask, run one randomly chosen head, decode, regress the
//! unmasked tokens, Adam step.
//!
//! Images of a batch are processed on independent tapes, possibly in parallel.
//! All random draws happen up front in image order and gradients are summed in
//! image order, so results do not depend on the thread count.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::assignment::Matcher;
use crate::autograd::Graph;
use crate::decoder::reconstruction_loss_var;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::fusion::{fuse_for_training, Metric};
use crate::masking::{apply_mask, select_indices, MaskingConfig};
use crate::model::Model;
use crate::params::{GradBuffer, ParamId};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "SLOTFORGE_THREADS";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeadSelect {
    /// One head drawn per image.
    #[default]
    Random,
    /// One head drawn per batch and shared by all its images.
    RandomPerBatch,
    /// All heads fused before decoding.
    Fused,
}

impl FromStr for HeadSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "random-batch" => Ok(Self::RandomPerBatch),
            "fused" => Ok(Self::Fused),
            other => Err(Error::Config(format!("unknown head selection `{other}`"))),
        }
    }
}

impl fmt::Display for HeadSelect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::RandomPerBatch => "random-batch",
            Self::Fused => "fused",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_base: f64,
    pub warmup_frac: f64,
    /// Learning-rate multiplier reached at the end of the post-warmup horizon.
    pub decay_rate: f64,
    pub epochs: usize,
    /// Stops after this many steps and uses it as the schedule horizon.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub masking: MaskingConfig,
    pub head_select: HeadSelect,
    pub fusion_metric: Metric,
    pub fusion_matcher: Matcher,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_base: 4e-4,
            warmup_frac: 0.02,
            decay_rate: 0.5,
            epochs: 500,
            max_steps: None,
            batch_size: 16,
            masking: MaskingConfig::default(),
            head_select: HeadSelect::Random,
            fusion_metric: Metric::Cosine,
            fusion_matcher: Matcher::Hungarian,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "warmup_frac {} outside [0, 1]",
                self.warmup_frac
            )));
        }
        if !(self.lr_base >= 0.0 && self.lr_base.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr_base
            )));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate.is_finite()) {
            return Err(Error::Config(format!(
                "decay_rate must be positive, got {}",
                self.decay_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.masking.validate()
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.max_steps
            .unwrap_or_else(|| self.epochs * self.steps_per_epoch(dataset_len))
    }
}

/// Linear warmup over the first `round(warmup_frac · total)` steps, then
/// continuous exponential decay reaching `decay_rate · lr_base` at `total`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warmup = (cfg.warmup_frac * total_steps as f64).round() as usize;
    if step < warmup {
        return cfg.lr_base * (step + 1) as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return cfg.lr_base;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    cfg.lr_base * cfg.decay_rate.powf(progress)
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub head_rng: ChaCha8Rng,
    pub mask_rng: ChaCha8Rng,
    pub init_rng: ChaCha8Rng,
    pub order_rng: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl TrainState {
    pub fn new(model: &Model, seed: u64) -> Self {
        let zeros: Vec<Tensor> = model
            .store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            head_rng: stream(seed, 1),
            mask_rng: stream(seed, 2),
            init_rng: stream(seed, 3),
            order_rng: stream(seed, 4),
        }
    }
}

/// One Adam update of every parameter that received a gradient; parameters
/// without one keep their value and moments untouched.
pub fn adam_step(model: &mut Model, state: &mut TrainState, grads: &GradBuffer, lr: f64) {
    let t = (state.step + 1) as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for id in model.store.ids().collect::<Vec<_>>() {
        let Some(g) = grads.get(id) else { continue };
        let p = model.store.get_mut(id);
        if !p.trainable {
            continue;
        }
        let m = state.first_moment[id.0].data_mut();
        let v = state.second_moment[id.0].data_mut();
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

/// Per-image random choices, drawn sequentially before any parallel work.
#[derive(Clone, Debug)]
struct ImagePlan {
    head: usize,
    mask_seed: u64,
    noise: Vec<Tensor>,
}

struct ImageResult {
    loss: f64,
    grads: Vec<(ParamId, Tensor)>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub lr: f64,
    /// Head decoded for each image (the fusion reference when fusing).
    pub heads: Vec<usize>,
    pub grads: GradBuffer,
}

fn check_dims(model: &Model, map: &FeatureMap) -> Result<()> {
    let cfg = &model.config;
    if map.d_feats() != cfg.feat_dim || map.num_patches() != cfg.num_patches {
        return Err(Error::contract(format!(
            "features are {} patches x {} channels but the model expects {} x {}",
            map.num_patches(),
            map.d_feats(),
            cfg.num_patches,
            cfg.feat_dim
        )));
    }
    Ok(())
}

fn image_loss(model: &Model, map: &FeatureMap, plan: &ImagePlan, cfg: &TrainConfig) -> Result<ImageResult> {
    let report = select_indices(map, &cfg.masking, plan.mask_seed);
    let masked = apply_mask(map, &report.masked_indices)?;
    let (bank, store) = (&model.bank, &model.store);
    let mut g = Graph::new();
    let tokens = g.constant(masked.tokens().clone());
    let (k, v) = bank.project(&mut g, store, tokens)?;
    let slots = if cfg.head_select == HeadSelect::Fused {
        let mut finals = Vec::with_capacity(bank.num_heads());
        for (j, noise) in plan.noise.iter().enumerate() {
            let init = bank.init_slots_var(&mut g, store, j, noise.clone())?;
            finals.push(bank.iterate(&mut g, store, j, k, v, init)?.0);
        }
        fuse_for_training(&mut g, &finals, plan.head, cfg.fusion_metric, cfg.fusion_matcher)?
    } else {
        let init = bank.init_slots_var(&mut g, store, plan.head, plan.noise[0].clone())?;
        bank.iterate(&mut g, store, plan.head, k, v, init)?.0
    };
    let decoded = model.decoder.decode_var(&mut g, store, slots)?;
    let loss = reconstruction_loss_var(&mut g, decoded.reconstruction, map.tokens())?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        let (node, op) = g.first_non_finite().unwrap_or((loss.index(), "loss"));
        return Err(Error::Numeric { op, node });
    }
    let grads = g.backward(loss)?;
    Ok(ImageResult {
        loss: value,
        grads: grads.params().map(|(id, t)| (id, t.clone())).collect(),
    })
}

/// One optimization step over `batch`; `total_steps` sets the schedule horizon.
pub fn train_step(
    model: &mut Model,
    state: &mut TrainState,
    batch: &[&FeatureMap],
    cfg: &TrainConfig,
    total_steps: usize,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    for map in batch {
        check_dims(model, map)?;
    }
    let h = model.bank.num_heads();
    let batch_head = state.head_rng.random_range(0..h);
    let plans: Vec<ImagePlan> = batch
        .iter()
        .map(|_| {
            let head = match cfg.head_select {
                HeadSelect::RandomPerBatch => batch_head,
                HeadSelect::Random | HeadSelect::Fused => state.head_rng.random_range(0..h),
            };
            let draws = if cfg.head_select == HeadSelect::Fused { h } else { 1 };
            let noise = (0..draws)
                .map(|_| model.bank.sample_noise(&mut state.init_rng))
                .collect();
            ImagePlan {
                head,
                mask_seed: state.mask_rng.random(),
                noise,
            }
        })
        .collect();

    let shared: &Model = model;
    let results: Vec<Result<ImageResult>> = batch
        .par_iter()
        .zip(plans.par_iter())
        .map(|(map, plan)| image_loss(shared, map, plan, cfg))
        .collect();

    let mut grads = GradBuffer::new(&model.store);
    let mut loss = 0.0;
    for r in results {
        let r = r?;
        loss += r.loss;
        for (id, g) in &r.grads {
            grads.accumulate(*id, g);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    loss *= inv;

    let lr = lr_at(state.step, total_steps, cfg);
    adam_step(model, state, &grads, lr);
    state.step += 1;
    Ok(StepOutput {
        loss,
        lr,
        heads: plans.iter().map(|p| p.head).collect(),
        grads,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
    pub checkpoints: Vec<std::path::PathBuf>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,lr\n");
        for r in &self.losses {
            out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
        }
        out
    }
}

/// Worker count from `SLOTFORGE_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

pub fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads.or_else(thread_cap) {
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Full run. With `out_dir`, a checkpoint is written after every epoch and the
/// loss curve is written to `loss.csv`.
pub fn train(
    model: &mut Model,
    dataset: &[FeatureMap],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("training dataset is empty"));
    }
    for map in dataset {
        check_dims(model, map)?;
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let pool = thread_pool(None)?;
    let total = cfg.total_steps(dataset.len());
    let mut state = TrainState::new(model, cfg.seed);
    let mut report = TrainReport {
        losses: Vec::with_capacity(total),
        checkpoints: Vec::new(),
    };
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch = 0;
    while state.step < total {
        order.shuffle(&mut state.order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            if state.step >= total {
                break;
            }
            let batch: Vec<&FeatureMap> = chunk.iter().map(|&i| &dataset[i]).collect();
            let step = state.step;
            let out = pool.install(|| train_step(model, &mut state, &batch, cfg, total))?;
            report.losses.push(LossRecord {
                step,
                loss: out.loss,
                lr: out.lr,
            });
        }
        epoch += 1;
        if let Some(dir) = out_dir {
            let path = dir.join(format!("checkpoint_epoch{epoch:04}.sltf"));
            model.save(&path)?;
            report.checkpoints.push(path);
        }
        if epoch >= cfg.epochs && cfg.max_steps.is_none() {
            break;
        }
    }
    if let Some(dir) = out_dir {
        model.save(dir.join("model.sltf"))?;
        let path = dir.join("loss.csv");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(report.to_csv().as_bytes())
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{generate_scene, SyntheticSceneSpec};
    use crate::masking::MaskStrategy;
    use crate::model::ModelConfig;

    fn tiny_model(heads: usize) -> Model {
        Model::new(
            ModelConfig {
                heads,
                num_slots: 3,
                slot_dim: 8,
                feat_dim: 16,
                num_patches: 64,
                slot_mlp_hidden: 16,
                decoder_hidden: 16,
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap()
    }

    fn scenes(n: usize) -> Vec<FeatureMap> {
        (0..n)
            .map(|i| {
                generate_scene(&SyntheticSceneSpec {
                    seed: i as u64,
                    ..Default::default()
                })
                .unwrap()
                .0
            })
            .collect()
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig {
            lr_base: 1.0,
            warmup_frac: 0.1,
            decay_rate: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, 1000, &cfg), 0.01);
        assert_eq!(lr_at(99, 1000, &cfg), 1.0);
        assert_eq!(lr_at(100, 1000, &cfg), 1.0);
        assert!((lr_at(1000, 1000, &cfg) - 0.1).abs() < 1e-15);
        let none = TrainConfig {
            warmup_frac: 0.0,
            ..cfg.clone()
        };
        assert_eq!(lr_at(0, 10, &none), 1.0);
        let all = TrainConfig {
            warmup_frac: 1.0,
            ..cfg
        };
        assert_eq!(lr_at(10, 10, &all), 1.0);
    }

    #[test]
    fn adam_matches_a_scripted_step() {
        let mut model = tiny_model(1);
        let id = model.store.id("head0.mu").unwrap();
        let mut state = TrainState::new(&model, 0);
        let w0 = model.store.value(id).clone();
        let g1 = Tensor::full(w0.shape(), 0.5);
        let g2 = Tensor::full(w0.shape(), -2.0);
        let mut buf = GradBuffer::new(&model.store);
        buf.accumulate(id, &g1);
        adam_step(&mut model, &mut state, &buf, 0.1);
        state.step += 1;
        let mut buf = GradBuffer::new(&model.store);
        buf.accumulate(id, &g2);
        adam_step(&mut model, &mut state, &buf, 0.1);

        for (i, &w) in w0.data().iter().enumerate() {
            let (mut m, mut v, mut p) = (0.0, 0.0, w);
            for (t, g) in [(1, 0.5), (2, -2.0)] {
                m = 0.9 * m + 0.1 * g;
                v = 0.999 * v + 0.001 * g * g;
                let mh = m / (1.0 - 0.9f64.powi(t));
                let vh = v / (1.0 - 0.999f64.powi(t));
                p -= 0.1 * mh / (vh.sqrt() + 1e-8);
            }
            assert!((model.store.value(id).data()[i] - p).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let mut model = tiny_model(2);
        let before = model.store.clone();
        let cfg = TrainConfig {
            lr_base: 0.0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let data = scenes(2);
        let mut state = TrainState::new(&model, 1);
        let batch: Vec<&FeatureMap> = data.iter().collect();
        train_step(&mut model, &mut state, &batch, &cfg, 10).unwrap();
        assert_eq!(model.store, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn unselected_heads_get_no_gradient() {
        let mut model = tiny_model(3);
        let data = scenes(1);
        let mut state = TrainState::new(&model, 5);
        let cfg = TrainConfig::default();
        for _ in 0..6 {
            let out = train_step(&mut model, &mut state, &[&data[0]], &cfg, 100).unwrap();
            let chosen = out.heads[0];
            for (j, head) in model.bank.heads.iter().enumerate() {
                for id in head.ids() {
                    let g = out.grads.get(id);
                    if j == chosen {
                        assert!(g.is_some_and(|g| g.data().iter().any(|&x| x != 0.0)));
                    } else {
                        assert!(g.is_none_or(|g| g.data().iter().all(|&x| x == 0.0)));
                    }
                }
            }
            for name in ["shared.k", "shared.v", "decoder.mlp.w1"] {
                assert!(out.grads.get(model.store.id(name).unwrap()).is_some());
            }
        }
    }

    #[test]
    fn fused_training_reaches_every_head() {
        let mut model = tiny_model(3);
        let data = scenes(1);
        let mut state = TrainState::new(&model, 5);
        let cfg = TrainConfig {
            head_select: HeadSelect::Fused,
            ..TrainConfig::default()
        };
        let out = train_step(&mut model, &mut state, &[&data[0]], &cfg, 100).unwrap();
        for head in &model.bank.heads {
            assert!(out
                .grads
                .get(head.q.weight)
                .is_some_and(|g| g.data().iter().any(|&x| x != 0.0)));
        }
    }

    #[test]
    fn head_choice_is_balanced() {
        let model = tiny_model(4);
        let mut state = TrainState::new(&model, 42);
        let mut counts = [0usize; 4];
        for _ in 0..4000 {
            counts[state.head_rng.random_range(0..4)] += 1;
        }
        for c in counts {
            assert!((900..=1100).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn per_batch_selection_shares_one_head() {
        let mut model = tiny_model(4);
        let data = scenes(4);
        let batch: Vec<&FeatureMap> = data.iter().collect();
        let mut state = TrainState::new(&model, 8);
        let cfg = TrainConfig {
            head_select: HeadSelect::RandomPerBatch,
            ..TrainConfig::default()
        };
        let out = train_step(&mut model, &mut state, &batch, &cfg, 10).unwrap();
        assert!(out.heads.iter().all(|&h| h == out.heads[0]));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let data = scenes(4);
        let cfg = TrainConfig {
            batch_size: 4,
            max_steps: Some(3),
            ..TrainConfig::default()
        };
        let run = |threads| {
            let mut model = tiny_model(2);
            let pool = thread_pool(Some(threads)).unwrap();
            let mut state = TrainState::new(&model, cfg.seed);
            let batch: Vec<&FeatureMap> = data.iter().collect();
            for _ in 0..3 {
                pool.install(|| train_step(&mut model, &mut state, &batch, &cfg, 3))
                    .unwrap();
            }
            model.to_bytes()
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn train_writes_checkpoints_and_is_deterministic() {
        let data = scenes(3);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            masking: MaskingConfig {
                strategy: MaskStrategy::Random,
                ..MaskingConfig::default()
            },
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let mut a = tiny_model(2);
        let report = train(&mut a, &data, &cfg, Some(dir.path())).unwrap();
        assert_eq!(report.losses.len(), 4);
        assert_eq!(report.checkpoints.len(), 2);
        assert!(dir.path().join("loss.csv").exists());
        let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert!(csv.starts_with("step,loss,lr\n0,"));
        let mut b = tiny_model(2);
        let again = train(&mut b, &data, &cfg, None).unwrap();
        assert_eq!(report.losses, again.losses);
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(std::fs::read(&report.checkpoints[1]).unwrap(), a.to_bytes());
    }

    #[test]
    fn mismatched_features_are_rejected() {
        let mut model = tiny_model(1);
        let (map, _) = generate_scene(&SyntheticSceneSpec {
            d_feats: 8,
            ..Default::default()
        })
        .unwrap();
        let err = train(&mut model, &[map], &TrainConfig::default(), None).unwrap_err();
        assert!(err.to_string().contains("8 channels"));
        assert!(train(&mut model, &[], &TrainConfig::default(), None).is_err());
    }

    #[test]
    fn non_finite_loss_names_the_op() {
        let mut model = tiny_model(1);
        let id = model.store.id("decoder.mlp.b3").unwrap();
        model.store.get_mut(id).value.data_mut()[0] = f64::NAN;
        let data = scenes(1);
        let mut state = TrainState::new(&model, 0);
        let err = train_step(&mut model, &mut state, &[&data[0]], &TrainConfig::default(), 10).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            warmup_frac: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!("fused".parse::<HeadSelect>().unwrap(), HeadSelect::Fused);
        assert_eq!(TrainConfig::default().masking.m_percent, 70.0);
    }
}
