//! Aligning slot sets from several heads to a reference head and averaging them.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assignment::{assign, Assignment, Matcher, Objective};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::slot_attention::SlotSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Metric {
    #[default]
    Cosine,
    /// Pairwise L2 distance, minimized.
    Euclidean,
}

impl Metric {
    pub fn objective(self) -> Objective {
        match self {
            Metric::Cosine => Objective::Maximize,
            Metric::Euclidean => Objective::Minimize,
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "euclidean" => Ok(Self::Euclidean),
            other => Err(Error::Config(format!("unknown fusion metric `{other}`"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::Euclidean => "euclidean",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReferenceHead {
    #[default]
    Random,
    Index(usize),
}

impl ReferenceHead {
    /// Concrete head index for `heads` heads; the random choice is drawn from `seed`.
    pub fn resolve(self, heads: usize, seed: u64) -> Result<usize> {
        if heads == 0 {
            return Err(Error::contract("no heads to choose a reference from"));
        }
        match self {
            ReferenceHead::Random => Ok(ChaCha8Rng::seed_from_u64(seed).random_range(0..heads)),
            ReferenceHead::Index(j) if j < heads => Ok(j),
            ReferenceHead::Index(j) => Err(Error::Bounds { index: j, len: heads }),
        }
    }
}

impl FromStr for ReferenceHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "random" {
            return Ok(Self::Random);
        }
        s.parse()
            .map(Self::Index)
            .map_err(|_| Error::Config(format!("reference head must be `random` or an index, got `{s}`")))
    }
}

impl fmt::Display for ReferenceHead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Random => f.write_str("random"),
            Self::Index(j) => write!(f, "{j}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Tensor,
    pub metric: Metric,
}

/// `values[a, b]` compares slot `a` of `a_set` with slot `b` of `b_set`.
pub fn similarity(a_set: &SlotSet, b_set: &SlotSet, metric: Metric) -> Result<SimilarityMatrix> {
    let (a, b) = (&a_set.slots, &b_set.slots);
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::contract(format!(
            "slot sets differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let k = a.rows();
    let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut values = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let (x, y) = (a.row(i), b.row(j));
            let v = match metric {
                Metric::Cosine => {
                    let denom = norm(x) * norm(y);
                    if denom == 0.0 {
                        0.0
                    } else {
                        x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / denom
                    }
                }
                Metric::Euclidean => x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt(),
            };
            values.push(v);
        }
    }
    Ok(SimilarityMatrix {
        values: Tensor::from_parts(vec![k, k], values),
        metric,
    })
}

/// Matches the slots of `head` onto those of `reference`.
pub fn align(head: &SlotSet, reference: &SlotSet, metric: Metric, matcher: Matcher) -> Result<Assignment> {
    let sim = similarity(head, reference, metric)?;
    assign(&sim.values, metric.objective(), matcher)
}

/// Row order that places each slot of the aligned head next to its reference slot.
fn gather_order(a: &Assignment) -> Vec<usize> {
    let mut order = vec![0; a.mapping.len()];
    for (src, &dst) in a.mapping.iter().enumerate() {
        order[dst] = src;
    }
    order
}

fn check_heads(heads: &[SlotSet], reference: usize) -> Result<()> {
    let Some(first) = heads.first() else {
        return Err(Error::contract("fusion needs at least one head"));
    };
    if reference >= heads.len() {
        return Err(Error::Bounds {
            index: reference,
            len: heads.len(),
        });
    }
    for h in heads {
        if h.slots.shape() != first.slots.shape() {
            return Err(Error::contract(format!(
                "heads disagree on slot shape: {:?} vs {:?}",
                first.slots.shape(),
                h.slots.shape()
            )));
        }
    }
    Ok(())
}

/// Aligns every head to `heads[reference]` and averages all of them.
pub fn fuse(heads: &[SlotSet], reference: usize, metric: Metric, matcher: Matcher) -> Result<SlotSet> {
    check_heads(heads, reference)?;
    let refset = &heads[reference];
    let mut acc = refset.slots.clone();
    for (j, h) in heads.iter().enumerate() {
        if j == reference {
            continue;
        }
        let order = gather_order(&align(h, refset, metric, matcher)?);
        let aligned = h.slots.gather_rows(&order)?;
        acc.data_mut().iter_mut().zip(aligned.data()).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / heads.len() as f64;
    Ok(SlotSet {
        slots: acc.map(|v| v * inv),
        head_index: refset.head_index,
    })
}

/// [`fuse`] recorded on the graph so a loss on the fused slots reaches every head.
/// The matching itself is a discrete choice made on the current values.
pub fn fuse_for_training(
    g: &mut Graph,
    heads: &[Var],
    reference: usize,
    metric: Metric,
    matcher: Matcher,
) -> Result<Var> {
    let sets: Vec<SlotSet> = heads
        .iter()
        .enumerate()
        .map(|(j, &v)| SlotSet {
            slots: g.value(v).clone(),
            head_index: j,
        })
        .collect();
    check_heads(&sets, reference)?;
    let mut acc = g.gather_rows(heads[reference], &(0..sets[reference].num_slots()).collect::<Vec<_>>())?;
    for (j, &h) in heads.iter().enumerate() {
        if j == reference {
            continue;
        }
        let order = gather_order(&align(&sets[j], &sets[reference], metric, matcher)?);
        let aligned = g.gather_rows(h, &order)?;
        acc = g.add(acc, aligned)?;
    }
    Ok(g.scale(acc, 1.0 / heads.len() as f64))
}
