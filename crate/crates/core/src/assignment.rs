//! Square linear assignment: exact Hungarian and the greedy baseline.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Maximize,
    Minimize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Matcher {
    #[default]
    Hungarian,
    Greedy,
}

impl FromStr for Matcher {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hungarian" => Ok(Self::Hungarian),
            "greedy" => Ok(Self::Greedy),
            other => Err(Error::Config(format!("unknown matcher `{other}`"))),
        }
    }
}

impl fmt::Display for Matcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Hungarian => "hungarian",
            Self::Greedy => "greedy",
        })
    }
}

/// Row `a` is assigned column `mapping[a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub mapping: Vec<usize>,
    pub total_score: f64,
}

impl Assignment {
    fn scored(values: &Tensor, mapping: Vec<usize>) -> Self {
        let total_score = mapping.iter().enumerate().map(|(a, &b)| values.at(a, b)).sum();
        Self { mapping, total_score }
    }
}

pub fn assign(values: &Tensor, objective: Objective, matcher: Matcher) -> Result<Assignment> {
    match matcher {
        Matcher::Hungarian => hungarian(values, objective),
        Matcher::Greedy => greedy_match(values, objective),
    }
}

fn check_square(values: &Tensor) -> Result<usize> {
    if values.rank() != 2 || values.rows() != values.cols() {
        return Err(Error::contract(format!(
            "assignment needs a square matrix, got {:?}",
            values.shape()
        )));
    }
    if !values.is_finite() {
        return Err(Error::contract("assignment matrix has non-finite entries"));
    }
    Ok(values.rows())
}

/// Optimal assignment; among optimal mappings the lexicographically smallest wins.
pub fn hungarian(values: &Tensor, objective: Objective) -> Result<Assignment> {
    let n = check_square(values)?;
    if n == 0 {
        return Ok(Assignment {
            mapping: Vec::new(),
            total_score: 0.0,
        });
    }
    let sign = match objective {
        Objective::Maximize => -1.0,
        Objective::Minimize => 1.0,
    };
    let cost: Vec<f64> = values.data().iter().map(|v| sign * v).collect();
    let tol = 8.0 * f64::EPSILON * (1.0 + cost.iter().map(|c| c.abs()).sum::<f64>());

    let rows: Vec<usize> = (0..n).collect();
    let cols: Vec<usize> = (0..n).collect();
    let full = solve(&cost, n, &rows, &cols);
    let optimum = full.cost;
    let mut current = full.mapping;
    let reduced = |a: usize, b: usize| cost[a * n + b] - full.u[a] - full.v[b];

    // Walk rows in order and pin each to the smallest column that still admits an
    // optimal completion. Edges with positive reduced cost under the optimal duals
    // belong to no optimal solution, so only tight edges need a re-solve.
    let mut used = vec![false; n];
    let mut fixed_cost = 0.0;
    for a in 0..n {
        for b in 0..n {
            if used[b] {
                continue;
            }
            if b == current[a] {
                break;
            }
            if reduced(a, b) > tol {
                continue;
            }
            let rest_rows: Vec<usize> = (a + 1..n).collect();
            let rest_cols: Vec<usize> = (0..n).filter(|&c| !used[c] && c != b).collect();
            let sub = solve(&cost, n, &rest_rows, &rest_cols);
            if fixed_cost + cost[a * n + b] + sub.cost <= optimum + tol {
                current[a] = b;
                for (i, &r) in rest_rows.iter().enumerate() {
                    current[r] = sub.mapping[i];
                }
                break;
            }
        }
        used[current[a]] = true;
        fixed_cost += cost[a * n + current[a]];
    }
    Ok(Assignment::scored(values, current))
}

struct Solution {
    cost: f64,
    /// Column (as an index into the full matrix) for each entry of `rows`.
    mapping: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
}

/// Shortest augmenting path with potentials on the `rows × cols` submatrix of a
/// row-major `n`-wide cost matrix. Potentials are returned in full-matrix indexing.
fn solve(cost: &[f64], n: usize, rows: &[usize], cols: &[usize]) -> Solution {
    let m = rows.len();
    let c = |i: usize, j: usize| cost[rows[i - 1] * n + cols[j - 1]];
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=m {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut done = vec![false; m + 1];
        loop {
            done[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !done[j] {
                    let cur = c(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if done[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut mapping = vec![0; m];
    for j in 1..=m {
        mapping[p[j] - 1] = cols[j - 1];
    }
    let total = mapping.iter().enumerate().map(|(i, &b)| cost[rows[i] * n + b]).sum();
    let mut fu = vec![0.0; n];
    let mut fv = vec![0.0; n];
    for (i, &r) in rows.iter().enumerate() {
        fu[r] = u[i + 1];
    }
    for (j, &col) in cols.iter().enumerate() {
        fv[col] = v[j + 1];
    }
    Solution {
        cost: total,
        mapping,
        u: fu,
        v: fv,
    }
}

/// Walks columns in index order and gives each the best still-free row; ties go
/// to the lower row index.
pub fn greedy_match(values: &Tensor, objective: Objective) -> Result<Assignment> {
    let n = check_square(values)?;
    let better = |x: f64, y: f64| match objective {
        Objective::Maximize => x > y,
        Objective::Minimize => x < y,
    };
    let mut mapping = vec![usize::MAX; n];
    let mut taken = vec![false; n];
    for b in 0..n {
        let mut best: Option<usize> = None;
        for (a, _) in taken.iter().enumerate().filter(|(_, t)| !**t) {
            if best.is_none_or(|k| better(values.at(a, b), values.at(k, b))) {
                best = Some(a);
            }
        }
        let a = best.expect("a free row remains for every column");
        taken[a] = true;
        mapping[a] = b;
    }
    Ok(Assignment::scored(values, mapping))
}

/// Exhaustive search; only sensible for small `n`. Returns the lexicographically
/// smallest optimal mapping.
pub fn brute_force(values: &Tensor, objective: Objective) -> Result<Assignment> {
    let n = check_square(values)?;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best: Option<Assignment> = None;
    loop {
        let cand = Assignment::scored(values, perm.clone());
        let improves = match &best {
            None => true,
            Some(b) => match objective {
                Objective::Maximize => cand.total_score > b.total_score,
                Objective::Minimize => cand.total_score < b.total_score,
            },
        };
        if improves {
            best = Some(cand);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(best.expect("at least one permutation"))
}

/// Advances to the next lexicographic permutation; false once wrapped.
pub fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let Some(i) = (0..p.len() - 1).rev().find(|&i| p[i] < p[i + 1]) else {
        p.reverse();
        return false;
    };
    let j = (i + 1..p.len()).rev().find(|&j| p[j] > p[i]).expect("successor exists");
    p.swap(i, j);
    p[i + 1..].reverse();
    true
}
