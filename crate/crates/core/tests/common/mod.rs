//! Test-only reference solvers.
//!
//! The oracle works on the parametric model directly, folding each transition
//! expression itself, and computes maximal until-probabilities by policy
//! iteration with sparse linear solves. Over rationals it is exact; the f64
//! variant exists for models whose valuations make exact arithmetic too slow.
//! It shares nothing with the value-iteration solver beyond the model
//! representation.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use dyncert::expr::{ParamExpr, Rational, Valuation};
use dyncert::model::{Pmdp, StateId};
use num::{Num, Signed, ToPrimitive};

/// Scalars the reference solver can run on.
pub trait Scalar: Num + Signed + Clone + PartialOrd + ToPrimitive + std::fmt::Debug {
    fn fold(e: &ParamExpr, v: &Valuation) -> Self;
    /// Whether `a` is a strict improvement over `b`.
    fn improves(a: &Self, b: &Self) -> bool;
}

impl Scalar for Rational {
    fn fold(e: &ParamExpr, v: &Valuation) -> Self {
        e.evaluate(v).unwrap()
    }

    fn improves(a: &Self, b: &Self) -> bool {
        a > b
    }
}

impl Scalar for f64 {
    fn fold(e: &ParamExpr, v: &Valuation) -> Self {
        e.evaluate_f64(&v.to_f64_map()).unwrap()
    }

    fn improves(a: &Self, b: &Self) -> bool {
        *a > *b + 1e-13
    }
}

pub type ExactRow<T = Rational> = Vec<(usize, T)>;

pub struct ReferenceMdp<T> {
    pub initial: usize,
    pub rows: Vec<Vec<ExactRow<T>>>,
    pub avoid: Vec<bool>,
    pub reach: Vec<bool>,
}

pub type ExactMdp = ReferenceMdp<Rational>;
pub type FloatMdp = ReferenceMdp<f64>;

impl<T: Scalar> ReferenceMdp<T> {
    pub fn new(m: &Pmdp, v: &Valuation, avoid: &str, reach: &str) -> Self {
        let n = m.state_count();
        let rows = (0..n)
            .map(|i| {
                m.choices(StateId::from(i))
                    .iter()
                    .map(|c| {
                        c.distribution
                            .support
                            .iter()
                            .map(|(t, e)| (t.index(), T::fold(e, v)))
                            .filter(|(_, p)| !p.is_zero())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let mask = |label: &str| {
            let mut out = vec![false; n];
            for s in m.label(label).unwrap() {
                out[s.index()] = true;
            }
            out
        };
        ReferenceMdp { initial: m.initial().index(), rows, avoid: mask(avoid), reach: mask(reach) }
    }

    fn decided(&self, s: usize) -> bool {
        self.reach[s] || self.avoid[s]
    }

    /// Exact values of the chain induced by `policy` (one action per state).
    pub fn solve_chain(&self, policy: &[usize]) -> Vec<T> {
        let n = self.rows.len();
        let succ = |s: usize| -> &ExactRow<T> { &self.rows[s][policy[s]] };

        // states that reach the target through undecided states
        let mut preds = vec![Vec::new(); n];
        for s in 0..n {
            if self.decided(s) {
                continue;
            }
            for (t, _) in succ(s) {
                preds[*t].push(s);
            }
        }
        let mut live = self.reach.clone();
        let mut queue: VecDeque<usize> = (0..n).filter(|&s| live[s]).collect();
        while let Some(t) = queue.pop_front() {
            for &s in &preds[t] {
                if !live[s] {
                    live[s] = true;
                    queue.push_back(s);
                }
            }
        }

        let unknowns: Vec<usize> = (0..n).filter(|&s| live[s] && !self.reach[s]).collect();
        let mut slot = vec![usize::MAX; n];
        for (k, &s) in unknowns.iter().enumerate() {
            slot[s] = k;
        }
        // (I - Q) x = b, with Q restricted to unknowns and b the one-step target mass
        let mut rows: Vec<BTreeMap<usize, T>> = Vec::with_capacity(unknowns.len());
        let mut rhs: Vec<T> = Vec::with_capacity(unknowns.len());
        for &s in &unknowns {
            let mut row = BTreeMap::new();
            row.insert(slot[s], T::one());
            let mut b = T::zero();
            for (t, p) in succ(s) {
                if self.reach[*t] {
                    b = b + p.clone();
                } else if live[*t] {
                    let e = row.entry(slot[*t]).or_insert_with(T::zero);
                    *e = e.clone() - p.clone();
                }
            }
            row.retain(|_, c: &mut T| !c.is_zero());
            rows.push(row);
            rhs.push(b);
        }
        let x = sparse_solve(rows, rhs);

        let mut values = vec![T::zero(); n];
        for s in 0..n {
            if self.reach[s] {
                values[s] = T::one();
            } else if live[s] {
                values[s] = x[slot[s]].clone();
            }
        }
        values
    }

    fn q_value(&self, s: usize, a: usize, values: &[T]) -> T {
        self.rows[s][a].iter().fold(T::zero(), |acc, (t, p)| acc + p.clone() * values[*t].clone())
    }

    /// Policy iteration for maximal reachability; returns the values and the policy.
    pub fn policy_iteration(&self) -> (Vec<T>, Vec<usize>) {
        let n = self.rows.len();
        let mut policy = vec![0usize; n];
        loop {
            let values = self.solve_chain(&policy);
            let mut changed = false;
            for s in 0..n {
                if self.decided(s) {
                    continue;
                }
                let current = self.q_value(s, policy[s], &values);
                let mut best = (policy[s], current.clone());
                for a in 0..self.rows[s].len() {
                    let q = self.q_value(s, a, &values);
                    if T::improves(&q, &best.1) {
                        best = (a, q);
                    }
                }
                if T::improves(&best.1, &current) {
                    policy[s] = best.0;
                    changed = true;
                }
            }
            if !changed {
                return (values, policy);
            }
        }
    }

    pub fn max_value_f64(&self) -> Vec<f64> {
        self.policy_iteration().0.iter().map(|r| r.to_f64().unwrap()).collect()
    }
}

/// Sparse Gaussian elimination without pivoting. Valid for the nonsingular
/// M-matrices produced by transient chains, whose pivots stay positive.
pub fn sparse_solve<T: Scalar>(mut rows: Vec<BTreeMap<usize, T>>, mut rhs: Vec<T>) -> Vec<T> {
    let n = rows.len();
    let mut column_rows: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (i, row) in rows.iter().enumerate() {
        for &c in row.keys() {
            column_rows[c].insert(i);
        }
    }
    for k in 0..n {
        let pivot_row = rows[k].clone();
        let pivot = pivot_row.get(&k).cloned().expect("nonzero pivot");
        assert!(pivot.is_positive(), "pivot must be positive");
        let below: Vec<usize> = column_rows[k].iter().copied().filter(|&i| i > k).collect();
        for i in below {
            let factor = rows[i].remove(&k).unwrap() / pivot.clone();
            column_rows[k].remove(&i);
            for (&c, v) in pivot_row.range(k + 1..) {
                let e = rows[i].entry(c).or_insert_with(T::zero);
                *e = e.clone() - factor.clone() * v.clone();
                if e.is_zero() {
                    rows[i].remove(&c);
                    column_rows[c].remove(&i);
                } else {
                    column_rows[c].insert(i);
                }
            }
            let delta = factor * rhs[k].clone();
            rhs[i] = rhs[i].clone() - delta;
        }
    }
    let mut x = vec![T::zero(); n];
    for k in (0..n).rev() {
        let mut acc = rhs[k].clone();
        for (&c, v) in rows[k].range(k + 1..) {
            acc = acc - v.clone() * x[c].clone();
        }
        x[k] = acc / rows[k][&k].clone();
    }
    x
}

/// Exhaustive float-free check of the chain values for a policy given as
/// state -> action pairs (missing states take action 0).
pub fn exact_policy_value(m: &ExactMdp, policy: impl IntoIterator<Item = (usize, usize)>) -> Rational {
    let mut p = vec![0usize; m.rows.len()];
    for (s, a) in policy {
        p[s] = a;
    }
    m.solve_chain(&p)[m.initial].clone()
}
