//! Truncated multivariate Taylor polynomials.
//!
//! A [`Jet`] carries every partial derivative of a scalar function up to a
//! fixed total order at one point. Arithmetic on jets is exact up to rounding,
//! so chart derivatives of any order come out of ordinary-looking formulas
//! (products, `sin`, `sqrt`, division) with no finite-difference step to tune.
//!
//! The jet of `f` at `p` holds `∂^α f(p) / α!` for every `|α| <= order`. Monomials are
//! laid out degree by degree in a fixed order, so the jet of a lower order is
//! a prefix of the jet of a higher order.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

/// Largest number of independent variables a jet can carry.
pub const MAX_VARS: usize = 4;

type Exponent = [u8; MAX_VARS];

#[derive(Debug)]
pub struct Layout {
    vars: usize,
    order: usize,
    exponents: Vec<Exponent>,
    index: HashMap<Exponent, usize>,
    products: Vec<(u16, u16, u16)>,
}

impl Layout {
    fn build(vars: usize, order: usize) -> Layout {
        assert!(vars >= 1 && vars <= MAX_VARS, "jets support 1..={MAX_VARS} variables");
        let mut exponents = Vec::new();
        for degree in 0..=order {
            let mut current = [0u8; MAX_VARS];
            push_degree(vars, 0, degree, &mut current, &mut exponents);
        }
        let index: HashMap<Exponent, usize> =
            exponents.iter().enumerate().map(|(i, e)| (*e, i)).collect();
        let mut products = Vec::new();
        for (i, a) in exponents.iter().enumerate() {
            for (j, b) in exponents.iter().enumerate() {
                if degree_of(a) + degree_of(b) > order {
                    continue;
                }
                let mut sum = [0u8; MAX_VARS];
                for k in 0..MAX_VARS {
                    sum[k] = a[k] + b[k];
                }
                products.push((i as u16, j as u16, index[&sum] as u16));
            }
        }
        Layout { vars, order, exponents, index, products }
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }
}

fn degree_of(e: &Exponent) -> usize {
    e.iter().map(|&v| v as usize).sum()
}

fn push_degree(vars: usize, var: usize, remaining: usize, cur: &mut Exponent, out: &mut Vec<Exponent>) {
    if var == vars - 1 {
        cur[var] = remaining as u8;
        out.push(*cur);
        cur[var] = 0;
        return;
    }
    for take in (0..=remaining).rev() {
        cur[var] = take as u8;
        push_degree(vars, var + 1, remaining - take, cur, out);
    }
    cur[var] = 0;
}

/// Shared, leaked layout for `(vars, order)`; there are only a handful.
pub fn layout(vars: usize, order: usize) -> &'static Layout {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), &'static Layout>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("layout cache poisoned");
    *guard
        .entry((vars, order))
        .or_insert_with(|| Box::leak(Box::new(Layout::build(vars, order))))
}

#[derive(Clone, Debug)]
pub struct Jet {
    layout: &'static Layout,
    c: Vec<f64>,
}

impl Jet {
    pub fn constant(vars: usize, order: usize, value: f64) -> Jet {
        let layout = layout(vars, order);
        let mut c = vec![0.0; layout.len()];
        c[0] = value;
        Jet { layout, c }
    }

    /// The coordinate function `x_axis` expanded at a point where it equals `value`.
    pub fn variable(vars: usize, order: usize, axis: usize, value: f64) -> Jet {
        let mut jet = Jet::constant(vars, order, value);
        if order >= 1 {
            let mut e = [0u8; MAX_VARS];
            e[axis] = 1;
            let i = jet.layout.index[&e];
            jet.c[i] = 1.0;
        }
        jet
    }

    /// Jets of all coordinate functions at `point`.
    pub fn seed(point: &[f64], order: usize) -> Vec<Jet> {
        point
            .iter()
            .enumerate()
            .map(|(axis, &v)| Jet::variable(point.len(), order, axis, v))
            .collect()
    }

    pub fn vars(&self) -> usize {
        self.layout.vars
    }

    pub fn order(&self) -> usize {
        self.layout.order
    }

    pub fn value(&self) -> f64 {
        self.c[0]
    }

    /// Partial derivative along the listed axes, e.g. `&[0, 1]` is `∂₀∂₁`.
    pub fn partial(&self, axes: &[usize]) -> f64 {
        assert!(axes.len() <= self.layout.order, "derivative order exceeds jet order");
        let mut e = [0u8; MAX_VARS];
        for &a in axes {
            e[a] += 1;
        }
        let factorial: f64 = e.iter().map(|&k| (1..=k as u32).product::<u32>() as f64).product();
        self.c[self.layout.index[&e]] * factorial
    }

    /// Drop everything above `order`.
    pub fn truncate(&self, order: usize) -> Jet {
        if order >= self.layout.order {
            return self.clone();
        }
        let layout = layout(self.layout.vars, order);
        Jet { layout, c: self.c[..layout.len()].to_vec() }
    }

    /// `∂f/∂x_axis` as a jet one order lower.
    pub fn differentiate(&self, axis: usize) -> Jet {
        assert!(self.layout.order >= 1, "cannot differentiate a zeroth-order jet");
        let lower = layout(self.layout.vars, self.layout.order - 1);
        let mut c = vec![0.0; lower.len()];
        for (i, e) in lower.exponents.iter().enumerate() {
            let mut up = *e;
            up[axis] += 1;
            c[i] = (up[axis] as f64) * self.c[self.layout.index[&up]];
        }
        Jet { layout: lower, c }
    }

    fn aligned<'a>(a: &'a Jet, b: &'a Jet) -> (std::borrow::Cow<'a, Jet>, std::borrow::Cow<'a, Jet>) {
        use std::borrow::Cow;
        assert_eq!(a.layout.vars, b.layout.vars, "jets over different variable sets");
        match a.layout.order.cmp(&b.layout.order) {
            std::cmp::Ordering::Equal => (Cow::Borrowed(a), Cow::Borrowed(b)),
            std::cmp::Ordering::Less => (Cow::Borrowed(a), Cow::Owned(b.truncate(a.layout.order))),
            std::cmp::Ordering::Greater => (Cow::Owned(a.truncate(b.layout.order)), Cow::Borrowed(b)),
        }
    }

    pub fn add(&self, other: &Jet) -> Jet {
        let (a, b) = Jet::aligned(self, other);
        let c = a.c.iter().zip(&b.c).map(|(x, y)| x + y).collect();
        Jet { layout: a.layout, c }
    }

    pub fn sub(&self, other: &Jet) -> Jet {
        let (a, b) = Jet::aligned(self, other);
        let c = a.c.iter().zip(&b.c).map(|(x, y)| x - y).collect();
        Jet { layout: a.layout, c }
    }

    pub fn mul(&self, other: &Jet) -> Jet {
        let (a, b) = Jet::aligned(self, other);
        let mut c = vec![0.0; a.layout.len()];
        for &(i, j, k) in &a.layout.products {
            c[k as usize] += a.c[i as usize] * b.c[j as usize];
        }
        Jet { layout: a.layout, c }
    }

    pub fn scale(&self, s: f64) -> Jet {
        Jet { layout: self.layout, c: self.c.iter().map(|x| x * s).collect() }
    }

    pub fn offset(&self, s: f64) -> Jet {
        let mut out = self.clone();
        out.c[0] += s;
        out
    }

    pub fn neg(&self) -> Jet {
        self.scale(-1.0)
    }

    /// `Σ_k series[k] · (self − value)^k`, the composition with a univariate
    /// function whose Taylor coefficients at `self.value()` are `series`.
    fn compose(&self, series: &[f64]) -> Jet {
        let mut nil = self.clone();
        nil.c[0] = 0.0;
        let mut out = Jet { layout: self.layout, c: vec![0.0; self.layout.len()] };
        out.c[0] = series[0];
        let mut power = nil.clone();
        for (k, &coef) in series.iter().enumerate().skip(1) {
            if k > 1 {
                power = power.mul(&nil);
            }
            if coef != 0.0 {
                for (o, p) in out.c.iter_mut().zip(&power.c) {
                    *o += coef * p;
                }
            }
        }
        out
    }

    pub fn sin(&self) -> Jet {
        let (s, c) = self.value().sin_cos();
        let cycle = [s, c, -s, -c];
        self.compose(&taylor_series(self.layout.order, |k| cycle[k % 4]))
    }

    pub fn cos(&self) -> Jet {
        let (s, c) = self.value().sin_cos();
        let cycle = [c, -s, -c, s];
        self.compose(&taylor_series(self.layout.order, |k| cycle[k % 4]))
    }

    pub fn sqrt(&self) -> Jet {
        let v = self.value();
        assert!(v > 0.0, "sqrt of a jet needs a positive value, got {v}");
        // d^k/dv^k v^{1/2} = (1/2)(1/2 − 1)…(1/2 − k + 1) v^{1/2 − k}
        self.compose(&taylor_series(self.layout.order, |k| {
            let falling: f64 = (0..k).map(|i| 0.5 - i as f64).product();
            falling * v.powf(0.5 - k as f64)
        }))
    }

    pub fn recip(&self) -> Jet {
        let v = self.value();
        assert!(v != 0.0, "reciprocal of a jet with zero value");
        // d^k/dv^k v^{-1} = (−1)^k k! v^{−1−k}
        self.compose(&taylor_series(self.layout.order, |k| {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sign * factorial(k) * v.powi(-1 - k as i32)
        }))
    }

    pub fn div(&self, other: &Jet) -> Jet {
        self.mul(&other.recip())
    }
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// Coefficients `f^(k)(a) / k!` from a closure giving `f^(k)(a)`.
fn taylor_series(order: usize, derivative: impl Fn(usize) -> f64) -> Vec<f64> {
    (0..=order).map(|k| derivative(k) / factorial(k)).collect()
}

/// Dot product of two jet-valued vectors.
pub fn dot(a: &[Jet], b: &[Jet]) -> Jet {
    assert_eq!(a.len(), b.len());
    let mut acc = a[0].mul(&b[0]);
    for (x, y) in a.iter().zip(b).skip(1) {
        acc = acc.add(&x.mul(y));
    }
    acc
}

pub fn normalize(v: &[Jet]) -> Vec<Jet> {
    let inv = dot(v, v).sqrt().recip();
    v.iter().map(|x| x.mul(&inv)).collect()
}

/// Determinant by cofactor expansion along the first row. Sizes here are tiny.
pub fn determinant(rows: &[Vec<Jet>]) -> Jet {
    let n = rows.len();
    if n == 1 {
        return rows[0][0].clone();
    }
    if n == 2 {
        return rows[0][0].mul(&rows[1][1]).sub(&rows[0][1].mul(&rows[1][0]));
    }
    let mut acc: Option<Jet> = None;
    for col in 0..n {
        let minor: Vec<Vec<Jet>> = rows[1..]
            .iter()
            .map(|r| r.iter().enumerate().filter(|(j, _)| *j != col).map(|(_, v)| v.clone()).collect())
            .collect();
        let term = rows[0][col].mul(&determinant(&minor));
        acc = Some(match acc {
            None => term,
            Some(a) if col % 2 == 0 => a.add(&term),
            Some(a) => a.sub(&term),
        });
    }
    acc.expect("non-empty matrix")
}

/// The vector orthogonal to `n − 1` vectors in `R^n`, with components given by
/// signed maximal minors. Its length is the `(n−1)`-volume they span.
pub fn generalized_cross(columns: &[Vec<Jet>]) -> Vec<Jet> {
    let n = columns.len() + 1;
    assert!(columns.iter().all(|c| c.len() == n));
    (0..n)
        .map(|k| {
            let rows: Vec<Vec<Jet>> = (0..n)
                .filter(|&r| r != k)
                .map(|r| columns.iter().map(|c| c[r].clone()).collect())
                .collect();
            let d = determinant(&rows);
            if (k + n) % 2 == 0 {
                d
            } else {
                d.neg()
            }
        })
        .collect()
}
