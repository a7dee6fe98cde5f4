//! Symbolic transition probabilities.
//!
//! Expressions are multi-affine polynomials over named parameters (degree at
//! most one in each parameter). Everything here is exact: constants are
//! arbitrary-precision rationals, and the well-formedness checks never touch
//! floating point. A multi-affine function on a box attains its extrema at the
//! box corners, so checking a distribution row at the corners is enough to
//! certify it over the whole region.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use num::{BigInt, BigRational, One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub type Rational = BigRational;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error("missing value for parameter `{0}`")]
    MissingParameter(String),
    #[error("invalid parameter name `{0}`")]
    InvalidParameter(String),
    #[error("invalid number literal `{0}`")]
    InvalidNumber(String),
    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("invalid interval for `{param}`: [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1")]
    InvalidInterval { param: String, lo: String, hi: String },
}

/// Why a distribution row is not a valid probability distribution over a region.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RowDefect {
    #[error("entry {0} is not multi-affine")]
    NotMultiAffine(usize),
    #[error("row does not sum to 1 (residual: {0})")]
    NonUnitSum(ParamExpr),
    #[error("entry {index} is negative at corner {corner}")]
    NegativeAtCorner { corner: Valuation, index: usize },
    #[error("parameter `{0}` has no interval in the region")]
    MissingParameter(String),
}

// ---------------------------------------------------------------------------
// Rationals
// ---------------------------------------------------------------------------

/// Parses `3/20`, `-0.15`, `1e-3` or `7` into an exact rational.
pub fn parse_rational(text: &str) -> Result<Rational, ExprError> {
    let bad = || ExprError::InvalidNumber(text.to_string());
    let s = text.trim();
    if let Some((num, den)) = s.split_once('/') {
        let num = parse_rational(num)?;
        let den = parse_rational(den)?;
        if den.is_zero() {
            return Err(bad());
        }
        return Ok(num / den);
    }
    let (negative, s) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let (mantissa, exponent) = match s.find(['e', 'E']) {
        Some(pos) => {
            let exp: i32 = s[pos + 1..].parse().map_err(|_| bad())?;
            (&s[..pos], exp)
        }
        None => (s, 0),
    };
    let (int_part, frac_part) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(bad());
    }
    if !int_part.chars().chain(frac_part.chars()).all(|c| c.is_ascii_digit()) {
        return Err(bad());
    }
    let digits = format!("{int_part}{frac_part}");
    let digits: BigInt = if digits.is_empty() {
        BigInt::zero()
    } else {
        digits.parse().map_err(|_| bad())?
    };
    let scale = exponent - frac_part.len() as i32;
    let ten = BigInt::from(10u32);
    let mut value = Rational::from_integer(digits);
    if scale >= 0 {
        value *= Rational::from_integer(num::pow(ten, scale as usize));
    } else {
        value /= Rational::from_integer(num::pow(ten, (-scale) as usize));
    }
    Ok(if negative { -value } else { value })
}

/// The rational denoted by the shortest decimal that round-trips to `x`.
///
/// `0.15_f64` maps to exactly `3/20`, which keeps user-facing bounds exact.
pub fn rational_from_f64(x: f64) -> Option<Rational> {
    if !x.is_finite() {
        return None;
    }
    parse_rational(&format!("{x}")).ok()
}

pub fn rational_to_f64(r: &Rational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

fn format_rational(r: &Rational) -> String {
    if r.is_integer() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

/// Serde adapter: rationals are written as strings (`"3/20"`) and read from
/// either strings or JSON numbers.
pub mod serde_rational {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    pub(crate) enum NumberOrString {
        Number(f64),
        Text(String),
    }

    impl NumberOrString {
        pub(crate) fn into_rational(self) -> Result<Rational, String> {
            match self {
                NumberOrString::Number(x) => {
                    rational_from_f64(x).ok_or_else(|| format!("non-finite number {x}"))
                }
                NumberOrString::Text(s) => parse_rational(&s).map_err(|e| e.to_string()),
            }
        }
    }

    pub fn serialize<S: Serializer>(r: &Rational, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_rational(r))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational, D::Error> {
        NumberOrString::deserialize(d)?
            .into_rational()
            .map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Parameters, regions, valuations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct ParameterId(String);

impl ParameterId {
    pub fn new(name: impl Into<String>) -> Result<Self, ExprError> {
        let name = name.into();
        let mut chars = name.chars();
        let valid = match chars.next() {
            Some(c) if c.is_ascii_alphabetic() || c == '_' => {
                chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
            }
            _ => false,
        };
        if valid {
            Ok(ParameterId(name))
        } else {
            Err(ExprError::InvalidParameter(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ParameterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for ParameterId {
    type Err = ExprError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ParameterId::new(s)
    }
}

impl<'de> Deserialize<'de> for ParameterId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ParameterId::new(s).map_err(serde::de::Error::custom)
    }
}

/// Closed interval `[lo, hi]` with `0 <= lo <= hi <= 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interval {
    lo: Rational,
    hi: Rational,
}

impl Interval {
    pub fn new(lo: Rational, hi: Rational) -> Option<Self> {
        let unit = Rational::one();
        (!lo.is_negative() && lo <= hi && hi <= unit).then_some(Interval { lo, hi })
    }

    pub fn point(x: Rational) -> Option<Self> {
        Interval::new(x.clone(), x)
    }

    pub fn unit() -> Self {
        Interval { lo: Rational::zero(), hi: Rational::one() }
    }

    pub fn lo(&self) -> &Rational {
        &self.lo
    }

    pub fn hi(&self) -> &Rational {
        &self.hi
    }

    pub fn is_degenerate(&self) -> bool {
        self.lo == self.hi
    }

    pub fn contains(&self, x: &Rational) -> bool {
        &self.lo <= x && x <= &self.hi
    }

    pub fn is_subset_of(&self, other: &Interval) -> bool {
        other.lo <= self.lo && self.hi <= other.hi
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", format_rational(&self.lo), format_rational(&self.hi))
    }
}

impl Serialize for Interval {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [format_rational(&self.lo), format_rational(&self.hi)].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Interval {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let [lo, hi] = <[serde_rational::NumberOrString; 2]>::deserialize(d)?;
        let lo = lo.into_rational().map_err(D::Error::custom)?;
        let hi = hi.into_rational().map_err(D::Error::custom)?;
        let text = format!("[{}, {}]", format_rational(&lo), format_rational(&hi));
        Interval::new(lo, hi)
            .ok_or_else(|| D::Error::custom(format!("invalid probability interval {text}")))
    }
}

/// A box of parameter values, one closed interval per parameter.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterRegion {
    bounds: BTreeMap<ParameterId, Interval>,
}

impl ParameterRegion {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builder-style insert; rejects intervals outside `[0, 1]` or with `lo > hi`.
    pub fn with(mut self, param: &str, lo: Rational, hi: Rational) -> Result<Self, ExprError> {
        let id = ParameterId::new(param)?;
        let err = ExprError::InvalidInterval {
            param: param.to_string(),
            lo: format_rational(&lo),
            hi: format_rational(&hi),
        };
        let interval = Interval::new(lo, hi).ok_or(err)?;
        self.bounds.insert(id, interval);
        Ok(self)
    }

    /// Same as [`ParameterRegion::with`] but takes decimal/rational literals.
    pub fn with_str(self, param: &str, lo: &str, hi: &str) -> Result<Self, ExprError> {
        self.with(param, parse_rational(lo)?, parse_rational(hi)?)
    }

    pub fn set(&mut self, param: ParameterId, interval: Interval) {
        self.bounds.insert(param, interval);
    }

    pub fn get(&self, param: &ParameterId) -> Option<&Interval> {
        self.bounds.get(param)
    }

    pub fn parameters(&self) -> impl Iterator<Item = &ParameterId> {
        self.bounds.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParameterId, &Interval)> {
        self.bounds.iter()
    }

    pub fn len(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_empty()
    }

    pub fn contains(&self, v: &Valuation) -> bool {
        self.bounds
            .iter()
            .all(|(p, iv)| v.get(p).is_some_and(|x| iv.contains(x)))
    }

    /// True when both regions name the same parameters and every interval of
    /// `self` lies inside the matching interval of `other`.
    pub fn is_subset_of(&self, other: &ParameterRegion) -> bool {
        self.bounds.len() == other.bounds.len()
            && self
                .bounds
                .iter()
                .all(|(p, iv)| other.bounds.get(p).is_some_and(|o| iv.is_subset_of(o)))
    }

    /// All `2^k` corners over the given parameters.
    pub fn corners<'a>(
        &self,
        params: impl IntoIterator<Item = &'a ParameterId>,
    ) -> Result<Vec<Valuation>, ParameterId> {
        let mut corners = vec![Valuation::new()];
        for p in params {
            let iv = self.bounds.get(p).ok_or_else(|| p.clone())?;
            let mut next = Vec::with_capacity(corners.len() * 2);
            for c in &corners {
                next.push(c.clone().with(p.clone(), iv.lo.clone()));
                if !iv.is_degenerate() {
                    next.push(c.clone().with(p.clone(), iv.hi.clone()));
                }
            }
            corners = next;
        }
        Ok(corners)
    }
}

impl fmt::Display for ParameterRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.bounds.iter().map(|(p, iv)| format!("{p}∈{iv}")).collect();
        write!(f, "{{{}}}", parts.join(", "))
    }
}

/// A point assignment of exact values to parameters.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Valuation {
    assignment: BTreeMap<ParameterId, Rational>,
}

impl Valuation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, param: ParameterId, value: Rational) -> Self {
        self.assignment.insert(param, value);
        self
    }

    /// Convenience constructor from `(name, literal)` pairs.
    pub fn parse(pairs: &[(&str, &str)]) -> Result<Self, ExprError> {
        let mut v = Valuation::new();
        for (name, value) in pairs {
            v.insert(ParameterId::new(*name)?, parse_rational(value)?);
        }
        Ok(v)
    }

    pub fn insert(&mut self, param: ParameterId, value: Rational) {
        self.assignment.insert(param, value);
    }

    pub fn get(&self, param: &ParameterId) -> Option<&Rational> {
        self.assignment.get(param)
    }

    pub fn get_f64(&self, name: &str) -> Option<f64> {
        self.assignment
            .iter()
            .find(|(p, _)| p.as_str() == name)
            .map(|(_, r)| rational_to_f64(r))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParameterId, &Rational)> {
        self.assignment.iter()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn to_f64_map(&self) -> HashMap<ParameterId, f64> {
        self.assignment
            .iter()
            .map(|(p, r)| (p.clone(), rational_to_f64(r)))
            .collect()
    }
}

impl fmt::Display for Valuation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .assignment
            .iter()
            .map(|(p, r)| format!("{p}={}", rational_to_f64(r)))
            .collect();
        write!(f, "{{{}}}", parts.join(", "))
    }
}

impl Serialize for Valuation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = s.serialize_map(Some(self.assignment.len()))?;
        for (p, r) in &self.assignment {
            map.serialize_entry(p.as_str(), &format_rational(r))?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Valuation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let raw = BTreeMap::<ParameterId, serde_rational::NumberOrString>::deserialize(d)?;
        let mut v = Valuation::new();
        for (p, x) in raw {
            v.insert(p, x.into_rational().map_err(D::Error::custom)?);
        }
        Ok(v)
    }
}

// ---------------------------------------------------------------------------
// Expressions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ParamExpr {
    Const(Rational),
    Var(ParameterId),
    Sum(Vec<ParamExpr>),
    Product(Vec<ParamExpr>),
}

impl ParamExpr {
    pub fn constant(r: Rational) -> Self {
        ParamExpr::Const(r)
    }

    pub fn int(n: i64) -> Self {
        ParamExpr::Const(Rational::from_integer(n.into()))
    }

    pub fn ratio(num: i64, den: i64) -> Self {
        ParamExpr::Const(Rational::new(num.into(), den.into()))
    }

    pub fn var(name: &str) -> Self {
        ParamExpr::Var(ParameterId::new(name).expect("valid parameter name"))
    }

    /// `1 - self`
    pub fn complement(self) -> Self {
        ParamExpr::Sum(vec![ParamExpr::int(1), ParamExpr::Product(vec![ParamExpr::int(-1), self])])
    }

    /// Product that skips unit factors so built models stay readable.
    pub fn times(self, other: ParamExpr) -> Self {
        let one = Rational::one();
        match (self, other) {
            (ParamExpr::Const(a), b) if a == one => b,
            (a, ParamExpr::Const(b)) if b == one => a,
            (ParamExpr::Product(mut fs), b) => {
                fs.push(b);
                ParamExpr::Product(fs)
            }
            (a, b) => ParamExpr::Product(vec![a, b]),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ExprError> {
        Parser::new(text).parse()
    }

    /// Exact evaluation at a valuation.
    pub fn evaluate(&self, v: &Valuation) -> Result<Rational, ExprError> {
        match self {
            ParamExpr::Const(c) => Ok(c.clone()),
            ParamExpr::Var(p) => v
                .get(p)
                .cloned()
                .ok_or_else(|| ExprError::MissingParameter(p.to_string())),
            ParamExpr::Sum(terms) => terms
                .iter()
                .try_fold(Rational::zero(), |acc, t| Ok(acc + t.evaluate(v)?)),
            ParamExpr::Product(factors) => factors
                .iter()
                .try_fold(Rational::one(), |acc, t| Ok(acc * t.evaluate(v)?)),
        }
    }

    /// Floating-point evaluation, for callers that already hold float samples.
    pub fn evaluate_f64(&self, v: &HashMap<ParameterId, f64>) -> Result<f64, ExprError> {
        match self {
            ParamExpr::Const(c) => Ok(rational_to_f64(c)),
            ParamExpr::Var(p) => v
                .get(p)
                .copied()
                .ok_or_else(|| ExprError::MissingParameter(p.to_string())),
            ParamExpr::Sum(terms) => terms.iter().try_fold(0.0, |acc, t| Ok(acc + t.evaluate_f64(v)?)),
            ParamExpr::Product(factors) => {
                factors.iter().try_fold(1.0, |acc, t| Ok(acc * t.evaluate_f64(v)?))
            }
        }
    }

    pub fn variables(&self) -> BTreeSet<ParameterId> {
        let mut out = BTreeSet::new();
        self.collect_variables(&mut out);
        out
    }

    fn collect_variables(&self, out: &mut BTreeSet<ParameterId>) {
        match self {
            ParamExpr::Const(_) => {}
            ParamExpr::Var(p) => {
                out.insert(p.clone());
            }
            ParamExpr::Sum(xs) | ParamExpr::Product(xs) => {
                xs.iter().for_each(|x| x.collect_variables(out));
            }
        }
    }

    /// Expands into a canonical polynomial.
    pub fn expand(&self) -> Polynomial {
        match self {
            ParamExpr::Const(c) => Polynomial::constant(c.clone()),
            ParamExpr::Var(p) => Polynomial::variable(p.clone()),
            ParamExpr::Sum(terms) => terms
                .iter()
                .fold(Polynomial::zero(), |acc, t| acc.add(&t.expand())),
            ParamExpr::Product(factors) => factors
                .iter()
                .fold(Polynomial::constant(Rational::one()), |acc, t| acc.mul(&t.expand())),
        }
    }

    /// True iff every parameter has degree at most one after expansion.
    pub fn is_multi_affine(&self) -> bool {
        self.expand().is_multi_affine()
    }
}

impl From<Rational> for ParamExpr {
    fn from(r: Rational) -> Self {
        ParamExpr::Const(r)
    }
}

impl fmt::Display for ParamExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamExpr::Const(c) if c.is_negative() => write!(f, "({})", format_rational(c)),
            ParamExpr::Const(c) => f.write_str(&format_rational(c)),
            ParamExpr::Var(p) => write!(f, "{p}"),
            ParamExpr::Sum(terms) if terms.is_empty() => f.write_str("0"),
            ParamExpr::Sum(terms) => {
                f.write_str("(")?;
                for (i, t) in terms.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" + ")?;
                    }
                    write!(f, "{t}")?;
                }
                f.write_str(")")
            }
            ParamExpr::Product(factors) if factors.is_empty() => f.write_str("1"),
            ParamExpr::Product(factors) => {
                for (i, t) in factors.iter().enumerate() {
                    if i > 0 {
                        f.write_str("*")?;
                    }
                    write!(f, "{t}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for ParamExpr {
    type Err = ExprError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ParamExpr::parse(s)
    }
}

impl Serialize for ParamExpr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ParamExpr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ParamExpr::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Monomial as sorted `(parameter, exponent)` pairs; empty is the constant term.
pub type Monomial = Vec<(ParameterId, u32)>;

/// Canonical sum of monomials with nonzero rational coefficients.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Polynomial {
    terms: BTreeMap<Monomial, Rational>,
}

impl Polynomial {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: Rational) -> Self {
        let mut p = Polynomial::zero();
        if !c.is_zero() {
            p.terms.insert(Vec::new(), c);
        }
        p
    }

    pub fn variable(id: ParameterId) -> Self {
        let mut p = Polynomial::zero();
        p.terms.insert(vec![(id, 1)], Rational::one());
        p
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &Rational)> {
        self.terms.iter()
    }

    fn accumulate(&mut self, mono: Monomial, c: Rational) {
        use std::collections::btree_map::Entry;
        match self.terms.entry(mono) {
            Entry::Occupied(mut slot) => {
                *slot.get_mut() += c;
                if slot.get().is_zero() {
                    slot.remove();
                }
            }
            Entry::Vacant(slot) => {
                if !c.is_zero() {
                    slot.insert(c);
                }
            }
        }
    }

    pub fn add(&self, other: &Polynomial) -> Polynomial {
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.accumulate(m.clone(), c.clone());
        }
        out
    }

    pub fn sub(&self, other: &Polynomial) -> Polynomial {
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.accumulate(m.clone(), -c.clone());
        }
        out
    }

    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        let mut out = Polynomial::zero();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                out.accumulate(multiply_monomials(ma, mb), ca * cb);
            }
        }
        out
    }

    pub fn is_multi_affine(&self) -> bool {
        self.terms.keys().all(|m| m.iter().all(|(_, e)| *e <= 1))
    }

    pub fn to_expr(&self) -> ParamExpr {
        let terms: Vec<ParamExpr> = self
            .terms
            .iter()
            .map(|(m, c)| {
                let mut factors = vec![ParamExpr::Const(c.clone())];
                for (p, e) in m {
                    for _ in 0..*e {
                        factors.push(ParamExpr::Var(p.clone()));
                    }
                }
                if factors.len() == 1 {
                    factors.pop().unwrap()
                } else {
                    ParamExpr::Product(factors)
                }
            })
            .collect();
        match terms.len() {
            0 => ParamExpr::int(0),
            1 => terms.into_iter().next().unwrap(),
            _ => ParamExpr::Sum(terms),
        }
    }
}

fn multiply_monomials(a: &Monomial, b: &Monomial) -> Monomial {
    let mut exps: BTreeMap<ParameterId, u32> = a.iter().cloned().collect();
    for (p, e) in b {
        *exps.entry(p.clone()).or_insert(0) += e;
    }
    exps.into_iter().collect()
}

/// Checks that a row of symbolic probabilities is a distribution over the
/// whole region: the symbolic sum is exactly 1 and each entry is non-negative
/// at every corner of the box. Non-negativity plus unit sum bounds every entry
/// by 1 as well.
pub fn check_distribution_row(exprs: &[ParamExpr], region: &ParameterRegion) -> Result<(), RowDefect> {
    let mut sum = Polynomial::zero();
    for (i, e) in exprs.iter().enumerate() {
        let poly = e.expand();
        if !poly.is_multi_affine() {
            return Err(RowDefect::NotMultiAffine(i));
        }
        sum = sum.add(&poly);
    }
    let residual = sum.sub(&Polynomial::constant(Rational::one()));
    if !residual.is_zero() {
        return Err(RowDefect::NonUnitSum(residual.to_expr()));
    }
    let vars: BTreeSet<ParameterId> = exprs.iter().flat_map(|e| e.variables()).collect();
    let corners = region
        .corners(&vars)
        .map_err(|p| RowDefect::MissingParameter(p.to_string()))?;
    for corner in corners {
        for (index, e) in exprs.iter().enumerate() {
            // every variable is in the corner, so evaluation cannot fail
            let value = e.evaluate(&corner).expect("corner covers row variables");
            if value.is_negative() {
                return Err(RowDefect::NegativeAtCorner { corner, index });
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Parser: expr := term (('+'|'-') term)* ; term := unary ('*' unary)* ;
// unary := '-' unary | atom ; atom := number ['/' number] | ident | '(' expr ')'
// ---------------------------------------------------------------------------

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser { src, pos: 0 }
    }

    fn error(&self, message: impl Into<String>) -> ExprError {
        ExprError::Parse { offset: self.pos, message: message.into() }
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek_raw() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek_raw(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.peek_raw()
    }

    fn parse(mut self) -> Result<ParamExpr, ExprError> {
        let e = self.expr()?;
        if self.peek().is_some() {
            return Err(self.error("unexpected trailing input"));
        }
        Ok(e)
    }

    fn expr(&mut self) -> Result<ParamExpr, ExprError> {
        let mut terms = vec![self.term()?];
        loop {
            match self.peek() {
                Some('+') => {
                    self.pos += 1;
                    terms.push(self.term()?);
                }
                Some('-') => {
                    self.pos += 1;
                    let t = self.term()?;
                    terms.push(ParamExpr::Product(vec![ParamExpr::int(-1), t]));
                }
                _ => break,
            }
        }
        Ok(if terms.len() == 1 { terms.pop().unwrap() } else { ParamExpr::Sum(terms) })
    }

    fn term(&mut self) -> Result<ParamExpr, ExprError> {
        let mut factors = vec![self.unary()?];
        while self.peek() == Some('*') {
            self.pos += 1;
            factors.push(self.unary()?);
        }
        Ok(if factors.len() == 1 { factors.pop().unwrap() } else { ParamExpr::Product(factors) })
    }

    fn unary(&mut self) -> Result<ParamExpr, ExprError> {
        if self.peek() == Some('-') {
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(match inner {
                ParamExpr::Const(c) => ParamExpr::Const(-c),
                other => ParamExpr::Product(vec![ParamExpr::int(-1), other]),
            });
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<ParamExpr, ExprError> {
        match self.peek() {
            Some('(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(')') {
                    return Err(self.error("expected `)`"));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => {
                let mut value = self.number()?;
                if self.peek() == Some('/') {
                    self.pos += 1;
                    self.skip_ws();
                    let den = self.number()?;
                    if den.is_zero() {
                        return Err(self.error("division by zero in literal"));
                    }
                    value /= den;
                }
                Ok(ParamExpr::Const(value))
            }
            Some(c) if c.is_ascii_alphabetic() || c == '_' => {
                let start = self.pos;
                while let Some(c) = self.peek_raw() {
                    if c.is_ascii_alphanumeric() || c == '_' {
                        self.pos += 1;
                    } else {
                        break;
                    }
                }
                Ok(ParamExpr::Var(ParameterId(self.src[start..self.pos].to_string())))
            }
            Some(c) => Err(self.error(format!("unexpected character `{c}`"))),
            None => Err(self.error("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<Rational, ExprError> {
        let start = self.pos;
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && (bytes[self.pos].is_ascii_digit() || bytes[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < bytes.len() && (bytes[self.pos] == b'e' || bytes[self.pos] == b'E') {
            let mut look = self.pos + 1;
            if look < bytes.len() && (bytes[look] == b'-' || bytes[look] == b'+') {
                look += 1;
            }
            if look < bytes.len() && bytes[look].is_ascii_digit() {
                self.pos = look;
                while self.pos < bytes.len() && bytes[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            }
        }
        let text = &self.src[start..self.pos];
        parse_rational(text).map_err(|_| ExprError::Parse {
            offset: start,
            message: format!("invalid number `{text}`"),
        })
    }
}
