//! Parameter-space sweeps: instantiate, check, record.
//!
//! Samples are generated up front in a fixed order and evaluated in
//! parallel; results are merged back in sampling order, so a sweep is a pure
//! function of its spec. Random modes draw each sample from its own ChaCha
//! stream keyed by the sample index.

use std::fmt;
use std::path::Path;

use num::{One, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::checker::{evaluate_policy_report, max_until, CheckError, Policy, SolverConfig, UntilProperty};
use crate::expr::{rational_from_f64, rational_to_f64, Interval, ParameterId, ParameterRegion, Rational, Valuation};
use crate::model::{ModelError, Pmdp};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep spec: {0}")]
    InvalidSpec(String),
    #[error("sweep region {sweep} is not contained in the model region {model}")]
    RegionNotContained { sweep: ParameterRegion, model: ParameterRegion },
    #[error("instantiation failed at {valuation}: {source}")]
    Model { valuation: Valuation, source: ModelError },
    #[error("no convergence at {valuation} after {iterations} iterations")]
    NonConvergence { valuation: Valuation, iterations: u64 },
    #[error("check failed at {valuation}: {source}")]
    Check { valuation: Valuation, source: CheckError },
    #[error("malformed CSV at line {line}: {reason}")]
    MalformedCsv { line: u64, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum SweepMode {
    /// Cartesian lattice with `points` values per free dimension, endpoints included.
    Grid { points: u32 },
    /// Uniform samples, independent per dimension.
    Random { samples: u32, seed: u64 },
    /// One shared value for all `parameters`: a lattice over `range`, or
    /// uniform draws when a seed is given. Other parameters must be fixed.
    Tied {
        parameters: Vec<ParameterId>,
        range: Interval,
        samples: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    #[serde(flatten)]
    pub mode: SweepMode,
    pub region: ParameterRegion,
    #[serde(default)]
    pub solver: SolverConfig,
}

/// A CSV column: one parameter, or several tied parameters sharing a value.
pub type Column = Vec<ParameterId>;

fn column_name(c: &Column) -> String {
    c.iter().map(|p| p.as_str()).collect::<Vec<_>>().join("=")
}

fn lattice(iv: &Interval, points: u32) -> Vec<Rational> {
    if iv.is_degenerate() || points == 1 {
        return vec![iv.lo().clone()];
    }
    let width = iv.hi() - iv.lo();
    let last = Rational::from_integer((points - 1).into());
    (0..points)
        .map(|i| iv.lo() + &width * Rational::from_integer(i.into()) / &last)
        .collect()
}

fn uniform(iv: &Interval, rng: &mut ChaCha8Rng) -> Rational {
    if iv.is_degenerate() {
        return iv.lo().clone();
    }
    let (lo, hi) = (rational_to_f64(iv.lo()), rational_to_f64(iv.hi()));
    let x = lo + (hi - lo) * rng.gen::<f64>();
    let r = rational_from_f64(x).expect("finite sample");
    r.clamp(iv.lo().clone(), iv.hi().clone())
}

impl SweepSpec {
    pub fn new(mode: SweepMode, region: ParameterRegion, solver: SolverConfig) -> Self {
        SweepSpec { mode, region, solver }
    }

    /// Sample columns and valuations in evaluation order.
    pub fn samples(&self) -> Result<(Vec<Column>, Vec<Valuation>), SweepError> {
        let params: Vec<(&ParameterId, &Interval)> = self.region.iter().collect();
        match &self.mode {
            SweepMode::Grid { points } => {
                if *points == 0 {
                    return Err(SweepError::InvalidSpec("grid needs at least one point per dimension".into()));
                }
                let mut out = vec![Valuation::new()];
                for (p, iv) in &params {
                    let values = lattice(iv, *points);
                    out = out
                        .into_iter()
                        .flat_map(|v| values.iter().map(move |x| v.clone().with((*p).clone(), x.clone())))
                        .collect();
                }
                Ok((params.iter().map(|(p, _)| vec![(*p).clone()]).collect(), out))
            }
            SweepMode::Random { samples, seed } => {
                if *samples == 0 {
                    return Err(SweepError::InvalidSpec("random sweep needs at least one sample".into()));
                }
                let out = (0..*samples)
                    .map(|i| {
                        let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                        rng.set_stream(i as u64);
                        params.iter().fold(Valuation::new(), |v, (p, iv)| v.with((*p).clone(), uniform(iv, &mut rng)))
                    })
                    .collect();
                Ok((params.iter().map(|(p, _)| vec![(*p).clone()]).collect(), out))
            }
            SweepMode::Tied { parameters, range, samples, seed } => {
                if *samples == 0 || parameters.is_empty() {
                    return Err(SweepError::InvalidSpec("tied sweep needs parameters and at least one sample".into()));
                }
                for p in parameters {
                    let iv = self
                        .region
                        .get(p)
                        .ok_or_else(|| SweepError::InvalidSpec(format!("tied parameter `{p}` is not in the region")))?;
                    if !range.is_subset_of(iv) {
                        return Err(SweepError::InvalidSpec(format!("tied range {range} exceeds the interval of `{p}`")));
                    }
                }
                let fixed: Vec<(&ParameterId, &Interval)> =
                    params.iter().copied().filter(|(p, _)| !parameters.contains(p)).collect();
                if let Some((p, _)) = fixed.iter().find(|(_, iv)| !iv.is_degenerate()) {
                    return Err(SweepError::InvalidSpec(format!(
                        "parameter `{p}` is neither tied nor fixed to a single value"
                    )));
                }
                let shared: Vec<Rational> = match seed {
                    None => lattice(range, *samples),
                    Some(seed) => (0..*samples)
                        .map(|i| {
                            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                            rng.set_stream(i as u64);
                            uniform(range, &mut rng)
                        })
                        .collect(),
                };
                let out = shared
                    .into_iter()
                    .map(|x| {
                        let v = parameters.iter().fold(Valuation::new(), |v, p| v.with(p.clone(), x.clone()));
                        fixed.iter().fold(v, |v, (p, iv)| v.with((*p).clone(), iv.lo().clone()))
                    })
                    .collect();
                let mut columns = vec![parameters.clone()];
                columns.extend(fixed.iter().map(|(p, _)| vec![(*p).clone()]));
                Ok((columns, out))
            }
        }
    }

    fn check_region(&self, m: &Pmdp) -> Result<(), SweepError> {
        if self.region.is_subset_of(m.region()) {
            Ok(())
        } else {
            Err(SweepError::RegionNotContained { sweep: self.region.clone(), model: m.region().clone() })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub valuation: Valuation,
    pub value: f64,
    pub iterations: u64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub columns: Vec<Column>,
    pub records: Vec<SampleRecord>,
    pub min: f64,
    pub max: f64,
    pub argmin: usize,
    pub argmax: usize,
}

impl SweepResult {
    /// Computes the summary fields; ties resolve to the earliest record.
    pub fn from_records(columns: Vec<Column>, records: Vec<SampleRecord>) -> Option<Self> {
        let first = records.first()?;
        let (mut min, mut max, mut argmin, mut argmax) = (first.value, first.value, 0, 0);
        for (i, r) in records.iter().enumerate().skip(1) {
            if r.value < min {
                min = r.value;
                argmin = i;
            }
            if r.value > max {
                max = r.value;
                argmax = i;
            }
        }
        Some(SweepResult { columns, records, min, max, argmin, argmax })
    }

    pub fn argmin_record(&self) -> &SampleRecord {
        &self.records[self.argmin]
    }

    pub fn argmax_record(&self) -> &SampleRecord {
        &self.records[self.argmax]
    }

    fn valuation_json(v: &Valuation) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> =
            v.iter().map(|(p, r)| (p.to_string(), json!(rational_to_f64(r)))).collect();
        serde_json::Value::Object(map)
    }

    pub fn summary_json(&self) -> serde_json::Value {
        json!({
            "min": self.min,
            "argmin": Self::valuation_json(&self.argmin_record().valuation),
            "max": self.max,
            "argmax": Self::valuation_json(&self.argmax_record().valuation),
            "samples": self.records.len(),
        })
    }

    /// `p1[,p2],value` rows under a header; tied columns are named `p1=p2`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = self.columns.iter().map(column_name).collect();
        header.push("value".into());
        w.write_record(&header).expect("in-memory write");
        for r in &self.records {
            let mut row: Vec<String> = self
                .columns
                .iter()
                .map(|c| format!("{}", rational_to_f64(r.valuation.get(&c[0]).expect("column parameter"))))
                .collect();
            row.push(format!("{}", r.value));
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("ascii output")
    }

    pub fn from_csv(text: &str) -> Result<Self, SweepError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let malformed = |line: u64, reason: String| SweepError::MalformedCsv { line, reason };
        let header = reader.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
        let n = header.len();
        if n < 2 || &header[n - 1] != "value" {
            return Err(malformed(1, "header must end with a `value` column".into()));
        }
        let columns: Vec<Column> = header
            .iter()
            .take(n - 1)
            .map(|name| {
                name.split('=')
                    .map(|p| ParameterId::new(p).map_err(|e| malformed(1, e.to_string())))
                    .collect()
            })
            .collect::<Result<_, _>>()?;
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|e| malformed(e.position().map_or(0, |p| p.line()), e.to_string()))?;
            let line = row.position().map_or(0, |p| p.line());
            let mut nums = Vec::with_capacity(n);
            for field in row.iter() {
                let x: f64 = field.trim().parse().map_err(|_| malformed(line, format!("bad number `{field}`")))?;
                nums.push(x);
            }
            let mut valuation = Valuation::new();
            for (c, x) in columns.iter().zip(&nums) {
                let r = rational_from_f64(*x).ok_or_else(|| malformed(line, "non-finite value".into()))?;
                for p in c {
                    valuation.insert(p.clone(), r.clone());
                }
            }
            records.push(SampleRecord { valuation, value: nums[n - 1], iterations: 0, residual: 0.0 });
        }
        SweepResult::from_records(columns, records).ok_or_else(|| malformed(1, "no records".into()))
    }
}

impl fmt::Display for SweepResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.summary_json())
    }
}

pub fn write_csv(r: &SweepResult, path: impl AsRef<Path>) -> Result<(), SweepError> {
    std::fs::write(path, r.to_csv())?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<SweepResult, SweepError> {
    SweepResult::from_csv(&std::fs::read_to_string(path)?)
}

fn sweep_with<F>(m: &Pmdp, spec: &SweepSpec, eval: F) -> Result<SweepResult, SweepError>
where
    F: Fn(&crate::model::ConcreteMdp) -> Result<(f64, u64, f64), CheckError> + Sync,
{
    spec.solver.validate().map_err(|e| SweepError::InvalidSpec(e.to_string()))?;
    spec.check_region(m)?;
    let (columns, valuations) = spec.samples()?;
    let outcomes: Vec<Result<SampleRecord, SweepError>> = valuations
        .into_par_iter()
        .map(|valuation| {
            let concrete = match m.instantiate(&valuation) {
                Ok(c) => c,
                Err(source) => return Err(SweepError::Model { valuation, source }),
            };
            match eval(&concrete) {
                Ok((value, iterations, residual)) => Ok(SampleRecord { valuation, value, iterations, residual }),
                Err(CheckError::NonConvergence { iterations, .. }) => {
                    Err(SweepError::NonConvergence { valuation, iterations })
                }
                Err(source) => Err(SweepError::Check { valuation, source }),
            }
        })
        .collect();
    let records = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(SweepResult::from_records(columns, records).expect("at least one sample"))
}

/// Optimal satisfaction probability at every sampled valuation.
pub fn run_sweep(m: &Pmdp, prop: &UntilProperty, spec: &SweepSpec) -> Result<SweepResult, SweepError> {
    sweep_with(m, spec, |c| {
        let r = max_until(c, prop, &spec.solver)?;
        Ok((r.value_at_initial, r.iterations, r.residual))
    })
}

/// Satisfaction probability of one fixed policy at every sampled valuation.
pub fn evaluate_fixed_policy_sweep(
    m: &Pmdp,
    pol: &Policy,
    prop: &UntilProperty,
    spec: &SweepSpec,
) -> Result<SweepResult, SweepError> {
    sweep_with(m, spec, |c| {
        let r = evaluate_policy_report(c, pol, prop, &spec.solver)?;
        Ok((r.value_at_initial, r.iterations, r.residual))
    })
}

/// Region with `param` narrowed to `[0, upper]` and everything else unchanged.
pub fn with_upper_bound(region: &ParameterRegion, param: &ParameterId, upper: Rational) -> Option<ParameterRegion> {
    region.get(param)?;
    let mut out = region.clone();
    out.set(param.clone(), Interval::new(Rational::zero(), upper.min(Rational::one()))?);
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_rational;
    use crate::model::{PmdpBuilder, StateId, CRASH_LABEL, GOAL_LABEL};
    use crate::expr::ParamExpr;

    fn region(p1: (&str, &str), p2: (&str, &str)) -> ParameterRegion {
        ParameterRegion::new()
            .with_str("p1", p1.0, p1.1)
            .unwrap()
            .with_str("p2", p2.0, p2.1)
            .unwrap()
    }

    /// value = (1-p1) / (1 - p1*p2... ) style toy: goal w.p. 1-p1, crash w.p. p1*p2, retry otherwise.
    fn toy() -> Pmdp {
        let mut b = PmdpBuilder::new(3, StateId(0), region(("0", "1"), ("0", "1")));
        let e = |s: &str| ParamExpr::parse(s).unwrap();
        b.add_choice(
            StateId(0),
            "go",
            [(StateId(1), e("1-p1")), (StateId(2), e("p1*p2")), (StateId(0), e("p1*(1-p2)"))],
        );
        b.label(GOAL_LABEL, StateId(1));
        b.label(CRASH_LABEL, StateId(2));
        b.build()
    }

    #[test]
    fn grid_includes_endpoints() {
        let spec = SweepSpec::new(
            SweepMode::Grid { points: 2 },
            region(("0", "1"), ("0.4", "0.4")),
            SolverConfig::default(),
        );
        let (_, vals) = spec.samples().unwrap();
        assert_eq!(vals.len(), 2);
        assert_eq!(vals[0], Valuation::parse(&[("p1", "0"), ("p2", "0.4")]).unwrap());
        assert_eq!(vals[1], Valuation::parse(&[("p1", "1"), ("p2", "0.4")]).unwrap());

        let spec = SweepSpec::new(SweepMode::Grid { points: 5 }, region(("0", "1"), ("0", "0.5")), SolverConfig::default());
        assert_eq!(spec.samples().unwrap().1.len(), 25);
    }

    #[test]
    fn lattice_is_exact() {
        let iv = Interval::new(parse_rational("0").unwrap(), parse_rational("0.15").unwrap()).unwrap();
        let pts = lattice(&iv, 4);
        assert_eq!(pts[3], parse_rational("3/20").unwrap());
        assert_eq!(pts[1], parse_rational("1/20").unwrap());
    }

    #[test]
    fn tied_validation() {
        let p = |s: &str| ParameterId::new(s).unwrap();
        let range = Interval::unit();
        let spec = SweepSpec::new(
            SweepMode::Tied { parameters: vec![p("p1")], range: range.clone(), samples: 3, seed: None },
            region(("0", "1"), ("0", "1")),
            SolverConfig::default(),
        );
        assert!(matches!(spec.samples(), Err(SweepError::InvalidSpec(_))));
        let spec = SweepSpec::new(
            SweepMode::Tied { parameters: vec![p("p1"), p("p2")], range, samples: 3, seed: None },
            region(("0", "1"), ("0", "0.5")),
            SolverConfig::default(),
        );
        assert!(matches!(spec.samples(), Err(SweepError::InvalidSpec(_))));
    }

    #[test]
    fn tied_lattice_and_csv_line() {
        let p = |s: &str| ParameterId::new(s).unwrap();
        let spec = SweepSpec::new(
            SweepMode::Tied {
                parameters: vec![p("p1"), p("p2")],
                range: Interval::new(parse_rational("0.1").unwrap(), parse_rational("0.3").unwrap()).unwrap(),
                samples: 3,
                seed: None,
            },
            region(("0", "1"), ("0", "1")),
            SolverConfig::default(),
        );
        let r = run_sweep(&toy(), &UntilProperty::mission(), &spec).unwrap();
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("p1=p2,value"));
        assert!(lines.nth(1).unwrap().starts_with("0.2,"));
        let back = SweepResult::from_csv(&csv).unwrap();
        assert_eq!(back.records[2].valuation, Valuation::parse(&[("p1", "0.3"), ("p2", "0.3")]).unwrap());
    }

    #[test]
    fn tied_record_line_format() {
        let p = |s: &str| ParameterId::new(s).unwrap();
        let rec = SampleRecord {
            valuation: Valuation::parse(&[("p1", "0.3"), ("p2", "0.3")]).unwrap(),
            value: 0.95,
            iterations: 3,
            residual: 0.0,
        };
        let r = SweepResult::from_records(vec![vec![p("p1"), p("p2")]], vec![rec]).unwrap();
        assert_eq!(r.to_csv(), "p1=p2,value\n0.3,0.95\n");
    }

    #[test]
    fn summaries_and_values() {
        let spec = SweepSpec::new(
            SweepMode::Grid { points: 3 },
            region(("0", "0.5"), ("0", "1")),
            SolverConfig::default().with_epsilon(1e-12),
        );
        let r = run_sweep(&toy(), &UntilProperty::mission(), &spec).unwrap();
        assert_eq!(r.records.len(), 9);
        for rec in &r.records {
            let p1 = rec.valuation.get_f64("p1").unwrap();
            let p2 = rec.valuation.get_f64("p2").unwrap();
            // geometric retry: (1-p1) / (1 - p1*(1-p2))
            let exact = (1.0 - p1) / (1.0 - p1 * (1.0 - p2));
            assert!((rec.value - exact).abs() < 1e-9, "{rec:?} vs {exact}");
        }
        let min = r.records.iter().map(|x| x.value).fold(f64::INFINITY, f64::min);
        assert_eq!(r.min, min);
        assert_eq!(r.argmin_record().value, min);
        assert_eq!(r.max, 1.0);
        let summary = r.summary_json();
        assert_eq!(summary["samples"], 9);
        assert_eq!(summary["argmin"]["p1"], 0.5);
    }

    #[test]
    fn region_must_be_contained() {
        let mut m = toy();
        let narrow = region(("0", "0.1"), ("0", "1"));
        m = Pmdp::from_parts(m.initial(), (0..3).map(|i| m.choices(StateId(i)).to_vec()).collect(), m.labels().clone(), narrow);
        let spec = SweepSpec::new(SweepMode::Grid { points: 2 }, region(("0", "1"), ("0", "1")), SolverConfig::default());
        assert!(matches!(run_sweep(&m, &UntilProperty::mission(), &spec), Err(SweepError::RegionNotContained { .. })));
    }

    #[test]
    fn malformed_csv() {
        assert!(matches!(SweepResult::from_csv("p1,value\n"), Err(SweepError::MalformedCsv { .. })));
        assert!(matches!(SweepResult::from_csv("p1,score\n0.1,0.2\n"), Err(SweepError::MalformedCsv { line: 1, .. })));
        assert!(matches!(
            SweepResult::from_csv("p1,value\n0.1,0.2\n0.2,abc\n"),
            Err(SweepError::MalformedCsv { line: 3, .. })
        ));
        assert!(SweepResult::from_csv("p1,value\n0.1\n").is_err());
    }

    #[test]
    fn upper_bound_region() {
        let r = region(("0.1", "0.25"), ("0", "1"));
        let p1 = ParameterId::new("p1").unwrap();
        let narrowed = with_upper_bound(&r, &p1, parse_rational("0.15").unwrap()).unwrap();
        assert_eq!(narrowed.get(&p1).unwrap().to_string(), "[0, 3/20]");
    }
}
