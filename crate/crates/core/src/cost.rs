//! Resource-cost models and the expected-cost algebra over a softmax.
//!
//! Costs are raw units (parameters, MACs, microseconds); λ does all scaling.
//! Production gradients flow through the tape. [`expected_cost_grad`] is the
//! closed form, kept as an independent check.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::primitives::{primitive_mac_count, primitive_param_count, PrimitiveKind, PrimitiveSpec};

/// A deterministic, data-independent cost attached to a primitive on an edge.
pub trait ResourceCost: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &str;
    fn cost(&self, spec: &PrimitiveSpec) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParamCost;

impl ResourceCost for ParamCost {
    fn name(&self) -> &str {
        "params"
    }
    fn cost(&self, spec: &PrimitiveSpec) -> Result<f64> {
        Ok(primitive_param_count(spec) as f64)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MacCost;

impl ResourceCost for MacCost {
    fn name(&self) -> &str {
        "macs"
    }
    fn cost(&self, spec: &PrimitiveSpec) -> Result<f64> {
        Ok(primitive_mac_count(spec) as f64)
    }
}

/// Measured per-primitive latency in microseconds, keyed by the full spec.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatencyTable {
    entries: BTreeMap<PrimitiveSpec, f64>,
}

pub const LATENCY_HEADER: [&str; 6] = ["op", "channels", "in_h", "in_w", "stride", "microseconds"];

impl LatencyTable {
    pub fn from_fn(
        specs: impl IntoIterator<Item = PrimitiveSpec>,
        mut f: impl FnMut(&PrimitiveSpec) -> f64,
    ) -> Self {
        let entries = specs.into_iter().map(|s| (s, f(&s))).collect();
        LatencyTable { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, spec: &PrimitiveSpec) -> Option<f64> {
        self.entries.get(spec).copied()
    }

    /// Parses the CSV body. An empty input is an empty table.
    pub fn parse(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut entries = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = rec.position().map_or(i + 1, |p| p.line() as usize);
            if i == 0 {
                let fields: Vec<&str> = rec.iter().collect();
                if fields != LATENCY_HEADER {
                    return Err(Error::Parse {
                        line,
                        detail: format!("expected header {:?}, found {fields:?}", LATENCY_HEADER.join(",")),
                    });
                }
                continue;
            }
            let spec = parse_row(&rec, line)?;
            let us: f64 = field(&rec, 5, line)?;
            if !us.is_finite() || us < 0.0 {
                return Err(Error::Parse {
                    line,
                    detail: format!("microseconds must be finite and non-negative, got {us}"),
                });
            }
            if entries.insert(spec, us).is_some() {
                return Err(Error::DuplicateKey {
                    line,
                    key: spec.to_string(),
                });
            }
        }
        Ok(LatencyTable { entries })
    }

    /// Fails with every reachable spec that has no entry.
    pub fn check_coverage<'a>(&self, required: impl IntoIterator<Item = &'a PrimitiveSpec>) -> Result<()> {
        let missing: Vec<String> = required
            .into_iter()
            .filter(|s| !self.entries.contains_key(s))
            .map(|s| s.to_string())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Coverage { missing })
        }
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(LATENCY_HEADER)?;
        for (s, us) in &self.entries {
            w.write_record([
                s.kind.name().to_string(),
                s.channels.to_string(),
                s.input_h.to_string(),
                s.input_w.to_string(),
                s.stride.to_string(),
                us.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<latency table>", e))?;
        Ok(())
    }
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = rec.get(i).ok_or_else(|| Error::Parse {
        line,
        detail: format!("expected 6 fields, found {}", rec.len()),
    })?;
    raw.parse().map_err(|e| Error::Parse {
        line,
        detail: format!("field {} ({raw:?}): {e}", LATENCY_HEADER[i]),
    })
}

fn parse_row(rec: &csv::StringRecord, line: usize) -> Result<PrimitiveSpec> {
    if rec.len() != 6 {
        return Err(Error::Parse {
            line,
            detail: format!("expected 6 fields, found {}", rec.len()),
        });
    }
    let kind: PrimitiveKind = rec[0].parse().map_err(|_| Error::Parse {
        line,
        detail: format!("unknown op {:?}", &rec[0]),
    })?;
    Ok(PrimitiveSpec::new(
        kind,
        field(rec, 1, line)?,
        field(rec, 4, line)?,
        field(rec, 2, line)?,
        field(rec, 3, line)?,
    ))
}

impl ResourceCost for LatencyTable {
    fn name(&self) -> &str {
        "latency"
    }
    fn cost(&self, spec: &PrimitiveSpec) -> Result<f64> {
        self.get(spec).ok_or_else(|| Error::Coverage {
            missing: vec![spec.to_string()],
        })
    }
}

/// Reads a latency table and verifies it covers `required`.
pub fn load_latency_table<'a>(
    path: &Path,
    required: impl IntoIterator<Item = &'a PrimitiveSpec>,
) -> Result<LatencyTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let table = LatencyTable::parse(std::io::BufReader::new(file))?;
    table.check_coverage(required)?;
    Ok(table)
}

/// A registered cost with its penalty weight λ.
#[derive(Debug, Clone)]
pub struct CostModel {
    pub source: Arc<dyn ResourceCost>,
    pub lambda: f64,
}

impl CostModel {
    pub fn new(source: Arc<dyn ResourceCost>, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda for {} must be finite and non-negative, got {lambda}",
                source.name()
            )));
        }
        Ok(CostModel { source, lambda })
    }

    pub fn name(&self) -> &str {
        self.source.name()
    }
}

/// Σ p_i c_i.
pub fn expected_cost(p: &[f64], costs: &[f64]) -> f64 {
    p.iter().zip(costs).map(|(a, b)| a * b).sum()
}

/// ∂/∂α_i of Σ_l c_l·softmax(α)_l, written as Σ_l c_l p_l (δ_il − p_i).
pub fn expected_cost_grad(p: &[f64], costs: &[f64]) -> Vec<f64> {
    (0..p.len())
        .map(|i| {
            p.iter()
                .zip(costs)
                .enumerate()
                .map(|(l, (&pl, &cl))| {
                    let delta = if i == l { 1.0 } else { 0.0 };
                    cl * pl * (delta - p[i])
                })
                .sum()
        })
        .collect()
}

/// Σ_m λ_m C_m.
pub fn total_resource_loss(costs: &[f64], lambdas: &[f64]) -> Result<f64> {
    if costs.len() != lambdas.len() {
        return Err(Error::Config(format!(
            "{} cost totals but {} lambdas",
            costs.len(),
            lambdas.len()
        )));
    }
    Ok(costs.iter().zip(lambdas).map(|(c, l)| c * l).sum())
}

/// Softmax in f64 with max subtraction.
pub fn softmax_f64(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Tape, Tensor};
    use proptest::prelude::*;

    #[test]
    fn expected_cost_examples() {
        assert_eq!(expected_cost(&[0.5, 0.5], &[100.0, 300.0]), 200.0);
        assert_eq!(expected_cost(&[0.0, 1.0, 0.0], &[4.0, 7.0, 9.0]), 7.0);
        let g = expected_cost_grad(&[0.5, 0.5], &[100.0, 300.0]);
        assert_eq!(g, vec![-50.0, 50.0]);
        let g = expected_cost_grad(&[0.2, 0.3, 0.5], &[6.0; 3]);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(expected_cost_grad(&[1.0], &[42.0]), vec![0.0]);
    }

    #[test]
    fn resource_loss_examples() {
        assert_eq!(total_resource_loss(&[5e5, 3e7], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(total_resource_loss(&[2e6], &[1e-6]).unwrap(), 2.0);
        let a = total_resource_loss(&[2e6], &[1e-6]).unwrap();
        let b = total_resource_loss(&[4e3], &[1e-3]).unwrap();
        assert_eq!(total_resource_loss(&[2e6, 4e3], &[1e-6, 1e-3]).unwrap(), a + b);
        assert!(matches!(total_resource_loss(&[1.0], &[]), Err(Error::Config(_))));
    }

    #[test]
    fn negative_lambda_rejected() {
        assert!(CostModel::new(Arc::new(ParamCost), -1e-6).is_err());
        assert!(CostModel::new(Arc::new(ParamCost), f64::NAN).is_err());
    }

    fn some_specs() -> Vec<PrimitiveSpec> {
        PrimitiveKind::ALL
            .iter()
            .flat_map(|&k| [(8, 1, 8), (16, 2, 8), (16, 1, 4)].map(|(c, s, h)| PrimitiveSpec::new(k, c, s, h, h)))
            .collect()
    }

    #[test]
    fn latency_table_round_trip() {
        let specs = some_specs();
        let table = LatencyTable::from_fn(specs.clone(), |s| MacCost.cost(s).unwrap() / 1000.0 + 0.25);
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let back = LatencyTable::parse(buf.as_slice()).unwrap();
        for s in &specs {
            assert_eq!(back.cost(s).unwrap(), table.cost(s).unwrap());
        }
        back.check_coverage(&specs).unwrap();
    }

    #[test]
    fn empty_table_fails_coverage() {
        let table = LatencyTable::parse(&b""[..]).unwrap();
        let specs = some_specs();
        match table.check_coverage(&specs) {
            Err(Error::Coverage { missing }) => assert_eq!(missing.len(), specs.len()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_and_malformed_rows() {
        let dup = "op,channels,in_h,in_w,stride,microseconds\n\
                   zero,8,8,8,1,0.5\n\
                   sep_conv_3x3,8,8,8,1,3\n\
                   zero,8,8,8,1,0.7\n";
        match LatencyTable::parse(dup.as_bytes()) {
            Err(Error::DuplicateKey { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        let bad = "op,channels,in_h,in_w,stride,microseconds\nzero,8,8,x,1,0.5\n";
        match LatencyTable::parse(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let bad = "op,channels,in_h,in_w,stride,microseconds\nconv_7x7,8,8,8,1,0.5\n";
        assert!(matches!(LatencyTable::parse(bad.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    /// Tape gradient of Σ c·softmax(α), in f32.
    fn autodiff_grad(alpha: &[f64], costs: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let a = tape.leaf(
            Tensor::new(vec![alpha.len()], alpha.iter().map(|&v| v as f32).collect())
                .unwrap()
                .with_requires_grad(true),
        );
        let p = tape.softmax(a).unwrap();
        let c: Vec<f32> = costs.iter().map(|&v| v as f32).collect();
        let e = tape.dot_const(p, &c).unwrap();
        let g = tape.backward(e).unwrap();
        g.get(a).unwrap().iter().map(|&v| v as f64).collect()
    }

    proptest! {
        #[test]
        fn closed_form_matches_autodiff_and_sums_to_zero(
            alpha in prop::collection::vec(-3.0f64..3.0, 1..9),
            scale in 1.0f64..1000.0,
        ) {
            let costs: Vec<f64> = alpha.iter().enumerate().map(|(i, a)| scale * ((i as f64 + a).sin().abs())).collect();
            let p = softmax_f64(&alpha);
            let closed = expected_cost_grad(&p, &costs);
            prop_assert!(closed.iter().sum::<f64>().abs() < 1e-9);
            let auto = autodiff_grad(&alpha, &costs);
            prop_assert!(crate::engine::rel_err(&auto, &closed, 1.0) < 1e-4);
        }

        #[test]
        fn shift_invariance(alpha in prop::collection::vec(-3.0f64..3.0, 2..9), shift in -50.0f64..50.0) {
            let costs: Vec<f64> = (0..alpha.len()).map(|i| 10.0 * i as f64).collect();
            let base = expected_cost(&softmax_f64(&alpha), &costs);
            let moved: Vec<f64> = alpha.iter().map(|a| a + shift).collect();
            let shifted = expected_cost(&softmax_f64(&moved), &costs);
            prop_assert!((base - shifted).abs() <= 1e-6 * base.abs().max(1.0));
        }
    }
}
