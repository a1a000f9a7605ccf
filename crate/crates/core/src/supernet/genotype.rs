use std::fmt;

use serde::{Deserialize, Serialize};

use super::{edge_index, AlphaStore, AlphaTable, CellKind, STEPS};
use crate::error::{Error, Result};
use crate::primitives::PrimitiveKind;

pub const GENOTYPE_SCHEMA_VERSION: u32 = 1;

/// Most skip-connects a normal cell may hold and still be accepted.
pub const SKIP_LIMIT: usize = 2;

/// The rejection rule, verbatim.
pub const SKIP_RULE: &str = "more than two skip-connections in the normal cell";

/// A discrete architecture: two `(source, op)` inputs per step for each cell
/// type, plus the evaluation-network size it is meant to be trained at.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Genotype {
    pub normal: Vec<(usize, PrimitiveKind)>,
    pub reduce: Vec<(usize, PrimitiveKind)>,
    pub init_channels: usize,
    pub depth: usize,
}

#[derive(Serialize, Deserialize)]
struct GenotypeDoc {
    schema_version: u32,
    normal: Vec<(usize, String)>,
    reduce: Vec<(usize, String)>,
    init_channels: usize,
    depth: usize,
}

fn check_cell(name: &str, cell: &[(usize, PrimitiveKind)]) -> Result<()> {
    if cell.len() != 2 * STEPS {
        return Err(Error::Validation(format!(
            "{name} cell has {} entries, expected {}",
            cell.len(),
            2 * STEPS
        )));
    }
    for (step, pair) in cell.chunks(2).enumerate() {
        for &(src, op) in pair {
            if src >= step + 2 {
                return Err(Error::Validation(format!(
                    "{name} cell step {step}: source {src} does not precede the step"
                )));
            }
            if op == PrimitiveKind::Zero {
                return Err(Error::Validation(format!("{name} cell step {step}: zero is not a selectable op")));
            }
        }
        if pair[0].0 == pair[1].0 {
            return Err(Error::Validation(format!(
                "{name} cell step {step}: both inputs come from node {}",
                pair[0].0
            )));
        }
    }
    Ok(())
}

impl Genotype {
    pub fn new(
        normal: Vec<(usize, PrimitiveKind)>,
        reduce: Vec<(usize, PrimitiveKind)>,
        init_channels: usize,
        depth: usize,
    ) -> Result<Self> {
        check_cell("normal", &normal)?;
        check_cell("reduce", &reduce)?;
        if init_channels == 0 || depth < 2 {
            return Err(Error::Validation(format!(
                "evaluation network needs init_channels > 0 and depth >= 2 (got {init_channels}, {depth})"
            )));
        }
        Ok(Genotype {
            normal,
            reduce,
            init_channels,
            depth,
        })
    }

    pub fn cell(&self, kind: CellKind) -> &[(usize, PrimitiveKind)] {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduce => &self.reduce,
        }
    }

    pub fn normal_skip_count(&self) -> usize {
        self.normal
            .iter()
            .filter(|(_, op)| *op == PrimitiveKind::SkipConnect)
            .count()
    }

    pub fn validity(&self) -> Validity {
        match self.normal_skip_count() {
            n if n > SKIP_LIMIT => Validity::TooManySkips { count: n },
            _ => Validity::Valid,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let enc = |cell: &[(usize, PrimitiveKind)]| cell.iter().map(|&(s, k)| (s, k.name().to_string())).collect();
        let doc = GenotypeDoc {
            schema_version: GENOTYPE_SCHEMA_VERSION,
            normal: enc(&self.normal),
            reduce: enc(&self.reduce),
            init_channels: self.init_channels,
            depth: self.depth,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GenotypeDoc = serde_json::from_str(text)?;
        if doc.schema_version != GENOTYPE_SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "unsupported genotype schema_version {}",
                doc.schema_version
            )));
        }
        let dec = |cell: Vec<(usize, String)>| {
            cell.into_iter()
                .map(|(s, name)| {
                    name.parse()
                        .map(|k| (s, k))
                        .map_err(|_| Error::Validation(format!("unknown op name {name:?}")))
                })
                .collect::<Result<Vec<_>>>()
        };
        Genotype::new(dec(doc.normal)?, dec(doc.reduce)?, doc.init_channels, doc.depth)
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |cell: &[(usize, PrimitiveKind)]| {
            cell.iter()
                .map(|(s, k)| format!("{k}<-{s}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        write!(f, "normal[{}] reduce[{}]", show(&self.normal), show(&self.reduce))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Validity {
    Valid,
    TooManySkips { count: usize },
}

impl Validity {
    pub fn is_valid(self) -> bool {
        self == Validity::Valid
    }

    /// The violated rule, if any.
    pub fn rule(self) -> Option<&'static str> {
        match self {
            Validity::Valid => None,
            Validity::TooManySkips { .. } => Some(SKIP_RULE),
        }
    }
}

impl fmt::Display for Validity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Validity::Valid => f.write_str("valid"),
            Validity::TooManySkips { count } => {
                write!(f, "invalid: {count} skip-connects in normal cell ({SKIP_RULE})")
            }
        }
    }
}

/// At most two skip-connects in the normal cell; the reduce cell is unconstrained.
pub fn is_valid(g: &Genotype) -> bool {
    g.validity().is_valid()
}

/// Best non-zero candidate on an edge: `(weight, kind)`, ties to the lower kind.
fn best_op(table: &AlphaTable, edge: usize) -> (f64, PrimitiveKind) {
    let p = table.probs(edge);
    let mut best: Option<(f64, PrimitiveKind)> = None;
    for (&kind, &w) in table.ops(edge).iter().zip(&p) {
        if kind == PrimitiveKind::Zero {
            continue;
        }
        if best.is_none_or(|(bw, _)| w > bw) {
            best = Some((w, kind));
        }
    }
    best.expect("alpha tables always hold a non-zero candidate")
}

fn derive_cell(table: &AlphaTable) -> Vec<(usize, PrimitiveKind)> {
    let mut cell = Vec::with_capacity(2 * STEPS);
    for step in 0..STEPS {
        let mut ranked: Vec<(f64, usize, PrimitiveKind)> = (0..step + 2)
            .map(|src| {
                let (w, k) = best_op(table, edge_index(step, src));
                (w, src, k)
            })
            .collect();
        // Stable sort keeps lower sources first among equal weights.
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut kept: Vec<(usize, PrimitiveKind)> = ranked[..2].iter().map(|&(_, s, k)| (s, k)).collect();
        kept.sort_by_key(|&(s, _)| s);
        cell.extend(kept);
    }
    cell
}

/// Top-2 incoming edges per step by their strongest non-zero weight, each
/// carrying its argmax non-zero op.
pub fn derive_genotype(alphas: &AlphaStore, init_channels: usize, depth: usize) -> Genotype {
    Genotype {
        normal: derive_cell(&alphas.normal),
        reduce: derive_cell(&alphas.reduce),
        init_channels,
        depth,
    }
}
