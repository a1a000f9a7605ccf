use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CellKind, EDGES};
use crate::cost::softmax_f64;
use crate::error::{Error, Result};
use crate::primitives::PrimitiveKind;
use crate::rng::Rng;

pub const ALPHA_INIT_SCALE: f32 = 1e-3;
pub const ALPHA_SCHEMA_VERSION: u32 = 1;

/// Architecture logits of one cell type: 14 rows of K candidates each.
///
/// Row `e` lists the candidate kinds still alive on edge `e` (in kind order)
/// and one logit per candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TableDoc", into = "TableDoc")]
pub struct AlphaTable {
    ops: Vec<Vec<PrimitiveKind>>,
    values: Vec<Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
struct TableDoc {
    ops: Vec<Vec<String>>,
    values: Vec<Vec<f32>>,
}

impl TryFrom<TableDoc> for AlphaTable {
    type Error = Error;
    fn try_from(doc: TableDoc) -> Result<Self> {
        let ops = doc
            .ops
            .iter()
            .map(|row| row.iter().map(|s| s.parse()).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        AlphaTable::new(ops, doc.values)
    }
}

impl From<AlphaTable> for TableDoc {
    fn from(t: AlphaTable) -> Self {
        TableDoc {
            ops: t
                .ops
                .iter()
                .map(|row| row.iter().map(|k| k.name().to_string()).collect())
                .collect(),
            values: t.values,
        }
    }
}

impl AlphaTable {
    pub fn new(ops: Vec<Vec<PrimitiveKind>>, values: Vec<Vec<f32>>) -> Result<Self> {
        if ops.len() != EDGES || values.len() != EDGES {
            return Err(Error::Input(format!(
                "alpha table needs {EDGES} rows, got {} op rows and {} value rows",
                ops.len(),
                values.len()
            )));
        }
        let k = ops[0].len();
        for (e, (row, vals)) in ops.iter().zip(&values).enumerate() {
            if row.is_empty() || row.len() != k || vals.len() != k {
                return Err(Error::Input(format!(
                    "edge {e}: expected {k} candidates and logits, got {} and {}",
                    row.len(),
                    vals.len()
                )));
            }
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Input(format!("edge {e}: candidates must be distinct and in canonical order")));
            }
            if row.iter().all(|&op| op == PrimitiveKind::Zero) {
                return Err(Error::Input(format!("edge {e}: no non-zero candidate")));
            }
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    op: "alpha",
                    detail: format!("edge {e}: non-finite logit"),
                });
            }
        }
        Ok(AlphaTable { ops, values })
    }

    /// All eight candidates on every edge with logits `scale · N(0, 1)`.
    pub fn random(rng: &mut Rng, scale: f32) -> Self {
        let ops = vec![PrimitiveKind::ALL.to_vec(); EDGES];
        let values = (0..EDGES)
            .map(|_| {
                (0..PrimitiveKind::ALL.len())
                    .map(|_| scale * rng.sample::<f32, _>(StandardNormal))
                    .collect()
            })
            .collect();
        AlphaTable { ops, values }
    }

    /// All eight candidates with the given logits per edge.
    pub fn full(values: Vec<Vec<f32>>) -> Result<Self> {
        AlphaTable::new(vec![PrimitiveKind::ALL.to_vec(); EDGES], values)
    }

    /// Candidates per edge.
    pub fn k(&self) -> usize {
        self.ops[0].len()
    }

    pub fn ops(&self, edge: usize) -> &[PrimitiveKind] {
        &self.ops[edge]
    }

    pub fn values(&self, edge: usize) -> &[f32] {
        &self.values[edge]
    }

    pub fn probs(&self, edge: usize) -> Vec<f64> {
        let v: Vec<f64> = self.values[edge].iter().map(|&x| x as f64).collect();
        softmax_f64(&v)
    }

    pub fn flat_values(&self) -> Vec<f32> {
        self.values.iter().flatten().copied().collect()
    }

    /// Same candidates, new row-major logits.
    pub(crate) fn with_flat_values(&self, flat: &[f32]) -> Result<Self> {
        let k = self.k();
        if flat.len() != EDGES * k {
            return Err(Error::dim("alpha", format!("{} values for a 14x{k} table", flat.len())));
        }
        AlphaTable::new(self.ops.clone(), flat.chunks(k).map(<[f32]>::to_vec).collect())
    }

    pub fn num_params(&self) -> usize {
        EDGES * self.k()
    }
}

/// Architecture logits for both cell types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaStore {
    pub normal: AlphaTable,
    pub reduce: AlphaTable,
}

#[derive(Serialize, Deserialize)]
struct SnapshotDoc {
    schema_version: u32,
    normal: AlphaTable,
    reduce: AlphaTable,
}

impl AlphaStore {
    pub fn new(normal: AlphaTable, reduce: AlphaTable) -> Result<Self> {
        if normal.k() != reduce.k() {
            return Err(Error::Input(format!(
                "normal and reduce tables differ in candidate count ({} vs {})",
                normal.k(),
                reduce.k()
            )));
        }
        Ok(AlphaStore { normal, reduce })
    }

    /// Near-uniform initial logits over all eight candidates.
    pub fn init(rng: &mut Rng) -> Self {
        let normal = AlphaTable::random(rng, ALPHA_INIT_SCALE);
        let reduce = AlphaTable::random(rng, ALPHA_INIT_SCALE);
        AlphaStore { normal, reduce }
    }

    pub fn table(&self, kind: CellKind) -> &AlphaTable {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduce => &self.reduce,
        }
    }

    pub fn k(&self) -> usize {
        self.normal.k()
    }

    pub fn num_params(&self) -> usize {
        self.normal.num_params() + self.reduce.num_params()
    }

    /// First 16 hex digits of SHA-256 over candidates and logit bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in [&self.normal, &self.reduce] {
            for (ops, vals) in t.ops.iter().zip(&t.values) {
                h.update(ops.iter().map(|k| k.index() as u8).collect::<Vec<_>>());
                for v in vals {
                    h.update(v.to_le_bytes());
                }
            }
        }
        let bytes = h.finalize();
        bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = SnapshotDoc {
            schema_version: ALPHA_SCHEMA_VERSION,
            normal: self.normal.clone(),
            reduce: self.reduce.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SnapshotDoc = serde_json::from_str(text)?;
        if doc.schema_version != ALPHA_SCHEMA_VERSION {
            return Err(Error::Input(format!(
                "unsupported alpha snapshot schema_version {}",
                doc.schema_version
            )));
        }
        AlphaStore::new(doc.normal, doc.reduce)
    }
}
