use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Reduction of per-token encoder outputs to one vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingStrategy {
    /// Output row of the leading `[CLS]` token.
    Cls,
    /// Mean over non-padding rows.
    Mean,
    /// Per-dimension maximum over non-padding rows.
    Max,
}

impl std::str::FromStr for PoolingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cls" => Ok(Self::Cls),
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            other => Err(Error::InvalidConfig(format!("unknown pooling strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for PoolingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cls => "cls",
            Self::Mean => "mean",
            Self::Max => "max",
        })
    }
}

/// Pools `hidden[T×d]` on the tape. Special-token rows count as words;
/// only padding (mask 0) is excluded.
pub fn pool_on_tape(tape: &mut Tape, hidden: Var, mask: &[u8], strategy: PoolingStrategy) -> Result<Var> {
    let (t, _) = tape.value(hidden).dims2()?;
    if t == 0 || mask.len() != t {
        return Err(Error::ShapeMismatch(format!("{} mask entries for {t} rows", mask.len())));
    }
    let real = mask.iter().filter(|&&m| m != 0).count();
    if real == 0 {
        return Err(Error::AllMasked);
    }
    match strategy {
        PoolingStrategy::Cls => tape.row(hidden, 0),
        PoolingStrategy::Mean => {
            let w = 1.0 / real as f64;
            let weights = mask.iter().map(|&m| if m != 0 { w } else { 0.0 }).collect();
            tape.weighted_row_sum(hidden, weights)
        }
        PoolingStrategy::Max => {
            let keep: Vec<bool> = mask.iter().map(|&m| m != 0).collect();
            tape.masked_max_rows(hidden, &keep)
        }
    }
}

/// Tensor-level pooling.
pub fn pool(hidden: &Tensor, mask: &[u8], strategy: PoolingStrategy) -> Result<Tensor> {
    let mut tape = Tape::new();
    let h = tape.constant(hidden.clone());
    let out = pool_on_tape(&mut tape, h, mask, strategy)?;
    Ok(tape.value(out).clone())
}
