use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Element type accepted by tensors and the layer math.
///
/// Everything numeric in the engine is written against this trait so the
/// same code runs in `f32` (the production precision) and `f64` (used by
/// the stricter gradient-check oracles).
pub trait Scalar:
    Float + NumAssignOps + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, used when seeding values from config
    /// or RNG streams that are defined in double precision.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any float scalar")
    }

    /// Widening conversion used by loss accumulators and reports.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
