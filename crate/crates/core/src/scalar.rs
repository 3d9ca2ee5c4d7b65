//! Scalar abstraction: the whole crate is generic over the floating-point
//! type through [`Real`].

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar: `f32` or `f64`.
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + NumAssignOps + Debug + Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 not representable in this scalar type")
    }

    fn to_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar not representable as f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
