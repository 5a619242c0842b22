//! Reference implementations used only by tests.
//!
//! Everything here recomputes results the main crate produces, but along an
//! independent path: exact rational arithmetic for quantizers and tiled
//! products, float64 twins and central differences for gradients. Tests
//! compare the two paths; agreement is the evidence.

pub mod gemm;
pub mod rational;
pub mod twin;
