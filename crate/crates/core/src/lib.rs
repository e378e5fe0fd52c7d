//! Pointer-authentication based control-flow integrity toolchain: pointer
//! codec, miniature IR, function pointer identification, instrumentation,
//! a PA-capable machine simulator and an adversary harness.

pub mod adversary;
pub mod analysis;
pub mod codec;
pub mod harness;
pub mod instrument;
pub mod ir;
pub mod isa;
pub mod machine;
