//! Pointer-authentication based memory-safety sanitizer, emulated in software.

mod siphash;

pub mod memspace;
pub mod pacore;
pub mod runtime;
pub mod miniir;
pub mod instrument;
pub mod optpasses;
pub mod interp;
pub mod harness;
