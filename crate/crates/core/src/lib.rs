//! Event-pixel model: special functions, photovoltage front end, OU exit
//! problems, event streams, the deterministic recursion and analysis tools.

pub mod analysis;
pub mod dynamics;
pub mod error;
pub mod event_stream;
pub mod interp;
pub mod ou_exit;
pub mod photovoltage;
pub mod rng;
pub mod specfun;
