pub mod augment;
pub mod domain;
pub mod error;
pub mod harness;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod phantom;
pub mod postproc;
pub mod seed;
pub mod ssl;
