//! Generalized tensor networks for supervised learning.
//!
//! A model maps an input grid to `K` class scores by contracting a network
//! of site tensors, each fed with a per-variable feature vector. Supported
//! layouts are open matrix product states, string-bond states (rows and
//! columns, or four snakes), entangled plaquette states with a linear head,
//! a plaquette layer feeding a snake string-bond layer, and the string-bond
//! form of a restricted Boltzmann machine.
//!
//! ```
//! use gtn::network::{build, ArchitectureKind, ArchitectureSpec};
//! use gtn::eval::posterior;
//!
//! let spec = ArchitectureSpec::new(ArchitectureKind::SbsSnake, [3, 3], 2, 4);
//! let model = build(&spec, 7).unwrap();
//! let post = posterior(&model, &[0.5; 9]).unwrap();
//! assert!((post.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
//! ```

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod network;
pub mod oracle;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
