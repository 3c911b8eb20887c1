//! Minimal reverse-mode autodiff over dense `f64` matrices.
//!
//! A [`Graph`] records operations eagerly; [`Graph::backward`] returns a
//! gradient per recorded parameter. Parameters live in a [`ParamStore`] by
//! name and are updated between steps by [`Adam`]. [`finite_diff_check`]
//! verifies gradients against central differences.
//!
//! ```
//! use numcore::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::new();
//! store.insert("x", Tensor::scalar(3.0));
//! let mut g = Graph::new();
//! let x = g.param(&store, "x").unwrap();
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get("x").unwrap().data(), &[6.0]);
//! ```

pub mod check;
pub mod error;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use check::{finite_diff_check, finite_diff_report, relative_error, FdReport};
pub use error::{NumError, Result};
pub use nn::{multihead_attention, Attention};
pub use optim::{Adam, AdamConfig};
pub use params::{Gradients, ParamStore};
pub use tape::{bce_sum, sigmoid, Graph, Var};
pub use tensor::Tensor;
