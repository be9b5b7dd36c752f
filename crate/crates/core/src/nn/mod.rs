//! Trainable-function substrate shared by every learned component.

pub mod archive;
pub mod graph;
pub mod layers;
pub mod params;

pub use archive::Archive;
pub use graph::{Gradients, Graph, Tensor, Var};
pub use layers::{Activation, Gru, Linear, Mlp};
pub use params::{grad_check, soft_update, AdamW, AdamWConfig, ParamSet};

/// Stack row vectors into an `n×d` matrix.
pub fn stack_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        assert_eq!(r.len(), dim, "row width");
        data.extend_from_slice(r);
        n += 1;
    }
    Tensor::from_shape_vec((n, dim), data).expect("row-major buffer")
}
