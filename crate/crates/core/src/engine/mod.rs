//! Reverse-mode differentiation over the model's closed set of primitives,
//! plus the Adam optimizer.

pub mod adam;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, Group, ParamGroup, Update};
pub use tape::{softmax_rows, Gradients, ParamId, Slot, Stencil, Tape};
pub use tensor::{Matrix, Real};

/// Sums per-chunk gradient sets with a fixed pairwise tree, so the result
/// depends only on the chunk layout and never on scheduling.
pub fn tree_reduce<T: Real>(mut parts: Vec<Vec<Matrix<T>>>) -> Option<Vec<Matrix<T>>> {
    if parts.is_empty() {
        return None;
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    x.add_assign(y);
                }
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop()
}
