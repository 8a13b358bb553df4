//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Everything runs in `f64`. Ops are recorded on a [`Graph`]; parameters live
//! in a [`ParamStore`] and enter a graph through [`Graph::param`].

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod param;
mod tensor;

pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
pub use graph::{AttentionLayout, Fault, Gradients, Graph, Var};
pub use param::{ParamGroup, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use crate::error::Result;

/// Layer-norm epsilon used by every model block.
pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Graph {
    /// `x * w + b` for `x: [n, in]`, `w: [in, out]`, `b: [1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_tiled(y, b),
            None => Ok(y),
        }
    }

    /// Position-wise feed-forward block `gelu(x w1 + b1) w2 + b2`.
    pub fn feed_forward(&mut self, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
        let h = self.linear(x, w1, Some(b1))?;
        let h = self.gelu(h)?;
        self.linear(h, w2, Some(b2))
    }

    /// Unfused attention built from primitive ops (slices, matmuls, masked
    /// softmax). Same contract as [`Graph::attention`]; the fused op must
    /// agree with it to rounding error.
    pub fn attention_composite(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
    ) -> Result<Var> {
        let d = self.value(q).last_dim();
        if layout.heads == 0 || d % layout.heads != 0 {
            return Err(crate::Error::Shape(format!(
                "width {d} not divisible by {} heads",
                layout.heads
            )));
        }
        let dh = d / layout.heads;
        let mask = layout.causal.then(|| {
            let (tq, tk) = (layout.q_len, layout.kv_len);
            let mut m = Tensor::zeros(&[tq, tk]);
            for i in 0..tq {
                for j in (i + 1 + tk - tq)..tk {
                    m.data_mut()[i * tk + j] = -1e30;
                }
            }
            self.input(m)
        });
        let mut rows = Vec::with_capacity(layout.batch);
        for b in 0..layout.batch {
            let kb = if layout.shared_kv { 0 } else { b };
            let qb = self.slice_rows(q, b * layout.q_len, layout.q_len)?;
            let kbv = self.slice_rows(k, kb * layout.kv_len, layout.kv_len)?;
            let vb = self.slice_rows(v, kb * layout.kv_len, layout.kv_len)?;
            let mut heads = Vec::with_capacity(layout.heads);
            for h in 0..layout.heads {
                let qh = self.slice_cols(qb, h * dh, dh)?;
                let kh = self.slice_cols(kbv, h * dh, dh)?;
                let vh = self.slice_cols(vb, h * dh, dh)?;
                let s = self.matmul_t(qh, false, kh, true)?;
                let mut s = self.scale(s, 1.0 / (dh as f64).sqrt())?;
                if let Some(m) = mask {
                    s = self.add(s, m)?;
                }
                let p = self.softmax(s, 1)?;
                heads.push(self.matmul(p, vh)?);
            }
            rows.push(self.concat_cols(&heads)?);
        }
        self.concat_rows(&rows)
    }
}
