//! Residual multi-head attention between hint and instance descriptors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, ParamStore, Tape, Var};

/// One attention layer: per-head query/key/value projections
/// `{prefix}.q{h}` etc. of shape `[dim, dim / heads]`, and an output map
/// `{prefix}.o` / `{prefix}.ob` added back onto the queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub prefix: String,
    pub heads: usize,
}

impl AttentionLayer {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let hd = dim / heads;
        for h in 0..heads {
            for kind in ["q", "k", "v"] {
                store.init_glorot(&format!("{prefix}.{kind}{h}"), dim, hd, rng);
            }
        }
        store.init_glorot(&format!("{prefix}.o"), dim, dim, rng);
        store.init_zeros(&format!("{prefix}.ob"), 1, dim);
        Self {
            prefix: prefix.to_string(),
            heads,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for h in 0..self.heads {
            for kind in ["q", "k", "v"] {
                out.push(format!("{}.{kind}{h}", self.prefix));
            }
        }
        out.push(format!("{}.o", self.prefix));
        out.push(format!("{}.ob", self.prefix));
        out
    }

    /// `x + concat_h(attn(x Wq_h, y Wk_h, y Wv_h)) Wo + bo`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        y: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var, NumericsError> {
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let wq = tape.param(store, &format!("{}.q{h}", self.prefix))?;
            let wk = tape.param(store, &format!("{}.k{h}", self.prefix))?;
            let wv = tape.param(store, &format!("{}.v{h}", self.prefix))?;
            let q = tape.matmul(x, wq)?;
            let k = tape.matmul(y, wk)?;
            let v = tape.matmul(y, wv)?;
            heads.push(tape.attention(q, k, v, key_mask)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let wo = tape.param(store, &format!("{}.o", self.prefix))?;
        let bo = tape.param(store, &format!("{}.ob", self.prefix))?;
        let msg = tape.linear(cat, wo, bo)?;
        tape.add(x, msg)
    }

    /// Zeroes the output map so the layer is the identity.
    pub fn zero_output(&self, store: &mut ParamStore) {
        for name in [format!("{}.o", self.prefix), format!("{}.ob", self.prefix)] {
            if let Some(t) = store.get_mut(&name) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Self-attention on hints, self-attention on instances, then cross
/// attention in both directions from the post-self states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub hint_self: AttentionLayer,
    pub inst_self: AttentionLayer,
    pub hint_cross: AttentionLayer,
    pub inst_cross: AttentionLayer,
}

impl AttentionBlock {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            hint_self: AttentionLayer::init(store, &format!("{prefix}.hself"), dim, heads, rng),
            inst_self: AttentionLayer::init(store, &format!("{prefix}.iself"), dim, heads, rng),
            hint_cross: AttentionLayer::init(store, &format!("{prefix}.h2i"), dim, heads, rng),
            inst_cross: AttentionLayer::init(store, &format!("{prefix}.i2h"), dim, heads, rng),
        }
    }

    pub fn layers(&self) -> [&AttentionLayer; 4] {
        [&self.hint_self, &self.inst_self, &self.hint_cross, &self.inst_cross]
    }
}

/// Runs every block. `inst_keep[i] == false` hides instance `i` as a key.
pub fn attend(
    tape: &mut Tape,
    store: &ParamStore,
    blocks: &[AttentionBlock],
    hints: Var,
    insts: Var,
    inst_keep: &[bool],
) -> Result<(Var, Var), NumericsError> {
    let (mut h, mut p) = (hints, insts);
    for b in blocks {
        let h1 = b.hint_self.forward(tape, store, h, h, None)?;
        let p1 = b.inst_self.forward(tape, store, p, p, Some(inst_keep))?;
        h = b.hint_cross.forward(tape, store, h1, p1, Some(inst_keep))?;
        p = b.inst_cross.forward(tape, store, p1, h1, None)?;
    }
    Ok((h, p))
}
