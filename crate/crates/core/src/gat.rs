//! Context-aware graph attention: two forward layers aggregating triple
//! features into per-subgraph roots and a global root, plus the two-hop
//! variants conditioned on the one-hop root.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Value};

/// Attention weights recorded during aggregation, detached from the tape.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    /// Per subgraph: (triple id, first-layer weight a_j).
    pub per_subgraph: Vec<Vec<(usize, f64)>>,
    /// Second-layer weight per subgraph.
    pub top_level: Vec<f64>,
    /// Two-hop analogues when present.
    pub two_hop_per_subgraph: Vec<Vec<(usize, f64)>>,
    pub two_hop_top_level: Vec<f64>,
}

/// First forward layer: score each triple by a linear map of
/// `[E_tau; emb_c]`, softmax within the subgraph, and pool to the root.
/// Returns the root and the attention weights node.
pub fn aggregate_subgraph(
    g: &mut Graph,
    triple_embs: &[Value],
    emb_c: Value,
    w_g: Value,
) -> Result<(Value, Value)> {
    if triple_embs.is_empty() {
        return Err(Error::invalid("aggregate_subgraph: empty triple list"));
    }
    let scored: Result<Vec<Value>> = triple_embs
        .iter()
        .map(|&e| g.concat(e, emb_c))
        .collect();
    let rows = g.stack_rows(&scored?)?;
    let beta = g.matvec(rows, w_g)?;
    let attn = g.softmax(beta)?;
    let emb_matrix = g.stack_rows(triple_embs)?;
    let root = g.vecmat(attn, emb_matrix)?;
    Ok((root, attn))
}

/// Second forward layer: same scheme over subgraph roots.
pub fn aggregate_graph(
    g: &mut Graph,
    roots: &[Value],
    emb_c: Value,
    w_gsub: Value,
) -> Result<(Value, Value)> {
    if roots.is_empty() {
        return Err(Error::invalid("aggregate_graph: empty root list"));
    }
    aggregate_subgraph(g, roots, emb_c, w_gsub)
}

/// Two-hop aggregation: both layers score three-way concatenations
/// `[node; rt_one; emb_c]`. Returns the two-hop root, per-subgraph attention
/// nodes, and the top-level attention node.
pub fn aggregate_two_hop(
    g: &mut Graph,
    grouped_triple_embs: &[Vec<Value>],
    rt_one: Value,
    emb_c: Value,
    w_g2: Value,
    w_gsub2: Value,
) -> Result<(Value, Vec<Value>, Value)> {
    if grouped_triple_embs.is_empty() || grouped_triple_embs.iter().any(|g| g.is_empty()) {
        return Err(Error::invalid("aggregate_two_hop: empty two-hop set"));
    }
    let mut roots = Vec::with_capacity(grouped_triple_embs.len());
    let mut attns = Vec::with_capacity(grouped_triple_embs.len());
    for group in grouped_triple_embs {
        let scored: Result<Vec<Value>> = group
            .iter()
            .map(|&e| g.concat3(e, rt_one, emb_c))
            .collect();
        let rows = g.stack_rows(&scored?)?;
        let beta = g.matvec(rows, w_g2)?;
        let attn = g.softmax(beta)?;
        let emb_matrix = g.stack_rows(group)?;
        roots.push(g.vecmat(attn, emb_matrix)?);
        attns.push(attn);
    }
    let scored: Result<Vec<Value>> = roots
        .iter()
        .map(|&r| g.concat3(r, rt_one, emb_c))
        .collect();
    let rows = g.stack_rows(&scored?)?;
    let beta = g.matvec(rows, w_gsub2)?;
    let top_attn = g.softmax(beta)?;
    let root_matrix = g.stack_rows(&roots)?;
    let rt_two = g.vecmat(top_attn, root_matrix)?;
    Ok((rt_two, attns, top_attn))
}
