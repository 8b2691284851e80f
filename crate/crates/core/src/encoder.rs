//! Post encoder (shared embedding + small transformer) and flattened-triple
//! embedding.

use crate::error::{Error, Result};
use crate::model::{embed_sequence, encoder_block, ModelState};
use crate::numerics::{Graph, Value};
use crate::text::CLS_ID;

/// Encoder output: all token states (row 0 is the [CLS] position) and the
/// context vector, which is row 0.
pub struct PostEncoding {
    pub token_states: Value,
    pub emb_c: Value,
    /// Number of rows, i.e. post length + 1.
    pub rows: usize,
}

/// Encode `[CLS] + post` through the transformer stack. Over-length input is
/// an error; callers truncate explicitly.
pub fn encode_post(g: &mut Graph, model: &ModelState, token_ids: &[usize]) -> Result<PostEncoding> {
    if token_ids.is_empty() {
        return Err(Error::invalid("encode_post: empty post"));
    }
    if token_ids.len() > model.config.max_post_len {
        return Err(Error::invalid(format!(
            "encode_post: {} tokens exceeds max post length {}",
            token_ids.len(),
            model.config.max_post_len
        )));
    }
    let mut ids = Vec::with_capacity(token_ids.len() + 1);
    ids.push(CLS_ID);
    ids.extend_from_slice(token_ids);

    let mut x = embed_sequence(g, &model.params, &ids)?;
    for layer in 0..model.config.enc.n_layers {
        x = encoder_block(g, &model.params, layer, x, model.config.enc.n_heads)?;
    }
    let emb_c = g.row(x, 0)?;
    Ok(PostEncoding {
        token_states: x,
        emb_c,
        rows: ids.len(),
    })
}

/// Embed a flattened triple: look the `[h; r; t]` tokens up in the shared
/// embedding table (no contextual layers) and mean-pool to one vector.
pub fn embed_triple(g: &mut Graph, model: &ModelState, triple_token_ids: &[usize]) -> Result<Value> {
    if triple_token_ids.is_empty() {
        return Err(Error::invalid("embed_triple: empty token sequence"));
    }
    let ids = if triple_token_ids.len() > model.config.max_triple_len {
        &triple_token_ids[..model.config.max_triple_len]
    } else {
        triple_token_ids
    };
    let table = g.param(&model.params, "embed.table");
    let embs = g.embedding(table, ids)?;
    g.mean_rows(embs)
}
