//! Model configuration, parameter state, checkpointing, and the shared
//! transformer building blocks (attention, feed-forward, layer norm).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Value};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_mult: 4,
            vocab_size: 0,
        }
    }
}

/// Architecture-level configuration. Ablation switches change which
/// parameters exist, so they are part of the checkpointed architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc: EncoderConfig,
    pub max_post_len: usize,
    pub max_resp_len: usize,
    pub max_triple_len: usize,
    /// Knowledge aggregation on/off; off makes the decoder memory the post
    /// states alone.
    pub ca_gat: bool,
    /// Replace attention aggregation with plain mean pooling of flattened
    /// triple features.
    pub mean_pool_aggregation: bool,
    /// Expand and aggregate two-hop knowledge.
    pub two_hop: bool,
    /// Allocate the entity-selection heads (auxiliary loss).
    pub es_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc: EncoderConfig::default(),
            max_post_len: 64,
            max_resp_len: 32,
            max_triple_len: 8,
            ca_gat: true,
            mean_pool_aggregation: false,
            two_hop: false,
            es_heads: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enc.d_model == 0 || self.enc.n_heads == 0 || self.enc.n_layers == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.enc.d_model % self.enc.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.enc.d_model, self.enc.n_heads
            )));
        }
        if self.enc.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be set".into()));
        }
        Ok(())
    }

    pub fn max_positions(&self) -> usize {
        (self.max_post_len + 1).max(self.max_resp_len + 1)
    }

    /// Expected parameter names and shapes, sorted by name.
    pub fn expected_arrays(&self) -> BTreeMap<String, Vec<usize>> {
        let d = self.enc.d_model;
        let f = d * self.enc.ffn_mult;
        let v = self.enc.vocab_size;
        let mut out = BTreeMap::new();
        let mut put = |name: String, shape: Vec<usize>| {
            out.insert(name, shape);
        };
        put("embed.table".into(), vec![v, d]);
        put("embed.pos".into(), vec![self.max_positions(), d]);
        for i in 0..self.enc.n_layers {
            for p in [format!("enc{i}.attn")] {
                for w in ["wq", "wk", "wv", "wo"] {
                    put(format!("{p}.{w}"), vec![d, d]);
                }
                for b in ["bq", "bk", "bv", "bo"] {
                    put(format!("{p}.{b}"), vec![d]);
                }
            }
            for ln in ["ln1", "ln2"] {
                put(format!("enc{i}.{ln}.g"), vec![d]);
                put(format!("enc{i}.{ln}.b"), vec![d]);
            }
            put(format!("enc{i}.ffn.w1"), vec![d, f]);
            put(format!("enc{i}.ffn.b1"), vec![f]);
            put(format!("enc{i}.ffn.w2"), vec![f, d]);
            put(format!("enc{i}.ffn.b2"), vec![d]);
        }
        for i in 0..self.enc.n_layers {
            for p in [format!("dec{i}.self"), format!("dec{i}.cross")] {
                for w in ["wq", "wk", "wv", "wo"] {
                    put(format!("{p}.{w}"), vec![d, d]);
                }
                for b in ["bq", "bk", "bv", "bo"] {
                    put(format!("{p}.{b}"), vec![d]);
                }
            }
            for ln in ["ln1", "ln2", "ln3"] {
                put(format!("dec{i}.{ln}.g"), vec![d]);
                put(format!("dec{i}.{ln}.b"), vec![d]);
            }
            put(format!("dec{i}.ffn.w1"), vec![d, f]);
            put(format!("dec{i}.ffn.b1"), vec![f]);
            put(format!("dec{i}.ffn.w2"), vec![f, d]);
            put(format!("dec{i}.ffn.b2"), vec![d]);
        }
        put("out.w".into(), vec![d, v]);
        if self.ca_gat {
            put("null_root".into(), vec![d]);
            if !self.mean_pool_aggregation {
                put("gat.w_g".into(), vec![2 * d]);
                put("gat.w_gsub".into(), vec![2 * d]);
                if self.two_hop {
                    put("gat.w_g2".into(), vec![3 * d]);
                    put("gat.w_gsub2".into(), vec![3 * d]);
                }
            }
            if self.es_heads {
                put("es.w_tau".into(), vec![d, 2]);
                put("es.w_g".into(), vec![d, 2]);
            }
        }
        out
    }
}

/// All trainable parameters plus the architecture that shaped them.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(seed);
        for (name, shape) in config.expected_arrays() {
            if name.ends_with(".g") && name.contains(".ln") {
                params.add_ones(&name, shape)?;
            } else if name.ends_with(".b") && name.contains(".ln") {
                params.add_zeros(&name, shape)?;
            } else if name.contains(".b") && !name.contains(".w") {
                // attention/ffn biases start at zero
                params.add_zeros(&name, shape)?;
            } else {
                let fan_in = shape[0];
                params.add_uniform(&name, shape, fan_in)?;
            }
        }
        Ok(ModelState { config, params })
    }

    /// Verify the parameter set matches what the config implies.
    pub fn validate_shapes(&self) -> Result<()> {
        let expected = self.config.expected_arrays();
        for (name, shape) in &expected {
            match self.params.get(name) {
                None => {
                    return Err(Error::Checkpoint(format!("missing array {name:?}")));
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "array {name:?} has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )));
                }
                _ => {}
            }
        }
        for name in self.params.names() {
            if !expected.contains_key(name) {
                return Err(Error::Checkpoint(format!("unexpected array {name:?}")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Checkpoint container: one-line JSON manifest, then raw little-endian f64.
// ---------------------------------------------------------------------------

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Offset in elements from the start of the data block.
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    seed: u64,
    config: ModelConfig,
    arrays: Vec<ArrayEntry>,
}

pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<()> {
    let mut arrays = Vec::new();
    let mut offset = 0usize;
    for (name, t) in model.params.iter() {
        arrays.push(ArrayEntry {
            name: name.to_string(),
            dtype: "f64".into(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        seed: model.params.seed(),
        config: model.config.clone(),
        arrays,
    };
    let mut bytes = serde_json::to_string(&manifest)
        .map_err(|e| Error::Checkpoint(e.to_string()))?
        .into_bytes();
    bytes.push(b'\n');
    for (_, t) in model.params.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&bytes).map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing manifest line".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let blob = &bytes[newline + 1..];
    let total: usize = manifest.arrays.iter().map(|a| a.len).sum();
    if blob.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "data block has {} bytes, manifest implies {}",
            blob.len(),
            total * 8
        )));
    }
    let mut params = ParamStore::new(manifest.seed);
    for entry in &manifest.arrays {
        if entry.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "array {:?} has unsupported dtype {:?}",
                entry.name, entry.dtype
            )));
        }
        let n: usize = entry.shape.iter().product();
        if n != entry.len {
            return Err(Error::Checkpoint(format!(
                "array {:?}: shape {:?} inconsistent with len {}",
                entry.name, entry.shape, entry.len
            )));
        }
        let start = entry.offset * 8;
        let end = start + entry.len * 8;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "array {:?} extends past the data block",
                entry.name
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| Error::Checkpoint(format!("array {:?}: {e}", entry.name)))?;
        params
            .insert(&entry.name, tensor)
            .map_err(|e| Error::Checkpoint(format!("array {:?}: {e}", entry.name)))?;
    }
    let model = ModelState {
        config: manifest.config,
        params,
    };
    model.validate_shapes()?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Transformer building blocks.
// ---------------------------------------------------------------------------

const NEG_MASK: f64 = -1e30;

pub(crate) fn linear(
    g: &mut Graph,
    store: &ParamStore,
    x: Value,
    w_name: &str,
    b_name: &str,
) -> Result<Value> {
    let w = g.param(store, w_name);
    let b = g.param(store, b_name);
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

fn layer_norm_named(g: &mut Graph, store: &ParamStore, x: Value, prefix: &str) -> Result<Value> {
    let gain = g.param(store, &format!("{prefix}.g"));
    let bias = g.param(store, &format!("{prefix}.b"));
    g.layer_norm(x, gain, bias)
}

fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            data[i * n + j] = NEG_MASK;
        }
    }
    Tensor::matrix(n, n, data).expect("mask shape")
}

/// Multi-head attention with queries from `x` and keys/values from `kv`.
pub(crate) fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Value,
    kv: Value,
    causal: bool,
    n_heads: usize,
) -> Result<Value> {
    let (n, d) = g.value(x).dims2();
    let dh = d / n_heads;
    let q = linear(g, store, x, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
    let k = linear(g, store, kv, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
    let v = linear(g, store, kv, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
    let mask = if causal {
        Some(g.constant(causal_mask(n)))
    } else {
        None
    };
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.cols(q, h * dh, dh)?;
        let kh = g.cols(k, h * dh, dh)?;
        let vh = g.cols(v, h * dh, dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        let mut scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            scaled = g.add(scaled, m)?;
        }
        let attn = g.row_softmax(scaled)?;
        heads.push(g.matmul(attn, vh)?);
    }
    let ctx = g.concat_cols(&heads)?;
    linear(
        g,
        store,
        ctx,
        &format!("{prefix}.wo"),
        &format!("{prefix}.bo"),
    )
}

fn feed_forward(g: &mut Graph, store: &ParamStore, prefix: &str, x: Value) -> Result<Value> {
    let h = linear(g, store, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
    let a = g.gelu(h);
    linear(g, store, a, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
}

/// Pre-norm encoder block: x += MHA(LN(x)); x += FFN(LN(x)).
pub(crate) fn encoder_block(
    g: &mut Graph,
    store: &ParamStore,
    layer: usize,
    x: Value,
    n_heads: usize,
) -> Result<Value> {
    let p = format!("enc{layer}");
    let normed = layer_norm_named(g, store, x, &format!("{p}.ln1"))?;
    let attn = multi_head_attention(g, store, &format!("{p}.attn"), normed, normed, false, n_heads)?;
    let x = g.add(x, attn)?;
    let normed = layer_norm_named(g, store, x, &format!("{p}.ln2"))?;
    let ff = feed_forward(g, store, &format!("{p}.ffn"), normed)?;
    g.add(x, ff)
}

/// Pre-norm decoder block: causal self-attention, cross-attention over the
/// memory, then feed-forward.
pub(crate) fn decoder_block(
    g: &mut Graph,
    store: &ParamStore,
    layer: usize,
    x: Value,
    memory: Value,
    n_heads: usize,
) -> Result<Value> {
    let p = format!("dec{layer}");
    let normed = layer_norm_named(g, store, x, &format!("{p}.ln1"))?;
    let attn = multi_head_attention(g, store, &format!("{p}.self"), normed, normed, true, n_heads)?;
    let x = g.add(x, attn)?;
    let normed = layer_norm_named(g, store, x, &format!("{p}.ln2"))?;
    let cross = multi_head_attention(
        g,
        store,
        &format!("{p}.cross"),
        normed,
        memory,
        false,
        n_heads,
    )?;
    let x = g.add(x, cross)?;
    let normed = layer_norm_named(g, store, x, &format!("{p}.ln3"))?;
    let ff = feed_forward(g, store, &format!("{p}.ffn"), normed)?;
    g.add(x, ff)
}

/// Token + positional embedding for a token id sequence.
pub(crate) fn embed_sequence(
    g: &mut Graph,
    store: &ParamStore,
    ids: &[usize],
) -> Result<Value> {
    let table = g.param(store, "embed.table");
    let pos = g.param(store, "embed.pos");
    let tok = g.embedding(table, ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pe = g.embedding(pos, &positions)?;
    g.add(tok, pe)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            enc: EncoderConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                ffn_mult: 2,
                vocab_size: 12,
            },
            max_post_len: 6,
            max_resp_len: 5,
            max_triple_len: 4,
            ca_gat: true,
            mean_pool_aggregation: false,
            two_hop: true,
            es_heads: true,
        }
    }

    #[test]
    fn state_matches_expected_arrays() {
        let ms = ModelState::new(tiny_config(), 1).unwrap();
        ms.validate_shapes().unwrap();
        assert!(ms.params.contains("gat.w_g2"));
        assert!(ms.params.contains("es.w_tau"));
        assert!(ms.params.contains("null_root"));
    }

    #[test]
    fn ablations_change_parameter_set() {
        let mut cfg = tiny_config();
        cfg.ca_gat = false;
        let ms = ModelState::new(cfg, 1).unwrap();
        assert!(!ms.params.contains("gat.w_g"));
        assert!(!ms.params.contains("es.w_tau"));
        assert!(!ms.params.contains("null_root"));

        let mut cfg = tiny_config();
        cfg.mean_pool_aggregation = true;
        cfg.two_hop = false;
        let ms = ModelState::new(cfg, 1).unwrap();
        assert!(!ms.params.contains("gat.w_g"));
        assert!(ms.params.contains("es.w_tau"));
        assert!(ms.params.contains("null_root"));
    }

    #[test]
    fn head_divisibility_enforced() {
        let mut cfg = tiny_config();
        cfg.enc.n_heads = 3;
        assert!(ModelState::new(cfg, 1).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let ms = ModelState::new(tiny_config(), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&ms, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
        for (name, t) in ms.params.iter() {
            assert_eq!(t.data(), loaded.params.get(name).unwrap().data());
        }
    }

    #[test]
    fn corrupt_manifest_is_rejected() {
        let ms = ModelState::new(tiny_config(), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&ms, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[1] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_data_is_rejected() {
        let ms = ModelState::new(tiny_config(), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        save_checkpoint(&ms, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 16]).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
