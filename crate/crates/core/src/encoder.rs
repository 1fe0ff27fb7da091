//! Transformer encoders with two classification slots and per-layer
//! cross-modal query exchange.
//!
//! Every sequence starts with `[CLS, xCLS]`. In layer `n` each encoder
//! computes its queries from its own layer input; the query at position 0
//! (CLS) is exported *before* any substitution, and the query at position 1
//! (xCLS) is then overwritten with the CLS query exported by the other
//! encoder in the same layer. Keys and values are never touched, so xCLS
//! still serves as a key/value for the rest of its own sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexer::{EncodedSequence, TokenType, FIRST_TOKEN};
use crate::numerics::{AttentionLayout, Graph, ParamId, ParamStore, Tensor, Var, INIT_STD};

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const CLS_POS: usize = 0;
pub const XCLS_POS: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// 0 disables the token-type channel.
    pub type_vocab_size: usize,
    pub couple: bool,
}

impl EncoderConfig {
    /// Small default geometry: 2 layers, 2 heads, width 64.
    pub fn desk(vocab_size: usize, type_vocab_size: usize) -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_model: 64,
            d_ff: 128,
            max_len: 128,
            vocab_size,
            type_vocab_size,
            couple: true,
        }
    }

    /// Code-side defaults: type channel over every [`TokenType`].
    pub fn desk_code(vocab_size: usize) -> Self {
        Self::desk(vocab_size, TokenType::COUNT)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::config("encoder layers, heads, d_model and d_ff must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.max_len < 4 {
            return Err(Error::config("max_len must be at least 4"));
        }
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    pub token: ParamId,
    pub token_type: Option<ParamId>,
    pub position: ParamId,
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.normal(format!("{name}.w"), &[d_in, d_out], INIT_STD, rng)?,
            b: store.zeros(format!("{name}.b"), &[d_out])?,
        })
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.ones(format!("{name}.gain"), &[d])?,
            bias: store.zeros(format!("{name}.bias"), &[d])?,
        })
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
struct Layer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm1: Norm,
    ff1: Linear,
    ff2: Linear,
    norm2: Norm,
}

/// Token ids, types and masks of a batch of sequences cut to a common
/// length `seq`, flattened row-major (`batch * seq`).
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
    pub type_ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub real_lens: Vec<usize>,
}

impl SeqBatch {
    /// Stacks sequences, keeping only the first `max(used_len)` positions
    /// (everything after is padding in every member).
    pub fn new(seqs: &[&EncodedSequence]) -> Result<Self> {
        let seq = seqs.iter().map(|s| s.used_len()).max().unwrap_or(0);
        Self::with_len(seqs, seq)
    }

    /// Stacks sequences at their full encoded length.
    pub fn full(seqs: &[&EncodedSequence]) -> Result<Self> {
        let seq = seqs.iter().map(|s| s.max_len()).max().unwrap_or(0);
        Self::with_len(seqs, seq)
    }

    fn with_len(seqs: &[&EncodedSequence], seq: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let n = seqs.len() * seq;
        let mut out = SeqBatch {
            batch: seqs.len(),
            seq,
            ids: Vec::with_capacity(n),
            type_ids: Vec::with_capacity(n),
            mask: Vec::with_capacity(n),
            real_lens: Vec::with_capacity(seqs.len()),
        };
        for s in seqs {
            if s.max_len() < seq {
                return Err(Error::invalid(format!(
                    "sequence of length {} cannot fill a batch of length {seq}",
                    s.max_len()
                )));
            }
            out.ids.extend(s.ids[..seq].iter().map(|&i| i as usize));
            out.type_ids.extend(s.type_ids[..seq].iter().map(|&t| t as usize));
            out.mask.extend(s.attn_mask[..seq].iter().map(|&m| m == 1));
            out.real_lens.push(s.real_len);
        }
        Ok(out)
    }

    pub fn row(&self, b: usize, pos: usize) -> usize {
        b * self.seq + pos
    }

    /// Row indices of the real tokens of each sequence (pooling groups).
    pub fn token_rows(&self) -> Vec<Vec<usize>> {
        (0..self.batch)
            .map(|b| (0..self.real_lens[b]).map(|i| self.row(b, FIRST_TOKEN + i)).collect())
            .collect()
    }
}

/// Graph handles recorded for one layer of one encoder.
#[derive(Clone, Copy, Debug)]
pub struct LayerTap {
    /// Queries computed from the layer input, before any exchange.
    pub q_own: Var,
    /// Queries actually fed to attention.
    pub q_used: Var,
    pub k: Var,
    pub v: Var,
    pub attn: Var,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[batch * seq, d_model]` final hidden states.
    pub hidden: Var,
    pub batch: usize,
    pub seq: usize,
    pub taps: Vec<LayerTap>,
}

impl EncoderOutput {
    pub fn cls_row(&self, b: usize) -> usize {
        b * self.seq + CLS_POS
    }

    pub fn xcls_row(&self, b: usize) -> usize {
        b * self.seq + XCLS_POS
    }

    pub fn h_cls<'g>(&self, g: &'g Graph, b: usize) -> &'g [f64] {
        g.value(self.hidden).row(self.cls_row(b))
    }

    pub fn h_xcls<'g>(&self, g: &'g Graph, b: usize) -> &'g [f64] {
        g.value(self.hidden).row(self.xcls_row(b))
    }
}

/// Where an xCLS query comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuerySource {
    /// The layer's own query matrix.
    Own,
    /// Another encoder's query matrix, same layer.
    Foreign(Var),
}

/// Projected queries/keys/values of one layer, waiting for the exchange.
struct Projected {
    x: Var,
    q: Var,
    k: Var,
    v: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub name: String,
    pub config: EncoderConfig,
    pub tables: EmbeddingTables,
    layers: Vec<Layer>,
}

impl Encoder {
    /// Registers all parameters under `name.` in `store`.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        config: EncoderConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let tables = EmbeddingTables {
            token: store.normal(format!("{name}.emb.token"), &[config.vocab_size, d], INIT_STD, rng)?,
            token_type: if config.type_vocab_size > 0 {
                Some(store.normal(
                    format!("{name}.emb.type"),
                    &[config.type_vocab_size, d],
                    INIT_STD,
                    rng,
                )?)
            } else {
                None
            },
            position: store.normal(format!("{name}.emb.pos"), &[config.max_len, d], INIT_STD, rng)?,
        };
        let mut layers = Vec::with_capacity(config.layers);
        for n in 0..config.layers {
            let p = format!("{name}.layer{n}");
            layers.push(Layer {
                q: Linear::new(store, &format!("{p}.attn.q"), d, d, rng)?,
                k: Linear::new(store, &format!("{p}.attn.k"), d, d, rng)?,
                v: Linear::new(store, &format!("{p}.attn.v"), d, d, rng)?,
                o: Linear::new(store, &format!("{p}.attn.o"), d, d, rng)?,
                norm1: Norm::new(store, &format!("{p}.norm1"), d)?,
                ff1: Linear::new(store, &format!("{p}.ff1"), d, config.d_ff, rng)?,
                ff2: Linear::new(store, &format!("{p}.ff2"), config.d_ff, d, rng)?,
                norm2: Norm::new(store, &format!("{p}.norm2"), d)?,
            });
        }
        Ok(Self {
            name: name.to_string(),
            config,
            tables,
            layers,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Token (+ type) + position embedding sum, `[batch * seq, d_model]`.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, batch: &SeqBatch) -> Result<Var> {
        if batch.seq > self.config.max_len {
            return Err(Error::invalid(format!(
                "{}: sequence length {} exceeds max_len {}",
                self.name, batch.seq, self.config.max_len
            )));
        }
        let table = g.param(store, self.tables.token);
        let mut x = g.gather_rows(table, &batch.ids)?;
        if let Some(type_table) = self.tables.token_type {
            let t = g.param(store, type_table);
            let types = g.gather_rows(t, &batch.type_ids)?;
            x = g.add(x, types)?;
        }
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
        let pos_table = g.param(store, self.tables.position);
        let pos = g.gather_rows(pos_table, &positions)?;
        g.add(x, pos)
    }

    fn project(&self, n: usize, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Projected> {
        let layer = &self.layers[n];
        Ok(Projected {
            x,
            q: layer.q.apply(g, store, x)?,
            k: layer.k.apply(g, store, x)?,
            v: layer.v.apply(g, store, x)?,
        })
    }

    fn finish(
        &self,
        n: usize,
        g: &mut Graph,
        store: &ParamStore,
        p: &Projected,
        q_used: Var,
        batch: &SeqBatch,
    ) -> Result<LayerTap> {
        let layer = &self.layers[n];
        let layout = AttentionLayout {
            batch: batch.batch,
            seq: batch.seq,
            heads: self.config.heads,
            key_mask: batch.mask.clone(),
        };
        let attn = g.attention(q_used, p.k, p.v, layout)?;
        let proj = layer.o.apply(g, store, attn)?;
        let res = g.add(p.x, proj)?;
        let x1 = layer.norm1.apply(g, store, res)?;
        let h = layer.ff1.apply(g, store, x1)?;
        let h = g.gelu(h);
        let h = layer.ff2.apply(g, store, h)?;
        let res = g.add(x1, h)?;
        let output = layer.norm2.apply(g, store, res)?;
        Ok(LayerTap {
            q_own: p.q,
            q_used,
            k: p.k,
            v: p.v,
            attn,
            output,
        })
    }

    /// One encoder layer. When `foreign_q` is given, its row `src` replaces
    /// this layer's xCLS query of sequence `b` for every `(b, src)` pair.
    /// Returns the layer
    /// tap; `tap.q_own` rows at CLS positions are the queries to export.
    pub fn attention_layer(
        &self,
        n: usize,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        batch: &SeqBatch,
        foreign_q: Option<(QuerySource, &[usize])>,
    ) -> Result<LayerTap> {
        let p = self.project(n, g, store, x)?;
        let q_used = match foreign_q {
            Some((fq, src_rows)) => {
                let fq = match fq {
                    QuerySource::Own => p.q,
                    QuerySource::Foreign(v) => v,
                };
                self.substitute(g, p.q, fq, src_rows, batch)?
            }
            None => p.q,
        };
        self.finish(n, g, store, &p, q_used, batch)
    }

    fn substitute(
        &self,
        g: &mut Graph,
        own_q: Var,
        foreign_q: Var,
        src_rows: &[usize],
        batch: &SeqBatch,
    ) -> Result<Var> {
        if g.value(foreign_q).cols() != self.config.d_model {
            return Err(Error::config(
                "coupling requires equal H and d_model/H in both encoders",
            ));
        }
        if src_rows.len() != batch.batch {
            return Err(Error::invalid("one foreign query per sequence is required"));
        }
        let pairs: Vec<(usize, usize)> = src_rows
            .iter()
            .enumerate()
            .map(|(b, &src)| (batch.row(b, XCLS_POS), src))
            .collect();
        g.replace_rows(own_q, foreign_q, &pairs)
    }

    /// Uncoupled forward pass. With no partner encoder the xCLS slot takes
    /// this encoder's own CLS query, so a partner that produces the same
    /// CLS query leaves the result unchanged.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &SeqBatch) -> Result<EncoderOutput> {
        let own_cls: Vec<usize> = (0..batch.batch).map(|b| batch.row(b, CLS_POS)).collect();
        let mut x = self.embed(g, store, batch)?;
        let mut taps = Vec::with_capacity(self.layers.len());
        for n in 0..self.layers.len() {
            let tap = self.attention_layer(n, g, store, x, batch, Some((QuerySource::Own, &own_cls)))?;
            x = tap.output;
            taps.push(tap);
        }
        Ok(EncoderOutput {
            hidden: x,
            batch: batch.batch,
            seq: batch.seq,
            taps,
        })
    }
}

fn check_couplable(a: &Encoder, b: &Encoder) -> Result<()> {
    let (ca, cb) = (&a.config, &b.config);
    if ca.layers != cb.layers {
        return Err(Error::config(format!(
            "coupling requires equal layer counts ({} vs {})",
            ca.layers, cb.layers
        )));
    }
    if ca.heads != cb.heads || ca.head_dim() != cb.head_dim() {
        return Err(Error::config(format!(
            "coupling requires equal H and d_model/H ({}x{} vs {}x{})",
            ca.heads,
            ca.head_dim(),
            cb.heads,
            cb.head_dim()
        )));
    }
    Ok(())
}

/// Runs the code and text encoders layer by layer. With `couple`, both
/// encoders first project their queries for layer `n`; only then does each
/// receive the other's CLS query at its xCLS slot, so neither side sees a
/// query from a later stage than its own.
pub fn encode_pair(
    g: &mut Graph,
    store: &ParamStore,
    code_enc: &Encoder,
    text_enc: &Encoder,
    code_batch: &SeqBatch,
    text_batch: &SeqBatch,
    couple: bool,
) -> Result<(EncoderOutput, EncoderOutput)> {
    if !couple {
        let c = code_enc.forward(g, store, code_batch)?;
        let t = text_enc.forward(g, store, text_batch)?;
        return Ok((c, t));
    }
    check_couplable(code_enc, text_enc)?;
    if code_batch.batch != text_batch.batch {
        return Err(Error::invalid("code and text batches differ in size"));
    }
    let code_cls: Vec<usize> = (0..code_batch.batch).map(|b| code_batch.row(b, CLS_POS)).collect();
    let text_cls: Vec<usize> = (0..text_batch.batch).map(|b| text_batch.row(b, CLS_POS)).collect();

    let mut xc = code_enc.embed(g, store, code_batch)?;
    let mut xt = text_enc.embed(g, store, text_batch)?;
    let mut code_taps = Vec::new();
    let mut text_taps = Vec::new();
    for n in 0..code_enc.num_layers() {
        // rendezvous: both exports exist before either is consumed
        let pc = code_enc.project(n, g, store, xc)?;
        let pt = text_enc.project(n, g, store, xt)?;
        let qc = code_enc.substitute(g, pc.q, pt.q, &text_cls, code_batch)?;
        let qt = text_enc.substitute(g, pt.q, pc.q, &code_cls, text_batch)?;
        let tc = code_enc.finish(n, g, store, &pc, qc, code_batch)?;
        let tt = text_enc.finish(n, g, store, &pt, qt, text_batch)?;
        xc = tc.output;
        xt = tt.output;
        code_taps.push(tc);
        text_taps.push(tt);
    }
    Ok((
        EncoderOutput {
            hidden: xc,
            batch: code_batch.batch,
            seq: code_batch.seq,
            taps: code_taps,
        },
        EncoderOutput {
            hidden: xt,
            batch: text_batch.batch,
            seq: text_batch.seq,
            taps: text_taps,
        },
    ))
}

/// Copies every parameter of `src` into the matching parameter of `dst`
/// (same configuration required).
pub fn tie_weights(store: &mut ParamStore, dst: &Encoder, src: &Encoder) -> Result<()> {
    if dst.config.layers != src.config.layers
        || dst.config.d_model != src.config.d_model
        || dst.config.d_ff != src.config.d_ff
    {
        return Err(Error::config("cannot tie encoders of different geometry"));
    }
    let pairs: Vec<(ParamId, ParamId)> = store
        .iter()
        .filter_map(|(id, p)| {
            p.name
                .strip_prefix(&format!("{}.", src.name))
                .map(|rest| (id, format!("{}.{rest}", dst.name)))
        })
        .filter_map(|(sid, dname)| store.id(&dname).map(|did| (sid, did)))
        .collect();
    for (sid, did) in pairs {
        let v: Tensor = store.value(sid).clone();
        if v.shape() != store.value(did).shape() {
            return Err(Error::Shape {
                op: "tie_weights",
                left: v.shape().to_vec(),
                right: store.value(did).shape().to_vec(),
            });
        }
        store.get_mut(did).value = v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexer::{encode, Vocab};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn small(couple: bool, types: usize) -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            max_len: 12,
            vocab_size: 12,
            type_vocab_size: types,
            couple,
        }
    }

    fn seq(words: &[&str], max_len: usize) -> EncodedSequence {
        let counts: HashMap<String, usize> =
            ["a", "b", "c", "d", "e", "f"].iter().map(|w| (w.to_string(), 1)).collect();
        let v = Vocab::from_counts(counts, 1, 100);
        let toks: Vec<String> = words.iter().map(|s| s.to_string()).collect();
        encode(&toks, None, &v, max_len).unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn config_validation() {
        let mut c = small(true, 0);
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 2;
        c.max_len = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn embedding_without_types_is_token_plus_position() {
        let mut store = ParamStore::new();
        let enc = Encoder::new("t", small(false, 0), &mut store, &mut rng()).unwrap();
        let s = seq(&["a", "b"], 8);
        let batch = SeqBatch::new(&[&s]).unwrap();
        let mut g = Graph::new();
        let x = enc.embed(&mut g, &store, &batch).unwrap();
        let tok = store.value(enc.tables.token);
        let pos = store.value(enc.tables.position);
        for p in 0..batch.seq {
            let id = s.ids[p] as usize;
            for j in 0..8 {
                let expected = tok.row(id)[j] + pos.row(p)[j];
                assert_eq!(g.value(x).row(p)[j], expected);
            }
        }
    }

    #[test]
    fn all_zero_tables_embed_to_zero() {
        let mut store = ParamStore::new();
        let enc = Encoder::new("c", small(false, 10), &mut store, &mut rng()).unwrap();
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let s = seq(&["a", "b", "c"], 8);
        let mut g = Graph::new();
        let x = enc.embed(&mut g, &store, &SeqBatch::new(&[&s]).unwrap()).unwrap();
        assert!(g.value(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_token_at_two_positions_differs_by_position_rows() {
        let mut store = ParamStore::new();
        let enc = Encoder::new("c", small(false, 10), &mut store, &mut rng()).unwrap();
        let s = seq(&["a", "a"], 8);
        let mut g = Graph::new();
        let x = enc.embed(&mut g, &store, &SeqBatch::new(&[&s]).unwrap()).unwrap();
        let pos = store.value(enc.tables.position);
        for j in 0..8 {
            let d = g.value(x).row(3)[j] - g.value(x).row(2)[j];
            assert!((d - (pos.row(3)[j] - pos.row(2)[j])).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_id_is_an_error() {
        let mut store = ParamStore::new();
        let mut cfg = small(false, 0);
        cfg.vocab_size = 4;
        let enc = Encoder::new("t", cfg, &mut store, &mut rng()).unwrap();
        let s = seq(&["f"], 8); // id 11
        let mut g = Graph::new();
        assert!(enc.embed(&mut g, &store, &SeqBatch::new(&[&s]).unwrap()).is_err());
    }

    #[test]
    fn uncoupled_pair_equals_solo_runs() {
        let mut store = ParamStore::new();
        let code = Encoder::new("code", small(false, 10), &mut store, &mut rng()).unwrap();
        let text = Encoder::new("text", small(false, 0), &mut store, &mut rng()).unwrap();
        let sc = seq(&["a", "b", "c"], 12);
        let st = seq(&["d", "e"], 12);
        let (bc, bt) = (SeqBatch::new(&[&sc]).unwrap(), SeqBatch::new(&[&st]).unwrap());
        let mut g = Graph::new();
        let (oc, ot) = encode_pair(&mut g, &store, &code, &text, &bc, &bt, false).unwrap();
        let mut g1 = Graph::new();
        let solo_c = code.forward(&mut g1, &store, &bc).unwrap();
        let mut g2 = Graph::new();
        let solo_t = text.forward(&mut g2, &store, &bt).unwrap();
        assert_eq!(g.value(oc.hidden), g1.value(solo_c.hidden));
        assert_eq!(g.value(ot.hidden), g2.value(solo_t.hidden));
    }

    #[test]
    fn substituting_own_cls_query_matches_foreign_run() {
        let mut store = ParamStore::new();
        let enc = Encoder::new("t", small(true, 0), &mut store, &mut rng()).unwrap();
        let s = seq(&["a", "b", "c"], 12);
        let batch = SeqBatch::new(&[&s]).unwrap();
        // explicit own-query substitution
        let mut g = Graph::new();
        let x = enc.embed(&mut g, &store, &batch).unwrap();
        let own = enc.attention_layer(0, &mut g, &store, x, &batch, None).unwrap();
        let via_own = enc
            .attention_layer(0, &mut g, &store, x, &batch, Some((QuerySource::Own, &[0])))
            .unwrap();
        let via_foreign = enc
            .attention_layer(0, &mut g, &store, x, &batch, Some((QuerySource::Foreign(own.q_own), &[0])))
            .unwrap();
        // manual: feed a q tensor whose row 1 equals row 0
        let q = g.value(own.q_own).clone();
        let mut q2 = q.clone();
        let r0 = q.row(0).to_vec();
        q2.row_mut(1).copy_from_slice(&r0);
        let q2 = g.constant(q2);
        let manual = enc.attention_layer(0, &mut g, &store, x, &batch, Some((QuerySource::Foreign(q2), &[1]))).unwrap();
        assert_eq!(g.value(via_foreign.output), g.value(manual.output));
        assert_eq!(g.value(via_foreign.q_used).row(1), g.value(own.q_own).row(0));
        assert_eq!(g.value(via_own.output), g.value(manual.output));
    }

    #[test]
    fn coupling_only_rewrites_xcls_queries() {
        let mut store = ParamStore::new();
        let code = Encoder::new("code", small(true, 10), &mut store, &mut rng()).unwrap();
        let text = Encoder::new("text", small(true, 0), &mut store, &mut rng()).unwrap();
        let sc = [seq(&["a", "b", "c"], 12), seq(&["b"], 12)];
        let st = [seq(&["d", "e"], 12), seq(&["f", "a", "a", "c"], 12)];
        let bc = SeqBatch::new(&[&sc[0], &sc[1]]).unwrap();
        let bt = SeqBatch::new(&[&st[0], &st[1]]).unwrap();
        let mut g = Graph::new();
        let (oc, ot) = encode_pair(&mut g, &store, &code, &text, &bc, &bt, true).unwrap();
        for (out, other, batch, other_batch) in [(&oc, &ot, &bc, &bt), (&ot, &oc, &bt, &bc)] {
            for (n, tap) in out.taps.iter().enumerate() {
                let (own, used) = (g.value(tap.q_own), g.value(tap.q_used));
                for r in 0..own.rows() {
                    let b = r / batch.seq;
                    if r % batch.seq == XCLS_POS {
                        let src = g.value(other.taps[n].q_own).row(other_batch.row(b, CLS_POS));
                        assert_eq!(used.row(r), src);
                    } else {
                        assert_eq!(used.row(r), own.row(r));
                    }
                }
            }
        }
    }

    #[test]
    fn coupling_rejects_mismatched_geometry() {
        let mut store = ParamStore::new();
        let code = Encoder::new("code", small(true, 10), &mut store, &mut rng()).unwrap();
        let mut cfg = small(true, 0);
        cfg.heads = 4;
        let text = Encoder::new("text", cfg, &mut store, &mut rng()).unwrap();
        let s = seq(&["a"], 12);
        let b = SeqBatch::new(&[&s]).unwrap();
        let mut g = Graph::new();
        let err = encode_pair(&mut g, &store, &code, &text, &b, &b, true).unwrap_err();
        assert!(err.to_string().contains("coupling requires"), "{err}");
        // uncoupled runs don't care
        assert!(encode_pair(&mut g, &store, &code, &text, &b, &b, false).is_ok());
    }

    #[test]
    fn tied_identical_inputs_make_coupling_a_no_op() {
        let mut store = ParamStore::new();
        let a = Encoder::new("a", small(true, 0), &mut store, &mut rng()).unwrap();
        let b = Encoder::new("b", small(true, 0), &mut store, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        tie_weights(&mut store, &b, &a).unwrap();
        let s = seq(&["a", "c", "e", "b"], 12);
        let batch = SeqBatch::new(&[&s]).unwrap();
        let mut g = Graph::new();
        let (c1, t1) = encode_pair(&mut g, &store, &a, &b, &batch, &batch, true).unwrap();
        let (c0, t0) = encode_pair(&mut g, &store, &a, &b, &batch, &batch, false).unwrap();
        assert!(g.value(c1.hidden).max_abs_diff(g.value(c0.hidden)) <= 1e-12);
        assert!(g.value(t1.hidden).max_abs_diff(g.value(t0.hidden)) <= 1e-12);
    }
    #[test]
    fn single_layer_coupling_is_local_to_xcls() {
        let mut store = ParamStore::new();
        let mut cfg = small(true, 10);
        cfg.layers = 1;
        let code = Encoder::new("code", cfg.clone(), &mut store, &mut rng()).unwrap();
        cfg.type_vocab_size = 0;
        let text = Encoder::new("text", cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let sc = [seq(&["a", "b", "c"], 12), seq(&["e", "e", "d", "a", "b"], 12)];
        let st = [seq(&["d"], 12), seq(&["f", "c"], 12)];
        let bc = SeqBatch::new(&[&sc[0], &sc[1]]).unwrap();
        let bt = SeqBatch::new(&[&st[0], &st[1]]).unwrap();
        let mut g = Graph::new();
        let (c1, t1) = encode_pair(&mut g, &store, &code, &text, &bc, &bt, true).unwrap();
        let (c0, t0) = encode_pair(&mut g, &store, &code, &text, &bc, &bt, false).unwrap();
        for (on, off, batch) in [(&c1, &c0, &bc), (&t1, &t0, &bt)] {
            let (a, b) = (g.value(on.hidden), g.value(off.hidden));
            let mut xcls_moved = false;
            for r in 0..a.rows() {
                let diff = a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                if r % batch.seq == XCLS_POS {
                    xcls_moved |= diff > 1e-9;
                } else {
                    assert!(diff <= 1e-12, "row {r} moved by {diff}");
                }
            }
            assert!(xcls_moved);
        }
    }

    #[test]
    fn padded_keys_get_zero_weight() {
        let mut store = ParamStore::new();
        let enc = Encoder::new("t", small(false, 0), &mut store, &mut rng()).unwrap();
        let s = seq(&["a", "b"], 10);
        let batch = SeqBatch::full(&[&s]).unwrap();
        let mut g = Graph::new();
        let out = enc.forward(&mut g, &store, &batch).unwrap();
        let probs = g.attention_probs(out.taps[0].attn).unwrap();
        let t = batch.seq;
        for h in 0..2 {
            for i in 0..t {
                let row = &probs[(h * t + i) * t..(h * t + i + 1) * t];
                let sum: f64 = row.iter().zip(&batch.mask).filter(|(_, &m)| m).map(|(p, _)| p).sum();
                assert!((sum - 1.0).abs() <= 1e-12);
                for j in 0..t {
                    if !batch.mask[j] {
                        assert_eq!(row[j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn trimmed_batch_matches_full_length_run() {
        let mut store = ParamStore::new();
        let enc = Encoder::new("t", small(false, 0), &mut store, &mut rng()).unwrap();
        let s = seq(&["a", "b", "c"], 12);
        let mut g = Graph::new();
        let trimmed = enc.forward(&mut g, &store, &SeqBatch::new(&[&s]).unwrap()).unwrap();
        let full = enc.forward(&mut g, &store, &SeqBatch::full(&[&s]).unwrap()).unwrap();
        for r in 0..trimmed.seq {
            let d = g.value(trimmed.hidden).row(r).iter().zip(g.value(full.hidden).row(r))
                .map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d <= 1e-12);
        }
    }
}
