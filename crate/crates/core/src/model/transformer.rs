//! Encoder and the conditional-attention decoder.

use candle_core::{Module, Tensor};

use super::backbone::sine_point_embedding;
use super::nn::{linear, sigmoid, softmax_last_dim, ForwardCtx, Init, LayerNorm, Mlp, ParamStore};

/// Scaled dot-product attention over `n_heads` heads. Inputs are
/// `(B, N, n_heads·dim)`; the query/key head width may differ from the value
/// head width.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, n_heads: usize, dropout: f64, ctx: &mut ForwardCtx) -> candle_core::Result<Tensor> {
    let (b, nq, dq) = q.dims3()?;
    let (_, nk, dv) = v.dims3()?;
    let split = |x: &Tensor, n: usize, width: usize| x.reshape((b, n, n_heads, width / n_heads))?.transpose(1, 2)?.contiguous();
    let qh = split(q, nq, dq)?;
    let kh = split(k, nk, dq)?;
    let vh = split(v, nk, dv)?;
    let scale = 1.0 / ((dq / n_heads) as f64).sqrt();
    let scores = (qh.matmul(&kh.transpose(2, 3)?.contiguous()?)? * scale)?;
    let attn = ctx.dropout(&softmax_last_dim(&scores)?, dropout)?;
    attn.matmul(&vh)?.transpose(1, 2)?.reshape((b, nq, dv))
}

/// Concatenates two `(B, N, d)` tensors head by head into `(B, N, 2d)`.
fn concat_heads(a: &Tensor, b: &Tensor, n_heads: usize) -> candle_core::Result<Tensor> {
    let (bs, n, d) = a.dims3()?;
    let a = a.reshape((bs, n, n_heads, d / n_heads))?;
    let b = b.reshape((bs, n, n_heads, d / n_heads))?;
    Tensor::cat(&[a, b], 3)?.reshape((bs, n, 2 * d))
}

#[derive(Debug, Clone)]
struct Ffn {
    l1: candle_nn::Linear,
    l2: candle_nn::Linear,
}

impl Ffn {
    fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize) -> candle_core::Result<Self> {
        Ok(Self {
            l1: linear(store, &format!("{name}.linear1"), d, hidden, Init::Xavier)?,
            l2: linear(store, &format!("{name}.linear2"), hidden, d, Init::Xavier)?,
        })
    }

    fn forward(&self, x: &Tensor, dropout: f64, ctx: &mut ForwardCtx) -> candle_core::Result<Tensor> {
        let h = ctx.dropout(&self.l1.forward(x)?.relu()?, dropout)?;
        self.l2.forward(&h)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    q: candle_nn::Linear,
    k: candle_nn::Linear,
    v: candle_nn::Linear,
    out: candle_nn::Linear,
    ffn: Ffn,
    norm1: LayerNorm,
    norm2: LayerNorm,
    n_heads: usize,
    dropout: f64,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, n_heads: usize, hidden: usize, dropout: f64) -> candle_core::Result<Self> {
        Ok(Self {
            q: linear(store, &format!("{name}.attn.q"), d, d, Init::Xavier)?,
            k: linear(store, &format!("{name}.attn.k"), d, d, Init::Xavier)?,
            v: linear(store, &format!("{name}.attn.v"), d, d, Init::Xavier)?,
            out: linear(store, &format!("{name}.attn.out"), d, d, Init::Xavier)?,
            ffn: Ffn::new(store, &format!("{name}.ffn"), d, hidden)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
            n_heads,
            dropout,
        })
    }

    /// `src: (B, N, d)`, `pos: (N, d)`.
    pub fn forward(&self, src: &Tensor, pos: &Tensor, ctx: &mut ForwardCtx) -> candle_core::Result<Tensor> {
        let qk = src.broadcast_add(pos)?;
        let a = attend(&self.q.forward(&qk)?, &self.k.forward(&qk)?, &self.v.forward(src)?, self.n_heads, self.dropout, ctx)?;
        let a = ctx.dropout(&self.out.forward(&a)?, self.dropout)?;
        let x = self.norm1.forward(&(src + a)?)?;
        let f = self.ffn.forward(&x, self.dropout, ctx)?;
        let f = ctx.dropout(&f, self.dropout)?;
        self.norm2.forward(&(x + f)?)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, n_layers: usize, d: usize, n_heads: usize, hidden: usize, dropout: f64) -> candle_core::Result<Self> {
        let layers = (0..n_layers)
            .map(|i| EncoderLayer::new(store, &format!("encoder.layers.{i}"), d, n_heads, hidden, dropout))
            .collect::<candle_core::Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, src: &Tensor, pos: &Tensor, ctx: &mut ForwardCtx) -> candle_core::Result<Tensor> {
        let mut x = src.clone();
        for l in &self.layers {
            x = l.forward(&x, pos, ctx)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    sa_q_content: candle_nn::Linear,
    sa_q_pos: candle_nn::Linear,
    sa_k_content: candle_nn::Linear,
    sa_k_pos: candle_nn::Linear,
    sa_v: candle_nn::Linear,
    sa_out: candle_nn::Linear,
    ca_q_content: candle_nn::Linear,
    /// Only the first layer adds the object-query embedding to its content query.
    ca_q_pos: Option<candle_nn::Linear>,
    ca_k_content: candle_nn::Linear,
    ca_k_pos: candle_nn::Linear,
    ca_v: candle_nn::Linear,
    ca_q_sine: candle_nn::Linear,
    ca_out: candle_nn::Linear,
    ffn: Ffn,
    norm1: LayerNorm,
    norm2: LayerNorm,
    norm3: LayerNorm,
    n_heads: usize,
    dropout: f64,
}

/// Inputs shared by every decoder layer.
pub struct DecoderInputs<'a> {
    pub memory: &'a Tensor,
    pub memory_pos: &'a Tensor,
    /// Object queries broadcast to `(B, Q, d)`.
    pub query_pos: &'a Tensor,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        n_heads: usize,
        hidden: usize,
        dropout: f64,
        first: bool,
    ) -> candle_core::Result<Self> {
        let mut lin = |part: &str| linear(store, &format!("{name}.{part}"), d, d, Init::Xavier);
        Ok(Self {
            sa_q_content: lin("self_attn.q_content")?,
            sa_q_pos: lin("self_attn.q_pos")?,
            sa_k_content: lin("self_attn.k_content")?,
            sa_k_pos: lin("self_attn.k_pos")?,
            sa_v: lin("self_attn.v")?,
            sa_out: lin("self_attn.out")?,
            ca_q_content: lin("cross_attn.q_content")?,
            ca_q_pos: if first { Some(lin("cross_attn.q_pos")?) } else { None },
            ca_k_content: lin("cross_attn.k_content")?,
            ca_k_pos: lin("cross_attn.k_pos")?,
            ca_v: lin("cross_attn.v")?,
            ca_q_sine: lin("cross_attn.q_sine")?,
            ca_out: lin("cross_attn.out")?,
            ffn: Ffn::new(store, &format!("{name}.ffn"), d, hidden)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d)?,
            n_heads,
            dropout,
        })
    }

    pub fn forward(&self, tgt: &Tensor, inp: &DecoderInputs, spatial: &Tensor, ctx: &mut ForwardCtx) -> candle_core::Result<Tensor> {
        let h = self.n_heads;
        let p = self.dropout;

        let q = (self.sa_q_content.forward(tgt)? + self.sa_q_pos.forward(inp.query_pos)?)?;
        let k = (self.sa_k_content.forward(tgt)? + self.sa_k_pos.forward(inp.query_pos)?)?;
        let a = attend(&q, &k, &self.sa_v.forward(tgt)?, h, p, ctx)?;
        let a = ctx.dropout(&self.sa_out.forward(&a)?, p)?;
        let tgt = self.norm1.forward(&(tgt + a)?)?;

        let mut q = self.ca_q_content.forward(&tgt)?;
        let mut k = self.ca_k_content.forward(inp.memory)?;
        let k_pos = self.ca_k_pos.forward(inp.memory_pos)?;
        if let Some(q_pos) = &self.ca_q_pos {
            q = (q + q_pos.forward(inp.query_pos)?)?;
            k = k.broadcast_add(&k_pos)?;
        }
        let q = concat_heads(&q, &self.ca_q_sine.forward(spatial)?, h)?;
        let k_pos = k_pos.unsqueeze(0)?.broadcast_as(k.shape())?.contiguous()?;
        let k = concat_heads(&k, &k_pos, h)?;
        let a = attend(&q, &k, &self.ca_v.forward(inp.memory)?, h, p, ctx)?;
        let a = ctx.dropout(&self.ca_out.forward(&a)?, p)?;
        let tgt = self.norm2.forward(&(tgt + a)?)?;

        let f = self.ffn.forward(&tgt, p, ctx)?;
        let f = ctx.dropout(&f, p)?;
        self.norm3.forward(&(tgt + f)?)
    }
}

/// One decoder stack with its own reference-point head.
#[derive(Debug, Clone)]
pub struct Decoder {
    layers: Vec<DecoderLayer>,
    ref_point: Mlp,
    query_scale: Mlp,
    norm: LayerNorm,
    d_model: usize,
}

/// Per-layer normalized embeddings plus the reference point.
#[derive(Debug, Clone)]
pub struct DecoderTrace {
    /// `n_layers × (B, Q, d)`.
    pub embeddings: Vec<Tensor>,
    /// `(B, Q, 2)` in `(0, 1)`.
    pub reference: Tensor,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_layers: usize,
        d: usize,
        n_heads: usize,
        hidden: usize,
        dropout: f64,
    ) -> candle_core::Result<Self> {
        let layers = (0..n_layers)
            .map(|i| DecoderLayer::new(store, &format!("{name}.layers.{i}"), d, n_heads, hidden, dropout, i == 0))
            .collect::<candle_core::Result<_>>()?;
        Ok(Self {
            layers,
            ref_point: Mlp::new(store, &format!("{name}.ref_point"), &[d, d, 2], false)?,
            query_scale: Mlp::new(store, &format!("{name}.query_scale"), &[d, d, d], false)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            d_model: d,
        })
    }

    /// `sigmoid(FFN(o_q))` for queries `(…, d)`.
    pub fn spatial_query(&self, queries: &Tensor) -> candle_core::Result<Tensor> {
        sigmoid(&self.ref_point.forward(queries)?)
    }

    pub fn ref_point_head(&self) -> &Mlp {
        &self.ref_point
    }

    pub fn forward(&self, memory: &Tensor, memory_pos: &Tensor, queries: &Tensor, ctx: &mut ForwardCtx) -> candle_core::Result<DecoderTrace> {
        let (b, _, _) = memory.dims3()?;
        let (nq, d) = queries.dims2()?;
        let query_pos = queries.unsqueeze(0)?.broadcast_as((b, nq, d))?.contiguous()?;
        let reference = self.spatial_query(&query_pos)?;
        let sine = sine_point_embedding(&reference, self.d_model)?;
        let inp = DecoderInputs { memory, memory_pos, query_pos: &query_pos };

        let mut out = query_pos.zeros_like()?;
        let mut embeddings = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let spatial = if i == 0 { sine.clone() } else { (&sine * self.query_scale.forward(&out)?)? };
            out = layer.forward(&out, &inp, &spatial, ctx)?;
            embeddings.push(self.norm.forward(&out)?);
        }
        Ok(DecoderTrace { embeddings, reference })
    }
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device};

    use super::*;

    #[test]
    fn attention_matches_loop_oracle() {
        // single head, 1 query, 3 keys
        let dev = Device::Cpu;
        let q = Tensor::new(&[[[1f32, 0.0]]], &dev).unwrap();
        let k = Tensor::new(&[[[1f32, 0.0], [0.0, 1.0], [-1.0, 0.0]]], &dev).unwrap();
        let v = Tensor::new(&[[[1f32], [2.0], [3.0]]], &dev).unwrap();
        let out = attend(&q, &k, &v, 1, 0.0, &mut ForwardCtx::eval()).unwrap();
        let s = [1.0f64, 0.0, -1.0].map(|x| (x / 2f64.sqrt()).exp());
        let want = (s[0] + 2.0 * s[1] + 3.0 * s[2]) / s.iter().sum::<f64>();
        let got = out.flatten_all().unwrap().to_vec1::<f32>().unwrap()[0];
        assert!((got as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn heads_are_concatenated_per_head() {
        let dev = Device::Cpu;
        let a = Tensor::new(&[[[1f32, 2.0, 3.0, 4.0]]], &dev).unwrap();
        let b = Tensor::new(&[[[5f32, 6.0, 7.0, 8.0]]], &dev).unwrap();
        let c = concat_heads(&a, &b, 2).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(c, vec![1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
    }

    #[test]
    fn decoder_shapes() {
        let dev = Device::Cpu;
        let mut s = ParamStore::new(0, &dev);
        let dec = Decoder::new(&mut s, "dec", 2, 16, 4, 32, 0.1).unwrap();
        let memory = Tensor::randn(0f32, 1.0, (2, 9, 16), &dev).unwrap();
        let pos = Tensor::zeros((9, 16), DType::F32, &dev).unwrap();
        let queries = Tensor::randn(0f32, 1.0, (5, 16), &dev).unwrap();
        let t = dec.forward(&memory, &pos, &queries, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(t.embeddings.len(), 2);
        assert_eq!(t.embeddings[1].dims(), &[2, 5, 16]);
        assert_eq!(t.reference.dims(), &[2, 5, 2]);
    }
}
