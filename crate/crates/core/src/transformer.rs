//! Encoder–decoder that fuses support videos into a query clip and turns `P` learnable
//! input embeddings into output embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionParams, CommonAttentionBlock, FeedForward, MultiHeadBlock, LN_EPS};
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{config, contract, shape_err, Result};

/// Fixed sinusoidal encoding of `(t, x, y)` token coordinates, `C/3` channels per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct PosEncoding3D {
    pub t: usize,
    pub w: usize,
    pub h: usize,
    pub c: usize,
    pub table: Tensor,
}

/// Builds the `[T·W·H × C]` table. Token order is `t`-major, then row `y < H`, then column `x < W`.
pub fn positional_encoding(t: usize, w: usize, h: usize, c: usize) -> Result<PosEncoding3D> {
    if c == 0 || c % 6 != 0 {
        return Err(config(format!("positional encoding width {c} must be divisible by 6")));
    }
    if t == 0 || w == 0 || h == 0 {
        return Err(config("positional encoding dims must be positive"));
    }
    let per_axis = c / 3;
    let mut data = Vec::with_capacity(t * w * h * c);
    for ti in 0..t {
        for yi in 0..h {
            for xi in 0..w {
                for coord in [ti, xi, yi] {
                    for i in 0..per_axis / 2 {
                        let freq = 10000f64.powf(2.0 * i as f64 / per_axis as f64);
                        let a = coord as f64 / freq;
                        data.push(a.sin());
                        data.push(a.cos());
                    }
                }
            }
        }
    }
    Ok(PosEncoding3D {
        t,
        w,
        h,
        c,
        table: Tensor::new([t * w * h, c], data)?,
    })
}

/// One encoder layer: `Ê = MHA-block(x, x + pos)`, then `LayerNorm(Ê + FFN(Ê))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadBlock,
    pub ffn: FeedForward,
    pub norm: String,
}

impl EncoderLayer {
    pub fn new(layer: &str, c: usize, heads: usize, hidden: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadBlock::new(layer, "self", c, heads, dropout)?,
            ffn: FeedForward::new(layer, c, hidden, dropout),
            norm: format!("attn.{layer}.out_norm"),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.attn.init(store, rng);
        self.ffn.init(store, rng);
        store.init_layer_norm(&self.norm, self.attn.attn.width);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, pos: Option<Var>) -> Result<Var> {
        let kv = match pos {
            Some(p) => g.add(x, p)?,
            None => x,
        };
        let e_hat = self.attn.forward(g, store, x, kv)?;
        let f = self.ffn.forward(g, store, e_hat)?;
        let sum = g.add(e_hat, f)?;
        let gamma = g.param(store, &format!("{}.gamma", self.norm))?;
        let beta = g.param(store, &format!("{}.beta", self.norm))?;
        g.layer_norm(sum, gamma, beta, LN_EPS)
    }
}

/// Stack of encoder layers for one branch (`support` or `query`).
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new(branch: &str, layers: usize, c: usize, heads: usize, hidden: usize, dropout: f64) -> Result<Self> {
        let layers = (0..layers)
            .map(|l| EncoderLayer::new(&format!("enc_{branch}.{l}"), c, heads, hidden, dropout))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    /// Encodes one video's tokens; `pe` of `None` disables positional encoding.
    pub fn encode_video(&self, g: &mut Graph, store: &ParamStore, f: Var, pe: Option<&PosEncoding3D>) -> Result<Var> {
        let pos = match pe {
            Some(pe) => {
                if g.shape(f) != pe.table.shape() {
                    return Err(shape_err("encode_video", g.shape(f), pe.table.shape()));
                }
                Some(g.constant(pe.table.clone()))
            }
            None => None,
        };
        let mut x = f;
        for layer in &self.layers {
            x = layer.forward(g, store, x, pos)?;
        }
        Ok(x)
    }

    /// Encodes each support independently with shared weights and concatenates along tokens.
    pub fn encode_supports(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        supports: &[Var],
        pe: Option<&PosEncoding3D>,
    ) -> Result<Var> {
        let first = *supports.first().ok_or_else(|| contract("encode_supports needs at least one support"))?;
        let shape = g.shape(first).to_vec();
        let mut encoded = Vec::with_capacity(supports.len());
        for &s in supports {
            if g.shape(s) != shape.as_slice() {
                return Err(shape_err("encode_supports", &shape, g.shape(s)));
            }
            encoded.push(self.encode_video(g, store, s, pe)?);
        }
        if encoded.len() == 1 {
            Ok(encoded[0])
        } else {
            g.concat_rows(&encoded)
        }
    }
}

/// Raw fused-attention map of one decoder layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

/// One decoder layer: fuse support into query, self-attend the slot state, aggregate the
/// fused feature into the slots, then a residual FFN.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub fuse: CommonAttentionBlock,
    pub self_attn: MultiHeadBlock,
    pub cross: MultiHeadBlock,
    pub ffn: FeedForward,
    pub norm: String,
}

/// Support-side keys and values of a decoder layer's fusion block, reusable across clips.
#[derive(Clone, Copy, Debug)]
pub struct SupportKv {
    k: Var,
    v: Var,
}

impl DecoderLayer {
    pub fn new(layer: &str, c: usize, heads: usize, hidden: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            fuse: CommonAttentionBlock::new(layer, "fuse", c, dropout)?,
            self_attn: MultiHeadBlock::new(layer, "self", c, heads, dropout)?,
            cross: MultiHeadBlock::new(layer, "cross", c, heads, dropout)?,
            ffn: FeedForward::new(layer, c, hidden, dropout),
            norm: format!("attn.{layer}.out_norm"),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.fuse.init(store, rng);
        self.self_attn.init(store, rng);
        self.cross.init(store, rng);
        self.ffn.init(store, rng);
        store.init_layer_norm(&self.norm, self.fuse.attn.width);
    }

    pub fn support_kv(&self, g: &mut Graph, store: &ParamStore, e_support: Var) -> Result<SupportKv> {
        let p: &AttentionParams = &self.fuse.attn;
        if g.value(e_support).cols() != p.width {
            return Err(shape_err("decode", g.shape(e_support), &[p.width]));
        }
        let wk = g.param(store, &format!("{}.k", p.prefix))?;
        let wv = g.param(store, &format!("{}.v", p.prefix))?;
        Ok(SupportKv {
            k: g.matmul(e_support, wk)?,
            v: g.matmul(e_support, wv)?,
        })
    }

    /// `fused = Â(E_q, E_s)` from precomputed support keys/values; returns `(fused, weights)`.
    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, e_query: Var, kv: SupportKv) -> Result<(Var, Var)> {
        let blk = &self.fuse;
        let p = &blk.attn;
        if g.value(e_query).cols() != p.width {
            return Err(shape_err("decode", g.shape(e_query), &[p.width]));
        }
        let wq = g.param(store, &format!("{}.q", p.prefix))?;
        let q = g.matmul(e_query, wq)?;
        let scores = g.matmul_nt(q, kv.k)?;
        let scores = g.scale(scores, 1.0 / (p.width as f64).sqrt());
        let weights = g.softmax_lastdim(scores);
        let a = g.matmul(weights, kv.v)?;
        Ok((blk.residual(g, store, e_query, a)?, weights))
    }

    /// Advances the slot state `x` given this layer's fused feature.
    pub fn update(&self, g: &mut Graph, store: &ParamStore, x: Var, fused: Var) -> Result<Var> {
        let s = self.self_attn.forward(g, store, x, x)?;
        let d_hat = self.cross.forward(g, store, s, fused)?;
        let f = self.ffn.forward(g, store, d_hat)?;
        let sum = g.add(d_hat, f)?;
        let gamma = g.param(store, &format!("{}.gamma", self.norm))?;
        let beta = g.param(store, &format!("{}.beta", self.norm))?;
        g.layer_norm(sum, gamma, beta, LN_EPS)
    }
}

pub const INPUT_EMBEDDINGS: &str = "decoder.input_embeddings";
/// Learned per-slot codes added to the slot state at every layer; they make the slots
/// distinguishable while the input embeddings start at zero.
pub const SLOT_CODES: &str = "decoder.slot_codes";

#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub slots: usize,
    pub width: usize,
}

/// Output of [`Decoder::decode`].
#[derive(Debug)]
pub struct Decoded {
    /// `[P×C]` output embeddings.
    pub out: Var,
    /// Fused feature of the last layer, `[T'·W·H × C]`.
    pub fused: Var,
    pub attention: Vec<AttentionRecord>,
}

impl Decoder {
    pub fn new(layers: usize, slots: usize, c: usize, heads: usize, hidden: usize, dropout: f64) -> Result<Self> {
        if slots == 0 {
            return Err(config("decoder needs at least one slot"));
        }
        let layers = (0..layers)
            .map(|l| DecoderLayer::new(&format!("dec.{l}"), c, heads, hidden, dropout))
            .collect::<Result<_>>()?;
        Ok(Self { layers, slots, width: c })
    }

    /// Registers every layer and the zero-initialised input embeddings.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in &self.layers {
            l.init(store, rng);
        }
        store.insert(INPUT_EMBEDDINGS, Tensor::zeros([self.slots, self.width]));
        store.init_matrix(SLOT_CODES, self.slots, self.width, rng);
    }

    pub fn prepare_support(&self, g: &mut Graph, store: &ParamStore, e_support: Var) -> Result<Vec<SupportKv>> {
        self.layers.iter().map(|l| l.support_kv(g, store, e_support)).collect()
    }

    pub fn decode(&self, g: &mut Graph, store: &ParamStore, e_query: Var, e_support: Var, dump: bool) -> Result<Decoded> {
        let kv = self.prepare_support(g, store, e_support)?;
        self.decode_prepared(g, store, e_query, &kv, dump)
    }

    pub fn decode_prepared(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        e_query: Var,
        support: &[SupportKv],
        dump: bool,
    ) -> Result<Decoded> {
        let mut x = g.param(store, INPUT_EMBEDDINGS)?;
        let codes = g.param(store, SLOT_CODES)?;
        let mut fused = e_query;
        let mut attention = Vec::new();
        for (l, (layer, &kv)) in self.layers.iter().zip(support).enumerate() {
            let (f, w) = layer.fuse(g, store, e_query, kv)?;
            fused = f;
            if dump {
                let t = g.value(w);
                attention.push(AttentionRecord {
                    layer: l,
                    rows: t.rows(),
                    cols: t.cols(),
                    weights: t.data().to_vec(),
                });
            }
            let xc = g.add(x, codes)?;
            x = layer.update(g, store, xc, fused)?;
        }
        Ok(Decoded { out: x, fused, attention })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check_many, finite_diff_check_params};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
        Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn pe_origin_alternates_zero_one() {
        let pe = positional_encoding(2, 2, 2, 12).unwrap();
        let row = pe.table.row(0);
        for (i, v) in row.iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn pe_first_pair_is_sin_cos_of_position() {
        let (t, w, h, c) = (5, 2, 3, 12);
        let pe = positional_encoding(t, w, h, c).unwrap();
        for p in 0..t {
            let row = pe.table.row(p * w * h);
            assert_eq!(row[0], (p as f64).sin());
            assert_eq!(row[1], (p as f64).cos());
        }
    }

    #[test]
    fn pe_rows_bounded_and_distinct_for_small_grids() {
        for &c in &[6usize, 12, 24] {
            for t in 1..=8 {
                for w in 1..=8 {
                    for h in [1usize, 3, 8] {
                        let pe = positional_encoding(t, w, h, c).unwrap();
                        assert!(pe.table.data().iter().all(|v| (-1.0..=1.0).contains(v)));
                        let rows = pe.table.to_rows();
                        for i in 0..rows.len() {
                            for j in i + 1..rows.len() {
                                assert_ne!(rows[i], rows[j], "t={t} w={w} h={h} c={c}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pe_rejects_indivisible_width() {
        assert!(positional_encoding(2, 2, 2, 8).is_err());
        assert!(positional_encoding(2, 2, 2, 9).is_err());
    }

    fn encoder(layers: usize, rng: &mut impl Rng) -> (Encoder, ParamStore) {
        let enc = Encoder::new("support", layers, 6, 2, 12, 0.0).unwrap();
        let mut store = ParamStore::new();
        enc.init(&mut store, rng);
        (enc, store)
    }

    #[test]
    fn zero_layer_encoder_is_identity() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let (enc, store) = encoder(0, &mut r);
        let pe = positional_encoding(1, 2, 2, 6).unwrap();
        let x = rand_t(&[4, 6], &mut r);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = enc.encode_video(&mut g, &store, v, Some(&pe)).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn encoder_equivariant_without_pe_but_not_with() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let (enc, store) = encoder(2, &mut r);
        let pe = positional_encoding(2, 2, 2, 6).unwrap();
        let x = rand_t(&[8, 6], &mut r);
        let perm = [5usize, 2, 7, 0, 1, 6, 3, 4];
        let xp = permute_rows(&x, &perm);
        let mut g = Graph::new();
        let (v, vp) = (g.constant(x), g.constant(xp));
        let a = enc.encode_video(&mut g, &store, v, None).unwrap();
        let b = enc.encode_video(&mut g, &store, vp, None).unwrap();
        let expect = permute_rows(g.value(a), &perm);
        assert!(g.value(b).max_abs_diff(&expect) < 1e-9);

        let a = enc.encode_video(&mut g, &store, v, Some(&pe)).unwrap();
        let b = enc.encode_video(&mut g, &store, vp, Some(&pe)).unwrap();
        let expect = permute_rows(g.value(a), &perm);
        assert!(g.value(b).max_abs_diff(&expect) > 1e-3);
    }

    #[test]
    fn encode_video_rejects_pe_size_mismatch() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let (enc, store) = encoder(1, &mut r);
        let pe = positional_encoding(2, 2, 2, 6).unwrap();
        let mut g = Graph::new();
        let v = g.constant(rand_t(&[4, 6], &mut r));
        assert!(enc.encode_video(&mut g, &store, v, Some(&pe)).is_err());
    }

    #[test]
    fn support_encoding_concatenates_in_order() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let (enc, store) = encoder(1, &mut r);
        let pe = positional_encoding(1, 2, 2, 6).unwrap();
        let (s0, s1) = (rand_t(&[4, 6], &mut r), rand_t(&[4, 6], &mut r));
        let mut g = Graph::new();
        let (v0, v1) = (g.constant(s0), g.constant(s1));
        let single = enc.encode_supports(&mut g, &store, &[v0], Some(&pe)).unwrap();
        let alone = enc.encode_video(&mut g, &store, v0, Some(&pe)).unwrap();
        assert_eq!(g.value(single), g.value(alone));

        let e01 = enc.encode_supports(&mut g, &store, &[v0, v1], Some(&pe)).unwrap();
        let e10 = enc.encode_supports(&mut g, &store, &[v1, v0], Some(&pe)).unwrap();
        let (a, b) = (g.value(e01).to_rows(), g.value(e10).to_rows());
        assert_eq!(a.len(), 8);
        assert_eq!(&a[..4], &b[4..]);
        assert_eq!(&a[4..], &b[..4]);

        let e00 = enc.encode_supports(&mut g, &store, &[v0, v0], Some(&pe)).unwrap();
        let rows = g.value(e00).to_rows();
        assert_eq!(&rows[..4], &rows[4..]);

        let odd = g.constant(rand_t(&[3, 6], &mut r));
        assert!(enc.encode_supports(&mut g, &store, &[v0, odd], None).is_err());
        assert!(enc.encode_supports(&mut g, &store, &[], None).is_err());
    }

    fn decoder(rng: &mut impl Rng) -> (Decoder, ParamStore) {
        let dec = Decoder::new(1, 3, 6, 2, 12, 0.0).unwrap();
        let mut store = ParamStore::new();
        dec.init(&mut store, rng);
        (dec, store)
    }

    #[test]
    fn decode_output_is_slots_by_width() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let (dec, store) = decoder(&mut r);
        for (nq, ns) in [(1, 1), (4, 12), (8, 40)] {
            let mut g = Graph::new();
            let q = g.constant(rand_t(&[nq, 6], &mut r));
            let s = g.constant(rand_t(&[ns, 6], &mut r));
            let d = dec.decode(&mut g, &store, q, s, true).unwrap();
            assert_eq!(g.shape(d.out), &[3, 6]);
            assert_eq!(d.attention.len(), 1);
            assert_eq!((d.attention[0].rows, d.attention[0].cols), (nq, ns));
        }
    }

    #[test]
    fn encoder_layer_gradients() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let (enc, mut store) = encoder(1, &mut r);
        for name in ["attn.enc_support.0.self.norm.gamma", "attn.enc_support.0.out_norm.gamma"] {
            store.set(name, rand_t(&[6], &mut r)).unwrap();
        }
        let pe = positional_encoding(1, 2, 2, 6).unwrap();
        let x = rand_t(&[4, 6], &mut r);
        let probe = rand_t(&[4, 6], &mut r);
        let f = |g: &mut Graph, s: &ParamStore, x: Var| -> Result<Var> {
            let y = enc.encode_video(g, s, x, Some(&pe))?;
            let p = g.constant(probe.clone());
            let m = g.mul(y, p)?;
            Ok(g.sum(m))
        };
        let e = finite_diff_check_many(|g, v| f(g, &store, v[0]), &[x.clone()], 1e-5).unwrap();
        assert!(e < 1e-4, "{e}");
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let e = finite_diff_check_params(
            |g, s| {
                let v = g.constant(x.clone());
                f(g, s, v)
            },
            &store,
            &names,
            1e-5,
            usize::MAX,
        )
        .unwrap();
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn decoder_layer_gradients_reach_input_embeddings() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let (dec, mut store) = decoder(&mut r);
        // start away from the zero point, where LayerNorm of identical slots is degenerate
        store.set(INPUT_EMBEDDINGS, rand_t(&[3, 6], &mut r)).unwrap();
        let q = rand_t(&[4, 6], &mut r);
        let s = rand_t(&[10, 6], &mut r);
        let probe = rand_t(&[3, 6], &mut r);
        let f = |g: &mut Graph, st: &ParamStore, q: Var, s: Var| -> Result<Var> {
            let d = dec.decode(g, st, q, s, false)?;
            let p = g.constant(probe.clone());
            let m = g.mul(d.out, p)?;
            Ok(g.sum(m))
        };
        let e = finite_diff_check_many(|g, v| f(g, &store, v[0], v[1]), &[q.clone(), s.clone()], 1e-5).unwrap();
        assert!(e < 1e-4, "{e}");
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let e = finite_diff_check_params(
            |g, st| {
                let (vq, vs) = (g.constant(q.clone()), g.constant(s.clone()));
                f(g, st, vq, vs)
            },
            &store,
            &names,
            1e-5,
            usize::MAX,
        )
        .unwrap();
        assert!(e < 1e-4, "{e}");
    }
}
