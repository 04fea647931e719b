//! Multi-head scaled dot-product attention.
//!
//! Keys and values can come from projecting `h_t` as usual or be supplied
//! ready-made by the caller, which is how shortcut-fused keys/values and the
//! incremental decoding cache enter the computation.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Additive score for masked key positions.
pub const MASK_VALUE: f64 = -1e9;

/// Projection weights of one attention block, bound on a tape.
/// All matrices are `d_model × d_model` and act on row vectors (`x · W`).
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub heads: usize,
}

impl AttentionParams {
    pub fn validate<T: Real>(&self, tape: &Tape<T>) -> Result<usize> {
        let d = tape.shape(self.w_q)[0];
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {d} is not divisible by head count {}",
                self.heads
            )));
        }
        for w in [self.w_q, self.w_k, self.w_v, self.w_o] {
            if tape.shape(w) != [d, d] {
                return Err(Error::shape(
                    "attention",
                    format!("weight {:?} is not {d}x{d}", tape.shape(w)),
                ));
            }
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Padding,
    Causal,
    Both,
}

/// Boolean keep-matrix laid out `[batch, queries, keys]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    kind: MaskKind,
    batch: usize,
    queries: usize,
    keys: usize,
    keep: Vec<bool>,
}

impl AttentionMask {
    fn build(
        kind: MaskKind,
        batch: usize,
        queries: usize,
        keys: usize,
        keep: impl Fn(usize, usize, usize) -> bool,
    ) -> Self {
        let mut mask = Vec::with_capacity(batch * queries * keys);
        for b in 0..batch {
            for q in 0..queries {
                for k in 0..keys {
                    mask.push(keep(b, q, k));
                }
            }
        }
        Self {
            kind,
            batch,
            queries,
            keys,
            keep: mask,
        }
    }

    /// Keys at or beyond each sequence's length are ignored.
    pub fn padding(key_lengths: &[usize], queries: usize, keys: usize) -> Self {
        Self::build(MaskKind::Padding, key_lengths.len(), queries, keys, |b, _, k| {
            k < key_lengths[b]
        })
    }

    /// Query `i` sees keys `0..=i` (lower-triangular).
    pub fn causal(batch: usize, len: usize) -> Self {
        Self::build(MaskKind::Causal, batch, len, len, |_, q, k| k <= q)
    }

    pub fn causal_padded(key_lengths: &[usize], len: usize) -> Self {
        Self::build(MaskKind::Both, key_lengths.len(), len, len, |b, q, k| {
            k <= q && k < key_lengths[b]
        })
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.queries, self.keys)
    }

    pub fn keeps(&self, b: usize, q: usize, k: usize) -> bool {
        self.keep[(b * self.queries + q) * self.keys + k]
    }

    /// `0` for kept and [`MASK_VALUE`] for ignored positions.
    /// Fails if some query would have no visible key.
    pub fn additive<T: Real>(&self) -> Result<Tensor<T>> {
        for (row, chunk) in self.keep.chunks(self.keys).enumerate() {
            if !chunk.iter().any(|&k| k) {
                return Err(Error::InvalidArgument(format!(
                    "attention row {} of batch {} masks every key",
                    row % self.queries,
                    row / self.queries
                )));
            }
        }
        let data = self
            .keep
            .iter()
            .map(|&k| if k { T::zero() } else { T::of(MASK_VALUE) })
            .collect();
        Tensor::new(vec![self.batch, self.queries, self.keys], data)
    }
}

/// `[b, t, d] -> [b, heads, t, d / heads]`
pub fn split_heads<T: Real>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
        return Err(Error::shape(
            "split_heads",
            format!("cannot split {s:?} into {heads} heads"),
        ));
    }
    let r = tape.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

/// `[b, heads, t, d_k] -> [b, t, heads * d_k]`
pub fn merge_heads<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("merge_heads", format!("expected rank 4, got {s:?}")));
    }
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

/// Projects queries from `h_s` and keys/values from `h_t`, split per head.
pub fn project_qkv<T: Real>(
    tape: &mut Tape<T>,
    params: &AttentionParams,
    h_s: Var,
    h_t: Var,
) -> Result<(Var, Var, Var)> {
    let d = params.validate(tape)?;
    for h in [h_s, h_t] {
        let s = tape.shape(h);
        if s.len() != 3 || s[2] != d {
            return Err(Error::shape(
                "project_qkv",
                format!("input {s:?} does not end in d_model {d}"),
            ));
        }
    }
    let q = tape.matmul(h_s, params.w_q)?;
    let k = tape.matmul(h_t, params.w_k)?;
    let v = tape.matmul(h_t, params.w_v)?;
    Ok((
        split_heads(tape, q, params.heads)?,
        split_heads(tape, k, params.heads)?,
        split_heads(tape, v, params.heads)?,
    ))
}

/// Attention weights `softmax(Q Kᵀ / √d_k + mask)` for per-head `Q`, `K`.
pub fn attention_weights<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, mask: Option<&AttentionMask>) -> Result<Var> {
    let (sq, sk) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if sq.len() != 4 || sk.len() != 4 || sq[3] != sk[3] || sq[..2] != sk[..2] {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("queries {sq:?} and keys {sk:?} are incompatible"),
        ));
    }
    let d_k = sq[3] as f64;
    let scores = tape.matmul_nt(q, k)?;
    let mut scores = tape.scale(scores, 1.0 / d_k.sqrt())?;
    if let Some(mask) = mask {
        if mask.dims() != (sq[0], sq[2], sk[2]) {
            return Err(Error::shape(
                "scaled_dot_attention",
                format!("mask {:?} does not cover scores {:?}", mask.dims(), tape.shape(scores)),
            ));
        }
        let additive = mask.additive()?;
        scores = tape.add_broadcast_constant(scores, &additive)?;
    }
    tape.softmax(scores, 3)
}

/// `softmax(Q Kᵀ / √d_k + mask) · V` over `[b, heads, t, d_k]` operands.
pub fn scaled_dot_attention<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let (sk, sv) = (tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if sk.len() != 4 || sv.len() != 4 || sk[..3] != sv[..3] {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("keys {sk:?} and values {sv:?} are incompatible"),
        ));
    }
    let weights = attention_weights(tape, q, k, mask)?;
    tape.matmul(weights, v)
}

/// Where an attention block gets its keys and values from.
#[derive(Debug, Clone, Copy)]
pub enum KeyValues {
    /// Project `h_t` with the block's own `W^K`, `W^V`.
    Project(Var),
    /// Ready-made per-head keys and values `[b, heads, t_k, d_k]`.
    Override { k: Var, v: Var },
}

pub fn multi_head_attention<T: Real>(
    tape: &mut Tape<T>,
    params: &AttentionParams,
    h_s: Var,
    kv: KeyValues,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let d = params.validate(tape)?;
    let (q, k, v) = match kv {
        KeyValues::Project(h_t) => project_qkv(tape, params, h_s, h_t)?,
        KeyValues::Override { k, v } => {
            let q = tape.matmul(h_s, params.w_q)?;
            let q = split_heads(tape, q, params.heads)?;
            let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
            let ok = sk.len() == 4 && sk == sv && sk[0] == sq[0] && sk[1] == params.heads && sk[3] == d / params.heads;
            if !ok {
                return Err(Error::shape(
                    "multi_head_attention",
                    format!("override keys {sk:?} / values {sv:?} do not match queries {sq:?}"),
                ));
            }
            (q, k, v)
        }
    };
    let context = scaled_dot_attention(tape, q, k, v, mask)?;
    let merged = merge_heads(tape, context)?;
    tape.matmul(merged, params.w_o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = SeedStream::new(seed).rng();
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn eye(d: usize) -> Tensor<f64> {
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            data[i * d + i] = 1.0;
        }
        Tensor::new(vec![d, d], data).unwrap()
    }

    fn params(tape: &mut Tape<f64>, d: usize, heads: usize, seed: u64) -> AttentionParams {
        AttentionParams {
            w_q: tape.param(random(&[d, d], seed)),
            w_k: tape.param(random(&[d, d], seed + 1)),
            w_v: tape.param(random(&[d, d], seed + 2)),
            w_o: tape.param(random(&[d, d], seed + 3)),
            heads,
        }
    }

    #[test]
    fn identity_query_projection_returns_input() {
        let mut tape = Tape::new();
        let x = random(&[1, 3, 4], 1);
        let h = tape.constant(x.clone());
        let p = AttentionParams {
            w_q: tape.constant(eye(4)),
            w_k: tape.constant(eye(4)),
            w_v: tape.constant(eye(4)),
            w_o: tape.constant(eye(4)),
            heads: 1,
        };
        let (q, _, _) = project_qkv(&mut tape, &p, h, h).unwrap();
        assert_eq!(tape.shape(q), &[1, 1, 3, 4]);
        assert_eq!(tape.value(q).data(), x.data());
    }

    #[test]
    fn single_key_returns_value() {
        let mut tape = Tape::new();
        let q = tape.constant(random(&[1, 2, 3, 4], 1));
        let k = tape.constant(random(&[1, 2, 1, 4], 2));
        let v = random(&[1, 2, 1, 4], 3);
        let vv = tape.constant(v.clone());
        let out = scaled_dot_attention(&mut tape, q, k, vv, None).unwrap();
        for h in 0..2 {
            for i in 0..3 {
                for c in 0..4 {
                    let got = tape.value(out).data()[(h * 3 + i) * 4 + c];
                    assert!((got - v.data()[h * 4 + c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let mut tape = Tape::new();
        let q = tape.constant(random(&[1, 1, 2, 3], 1));
        let key_row = random(&[3], 2);
        let keys: Vec<f64> = (0..4).flat_map(|_| key_row.data().to_vec()).collect();
        let k = tape.constant(Tensor::new(vec![1, 1, 4, 3], keys).unwrap());
        let v = random(&[1, 1, 4, 3], 3);
        let vv = tape.constant(v.clone());
        let out = scaled_dot_attention(&mut tape, q, k, vv, None).unwrap();
        for c in 0..3 {
            let mean = (0..4).map(|j| v.data()[j * 3 + c]).sum::<f64>() / 4.0;
            assert!((tape.value(out).data()[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn pre_softmax_score_is_scaled_by_root_dk() {
        let mut tape = Tape::<f64>::new();
        let e1 = Tensor::from_f64(vec![1, 1, 1, 4], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let q = tape.constant(e1.clone());
        let k = tape.constant(e1);
        let scores = tape.matmul_nt(q, k).unwrap();
        let scaled = tape.scale(scores, 1.0 / 2.0).unwrap();
        assert_eq!(tape.value(scaled).data(), &[0.5]);
        // two keys: e1 and 0 -> weights softmax([0.5, 0])
        let k2 = tape.constant(Tensor::from_f64(vec![1, 1, 2, 4], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let w = attention_weights(&mut tape, q, k2, None).unwrap();
        let want = 0.5f64.exp() / (0.5f64.exp() + 1.0);
        assert!((tape.value(w).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let mask = AttentionMask::padding(&[0], 2, 3);
        assert!(mask.additive::<f64>().is_err());
        let causal = AttentionMask::causal(1, 3);
        assert!(causal.keeps(0, 2, 0) && !causal.keeps(0, 0, 1));
    }

    #[test]
    fn one_head_matches_single_head_attention() {
        let mut tape = Tape::new();
        let p = params(&mut tape, 4, 1, 10);
        let hs = tape.constant(random(&[2, 3, 4], 1));
        let ht = tape.constant(random(&[2, 5, 4], 2));
        let out = multi_head_attention(&mut tape, &p, hs, KeyValues::Project(ht), None).unwrap();

        let q = tape.matmul(hs, p.w_q).unwrap();
        let k = tape.matmul(ht, p.w_k).unwrap();
        let v = tape.matmul(ht, p.w_v).unwrap();
        let q = tape.reshape(q, &[2, 1, 3, 4]).unwrap();
        let k = tape.reshape(k, &[2, 1, 5, 4]).unwrap();
        let v = tape.reshape(v, &[2, 1, 5, 4]).unwrap();
        let ctx = scaled_dot_attention(&mut tape, q, k, v, None).unwrap();
        let ctx = tape.reshape(ctx, &[2, 3, 4]).unwrap();
        let manual = tape.matmul(ctx, p.w_o).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(manual)) < 1e-12);
    }

    #[test]
    fn identity_override_matches_projection() {
        let mut tape = Tape::new();
        let p = params(&mut tape, 8, 2, 20);
        let h = tape.constant(random(&[2, 4, 8], 3));
        let mask = AttentionMask::causal(2, 4);
        let plain = multi_head_attention(&mut tape, &p, h, KeyValues::Project(h), Some(&mask)).unwrap();
        let (_, k, v) = project_qkv(&mut tape, &p, h, h).unwrap();
        let over = multi_head_attention(&mut tape, &p, h, KeyValues::Override { k, v }, Some(&mask)).unwrap();
        assert_eq!(tape.value(plain), tape.value(over));
    }

    #[test]
    fn override_shape_mismatch_is_rejected() {
        let mut tape = Tape::new();
        let p = params(&mut tape, 8, 2, 20);
        let h = tape.constant(random(&[2, 4, 8], 3));
        let k = tape.constant(random(&[2, 4, 4, 2], 4));
        assert!(multi_head_attention(&mut tape, &p, h, KeyValues::Override { k, v: k }, None).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one_over_unmasked_keys() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(random(&[2, 2, 4, 3], 5));
        let k = tape.constant(random(&[2, 2, 4, 3], 6));
        let mask = AttentionMask::causal_padded(&[4, 2], 4);
        let w = attention_weights(&mut tape, q, k, Some(&mask)).unwrap();
        let wv = tape.value(w).data();
        for b in 0..2 {
            for h in 0..2 {
                for i in 0..4 {
                    let row = &wv[((b * 2 + h) * 4 + i) * 4..][..4];
                    let kept: f64 = (0..4).filter(|&j| mask.keeps(b, i, j)).map(|j| row[j]).sum();
                    assert!((kept - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn whole_block_gradient_check() {
        let inputs = [
            random(&[4, 4], 1),
            random(&[4, 4], 2),
            random(&[4, 4], 3),
            random(&[4, 4], 4),
            random(&[1, 3, 4], 5),
            random(&[1, 3, 4], 6),
        ];
        let mask = AttentionMask::causal(1, 3);
        let report = grad_check(
            |t, v| {
                let p = AttentionParams {
                    w_q: v[0],
                    w_k: v[1],
                    w_v: v[2],
                    w_o: v[3],
                    heads: 2,
                };
                let out = multi_head_attention(t, &p, v[4], KeyValues::Project(v[4]), Some(&mask))?;
                let w = t.mul(out, v[5])?;
                t.sum(w)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    proptest! {
        #[test]
        fn causal_barrier(seed in 0u64..200, j in 1usize..5) {
            let mut tape = Tape::new();
            let p = params(&mut tape, 8, 2, seed);
            let x = random(&[2, 5, 8], seed + 100);
            let mut perturbed = x.clone();
            for b in 0..2 {
                for c in 0..8 {
                    perturbed.data_mut()[(b * 5 + j) * 8 + c] += 3.0;
                }
            }
            let mask = AttentionMask::causal(2, 5);
            let h1 = tape.constant(x);
            let h2 = tape.constant(perturbed);
            let o1 = multi_head_attention(&mut tape, &p, h1, KeyValues::Project(h1), Some(&mask)).unwrap();
            let o2 = multi_head_attention(&mut tape, &p, h2, KeyValues::Project(h2), Some(&mask)).unwrap();
            for b in 0..2 {
                for i in 0..j {
                    let a = &tape.value(o1).data()[(b * 5 + i) * 8..][..8];
                    let c = &tape.value(o2).data()[(b * 5 + i) * 8..][..8];
                    prop_assert_eq!(a, c);
                }
            }
        }

        #[test]
        fn permuting_equal_keys_changes_nothing(seed in 0u64..200) {
            let mut tape = Tape::new();
            let q = tape.constant(random(&[1, 1, 2, 3], seed));
            let key_row = random(&[3], seed + 1);
            let keys: Vec<f64> = (0..4).flat_map(|_| key_row.data().to_vec()).collect();
            let k = tape.constant(Tensor::new(vec![1, 1, 4, 3], keys).unwrap());
            let v = random(&[1, 1, 4, 3], seed + 2);
            let mut rev = Vec::new();
            for j in (0..4).rev() {
                rev.extend_from_slice(&v.data()[j * 3..(j + 1) * 3]);
            }
            let v1 = tape.constant(v);
            let v2 = tape.constant(Tensor::new(vec![1, 1, 4, 3], rev).unwrap());
            let o1 = scaled_dot_attention(&mut tape, q, k, v1, None).unwrap();
            let o2 = scaled_dot_attention(&mut tape, q, k, v2, None).unwrap();
            prop_assert!(tape.value(o1).max_abs_diff(tape.value(o2)) <= 1e-6);
        }
    }
}
