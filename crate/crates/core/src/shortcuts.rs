//! Shortcut connections into attention keys and values.
//!
//! A shortcut-equipped layer computes two candidate key arrays, one from the
//! layer input `H_{l-1}` and one from a shortcut source (normally the
//! embedding layer output `E`), and mixes them with a sigmoid gate:
//!
//! ```text
//! K_sc = E · W_k_sc            K = H_{l-1} · W_k
//! r    = sigmoid(K_sc + K + b_k)
//! K'   = r ⊙ K_sc + (1 − r) ⊙ K
//! ```
//!
//! and likewise for values. The feature-fusion form replaces the two separate
//! projections by one projection of `[E; H_{l-1}]` whose output is split in
//! half along the feature axis.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ShortcutKind {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "lexical")]
    Lexical,
    #[serde(rename = "fusion")]
    LexicalFusion,
    #[serde(rename = "nonlexical")]
    NonLexical,
    #[serde(rename = "dec2enc")]
    DecToEncLexical,
    #[serde(rename = "dec2enc+self")]
    SelfPlusDecToEnc,
}

impl ShortcutKind {
    pub const ALL: [ShortcutKind; 6] = [
        ShortcutKind::None,
        ShortcutKind::Lexical,
        ShortcutKind::LexicalFusion,
        ShortcutKind::NonLexical,
        ShortcutKind::DecToEncLexical,
        ShortcutKind::SelfPlusDecToEnc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShortcutKind::None => "none",
            ShortcutKind::Lexical => "lexical",
            ShortcutKind::LexicalFusion => "fusion",
            ShortcutKind::NonLexical => "nonlexical",
            ShortcutKind::DecToEncLexical => "dec2enc",
            ShortcutKind::SelfPlusDecToEnc => "dec2enc+self",
        }
    }

    pub fn has_self_shortcuts(self) -> bool {
        matches!(
            self,
            ShortcutKind::Lexical
                | ShortcutKind::LexicalFusion
                | ShortcutKind::NonLexical
                | ShortcutKind::SelfPlusDecToEnc
        )
    }

    pub fn has_cross_shortcuts(self) -> bool {
        matches!(self, ShortcutKind::DecToEncLexical | ShortcutKind::SelfPlusDecToEnc)
    }
}

impl fmt::Display for ShortcutKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShortcutKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShortcutKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown shortcut variant {s:?}; expected one of none|lexical|fusion|nonlexical|dec2enc|dec2enc+self"
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Encoder,
    Decoder,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Encoder => "encoder",
            Side::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    #[serde(rename = "self")]
    SelfAttention,
    #[serde(rename = "cross")]
    CrossAttention,
}

impl Site {
    pub fn as_str(self) -> &'static str {
        match self {
            Site::SelfAttention => "self",
            Site::CrossAttention => "cross",
        }
    }
}

/// Shortcut kind plus per-sub-network enable flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShortcutVariant {
    pub kind: ShortcutKind,
    #[serde(default = "enabled")]
    pub encoder: bool,
    #[serde(default = "enabled")]
    pub decoder: bool,
}

fn enabled() -> bool {
    true
}

impl Default for ShortcutVariant {
    fn default() -> Self {
        Self::new(ShortcutKind::None)
    }
}

impl ShortcutVariant {
    pub fn new(kind: ShortcutKind) -> Self {
        Self {
            kind,
            encoder: true,
            decoder: true,
        }
    }

    /// Whether self-attention on `side` receives a shortcut.
    pub fn self_shortcut(&self, side: Side) -> bool {
        let enabled = match side {
            Side::Encoder => self.encoder,
            Side::Decoder => self.decoder,
        };
        enabled && self.kind.has_self_shortcuts()
    }

    /// Whether decoder-to-encoder attention receives a source-embedding shortcut.
    pub fn cross_shortcut(&self) -> bool {
        self.decoder && self.kind.has_cross_shortcuts()
    }

    pub fn shortcut_at(&self, side: Side, site: Site) -> bool {
        match site {
            Site::SelfAttention => self.self_shortcut(side),
            Site::CrossAttention => side == Side::Decoder && self.cross_shortcut(),
        }
    }

    pub fn fused(&self) -> bool {
        self.kind == ShortcutKind::LexicalFusion
    }
}

/// Per-layer shortcut projections and gate biases.
#[derive(Debug, Clone, Copy)]
pub struct GateParams {
    pub w_k_sc: Var,
    pub w_v_sc: Var,
    pub b_k: Var,
    pub b_v: Var,
}

/// Feature-fusion weights: `w_k`, `w_v` map `2d -> 2d`.
#[derive(Debug, Clone, Copy)]
pub struct FusedParams {
    pub w_k: Var,
    pub w_v: Var,
    pub b_k: Var,
    pub b_v: Var,
}

/// How one attention block derives its keys and values.
#[derive(Debug, Clone, Copy)]
pub enum KvProjection {
    Plain {
        w_k: Var,
        w_v: Var,
    },
    Gated {
        w_k: Var,
        w_v: Var,
        gate: GateParams,
    },
    Fused(FusedParams),
    /// Gate-less residual sum `K_sc + K`. Kept only to reproduce its training failure.
    Residual {
        w_k: Var,
        w_v: Var,
        w_k_sc: Var,
        w_v_sc: Var,
    },
}

impl KvProjection {
    pub fn has_shortcut(&self) -> bool {
        !matches!(self, KvProjection::Plain { .. })
    }

    pub fn gate_params(&self) -> Result<&GateParams> {
        match self {
            KvProjection::Gated { gate, .. } => Ok(gate),
            _ => Err(Error::Config("layer has no shortcut gate parameters".into())),
        }
    }
}

/// `(E · W_k_sc, E · W_v_sc)`
pub fn project_shortcut<T: Real>(tape: &mut Tape<T>, e: Var, gate: &GateParams) -> Result<(Var, Var)> {
    Ok((tape.matmul(e, gate.w_k_sc)?, tape.matmul(e, gate.w_v_sc)?))
}

/// Lexical relevance weight `sigmoid(x_sc + x_h + bias)`.
pub fn gate<T: Real>(tape: &mut Tape<T>, x_sc: Var, x_h: Var, bias: Var) -> Result<Var> {
    let sum = tape.add(x_sc, x_h)?;
    let biased = tape.add_row(sum, bias)?;
    tape.sigmoid(biased)
}

/// `r ⊙ x_sc + (1 − r) ⊙ x_h`
pub fn fuse<T: Real>(tape: &mut Tape<T>, r: Var, x_sc: Var, x_h: Var) -> Result<Var> {
    tape.blend(r, x_sc, x_h)
}

/// Projects `[E; H_{l-1}]` with the fused `2d × 2d` weights and splits each
/// result into its shortcut half and hidden half: `(K_sc, K, V_sc, V)`.
pub fn fusion_project<T: Real>(
    tape: &mut Tape<T>,
    e: Var,
    h_prev: Var,
    w_k: Var,
    w_v: Var,
) -> Result<(Var, Var, Var, Var)> {
    let axis = tape.shape(e).len() - 1;
    let joined = tape.concat(&[e, h_prev], axis)?;
    let mut halves = Vec::with_capacity(4);
    for w in [w_k, w_v] {
        let projected = tape.matmul(joined, w)?;
        let width = tape.shape(projected)[axis];
        if !width.is_multiple_of(2) {
            return Err(Error::shape(
                "fusion_project",
                format!("cannot halve projection width {width}"),
            ));
        }
        halves.extend(tape.split(projected, axis, &[width / 2, width / 2])?);
    }
    Ok((halves[0], halves[1], halves[2], halves[3]))
}

/// Keys and values handed to attention, plus the gate activations when gated.
#[derive(Debug, Clone, Copy)]
pub struct FusedKv {
    pub k: Var,
    pub v: Var,
    pub gates: Option<(Var, Var)>,
}

/// Keys/values for one attention block from its input `h` and an optional
/// shortcut `source`, both `[b, t, d]`. The result is still `[b, t, d]`;
/// gating happens before the per-head split.
pub fn key_values<T: Real>(
    tape: &mut Tape<T>,
    projection: &KvProjection,
    h: Var,
    source: Option<Var>,
) -> Result<FusedKv> {
    let needs_source = || Error::InvalidArgument("shortcut projection requires a shortcut source".into());
    match *projection {
        KvProjection::Plain { w_k, w_v } => Ok(FusedKv {
            k: tape.matmul(h, w_k)?,
            v: tape.matmul(h, w_v)?,
            gates: None,
        }),
        KvProjection::Gated { w_k, w_v, gate: g } => {
            let e = source.ok_or_else(needs_source)?;
            let (k_sc, v_sc) = project_shortcut(tape, e, &g)?;
            let k = tape.matmul(h, w_k)?;
            let v = tape.matmul(h, w_v)?;
            gated_pair(tape, (k_sc, k, g.b_k), (v_sc, v, g.b_v))
        }
        KvProjection::Fused(p) => {
            let e = source.ok_or_else(needs_source)?;
            let (k_sc, k, v_sc, v) = fusion_project(tape, e, h, p.w_k, p.w_v)?;
            gated_pair(tape, (k_sc, k, p.b_k), (v_sc, v, p.b_v))
        }
        KvProjection::Residual {
            w_k,
            w_v,
            w_k_sc,
            w_v_sc,
        } => {
            let e = source.ok_or_else(needs_source)?;
            let k_sc = tape.matmul(e, w_k_sc)?;
            let v_sc = tape.matmul(e, w_v_sc)?;
            let k = tape.matmul(h, w_k)?;
            let v = tape.matmul(h, w_v)?;
            Ok(FusedKv {
                k: tape.add(k_sc, k)?,
                v: tape.add(v_sc, v)?,
                gates: None,
            })
        }
    }
}

fn gated_pair<T: Real>(tape: &mut Tape<T>, keys: (Var, Var, Var), values: (Var, Var, Var)) -> Result<FusedKv> {
    let r_k = gate(tape, keys.0, keys.1, keys.2)?;
    let r_v = gate(tape, values.0, values.1, values.2)?;
    Ok(FusedKv {
        k: fuse(tape, r_k, keys.0, keys.1)?,
        v: fuse(tape, r_v, values.0, values.1)?,
        gates: Some((r_k, r_v)),
    })
}

/// States available when layer `l` runs: `hidden = [H_0, ..., H_{l-1}]`.
#[derive(Debug, Clone, Copy)]
pub struct LayerHistory<'a> {
    pub hidden: &'a [Var],
    /// Shortcut embedding of this sub-network.
    pub embedding: Var,
    /// Source-side embedding, when running in the decoder.
    pub source_embedding: Option<Var>,
}

/// Tensor feeding the shortcut of layer `layer` (1-based) at `site`.
pub fn shortcut_source(kind: ShortcutKind, site: Site, layer: usize, history: &LayerHistory<'_>) -> Result<Var> {
    if layer == 0 {
        return Err(Error::InvalidArgument("shortcut layers are numbered from 1".into()));
    }
    match (kind, site) {
        (ShortcutKind::Lexical | ShortcutKind::LexicalFusion | ShortcutKind::SelfPlusDecToEnc, Site::SelfAttention) => {
            Ok(history.embedding)
        }
        (ShortcutKind::NonLexical, Site::SelfAttention) => {
            // layer n reads H_{n-2}; the first layer has no antecedent beyond the embeddings
            let index = layer.saturating_sub(2);
            if history.hidden.len() < layer {
                return Err(Error::InvalidArgument(format!(
                    "layer {layer} needs states H_0..H_{} but only {} are available",
                    layer - 1,
                    history.hidden.len()
                )));
            }
            Ok(history.hidden[index])
        }
        (ShortcutKind::DecToEncLexical | ShortcutKind::SelfPlusDecToEnc, Site::CrossAttention) => history
            .source_embedding
            .ok_or_else(|| Error::InvalidArgument("decoder-to-encoder shortcut needs source embeddings".into())),
        (kind, site) => Err(Error::InvalidArgument(format!(
            "variant {kind} has no shortcut at {} attention",
            site.as_str()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use crate::tensor::{grad_check, Tensor};
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

    fn loop_matmul(x: &[f64], rows: usize, w: &Tensor<f64>) -> Vec<f64> {
        let (k, n) = (w.shape()[0], w.shape()[1]);
        let mut out = vec![0.0; rows * n];
        for i in 0..rows {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += x[i * k + p] * w.data()[p * n + j];
                }
            }
        }
        out
    }

    fn gate_params(tape: &mut Tape<f64>, w_k: Tensor<f64>, w_v: Tensor<f64>, d: usize) -> GateParams {
        GateParams {
            w_k_sc: tape.param(w_k),
            w_v_sc: tape.param(w_v),
            b_k: tape.param(Tensor::zeros(vec![d])),
            b_v: tape.param(Tensor::zeros(vec![d])),
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for kind in ShortcutKind::ALL {
            assert_eq!(kind.as_str().parse::<ShortcutKind>().unwrap(), kind);
        }
        assert!("residual".parse::<ShortcutKind>().is_err());
    }

    #[test]
    fn enable_flags_toggle_sub_networks() {
        let mut v = ShortcutVariant::new(ShortcutKind::Lexical);
        v.encoder = false;
        assert!(!v.self_shortcut(Side::Encoder) && v.self_shortcut(Side::Decoder));
        assert!(!v.cross_shortcut());
        let both = ShortcutVariant::new(ShortcutKind::SelfPlusDecToEnc);
        assert!(both.self_shortcut(Side::Encoder) && both.cross_shortcut());
        let d2e = ShortcutVariant::new(ShortcutKind::DecToEncLexical);
        assert!(!d2e.self_shortcut(Side::Decoder) && d2e.shortcut_at(Side::Decoder, Site::CrossAttention));
    }

    #[test]
    fn project_shortcut_examples() {
        let mut tape = Tape::new();
        let e = random(&[2, 3, 4], 1);
        let ev = tape.constant(e.clone());
        let g = gate_params(&mut tape, eye(4), eye(4), 4);
        let (k, _) = project_shortcut(&mut tape, ev, &g).unwrap();
        assert_eq!(tape.value(k).data(), e.data());

        let zero = tape.constant(Tensor::zeros(vec![2, 3, 4]));
        let g = gate_params(&mut tape, random(&[4, 4], 2), random(&[4, 4], 3), 4);
        let (k, v) = project_shortcut(&mut tape, zero, &g).unwrap();
        assert!(tape
            .value(k)
            .data()
            .iter()
            .chain(tape.value(v).data())
            .all(|&x| x == 0.0));

        let w = random(&[4, 4], 4);
        let g = gate_params(&mut tape, w.clone(), w.clone(), 4);
        let (k, _) = project_shortcut(&mut tape, ev, &g).unwrap();
        let want = loop_matmul(e.data(), 6, &w);
        for (a, b) in tape.value(k).data().iter().zip(want) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn gate_examples() {
        let mut tape = Tape::new();
        let x = random(&[2, 3], 1);
        let neg: Vec<f64> = x.data().iter().map(|v| -v).collect();
        let x_sc = tape.constant(x);
        let x_h = tape.constant(Tensor::new(vec![2, 3], neg).unwrap());
        let zero = tape.constant(Tensor::zeros(vec![3]));
        let r = gate(&mut tape, x_sc, x_h, zero).unwrap();
        assert!(tape.value(r).data().iter().all(|&v| v == 0.5));

        for (bias, want) in [(40.0, 1.0), (-40.0, 0.0)] {
            let b = tape.constant(Tensor::full(vec![3], bias));
            let r = gate(&mut tape, x_sc, x_sc, b).unwrap();
            for &v in tape.value(r).data() {
                assert!((v - want).abs() < 1e-12 && v > 0.0 && v < 1.0);
            }
        }

        let wrong = tape.constant(Tensor::zeros(vec![3, 2]));
        assert!(gate(&mut tape, x_sc, wrong, zero).is_err());
    }

    #[test]
    fn fuse_examples() {
        let mut tape = Tape::new();
        let x_sc = tape.constant(Tensor::full(vec![3], 2.0));
        let x_h = tape.constant(Tensor::full(vec![3], 4.0));
        for (r, want) in [(1.0, 2.0), (0.0, 4.0), (0.5, 3.0)] {
            let rv = tape.constant(Tensor::full(vec![3], r));
            let out = fuse(&mut tape, rv, x_sc, x_h).unwrap();
            assert!(tape.value(out).data().iter().all(|&v| v == want));
        }
    }

    #[test]
    fn fuse_is_convex_on_random_triples() {
        let mut rng = SeedStream::new(99).rng();
        let n = 10_000;
        let r: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let a: Vec<f32> = (0..n).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let b: Vec<f32> = (0..n).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let mut tape = Tape::<f32>::new();
        let vr = tape.constant(Tensor::new(vec![n], r).unwrap());
        let va = tape.constant(Tensor::new(vec![n], a.clone()).unwrap());
        let vb = tape.constant(Tensor::new(vec![n], b.clone()).unwrap());
        let out = fuse(&mut tape, vr, va, vb).unwrap();
        for (i, &x) in tape.value(out).data().iter().enumerate() {
            assert!(a[i].min(b[i]) <= x && x <= a[i].max(b[i]));
        }
    }

    #[test]
    fn fusion_identity_weights_split_inputs() {
        let (e, h) = (random(&[1, 2, 3], 1), random(&[1, 2, 3], 2));
        let mut tape = Tape::new();
        let (ev, hv) = (tape.constant(e.clone()), tape.constant(h.clone()));
        let w = tape.constant(eye(6));
        let (k_sc, k, v_sc, v) = fusion_project(&mut tape, ev, hv, w, w).unwrap();
        assert_eq!(tape.value(k_sc).data(), e.data());
        assert_eq!(tape.value(k).data(), h.data());
        assert_eq!(tape.value(v_sc).data(), e.data());
        assert_eq!(tape.value(v).data(), h.data());
    }

    #[test]
    fn fusion_symmetric_input_makes_fuse_irrelevant() {
        let d = 3;
        let half = random(&[d, d], 5);
        // [[A, A], [B, B]] : identical column halves
        let lower = random(&[d, d], 6);
        let mut w = vec![0.0; 4 * d * d];
        for i in 0..d {
            for j in 0..d {
                w[i * 2 * d + j] = half.data()[i * d + j];
                w[i * 2 * d + d + j] = half.data()[i * d + j];
                w[(d + i) * 2 * d + j] = lower.data()[i * d + j];
                w[(d + i) * 2 * d + d + j] = lower.data()[i * d + j];
            }
        }
        let e = random(&[1, 4, d], 7);
        let mut tape = Tape::new();
        let ev = tape.constant(e);
        let wv = tape.constant(Tensor::new(vec![2 * d, 2 * d], w).unwrap());
        let (k_sc, k, _, _) = fusion_project(&mut tape, ev, ev, wv, wv).unwrap();
        assert_eq!(tape.value(k_sc), tape.value(k));
        let r = tape.constant(random(&[1, 4, d], 8).cast::<f64>());
        let fused = fuse(&mut tape, r, k_sc, k).unwrap();
        assert_eq!(tape.value(fused), tape.value(k));
    }

    #[test]
    fn fusion_matches_loop_oracle() {
        let (d, rows) = (3, 4);
        let (e, h) = (random(&[1, rows, d], 11), random(&[1, rows, d], 12));
        let w = random(&[2 * d, 2 * d], 13);
        let mut tape = Tape::new();
        let (ev, hv, wv) = (
            tape.constant(e.clone()),
            tape.constant(h.clone()),
            tape.constant(w.clone()),
        );
        let (k_sc, k, _, _) = fusion_project(&mut tape, ev, hv, wv, wv).unwrap();
        let mut joined = Vec::new();
        for r in 0..rows {
            joined.extend_from_slice(&e.data()[r * d..(r + 1) * d]);
            joined.extend_from_slice(&h.data()[r * d..(r + 1) * d]);
        }
        let full = loop_matmul(&joined, rows, &w);
        for r in 0..rows {
            for c in 0..d {
                assert!((tape.value(k_sc).data()[r * d + c] - full[r * 2 * d + c]).abs() <= 1e-6);
                assert!((tape.value(k).data()[r * d + c] - full[r * 2 * d + d + c]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn fusion_rejects_odd_width() {
        let mut tape = Tape::new();
        let e = tape.constant(random(&[1, 2, 2], 1));
        let w = tape.constant(random(&[4, 3], 2));
        assert!(fusion_project(&mut tape, e, e, w, w).is_err());
    }

    #[test]
    fn shortcut_sources() {
        let mut tape = Tape::<f64>::new();
        let hidden: Vec<Var> = (0..6).map(|i| tape.constant(Tensor::full(vec![1], i as f64))).collect();
        let emb = tape.constant(Tensor::full(vec![1], -1.0));
        let src = tape.constant(Tensor::full(vec![1], -2.0));
        let history = LayerHistory {
            hidden: &hidden,
            embedding: emb,
            source_embedding: Some(src),
        };
        assert_eq!(
            shortcut_source(ShortcutKind::NonLexical, Site::SelfAttention, 6, &history).unwrap(),
            hidden[4]
        );
        assert_eq!(
            shortcut_source(ShortcutKind::NonLexical, Site::SelfAttention, 1, &history).unwrap(),
            hidden[0]
        );
        for l in 1..=6 {
            assert_eq!(
                shortcut_source(ShortcutKind::Lexical, Site::SelfAttention, l, &history).unwrap(),
                emb
            );
            assert_eq!(
                shortcut_source(ShortcutKind::DecToEncLexical, Site::CrossAttention, l, &history).unwrap(),
                src
            );
        }
        assert!(shortcut_source(ShortcutKind::NonLexical, Site::SelfAttention, 0, &history).is_err());
        assert!(shortcut_source(ShortcutKind::DecToEncLexical, Site::SelfAttention, 1, &history).is_err());
    }

    #[test]
    fn gated_path_gradient_check() {
        let d = 4;
        let inputs = [
            random(&[1, 3, d], 1),
            random(&[1, 3, d], 2),
            random(&[d, d], 3),
            random(&[d, d], 4),
            random(&[d, d], 5),
            random(&[d, d], 6),
            random(&[d], 7),
            random(&[d], 8),
        ];
        let report = grad_check(
            |t, v| {
                let proj = KvProjection::Gated {
                    w_k: v[4],
                    w_v: v[5],
                    gate: GateParams {
                        w_k_sc: v[2],
                        w_v_sc: v[3],
                        b_k: v[6],
                        b_v: v[7],
                    },
                };
                let kv = key_values(t, &proj, v[1], Some(v[0]))?;
                let prod = t.mul(kv.k, kv.v)?;
                t.sum(prod)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");

        let fused_inputs = [
            random(&[1, 3, d], 1),
            random(&[1, 3, d], 2),
            random(&[2 * d, 2 * d], 3),
            random(&[2 * d, 2 * d], 4),
            random(&[d], 7),
            random(&[d], 8),
        ];
        let report = grad_check(
            |t, v| {
                let proj = KvProjection::Fused(FusedParams {
                    w_k: v[2],
                    w_v: v[3],
                    b_k: v[4],
                    b_v: v[5],
                });
                let kv = key_values(t, &proj, v[1], Some(v[0]))?;
                let prod = t.mul(kv.k, kv.v)?;
                t.sum(prod)
            },
            &fused_inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn closed_gate_reproduces_plain_keys() {
        let d = 4;
        let mut tape = Tape::new();
        let e = tape.constant(random(&[2, 3, d], 1));
        let h = tape.constant(random(&[2, 3, d], 2));
        let (w_k, w_v) = (tape.constant(random(&[d, d], 3)), tape.constant(random(&[d, d], 4)));
        let closed = tape.constant(Tensor::full(vec![d], -1e4));
        let gated = KvProjection::Gated {
            w_k,
            w_v,
            gate: GateParams {
                w_k_sc: tape.constant(random(&[d, d], 5)),
                w_v_sc: tape.constant(random(&[d, d], 6)),
                b_k: closed,
                b_v: closed,
            },
        };
        let a = key_values(&mut tape, &gated, h, Some(e)).unwrap();
        let b = key_values(&mut tape, &KvProjection::Plain { w_k, w_v }, h, None).unwrap();
        assert!(tape.value(a.k).max_abs_diff(tape.value(b.k)) < 1e-12);
        assert!(tape.value(a.v).max_abs_diff(tape.value(b.v)) < 1e-12);
    }
}
