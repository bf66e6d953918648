//! Variable attention masks: a fixed window over the past, chunks over the future.
//!
//! A frame may attend to `lb` frames back and forward to the end of its chunk,
//! where chunks have `C = la + 1` frames. Inside a chunk every frame sees the
//! chunk end, so stacking layers never reaches past it: the future reach stays
//! at most `la` frames at any depth, while the past window grows with depth.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::frontend::ENCODER_FRAME_S;
use crate::{Error, Result};

/// Masks up to this length are stored as a dense boolean matrix.
pub const MATERIALIZE_LIMIT: usize = 4096;

/// A context length in seconds, or unbounded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Context {
    Seconds(f64),
    Inf,
}

impl Context {
    pub fn is_inf(self) -> bool {
        matches!(self, Context::Inf)
    }
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Context::Seconds(s) => write!(f, "{s}"),
            Context::Inf => f.write_str("inf"),
        }
    }
}

impl Serialize for Context {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Context::Seconds(s) => ser.serialize_f64(*s),
            Context::Inf => ser.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Context {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(de)? {
            Raw::Num(v) if v >= 0.0 && v.is_finite() => Ok(Context::Seconds(v)),
            Raw::Num(v) => Err(serde::de::Error::custom(format!(
                "context must be >= 0 or \"inf\", got {v}"
            ))),
            Raw::Str(s) if s.eq_ignore_ascii_case("inf") => Ok(Context::Inf),
            Raw::Str(s) => s
                .parse::<f64>()
                .ok()
                .filter(|v| *v >= 0.0 && v.is_finite())
                .map(Context::Seconds)
                .ok_or_else(|| serde::de::Error::custom(format!("bad context value `{s}`"))),
        }
    }
}

/// A frame count, or unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frames {
    Finite(usize),
    Inf,
}

impl Frames {
    pub fn finite(self) -> Option<usize> {
        match self {
            Frames::Finite(n) => Some(n),
            Frames::Inf => None,
        }
    }
}

impl fmt::Display for Frames {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Frames::Finite(n) => write!(f, "{n}"),
            Frames::Inf => f.write_str("inf"),
        }
    }
}

/// One (look-back, look-ahead) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub lb: Context,
    pub la: Context,
}

impl ContextSpec {
    pub const FULL: ContextSpec = ContextSpec {
        lb: Context::Inf,
        la: Context::Inf,
    };

    pub fn new(lb: Context, la: Context) -> Self {
        Self { lb, la }
    }

    pub fn seconds(lb: f64, la: f64) -> Self {
        Self::new(Context::Seconds(lb), Context::Seconds(la))
    }

    pub fn lb_frames(&self) -> Result<Frames> {
        to_frames(self.lb)
    }

    pub fn la_frames(&self) -> Result<Frames> {
        to_frames(self.la)
    }

    pub fn label(&self) -> String {
        format!("lb={}/la={}", self.lb, self.la)
    }
}

/// Seconds to 40 ms frames, rounding half up.
pub fn to_frames(c: Context) -> Result<Frames> {
    match c {
        Context::Inf => Ok(Frames::Inf),
        Context::Seconds(s) if s < 0.0 || !s.is_finite() => Err(Error::InvalidInput(format!(
            "context must be non-negative, got {s}"
        ))),
        Context::Seconds(s) => Ok(Frames::Finite((s / ENCODER_FRAME_S + 0.5).floor() as usize)),
    }
}

/// Uniform discrete distributions over look-back and look-ahead values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpace {
    pub name: String,
    pub l_past: Vec<Context>,
    pub l_future: Vec<Context>,
}

impl SamplingSpace {
    /// Default space: past in {inf, 5.4, 4.6, 3.6} s, future in {0, 1, 1.8, inf} s.
    pub fn t1() -> Self {
        use Context::*;
        Self {
            name: "T1".into(),
            l_past: vec![Inf, Seconds(5.4), Seconds(4.6), Seconds(3.6)],
            l_future: vec![Seconds(0.0), Seconds(1.0), Seconds(1.8), Inf],
        }
    }

    /// Only the two extremes: causal or full context.
    pub fn t2() -> Self {
        use Context::*;
        Self {
            name: "T2".into(),
            l_past: vec![Inf, Seconds(5.4)],
            l_future: vec![Seconds(0.0), Inf],
        }
    }

    /// Dense grid: past {inf, 5.8, 5.6, .., 3.6}, future {0, 0.2, .., 1.8, inf}.
    pub fn t3() -> Self {
        let mut l_past = vec![Context::Inf];
        l_past.extend((0..12).map(|i| Context::Seconds((58 - 2 * i) as f64 / 10.0)));
        let mut l_future: Vec<Context> =
            (0..10).map(|i| Context::Seconds((2 * i) as f64 / 10.0)).collect();
        l_future.push(Context::Inf);
        Self {
            name: "T3".into(),
            l_past,
            l_future,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_uppercase().as_str() {
            "T1" => Some(Self::t1()),
            "T2" => Some(Self::t2()),
            "T3" => Some(Self::t3()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_past.is_empty() || self.l_future.is_empty() {
            return Err(Error::InvalidInput(format!(
                "sampling space `{}` has an empty list",
                self.name
            )));
        }
        for c in self.l_past.iter().chain(&self.l_future) {
            to_frames(*c)?;
        }
        Ok(())
    }
}

/// Draws look-back and look-ahead independently and uniformly.
pub fn sample_context<R: Rng + ?Sized>(space: &SamplingSpace, rng: &mut R) -> Result<ContextSpec> {
    space.validate()?;
    let lb = space.l_past[rng.gen_range(0..space.l_past.len())];
    let la = space.l_future[rng.gen_range(0..space.l_future.len())];
    Ok(ContextSpec { lb, la })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ChunkRule {
    lb: Frames,
    la: Frames,
    chunk: Frames,
}

/// Boolean attention pattern: `allows(t, s)` means query `t` may read key `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    len: usize,
    rule: Option<ChunkRule>,
    allow: Option<Vec<bool>>,
}

impl AttentionMask {
    /// An arbitrary mask given by a predicate; used for comparisons against
    /// other masking schemes.
    pub fn from_fn(len: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = vec![false; len * len];
        for t in 0..len {
            for s in 0..len {
                allow[t * len + s] = f(t, s);
            }
        }
        Self {
            len,
            rule: None,
            allow: Some(allow),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn lb_frames(&self) -> Option<Frames> {
        self.rule.map(|r| r.lb)
    }

    pub fn la_frames(&self) -> Option<Frames> {
        self.rule.map(|r| r.la)
    }

    pub fn chunk_size(&self) -> Option<Frames> {
        self.rule.map(|r| r.chunk)
    }

    pub fn is_materialized(&self) -> bool {
        self.allow.is_some()
    }

    /// Last frame visible to `t` under the chunk rule.
    pub fn chunk_end(&self, t: usize) -> Option<usize> {
        self.rule.map(|r| chunk_end(r.chunk, self.len, t))
    }

    pub fn allows(&self, t: usize, s: usize) -> bool {
        match &self.allow {
            Some(a) => a[t * self.len + s],
            None => self.rule_allows(t, s),
        }
    }

    /// Evaluates the implicit (lb, C) rule; for explicit masks, the matrix.
    pub fn rule_allows(&self, t: usize, s: usize) -> bool {
        match self.rule {
            Some(r) => rule_allows(r, self.len, t, s),
            None => self.allow.as_ref().expect("explicit masks are materialized")[t * self.len + s],
        }
    }

    /// Allowed key range `[lo, hi]` for query `t` when the mask is a chunk rule.
    pub fn row_range(&self, t: usize) -> Option<(usize, usize)> {
        self.rule.map(|r| {
            let lo = match r.lb {
                Frames::Finite(lb) => t.saturating_sub(lb),
                Frames::Inf => 0,
            };
            (lo, chunk_end(r.chunk, self.len, t))
        })
    }

    fn row_bits(&self, t: usize) -> Vec<u64> {
        let words = self.len.div_ceil(64);
        let mut bits = vec![0u64; words];
        for s in 0..self.len {
            if self.allows(t, s) {
                bits[s / 64] |= 1 << (s % 64);
            }
        }
        bits
    }
}

fn chunk_end(chunk: Frames, len: usize, t: usize) -> usize {
    match chunk {
        Frames::Finite(c) => ((t / c + 1) * c - 1).min(len - 1),
        Frames::Inf => len - 1,
    }
}

fn rule_allows(r: ChunkRule, len: usize, t: usize, s: usize) -> bool {
    let past_ok = match r.lb {
        Frames::Finite(lb) => s + lb >= t,
        Frames::Inf => true,
    };
    past_ok && s <= chunk_end(r.chunk, len, t)
}

/// Fixed-window past, chunked future with chunk size `la + 1`.
pub fn build_mask(len: usize, lb: Frames, la: Frames) -> Result<AttentionMask> {
    if len == 0 {
        return Err(Error::InvalidInput("mask length must be >= 1".into()));
    }
    let chunk = match la {
        Frames::Finite(n) => Frames::Finite(n + 1),
        Frames::Inf => Frames::Inf,
    };
    let rule = ChunkRule { lb, la, chunk };
    let allow = (len <= MATERIALIZE_LIMIT).then(|| {
        let mut a = vec![false; len * len];
        for t in 0..len {
            for s in 0..len {
                a[t * len + s] = rule_allows(rule, len, t, s);
            }
        }
        a
    });
    Ok(AttentionMask {
        len,
        rule: Some(rule),
        allow,
    })
}

pub fn mask_for_context(len: usize, ctx: &ContextSpec) -> Result<AttentionMask> {
    build_mask(len, ctx.lb_frames()?, ctx.la_frames()?)
}

/// For each frame, the smallest and largest input index that can influence it
/// through `n_layers` stacked masked-attention layers.
pub fn receptive_field(mask: &AttentionMask, n_layers: usize) -> Result<Vec<(usize, usize)>> {
    if n_layers == 0 {
        return Err(Error::InvalidInput("n_layers must be >= 1".into()));
    }
    let rows: Vec<Vec<u64>> = (0..mask.len).map(|t| mask.row_bits(t)).collect();
    let mut reach = rows.clone();
    for _ in 1..n_layers {
        reach = compose(&reach, &rows);
    }
    Ok(reach.iter().map(|r| bit_extent(r)).collect())
}

/// `true` when no frame's future reach grows beyond its single-layer reach at
/// any depth up to `n_layers`.
pub fn verify_no_lookahead_accumulation(mask: &AttentionMask, n_layers: usize) -> Result<bool> {
    if n_layers == 0 {
        return Err(Error::InvalidInput("n_layers must be >= 1".into()));
    }
    let rows: Vec<Vec<u64>> = (0..mask.len).map(|t| mask.row_bits(t)).collect();
    let base: Vec<usize> = rows.iter().map(|r| bit_extent(r).1).collect();
    let mut reach = rows.clone();
    for _ in 1..n_layers {
        reach = compose(&reach, &rows);
        if reach.iter().zip(&base).any(|(r, &b)| bit_extent(r).1 != b) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn compose(reach: &[Vec<u64>], rows: &[Vec<u64>]) -> Vec<Vec<u64>> {
    reach
        .iter()
        .map(|r| {
            let mut out = vec![0u64; r.len()];
            for (w, &word) in r.iter().enumerate() {
                let mut bits = word;
                while bits != 0 {
                    let s = w * 64 + bits.trailing_zeros() as usize;
                    bits &= bits - 1;
                    for (o, x) in out.iter_mut().zip(&rows[s]) {
                        *o |= x;
                    }
                }
            }
            out
        })
        .collect()
}

fn bit_extent(bits: &[u64]) -> (usize, usize) {
    let first = bits
        .iter()
        .enumerate()
        .find(|(_, w)| **w != 0)
        .map(|(i, w)| i * 64 + w.trailing_zeros() as usize);
    let last = bits
        .iter()
        .enumerate()
        .rev()
        .find(|(_, w)| **w != 0)
        .map(|(i, w)| i * 64 + 63 - w.leading_zeros() as usize);
    (first.unwrap_or(0), last.unwrap_or(0))
}

/// The allow matrix as CSV, one row per query frame (1 = allowed).
pub fn allow_csv(mask: &AttentionMask) -> String {
    let mut out = String::from("t");
    for s in 0..mask.len {
        out.push_str(&format!(",s{s}"));
    }
    out.push('\n');
    for t in 0..mask.len {
        out.push_str(&t.to_string());
        for s in 0..mask.len {
            out.push_str(if mask.allows(t, s) { ",1" } else { ",0" });
        }
        out.push('\n');
    }
    out
}

/// Reachability per layer depth as CSV: `layer,frame,min_reach,max_reach`.
pub fn reach_csv(mask: &AttentionMask, n_layers: usize) -> Result<String> {
    let mut out = String::from("layer,frame,min_reach,max_reach\n");
    for l in 1..=n_layers {
        for (t, (lo, hi)) in receptive_field(mask, l)?.into_iter().enumerate() {
            out.push_str(&format!("{l},{t},{lo},{hi}\n"));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    use Frames::{Finite as F, Inf};

    fn rows(mask: &AttentionMask) -> Vec<Vec<usize>> {
        (0..mask.len())
            .map(|t| (0..mask.len()).filter(|&s| mask.allows(t, s)).collect())
            .collect()
    }

    /// Reference: dense boolean matrix power, no bitsets.
    fn reach_oracle(mask: &AttentionMask, layers: usize) -> Vec<(usize, usize)> {
        let n = mask.len();
        let a: Vec<Vec<bool>> = (0..n)
            .map(|t| (0..n).map(|s| mask.allows(t, s)).collect())
            .collect();
        let mut r = a.clone();
        for _ in 1..layers {
            let mut next = vec![vec![false; n]; n];
            for t in 0..n {
                for k in 0..n {
                    if r[t][k] {
                        for s in 0..n {
                            next[t][s] |= a[k][s];
                        }
                    }
                }
            }
            r = next;
        }
        r.iter()
            .map(|row| {
                let idx: Vec<usize> = (0..n).filter(|&s| row[s]).collect();
                (idx[0], *idx.last().unwrap())
            })
            .collect()
    }

    #[test]
    fn seconds_to_frames() {
        assert_eq!(to_frames(Context::Seconds(5.4)).unwrap(), F(135));
        assert_eq!(to_frames(Context::Seconds(0.0)).unwrap(), F(0));
        assert_eq!(to_frames(Context::Seconds(1.8)).unwrap(), F(45));
        assert_eq!(to_frames(Context::Seconds(0.6)).unwrap(), F(15));
        assert_eq!(to_frames(Context::Seconds(0.02)).unwrap(), F(1));
        assert_eq!(to_frames(Context::Inf).unwrap(), Inf);
        assert!(to_frames(Context::Seconds(-0.1)).is_err());
    }

    #[test]
    fn small_chunked_mask() {
        let m = build_mask(6, F(2), F(2)).unwrap();
        assert_eq!(m.chunk_size(), Some(F(3)));
        assert_eq!(
            rows(&m),
            vec![
                vec![0, 1, 2],
                vec![0, 1, 2],
                vec![0, 1, 2],
                vec![1, 2, 3, 4, 5],
                vec![2, 3, 4, 5],
                vec![3, 4, 5],
            ]
        );
    }

    #[test]
    fn degenerate_masks() {
        let full = build_mask(4, Inf, Inf).unwrap();
        assert!((0..4).all(|t| (0..4).all(|s| full.allows(t, s))));
        let causal = build_mask(4, Inf, F(0)).unwrap();
        for t in 0..4 {
            for s in 0..4 {
                assert_eq!(causal.allows(t, s), s <= t);
            }
        }
        assert!(build_mask(0, Inf, Inf).is_err());
    }

    #[test]
    fn single_layer_lookahead_is_exact() {
        for la in 0..6 {
            let m = build_mask(40, F(7), F(la)).unwrap();
            let max_ahead = (0..40).map(|t| m.chunk_end(t).unwrap() - t).max().unwrap();
            assert_eq!(max_ahead, la);
            // Attained at chunk starts.
            assert_eq!(m.chunk_end(la + 1).unwrap() - (la + 1), la);
        }
    }

    #[test]
    fn receptive_field_examples() {
        let m = build_mask(6, F(2), F(2)).unwrap();
        let r2 = receptive_field(&m, 2).unwrap();
        assert_eq!(r2[0], (0, 2));
        assert_eq!(r2[5], (1, 5));
        assert_eq!(r2, reach_oracle(&m, 2));
        let r1 = receptive_field(&m, 1).unwrap();
        for (t, row) in rows(&m).iter().enumerate() {
            assert_eq!(r1[t], (row[0], *row.last().unwrap()));
        }
        assert!(receptive_field(&m, 0).is_err());
    }

    #[test]
    fn fixed_window_future_accumulates() {
        let m = AttentionMask::from_fn(8, |t, s| s <= t + 2);
        assert!(!verify_no_lookahead_accumulation(&m, 2).unwrap());
        assert_eq!(receptive_field(&m, 2).unwrap()[0], (0, 4));
        assert_eq!(reach_oracle(&m, 2)[0], (0, 4));
    }

    #[test]
    fn causal_never_accumulates() {
        for len in [1, 5, 33, 70] {
            let m = build_mask(len, F(3), F(0)).unwrap();
            assert!(verify_no_lookahead_accumulation(&m, 12).unwrap());
        }
    }

    #[test]
    fn bitset_reach_matches_dense_oracle() {
        for (len, lb, la) in [(70, F(5), F(3)), (65, Inf, F(1)), (30, F(0), F(4))] {
            let m = build_mask(len, lb, la).unwrap();
            for layers in [1, 2, 5] {
                assert_eq!(receptive_field(&m, layers).unwrap(), reach_oracle(&m, layers));
            }
        }
    }

    #[test]
    fn non_nesting_chunks_are_not_monotone_in_lookahead() {
        // la 2 -> 3 moves the chunk boundary: frame 3 loses sight of frame 5.
        let small = build_mask(8, F(4), F(2)).unwrap();
        let big = build_mask(8, F(4), F(3)).unwrap();
        assert!(small.allows(3, 5) && !big.allows(3, 5));
        let past = build_mask(8, F(6), F(2)).unwrap();
        for t in 0..8 {
            for s in 0..8 {
                assert!(!small.allows(t, s) || past.allows(t, s));
            }
        }
    }

    #[test]
    fn implicit_rule_agrees_with_matrix() {
        let m = build_mask(50, F(9), F(4)).unwrap();
        assert!(m.is_materialized());
        for t in 0..50 {
            for s in 0..50 {
                assert_eq!(m.allows(t, s), m.rule_allows(t, s));
            }
        }
        let big = build_mask(MATERIALIZE_LIMIT + 1, F(135), F(25)).unwrap();
        assert!(!big.is_materialized());
        assert!(big.allows(4000, 3865) && !big.allows(4000, 3864));
        assert!(big.allows(4000, 4003) && !big.allows(4000, 4004));
        assert_eq!(big.row_range(4000), Some((3865, 4003)));
    }

    #[test]
    fn sampling_covers_t2() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let space = SamplingSpace::t2();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..200 {
            let c = sample_context(&space, &mut rng).unwrap();
            seen.insert(c.label());
        }
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn singleton_space_is_constant() {
        let space = SamplingSpace {
            name: "one".into(),
            l_past: vec![Context::Seconds(5.4)],
            l_future: vec![Context::Seconds(0.0)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(
                sample_context(&space, &mut rng).unwrap(),
                ContextSpec::seconds(5.4, 0.0)
            );
        }
        let empty = SamplingSpace {
            l_future: vec![],
            ..space
        };
        assert!(sample_context(&empty, &mut rng).is_err());
    }

    #[test]
    fn t1_is_uniform_over_16_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let space = SamplingSpace::t1();
        let n = 16_000;
        let mut counts: HashMap<String, usize> = HashMap::new();
        for _ in 0..n {
            *counts
                .entry(sample_context(&space, &mut rng).unwrap().label())
                .or_default() += 1;
        }
        assert_eq!(counts.len(), 16);
        for (k, c) in counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 1.0 / 16.0).abs() <= 0.01, "{k}: {freq}");
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let space = SamplingSpace::t3();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| sample_context(&space, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
    }

    #[test]
    fn preset_sizes() {
        assert_eq!(SamplingSpace::t3().l_past.len(), 13);
        assert_eq!(SamplingSpace::t3().l_future.len(), 11);
        assert_eq!(SamplingSpace::t3().l_past[12], Context::Seconds(3.6));
        assert_eq!(SamplingSpace::t3().l_future[9], Context::Seconds(1.8));
        assert_eq!(SamplingSpace::preset("t1"), Some(SamplingSpace::t1()));
        assert!(SamplingSpace::preset("t9").is_none());
    }

    #[test]
    fn context_serde() {
        let c: ContextSpec = serde_json::from_str(r#"{"lb":"inf","la":0.6}"#).unwrap();
        assert_eq!(c, ContextSpec::new(Context::Inf, Context::Seconds(0.6)));
        let back = serde_json::to_string(&c).unwrap();
        assert_eq!(back, r#"{"lb":"inf","la":0.6}"#);
        assert!(serde_json::from_str::<Context>("-1.0").is_err());
    }

    #[test]
    fn csv_outputs() {
        let m = build_mask(3, F(1), F(0)).unwrap();
        assert_eq!(allow_csv(&m), "t,s0,s1,s2\n0,1,0,0\n1,1,1,0\n2,0,1,1\n");
        let r = reach_csv(&m, 2).unwrap();
        assert!(r.starts_with("layer,frame,min_reach,max_reach\n1,0,0,0\n"));
        assert!(r.ends_with("2,2,0,2\n"));
    }

    fn frames_strategy() -> impl Strategy<Value = Frames> {
        prop_oneof![(0usize..12).prop_map(Frames::Finite), Just(Frames::Inf)]
    }

    proptest! {
        #[test]
        fn monotone_in_context(len in 1usize..40, lb in 0usize..10, la in 0usize..10,
                               dlb in 0usize..5, mult in 1usize..4) {
            // Chunks only nest when the larger chunk size is a multiple of the smaller.
            let small = build_mask(len, F(lb), F(la)).unwrap();
            let big = build_mask(len, F(lb + dlb), F((la + 1) * mult - 1)).unwrap();
            let big_inf = build_mask(len, Inf, Inf).unwrap();
            for t in 0..len {
                for s in 0..len {
                    if small.allows(t, s) {
                        prop_assert!(big.allows(t, s));
                        prop_assert!(big_inf.allows(t, s));
                    }
                }
            }
        }

        #[test]
        fn diagonal_and_chunk_interior(len in 1usize..50, lb in frames_strategy(), la in frames_strategy()) {
            let m = build_mask(len, lb, la).unwrap();
            for t in 0..len {
                prop_assert!(m.allows(t, t));
                for s in 0..len {
                    let same_chunk = match m.chunk_size().unwrap() {
                        Frames::Finite(c) => s / c == t / c,
                        Frames::Inf => true,
                    };
                    let in_past = match lb { Frames::Finite(n) => s + n >= t, Frames::Inf => true };
                    if same_chunk && in_past {
                        prop_assert!(m.allows(t, s));
                    }
                }
            }
        }

        #[test]
        fn chunked_masks_never_accumulate(len in 1usize..=64, lb in frames_strategy(), la in frames_strategy(), layers in 1usize..=20) {
            let m = build_mask(len, lb, la).unwrap();
            prop_assert!(verify_no_lookahead_accumulation(&m, layers).unwrap());
        }
    }
}
