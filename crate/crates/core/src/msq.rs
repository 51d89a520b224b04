//! Multi-scale learnable query tokens.
//!
//! Each scale `s_k` owns a learnable query matrix `Q_k` (`N_k x d`), learnable
//! START/END boundary markers, and a fixed 2-D sinusoidal positional grid
//! `P_k`. Assembly lays the scales out in ascending resolution as
//! `[START_k; Q_k + P_k; END_k]` blocks. Markers get a zero positional vector.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn::{Binder, Params};
use crate::numcore::{Axis, Graph, SeededRng, Tensor, Var};

/// Standard deviation used for query and marker initialization.
pub const QUERY_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub grid_h: usize,
    pub grid_w: usize,
}

impl ScaleSpec {
    pub fn new(grid_h: usize, grid_w: usize) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::Config(format!(
                "scale {grid_h}x{grid_w} must have positive extents"
            )));
        }
        Ok(Self { grid_h, grid_w })
    }

    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n)
    }

    /// Token count `N = grid_h * grid_w`.
    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

impl std::fmt::Display for ScaleSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.grid_h, self.grid_w)
    }
}

/// Non-empty list of scales with strictly increasing token counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ScaleSpec>", into = "Vec<ScaleSpec>")]
pub struct ScaleSet(Vec<ScaleSpec>);

impl ScaleSet {
    pub fn new(scales: Vec<ScaleSpec>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Config("scale set is empty".into()));
        }
        for s in &scales {
            ScaleSpec::new(s.grid_h, s.grid_w)?;
        }
        for pair in scales.windows(2) {
            if pair[1].tokens() <= pair[0].tokens() {
                return Err(Error::Config(format!(
                    "scales must strictly increase in token count: {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(Self(scales))
    }

    /// `{4x4, 8x8, 16x16}`.
    pub fn standard() -> Self {
        Self(vec![
            ScaleSpec::new(4, 4).unwrap(),
            ScaleSpec::new(8, 8).unwrap(),
            ScaleSpec::new(16, 16).unwrap(),
        ])
    }

    /// Parses `"4x4,8x8,16x16"`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (h, w) = part
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("bad scale `{part}`, expected HxW")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad scale `{part}`")))
            };
            out.push(ScaleSpec::new(parse(h)?, parse(w)?)?);
        }
        Self::new(out)
    }

    pub fn as_slice(&self) -> &[ScaleSpec] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.0.iter().map(ScaleSpec::tokens).sum()
    }

    /// Assembled length `Σ (N_k + 2)`.
    pub fn assembled_len(&self) -> usize {
        self.total_tokens() + 2 * self.0.len()
    }
}

impl TryFrom<Vec<ScaleSpec>> for ScaleSet {
    type Error = Error;
    fn try_from(v: Vec<ScaleSpec>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ScaleSet> for Vec<ScaleSpec> {
    fn from(s: ScaleSet) -> Self {
        s.0
    }
}

/// 2-D sinusoidal grid encoding (`N x d`, row-major over the grid).
///
/// The first `d/2` channels encode the row index and the last `d/2` the column
/// index. Each half is `[sin(p·ω_j) .. , cos(p·ω_j) ..]` for
/// `ω_j = 10000^(-j/(d/4))`, `j < d/4`.
pub fn positional_grid(scale: ScaleSpec, d: usize) -> Result<Tensor> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Config(format!(
            "positional grid width {d} must be a positive multiple of 4"
        )));
    }
    let half = d / 2;
    let quarter = d / 4;
    let mut data = Vec::with_capacity(scale.tokens() * d);
    for r in 0..scale.grid_h {
        for c in 0..scale.grid_w {
            for pos in [r, c] {
                let mut block = vec![0.0; half];
                for j in 0..quarter {
                    let w = 10000f64.powf(-(j as f64) / quarter as f64);
                    block[j] = (pos as f64 * w).sin();
                    block[quarter + j] = (pos as f64 * w).cos();
                }
                data.extend(block);
            }
        }
    }
    Tensor::new(vec![scale.tokens(), d], data)
}

/// Parameters for one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleEntry {
    pub scale: ScaleSpec,
    /// Learnable `N x d`.
    pub queries: Tensor,
    /// Learnable `[d]`.
    pub start: Tensor,
    /// Learnable `[d]`.
    pub end: Tensor,
    /// Fixed `N x d`.
    pub positions: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryBank {
    d: usize,
    scales: ScaleSet,
    entries: Vec<ScaleEntry>,
}

/// Initializes queries and markers from `Normal(0, 0.02^2)`.
pub fn init_query_bank(scales: &ScaleSet, d: usize, rng: &mut SeededRng) -> Result<QueryBank> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Config(format!(
            "model width {d} must be a positive multiple of 4"
        )));
    }
    let mut entries = Vec::with_capacity(scales.len());
    for &scale in scales.as_slice() {
        entries.push(ScaleEntry {
            scale,
            queries: Tensor::randn(&[scale.tokens(), d], QUERY_INIT_STD, rng),
            start: Tensor::randn(&[d], QUERY_INIT_STD, rng),
            end: Tensor::randn(&[d], QUERY_INIT_STD, rng),
            positions: positional_grid(scale, d)?,
        });
    }
    Ok(QueryBank {
        d,
        scales: scales.clone(),
        entries,
    })
}

/// Half-open row range of one scale's query rows (markers excluded).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSpan {
    pub scale_id: usize,
    pub start: usize,
    pub end: usize,
}

impl ScaleSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// The same span shifted by `offset` rows.
    pub fn offset(&self, offset: usize) -> Self {
        Self {
            scale_id: self.scale_id,
            start: self.start + offset,
            end: self.end + offset,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssembledSequence {
    /// `L x d`.
    pub tokens: Tensor,
    pub spans: Vec<ScaleSpan>,
}

/// Query spans for a scale set without building any tensors.
pub fn spans_for(scales: &ScaleSet) -> Vec<ScaleSpan> {
    let mut row = 0;
    scales
        .as_slice()
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let span = ScaleSpan {
                scale_id: k,
                start: row + 1,
                end: row + 1 + s.tokens(),
            };
            row += s.tokens() + 2;
            span
        })
        .collect()
}

/// Graph handles for the learnable part of a bank.
#[derive(Clone, Debug)]
pub struct BankVars {
    pub queries: Vec<Var>,
    pub starts: Vec<Var>,
    pub ends: Vec<Var>,
}

impl QueryBank {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn scales(&self) -> &ScaleSet {
        &self.scales
    }

    pub fn entries(&self) -> &[ScaleEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ScaleEntry] {
        &mut self.entries
    }

    pub fn bind(&self, b: &mut Binder) -> BankVars {
        let mut v = BankVars {
            queries: Vec::new(),
            starts: Vec::new(),
            ends: Vec::new(),
        };
        for e in &self.entries {
            v.queries.push(b.leaf(&e.queries));
            v.starts.push(b.leaf(&e.start));
            v.ends.push(b.leaf(&e.end));
        }
        v
    }

    /// Builds `Z_input` inside a graph so gradients reach queries and markers.
    pub fn assemble_in(&self, g: &mut Graph, vars: &BankVars) -> Result<(Var, Vec<ScaleSpan>)> {
        let d = self.d;
        let mut parts = Vec::with_capacity(3 * self.entries.len());
        for (k, e) in self.entries.iter().enumerate() {
            let start = g.reshape(vars.starts[k], &[1, d])?;
            let pos = g.constant(e.positions.clone());
            let q = g.add(vars.queries[k], pos)?;
            let end = g.reshape(vars.ends[k], &[1, d])?;
            parts.extend([start, q, end]);
        }
        let z = g.concat(&parts, Axis::Rows)?;
        Ok((z, spans_for(&self.scales)))
    }
}

impl Params for QueryBank {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (k, e) in self.entries.iter().enumerate() {
            f(format!("{prefix}scale{k}.queries"), &e.queries);
            f(format!("{prefix}scale{k}.start"), &e.start);
            f(format!("{prefix}scale{k}.end"), &e.end);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for e in &mut self.entries {
            f(&mut e.queries);
            f(&mut e.start);
            f(&mut e.end);
        }
    }
}

/// Concatenates all scale blocks into `Z_input` (values only).
pub fn assemble_sequence(bank: &QueryBank) -> Result<AssembledSequence> {
    let mut g = Graph::new();
    let vars = bank.bind(&mut Binder::new(&mut g, false));
    let (z, spans) = bank.assemble_in(&mut g, &vars)?;
    Ok(AssembledSequence {
        tokens: g.value(z).clone(),
        spans,
    })
}

fn check_spans(rows: usize, spans: &[ScaleSpan]) -> Result<()> {
    let mut prev_end = 0;
    for s in spans {
        if s.start >= s.end || s.end > rows || s.start < prev_end {
            return dim_err(format!(
                "span {}..{} of scale {} invalid for {rows} rows",
                s.start, s.end, s.scale_id
            ));
        }
        prev_end = s.end;
    }
    Ok(())
}

/// Copies out the query rows of every scale, dropping marker rows.
pub fn slice_scales(h: &Tensor, spans: &[ScaleSpan]) -> Result<Vec<Tensor>> {
    h.dims2()?;
    check_spans(h.rows(), spans)?;
    spans.iter().map(|s| h.slice_rows(s.start, s.end)).collect()
}

/// Graph version of [`slice_scales`].
pub fn slice_scales_in(g: &mut Graph, h: Var, spans: &[ScaleSpan]) -> Result<Vec<Var>> {
    check_spans(g.value(h).rows(), spans)?;
    spans
        .iter()
        .map(|s| g.slice(h, Axis::Rows, s.start, s.end))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bank(scales: &ScaleSet, d: usize, seed: u64) -> QueryBank {
        init_query_bank(scales, d, &mut SeededRng::new(seed)).unwrap()
    }

    #[test]
    fn standard_scales_shapes() {
        let b = bank(&ScaleSet::standard(), 64, 1);
        let shapes: Vec<_> = b.entries().iter().map(|e| e.queries.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![16, 64], vec![64, 64], vec![256, 64]]);
    }

    #[test]
    fn single_unit_scale() {
        let s = ScaleSet::new(vec![ScaleSpec::new(1, 1).unwrap()]).unwrap();
        let b = bank(&s, 8, 1);
        assert_eq!(b.entries()[0].queries.shape(), &[1, 8]);
        let seq = assemble_sequence(&b).unwrap();
        assert_eq!(seq.tokens.shape(), &[3, 8]);
    }

    #[test]
    fn same_seed_same_bank() {
        let s = ScaleSet::standard();
        assert_eq!(bank(&s, 64, 9), bank(&s, 64, 9));
        assert_ne!(bank(&s, 64, 9), bank(&s, 64, 10));
    }

    #[test]
    fn width_must_be_multiple_of_four() {
        let s = ScaleSet::standard();
        assert!(matches!(
            init_query_bank(&s, 30, &mut SeededRng::new(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn scale_set_validation() {
        let s4 = ScaleSpec::square(4).unwrap();
        let s2 = ScaleSpec::square(2).unwrap();
        assert!(ScaleSet::new(vec![]).is_err());
        assert!(ScaleSet::new(vec![s4, s2]).is_err());
        assert!(ScaleSet::new(vec![s4, s4]).is_err());
        assert!(ScaleSpec::new(0, 3).is_err());
        assert_eq!(ScaleSet::parse("4x4, 8x8,16x16").unwrap(), ScaleSet::standard());
        let json = serde_json::to_string(&ScaleSet::standard()).unwrap();
        assert!(serde_json::from_str::<ScaleSet>(r#"[{"grid_h":4,"grid_w":4},{"grid_h":2,"grid_w":2}]"#).is_err());
        assert_eq!(serde_json::from_str::<ScaleSet>(&json).unwrap(), ScaleSet::standard());
    }

    #[test]
    fn grid_origin_row() {
        let p = positional_grid(ScaleSpec::new(1, 1).unwrap(), 8).unwrap();
        assert_eq!(p.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn grid_rows_distinct() {
        let p = positional_grid(ScaleSpec::square(4).unwrap(), 64).unwrap();
        let mut min = f64::INFINITY;
        for i in 0..16 {
            for j in i + 1..16 {
                let d: f64 = p
                    .row(i)
                    .iter()
                    .zip(p.row(j))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                min = min.min(d);
            }
        }
        assert!(min > 0.0);
        // (0,1) is row 1 and (1,0) is row 4: both halves differ
        let (a, b) = (p.row(1), p.row(4));
        assert_ne!(&a[..32], &b[..32]);
        assert_ne!(&a[32..], &b[32..]);
    }

    #[test]
    fn assembly_layout_standard_scales() {
        let b = bank(&ScaleSet::standard(), 64, 3);
        let seq = assemble_sequence(&b).unwrap();
        assert_eq!(seq.tokens.shape(), &[342, 64]);
        let spans: Vec<_> = seq.spans.iter().map(|s| (s.scale_id, s.start, s.end)).collect();
        assert_eq!(spans, vec![(0, 1, 17), (1, 19, 83), (2, 85, 341)]);
        for (k, s) in seq.spans.iter().enumerate() {
            let e = &b.entries()[k];
            assert_eq!(seq.tokens.row(s.start - 1), e.start.data());
            assert_eq!(seq.tokens.row(s.end), e.end.data());
        }
    }

    #[test]
    fn assembly_small_and_zeroed() {
        let s = ScaleSet::new(vec![ScaleSpec::square(2).unwrap()]).unwrap();
        let mut b = bank(&s, 8, 3);
        b.entries_mut()[0].queries = Tensor::zeros(&[4, 8]);
        let seq = assemble_sequence(&b).unwrap();
        assert_eq!(seq.tokens.rows(), 6);
        assert_eq!((seq.spans[0].start, seq.spans[0].end), (1, 5));
        assert_eq!(seq.tokens.slice_rows(1, 5).unwrap(), b.entries()[0].positions);
    }

    #[test]
    fn slice_identity_and_accounting() {
        let b = bank(&ScaleSet::standard(), 64, 4);
        let seq = assemble_sequence(&b).unwrap();
        let parts = slice_scales(&seq.tokens, &seq.spans).unwrap();
        let total: usize = parts.iter().map(Tensor::rows).sum();
        assert_eq!(total, 342 - 2 * 3);
        for (p, e) in parts.iter().zip(b.entries()) {
            let expect = e.queries.zip_map(&e.positions, |a, b| a + b).unwrap();
            assert_eq!(p, &expect);
        }
        let bad = [ScaleSpan { scale_id: 0, start: 300, end: 400 }];
        assert!(slice_scales(&seq.tokens, &bad).is_err());
    }

    #[test]
    fn slices_match_rows_of_random_h() {
        let s = ScaleSet::parse("2x2,3x3").unwrap();
        let spans = spans_for(&s);
        let h = Tensor::randn(&[s.assembled_len(), 4], 1.0, &mut SeededRng::new(8));
        let parts = slice_scales(&h, &spans).unwrap();
        for (p, sp) in parts.iter().zip(&spans) {
            for i in 0..sp.len() {
                assert_eq!(p.row(i), h.row(sp.start + i));
            }
        }
    }

    proptest! {
        #[test]
        fn perturbing_one_scale_leaves_others(k in 0usize..3, idx in 0usize..16, delta in 0.1f64..5.0) {
            let s = ScaleSet::parse("2x2,3x3,4x4").unwrap();
            let b = bank(&s, 8, 5);
            let mut b2 = b.clone();
            let q = &mut b2.entries_mut()[k].queries;
            let i = idx % q.len();
            q.data_mut()[i] += delta;
            let (s1, s2) = (assemble_sequence(&b).unwrap(), assemble_sequence(&b2).unwrap());
            let p1 = slice_scales(&s1.tokens, &s1.spans).unwrap();
            let p2 = slice_scales(&s2.tokens, &s2.spans).unwrap();
            for j in 0..3 {
                if j == k {
                    prop_assert_ne!(&p1[j], &p2[j]);
                } else {
                    prop_assert_eq!(&p1[j], &p2[j]);
                }
            }
        }

        #[test]
        fn assembly_is_injective(which in 0usize..3, scale in 0usize..2, idx in 0usize..8, delta in 1e-6f64..1.0) {
            let s = ScaleSet::parse("1x2,2x2").unwrap();
            let b = bank(&s, 4, 6);
            let mut b2 = b.clone();
            let e = &mut b2.entries_mut()[scale];
            let t = match which { 0 => &mut e.queries, 1 => &mut e.start, _ => &mut e.end };
            let i = idx % t.len();
            t.data_mut()[i] += delta;
            prop_assert_ne!(assemble_sequence(&b).unwrap().tokens, assemble_sequence(&b2).unwrap().tokens);
        }
    }
}
