//! Two-stage retrieval: broad-view scoring over the whole gallery, top-k
//! selection, focused-view fusion over the candidates' local tokens and
//! final score composition.
//!
//! Re-ranking only permutes the top-k block. Entries outside it keep their
//! stage-1 order behind the block. Ties are broken by ascending gallery index
//! everywhere.

use std::cmp::Ordering;
use std::collections::HashSet;

use crate::encoders::{EncodedText, EncodedVideo};
use crate::error::{Error, Result};
use crate::numeric::nn::{attention, init_mlp, kaiming, mlp, project, GumbelNoise};
use crate::numeric::{dot, Activation, DenseArray, Group, ParameterSet, RngStream, Tape, Var};

/// Which modality a gallery holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// Videos, searched by text queries.
    Video,
    /// Texts, searched by video queries.
    Text,
}

impl Side {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Side::Video => 0,
            Side::Text => 1,
        }
    }

    pub(crate) fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Side::Video),
            1 => Some(Side::Text),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryEntry {
    pub id: u64,
    /// Unit-norm global feature.
    pub global: Vec<f64>,
    /// `n × C` local tokens.
    pub locals: DenseArray,
}

/// Encoded candidates for one retrieval direction.
#[derive(Clone, Debug, PartialEq)]
pub struct Gallery {
    side: Side,
    width: usize,
    locals_per_entry: usize,
    entries: Vec<GalleryEntry>,
}

impl Gallery {
    /// Build a gallery; ids must be unique and all entries share `C` and `n`.
    pub fn new(side: Side, entries: Vec<GalleryEntry>) -> Result<Self> {
        let width = entries.first().map_or(0, |e| e.global.len());
        let n = entries.first().map_or(0, |e| e.locals.rows());
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert(e.id) {
                return Err(Error::input(format!("duplicate gallery id {}", e.id)));
            }
            if e.global.len() != width || e.locals.cols() != width || e.locals.rows() != n {
                return Err(Error::dim(format!(
                    "gallery entry {} is {}-wide with {}x{} locals, expected {width} and {n}x{width}",
                    e.id,
                    e.global.len(),
                    e.locals.rows(),
                    e.locals.cols()
                )));
            }
        }
        Ok(Self {
            side,
            width,
            locals_per_entry: n,
            entries,
        })
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn locals_per_entry(&self) -> usize {
        self.locals_per_entry
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position_of(&self, id: u64) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }
}

/// Stage-1 scores aligned with gallery order.
#[derive(Clone, Debug, PartialEq)]
pub struct BroadScores {
    pub scores: Vec<f64>,
}

/// `scores[j] = query · gallery[j].global`.
pub fn broad_view_scores(query_global: &[f64], gallery: &Gallery) -> Result<BroadScores> {
    if gallery.is_empty() {
        return Err(Error::input("broad-view scoring over an empty gallery"));
    }
    if query_global.len() != gallery.width() {
        return Err(Error::dim(format!(
            "query width {} vs gallery width {}",
            query_global.len(),
            gallery.width()
        )));
    }
    let scores = gallery
        .entries()
        .iter()
        .map(|e| dot(query_global, &e.global))
        .collect();
    Ok(BroadScores { scores })
}

/// Descending by score, ascending index on ties. `-0.0` and `0.0` tie.
pub(crate) fn rank_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// Indices of `scores` sorted by [`rank_order`].
pub fn stage1_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| rank_order((a, scores[a]), (b, scores[b])));
    idx
}

/// The focused candidates for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub gallery_indices: Vec<usize>,
    pub stage1_scores: Vec<f64>,
    /// `(k · n) × C`, candidate-major.
    pub locals: DenseArray,
    /// Set when `k` exceeded the gallery size and was reduced to it.
    pub clamped: bool,
}

impl CandidateSet {
    pub fn k(&self) -> usize {
        self.gallery_indices.len()
    }
}

/// Top-`k` gallery entries by stage-1 score, with their local tokens.
pub fn select_top_k(scores: &BroadScores, k: usize, gallery: &Gallery) -> Result<CandidateSet> {
    if k == 0 {
        return Err(Error::input("top-k selection with k = 0"));
    }
    if scores.scores.len() != gallery.len() {
        return Err(Error::dim(format!(
            "{} scores for a gallery of {}",
            scores.scores.len(),
            gallery.len()
        )));
    }
    let clamped = k > gallery.len();
    let k = k.min(gallery.len());
    let order = top_k_indices(&scores.scores, k);
    let n = gallery.locals_per_entry();
    let c = gallery.width();
    let mut locals = Vec::with_capacity(k * n * c);
    for &i in &order {
        locals.extend_from_slice(gallery.entries()[i].locals.data());
    }
    Ok(CandidateSet {
        stage1_scores: order.iter().map(|&i| scores.scores[i]).collect(),
        gallery_indices: order,
        locals: DenseArray::matrix(k * n, c, locals)?,
        clamped,
    })
}

/// First `k` of [`stage1_order`], via partial selection.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| rank_order((*a, scores[*a]), (*b, scores[*b]));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

/// Shape and naming of a focused-view fusion network. Parameters live in a
/// [`ParameterSet`] under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionNetwork {
    pub prefix: String,
    pub width: usize,
    /// Indicators fed to the network (`m − 1`).
    pub focus_count: usize,
    /// Logit count; candidate sets may be smaller.
    pub k: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub gumbel_temp: f64,
    /// Add stage-1 scores to the deltas when composing; off ranks the
    /// block by deltas alone.
    pub add_stage1_scores: bool,
}

impl FusionNetwork {
    /// Register parameters: index embeddings, `blocks` cross-attention blocks
    /// with zero output projections, the delta MLP and a zero delta scale.
    pub fn init_params(&self, stream: RngStream) -> Result<ParameterSet> {
        let (c, p) = (self.width, &self.prefix);
        let mut ps = ParameterSet::new();
        // N(0, 1)
        let idx = kaiming(self.k, c, 2 * c, stream.fork(1)).map(|x| x * (c as f64).sqrt());
        ps.insert(format!("{p}.idx_embed"), idx, Group::Fusion)?;
        for b in 0..self.blocks {
            let s = stream.fork(10 + b as u64);
            // W_k starts equal to W_q so matching tokens attend to each other.
            let qk = kaiming(c, c, 2 * c, s.fork(0));
            ps.insert(format!("{p}.blocks.{b}.q"), qk.clone(), Group::Fusion)?;
            ps.insert(format!("{p}.blocks.{b}.k"), qk, Group::Fusion)?;
            ps.insert(format!("{p}.blocks.{b}.v"), kaiming(c, c, 2 * c, s.fork(2)), Group::Fusion)?;
            ps.insert(format!("{p}.blocks.{b}.o"), DenseArray::zeros(&[c, c]), Group::Fusion)?;
        }
        init_mlp(
            &mut ps,
            &format!("{p}.delta"),
            (self.focus_count * c, self.hidden, self.k),
            Group::Fusion,
            true,
            stream.fork(2),
        )?;
        ps.insert(format!("{p}.delta_scale"), DenseArray::scalar(0.0), Group::Fusion)?;
        Ok(ps)
    }

    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    /// Cross-attend the focus indicators over the candidates' local tokens.
    ///
    /// `candidate_locals[j]` is candidate `j`'s `n × C` local tokens; the
    /// candidate-index embedding `j` is added to each of them before they are
    /// flattened into one key/value sequence.
    pub fn fuse_on(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        focus: Var,
        candidate_locals: &[Var],
        noise: Option<RngStream>,
    ) -> Result<Var> {
        let kc = candidate_locals.len();
        if kc == 0 {
            return Err(Error::input("focused fusion over zero candidates"));
        }
        if kc > self.k {
            return Err(Error::config(format!("{kc} candidates for a {}-way fusion network", self.k)));
        }
        if tape.shape(focus) != (self.focus_count, self.width) {
            return Err(Error::config(format!(
                "fusion network expects {}x{} indicators, got {:?}",
                self.focus_count,
                self.width,
                tape.shape(focus)
            )));
        }
        let table = tape.param(params, &self.name("idx_embed"))?;
        let mut parts = Vec::with_capacity(kc);
        for (j, &loc) in candidate_locals.iter().enumerate() {
            let n = tape.shape(loc).0;
            let h = tape.layer_norm_rows(loc);
            let e = tape.gather_rows(table, &vec![j; n])?;
            parts.push(tape.add(h, e)?);
        }
        let tokens = tape.concat_rows(&parts)?;
        let mut ind = focus;
        for b in 0..self.blocks {
            let pre = self.name(&format!("blocks.{b}"));
            let hi = tape.layer_norm_rows(ind);
            let q = project(tape, params, &format!("{pre}.q"), hi)?;
            let k = project(tape, params, &format!("{pre}.k"), tokens)?;
            let v = project(tape, params, &format!("{pre}.v"), tokens)?;
            let gumbel = noise.map(|s| GumbelNoise {
                temp: self.gumbel_temp,
                stream: s.fork(b as u64),
            });
            let a = attention(tape, q, k, v, None, gumbel)?;
            let o = project(tape, params, &format!("{pre}.o"), a)?;
            ind = tape.add(ind, o)?;
        }
        Ok(ind)
    }

    /// Logits over the first `kc` candidates and the scaled deltas.
    pub fn project_on(&self, tape: &mut Tape, params: &ParameterSet, fused: Var, kc: usize) -> Result<(Var, Var)> {
        if tape.shape(fused) != (self.focus_count, self.width) {
            return Err(Error::config(format!(
                "delta head expects {}x{} indicators, got {:?}",
                self.focus_count,
                self.width,
                tape.shape(fused)
            )));
        }
        if kc == 0 || kc > self.k {
            return Err(Error::config(format!("{kc} candidates for a {}-way delta head", self.k)));
        }
        let h = tape.layer_norm_rows(fused);
        let flat = tape.reshape(h, 1, self.focus_count * self.width)?;
        let mut logits = mlp(tape, params, &self.name("delta"), self.activation, flat)?;
        if kc < self.k {
            let t = tape.transpose(logits);
            let t = tape.slice_rows(t, 0, kc)?;
            logits = tape.transpose(t);
        }
        let scale = tape.param(params, &self.name("delta_scale"))?;
        let deltas = tape.scale_by(logits, scale)?;
        Ok((logits, deltas))
    }
}

/// Focused-view fusion over a candidate set; Gumbel noise only when not
/// `deterministic`.
pub fn focused_fuse(
    focus_indicators: &DenseArray,
    candidates: &CandidateSet,
    net: &FusionNetwork,
    params: &ParameterSet,
    rng: RngStream,
    deterministic: bool,
) -> Result<DenseArray> {
    let mut tape = Tape::new();
    let (focus, locals) = candidate_vars(&mut tape, focus_indicators, candidates)?;
    let fused = net.fuse_on(&mut tape, params, focus, &locals, (!deterministic).then_some(rng))?;
    Ok(tape.value(fused).clone())
}

fn candidate_vars(tape: &mut Tape, focus: &DenseArray, candidates: &CandidateSet) -> Result<(Var, Vec<Var>)> {
    let k = candidates.k();
    if k == 0 {
        return Err(Error::input("empty candidate set"));
    }
    let f = tape.constant(focus.clone());
    let all = tape.constant(candidates.locals.clone());
    let n = candidates.locals.rows() / k;
    let locals = (0..k)
        .map(|j| tape.slice_rows(all, j * n, n))
        .collect::<Result<Vec<_>>>()?;
    Ok((f, locals))
}

/// `(logits, deltas)` for `kc` candidates.
pub fn project_deltas(
    fused_indicators: &DenseArray,
    net: &FusionNetwork,
    params: &ParameterSet,
    kc: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let f = tape.constant(fused_indicators.clone());
    let (l, d) = net.project_on(&mut tape, params, f, kc)?;
    Ok((tape.value(l).data().to_vec(), tape.value(d).data().to_vec()))
}

/// Per-entry results after composition.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalScores {
    /// Gallery indices in final rank order.
    pub order: Vec<usize>,
    /// Stage-1 score per gallery entry.
    pub stage1: Vec<f64>,
    /// Delta per gallery entry; zero outside the candidate block.
    pub deltas: Vec<f64>,
    /// Refined score for candidates, stage-1 score elsewhere.
    pub final_scores: Vec<f64>,
    /// Number of re-ranked entries at the head of `order`.
    pub k: usize,
}

impl FinalScores {
    /// 1-based rank of gallery entry `index`.
    pub fn rank_of(&self, index: usize) -> Option<usize> {
        self.order.iter().position(|&i| i == index).map(|p| p + 1)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.order == other.order
            && self.k == other.k
            && bits(&self.stage1) == bits(&other.stage1)
            && bits(&self.deltas) == bits(&other.deltas)
            && bits(&self.final_scores) == bits(&other.final_scores)
    }
}

/// Refine candidate scores, re-sort the candidate block among itself and
/// append every other entry in stage-1 order.
pub fn compose_scores(
    candidates: &CandidateSet,
    deltas: &[f64],
    broad: &BroadScores,
    add_stage1_scores: bool,
) -> Result<FinalScores> {
    let k = candidates.k();
    if deltas.len() != k {
        return Err(Error::dim(format!("{} deltas for {k} candidates", deltas.len())));
    }
    let n = broad.scores.len();
    let mut final_scores = broad.scores.clone();
    let mut all_deltas = vec![0.0; n];
    let mut block: Vec<(usize, f64)> = Vec::with_capacity(k);
    for ((&g, &s), &d) in candidates.gallery_indices.iter().zip(&candidates.stage1_scores).zip(deltas) {
        let refined = if add_stage1_scores { s + d } else { d };
        final_scores[g] = refined;
        all_deltas[g] = d;
        block.push((g, refined));
    }
    block.sort_by(|a, b| rank_order(*a, *b));
    let in_block: HashSet<usize> = candidates.gallery_indices.iter().copied().collect();
    let mut order: Vec<usize> = block.iter().map(|&(g, _)| g).collect();
    order.extend(stage1_order(&broad.scores).into_iter().filter(|i| !in_block.contains(i)));
    Ok(FinalScores {
        order,
        stage1: broad.scores.clone(),
        deltas: all_deltas,
        final_scores,
        k,
    })
}

/// Stage-1 ranking only, expressed as [`FinalScores`] with an empty block.
pub fn rank_broad(query_global: &[f64], gallery: &Gallery) -> Result<FinalScores> {
    let broad = broad_view_scores(query_global, gallery)?;
    Ok(FinalScores {
        order: stage1_order(&broad.scores),
        deltas: vec![0.0; broad.scores.len()],
        final_scores: broad.scores.clone(),
        stage1: broad.scores,
        k: 0,
    })
}

/// A query's global feature and focus indicators, from either modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub global: Vec<f64>,
    pub focus: DenseArray,
}

impl From<&EncodedText> for Query {
    fn from(t: &EncodedText) -> Self {
        Self {
            global: t.global.clone(),
            focus: t.focus.clone(),
        }
    }
}

impl From<&EncodedVideo> for Query {
    fn from(v: &EncodedVideo) -> Self {
        Self {
            global: v.global.clone(),
            focus: v.focus.clone(),
        }
    }
}

/// Full deterministic two-stage ranking.
pub fn rank_full(
    query: &Query,
    gallery: &Gallery,
    net: &FusionNetwork,
    params: &ParameterSet,
    k: usize,
) -> Result<FinalScores> {
    let broad = broad_view_scores(&query.global, gallery)?;
    let candidates = select_top_k(&broad, k, gallery)?;
    let mut tape = Tape::new();
    let (focus, locals) = candidate_vars(&mut tape, &query.focus, &candidates)?;
    let fused = net.fuse_on(&mut tape, params, focus, &locals, None)?;
    let (_, deltas) = net.project_on(&mut tape, params, fused, candidates.k())?;
    let deltas = tape.value(deltas).data().to_vec();
    compose_scores(&candidates, &deltas, &broad, net.add_stage1_scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_gallery(n: usize, c: usize, locals: usize, seed: u64) -> Gallery {
        let s = RngStream::new(seed);
        let entries = (0..n)
            .map(|i| GalleryEntry {
                id: 1000 + i as u64,
                global: unit(s.fork(i as u64).normals(c)),
                locals: DenseArray::matrix(locals, c, s.fork(10_000 + i as u64).normals(locals * c)).unwrap(),
            })
            .collect();
        Gallery::new(Side::Video, entries).unwrap()
    }

    fn net(k: usize, c: usize, focus: usize) -> FusionNetwork {
        FusionNetwork {
            prefix: "fusion".into(),
            width: c,
            focus_count: focus,
            k,
            blocks: 1,
            hidden: 8,
            activation: Activation::Silu,
            gumbel_temp: 1.0,
            add_stage1_scores: true,
        }
    }

    #[test]
    fn orthonormal_scores() {
        let c = 6;
        let entries = (0..c)
            .map(|i| {
                let mut g = vec![0.0; c];
                g[i] = 1.0;
                GalleryEntry {
                    id: i as u64,
                    global: g,
                    locals: DenseArray::zeros(&[1, c]),
                }
            })
            .collect();
        let gallery = Gallery::new(Side::Video, entries).unwrap();
        let q = gallery.entries()[3].global.clone();
        let s = broad_view_scores(&q, &gallery).unwrap();
        assert_eq!(s.scores, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn single_entry_gallery_and_errors() {
        let g = random_gallery(1, 4, 2, 1);
        let q = unit(vec![1.0, 2.0, 3.0, 4.0]);
        let s = broad_view_scores(&q, &g).unwrap();
        assert_eq!(s.scores, vec![dot(&q, &g.entries()[0].global)]);
        assert!(matches!(broad_view_scores(&q[..3], &g), Err(Error::Dimension(_))));
        let empty = Gallery::new(Side::Video, vec![]).unwrap();
        assert!(matches!(broad_view_scores(&q, &empty), Err(Error::Input(_))));
    }

    #[test]
    fn broad_scores_match_loop() {
        let g = random_gallery(64, 16, 2, 7);
        let q = unit(RngStream::new(99).normals(16));
        let s = broad_view_scores(&q, &g).unwrap();
        for (j, e) in g.entries().iter().enumerate() {
            let mut acc = 0.0;
            for c in 0..16 {
                acc += q[c] * e.global[c];
            }
            assert!((s.scores[j] - acc).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&s.scores[j]));
        }
    }

    #[test]
    fn gallery_rejects_duplicates_and_ragged_entries() {
        let mut e = random_gallery(2, 4, 2, 1).entries().to_vec();
        e[1].id = e[0].id;
        assert!(matches!(Gallery::new(Side::Text, e.clone()), Err(Error::Input(_))));
        e[1].id = 5;
        e[1].locals = DenseArray::zeros(&[3, 4]);
        assert!(matches!(Gallery::new(Side::Text, e), Err(Error::Dimension(_))));
    }

    #[test]
    fn top_k_tie_breaks_by_index() {
        let g = random_gallery(4, 3, 1, 2);
        let s = BroadScores {
            scores: vec![0.9, 0.1, 0.9, 0.5],
        };
        let c = select_top_k(&s, 2, &g).unwrap();
        assert_eq!(c.gallery_indices, vec![0, 2]);
        assert!(!c.clamped);
        let all = select_top_k(&s, 4, &g).unwrap();
        assert_eq!(all.gallery_indices, vec![0, 2, 3, 1]);
        let over = select_top_k(&s, 9, &g).unwrap();
        assert!(over.clamped);
        assert_eq!(over.k(), 4);
        assert!(select_top_k(&s, 0, &g).is_err());
    }

    #[test]
    fn top_k_matches_full_sort() {
        let s = RngStream::new(5);
        for t in 0..1000 {
            let n = 10 + t % 40;
            // Coarse values so ties are common.
            let scores: Vec<f64> = s
                .fork(t as u64)
                .normals(n)
                .into_iter()
                .map(|x| (x * 4.0).round() / 4.0)
                .collect();
            let mut oracle: Vec<usize> = (0..n).collect();
            oracle.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            oracle.truncate(10);
            assert_eq!(top_k_indices(&scores, 10), oracle);
        }
    }

    #[test]
    fn compose_zero_deltas_keeps_stage1_order() {
        let g = random_gallery(20, 4, 1, 3);
        let q = unit(vec![0.3, -0.2, 0.5, 0.1]);
        let b = broad_view_scores(&q, &g).unwrap();
        let c = select_top_k(&b, 5, &g).unwrap();
        let f = compose_scores(&c, &[0.0; 5], &b, true).unwrap();
        assert_eq!(f.order, stage1_order(&b.scores));
    }

    #[test]
    fn compose_two_candidates_swap() {
        let g = random_gallery(2, 3, 1, 4);
        let b = BroadScores { scores: vec![0.8, 0.7] };
        let c = select_top_k(&b, 2, &g).unwrap();
        let f = compose_scores(&c, &[0.0, 0.2], &b, true).unwrap();
        assert_eq!(f.order, vec![1, 0]);
        assert!((f.final_scores[1] - 0.9).abs() < 1e-15);
        assert_eq!(f.final_scores[0], 0.8);
        assert_eq!(f.rank_of(1), Some(1));
    }

    #[test]
    fn compose_rejects_misaligned_deltas() {
        let g = random_gallery(3, 3, 1, 4);
        let b = BroadScores {
            scores: vec![0.1, 0.2, 0.3],
        };
        let c = select_top_k(&b, 2, &g).unwrap();
        assert!(compose_scores(&c, &[0.0], &b, true).is_err());
    }

    #[test]
    fn fusion_is_identity_at_init() {
        let (c, k, n) = (8, 4, 3);
        let net = net(k, c, 3);
        let p = net.init_params(RngStream::new(1)).unwrap();
        let g = random_gallery(10, c, n, 9);
        let b = broad_view_scores(&g.entries()[0].global, &g).unwrap();
        let cands = select_top_k(&b, k, &g).unwrap();
        let focus = DenseArray::matrix(3, c, RngStream::new(3).normals(3 * c)).unwrap();
        for det in [true, false] {
            let fused = focused_fuse(&focus, &cands, &net, &p, RngStream::new(4), det).unwrap();
            assert!(fused.bit_eq(&focus));
        }
        let (logits, deltas) = project_deltas(&focus, &net, &p, k).unwrap();
        assert_eq!(logits, vec![0.0; k]);
        assert_eq!(deltas, vec![0.0; k]);
    }

    #[test]
    fn fusion_shape_errors() {
        let net = net(4, 8, 3);
        let p = net.init_params(RngStream::new(1)).unwrap();
        let wrong = DenseArray::zeros(&[2, 8]);
        assert!(matches!(project_deltas(&wrong, &net, &p, 4), Err(Error::Config(_))));
        let empty = CandidateSet {
            gallery_indices: vec![],
            stage1_scores: vec![],
            locals: DenseArray::zeros(&[0, 8]),
            clamped: false,
        };
        assert!(matches!(
            focused_fuse(&DenseArray::zeros(&[3, 8]), &empty, &net, &p, RngStream::new(0), true),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn untrained_rank_full_equals_stage1() {
        let (c, n) = (8, 3);
        let net = net(10, c, 3);
        let p = net.init_params(RngStream::new(2)).unwrap();
        let g = random_gallery(30, c, n, 11);
        for t in 0..20 {
            let q = Query {
                global: unit(RngStream::new(t).normals(c)),
                focus: DenseArray::matrix(3, c, RngStream::new(100 + t).normals(3 * c)).unwrap(),
            };
            let full = rank_full(&q, &g, &net, &p, 10).unwrap();
            let broad = rank_broad(&q.global, &g).unwrap();
            assert_eq!(full.order, broad.order);
        }
    }
}
