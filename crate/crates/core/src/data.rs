//! Synthetic paired data with hard-negative cohorts, and the binary dataset
//! and gallery formats.
//!
//! Every pair is rendered from a coarse theme (a tuple of attribute values
//! shared by its whole cohort) and a fine detail (unique within the cohort).
//! Texts spell the attributes and the detail as words; clips spread the
//! theme over every patch and place the detail in a single patch position.
//! Members of one cohort therefore look alike globally and differ only in
//! one local token.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::encoders::{TextSequence, VideoClip};
use crate::error::{Error, Result};
use crate::numeric::{ByteReader, DenseArray, RngStream};
use crate::retrieval::{Gallery, GalleryEntry, Side};

/// Coarse attributes per theme.
const ATTRIBUTES: usize = 3;
/// Values per coarse attribute.
const ATTRIBUTE_VALUES: usize = 8;
/// Distinct fine details.
const FINE_VALUES: usize = 16;
/// Amplitude of the detail relative to the theme.
const DETAIL_GAIN: f64 = 1.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub pairs: usize,
    /// Width of patch features (the latent rendering space).
    pub latent_dim: usize,
    /// Distinct coarse themes; 0 gives each cohort its own.
    pub coarse_clusters: usize,
    /// Hard-negative cohort size `g`.
    pub cohort_size: usize,
    pub noise: f64,
    pub seed: u64,
    pub text_len: usize,
    pub vocab_size: usize,
    pub frames: usize,
    pub patches: usize,
}

impl SyntheticSpec {
    /// Training split of the benchmark described by `cfg`.
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            pairs: cfg.data.pairs,
            latent_dim: cfg.model.patch_dim,
            coarse_clusters: cfg.data.coarse_clusters,
            cohort_size: cfg.data.cohort_size,
            noise: cfg.data.noise,
            seed: cfg.seed,
            text_len: cfg.model.max_text_len.min(ATTRIBUTES + 3),
            vocab_size: cfg.model.vocab_size,
            frames: cfg.model.frames,
            patches: cfg.model.patches,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.cohort_size == 0 || self.pairs == 0 || !self.pairs.is_multiple_of(self.cohort_size) {
            return fail(format!(
                "pairs ({}) must be a positive multiple of cohort_size ({})",
                self.pairs, self.cohort_size
            ));
        }
        if self.cohort_size > FINE_VALUES.min(self.patches) {
            return fail(format!(
                "cohort_size {} exceeds the {} distinguishable details",
                self.cohort_size,
                FINE_VALUES.min(self.patches)
            ));
        }
        let cohorts = self.pairs / self.cohort_size;
        if self.coarse_clusters > cohorts {
            return fail(format!("coarse_clusters {} exceeds cohort count {cohorts}", self.coarse_clusters));
        }
        if self.text_len < ATTRIBUTES + 1 {
            return fail(format!("text_len must be >= {}", ATTRIBUTES + 1));
        }
        if self.vocab_size < filler_start() + 8 {
            return fail(format!("vocab_size must be >= {}", filler_start() + 8));
        }
        if self.latent_dim == 0 || self.frames == 0 || self.patches == 0 {
            return fail("latent_dim, frames and patches must be >= 1".into());
        }
        if !(self.noise >= 0.0) {
            return fail("noise must be >= 0".into());
        }
        Ok(())
    }
}

fn coarse_word(attr: usize, value: usize) -> usize {
    1 + attr * ATTRIBUTE_VALUES + value
}

fn fine_word(detail: usize) -> usize {
    1 + ATTRIBUTES * ATTRIBUTE_VALUES + detail
}

fn filler_start() -> usize {
    fine_word(FINE_VALUES)
}

/// Aligned text/video pairs with cohort labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub texts: Vec<TextSequence>,
    pub videos: Vec<VideoClip>,
    /// Cohort index per pair.
    pub groups: Vec<usize>,
    pub seed: u64,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    /// Pair indices grouped by cohort, cohorts in label order.
    pub fn cohorts(&self) -> Vec<Vec<usize>> {
        let n = self.groups.iter().copied().max().map_or(0, |g| g + 1);
        let mut out = vec![Vec::new(); n];
        for (i, &g) in self.groups.iter().enumerate() {
            out[g].push(i);
        }
        out.retain(|c| !c.is_empty());
        out
    }

    /// Sub-dataset of the given pair indices, in order.
    pub fn subset(&self, idx: &[usize]) -> PairedDataset {
        PairedDataset {
            texts: idx.iter().map(|&i| self.texts[i].clone()).collect(),
            videos: idx.iter().map(|&i| self.videos[i].clone()).collect(),
            groups: idx.iter().map(|&i| self.groups[i]).collect(),
            seed: self.seed,
        }
    }
}

/// Shared rendering tables: one vector per attribute value and detail.
struct World {
    attribute_vecs: Vec<Vec<Vec<f64>>>,
    detail_vecs: Vec<Vec<f64>>,
}

impl World {
    fn new(dim: usize, stream: RngStream) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let draw = |s: RngStream| s.normals(dim).into_iter().map(|x| x * scale).collect::<Vec<_>>();
        let attribute_vecs = (0..ATTRIBUTES)
            .map(|a| {
                (0..ATTRIBUTE_VALUES)
                    .map(|v| draw(stream.fork(1).fork(a as u64).fork(v as u64)))
                    .collect()
            })
            .collect();
        let detail_vecs = (0..FINE_VALUES).map(|f| draw(stream.fork(2).fork(f as u64))).collect();
        Self {
            attribute_vecs,
            detail_vecs,
        }
    }
}

/// Which split of a benchmark to draw; both share the rendering tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Training split of `spec`.
pub fn generate_synthetic_pairs(spec: &SyntheticSpec) -> Result<PairedDataset> {
    generate_split(spec, Split::Train, spec.pairs)
}

/// Draw `pairs` items of the given split.
pub fn generate_split(spec: &SyntheticSpec, split: Split, pairs: usize) -> Result<PairedDataset> {
    let mut spec = spec.clone();
    spec.pairs = pairs;
    spec.validate()?;
    let root = RngStream::new(spec.seed).fork_str("synthetic");
    let world = World::new(spec.latent_dim, root.fork_str("world"));
    let items = root.fork_str(match split {
        Split::Train => "train",
        Split::Test => "test",
    });
    let g = spec.cohort_size;
    let cohorts = pairs / g;
    let clusters = if spec.coarse_clusters == 0 { cohorts } else { spec.coarse_clusters };
    let themes: Vec<[usize; ATTRIBUTES]> = (0..clusters)
        .map(|c| {
            let mut r = items.fork_str("theme").fork(c as u64).generator();
            std::array::from_fn(|_| rand::Rng::random_range(&mut r, 0..ATTRIBUTE_VALUES))
        })
        .collect();

    let (t, p, d) = (spec.frames, spec.patches, spec.latent_dim);
    let mut texts = Vec::with_capacity(pairs);
    let mut videos = Vec::with_capacity(pairs);
    let mut groups = Vec::with_capacity(pairs);
    for c in 0..cohorts {
        let cs = items.fork_str("cohort").fork(c as u64);
        let theme = themes[c % clusters];
        let details = cs.fork(1).permutation(FINE_VALUES);
        let positions = cs.fork(2).permutation(p);
        for (member, (&detail, &pos)) in details.iter().zip(&positions).take(g).enumerate() {
            let ms = cs.fork(100 + member as u64);

            let mut tokens: Vec<usize> = (0..ATTRIBUTES).map(|a| coarse_word(a, theme[a])).collect();
            tokens.push(fine_word(detail));
            let mut r = ms.fork(1).generator();
            while tokens.len() < spec.text_len {
                tokens.push(rand::Rng::random_range(&mut r, filler_start()..spec.vocab_size));
            }
            texts.push(TextSequence::new(tokens));

            let mut base = vec![0.0; d];
            for (a, &v) in theme.iter().enumerate() {
                for (b, x) in base.iter_mut().zip(&world.attribute_vecs[a][v]) {
                    *b += x;
                }
            }
            let noise = ms.fork(2).normals(t * p * d);
            let mut features = Vec::with_capacity(t * p * d);
            for f in 0..t {
                for q in 0..p {
                    for k in 0..d {
                        let mut x = base[k] + spec.noise * noise[(f * p + q) * d + k];
                        if q == pos {
                            x += DETAIL_GAIN * world.detail_vecs[detail][k];
                        }
                        features.push(x);
                    }
                }
            }
            videos.push(VideoClip::new(t, p, d, features)?);
            groups.push(c);
        }
    }
    Ok(PairedDataset {
        texts,
        videos,
        groups,
        seed: spec.seed,
    })
}

const DATASET_MAGIC: &[u8; 4] = b"TBDS";
const DATASET_VERSION: u32 = 1;
const GALLERY_MAGIC: &[u8; 4] = b"TBGL";
const GALLERY_VERSION: u32 = 1;
const GALLERY_HEADER_LEN: usize = 33;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Header, then token ids (u32), patch features (f64) and group labels (u64),
/// all little-endian. Texts must share one length and clips one shape.
pub fn write_dataset<W: Write>(ds: &PairedDataset, mut w: W) -> Result<()> {
    let first_t = ds.texts.first().ok_or_else(|| Error::input("cannot save an empty dataset"))?;
    let first_v = &ds.videos[0];
    let m = first_t.len();
    if ds.texts.iter().any(|t| t.len() != m) {
        return Err(Error::input("dataset texts must share one length"));
    }
    if ds
        .videos
        .iter()
        .any(|v| (v.frames, v.patches, v.dim) != (first_v.frames, first_v.patches, first_v.dim))
    {
        return Err(Error::input("dataset clips must share one shape"));
    }
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    for v in [
        ds.len() as u64,
        m as u64,
        first_v.frames as u64,
        first_v.patches as u64,
        first_v.dim as u64,
        ds.seed,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for t in &ds.texts {
        for &tok in &t.tokens {
            w.write_all(&(tok as u32).to_le_bytes())?;
        }
    }
    for v in &ds.videos {
        for x in &v.features {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    for &g in &ds.groups {
        w.write_all(&(g as u64).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<PairedDataset> {
    let mut rd = ByteReader::new(r);
    if rd.bytes(4)? != DATASET_MAGIC {
        return Err(Error::format(0, "not a dataset file"));
    }
    let version = rd.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::format(4, format!("unsupported dataset version {version}")));
    }
    let at = rd.offset();
    let mut header = [0usize; 5];
    for h in &mut header {
        *h = rd.u64()? as usize;
    }
    let [n, m, frames, patches, dim] = header;
    let seed = rd.u64()?;
    let clip_len = frames
        .checked_mul(patches)
        .and_then(|x| x.checked_mul(dim))
        .filter(|&x| x <= 1 << 28)
        .ok_or_else(|| Error::format(at, "implausible clip shape"))?;
    if n == 0 || n > 1 << 24 || m == 0 || m > 1 << 16 {
        return Err(Error::format(at, "implausible pair count or text length"));
    }
    let mut texts = Vec::with_capacity(n);
    for _ in 0..n {
        let mut tokens = Vec::with_capacity(m);
        for _ in 0..m {
            tokens.push(rd.u32()? as usize);
        }
        texts.push(TextSequence::new(tokens));
    }
    let mut videos = Vec::with_capacity(n);
    for _ in 0..n {
        videos.push(VideoClip::new(frames, patches, dim, rd.f64s(clip_len)?)?);
    }
    let mut groups = Vec::with_capacity(n);
    for _ in 0..n {
        groups.push(rd.u64()? as usize);
    }
    rd.expect_eof()?;
    Ok(PairedDataset {
        texts,
        videos,
        groups,
        seed,
    })
}

pub fn save_dataset(ds: &PairedDataset, path: &Path) -> Result<()> {
    write_dataset(ds, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: &Path) -> Result<PairedDataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

/// Header (magic, version, N, C, n, side, header checksum), then per entry: id, global
/// vector, `n` local vectors. Little-endian throughout.
pub fn write_gallery<W: Write>(gallery: &Gallery, mut w: W) -> Result<()> {
    if gallery.is_empty() {
        return Err(Error::input("refusing to save an empty gallery"));
    }
    let mut header = Vec::with_capacity(GALLERY_HEADER_LEN);
    header.extend_from_slice(GALLERY_MAGIC);
    header.extend_from_slice(&GALLERY_VERSION.to_le_bytes());
    header.extend_from_slice(&(gallery.len() as u64).to_le_bytes());
    header.extend_from_slice(&(gallery.width() as u64).to_le_bytes());
    header.extend_from_slice(&(gallery.locals_per_entry() as u64).to_le_bytes());
    header.push(gallery.side().tag());
    w.write_all(&header)?;
    w.write_all(&fnv1a(&header).to_le_bytes())?;
    for e in gallery.entries() {
        w.write_all(&e.id.to_le_bytes())?;
        for x in e.global.iter().chain(e.locals.data()) {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_gallery<R: Read>(r: R) -> Result<Gallery> {
    let mut rd = ByteReader::new(r);
    if rd.bytes(4)? != GALLERY_MAGIC {
        return Err(Error::format(0, "not a gallery file"));
    }
    let version = rd.u32()?;
    if version != GALLERY_VERSION {
        return Err(Error::format(4, format!("unsupported gallery version {version}")));
    }
    let n_entries = rd.u64()?;
    let width = rd.u64()?;
    let locals = rd.u64()?;
    if n_entries == 0 || n_entries > 1 << 24 {
        return Err(Error::format(8, format!("implausible entry count {n_entries}")));
    }
    if width == 0 || width > 1 << 16 {
        return Err(Error::format(16, format!("implausible width {width}")));
    }
    if locals == 0 || locals > 1 << 16 {
        return Err(Error::format(24, format!("implausible local count {locals}")));
    }
    let side_tag = rd.u8()?;
    let side = Side::from_tag(side_tag).ok_or_else(|| Error::format(32, "unknown gallery side"))?;
    let mut header = Vec::with_capacity(GALLERY_HEADER_LEN);
    header.extend_from_slice(GALLERY_MAGIC);
    header.extend_from_slice(&version.to_le_bytes());
    for v in [n_entries, width, locals] {
        header.extend_from_slice(&v.to_le_bytes());
    }
    header.push(side_tag);
    if rd.u64()? != fnv1a(&header) {
        return Err(Error::format(GALLERY_HEADER_LEN as u64, "gallery header checksum mismatch"));
    }
    let (width, locals) = (width as usize, locals as usize);
    let mut entries = Vec::with_capacity(n_entries as usize);
    for _ in 0..n_entries {
        let id = rd.u64()?;
        let global = rd.f64s(width)?;
        let l = DenseArray::matrix(locals, width, rd.f64s(locals * width)?)?;
        entries.push(GalleryEntry { id, global, locals: l });
    }
    let end = rd.offset();
    rd.expect_eof()?;
    Gallery::new(side, entries).map_err(|e| Error::format(end, e.to_string()))
}

pub fn save_gallery(gallery: &Gallery, path: &Path) -> Result<()> {
    write_gallery(gallery, BufWriter::new(File::create(path)?))
}

pub fn load_gallery(path: &Path) -> Result<Gallery> {
    read_gallery(BufReader::new(File::open(path)?))
}
