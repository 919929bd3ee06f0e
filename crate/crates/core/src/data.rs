//! Procedural multi-subject scenes with captions, masks and reference crops.

use std::fs;
use std::path::{Path, PathBuf};

use autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{CaptionEncoding, Vocab};
use crate::{Error, Result};

pub const SCENE: usize = 64;
pub const CROP: usize = 32;

pub const CLASSES: [&str; 6] = ["circle", "square", "triangle", "diamond", "cross", "ring"];

/// Caption suffixes and the background colour each one paints.
pub const TEMPLATES: [(&str, [f64; 3]); 6] = [
    ("in the snow", [0.92, 0.94, 0.98]),
    ("on the beach", [0.93, 0.80, 0.52]),
    ("in the jungle", [0.10, 0.38, 0.14]),
    ("on the grass", [0.42, 0.72, 0.30]),
    ("in the desert", [0.78, 0.50, 0.26]),
    ("at night", [0.07, 0.07, 0.24]),
];

const PALETTE: [[u8; 3]; 8] = [
    [220, 40, 40],
    [40, 80, 220],
    [242, 216, 38],
    [150, 50, 190],
    [242, 140, 26],
    [26, 204, 216],
    [230, 50, 150],
    [30, 30, 30],
];

const REGISTRY_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pattern {
    Solid,
    SplitH,
    SplitV,
    Quadrants,
}

impl Pattern {
    const ALL: [Pattern; 4] = [Pattern::Solid, Pattern::SplitH, Pattern::SplitV, Pattern::Quadrants];

    fn index(self) -> u32 {
        Self::ALL.iter().position(|&p| p == self).unwrap() as u32
    }

    fn from_index(i: u32) -> Result<Self> {
        Self::ALL
            .get(i as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown pattern {i}")))
    }
}

/// Appearance parameters that make a subject recognisable across scenes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Identity {
    pub class: usize,
    pub color_a: [u8; 3],
    pub color_b: [u8; 3],
    pub pattern: Pattern,
}

/// The fixed identity list subjects are drawn from.
pub fn registry() -> Vec<Identity> {
    (0..REGISTRY_SIZE)
        .map(|k| {
            let a = k % PALETTE.len();
            let mut b = (3 * k + 5) % PALETTE.len();
            if b == a {
                b = (a + 1) % PALETTE.len();
            }
            Identity {
                class: k % CLASSES.len(),
                color_a: PALETTE[a],
                color_b: PALETTE[b],
                pattern: Pattern::ALL[(k / 2 + k) % 4],
            }
        })
        .collect()
}

/// Every caption word; id 0 is the sentence-start token.
pub fn vocab() -> Vocab {
    let mut words = vec!["a", "and"];
    words.extend(CLASSES);
    for (t, _) in TEMPLATES {
        words.extend(t.split_whitespace());
    }
    Vocab::from_words(words)
}

/// Placement and identity of one subject in a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectSpec {
    /// Index into [`registry`].
    pub identity: usize,
    pub class_word: String,
    pub params: Identity,
    /// Half extent in pixels.
    pub size: usize,
    /// Centre `(row, col)` in scene pixels.
    pub center: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntitySample {
    pub spec: SubjectSpec,
    /// `[SCENE × SCENE]` binary.
    pub mask: Tensor,
    /// `[CROP × CROP × 3]` independent rendering of the same identity.
    pub reference: Tensor,
    /// `[CROP × CROP]` binary.
    pub reference_mask: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub seed: u64,
    pub template: usize,
    /// `[SCENE × SCENE × 3]` in `[0, 1]`, every value a multiple of 1/255.
    pub scene: Tensor,
    pub caption: CaptionEncoding,
    pub entities: Vec<EntitySample>,
}

impl TrainingSample {
    pub fn caption_text(&self, vocab: &Vocab) -> String {
        self.caption
            .token_ids
            .iter()
            .map(|&i| vocab.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Generation request beyond the seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneRequest {
    pub n_subjects: usize,
    /// Both subjects share a class word (only meaningful for two subjects).
    pub same_class: bool,
}

fn inside(class: usize, u: f64, v: f64) -> bool {
    match CLASSES[class] {
        "circle" => u * u + v * v <= 1.0,
        "square" => u.abs() <= 0.85 && v.abs() <= 0.85,
        "triangle" => v <= 0.8 && v >= -0.9 && u.abs() <= (v + 0.9) / 1.7 * 0.95,
        "diamond" => u.abs() + v.abs() <= 1.0,
        "cross" => (u.abs() <= 0.33 && v.abs() <= 0.95) || (v.abs() <= 0.33 && u.abs() <= 0.95),
        "ring" => {
            let r = u * u + v * v;
            (0.2..=1.0).contains(&r)
        }
        _ => unreachable!(),
    }
}

fn pattern_color(id: &Identity, u: f64, v: f64) -> [u8; 3] {
    let second = match id.pattern {
        Pattern::Solid => false,
        Pattern::SplitH => v >= 0.0,
        Pattern::SplitV => u >= 0.0,
        Pattern::Quadrants => (u >= 0.0) != (v >= 0.0),
    };
    if second {
        id.color_b
    } else {
        id.color_a
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Background of `template` with seeded per-pixel jitter, `[side × side × 3]`.
fn background(side: usize, template: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let base = TEMPLATES[template].1;
    Tensor::from_fn(&[side, side, 3], |i| quantize(base[i % 3] + rng.random_range(-0.04..0.04)))
}

/// Paints `id` centred at `center` with half extent `size`; returns the mask.
fn paint(img: &mut Tensor, id: &Identity, center: (usize, usize), size: usize) -> Tensor {
    let side = img.shape()[0];
    let mut mask = Tensor::zeros(&[side, side]);
    let s = size as f64;
    for y in 0..side {
        for x in 0..side {
            let u = (x as f64 + 0.5 - center.1 as f64) / s;
            let v = (y as f64 + 0.5 - center.0 as f64) / s;
            if u.abs() > 1.0 || v.abs() > 1.0 || !inside(id.class, u, v) {
                continue;
            }
            mask.data_mut()[y * side + x] = 1.0;
            let c = pattern_color(id, u, v);
            for (ch, &level) in c.iter().enumerate() {
                img.data_mut()[(y * side + x) * 3 + ch] = level as f64 / 255.0;
            }
        }
    }
    mask
}

fn boxes_overlap(a: ((usize, usize), usize), b: ((usize, usize), usize), gap: usize) -> bool {
    let d = |p: usize, q: usize| p.abs_diff(q);
    d(a.0 .0, b.0 .0) < a.1 + b.1 + gap && d(a.0 .1, b.0 .1) < a.1 + b.1 + gap
}

/// Deterministic scene for `seed`.
pub fn generate_sample(seed: u64, n_subjects: usize) -> Result<TrainingSample> {
    generate(
        seed,
        SceneRequest {
            n_subjects,
            same_class: false,
        },
    )
}

pub fn generate(seed: u64, req: SceneRequest) -> Result<TrainingSample> {
    if !(1..=2).contains(&req.n_subjects) {
        return Err(Error::invalid(format!("scenes hold 1 or 2 subjects, not {}", req.n_subjects)));
    }
    let reg = registry();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = rng.random_range(0..TEMPLATES.len());

    let first = rng.random_range(0..reg.len());
    let mut ids = vec![first];
    if req.n_subjects == 2 {
        let pool: Vec<usize> = (0..reg.len())
            .filter(|&k| k != first && (!req.same_class || reg[k].class == reg[first].class))
            .collect();
        ids.push(pool[rng.random_range(0..pool.len())]);
    }

    let placed = loop {
        let layout: Vec<((usize, usize), usize)> = ids
            .iter()
            .map(|_| {
                let size = rng.random_range(9..=13);
                let (lo, hi) = (size + 1, SCENE - size - 1);
                ((rng.random_range(lo..=hi), rng.random_range(lo..=hi)), size)
            })
            .collect();
        if layout.len() < 2 || !boxes_overlap(layout[0], layout[1], 2) {
            break layout;
        }
    };

    let mut scene = background(SCENE, template, &mut rng);
    let vocab = vocab();
    let mut words = vec!["<s>".to_string()];
    let mut positions = Vec::new();
    let mut entities = Vec::new();
    for (k, (&id, &(center, size))) in ids.iter().zip(&placed).enumerate() {
        let params = reg[id];
        let mask = paint(&mut scene, &params, center, size);

        let ref_template = rng.random_range(0..TEMPLATES.len());
        let mut reference = background(CROP, ref_template, &mut rng);
        let ref_size = rng.random_range(10..=14);
        let jitter = 15 - ref_size as i64;
        let rc = (
            (16 + rng.random_range(-jitter..=jitter)) as usize,
            (16 + rng.random_range(-jitter..=jitter)) as usize,
        );
        let reference_mask = paint(&mut reference, &params, rc, ref_size);

        if k > 0 {
            words.extend(["and".to_string()]);
        }
        words.push("a".into());
        positions.push(words.len());
        words.push(CLASSES[params.class].into());
        entities.push(EntitySample {
            spec: SubjectSpec {
                identity: id,
                class_word: CLASSES[params.class].into(),
                params,
                size,
                center,
            },
            mask,
            reference,
            reference_mask,
        });
    }
    words.extend(TEMPLATES[template].0.split_whitespace().map(str::to_string));
    let ids = words.iter().map(|w| vocab.id(w).expect("closed vocabulary")).collect();
    Ok(TrainingSample {
        seed,
        template,
        scene,
        caption: CaptionEncoding::new(ids, positions)?,
        entities,
    })
}

/// Seed of sample `index` in a set generated from `base`.
pub fn sample_seed(base: u64, index: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index)
}

/// What `gen-data` produces.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub count: usize,
    /// Probability a scene holds two subjects.
    pub two_subject_p: f64,
}

pub fn generate_dataset(spec: DatasetSpec) -> Result<Vec<TrainingSample>> {
    let mut pick = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED);
    (0..spec.count as u64)
        .map(|i| {
            let n = if pick.random::<f64>() < spec.two_subject_p { 2 } else { 1 };
            generate_sample(sample_seed(spec.seed, i), n)
        })
        .collect()
}

/// Area-averaged `[SCENE × SCENE × 3]` → `[grid² × 3]` in `[-1, 1]`.
pub fn scene_to_grid(scene: &Tensor, grid: usize) -> Result<Tensor> {
    let s = scene.shape();
    if s.len() != 3 || s[0] % grid != 0 || s[1] != s[0] {
        return Err(Error::invalid(format!("cannot pool scene {s:?} to {grid}x{grid}")));
    }
    let f = s[0] / grid;
    let area = (f * f) as f64;
    Ok(Tensor::from_fn(&[grid * grid, 3], |i| {
        let (cell, ch) = (i / 3, i % 3);
        let (y, x) = (cell / grid, cell % grid);
        let mut sum = 0.0;
        for dy in 0..f {
            for dx in 0..f {
                sum += scene.data()[((y * f + dy) * s[1] + x * f + dx) * 3 + ch];
            }
        }
        2.0 * sum / area - 1.0
    }))
}

// ---- binary format ----

const SAMPLE_MAGIC: &[u8; 4] = b"MMDS";
const SHARD_MAGIC: &[u8; 4] = b"MMSH";
pub const FORMAT_VERSION: u32 = 1;

const DT_U8: u8 = 1;
const DT_U32: u8 = 2;

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn shape(&mut self, dtype: u8, shape: &[usize]) {
        self.u8(dtype);
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u32(d as u32);
        }
    }
    /// Tensor whose values are multiples of 1/255 in `[0, 1]`.
    fn levels(&mut self, t: &Tensor) {
        self.shape(DT_U8, t.shape());
        for &v in t.data() {
            self.u8((v * 255.0).round() as u8);
        }
    }
    fn ids(&mut self, v: &[usize]) {
        self.shape(DT_U32, &[v.len()]);
        for &x in v {
            self.u32(x as u32);
        }
    }
}

pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated payload at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid utf-8 string".into()))
    }
    pub fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        if self.take(4)? != m {
            return Err(Error::Format(format!("bad magic, expected {:?}", String::from_utf8_lossy(m))));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {v}, expected {FORMAT_VERSION}")));
        }
        Ok(())
    }
    fn shape(&mut self, dtype: u8) -> Result<Vec<usize>> {
        let got = self.u8()?;
        if got != dtype {
            return Err(Error::Format(format!("dtype tag {got}, expected {dtype}")));
        }
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("implausible rank {rank}")));
        }
        (0..rank).map(|_| Ok(self.u32()? as usize)).collect()
    }
    fn levels(&mut self) -> Result<Tensor> {
        let shape = self.shape(DT_U8)?;
        let n: usize = shape.iter().product();
        let raw = self.take(n)?;
        Ok(Tensor::new(&shape, raw.iter().map(|&b| b as f64 / 255.0).collect())?)
    }
    fn ids(&mut self) -> Result<Vec<usize>> {
        let shape = self.shape(DT_U32)?;
        if shape.len() != 1 {
            return Err(Error::Format("id array must be 1-D".into()));
        }
        (0..shape[0]).map(|_| Ok(self.u32()? as usize)).collect()
    }
}

fn write_sample(w: &mut Writer, s: &TrainingSample) {
    w.bytes(SAMPLE_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(s.seed);
    w.u32(s.template as u32);
    w.ids(&s.caption.token_ids);
    w.ids(&s.caption.entity_positions);
    w.levels(&s.scene);
    w.u32(s.entities.len() as u32);
    for e in &s.entities {
        let sp = &e.spec;
        w.u32(sp.identity as u32);
        w.str(&sp.class_word);
        w.u32(sp.params.class as u32);
        w.bytes(&sp.params.color_a);
        w.bytes(&sp.params.color_b);
        w.u32(sp.params.pattern.index());
        w.u32(sp.size as u32);
        w.u32(sp.center.0 as u32);
        w.u32(sp.center.1 as u32);
        w.levels(&e.mask);
        w.levels(&e.reference);
        w.levels(&e.reference_mask);
    }
}

fn read_sample(r: &mut Reader) -> Result<TrainingSample> {
    r.magic(SAMPLE_MAGIC)?;
    let seed = r.u64()?;
    let template = r.u32()? as usize;
    if template >= TEMPLATES.len() {
        return Err(Error::Format(format!("template {template} out of range")));
    }
    let token_ids = r.ids()?;
    let positions = r.ids()?;
    let caption = CaptionEncoding::new(token_ids, positions).map_err(|e| Error::Format(e.to_string()))?;
    let scene = r.levels()?;
    let n = r.u32()? as usize;
    if n > 2 {
        return Err(Error::Format(format!("{n} entities in one sample")));
    }
    let mut entities = Vec::with_capacity(n);
    for _ in 0..n {
        let identity = r.u32()? as usize;
        let class_word = r.str()?;
        let class = r.u32()? as usize;
        let color_a = r.take(3)?.try_into().unwrap();
        let color_b = r.take(3)?.try_into().unwrap();
        let pattern = Pattern::from_index(r.u32()?)?;
        let size = r.u32()? as usize;
        let center = (r.u32()? as usize, r.u32()? as usize);
        entities.push(EntitySample {
            spec: SubjectSpec {
                identity,
                class_word,
                params: Identity {
                    class,
                    color_a,
                    color_b,
                    pattern,
                },
                size,
                center,
            },
            mask: r.levels()?,
            reference: r.levels()?,
            reference_mask: r.levels()?,
        });
    }
    Ok(TrainingSample {
        seed,
        template,
        scene,
        caption,
        entities,
    })
}

pub fn serialize(sample: &TrainingSample) -> Vec<u8> {
    let mut w = Writer::default();
    write_sample(&mut w, sample);
    w.buf
}

pub fn deserialize(bytes: &[u8]) -> Result<TrainingSample> {
    let mut r = Reader::new(bytes);
    let s = read_sample(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(s)
}

pub fn serialize_shard(samples: &[TrainingSample]) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(SHARD_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(samples.len() as u32);
    for s in samples {
        write_sample(&mut w, s);
    }
    w.buf
}

pub fn deserialize_shard(bytes: &[u8]) -> Result<Vec<TrainingSample>> {
    let mut r = Reader::new(bytes);
    r.magic(SHARD_MAGIC)?;
    let n = r.u32()? as usize;
    let out = (0..n).map(|_| read_sample(&mut r)).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in shard", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub const INDEX_FILE: &str = "index.txt";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Writes shards of at most `shard_size` samples, the index and the
/// vocabulary into `dir`. Returns the shard paths.
pub fn write_dataset(dir: &Path, samples: &[TrainingSample], shard_size: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    let mut paths = Vec::new();
    for (i, chunk) in samples.chunks(shard_size.max(1)).enumerate() {
        let name = format!("shard-{i:05}.bin");
        let path = dir.join(&name);
        fs::write(&path, serialize_shard(chunk)).map_err(|e| Error::io(&path, e))?;
        index.push_str(&format!("{name}\t{}\n", chunk.len()));
        paths.push(path);
    }
    let ip = dir.join(INDEX_FILE);
    fs::write(&ip, index).map_err(|e| Error::io(&ip, e))?;
    vocab().save(&dir.join(VOCAB_FILE))?;
    Ok(paths)
}

/// `(shard path, sample count)` entries of a dataset directory.
pub fn read_index(dir: &Path) -> Result<Vec<(PathBuf, usize)>> {
    let ip = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&ip).map_err(|e| Error::io(&ip, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let (p, c) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("{}:{}: expected path<TAB>count", ip.display(), n + 1)))?;
            let count = c
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("{}:{}: bad count {c:?}", ip.display(), n + 1)))?;
            Ok((dir.join(p), count))
        })
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for (path, count) in read_index(dir)? {
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let shard = deserialize_shard(&bytes)?;
        if shard.len() != count {
            return Err(Error::Format(format!("{} holds {} samples, index says {count}", path.display(), shard.len())));
        }
        out.extend(shard);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn same_seed_same_sample() {
        assert_eq!(generate_sample(42, 2).unwrap(), generate_sample(42, 2).unwrap());
        assert_ne!(generate_sample(42, 2).unwrap().scene, generate_sample(43, 2).unwrap().scene);
    }

    #[test]
    fn two_subject_contract() {
        let v = vocab();
        for seed in 0..50 {
            let s = generate_sample(seed, 2).unwrap();
            assert_eq!(s.entities.len(), 2);
            assert_eq!(s.caption.entity_positions.len(), 2);
            for (e, &p) in s.entities.iter().zip(&s.caption.entity_positions) {
                assert_eq!(v.token(s.caption.token_ids[p]), e.spec.class_word);
                assert!(e.mask.data().iter().any(|&m| m == 1.0));
                assert!(e.reference_mask.data().iter().any(|&m| m == 1.0));
            }
            let overlap: f64 = s.entities[0].mask.data().iter().zip(s.entities[1].mask.data()).map(|(a, b)| a * b).sum();
            assert_eq!(overlap, 0.0);
        }
    }

    #[test]
    fn caption_reads_like_a_template() {
        let v = vocab();
        let s = generate_sample(3, 1).unwrap();
        let text = s.caption_text(&v);
        let class = &s.entities[0].spec.class_word;
        assert_eq!(text, format!("<s> a {class} {}", TEMPLATES[s.template].0));
    }

    #[test]
    fn same_class_requests_share_the_class_word() {
        for seed in 0..30 {
            let s = generate(
                seed,
                SceneRequest {
                    n_subjects: 2,
                    same_class: true,
                },
            )
            .unwrap();
            assert_eq!(s.entities[0].spec.class_word, s.entities[1].spec.class_word);
            assert_ne!(s.entities[0].spec.identity, s.entities[1].spec.identity);
        }
    }

    #[test]
    fn identity_recurs_with_equal_parameters() {
        let reg = registry();
        let mut seen: std::collections::HashMap<usize, Identity> = Default::default();
        for seed in 0..200 {
            for e in generate_sample(seed, 2).unwrap().entities {
                assert_eq!(e.spec.params, reg[e.spec.identity]);
                if let Some(p) = seen.insert(e.spec.identity, e.spec.params) {
                    assert_eq!(p, e.spec.params);
                }
            }
        }
    }

    #[test]
    fn registry_entries_are_distinct() {
        let reg = registry();
        for i in 0..reg.len() {
            for j in i + 1..reg.len() {
                assert_ne!(reg[i], reg[j]);
            }
            assert_ne!(reg[i].color_a, reg[i].color_b);
        }
    }

    #[test]
    fn pixels_are_exact_byte_levels() {
        let s = generate_sample(9, 2).unwrap();
        for &v in s.scene.data() {
            assert_eq!((v * 255.0).round() / 255.0, v);
        }
    }

    #[test]
    fn round_trip_and_corruption() {
        let s = generate_sample(5, 2).unwrap();
        let bytes = serialize(&s);
        assert_eq!(deserialize(&bytes).unwrap(), s);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(deserialize(&bad), Err(Error::Format(_))));
        let mut old = bytes.clone();
        old[4] = 9;
        let err = deserialize(&old).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        assert!(matches!(deserialize(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    }

    #[test]
    fn grid_pooling_of_a_flat_scene() {
        let scene = Tensor::full(&[64, 64, 3], 0.75);
        let g = scene_to_grid(&scene, 16).unwrap();
        assert_eq!(g.shape(), &[256, 3]);
        assert!(g.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn vocabulary_covers_every_caption() {
        let v = vocab();
        assert_eq!(v.token(0), "<s>");
        assert!(v.len() < 64);
        let text = v.to_text();
        assert_eq!(Vocab::parse(&text).unwrap(), v);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn masks_disjoint_and_aligned(seed in any::<u64>(), same in any::<bool>()) {
            let s = generate(seed, SceneRequest { n_subjects: 2, same_class: same }).unwrap();
            let (a, b) = (&s.entities[0].mask, &s.entities[1].mask);
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x * y == 0.0));
            prop_assert!(s.caption.entity_positions[0] < s.caption.entity_positions[1]);
        }

        #[test]
        fn serialization_round_trips(seed in any::<u64>(), n in 1usize..=2) {
            let s = generate_sample(seed, n).unwrap();
            prop_assert_eq!(deserialize(&serialize(&s)).unwrap(), s);
        }
    }
}
