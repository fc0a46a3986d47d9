//! Synthetic attribute-rendered datasets, semantic matrix files, class-level
//! splits and the on-disk dataset archive.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::head::SemanticSpace;
use crate::rng::Rng64;
use crate::tensor::{Scalar, Tensor};

/// Version written into `meta.json` by [`gen_synthetic`].
pub const GENERATOR_VERSION: u32 = 1;

/// Fraction of each seen class's samples held out for testing.
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// Images, labels and class semantics.
#[derive(Clone, Debug, PartialEq)]
pub struct ZslDataset {
    pub name: String,
    /// `[channels, height, width]`
    pub image_shape: [usize; 3],
    /// All images concatenated in sample order.
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
    pub semantic: SemanticSpace,
    pub seed: u64,
}

impl ZslDataset {
    pub fn new(
        name: impl Into<String>,
        image_shape: [usize; 3],
        pixels: Vec<f32>,
        labels: Vec<usize>,
        semantic: SemanticSpace,
        seed: u64,
    ) -> Result<Self> {
        let per: usize = image_shape.iter().product();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(invalid!(
                "{} pixels do not form {} images of shape {:?}",
                pixels.len(),
                labels.len(),
                image_shape
            ));
        }
        let classes = semantic.class_count();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(invalid!("label {bad} out of range for {classes} classes"));
        }
        Ok(ZslDataset {
            name: name.into(),
            image_shape,
            pixels,
            labels,
            semantic,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.semantic.class_count()
    }

    pub fn pixels_of(&self, i: usize) -> &[f32] {
        let per: usize = self.image_shape.iter().product();
        &self.pixels[i * per..(i + 1) * per]
    }

    pub fn image<T: Scalar>(&self, i: usize) -> Tensor<T> {
        let data = self.pixels_of(i).iter().map(|&v| T::of(v as f64)).collect();
        Tensor::new(&self.image_shape, data).expect("validated shape")
    }

    /// Sample indices of each class, in sample order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.class_count()];
        for (i, &l) in self.labels.iter().enumerate() {
            by[l].push(i);
        }
        by
    }
}

/// Class partition and per-sample split lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub test_seen_idx: Vec<usize>,
    pub test_unseen_idx: Vec<usize>,
}

impl SplitSpec {
    /// Checks disjointness, coverage and label membership against `labels`.
    pub fn validate(&self, labels: &[usize], classes: usize) -> Result<()> {
        let seen: BTreeSet<usize> = self.seen_classes.iter().copied().collect();
        let unseen: BTreeSet<usize> = self.unseen_classes.iter().copied().collect();
        if seen.len() != self.seen_classes.len() || unseen.len() != self.unseen_classes.len() {
            return Err(invalid!("class lists contain duplicates"));
        }
        if seen.is_empty() || unseen.is_empty() {
            return Err(invalid!("both seen and unseen class sets must be non-empty"));
        }
        if let Some(c) = seen.intersection(&unseen).next() {
            return Err(invalid!("class {c} is both seen and unseen"));
        }
        if let Some(&c) = seen.union(&unseen).find(|&&c| c >= classes) {
            return Err(invalid!("class {c} out of range for {classes} classes"));
        }
        let mut used = BTreeSet::new();
        let lists = [
            ("train_idx", &self.train_idx, &seen),
            ("test_seen_idx", &self.test_seen_idx, &seen),
            ("test_unseen_idx", &self.test_unseen_idx, &unseen),
        ];
        for (name, list, allowed) in lists {
            for &i in list {
                let label = *labels
                    .get(i)
                    .ok_or_else(|| invalid!("{name} holds index {i} beyond {} samples", labels.len()))?;
                if !allowed.contains(&label) {
                    return Err(invalid!("{name} holds sample {i} of class {label}"));
                }
                if !used.insert(i) {
                    return Err(invalid!("sample {i} appears in more than one split list"));
                }
            }
        }
        Ok(())
    }

    /// Per-class flag: `true` for unseen classes.
    pub fn unseen_mask(&self, classes: usize) -> Vec<bool> {
        let mut m = vec![false; classes];
        for &c in &self.unseen_classes {
            m[c] = true;
        }
        m
    }
}

/// Synthetic generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub classes: usize,
    pub seen: usize,
    pub attributes: usize,
    pub embed_dim: usize,
    pub images_per_class: usize,
    pub channels: usize,
    pub side: usize,
    pub noise: f64,
    pub seed: u64,
    pub test_seen_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            classes: 20,
            seen: 15,
            attributes: 12,
            embed_dim: 8,
            images_per_class: 30,
            channels: 3,
            side: 32,
            noise: 0.1,
            seed: 0,
            test_seen_fraction: DEFAULT_TEST_FRACTION,
        }
    }
}

/// Side of the square block layout holding `k` attribute blocks.
pub fn layout_side(k: usize) -> usize {
    let mut g = (k as f64).sqrt().ceil() as usize;
    while g * g < k {
        g += 1;
    }
    g
}

/// Pixel rectangle `(row0, col0, size)` of attribute `k`'s block.
pub fn block_of(k: usize, attributes: usize, side: usize) -> (usize, usize, usize) {
    let g = layout_side(attributes);
    let size = side / g;
    ((k / g) * size, (k % g) * size, size)
}

/// Draws binary class signatures until they are pairwise distinct, every
/// class has an active attribute, and every attribute is active in some seen
/// class. Returns `[K][C]` rows.
fn draw_signatures(rng: &mut Rng64, k: usize, c: usize, seen: &[usize]) -> Result<Vec<Vec<f64>>> {
    if k < 63 && (1u64 << k) - 1 < c as u64 {
        return Err(invalid!("{k} binary attributes cannot give {c} distinct non-empty signatures"));
    }
    for _ in 0..10_000 {
        let cols: Vec<Vec<bool>> = (0..c)
            .map(|_| (0..k).map(|_| rng.uniform() < 0.5).collect())
            .collect();
        let distinct = cols.iter().collect::<BTreeSet<_>>().len() == c;
        let nonempty = cols.iter().all(|col| col.iter().any(|&b| b));
        let covered = (0..k).all(|a| seen.iter().any(|&s| cols[s][a]));
        if distinct && nonempty && covered {
            return Ok((0..k)
                .map(|a| (0..c).map(|j| if cols[j][a] { 1.0 } else { 0.0 }).collect())
                .collect());
        }
    }
    Err(invalid!("could not draw valid signatures for K={k}, C={c}"))
}

/// Splits each seen class's samples into train and test; all unseen samples
/// go to test. Each seen class keeps at least one training sample.
fn split_samples(
    dataset: &ZslDataset,
    mut seen: Vec<usize>,
    mut unseen: Vec<usize>,
    test_fraction: f64,
    rng: &mut Rng64,
) -> SplitSpec {
    seen.sort_unstable();
    unseen.sort_unstable();
    let by = dataset.indices_by_class();
    let (mut train, mut test_seen, mut test_unseen) = (Vec::new(), Vec::new(), Vec::new());
    for &c in &seen {
        let mut idx = by[c].clone();
        rng.shuffle(&mut idx);
        let n = idx.len();
        let n_test = ((test_fraction * n as f64).round() as usize).min(n.saturating_sub(1));
        test_seen.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    for &c in &unseen {
        test_unseen.extend_from_slice(&by[c]);
    }
    train.sort_unstable();
    test_seen.sort_unstable();
    test_unseen.sort_unstable();
    SplitSpec {
        seen_classes: seen,
        unseen_classes: unseen,
        train_idx: train,
        test_seen_idx: test_seen,
        test_unseen_idx: test_unseen,
    }
}

/// Renders a deterministic attribute dataset and its split.
///
/// Stream order from `Rng64::new(seed)`: seen-class shuffle, signatures,
/// embeddings, pixel noise (sample order, then channel, row, column), then a
/// forked stream for the sample split.
pub fn gen_synthetic(cfg: &GenConfig) -> Result<(ZslDataset, SplitSpec)> {
    let (c, k) = (cfg.classes, cfg.attributes);
    if cfg.seen == 0 || cfg.seen >= c {
        return Err(invalid!("seen count {} must be in 1..{c}", cfg.seen));
    }
    if k == 0 || cfg.embed_dim == 0 || cfg.images_per_class == 0 || cfg.channels == 0 {
        return Err(invalid!("attributes, embed_dim, images_per_class and channels must be positive"));
    }
    if cfg.side / layout_side(k) == 0 {
        return Err(invalid!(
            "{k} attribute blocks need a {g}x{g} layout, which does not fit a {s}x{s} image",
            g = layout_side(k),
            s = cfg.side
        ));
    }
    if !(cfg.noise >= 0.0) || !(0.0..1.0).contains(&cfg.test_seen_fraction) {
        return Err(invalid!("noise must be >= 0 and test_seen_fraction in [0, 1)"));
    }
    let mut rng = Rng64::new(cfg.seed);
    let mut order: Vec<usize> = (0..c).collect();
    rng.shuffle(&mut order);
    let seen: Vec<usize> = order[..cfg.seen].to_vec();
    let unseen: Vec<usize> = order[cfg.seen..].to_vec();

    let sig = draw_signatures(&mut rng, k, c, &seen)?;
    let proto_data: Vec<f64> = sig.iter().flatten().copied().collect();
    let mut emb_data = Vec::with_capacity(k * cfg.embed_dim);
    for _ in 0..k {
        let v: Vec<f64> = (0..cfg.embed_dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        emb_data.extend(v.iter().map(|x| x / norm));
    }
    let semantic = SemanticSpace::new(
        Tensor::new(&[k, c], proto_data)?,
        Tensor::new(&[k, cfg.embed_dim], emb_data)?,
    )?;

    let (ch, side) = (cfg.channels, cfg.side);
    let mut templates = vec![vec![0.0f32; ch * side * side]; c];
    for (class, tpl) in templates.iter_mut().enumerate() {
        for (a, row) in sig.iter().enumerate() {
            if row[class] == 0.0 {
                continue;
            }
            let (r0, c0, size) = block_of(a, k, side);
            let plane = a % ch;
            for i in r0..r0 + size {
                for j in c0..c0 + size {
                    tpl[plane * side * side + i * side + j] = 1.0;
                }
            }
        }
    }
    let mut labels = Vec::with_capacity(c * cfg.images_per_class);
    let mut pixels = Vec::with_capacity(c * cfg.images_per_class * ch * side * side);
    for class in 0..c {
        for _ in 0..cfg.images_per_class {
            labels.push(class);
            pixels.extend(
                templates[class]
                    .iter()
                    .map(|&v| (v as f64 + cfg.noise * rng.normal()) as f32),
            );
        }
    }
    let dataset = ZslDataset::new(
        "synthetic",
        [ch, side, side],
        pixels,
        labels,
        semantic,
        cfg.seed,
    )?;
    let mut split_rng = rng.fork();
    let split = split_samples(&dataset, seen, unseen, cfg.test_seen_fraction, &mut split_rng);
    Ok((dataset, split))
}

/// Class-level partition with `round(fraction * C)` seen classes, then the
/// per-class sample split.
pub fn make_splits(dataset: &ZslDataset, seen_fraction: f64, seed: u64) -> Result<SplitSpec> {
    let c = dataset.class_count();
    if !(0.0..=1.0).contains(&seen_fraction) {
        return Err(invalid!("seen fraction {seen_fraction} outside [0, 1]"));
    }
    let n_seen = (seen_fraction * c as f64).round() as usize;
    if n_seen == 0 || n_seen >= c {
        return Err(invalid!(
            "seen fraction {seen_fraction} of {c} classes leaves {n_seen} seen and {} unseen; both must be non-empty",
            c - n_seen.min(c)
        ));
    }
    let mut rng = Rng64::new(seed);
    let mut order: Vec<usize> = (0..c).collect();
    rng.shuffle(&mut order);
    let seen = order[..n_seen].to_vec();
    let unseen = order[n_seen..].to_vec();
    Ok(split_samples(dataset, seen, unseen, DEFAULT_TEST_FRACTION, &mut rng))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses headerless comma-separated numbers; every row must have the same
/// length. Blank lines are skipped.
pub fn parse_matrix(path: &Path, text: &str) -> Result<(usize, usize, Vec<f64>)> {
    let mut cols = None;
    let mut data = Vec::new();
    let mut rows = 0;
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::format(path, format!("line {}: bad number {:?}", ln + 1, f.trim())))
            })
            .collect::<Result<Vec<_>>>()?;
        match cols {
            None => cols = Some(row.len()),
            Some(n) if n != row.len() => {
                return Err(Error::format(
                    path,
                    format!("ragged rows: line {} has {} values, expected {n}", ln + 1, row.len()),
                ))
            }
            _ => {}
        }
        data.extend(row);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::format(path, "empty matrix"))?;
    Ok((rows, cols, data))
}

fn format_matrix(rows: usize, cols: usize, at: impl Fn(usize, usize) -> f64) -> String {
    let mut s = String::new();
    for i in 0..rows {
        let line: Vec<String> = (0..cols).map(|j| format!("{:?}", at(i, j))).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// Reads a prototype file (one row of K values per class) and an embedding
/// file (one row of d_s values per attribute).
pub fn load_semantic(prototypes: &Path, embeddings: &Path) -> Result<SemanticSpace> {
    let (c, k, p) = parse_matrix(prototypes, &read_text(prototypes)?)?;
    let (k2, ds, e) = parse_matrix(embeddings, &read_text(embeddings)?)?;
    if k != k2 {
        return Err(invalid!(
            "attribute count mismatch: {} has K={k} columns, {} has K={k2} rows",
            prototypes.display(),
            embeddings.display()
        ));
    }
    let mut t = vec![0.0; k * c];
    for ci in 0..c {
        for ki in 0..k {
            t[ki * c + ci] = p[ci * k + ki];
        }
    }
    SemanticSpace::new(Tensor::new(&[k, c], t)?, Tensor::new(&[k, ds], e)?)
}

/// Writes the two semantic files in the layout read by [`load_semantic`].
pub fn save_semantic(sem: &SemanticSpace, prototypes: &Path, embeddings: &Path) -> Result<()> {
    let (k, c, ds) = (sem.attribute_count(), sem.class_count(), sem.embed_dim());
    let p = sem.prototypes().data();
    let e = sem.embeddings().data();
    write_file(prototypes, format_matrix(c, k, |i, j| p[j * c + i]))?;
    write_file(embeddings, format_matrix(k, ds, |i, j| e[i * ds + j]))
}

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub name: String,
    pub samples: usize,
    pub classes: usize,
    pub attributes: usize,
    pub embed_dim: usize,
    pub image_shape: [usize; 3],
    pub seed: u64,
    pub generator_version: u32,
}

pub const IMAGES_FILE: &str = "images.bin";
pub const LABELS_FILE: &str = "labels.txt";
pub const SPLITS_FILE: &str = "splits.json";
pub const META_FILE: &str = "meta.json";
pub const PROTOTYPES_FILE: &str = "prototypes.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

/// Writes a dataset directory.
pub fn save_archive(dir: &Path, dataset: &ZslDataset, split: &SplitSpec) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes: Vec<u8> = dataset.pixels.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(&dir.join(IMAGES_FILE), bytes)?;
    let labels: String = dataset.labels.iter().map(|l| format!("{l}\n")).collect();
    write_file(&dir.join(LABELS_FILE), labels)?;
    let splits = serde_json::to_string_pretty(split).expect("serialisable");
    write_file(&dir.join(SPLITS_FILE), splits)?;
    let meta = ArchiveMeta {
        name: dataset.name.clone(),
        samples: dataset.len(),
        classes: dataset.class_count(),
        attributes: dataset.semantic.attribute_count(),
        embed_dim: dataset.semantic.embed_dim(),
        image_shape: dataset.image_shape,
        seed: dataset.seed,
        generator_version: GENERATOR_VERSION,
    };
    write_file(&dir.join(META_FILE), serde_json::to_string_pretty(&meta).expect("serialisable"))?;
    save_semantic(
        &dataset.semantic,
        &dir.join(PROTOTYPES_FILE),
        &dir.join(EMBEDDINGS_FILE),
    )
}

/// Reads a dataset directory written by [`save_archive`].
pub fn load_archive(dir: &Path) -> Result<(ZslDataset, SplitSpec)> {
    let meta_path = dir.join(META_FILE);
    let meta: ArchiveMeta = serde_json::from_str(&read_text(&meta_path)?)
        .map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let semantic = load_semantic(&dir.join(PROTOTYPES_FILE), &dir.join(EMBEDDINGS_FILE))?;
    if semantic.class_count() != meta.classes || semantic.attribute_count() != meta.attributes {
        return Err(Error::format(
            &meta_path,
            format!(
                "meta declares C={}, K={} but semantic files give C={}, K={}",
                meta.classes,
                meta.attributes,
                semantic.class_count(),
                semantic.attribute_count()
            ),
        ));
    }
    let img_path = dir.join(IMAGES_FILE);
    let bytes = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(&img_path, "length is not a multiple of 4 bytes"));
    }
    let pixels: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let lab_path = dir.join(LABELS_FILE);
    let labels = read_text(&lab_path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse::<usize>()
                .map_err(|_| Error::format(&lab_path, format!("line {}: bad label {l:?}", i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    if labels.len() != meta.samples {
        return Err(Error::format(
            &lab_path,
            format!("{} labels for {} samples", labels.len(), meta.samples),
        ));
    }
    let dataset = ZslDataset::new(meta.name, meta.image_shape, pixels, labels, semantic, meta.seed)?;
    let split_path = dir.join(SPLITS_FILE);
    let split: SplitSpec = serde_json::from_str(&read_text(&split_path)?)
        .map_err(|e| Error::format(&split_path, e.to_string()))?;
    split.validate(&dataset.labels, dataset.class_count())?;
    Ok((dataset, split))
}
