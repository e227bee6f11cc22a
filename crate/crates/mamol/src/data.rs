//! Multimodal datasets: synthetic correlated generation, the exact
//! missing-rate protocol, stratified splits, and the on-disk format.
//!
//! The missing protocol is a deterministic partition, not a per-sample coin
//! flip: counts are exact functions of `(N, eta)` and the assignment is a
//! seeded shuffle followed by contiguous slicing, so tests can assert counts
//! and any run is reproducible bit-for-bit from its seed.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bitmask over M modalities; bit m set means modality m is present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MissingPattern {
    bits: u32,
    m: u8,
}

impl MissingPattern {
    pub fn new(present: &[bool]) -> Result<Self> {
        if present.len() < 2 || present.len() > 32 {
            return Err(Error::Validation(format!(
                "pattern needs 2..=32 modalities, got {}",
                present.len()
            )));
        }
        let mut bits = 0u32;
        for (i, &p) in present.iter().enumerate() {
            if p {
                bits |= 1 << i;
            }
        }
        if bits == 0 {
            return Err(Error::Validation("a sample must keep at least one modality".into()));
        }
        Ok(MissingPattern { bits, m: present.len() as u8 })
    }

    pub fn complete(m: usize) -> Self {
        assert!((2..=32).contains(&m));
        MissingPattern { bits: (1u32 << m) - 1, m: m as u8 }
    }

    /// Pattern with the modalities in `missing` absent; errors if that would
    /// leave nothing present.
    pub fn with_missing(m: usize, missing: &[usize]) -> Result<Self> {
        let mut present = vec![true; m];
        for &i in missing {
            if i >= m {
                return Err(Error::Index(format!("modality {i} out of range for M={m}")));
            }
            present[i] = false;
        }
        Self::new(&present)
    }

    pub fn num_modalities(&self) -> usize {
        self.m as usize
    }

    pub fn is_present(&self, modality: usize) -> bool {
        modality < self.m as usize && (self.bits >> modality) & 1 == 1
    }

    pub fn is_complete(&self) -> bool {
        self.bits == (1u32 << self.m) - 1
    }

    pub fn num_present(&self) -> usize {
        self.bits.count_ones() as usize
    }

    /// 0/1 vector, one entry per modality.
    pub fn as_f64(&self) -> Vec<f64> {
        (0..self.m as usize).map(|i| if self.is_present(i) { 1.0 } else { 0.0 }).collect()
    }

    /// Index into the `2^M - 1` valid patterns (completeness included),
    /// for one-hot pattern encodings.
    pub fn one_hot_index(&self) -> usize {
        (self.bits - 1) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityInfo {
    pub name: String,
    pub tokens: usize,
    pub dim: usize,
}

impl ModalityInfo {
    pub fn block_len(&self) -> usize {
        self.tokens * self.dim
    }
}

/// In-memory dataset: per-modality dense feature blocks plus labels and
/// per-sample presence patterns. Raw feature content for absent modalities
/// stays in memory; absence is carried by the pattern alone.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub modalities: Vec<ModalityInfo>,
    /// Per modality: `num_samples * tokens * dim` values, sample-major.
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub patterns: Vec<MissingPattern>,
}

impl Dataset {
    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn sample_block(&self, modality: usize, sample: usize) -> &[f64] {
        let len = self.modalities[modality].block_len();
        &self.features[modality][sample * len..(sample + 1) * len]
    }

    /// Copies the given samples into a new dataset, preserving order.
    pub fn gather(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(self.modalities.len());
        for m in 0..self.modalities.len() {
            let len = self.modalities[m].block_len();
            let mut block = Vec::with_capacity(indices.len() * len);
            for &i in indices {
                block.extend_from_slice(&self.features[m][i * len..(i + 1) * len]);
            }
            features.push(block);
        }
        Dataset {
            modalities: self.modalities.clone(),
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            patterns: indices.iter().map(|&i| self.patterns[i]).collect(),
        }
    }

    pub fn pattern_counts(&self) -> std::collections::BTreeMap<u32, usize> {
        let mut counts = std::collections::BTreeMap::new();
        for p in &self.patterns {
            *counts.entry(p.bits).or_insert(0) += 1;
        }
        counts
    }
}

/// Specification for the synthetic correlated multimodal generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub modalities: Vec<ModalityInfo>,
    pub num_classes: usize,
    pub num_samples: usize,
    /// Scale of the class-bearing component.
    pub signal_strength: f64,
    /// Fraction of the class signal shared across modalities, in [0, 1].
    pub correlation: f64,
    /// Standard deviation of additive feature noise.
    pub noise_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modalities.len() < 2 {
            return Err(Error::Validation("need at least 2 modalities".into()));
        }
        if self.num_samples == 0 {
            return Err(Error::Validation("num_samples must be > 0".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Validation("num_classes must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return Err(Error::Validation(format!(
                "correlation must be in [0, 1], got {}",
                self.correlation
            )));
        }
        if self.modalities.iter().any(|m| m.tokens == 0 || m.dim == 0) {
            return Err(Error::Validation("modality tokens/dim must be positive".into()));
        }
        Ok(())
    }
}

const LATENT_DIM: usize = 16;

/// Generates a fully complete synthetic dataset. Every class has a distinct
/// latent prototype; each modality sees an independent linear projection of
/// `correlation * shared_prototype + (1 - correlation) * modality_prototype`
/// plus Gaussian noise. Deterministic in the seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m_count = spec.modalities.len();
    let (c, n) = (spec.num_classes, spec.num_samples);

    let normal = |rng: &mut ChaCha8Rng, len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    };

    // Shared class prototypes, then per-modality private prototypes and
    // projections, in fixed order for reproducibility.
    let shared: Vec<f64> = normal(&mut rng, c * LATENT_DIM);
    let mut private = Vec::with_capacity(m_count);
    let mut projections = Vec::with_capacity(m_count);
    for info in &spec.modalities {
        private.push(normal(&mut rng, c * LATENT_DIM));
        let scale = 1.0 / (LATENT_DIM as f64).sqrt();
        projections
            .push(normal(&mut rng, LATENT_DIM * info.block_len()).iter().map(|v| v * scale).collect::<Vec<f64>>());
    }

    // Balanced labels, shuffled.
    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(&mut rng);

    let rho = spec.correlation;
    let mut features = Vec::with_capacity(m_count);
    for (m, info) in spec.modalities.iter().enumerate() {
        let block_len = info.block_len();
        let proj = &projections[m];
        let mut block = vec![0.0; n * block_len];
        for (i, &label) in labels.iter().enumerate() {
            let mut latent = [0.0; LATENT_DIM];
            for (k, l) in latent.iter_mut().enumerate() {
                let sh = shared[label * LATENT_DIM + k];
                let pr = private[m][label * LATENT_DIM + k];
                *l = spec.signal_strength * (rho * sh + (1.0 - rho) * pr);
            }
            let out = &mut block[i * block_len..(i + 1) * block_len];
            for (k, &l) in latent.iter().enumerate() {
                if l != 0.0 {
                    for (o, p) in out.iter_mut().zip(&proj[k * block_len..(k + 1) * block_len]) {
                        *o += l * p;
                    }
                }
            }
            if spec.noise_scale != 0.0 {
                for o in out.iter_mut() {
                    *o += spec.noise_scale * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        features.push(block);
    }

    Ok(Dataset {
        modalities: spec.modalities.clone(),
        features,
        labels,
        num_classes: c,
        patterns: vec![MissingPattern::complete(m_count); n],
    })
}

/// Which samples lose which modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingMode {
    /// Missing mass spread over every nonempty proper missing subset.
    Both,
    /// Only the given modality ever goes missing.
    OnlyModality(usize),
}

/// How the missing mass is divided across subsets when `M > 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SubsetSplit {
    /// round(N*eta) split as evenly as possible over the subsets.
    #[default]
    Uniform,
    /// Each subset gets round(N*eta / (M^2 - 2)) samples.
    MsquaredFormula,
}

/// Assigns missing patterns to an exact, seed-determined partition of the
/// dataset: `round(N*eta)` samples become incomplete (divided over the
/// eligible missing subsets), the remainder stay complete.
pub fn apply_missing_protocol(
    dataset: &Dataset,
    eta: f64,
    mode: MissingMode,
    split: SubsetSplit,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Validation(format!("missing rate eta must be in [0, 1], got {eta}")));
    }
    let m = dataset.num_modalities();
    let n = dataset.num_samples();
    if let MissingMode::OnlyModality(idx) = mode {
        if idx >= m {
            return Err(Error::Index(format!("modality {idx} out of range for M={m}")));
        }
    }

    // Missing subsets, each expressed as the list of absent modalities.
    let subsets: Vec<Vec<usize>> = match mode {
        MissingMode::OnlyModality(idx) => vec![vec![idx]],
        MissingMode::Both => {
            // All nonempty proper subsets, ordered by missing-bitmask value.
            (1u32..(1 << m) - 1)
                .map(|mask| (0..m).filter(|&i| (mask >> i) & 1 == 1).collect())
                .collect()
        }
    };

    let total_missing = (n as f64 * eta).round() as usize;
    let counts: Vec<usize> = match (mode, split) {
        (MissingMode::OnlyModality(_), _) => vec![total_missing],
        (MissingMode::Both, SubsetSplit::Uniform) => {
            let k = subsets.len();
            let base = total_missing / k;
            let rem = total_missing % k;
            (0..k).map(|i| base + usize::from(i < rem)).collect()
        }
        (MissingMode::Both, SubsetSplit::MsquaredFormula) => {
            let per = (n as f64 * eta / (m * m - 2) as f64).round() as usize;
            vec![per; subsets.len()]
        }
    };
    let assigned: usize = counts.iter().sum();
    if assigned > n {
        return Err(Error::Validation(format!(
            "missing protocol assigns {assigned} samples but only {n} exist"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut patterns = vec![MissingPattern::complete(m); n];
    let mut at = 0;
    for (subset, &count) in subsets.iter().zip(&counts) {
        let pat = MissingPattern::with_missing(m, subset)?;
        for &sample in &order[at..at + count] {
            patterns[sample] = pat;
        }
        at += count;
    }

    let mut out = dataset.clone();
    out.patterns = patterns;
    Ok(out)
}

/// Seed-deterministic stratified split; `fraction` of each class goes to the
/// train side. The two sides are disjoint and preserve dataset order.
pub fn split_train_test(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Validation(format!("split fraction must be in [0, 1], got {fraction}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        if l >= dataset.num_classes {
            return Err(Error::Index(format!(
                "label {l} out of range for {} classes",
                dataset.num_classes
            )));
        }
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for group in by_class.iter_mut() {
        group.shuffle(&mut rng);
        let take = (group.len() as f64 * fraction).round() as usize;
        train_idx.extend_from_slice(&group[..take]);
        test_idx.extend_from_slice(&group[take..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((dataset.gather(&train_idx), dataset.gather(&test_idx)))
}

// ── On-disk format ───────────────────────────────────────────────────────
//
// manifest.json + one little-endian f64 binary per modality with a 16-byte
// header (magic "MMRS", version u32, N u32, reserved u32) + a text labels
// file, one integer per line.

const MAGIC: &[u8; 4] = b"MMRS";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestModality {
    name: String,
    tokens: usize,
    dim: usize,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    modalities: Vec<ManifestModality>,
    labels_file: String,
    num_classes: usize,
    num_samples: usize,
}

/// Writes `manifest.json`, per-modality binaries, and the labels file.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        modalities: dataset
            .modalities
            .iter()
            .map(|m| ManifestModality {
                name: m.name.clone(),
                tokens: m.tokens,
                dim: m.dim,
                file: format!("{}.bin", m.name),
            })
            .collect(),
        labels_file: "labels.txt".into(),
        num_classes: dataset.num_classes,
        num_samples: dataset.num_samples(),
    };
    let mut mf = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut mf, &manifest)?;
    mf.write_all(b"\n")?;

    for (m, info) in dataset.modalities.iter().enumerate() {
        let mut buf =
            Vec::with_capacity(16 + dataset.features[m].len() * std::mem::size_of::<f64>());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(dataset.num_samples() as u32).to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        for v in &dataset.features[m] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.join(format!("{}.bin", info.name)), buf)?;
    }

    let labels: String =
        dataset.labels.iter().map(|l| format!("{l}\n")).collect::<Vec<_>>().join("");
    std::fs::write(dir.join("labels.txt"), labels)?;
    Ok(())
}

/// Loads a dataset directory through its manifest, validating header fields
/// against the manifest. All loaded samples start modality-complete.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    if !manifest_path.exists() {
        return Err(Error::Format(format!("manifest not found: {}", manifest_path.display())));
    }
    let manifest: Manifest = serde_json::from_reader(std::fs::File::open(manifest_path)?)?;
    let dir: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    if manifest.modalities.len() < 2 {
        return Err(Error::Format("manifest must list at least 2 modalities".into()));
    }
    if manifest.num_classes < 2 {
        return Err(Error::Format("manifest num_classes must be >= 2".into()));
    }

    let n = manifest.num_samples;
    let mut modalities = Vec::new();
    let mut features = Vec::new();
    for m in &manifest.modalities {
        let path = dir.join(&m.file);
        if !path.exists() {
            return Err(Error::Format(format!("modality file not found: {}", path.display())));
        }
        let mut f = std::fs::File::open(&path)?;
        let mut header = [0u8; 16];
        f.read_exact(&mut header)
            .map_err(|_| Error::Format(format!("{}: truncated header", m.file)))?;
        if &header[0..4] != MAGIC {
            return Err(Error::Format(format!("{}: bad magic bytes", m.file)));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("{}: unsupported version {version}", m.file)));
        }
        let header_n = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        if header_n != n {
            return Err(Error::Format(format!(
                "{}: header sample count {header_n} does not match manifest {n}",
                m.file
            )));
        }
        let expect = n * m.tokens * m.dim;
        let mut raw = Vec::new();
        f.read_to_end(&mut raw)?;
        if raw.len() != expect * std::mem::size_of::<f64>() {
            return Err(Error::Format(format!(
                "{}: payload holds {} values but manifest dimensions imply {expect}",
                m.file,
                raw.len() / std::mem::size_of::<f64>()
            )));
        }
        let data: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        modalities.push(ModalityInfo { name: m.name.clone(), tokens: m.tokens, dim: m.dim });
        features.push(data);
    }

    let labels_path = dir.join(&manifest.labels_file);
    if !labels_path.exists() {
        return Err(Error::Format(format!("labels file not found: {}", labels_path.display())));
    }
    let mut labels = Vec::with_capacity(n);
    for (ln, line) in std::fs::read_to_string(&labels_path)?.lines().enumerate() {
        let label: usize = line
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("labels line {}: not an integer", ln + 1)))?;
        if label >= manifest.num_classes {
            return Err(Error::Index(format!(
                "labels line {}: label {label} out of range for {} classes",
                ln + 1,
                manifest.num_classes
            )));
        }
        labels.push(label);
    }
    if labels.len() != n {
        return Err(Error::Format(format!(
            "labels file has {} entries, manifest says {n}",
            labels.len()
        )));
    }

    Ok(Dataset {
        modalities,
        features,
        labels,
        num_classes: manifest.num_classes,
        patterns: vec![MissingPattern::complete(manifest.modalities.len()); n],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            modalities: vec![
                ModalityInfo { name: "a".into(), tokens: 2, dim: 8 },
                ModalityInfo { name: "b".into(), tokens: 2, dim: 8 },
            ],
            num_classes: 4,
            num_samples: 300,
            signal_strength: 1.0,
            correlation: 0.7,
            noise_scale: 0.3,
            seed: 42,
        }
    }

    #[test]
    fn pattern_rejects_all_missing() {
        assert!(MissingPattern::new(&[false, false]).is_err());
        let p = MissingPattern::new(&[true, false]).unwrap();
        assert!(p.is_present(0) && !p.is_present(1));
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = small_spec();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.labels, b.labels);
        for m in 0..2 {
            assert_eq!(a.features[m], b.features[m]);
        }
    }

    /// Least-squares probe: one-hot regression solved by normal equations.
    fn linear_probe_accuracy(x: &[f64], d: usize, labels: &[usize], c: usize) -> f64 {
        let n = labels.len();
        let da = d + 1; // appended bias column
        // xtx [da x da], xty [da x c]
        let mut xtx = vec![0.0; da * da];
        let mut xty = vec![0.0; da * c];
        for i in 0..n {
            let row: Vec<f64> =
                x[i * d..(i + 1) * d].iter().copied().chain(std::iter::once(1.0)).collect();
            for p in 0..da {
                for q in 0..da {
                    xtx[p * da + q] += row[p] * row[q];
                }
                xty[p * c + labels[i]] += row[p];
            }
        }
        for p in 0..da {
            xtx[p * da + p] += 1e-8; // ridge for numerical safety
        }
        // Gaussian elimination solving xtx * w = xty
        let mut a = xtx;
        let mut b = xty;
        for col in 0..da {
            let mut piv = col;
            for r in col + 1..da {
                if a[r * da + col].abs() > a[piv * da + col].abs() {
                    piv = r;
                }
            }
            for q in 0..da {
                a.swap(col * da + q, piv * da + q);
            }
            for q in 0..c {
                b.swap(col * c + q, piv * c + q);
            }
            let diag = a[col * da + col];
            for r in 0..da {
                if r != col && a[r * da + col] != 0.0 {
                    let f = a[r * da + col] / diag;
                    for q in 0..da {
                        a[r * da + q] -= f * a[col * da + q];
                    }
                    for q in 0..c {
                        b[r * c + q] -= f * b[col * c + q];
                    }
                }
            }
        }
        let mut w = vec![0.0; da * c];
        for p in 0..da {
            for q in 0..c {
                w[p * c + q] = b[p * c + q] / a[p * da + p];
            }
        }
        let mut correct = 0;
        for i in 0..n {
            let mut best = (0, f64::NEG_INFINITY);
            for q in 0..c {
                let mut s = w[d * c + q];
                for p in 0..d {
                    s += x[i * d + p] * w[p * c + q];
                }
                if s > best.1 {
                    best = (q, s);
                }
            }
            if best.0 == labels[i] {
                correct += 1;
            }
        }
        correct as f64 / n as f64
    }

    #[test]
    fn full_correlation_no_noise_is_linearly_separable_per_modality() {
        let mut spec = small_spec();
        spec.correlation = 1.0;
        spec.noise_scale = 0.0;
        let ds = generate_synthetic(&spec).unwrap();
        for m in 0..2 {
            let d = ds.modalities[m].block_len();
            let acc = linear_probe_accuracy(&ds.features[m], d, &ds.labels, ds.num_classes);
            assert_eq!(acc, 1.0, "modality {m} probe accuracy {acc}");
        }
    }

    #[test]
    fn zero_correlation_gives_classwise_independent_modalities() {
        let mut spec = small_spec();
        spec.correlation = 0.0;
        spec.num_samples = 2000;
        spec.noise_scale = 0.5;
        let ds = generate_synthetic(&spec).unwrap();
        // Within-class Pearson between matched feature coordinates.
        let d = ds.modalities[0].block_len().min(ds.modalities[1].block_len());
        let mut worst: f64 = 0.0;
        for class in 0..ds.num_classes {
            let idx: Vec<usize> =
                (0..ds.num_samples()).filter(|&i| ds.labels[i] == class).collect();
            for coord in 0..4.min(d) {
                let xs: Vec<f64> = idx
                    .iter()
                    .map(|&i| ds.features[0][i * ds.modalities[0].block_len() + coord])
                    .collect();
                let ys: Vec<f64> = idx
                    .iter()
                    .map(|&i| ds.features[1][i * ds.modalities[1].block_len() + coord])
                    .collect();
                let n = xs.len() as f64;
                let (mx, my) = (
                    xs.iter().sum::<f64>() / n,
                    ys.iter().sum::<f64>() / n,
                );
                let mut cov = 0.0;
                let mut vx = 0.0;
                let mut vy = 0.0;
                for (x, y) in xs.iter().zip(&ys) {
                    cov += (x - mx) * (y - my);
                    vx += (x - mx) * (x - mx);
                    vy += (y - my) * (y - my);
                }
                let r = cov / (vx.sqrt() * vy.sqrt());
                worst = worst.max(r.abs());
            }
        }
        assert!(worst < 0.1, "worst within-class cross-modality |r| = {worst}");
    }

    #[test]
    fn protocol_counts_match_exact_partition() {
        let spec = SyntheticSpec { num_samples: 1000, ..small_spec() };
        let ds = generate_synthetic(&spec).unwrap();
        let out =
            apply_missing_protocol(&ds, 0.7, MissingMode::Both, SubsetSplit::Uniform, 1).unwrap();
        let counts = out.pattern_counts();
        // bits: 0b10 = missing modality 0, 0b01 = missing modality 1, 0b11 complete
        assert_eq!(counts.get(&0b10), Some(&350));
        assert_eq!(counts.get(&0b01), Some(&350));
        assert_eq!(counts.get(&0b11), Some(&300));
    }

    #[test]
    fn protocol_eta_zero_keeps_everything_complete() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let out =
            apply_missing_protocol(&ds, 0.0, MissingMode::Both, SubsetSplit::Uniform, 1).unwrap();
        assert!(out.patterns.iter().all(|p| p.is_complete()));
    }

    #[test]
    fn protocol_single_modality_counts() {
        let spec = SyntheticSpec { num_samples: 700, ..small_spec() };
        let ds = generate_synthetic(&spec).unwrap();
        let out =
            apply_missing_protocol(&ds, 0.9, MissingMode::OnlyModality(1), SubsetSplit::Uniform, 3)
                .unwrap();
        let missing = out.patterns.iter().filter(|p| !p.is_present(1)).count();
        let complete = out.patterns.iter().filter(|p| p.is_complete()).count();
        assert_eq!(missing, 630);
        assert_eq!(complete, 70);
    }

    #[test]
    fn protocol_is_seed_deterministic_and_never_empties_a_sample() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let a = apply_missing_protocol(&ds, 0.8, MissingMode::Both, SubsetSplit::Uniform, 9)
            .unwrap();
        let b = apply_missing_protocol(&ds, 0.8, MissingMode::Both, SubsetSplit::Uniform, 9)
            .unwrap();
        assert_eq!(a.patterns, b.patterns);
        assert!(a.patterns.iter().all(|p| p.num_present() >= 1));
    }

    #[test]
    fn protocol_three_modalities_uniform_and_formula() {
        let mut spec = small_spec();
        spec.modalities.push(ModalityInfo { name: "c".into(), tokens: 2, dim: 8 });
        spec.num_samples = 1200;
        let ds = generate_synthetic(&spec).unwrap();

        let uni =
            apply_missing_protocol(&ds, 0.6, MissingMode::Both, SubsetSplit::Uniform, 5).unwrap();
        let incomplete = uni.patterns.iter().filter(|p| !p.is_complete()).count();
        assert_eq!(incomplete, 720); // round(1200 * 0.6), split 120 per subset
        let counts = uni.pattern_counts();
        assert_eq!(counts.iter().filter(|(&bits, _)| bits != 0b111).count(), 6);
        for (&bits, &c) in counts.iter() {
            if bits != 0b111 {
                assert_eq!(c, 120);
            }
        }

        let formula =
            apply_missing_protocol(&ds, 0.6, MissingMode::Both, SubsetSplit::MsquaredFormula, 5)
                .unwrap();
        // round(1200 * 0.6 / 7) = 103 per subset
        for (&bits, &c) in formula.pattern_counts().iter() {
            if bits != 0b111 {
                assert_eq!(c, 103);
            }
        }
    }

    #[test]
    fn protocol_rejects_bad_eta() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        assert!(matches!(
            apply_missing_protocol(&ds, 1.5, MissingMode::Both, SubsetSplit::Uniform, 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn split_is_stratified_disjoint_and_deterministic() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let (tr, te) = split_train_test(&ds, 0.75, 7).unwrap();
        assert_eq!(tr.num_samples() + te.num_samples(), ds.num_samples());
        for class in 0..ds.num_classes {
            let total = ds.labels.iter().filter(|&&l| l == class).count();
            let in_train = tr.labels.iter().filter(|&&l| l == class).count();
            assert_eq!(in_train, (total as f64 * 0.75).round() as usize);
        }
        let (tr2, _) = split_train_test(&ds, 0.75, 7).unwrap();
        assert_eq!(tr.labels, tr2.labels);
        assert_eq!(tr.features[0], tr2.features[0]);
    }

    #[test]
    fn roundtrip_and_composition_invariance() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let loaded = load_dataset(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded.features, ds.features);
        assert_eq!(loaded.labels, ds.labels);

        let (a_tr, a_te) = split_train_test(&ds, 0.8, 11).unwrap();
        let (b_tr, b_te) = split_train_test(&loaded, 0.8, 11).unwrap();
        assert_eq!(a_tr.labels, b_tr.labels);
        assert_eq!(a_te.labels, b_te.labels);
        assert_eq!(a_tr.features, b_tr.features);
    }

    #[test]
    fn loader_rejects_corruption_distinctly() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let manifest = dir.path().join("manifest.json");

        // missing file
        assert!(matches!(
            load_dataset(&dir.path().join("nope.json")),
            Err(Error::Format(msg)) if msg.contains("not found")
        ));

        // bad magic
        let bin = dir.path().join("a.bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[0] = b'X';
        std::fs::write(&bin, &bytes).unwrap();
        assert!(matches!(
            load_dataset(&manifest),
            Err(Error::Format(msg)) if msg.contains("magic")
        ));
        bytes[0] = b'M';
        std::fs::write(&bin, &bytes).unwrap();

        // header count mismatch
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[8..12].copy_from_slice(&999u32.to_le_bytes());
        std::fs::write(&bin, &bytes).unwrap();
        assert!(matches!(
            load_dataset(&manifest),
            Err(Error::Format(msg)) if msg.contains("sample count")
        ));
        write_dataset(dir.path(), &ds).unwrap();

        // label out of range
        std::fs::write(
            dir.path().join("labels.txt"),
            "99\n".repeat(ds.num_samples()),
        )
        .unwrap();
        assert!(matches!(load_dataset(&manifest), Err(Error::Index(_))));
    }
}
