//! Datasets, synthetic correlated attributes, and label perturbations.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::decoder::{VisualInput, VisualSource};
use crate::encoders::{load_feature_blob, pad_to_square, write_feature_blob, RawImage};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;
use crate::vocab::{check_labels, AttributeVocabulary};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Image(PathBuf),
    Features(PathBuf),
}

/// One line of a dataset JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub source: Source,
    pub labels: Vec<u8>,
}

/// A sample with its visual input loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub visual: VisualInput,
    pub labels: Vec<u8>,
}

/// Anything carrying an id and a multi-hot label vector.
pub trait Labeled {
    fn id(&self) -> &str;
    fn labels(&self) -> &[u8];
    fn labels_mut(&mut self) -> &mut Vec<u8>;
}

impl Labeled for SampleRecord {
    fn id(&self) -> &str {
        &self.id
    }
    fn labels(&self) -> &[u8] {
        &self.labels
    }
    fn labels_mut(&mut self) -> &mut Vec<u8> {
        &mut self.labels
    }
}

impl Labeled for Example {
    fn id(&self) -> &str {
        &self.id
    }
    fn labels(&self) -> &[u8] {
        &self.labels
    }
    fn labels_mut(&mut self) -> &mut Vec<u8> {
        &mut self.labels
    }
}

pub fn load_jsonl(path: &Path, vocab: &AttributeVocabulary) -> Result<Vec<SampleRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let data_err = |message: String| Error::Data {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| data_err(e.to_string()))?;
        check_labels(&rec.labels, vocab.len()).map_err(|e| data_err(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_jsonl(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Loads every record's visual input. Relative paths resolve against `base`.
pub fn load_examples(records: &[SampleRecord], base: &Path, visual: &VisualSource) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            let input = match (&r.source, visual) {
                (Source::Features(p), VisualSource::Features { width }) => {
                    VisualInput::Features(load_feature_blob(&resolve(p), Some(*width))?)
                }
                (Source::Image(p), VisualSource::Image(cfg)) => {
                    let img = RawImage::load(&resolve(p))?;
                    VisualInput::Image(pad_to_square(&img, cfg.image_side)?)
                }
                _ => {
                    return Err(Error::Config(format!(
                        "sample {} has a source kind the model cannot read",
                        r.id
                    )))
                }
            };
            Ok(Example {
                id: r.id.clone(),
                visual: input,
                labels: r.labels.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Implication {
    pub antecedent: usize,
    pub consequent: usize,
    pub strength: f64,
}

/// How labels are turned into feature blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub rows: usize,
    pub cols: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            rows: 8,
            cols: 32,
            noise: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRuleSpec {
    pub marginals: Vec<f64>,
    #[serde(default)]
    pub implications: Vec<Implication>,
    /// `(a, b)`: when both are set, `b` is cleared.
    #[serde(default)]
    pub exclusions: Vec<(usize, usize)>,
    pub seed: u64,
    #[serde(default)]
    pub render: RenderConfig,
}

impl SyntheticRuleSpec {
    pub fn num_attributes(&self) -> usize {
        self.marginals.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_attributes();
        if m == 0 {
            return Err(Error::Config("synthetic spec has no attributes".into()));
        }
        if let Some(p) = self.marginals.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("marginal {p} outside [0, 1]")));
        }
        for r in &self.implications {
            if r.antecedent >= m || r.consequent >= m || r.antecedent == r.consequent {
                return Err(Error::Config(format!(
                    "implication {} -> {} is out of range or reflexive",
                    r.antecedent, r.consequent
                )));
            }
            if !(0.0..=1.0).contains(&r.strength) {
                return Err(Error::Config(format!("implication strength {} outside [0, 1]", r.strength)));
            }
        }
        for &(a, b) in &self.exclusions {
            if a >= m || b >= m || a == b {
                return Err(Error::Config(format!("exclusion ({a}, {b}) is out of range or reflexive")));
            }
            if self
                .implications
                .iter()
                .any(|r| (r.antecedent, r.consequent) == (a, b) || (r.antecedent, r.consequent) == (b, a))
            {
                return Err(Error::Config(format!(
                    "attributes {a} and {b} are both implied and excluded"
                )));
            }
        }
        if self.render.rows == 0 || self.render.cols == 0 || !(self.render.noise >= 0.0) {
            return Err(Error::Config("render needs positive shape and non-negative noise".into()));
        }
        Ok(())
    }

    /// Labels of sample `index`: independent draws, then implications in
    /// order, then exclusions in order.
    pub fn draw_labels(&self, index: usize) -> Vec<u8> {
        let mut rng = rng_for(self.seed, &format!("synth/labels/{index}"));
        let mut y: Vec<u8> = self.marginals.iter().map(|&p| rng.gen_bool(p) as u8).collect();
        for r in &self.implications {
            if y[r.antecedent] == 1 && rng.gen_bool(r.strength) {
                y[r.consequent] = 1;
            }
        }
        for &(a, b) in &self.exclusions {
            if y[a] == 1 {
                y[b] = 0;
            }
        }
        y
    }

    /// The fixed `rows` projections, each `cols × M`.
    pub fn projection(&self) -> Vec<Tensor> {
        let m = self.num_attributes();
        let mut rng = rng_for(self.seed, "synth/projection");
        let scale = 1.0 / (m as f64).sqrt();
        (0..self.render.rows)
            .map(|_| {
                let data = (0..self.render.cols * m)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                    .collect();
                Tensor::new(vec![self.render.cols, m], data).expect("nonzero shape")
            })
            .collect()
    }

    /// Row `r` is `P_r · (2y - 1)` plus noise seeded by `index`.
    pub fn render(&self, labels: &[u8], projection: &[Tensor], index: usize) -> Result<Tensor> {
        check_labels(labels, self.num_attributes())?;
        let signed: Vec<f64> = labels.iter().map(|&b| 2.0 * b as f64 - 1.0).collect();
        let mut rng = rng_for(self.seed, &format!("synth/noise/{index}"));
        let (rows, cols) = (self.render.rows, self.render.cols);
        let mut data = Vec::with_capacity(rows * cols);
        for p in projection {
            for c in 0..cols {
                let clean: f64 = p.row(c).iter().zip(&signed).map(|(a, b)| a * b).sum();
                let eps: f64 = rng.sample(StandardNormal);
                data.push(clean + self.render.noise * eps);
            }
        }
        Tensor::new(vec![rows, cols], data)
    }
}

/// `n` seeded samples with feature tokens. Sample `i` is named `{prefix}{i}`
/// and uses draw index `offset + i`, so disjoint offsets give independent
/// draws from the same rules.
pub fn synth_generate(spec: &SyntheticRuleSpec, n: usize, offset: usize, prefix: &str) -> Result<Vec<Example>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Invalid("synthetic dataset needs n >= 1".into()));
    }
    let proj = spec.projection();
    (offset..offset + n)
        .map(|i| {
            let labels = spec.draw_labels(i);
            let feats = spec.render(&labels, &proj, i)?;
            Ok(Example {
                id: format!("{prefix}{}", i - offset),
                visual: VisualInput::Features(feats),
                labels,
            })
        })
        .collect()
}

/// Writes feature blobs into `dir/blobs/` and returns records pointing at
/// them relative to `dir`.
pub fn write_examples(dir: &Path, examples: &[Example]) -> Result<Vec<SampleRecord>> {
    let blobs = dir.join("blobs");
    std::fs::create_dir_all(&blobs).map_err(|e| Error::io(&blobs, e))?;
    examples
        .iter()
        .map(|ex| {
            let VisualInput::Features(t) = &ex.visual else {
                return Err(Error::Invalid(format!("sample {} has no feature tokens", ex.id)));
            };
            let rel = PathBuf::from("blobs").join(format!("{}.sqfb", ex.id));
            write_feature_blob(&dir.join(&rel), t)?;
            Ok(SampleRecord {
                id: ex.id.clone(),
                source: Source::Features(rel),
                labels: ex.labels.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    #[serde(default)]
    pub noise_flip_prob: f64,
    /// `(attribute, fraction of its positives to drop)`.
    #[serde(default)]
    pub longtail: Vec<(usize, f64)>,
    pub seed: u64,
}

impl PerturbationConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise_flip_prob) {
            return Err(Error::Config(format!("flip probability {} outside [0, 1]", self.noise_flip_prob)));
        }
        for &(a, f) in &self.longtail {
            if a >= m {
                return Err(Error::Config(format!("tail attribute {a} out of range for {m} attributes")));
            }
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("drop fraction {f} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Flips every label bit independently with `flip_prob`. Returns the new
/// dataset and the number of flipped bits.
pub fn inject_label_noise<T: Labeled + Clone>(data: &[T], flip_prob: f64, seed: u64) -> Result<(Vec<T>, usize)> {
    if !(0.0..=1.0).contains(&flip_prob) {
        return Err(Error::Invalid(format!("flip probability {flip_prob} outside [0, 1]")));
    }
    let mut flips = 0;
    let out = data
        .iter()
        .map(|rec| {
            let mut rec = rec.clone();
            let mut rng = rng_for(seed, &format!("noise/{}", rec.id()));
            for b in rec.labels_mut() {
                if rng.gen_bool(flip_prob) {
                    *b ^= 1;
                    flips += 1;
                }
            }
            rec
        })
        .collect();
    Ok((out, flips))
}

/// Drops `⌊fraction × positives⌋` seeded positives of each listed attribute.
pub fn longtail_subsample<T: Labeled + Clone>(data: &[T], tails: &[(usize, f64)], seed: u64) -> Result<Vec<T>> {
    let mut out = data.to_vec();
    for &(attr, fraction) in tails {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Invalid(format!("drop fraction {fraction} outside [0, 1]")));
        }
        let positives: Vec<usize> = out
            .iter()
            .enumerate()
            .filter(|(_, r)| r.labels().get(attr) == Some(&1))
            .map(|(i, _)| i)
            .collect();
        if positives.is_empty() {
            log::warn!("tail attribute {attr} has no positives; nothing dropped");
            continue;
        }
        let k = (fraction * positives.len() as f64).floor() as usize;
        let mut rng = rng_for(seed, &format!("longtail/{attr}"));
        for pick in sample(&mut rng, positives.len(), k) {
            out[positives[pick]].labels_mut()[attr] = 0;
        }
    }
    Ok(out)
}

pub fn positive_counts<T: Labeled>(data: &[T], m: usize) -> Vec<usize> {
    let mut counts = vec![0; m];
    for r in data {
        for (c, &b) in counts.iter_mut().zip(r.labels()) {
            *c += b as usize;
        }
    }
    counts
}

/// Mean over attributes of `max_k count_k / count_j`. Attributes without
/// positives are left out.
pub fn mean_ir_from_counts(counts: &[usize]) -> Result<f64> {
    let max = counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(Error::Invalid("mean IR needs at least one positive label".into()));
    }
    let included: Vec<f64> = counts
        .iter()
        .enumerate()
        .filter_map(|(j, &c)| {
            if c == 0 {
                log::warn!("attribute {j} has no positives; left out of mean IR");
                None
            } else {
                Some(max as f64 / c as f64)
            }
        })
        .collect();
    Ok(included.iter().sum::<f64>() / included.len() as f64)
}

pub fn mean_ir<T: Labeled>(data: &[T], m: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Invalid("mean IR of an empty dataset".into()));
    }
    mean_ir_from_counts(&positive_counts(data, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, labels: Vec<u8>) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            source: Source::Features(PathBuf::from(format!("{id}.sqfb"))),
            labels,
        }
    }

    fn vocab3() -> AttributeVocabulary {
        AttributeVocabulary::new(vec!["a".into(), "b".into(), "c".into()]).unwrap()
    }

    fn spec(marginals: Vec<f64>) -> SyntheticRuleSpec {
        SyntheticRuleSpec {
            marginals,
            implications: vec![],
            exclusions: vec![],
            seed: 3,
            render: RenderConfig::default(),
        }
    }

    #[test]
    fn jsonl_round_trip_and_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_jsonl(&path, &vocab3()).unwrap().is_empty());
        let recs = vec![
            rec("x", vec![1, 0, 1]),
            SampleRecord {
                id: "y".into(),
                source: Source::Image("img/y.png".into()),
                labels: vec![0, 0, 0],
            },
        ];
        save_jsonl(&path, &recs).unwrap();
        assert_eq!(load_jsonl(&path, &vocab3()).unwrap(), recs);
    }

    #[test]
    fn jsonl_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let good = r#"{"id":"a","source":{"features":"a.sqfb"},"labels":[1,0,0]}"#;
        std::fs::write(&path, format!("{good}\n{{oops\n")).unwrap();
        assert!(matches!(load_jsonl(&path, &vocab3()), Err(Error::Data { line: 2, .. })));
        let short = r#"{"id":"a","source":{"features":"a.sqfb"},"labels":[1,0]}"#;
        std::fs::write(&path, format!("{good}\n\n{short}\n")).unwrap();
        assert!(matches!(load_jsonl(&path, &vocab3()), Err(Error::Data { line: 3, .. })));
    }

    #[test]
    fn forced_implication_always_holds() {
        let mut s = spec(vec![0.5, 0.1, 0.3]);
        s.implications.push(Implication {
            antecedent: 0,
            consequent: 1,
            strength: 1.0,
        });
        for i in 0..500 {
            let y = s.draw_labels(i);
            assert!(y[0] == 0 || y[1] == 1);
        }
    }

    #[test]
    fn zero_marginal_never_positive() {
        let s = spec(vec![0.0, 0.7]);
        assert!((0..1000).all(|i| s.draw_labels(i)[0] == 0));
    }

    #[test]
    fn marginal_concentrates() {
        let s = spec(vec![0.3]);
        let n = 10_000;
        let pos: usize = (0..n).map(|i| s.draw_labels(i)[0] as usize).sum();
        let rate = pos as f64 / n as f64;
        assert!((rate - 0.3).abs() <= 0.02, "{rate}");
    }

    #[test]
    fn exclusion_clears_second_member() {
        let mut s = spec(vec![1.0, 1.0]);
        s.exclusions.push((0, 1));
        assert_eq!(s.draw_labels(0), vec![1, 0]);
    }

    #[test]
    fn contradictory_rules_rejected() {
        let mut s = spec(vec![0.5, 0.5]);
        s.implications.push(Implication {
            antecedent: 0,
            consequent: 1,
            strength: 0.5,
        });
        s.exclusions.push((0, 1));
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        assert!(spec(vec![1.5]).validate().is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(vec![0.4, 0.6, 0.2]);
        assert_eq!(synth_generate(&s, 5, 0, "s").unwrap(), synth_generate(&s, 5, 0, "s").unwrap());
        assert_ne!(synth_generate(&s, 5, 0, "s").unwrap(), synth_generate(&s, 5, 5, "s").unwrap());
    }

    #[test]
    fn noise_extremes() {
        let data = vec![rec("a", vec![1, 0, 1]), rec("b", vec![0, 0, 0])];
        let (same, flips) = inject_label_noise(&data, 0.0, 1).unwrap();
        assert_eq!((same, flips), (data.clone(), 0));
        let (comp, flips) = inject_label_noise(&data, 1.0, 1).unwrap();
        assert_eq!(flips, 6);
        assert_eq!(comp[0].labels, vec![0, 1, 0]);
        assert_eq!(comp[1].labels, vec![1, 1, 1]);
        assert_eq!(data[0].labels, vec![1, 0, 1]);
    }

    #[test]
    fn longtail_floor_rule() {
        let data: Vec<_> = (0..12).map(|i| rec(&i.to_string(), vec![(i < 10) as u8])).collect();
        let half = longtail_subsample(&data, &[(0, 0.5)], 4).unwrap();
        assert_eq!(positive_counts(&half, 1), vec![5]);
        let third = longtail_subsample(&data, &[(0, 0.33)], 4).unwrap();
        assert_eq!(positive_counts(&third, 1), vec![7]);
        assert_eq!(longtail_subsample(&data, &[(0, 0.0)], 4).unwrap(), data);
        assert_eq!(positive_counts(&longtail_subsample(&data, &[(0, 1.0)], 4).unwrap(), 1), vec![0]);
        assert_eq!(half.len(), data.len());
    }

    #[test]
    fn longtail_on_empty_attribute_is_noop() {
        let data = vec![rec("a", vec![0, 1])];
        assert_eq!(longtail_subsample(&data, &[(0, 0.5)], 1).unwrap(), data);
    }

    #[test]
    fn mean_ir_examples() {
        assert_eq!(mean_ir_from_counts(&[4, 4, 4]).unwrap(), 1.0);
        assert_eq!(mean_ir_from_counts(&[10, 5, 2]).unwrap(), 8.0 / 3.0);
        assert_eq!(mean_ir_from_counts(&[6, 0, 3]).unwrap(), 1.5);
        assert!(mean_ir_from_counts(&[0, 0]).is_err());
        assert!(mean_ir::<SampleRecord>(&[], 2).is_err());
    }

    #[test]
    fn mean_ir_invariances() {
        let data = vec![rec("a", vec![1, 1, 0]), rec("b", vec![1, 0, 1]), rec("c", vec![1, 0, 0])];
        let base = mean_ir(&data, 3).unwrap();
        let mut rev = data.clone();
        rev.reverse();
        assert_eq!(mean_ir(&rev, 3).unwrap(), base);
        let doubled: Vec<_> = data.iter().chain(&data).cloned().collect();
        assert_eq!(mean_ir(&doubled, 3).unwrap(), base);
    }
}
