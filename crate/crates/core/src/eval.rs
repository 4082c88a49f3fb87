//! Evaluation: the frozen-encoder linear probe, per-region feature
//! agreement, and the ablation report.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{embed_tokens, encode, pos_embed, ModelParams, TokenInputs};
use crate::scene::{n_object_types, SceneBundle};
use crate::stage1::{forward_3d, WeightTable};
use crate::tensor::{Tape, Tensor};
use crate::tokenize::{majority_label, purity, TokenizerConfig};
use crate::train::Stage1Scene;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderTag {
    Scratch,
    Stage1,
    Stage2,
}

impl fmt::Display for EncoderTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderTag::Scratch => "scratch",
            EncoderTag::Stage1 => "stage1",
            EncoderTag::Stage2 => "stage2",
        })
    }
}

impl std::str::FromStr for EncoderTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(EncoderTag::Scratch),
            "stage1" => Ok(EncoderTag::Stage1),
            "stage2" => Ok(EncoderTag::Stage2),
            other => Err(Error::InvalidInput(format!("unknown encoder tag `{other}`"))),
        }
    }
}

/// Frozen encoder outputs for every token, `[M, L]`.
pub fn token_features(params: &ModelParams, inputs: &TokenInputs) -> Result<Tensor> {
    let tape = Tape::new();
    let p = params.bind(&tape);
    let x = tape.add(embed_tokens(&p, inputs)?, pos_embed(&p, &inputs.centroids)?)?;
    let h = encode(&p, x)?;
    let out = tape.value(h).clone();
    Ok(out)
}

/// A probe example: a feature vector and its object-type label.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// Encodes every token of every scene; each token is labeled with the
/// object type of its majority ground-truth region.
pub fn probe_samples(params: &ModelParams, bundles: &[SceneBundle], tokenizer: &TokenizerConfig) -> Result<Vec<ProbeSample>> {
    let mut out = Vec::new();
    for b in bundles {
        let tokens = tokenizer.tokenize(b)?;
        let inputs = TokenInputs::new(&b.points_f64(), &tokens, params.arch.max_points_per_token)?;
        let feats = token_features(params, &inputs)?;
        for (row, tok) in tokens.tokens.iter().enumerate() {
            let Some(label) = b.region_type(majority_label(tok, &b.gt_region)) else {
                continue;
            };
            out.push(ProbeSample {
                features: feats.row_slice(row).to_vec(),
                label: label as usize,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.05,
            l2: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Held-out accuracy per class; `None` for classes absent from the test set.
    pub per_class: Vec<Option<f64>>,
    pub n_tokens: usize,
    pub encoder_tag: EncoderTag,
}

/// Multinomial logistic regression on standardized features, trained by
/// full-batch Adam from zero weights (so the fit is deterministic).
pub struct LinearClassifier {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[dim + 1, classes]`, last row is the bias.
    weights: Vec<f64>,
    classes: usize,
}

impl LinearClassifier {
    pub fn fit(train: &[ProbeSample], classes: usize, config: &ProbeConfig) -> Result<Self> {
        let dim = train.first().map_or(0, |s| s.features.len());
        if train.is_empty() || dim == 0 {
            return Err(Error::BadSplit("probe training split is empty".into()));
        }
        if train.iter().any(|s| s.features.len() != dim || s.label >= classes) {
            return Err(Error::DimensionMismatch("probe samples disagree on width or label range".into()));
        }
        let n = train.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in train {
            mean.iter_mut().zip(&s.features).for_each(|(m, x)| *m += x / n);
        }
        let mut var = vec![0.0; dim];
        for s in train {
            var.iter_mut().zip(s.features.iter().zip(&mean)).for_each(|(v, (x, m))| *v += (x - m).powi(2) / n);
        }
        let scale = var.iter().map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 }).collect();
        let mut clf = Self {
            mean,
            scale,
            weights: vec![0.0; (dim + 1) * classes],
            classes,
        };
        let xs: Vec<Vec<f64>> = train.iter().map(|s| clf.standardize(&s.features)).collect();
        let (mut m, mut v) = (vec![0.0; clf.weights.len()], vec![0.0; clf.weights.len()]);
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        for t in 1..=config.epochs {
            let mut grad = vec![0.0; clf.weights.len()];
            for (x, s) in xs.iter().zip(train) {
                let p = clf.probabilities(x);
                for c in 0..classes {
                    let d = (p[c] - f64::from(u8::from(c == s.label))) / n;
                    for (j, xj) in x.iter().chain(std::iter::once(&1.0)).enumerate() {
                        grad[j * classes + c] += d * xj;
                    }
                }
            }
            for (j, g) in grad.iter_mut().enumerate() {
                if j < dim * classes {
                    *g += config.l2 * clf.weights[j];
                }
            }
            let (c1, c2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
            for j in 0..grad.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * grad[j];
                v[j] = b2 * v[j] + (1.0 - b2) * grad[j] * grad[j];
                clf.weights[j] -= config.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
        Ok(clf)
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.mean.iter().zip(&self.scale)).map(|(x, (m, s))| (x - m) * s).collect()
    }

    fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let c = self.classes;
        let mut logits = self.weights[x.len() * c..].to_vec();
        for (j, xj) in x.iter().enumerate() {
            for k in 0..c {
                logits[k] += xj * self.weights[j * c + k];
            }
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        exp.iter().map(|e| e / z).collect()
    }

    /// Most probable class (ties to the lowest index).
    pub fn predict(&self, features: &[f64]) -> usize {
        let p = self.probabilities(&self.standardize(features));
        let mut best = 0;
        for (k, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = k;
            }
        }
        best
    }
}

/// Fits a probe on `train` and scores it on `test`. Every class seen in
/// `test` must also occur in `train`.
pub fn fit_and_score(train: &[ProbeSample], test: &[ProbeSample], tag: EncoderTag, config: &ProbeConfig) -> Result<ProbeResult> {
    let classes = n_object_types();
    let mut seen = vec![false; classes];
    for s in train {
        *seen.get_mut(s.label).ok_or_else(|| Error::BadSplit(format!("label {} out of range", s.label)))? = true;
    }
    if let Some(s) = test.iter().find(|s| !seen.get(s.label).copied().unwrap_or(false)) {
        return Err(Error::BadSplit(format!("class {} is absent from the probe-training split", s.label)));
    }
    if test.is_empty() {
        return Err(Error::BadSplit("probe test split is empty".into()));
    }
    let clf = LinearClassifier::fit(train, classes, config)?;
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for s in test {
        totals[s.label] += 1;
        if clf.predict(&s.features) == s.label {
            hits[s.label] += 1;
        }
    }
    Ok(ProbeResult {
        accuracy: hits.iter().sum::<usize>() as f64 / test.len() as f64,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        n_tokens: test.len(),
        encoder_tag: tag,
    })
}

/// Trains a linear probe on frozen token features of `train` scenes and
/// reports held-out accuracy on `test` scenes.
pub fn linear_probe(
    params: &ModelParams,
    train: &[SceneBundle],
    test: &[SceneBundle],
    tokenizer: &TokenizerConfig,
    tag: EncoderTag,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    let tr = probe_samples(params, train, tokenizer)?;
    let te = probe_samples(params, test, tokenizer)?;
    fit_and_score(&tr, &te, tag, config)
}

/// Cosine between `F_3D` and the pooled `F_2D` target for every region of
/// every scene, paired with the region's group.
pub fn region_cosines(params: &ModelParams, scenes: &[Stage1Scene]) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for s in scenes {
        let tape = Tape::new();
        let p = params.bind(&tape);
        let f3d = forward_3d(&p, &s.inputs)?;
        let f3d = tape.value(f3d);
        for (k, &row) in s.target_rows.iter().enumerate() {
            out.push((s.groups[k], crate::tensor::cosine(f3d.row_slice(row), s.target.row_slice(k))));
        }
    }
    Ok(out)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Mean cosine over regions in the smallest groups of `table`. If no region
/// falls in the smallest groups, the next-smallest count level is added,
/// and so on. Returns the groups used and the mean.
pub fn tail_cosine(table: &WeightTable, cosines: &[(usize, f64)]) -> Option<(Vec<usize>, f64)> {
    let mut levels: Vec<usize> = table.counts.clone();
    levels.sort_unstable();
    levels.dedup();
    let mut groups = Vec::new();
    for level in levels {
        groups.extend((0..table.k_groups).filter(|&g| table.counts[g] == level));
        let vals: Vec<f64> = cosines.iter().filter(|(g, _)| groups.contains(g)).map(|&(_, c)| c).collect();
        if !vals.is_empty() {
            groups.sort_unstable();
            return Some((groups, mean(&vals)));
        }
    }
    None
}

/// Mean token purity of `tokenizer` over `bundles`.
pub fn mean_purity(bundles: &[SceneBundle], tokenizer: &TokenizerConfig) -> Result<f64> {
    let vals = bundles
        .iter()
        .map(|b| purity(&tokenizer.tokenize(b)?, &b.gt_region))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&vals))
}

/// One cell of the ablation matrix.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub tokenizer: String,
    pub reweight: bool,
    pub stage2: bool,
}

/// Measured values of one cell; `None` marks a missing measurement.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CellValues {
    pub probe_accuracy: Option<f64>,
    pub purity: Option<f64>,
    pub tail_cosine: Option<f64>,
    pub final_l_distill: Option<f64>,
    pub final_l_final: Option<f64>,
}

pub const REPORT_HEADER: &str =
    "tokenizer,reweight,stage2,probe_accuracy,purity,tail_cosine,final_l_distill,final_l_final,status";

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

/// Report over the full `{sam, knn} x {reweight on, off} x {stage2 on, off}`
/// matrix. Cells without results are listed as missing.
pub fn report_ablation(cells: &BTreeMap<CellKey, CellValues>) -> (String, String) {
    let mut csv = format!("{REPORT_HEADER}\n");
    let mut summary = String::new();
    let mut missing = 0;
    for tokenizer in ["sam", "knn"] {
        for reweight in [true, false] {
            for stage2 in [false, true] {
                let key = CellKey {
                    tokenizer: tokenizer.to_string(),
                    reweight,
                    stage2,
                };
                let label = format!("{tokenizer:>3} reweight={:<3} stage2={:<3}", on_off(reweight), on_off(stage2));
                match cells.get(&key) {
                    Some(v) => {
                        csv.push_str(&format!(
                            "{tokenizer},{},{},{},{},{},{},{},ok\n",
                            on_off(reweight),
                            on_off(stage2),
                            cell(v.probe_accuracy),
                            cell(v.purity),
                            cell(v.tail_cosine),
                            cell(v.final_l_distill),
                            cell(v.final_l_final),
                        ));
                        let show = |x: Option<f64>| x.map_or_else(|| "   n/a".to_string(), |x| format!("{x:6.3}"));
                        summary.push_str(&format!(
                            "{label}  probe {}  purity {}  tail cos {}\n",
                            show(v.probe_accuracy),
                            show(v.purity),
                            show(v.tail_cosine)
                        ));
                    }
                    None => {
                        missing += 1;
                        csv.push_str(&format!("{tokenizer},{},{},,,,,,missing\n", on_off(reweight), on_off(stage2)));
                        summary.push_str(&format!("{label}  missing\n"));
                    }
                }
            }
        }
    }
    summary.push_str(&format!("{} of 8 cells present\n", 8 - missing));
    (csv, summary)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn onehot(label: usize) -> ProbeSample {
        let mut f = vec![0.0; n_object_types()];
        f[label] = 1.0;
        ProbeSample { features: f, label }
    }

    #[test]
    fn separable_features_are_classified_perfectly() {
        let train: Vec<ProbeSample> = (0..60).map(|i| onehot(i % 6)).collect();
        let test: Vec<ProbeSample> = (0..30).map(|i| onehot((i * 7) % 6)).collect();
        let r = fit_and_score(&train, &test, EncoderTag::Stage1, &ProbeConfig::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.per_class.iter().all(|c| *c == Some(1.0)));
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sample = |rng: &mut ChaCha8Rng| ProbeSample {
            features: (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
            label: rng.random_range(0..6),
        };
        let train: Vec<ProbeSample> = (0..600).map(|_| sample(&mut rng)).collect();
        let test: Vec<ProbeSample> = (0..1200).map(|_| sample(&mut rng)).collect();
        let r = fit_and_score(&train, &test, EncoderTag::Scratch, &ProbeConfig::default()).unwrap();
        let p: f64 = 1.0 / 6.0;
        let sigma = (p * (1.0 - p) / 1200.0).sqrt();
        assert!((r.accuracy - p).abs() < 3.0 * sigma, "{}", r.accuracy);
    }

    #[test]
    fn absent_training_class_is_a_bad_split() {
        let train: Vec<ProbeSample> = (0..10).map(|i| onehot(i % 2)).collect();
        let test = vec![onehot(3)];
        assert!(matches!(
            fit_and_score(&train, &test, EncoderTag::Scratch, &ProbeConfig::default()),
            Err(Error::BadSplit(_))
        ));
    }

    #[test]
    fn tail_cosine_widens_until_populated() {
        let (k, tau, w) = crate::stage1::group_weights(&[1, 1, 5, 9]).unwrap();
        let table = WeightTable {
            k_groups: 4,
            seed: 0,
            group_of_region: vec![],
            counts: vec![1, 1, 5, 9],
            k,
            tau,
            w,
            centroids: vec![],
        };
        let cos = [(2, 0.5), (2, 0.7), (3, 0.9)];
        assert_eq!(tail_cosine(&table, &cos), Some((vec![0, 1, 2], 0.6)));
        assert_eq!(tail_cosine(&table, &[(0, 0.2), (3, 1.0)]), Some((vec![0, 1], 0.2)));
        assert_eq!(tail_cosine(&table, &[]), None);
    }

    #[test]
    fn report_lists_all_cells_and_flags_missing() {
        let mut cells = BTreeMap::new();
        cells.insert(
            CellKey {
                tokenizer: "sam".into(),
                reweight: true,
                stage2: true,
            },
            CellValues {
                probe_accuracy: Some(0.8),
                purity: Some(1.0),
                ..CellValues::default()
            },
        );
        let (csv, summary) = report_ablation(&cells);
        assert_eq!(csv.lines().count(), 9);
        assert_eq!(csv.lines().filter(|l| l.ends_with(",missing")).count(), 7);
        assert!(csv.contains("sam,on,on,0.800000,1.000000,,,,ok"));
        assert!(summary.contains("1 of 8 cells present"));
    }
}
