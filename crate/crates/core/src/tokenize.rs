//! Point tokenizers: the FPS + KNN patch baseline and mask-guided tokens
//! (one token per mask region), plus the purity audit comparing them.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::SceneBundle;

pub const DEFAULT_MIN_POINTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    SamGuided,
    KnnBaseline,
}

impl fmt::Display for TokenMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenMode::SamGuided => "sam",
            TokenMode::KnnBaseline => "knn",
        })
    }
}

impl std::str::FromStr for TokenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sam" => Ok(TokenMode::SamGuided),
            "knn" => Ok(TokenMode::KnnBaseline),
            other => Err(Error::InvalidInput(format!("unknown tokenizer `{other}` (sam or knn)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub point_indices: Vec<usize>,
    /// Mean of the member coordinates.
    pub centroid: [f64; 3],
    /// Mask region of a mask-guided token; -1 for KNN tokens.
    pub region_id: i32,
    /// FPS seed point of a KNN token.
    pub center_index: Option<usize>,
}

impl Token {
    pub fn len(&self) -> usize {
        self.point_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_indices.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub tokens: Vec<Token>,
    pub mode: TokenMode,
    /// Points excluded from every token, ascending.
    pub dropped_points: Vec<usize>,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn centroids(&self) -> Vec<[f64; 3]> {
        self.tokens.iter().map(|t| t.centroid).collect()
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn mean_of(points: &[[f64; 3]], members: &[usize]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for &i in members {
        for k in 0..3 {
            c[k] += points[i][k];
        }
    }
    c.map(|v| v / members.len() as f64)
}

/// Index of the point closest to the cloud mean (ties to the lowest index).
pub fn closest_to_mean(points: &[[f64; 3]]) -> Option<usize> {
    if points.is_empty() {
        return None;
    }
    let all: Vec<usize> = (0..points.len()).collect();
    let m = mean_of(points, &all);
    let mut best = 0;
    for i in 1..points.len() {
        if dist2(&points[i], &m) < dist2(&points[best], &m) {
            best = i;
        }
    }
    Some(best)
}

/// Greedy farthest point sampling starting from `start_index`. Each pick
/// maximizes the distance to the nearest already-picked point; ties go to
/// the lowest index.
pub fn fps(points: &[[f64; 3]], n: usize, start_index: usize) -> Result<Vec<usize>> {
    if n > points.len() {
        return Err(Error::InvalidCount {
            requested: n,
            available: points.len(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidInput("fps: n must be at least 1".into()));
    }
    if start_index >= points.len() {
        return Err(Error::InvalidInput(format!("fps: start index {start_index} out of range")));
    }
    let mut picked = vec![false; points.len()];
    let mut nearest: Vec<f64> = points.iter().map(|p| dist2(p, &points[start_index])).collect();
    let mut out = Vec::with_capacity(n);
    out.push(start_index);
    picked[start_index] = true;
    while out.len() < n {
        let mut best: Option<usize> = None;
        for i in 0..points.len() {
            if picked[i] {
                continue;
            }
            if best.is_none_or(|b| nearest[i] > nearest[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("unpicked point remains");
        picked[b] = true;
        out.push(b);
        for i in 0..points.len() {
            let d = dist2(&points[i], &points[b]);
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
    }
    Ok(out)
}

/// The `k` points nearest to `center`, nearest first; ties by lowest index.
pub fn k_nearest(points: &[[f64; 3]], center: &[f64; 3], k: usize) -> Vec<usize> {
    let key = |i: usize| (dist2(&points[i], center), i);
    let cmp = |a: &usize, b: &usize| {
        let (da, ia) = key(*a);
        let (db, ib) = key(*b);
        da.partial_cmp(&db).unwrap_or(Ordering::Equal).then(ia.cmp(&ib))
    };
    let mut idx: Vec<usize> = (0..points.len()).collect();
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.truncate(k);
    idx.sort_by(cmp);
    idx
}

/// Baseline patches: `n` FPS centers (seeded at the point nearest the cloud
/// mean), each grouped with its `k` nearest neighbours. Neighbourhoods may
/// overlap; tokens are in FPS pick order.
pub fn knn_tokenize(points: &[[f64; 3]], n: usize, k: usize) -> Result<TokenSet> {
    if k > points.len() {
        return Err(Error::InvalidCount {
            requested: k,
            available: points.len(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidInput("knn_tokenize: k must be at least 1".into()));
    }
    let start = closest_to_mean(points).ok_or(Error::InvalidCount {
        requested: n,
        available: 0,
    })?;
    let centers = fps(points, n, start)?;
    let tokens = centers
        .into_iter()
        .map(|c| {
            let members = k_nearest(points, &points[c], k);
            Token {
                centroid: mean_of(points, &members),
                point_indices: members,
                region_id: -1,
                center_index: Some(c),
            }
        })
        .collect();
    Ok(TokenSet {
        tokens,
        mode: TokenMode::KnnBaseline,
        dropped_points: Vec::new(),
    })
}

/// One token per mask region holding at least `min_points` projected
/// points. Points behind the camera, outside the raster, on unmasked
/// pixels, or in undersized regions are dropped. Tokens are sorted by
/// region id.
pub fn sam_tokenize(bundle: &SceneBundle, min_points: usize) -> Result<TokenSet> {
    bundle.validate()?;
    let ids = bundle.point_mask_ids()?;
    let points = bundle.points_f64();
    let mut regions: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    let mut dropped = Vec::new();
    for (i, id) in ids.into_iter().enumerate() {
        match id {
            Some(r) if r >= 0 => regions.entry(r).or_default().push(i),
            _ => dropped.push(i),
        }
    }
    let mut tokens = Vec::new();
    for (region, members) in regions {
        if members.len() >= min_points.max(1) {
            tokens.push(Token {
                centroid: mean_of(&points, &members),
                point_indices: members,
                region_id: region,
                center_index: None,
            });
        } else {
            dropped.extend(members);
        }
    }
    if tokens.is_empty() {
        return Err(Error::EmptyTokenization);
    }
    dropped.sort_unstable();
    Ok(TokenSet {
        tokens,
        mode: TokenMode::SamGuided,
        dropped_points: dropped,
    })
}

/// Fraction of each token's members that carry its majority label.
pub fn token_purities(tokens: &TokenSet, gt_region: &[i32]) -> Vec<f64> {
    tokens
        .tokens
        .iter()
        .map(|t| {
            let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
            for &i in &t.point_indices {
                *counts.entry(gt_region[i]).or_default() += 1;
            }
            let top = counts.values().copied().max().unwrap_or(0);
            top as f64 / t.len().max(1) as f64
        })
        .collect()
}

/// Mean token purity.
pub fn purity(tokens: &TokenSet, gt_region: &[i32]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("purity of an empty token set".into()));
    }
    if tokens.tokens.iter().flat_map(|t| &t.point_indices).any(|&i| i >= gt_region.len()) {
        return Err(Error::InvalidInput("token references a point without a label".into()));
    }
    let p = token_purities(tokens, gt_region);
    Ok(p.iter().sum::<f64>() / p.len() as f64)
}

/// Majority ground-truth label of a token (ties to the lowest label).
pub fn majority_label(token: &Token, gt_region: &[i32]) -> i32 {
    let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
    for &i in &token.point_indices {
        *counts.entry(gt_region[i]).or_default() += 1;
    }
    let mut best = (-1, 0);
    for (label, c) in counts {
        if c > best.1 {
            best = (label, c);
        }
    }
    best.0
}

/// Tokenizer choice plus its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub mode: TokenMode,
    pub min_points: usize,
    pub knn_n: usize,
    pub knn_k: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            mode: TokenMode::SamGuided,
            min_points: DEFAULT_MIN_POINTS,
            knn_n: 16,
            knn_k: 32,
        }
    }
}

impl TokenizerConfig {
    pub fn with_mode(mode: TokenMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    /// Tokenizes a bundle. KNN counts are clamped to the cloud size.
    pub fn tokenize(&self, bundle: &SceneBundle) -> Result<TokenSet> {
        match self.mode {
            TokenMode::SamGuided => sam_tokenize(bundle, self.min_points),
            TokenMode::KnnBaseline => {
                let n = bundle.n_points();
                knn_tokenize(&bundle.points_f64(), self.knn_n.min(n), self.knn_k.min(n))
            }
        }
    }
}

/// One line of the tokenization audit report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub scene_id: usize,
    pub mode: TokenMode,
    pub n_tokens: usize,
    pub purity: f64,
    pub dropped: usize,
}

pub fn audit_scene(scene_id: usize, bundle: &SceneBundle, config: &TokenizerConfig) -> Result<AuditRow> {
    let tokens = config.tokenize(bundle)?;
    Ok(AuditRow {
        scene_id,
        mode: config.mode,
        n_tokens: tokens.len(),
        purity: purity(&tokens, &bundle.gt_region)?,
        dropped: tokens.dropped_points.len(),
    })
}

/// CSV with header `scene_id,mode,n_tokens,purity,dropped`.
pub fn audit_csv(rows: &[AuditRow]) -> String {
    let mut out = String::from("scene_id,mode,n_tokens,purity,dropped\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.scene_id, r.mode, r.n_tokens, r.purity, r.dropped
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, Layout, SceneSpec};
    use proptest::prelude::*;

    #[test]
    fn fps_picks_farthest() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.1, 0.0, 0.0]];
        assert_eq!(fps(&pts, 2, 0).unwrap(), vec![0, 1]);
        assert_eq!(fps(&pts, 1, 2).unwrap(), vec![2]);
        let mut all = fps(&pts, 3, 0).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(matches!(fps(&pts, 4, 0), Err(Error::InvalidCount { .. })));
    }

    #[test]
    fn fps_exhausts_duplicates() {
        let pts = [[1.0, 1.0, 1.0]; 4];
        let mut all = fps(&pts, 4, 2).unwrap();
        assert_eq!(all[0], 2);
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn knn_groups_nearest() {
        let pts = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [5.0, 0.0, 0.0]];
        assert_eq!(k_nearest(&pts, &pts[0], 2), vec![0, 1]);
        let t = knn_tokenize(&pts, 1, 2).unwrap();
        assert_eq!(t.len(), 1);
        let mut m = t.tokens[0].point_indices.clone();
        m.sort_unstable();
        assert_eq!(m, vec![0, 1]);
    }

    #[test]
    fn knn_with_k1_is_the_center() {
        let pts: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, (i * i) as f64 * 0.1, 0.0]).collect();
        let t = knn_tokenize(&pts, 4, 1).unwrap();
        for tok in &t.tokens {
            assert_eq!(tok.point_indices, vec![tok.center_index.unwrap()]);
        }
    }

    #[test]
    fn knn_separated_clusters_are_pure() {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (c, off) in [0.0, 10.0].iter().enumerate() {
            for i in 0..5 {
                pts.push([off + 0.1 * i as f64, 0.05 * i as f64, 0.0]);
                labels.push(c as i32);
            }
        }
        let t = knn_tokenize(&pts, 2, 5).unwrap();
        assert_eq!(purity(&t, &labels).unwrap(), 1.0);
    }

    #[test]
    fn purity_of_mixed_token() {
        let t = TokenSet {
            tokens: vec![Token {
                point_indices: vec![0, 1, 2],
                centroid: [0.0; 3],
                region_id: -1,
                center_index: None,
            }],
            mode: TokenMode::KnnBaseline,
            dropped_points: vec![],
        };
        assert!((purity(&t, &[4, 4, 7]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn sam_tokens_are_pure() {
        let b = generate_scene(&SceneSpec::default()).unwrap();
        let t = sam_tokenize(&b, DEFAULT_MIN_POINTS).unwrap();
        assert_eq!(purity(&t, &b.gt_region).unwrap(), 1.0);
    }

    #[test]
    fn small_region_is_dropped() {
        let spec = SceneSpec {
            n_objects: 2,
            points_per_object_range: (3, 64),
            imbalance_exponent: 8.0,
            seed: 4,
            ..SceneSpec::default()
        };
        let b = generate_scene(&spec).unwrap();
        let small: Vec<usize> = (0..b.n_points()).filter(|&i| b.gt_region[i] == 1).collect();
        assert_eq!(small.len(), 3);
        let t = sam_tokenize(&b, 8).unwrap();
        assert_eq!(t.len(), 1);
        assert!(t.tokens.iter().all(|tok| tok.region_id != 1));
        for i in small {
            assert!(t.dropped_points.contains(&i));
        }
    }

    #[test]
    fn token_counts_match_projected_points() {
        let spec = SceneSpec {
            n_objects: 3,
            seed: 9,
            ..SceneSpec::default()
        };
        let b = generate_scene(&spec).unwrap();
        let t = sam_tokenize(&b, 1).unwrap();
        assert_eq!(t.len(), 3);
        let masked = b
            .point_mask_ids()
            .unwrap()
            .into_iter()
            .filter(|id| matches!(id, Some(r) if *r >= 0))
            .count();
        assert_eq!(t.tokens.iter().map(Token::len).sum::<usize>(), masked);
    }

    #[test]
    fn empty_tokenization_is_signalled() {
        let mut b = generate_scene(&SceneSpec::default()).unwrap();
        b.mask.iter_mut().for_each(|m| *m = -1);
        assert!(matches!(sam_tokenize(&b, 1), Err(Error::EmptyTokenization)));
    }

    #[test]
    fn knn_mixes_adjacent_objects() {
        let spec = SceneSpec {
            n_objects: 2,
            layout: Layout::Row,
            seed: 2,
            ..SceneSpec::default()
        };
        let b = generate_scene(&spec).unwrap();
        let t = knn_tokenize(&b.points_f64(), 16, 32).unwrap();
        assert!(purity(&t, &b.gt_region).unwrap() < 1.0);
    }

    #[test]
    fn audit_csv_header() {
        let row = AuditRow {
            scene_id: 3,
            mode: TokenMode::KnnBaseline,
            n_tokens: 16,
            purity: 0.75,
            dropped: 0,
        };
        assert_eq!(
            audit_csv(&[row]),
            "scene_id,mode,n_tokens,purity,dropped\n3,knn,16,0.75,0\n"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn sam_token_invariants(seed in 0u64..100_000, n in 1usize..9, min_points in 1usize..40) {
            let spec = SceneSpec { n_objects: n, seed, ..SceneSpec::default() };
            let b = generate_scene(&spec).unwrap();
            let t = match sam_tokenize(&b, min_points) {
                Ok(t) => t,
                Err(Error::EmptyTokenization) => return Ok(()),
                Err(e) => panic!("{e}"),
            };
            let ids = b.point_mask_ids().unwrap();
            let mut seen = vec![0usize; b.n_points()];
            for tok in &t.tokens {
                prop_assert!(tok.len() >= min_points);
                let mut c = [0.0; 3];
                for &i in &tok.point_indices {
                    seen[i] += 1;
                    prop_assert_eq!(ids[i], Some(tok.region_id));
                    for k in 0..3 { c[k] += b.point(i)[k]; }
                }
                for k in 0..3 {
                    prop_assert!((c[k] / tok.len() as f64 - tok.centroid[k]).abs() < 1e-6);
                }
            }
            for &i in &t.dropped_points { seen[i] += 1; }
            prop_assert!(seen.iter().all(|&s| s == 1));
            prop_assert!(t.tokens.windows(2).all(|w| w[0].region_id < w[1].region_id));
            prop_assert_eq!(purity(&t, &b.gt_region).unwrap(), 1.0);
        }

        #[test]
        fn fps_is_permutation_stable(
            pts in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 2..40),
            shift in 0usize..1000,
            n_frac in 0.0f64..1.0,
        ) {
            let pts: Vec<[f64; 3]> = pts.into_iter().map(|(x, y, z)| [x, y, z]).collect();
            let len = pts.len();
            let n = 1 + ((len - 1) as f64 * n_frac) as usize;
            let start = shift % len;
            // reverse relabeling: new index j holds old point len-1-j
            let perm: Vec<usize> = (0..len).rev().collect();
            let relabeled: Vec<[f64; 3]> = perm.iter().map(|&o| pts[o]).collect();
            let new_start = perm.iter().position(|&o| o == start).unwrap();
            let mut a = fps(&pts, n, start).unwrap();
            let mut b: Vec<usize> = fps(&relabeled, n, new_start).unwrap().into_iter().map(|j| perm[j]).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }
}
