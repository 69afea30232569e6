//! Offline metrics, AB-test significance, and style-space projections.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::catalog::Catalog;
use crate::embedder::CatalogEmbeddings;
use crate::error::{Error, Result};
use crate::scorer::dot;

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Sort-based; exact in the sense that the count is
/// accumulated in integers before the final division.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Degenerate("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count() as u128;
    let negatives = labels.len() as u128 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Degenerate("AUC needs both positive and negative examples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the Mann-Whitney U statistic.
    let mut doubled: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        let (mut pos, mut neg) = (0u128, 0u128);
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            if labels[order[end]] {
                pos += 1;
            } else {
                neg += 1;
            }
            end += 1;
        }
        doubled += 2 * pos * negatives_below + pos * neg;
        negatives_below += neg;
        start = end;
    }
    Ok(doubled as f64 / (2 * positives * negatives) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Control,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub user: String,
    pub outfit: String,
    pub group: Group,
    pub rating: u8,
    /// Unix milliseconds.
    #[serde(default)]
    pub timestamp: u64,
    /// Template label used for per-template breakdowns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub user: f64,
    pub outfit: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub mean: f64,
    pub observations: usize,
    pub users: usize,
    pub outfits: usize,
    pub components: VarianceComponents,
    /// Standard error of the group mean under the random-effects model.
    pub standard_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ABTestResult {
    pub control: GroupSummary,
    pub test: GroupSummary,
    /// `(test - control) / control` in percent; `None` when the control mean is 0.
    pub relative_difference_pct: Option<f64>,
    /// `None` when both standard errors are zero ("no variance").
    pub t_statistic: Option<f64>,
    pub p_value: Option<f64>,
}

impl ABTestResult {
    pub fn no_variance(&self) -> bool {
        self.t_statistic.is_none()
    }
}

pub fn relative_difference_pct(control: f64, test: f64) -> Option<f64> {
    (control != 0.0).then(|| (test - control) / control * 100.0)
}

/// Two-sided p-value of a standard-normal statistic.
pub fn two_sided_p(t: f64) -> f64 {
    let normal = StdNormal::standard();
    2.0 * (1.0 - normal.cdf(t.abs()))
}

/// Henderson method-I variance components for a crossed user x outfit
/// random-effects model without interaction, on 0/1 cell counts.
pub fn variance_components(records: &[&RatingRecord]) -> Result<GroupSummary> {
    let mut by_user: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    let mut by_outfit: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    let mut cells = BTreeSet::new();
    let mut sorted: Vec<&RatingRecord> = records.to_vec();
    sorted.sort_by(|a, b| (&a.user, &a.outfit).cmp(&(&b.user, &b.outfit)));
    let (mut total, mut total_sq) = (0.0, 0.0);
    for r in &sorted {
        if r.rating > 1 {
            return Err(Error::Degenerate(format!("rating {} is not binary", r.rating)));
        }
        if !cells.insert((r.user.as_str(), r.outfit.as_str())) {
            return Err(Error::Degenerate(format!("user {} rated outfit {} twice", r.user, r.outfit)));
        }
        let y = r.rating as f64;
        total += y;
        total_sq += y * y;
        let u = by_user.entry(&r.user).or_insert((0.0, 0.0));
        u.0 += y;
        u.1 += 1.0;
        let o = by_outfit.entry(&r.outfit).or_insert((0.0, 0.0));
        o.0 += y;
        o.1 += 1.0;
    }
    let (users, outfits) = (by_user.len(), by_outfit.len());
    if users < 2 || outfits < 2 {
        return Err(Error::Degenerate(format!(
            "a group needs at least 2 users and 2 outfits, got {users} and {outfits}"
        )));
    }
    let n = sorted.len() as f64;
    let t0 = total_sq;
    let t_mu = total * total / n;
    let t_a: f64 = by_user.values().map(|(s, c)| s * s / c).sum();
    let t_b: f64 = by_outfit.values().map(|(s, c)| s * s / c).sum();
    let k1: f64 = by_user.values().map(|(_, c)| c * c).sum::<f64>() / n;
    let k2: f64 = by_outfit.values().map(|(_, c)| c * c).sum::<f64>() / n;
    // With one observation per occupied cell these reduce to U and O.
    let (k3, k4) = (users as f64, outfits as f64);
    let (u, o) = (users as f64, outfits as f64);

    let a = Matrix3::new(
        n - k1, n - k2, n - 1.0,
        n - k1, k3 - k2, u - 1.0,
        k4 - k1, n - k2, o - 1.0,
    );
    let rhs = Vector3::new(t0 - t_mu, t_a - t_mu, t_b - t_mu);
    let sol = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Degenerate("variance components are not identifiable from this rating table".into()))?;
    let components = VarianceComponents {
        user: sol[0].max(0.0),
        outfit: sol[1].max(0.0),
        residual: sol[2].max(0.0),
    };
    let var_mean = (k1 * components.user + k2 * components.outfit + components.residual) / n;
    Ok(GroupSummary {
        mean: total / n,
        observations: sorted.len(),
        users,
        outfits,
        components,
        standard_error: var_mean.sqrt(),
    })
}

pub fn ab_test_analysis(ratings: &[RatingRecord]) -> Result<ABTestResult> {
    let pick = |g: Group| ratings.iter().filter(|r| r.group == g).collect::<Vec<_>>();
    let control = variance_components(&pick(Group::Control))?;
    let test = variance_components(&pick(Group::Test))?;
    let se = (control.standard_error.powi(2) + test.standard_error.powi(2)).sqrt();
    let t_statistic = (se > 0.0).then(|| (test.mean - control.mean) / se);
    Ok(ABTestResult {
        relative_difference_pct: relative_difference_pct(control.mean, test.mean),
        p_value: t_statistic.map(two_sided_p),
        t_statistic,
        control,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbSegment {
    pub name: String,
    pub result: std::result::Result<ABTestResult, String>,
}

/// Overall result followed by one segment per template label.
pub fn ab_report(ratings: &[RatingRecord]) -> Result<Vec<AbSegment>> {
    let mut segments = vec![AbSegment {
        name: "overall".into(),
        result: Ok(ab_test_analysis(ratings)?),
    }];
    let templates: BTreeSet<&str> = ratings.iter().filter_map(|r| r.template.as_deref()).collect();
    for t in templates {
        let subset: Vec<RatingRecord> = ratings
            .iter()
            .filter(|r| r.template.as_deref() == Some(t))
            .cloned()
            .collect();
        segments.push(AbSegment {
            name: t.to_string(),
            result: ab_test_analysis(&subset).map_err(|e| e.to_string()),
        });
    }
    Ok(segments)
}

pub fn format_ab_report(segments: &[AbSegment]) -> String {
    let mut out = String::from("segment\tcontrol\ttest\trel_diff_pct\tp_value\n");
    let opt = |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |x| format!("{x:.digits$}"));
    for s in segments {
        match &s.result {
            Ok(r) => {
                let _ = writeln!(
                    out,
                    "{}\t{:.2}\t{:.2}\t{}\t{}",
                    s.name,
                    r.control.mean,
                    r.test.mean,
                    opt(r.relative_difference_pct, 2),
                    opt(r.p_value, 4)
                );
            }
            Err(e) => {
                let _ = writeln!(out, "{}\t-\t-\t-\t-\t# {e}", s.name);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Projection {
    Pca,
    Tsne { perplexity: f64, iterations: usize },
}

impl Projection {
    pub fn tsne() -> Self {
        Projection::Tsne {
            perplexity: 30.0,
            iterations: 1000,
        }
    }
}

pub const TSNE_MAX_POINTS: usize = 5000;

pub fn project_2d(points: &[Vec<f64>], method: Projection, seed: u64) -> Result<Vec<[f64; 2]>> {
    if points.len() < 2 {
        return Err(Error::Degenerate("projection needs at least 2 points".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("points have different dimensions".into()));
    }
    match method {
        Projection::Pca => Ok(pca(points)),
        Projection::Tsne { perplexity, iterations } => {
            if points.len() > TSNE_MAX_POINTS {
                return Err(Error::Config(format!("exact t-SNE is limited to {TSNE_MAX_POINTS} points")));
            }
            Ok(tsne(points, perplexity, iterations, seed))
        }
    }
}

/// Principal components with a sign convention (largest loading positive)
/// so the output is unique.
fn pca(points: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let (n, d) = (points.len(), points[0].len());
    let mut x = DMatrix::from_fn(n, d, |i, j| points[i][j]);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = Vec::new();
    for &k in order.iter().take(2) {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let lead = v.iter().copied().fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
        if lead < 0.0 {
            v = -v;
        }
        axes.push(v);
    }
    while axes.len() < 2 {
        axes.push(nalgebra::DVector::zeros(d));
    }
    (0..n)
        .map(|i| {
            let row = x.row(i);
            [row.dot(&axes[0].transpose()), row.dot(&axes[1].transpose())]
        })
        .collect()
}

fn squared_distances(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Row-conditional affinities by bisection on the Gaussian precision so each
/// row has the requested perplexity, then symmetrised.
fn joint_probabilities(dist: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row = &dist[i * n..(i + 1) * n];
        let (mut beta, mut lo, mut hi) = (1.0, f64::NEG_INFINITY, f64::INFINITY);
        for _ in 0..100 {
            let min = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::INFINITY, f64::min);
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j != i {
                    let w = (-(row[j] - min) * beta).exp();
                    p[i * n + j] = w;
                    sum += w;
                    weighted += w * (row[j] - min);
                }
            }
            let entropy = sum.ln() + beta * weighted / sum;
            for j in 0..n {
                p[i * n + j] /= sum;
            }
            let diff = entropy - target;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
            }
        }
    }
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    joint
}

fn tsne(points: &[Vec<f64>], perplexity: f64, iterations: usize, seed: u64) -> Vec<[f64; 2]> {
    const EXAGGERATION: f64 = 12.0;
    const EXAGGERATION_ITERS: usize = 250;
    let n = points.len();
    let learning_rate = (n as f64 / EXAGGERATION / 4.0).max(50.0);
    let perplexity = perplexity.min((n as f64 - 1.0) / 3.0).max(1.0);
    let p = joint_probabilities(&squared_distances(points), n, perplexity);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1e-2).expect("valid");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut q = vec![0.0; n * n];
    for iter in 0..iterations {
        let exaggeration = if iter < EXAGGERATION_ITERS { EXAGGERATION } else { 1.0 };
        let momentum = if iter < EXAGGERATION_ITERS { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let w = 1.0 / (1.0 + dx * dx + dy * dy);
                q[i * n + j] = w;
                q[j * n + i] = w;
                z += 2.0 * w;
            }
        }
        for i in 0..n {
            let mut grad = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = q[i * n + j];
                let coeff = 4.0 * (exaggeration * p[i * n + j] - w / z) * w;
                grad[0] += coeff * (y[i][0] - y[j][0]);
                grad[1] += coeff * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                gains[i][k] = if (grad[k] > 0.0) != (velocity[i][k] > 0.0) {
                    gains[i][k] + 0.2
                } else {
                    (gains[i][k] * 0.8).max(0.01)
                };
                velocity[i][k] = momentum * velocity[i][k] - learning_rate * gains[i][k] * grad[k];
            }
        }
        let mut mean = [0.0; 2];
        for i in 0..n {
            for k in 0..2 {
                y[i][k] += velocity[i][k];
                mean[k] += y[i][k] / n as f64;
            }
        }
        for point in &mut y {
            point[0] -= mean[0];
            point[1] -= mean[1];
        }
    }
    y
}

/// How the query and the candidates are embedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Roles {
    pub query_hero: bool,
    pub candidates_hero: bool,
}

/// Top-`k` items by embedding dot product with the query, excluding the
/// query; descending score, ascending id on ties.
pub fn nearest_in_style(
    query: &str,
    roles: Roles,
    type_filter: Option<&str>,
    k: usize,
    catalog: &Catalog,
    embeddings: &CatalogEmbeddings,
) -> Result<Vec<(String, f64)>> {
    if k < 1 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let qi = catalog.index_of(query).ok_or_else(|| Error::UnknownItem(query.to_string()))?;
    let q = embeddings.get(qi, roles.query_hero);
    let q = q.as_slice().expect("contiguous rows");
    let mut ranked: Vec<(String, f64)> = catalog
        .items()
        .iter()
        .enumerate()
        .filter(|(i, item)| *i != qi && type_filter.is_none_or(|t| item.product_type == t))
        .map(|(i, item)| {
            let c = embeddings.get(i, roles.candidates_hero);
            (item.id.clone(), dot(q, c.as_slice().expect("contiguous rows")))
        })
        .collect();
    ranked.sort_by(|a, b| match b.1.total_cmp(&a.1) {
        Ordering::Equal => a.0.cmp(&b.0),
        other => other,
    });
    ranked.truncate(k);
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut pairs) = (0u64, 0u64);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    pairs += 2;
                    num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        Ordering::Greater => 2,
                        Ordering::Equal => 1,
                        Ordering::Less => 0,
                    };
                }
            }
        }
        num as f64 / pairs as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.7, 0.1], &[true, false, true, false]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[3.0, 2.0, 1.0], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.4; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(roc_auc(&[0.1], &[true, false]).is_err());
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count(
            raw in proptest::collection::vec((0u8..20, any::<bool>()), 2..300),
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 7.0).collect();
            let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
        }

        #[test]
        fn auc_is_antisymmetric_without_ties(
            raw in proptest::collection::hash_map(any::<i32>(), any::<bool>(), 2..200),
        ) {
            let scores: Vec<f64> = raw.keys().map(|&s| s as f64).collect();
            let labels: Vec<bool> = raw.values().copied().collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let sum = roc_auc(&scores, &labels).unwrap() + roc_auc(&neg, &labels).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    pub(crate) fn table_records(table: &[Vec<u8>], group: Group) -> Vec<RatingRecord> {
        let mut out = Vec::new();
        for (u, row) in table.iter().enumerate() {
            for (o, &y) in row.iter().enumerate() {
                out.push(RatingRecord {
                    user: format!("u{u}"),
                    outfit: format!("{group:?}-o{o}"),
                    group,
                    rating: y,
                    timestamp: 0,
                    template: None,
                });
            }
        }
        out
    }

    /// Balanced two-way ANOVA without interaction, by mean squares.
    fn anova(table: &[Vec<u8>]) -> (f64, f64, f64) {
        let u = table.len() as f64;
        let o = table[0].len() as f64;
        let y: Vec<Vec<f64>> = table.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let grand = y.iter().flatten().sum::<f64>() / (u * o);
        let row_means: Vec<f64> = y.iter().map(|r| r.iter().sum::<f64>() / o).collect();
        let col_means: Vec<f64> = (0..o as usize).map(|j| y.iter().map(|r| r[j]).sum::<f64>() / u).collect();
        let ss_a = o * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
        let ss_b = u * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
        let mut ss_e = 0.0;
        for i in 0..u as usize {
            for j in 0..o as usize {
                ss_e += (y[i][j] - row_means[i] - col_means[j] + grand).powi(2);
            }
        }
        let ms_a = ss_a / (u - 1.0);
        let ms_b = ss_b / (o - 1.0);
        let ms_e = ss_e / ((u - 1.0) * (o - 1.0));
        (((ms_a - ms_e) / o).max(0.0), ((ms_b - ms_e) / u).max(0.0), ms_e)
    }

    #[test]
    fn balanced_tables_match_anova() {
        let tables = [
            vec![vec![1, 0], vec![1, 0]],
            vec![vec![1, 0, 1, 1], vec![0, 0, 1, 0], vec![1, 1, 1, 0]],
        ];
        for table in tables {
            let records = table_records(&table, Group::Control);
            let refs: Vec<&RatingRecord> = records.iter().collect();
            let got = variance_components(&refs).unwrap();
            let (a, b, e) = anova(&table);
            assert!((got.components.user - a).abs() < 1e-9, "{table:?}");
            assert!((got.components.outfit - b).abs() < 1e-9, "{table:?}");
            assert!((got.components.residual - e).abs() < 1e-9, "{table:?}");
            let (u, o) = (table.len() as f64, table[0].len() as f64);
            let se2 = a / u + b / o + e / (u * o);
            assert!((got.standard_error.powi(2) - se2).abs() < 1e-12);
        }
        let records = table_records(&[vec![1, 0], vec![1, 0]], Group::Control);
        let refs: Vec<&RatingRecord> = records.iter().collect();
        let c = variance_components(&refs).unwrap().components;
        assert!((c.outfit - 0.5).abs() < 1e-12);
        assert_eq!(c.user, 0.0);
    }

    #[test]
    fn identical_ratings_have_no_variance() {
        let mut records = table_records(&[vec![1, 1], vec![1, 1]], Group::Control);
        records.extend(table_records(&[vec![1, 1], vec![1, 1]], Group::Test));
        let r = ab_test_analysis(&records).unwrap();
        assert!(r.no_variance());
        assert_eq!(r.control.components.user, 0.0);
        assert_eq!(r.relative_difference_pct, Some(0.0));
    }

    #[test]
    fn degenerate_groups_are_rejected() {
        let mut records = table_records(&[vec![1, 0]], Group::Control);
        records.extend(table_records(&[vec![1, 0], vec![0, 0]], Group::Test));
        assert!(matches!(ab_test_analysis(&records), Err(Error::Degenerate(_))));
        let mut dup = table_records(&[vec![1, 0], vec![0, 1]], Group::Control);
        dup.push(dup[0].clone());
        let refs: Vec<&RatingRecord> = dup.iter().collect();
        assert!(variance_components(&refs).is_err());
    }

    #[test]
    fn relative_difference_arithmetic() {
        assert!((relative_difference_pct(0.5, 0.6).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(relative_difference_pct(0.0, 0.6), None);
        assert!((two_sided_p(1.959_963_984_540_054) - 0.05).abs() < 1e-9);
    }

    #[test]
    fn pca_recovers_planar_points() {
        let planar = [[0.0, 0.0], [3.0, 1.0], [-1.0, 2.0], [2.0, -2.0], [0.5, 0.7]];
        let points: Vec<Vec<f64>> = planar
            .iter()
            .map(|p| {
                let mut v = vec![0.0; 256];
                v[7] = p[0];
                v[100] = p[1];
                v
            })
            .collect();
        let out = project_2d(&points, Projection::Pca, 0).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let d_in = ((planar[i][0] - planar[j][0]).powi(2) + (planar[i][1] - planar[j][1]).powi(2)).sqrt();
                let d_out = ((out[i][0] - out[j][0]).powi(2) + (out[i][1] - out[j][1]).powi(2)).sqrt();
                assert!((d_in - d_out).abs() < 1e-9);
            }
        }
        let two = project_2d(&points[..2], Projection::Pca, 0).unwrap();
        assert!(two[0][1].abs() < 1e-12 && two[1][1].abs() < 1e-12);
        assert!((two[0][0] + two[1][0]).abs() < 1e-12);
        assert!(project_2d(&points[..1], Projection::Pca, 0).is_err());
    }

    #[test]
    fn tsne_is_seeded_and_separates_clusters() {
        let mut points = Vec::new();
        for c in 0..2 {
            for k in 0..15 {
                let mut v = vec![0.0; 8];
                v[c] = 10.0;
                v[2 + k % 6] += 0.1 * k as f64;
                points.push(v);
            }
        }
        let method = Projection::Tsne {
            perplexity: 5.0,
            iterations: 300,
        };
        let a = project_2d(&points, method, 4).unwrap();
        assert_eq!(a, project_2d(&points, method, 4).unwrap());
        let centroid = |r: std::ops::Range<usize>| {
            let n = r.len() as f64;
            r.fold([0.0, 0.0], |acc, i| [acc[0] + a[i][0] / n, acc[1] + a[i][1] / n])
        };
        let (c0, c1) = (centroid(0..15), centroid(15..30));
        let between = ((c0[0] - c1[0]).powi(2) + (c0[1] - c1[1]).powi(2)).sqrt();
        let spread = (0..15)
            .map(|i| ((a[i][0] - c0[0]).powi(2) + (a[i][1] - c0[1]).powi(2)).sqrt())
            .fold(0.0, f64::max);
        assert!(between > spread, "between {between} spread {spread}");
    }

    #[test]
    fn nearest_orders_by_dot_then_id() {
        use crate::catalog::test_support::catalog_of;
        let catalog = catalog_of(&[("q", "Tops"), ("a", "Shoes"), ("b", "Shoes"), ("c", "Bags"), ("d", "Shoes")]);
        let rows = [[1.0, 0.0], [0.9, 0.0], [0.5, 0.3], [0.1, 2.0], [0.9, 5.0]];
        let m = Array2::from_shape_fn((5, 2), |(i, j)| rows[i][j]);
        let table = CatalogEmbeddings {
            hero: m.clone(),
            styling: m,
        };
        let got = nearest_in_style("q", Roles::default(), None, 10, &catalog, &table).unwrap();
        let ids: Vec<&str> = got.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["a", "d", "b", "c"]);
        assert_eq!(got[0].1, 0.9);
        let shoes = nearest_in_style("q", Roles::default(), Some("Shoes"), 2, &catalog, &table).unwrap();
        assert_eq!(shoes.len(), 2);
        assert!(nearest_in_style("zz", Roles::default(), None, 1, &catalog, &table).is_err());
        assert!(nearest_in_style("q", Roles::default(), None, 0, &catalog, &table).is_err());
    }
}
