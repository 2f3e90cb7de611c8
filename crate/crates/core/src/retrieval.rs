//! Ranking and retrieval metrics.
//!
//! Metric kernels take a relevance vector along the ranking and the number
//! `R` of relevant items in the database (at least the number of `true`
//! entries; equal to it when the ranking covers the whole database). A query
//! with `R = 0` yields `None` and is excluded from aggregation.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MultiViewObject;
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{dot, sq_norm_diff, Matrix};

/// Cutoff of the E-measure.
pub const E_MEASURE_CUTOFF: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    #[default]
    Euclidean,
    /// `1 − cos(a, b)`.
    Cosine,
}

impl Distance {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::Euclidean => sq_norm_diff(a, b).sqrt(),
            Distance::Cosine => {
                let na = dot(a, a).sqrt();
                let nb = dot(b, b).sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot(a, b) / (na * nb)
                }
            }
        }
    }
}

/// Labelled embeddings, one row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub classes: Vec<usize>,
    pub subcats: Vec<usize>,
    pub domains: Vec<usize>,
    pub features: Matrix<f64>,
}

impl EmbeddingSet {
    pub fn new(
        ids: Vec<String>,
        classes: Vec<usize>,
        subcats: Vec<usize>,
        domains: Vec<usize>,
        features: Matrix<f64>,
    ) -> Result<Self> {
        let n = ids.len();
        ensure_dim("embedding set classes", n, classes.len())?;
        ensure_dim("embedding set subcats", n, subcats.len())?;
        ensure_dim("embedding set domains", n, domains.len())?;
        ensure_dim("embedding set rows", n, features.rows())?;
        if !features.is_finite() {
            return Err(Error::NonFinite("embedding set features".into()));
        }
        Ok(Self {
            ids,
            classes,
            subcats,
            domains,
            features,
        })
    }

    pub fn from_objects(objects: &[MultiViewObject], features: Matrix<f64>) -> Result<Self> {
        Self::new(
            objects.iter().map(|o| o.id.clone()).collect(),
            objects.iter().map(|o| o.class).collect(),
            objects.iter().map(|o| o.subcat).collect(),
            objects.iter().map(|o| o.domain).collect(),
            features,
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Items of one domain, in order.
    pub fn domain(&self, domain: usize) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.domains[i] == domain).collect();
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            classes: idx.iter().map(|&i| self.classes[i]).collect(),
            subcats: idx.iter().map(|&i| self.subcats[i]).collect(),
            domains: idx.iter().map(|&i| self.domains[i]).collect(),
            features: self.features.select_rows(&idx),
        }
    }

    /// Writes `id,class,subcat,domain,f_0..f_{d-1}` (plus `pc_0,pc_1` when
    /// `extra_pca2` is set).
    pub fn write_csv(&self, path: &Path, extra_pca2: bool) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        let pcs = if extra_pca2 { Some(pca2(&self.features)) } else { None };
        let mut header = String::from("id,class,subcat,domain");
        for k in 0..self.dim() {
            header.push_str(&format!(",f_{k}"));
        }
        if pcs.is_some() {
            header.push_str(",pc_0,pc_1");
        }
        writeln!(w, "{header}").map_err(io)?;
        for i in 0..self.len() {
            if self.ids[i].contains([',', '"', '\n']) {
                return Err(Error::InvalidArgument(format!("id `{}` is not CSV-safe", self.ids[i])));
            }
            let mut line = format!(
                "{},{},{},{}",
                self.ids[i], self.classes[i], self.subcats[i], self.domains[i]
            );
            for v in self.features.row(i) {
                line.push_str(&format!(",{v}"));
            }
            if let Some(p) = &pcs {
                line.push_str(&format!(",{},{}", p[(i, 0)], p[(i, 1)]));
            }
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Reads the format written by [`EmbeddingSet::write_csv`]; projection
    /// columns are ignored.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut reader = csv::Reader::from_path(path).map_err(|e| parse_err(0, e.to_string()))?;
        let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        let fixed = ["id", "class", "subcat", "domain"];
        if headers.len() < 5 || headers.iter().take(4).ne(fixed.iter().copied()) {
            return Err(parse_err(1, "expected header id,class,subcat,domain,f_0,...".into()));
        }
        let dim = headers.iter().skip(4).take_while(|h| h.starts_with("f_")).count();
        if dim == 0 {
            return Err(parse_err(1, "no feature columns".into()));
        }
        let (mut ids, mut classes, mut subcats, mut domains, mut data) = (vec![], vec![], vec![], vec![], vec![]);
        for (i, rec) in reader.records().enumerate() {
            let lineno = i + 2;
            let rec = rec.map_err(|e| parse_err(lineno, e.to_string()))?;
            if rec.len() != headers.len() {
                return Err(parse_err(
                    lineno,
                    format!("expected {} fields, got {}", headers.len(), rec.len()),
                ));
            }
            let int = |k: usize| {
                rec[k]
                    .parse::<usize>()
                    .map_err(|e| parse_err(lineno, format!("{}: {e}", fixed[k])))
            };
            ids.push(rec[0].to_string());
            classes.push(int(1)?);
            subcats.push(int(2)?);
            domains.push(int(3)?);
            for k in 0..dim {
                let v: f64 = rec[4 + k]
                    .parse()
                    .map_err(|e| parse_err(lineno, format!("f_{k}: {e}")))?;
                data.push(v);
            }
        }
        let n = ids.len();
        if n == 0 {
            return Err(parse_err(2, "no embeddings".into()));
        }
        Self::new(ids, classes, subcats, domains, Matrix::from_vec(n, dim, data)?)
    }
}

/// Database items for one query, ascending distance, ties by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub query_id: String,
    pub query_class: usize,
    pub query_subcat: usize,
    /// Indices into the database set.
    pub order: Vec<usize>,
    pub distances: Vec<f64>,
}

impl Ranking {
    /// Binary relevance by class along the ranking.
    pub fn relevance(&self, database: &EmbeddingSet) -> Vec<bool> {
        self.order
            .iter()
            .map(|&j| database.classes[j] == self.query_class)
            .collect()
    }

    /// Relevance against an explicit id set.
    pub fn relevance_by_id(&self, database: &EmbeddingSet, relevant: &HashSet<&str>) -> Vec<bool> {
        self.order
            .iter()
            .map(|&j| relevant.contains(database.ids[j].as_str()))
            .collect()
    }

    /// 2 = same sub-category, 1 = same class only, 0 otherwise.
    pub fn grades(&self, database: &EmbeddingSet) -> Vec<u8> {
        self.order
            .iter()
            .map(|&j| {
                match (
                    database.classes[j] == self.query_class,
                    database.subcats[j] == self.query_subcat,
                ) {
                    (true, true) => 2,
                    (true, false) => 1,
                    _ => 0,
                }
            })
            .collect()
    }
}

pub fn rank_all(queries: &EmbeddingSet, database: &EmbeddingSet, distance: Distance) -> Result<Vec<Ranking>> {
    ensure_dim("query vs database dimension", database.dim(), queries.dim())?;
    let out = (0..queries.len())
        .into_par_iter()
        .map(|q| {
            let qf = queries.features.row(q);
            let qid = &queries.ids[q];
            let mut scored: Vec<(f64, usize)> = (0..database.len())
                .filter(|&j| &database.ids[j] != qid)
                .map(|j| (distance.eval(qf, database.features.row(j)), j))
                .collect();
            scored.sort_by(|a, b| {
                a.0.total_cmp(&b.0)
                    .then_with(|| database.ids[a.1].cmp(&database.ids[b.1]))
            });
            Ranking {
                query_id: qid.clone(),
                query_class: queries.classes[q],
                query_subcat: queries.subcats[q],
                order: scored.iter().map(|s| s.1).collect(),
                distances: scored.iter().map(|s| s.0).collect(),
            }
        })
        .collect();
    Ok(out)
}

fn num_relevant(rel: &[bool]) -> usize {
    rel.iter().filter(|&&r| r).count()
}

/// Number of relevant items in a full ranking.
pub fn count_relevant(rel: &[bool]) -> usize {
    num_relevant(rel)
}

fn resolve_r(rel: &[bool], total_relevant: usize) -> Option<usize> {
    let r = total_relevant.max(num_relevant(rel));
    (r > 0 && !rel.is_empty()).then_some(r)
}

/// `(1/R) Σ_{k: rel_k} precision@k`.
pub fn average_precision(rel: &[bool], total_relevant: usize) -> Option<f64> {
    let r = resolve_r(rel, total_relevant)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, _) in rel.iter().enumerate().filter(|(_, &x)| x) {
        hits += 1;
        sum += hits as f64 / (k + 1) as f64;
    }
    Some(sum / r as f64)
}

/// Trapezoidal area under the precision–recall curve.
///
/// The curve starts at `(0, precision@1)` and has one point per relevant
/// item at `(hits/R, precision at that rank)`.
pub fn pr_auc(rel: &[bool], total_relevant: usize) -> Option<f64> {
    let r = resolve_r(rel, total_relevant)?;
    let mut prev = (0.0, if rel[0] { 1.0 } else { 0.0 });
    let mut hits = 0usize;
    let mut area = 0.0;
    for (k, _) in rel.iter().enumerate().filter(|(_, &x)| x) {
        hits += 1;
        let point = (hits as f64 / r as f64, hits as f64 / (k + 1) as f64);
        area += (point.0 - prev.0) * (point.1 + prev.1) * 0.5;
        prev = point;
    }
    Some(area)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShrecScores {
    pub nn: f64,
    pub ft: f64,
    pub st: f64,
    pub e: f64,
    pub dcg: f64,
}

fn hits_at(rel: &[bool], k: usize) -> usize {
    num_relevant(&rel[..k.min(rel.len())])
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p == 0.0 || r == 0.0 {
        0.0
    } else {
        2.0 / (1.0 / p + 1.0 / r)
    }
}

/// Nearest neighbour, first/second tier, E-measure and normalised DCG.
pub fn shrec_suite(rel: &[bool], total_relevant: usize) -> Option<ShrecScores> {
    let r = resolve_r(rel, total_relevant)?;
    let rf = r as f64;
    let cutoff = E_MEASURE_CUTOFF.min(rel.len());
    let hc = hits_at(rel, cutoff) as f64;

    let mut dcg = 0.0;
    for (i, _) in rel.iter().enumerate().filter(|(_, &x)| x) {
        dcg += if i == 0 { 1.0 } else { 1.0 / ((i + 1) as f64).log2() };
    }
    let ideal: f64 = 1.0 + (2..=r).map(|i| 1.0 / (i as f64).log2()).sum::<f64>();

    Some(ShrecScores {
        nn: if rel[0] { 1.0 } else { 0.0 },
        ft: hits_at(rel, r) as f64 / rf,
        st: hits_at(rel, 2 * r) as f64 / rf,
        e: harmonic(hc / cutoff as f64, hc / rf),
        dcg: dcg / ideal,
    })
}

/// Graded NDCG with gain = grade and discount `1/log₂(i+1)`.
pub fn ndcg_graded(grades: &[u8], cutoff: Option<usize>) -> Option<f64> {
    if grades.iter().all(|&g| g == 0) {
        return None;
    }
    let c = cutoff.unwrap_or(grades.len()).min(grades.len());
    let dcg = |g: &[u8]| -> f64 {
        g.iter()
            .enumerate()
            .map(|(i, &v)| f64::from(v) / ((i + 2) as f64).log2())
            .sum()
    };
    let mut ideal = grades.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    Some(dcg(&grades[..c]) / dcg(&ideal[..c]))
}

/// Harmonic mean of precision and recall at `cutoff` (default `R`).
pub fn f_measure(rel: &[bool], total_relevant: usize, cutoff: Option<usize>) -> Option<f64> {
    let r = resolve_r(rel, total_relevant)?;
    let c = cutoff.unwrap_or(r).clamp(1, rel.len());
    let h = hits_at(rel, c) as f64;
    Some(harmonic(h / c as f64, h / r as f64))
}

/// All metrics of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub id: String,
    pub class: usize,
    pub values: BTreeMap<String, f64>,
}

impl QueryMetrics {
    /// Scores one ranking; `None` when the query has no relevant item.
    pub fn score(ranking: &Ranking, database: &EmbeddingSet, graded: bool) -> Option<Self> {
        let rel = ranking.relevance(database);
        let r = count_relevant(&rel);
        let shrec = shrec_suite(&rel, r)?;
        let mut values = BTreeMap::new();
        values.insert("nn".to_string(), shrec.nn);
        values.insert("ft".to_string(), shrec.ft);
        values.insert("st".to_string(), shrec.st);
        values.insert("e".to_string(), shrec.e);
        values.insert("dcg".to_string(), shrec.dcg);
        values.insert("map".to_string(), average_precision(&rel, r)?);
        values.insert("auc".to_string(), pr_auc(&rel, r)?);
        values.insert("f1".to_string(), f_measure(&rel, r, None)?);
        if graded {
            values.insert("ndcg".to_string(), ndcg_graded(&ranking.grades(database), None)?);
        }
        Some(Self {
            id: ranking.query_id.clone(),
            class: ranking.query_class,
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub micro: f64,
    #[serde(rename = "macro")]
    pub macro_: f64,
    pub per_class: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, MetricSummary>,
    pub num_queries: usize,
    /// Queries without any relevant database item.
    pub excluded_queries: usize,
    pub per_query: Vec<QueryMetrics>,
}

impl MetricReport {
    pub fn micro(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).map(|m| m.micro)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serialisable")
    }
}

/// Micro (mean over queries) and macro (mean of per-class means) averages.
///
/// Queries are sorted by id first, so the result does not depend on the
/// order they were evaluated in.
pub fn aggregate(per_query: &[QueryMetrics], excluded: usize) -> Result<MetricReport> {
    if per_query.is_empty() {
        return Err(Error::InvalidArgument("no scorable query".into()));
    }
    let mut sorted: Vec<&QueryMetrics> = per_query.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));

    let names: Vec<String> = sorted[0].values.keys().cloned().collect();
    let mut metrics = BTreeMap::new();
    for name in names {
        let mut total = 0.0;
        let mut by_class: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for q in &sorted {
            let v = *q
                .values
                .get(&name)
                .ok_or_else(|| Error::InvalidArgument(format!("query `{}` lacks metric `{name}`", q.id)))?;
            total += v;
            let e = by_class.entry(q.class).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        let per_class: BTreeMap<usize, f64> = by_class.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect();
        let macro_ = per_class.values().sum::<f64>() / per_class.len() as f64;
        metrics.insert(
            name,
            MetricSummary {
                micro: total / sorted.len() as f64,
                macro_,
                per_class,
            },
        );
    }
    Ok(MetricReport {
        metrics,
        num_queries: per_query.len(),
        excluded_queries: excluded,
        per_query: sorted.into_iter().cloned().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub distance: Distance,
    /// Adds sub-category graded NDCG.
    pub graded: bool,
}

/// Ranks every query against the database and aggregates all metrics.
pub fn evaluate(queries: &EmbeddingSet, database: &EmbeddingSet, opts: &EvalOptions) -> Result<MetricReport> {
    let rankings = rank_all(queries, database, opts.distance)?;
    let scored: Vec<Option<QueryMetrics>> = rankings
        .par_iter()
        .map(|r| QueryMetrics::score(r, database, opts.graded))
        .collect();
    let excluded = scored.iter().filter(|s| s.is_none()).count();
    let per_query: Vec<QueryMetrics> = scored.into_iter().flatten().collect();
    aggregate(&per_query, excluded)
}

/// Projection onto the two leading principal components (power iteration
/// with deflation; signs fixed so the largest loading is positive).
pub fn pca2(features: &Matrix<f64>) -> Matrix<f64> {
    let (n, d) = features.shape();
    let mut out = Matrix::zeros(n, 2);
    if n == 0 || d == 0 {
        return out;
    }
    let mean: Vec<f64> = (0..d)
        .map(|k| (0..n).map(|i| features[(i, k)]).sum::<f64>() / n as f64)
        .collect();
    let mut cov = Matrix::zeros(d, d);
    for row in features.row_iter() {
        let c: Vec<f64> = row.iter().zip(&mean).map(|(a, m)| a - m).collect();
        cov.add_outer(&c, &c);
    }
    let mut components: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2.min(d) {
        let mut v = vec![1.0 / (d as f64).sqrt(); d];
        for _ in 0..500 {
            let mut w = cov.matvec(&v);
            for c in &components {
                let p = dot(&w, c);
                w.iter_mut().zip(c).for_each(|(x, ci)| *x -= p * ci);
            }
            let norm = dot(&w, &w).sqrt();
            if norm == 0.0 {
                break;
            }
            v = w.into_iter().map(|x| x / norm).collect();
        }
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
    }
    for (i, row) in features.row_iter().enumerate() {
        let c: Vec<f64> = row.iter().zip(&mean).map(|(a, m)| a - m).collect();
        for (k, comp) in components.iter().enumerate() {
            out[(i, k)] = dot(&c, comp);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn ap_hand_values() {
        assert_abs_diff_eq!(
            average_precision(&[true, false, true], 2).unwrap(),
            5.0 / 6.0,
            epsilon = 1e-15
        );
        assert_eq!(average_precision(&[true, true, false], 2).unwrap(), 1.0);
        assert_eq!(average_precision(&[false, false], 0), None);
        // relevant items only at the tail still contribute at their ranks
        assert_abs_diff_eq!(
            average_precision(&[false, false, false, true], 1).unwrap(),
            0.25,
            epsilon = 1e-15
        );
        // a relevant item missing from the list counts in R only
        assert_abs_diff_eq!(average_precision(&[true, false], 2).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn auc_hand_values() {
        assert_eq!(pr_auc(&[true, true, false], 2).unwrap(), 1.0);
        assert_abs_diff_eq!(
            pr_auc(&[true, false, true], 2).unwrap(),
            0.5 + 0.5 * (1.0 + 2.0 / 3.0) / 2.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            pr_auc(&[true, false, true], 2).unwrap(),
            0.916_666_666_666_666_7,
            epsilon = 1e-12
        );
    }

    #[test]
    fn shrec_hand_values() {
        let s = shrec_suite(&[true, true, false, false], 2).unwrap();
        assert_eq!((s.nn, s.ft, s.st), (1.0, 1.0, 1.0));
        assert_abs_diff_eq!(s.e, 2.0 / 3.0, epsilon = 1e-15);

        let s = shrec_suite(&[true, false, true], 2).unwrap();
        assert_abs_diff_eq!(s.dcg, (1.0 + 1.0 / 3f64.log2()) / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.dcg, 0.8155, epsilon = 1e-4);

        let s = shrec_suite(&[false, false, false, false, true, true], 2).unwrap();
        assert_eq!((s.nn, s.ft, s.st), (0.0, 0.0, 0.0));
    }

    #[test]
    fn ndcg_hand_values() {
        assert_eq!(ndcg_graded(&[2, 1, 0], None).unwrap(), 1.0);
        let expected = (1.0 + 2.0 / 3f64.log2()) / (2.0 + 1.0 / 3f64.log2());
        assert_abs_diff_eq!(ndcg_graded(&[1, 2], Some(2)).unwrap(), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(expected, 0.8597, epsilon = 1e-4);
        assert_eq!(ndcg_graded(&[2], None).unwrap(), 1.0);
        assert_eq!(ndcg_graded(&[0, 0], None), None);
    }

    #[test]
    fn f_measure_hand_values() {
        assert_eq!(f_measure(&[true, true, false], 2, None).unwrap(), 1.0);
        assert_abs_diff_eq!(f_measure(&[true, false], 2, Some(2)).unwrap(), 0.5, epsilon = 1e-15);
        assert_eq!(f_measure(&[false, false, true, true], 2, None).unwrap(), 0.0);
        assert_eq!(f_measure(&[false, false], 0, None), None);
    }

    fn q(id: &str, class: usize, v: f64) -> QueryMetrics {
        QueryMetrics {
            id: id.to_string(),
            class,
            values: BTreeMap::from([("map".to_string(), v)]),
        }
    }

    #[test]
    fn micro_and_macro() {
        let mut qs: Vec<QueryMetrics> = (0..10).map(|i| q(&format!("a{i}"), 0, 0.2)).collect();
        qs.push(q("b", 1, 1.0));
        let r = aggregate(&qs, 0).unwrap();
        let m = &r.metrics["map"];
        assert_abs_diff_eq!(m.micro, 3.0 / 11.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.macro_, 0.6, epsilon = 1e-12);

        qs.reverse();
        assert_eq!(aggregate(&qs, 0).unwrap().metrics, r.metrics);
    }

    #[test]
    fn one_class_micro_equals_macro() {
        let qs = vec![q("a", 3, 0.1), q("b", 3, 0.7), q("c", 3, 0.4)];
        let m = &aggregate(&qs, 0).unwrap().metrics["map"];
        assert_eq!(m.micro, m.macro_);
    }

    fn set(rows: &[[f64; 2]], classes: &[usize]) -> EmbeddingSet {
        let n = rows.len();
        EmbeddingSet::new(
            (0..n).map(|i| format!("o{i}")).collect(),
            classes.to_vec(),
            vec![0; n],
            vec![0; n],
            Matrix::from_rows(rows).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn ranking_excludes_self_and_orders_by_distance() {
        let db = set(&[[0.0, 0.0], [1.0, 0.0], [5.0, 0.0]], &[0, 0, 1]);
        let r = rank_all(&db, &db, Distance::Euclidean).unwrap();
        assert_eq!(r[0].order, vec![1, 2]);
        assert_eq!(r[0].distances, vec![1.0, 5.0]);

        let query = EmbeddingSet::new(
            vec!["q".into()],
            vec![1],
            vec![0],
            vec![0],
            Matrix::from_rows(&[[5.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let r = rank_all(&query, &db, Distance::Euclidean).unwrap();
        assert_eq!(r[0].order[0], 2);

        let single = set(&[[0.0, 0.0]], &[0]);
        assert!(rank_all(&single, &single, Distance::Euclidean).unwrap()[0]
            .order
            .is_empty());
    }

    #[test]
    fn ties_break_by_id() {
        let db = set(&[[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]], &[0, 0, 0]);
        let query = EmbeddingSet::new(
            vec!["q".into()],
            vec![0],
            vec![0],
            vec![0],
            Matrix::from_rows(&[[0.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let r = rank_all(&query, &db, Distance::Euclidean).unwrap();
        assert_eq!(r[0].order, vec![0, 1, 2]);
    }

    #[test]
    fn dimension_mismatch() {
        let a = set(&[[0.0, 0.0]], &[0]);
        let b = EmbeddingSet::new(
            vec!["x".into()],
            vec![0],
            vec![0],
            vec![0],
            Matrix::from_rows(&[[0.0]]).unwrap(),
        )
        .unwrap();
        assert!(rank_all(&a, &b, Distance::Euclidean).is_err());
    }

    #[test]
    fn cosine_distance() {
        assert_abs_diff_eq!(Distance::Cosine.eval(&[1.0, 0.0], &[0.0, 2.0]), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(Distance::Cosine.eval(&[1.0, 1.0], &[2.0, 2.0]), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn perfect_separation_scores_one() {
        let db = set(&[[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]], &[0, 0, 1, 1]);
        let r = evaluate(
            &db,
            &db,
            &EvalOptions {
                graded: true,
                ..Default::default()
            },
        )
        .unwrap();
        for (name, m) in &r.metrics {
            if name != "e" {
                assert_eq!(m.micro, 1.0, "{name}");
            }
        }
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        let rows: Vec<[f64; 2]> = (0..20).map(|i| [i as f64, 0.01 * ((i * 7) % 3) as f64]).collect();
        let p = pca2(&Matrix::from_rows(&rows).unwrap());
        assert!((p[(19, 0)] - p[(0, 0)] - 19.0).abs() < 1e-6);
    }
}
