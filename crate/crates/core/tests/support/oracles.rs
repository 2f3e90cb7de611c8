//! Brute-force reference metrics written straight from their definitions.
//! Every quantity is recomputed from scratch at each rank, no running sums.

#![allow(dead_code)]

fn hits_in_prefix(rel: &[bool], k: usize) -> usize {
    rel[..k].iter().filter(|&&r| r).count()
}

fn precision_at(rel: &[bool], k: usize) -> f64 {
    hits_in_prefix(rel, k) as f64 / k as f64
}

pub fn ap(rel: &[bool], r: usize) -> f64 {
    let mut terms = Vec::new();
    for k in 1..=rel.len() {
        if rel[k - 1] {
            terms.push(precision_at(rel, k));
        }
    }
    terms.iter().sum::<f64>() / r as f64
}

fn discount(pos: usize) -> f64 {
    // 1-based position
    if pos == 1 {
        1.0
    } else {
        1.0 / (pos as f64).log2()
    }
}

pub fn dcg(rel: &[bool], r: usize) -> f64 {
    let raw: f64 = (1..=rel.len()).filter(|&p| rel[p - 1]).map(discount).sum();
    let ideal: f64 = (1..=r).map(discount).sum();
    raw / ideal
}

pub fn pr_auc(rel: &[bool], r: usize) -> f64 {
    // (recall, precision) at every rank, kept where recall steps up
    let mut curve = vec![(0.0, precision_at(rel, 1))];
    for k in 1..=rel.len() {
        if rel[k - 1] {
            curve.push((hits_in_prefix(rel, k) as f64 / r as f64, precision_at(rel, k)));
        }
    }
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

fn graded_dcg(grades: &[u8]) -> f64 {
    grades
        .iter()
        .enumerate()
        .map(|(i, &g)| g as f64 / ((i + 2) as f64).log2())
        .sum()
}

/// Ideal ordering found by trying every permutation when the list is short,
/// by sorting otherwise.
pub fn ndcg(grades: &[u8]) -> f64 {
    let best = if grades.len() <= 6 {
        let mut best = 0.0f64;
        permutations(grades.len(), &mut |perm| {
            let g: Vec<u8> = perm.iter().map(|&i| grades[i]).collect();
            best = best.max(graded_dcg(&g));
        });
        best
    } else {
        let mut g = grades.to_vec();
        g.sort_by(|a, b| b.cmp(a));
        graded_dcg(&g)
    };
    graded_dcg(grades) / best
}

/// Calls `f` with every permutation of `0..n`.
pub fn permutations(n: usize, f: &mut dyn FnMut(&[usize])) {
    fn go(start: usize, a: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if start + 1 >= a.len() {
            f(a);
            return;
        }
        for i in start..a.len() {
            a.swap(start, i);
            go(start + 1, a, f);
            a.swap(start, i);
        }
    }
    let mut a: Vec<usize> = (0..n).collect();
    go(0, &mut a, f);
}
