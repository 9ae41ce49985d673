//! Sort-and-count retrieval metrics, independent of the library's counting.

pub fn rank_by_sorting(scores: &[f64], truth: usize, ids: &[String]) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(ids[a].cmp(&ids[b])));
    order.iter().position(|&i| i == truth).unwrap() + 1
}

pub fn recall(ranks: &[usize], n: usize) -> f64 {
    let hits = ranks.iter().filter(|&&r| r <= n).count();
    (hits * 100) as f64 / ranks.len() as f64
}

pub fn median(ranks: &[usize]) -> f64 {
    let mut v = ranks.to_vec();
    v.sort();
    let mid = v.len() / 2;
    if v.len().is_multiple_of(2) {
        (v[mid - 1] + v[mid]) as f64 / 2.0
    } else {
        v[mid] as f64
    }
}
