//! Exhaustive reference ranking used to check the staged pipeline.

use crate::embedding::EmbeddingVector;

fn score(q: &EmbeddingVector, v: &EmbeddingVector) -> f32 {
    let mut acc = 0.0f32;
    for i in 0..q.dim() {
        acc += q.values()[i] * v.values()[i];
    }
    if !(q.is_normalized() && v.is_normalized()) {
        acc /= q.norm() * v.norm();
    }
    acc.clamp(-1.0, 1.0)
}

/// Scores every image, sorts all of them, keeps the first `k`.
/// Ties resolve to the smaller id.
pub fn brute_force_topk(query: &EmbeddingVector, images: &[(String, EmbeddingVector)], k: usize) -> Vec<String> {
    let mut scored: Vec<(f32, &str)> = images.iter().map(|(id, v)| (score(query, v), id.as_str())).collect();
    scored.sort_by(|a, b| {
        if a.0 > b.0 {
            std::cmp::Ordering::Less
        } else if a.0 < b.0 {
            std::cmp::Ordering::Greater
        } else {
            a.1.cmp(b.1)
        }
    });
    scored.into_iter().take(k).map(|(_, id)| id.to_string()).collect()
}
