use super::{EvalError, GroundTruthSet, MatchCounts};
use crate::data::BinaryMap;

const FREE: usize = usize::MAX;

/// Maximum-cardinality bipartite matching (Hopcroft-Karp).
///
/// `adj[u]` lists the right vertices adjacent to left vertex `u`. Returns,
/// for every left vertex, its matched right vertex.
pub fn max_bipartite_matching(adj: &[Vec<usize>], n_right: usize) -> Vec<Option<usize>> {
    let n_left = adj.len();
    let mut pair_l = vec![FREE; n_left];
    let mut pair_r = vec![FREE; n_right];
    let mut dist = vec![0usize; n_left];
    let mut next = vec![0usize; n_left];
    let mut queue = Vec::with_capacity(n_left);
    let mut stack: Vec<(usize, usize)> = Vec::new();
    loop {
        queue.clear();
        for u in 0..n_left {
            if pair_l[u] == FREE {
                dist[u] = 0;
                queue.push(u);
            } else {
                dist[u] = FREE;
            }
        }
        let mut found = false;
        let mut head = 0;
        while head < queue.len() {
            let u = queue[head];
            head += 1;
            for &v in &adj[u] {
                let w = pair_r[v];
                if w == FREE {
                    found = true;
                } else if dist[w] == FREE {
                    dist[w] = dist[u] + 1;
                    queue.push(w);
                }
            }
        }
        if !found {
            break;
        }
        next.iter_mut().for_each(|n| *n = 0);
        for root in 0..n_left {
            if pair_l[root] != FREE {
                continue;
            }
            stack.clear();
            stack.push((root, FREE));
            while let Some(&(u, _)) = stack.last() {
                if next[u] == adj[u].len() {
                    dist[u] = FREE;
                    stack.pop();
                    continue;
                }
                let v = adj[u][next[u]];
                next[u] += 1;
                let w = pair_r[v];
                if w == FREE {
                    stack.last_mut().expect("non-empty").1 = v;
                    for &(a, b) in &stack {
                        pair_l[a] = b;
                        pair_r[b] = a;
                    }
                    break;
                }
                if dist[w] != FREE && dist[w] == dist[u] + 1 {
                    stack.last_mut().expect("non-empty").1 = v;
                    stack.push((w, FREE));
                }
            }
        }
    }
    pair_l.into_iter().map(|v| (v != FREE).then_some(v)).collect()
}

/// Matching radius in pixels for a tolerance given as a fraction of the
/// image diagonal.
pub fn tolerance_radius(height: usize, width: usize, tol: f64) -> f64 {
    tol * ((height * height + width * width) as f64).sqrt()
}

/// Maximum matching between two binary maps, pairing pixels at Euclidean
/// distance at most `radius`. Returns `(matched_a, matched_b)` flags in the
/// raster order of each map's set pixels.
pub fn match_maps(a: &BinaryMap, b: &BinaryMap, radius: f64) -> (Vec<bool>, Vec<bool>) {
    let (h, w) = (b.height() as isize, b.width() as isize);
    let pa = a.pixels();
    let pb = b.pixels();
    let mut index = vec![FREE; b.bits().len()];
    for (k, &(y, x)) in pb.iter().enumerate() {
        index[y * b.width() + x] = k;
    }
    let reach = radius.floor() as isize;
    let r2 = radius * radius;
    let offsets: Vec<(isize, isize)> = (-reach..=reach)
        .flat_map(|dy| (-reach..=reach).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| ((dy * dy + dx * dx) as f64) <= r2)
        .collect();
    let adj: Vec<Vec<usize>> = pa
        .iter()
        .map(|&(y, x)| {
            offsets
                .iter()
                .filter_map(|&(dy, dx)| {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h || nx >= w {
                        return None;
                    }
                    let k = index[ny as usize * b.width() + nx as usize];
                    (k != FREE).then_some(k)
                })
                .collect()
        })
        .collect();
    let pairs = max_bipartite_matching(&adj, pb.len());
    let mut matched_b = vec![false; pb.len()];
    for &v in pairs.iter().flatten() {
        matched_b[v] = true;
    }
    (pairs.iter().map(Option::is_some).collect(), matched_b)
}

/// Correspondence counts of a binary prediction against every annotator.
///
/// Each annotator is matched independently. A predicted pixel counts as
/// matched if any annotator matches it; ground-truth counts are summed over
/// annotators.
pub fn match_edges(pred: &BinaryMap, gts: &GroundTruthSet, tol: f64) -> Result<MatchCounts, EvalError> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(EvalError::Tolerance(tol));
    }
    if (pred.height(), pred.width()) != (gts.height(), gts.width()) {
        return Err(EvalError::Dimension {
            pred: (pred.height(), pred.width()),
            gt: (gts.height(), gts.width()),
        });
    }
    let radius = tolerance_radius(pred.height(), pred.width(), tol);
    let total_pred = pred.count();
    let mut pred_hit = vec![false; total_pred];
    let mut counts = MatchCounts {
        total_pred: total_pred as u64,
        ..MatchCounts::default()
    };
    for gt in gts.maps() {
        let (hit_pred, hit_gt) = match_maps(pred, gt, radius);
        for (acc, h) in pred_hit.iter_mut().zip(hit_pred) {
            *acc |= h;
        }
        counts.matched_gt += hit_gt.iter().filter(|&&h| h).count() as u64;
        counts.total_gt += hit_gt.len() as u64;
    }
    counts.matched_pred = pred_hit.iter().filter(|&&h| h).count() as u64;
    Ok(counts)
}
