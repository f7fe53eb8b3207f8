#![allow(dead_code)]

use dsanet::datamodel::GtSegment;
use dsanet::inference::Proposal;
use dsanet::metrics::iou;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Pairwise statistic: positives outranking negatives, ties counted half.
pub fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut doubled = 0u64;
    let mut pairs = 0u64;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1;
                doubled += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    doubled as f64 / (2 * pairs) as f64
}

pub fn random_auc_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    loop {
        let n = rng.gen_range(2..=50);
        let discrete = rng.gen_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| if discrete { rng.gen_range(0..6) as f64 / 5.0 } else { rng.gen::<f64>() })
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            return (scores, labels);
        }
    }
}

type Key = (f64, i64);

fn best_assignment(
    k: usize,
    ranked: &[(usize, (usize, usize))],
    gts: &[Vec<(usize, usize)>],
    used: &mut Vec<Vec<bool>>,
    threshold: f64,
    current: &mut Vec<Key>,
    best: &mut Option<Vec<Key>>,
) {
    if k == ranked.len() {
        let better = match best {
            None => true,
            Some(b) => current.iter().zip(b.iter()).find(|(x, y)| x != y).is_some_and(|(x, y)| x > y),
        };
        if better {
            *best = Some(current.clone());
        }
        return;
    }
    let (v, span) = ranked[k];
    current.push((-1.0, 0));
    best_assignment(k + 1, ranked, gts, used, threshold, current, best);
    current.pop();
    for j in 0..gts[v].len() {
        let o = iou(span, gts[v][j]);
        if used[v][j] || o < threshold {
            continue;
        }
        used[v][j] = true;
        current.push((o, -(j as i64)));
        best_assignment(k + 1, ranked, gts, used, threshold, current, best);
        current.pop();
        used[v][j] = false;
    }
}

/// Enumerates every one-to-one assignment of proposals to ground truth and
/// keeps the one that is lexicographically best in rank order.
fn exhaustive_class_ap(props: &[Vec<Proposal>], gt: &[Vec<GtSegment>], class: usize, threshold: f64) -> f64 {
    let gts: Vec<Vec<(usize, usize)>> = gt
        .iter()
        .map(|v| v.iter().filter(|s| s.category == class).map(|s| (s.start, s.end)).collect())
        .collect();
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let flat: Vec<(usize, &Proposal)> = props
        .iter()
        .enumerate()
        .flat_map(|(v, ps)| ps.iter().map(move |p| (v, p)))
        .filter(|(_, p)| p.category == class)
        .collect();
    let mut ranked = vec![(0, (0, 0)); flat.len()];
    for (i, (v, p)) in flat.iter().enumerate() {
        let rank = flat.iter().filter(|(_, q)| q.confidence > p.confidence).count()
            + flat[..i].iter().filter(|(_, q)| q.confidence == p.confidence).count();
        ranked[rank] = (*v, (p.start, p.end));
    }
    let mut used: Vec<Vec<bool>> = gts.iter().map(|v| vec![false; v.len()]).collect();
    let mut best = None;
    best_assignment(0, &ranked, &gts, &mut used, threshold, &mut vec![], &mut best);
    let keys = best.unwrap_or_default();
    let mut sum = 0.0;
    for k in 0..keys.len() {
        if keys[k].0 >= 0.0 {
            let tp = keys[..=k].iter().filter(|x| x.0 >= 0.0).count();
            sum += tp as f64 / (k + 1) as f64;
        }
    }
    sum / n_gt as f64
}

pub fn exhaustive_map(props: &[Vec<Proposal>], gt: &[Vec<GtSegment>], thresholds: &[f64]) -> (Vec<f64>, f64) {
    let mut classes: Vec<usize> = gt.iter().flatten().map(|s| s.category).collect();
    classes.sort_unstable();
    classes.dedup();
    let per: Vec<f64> = thresholds
        .iter()
        .map(|&t| {
            if classes.is_empty() {
                return 0.0;
            }
            let aps: Vec<f64> = classes.iter().map(|&c| exhaustive_class_ap(props, gt, c, t)).collect();
            aps.iter().sum::<f64>() / aps.len() as f64
        })
        .collect();
    let avg = per.iter().sum::<f64>() / per.len() as f64;
    (per, avg)
}

fn interval(rng: &mut ChaCha8Rng, n: usize) -> (usize, usize) {
    let a = rng.gen_range(0..n);
    let b = rng.gen_range(0..n);
    (a.min(b), a.max(b))
}

pub fn random_map_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<Proposal>>, Vec<Vec<GtSegment>>) {
    let videos = rng.gen_range(1..=2);
    let frames = 12;
    let n_gt = rng.gen_range(1..=3);
    let n_prop = rng.gen_range(0..=5);
    let mut gt = vec![Vec::new(); videos];
    for _ in 0..n_gt {
        let (start, end) = interval(rng, frames);
        gt[rng.gen_range(0..videos)].push(GtSegment {
            start,
            end,
            category: rng.gen_range(1..=2),
        });
    }
    let mut props = vec![Vec::new(); videos];
    for _ in 0..n_prop {
        let (start, end) = interval(rng, frames);
        props[rng.gen_range(0..videos)].push(Proposal {
            start,
            end,
            category: rng.gen_range(1..=2),
            confidence: rng.gen_range(1..=4) as f64 / 4.0,
        });
    }
    (props, gt)
}
