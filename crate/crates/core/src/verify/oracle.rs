//! Brute-force reference definitions, deliberately written along a
//! different path from the production metrics.

use std::collections::VecDeque;

use crate::raster::Mask;

/// Component count by breadth-first flood fill over 8-neighbourhoods.
pub fn count_components(m: &Mask) -> usize {
    components(m).len()
}

fn components(m: &Mask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = m.dims();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if m.data[start] == 0 || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / w, i % w);
            comp.push((y, x));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if m.data[j] != 0 && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

pub fn fpi(pred: &Mask, gt: &Mask) -> f64 {
    components(pred).iter().filter(|c| c.iter().all(|&(y, x)| gt.at(y, x) == 0)).count() as f64
}

pub fn dsc(pred: &Mask, gt: &Mask) -> f64 {
    let p: Vec<usize> = (0..pred.data.len()).filter(|&i| pred.data[i] != 0).collect();
    let g: Vec<usize> = (0..gt.data.len()).filter(|&i| gt.data[i] != 0).collect();
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    let inter = p.iter().filter(|i| g.contains(i)).count();
    2.0 * inter as f64 / (p.len() + g.len()) as f64
}

/// `None` when the ground truth is empty.
pub fn sensitivity(pred: &Mask, gt: &Mask) -> Option<f64> {
    let g: Vec<usize> = (0..gt.data.len()).filter(|&i| gt.data[i] != 0).collect();
    if g.is_empty() {
        return None;
    }
    Some(g.iter().filter(|&&i| pred.data[i] != 0).count() as f64 / g.len() as f64)
}

/// Exhaustive positive/negative pair enumeration.
pub fn auc_all_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs as f64
}
