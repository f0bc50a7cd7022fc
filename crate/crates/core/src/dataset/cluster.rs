//! Luminance histograms and k-means clustering over them.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::ops;

pub const BINS: usize = 256;
const MAX_ITERATIONS: usize = 100;

/// Normalized 256-bin histogram of the HSV value channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LumaHistogram {
    pub bins: Vec<f64>,
}

impl LumaHistogram {
    pub fn distance2(&self, other: &[f64]) -> f64 {
        self.bins.iter().zip(other).map(|(a, b)| (a - b).powi(2)).sum()
    }
}

/// Histogram of `floor(255.999 * V)` where `V` is the bright channel.
pub fn histogram(img: &ImageF) -> Result<LumaHistogram> {
    let v = match img.channels() {
        1 => img.clone(),
        _ => ops::bright_channel(img)?,
    };
    let mut bins = vec![0.0f64; BINS];
    for &x in v.data() {
        let b = ((255.999 * x.clamp(0.0, 1.0)).floor() as usize).min(BINS - 1);
        bins[b] += 1.0;
    }
    let n = v.len();
    if n > 0 {
        bins.iter_mut().for_each(|b| *b /= n as f64);
    }
    Ok(LumaHistogram { bins })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub seed: u64,
    pub centroids: Vec<LumaHistogram>,
    /// image id → cluster id
    pub assignments: BTreeMap<String, usize>,
    /// Sum of squared distances to the assigned centroid after each Lloyd
    /// iteration.
    pub inertia_trace: Vec<f64>,
    /// Directory the image ids are relative to, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_dir: Option<String>,
}

fn nearest(centroids: &[Vec<f64>], h: &LumaHistogram) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (i, h.distance2(c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

impl ClusterModel {
    /// Nearest centroid for an arbitrary histogram.
    pub fn assign(&self, h: &LumaHistogram) -> usize {
        let cents: Vec<Vec<f64>> = self.centroids.iter().map(|c| c.bins.clone()).collect();
        nearest(&cents, h).0
    }

    pub fn inertia(&self) -> f64 {
        self.inertia_trace.last().copied().unwrap_or(0.0)
    }

    pub fn members(&self, cluster: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &c)| c == cluster)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in self.assignments.values() {
            sizes[c] += 1;
        }
        sizes
    }

    /// The member whose histogram lies closest to the centroid.
    pub fn representative<'a>(
        &self,
        cluster: usize,
        histograms: &'a BTreeMap<String, LumaHistogram>,
    ) -> Option<&'a str> {
        let centroid = &self.centroids.get(cluster)?.bins;
        self.members(cluster)
            .into_iter()
            .filter_map(|id| histograms.get_key_value(id))
            .map(|(id, h)| (id.as_str(), h.distance2(centroid)))
            .fold(None, |best: Option<(&str, f64)>, cur| match best {
                Some(b) if b.1 <= cur.1 => Some(b),
                _ => Some(cur),
            })
            .map(|(id, _)| id)
    }
}

/// Lloyd's k-means under squared L2 with k-means++ seeding.
pub fn cluster(items: &[(String, LumaHistogram)], k: usize, seed: u64) -> Result<ClusterModel> {
    let n = items.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "cluster count {k} must be in [1, {n}] for {n} histograms"
        )));
    }
    let points: Vec<&LumaHistogram> = items.iter().map(|(_, h)| h).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| p.distance2(&points[chosen[0]].bins)).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(p.distance2(&points[next].bins));
        }
    }
    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].bins.clone()).collect();

    let mut labels = vec![usize::MAX; n];
    let mut inertia_trace = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (c, _) = nearest(&centroids, p);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; BINS]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(&p.bins) {
                *s += v;
            }
        }
        for c in 0..k {
            // an emptied cluster keeps its previous centroid
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        inertia_trace.push(
            points
                .iter()
                .zip(&labels)
                .map(|(p, &c)| p.distance2(&centroids[c]))
                .sum(),
        );
    }
    // final assignment against the final centroids
    for (i, p) in points.iter().enumerate() {
        labels[i] = nearest(&centroids, p).0;
    }
    let final_inertia: f64 = points
        .iter()
        .zip(&labels)
        .map(|(p, &c)| p.distance2(&centroids[c]))
        .sum();
    if inertia_trace.last() != Some(&final_inertia) {
        inertia_trace.push(final_inertia);
    }

    Ok(ClusterModel {
        k,
        seed,
        centroids: centroids.into_iter().map(|bins| LumaHistogram { bins }).collect(),
        assignments: items
            .iter()
            .zip(&labels)
            .map(|((id, _), &c)| (id.clone(), c))
            .collect(),
        inertia_trace,
        source_dir: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hist_from(bins: Vec<f64>) -> LumaHistogram {
        let s: f64 = bins.iter().sum();
        LumaHistogram {
            bins: bins.into_iter().map(|b| b / s).collect(),
        }
    }

    #[test]
    fn spikes_at_expected_bins() {
        let h = histogram(&ImageF::filled(4, 4, 3, 0.5)).unwrap();
        assert_eq!(h.bins[127], 1.0);
        let h = histogram(&ImageF::zeros(4, 4, 3)).unwrap();
        assert_eq!(h.bins[0], 1.0);
        let h = histogram(&ImageF::filled(2, 2, 3, 1.0)).unwrap();
        assert_eq!(h.bins[255], 1.0);
    }

    #[test]
    fn histogram_matches_counting_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = ImageF::from_fn(8, 8, 3, |_, _, _| rng.gen());
        let h = histogram(&img).unwrap();
        let mut counts = [0u32; 256];
        for y in 0..8 {
            for x in 0..8 {
                let v = (0..3).map(|c| img.get(y, x, c)).fold(0.0f32, f32::max);
                counts[(255.999 * v) as usize] += 1;
            }
        }
        for (b, c) in h.bins.iter().zip(counts) {
            assert_eq!(*b, c as f64 / 64.0);
        }
        assert!((h.bins.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_cluster_is_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let items: Vec<_> = (0..6)
            .map(|i| (format!("img{i}"), hist_from((0..BINS).map(|_| rng.gen::<f64>()).collect())))
            .collect();
        let m = cluster(&items, 1, 3).unwrap();
        for b in 0..BINS {
            let mean = items.iter().map(|(_, h)| h.bins[b]).sum::<f64>() / 6.0;
            assert!((m.centroids[0].bins[b] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let items: Vec<_> = (0..5)
            .map(|i| {
                let mut bins = vec![0.0; BINS];
                bins[i * 40] = 1.0;
                (format!("{i}"), LumaHistogram { bins })
            })
            .collect();
        let m = cluster(&items, 5, 0).unwrap();
        assert_eq!(m.inertia(), 0.0);
        let mut seen: Vec<_> = m.assignments.values().copied().collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn k_out_of_range() {
        let items = vec![("a".to_string(), LumaHistogram { bins: vec![0.0; BINS] })];
        assert!(cluster(&items, 0, 0).is_err());
        assert!(cluster(&items, 2, 0).is_err());
    }
}
