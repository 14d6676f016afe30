//! Pixel-mean nearest-centroid classifier over whole clips.

use dinet::data::Clip;

pub fn centroids(train: &[Clip], k: usize) -> Vec<Vec<f64>> {
    let dim = train[0].video.numel();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for c in train {
        let a = c.action.expect("labelled training clip");
        counts[a] += 1;
        for (s, &v) in sums[a].iter_mut().zip(c.video.data()) {
            *s += v as f64;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    sums
}

pub fn accuracy(centroids: &[Vec<f64>], test: &[Clip]) -> f64 {
    let correct = test
        .iter()
        .filter(|c| {
            let dist = |m: &Vec<f64>| {
                m.iter()
                    .zip(c.video.data())
                    .map(|(a, &b)| (a - b as f64).powi(2))
                    .sum::<f64>()
            };
            let best = (0..centroids.len())
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap();
            Some(best) == c.action
        })
        .count();
    correct as f64 / test.len() as f64
}
