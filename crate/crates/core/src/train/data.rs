use crate::error::{invalid, Result};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

/// Two interleaving half circles with Gaussian noise.
#[derive(Clone, Debug, PartialEq)]
pub struct MoonsDataset {
    /// `[n, 2]`
    pub points: Tensor,
    pub labels: Vec<usize>,
    pub noise_std: f64,
    pub seed: u64,
}

impl MoonsDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `idx` as a `[idx.len(), 2]` tensor plus their labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let p = self.points.data();
        let data = idx.iter().flat_map(|&i| [p[2 * i], p[2 * i + 1]]).collect();
        let t = Tensor::new(vec![idx.len(), 2], data).expect("batch shape");
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Class 0 on `(cos t, sin t)`, class 1 on `(1 − cos t, 0.5 − sin t)`,
/// `t ~ U[0, π]`; class 0 gets `⌈n/2⌉` points. Positions, noise and the final
/// shuffle use separate streams, so `noise_std = 0` with the same seed yields
/// the clean positions of the noisy set.
pub fn make_moons(n: usize, noise_std: f64, seed: u64) -> Result<MoonsDataset> {
    if n < 2 {
        return Err(invalid("make_moons needs n ≥ 2"));
    }
    if !(noise_std >= 0.0) {
        return Err(invalid(format!("noise std must be ≥ 0, got {noise_std}")));
    }
    let n0 = n.div_ceil(2);
    let mut pos = rng::stream(seed, streams::DATA_POSITIONS);
    let mut noise = rng::stream(seed, streams::DATA_NOISE);
    let mut raw = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng::uniform(&mut pos, 0.0, std::f64::consts::PI);
        // Pure-Rust sin/cos: the compiler may otherwise fuse the pair into a
        // platform sincos call whose last bit depends on the build profile.
        let (cos, sin) = (libm::cos(t), libm::sin(t));
        let (x, y, c) = if i < n0 { (cos, sin, 0) } else { (1.0 - cos, 0.5 - sin, 1) };
        let (ex, ey) = (rng::normal(&mut noise), rng::normal(&mut noise));
        raw.push((x + noise_std * ex, y + noise_std * ey, c));
    }
    let order = rng::permutation(&mut rng::stream(seed, streams::DATA_SHUFFLE), n);
    let mut points = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in order {
        let (x, y, c) = raw[i];
        points.extend([x, y]);
        labels.push(c);
    }
    Ok(MoonsDataset {
        points: Tensor::new(vec![n, 2], points)?,
        labels,
        noise_std,
        seed,
    })
}

/// Held-out companion of a training set: same size and noise, seed + 1000.
pub fn eval_split(train: &MoonsDataset) -> Result<MoonsDataset> {
    make_moons(train.len(), train.noise_std, train.seed + 1000)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_class_zero_on_unit_circle() {
        let d = make_moons(200, 0.0, 3).unwrap();
        for (p, &c) in d.points.data().chunks(2).zip(&d.labels) {
            if c == 0 {
                assert!((p[0].hypot(p[1]) - 1.0).abs() < 1e-12);
            } else {
                assert!(((1.0 - p[0]).hypot(0.5 - p[1]) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn class_split() {
        let d = make_moons(100, 0.2, 0).unwrap();
        assert_eq!(d.labels.iter().filter(|&&c| c == 0).count(), 50);
        let d = make_moons(7, 0.2, 0).unwrap();
        assert_eq!(d.labels.iter().filter(|&&c| c == 0).count(), 4);
    }

    #[test]
    fn regeneration_is_identical() {
        assert_eq!(make_moons(50, 0.3, 11).unwrap(), make_moons(50, 0.3, 11).unwrap());
        assert_ne!(make_moons(50, 0.3, 11).unwrap(), make_moons(50, 0.3, 12).unwrap());
    }

    #[test]
    fn noise_displacement_statistic() {
        let noisy = make_moons(10_000, 0.2, 7).unwrap();
        let clean = make_moons(10_000, 0.0, 7).unwrap();
        let mean: f64 = noisy
            .points
            .data()
            .chunks(2)
            .zip(clean.points.data().chunks(2))
            .map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]))
            .sum::<f64>()
            / 10_000.0;
        let want = 0.2 * (std::f64::consts::PI / 2.0).sqrt();
        assert!((mean / want - 1.0).abs() < 0.15, "{mean} vs {want}");
    }

    #[test]
    fn bad_arguments() {
        assert!(make_moons(1, 0.1, 0).is_err());
        assert!(make_moons(10, -0.1, 0).is_err());
    }
}
