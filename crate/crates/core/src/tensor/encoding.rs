/// Output length of [`sinusoidal_encode`] for `num_freqs` frequencies.
pub fn sinusoidal_width(num_freqs: usize) -> usize {
    3 * 2 * num_freqs
}

/// Multi-frequency sine/cosine encoding of a 3-vector.
///
/// Layout is coordinate-major: for each coordinate `c` and frequency
/// `2^j` (`j = 0..num_freqs`) the pair `sin(2^j π c), cos(2^j π c)`.
/// Matches [`crate::tensor::Tape::sinusoid`] element for element.
pub fn sinusoidal_encode(v: [f64; 3], num_freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(sinusoidal_width(num_freqs));
    for c in v {
        for j in 0..num_freqs {
            let a = (1u64 << j) as f64 * std::f64::consts::PI * c;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn origin_encodes_to_sin0_cos1() {
        let e = sinusoidal_encode([0.0; 3], 10);
        assert_eq!(e.len(), 60);
        for pair in e.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
    }

    #[test]
    fn unit_x_single_frequency() {
        let e = sinusoidal_encode([1.0, 0.0, 0.0], 1);
        let want = [0.0, -1.0, 0.0, 1.0, 0.0, 1.0];
        for (a, b) in e.iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn injective_on_unit_box_sample() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f64; 3]> = (0..1000)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let enc: Vec<Vec<f64>> = pts.iter().map(|&p| sinusoidal_encode(p, 10)).collect();
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let de: f64 = enc[i].iter().zip(&enc[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let dp: f64 = (0..3).map(|k| (pts[i][k] - pts[j][k]).powi(2)).sum::<f64>().sqrt();
                assert!(de > 1e-6 || dp <= 1e-6, "collision between {i} and {j}");
            }
        }
    }
}
