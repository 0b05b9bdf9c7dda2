//! Deterministic inputs shared by the benchmarks.

use candle_core::{Device, Tensor};
use frontal_core::nets::Embedder;
use frontal_core::train::TrainState;
use frontal_core::Config;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `(b, c, h, w)` tensor of smooth values in `[0, 1]`.
pub fn image(b: usize, c: usize, h: usize, w: usize) -> Tensor {
    let n = b * c * h * w;
    let v: Vec<f32> = (0..n).map(|i| 0.5 + 0.5 * ((i as f32) * 0.013).sin()).collect();
    Tensor::from_vec(v, (b, c, h, w), &Device::Cpu).expect("shape matches length")
}

/// Swirling flow of up to `mag` pixels.
pub fn flow(b: usize, h: usize, w: usize, mag: f32) -> Tensor {
    let mut v = Vec::with_capacity(b * 2 * h * w);
    for _ in 0..b {
        for ch in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    let (u, t) = (x as f32 / w as f32, y as f32 / h as f32);
                    let d = if ch == 0 { (6.0 * t).sin() } else { (6.0 * u).cos() };
                    v.push(mag * d);
                }
            }
        }
    }
    Tensor::from_vec(v, (b, 2, h, w), &Device::Cpu).expect("shape matches length")
}

/// Freshly initialized networks at `resolution`, guided filter active from step 0.
pub fn untrained_state(resolution: usize) -> TrainState {
    let cfg = Config {
        resolution,
        gfilter_warmup_steps: 0,
        ..Config::default()
    };
    let embedder = Embedder::new(resolution, 4, &mut ChaCha8Rng::seed_from_u64(0)).expect("valid resolution");
    TrainState::new(cfg, embedder).expect("valid config")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_have_requested_shapes() {
        assert_eq!(image(2, 3, 8, 4).dims(), &[2, 3, 8, 4]);
        assert_eq!(flow(1, 8, 4, 2.0).dims(), &[1, 2, 8, 4]);
        let m = flow(1, 16, 16, 2.0).abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(m <= 2.0);
        assert_eq!(untrained_state(32).cfg.gfilter_warmup_steps, 0);
    }
}
