use cmgen::harness::samples::{decode_samples, encode_samples};
use cmgen::model::{Architecture, Coefficients, DenoiserParams, FrameContext, Sample};
use cmgen::sampler::{SamplerConfig, SamplerKind, SamplerState};
use cmgen::schedule::{Curriculum, TimeGrid};
use cmgen::tensor::{Array, Rng};
use cmgen::training::ModelPair;
use proptest::prelude::*;

proptest! {
    #[test]
    fn grids_are_strictly_increasing_with_exact_ends(
        eps in 1e-4f64..0.1,
        span in 1.0f64..200.0,
        p in 1.0f64..10.0,
        n in 2usize..400,
    ) {
        let t_max = eps + span;
        let g = TimeGrid::build(eps, t_max, p, n).unwrap();
        let b = g.boundaries();
        prop_assert_eq!(b.len(), n);
        prop_assert_eq!(b[0], eps);
        prop_assert_eq!(b[n - 1], t_max);
        prop_assert!(b.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn curriculum_never_shrinks(s1 in 2u32..300, total in 1u64..50_000, mu0 in 0.01f64..1.0) {
        let c = Curriculum { s0: 2, s1, mu0, total_steps: total };
        let mut last = c.at(0).unwrap().0;
        prop_assert_eq!(last, 2);
        for i in 1..=20u64 {
            let (n, mu) = c.at(total * i / 20).unwrap();
            prop_assert!(n >= last && n <= s1 as usize + 1);
            prop_assert!((0.0..=1.0).contains(&mu));
            last = n;
        }
        prop_assert_eq!(last, s1 as usize + 1);
    }

    #[test]
    fn sampler_laws_normalize(
        kind in 0usize..4,
        n in 2usize..120,
        losses in prop::collection::vec((1usize..200, 0.0f64..5.0), 0..300),
        phi in 0.0f64..1.0,
    ) {
        let config = SamplerConfig { kind: SamplerKind::ALL[kind], phi, ..SamplerConfig::default() };
        let mut s = SamplerState::new(config, n).unwrap();
        for (i, loss) in losses {
            s.record_loss(1 + i % (n - 1), loss).unwrap();
        }
        let w = s.weights(n).unwrap();
        prop_assert_eq!(w.len(), n - 1);
        prop_assert!(w.iter().all(|p| *p >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ema_stays_between_its_endpoints(mu in 0.0f64..=1.0, seed in 0u64..1000) {
        let arch = Architecture { bins: 2, cond_dim: 0, n_speakers: 0, width: 4, blocks: 1, time_dim: 2 };
        let a = DenoiserParams::init(arch, &mut Rng::new(seed)).unwrap();
        let b = DenoiserParams::init(arch, &mut Rng::new(seed + 1)).unwrap();
        let mut pair = ModelPair::new(b.clone(), 0.0);
        pair.target = a.clone();
        pair.ema_update(mu).unwrap();
        for ((t, x), y) in pair.target.tensors().iter().zip(a.tensors()).zip(b.tensors()) {
            for ((t, x), y) in t.data().iter().zip(x.data()).zip(y.data()) {
                let (lo, hi) = if x < y { (x, y) } else { (y, x) };
                prop_assert!(*lo - 1e-15 <= *t && *t <= *hi + 1e-15);
            }
        }
    }

    #[test]
    fn boundary_condition_for_any_input(seed in 0u64..10_000, scale in 0.0f64..100.0) {
        let arch = Architecture { bins: 3, cond_dim: 0, n_speakers: 0, width: 8, blocks: 2, time_dim: 4 };
        let mut rng = Rng::new(seed);
        let mut params = DenoiserParams::init(arch, &mut rng).unwrap();
        let noisy: Vec<Array> = params.tensors().iter().map(|t| rng.gaussian(t.shape())).collect();
        params.set_tensors(noisy).unwrap();
        let coeffs = Coefficients::new(0.002, 0.5);
        let x = rng.gaussian(&[4, 3]).scale(scale).unwrap();
        let y = params.predict(&x, &FrameContext::empty(), 0.002, &coeffs).unwrap();
        prop_assert!(y.sub(&x).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn sample_encoding_round_trips(
        shapes in prop::collection::vec((1usize..6, 1usize..5), 0..12),
        seed in 0u64..1000,
    ) {
        let mut rng = Rng::new(seed);
        let samples: Vec<Sample> = shapes
            .iter()
            .map(|&(frames, bins)| {
                let values = (0..frames * bins).map(|_| f64::from(rng.normal() as f32)).collect();
                let valid = 1 + rng.below(frames);
                Sample::with_length(Array::new(vec![frames, bins], values).unwrap(), valid).unwrap()
            })
            .collect();
        let bytes = encode_samples(&samples).unwrap();
        prop_assert_eq!(decode_samples(&bytes).unwrap(), samples);
    }
}
