use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use flowsvc::adaptor::{adapt_timbre, timbre_residual, AdaptorParams};
use flowsvc::augment::{perturb_f0, PerturbConfig};
use flowsvc::conditioning::{assemble_content, flow_path, masked_mel, MaskPlan};
use flowsvc::config::RunConfig;
use flowsvc::encoders::nn_interp;
use flowsvc::flow::{eb_flow_loss_with_weights, eb_weights, EbWeightConfig, NetConfig, VelocityNet};
use flowsvc::metrics::logf0_pcc;
use flowsvc::nn::Params;
use flowsvc::rl::{error_rate, gaussian_kl, group_advantages, kl_penalty, policy_ratio, TokenLevel};
use flowsvc::sampler::{sample_trajectory, sigma_schedule, SamplerConfig};
use flowsvc::signal::{mix_tracks, transpose_f0, F0Contour, Waveform};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-5.0..5.0f64, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn sized_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| matrix(r, c))
}

/// Contour with an arbitrary voicing pattern and pitches in a singing range.
fn contour(max_len: usize) -> impl Strategy<Value = F0Contour> {
    prop::collection::vec(prop::option::weighted(0.7, 80.0..900.0f64), 1..=max_len)
        .prop_map(|v| F0Contour::from_hz(v.into_iter().map(|f| f.unwrap_or(0.0)).collect()).unwrap())
}

fn wave(len: usize) -> impl Strategy<Value = Waveform> {
    prop::collection::vec(-1.0..1.0f64, len).prop_map(|s| Waveform::new(s, 8000).unwrap())
}

fn tiny_net(seed: u64) -> VelocityNet {
    let cfg = NetConfig {
        hidden: 4,
        depth: 1,
        time_dim: 2,
        seed,
    };
    VelocityNet::new(2, 1, &cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn eb_weights_are_positive_with_unit_mean(
        lambda in 0.0..3.0f64,
        ramp in 0.0..=1.0f64,
        t in 0.0..=1.0f64,
        scales in prop::collection::vec(1e-4..10.0f64, 1..40),
    ) {
        let cfg = EbWeightConfig { lambda, ramp_start: ramp, channel_scales: scales.clone(), ..EbWeightConfig::default() };
        let w = eb_weights(t, scales.len(), &cfg);
        prop_assert!(w.iter().all(|&x| x > 0.0 && x.is_finite()));
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        prop_assert!((mean - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn more_emphasis_tilts_weights_towards_high_bands(
        channels in 2usize..64,
        l1 in 0.0..2.0f64,
        dl in 1e-3..2.0f64,
    ) {
        let ratio = |l: f64| {
            let w = eb_weights(0.0, channels, &EbWeightConfig::uniform(channels, l));
            w[channels - 1] / w[0]
        };
        prop_assert!(ratio(l1 + dl) > ratio(l1));
    }

    #[test]
    fn loss_ignores_observed_frames_and_vanishes_only_at_the_target(
        (pred, target, noise) in (1usize..8, 1usize..6).prop_flat_map(|(r, c)| (matrix(r, c), matrix(r, c), matrix(r, c))),
        t_m in 0.0..=1.0f64,
        t in 0.0..=1.0f64,
    ) {
        let (rows, cols) = pred.dim();
        let mask = MaskPlan::new(t_m, rows).unwrap();
        let w = eb_weights(t, cols, &EbWeightConfig::uniform(cols, 0.4));
        let loss = |p: &Array2<f64>| eb_flow_loss_with_weights(p.view(), target.view(), &mask, &w).unwrap().0.value;

        let mut observed_noise = pred.clone();
        for r in 0..mask.boundary() {
            observed_noise.row_mut(r).assign(&noise.row(r));
        }
        prop_assert_eq!(loss(&pred), loss(&observed_noise));

        prop_assert_eq!(loss(&target), 0.0);
        let differs = (mask.boundary()..rows).any(|r| pred.row(r) != target.row(r));
        prop_assert_eq!(loss(&pred) > 0.0, differs);
    }

    #[test]
    fn mask_partitions_frames(t_m in 0.0..=1.0f64, frames in 1usize..2000) {
        let m = MaskPlan::new(t_m, frames).unwrap();
        prop_assert_eq!(m.boundary(), (t_m * frames as f64).floor() as usize);
        prop_assert_eq!(m.predicted_frames(), frames - m.boundary());
        for f in 0..frames {
            prop_assert!(m.is_observed(f) != m.is_predicted(f));
        }
    }

    #[test]
    fn content_rows_come_from_exactly_one_source(
        (orig, shift) in (1usize..20, 1usize..5).prop_flat_map(|(r, c)| (matrix(r, c), matrix(r, c))),
        t_m in 0.0..=1.0f64,
    ) {
        let mask = MaskPlan::new(t_m, orig.nrows()).unwrap();
        let out = assemble_content(orig.view(), shift.view(), &mask).unwrap();
        for r in 0..orig.nrows() {
            let src = if mask.is_observed(r) { &orig } else { &shift };
            prop_assert_eq!(out.row(r), src.row(r));
        }
    }

    #[test]
    fn flow_path_hits_its_endpoints_exactly(
        (m, eps) in (1usize..10, 1usize..10).prop_flat_map(|(r, c)| (matrix(r, c), matrix(r, c))),
        t_m in 0.0..=1.0f64,
        t in 0.0..=1.0f64,
    ) {
        prop_assert_eq!(flow_path(m.view(), eps.view(), 0.0).unwrap(), m.clone());
        prop_assert_eq!(flow_path(m.view(), eps.view(), 1.0).unwrap(), eps.clone());

        // Observed rows show the clean mel whatever the time and noise.
        let mask = MaskPlan::new(t_m, m.nrows()).unwrap();
        let st = masked_mel(m.view(), &mask, t, eps.view()).unwrap();
        for r in 0..mask.boundary() {
            prop_assert_eq!(st.x_t.row(r), m.row(r));
        }
    }

    #[test]
    fn advantages_are_standardized_and_affine_invariant(
        rewards in prop::collection::vec(-10.0..10.0f64, 2..16),
        scale in 0.01..100.0f64,
        shift in -100.0..100.0f64,
    ) {
        let a = group_advantages(&rewards).unwrap();
        let n = a.len() as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let spread = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        if spread.sqrt() > 1e-6 {
            prop_assert!((a.iter().sum::<f64>() / n).abs() < 1e-9);
            prop_assert!((a.iter().map(|x| x * x).sum::<f64>() / n - 1.0).abs() < 1e-9);
            let moved: Vec<f64> = rewards.iter().map(|r| scale * r + shift).collect();
            let b = group_advantages(&moved).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-6, "{} vs {}", x, y);
            }
            let flipped: Vec<f64> = rewards.iter().map(|r| -r).collect();
            for (x, y) in a.iter().zip(group_advantages(&flipped).unwrap()) {
                prop_assert!((x + y).abs() < 1e-9);
            }
        }
        // A group that agrees carries no signal.
        let flat = vec![rewards[0]; rewards.len()];
        prop_assert!(group_advantages(&flat).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gaussian_kl_is_nonnegative_and_zero_on_the_diagonal(
        (mu, nu) in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| (matrix(r, c), matrix(r, c))),
        var in 1e-6..10.0f64,
    ) {
        prop_assert!(gaussian_kl(mu.view(), nu.view(), var) >= 0.0);
        prop_assert_eq!(gaussian_kl(mu.view(), mu.view(), var), 0.0);
    }

    #[test]
    fn noise_schedule_grows_with_time_and_scales_with_level(
        t1 in 0.0..0.999f64,
        dt in 0.0..0.5f64,
        a in 0.0..2.0f64,
        k in 0.0..4.0f64,
    ) {
        let t2 = (t1 + dt).min(0.999);
        prop_assert!(sigma_schedule(t2, a).unwrap() >= sigma_schedule(t1, a).unwrap());
        let lhs = sigma_schedule(t1, k * a).unwrap();
        let rhs = k * sigma_schedule(t1, a).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
    }

    #[test]
    fn perturbation_stays_inside_its_segments(
        c in contour(300),
        seed in any::<u64>(),
    ) {
        let cfg = PerturbConfig::default();
        let (p, report) = perturb_f0(&c, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(p.voiced(), c.voiced());

        let voiced = c.voiced_count();
        if voiced == 0 {
            prop_assert!(report.all_unvoiced);
            prop_assert_eq!(p.hz(), c.hz());
            return Ok(());
        }
        let k = report.segments.len();
        prop_assert!(k <= cfg.segments_max);
        prop_assert!(k >= cfg.segments_min.min(voiced));
        for w in report.segments.windows(2) {
            prop_assert!(w[0].end <= w[1].start, "overlap {:?}", w);
        }
        for i in 0..c.len() {
            let inside = report.segments.iter().any(|s| (s.start..s.end).contains(&i));
            if !c.voiced()[i] || !inside {
                prop_assert_eq!(p.hz()[i].to_bits(), c.hz()[i].to_bits(), "frame {}", i);
            }
        }

        let (again, report2) = perturb_f0(&c, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(again, p);
        prop_assert_eq!(report2, report);
    }

    #[test]
    fn transposition_composes(c in contour(60), a in -24i32..24, b in -24i32..24) {
        let twice = transpose_f0(&transpose_f0(&c, a), b);
        let once = transpose_f0(&c, a + b);
        prop_assert_eq!(twice.voiced(), once.voiced());
        for (x, y) in twice.hz().iter().zip(once.hz()) {
            prop_assert!((x - y).abs() <= 1e-12 * y.abs());
        }
    }

    #[test]
    fn mixing_is_linear_in_the_gain(
        (lead, other) in (1usize..400).prop_flat_map(|n| (wave(n), wave(n))),
        g1 in -2.0..2.0f64,
        g2 in -2.0..2.0f64,
    ) {
        let direct = mix_tracks(&lead, &other, g1 + g2).unwrap();
        let nested = mix_tracks(&mix_tracks(&lead, &other, g1).unwrap(), &other, g2).unwrap();
        for (x, y) in direct.samples().iter().zip(nested.samples()) {
            prop_assert!((x - y).abs() <= 8.0 * f64::EPSILON);
        }
        prop_assert_eq!(mix_tracks(&lead, &other, 0.0).unwrap(), lead);
    }

    #[test]
    fn nearest_neighbour_round_trip(f in sized_matrix(30, 4), k in 1usize..6, target in 1usize..90) {
        let up = nn_interp(f.view(), k * f.nrows()).unwrap();
        prop_assert_eq!(nn_interp(up.view(), f.nrows()).unwrap(), f.clone());
        let any = nn_interp(f.view(), target).unwrap();
        for row in any.rows() {
            prop_assert!(f.rows().into_iter().any(|r| r == row));
        }
    }

    #[test]
    fn pitch_correlation_is_symmetric_and_key_invariant(a in contour(80), b in contour(80), st in -12i32..12) {
        let b = b.resampled(a.len());
        if let Ok(r) = logf0_pcc(&a, &b) {
            prop_assert!((-100.0..=100.0).contains(&r));
            let back = logf0_pcc(&b, &a).unwrap();
            prop_assert!((r - back).abs() < 1e-9);
            let moved = logf0_pcc(&transpose_f0(&a, st), &b).unwrap();
            prop_assert!((r - moved).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_pitch_gives_a_time_constant_timbre(
        f0_dim in 1usize..6,
        timbre in prop::collection::vec(-1.0..1.0f64, 1..6),
        frames in 1usize..12,
        seed in any::<u64>(),
        a1 in 0.0..1.0f64,
        a2 in 0.0..1.0f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = AdaptorParams::new(f0_dim, timbre.len(), a1, &mut rng);
        // Leave the zero-initialized state so the residual is non-trivial.
        p.visit_mut(&mut |s| s.iter_mut().enumerate().for_each(|(i, x)| *x += 0.1 * ((i as f64) * 0.7).sin()));
        p.alpha_tau = a1;
        let row: Vec<f64> = (0..f0_dim).map(|i| i as f64 / f0_dim as f64).collect();
        let h = Array2::from_shape_fn((frames, f0_dim), |(_, c)| row[c]);
        let out = adapt_timbre(&timbre, h.view(), &p).unwrap();
        for r in 1..frames {
            prop_assert_eq!(out.row(r), out.row(0));
        }

        // Moving alpha moves each row by at most |Δα| · ‖Δe‖.
        let delta = timbre_residual(&timbre, h.view(), &p).unwrap();
        let mut q = p.clone();
        q.alpha_tau = a2;
        let other = adapt_timbre(&timbre, h.view(), &q).unwrap();
        for r in 0..frames {
            let gap = (&out.row(r) - &other.row(r)).mapv(|x| x * x).sum().sqrt();
            let bound = (a1 - a2).abs() * delta.row(r).mapv(|x| x * x).sum().sqrt();
            prop_assert!(gap <= bound * (1.0 + 1e-12) + 1e-15);
        }
    }

    #[test]
    fn error_rate_of_identical_text_is_zero(words in prop::collection::vec("[a-z]{1,6}", 0..10)) {
        let s = words.join(" ");
        prop_assert_eq!(error_rate(&s, &s, TokenLevel::Word), 0.0);
        prop_assert_eq!(error_rate(&s, &s, TokenLevel::Char), 0.0);
        if !words.is_empty() {
            prop_assert_eq!(error_rate(&s, "", TokenLevel::Word), 1.0);
        }
    }

    #[test]
    fn config_survives_a_toml_round_trip(
        seed in any::<u32>(),
        lambda in 0.0..2.0f64,
        steps in 1u64..100_000,
        group in 2usize..32,
        noise in 0.0..1.0f64,
    ) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed as u64;
        cfg.eb.lambda = lambda;
        cfg.sft.steps = steps;
        cfg.rl.group_size = group;
        cfg.sampler.noise_level = noise;
        let text = cfg.to_toml().unwrap();
        prop_assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn policy_against_itself_has_unit_ratio_and_no_penalty(
        seed in 0u64..1000,
        other in 0u64..1000,
        noise_seed in any::<u64>(),
        k in 0usize..7,
        cond in matrix(3, 1),
    ) {
        let net = tiny_net(seed);
        let cfg = SamplerConfig::default();
        let traj = sample_trajectory(&net, &cond, &cfg, Some(k), noise_seed, &mut ChaCha8Rng::seed_from_u64(noise_seed)).unwrap();
        prop_assert_eq!(policy_ratio(&net, &net, &cond, &traj).unwrap(), 1.0);
        prop_assert_eq!(kl_penalty(&net, &net, &cond, &traj).unwrap(), 0.0);
        let moved = tiny_net(other);
        prop_assert!(kl_penalty(&moved, &net, &cond, &traj).unwrap() >= 0.0);
    }
}
