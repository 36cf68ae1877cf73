use cdrec_core::corpus::{self, Token};
use cdrec_core::metrics;
use cdrec_core::rng;
use cdrec_core::sampler::{sample, SamplingPlan};
use cdrec_core::synthetic::BlockCorpus;
use cdrec_core::training::{Trainer, TrainingSet};
use cdrec_core::{collab, Denoiser, DenoiserConfig, MfConfig, NoiseSchedule, TrainConfig};
use proptest::prelude::*;

fn tiny() -> (Denoiser, TrainingSet, cdrec_core::SplitBundle) {
    let log = BlockCorpus { n_users: 10, n_items: 12, per_user: 10, ..BlockCorpus::default() }.generate().unwrap();
    let split = corpus::split_chronological(&log, (8, 1, 1)).unwrap();
    let mf = MfConfig { dim: 16, epochs: 5, ..MfConfig::default() };
    let (bundle, _) = collab::train_fallback_mf(&split.train, &mf).unwrap();
    let cfg = DenoiserConfig { dim: 16, seq_len: 10, ..DenoiserConfig::default() };
    let model = Denoiser::new(cfg, &bundle, &mut rng::stream(3, 1)).unwrap();
    let set = TrainingSet::new(&split.train, 10).unwrap();
    (model, set, split)
}

#[test]
fn training_then_evaluation_is_reproducible() {
    let run = || {
        let (model, set, split) = tiny();
        let cfg = TrainConfig { batch_size: 4, epochs: 3, ..TrainConfig::default() };
        let mut trainer = Trainer::new(model, NoiseSchedule::new(60.0), cfg).unwrap();
        let summary = trainer.fit(&set, |_, _| Ok(None)).unwrap();
        let plan = SamplingPlan::new(3, 60.0);
        let report = metrics::evaluate(
            &trainer.model,
            &set,
            &split.test.user_items(),
            &trainer.schedule,
            &plan,
            &[5, 10],
            &[0, 1],
        )
        .unwrap();
        (summary.epochs.iter().map(|e| e.loss.total).collect::<Vec<_>>(), report)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.1.seeds, vec![0, 1]);
}

#[test]
fn sampler_produces_items_only_and_counts_calls() {
    let (model, set, _) = tiny();
    let schedule = NoiseSchedule::new(60.0);
    for steps in [1, 2, 5] {
        let plan = SamplingPlan::new(steps, 60.0);
        let g = sample(&model, &set.sequences[0], &set.deviations[0], &plan, &schedule, &mut rng::stream(0, 9)).unwrap();
        assert_eq!(g.denoiser_calls, steps);
        for (out, inp) in g.state.tokens.iter().zip(&set.sequences[0].items) {
            assert_eq!(out.is_pad(), inp.is_pad());
            assert!(!out.is_mask());
        }
    }
}

proptest! {
    #[test]
    fn kernel_rows_are_distributions(t in 0.0f64..80.0, dev in -1.0f64..1.0, v in 0usize..50) {
        let s = NoiseSchedule::new(60.0);
        let row = s.transition_kernel_row(Token::Item(v), t, dev).unwrap();
        if let Some((k, _)) = row.keep {
            prop_assert_eq!(k, v);
        }
        let keep = row.keep.map_or(0.0, |(_, p)| p);
        prop_assert!((keep + row.mask - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&row.mask));
    }

    #[test]
    fn forward_sample_preserves_shape(seed in 0u64..500, t in 0.0f64..60.0) {
        let s = NoiseSchedule::new(60.0);
        let x0: Vec<Token> = (0..8).map(|i| if i < 2 { Token::Pad } else { Token::Item(i) }).collect();
        let devs = vec![0.1; 8];
        let x = s.forward_sample(&x0, t, &devs, &mut rng::stream(seed, 0));
        prop_assert_eq!(x.tokens.len(), 8);
        for (a, b) in x0.iter().zip(&x.tokens) {
            prop_assert!(b == a || (b.is_mask() && !a.is_pad()));
        }
    }
}
