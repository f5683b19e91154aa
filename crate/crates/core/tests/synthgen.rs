use groundlab_core::grounding::{split_select, Indicator};
use groundlab_core::intervention::{intervene_environment, MemoryBank};
use groundlab_core::rng;
use groundlab_core::synthgen::{generate_dataset, DatasetBundle, GenConfig, OodCoupling, Sample, Split};
use groundlab_core::{Matrix, ParamStore, Tape};
use proptest::prelude::*;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn config(num_videos: usize, bias_rho: f64, seed: u64) -> GenConfig {
    GenConfig { num_videos, bias_rho, seed, ..Default::default() }
}

fn all_samples(b: &DatasetBundle) -> impl Iterator<Item = &Sample> {
    Split::ALL.into_iter().flat_map(move |s| b.split(s).iter())
}

fn contingency(samples: &[Sample], classes: usize) -> Vec<Vec<f64>> {
    let mut table = vec![vec![0.0; classes]; classes];
    for s in samples {
        table[s.video.env_cluster][s.question.answer] += 1.0;
    }
    table
}

/// Pearson statistic of an `r × c` table against row/column independence.
fn chi_square(table: &[Vec<f64>]) -> (f64, f64) {
    let n: f64 = table.iter().flatten().sum();
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..table[0].len()).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let mut stat = 0.0;
    for (i, r) in table.iter().enumerate() {
        for (j, &o) in r.iter().enumerate() {
            let e = rows[i] * cols[j] / n;
            if e > 0.0 {
                stat += (o - e).powi(2) / e;
            }
        }
    }
    let dof = ((rows.len() - 1) * (cols.len() - 1)) as f64;
    (stat, dof)
}

#[test]
fn unbiased_train_split_has_independent_environment_and_answer() {
    let b = generate_dataset(&config(4000, 0.0, 11)).unwrap();
    let (stat, dof) = chi_square(&contingency(&b.train, 4));
    let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(stat);
    assert!(p > 0.01, "chi2 {stat} on {dof} dof, p = {p}");
}

#[test]
fn biased_train_matches_the_mixture_rate() {
    let cfg = GenConfig { split_fractions: (1.0, 0.0, 0.0), ..config(10_000, 0.9, 5) };
    let b = generate_dataset(&cfg).unwrap();
    assert_eq!(b.train.len(), 10_000);
    let hits = b.train.iter().filter(|s| s.video.env_cluster == s.question.answer).count();
    let rate = hits as f64 / b.train.len() as f64;
    // 0.9 + 0.1 / 4, from the two-component mixture.
    assert!((rate - 0.925).abs() <= 0.01, "rate {rate}");
}

#[test]
fn ood_split_uses_uniform_or_inverted_coupling() {
    let cfg = GenConfig { split_fractions: (0.1, 0.0, 0.0), ..config(5000, 0.9, 2) };
    let b = generate_dataset(&cfg).unwrap();
    let rate = |b: &DatasetBundle| {
        b.test_ood.iter().filter(|s| s.video.env_cluster == s.question.answer).count() as f64 / b.test_ood.len() as f64
    };
    assert!((rate(&b) - 0.25).abs() < 0.02, "uniform rate {}", rate(&b));
    let inverted = generate_dataset(&GenConfig { ood_coupling: OodCoupling::Inverted, ..cfg }).unwrap();
    assert_eq!(rate(&inverted), 0.0);
    assert_eq!(b.mechanism, inverted.mechanism);
}

#[test]
fn generation_is_bitwise_deterministic() {
    let cfg = GenConfig { objects_per_clip: 2, distractor_sigma: 0.5, ..config(300, 0.9, 9) };
    assert_eq!(generate_dataset(&cfg).unwrap(), generate_dataset(&cfg).unwrap());
    assert_ne!(generate_dataset(&cfg).unwrap(), generate_dataset(&GenConfig { seed: 10, ..cfg }).unwrap());
}

#[test]
fn every_stored_answer_is_the_oracle_answer() {
    let b = generate_dataset(&GenConfig { distractor_sigma: 1.0, ..config(600, 0.9, 4) }).unwrap();
    for s in all_samples(&b) {
        let causal = s.video.clips.select_rows(&s.video.causal_positions());
        assert_eq!(b.mechanism.oracle_answer(&causal, &s.question).unwrap(), s.question.answer, "{}", s.video.id);
        assert!(s.video.causal_mask.iter().any(|&c| c));
    }
}

fn oracle_split(tape: &mut Tape<'_>, s: &Sample) -> groundlab_core::grounding::SceneSplit {
    let k = s.video.clips.rows();
    let mut ind = Matrix::zeros(k, 2);
    for (r, &c) in s.video.causal_mask.iter().enumerate() {
        ind.set(r, if c { 0 } else { 1 }, 1.0);
    }
    let value = tape.constant(ind);
    let clips = tape.constant(s.video.clips.clone());
    split_select(tape, clips, Indicator { value, soft: value, hard: true }).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Substituting any instance's environment clips leaves the oracle answer unchanged.
    #[test]
    fn environment_substitution_preserves_the_oracle(seed in 0u64..1000, rho in 0.0f64..1.0) {
        let b = generate_dataset(&config(120, rho, seed)).unwrap();
        let store = ParamStore::new();
        let mut r = rng::stream(seed, &[99]);
        for _ in 0..20 {
            let a = &b.train[r.random_range(0..b.train.len())];
            let donor = &b.train[r.random_range(0..b.train.len())];
            let mut clips = a.video.clips.clone();
            let env_a = a.video.environment_positions();
            let env_d = donor.video.environment_positions();
            for (i, &p) in env_a.iter().enumerate() {
                clips.row_mut(p).copy_from_slice(donor.video.clips.row(env_d[i % env_d.len()]));
            }
            let causal = clips.select_rows(&a.video.causal_positions());
            prop_assert_eq!(b.mechanism.oracle_answer(&causal, &a.question).unwrap(), a.question.answer);

            // Same check through the scene intervention and a bank filled with oracle splits.
            let mut tape = Tape::new(&store);
            let mut bank = MemoryBank::new(16).unwrap();
            let donor_split = oracle_split(&mut tape, donor);
            bank.insert_split(&donor.video.clips, &donor_split, &donor.video.id);
            let split = oracle_split(&mut tape, a);
            let entry = bank.sample(&mut r).unwrap();
            let v_star = intervene_environment(&mut tape, &split, entry).unwrap();
            let intervened = tape.value(v_star).select_rows(&a.video.causal_positions());
            prop_assert_eq!(b.mechanism.oracle_answer(&intervened, &a.question).unwrap(), a.question.answer);
        }
    }
}
