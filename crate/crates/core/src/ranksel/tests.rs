use super::*;
use crate::compress::{shapes_of, LayerShape};
use crate::dataio::{split, synth_blobs, Dataset, SplitKind};
use crate::linalg::testutil::diag;
use crate::linalg::svd_full;
use crate::nn::{evaluate_accuracy, train, Model, TrainConfig};
use proptest::prelude::*;

fn rv(r: &[usize]) -> RankVector {
    RankVector::new(r.to_vec())
}

/// Smooth synthetic accuracy with distinct values and per-layer weights.
fn smooth(r: &RankVector) -> Result<f64> {
    Ok(r.iter()
        .enumerate()
        .map(|(i, &x)| ((x as f64) + 1.0).ln() * (1.0 + i as f64 * 0.1))
        .sum::<f64>()
        / 100.0)
}

/// Coarse accuracy with many ties, to exercise the tie-break keys.
fn coarse(r: &RankVector) -> Result<f64> {
    Ok((r.rank_sum() / 3) as f64 / 100.0)
}

fn toy(seed: u64) -> (Model, Dataset) {
    let ds = split(synth_blobs(4, 40, 8, seed).unwrap(), [0.5, 0.3, 0.2], seed).unwrap();
    let mut model = Model::mlp(&[8, 8, 8, 4], seed).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        batch: 16,
        ..TrainConfig::default()
    };
    train(&mut model, &ds, &cfg, None).unwrap();
    (model, ds)
}

fn full_grid(shapes: &[LayerShape]) -> Vec<Vec<usize>> {
    shapes.iter().map(|s| (1..=s.full_rank()).collect()).collect()
}

#[test]
fn descendants_examples() {
    assert_eq!(
        descendants(&rv(&[8, 8, 8]), 3),
        vec![rv(&[5, 8, 8]), rv(&[8, 5, 8]), rv(&[8, 8, 5])]
    );
    assert!(descendants(&rv(&[1, 1, 1]), 4).is_empty());
    assert_eq!(descendants(&rv(&[2, 9]), 5), vec![rv(&[1, 9]), rv(&[2, 4])]);
}

#[test]
fn rank_vector_display_and_serde() {
    let r = rv(&[3, 1, 2]);
    assert_eq!(r.to_string(), "3;1;2");
    assert_eq!(serde_json::to_string(&r).unwrap(), "[3,1,2]");
    assert_eq!(r.rank_sum(), 6);
}

#[test]
fn config_validation() {
    assert!(SearchConfig::default().validate().is_ok());
    for bad in [
        SearchConfig { c_d: 1.0, ..SearchConfig::default() },
        SearchConfig { tau: 0.5, ..SearchConfig::default() },
        SearchConfig { k: 0, ..SearchConfig::default() },
        SearchConfig { gamma: 1.0, ..SearchConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn beam_order_keys() {
    let cand = |r: &[usize], a: f64| BeamCandidate { r: rv(r), c: 0.0, a };
    let hi = cand(&[5, 5], 0.9);
    let lo = cand(&[1, 1], 0.8);
    assert_eq!(beam_order(0, &hi, &lo), Ordering::Less);
    let small = cand(&[2, 2], 0.9);
    assert_eq!(beam_order(0, &small, &hi), Ordering::Less);
    // Equal accuracy and rank sum: decided by the seeded tag, reproducibly.
    let x = cand(&[3, 1], 0.5);
    let y = cand(&[1, 3], 0.5);
    assert_ne!(beam_order(7, &x, &y), Ordering::Equal);
    assert_eq!(beam_order(7, &x, &y), beam_order(7, &x.clone(), &y.clone()));
    assert_eq!(tie_tag(7, &x.r), tie_tag(7, &rv(&[3, 1])));
}

#[test]
fn unreachable_band_is_a_search_failure() {
    // 2x2 layer: rank 1 still keeps the layer dense, so C stays 0.
    let shapes = [LayerShape::dense(2, 2)];
    let cfg = SearchConfig { c_d: 0.5, ..SearchConfig::default() };
    assert!(matches!(mbs_search(&smooth, &shapes, &cfg), Err(Error::SearchFailure { .. })));
}

#[test]
fn terminates_at_level_two_on_single_step() {
    // Two 10x10 layers; one step of 7 takes a layer to rank 3:
    // C = 1 - (3 * 20 + 100) / 200 = 0.2.
    let shapes = [LayerShape::dense(10, 10), LayerShape::dense(10, 10)];
    let cfg = SearchConfig {
        c_d: 0.25,
        tau: 0.1,
        s: 7,
        ..SearchConfig::default()
    };
    let out = mbs_run(&smooth, &shapes, &cfg).unwrap();
    assert!(out.success);
    assert_eq!(out.levels, 2);
    assert!((out.selected.c - 0.2).abs() < 1e-12);
    // Layer 1 weighs more in `smooth`, so truncating layer 0 costs less.
    assert_eq!(out.selected.r, rv(&[3, 10]));
    assert_eq!(out.evaluations, 3);
}

#[test]
fn step_shrinks_when_stuck() {
    // One 20x20 layer, C(r) = 1 - r / 10 below rank 10. Band [0.3, 0.35]
    // holds only r = 7: 20 -> 12 (s = 8) -> 8 (s = 4) -> 7 (s = 1).
    let shapes = [LayerShape::dense(20, 20)];
    let cfg = SearchConfig {
        c_d: 0.35,
        tau: 0.05,
        s: 16,
        k: 3,
        ..SearchConfig::default()
    };
    let out = mbs_run(&smooth, &shapes, &cfg).unwrap();
    assert!(out.success);
    assert_eq!(out.selected.r, rv(&[7]));
    let steps: Vec<usize> = out.trace.iter().skip(1).map(|t| t.step).collect();
    assert_eq!(steps, vec![8, 4, 1]);
}

#[test]
fn beam_of_one_with_unit_step_is_greedy() {
    let shapes = [LayerShape::dense(12, 9), LayerShape::dense(9, 10), LayerShape::dense(4, 9)];
    for oracle in [smooth as fn(&RankVector) -> Result<f64>, coarse] {
        for seed in 0..3 {
            let cfg = SearchConfig {
                c_d: 0.4,
                tau: 0.1,
                k: 1,
                s: 1,
                seed,
                ..SearchConfig::default()
            };
            let out = mbs_run(&oracle, &shapes, &cfg).unwrap();
            let beam_path: Vec<RankVector> = out
                .trace
                .iter()
                .filter(|t| t.in_beam)
                .map(|t| t.candidate.r.clone())
                .collect();
            let greedy: Vec<RankVector> = greedy_search(&oracle, &shapes, 0.4, 0.1, 1, seed)
                .unwrap()
                .into_iter()
                .map(|c| c.r)
                .collect();
            assert_eq!(beam_path, greedy);
        }
    }
}

#[test]
fn trace_csv_layout() {
    let row = TraceRow {
        level: 2,
        step: 3,
        candidate: BeamCandidate { r: rv(&[5, 8]), c: 0.25, a: 0.75 },
        in_beam: true,
    };
    assert_eq!(row.csv_row(), "2,3,5;8,0.25,0.75,1");
    assert_eq!(TraceRow::CSV_HEADER.split(',').count(), 6);
}

#[test]
fn multi_config_prefers_the_finer_step_when_the_coarse_one_fails() {
    // Frozen instance: with s = 10 the beam lands where every unit step
    // overshoots the narrow band, while s = 3 reaches it.
    let shapes = [LayerShape::dense(6, 20), LayerShape::dense(8, 6), LayerShape::dense(10, 8)];
    let base = SearchConfig {
        c_d: 0.34,
        tau: 0.004,
        ..SearchConfig::default()
    };
    let m = multi_config_search(&smooth, &shapes, &base, &DEFAULT_CONFIGS).unwrap();
    assert!(!m.runs[2].success);
    assert!(m.runs[0].success);
    assert_eq!(m.chosen, 0);
    assert_eq!(m.best, m.runs[0].selected);
    for run in m.runs.iter().filter(|o| o.success) {
        assert!(m.best.a >= run.selected.a);
    }
    let again = multi_config_search(&smooth, &shapes, &base, &DEFAULT_CONFIGS).unwrap();
    assert_eq!(again, m);
}

#[test]
fn multi_config_all_failing() {
    let shapes = [LayerShape::dense(3, 3)];
    let base = SearchConfig { c_d: 0.9, tau: 0.01, ..SearchConfig::default() };
    assert!(matches!(
        multi_config_search(&smooth, &shapes, &base, &DEFAULT_CONFIGS),
        Err(Error::SearchFailure { .. })
    ));
}

#[test]
fn brute_force_small_grid() {
    let shapes = [LayerShape::dense(8, 8), LayerShape::dense(8, 8), LayerShape::dense(8, 8)];
    let grid = vec![(1..=4).collect::<Vec<_>>(); 3];
    let best = brute_force_best(&smooth, &shapes, 0.6, 0.1, &grid).unwrap();
    // Direct enumeration.
    let mut want: Option<(f64, RankVector)> = None;
    for a in 1..=4 {
        for b in 1..=4 {
            for c in 1..=4 {
                let r = rv(&[a, b, c]);
                let ratio = compression_ratio(&shapes, &r).unwrap();
                if (0.5..=0.6).contains(&ratio) {
                    let acc = smooth(&r).unwrap();
                    if want.as_ref().is_none_or(|(w, _)| acc > *w) {
                        want = Some((acc, r));
                    }
                }
            }
        }
    }
    let (acc, r) = want.unwrap();
    assert_eq!(best.r, r);
    assert_eq!(best.a, acc);
}

#[test]
fn brute_force_empty_band() {
    // A single 8x8 layer only reaches C in {0, 0.25, 0.5, 0.75}.
    let shapes = [LayerShape::dense(8, 8)];
    let grid = vec![(1..=8).collect()];
    assert!(matches!(
        brute_force_best(&smooth, &shapes, 0.3, 0.0, &grid),
        Err(Error::SearchFailure { .. })
    ));
    let two = [LayerShape::dense(2000, 2000), LayerShape::dense(2000, 2000)];
    let huge = vec![(1..=1001).collect::<Vec<_>>(); 2];
    assert!(matches!(
        brute_force_best(&smooth, &two, 0.3, 0.0, &huge),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn energy_examples() {
    let f = svd_full(&diag(&[2.0, 1.0, 1.0])).unwrap();
    assert_eq!(ranks_for_energy(std::slice::from_ref(&f), 0.5), rv(&[1]));
    assert_eq!(ranks_for_energy(std::slice::from_ref(&f), 1.0), rv(&[3]));
    assert_eq!(ranks_for_energy(std::slice::from_ref(&f), 0.7), rv(&[2]));
}

#[test]
fn energy_baseline_lands_in_band() {
    let (model, _) = toy(1);
    let shapes = shapes_of(&model);
    let cache = FactorCache::new(&model).unwrap();
    let out = energy_baseline(&cache.factors, &shapes, 0.3, 0.05).unwrap();
    assert!(out.in_band, "{out:?}");
    assert_eq!(compression_ratio(&shapes, &out.r).unwrap(), out.c);
}

#[test]
fn truncated_accuracy_at_full_rank_is_plain_accuracy() {
    let (model, ds) = toy(2);
    let cache = FactorCache::new(&model).unwrap();
    let full = cache.full_ranks();
    assert_eq!(
        truncated_accuracy(&model, &cache, &full, &ds, SplitKind::Val).unwrap(),
        evaluate_accuracy(&model, &ds, SplitKind::Val).unwrap()
    );
    let ev = TruncationEvaluator::new(&model, &cache, &ds, SplitKind::Val, None, 0).unwrap();
    let r = rv(&[2, 3, 1]);
    assert_eq!(ev.accuracy(&r).unwrap(), ev.accuracy(&r).unwrap());
    assert!(ev.accuracy(&rv(&[9, 1, 1])).is_err());
    assert!(ev.accuracy(&rv(&[1, 1])).is_err());
}

#[test]
fn truncated_accuracy_matches_factorized_model() {
    let (model, ds) = toy(3);
    let cache = FactorCache::new(&model).unwrap();
    let r = rv(&[3, 2, 2]);
    let factorized = crate::compress::factorize_model(&model, &r).unwrap();
    assert_eq!(
        truncated_accuracy(&model, &cache, &r, &ds, SplitKind::Val).unwrap(),
        evaluate_accuracy(&factorized, &ds, SplitKind::Val).unwrap()
    );
}

#[test]
fn beam_matches_exhaustive_search_on_toy_models() {
    for seed in 0..2 {
        let (model, ds) = toy(seed);
        let shapes = shapes_of(&model);
        let cache = FactorCache::new(&model).unwrap();
        let ev = TruncationEvaluator::new(&model, &cache, &ds, SplitKind::Val, None, 0).unwrap();
        let cfg = SearchConfig {
            c_d: 0.3,
            tau: 0.05,
            k: 8,
            s: 1,
            ..SearchConfig::default()
        };
        let (r, _) = mbs_search(&ev, &shapes, &cfg).unwrap();
        let bf = brute_force_best(&ev, &shapes, 0.3, 0.05, &full_grid(&shapes)).unwrap();
        assert!((ev.accuracy(&r).unwrap() - bf.a).abs() <= 1e-9);
    }
}

#[test]
fn widening_tau_never_lowers_the_exhaustive_optimum() {
    let (model, ds) = toy(4);
    let shapes = shapes_of(&model);
    let cache = FactorCache::new(&model).unwrap();
    let ev = TruncationEvaluator::new(&model, &cache, &ds, SplitKind::Val, None, 0).unwrap();
    let grid = full_grid(&shapes);
    let mut prev = f64::NEG_INFINITY;
    for tau in [0.05, 0.1, 0.2, 0.29] {
        let b = brute_force_best(&ev, &shapes, 0.3, tau, &grid).unwrap();
        assert!(b.a >= prev);
        prev = b.a;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn beam_respects_band_and_descends(
        dims in proptest::collection::vec(3usize..16, 4),
        c_d in 0.15f64..0.7,
        tau in 0.01f64..0.08,
        k in 1usize..6,
        s in 1usize..6,
        seed in 0u64..1000,
    ) {
        let shapes: Vec<LayerShape> = dims.windows(2).map(|w| LayerShape::dense(w[1], w[0])).collect();
        let cfg = SearchConfig { c_d, tau, k, s, seed, ..SearchConfig::default() };
        prop_assume!(cfg.validate().is_ok());
        let out = match mbs_run(&coarse, &shapes, &cfg) {
            Ok(o) => o,
            Err(Error::SearchFailure { .. }) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        // Everything past the root was admitted under the cap.
        for t in out.trace.iter().skip(1) {
            prop_assert!(t.candidate.c <= c_d);
        }
        if out.success {
            prop_assert!(cfg.in_band(out.selected.c));
        }
        // Each beam member descends component-wise from some member of the
        // previous beam.
        let beams: Vec<Vec<&RankVector>> = (1..=out.levels)
            .map(|lv| out.trace.iter().filter(|t| t.level == lv && t.in_beam).map(|t| &t.candidate.r).collect())
            .collect();
        for pair in beams.windows(2) {
            for child in &pair[1] {
                prop_assert!(pair[0].iter().any(|p| p.iter().zip(child.iter()).all(|(a, b)| b <= a) && p != child));
            }
        }
        let again = mbs_run(&coarse, &shapes, &cfg).unwrap();
        prop_assert_eq!(again, out);
    }
}
