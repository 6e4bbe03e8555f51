mod common;

use common::{pareto_oracle, without_timing};
use drivenext::ablation::{
    config_id, expand_grid, parse_csv, rank_results, ratio_blocks, run_grid, write_csv, GridKind, GridSpec, Objective,
    CSV_HEADER,
};
use drivenext::analysis::{count_macs, count_params, CostOptions};
use drivenext::model::{load_document, variant_preset};
use drivenext::training::TrainRecipe;
use proptest::prelude::*;

fn quick(kind: GridKind) -> GridSpec {
    let mut s = GridSpec::new(kind);
    s.seeds = 2;
    s.input_size = 64;
    s.recipe = TrainRecipe {
        steps: 4,
        batch_size: 2,
        ..TrainRecipe::default()
    };
    s
}

#[test]
fn example_ratio_grid() {
    let base = variant_preset("small").unwrap().scaled_widths(16);
    let mut spec = quick(GridKind::Ratio);
    spec.ratios = Some(vec![vec![1.0, 1.0, 1.0, 1.0], vec![1.0, 7.0, 4.0, 1.0], vec![1.0, 4.0, 7.0, 1.0]]);
    spec.budget = Some(13);
    let recs = run_grid(&spec, &base, 3).unwrap();
    assert_eq!(recs.len(), 3);
    let mut blocks: Vec<Vec<usize>> = recs.iter().map(|r| r.blocks.clone()).collect();
    blocks.sort();
    assert_eq!(blocks, [vec![1, 4, 7, 1], vec![1, 7, 4, 1], vec![4, 3, 3, 3]]);
    for r in &recs {
        let cfg = r.config();
        assert_eq!(config_id(&cfg), r.config_id);
        assert_eq!(count_params(&cfg), r.params);
        assert_eq!(count_macs(&cfg, 1, 64, 64, CostOptions::default()).unwrap().totals.macs, r.macs);
        assert_eq!(r.seeds, 2);
        assert!(r.final_loss_std >= 0.0);
    }
    let csv = write_csv(&recs);
    let back = parse_csv(&csv).unwrap();
    assert!(recs.iter().zip(&back).all(|(a, b)| a.same_results(b)));
    let again = write_csv(&run_grid(&spec, &base, 1).unwrap());
    assert_eq!(without_timing(&csv), without_timing(&again));
    let ranked = rank_results(&back, Objective::Loss);
    let refs: Vec<_> = ranked.iter().map(|r| &r.record).collect();
    assert_eq!(ranked.iter().map(|r| r.pareto).collect::<Vec<_>>(), pareto_oracle(&refs));
}

#[test]
fn grid_section_from_document() {
    let doc = r#"{"preset": "tiny", "grid": {"kind": "attention", "attention_tails": [0, 2], "seeds": 1}}"#;
    let resolved = load_document(doc, &[]).unwrap();
    let spec = GridSpec::from_value(resolved.grid.unwrap()).unwrap();
    let cfgs = expand_grid(&spec, &resolved.model).unwrap();
    assert_eq!(cfgs.iter().map(|c| c.stages[2].attention_tail).collect::<Vec<_>>(), [0, 2]);
    let bad = serde_json::json!({"kind": "attention", "tails": [1]});
    assert!(GridSpec::from_value(bad).unwrap_err().is_config());
}

#[test]
fn invalid_generated_config_is_rejected() {
    let mut spec = quick(GridKind::Attention);
    spec.attention_tails = Some(vec![9]);
    assert!(expand_grid(&spec, &variant_preset("tiny").unwrap()).unwrap_err().is_config());
}

#[test]
fn empty_grid_writes_header_only() {
    let mut spec = quick(GridKind::Ratio);
    spec.ratios = Some(Vec::new());
    let recs = run_grid(&spec, &variant_preset("tiny").unwrap(), 1).unwrap();
    assert_eq!(write_csv(&recs), format!("{CSV_HEADER}\n"));
}

#[test]
fn expansion_is_order_stable() {
    let base = variant_preset("small").unwrap();
    for kind in [GridKind::Ratio, GridKind::StageCount, GridKind::BlockMultiplier, GridKind::Attention, GridKind::Resolution] {
        let spec = quick(kind);
        assert_eq!(expand_grid(&spec, &base).unwrap(), expand_grid(&spec, &base).unwrap());
    }
}

proptest! {
    #[test]
    fn ratio_rounding_conserves_budget(w in proptest::collection::vec(0.01f64..50.0, 2..=5), extra in 0usize..80) {
        let budget = w.len() + extra;
        let b = ratio_blocks(&w, budget).unwrap();
        prop_assert_eq!(b.iter().sum::<usize>(), budget);
        prop_assert!(b.iter().all(|&x| x >= 1));
    }

    #[test]
    fn integer_ratios_scale_exactly(k in 1usize..6) {
        prop_assert_eq!(ratio_blocks(&[1.0, 7.0, 4.0, 1.0], 13 * k).unwrap(), vec![k, 7 * k, 4 * k, k]);
    }
}
