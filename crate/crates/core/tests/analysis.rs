use drivenext::analysis::{
    analytic_support, block_params, count_macs, count_params, iso_complexity_blocks, receptive_field_analytic,
    receptive_field_empirical, CostOptions, FieldSize,
};
use drivenext::blocks::BlockSpec;
use drivenext::model::{build_network, variant_preset, Head, ModelConfig, PRESET_NAMES};
use proptest::prelude::*;

#[test]
fn analytic_params_equal_enumeration() {
    for name in PRESET_NAMES {
        for div in [1, 8] {
            let mut cfg = variant_preset(name).unwrap().scaled_widths(div);
            cfg.stages[2].attention_tail = 1;
            cfg.head = Head::Heatmap;
            let net = build_network::<f32>(&cfg, 0).unwrap();
            assert_eq!(count_params(&cfg), net.param_count() as u64, "{}", cfg.name);
        }
    }
}

#[test]
fn block_counts() {
    assert_eq!(block_params(&BlockSpec::drivenext(256, 128)), 328_832);
    // depthwise 3×3 conv (9·256 + 256) and its BN (2·256) on top of attention
    assert_eq!(block_params(&BlockSpec::hybrid(256)), 263_168 + 9 * 256 + 256 + 512);
}

#[test]
fn totals_increase_with_preset_size() {
    let opts = CostOptions::default();
    let totals: Vec<(u64, u64)> = PRESET_NAMES
        .iter()
        .map(|n| {
            let c = variant_preset(n).unwrap();
            (count_params(&c), count_macs(&c, 1, 256, 256, opts).unwrap().totals.macs)
        })
        .collect();
    assert!(totals.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1), "{totals:?}");
}

#[test]
fn per_stage_groups_sum_to_total() {
    let r = count_macs(&variant_preset("small").unwrap(), 2, 128, 128, CostOptions::default()).unwrap();
    assert_eq!(r.per_stage.iter().map(|g| g.macs).sum::<u64>(), r.totals.macs);
    assert_eq!(r.per_stage.iter().map(|g| g.params).sum::<u64>(), r.totals.params);
    assert_eq!(r.per_layer.iter().map(|l| l.macs).sum::<u64>(), r.totals.macs);
}

#[test]
fn full_resolution_quadruples_stages_after_the_first() {
    let opts = CostOptions::default();
    for name in PRESET_NAMES {
        let stem = variant_preset(name).unwrap();
        let full = ModelConfig {
            full_resolution: true,
            ..stem.clone()
        };
        let a = count_macs(&stem, 1, 128, 128, opts).unwrap();
        let b = count_macs(&full, 1, 128, 128, opts).unwrap();
        for (x, y) in a.stage_macs().iter().zip(b.stage_macs()).skip(1) {
            assert_eq!(y, 4 * x, "{name}");
        }
        // stage 1 blocks alone also scale by exactly 4
        let blocks = |r: &drivenext::analysis::CostReport| -> u64 {
            r.per_layer
                .iter()
                .filter(|l| l.group == "stage1" && l.id.contains("block"))
                .map(|l| l.macs)
                .sum()
        };
        assert_eq!(blocks(&b), 4 * blocks(&a), "{name}");
        assert!(a.group("stem").is_some() && b.group("stem").is_none());
    }
}

#[test]
fn small_preset_fields() {
    let rf = receptive_field_analytic(&variant_preset("small").unwrap());
    let r: Vec<FieldSize> = rf.per_stage.iter().map(|s| s.r).collect();
    assert_eq!(r, [15, 135, 279, 375].map(FieldSize::Pixels));
    assert_eq!(rf.per_stage.iter().map(|s| s.jump).collect::<Vec<_>>(), [4, 8, 16, 32]);
}

#[test]
fn measured_fields_match_on_reduced_widths() {
    for full in [false, true] {
        let mut cfg = variant_preset("tiny").unwrap().scaled_widths(16);
        cfg.full_resolution = full;
        let mut net = build_network::<f64>(&cfg, 3).unwrap();
        for s in 0..4 {
            let got = receptive_field_empirical(&mut net, 128, 128, s, 1).unwrap();
            assert_eq!(got, analytic_support(&cfg, 128, 128, s).unwrap(), "full {full} stage {s}");
        }
    }
}

#[test]
fn attention_makes_later_stages_global() {
    let mut cfg = variant_preset("tiny").unwrap();
    cfg.stages[1].attention_tail = 1;
    let rf = receptive_field_analytic(&cfg);
    assert!(matches!(rf.per_stage[0].r, FieldSize::Pixels(_)));
    assert!(rf.per_stage[1..].iter().all(|s| s.r == FieldSize::Global));
    assert_eq!(rf.final_output, FieldSize::Global);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Nothing in the ±1 rounding neighborhood of the real solution is
    /// closer to the target than the solver's pick.
    #[test]
    fn iso_solution_is_best_in_its_neighborhood(w in proptest::collection::vec(1u32..8, 4), scale in 1u64..4) {
        let base = variant_preset("small").unwrap().scaled_widths(8);
        let opts = CostOptions::default();
        let target = scale * count_macs(&base, 1, 64, 64, opts).unwrap().totals.macs;
        let weights: Vec<f64> = w.iter().map(|&x| x as f64).collect();
        let sol = iso_complexity_blocks(&base, &weights, target, 64, 64, opts).unwrap();
        let err = sol.macs.abs_diff(target);
        let mut cfg = base.clone();
        let centers: Vec<i64> = sol.real.iter().map(|x| x.round() as i64).collect();
        for d in 0..81u32 {
            let off = [d % 3, d / 3 % 3, d / 9 % 3, d / 27 % 3];
            for i in 0..4 {
                cfg.stages[i].blocks = (centers[i] + off[i] as i64 - 1).max(1) as usize;
            }
            let m = count_macs(&cfg, 1, 64, 64, opts).unwrap().totals.macs;
            prop_assert!(m.abs_diff(target) >= err);
        }
        prop_assert!(sol.relative_error() <= 0.05, "{sol:?}");
    }
}
