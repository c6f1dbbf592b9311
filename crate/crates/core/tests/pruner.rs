use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use snp_core::graph::{build_groups, validate_plan, GroupKey, GroupKind, PrunePlan};
use snp_core::importance::{importance_table, Criterion, ImportanceTable, ScoreGroup};
use snp_core::model::{
    forward, model_to_bytes, names, preset, synth_calibration, synth_model, ModelBundle, ModelConfig,
};
use snp_core::pruner::{
    apply_mask, apply_plan, head_prune, make_plan, make_plan_with_heads, remove_heads, RatioSpec,
};
use snp_core::{Error, Tensor};

fn boosted(model: &ModelBundle, factor: f32) -> ModelBundle {
    let (cfg, tensors) = model.clone().into_parts();
    let tensors = tensors
        .into_iter()
        .map(|(n, t)| if n.contains("norm") { (n, t) } else { let s = t.scale(factor); (n, s) })
        .collect();
    ModelBundle::new(cfg, tensors).unwrap()
}

fn tiny(seed: u64) -> ModelBundle {
    boosted(&synth_model(&preset("tiny-desk").unwrap(), seed), 25.0)
}

fn random_table(model: &ModelBundle, seed: u64) -> ImportanceTable {
    let mut rng = SplitMix64::seed_from_u64(seed);
    ImportanceTable {
        fingerprint: model.fingerprint(),
        criterion: "random".into(),
        r: None,
        images: 0,
        reduction: "mean".into(),
        groups: build_groups(model.config())
            .into_iter()
            .map(|g| ScoreGroup {
                kind: g.key.kind,
                block: g.key.block,
                head: g.key.head,
                scores: (0..g.width).map(|_| rng.gen::<f64>()).collect(),
            })
            .collect(),
    }
}

fn images(cfg: &ModelConfig, count: usize, seed: u64) -> Vec<Tensor> {
    synth_calibration(count, cfg.in_channels, cfg.image_size, cfg.image_size, seed).images
}

fn max_logit_diff(a: &ModelBundle, b: &ModelBundle, imgs: &[Tensor]) -> f64 {
    imgs.iter()
        .map(|img| {
            let x = forward(a, img, false).unwrap().logits;
            let y = forward(b, img, false).unwrap().logits;
            x.data().iter().zip(y.data()).map(|(p, q)| f64::from((p - q).abs())).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

#[test]
fn zero_ratios_give_keep_all_plan_and_identical_bytes() {
    let m = tiny(1);
    let plan = make_plan(&random_table(&m, 2), &RatioSpec::default(), &m).unwrap();
    let keep_all = PrunePlan::keep_all(m.config(), &m.fingerprint());
    assert_eq!(plan.groups, keep_all.groups);
    assert_eq!(model_to_bytes(&apply_plan(&m, &plan).unwrap()), model_to_bytes(&m));
}

#[test]
fn half_qk_ratio_halves_query_width_only() {
    let m = tiny(3);
    let plan = make_plan(&random_table(&m, 4), &RatioSpec::uniform(0.5, 0.0, 0.0, 0.0), &m).unwrap();
    let p = apply_plan(&m, &plan).unwrap();
    for (o, n) in m.config().blocks.iter().zip(&p.config().blocks) {
        assert_eq!(n.qk_dim, o.qk_dim.div_ceil(2));
        assert_eq!((n.v_dim, n.ffn_hidden, n.heads), (o.v_dim, o.ffn_hidden, o.heads));
        assert_eq!(n.attn_scale, o.attn_scale);
    }
    assert_eq!(p.config().embed_dim, m.config().embed_dim);
}

#[test]
fn plans_from_tables_validate() {
    let m = tiny(5);
    let ratios = RatioSpec::uniform(0.3, 0.5, 0.7, 0.2);
    let plan = make_plan(&random_table(&m, 6), &ratios, &m).unwrap();
    assert!(validate_plan(&plan, &m).unwrap().is_empty());
    let text = plan.to_json();
    assert_eq!(PrunePlan::from_json(&text).unwrap(), plan);
}

#[test]
fn stale_or_mismatched_tables_are_rejected() {
    let m = tiny(7);
    let mut t = random_table(&m, 8);
    t.fingerprint = "0".repeat(64);
    assert!(matches!(make_plan(&t, &RatioSpec::default(), &m), Err(Error::StalePlan { .. })));
    let mut t = random_table(&m, 8);
    t.groups[0].scores.pop();
    assert!(matches!(make_plan(&t, &RatioSpec::default(), &m), Err(Error::InvalidPlan(_))));
    let mut t = random_table(&m, 8);
    t.groups.pop();
    assert!(matches!(make_plan(&t, &RatioSpec::default(), &m), Err(Error::InvalidPlan(_))));
}

#[test]
fn invalid_plans_are_not_applied() {
    let m = tiny(9);
    let mut plan = PrunePlan::keep_all(m.config(), &m.fingerprint());
    plan.group_mut(GroupKey::qk(0, 0)).unwrap().keep.pop();
    assert!(matches!(apply_plan(&m, &plan), Err(Error::InvalidPlan(_))));
    assert!(matches!(apply_mask(&m, &plan), Err(Error::InvalidPlan(_))));
}

#[test]
fn masked_scores_equal_pruned_scores() {
    let m = tiny(10);
    let plan = make_plan(&random_table(&m, 11), &RatioSpec::uniform(0.5, 0.0, 0.0, 0.0), &m).unwrap();
    let pruned = apply_plan(&m, &plan).unwrap();
    let masked = apply_mask(&m, &plan).unwrap();
    for img in images(m.config(), 3, 12) {
        let a = forward(&pruned, &img, true).unwrap().capture.unwrap();
        let b = forward(&masked, &img, true).unwrap().capture.unwrap();
        for (ba, bb) in a.blocks.iter().zip(&b.blocks) {
            for (ha, hb) in ba.heads.iter().zip(&bb.heads) {
                let scale = hb.scores.frobenius_norm();
                for (x, y) in ha.scores.data().iter().zip(hb.scores.data()) {
                    assert!(f64::from((x - y).abs()) <= 1e-5 * scale);
                }
            }
        }
    }
}

#[test]
fn masking_zeroes_producers_only() {
    let m = tiny(13);
    let plan = make_plan(&random_table(&m, 14), &RatioSpec::uniform(0.5, 0.5, 0.5, 0.0), &m).unwrap();
    let masked = apply_mask(&m, &plan).unwrap();
    let dropped_v: Vec<usize> =
        (0..16).filter(|i| !plan.group(GroupKey::value(0, 1)).unwrap().keep.contains(i)).collect();
    let v = masked.get(&names::v_w(0, 1)).unwrap();
    for &i in &dropped_v {
        assert!(v.row(i).iter().all(|&x| x == 0.0));
    }
    assert_eq!(masked.get(&names::proj_w(0)).unwrap(), m.get(&names::proj_w(0)).unwrap());
    assert_eq!(masked.get(&names::fc2_w(1)).unwrap(), m.get(&names::fc2_w(1)).unwrap());
    assert!(masked.config().residual_active.is_none());
}

#[test]
fn composition_matches_sequential_application() {
    let m = tiny(15);
    let p1 = make_plan(&random_table(&m, 16), &RatioSpec::uniform(0.25, 0.0, 0.5, 0.0), &m).unwrap();
    let mid = apply_plan(&m, &p1).unwrap();
    let p2 = make_plan(&random_table(&mid, 17), &RatioSpec::uniform(0.0, 0.5, 0.0, 0.25), &mid).unwrap();
    let twice = apply_plan(&mid, &p2).unwrap();
    let once = apply_plan(&m, &p1.compose(&p2).unwrap()).unwrap();
    assert_eq!(model_to_bytes(&twice), model_to_bytes(&once));
}

#[test]
fn dead_head_removal_keeps_logits() {
    let cfg = ModelConfig::uniform(16, 4, 3, 32, 2, 2, 16, 64, 10);
    let m = synth_model(&cfg, 18);
    let (cfg, mut t) = boosted(&m, 25.0).into_parts();
    for b in 0..2 {
        t.get_mut(&names::proj_w(b)).unwrap().zero_along(1, &(16..32).collect::<Vec<_>>());
    }
    let m = ModelBundle::new(cfg, t).unwrap();
    let pruned = head_prune(&m, &[vec![1.0, 0.0], vec![1.0, 0.0]], 0.5).unwrap();
    assert_eq!(pruned.config().blocks[0].heads, 1);
    assert!(max_logit_diff(&m, &pruned, &images(m.config(), 4, 19)) <= 1e-5);
    let same = head_prune(&m, &[vec![1.0, 0.0], vec![1.0, 0.0]], 0.0).unwrap();
    assert_eq!(model_to_bytes(&same), model_to_bytes(&m));
}

#[test]
fn head_removal_parameter_accounting() {
    let cfg = ModelConfig::uniform(16, 4, 3, 32, 1, 4, 8, 64, 10);
    let m = synth_model(&cfg, 20);
    let pruned = head_prune(&m, &[vec![4.0, 1.0, 3.0, 2.0]], 0.5).unwrap();
    assert_eq!(pruned.config().blocks[0].heads, 2);
    // Per head: q, k, v weights and biases plus its out-projection columns.
    let per_head = (3 * (8 * 32 + 8) + 32 * 8) as u64;
    assert_eq!(m.param_count() - pruned.param_count(), 2 * per_head);
    assert_eq!(pruned.get(&names::q_w(0, 1)).unwrap(), m.get(&names::q_w(0, 2)).unwrap());
    assert!(head_prune(&m, &[vec![1.0; 4]], 1.0).is_err());
}

#[test]
fn head_plans_match_their_mask() {
    let m = tiny(21);
    let table = importance_table(&m, &images(m.config(), 2, 22), Criterion::Snp, None).unwrap();
    let ratios = RatioSpec { heads: Some(0.5), ..RatioSpec::uniform(0.5, 0.25, 0.5, 0.25) };
    let plan = make_plan_with_heads(&table, &ratios, &m).unwrap();
    assert!(validate_plan(&plan, &m).unwrap().is_empty());
    let pruned = apply_plan(&m, &plan).unwrap();
    assert_eq!(pruned.config().blocks[0].heads, 1);
    let masked = apply_mask(&m, &plan).unwrap();
    assert!(max_logit_diff(&pruned, &masked, &images(m.config(), 4, 23)) <= 1e-4);
    let heads_only = remove_heads(&m, plan.head_keep.as_ref().unwrap()).unwrap();
    assert!(pruned.param_count() < heads_only.param_count());
}

#[test]
fn single_channel_groups_keep_one_filter() {
    let cfg = ModelConfig::uniform(8, 4, 3, 3, 1, 1, 3, 3, 2);
    let m = synth_model(&cfg, 24);
    let plan = make_plan(&random_table(&m, 25), &RatioSpec::uniform(0.9, 0.9, 0.9, 0.9), &m).unwrap();
    assert!(plan.groups.iter().all(|g| g.keep.len() == 1));
    let p = apply_plan(&m, &plan).unwrap();
    assert_eq!(p.config().embed_dim, 1);
}

fn ratio() -> impl Strategy<Value = f64> {
    prop::sample::select(vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pruning_equals_masking(
        seed in 0u64..1000,
        qk in ratio(),
        v in ratio(),
        ffn in ratio(),
        embed in ratio(),
    ) {
        let m = tiny(seed);
        let plan = make_plan(&random_table(&m, seed + 1), &RatioSpec::uniform(qk, v, ffn, embed), &m).unwrap();
        let pruned = apply_plan(&m, &plan).unwrap();
        let masked = apply_mask(&m, &plan).unwrap();
        let diff = max_logit_diff(&pruned, &masked, &images(m.config(), 2, seed + 2));
        prop_assert!(diff <= 1e-4, "diff {}", diff);
    }

    #[test]
    fn any_drop_shrinks_parameters(seed in 0u64..1000, kind in 0usize..4) {
        let m = tiny(seed);
        let mut r = RatioSpec::default();
        match kind {
            0 => r.qk = 0.1,
            1 => r.v = 0.1,
            2 => r.ffn = 0.1,
            _ => r.embed = 0.1,
        }
        let plan = make_plan(&random_table(&m, seed), &r, &m).unwrap();
        let groups = build_groups(m.config());
        let shrunk = plan.groups.iter().zip(&groups).any(|(g, full)| g.keep.len() < full.width);
        prop_assert!(shrunk);
        prop_assert!(apply_plan(&m, &plan).unwrap().param_count() < m.param_count());
    }
}

#[test]
fn embed_masking_sets_active_channels() {
    let m = tiny(30);
    let plan = make_plan(&random_table(&m, 31), &RatioSpec::uniform(0.0, 0.0, 0.0, 0.5), &m).unwrap();
    let masked = apply_mask(&m, &plan).unwrap();
    let keep = &plan.group(GroupKey::embed()).unwrap().keep;
    assert_eq!(masked.config().residual_active.as_ref(), Some(keep));
    let dropped: Vec<usize> = (0..32).filter(|c| !keep.contains(c)).collect();
    let pos = masked.get(names::POS).unwrap();
    for t in 0..pos.shape()[0] {
        for &c in &dropped {
            assert_eq!(pos.at(t, c), 0.0);
        }
    }
    assert!(plan.groups.iter().filter(|g| g.kind != GroupKind::EmbedResidual).all(|g| g.keep.len() == 16 || g.keep.len() == 64));
}
