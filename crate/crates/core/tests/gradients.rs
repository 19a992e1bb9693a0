mod common;

use common::{check_fusion, check_refine, fusion_case, rel_err, H};
use promptseg::fusion::{fusion_backward, FusionParams, FusionTargets};
use promptseg::grid::{Dims, LabelMap, LogitTensor, Spacing};
use promptseg::loss::LossConfig;
use promptseg::embedding::TextEmbedding;

#[test]
fn fusion_gradients_three_classes() {
    for seed in 0..4 {
        let r = check_fusion(3, seed);
        assert!(r.max_rel < 1e-4, "seed {seed}: {}", r.worst);
    }
}

#[test]
fn fusion_gradients_fourteen_classes() {
    for seed in 10..13 {
        let r = check_fusion(14, seed);
        assert!(r.max_rel < 1e-4, "seed {seed}: {}", r.worst);
    }
}

#[test]
fn alpha_gradient_two_class_closed_form() {
    // 2 classes on 2³ without text or prior: dL/dalpha = sum_c b_c sum_v G[c, v].
    let dims = Dims::cube(2);
    let vis = LogitTensor::new(
        2,
        dims,
        Spacing::UNIT,
        (0..16).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.4).collect(),
    )
    .unwrap();
    let labels = LabelMap::new(dims, Spacing::UNIT, vec![0, 1, 1, 0, 1, 0, 0, 1]).unwrap();
    let mut p = FusionParams::zeros(2, 2, 2);
    p.b2 = vec![0.8, -0.3];
    p.alpha = 0.5;
    let t = TextEmbedding(vec![0.6, 0.8]);
    let cfg = LossConfig::default();
    let total = |p: &FusionParams| {
        fusion_backward(&t, &vis, None, FusionTargets { labels: &labels, presence: None }, &cfg, p)
            .unwrap()
            .0
            .total
    };
    let (_, g) = fusion_backward(&t, &vis, None, FusionTargets { labels: &labels, presence: None }, &cfg, &p).unwrap();
    let mut plus = p.clone();
    plus.alpha += H;
    let mut minus = p.clone();
    minus.alpha -= H;
    let numeric = (total(&plus) - total(&minus)) / (2.0 * H);
    assert!(rel_err(g.alpha, numeric) < 1e-6);
    assert_eq!(g.beta, 0.0);
}

#[test]
fn gradients_never_touch_inputs() {
    let case = fusion_case(5, 3);
    let (vis, t) = (case.vis.clone(), case.t.clone());
    let _ = check_fusion(5, 3);
    let again = fusion_case(5, 3);
    assert_eq!(again.vis, vis);
    assert_eq!(again.t, t);
}

#[test]
fn refine_gradients_small_grid() {
    for (c, seed) in [(2, 0), (3, 1), (2, 2)] {
        let r = check_refine(c, seed, Dims::cube(4), 0.0);
        assert!(r.max_rel < 1e-4, "C={c} seed {seed}: {}", r.worst);
        assert!(r.skipped * 4 < r.checked, "too many kink crossings");
    }
}

#[test]
fn refine_gradients_with_dropout() {
    let r = check_refine(3, 9, Dims::cube(5), 0.2);
    assert!(r.max_rel < 1e-4, "{}", r.worst);
}
