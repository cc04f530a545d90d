use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use volab::mechanistic::*;
use volab::models::{build_model, AttentionRecord, ForwardOptions, ModelConfig, ModelInstance};
use volab::Error;
use volab_oracles::mechanistic::{swin_reach, top_k_distances, ReachStage};
use volab_tensor::{Tape, Tensor, TensorError, Var};

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

fn tiny_cnn() -> ModelConfig {
    ModelConfig {
        stage_depths: vec![1, 1, 1, 1],
        widths: vec![2, 2, 4, 4],
        input_shape: [8, 8, 8],
        ..ModelConfig::desk_cnn3d()
    }
}

/// Wide enough that no stage's central feature is dead at initialization.
fn small_cnn() -> ModelConfig {
    ModelConfig {
        stage_depths: vec![1, 1, 1, 1],
        widths: vec![8, 8, 16, 16],
        input_shape: [16, 16, 16],
        ..ModelConfig::desk_cnn3d()
    }
}

fn half_diagonal(shape: [usize; 3]) -> f64 {
    shape.iter().map(|&e| ((e - 1) as f64).powi(2)).sum::<f64>().sqrt() / 2.0
}

// ---- ERF maps ----

#[test]
fn mean_model_gives_uniform_map_covering_the_volume() {
    let shape = [6, 8, 10];
    let x = randn(&[1, 6, 8, 10], 1);
    let g = input_gradient(&x, |_, v| v.mean()).unwrap();
    let grad: Vec<f64> = g.data().iter().map(|v| v.abs()).collect();
    let first = grad[0];
    assert!(grad.iter().all(|&v| v == first));
    let map = ErfMap::from_gradient("output", shape, grad, ERF_THRESHOLD).unwrap().with_theoretical(half_diagonal(shape));
    assert_eq!(map.erf_size, 480);
    assert!(map.mask.iter().all(|&m| m));
    assert!(map.normalized.iter().all(|&v| v == 1.0));
    for (c, e) in map.centroid.iter().zip([2.5, 3.5, 4.5]) {
        assert!((c - e).abs() < 1e-12);
    }
    assert!((map.et_ratio.unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn linear_model_with_one_large_weight_masks_a_single_voxel() {
    let shape = [5, 5, 5];
    let mut w = vec![0.001; 125];
    w[2 * 25 + 1 * 5 + 3] = 1.0;
    let wt = Tensor::from_vec(&[1, 5, 5, 5], w.clone()).unwrap();
    let x = randn(&[1, 5, 5, 5], 2);
    let g = input_gradient(&x, |t, v| v.mul(t.constant(wt.clone()))).unwrap();
    let grad: Vec<f64> = g.data().iter().map(|v| v.abs()).collect();
    let map = ErfMap::from_gradient("output", shape, grad, ERF_THRESHOLD).unwrap();
    assert_eq!(map.erf_size, 1);
    assert!(map.mask[2 * 25 + 5 + 3]);
    assert_eq!(map.centroid, [2.0, 1.0, 3.0]);
    assert_eq!(map.erf_radius, 0.0);
}

#[test]
fn threshold_is_strict() {
    let mut grad = vec![0.0; 8];
    grad[0] = 1.0;
    grad[1] = 0.01;
    grad[2] = 0.0100001;
    let map = ErfMap::from_gradient("t", [2, 2, 2], grad, 0.01).unwrap();
    assert_eq!(map.mask[..3], [true, false, true]);
    assert_eq!(map.erf_size, 2);
}

#[test]
fn zero_gradient_is_degenerate() {
    let err = ErfMap::from_gradient("stage1", [2, 2, 2], vec![0.0; 8], ERF_THRESHOLD).unwrap_err();
    assert!(matches!(err, Error::Degenerate(_)));
    assert!(ErfMap::from_gradient("t", [2, 2, 2], vec![1.0; 7], ERF_THRESHOLD).is_err());
    assert!(ErfMap::from_gradient("t", [2, 2, 2], vec![-1.0; 8], ERF_THRESHOLD).is_err());
}

/// Central output voxel of a conv-tanh-conv stack.
fn two_layer<'t>(t: &'t Tape<f64>, v: Var<'t, f64>, k1: &Tensor<f64>, k2: &Tensor<f64>) -> Result<Var<'t, f64>, TensorError> {
    let h = v.conv3d(t.constant(k1.clone()), None, [1, 1, 1], [1, 1, 1])?.tanh()?;
    h.conv3d(t.constant(k2.clone()), None, [1, 1, 1], [1, 1, 1])?.slice(2, 3, 1)?.slice(3, 3, 1)?.slice(4, 3, 1)
}

#[test]
fn two_layer_cnn_gradient_matches_finite_differences() {
    let k1 = randn(&[3, 1, 3, 3, 3], 10);
    let k2 = randn(&[2, 3, 3, 3, 3], 11);
    let x = randn(&[1, 1, 7, 7, 7], 12);
    let g = input_gradient(&x, |t, v| two_layer(t, v, &k1, &k2)).unwrap();
    let value = |x: &Tensor<f64>| {
        let t = Tape::new();
        two_layer(&t, t.constant(x.clone()), &k1, &k2).unwrap().value().sum()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut up = x.clone();
        up.data_mut()[i] += h;
        let mut down = x.clone();
        down.data_mut()[i] -= h;
        let fd = (value(&up) - value(&down)) / (2.0 * h);
        worst = worst.max((fd - g.data()[i]).abs());
    }
    let scale = g.max_abs();
    assert!(scale > 0.0);
    assert!(worst / scale < 1e-3, "relative error {}", worst / scale);
}

#[test]
fn model_erf_gradients_match_finite_differences() {
    let model = build_model(&tiny_cnn(), 5).unwrap().cast::<f64>();
    let x = randn(&[1, 1, 8, 8, 8], 6);
    let taps = vec!["stage1".to_string(), "output".to_string()];
    let maps = erf_gradients(&model, &x, &taps).unwrap();
    let target = |x: &Tensor<f64>, tap: &str| -> f64 {
        let tape = Tape::new();
        let vars = model.bind(&tape, false);
        let out = model.forward(&vars, tape.constant(x.clone()), &ForwardOptions::eval()).unwrap();
        let v = if tap == "output" {
            out.prediction
        } else {
            out.stages.iter().find(|s| s.name == tap).unwrap().central().unwrap()
        };
        v.value().sum()
    };
    let h = 1e-5;
    for (tap, g) in taps.iter().zip(&maps) {
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let mut up = x.clone();
            up.data_mut()[i] += h;
            let mut down = x.clone();
            down.data_mut()[i] -= h;
            let fd = ((target(&up, tap) - target(&down, tap)) / (2.0 * h)).abs();
            worst = worst.max((fd - g[i]).abs());
        }
        let scale = g.iter().copied().fold(0.0, f64::max);
        assert!(worst / scale < 1e-3, "{tap}: relative error {}", worst / scale);
    }
}

#[test]
fn erf_maps_average_samples_and_attach_theoretical_radius() {
    let model = build_model(&small_cnn(), 7).unwrap();
    let a = randn(&[2, 1, 16, 16, 16], 8).cast::<f32>();
    let b = randn(&[1, 1, 16, 16, 16], 9).cast::<f32>();
    let taps = vec!["stage2".to_string()];
    let maps = erf_maps(&model, &[a.clone(), b.clone()], &taps, ERF_THRESHOLD).unwrap();
    let ga = erf_gradients(&model, &a, &taps).unwrap();
    let gb = erf_gradients(&model, &b, &taps).unwrap();
    for i in 0..4096 {
        let mean = (ga[0][i] + gb[0][i]) / 3.0;
        assert!((maps[0].gradient[i] - mean).abs() <= 1e-12 * mean.abs().max(1e-30));
    }
    let rf = theoretical_rf(&model.config, "stage2").unwrap();
    assert_eq!(maps[0].theoretical_radius, Some(rf.radius));
    assert!(erf_maps(&model, &[a], &["stage9".to_string()], ERF_THRESHOLD).is_err());
}

proptest! {
    #[test]
    fn raising_the_threshold_never_adds_voxels(
        grad in prop::collection::vec(0.0f64..1.0, 27),
        t1 in 0.0f64..0.99,
        dt in 0.0f64..0.5,
    ) {
        prop_assume!(grad.iter().any(|&g| g > 0.0));
        let t2 = (t1 + dt).min(0.999);
        let lo = ErfMap::from_gradient("t", [3, 3, 3], grad.clone(), t1).unwrap();
        let hi = lo.rethreshold(t2).unwrap();
        for (a, b) in lo.mask.iter().zip(&hi.mask) {
            prop_assert!(!b || *a);
        }
        prop_assert!(hi.erf_size <= lo.erf_size);
        prop_assert!(hi.erf_radius >= 0.0);
    }

    #[test]
    fn erf_radius_is_translation_equivariant(
        weights in prop::collection::vec(0.0f64..1.0, 8),
        from in prop::array::uniform3(0usize..6),
        to in prop::array::uniform3(0usize..6),
    ) {
        prop_assume!(weights.iter().any(|&w| w > 0.01));
        let shape = [8, 8, 8];
        // a 2×2×2 block of weights placed at an offset
        let linear = |at: [usize; 3]| {
            let mut w = vec![0.0; 512];
            for (k, &v) in weights.iter().enumerate() {
                let (dz, dy, dx) = (k / 4, (k / 2) % 2, k % 2);
                w[((at[0] + dz) * 8 + at[1] + dy) * 8 + at[2] + dx] = v;
            }
            let wt = Tensor::from_vec(&[1, 8, 8, 8], w).unwrap();
            let x = Tensor::<f64>::zeros(&[1, 8, 8, 8]);
            let g = input_gradient(&x, |t, v| v.mul(t.constant(wt.clone()))).unwrap();
            ErfMap::from_gradient("t", shape, g.data().iter().map(|v| v.abs()).collect(), ERF_THRESHOLD).unwrap()
        };
        let (a, b) = (linear(from), linear(to));
        prop_assert!((a.erf_radius - b.erf_radius).abs() < 1e-9);
        for k in 0..3 {
            let shift = to[k] as f64 - from[k] as f64;
            prop_assert!((b.centroid[k] - a.centroid[k] - shift).abs() < 1e-9);
        }
    }
}

// ---- theoretical receptive fields ----

#[test]
fn receptive_field_base_cases() {
    assert_eq!(compose_rf(&[(3, 1)]), 3);
    assert_eq!(TheoreticalRf::local([1, 3, 3]).radius, 1.0);
    assert_eq!(compose_rf(&[(3, 1), (3, 1)]), 5);
    assert_eq!(TheoreticalRf::local([5, 5, 5]).radius, 2.0);
    // strides multiply the growth of later layers
    assert_eq!(compose_rf(&[(3, 2), (3, 1)]), 7);
    assert_eq!(compose_rf(&[]), 1);
}

#[test]
fn cnn_fields_grow_and_clamp_to_the_input() {
    let cfg = ModelConfig::desk_cnn3d();
    let radii: Vec<f64> = (1..=4).map(|s| theoretical_rf(&cfg, &format!("stage{s}")).unwrap().radius).collect();
    assert!(radii.windows(2).all(|w| w[0] <= w[1]));
    let s1 = theoretical_rf(&cfg, "stage1").unwrap();
    assert_eq!(s1.extent, [32, 32, 32]);
    let small = ModelConfig {
        input_shape: [64, 64, 64],
        ..cfg.clone()
    };
    // stem 3/2, pool 3/2, then two basic blocks of two 3-convs: 3 + 2·2 + 4·(2·4) = 39
    assert_eq!(theoretical_rf(&small, "stage1").unwrap().extent, [39, 39, 39]);
    assert!(theoretical_rf(&cfg, "stage5").is_err());
    let flat = theoretical_rf(&ModelConfig::desk_cnn2d(), "stage1").unwrap();
    assert_eq!(flat.extent[0], 1);
}

fn desk_swin_reach(cfg: &ModelConfig, stages: &[ReachStage]) {
    let want = swin_reach(cfg.input_shape, cfg.patch_size, stages);
    let names = ["patch_embed", "stage1", "stage2", "stage3", "stage4"];
    for (name, w) in names.iter().zip(&want) {
        let rf = theoretical_rf(cfg, name).unwrap();
        assert_eq!(rf.extent, *w, "{}: {name}", cfg.name);
    }
}

#[test]
fn desk_swin3d_field_matches_token_reachability() {
    let st = |g: usize, w: usize, s: usize| ReachStage {
        grid: [g; 3],
        window: [w; 3],
        shift: [s; 3],
        depth: 2,
    };
    desk_swin_reach(&ModelConfig::desk_swin3d(), &[st(8, 4, 2), st(4, 4, 0), st(2, 2, 0), st(1, 1, 0)]);
}

#[test]
fn desk_swin2d_field_matches_token_reachability() {
    let st = |g: usize, w: usize, s: usize| ReachStage {
        grid: [1, g, g],
        window: [1, w, w],
        shift: [0, s, s],
        depth: 2,
    };
    desk_swin_reach(&ModelConfig::desk_swin2d(), &[st(16, 4, 2), st(8, 4, 2), st(4, 4, 0), st(2, 2, 0)]);
}

#[test]
fn shifted_blocks_widen_the_swin_field_beyond_one_window() {
    let cfg = ModelConfig::desk_swin3d();
    assert_eq!(theoretical_rf(&cfg, "patch_embed").unwrap().extent, [4, 4, 4]);
    assert_eq!(theoretical_rf(&cfg, "stage1").unwrap().extent, [32, 32, 32]);
    let wide = ModelConfig {
        input_shape: [64, 64, 64],
        ..cfg
    };
    // one window of 4 patches, then the shifted block joins two windows
    assert_eq!(theoretical_rf(&wide, "stage1").unwrap().extent, [32, 32, 32]);
}

#[test]
fn vit_first_block_sees_at_least_what_the_last_cnn_stage_sees() {
    for (vit, cnn) in [
        (ModelConfig::desk_vit3d(), ModelConfig::desk_cnn3d()),
        (ModelConfig::desk_vit2d(), ModelConfig::desk_cnn2d()),
    ] {
        let v = theoretical_rf(&vit, "block0").unwrap();
        let c = theoretical_rf(&cnn, "stage4").unwrap();
        assert!(v.radius >= c.radius, "{} {} vs {} {}", vit.name, v.radius, cnn.name, c.radius);
        assert!((v.radius - half_diagonal(vit.input_shape)).abs() < 1e-12);
    }
}

#[test]
fn table4_taps_per_family() {
    assert_eq!(table4_taps(&ModelConfig::desk_cnn3d()), ["stage1", "stage2", "stage3", "stage4"]);
    assert_eq!(table4_taps(&ModelConfig::desk_swin3d()), ["stage1", "stage2", "stage3", "stage4"]);
    assert_eq!(table4_taps(&ModelConfig::desk_vit3d()), ["block0", "block0", "block1", "block1"]);
    let vit12 = ModelConfig {
        stage_depths: vec![12],
        ..ModelConfig::desk_vit3d()
    };
    assert_eq!(table4_taps(&vit12), ["block2", "block5", "block8", "block11"]);
    assert_eq!(table4_taps(&ModelConfig::desk_hybrid_lstm()), ["encoder", "aggregator"]);
    for cfg in ModelConfig::desk_presets() {
        for tap in table4_taps(&cfg).iter().chain(std::iter::once(&"output".to_string())) {
            assert!(theoretical_rf(&cfg, tap).unwrap().radius > 0.0, "{} {tap}", cfg.name);
        }
    }
}

// ---- attention distances ----

fn record(attention: Vec<f32>, heads: usize, centroids: Vec<Option<[f64; 3]>>) -> AttentionRecord {
    let l = centroids.len();
    AttentionRecord {
        layer: "block0".into(),
        sample: 0,
        heads,
        attention: Tensor::from_vec(&[heads, l, l], attention).unwrap(),
        centroids,
    }
}

#[test]
fn single_token_has_no_distances() {
    let r = record(vec![1.0], 1, vec![Some([0.0; 3])]);
    assert!(attended_pairs(&[r.clone()], DistanceOptions::default()).unwrap().is_empty());
    assert!(matches!(attention_distance(&[r], DistanceOptions::default()), Err(Error::Undefined(_))));
}

#[test]
fn mutual_attention_three_voxels_apart() {
    let r = record(vec![0.2, 0.8, 0.8, 0.2], 1, vec![Some([0.0, 0.0, 0.0]), Some([0.0, 3.0, 0.0])]);
    let pairs = attended_pairs(&[r.clone()], DistanceOptions::default()).unwrap();
    assert_eq!(pairs.len(), 2);
    assert!(pairs.iter().all(|p| p.distance == 3.0));
    let s = attention_distance(&[r], DistanceOptions::default()).unwrap();
    assert_eq!((s.mean, s.sd, s.median, s.max, s.pct_gt20), (3.0, 0.0, 3.0, 3.0, 0.0));
}

#[test]
fn class_token_is_neither_query_nor_target() {
    // the CLS column carries most of the weight but has no centroid
    let a = vec![
        0.4, 0.3, 0.3, //
        0.9, 0.05, 0.05, //
        0.9, 0.05, 0.05,
    ];
    let r = record(a, 1, vec![None, Some([0.0; 3]), Some([4.0, 0.0, 0.0])]);
    let pairs = attended_pairs(&[r], DistanceOptions::default()).unwrap();
    assert_eq!(pairs.len(), 2);
    assert!(pairs.iter().all(|p| p.distance == 4.0));
}

#[test]
fn missing_centroids_are_an_error() {
    let r = record(vec![0.5, 0.5, 0.5, 0.5], 1, vec![None, None]);
    assert!(attended_pairs(&[r], DistanceOptions::default()).is_err());
    let mut short = record(vec![1.0], 1, vec![Some([0.0; 3])]);
    short.centroids.clear();
    assert!(attended_pairs(&[short], DistanceOptions::default()).is_err());
    let r = record(vec![1.0], 1, vec![Some([0.0; 3])]);
    assert!(attended_pairs(&[r], DistanceOptions { k: 0, include_self: false }).is_err());
}

#[test]
fn identity_attention_with_self_pairs_gives_zero_distances() {
    let l = 7;
    let mut a = vec![0.0f32; 2 * l * l];
    for h in 0..2 {
        for i in 0..l {
            a[(h * l + i) * l + i] = 1.0;
        }
    }
    let cents = (0..l).map(|i| Some([i as f64, 2.0 * i as f64, 0.0])).collect();
    let r = record(a, 2, cents);
    let with_self = DistanceOptions { k: TOP_K, include_self: true };
    let pairs = attended_pairs(&[r.clone()], with_self).unwrap();
    assert_eq!(pairs.len(), 2 * l);
    assert!(pairs.iter().all(|p| p.distance == 0.0));
    assert!(attended_pairs(&[r], DistanceOptions::default()).unwrap().is_empty());
}

#[test]
fn long_range_share_is_attention_weighted() {
    let a = vec![
        0.0, 0.75, 0.25, //
        1.0, 0.0, 0.0, //
        1.0, 0.0, 0.0,
    ];
    let r = record(a, 1, vec![Some([0.0; 3]), Some([30.0, 0.0, 0.0]), Some([5.0, 0.0, 0.0])]);
    let s = attention_distance(&[r], DistanceOptions::default()).unwrap();
    // pairs: 0→1 (30, 0.75), 0→2 (5, 0.25), 1→0 (30, 1), 2→0 (5, 1)
    assert_eq!(s.count, 4);
    assert!((s.pct_gt20 - 1.75 / 3.0).abs() < 1e-7);
    assert_eq!(s.median, 17.5);
    assert_eq!(s.max, 30.0);
    let sd = (4.0 * 12.5f64.powi(2) / 3.0).sqrt();
    assert!((s.sd - sd).abs() < 1e-12);
}

#[test]
fn binned_distances_follow_true_labels() {
    let r = record(vec![0.2, 0.8, 0.8, 0.2], 1, vec![Some([0.0; 3]), Some([0.0, 3.0, 4.0])]);
    let mut b = BinnedDistances::default();
    b.add(0.1, &[r.clone()], DistanceOptions::default()).unwrap();
    b.add(0.9, &[r.clone(), r.clone()], DistanceOptions::default()).unwrap();
    let (per, all) = b.stats().unwrap();
    assert_eq!(per[0].unwrap().count, 2);
    assert!(per[1].is_none());
    assert_eq!(per[2].unwrap().count, 4);
    assert_eq!(all.count, 6);
    assert_eq!(all.mean, 5.0);
    assert!(b.add(1.5, &[r], DistanceOptions::default()).is_err());
}

fn random_attention(l: usize, heads: usize, rng: &mut ChaCha8Rng, sparse: bool) -> Vec<f32> {
    let mut a = Vec::new();
    for _ in 0..heads * l {
        let row: Vec<f64> = (0..l)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                if sparse && z < -0.5 {
                    0.0
                } else {
                    z.exp()
                }
            })
            .collect();
        let s: f64 = row.iter().sum::<f64>().max(1e-12);
        a.extend(row.iter().map(|v| (v / s) as f32));
    }
    a
}

#[test]
fn top_k_matches_sort_and_select_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..64 {
        let l = 6;
        let heads = 1 + case % 3;
        let cls = case % 2 == 0;
        let cents: Vec<Option<[f64; 3]>> = (0..l)
            .map(|i| {
                (!(cls && i == 0)).then(|| [0, 1, 2].map(|_| { let z: f64 = StandardNormal.sample(&mut rng); 10.0 * z }))
            })
            .collect();
        let att = random_attention(l, heads, &mut rng, case % 4 == 1);
        for k in [1, 3, 5, 8] {
            for include_self in [false, true] {
                let opts = DistanceOptions { k, include_self };
                let got = attended_pairs(&[record(att.clone(), heads, cents.clone())], opts).unwrap();
                let mut want = Vec::new();
                for h in 0..heads {
                    let head: Vec<f64> = att[h * l * l..(h + 1) * l * l].iter().map(|&v| f64::from(v)).collect();
                    want.extend(top_k_distances(&head, &cents, k, include_self));
                }
                let mut got: Vec<(f64, f64)> = got.iter().map(|p| (p.distance, p.weight)).collect();
                got.sort_by(|a, b| a.partial_cmp(b).unwrap());
                want.sort_by(|a, b| a.partial_cmp(b).unwrap());
                assert_eq!(got.len(), want.len(), "case {case} k {k}");
                for (g, w) in got.iter().zip(&want) {
                    assert!((g.0 - w.0).abs() < 1e-5 && (g.1 - w.1).abs() < 1e-5, "case {case}: {g:?} vs {w:?}");
                }
            }
        }
    }
}

// ---- CKA ----

fn dump(model: &str, layer: &str, x: &Tensor<f64>) -> ActivationDump {
    let s = x.shape();
    ActivationDump::new(model, layer, s[0], s[1], x.data().to_vec()).unwrap()
}

fn matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            for j in 0..m {
                out[i * m + j] += a.data()[i * k + p] * b.data()[p * m + j];
            }
        }
    }
    Tensor::from_vec(&[n, m], out).unwrap()
}

/// Orthogonal matrix by Gram–Schmidt on a Gaussian one.
fn orthogonal(d: usize, seed: u64) -> Tensor<f64> {
    let g = randn(&[d, d], seed);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for j in 0..d {
        let mut v: Vec<f64> = (0..d).map(|i| g.data()[i * d + j]).collect();
        for _ in 0..2 {
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        cols.push(v.into_iter().map(|a| a / norm).collect());
    }
    let mut q = vec![0.0; d * d];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..d {
            q[i * d + j] = c[i];
        }
    }
    Tensor::from_vec(&[d, d], q).unwrap()
}

#[test]
fn cka_of_a_matrix_with_itself_is_one() {
    for seed in 0..5 {
        let x = randn(&[40, 12], seed);
        let v = cka_pair(&dump("m", "a", &x), &dump("m", "b", &x)).unwrap();
        assert!((v - 1.0).abs() < 1e-10, "{v}");
    }
}

#[test]
fn cka_is_invariant_to_rotation_and_isotropic_scaling() {
    let x = randn(&[50, 16], 3);
    let q = orthogonal(16, 4);
    let xq = matmul(&x, &q);
    let dx = dump("m", "x", &x);
    assert!((cka_pair(&dx, &dump("m", "xq", &xq)).unwrap() - 1.0).abs() < 1e-8);
    for c in [-3.0, 1e-3, 250.0] {
        let xc = x.map(|v| c * v);
        assert!((cka_pair(&dx, &dump("m", "xc", &xc)).unwrap() - 1.0).abs() < 1e-8);
        let xcq = xq.map(|v| c * v);
        assert!((cka_pair(&dx, &dump("m", "xcq", &xcq)).unwrap() - 1.0).abs() < 1e-8);
    }
    // invariant to per-column offsets through centering
    let shifted = Tensor::from_vec(&[50, 16], x.data().iter().enumerate().map(|(i, v)| v + (i % 16) as f64).collect()).unwrap();
    assert!((cka_pair(&dx, &dump("m", "s", &shifted)).unwrap() - 1.0).abs() < 1e-8);
}

#[test]
fn cka_below_one_for_anisotropic_maps() {
    // Y = XA with A full rank but not a scaled rotation
    let x = randn(&[60, 4], 5);
    let a = Tensor::from_vec(&[4, 4], vec![5.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.2]).unwrap();
    let v = cka_pair(&dump("m", "x", &x), &dump("m", "y", &matmul(&x, &a))).unwrap();
    assert!(v < 0.99, "{v}");
    // and exactly 1 once A is orthogonal up to scale
    let v = cka_pair(&dump("m", "x", &x), &dump("m", "y", &matmul(&x, &orthogonal(4, 1).map(|v| 2.0 * v)))).unwrap();
    assert!((v - 1.0).abs() < 1e-10);
}

#[test]
fn cka_preconditions() {
    let x = randn(&[10, 3], 1);
    let y = randn(&[9, 3], 2);
    assert!(matches!(cka_pair(&dump("m", "x", &x), &dump("m", "y", &y)), Err(Error::Dimension(_))));
    let one = randn(&[1, 3], 3);
    assert!(cka_pair(&dump("m", "x", &one), &dump("m", "y", &one)).is_err());
    let constant = Tensor::from_vec(&[10, 3], vec![0.7; 30]).unwrap();
    assert!(matches!(cka_pair(&dump("m", "x", &x), &dump("m", "c", &constant)), Err(Error::Degenerate(_))));
    assert!(ActivationDump::new("m", "x", 2, 2, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
    assert!(ActivationDump::new("m", "x", 2, 2, vec![0.0; 3]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn cka_lies_in_the_unit_interval(n in 2usize..12, dx in 1usize..6, dy in 1usize..6, seed in 0u64..1000) {
        let x = randn(&[n, dx], seed);
        let y = randn(&[n, dy], seed + 1);
        let v = cka_pair(&dump("m", "x", &x), &dump("m", "y", &y)).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        let w = cka_pair(&dump("m", "y", &y), &dump("m", "x", &x)).unwrap();
        prop_assert!((v - w).abs() < 1e-12);
    }
}

/// Linear CKA of independent Gaussian features, one draw per seed.
fn null_draw(seed: u64) -> f64 {
    let x = randn(&[200, 50], 2 * seed);
    let y = randn(&[200, 50], 2 * seed + 1);
    cka_pair(&dump("m", "x", &x), &dump("m", "y", &y)).unwrap()
}

fn percentile_99(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let pos = 0.99 * (v.len() - 1) as f64;
    let (lo, frac) = (pos.floor() as usize, pos.fract());
    v[lo] + frac * (v[(lo + 1).min(v.len() - 1)] - v[lo])
}

#[test]
fn independent_features_fall_below_the_null_99th_percentile() {
    let null: Vec<f64> = (0..1000).map(null_draw).collect();
    let threshold = percentile_99(null.clone());
    // fresh draws, disjoint seeds from the null sample
    let fresh: Vec<f64> = (5000..5020).map(null_draw).collect();
    let below = fresh.iter().filter(|&&v| v < threshold).count();
    assert!(below >= 18, "{below}/20 below {threshold}");
    // the null centres near D / (N + D) = 0.2 for N = 200, D = 50
    let mean = null.iter().sum::<f64>() / null.len() as f64;
    assert!((mean - 0.2).abs() < 0.01, "null mean {mean}");
}

/// A fixed 0.15 bound cannot hold: the null mean of linear CKA for
/// independent N = 200, D = 50 Gaussian features is about D / (N + D) = 0.2.
#[test]
#[ignore = "unattainable: independent-feature CKA centres near 0.2 at N = 200, D = 50"]
fn independent_features_fall_below_fixed_bound() {
    for seed in 0..20 {
        let v = null_draw(10_000 + seed);
        assert!(v < 0.15, "{v}");
    }
}

/// Linear CKA equals 1 for Y = XA only when A is a scaled orthogonal map,
/// so the general full-rank form fails by construction.
#[test]
#[ignore = "unattainable: linear CKA is not invariant to anisotropic invertible maps"]
fn cka_is_one_for_any_full_rank_map() {
    let x = randn(&[60, 4], 5);
    let a = randn(&[4, 4], 6);
    let v = cka_pair(&dump("m", "x", &x), &dump("m", "y", &matmul(&x, &a))).unwrap();
    assert!((v - 1.0).abs() < 1e-8, "{v}");
}

fn stage_dumps(model: &ModelInstance, id: &str, inputs: &[Tensor<f32>]) -> Vec<ActivationDump> {
    collect_activations(model, id, inputs).unwrap()
}

#[test]
fn intra_model_matrix_is_symmetric_with_unit_diagonal() {
    let model = build_model(&tiny_cnn(), 1).unwrap();
    let inputs = [randn(&[6, 1, 8, 8, 8], 2).cast::<f32>(), randn(&[4, 1, 8, 8, 8], 3).cast::<f32>()];
    let dumps = stage_dumps(&model, "cnn", &inputs);
    assert_eq!(dumps.len(), 4);
    assert!(dumps.iter().all(|d| d.n == 10));
    let m = cka_matrix(&dumps, CkaMode::IntraModel).unwrap();
    assert_eq!(m.rows, ["stage1", "stage2", "stage3", "stage4"]);
    for i in 0..4 {
        assert!((m.get(i, i) - 1.0).abs() < 1e-6);
        for j in 0..4 {
            assert_eq!(m.get(i, j), m.get(j, i));
            assert!((0.0..=1.0).contains(&m.get(i, j)));
        }
    }
    // mixing models is only meaningful in inter-model mode
    let other = stage_dumps(&build_model(&tiny_cnn(), 2).unwrap(), "cnn_b", &inputs);
    assert!(cka_matrix(&[dumps[0].clone(), other[0].clone()], CkaMode::IntraModel).is_err());
    let short = stage_dumps(&model, "cnn", &inputs[..1]);
    assert!(cka_matrix(&[dumps[0].clone(), short[1].clone()], CkaMode::IntraModel).is_err());
}

#[test]
fn inter_model_matrices_average_over_folds() {
    let inputs = [randn(&[8, 1, 8, 8, 8], 9).cast::<f32>()];
    let vit = ModelConfig {
        input_shape: [8, 8, 8],
        patch_size: [4, 4, 4],
        ..ModelConfig::desk_vit3d()
    };
    let swin = ModelConfig {
        input_shape: [8, 8, 8],
        patch_size: [2, 2, 2],
        window_size: [2, 2, 2],
        ..ModelConfig::desk_swin3d()
    };
    let configs = [("cnn", tiny_cnn()), ("vit", vit), ("swin", swin)];
    let fold = |seed: u64| {
        let last: Vec<ActivationDump> = configs
            .iter()
            .map(|(id, cfg)| stage_dumps(&build_model(cfg, seed).unwrap(), id, &inputs).pop().unwrap())
            .collect();
        cka_matrix(&last, CkaMode::InterModel).unwrap()
    };
    let (a, b) = (fold(1), fold(2));
    assert_eq!(a.rows, ["cnn", "vit", "swin"]);
    let avg = CkaMatrix::average(&[a.clone(), b.clone()]).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(avg.get(i, j), (a.get(i, j) + b.get(i, j)) / 2.0);
            assert_eq!(avg.get(i, j), avg.get(j, i));
        }
        assert!((avg.get(i, i) - 1.0).abs() < 1e-6);
    }
    let mut renamed = b;
    renamed.rows[0] = "other".into();
    assert!(CkaMatrix::average(&[a, renamed]).is_err());
    assert!(CkaMatrix::average(&[]).is_err());
}

#[test]
fn cka_matrix_csv_round_trip() {
    let x = randn(&[12, 3], 1);
    let y = randn(&[12, 5], 2);
    let m = cka_matrix(&[dump("m", "a", &x), dump("m", "b", &y)], CkaMode::IntraModel).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cka.csv");
    m.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("id,a,b\na,"));
    assert_eq!(CkaMatrix::read_csv(&path).unwrap(), m);
    let cross = cka_cross(&[dump("m", "a", &x)], &[dump("m", "a", &x), dump("m", "b", &y)], CkaMode::IntraModel).unwrap();
    assert_eq!(cross.values, m.values[..2]);
}

// ---- dumps ----

#[test]
fn activation_dump_round_trip() {
    let x = randn(&[5, 7], 1);
    let y = randn(&[5, 2], 2);
    let dumps = vec![dump("vit3d", "block0", &x), dump("vit3d", "block1", &y)];
    let mut bytes = Vec::new();
    write_dumps_to(&mut bytes, &dumps).unwrap();
    assert_eq!(&bytes[..4], b"ADMP");
    let back = read_dumps_from(&bytes[..]).unwrap();
    assert_eq!(back.len(), 2);
    for (a, b) in dumps.iter().zip(&back) {
        assert_eq!((a.model.as_str(), a.layer.as_str(), a.n, a.d), (b.model.as_str(), b.layer.as_str(), b.n, b.d));
        for (u, v) in a.data.iter().zip(&b.data) {
            assert_eq!(*u as f32 as f64, *v);
        }
    }
    assert!(read_dumps_from(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(read_dumps_from(&bad[..]).is_err());
    let mixed = vec![dump("a", "x", &x), dump("b", "x", &x)];
    assert!(write_dumps_to(Vec::new(), &mixed).is_err());
}

#[test]
fn centroid_sidecar_lists_each_layer_once() {
    let model = build_model(&ModelConfig::desk_vit2d(), 1).unwrap();
    let x = randn(&[2, 1, 1, 32, 32], 2).cast::<f32>();
    let tape = Tape::new();
    let vars = model.bind(&tape, false);
    let out = model.forward(&vars, tape.constant(x), &ForwardOptions::recording()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("centroids.csv");
    write_centroids(&path, &out.attention).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with(&format!("{CENTROID_HEADER}\n")));
    let rows = read_centroids(&path).unwrap();
    let l = out.attention[0].centroids.len();
    assert_eq!(rows.len(), 2 * l);
    assert!(rows[0].z.is_none());
    assert!(rows[1..l].iter().all(|r| r.z.is_some() && r.layer == "block0"));
}

// ---- reports ----

#[test]
fn erf_report_fills_four_stage_radii_for_a_cnn() {
    let model = build_model(&small_cnn(), 3).unwrap();
    let x = randn(&[3, 1, 16, 16, 16], 4).cast::<f32>();
    let (row, maps) = erf_report(&model, "cnn3d", &[x.clone()], None).unwrap();
    assert_eq!(maps.len(), 4);
    assert_eq!(row.dim, 3);
    for (r, m) in [row.stage1, row.stage2, row.stage3, row.stage4].iter().zip(&maps) {
        assert_eq!(*r, Some(m.erf_radius));
    }
    assert_eq!(row.et_ratio, maps[3].et_ratio);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("table4.csv");
    write_table4(&path, &[row.clone()]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), TABLE4_HEADER);
    assert_eq!(read_table4(&path).unwrap(), [row]);
    let custom = erf_report(&model, "cnn3d", &[x.clone()], Some(&["stage2".to_string(), "output".to_string()])).unwrap().0;
    assert_eq!((custom.stage1, custom.stage3), (Some(maps[1].erf_radius), None));
    assert!(erf_report(&model, "cnn3d", &[x], Some(&[])).is_err());
    let map_path = dir.path().join("erf.csv");
    write_erf_map(&map_path, &maps[0]).unwrap();
    let text = std::fs::read_to_string(&map_path).unwrap();
    assert_eq!(text.lines().count(), 4097);
    assert!(text.starts_with("z,y,x,gradient,normalized,mask\n"));
}

#[test]
fn attention_report_on_a_cnn_is_refused() {
    let model = build_model(&tiny_cnn(), 3).unwrap();
    let x = randn(&[1, 1, 8, 8, 8], 4).cast::<f32>();
    let err = attention_report(&model, "cnn3d", &[x], &[0.1], DistanceOptions::default()).unwrap_err();
    assert!(err.to_string().contains("model has no attention layers"));
    let lstm = build_model(&ModelConfig::desk_hybrid_lstm(), 1).unwrap();
    let x = Tensor::<f32>::zeros(&lstm.config.input_shape.iter().fold(vec![1, 1], |mut v, &d| {
        v.push(d);
        v
    }));
    assert!(attention_report(&lstm, "lstm", &[x], &[0.1], DistanceOptions::default()).is_err());
}

#[test]
fn attention_report_rows_per_risk_bin() {
    let model = build_model(&ModelConfig::desk_vit3d(), 3).unwrap();
    let x = randn(&[3, 1, 32, 32, 32], 4).cast::<f32>();
    let targets = [0.1, 0.5, 0.9];
    let (rows, binned) = attention_report(&model, "vit3d", &[x.clone()], &targets, DistanceOptions::default()).unwrap();
    let bins: Vec<&str> = rows.iter().map(|r| r.bin.as_str()).collect();
    assert_eq!(bins, ["healthy", "subclinical", "keratoconus", "overall"]);
    assert!(rows.iter().all(|r| r.mean.is_some() && r.pct_gt20.unwrap() <= 1.0));
    // 2 blocks × 2 heads × 128 patch tokens × 5 targets per sample
    assert!(binned.bins.iter().all(|b| b.len() == 2 * 2 * 128 * 5));
    assert!(attention_report(&model, "vit3d", &[x], &targets[..2], DistanceOptions::default()).is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("table5.csv");
    write_table5(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), TABLE5_HEADER);
    assert_eq!(read_table5(&path).unwrap(), rows);
}
