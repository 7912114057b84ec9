use nrtk_core::autodiff::{grad_check, Graph, ParamStore, Tensor};
use nrtk_core::har::{lambdas, HarModel, MaskedTargets, Objective};
use nrtk_core::importance::{curriculum_weight, mask_count, raw_metrics, sample_mask};
use nrtk_core::metrics::{codebook_stats, mask_report, pearson, snr_db};
use nrtk_core::optim::{lr_at, AdamW, Schedule};
use nrtk_core::patching::{patchify, unpatchify};
use nrtk_core::preprocess::{bandpass, normalize, segment_and_reject};
use nrtk_core::rng::{stream, Stream};
use nrtk_core::rvq::{l2_norm, normalized, Codebook, Domain, RvqStack, TokenGrid};
use nrtk_core::spectral::{dft, idft};
use nrtk_core::{ModelConfig, PatchGrid, Recording, Segment, TrainConfig};
use proptest::prelude::*;

fn vec_in(len: std::ops::Range<usize>, lim: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-lim..lim, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dft_is_linear(x in vec_in(16..17, 10.0), y in vec_in(16..17, 10.0), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let (sx, sy, sm) = (dft(&x), dft(&y), dft(&mix));
        for k in 0..16 {
            prop_assert!((sm.re[k] - (a * sx.re[k] + b * sy.re[k])).abs() < 1e-9);
            prop_assert!((sm.im[k] - (a * sx.im[k] + b * sy.im[k])).abs() < 1e-9);
        }
    }

    #[test]
    fn parseval_symmetry_and_round_trip(x in vec_in(3..64, 100.0)) {
        let s = dft(&x);
        let p = x.len() as f64;
        let time: f64 = x.iter().map(|v| v * v).sum();
        let freq: f64 = s.re.iter().zip(&s.im).map(|(r, i)| r * r + i * i).sum::<f64>() / p;
        prop_assert!((time - freq).abs() <= 1e-6 * time.max(1e-12));
        prop_assert!(s.symmetry_error() < 1e-9 * (1.0 + time.sqrt()));
        let back = idft(&s).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn patch_round_trip_and_bijection(c in 1usize..4, a in 1usize..5, p in 3usize..9, extra in 0usize..3, seed in 0u64..1000) {
        let len = a * p + extra;
        let data: Vec<f64> = (0..c * len).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 100.0).collect();
        let seg = Segment::new(c, len, 200.0, data).unwrap();
        let grid = patchify(&seg, p).unwrap();
        prop_assert_eq!(grid.len(), c * a);
        for i in 0..grid.len() {
            let (ch, pa) = grid.coords(i);
            prop_assert_eq!(grid.index(ch, pa), i);
            prop_assert_eq!(i, ch * a + pa);
        }
        let again = patchify(&unpatchify(&grid), p).unwrap();
        prop_assert_eq!(again, grid);
    }

    #[test]
    fn normalize_is_linear(x in vec_in(8..9, 50.0), k in -4.0..4.0f64) {
        let seg = Segment::new(2, 4, 200.0, x.clone()).unwrap();
        let scaled = Segment::new(2, 4, 200.0, x.iter().map(|v| k * v).collect()).unwrap();
        let (n, ns) = (normalize(&seg, 100.0).unwrap(), normalize(&scaled, 100.0).unwrap());
        for (a, b) in n.data.iter().zip(&ns.data) {
            prop_assert!((k * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn telescoping_identity(e in vec_in(4..5, 5.0), seed in 0u64..500) {
        prop_assume!(l2_norm(&e) > 1e-6);
        let mut rng = stream(seed, Stream::Codebook);
        let stack = RvqStack::random(Domain::Time, 3, 8, 4, 0.99, &mut rng).unwrap();
        let q = stack.quantize(&e).unwrap();
        let r0 = normalized(&e).unwrap();
        let deq = stack.dequantize(&q.codes).unwrap();
        for j in 0..4 {
            prop_assert!((r0[j] - deq[j] - q.residuals[3][j]).abs() < 1e-6);
            prop_assert_eq!(deq[j], q.quantized[j]);
        }
        prop_assert_eq!(stack.quantize(&e).unwrap(), q);
    }

    #[test]
    fn codes_unit_norm_after_ema(seed in 0u64..500, n in 1usize..20) {
        let mut rng = stream(seed, Stream::Codebook);
        let mut book = Codebook::random(6, 3, 0.9, &mut rng).unwrap();
        let data: Vec<Vec<f64>> = (0..n).map(|i| vec![(i as f64).sin() + 0.1, (seed as f64 + i as f64).cos(), 0.3]).collect();
        let pairs: Vec<(usize, &[f64])> = data.iter().enumerate().map(|(i, v)| (i % 6, v.as_slice())).collect();
        book.ema_update(&pairs).unwrap();
        for k in 0..6 {
            prop_assert!((l2_norm(book.code(k)) - 1.0).abs() < 1e-6);
            prop_assert!(book.counts()[k] >= 0.0);
        }
    }

    #[test]
    fn mask_has_exact_size(scores in vec_in(2..40, 1.0), ratio in 0.05..0.95f64, w in 0.0..1.0f64, seed in 0u64..1000) {
        let scores: Vec<f64> = scores.iter().map(|v| v.abs()).collect();
        let mut rng = stream(seed, Stream::Masking);
        let plan = sample_mask(&scores, ratio, w, 0.8, &mut rng).unwrap();
        prop_assert_eq!(plan.mask.len(), mask_count(scores.len(), ratio));
        prop_assert_eq!(plan.mask.len(), (ratio * scores.len() as f64).round() as usize);
        prop_assert!(plan.mask.windows(2).all(|p| p[0] < p[1]));
        prop_assert!(plan.mask.iter().all(|&i| i < scores.len()));
    }

    #[test]
    fn curriculum_is_monotone(t in 1usize..5000, s in 0usize..5000) {
        let (a, b) = (curriculum_weight(s.min(t), t, 0.2, 0.7), curriculum_weight((s + 1).min(t), t, 0.2, 0.7));
        prop_assert!(a <= b && (0.2..=0.7).contains(&a));
    }

    #[test]
    fn raw_metrics_scale_rules(x in vec_in(200..201, 1.0), k in 0.01..100.0f64) {
        prop_assume!(x.iter().any(|v| v.abs() > 0.1));
        let a = raw_metrics(&x, 200.0).unwrap();
        let y: Vec<f64> = x.iter().map(|v| k * v).collect();
        let b = raw_metrics(&y, 200.0).unwrap();
        let close = |p: f64, q: f64| (p - q).abs() <= 1e-6 * (1.0 + p.abs());
        prop_assert!(close(a.mobility, b.mobility));
        prop_assert!(close(a.complexity, b.complexity));
        prop_assert!(close(a.irregularity, b.irregularity));
        prop_assert!(close(a.neural, b.neural));
        prop_assert!(close(a.clean, b.clean));
        prop_assert!(close(b.activity - a.activity, 2.0 * k.ln()));
    }

    #[test]
    fn codebook_stats_ranges(hist in prop::collection::vec(0u64..50, 2..40)) {
        let s = codebook_stats(&hist).unwrap();
        prop_assert_eq!(s.histogram.iter().sum::<u64>(), s.total);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&s.normalized_entropy));
        prop_assert!((-1e-12..=1.0).contains(&s.gini));
        prop_assert!((0.0..=1.0).contains(&s.top10_contribution));
    }

    #[test]
    fn pearson_in_range(x in vec_in(3..30, 10.0), noise in vec_in(30..31, 10.0)) {
        prop_assume!(x.iter().any(|v| (v - x[0]).abs() > 1e-6));
        let y: Vec<f64> = x.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let r = pearson(&x, &y).unwrap();
        prop_assert!((-1.0..=1.0).contains(&r));
    }

    #[test]
    fn snr_strictly_rises(x in vec_in(4..20, 10.0), e in vec_in(20..21, 1.0), f in 0.1..0.9f64) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-3) && e.iter().take(x.len()).any(|v| v.abs() > 1e-3));
        let worse: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a + b).collect();
        let better: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a + f * b).collect();
        prop_assert!(snr_db(&x, &better) > snr_db(&x, &worse));
    }

    #[test]
    fn schedule_bounded(step in 0usize..2000, epochs in 1usize..20, spe in 1usize..20) {
        let cfg = TrainConfig { epochs, warmup_epochs: 1.min(epochs), ..TrainConfig::default() };
        let lr = lr_at(step.min(epochs * spe), &Schedule::from_config(&cfg, spe));
        prop_assert!((0.0..=cfg.lr + 1e-15).contains(&lr));
    }
}

#[test]
fn tensor_primitives_pass_grad_check() {
    let mut rng = stream(11, Stream::Init);
    let x = nrtk_core::nets::normal_tensor(&mut rng, &[3, 4], 1.0);
    let w = nrtk_core::nets::normal_tensor(&mut rng, &[4, 2], 1.0);
    let g = nrtk_core::nets::normal_tensor(&mut rng, &[4], 1.0);
    let checks: Vec<Box<dyn Fn(&mut nrtk_core::autodiff::Tape, nrtk_core::autodiff::Var) -> nrtk_core::Result<nrtk_core::autodiff::Var>>> = vec![
        Box::new(|t, v| {
            let c = t.constant(w.clone());
            let m = t.matmul(v, c)?;
            let s = t.tanh(m);
            Ok(t.sum(s))
        }),
        Box::new(|t, v| {
            let s = t.softmax(v);
            let q = t.mul(s, s)?;
            Ok(t.sum(q))
        }),
        Box::new(|t, v| {
            let gain = t.constant(g.clone());
            let bias = t.constant(Tensor::zeros(&[4]));
            let n = t.layer_norm(v, gain, bias)?;
            let y = t.gelu(n);
            let c = t.cos(y);
            Ok(t.mean(c))
        }),
        Box::new(|t, v| t.cross_entropy_with_logits(v, &[1, 3, 0])),
        Box::new(|t, v| {
            let n = t.l2_normalize_rows(v);
            let tr = t.transpose(n)?;
            let p = t.matmul(n, tr)?;
            Ok(t.sum(p))
        }),
    ];
    for (i, f) in checks.iter().enumerate() {
        let err = grad_check(f, &x, 1e-6).unwrap();
        assert!(err < 1e-4, "primitive {i}: {err}");
    }
}

#[test]
fn bandpass_commutes_with_channel_permutation() {
    let n = 400;
    let rows: Vec<Vec<f64>> = (0..3).map(|c| (0..n).map(|i| ((i * (c + 2)) as f64 * 0.3).sin() * 20.0 + c as f64).collect()).collect();
    let labels: Vec<String> = (0..3).map(|c| format!("c{c}")).collect();
    let rec = Recording::from_rows(labels.clone(), 200.0, &rows).unwrap();
    let perm = [2, 0, 1];
    let prow: Vec<Vec<f64>> = perm.iter().map(|&c| rows[c].clone()).collect();
    let prec = Recording::from_rows(labels, 200.0, &prow).unwrap();
    let (a, b) = (bandpass(&rec, 0.3, 75.0).unwrap(), bandpass(&prec, 0.3, 75.0).unwrap());
    for (k, &c) in perm.iter().enumerate() {
        assert_eq!(a.channel(c), b.channel(k));
    }
}

#[test]
fn segments_tile_a_prefix() {
    let n = 2000;
    let rows: Vec<Vec<f64>> = (0..2).map(|c| (0..n).map(|i| if c == 1 && (700..705).contains(&i) { 150.0 } else { (i as f64 * 0.1).sin() }).collect()).collect();
    let rec = Recording::from_rows(vec!["a".into(), "b".into()], 200.0, &rows).unwrap();
    let segs = segment_and_reject(&rec, 2.0, 100.0).unwrap();
    let idx: Vec<usize> = segs.iter().map(|s| s.window_index).collect();
    // window 1 covers samples 400..800 and holds the spike
    assert_eq!(idx, vec![0, 2, 3, 4]);
    for s in &segs {
        let start = s.window_index * 400;
        assert_eq!(s.channel(0), &rec.channel_f64(0)[start..start + 400]);
    }
}

fn har_fixture() -> (HarModel, Vec<PatchGrid>, Vec<TokenGrid>, Vec<Vec<usize>>) {
    let cfg = ModelConfig { embed_dim: 8, encoder_layers: 1, heads: 2, ffn_dim: 16, patch_len: 32, rvq_layers: 3, codebook_size: 8, code_dim: 4, max_seq_len: 8, ..ModelConfig::default() };
    let grids: Vec<PatchGrid> = (0..2)
        .map(|s| PatchGrid::new(2, 2, 32, 200.0, (0..128).map(|i| ((i * (s + 3)) as f64 * 0.21).sin() * 0.4).collect()).unwrap())
        .collect();
    let codes = |o: usize| (0..4).map(|t| (0..3).map(|l| (t * 3 + l + o) % 8).collect()).collect::<Vec<Vec<usize>>>();
    let toks = vec![TokenGrid::new(4, 3, &codes(0), &codes(5)).unwrap(), TokenGrid::new(4, 3, &codes(2), &codes(1)).unwrap()];
    (HarModel::new(&cfg).unwrap(), grids, toks, vec![vec![1, 2], vec![0, 3]])
}

#[test]
fn doubling_lambda_one_doubles_only_layer_one() {
    let (m, grids, toks, masks) = har_fixture();
    let g_refs: Vec<&PatchGrid> = grids.iter().collect();
    let t_refs: Vec<&TokenGrid> = toks.iter().collect();
    let targets = MaskedTargets::gather(&t_refs, &masks, 3).unwrap();
    let total = |w: &[f64]| {
        let mut g = Graph::new(&m.params);
        let h = m.masked_hidden(&mut g, &g_refs, &masks, &targets.rows).unwrap();
        m.har_loss(&mut g, h, &targets, Objective::Hierarchical, w).unwrap().report
    };
    let base = total(&lambdas(3));
    let doubled = total(&[2.0, 0.5, 0.25]);
    let layer1 = base.ce[0][0] + base.ce[1][0];
    assert!((doubled.total - base.total - layer1).abs() < 1e-12);
    assert_eq!(doubled.ce, base.ce);
}

#[test]
fn greedy_chain_matches_teacher_forcing_on_its_own_predictions() {
    let (m, grids, toks, masks) = har_fixture();
    let g_refs: Vec<&PatchGrid> = grids.iter().collect();
    let t_refs: Vec<&TokenGrid> = toks.iter().collect();
    let targets = MaskedTargets::gather(&t_refs, &masks, 3).unwrap();
    let mut g = Graph::inference(&m.params);
    let h = m.masked_hidden(&mut g, &g_refs, &masks, &targets.rows).unwrap();
    let greedy = m.autoregressive_infer(&mut g, h).unwrap();
    let forced = MaskedTargets { rows: targets.rows.clone(), codes: greedy.clone() };
    assert_eq!(m.teacher_forced_argmax(&mut g, h, &forced).unwrap(), greedy);
    assert_eq!(m.autoregressive_infer(&mut g, h).unwrap(), greedy);
}

#[test]
fn zero_lr_step_is_identity() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap());
    let before = store.clone();
    let mut opt = AdamW::new(&store, &TrainConfig::default());
    opt.step(&mut store, &[Some(vec![0.3, -0.1, 2.0, 0.7])], 0.0);
    assert_eq!(store, before);
}

#[test]
fn weighted_masks_favor_high_scores_on_average() {
    let scores: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin().abs()).collect();
    let mut rng = stream(5, Stream::Masking);
    for w in [0.1, 0.5, 1.0] {
        let mut gap = 0.0;
        for _ in 0..2000 {
            let plan = sample_mask(&scores, 0.5, w, 0.8, &mut rng).unwrap();
            gap += mask_report(&scores, &plan).unwrap().gap / 2000.0;
        }
        assert!(gap > 0.0, "w={w}: gap {gap}");
    }
}
