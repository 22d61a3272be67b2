//! Acceptance checks, one verdict line per criterion.
//!
//! `ACCEPTANCE_STRICT=1` turns any failure into exit code 3.
//! `ACCEPTANCE_SKIP_ABLATION=1` skips the long synthetic-task experiment (criteria 5 to 8).

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dvan_core::attention::{AttentionConfig, AttentionModel, Pooling};
use dvan_core::canvas::{axis_positions, generate_canvases, CanvasPlan, Rect};
use dvan_core::checkpoint;
use dvan_core::config::RunConfig;
use dvan_core::data::generate_synthetic;
use dvan_core::experiment::{run_seed, VariantResult, VariantSpec};
use dvan_core::gradcheck::{op_suite, tiny_model_suite};
use dvan_core::loss::diversity_loss;
use dvan_core::model::{DvanModel, Variant};
use dvan_core::params::ParamStore;
use dvan_core::train::{evaluate, restore_params, Trainer};
use dvan_core::{Graph, Tensor};

struct Verdict {
    id: &'static str,
    title: &'static str,
    passed: Option<bool>,
    detail: String,
}

fn verdict(id: &'static str, title: &'static str, passed: bool, detail: String) -> Verdict {
    Verdict { id, title, passed: Some(passed), detail }
}

fn holds(ok: bool) -> &'static str {
    if ok {
        "holds"
    } else {
        "violated"
    }
}

fn gradient_integrity() -> Verdict {
    let start = Instant::now();
    let ops = op_suite(0, None).expect("op suite runs");
    let model = tiny_model_suite(0, None).expect("model suite runs");
    let worst = model.iter().map(|l| l.error).fold(0.0, f64::max);
    let failed: Vec<&str> = ops.iter().chain(&model).filter(|l| !l.passed()).map(|l| l.name.as_str()).collect();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "1",
        "gradient integrity",
        failed.is_empty() && worst < 1e-4 && secs < 60.0,
        format!("model max rel err {worst:.2e} (< 1e-4), {} op checks, failing {failed:?}, {secs:.1}s (< 60s)", ops.len()),
    )
}

fn attention_normalization() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut steps, mut worst_sum, mut min_entry) = (0usize, 0.0f64, f64::INFINITY);
    while steps < 10_000 {
        let k = rng.gen_range(1..=8);
        let d_feat = rng.gen_range(1..=16);
        let cfg = AttentionConfig {
            feature_side: k,
            feature_dim: d_feat,
            hidden: rng.gen_range(1..=16),
            classes: rng.gen_range(2..=8),
            pooling: Pooling::Attention,
        };
        let mut store = ParamStore::new();
        let model = AttentionModel::new(cfg, &mut store, &mut rng).unwrap();
        let spread = 10f64.powf(rng.gen_range(-1.0..1.5));
        for p in store.iter_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-spread..spread));
        }
        let t = rng.gen_range(1..=50);
        let features: Vec<Tensor> =
            (0..t).map(|_| Tensor::uniform(&[d_feat, k, k], rng.gen_range(0.1..20.0), &mut rng)).collect();
        for s in model.run(&store, &features).unwrap() {
            let map = s.attention.expect("attention pooling emits maps");
            worst_sum = worst_sum.max((map.data().iter().sum::<f64>() - 1.0).abs());
            min_entry = min_entry.min(map.data().iter().copied().fold(f64::INFINITY, f64::min));
            steps += 1;
        }
    }
    verdict(
        "2",
        "attention normalization",
        worst_sum <= 1e-6 && min_entry >= 0.0,
        format!("{steps} steps, max |sum-1| {worst_sum:.2e} (<= 1e-6), min entry {min_entry:.2e} (>= 0)"),
    )
}

fn ldiv_of(maps: &[Vec<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<_> = maps.iter().map(|m| g.constant(Tensor::vector(m.clone()))).collect();
    let l = diversity_loss(&mut g, &vars).unwrap();
    g.value(l).item()
}

fn diversity_algebra() -> Verdict {
    let one_hot = |n: usize, i: usize| {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    };
    let same = ldiv_of(&[one_hot(64, 5), one_hot(64, 5), one_hot(64, 5)]);
    let disjoint = ldiv_of(&[one_hot(64, 1), one_hot(64, 2), one_hot(64, 3)]);
    let uniform = ldiv_of(&[vec![1.0 / 64.0; 64], vec![1.0 / 64.0; 64]]);
    verdict(
        "3",
        "diversity-loss algebra",
        same == 1.0 && disjoint == 0.0 && (uniform - 1.0 / 64.0).abs() <= 1e-12,
        format!("identical {same} (== 1), disjoint {disjoint} (== 0), uniform K=8 |{uniform} - 1/64| = {:.1e} (<= 1e-12)", (uniform - 1.0 / 64.0).abs()),
    )
}

/// Every admissible origin by direct scan.
fn brute_positions(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    (0..dim).filter(|&x| x + window <= dim && x % stride == 0).collect()
}

fn canvas_arithmetic() -> Verdict {
    let image = Tensor::zeros(&[3, 256, 256]);
    let plan = CanvasPlan { output_size: 4, ..CanvasPlan::standard() };
    let canvases = generate_canvases(&image, &plan).unwrap();
    let scales: Vec<usize> = canvases.iter().map(|c| c.scale_index).collect();
    let mut expected_scales = vec![0; 5];
    expected_scales.extend(vec![1; 10]);
    expected_scales.extend(vec![2; 17]);
    let mut order_ok = scales == expected_scales;
    let windows = [224.0, 168.0, 112.0];
    for (i, c) in canvases.iter().enumerate() {
        let w = windows[c.scale_index];
        order_ok &= c.sequence_index == i && c.footprint.width() == w && c.footprint.height() == w;
        order_ok &= c.footprint.x0 >= 0.0 && c.footprint.y0 >= 0.0 && c.footprint.x1 <= 256.0 && c.footprint.y1 <= 256.0;
    }
    // First canvas of each scale is the centred crop, then the grid row-major.
    for (start, w, n) in [(0usize, 224usize, 4usize), (5, 168, 9), (15, 112, 16)] {
        order_ok &= canvases[start].footprint == Rect::square((256 - w) / 2, (256 - w) / 2, w);
        let grid = &canvases[start + 1..start + 1 + n];
        order_ok &= grid.windows(2).all(|p| (p[0].footprint.y0, p[0].footprint.x0) < (p[1].footprint.y0, p[1].footprint.x0));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for _ in 0..100 {
        let dim = rng.gen_range(1..=300);
        let window = rng.gen_range(1..=dim);
        let stride = rng.gen_range(1..=dim);
        let got = axis_positions(dim, window, stride).unwrap();
        let formula = (dim - window) / stride + 1;
        if got != brute_positions(dim, window, stride) || got.len() != formula {
            mismatches += 1;
        }
    }
    verdict(
        "4",
        "canvas arithmetic",
        canvases.len() == 32 && order_ok && mismatches == 0,
        format!("{} canvases (== 32, 5/10/17 in order: {order_ok}), {mismatches}/100 tiling mismatches vs brute force", canvases.len()),
    )
}

struct Ablation {
    results: Vec<VariantResult>,
    seconds: f64,
}

fn mean(results: &[VariantResult], name: &str, f: impl Fn(&VariantResult) -> f64) -> f64 {
    let v: Vec<f64> = results.iter().filter(|r| r.name == name).map(f).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn run_ablation() -> Ablation {
    let cfg = RunConfig::default();
    let exp = cfg.experiment();
    let variants = vec![
        VariantSpec::new(Variant::Dvan, 1.0, 2),
        VariantSpec::new(Variant::DvanAvg, 1.0, 2),
        VariantSpec::new(Variant::DvanMax, 1.0, 2),
        VariantSpec::new(Variant::MultiCanvas, 1.0, 2),
        VariantSpec::new(Variant::Dvan, 0.0, 2).named("lambda-0"),
        VariantSpec::new(Variant::Dvan, 10.0, 2).named("lambda-10"),
        VariantSpec::new(Variant::Dvan, 1.0, 1).named("one-scale"),
    ];
    let start = Instant::now();
    let mut results = Vec::new();
    for seed in 0..3 {
        results.extend(
            run_seed(&exp, &variants, seed, |r| {
                println!(
                    "    seed {seed} {:<12} test accuracy {:.4}  mean L_div {:.4}  [{:.0}s]",
                    r.name,
                    r.test.accuracy,
                    r.test.mean_ldiv,
                    start.elapsed().as_secs_f64()
                )
            })
            .expect("experiment runs"),
        );
    }
    Ablation { results, seconds: start.elapsed().as_secs_f64() }
}

fn ablation_verdicts(a: &Ablation) -> Vec<Verdict> {
    let acc = |n: &str| 100.0 * mean(&a.results, n, |r| r.test.accuracy);
    let (dvan, avg, max, multi) = (acc("dvan"), acc("dvan-avg"), acc("dvan-max"), acc("multi-canvas"));
    let ordering = dvan - avg >= 1.0 && dvan - max >= 1.0 && avg - multi >= 1.0;
    let in_budget = a.seconds <= 1800.0;
    let ldiv = |n: &str| mean(&a.results, n, |r| r.test.mean_ldiv);
    let (l0, l1) = (ldiv("lambda-0"), ldiv("dvan"));
    let acc10 = acc("lambda-10");
    let one = acc("one-scale");

    let (mut correct, mut hits) = (0usize, 0usize);
    for r in a.results.iter().filter(|r| r.name == "dvan") {
        for s in r.test.results.iter().filter(|s| s.prediction == s.label) {
            correct += 1;
            hits += usize::from(s.localized == Some(true));
        }
    }
    let rate = hits as f64 / correct.max(1) as f64;
    vec![
        verdict(
            "5",
            "ablation ordering",
            ordering && in_budget,
            format!(
                "DVAN {dvan:.2} vs Avg {avg:.2} (+{:.2}), vs Max {max:.2} (+{:.2}); Avg vs multi-canvas {multi:.2} (+{:.2}); margins >= 1 point; {:.0}s for the whole experiment (<= 1800s)",
                dvan - avg,
                dvan - max,
                avg - multi,
                a.seconds
            ),
        ),
        verdict(
            "6",
            "lambda effect",
            l1 < l0 && acc10 <= dvan,
            format!(
                "mean L_div lambda=1 {l1:.4} vs lambda=0 {l0:.4} (needs <): {}; accuracy lambda=10 {acc10:.2} vs lambda=1 {dvan:.2} (needs <=): {}",
                holds(l1 < l0),
                holds(acc10 <= dvan)
            ),
        ),
        verdict("7", "scale effect", dvan - one >= 1.0, format!("two-scale {dvan:.2} vs one-scale {one:.2} (+{:.2}, >= 1 point)", dvan - one)),
        verdict(
            "8",
            "attention localization",
            rate >= 0.7,
            format!("{hits}/{correct} correctly classified test images ({:.1}%, >= 70%) have a step whose mass-0.5 support touches a glyph", 100.0 * rate),
        ),
    ]
}

fn tiny_run_config() -> RunConfig {
    let mut overrides: Vec<String> = [
        "data.image_size=24",
        "data.classes=3",
        "data.glyph_size=3",
        "data.jitter=1",
        "data.decoys=1",
        "data.body_decoys=1",
        "data.train_per_class=4",
        "data.test_per_class=4",
        "canvas.short_edge=24",
        "canvas.windows=21,16,10",
        "canvas.strides=3,4,5",
        "canvas.output_size=8",
        "backbone.channels=3",
        "hidden=5",
        "sgd.epochs=1,2,1",
        "sgd.batch_size=3",
        "sgd.learning_rate=0.01",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    overrides.push("seed=9".into());
    RunConfig::resolve(None, &overrides).unwrap()
}

fn determinism() -> Verdict {
    let cfg = tiny_run_config();
    let data = generate_synthetic(&cfg.data).unwrap();
    let train_once = || {
        let mut t = Trainer::new(DvanModel::new(cfg.model(), cfg.seed).unwrap(), &data.train, cfg.train()).unwrap();
        t.train(|_| Ok(())).unwrap();
        (checkpoint::encode(&t.checkpoint()), t.model)
    };
    let (a, model) = train_once();
    let (b, _) = train_once();
    let reproducible = a == b;

    let decoded = checkpoint::decode(&a).unwrap();
    let mut restored = DvanModel::new(cfg.model(), 12345).unwrap();
    let params: Vec<(String, Tensor)> = decoded.into_iter().filter(|(n, _)| !n.starts_with("sgd/") && !n.starts_with("meta/")).collect();
    restore_params(&mut restored, &params).unwrap();
    let before = evaluate(&model, &data.test, model.final_head(), &cfg.loss, None).unwrap();
    let after = evaluate(&restored, &data.test, restored.final_head(), &cfg.loss, None).unwrap();
    let identical = before.results.iter().zip(&after.results).all(|(x, y)| {
        x.probs.iter().zip(&y.probs).all(|(p, q)| p.to_bits() == q.to_bits()) && x.maps == y.maps
    });
    verdict(
        "9",
        "determinism and serialization",
        reproducible && identical,
        format!("two runs give identical checkpoint bytes: {reproducible} ({} bytes); round-trip evaluation bit-identical: {identical}", a.len()),
    )
}

fn avg_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.gen_range(1..=6);
        let d_feat = rng.gen_range(1..=8);
        let hidden = rng.gen_range(1..=8);
        let classes = rng.gen_range(2..=5);
        let cfg = |pooling| AttentionConfig { feature_side: k, feature_dim: d_feat, hidden, classes, pooling };
        let mut att_store = ParamStore::new();
        let att = AttentionModel::new(cfg(Pooling::Attention), &mut att_store, &mut rng).unwrap();
        let mut avg_store = ParamStore::new();
        let avg = AttentionModel::new(cfg(Pooling::Average), &mut avg_store, &mut rng).unwrap();
        for p in att_store.iter_mut() {
            let zero = p.name.starts_with("attention/score/");
            p.tensor.data_mut().iter_mut().for_each(|v| *v = if zero { 0.0 } else { rng.gen_range(-1.0..1.0) });
        }
        let named: Vec<(String, Tensor)> = att_store.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
        avg_store.load_values(&named).unwrap();
        let t = rng.gen_range(1..=8);
        let xs: Vec<Tensor> = (0..t).map(|_| Tensor::uniform(&[d_feat, k, k], 2.0, &mut rng)).collect();

        let trajectory = |model: &AttentionModel, store: &ParamStore| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, |_| false);
            let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
            let steps = model.forward_sequence(&mut g, &p, &vars).unwrap();
            steps
                .iter()
                .flat_map(|s| {
                    let mut v = Vec::new();
                    for var in [s.pooled, s.cell, s.hidden, s.logits, s.probs] {
                        v.extend_from_slice(g.data(var));
                    }
                    if let Some(a) = s.attention {
                        v.extend_from_slice(g.data(a));
                    }
                    v
                })
                .collect::<Vec<f64>>()
        };
        let (a, b) = (trajectory(&att, &att_store), trajectory(&avg, &avg_store));
        assert_eq!(a.len(), b.len());
        worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    verdict(
        "10",
        "DVAN-Avg equivalence",
        worst <= 1e-9,
        format!("100 random inputs, max trajectory difference {worst:.2e} (<= 1e-9)"),
    )
}

fn main() {
    let start = Instant::now();
    let mut verdicts = vec![gradient_integrity(), attention_normalization(), diversity_algebra(), canvas_arithmetic()];
    if std::env::var_os("ACCEPTANCE_SKIP_ABLATION").is_some() {
        for (id, title) in [("5", "ablation ordering"), ("6", "lambda effect"), ("7", "scale effect"), ("8", "attention localization")] {
            verdicts.push(Verdict { id, title, passed: None, detail: "skipped".into() });
        }
    } else {
        println!("  running the synthetic-task experiment (3 seeds)");
        verdicts.extend(ablation_verdicts(&run_ablation()));
    }
    verdicts.push(determinism());
    verdicts.push(avg_equivalence());

    println!();
    for v in &verdicts {
        let tag = match v.passed {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "SKIP",
        };
        println!("{tag} criterion {:>2} {}: {}", v.id, v.title, v.detail);
    }
    let failed = verdicts.iter().filter(|v| v.passed == Some(false)).count();
    println!("{} passed, {failed} failed, {:.0}s", verdicts.iter().filter(|v| v.passed == Some(true)).count(), start.elapsed().as_secs_f64());
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(3);
    }
}
