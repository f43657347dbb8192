//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Criteria 5 to 7 train 30 models on the synthetic pair and take most of
//! the runtime (about 20 minutes on one core).

use std::fs;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsda::data::{synthesize_split, synthesize_uda_pair, Dataset, Domain, SynthConfig};
use tsda::dtw::{dtw_brute_force, dtw_distance, path_cost};
use tsda::losses::{mine_triplets, LossWeights, PrototypeBank};
use tsda::model::{num_patches, patchify, Batch, Forward, Model, ModelConfig};
use tsda::trainer::{build_objective, evaluate, fit, TrainConfig};
use tsda::{Float, Graph, ParamStore};
use tsda_cli::{cmd_train, TrainArgs};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn median(xs: &[Float]) -> Float {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn random_seq(rng: &mut ChaCha8Rng, len: usize, width: usize) -> Vec<Vec<Float>> {
    (0..len)
        .map(|_| (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

fn dtw_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: Float = 0.0;
    for _ in 0..100 {
        let (la, lb) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let a = random_seq(&mut rng, la, 3);
        let b = random_seq(&mut rng, lb, 3);
        let fast = dtw_distance(&a, &b).unwrap();
        let brute = dtw_brute_force(&a, &b).unwrap();
        worst = worst
            .max((fast.distance - brute.distance).abs())
            .max((path_cost(&a, &b, &fast.path) - path_cost(&a, &b, &brute.path)).abs())
            .max((path_cost(&a, &b, &fast.path) - fast.distance).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-9 && secs < 5.0,
        format!("100 pairs, max |Δ| {worst:.2e}, {secs:.2} s"),
    )
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        seq_len: 32,
        channels: 3,
        num_classes: 3,
        patch_len: 8,
        stride: 4,
        d_model: 16,
        transformer_layers: 1,
        transformer_heads: 2,
        kernel_sizes: vec![2, 4],
        stages: 2,
        d_emb: 8,
        d_k: 8,
        d_v: 8,
        disc_hidden: 8,
    }
}

const TERMS: [&str; 6] = ["cls", "domain", "dtw", "margin", "center", "total"];

/// Fixed inputs of one objective evaluation; only the parameters vary.
struct GradProblem {
    source: Batch,
    target: Batch,
    labels: Vec<usize>,
    triplets: tsda::losses::Triplets,
    bank: PrototypeBank<Float>,
    weights: LossWeights,
}

impl GradProblem {
    fn build(&self, model: &Model, store: &ParamStore, term: &str) -> (Graph, tsda::tensor::Var) {
        let mut f = Forward::new(store, true);
        let src = model.forward(&mut f, &self.source).unwrap();
        let tgt = model.forward(&mut f, &self.target).unwrap();
        let obj = build_objective(
            model,
            &mut f,
            &src,
            Some(&tgt),
            &self.labels,
            &self.triplets,
            &self.bank,
            &self.weights,
            true,
        )
        .unwrap();
        let p = obj.parts;
        let v = match term {
            "cls" => p.cls,
            "domain" => p.domain,
            "dtw" => p.dtw,
            "margin" => p.margin,
            "center" => p.center,
            _ => obj.total,
        };
        (f.graph, v)
    }

    fn value(&self, model: &Model, store: &ParamStore, term: &str) -> Float {
        let (g, v) = self.build(model, store, term);
        g.value(v).data()[0]
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cfg = tiny_model_config();
    let model = Model::new(cfg.clone(), 3).unwrap();
    let synth = SynthConfig {
        seq_len: 32,
        num_classes: 3,
        samples_per_class: 2,
        motif_len: 8,
        max_shift: 2,
        ..SynthConfig::default()
    };
    let (src, tgt) = synthesize_uda_pair(&synth).unwrap();
    let series = |ds: &Dataset| ds.samples.iter().map(|s| s.values.clone()).collect::<Vec<_>>();
    let (sv, tv) = (series(&src), series(&tgt));
    let source = Batch::new(&cfg, &sv.iter().map(Vec::as_slice).collect::<Vec<_>>()).unwrap();
    let target = Batch::new(&cfg, &tv.iter().map(Vec::as_slice).collect::<Vec<_>>()).unwrap();
    let labels = src.labels().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let triplets = mine_triplets(&labels, &mut rng);
    let mut bank = PrototypeBank::new(cfg.num_classes, cfg.d_v, 0.9);
    let feats: Vec<Float> = (0..labels.len() * cfg.d_v).map(|_| rng.gen_range(-1.0..1.0)).collect();
    bank.update(&feats, &labels).unwrap();
    // Small margins keep hinge terms active and away from their kinks.
    let weights = LossWeights {
        alpha: 50.0,
        beta: 50.0,
        ..LossWeights::default()
    };
    let problem = GradProblem {
        source,
        target,
        labels,
        triplets,
        bank,
        weights,
    };

    let h = 1e-5;
    let mut failures = Vec::new();
    let mut worst_by_term = Vec::new();
    for term in TERMS {
        let (mut g, v) = problem.build(&model, &model.store, term);
        g.backward(v).unwrap();
        let mut grads = model.store.clone();
        grads.zero_grads();
        g.accumulate_param_grads(&mut grads);
        let mut candidates = Vec::new();
        for (id, p) in grads.iter() {
            if p.trainable {
                candidates.extend((0..p.grad.len()).filter(|&j| p.grad[j].abs() > 1e-9).map(|j| (id, j)));
            }
        }
        let tol = if matches!(term, "dtw" | "margin" | "total") {
            1e-3
        } else {
            1e-4
        };
        let mut worst: Float = 0.0;
        let mut checked = 0;
        let mut kinks = 0;
        while checked < 20 && !candidates.is_empty() {
            let (id, j) = candidates.swap_remove(rng.gen_range(0..candidates.len()));
            let analytic = grads.get(id).grad[j];
            let mut store = model.store.clone();
            let x0 = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = x0 + h;
            let fp = problem.value(&model, &store, term);
            store.value_mut(id).data_mut()[j] = x0 - h;
            let fm = problem.value(&model, &store, term);
            store.value_mut(id).data_mut()[j] = x0;
            let f0 = problem.value(&model, &store, term);
            // A kink inside [x0 - h, x0 + h] shows up as one-sided slopes that disagree.
            let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
            if (right - left).abs() > 1e-2 * (right.abs() + left.abs()) + 1e-6 {
                kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            // Rounding in f(x ± h) limits what the difference quotient can resolve.
            let resolution = 10.0 * Float::EPSILON * f0.abs().max(1.0) / h;
            let err = (analytic - numeric).abs();
            let rel = err / analytic.abs().max(numeric.abs());
            worst = worst.max(rel);
            checked += 1;
            if err > tol * analytic.abs().max(numeric.abs()) + resolution {
                failures.push(format!(
                    "{term}/{}[{j}]: {analytic:.6e} vs {numeric:.6e}",
                    grads.get(id).name
                ));
            }
        }
        if checked < 20 {
            failures.push(format!("{term}: only {checked} checkable parameters"));
        }
        worst_by_term.push(format!(
            "{term} {worst:.1e}{}",
            if kinks > 0 {
                format!(" ({kinks} kinks skipped)")
            } else {
                String::new()
            }
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    let mut detail = format!("worst relative error: {}; {secs:.1} s", worst_by_term.join(", "));
    if !failures.is_empty() {
        detail += &format!("; failures: {}", failures.join("; "));
    }
    outcome(failures.is_empty() && secs < 60.0, detail)
}

fn patch_arithmetic() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for (t, p, s) in [(128, 16, 8), (3000, 64, 32), (128, 128, 1)] {
        let m = num_patches(t, p, s);
        let values: Vec<Float> = (0..t).map(|i| i as Float).collect();
        let seq = patchify(&values, t, 1, p, s).unwrap();
        pass &= seq.num_patches == m;
        if (t - p) % s == 0 {
            pass &= m == (t - p) / s + 1;
            notes.push(format!("({t},{p},{s}) M={m}"));
        } else {
            let mut covered = vec![false; t];
            for k in 0..m {
                for &v in seq.patch(k) {
                    covered[v as usize] = true;
                }
            }
            let all = covered.iter().all(|&c| c);
            pass &= all;
            notes.push(format!("({t},{p},{s}) M={m} covers all steps: {all}"));
        }
    }
    outcome(pass, notes.join(", "))
}

fn fusion_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut perm_err: Float = 0.0;
    let mut row_err: Float = 0.0;
    let mut widths = Vec::new();
    for (t, kernels) in [
        (64, vec![4]),
        (64, vec![2, 4, 8]),
        (128, vec![4, 8, 16]),
        (96, vec![3, 5]),
    ] {
        let cfg = ModelConfig {
            seq_len: t,
            d_model: 16,
            transformer_layers: 1,
            kernel_sizes: kernels.clone(),
            d_emb: 16,
            d_k: 8,
            d_v: 12,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg.clone(), 4).unwrap();
        let series: Vec<Vec<Float>> = (0..3)
            .map(|_| (0..t * cfg.channels).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let refs: Vec<&[Float]> = series.iter().map(|s| s.as_slice()).collect();
        let batch = Batch::new(&cfg, &refs).unwrap();
        let mut f = Forward::new(&model.store, false);
        let out = model.forward(&mut f, &batch).unwrap();
        let base = f.graph.value(out.fusion.fused).clone();
        widths.push(base.shape().to_vec());
        for &w in out.fusion.cross_weights.iter().chain([&out.fusion.self_weights]) {
            let v = f.graph.value(w);
            let n = *v.shape().last().unwrap();
            for row in v.data().chunks(n) {
                row_err = row_err.max((row.iter().sum::<Float>() - 1.0).abs());
            }
        }
        let mut order: Vec<usize> = (0..kernels.len()).collect();
        for _ in 0..4 {
            order.rotate_left(1);
            if order.len() > 2 {
                order.swap(0, 2);
            }
            let permuted: Vec<_> = order.iter().map(|&i| out.locals[i]).collect();
            let fused = model.fusion.forward(&mut f, out.global, &permuted).unwrap().fused;
            for (a, b) in f.graph.value(fused).data().iter().zip(base.data()) {
                perm_err = perm_err.max((a - b).abs());
            }
        }
    }
    let widths_ok = widths.iter().all(|s| s == &[3, 12]);
    outcome(
        perm_err <= 1e-9 && row_err <= 1e-9 && widths_ok,
        format!("permutation |Δ| {perm_err:.1e}, row-sum |Δ| {row_err:.1e}, fused shapes {widths:?}"),
    )
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const SHIFT: isize = 16;

/// Reduced model and schedule used for the synthetic runs so 30 trainings
/// fit in the test budget.
fn synthetic_train_config(seed: u64, weights: LossWeights) -> TrainConfig {
    TrainConfig {
        epochs: 15,
        batch_size: 32,
        learning_rate: 2e-3,
        seed,
        weights,
        model: ModelConfig {
            d_model: 16,
            transformer_layers: 2,
            d_emb: 16,
            d_k: 16,
            d_v: 16,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn full_weights() -> LossWeights {
    LossWeights {
        lambda_domain: 1.0,
        lambda_margin: 0.03,
        lambda_dtw: 0.03,
        lambda_center: 0.001,
        ..LossWeights::default()
    }
}

#[derive(Clone, Copy)]
struct RunResult {
    accuracy: Float,
    shifted: Float,
    secs: Float,
}

impl RunResult {
    fn drop(&self) -> Float {
        self.accuracy - self.shifted
    }
}

fn synthetic_run(seed: u64, weights: LossWeights) -> RunResult {
    let start = Instant::now();
    let synth = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    let (source, target) = synthesize_uda_pair(&synth).unwrap();
    let test = synthesize_split(&synth, Domain::Target, 2).unwrap();
    let cfg = synthetic_train_config(seed, weights);
    let (model, _) = fit(&cfg, &source, &target.without_labels(), |_, _| Ok(())).unwrap();
    let accuracy = evaluate(&model, &test).unwrap().accuracy;
    let shifted = [SHIFT, -SHIFT]
        .iter()
        .map(|&s| evaluate(&model, &test.circular_shift(s)).unwrap().accuracy)
        .sum::<Float>()
        / 2.0;
    RunResult {
        accuracy,
        shifted,
        secs: start.elapsed().as_secs_f64(),
    }
}

struct Variant {
    name: &'static str,
    weights: LossWeights,
    runs: Vec<RunResult>,
}

impl Variant {
    fn accuracies(&self) -> Vec<Float> {
        self.runs.iter().map(|r| r.accuracy).collect()
    }

    fn median_accuracy(&self) -> Float {
        median(&self.accuracies())
    }

    fn median_drop(&self) -> Float {
        median(&self.runs.iter().map(RunResult::drop).collect::<Vec<_>>())
    }
}

fn synthetic_variants() -> Vec<Variant> {
    let full = full_weights();
    let ablate = |f: fn(&mut LossWeights)| {
        let mut w = full;
        f(&mut w);
        w
    };
    let mut variants = vec![
        Variant {
            name: "full",
            weights: full,
            runs: vec![],
        },
        Variant {
            name: "source-only",
            weights: LossWeights::source_only(),
            runs: vec![],
        },
        Variant {
            name: "w/o domain",
            weights: ablate(|w| w.lambda_domain = 0.0),
            runs: vec![],
        },
        Variant {
            name: "w/o center",
            weights: ablate(|w| w.lambda_center = 0.0),
            runs: vec![],
        },
        Variant {
            name: "w/o margin",
            weights: ablate(|w| w.lambda_margin = 0.0),
            runs: vec![],
        },
        Variant {
            name: "w/o dtw",
            weights: ablate(|w| w.lambda_dtw = 0.0),
            runs: vec![],
        },
    ];
    for v in &mut variants {
        for seed in SEEDS {
            let r = synthetic_run(seed, v.weights);
            eprintln!(
                "  {:<12} seed {seed}: target {:.3}, shifted ±{SHIFT} {:.3} ({:.0} s)",
                v.name, r.accuracy, r.shifted, r.secs
            );
            v.runs.push(r);
        }
    }
    variants
}

fn fmt_accs(v: &Variant) -> String {
    v.accuracies()
        .iter()
        .map(|a| format!("{a:.3}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn uda_improvement(variants: &[Variant]) -> Outcome {
    let (full, src) = (&variants[0], &variants[1]);
    let (mf, ms) = (full.median_accuracy(), src.median_accuracy());
    let slowest = full.runs.iter().map(|r| r.secs).fold(0.0, Float::max);
    outcome(
        mf - ms >= 0.10 && mf >= 0.80 && slowest <= 600.0,
        format!(
            "median target accuracy full {mf:.3} [{}] vs source-only {ms:.3} [{}], gain {:+.3}; slowest full run {slowest:.0} s",
            fmt_accs(full),
            fmt_accs(src),
            mf - ms
        ),
    )
}

fn ablation_trend(variants: &[Variant]) -> Outcome {
    let mf = variants[0].median_accuracy();
    let mut pass = true;
    let mut notes = vec![format!("full {mf:.3}")];
    for v in &variants[2..] {
        let m = v.median_accuracy();
        pass &= mf >= m - 0.02;
        notes.push(format!("{} {m:.3}", v.name));
    }
    outcome(pass, notes.join(", "))
}

fn shift_robustness(variants: &[Variant]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut invariant = true;
    for _ in 0..50 {
        let len = rng.gen_range(1..=8);
        let a = random_seq(&mut rng, len, 3);
        let mut b = a.clone();
        for _ in 0..rng.gen_range(1..=4) {
            let i = rng.gen_range(0..b.len());
            b.insert(i, b[i].clone());
        }
        invariant &= dtw_distance(&a, &b).unwrap().distance == 0.0;
    }
    let (full, no_dtw) = (&variants[0], &variants[5]);
    let (df, dn) = (full.median_drop(), no_dtw.median_drop());
    outcome(
        invariant && df <= dn,
        format!("duplicate insertion distance 0: {invariant}; median drop under ±{SHIFT} shift full {df:+.3} vs w/o dtw {dn:+.3}"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        samples_per_class: 8,
        ..SynthConfig::default()
    };
    let (source, target) = synthesize_uda_pair(&synth).unwrap();
    tsda::data::save_dataset(&source, dir.path().join("source")).unwrap();
    tsda::data::save_dataset(&target, dir.path().join("target")).unwrap();
    let config = dir.path().join("run.cfg");
    fs::write(
        &config,
        "epochs = 2\nbatch_size = 8\nd_model = 8\ntransformer_layers = 1\ntransformer_heads = 2\n\
         d_emb = 8\nd_k = 8\nd_v = 8\ndisc_hidden = 8\nlambda_margin = 0.1\nlambda_dtw = 0.1\nlambda_center = 0.01\n",
    )
    .unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        cmd_train(&TrainArgs {
            config: config.clone(),
            source: Some(dir.path().join("source")),
            target: Some(dir.path().join("target")),
            out: out.clone(),
            seed: Some(7),
            ablate: None,
            eval: None,
        })
        .map_err(|f| f.message)
        .unwrap();
        fs::read(out.join("metrics.ndjson")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    let lines = a.iter().filter(|&&c| c == b'\n').count();
    outcome(
        a == b && lines == 2,
        format!("{} bytes, {lines} lines, identical: {}", a.len(), a == b),
    )
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 DTW oracle equivalence", dtw_oracle()),
        ("2 gradient suite", gradient_suite()),
        ("3 patch arithmetic", patch_arithmetic()),
        ("4 fusion invariants", fusion_invariants()),
    ];
    eprintln!("synthetic runs: 6 variants × {} seeds", SEEDS.len());
    let variants = synthetic_variants();
    results.push(("5 synthetic UDA improvement", uda_improvement(&variants)));
    results.push(("6 ablation trend", ablation_trend(&variants)));
    results.push(("7 time-shift robustness", shift_robustness(&variants)));
    results.push(("8 determinism", determinism()));

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} [{name}] {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!(
        "{} of {} criteria passed in {:.0?}",
        results.len() - failed,
        results.len(),
        Duration::from_secs(start.elapsed().as_secs())
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
