//! End-to-end acceptance: one PASS/FAIL line per criterion.
//!
//! Criteria 1-5 and 9 are oracle checks on random explicit instances.
//! Criteria 6-8 and 10 pretrain the default toy model once and reuse it.
//! `ACCEPTANCE_ONLY=1,2,3` restricts the run; `ACCEPTANCE_STRICT=1` turns a
//! red criterion into a non-zero exit.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use common::*;
use rand::Rng;
use washlab::corpus::load_bundle;
use washlab::eval::{qa_f1_pair, WashReport};
use washlab::experiment::{self, AblationSummary, ExperimentConfig, Method, Sweep};
use washlab::model::load_checkpoint;
use washlab::numerics::{frobenius_sq, least_squares_fit, Matrix};
use washlab::washer::{self, AscentOptions, InitMode};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Closed forms against independent normal-equation solves.
fn closed_forms() -> Verdict {
    let mut worst_fit: f64 = 0.0;
    let mut worst_edit: f64 = 0.0;
    for seed in 0..100 {
        let mut r = rng(1000 + seed);
        let d_model = r.random_range(1..=8);
        let d_mlp = r.random_range(1..=16);
        let n = r.random_range(d_mlp..=32);
        let u = r.random_range(1..=4);
        let k = random_matrix(&mut r, d_mlp, n);
        let v = random_matrix(&mut r, d_model, n);
        let w = least_squares_fit(&k, &v, 0.0).unwrap();
        worst_fit = worst_fit.max(rel_frob(&w, &normal_equation_fit(&k, &v, 0.0)));

        let ke = random_matrix(&mut r, d_mlp, u);
        let ve = random_matrix(&mut r, d_model, u);
        let delta = washlab::editor::closed_form_delta(&w, &explicit_stats(&k), &ke, &ve, 0.0).unwrap();
        let direct = normal_equation_fit(&k.hstack(&ke).unwrap(), &w.matmul(&k).hstack(&ve).unwrap(), 0.0);
        worst_edit = worst_edit.max(rel_frob(&w.add(&delta), &direct));
    }
    verdict(worst_fit <= 1e-6 && worst_edit <= 1e-6, format!("worst rel. error: fit {worst_fit:.2e}, edit {worst_edit:.2e}"))
}

/// `‖(W₀+Δ)K − V‖² − ‖W₀K − V‖² = ‖ΔK‖²` at the least-squares `W₀`.
fn pythagorean() -> Verdict {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut r = rng(2000 + seed);
        let d_out = r.random_range(1..=8);
        let d_in = r.random_range(1..=16);
        let n = r.random_range(d_in..=32);
        let k = random_matrix(&mut r, d_in, n);
        let v = random_matrix(&mut r, d_out, n);
        let delta = random_matrix(&mut r, d_out, d_in);
        let w0 = normal_equation_fit(&k, &v, 0.0);
        let (k, v, w0, delta) = (to_dense(&k), to_dense(&v), to_dense(&w0), to_dense(&delta));
        let moved: Dense = w0.iter().zip(&delta).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
        let lhs = frob_sq(&sub(&mul(&moved, &k), &v)) - frob_sq(&sub(&mul(&w0, &k), &v));
        let rhs = frob_sq(&mul(&delta, &k));
        worst = worst.max(rel(lhs, rhs));
    }
    verdict(worst <= 1e-6, format!("worst rel. error {worst:.2e}"))
}

/// The ascent against the generalized-eigenvalue bound.
fn optimizer_vs_oracle() -> Verdict {
    let mut worst_ratio = f64::INFINITY;
    let mut worst_slack: f64 = 0.0;
    for seed in 0..50 {
        let mut r = rng(3000 + seed);
        let d_mlp = r.random_range(2..=64);
        let d_model = r.random_range(1..=8);
        let m = r.random_range(1..=32);
        let n = r.random_range(d_mlp..=2 * d_mlp + 8);
        let k0 = random_matrix(&mut r, d_mlp, n);
        let k_w = random_matrix(&mut r, d_mlp, m);
        let stats = explicit_stats(&k0);
        let beta = r.random_range(0.001..0.5);
        let d0 = random_matrix(&mut r, d_model, d_mlp);
        let out = washer::optimize_delta(&d0, &k_w, &stats, beta, &AscentOptions::default()).unwrap();
        let lmax = generalized_top(&k_w.matmul_t(&k_w), &stats.scaled(), washer::default_eps(&stats));
        let bound = beta * frobenius_sq(&k0) * lmax;
        worst_ratio = worst_ratio.min(out.objective / bound);
        worst_slack = worst_slack.max(out.constraint_ratio / beta - 1.0);
    }
    verdict(
        worst_ratio >= 0.99 && worst_slack <= 1e-3,
        format!("worst objective/bound {worst_ratio:.6}, worst constraint slack {worst_slack:.2e}"),
    )
}

/// Analytic gradients against central differences of independently computed values.
fn gradients() -> Verdict {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut r = rng(4000 + seed);
        let (d_out, d_in) = (r.random_range(1..=4), r.random_range(1..=6));
        let (n, u) = (r.random_range(1..=10), r.random_range(1..=4));
        let k0 = random_matrix(&mut r, d_in, n);
        let k_w = random_matrix(&mut r, d_in, u);
        let stats = explicit_stats(&k0);
        let delta = random_matrix(&mut r, d_out, d_in);
        let g_obj = washer::objective_grad(&delta, &k_w);
        let g_con = washer::constraint_grad(&delta, &stats);
        let obj = |d: &Matrix| frob_sq(&mul(&to_dense(d), &to_dense(&k_w)));
        let con = |d: &Matrix| frob_sq(&mul(&to_dense(d), &to_dense(&k0)));
        let h = 1e-6;
        for i in 0..d_out {
            for j in 0..d_in {
                let mut p = delta.clone();
                p.set(i, j, delta.get(i, j) + h);
                let mut q = delta.clone();
                q.set(i, j, delta.get(i, j) - h);
                for (analytic, f) in [(g_obj.get(i, j), &obj as &dyn Fn(&Matrix) -> f64), (g_con.get(i, j), &con)] {
                    let numeric = (f(&p) - f(&q)) / (2.0 * h);
                    worst = worst.max((analytic - numeric).abs() / numeric.abs().max(1e-3));
                }
            }
        }
    }
    verdict(worst <= 1e-4, format!("worst elementwise rel. error {worst:.2e}"))
}

/// `wash_delta_gamma` collapses below the threshold and diverges above it.
fn gamma_phase() -> Verdict {
    let mut worst_norm: f64 = 0.0;
    let mut missed = 0;
    for seed in 0..20 {
        let mut r = rng(5000 + seed);
        let d_in = r.random_range(2..=12);
        let (n, u) = (r.random_range(d_in..=3 * d_in), r.random_range(1..=4));
        let k0 = random_matrix(&mut r, d_in, n);
        let k_w = random_matrix(&mut r, d_in, u);
        let stats = explicit_stats(&k0);
        let lmax = generalized_top(&k_w.matmul_t(&k_w), &stats.scaled(), washer::default_eps(&stats));
        let opts = AscentOptions { seed, ..AscentOptions::default() };
        let below = washer::wash_delta_gamma(4, &k_w, &stats, r.random_range(0.1..0.9) / lmax, &opts).unwrap();
        worst_norm = worst_norm.max(frobenius_sq(&below.delta).sqrt());
        let above = washer::wash_delta_gamma(4, &k_w, &stats, r.random_range(1.1..3.0) / lmax, &opts).unwrap();
        missed += !above.diverged as usize;
    }
    verdict(worst_norm <= 1e-6 && missed == 0, format!("worst ‖Δ‖ below threshold {worst_norm:.2e}, undetected divergences {missed}/20"))
}

fn f1_oracle() -> Verdict {
    // (prediction, gold, overlap, |pred|, |gold|), counted by hand.
    let cases: [(&str, &str, u32, u32, u32); 20] = [
        ("Toorak", "Toorak", 1, 1, 1),
        ("toorak", "TOORAK", 1, 1, 1),
        ("a b", "c", 0, 2, 1),
        ("the openai lab", "openai", 1, 3, 1),
        ("openai", "the openai lab", 1, 1, 3),
        ("a b c d", "a", 1, 4, 1),
        ("a b", "a b c", 2, 2, 3),
        ("a a a", "a", 1, 3, 1),
        ("a a", "a a b", 2, 2, 3),
        ("b a", "a b", 2, 2, 2),
        ("James_Gobbo resides in Toorak", "Toorak", 1, 4, 1),
        ("James Gobbo", "James_Gobbo", 0, 2, 1),
        ("x, y; z!", "z y x", 3, 3, 3),
        ("in in in", "in Toorak", 1, 3, 2),
        ("New York City", "new york", 2, 3, 2),
        ("p q r s t", "q s u v", 2, 5, 4),
        ("Paris <eos>", "Paris", 1, 2, 1),
        ("one two three four five six", "six five", 2, 6, 2),
        ("x", "x y z w", 1, 1, 4),
        ("m n", "n m", 2, 2, 2),
    ];
    let mut wrong = Vec::new();
    for (pred, gold, o, p, g) in cases {
        let expected = if o == 0 {
            0.0
        } else {
            let (pr, rc) = (o as f64 / p as f64, o as f64 / g as f64);
            2.0 * pr * rc / (pr + rc)
        };
        if qa_f1_pair(pred, gold) != expected {
            wrong.push(format!("{pred:?}/{gold:?}"));
        }
    }
    let has = |v: f64| cases.iter().any(|c| qa_f1_pair(c.0, c.1) == v);
    verdict(
        wrong.is_empty() && has(1.0) && has(0.0) && has(0.5),
        format!("{} of 20 pairs exact{}", 20 - wrong.len(), if wrong.is_empty() { String::new() } else { format!(", wrong: {}", wrong.join(" ")) }),
    )
}

/// Everything the trained-model criteria share.
struct Trained {
    dir: tempfile::TempDir,
    law: WashReport,
    pipeline_secs: f64,
}

fn relative_increase(r: &WashReport) -> f64 {
    (r.after.fluency_log_ppl - r.before.fluency_log_ppl) / r.before.fluency_log_ppl
}

fn train_and_wash() -> Trained {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let out = experiment::run_pipeline(&ExperimentConfig::default(), &dir.path().join("law"), experiment::CODE_VERSION).unwrap();
    Trained { dir, law: out.report.unwrap(), pipeline_secs: t.elapsed().as_secs_f64() }
}

fn end_to_end(t: &Trained) -> Verdict {
    let r = &t.law;
    let c = &r.counts;
    let fact_acc = (r.before.washed_acc * c.washed as f64 + r.before.retained_acc * c.retained as f64) / (c.washed + c.retained) as f64;
    let drop = r.before.reasoning_acc - r.after.reasoning_acc;
    let ppl = relative_increase(r);
    let checks = [
        fact_acc >= 0.95,
        r.before.reasoning_acc >= 0.90,
        r.after.washed_acc <= 0.10,
        r.after.retained_acc >= 0.80,
        drop <= 0.05,
        ppl <= 0.15,
        t.pipeline_secs <= 20.0 * 60.0,
    ];
    verdict(
        checks.iter().all(|&b| b),
        format!(
            "pretrained fact acc {fact_acc:.3}, reasoning {:.3}; washed {:.3}, retained {:.3}, reasoning drop {drop:+.3}, log-ppl {:+.1}%, {:.0} s",
            r.before.reasoning_acc,
            r.after.washed_acc,
            r.after.retained_acc,
            100.0 * ppl,
            t.pipeline_secs
        ),
    )
}

fn wash_with(t: &Trained, method: Method) -> WashReport {
    let cfg = ExperimentConfig { method, ..ExperimentConfig::default() };
    let base = t.dir.path().join("law");
    let out = experiment::run_wash(
        &cfg,
        &base.join("pretrained.ckpt"),
        &base.join("corpus"),
        None,
        &t.dir.path().join(method.tag()),
        experiment::CODE_VERSION,
    )
    .unwrap();
    out.report.unwrap()
}

fn baselines(t: &Trained) -> Verdict {
    let start = Instant::now();
    let memit = wash_with(t, Method::Memit);
    let ft = wash_with(t, Method::Ft);
    let ftul = wash_with(t, Method::FtUl);
    let secs = start.elapsed().as_secs_f64() + t.pipeline_secs;
    let law = &t.law;
    let pass = relative_increase(&ftul) > relative_increase(law) && memit.after.washed_acc >= law.after.washed_acc - 0.02 && secs <= 30.0 * 60.0;
    verdict(
        pass,
        format!(
            "log-ppl increase ft-ul {:+.1}% vs law {:+.1}%; washed memit {:.3} vs law {:.3} (ft {:.3}, retained memit {:.3} ft {:.3} ft-ul {:.3}); {:.0} s",
            100.0 * relative_increase(&ftul),
            100.0 * relative_increase(law),
            memit.after.washed_acc,
            law.after.washed_acc,
            ft.after.washed_acc,
            memit.after.retained_acc,
            ft.after.retained_acc,
            ftul.after.retained_acc,
            secs
        ),
    )
}

fn ablations(t: &Trained) -> Verdict {
    let start = Instant::now();
    let base = t.dir.path().join("law");
    let model = load_checkpoint(&base.join("pretrained.ckpt")).unwrap();
    let corpus = load_bundle(&base.join("corpus")).unwrap();
    let cfg = ExperimentConfig::default();
    let seeds = [0, 1, 2];
    let run = |sweep: Sweep| -> Vec<AblationSummary> {
        let rows = experiment::run_ablation(&model, &corpus, &cfg, &sweep, &seeds).unwrap();
        experiment::summarize(&rows)
    };
    let init = run(Sweep::Init(vec![InitMode::Memit, InitMode::Random]));
    let beta = run(Sweep::Beta(vec![1.05, 1.1, 1.5]));
    let se = run(Sweep::Se(vec![true, false]));
    let a = init[0].washed_acc <= init[1].washed_acc;
    let b = beta.windows(2).all(|w| w[1].washed_acc <= w[0].washed_acc && w[1].retained_acc <= w[0].retained_acc);
    let c = se[0].washed_acc <= se[1].washed_acc;
    let secs = start.elapsed().as_secs_f64();
    let fmt = |s: &[AblationSummary]| s.iter().map(|x| format!("{} {:.3}/{:.3}", x.label, x.washed_acc, x.retained_acc)).collect::<Vec<_>>().join(", ");
    verdict(
        a && b && c && secs <= 45.0 * 60.0,
        format!(
            "(a) {} [{}]; (b) {} [{}]; (c) {} [{}]; washed/retained seed means, {:.0} s",
            if a { "holds" } else { "fails" },
            fmt(&init),
            if b { "holds" } else { "fails" },
            fmt(&beta),
            if c { "holds" } else { "fails" },
            fmt(&se),
            secs
        ),
    )
}

fn reproducible(t: &Trained) -> Verdict {
    let manifest = t.dir.path().join("law").join(experiment::MANIFEST_NAME);
    let again = experiment::rerun(&manifest, &t.dir.path().join("rerun"), experiment::CODE_VERSION).unwrap();
    let outputs: Vec<&String> = again.manifest.outputs.keys().collect();
    let same_report = std::fs::read(report_path(&t.dir.path().join("law"))).unwrap() == std::fs::read(report_path(&t.dir.path().join("rerun"))).unwrap();
    verdict(
        again.identical() && same_report,
        format!("outputs compared {outputs:?}, mismatches {:?}", again.mismatches),
    )
}

fn report_path(dir: &Path) -> std::path::PathBuf {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_str().unwrap().starts_with("report-"))
        .unwrap()
}

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let wanted = |i: u32| only.as_ref().is_none_or(|s| s.contains(&i));
    let mut red = 0;
    let mut report = |i: u32, name: &str, f: &dyn Fn() -> Verdict| {
        if !wanted(i) {
            return;
        }
        let start = Instant::now();
        let v = f();
        red += !v.pass as usize;
        println!(
            "criterion {i:>2} {}: {name}: {} ({:.1} s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    };
    report(1, "closed forms", &closed_forms);
    report(2, "pythagorean identity", &pythagorean);
    report(3, "optimizer vs eigenvalue bound", &optimizer_vs_oracle);
    report(4, "gradient check", &gradients);
    report(5, "gamma phase behaviour", &gamma_phase);
    if [6, 7, 8, 10].iter().any(|&i| wanted(i)) {
        let trained = train_and_wash();
        report(6, "end-to-end wash", &|| end_to_end(&trained));
        report(7, "baseline ordering", &|| baselines(&trained));
        report(8, "ablation trends", &|| ablations(&trained));
        report(9, "F1 oracle", &f1_oracle);
        report(10, "reproducibility", &|| reproducible(&trained));
    } else {
        report(9, "F1 oracle", &f1_oracle);
    }
    println!("acceptance: {red} red");
    if strict && red > 0 {
        std::process::exit(1);
    }
}
