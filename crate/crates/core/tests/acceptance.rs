//! Acceptance checks, one verdict line per criterion.
//!
//! Run a subset with `cargo test -p freqlab --test acceptance -- 3 5`.
//! The process exits non-zero on any failure except a check whose input data
//! is not present on this machine; that line still reads FAIL.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use freqlab::analysis::{theorem1_probe, trace_spectral_profile, GraphFamily, ProbeConfig};
use freqlab::config::RunConfig;
use freqlab::dataset::{build_split, ingest, synthesize, synthesize_cycle, LogFormat, SynthConfig};
use freqlab::evalharness::{random_baseline, rank_metrics, EvalConfig};
use freqlab::glpf::{filter_with_basis, oracle_basis, polynomial_filter, PolyFilterSpec};
use freqlab::graph::{build_cooccurrence, CooccurrenceGraph};
use freqlab::model::train::{batch_loss, batch_loss_and_grads, make_example};
use freqlab::model::{
    concat_inputs, fuse, pretrain_id_embeddings, text_surrogate_embeddings, train, Activation, BackboneConfig,
    FusionMlp, ModelConfig, SkipGramConfig, TfmSettings, TrainConfig,
};
use freqlab::numcore::tape::softmax_rows;
use freqlab::numcore::{dft, finite_difference_check, sym_eigendecompose, DenseMatrix, Direction};
use freqlab::pipeline::run_end_to_end;
use freqlab::spectral::{gft, SpectralBasis};
use freqlab::tfm::{butterworth_gains, dft_span_residual, ring_graph_basis, tfm_apply, tfm_apply_prefix, ButterworthSpec};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Locality-family Rayleigh violation rate allowed, fixed by a brute-force
/// pilot on seeds 9001..=9003 that recorded 0 violations in 3000 trials per ρ.
const PILOT_THRESHOLD: f64 = 1e-3;

enum Verdict {
    Pass(String),
    Fail(String),
    /// Required input is not available here.
    Missing(String),
}

fn gauss(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> CooccurrenceGraph {
    let p = rng.random_range(0.02..0.3);
    let mut triples = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                triples.push((i, j, rng.random_range(1..6) as f64));
            }
        }
    }
    CooccurrenceGraph::from_triples(n, triples).unwrap()
}

fn check(ok: bool, msg: String) -> Verdict {
    if ok {
        Verdict::Pass(msg)
    } else {
        Verdict::Fail(msg)
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn c1_glpf_oracle() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=200);
        let graph = random_graph(&mut rng, n);
        let e = gauss(&mut rng, n, 50);
        let basis = oracle_basis(&graph).unwrap();
        let mut specs: Vec<PolyFilterSpec> = [0.0, 0.25, 0.5, 1.0]
            .iter()
            .map(|&a| PolyFilterSpec::first_order(a).unwrap())
            .collect();
        specs.push(PolyFilterSpec::new((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        for spec in &specs {
            let fast = polynomial_filter(&graph, spec, &e).unwrap();
            let gains: Vec<f64> = basis
                .eigenvalues
                .iter()
                .map(|&l| spec.coefficients.iter().enumerate().map(|(k, c)| c * l.powi(k as i32)).sum())
                .collect();
            let exact = filter_with_basis(&basis, &gains, &e).unwrap();
            worst = worst.max(fast.rel_diff(&exact));
        }
    }
    let el = t0.elapsed();
    check(
        worst <= 1e-10 && el < Duration::from_secs(60),
        format!("worst relative error {worst:.2e} over 100 graphs x 5 filters in {}", secs(el)),
    )
}

fn c2_ring_bridge() -> Verdict {
    let mut eig_err = 0.0f64;
    let mut span = 0.0f64;
    for t in 3..=64usize {
        let basis = ring_graph_basis(t).unwrap();
        let mut got = basis.eigenvalues.clone();
        let mut want: Vec<f64> = (0..t).map(|k| 2.0 - 2.0 * (2.0 * PI * k as f64 / t as f64).cos()).collect();
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        for (a, b) in got.iter().zip(&want) {
            eig_err = eig_err.max((a - b).abs());
        }
        span = span.max(dft_span_residual(&basis));
    }
    check(
        eig_err <= 1e-9 && span < 1e-8,
        format!("eigenvalue error {eig_err:.2e}, DFT span residual {span:.2e} for T in 3..=64"),
    )
}

fn c3_smoothing_probe() -> Verdict {
    let t0 = Instant::now();
    let spec = ButterworthSpec::new(0.3, 2).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    let families = [
        GraphFamily::Ring,
        GraphFamily::Locality { rho: 0.3 },
        GraphFamily::Locality { rho: 0.5 },
        GraphFamily::Locality { rho: 0.8 },
    ];
    for (i, family) in families.into_iter().enumerate() {
        let mut report = theorem1_probe(&ProbeConfig {
            family,
            spec,
            trials: 1000,
            seed: 1 + i as u64,
            ..ProbeConfig::default()
        })
        .unwrap();
        let decreasing = report.mean_smoothness_after < report.mean_smoothness_before;
        let within = match family {
            GraphFamily::Ring => report.rayleigh_violations == 0,
            GraphFamily::Locality { .. } => {
                report.threshold = Some(PILOT_THRESHOLD);
                report.rayleigh_violation_rate() <= PILOT_THRESHOLD
            }
        };
        ok &= decreasing && within;
        parts.push(format!(
            "{family:?}: {} violations, quadratic mean {:.3} -> {:.3}",
            report.rayleigh_violations, report.mean_smoothness_before, report.mean_smoothness_after
        ));
    }
    let el = t0.elapsed();
    ok &= el < Duration::from_secs(120);
    check(ok, format!("{} ({})", parts.join("; "), secs(el)))
}

fn c4_numerics() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);

    let mut gft_err = 0.0f64;
    let mut recon_err = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(5..=80);
        let graph = random_graph(&mut rng, n);
        let l = graph.dense_laplacian();
        let eig = sym_eigendecompose(&l).unwrap();
        let lam = DenseMatrix::from_fn(n, n, |i, j| if i == j { eig.eigenvalues[i] } else { 0.0 });
        let back = eig.eigenvectors.matmul(&lam).matmul_t(&eig.eigenvectors);
        recon_err = recon_err.max(back.max_abs_diff(&l));
        let basis = SpectralBasis::from_laplacian(&l).unwrap();
        let f = gauss(&mut rng, n, 4);
        let c = gft(&basis, &f, Direction::Forward).unwrap();
        gft_err = gft_err.max((c.frobenius_sq() - f.frobenius_sq()).abs() / f.frobenius_sq());
    }

    let mut dft_parseval = 0.0f64;
    let mut roundtrip = 0.0f64;
    for _ in 0..1000 {
        let t = if rng.random_bool(0.5) {
            1 << rng.random_range(0..=9)
        } else {
            rng.random_range(1..=100)
        };
        let x: Vec<Complex64> = (0..t)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let fx = dft(&x, Direction::Forward).unwrap();
        let ex: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        let ef: f64 = fx.iter().map(|v| v.norm_sqr()).sum::<f64>() / t as f64;
        dft_parseval = dft_parseval.max((ex - ef).abs() / ex);
        let back = dft(&fx, Direction::Inverse).unwrap();
        for (a, b) in x.iter().zip(&back) {
            roundtrip = roundtrip.max((a - b).norm());
        }
    }

    let model = ModelConfig {
        d_id: 6,
        d_text: 4,
        hidden: 12,
        activation: Activation::Gelu,
        mlp_seed: 41,
        backbone: BackboneConfig {
            n_layers: 4,
            d_model: 16,
            heads: 2,
            ffn_mult: 4,
            seed: 42,
        },
        tfm: TfmSettings::on(ButterworthSpec::new(0.3, 2).unwrap()),
    };
    let encoder = model.encoder().unwrap();
    let n_items = 30;
    let inputs = gauss(&mut rng, n_items, 10);
    let examples: Vec<_> = (0..2)
        .map(|_| {
            let seq: Vec<usize> = (0..9).map(|_| rng.random_range(0..n_items)).collect();
            make_example(&seq, n_items, 8, &mut rng).unwrap()
        })
        .collect();
    let mlp = model.init_mlp();
    let (_, grads) = batch_loss_and_grads(&mlp, &inputs, &encoder, &examples).unwrap();
    let params: Vec<DenseMatrix> = mlp.params().into_iter().cloned().collect();
    let fd = finite_difference_check(
        |p| batch_loss(&FusionMlp::from_params(p, Activation::Gelu)?, &inputs, &encoder, &examples),
        &params,
        &grads,
        1e-5,
    )
    .unwrap()
    .worst();

    let el = t0.elapsed();
    check(
        gft_err <= 1e-10
            && dft_parseval <= 1e-10
            && recon_err <= 1e-8
            && roundtrip <= 1e-12
            && fd <= 1e-4
            && el < Duration::from_secs(300),
        format!(
            "GFT Parseval {gft_err:.1e}, DFT Parseval {dft_parseval:.1e}, reconstruction {recon_err:.1e}, \
             roundtrip {roundtrip:.1e}, gradient {fd:.1e} ({})",
            secs(el)
        ),
    )
}

fn c5_butterworth() -> Verdict {
    let mut ok = true;
    let mut cutoff_err = 0.0f64;
    for (wc, n) in [(0.3, 2), (0.1, 1), (0.5, 4), (0.9, 8), (1.0, 3)] {
        let spec = ButterworthSpec::new(wc, n).unwrap();
        cutoff_err = cutoff_err.max((spec.magnitude(wc) - 1.0 / 2f64.sqrt()).abs());
        let grid: Vec<f64> = (0..=1000).map(|i| spec.magnitude(i as f64 / 1000.0)).collect();
        ok &= grid.windows(2).all(|w| w[1] <= w[0]);
        for t in 1..=128 {
            let g = butterworth_gains(&spec, t).unwrap().gains;
            ok &= g[0] == 1.0;
            ok &= g[..=t / 2].windows(2).all(|w| w[1] <= w[0]);
        }
    }
    ok &= cutoff_err <= 1e-12;

    let spec = ButterworthSpec::new(0.3, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    let mut prefix_worst = 0.0f64;
    for _ in 0..1000 {
        let (t, d) = (rng.random_range(1..=64), rng.random_range(1..=16));
        let h = gauss(&mut rng, t, d);
        let e = h.frobenius();
        worst = worst.max(tfm_apply(&h, &spec).unwrap().frobenius() / e);
        prefix_worst = prefix_worst.max(tfm_apply_prefix(&h, &spec).unwrap().frobenius() / e);
    }
    ok &= worst <= 1.0 + 1e-12;
    check(
        ok,
        format!(
            "cutoff gain error {cutoff_err:.1e}, largest energy ratio {worst:.6} over 1000 matrices \
             (prefix mode, not covered: {prefix_worst:.4})"
        ),
    )
}

fn c6_protocol() -> Verdict {
    let mut fails = Vec::new();
    let mut notes = Vec::new();

    let r1 = rank_metrics(&[0.9, 0.1, 0.2], 0, 10).unwrap();
    let r3 = rank_metrics(&[0.5, 0.9, 0.7], 0, 10).unwrap();
    if (r1.ndcg - 1.0).abs() > 1e-15 || (r3.ndcg - 0.5).abs() > 1e-15 {
        fails.push(format!("ndcg spot checks gave {} and {}", r1.ndcg, r3.ndcg));
    }

    let synth = synthesize(&SynthConfig {
        users: 1500,
        items: 400,
        seed: 606,
        ..SynthConfig::default()
    })
    .unwrap();
    let split = build_split(&synth.log, 5, 50).unwrap();
    let rb = random_baseline(&split, freqlab::dataset::Phase::Test, &EvalConfig::default()).unwrap();
    notes.push(format!("random recall@10 {:.4} over {} users", rb.recall, rb.users));
    if rb.users < 1000 || (rb.recall - 0.099).abs() > 0.02 {
        fails.push("random floor outside 0.099 ± 0.02".into());
    }

    let lastfm = std::env::var_os("FREQLAB_LASTFM").map(PathBuf::from);
    let table = match lastfm {
        None => Err("FREQLAB_LASTFM is not set, LastFM statistics not checked".to_string()),
        Some(p) if !p.exists() => Err(format!("{} does not exist", p.display())),
        Some(p) => {
            let split = build_split(&ingest(&p, LogFormat::Tsv).unwrap(), 5, 50).unwrap();
            let s = &split.stats;
            notes.push(format!(
                "LastFM {} users, {} items, {} interactions, avg {:.2}",
                s.users, s.items, s.interactions, s.avg_len
            ));
            if s.users != 1090 || s.items != 3646 || s.interactions != 52551 || (s.avg_len - 48.21).abs() >= 0.005 {
                fails.push("LastFM statistics differ".into());
            }
            Ok(())
        }
    };
    let msg = notes.join("; ");
    match (fails.is_empty(), table) {
        (true, Ok(())) => Verdict::Pass(msg),
        (true, Err(why)) => Verdict::Missing(format!("{why}; {msg}")),
        (false, _) => Verdict::Fail(format!("{}; {msg}", fails.join("; "))),
    }
}

fn c7_trend() -> Verdict {
    let t0 = Instant::now();
    let mut wins = 0;
    for rep in 0..20u64 {
        let out = synthesize(&SynthConfig {
            users: 500,
            items: 300,
            mean_len: 20,
            rho: 0.5,
            seed: 100 + rep,
            ..SynthConfig::default()
        })
        .unwrap();
        let split = build_split(&out.log, 5, 50).unwrap();
        let graph = build_cooccurrence(&split, true).unwrap();
        let id = pretrain_id_embeddings(&split, &SkipGramConfig { seed: rep, ..Default::default() })
            .unwrap()
            .table;
        let text = text_surrogate_embeddings(&split, 50, rep).unwrap();
        let mut model = ModelConfig::default();
        model.backbone.seed = 1000 + rep;
        model.mlp_seed = 2000 + rep;
        let tokens = fuse(&id, &text, &model.init_mlp()).unwrap();
        let seqs: Vec<Vec<usize>> = split.sequences.iter().map(|s| s.train().to_vec()).collect();
        let off = trace_spectral_profile(&model.encoder().unwrap(), &tokens, &seqs, &graph, 4).unwrap();
        model.tfm = TfmSettings::on(ButterworthSpec::new(0.3, 2).unwrap());
        let on = trace_spectral_profile(&model.encoder().unwrap(), &tokens, &seqs, &graph, 4).unwrap();
        let last = off.n_layers() - 1;
        if on.shares()[last][0] > off.shares()[last][0] {
            wins += 1;
        }
    }
    let el = t0.elapsed();
    check(
        wins >= 19 && el < Duration::from_secs(900),
        format!("TFM raised final-layer band-1 share in {wins}/20 repetitions ({})", secs(el)),
    )
}

fn c8_learning() -> Verdict {
    let t0 = Instant::now();
    let log = synthesize_cycle(128, 200, 12, 1).unwrap();
    let split = build_split(&log, 5, 50).unwrap();
    let id = pretrain_id_embeddings(&split, &SkipGramConfig::default()).unwrap().table;
    let text = text_surrogate_embeddings(&split, 50, 1).unwrap();
    let inputs = concat_inputs(&id, &text).unwrap();
    let cfg = TrainConfig {
        lr: 5e-4,
        epochs: 50,
        patience: 50,
        ..TrainConfig::default()
    };
    let out = train(&split, &inputs, &ModelConfig::default(), &cfg, &EvalConfig::default()).unwrap();
    let hit = out.log.iter().find(|e| e.valid_recall >= 1.0).map(|e| e.epoch);
    let separable = hit.is_some();

    let synth = synthesize(&SynthConfig {
        users: 1090,
        items: 3646,
        mean_len: 48,
        rho: 0.5,
        seed: 42,
        ..SynthConfig::default()
    })
    .unwrap();
    let split = build_split(&synth.log, 5, 50).unwrap();
    let mut run = RunConfig::default();
    run.glpf.enabled = true;
    run.glpf.alpha = 0.3;
    run.model.tfm = TfmSettings::on(ButterworthSpec::new(0.3, 2).unwrap());
    run.train.lr = 5e-4;
    run.train.epochs = 3;
    let r = run_end_to_end(&split, &run).unwrap();
    let beats = r.test.ndcg > r.random.ndcg.max(r.popularity.ndcg) && r.test.recall > r.random.recall.max(r.popularity.recall);
    let el = t0.elapsed();
    check(
        separable && beats && el < Duration::from_secs(3600),
        format!(
            "separable recall@10 = 1 at epoch {}; large synthetic ndcg/recall {:.4}/{:.4} vs random {:.4}/{:.4}, \
             popularity {:.4}/{:.4} ({})",
            hit.map_or("never".to_string(), |e| e.to_string()),
            r.test.ndcg,
            r.test.recall,
            r.random.ndcg,
            r.random.recall,
            r.popularity.ndcg,
            r.popularity.recall,
            secs(el)
        ),
    )
}

fn time_calls(calls: usize, mut f: impl FnMut()) -> f64 {
    for _ in 0..3 {
        f();
    }
    let t0 = Instant::now();
    for _ in 0..calls {
        f();
    }
    t0.elapsed().as_secs_f64() / calls as f64
}

fn c9_performance() -> Verdict {
    let spec = ButterworthSpec::new(0.3, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let d = 64;
    let mut tfm_t = Vec::new();
    let mut att_t = Vec::new();
    for t in [256, 512] {
        let h = gauss(&mut rng, t, d);
        tfm_t.push(time_calls(100, || {
            std::hint::black_box(tfm_apply(&h, &spec).unwrap());
        }));
        let (q, k, v) = (gauss(&mut rng, t, d), gauss(&mut rng, t, d), gauss(&mut rng, t, d));
        att_t.push(time_calls(100, || {
            let s = q.matmul_t(&k).scale(1.0 / (d as f64).sqrt());
            std::hint::black_box(softmax_rows(&s, true).matmul(&v));
        }));
    }
    let tfm_ratio = tfm_t[1] / tfm_t[0];
    let att_ratio = att_t[1] / att_t[0];
    check(
        tfm_ratio < 3.0 && att_ratio >= 3.5,
        format!("time(512)/time(256): TFM {tfm_ratio:.2}, attention {att_ratio:.2}"),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, fn() -> Verdict); 9] = [
        (1, c1_glpf_oracle),
        (2, c2_ring_bridge),
        (3, c3_smoothing_probe),
        (4, c4_numerics),
        (5, c5_butterworth),
        (6, c6_protocol),
        (7, c7_trend),
        (8, c8_learning),
        (9, c9_performance),
    ];
    let mut failed = 0;
    for (n, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        match run() {
            Verdict::Pass(m) => println!("criterion {n}: PASS  {m}"),
            Verdict::Fail(m) => {
                failed += 1;
                println!("criterion {n}: FAIL  {m}");
            }
            Verdict::Missing(m) => println!("criterion {n}: FAIL  (input unavailable) {m}"),
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
