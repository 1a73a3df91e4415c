//! Acceptance gate: one PASS/FAIL line per criterion, each held to its
//! tolerance and wall-clock budget. Runs without the libtest harness so the
//! report is always printed.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use jointlens::classifier::{measure_latency, ConstantScorer};
use jointlens::service::{read_events, replay_state, run_pipeline, CaseState, EventKind, FsyncPolicy, PipelineOptions, ReviewVerdict, Store, StoreConfig};
use jointlens::soxai::tsne::{joint_probabilities, kl_divergence, kl_gradient, squared_distances};
use jointlens::soxai::{embed_explanation, tsne, TsneParams};
use jointlens::synthgen::{generate_dataset, generate_joint, split_counts, stratified_split, DatasetConfig, JointSpec, Split};
use jointlens::triage::{evaluate, format_eval_table, EvalReport};
use jointlens::trust::{net_trust_score, trust_matrix, TrustParams};
use jointlens::xai::{deletion_score, explain, load_explanation, random_equal_area_mask, XaiParams};
use jointlens::{
    preprocess, Confidence, DatasetManifest, DefectKind, Error, Label, ManifestEntry, NormalizedImage, ReferenceScorer, ScoreRecord,
    ScorerBackend, ScorerFailure, TriageThresholds,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rec(i: usize, c: f64, label: Label) -> ScoreRecord {
    ScoreRecord::new(format!("r{i}"), c, Some(label)).unwrap()
}

fn random_records(rng: &mut ChaCha8Rng, n: usize) -> Vec<ScoreRecord> {
    (0..n)
        .map(|i| {
            let label = if rng.random_bool(0.5) { Label::Defective } else { Label::NonDefective };
            let c = match rng.random_range(0..10) {
                0 => 0.0,
                1 => 1.0,
                2 => 0.5,
                _ => rng.random_range(0.0..=1.0),
            };
            rec(i, c, label)
        })
        .collect()
}

/// Parses the three percentage columns of a formatted table row.
fn table_row(table: &str, name: &str) -> Option<[f64; 3]> {
    let line = table.lines().find(|l| l.starts_with(name))?;
    let v: Vec<f64> = line[name.len()..].split_whitespace().map(|t| t.parse().unwrap()).collect();
    (v.len() == 3).then(|| [v[0], v[1], v[2]])
}

fn metric_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for set in 0..1000 {
        let n = rng.random_range(1..300);
        let recs = random_records(&mut rng, n);
        let t = rng.random_range(0.0..=1.0);
        let r = evaluate(&recs, t).map_err(|e| e.to_string())?;
        let sum = r.accuracy + r.overkill + r.escape;
        ensure!((sum - 1.0).abs() <= 1e-9, "set {set}: sum {sum}");
        // brute-force confusion counts
        let fp = recs
            .iter()
            .filter(|x| x.confidence.value() >= t && x.oracle_label == Some(Label::NonDefective))
            .count();
        let fneg = recs
            .iter()
            .filter(|x| x.confidence.value() < t && x.oracle_label == Some(Label::Defective))
            .count();
        ensure!(
            (r.overkill - fp as f64 / n as f64).abs() <= 1e-12 && (r.escape - fneg as f64 / n as f64).abs() <= 1e-12,
            "set {set}: rates disagree with direct counts"
        );
        let pct: f64 = r.percent_strings().iter().map(|s| s.parse::<f64>().unwrap()).sum();
        ensure!((pct - 100.0).abs() < 1e-9, "set {set}: printed percentages sum to {pct}");
    }
    // rows: (name, tp, tn, fp, fn) over 1000 joints, expected one-decimal columns
    let rows = [
        ("model-a", 500, 366, 84, 50, [86.6, 8.4, 5.0]),
        ("model-b", 500, 411, 50, 39, [91.1, 5.0, 3.9]),
    ];
    let reports: Vec<(&str, EvalReport)> = rows
        .iter()
        .map(|&(name, tp, tn, fp, fneg, _)| (name, EvalReport::from_counts(tp, tn, fp, fneg, 0.5).unwrap()))
        .collect();
    let refs: Vec<(&str, &EvalReport)> = reports.iter().map(|(n, r)| (*n, r)).collect();
    let table = format_eval_table(&refs);
    for &(name, .., want) in &rows {
        let got = table_row(&table, name).ok_or(format!("row {name} missing"))?;
        ensure!(got == want, "{name}: {got:?} != {want:?}");
        let total = got.iter().sum::<f64>();
        ensure!((total - 100.0).abs() < 1e-9, "{name}: row sums to {total}");
    }
    Ok("1000 random sets sum to 1; 86.6+8.4+5.0 and 91.1+5.0+3.9 = 100.0".into())
}

fn hundred_joints() -> Check {
    let mut recs = Vec::new();
    for i in 0..46 {
        recs.push(rec(i, 0.9, Label::Defective));
    }
    for i in 46..91 {
        recs.push(rec(i, 0.1, Label::NonDefective));
    }
    for i in 91..96 {
        recs.push(rec(i, 0.8, Label::NonDefective));
    }
    for i in 96..100 {
        recs.push(rec(i, 0.2, Label::Defective));
    }
    let r = evaluate(&recs, 0.5).map_err(|e| e.to_string())?;
    ensure!(
        r.accuracy == 0.91 && r.overkill == 0.05 && r.escape == 0.04,
        "got {} / {} / {}",
        r.accuracy,
        r.overkill,
        r.escape
    );
    let p = r.percent_strings();
    ensure!(p == ["91.0", "5.0", "4.0"], "printed {p:?}");
    Ok("accuracy 91.0%, overkill 5.0%, escape 4.0%".into())
}

/// Counts calls; call 19 is slow and call 20 moderately slow, so the
/// report's extremes reveal exactly which calls were timed.
struct CountingBackend {
    calls: AtomicUsize,
}

impl ScorerBackend for CountingBackend {
    fn score(&self, _: &NormalizedImage) -> Result<Confidence, ScorerFailure> {
        let i = self.calls.fetch_add(1, Ordering::SeqCst);
        match i {
            19 => thread::sleep(Duration::from_millis(40)),
            20 => thread::sleep(Duration::from_millis(8)),
            _ => {}
        }
        Ok(Confidence::saturating(0.5))
    }
}

fn latency_protocol() -> Check {
    let b = CountingBackend { calls: AtomicUsize::new(0) };
    let img = NormalizedImage::filled([0.5; 3]);
    let r = measure_latency(&b, &img, 20, 100).map_err(|e| e.to_string())?;
    let calls = b.calls.load(Ordering::SeqCst);
    ensure!(calls == 120, "{calls} backend calls, expected 20 + 100");
    ensure!(r.warmups == 20 && r.runs == 100, "report says {}+{}", r.warmups, r.runs);
    ensure!(r.max_seconds < 0.040, "a warm-up call was timed (max {:.4}s)", r.max_seconds);
    ensure!(r.max_seconds >= 0.008, "first timed call missing (max {:.4}s)", r.max_seconds);
    ensure!(
        r.mean_seconds >= 0.008 / 100.0 && r.mean_seconds <= r.max_seconds && r.min_seconds <= r.mean_seconds,
        "mean {:.6}s inconsistent with 100 samples",
        r.mean_seconds
    );
    Ok(format!("120 calls, 20 untimed, mean of 100 = {:.3} ms", r.mean_seconds * 1e3))
}

/// Independent question-answer trust.
fn brute_qa(c: f64, oracle: Label, t: f64, a: f64, b: f64) -> f64 {
    let says_defect = c >= t;
    let answer_conf = if says_defect { c } else { 1.0 - c };
    if says_defect == oracle.is_defective() {
        answer_conf.powf(a)
    } else {
        (1.0 - answer_conf).powf(b)
    }
}

fn trust_analytics() -> Check {
    let unit = TrustParams::default();
    let perfect: Vec<_> = (0..50)
        .map(|i| if i % 2 == 0 { rec(i, 1.0, Label::Defective) } else { rec(i, 0.0, Label::NonDefective) })
        .collect();
    let s = net_trust_score(&perfect, 0.5, &unit).map_err(|e| e.to_string())?;
    ensure!(s == 1.0, "perfect classifier scored {s}");
    let wrong: Vec<_> = (0..50)
        .map(|i| if i % 2 == 0 { rec(i, 0.0, Label::Defective) } else { rec(i, 1.0, Label::NonDefective) })
        .collect();
    let s = net_trust_score(&wrong, 0.5, &unit).map_err(|e| e.to_string())?;
    ensure!(s == 0.0, "always-wrong classifier scored {s}");

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for fixture in 0..200 {
        let n = rng.random_range(1..120);
        let recs = random_records(&mut rng, n);
        let (a, b) = (rng.random_range(0.1..4.0), rng.random_range(0.1..4.0));
        let t = rng.random_range(0.05..0.95);
        let params = TrustParams::new(a, b).unwrap();
        let got = net_trust_score(&recs, t, &params).map_err(|e| e.to_string())?;
        let qa: Vec<f64> = recs
            .iter()
            .map(|r| brute_qa(r.confidence.value(), r.oracle_label.unwrap(), t, a, b))
            .collect();
        let want = qa.iter().sum::<f64>() / n as f64;
        ensure!((got - want).abs() <= 1e-12, "fixture {fixture}: {got} vs brute force {want}");
        let m = trust_matrix(&recs, t, &params).map_err(|e| e.to_string())?;
        for o in Label::ALL {
            for p in Label::ALL {
                let cell: Vec<f64> = recs
                    .iter()
                    .zip(&qa)
                    .filter(|(r, _)| r.oracle_label == Some(o) && (r.confidence.value() >= t) == p.is_defective())
                    .map(|(_, &q)| q)
                    .collect();
                let want = (!cell.is_empty()).then(|| cell.iter().sum::<f64>() / cell.len() as f64);
                let got = m.cells[o.index()][p.index()];
                let same = match (got, want) {
                    (Some(g), Some(w)) => (g - w).abs() <= 1e-12,
                    (None, None) => true,
                    _ => false,
                };
                ensure!(same, "fixture {fixture}: cell [{o}][{p}] {got:?} vs {want:?}");
            }
        }
    }

    for set in 0..500 {
        let n = rng.random_range(1..200);
        let recs = random_records(&mut rng, n);
        let m = trust_matrix(&recs, 0.5, &unit).map_err(|e| e.to_string())?;
        let diag = [m.cells[0][0], m.cells[1][1]];
        let off = [m.cells[0][1], m.cells[1][0]];
        for d in diag.into_iter().flatten() {
            ensure!(d >= 0.5, "set {set}: diagonal {d} < 0.5");
        }
        for o in off.into_iter().flatten() {
            ensure!(o <= 0.5, "set {set}: off-diagonal {o} > 0.5");
        }
    }
    Ok("1.0 / 0.0 extremes; 200 mixed fixtures exact to 1e-12; 500 sets diagonal-dominant".into())
}

fn joint(seed: u64, kind: DefectKind) -> (NormalizedImage, jointlens::Mask) {
    let j = generate_joint(&JointSpec::new(seed, kind)).unwrap();
    (preprocess(&j.image).unwrap(), j.truth.defect_mask)
}

fn xai_localization() -> Check {
    let scorer = ReferenceScorer::default();
    let params = XaiParams::default();
    let results: Vec<(f64, f64, f64)> = (0..50u64)
        .map(|i| {
            let kind = DefectKind::DEFECTS[(i % 6) as usize];
            let (img, truth) = joint(1000 + i, kind);
            let e = explain(&img, &scorer, &params).unwrap();
            let m = e.union_mask();
            let iou = m.iou(&truth);
            let (c, r) = if i < 20 {
                let c = deletion_score(&img, &scorer, &m, params.baseline).unwrap();
                let r = deletion_score(&img, &scorer, &random_equal_area_mask(&m, 4, 77 + i), params.baseline).unwrap();
                (c, r)
            } else {
                (0.0, 0.0)
            };
            (iou, c, r)
        })
        .collect();
    let hits = results.iter().filter(|r| r.0 >= 0.3).count();
    let crit = results[..20].iter().map(|r| r.1).sum::<f64>() / 20.0;
    let rand = results[..20].iter().map(|r| r.2).sum::<f64>() / 20.0;
    let detail = format!("IoU≥0.3 on {hits}/50; deletion critical {crit:.4} vs random {rand:.4}");
    ensure!(hits * 100 >= 80 * 50, "{detail}");
    ensure!(crit >= 2.0 * rand, "{detail}");
    ensure!(crit > 0.0, "{detail}");
    Ok(detail)
}

fn silhouette(y: &[[f64; 2]], labels: &[usize], k: usize) -> f64 {
    let d = |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]);
    let n = y.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sum = vec![0.0; k];
        let mut cnt = vec![0usize; k];
        for j in 0..n {
            if i != j {
                sum[labels[j]] += d(&y[i], &y[j]);
                cnt[labels[j]] += 1;
            }
        }
        let a = sum[labels[i]] / cnt[labels[i]] as f64;
        let b = (0..k)
            .filter(|&c| c != labels[i])
            .map(|c| sum[c] / cnt[c] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

fn tsne_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let nd = Normal::new(0.0, 1.0).unwrap();

    // gradient against central differences on a 10-point instance
    let x: Vec<Vec<f64>> = (0..10).map(|_| (0..5).map(|_| nd.sample(&mut rng)).collect()).collect();
    let p = joint_probabilities(&squared_distances(&x), 10, 3.0);
    let y: Vec<[f64; 2]> = (0..10).map(|_| [nd.sample(&mut rng), nd.sample(&mut rng)]).collect();
    let g = kl_gradient(&p, &y);
    let h = 1e-5;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for i in 0..10 {
        for k in 0..2 {
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[i][k] += h;
            ym[i][k] -= h;
            let fd = (kl_divergence(&p, &yp) - kl_divergence(&p, &ym)) / (2.0 * h);
            num += (g[i][k] - fd).powi(2);
            den += fd * fd;
        }
    }
    let grad_err = (num / den).sqrt();
    ensure!(grad_err <= 1e-4, "gradient relative error {grad_err:e}");

    // three Gaussian clusters in R^10, centroids 10σ apart
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for c in 0..3 {
        for _ in 0..20 {
            let mut v: Vec<f64> = (0..10).map(|_| nd.sample(&mut rng)).collect();
            v[c] += 10.0 / 2f64.sqrt();
            pts.push(v);
            labels.push(c);
        }
    }

    // perplexity calibration from the returned precisions
    let d2 = squared_distances(&pts);
    let target = 15.0f64;
    let aff = joint_probabilities(&d2, 60, target);
    let mut worst = 0.0f64;
    for i in 0..60 {
        let w: Vec<f64> = (0..60)
            .map(|j| if i == j { 0.0 } else { (-aff.betas[i] * d2[i * 60 + j]).exp() })
            .collect();
        let z: f64 = w.iter().sum();
        let h2: f64 = w.iter().filter(|&&v| v > 0.0).map(|&v| -(v / z) * (v / z).log2()).sum();
        worst = worst.max((h2 - target.log2()).abs());
    }
    ensure!(worst <= 1e-3, "perplexity off by {worst:e} in log2");
    let psum: f64 = aff.p.iter().sum();
    ensure!((psum - 1.0).abs() <= 1e-9, "P sums to {psum}");

    let params = TsneParams {
        seed: 1,
        ..TsneParams::default()
    };
    let r1 = tsne(&pts, &params).map_err(|e| e.to_string())?;
    let sil = silhouette(&r1.coords, &labels, 3);
    ensure!(sil >= 0.5, "silhouette {sil:.3}");
    let r2 = tsne(&pts, &params).map_err(|e| e.to_string())?;
    ensure!(r1.coords == r2.coords && r1.kl_history == r2.kl_history, "same seed, different output");
    Ok(format!(
        "grad rel err {grad_err:.1e}; perplexity err {worst:.1e} bits; silhouette {sil:.3}; deterministic"
    ))
}

fn soxai_grouping() -> Check {
    let scorer = ReferenceScorer::default();
    let kinds = [DefectKind::Splash, DefectKind::Crack, DefectKind::Burn];
    let mut vecs = Vec::new();
    let mut labels = Vec::new();
    for (k, &kind) in kinds.iter().enumerate() {
        for i in 0..20u64 {
            let (img, _) = joint(5000 + 20 * k as u64 + i, kind);
            let e = explain(&img, &scorer, &XaiParams::default()).map_err(|e| e.to_string())?;
            vecs.push(embed_explanation(format!("{kind}-{i}"), &img, &e, None).vector);
            labels.push(k);
        }
    }
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            let d = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if labels[i] == labels[j] {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                nx += 1;
            }
        }
    }
    let (intra, inter) = (intra / ni as f64, inter / nx as f64);
    ensure!(intra < inter, "intra {intra:.4} ≥ inter {inter:.4}");
    Ok(format!("60 explanations: intra-kind {intra:.3} < inter-kind {inter:.3}"))
}

fn split_protocol() -> Check {
    let entries: Vec<ManifestEntry> = (0..1644 + 1046)
        .map(|i| {
            let defective = i < 1644;
            ManifestEntry {
                id: format!("j{i:05}"),
                image_path: format!("images/j{i:05}.png"),
                mask_path: format!("masks/j{i:05}.png"),
                label: if defective { Label::Defective } else { Label::NonDefective },
                kind: if defective { DefectKind::Splash } else { DefectKind::None },
                split: None,
            }
        })
        .collect();
    let m = DatasetManifest::new(entries, ".").map_err(|e| e.to_string())?;
    let out = stratified_split(&m, (0.6, 0.2, 0.2), 3).map_err(|e| e.to_string())?;
    let mut detail = Vec::new();
    for (label, n) in [(Label::Defective, 1644.0), (Label::NonDefective, 1046.0)] {
        let got = [Split::Train, Split::Val, Split::Test].map(|s| out.manifest.count(label, Some(s)));
        for (g, f) in got.iter().zip([0.6, 0.2, 0.2]) {
            ensure!((*g as f64 - f * n).abs() <= 1.0, "{label}: {got:?} vs {n}×60/20/20");
        }
        ensure!(got.iter().sum::<usize>() as f64 == n, "{label}: samples lost");
        detail.push(format!("{label} {}/{}/{}", got[0], got[1], got[2]));
    }
    ensure!(split_counts(1644, [0.6, 0.2, 0.2]).iter().sum::<usize>() == 1644, "split_counts loses samples");
    Ok(detail.join(", "))
}

fn end_to_end() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = generate_dataset(&DatasetConfig::uniform(200, 0.5, 2024), dir.path().join("ds")).map_err(|e| e.to_string())?;
    let store = Store::open(dir.path().join("data"), StoreConfig::default()).map_err(|e| e.to_string())?;
    // the reference scorer separates synthetic joints sharply; a wide review
    // band puts the weaker defects in front of an operator
    let opts = PipelineOptions {
        thresholds: TriageThresholds::new(0.3, 0.95).unwrap(),
        ..PipelineOptions::default()
    };
    let s = run_pipeline(&store, &manifest, &ReferenceScorer::default(), &opts).map_err(|e| e.to_string())?;
    ensure!(s.total == 200 && s.failed == 0, "summary {s:?}");
    ensure!(s.auto_defect + s.in_review + s.auto_pass == 200, "triage counts do not conserve: {s:?}");
    ensure!(s.in_review > 0, "no case reached review: {s:?}");

    let cases = store.cases();
    let counts = store.counts();
    let scored = cases.values().filter(|c| c.confidence.is_some()).count();
    ensure!(
        counts[&CaseState::AutoDefect] + counts[&CaseState::InReview] + counts[&CaseState::AutoPass] == scored,
        "state counts {counts:?} vs {scored} scored"
    );
    ensure!(counts[&CaseState::InReview] == s.in_review, "store and summary disagree");
    for c in cases.values() {
        match c.state {
            CaseState::InReview => {
                let p = store.explanation_file(c).ok_or(format!("{} has no explanation", c.id))?;
                load_explanation(&p).map_err(|e| format!("{}: {e}", c.id))?;
            }
            _ => ensure!(c.explanation_path.is_none(), "{} is {} but has an explanation", c.id, c.state),
        }
    }
    let artifacts = fs::read_dir(store.data_dir().join("explanations"))
        .map_err(|e| e.to_string())?
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "json"))
        .count();
    ensure!(artifacts == s.in_review, "{artifacts} explanation files for {} review cases", s.in_review);

    let replayed = replay_state(store.log_path()).map_err(|e| e.to_string())?;
    ensure!(replayed == cases, "replayed state differs from live state");
    ensure!(replay_state(store.log_path()).map_err(|e| e.to_string())? == replayed, "replay not idempotent");

    // two operators race on every review case
    let store = Arc::new(store);
    let review: Vec<String> = cases.values().filter(|c| c.state == CaseState::InReview).map(|c| c.id.clone()).collect();
    for id in &review {
        let barrier = Arc::new(Barrier::new(2));
        let handles: Vec<_> = [("alice", Label::Defective), ("bob", Label::NonDefective)]
            .into_iter()
            .map(|(op, decision)| {
                let (store, barrier, id) = (store.clone(), barrier.clone(), id.clone());
                thread::spawn(move || {
                    barrier.wait();
                    store.submit_verdict(&ReviewVerdict {
                        case_id: id,
                        decision,
                        operator: op.into(),
                        note: None,
                    })
                })
            })
            .collect();
        let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        let ok = results.iter().filter(|r| r.is_ok()).count();
        let conflicts = results.iter().filter(|r| matches!(r, Err(Error::Conflict(_)))).count();
        ensure!(ok == 1 && conflicts == 1, "case {id}: {ok} winners, {conflicts} conflicts");
    }
    let events = read_events(store.log_path()).map_err(|e| e.to_string())?;
    let mut verdicts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in events.iter().filter(|e| e.kind == EventKind::Verdict) {
        *verdicts.entry(e.case_id.as_str()).or_default() += 1;
    }
    ensure!(
        verdicts.len() == review.len() && verdicts.values().all(|&n| n == 1),
        "verdict events per case: {verdicts:?}"
    );
    let after = replay_state(store.log_path()).map_err(|e| e.to_string())?;
    ensure!(after == store.cases(), "replay after verdicts differs");
    let reopened = Store::open(store.data_dir(), StoreConfig::default()).map_err(|e| e.to_string())?;
    ensure!(reopened.cases() == after, "reopened store differs");

    Ok(format!(
        "200 joints: {} auto_defect, {} in_review, {} auto_pass; replay identical; {} races, one winner each",
        s.auto_defect,
        s.in_review,
        s.auto_pass,
        review.len()
    ))
}

/// Empty manifests are a no-op and a constant scorer never reaches review.
fn pipeline_trivia() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = Store::open(
        dir.path(),
        StoreConfig {
            fsync: FsyncPolicy::Never,
            ..StoreConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let empty = DatasetManifest::default();
    let scorer = ConstantScorer(Confidence::new(0.5).unwrap());
    let s = run_pipeline(&store, &empty, &scorer, &PipelineOptions::default()).map_err(|e| e.to_string())?;
    ensure!(s == Default::default() && store.last_seq() == 0, "empty manifest produced {s:?}");
    Ok("empty manifest: zero summary, no events".into())
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion {
            name: "metric identity and table arithmetic",
            budget: Duration::from_secs(5),
            run: metric_identity,
        },
        Criterion {
            name: "100-joint scenario",
            budget: Duration::from_secs(1),
            run: hundred_joints,
        },
        Criterion {
            name: "latency harness protocol",
            budget: Duration::from_secs(5),
            run: latency_protocol,
        },
        Criterion {
            name: "trust analytics",
            budget: Duration::from_secs(5),
            run: trust_analytics,
        },
        Criterion {
            name: "XAI localization and deletion audit",
            budget: Duration::from_secs(120),
            run: xai_localization,
        },
        Criterion {
            name: "t-SNE correctness",
            budget: Duration::from_secs(60),
            run: tsne_correctness,
        },
        Criterion {
            name: "SOXAI grouping",
            budget: Duration::from_secs(120),
            run: soxai_grouping,
        },
        Criterion {
            name: "stratified split protocol",
            budget: Duration::from_secs(5),
            run: split_protocol,
        },
        Criterion {
            name: "end-to-end pipeline",
            budget: Duration::from_secs(180),
            run: end_to_end,
        },
        Criterion {
            name: "pipeline on an empty manifest",
            budget: Duration::from_secs(1),
            run: pipeline_trivia,
        },
    ];

    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > c.budget => Err(format!("{d}; took {elapsed:.2?}, budget {:?}", c.budget)),
            o => o,
        };
        match outcome {
            Ok(detail) => println!("PASS  {:<38} {:>8.2?}  {detail}", c.name, elapsed),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {:<38} {:>8.2?}  {detail}", c.name, elapsed);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
