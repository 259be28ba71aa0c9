//! End-to-end acceptance criteria. Everything runs inside one test so the
//! wall-clock budgets are measured without competing test threads; each
//! criterion prints a single PASS/FAIL line to stderr and the test fails if
//! any criterion does.

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsfmicro::data::{synthesize_dataset, FoldPlan, PreprocessConfig, TaskName, TaskSpec};
use tsfmicro::eval::loso::pool_predictions;
use tsfmicro::eval::{gradcam, run_loso, uar, uf1, ConfusionMatrix, RunConfig};
use tsfmicro::temporal::{default_gammas, retention_parallel, retention_recurrent, rotary_theta};
use tsfmicro::train::gradcheck::full_suite;
use tsfmicro::train::trainer::{accuracy, train};
use tsfmicro::train::{PreparedData, TrainConfig};
use tsfmicro::{FusionMode, ModelConfig, Tensor, TsfModel};

type Outcome = Result<String, String>;

fn report(id: u32, title: &str, outcome: &Outcome, elapsed: Duration) {
    let (tag, detail) = match outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let _ = writeln!(std::io::stderr(), "criterion {id:>2} [{tag}] {title}: {detail} ({:.1}s)", elapsed.as_secs_f64());
}

fn within(limit: Duration, t: Instant) -> Result<(), String> {
    match t.elapsed() {
        e if e <= limit => Ok(()),
        e => Err(format!("took {:.1}s, budget {:.0}s", e.as_secs_f64(), limit.as_secs_f64())),
    }
}

// ---------------------------------------------------------------- 1

fn retention_duality() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for &n in &[1usize, 2, 17, 64, 256] {
        for &d in &[2usize, 8, 32, 64] {
            let theta = rotary_theta::<f64>(d, 10000.0);
            let mut gammas = default_gammas(8);
            gammas.extend([0.5, 0.999]);
            for gamma in gammas {
                let q = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng);
                let k = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng);
                let v = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng);
                let p = retention_parallel(&q, &k, &v, gamma, &theta).map_err(|e| e.to_string())?;
                let r = retention_recurrent(&q, &k, &v, gamma, &theta).map_err(|e| e.to_string())?;
                // Relative to the output's own scale, so entries that cancel
                // to near zero are not judged against themselves.
                let scale = r.max_abs().max(f64::MIN_POSITIVE);
                let err = p.data().iter().zip(r.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
                worst = worst.max(err);
                cases += 1;
            }
        }
    }
    within(Duration::from_secs(5), t)?;
    let msg = format!("{cases} cases, max relative error {worst:.2e}");
    if worst <= 1e-10 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- 2

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let reports = full_suite(7, 8).map_err(|e| e.to_string())?;
    within(Duration::from_secs(120), t)?;
    let worst = reports.iter().max_by(|a, b| a.max_rel.total_cmp(&b.max_rel)).ok_or("no reports")?;
    let failing: Vec<_> = reports.iter().filter(|r| !r.passes(1e-4)).map(|r| r.name.clone()).collect();
    let msg = format!("{} checks, worst {} at {:.2e}", reports.len(), worst.name, worst.max_rel);
    if failing.is_empty() {
        Ok(msg)
    } else {
        Err(format!("{msg}; failing {failing:?}"))
    }
}

// ---------------------------------------------------------------- 3

fn shape_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let diff = Tensor::<f32>::randn(&[2, 3, 224, 224], 0.2, &mut rng);
    let onset = Tensor::<f32>::randn(&[2, 3, 224, 224], 1.0, &mut rng);
    let mut tasks: Vec<TaskName> = TaskName::PUBLISHED.to_vec();
    tasks.push(TaskName::Synthetic(4));
    let mut checked = 0;
    for mode in FusionMode::ALL {
        for &task in &tasks {
            let classes = TaskSpec::new(task).num_classes();
            let model = TsfModel::<f32>::new(ModelConfig::published(classes), mode, &mut rng).map_err(|e| e.to_string())?;
            let mut g = model.graph(false);
            let (d, o) = (g.input(diff.clone()), g.input(onset.clone()));
            let out = model.forward(&mut g, d, o, mode).map_err(|e| e.to_string())?;
            if g.shape(out.logits) != [2, classes] {
                return Err(format!("{mode}/{task}: logits {:?}", g.shape(out.logits)));
            }
            if g.shape(out.fused) != [2, 512, 14, 14] {
                return Err(format!("{mode}/{task}: fused {:?}", g.shape(out.fused)));
            }
            if mode == FusionMode::LateTS && task == TaskName::Casme2Five {
                let t = model.temporal.as_ref().ok_or("late model lacks temporal branch")?;
                let s = model.spatial.as_ref().ok_or("late model lacks spatial branch")?;
                let ft = t.forward(&mut g, d).map_err(|e| e.to_string())?;
                let fs = s.forward(&mut g, o).map_err(|e| e.to_string())?;
                if g.shape(ft) != [2, 512, 14, 14] || g.shape(fs) != [2, 512, 14, 14] {
                    return Err(format!("branches {:?} / {:?}", g.shape(ft), g.shape(fs)));
                }
            }
            checked += 1;
        }
    }
    Ok(format!("branches 512×14×14; {checked} mode×task logit shapes"))
}

// ---------------------------------------------------------------- 4

/// Per-class brute force straight from the definitions, sharing nothing with
/// the library.
fn brute_force(m: &[Vec<u64>]) -> (f64, f64, f64) {
    let c = m.len();
    let (mut f1s, mut recalls, mut correct, mut total) = (0.0, 0.0, 0u64, 0u64);
    for i in 0..c {
        let tp = m[i][i];
        let fn_: u64 = (0..c).filter(|&j| j != i).map(|j| m[i][j]).sum();
        let fp: u64 = (0..c).filter(|&j| j != i).map(|j| m[j][i]).sum();
        if tp + fp + fn_ > 0 {
            f1s += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
        }
        if tp + fn_ > 0 {
            recalls += tp as f64 / (tp + fn_) as f64;
        }
        correct += tp;
        total += m[i].iter().sum::<u64>();
    }
    let acc = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    (acc, f1s / c as f64, recalls / c as f64)
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let c = rng.random_range(1..=8);
        let sparse = rng.random_bool(0.3);
        let m: Vec<Vec<u64>> = (0..c)
            .map(|_| (0..c).map(|_| if sparse && rng.random_bool(0.6) { 0 } else { rng.random_range(0..50) }).collect())
            .collect();
        let cm = ConfusionMatrix::from_counts(m.clone()).map_err(|e| e.to_string())?;
        let (acc, f, r) = brute_force(&m);
        for (got, want) in [(cm.acc(), acc), (uf1(&cm), f), (uar(&cm), r)] {
            if !(0.0..=1.0).contains(&got) {
                return Err(format!("metric {got} outside [0, 1] for {m:?}"));
            }
            worst = worst.max((got - want).abs());
        }
    }
    let hand = ConfusionMatrix::from_counts(vec![vec![5, 5], vec![0, 10]]).map_err(|e| e.to_string())?;
    let (hf, hr) = (uf1(&hand), uar(&hand));
    if worst > 1e-12 {
        return Err(format!("max deviation from brute force {worst:.2e}"));
    }
    if (hf - 11.0 / 15.0).abs() > 1e-15 || hr != 0.75 {
        return Err(format!("hand example gave UF1 {hf}, UAR {hr}"));
    }
    Ok(format!("1000 matrices within {worst:.1e}; hand example UF1 = 11/15, UAR = 0.75"))
}

// ---------------------------------------------------------------- 5

fn fold_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut samples_total = 0;
    for trial in 0..1000 {
        let n_subjects = rng.random_range(2..=12);
        let n = rng.random_range(n_subjects..=n_subjects * 6);
        // Every subject appears at least once; the rest are random and shuffled.
        let mut subjects: Vec<String> = (0..n)
            .map(|i| if i < n_subjects { i } else { rng.random_range(0..n_subjects) })
            .map(|s| format!("s{:02}", (s * 7 + trial) % 97))
            .collect();
        for i in (1..subjects.len()).rev() {
            subjects.swap(i, rng.random_range(0..=i));
        }
        let plan = FoldPlan::from_subjects(&subjects).map_err(|e| e.to_string())?;
        let distinct: BTreeMap<&str, usize> = subjects.iter().fold(BTreeMap::new(), |mut m, s| {
            *m.entry(s.as_str()).or_default() += 1;
            m
        });
        if plan.len() != distinct.len() {
            return Err(format!("trial {trial}: {} folds for {} subjects", plan.len(), distinct.len()));
        }
        let mut tested = vec![0u32; n];
        for f in &plan.folds {
            if f.test.is_empty() {
                return Err(format!("trial {trial}: empty test fold"));
            }
            for &i in &f.test {
                tested[i] += 1;
                if subjects[i] != f.held_out_subject {
                    return Err(format!("trial {trial}: foreign sample in test fold"));
                }
            }
            let mut in_train = vec![false; n];
            for &i in &f.train {
                in_train[i] = true;
                if subjects[i] == f.held_out_subject {
                    return Err(format!("trial {trial}: held-out subject in training"));
                }
            }
            // Train and test are complementary.
            if (0..n).any(|i| in_train[i] == (subjects[i] == f.held_out_subject)) {
                return Err(format!("trial {trial}: train/test not a partition"));
            }
        }
        if tested.iter().any(|&c| c != 1) {
            return Err(format!("trial {trial}: a sample is tested {} times", tested.iter().max().unwrap_or(&0)));
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let pooled = pool_predictions(&plan, &labels, 3, |_, f| Ok(f.test.iter().map(|&i| (i * 5) % 3).collect()))
            .map_err(|e| e.to_string())?;
        if pooled.confusion.total() as usize != n || pooled.predictions.len() != n {
            return Err(format!("trial {trial}: pooled {} of {n}", pooled.confusion.total()));
        }
        samples_total += n;
    }
    Ok(format!("1000 manifests, {samples_total} samples, pooled counts conserved"))
}

// ---------------------------------------------------------------- 6

fn tiny_training_fits() -> Outcome {
    let t = Instant::now();
    let mut accs = Vec::new();
    for seed in 0..3u64 {
        let index = synthesize_dataset(4, 15, 3, 64, 600 + seed).map_err(|e| e.to_string())?;
        let pre = PreprocessConfig::for_size(32);
        let data = PreparedData::new(&index, &pre).map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            lr0: 8e-4,
            lr_decay: 0.99,
            batch_size: 16,
            epochs: 80,
            seed,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = TsfModel::<f32>::new(ModelConfig::tiny(3), FusionMode::LateTS, &mut rng).map_err(|e| e.to_string())?;
        let all: Vec<usize> = (0..index.len()).collect();
        train(&mut model, &data, &all, &cfg, &mut rng, |_| Ok(())).map_err(|e| e.to_string())?;
        accs.push(accuracy(&model, &data, &all, 32).map_err(|e| e.to_string())?);
    }
    within(Duration::from_secs(600), t)?;
    let msg = format!("train accuracy after 80 epochs {accs:?}");
    if accs.iter().all(|&a| a >= 0.95) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- 7, 8, 10

const LOSO_SEEDS: u64 = 3;

fn loso_config(mode: FusionMode, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::from_text("task = synthetic-4", Path::new("")).expect("static config");
    cfg.mode = mode;
    cfg.model = ModelConfig::tiny(4);
    cfg.preprocess = PreprocessConfig::for_size(32);
    cfg.train = TrainConfig {
        lr0: 1e-3,
        lr_decay: 0.95,
        batch_size: 16,
        epochs: 30,
        ..TrainConfig::default()
    };
    cfg.with_seed(seed)
}

/// Pooled LOSO accuracy per mode and seed, plus Grad-CAM localisation
/// counts `(hits, correct)` gathered from the late-fusion runs.
struct LosoSweep {
    acc: HashMap<FusionMode, Vec<f64>>,
    cam: (usize, usize),
    elapsed: HashMap<FusionMode, Duration>,
}

impl LosoSweep {
    fn mean(&self, mode: FusionMode) -> f64 {
        let v = &self.acc[&mode];
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn loso_sweep(modes: &[FusionMode]) -> Result<LosoSweep, String> {
    let mut sweep = LosoSweep {
        acc: HashMap::new(),
        cam: (0, 0),
        elapsed: HashMap::new(),
    };
    for &mode in modes {
        let t = Instant::now();
        for seed in 0..LOSO_SEEDS {
            let index = synthesize_dataset(6, 24, 4, 32, 1000 + seed).map_err(|e| e.to_string())?;
            let truths: Vec<_> = index.samples.iter().map(|s| s.truth).collect();
            let cam = &mut sweep.cam;
            let report = run_loso::<f32>(&index, &loso_config(mode, seed), None, |fold, model, data, preds| {
                if mode != FusionMode::LateTS {
                    return Ok(());
                }
                for (&i, &p) in fold.test.iter().zip(preds) {
                    if p != data.labels[i] {
                        continue;
                    }
                    let (diff, onset) = data.batch::<f32>(&[i], None)?;
                    let heat = gradcam(model, &diff, &onset, p)?;
                    let (x, y) = heat.peak();
                    let truth = truths[i].expect("synthetic samples carry ground truth");
                    cam.0 += usize::from(truth.contains(x, y, heat.full.width(), heat.full.height()));
                    cam.1 += 1;
                }
                Ok(())
            })
            .map_err(|e| e.to_string())?;
            sweep.acc.entry(mode).or_default().push(report.acc);
        }
        sweep.elapsed.insert(mode, t.elapsed());
    }
    Ok(sweep)
}

fn fmt_accs(sweep: &LosoSweep, mode: FusionMode) -> String {
    format!("{mode} {:.3}", sweep.mean(mode))
}

fn late_beats_single_branches(sweep: &LosoSweep) -> Outcome {
    let budget: Duration = [FusionMode::LateTS, FusionMode::TemporalOnly, FusionMode::SpatialOnly]
        .iter()
        .map(|m| sweep.elapsed[m])
        .sum();
    if budget > Duration::from_secs(3600) {
        return Err(format!("took {:.0}s, budget 3600s", budget.as_secs_f64()));
    }
    let (late, temporal, spatial) = (
        sweep.mean(FusionMode::LateTS),
        sweep.mean(FusionMode::TemporalOnly),
        sweep.mean(FusionMode::SpatialOnly),
    );
    let msg = format!(
        "{}, {}, {} (3-seed pooled ACC, {:.0}s)",
        fmt_accs(sweep, FusionMode::LateTS),
        fmt_accs(sweep, FusionMode::TemporalOnly),
        fmt_accs(sweep, FusionMode::SpatialOnly),
        budget.as_secs_f64()
    );
    if late >= temporal + 0.05 && temporal >= spatial {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn late_beats_other_fusions(sweep: &LosoSweep) -> Outcome {
    let late = sweep.mean(FusionMode::LateTS);
    let others = [FusionMode::EarlyTS, FusionMode::TtoS, FusionMode::StoT];
    let msg = std::iter::once(FusionMode::LateTS)
        .chain(others)
        .map(|m| fmt_accs(sweep, m))
        .collect::<Vec<_>>()
        .join(", ");
    if others.iter().all(|&m| late >= sweep.mean(m)) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn gradcam_localises(sweep: &LosoSweep) -> Outcome {
    let (hits, correct) = sweep.cam;
    if correct == 0 {
        return Err("no correctly classified samples".into());
    }
    let frac = hits as f64 / correct as f64;
    let msg = format!("peak inside motion region for {hits}/{correct} = {:.1}%", 100.0 * frac);
    if frac >= 0.7 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- 9

const DETERMINISM_CONFIG: &str = "\
task = synthetic-3
mode = late
image_size = 32
patch_size = 8
embed_dim = 64
stem_channels = 16,32,64
retention_layers = 1
retention_heads = 4
transformer_layers = 1
transformer_heads = 4
head_hidden = 128
epochs = 3
batch_size = 8
synth_subjects = 3
synth_per_subject = 6
synth_image_size = 32
";

fn loso_is_deterministic() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(&cfg_path, format!("{DETERMINISM_CONFIG}output_dir = out\n")).map_err(|e| e.to_string())?;
    let report_path = dir.path().join("out").join("report.json");
    let mut reports = Vec::new();
    for run in 0..2 {
        let _ = std::fs::remove_file(&report_path);
        let out = Command::new(env!("CARGO_BIN_EXE_tsfmicro"))
            .args(["loso", "--config"])
            .arg(&cfg_path)
            .args(["--seed", "17"])
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("loso run {run} failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
        reports.push(std::fs::read(&report_path).map_err(|e| e.to_string())?);
    }
    if reports[0] == reports[1] {
        Ok(format!("two runs, seed 17: identical {}-byte reports", reports[0].len()))
    } else {
        Err("report JSON differs between runs".into())
    }
}

// ----------------------------------------------------------------

fn guarded<R>(f: impl FnOnce() -> Result<R, String>) -> Result<R, String> {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

#[derive(Default)]
struct Tally {
    failures: Vec<u32>,
}

impl Tally {
    fn record(&mut self, id: u32, title: &str, outcome: Outcome, elapsed: Duration) {
        report(id, title, &outcome, elapsed);
        if outcome.is_err() {
            self.failures.push(id);
        }
    }

    fn run(&mut self, id: u32, title: &str, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let outcome = guarded(f);
        self.record(id, title, outcome, t.elapsed());
    }
}

#[test]
fn acceptance_criteria() {
    let mut tally = Tally::default();
    tally.run(1, "retention parallel = recurrent", retention_duality);
    tally.run(2, "finite-difference gradient suite", gradient_suite);
    tally.run(3, "shape contract", shape_contract);
    tally.run(4, "metrics against brute force", metrics_oracle);
    tally.run(5, "LOSO fold invariants", fold_invariants);
    tally.run(6, "tiny late fusion fits 60 samples", tiny_training_fits);
    tally.run(9, "byte-identical LOSO reports", loso_is_deterministic);

    let t = Instant::now();
    let sweep = guarded(|| loso_sweep(&FusionMode::ALL));
    let elapsed = t.elapsed();
    let checks: [(u32, &str, fn(&LosoSweep) -> Outcome); 3] = [
        (7, "late > temporal + 5 points, temporal >= spatial", late_beats_single_branches),
        (8, "late >= early, t2s, s2t", late_beats_other_fusions),
        (10, "Grad-CAM peak in motion region", gradcam_localises),
    ];
    for (id, title, check) in checks {
        let outcome = match &sweep {
            Ok(s) => guarded(|| check(s)),
            Err(e) => Err(format!("LOSO sweep failed: {e}")),
        };
        tally.record(id, title, outcome, elapsed);
    }

    assert!(tally.failures.is_empty(), "failed criteria: {:?}", tally.failures);
}
