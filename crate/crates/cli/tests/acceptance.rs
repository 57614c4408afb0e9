//! Acceptance suite. Runs every criterion in order and prints one PASS/FAIL
//! line per criterion; exits non-zero if any criterion fails.
//!
//! The forgetting experiment trains 15 toy runs (5 strategies x 3 seeds) and
//! keeps its run directories and report under `target/tmp/acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use braincl::losses::{self, KldDirection, LossConfig, TeacherTerms};
use braincl::metrics;
use braincl::moe::{gate_weights, ExpertOp, GateParams, MoeBlock, MoeBlockConfig};
use braincl::trainer::AuditFile;
use braincl::{DomainToken, FeatureMap, ModalityUniverse};
use braincl_cli::{cmd_report, cmd_run, Experiment, ExperimentFile, RunOverrides};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

// ---------------------------------------------------------------- metrics

fn ref_metrics(m: &[Vec<f64>]) -> [f64; 4] {
    let p = m.len();
    let mut avg = 0.0;
    for j in 0..p {
        avg += m[p - 1][j];
    }
    let mut ilm = 0.0;
    let mut cells = 0usize;
    for i in 0..p {
        for j in 0..=i {
            ilm += m[i][j];
            cells += 1;
        }
    }
    let mut bwt = 0.0;
    for i in 0..p - 1 {
        bwt += m[p - 1][i] - m[i][i];
    }
    let mut fwt = 0.0;
    for j in 1..p {
        fwt += m[j - 1][j];
    }
    [avg / p as f64, ilm / cells as f64, bwt / (p - 1) as f64, fwt / (p - 1) as f64]
}

fn impl_metrics(m: &[Vec<f64>]) -> [f64; 4] {
    [
        metrics::avg(m),
        metrics::ilm(m),
        metrics::bwt(m).unwrap(),
        metrics::fwt(m).unwrap(),
    ]
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1000 {
        let p = rng.gen_range(2..=5);
        let m: Vec<Vec<f64>> = (0..p).map(|_| (0..p).map(|_| rng.gen::<f64>()).collect()).collect();
        let (a, r) = (impl_metrics(&m), ref_metrics(&m));
        check(a == r, format!("matrix {case}: {a:?} != {r:?}"))?;
    }
    let m = vec![vec![0.8, 0.1, 0.0], vec![0.6, 0.7, 0.2], vec![0.5, 0.6, 0.75]];
    let got = impl_metrics(&m);
    let want = [0.616_666_666_666_666_6, 0.658_333_333_333_333_3, -0.20, 0.15];
    for (g, w) in got.iter().zip(&want) {
        check((g - w).abs() < 1e-9, format!("worked example {got:?} != {want:?}"))?;
    }
    Ok(format!(
        "1000 random matrices exact; worked example AVG={:.5} ILM={:.5} BWT={:.2} FWT={:.2}",
        got[0], got[1], got[2], got[3]
    ))
}

// ---------------------------------------------------------------- losses

fn random_logits(rng: &mut ChaCha8Rng, dims: [usize; 3], scale: f64) -> FeatureMap {
    let n = 2 * dims.iter().product::<usize>();
    FeatureMap::from_vec(2, dims, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cases = 100;
    for case in 0..cases {
        let dims = [rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4)];
        let x = random_logits(&mut rng, dims, 5.0);
        let tau = rng.gen_range(0.1..8.0);
        let k = losses::kld_loss(&x, &x, tau).unwrap();
        check(k.abs() < 1e-12, format!("case {case}: kld(x, x) = {k}"))?;

        let n = rng.gen_range(2..30);
        let v = random_vec(&mut rng, n);
        let k = rng.gen_range(0.1..10.0);
        let scaled: Vec<f64> = v.iter().map(|e| k * e).collect();
        let neg: Vec<f64> = v.iter().map(|e| -k * e).collect();
        // orthogonal partner: Gram-Schmidt against v
        let w = random_vec(&mut rng, n);
        let proj = w.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / v.iter().map(|a| a * a).sum::<f64>();
        let orth: Vec<f64> = w.iter().zip(&v).map(|(a, b)| a - proj * b).collect();
        for (other, want) in [(&scaled, 0.0), (&orth, 1.0), (&neg, 2.0)] {
            let c = losses::cosine_loss(&v, other).unwrap();
            check((c - want).abs() < 1e-9, format!("case {case}: cosine endpoint {want} gave {c}"))?;
        }

        let lo = rng.gen_range(0.0..1.0);
        let hi = lo + rng.gen_range(0.0..1.0);
        let a0 = losses::dynamic_alpha(0.0, lo, hi).unwrap();
        let a1 = losses::dynamic_alpha(1.0, lo, hi).unwrap();
        check(a0 == hi && a1 == lo, format!("case {case}: dynamic_alpha endpoints {a0}, {a1} vs [{lo}, {hi}]"))?;

        let t = random_logits(&mut rng, dims, 5.0);
        let voxels: usize = dims.iter().product();
        let target: Vec<u8> = (0..voxels).map(|_| rng.gen_bool(0.3) as u8).collect();
        let fs = random_vec(&mut rng, 12);
        let ft = random_vec(&mut rng, 12);
        let cfg = LossConfig {
            tau,
            beta: rng.gen_range(0.0..2.0),
            ..LossConfig::default()
        };
        let alpha = rng.gen_range(0.0..0.6);
        let terms = TeacherTerms {
            teacher_logits: &t,
            student_features: &fs,
            teacher_features: &ft,
        };
        let b = losses::total_loss(&x, &target, Some(terms), alpha, &cfg).unwrap();
        let recomposed = b.task_dice + b.task_ce + cfg.beta * b.cosine + alpha * b.kld;
        check(
            (b.total - recomposed).abs() <= 1e-6,
            format!("case {case}: breakdown total {} != {recomposed}", b.total),
        )?;
    }
    Ok(format!("{cases} random cases for each identity"))
}

// ---------------------------------------------------------------- gradients

const H: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-3;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn numeric(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + H;
            let up = f(&p);
            p[i] = orig - H;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn moe_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MoeBlockConfig {
        op: ExpertOp::Conv3,
        in_channels: 2,
        out_channels: 3,
        experts: 3,
        token_len: 5,
        norm: true,
    };
    let (block, params) = MoeBlock::standalone(cfg, 0.8, &mut rng);
    let x = FeatureMap::from_vec(2, [2, 2, 2], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let token: Vec<f64> = (0..5).map(|_| rng.gen_range(0..2) as f64).collect();
    let (y, cache) = block.forward(&params, &x, &token).unwrap();
    let r: Vec<f64> = (0..y.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |p: &[f64]| -> f64 {
        let (y, _) = block.forward(p, &x, &token).unwrap();
        y.data.iter().zip(&r).map(|(a, b)| a * b).sum()
    };
    let mut grads = vec![0.0; params.len()];
    block.backward(&params, &cache, FeatureMap::from_vec(y.channels, y.dims, r.clone()).unwrap(), &mut grads);
    let (gw, gb) = block.gate_refs();
    let k = block.kernel_ref(1);
    let mut worst: f64 = 0.0;
    for range in [gw.offset..gw.offset + gw.len, gb.offset..gb.offset + gb.len, k.offset..k.offset + k.len] {
        let mut p = params.clone();
        let num: Vec<f64> = range
            .clone()
            .map(|i| {
                let orig = p[i];
                p[i] = orig + H;
                let up = loss(&p);
                p[i] = orig - H;
                let down = loss(&p);
                p[i] = orig;
                (up - down) / (2.0 * H)
            })
            .collect();
        worst = worst.max(rel_err(&grads[range], &num));
    }
    worst
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let instances = 20;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |name: &'static str, err: f64| {
        let e = worst.entry(name).or_insert(0.0);
        *e = e.max(err);
    };
    for _ in 0..instances {
        let dims = [2, 2, 3];
        let logits = random_logits(&mut rng, dims, 3.0);
        let target: Vec<u8> = (0..12).map(|_| rng.gen_bool(0.4) as u8).collect();
        let rebuild = |d: &[f64]| FeatureMap::from_vec(2, dims, d.to_vec()).unwrap();

        let (_, g) = losses::dice_loss_grad(&logits, &target, 1e-5).unwrap();
        let num = numeric(&logits.data, |d| losses::dice_loss(&rebuild(d), &target, 1e-5).unwrap());
        record("dice", rel_err(&g.data, &num));

        let (_, g) = losses::ce_loss_grad(&logits, &target).unwrap();
        let num = numeric(&logits.data, |d| losses::ce_loss(&rebuild(d), &target).unwrap());
        record("ce", rel_err(&g.data, &num));

        let teacher = random_logits(&mut rng, dims, 3.0);
        let tau = rng.gen_range(0.5..4.0);
        let (_, g) = losses::kld_loss_grad(&logits, &teacher, tau, KldDirection::StudentTeacher).unwrap();
        let num = numeric(&logits.data, |d| losses::kld_loss(&rebuild(d), &teacher, tau).unwrap());
        record("kld", rel_err(&g.data, &num));

        let n = rng.gen_range(2..40);
        let s = random_vec(&mut rng, n);
        let t = random_vec(&mut rng, n);
        let (_, g) = losses::cosine_loss_grad(&s, &t).unwrap();
        let num = numeric(&s, |v| losses::cosine_loss(v, &t).unwrap());
        record("cosine", rel_err(&g, &num));
    }
    for seed in 0..instances {
        record("moe_block", moe_gradient_error(300 + seed));
    }
    for (name, err) in &worst {
        check(*err <= GRAD_TOL, format!("{name}: worst relative error {err:.2e}"))?;
    }
    let detail: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Ok(format!("{instances} instances each, worst rel err: {}", detail.join(", ")))
}

// ---------------------------------------------------------------- gating

/// Direct-loop 3x3x3 convolution with zero padding, kernel `[out, in, 3, 3, 3]`.
fn reference_conv3(x: &FeatureMap, kernel: &[f64], bias: &[f64], out: usize) -> Vec<f64> {
    let [d, h, w] = x.dims;
    let at = |c: usize, z: isize, y: isize, xx: isize| -> f64 {
        if z < 0 || y < 0 || xx < 0 || z >= d as isize || y >= h as isize || xx >= w as isize {
            0.0
        } else {
            x.data[c * d * h * w + (z as usize * h + y as usize) * w + xx as usize]
        }
    };
    let mut y = vec![0.0; out * d * h * w];
    for co in 0..out {
        for z in 0..d {
            for yy in 0..h {
                for xx in 0..w {
                    let mut s = bias[co];
                    for ci in 0..x.channels {
                        for kz in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let k = kernel[(((co * x.channels + ci) * 3 + kz) * 3 + ky) * 3 + kx];
                                    s += k * at(
                                        ci,
                                        z as isize + kz as isize - 1,
                                        yy as isize + ky as isize - 1,
                                        xx as isize + kx as isize - 1,
                                    );
                                }
                            }
                        }
                    }
                    y[co * d * h * w + (z * h + yy) * w + xx] = s;
                }
            }
        }
    }
    y
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_4() -> Outcome {
    let u = ModalityUniverse::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pairs = 10_000;
    for pair in 0..pairs {
        let mut bits: Vec<u8> = (0..u.m()).map(|_| rng.gen_range(0..2)).collect();
        if bits.iter().all(|&b| b == 0) {
            bits[rng.gen_range(0..u.m())] = 1;
        }
        let p = rng.gen_range(0..u.d());
        bits.extend((0..u.d()).map(|j| (j == p) as u8));
        let token = DomainToken::from_bits(bits, &u).unwrap();
        let experts = rng.gen_range(1..9);
        let scale = rng.gen_range(0.1..20.0);
        let w = (0..experts * u.token_len()).map(|_| rng.gen_range(-scale..scale)).collect();
        let b = (0..experts).map(|_| rng.gen_range(-scale..scale)).collect();
        let g = gate_weights(&token, &GateParams::new(w, b, u.token_len()).unwrap()).unwrap();
        let sum: f64 = g.iter().sum();
        check(
            (sum - 1.0).abs() <= 1e-6 && g.iter().all(|&v| v >= 0.0),
            format!("pair {pair}: weights {g:?} sum to {sum}"),
        )?;
    }

    let mut worst: f64 = 0.0;
    for case in 0..10 {
        let cin = rng.gen_range(1..4);
        let cout = rng.gen_range(1..4);
        let dims = [rng.gen_range(2..6), rng.gen_range(2..6), rng.gen_range(2..6)];
        let n: usize = dims.iter().product();
        let x = FeatureMap::from_vec(cin, dims, (0..cin * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let token: Vec<f64> = (0..u.token_len()).map(|_| rng.gen_range(0..2) as f64).collect();
        let cfg = |experts| MoeBlockConfig {
            op: ExpertOp::Conv3,
            in_channels: cin,
            out_channels: cout,
            experts,
            token_len: u.token_len(),
            norm: false,
        };

        // e = 1: the gate is identically 1
        let (single, mut p1) = MoeBlock::standalone(cfg(1), 2.0, &mut rng);
        single.bias_ref(0).unwrap().get_mut(&mut p1).iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        let kernel = single.kernel_ref(0).get(&p1).to_vec();
        let bias = single.bias_ref(0).unwrap().get(&p1).to_vec();
        let plain = reference_conv3(&x, &kernel, &bias, cout);
        let (y, _) = single.forward(&p1, &x, &token).unwrap();
        worst = worst.max(max_abs_diff(&y.data, &plain));

        // identical experts under an arbitrary gate
        let experts = 2 + case % 4;
        let (many, mut pm) = MoeBlock::standalone(cfg(experts), 3.0, &mut rng);
        for i in 0..experts {
            many.kernel_ref(i).get_mut(&mut pm).copy_from_slice(&kernel);
            many.bias_ref(i).unwrap().get_mut(&mut pm).copy_from_slice(&bias);
        }
        let (y, _) = many.forward(&pm, &x, &token).unwrap();
        worst = worst.max(max_abs_diff(&y.data, &plain));
    }
    check(worst <= 1e-5, format!("degenerate MoE differs from plain conv by {worst:.2e}"))?;

    let token = DomainToken::build(&["FLAIR", "T1"], "Stroke lesion", &u).unwrap();
    let want = [0u8, 1, 1, 0, 0, 0, 0, 1, 0, 0];
    check(token.bits() == want, format!("token example gave {:?}", token.bits()))?;
    Ok(format!(
        "{pairs} gate pairs on the simplex; degenerate MoE vs plain conv max diff {worst:.1e}; token {:?}",
        token.bits()
    ))
}

// ---------------------------------------------------------------- experiment

const STRATEGIES: [&str; 5] = ["naive", "proposed", "kld_only", "cosine_only", "moe_only"];
const SEEDS: [u64; 3] = [0, 1, 2];

fn work_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn toy_file() -> ExperimentFile {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../experiments/toy.json");
    ExperimentFile::parse(&fs::read_to_string(path).expect("experiments/toy.json")).expect("toy.json parses")
}

/// The toy experiment for one seed: data seeds shifted by 10 per seed.
fn seeded_experiment(root: &Path, seed: u64) -> Experiment {
    let mut file = toy_file();
    file.seed = seed;
    for (k, d) in file.datasets.iter_mut().enumerate() {
        d.seed = k as u64 + 1 + 10 * seed;
    }
    file.data_root = PathBuf::from(format!("data/seed{seed}"));
    file.output_root = PathBuf::from("runs");
    let path = root.join(format!("toy-seed{seed}.json"));
    fs::write(&path, serde_json::to_string_pretty(&file).unwrap()).unwrap();
    Experiment::load(&path).unwrap()
}

struct RunResult {
    strategy: String,
    seed: u64,
    bwt: f64,
    avg: f64,
    ilm: f64,
    first_std: f64,
    past_reads: usize,
}

struct ExperimentResults {
    runs: Vec<RunResult>,
    table: String,
}

fn run_experiment() -> Result<ExperimentResults, String> {
    let root = work_dir();
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(&root).map_err(|e| e.to_string())?;
    for &seed in &SEEDS {
        let exp = seeded_experiment(&root, seed);
        for s in STRATEGIES {
            let t = Instant::now();
            let ov = RunOverrides {
                strategy: Some(s.into()),
                seed: None,
                sequence: None,
            };
            let summary = cmd_run(&exp, &ov).map_err(|e| format!("{s} seed {seed}: {e}"))?;
            if summary.failed() {
                return Err(format!("{s} seed {seed} failed: {:?}", summary.outcome.matrix.failure));
            }
            eprintln!("  trained {s} seed {seed} in {:.0}s", t.elapsed().as_secs_f64());
        }
    }
    let report = cmd_report(&[root.join("runs")], &root.join("report")).map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for r in &report.runs {
        let audit: AuditFile = serde_json::from_str(
            &fs::read_to_string(r.dir.join("audit.json")).map_err(|e| format!("{}: {e}", r.dir.display()))?,
        )
        .map_err(|e| e.to_string())?;
        runs.push(RunResult {
            strategy: r.strategy.clone(),
            seed: r.seed.ok_or("run without seed")?,
            bwt: r.summary.bwt,
            avg: r.summary.avg,
            ilm: r.summary.ilm,
            first_std: r.first_dataset_std,
            past_reads: audit.past_dataset_reads.len(),
        });
    }
    let table = fs::read_to_string(root.join("report/report.md")).map_err(|e| e.to_string())?;
    Ok(ExperimentResults { runs, table })
}

impl ExperimentResults {
    fn get(&self, strategy: &str, seed: u64) -> Result<&RunResult, String> {
        self.runs
            .iter()
            .find(|r| r.strategy == strategy && r.seed == seed)
            .ok_or_else(|| format!("no {strategy} run for seed {seed}"))
    }

    fn mean(&self, strategy: &str, f: impl Fn(&RunResult) -> f64) -> Result<f64, String> {
        let mut s = 0.0;
        for &seed in &SEEDS {
            s += f(self.get(strategy, seed)?);
        }
        Ok(s / SEEDS.len() as f64)
    }
}

fn criterion_5(r: &ExperimentResults) -> Outcome {
    let (bp, bn) = (r.mean("proposed", |x| x.bwt)?, r.mean("naive", |x| x.bwt)?);
    let (ap, an) = (r.mean("proposed", |x| x.avg)?, r.mean("naive", |x| x.avg)?);
    let detail = format!(
        "mean BWT proposed {bp:.3} vs naive {bn:.3} (gap {:+.3}); mean AVG {ap:.3} vs {an:.3}",
        bp - bn
    );
    check(bp - bn >= 0.10 && ap > an, detail.clone())?;
    Ok(detail)
}

fn criterion_6(r: &ExperimentResults) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for variant in ["kld_only", "cosine_only", "moe_only"] {
        let mut wins = 0;
        let mut cells = Vec::new();
        for &seed in &SEEDS {
            let p = r.get("proposed", seed)?.ilm;
            let v = r.get(variant, seed)?.ilm;
            if p >= v - 0.02 {
                wins += 1;
            }
            cells.push(format!("{p:.3}/{v:.3}"));
        }
        ok &= wins >= 2;
        lines.push(format!("{variant} {wins}/3 [{}]", cells.join(" ")));
    }
    let detail = format!("ILM proposed/variant: {}", lines.join("; "));
    check(ok, detail.clone())?;
    Ok(detail)
}

fn criterion_7(r: &ExperimentResults) -> Outcome {
    let bad: Vec<String> = r
        .runs
        .iter()
        .filter(|x| x.past_reads > 0)
        .map(|x| format!("{} seed {}: {} reads", x.strategy, x.seed, x.past_reads))
        .collect();
    check(bad.is_empty(), bad.join(", "))?;
    Ok(format!("{} runs, no past-dataset reads", r.runs.len()))
}

fn criterion_9(r: &ExperimentResults) -> Outcome {
    let mut wins = 0;
    let mut cells = Vec::new();
    for &seed in &SEEDS {
        let p = r.get("proposed", seed)?.first_std;
        let n = r.get("naive", seed)?.first_std;
        if p < n {
            wins += 1;
        }
        cells.push(format!("{p:.3}<{n:.3}"));
    }
    let detail = format!("dataset-1 DSC std proposed<naive in {wins}/3 seeds [{}]", cells.join(" "));
    check(wins >= 2, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- determinism

fn criterion_8() -> Outcome {
    let root = work_dir().join("determinism");
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(&root).map_err(|e| e.to_string())?;
    let mut file = toy_file();
    file.name = "det".into();
    file.datasets.truncate(2);
    for d in &mut file.datasets {
        d.n_train = 4;
        d.n_test = 2;
        d.volume_shape = [8, 8, 8];
    }
    file.sequences.clear();
    file.data_root = "data".into();
    file.output_root = "runs".into();
    file.trainer.epochs = 2;
    file.trainer.patch_shape = [8, 8, 8];
    file.trainer.eval_patch = [8, 8, 8];
    file.trainer.model.widths = vec![2, 4];
    let path = root.join("det.json");
    fs::write(&path, serde_json::to_string_pretty(&file).unwrap()).unwrap();
    let exp = Experiment::load(&path).map_err(|e| e.to_string())?;
    let mut bytes = Vec::new();
    for _ in 0..2 {
        let s = cmd_run(&exp, &RunOverrides::default()).map_err(|e| e.to_string())?;
        bytes.push(fs::read(s.run_dir.join("matrix.json")).map_err(|e| e.to_string())?);
    }
    check(bytes[0] == bytes[1], "matrix.json differs between identical runs")?;
    Ok(format!("two runs gave identical matrix.json ({} bytes)", bytes[0].len()))
}

fn main() {
    let mut failed = 0;
    let mut report = |n: u32, t: Instant, o: Outcome| {
        let secs = t.elapsed().as_secs_f64();
        let line = match o {
            Ok(d) => format!("criterion {n}: PASS ({secs:.1}s) {d}"),
            Err(d) => {
                failed += 1;
                format!("criterion {n}: FAIL ({secs:.1}s) {d}")
            }
        };
        println!("{line}");
        let _ = std::io::stdout().flush();
    };

    let t = Instant::now();
    report(1, t, criterion_1());
    let t = Instant::now();
    report(2, t, criterion_2());
    let t = Instant::now();
    report(3, t, criterion_3());
    let t = Instant::now();
    report(4, t, criterion_4());

    let t = Instant::now();
    match run_experiment() {
        Ok(results) => {
            println!("{}", results.table);
            report(5, t, criterion_5(&results));
            report(6, Instant::now(), criterion_6(&results));
            report(7, Instant::now(), criterion_7(&results));
            report(9, Instant::now(), criterion_9(&results));
        }
        Err(e) => {
            for n in [5, 6, 7, 9] {
                report(n, t, Err(format!("experiment did not complete: {e}")));
            }
        }
    }
    let t = Instant::now();
    report(8, t, criterion_8());

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
