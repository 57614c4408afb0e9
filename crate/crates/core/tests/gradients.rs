//! Analytic gradients against central finite differences.

use braincl::losses::{self, KldDirection};
use braincl::moe::{ExpertOp, MoeBlock, MoeBlockConfig};
use braincl::FeatureMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-3;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn random_logits(rng: &mut ChaCha8Rng, dims: [usize; 3], scale: f64) -> FeatureMap {
    let n = 2 * dims.iter().product::<usize>();
    FeatureMap::from_vec(2, dims, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
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

#[test]
fn dice_and_ce_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..25 {
        let dims = [2, 2, 3];
        let logits = random_logits(&mut rng, dims, 3.0);
        let target: Vec<u8> = (0..12).map(|_| rng.gen_bool(0.4) as u8).collect();
        let smooth = 1e-5;
        let (_, g) = losses::dice_loss_grad(&logits, &target, smooth).unwrap();
        let num = numeric(&logits.data, |d| {
            losses::dice_loss(&FeatureMap::from_vec(2, dims, d.to_vec()).unwrap(), &target, smooth).unwrap()
        });
        assert!(rel_err(&g.data, &num) <= TOL, "dice case {case}: {}", rel_err(&g.data, &num));

        let (_, g) = losses::ce_loss_grad(&logits, &target).unwrap();
        let num = numeric(&logits.data, |d| {
            losses::ce_loss(&FeatureMap::from_vec(2, dims, d.to_vec()).unwrap(), &target).unwrap()
        });
        assert!(rel_err(&g.data, &num) <= TOL, "ce case {case}");
    }
}

#[test]
fn kld_gradients_both_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..25 {
        let dims = [1, 3, 3];
        let s = random_logits(&mut rng, dims, 4.0);
        let t = random_logits(&mut rng, dims, 4.0);
        let tau = rng.gen_range(0.5..4.0);
        for dir in [KldDirection::StudentTeacher, KldDirection::TeacherStudent] {
            let (_, g) = losses::kld_loss_grad(&s, &t, tau, dir).unwrap();
            let num = numeric(&s.data, |d| {
                losses::kld_loss_grad(&FeatureMap::from_vec(2, dims, d.to_vec()).unwrap(), &t, tau, dir)
                    .unwrap()
                    .0
            });
            assert!(rel_err(&g.data, &num) <= TOL, "kld {dir:?} case {case}");
        }
    }
}

#[test]
fn cosine_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for case in 0..25 {
        let n = rng.gen_range(2..40);
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (_, g) = losses::cosine_loss_grad(&s, &t).unwrap();
        let num = numeric(&s, |v| losses::cosine_loss(v, &t).unwrap());
        assert!(rel_err(&g, &num) <= TOL, "cosine case {case}");
    }
}

fn check_block(op: ExpertOp, norm: bool, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MoeBlockConfig {
        op,
        in_channels: 2,
        out_channels: 3,
        experts: 3,
        token_len: 5,
        norm,
    };
    let (block, params) = MoeBlock::standalone(cfg, 0.8, &mut rng);
    let dims = [2, 2, 2];
    let x = FeatureMap::from_vec(2, dims, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let token: Vec<f64> = (0..5).map(|_| rng.gen_range(0..2) as f64).collect();
    let (y, cache) = block.forward(&params, &x, &token).unwrap();
    let r: Vec<f64> = (0..y.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |p: &[f64]| -> f64 {
        let (y, _) = block.forward(p, &x, &token).unwrap();
        y.data.iter().zip(&r).map(|(a, b)| a * b).sum()
    };
    let dy = FeatureMap::from_vec(y.channels, y.dims, r.clone()).unwrap();
    let mut grads = vec![0.0; params.len()];
    block.backward(&params, &cache, dy, &mut grads);

    let (gw, gb) = block.gate_refs();
    let k = block.kernel_ref(1);
    for (what, range) in [
        ("gate W", gw.offset..gw.offset + gw.len),
        ("gate b", gb.offset..gb.offset + gb.len),
        ("expert kernel", k.offset..k.offset + k.len.min(40)),
    ] {
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
        let err = rel_err(&grads[range], &num);
        assert!(err <= TOL, "{op:?} norm={norm} seed={seed} {what}: rel err {err}");
    }
}

#[test]
fn moe_block_gradients() {
    for seed in 0..20 {
        check_block(ExpertOp::Conv3, true, seed);
    }
    for seed in 0..5 {
        check_block(ExpertOp::Conv3, false, 100 + seed);
        check_block(ExpertOp::UpConv2, false, 200 + seed);
    }
}
