//! Acceptance suite. Runs every criterion, prints one line per criterion and
//! exits non-zero if any of them fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use serde_json::Value;

use ota::config::{InputPipeline, IrfSection, StageConfig, StudentInit};
use ota::data::sample_few_data;
use ota::digg::{build_distill_set, make_mask, DiggConfig, MaskScheme, MaskSpec};
use ota::distill::{
    comparison_tsv, distill, distill_loss_and_grads, run_ota, ComparisonRow, DistillConfig, FeatureAdapter, OtaOrder,
    OtaSettings, Upstream, COMPARISON_HEADER,
};
use ota::irf::{make_lr_grid, pretrain_backbone, run_irf};
use ota::metrics::{extract_features, fd_score, FeatureBag};
use ota::model::{Backbone, CnnConfig, TaskModel};
use ota::nn::checksum;
use ota::synth::{shapes_dataset, Domain};
use ota::transformer::{complete_tokens, train_lt, LatentTransformer, LtConfig, MaskGrid, SamplingParams};
use ota::vq::{commitment_grad, commitment_loss, quantize, rerepresent, tokenize_dataset, train_vq, Codebook, VqConfig, VqModel};
use ota::{Dataset, SeededRng, Tensor, TokenGrid};

const SEED: u64 = 0;

struct Checks {
    failed: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    fn check(&mut self, name: &str, ok: bool) {
        if !ok {
            self.failed.push(name.to_string());
        }
    }

    fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }
}

fn criterion(n: usize, title: &str, budget: Duration, f: impl FnOnce(&mut Checks)) -> bool {
    let mut c = Checks {
        failed: Vec::new(),
        notes: Vec::new(),
    };
    let t = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(|| f(&mut c)));
    let elapsed = t.elapsed();
    if let Err(p) = r {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        c.failed.push(format!("panicked: {msg}"));
    }
    if elapsed > budget {
        c.failed.push(format!("runtime {:.1}s over budget {:.0}s", elapsed.as_secs_f64(), budget.as_secs_f64()));
    }
    let ok = c.failed.is_empty();
    let mut line = format!(
        "criterion {n}: {} {title} ({:.1}s)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    if !c.notes.is_empty() {
        line += &format!(" [{}]", c.notes.join("; "));
    }
    if !ok {
        line += &format!(" failed: {}", c.failed.join(", "));
    }
    println!("{line}");
    ok
}

fn mins(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

// Shared upstream artifacts: domain A trains the tokenizer, the teacher and
// the latent transformer; domain B is the downstream task.

struct World {
    a: Dataset,
    b: Dataset,
    b_test: Dataset,
    teacher: Backbone<f32>,
    vq: VqModel<f32>,
}

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| {
        let rng = SeededRng::new(SEED, "acc");
        let a = shapes_dataset(Domain::A, 256, 32, "a", &rng.derive("a")).unwrap();
        let b = shapes_dataset(Domain::B, 128, 32, "b", &rng.derive("b")).unwrap();
        let b_test = shapes_dataset(Domain::B, 64, 32, "b_test", &rng.derive("b_test")).unwrap();
        let mut pre = StageConfig::pretrain();
        pre.steps = 200;
        let teacher = pretrain_backbone(&a, &CnnConfig::teacher(), &pre, &rng.derive("teacher"))
            .unwrap()
            .model
            .backbone;
        let vc = VqConfig {
            width: 16,
            codebook_size: 64,
            ..VqConfig::default()
        };
        let vq = train_vq(&a, &vc, &StageConfig::generative(300, 16, 2e-3), &rng.derive("vq"))
            .unwrap()
            .model;
        World {
            a,
            b,
            b_test,
            teacher,
            vq,
        }
    })
}

fn latent_model() -> &'static LatentTransformer<f32> {
    static LT: OnceLock<LatentTransformer<f32>> = OnceLock::new();
    LT.get_or_init(|| {
        let w = world();
        let grids = tokenize_dataset(&w.a, &w.vq).unwrap();
        let cfg = LtConfig {
            layers: 2,
            heads: 2,
            dim: 32,
            mlp_ratio: 4,
        };
        train_lt(
            &grids,
            w.vq.codebook.size(),
            &cfg,
            &StageConfig::generative(150, 16, 3e-3),
            &SeededRng::new(SEED, "acc/lt"),
        )
        .unwrap()
        .model
    })
}

/// Defaults, with top-k cut to half of the 64-entry codebook.
fn digg_cfg(target_count: usize) -> DiggConfig {
    DiggConfig {
        target_count,
        sampling: SamplingParams {
            temperature: 1.0,
            top_k: 32,
        },
        ..DiggConfig::default()
    }
}

fn few() -> Dataset {
    let w = world();
    sample_few_data(&w.b, 0.25, &mut SeededRng::new(SEED, "acc/few"), false).unwrap()
}

// 1

fn oracle_nearest(v: &[f64], entries: &[f64], d: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, e) in entries.chunks_exact(d).enumerate() {
        let dist: f64 = v.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best_d {
            best_d = dist;
            best = k;
        }
    }
    best
}

fn quantize_matches_oracle(c: &mut Checks) {
    let mut rng = SeededRng::new(SEED, "acc/c1");
    let mut cells = 0;
    let mut mismatches = 0;
    for _ in 0..200 {
        let k = 1 + rng.below(32);
        let d = 1 + rng.below(8);
        let (h, w) = (1 + rng.below(6), 1 + rng.below(6));
        let entries = Tensor::<f64>::randn(&[k, d], 1.0, &mut rng);
        let z = Codebook::from_entries(entries.clone()).unwrap();
        let lat = Tensor::<f64>::randn(&[h, w, d], 1.0, &mut rng);
        let (t, q) = quantize(&lat, &z).unwrap();
        for (i, v) in lat.data().chunks_exact(d).enumerate() {
            let want = oracle_nearest(v, entries.data(), d);
            cells += 1;
            if t.tokens[i] != want || q.data()[i * d..(i + 1) * d] != entries.data()[want * d..(want + 1) * d] {
                mismatches += 1;
            }
        }
    }
    c.note(format!("{cells} cells, {mismatches} mismatches"));
    c.check("random instances match the exhaustive oracle", mismatches == 0);

    // Equidistant codewords and duplicated rows.
    let z = Codebook::from_entries(Tensor::new(vec![4, 2], vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
    let lat = Tensor::new(vec![1, 3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.5, 0.5]).unwrap();
    let (t, _) = quantize(&lat, &z).unwrap();
    c.check("ties resolve to the lowest index", t.tokens == vec![0, 0, 0]);
    let dup = Codebook::from_entries(Tensor::new(vec![3, 1], vec![2.0, 2.0, 2.0]).unwrap()).unwrap();
    let (t, _) = quantize(&Tensor::new(vec![1, 2, 1], vec![2.0, -5.0]).unwrap(), &dup).unwrap();
    c.check("duplicate codewords pick the first", t.tokens == vec![0, 0]);
}

// 2

fn straight_through(c: &mut Checks) {
    let cfg = VqConfig {
        image_size: 8,
        width: 4,
        downsample: 1,
        n_z: 3,
        codebook_size: 8,
        ..VqConfig::default()
    };
    let mut rng = SeededRng::new(SEED, "acc/c2");
    let model = VqModel::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let batch = Tensor::<f64>::uniform(&[2, 3, 8, 8], 1.0, &mut rng).map(|v| 0.5 + 0.5 * v);
    let step = model.loss_and_grads(&batch).unwrap();
    c.check(
        "reconstruction gradient at E(x) is bit-identical to dL/dz_q",
        step.grad_encoder_out_recon.bit_eq(&step.grad_quantized),
    );
    let mut expect = step.grad_quantized.clone();
    expect.add_assign(&commitment_grad(&step.encoded, &step.quantized, cfg.beta_commit));
    c.check("full encoder-output gradient adds only the commitment term", step.grad_encoder_out.bit_eq(&expect));

    // Central differences on a 1x1x2 latent, quantized value held fixed.
    let z = Codebook::from_entries(Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap()).unwrap();
    let e = Tensor::<f64>::new(vec![1, 1, 2], vec![0.3, -0.7]).unwrap();
    let (_, q) = quantize(&e, &z).unwrap();
    let beta = 0.25;
    let g = commitment_grad(&e, &q, beta);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..2 {
        let mut p = e.clone();
        p.data_mut()[i] += h;
        let mut m = e.clone();
        m.data_mut()[i] -= h;
        let fd = (commitment_loss(&p, &q, beta) - commitment_loss(&m, &q, beta)) / (2.0 * h);
        worst = worst.max((fd - g.data()[i]).abs() / fd.abs().max(1e-12));
    }
    // Same check on the real step's encoder output.
    for i in [0, 7, step.encoded.len() - 1] {
        let mut p = step.encoded.clone();
        p.data_mut()[i] += h;
        let mut m = step.encoded.clone();
        m.data_mut()[i] -= h;
        let fd = (commitment_loss(&p, &step.quantized, beta) - commitment_loss(&m, &step.quantized, beta)) / (2.0 * h);
        let an = commitment_grad(&step.encoded, &step.quantized, beta).data()[i];
        worst = worst.max((fd - an).abs() / fd.abs().max(1e-12));
    }
    c.note(format!("commitment fd rel err {worst:.2e}"));
    c.check("commitment gradient within 1e-4 of central differences", worst < 1e-4);
}

// 3

fn toy_transformer() -> LatentTransformer<f64> {
    let mut rng = SeededRng::new(SEED, "acc/c3/data");
    let grids: Vec<TokenGrid> = (0..64)
        .map(|_| {
            let a = rng.below(6);
            let b = 1 + rng.below(5);
            let tokens = (0..16).map(|p| (a + b * (p / 4) + p % 4) % 6).collect();
            TokenGrid::new(4, 4, tokens, 6).unwrap()
        })
        .collect();
    let cfg = LtConfig {
        layers: 2,
        heads: 2,
        dim: 16,
        mlp_ratio: 2,
    };
    train_lt(&grids, 6, &cfg, &StageConfig::generative(200, 8, 1e-2), &SeededRng::new(SEED, "acc/c3/train"))
        .unwrap()
        .model
}

fn greedy_oracle(model: &LatentTransformer<f64>, partial: &TokenGrid, mask: &MaskGrid) -> Vec<usize> {
    let mut cur = partial.tokens.clone();
    for pos in 0..cur.len() {
        if mask.cells[pos] {
            let logits = model.forward_logits(&cur[..pos]).unwrap();
            let row = logits.row(pos);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            cur[pos] = best;
        }
    }
    cur
}

fn autoregressive(c: &mut Checks) {
    let model = toy_transformer();
    let mut rng = SeededRng::new(SEED, "acc/c3");
    let specs = [
        MaskSpec::new(MaskScheme::BottomHalf, 0.5),
        MaskSpec::new(MaskScheme::TopHalf, 0.5),
        MaskSpec::new(MaskScheme::RandomRows, 0.5),
        MaskSpec::new(MaskScheme::RandomBlock, 0.3),
    ];
    let full = SamplingParams {
        temperature: 1.0,
        top_k: 6,
    };
    let greedy = SamplingParams {
        temperature: 1.0,
        top_k: 1,
    };
    let (mut prefix_ok, mut greedy_ok, mut replay_ok) = (true, true, true);
    for trial in 0..40 {
        let tokens: Vec<usize> = (0..16).map(|_| rng.below(6)).collect();
        let partial = TokenGrid::new(4, 4, tokens, 6).unwrap();
        let mask = make_mask(4, 4, &specs[trial % specs.len()], &mut rng).unwrap();
        let sampled = complete_tokens(&partial, &mask, &model, &full, &mut SeededRng::new(trial as u64, "c3")).unwrap();
        let again = complete_tokens(&partial, &mask, &model, &full, &mut SeededRng::new(trial as u64, "c3")).unwrap();
        replay_ok &= sampled == again;
        prefix_ok &= (0..16).all(|p| mask.cells[p] || sampled.tokens[p] == partial.tokens[p]);
        let g = complete_tokens(&partial, &mask, &model, &greedy, &mut rng).unwrap();
        greedy_ok &= g.tokens == greedy_oracle(&model, &partial, &mask);
    }
    c.check("prefix preservation", prefix_ok);
    c.check("greedy completion equals step-by-step oracle", greedy_ok);
    c.check("seed replay", replay_ok);

    // Row i of the full forward pass must not see tokens at i and beyond.
    let mut causal_ok = true;
    for _ in 0..20 {
        let base: Vec<usize> = (0..16).map(|_| rng.below(6)).collect();
        let cut = rng.below(16);
        let mut other = base.clone();
        for t in &mut other[cut..] {
            *t = (*t + 1 + rng.below(5)) % 6;
        }
        let (la, lb) = (model.forward_logits(&base).unwrap(), model.forward_logits(&other).unwrap());
        causal_ok &= (0..=cut).all(|i| la.row(i) == lb.row(i));
        causal_ok &= (cut + 1..16).any(|i| la.row(i) != lb.row(i)) || cut == 15;
    }
    c.check("causal-mask independence", causal_ok);
}

// 4

fn stats(x: &[f64], n: usize, d: usize) -> (Vec<f64>, DMatrix<f64>) {
    let mu: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64).collect();
    let mut s = DMatrix::zeros(d, d);
    for i in 0..n {
        for a in 0..d {
            for b in 0..d {
                s[(a, b)] += (x[i * d + a] - mu[a]) * (x[i * d + b] - mu[b]);
            }
        }
    }
    (mu, s / (n as f64 - 1.0))
}

/// Denman-Beavers iteration; converges for matrices with positive real
/// spectrum such as a product of two SPD matrices.
fn sqrtm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut y = a.clone();
    let mut z = DMatrix::identity(a.nrows(), a.ncols());
    for _ in 0..100 {
        let yi = y.clone().try_inverse().unwrap();
        let zi = z.clone().try_inverse().unwrap();
        let ny = (&y + zi) * 0.5;
        let nz = (&z + yi) * 0.5;
        let delta = (&ny - &y).norm();
        y = ny;
        z = nz;
        if delta < 1e-15 * y.norm() {
            break;
        }
    }
    y
}

fn fd_oracle(a: &[f64], na: usize, b: &[f64], nb: usize, d: usize, eps: f64) -> f64 {
    let (ma, sa) = stats(a, na, d);
    let (mb, sb) = stats(b, nb, d);
    let ridge = DMatrix::<f64>::identity(d, d) * eps;
    let (sa, sb) = (sa + &ridge, sb + &ridge);
    let mean: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum();
    mean + sa.trace() + sb.trace() - 2.0 * sqrtm(&(&sa * &sb)).trace()
}

fn fd_oracles(c: &mut Checks) {
    let mut rng = SeededRng::new(SEED, "acc/c4");
    let bag = |n: usize, d: usize, shift: f64, rng: &mut SeededRng| {
        let data: Vec<f64> = (0..n * d).map(|i| shift * (i % d) as f64 + rng.normal() * (1.0 + (i % d) as f64 * 0.3)).collect();
        FeatureBag::new(n, d, data, "acc").unwrap()
    };
    let a = bag(60, 5, 0.0, &mut rng);
    let self_fd = fd_score(&a, &a, 1e-6).unwrap().value;
    c.check("fd(a, a) = 0", self_fd.abs() <= 1e-6);

    let s = std::f64::consts::FRAC_1_SQRT_2;
    let one_a = FeatureBag::new(2, 1, vec![-s, s], "acc").unwrap();
    let one_b = FeatureBag::new(2, 1, vec![1.0 - s, 1.0 + s], "acc").unwrap();
    let closed = fd_score(&one_a, &one_b, 1e-6).unwrap().value;
    c.check("1-D closed form = 1", (closed - 1.0).abs() <= 1e-6);

    let mut worst: f64 = 0.0;
    let mut sym: f64 = 0.0;
    for _ in 0..10 {
        let a = bag(40, 5, 0.0, &mut rng);
        let b = bag(50, 5, 0.7, &mut rng);
        let got = fd_score(&a, &b, 1e-6).unwrap().value;
        let want = fd_oracle(&a.data, a.n, &b.data, b.n, 5, 1e-6);
        worst = worst.max((got - want).abs() / want.abs());
        sym = sym.max((got - fd_score(&b, &a, 1e-6).unwrap().value).abs());
    }
    c.note(format!("fd(a,a) {self_fd:.1e}, 1-D {closed:.9}, 5-D rel err {worst:.1e}, asym {sym:.1e}"));
    c.check("5-D matches the sqrtm oracle", worst <= 1e-5);
    c.check("symmetry", sym <= 1e-6);
}

// 5

fn fd_direction(c: &mut Checks) {
    let w = world();
    let rb = rerepresent(&w.b, &w.vq).unwrap();
    let ip = InputPipeline::default();
    let fa = extract_features(&w.teacher, &w.a, &ip, "teacher").unwrap();
    let fb = extract_features(&w.teacher, &w.b, &ip, "teacher").unwrap();
    let frb = extract_features(&w.teacher, &rb, &ip, "teacher").unwrap();
    let orig = fd_score(&fa, &fb, 1e-6).unwrap().value;
    let rerep = fd_score(&fa, &frb, 1e-6).unwrap().value;
    c.note(format!("fd(A,B) {orig:.3}, fd(A,rerep B) {rerep:.3}"));
    c.check("fd(A, rerepresent(B)) < fd(A, B)", rerep < orig);
}

// 6

fn irf_contracts(c: &mut Checks) {
    let w = world();
    let few = few();
    let expected_lr = [1e-2, 1e-3, 1e-4, 1e-5];
    let expected_wd = [1e-3, 1e-4, 1e-5];
    c.check("lr grid exact", make_lr_grid(1e-5, 1e-2, 4).unwrap() == expected_lr);
    c.check("wd grid exact", make_lr_grid(1e-5, 1e-3, 3).unwrap() == expected_wd);
    let mut cfg = IrfSection::default();
    c.check("stage-4 defaults use the grids", cfg.stage4.lr_grid == expected_lr && cfg.stage4.wd_grid == expected_wd);
    cfg.stage3.steps = 30;
    cfg.stage4.steps = 30;
    cfg.stage3.batch_size = 32;
    cfg.stage4.batch_size = 32;
    let before = checksum(&w.teacher);
    let out = run_irf(&w.teacher, &few, &w.vq, &cfg, &SeededRng::new(SEED, "acc/c6")).unwrap();
    c.check("teacher untouched", checksum(&w.teacher) == before);
    c.check("stage-3 backbone checksum unchanged", checksum(&out.stage3.model.backbone) == before);
    c.check("stage-4 backbone trained", checksum(&out.stage4.model.backbone) != before);
    let trials = &out.stage4.grid.trials;
    c.check("stage-4 runs |lr|x|wd| = 12 trials", trials.len() == 12);
    let pairs: Vec<(f64, f64)> = expected_lr.iter().flat_map(|&l| expected_wd.iter().map(move |&d| (l, d))).collect();
    c.check("trials cover the grid in lr-major order", trials.iter().map(|t| (t.lr, t.wd)).eq(pairs));
    c.check("rerepresented data delivered", out.rerep.provenance() == ota::data::Provenance::ReRepresented);

    let mut trace_ok = true;
    for (stage, scfg) in [(&out.stage3, &cfg.stage3), (&out.stage4, &cfg.stage4)] {
        let lr = stage.grid.winner_trial().lr;
        let marks: Vec<usize> = scfg.lr_schedule.milestones.iter().map(|f| (f * scfg.steps as f64).round() as usize).collect();
        trace_ok &= stage.lr_trace.len() == scfg.steps;
        for (t, &got) in stage.lr_trace.iter().enumerate() {
            let mut want = lr;
            for &m in &marks {
                if t >= m {
                    want *= scfg.lr_schedule.decay;
                }
            }
            trace_ok &= (got - want).abs() <= 1e-12 * want;
        }
    }
    c.check("lr trace follows the declared schedule at every step", trace_ok);
}

// 7

fn digg_contracts(c: &mut Checks) {
    let w = world();
    let lt = latent_model();
    let few = few();
    let g = digg_cfg(1000);
    let master = SeededRng::new(SEED, "acc/c7");
    let set = build_distill_set(&few, 1000, &w.vq, lt, &g.mask, &g.sampling, &master).unwrap();
    c.check("exactly 1000 images", set.manifest.len() == 1000 && set.lineage.len() == 1000);
    let sources = tokenize_dataset(&few, &w.vq).unwrap();
    let mut lineage_ok = true;
    for (j, l) in set.lineage.iter().enumerate() {
        let src = &sources[j % few.len()];
        lineage_ok &= l.source_id == few.records()[j % few.len()].id;
        lineage_ok &= &l.source_tokens == src;
        lineage_ok &= l.mask.cells.iter().enumerate().all(|(p, &m)| m || l.tokens.tokens[p] == src.tokens[p]);
        lineage_ok &= l.mask.count() > 0;
    }
    c.check("unmasked tokens equal the source tokens", lineage_ok);
    let again = build_distill_set(&few, 1000, &w.vq, lt, &g.mask, &g.sampling, &master).unwrap();
    let same = set
        .manifest
        .records()
        .iter()
        .zip(again.manifest.records())
        .all(|(x, y)| x.id == y.id && x.pixels.bit_eq(&y.pixels));
    c.check("seed replay is bit-identical", same && set.lineage == again.lineage);
    let varied = set.lineage.iter().filter(|l| l.tokens != l.source_tokens).count();
    c.note(format!("{} sources, {varied} images differ from their source", few.len()));
}

// 8

fn distill_contracts(c: &mut Checks) {
    let w = world();
    let lt = latent_model();
    let few = few();
    let g = digg_cfg(64);
    let corpus = build_distill_set(&few, 64, &w.vq, lt, &g.mask, &g.sampling, &SeededRng::new(SEED, "acc/c8/digg"))
        .unwrap()
        .manifest;

    let ip = InputPipeline::default();
    let pre = ota::model::Preprocess::new(&corpus, &ip).unwrap();
    let idx: Vec<usize> = (0..16).collect();
    let x = pre.eval_batch(&idx);
    let id = FeatureAdapter::new(w.teacher.feature_dim(), w.teacher.feature_dim(), &mut SeededRng::new(0, "x"));
    let (loss, gb, _) = distill_loss_and_grads(&w.teacher, &id, &x, &w.teacher.features(&x)).unwrap();
    let zero_grad = ota::nn::named_params(&gb, "").iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0));
    c.check("self-distillation loss is exactly 0 with zero gradients", loss == 0.0 && zero_grad);

    let self_cfg = DistillConfig {
        epochs: 2,
        weight_decay: 0.0,
        ..DistillConfig::default()
    };
    let as_student = TaskModel::with_backbone(w.teacher.clone(), 4, &mut SeededRng::new(0, "h")).unwrap();
    let fixed = distill(&w.teacher, &as_student, &corpus, &self_cfg, &SeededRng::new(SEED, "acc/c8/self")).unwrap();
    c.check(
        "self-distillation stays at the fixed point",
        fixed.epoch_losses.iter().all(|&l| l == 0.0) && checksum(&fixed.student.backbone) == checksum(&w.teacher),
    );

    let before = checksum(&w.teacher);
    let student = TaskModel::new(CnnConfig::student(), 4, &mut SeededRng::new(SEED, "acc/c8/student")).unwrap();
    let cfg = DistillConfig::default();
    let out = distill(&w.teacher, &student, &corpus, &cfg, &SeededRng::new(SEED, "acc/c8")).unwrap();
    c.check("teacher checksum unchanged", checksum(&w.teacher) == before && out.teacher_checksum == before);
    let (first, last) = (out.epoch_losses[0], *out.epoch_losses.last().unwrap());
    c.note(format!("{} epochs, loss {first:.4} -> {last:.4}", out.epoch_losses.len()));
    c.check("70 epochs run", out.epoch_losses.len() == 70);
    c.check("final epoch loss below the first", last < first);
}

// 9

fn report_schema_ok(v: &Value, order: &str, corpus: usize, epochs: usize) -> bool {
    let Some(o) = v.as_object() else { return false };
    let keys = [
        "order",
        "dataset",
        "teacher",
        "student",
        "top1",
        "winner_lr",
        "winner_wd",
        "distill_epoch_losses",
        "corpus_size",
        "seed",
        "config_digest",
    ];
    o.len() == keys.len()
        && keys.iter().all(|k| o.contains_key(*k))
        && v["order"] == order
        && v["top1"].as_f64().is_some_and(|t| (0.0..=1.0).contains(&t))
        && v["winner_lr"].as_f64().is_some_and(|x| x > 0.0)
        && v["winner_wd"].as_f64().is_some()
        && v["corpus_size"].as_u64() == Some(corpus as u64)
        && v["distill_epoch_losses"].as_array().is_some_and(|a| a.len() == epochs && a.iter().all(|x| x.is_f64()))
        && v["config_digest"].as_str().is_some_and(|s| s.len() == 64)
}

fn ota_smoke(c: &mut Checks) {
    let w = world();
    let lt = latent_model();
    let few = few();
    let mut irf = IrfSection::default();
    irf.stage3.steps = 15;
    irf.stage4.steps = 15;
    let digg = digg_cfg(96);
    let mut dcfg = DistillConfig {
        epochs: 4,
        ..DistillConfig::default()
    };
    dcfg.final_finetune.steps = 15;
    let student = CnnConfig::student();
    let settings = OtaSettings {
        irf: &irf,
        digg: &digg,
        distill: &dcfg,
        student: &student,
        student_init: StudentInit::Random,
        dataset_name: "shapes_b",
        config_digest: "0".repeat(64),
    };
    let up = Upstream {
        vq: &w.vq,
        lt,
        teacher: &w.teacher,
    };
    let mut row = ComparisonRow {
        dataset: "shapes_b".into(),
        baseline: None,
        irf_then_digg: None,
        digg_then_irf: None,
    };
    for order in [OtaOrder::IrfThenDigg, OtaOrder::DiggThenIrf] {
        let rng = SeededRng::new(SEED, "acc/c9");
        let first = run_ota(order, &up, &few, &w.b_test, &settings, &rng).unwrap();
        let second = run_ota(order, &up, &few, &w.b_test, &settings, &rng).unwrap();
        let v = serde_json::to_value(&first.report).unwrap();
        c.check(
            &format!("{} report schema", order.as_str()),
            report_schema_ok(&v, order.as_str(), 96, 4),
        );
        c.check(
            &format!("{} replay reproduces every metric", order.as_str()),
            v == serde_json::to_value(&second.report).unwrap() && checksum(&first.model) == checksum(&second.model),
        );
        c.note(format!("{} top1 {:.3}", order.as_str(), first.report.top1));
        match order {
            OtaOrder::IrfThenDigg => row.irf_then_digg = Some(first.report.top1),
            OtaOrder::DiggThenIrf => row.digg_then_irf = Some(first.report.top1),
        }
    }
    let tsv = comparison_tsv(&[row]);
    let lines: Vec<&str> = tsv.lines().collect();
    c.check(
        "comparison table layout",
        lines.first() == Some(&COMPARISON_HEADER) && lines.len() == 3 && lines.iter().all(|l| l.split('\t').count() == 4),
    );
}

fn main() {
    let started = Instant::now();
    let results = [
        criterion(1, "quantize matches exhaustive nearest-neighbour oracle", mins(1), quantize_matches_oracle),
        criterion(2, "straight-through and commitment gradients", mins(1), straight_through),
        criterion(3, "autoregressive completion contracts", mins(5), autoregressive),
        criterion(4, "FD score against independent oracles", mins(1), fd_oracles),
        criterion(5, "re-representation moves B towards A in FD", mins(20), fd_direction),
        criterion(6, "IRF stage contracts", mins(10), irf_contracts),
        criterion(7, "DIGG corpus contracts at 1000 images", mins(10), digg_contracts),
        criterion(8, "distillation contracts", mins(10), distill_contracts),
        criterion(9, "end-to-end OTA in both orders with replay", mins(45), ota_smoke),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.1}s",
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if passed != results.len() {
        std::process::exit(1);
    }
}
