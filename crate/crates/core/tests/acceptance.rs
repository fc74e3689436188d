//! Acceptance criteria. Each test writes one `criterion N: PASS|FAIL` line
//! straight to stdout (bypassing the harness capture) and then asserts.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rsrcnn::crf::{
    meanfield_step, pairwise_filter_bruteforce, pairwise_filter_fast, run_dcrf, unary_from_prob, CrfFeatures, CrfParams,
    Kernel, LabelField,
};
use rsrcnn::data::{synth_generate, Manifest};
use rsrcnn::gradcheck::gradient_suite;
use rsrcnn::hyperopt::{bo_loop, gp_fit_with_mean, gp_predict, BoConfig, Dim, KernelParams, Scale, SearchSpace};
use rsrcnn::lrs::{param_count, reference_mask_head_param_count, LrsWeights};
use rsrcnn::metrics::{
    confusion, dsc, hausdorff, hausdorff_masks, sensitivity, specificity, split_dataset, Mask,
};
use rsrcnn::pipeline::{
    ablate_k, ablation_csv, evaluate, load_records, train, tune_crf, write_overlays, PipelineConfig,
};
use rsrcnn::proposal::{nms, roialign, roialign2_output_size, RoiAlignSpec, ScoredProposal};
use rsrcnn::tensor::{conv2d_forward, ConvLayer, Tensor};
use rsrcnn::BBox;

fn report(n: usize, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {n}: {verdict} {detail}").unwrap();
    out.flush().unwrap();
    assert!(ok, "criterion {n} failed: {detail}");
}

// ---------------------------------------------------------------- oracles

fn conv_oracle(x: &Tensor, l: &ConvLayer) -> Tensor {
    let (c, h, w) = x.dims3().unwrap();
    let s = l.weight.shape();
    let (o, kh, kw) = (s[0], s[2], s[3]);
    let (st, p) = (l.stride as isize, l.padding as isize);
    let oh = (h as isize + 2 * p - kh as isize) / st + 1;
    let ow = (w as isize + 2 * p - kw as isize) / st + 1;
    let mut out = vec![0.0; o * (oh * ow) as usize];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = l.bias.data()[oc];
                for ic in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = oy * st - p + ky as isize;
                            let ix = ox * st - p + kx as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let wv = l.weight.data()[((oc * c + ic) * kh + ky) * kw + kx];
                            acc += wv * x.data()[(ic * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(oc * oh as usize + oy as usize) * ow as usize + ox as usize] = acc;
            }
        }
    }
    Tensor::new(vec![o, oh as usize, ow as usize], out).unwrap()
}

/// Keep the best remaining box, drop everything overlapping it, repeat.
fn nms_oracle(props: &[ScoredProposal], t: f64) -> Vec<ScoredProposal> {
    let mut left = props.to_vec();
    let mut keep = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            let (a, b) = (&left[i], &left[best]);
            if a.score > b.score || (a.score == b.score && a.index < b.index) {
                best = i;
            }
        }
        let top = left.remove(best);
        left.retain(|p| p.bbox.iou(&top.bbox) <= t);
        keep.push(top);
    }
    keep
}

fn hausdorff_oracle(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let directed = |a: &[(f64, f64)], b: &[(f64, f64)]| {
        a.iter()
            .map(|p| b.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}

fn invert(m: &[f64], n: usize) -> Vec<f64> {
    let mut a = m.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs())).unwrap();
        for k in 0..n {
            a.swap(col * n + k, piv * n + k);
            inv.swap(col * n + k, piv * n + k);
        }
        let d = a[col * n + col];
        for k in 0..n {
            a[col * n + k] /= d;
            inv[col * n + k] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = a[r * n + col];
                for k in 0..n {
                    a[r * n + k] -= f * a[col * n + k];
                    inv[r * n + k] -= f * inv[col * n + k];
                }
            }
        }
    }
    inv
}

/// Continuous bilinear surface of one plane with border clamping.
fn surface(f: &Tensor, c: usize, y: f64, x: f64) -> f64 {
    let (_, h, w) = f.dims3().unwrap();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let mut v = 0.0;
    for i in 0..h {
        let wy = 1.0 - (y - i as f64).abs();
        if wy <= 0.0 {
            continue;
        }
        for j in 0..w {
            let wx = 1.0 - (x - j as f64).abs();
            if wx > 0.0 {
                v += wy * wx * f.at3(c, i, j);
            }
        }
    }
    v
}

/// Mean of the surface over each bin, by dense regular oversampling.
fn roialign_oracle(f: &Tensor, b: &BBox, out: usize, scale: f64) -> Tensor {
    let (c, _, _) = f.dims3().unwrap();
    let dense = 40;
    let mut t = Tensor::zeros(&[c, out, out]);
    let (bh, bw) = (b.height() / out as f64, b.width() / out as f64);
    for ci in 0..c {
        for by in 0..out {
            for bx in 0..out {
                let mut acc = 0.0;
                for i in 0..dense {
                    for j in 0..dense {
                        let y = b.y1 + bh * (by as f64 + (i as f64 + 0.5) / dense as f64);
                        let x = b.x1 + bw * (bx as f64 + (j as f64 + 0.5) / dense as f64);
                        acc += surface(f, ci, y * scale - 0.5, x * scale - 0.5);
                    }
                }
                *t.at3_mut(ci, by, bx) = acc / (dense * dense) as f64;
            }
        }
    }
    t
}

fn random_props(rng: &mut impl Rng, n: usize) -> Vec<ScoredProposal> {
    (0..n)
        .map(|index| {
            let y = rng.gen_range(0.0..40.0);
            let x = rng.gen_range(0.0..40.0);
            ScoredProposal {
                bbox: BBox::new(y, x, y + rng.gen_range(1.0..15.0), x + rng.gen_range(1.0..15.0)),
                // coarse scores so that ties occur
                score: f64::from(rng.gen_range(1u8..6)) / 5.0,
                index,
            }
        })
        .collect()
}

fn random_points(rng: &mut impl Rng, n: usize) -> Vec<(f64, f64)> {
    (0..n).map(|_| (f64::from(rng.gen_range(0u16..200)), f64::from(rng.gen_range(0u16..200)))).collect()
}

fn flip_x(t: &Tensor) -> Tensor {
    let (c, h, w) = t.dims3().unwrap();
    Tensor::from_fn(&[c, h, w], |i| t.at3(i / (h * w), i / w % h, w - 1 - i % w))
}

// --------------------------------------------------------------- criteria

#[test]
fn criterion_1_parameter_counts() {
    let lrs = param_count(&LrsWeights::canonical());
    let reference = reference_mask_head_param_count();
    report(
        1,
        lrs == 1_180_417 && reference == 2_622_977,
        &format!("segmentation head {lrs}, reference mask head {reference}"),
    );
}

#[test]
fn criterion_2_roialign2_sizes() {
    let got = [1.3, 1.0, 1.5].map(roialign2_output_size);
    report(2, got == [18, 14, 21], &format!("N(1.3, 1.0, 1.5) = {got:?}"));
}

#[test]
fn criterion_3_gradient_suite() {
    let start = Instant::now();
    let reports = gradient_suite(7).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let all_checked = reports.iter().all(|r| r.checked > 0);
    report(
        3,
        worst < 1e-5 && all_checked && secs < 120.0,
        &format!("{} cases, worst relative error {worst:.2e}, {secs:.2} s", reports.len()),
    );
}

#[test]
fn criterion_4_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    let mut conv_err = 0.0f64;
    for (o, c, k, s, p, h, w) in [(3, 2, 3, 1, 1, 7, 6), (4, 3, 3, 2, 1, 9, 8), (2, 5, 1, 1, 0, 5, 5), (2, 2, 5, 2, 0, 11, 9)] {
        let mut l = ConvLayer::zeros(o, c, k, s, p);
        l.weight = Tensor::random_uniform(l.weight.shape(), -1.0, 1.0, &mut rng);
        l.bias = Tensor::random_uniform(l.bias.shape(), -1.0, 1.0, &mut rng);
        let x = Tensor::random_uniform(&[c, h, w], -1.0, 1.0, &mut rng);
        conv_err = conv_err.max(conv2d_forward(&x, &l).unwrap().max_abs_diff(&conv_oracle(&x, &l)));
    }

    let nms_ok = (0..50).all(|i| {
        let props = random_props(&mut rng, 5 + i);
        let t = [0.3, 0.5, 0.7][i % 3];
        nms(&props, t) == nms_oracle(&props, t)
    });

    let hd_ok = [(1, 1), (7, 30), (120, 80), (500, 500), (499, 13)].iter().all(|&(na, nb)| {
        let a = random_points(&mut rng, na);
        let b = random_points(&mut rng, nb);
        hausdorff(&a, &b) == Some(hausdorff_oracle(&a, &b))
    });

    let mut gp_err = 0.0f64;
    for d in [1, 3] {
        let n = 12;
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let kernel = KernelParams::isotropic(d, 0.4, 1.3, 1e-4);
        let model = gp_fit_with_mean(&x, &y, &kernel, 0.25).unwrap();
        let mut cov = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                cov[i * n + j] = kernel.k(&x[i], &x[j]);
            }
            cov[i * n + i] += kernel.noise_var + model.jitter;
        }
        let inv = invert(&cov, n);
        for _ in 0..10 {
            let q: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
            let kq: Vec<f64> = x.iter().map(|p| kernel.k(p, &q)).collect();
            let mut mean = 0.25;
            let mut quad = 0.0;
            for i in 0..n {
                for j in 0..n {
                    mean += kq[i] * inv[i * n + j] * (y[j] - 0.25);
                    quad += kq[i] * inv[i * n + j] * kq[j];
                }
            }
            let (m, v) = gp_predict(&model, &q);
            gp_err = gp_err.max((m - mean).abs()).max((v - (kernel.signal_var - quad).max(0.0)).abs());
        }
    }

    let mut roi_worst = 0.0f64;
    for (scale, b) in [
        (1.0, BBox::new(2.3, 1.7, 11.9, 14.2)),
        (0.25, BBox::new(3.0, 5.5, 40.0, 29.0)),
        (0.5, BBox::new(0.0, 0.0, 9.0, 7.0)),
    ] {
        let f = Tensor::random_uniform(&[2, 16, 16], -1.0, 1.0, &mut rng);
        let got = roialign(&f, &b, &RoiAlignSpec::new(5, 5, scale)).unwrap();
        let want = roialign_oracle(&f, &b, 5, scale);
        let range = want.data().iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v))
            - want.data().iter().fold(f64::INFINITY, |a, &v| a.min(v));
        roi_worst = roi_worst.max(got.max_abs_diff(&want) / range);
    }

    report(
        4,
        conv_err <= 1e-12 && nms_ok && hd_ok && gp_err <= 1e-8 && roi_worst < 0.05,
        &format!(
            "conv {conv_err:.1e}, nms exact {nms_ok}, hausdorff exact {hd_ok}, gp {gp_err:.1e}, roialign {:.2}% of range",
            roi_worst * 100.0
        ),
    );
}

#[test]
fn criterion_5_crf_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = Tensor::random_uniform(&[1, 12, 10], 0.0, 1.0, &mut rng);
    let img = Tensor::random_uniform(&[1, 12, 10], -1.0, 1.0, &mut rng);
    let zero = CrfParams {
        w_app: 0.0,
        w_smooth: 0.0,
        ..CrfParams::default()
    };
    let clamped = Tensor::from_fn(&[1, 12, 10], |i| p.data()[i].clamp(zero.eps, 1.0 - zero.eps));
    let identity = run_dcrf(&p, &img, &zero).unwrap().max_abs_diff(&clamped);

    let params = CrfParams {
        w_app: 1.7,
        w_smooth: 0.9,
        ..CrfParams::default()
    };
    let u = unary_from_prob(&p, params.eps).unwrap();
    let q = LabelField::from_unary(&u).unwrap();
    let direct = flip_x(&meanfield_step(&q, &u, &img, &params).unwrap().q);
    let flipped = meanfield_step(&LabelField { q: flip_x(&q.q) }, &flip_x(&u), &flip_x(&img), &params).unwrap().q;
    let flip_err = direct.max_abs_diff(&flipped);

    let img32 = Tensor::random_uniform(&[1, 32, 32], -1.0, 1.0, &mut rng);
    let a = Tensor::random_uniform(&[1, 32, 32], 0.0, 1.0, &mut rng);
    let mut field = Tensor::zeros(&[2, 32, 32]);
    for i in 0..1024 {
        field.data_mut()[i] = 1.0 - a.data()[i];
        field.data_mut()[1024 + i] = a.data()[i];
    }
    let f = CrfFeatures::from_image(&img32).unwrap();
    let mut filter_err = 0.0f64;
    for k in [
        Kernel::Smoothness { theta_gamma: 3.0 },
        Kernel::Appearance {
            theta_alpha: 4.0,
            theta_beta: 0.5,
        },
    ] {
        let exact = pairwise_filter_bruteforce(&field, &f, k).unwrap();
        let fast = pairwise_filter_fast(&field, &f, k).unwrap();
        let num: f64 = exact.data().iter().zip(fast.data()).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = exact.data().iter().map(|x| x * x).sum();
        filter_err = filter_err.max((num / den).sqrt());
    }

    report(
        5,
        identity <= 1e-12 && flip_err <= 1e-12 && filter_err < 0.02,
        &format!("identity {identity:.1e}, flip {flip_err:.1e}, fast filter {:.3}% rel", filter_err * 100.0),
    );
}

#[test]
fn criterion_6_bayesian_optimizer() {
    let space = SearchSpace::new(vec![Dim {
        name: "x".into(),
        lower: 0.0,
        upper: 1.0,
        scale: Scale::Linear,
    }])
    .unwrap();
    let cfg = BoConfig {
        budget: 20,
        seed: 6,
        ..BoConfig::default()
    };
    let start = Instant::now();
    let res = bo_loop(|v| (v[0] - 0.3).powi(2), &space, &cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let err = (res.best_params[0] - 0.3).abs();
    let monotone = res.trace.windows(2).all(|w| w[1].incumbent <= w[0].incumbent);
    report(
        6,
        err < 0.05 && monotone && res.trace.len() == 20 && secs < 10.0,
        &format!("x_best {:.4}, |error| {err:.4}, monotone {monotone}, {secs:.2} s", res.best_params[0]),
    );
}

#[test]
fn criterion_7_end_to_end_synthetic() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::desk();
    let manifest = Manifest::load(&synth_generate(&cfg.synth, dir.path()).unwrap()).unwrap();
    let split = split_dataset(&manifest.subjects(), cfg.split, cfg.seed).unwrap();
    let train_set = load_records(&manifest, &split.train).unwrap();
    let val = load_records(&manifest, &split.val).unwrap();
    let test = load_records(&manifest, &split.test).unwrap();

    let report_t = train(&train_set, &val, &cfg, None).unwrap();
    let w = report_t.weights;
    let untuned = evaluate(&test, &w, &cfg).unwrap().aggregate;
    let tuned = tune_crf(&val, &w, &cfg).unwrap();
    let cfg = PipelineConfig {
        crf: tuned.params.clone(),
        ..cfg
    };
    let agg = evaluate(&test, &w, &cfg).unwrap().aggregate;
    let spec = agg.micro_specificity.unwrap_or(0.0);

    let rows = ablate_k(&train_set, &val, &test, &w, &cfg, &[1.0, 1.3]).unwrap();
    let csv = ablation_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    let ablation_ok = lines.len() == 3
        && lines[0] == "k,n,mean_dsc,micro_dsc,slices"
        && rows.iter().map(|r| r.n).collect::<Vec<_>>() == [14, 18];

    let overlays = write_overlays(&test, &w, &cfg, &dir.path().join("overlays")).unwrap();
    let overlay_ok = overlays.len() == test.len()
        && overlays.iter().all(|r| {
            (r.colors.tp, r.colors.fp, r.colors.fn_) == (r.counts.tp, r.counts.fp, r.counts.fn_)
        });
    let minutes = start.elapsed().as_secs_f64() / 60.0;

    report(
        7,
        agg.micro_dsc >= 0.5 && spec >= 0.999 && ablation_ok && overlay_ok && minutes <= 30.0,
        &format!(
            "{} subjects / {} test slices: micro DSC {:.3} (mean {:.3}; {:.3} before CRF tuning), specificity {spec:.5}, \
             ablation DSC k=1.0 {:.3} / k=1.3 {:.3}, overlays match {overlay_ok}, {minutes:.1} min",
            manifest.subjects().len(),
            test.len(),
            agg.micro_dsc,
            agg.mean_dsc,
            untuned.micro_dsc,
            rows[0].micro_dsc,
            rows[1].micro_dsc,
        ),
    );
}

const TINY: &str = "\
# small enough for a determinism check
synth.n_subjects = 6
synth.slices_per_subject = 2
synth.size = 64
synth.lesions = [1, 3]
backbone.widths = [4, 8]
backbone.feature_channels = 8
head_hidden = 16
lrs_hidden = 8
sgd.max_epochs = 2
trainer.crop = 32
bo.budget = 6
bo.init_points = 3
bo.candidates = 200
";

fn cli(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_rsrcnn"))
        .current_dir(dir)
        .args(["--config", "tiny.conf", "--seed", "3"])
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// Sorted `(relative path, bytes)` of every file under `dir`.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn criterion_8_cli_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("tiny.conf"), TINY).unwrap();
    cli(dir, &["synth-gen", "--out", "data"]);
    for run in ["a", "b"] {
        cli(dir, &["train", "--manifest", "data/manifest.json", "--out", &format!("{run}/train/w.rsw"), "--checkpoints", &format!("{run}/train/ckpt")]);
        cli(dir, &["infer", "--manifest", "data/manifest.json", "--weights", "a/train/w.rsw", "--split", "all", "--out", &format!("{run}/infer")]);
        cli(dir, &["tune-crf", "--manifest", "data/manifest.json", "--weights", "a/train/w.rsw", "--trace", &format!("{run}/tune/trace.csv"), "--out-config", &format!("{run}/tune/tuned.json")]);
    }
    let mut details = Vec::new();
    let mut ok = true;
    for stage in ["train", "infer", "tune"] {
        let a = snapshot(&dir.join("a").join(stage));
        let b = snapshot(&dir.join("b").join(stage));
        let same = !a.is_empty() && a == b;
        ok &= same;
        details.push(format!("{stage} {} files identical {same}", a.len()));
    }
    report(8, ok, &details.join(", "));
}

#[test]
fn criterion_9_metric_conventions() {
    let gt = Mask::from_fn(8, 8, |y, x| (2..5).contains(&y) && (3..6).contains(&x));
    let same = confusion(&gt, &gt).unwrap();
    let identical = (dsc(&same), sensitivity(&same), specificity(&same)) == (1.0, Some(1.0), Some(1.0));

    let other = Mask::from_fn(8, 8, |y, x| y == 7 && x < 3);
    let c = confusion(&other, &gt).unwrap();
    let disjoint = dsc(&c) == 0.0 && sensitivity(&c) == Some(0.0);

    let c = confusion(&Mask::empty(8, 8), &gt).unwrap();
    let background = sensitivity(&c) == Some(0.0) && specificity(&c) == Some(1.0);

    let a = Mask::from_fn(6, 6, |y, x| y == 0 && x == 0);
    let b = Mask::from_fn(6, 6, |y, x| y == 3 && x == 4);
    let hd = hausdorff_masks(&a, &b).unwrap();

    report(
        9,
        identical && disjoint && background && hd == Some(5.0),
        &format!("identical {identical}, disjoint {disjoint}, all-background {background}, HD 3-4-5 {hd:?}"),
    );
}
