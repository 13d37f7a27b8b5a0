//! Acceptance run: one PASS/FAIL line per criterion on stdout, exit status 1
//! if any fails. Run alone with `cargo test -p cxr-cli --test acceptance`.

#[path = "../../core/tests/common/mod.rs"]
mod oracles;
#[path = "../../service/tests/common.rs"]
mod service_fixture;

use std::collections::HashSet;
use std::time::Instant;

use chrono::{Duration, NaiveDate};
use cxr_core::cascade::{gate, FinalClass, Thresholds};
use cxr_core::classifier::{BackboneConfig, StageModel};
use cxr_core::evaluator::{cohort_lead_report, lead_time, roc_auc, Capture, CaseTimeline};
use cxr_core::explain::{cam_low_res, grad_cam_low_res, input_gradient, CamMode, HeatMap, Method};
use cxr_core::par::Execution;
use cxr_core::pilot::{run_pilot, PilotConfig};
use cxr_core::segmenter::{dice, LungMask};
use cxr_core::stage3::make_stage3_input;
use cxr_core::trainer::{
    combined_loss, cross_entropy, cross_entropy_grad, distillation_grad, distillation_loss, sample_loss, LossTerm,
};
use cxr_core::{Grid, Stage};
use oracles::{brute_auc, brute_dice, central_diff, naive_cross_entropy, random_logits, rel_err};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)*));
        }
    };
}

struct Runner {
    failures: usize,
}

impl Runner {
    fn run(&mut self, name: &str, budget_secs: f64, f: impl FnOnce() -> Check) {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        self.report(name, budget_secs, secs, outcome);
    }

    fn report(&mut self, name: &str, budget_secs: f64, secs: f64, outcome: Check) {
        let outcome = outcome.and_then(|detail| {
            if secs <= budget_secs {
                Ok(detail)
            } else {
                Err(format!("{detail}; over the {budget_secs} s budget"))
            }
        });
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                self.failures += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {name}: {detail} [{secs:.2} s, budget {budget_secs} s]");
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Grid {
    Grid::from_fn(n, n, |_, _| rng.random::<f64>())
}

fn miniature(size: usize, seed: u64) -> StageModel {
    StageModel::new(BackboneConfig {
        seed,
        ..BackboneConfig::miniature(size)
    })
    .unwrap()
}

fn loss_identity() -> Check {
    let mut rng = rng(100);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=32);
        let logits: Vec<Vec<f64>> = (0..n).map(|_| random_logits(&mut rng, 2, 6.0)).collect();
        let teachers: Vec<Vec<f64>> = (0..n).map(|_| random_logits(&mut rng, 2, 6.0)).collect();
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let original: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let terms: Vec<LossTerm> = (0..n)
            .map(|i| LossTerm {
                logits: &logits[i],
                target: targets[i],
                original: original[i],
                teacher_logits: Some(&teachers[i]),
            })
            .collect();
        let got = combined_loss(&terms, 0.0, 2.0).map_err(|e| e.to_string())?;
        let want = (0..n).map(|i| naive_cross_entropy(&logits[i], targets[i])).sum::<f64>() / n as f64;
        worst = worst.max((got - want).abs());
    }
    ensure!(worst <= 1e-9, "max deviation {worst:e}");
    Ok(format!("100 batches, max |Δ| {worst:.1e} ≤ 1e-9"))
}

fn distillation_sanity() -> Check {
    let mut rng = rng(101);
    for _ in 0..100 {
        let k = rng.random_range(2..=6);
        let s = random_logits(&mut rng, k, 10.0);
        let t = rng.random_range(0.5..5.0);
        let v = distillation_loss(&s, &s, t).map_err(|e| e.to_string())?;
        ensure!(v == 0.0, "self divergence {v:e}");
    }
    let mut min = f64::INFINITY;
    for _ in 0..1000 {
        let k = rng.random_range(2..=6);
        let s = random_logits(&mut rng, k, 8.0);
        let t = random_logits(&mut rng, k, 8.0);
        let v = distillation_loss(&s, &t, rng.random_range(0.5..5.0)).map_err(|e| e.to_string())?;
        min = min.min(v);
    }
    ensure!(min >= 0.0, "negative divergence {min:e}");
    let hand = distillation_loss(&[0.0, 3f64.ln()], &[0.0, 0.0], 1.0).map_err(|e| e.to_string())?;
    ensure!((hand - 0.143841).abs() <= 1e-6, "hand value {hand}");
    Ok(format!("self = 0, min over 1000 pairs {min:.2e}, hand value {hand:.6}"))
}

fn gradient_suite() -> Check {
    const H: f64 = 1e-6;
    const TOL: f64 = 1e-3;
    let mut rng = rng(102);
    let mut worst: f64 = 0.0;
    let mut track = |name: &str, an: f64, fd: f64| -> Result<(), String> {
        let e = rel_err(an, fd);
        worst = worst.max(e);
        ensure!(e <= TOL, "{name}: analytic {an} vs numeric {fd}");
        Ok(())
    };

    for _ in 0..100 {
        let k = rng.random_range(2..=5);
        let z = random_logits(&mut rng, k, 4.0);
        let teacher = random_logits(&mut rng, k, 4.0);
        let target = rng.random_range(0..k);
        let temp = rng.random_range(0.5..4.0);
        let g_ce = cross_entropy_grad(&z, target);
        let g_kl = distillation_grad(&z, &teacher, temp);
        for i in 0..k {
            let at = |v: f64| {
                let mut zz = z.clone();
                zz[i] = v;
                zz
            };
            track(
                "ce",
                g_ce[i],
                central_diff(|v| cross_entropy(&at(v), target).unwrap(), z[i], H),
            )?;
            track(
                "kl",
                g_kl[i],
                central_diff(|v| distillation_loss(&at(v), &teacher, temp).unwrap(), z[i], H),
            )?;
        }
    }

    let model = miniature(16, 5);
    let images: Vec<Grid> = (0..3).map(|_| random_image(&mut rng, 16)).collect();
    let teachers: Vec<Vec<f64>> = (0..3).map(|_| random_logits(&mut rng, 2, 2.0)).collect();
    let targets = [0usize, 1, 1];
    let original = [true, false, true];
    let (lambda, temp) = (0.7, 2.0);
    fn term<'a>(logits: &'a [f64], target: usize, original: bool, teacher: &'a [f64]) -> LossTerm<'a> {
        LossTerm {
            logits,
            target,
            original,
            teacher_logits: Some(teacher),
        }
    }
    let loss_of = |m: &StageModel| {
        let logits: Vec<Vec<f64>> = images.iter().map(|x| m.logits(x).unwrap()).collect();
        let terms: Vec<LossTerm> = (0..3)
            .map(|i| term(&logits[i], targets[i], original[i], &teachers[i]))
            .collect();
        combined_loss(&terms, lambda, temp).unwrap()
    };
    let mut grads = model.params.zero_grads();
    for (i, image) in images.iter().enumerate() {
        let record = model.forward(image).map_err(|e| e.to_string())?;
        let (_, mut dlogits) = sample_loss(
            &term(&record.logits, targets[i], original[i], &teachers[i]),
            lambda,
            temp,
        )
        .map_err(|e| e.to_string())?;
        dlogits.iter_mut().for_each(|d| *d /= 3.0);
        grads.add_assign(&model.param_gradient(&record, &dlogits));
    }
    let mut checked = 0;
    for (pi, p) in model.params.params().iter().enumerate() {
        for vi in (0..p.values.len()).step_by(p.values.len().div_ceil(5)) {
            let fd = central_diff(
                |v| {
                    let mut m = model.clone();
                    m.params.params_mut()[pi].values[vi] = v;
                    loss_of(&m)
                },
                p.values[vi],
                H,
            );
            track(&p.name, grads.0[pi][vi], fd)?;
            checked += 1;
        }
    }

    for seed in 0..3 {
        let model = miniature(16, seed);
        let image = random_image(&mut rng, 16);
        for target in 0..2 {
            let g = input_gradient(&image, &model, target).map_err(|e| e.to_string())?;
            for _ in 0..20 {
                let (y, x) = (rng.random_range(0..16), rng.random_range(0..16));
                let fd = central_diff(
                    |v| {
                        let mut im = image.clone();
                        im.set(y, x, v);
                        model.logits(&im).unwrap()[target]
                    },
                    image.get(y, x),
                    H,
                );
                track("input", g.get(y, x), fd)?;
            }
        }
    }
    Ok(format!(
        "CE, KL, {checked} parameters, 120 input pixels; max rel err {worst:.1e} ≤ 1e-3"
    ))
}

fn auc_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    loop {
        let n = rng.random_range(2..=30);
        let levels = rng.random_range(2..=8);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            return (scores, labels);
        }
    }
}

fn auc_oracle() -> Check {
    let mut rng = rng(103);
    for i in 0..1000 {
        let (s, l) = auc_instance(&mut rng);
        let (got, want) = (roc_auc(&s, &l).map_err(|e| e.to_string())?, brute_auc(&s, &l));
        ensure!(got == want, "instance {i}: {got} vs {want}");
    }
    for i in 0..100 {
        let (s, l) = auc_instance(&mut rng);
        let a = roc_auc(&s, &l).unwrap();
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v - 1.0).exp() * 7.0 + 1.0).collect();
        ensure!(roc_auc(&t, &l).unwrap() == a, "monotone instance {i}");
    }
    Ok("1000 exact matches, 100 monotone invariances".into())
}

fn dice_oracle() -> Check {
    let mask = |bits: &[bool]| {
        LungMask::new(Grid::new(8, 8, bits.iter().map(|&b| b as u8 as f64).collect()).unwrap()).unwrap()
    };
    let mut rng = rng(104);
    for i in 0..500 {
        let (pa, pb) = (rng.random::<f64>(), rng.random::<f64>());
        let a: Vec<bool> = (0..64).map(|_| rng.random_bool(pa)).collect();
        let b: Vec<bool> = (0..64).map(|_| rng.random_bool(pb)).collect();
        let got = dice(&mask(&a), &mask(&b)).map_err(|e| e.to_string())?;
        ensure!((got - brute_dice(&a, &b)).abs() < 1e-12, "pair {i}");
        ensure!(dice(&mask(&a), &mask(&a)).unwrap() == 1.0, "dice(A, A) on pair {i}");
    }
    let top: Vec<bool> = (0..64).map(|i| i < 32).collect();
    let bottom: Vec<bool> = top.iter().map(|b| !b).collect();
    ensure!(dice(&mask(&top), &mask(&bottom)).unwrap() == 0.0, "disjoint");
    ensure!(
        dice(&mask(&[false; 64]), &mask(&[false; 64])).unwrap() == 1.0,
        "both empty"
    );
    Ok("500 pairs, A∩A = 1, disjoint 0, empty 1".into())
}

fn attribution_identities() -> Check {
    let mut rng = rng(105);
    let mut worst: f64 = 0.0;
    for draw in 0..100u64 {
        let model = miniature(32, draw);
        let record = model.forward(&random_image(&mut rng, 32)).map_err(|e| e.to_string())?;
        let target = (draw % 2) as usize;
        let c = cam_low_res(&record, &model, target, CamMode::Spatial).map_err(|e| e.to_string())?;
        let g = grad_cam_low_res(&record, &model, target).map_err(|e| e.to_string())?;
        let cells = c.len() as f64;
        for (cv, gv) in c.data().iter().zip(g.data()) {
            ensure!(*gv >= 0.0, "negative GradCAM cell on draw {draw}");
            worst = worst.max((cv.max(0.0) - gv * cells).abs());
        }
        let other = grad_cam_low_res(&record, &model, 1 - target).map_err(|e| e.to_string())?;
        ensure!(
            other.data().iter().all(|&v| v >= 0.0),
            "negative GradCAM cell on draw {draw}"
        );
    }
    ensure!(worst <= 1e-5, "GradCAM vs ReLU CAM deviation {worst:e}");
    for _ in 0..100 {
        let (i, j) = (rng.random_range(0..32), rng.random_range(0..32));
        let mut low = Grid::zeros(32, 32);
        low.set(i, j, rng.random_range(0.5..3.0));
        let (y, x) = HeatMap::from_low_res(&low, 512, 512, Stage::Pneumonia, Method::Cam)
            .pixels
            .argmax();
        ensure!((y / 16, x / 16) == (i, j), "peak of cell ({i},{j}) at pixel ({y},{x})");
    }
    Ok(format!(
        "100 draws, max |GradCAM - ReLU CAM| {worst:.1e}; nonnegative; 100 one-hot peaks in block"
    ))
}

fn masking_contract() -> Check {
    let mut rng = rng(106);
    for i in 0..100 {
        let x = random_image(&mut rng, 24);
        let low = random_image(&mut rng, 3);
        let h = HeatMap::from_low_res(&low, 24, 24, Stage::Pneumonia, Method::Cam);
        let out = make_stage3_input(&x, "s", &h).map_err(|e| e.to_string())?;
        ensure!(
            out.pixels.data().iter().zip(x.data()).all(|(a, b)| a <= b),
            "pair {i} brightened"
        );
    }
    let x = random_image(&mut rng, 24);
    let with = |g: Grid| {
        let h = HeatMap {
            pixels: g,
            stage: Stage::Pneumonia,
            method: Method::Cam,
            flat: false,
        };
        make_stage3_input(&x, "s", &h).unwrap().pixels
    };
    ensure!(with(Grid::filled(24, 24, 1.0)) == x, "all-ones map changed the image");
    ensure!(
        with(Grid::zeros(24, 24)).data().iter().all(|&v| v == 0.0),
        "all-zeros map left signal"
    );
    Ok("100 pairs never brighter; ones identity, zeros annihilation".into())
}

fn expected_class(p2: f64, p3: f64, t: &Thresholds) -> FinalClass {
    match (p2 >= t.stage2, p3 >= t.stage3) {
        (false, _) => FinalClass::Normal,
        (true, true) => FinalClass::Covid,
        (true, false) => FinalClass::NonCovidPneumonia,
    }
}

fn cascade_gating() -> Check {
    let mut rng = rng(107);
    for i in 0..1000 {
        let t = if i % 2 == 0 {
            Thresholds::default()
        } else {
            Thresholds {
                stage2: rng.random(),
                stage3: rng.random(),
            }
        };
        let p2 = if i % 10 == 0 { t.stage2 } else { rng.random() };
        let p3 = if i % 10 == 5 { t.stage3 } else { rng.random() };
        let got = gate(p2, Some(p3), &t).map_err(|e| e.to_string())?;
        ensure!(got == expected_class(p2, p3, &t), "p2={p2} p3={p3}: {got:?}");
    }
    let ids = concurrent_uploads()?;
    Ok(format!(
        "1000 pairs follow the table; 100 concurrent uploads stored {ids} records"
    ))
}

fn concurrent_uploads() -> Result<usize, String> {
    use cxr_service::api::{start, AppState};
    use reqwest::multipart::{Form, Part};

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let state = AppState::new(service_fixture::config(dir.path())).map_err(|e| e.to_string())?;
    state.registry.load_active().map_err(|e| e.to_string())?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    rt.block_on(async move {
        let server = start(state, false).await.map_err(|e| e.to_string())?;
        let url = format!("http://{}/v1/screenings", server.addr);
        let client = reqwest::Client::new();
        let tasks: Vec<_> = (0..100u64)
            .map(|i| {
                let (client, url) = (client.clone(), url.clone());
                tokio::spawn(async move {
                    let part = Part::bytes(service_fixture::png(i)).file_name("x.png");
                    let r = client
                        .post(&url)
                        .multipart(Form::new().part("image", part))
                        .send()
                        .await;
                    let r = r.map_err(|e| e.to_string())?;
                    if r.status() != reqwest::StatusCode::CREATED {
                        return Err(format!("status {}", r.status()));
                    }
                    let v: serde_json::Value = r.json().await.map_err(|e| e.to_string())?;
                    v["id"].as_u64().ok_or_else(|| "missing id".to_string())
                })
            })
            .collect();
        let mut ids = HashSet::new();
        for t in tasks {
            let id = t.await.map_err(|e| e.to_string())??;
            ensure!(ids.insert(id), "id {id} returned twice");
        }
        let store = &server.state.store;
        ensure!(store.len() == 100, "{} records for 100 uploads", store.len());
        ensure!(store.audit().is_empty(), "inconsistent records {:?}", store.audit());
        let reopened = cxr_service::store::Store::open(store.dir()).map_err(|e| e.to_string())?;
        ensure!(reopened.len() == 100, "{} records after reopening", reopened.len());
        server.handle.abort();
        Ok(ids.len())
    })
}

fn lead_time_fixtures() -> Check {
    let d = |s: &str| NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap();
    let case = |lead: Option<i64>| {
        let confirm = d("2020-02-20");
        let capture = match lead {
            Some(l) => Capture {
                date: confirm - Duration::days(l),
                positive: true,
            },
            None => Capture {
                date: d("2020-02-01"),
                positive: false,
            },
        };
        CaseTimeline::new("c", None, Some(confirm), vec![capture])
    };
    let fixture = CaseTimeline::new(
        "a",
        None,
        Some(d("2020-01-31")),
        vec![Capture {
            date: d("2020-01-14"),
            positive: true,
        }],
    );
    ensure!(lead_time(&fixture) == Some(17), "lead {:?}", lead_time(&fixture));
    let r = cohort_lead_report(&[case(Some(6))]);
    ensure!((r.at_least_2_days, r.at_least_5_days) == (1, 1), "lead 6 counted {r:?}");
    let r = cohort_lead_report(&[case(Some(1)), case(Some(3)), case(None)]);
    ensure!(
        (r.at_least_2_days, r.at_least_5_days) == (1, 0),
        "leads 1, 3, none counted {r:?}"
    );
    let r = cohort_lead_report(&[]);
    ensure!(
        (r.at_least_2_days, r.at_least_5_days) == (0, 0),
        "empty cohort counted {r:?}"
    );
    Ok("17 days; cohorts (1,1), (1,0), (0,0)".into())
}

fn main() {
    let mut runner = Runner { failures: 0 };
    runner.run("loss identity", 10.0, loss_identity);
    runner.run("distillation sanity", 5.0, distillation_sanity);
    runner.run("gradient suite", 120.0, gradient_suite);
    runner.run("auc oracle", 30.0, auc_oracle);
    runner.run("dice oracle", 5.0, dice_oracle);
    runner.run("attribution identities", 60.0, attribution_identities);
    runner.run("masking contract", 5.0, masking_contract);
    runner.run("cascade gating", 60.0, cascade_gating);
    runner.run("lead-time fixtures", 1.0, lead_time_fixtures);

    let start = Instant::now();
    let pilot = run_pilot(&PilotConfig::reference(), true, Execution::default());
    let secs = start.elapsed().as_secs_f64();
    match pilot {
        Ok(run) => {
            let r = &run.report;
            let (dsc, a2, a3) = (r.stage1_test_dice, r.stage2_test.auc, r.stage3_test.auc);
            let ok = dsc >= 0.95 && a2 >= 0.95 && a3 >= 0.90;
            let detail =
                format!("stage-1 DSC {dsc:.4} (≥ 0.95), stage-2 AUC {a2:.4} (≥ 0.95), stage-3 AUC {a3:.4} (≥ 0.90)");
            runner.report(
                "synthetic pilot",
                1800.0,
                secs,
                if ok { Ok(detail) } else { Err(detail) },
            );

            let f = &r.forgetting;
            let drop = f.drop_with_distillation();
            let detail = format!(
                "original-partition val AUC {:.4} -> {:.4} with distillation (drop {drop:.4} ≤ 0.05), {} without",
                f.before,
                f.after_with_distillation,
                f.after_without_distillation.map_or("n/a".into(), |v| format!("{v:.4}")),
            );
            runner.report(
                "forgetting check",
                1200.0,
                secs,
                if drop <= 0.05 { Ok(detail) } else { Err(detail) },
            );
        }
        Err(e) => {
            runner.report("synthetic pilot", 1800.0, secs, Err(e.to_string()));
            runner.report("forgetting check", 1200.0, secs, Err(e.to_string()));
        }
    }

    if runner.failures > 0 {
        println!("{} criteria failed", runner.failures);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
