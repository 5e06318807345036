use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relight::codec::Ot3Codes;
use relight::evaluation::eval_single;
use relight::losses::LossWeights;
use relight::model::ModelConfig;
use relight::synthdata::{generate_dataset, DatasetConfig};
use relight::training::{SceneCache, Trainer, TrainingConfig};
use relight::backbone::Tensor;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let steps: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let dir = std::env::temp_dir().join(format!("relight_tune_{lr}_{steps}"));
    let _ = std::fs::remove_dir_all(&dir);
    let dcfg = DatasetConfig {
        root: dir.clone(),
        seed: 7,
        resolution: 64,
        train_subjects: 4,
        train_envs: 2,
        test_subjects: 3,
        test_envs: 3,
        env_width: 96,
        sample_grid: 16,
        explicit_seeds: None,
    };
    let bundle = generate_dataset(&dcfg).unwrap();
    let cache = SceneCache::load(bundle.train).unwrap();
    let cfg = TrainingConfig {
        model: ModelConfig::desk(11),
        lr,
        batch_size: 2,
        epochs: 0,
        steps: Some(steps),
        seed: 11,
        weights: LossWeights::default(),
        feat: true,
        cons: true,
        checkpoint_every: 0,
    };
    let mut trainer = Trainer::new(cfg).unwrap();
    let t0 = std::time::Instant::now();
    let summary = trainer.run(&cache, steps).unwrap();
    let first = summary.first.unwrap();
    let tail = 50.min(summary.rows.len());
    let tail_relight: f32 = summary.rows[summary.rows.len() - tail..]
        .iter().map(|r| r.values.relight).sum::<f32>() / tail as f32;
    println!(
        "lr={lr} steps={steps}: relight {:.4} -> {:.4} ({:.1}% red) in {:.0}s; total {:.4} -> {:.4}",
        first.relight, tail_relight, (1.0 - tail_relight / first.relight) * 100.0,
        t0.elapsed().as_secs_f64(),
        first.total, summary.last.unwrap().total
    );

    // criterion 7 + 8 probes on the held-out split
    let test = bundle.test.unwrap();
    let tcache = SceneCache::load(test).unwrap();
    let report = eval_single(&trainer.model, &tcache, 5).unwrap();
    println!(
        "efficacy: model rmse {:.4} vs identity {:.4} -> {}",
        report.model.rmse, report.identity.rmse,
        if report.model.rmse < report.identity.rmse { "PASS" } else { "FAIL" }
    );

    let model = &trainer.model;
    let anchors_of = |idx: usize| -> Ot3Codes {
        let (img, mask) = tcache.scene(idx);
        let i = model.encode_illumination(img, mask).unwrap();
        model.decode_anchors(&i).unwrap()
    };
    let l1 = |a: &Tensor<f32>, b: &Tensor<f32>| -> f64 {
        a.data().iter().zip(b.data().iter()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64
    };
    let five = |y: &Ot3Codes, p: &Ot3Codes, m: &Ot3Codes| -> f64 {
        (l1(&y.p90, &p.zero) + l1(&y.zero, &p.m90) + l1(&y.zero, &m.p90)
            + l1(&y.m90, &m.zero) + l1(&m.m90, &p.p90)) / 5.0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut matched, mut mismatched) = (0.0f64, 0.0f64);
    let mut code_mag = 0.0f64;
    let mut n = 0usize;
    for yi in 0..tcache.len() {
        let ry = tcache.record(yi).clone();
        let pi = tcache.find(ry.subject_id, ry.env_id, ry.rotation as i32 + 3).unwrap();
        let mi = tcache.find(ry.subject_id, ry.env_id, ry.rotation as i32 - 3).unwrap();
        let ay = anchors_of(yi);
        code_mag += ay.zero.data().iter().map(|v| v.abs() as f64).sum::<f64>() / ay.zero.len() as f64;
        let ap = anchors_of(pi);
        let am = anchors_of(mi);
        matched += five(&ay, &ap, &am);
        let mut z1 = rng.random_range(0..tcache.len());
        while z1 == pi { z1 = rng.random_range(0..tcache.len()); }
        let mut z2 = rng.random_range(0..tcache.len());
        while z2 == mi { z2 = rng.random_range(0..tcache.len()); }
        mismatched += five(&ay, &anchors_of(z1), &anchors_of(z2));
        n += 1;
    }
    println!(
        "self-org: matched {:.5} vs mismatched {:.5} ({:.1}%) -> {}; mean |code| {:.4}",
        matched / n as f64, mismatched / n as f64,
        matched / mismatched * 100.0,
        if matched < 0.5 * mismatched { "PASS" } else { "FAIL" },
        code_mag / n as f64
    );
    let _ = std::fs::remove_dir_all(&dir);
}
