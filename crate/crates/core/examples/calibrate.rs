// Scratch calibration harness (dev only).
use std::time::Instant;

use sfdaca::config::ExperimentConfig;
use sfdaca::detector::DetectorModel;
use sfdaca::experiments::{build_detector, make_datasets};
use sfdaca::toy::pretrain;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("speed");

    match mode {
        "speed" => speed(),
        "pretrain" => pretrain_quality(
            args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30),
            args.get(3)
                .map(|s| {
                    let v: Vec<usize> = s.split(',').map(|x| x.parse().unwrap()).collect();
                    [v[0], v[1], v[2], v[3]]
                })
                .unwrap_or([16, 32, 48, 64]),
        ),
        "fps" => fp_diagnostic(),
        other => eprintln!("unknown mode {other}"),
    }
}

fn fp_diagnostic() {
    let mut cfg = ExperimentConfig::default();
    cfg.pretrain.epochs = 40;
    let data = make_datasets(&cfg, 0).unwrap();
    let mut model = build_detector(&cfg, 0).unwrap();
    pretrain(
        &mut model,
        &data.source_train,
        cfg.pretrain.epochs,
        cfg.pretrain.learning_rate,
        cfg.pretrain.momentum,
        0,
    )
    .unwrap();
    // For each class-1 prediction, report confidence and best IoU vs same/any class.
    let mut rows: Vec<(f64, f64, f64, usize)> = Vec::new();
    for img in &data.source_eval {
        let preds = model.infer(&img.image).unwrap();
        for p in preds.iter().filter(|p| p.class_id == 1) {
            let mut best_same = 0.0f64;
            let mut best_any = 0.0f64;
            let mut best_cls = 99;
            for g in &img.labels {
                let v = sfdaca::iou(&p.bbox, &g.bbox);
                if v > best_any {
                    best_any = v;
                    best_cls = g.class_id;
                }
                if g.class_id == 1 {
                    best_same = best_same.max(v);
                }
            }
            rows.push((p.confidence, best_same, best_any, best_cls));
        }
    }
    rows.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    println!("top class-1 predictions: conf, iou_same, iou_any, any_class");
    for r in rows.iter().take(40) {
        println!("{:.3} {:.3} {:.3} cls{}", r.0, r.1, r.2, r.3);
    }
    let fps_hi = rows.iter().filter(|r| r.0 > 0.5 && r.1 < 0.5).count();
    let fps_overlap = rows
        .iter()
        .filter(|r| r.0 > 0.5 && r.1 < 0.5 && r.2 >= 0.3)
        .count();
    println!("high-conf class-1 FPs: {fps_hi}, of which near an object: {fps_overlap}");
}

fn speed() {
    for channels in [[8usize, 16, 24, 32], [12, 24, 36, 48], [16, 32, 48, 64]] {
        let mut cfg = ExperimentConfig::default();
        cfg.detector.channels = channels;
        cfg.data.source_train = 4;
        cfg.data.source_eval = 4;
        cfg.data.target_train = 4;
        cfg.data.target_eval = 4;
        let data = make_datasets(&cfg, 0).unwrap();
        let model = build_detector(&cfg, 0).unwrap();
        let img = &data.source_train[0];

        let t = Instant::now();
        let mut n = 0;
        while t.elapsed().as_secs_f64() < 2.0 {
            let _ = model.infer(&img.image).unwrap();
            n += 1;
        }
        let fwd_ms = t.elapsed().as_secs_f64() * 1000.0 / n as f64;

        let t = Instant::now();
        let mut n = 0;
        while t.elapsed().as_secs_f64() < 2.0 {
            let _ = model.detection_loss(&img.image, &img.labels).unwrap();
            n += 1;
        }
        let fwdbwd_ms = t.elapsed().as_secs_f64() * 1000.0 / n as f64;
        println!(
            "channels {channels:?}: infer {fwd_ms:.1} ms, loss+grad {fwdbwd_ms:.1} ms, params {}",
            model.params().num_scalars()
        );
    }
}

fn pretrain_quality(epochs: usize, channels: [usize; 4]) {
    let mut cfg = ExperimentConfig::default();
    cfg.detector.channels = channels;
    cfg.pretrain.epochs = epochs;
    let t = Instant::now();
    let data = make_datasets(&cfg, 0).unwrap();
    println!("datasets generated in {:.1}s", t.elapsed().as_secs_f64());

    let mut model = build_detector(&cfg, 0).unwrap();
    let t = Instant::now();
    let losses = pretrain(
        &mut model,
        &data.source_train,
        cfg.pretrain.epochs,
        cfg.pretrain.learning_rate,
        cfg.pretrain.momentum,
        0,
    )
    .unwrap();
    println!(
        "pretrain {} epochs x {} imgs in {:.1}s, losses: first {:.4} mid {:.4} last {:.4}",
        epochs,
        data.source_train.len(),
        t.elapsed().as_secs_f64(),
        losses.first().unwrap(),
        losses[losses.len() / 2],
        losses.last().unwrap()
    );

    let t = Instant::now();
    let src = sfdaca::eval::evaluate(&model, &data.source_eval).unwrap();
    let tgt = sfdaca::eval::evaluate(&model, &data.target_eval).unwrap();
    println!(
        "eval in {:.1}s: source mAP {:.4}, target mAP {:.4}",
        t.elapsed().as_secs_f64(),
        src.map,
        tgt.map
    );
    for c in &src.classes {
        println!(
            "  source class {}: ap {:.4} (gt {}, tp {}, fp {})",
            c.class_id, c.ap, c.n_gt, c.tp, c.fp
        );
    }
    for c in &tgt.classes {
        println!(
            "  target class {}: ap {:.4} (gt {}, tp {}, fp {})",
            c.class_id, c.ap, c.n_gt, c.tp, c.fp
        );
    }
}
