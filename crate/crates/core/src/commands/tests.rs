use std::fs;

use super::*;
use crate::analysis::silhouette;
use crate::checkpoint::save_model;
use crate::dataset::write_scene;
use crate::io::{write_pfm, FloatGrid};
use crate::synthetic::synthetic_scene;
use crate::training::Degrader;

fn tiny_config() -> RunConfig {
    RunConfig::parse(
        "model.scales = 2\nmodel.channels = 4, 8\nmodel.latent_channels = 8\nmodel.offset_hidden = 4\n\
         model.attn_blocks = 1\ntrain.lr = 1e-3\ntrain.steps = 3\ntrain.patch_h = 8\ntrain.patch_w = 8\n\
         analyze.method = pca\n",
    )
    .unwrap()
}

fn write_synthetic(dir: &Path, seed: u64, n: usize, size: usize) {
    let s = synthetic_scene(seed, size, size, n, 1.0).unwrap();
    write_scene(dir, &s.frames, Some(&s.transforms)).unwrap();
}

fn manifest(root: &Path, scenes: &[&str]) -> PathBuf {
    let m = root.join("scenes.txt");
    fs::write(&m, scenes.join("\n")).unwrap();
    m
}

#[test]
fn curate_writes_one_triple_per_frame_reproducibly() {
    let root = tempfile::tempdir().unwrap();
    write_synthetic(&root.path().join("a"), 1, 5, 16);
    let m = manifest(root.path(), &["a"]);
    let cfg = tiny_config();
    let out = root.path().join("out");
    let r = cmd_curate(&m, "blur_noise", &out, &cfg, None).unwrap();
    assert_eq!((r.scenes, r.samples), (1, 5));
    let s = read_samples(&out).unwrap();
    assert_eq!(s[2].i_warped.data(), s[2].i_gt.data());
    assert_ne!(s[0].i_deg, s[0].i_gt);
    let index = fs::read(out.join("index.csv")).unwrap();
    let png = fs::read(out.join("samples/a_00000_deg.png")).unwrap();
    cmd_curate(&m, "blur_noise", &out, &cfg, None).unwrap();
    assert_eq!(fs::read(out.join("index.csv")).unwrap(), index);
    assert_eq!(fs::read(out.join("samples/a_00000_deg.png")).unwrap(), png);
    cmd_curate(&m, "blur_noise", &out, &cfg.clone().with_seed(5), None).unwrap();
    assert_ne!(fs::read(out.join("samples/a_00000_deg.png")).unwrap(), png);
}

#[test]
fn curate_skips_malformed_scenes() {
    let root = tempfile::tempdir().unwrap();
    let good = root.path().join("good");
    write_synthetic(&good, 2, 3, 16);
    fs::write(
        good.join("pose.txt"),
        "20 20 8 8\n1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0.1 0 1 0 0 0 0 1 0\n",
    )
    .unwrap();
    fs::create_dir_all(good.join("depth")).unwrap();
    let depth = FloatGrid {
        height: 16,
        width: 16,
        data: vec![2.0; 256],
    };
    write_pfm(good.join("depth/00001.pfm"), &depth).unwrap();
    write_synthetic(&root.path().join("nodepth"), 3, 3, 16);
    let mut cfg = tiny_config();
    cfg.warp.mode = WarpMode::Geometry;
    let r = cmd_curate(&manifest(root.path(), &["good", "nodepth", "missing"]), "blocky", &root.path().join("o"), &cfg, None)
        .unwrap();
    assert_eq!((r.scenes, r.samples), (1, 3));
    assert_eq!(r.skipped.len(), 2);
    assert!(r.skipped[0].1.contains("depth"), "{}", r.skipped[0].1);
    let err = cmd_curate(&manifest(root.path(), &["nodepth"]), "blocky", &root.path().join("o2"), &cfg, None).unwrap_err();
    assert_eq!(err.class(), crate::ErrorClass::Data);
    let err = cmd_curate(&manifest(root.path(), &["good"]), "sparkle", &root.path().join("o3"), &cfg, None).unwrap_err();
    assert_eq!(err.class(), crate::ErrorClass::Usage);
}

fn curated(root: &Path) -> PathBuf {
    write_synthetic(&root.join("a"), 4, 3, 16);
    write_synthetic(&root.join("b"), 5, 3, 16);
    let out = root.join("samples");
    cmd_curate(&manifest(root, &["a", "b"]), "blur_noise", &out, &tiny_config(), None).unwrap();
    out
}

#[test]
fn train_zero_steps_and_resume() {
    let root = tempfile::tempdir().unwrap();
    let samples = curated(root.path());
    let mut cfg = tiny_config();
    cfg.train.steps = 0;
    let p0 = root.path().join("init.ufix");
    cmd_train(&cfg, &samples, &p0, None).unwrap();
    assert_eq!(load_model(&p0).unwrap(), FixerModel::new(cfg.fixer_config()).unwrap());

    cfg.train.steps = 4;
    let full = root.path().join("full.ufix");
    let r = cmd_train(&cfg, &samples, &full, None).unwrap();
    assert_eq!((r.start_step, r.end_step, r.history.len()), (0, 4, 4));
    cfg.train.steps = 2;
    let part = root.path().join("part.ufix");
    cmd_train(&cfg, &samples, &part, None).unwrap();
    cfg.train.steps = 4;
    let r = cmd_train(&cfg, &samples, &part, Some(&part)).unwrap();
    assert_eq!((r.start_step, r.end_step), (2, 4));
    assert_eq!(fs::read(&part).unwrap(), fs::read(&full).unwrap());
    assert_eq!(
        fs::read_to_string(loss_csv_path(&part)).unwrap(),
        fs::read_to_string(loss_csv_path(&full)).unwrap()
    );
}

#[test]
fn train_divergence_is_numerical_and_leaves_a_diagnostic() {
    let root = tempfile::tempdir().unwrap();
    let samples = curated(root.path());
    let mut cfg = tiny_config();
    cfg.train.lr = 1e300;
    let out = root.path().join("m.ufix");
    let err = cmd_train(&cfg, &samples, &out, None).unwrap_err();
    assert_eq!(err.class(), crate::ErrorClass::Numerical, "{err}");
    assert!(root.path().join("m.diverged.ufix").is_file());
}

fn fix_fixture(root: &Path) -> (PathBuf, RunConfig) {
    let cfg = tiny_config();
    let ck = root.join("m.ufix");
    save_model(&FixerModel::new(cfg.fixer_config()).unwrap(), &ck).unwrap();
    let s = synthetic_scene(6, 16, 16, 3, 1.0).unwrap();
    for d in ["deg", "ref", "flow"] {
        fs::create_dir_all(root.join(d)).unwrap();
    }
    let deg = NamedDegrader::new(DegraderKind::BLUR_NOISE, 1).degrade(&s.frames).unwrap();
    for (i, f) in ["f0", "f1", "f2"].iter().enumerate() {
        write_png(root.join(format!("deg/{f}.png")), &deg[i]).unwrap();
        write_png(root.join(format!("ref/{f}.png")), &s.frames[1]).unwrap();
        let ViewTransform::Flow(fl) = &s.transforms[i] else { unreachable!() };
        crate::io::write_flo(root.join(format!("flow/{f}.flo")), fl).unwrap();
    }
    (ck, cfg)
}

#[test]
fn fix_single_and_directory_modes() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let (ck, cfg) = fix_fixture(r);
    let opts = FixOptions {
        checkpoint: ck,
        degraded: r.join("deg"),
        reference: r.join("ref"),
        transform: Some(r.join("flow")),
        out: r.join("out"),
        ..FixOptions::default()
    };
    let written = cmd_fix(&opts, &cfg).unwrap();
    assert_eq!(list_pngs(r.join("out")).unwrap(), ["f0.png", "f1.png", "f2.png"]);
    assert_eq!(written.len(), 3);
    assert_eq!(read_png(&written[0]).unwrap().dims(), (16, 16));

    let single = FixOptions {
        degraded: r.join("deg/f2.png"),
        reference: r.join("ref/f2.png"),
        transform: Some(r.join("flow/f2.flo")),
        out: r.join("single/x.png"),
        ..opts.clone()
    };
    cmd_fix(&single, &cfg).unwrap();
    assert_eq!(fs::read(r.join("single/x.png")).unwrap(), fs::read(r.join("out/f2.png")).unwrap());

    let missing = FixOptions {
        transform: None,
        ..single.clone()
    };
    assert_eq!(cmd_fix(&missing, &cfg).unwrap_err().class(), crate::ErrorClass::Usage);
    let fallback = FixOptions {
        flow_fallback: true,
        ..missing
    };
    assert_eq!(cmd_fix(&fallback, &cfg).unwrap().len(), 1);

    let mut geo = cfg.clone();
    geo.warp.mode = WarpMode::Geometry;
    let err = cmd_fix(&FixOptions { transform: None, ..single }, &geo).unwrap_err();
    assert!(err.to_string().contains("--flow-fallback"));
}

#[test]
fn fix_geometry_camera_file() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let (ck, mut cfg) = fix_fixture(r);
    cfg.warp.mode = WarpMode::Geometry;
    fs::write(r.join("cam.txt"), "20 20 8 8\n1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
    let depth = FloatGrid {
        height: 16,
        width: 16,
        data: vec![3.0; 256],
    };
    write_pfm(r.join("d.pfm"), &depth).unwrap();
    let opts = FixOptions {
        checkpoint: ck,
        degraded: r.join("deg/f1.png"),
        reference: r.join("ref/f1.png"),
        transform: Some(r.join("cam.txt")),
        out: r.join("g.png"),
        ..FixOptions::default()
    };
    let err = cmd_fix(&opts, &cfg).unwrap_err();
    assert!(err.to_string().contains("--depth"));
    let opts = FixOptions {
        depth: Some(r.join("d.pfm")),
        ..opts
    };
    cmd_fix(&opts, &cfg).unwrap();
    // identity pose: same result as a zero flow
    let flow = crate::warp::FlowField::zeros(16, 16);
    crate::io::write_flo(r.join("zero.flo"), &flow).unwrap();
    let mut fcfg = cfg.clone();
    fcfg.warp.mode = WarpMode::Flow;
    cmd_fix(
        &FixOptions {
            transform: Some(r.join("zero.flo")),
            out: r.join("z.png"),
            ..opts
        },
        &fcfg,
    )
    .unwrap();
    assert_eq!(fs::read(r.join("g.png")).unwrap(), fs::read(r.join("z.png")).unwrap());
}

fn analysis_fixture(root: &Path) -> [PathBuf; 3] {
    let gt = root.join("gt");
    let (a, b) = (root.join("blur"), root.join("blocky"));
    for d in [&gt, &a, &b] {
        fs::create_dir_all(d).unwrap();
    }
    let frames: Vec<Image> = (0..8).map(|s| synthetic_scene(s, 32, 32, 1, 0.0).unwrap().frames.remove(0)).collect();
    let da = NamedDegrader::new(DegraderKind::BlurNoise { sigma: 2.0, noise: 0.0 }, 0).degrade(&frames).unwrap();
    let db = NamedDegrader::new(DegraderKind::Blocky { block: 8, step: 0.5 }, 0).degrade(&frames).unwrap();
    for i in 0..frames.len() {
        let n = format!("{i:03}.png");
        write_png(gt.join(&n), &frames[i]).unwrap();
        write_png(a.join(&n), &da[i]).unwrap();
        write_png(b.join(&n), &db[i]).unwrap();
    }
    [gt, a, b]
}

#[test]
fn analyze_identity_variant_sits_at_origin() {
    let root = tempfile::tempdir().unwrap();
    let [gt, ..] = analysis_fixture(root.path());
    let mut cfg = tiny_config();
    cfg.analyze.method = ProjectionMethod::Tsne;
    let opts = AnalyzeOptions {
        gt: gt.clone(),
        variants: vec![("same".into(), gt)],
        out_prefix: root.path().join("res/a"),
        ..AnalyzeOptions::default()
    };
    let r = cmd_analyze(&opts, &cfg).unwrap();
    assert_eq!(r.groups[0].centroid_norm, 0.0);
    assert!(r.points.iter().all(|p| *p == [0.0, 0.0]));
    assert_eq!(r.clusters.len(), 1);
    assert_eq!((r.clusters[0].mean, r.clusters[0].count_kept), ([0.0, 0.0], 8));
    for f in ["a.csv", "a_summary.txt", "a.png"] {
        assert!(root.path().join("res").join(f).is_file(), "{f}");
    }
}

#[test]
fn analyze_separates_degraders_and_records_shifts() {
    let root = tempfile::tempdir().unwrap();
    let [gt, a, b] = analysis_fixture(root.path());
    let cfg = tiny_config();
    let opts = AnalyzeOptions {
        gt: gt.clone(),
        variants: vec![("blur".into(), a), ("blocky".into(), b.clone())],
        fixed: vec![("blocky".into(), gt)],
        out_prefix: root.path().join("r"),
        ..AnalyzeOptions::default()
    };
    let r = cmd_analyze(&opts, &cfg).unwrap();
    assert_eq!(r.points.len(), 24);
    let s = silhouette(&r.points[..16], &r.labels[..16]).unwrap();
    assert!(s > 0.0, "silhouette {s}");
    assert_eq!(r.shifts, vec![("blocky".to_string(), 1, 2)]);
    assert_eq!(r.groups[2].centroid_norm, 0.0);
    assert!(r.groups[1].centroid_norm > 0.0);
    let csv = fs::read(root.path().join("r.csv")).unwrap();
    let summary = fs::read_to_string(root.path().join("r_summary.txt")).unwrap();
    assert!(summary.contains("shift blocky"));
    cmd_analyze(&opts, &cfg).unwrap();
    assert_eq!(fs::read(root.path().join("r.csv")).unwrap(), csv);

    let mut sub = cfg.clone();
    sub.analyze.samples = Some(3);
    let r3 = cmd_analyze(&opts, &sub).unwrap();
    assert_eq!(r3.names.len(), 3);
    assert_eq!(r3.names, cmd_analyze(&opts, &sub).unwrap().names);

    let bad = AnalyzeOptions {
        fixed: vec![("nope".into(), b)],
        ..opts.clone()
    };
    assert_eq!(cmd_analyze(&bad, &cfg).unwrap_err().class(), crate::ErrorClass::Usage);
    fs::remove_file(root.path().join("blur/003.png")).unwrap();
    let err = cmd_analyze(&opts, &cfg).unwrap_err();
    assert!(matches!(err, Error::FilenameMismatch(_)), "{err}");
}

#[test]
fn eval_identical_dirs_and_missing_plugin() {
    let root = tempfile::tempdir().unwrap();
    let [gt, a, _] = analysis_fixture(root.path());
    let plugins = vec!["lpips=/nonexistent/metric".to_string()];
    let e = cmd_eval(&gt, &gt, &plugins, Some(&root.path().join("e"))).unwrap();
    assert_eq!(e.summary["ssim"].mean, 1.0);
    assert!(!e.summary.contains_key("lpips"));
    let csv = fs::read_to_string(root.path().join("e.csv")).unwrap();
    assert!(csv.starts_with("file,psnr,ssim\n"));
    cmd_eval(&a, &gt, &[], Some(&root.path().join("f"))).unwrap();
    let first = fs::read(root.path().join("f_summary.txt")).unwrap();
    cmd_eval(&a, &gt, &[], Some(&root.path().join("f"))).unwrap();
    assert_eq!(fs::read(root.path().join("f_summary.txt")).unwrap(), first);
}

#[test]
fn labelled_specs() {
    assert_eq!(parse_labelled("x=/a/b").unwrap(), ("x".to_string(), PathBuf::from("/a/b")));
    assert!(parse_labelled("nolabel").is_err());
    assert!(parse_labelled("a,b=dir").is_err());
    assert_eq!(with_suffix(Path::new("out/run"), ".csv"), PathBuf::from("out/run.csv"));
}
