use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use refix_core::dataset::write_scene;
use refix_core::io::write_png;
use refix_core::synthetic::synthetic_scene;

fn refix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refix")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TOY: &str = "model.scales = 2\nmodel.channels = 4, 8\nmodel.latent_channels = 8\nmodel.offset_hidden = 4\n\
                   model.attn_blocks = 1\ntrain.lr = 1e-3\ntrain.steps = 2\ntrain.patch_h = 8\ntrain.patch_w = 8\n";

fn workspace(root: &Path) {
    fs::write(root.join("toy.cfg"), TOY).unwrap();
    fs::write(root.join("bad.cfg"), format!("{TOY}model.wings = 2\n")).unwrap();
    fs::write(root.join("hot.cfg"), format!("{TOY}train.lr = 1e300\n")).unwrap();
    for (name, seed) in [("a", 1), ("b", 2)] {
        let s = synthetic_scene(seed, 16, 16, 3, 1.0).unwrap();
        write_scene(&root.join(name), &s.frames, Some(&s.transforms)).unwrap();
    }
    fs::write(root.join("scenes.txt"), "a\nb\n").unwrap();
    fs::write(root.join("broken.txt"), "nowhere\n").unwrap();
}

#[test]
fn help_version_and_usage_errors() {
    assert_eq!(code(&refix(&["--help"])), 0);
    assert_eq!(code(&refix(&["--version"])), 0);
    assert_eq!(code(&refix(&["eval", "--help"])), 0);
    assert_eq!(code(&refix(&[])), 1);
    assert_eq!(code(&refix(&["teleport"])), 1);
    assert_eq!(code(&refix(&["eval", "--pred", "x"])), 1);
}

#[test]
fn pipeline_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path();
    workspace(r);
    let cfg = r.join("toy.cfg");
    let samples = r.join("samples");

    let o = refix(&["--config", p(&r.join("bad.cfg")), "curate", "--manifest", p(&r.join("scenes.txt")), "--degrader", "blur_noise", "--out", p(&samples)]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    let o = refix(&["--config", p(&cfg), "curate", "--manifest", p(&r.join("broken.txt")), "--degrader", "blur_noise", "--out", p(&samples)]);
    assert_eq!(code(&o), 2);

    let curate = |seed: &str| {
        refix(&["--config", p(&cfg), "--seed", seed, "curate", "--manifest", p(&r.join("scenes.txt")), "--degrader", "blur_noise", "--out", p(&samples)])
    };
    let o = curate("3");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("6 samples"));
    let index = fs::read(samples.join("index.csv")).unwrap();
    let deg = fs::read(samples.join("samples/a_00000_deg.png")).unwrap();
    assert_eq!(code(&curate("3")), 0);
    assert_eq!(fs::read(samples.join("index.csv")).unwrap(), index);
    assert_eq!(fs::read(samples.join("samples/a_00000_deg.png")).unwrap(), deg);

    let ck = r.join("m.ufix");
    let o = refix(&["--config", p(&cfg), "--seed", "3", "train", "--samples", p(&samples), "--out", p(&ck)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(r.join("m.loss.csv").is_file());
    let first = fs::read(&ck).unwrap();
    refix(&["--config", p(&cfg), "--seed", "3", "train", "--samples", p(&samples), "--out", p(&ck)]);
    assert_eq!(fs::read(&ck).unwrap(), first);
    let o = refix(&["--config", p(&r.join("hot.cfg")), "train", "--samples", p(&samples), "--out", p(&r.join("hot.ufix"))]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    let frames = r.join("a/frames");
    let fix = |extra: &[&str]| {
        let mut args = vec!["--config", p(&cfg), "fix", "--checkpoint", p(&ck), "--degraded", p(&frames)];
        args.extend_from_slice(extra);
        refix(&args)
    };
    let out = r.join("fixed");
    let o = fix(&["--reference", p(&frames.join("00001.png")), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    let o = fix(&["--reference", p(&frames.join("00001.png")), "--transform", p(&r.join("a/flow")), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let names: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 3);
    let o = fix(&["--reference", p(&frames), "--flow-fallback", "--out", p(&r.join("fixed2"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = refix(&["eval", "--pred", p(&frames), "--gt", p(&frames), "--plugin", "lpips=/no/such/metric", "--out", p(&r.join("e"))]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("ssim: { mean: 1.000000"));
    assert!(fs::read_to_string(r.join("e.csv")).unwrap().starts_with("file,psnr,ssim\n"));
    let o = refix(&["eval", "--pred", p(&out), "--gt", p(&r.join("b/frames"))]);
    assert_eq!(code(&o), 0);
    let o = refix(&["eval", "--pred", p(&samples.join("samples")), "--gt", p(&frames)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn analyze_outputs_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path();
    for d in ["gt", "v", "w"] {
        fs::create_dir_all(r.join(d)).unwrap();
    }
    for i in 0..4u64 {
        let f = synthetic_scene(i, 16, 16, 1, 0.0).unwrap().frames.remove(0);
        let n = format!("{i}.png");
        write_png(r.join("gt").join(&n), &f).unwrap();
        let dark = refix_core::Image::new(16, 16, 3, f.data().iter().map(|v| v * 0.5).collect()).unwrap();
        write_png(r.join("v").join(&n), &dark).unwrap();
        if i < 3 {
            write_png(r.join("w").join(&n), &dark).unwrap();
        }
    }
    let gt = format!("gt={}", p(&r.join("gt")));
    let v = format!("dark={}", p(&r.join("v")));
    let w = format!("dark={}", p(&r.join("w")));
    let prefix = r.join("res/an");
    let run = || refix(&["--seed", "1", "analyze", "--gt", p(&r.join("gt")), "--variant", &v, "--variant", &gt, "--method", "pca", "--out", p(&prefix)]);
    let o = run();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("cluster gt:"));
    let csv = fs::read(r.join("res/an.csv")).unwrap();
    assert!(r.join("res/an.png").is_file());
    run();
    assert_eq!(fs::read(r.join("res/an.csv")).unwrap(), csv);
    let o = refix(&["analyze", "--gt", p(&r.join("gt")), "--variant", &w, "--out", p(&prefix)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("3.png"));
    let o = refix(&["analyze", "--gt", p(&r.join("gt")), "--variant", &v, "--method", "umap", "--out", p(&prefix)]);
    assert_eq!(code(&o), 1);
}
