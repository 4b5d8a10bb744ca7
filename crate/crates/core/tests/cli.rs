use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use csrnet::autograd::LayerGraph;
use csrnet::cli::{evaluate, RunConfig};
use csrnet::data::{load_image, save_image, ImageBuffer};
use csrnet::metrics::EvalProtocol;
use csrnet::model::{build_csrnet, read_checkpoint, CsrnetConfig};

fn csrnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csrnet"))
        .args(args)
        .env_remove("CSRNET_THREADS")
        .output()
        .expect("binary runs")
}

fn pattern(w: usize, h: usize, c: usize, seed: usize) -> ImageBuffer {
    let data = (0..w * h * c)
        .map(|i| {
            let (p, ch) = (i / c, i % c);
            let (x, y) = (p % w, p / w);
            ((x * 9 + y * 5 + ch * 40 + seed * 17 + (x * y) % 23) % 256) as u8
        })
        .collect();
    ImageBuffer::new(w, h, c, data).unwrap()
}

fn dataset(root: &Path) {
    fs::create_dir_all(root.join("HR")).unwrap();
    save_image(&pattern(30, 28, 3, 1), &root.join("HR/a.png")).unwrap();
    save_image(&pattern(26, 32, 3, 2), &root.join("HR/b.png")).unwrap();
}

const TINY: &[&str] = &[
    "--set",
    "model.features=4",
    "--set",
    "model.n_pairs=1",
    "--set",
    "model.local_tap_src=1",
    "--set",
    "model.local_tap_dst=3",
    "--set",
    "data.patch=12",
    "--set",
    "data.batch=2",
    "--set",
    "data.epochs=3",
    "--set",
    "data.iterations_per_epoch=2",
    "--set",
    "log.checkpoint_interval=2",
];

fn train(data: &Path, out: &Path, seed: &str) -> Output {
    let mut args = vec![
        "--threads",
        "1",
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--seed", seed]);
    csrnet(&args)
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    dataset(&dir.path().join("data"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = train(&dir.path().join("data"), out, "5");
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let log_a = fs::read_to_string(a.join("loss.tsv")).unwrap();
    assert_eq!(log_a, fs::read_to_string(b.join("loss.tsv")).unwrap());
    assert_eq!(log_a.lines().count(), 1 + 3 * 2);
    assert_eq!(
        fs::read(a.join("final.csrn")).unwrap(),
        fs::read(b.join("final.csrn")).unwrap()
    );
    assert!(a.join("epoch_0002.csrn").exists());

    // Re-running from the dumped effective configuration reproduces the log.
    let c = dir.path().join("c");
    let cfg = a.join("effective_config.txt");
    let o = csrnet(&[
        "--threads",
        "1",
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        c.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(log_a, fs::read_to_string(c.join("loss.tsv")).unwrap());

    // A different seed gives a different run.
    let d = dir.path().join("d");
    assert!(train(&dir.path().join("data"), &d, "6").status.success());
    assert_ne!(log_a, fs::read_to_string(d.join("loss.tsv")).unwrap());
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = csrnet(&[
        "train",
        "--set",
        "data.epochs=0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, vec!["effective_config.txt", "final.csrn"]);

    let report = csrnet(&["inspect", out.join("final.csrn").to_str().unwrap()]);
    assert!(report.status.success());
    let text = String::from_utf8(report.stdout).unwrap();
    assert!(text.contains("total\t7283459"));
    assert!(text.contains("integrity\tok"));
    assert!(text.starts_with("version\t1"));
}

#[test]
fn errors_are_single_prefixed_lines() {
    let dir = tempfile::tempdir().unwrap();
    let o = csrnet(&["train", "--set", "model.unknown=1"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[config]:"), "{err}");

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "data.batch = 16\nnot a key\n").unwrap();
    let o = csrnet(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let ckpt = dir.path().join("m.csrn");
    let out = dir.path().join("run");
    assert!(csrnet(&[
        "train",
        "--set",
        "data.epochs=0",
        "--set",
        "model.features=4",
        "--out",
        out.to_str().unwrap()
    ])
    .status
    .success());
    let bytes = fs::read(out.join("final.csrn")).unwrap();
    fs::write(&ckpt, &bytes[..bytes.len() / 2]).unwrap();
    let o = csrnet(&["inspect", ckpt.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.starts_with("error[integrity]:"), "{err}");
    assert_eq!(err.lines().count(), 1);

    let o = csrnet(&[
        "sr",
        "--checkpoint",
        "missing.csrn",
        "--input",
        "x.png",
        "--output",
        "y.png",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8(o.stderr)
        .unwrap()
        .starts_with("error[io]:"));

    let o = csrnet(&["degrade", "--hr", ".", "--scale", "5", "--out", "."]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8(o.stderr)
        .unwrap()
        .starts_with("error[usage]:"));
}

#[test]
fn super_resolution_output() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(csrnet(&[
        "train",
        "--set",
        "data.epochs=0",
        "--set",
        "model.features=8",
        "--set",
        "model.n_pairs=2",
        "--set",
        "model.local_tap_src=2",
        "--set",
        "model.local_tap_dst=5",
        "--out",
        run.to_str().unwrap()
    ])
    .status
    .success());
    let ckpt = run.join("final.csrn");
    let input = dir.path().join("in.png");
    let gray = dir.path().join("gray.png");
    save_image(&pattern(24, 24, 3, 0), &input).unwrap();
    save_image(&pattern(24, 20, 1, 0), &gray).unwrap();

    let out1 = dir.path().join("o1.png");
    let out2 = dir.path().join("o2.png");
    for out in [&out1, &out2] {
        let o = csrnet(&[
            "sr",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let img = load_image(&out1).unwrap();
    assert_eq!((img.width, img.height, img.channels), (48, 48, 3));
    assert_eq!(fs::read(&out1).unwrap(), fs::read(&out2).unwrap());

    let out3 = dir.path().join("o3.png");
    let o = csrnet(&[
        "sr",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        gray.to_str().unwrap(),
        "--output",
        out3.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let img = load_image(&out3).unwrap();
    assert_eq!((img.width, img.height, img.channels), (48, 40, 3));

    let o = csrnet(&[
        "sr",
        "--scale",
        "3",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--output",
        out3.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn degrade_and_eval_commands() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("set");
    dataset(&root);
    save_image(&pattern(31, 29, 1, 3), &root.join("HR/c.png")).unwrap();
    let o = csrnet(&[
        "degrade",
        "--hr",
        root.join("HR").to_str().unwrap(),
        "--scale",
        "2",
        "--out",
        root.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let manifest = String::from_utf8(o.stdout).unwrap();
    let text = fs::read_to_string(manifest.trim()).unwrap();
    assert_eq!(text.lines().count(), 3);
    let c = load_image(&root.join("LR_x2/c.png")).unwrap();
    assert_eq!((c.width, c.height), (15, 14));

    let table = dir.path().join("eval.tsv");
    let o = csrnet(&[
        "eval",
        "--data",
        root.to_str().unwrap(),
        "--scale",
        "2",
        "--baseline",
        "bicubic",
        "--out",
        table.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&table).unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap(), text);
    assert_eq!(text.lines().count(), 1 + 3 + 1);
    assert!(text.lines().last().unwrap().starts_with("mean\t-\t-\t"));

    // Missing LR files are listed and skipped.
    fs::remove_file(root.join("LR_x2/b.png")).unwrap();
    let o = csrnet(&[
        "eval",
        "--data",
        root.to_str().unwrap(),
        "--scale",
        "2",
        "--baseline",
        "bicubic",
    ]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("# skipped\tb.png"));

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = csrnet(&[
        "eval",
        "--data",
        empty.to_str().unwrap(),
        "--baseline",
        "bicubic",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_model_scores_below_bicubic() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let mut g: LayerGraph<f32> = build_csrnet(&CsrnetConfig::mini(4, 2)).unwrap();
    let report = evaluate(
        Some(&mut g),
        dir.path(),
        2,
        &EvalProtocol::for_scale(2),
        true,
    )
    .unwrap();
    let model = report.mean_model().unwrap();
    let bicubic = report.mean_bicubic().unwrap();
    assert!(model.psnr + 5.0 < bicubic.psnr, "{model:?} vs {bicubic:?}");
}

#[test]
fn hr_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::create_dir_all(root.join("HR")).unwrap();
    fs::create_dir_all(root.join("LR_x2")).unwrap();
    let hr = pattern(24, 24, 3, 4);
    save_image(&hr, &root.join("HR/a.png")).unwrap();
    save_image(&hr.crop(0, 0, 12, 12).unwrap(), &root.join("LR_x2/a.png")).unwrap();
    let hr_f = csrnet::metrics::FloatImage::from(&hr);
    let proto = RunConfig::default().eval_protocol();
    assert_eq!(
        csrnet::metrics::psnr(&hr_f, &hr_f, &proto).unwrap(),
        f64::INFINITY
    );
    assert!((csrnet::metrics::ssim(&hr_f, &hr_f, &proto).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn inspected_checkpoint_lists_parameters_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(csrnet(&[
        "train",
        "--set",
        "data.epochs=0",
        "--set",
        "model.features=4",
        "--out",
        run.to_str().unwrap()
    ])
    .status
    .success());
    let ckpt = read_checkpoint(run.join("final.csrn")).unwrap();
    let text =
        String::from_utf8(csrnet(&["inspect", run.join("final.csrn").to_str().unwrap()]).stdout)
            .unwrap();
    let listed: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("param\t"))
        .map(|l| l.split('\t').nth(1).unwrap())
        .collect();
    let stored: Vec<&str> = ckpt.entries.iter().map(|e| e.name.as_str()).collect();
    assert_eq!(listed, stored);
}
