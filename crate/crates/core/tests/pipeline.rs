use std::process::Command;

use wfn::clusters::ProposalSet;
use wfn::fixer::{run_fixing_schedule, BatchSource, FixerConfig, Schedule};
use wfn::metrics::{lzw_compress, lzw_decompress, lzw_pack, lzw_unpack};
use wfn::model::{ActShape, Layer, Network, FORMAT_VERSION, MAGIC};
use wfn::trainer::{forward, loss_ce};

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn lzw_matches_reference_codes() {
    let codes = lzw_compress(b"TOBEORNOTTOBEORTOBEORNOT");
    assert_eq!(
        codes,
        [84, 79, 66, 69, 79, 82, 78, 79, 84, 256, 258, 260, 265, 259, 261, 263]
    );
    let packed = lzw_pack(&codes);
    assert_eq!(
        hex(&packed),
        "05404f04204504f05204e04f054100102104109103105107"
    );
    assert_eq!(lzw_unpack(&packed), codes);
}

#[test]
fn lzw_matches_reference_stream() {
    let data: Vec<u8> = (0..300u32).map(|i| ((i * i + 3 * i) % 7) as u8).collect();
    let codes = lzw_compress(&data);
    assert_eq!(codes.len(), 62);
    assert_eq!(&codes[..7], &[0, 4, 3, 4, 0, 5, 5]);
    assert_eq!(&codes[57..], &[303, 307, 311, 301, 268]);
    assert_eq!(
        hex(&lzw_pack(&codes)),
        "00000400300400000500510010210410610110310510710c10a10810d10b10910e11411311211111010f\
         11511811b11711a11611911c12011d12111e12211f12312a12912c12812e12713012613212513412413612b12f13313712d10c"
    );
    assert_eq!(lzw_decompress(&codes).unwrap(), data);
}

fn conv_norm_dense() -> Network {
    let conv = Layer::conv2d(
        [2, 1, 2, 2],
        vec![0.5, -0.25, 0.125, 1.0, -0.5, 0.75, 0.25, -0.125],
        Some(vec![0.1, -0.2]),
    );
    let norm = Layer::norm(vec![2.0, -0.5], Some(vec![0.05, 0.3]));
    let dw = (0..54)
        .map(|k| (((k * 7) % 11) as f64 - 5.0) * 0.1)
        .collect();
    let dense = Layer::dense(3, 18, dw, Some(vec![0.0, 0.1, -0.1]));
    Network::new(ActShape::image(1, 4, 4), vec![conv, norm, dense]).unwrap()
}

#[test]
fn forward_matches_reference() {
    let net = conv_norm_dense();
    let x: Vec<f64> = (0..16).map(|i| ((i % 5) as f64 - 2.0) * 0.25).collect();
    let out = forward(&net, &x).unwrap();
    let want = [1.3990625, 0.56625, 0.8118750000000002];
    for (a, b) in out.logits.iter().zip(want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    let loss = loss_ce(&out.logits, &[1], 3).unwrap();
    assert!((loss - 1.5213054390539664).abs() < 1e-12, "{loss}");
}

#[test]
fn model_file_golden() {
    let mut net = Network::new(
        ActShape::flat(2),
        vec![Layer::dense(1, 2, vec![0.25, -0.3], Some(vec![0.0]))],
    )
    .unwrap();
    let slot = net.intern(wfn::model::CodebookEntry::from_apot(
        &wfn::apot::apot_approximate(0.25, 1, 0.01).unwrap(),
    ));
    net.fix(0, slot).unwrap();
    let bytes = net.to_bytes();

    assert_eq!(&bytes[..4], &MAGIC);
    assert_eq!(bytes[4], FORMAT_VERSION);
    let m = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let manifest: serde_json::Value = serde_json::from_slice(&bytes[9..9 + m]).unwrap();
    assert_eq!(manifest["param_count"], 3);
    assert_eq!(manifest["codebook"], serde_json::json!(["+2^-2"]));
    let body = &bytes[9 + m..];
    assert_eq!(body.len(), 3 * 8 + 8 + 3 * 4);
    assert_eq!(hex(&body[..8]), hex(&0.25f64.to_le_bytes()));
    assert_eq!(hex(&body[32..]), "00000000ffffffffffffffff");

    assert_eq!(
        hex(&bytes),
        include_str!("golden/tiny.wfnm.hex").trim(),
        "model encoding changed"
    );
    let back = Network::from_bytes(&bytes).unwrap();
    assert_eq!(back, net);
}

#[test]
fn two_cluster_reference() {
    // 100 weights within 0.3% of 1/16 and 50 within 0.3% of -1/8.
    let mut w: Vec<f64> = (0..100)
        .map(|i| 0.0625 * (1.0 + 0.003 * ((i % 7) as f64 - 3.0) / 3.0))
        .collect();
    w.extend((0..50).map(|i| -0.125 * (1.0 + 0.003 * ((i % 5) as f64 - 2.0) / 2.0)));
    let net = Network::new(ActShape::flat(150), vec![Layer::dense(1, 150, w, None)]).unwrap();
    let fixer = FixerConfig::default();
    let proposals = ProposalSet::generate(0.01, fixer.delta0, 0.13).unwrap();
    let schedule = Schedule::linear(0.01, 3).unwrap();
    let (out, state) =
        run_fixing_schedule(net, &proposals, &schedule, &fixer, |_, _, _| Ok(())).unwrap();

    let batches: Vec<_> = state
        .history
        .iter()
        .flat_map(|r| r.batches.iter().map(move |b| (r.t, b)))
        .collect();
    assert_eq!(batches.len(), 2);
    // the mean-distance rule lets the closest -1/8 weight (id 104, d ≈ 1.4985)
    // join the first batch; t = 2 then has nothing to do (101 > 100)
    let (t1, b1) = batches[0];
    assert_eq!(
        (t1, b1.source, b1.centre, b1.omega, b1.size),
        (1, BatchSource::Modal, 0.0625, 1, 101)
    );
    let mut ids = b1.weight_ids.clone();
    ids.sort_unstable();
    let want: Vec<usize> = (0..100).chain([104]).collect();
    assert_eq!(ids, want);
    assert_eq!(*b1.weight_ids.last().unwrap(), 104);
    assert!(state.history[1].batches.is_empty());
    let (t3, b3) = batches[1];
    assert_eq!((t3, b3.centre, b3.omega, b3.size), (3, -0.125, 1, 49));
    assert!(state.all_fixed());
    let mut unique: Vec<u64> = out.params().iter().map(|v| v.to_bits()).collect();
    unique.sort_unstable();
    unique.dedup();
    assert!(unique.len() <= 4);
    assert_eq!(unique.len(), 2);
}

fn wfn_cmd(dir: &std::path::Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_wfn"));
    c.current_dir(dir);
    c.env_remove("RUST_LOG");
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("WFN_")) {
        c.env_remove(k);
    }
    c
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| wfn_cmd(dir.path()).args(args).status().unwrap().code();

    assert_eq!(code(&["compress"]), Some(2), "missing baseline");
    assert_eq!(code(&["--set", "delta=2", "train-baseline"]), Some(2));
    assert_eq!(
        code(&[
            "--set",
            "dataset=csv",
            "--set",
            "train_path=nope.csv",
            "--set",
            "eval_path=nope.csv",
            "train-baseline"
        ]),
        Some(2)
    );
    std::fs::write(dir.path().join("bad.csv"), "x,y,label\n1,2,0\n1,oops,1\n").unwrap();
    assert_eq!(
        code(&[
            "--set",
            "dataset=csv",
            "--set",
            "train_path=bad.csv",
            "--set",
            "eval_path=bad.csv",
            "train-baseline"
        ]),
        Some(3)
    );
    std::fs::write(dir.path().join("bad.wfnm"), b"not a model").unwrap();
    assert_eq!(code(&["analyze", "bad.wfnm", "bad.wfnm"]), Some(3));

    std::fs::write(
        dir.path().join("run.toml"),
        "delta = 0.01\n\nalpha = \"lots\"\n",
    )
    .unwrap();
    let out = wfn_cmd(dir.path())
        .args(["--config", "run.toml", "compress"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("run.toml:3: alpha"), "{err}");

    let out = wfn_cmd(dir.path())
        .env("WFN_ETA", "-1")
        .arg("compress")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("WFN_ETA"));
}

#[test]
fn cli_help_lists_every_key() {
    let out = Command::new(env!("CARGO_BIN_EXE_wfn"))
        .arg("--help")
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for k in wfn::config::KEYS {
        let line = text
            .lines()
            .find(|l| l.split_whitespace().next() == Some(k.name))
            .unwrap_or_else(|| panic!("{} missing from help", k.name));
        assert!(line.contains(k.module), "{line}");
    }
}

#[test]
fn cli_small_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let small = [
        "--set",
        "n_train=200",
        "--set",
        "baseline_epochs=30",
        "--set",
        "epochs_per_iteration=1",
    ];
    let run = |args: &[&str]| {
        let out = wfn_cmd(dir.path()).args(small).args(args).output().unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    };
    run(&["train-baseline"]);
    let first = std::fs::read(dir.path().join("out/baseline.wfnm")).unwrap();
    run(&["train-baseline"]);
    assert_eq!(
        first,
        std::fs::read(dir.path().join("out/baseline.wfnm")).unwrap()
    );

    run(&["compress"]);
    for f in [
        "compressed.wfnm",
        "fixing_log.json",
        "report.json",
        "steps.log",
    ] {
        assert!(dir.path().join("out").join(f).is_file(), "{f}");
    }
    let same = run(&["analyze", "out/baseline.wfnm", "out/baseline.wfnm"]);
    let report: serde_json::Value = serde_json::from_str(&same).unwrap();
    let base = Network::load(dir.path().join("out/baseline.wfnm")).unwrap();
    let mut distinct: Vec<u64> = base.params().iter().map(|v| (v + 0.0).to_bits()).collect();
    distinct.sort_unstable();
    distinct.dedup();
    assert_eq!(report["unique_counts"]["full"], distinct.len());

    let text = run(&[
        "analyze",
        "out/compressed.wfnm",
        "out/baseline.wfnm",
        "--out",
        "out/a.json",
    ]);
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(report["compression_ratio"].as_f64().unwrap() > 1.0);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("out/a.json")).unwrap(),
        text
    );

    let one_shot = run(&[
        "--set",
        "iterations=1",
        "--set",
        "epochs_per_iteration=0",
        "--set",
        "out_dir=one",
        "compress",
    ]);
    assert!(one_shot.contains("one/compressed.wfnm"));

    let clusters = run(&[
        "gen-clusters",
        "--delta",
        "0.05",
        "--delta0",
        "0.01",
        "--wmax",
        "1",
        "--omega",
        "2",
    ]);
    assert!(clusters.starts_with("# delta 0.05 delta0 0.01 w_max 1 omega 2"));

    run(&["--set", "noise_repeats=2", "noise-exp"]);
    let noise = std::fs::read_to_string(dir.path().join("out/noise.csv")).unwrap();
    assert!(noise.starts_with("layer,beta,mode,repeats,mean_accuracy,std_accuracy,ci95\n"));
    assert_eq!(noise.lines().count(), 1 + 3 * 5 * 2);

    run(&[
        "--set",
        "iterations=2",
        "--set",
        "sweep_deltas=[0.04, 0.01]",
        "delta-sweep",
    ]);
    let sweep = std::fs::read_to_string(dir.path().join("out/delta_sweep.csv")).unwrap();
    let deltas: Vec<&str> = sweep
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(deltas, ["0.01", "0.04"]);

    run(&[
        "--set",
        "iterations=2",
        "--set",
        "prune_fractions=[0.5]",
        "prune-exp",
    ]);
    let prune = std::fs::read_to_string(dir.path().join("out/prune.csv")).unwrap();
    assert!(prune.starts_with(
        "p,pruned,baseline_accuracy,final_accuracy,entropy_bits,unique_nonzero\n0.5,"
    ));
}
