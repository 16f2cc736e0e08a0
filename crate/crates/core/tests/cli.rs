use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use promptlab::bitstream::payload_bitrate;
use promptlab::eval::{read_frames, write_frames, FrameFormat};
use promptlab::fixtures::{planted_video, translating_square};
use promptlab::toygen::{init_weights, sample_noise, GeneratorConfig};

fn promptlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptlab"))
        .args(args)
        .env("PROMPTLAB_THREADS", "1")
        .output()
        .expect("spawn promptlab")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn assert_error(out: &Output, code: i32, kind: &str) {
    assert_eq!(out.status.code(), Some(code), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("promptlab: error[{kind}]: ")), "{err}");
}

fn square_dir(dir: &Path, frames: usize) -> std::path::PathBuf {
    let gen = GeneratorConfig::compact();
    let input = dir.join("input");
    write_frames(&input, &translating_square(gen.image_h(), gen.image_w(), frames, 4, 1), FrameFormat::RawF32).unwrap();
    input
}

#[test]
fn usage_errors_exit_two() {
    assert_error(&promptlab(&["invert", "--no-such-flag"]), 2, "usage");
    assert_error(&promptlab(&["frobnicate"]), 2, "usage");
    assert_error(
        &promptlab(&["generate", "--input", "/definitely/missing.prms", "--output", "/tmp/x"]),
        2,
        "usage",
    );
    let dir = tempfile::tempdir().unwrap();
    let input = square_dir(dir.path(), 3);
    let out = dir.path().join("out");
    assert_error(
        &promptlab(&["invert", "--input", s(&input), "--output", s(&out), "--bits", "12", "--generator", "compact"]),
        2,
        "usage",
    );
    assert_error(
        &promptlab(&["ablate", "--input", s(&input), "--intervals", "1", "--generator", "compact"]),
        2,
        "usage",
    );
}

#[test]
fn corrupt_stream_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.prms");
    fs::write(&bad, b"NOPE and some bytes").unwrap();
    let out = dir.path().join("out");
    assert_error(&promptlab(&["generate", "--input", s(&bad), "--output", s(&out)]), 1, "runtime");
}

#[test]
fn bad_thread_count_is_usage() {
    let out = Command::new(env!("CARGO_BIN_EXE_promptlab"))
        .args(["eval", "--reference", "/tmp", "--input", "/tmp"])
        .env("PROMPTLAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_error(&out, 2, "usage");
}

#[test]
fn eval_against_itself_caps_psnr() {
    let dir = tempfile::tempdir().unwrap();
    let input = square_dir(dir.path(), 4);
    let csv = dir.path().join("m.csv");
    ok(&promptlab(&["eval", "--reference", s(&input), "--input", s(&input), "--csv", s(&csv)]));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("frame_index,mse,psnr_db,ssim,grad_diff_proxy"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5);
    for r in &rows {
        assert_eq!(r[2], "99.0000");
        assert_eq!(r[3], "1.000000");
    }
}

#[test]
fn stream_over_ample_link_decodes_everything() {
    let dir = tempfile::tempdir().unwrap();
    let input = square_dir(dir.path(), 8);
    let ladder = dir.path().join("ladder");
    let inv = ok(&promptlab(&[
        "invert", "--input", s(&input), "--output", s(&ladder), "--ranks", "2,4", "--interval", "3",
        "--generator", "compact", "--iters-first", "60", "--iters-sub", "15", "--csv",
        s(&dir.path().join("fit.csv")),
    ]));
    assert_eq!(inv.lines().count(), 2);
    let fit = fs::read_to_string(dir.path().join("fit.csv")).unwrap();
    assert!(fit.starts_with("rank,keyframe_index,kind,"));
    assert!(fit.contains(",0,scene_start,60,"));

    let trace = dir.path().join("trace.txt");
    fs::write(&trace, (1..=200).map(|t| format!("{t}\n")).collect::<String>()).unwrap();
    let out = dir.path().join("session");
    let summary = ok(&promptlab(&[
        "stream", "--input", s(&ladder), "--trace", s(&trace), "--output", s(&out), "--delay-ms", "20",
    ]));
    assert!(summary.contains("frames=8 decoded=8"), "{summary}");
    assert!(summary.contains("drops=0"), "{summary}");
    let ready = fs::read_to_string(out.join("ready.csv")).unwrap();
    assert_eq!(ready.lines().next(), Some("frame_index,ready_ms"));
    assert!(ready.lines().skip(1).all(|l| !l.ends_with(',')));
    assert_eq!(fs::read_to_string(out.join("drops.csv")).unwrap().lines().count(), 1);
    let schedule = fs::read_to_string(out.join("schedule.csv")).unwrap();
    let arrivals = fs::read_to_string(out.join("arrivals.csv")).unwrap();
    assert_eq!(schedule.lines().count(), arrivals.lines().count());
    assert_eq!(read_frames(&out.join("frames")).unwrap().len(), 8);
}

#[test]
fn sweep_csv_bitrates_match_formula() {
    let dir = tempfile::tempdir().unwrap();
    let input = square_dir(dir.path(), 5);
    let csv = dir.path().join("sweep.csv");
    ok(&promptlab(&[
        "sweep", "--input", s(&input), "--ranks", "1,2", "--intervals", "1,4", "--generator", "compact",
        "--iters-first", "20", "--iters-sub", "5", "--csv", s(&csv),
    ]));
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<String>> = text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 4);
    let gen = GeneratorConfig::compact();
    let mut last = 0.0;
    for r in rows {
        let (rank, k): (u64, u64) = (r[0].parse().unwrap(), r[1].parse().unwrap());
        let bitrate: f64 = r[2].parse().unwrap();
        assert_eq!(bitrate, payload_bitrate(gen.m as u64, gen.n as u64, rank, k, 30, 8).unwrap());
        assert!(bitrate >= last);
        last = bitrate;
    }
}

#[test]
fn ablate_writes_both_methods() {
    let dir = tempfile::tempdir().unwrap();
    let input = square_dir(dir.path(), 5);
    let out = ok(&promptlab(&[
        "ablate", "--input", s(&input), "--ranks", "2", "--intervals", "4", "--generator", "compact",
        "--iters-first", "20", "--iters-sub", "5",
    ]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "method,mean_d,mean_mse");
    assert!(lines[1].starts_with("prompt_space,"));
    assert!(lines[2].starts_with("latent_space,"));
}

/// Full-rank, 32-bit, every-frame-a-keyframe round trip on a video the
/// generator can represent exactly.
#[test]
fn planted_round_trip_psnr() {
    let gen = GeneratorConfig::default();
    let weights = init_weights(&gen).unwrap();
    let seed = 0;
    let noise0 = sample_noise(&gen, seed);
    let rank = gen.m.min(gen.n);
    let frames = planted_video(&weights, &noise0, &sample_noise(&gen, 99), 0.95, rank, 1, 4, 7).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("input");
    write_frames(&input, &frames, FrameFormat::RawF32).unwrap();
    let ladder = dir.path().join("ladder");
    ok(&promptlab(&[
        "invert", "--input", s(&input), "--output", s(&ladder), "--ranks", &rank.to_string(), "--interval", "1",
        "--bits", "32", "--iters-first", "2000", "--iters-sub", "300", "--seed", &seed.to_string(),
    ]));
    let decoded = dir.path().join("decoded");
    ok(&promptlab(&[
        "generate", "--input", s(&ladder.join(format!("rank_{rank}.prms"))), "--output", s(&decoded),
    ]));
    let csv = dir.path().join("m.csv");
    ok(&promptlab(&["eval", "--reference", s(&input), "--input", s(&decoded), "--csv", s(&csv)]));
    let text = fs::read_to_string(&csv).unwrap();
    for line in text.lines().skip(1).filter(|l| !l.starts_with("mean")) {
        let psnr: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(psnr >= 35.0, "{line}");
    }
}
