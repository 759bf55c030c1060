mod common;

use std::fs;
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use shmstate::arena::ArenaAllocator;
use shmstate::driver::{self, read_dir, RunConfig};
use shmstate::sim_kernel::{checksum_state, init_state, InitSpec, StateDigest};
use shmstate::slab_buffer::{RamdiskConfig, SlabBuffer};
use shmstate::state_format::read_metadata;

const EXE: &str = env!("CARGO_BIN_EXE_shmstate");

fn shmstate(args: &[&str]) -> Output {
    Command::new(EXE).args(args).output().unwrap()
}

fn init(root: &Path, spec: &InitSpec) {
    driver::create_layout(root).unwrap();
    let buf = SlabBuffer::new(ArenaAllocator::new(), RamdiskConfig::default());
    init_state(&buf, &read_dir(root), spec).unwrap();
}

fn straight_run(spec: &InitSpec, steps: u64) -> StateDigest {
    let tmp = common::shm_or_tmp();
    let root = tmp.path().join("state");
    init(&root, spec);
    let mut cfg = RunConfig::new(&root, tmp.path().join("ckpt"));
    cfg.steps = steps;
    cfg.ramdisk = RamdiskConfig::default();
    driver::run(&cfg).unwrap();
    checksum_state(&read_dir(&root)).unwrap()
}

fn stderr_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("").to_string()
}

#[test]
fn exit_codes_and_error_lines() {
    let tmp = common::shm_or_tmp();
    let p = |s: &str| tmp.path().join(s).display().to_string();

    let out = shmstate(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    let out = shmstate(&["run", "--steps", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).starts_with("error kind=usage code=2 msg="));

    let out = shmstate(&["step", "--read", &p("missing"), "--write", &p("w")]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_line(&out).starts_with("error kind=state code=3 msg="));

    let out = shmstate(&["verify", &p("nothing")]);
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr_line(&out).starts_with("error kind=checkpoint code=4 msg="));
}

#[test]
fn cli_round_trip_matches_library() {
    let tmp = common::shm_or_tmp();
    let root = tmp.path().join("state");
    let dest = tmp.path().join("ckpt");
    let (r, d) = (root.display().to_string(), dest.display().to_string());
    let out = shmstate(&["init", "--state-root", &r, "--particles", "500", "--slabs", "4", "--cells-per-slab", "4"]);
    assert!(out.status.success(), "{}", stderr_line(&out));

    let config = tmp.path().join("run.conf");
    fs::write(
        &config,
        format!("# three steps\nstate_root = {r}\ncheckpoint_dest = {d}\nsteps = 3\ncheckpoint_every_steps = 2\n"),
    )
    .unwrap();
    let out = shmstate(&["run", "--config", config.to_str().unwrap(), "--child-process"]);
    assert!(out.status.success(), "{}", stderr_line(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("before_step=2 decision=Timed complete=true"), "{stdout}");

    let expected = straight_run(&InitSpec::new(500, 4, 4, 1), 3);
    assert!(stdout.contains(&format!("final_step=3 digest={expected}")), "{stdout}");

    let out = shmstate(&["verify", "--state", &format!("{r}/read")]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), format!("digest={expected}"));

    let ckpt = fs::read_dir(&dest).unwrap().next().unwrap().unwrap().path();
    assert!(shmstate(&["verify", ckpt.to_str().unwrap()]).status.success());
    fs::remove_dir_all(&root).unwrap();
    let out = shmstate(&["restore", "--checkpoint", ckpt.to_str().unwrap(), "--state-root", &r]);
    assert!(out.status.success(), "{}", stderr_line(&out));
    assert_eq!(read_metadata(&read_dir(&root)).unwrap().step, 2);

    let out = shmstate(&["checkpoint", "--state-root", &r, "--dest", &d, "--deadline-seconds", "1e-9"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn bench_cli_writes_csv() {
    let tmp = common::shm_or_tmp();
    let csv = tmp.path().join("b.csv");
    let out = shmstate(&[
        "bench",
        "--dir",
        tmp.path().to_str().unwrap(),
        "--sizes",
        "1M,2M",
        "--policies",
        "UnlinkThenUnmap,PrivateFree,Memset",
        "--reps",
        "2",
        "--pin",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_line(&out));
    let rows = shmstate::bench::read_csv(&csv).unwrap();
    assert_eq!(rows.len(), 12);
}

// Kills a child-process run (driver and its step child) at spread-out
// moments, resumes, and compares with an uninterrupted run.
#[test]
fn killed_run_resumes_to_same_digest() {
    let spec = InitSpec::new(20_000, 8, 16, 11);
    let steps = 6;
    let expected = straight_run(&spec, steps);

    let t = Instant::now();
    {
        let tmp = common::shm_or_tmp();
        let root = tmp.path().join("state");
        init(&root, &spec);
        let r = root.display().to_string();
        let out = shmstate(&["run", "--state-root", &r, "--checkpoint-dest", "/nonexistent", "--steps", "6", "--child-process"]);
        assert!(out.status.success(), "{}", stderr_line(&out));
    }
    let full = t.elapsed();

    for k in 1..=5u32 {
        let tmp = common::shm_or_tmp();
        let root = tmp.path().join("state");
        init(&root, &spec);
        let r = root.display().to_string();
        let mut child = Command::new(EXE)
            .args(["run", "--state-root", &r, "--checkpoint-dest", "/nonexistent", "--steps", "6", "--child-process"])
            .process_group(0)
            .spawn()
            .unwrap();
        std::thread::sleep(full * k / 6);
        // SAFETY: signalling the process group we just created.
        unsafe { libc::kill(-(child.id() as i32), libc::SIGKILL) };
        child.wait().unwrap();
        std::thread::sleep(Duration::from_millis(20));

        driver::recover(&root).unwrap();
        let done = read_metadata(&read_dir(&root)).unwrap().step;
        if done < steps {
            let mut cfg = RunConfig::new(&root, tmp.path().join("ckpt"));
            cfg.steps = steps - done;
            cfg.ramdisk = RamdiskConfig::default();
            driver::run(&cfg).unwrap();
        }
        assert_eq!(checksum_state(&read_dir(&root)).unwrap(), expected, "kill point {k}/6");
    }
}
