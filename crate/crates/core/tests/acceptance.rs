//! Acceptance suite. Runs every criterion in sequence (the benchmark ones
//! must not share the machine with other work) and prints one line each.
//!
//! `cargo test --test acceptance` runs all of them; pass criterion numbers
//! as arguments (`cargo test --test acceptance -- 3 7`) to run a subset.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::panic;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use shmstate::arena::{ArenaAllocator, ReleasePolicy};
use shmstate::bench::{self, coefficient_of_variation, median_of, median_rate, BenchConfig, BenchPolicy, GIB, MIB};
use shmstate::checkpoint::{self, digest_file, CheckpointManifest, COMPLETE_MARKER, MANIFEST_FILE};
use shmstate::driver::{self, read_dir, write_dir, DriverError, RetirePoint, RunConfig};
use shmstate::sim_kernel::{self, checksum_state, init_state, InitSpec, SimParams, StateDigest};
use shmstate::slab_buffer::{RamdiskConfig, SlabBuffer};

const EXE: &str = env!("CARGO_BIN_EXE_shmstate");

enum Verdict {
    Pass(String),
    Skip(String),
}

type Outcome = Result<Verdict, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn buffer() -> SlabBuffer {
    SlabBuffer::new(ArenaAllocator::new(), RamdiskConfig::default())
}

fn fresh_state(root: &Path, spec: &InitSpec) {
    driver::create_layout(root).unwrap();
    init_state(&buffer(), &read_dir(root), spec).unwrap();
}

fn run_cfg(root: &Path, dest: &Path, steps: u64, params: &SimParams) -> RunConfig {
    let mut cfg = RunConfig::new(root, dest);
    cfg.steps = steps;
    cfg.params = *params;
    cfg.ramdisk = RamdiskConfig::default();
    cfg.step_exe = Some(PathBuf::from(EXE));
    cfg
}

fn digest(dir: &Path) -> StateDigest {
    checksum_state(dir).unwrap()
}

// 1. A restored checkpoint continues exactly like the uninterrupted run.
fn checkpoint_is_state() -> Outcome {
    let t = Instant::now();
    let spec = InitSpec::new(10_000, 8, 16, 2024);
    let params = SimParams {
        analysis_every: 3,
        ..SimParams::default()
    };
    let tmp = common::shm_or_tmp();
    let straight = tmp.path().join("straight");
    fresh_state(&straight, &spec);
    driver::run(&run_cfg(&straight, &tmp.path().join("unused"), 10, &params)).map_err(|e| e.to_string())?;
    let expected = digest(&read_dir(&straight));

    for k in 1..=9u64 {
        let root = tmp.path().join(format!("split{k}"));
        let dest = tmp.path().join(format!("ckpt{k}"));
        fresh_state(&root, &spec);
        driver::run(&run_cfg(&root, &dest, k, &params)).map_err(|e| e.to_string())?;
        let out = driver::checkpoint_now(&run_cfg(&root, &dest, 1, &params)).map_err(|e| e.to_string())?;
        ensure!(out.manifest.complete, "checkpoint at {k} partial: {:?}", out.failure);
        fs::remove_dir_all(&root).unwrap();
        driver::restore(&out.dir, &root).map_err(|e| e.to_string())?;
        let mut cfg = run_cfg(&root, &dest, 10 - k, &params);
        // Odd split points resume through child step processes.
        cfg.in_process = k % 2 == 0;
        driver::run(&cfg).map_err(|e| e.to_string())?;
        let got = digest(&read_dir(&root));
        ensure!(got == expected, "checkpoint at step {k}: {got} != {expected}");
        fs::remove_dir_all(&root).unwrap();
        fs::remove_dir_all(&dest).unwrap();
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(Verdict::Pass(format!("digest {expected} at all 9 split points, {secs:.1} s")))
}

fn child_step(read: &Path, write: &Path) -> Command {
    let mut c = Command::new(EXE);
    c.arg("step").arg("--read").arg(read).arg("--write").arg(write);
    c
}

// 2. Stepping is a pure function of the read state, even after a kill.
fn idempotence() -> Outcome {
    let tmp = common::shm_or_tmp();
    let root = tmp.path().join("s");
    fresh_state(&root, &InitSpec::new(10_000, 8, 16, 5));
    let r = read_dir(&root);
    let params = SimParams::default();
    let (w1, w2) = (tmp.path().join("w1"), tmp.path().join("w2"));
    for w in [&w1, &w2] {
        fs::create_dir(w).unwrap();
        sim_kernel::step(&buffer(), &r, w, &params).map_err(|e| e.to_string())?;
    }
    ensure!(digest(&w1) == digest(&w2), "two steps from one read state differ");
    sim_kernel::step(&buffer(), &r, &w1, &params).map_err(|e| e.to_string())?;
    ensure!(digest(&w1) == digest(&w2), "re-step into a used write dir differs");

    let big = tmp.path().join("big");
    fresh_state(&big, &InitSpec::new(40_000, 8, 16, 6));
    let br = read_dir(&big);
    let reference = tmp.path().join("ref");
    let t = Instant::now();
    let st = child_step(&br, &reference).status().unwrap();
    let full = t.elapsed();
    ensure!(st.success(), "uninterrupted child step failed");
    let expected = digest(&reference);

    let mut rng = SplitMix64::seed_from_u64(0x5eed);
    let mut mid_run = 0;
    let kills = 8;
    for _ in 0..kills {
        let w = tmp.path().join("killed");
        let frac = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let mut child = child_step(&br, &w).spawn().unwrap();
        std::thread::sleep(full.mul_f64(frac));
        if child.try_wait().unwrap().is_none() {
            mid_run += 1;
        }
        child.kill().unwrap();
        child.wait().unwrap();
        let st = child_step(&br, &w).status().unwrap();
        ensure!(st.success(), "rerun after kill at {frac:.3} failed");
        ensure!(digest(&w) == expected, "rerun after kill at {frac:.3} differs");
    }
    ensure!(mid_run > 0, "no kill landed while the step was running");
    Ok(Verdict::Pass(format!(
        "repeat steps equal; {mid_run}/{kills} kills landed mid-step, all reruns equal"
    )))
}

fn oracle_run(spec: InitSpec, params: &SimParams, steps: usize) -> Result<(), String> {
    let tmp = common::shm_or_tmp();
    let root = tmp.path().join("s");
    fresh_state(&root, &spec);
    let buf = buffer();
    let mut reference = common::load(&read_dir(&root));
    for k in 0..steps {
        sim_kernel::step(&buf, &read_dir(&root), &write_dir(&root), params).map_err(|e| e.to_string())?;
        driver::retire_state(&root).map_err(|e| e.to_string())?;
        reference = common::reference_step(&reference, params);
        let rdir = tmp.path().join("ref");
        fs::create_dir(&rdir).unwrap();
        common::store(&rdir, &reference);
        let (a, b) = (digest(&read_dir(&root)), digest(&rdir));
        ensure!(a == b, "seed {} step {k}: {a} != reference {b}", spec.seed);
        fs::remove_dir_all(&rdir).unwrap();
    }
    Ok(())
}

// 3. Slab pipeline agrees bit for bit with the flat brute-force reference.
fn oracle_equivalence() -> Outcome {
    let params = SimParams {
        analysis_every: 2,
        ..SimParams::default()
    };
    for seed in 1..=10 {
        oracle_run(InitSpec::new(1_000, 8, 16, seed), &params, 5)?;
    }
    Ok(Verdict::Pass("10 seeds x 5 steps equal".into()))
}

// 4. Particle count and exact momentum are invariant.
fn conservation() -> Outcome {
    let tmp = common::shm_or_tmp();
    let root = tmp.path().join("s");
    fresh_state(&root, &InitSpec::new(2_000, 4, 8, 99));
    let params = SimParams::default();
    let buf = buffer();
    let start = common::load(&read_dir(&root));
    let (n0, p0) = (start.particles.len(), common::exact_momentum(&start));
    let mut moved = 0.0;
    for k in 0..100 {
        let before = common::load(&read_dir(&root));
        sim_kernel::step(&buf, &read_dir(&root), &write_dir(&root), &params).map_err(|e| e.to_string())?;
        driver::retire_state(&root).map_err(|e| e.to_string())?;
        let after = common::load(&read_dir(&root));
        ensure!(after.particles.len() == n0, "step {k}: count {}", after.particles.len());
        ensure!(after.meta.n_particles as usize == n0, "step {k}: meta count");
        let p = common::exact_momentum(&after);
        ensure!(p == common::exact_momentum(&before) && p == p0, "step {k}: momentum {p} != {p0}");
        let sum_v = |s: &common::RefState| s.particles.iter().map(|q| q.v.abs()).sum::<f64>();
        moved += (sum_v(&after) - sum_v(&before)).abs();
    }
    ensure!(moved > 0.0, "forces never changed a velocity");
    Ok(Verdict::Pass(format!("n = {n0}, momentum {p0} x 2^-32 exact over 100 steps")))
}

// 5. Qualitative shape of unmap cost vs. size and policy.
fn unmap_sweep() -> Outcome {
    let dir = common::shm_or_tmp();
    if !bench::is_tmpfs(dir.path()) {
        return Ok(Verdict::Skip(format!("{} is not tmpfs", dir.path().display())));
    }
    let t = Instant::now();
    let sizes: Vec<u64> = (0..6).map(|k| (64 * MIB) << k).collect();
    let unlinked = BenchPolicy::Release(ReleasePolicy::UnlinkThenUnmap);
    let linked = BenchPolicy::Release(ReleasePolicy::UnmapThenUnlink);
    let private = BenchPolicy::Release(ReleasePolicy::PrivateFree);
    let cfg = BenchConfig::new(dir.path(), sizes.clone(), vec![unlinked, linked, private], 5);
    let report = bench::run_bench(&cfg).map_err(|e| e.to_string())?;
    ensure!(report.pinned, "could not pin: {:?}", report.notes);
    let csv = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_bench.csv");
    bench::emit_csv(&report.rows, &csv).map_err(|e| e.to_string())?;
    for &s in &sizes {
        for p in [unlinked, linked, private] {
            let n = report.rows.iter().filter(|r| r.size_bytes == s && r.policy == p).count();
            ensure!(n == 5, "size {s} {p}: {n} rows ({:?})", report.notes);
        }
    }
    let rate = |s, p| median_rate(&report.rows, s, p).unwrap_or(0.0);

    let big: Vec<f64> = sizes.iter().filter(|&&s| s >= 512 * MIB).map(|&s| rate(s, unlinked)).collect();
    let cv = coefficient_of_variation(&big).unwrap();
    ensure!(cv < 0.5, "(a) unlinked rate CV {cv:.3} over {big:?}");
    for s in [GIB, 2 * GIB] {
        ensure!(
            rate(s, linked) > rate(s, unlinked),
            "(b) at {s}: linked {:.3e} <= unlinked {:.3e}",
            rate(s, linked),
            rate(s, unlinked)
        );
    }
    ensure!(
        rate(GIB, private) > rate(GIB, unlinked),
        "(c) private {:.3e} <= unlinked {:.3e}",
        rate(GIB, private),
        rate(GIB, unlinked)
    );
    let total = |p| median_of(&report.rows, GIB, p, |r| r.total_release_s()).unwrap();
    let ratio = total(unlinked) / total(linked);
    ensure!((0.5..=2.0).contains(&ratio), "(d) unlink-first/unmap-first total ratio {ratio:.3}");
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < 300.0, "took {secs:.0} s");
    Ok(Verdict::Pass(format!(
        "unlinked {:.1} GB/s (cv {cv:.2}), linked {:.1} GB/s, private {:.1} GB/s at 1 GiB, order ratio {ratio:.2}, {secs:.0} s; rows in {}",
        rate(GIB, unlinked) / 1e9,
        rate(GIB, linked) / 1e9,
        rate(GIB, private) / 1e9,
        csv.display()
    )))
}

// 6. Deferring is cheap and the cost moves to the drain.
fn deferred_release() -> Outcome {
    let dir = common::shm_or_tmp();
    let r = bench::bench_deferred(dir.path(), 8 * 256 * MIB, 8).map_err(|e| e.to_string())?;
    ensure!(r.per_release_seconds.len() == 8, "{} releases", r.per_release_seconds.len());
    let worst = r.per_release_seconds.iter().copied().fold(0.0, f64::max);
    ensure!(worst < 1e-3, "slowest deferred release {worst:.2e} s");
    let ratio = r.drain_seconds / r.eager_seconds;
    ensure!((0.5..=2.0).contains(&ratio), "drain {:.3} s vs eager {:.3} s", r.drain_seconds, r.eager_seconds);
    Ok(Verdict::Pass(format!(
        "max release {:.1} us, drain {:.3} s, eager {:.3} s",
        worst * 1e6,
        r.drain_seconds,
        r.eager_seconds
    )))
}

#[derive(Debug, Clone)]
enum CkOp {
    Copy,
    Partial,
    Retain(usize),
    Step,
}

fn ck_op() -> impl Strategy<Value = CkOp> {
    prop_oneof![
        4 => Just(CkOp::Copy),
        2 => Just(CkOp::Partial),
        3 => (1usize..=3).prop_map(CkOp::Retain),
        1 => Just(CkOp::Step),
    ]
}

fn retention_case(ops: &[CkOp], flip: (usize, u64)) -> Result<bool, TestCaseError> {
    let tmp = common::shm_or_tmp();
    let root = tmp.path().join("s");
    let dest = tmp.path().join("ckpt");
    fresh_state(&root, &InitSpec::new(64, 2, 2, 3));
    let buf = buffer();
    let mut source_digest: HashMap<PathBuf, StateDigest> = HashMap::new();
    for op in ops {
        match op {
            CkOp::Copy | CkOp::Partial => {
                let deadline = if matches!(op, CkOp::Copy) { Duration::from_secs(60) } else { Duration::ZERO };
                let out = checkpoint::copy_state(&read_dir(&root), &dest, deadline, 2).unwrap();
                prop_assert_eq!(out.manifest.complete, matches!(op, CkOp::Copy));
                source_digest.insert(out.dir, digest(&read_dir(&root)));
            }
            CkOp::Retain(k) => {
                let before = checkpoint::newest_complete(&dest).unwrap();
                checkpoint::apply_retention(&dest, *k).unwrap();
                let after = checkpoint::newest_complete(&dest).unwrap();
                prop_assert_eq!(&before, &after);
                let all = checkpoint::list_checkpoints(&dest).unwrap();
                if let Some(newest) = &before {
                    prop_assert!(newest.dir.join(COMPLETE_MARKER).is_file());
                    prop_assert!(all.iter().filter(|c| c.complete).count() <= *k);
                    prop_assert!(all.iter().all(|c| c.complete || c.stamp > newest.stamp));
                }
            }
            CkOp::Step => {
                sim_kernel::step(&buf, &read_dir(&root), &write_dir(&root), &SimParams::default()).unwrap();
                driver::retire_state(&root).unwrap();
            }
        }
    }
    let Some(newest) = checkpoint::newest_complete(&dest).unwrap() else {
        return Ok(false);
    };
    let restored = tmp.path().join("restored");
    driver::restore(&newest.dir, &restored).unwrap();
    prop_assert_eq!(digest(&read_dir(&restored)), source_digest[&newest.dir]);
    prop_assert!(checkpoint::verify(&newest.dir).ok);

    // Flip one bit in a copy of the checkpoint.
    let scratch = tmp.path().join("flipped");
    fs::create_dir(&scratch).unwrap();
    let mut files: Vec<PathBuf> = fs::read_dir(&newest.dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    for f in &files {
        fs::copy(f, scratch.join(f.file_name().unwrap())).unwrap();
    }
    let targets: Vec<&PathBuf> = files
        .iter()
        .filter(|f| fs::metadata(f).unwrap().len() > 0)
        .collect();
    let victim = scratch.join(targets[flip.0 % targets.len()].file_name().unwrap());
    let mut bytes = fs::read(&victim).unwrap();
    let bit = flip.1 % (bytes.len() as u64 * 8);
    bytes[(bit / 8) as usize] ^= 1 << (bit % 8);
    fs::write(&victim, bytes).unwrap();
    prop_assert!(!checkpoint::verify(&scratch).ok, "flip in {} undetected", victim.display());
    let rejected = matches!(
        driver::restore(&scratch, &tmp.path().join("r2")),
        Err(DriverError::CorruptCheckpoint { .. })
    );
    prop_assert!(rejected, "restore accepted a flipped checkpoint");
    Ok(true)
}

// 7. Retention never removes the newest complete checkpoint; restores and
// corruption detection hold on whatever survives.
fn retention_safety() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let restored = std::cell::Cell::new(0u32);
    let strategy = (prop::collection::vec(ck_op(), 1..10), (any::<usize>(), any::<u64>()));
    runner
        .run(&strategy, |(ops, flip)| {
            if retention_case(&ops, flip)? {
                restored.set(restored.get() + 1);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(Verdict::Pass(format!(
        "1000 sequences; {} restored and bit-flip checked",
        restored.get()
    )))
}

// 8. A crash anywhere in retire leaves a recoverable state.
fn retire_crash_safety() -> Outcome {
    let spec = InitSpec::new(2_000, 4, 8, 17);
    let params = SimParams::default();
    let tmp = common::shm_or_tmp();
    let straight = tmp.path().join("straight");
    fresh_state(&straight, &spec);
    driver::run(&run_cfg(&straight, &tmp.path().join("c"), 6, &params)).map_err(|e| e.to_string())?;
    let expected = digest(&read_dir(&straight));
    let buf = buffer();

    for point in RetirePoint::ALL {
        let root = tmp.path().join(format!("{point:?}"));
        fresh_state(&root, &spec);
        driver::run(&run_cfg(&root, &tmp.path().join("c"), 2, &params)).map_err(|e| e.to_string())?;
        sim_kernel::step(&buf, &read_dir(&root), &write_dir(&root), &params).map_err(|e| e.to_string())?;
        let stepped = digest(&write_dir(&root));
        match driver::retire_state_until(&root, Some(point)) {
            Err(DriverError::InjectedCrash(p)) if p == point => {}
            other => return Err(format!("{point:?}: retire returned {other:?}")),
        }
        driver::recover(&root).map_err(|e| format!("{point:?}: {e}"))?;
        driver::recover(&root).map_err(|e| format!("{point:?}: second recover: {e}"))?;
        ensure!(digest(&read_dir(&root)) == stepped, "{point:?}: recovered state is not the stepped state");
        ensure!(write_dir(&root).is_dir(), "{point:?}: write dir missing");
        driver::run(&run_cfg(&root, &tmp.path().join("c"), 3, &params)).map_err(|e| e.to_string())?;
        ensure!(digest(&read_dir(&root)) == expected, "{point:?}: resumed digest differs");
    }
    Ok(Verdict::Pass(format!("{} crash points recovered to {expected}", RetirePoint::ALL.len())))
}

// 9. Reported throughput is bytes over measured seconds; digests match.
fn copy_throughput() -> Outcome {
    let tmp = common::shm_or_tmp();
    let root = tmp.path().join("s");
    fresh_state(&root, &InitSpec::new(10_000, 8, 16, 8));
    let src = read_dir(&root);
    let disk = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    for dest in [tmp.path().join("ckpt"), disk.path().to_path_buf()] {
        let out = checkpoint::copy_state(&src, &dest, Duration::from_secs(120), checkpoint::default_workers())
            .map_err(|e| e.to_string())?;
        ensure!(out.manifest.complete, "partial: {:?}", out.failure);
        let m = CheckpointManifest::read(&out.dir).map_err(|e| e.to_string())?;
        ensure!(m.copy_seconds > 0.0, "no copy time recorded");
        ensure!(
            m.throughput() == m.total_bytes as f64 / m.copy_seconds,
            "throughput {} != {} / {}",
            m.throughput(),
            m.total_bytes,
            m.copy_seconds
        );
        ensure!(m.throughput() == out.manifest.throughput(), "manifest on disk disagrees");

        let mut src_files: BTreeMap<String, (u64, u64)> = BTreeMap::new();
        for e in fs::read_dir(&src).unwrap() {
            let p = e.unwrap().path();
            src_files.insert(p.file_name().unwrap().to_string_lossy().into_owned(), digest_file(&p).unwrap());
        }
        let listed: BTreeMap<String, (u64, u64)> =
            m.files.iter().map(|f| (f.rel_path.clone(), (f.size, f.digest))).collect();
        ensure!(listed == src_files, "manifest files differ from source");
        for (name, want) in &src_files {
            ensure!(name != MANIFEST_FILE && name != COMPLETE_MARKER, "source holds {name}");
            let got = digest_file(&out.dir.join(name)).unwrap();
            ensure!(got == *want, "{name}: copy digest differs");
        }
        ensure!(m.total_bytes == src_files.values().map(|v| v.0).sum::<u64>(), "total_bytes");
        lines.push(format!("{:.3e} B/s to {}", m.throughput(), dest.display()));
    }
    Ok(Verdict::Pass(lines.join(", ")))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "checkpoint equals state", checkpoint_is_state),
        (2, "idempotent step", idempotence),
        (3, "oracle equivalence", oracle_equivalence),
        (4, "conservation", conservation),
        (5, "unmap cost sweep", unmap_sweep),
        (6, "deferred release", deferred_release),
        (7, "retention safety", retention_safety),
        (8, "retire crash safety", retire_crash_safety),
        (9, "copy throughput and digests", copy_throughput),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let result = panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(Verdict::Pass(d)) => println!("criterion {n} ({name}): PASS [{secs:.1} s] {d}"),
            Ok(Verdict::Skip(d)) => println!("criterion {n} ({name}): SKIP [{secs:.1} s] {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1} s] {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
