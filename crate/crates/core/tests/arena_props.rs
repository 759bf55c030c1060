mod common;

use std::path::PathBuf;

use proptest::prelude::*;
use shmstate::arena::{Arena, ArenaAllocator, MapMode, ReleasePolicy};

#[derive(Debug, Clone)]
enum Op {
    Shared(u64),
    Private(u64),
    Release(usize, ReleasePolicy),
    Drain,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (1u64..20_000).prop_map(Op::Shared),
        (1u64..20_000).prop_map(Op::Private),
        (any::<usize>(), prop::sample::select(ReleasePolicy::ALL.to_vec()))
            .prop_map(|(i, p)| Op::Release(i, p)),
        Just(Op::Drain),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // The registry's totals always equal the sum over arenas that are mapped
    // or awaiting a deferred release.
    #[test]
    fn registry_conserves_bytes(ops in prop::collection::vec(op(), 1..40)) {
        let dir = common::shm_or_tmp();
        let alloc = ArenaAllocator::new();
        let mut live: Vec<Arena> = Vec::new();
        let mut deferred: Vec<(u64, PathBuf)> = Vec::new();
        for (k, op) in ops.into_iter().enumerate() {
            match op {
                Op::Shared(n) => {
                    let p = dir.path().join(format!("a{k}"));
                    live.push(alloc.map_shared(&p, n, MapMode::CreateWrite).unwrap());
                }
                Op::Private(n) => live.push(alloc.allocate_private(n).unwrap()),
                Op::Release(i, policy) => {
                    if live.is_empty() {
                        continue;
                    }
                    let a = live.remove(i % live.len());
                    let fits = policy.applies_to(a.backing());
                    let (len, path) = (a.len(), a.path().map(PathBuf::from));
                    let r = alloc.release(a, policy);
                    prop_assert_eq!(r.is_ok(), fits);
                    if fits && policy == ReleasePolicy::DeferUnmap {
                        deferred.push((len, path.clone().unwrap()));
                    }
                    if let Some(p) = path.filter(|_| fits) {
                        let kept = matches!(policy, ReleasePolicy::UnmapKeepFile | ReleasePolicy::DeferUnmap);
                        prop_assert_eq!(p.exists(), kept);
                    }
                }
                Op::Drain => {
                    let t = alloc.drain_deferred();
                    prop_assert_eq!(t.len(), deferred.len());
                    for (_, p) in deferred.drain(..) {
                        prop_assert!(!p.exists());
                    }
                }
            }
            let r = alloc.registry_report();
            let shared: u64 = live.iter().filter(|a| a.backing().is_shared()).map(Arena::len).sum();
            let private: u64 = live.iter().filter(|a| !a.backing().is_shared()).map(Arena::len).sum();
            let deferred_bytes: u64 = deferred.iter().map(|d| d.0).sum();
            prop_assert_eq!(r.live_arenas, live.len() + deferred.len());
            prop_assert_eq!(r.shared_bytes, shared + deferred_bytes);
            prop_assert_eq!(r.private_bytes, private);
            prop_assert_eq!(r.deferred_arenas, deferred.len());
            prop_assert_eq!(r.deferred_bytes, deferred_bytes);
        }
        drop(live);
        alloc.drain_deferred();
        prop_assert_eq!(alloc.registry_report().live_arenas, 0);
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

// Page population drives the unlinked unmap cost.
#[test]
fn untouched_unmap_is_not_slower_than_touched() {
    let dir = common::shm_or_tmp();
    let alloc = ArenaAllocator::new();
    let size = 256 << 20;
    let mut untouched = Vec::new();
    let mut touched = Vec::new();
    for rep in 0..5 {
        let p = dir.path().join(format!("u{rep}"));
        let a = alloc.map_shared(&p, size, MapMode::CreateWrite).unwrap();
        untouched.push(alloc.release(a, ReleasePolicy::UnlinkThenUnmap).unwrap().unmap_seconds());
        let mut a = alloc.map_shared(&p, size, MapMode::CreateWrite).unwrap();
        a.touch_pages().unwrap();
        touched.push(alloc.release(a, ReleasePolicy::UnlinkThenUnmap).unwrap().unmap_seconds());
    }
    let (u, t) = (median(untouched), median(touched));
    assert!(u <= t, "untouched {u} s > touched {t} s");
}

// The name is gone before unmapping starts, observed from another thread
// while the background worker is mid-release.
#[test]
fn background_unlink_precedes_unmap() {
    let dir = common::shm_or_tmp();
    let alloc = ArenaAllocator::new();
    let p = dir.path().join("big");
    let mut a = alloc.map_shared(&p, 512 << 20, MapMode::CreateWrite).unwrap();
    a.touch_pages().unwrap();
    let mut handle = alloc.release_in_background(a, ReleasePolicy::UnlinkThenUnmap);
    let t = handle.wait().unwrap();
    assert!(!p.exists());
    let unlink_end = t.unlink_start.unwrap() + t.unlink;
    assert!(unlink_end <= t.unmap_start.unwrap());
    assert!(handle.wait().is_err(), "second wait must fail");
}
