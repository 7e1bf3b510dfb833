//! Kept in its own binary: the busy thread needs a core to itself, and
//! other tests running in parallel would steal it on small machines.

use std::sync::atomic::{AtomicBool, AtomicI32, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use pipewise::monitor::Probe;
use pipewise_core::topology::{WorkerDescriptor, WorkerKind, WorkerState};

fn spawn_task(busy: bool, stop: Arc<AtomicBool>) -> (thread::JoinHandle<()>, i32) {
    let tid = Arc::new(AtomicI32::new(0));
    let t = tid.clone();
    let h = thread::spawn(move || {
        t.store(thread_id(), Ordering::Release);
        let mut x = 0u64;
        while !stop.load(Ordering::Relaxed) {
            if busy {
                for i in 0..10_000u64 {
                    x = x.wrapping_mul(6364136223846793005).wrapping_add(i);
                }
                std::hint::black_box(x);
            } else {
                thread::sleep(Duration::from_millis(20));
            }
        }
    });
    while tid.load(Ordering::Acquire) == 0 {
        thread::yield_now();
    }
    (h, tid.load(Ordering::Acquire))
}

fn thread_id() -> i32 {
    // /proc/thread-self resolves to /proc/<pid>/task/<tid>.
    let link = std::fs::read_link("/proc/thread-self").unwrap();
    link.file_name().unwrap().to_str().unwrap().parse().unwrap()
}

fn desc(id: &str) -> WorkerDescriptor {
    WorkerDescriptor {
        worker_id: id.into(),
        stage_name: "clean".into(),
        machine_id: "m1".into(),
        state: WorkerState::Running,
        kind: WorkerKind::InProcess,
    }
}

#[test]
fn busy_and_idle_threads_are_told_apart() {
    let stop = Arc::new(AtomicBool::new(false));
    let (busy, busy_tid) = spawn_task(true, stop.clone());
    let (idle, idle_tid) = spawn_task(false, stop.clone());
    let pid = std::process::id();
    let targets = vec![(desc("busy"), pid, Some(busy_tid)), (desc("idle"), pid, Some(idle_tid))];

    let mut probe = Probe::new("m1");
    probe.sample(&targets, 0);
    let t0 = Instant::now();
    thread::sleep(Duration::from_millis(1500));
    let (reports, errors) = probe.sample(&targets, 1);
    stop.store(true, Ordering::Relaxed);
    busy.join().unwrap();
    idle.join().unwrap();

    assert!(errors.is_empty(), "{errors:?}");
    assert_eq!(reports.len(), 3);
    let by = |id: &str| reports.iter().find(|r| r.worker_id.as_deref() == Some(id)).unwrap();
    let (b, i) = (by("busy"), by("idle"));
    println!("busy {:.3} idle {:.3} machine {:.3}", b.cpu_fraction, i.cpu_fraction, reports[0].cpu_fraction);
    assert!(b.cpu_fraction >= 0.8, "busy thread at {}", b.cpu_fraction);
    assert!(i.cpu_fraction <= 0.1, "idle thread at {}", i.cpu_fraction);
    assert!((b.window_s - t0.elapsed().as_secs_f64()).abs() < 0.2);
    assert!(b.rss_bytes > 0);

    let machine = &reports[0];
    assert!(machine.worker_id.is_none());
    assert!(machine.cpu_fraction > 0.0 && machine.cpu_fraction <= 1.0);
}

#[test]
fn vanished_task_is_an_error() {
    let mut probe = Probe::new("m1");
    let (reports, errors) = probe.sample(&[(desc("ghost"), u32::MAX - 1, None)], 0);
    assert_eq!(reports.len(), 1);
    assert_eq!(errors.len(), 1);
    assert!(errors[0].starts_with("ghost"));
}
