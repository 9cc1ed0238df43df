//! Measured properties of the benchmark harness. Timing is noisy, so each
//! property gets a few attempts; any single clean measurement passes.

use sdrop::bench::{
    bench_prepared, bench_suite, to_csv, write_csv, BenchConfig, Phase, Prepared, Workload,
    CSV_HEADER,
};
use sdrop::DropoutMode;

const ATTEMPTS: usize = 3;

fn workload(hidden: usize, rate: f64, mode: DropoutMode) -> Workload {
    Workload {
        hidden,
        batch: 20,
        steps: 8,
        vocab: 0,
        rate,
        mode,
    }
}

#[test]
fn no_dropout_means_no_speedup() {
    let p = Prepared::<f32>::new(workload(256, 0.0, DropoutMode::NrRhSt), 1).unwrap();
    for phase in Phase::TIMED {
        let mut seen = Vec::new();
        let ok = (0..ATTEMPTS).any(|_| {
            let r = bench_prepared(&p, phase, 7, 2).unwrap();
            assert_eq!(r.flops_dense, r.flops_sparse);
            seen.push(r.speedup);
            (0.9..=1.1).contains(&r.speedup)
        });
        assert!(ok, "{phase}: speedups {seen:?}");
    }
}

#[test]
fn forward_time_falls_with_rate() {
    let time = |rate| {
        let p = Prepared::<f32>::new(workload(512, rate, DropoutMode::NrRhSt), 2).unwrap();
        bench_prepared(&p, Phase::Forward, 5, 1)
            .unwrap()
            .wall_ns_sparse
    };
    let ok = (0..ATTEMPTS).any(|_| {
        let (a, b, c) = (time(0.65), time(0.5), time(0.25));
        a <= b && b <= c
    });
    assert!(ok);
}

#[test]
fn empty_grid_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let c: BenchConfig = serde_json::from_value(serde_json::json!({
        "hidden": [], "batch": [20], "steps": [5], "rates": [0.5],
        "out": dir.path().join("bench.csv"),
    }))
    .unwrap();
    let records = bench_suite::<f32>(&c, |_| {}).unwrap();
    assert!(records.is_empty());
    write_csv(&records, &c.out).unwrap();
    assert_eq!(
        std::fs::read_to_string(&c.out).unwrap(),
        format!("{CSV_HEADER}\n")
    );
}

#[test]
fn suite_emits_overall_per_combination() {
    let c: BenchConfig = serde_json::from_value(serde_json::json!({
        "hidden": [32], "batch": [4], "steps": [3], "vocab": [0, 10],
        "rates": [0.25, 0.5], "modes": ["nr-st", "nr-rh-st"], "repetitions": 3,
    }))
    .unwrap();
    let mut streamed = 0;
    let records = bench_suite::<f64>(&c, |_| streamed += 1).unwrap();
    assert_eq!(records.len(), 2 * 2 * 2 * 4);
    assert_eq!(streamed, records.len());
    for chunk in records.chunks(4) {
        assert_eq!(chunk[3].phase, Phase::Overall);
        let sum: u64 = chunk[..3].iter().map(|r| r.wall_ns_sparse).sum();
        assert_eq!(chunk[3].wall_ns_sparse, sum);
        assert!(chunk.iter().all(|r| r.speedup > 0.0));
    }
    assert_eq!(to_csv(&records).lines().count(), records.len() + 1);
}

#[test]
fn elementwise_work_keeps_paths_equal() {
    for mode in DropoutMode::ALL {
        let p = Prepared::<f64>::new(
            Workload {
                vocab: 7,
                ..workload(16, 0.5, mode)
            },
            4,
        )
        .unwrap()
        .with_elementwise(true);
        for phase in Phase::TIMED {
            p.verify(phase).unwrap();
            bench_prepared(&p, phase, 3, 1).unwrap();
        }
    }
}
