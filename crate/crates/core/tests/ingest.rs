use std::alloc::{GlobalAlloc, Layout, System};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use nalgebra::DVector;
use poissub::estimator::full_data_qle;
use poissub::pipeline::run_two_step;
use poissub::sampling::{Criterion, SamplingPlan};
use poissub::synth::{self, CaseId, CaseSpec};
use poissub::{
    partition_view, CsvOptions, CsvSource, Dataset, LinkFamily, RecordSource, ResponseTransform,
    SolverOptions,
};

struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = LIVE.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

// Tests in this binary share the allocator counters, so the measuring test
// holds this lock and the others take it too.
static SERIAL: Mutex<()> = Mutex::new(());

/// Extra bytes allocated at the peak of `f`, above what was live before it.
fn high_water<T>(f: impl FnOnce() -> T) -> usize {
    let base = LIVE.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    let out = f();
    drop(out);
    PEAK.load(Ordering::SeqCst) - base
}

fn write(case: CaseId, n: u64, seed: u64, dir: &std::path::Path) -> Vec<PathBuf> {
    synth::write_case(&CaseSpec::new(case, n, seed), dir)
        .unwrap()
        .files
}

fn options(block: usize) -> CsvOptions {
    CsvOptions {
        block_size: block,
        ..CsvOptions::default()
    }
}

#[test]
fn memory_does_not_grow_with_row_count() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let small_dir = tempfile::tempdir().unwrap();
    let large_dir = tempfile::tempdir().unwrap();
    let small = write(CaseId::C1, 20_000, 1, small_dir.path());
    let large = write(CaseId::C1, 200_000, 1, large_dir.path());

    let scan = |files: &[PathBuf]| {
        high_water(|| {
            let src = CsvSource::open(files, options(4096)).unwrap();
            let mut rows = 0u64;
            src.scan(&mut |_| {
                rows += 1;
                Ok(())
            })
            .unwrap();
            rows
        })
    };
    let fit = |files: &[PathBuf]| {
        high_water(|| {
            let src = CsvSource::open(files, options(4096)).unwrap();
            let plan = SamplingPlan::new(Criterion::Mv, 500.0, 0.2, 3);
            let two_step = run_two_step(
                &src,
                LinkFamily::Exp,
                &plan,
                200.0,
                &SolverOptions::default(),
            )
            .unwrap();
            let full = full_data_qle(
                &src,
                LinkFamily::Exp,
                &DVector::zeros(7),
                &SolverOptions::default(),
            )
            .unwrap();
            (two_step.fit.beta, full.beta)
        })
    };
    let (scan_small, scan_large) = (scan(&small), scan(&large));
    let (fit_small, fit_large) = (fit(&small), fit(&large));
    // The raw data would be 10x larger; allow a little slack for sample-size noise.
    assert!(
        scan_large <= scan_small + scan_small / 4 + 4096,
        "scan {scan_small} -> {scan_large}"
    );
    assert!(
        fit_large <= fit_small + fit_small / 4 + 4096,
        "fit {fit_small} -> {fit_large}"
    );
    let data_bytes = 200_000 * 8 * 8;
    assert!(
        fit_large < data_bytes / 10,
        "fit peak {fit_large} bytes against {data_bytes} bytes of data"
    );
}

#[test]
fn response_shift_matches_a_pre_shifted_file() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();
    let raw = synth::generate_case(&CaseSpec::new(CaseId::C1, 5000, 2))
        .unwrap()
        .0;
    let shifted_rows = raw.rows().map(|(x, y)| (x.to_vec(), y - 3.0));
    let shifted = Dataset::from_rows(shifted_rows).unwrap();
    let path = dir.path().join("shifted.csv");
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&path)
        .unwrap();
    for (x, y) in shifted.rows() {
        let mut rec = vec![y.to_string()];
        rec.extend(x.iter().map(f64::to_string));
        w.write_record(&rec).unwrap();
    }
    w.flush().unwrap();
    drop(w);

    let mut opts = options(333);
    opts.transform = Some(ResponseTransform::shift(3.0));
    let src = CsvSource::open(&[&path], opts.clone()).unwrap();
    let read = Dataset::collect(&src).unwrap();
    assert_eq!(read, raw);

    opts.schema.intercept = true;
    let with_one = Dataset::collect(&CsvSource::open(&[&path], opts).unwrap()).unwrap();
    assert_eq!(with_one.len(), raw.len());
    for i in [0, 17, 4999] {
        assert_eq!(with_one.row(i).0[0], 1.0);
        assert_eq!(&with_one.row(i).0[1..], raw.row(i).0);
        assert_eq!(with_one.row(i).1, raw.row(i).1);
    }

    let solver = SolverOptions::default();
    let a = full_data_qle(&src, LinkFamily::Exp, &DVector::zeros(7), &solver).unwrap();
    let b = full_data_qle(&raw, LinkFamily::Exp, &DVector::zeros(7), &solver).unwrap();
    assert_eq!(a.beta, b.beta);
    let plan = SamplingPlan::new(Criterion::Mvc, 300.0, 0.2, 9);
    let a = run_two_step(&src, LinkFamily::Exp, &plan, 100.0, &solver).unwrap();
    let b = run_two_step(&raw, LinkFamily::Exp, &plan, 100.0, &solver).unwrap();
    assert_eq!(a.fit.beta, b.fit.beta);
}

#[test]
fn multi_file_layout_is_one_continuous_stream() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();
    let files = write(CaseId::S5, 1003, 4, dir.path());
    assert_eq!(files.len(), 5);
    let src: Arc<dyn RecordSource> = Arc::new(CsvSource::open(&files, options(64)).unwrap());
    let mut seen = Vec::new();
    src.scan(&mut |r| {
        seen.push(r.index);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, (0..1003).collect::<Vec<u64>>());

    let shards = partition_view(src.clone(), 5).unwrap();
    let sizes: Vec<u64> = shards.iter().map(|s| s.len()).collect();
    assert_eq!(sizes, vec![201, 201, 201, 200, 200]);
    let in_memory = synth::generate_case(&CaseSpec::new(CaseId::S5, 1003, 4))
        .unwrap()
        .0;
    assert_eq!(Dataset::collect(src.as_ref()).unwrap(), in_memory);
}

#[test]
fn block_size_does_not_change_the_stream() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();
    let files = write(CaseId::C3, 2500, 5, dir.path());
    let reference = Dataset::collect(&CsvSource::open(&files, options(65_536)).unwrap()).unwrap();
    for block in [1, 7, 1000, 2500, 4096] {
        let read = Dataset::collect(&CsvSource::open(&files, options(block)).unwrap()).unwrap();
        assert_eq!(read, reference, "block {block}");
    }
}
