use std::ffi::{CStr, CString};
use std::ptr;

use eagle_ffi::*;

fn last_error() -> String {
    let p = eagle_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn grid_points(n_images: usize, per_image: usize, dim: usize) -> Vec<f32> {
    (0..n_images * per_image * dim)
        .map(|i| ((i * 7919) % 101) as f32 / 10.0)
        .collect()
}

#[test]
fn bank_build_score_and_free() {
    let (imgs, per, dim) = (5, 20, 3);
    let data = grid_points(imgs, per, dim);
    let mut bank = ptr::null_mut();
    let st = unsafe { eagle_bank_build(data.as_ptr(), imgs * per, dim, per, 0.1, 0, 0, &mut bank) };
    assert_eq!(st, EagleStatus::Ok);
    let (mut len, mut d) = (0, 0);
    unsafe {
        assert_eq!(eagle_bank_len(bank, &mut len), EagleStatus::Ok);
        assert_eq!(eagle_bank_dim(bank, &mut d), EagleStatus::Ok);
    }
    assert_eq!((len, d), (10, dim));

    let mut unsampled_total = 0;
    for img in 0..imgs {
        let mut c = 0;
        assert_eq!(unsafe { eagle_bank_unsampled_count(bank, img, &mut c) }, EagleStatus::Ok);
        unsampled_total += c;
    }
    assert_eq!(unsampled_total + len, imgs * per);

    // every training row is either in the bank (distance 0) or farther
    let mut dist = vec![f64::NAN; imgs * per];
    let mut idx = vec![usize::MAX; imgs * per];
    let st = unsafe {
        eagle_bank_score(bank, data.as_ptr(), imgs * per, dim, dist.as_mut_ptr(), idx.as_mut_ptr())
    };
    assert_eq!(st, EagleStatus::Ok);
    assert!(dist.iter().filter(|&&v| v == 0.0).count() >= len);
    assert!(idx.iter().all(|&i| i < len));
    unsafe { eagle_bank_free(bank) };
}

#[test]
fn score_matches_brute_force() {
    let rows: Vec<f32> = vec![0.0, 0.0, 3.0, 4.0, -1.0, 1.0];
    let mut bank = ptr::null_mut();
    assert_eq!(unsafe { eagle_bank_from_rows(rows.as_ptr(), 3, 2, &mut bank) }, EagleStatus::Ok);
    let q: Vec<f32> = vec![3.0, 0.0, -1.0, 2.0];
    let mut dist = [0.0; 2];
    let st = unsafe { eagle_bank_score(bank, q.as_ptr(), 2, 2, dist.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, EagleStatus::Ok);
    assert!((dist[0] - 3.0).abs() < 1e-12);
    assert!((dist[1] - 1.0).abs() < 1e-12);

    let st = unsafe { eagle_bank_score(bank, q.as_ptr(), 1, 4, dist.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, EagleStatus::Dimension);
    assert!(last_error().contains("dimension"));

    let mut c = 0;
    let st = unsafe { eagle_bank_unsampled_count(bank, 0, &mut c) };
    assert_eq!(st, EagleStatus::InvalidArgument);
    unsafe { eagle_bank_free(bank) };
}

#[test]
fn null_pointers_are_reported() {
    let mut bank = ptr::null_mut();
    let st = unsafe { eagle_bank_build(ptr::null(), 4, 2, 2, 0.5, 0, 0, &mut bank) };
    assert_eq!(st, EagleStatus::NullPointer);
    assert!(bank.is_null());
    let mut n = 0;
    assert_eq!(unsafe { eagle_bank_len(ptr::null(), &mut n) }, EagleStatus::NullPointer);
    unsafe { eagle_bank_free(ptr::null_mut()) };
}

#[test]
fn bad_fraction_is_invalid_argument() {
    let data = [1.0f32, 2.0, 3.0, 4.0];
    let mut bank = ptr::null_mut();
    let st = unsafe { eagle_bank_build(data.as_ptr(), 4, 1, 2, 1.5, 0, 0, &mut bank) };
    assert_eq!(st, EagleStatus::InvalidArgument);
    assert!(last_error().contains("fraction"));
}

#[test]
fn missing_bank_file_is_io_error() {
    let path = CString::new("/nonexistent/bank.eaglfeat").unwrap();
    let mut bank = ptr::null_mut();
    assert_eq!(unsafe { eagle_bank_load(path.as_ptr(), &mut bank) }, EagleStatus::Io);
}

#[test]
fn threshold_fit_and_classify() {
    let scores = [1.0, 2.0, 3.0, 4.0];
    let mut t = EagleThreshold { mu: 0.0, sigma: 0.0, kappa: 0.0, tau: 0.0, s_max: 0.0, n: 0 };
    assert_eq!(unsafe { eagle_threshold_fit(scores.as_ptr(), 4, 3.0, &mut t) }, EagleStatus::Ok);
    let sigma = 1.25f64.sqrt();
    assert_eq!(t.mu, 2.5);
    assert!((t.sigma - sigma).abs() < 1e-15);
    assert!((t.tau - (2.5 + 3.0 * sigma)).abs() < 1e-15);
    assert_eq!((t.s_max, t.n), (4.0, 4));

    let (mut abn, mut low) = (-1, -1);
    unsafe { eagle_classify(&t, t.tau, &mut abn, &mut low) };
    assert_eq!((abn, low), (1, 0));
    unsafe { eagle_classify(&t, 0.0, &mut abn, &mut low) };
    assert_eq!((abn, low), (0, 0));

    let t2 = EagleThreshold { tau: 1.0, s_max: 2.0, ..t };
    unsafe { eagle_classify(&t2, 1.5, &mut abn, &mut low) };
    assert_eq!((abn, low), (1, 1));

    let st = unsafe { eagle_threshold_fit(scores.as_ptr(), 1, 3.0, &mut t) };
    assert_eq!(st, EagleStatus::InsufficientData);
}

#[test]
fn parse_answer_variants() {
    let cases = [("A", EagleAnswer::Yes), ("b. No.", EagleAnswer::No), ("maybe", EagleAnswer::Unparseable)];
    for (text, want) in cases {
        let c = CString::new(text).unwrap();
        let mut out = EagleAnswer::Unparseable;
        assert_eq!(unsafe { eagle_parse_answer(c.as_ptr(), &mut out) }, EagleStatus::Ok);
        assert_eq!(out, want, "{text}");
    }
}

#[test]
fn caas_row_scaling() {
    let mut row = [0.1, 0.3, 0.2, 0.4];
    let mask = [1u8, 1, 0, 0];
    assert_eq!(unsafe { eagle_caas_scale_row(row.as_mut_ptr(), mask.as_ptr(), 4, 1.6, false) }, EagleStatus::Ok);
    let sum: f64 = row.iter().sum();
    assert!((sum - (1.0 + 0.6 * 0.4)).abs() < 1e-12);
    assert_eq!(unsafe { eagle_caas_scale_row(row.as_mut_ptr(), mask.as_ptr(), 4, 1.6, true) }, EagleStatus::Ok);
    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn static_strings() {
    let v = unsafe { CStr::from_ptr(eagle_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    let s = unsafe { CStr::from_ptr(eagle_system_instruction()) }.to_str().unwrap();
    assert_eq!(s, eagle_core::prompting::SYSTEM_INSTRUCTION);
}

#[test]
fn header_declares_exports() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/eagle.h")).unwrap();
    for sym in [
        "eagle_bank_build",
        "eagle_bank_score",
        "eagle_bank_free",
        "eagle_threshold_fit",
        "eagle_classify",
        "eagle_parse_answer",
        "eagle_caas_scale_row",
        "eagle_last_error",
        "typedef struct EagleBank EagleBank",
    ] {
        assert!(header.contains(sym), "{sym} missing from header");
    }
}
