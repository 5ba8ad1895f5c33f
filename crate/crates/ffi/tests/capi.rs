use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use grace_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(grace_last_error()) }.to_string_lossy().into_owned()
}

fn small_bundle(seed: u64) -> *mut GraceBundle {
    let mut b = ptr::null_mut();
    let st = unsafe { grace_bundle_synth(3, 8, 200, 50, 0, seed, &mut b) };
    assert_eq!(st, GraceStatus::Ok, "{}", last_error());
    assert!(!b.is_null());
    b
}

const CONFIG: &str = "epochs = 3\nhidden = 16\nembed = 4\nbatch_size = 16\n";

#[test]
fn train_save_reopen_evaluate() {
    let bundle = small_bundle(1);
    assert_eq!(unsafe { grace_bundle_features(bundle) }, 8);
    let cfg = CString::new(CONFIG).unwrap();
    let mut run = ptr::null_mut();
    unsafe {
        assert_eq!(grace_run_new(bundle, cfg.as_ptr(), &mut run), GraceStatus::Ok);
        assert_eq!(grace_run_epoch(run), 0);
        assert_eq!(grace_run_train(run, bundle, 2), GraceStatus::Ok, "{}", last_error());
        assert_eq!(grace_run_epoch(run), 2);
        assert_eq!(grace_run_latent_dim(run), 3);
    }
    let mut dag = vec![f64::NAN; 9];
    unsafe {
        assert_eq!(grace_run_dag(run, dag.as_mut_ptr(), 9), GraceStatus::Ok);
        assert_eq!(grace_run_dag(run, dag.as_mut_ptr(), 4), GraceStatus::Usage);
    }
    assert!(dag.iter().all(|v| v.is_finite()));
    assert!((0..3).all(|i| (0..=i).all(|j| dag[i * 3 + j] == 0.0)));

    let dir = tempfile::tempdir().unwrap();
    let run_dir = CString::new(dir.path().join("run").to_str().unwrap()).unwrap();
    let mut back = ptr::null_mut();
    let mut dag2 = vec![0.0; 9];
    unsafe {
        assert_eq!(grace_run_save(run, run_dir.as_ptr()), GraceStatus::Ok, "{}", last_error());
        assert_eq!(grace_run_open(run_dir.as_ptr(), bundle, &mut back), GraceStatus::Ok, "{}", last_error());
        assert_eq!(grace_run_epoch(back), 2);
        grace_run_dag(back, dag2.as_mut_ptr(), 9);
    }
    assert_eq!(dag, dag2);

    let mut report = ptr::null_mut();
    unsafe {
        assert_eq!(grace_run_train(back, bundle, 3), GraceStatus::Ok);
        assert_eq!(grace_run_evaluate(back, bundle, &mut report), GraceStatus::Ok, "{}", last_error());
        assert_eq!(grace_report_len(report), 3);
    }
    let mut m = GraceMetrics::default();
    unsafe {
        assert_eq!(grace_report_row(report, 0, &mut m), GraceStatus::Ok);
        assert_eq!(grace_report_row(report, 3, &mut m), GraceStatus::Usage);
    }
    assert!(last_error().contains("out of range"));
    assert!(m.n_real > 0 && m.n_gen > 0 && m.rmse.is_finite() && m.mmd >= 0.0);
    let mut o = GraceOracle::default();
    unsafe {
        assert_eq!(grace_report_oracle(report, &mut o), GraceStatus::Ok, "{}", last_error());
    }
    assert!((0.0..=1.0).contains(&o.mean_abs_corr));
    assert!((0.0..=1.0).contains(&o.target_accuracy));
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(grace_report_write(report, out.as_ptr()), GraceStatus::Ok);
    }
    assert!(dir.path().join("metrics.csv").exists());
    assert!(dir.path().join("oracle.json").exists());
    unsafe {
        grace_report_free(report);
        grace_run_free(back);
        grace_run_free(run);
        grace_bundle_free(bundle);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut b = ptr::null_mut();
    let missing = CString::new("/nonexistent/bundle").unwrap();
    unsafe {
        assert_eq!(grace_bundle_open(missing.as_ptr(), &mut b), GraceStatus::Data);
    }
    assert!(b.is_null());
    assert!(last_error().contains("/nonexistent/bundle"));

    unsafe {
        assert_eq!(grace_bundle_open(ptr::null(), &mut b), GraceStatus::NullArgument);
        assert_eq!(grace_bundle_synth(3, 8, 80, 50, 0, 0, ptr::null_mut()), GraceStatus::NullArgument);
    }

    let bundle = small_bundle(2);
    let bad = CString::new("epochs = 3\nwarp = 9\n").unwrap();
    let mut run = ptr::null_mut();
    unsafe {
        assert_eq!(grace_run_new(bundle, bad.as_ptr(), &mut run), GraceStatus::Usage);
    }
    assert!(last_error().contains("warp"), "{}", last_error());
    assert!(run.is_null());

    let mut x = 0.0;
    unsafe {
        assert_eq!(grace_gradcheck(-1.0, 0, &mut x), GraceStatus::Usage);
        // A success clears the message.
        assert_eq!(grace_run_new(bundle, ptr::null(), &mut run), GraceStatus::Ok);
    }
    assert_eq!(last_error(), "");
    unsafe {
        grace_run_free(run);
        grace_bundle_free(bundle);
        grace_bundle_free(ptr::null_mut());
        grace_run_free(ptr::null_mut());
        grace_report_free(ptr::null_mut());
    }
}

#[test]
fn bundle_written_through_the_interface_reloads() {
    let bundle = small_bundle(3);
    let dir = tempfile::tempdir().unwrap();
    let p = CString::new(dir.path().join("b").to_str().unwrap()).unwrap();
    let mut back = ptr::null_mut();
    unsafe {
        assert_eq!(grace_bundle_write(bundle, p.as_ptr()), GraceStatus::Ok, "{}", last_error());
        assert_eq!(grace_bundle_open(p.as_ptr(), &mut back), GraceStatus::Ok, "{}", last_error());
        assert_eq!(grace_bundle_features(back), 8);
        grace_bundle_free(back);
        grace_bundle_free(bundle);
    }
}

#[test]
fn gradients_check_out() {
    let mut worst = f64::NAN;
    assert_eq!(unsafe { grace_gradcheck(1e-4, 0, &mut worst) }, GraceStatus::Ok);
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(grace_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(root.join("include/grace.h")).unwrap();
    let src = std::fs::read_to_string(root.join("src/lib.rs")).unwrap();
    let mut n = 0;
    for line in src.lines() {
        if let Some(rest) = line.split("extern \"C\" fn ").nth(1) {
            let name = rest.split('(').next().unwrap();
            assert!(header.contains(&format!("{name}(")), "{name} missing from grace.h");
            n += 1;
        }
    }
    assert!(n >= 20, "{n}");
    for ty in ["typedef struct GraceBundle GraceBundle;", "typedef struct GraceRun GraceRun;", "GRACE_STATUS_NUMERIC = 3"] {
        assert!(header.contains(ty), "{ty}");
    }
    // The header must compile as C when a compiler is around.
    if let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(root.join("include/grace.h"))
        .output()
    {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
