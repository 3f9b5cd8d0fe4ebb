use std::ffi::{c_char, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use dpm_ffi::*;

const CSV: &str = "id,time,r.1,m.1,y\n\
a,0,1,0,0\na,1,0,1,0\na,2,2,0,1\n\
b,0,0,0,0\nb,1,1,0,0\nb,2,0,0,0\nb,3,0,1,0\n";

fn write_csv(dir: &Path, body: &str) -> CString {
    let path = dir.join("data.csv");
    std::fs::write(&path, body).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0u8; 512];
    let n = unsafe { dpm_last_error_message(buf.as_mut_ptr().cast::<c_char>(), buf.len()) };
    buf.truncate(n.min(511));
    String::from_utf8(buf).unwrap()
}

fn load(path: &CString) -> *mut DpmDataset {
    let mut data = ptr::null_mut();
    assert_eq!(unsafe { dpm_dataset_load(path.as_ptr(), ptr::null(), &mut data) }, DpmStatus::Ok);
    data
}

#[test]
fn scores_through_the_c_interface_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let data = load(&write_csv(dir.path(), CSV));
    unsafe {
        assert_eq!(dpm_dataset_len(data), 2);
        let mut horizon = 0;
        assert_eq!(dpm_dataset_horizon(data, 1, &mut horizon), DpmStatus::Ok);
        assert_eq!(horizon, 4);
        assert_eq!(dpm_dataset_horizon(data, 2, &mut horizon), DpmStatus::OutOfRange);

        let values = [-2.0, 0.6, 0.5, 0.3];
        let mut model = ptr::null_mut();
        assert_eq!(dpm_model_from_params(1, 1, values.as_ptr(), &mut model), DpmStatus::Ok);
        let mut got = [0.0; 4];
        let mut len = 0;
        assert_eq!(dpm_model_params(model, ptr::null(), got.as_mut_ptr(), 4, &mut len), DpmStatus::Ok);
        assert_eq!((len, got), (4, values));

        let mut scores = [0.0; 3];
        assert_eq!(
            dpm_score_customer(model, data, 0, 500, 7, scores.as_mut_ptr(), 3, &mut len),
            DpmStatus::Ok
        );
        let history = dpm_core::io::load_dataset(dir.path().join("data.csv"), &Default::default()).unwrap();
        let params = dpm_core::ModelParams::new(-2.0, 0.6, vec![0.5], vec![0.3]).unwrap();
        let config = dpm_core::FilterConfig {
            particle_count: 500,
            seed: 7,
            ..Default::default()
        };
        let expected = dpm_core::eval::score_customer(&params, &history.customers()[0], &config).unwrap();
        assert_eq!(scores.to_vec(), expected);

        let mut short = [0.0; 2];
        assert_eq!(
            dpm_score_customer(model, data, 1, 500, 7, short.as_mut_ptr(), 2, &mut len),
            DpmStatus::BufferTooSmall
        );
        assert_eq!(len, 4);
        assert!(last_error().contains("need 4"));

        dpm_model_free(model);
        dpm_dataset_free(data);
    }
}

#[test]
fn fitted_models_survive_a_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let data = load(&write_csv(dir.path(), CSV));
    let config = CString::new(r#"{"max_iters": 50, "convergence_window": 10, "filter": {"particle_count": 20}}"#).unwrap();
    let file = CString::new(dir.path().join("model.json").to_str().unwrap()).unwrap();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(dpm_fit(data, config.as_ptr(), &mut model), DpmStatus::Ok);
        assert_eq!(dpm_model_save(model, file.as_ptr()), DpmStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(dpm_model_load(file.as_ptr(), &mut loaded), DpmStatus::Ok);
        let (mut a, mut b) = ([0.0; 4], [0.0; 4]);
        let mut len = 0;
        dpm_model_params(model, ptr::null(), a.as_mut_ptr(), 4, &mut len);
        dpm_model_params(loaded, ptr::null(), b.as_mut_ptr(), 4, &mut len);
        assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
        dpm_model_free(model);
        dpm_model_free(loaded);
        dpm_dataset_free(data);
    }
}

#[test]
fn failures_report_a_status_and_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = ptr::null_mut();
    let missing = CString::new("/nonexistent/data.csv").unwrap();
    unsafe {
        assert_eq!(dpm_dataset_load(missing.as_ptr(), ptr::null(), &mut data), DpmStatus::Io);
        assert!(data.is_null());
        assert!(last_error().contains("/nonexistent/data.csv"));

        let bad = write_csv(dir.path(), "id,time,r.1,m.1,y\na,0,0,0,2\n");
        assert_eq!(dpm_dataset_load(bad.as_ptr(), ptr::null(), &mut data), DpmStatus::Parse);
        assert!(last_error().contains("row 2"));

        assert_eq!(dpm_dataset_load(ptr::null(), ptr::null(), &mut data), DpmStatus::NullArgument);

        let good = load(&write_csv(dir.path(), CSV));
        let typo = CString::new(r#"{"gama0": 1.0}"#).unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(dpm_fit(good, typo.as_ptr(), &mut model), DpmStatus::Parse);
        assert!(model.is_null());
        dpm_dataset_free(good);

        let mut auc = 0.0;
        assert_eq!(dpm_auc([0.1, 0.2].as_ptr(), [1u8, 1].as_ptr(), 2, &mut auc), DpmStatus::InvalidArgument);
        assert_eq!(dpm_auc([0.1, 0.9, 0.5].as_ptr(), [0u8, 1, 0].as_ptr(), 3, &mut auc), DpmStatus::Ok);
        assert_eq!(auc, 1.0);

        dpm_dataset_free(ptr::null_mut());
        dpm_model_free(ptr::null_mut());
    }
}

/// The directory holding this package's library artifacts.
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn the_generated_header_compiles_and_links_from_c() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let archive = artifact_dir().join("libdpm_ffi.a");
    assert!(archive.exists(), "{} missing", archive.display());
    let dir = tempfile::tempdir().unwrap();
    let binary = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(root.join("include"))
        .arg(root.join("tests/smoke.c"))
        .arg(&archive)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&binary)
        .status()
        .expect("a C compiler");
    assert!(status.success());
    let csv = write_csv(dir.path(), CSV);
    let run = Command::new(&binary).arg(csv.to_str().unwrap()).status().unwrap();
    assert_eq!(run.code(), Some(0));
}
