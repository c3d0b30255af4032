use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use palora::pipeline::{derive, downstream_splits, pretrain_model, ExperimentConfig};
use palora_ffi::*;

const SMALL: &str = include_str!("../../core/tests/fixtures/small.toml");

fn last_error() -> String {
    unsafe { CStr::from_ptr(palora_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn config(text: &str) -> (PaloraStatus, *mut PaloraConfig) {
    let text = CString::new(text).unwrap();
    let mut cfg = ptr::null_mut();
    let status = unsafe { palora_config_from_toml(text.as_ptr(), &mut cfg) };
    (status, cfg)
}

#[test]
fn pretrain_derive_and_round_trip_match_the_library() {
    let (status, cfg) = config(SMALL);
    assert_eq!(status, PaloraStatus::Ok);
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { palora_pretrain(cfg, &mut model) }, PaloraStatus::Ok);

    let lib_cfg = ExperimentConfig::from_toml(SMALL).unwrap();
    let lib_model = pretrain_model(&lib_cfg).unwrap().model;
    let mut digest = [0u8; 32];
    assert_eq!(
        unsafe { palora_model_hash(model, digest.as_mut_ptr()) },
        PaloraStatus::Ok
    );
    assert_eq!(digest, lib_model.weights_hash());

    let depth = unsafe { palora_model_depth(model) };
    assert_eq!(depth, lib_model.depth());
    for (l, &(m, n)) in lib_model.layer_dims().iter().enumerate() {
        let (mut r, mut c) = (0, 0);
        assert_eq!(
            unsafe { palora_model_layer_dims(model, l, &mut r, &mut c) },
            PaloraStatus::Ok
        );
        assert_eq!((r, c), (m, n));
    }
    let (mut r, mut c) = (0, 0);
    assert_eq!(
        unsafe { palora_model_layer_dims(model, depth, &mut r, &mut c) },
        PaloraStatus::InvalidArgument
    );
    assert!(last_error().contains("out of range"));

    let splits = downstream_splits(&lib_cfg).unwrap();
    let (lib_profile, _) = derive(&lib_model, &lib_cfg, &splits).unwrap();
    let mut profile = ptr::null_mut();
    assert_eq!(unsafe { palora_derive(model, cfg, &mut profile) }, PaloraStatus::Ok);
    assert_eq!(unsafe { palora_profile_len(profile) }, lib_profile.layers.len());
    for (l, rec) in lib_profile.layers.iter().enumerate() {
        let mut ratio = PaloraLayerRatio::default();
        assert_eq!(
            unsafe { palora_profile_layer(profile, l, &mut ratio) },
            PaloraStatus::Ok
        );
        assert_eq!(
            (ratio.retained_rows, ratio.retained_cols),
            (rec.retained_rows, rec.retained_cols)
        );
        assert_eq!(ratio.element_rate.to_bits(), rec.element_rate.to_bits());
    }

    let x = &splits.test.inputs;
    let want = lib_model.forward(x, None).unwrap();
    let mut logits = vec![0.0; want.len()];
    let status = unsafe {
        palora_model_forward(
            model,
            x.data().as_ptr(),
            x.len(),
            x.cols(),
            logits.as_mut_ptr(),
            logits.len(),
        )
    };
    assert_eq!(status, PaloraStatus::Ok);
    assert_eq!(logits, want.data());
    let status = unsafe {
        palora_model_forward(
            model,
            x.data().as_ptr(),
            x.len(),
            x.cols(),
            logits.as_mut_ptr(),
            logits.len() - 1,
        )
    };
    assert_eq!(status, PaloraStatus::Dimension);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.plra").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { palora_model_save(model, path.as_ptr()) }, PaloraStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(
        unsafe { palora_model_load(path.as_ptr(), &mut loaded) },
        PaloraStatus::Ok
    );
    let mut again = [0u8; 32];
    assert_eq!(
        unsafe { palora_model_hash(loaded, again.as_mut_ptr()) },
        PaloraStatus::Ok
    );
    assert_eq!(again, digest);

    unsafe {
        palora_profile_free(profile);
        palora_model_free(loaded);
        palora_model_free(model);
        palora_config_free(cfg);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let (status, cfg) = config("pretrain_task = 3\n");
    assert_eq!(status, PaloraStatus::Config);
    assert!(cfg.is_null());
    assert!(!last_error().is_empty());

    let missing = CString::new("/nonexistent/model.plra").unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { palora_model_load(missing.as_ptr(), &mut model) },
        PaloraStatus::Io
    );
    assert_eq!(
        unsafe { palora_model_load(ptr::null(), &mut model) },
        PaloraStatus::NullPointer
    );

    let bad = [0xffu8, 0];
    assert_eq!(
        unsafe { palora_model_load(bad.as_ptr().cast(), &mut model) },
        PaloraStatus::Utf8
    );

    let mut mask = ptr::null_mut();
    assert_eq!(
        unsafe { palora_mask_sample(4, 4, 1.5, 0.5, 0, &mut mask) },
        PaloraStatus::InvalidArgument
    );
    assert_eq!(unsafe { palora_model_depth(ptr::null()) }, 0);
    assert!(unsafe { palora_mask_element_rate(ptr::null()) }.is_nan());
    unsafe { palora_model_free(ptr::null_mut()) };
}

#[test]
fn masks_and_bounds_match_the_library() {
    let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
    assert_eq!(
        unsafe { palora_mask_sample(8, 6, 0.5, 0.7, 1, &mut a) },
        PaloraStatus::Ok
    );
    assert_eq!(
        unsafe { palora_mask_sample(8, 6, 0.5, 0.7, 2, &mut b) },
        PaloraStatus::Ok
    );
    let lib_a = palora::adapters::sample_mask_pair(8, 6, 0.5, 0.7, 1).unwrap();
    let lib_b = palora::adapters::sample_mask_pair(8, 6, 0.5, 0.7, 2).unwrap();
    assert_eq!(
        unsafe { palora_mask_element_rate(a) },
        palora::adapters::effective_element_rate(&lib_a)
    );
    let (mut ab, mut aa) = (0.0, 0.0);
    assert_eq!(unsafe { palora_mask_overlap(a, b, &mut ab) }, PaloraStatus::Ok);
    assert_eq!(unsafe { palora_mask_overlap(a, a, &mut aa) }, PaloraStatus::Ok);
    assert_eq!(ab, palora::analysis::mask_overlap(&lib_a, &lib_b).unwrap());
    assert_eq!(aa, 1.0);

    let mut other = ptr::null_mut();
    assert_eq!(
        unsafe { palora_mask_sample(3, 6, 0.5, 0.7, 1, &mut other) },
        PaloraStatus::Ok
    );
    assert_eq!(
        unsafe { palora_mask_overlap(a, other, &mut ab) },
        PaloraStatus::Dimension
    );
    unsafe {
        palora_mask_free(a);
        palora_mask_free(b);
        palora_mask_free(other);
    }

    let mut rho = 0.0;
    assert_eq!(
        unsafe { palora_slt_rho(1.0, 3.0, 0.5, 0.0, 0.01, 0.1, &mut rho) },
        PaloraStatus::Ok
    );
    assert_eq!(rho, palora::slt::rho(1.0, 3.0, 0.5, 0.0, 0.01, 0.1).unwrap());
    let norms = [1.5, 2.0];
    let mut eps = 0.0;
    let status = unsafe { palora_slt_epsilon_l(0.1, 8.0, 3, 0.5, norms.as_ptr(), norms.len(), &mut eps) };
    assert_eq!(status, PaloraStatus::Ok);
    assert_eq!(eps, palora::slt::epsilon_l(0.1, 8.0, 3, 0.5, &norms).unwrap());
    let status = unsafe { palora_slt_epsilon_l(0.5, 1.0, 2, 0.0, ptr::null(), 0, &mut eps) };
    assert_eq!(status, PaloraStatus::Ok);
    let mut width = 0;
    let status = unsafe { palora_slt_width_bound(7, 0.5, eps, 0.1, rho, 1.0, &mut width) };
    assert_eq!(status, PaloraStatus::Ok);
    assert_eq!(width, palora::slt::width_bound(7, 0.5, eps, 0.1, rho, 1.0).unwrap());
    assert_eq!(
        unsafe { palora_slt_width_bound(7, 0.5, -1.0, 0.1, rho, 1.0, &mut width) },
        PaloraStatus::InvalidArgument
    );
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "palora.h"

int main(void) {
    PaloraMask *a = NULL;
    if (palora_mask_sample(16, 16, 0.5, 0.5, 3, &a) != PALORA_STATUS_OK) return 1;
    double overlap = 0.0;
    if (palora_mask_overlap(a, a, &overlap) != PALORA_STATUS_OK || overlap != 1.0) return 2;
    PaloraMask *bad = NULL;
    if (palora_mask_sample(4, 4, 2.0, 0.5, 0, &bad) != PALORA_STATUS_INVALID_ARGUMENT) return 3;
    if (palora_last_error() == NULL) return 4;
    printf("%s %.6f\n", palora_version(), palora_mask_element_rate(a));
    palora_mask_free(a);
    return 0;
}
"#;

/// Compile and run a C program against the generated header and the static
/// library built alongside this test.
#[test]
fn c_program_links_against_header_and_staticlib() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler on PATH; skipping");
        return;
    }
    let profile_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let lib = profile_dir.join("libpalora_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let exe = dir.path().join("smoke");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let cc = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .unwrap();
    assert!(cc.status.success(), "{}", String::from_utf8_lossy(&cc.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    let stdout = String::from_utf8(run.stdout).unwrap();
    let mask = palora::adapters::sample_mask_pair(16, 16, 0.5, 0.5, 3).unwrap();
    let want = format!(
        "{} {:.6}\n",
        env!("CARGO_PKG_VERSION"),
        palora::adapters::effective_element_rate(&mask)
    );
    assert_eq!(stdout, want);
}
