use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use mipkd::checkpoint::{self, Manifest};
use mipkd::data::bicubic_resize;
use mipkd::params::ParamStore;
use mipkd::tensor::{Shape, Tensor};
use mipkd_ffi::*;

fn last_error() -> String {
    let p = mipkd_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn build(arch: MipkdArch, c: u32, n: u32, g: u32, s: u32) -> *mut MipkdModel {
    let mut m = ptr::null_mut();
    let st = unsafe { mipkd_model_build(arch as u32, c, n, g, s, 0, &mut m) };
    assert_eq!(st, MipkdStatus::Ok);
    m
}

#[test]
fn build_reports_scale_and_parameter_count() {
    let m = build(MipkdArch::Edsr, 64, 16, 0, 4);
    unsafe {
        assert_eq!(mipkd_model_scale(m), 4);
        assert_eq!(mipkd_model_param_count(m), 1_517_571);
        mipkd_model_free(m);
    }
    let r = build(MipkdArch::Rcan, 8, 2, 2, 2);
    unsafe {
        assert_eq!(mipkd_model_scale(r), 2);
        mipkd_model_free(r);
        assert_eq!(mipkd_model_scale(ptr::null()), 0);
        mipkd_model_free(ptr::null_mut());
    }
}

#[test]
fn invalid_arguments_set_a_message() {
    let mut m = ptr::null_mut();
    let st = unsafe { mipkd_model_build(7, 8, 2, 1, 2, 0, &mut m) };
    assert_eq!(st, MipkdStatus::InvalidArgument);
    assert!(last_error().contains("architecture"));
    let st = unsafe { mipkd_model_build(0, 8, 2, 1, 5, 0, &mut m) };
    assert_eq!(st, MipkdStatus::InvalidArgument);
    let st = unsafe { mipkd_model_build(0, 8, 2, 1, 2, 0, ptr::null_mut()) };
    assert_eq!(st, MipkdStatus::NullPointer);
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    let st = unsafe { mipkd_model_load(missing.as_ptr(), &mut m) };
    assert_eq!(st, MipkdStatus::Io);
    assert!(last_error().contains("/nonexistent/model.ckpt"));
}

#[test]
fn upscale_checks_buffer_size_and_matches_library() {
    let m = build(MipkdArch::Edsr, 8, 2, 0, 2);
    let input: Vec<f32> = (0..3 * 10 * 12).map(|i| (i % 17) as f32 / 16.0).collect();
    let mut out = vec![0.0f32; 3 * 20 * 24];
    unsafe {
        let st = mipkd_model_upscale(m, input.as_ptr(), 1, 10, 12, out.as_mut_ptr(), out.len() - 1);
        assert_eq!(st, MipkdStatus::Dimension);
        let st = mipkd_model_upscale(m, input.as_ptr(), 1, 10, 12, out.as_mut_ptr(), out.len());
        assert_eq!(st, MipkdStatus::Ok);
        mipkd_model_free(m);
    }
    let model =
        mipkd::backbone::SrModel::<f32>::build(mipkd::backbone::NetworkSpec::edsr(8, 2, 2), mipkd::backbone::Role::Student, 0)
            .unwrap();
    let lr = Tensor::from_vec(Shape::new(1, 3, 10, 12), input).unwrap();
    assert_eq!(model.upscale(&lr).unwrap().data(), &out[..]);
}

#[test]
fn bicubic_pseudo_checkpoint_upscales_bicubically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bicubic.ckpt");
    checkpoint::save(&path, &Manifest::bicubic(3), &ParamStore::new()).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mipkd_model_load(cpath.as_ptr(), &mut m) }, MipkdStatus::Ok);
    let lr = Tensor::from_fn(Shape::new(1, 3, 8, 8), |_, c, h, w| ((c + h * w) % 5) as f32 / 4.0);
    let mut out = vec![0.0f32; 3 * 24 * 24];
    unsafe {
        assert_eq!(mipkd_model_param_count(m), 0);
        let st = mipkd_model_upscale(m, lr.data().as_ptr(), 1, 8, 8, out.as_mut_ptr(), out.len());
        assert_eq!(st, MipkdStatus::Ok);
        mipkd_model_free(m);
    }
    assert_eq!(bicubic_resize(&lr, 24, 24).unwrap().data(), &out[..]);
}

#[test]
fn metrics_through_the_abi() {
    let a = vec![0.5f32; 3 * 16 * 16];
    let b = vec![0.4f32; 3 * 16 * 16];
    let (mut p, mut s) = (0.0, 0.0);
    unsafe {
        assert_eq!(mipkd_psnr(a.as_ptr(), a.as_ptr(), 16, 16, 2, &mut p), MipkdStatus::Ok);
        assert_eq!(p, 100.0);
        assert_eq!(mipkd_ssim(a.as_ptr(), a.as_ptr(), 16, 16, 2, &mut s), MipkdStatus::Ok);
        assert!((s - 1.0).abs() < 1e-12);
        // a uniform 0.1 RGB gap is a 0.1 * 219 / 255 luma gap
        assert_eq!(mipkd_psnr(a.as_ptr(), b.as_ptr(), 16, 16, 0, &mut p), MipkdStatus::Ok);
        let want = -20.0 * (0.1f64 * 219.0 / 255.0).log10();
        assert!((p - want).abs() < 1e-4, "{p} vs {want}");
        assert_eq!(mipkd_psnr(a.as_ptr(), ptr::null(), 16, 16, 0, &mut p), MipkdStatus::NullPointer);
        assert_eq!(mipkd_ssim(a.as_ptr(), b.as_ptr(), 16, 16, 4, &mut s), MipkdStatus::Dimension);
    }
}

#[test]
fn header_compiles_and_links_from_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler on PATH; skipping");
        return;
    };
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let target = std::env::var_os("CARGO_TARGET_DIR")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| crate_dir.join("../../target"));
    let lib = target.join("debug/libmipkd_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "mipkd.h"
int main(void) {
    MipkdModel *m = NULL;
    if (mipkd_model_build(MIPKD_ARCH_EDSR, 8, 2, 0, 2, 0, &m) != MIPKD_STATUS_OK) return 1;
    float in[3 * 8 * 8], out[3 * 16 * 16];
    for (int i = 0; i < 3 * 8 * 8; i++) in[i] = (float)(i % 7) / 6.0f;
    if (mipkd_model_upscale(m, in, 1, 8, 8, out, 3 * 16 * 16) != MIPKD_STATUS_OK) return 2;
    if (mipkd_model_scale(m) != 2) return 3;
    mipkd_model_free(m);
    if (mipkd_model_build(9, 8, 2, 0, 2, 0, &m) != MIPKD_STATUS_INVALID_ARGUMENT) return 4;
    if (mipkd_last_error() == NULL) return 5;
    printf("ok\n");
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C smoke program failed to build");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C smoke program exited with {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc);
        }
    }
    Err(())
}
