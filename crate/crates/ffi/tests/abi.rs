use std::ffi::CString;
use std::path::Path;
use std::process::Command;
use std::ptr;

use rectflow::nn::{MlpVelocityNet, NetConfig};
use rectflow::stage::Provenance;
use rectflow::FlowStage;
use rectflow_ffi::*;

fn net(u: &[f64], seed: u64, dense: bool) -> MlpVelocityNet {
    let cfg = NetConfig {
        state_dim: u.len(),
        hidden: vec![6, 5],
        vocab: 3,
        cond_dim: 2,
        time_freqs: 2,
    };
    if dense {
        return MlpVelocityNet::init_dense(cfg, seed).unwrap();
    }
    let mut net = MlpVelocityNet::init(cfg, seed).unwrap();
    let last = net.params.num_blocks() - 1;
    net.params.block_mut(last).copy_from_slice(u);
    net
}

fn save(stage: &FlowStage, dir: &Path) -> CString {
    let path = dir.join(format!("{}.ckpt", stage.id));
    stage.save(&path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

fn load(path: &CString) -> *mut RfStage {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { rf_stage_load(path.as_ptr(), &mut h) }, RfStatus::Ok);
    assert!(!h.is_null());
    h
}

fn last_error() -> String {
    let len = unsafe { rf_last_error_message(ptr::null_mut(), 0) };
    let mut buf = vec![0u8; len + 1];
    unsafe { rf_last_error_message(buf.as_mut_ptr().cast(), buf.len()) };
    String::from_utf8(buf[..len].to_vec()).unwrap()
}

#[test]
fn load_reports_info_and_frees() {
    let dir = tempfile::tempdir().unwrap();
    let stage = FlowStage::new_flow("v1", 1, 2.0, net(&[0.5, -1.0], 3, false), Provenance::default()).unwrap();
    let h = load(&save(&stage, dir.path()));
    let (mut d, mut l, mut k, mut one) = (0usize, 0usize, 0u32, true);
    assert_eq!(unsafe { rf_stage_info(h, &mut d, &mut l, &mut k, &mut one) }, RfStatus::Ok);
    assert_eq!((d, l, k, one), (2, 2, 1, false));
    let mut alpha = 0.0;
    assert_eq!(unsafe { rf_stage_alpha(h, &mut alpha) }, RfStatus::Ok);
    assert_eq!(alpha, 2.0);
    unsafe { rf_stage_free(h) };
    unsafe { rf_stage_free(ptr::null_mut()) };
}

#[test]
fn velocity_and_sample_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let stage = FlowStage::new_flow("v1", 1, 1.5, net(&[0.0; 3], 9, true), Provenance::default()).unwrap();
    let h = load(&save(&stage, dir.path()));
    let x = [0.1, -0.2, 0.3, 1.0, 0.0, -1.0];
    let t = [0.25, 0.75];
    let c = [1usize, 0];
    let mut out = [0.0; 6];
    let st = unsafe { rf_stage_velocity(h, x.as_ptr(), t.as_ptr(), c.as_ptr(), 2, 3.0, out.as_mut_ptr()) };
    assert_eq!(st, RfStatus::Ok);
    assert_eq!(out.to_vec(), stage.guided_velocity(&x, &t, &c, 3.0).unwrap());

    let st = unsafe { rf_stage_sample(h, x.as_ptr(), c.as_ptr(), 2, 7, 1.5, out.as_mut_ptr()) };
    assert_eq!(st, RfStatus::Ok);
    let expect = rectflow::metrics::stage_endpoints(&stage, &x, &c, 7, 1.5).unwrap();
    assert_eq!(out.to_vec(), expect);
    unsafe { rf_stage_free(h) };
}

#[test]
fn constant_field_sample_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let stage = FlowStage::new_flow("v1", 1, 1.0, net(&[2.0, -3.0], 1, false), Provenance::default()).unwrap();
    let h = load(&save(&stage, dir.path()));
    let z = [0.5, 0.5];
    let c = [1usize];
    let mut out = [0.0; 2];
    assert_eq!(unsafe { rf_stage_sample(h, z.as_ptr(), c.as_ptr(), 1, 1, 1.0, out.as_mut_ptr()) }, RfStatus::Ok);
    assert_eq!(out, [2.5, -2.5]);
    unsafe { rf_stage_free(h) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut h = ptr::null_mut();
    let missing = CString::new("/definitely/not/here.ckpt").unwrap();
    assert_eq!(unsafe { rf_stage_load(missing.as_ptr(), &mut h) }, RfStatus::MissingInput);
    assert!(h.is_null());
    assert!(last_error().contains("here.ckpt"));

    assert_eq!(unsafe { rf_stage_load(ptr::null(), &mut h) }, RfStatus::NullPointer);

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { rf_stage_load(junk.as_ptr(), &mut h) }, RfStatus::Format);

    let stage = FlowStage::new_flow("v1", 1, 1.0, net(&[0.0, 0.0], 1, false), Provenance::default()).unwrap();
    let h = load(&save(&stage, dir.path()));
    let x = [0.0, 0.0];
    let bad_c = [7usize];
    let mut out = [0.0; 2];
    let st = unsafe { rf_stage_sample(h, x.as_ptr(), bad_c.as_ptr(), 1, 4, 1.0, out.as_mut_ptr()) };
    assert_ne!(st, RfStatus::Ok);
    assert!(!last_error().is_empty());
    let st = unsafe { rf_stage_sample(h, x.as_ptr(), bad_c.as_ptr(), 1, 4, 1.0, ptr::null_mut()) };
    assert_eq!(st, RfStatus::NullPointer);
    unsafe { rf_stage_free(h) };
}

#[test]
fn header_declares_the_api_and_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/rectflow.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "rf_stage_load",
        "rf_stage_free",
        "rf_stage_info",
        "rf_stage_alpha",
        "rf_stage_velocity",
        "rf_stage_sample",
        "rf_last_error_message",
        "typedef struct RfStage RfStage",
    ] {
        assert!(text.contains(name), "missing {name}");
    }
    let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler found; syntax check skipped");
        return;
    };
    assert!(status.success());
}
