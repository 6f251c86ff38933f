use std::ffi::{c_char, CString};
use std::process::Command;
use std::ptr;

use demspec::corpus::Tokenizer;
use demspec::model::{Checkpoint, EncoderConfig};
use demspec_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { ds_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { std::ffi::CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

#[test]
fn weighted_loss_matches_closed_form() {
    let mut out = 0.0;
    assert_eq!(unsafe { ds_weighted_loss(2.0, 0.5, &mut out) }, DsStatus::Ok);
    assert!((out - 0.5 * (2.0 * (-0.5f64).exp() + 0.5)).abs() < 1e-15);
    let mut both = 0.0;
    assert_eq!(unsafe { ds_combined_loss(2.0, 0.7, 0.5, -0.3, &mut both) }, DsStatus::Ok);
    let mut second = 0.0;
    unsafe { ds_weighted_loss(0.7, -0.3, &mut second) };
    assert!((both - out - second).abs() < 1e-15);
}

#[test]
fn gradient_is_zero_in_eta_at_log_loss() {
    let mut g = [f64::NAN; 4];
    let l: f64 = 3.0;
    assert_eq!(unsafe { ds_combined_loss_grad(l, 0.5, l.ln(), 0.5f64.ln(), g.as_mut_ptr()) }, DsStatus::Ok);
    assert!(g[2].abs() < 1e-15 && g[3].abs() < 1e-15);
    assert!((g[0] - 0.5 / l).abs() < 1e-15);
}

#[test]
fn invalid_inputs_report_status_and_message() {
    let mut out = 0.0;
    assert_eq!(unsafe { ds_weighted_loss(-1.0, 0.0, &mut out) }, DsStatus::InvalidArgument);
    assert!(last_error().contains("negative"));
    assert_eq!(unsafe { ds_weighted_loss(f64::NAN, 0.0, &mut out) }, DsStatus::NonFinite);
    assert_eq!(unsafe { ds_weighted_loss(1.0, 0.0, ptr::null_mut()) }, DsStatus::NullPointer);
    assert_eq!(unsafe { ds_combined_loss_grad(1.0, 1.0, 0.0, 0.0, ptr::null_mut()) }, DsStatus::NullPointer);
}

#[test]
fn bayes_ceiling_of_one_sided_markers() {
    let len = 20;
    let q = 1.0 - 0.2f64.powf(1.0 / len as f64);
    let mut out = 0.0;
    assert_eq!(unsafe { ds_bayes_optimal_ac(q, 0.0, len, len, &mut out) }, DsStatus::Ok);
    assert!((out - 0.9).abs() < 1e-9, "{out}");
    assert_eq!(unsafe { ds_bayes_optimal_ac(0.0, 0.0, 5, 10, &mut out) }, DsStatus::Ok);
    assert_eq!(out, 0.5);
    assert_eq!(unsafe { ds_bayes_optimal_ac(1.5, 0.0, 5, 10, &mut out) }, DsStatus::InvalidArgument);
}

#[test]
fn silhouette_of_two_tight_pairs() {
    let x = [0.0, 0.0, 0.0, 1.0, 10.0, 0.0, 10.0, 1.0];
    let labels = [0usize, 0, 1, 1];
    let mut s = 0.0;
    assert_eq!(unsafe { ds_silhouette(x.as_ptr(), 4, 2, labels.as_ptr(), &mut s) }, DsStatus::Ok);
    // a = 1, b = mean(10, sqrt(101)) for every point
    let b = (10.0 + 101f64.sqrt()) / 2.0;
    assert!((s - (b - 1.0) / b).abs() < 1e-12, "{s}");
    assert_eq!(unsafe { ds_silhouette(x.as_ptr(), 4, 2, [0usize, 0, 0, 1].as_ptr(), &mut s) }, DsStatus::InsufficientData);
}

#[test]
fn checkpoint_handle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let texts = ["a b c", "c b a d", "d d e"];
    let tok = Tokenizer::build(texts.iter().copied(), 100);
    let cfg = EncoderConfig { hidden_dim: 8, num_layers: 1, num_heads: 2, feedforward_dim: 16, ..EncoderConfig::tiny(tok.vocab_size()) };
    let ckpt = Checkpoint::fresh(&cfg, tok, "t", 1).unwrap();
    ckpt.save(dir.path()).unwrap();
    let expected = ckpt.embed(&texts, 64).unwrap();

    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { ds_checkpoint_open(path.as_ptr(), &mut handle) }, DsStatus::Ok);
    let mut width = 0;
    assert_eq!(unsafe { ds_checkpoint_hidden_dim(handle, &mut width) }, DsStatus::Ok);
    assert_eq!(width, 8);

    let owned: Vec<CString> = texts.iter().map(|t| CString::new(*t).unwrap()).collect();
    let ptrs: Vec<*const c_char> = owned.iter().map(|c| c.as_ptr()).collect();
    let mut out = vec![0.0; 3 * width];
    assert_eq!(unsafe { ds_checkpoint_embed(handle, ptrs.as_ptr(), 3, out.as_mut_ptr(), out.len()) }, DsStatus::Ok);
    assert_eq!(out, expected.iter().copied().collect::<Vec<_>>());
    assert_eq!(unsafe { ds_checkpoint_embed(handle, ptrs.as_ptr(), 3, out.as_mut_ptr(), 5) }, DsStatus::BufferTooSmall);
    unsafe { ds_checkpoint_free(handle) };

    let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    let status = unsafe { ds_checkpoint_open(missing.as_ptr(), &mut handle) };
    assert!(matches!(status, DsStatus::ResourceMissing | DsStatus::IoError), "{status:?}");
    assert!(handle.is_null());
    unsafe { ds_checkpoint_free(ptr::null_mut()) };
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/demspec.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in ["ds_weighted_loss", "ds_checkpoint_open", "ds_silhouette", "DS_STATUS_BUFFER_TOO_SMALL", "typedef struct DsCheckpoint"] {
        assert!(text.contains(name), "{name}");
    }
    let Ok(status) = Command::new("cc").args(["-fsyntax-only", "-x", "c", header]).status() else {
        return; // no C compiler on this machine
    };
    assert!(status.success());
}
