use std::ffi::{CStr, CString};
use std::ptr;

use selfsynth::data::image::encode_ppm;
use selfsynth::data::load_ppm;
use selfsynth::eval::sequence_log_prob;
use selfsynth::model::{encode_grouped, ModelConfig, ModelParams};
use selfsynth::synthesis::{filter_logits, SamplerConfig};
use selfsynth::tokenizer::BpeVocab;
use selfsynth::training::{save_checkpoint, OptimState};
use selfsynth_ffi::*;

const TEXTS: &[&str] = &[
    "the cat sat on the mat",
    "a red circle on a blue background",
    "the dogs run in the park",
    "a green square near the river",
];

fn trained() -> *mut SsTokenizer {
    let owned: Vec<CString> = TEXTS.iter().map(|t| CString::new(*t).unwrap()).collect();
    let ptrs: Vec<*const i8> = owned.iter().map(|c| c.as_ptr()).collect();
    let mut tok = ptr::null_mut();
    let st = unsafe { ss_tokenizer_train(ptrs.as_ptr(), ptrs.len(), 300, &mut tok) };
    assert_eq!(st, SsStatus::Ok);
    tok
}

fn last_error() -> String {
    let p = ss_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn tokenizer_matches_library() {
    let tok = trained();
    let lib = BpeVocab::train(TEXTS, 300).unwrap();
    assert_eq!(unsafe { ss_tokenizer_vocab_size(tok) }, lib.vocab_size());

    let text = CString::new("the red dogs sat").unwrap();
    let mut ids = vec![0u32; 64];
    let mut n = 0usize;
    let st = unsafe { ss_tokenizer_encode(tok, text.as_ptr(), ids.as_mut_ptr(), ids.len(), &mut n) };
    assert_eq!(st, SsStatus::Ok);
    assert_eq!(&ids[..n], &lib.encode("the red dogs sat")[..]);

    let mut buf = vec![0i8; 64];
    let mut len = 0usize;
    let st = unsafe { ss_tokenizer_decode(tok, ids.as_ptr(), n, buf.as_mut_ptr(), buf.len(), &mut len) };
    assert_eq!(st, SsStatus::Ok);
    let s = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
    assert_eq!(s, "the red dogs sat");
    assert_eq!(len, s.len());
    unsafe { ss_tokenizer_free(tok) };
}

#[test]
fn small_buffers_report_required_length() {
    let tok = trained();
    let text = CString::new("a green square near the river").unwrap();
    let mut n = 0usize;
    let mut one = [0u32; 1];
    let st = unsafe { ss_tokenizer_encode(tok, text.as_ptr(), one.as_mut_ptr(), 1, &mut n) };
    assert_eq!(st, SsStatus::BufferTooSmall);
    assert!(n > 1);
    assert_eq!(one[0], 0);

    let mut ids = vec![0u32; n];
    let st = unsafe { ss_tokenizer_encode(tok, text.as_ptr(), ids.as_mut_ptr(), n, &mut n) };
    assert_eq!(st, SsStatus::Ok);

    // exact length leaves no room for the terminator
    let mut len = 0usize;
    let mut buf = vec![1i8; 29];
    let st = unsafe { ss_tokenizer_decode(tok, ids.as_ptr(), ids.len(), buf.as_mut_ptr(), 29, &mut len) };
    assert_eq!(st, SsStatus::BufferTooSmall);
    assert_eq!(len, 29);
    assert!(last_error().contains("NUL"));
    unsafe { ss_tokenizer_free(tok) };
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("v.bpe").to_str().unwrap()).unwrap();
    let tok = trained();
    assert_eq!(unsafe { ss_tokenizer_save(tok, path.as_ptr()) }, SsStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { ss_tokenizer_load(path.as_ptr(), &mut back) }, SsStatus::Ok);
    assert_eq!(unsafe { ss_tokenizer_vocab_size(back) }, unsafe { ss_tokenizer_vocab_size(tok) });
    unsafe {
        ss_tokenizer_free(tok);
        ss_tokenizer_free(back);
    }
}

#[test]
fn errors_are_reported() {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ss_tokenizer_load(ptr::null(), &mut out) }, SsStatus::NullPointer);
    assert!(last_error().contains("path"));

    let missing = CString::new("/nonexistent/v.bpe").unwrap();
    assert_eq!(unsafe { ss_tokenizer_load(missing.as_ptr(), &mut out) }, SsStatus::Io);
    assert!(out.is_null());

    let tok = trained();
    let bad = [9_999_999u32];
    let mut buf = [0i8; 8];
    let mut len = 0;
    let st = unsafe { ss_tokenizer_decode(tok, bad.as_ptr(), 1, buf.as_mut_ptr(), 8, &mut len) };
    assert_eq!(st, SsStatus::UnknownToken);
    unsafe { ss_tokenizer_free(tok) };
    unsafe { ss_tokenizer_free(ptr::null_mut()) };
    assert_eq!(unsafe { ss_tokenizer_vocab_size(ptr::null()) }, 0);
}

#[test]
fn filter_matches_library() {
    let z = [1.0, 3.0, 2.0, -1.0, 3.0, 0.5];
    let mut p = [0.0; 6];
    let st = unsafe { ss_filter_logits(z.as_ptr(), 6, 0.8, 3, 0.9, p.as_mut_ptr()) };
    assert_eq!(st, SsStatus::Ok);
    let cfg = SamplerConfig { temperature: 0.8, top_k: 3, top_p: 0.9, ..Default::default() };
    let want = filter_logits(&z, &cfg);
    assert_eq!(p.to_vec(), want);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    assert_eq!(unsafe { ss_filter_logits(z.as_ptr(), 6, 0.0, 3, 0.9, p.as_mut_ptr()) }, SsStatus::Config);
    assert_eq!(unsafe { ss_filter_logits(z.as_ptr(), 6, 1.0, 7, 0.9, p.as_mut_ptr()) }, SsStatus::Config);
    let nan = [f64::NAN, 0.0];
    assert_eq!(unsafe { ss_filter_logits(nan.as_ptr(), 2, 1.0, 2, 1.0, p.as_mut_ptr()) }, SsStatus::Contract);
}

#[test]
fn model_scoring_and_captions() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = BpeVocab::train(TEXTS, 300).unwrap();
    let vpath = dir.path().join("v.bpe");
    vocab.save(&vpath).unwrap();
    let cfg = ModelConfig::toy(vocab.vocab_size());
    let params = ModelParams::<f32>::init(&cfg, 3).unwrap();
    let ckpt = dir.path().join("m.ssckpt");
    save_checkpoint(&params, &OptimState::default(), serde_json::json!({}), &ckpt).unwrap();

    let rgb: Vec<u8> = (0..cfg.image_side * cfg.image_side * 3).map(|i| (i * 37 % 251) as u8).collect();
    let img_path = dir.path().join("x.ppm");
    std::fs::write(&img_path, encode_ppm(cfg.image_side, cfg.image_side, &rgb)).unwrap();

    let mut model = ptr::null_mut();
    let cpath = CString::new(ckpt.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ss_model_load(cpath.as_ptr(), &mut model) }, SsStatus::Ok);
    assert_eq!(unsafe { ss_model_vocab_size(model) }, vocab.vocab_size());

    let mut hex = [0i8; 65];
    let mut len = 0;
    assert_eq!(unsafe { ss_model_digest(model, hex.as_mut_ptr(), 65, &mut len) }, SsStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(hex.as_ptr()) }.to_str().unwrap(), params.digest());

    let ids = vocab.encode("the cat sat");
    let mut lp = 0.0;
    assert_eq!(unsafe { ss_model_log_prob(model, ids.as_ptr(), ids.len(), ptr::null(), &mut lp) }, SsStatus::Ok);
    let want = sequence_log_prob(&params, &ids, None).unwrap();
    assert!((lp - want).abs() < 1e-9, "{lp} vs {want}");

    let ipath = CString::new(img_path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ss_model_log_prob(model, ids.as_ptr(), ids.len(), ipath.as_ptr(), &mut lp) }, SsStatus::Ok);
    let g = encode_grouped(&params, &load_ppm(&img_path, cfg.image_side).unwrap()).unwrap();
    let want = sequence_log_prob(&params, &ids, Some(&g)).unwrap();
    assert!((lp - want).abs() < 1e-9);

    let mut tok = ptr::null_mut();
    let vp = CString::new(vpath.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ss_tokenizer_load(vp.as_ptr(), &mut tok) }, SsStatus::Ok);
    let mut a = vec![0i8; 4096];
    let mut b = vec![0i8; 4096];
    let (mut la, mut lb) = (0, 0);
    assert_eq!(unsafe { ss_model_caption(model, tok, ipath.as_ptr(), 5, a.as_mut_ptr(), a.len(), &mut la) }, SsStatus::Ok);
    assert_eq!(unsafe { ss_model_caption(model, tok, ipath.as_ptr(), 5, b.as_mut_ptr(), b.len(), &mut lb) }, SsStatus::Ok);
    assert_eq!(la, lb);
    assert_eq!(a[..la], b[..lb]);

    assert_eq!(unsafe { ss_model_log_prob(model, ptr::null(), 0, ptr::null(), &mut lp) }, SsStatus::Contract);
    unsafe {
        ss_model_free(model);
        ss_tokenizer_free(tok);
    }
}
