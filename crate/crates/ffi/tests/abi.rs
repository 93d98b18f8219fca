use std::ffi::{c_char, CStr, CString};
use std::ptr;

use catch_core::adapters::{init_adapter_pair, AdapterConfig};
use catch_core::backbone::{Backbone, BackboneConfig};
use catch_core::domain::DomainId;
use catch_core::hooks::Injection;
use catch_core::router::{AdapterRegistry, DomainClassifier};
use catch_core::synthdata::{gen_sample, DomainSpec};
use catch_core::tensor::ParamSet;
use catch_core::vocab;
use catch_ffi::*;

fn text(buf: &[c_char]) -> String {
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe { catch_last_error(buf.as_mut_ptr(), buf.len()) };
    text(&buf)
}

fn backbone(seed: u64) -> *mut CatchBackbone {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { catch_backbone_init(seed, &mut h) }, CatchStatus::Ok);
    h
}

#[test]
fn checksum_matches_core() {
    let h = backbone(3);
    let mut buf = vec![0 as c_char; 65];
    assert_eq!(unsafe { catch_backbone_checksum(h, buf.as_mut_ptr(), buf.len()) }, CatchStatus::Ok);
    let core = Backbone::init(BackboneConfig {
        init_seed: 3,
        ..BackboneConfig::default()
    })
    .unwrap();
    assert_eq!(text(&buf), core.checksum());
    let mut small = vec![0 as c_char; 10];
    assert_eq!(
        unsafe { catch_backbone_checksum(h, small.as_mut_ptr(), small.len()) },
        CatchStatus::BufferTooSmall
    );
    assert!(last_error().contains("65 bytes"));
    unsafe { catch_backbone_free(h) };
}

#[test]
fn baseline_answer_matches_core() {
    let h = backbone(0);
    let s = gen_sample(&DomainSpec::builtin_suite()[0], 11).unwrap();
    let q = CString::new(vocab::decode(&s.question.ids)).unwrap();
    let mut buf = vec![0 as c_char; 128];
    let st = unsafe {
        catch_answer(
            h,
            ptr::null(),
            ptr::null(),
            s.image.pixels().as_ptr(),
            s.image.pixels().len(),
            q.as_ptr(),
            buf.as_mut_ptr(),
            buf.len(),
        )
    };
    assert_eq!(st, CatchStatus::Ok);
    let core = Backbone::init(BackboneConfig::default()).unwrap();
    let want = core.generate_greedy(&s.image, &s.question, &Injection::None).unwrap();
    assert_eq!(text(&buf), vocab::decode(&want.answer.ids));
    unsafe { catch_backbone_free(h) };
}

#[test]
fn bad_arguments_map_to_codes() {
    let h = backbone(0);
    let mut buf = vec![0 as c_char; 64];
    let q = CString::new("how many blobs are there ?").unwrap();
    let pixels = vec![0.0; 30];
    let st = unsafe { catch_answer(h, ptr::null(), ptr::null(), pixels.as_ptr(), 30, q.as_ptr(), buf.as_mut_ptr(), 64) };
    assert_eq!(st, CatchStatus::Shape);
    let pixels = vec![0.0; 16 * 16];
    let st = unsafe { catch_answer(h, ptr::null(), ptr::null(), pixels.as_ptr(), 256, q.as_ptr(), buf.as_mut_ptr(), 64) };
    assert_eq!(st, CatchStatus::Config);
    let bad = CString::new("how many zebras ?").unwrap();
    let pixels = vec![0.0; 32 * 32];
    let st = unsafe { catch_answer(h, ptr::null(), ptr::null(), pixels.as_ptr(), 1024, bad.as_ptr(), buf.as_mut_ptr(), 64) };
    assert_eq!(st, CatchStatus::Lookup);
    assert!(last_error().contains("zebras"));
    let st = unsafe { catch_answer(ptr::null(), ptr::null(), ptr::null(), pixels.as_ptr(), 1024, q.as_ptr(), buf.as_mut_ptr(), 64) };
    assert_eq!(st, CatchStatus::NullArgument);
    let mut out = ptr::null_mut();
    let missing = CString::new("/nonexistent/backbone.ckpt").unwrap();
    assert_eq!(unsafe { catch_backbone_load(missing.as_ptr(), &mut out) }, CatchStatus::Io);
    assert!(out.is_null());
    unsafe { catch_backbone_free(h) };
}

#[test]
fn routed_answer_uses_the_classified_domain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BackboneConfig::default();
    let domains: Vec<DomainId> = DomainSpec::builtin_suite().into_iter().map(|s| s.id).collect();
    let mut reg = AdapterRegistry::new();
    for d in &domains {
        reg.insert(init_adapter_pair(d.clone(), &AdapterConfig::default(), &cfg).unwrap());
    }
    reg.save(dir.path(), None).unwrap();
    let clf = DomainClassifier::init(domains.clone(), cfg.patch_size, 8, 1).unwrap();
    let clf_path = dir.path().join("classifier.ckpt");
    clf.save(&clf_path).unwrap();

    let h = backbone(0);
    let dir_c = CString::new(dir.path().to_str().unwrap()).unwrap();
    let clf_c = CString::new(clf_path.to_str().unwrap()).unwrap();
    let (mut r, mut c) = (ptr::null_mut(), ptr::null_mut());
    assert_eq!(unsafe { catch_registry_load(dir_c.as_ptr(), h, &mut r) }, CatchStatus::Ok);
    assert_eq!(unsafe { catch_registry_len(r) }, 4);
    assert_eq!(unsafe { catch_classifier_load(clf_c.as_ptr(), &mut c) }, CatchStatus::Ok);

    let s = gen_sample(&DomainSpec::builtin_suite()[2], 5).unwrap();
    let mut name = vec![0 as c_char; 32];
    let st = unsafe { catch_classify(c, s.image.pixels().as_ptr(), 1024, name.as_mut_ptr(), 32) };
    assert_eq!(st, CatchStatus::Ok);
    let routed = domains.iter().find(|d| d.name == text(&name)).unwrap();

    let q = CString::new(vocab::decode(&s.question.ids)).unwrap();
    let mut buf = vec![0 as c_char; 128];
    let st = unsafe { catch_answer(h, r, c, s.image.pixels().as_ptr(), 1024, q.as_ptr(), buf.as_mut_ptr(), 128) };
    assert_eq!(st, CatchStatus::Ok);
    let core = Backbone::init(cfg).unwrap();
    let want = core
        .generate_greedy(&s.image, &s.question, &Injection::Inline(reg.get(routed).unwrap()))
        .unwrap();
    assert_eq!(text(&buf), vocab::decode(&want.answer.ids));
    unsafe {
        catch_registry_free(r);
        catch_classifier_free(c);
        catch_backbone_free(h);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/catch.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 12);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    let v = unsafe { CStr::from_ptr(catch_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let out = std::process::Command::new(cc)
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include/catch.h"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "clang", "gcc"] {
        if std::process::Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc);
        }
    }
    Err(())
}
