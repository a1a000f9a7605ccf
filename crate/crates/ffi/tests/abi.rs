use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use budgetnas::primitives::{primitive_param_count, PrimitiveKind, PrimitiveSpec};
use budgetnas::rng::seeded;
use budgetnas::supernet::{derive_genotype, genotype_param_count, AlphaStore};
use budgetnas_ffi::*;

fn last_error() -> String {
    let p = bn_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn derive_through_handles_matches_library() {
    let alphas = AlphaStore::init(&mut seeded(4));
    let json = CString::new(alphas.to_json().unwrap()).unwrap();
    let mut a = ptr::null_mut();
    let mut g = ptr::null_mut();
    unsafe {
        assert_eq!(bn_alphas_from_json(json.as_ptr(), &mut a), BnStatus::Ok);
        assert_eq!(bn_alphas_derive(a, 16, 8, &mut g), BnStatus::Ok);
        let mut out = ptr::null_mut();
        assert_eq!(bn_genotype_to_json(g, &mut out), BnStatus::Ok);
        let want = derive_genotype(&alphas, 16, 8);
        assert_eq!(CStr::from_ptr(out).to_str().unwrap(), want.to_json().unwrap());
        bn_string_free(out);

        let mut n = 0u64;
        assert_eq!(bn_genotype_param_count(g, 8, 16, 10, &mut n), BnStatus::Ok);
        assert_eq!(n, genotype_param_count(&want, 8, 16, 10).unwrap());
        let (mut valid, mut skips) = (false, 0usize);
        assert_eq!(bn_genotype_validity(g, &mut valid, &mut skips), BnStatus::Ok);
        assert_eq!((valid, skips), (want.validity().is_valid(), want.normal_skip_count()));

        assert_eq!(bn_alphas_derive(a, 16, 1, &mut g), BnStatus::Config);
        bn_genotype_free(g);
        bn_alphas_free(a);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut g = ptr::null_mut();
    unsafe {
        assert_eq!(bn_genotype_from_json(ptr::null(), &mut g), BnStatus::NullPointer);
        let bad = CString::new("{\"schema_version\": 1}").unwrap();
        assert_eq!(bn_genotype_from_json(bad.as_ptr(), &mut g), BnStatus::Parse);
        assert!(last_error().contains("JSON"));
        let old = CString::new(r#"{"schema_version":2,"normal":[],"reduce":[],"init_channels":1,"depth":2}"#).unwrap();
        assert_eq!(bn_genotype_from_json(old.as_ptr(), &mut g), BnStatus::Validation);
        assert!(g.is_null());
        let mut n = 0u64;
        let op = CString::new("sep_conv_3x3").unwrap();
        assert_eq!(bn_primitive_param_count(op.as_ptr(), 16, 3, &mut n), BnStatus::Config);
        assert!(last_error().contains("stride"));
        assert_eq!(bn_expected_cost(ptr::null(), ptr::null(), 2, ptr::null_mut(), ptr::null_mut()), BnStatus::NullPointer);
        bn_genotype_free(ptr::null_mut());
        bn_string_free(ptr::null_mut());
    }
}

#[test]
fn cost_and_counts_match_library() {
    let alpha = [0.3, -1.0, 2.0];
    let costs = [10.0, 0.0, 250.0];
    let (mut c, mut grad) = (0.0, [0.0; 3]);
    unsafe {
        assert_eq!(bn_expected_cost(alpha.as_ptr(), costs.as_ptr(), 3, &mut c, grad.as_mut_ptr()), BnStatus::Ok);
        assert_eq!(bn_expected_cost(alpha.as_ptr(), costs.as_ptr(), 0, &mut c, ptr::null_mut()), BnStatus::InvalidInput);
    }
    let p = budgetnas::cost::softmax_f64(&alpha);
    assert_eq!(c, budgetnas::cost::expected_cost(&p, &costs));
    assert_eq!(grad.to_vec(), budgetnas::cost::expected_cost_grad(&p, &costs));
    for kind in PrimitiveKind::ALL {
        let name = CString::new(kind.name()).unwrap();
        let mut n = 0u64;
        unsafe { assert_eq!(bn_primitive_param_count(name.as_ptr(), 36, 2, &mut n), BnStatus::Ok) };
        assert_eq!(n, primitive_param_count(&PrimitiveSpec::new(kind, 36, 2, 32, 32)));
    }
    let mut failures = usize::MAX;
    unsafe { assert_eq!(bn_gradcheck(1, 64, &mut failures), BnStatus::Ok) };
    assert_eq!(failures, 0);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/budgetnas.h")).unwrap();
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .filter_map(|rest| rest.split('(').next())
        .collect();
    assert!(exports.len() >= 12);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_static_library() {
    let lib = target_dir().join("libbudgetnas_ffi.a");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if !lib.exists() || Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = Path::new(env!("CARGO_TARGET_TMPDIR")).join("smoke");
    let status = Command::new(&cc)
        .arg(dir.join("tests/smoke.c"))
        .arg("-I")
        .arg(dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
