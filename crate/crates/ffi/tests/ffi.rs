use std::ffi::{CStr, CString};
use std::ptr;

use rgib_ffi::*;

fn last_error() -> String {
    let p = rgib_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_graph() -> *mut RgibGraph {
    let mut g = ptr::null_mut();
    let s = unsafe { rgib_graph_sbm(10, 2, 0.3, 0.02, 6, 1.0, 3, &mut g) };
    assert_eq!(s, RgibStatus::Ok);
    g
}

fn small_config() -> *mut RgibConfig {
    let json =
        CString::new(r#"{"epochs": 3, "hidden_dim": 8, "embed_dim": 4, "epsilon": 0.01}"#).unwrap();
    let mut c = ptr::null_mut();
    assert_eq!(
        unsafe { rgib_config_from_json(json.as_ptr(), &mut c) },
        RgibStatus::Ok
    );
    c
}

#[test]
fn train_embed_save_load_round_trip() {
    let g = small_graph();
    let c = small_config();
    assert_eq!(unsafe { rgib_graph_num_nodes(g) }, 20);

    let mut m = ptr::null_mut();
    assert_eq!(unsafe { rgib_train(g, c, &mut m) }, RgibStatus::Ok);
    let dim = unsafe { rgib_model_embed_dim(m) };
    assert_eq!(dim, 4);
    let mut obj = f64::NAN;
    assert_eq!(
        unsafe { rgib_model_final_objective(m, &mut obj) },
        RgibStatus::Ok
    );
    assert!(obj.is_finite());

    let mut emb = vec![0.0; 20 * dim];
    assert_eq!(
        unsafe { rgib_model_embed(m, g, emb.as_mut_ptr(), emb.len()) },
        RgibStatus::Ok
    );
    assert!(emb.iter().all(|v| v.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { rgib_model_save(m, path.as_ptr()) }, RgibStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(
        unsafe { rgib_model_load(path.as_ptr(), &mut loaded) },
        RgibStatus::Ok
    );
    let mut again = vec![0.0; emb.len()];
    assert_eq!(
        unsafe { rgib_model_embed(loaded, g, again.as_mut_ptr(), again.len()) },
        RgibStatus::Ok
    );
    assert_eq!(emb, again);

    // A loaded model has no history to report.
    assert_eq!(
        unsafe { rgib_model_final_objective(loaded, &mut obj) },
        RgibStatus::InvalidArgument
    );

    unsafe {
        rgib_model_free(loaded);
        rgib_model_free(m);
        rgib_config_free(c);
        rgib_graph_free(g);
    }
}

#[test]
fn small_buffer_is_rejected() {
    let g = small_graph();
    let c = small_config();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { rgib_train(g, c, &mut m) }, RgibStatus::Ok);
    let mut buf = vec![0.0; 3];
    assert_eq!(
        unsafe { rgib_model_embed(m, g, buf.as_mut_ptr(), buf.len()) },
        RgibStatus::BufferTooSmall
    );
    assert!(last_error().contains("need 80"));
    unsafe {
        rgib_model_free(m);
        rgib_config_free(c);
        rgib_graph_free(g);
    }
}

#[test]
fn config_errors() {
    let mut c = ptr::null_mut();
    let bad = CString::new(r#"{"alpha": 0.5, "unknown_key": 1}"#).unwrap();
    assert_eq!(
        unsafe { rgib_config_from_json(bad.as_ptr(), &mut c) },
        RgibStatus::InvalidConfig
    );
    assert!(last_error().contains("unknown_key"));
    assert!(c.is_null());
    let bad = CString::new(r#"{"alpha": 2.0}"#).unwrap();
    assert_eq!(
        unsafe { rgib_config_from_json(bad.as_ptr(), &mut c) },
        RgibStatus::InvalidConfig
    );
    assert_eq!(unsafe { rgib_config_default(&mut c) }, RgibStatus::Ok);
    unsafe { rgib_config_free(c) };
}

#[test]
fn null_and_missing_inputs() {
    let mut g = ptr::null_mut();
    assert_eq!(
        unsafe { rgib_graph_load(ptr::null(), true, &mut g) },
        RgibStatus::NullPointer
    );
    let missing = CString::new("/definitely/not/here.graph").unwrap();
    assert_eq!(
        unsafe { rgib_graph_load(missing.as_ptr(), true, &mut g) },
        RgibStatus::Data
    );
    assert!(last_error().contains("not/here"));
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { rgib_train(ptr::null(), ptr::null(), &mut m) },
        RgibStatus::NullPointer
    );
    assert_eq!(unsafe { rgib_graph_num_nodes(ptr::null()) }, 0);
    unsafe {
        rgib_graph_free(ptr::null_mut());
        rgib_config_free(ptr::null_mut());
        rgib_model_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/rgib.h");
    for name in [
        "rgib_last_error_message",
        "rgib_graph_load",
        "rgib_graph_sbm",
        "rgib_graph_num_nodes",
        "rgib_graph_num_edges",
        "rgib_graph_free",
        "rgib_config_default",
        "rgib_config_from_json",
        "rgib_config_free",
        "rgib_train",
        "rgib_model_embed_dim",
        "rgib_model_final_objective",
        "rgib_model_embed",
        "rgib_model_save",
        "rgib_model_load",
        "rgib_model_free",
    ] {
        assert!(
            header.contains(&format!("{name}(")),
            "{name} missing from header"
        );
    }
    assert!(header.contains("typedef struct RgibModel RgibModel;"));
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(
        &src,
        "#include \"rgib.h\"\nint main(void) { RgibGraph *g = 0; return rgib_graph_num_nodes(g) == 0 ? 0 : 1; }\n",
    )
    .unwrap();
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let st = std::process::Command::new(cc)
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I", include])
        .arg(&src)
        .status()
        .unwrap();
    assert!(st.success());
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if std::process::Command::new(cc)
            .arg("--version")
            .output()
            .is_ok()
        {
            return Ok(cc);
        }
    }
    Err(())
}
