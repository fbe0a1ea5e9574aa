use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use danet::attractor::{AttractorSet, MaskHead};
use danet::data::{generate_record, DatasetConfig, Split};
use danet::infer::AttractorCodebook;
use danet::net::{init_params, save_checkpoint, Model, NetConfig, OutputActivation};
use danet::signal::NormStats;
use danet_ffi::*;

fn write_model(dir: &Path) -> CString {
    let cfg = NetConfig {
        n_layers: 1,
        hidden: 6,
        embed_dim: 3,
        n_freq: 129,
        activation: OutputActivation::Tanh,
    };
    let model = Model {
        cfg,
        params: init_params(&cfg, 1).unwrap(),
        stats: NormStats {
            mean: vec![-4.0; 129],
            std: vec![2.0; 129],
        },
        head: MaskHead::Sigmoid,
        threshold_pct: 0,
    };
    let path = dir.join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(danet_last_error()) }.to_string_lossy().into_owned()
}

fn mixture() -> (Vec<f64>, Vec<Vec<f64>>) {
    let cfg = DatasetConfig {
        duration_s: 0.5,
        ..DatasetConfig::with_mixtures(5, 2, 100, 3, (0.0, 5.0))
    };
    let (rec, _) = generate_record(&cfg, Split::Test, 0).unwrap();
    (rec.mixture.samples, rec.sources.into_iter().map(|s| s.samples).collect())
}

#[test]
fn load_separate_and_copy_out() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_model(dir.path());
    let (mix, refs) = mixture();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(danet_model_load(path.as_ptr(), &mut model), DanetStatus::Ok);
        assert!(!model.is_null());

        let mut info = DanetModelInfo::default();
        assert_eq!(danet_model_info(model, &mut info), DanetStatus::Ok);
        assert_eq!((info.n_layers, info.hidden, info.embed_dim, info.n_freq), (1, 6, 3, 129));
        assert_eq!(info.head, DanetMaskHead::Sigmoid);

        for strategy in [DanetStrategy::Kmeans, DanetStrategy::Oracle] {
            let ref_ptrs: Vec<*const f64> = refs.iter().map(|r| r.as_ptr()).collect();
            let refs_arg = if strategy == DanetStrategy::Oracle { ref_ptrs.as_ptr() } else { ptr::null() };
            let mut sep = ptr::null_mut();
            let st = danet_separate(model, mix.as_ptr(), mix.len(), 8000, 2, strategy, ptr::null(), refs_arg, 0, &mut sep);
            assert_eq!(st, DanetStatus::Ok, "{}", last_error());
            assert_eq!(danet_separation_n_sources(sep), 2);
            assert_eq!(danet_separation_len(sep), mix.len());
            assert_eq!(danet_separation_embed_dim(sep), 3);

            let mut buf = vec![0.0; mix.len()];
            assert_eq!(danet_separation_source(sep, 1, buf.as_mut_ptr(), buf.len()), DanetStatus::Ok);
            assert!(buf.iter().any(|&x| x != 0.0));
            assert_eq!(danet_separation_source(sep, 2, buf.as_mut_ptr(), buf.len()), DanetStatus::InvalidArgument);
            assert_eq!(danet_separation_source(sep, 0, buf.as_mut_ptr(), 10), DanetStatus::BufferTooSmall);
            assert!(last_error().contains("buffer"));

            let mut att = [0.0; 6];
            assert_eq!(danet_separation_attractors(sep, att.as_mut_ptr(), 6), DanetStatus::Ok);
            assert!(att.iter().all(|x| x.is_finite()));
            danet_separation_free(sep);
        }
        danet_model_free(model);
    }
}

#[test]
fn fixed_strategy_with_codebook() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_model(dir.path());
    let cb_path = dir.path().join("cb.bin");
    let a = ndarray::arr2(&[[0.5, -0.5, 0.1], [-0.5, 0.5, 0.0]]);
    AttractorCodebook::new(vec![AttractorSet { a }], Default::default())
        .unwrap()
        .save(&cb_path)
        .unwrap();
    let cb_c = CString::new(cb_path.to_str().unwrap()).unwrap();
    let (mix, _) = mixture();
    unsafe {
        let mut model = ptr::null_mut();
        let mut cb = ptr::null_mut();
        assert_eq!(danet_model_load(path.as_ptr(), &mut model), DanetStatus::Ok);
        assert_eq!(danet_codebook_load(cb_c.as_ptr(), &mut cb), DanetStatus::Ok);
        let mut sep = ptr::null_mut();
        let st = danet_separate(model, mix.as_ptr(), mix.len(), 8000, 2, DanetStrategy::Fixed, ptr::null(), ptr::null(), 0, &mut sep);
        assert_eq!(st, DanetStatus::InvalidArgument);
        assert!(last_error().contains("codebook"));
        assert!(sep.is_null());
        let st = danet_separate(model, mix.as_ptr(), mix.len(), 8000, 2, DanetStrategy::Fixed, cb, ptr::null(), 0, &mut sep);
        assert_eq!(st, DanetStatus::Ok, "{}", last_error());
        let mut att = [0.0; 6];
        danet_separation_attractors(sep, att.as_mut_ptr(), 6);
        assert!((att[0] - 0.5).abs() < 1e-6 && (att[3] + 0.5).abs() < 1e-6);
        danet_separation_free(sep);
        danet_codebook_free(cb);
        danet_model_free(model);
    }
}

#[test]
fn error_codes() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(danet_model_load(ptr::null(), &mut model), DanetStatus::NullPointer);
        let missing = CString::new(dir.path().join("nope.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(danet_model_load(missing.as_ptr(), &mut model), DanetStatus::Io);
        assert!(model.is_null());
        assert!(!last_error().is_empty());

        let junk = dir.path().join("junk.ckpt");
        std::fs::write(&junk, b"not a checkpoint at all").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(danet_model_load(junk.as_ptr(), &mut model), DanetStatus::Format);

        let path = write_model(dir.path());
        assert_eq!(danet_model_load(path.as_ptr(), &mut model), DanetStatus::Ok);
        assert!(last_error().is_empty());
        let silent = vec![0.0; 4000];
        let mut sep = ptr::null_mut();
        let st = danet_separate(model, silent.as_ptr(), silent.len(), 8000, 2, DanetStrategy::Kmeans, ptr::null(), ptr::null(), 0, &mut sep);
        assert_eq!(st, DanetStatus::InvalidArgument);
        assert!(last_error().contains("silent"));
        let st = danet_separate(ptr::null(), silent.as_ptr(), 10, 8000, 2, DanetStrategy::Kmeans, ptr::null(), ptr::null(), 0, &mut sep);
        assert_eq!(st, DanetStatus::NullPointer);
        danet_model_free(model);

        // freeing null is a no-op
        danet_model_free(ptr::null_mut());
        danet_separation_free(ptr::null_mut());
        danet_codebook_free(ptr::null_mut());
        assert_eq!(danet_separation_n_sources(ptr::null()), 0);
    }
}

#[test]
fn si_snr_through_the_abi() {
    let r: Vec<f64> = (0..800).map(|i| (i as f64 * 0.05).sin()).collect();
    let e: Vec<f64> = r.iter().map(|x| 2.0 * x).collect();
    let mut db = 0.0;
    unsafe {
        assert_eq!(danet_si_snr(e.as_ptr(), r.as_ptr(), r.len(), &mut db), DanetStatus::Ok);
        assert_eq!(db, 120.0);
        let zeros = vec![0.0; 800];
        assert_eq!(danet_si_snr(e.as_ptr(), zeros.as_ptr(), 800, &mut db), DanetStatus::InvalidArgument);
        assert!(CStr::from_ptr(danet_version()).to_str().unwrap().starts_with("0."));
    }
}

#[test]
fn header_is_generated_and_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/danet.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "danet_model_load",
        "danet_separate",
        "danet_separation_source",
        "danet_last_error",
        "typedef struct DanetModel DanetModel",
        "DANET_STATUS_OK = 0",
        "DANET_STRATEGY_ORACLE",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    // compile a consumer when a C compiler is around
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"danet.h\"\nint main(void) {\n  DanetModel *m = 0;\n  DanetStatus s = danet_model_load(\"x\", &m);\n  danet_model_free(m);\n  return s == DANET_STATUS_OK;\n}\n",
    )
    .unwrap();
    let status = Command::new(cc)
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc);
        }
    }
    Err(())
}
