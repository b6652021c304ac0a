//! Exercises the C entry points the way a foreign caller would: through
//! raw pointers and status codes, with results checked bitwise against the
//! native API.

use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use tsdf_capi::TsdfStatus::*;
use tsdf_capi::*;
use tsdf_core::aggregator::{AggregatorConfig, AggregatorModel};
use tsdf_core::checkpoint::{save_aggregator, save_encoder};
use tsdf_core::data::{EmbeddingStore, Image};
use tsdf_core::harness::preprocessed_tensor;
use tsdf_core::mae::{EncoderModel, MAEConfig};
use tsdf_core::tensor::Tensor;

fn c_path(path: &Path) -> CString {
    CString::new(path.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(tsdf_last_error_message()) }.to_str().unwrap().to_string()
}

fn small_encoder() -> EncoderModel<f32> {
    let cfg = MAEConfig {
        image_size: 16,
        patch_size: 8,
        channels: 1,
        mask_ratio: 0.75,
        encoder_dim: 12,
        encoder_layers: 1,
        encoder_heads: 2,
        decoder_dim: 8,
        decoder_layers: 1,
        norm_masked_patches: false,
    };
    EncoderModel::init(cfg, 5).unwrap()
}

#[test]
fn encoder_embedding_matches_native_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.ckpt");
    let native = small_encoder();
    save_encoder(&path, &native).unwrap();

    let mut handle: *mut TsdfEncoder = ptr::null_mut();
    unsafe {
        assert_eq!(tsdf_encoder_load(c_path(&path).as_ptr(), &mut handle), TSDF_OK);
        assert!(!handle.is_null());

        let mut dim = 0usize;
        assert_eq!(tsdf_encoder_dim(handle, &mut dim), TSDF_OK);
        assert_eq!(dim, 12);
        let mut side = 0usize;
        assert_eq!(tsdf_encoder_image_size(handle, &mut side), TSDF_OK);
        assert_eq!(side, 16);

        // a 20x24 gradient, deliberately not the encoder's input size
        let (h, w) = (20usize, 24usize);
        let pixels: Vec<f32> = (0..h * w).map(|i| (i % 97) as f32 / 96.0).collect();
        let mut got = vec![0.0f32; dim];
        assert_eq!(
            tsdf_encoder_embed(handle, pixels.as_ptr(), h, w, got.as_mut_ptr(), got.len()),
            TSDF_OK
        );

        let image = Image::new(h, w, pixels).unwrap();
        let tensor = preprocessed_tensor(&image, side).unwrap();
        let want = native.extract_embedding(&tensor).unwrap();
        assert_eq!(want.data().len(), dim);
        for (a, b) in want.data().iter().zip(&got) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        // undersized output buffer is refused before anything is written
        let mut short = vec![0.0f32; dim - 1];
        let pixels2 = vec![0.5f32; h * w];
        assert_eq!(
            tsdf_encoder_embed(handle, pixels2.as_ptr(), h, w, short.as_mut_ptr(), short.len()),
            TSDF_ERR_ARGUMENT
        );
        assert!(last_error().contains("embedding needs 12"), "{}", last_error());

        tsdf_encoder_free(handle);
    }
}

#[test]
fn aggregator_prediction_matches_native_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("agg.ckpt");
    let native = AggregatorModel::<f32>::init(AggregatorConfig::for_dim(10), 9).unwrap();
    save_aggregator(&path, &native).unwrap();

    let mut handle: *mut TsdfAggregator = ptr::null_mut();
    unsafe {
        assert_eq!(tsdf_aggregator_load(c_path(&path).as_ptr(), &mut handle), TSDF_OK);
        let mut dim = 0usize;
        assert_eq!(tsdf_aggregator_dim(handle, &mut dim), TSDF_OK);
        assert_eq!(dim, 10);

        let frames: Vec<f32> = (0..4 * dim).map(|i| ((i * 31 % 17) as f32 - 8.0) / 8.0).collect();
        let mut class = u32::MAX;
        let mut prob = f64::NAN;
        assert_eq!(
            tsdf_aggregator_predict(handle, frames.as_ptr(), 4, dim, &mut class, &mut prob),
            TSDF_OK
        );
        let tensor = Tensor::new(vec![4, dim], frames).unwrap();
        let (want_class, want_prob) = native.predict(&tensor).unwrap();
        assert_eq!(class, want_class as u32);
        assert_eq!(prob.to_bits(), want_prob.to_bits());

        // mismatched frame dimension and empty sequences are argument errors
        let junk = [0.0f32; 8];
        assert_eq!(
            tsdf_aggregator_predict(handle, junk.as_ptr(), 1, 8, &mut class, &mut prob),
            TSDF_ERR_ARGUMENT
        );
        assert!(last_error().contains("does not match"), "{}", last_error());
        assert_eq!(
            tsdf_aggregator_predict(handle, junk.as_ptr(), 0, dim, &mut class, &mut prob),
            TSDF_ERR_ARGUMENT
        );

        tsdf_aggregator_free(handle);
    }
}

#[test]
fn store_access_matches_native_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.bin");
    let mut native = EmbeddingStore::new(3).unwrap();
    native.insert("p0007_L_v00", vec![0.25, -1.5, 3.0]).unwrap();
    native.insert("p0007_L_v01", vec![0.5, 2.5, -0.125]).unwrap();
    native.insert("p0012_R_v00", vec![-9.0, 0.0, 1.0]).unwrap();
    native.write(&path).unwrap();

    let mut handle: *mut TsdfStore = ptr::null_mut();
    unsafe {
        assert_eq!(tsdf_store_open(c_path(&path).as_ptr(), &mut handle), TSDF_OK);
        let (mut len, mut dim) = (0usize, 0usize);
        assert_eq!(tsdf_store_len(handle, &mut len), TSDF_OK);
        assert_eq!(tsdf_store_dim(handle, &mut dim), TSDF_OK);
        assert_eq!((len, dim), (3, 3));

        let mut out = vec![0.0f32; dim];
        let id = CString::new("p0007_L_v01").unwrap();
        assert_eq!(tsdf_store_get(handle, id.as_ptr(), out.as_mut_ptr(), out.len()), TSDF_OK);
        for (a, b) in native.get("p0007_L_v01").unwrap().iter().zip(&out) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        let missing = CString::new("p9999_L_v00").unwrap();
        assert_eq!(
            tsdf_store_get(handle, missing.as_ptr(), out.as_mut_ptr(), out.len()),
            TSDF_ERR_DATA
        );
        assert!(last_error().contains("p9999_L_v00"), "{}", last_error());

        // ids enumerate in sorted order through the buffer protocol
        let native_ids: Vec<&str> = native.ids().collect();
        for (i, want) in native_ids.iter().enumerate() {
            let mut got_len = 0usize;
            let mut buf = vec![0i8; 64];
            assert_eq!(
                tsdf_store_id_at(handle, i, buf.as_mut_ptr() as *mut _, buf.len(), &mut got_len),
                TSDF_OK
            );
            assert_eq!(got_len, want.len());
            let got = CStr::from_ptr(buf.as_ptr() as *const _).to_str().unwrap();
            assert_eq!(&got, want);
        }

        // a too-small buffer reports the required length without writing
        let mut needed = 0usize;
        let mut tiny = [0i8; 2];
        assert_eq!(
            tsdf_store_id_at(handle, 0, tiny.as_mut_ptr() as *mut _, tiny.len(), &mut needed),
            TSDF_ERR_ARGUMENT
        );
        assert_eq!(needed, native_ids[0].len());
        let mut ignored = 0usize;
        assert_eq!(
            tsdf_store_id_at(handle, 99, ptr::null_mut(), 0, &mut ignored),
            TSDF_ERR_ARGUMENT
        );

        tsdf_store_free(handle);
    }
}

#[test]
fn failures_set_status_and_message() {
    unsafe {
        // missing file
        let mut enc: *mut TsdfEncoder = ptr::null_mut();
        let bogus = CString::new("/nonexistent/enc.ckpt").unwrap();
        assert_eq!(tsdf_encoder_load(bogus.as_ptr(), &mut enc), TSDF_ERR_DATA);
        assert!(enc.is_null());
        assert!(!last_error().is_empty());

        // null arguments never crash
        assert_eq!(tsdf_encoder_load(ptr::null(), &mut enc), TSDF_ERR_ARGUMENT);
        assert_eq!(tsdf_encoder_load(bogus.as_ptr(), ptr::null_mut()), TSDF_ERR_ARGUMENT);
        let mut dim = 0usize;
        assert_eq!(tsdf_encoder_dim(ptr::null(), &mut dim), TSDF_ERR_ARGUMENT);
        tsdf_encoder_free(ptr::null_mut());
        tsdf_aggregator_free(ptr::null_mut());
        tsdf_store_free(ptr::null_mut());

        // checkpoint kinds do not cross over
        let dir = tempfile::tempdir().unwrap();
        let enc_path = dir.path().join("enc.ckpt");
        save_encoder(&enc_path, &small_encoder()).unwrap();
        let mut agg: *mut TsdfAggregator = ptr::null_mut();
        assert_eq!(tsdf_aggregator_load(c_path(&enc_path).as_ptr(), &mut agg), TSDF_ERR_DATA);
        assert!(last_error().contains("encoder"), "{}", last_error());

        // corrupted header
        let mut bytes = std::fs::read(&enc_path).unwrap();
        bytes[0] ^= 0xFF;
        let bad_path = dir.path().join("bad.ckpt");
        std::fs::write(&bad_path, bytes).unwrap();
        assert_eq!(tsdf_encoder_load(c_path(&bad_path).as_ptr(), &mut enc), TSDF_ERR_DATA);
        assert!(last_error().contains("magic"), "{}", last_error());
    }
}

#[test]
fn version_is_a_static_string() {
    let v = unsafe { CStr::from_ptr(tsdf_version()) }.to_str().unwrap();
    assert!(v.split('.').count() >= 3, "unexpected version {v}");
}

#[test]
fn generated_header_covers_the_surface() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/tsdf.h");
    let text = std::fs::read_to_string(&header).expect("header is generated at build time");
    for symbol in [
        "tsdf_status",
        "tsdf_last_error_message",
        "tsdf_version",
        "tsdf_encoder_load",
        "tsdf_encoder_embed",
        "tsdf_encoder_free",
        "tsdf_aggregator_load",
        "tsdf_aggregator_predict",
        "tsdf_aggregator_free",
        "tsdf_store_open",
        "tsdf_store_get",
        "tsdf_store_id_at",
        "tsdf_store_free",
    ] {
        assert!(text.contains(symbol), "header is missing {symbol}");
    }
}

#[test]
fn header_compiles_as_c99() {
    let cc = match ["cc", "gcc", "clang"]
        .iter()
        .find(|cc| std::process::Command::new(cc).arg("--version").output().is_ok())
    {
        Some(cc) => *cc,
        None => {
            eprintln!("no C compiler on PATH; skipping header syntax check");
            return;
        }
    };
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let probe = dir.path().join("probe.c");
    std::fs::write(
        &probe,
        "#include \"tsdf.h\"\n\
         int main(void) {\n\
             tsdf_encoder *enc = 0;\n\
             tsdf_status st = tsdf_encoder_load(\"missing.ckpt\", &enc);\n\
             (void)st;\n\
             tsdf_encoder_free(enc);\n\
             return tsdf_last_error_message() == 0;\n\
         }\n",
    )
    .unwrap();
    let output = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&probe)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "header failed C99 compilation:\n{}",
        String::from_utf8_lossy(&output.stderr)
    );
}
