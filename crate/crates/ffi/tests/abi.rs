use std::ffi::{c_char, CString};
use std::ptr;

use cycinv_ffi::*;

fn last_error() -> String {
    let n = cycinv_last_error_length();
    let mut buf = vec![0 as c_char; n + 1];
    let w = unsafe { cycinv_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..w].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

#[test]
fn dataset_roundtrip_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("d.bin").to_str().unwrap()).unwrap();
    let mut ds = ptr::null_mut();
    unsafe {
        assert_eq!(cycinv_dataset_generate(12, 4, 32, 9, &mut ds), CycinvStatus::Ok);
        let (mut len, mut side, mut classes) = (0, 0, 0);
        assert_eq!(cycinv_dataset_info(ds, &mut len, &mut side, &mut classes), CycinvStatus::Ok);
        assert_eq!((len, side, classes), (12, 32, 4));
        assert_eq!(cycinv_dataset_save(ds, path.as_ptr()), CycinvStatus::Ok);

        let mut back = ptr::null_mut();
        assert_eq!(cycinv_dataset_load(path.as_ptr(), &mut back), CycinvStatus::Ok);
        let mut a = vec![0f32; 1024];
        let mut b = vec![0f32; 1024];
        let (mut la, mut lb) = (0u32, 0u32);
        for i in 0..12 {
            assert_eq!(cycinv_dataset_record(ds, i, a.as_mut_ptr(), a.len(), &mut la), CycinvStatus::Ok);
            assert_eq!(cycinv_dataset_record(back, i, b.as_mut_ptr(), b.len(), &mut lb), CycinvStatus::Ok);
            assert_eq!(a, b);
            assert_eq!(la, lb);
            assert!(la < 4);
        }
        assert_eq!(cycinv_dataset_record(ds, 12, a.as_mut_ptr(), a.len(), ptr::null_mut()), CycinvStatus::Index);
        assert_eq!(cycinv_dataset_record(ds, 0, a.as_mut_ptr(), 10, ptr::null_mut()), CycinvStatus::Shape);
        cycinv_dataset_free(back);
        cycinv_dataset_free(ds);
    }
}

#[test]
fn errors_are_reported_with_codes_and_messages() {
    let mut ds = ptr::null_mut();
    unsafe {
        assert_eq!(cycinv_dataset_generate(10, 4, 32, 1, ptr::null_mut()), CycinvStatus::NullPointer);
        assert!(last_error().contains("out"));
        let st = cycinv_dataset_generate(401, 4, 32, 1, &mut ds);
        assert_ne!(st, CycinvStatus::Ok);
        assert!(ds.is_null());
        assert!(!last_error().is_empty());
        let missing = CString::new("/nonexistent/dir/none.bin").unwrap();
        assert_eq!(cycinv_dataset_load(missing.as_ptr(), &mut ds), CycinvStatus::Io);
        assert_eq!(cycinv_dataset_load(ptr::null(), &mut ds), CycinvStatus::NullPointer);
        let mut m = ptr::null_mut();
        assert_eq!(cycinv_model_load_checkpoint(missing.as_ptr(), &mut m), CycinvStatus::Io);
        assert_eq!(cycinv_model_info(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()), CycinvStatus::NullPointer);
        cycinv_dataset_free(ptr::null_mut());
        cycinv_model_free(ptr::null_mut());
    }
}

#[test]
fn truncated_error_message_is_terminated() {
    unsafe {
        cycinv_dataset_generate(10, 4, 32, 1, ptr::null_mut());
        let mut buf = [1 as c_char; 4];
        assert_eq!(cycinv_last_error_message(buf.as_mut_ptr(), 4), 3);
        assert_eq!(buf[3], 0);
    }
}

#[test]
fn model_from_checkpoint_encodes_and_generates() {
    use cycinv::config::TrainConfig;
    use cycinv::data::generate_dataset;
    use cycinv::train::{save_checkpoint, train};

    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        hidden: vec![16],
        d_z: 3,
        ..TrainConfig::default()
    };
    let data = generate_dataset(16, 4, 32, 3).unwrap();
    let (ck, _) = train(&data, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.cyck");
    save_checkpoint(&p, &ck).unwrap();
    let path = CString::new(p.to_str().unwrap()).unwrap();

    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(cycinv_model_load_checkpoint(path.as_ptr(), &mut m), CycinvStatus::Ok);
        let (mut side, mut dz, mut ns) = (0, 0, 0);
        assert_eq!(cycinv_model_info(m, &mut side, &mut dz, &mut ns), CycinvStatus::Ok);
        assert_eq!((side, dz, ns), (32, 3, 4));

        let img: Vec<f32> = data.samples[..2].iter().flat_map(|s| s.image.iter().copied()).collect();
        let mut z = vec![0f32; 6];
        assert_eq!(cycinv_model_encode(m, img.as_ptr(), 2, z.as_mut_ptr(), z.len()), CycinvStatus::Ok);
        let mut z2 = vec![0f32; 6];
        cycinv_model_encode(m, img.as_ptr(), 2, z2.as_mut_ptr(), z2.len());
        assert_eq!(z, z2);
        assert!(z.iter().all(|v| v.is_finite()));

        let labels = [1u32, 3];
        let mut out = vec![0f32; 2048];
        assert_eq!(cycinv_model_generate(m, img.as_ptr(), labels.as_ptr(), 2, out.as_mut_ptr(), out.len()), CycinvStatus::Ok);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        let bad = [4u32, 0];
        assert_ne!(cycinv_model_generate(m, img.as_ptr(), bad.as_ptr(), 2, out.as_mut_ptr(), out.len()), CycinvStatus::Ok);

        let mut a = vec![0f32; 3 * 1024];
        let mut b = vec![0f32; 3 * 1024];
        assert_eq!(cycinv_model_sample_prior(m, 2, 3, 11, a.as_mut_ptr(), a.len()), CycinvStatus::Ok);
        cycinv_model_sample_prior(m, 2, 3, 11, b.as_mut_ptr(), b.len());
        assert_eq!(a, b);
        cycinv_model_free(m);
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { std::ffi::CStr::from_ptr(cycinv_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/cycinv.h")).unwrap();
    for f in [
        "cycinv_version",
        "cycinv_last_error_length",
        "cycinv_last_error_message",
        "cycinv_dataset_generate",
        "cycinv_dataset_load",
        "cycinv_dataset_save",
        "cycinv_dataset_info",
        "cycinv_dataset_record",
        "cycinv_dataset_free",
        "cycinv_model_load_checkpoint",
        "cycinv_model_load_weights",
        "cycinv_model_info",
        "cycinv_model_encode",
        "cycinv_model_generate",
        "cycinv_model_sample_prior",
        "cycinv_model_free",
        "cycinv_selfcheck",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("CYCINV_STATUS_OK = 0"));
    assert!(header.contains("typedef struct CycinvModel CycinvModel"));
}
