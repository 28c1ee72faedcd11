//! Exercises the C ABI from Rust through raw pointers.

use std::ffi::{CStr, CString};
use std::ptr;

use mmcaps_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mmcaps_last_error_message()) }.to_string_lossy().into_owned()
}

const CONFIG: &str = r#"{
    "C": 4, "d1": 4, "d2": 8, "D": 6, "heads": 2, "hidden_mlp": 16, "dropout_p": 0.1,
    "input_dims": {"video": 10, "audio": 8, "text": 6},
    "routing": "self_attention", "routing_iters": 3, "share_weights": true
}"#;

fn new_model() -> *mut MmcapsModel {
    let json = CString::new(CONFIG).unwrap();
    let mut model = ptr::null_mut();
    let status = unsafe { mmcaps_model_new_from_json(json.as_ptr(), 7, &mut model) };
    assert_eq!(status, MmcapsStatus::Ok, "{}", last_error());
    assert!(!model.is_null());
    model
}

#[test]
fn model_lifecycle_and_embedding() {
    let model = new_model();
    unsafe {
        assert_eq!(mmcaps_model_embed_dim(model), 6);
        assert_eq!(mmcaps_model_input_dim(model, MMCAPS_MODALITY_AUDIO), 8);
        assert_eq!(mmcaps_model_input_dim(model, 9), 0);
        assert!(mmcaps_model_param_count(model) > 0);

        let feats: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut out = vec![0.0; 12];
        let s = mmcaps_model_embed(model, MMCAPS_MODALITY_VIDEO, feats.as_ptr(), 2, 10, out.as_mut_ptr(), out.len());
        assert_eq!(s, MmcapsStatus::Ok, "{}", last_error());
        assert!(out.iter().all(|v| v.is_finite()) && out.iter().any(|&v| v != 0.0));

        // Same input, same output: evaluation is deterministic.
        let mut again = vec![0.0; 12];
        mmcaps_model_embed(model, MMCAPS_MODALITY_VIDEO, feats.as_ptr(), 2, 10, again.as_mut_ptr(), again.len());
        assert_eq!(out, again);

        let s = mmcaps_model_embed(model, MMCAPS_MODALITY_TEXT, feats.as_ptr(), 2, 10, out.as_mut_ptr(), out.len());
        assert_eq!(s, MmcapsStatus::ShapeMismatch);
        assert!(!last_error().is_empty());
        let s = mmcaps_model_embed(model, MMCAPS_MODALITY_VIDEO, feats.as_ptr(), 2, 10, out.as_mut_ptr(), 5);
        assert_eq!(s, MmcapsStatus::ShapeMismatch);
        let s = mmcaps_model_embed(model, 3, feats.as_ptr(), 2, 10, out.as_mut_ptr(), out.len());
        assert_eq!(s, MmcapsStatus::InvalidArgument);
        mmcaps_model_free(model);
        mmcaps_model_free(ptr::null_mut());
    }
}

#[test]
fn invalid_configs_and_null_pointers() {
    let mut model = ptr::null_mut();
    unsafe {
        let bad = CString::new(r#"{"C": 4}"#).unwrap();
        assert_eq!(mmcaps_model_new_from_json(bad.as_ptr(), 0, &mut model), MmcapsStatus::InvalidArgument);
        assert!(model.is_null());
        let heads = CString::new(CONFIG.replace(r#""heads": 2"#, r#""heads": 3"#)).unwrap();
        assert_eq!(mmcaps_model_new_from_json(heads.as_ptr(), 0, &mut model), MmcapsStatus::InvalidArgument);
        assert!(last_error().contains("heads"), "{}", last_error());
        assert_eq!(mmcaps_model_new_from_json(ptr::null(), 0, &mut model), MmcapsStatus::NullPointer);
        assert_eq!(mmcaps_model_embed(ptr::null(), 0, ptr::null(), 0, 0, ptr::null_mut(), 0), MmcapsStatus::NullPointer);
        assert_eq!(mmcaps_model_embed_dim(ptr::null()), 0);
        let missing = CString::new("/nonexistent/model.mmck").unwrap();
        assert_eq!(mmcaps_model_load_checkpoint(missing.as_ptr(), &mut model), MmcapsStatus::Io);
    }
}

#[test]
fn checkpoint_loading_matches_the_trainer() {
    use mmcaps::data::{generate_synthetic, SyntheticSpec};
    use mmcaps::model::{InputDims, Modality, ModelConfig};
    use mmcaps::train::{TrainConfig, Trainer};

    let dims = InputDims { video: 10, audio: 8, text: 6 };
    let spec = SyntheticSpec { n_train: 16, n_test: 4, dims, ..SyntheticSpec::default() };
    let (train, _) = generate_synthetic(&spec).unwrap();
    let model_config: ModelConfig = serde_json::from_str(CONFIG).unwrap();
    let cfg = TrainConfig { total_steps: 2, batch_size: 4, ..TrainConfig::desk() };
    let mut trainer = Trainer::new(model_config, cfg).unwrap();
    trainer.run(&train, |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mmck");
    trainer.save(&path).unwrap();

    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(mmcaps_model_load_checkpoint(c_path.as_ptr(), &mut model), MmcapsStatus::Ok, "{}", last_error());
        let mut out = vec![0.0; 6];
        let text = train.text.row(0);
        mmcaps_model_embed(model, MMCAPS_MODALITY_TEXT, text.as_ptr(), 1, 6, out.as_mut_ptr(), 6);
        let expected = trainer.model.embed(&mmcaps::Tensor2D::row_vector(text), Modality::Text).unwrap();
        assert_eq!(out, expected.data());
        mmcaps_model_free(model);
    }
    std::fs::write(&path, b"MMCKgarbage").unwrap();
    unsafe {
        assert_eq!(mmcaps_model_load_checkpoint(c_path.as_ptr(), &mut model), MmcapsStatus::Format);
    }
}

#[test]
fn metric_and_loss_entry_points() {
    let q = [0.0, 0.0, 1.0, 1.0, 5.0, 5.0];
    let mut r = MmcapsRetrieval::default();
    unsafe {
        assert_eq!(mmcaps_retrieval_metrics(q.as_ptr(), q.as_ptr(), 3, 2, MMCAPS_METRIC_EUCLIDEAN, &mut r), MmcapsStatus::Ok);
        assert_eq!((r.r1, r.medr), (1.0, 1.0));
        assert_eq!(mmcaps_retrieval_metrics(q.as_ptr(), q.as_ptr(), 0, 2, 0, &mut r), MmcapsStatus::InvalidArgument);
        assert_eq!(mmcaps_retrieval_metrics(q.as_ptr(), q.as_ptr(), 3, 2, 5, &mut r), MmcapsStatus::InvalidArgument);

        let mut loss = f64::NAN;
        assert_eq!(mmcaps_mms_pair_loss([3.0].as_ptr(), 1, 0.001, &mut loss), MmcapsStatus::Ok);
        assert_eq!(loss, 0.0);
        let identity = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(mmcaps_mms_pair_loss(identity.as_ptr(), 2, 0.0, &mut loss), MmcapsStatus::Ok);
        let e = std::f64::consts::E;
        assert!((loss - (-2.0 * (e / (e + 1.0)).ln())).abs() < 1e-10, "{loss}");
        assert_eq!(mmcaps_mms_pair_loss(identity.as_ptr(), 2, 0.0, ptr::null_mut()), MmcapsStatus::NullPointer);
    }
}
