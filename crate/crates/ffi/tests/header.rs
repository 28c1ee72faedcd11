//! The generated header declares the whole API and compiles as C.

use std::path::Path;
use std::process::Command;

fn header() -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mmcaps.h")).expect("header generated by build.rs")
}

#[test]
fn header_declares_every_entry_point() {
    let h = header();
    for name in [
        "mmcaps_last_error_message",
        "mmcaps_model_new_from_json",
        "mmcaps_model_load_checkpoint",
        "mmcaps_model_embed",
        "mmcaps_model_embed_dim",
        "mmcaps_model_input_dim",
        "mmcaps_model_param_count",
        "mmcaps_model_free",
        "mmcaps_retrieval_metrics",
        "mmcaps_mms_pair_loss",
        "typedef struct MmcapsModel MmcapsModel",
        "MMCAPS_STATUS_PANIC = 7",
    ] {
        assert!(h.contains(name), "missing {name}");
    }
}

#[test]
fn demo_program_compiles_against_the_header() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let Ok(status) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Wextra", "-Werror", "-fsyntax-only", "-I"])
        .arg(dir.join("include"))
        .arg(dir.join("examples/demo.c"))
        .status()
    else {
        eprintln!("no C compiler on PATH; skipped");
        return;
    };
    assert!(status.success());
}
