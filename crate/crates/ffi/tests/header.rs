//! The generated C header must be self-contained valid C.

use std::process::Command;

#[test]
fn generated_header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/fedate.h");
    assert!(std::path::Path::new(header).exists(), "header not generated");
    let dir = tempfile::tempdir().unwrap();
    let main_c = dir.path().join("smoke.c");
    std::fs::write(
        &main_c,
        format!(
            "#include \"{header}\"\nint main(void) {{ return (int)fedate_dataset_len(0); }}\n"
        ),
    )
    .unwrap();
    let out = Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg(&main_c)
        .output()
        .expect("cc not available");
    assert!(
        out.status.success(),
        "header failed to compile: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}
