use std::env;
use std::fs;
use std::path::PathBuf;

// Regenerates include/gazelab.h from the extern "C" surface. The file is
// committed so C consumers can read it without building; the copy below only
// touches it when the content actually changed.
fn main() {
    let crate_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").unwrap());
    let out_path = PathBuf::from(env::var("OUT_DIR").unwrap()).join("gazelab.h");
    let bindings = cbindgen::generate(&crate_dir).expect("cbindgen failed");
    bindings.write_to_file(&out_path);

    let committed = crate_dir.join("include").join("gazelab.h");
    let fresh = fs::read(&out_path).unwrap();
    if fs::read(&committed).ok().as_deref() != Some(fresh.as_slice()) {
        fs::create_dir_all(committed.parent().unwrap()).unwrap();
        fs::write(&committed, fresh).unwrap();
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
}
