//! Compiles tests/smoke.c against the generated header and the built
//! shared library, then runs it. Skips cleanly when no C compiler exists.

use std::env;
use std::path::PathBuf;
use std::process::Command;

fn target_dir() -> PathBuf {
    // target/debug/deps/<test-bin> -> target/debug
    let exe = env::current_exe().expect("test binary path");
    exe.parent()
        .and_then(|deps| deps.parent())
        .expect("target profile dir")
        .to_path_buf()
}

fn find_cc() -> Option<&'static str> {
    for cand in ["cc", "gcc", "clang"] {
        if Command::new(cand)
            .arg("--version")
            .output()
            .map(|o| o.status.success())
            .unwrap_or(false)
        {
            return Some(cand);
        }
    }
    None
}

#[test]
fn c_program_links_and_runs() {
    let Some(cc) = find_cc() else {
        eprintln!("skipping: no C compiler on PATH");
        return;
    };
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let lib_dir = target_dir();
    let lib = lib_dir.join(if cfg!(target_os = "macos") {
        "libgazelab_capi.dylib"
    } else {
        "libgazelab_capi.so"
    });
    assert!(lib.exists(), "shared library not built at {}", lib.display());

    let out = lib_dir.join("gazelab_c_smoke");
    let compile = Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Wextra")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(crate_dir.join("tests/smoke.c"))
        .arg("-L")
        .arg(&lib_dir)
        .arg("-lgazelab_capi")
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .arg("-o")
        .arg(&out)
        .output()
        .expect("run compiler");
    assert!(
        compile.status.success(),
        "compile failed:\n{}",
        String::from_utf8_lossy(&compile.stderr)
    );

    let run = Command::new(&out).output().expect("run smoke binary");
    assert!(
        run.status.success(),
        "smoke binary failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&run.stdout),
        String::from_utf8_lossy(&run.stderr)
    );
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
