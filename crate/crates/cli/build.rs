//! Content hash of the algorithm and runner sources, recorded in every run.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

fn collect(dir: &Path, out: &mut Vec<PathBuf>) {
    let Ok(entries) = fs::read_dir(dir) else { return };
    for e in entries.flatten() {
        let p = e.path();
        if p.is_dir() {
            collect(&p, out);
        } else if p.extension().is_some_and(|x| x == "rs") {
            out.push(p);
        }
    }
}

fn main() {
    let here = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").expect("cargo sets this"));
    let crates = here.join("..").canonicalize().expect("workspace crates dir");
    let roots = [crates.join("cli/src"), crates.join("core/src")];
    let mut files = Vec::new();
    for r in &roots {
        println!("cargo:rerun-if-changed={}", r.display());
        collect(r, &mut files);
    }
    let mut keyed: Vec<(String, PathBuf)> = files
        .into_iter()
        .map(|p| {
            let rel = p.strip_prefix(&crates).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            (rel, p)
        })
        .collect();
    keyed.sort();
    let mut h = Sha256::new();
    for (rel, p) in keyed {
        let body = fs::read(&p).expect("readable source");
        // Same framing as a git blob, prefixed by the path.
        h.update(rel.as_bytes());
        h.update(format!("\0blob {}\0", body.len()).as_bytes());
        h.update(&body);
    }
    let d = h.finalize();
    let hex: String = d.iter().map(|b| format!("{b:02x}")).collect();
    println!("cargo:rustc-env=VEIL_CODE_HASH={hex}");
}
