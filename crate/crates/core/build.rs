use std::process::Command;

fn main() {
    // embed `git describe` for run manifests; fall back to the crate version
    let describe = Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")));
    println!("cargo:rustc-env=MVLAB_GIT_DESCRIBE={describe}");
    println!("cargo:rerun-if-changed=build.rs");
}
