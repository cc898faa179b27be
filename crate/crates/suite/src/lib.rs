//! Helpers shared by the acceptance target.

use std::env;
use std::path::PathBuf;

/// Path of the `dmps` binary built next to the running test executable.
///
/// Test executables live in `target/<profile>/deps`, binaries one level up.
/// `DMPS_BIN` overrides the lookup.
pub fn dmps_binary() -> PathBuf {
    if let Some(path) = env::var_os("DMPS_BIN") {
        return PathBuf::from(path);
    }
    let exe = env::current_exe().expect("test executable path");
    let dir = exe.parent().and_then(|deps| deps.parent()).expect("target directory");
    dir.join(format!("dmps{}", env::consts::EXE_SUFFIX))
}
