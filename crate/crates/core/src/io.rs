use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, SmithError};

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| SmithError::InvalidInput(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);

    let ctx = || format!("writing {}", path.display());
    let mut f = fs::File::create(&tmp).map_err(|e| SmithError::io(ctx(), e))?;
    f.write_all(bytes).map_err(|e| SmithError::io(ctx(), e))?;
    f.sync_all().map_err(|e| SmithError::io(ctx(), e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| SmithError::io(ctx(), e))
}
