use std::fs;
use std::path::Path;

use anyhow::Context;

use crate::Failure;

/// Makes `dir` ready for output. A non-empty directory is refused unless
/// `force` is set, in which case only the `owned` entries are removed.
pub fn prepare_dir(dir: &Path, force: bool, owned: &[&str]) -> Result<(), Failure> {
    let non_empty = dir.is_dir()
        && fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
    if non_empty {
        if !force {
            return Err(Failure::usage(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        for name in owned {
            let p = dir.join(name);
            if p.is_dir() {
                fs::remove_dir_all(&p).with_context(|| format!("removing {}", p.display()))?;
            } else if p.exists() {
                fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
