use std::path::{Path, PathBuf};
use std::process::Command;

/// Early-return an `Err` from an `Outcome` function.
#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn updating_golden() -> bool {
    std::env::var_os("UPDATE_GOLDEN").is_some_and(|v| !v.is_empty() && v != "0")
}

/// Compare `actual` with the golden file `name`, or rewrite it under
/// `UPDATE_GOLDEN`.
pub fn golden(name: &str, actual: &[u8]) -> Result<(), String> {
    let path = fixtures().join(name);
    if updating_golden() {
        std::fs::create_dir_all(fixtures()).map_err(|e| e.to_string())?;
        std::fs::write(&path, actual).map_err(|e| format!("{}: {e}", path.display()))?;
        return Ok(());
    }
    let want = std::fs::read(&path).map_err(|e| format!("{}: {e} (run with UPDATE_GOLDEN=1)", path.display()))?;
    if want != actual {
        let line = want
            .split(|&b| b == b'\n')
            .zip(actual.split(|&b| b == b'\n'))
            .position(|(a, b)| a != b)
            .map_or("length".to_string(), |i| format!("line {}", i + 1));
        return Err(format!("{name} differs from golden at {line}"));
    }
    Ok(())
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Run the CLI binary in `dir`.
pub fn cli(dir: &Path, args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_reflectiva"))
        .args(args)
        .current_dir(dir)
        .env_remove("REFLECTIVA_ENDPOINT")
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn cli");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn cli_ok(dir: &Path, args: &[&str]) -> Result<Run, String> {
    let r = cli(dir, args);
    if r.code != 0 {
        return Err(format!("`reflectiva {}` exited {}: {}", args.join(" "), r.code, r.stderr.trim()));
    }
    Ok(r)
}

/// Cosine similarity in f64 over raw (unnormalized) vectors.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    let na = a.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Exhaustive ranking: all rows by cosine, descending, ties by row.
pub fn brute_force(docs: &[Vec<f32>], q: &[f32]) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = docs.iter().enumerate().map(|(i, d)| (i, cosine(d, q))).collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
    all
}
