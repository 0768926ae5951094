//! Dataset summaries for `dataset inspect`.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use echo_core::recorder::{episode_file_name, load_episode, read_manifest, EpisodeManifest, MANIFEST_FILE};

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub manifest: EpisodeManifest,
    /// `None` when the episode file is missing or unreadable.
    pub force: Option<ForceStats>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceStats {
    pub rows: usize,
    pub mean: f64,
    pub peak: f64,
}

/// An empty or never-used directory has zero episodes rather than being an error.
pub fn summarize(dir: &Path) -> io::Result<Vec<EpisodeSummary>> {
    if !dir.is_dir() {
        return Err(io::Error::new(
            io::ErrorKind::NotFound,
            format!("{} is not a directory", dir.display()),
        ));
    }
    if !dir.join(MANIFEST_FILE).exists() {
        return Ok(Vec::new());
    }
    Ok(read_manifest(dir)?
        .into_iter()
        .map(|manifest| {
            let force = load_episode(&dir.join(episode_file_name(manifest.id)))
                .ok()
                .map(|records| {
                    let peak = records.iter().map(|r| r.grip_force).fold(0.0, f64::max);
                    let mean = if records.is_empty() {
                        0.0
                    } else {
                        records.iter().map(|r| r.grip_force).sum::<f64>() / records.len() as f64
                    };
                    ForceStats {
                        rows: records.len(),
                        mean,
                        peak,
                    }
                });
            EpisodeSummary { manifest, force }
        })
        .collect())
}

pub fn render(episodes: &[EpisodeSummary]) -> String {
    let mut out = format!("{} episodes\n", episodes.len());
    for e in episodes {
        let m = &e.manifest;
        let _ = write!(
            out,
            "episode {:>4}  {:<9}  {:>6} samples  {:>8.3} s  dropped {}  config {}",
            m.id,
            m.status.as_str(),
            m.samples,
            m.duration_us as f64 / 1e6,
            m.dropped,
            m.config_hash
        );
        match e.force {
            Some(f) => {
                let _ = write!(out, "  force mean {:.3} N peak {:.3} N", f.mean, f.peak);
                if f.rows as u64 != m.samples {
                    let _ = write!(out, "  (file has {} rows)", f.rows);
                }
            }
            None => out.push_str("  (episode file unreadable)"),
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_directory_has_no_episodes() {
        let dir = tempfile::tempdir().unwrap();
        let eps = summarize(dir.path()).unwrap();
        assert_eq!(render(&eps), "0 episodes\n");
        assert!(summarize(&dir.path().join("missing")).is_err());
    }
}
