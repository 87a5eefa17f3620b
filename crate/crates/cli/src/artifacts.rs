//! On-disk layout of a run directory, plus the small text formats the
//! pipeline reads back: manifests, CSVs, the seed bundle, the final
//! population listing.
//!
//! CSVs are UTF-8, comma-separated, one header row, `.` decimal separator.
//! Floats are written with Rust's shortest round-trip formatting so equal
//! runs produce byte-identical files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use modnas_core::zoo::{CellKind, SeedSpec};

pub const SEEDS_DIR: &str = "seeds";
pub const SEEDS_MANIFEST: &str = "seeds/seeds.txt";
pub const KB_DIR: &str = "kb";
pub const SEED_METRICS_CSV: &str = "seed_metrics.csv";
pub const SEED_EPOCHS_CSV: &str = "seed_epochs.csv";
pub const GENERATIONS_CSV: &str = "generations.csv";
pub const EVALUATIONS_CSV: &str = "evaluations.csv";
pub const POPULATION_TXT: &str = "population.txt";
pub const FINETUNE_CSV: &str = "finetune.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const CORRELATION_TXT: &str = "correlation.txt";
pub const ABLATION_CSV: &str = "ablation.csv";

/// Errors out with the command that produces the artifact when it is not
/// there yet.
pub fn require(path: &Path, produced_by: &str) -> Result<()> {
    if !path.exists() {
        bail!("missing artifact {}; run `modnas {produced_by}` first", path.display());
    }
    Ok(())
}

pub fn seed_weights_file(out: &Path, index: usize, name: &str) -> PathBuf {
    out.join(SEEDS_DIR).join(format!("seed{index:02}_{name}.mnt"))
}

pub fn manifest_path(out: &Path, command: &str) -> PathBuf {
    out.join(format!("{command}.manifest.txt"))
}

/// Per-run provenance record. Runs that load a dataset persist the
/// train-split normalization statistics here.
pub struct Manifest {
    pub command: &'static str,
    pub config_hash: String,
    pub rng_seed: u64,
    pub workers: usize,
    pub dataset: String,
    pub normalization: Option<([f64; 3], [f64; 3])>,
}

pub fn write_manifest(out: &Path, m: &Manifest) -> Result<()> {
    let mut s = String::new();
    s.push_str("version 1\n");
    s.push_str(&format!("command {}\n", m.command));
    s.push_str(&format!("config_hash {}\n", m.config_hash));
    s.push_str(&format!("rng_seed {}\n", m.rng_seed));
    s.push_str(&format!("workers {}\n", m.workers));
    s.push_str(&format!("dataset {}\n", m.dataset));
    if let Some((mean, std)) = m.normalization {
        s.push_str(&format!("normalization_mean {},{},{}\n", mean[0], mean[1], mean[2]));
        s.push_str(&format!("normalization_std {},{},{}\n", std[0], std[1], std[2]));
    }
    let path = manifest_path(out, m.command);
    std::fs::write(&path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(&header.join(","));
    s.push('\n');
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            bail!("row {} has {} fields, header has {}", i + 1, row.len(), header.len());
        }
        for field in row {
            if field.contains(',') || field.contains('\n') {
                bail!("row {}: field {field:?} needs quoting, which this format avoids", i + 1);
            }
        }
        s.push_str(&row.join(","));
        s.push('\n');
    }
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

/// Reads a CSV written by `write_csv`, checking the header matches.
pub fn read_csv(path: &Path, expect_header: &[&str]) -> Result<Vec<Vec<String>>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    if header != expect_header {
        bail!(
            "{}: header mismatch: expected {expect_header:?}, got {header:?}",
            path.display()
        );
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row: Vec<String> = line.split(',').map(str::to_string).collect();
        if row.len() != expect_header.len() {
            bail!("{}:{}: expected {} fields, got {}", path.display(), i + 2, expect_header.len(), row.len());
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field.parse().map_err(|_| anyhow::anyhow!("bad {what}: {field:?}"))
}

/// The seed bundle: geometry plus one spec line per trained seed, enough
/// to rebuild each network and load its weights.
pub struct SeedBundle {
    pub in_ch: usize,
    pub image_hw: usize,
    pub num_classes: usize,
    pub c: usize,
    pub specs: Vec<SeedSpec>,
}

fn kind_text(kind: &CellKind) -> String {
    match kind {
        CellKind::Plain { convs } => format!("plain convs={convs}"),
        CellKind::Residual { blocks } => format!("residual blocks={blocks}"),
    }
}

fn parse_kind(family: &str, arg: &str) -> Result<CellKind> {
    let (key, val) = arg.split_once('=').context("cell kind argument needs key=value")?;
    let count: usize = val.parse().with_context(|| format!("bad count {val:?}"))?;
    match (family, key) {
        ("plain", "convs") => Ok(CellKind::Plain { convs: count }),
        ("residual", "blocks") => Ok(CellKind::Residual { blocks: count }),
        _ => bail!("unknown cell kind {family} {arg}"),
    }
}

pub fn write_seed_bundle(out: &Path, bundle: &SeedBundle) -> Result<()> {
    let mut s = String::new();
    s.push_str("version 1\n");
    s.push_str(&format!(
        "geometry in_ch={} image_hw={} num_classes={} c={}\n",
        bundle.in_ch, bundle.image_hw, bundle.num_classes, bundle.c
    ));
    for (i, spec) in bundle.specs.iter().enumerate() {
        if spec.name.contains(char::is_whitespace) {
            bail!("seed name {:?} contains whitespace", spec.name);
        }
        let widths =
            spec.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
        s.push_str(&format!("seed {i} {} {} widths={widths}\n", spec.name, kind_text(&spec.kind)));
    }
    let path = out.join(SEEDS_MANIFEST);
    std::fs::write(&path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn read_seed_bundle(out: &Path) -> Result<SeedBundle> {
    let path = out.join(SEEDS_MANIFEST);
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut geometry: Option<(usize, usize, usize, usize)> = None;
    let mut specs: Vec<SeedSpec> = Vec::new();
    let mut version = None;
    for (lineno, line) in text.lines().enumerate() {
        let at = || format!("{}:{}", path.display(), lineno + 1);
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => {}
            ["version", v] => version = Some(v.to_string()),
            ["geometry", rest @ ..] => {
                let mut vals = [0usize; 4];
                let keys = ["in_ch", "image_hw", "num_classes", "c"];
                if rest.len() != 4 {
                    bail!("{}: geometry needs 4 fields", at());
                }
                for (slot, (part, key)) in vals.iter_mut().zip(rest.iter().zip(keys)) {
                    let v = part
                        .strip_prefix(key)
                        .and_then(|s| s.strip_prefix('='))
                        .with_context(|| format!("{}: expected {key}=N, got {part:?}", at()))?;
                    *slot = v.parse().with_context(|| format!("{}: bad {key}", at()))?;
                }
                geometry = Some((vals[0], vals[1], vals[2], vals[3]));
            }
            ["seed", idx, name, family, arg, widths] => {
                let idx: usize =
                    idx.parse().with_context(|| format!("{}: bad seed index", at()))?;
                if idx != specs.len() {
                    bail!("{}: seed index {idx} out of order", at());
                }
                let kind = parse_kind(family, arg).with_context(at)?;
                let widths = widths
                    .strip_prefix("widths=")
                    .with_context(|| format!("{}: expected widths=...", at()))?
                    .split(',')
                    .map(|w| w.parse::<usize>().map_err(|_| anyhow::anyhow!("{}: bad width {w:?}", at())))
                    .collect::<Result<Vec<_>>>()?;
                specs.push(SeedSpec { name: name.to_string(), kind, widths });
            }
            _ => bail!("{}: unrecognized line {line:?}", at()),
        }
    }
    match version.as_deref() {
        Some("1") => {}
        Some(v) => bail!("{}: unsupported version {v}", path.display()),
        None => bail!("{}: missing version line", path.display()),
    }
    let (in_ch, image_hw, num_classes, c) =
        geometry.with_context(|| format!("{}: missing geometry line", path.display()))?;
    if specs.is_empty() {
        bail!("{}: no seeds listed", path.display());
    }
    for spec in &specs {
        if spec.widths.len() != c {
            bail!("{}: seed {} has {} widths, expected c={c}", path.display(), spec.name, spec.widths.len());
        }
    }
    Ok(SeedBundle { in_ch, image_hw, num_classes, c, specs })
}

pub fn write_population(out: &Path, genotypes: &[String]) -> Result<()> {
    let path = out.join(POPULATION_TXT);
    let mut s = genotypes.join("\n");
    s.push('\n');
    std::fs::write(&path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn read_population(out: &Path) -> Result<Vec<String>> {
    let path = out.join(POPULATION_TXT);
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let lines: Vec<String> =
        text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect();
    if lines.is_empty() {
        bail!("{}: empty population", path.display());
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![
            vec!["1".to_string(), "0.5".to_string()],
            vec!["2".to_string(), "0.25".to_string()],
        ];
        write_csv(&path, &["gen", "score"], &rows).unwrap();
        let back = read_csv(&path, &["gen", "score"]).unwrap();
        assert_eq!(back, rows);
        assert!(read_csv(&path, &["gen", "other"]).is_err());
    }

    #[test]
    fn csv_rejects_fields_needing_quotes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![vec!["a,b".to_string()]];
        assert!(write_csv(&path, &["x"], &rows).is_err());
    }

    #[test]
    fn seed_bundle_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join(SEEDS_DIR)).unwrap();
        let bundle = SeedBundle {
            in_ch: 3,
            image_hw: 32,
            num_classes: 4,
            c: 3,
            specs: vec![
                SeedSpec {
                    name: "plain-a".into(),
                    kind: CellKind::Plain { convs: 1 },
                    widths: vec![8, 16, 24],
                },
                SeedSpec {
                    name: "res-c".into(),
                    kind: CellKind::Residual { blocks: 2 },
                    widths: vec![16, 24, 32],
                },
            ],
        };
        write_seed_bundle(dir.path(), &bundle).unwrap();
        let back = read_seed_bundle(dir.path()).unwrap();
        assert_eq!(back.in_ch, 3);
        assert_eq!(back.image_hw, 32);
        assert_eq!(back.num_classes, 4);
        assert_eq!(back.c, 3);
        assert_eq!(back.specs.len(), 2);
        assert_eq!(back.specs[0].name, "plain-a");
        assert!(matches!(back.specs[1].kind, CellKind::Residual { blocks: 2 }));
        assert_eq!(back.specs[1].widths, vec![16, 24, 32]);
    }

    #[test]
    fn missing_artifact_names_the_command() {
        let err = require(Path::new("/nonexistent/kb"), "build-kb").unwrap_err().to_string();
        assert!(err.contains("build-kb"), "{err}");
        assert!(err.contains("/nonexistent/kb"), "{err}");
    }

    #[test]
    fn population_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let pop = vec!["1-2-3".to_string(), "2-2-2".to_string()];
        write_population(dir.path(), &pop).unwrap();
        assert_eq!(read_population(dir.path()).unwrap(), pop);
    }
}
