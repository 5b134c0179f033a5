//! Robustness benchmark: every scheme × every attack over a corpus,
//! repeated over several runs, reduced to success/failure statistics.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{apply_attack, attack_suite, AttackSpec};
use crate::payload::{issue, KeyPair, PayloadSpec};
use crate::pipeline::{encode_scheme, image_stem, verify_scheme, PipelineParams, Scheme};
use crate::{Error, Raster, Result};

pub const REPORT_HEADER: &str =
    "scheme,attack,total,success_avg,success_std,success_rate_pct,failure_avg,failure_std";
const RULES_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub corpus_dir: PathBuf,
    pub runs: usize,
    pub schemes: Vec<Scheme>,
    pub attacks: Vec<AttackSpec>,
    pub rng_base_seed: u64,
    /// When set, run 0's attacked images are saved here.
    pub persist_dir: Option<PathBuf>,
}

impl BenchConfig {
    pub fn new(corpus_dir: impl Into<PathBuf>) -> Self {
        BenchConfig {
            corpus_dir: corpus_dir.into(),
            runs: 10,
            schemes: Scheme::ALL.to_vec(),
            attacks: attack_suite(),
            rng_base_seed: 0,
            persist_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::InvalidParams("runs must be >= 1".into()));
        }
        if self.schemes.is_empty() || self.attacks.is_empty() {
            return Err(Error::InvalidParams("need at least one scheme and one attack".into()));
        }
        self.attacks.iter().try_for_each(AttackSpec::validate)
    }

    /// One payload timestamp per run; the only thing that varies between runs.
    pub fn run_timestamps(&self) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_base_seed);
        (0..self.runs)
            .map(|_| 1_600_000_000 + rng.gen_range(0..100_000_000))
            .collect()
    }
}

/// One scheme × attack cell. Averages and population standard deviations are taken
/// over runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub scheme: Scheme,
    pub attack: String,
    pub total: usize,
    pub success_avg: f64,
    pub success_std: f64,
    pub success_rate_pct: f64,
    pub failure_avg: f64,
    pub failure_std: f64,
}

impl BenchCell {
    fn from_runs(scheme: Scheme, attack: &str, total: usize, successes: &[usize]) -> Self {
        let (s_avg, s_std) = mean_std(successes.iter().map(|&s| s as f64));
        let (f_avg, f_std) = mean_std(successes.iter().map(|&s| (total - s) as f64));
        BenchCell {
            scheme,
            attack: attack.to_string(),
            total,
            success_avg: s_avg,
            success_std: s_std,
            success_rate_pct: if total == 0 { 0.0 } else { 100.0 * s_avg / total as f64 },
            failure_avg: f_avg,
            failure_std: f_std,
        }
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    /// Scheme-major, attacks in configured order.
    pub cells: Vec<BenchCell>,
    pub corpus_size: usize,
    pub runs: usize,
    /// Unreadable images with the reason they were skipped.
    pub skipped: Vec<(PathBuf, String)>,
}

impl BenchReport {
    pub fn cell(&self, scheme: Scheme, attack: &str) -> Option<&BenchCell> {
        self.cells.iter().find(|c| c.scheme == scheme && c.attack == attack)
    }

    pub fn rate(&self, scheme: Scheme, attack: &str) -> Option<f64> {
        self.cell(scheme, attack).map(|c| c.success_rate_pct)
    }
}

/// PNG, JPEG and BMP files directly inside `dir`, sorted by name.
pub fn list_corpus(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Success flags for one image in one run, indexed `[scheme][attack]`.
fn bench_image(
    img: &Raster,
    user_id: &str,
    timestamp: u64,
    kp: &KeyPair,
    params: &PipelineParams,
    cfg: &BenchConfig,
    persist: Option<&Path>,
) -> Result<Vec<Vec<bool>>> {
    let sp = issue(kp, &PayloadSpec::new(user_id, RULES_VERSION, timestamp))?;
    let pk = kp.public_key();
    let mut out = Vec::with_capacity(cfg.schemes.len());
    for &scheme in &cfg.schemes {
        let encoded = match encode_scheme(img, scheme, &sp, params) {
            Ok(e) => e,
            Err(e) => {
                log::warn!("{user_id} {scheme}: {e}");
                out.push(vec![false; cfg.attacks.len()]);
                continue;
            }
        };
        let mut row = Vec::with_capacity(cfg.attacks.len());
        for spec in &cfg.attacks {
            let attacked = apply_attack(&encoded, spec)?;
            if let Some(dir) = persist {
                let group = if scheme.bit_level().is_some() { "Encoded_image" } else { "Spatial_encoded" };
                let file = scheme.name().replace('-', "_");
                attacked.save(dir.join(format!("{group}_attacked_{}", spec.name())).join(format!("{file}.png")))?;
            }
            row.push(verify_scheme(&attacked, scheme, &sp, pk, params).valid);
        }
        out.push(row);
    }
    Ok(out)
}

pub fn run_bench(cfg: &BenchConfig, kp: &KeyPair) -> Result<BenchReport> {
    cfg.validate()?;
    let params = PipelineParams::for_key(kp.public_key());
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for path in list_corpus(&cfg.corpus_dir)? {
        match Raster::load(&path) {
            Ok(img) => images.push((image_stem(&path), img)),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push((path, e.to_string()));
            }
        }
    }
    if images.is_empty() {
        return Err(Error::InvalidParams(format!(
            "no readable images in {}",
            cfg.corpus_dir.display()
        )));
    }

    let timestamps = cfg.run_timestamps();
    let (n_s, n_a) = (cfg.schemes.len(), cfg.attacks.len());
    let mut successes = vec![vec![vec![0usize; cfg.runs]; n_a]; n_s];
    for (run, &ts) in timestamps.iter().enumerate() {
        let started = Instant::now();
        let flags: Vec<Vec<Vec<bool>>> = images
            .par_iter()
            .enumerate()
            .map(|(i, (stem, img))| {
                let persist = match (&cfg.persist_dir, run) {
                    (Some(dir), 0) => Some(dir.join(stem)),
                    _ => None,
                };
                bench_image(img, &format!("user{i:04}"), ts, kp, &params, cfg, persist.as_deref())
            })
            .collect::<Result<_>>()?;
        for per_image in &flags {
            for (s, row) in per_image.iter().enumerate() {
                for (a, &ok) in row.iter().enumerate() {
                    successes[s][a][run] += usize::from(ok);
                }
            }
        }
        log::info!(
            "run {}/{} over {} images in {:.1}s",
            run + 1,
            cfg.runs,
            images.len(),
            started.elapsed().as_secs_f64()
        );
    }

    let total = images.len();
    let cells = cfg
        .schemes
        .iter()
        .enumerate()
        .flat_map(|(s, &scheme)| {
            let successes = &successes;
            cfg.attacks
                .iter()
                .enumerate()
                .map(move |(a, spec)| BenchCell::from_runs(scheme, spec.name(), total, &successes[s][a]))
        })
        .collect();
    Ok(BenchReport {
        cells,
        corpus_size: total,
        runs: cfg.runs,
        skipped,
    })
}

fn fmt_f(v: f64) -> String {
    format!("{v:.4}")
}

/// Report CSV text; floats carry four decimals.
pub fn format_cells(cells: &[BenchCell]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.scheme.name(),
            c.attack,
            c.total,
            fmt_f(c.success_avg),
            fmt_f(c.success_std),
            fmt_f(c.success_rate_pct),
            fmt_f(c.failure_avg),
            fmt_f(c.failure_std)
        ));
    }
    out
}

pub fn write_report(report: &BenchReport, path: &Path) -> Result<()> {
    write_cells(&report.cells, path)
}

pub fn write_cells(cells: &[BenchCell], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, format_cells(cells)).map_err(|e| Error::io(path, e))
}

pub fn read_cells(path: &Path) -> Result<Vec<BenchCell>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != REPORT_HEADER {
        return Err(Error::Format {
            line: 1,
            reason: format!("unexpected header {:?}", header.join(",")),
        });
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
