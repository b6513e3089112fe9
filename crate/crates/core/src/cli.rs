//! The `calciomics` command line.
//!
//! Each subcommand reads an optional TOML config, applies flag overrides and
//! writes the resolved config next to its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boost::{self, FeatureMatrix, TrainConfig};
use crate::calciomics::{read_lesion_csv, write_lesion_csv, ExtractorConfig, FeatureTable, PatientInputs};
use crate::cohort::{self, CohortSpec};
use crate::pipeline::{self, CvConfig, Dataset, ModelId, ModelSpec};
use crate::statlab::{self, TestRecord};
use crate::treeshap;
use crate::volgrid;

#[derive(Debug, Parser)]
#[command(name = "calciomics", version, about = "Coronary calcium-omics extraction, modelling and evaluation")]
pub struct Cli {
    /// Worker threads for per-patient and per-fold work.
    #[arg(long, global = true, env = "CALCIOMICS_JOBS")]
    pub jobs: Option<usize>,
    /// Master seed; overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort of phantom scans.
    Synth(SynthArgs),
    /// Extract the feature table from a cohort directory.
    Extract(ExtractArgs),
    /// Cross-validate one or more models and write a report bundle.
    Run(RunArgs),
    /// Hypothesis tests on a 2x2 table or on a feature table.
    Stats(StatsArgs),
    /// Rank features of a saved model by mean |SHAP|.
    Shap(ShapArgs),
    /// Compare two out-of-fold score files.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of patients.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub prevalence: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Directory written by `synth` (or laid out the same way).
    #[arg(long)]
    pub cohort: PathBuf,
    /// Feature table to write; lesions.csv goes beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// Per-lesion table for refitting the mass histogram in each fold.
    /// Defaults to lesions.csv beside the feature table when present.
    #[arg(long)]
    pub lesions: Option<PathBuf>,
    /// Model ids (m1, m2, m3), comma separated.
    #[arg(long, value_delimiter = ',', default_value = "m1,m2,m3")]
    pub model: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Plain random folds instead of stratified ones.
    #[arg(long)]
    pub unstratified: bool,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// 2x2 counts a,b,c,d for the table [[a,b],[c,d]].
    #[arg(long, value_delimiter = ',', conflicts_with = "features")]
    pub table: Option<Vec<String>>,
    /// Feature table: each column is tested between outcome groups.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Columns to test; defaults to every column.
    #[arg(long, value_delimiter = ',')]
    pub columns: Option<Vec<String>>,
    /// Write the report as JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ShapArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Ranking CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write per-row attributions.
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    /// Verify that attributions sum to the model margin on every row.
    #[arg(long)]
    pub check_local_accuracy: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Every tunable setting. Unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: Option<usize>,
    pub cohort: CohortSpec,
    pub extractor: ExtractorConfig,
    pub cv: CvConfig,
    pub train: TrainConfig,
    pub model: ModelOptions,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOptions {
    pub top_k: usize,
    pub selection_folds: usize,
    pub threshold: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        let s = ModelSpec::default();
        Self {
            top_k: s.top_k,
            selection_folds: s.selection_folds,
            threshold: s.threshold,
        }
    }
}

impl ModelOptions {
    fn spec(&self, id: ModelId) -> ModelSpec {
        ModelSpec {
            id,
            top_k: self.top_k,
            selection_folds: self.selection_folds,
            threshold: self.threshold,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Pushes the master seed into every component.
    fn resolve(mut self, seed: Option<u64>, jobs: Option<usize>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if jobs.is_some() {
            self.jobs = jobs;
        }
        self.cv.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).context("serializing config")?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

pub fn run(cli: Cli) -> Result<()> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.resolve(cli.seed, cli.jobs);
    match cfg.jobs {
        Some(0) => bail!("--jobs must be at least 1"),
        Some(n) => {
            // fails only if a pool already exists, e.g. when called twice in one process
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        None => {}
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(&cfg, &a).map(|_| ()),
        Command::Extract(a) => cmd_extract(&cfg, &a).map(|_| ()),
        Command::Run(a) => cmd_run(&cfg, &a).map(|_| ()),
        Command::Stats(a) => {
            let report = cmd_stats(&a)?;
            emit_json(&report, a.out.as_deref())
        }
        Command::Shap(a) => cmd_shap(&a).map(|_| ()),
        Command::Compare(a) => {
            let report = cmd_compare(&a)?;
            emit_json(&report, a.out.as_deref())
        }
    }
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn cmd_synth(cfg: &RunConfig, a: &SynthArgs) -> Result<cohort::CohortManifest> {
    let mut cfg = cfg.clone();
    if let Some(n) = a.n {
        cfg.cohort.n = n;
    }
    if let Some(p) = a.prevalence {
        cfg.cohort.prevalence = p;
    }
    let c = cohort::generate_cohort(&cfg.cohort, cfg.seed)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let manifest = cohort::write_cohort(&a.out, &c).with_context(|| format!("writing cohort to {}", a.out.display()))?;
    cfg.write(&a.out.join(RESOLVED_CONFIG))?;
    eprintln!(
        "wrote {} patients ({} positive) to {}",
        manifest.patients,
        manifest.positives,
        a.out.display()
    );
    Ok(manifest)
}

pub fn lesions_path_for(features: &Path) -> PathBuf {
    features.with_file_name("lesions.csv")
}

/// Extracts every patient listed in the cohort's clinical table. Returns
/// the number of rows written.
pub fn cmd_extract(cfg: &RunConfig, a: &ExtractArgs) -> Result<usize> {
    let clinical = cohort::read_clinical_csv(&a.cohort.join(cohort::CLINICAL_CSV))
        .with_context(|| format!("reading {}", a.cohort.join(cohort::CLINICAL_CSV).display()))?;
    ensure!(!clinical.is_empty(), "cohort has no patients");
    let extractions = clinical
        .par_iter()
        .map(|row| {
            let vp = cohort::volume_path(&a.cohort, &row.patient_id);
            let mp = cohort::mask_path(&a.cohort, &row.patient_id);
            let volume = volgrid::load_volume(&vp).with_context(|| format!("loading volume {}", vp.display()))?;
            let mask = volgrid::load_label_map(&mp).with_context(|| format!("loading mask {}", mp.display()))?;
            let inputs = PatientInputs {
                patient_id: &row.patient_id,
                clinical: row.record(),
                label: row.label,
                volume: &volume,
                mask: &mask,
            };
            crate::calciomics::extract_patient(&inputs, &cfg.extractor)
                .with_context(|| format!("extracting patient {}", row.patient_id))
        })
        .collect::<Result<Vec<_>>>()?;
    let (table, lesions) = cohort::assemble_table(&extractions);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    table.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let lp = lesions_path_for(&a.out);
    write_lesion_csv(std::fs::File::create(&lp)?, &lesions)?;
    cfg.write(&a.out.with_file_name(RESOLVED_CONFIG))?;
    eprintln!("wrote {} rows and {} lesions", table.rows.len(), lesions.len());
    Ok(table.rows.len())
}

pub fn cmd_run(cfg: &RunConfig, a: &RunArgs) -> Result<pipeline::ReportManifest> {
    let mut cfg = cfg.clone();
    if let Some(k) = a.k {
        cfg.cv.k = k;
    }
    if let Some(r) = a.repeats {
        cfg.cv.repeats = r;
    }
    if a.unstratified {
        cfg.cv.stratified = false;
    }
    if let Some(k) = a.top_k {
        cfg.model.top_k = k;
    }
    if let Some(t) = a.threshold {
        cfg.model.threshold = t;
    }
    let ids = a
        .model
        .iter()
        .map(|m| m.parse::<ModelId>())
        .collect::<Result<Vec<_>, _>>()?;
    ensure!(!ids.is_empty(), "no model given");
    let table = FeatureTable::load(&a.features).with_context(|| format!("reading {}", a.features.display()))?;
    let lesion_path = a
        .lesions
        .clone()
        .or_else(|| Some(lesions_path_for(&a.features)).filter(|p| p.exists()));
    let lesions = match &lesion_path {
        Some(p) => Some(read_lesion_csv(std::fs::File::open(p).with_context(|| format!("opening {}", p.display()))?)?),
        None => None,
    };
    let data = Dataset::from_table(&table, lesions.as_deref())?;
    let runs = ids
        .iter()
        .map(|&id| pipeline::run_experiment(&data, &cfg.model.spec(id), &cfg.cv, &cfg.train))
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = pipeline::emit_report(&a.out, &data, &runs)?;
    cfg.write(&a.out.join(RESOLVED_CONFIG))?;
    for r in &runs {
        let auc = r.summary.get("auroc");
        eprintln!("{}: AUROC {:.3} ± {:.3}", r.spec.id, auc.mean, auc.sd);
    }
    Ok(manifest)
}

fn parse_table(cells: &[String]) -> Result<[[u64; 2]; 2]> {
    ensure!(cells.len() == 4, "--table needs four counts a,b,c,d, got {}", cells.len());
    let v = cells
        .iter()
        .map(|c| c.trim().parse::<u64>().with_context(|| format!("count {c:?} is not a non-negative integer")))
        .collect::<Result<Vec<_>>>()?;
    Ok([[v[0], v[1]], [v[2], v[3]]])
}

/// Fisher's exact test; the statistic is the sample odds ratio ad/bc.
fn fisher_record(t: [[u64; 2]; 2]) -> Result<TestRecord, statlab::StatError> {
    let odds = (t[0][0] * t[1][1]) as f64 / (t[0][1] * t[1][0]) as f64;
    Ok(TestRecord::new(
        "fisher_exact",
        statlab::TestResult {
            statistic: odds,
            p: statlab::fisher_exact(t)?,
        },
    )
    .with("statistic", "odds ratio"))
}

pub fn table_tests(t: [[u64; 2]; 2]) -> Result<Vec<TestRecord>> {
    let counts = serde_json::json!([t[0], t[1]]);
    Ok(vec![
        TestRecord::new("chi2", statlab::chi2_2x2(t, false)?)
            .with("yates", false)
            .with("table", counts.clone()),
        TestRecord::new("chi2", statlab::chi2_2x2(t, true)?)
            .with("yates", true)
            .with("table", counts.clone()),
        fisher_record(t)?.with("table", counts),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatsReport {
    pub tests: Vec<TestRecord>,
    /// Columns that could not be tested, with the reason.
    pub skipped: BTreeMap<String, String>,
}

pub fn cmd_stats(a: &StatsArgs) -> Result<StatsReport> {
    if let Some(cells) = &a.table {
        return Ok(StatsReport {
            tests: table_tests(parse_table(cells)?)?,
            skipped: BTreeMap::new(),
        });
    }
    let Some(path) = &a.features else {
        bail!("give either --table or --features");
    };
    let table = FeatureTable::load(path).with_context(|| format!("reading {}", path.display()))?;
    let columns: Vec<String> = match &a.columns {
        Some(c) => c.clone(),
        None => table.names.clone(),
    };
    let mut tests = Vec::new();
    let mut skipped = BTreeMap::new();
    for name in &columns {
        let j = table.column(name).with_context(|| format!("no column {name}"))?;
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for r in &table.rows {
            if r.label == 1 {
                pos.push(r.values[j]);
            } else {
                neg.push(r.values[j]);
            }
        }
        let binary = table.rows.iter().all(|r| r.values[j] == 0.0 || r.values[j] == 1.0);
        let result: Result<Vec<TestRecord>, statlab::StatError> = if binary {
            let count = |v: &[f64]| v.iter().filter(|&&x| x == 1.0).count() as u64;
            let t = [
                [count(&pos), pos.len() as u64 - count(&pos)],
                [count(&neg), neg.len() as u64 - count(&neg)],
            ];
            (|| {
                Ok(vec![
                    TestRecord::new("chi2", statlab::chi2_2x2(t, false)?).with("column", name.as_str()).with("yates", false),
                    TestRecord::new("chi2", statlab::chi2_2x2(t, true)?).with("column", name.as_str()).with("yates", true),
                    fisher_record(t)?.with("column", name.as_str()),
                ])
            })()
        } else {
            (|| {
                let mut out = vec![
                    TestRecord::new("t_test", statlab::t_test(&pos, &neg, false)?).with("column", name.as_str()).with("pooled", false),
                    TestRecord::new("mann_whitney_u", statlab::mann_whitney_u(&pos, &neg)?).with("column", name.as_str()),
                ];
                for (group, v) in [("positive", &pos), ("negative", &neg)] {
                    if (3..=5000).contains(&v.len()) {
                        if let Ok(r) = statlab::shapiro_wilk(v) {
                            out.push(TestRecord::new("shapiro_wilk", r).with("column", name.as_str()).with("group", group));
                        }
                    }
                }
                Ok(out)
            })()
        };
        match result {
            Ok(t) => tests.extend(t),
            Err(e) => {
                skipped.insert(name.clone(), e.to_string());
            }
        }
    }
    Ok(StatsReport { tests, skipped })
}

/// Writes the ranking and returns the largest local-accuracy error seen.
pub fn cmd_shap(a: &ShapArgs) -> Result<f64> {
    let model = boost::load_model(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let table = FeatureTable::load(&a.features).with_context(|| format!("reading {}", a.features.display()))?;
    let names: Vec<String> = if model.feature_names.is_empty() {
        ensure!(
            table.names.len() == model.feature_count,
            "model without feature names expects {} columns, table has {}",
            model.feature_count,
            table.names.len()
        );
        table.names.clone()
    } else {
        model.feature_names.clone()
    };
    let cols = names
        .iter()
        .map(|n| table.column(n).with_context(|| format!("feature table lacks model feature {n}")))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<f64>> = table.rows.iter().map(|r| cols.iter().map(|&c| r.values[c]).collect()).collect();
    let x = FeatureMatrix::from_rows(&rows);
    let attrs = treeshap::shap_matrix(&model, &x)?;
    let mut worst = 0.0f64;
    if a.check_local_accuracy {
        for (i, at) in attrs.iter().enumerate() {
            let margin = model.predict_margin(x.row(i))?;
            let err = (at.total() - margin).abs();
            worst = worst.max(err);
            ensure!(
                err <= 1e-9 * margin.abs().max(1.0),
                "local accuracy fails on row {} ({}): |sum - margin| = {err:e}",
                i,
                table.rows[i].patient_id
            );
        }
    }
    let (ranking, _) = treeshap::rank_and_select(&[model], &[x], &names, names.len())?;
    treeshap::write_ranking_csv(std::fs::File::create(&a.out)?, &ranking)?;
    if let Some(p) = &a.matrix {
        let ids: Vec<String> = table.rows.iter().map(|r| r.patient_id.clone()).collect();
        treeshap::write_shap_matrix_csv(std::fs::File::create(p)?, &ids, &names, &attrs)?;
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct OofRow {
    patient_id: String,
    label: u8,
    score: f64,
}

fn read_oof(path: &Path) -> Result<Vec<OofRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let rows = r
        .deserialize()
        .collect::<Result<Vec<OofRow>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    ensure!(!rows.is_empty(), "{} has no rows", path.display());
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareReport {
    pub delong: TestRecord,
    pub mcnemar: TestRecord,
    pub auprc_bootstrap: TestRecord,
}

pub fn cmd_compare(a: &CompareArgs) -> Result<CompareReport> {
    let ra = read_oof(&a.a)?;
    let rb = read_oof(&a.b)?;
    ensure!(ra.len() == rb.len(), "score files list {} and {} patients", ra.len(), rb.len());
    for (x, y) in ra.iter().zip(&rb) {
        ensure!(
            x.patient_id == y.patient_id && x.label == y.label,
            "score files disagree at patient {} / {}",
            x.patient_id,
            y.patient_id
        );
    }
    let labels: Vec<u8> = ra.iter().map(|r| r.label).collect();
    let sa: Vec<f64> = ra.iter().map(|r| r.score).collect();
    let sb: Vec<f64> = rb.iter().map(|r| r.score).collect();
    let d = statlab::delong_test(&sa, &sb, &labels)?;
    let (b, c) = statlab::discordant_counts(&sa, &sb, &labels, a.threshold);
    let boot = statlab::bootstrap_auprc_test(&sa, &sb, &labels, pipeline::AUPRC_BOOTSTRAP_REPLICATES, 0)?;
    Ok(CompareReport {
        delong: TestRecord::new("delong", statlab::TestResult { statistic: d.z, p: d.p })
            .with("aucA", d.auc_a)
            .with("aucB", d.auc_b),
        mcnemar: TestRecord::new("mcnemar", statlab::mcnemar(b, c, true))
            .with("b", b)
            .with("c", c)
            .with("threshold", a.threshold),
        auprc_bootstrap: TestRecord::new("auprc_bootstrap", statlab::TestResult { statistic: boot.z, p: boot.p })
            .with("auprcA", boot.auc_a)
            .with("auprcB", boot.auc_b)
            .with("replicates", pipeline::AUPRC_BOOTSTRAP_REPLICATES),
    })
}
