use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use gaze_align::error::{Error, Result};
use gaze_align::fixation::{
    harmonize, read_fixations, read_raw_csv, write_harmonized_csv, ImageViewport,
};
use gaze_align::losses::{gaze_loss, gaze_loss_multiscale, LossConfig};
use gaze_align::metrics::{alignment_report, mean_std, AlignmentReport, MeanStd};
use gaze_align::regions::{
    aggregate_bounds, match_keywords, read_annotations_csv, render_mask, AggregationConfig,
    RegionAtlas, DEFAULT_MATCH_THRESHOLD, DEFAULT_TAU_BOX, MASK_SIZE,
};
use gaze_align::report::{
    client_from_env, generate, parse_predictions, parse_sections, prompt_from_predictions, Clock,
    GeneratedReport, RetryPolicy, SystemClock, TemplateStyle, VirtualClock, GATE_THRESHOLD,
};
use gaze_align::saliency::{
    decode_atnm, default_sigma, multiscale, render_heatmap_with, write_atnm, write_pgm16,
    AttentionMap, FixationWeighting, HeatmapOptions,
};
use gaze_align::text_metrics::{score_report, ReportScores};

#[derive(Parser)]
#[command(
    name = "gaze-align",
    version,
    about = "Gaze-supervised chest X-ray tooling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Harmonize a raw fixation CSV into the unit square.
    Normalize {
        #[arg(long)]
        input: PathBuf,
        /// Viewport JSON (required for REFLACX rows).
        #[arg(long)]
        viewport: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Render a fixation heatmap to ATNM.
    Heatmap {
        #[arg(long)]
        fixations: PathBuf,
        #[arg(long)]
        viewport: Option<PathBuf>,
        #[arg(long, default_value_t = 224)]
        size: usize,
        /// Gaussian sigma in pixels; scales with size by default.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, value_enum, default_value_t = Weighting::Duration)]
        weighting: Weighting,
        /// Scale each fixation by its relative pupil area.
        #[arg(long)]
        pupil_weight: bool,
        #[arg(long)]
        output: PathBuf,
        /// Also write a 16-bit PGM preview.
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Gaze-attention loss between two maps, as JSON on stdout.
    Loss {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        gaze: PathBuf,
        #[arg(long)]
        n_fix: usize,
        #[arg(long, default_value_t = 1.0)]
        q_score: f64,
        /// Average over the 224/112/56 pyramid (maps must be 224x224).
        #[arg(long)]
        multiscale: bool,
    },
    /// Human/model alignment metrics for one study.
    Metrics {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        gaze: PathBuf,
        #[arg(long)]
        fixations: PathBuf,
        #[arg(long)]
        viewport: Option<PathBuf>,
    },
    /// Alignment metrics over a manifest, with mean and std per field.
    MetricsBatch {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Anatomical region atlas: box aggregation, keyword matching, masks
    #[command(subcommand)]
    Regions(RegionsCommand),
    /// Report prompting, generation and evaluation
    #[command(subcommand)]
    Report(ReportCommand),
}

#[derive(Clone, Copy, ValueEnum)]
enum Weighting {
    Duration,
    Count,
}

#[derive(Args)]
struct AtlasArg {
    /// Atlas JSON; the bundled atlas when omitted.
    #[arg(long)]
    atlas: Option<PathBuf>,
}

#[derive(Args)]
struct KeywordArgs {
    /// Comma-separated keywords.
    #[arg(long, value_delimiter = ',')]
    keywords: Vec<String>,
    /// File with one keyword per line.
    #[arg(long)]
    keywords_file: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MATCH_THRESHOLD)]
    threshold: f64,
}

#[derive(Subcommand)]
enum RegionsCommand {
    /// Merge annotation boxes into per-region bounds.
    Aggregate {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TAU_BOX)]
        tau_box: f64,
        #[command(flatten)]
        atlas: AtlasArg,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Match keywords to atlas regions.
    Match {
        #[command(flatten)]
        keywords: KeywordArgs,
        #[command(flatten)]
        atlas: AtlasArg,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Render the union mask of keyword-activated regions.
    Mask {
        #[command(flatten)]
        keywords: KeywordArgs,
        #[command(flatten)]
        atlas: AtlasArg,
        #[arg(long, default_value_t = MASK_SIZE)]
        size: usize,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Generate a report from condition predictions.
    Gen {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value = "standard")]
        style: String,
        #[arg(long, default_value_t = GATE_THRESHOLD)]
        gate: f64,
        #[arg(long, default_value_t = 5)]
        max_retries: u32,
        #[arg(long, default_value_t = 3.0)]
        base_delay: f64,
        #[arg(long, default_value_t = 120.0)]
        timeout: f64,
        /// Record backoff delays instead of sleeping.
        #[arg(long)]
        virtual_clock: bool,
        #[command(flatten)]
        atlas: AtlasArg,
        /// Where to write the assembled prompt text.
        #[arg(long)]
        prompt_out: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score candidate reports against references.
    Eval {
        #[arg(long, required_unless_present = "manifest")]
        candidate: Option<PathBuf>,
        #[arg(long, required_unless_present = "manifest")]
        reference: Option<PathBuf>,
        /// Required clinical terms for keyword coverage.
        #[arg(long, value_delimiter = ',')]
        keywords: Vec<String>,
        /// JSONL lines of {"id", "candidate", "reference", "keywords"}.
        #[arg(long, conflicts_with_all = ["candidate", "reference"])]
        manifest: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Parse(_) | Error::Json(_) => 2,
        Error::Schema(_) | Error::Precondition(_) => 3,
        Error::Shape(_) | Error::Config(_) => 4,
        Error::Client(_) => 5,
        Error::Io(_) | Error::AtRow { .. } => 1,
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn read_map(path: &Path) -> Result<AttentionMap> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    decode_atnm(&bytes)
}

fn read_viewport(path: Option<&Path>) -> Result<Option<ImageViewport>> {
    path.map(|p| ImageViewport::from_json(&read_text(p)?))
        .transpose()
}

fn load_atlas(arg: &AtlasArg) -> Result<RegionAtlas> {
    match &arg.atlas {
        Some(p) => RegionAtlas::from_json(&read_text(p)?),
        None => Ok(RegionAtlas::builtin()),
    }
}

/// Write via a temporary file in the target directory, then rename.
fn write_atomic(path: &Path, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = std::io::BufWriter::new(tmp.as_file_mut());
        f(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn emit_json<T: Serialize>(value: &T, output: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match output {
        Some(p) => write_atomic(p, |w| Ok(writeln!(w, "{text}")?)),
        None => match writeln!(std::io::stdout().lock(), "{text}") {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
            r => Ok(r?),
        },
    }
}

fn write_map(map: &AttentionMap, out: &Path, pgm: Option<&Path>) -> Result<()> {
    write_atomic(out, |w| write_atnm(map, w))?;
    if let Some(p) = pgm {
        write_atomic(p, |w| write_pgm16(map, w))?;
    }
    Ok(())
}

fn collect_keywords(args: &KeywordArgs) -> Result<Vec<String>> {
    let mut out: Vec<String> = args
        .keywords
        .iter()
        .map(|k| k.trim().to_string())
        .filter(|k| !k.is_empty())
        .collect();
    if let Some(p) = &args.keywords_file {
        out.extend(
            read_text(p)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from),
        );
    }
    Ok(out)
}

fn cmd_normalize(input: &Path, viewport: Option<&Path>, output: &Path) -> Result<()> {
    let vp = read_viewport(viewport)?;
    let rows = read_raw_csv(read_text(input)?.as_bytes())?;
    let seq = harmonize(&rows, vp.as_ref())?;
    for w in &seq.warnings {
        eprintln!("warning: {w}");
    }
    write_atomic(output, |w| write_harmonized_csv(&seq, w))
}

#[allow(clippy::too_many_arguments)]
fn cmd_heatmap(
    fixations: &Path,
    viewport: Option<&Path>,
    size: usize,
    sigma: Option<f64>,
    weighting: Weighting,
    pupil_weight: bool,
    output: &Path,
    pgm: Option<&Path>,
) -> Result<()> {
    let vp = read_viewport(viewport)?;
    let seq = read_fixations(&read_text(fixations)?, vp.as_ref())?;
    let opts = HeatmapOptions {
        weighting: match weighting {
            Weighting::Duration => FixationWeighting::Duration,
            Weighting::Count => FixationWeighting::Count,
        },
        pupil_weight,
    };
    let sigma = sigma.unwrap_or_else(|| default_sigma(size, size));
    let map = render_heatmap_with(&seq, size, size, sigma, &opts)?;
    write_map(&map, output, pgm)
}

fn cmd_loss(model: &Path, gaze: &Path, n_fix: usize, q_score: f64, ms: bool) -> Result<()> {
    let a_model = read_map(model)?;
    let a_gaze = read_map(gaze)?;
    let cfg = LossConfig::default();
    let config = json!({"tau": cfg.tau, "lambdas": cfg.lambdas(), "alpha": cfg.alpha});
    let out = if ms {
        a_model.ensure_same_shape(&a_gaze)?;
        let pm = multiscale(&a_model)?;
        let pg = multiscale(&a_gaze)?;
        let b = gaze_loss_multiscale(&pm, &pg, n_fix, q_score)?;
        json!({"total": b.total, "scales": b.scales, "config": config})
    } else {
        let b = gaze_loss(&a_model, &a_gaze, n_fix, q_score)?;
        let mut v = serde_json::to_value(&b)?;
        v["config"] = config;
        v
    };
    emit_json(&out, None)
}

fn cmd_metrics(model: &Path, gaze: &Path, fixations: &Path, viewport: Option<&Path>) -> Result<()> {
    let vp = read_viewport(viewport)?;
    let seq = read_fixations(&read_text(fixations)?, vp.as_ref())?;
    let report = alignment_report(&read_map(model)?, &read_map(gaze)?, &seq)?;
    emit_json(&report, None)
}

#[derive(Debug, Deserialize)]
struct ManifestEntry {
    study_id: String,
    fixation_csv: PathBuf,
    viewport_json: Option<PathBuf>,
    model_map: Option<PathBuf>,
    gaze_map: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ManifestDoc {
    List(Vec<ManifestEntry>),
    Wrapped { entries: Vec<ManifestEntry> },
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn cmd_metrics_batch(manifest: &Path, output: Option<&Path>) -> Result<()> {
    let doc: ManifestDoc = serde_json::from_str(&read_text(manifest)?)
        .map_err(|e| Error::Parse(format!("manifest: {e}")))?;
    let entries = match doc {
        ManifestDoc::List(e) | ManifestDoc::Wrapped { entries: e } => e,
    };
    let mut seen = HashSet::new();
    if let Some(dup) = entries.iter().find(|e| !seen.insert(e.study_id.as_str())) {
        return Err(Error::Schema(format!(
            "duplicate study_id {:?}",
            dup.study_id
        )));
    }
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut reports: Vec<(String, AlignmentReport)> = Vec::new();
    for e in &entries {
        let ctx = |err: Error| Error::Precondition(format!("study {}: {err}", e.study_id));
        let vp = read_viewport(
            e.viewport_json
                .as_ref()
                .map(|p| resolve(base, p))
                .as_deref(),
        )?;
        let seq = read_fixations(&read_text(&resolve(base, &e.fixation_csv))?, vp.as_ref())?;
        let model_path = e
            .model_map
            .as_ref()
            .ok_or_else(|| ctx(Error::Precondition("model_map is required".into())))?;
        let a_model = read_map(&resolve(base, model_path))?;
        let a_gaze = match &e.gaze_map {
            Some(p) => read_map(&resolve(base, p))?,
            None => {
                let (h, w) = a_model.shape();
                render_heatmap_with(&seq, h, w, default_sigma(h, w), &HeatmapOptions::default())?
            }
        };
        reports.push((
            e.study_id.clone(),
            alignment_report(&a_model, &a_gaze, &seq)?,
        ));
    }
    let mut summary = serde_json::Map::new();
    if let Some((_, first)) = reports.first() {
        for (k, (name, _)) in first.numeric_fields().iter().enumerate() {
            let vals: Vec<f64> = reports
                .iter()
                .map(|(_, r)| r.numeric_fields()[k].1)
                .collect();
            summary.insert(name.to_string(), serde_json::to_value(mean_std(&vals))?);
        }
    }
    let out = json!({
        "n": reports.len(),
        "entries": reports.iter().map(|(id, r)| json!({"study_id": id, "metrics": r})).collect::<Vec<_>>(),
        "summary": summary,
    });
    emit_json(&out, output)
}

fn cmd_regions(cmd: &RegionsCommand) -> Result<()> {
    match cmd {
        RegionsCommand::Aggregate {
            annotations,
            tau_box,
            atlas,
            output,
        } => {
            if tau_box.is_nan() || *tau_box < 0.0 {
                return Err(Error::Config(format!(
                    "tau_box {tau_box} must be non-negative"
                )));
            }
            let atlas = load_atlas(atlas)?;
            let anns = read_annotations_csv(read_text(annotations)?.as_bytes())?;
            let cfg = AggregationConfig {
                tau_box: *tau_box,
                ..Default::default()
            };
            emit_json(&aggregate_bounds(&anns, &atlas, &cfg), output.as_deref())
        }
        RegionsCommand::Match {
            keywords,
            atlas,
            output,
        } => {
            let atlas = load_atlas(atlas)?;
            let act = match_keywords(&collect_keywords(keywords)?, &atlas, keywords.threshold)?;
            emit_json(&act, output.as_deref())
        }
        RegionsCommand::Mask {
            keywords,
            atlas,
            size,
            output,
            pgm,
        } => {
            if *size == 0 {
                return Err(Error::Config("mask size must be positive".into()));
            }
            let atlas = load_atlas(atlas)?;
            let act = match_keywords(&collect_keywords(keywords)?, &atlas, keywords.threshold)?;
            let mask = render_mask(&act, &atlas, *size, *size)?;
            write_map(&mask, output, pgm.as_deref())
        }
    }
}

/// Report text from a report JSON, a sectioned text or plain text.
fn report_text(raw: &str) -> String {
    if let Ok(r) = serde_json::from_str::<GeneratedReport>(raw) {
        return format!("{}\n{}", r.findings, r.impression);
    }
    match parse_sections(raw) {
        Some((f, i)) => format!("{f}\n{i}"),
        None => raw.to_string(),
    }
}

#[derive(Deserialize)]
struct EvalLine {
    #[serde(default)]
    id: Option<String>,
    candidate: PathBuf,
    reference: PathBuf,
    #[serde(default)]
    keywords: Vec<String>,
}

fn summarize_scores(scores: &[ReportScores]) -> serde_json::Map<String, Value> {
    let mut fields: Vec<(String, Vec<f64>)> = Vec::new();
    let mut push = |name: &str, v: f64| match fields.iter_mut().find(|(n, _)| n == name) {
        Some((_, vals)) => vals.push(v),
        None => fields.push((name.to_string(), vec![v])),
    };
    for s in scores {
        for (n, b) in s.bleu.iter().enumerate() {
            push(&format!("bleu{}", n + 1), *b);
        }
        push("rouge1_f1", s.rouge1.f1);
        push("rouge2_f1", s.rouge2.f1);
        push("rouge_l_f1", s.rouge_l.f1);
        if let Some(k) = s.keyword_overlap {
            push("keyword_overlap", k);
        }
    }
    fields
        .into_iter()
        .map(|(n, vals)| {
            let ms: MeanStd = mean_std(&vals);
            (n, json!({"mean": ms.mean, "std": ms.std}))
        })
        .collect()
}

fn cmd_report(cmd: &ReportCommand) -> Result<Option<u8>> {
    match cmd {
        ReportCommand::Gen {
            predictions,
            style,
            gate,
            max_retries,
            base_delay,
            timeout,
            virtual_clock,
            atlas,
            prompt_out,
            output,
        } => {
            let style: TemplateStyle = style.parse()?;
            let atlas = load_atlas(atlas)?;
            let preds = parse_predictions(&read_text(predictions)?)?;
            let bundle = prompt_from_predictions(&preds, *gate, &atlas, style)?;
            if let Some(p) = prompt_out {
                let text = bundle.full_text();
                write_atomic(p, |w| Ok(w.write_all(text.as_bytes())?))?;
            }
            let policy = RetryPolicy {
                max_retries: *max_retries,
                base_delay_s: *base_delay,
                timeout_s: *timeout,
            };
            policy.validate()?;
            let mut client = client_from_env(Duration::from_secs_f64(*timeout));
            let mut vclock = VirtualClock::default();
            let mut sclock = SystemClock;
            let clock: &mut dyn Clock = if *virtual_clock {
                &mut vclock
            } else {
                &mut sclock
            };
            let outcome = generate(&bundle, &atlas, client.as_mut(), &policy, clock)?;
            emit_json(&outcome.report, output.as_deref())?;
            if let Some(err) = &outcome.last_error {
                eprintln!(
                    "error: text generation failed after {} attempts ({err}); fallback report written",
                    outcome.attempts
                );
                return Ok(Some(5));
            }
            Ok(None)
        }
        ReportCommand::Eval {
            candidate,
            reference,
            keywords,
            manifest,
            output,
        } => {
            if let Some(m) = manifest {
                let base = m.parent().unwrap_or(Path::new("."));
                let mut entries = Vec::new();
                let mut scores = Vec::new();
                for (i, line) in read_text(m)?.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let e: EvalLine = serde_json::from_str(line)
                        .map_err(|err| Error::Parse(format!("manifest line {}: {err}", i + 1)))?;
                    let cand = report_text(&read_text(&resolve(base, &e.candidate))?);
                    let refr = report_text(&read_text(&resolve(base, &e.reference))?);
                    let s = score_report(&cand, &refr, &e.keywords)?;
                    entries.push(json!({"id": e.id.unwrap_or_else(|| i.to_string()), "scores": s}));
                    scores.push(s);
                }
                let out = json!({"n": scores.len(), "entries": entries, "summary": summarize_scores(&scores)});
                emit_json(&out, output.as_deref())?;
            } else {
                let (Some(c), Some(r)) = (candidate, reference) else {
                    return Err(Error::Config("candidate and reference are required".into()));
                };
                let cand = report_text(&read_text(c)?);
                let refr = report_text(&read_text(r)?);
                emit_json(&score_report(&cand, &refr, keywords)?, output.as_deref())?;
            }
            Ok(None)
        }
    }
}

fn run(cli: Cli) -> Result<Option<u8>> {
    match &cli.command {
        Command::Normalize {
            input,
            viewport,
            output,
        } => cmd_normalize(input, viewport.as_deref(), output)?,
        Command::Heatmap {
            fixations,
            viewport,
            size,
            sigma,
            weighting,
            pupil_weight,
            output,
            pgm,
        } => cmd_heatmap(
            fixations,
            viewport.as_deref(),
            *size,
            *sigma,
            *weighting,
            *pupil_weight,
            output,
            pgm.as_deref(),
        )?,
        Command::Loss {
            model,
            gaze,
            n_fix,
            q_score,
            multiscale,
        } => cmd_loss(model, gaze, *n_fix, *q_score, *multiscale)?,
        Command::Metrics {
            model,
            gaze,
            fixations,
            viewport,
        } => cmd_metrics(model, gaze, fixations, viewport.as_deref())?,
        Command::MetricsBatch { manifest, output } => {
            cmd_metrics_batch(manifest, output.as_deref())?
        }
        Command::Regions(cmd) => cmd_regions(cmd)?,
        Command::Report(cmd) => return cmd_report(cmd),
    }
    Ok(None)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(code)) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
