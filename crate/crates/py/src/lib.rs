//! Python bindings. Maps are nested lists (rows of floats); structured
//! results come back as dicts.

use std::time::Duration;

use gaze_align::error::Error;
use gaze_align::fixation::{read_fixations, FixationRecord, FixationSequence, ImageViewport};
use gaze_align::regions::{aggregate_bounds, read_annotations_csv, AggregationConfig, RegionAtlas};
use gaze_align::report::{
    client_from_env, generate, parse_predictions, prompt_from_predictions, RetryPolicy,
    SystemClock, TemplateStyle,
};
use gaze_align::saliency::{default_sigma, AttentionMap, DistributionView};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pythonize::pythonize;
use serde::Serialize;

fn to_py(e: Error) -> PyErr {
    match e.root() {
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        Error::Client(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn dict<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    Ok(pythonize(py, value)?)
}

fn to_map(rows: Vec<Vec<f64>>) -> PyResult<AttentionMap> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err(
            "map rows must all have the same length",
        ));
    }
    AttentionMap::new(h, w, rows.concat()).map_err(to_py)
}

fn rows(values: &[f64], width: usize) -> Vec<Vec<f64>> {
    values.chunks(width).map(<[f64]>::to_vec).collect()
}

fn from_map(map: &AttentionMap) -> Vec<Vec<f64>> {
    rows(map.values(), map.width())
}

fn to_sequence(fixations: Vec<(f64, f64, f64)>) -> FixationSequence {
    FixationSequence::from_records(
        fixations
            .into_iter()
            .map(|(x, y, duration)| FixationRecord {
                x,
                y,
                duration,
                pupil: 1.0,
                t_start: 0.0,
                valid: true,
            })
            .collect(),
    )
}

fn to_dist(p: Vec<f64>) -> PyResult<DistributionView> {
    DistributionView::new(p).map_err(to_py)
}

/// Mean pupil area from left and right diameters.
#[pyfunction]
fn pupil_area(lpd: f64, rpd: f64) -> PyResult<f64> {
    gaze_align::fixation::pupil_area(lpd, rpd).map_err(to_py)
}

/// Harmonize fixation CSV text into unit-square coordinates.
#[pyfunction]
#[pyo3(signature = (csv_text, image_bounds=None, screen_bounds=None))]
fn harmonize_csv<'py>(
    py: Python<'py>,
    csv_text: &str,
    image_bounds: Option<[f64; 4]>,
    screen_bounds: Option<[f64; 4]>,
) -> PyResult<Bound<'py, PyAny>> {
    let vp = match (image_bounds, screen_bounds) {
        (Some(i), Some(s)) => Some(ImageViewport::new(i, s).map_err(to_py)?),
        (None, None) => None,
        _ => {
            return Err(PyValueError::new_err(
                "give both image_bounds and screen_bounds or neither",
            ))
        }
    };
    dict(py, &read_fixations(csv_text, vp.as_ref()).map_err(to_py)?)
}

/// Duration-weighted Gaussian fixation heatmap from (x, y, duration) tuples.
#[pyfunction]
#[pyo3(signature = (fixations, height, width, sigma=None))]
fn render_heatmap(
    fixations: Vec<(f64, f64, f64)>,
    height: usize,
    width: usize,
    sigma: Option<f64>,
) -> PyResult<Vec<Vec<f64>>> {
    let sigma = sigma.unwrap_or_else(|| default_sigma(height, width));
    let map = gaze_align::saliency::render_heatmap(&to_sequence(fixations), height, width, sigma)
        .map_err(to_py)?;
    Ok(from_map(&map))
}

/// Gaze loss terms; "grad" is the gradient of "total" with respect to
/// the model map.
#[pyfunction]
fn gaze_loss<'py>(
    py: Python<'py>,
    model: Vec<Vec<f64>>,
    gaze: Vec<Vec<f64>>,
    n_fix: usize,
    q_score: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let model = to_map(model)?;
    let loss =
        gaze_align::losses::gaze_loss(&model, &to_map(gaze)?, n_fix, q_score).map_err(to_py)?;
    let mut out = serde_json::to_value(&loss).map_err(|e| to_py(e.into()))?;
    out["grad"] = serde_json::json!(rows(&loss.grads.total, model.width()));
    dict(py, &out)
}

/// Alignment metrics between a model map and a fixation map.
#[pyfunction]
fn alignment_report<'py>(
    py: Python<'py>,
    model: Vec<Vec<f64>>,
    gaze: Vec<Vec<f64>>,
    fixations: Vec<(f64, f64, f64)>,
) -> PyResult<Bound<'py, PyAny>> {
    let report = gaze_align::metrics::alignment_report(
        &to_map(model)?,
        &to_map(gaze)?,
        &to_sequence(fixations),
    )
    .map_err(to_py)?;
    dict(py, &report)
}

/// Jensen-Shannon divergence in bits.
#[pyfunction]
fn jensen_shannon(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    gaze_align::metrics::jensen_shannon(&to_dist(p)?, &to_dist(q)?).map_err(to_py)
}

/// Shannon entropy in bits.
#[pyfunction]
fn entropy_bits(p: Vec<f64>) -> PyResult<f64> {
    Ok(gaze_align::metrics::entropy_bits(&to_dist(p)?))
}

/// Match free-text keywords to atlas regions.
#[pyfunction]
#[pyo3(signature = (keywords, threshold=gaze_align::regions::DEFAULT_MATCH_THRESHOLD))]
fn match_keywords<'py>(
    py: Python<'py>,
    keywords: Vec<String>,
    threshold: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let act = gaze_align::regions::match_keywords(&keywords, &RegionAtlas::builtin(), threshold)
        .map_err(to_py)?;
    dict(py, &act)
}

/// Aggregate bounding-box annotations given as CSV text.
#[pyfunction]
#[pyo3(signature = (csv_text, tau_box=gaze_align::regions::DEFAULT_TAU_BOX))]
fn aggregate_annotations<'py>(
    py: Python<'py>,
    csv_text: &str,
    tau_box: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let rows = read_annotations_csv(csv_text.as_bytes()).map_err(to_py)?;
    let cfg = AggregationConfig {
        tau_box,
        ..AggregationConfig::default()
    };
    dict(py, &aggregate_bounds(&rows, &RegionAtlas::builtin(), &cfg))
}

/// The full prompt text for a predictions JSON document.
#[pyfunction]
#[pyo3(signature = (predictions_json, style="standard", gate=gaze_align::report::GATE_THRESHOLD))]
fn build_prompt(predictions_json: &str, style: &str, gate: f64) -> PyResult<String> {
    let style: TemplateStyle = style.parse().map_err(to_py)?;
    let preds = parse_predictions(predictions_json).map_err(to_py)?;
    let bundle =
        prompt_from_predictions(&preds, gate, &RegionAtlas::builtin(), style).map_err(to_py)?;
    Ok(bundle.full_text())
}

/// Generate a report with the client selected from the environment.
/// Returns {"report", "attempts", "error"}; "error" is None unless the
/// client was exhausted and the fallback report was used.
#[pyfunction]
#[pyo3(signature = (predictions_json, style="standard", gate=gaze_align::report::GATE_THRESHOLD))]
fn generate_report<'py>(
    py: Python<'py>,
    predictions_json: &str,
    style: &str,
    gate: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let style: TemplateStyle = style.parse().map_err(to_py)?;
    let atlas = RegionAtlas::builtin();
    let preds = parse_predictions(predictions_json).map_err(to_py)?;
    let bundle = prompt_from_predictions(&preds, gate, &atlas, style).map_err(to_py)?;
    let policy = RetryPolicy::default();
    let mut client = client_from_env(Duration::from_secs_f64(policy.timeout_s));
    let outcome = py
        .detach(|| generate(&bundle, &atlas, client.as_mut(), &policy, &mut SystemClock))
        .map_err(to_py)?;
    let out = serde_json::json!({
        "report": outcome.report,
        "attempts": outcome.attempts,
        "error": outcome.last_error.map(|e| e.to_string()),
    });
    dict(py, &out)
}

/// BLEU with n-grams up to `max_n`.
#[pyfunction]
#[pyo3(signature = (candidate, reference, max_n=4))]
fn bleu<'py>(
    py: Python<'py>,
    candidate: &str,
    reference: &str,
    max_n: usize,
) -> PyResult<Bound<'py, PyAny>> {
    dict(
        py,
        &gaze_align::text_metrics::bleu(candidate, reference, max_n).map_err(to_py)?,
    )
}

/// ROUGE-L precision, recall and F1.
#[pyfunction]
fn rouge_l<'py>(py: Python<'py>, candidate: &str, reference: &str) -> PyResult<Bound<'py, PyAny>> {
    dict(py, &gaze_align::text_metrics::rouge_l(candidate, reference))
}

/// BLEU-1..4, ROUGE-1/2/L and keyword coverage in one call.
#[pyfunction]
#[pyo3(signature = (candidate, reference, keywords=Vec::new()))]
fn score_report<'py>(
    py: Python<'py>,
    candidate: &str,
    reference: &str,
    keywords: Vec<String>,
) -> PyResult<Bound<'py, PyAny>> {
    dict(
        py,
        &gaze_align::text_metrics::score_report(candidate, reference, &keywords).map_err(to_py)?,
    )
}

#[pymodule]
#[pyo3(name = "gaze_align")]
fn gaze_align_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(pupil_area, m)?)?;
    m.add_function(wrap_pyfunction!(harmonize_csv, m)?)?;
    m.add_function(wrap_pyfunction!(render_heatmap, m)?)?;
    m.add_function(wrap_pyfunction!(gaze_loss, m)?)?;
    m.add_function(wrap_pyfunction!(alignment_report, m)?)?;
    m.add_function(wrap_pyfunction!(jensen_shannon, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_bits, m)?)?;
    m.add_function(wrap_pyfunction!(match_keywords, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_annotations, m)?)?;
    m.add_function(wrap_pyfunction!(build_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(generate_report, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(score_report, m)?)?;
    m.add("GATE_THRESHOLD", gaze_align::report::GATE_THRESHOLD)?;
    Ok(())
}
