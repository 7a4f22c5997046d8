//! Prompt assembly, text-generation orchestration with retries, and the
//! keyword-filter plumbing for report generation.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::condition::Condition;
use crate::error::{Error, Result};
use crate::regions::{match_keywords, RegionActivation, RegionAtlas, DEFAULT_MATCH_THRESHOLD};

pub const GATE_THRESHOLD: f64 = 0.60;
pub const KEYWORD_BATCH_SIZE: usize = 30;
pub const ENDPOINT_ENV: &str = "GAZE_ALIGN_LLM_ENDPOINT";

/// Terms that must never reach the generator.
pub const FORBIDDEN_PROMPT_TERMS: [&str; 3] = ["attention map", "saliency", "heatmap"];

const TEMPLATE: &str = include_str!("../assets/prompt_template_v1.txt");
pub const TEMPLATE_VERSION: &str = "1";

const NORMAL_STUDY_LINE: &str = "No focal consolidation, pleural effusion, or pneumothorax.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredKeyword {
    pub term: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionPrediction {
    pub condition: Condition,
    pub probability: f64,
    #[serde(default)]
    pub keywords: Vec<ScoredKeyword>,
}

impl ConditionPrediction {
    pub fn new(condition: Condition, probability: f64) -> Self {
        Self {
            condition,
            probability,
            keywords: Vec::new(),
        }
    }

    pub fn with_keyword(mut self, term: &str, confidence: f64) -> Self {
        self.keywords.push(ScoredKeyword {
            term: term.to_string(),
            confidence,
        });
        self
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.probability) {
            return Err(Error::Precondition(format!(
                "{}: probability {} outside [0, 1]",
                self.condition, self.probability
            )));
        }
        if let Some(k) = self.keywords.iter().find(|k| !unit(k.confidence)) {
            return Err(Error::Precondition(format!(
                "{}: keyword {:?} confidence {} outside [0, 1]",
                self.condition, k.term, k.confidence
            )));
        }
        Ok(())
    }
}

/// Predictions as stored on disk: a bare array or `{"predictions": [...]}`.
pub fn parse_predictions(text: &str) -> Result<Vec<ConditionPrediction>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Doc {
        List(Vec<ConditionPrediction>),
        Wrapped {
            predictions: Vec<ConditionPrediction>,
        },
    }
    let doc: Doc =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("predictions: {e}")))?;
    let preds = match doc {
        Doc::List(p) | Doc::Wrapped { predictions: p } => p,
    };
    for p in &preds {
        p.validate()?;
    }
    Ok(preds)
}

/// Keep predictions with probability strictly above `threshold`.
pub fn gate_conditions(
    preds: &[ConditionPrediction],
    threshold: f64,
) -> Result<Vec<ConditionPrediction>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "gate threshold {threshold} outside (0, 1)"
        )));
    }
    Ok(preds
        .iter()
        .filter(|p| p.probability > threshold)
        .cloned()
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Definitive,
    Qualified,
    Hedged,
}

/// Language tier for a posterior: above 0.70 definitive, 0.50 to 0.70
/// inclusive qualified, below 0.50 hedged.
pub fn confidence_tier(p: f64) -> Tier {
    if p > 0.70 {
        Tier::Definitive
    } else if p >= 0.50 {
        Tier::Qualified
    } else {
        Tier::Hedged
    }
}

impl Tier {
    fn significance(self) -> &'static str {
        match self {
            Tier::Definitive => "HIGH",
            Tier::Qualified => "MODERATE",
            Tier::Hedged => "LOW",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateStyle {
    Standard,
    Detailed,
    Concise,
}

impl TemplateStyle {
    pub fn description(self) -> &'static str {
        match self {
            TemplateStyle::Standard => "professional chest X-ray report",
            TemplateStyle::Detailed => "comprehensive radiological analysis",
            TemplateStyle::Concise => "brief clinical summary",
        }
    }

    pub fn sections(self) -> &'static [&'static str] {
        match self {
            TemplateStyle::Detailed => &["FINDINGS", "IMPRESSION", "RECOMMENDATIONS"],
            _ => &["FINDINGS", "IMPRESSION"],
        }
    }

    pub fn length(self) -> &'static str {
        match self {
            TemplateStyle::Standard => "Moderate (2-4 sentences per section)",
            TemplateStyle::Detailed => "Extensive (4-6 sentences per section)",
            TemplateStyle::Concise => "Brief (1-2 sentences per section)",
        }
    }
}

impl FromStr for TemplateStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "standard" => Ok(TemplateStyle::Standard),
            "detailed" => Ok(TemplateStyle::Detailed),
            "concise" => Ok(TemplateStyle::Concise),
            other => Err(Error::Config(format!(
                "unknown template style {other:?} (expected standard, detailed or concise)"
            ))),
        }
    }
}

impl fmt::Display for TemplateStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateStyle::Standard => "standard",
            TemplateStyle::Detailed => "detailed",
            TemplateStyle::Concise => "concise",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_k: u32,
}

impl GenerationParams {
    /// Report generation.
    pub const REPORT: GenerationParams = GenerationParams {
        temperature: 0.3,
        top_k: 1,
    };
    /// Keyword extraction and filtering.
    pub const KEYWORDS: GenerationParams = GenerationParams {
        temperature: 0.1,
        top_k: 1,
    };
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self::REPORT
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionProvenance {
    pub condition: Condition,
    pub probability: f64,
    pub tier: Tier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordSource {
    pub keyword: String,
    pub condition: Condition,
    pub confidence: f64,
    pub region_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub conditions: Vec<ConditionProvenance>,
    pub keyword_sources: Vec<KeywordSource>,
    pub region_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_instruction: String,
    pub clinical_data_section: String,
    pub task_section: String,
    pub template_style: TemplateStyle,
    pub template_version: String,
    pub generation_params: GenerationParams,
    pub provenance: Provenance,
}

impl PromptBundle {
    pub fn full_text(&self) -> String {
        format!(
            "{}\n\n{}\n\n{}",
            self.system_instruction.trim_end(),
            self.clinical_data_section.trim_end(),
            self.task_section.trim_end()
        )
    }
}

fn template_part(tag: &str) -> &'static str {
    let marker = format!("@@{tag}\n");
    let start = TEMPLATE.find(&marker).expect("template section present") + marker.len();
    let rest = &TEMPLATE[start..];
    let end = rest.find("\n@@").map(|i| i + 1).unwrap_or(rest.len());
    &rest[..end]
}

pub fn contains_forbidden(text: &str) -> bool {
    let lower = text.to_lowercase();
    FORBIDDEN_PROMPT_TERMS.iter().any(|t| lower.contains(t))
}

fn pct(p: f64) -> String {
    format!("{:.1}%", p * 100.0)
}

fn keyword_band(c: f64) -> Option<usize> {
    if c > 0.80 {
        Some(0)
    } else if c >= 0.60 {
        Some(1)
    } else if c >= 0.40 {
        Some(2)
    } else {
        None
    }
}

/// Gate the predictions, ground their keywords in the atlas, and build the
/// prompt.
pub fn prompt_from_predictions(
    preds: &[ConditionPrediction],
    gate: f64,
    atlas: &RegionAtlas,
    style: TemplateStyle,
) -> Result<PromptBundle> {
    let gated = gate_conditions(preds, gate)?;
    let keywords: Vec<&str> = gated
        .iter()
        .flat_map(|p| p.keywords.iter().map(|k| k.term.as_str()))
        .collect();
    let activation = if keywords.is_empty() {
        RegionActivation::empty(atlas.regions.len())
    } else {
        match_keywords(&keywords, atlas, DEFAULT_MATCH_THRESHOLD)?
    };
    assemble_prompt(&gated, &activation, atlas, style)
}

/// Build the three-part prompt for the gated conditions.
///
/// Keywords whose text would put a prohibited term in the prompt are
/// dropped. Output is a pure function of the inputs.
pub fn assemble_prompt(
    gated: &[ConditionPrediction],
    activation: &RegionActivation,
    atlas: &RegionAtlas,
    style: TemplateStyle,
) -> Result<PromptBundle> {
    for p in gated {
        p.validate()?;
    }
    if activation.flags.len() != atlas.regions.len() {
        return Err(Error::Shape(format!(
            "activation has {} flags, atlas has {} regions",
            activation.flags.len(),
            atlas.regions.len()
        )));
    }

    let region_of: HashMap<&str, &str> = activation
        .matched
        .iter()
        .map(|m| (m.keyword.as_str(), m.region_id.as_str()))
        .collect();

    let mut provenance = Provenance::default();
    let mut clinical = String::from(
        "=== CLINICAL ANALYSIS DATA ===\n\n   MODEL PREDICTIONS (Clinical Decision Basis):\n",
    );
    if gated.is_empty() {
        clinical.push_str("No condition exceeded the reporting threshold.\n");
    }
    let mut bands: [Vec<&str>; 3] = Default::default();
    for p in gated {
        let tier = confidence_tier(p.probability);
        provenance.conditions.push(ConditionProvenance {
            condition: p.condition,
            probability: p.probability,
            tier,
        });
        let kws: Vec<&ScoredKeyword> = p
            .keywords
            .iter()
            .filter(|k| !contains_forbidden(&k.term))
            .collect();
        clinical.push_str(&format!(
            "\nCondition: {}\n- Confidence: {}\n- Clinical Significance: {}\n- Keywords: {}\n",
            p.condition,
            pct(p.probability),
            tier.significance(),
            if kws.is_empty() {
                "none".to_string()
            } else {
                kws.iter()
                    .map(|k| k.term.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            }
        ));
        for k in kws {
            if let Some(b) = keyword_band(k.confidence) {
                bands[b].push(&k.term);
            }
            provenance.keyword_sources.push(KeywordSource {
                keyword: k.term.clone(),
                condition: p.condition,
                confidence: k.confidence,
                region_id: region_of.get(k.term.as_str()).map(|s| s.to_string()),
            });
        }
    }

    clinical.push_str("\n   CLINICAL KEYWORDS (Condition-Based):\n");
    let band_titles = [
        "High Confidence (>80%)",
        "Moderate Confidence (60-80%)",
        "Lower Confidence (40-60%)",
    ];
    let mut any_band = false;
    for (title, terms) in band_titles.iter().zip(&bands) {
        if !terms.is_empty() {
            any_band = true;
            clinical.push_str(&format!("\n{title}:\n- {}\n", terms.join(", ")));
        }
    }
    if !any_band {
        clinical.push_str("None provided.\n");
    }

    // keyword-activated regions lead; condition-matrix regions follow
    let mut primary: Vec<(usize, BTreeSet<Condition>)> = Vec::new();
    for idx in activation.active_indices() {
        let id = &atlas.regions[idx].region_id;
        let conds = provenance
            .keyword_sources
            .iter()
            .filter(|s| s.region_id.as_deref() == Some(id))
            .map(|s| s.condition)
            .collect();
        primary.push((idx, conds));
    }
    let mut secondary: Vec<(usize, BTreeSet<Condition>)> = Vec::new();
    for p in gated {
        let Some(entry) = atlas.condition_entry(p.condition) else {
            continue;
        };
        for (list, is_primary) in [(&entry.primary, true), (&entry.secondary, false)] {
            for id in list {
                let Some(idx) = atlas.index_of(id) else {
                    continue;
                };
                let target = if is_primary {
                    &mut primary
                } else {
                    &mut secondary
                };
                if let Some((_, c)) = target.iter_mut().find(|(i, _)| *i == idx) {
                    c.insert(p.condition);
                } else {
                    target.push((idx, BTreeSet::from([p.condition])));
                }
            }
        }
    }
    secondary.retain(|(i, _)| !primary.iter().any(|(j, _)| j == i));

    clinical.push_str("\nRELEVANT ANATOMICAL REGIONS (Condition-Based):\n");
    let describe = |list: &[(usize, BTreeSet<Condition>)]| -> String {
        list.iter()
            .map(|(i, conds)| {
                let assoc = if conds.is_empty() {
                    "keyword match".to_string()
                } else {
                    conds
                        .iter()
                        .map(|c| c.name())
                        .collect::<Vec<_>>()
                        .join(", ")
                };
                format!("- {}: {}\n", atlas.regions[*i].display_name(), assoc)
            })
            .collect()
    };
    if primary.is_empty() && secondary.is_empty() {
        clinical.push_str("\nNo specific regions implicated.\n");
    }
    if !primary.is_empty() {
        clinical.push_str("\nPrimary Focus Areas:\n");
        clinical.push_str(&describe(&primary));
    }
    if !secondary.is_empty() {
        clinical.push_str("\nSecondary Areas:\n");
        clinical.push_str(&describe(&secondary));
    }
    provenance.region_indices = primary.iter().chain(&secondary).map(|(i, _)| *i).collect();
    provenance.region_indices.sort_unstable();

    let case_instructions = if gated.is_empty() {
        format!(
            "- No condition exceeded the reporting threshold; treat this as a normal study.\n\
             - If the study is normal and high confidence, use definitive phrases: \"{NORMAL_STUDY_LINE}\""
        )
    } else {
        gated
            .iter()
            .map(|p| {
                let how = match confidence_tier(p.probability) {
                    Tier::Definitive => "report definitively",
                    Tier::Qualified => "report with qualified language",
                    Tier::Hedged => "mention only with hedged language",
                };
                format!("- {} ({}): {how}", p.condition, pct(p.probability))
            })
            .collect::<Vec<_>>()
            .join("\n")
    };

    let system_instruction =
        template_part("SYSTEM").replace("{reporting_style}", style.description());
    let task_section = template_part("TASK")
        .replace("{template_style}", style.description())
        .replace("{sections}", &style.sections().join(", "))
        .replace("{length}", style.length())
        .replace("{case_instructions}", &case_instructions);

    let bundle = PromptBundle {
        system_instruction,
        clinical_data_section: clinical,
        task_section,
        template_style: style,
        template_version: TEMPLATE_VERSION.to_string(),
        generation_params: GenerationParams::REPORT,
        provenance,
    };
    if contains_forbidden(&bundle.full_text()) {
        // condition and region names come from fixed vocabularies, so
        // reaching this means the atlas itself carries a prohibited term
        return Err(Error::Precondition(
            "assembled prompt contains a prohibited term".into(),
        ));
    }
    Ok(bundle)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub temperature: f64,
    pub top_k: u32,
}

impl GenerationRequest {
    pub fn new(prompt: String, params: GenerationParams) -> Self {
        Self {
            prompt,
            temperature: params.temperature,
            top_k: params.top_k,
        }
    }
}

/// Prompt in, text out; failures are reported as `Error::Client`.
pub trait TextGenClient {
    fn complete(&mut self, request: &GenerationRequest) -> Result<String>;
}

pub const KEYWORD_FILTER_HEADER: &str = "=== KEYWORD RELEVANCE CHECK ===";

/// Deterministic local generator. Reports name the conditions listed in
/// the prompt; keyword-filter prompts get YES for every term.
#[derive(Debug, Clone, Default)]
pub struct StubClient;

impl TextGenClient for StubClient {
    fn complete(&mut self, request: &GenerationRequest) -> Result<String> {
        let prompt = &request.prompt;
        if prompt.contains(KEYWORD_FILTER_HEADER) {
            let out: Vec<String> = prompt
                .lines()
                .filter_map(|l| l.strip_prefix("- "))
                .map(|t| format!("{t}: YES"))
                .collect();
            return Ok(out.join("\n"));
        }
        let conditions: Vec<String> = prompt
            .lines()
            .filter_map(|l| l.strip_prefix("Condition: "))
            .map(|c| c.trim().to_lowercase())
            .collect();
        if conditions.is_empty() {
            return Ok(format!(
                "FINDINGS:\nLung volumes are normal. {NORMAL_STUDY_LINE} The heart is normal in size.\n\n\
                 IMPRESSION:\nNo acute cardiopulmonary process."
            ));
        }
        let list = conditions.join(", ");
        Ok(format!(
            "FINDINGS:\nThe radiograph demonstrates findings consistent with {list}. No pneumothorax.\n\n\
             IMPRESSION:\nFindings consistent with {list}."
        ))
    }
}

/// Replays a fixed sequence of responses; `None` entries fail. Once the
/// script runs out every call fails.
#[derive(Debug, Clone, Default)]
pub struct ScriptedClient {
    script: VecDeque<Option<String>>,
    pub calls: usize,
}

impl ScriptedClient {
    pub fn new<I: IntoIterator<Item = Option<String>>>(script: I) -> Self {
        Self {
            script: script.into_iter().collect(),
            calls: 0,
        }
    }

    pub fn always_failing() -> Self {
        Self::default()
    }
}

impl TextGenClient for ScriptedClient {
    fn complete(&mut self, _request: &GenerationRequest) -> Result<String> {
        self.calls += 1;
        match self.script.pop_front() {
            Some(Some(text)) => Ok(text),
            _ => Err(Error::Client(format!(
                "scripted failure on call {}",
                self.calls
            ))),
        }
    }
}

/// JSON-over-HTTP client. POSTs the request JSON and accepts either a JSON
/// object with a `text`, `output`, `response` or `content` string, or a
/// plain-text body.
pub struct HttpClient {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build();
        Self {
            endpoint: endpoint.to_string(),
            agent: config.into(),
        }
    }

    /// A client for `$GAZE_ALIGN_LLM_ENDPOINT`, if set and non-empty.
    pub fn from_env(timeout: Duration) -> Option<Self> {
        std::env::var(ENDPOINT_ENV)
            .ok()
            .filter(|s| !s.trim().is_empty())
            .map(|url| Self::new(url.trim(), timeout))
    }
}

/// The HTTP client when the endpoint variable is set, otherwise the stub.
pub fn client_from_env(timeout: Duration) -> Box<dyn TextGenClient + Send> {
    match HttpClient::from_env(timeout) {
        Some(c) => Box::new(c),
        None => Box::new(StubClient),
    }
}

impl TextGenClient for HttpClient {
    fn complete(&mut self, request: &GenerationRequest) -> Result<String> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(request)
            .map_err(|e| Error::Client(e.to_string()))?;
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Client(e.to_string()))?;
        if let Ok(serde_json::Value::Object(obj)) = serde_json::from_str(&body) {
            for key in ["text", "output", "response", "content"] {
                if let Some(serde_json::Value::String(s)) = obj.get(key) {
                    return Ok(s.clone());
                }
            }
            return Err(Error::Client("response JSON has no text field".into()));
        }
        Ok(body)
    }
}

pub trait Clock {
    fn sleep(&mut self, d: Duration);
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn sleep(&mut self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Records requested sleeps instead of blocking.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock {
    pub sleeps: Vec<Duration>,
}

impl VirtualClock {
    pub fn elapsed(&self) -> Duration {
        self.sleeps.iter().sum()
    }
}

impl Clock for VirtualClock {
    fn sleep(&mut self, d: Duration) {
        self.sleeps.push(d);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_s: f64,
    /// Per-request client timeout.
    pub timeout_s: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 5,
            base_delay_s: 3.0,
            timeout_s: 120.0,
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_delay_s > 0.0 && self.base_delay_s.is_finite()) {
            return Err(Error::Config("base delay must be positive".into()));
        }
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(Error::Config("timeout must be positive".into()));
        }
        Ok(())
    }

    /// Delay before retry `k` (0-based): `base · 3^k`.
    pub fn delay(&self, k: u32) -> Duration {
        Duration::from_secs_f64(self.base_delay_s * 3f64.powi(k as i32))
    }

    pub fn schedule(&self) -> Vec<Duration> {
        (0..self.max_retries).map(|k| self.delay(k)).collect()
    }
}

/// Call `op` until it succeeds, sleeping `base · 3^k` before retry `k`.
/// Returns the last error once retries are exhausted, along with the
/// number of attempts made.
pub fn with_retries<T>(
    policy: &RetryPolicy,
    clock: &mut dyn Clock,
    mut op: impl FnMut() -> Result<T>,
) -> (Result<T>, u32) {
    let mut attempt = 0;
    loop {
        let res = op();
        attempt += 1;
        match res {
            Ok(v) => return (Ok(v), attempt),
            Err(e) if attempt > policy.max_retries => return (Err(e), attempt),
            Err(_) => clock.sleep(policy.delay(attempt - 1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedReport {
    pub findings: String,
    pub impression: String,
    pub provenance: Provenance,
    pub fallback_used: bool,
}

impl GeneratedReport {
    pub fn to_text(&self) -> String {
        format!(
            "FINDINGS:\n{}\n\nIMPRESSION:\n{}\n",
            self.findings, self.impression
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutcome {
    pub report: GeneratedReport,
    pub attempts: u32,
    pub last_error: Option<String>,
}

fn header_body<'a>(line: &'a str, header: &str) -> Option<&'a str> {
    let t = line.trim_start_matches(|c: char| c.is_whitespace() || c == '#' || c == '*');
    let head = t.get(..header.len())?;
    if !head.eq_ignore_ascii_case(header) {
        return None;
    }
    let rest = t[header.len()..].trim_start_matches('*');
    rest.strip_prefix(':').map(|r| r.trim_start_matches('*'))
}

/// Split model output into findings and impression. Headers are matched
/// case-insensitively at line starts; findings run from the first
/// `FINDINGS:` to the next `IMPRESSION:` and the impression is the rest.
pub fn parse_sections(text: &str) -> Option<(String, String)> {
    let lines: Vec<&str> = text.lines().collect();
    let fi = lines
        .iter()
        .position(|l| header_body(l, "FINDINGS").is_some())?;
    let ii = fi
        + 1
        + lines[fi + 1..]
            .iter()
            .position(|l| header_body(l, "IMPRESSION").is_some())?;
    let join = |first: &str, rest: &[&str]| -> String {
        std::iter::once(first)
            .chain(rest.iter().copied())
            .collect::<Vec<_>>()
            .join("\n")
            .trim()
            .to_string()
    };
    let findings = join(header_body(lines[fi], "FINDINGS")?, &lines[fi + 1..ii]);
    let impression = join(header_body(lines[ii], "IMPRESSION")?, &lines[ii + 1..]);
    if findings.is_empty() || impression.is_empty() {
        return None;
    }
    Some((findings, impression))
}

/// Deterministic report built from the gated conditions and their tiers.
pub fn fallback_report(bundle: &PromptBundle, atlas: &RegionAtlas) -> GeneratedReport {
    let conds = &bundle.provenance.conditions;
    let (findings, impression) = if conds.is_empty() {
        (
            format!("{NORMAL_STUDY_LINE} The heart is normal in size."),
            "No acute cardiopulmonary process.".to_string(),
        )
    } else {
        let phrase = |c: &ConditionProvenance| {
            let name = c.condition.name().to_lowercase();
            match c.tier {
                Tier::Definitive => format!("Findings are consistent with {name}."),
                Tier::Qualified => format!("Findings are suggestive of {name}."),
                Tier::Hedged => format!("Possible {name} cannot be excluded."),
            }
        };
        let mut findings: Vec<String> = conds.iter().map(phrase).collect();
        let regions: Vec<String> = bundle
            .provenance
            .region_indices
            .iter()
            .filter_map(|&i| atlas.regions.get(i))
            .map(|r| r.display_name().to_lowercase())
            .collect();
        if !regions.is_empty() {
            findings.push(format!("Regions of interest: {}.", regions.join(", ")));
        }
        let names: Vec<String> = conds
            .iter()
            .map(|c| {
                format!(
                    "{} ({})",
                    c.condition.name().to_lowercase(),
                    pct(c.probability)
                )
            })
            .collect();
        (
            findings.join(" "),
            format!(
                "Automated summary: {}. Report generated without the language model; clinical review required.",
                names.join(", ")
            ),
        )
    };
    GeneratedReport {
        findings,
        impression,
        provenance: bundle.provenance.clone(),
        fallback_used: true,
    }
}

/// Send the prompt, retrying failures and unparseable replies, and fall
/// back to a local report when every attempt fails.
pub fn generate(
    bundle: &PromptBundle,
    atlas: &RegionAtlas,
    client: &mut dyn TextGenClient,
    policy: &RetryPolicy,
    clock: &mut dyn Clock,
) -> Result<GenerationOutcome> {
    policy.validate()?;
    let request = GenerationRequest::new(bundle.full_text(), bundle.generation_params);
    let (res, attempts) = with_retries(policy, clock, || {
        let text = client.complete(&request)?;
        parse_sections(&text)
            .ok_or_else(|| Error::Client("reply lacks FINDINGS/IMPRESSION sections".into()))
    });
    Ok(match res {
        Ok((findings, impression)) => GenerationOutcome {
            report: GeneratedReport {
                findings,
                impression,
                provenance: bundle.provenance.clone(),
                fallback_used: false,
            },
            attempts,
            last_error: None,
        },
        Err(e) => GenerationOutcome {
            report: fallback_report(bundle, atlas),
            attempts,
            last_error: Some(e.to_string()),
        },
    })
}

/// Contiguous batches of at most `batch_size`, order preserved.
pub fn keyword_filter_batches<T: Clone>(items: &[T], batch_size: usize) -> Result<Vec<Vec<T>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    Ok(items.chunks(batch_size).map(<[T]>::to_vec).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Yes,
    No,
}

/// Candidate keyword for a condition, with the extractor's confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordCandidate {
    pub condition: Condition,
    pub term: String,
    pub confidence: f64,
}

/// Keep candidates judged YES. Confidence plays no part in the decision.
pub fn filter_keywords(
    candidates: &[KeywordCandidate],
    verdicts: &HashMap<String, Verdict>,
) -> Result<Vec<KeywordCandidate>> {
    let mut kept = Vec::new();
    for c in candidates {
        match verdicts.get(&c.term) {
            Some(Verdict::Yes) => kept.push(c.clone()),
            Some(Verdict::No) => {}
            None => {
                return Err(Error::Precondition(format!(
                    "no verdict for keyword {:?}",
                    c.term
                )))
            }
        }
    }
    Ok(kept)
}

/// Prompt asking for a YES/NO relevance verdict on each term of a batch.
pub fn keyword_filter_prompt(batch: &[KeywordCandidate]) -> String {
    let mut s = format!(
        "{KEYWORD_FILTER_HEADER}\nFor each term below, answer on its own line as `term: YES` if it is a \
         clinically meaningful chest X-ray finding for the stated condition, or `term: NO` otherwise.\n\n"
    );
    for c in batch {
        s.push_str(&format!("- {}\n", c.term));
    }
    let conds: BTreeSet<&str> = batch.iter().map(|c| c.condition.name()).collect();
    s.push_str(&format!(
        "\nConditions: {}\n",
        conds.into_iter().collect::<Vec<_>>().join(", ")
    ));
    s
}

/// Parse `term: YES|NO` lines; every term of the batch must be answered.
pub fn parse_verdicts(text: &str, batch: &[KeywordCandidate]) -> Result<HashMap<String, Verdict>> {
    let mut out = HashMap::new();
    for line in text.lines() {
        let line = line.trim().trim_start_matches("- ");
        let Some((term, v)) = line.rsplit_once(':') else {
            continue;
        };
        let v = match v.trim().to_ascii_uppercase().as_str() {
            "YES" => Verdict::Yes,
            "NO" => Verdict::No,
            _ => continue,
        };
        out.insert(term.trim().to_string(), v);
    }
    if let Some(c) = batch.iter().find(|c| !out.contains_key(&c.term)) {
        return Err(Error::Client(format!(
            "no verdict returned for {:?}",
            c.term
        )));
    }
    Ok(out)
}

/// Submit candidates in batches and collect verdicts, retrying each batch
/// under `policy`.
pub fn collect_verdicts(
    candidates: &[KeywordCandidate],
    batch_size: usize,
    client: &mut dyn TextGenClient,
    policy: &RetryPolicy,
    clock: &mut dyn Clock,
) -> Result<HashMap<String, Verdict>> {
    policy.validate()?;
    let mut verdicts = HashMap::new();
    for batch in keyword_filter_batches(candidates, batch_size)? {
        let req = GenerationRequest::new(keyword_filter_prompt(&batch), GenerationParams::KEYWORDS);
        let (res, _) = with_retries(policy, clock, || {
            let text = client.complete(&req)?;
            parse_verdicts(&text, &batch)
        });
        verdicts.extend(res?);
    }
    Ok(verdicts)
}
