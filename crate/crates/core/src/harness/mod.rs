//! Phrase-repetition experiments: prompts, trials, verdicts and summaries.

mod endpoint;

pub use endpoint::{
    extract_path, request_body, ChatEndpoint, EchoEndpoint, EndpointConfig, FailOnEndpoint, FlakyEndpoint,
    HttpEndpoint, Reply, ScramblerEndpoint, SelectiveEndpoint, TokenizationControl,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::bpe::TokenId;
use crate::error::{Error, Result};

pub const PHRASE_SLOT: &str = "{Phrase}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateId {
    Definition,
    Doyouknow,
    Usernames,
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateId::Definition => "definition",
            TemplateId::Doyouknow => "doyouknow",
            TemplateId::Usernames => "usernames",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: TemplateId,
    pub text: String,
    /// False for text we made up rather than took from the published prompts.
    #[serde(default = "yes")]
    pub published: bool,
}

fn yes() -> bool {
    true
}

impl PromptTemplate {
    pub fn new(template_id: TemplateId, text: impl Into<String>) -> Result<Self> {
        let t = PromptTemplate {
            template_id,
            text: text.into(),
            published: false,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        match self.text.matches(PHRASE_SLOT).count() {
            1 => Ok(()),
            n => Err(Error::Config(format!(
                "template {} has {n} {PHRASE_SLOT} slots, expected exactly one",
                self.template_id
            ))),
        }
    }

    pub fn render(&self, phrase: &str) -> String {
        self.text.replacen(PHRASE_SLOT, phrase, 1)
    }

    pub fn definition() -> Self {
        PromptTemplate {
            template_id: TemplateId::Definition,
            text: "What does \"{Phrase}\" mean?".into(),
            published: true,
        }
    }

    pub fn doyouknow() -> Self {
        PromptTemplate {
            template_id: TemplateId::Doyouknow,
            text: "Today I heard about \"{Phrase}\". Do you know what this means?".into(),
            published: true,
        }
    }

    /// Placeholder; the published version of this prompt is not available as text.
    pub fn usernames_placeholder() -> Self {
        PromptTemplate {
            template_id: TemplateId::Usernames,
            text: "A user on a forum picked the username \"{Phrase}\". What might it mean?".into(),
            published: false,
        }
    }

    pub fn defaults() -> Vec<Self> {
        vec![Self::definition(), Self::doyouknow(), Self::usernames_placeholder()]
    }
}

pub fn validate_templates(templates: &[PromptTemplate]) -> Result<()> {
    if templates.len() != 3 {
        return Err(Error::Config(format!("expected 3 templates, got {}", templates.len())));
    }
    let ids: BTreeSet<_> = templates.iter().map(|t| t.template_id).collect();
    if ids.len() != 3 {
        return Err(Error::Config("template ids must be distinct".into()));
    }
    templates.iter().try_for_each(PromptTemplate::validate)
}

pub fn render_prompts(phrase: &str, templates: &[PromptTemplate]) -> Result<Vec<String>> {
    validate_templates(templates)?;
    Ok(templates.iter().map(|t| t.render(phrase)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    ImprobableNatural,
    ImprobableAlternative,
    Baseline,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::ImprobableNatural => "improbable_natural",
            Condition::ImprobableAlternative => "improbable_alternative",
            Condition::Baseline => "baseline",
        })
    }
}

/// One phrase under one condition, as stored in suite files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub phrase: String,
    pub condition: Condition,
    pub token_ids: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgePolicy {
    pub nfc: bool,
    pub strip_quotes: bool,
}

impl Default for JudgePolicy {
    fn default() -> Self {
        JudgePolicy {
            nfc: true,
            strip_quotes: true,
        }
    }
}

impl JudgePolicy {
    pub fn exact() -> Self {
        JudgePolicy {
            nfc: false,
            strip_quotes: false,
        }
    }

    pub fn label(&self) -> String {
        format!("substring(nfc={}, strip_quotes={})", self.nfc, self.strip_quotes)
    }
}

const QUOTES: &[char] = &['"', '\'', '`', '“', '”', '‘', '’', '«', '»', '「', '」', '『', '』'];

fn normalize(s: &str, policy: JudgePolicy) -> String {
    let s: String = if policy.nfc { s.nfc().collect() } else { s.to_owned() };
    if policy.strip_quotes {
        s.trim_matches(|c: char| QUOTES.contains(&c)).to_owned()
    } else {
        s
    }
}

/// True when the phrase occurs contiguously in the response. Both sides get
/// the same normalization, so a phrase always matches itself.
pub fn judge_repeat(phrase: &str, response: &str, policy: JudgePolicy) -> bool {
    normalize(response, policy).contains(normalize(phrase, policy).as_str())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub phrase: String,
    pub condition: Condition,
    pub token_ids: Vec<TokenId>,
    pub template_id: TemplateId,
    pub rendered_prompt: String,
    pub response: String,
    pub repeated: bool,
    pub tokenization: TokenizationControl,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub phrase: String,
    pub condition: Condition,
    pub hallucinatory: bool,
    pub trials: Vec<TrialRecord>,
}

impl Verdict {
    /// Hallucinatory iff no trial repeated the phrase.
    pub fn from_trials(trials: Vec<TrialRecord>) -> Result<Self> {
        let first = trials
            .first()
            .ok_or_else(|| Error::Config("verdict needs at least one trial".into()))?;
        let (phrase, condition) = (first.phrase.clone(), first.condition);
        if trials.iter().any(|t| t.phrase != phrase || t.condition != condition) {
            return Err(Error::Config("trials of one verdict must share phrase and condition".into()));
        }
        Ok(Verdict {
            hallucinatory: trials.iter().all(|t| !t.repeated),
            phrase,
            condition,
            trials,
        })
    }

    /// Recompute every repeat flag under another policy.
    pub fn rejudge(&self, policy: JudgePolicy) -> Verdict {
        let trials: Vec<_> = self
            .trials
            .iter()
            .map(|t| TrialRecord {
                repeated: judge_repeat(&t.phrase, &t.response, policy),
                ..t.clone()
            })
            .collect();
        Verdict {
            hallucinatory: trials.iter().all(|t| !t.repeated),
            trials,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub phrase: String,
    pub condition: Condition,
    pub template_id: TemplateId,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: Condition,
    pub judged: usize,
    pub hallucinatory: usize,
    /// Phrases dropped because at least one trial failed.
    pub failed: usize,
    pub rate: Option<f64>,
    pub uncontrolled_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub conditions: Vec<ConditionSummary>,
    pub reduction: Option<Reduction>,
    pub judge: String,
    pub templates: Vec<PromptTemplate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub verdicts: Vec<Verdict>,
    pub failures: Vec<TrialFailure>,
    pub summary: ExperimentSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOptions {
    pub max_parallel: usize,
    pub judge: JudgePolicy,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            max_parallel: 4,
            judge: JudgePolicy::default(),
        }
    }
}

/// Three trials per suite entry. Output follows suite order whatever the
/// completion order; a phrase with any failed trial gets no verdict.
pub fn run_experiment(
    suite: &[SuiteEntry],
    templates: &[PromptTemplate],
    endpoint: &dyn ChatEndpoint,
    opts: RunOptions,
) -> Result<ExperimentOutcome> {
    validate_templates(templates)?;
    if suite.is_empty() {
        return Err(Error::Config("suite is empty".into()));
    }
    if opts.max_parallel == 0 {
        return Err(Error::Config("max_parallel must be at least 1".into()));
    }
    let jobs: Vec<(usize, &PromptTemplate)> = (0..suite.len())
        .flat_map(|i| templates.iter().map(move |t| (i, t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.max_parallel)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<std::result::Result<TrialRecord, TrialFailure>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, t)| {
                let e = &suite[i];
                let prompt = t.render(&e.phrase);
                match endpoint.query(&prompt, Some(&e.token_ids)) {
                    Ok(reply) => Ok(TrialRecord {
                        phrase: e.phrase.clone(),
                        condition: e.condition,
                        token_ids: e.token_ids.clone(),
                        template_id: t.template_id,
                        rendered_prompt: prompt,
                        repeated: judge_repeat(&e.phrase, &reply.text, opts.judge),
                        response: reply.text,
                        tokenization: reply.tokenization,
                    }),
                    Err(err) => Err(TrialFailure {
                        phrase: e.phrase.clone(),
                        condition: e.condition,
                        template_id: t.template_id,
                        error: err.to_string(),
                    }),
                }
            })
            .collect()
    });

    let mut verdicts = Vec::new();
    let mut failures = Vec::new();
    let mut failed_by_condition: BTreeMap<Condition, usize> = BTreeMap::new();
    let mut it = results.into_iter();
    for entry in suite {
        let chunk: Vec<_> = it.by_ref().take(templates.len()).collect();
        let (ok, bad): (Vec<_>, Vec<_>) = chunk.into_iter().partition(|r| r.is_ok());
        if bad.is_empty() {
            verdicts.push(Verdict::from_trials(ok.into_iter().map(|r| r.unwrap()).collect())?);
        } else {
            *failed_by_condition.entry(entry.condition).or_default() += 1;
            failures.extend(bad.into_iter().map(|r| r.unwrap_err()));
        }
    }
    let summary = summarize(&verdicts, &failed_by_condition, opts.judge, templates);
    Ok(ExperimentOutcome {
        verdicts,
        failures,
        summary,
    })
}

pub fn summarize(
    verdicts: &[Verdict],
    failed: &BTreeMap<Condition, usize>,
    judge: JudgePolicy,
    templates: &[PromptTemplate],
) -> ExperimentSummary {
    let mut by: BTreeMap<Condition, ConditionSummary> = BTreeMap::new();
    for v in verdicts {
        let s = by.entry(v.condition).or_insert_with(|| empty_summary(v.condition));
        s.judged += 1;
        s.hallucinatory += v.hallucinatory as usize;
        s.uncontrolled_trials += v
            .trials
            .iter()
            .filter(|t| t.tokenization == TokenizationControl::Uncontrolled)
            .count();
    }
    for (&c, &n) in failed {
        by.entry(c).or_insert_with(|| empty_summary(c)).failed = n;
    }
    for s in by.values_mut() {
        s.rate = (s.judged > 0).then(|| s.hallucinatory as f64 / s.judged as f64);
    }
    let rate = |c| by.get(&c).and_then(|s: &ConditionSummary| s.rate);
    let reduction = match (rate(Condition::ImprobableNatural), rate(Condition::ImprobableAlternative)) {
        (Some(n), Some(a)) => Some(Reduction::from_rates(n, a)),
        _ => None,
    };
    ExperimentSummary {
        conditions: by.into_values().collect(),
        reduction,
        judge: judge.label(),
        templates: templates.to_vec(),
    }
}

fn empty_summary(condition: Condition) -> ConditionSummary {
    ConditionSummary {
        condition,
        judged: 0,
        hallucinatory: 0,
        failed: 0,
        rate: None,
        uncontrolled_trials: 0,
    }
}

impl ExperimentSummary {
    pub fn table(&self) -> String {
        let mut out = format!("{:<24}{:>14}{:>8}{:>8}\n", "condition", "hallucinatory", "rate", "failed");
        for s in &self.conditions {
            let rate = s.rate.map_or("n/a".to_owned(), |r| format!("{r:.2}"));
            out.push_str(&format!(
                "{:<24}{:>14}{:>8}{:>8}\n",
                s.condition.to_string(),
                format!("{}/{}", s.hallucinatory, s.judged),
                rate,
                s.failed
            ));
        }
        if let Some(r) = &self.reduction {
            out.push_str(&format!("alternative vs natural: {}\n", r.label()));
        }
        out.push_str(&format!("judge: {}\n", self.judge));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub natural_rate: f64,
    pub alternative_rate: f64,
    /// Whole percent, rounded toward negative infinity; None when the
    /// natural rate is zero.
    pub percent: Option<i64>,
}

impl Reduction {
    pub fn from_rates(natural_rate: f64, alternative_rate: f64) -> Self {
        let percent = (natural_rate > 0.0)
            .then(|| ((1.0 - alternative_rate / natural_rate) * 100.0 + 1e-9).floor() as i64);
        Reduction {
            natural_rate,
            alternative_rate,
            percent,
        }
    }

    /// `↓93%` for a reduction, the plain rate otherwise.
    pub fn label(&self) -> String {
        match self.percent {
            None => "n/a".to_owned(),
            Some(p) if p > 0 => format!("↓{p}%"),
            Some(_) => "no reduction".to_owned(),
        }
    }

    /// A comparison table cell: `0.03 (↓93%)`.
    pub fn cell(&self) -> String {
        match self.percent {
            Some(p) if p > 0 => format!("{:.2} (↓{p}%)", self.alternative_rate),
            _ => format!("{:.2}", self.alternative_rate),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub natural: ConditionSummary,
    pub alternative: ConditionSummary,
    pub reduction: Reduction,
}

/// Natural against alternative tokenization over the same phrases.
pub fn compare_conditions(verdicts: &[Verdict]) -> Result<ComparisonReport> {
    let phrases = |c| -> BTreeSet<&str> {
        verdicts
            .iter()
            .filter(|v| v.condition == c)
            .map(|v| v.phrase.as_str())
            .collect()
    };
    let nat = phrases(Condition::ImprobableNatural);
    let alt = phrases(Condition::ImprobableAlternative);
    if nat.is_empty() || alt.is_empty() {
        return Err(Error::MismatchedConditions(
            "need verdicts for both improbable_natural and improbable_alternative".into(),
        ));
    }
    if nat != alt {
        let only_nat: Vec<_> = nat.difference(&alt).collect();
        let only_alt: Vec<_> = alt.difference(&nat).collect();
        return Err(Error::MismatchedConditions(format!(
            "only natural: {only_nat:?}; only alternative: {only_alt:?}"
        )));
    }
    let s = summarize(verdicts, &BTreeMap::new(), JudgePolicy::default(), &[]);
    let get = |c| s.conditions.iter().find(|x| x.condition == c).cloned().unwrap();
    let natural = get(Condition::ImprobableNatural);
    let alternative = get(Condition::ImprobableAlternative);
    let reduction = Reduction::from_rates(natural.rate.unwrap_or(0.0), alternative.rate.unwrap_or(0.0));
    Ok(ComparisonReport {
        natural,
        alternative,
        reduction,
    })
}

/// Natural and alternative verdicts restricted to phrases judged under both.
/// Phrases whose alternative was excluded drop out of the comparison.
pub fn paired_subset(verdicts: &[Verdict]) -> Vec<Verdict> {
    let phrases = |c| -> BTreeSet<&str> {
        verdicts
            .iter()
            .filter(|v| v.condition == c)
            .map(|v| v.phrase.as_str())
            .collect()
    };
    let nat = phrases(Condition::ImprobableNatural);
    let alt = phrases(Condition::ImprobableAlternative);
    let both: BTreeSet<&str> = nat.intersection(&alt).copied().collect();
    verdicts
        .iter()
        .filter(|v| v.condition != Condition::Baseline && both.contains(v.phrase.as_str()))
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn suite(n: usize, c: Condition) -> Vec<SuiteEntry> {
        (0..n)
            .map(|i| SuiteEntry {
                phrase: format!("サーミ能{i}"),
                condition: c,
                token_ids: vec![TokenId(i as u32)],
            })
            .collect()
    }

    #[test]
    fn published_prompts() {
        let t = PromptTemplate::defaults();
        let p = render_prompts("サーミ能", &t).unwrap();
        assert_eq!(p[0], "What does \"サーミ能\" mean?");
        let p = render_prompts("x", &t).unwrap();
        assert_eq!(p[1], "Today I heard about \"x\". Do you know what this means?");
        assert!(!t[2].published);
    }

    #[test]
    fn slot_count_enforced() {
        assert!(PromptTemplate::new(TemplateId::Usernames, "no slot").is_err());
        assert!(PromptTemplate::new(TemplateId::Usernames, "{Phrase}{Phrase}").is_err());
        let t = PromptTemplate::new(TemplateId::Usernames, "user {Phrase}!").unwrap();
        assert_eq!(t.render("a{Phrase}"), "user a{Phrase}!");
        assert!(render_prompts("x", &PromptTemplate::defaults()[..2]).is_err());
    }

    #[test]
    fn judging() {
        let p = JudgePolicy::default();
        assert!(judge_repeat("サーミ能", "\"サーミ能\" appears to be a name", p));
        assert!(!judge_repeat("サーミ能", "It says サー and nothing more", p));
        assert!(judge_repeat("é", "e\u{301}", p));
        assert!(!judge_repeat("é", "e\u{301}", JudgePolicy::exact()));
        assert!(judge_repeat("x", "«x»", p));
        assert!(judge_repeat("\"x\"", "x is a letter", p));
        assert!(!judge_repeat("\"x\"", "x is a letter", JudgePolicy::exact()));
    }

    #[test]
    fn mock_runs() {
        let s = suite(20, Condition::ImprobableNatural);
        let t = PromptTemplate::defaults();
        let o = run_experiment(&s, &t, &EchoEndpoint, RunOptions::default()).unwrap();
        assert_eq!(o.summary.conditions[0].hallucinatory, 0);
        let o = run_experiment(&s, &t, &ScramblerEndpoint, RunOptions::default()).unwrap();
        assert_eq!(o.summary.conditions[0].hallucinatory, 20);
        let sel = SelectiveEndpoint {
            repeat_on: "Today".into(),
        };
        let o = run_experiment(&s, &t, &sel, RunOptions::default()).unwrap();
        assert_eq!(o.summary.conditions[0].hallucinatory, 0);
        assert!(o
            .verdicts
            .iter()
            .all(|v| v.trials.iter().filter(|t| t.repeated).count() == 1));
    }

    #[test]
    fn failures_are_excluded() {
        let s = suite(5, Condition::Baseline);
        let ep = FailOnEndpoint {
            phrase: "サーミ能3".into(),
        };
        let o = run_experiment(&s, &PromptTemplate::defaults(), &ep, RunOptions::default()).unwrap();
        assert_eq!(o.verdicts.len(), 4);
        assert_eq!(o.failures.len(), 3);
        assert_eq!(o.summary.conditions[0].failed, 1);
        assert_eq!(o.summary.conditions[0].judged, 4);
    }

    #[test]
    fn order_and_parallelism() {
        let s = suite(30, Condition::ImprobableNatural);
        let t = PromptTemplate::defaults();
        let one = run_experiment(&s, &t, &EchoEndpoint, RunOptions { max_parallel: 1, ..Default::default() }).unwrap();
        let many = run_experiment(&s, &t, &EchoEndpoint, RunOptions { max_parallel: 8, ..Default::default() }).unwrap();
        assert_eq!(one, many);
        let phrases: Vec<_> = one.verdicts.iter().map(|v| v.phrase.clone()).collect();
        assert_eq!(phrases, s.iter().map(|e| e.phrase.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn reductions() {
        assert_eq!(Reduction::from_rates(0.43, 0.03).label(), "↓93%");
        assert_eq!(Reduction::from_rates(0.73, 0.01).label(), "↓98%");
        assert_eq!(Reduction::from_rates(0.79, 0.52).cell(), "0.52 (↓34%)");
        assert_eq!(Reduction::from_rates(0.38, 0.14).cell(), "0.14 (↓63%)");
        assert_eq!(Reduction::from_rates(0.56, 0.57).cell(), "0.57");
        assert_eq!(Reduction::from_rates(0.0, 0.1).label(), "n/a");
        assert_eq!(Reduction::from_rates(0.5, 0.25).percent, Some(50));
    }

    #[test]
    fn compare_requires_same_phrases() {
        let t = PromptTemplate::defaults();
        let mut s = suite(4, Condition::ImprobableNatural);
        s.extend(suite(4, Condition::ImprobableAlternative));
        let o = run_experiment(&s, &t, &ScramblerEndpoint, RunOptions::default()).unwrap();
        let r = compare_conditions(&o.verdicts).unwrap();
        assert_eq!(r.reduction.percent, Some(0));
        let mut short = o.verdicts.clone();
        short.pop();
        let err = compare_conditions(&short).unwrap_err().to_string();
        assert!(err.contains("サーミ能3"));
        let paired = paired_subset(&short);
        assert_eq!(paired.len(), 6);
        assert!(compare_conditions(&paired).is_ok());
    }
}
