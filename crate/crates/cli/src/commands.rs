use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use improbable_core::census::list_incomplete;
use improbable_core::formats::{self, Bundle, RankedImportOptions};
use improbable_core::harness::{
    compare_conditions, judge_repeat, paired_subset, run_experiment, summarize, ChatEndpoint, ComparisonReport,
    Condition, EchoEndpoint, EndpointConfig, ExperimentSummary, HttpEndpoint, JudgePolicy, PromptTemplate,
    RunOptions, ScramblerEndpoint, SelectiveEndpoint, SuiteEntry, TemplateId, TokenizationControl, TrialFailure,
    TrialRecord, Verdict,
};
use improbable_core::preseg::PresegRecord;
use improbable_core::rank::{
    build_baselines, load_embeddings, unreachable_tokens, BaselineBigram, BaselineConfig,
};
use improbable_core::{
    census, natural_tokenization, presegment_tokenize, rank_by_training, sample_improbable_bigrams, score_tokens,
    verify_alternative, viability_counts, CountingPolicy, EncodeMode, ForgeConfig, ForgeRecord, PretokenizerConfig,
    Ranking, ScoringMethod, TokenId, TokenizerModel,
};
use serde::{Deserialize, Serialize};

use crate::manifest::{read_json, read_jsonl, write_json, write_jsonl, RunManifest};
use crate::{
    BaselineArgs, CensusArgs, Cli, Command, ForgeArgs, GenSuiteArgs, ImportArgs, JudgeArgs, JudgeFlags, MethodArg,
    MockArg, ModeArg, PatternPreset, PresegArgs, RankArgs, ReportArgs, RunArgs, TokenizerArgs,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Input,
    Endpoint,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn usage(error: anyhow::Error) -> Self {
        CliError {
            kind: Kind::Usage,
            error,
        }
    }

    fn endpoint(error: anyhow::Error) -> Self {
        CliError {
            kind: Kind::Endpoint,
            error,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        let endpoint = error
            .chain()
            .any(|e| matches!(e.downcast_ref::<improbable_core::Error>(), Some(improbable_core::Error::Endpoint(_))));
        CliError {
            kind: if endpoint { Kind::Endpoint } else { Kind::Input },
            error,
        }
    }
}

impl From<improbable_core::Error> for CliError {
    fn from(e: improbable_core::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

pub fn report_error(e: &CliError, json: bool) -> ExitCode {
    let (code, kind) = match e.kind {
        Kind::Usage => (1, "usage"),
        Kind::Input => (2, "input"),
        Kind::Endpoint => (3, "endpoint"),
    };
    // core errors already print their source, so skip causes seen in the text
    let mut message = e.error.to_string();
    for cause in e.error.chain().skip(1) {
        let c = cause.to_string();
        if !message.contains(&c) {
            message = format!("{message}: {c}");
        }
    }
    if json {
        eprintln!(
            "{}",
            serde_json::json!({"error": message.trim_end(), "kind": kind, "exit_code": code})
        );
    } else {
        eprintln!("error: {}", message.trim_end());
    }
    ExitCode::from(code)
}

type CliResult = std::result::Result<(), CliError>;

pub fn dispatch(cli: &Cli) -> CliResult {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(anyhow!(e)))?;
    }
    match &cli.command {
        Command::Import(a) => import(a),
        Command::Census(a) => census_cmd(a),
        Command::Forge(a) => forge(a),
        Command::Rank(a) => rank(a),
        Command::Baseline(a) => baseline(a),
        Command::Preseg(a) => preseg(a),
        Command::GenSuite(a) => gen_suite(a),
        Command::Run(a) => run(a, cli.max_parallel.unwrap_or(4)),
        Command::Judge(a) => judge(a),
        Command::Report(a) => report(a),
    }
}

fn pattern_of(t: &TokenizerArgs) -> Option<String> {
    t.pattern.clone().or(t.pattern_preset.map(|p| {
        match p {
            PatternPreset::Gpt2 => formats::GPT2_PATTERN,
            PatternPreset::Llama3 => formats::LLAMA3_PATTERN,
            PatternPreset::Qwen => formats::QWEN_PATTERN,
        }
        .to_owned()
    }))
}

fn load_model(t: &TokenizerArgs) -> Result<TokenizerModel> {
    let pattern = pattern_of(t);
    let opts = RankedImportOptions {
        extra_specials: t.extra_specials,
        pattern: pattern.clone(),
    };
    let model = formats::load_tokenizer(&t.tokenizer, &opts)?;
    Ok(match pattern {
        Some(p) if model.pretokenizer().pattern.as_deref() != Some(p.as_str()) => {
            model.with_pretokenizer(PretokenizerConfig::regex(p))?
        }
        _ => model,
    })
}

fn encode_mode(m: ModeArg) -> Result<EncodeMode> {
    match m {
        ModeArg::MergeOnly => Ok(EncodeMode::MergeOnly),
        ModeArg::Pretokenized => Ok(EncodeMode::Pretokenized),
        ModeArg::Both => Err(CliError::usage(anyhow!("--mode both only applies to --count-only")).error),
    }
}

fn usage(e: anyhow::Error) -> CliError {
    CliError::usage(e)
}

fn import(a: &ImportArgs) -> CliResult {
    let model = load_model(&a.tok)?;
    let m = RunManifest::new("import", a, &[&a.tok.tokenizer], None)?;
    let mut doc = serde_json::to_value(Bundle::from_model(&model)).map_err(anyhow::Error::from)?;
    doc["manifest"] = serde_json::to_value(&m).map_err(anyhow::Error::from)?;
    let text = serde_json::to_string(&doc).map_err(anyhow::Error::from)?;
    match &a.output {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    eprintln!(
        "{} tokens, {} merges, {} specials",
        model.len(),
        model.merges().len(),
        model.specials().len()
    );
    Ok(())
}

fn census_cmd(a: &CensusArgs) -> CliResult {
    let model = load_model(&a.tok)?;
    let policy = CountingPolicy {
        include_single_byte: a.include_single_byte,
        include_malformed: a.include_malformed,
    };
    let m = RunManifest::new("census", a, &[&a.tok.tokenizer], None)?;
    let report = census(&model, policy);
    eprint!("{}", report.table());
    if let Some(list) = &a.list {
        #[derive(Serialize)]
        struct Row {
            id: TokenId,
            bytes_hex: String,
            #[serde(flatten)]
            structure: improbable_core::TokenStructure,
        }
        let rows: Vec<Row> = list_incomplete(&model, policy)
            .into_iter()
            .map(|(t, s)| Row {
                id: t.id,
                bytes_hex: t.bytes.iter().map(|b| format!("{b:02x}")).collect(),
                structure: s,
            })
            .collect();
        write_jsonl(Some(list), &m, &rows)?;
    }
    write_json(a.output.as_ref(), &m, "report", &report)?;
    Ok(())
}

fn load_ranking(path: &Path) -> Result<Ranking> {
    let r: Ranking = read_json(path, "ranking")?;
    Ok(r.reindexed())
}

fn forge(a: &ForgeArgs) -> CliResult {
    let model = load_model(&a.tok)?;
    let policy = CountingPolicy::default();
    if a.count_only {
        let modes: Vec<EncodeMode> = match a.mode {
            ModeArg::Both => vec![EncodeMode::MergeOnly, EncodeMode::Pretokenized],
            m => vec![encode_mode(m)?],
        };
        let counts: BTreeMap<String, _> = modes
            .iter()
            .map(|&mode| {
                let c = viability_counts(&model, policy, mode);
                let name = serde_json::to_value(mode).unwrap().as_str().unwrap_or_default().to_owned();
                eprintln!(
                    "{name}: {} legal of {} structural pairs ({} invalid UTF-8, {} retokenized)",
                    c.viable, c.structural_pairs, c.invalid_utf8, c.retokenized
                );
                (name, c)
            })
            .collect();
        let m = RunManifest::new("forge", a, &[&a.tok.tokenizer], None)?;
        write_json(a.output.as_ref(), &m, "counts", &counts)?;
        return Ok(());
    }

    let mode = encode_mode(a.mode).map_err(usage)?;
    let ranking = match (&a.ranking, a.all_tokens) {
        (Some(p), _) => Some(load_ranking(p)?),
        (None, true) => None,
        (None, false) => return Err(usage(anyhow!("--ranking is required unless --all-tokens is given"))),
    };
    let cfg = ForgeConfig {
        require_multilingual: !a.no_multilingual,
        sample_size: a.sample_size,
        rng_seed: a.seed,
        well_trained_only: !a.all_tokens,
        policy,
        mode,
    };
    let out = sample_improbable_bigrams(&model, ranking.as_ref(), &cfg)?;
    for w in &out.warnings {
        log::warn!("{w}");
    }
    eprintln!("sampled {} of {} candidates", out.bigrams.len(), out.pool_size);
    let mut inputs: Vec<&Path> = vec![&a.tok.tokenizer];
    if let Some(r) = &a.ranking {
        inputs.push(r);
    }
    let m = RunManifest::new("forge", a, &inputs, Some(a.seed))?;
    let records: Vec<ForgeRecord> = out.bigrams.iter().map(ForgeRecord::from).collect();
    write_jsonl(a.output.as_ref(), &m, &records)?;
    Ok(())
}

fn rank(a: &RankArgs) -> CliResult {
    let model = load_model(&a.tok)?;
    let matrix = load_embeddings(&a.embeddings)?;
    matrix.check_vocab(&model)?;
    let method = match a.method {
        MethodArg::Cosine => ScoringMethod::CosineToUnusedMean,
        MethodArg::L2 => ScoringMethod::L2Norm,
    };
    let reference: Vec<TokenId> = match &a.reference {
        Some(p) => read_json::<Vec<u32>>(p, "reference")?.into_iter().map(TokenId).collect(),
        None if method == ScoringMethod::CosineToUnusedMean => {
            let r = unreachable_tokens(&model);
            eprintln!("reference set: {} unreachable tokens", r.len());
            r
        }
        None => Vec::new(),
    };
    let scores = score_tokens(&matrix, method, &reference)?;
    if !scores.zero_norm_rows.is_empty() {
        log::warn!("{} rows have zero norm and rank last", scores.zero_norm_rows.len());
    }
    let ranking = rank_by_training(scores);
    let mut inputs: Vec<&Path> = vec![&a.tok.tokenizer, &a.embeddings];
    if let Some(r) = &a.reference {
        inputs.push(r);
    }
    let m = RunManifest::new("rank", a, &inputs, None)?;
    write_json(a.output.as_ref(), &m, "ranking", &ranking)?;
    Ok(())
}

fn load_candidates(model: &TokenizerModel, path: &Path) -> Result<Vec<improbable_core::BigramCandidate>> {
    read_jsonl::<ForgeRecord>(path)?
        .iter()
        .map(|r| r.to_candidate(model).map_err(anyhow::Error::from))
        .collect()
}

fn baseline(a: &BaselineArgs) -> CliResult {
    let model = load_model(&a.tok)?;
    let ranking = load_ranking(&a.ranking)?;
    let cands = load_candidates(&model, &a.forge)?;
    let cfg = BaselineConfig {
        radius: a.radius,
        require_stable: !a.allow_unstable,
        mode: encode_mode(a.mode).map_err(usage)?,
    };
    let mut found: Vec<BaselineBigram> = Vec::new();
    for (c, r) in cands.iter().zip(build_baselines(&model, &ranking, &cands, &cfg)) {
        match r {
            Ok(b) => found.push(b),
            Err(e) => log::warn!("no baseline for {} + {}: {e}", c.prefix, c.suffix),
        }
    }
    eprintln!("{} baselines for {} bigrams", found.len(), cands.len());
    let m = RunManifest::new("baseline", a, &[&a.tok.tokenizer, &a.ranking, &a.forge], None)?;
    write_jsonl(a.output.as_ref(), &m, &found)?;
    Ok(())
}

fn preseg(a: &PresegArgs) -> CliResult {
    let model = load_model(&a.tok)?;
    let cands = load_candidates(&model, &a.forge)?;
    let mut records = Vec::with_capacity(cands.len());
    for c in &cands {
        let phrase = c
            .phrase()
            .ok_or_else(|| anyhow!("bigram {} + {} is not valid UTF-8", c.prefix, c.suffix))?;
        let enc = presegment_tokenize(&model, c)?;
        let report = verify_alternative(&model, &enc, c)?;
        records.push(PresegRecord {
            phrase: phrase.to_owned(),
            natural_ids: natural_tokenization(&model, phrase, EncodeMode::MergeOnly)?,
            alt_ids: enc.flat_ids,
            avoids_incomplete: enc.avoids_incomplete,
            flags: report.flags,
        });
    }
    let clean = records.iter().filter(|r| r.flags.is_empty()).count();
    eprintln!("{clean} of {} alternatives usable", records.len());
    let m = RunManifest::new("preseg", a, &[&a.tok.tokenizer, &a.forge], None)?;
    write_jsonl(a.output.as_ref(), &m, &records)?;
    Ok(())
}

fn gen_suite(a: &GenSuiteArgs) -> CliResult {
    let mut suite = Vec::new();
    let mut inputs: Vec<&Path> = vec![&a.forge];
    for r in read_jsonl::<ForgeRecord>(&a.forge)? {
        let phrase = r
            .phrase
            .ok_or_else(|| anyhow!("forge record {} + {} has no phrase", r.prefix_id, r.suffix_id))?;
        suite.push(SuiteEntry {
            phrase,
            condition: Condition::ImprobableNatural,
            token_ids: vec![r.prefix_id, r.suffix_id],
        });
    }
    if let Some(p) = &a.preseg {
        inputs.push(p);
        for r in read_jsonl::<PresegRecord>(p)? {
            if r.flags.is_empty() || a.include_flagged {
                suite.push(SuiteEntry {
                    phrase: r.phrase,
                    condition: Condition::ImprobableAlternative,
                    token_ids: r.alt_ids,
                });
            }
        }
    }
    if let Some(p) = &a.baseline {
        inputs.push(p);
        for b in read_jsonl::<BaselineBigram>(p)? {
            suite.push(SuiteEntry {
                phrase: b.phrase,
                condition: Condition::Baseline,
                token_ids: vec![b.prefix, b.suffix],
            });
        }
    }
    let mut per: BTreeMap<Condition, usize> = BTreeMap::new();
    for e in &suite {
        *per.entry(e.condition).or_default() += 1;
    }
    for (c, n) in per {
        eprintln!("{c}: {n}");
    }
    let m = RunManifest::new("gen-suite", a, &inputs, None)?;
    write_jsonl(a.output.as_ref(), &m, &suite)?;
    Ok(())
}

fn judge_policy(f: &JudgeFlags) -> JudgePolicy {
    JudgePolicy {
        nfc: !f.no_nfc,
        strip_quotes: !f.keep_quotes,
    }
}

#[derive(Serialize)]
struct SummaryDoc<'a> {
    summary: &'a ExperimentSummary,
    failures: &'a [TrialFailure],
}

fn run(a: &RunArgs, max_parallel: usize) -> CliResult {
    let suite: Vec<SuiteEntry> = read_jsonl(&a.suite)?;
    let mut templates = match &a.templates {
        Some(p) => read_json::<Vec<PromptTemplate>>(p, "templates")?,
        None => PromptTemplate::defaults(),
    };
    if let Some(text) = &a.usernames_template {
        let t = templates
            .iter_mut()
            .find(|t| t.template_id == TemplateId::Usernames)
            .ok_or_else(|| usage(anyhow!("no usernames template to replace")))?;
        *t = PromptTemplate::new(TemplateId::Usernames, text.clone())?;
    }
    let cfg = EndpointConfig {
        url: a.url.clone(),
        model_name: a.model.clone(),
        max_new_tokens: a.max_new_tokens,
        timeout_secs: a.timeout,
        max_parallel,
        retries: a.retries,
        response_path: a.response_path.clone(),
        api_key_env: a.api_key_env.clone(),
        token_ids_field: a.token_ids_field.clone(),
    };
    let endpoint: Box<dyn ChatEndpoint> = match a.mock {
        Some(MockArg::Echo) => Box::new(EchoEndpoint),
        Some(MockArg::Scrambler) => Box::new(ScramblerEndpoint),
        Some(MockArg::OneOfThree) => Box::new(SelectiveEndpoint {
            repeat_on: templates[0].text.split("{Phrase}").next().unwrap_or_default().to_owned(),
        }),
        None => Box::new(HttpEndpoint::new(cfg.clone())?),
    };
    let opts = RunOptions {
        max_parallel,
        judge: judge_policy(&a.judge),
    };
    let out = run_experiment(&suite, &templates, endpoint.as_ref(), opts)?;
    let mut inputs: Vec<&Path> = vec![&a.suite];
    if let Some(t) = &a.templates {
        inputs.push(t);
    }
    let m = RunManifest::new("run", a, &inputs, None)?;
    write_jsonl(Some(&a.output), &m, &out.verdicts)?;
    eprint!("{}", out.summary.table());
    write_json(
        None,
        &m,
        "result",
        &SummaryDoc {
            summary: &out.summary,
            failures: &out.failures,
        },
    )?;
    if !out.failures.is_empty() {
        return Err(CliError::endpoint(anyhow!(
            "{} trials failed after retries; their phrases are excluded from the rates",
            out.failures.len()
        )));
    }
    Ok(())
}

/// One saved response, as produced by a `run` outside this tool.
#[derive(Debug, Deserialize)]
struct ResponseRecord {
    phrase: String,
    condition: Condition,
    template_id: TemplateId,
    response: String,
    #[serde(default)]
    rendered_prompt: String,
    #[serde(default = "uncontrolled")]
    tokenization: TokenizationControl,
}

fn uncontrolled() -> TokenizationControl {
    TokenizationControl::Uncontrolled
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ResponseLine {
    Verdict(Verdict),
    Response(ResponseRecord),
}

fn judge(a: &JudgeArgs) -> CliResult {
    let suite: Vec<SuiteEntry> = read_jsonl(&a.suite)?;
    let policy = judge_policy(&a.judge);
    let mut by_key: HashMap<(String, Condition), Vec<ResponseRecord>> = HashMap::new();
    for line in read_jsonl::<ResponseLine>(&a.responses)? {
        let records = match line {
            ResponseLine::Verdict(v) => v
                .trials
                .into_iter()
                .map(|t| ResponseRecord {
                    phrase: t.phrase,
                    condition: t.condition,
                    template_id: t.template_id,
                    response: t.response,
                    rendered_prompt: t.rendered_prompt,
                    tokenization: t.tokenization,
                })
                .collect(),
            ResponseLine::Response(r) => vec![r],
        };
        for r in records {
            by_key.entry((r.phrase.clone(), r.condition)).or_default().push(r);
        }
    }

    let templates = PromptTemplate::defaults();
    let mut verdicts = Vec::new();
    let mut failures = Vec::new();
    let mut failed: BTreeMap<Condition, usize> = BTreeMap::new();
    for e in &suite {
        let records = by_key.remove(&(e.phrase.clone(), e.condition)).unwrap_or_default();
        let mut trials = Vec::new();
        let mut missing = Vec::new();
        for t in &templates {
            match records.iter().find(|r| r.template_id == t.template_id) {
                Some(r) => trials.push(TrialRecord {
                    phrase: e.phrase.clone(),
                    condition: e.condition,
                    token_ids: e.token_ids.clone(),
                    template_id: t.template_id,
                    rendered_prompt: r.rendered_prompt.clone(),
                    response: r.response.clone(),
                    repeated: judge_repeat(&e.phrase, &r.response, policy),
                    tokenization: r.tokenization,
                }),
                None => missing.push(t.template_id),
            }
        }
        if missing.is_empty() {
            verdicts.push(Verdict::from_trials(trials)?);
        } else {
            *failed.entry(e.condition).or_default() += 1;
            failures.extend(missing.into_iter().map(|template_id| TrialFailure {
                phrase: e.phrase.clone(),
                condition: e.condition,
                template_id,
                error: "no saved response".into(),
            }));
        }
    }
    if !by_key.is_empty() {
        log::warn!("{} responses match no suite entry", by_key.len());
    }
    let summary = summarize(&verdicts, &failed, policy, &templates);
    let m = RunManifest::new("judge", a, &[&a.suite, &a.responses], None)?;
    if let Some(p) = &a.output {
        write_jsonl(Some(p), &m, &verdicts)?;
    }
    eprint!("{}", summary.table());
    write_json(
        None,
        &m,
        "result",
        &SummaryDoc {
            summary: &summary,
            failures: &failures,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct ReportRow {
    label: String,
    summary: ExperimentSummary,
    /// Natural against alternative over the phrases judged under both.
    comparison: Option<ComparisonReport>,
}

fn report(a: &ReportArgs) -> CliResult {
    let mut rows = Vec::new();
    let mut paths: Vec<PathBuf> = Vec::new();
    for spec in &a.verdicts {
        let (label, path) = match spec.split_once('=') {
            Some((l, p)) => (l.to_owned(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let l = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                (l, p)
            }
        };
        let verdicts: Vec<Verdict> = read_jsonl(&path)?;
        let summary = summarize(&verdicts, &BTreeMap::new(), JudgePolicy::default(), &[]);
        let paired = paired_subset(&verdicts);
        let comparison = if paired.is_empty() {
            None
        } else {
            Some(compare_conditions(&paired)?)
        };
        rows.push(ReportRow {
            label,
            summary,
            comparison,
        });
        paths.push(path);
    }
    let inputs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
    let m = RunManifest::new("report", a, &inputs, None)?;
    if a.json {
        write_json(None, &m, "rows", &rows)?;
        return Ok(());
    }
    print!("{}", tables(&rows));
    Ok(())
}

fn count_cell(s: &ExperimentSummary, c: Condition) -> String {
    s.conditions
        .iter()
        .find(|x| x.condition == c)
        .map_or("-".to_owned(), |x| format!("{}/{}", x.hallucinatory, x.judged))
}

fn tables(rows: &[ReportRow]) -> String {
    let w = rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(5).max(5) + 2;
    let mut out = String::from("Hallucinations, improbable bigrams vs baseline\n");
    out.push_str(&format!("{:<w$}{:>14}{:>14}\n", "model", "improbable", "baseline"));
    for r in rows {
        out.push_str(&format!(
            "{:<w$}{:>14}{:>14}\n",
            r.label,
            count_cell(&r.summary, Condition::ImprobableNatural),
            count_cell(&r.summary, Condition::Baseline)
        ));
    }
    out.push_str("\nHallucination rate, natural vs alternative tokenization\n");
    out.push_str(&format!("{:<w$}{:>12}{:>16}{:>8}\n", "model", "natural", "alternative", "pairs"));
    for r in rows {
        match &r.comparison {
            Some(c) => out.push_str(&format!(
                "{:<w$}{:>12.2}{:>16}{:>8}\n",
                r.label,
                c.reduction.natural_rate,
                c.reduction.cell(),
                c.natural.judged
            )),
            None => out.push_str(&format!("{:<w$}{:>12}{:>16}{:>8}\n", r.label, "-", "-", 0)),
        }
    }
    out
}
