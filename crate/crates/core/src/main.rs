//! Command-line driver: generate dialogues, judge them, probe the target
//! model, evaluate responses into reports, and render tables and charts.

use adapteval::chart;
use adapteval::cohorts::{classify_with_endpoint, Attribute, CountryMap, LabelSet, RuleSet};
use adapteval::config::{require_endpoint, require_path, ClassifierBackendKind, RunConfig};
use adapteval::data::{
    self, load_dialogues, load_profiles, load_responses, load_survey, FileMeta,
};
use adapteval::evaluate::{distance_report_name, run_evaluation, EvaluationInputs};
use adapteval::factory::{DialogueFactory, FactoryConfig};
use adapteval::gateway::Gateway;
use adapteval::judge::{
    aggregate_scores, human_means, icc3k, pearson, DialogueJudge, Dimension, HumanRating,
    JudgeError, JudgeScore, RatingMatrix,
};
use adapteval::probe::{ProbeConfig, ScenarioSelection, ValueProbe};
use adapteval::report::{
    load_json, save_json, AlignmentRow, ConfidenceReport, ConsistencyReport, DistanceReport,
    JudgeReport,
};
use adapteval::seed::{derive_seed, file_digest};
use adapteval::templates::TemplateSet;
use anyhow::anyhow;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "adapteval",
    version,
    about = "Probe and quantify sociodemographic behavior adaptation of chat models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Override the run seed from the config
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory from the config
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dialogue corpus from user profiles
    Generate {
        #[command(flatten)]
        common: Common,
        /// Override the profiles file
        #[arg(long)]
        profiles: Option<PathBuf>,
        /// Stamp this timestamp into generation metadata (omitted by
        /// default so reruns stay byte-identical)
        #[arg(long)]
        timestamp: Option<String>,
    },
    /// Score generated dialogues with the judge endpoint
    Judge {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dialogues: Option<PathBuf>,
        #[arg(long)]
        profiles: Option<PathBuf>,
        /// Human ratings file for the alignment table
        #[arg(long)]
        human: Option<PathBuf>,
        /// Seeds per (dialogue, dimension)
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Probe the target model with every survey question
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        survey: Option<PathBuf>,
        #[arg(long)]
        profiles: Option<PathBuf>,
        #[arg(long)]
        dialogues: Option<PathBuf>,
        /// profile, dialogue, or both
        #[arg(long)]
        scenario: Option<String>,
    },
    /// Compute distance, consistency, and confidence reports
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        responses: Option<PathBuf>,
        /// Exclude degenerate one-hot fallbacks from centroids
        #[arg(long)]
        strict_degenerate: bool,
    },
    /// Render radar SVGs and CSV tables from evaluation reports
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory holding evaluation reports (defaults to the output dir)
        #[arg(long)]
        reports: Option<PathBuf>,
    },
    /// Recompute reports from an existing responses file without network access
    Replay {
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        survey: PathBuf,
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        country_map: Option<PathBuf>,
        #[arg(long)]
        job_rules: Option<PathBuf>,
        #[arg(long)]
        position_rules: Option<PathBuf>,
        /// Comma-separated attribute list (default: all five)
        #[arg(long)]
        attributes: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        strict_degenerate: bool,
    },
}

// Exit codes: 1 usage/config, 2 upstream/model, 3 data/validation.
enum CmdError {
    Usage(anyhow::Error),
    Upstream(anyhow::Error),
    Data(anyhow::Error),
}

impl CmdError {
    fn code(&self) -> u8 {
        match self {
            CmdError::Usage(_) => 1,
            CmdError::Upstream(_) => 2,
            CmdError::Data(_) => 3,
        }
    }

    fn inner(&self) -> &anyhow::Error {
        match self {
            CmdError::Usage(e) | CmdError::Upstream(e) | CmdError::Data(e) => e,
        }
    }
}

fn usage<E: Into<anyhow::Error>>(e: E) -> CmdError {
    CmdError::Usage(e.into())
}
fn upstream<E: Into<anyhow::Error>>(e: E) -> CmdError {
    CmdError::Upstream(e.into())
}
fn data_err<E: Into<anyhow::Error>>(e: E) -> CmdError {
    CmdError::Data(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {:#}", err.inner());
            ExitCode::from(err.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CmdError> {
    match cli.command {
        Command::Generate {
            common,
            profiles,
            timestamp,
        } => cmd_generate(common, profiles, timestamp),
        Command::Judge {
            common,
            dialogues,
            profiles,
            human,
            seeds,
        } => cmd_judge(common, dialogues, profiles, human, seeds),
        Command::Probe {
            common,
            survey,
            profiles,
            dialogues,
            scenario,
        } => cmd_probe(common, survey, profiles, dialogues, scenario),
        Command::Evaluate {
            common,
            responses,
            strict_degenerate,
        } => cmd_evaluate(common, responses, strict_degenerate),
        Command::Report { common, reports } => cmd_report(common, reports),
        Command::Replay {
            responses,
            survey,
            profiles,
            country_map,
            job_rules,
            position_rules,
            attributes,
            seed,
            out,
            strict_degenerate,
        } => cmd_replay(ReplayArgs {
            responses,
            survey,
            profiles,
            country_map,
            job_rules,
            position_rules,
            attributes,
            seed,
            out,
            strict_degenerate,
        }),
    }
}

struct Loaded {
    config: RunConfig,
    seed: u64,
    out_dir: PathBuf,
}

fn load_common(common: &Common) -> Result<Loaded, CmdError> {
    let config = RunConfig::load(&common.config).map_err(usage)?;
    let seed = common.seed.unwrap_or(config.seed);
    let out_dir = common.out.clone().unwrap_or_else(|| config.out_dir.clone());
    Ok(Loaded {
        config,
        seed,
        out_dir,
    })
}

fn load_templates(config: &RunConfig) -> Result<TemplateSet, CmdError> {
    match &config.paths.templates {
        Some(dir) => TemplateSet::load(dir).map_err(usage),
        None => Ok(TemplateSet::builtin()),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, CmdError> {
    tokio::runtime::Runtime::new().map_err(|e| upstream(anyhow!("tokio runtime: {e}")))
}

fn digest_of(path: &Path) -> String {
    file_digest(path).unwrap_or_else(|_| "unavailable".to_string())
}

/// Owned name -> digest map for the inputs a command consumed.
#[derive(Default)]
struct Digests(BTreeMap<String, String>);

impl Digests {
    fn add(&mut self, name: &str, path: &Path) {
        self.0.insert(name.to_string(), digest_of(path));
    }
}

fn file_meta(seed: u64, config: &RunConfig, inputs: Digests) -> FileMeta {
    let mut meta = FileMeta::new(seed);
    meta.config_digest = config.digest.clone();
    meta.inputs = inputs.0;
    meta
}

fn cmd_generate(
    common: Common,
    profiles_flag: Option<PathBuf>,
    timestamp: Option<String>,
) -> Result<(), CmdError> {
    let Loaded {
        mut config,
        seed,
        out_dir,
    } = load_common(&common)?;
    if let Some(p) = profiles_flag {
        config.paths.profiles = Some(p);
    }
    let profiles_path = require_path(config.paths.profiles.as_ref(), "profiles").map_err(usage)?;
    let profiles = load_profiles(profiles_path).map_err(data_err)?;
    let templates = load_templates(&config)?;

    let factory_config = FactoryConfig {
        simulator: require_endpoint(config.endpoints.simulator.as_ref(), "simulator")
            .map_err(usage)?
            .clone(),
        detector: require_endpoint(config.endpoints.detector.as_ref(), "detector")
            .map_err(usage)?
            .clone(),
        qa: require_endpoint(config.endpoints.qa.as_ref(), "qa")
            .map_err(usage)?
            .clone(),
        max_runs: config.factory.max_runs,
        ooc_mode: config.factory.ooc_mode,
        seed,
        timestamp: timestamp.or_else(|| config.factory.timestamp.clone()),
    };
    let factory = DialogueFactory::new(&factory_config, templates).map_err(upstream)?;

    let result = runtime()?.block_on(factory.generate_corpus(&profiles));

    let mut inputs = Digests::default();
    inputs.add("profiles", profiles_path);
    let meta = file_meta(seed, &config, inputs);
    let dialogues_path = out_dir.join("dialogues.jsonl");
    data::write_jsonl(&dialogues_path, Some(&meta), &result.dialogues).map_err(data_err)?;
    let skips_path = out_dir.join("skips.jsonl");
    data::write_jsonl(&skips_path, Some(&meta), &result.skips).map_err(data_err)?;

    println!(
        "generate: {} dialogue(s), {} skip(s) -> {}",
        result.dialogues.len(),
        result.skips.len(),
        dialogues_path.display()
    );
    if result.dialogues.is_empty() {
        return Err(data_err(anyhow!(
            "empty corpus: every profile was skipped (see {})",
            skips_path.display()
        )));
    }
    Ok(())
}

fn cmd_probe(
    common: Common,
    survey_flag: Option<PathBuf>,
    profiles_flag: Option<PathBuf>,
    dialogues_flag: Option<PathBuf>,
    scenario_flag: Option<String>,
) -> Result<(), CmdError> {
    let Loaded {
        mut config,
        seed,
        out_dir,
    } = load_common(&common)?;
    if let Some(p) = survey_flag {
        config.paths.survey = Some(p);
    }
    if let Some(p) = profiles_flag {
        config.paths.profiles = Some(p);
    }
    if let Some(p) = dialogues_flag {
        config.paths.dialogues = Some(p);
    }
    let selection = match scenario_flag.as_deref() {
        None => config.scenario,
        Some("profile") => ScenarioSelection::Profile,
        Some("dialogue") => ScenarioSelection::Dialogue,
        Some("both") => ScenarioSelection::Both,
        Some(other) => {
            return Err(usage(anyhow!(
                "unknown scenario '{other}', expected profile|dialogue|both"
            )))
        }
    };

    let survey_path = require_path(config.paths.survey.as_ref(), "survey").map_err(usage)?;
    let profiles_path = require_path(config.paths.profiles.as_ref(), "profiles").map_err(usage)?;
    let survey = load_survey(survey_path).map_err(data_err)?;
    let profiles = load_profiles(profiles_path).map_err(data_err)?;

    let mut inputs = Digests::default();
    inputs.add("survey", survey_path);
    inputs.add("profiles", profiles_path);
    let needs_dialogues = !matches!(selection, ScenarioSelection::Profile);
    let dialogues = if needs_dialogues {
        let path = require_path(config.paths.dialogues.as_ref(), "dialogues").map_err(usage)?;
        inputs.add("dialogues", path);
        load_dialogues(path).map_err(data_err)?
    } else {
        Vec::new()
    };

    let templates = load_templates(&config)?;
    let probe_config = ProbeConfig {
        target: require_endpoint(config.endpoints.target.as_ref(), "target")
            .map_err(usage)?
            .clone(),
        reasoning_mode: config.probe.reasoning_mode,
        seed,
    };
    let probe = ValueProbe::new(&probe_config, templates).map_err(upstream)?;
    let responses = runtime()?
        .block_on(probe.probe_run(&survey, &profiles, &dialogues, selection))
        .map_err(upstream)?;

    let meta = file_meta(seed, &config, inputs);
    let responses_path = out_dir.join("responses.jsonl");
    data::write_jsonl(&responses_path, Some(&meta), &responses).map_err(data_err)?;
    println!(
        "probe: {} response(s) -> {}",
        responses.len(),
        responses_path.display()
    );
    Ok(())
}

fn cmd_judge(
    common: Common,
    dialogues_flag: Option<PathBuf>,
    profiles_flag: Option<PathBuf>,
    human_flag: Option<PathBuf>,
    seeds_flag: Option<usize>,
) -> Result<(), CmdError> {
    let Loaded {
        mut config,
        seed,
        out_dir,
    } = load_common(&common)?;
    if let Some(p) = dialogues_flag {
        config.paths.dialogues = Some(p);
    }
    if let Some(p) = profiles_flag {
        config.paths.profiles = Some(p);
    }
    if let Some(p) = human_flag {
        config.paths.human_ratings = Some(p);
    }
    let seeds = seeds_flag.unwrap_or(config.judge.seeds).max(1);

    let dialogues_path =
        require_path(config.paths.dialogues.as_ref(), "dialogues").map_err(usage)?;
    let profiles_path = require_path(config.paths.profiles.as_ref(), "profiles").map_err(usage)?;
    let dialogues = load_dialogues(dialogues_path).map_err(data_err)?;
    let profiles = load_profiles(profiles_path).map_err(data_err)?;
    let by_id: BTreeMap<&str, &adapteval::data::UserProfile> =
        profiles.iter().map(|p| (p.user_id.as_str(), p)).collect();
    for d in &dialogues {
        if !by_id.contains_key(d.user_id.as_str()) {
            return Err(data_err(anyhow!(
                "dialogue user '{}' has no profile",
                d.user_id
            )));
        }
    }

    let templates = load_templates(&config)?;
    let endpoint = require_endpoint(config.endpoints.judge.as_ref(), "judge")
        .map_err(usage)?
        .clone();
    let judge = DialogueJudge::new(Gateway::new(endpoint).map_err(upstream)?, templates);

    let scores: Vec<JudgeScore> = runtime()?
        .block_on(async {
            let mut futures = Vec::new();
            let mut counter = 0u64;
            for dialogue in &dialogues {
                let profile = by_id[dialogue.user_id.as_str()];
                for dimension in Dimension::ALL {
                    for _ in 0..seeds {
                        let call_seed = derive_seed(seed, "judge", counter);
                        counter += 1;
                        futures.push(judge.judge_dimension(
                            dialogue, profile, dimension, call_seed,
                        ));
                    }
                }
            }
            futures::future::join_all(futures).await
        })
        .into_iter()
        .collect::<Result<_, _>>()
        .map_err(upstream)?;

    let aggregate = aggregate_scores(&scores).map_err(data_err)?;

    let human_path = config.paths.human_ratings.clone();
    let mut inputs = Digests::default();
    inputs.add("dialogues", dialogues_path);
    inputs.add("profiles", profiles_path);
    let mut human_corpus_means = BTreeMap::new();
    let mut alignment = Vec::new();
    if let Some(path) = &human_path {
        let path = require_path(Some(path), "human_ratings").map_err(usage)?;
        inputs.add("human_ratings", path);
        let (_, ratings): (_, Vec<HumanRating>) = data::read_jsonl(path).map_err(data_err)?;
        let per_dim_items = human_means(&ratings);
        for dimension in Dimension::ALL {
            let Some(items) = per_dim_items.get(&dimension) else {
                continue;
            };
            // shared items: human mean vs judge mean, sorted by item id
            let mut human_col = Vec::new();
            let mut judge_col = Vec::new();
            let mut ids = Vec::new();
            for (item, human_score) in items {
                if let Some(judge_score) = aggregate
                    .per_dialogue
                    .get(item)
                    .and_then(|dims| dims.get(&dimension))
                {
                    ids.push(item.clone());
                    human_col.push(*human_score);
                    judge_col.push(*judge_score);
                }
            }
            if !human_col.is_empty() {
                human_corpus_means.insert(
                    dimension,
                    human_col.iter().sum::<f64>() / human_col.len() as f64,
                );
            }
            let row = alignment_row(dimension, &ids, &human_col, &judge_col);
            alignment.push(row);
        }
    }

    let report = JudgeReport {
        meta: file_meta(seed, &config, inputs),
        seeds_per_dimension: seeds,
        per_dialogue: aggregate.per_dialogue,
        corpus_means: aggregate.corpus_means,
        human_means: human_corpus_means,
        alignment,
    };
    let scores_path = out_dir.join("judge_scores.jsonl");
    data::write_jsonl(&scores_path, Some(&report.meta), &scores).map_err(data_err)?;
    let report_path = out_dir.join("judge_report.json");
    save_json(&report_path, &report).map_err(data_err)?;
    println!(
        "judge: {} score(s) across {} dialogue(s) -> {}",
        scores.len(),
        report.per_dialogue.len(),
        report_path.display()
    );
    Ok(())
}

fn alignment_row(
    dimension: Dimension,
    ids: &[String],
    human: &[f64],
    judge: &[f64],
) -> AlignmentRow {
    if ids.len() < 2 {
        return AlignmentRow {
            dimension,
            icc3k: None,
            pearson: None,
            shared_items: ids.len(),
            note: Some("needs at least 2 shared items".into()),
        };
    }
    let cells: Vec<Vec<f64>> = human
        .iter()
        .zip(judge)
        .map(|(h, j)| vec![*h, *j])
        .collect();
    let matrix = RatingMatrix::new(
        ids.to_vec(),
        vec!["human-mean".into(), "judge-mean".into()],
        cells,
    );
    let (icc, icc_note) = match matrix.and_then(|m| icc3k(&m)) {
        Ok(v) => (Some(v), None),
        Err(JudgeError::DegenerateBetweenVariance) => {
            (None, Some("degenerate between-target variance".to_string()))
        }
        Err(e) => (None, Some(e.to_string())),
    };
    let (r, r_note) = match pearson(human, judge) {
        Ok(v) => (Some(v), None),
        Err(e) => (None, Some(e.to_string())),
    };
    AlignmentRow {
        dimension,
        icc3k: icc,
        pearson: r,
        shared_items: ids.len(),
        note: icc_note.or(r_note),
    }
}

fn cmd_evaluate(
    common: Common,
    responses_flag: Option<PathBuf>,
    strict_flag: bool,
) -> Result<(), CmdError> {
    let Loaded {
        mut config,
        seed,
        out_dir,
    } = load_common(&common)?;
    if let Some(p) = responses_flag {
        config.paths.responses = Some(p);
    }
    let strict = strict_flag || config.strict_degenerate;

    let responses_path =
        require_path(config.paths.responses.as_ref(), "responses").map_err(usage)?;
    let survey_path = require_path(config.paths.survey.as_ref(), "survey").map_err(usage)?;
    let profiles_path = require_path(config.paths.profiles.as_ref(), "profiles").map_err(usage)?;

    let survey = load_survey(survey_path).map_err(data_err)?;
    let profiles = load_profiles(profiles_path).map_err(data_err)?;
    let (_, responses) = load_responses(responses_path).map_err(data_err)?;

    let attributes = config.attributes().map_err(usage)?;
    let mut inputs = Digests::default();
    inputs.add("responses", responses_path);
    inputs.add("survey", survey_path);
    inputs.add("profiles", profiles_path);

    let country_map = load_country_map(&config, &attributes, &mut inputs)?;
    let use_endpoint = config.cohorts.classifier_backend == ClassifierBackendKind::Endpoint;
    let (job_rules, position_rules) = if use_endpoint {
        (None, None)
    } else {
        (
            load_rules(
                config.paths.job_rules.as_ref(),
                &attributes,
                Attribute::JobCategory,
                "job_rules",
                &mut inputs,
            )?,
            load_rules(
                config.paths.position_rules.as_ref(),
                &attributes,
                Attribute::PositionLevel,
                "position_rules",
                &mut inputs,
            )?,
        )
    };
    let (job_assignments, position_assignments) = if use_endpoint {
        classify_via_endpoint(&config, &attributes, &profiles)?
    } else {
        (None, None)
    };

    let meta = file_meta(seed, &config, inputs);
    let outputs = run_evaluation(&EvaluationInputs {
        survey: &survey,
        profiles: &profiles,
        responses: &responses,
        attributes: &attributes,
        country_map: country_map.as_ref(),
        job_rules: job_rules.as_ref(),
        position_rules: position_rules.as_ref(),
        job_assignments: job_assignments.as_ref(),
        position_assignments: position_assignments.as_ref(),
        seed,
        strict_degenerate: strict,
        meta,
    })
    .map_err(data_err)?;

    write_evaluation_outputs(&out_dir, &outputs)?;
    Ok(())
}

fn load_country_map(
    config: &RunConfig,
    attributes: &[Attribute],
    inputs: &mut Digests,
) -> Result<Option<CountryMap>, CmdError> {
    if !attributes.contains(&Attribute::DevelopmentLevel) {
        return Ok(None);
    }
    let path = require_path(config.paths.country_map.as_ref(), "country_map").map_err(usage)?;
    inputs.add("country_map", path);
    CountryMap::load(path).map(Some).map_err(data_err)
}

fn load_rules(
    configured: Option<&PathBuf>,
    attributes: &[Attribute],
    wanted: Attribute,
    name: &'static str,
    inputs: &mut Digests,
) -> Result<Option<RuleSet>, CmdError> {
    if !attributes.contains(&wanted) {
        return Ok(None);
    }
    let path = require_path(configured, name).map_err(usage)?;
    inputs.add(name, path);
    RuleSet::load(path).map(Some).map_err(data_err)
}

type Assignments = Option<BTreeMap<String, String>>;

/// Classify every distinct job title through the classifier endpoint,
/// constrained to the label-set files.
fn classify_via_endpoint(
    config: &RunConfig,
    attributes: &[Attribute],
    profiles: &[adapteval::data::UserProfile],
) -> Result<(Assignments, Assignments), CmdError> {
    let needs_job = attributes.contains(&Attribute::JobCategory);
    let needs_position = attributes.contains(&Attribute::PositionLevel);
    if !needs_job && !needs_position {
        return Ok((None, None));
    }
    let endpoint = require_endpoint(config.endpoints.classifier.as_ref(), "classifier")
        .map_err(usage)?
        .clone();
    let gateway = Gateway::new(endpoint).map_err(upstream)?;
    let titles: Vec<&str> = {
        let mut seen = std::collections::BTreeSet::new();
        profiles
            .iter()
            .map(|p| p.job_title.as_str())
            .filter(|t| seen.insert(*t))
            .collect()
    };
    let runtime = runtime()?;
    let mut classify_all = |labels_path: Option<&PathBuf>,
                            name: &'static str|
     -> Result<BTreeMap<String, String>, CmdError> {
        let path = require_path(labels_path, name).map_err(usage)?;
        let labels = LabelSet::load(path).map_err(data_err)?;
        let by_title: Vec<String> = runtime
            .block_on(futures::future::join_all(
                titles
                    .iter()
                    .map(|title| classify_with_endpoint(title, &labels, &gateway)),
            ))
            .into_iter()
            .collect::<Result<_, _>>()
            .map_err(upstream)?;
        let title_to_label: BTreeMap<&str, &String> =
            titles.iter().copied().zip(by_title.iter()).collect();
        Ok(profiles
            .iter()
            .map(|p| {
                (
                    p.user_id.clone(),
                    (*title_to_label[p.job_title.as_str()]).clone(),
                )
            })
            .collect())
    };
    let job = if needs_job {
        Some(classify_all(config.cohorts.job_labels.as_ref(), "job_labels")?)
    } else {
        None
    };
    let position = if needs_position {
        Some(classify_all(
            config.cohorts.position_labels.as_ref(),
            "position_labels",
        )?)
    } else {
        None
    };
    Ok((job, position))
}

fn write_evaluation_outputs(
    out_dir: &Path,
    outputs: &adapteval::evaluate::EvaluationOutputs,
) -> Result<(), CmdError> {
    for warning in &outputs.warnings {
        eprintln!("warning: {warning}");
    }
    for report in &outputs.distance_reports {
        let name = distance_report_name(report.scenario, &report.attribute);
        save_json(&out_dir.join(name), report).map_err(data_err)?;
    }
    if let Some(consistency) = &outputs.consistency {
        save_json(&out_dir.join("consistency.json"), consistency).map_err(data_err)?;
    }
    save_json(&out_dir.join("confidence.json"), &outputs.confidence).map_err(data_err)?;
    println!(
        "evaluate: {} distance report(s), consistency {} -> {}",
        outputs.distance_reports.len(),
        if outputs.consistency.is_some() {
            "written"
        } else {
            "skipped"
        },
        out_dir.display()
    );
    Ok(())
}

struct ReplayArgs {
    responses: PathBuf,
    survey: PathBuf,
    profiles: PathBuf,
    country_map: Option<PathBuf>,
    job_rules: Option<PathBuf>,
    position_rules: Option<PathBuf>,
    attributes: Option<String>,
    seed: u64,
    out: PathBuf,
    strict_degenerate: bool,
}

fn cmd_replay(args: ReplayArgs) -> Result<(), CmdError> {
    let attributes: Vec<Attribute> = match &args.attributes {
        None => Attribute::ALL.to_vec(),
        Some(csv) => csv
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|label| {
                Attribute::parse(label).ok_or_else(|| usage(anyhow!("unknown attribute '{label}'")))
            })
            .collect::<Result<_, _>>()?,
    };
    for (name, path) in [
        ("responses", &args.responses),
        ("survey", &args.survey),
        ("profiles", &args.profiles),
    ] {
        if !path.exists() {
            return Err(usage(anyhow!("{name} path does not exist: {}", path.display())));
        }
    }

    let survey = load_survey(&args.survey).map_err(data_err)?;
    let profiles = load_profiles(&args.profiles).map_err(data_err)?;
    let (_, responses) = load_responses(&args.responses).map_err(data_err)?;

    let mut inputs = Digests::default();
    inputs.add("responses", &args.responses);
    inputs.add("survey", &args.survey);
    inputs.add("profiles", &args.profiles);
    let country_map = match (&args.country_map, attributes.contains(&Attribute::DevelopmentLevel))
    {
        (Some(path), true) => {
            inputs.add("country_map", path);
            Some(CountryMap::load(path).map_err(data_err)?)
        }
        (None, true) => {
            return Err(usage(anyhow!(
                "--country-map is required for the development_level attribute"
            )))
        }
        _ => None,
    };
    let job_rules = replay_rules(
        &args.job_rules,
        &attributes,
        Attribute::JobCategory,
        "--job-rules",
        &mut inputs,
    )?;
    let position_rules = replay_rules(
        &args.position_rules,
        &attributes,
        Attribute::PositionLevel,
        "--position-rules",
        &mut inputs,
    )?;

    let mut meta = FileMeta::new(args.seed);
    meta.inputs = inputs.0;

    let outputs = run_evaluation(&EvaluationInputs {
        survey: &survey,
        profiles: &profiles,
        responses: &responses,
        attributes: &attributes,
        country_map: country_map.as_ref(),
        job_rules: job_rules.as_ref(),
        position_rules: position_rules.as_ref(),
        job_assignments: None,
        position_assignments: None,
        seed: args.seed,
        strict_degenerate: args.strict_degenerate,
        meta,
    })
    .map_err(data_err)?;
    write_evaluation_outputs(&args.out, &outputs)?;
    Ok(())
}

fn replay_rules(
    flag: &Option<PathBuf>,
    attributes: &[Attribute],
    wanted: Attribute,
    flag_name: &str,
    inputs: &mut Digests,
) -> Result<Option<RuleSet>, CmdError> {
    match (flag, attributes.contains(&wanted)) {
        (Some(path), true) => {
            inputs.add(
                if wanted == Attribute::JobCategory {
                    "job_rules"
                } else {
                    "position_rules"
                },
                path,
            );
            Ok(Some(RuleSet::load(path).map_err(data_err)?))
        }
        (None, true) => Err(usage(anyhow!(
            "{flag_name} is required for the {} attribute",
            wanted.label()
        ))),
        _ => Ok(None),
    }
}

fn cmd_report(common: Common, reports_flag: Option<PathBuf>) -> Result<(), CmdError> {
    let Loaded {
        config: _config,
        seed: _,
        out_dir,
    } = load_common(&common)?;
    let reports_dir = reports_flag.unwrap_or_else(|| out_dir.clone());
    if !reports_dir.exists() {
        return Err(usage(anyhow!(
            "reports directory does not exist: {}",
            reports_dir.display()
        )));
    }

    let mut distance_files: Vec<PathBuf> = std::fs::read_dir(&reports_dir)
        .map_err(|e| data_err(anyhow!("cannot list {}: {e}", reports_dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("distance_") && n.ends_with(".json"))
        })
        .collect();
    distance_files.sort();

    let mut distance_reports = Vec::new();
    for path in &distance_files {
        let report: DistanceReport = load_json(path).map_err(data_err)?;
        distance_reports.push(report);
    }
    let consistency: Option<ConsistencyReport> = {
        let path = reports_dir.join("consistency.json");
        path.exists()
            .then(|| load_json(&path))
            .transpose()
            .map_err(data_err)?
    };
    let confidence: Option<ConfidenceReport> = {
        let path = reports_dir.join("confidence.json");
        path.exists()
            .then(|| load_json(&path))
            .transpose()
            .map_err(data_err)?
    };
    let judge_report: Option<JudgeReport> = {
        let path = reports_dir.join("judge_report.json");
        path.exists()
            .then(|| load_json(&path))
            .transpose()
            .map_err(data_err)?
    };

    if distance_reports.is_empty() && consistency.is_none() && confidence.is_none() {
        return Err(data_err(anyhow!(
            "empty report: no evaluation outputs in {}",
            reports_dir.display()
        )));
    }
    for report in &distance_reports {
        if report.pairs.is_empty() {
            return Err(data_err(anyhow!(
                "empty report: {} {} has no group pairs",
                report.scenario,
                report.attribute
            )));
        }
    }

    std::fs::create_dir_all(&out_dir)
        .map_err(|e| data_err(anyhow!("cannot create {}: {e}", out_dir.display())))?;
    let mut written = 0usize;
    for report in &distance_reports {
        if report.pairs.len() < 3 {
            eprintln!(
                "warning: {}/{} has {} pair(s), radar needs 3 axes; skipping chart",
                report.scenario,
                report.attribute,
                report.pairs.len()
            );
            continue;
        }
        if report.undefined_baseline {
            eprintln!(
                "warning: {}/{} has a zero baseline; skipping ratio radar",
                report.scenario, report.attribute
            );
            continue;
        }
        let svg = chart::distance_radar(report).map_err(data_err)?;
        let name = format!("radar_{}_{}.svg", report.scenario, report.attribute);
        std::fs::write(out_dir.join(&name), svg)
            .map_err(|e| data_err(anyhow!("cannot write {name}: {e}")))?;
        written += 1;
    }
    if !distance_reports.is_empty() {
        std::fs::write(
            out_dir.join("distance_table.csv"),
            chart::distance_table_csv(&distance_reports),
        )
        .map_err(|e| data_err(anyhow!("cannot write distance_table.csv: {e}")))?;
    }
    if let Some(consistency) = &consistency {
        std::fs::write(
            out_dir.join("consistency_table.csv"),
            chart::consistency_table_csv("run", consistency),
        )
        .map_err(|e| data_err(anyhow!("cannot write consistency_table.csv: {e}")))?;
    }
    if let Some(confidence) = &confidence {
        std::fs::write(
            out_dir.join("confidence_bars.csv"),
            chart::confidence_table_csv(confidence),
        )
        .map_err(|e| data_err(anyhow!("cannot write confidence_bars.csv: {e}")))?;
    }
    if let Some(judge_report) = &judge_report {
        std::fs::write(
            out_dir.join("judge_table.csv"),
            chart::judge_table_csv(judge_report),
        )
        .map_err(|e| data_err(anyhow!("cannot write judge_table.csv: {e}")))?;
        if !judge_report.alignment.is_empty() {
            std::fs::write(
                out_dir.join("alignment_table.csv"),
                chart::alignment_table_csv(judge_report),
            )
            .map_err(|e| data_err(anyhow!("cannot write alignment_table.csv: {e}")))?;
        }
    }
    println!(
        "report: {written} radar(s) and tables -> {}",
        out_dir.display()
    );
    Ok(())
}
