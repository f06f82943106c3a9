//! Stage implementations behind the CLI. Each reads its inputs from disk,
//! writes its outputs, and is a pure function of those inputs and the config.

use std::path::{Path, PathBuf};

use simagent_core::environment::ground_truth_batch;
use simagent_core::generator::{generate_scenario, Template};
use simagent_core::metrics::{build_report, evaluate_scenario};
use simagent_core::posttrain::{kl_to_reference, run_posttrain};
use simagent_core::pretrain::{train_with, EpochLog};
use simagent_core::model::PolicyModel;
use simagent_core::testtime::{test_time_generate, Clock, Telemetry};
use simagent_core::tokenizer::tokenize;

use crate::artifact::{self, *};
use crate::checkpoint;
use crate::config::{stage_seed, RunConfig};
use crate::error::{Error, Result};
use crate::plot;

/// Standard file names inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn new(p: impl Into<PathBuf>) -> Self {
        RunDir(p.into())
    }
    pub fn scenarios(&self) -> PathBuf {
        self.0.join("scenarios.json")
    }
    pub fn eval(&self) -> PathBuf {
        self.0.join("eval.json")
    }
    pub fn tokens(&self) -> PathBuf {
        self.0.join("tokens.json")
    }
    pub fn pretrain_ckpt(&self) -> PathBuf {
        self.0.join("pretrain.ckpt")
    }
    pub fn pretrain_log(&self) -> PathBuf {
        self.0.join("pretrain_log.json")
    }
    pub fn posttrain_ckpt(&self) -> PathBuf {
        self.0.join("posttrain.ckpt")
    }
    pub fn posttrain_log(&self) -> PathBuf {
        self.0.join("posttrain_log.json")
    }
    pub fn rollouts(&self) -> PathBuf {
        self.0.join("rollouts.json")
    }
    pub fn timing(&self) -> PathBuf {
        self.0.join("timing.json")
    }
    pub fn report(&self) -> PathBuf {
        self.0.join("report.json")
    }
    pub fn plots(&self) -> PathBuf {
        self.0.join("plots")
    }
}

/// Scenario `i` of a set cycles through `templates`; its seed is drawn from
/// the set seed.
pub fn generate_set(templates: &[Template], count: usize, seed: u64) -> ScenarioSet {
    let entries = (0..count)
        .map(|i| {
            let template = templates[i % templates.len()];
            let s = stage_seed(seed, &format!("scenario-{i}"));
            ScenarioEntry { template, seed: s, scenario: generate_scenario(template, s) }
        })
        .collect();
    ScenarioSet { seed, entries }
}

pub fn generate(out: &Path, templates: &[Template], count: usize, seed: u64) -> Result<ScenarioSet> {
    if templates.is_empty() {
        return Err(Error::Config("no templates selected".into()));
    }
    let set = generate_set(templates, count, seed);
    artifact::write(out, &set)?;
    Ok(set)
}

pub fn tokenize_set(cfg: &RunConfig, scenarios: &Path, out: &Path) -> Result<TokenDump> {
    let set: ScenarioSet = artifact::read(scenarios, "simagent generate")?;
    let mut dump = TokenDump { scenarios: Vec::new() };
    for e in &set.entries {
        let mut agents = Vec::new();
        for a in &e.scenario.agents {
            // tracks with gaps are skipped
            if let Ok(t) = tokenize(a, &cfg.tokenizer) {
                agents.push(AgentTokens { agent_id: a.id, reference_bins: t.reference_bins, tokens: t.tokens.iter().map(|k| k.0).collect(), clamped: t.clamped });
            }
        }
        dump.scenarios.push(agents);
    }
    artifact::write(out, &dump)?;
    Ok(dump)
}

pub fn pretrain(cfg: &RunConfig, scenarios: &Path, ckpt: &Path, log: &Path, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<PretrainLog> {
    let set: ScenarioSet = artifact::read(scenarios, "simagent generate")?;
    let data = set.scenarios();
    let mut model = PolicyModel::new(&cfg.model_config())?;
    let report = train_with(&mut model, &data, &cfg.train_config(), on_epoch)?;
    checkpoint::save(ckpt, &model, "pretrain")?;
    let out = PretrainLog { report };
    artifact::write(log, &out)?;
    Ok(out)
}

/// Scenarios used for post-training: the configured templates, capped.
pub fn posttrain_selection(cfg: &RunConfig, set: &ScenarioSet) -> Vec<simagent_core::scenario::Scenario> {
    set.entries
        .iter()
        .filter(|e| cfg.stages.posttrain_templates.contains(&e.template))
        .take(cfg.stages.posttrain_scenarios)
        .map(|e| e.scenario.clone())
        .collect()
}

pub fn posttrain(cfg: &RunConfig, ckpt_in: &Path, scenarios: &Path, ckpt_out: &Path, log: &Path) -> Result<PosttrainLog> {
    let (reference, _) = checkpoint::load(ckpt_in, "simagent pretrain")?;
    let set: ScenarioSet = artifact::read(scenarios, "simagent generate")?;
    let data = posttrain_selection(cfg, &set);
    if data.is_empty() {
        return Err(Error::Config("no scenarios match stages.posttrain_templates".into()));
    }
    let pc = cfg.posttrain_config();
    let mut model = reference.clone();
    let report = run_posttrain(&mut model, &reference, &data, &pc)?;
    let kl = kl_to_reference(&model, &reference, &data, pc.group_size, pc.horizon, stage_seed(pc.seed, "kl")).map_err(Error::Posttrain)?;
    checkpoint::save(ckpt_out, &model, pc.method.name())?;
    let out = PosttrainLog { report, kl_to_reference: kl };
    artifact::write(log, &out)?;
    Ok(out)
}

pub fn rollout(cfg: &RunConfig, ckpt: &Path, scenarios: &Path, out: &Path, timing: &Path, clock: &dyn Clock) -> Result<RolloutSet> {
    let (model, side) = checkpoint::load(ckpt, "simagent pretrain (or posttrain)")?;
    let set: ScenarioSet = artifact::read(scenarios, "simagent generate")?;
    let base = cfg.testtime_config();
    let mut entries = Vec::new();
    let mut per = Vec::new();
    for (i, e) in set.entries.iter().enumerate() {
        let tc = simagent_core::testtime::TestTimeConfig { seed: stage_seed(base.seed, &format!("scenario-{i}")), ..base.clone() };
        let r = test_time_generate(&model, &e.scenario, &tc, clock)?;
        per.push(r.telemetry);
        entries.push(RolloutEntry { scenario: i, sampled: r.sampled, feasible: r.feasible, budget_exhausted: r.budget_exhausted, warning: r.warning, batch: r.batch });
    }
    let total = per.iter().fold(Telemetry::default(), |a, t| Telemetry {
        sampling_ns: a.sampling_ns + t.sampling_ns,
        scoring_ns: a.scoring_ns + t.scoring_ns,
        clustering_ns: a.clustering_ns + t.clustering_ns,
    });
    let rs = RolloutSet { checkpoint: side.sha256, entries };
    artifact::write(out, &rs)?;
    artifact::write(timing, &TimingLog { per_scenario: per, total })?;
    Ok(rs)
}

pub fn evaluate(cfg: &RunConfig, scenarios: &Path, rollouts: &Path, out: &Path) -> Result<EvalReport> {
    let rs: RolloutSet = artifact::read(rollouts, "simagent rollout")?;
    let set: ScenarioSet = artifact::read(scenarios, "simagent generate")?;
    let mut per = Vec::new();
    for e in &rs.entries {
        let sc = &set.entries.get(e.scenario).ok_or_else(|| Error::format(rollouts, format!("scenario index {} out of range", e.scenario)))?.scenario;
        per.push(evaluate_scenario(sc, &e.batch, &cfg.metrics)?);
    }
    let report = EvalReport { checkpoint: rs.checkpoint, metrics: build_report(per, &cfg.metrics)? };
    artifact::write(out, &report)?;
    Ok(report)
}

/// Renders whatever artifacts exist in the run directory. Returns the files
/// written.
pub fn plot_run(dir: &RunDir, scenarios: &Path, max_scenes: usize) -> Result<Vec<PathBuf>> {
    let out = dir.plots();
    let mut written = Vec::new();
    fn put(written: &mut Vec<PathBuf>, out: &Path, name: &str, text: String) -> Result<()> {
        let p = out.join(name);
        plot::write_text(&p, &text)?;
        written.push(p);
        Ok(())
    }
    if dir.pretrain_log().exists() {
        let log: PretrainLog = artifact::read(&dir.pretrain_log(), "simagent pretrain")?;
        let pts = |f: fn(&EpochLog) -> Option<f64>| log.report.logs.iter().filter_map(|l| f(l).map(|v| (l.step as f64, v))).collect::<Vec<_>>();
        let series = vec![("train loss".to_string(), pts(|l| Some(l.train_loss))), ("val loss".to_string(), pts(|l| l.val_loss))];
        put(&mut written, &out, "pretrain_loss.svg", plot::line_svg("pretraining loss", "step", &series))?;
        let rows: Vec<Vec<String>> = log
            .report
            .logs
            .iter()
            .map(|l| {
                let o = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
                vec![l.epoch.to_string(), l.step.to_string(), l.lr.to_string(), l.train_loss.to_string(), l.train_acc.to_string(), o(l.val_loss), o(l.val_acc)]
            })
            .collect();
        let p = out.join("pretrain_log.csv");
        plot::write_csv(&p, &["epoch", "step", "lr", "train_loss", "train_acc", "val_loss", "val_acc"], &rows)?;
        written.push(p);
    }
    if dir.posttrain_log().exists() {
        let log: PosttrainLog = artifact::read(&dir.posttrain_log(), "simagent posttrain")?;
        let u = &log.report.updates;
        let series = vec![
            ("collision rate".to_string(), u.iter().map(|x| (x.update as f64, x.collision_rate)).collect()),
            ("offroad rate".to_string(), u.iter().map(|x| (x.update as f64, x.offroad_rate)).collect()),
            ("kl".to_string(), u.iter().map(|x| (x.update as f64, x.kl)).collect()),
        ];
        put(&mut written, &out, "posttrain.svg", plot::line_svg(&format!("post-training ({})", log.report.method.name()), "update", &series))?;
        let rows = u.iter().map(|x| vec![x.update.to_string(), x.loss.to_string(), x.kl.to_string(), x.entropy.to_string(), x.mean_reward.to_string(), x.collision_rate.to_string(), x.offroad_rate.to_string()]).collect::<Vec<_>>();
        let p = out.join("posttrain_log.csv");
        plot::write_csv(&p, &["update", "loss", "kl", "entropy", "mean_reward", "collision_rate", "offroad_rate"], &rows)?;
        written.push(p);
    }
    if dir.report().exists() {
        let rep: EvalReport = artifact::read(&dir.report(), "simagent evaluate")?;
        let m = &rep.metrics;
        let names = simagent_core::metrics::Component::ALL.iter().map(|c| c.name().to_string());
        let mut bars: Vec<(String, f64)> = names
            .clone()
            .enumerate()
            .map(|(j, n)| (n, m.scenarios.iter().map(|s| s.components[j]).sum::<f64>() / m.scenarios.len().max(1) as f64))
            .collect();
        bars.push(("realism".into(), m.realism));
        put(&mut written, &out, "components.svg", plot::bar_svg("component likelihoods", &bars))?;
        let mut header = vec!["scenario".to_string(), "ade".into(), "min_ade".into(), "collision_rate".into(), "offroad_rate".into()];
        header.extend(names);
        let rows = m
            .scenarios
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut r = vec![i.to_string(), s.ade.to_string(), s.min_ade.to_string(), s.collision_rate.to_string(), s.offroad_rate.to_string()];
                r.extend(s.components.iter().map(|c| c.to_string()));
                r
            })
            .collect::<Vec<_>>();
        let p = out.join("report.csv");
        plot::write_csv(&p, &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
        written.push(p);
    }
    if dir.rollouts().exists() {
        let rs: RolloutSet = artifact::read(&dir.rollouts(), "simagent rollout")?;
        let set: ScenarioSet = artifact::read(scenarios, "simagent generate")?;
        for e in rs.entries.iter().take(max_scenes) {
            let Some(sc) = set.entries.get(e.scenario) else { continue };
            let gt = ground_truth_batch(&sc.scenario, e.batch.horizon);
            let truth = gt.as_ref().map(|g| g.rollouts[0].poses.as_slice());
            let title = format!("scenario {} ({}), {} rollouts", e.scenario, sc.template.name(), e.batch.rollouts.len());
            put(&mut written, &out, &format!("rollouts_{:03}.svg", e.scenario), plot::rollout_svg(&sc.scenario, &e.batch, truth, &title))?;
        }
    }
    if written.is_empty() {
        return Err(Error::MissingArtifact { what: "any plottable", path: dir.0.clone(), hint: "simagent pretrain / evaluate" });
    }
    Ok(written)
}
