use std::collections::BTreeMap;

use anyhow::{Context, Result};
use serde_json::json;

use pressuresim::config::{PipelineConfig, Seeds};
use pressuresim::data::{ingest, write_records, Group, SynthManifest, TrialRecord};
use pressuresim::envs::{write_episode_csv, EpisodeRecord};
use pressuresim::eval::{self, split, write_predictions_csv, write_results_csv, SplitSpec, Strategy};
use pressuresim::pipeline::{self as pl, AgentKind, TransferModels};
use pressuresim::ppo::{self, PolicyNetwork};
use pressuresim::reasoner::{self, ReasonerModel};
use pressuresim::taskgen::{enumerate_all, write_questions_csv};
use pressuresim::transfer::{self, ChoiceModel, RtModel, TransferInput};

use crate::artifacts::{create, usage, Workspace};
use crate::{Cli, Command};

const REASONER: &str = "reasoner.ckpt";
const DATASET: &str = "dataset.csv";
const CHOICE: &str = "transfer_choice.ckpt";
const RT: &str = "transfer_rt.ckpt";

fn policy_file(kind: AgentKind) -> String {
    format!("{kind}_policy.ckpt")
}

pub fn effective_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = Seeds::all(s);
    }
    if let Some(o) = &cli.out_dir {
        cfg.paths.outputs = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    if let Command::Serve { port } = cli.command {
        return serve(&cfg, port);
    }
    let mut ws = Workspace::new(cfg)?;
    match &cli.command {
        Command::GenQuestions => gen_questions(&mut ws),
        Command::TrainReasoner => train_reasoner(&mut ws),
        Command::SynthData => synth_data(&mut ws),
        Command::FitTransfer => fit_transfer(&mut ws),
        Command::TrainDrl { agent } => train_drl(&mut ws, *agent),
        Command::Simulate => simulate(&mut ws),
        Command::Evaluate { strategy, retrain } => evaluate(&mut ws, *strategy, *retrain),
        Command::Config | Command::Serve { .. } => unreachable!("handled above"),
    }
}

fn gen_questions(ws: &mut Workspace) -> Result<()> {
    let qs = enumerate_all();
    let p = ws.path("questions.csv");
    write_questions_csv(&qs, create(&p)?)?;
    ws.write_manifest("gen-questions", &[p], json!({ "count": qs.len() }))?;
    tracing::info!(count = qs.len(), "questions written");
    Ok(())
}

fn train_reasoner(ws: &mut Workspace) -> Result<()> {
    let run = pl::train_reasoner(&ws.cfg.reasoner, ws.cfg.seeds.reasoner)?;
    let ck = ws.save_checkpoint(REASONER, run.model.to_checkpoint())?;
    let curve = ws.path("reasoner_curve.csv");
    reasoner::write_curve_csv(&run.curve, create(&curve)?)?;
    let details = json!({
        "epochs": run.curve.len(),
        "test_accuracy": run.test_accuracy(),
        "held_out": run.held_out,
    });
    ws.write_manifest("train-reasoner", &[ck, curve], details)?;
    tracing::info!(epochs = run.curve.len(), test_accuracy = run.test_accuracy(), "reasoner trained");
    Ok(())
}

fn synth_data(ws: &mut Workspace) -> Result<()> {
    let configs = pl::synth_configs(&ws.cfg.synth, ws.cfg.controller, ws.cfg.seeds.data);
    let records = pl::synth_dataset(&configs)?;
    let data = ws.path(DATASET);
    write_records(&records, create(&data)?)?;
    let meta = ws.path("synth_manifest.json");
    let m = SynthManifest {
        generator: "linear: base_rt + w1 * hardness + w2 * pressure + noise".into(),
        configs,
        n_records: records.len(),
    };
    std::fs::write(&meta, serde_json::to_string_pretty(&m)?)?;
    ws.write_manifest("synth-data", &[data, meta], json!({ "records": records.len() }))?;
    Ok(())
}

fn load_records(ws: &mut Workspace) -> Result<Vec<TrialRecord>> {
    if let Some(p) = ws.cfg.paths.dataset.clone() {
        if !p.exists() {
            return usage(format!("paths.dataset {} does not exist", p.display()));
        }
        ws.note_input(&p);
        let ing = ingest(&p)?;
        if ing.report.file_rejected() {
            anyhow::bail!("{} failed validation: {:?}", p.display(), ing.report);
        }
        if !ing.report.is_clean() {
            tracing::warn!(rejected = ing.report.violations.len(), "dataset rows dropped by validation");
        }
        return Ok(ing.records);
    }
    ws.check_manifest("synth-data")?;
    let p = ws.require(DATASET, "synth-data")?;
    Ok(ingest(&p)?.records)
}

fn load_reasoner(ws: &mut Workspace) -> Result<ReasonerModel<f32>> {
    let ck = ws.load_checkpoint(REASONER, reasoner::CHECKPOINT_KIND, "train-reasoner")?;
    Ok(ReasonerModel::from_checkpoint(&ck)?)
}

fn load_transfer(ws: &mut Workspace) -> Result<TransferModels> {
    let c = ws.load_checkpoint(CHOICE, transfer::CLASSIFIER_KIND, "fit-transfer")?;
    let r = ws.load_checkpoint(RT, transfer::REGRESSOR_KIND, "fit-transfer")?;
    Ok(TransferModels {
        choice: ChoiceModel::from_checkpoint(&c)?,
        rt: RtModel::from_checkpoint(&r)?,
    })
}

fn load_policy(ws: &mut Workspace, kind: AgentKind) -> Result<PolicyNetwork<f32>> {
    let ck = ws.load_checkpoint(&policy_file(kind), ppo::CHECKPOINT_KIND, &format!("train-drl --agent {kind}"))?;
    Ok(PolicyNetwork::from_checkpoint(&ck)?)
}

/// Everything downstream of the transfer fit needs: records, features and
/// baseline predictions for every record.
struct Prepared {
    records: Vec<TrialRecord>,
    inputs: Vec<TransferInput>,
    fold: eval::Fold,
}

fn prepare(ws: &mut Workspace) -> Result<Prepared> {
    let reasoner = load_reasoner(ws)?;
    let records = load_records(ws)?;
    let inputs = pl::transfer_inputs(&reasoner, &records);
    let fold = pl::general_fold(&records, ws.cfg.seeds.split)?;
    Ok(Prepared {
        records,
        inputs,
        fold,
    })
}

fn fit_transfer(ws: &mut Workspace) -> Result<()> {
    let p = prepare(ws)?;
    let tcfg = ws.cfg.transfer.transfer_config(ws.cfg.seeds.transfer);
    let (models, rows) = pl::fit_transfer(&p.records, &p.inputs, &p.fold.train, &tcfg)?;
    let c = ws.save_checkpoint(CHOICE, models.choice.to_checkpoint())?;
    let r = ws.save_checkpoint(RT, models.rt.to_checkpoint())?;

    let base = models.predict(&p.inputs)?;
    let pred: Vec<bool> = p.fold.test.iter().map(|&i| base[i].choice).collect();
    let truth: Vec<bool> = p.fold.test.iter().map(|&i| p.records[i].human_choice).collect();
    let rt_pred: Vec<f64> = p.fold.test.iter().map(|&i| base[i].r_t).collect();
    let rt_truth: Vec<f64> = p.fold.test.iter().map(|&i| p.records[i].rt_seconds).collect();
    let details = json!({
        "fit_rows": rows,
        "test_rows": p.fold.test.len(),
        "choice": eval::classification(&pred, &truth)?,
        "rt_mape": eval::mape(&rt_pred, &rt_truth)?,
        "support_vectors": { "choice": models.choice.n_support(), "rt": models.rt.n_support() },
    });
    tracing::info!(%details, "transfer fit");
    ws.write_manifest("fit-transfer", &[c, r], details)?;
    Ok(())
}

fn train_drl(ws: &mut Workspace, kind: AgentKind) -> Result<()> {
    let p = prepare(ws)?;
    let models = load_transfer(ws)?;
    let base = models.predict(&p.inputs)?;
    let env = ws.cfg.env();
    let contexts = pl::build_contexts(&p.records, &base, &p.fold.train, &env)?;
    let steps = match kind {
        AgentKind::Hybrid => ws.cfg.agents.hybrid_steps,
        AgentKind::Pure => ws.cfg.agents.pure_steps,
    };
    let run = pl::train_agent(kind, contexts, &env, &ws.cfg.ppo_config(), steps, ws.cfg.agents.eval_contexts)?;
    let ck = ws.save_checkpoint(&policy_file(kind), run.policy.to_checkpoint())?;
    let curve = ws.path(&format!("{kind}_curve.csv"));
    pl::write_training_curve(&run.curve, create(&curve)?)?;
    let details = json!({
        "agent": kind,
        "steps": steps,
        "train_seconds": run.train_seconds(),
        "convergence_seconds": run.convergence_seconds(ws.cfg.agents.convergence_fraction),
    });
    ws.write_manifest(&format!("train-drl-{kind}"), &[ck, curve], details)?;
    Ok(())
}

fn simulate(ws: &mut Workspace) -> Result<()> {
    let p = prepare(ws)?;
    let models = load_transfer(ws)?;
    let hybrid = load_policy(ws, AgentKind::Hybrid)?;
    let pure = if ws.path(&policy_file(AgentKind::Pure)).exists() {
        Some(load_policy(ws, AgentKind::Pure)?)
    } else {
        tracing::warn!("no pure policy; predictions carry the hybrid agent only");
        None
    };
    let base = models.predict(&p.inputs)?;
    let env = ws.cfg.env();
    let test = pl::build_contexts(&p.records, &base, &p.fold.test, &env)?;
    let (rows, episodes) = pl::predict_rows(&p.fold.name, &test, &hybrid, pure.as_ref(), &env)?;

    let ep_path = ws.path("episodes.csv");
    write_episode_csv(&episodes, create(&ep_path)?)?;
    let pred_path = ws.path("predictions.csv");
    write_predictions_csv(&rows, create(&pred_path)?)?;
    let groups: Vec<Group> = test.iter().map(|c| c.trial.group).collect();
    let stats_path = ws.path("trajectory_stats.json");
    let stats = trajectory_summary(&episodes, &groups)?;
    std::fs::write(&stats_path, serde_json::to_string_pretty(&stats)?)?;
    let (by_group, overall) = pl::group_scores(&rows)?;
    let details = json!({ "groups": by_group, "overall": overall });
    tracing::info!(%details, "simulated");
    ws.write_manifest("simulate", &[ep_path, pred_path, stats_path], details)?;
    Ok(())
}

fn trajectory_summary(episodes: &[EpisodeRecord], groups: &[Group]) -> Result<serde_json::Value> {
    let by_group = eval::group_trajectory_stats(episodes, groups)?;
    // per-episode lists are already in episodes.csv
    let slim: BTreeMap<&String, serde_json::Value> = by_group
        .iter()
        .map(|(g, s)| {
            (g, json!({ "episodes": s.per_episode.len(), "mean_effect": s.mean_effect, "action_std": s.action_std, "slope": s.slope }))
        })
        .collect();
    Ok(json!(slim))
}

fn evaluate(ws: &mut Workspace, strategy: Strategy, retrain: bool) -> Result<()> {
    let p = prepare(ws)?;
    let (hybrid, pure) = if retrain {
        (None, None)
    } else {
        (Some(load_policy(ws, AgentKind::Hybrid)?), Some(load_policy(ws, AgentKind::Pure)?))
    };
    let folds = split(&p.records, &SplitSpec::new(strategy, ws.cfg.seeds.split))?;
    let tcfg = ws.cfg.transfer.transfer_config(ws.cfg.seeds.transfer);
    let env = ws.cfg.env();
    let ppo_cfg = ws.cfg.ppo_config();
    let a = ws.cfg.agents.clone();

    let mut results = Vec::new();
    let mut all_rows = Vec::new();
    for fold in &folds {
        let (models, _) = pl::fit_transfer(&p.records, &p.inputs, &fold.train, &tcfg)
            .with_context(|| format!("fold {}", fold.name))?;
        let base = models.predict(&p.inputs)?;
        let test = pl::build_contexts(&p.records, &base, &fold.test, &env)?;
        let (h, u) = match (&hybrid, &pure) {
            (Some(h), Some(u)) => (h.clone(), u.clone()),
            _ => {
                let train = pl::build_contexts(&p.records, &base, &fold.train, &env)?;
                let h = pl::train_agent(AgentKind::Hybrid, train.clone(), &env, &ppo_cfg, a.hybrid_steps, a.eval_contexts)?;
                let u = pl::train_agent(AgentKind::Pure, train, &env, &ppo_cfg, a.pure_steps, a.eval_contexts)?;
                (h.policy, u.policy)
            }
        };
        let (rows, _) = pl::predict_rows(&fold.name, &test, &h, Some(&u), &env)?;
        let participant = fold.participant.clone().unwrap_or_else(|| "all".into());
        let group = fold.group.map_or("all".to_string(), |g| g.to_string());
        results.extend(eval::score_rows(&fold.name, &participant, &group, &rows)?);
        tracing::info!(fold = %fold.name, n = rows.len(), "fold scored");
        all_rows.extend(rows);
    }
    let res_path = ws.path(&format!("results_{strategy}.csv"));
    write_results_csv(&results, create(&res_path)?)?;
    let pred_path = ws.path(&format!("predictions_{strategy}.csv"));
    write_predictions_csv(&all_rows, create(&pred_path)?)?;
    let (by_group, overall) = pl::group_scores(&all_rows)?;
    let summary_path = ws.path(&format!("summary_{strategy}.json"));
    let summary = json!({ "strategy": strategy, "folds": folds.len(), "retrained": retrain, "groups": by_group, "overall": overall });
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    ws.write_manifest(&format!("evaluate-{strategy}"), &[res_path, pred_path, summary_path], summary)?;
    Ok(())
}

/// Uses the seed, thresholds and output directory of the effective config;
/// the port comes from `--port`, then `$PORT`, then 8080.
fn serve(cfg: &PipelineConfig, port: Option<u16>) -> Result<()> {
    let port = match (port, std::env::var("PORT")) {
        (Some(p), _) => p,
        (None, Ok(p)) => match p.parse() {
            Ok(p) => p,
            Err(_) => return usage(format!("PORT {p:?} is not a port number")),
        },
        (None, Err(_)) => 8080,
    };
    let scfg = pressuresim_service::ServiceConfig {
        cors_origin: std::env::var("CORS_ORIGIN").ok(),
        ..pressuresim_service::ServiceConfig::from_pipeline(cfg)
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(pressuresim_service::serve(scfg, port))?;
    Ok(())
}
