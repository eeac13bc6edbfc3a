//! Subcommand implementations. Every stage re-derives the catalog and
//! split from the config, consumes the previous stage's checkpoint, and
//! writes its outputs plus a resolved config copy into the output
//! directory.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;

use metricgp::checkpoint::{load_gp, load_params, save_gp, save_params};
use metricgp::data::{
    build_ground_truth, generate_pair_annotations, load_channels, load_interactions,
    split_by_time, GroundTruthScope, InteractionLog, ItemCatalog, TimeSplit,
};
use metricgp::eval::evaluate;
use metricgp::gp::GpState;
use metricgp::meta::{build_user_contexts, fit_meta, personalize_user, UserContext};
use metricgp::siamese::{
    train_siamese_baseline, EmbeddedCatalog, MetricMode, ModelShape, SiameseEnsembleParams,
};
use metricgp::ssl::{fit_ssl_with, freeze_mask};
use metricgp::theory::convergence_experiment;
use metricgp::{Error, Result};

use crate::config::RunConfig;

pub struct LoadedData {
    pub log: InteractionLog,
    pub catalog: ItemCatalog,
}

pub fn load_data(config: &RunConfig) -> Result<LoadedData> {
    let log = load_interactions(&config.data.interactions)?;
    let mut catalog = ItemCatalog::from_log(&log);
    load_channels(&config.data.channels, &mut catalog)?;
    Ok(LoadedData { log, catalog })
}

fn model_shape(config: &RunConfig) -> ModelShape {
    ModelShape {
        hidden: config.model.hidden,
        id_dim: config.model.id_dim,
        learn_lambda: config.model.learn_lambda,
        mode: if config.model.ensemble {
            MetricMode::Ensemble
        } else {
            MetricMode::SingleChannel
        },
    }
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), contents)?;
    Ok(())
}

fn write_config_copy(config: &RunConfig, dir: &Path) -> Result<()> {
    write_out(dir, "config.toml", &config.resolved_toml()?)
}

fn split_of(config: &RunConfig, data: &LoadedData) -> Result<TimeSplit> {
    split_by_time(&data.log, &data.catalog, config.split.test_fraction)
}

/// `ingest`: validate the data files and print a catalog summary.
pub fn ingest(config: &RunConfig) -> Result<()> {
    let data = load_data(config)?;
    println!(
        "{} interactions, {} items, {} channels",
        data.log.len(),
        data.catalog.len(),
        data.catalog.channels().len()
    );
    for ch in data.catalog.channels() {
        println!("channel {:?}: kind {:?}, dim {}", ch.name, ch.kind, ch.dim);
    }
    let split = split_of(config, &data)?;
    println!(
        "split at cutoff {}: {} train / {} test items",
        split.cutoff,
        split.train_items.len(),
        split.test_items.len()
    );
    Ok(())
}

/// `train-baseline`: contrastive training on noisy pair annotations.
pub fn train_baseline(config: &RunConfig, out: &Path) -> Result<()> {
    let data = load_data(config)?;
    let split = split_of(config, &data)?;
    let annotations = generate_pair_annotations(
        &data.log,
        &data.catalog,
        &split.train_items,
        config.annotation.window_k,
        config.annotation.samples_h,
        config.seed,
    )?;
    let init = SiameseEnsembleParams::init(
        &data.catalog.channel_dims(),
        data.catalog.len(),
        &model_shape(config),
        config.seed,
    );
    let train = config.train_config()?;
    let (params, trace) = train_siamese_baseline(
        &data.catalog,
        &annotations.pairs,
        &init,
        config.model.margin_tau,
        &train,
    )?;
    std::fs::create_dir_all(out)?;
    save_params(out.join("baseline.json"), &params)?;
    let mut csv = String::from("step,loss,grad_norm\n");
    for (step, loss, grad_norm) in &trace.records {
        csv.push_str(&format!("{step},{loss},{grad_norm}\n"));
    }
    write_out(out, "trace.csv", &csv)?;
    write_config_copy(config, out)?;
    println!(
        "trained baseline on {} pairs ({} users skipped); checkpoint at {}",
        annotations.pairs.len(),
        annotations.skipped_users,
        out.join("baseline.json").display()
    );
    Ok(())
}

/// `train-ssl`: fit the Siamese-kernel GP on surrogate targets, optionally
/// initialized from a baseline checkpoint.
pub fn train_ssl(config: &RunConfig, init_ckpt: Option<&Path>, out: &Path) -> Result<()> {
    let data = load_data(config)?;
    let split = split_of(config, &data)?;
    let r = metricgp::data::surrogate_targets(&data.log, &data.catalog, &split.train_items)?;
    let init = match init_ckpt {
        Some(path) => load_params(path)?,
        None => SiameseEnsembleParams::init(
            &data.catalog.channel_dims(),
            data.catalog.len(),
            &model_shape(config),
            config.seed,
        ),
    };
    let train = config.train_config()?;
    let freeze_groups: Vec<&str> = config.training.freeze.iter().map(|s| s.as_str()).collect();
    let freeze = freeze_mask(&init, &freeze_groups)?;
    std::fs::create_dir_all(out)?;
    let fit = fit_ssl_with(
        &data.catalog,
        &split.train_items,
        std::slice::from_ref(&r),
        &init,
        config.model.sigma2_init.ln(),
        &train,
        Some(&freeze),
        config.nystrom_policy()?,
    );
    let (state, trace) = match fit {
        Ok(ok) => ok,
        Err(Error::Diverged { step, trace }) => {
            // Flush the partial trace before reporting the abort.
            let mut buf = Vec::new();
            trace.write_csv(&mut buf)?;
            write_out(out, "trace.csv", &String::from_utf8_lossy(&buf))?;
            write_config_copy(config, out)?;
            return Err(Error::Diverged { step, trace });
        }
        Err(e) => return Err(e),
    };
    save_gp(out.join("ssl.json"), &state, &data.catalog)?;
    let mut buf = Vec::new();
    trace.write_csv(&mut buf)?;
    write_out(out, "trace.csv", &String::from_utf8_lossy(&buf))?;
    write_config_copy(config, out)?;
    println!(
        "fitted GP on {} train items; final sigma2 {:.6}; checkpoint at {}",
        split.train_items.len(),
        state.sigma2(),
        out.join("ssl.json").display()
    );
    Ok(())
}

fn resolve_gp(path: &Path, catalog: &ItemCatalog) -> Result<GpState> {
    let ckpt = load_gp(path)?;
    let items = ckpt
        .train_item_ids
        .iter()
        .map(|id| catalog.index_of(id))
        .collect::<Result<Vec<_>>>()?;
    GpState::fit_or_assemble(
        ckpt.metric.clone(),
        ckpt.log_noise,
        catalog,
        items,
        DVector::from_column_slice(&ckpt.r),
    )
}

/// `personalize`: meta-train the aggregation weights from a fitted GP and
/// adapt them per user.
pub fn personalize(config: &RunConfig, ssl_ckpt: &Path, out: &Path) -> Result<()> {
    let data = load_data(config)?;
    let state = resolve_gp(ssl_ckpt, &data.catalog)?;
    if state.metric.mode != MetricMode::Ensemble {
        return Err(Error::Config(
            "personalization requires an ensemble-mode checkpoint".into(),
        ));
    }
    let split = split_of(config, &data)?;
    let train_set: std::collections::BTreeSet<usize> =
        split.train_items.iter().copied().collect();
    let (users, skipped) =
        build_user_contexts(&state.metric, &data.catalog, &data.log, Some(&train_set))?;
    let users: Vec<UserContext> = if config.personalization.nonneg_weights {
        users.into_iter().map(|u| u.with_nonneg_weights()).collect()
    } else {
        users
    };
    if users.is_empty() {
        return Err(Error::Config(format!(
            "no users with enough rated train items ({skipped} skipped)"
        )));
    }
    let sigma2 = state.sigma2();
    let meta = config.meta_config()?;
    let w0 = users[0].raw_from_effective(&state.metric.agg_vector());
    let (w_meta, trace) = fit_meta(&users, &w0, sigma2, &meta)?;

    std::fs::create_dir_all(out)?;
    let p = state.metric.agg_h.len();
    let mut csv = String::from("user,");
    for i in 1..=p {
        csv.push_str(&format!("h_{i},"));
    }
    csv.push_str("b\n");
    let vantage_eff = users[0].effective_weights(&w_meta);
    let mut row = String::from("__vantage__,");
    for i in 0..=p {
        row.push_str(&vantage_eff[i].to_string());
        row.push(if i == p { '\n' } else { ',' });
    }
    csv.push_str(&row);
    for user in &users {
        let mut cfg_u = meta.clone();
        if config.personalization.normalize_rate {
            cfg_u.inner_rate = meta.inner_rate / user.items.len() as f64;
        }
        let w_u = personalize_user(&w_meta, user, sigma2, &cfg_u)?;
        let eff = user.effective_weights(&w_u);
        let mut row = format!("{},", user.user);
        for i in 0..=p {
            row.push_str(&eff[i].to_string());
            row.push(if i == p { '\n' } else { ',' });
        }
        csv.push_str(&row);
    }
    write_out(out, "weights.csv", &csv)?;
    let mut meta_csv = String::from("step,post_update_loss\n");
    for (step, loss) in &trace.records {
        meta_csv.push_str(&format!("{step},{loss}\n"));
    }
    write_out(out, "meta_trace.csv", &meta_csv)?;
    write_config_copy(config, out)?;
    println!(
        "personalized {} users ({} skipped); weights at {}",
        users.len(),
        skipped,
        out.join("weights.csv").display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalScope {
    Population,
    User,
}

fn load_metric(path: &Path, catalog: &ItemCatalog) -> Result<SiameseEnsembleParams> {
    // Accept either a GP checkpoint or a bare params checkpoint.
    match load_gp(path) {
        Ok(ckpt) => Ok(ckpt.metric),
        Err(_) => {
            let params = load_params(path)?;
            if let Some(t) = &params.id_embed {
                if t.table.nrows() != catalog.len() {
                    return Err(Error::Checkpoint(format!(
                        "ID table rows ({}) do not match the catalog ({})",
                        t.table.nrows(),
                        catalog.len()
                    )));
                }
            }
            Ok(params)
        }
    }
}

fn load_personalized_weights(path: &Path, p: usize) -> Result<BTreeMap<String, DVector<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Config(format!("cannot read weights {}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: 0,
            msg: e.to_string(),
        })?;
        if rec.len() != p + 2 {
            return Err(Error::Config(format!(
                "weights row has {} fields, expected {}",
                rec.len(),
                p + 2
            )));
        }
        let user = rec[0].to_string();
        let mut w = DVector::zeros(p + 1);
        for i in 0..=p {
            w[i] = rec[i + 1]
                .parse()
                .map_err(|_| Error::Config(format!("bad weight value {:?}", &rec[i + 1])))?;
        }
        out.insert(user, w);
    }
    Ok(out)
}

/// `evaluate`: rank and score against co-interaction ground truth, either
/// population-wide over test items or per user against their personal
/// co-interactions.
pub fn evaluate_cmd(config: &RunConfig, model: &Path, scope: EvalScope, out: &Path) -> Result<()> {
    let data = load_data(config)?;
    let params = load_metric(model, &data.catalog)?;
    let split = split_of(config, &data)?;
    let horizon = config.evaluation.horizon_days * 86_400;
    let k = config.evaluation.k;
    let candidates: Vec<usize> = (0..data.catalog.len()).collect();
    std::fs::create_dir_all(out)?;

    match scope {
        EvalScope::Population => {
            let truth =
                build_ground_truth(&data.log, &data.catalog, horizon, GroundTruthScope::Population)?;
            let embedded = EmbeddedCatalog::build(&params, &data.catalog)?;
            let report = evaluate(
                |q, c| embedded.distance(&params, q, c),
                &split.test_items,
                &candidates,
                &truth,
                k,
            )?;
            let mut buf = Vec::new();
            report.write_csv(&data.catalog, &mut buf)?;
            write_out(out, "report.csv", &String::from_utf8_lossy(&buf))?;
            write_config_copy(config, out)?;
            println!(
                "population scope over {} test queries ({} with empty truth): \
                 HR@{k} {:.4}, MRR@{k} {:.4}, NDCG@{k} {:.4}",
                report.num_queries,
                report.num_empty_truth,
                report.mean_hr,
                report.mean_mrr,
                report.mean_ndcg
            );
        }
        EvalScope::User => {
            let p = params.agg_h.len();
            let overrides = match &config.evaluation.personalized_weights {
                Some(path) => load_personalized_weights(path, p)?,
                None => BTreeMap::new(),
            };
            // Cohort: users with enough rated train items, in id order.
            let train_set: std::collections::BTreeSet<usize> =
                split.train_items.iter().copied().collect();
            let (users, _) =
                build_user_contexts(&params, &data.catalog, &data.log, Some(&train_set))?;
            let mut rows = String::from("query,hr,mrr,ndcg\n");
            let mut sums = [0.0f64; 3];
            let mut count = 0usize;
            for user in users
                .iter()
                .filter(|u| u.items.len() >= config.evaluation.user_min_items)
                .take(config.evaluation.max_users)
            {
                let truth = build_ground_truth(
                    &data.log,
                    &data.catalog,
                    horizon,
                    GroundTruthScope::SingleUser(user.user.clone()),
                )?;
                let queries: Vec<usize> = user
                    .items
                    .iter()
                    .copied()
                    .filter(|&q| truth.num_relevant(q) > 0)
                    .collect();
                if queries.is_empty() {
                    continue;
                }
                let user_params = match overrides.get(&user.user) {
                    Some(w) => params.with_agg(w)?,
                    None => params.clone(),
                };
                let embedded = EmbeddedCatalog::build(&user_params, &data.catalog)?;
                let report = evaluate(
                    |q, c| embedded.distance(&user_params, q, c),
                    &queries,
                    &candidates,
                    &truth,
                    k,
                )?;
                rows.push_str(&format!(
                    "{},{},{},{}\n",
                    user.user, report.mean_hr, report.mean_mrr, report.mean_ndcg
                ));
                sums[0] += report.mean_hr;
                sums[1] += report.mean_mrr;
                sums[2] += report.mean_ndcg;
                count += 1;
            }
            if count == 0 {
                return Err(Error::Config("no users qualify for user-scope evaluation".into()));
            }
            rows.push_str(&format!(
                "mean,{},{},{}\n",
                sums[0] / count as f64,
                sums[1] / count as f64,
                sums[2] / count as f64
            ));
            write_out(out, "report.csv", &rows)?;
            write_config_copy(config, out)?;
            println!(
                "user scope over {count} users: HR@{k} {:.4}, MRR@{k} {:.4}, NDCG@{k} {:.4}",
                sums[0] / count as f64,
                sums[1] / count as f64,
                sums[2] / count as f64
            );
        }
    }
    Ok(())
}

/// `theory`: run the convergence experiment and write the per-trial report.
pub fn theory_cmd(config: &RunConfig, out: &Path) -> Result<()> {
    let spec = config.theory_spec();
    let report = convergence_experiment(&spec)?;
    std::fs::create_dir_all(out)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    write_out(out, "theory.csv", &String::from_utf8_lossy(&buf))?;
    write_config_copy(config, out)?;
    for (n, gap) in &report.mean_gap_by_n {
        println!("n = {n}: mean sup metric gap {gap:.4}");
    }
    if report.failed_trials > 0 {
        println!("{} trials failed and were excluded", report.failed_trials);
    }
    Ok(())
}

/// Checkpoint arguments must exist before any work starts; a missing
/// upstream checkpoint is its own failure class.
pub fn require_checkpoint(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    Ok(())
}

/// Writes `msg` to stderr and exits with the code mapped from `err`.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::MissingCheckpoint(_) => 3,
        Error::Diverged { .. } | Error::Numerical(_) | Error::Factorization { .. } => 4,
        _ => 2,
    }
}

pub fn flush_line(msg: &str) {
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{msg}");
}
