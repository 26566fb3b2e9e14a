//! Subcommand implementations.

use crate::args::{
    parse_list, EvalArgs, GroundArgs, RecordArgs, RenderArgs, ReplayArgs, SynthArgs, WaedArgs,
};
use crate::backends;
use anyhow::{bail, Context, Result};
use openground_core::chain::{waed_human, waed_model, ChainStrategy, HumanChainSet};
use openground_core::config::EngineConfig;
use openground_core::eval::{self, accuracy_at, join_records, EvalRecord};
use openground_core::grounding::{
    annotation_targets, render_annotations, AnnotationMode, AnnotationTarget,
};
use openground_core::olt::{load_olt, OltTable};
use openground_core::pipeline::{self, ground_batch, GroundRun, QueryRecord};
use openground_core::scene::{load_scene, Scene, ViewVisibility};
use openground_core::synth;
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

fn load_scene_and_olt(scene_dir: &Path, olt: Option<&Path>) -> Result<(Scene, OltTable, PathBuf)> {
    let scene =
        load_scene(scene_dir).with_context(|| format!("loading scene {}", scene_dir.display()))?;
    let root = scene_dir.parent().unwrap_or(scene_dir).to_path_buf();
    let olt_path = olt
        .map(Path::to_path_buf)
        .unwrap_or_else(|| root.join(openground_core::synth::OLT_FILE));
    let table = if olt_path.exists() {
        load_olt(&olt_path, &scene)
            .with_context(|| format!("loading lookup table {}", olt_path.display()))?
    } else {
        OltTable::new()
    };
    Ok((scene, table, root))
}

fn print_run(run: &GroundRun) {
    for (i, step) in run.trace.steps.iter().enumerate() {
        let mut line = format!("step {}: {}", i + 1, step.label);
        if step.ace_invoked {
            line.push_str(&format!(
                " — perceived {} new entr{} via views {:?}",
                step.new_olt_ids.len(),
                if step.new_olt_ids.len() == 1 {
                    "y"
                } else {
                    "ies"
                },
                step.ace_views
            ));
        }
        match step.chosen_id {
            Some(id) => line.push_str(&format!(
                " — candidates {:?}, chose {id}{}",
                step.candidates,
                if step.low_confidence {
                    " (low confidence)"
                } else {
                    ""
                }
            )),
            None => line.push_str(" — skipped (no candidates)"),
        }
        println!("{line}");
    }
}

pub fn ground(args: GroundArgs) -> Result<()> {
    let config = args.engine.resolve()?;
    let (scene, table, root) = load_scene_and_olt(&args.scene, args.olt.as_deref())?;
    let built = backends::build(&args.backend, &config, &[root.as_path()], false)?;
    let run = pipeline::ground(&scene, &table, &args.query, &config, &built.backends);
    if !args.quiet {
        print_run(&run);
    }
    openground_core::util::write_json_atomic(&args.trace, &run.trace)
        .with_context(|| format!("writing trace {}", args.trace.display()))?;
    println!("trace: {}", args.trace.display());
    match run.outcome {
        Ok(bbox) => {
            println!("target box: {}", serde_json::to_string(&bbox)?);
            Ok(())
        }
        Err(e) => Err(e.into()),
    }
}

fn scored_records(
    queries: &[QueryRecord],
    results: &[pipeline::ResultRecord],
) -> Result<Vec<EvalRecord>> {
    let with_gt: Vec<QueryRecord> = queries
        .iter()
        .filter(|q| q.gt_box.is_some())
        .cloned()
        .collect();
    let ids: Vec<&str> = with_gt.iter().map(|q| q.query_id.as_str()).collect();
    let matching: Vec<pipeline::ResultRecord> = results
        .iter()
        .filter(|r| ids.contains(&r.query_id.as_str()))
        .cloned()
        .collect();
    Ok(join_records(&with_gt, &matching)?)
}

fn grid_cells(args: &EvalArgs, base: &EngineConfig) -> Result<Vec<(String, EngineConfig)>> {
    let strategies: Vec<ChainStrategy> = match &args.grid_strategies {
        Some(raw) => parse_list(raw, "strategy")?,
        None => vec![base.strategy],
    };
    let modes: Vec<AnnotationMode> = match &args.grid_annotation_modes {
        Some(raw) => parse_list(raw, "annotation mode")?,
        None => vec![base.annotation_mode],
    };
    let budgets: Vec<usize> = match &args.grid_max_views {
        Some(raw) => parse_list(raw, "max views")?,
        None => vec![base.max_views],
    };
    let mut cells = Vec::new();
    for &strategy in &strategies {
        for &mode in &modes {
            for &max_views in &budgets {
                let mut config = base.clone();
                config.strategy = strategy;
                config.annotation_mode = mode;
                config.max_views = max_views;
                config.validate()?;
                cells.push((
                    format!(
                        "strategy={} annotation={} V={}",
                        strategy.as_str(),
                        mode.as_str(),
                        max_views
                    ),
                    config,
                ));
            }
        }
    }
    Ok(cells)
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let base = args.engine.resolve()?;
    let queries = pipeline::load_queries(&args.queries)?;
    let built = backends::build(&args.backend, &base, &[args.scenes.as_path()], false)?;
    std::fs::create_dir_all(&args.out_dir)?;

    let has_grid = args.grid_strategies.is_some()
        || args.grid_annotation_modes.is_some()
        || args.grid_max_views.is_some();
    if has_grid {
        let cells = grid_cells(&args, &base)?;
        let grid = eval::ablation_grid::<anyhow::Error>(&cells, |config| {
            let results = ground_batch(
                &args.scenes,
                &queries,
                config,
                &built.backends,
                None,
                args.jobs,
            )?;
            scored_records(&queries, &results)
        })?;
        openground_core::util::write_json_atomic(&args.out_dir.join("grid.json"), &grid)?;
        println!(
            "{:<48}  {:>6}  {:>9}  {:>9}",
            "cell", "n", "acc@0.25", "acc@0.50"
        );
        for cell in &grid {
            println!(
                "{:<48}  {:>6}  {:>9.4}  {:>9.4}",
                cell.label, cell.count, cell.acc_at_25, cell.acc_at_50
            );
        }
        println!("grid: {}", args.out_dir.join("grid.json").display());
        return Ok(());
    }

    let trace_dir = args
        .trace_dir
        .clone()
        .unwrap_or_else(|| args.out_dir.join("traces"));
    let results = ground_batch(
        &args.scenes,
        &queries,
        &base,
        &built.backends,
        Some(&trace_dir),
        args.jobs,
    )?;
    pipeline::write_results(&args.out_dir.join("results.jsonl"), &results)?;

    let records = scored_records(&queries, &results)?;
    if records.is_empty() {
        println!(
            "{} queries run, none carry ground truth; skipping metrics",
            results.len()
        );
        return Ok(());
    }
    let acc25 = accuracy_at(&records, 0.25)?;
    let acc50 = accuracy_at(&records, 0.50)?;

    let mut tag_keys: Vec<String> = records
        .iter()
        .flat_map(|r| r.tags.keys().cloned())
        .collect();
    tag_keys.sort();
    tag_keys.dedup();

    let mut report = serde_json::json!({
        "n_total": results.len(),
        "n_scored": records.len(),
        "acc_at_25": acc25,
        "acc_at_50": acc50,
    });
    let mut text = format!(
        "queries: {} total, {} scored\nacc@0.25: {acc25:.4}\nacc@0.50: {acc50:.4}\n",
        results.len(),
        records.len()
    );
    for key in &tag_keys {
        let table = eval::breakdown(&records, key)?;
        text.push('\n');
        text.push_str(&eval::render_breakdown_text(&table));
        report[format!("breakdown_{key}")] = serde_json::to_value(&table)?;
        if key == "chain_length" {
            openground_core::util::write_atomic(
                &args.out_dir.join("curves.csv"),
                eval::render_breakdown_csv(&table).as_bytes(),
            )?;
        }
    }
    openground_core::util::write_json_atomic(&args.out_dir.join("report.json"), &report)?;
    openground_core::util::write_atomic(&args.out_dir.join("report.txt"), text.as_bytes())?;
    if !args.quiet {
        print!("{text}");
    }
    println!("results: {}", args.out_dir.join("results.jsonl").display());
    Ok(())
}

#[derive(Debug, Deserialize)]
struct PredictionRow {
    strategy: String,
    task_id: String,
    sequence: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct PredictionsFile {
    predictions: Vec<PredictionRow>,
}

pub fn waed(args: WaedArgs) -> Result<()> {
    let raw = std::fs::read(&args.predictions)
        .with_context(|| format!("reading {}", args.predictions.display()))?;
    let file: PredictionsFile = serde_json::from_slice(&raw)
        .with_context(|| format!("parsing {}", args.predictions.display()))?;
    let humans = HumanChainSet::load(&args.human_chains)?;

    let mut by_strategy: BTreeMap<String, BTreeMap<String, Vec<String>>> = BTreeMap::new();
    for row in file.predictions {
        by_strategy
            .entry(row.strategy)
            .or_default()
            .insert(row.task_id, row.sequence);
    }
    if by_strategy.is_empty() {
        bail!("predictions file contains no rows");
    }

    let human_ids: Vec<&String> = humans.tasks.keys().collect();
    for (strategy, predictions) in &by_strategy {
        let missing: Vec<&String> = predictions
            .keys()
            .filter(|t| !humans.tasks.contains_key(*t))
            .collect();
        let extra: Vec<&&String> = human_ids
            .iter()
            .filter(|t| !predictions.contains_key(**t))
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            bail!(
                "strategy {strategy:?}: task ids do not match human data; predictions without humans {missing:?}, humans without predictions {extra:?}"
            );
        }
    }

    let baseline = waed_human(&humans);
    let mut strategies = BTreeMap::new();
    for (strategy, predictions) in &by_strategy {
        let value = waed_model(predictions, &humans)?;
        println!("waed[{strategy}] = {value:.6}");
        strategies.insert(strategy.clone(), value);
    }
    println!("human baseline = {baseline:.6}");
    let report = serde_json::json!({
        "strategies": strategies,
        "human_baseline": baseline,
    });
    openground_core::util::write_json_atomic(&args.out, &report)?;
    println!("report: {}", args.out.display());
    Ok(())
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut merged_queries = Vec::new();
    for i in 0..args.count {
        let seed = args.seed.unwrap_or(0) + i;
        let spec = match &args.spec {
            Some(path) => {
                let mut spec = synth::SynthSpec::load(path)?;
                if let Some(s) = args.seed {
                    spec.seed = s + i;
                }
                if args.count > 1 {
                    spec.scene_id = format!("{}-{i:02}", spec.scene_id);
                }
                spec
            }
            None => {
                let scene_id = if args.count > 1 {
                    format!("{}-{i:02}", args.scene_id)
                } else {
                    args.scene_id.clone()
                };
                synth::cabinet_spec(&scene_id, seed)
            }
        };
        let output = synth::generate(&spec)?;
        let scene_dir = args.out.join(&spec.scene_id);
        synth::write_outputs(&scene_dir, &output)?;
        println!(
            "scene {}: {} points, {} views, {} table entries, {} queries -> {}",
            spec.scene_id,
            output.scene.cloud.len(),
            output.scene.view_ids().len(),
            output.olt.len(),
            output.queries.len(),
            scene_dir.display()
        );
        merged_queries.extend(output.queries);
    }
    let mut body = String::new();
    for record in &merged_queries {
        body.push_str(&serde_json::to_string(record)?);
        body.push('\n');
    }
    let merged = args.out.join(openground_core::synth::QUERIES_FILE);
    openground_core::util::write_atomic(&merged, body.as_bytes())?;
    println!("queries: {}", merged.display());
    Ok(())
}

pub fn render(args: RenderArgs) -> Result<()> {
    let config = args.engine.resolve()?;
    let (scene, table, _) = load_scene_and_olt(&args.scene, Some(args.olt.as_path()))?;
    let vis = ViewVisibility::compute(&scene, &config.visibility())?;
    let mode: AnnotationMode = args.mode.parse().map_err(anyhow::Error::msg)?;

    let target_of = |id: u32| -> Result<AnnotationTarget> {
        let entry = table.get(id)?;
        Ok(AnnotationTarget {
            id,
            label: entry.label.clone(),
            points: table.entry_points(id, &scene)?,
            bbox: entry.bbox,
        })
    };
    let candidates: Vec<AnnotationTarget> = args
        .ids
        .iter()
        .copied()
        .map(target_of)
        .collect::<Result<_>>()?;
    let grounded: Vec<AnnotationTarget> = args
        .grounded_ids
        .iter()
        .copied()
        .map(target_of)
        .collect::<Result<_>>()?;
    // For all_mentioned the whole table stands in for "labels in the query".
    let mentioned: Vec<AnnotationTarget> = table
        .iter()
        .map(|e| target_of(e.id))
        .collect::<Result<_>>()?;

    let targets = annotation_targets(mode, &grounded, &candidates, &mentioned);
    let rendered = render_annotations(&scene, &vis, args.view, &targets)?;
    let mut png = Vec::new();
    rendered
        .image
        .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)?;
    openground_core::util::write_atomic(&args.out, &png)?;
    println!(
        "annotated view {} with {} boxes -> {}",
        args.view,
        rendered.drawn.len(),
        args.out.display()
    );
    Ok(())
}

pub fn record(args: RecordArgs) -> Result<()> {
    let config = args.engine.resolve()?;
    let fixtures = args
        .backend
        .fixtures
        .clone()
        .context("record needs --fixtures as the capture output path")?;

    match (&args.scene, &args.query, &args.scenes, &args.queries) {
        (Some(scene_dir), Some(query), None, None) => {
            let (scene, table, root) = load_scene_and_olt(scene_dir, args.olt.as_deref())?;
            let mut backend_args = args.backend.clone();
            backend_args.fixtures = None;
            let built = backends::build(&backend_args, &config, &[root.as_path()], true)?;
            let run = pipeline::ground(&scene, &table, query, &config, &built.backends);
            print_run(&run);
            save_recordings(&built, &fixtures, args.backend.seg_fixtures.as_deref())?;
            run.outcome?;
            Ok(())
        }
        (None, None, Some(scenes), Some(queries_path)) => {
            let queries = pipeline::load_queries(queries_path)?;
            let mut backend_args = args.backend.clone();
            backend_args.fixtures = None;
            let built = backends::build(&backend_args, &config, &[scenes.as_path()], true)?;
            let results =
                ground_batch(scenes, &queries, &config, &built.backends, None, args.jobs)?;
            save_recordings(&built, &fixtures, args.backend.seg_fixtures.as_deref())?;
            let ok = results.iter().filter(|r| r.status == "ok").count();
            println!("recorded {} queries ({ok} ok)", results.len());
            Ok(())
        }
        _ => bail!("record needs either --scene with --query, or --scenes with --queries"),
    }
}

fn save_recordings(
    built: &backends::BuiltBackends,
    fixtures: &Path,
    seg_fixtures: Option<&Path>,
) -> Result<()> {
    let recorder = built
        .vlm_recorder
        .as_ref()
        .expect("record mode attaches a recorder");
    recorder.save(fixtures)?;
    println!(
        "fixtures: {} ({} exchanges)",
        fixtures.display(),
        recorder.entries().len()
    );
    if let (Some(path), Some(seg)) = (seg_fixtures, built.seg_recorder.as_ref()) {
        seg.save(path)?;
        println!(
            "seg fixtures: {} ({} exchanges)",
            path.display(),
            seg.entries().len()
        );
    }
    Ok(())
}

pub fn replay(args: ReplayArgs) -> Result<()> {
    let config = args.engine.resolve()?;
    let mut backend_args = args.backend.clone();
    backend_args.backend = "mock".to_string();
    if backend_args.fixtures.is_none() {
        bail!("replay needs --fixtures from a previous record run");
    }

    match (&args.scene, &args.query, &args.scenes, &args.queries) {
        (Some(scene_dir), Some(query), None, None) => {
            let (scene, table, root) = load_scene_and_olt(scene_dir, args.olt.as_deref())?;
            let built = backends::build(&backend_args, &config, &[root.as_path()], false)?;
            let run = pipeline::ground(&scene, &table, query, &config, &built.backends);
            print_run(&run);
            let bbox = run.outcome?;
            println!("target box: {}", serde_json::to_string(&bbox)?);
            Ok(())
        }
        (None, None, Some(scenes), Some(queries_path)) => {
            let queries = pipeline::load_queries(queries_path)?;
            let built = backends::build(&backend_args, &config, &[scenes.as_path()], false)?;
            let results = ground_batch(
                scenes,
                &queries,
                &config,
                &built.backends,
                args.trace_dir.as_deref(),
                args.jobs,
            )?;
            let out = args
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("results.jsonl"));
            pipeline::write_results(&out, &results)?;
            let ok = results.iter().filter(|r| r.status == "ok").count();
            println!(
                "replayed {} queries ({ok} ok) -> {}",
                results.len(),
                out.display()
            );
            Ok(())
        }
        _ => bail!("replay needs either --scene with --query, or --scenes with --queries"),
    }
}
